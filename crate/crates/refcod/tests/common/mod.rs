//! Shared helpers for the integration suites: independent definition-level
//! metric oracles, a finite-difference gradient checker, and random fixture
//! generators. Oracles are written as plain loops, separate from the library
//! implementations they validate.

#![allow(dead_code)]

pub mod oracles;

use ndarray::{Array2, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refcod::autodiff::{Tape, Var};

/// Central-difference gradient check for a scalar-valued graph of several
/// inputs. Verifies `samples` randomly chosen coordinates per input.
pub fn check_gradients<F>(
    build: &F,
    inputs: &[ArrayD<f64>],
    samples: usize,
    tol: f64,
    seed: u64,
) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.input(a.clone())).collect();
    let loss = build(&mut tape, &vars);
    assert_eq!(tape.value(loss).len(), 1, "loss must be scalar");
    tape.backward(loss);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
        })
        .collect();

    let eval = |modified: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = modified.iter().map(|a| t.input(a.clone())).collect();
        let l = build(&mut t, &vs);
        t.scalar(l)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, arr) in inputs.iter().enumerate() {
        let n = arr.len();
        let count = samples.min(n);
        for _ in 0..count {
            let idx = rng.random_range(0..n);
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[idx] += h;
            minus[i].as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i].as_slice().unwrap()[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel < tol,
                "input {i} coord {idx}: analytic {a} vs fd {fd} (rel {rel:.3e})"
            );
        }
    }
    worst
}

/// Random prediction map in [0,1]: a soft blob plus noise, occasionally
/// near-binary, exercising both smooth and hard regions.
pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let sigma = rng.random_range(2.0..(h.max(w) as f64));
    let noise = rng.random_range(0.0..0.4);
    let harden = rng.random_range(0..3) == 0;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
        let mut v = (-d2 / (2.0 * sigma * sigma)).exp();
        v += noise * rng.random_range(-1.0..1.0);
        let v = v.clamp(0.0, 1.0);
        if harden {
            if v > 0.5 {
                1.0
            } else {
                0.0
            }
        } else {
            v
        }
    })
}

/// Random binary mask with at least one foreground pixel.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    loop {
        let mode = rng.random_range(0..3);
        let m = match mode {
            0 => {
                // Elliptical blob.
                let cy = rng.random_range(0.2..0.8) * h as f64;
                let cx = rng.random_range(0.2..0.8) * w as f64;
                let ry = rng.random_range(0.1..0.45) * h as f64;
                let rx = rng.random_range(0.1..0.45) * w as f64;
                Array2::from_shape_fn((h, w), |(i, j)| {
                    let dy = (i as f64 + 0.5 - cy) / ry;
                    let dx = (j as f64 + 0.5 - cx) / rx;
                    (dy * dy + dx * dx <= 1.0) as u8 as f64
                })
            }
            1 => {
                // Sparse salt.
                let p = rng.random_range(0.02..0.3);
                Array2::from_shape_fn((h, w), |_| (rng.random_range(0.0..1.0) < p) as u8 as f64)
            }
            _ => {
                // Half-plane with a random offset.
                let cut = rng.random_range(1..h.max(2));
                Array2::from_shape_fn((h, w), |(i, _)| (i < cut) as u8 as f64)
            }
        };
        let fg = m.sum();
        if fg >= 1.0 && fg < (h * w) as f64 {
            return m;
        }
    }
}
