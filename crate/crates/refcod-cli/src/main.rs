//! Command-line entry points: train, eval, predict, stats, toygen.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data/io error,
//! 4 numeric failure.

use clap::{Args, Parser, Subcommand};
use refcod::config::RunConfig;
use refcod::dataset::{load_index, Split};
use refcod::error::Error;
use refcod::evaluation::{evaluate_dataset, predict_image};
use refcod::imageio;
use refcod::reference::ForegroundProvider;
use refcod::train::{loss_csv_header, load_model_and_state, LossRow, Trainer};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "refcod",
    about = "Reference-guided camouflaged object segmentation"
)]
struct Cli {
    /// Path to a TOML config file layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// key=value overrides layered over the config file (repeatable).
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint + loss log under output.dir.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Predict a mask for one image from referring images.
    Predict(PredictArgs),
    /// Per-object attribute statistics over both subsets.
    Stats,
    /// Generate the synthetic toy dataset.
    Toygen(ToygenArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of referring images (0 = reference-free baseline mode).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// The camouflage image.
    #[arg(long)]
    image: PathBuf,
    /// Referring images (at least one).
    #[arg(long = "ref")]
    refs: Vec<PathBuf>,
    /// Output PNG path (default: <output.dir>/prediction.png).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ToygenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    categories: usize,
    /// Camouflage images per category (split 80/20 into train/test).
    #[arg(long, default_value_t = 16)]
    camo: usize,
    /// Referring images per category (split 80/20 into train/test).
    #[arg(long, default_value_t = 25)]
    refs: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.sets {
        cfg.apply_override(assignment)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::WriteFailure {
        path: dir.display().to_string(),
        source: e,
    })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::WriteFailure {
        path: path.display().to_string(),
        source: e,
    })
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    refcod::nn::splitmix64(cfg.train.seed ^ 0xEA11)
}

fn cmd_train(cfg: &RunConfig) -> Result<(), Error> {
    println!("# effective config\n{}", cfg.to_toml());
    let out_dir = ensure_out_dir(cfg)?;
    let mut trainer = Trainer::new(cfg)?;
    let mut rows: Vec<String> = vec![loss_csv_header().to_string()];
    let total = cfg.train.steps;
    let mut last_print = std::time::Instant::now();
    trainer.run(|row: &LossRow| {
        rows.push(row.to_csv());
        if row.step == 0 || row.step + 1 == total || last_print.elapsed().as_secs() >= 5 {
            println!(
                "step {:>6}/{} lr {:.3e} loss {:.5}",
                row.step + 1,
                total,
                row.lr,
                row.report.total
            );
            last_print = std::time::Instant::now();
        }
    })?;
    let manifest = trainer.save_checkpoint(&out_dir.join("checkpoint.bin"))?;
    write_text(&out_dir.join("checkpoint.manifest.json"), &manifest)?;
    write_text(&out_dir.join("loss.csv"), &(rows.join("\n") + "\n"))?;
    write_text(&out_dir.join("config.toml"), &cfg.to_toml())?;
    println!("checkpoint written to {}", out_dir.join("checkpoint.bin").display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<(), Error> {
    println!("# effective config\n{}", cfg.to_toml());
    if !args.checkpoint.is_file() {
        return Err(Error::Data(format!(
            "checkpoint not found: {}",
            args.checkpoint.display()
        )));
    }
    let out_dir = ensure_out_dir(cfg)?;
    let (model, ckpt_cfg, _opt) = load_model_and_state(&args.checkpoint)?;
    let provider = ForegroundProvider::from_config(&cfg.reference.provider)?;
    let k = args.k.unwrap_or(cfg.data.k);
    let index = load_index(Path::new(&cfg.data.root), Split::Test)?;
    let outcome = evaluate_dataset(
        &model,
        &provider,
        &index,
        k,
        ckpt_cfg.data.image_size,
        eval_seed(cfg),
    )?;
    write_text(&out_dir.join("report.json"), &outcome.report.to_json())?;
    write_text(&out_dir.join("curves.csv"), &outcome.curves.to_csv())?;
    print!("{}", outcome.report.to_table());
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, args: &PredictArgs) -> Result<(), Error> {
    if args.refs.is_empty() {
        return Err(Error::Config(
            "predict needs at least one --ref image".into(),
        ));
    }
    if !args.checkpoint.is_file() {
        return Err(Error::Data(format!(
            "checkpoint not found: {}",
            args.checkpoint.display()
        )));
    }
    let (model, ckpt_cfg, _opt) = load_model_and_state(&args.checkpoint)?;
    let provider = ForegroundProvider::from_config(&cfg.reference.provider)?;
    let camo = imageio::load_image_rgb(&args.image)?;
    let mut refs = Vec::new();
    let mut ref_masks = Vec::new();
    for r in &args.refs {
        refs.push(imageio::load_image_rgb(r)?);
        let mask_path = r.with_extension("png");
        ref_masks.push(if mask_path.is_file() {
            Some(imageio::load_mask(&mask_path)?)
        } else {
            None
        });
    }
    let mut eff = cfg.clone();
    eff.data.image_size = ckpt_cfg.data.image_size;
    let pred = predict_image(&model, &provider, &eff, &camo, &refs, &ref_masks)?;
    let out_path = match &args.out {
        Some(p) => p.clone(),
        None => ensure_out_dir(cfg)?.join("prediction.png"),
    };
    imageio::save_gray_png(&out_path, &pred)?;
    println!("prediction written to {}", out_path.display());
    Ok(())
}

fn quantiles(mut values: Vec<f64>) -> [f64; 5] {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| -> f64 {
        if values.is_empty() {
            return f64::NAN;
        }
        let idx = (q * (values.len() - 1) as f64).round() as usize;
        values[idx]
    };
    [pick(0.0), pick(0.25), pick(0.5), pick(0.75), pick(1.0)]
}

fn cmd_stats(cfg: &RunConfig) -> Result<(), Error> {
    println!("# effective config\n{}", cfg.to_toml());
    let out_dir = ensure_out_dir(cfg)?;
    let root = Path::new(&cfg.data.root);
    let mut csv = String::from("subset,split,category,stem,area,ratio,distance,global_contrast\n");
    let mut collected: std::collections::BTreeMap<(String, &'static str), Vec<f64>> =
        std::collections::BTreeMap::new();
    let mut n_rows = 0usize;
    for split in [Split::Train, Split::Test] {
        let index = load_index(root, split)?;
        let mut entries: Vec<(&'static str, PathBuf, PathBuf, usize)> = Vec::new();
        for r in &index.camo_records {
            entries.push(("camo", r.image_path.clone(), r.mask_path.clone(), r.category_id));
        }
        for r in &index.ref_records {
            let mask = r.mask_path.clone().ok_or_else(|| {
                Error::Data(format!(
                    "stats needs masks for referring images; missing for {}",
                    r.image_path.display()
                ))
            })?;
            entries.push(("ref", r.image_path.clone(), mask, r.category_id));
        }
        for (subset, image_path, mask_path, category_id) in entries {
            let image = imageio::load_image_rgb(&image_path)?;
            let mask = imageio::load_mask(&mask_path)?;
            let stats = refcod::dataset::stats::compute_object_stats(&image, &mask)?;
            let stem = image_path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            csv.push_str(&format!(
                "{subset},{split},{},{stem},{},{:.8},{:.8},{:.8}\n",
                index.categories[category_id], stats.area, stats.ratio, stats.distance,
                stats.global_contrast
            ));
            n_rows += 1;
            for (attr, value) in [
                ("area", stats.area as f64),
                ("ratio", stats.ratio),
                ("distance", stats.distance),
                ("global_contrast", stats.global_contrast),
            ] {
                collected
                    .entry((attr.to_string(), subset))
                    .or_default()
                    .push(value);
            }
        }
    }
    if n_rows == 0 {
        return Err(Error::Data("no images with masks found".into()));
    }
    write_text(&out_dir.join("stats.csv"), &csv)?;
    println!(
        "{:<18} {:<6} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "attribute", "subset", "min", "q25", "median", "q75", "max"
    );
    for ((attr, subset), values) in collected {
        let q = quantiles(values);
        println!(
            "{attr:<18} {subset:<6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            q[0], q[1], q[2], q[3], q[4]
        );
    }
    println!("rows written: {n_rows} -> {}", out_dir.join("stats.csv").display());
    Ok(())
}

fn cmd_toygen(args: &ToygenArgs) -> Result<(), Error> {
    let spec = refcod::dataset::toy::ToySpec {
        n_categories: args.categories,
        n_camo_per_cat: args.camo,
        n_ref_per_cat: args.refs,
        image_size: args.size,
        rng_seed: args.seed,
    };
    let index = refcod::dataset::toy::generate_toy_dataset(&args.out, &spec)?;
    println!(
        "generated {} camo and {} referring images over {} categories at {}",
        index.camo_records.len(),
        index.ref_records.len(),
        index.categories.len(),
        args.out.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = (|| -> Result<(), Error> {
        match &cli.command {
            Command::Toygen(args) => cmd_toygen(args),
            Command::Train => cmd_train(&load_config(&cli)?),
            Command::Eval(args) => cmd_eval(&load_config(&cli)?, args),
            Command::Predict(args) => cmd_predict(&load_config(&cli)?, args),
            Command::Stats => cmd_stats(&load_config(&cli)?),
        }
    })();
    if let Err(e) = result {
        let _ = writeln!(std::io::stderr(), "error: {e}");
        std::process::exit(e.exit_code());
    }
}
