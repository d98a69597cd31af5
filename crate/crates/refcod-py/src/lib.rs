//! Python bindings; filled in once the core surface is complete.
