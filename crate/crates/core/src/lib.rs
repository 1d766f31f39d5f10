pub mod classify;
pub mod features;
pub mod runtime;
pub mod sessions;
pub mod signal;
