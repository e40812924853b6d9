//! Repeat-usage modelling for web access logs.
//!
//! Usage frequencies of an item (a collection of web pages) are modelled
//! with the logarithmic series distribution (LSD) and its extension by
//! one-time users (LSD/OTB). The crate covers the whole path from raw access
//! logs to retention diagnostics:
//!
//! 1. [`sessionize`]: parse logs, drop robots, build sessions and per-item
//!    frequency tables.
//! 2. [`estimation`]: maximum-likelihood fits (mean matching, EM, direct).
//! 3. [`gof`]: chi-square goodness of fit with tail merging.
//! 4. [`diagnostics`]: repeat-user shares and windowed trend analysis.
//! 5. [`simulate`]: seeded synthetic populations and logs.
//! 6. [`cli`]: the `repeat-usage` command-line tool.

pub mod cli;
pub mod distributions;
pub mod error;
pub mod estimation;
pub mod diagnostics;
pub mod gof;
pub mod sessionize;
pub mod simulate;

pub use error::{Error, Result};
