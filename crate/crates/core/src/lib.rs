//! Core algorithms for black-box auditing of binary meme classifiers.
//!
//! Everything here is pure and allocation-only (`no_std` + `alloc`): label
//! schemas, prompt rendering, free-text output parsing, classification
//! metrics and agreement, SLIC superpixels with white-patch occlusion, the
//! occlusion case taxonomy, and the embedding-cluster error typology.
//! Network, file formats and the command line live in the `memeaudit` crate.

#![no_std]

extern crate alloc;

pub mod audit;
pub mod corpus;
pub mod metrics;
pub mod occlusion;
pub mod parse;
pub mod prompt;
pub mod raster;
pub mod slic;
pub mod stoplist;
pub mod typology;

pub use audit::{AuditOutcome, AuditSummary, Case};
pub use corpus::{DatasetManifest, LabelSchema, MemeSample, Polarity};
pub use parse::{Ambiguity, ParsedPrediction, SupportStat};
pub use prompt::{InputPattern, OutputPattern, PromptSpec, RenderedPrompt};
pub use raster::RasterImage;
pub use slic::{SlicParams, SuperpixelMap};

/// Rounds to `decimals` places, halves away from zero, for display.
///
/// A relative nudge of 1e-9 absorbs binary representation error so that
/// decimal ties such as `69.9475` round the way they read.
pub fn round_half_up(value: f64, decimals: u32) -> f64 {
    let scale = libm::pow(10.0, decimals as f64);
    let scaled = value * scale;
    let nudged = scaled + libm::copysign(1e-9 * libm::fabs(scaled).max(1.0), scaled);
    libm::copysign(libm::floor(libm::fabs(nudged) + 0.5), value) / scale
}

/// Formats a value with two decimals using [`round_half_up`].
pub fn fmt2(value: f64) -> alloc::string::String {
    alloc::format!("{:.2}", round_half_up(value, 2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_rounding_matches_table_display() {
        assert_eq!(fmt2(69.9475), "69.95");
        assert_eq!(fmt2(68.8209), "68.82");
        assert_eq!(fmt2(0.125), "0.13");
        assert_eq!(fmt2(-0.125), "-0.13");
        assert_eq!(fmt2(100.0), "100.00");
        assert_eq!(fmt2(73.333_333), "73.33");
    }
}
