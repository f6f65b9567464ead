//! Speech to ARKit blendshape animation with an emotion/speaker style memory.
//!
//! The guide in `book/` walks through each module with runnable snippets.

pub mod decoder;
pub mod encoders;
pub mod error;
pub mod esmm;
pub mod gradcheck;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod nnblocks;
pub mod params;
pub mod signal;
pub mod synthdata;
pub mod tape;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/signal.md")]
    mod signal {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/style-memory.md")]
    mod style_memory {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/mesh.md")]
    mod mesh {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
