//! Neural building blocks on top of [`crate::tape`].
//!
//! Blocks hold only parameter *names* and shapes; values live in a
//! [`ParamStore`] so one store can be shared read-only by concurrent
//! evaluations while training owns it exclusively.

mod attention;
mod conformer;
mod kan;
mod layers;
mod ppe;
mod tcn;
mod transformer;

pub use attention::{build_attention_bias, AttentionBias, MultiHeadAttention};
pub use conformer::{ConformerBlock, ConvModule, KanFeedForward};
pub use kan::{kan_forward, KanLayer, KanLayerParams, SplineBasis};
pub use layers::{DepthwiseConv, LayerNorm, Linear};
pub use ppe::periodic_positional_encoding;
pub use tcn::{tcn_forward, Tcn, TcnLayerSpec};
pub use transformer::{TransformerBlock, TransformerStack};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tape::Mat;

/// Registers freshly initialized parameters under dotted names.
pub struct Builder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn add(&mut self, name: &str, value: Mat) -> String {
        assert!(
            self.store.get(name).is_none(),
            "duplicate parameter `{name}`"
        );
        self.store.insert(name, value, false);
        name.to_owned()
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}
