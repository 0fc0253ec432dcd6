//! Seeded random streams. Every random draw in the toolkit comes from a
//! ChaCha8 stream derived from `(seed, stream id)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// Stream identifiers; distinct uses never share a stream.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const ANCHORS: u64 = 2;
    pub const SHUFFLE_SOURCE: u64 = 3;
    pub const SHUFFLE_TARGET: u64 = 4;
    pub const SCENE_BASE: u64 = 1 << 32;
    pub const PROPOSAL_BASE: u64 = 1 << 40;
    /// Plus the global iteration index.
    pub const ROI_SAMPLE_BASE: u64 = 1 << 48;
}

pub fn stream(seed: u64, stream_id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Serializable position of a stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<Rng> {
        let pos: u128 = self.word_pos.parse().ok()?;
        let mut rng = stream(self.seed, self.stream);
        rng.set_word_pos(pos);
        Some(rng)
    }
}
