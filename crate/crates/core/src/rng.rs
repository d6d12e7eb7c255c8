//! Reproducible per-draw-site random streams.
//!
//! Every stochastic update in a run is identified by `(chain, iteration, site)`. The
//! stream for that triple is a ChaCha8 keystream: the key is derived from the run seed
//! and chain, the 64-bit ChaCha stream id is the site id, and the block counter starts
//! at `iteration << WORDS_PER_VISIT_LOG2`. Distinct triples therefore read disjoint
//! regions of the keystream, and the values a site sees never depend on which worker
//! thread runs it or in what order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Each (iteration, site) visit owns 2^20 32-bit words of keystream.
pub const WORDS_PER_VISIT_LOG2: u32 = 20;

/// Iteration index reserved for draws made before the first sweep.
pub const INIT_ITERATION: u64 = 0;

/// Chain index reserved for run-level draws shared by all chains.
pub const RUN_LEVEL_CHAIN: u64 = u64::MAX;

/// A stochastic draw site. The kind occupies the top byte of the id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    Epsilon {
        gene: usize,
        sample: usize,
        samples: usize,
    },
    Gamma {
        gene: usize,
    },
    Beta {
        gene: usize,
        coef: usize,
        coefs: usize,
    },
    Theta {
        coef: usize,
    },
    Sigma {
        coef: usize,
    },
    Nu,
    Tau,
    /// Joint shift of β_gℓ and ε_g· along the likelihood ridge.
    Ridge {
        gene: usize,
        coef: usize,
        coefs: usize,
    },
    /// Starting-value jitter for one parameter block.
    Init {
        block: u8,
    },
    /// Choice of retained genes.
    SaveGenes,
    /// Generative simulation, one stream per gene.
    Simulate {
        gene: usize,
    },
    /// Row resampling.
    Resample,
}

impl Site {
    pub fn id(self) -> u64 {
        let (kind, index): (u64, u64) = match self {
            Site::Epsilon {
                gene,
                sample,
                samples,
            } => (1, (gene * samples + sample) as u64),
            Site::Gamma { gene } => (2, gene as u64),
            Site::Beta { gene, coef, coefs } => (3, (gene * coefs + coef) as u64),
            Site::Theta { coef } => (4, coef as u64),
            Site::Sigma { coef } => (5, coef as u64),
            Site::Nu => (6, 0),
            Site::Tau => (7, 0),
            Site::Init { block } => (8, block as u64),
            Site::SaveGenes => (9, 0),
            Site::Simulate { gene } => (10, gene as u64),
            Site::Resample => (11, 0),
            Site::Ridge { gene, coef, coefs } => (12, (gene * coefs + coef) as u64),
        };
        debug_assert!(index < 1 << 56);
        (kind << 56) | index
    }
}

/// Factory for the streams of one (seed, chain) pair.
#[derive(Clone)]
pub struct StreamKey {
    base: ChaCha8Rng,
}

impl StreamKey {
    pub fn new(seed: u64, chain: u64) -> Self {
        let mut key = [0u8; 32];
        let mut seed_state = seed ^ 0x6a09_e667_f3bc_c908;
        let mut chain_state = chain ^ 0xbb67_ae85_84ca_a73b;
        for chunk in key.chunks_exact_mut(8) {
            let word = splitmix64(&mut seed_state) ^ splitmix64(&mut chain_state).rotate_left(29);
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self {
            base: ChaCha8Rng::from_seed(key),
        }
    }

    /// The stream for `site` at `iteration`.
    pub fn stream(&self, iteration: u64, site: Site) -> ChaCha8Rng {
        self.stream_by_id(iteration, site.id())
    }

    pub fn stream_by_id(&self, iteration: u64, param_id: u64) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(param_id);
        rng.set_word_pos(u128::from(iteration) << WORDS_PER_VISIT_LOG2);
        rng
    }
}

/// `substream(seed, chain, iteration, param_id)` as a free function.
pub fn substream(seed: u64, chain: u64, iteration: u64, param_id: u64) -> ChaCha8Rng {
    StreamKey::new(seed, chain).stream_by_id(iteration, param_id)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
