//! Named random sub-streams derived from one root seed.
//!
//! Each component draws from its own ChaCha stream, so enabling or disabling
//! one component never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    SourceTrain,
    Generator,
    Select,
    Adapt,
    Augment,
    Spmis,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::SourceTrain => 3,
            Stream::Generator => 4,
            Stream::Select => 5,
            Stream::Adapt => 6,
            Stream::Augment => 7,
            Stream::Spmis => 8,
        }
    }
}

/// Generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Generator for an arbitrary numbered stream, used where a component needs
/// several independent sources (e.g. one per class).
pub fn numbered(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + id);
    rng
}
