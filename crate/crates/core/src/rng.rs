use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one user seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    EmbeddingInit = 1,
    ProjectionInit = 2,
    SmaxHeadInit = 3,
    Pairs = 4,
    Shuffle = 5,
    FewShot = 6,
    Batches = 7,
    Mlp = 8,
    Synthetic = 9,
}

pub fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
