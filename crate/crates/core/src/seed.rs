//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream `stream` of the generator seeded by `master`.
///
/// Streams are addressed by counter, so the draws for one stream do not depend
/// on which other streams are used or in what order.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_of_order() {
        let a: u64 = stream_rng(7, 3).random();
        let _: u64 = stream_rng(7, 1).random();
        assert_eq!(a, stream_rng(7, 3).random::<u64>());
        assert_ne!(a, stream_rng(7, 4).random::<u64>());
        assert_ne!(a, stream_rng(8, 3).random::<u64>());
    }
}
