//! Seed plumbing. Every stochastic routine takes an explicit `u64` seed and
//! derives independent sub-streams from it, so results never depend on how
//! work is batched or sharded.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream ^ 0xD1B5_4A32_D192_ED03))
}

pub fn standard_normal(shape: &[usize], rng: &mut Rng) -> ArrayD<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("normal draw shape")
}

/// A batch of standard normal draws where row `i` comes from its own seed.
pub fn normal_rows(row_shape: &[usize], seeds: &[u64]) -> ArrayD<f64> {
    let row_len: usize = row_shape.iter().product();
    let mut data = Vec::with_capacity(row_len * seeds.len());
    for &s in seeds {
        let mut rng = rng_from(s);
        data.extend((0..row_len).map(|_| { let v: f64 = StandardNormal.sample(&mut rng); v }));
    }
    let mut shape = vec![seeds.len()];
    shape.extend_from_slice(row_shape);
    ArrayD::from_shape_vec(IxDyn(&shape), data).expect("normal rows shape")
}
