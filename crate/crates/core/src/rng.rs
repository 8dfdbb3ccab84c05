//! Seeded random streams.
//!
//! Every source of randomness in the crate is derived from a `(seed, stream)`
//! pair so that data generation, augmentation, masking and noise are pure
//! functions of the run seed and the step index. Candle's own CPU RNG is never
//! used.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// Stream tags keep independent consumers of the same seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Batch = 3,
    Views = 4,
    Plan = 5,
    Noise = 6,
    Probe = 7,
    Sample = 8,
    Extractor = 9,
    Epoch = 10,
}

/// A ChaCha8 generator keyed by seed, stream tag and a sub-index (usually a step
/// or sample index).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    rng.set_stream(index);
    rng
}

pub fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    let n = shape.iter().product();
    let v = normal_vec(rng, n);
    Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)?)
}

pub fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(dtype)?)
}

/// Samples from a normal truncated to two standard deviations.
pub fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
