//! Rotary position embedding, including deferred application to cached keys.
//!
//! The cache pool stores keys before rotation. When a chunk is reused inside a
//! new prompt its keys are rotated with their true global positions, so reused
//! and freshly computed keys share one positional frame.

use crate::error::{shape_err, Result};
use crate::kvcore::SeqTensor;

/// How the rotated dimension pairs are laid out inside a head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pairing {
    /// Pairs `(2j, 2j+1)`.
    #[default]
    Adjacent,
    /// Pairs `(j, j + D/2)`.
    SplitHalf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeParams {
    /// Frequency base; `omega_j = base^(-2j/D)`.
    pub base: f64,
    pub head_dim: usize,
    /// Multiplier applied to positions.
    pub scaling: f64,
    pub pairing: Pairing,
}

impl RopeParams {
    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_base(head_dim, 10_000.0)
    }

    pub fn with_base(head_dim: usize, base: f64) -> Result<Self> {
        let p = Self { base, head_dim, scaling: 1.0, pairing: Pairing::Adjacent };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 1.0) {
            return Err(shape_err(format!("rope base {} must be > 1", self.base)));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(shape_err(format!("rope head_dim {} must be even", self.head_dim)));
        }
        Ok(())
    }

    /// Angular frequency of pair `j`.
    pub fn omega(&self, j: usize) -> f64 {
        self.base.powf(-2.0 * j as f64 / self.head_dim as f64)
    }

    fn pair(&self, j: usize) -> (usize, usize) {
        match self.pairing {
            Pairing::Adjacent => (2 * j, 2 * j + 1),
            Pairing::SplitHalf => (j, j + self.head_dim / 2),
        }
    }
}

/// Rotates each token's keys by its position.
pub fn rope_apply(keys: &SeqTensor, positions: &[usize], params: &RopeParams) -> Result<SeqTensor> {
    rotate(keys, positions, params, 1.0)
}

/// Undoes [`rope_apply`] (rotation by the negated positions).
pub fn rope_unapply(keys: &SeqTensor, positions: &[usize], params: &RopeParams) -> Result<SeqTensor> {
    rotate(keys, positions, params, -1.0)
}

fn rotate(keys: &SeqTensor, positions: &[usize], params: &RopeParams, sign: f64) -> Result<SeqTensor> {
    params.validate()?;
    if positions.len() != keys.n_tokens() {
        return Err(shape_err(format!(
            "{} positions for {} tokens",
            positions.len(),
            keys.n_tokens()
        )));
    }
    if keys.head_dim() != params.head_dim {
        return Err(shape_err(format!(
            "keys have head_dim {}, rope params expect {}",
            keys.head_dim(),
            params.head_dim
        )));
    }
    let mut out = keys.clone();
    rotate_rows(out.data_mut(), keys.n_heads(), positions, params, sign);
    Ok(out)
}

/// In-place rotation over a raw `[token][head][dim]` buffer.
pub(crate) fn rotate_rows(
    data: &mut [f32],
    n_heads: usize,
    positions: &[usize],
    params: &RopeParams,
    sign: f64,
) {
    let d = params.head_dim;
    let half = d / 2;
    let omegas: Vec<f64> = (0..half).map(|j| params.omega(j)).collect();
    for (row, &p) in data.chunks_exact_mut(n_heads * d).zip(positions) {
        let pos = sign * p as f64 * params.scaling;
        let (sins, coss): (Vec<f64>, Vec<f64>) = omegas.iter().map(|w| (pos * w).sin_cos()).unzip();
        for head in row.chunks_exact_mut(d) {
            for j in 0..half {
                let (a, b) = params.pair(j);
                let (x, y) = (f64::from(head[a]), f64::from(head[b]));
                head[a] = (x * coss[j] - y * sins[j]) as f32;
                head[b] = (x * sins[j] + y * coss[j]) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_keys(seed: u64, n: usize, h: usize, d: usize) -> SeqTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeqTensor::from_fn(n, h, d, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    #[test]
    fn zero_positions_are_identity() {
        let k = random_keys(1, 5, 2, 8);
        let p = RopeParams::new(8).unwrap();
        assert_eq!(rope_apply(&k, &[0; 5], &p).unwrap(), k);
    }

    #[test]
    fn unit_rotation() {
        let k = SeqTensor::new(vec![1.0, 0.0], 1, 1, 2).unwrap();
        let p = RopeParams::new(2).unwrap();
        let out = rope_apply(&k, &[1], &p).unwrap();
        assert_eq!(out.data(), &[1f64.cos() as f32, 1f64.sin() as f32]);
    }

    #[test]
    fn split_half_pairs_far_dims() {
        let k = SeqTensor::new(vec![1.0, 0.0, 0.0, 0.0], 1, 1, 4).unwrap();
        let p = RopeParams { pairing: Pairing::SplitHalf, ..RopeParams::new(4).unwrap() };
        let out = rope_apply(&k, &[1], &p).unwrap();
        assert_eq!(out.data()[0], 1f64.cos() as f32);
        assert_eq!(out.data()[2], 1f64.sin() as f32);
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn errors() {
        let k = random_keys(2, 3, 1, 4);
        let p = RopeParams::new(4).unwrap();
        assert!(matches!(rope_apply(&k, &[0, 1], &p), Err(Error::Shape(_))));
        assert!(RopeParams::new(3).is_err());
        assert!(RopeParams::with_base(4, 1.0).is_err());
        let wrong = RopeParams::new(2).unwrap();
        assert!(rope_apply(&k, &[0, 1, 2], &wrong).is_err());
    }

    proptest! {
        #[test]
        fn inverse_rotation_recovers_input(seed in any::<u64>(), n in 1usize..12, split in any::<bool>()) {
            let k = random_keys(seed, n, 2, 8);
            let mut p = RopeParams::new(8).unwrap();
            if split { p.pairing = Pairing::SplitHalf; }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let pos: Vec<usize> = (0..n).map(|_| rng.random_range(0..100_000)).collect();
            let back = rope_unapply(&rope_apply(&k, &pos, &p).unwrap(), &pos, &p).unwrap();
            prop_assert!(back.max_abs_diff(&k).unwrap() < 1e-6);
        }

        #[test]
        fn rotation_preserves_norms(seed in any::<u64>(), n in 1usize..12) {
            let k = random_keys(seed, n, 2, 8);
            let p = RopeParams::new(8).unwrap();
            let pos: Vec<usize> = (0..n).map(|i| i * 977).collect();
            let r = rope_apply(&k, &pos, &p).unwrap();
            for t in 0..n {
                let a: f64 = k.row(t).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                let b: f64 = r.row(t).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!((a - b).abs() < 1e-6 * a.max(1.0));
            }
        }
    }
}
