//! Frequency-domain token importance.
//!
//! Each `(head, dim)` lane of a layer's K and V is treated as a signal along
//! the token axis. The lane is transformed with a real FFT, all but the lowest
//! `alpha` fraction of bins are zeroed, and the inverse transform gives a
//! low-pass reconstruction. A token's score is the mean of the Euclidean norms
//! of its reconstructed K row and V row. Tokens with the largest scores are the
//! ones recomputed online; the rest are reused from the cache pool.
//!
//! Spectral arithmetic runs in `f64`; tensors stay `f32`.

use std::collections::HashSet;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{param_err, shape_err, Result};
use crate::kvcore::{ComplexSpectrum, KvChunk, SeqTensor};

/// Default low-pass cutoff ratio.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Which part of the spectrum a score is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    /// Bins `k < c`.
    Low,
    /// Bins `k >= c`, the complement of [`Band::Low`].
    High,
}

fn check_ratio(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(param_err(format!("{name} = {v} is outside [0, 1]")));
    }
    Ok(())
}

/// Real FFT of every lane along the token axis.
///
/// Bin `k` holds `sum_n x[n] * exp(-2 pi i k n / N)` for `k = 0..=N/2`.
pub fn rfft_seq(t: &SeqTensor) -> Result<ComplexSpectrum> {
    if t.n_tokens() == 0 {
        return Err(shape_err("rfft of a zero-length sequence"));
    }
    let data: Vec<f64> = t.data().iter().map(|&x| f64::from(x)).collect();
    Ok(rfft_lanes(&data, t.n_tokens(), t.n_heads(), t.head_dim()))
}

fn rfft_lanes(data: &[f64], n: usize, n_heads: usize, head_dim: usize) -> ComplexSpectrum {
    let lanes = n_heads * head_dim;
    let mut spec = ComplexSpectrum::zeros(n, n_heads, head_dim);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for lane in 0..lanes {
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(data[i * lanes + lane], 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in buf.iter().take(spec.n_freqs).enumerate() {
            let idx = spec.index(k, lane);
            spec.re[idx] = v.re;
            spec.im[idx] = v.im;
        }
    }
    spec
}

/// Number of retained low-frequency bins: `floor(alpha * n_freqs)`.
pub fn cutoff_index(n_freqs: usize, alpha: f64) -> usize {
    ((alpha * n_freqs as f64).floor() as usize).min(n_freqs)
}

/// Zeroes every bin `k >= floor(alpha * n_freqs)`.
pub fn lowpass(s: &ComplexSpectrum, alpha: f64) -> Result<ComplexSpectrum> {
    band_filter(s, alpha, Band::Low)
}

/// Zeroes every bin `k < floor(alpha * n_freqs)`; `lowpass + highpass == s`.
pub fn highpass(s: &ComplexSpectrum, alpha: f64) -> Result<ComplexSpectrum> {
    band_filter(s, alpha, Band::High)
}

fn band_filter(s: &ComplexSpectrum, alpha: f64, band: Band) -> Result<ComplexSpectrum> {
    check_ratio("alpha", alpha)?;
    let c = cutoff_index(s.n_freqs, alpha);
    let mut out = s.clone();
    let lanes = s.lanes();
    let zeroed = match band {
        Band::Low => c..s.n_freqs,
        Band::High => 0..c,
    };
    for k in zeroed {
        for lane in 0..lanes {
            let i = out.index(k, lane);
            out.re[i] = 0.0;
            out.im[i] = 0.0;
        }
    }
    Ok(out)
}

/// Inverse of [`rfft_seq`]. The imaginary parts of the DC bin (and of the
/// Nyquist bin for even `n`) are ignored, as a real signal cannot carry them.
pub fn irfft_seq(s: &ComplexSpectrum, n: usize) -> Result<SeqTensor> {
    let data = irfft_lanes(s, n)?;
    SeqTensor::new(data.into_iter().map(|x| x as f32).collect(), n, s.n_heads, s.head_dim)
}

fn irfft_lanes(s: &ComplexSpectrum, n: usize) -> Result<Vec<f64>> {
    if n != s.origin_len || n == 0 {
        return Err(shape_err(format!(
            "irfft length {n} does not match spectrum origin length {}",
            s.origin_len
        )));
    }
    let lanes = s.lanes();
    let mut out = vec![0.0; n * lanes];
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for lane in 0..lanes {
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = if k < s.n_freqs {
                let (re, im) = s.bin(k, lane);
                Complex::new(re, im)
            } else {
                let (re, im) = s.bin(n - k, lane);
                Complex::new(re, -im)
            };
        }
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        for (i, v) in buf.iter().enumerate() {
            out[i * lanes + lane] = v.re * scale;
        }
    }
    Ok(out)
}

/// Band-limited reconstruction of `t`, kept in `f64`.
fn band_reconstruction(t: &SeqTensor, alpha: f64, band: Band) -> Result<Vec<f64>> {
    let spec = band_filter(&rfft_seq(t)?, alpha, band)?;
    irfft_lanes(&spec, t.n_tokens())
}

fn row_norms(data: &[f64], row_len: usize) -> impl Iterator<Item = f64> + '_ {
    data.chunks_exact(row_len).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Per-token score `0.5 * (|K~_i| + |V~_i|)` over the low-pass reconstructions.
pub fn low_freq_scores(keys: &SeqTensor, values: &SeqTensor, alpha: f64) -> Result<Vec<f64>> {
    band_scores(keys, values, alpha, Band::Low)
}

/// Same score computed from the given band of the spectrum.
pub fn band_scores(keys: &SeqTensor, values: &SeqTensor, alpha: f64, band: Band) -> Result<Vec<f64>> {
    if keys.n_tokens() != values.n_tokens() || !keys.same_row_shape(values) {
        return Err(shape_err("keys and values must share (N, H, D)"));
    }
    check_ratio("alpha", alpha)?;
    let w = keys.row_len();
    let k = band_reconstruction(keys, alpha, band)?;
    let v = band_reconstruction(values, alpha, band)?;
    Ok(row_norms(&k, w).zip(row_norms(&v, w)).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Token orders of a chunk, most important first.
///
/// Selection at any ratio is a prefix of `aggregate_order`, so selections are
/// nested: a larger ratio never drops a token a smaller ratio kept.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceRanking {
    pub per_layer_scores: Vec<Vec<f64>>,
    pub per_layer_order: Vec<Vec<u32>>,
    pub aggregate_order: Vec<u32>,
    pub alpha: f64,
    pub n_tokens: usize,
}

/// Argsort descending by score, ties to the lower index.
fn descending_order(scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b))
    });
    order
}

impl ImportanceRanking {
    /// Builds orders from per-layer scores; the aggregate order sorts by the
    /// mean score across layers.
    pub fn from_scores(per_layer_scores: Vec<Vec<f64>>, alpha: f64) -> Result<Self> {
        let n_tokens = per_layer_scores.first().map_or(0, Vec::len);
        if n_tokens == 0 {
            return Err(shape_err("ranking needs at least one layer and one token"));
        }
        for layer in &per_layer_scores {
            if layer.len() != n_tokens {
                return Err(shape_err("every layer must score the same number of tokens"));
            }
            if let Some(bad) = layer.iter().find(|s| !s.is_finite() || **s < 0.0) {
                return Err(param_err(format!("score {bad} is not a finite non-negative norm")));
            }
        }
        let n_layers = per_layer_scores.len() as f64;
        let mean: Vec<f64> = (0..n_tokens)
            .map(|i| per_layer_scores.iter().map(|l| l[i]).sum::<f64>() / n_layers)
            .collect();
        Ok(Self {
            per_layer_order: per_layer_scores.iter().map(|s| descending_order(s)).collect(),
            aggregate_order: descending_order(&mean),
            per_layer_scores,
            alpha,
            n_tokens,
        })
    }

    /// Takes an explicit aggregate order (e.g. a random baseline). Per-layer
    /// orders mirror it and scores are rank-derived placeholders.
    pub fn from_order(order: Vec<u32>, n_layers: usize, alpha: f64) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            let i = i as usize;
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(param_err("order is not a permutation of 0..N"));
            }
        }
        let mut scores = vec![0.0; n];
        for (rank, &i) in order.iter().enumerate() {
            scores[i as usize] = (n - rank) as f64;
        }
        Ok(Self {
            per_layer_scores: vec![scores; n_layers.max(1)],
            per_layer_order: vec![order.clone(); n_layers.max(1)],
            aggregate_order: order,
            alpha,
            n_tokens: n,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer_scores.len()
    }

    /// Mean-over-layers score of each token.
    pub fn aggregate_scores(&self) -> Vec<f64> {
        let l = self.n_layers() as f64;
        (0..self.n_tokens)
            .map(|i| self.per_layer_scores.iter().map(|s| s[i]).sum::<f64>() / l)
            .collect()
    }

    /// The `ceil(r * N)` highest-ranked tokens, ascending by token index.
    pub fn indices_for_ratio(&self, r: f64) -> Result<Vec<usize>> {
        check_ratio("r", r)?;
        let k = selection_count(self.n_tokens, r);
        let mut idx: Vec<usize> = self.aggregate_order[..k].iter().map(|&i| i as usize).collect();
        idx.sort_unstable();
        Ok(idx)
    }

    /// Tokens not selected at ratio `r`, ascending.
    pub fn complement_for_ratio(&self, r: f64) -> Result<Vec<usize>> {
        check_ratio("r", r)?;
        let k = selection_count(self.n_tokens, r);
        let mut idx: Vec<usize> = self.aggregate_order[k..].iter().map(|&i| i as usize).collect();
        idx.sort_unstable();
        Ok(idx)
    }
}

/// `ceil(r * n)`, treating products within 1e-9 of an integer as that integer
/// so that e.g. `0.15 * 20` selects 3 tokens rather than 4.
pub fn selection_count(n: usize, r: f64) -> usize {
    let x = r * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.abs().max(1.0) { nearest } else { x.ceil() };
    (k.max(0.0) as usize).min(n)
}

/// Frequency ranking of a chunk from its stored (pre-RoPE) keys and values.
pub fn rank_chunk(chunk: &KvChunk, alpha: f64) -> Result<ImportanceRanking> {
    rank_chunk_band(chunk, alpha, Band::Low)
}

pub fn rank_chunk_band(chunk: &KvChunk, alpha: f64, band: Band) -> Result<ImportanceRanking> {
    let scores = chunk
        .layers()
        .map(|(k, v)| band_scores(k, v, alpha, band))
        .collect::<Result<Vec<_>>>()?;
    ImportanceRanking::from_scores(scores, alpha)
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: HashSet<_> = a.iter().collect();
    let sb: HashSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Jaccard overlap of the ratio-`r` selections for every pair of cutoffs.
pub fn alpha_stability(chunk: &KvChunk, alphas: &[f64], r: f64) -> Result<Vec<(f64, f64, f64)>> {
    let sets = alphas
        .iter()
        .map(|&a| rank_chunk(chunk, a)?.indices_for_ratio(r))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for i in 0..alphas.len() {
        for j in i + 1..alphas.len() {
            out.push((alphas[i], alphas[j], jaccard(&sets[i], &sets[j])));
        }
    }
    Ok(out)
}

/// Energy of each one-sided bin of one lane, with the bins that stand in for
/// a conjugate pair counted twice, so the lane total equals `N * sum x^2`.
pub fn bin_energies(s: &ComplexSpectrum, lane: usize) -> Vec<f64> {
    let n = s.origin_len;
    (0..s.n_freqs)
        .map(|k| {
            let (re, im) = s.bin(k, lane);
            let paired = k != 0 && !(n % 2 == 0 && k == n / 2);
            let w = if paired { 2.0 } else { 1.0 };
            w * (re * re + im * im)
        })
        .collect()
}

/// Total spectral energy over all lanes (see [`bin_energies`]).
pub fn spectrum_energy(s: &ComplexSpectrum) -> f64 {
    (0..s.lanes()).map(|lane| bin_energies(s, lane).iter().sum::<f64>()).sum()
}

/// Fraction of energy per frequency band, averaged over lanes with nonzero
/// energy. Bin `k` falls in band `floor(bands * k / n_freqs)`.
pub fn band_energy_fractions(s: &ComplexSpectrum, bands: usize) -> Result<Vec<f64>> {
    if bands == 0 {
        return Err(param_err("need at least one band"));
    }
    let mut acc = vec![0.0; bands];
    let mut counted = 0usize;
    for lane in 0..s.lanes() {
        let e = bin_energies(s, lane);
        let total: f64 = e.iter().sum();
        if total <= 0.0 {
            continue;
        }
        counted += 1;
        for (k, ek) in e.iter().enumerate() {
            acc[bands * k / s.n_freqs] += ek / total;
        }
    }
    if counted > 0 {
        acc.iter_mut().for_each(|a| *a /= counted as f64);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::kvcore::{ChunkId, DType};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Naive O(N^2) DFT of a real lane, bins 0..=N/2.
    fn naive_rdft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(re, im), (j, &v)| {
                    let ang = -2.0 * PI * (k * j) as f64 / n as f64;
                    (re + v * ang.cos(), im + v * ang.sin())
                })
            })
            .collect()
    }

    /// Naive inverse from one-sided bins (Hermitian extension).
    fn naive_irdft(bins: &[(f64, f64)], n: usize) -> Vec<f64> {
        (0..n)
            .map(|j| {
                let mut acc = 0.0;
                for k in 0..n {
                    let (re, im) = if k < bins.len() {
                        bins[k]
                    } else {
                        let (re, im) = bins[n - k];
                        (re, -im)
                    };
                    let ang = 2.0 * PI * (k * j) as f64 / n as f64;
                    acc += re * ang.cos() - im * ang.sin();
                }
                acc / n as f64
            })
            .collect()
    }

    fn one_lane(x: &[f32]) -> SeqTensor {
        SeqTensor::from_fn(x.len(), 1, 2, |t, _, d| if d == 0 { x[t] } else { 0.0 }).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, d: usize) -> SeqTensor {
        SeqTensor::from_fn(n, h, d, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    #[test]
    fn dc_only_signal() {
        let s = rfft_seq(&one_lane(&[1.0; 4])).unwrap();
        assert_eq!(s.n_freqs, 3);
        assert_eq!(s.bin(0, 0), (4.0, 0.0));
        for k in 1..3 {
            let (re, im) = s.bin(k, 0);
            assert!(re.abs() < 1e-12 && im.abs() < 1e-12);
        }
    }

    #[test]
    fn nyquist_only_signal() {
        let s = rfft_seq(&one_lane(&[1.0, -1.0, 1.0, -1.0])).unwrap();
        for k in 0..2 {
            let (re, im) = s.bin(k, 0);
            assert!(re.abs() < 1e-12 && im.abs() < 1e-12);
        }
        let (re, im) = s.bin(2, 0);
        assert!((re - 4.0).abs() < 1e-12 && im.abs() < 1e-12);
    }

    #[test]
    fn odd_length_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f32> = (0..7).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let s = rfft_seq(&one_lane(&x)).unwrap();
        let oracle = naive_rdft(&x.iter().map(|&v| v as f64).collect::<Vec<_>>());
        for (k, (re, im)) in oracle.into_iter().enumerate() {
            let (a, b) = s.bin(k, 0);
            assert!((a - re).abs() < 1e-9 && (b - im).abs() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn lowpass_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = rfft_seq(&random_tensor(&mut rng, 10, 1, 2)).unwrap();
        assert_eq!(lowpass(&s, 1.0).unwrap(), s);
        let zero = lowpass(&s, 0.0).unwrap();
        assert!(zero.re.iter().chain(&zero.im).all(|&v| v == 0.0));
        assert!(matches!(lowpass(&s, 1.5), Err(Error::InvalidParam(_))));
        assert!(matches!(lowpass(&s, -0.1), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn lowpass_cutoff_for_ten_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = rfft_seq(&random_tensor(&mut rng, 10, 1, 2)).unwrap();
        assert_eq!(s.n_freqs, 6);
        assert_eq!(cutoff_index(6, 0.5), 3);
        let lp = lowpass(&s, 0.5).unwrap();
        for lane in 0..2 {
            for k in 0..6 {
                if k < 3 {
                    assert_eq!(lp.bin(k, lane), s.bin(k, lane));
                } else {
                    assert_eq!(lp.bin(k, lane), (0.0, 0.0));
                }
            }
        }
        assert_eq!(lp.origin_len, 10);
    }

    #[test]
    fn round_trip_and_simple_inverses() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_tensor(&mut rng, 16, 2, 4);
        let back = irfft_seq(&rfft_seq(&t).unwrap(), 16).unwrap();
        assert!(back.max_abs_diff(&t).unwrap() < 1e-6);

        let zero = irfft_seq(&ComplexSpectrum::zeros(5, 1, 2), 5).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let mut dc = ComplexSpectrum::zeros(6, 1, 2);
        dc.re[0] = 6.0;
        let lane = irfft_seq(&dc, 6).unwrap();
        for tok in 0..6 {
            assert!((lane.get(tok, 0, 0) - 1.0).abs() < 1e-12);
        }
        assert!(matches!(irfft_seq(&dc, 7), Err(Error::Shape(_))));
    }

    #[test]
    fn scores_at_full_cutoff_are_raw_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = random_tensor(&mut rng, 9, 2, 4);
        let v = random_tensor(&mut rng, 9, 2, 4);
        let s = low_freq_scores(&k, &v, 1.0).unwrap();
        for i in 0..9 {
            let nk: f64 = k.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nv: f64 = v.row(i).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((s[i] - 0.5 * (nk + nv)).abs() < 1e-9);
        }
    }

    #[test]
    fn scores_symmetric_when_keys_equal_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = random_tensor(&mut rng, 12, 2, 4);
        let s = low_freq_scores(&k, &k, 0.5).unwrap();
        let kt = band_reconstruction(&k, 0.5, Band::Low).unwrap();
        for (i, n) in row_norms(&kt, 8).enumerate() {
            assert!((s[i] - n).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_match_composed_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, h, d) = (12, 2, 4);
        let k = random_tensor(&mut rng, n, h, d);
        let v = random_tensor(&mut rng, n, h, d);
        let got = low_freq_scores(&k, &v, 0.5).unwrap();

        let c = ((0.5 * (n / 2 + 1) as f64).floor()) as usize;
        let recon = |t: &SeqTensor| -> Vec<Vec<f64>> {
            let lanes = h * d;
            let mut rows = vec![vec![0.0; lanes]; n];
            for lane in 0..lanes {
                let x: Vec<f64> = (0..n).map(|i| t.data()[i * lanes + lane] as f64).collect();
                let mut bins = naive_rdft(&x);
                for b in bins.iter_mut().skip(c) {
                    *b = (0.0, 0.0);
                }
                for (i, y) in naive_irdft(&bins, n).into_iter().enumerate() {
                    rows[i][lane] = y;
                }
            }
            rows
        };
        let (kr, vr) = (recon(&k), recon(&v));
        for i in 0..n {
            let nk = kr[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = vr[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((got[i] - 0.5 * (nk + nv)).abs() < 1e-6, "token {i}");
        }
    }

    #[test]
    fn score_shape_mismatch() {
        let a = SeqTensor::zeros(4, 1, 2).unwrap();
        let b = SeqTensor::zeros(5, 1, 2).unwrap();
        assert!(matches!(low_freq_scores(&a, &b, 0.5), Err(Error::Shape(_))));
    }

    fn chunk_from(rng: &mut ChaCha8Rng, layers: usize, n: usize) -> KvChunk {
        let ks = (0..layers).map(|_| random_tensor(rng, n, 2, 4)).collect();
        let vs = (0..layers).map(|_| random_tensor(rng, n, 2, 4)).collect();
        KvChunk::new(ChunkId::new("t"), ks, vs, DType::F32).unwrap()
    }

    #[test]
    fn single_layer_aggregate_equals_layer_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let r = rank_chunk(&chunk_from(&mut rng, 1, 16), 0.5).unwrap();
        assert_eq!(r.aggregate_order, r.per_layer_order[0]);
    }

    #[test]
    fn dominant_token_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let base = chunk_from(&mut rng, 3, 16);
        let scale = |t: &SeqTensor| {
            SeqTensor::from_fn(16, 2, 4, |tok, h, d| {
                t.get(tok, h, d) * if tok == 3 { 10.0 } else { 1.0 }
            })
            .unwrap()
        };
        let ks = (0..3).map(|l| scale(base.keys_raw(l))).collect();
        let vs = (0..3).map(|l| scale(base.values(l))).collect();
        let chunk = KvChunk::new(ChunkId::new("d"), ks, vs, DType::F32).unwrap();
        let r = rank_chunk(&chunk, 0.5).unwrap();
        let mean = r.aggregate_scores();
        let best = (0..16).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        assert_eq!(best, 3);
        assert_eq!(r.aggregate_order[0], 3);
    }

    #[test]
    fn identical_rows_tie_to_lower_index() {
        let r = ImportanceRanking::from_scores(vec![vec![1.0, 5.0, 2.0, 5.0]], 0.5).unwrap();
        assert_eq!(r.aggregate_order, vec![1, 3, 2, 0]);

        let t = SeqTensor::from_fn(6, 1, 2, |tok, _, d| if tok == 1 || tok == 4 { 3.0 } else { (d + tok) as f32 * 0.1 }).unwrap();
        let chunk = KvChunk::new(ChunkId::new("tie"), vec![t.clone()], vec![t], DType::F32).unwrap();
        let r = rank_chunk(&chunk, 1.0).unwrap();
        let pos = |i: u32| r.aggregate_order.iter().position(|&x| x == i).unwrap();
        assert!(pos(1) < pos(4));
    }

    #[test]
    fn ratio_selection_counts() {
        let r = ImportanceRanking::from_scores(vec![(0..20).map(|i| i as f64).collect()], 0.5).unwrap();
        assert!(r.indices_for_ratio(0.0).unwrap().is_empty());
        assert_eq!(r.indices_for_ratio(1.0).unwrap(), (0..20).collect::<Vec<_>>());
        assert_eq!(r.indices_for_ratio(0.15).unwrap(), vec![17, 18, 19]);
        assert_eq!(r.complement_for_ratio(0.15).unwrap().len(), 17);
        assert!(matches!(r.indices_for_ratio(1.01), Err(Error::InvalidParam(_))));
        assert_eq!(selection_count(64, 0.15), 10);
    }

    #[test]
    fn nested_selection_on_random_rankings() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..50 {
            let n = rng.random_range(1..80);
            let scores = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let r = ImportanceRanking::from_scores(vec![scores], 0.5).unwrap();
            let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
            if r1 > r2 {
                std::mem::swap(&mut r1, &mut r2);
            }
            let a: HashSet<usize> = r.indices_for_ratio(r1).unwrap().into_iter().collect();
            let b: HashSet<usize> = r.indices_for_ratio(r2).unwrap().into_iter().collect();
            assert!(a.is_subset(&b));
        }
    }

    #[test]
    fn jaccard_basics() {
        assert_eq!(jaccard(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[3]), 0.0);
        assert!((jaccard(&[1, 2, 3], &[2, 3, 4]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_scores_and_orders() {
        assert!(ImportanceRanking::from_scores(vec![vec![f64::NAN]], 0.5).is_err());
        assert!(ImportanceRanking::from_scores(vec![vec![-1.0]], 0.5).is_err());
        assert!(ImportanceRanking::from_order(vec![0, 0], 1, 0.5).is_err());
        let r = ImportanceRanking::from_order(vec![2, 0, 1], 2, 0.5).unwrap();
        assert_eq!(r.indices_for_ratio(0.34).unwrap(), vec![0, 2]);
    }

    #[test]
    fn band_fractions_of_constant_signal() {
        let s = rfft_seq(&SeqTensor::filled(32, 2, 2, 0.7).unwrap()).unwrap();
        let f = band_energy_fractions(&s, 10).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-12);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn parseval(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tensor(&mut rng, n, 1, 2);
            let s = rfft_seq(&t).unwrap();
            let time: f64 = t.data().iter().map(|&x| (x as f64).powi(2)).sum();
            let freq = spectrum_energy(&s);
            prop_assert!((freq - n as f64 * time).abs() <= 1e-6 * (n as f64 * time).max(1e-12));
        }

        #[test]
        fn lowpass_idempotent(seed in any::<u64>(), n in 1usize..30, alpha in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = rfft_seq(&random_tensor(&mut rng, n, 1, 2)).unwrap();
            let once = lowpass(&s, alpha).unwrap();
            prop_assert_eq!(lowpass(&once, alpha).unwrap(), once);
        }

        #[test]
        fn bands_partition_the_spectrum(seed in any::<u64>(), n in 1usize..30, alpha in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = rfft_seq(&random_tensor(&mut rng, n, 1, 2)).unwrap();
            let lo = lowpass(&s, alpha).unwrap();
            let hi = highpass(&s, alpha).unwrap();
            for i in 0..s.re.len() {
                prop_assert_eq!(lo.re[i] + hi.re[i], s.re[i]);
            }
        }
    }
}
