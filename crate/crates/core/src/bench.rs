//! Wall-clock scaling of the attention sublayer under full and sparse masks.
//!
//! The timed region is one multi-head attention sublayer forward pass:
//! Q/K/V projections, per-head attention, head merge and output projection.
//! Masks and inputs are prepared outside the timed region; one warm-up pass
//! per length is discarded.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::{
    build_mask, dense_attention_values, sparse_attention_values, AttentionMask, SparsityConfig,
};
use crate::error::{Error, Result};
use crate::tensor::matmul;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub repetitions: usize,
    pub sparsity: SparsityConfig,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.len() < 2 {
            return Err(Error::Config("benchmark needs at least two lengths".into()));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) || self.lengths[0] == 0 {
            return Err(Error::Config(
                "benchmark lengths must be positive and strictly increasing".into(),
            ));
        }
        if self.repetitions < 3 {
            return Err(Error::Config(
                "benchmark needs at least 3 repetitions".into(),
            ));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(
                "d_model must be a positive multiple of heads".into(),
            ));
        }
        if self.sparsity.global_tokens > self.lengths[0] {
            return Err(Error::Config(
                "global_tokens exceed the shortest length".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub n: usize,
    pub full_seconds: f64,
    pub sparse_seconds: f64,
    pub sparse_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub d_model: usize,
    pub heads: usize,
    pub repetitions: usize,
    pub sparsity: SparsityConfig,
    pub points: Vec<BenchPoint>,
    pub full_slope: f64,
    pub sparse_slope: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

struct Sublayer {
    d: usize,
    heads: usize,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
}

impl Sublayer {
    fn random(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let dist = Uniform::new_inclusive(-scale, scale);
        let mut w = || (0..d * d).map(|_| dist.sample(rng)).collect::<Vec<_>>();
        Self {
            d,
            heads,
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
        }
    }

    /// `x` is `[n × d]`; `mask = None` runs unmasked dense attention.
    fn forward(&self, x: &[f64], n: usize, mask: Option<&AttentionMask>) -> Vec<f64> {
        let d = self.d;
        let dh = d / self.heads;
        let q = matmul(x, &self.wq, n, d, d);
        let k = matmul(x, &self.wk, n, d, d);
        let v = matmul(x, &self.wv, n, d, d);
        let mut merged = vec![0.0; n * d];
        for h in 0..self.heads {
            let cols = |m: &[f64]| -> Vec<f64> {
                (0..n)
                    .flat_map(|i| m[i * d + h * dh..i * d + (h + 1) * dh].iter().copied())
                    .collect()
            };
            let (qh, kh, vh) = (cols(&q), cols(&k), cols(&v));
            let out = match mask {
                None => dense_attention_values(&qh, &kh, &vh, n, dh),
                Some(m) => sparse_attention_values(&qh, &kh, &vh, dh, m),
            };
            for i in 0..n {
                merged[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&out[i * dh..(i + 1) * dh]);
            }
        }
        matmul(&merged, &self.wo, n, d, d)
    }
}

fn time_mean(reps: usize, mut f: impl FnMut() -> Vec<f64>) -> f64 {
    std::hint::black_box(f());
    let started = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    started.elapsed().as_secs_f64() / reps as f64
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchResult> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layer = Sublayer::random(config.d_model, config.heads, &mut rng);
    let unit = Uniform::new_inclusive(-1.0, 1.0);
    let mut points = Vec::with_capacity(config.lengths.len());
    for &n in &config.lengths {
        let x: Vec<f64> = (0..n * config.d_model)
            .map(|_| unit.sample(&mut rng))
            .collect();
        let mask = build_mask(&config.sparsity, n)?;
        let full_seconds = time_mean(config.repetitions, || layer.forward(&x, n, None));
        let sparse_seconds = time_mean(config.repetitions, || layer.forward(&x, n, Some(&mask)));
        points.push(BenchPoint {
            n,
            full_seconds,
            sparse_seconds,
            sparse_pairs: mask.total_pairs(),
        });
    }
    let ns: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let full: Vec<f64> = points.iter().map(|p| p.full_seconds).collect();
    let sparse: Vec<f64> = points.iter().map(|p| p.sparse_seconds).collect();
    Ok(BenchResult {
        d_model: config.d_model,
        heads: config.heads,
        repetitions: config.repetitions,
        sparsity: config.sparsity,
        full_slope: loglog_slope(&ns, &full),
        sparse_slope: loglog_slope(&ns, &sparse),
        points,
    })
}
