//! Global + sliding-window + random sparse attention patterns, and the two
//! ways of evaluating attention under a pattern.
//!
//! `attend_dense` materializes the full `n × n` score matrix and masks it;
//! `attend_sparse` gathers only the permitted key/value rows for each query,
//! so its work per row is `O(|allowed(i)| · d)`. The dense path is the
//! reference the sparse path is tested against.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, NEG_INF_SENTINEL};

/// Sparse pattern parameters. The first `global_tokens` positions are global.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub global_tokens: usize,
    /// Radius on each side of the query position.
    pub window: usize,
    pub random_keys: usize,
    pub seed: u64,
}

impl SparsityConfig {
    pub fn new(global_tokens: usize, window: usize, random_keys: usize, seed: u64) -> Self {
        Self {
            global_tokens,
            window,
            random_keys,
            seed,
        }
    }

    /// Upper bound on the size of a non-global row.
    pub fn row_budget(&self) -> usize {
        self.global_tokens + 2 * self.window + 1 + self.random_keys
    }
}

/// Per-query sorted sets of permitted key positions, stored as CSR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl AttentionMask {
    /// Builds a mask from explicit rows; each row is sorted and deduplicated.
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Config("mask needs at least one row".into()));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable();
            row.dedup();
            if row.is_empty() {
                return Err(Error::Config(format!("mask row {i} is empty")));
            }
            if row.last().is_some_and(|&j| j >= n) {
                return Err(Error::Config(format!(
                    "mask row {i} references a key beyond {n}"
                )));
            }
            keys.extend(row);
            offsets.push(keys.len());
        }
        Ok(Self { n, offsets, keys })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.keys[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        (0..self.n).map(|i| self.row(i))
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.row(i).binary_search(&j).is_ok()
    }

    pub fn total_pairs(&self) -> usize {
        self.keys.len()
    }

    /// `n × n` additive mask: `0` where permitted, the −∞ sentinel elsewhere.
    pub fn additive(&self) -> Tensor {
        let n = self.n;
        let mut data = vec![NEG_INF_SENTINEL; n * n];
        for i in 0..n {
            for &j in self.row(i) {
                data[i * n + j] = 0.0;
            }
        }
        Tensor::from_parts(vec![n, n], data)
    }

    /// Text form: line `i` holds the sorted keys of row `i`, space-separated.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            let mut first = true;
            for j in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{j}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                line.split(' ')
                    .map(|tok| {
                        tok.parse::<usize>().map_err(|e| Error::Parse {
                            line: i + 1,
                            message: format!("{tok:?}: {e}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }
}

pub fn build_mask(config: &SparsityConfig, n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let g = config.global_tokens;
    if g > n {
        return Err(Error::Config(format!(
            "{g} global tokens exceed sequence length {n}"
        )));
    }
    let mut offsets = Vec::with_capacity(n + 1);
    let mut keys = Vec::new();
    offsets.push(0);
    let mut included = vec![false; n];
    for i in 0..n {
        if i < g {
            keys.extend(0..n);
            offsets.push(keys.len());
            continue;
        }
        included.iter_mut().for_each(|f| *f = false);
        let lo = i.saturating_sub(config.window);
        let hi = (i + config.window).min(n - 1);
        for f in &mut included[lo..=hi] {
            *f = true;
        }
        for f in &mut included[..g] {
            *f = true;
        }
        if config.random_keys > 0 {
            let candidates: Vec<usize> = (0..n).filter(|&j| !included[j]).collect();
            let take = config.random_keys.min(candidates.len());
            if take > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64);
                for pick in index::sample(&mut rng, candidates.len(), take) {
                    included[candidates[pick]] = true;
                }
            }
        }
        keys.extend((0..n).filter(|&j| included[j]));
        offsets.push(keys.len());
    }
    Ok(AttentionMask { n, offsets, keys })
}

pub fn full_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    Ok(AttentionMask {
        n,
        offsets: (0..=n).map(|i| i * n).collect(),
        keys: (0..n).cycle().take(n * n).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskStats {
    pub total_pairs: usize,
    pub max_row: usize,
    pub density: f64,
}

pub fn mask_stats(mask: &AttentionMask) -> MaskStats {
    let n = mask.len();
    MaskStats {
        total_pairs: mask.total_pairs(),
        max_row: mask.rows().map(<[usize]>::len).max().unwrap_or(0),
        density: mask.total_pairs() as f64 / (n * n) as f64,
    }
}

pub(crate) fn check_qkv(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<(usize, usize)> {
    let (n, d) = q.matrix_dims()?;
    if k.shape() != [n, d] || v.shape() != [n, d] {
        return Err(Error::Dimension(format!(
            "Q {:?}, K {:?}, V {:?} must share one [n x d] shape",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if mask.len() != n {
        return Err(Error::Dimension(format!(
            "mask covers {} positions, inputs have {n}",
            mask.len()
        )));
    }
    Ok((n, d))
}

/// Dense reference: `softmax(QKᵀ/√d + mask) · V`, composed from tape primitives.
pub fn attend_dense(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
    let (_, d) = check_qkv(tape.value(q), tape.value(k), tape.value(v), mask)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let probs = tape.softmax_rows(scaled, Some(&mask.additive()))?;
    tape.matmul(probs, v)
}

/// Gathered path; numerically equal to [`attend_dense`] under the same mask.
pub fn attend_sparse(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &Arc<AttentionMask>,
) -> Result<Var> {
    tape.attend_sparse(q, k, v, Arc::clone(mask))
}

/// Forward kernel of the sparse path. Returns the output and the attention
/// probabilities laid out like the mask's key list.
pub(crate) fn sparse_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    mask: &AttentionMask,
) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; mask.len() * d];
    let mut probs = vec![0.0; mask.total_pairs()];
    for i in 0..mask.len() {
        let keys = mask.row(i);
        let p = &mut probs[mask.offsets[i]..mask.offsets[i + 1]];
        let qi = &q[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (pj, &j) in p.iter_mut().zip(keys) {
            *pj = tensor::dot(qi, &k[j * d..(j + 1) * d]) * scale;
            max = max.max(*pj);
        }
        let mut sum = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            sum += *pj;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (pj, &j) in p.iter_mut().zip(keys) {
            *pj /= sum;
            for (o, vv) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += *pj * vv;
            }
        }
    }
    (out, probs)
}

pub(crate) fn sparse_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    mask: &AttentionMask,
    probs: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = Vec::new();
    for i in 0..mask.len() {
        let keys = mask.row(i);
        let p = &probs[mask.offsets[i]..mask.offsets[i + 1]];
        let go = &grad_out[i * d..(i + 1) * d];
        dp.clear();
        let mut inner = 0.0;
        for (&pj, &j) in p.iter().zip(keys) {
            let dpj = tensor::dot(go, &v[j * d..(j + 1) * d]);
            inner += pj * dpj;
            dp.push(dpj);
            for (g, o) in gv[j * d..(j + 1) * d].iter_mut().zip(go) {
                *g += pj * o;
            }
        }
        let qi = &q[i * d..(i + 1) * d];
        for ((&pj, &dpj), &j) in p.iter().zip(&dp).zip(keys) {
            let ds = pj * (dpj - inner) * scale;
            let kj = &k[j * d..(j + 1) * d];
            for (g, kv) in gq[i * d..(i + 1) * d].iter_mut().zip(kj) {
                *g += ds * kv;
            }
            for (g, qv) in gk[j * d..(j + 1) * d].iter_mut().zip(qi) {
                *g += ds * qv;
            }
        }
    }
    (gq, gk, gv)
}

/// Value-only dense attention over row-major `[n × d]` slices, with no mask.
/// Used where no gradient is needed (benchmarks, inference).
pub fn dense_attention_values(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = tensor::matmul_nt(q, k, n, n, d);
    for row in scores.chunks_exact_mut(n) {
        let mut max = f64::NEG_INFINITY;
        for s in row.iter_mut() {
            *s *= scale;
            max = max.max(*s);
        }
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
    tensor::matmul(&scores, v, n, n, d)
}

/// Value-only sparse attention over row-major `[n × d]` slices.
pub fn sparse_attention_values(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    mask: &AttentionMask,
) -> Vec<f64> {
    sparse_forward(q, k, v, d, mask).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(mask: &AttentionMask) -> Vec<Vec<usize>> {
        mask.rows().map(<[usize]>::to_vec).collect()
    }

    #[test]
    fn self_only_pattern() {
        let mask = build_mask(&SparsityConfig::new(0, 0, 0, 0), 4).unwrap();
        assert_eq!(rows(&mask), vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn all_global_saturates() {
        let mask = build_mask(&SparsityConfig::new(4, 3, 2, 9), 4).unwrap();
        assert_eq!(mask, full_mask(4).unwrap());
    }

    #[test]
    fn global_plus_window_enumeration() {
        let mask = build_mask(&SparsityConfig::new(1, 1, 0, 0), 4).unwrap();
        assert_eq!(
            rows(&mask),
            vec![
                vec![0, 1, 2, 3],
                vec![0, 1, 2],
                vec![0, 1, 2, 3],
                vec![0, 2, 3]
            ]
        );
    }

    #[test]
    fn too_many_global_tokens() {
        assert!(matches!(
            build_mask(&SparsityConfig::new(5, 0, 0, 0), 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_mask_shapes() {
        assert_eq!(rows(&full_mask(1).unwrap()), vec![vec![0]]);
        assert_eq!(rows(&full_mask(3).unwrap()), vec![vec![0, 1, 2]; 3]);
        assert_eq!(full_mask(16).unwrap().total_pairs(), 256);
    }

    #[test]
    fn stats() {
        let s = mask_stats(&full_mask(16).unwrap());
        assert_eq!((s.total_pairs, s.max_row, s.density), (256, 16, 1.0));
        let diag = build_mask(&SparsityConfig::new(0, 0, 0, 0), 16).unwrap();
        let s = mask_stats(&diag);
        assert_eq!((s.total_pairs, s.max_row, s.density), (16, 1, 1.0 / 16.0));
        // Rows {0,1,2,3}, {0,1,2}, {0,1,2,3}, {0,2,3}: 4 + 3 + 4 + 3 pairs.
        let enumerated: usize = [4, 3, 4, 3].iter().sum();
        let m = build_mask(&SparsityConfig::new(1, 1, 0, 0), 4).unwrap();
        let s = mask_stats(&m);
        assert_eq!(
            (s.total_pairs, s.max_row, s.density),
            (enumerated, 4, 14.0 / 16.0)
        );
    }

    #[test]
    fn random_keys_are_excluded_from_window_and_bounded() {
        let cfg = SparsityConfig::new(1, 1, 3, 42);
        let mask = build_mask(&cfg, 32).unwrap();
        for i in 1..32 {
            assert_eq!(
                mask.row(i).len(),
                (cfg.row_budget()).min(32) - usize::from(i == 1 || i == 31)
            );
        }
    }

    #[test]
    fn random_keys_saturate_when_few_candidates() {
        let mask = build_mask(&SparsityConfig::new(0, 0, 10, 3), 4).unwrap();
        assert_eq!(mask, full_mask(4).unwrap());
    }

    #[test]
    fn dump_round_trip() {
        let mask = build_mask(&SparsityConfig::new(1, 1, 0, 0), 4).unwrap();
        assert_eq!(mask.dump(), "0 1 2 3\n0 1 2\n0 1 2 3\n0 2 3\n");
        assert_eq!(AttentionMask::parse_dump(&mask.dump()).unwrap(), mask);
    }

    #[test]
    fn diagonal_attention_returns_values() {
        let mask = Arc::new(build_mask(&SparsityConfig::new(0, 0, 0, 0), 3).unwrap());
        let v = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.25, 3.0, 4.0]).unwrap();
        let q = Tensor::new(vec![3, 2], vec![0.3, 0.1, -0.7, 0.2, 0.9, -0.4]).unwrap();
        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(q),
            tape.constant(v.clone()),
        );
        let dense = attend_dense(&mut tape, qv, kv, vv, &mask).unwrap();
        let sparse = attend_sparse(&mut tape, qv, kv, vv, &mask).unwrap();
        assert_eq!(tape.value(dense), &v);
        assert_eq!(tape.value(sparse), &v);
    }

    #[test]
    fn mismatched_shapes() {
        let mask = Arc::new(full_mask(2).unwrap());
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 3]));
        let k = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            attend_sparse(&mut tape, q, k, k, &mask),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            attend_dense(&mut tape, q, k, k, &mask),
            Err(Error::Dimension(_))
        ));
    }
}
