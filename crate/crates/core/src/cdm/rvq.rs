//! Residual vector quantization with EMA codebooks.
//!
//! Feature maps are `[C, T_n]` row-major (`x[c * t_n + t]`); codebook entries
//! are rows of a `K × C` matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_STAGES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub dim: usize,
    /// `K × dim`, row-major.
    pub entries: Vec<f32>,
    /// EMA of assignment counts.
    pub usage: Vec<f32>,
    /// EMA of assigned-vector sums, `K × dim`.
    ema_sum: Vec<f32>,
    /// Consecutive update batches without any assignment.
    idle: Vec<u32>,
    pub decay: f32,
    /// Entries idle for this many batches are reseeded.
    pub dead_after: u32,
}

impl Codebook {
    pub fn new(entries: Vec<f32>, dim: usize, decay: f32) -> Result<Self> {
        if dim == 0 || !entries.len().is_multiple_of(dim) {
            return Err(Error::shape(format!("K × {dim} entries"), entries.len()));
        }
        let k = entries.len() / dim;
        if k < 2 {
            return Err(Error::Config(format!("codebook needs K ≥ 2, got {k}")));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("codebook decay {decay} outside (0, 1)")));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite codebook entry".into()));
        }
        Ok(Self {
            dim,
            ema_sum: entries.clone(),
            usage: vec![1.0; k],
            idle: vec![0; k],
            entries,
            decay,
            dead_after: 16,
        })
    }

    /// Entries drawn from `N(0, scale²)`.
    pub fn random<R: Rng>(k: usize, dim: usize, scale: f32, decay: f32, rng: &mut R) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let entries = (0..k * dim)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Self::new(entries, dim, decay)
    }

    pub fn len(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the nearest entry in squared Euclidean distance (f64
    /// accumulation; ties resolve to the lowest index).
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, e) in self.entries.chunks_exact(self.dim).enumerate() {
            let d: f64 = e
                .iter()
                .zip(v)
                .map(|(a, b)| {
                    let t = *a as f64 - *b as f64;
                    t * t
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// EMA update from a batch of input vectors (rows of `dim`). Entries
    /// idle for `dead_after` consecutive batches are replaced by distinct
    /// random batch vectors; any left over wait for the next batch. An
    /// empty batch is a no-op.
    pub fn update<R: Rng>(&mut self, vectors: &[f32], rng: &mut R) {
        if vectors.is_empty() {
            return;
        }
        let k = self.len();
        let d = self.dim;
        let mut counts = vec![0f32; k];
        let mut sums = vec![0f32; k * d];
        for v in vectors.chunks_exact(d) {
            let j = self.nearest(v);
            counts[j] += 1.0;
            for (s, x) in sums[j * d..(j + 1) * d].iter_mut().zip(v) {
                *s += x;
            }
        }
        let g = self.decay;
        for j in 0..k {
            self.usage[j] = g * self.usage[j] + (1.0 - g) * counts[j];
            for c in 0..d {
                let i = j * d + c;
                self.ema_sum[i] = g * self.ema_sum[i] + (1.0 - g) * sums[i];
            }
            if counts[j] > 0.0 {
                self.idle[j] = 0;
            } else {
                self.idle[j] += 1;
            }
            if self.usage[j] > 1e-12 {
                for c in 0..d {
                    self.entries[j * d + c] = self.ema_sum[j * d + c] / self.usage[j];
                }
            }
        }
        // distinct batch vectors per restart: duplicated entries would tie,
        // and only the lowest index of a tie is ever selected
        let n = vectors.len() / d;
        let dead: Vec<usize> = (0..k).filter(|&j| self.idle[j] >= self.dead_after).collect();
        let picks = rand::seq::index::sample(rng, n, dead.len().min(n));
        for (j, pick) in dead.into_iter().zip(picks.iter()) {
            let v = &vectors[pick * d..(pick + 1) * d];
            self.entries[j * d..(j + 1) * d].copy_from_slice(v);
            self.ema_sum[j * d..(j + 1) * d].copy_from_slice(v);
            self.usage[j] = 1.0;
            self.idle[j] = 0;
        }
    }
}

/// Eight cascaded codebooks; stage 0 is semantic, stages 1..8 acoustic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvqStack {
    pub stages: Vec<Codebook>,
}

/// Result of running a `[C, T_n]` feature map through the stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStreams {
    pub dim: usize,
    pub frames: usize,
    /// Stage-1 output `S`, `[C, T_n]`.
    pub semantic: Vec<f32>,
    /// Stage 2..8 outputs stacked top to bottom, `[7C, T_n]`.
    pub acoustic: Vec<f32>,
    /// `indices[k][t]`.
    pub indices: Vec<Vec<u32>>,
    /// Final quantization error, `[C, T_n]`.
    pub residual: Vec<f32>,
}

impl TokenStreams {
    pub fn acoustic_channels(&self) -> usize {
        (N_STAGES - 1) * self.dim
    }

    /// Output of stage `k` (0-based), `[C, T_n]`.
    pub fn stage(&self, k: usize) -> &[f32] {
        let n = self.dim * self.frames;
        if k == 0 {
            &self.semantic
        } else {
            &self.acoustic[(k - 1) * n..k * n]
        }
    }

    /// `S + Σ acoustic stages`, the decoder input.
    pub fn quantized_sum(&self) -> Vec<f32> {
        let mut out = self.semantic.clone();
        self.add_acoustic_into(&mut out);
        out
    }

    /// `Σ acoustic stages` without the semantic part.
    pub fn acoustic_sum(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.dim * self.frames];
        self.add_acoustic_into(&mut out);
        out
    }

    fn add_acoustic_into(&self, out: &mut [f32]) {
        for k in 1..N_STAGES {
            for (o, v) in out.iter_mut().zip(self.stage(k)) {
                *o += v;
            }
        }
    }

    /// `S + Σ stages + residual`; equals the encoder output up to f32
    /// accumulation error.
    pub fn reconstruct_features(&self) -> Vec<f32> {
        let mut out = self.quantized_sum();
        for (o, r) in out.iter_mut().zip(&self.residual) {
            *o += r;
        }
        out
    }
}

/// Per-stage inputs `z_k` and outputs `q(z_k)`, kept for the commitment
/// loss and codebook updates.
#[derive(Clone, Debug)]
pub struct QuantTrace {
    pub inputs: Vec<Vec<f32>>,
    pub outputs: Vec<Vec<f32>>,
}

fn column(x: &[f32], dim: usize, frames: usize, t: usize) -> Vec<f32> {
    (0..dim).map(|c| x[c * frames + t]).collect()
}

impl RvqStack {
    pub fn random<R: Rng>(k: usize, dim: usize, scale: f32, decay: f32, rng: &mut R) -> Result<Self> {
        let stages = (0..N_STAGES)
            .map(|s| Codebook::random(k, dim, scale / (1 << s.min(4)) as f32, decay, rng))
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    pub fn dim(&self) -> usize {
        self.stages[0].dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != N_STAGES {
            return Err(Error::Config(format!("RVQ needs {N_STAGES} stages, got {}", self.stages.len())));
        }
        let d = self.dim();
        if self.stages.iter().any(|s| s.dim != d) {
            return Err(Error::Config("RVQ stages disagree on dimension".into()));
        }
        Ok(())
    }

    /// Quantizes `e: [C, T_n]`.
    pub fn quantize(&self, e: &[f32], frames: usize) -> Result<(TokenStreams, QuantTrace)> {
        let dim = self.dim();
        if e.len() != dim * frames {
            return Err(Error::shape(format!("[{dim}, {frames}] feature map"), format!("{} values", e.len())));
        }
        let n = dim * frames;
        let mut residual = e.to_vec();
        let mut indices = vec![vec![0u32; frames]; N_STAGES];
        let mut outputs = Vec::with_capacity(N_STAGES);
        let mut inputs = Vec::with_capacity(N_STAGES);
        for (k, book) in self.stages.iter().enumerate() {
            inputs.push(residual.clone());
            let mut q = vec![0f32; n];
            for t in 0..frames {
                let v = column(&residual, dim, frames, t);
                let j = book.nearest(&v);
                indices[k][t] = j as u32;
                for (c, val) in book.entry(j).iter().enumerate() {
                    q[c * frames + t] = *val;
                }
            }
            for (r, qv) in residual.iter_mut().zip(&q) {
                *r -= qv;
            }
            outputs.push(q);
        }
        let semantic = outputs[0].clone();
        let acoustic = outputs[1..].concat();
        Ok((
            TokenStreams {
                dim,
                frames,
                semantic,
                acoustic,
                indices,
                residual,
            },
            QuantTrace { inputs, outputs },
        ))
    }

    /// EMA update of every stage from a batch of traces.
    pub fn update<R: Rng>(&mut self, traces: &[QuantTrace], rng: &mut R) {
        let dim = self.dim();
        for (k, book) in self.stages.iter_mut().enumerate() {
            let mut vectors = Vec::new();
            for tr in traces {
                let frames = tr.inputs[k].len() / dim;
                for t in 0..frames {
                    vectors.extend(column(&tr.inputs[k], dim, frames, t));
                }
            }
            book.update(&vectors, rng);
        }
    }
}

/// Quantizes `e` and returns only the token streams.
pub fn rvq_quantize(e: &[f32], frames: usize, stack: &RvqStack) -> Result<TokenStreams> {
    Ok(stack.quantize(e, frames)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(entries: &[f32], dim: usize) -> Codebook {
        Codebook::new(entries.to_vec(), dim, 0.9).unwrap()
    }

    #[test]
    fn two_entry_nearest_and_residual() {
        let mut stages = vec![book(&[0.0, 0.0, 1.0, 1.0], 2)];
        for _ in 1..N_STAGES {
            stages.push(book(&[0.0, 0.0, 5.0, 5.0], 2));
        }
        let stack = RvqStack { stages };
        // column-major input [C=2, T=1]
        let ts = rvq_quantize(&[0.9, 0.8], 1, &stack).unwrap();
        assert_eq!(ts.indices[0][0], 1);
        assert!((ts.residual[0] + 0.1).abs() < 1e-6 && (ts.residual[1] + 0.2).abs() < 1e-6);
        assert!(ts.acoustic.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn exact_semantic_match_leaves_zero_residual() {
        let mut stages = vec![book(&[0.5, -0.25, 2.0, 3.0], 2)];
        for _ in 1..N_STAGES {
            stages.push(book(&[0.0, 0.0, 1.0, -1.0], 2));
        }
        let stack = RvqStack { stages };
        let ts = rvq_quantize(&[2.0, 3.0], 1, &stack).unwrap();
        assert_eq!(ts.semantic, vec![2.0, 3.0]);
        assert!(ts.acoustic.iter().all(|v| *v == 0.0));
        assert!(ts.residual.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_batch_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let entries = [1.0, 2.0, -1.0, 0.5, 3.0, 3.0];
        let mut b = book(&entries, 2);
        b.update(&entries, &mut rng);
        assert_eq!(b.entries, entries.to_vec());
    }

    #[test]
    fn ema_converges_to_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = book(&[0.0, 0.0, 100.0, 100.0], 2);
        b.dead_after = u32::MAX;
        let v = [0.7f32, -0.3];
        for _ in 0..200 {
            b.update(&v, &mut rng);
        }
        assert!((b.entry(0)[0] - 0.7).abs() < 1e-3 && (b.entry(0)[1] + 0.3).abs() < 1e-3);
    }

    #[test]
    fn idle_entry_is_reseeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = book(&[0.0, 0.0, 1000.0, 1000.0], 2);
        b.dead_after = 3;
        let batch = [0.1f32, 0.2, -0.1, 0.05];
        for _ in 0..3 {
            b.update(&batch, &mut rng);
        }
        let e = b.entry(1);
        assert!(batch.chunks(2).any(|v| v == e), "{e:?}");
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = book(&[0.0, 0.0, 1.0, 1.0], 2);
        let before = b.clone();
        b.update(&[], &mut rng);
        assert_eq!(b, before);
    }
}
