//! Content protection for acoustic tokens: a `7C → C` bottleneck, windowed
//! frame shuffling with an auditable permutation record, and the exact
//! combinatorics of the shuffle.

use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::One;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::diffnum::{Graph, Layer, LayerSpec, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};

/// Shuffle window in frames (one second at 50 Hz).
pub const WINDOW_FRAMES: usize = 50;

/// `1×1` convolution from the stacked acoustic stages to `C` channels,
/// followed by batch normalization.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub in_channels: usize,
    pub out_channels: usize,
    conv: Layer,
    norm: Layer,
}

impl Bottleneck {
    pub fn new<T: Real, R: Rng>(
        in_channels: usize,
        out_channels: usize,
        bias: bool,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Layer::new(
            LayerSpec::Conv1d {
                cin: in_channels,
                cout: out_channels,
                kernel: 1,
                stride: 1,
                dilation: 1,
                pad_l: 0,
                pad_r: 0,
                bias,
            },
            &format!("{prefix}.conv"),
            store,
            rng,
        )?;
        let norm = Layer::new(
            LayerSpec::BatchNorm {
                channels: out_channels,
                momentum: 0.1,
            },
            &format!("{prefix}.bn"),
            store,
            rng,
        )?;
        Ok(Self {
            in_channels,
            out_channels,
            conv,
            norm,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.conv.param_ids().iter().chain(self.norm.param_ids()).copied().collect()
    }

    /// `[7C, T_n] → [C, T_n]`; batch statistics in train mode, running
    /// statistics in eval mode.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, a: Var) -> Result<Var> {
        let (c, _) = g.value(a).dims2()?;
        if c != self.in_channels {
            return Err(Error::shape(
                format!("[{}, T_n] acoustic stream", self.in_channels),
                format!("{:?}", g.shape(a)),
            ));
        }
        let h = self.conv.forward(g, a)?;
        self.norm.forward(g, h)
    }

    /// [`forward`](Self::forward) over several streams whose batch
    /// statistics are pooled across all their frames; outputs keep the
    /// input order and lengths.
    pub fn forward_batch<T: Real>(&self, g: &mut Graph<'_, T>, streams: &[Var]) -> Result<Vec<Var>> {
        if streams.len() == 1 {
            return Ok(vec![self.forward(g, streams[0])?]);
        }
        let mut lens = Vec::with_capacity(streams.len());
        for &a in streams {
            let (c, t) = g.value(a).dims2()?;
            if c != self.in_channels {
                return Err(Error::shape(
                    format!("[{}, T_n] acoustic stream", self.in_channels),
                    format!("{:?}", g.shape(a)),
                ));
            }
            lens.push(t);
        }
        let all = g.concat_cols(streams)?;
        let h = self.conv.forward(g, all)?;
        let h = self.norm.forward(g, h)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(lens.len());
        for t in lens {
            out.push(g.slice_cols(h, start, t)?);
            start += t;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
#[derive(Default)]
pub enum ShuffleMode {
    /// Reverse every window.
    #[default]
    Inverse,
    /// Seeded Fisher–Yates per window.
    Random { seed: u64 },
}


impl FromStr for ShuffleMode {
    type Err = Error;

    /// `inverse`, `random` (seed 0) or `random:SEED`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse" => Ok(ShuffleMode::Inverse),
            "random" => Ok(ShuffleMode::Random { seed: 0 }),
            _ => match s.strip_prefix("random:").map(str::parse) {
                Some(Ok(seed)) => Ok(ShuffleMode::Random { seed }),
                _ => Err(Error::Config(format!("unknown shuffle mode `{s}` (inverse | random[:SEED])"))),
            },
        }
    }
}

/// How acoustic streams are secured before detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrivacyConfig {
    pub shuffle: bool,
    pub mode: ShuffleMode,
    pub window_frames: usize,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            shuffle: true,
            mode: ShuffleMode::Inverse,
            window_frames: WINDOW_FRAMES,
        }
    }
}

impl PrivacyConfig {
    pub fn unshuffled() -> Self {
        Self {
            shuffle: false,
            ..Self::default()
        }
    }

    /// Record for a `frames`-long stream; `salt` varies the seed of random
    /// mode per utterance. `None` when shuffling is off.
    pub fn record(&self, frames: usize, salt: u64) -> Result<Option<PermutationRecord>> {
        if !self.shuffle {
            return Ok(None);
        }
        let mode = match self.mode {
            ShuffleMode::Random { seed } => ShuffleMode::Random {
                seed: seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            },
            m => m,
        };
        PermutationRecord::new(frames, self.window_frames, mode).map(Some)
    }
}

/// Per-window permutations; output frame `j` of window `w` is input frame
/// `permutations[w][j]` of that window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationRecord {
    #[serde(flatten)]
    pub mode: ShuffleMode,
    pub window_frames: usize,
    pub frames: usize,
    pub permutations: Vec<Vec<usize>>,
}

pub const RECORD_VERSION: u32 = 1;

impl PermutationRecord {
    pub fn new(frames: usize, window: usize, mode: ShuffleMode) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("shuffle window must be ≥ 1".into()));
        }
        let permutations = (0..frames.div_ceil(window))
            .map(|w| {
                let len = window.min(frames - w * window);
                let mut p: Vec<usize> = (0..len).collect();
                match mode {
                    ShuffleMode::Inverse => p.reverse(),
                    ShuffleMode::Random { seed } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(w as u64);
                        p.shuffle(&mut rng);
                    }
                }
                p
            })
            .collect();
        Ok(Self {
            mode,
            window_frames: window,
            frames,
            permutations,
        })
    }

    /// Flattened whole-stream permutation.
    pub fn full(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.frames);
        for (w, p) in self.permutations.iter().enumerate() {
            out.extend(p.iter().map(|i| w * self.window_frames + i));
        }
        out
    }

    /// Inverse of [`Self::full`].
    pub fn full_inverse(&self) -> Vec<usize> {
        let full = self.full();
        let mut inv = vec![0; full.len()];
        for (j, &i) in full.iter().enumerate() {
            inv[i] = j;
        }
        inv
    }

    /// Structural check: windows tile the stream and each is a bijection.
    pub fn validate(&self) -> Result<()> {
        if self.window_frames == 0 || self.permutations.len() != self.frames.div_ceil(self.window_frames) {
            return Err(Error::Record(format!(
                "{} windows do not tile {} frames of window {}",
                self.permutations.len(),
                self.frames,
                self.window_frames
            )));
        }
        for (w, p) in self.permutations.iter().enumerate() {
            let len = self.window_frames.min(self.frames - w * self.window_frames);
            let mut seen = vec![false; len];
            if p.len() != len {
                return Err(Error::Record(format!("window {w} has {} entries, expected {len}", p.len())));
            }
            for &i in p {
                if i >= len || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Record(format!("window {w} is not a permutation")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v["version"] = RECORD_VERSION.into();
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::Record(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }
}

fn permute(x: &[f32], channels: usize, frames: usize, perm: &[usize]) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for c in 0..channels {
        let row = &x[c * frames..(c + 1) * frames];
        for (j, &i) in perm.iter().enumerate() {
            out[c * frames + j] = row[i];
        }
    }
    out
}

fn check_stream(x: &[f32], channels: usize, frames: usize) -> Result<()> {
    if x.len() != channels * frames {
        return Err(Error::shape(format!("[{channels}, {frames}] stream"), format!("{} values", x.len())));
    }
    Ok(())
}

/// Shuffles the frames (columns) of a `[channels, frames]` stream within
/// consecutive windows; a short tail window is shuffled within itself.
pub fn shuffle(
    x: &[f32],
    channels: usize,
    frames: usize,
    mode: ShuffleMode,
    window: usize,
) -> Result<(Vec<f32>, PermutationRecord)> {
    check_stream(x, channels, frames)?;
    let record = PermutationRecord::new(frames, window, mode)?;
    Ok((permute(x, channels, frames, &record.full()), record))
}

/// Exact inverse of [`shuffle`].
pub fn unshuffle(x: &[f32], channels: usize, frames: usize, record: &PermutationRecord) -> Result<Vec<f32>> {
    check_stream(x, channels, frames)?;
    if record.frames != frames {
        return Err(Error::Record(format!(
            "record covers {} frames, stream has {frames}",
            record.frames
        )));
    }
    record.validate()?;
    Ok(permute(x, channels, frames, &record.full_inverse()))
}

/// Window lengths covering `frames`.
fn windows(frames: usize, window: usize) -> impl Iterator<Item = usize> {
    (0..frames.div_ceil(window.max(1))).map(move |w| window.min(frames - w * window))
}

/// Number of distinct shuffles `Π_w (len_w)!` of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationCount {
    pub exact: BigUint,
    pub log10: f64,
}

impl PermutationCount {
    /// `(mantissa, exponent)` with `exact ≈ mantissa·10^exponent`.
    pub fn scientific(&self) -> (f64, i64) {
        scientific(self.log10)
    }
}

fn scientific(log10: f64) -> (f64, i64) {
    let e = log10.floor();
    (10f64.powf(log10 - e), e as i64)
}

fn factorial(n: usize) -> BigUint {
    (2..=n as u64).fold(BigUint::one(), |acc, k| acc * k)
}

pub fn permutation_count(frames: usize, window: usize) -> Result<PermutationCount> {
    if window == 0 {
        return Err(Error::Config("shuffle window must be ≥ 1".into()));
    }
    let mut exact = BigUint::one();
    let mut ln = 0.0;
    for len in windows(frames, window) {
        exact *= factorial(len);
        ln += ln_gamma(len as f64 + 1.0);
    }
    Ok(PermutationCount {
        exact,
        log10: ln / std::f64::consts::LN_10,
    })
}

/// Probability `1 / permutation_count` of guessing every window's order.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryProbability {
    /// The probability is exactly `1 / denominator`.
    pub denominator: BigUint,
    pub log10: f64,
}

impl RecoveryProbability {
    pub fn scientific(&self) -> (f64, i64) {
        scientific(self.log10)
    }
}

pub fn recovery_probability(frames: usize, window: usize) -> Result<RecoveryProbability> {
    let c = permutation_count(frames, window)?;
    Ok(RecoveryProbability {
        denominator: c.exact,
        log10: -c.log10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::{Mode, Tensor};

    fn stream(channels: usize, frames: usize) -> Vec<f32> {
        (0..channels * frames).map(|i| i as f32 * 0.5 - 3.0).collect()
    }

    #[test]
    fn inverse_reverses_each_window_and_is_an_involution() {
        let x: Vec<f32> = (0..50).map(|i| i as f32).collect();
        let (y, rec) = shuffle(&x, 1, 50, ShuffleMode::Inverse, 50).unwrap();
        assert_eq!(y, (0..50).rev().map(|i| i as f32).collect::<Vec<_>>());
        let (z, _) = shuffle(&y, 1, 50, ShuffleMode::Inverse, 50).unwrap();
        assert_eq!(z, x);
        assert_eq!(unshuffle(&y, 1, 50, &rec).unwrap(), z);
    }

    #[test]
    fn tail_window_is_shuffled_within_itself() {
        let rec = PermutationRecord::new(120, 50, ShuffleMode::Random { seed: 3 }).unwrap();
        let lens: Vec<usize> = rec.permutations.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![50, 50, 20]);
        let full = rec.full();
        assert!(full[100..].iter().all(|&i| (100..120).contains(&i)));
    }

    #[test]
    fn random_mode_is_reproducible() {
        let a = PermutationRecord::new(200, 50, ShuffleMode::Random { seed: 9 }).unwrap();
        let b = PermutationRecord::new(200, 50, ShuffleMode::Random { seed: 9 }).unwrap();
        let c = PermutationRecord::new(200, 50, ShuffleMode::Random { seed: 10 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // windows draw from independent streams
        assert_ne!(a.permutations[0], a.permutations[1]);
    }

    #[test]
    fn record_json_roundtrip_and_mismatch() {
        let x = stream(32, 200);
        let (y, rec) = shuffle(&x, 32, 200, ShuffleMode::Random { seed: 1 }, 50).unwrap();
        let back = PermutationRecord::from_json(&rec.to_json().unwrap()).unwrap();
        assert_eq!(back, rec);
        assert_eq!(unshuffle(&y, 32, 200, &back).unwrap(), x);
        let short = stream(32, 150);
        assert!(matches!(unshuffle(&short, 32, 150, &rec), Err(Error::Record(_))));
        let mut broken = rec.clone();
        broken.permutations[1][0] = broken.permutations[1][1];
        assert!(matches!(unshuffle(&y, 32, 200, &broken), Err(Error::Record(_))));
    }

    #[test]
    fn shuffle_mode_parsing() {
        assert_eq!("inverse".parse::<ShuffleMode>().unwrap(), ShuffleMode::Inverse);
        assert_eq!("random:42".parse::<ShuffleMode>().unwrap(), ShuffleMode::Random { seed: 42 });
        assert!("sideways".parse::<ShuffleMode>().is_err());
    }

    #[test]
    fn permutation_counts() {
        let c = permutation_count(50, 50).unwrap();
        assert!(c.log10 > 64.48 && c.log10 < 64.49);
        let (m, e) = c.scientific();
        assert_eq!(e, 64);
        assert!((m - 3.0414).abs() < 1e-4);
        assert_eq!(permutation_count(3, 50).unwrap().exact, BigUint::from(6u32));
        let c4 = permutation_count(200, 50).unwrap();
        assert_eq!(c4.exact, c.exact.pow(4));
        let (m, e) = c4.scientific();
        assert_eq!(e, 257);
        assert!((m - 8.56).abs() < 5e-3);
        let p = recovery_probability(200, 50).unwrap();
        let (m, e) = p.scientific();
        assert_eq!(e, -258);
        assert!((m - 1.1687).abs() < 1e-4);
        assert_eq!(recovery_probability(1, 50).unwrap().denominator, BigUint::one());
    }

    #[test]
    fn bottleneck_shapes_and_zero_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Bottleneck::new(224, 32, false, "bn", &mut store, &mut rng).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new(&store, mode, 0);
            let a = g.input(Tensor::zeros(&[224, 200]));
            let y = b.forward(&mut g, a).unwrap();
            assert_eq!(g.shape(y), &[32, 200]);
            assert!(g.value(y).data().iter().all(|v| *v == 0.0));
        }
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let a = g.input(Tensor::zeros(&[220, 10]));
        assert!(matches!(b.forward(&mut g, a), Err(Error::Shape { .. })));
    }
}
