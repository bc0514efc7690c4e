//! Content-recovery probe: a linear per-frame softmax classifier from one
//! token stream to the corpus symbols. High test accuracy means the stream
//! still carries frame-level content in linearly readable form.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdm::{frame_log_mel, TokenStreams, TEACHER_MELS};
use crate::error::{Error, Result};
use crate::privacy::{shuffle, PrivacyConfig};
use crate::signal::AudioBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    Semantic,
    AcousticUnshuffled,
    AcousticShuffled,
    /// Frame log-mel energies of the waveform; the separability gate.
    Mel,
}

impl ProbeSource {
    pub const ALL: [ProbeSource; 4] = [
        ProbeSource::Mel,
        ProbeSource::Semantic,
        ProbeSource::AcousticUnshuffled,
        ProbeSource::AcousticShuffled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeSource::Semantic => "semantic",
            ProbeSource::AcousticUnshuffled => "acoustic_unshuffled",
            ProbeSource::AcousticShuffled => "acoustic_shuffled",
            ProbeSource::Mel => "mel",
        }
    }
}

impl fmt::Display for ProbeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown probe source `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// L2 penalty on the weights (not the biases).
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 128,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Per-frame features of one utterance with its frame symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeUtterance {
    pub utterance_id: String,
    /// `[frames, dim]` row-major.
    pub features: Vec<f64>,
    pub dim: usize,
    pub symbols: Vec<u32>,
}

impl ProbeUtterance {
    pub fn frames(&self) -> usize {
        self.symbols.len()
    }

    fn row(&self, t: usize) -> &[f64] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }
}

/// `[C, T]` channel-major to `[T, C]` frame rows.
fn frame_rows(x: &[f32], channels: usize, frames: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels * frames];
    for c in 0..channels {
        for t in 0..frames {
            out[t * channels + c] = x[c * frames + t] as f64;
        }
    }
    out
}

/// Builds probe features for `source`. Symbols stay at their original frame
/// positions, so shuffled features are scored against unshuffled labels.
pub fn probe_features(
    source: ProbeSource,
    utterance_id: &str,
    audio: &AudioBuffer,
    tokens: &TokenStreams,
    symbols: &[u32],
    privacy: &PrivacyConfig,
    salt: u64,
) -> Result<ProbeUtterance> {
    let frames = tokens.frames;
    if symbols.len() != frames {
        return Err(Error::Alignment {
            expected: frames,
            actual: symbols.len(),
        });
    }
    let (features, dim) = match source {
        ProbeSource::Semantic => (frame_rows(&tokens.semantic, tokens.dim, frames), tokens.dim),
        ProbeSource::AcousticUnshuffled => {
            let ch = tokens.acoustic_channels();
            (frame_rows(&tokens.acoustic, ch, frames), ch)
        }
        ProbeSource::AcousticShuffled => {
            let ch = tokens.acoustic_channels();
            // same per-utterance permutation the detector sees, even when the
            // detector itself runs unshuffled
            let on = PrivacyConfig {
                shuffle: true,
                ..*privacy
            };
            let record = on.record(frames, salt)?.ok_or_else(|| Error::Contract("shuffle record missing".into()))?;
            let (x, _) = shuffle(&tokens.acoustic, ch, frames, record.mode, record.window_frames)?;
            (frame_rows(&x, ch, frames), ch)
        }
        ProbeSource::Mel => {
            let mel = frame_log_mel(audio);
            if mel.len() < frames * TEACHER_MELS {
                return Err(Error::Alignment {
                    expected: frames,
                    actual: mel.len() / TEACHER_MELS,
                });
            }
            (mel[..frames * TEACHER_MELS].to_vec(), TEACHER_MELS)
        }
    };
    Ok(ProbeUtterance {
        utterance_id: utterance_id.to_string(),
        features,
        dim,
        symbols: symbols.to_vec(),
    })
}

/// Affine softmax classifier over standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub dim: usize,
    pub classes: usize,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `[classes, dim]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    fn logits(&self, x: &[f64], z: &mut [f64], out: &mut [f64]) {
        for (j, v) in z.iter_mut().enumerate() {
            *v = (x[j] - self.mean[j]) * self.inv_std[j];
        }
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.weights[k * self.dim..(k + 1) * self.dim];
            *o = self.bias[k] + w.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn predict(&self, u: &ProbeUtterance) -> Vec<u32> {
        let mut z = vec![0.0; self.dim];
        let mut l = vec![0.0; self.classes];
        (0..u.frames())
            .map(|t| {
                self.logits(u.row(t), &mut z, &mut l);
                // first maximum wins ties
                let mut best = 0;
                for k in 1..self.classes {
                    if l[k] > l[best] {
                        best = k;
                    }
                }
                best as u32
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub source: ProbeSource,
    pub accuracy: f64,
    pub chance: f64,
    pub train_frames: usize,
    pub test_frames: usize,
}

fn check_set(set: &[ProbeUtterance], dim: usize, classes: usize, what: &str) -> Result<usize> {
    let mut frames = 0;
    for u in set {
        if u.dim != dim || u.features.len() != u.frames() * dim {
            return Err(Error::shape(format!("{what} features [T, {dim}]"), u.features.len()));
        }
        if let Some(&s) = u.symbols.iter().find(|&&s| s as usize >= classes) {
            return Err(Error::Input(format!("{}: symbol {s} outside vocabulary {classes}", u.utterance_id)));
        }
        frames += u.frames();
    }
    if frames == 0 {
        return Err(Error::Config(format!("probe {what} split has no frames")));
    }
    Ok(frames)
}

/// Fits the probe with minibatch Adam on softmax cross-entropy.
pub fn fit_probe(train: &[ProbeUtterance], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let dim = train.first().map(|u| u.dim).ok_or_else(|| Error::Config("probe train split is empty".into()))?;
    let n = check_set(train, dim, classes, "train")?;
    let index: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(i, u)| (0..u.frames()).map(move |t| (i, t)))
        .collect();
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for &(i, t) in &index {
        for (j, v) in train[i].row(t).iter().enumerate() {
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let inv_std = (0..dim)
        .map(|j| {
            mean[j] /= n as f64;
            let var = (sq[j] / n as f64 - mean[j] * mean[j]).max(0.0);
            if var > 1e-12 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut p = LinearProbe {
        dim,
        classes,
        mean,
        inv_std,
        weights: vec![0.0; classes * dim],
        bias: vec![0.0; classes],
    };
    let np = classes * (dim + 1);
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = index.clone();
    let mut grad = vec![0.0; np];
    let mut z = vec![0.0; dim];
    let mut l = vec![0.0; classes];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &(i, t) in batch {
                p.logits(train[i].row(t), &mut z, &mut l);
                let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = l.iter().map(|v| (v - m).exp()).sum();
                let y = train[i].symbols[t] as usize;
                for k in 0..classes {
                    let d = (l[k] - m).exp() / s - if k == y { 1.0 } else { 0.0 };
                    let gw = &mut grad[k * dim..(k + 1) * dim];
                    for (g, zj) in gw.iter_mut().zip(&z) {
                        *g += d * zj;
                    }
                    grad[classes * dim + k] += d;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            step += 1;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for q in 0..np {
                let mut g = grad[q] * scale;
                let param = if q < classes * dim { &mut p.weights[q] } else { &mut p.bias[q - classes * dim] };
                if q < classes * dim {
                    g += cfg.l2 * *param;
                }
                m1[q] = b1 * m1[q] + (1.0 - b1) * g;
                m2[q] = b2 * m2[q] + (1.0 - b2) * g * g;
                *param -= cfg.learning_rate * (m1[q] / c1) / ((m2[q] / c2).sqrt() + eps);
            }
        }
    }
    Ok(p)
}

/// Fits on `train`, scores frame accuracy on `test`, and returns the per-
/// utterance test predictions.
pub fn recovery_probe(
    source: ProbeSource,
    train: &[ProbeUtterance],
    test: &[ProbeUtterance],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(ProbeResult, Vec<Vec<u32>>)> {
    let probe = fit_probe(train, classes, cfg)?;
    let test_frames = check_set(test, probe.dim, classes, "test")?;
    let mut correct = 0usize;
    let predictions: Vec<Vec<u32>> = test
        .iter()
        .map(|u| {
            let pred = probe.predict(u);
            correct += pred.iter().zip(&u.symbols).filter(|(a, b)| a == b).count();
            pred
        })
        .collect();
    let result = ProbeResult {
        source,
        accuracy: correct as f64 / test_frames as f64,
        chance: 1.0 / classes as f64,
        train_frames: train.iter().map(ProbeUtterance::frames).sum(),
        test_frames,
    };
    Ok((result, predictions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, seed: u64, noise: f64) -> Vec<ProbeUtterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let symbols: Vec<u32> = (0..40).map(|_| rng.random_range(0..4)).collect();
                let mut features = Vec::new();
                for &s in &symbols {
                    for j in 0..3 {
                        let centre = if j == s as usize % 3 { 2.0 } else { 0.0 } + if s >= 3 { 1.5 } else { 0.0 };
                        features.push(centre + noise * rng.random_range(-1.0..1.0));
                    }
                }
                ProbeUtterance {
                    utterance_id: format!("u{i}"),
                    features,
                    dim: 3,
                    symbols,
                }
            })
            .collect()
    }

    #[test]
    fn separable_data_is_learned() {
        let (r, pred) = recovery_probe(ProbeSource::Mel, &blobs(10, 1, 0.2), &blobs(4, 2, 0.2), 4, &ProbeConfig::default()).unwrap();
        assert!(r.accuracy > 0.95, "{r:?}");
        assert_eq!(pred.len(), 4);
        assert_eq!(r.chance, 0.25);
    }

    #[test]
    fn uninformative_features_stay_near_chance() {
        let mut train = blobs(10, 1, 0.2);
        let mut test = blobs(10, 2, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for u in train.iter_mut().chain(test.iter_mut()) {
            u.symbols.iter_mut().for_each(|s| *s = rng.random_range(0..4));
        }
        let (r, _) = recovery_probe(ProbeSource::Mel, &train, &test, 4, &ProbeConfig::default()).unwrap();
        assert!(r.accuracy < 0.4, "{r:?}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut t = blobs(2, 1, 0.1);
        t[0].symbols[0] = 9;
        assert!(fit_probe(&t, 4, &ProbeConfig::default()).is_err());
        assert!(matches!(fit_probe(&[], 4, &ProbeConfig::default()), Err(Error::Config(_))));
        assert_eq!("acoustic_shuffled".parse::<ProbeSource>().unwrap(), ProbeSource::AcousticShuffled);
    }
}
