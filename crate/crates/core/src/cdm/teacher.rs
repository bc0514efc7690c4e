//! Frame-aligned semantic targets for distilling the first quantizer.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;

use crate::diffnum::Real;
use crate::error::{Error, Result};
use crate::signal::{hann_periodic, mel_filterbank, AudioBuffer};

pub const HOP: usize = 320;

/// Produces `H ∈ R^{dim × T_n}` with `T_n = floor(T / 320)`.
pub trait SemanticTeacher: Send + Sync {
    fn dim(&self) -> usize;

    /// Targets for `buf`, row-major `[dim, T_n]`. `key` identifies the
    /// utterance for teachers backed by precomputed files.
    fn targets(&self, buf: &AudioBuffer, key: &str) -> Result<Vec<f32>>;
}

pub fn frame_count(samples: usize) -> usize {
    samples / HOP
}

pub const TEACHER_FFT: usize = 512;
pub const TEACHER_MELS: usize = 40;

/// Log-mel energies of each 320-sample frame (Hann, zero-padded to 512),
/// `[T_n, 40]` row-major.
pub fn frame_log_mel(buf: &AudioBuffer) -> Vec<f64> {
    let frames = frame_count(buf.len());
    let win = hann_periodic(HOP);
    let fb = mel_filterbank(TEACHER_FFT, TEACHER_MELS, buf.sample_rate);
    let bins = TEACHER_FFT / 2 + 1;
    let mut out = Vec::with_capacity(frames * TEACHER_MELS);
    let mut spec = vec![Complex::new(0.0, 0.0); TEACHER_FFT];
    for t in 0..frames {
        spec.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for n in 0..HOP {
            spec[n] = Complex::new(buf.samples[t * HOP + n] * win[n], 0.0);
        }
        f64::fft(&mut spec, false);
        for b in 0..TEACHER_MELS {
            let e: f64 = (0..bins).map(|k| fb[b * bins + k] * spec[k].norm_sqr()).sum();
            out.push((e + 1e-6).ln());
        }
    }
    out
}

/// Deterministic stand-in teacher: per-frame log-mel features mapped through
/// a fixed seeded Gaussian projection.
#[derive(Clone, Debug)]
pub struct MockMelTeacher {
    dim: usize,
    /// `[dim, 40]`.
    projection: Vec<f64>,
}

impl MockMelTeacher {
    pub const SEED: u64 = 0x7e_ac_4e_12;

    pub fn new(dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(Self::SEED);
        let scale = 1.0 / (TEACHER_MELS as f64).sqrt();
        let projection = (0..dim * TEACHER_MELS)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self { dim, projection }
    }
}

impl SemanticTeacher for MockMelTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn targets(&self, buf: &AudioBuffer, _key: &str) -> Result<Vec<f32>> {
        let frames = frame_count(buf.len());
        if frames == 0 {
            return Err(Error::InsufficientInput {
                needed: HOP,
                got: buf.len(),
            });
        }
        let mel = frame_log_mel(buf);
        // centre each band over the utterance so the projection sees
        // spectral shape rather than overall level
        let mut mean = [0.0; TEACHER_MELS];
        for t in 0..frames {
            for b in 0..TEACHER_MELS {
                mean[b] += mel[t * TEACHER_MELS + b] / frames as f64;
            }
        }
        let mut h = vec![0f32; self.dim * frames];
        for d in 0..self.dim {
            let row = &self.projection[d * TEACHER_MELS..(d + 1) * TEACHER_MELS];
            for t in 0..frames {
                let f = &mel[t * TEACHER_MELS..(t + 1) * TEACHER_MELS];
                let v: f64 = row.iter().zip(f).zip(&mean).map(|((w, x), m)| w * (x - m)).sum();
                h[d * frames + t] = v as f32;
            }
        }
        Ok(h)
    }
}

pub const FEATURE_MAGIC: &[u8; 4] = b"HFT1";

/// Loads precomputed targets from `<dir>/<key>.feat`: magic `HFT1`, u32
/// dim, u32 frames, then `dim × frames` little-endian f32 (row-major).
#[derive(Clone, Debug)]
pub struct ExternalTeacher {
    pub dir: PathBuf,
    pub dim: usize,
}

impl ExternalTeacher {
    pub fn new(dir: impl AsRef<Path>, dim: usize) -> Self {
        Self {
            dir: dir.as_ref().to_path_buf(),
            dim,
        }
    }

    pub fn write_features(path: impl AsRef<Path>, dim: usize, frames: usize, data: &[f32]) -> Result<()> {
        let mut bytes = Vec::with_capacity(12 + data.len() * 4);
        bytes.extend_from_slice(FEATURE_MAGIC);
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(frames as u32).to_le_bytes());
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

impl SemanticTeacher for ExternalTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn targets(&self, buf: &AudioBuffer, key: &str) -> Result<Vec<f32>> {
        let path = self.dir.join(format!("{key}.feat"));
        let mut f = std::fs::File::open(&path)?;
        let mut head = [0u8; 12];
        f.read_exact(&mut head)
            .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
        if &head[..4] != FEATURE_MAGIC {
            return Err(Error::Format(format!("{}: bad magic", path.display())));
        }
        let dim = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let frames = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        if dim != self.dim {
            return Err(Error::shape(format!("teacher dim {}", self.dim), dim));
        }
        let expected = frame_count(buf.len());
        if frames != expected {
            return Err(Error::Alignment {
                expected,
                actual: frames,
            });
        }
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        if bytes.len() != dim * frames * 4 {
            return Err(Error::Format(format!("{}: payload length {}", path.display(), bytes.len())));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::sine;

    #[test]
    fn mock_teacher_is_deterministic_and_aligned() {
        let x = sine(300.0, 0.5, 1.0, 16_000);
        let t = MockMelTeacher::new(16);
        let a = t.targets(&x, "u").unwrap();
        assert_eq!(a.len(), 16 * 50);
        assert_eq!(a, MockMelTeacher::new(16).targets(&x, "u").unwrap());
    }

    #[test]
    fn external_teacher_checks_frame_count() {
        let dir = tempfile::tempdir().unwrap();
        ExternalTeacher::write_features(dir.path().join("u1.feat"), 2, 49, &vec![0.5; 98]).unwrap();
        let x = sine(300.0, 0.5, 1.0, 16_000);
        let t = ExternalTeacher::new(dir.path(), 2);
        assert!(matches!(
            t.targets(&x, "u1"),
            Err(Error::Alignment {
                expected: 50,
                actual: 49
            })
        ));
        ExternalTeacher::write_features(dir.path().join("u2.feat"), 2, 50, &vec![0.5; 100]).unwrap();
        assert_eq!(t.targets(&x, "u2").unwrap().len(), 100);
    }
}
