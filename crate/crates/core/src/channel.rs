//! Transmission-channel simulation: companding codecs, band limiting and an
//! external-encoder plugin.

use std::collections::BTreeMap;
use std::fmt;
use std::process::Command;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{load_wav, resample, write_wav, AudioBuffer};

pub const MU: f64 = 255.0;
pub const A: f64 = 87.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Law {
    Mu,
    A,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodecId {
    MuLaw,
    ALaw,
    BandlimitGsmLike,
    External(String),
    None,
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecId::MuLaw => f.write_str("mu_law"),
            CodecId::ALaw => f.write_str("a_law"),
            CodecId::BandlimitGsmLike => f.write_str("bandlimit_gsm_like"),
            CodecId::External(name) => write!(f, "external:{name}"),
            CodecId::None => f.write_str("none"),
        }
    }
}

impl FromStr for CodecId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "mu" | "mu_law" | "mulaw" => CodecId::MuLaw,
            "a" | "a_law" | "alaw" => CodecId::ALaw,
            "bandlimit" | "bandlimit_gsm_like" | "gsm_like" => CodecId::BandlimitGsmLike,
            "none" => CodecId::None,
            other => match other.strip_prefix("external:") {
                Some(name) if !name.is_empty() => CodecId::External(s.trim()["external:".len()..].to_string()),
                _ => return Err(Error::Config(format!("unknown codec `{s}`"))),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub codec_weights: Vec<(CodecId, f64)>,
    pub quantize_levels: usize,
    pub bandlimit_rate: u32,
    /// External codec name → command template with `{in}` and `{out}`.
    #[serde(default)]
    pub external: BTreeMap<String, String>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl ChannelConfig {
    /// All weight on [`CodecId::None`].
    pub fn identity() -> Self {
        Self {
            codec_weights: vec![(CodecId::None, 1.0)],
            quantize_levels: 256,
            bandlimit_rate: 8000,
            external: BTreeMap::new(),
        }
    }

    /// Training augmentation mix: a clean share plus the three analytic codecs.
    pub fn augmentation() -> Self {
        Self {
            codec_weights: vec![
                (CodecId::None, 0.25),
                (CodecId::MuLaw, 0.25),
                (CodecId::ALaw, 0.25),
                (CodecId::BandlimitGsmLike, 0.25),
            ],
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codec_weights.is_empty() {
            return Err(Error::Config("codec_weights is empty".into()));
        }
        let mut sum = 0.0;
        for (c, w) in &self.codec_weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!("codec weight {w} for {c} must be finite and ≥ 0")));
            }
            if let CodecId::External(name) = c {
                if !self.external.contains_key(name) {
                    return Err(Error::Config(format!("external codec `{name}` has no registered command")));
                }
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("codec weights sum to {sum}, expected 1")));
        }
        if self.quantize_levels < 2 {
            return Err(Error::Config("quantize_levels must be ≥ 2".into()));
        }
        if self.bandlimit_rate == 0 {
            return Err(Error::Config("bandlimit_rate must be positive".into()));
        }
        Ok(())
    }
}

fn check_unit(x: f64) -> Result<()> {
    if x.is_nan() || x.abs() > 1.0 {
        return Err(Error::Domain(format!("amplitude {x} outside [-1, 1]")));
    }
    Ok(())
}

/// μ-law or A-law compression of an amplitude in `[-1, 1]`.
pub fn compand(x: f64, law: Law) -> Result<f64> {
    check_unit(x)?;
    let a = x.abs();
    let y = match law {
        Law::Mu => (MU * a).ln_1p() / MU.ln_1p(),
        Law::A => {
            let d = 1.0 + A.ln();
            if a < 1.0 / A {
                A * a / d
            } else {
                (1.0 + (A * a).ln()) / d
            }
        }
    };
    Ok(y.copysign(x))
}

/// Inverse of [`compand`].
pub fn expand(y: f64, law: Law) -> Result<f64> {
    check_unit(y)?;
    let b = y.abs();
    let x = match law {
        Law::Mu => ((b * MU.ln_1p()).exp() - 1.0) / MU,
        Law::A => {
            let d = 1.0 + A.ln();
            if b < 1.0 / d {
                b * d / A
            } else {
                (b * d - 1.0).exp() / A
            }
        }
    };
    Ok(x.min(1.0).copysign(y))
}

/// Mid-rise uniform quantizer with `levels` cells over `[-1, 1]`.
pub fn quantize_uniform(y: f64, levels: usize) -> f64 {
    let step = 2.0 / levels as f64;
    let idx = ((y + 1.0) / step).floor().clamp(0.0, (levels - 1) as f64);
    -1.0 + (idx + 0.5) * step
}

fn companded_roundtrip(samples: &[f64], law: Law, levels: usize) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|&x| {
            let y = compand(x.clamp(-1.0, 1.0), law)?;
            expand(quantize_uniform(y, levels), law)
        })
        .collect()
}

fn fit_length(mut v: Vec<f64>, n: usize) -> Vec<f64> {
    v.resize(n, 0.0);
    v
}

/// Passes a buffer through one codec. Output keeps the input length and
/// sample rate.
pub fn codec_roundtrip(buf: &AudioBuffer, codec: &CodecId, cfg: &ChannelConfig) -> Result<AudioBuffer> {
    let n = buf.len();
    let samples = match codec {
        CodecId::None => return Ok(buf.clone()),
        CodecId::MuLaw => companded_roundtrip(&buf.samples, Law::Mu, cfg.quantize_levels)?,
        CodecId::ALaw => companded_roundtrip(&buf.samples, Law::A, cfg.quantize_levels)?,
        CodecId::BandlimitGsmLike => {
            let low = resample(buf, cfg.bandlimit_rate)?;
            let coded = AudioBuffer {
                samples: companded_roundtrip(&low.samples, Law::Mu, cfg.quantize_levels)?,
                sample_rate: low.sample_rate,
            };
            fit_length(resample(&coded, buf.sample_rate)?.samples, n)
        }
        CodecId::External(name) => {
            let template = cfg
                .external
                .get(name)
                .ok_or_else(|| Error::Config(format!("external codec `{name}` has no registered command")))?;
            fit_length(external_codec(buf, template)?.samples, n)
        }
    };
    AudioBuffer::new(samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), buf.sample_rate)
}

/// Draws a codec from `cfg.codec_weights` with a generator seeded by `seed`.
pub fn sample_codec(cfg: &ChannelConfig, seed: u64) -> Result<CodecId> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, w) in &cfg.codec_weights {
        acc += w;
        if u < acc {
            return Ok(c.clone());
        }
    }
    // u within rounding of the total: last positive weight
    Ok(cfg
        .codec_weights
        .iter()
        .rev()
        .find(|(_, w)| *w > 0.0)
        .map(|(c, _)| c.clone())
        .unwrap_or(CodecId::None))
}

pub fn augment(buf: &AudioBuffer, cfg: &ChannelConfig, seed: u64) -> Result<(AudioBuffer, CodecId)> {
    let codec = sample_codec(cfg, seed)?;
    let out = codec_roundtrip(buf, &codec, cfg)?;
    Ok((out, codec))
}

/// Runs `sh -c <template>` with `{in}`/`{out}` replaced by temporary WAV
/// paths, then reads the output back at the input sample rate.
pub fn external_codec(buf: &AudioBuffer, command_template: &str) -> Result<AudioBuffer> {
    if !command_template.contains("{in}") || !command_template.contains("{out}") {
        return Err(Error::Config("external codec template needs {in} and {out} placeholders".into()));
    }
    let plugin = |status, message: String| Error::Plugin { status, message };
    let dir = tempfile::tempdir()?;
    let input = dir.path().join("in.wav");
    let output = dir.path().join("out.wav");
    write_wav(&input, buf)?;
    let quote = |p: &std::path::Path| format!("'{}'", p.display().to_string().replace('\'', r"'\''"));
    let cmd = command_template
        .replace("{in}", &quote(&input))
        .replace("{out}", &quote(&output));
    let result = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| plugin(None, format!("failed to spawn `{cmd}`: {e}")))?;
    if !result.status.success() {
        let stderr = String::from_utf8_lossy(&result.stderr);
        return Err(plugin(
            result.status.code(),
            format!("`{command_template}` failed: {}", stderr.trim()),
        ));
    }
    if !output.exists() {
        return Err(plugin(Some(0), format!("`{command_template}` produced no output file")));
    }
    let decoded = load_wav(&output).map_err(|e| plugin(Some(0), format!("unreadable codec output: {e}")))?;
    resample(&decoded, buf.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{sine, snr_db};

    #[test]
    fn mu_law_reference_values() {
        assert_eq!(compand(0.0, Law::Mu).unwrap(), 0.0);
        assert!((compand(1.0, Law::Mu).unwrap() - 1.0).abs() < 1e-15);
        let want = 26.5f64.ln() / 256f64.ln();
        assert!((compand(0.1, Law::Mu).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.59100).abs() < 1e-5);
        assert!(matches!(compand(1.5, Law::A), Err(Error::Domain(_))));
    }

    #[test]
    fn a_law_is_continuous_at_breakpoint() {
        let b = 1.0 / A;
        let lo = compand(b - 1e-12, Law::A).unwrap();
        let hi = compand(b, Law::A).unwrap();
        assert!((lo - hi).abs() < 1e-9);
    }

    #[test]
    fn none_codec_is_identity() {
        let x = sine(300.0, 0.4, 0.1, 16_000);
        assert_eq!(codec_roundtrip(&x, &CodecId::None, &ChannelConfig::identity()).unwrap(), x);
    }

    #[test]
    fn bandlimit_passes_voice_band_and_cuts_highs() {
        let cfg = ChannelConfig::identity();
        let lo = sine(440.0, 0.5, 1.0, 16_000);
        let y = codec_roundtrip(&lo, &CodecId::BandlimitGsmLike, &cfg).unwrap();
        assert_eq!(y.len(), lo.len());
        let e = 400;
        assert!(snr_db(&lo.samples[e..16_000 - e], &y.samples[e..16_000 - e]) > 20.0);
        let hi = sine(7000.0, 0.5, 1.0, 16_000);
        let y = codec_roundtrip(&hi, &CodecId::BandlimitGsmLike, &cfg).unwrap();
        let p_in: f64 = hi.samples[e..16_000 - e].iter().map(|v| v * v).sum();
        let p_out: f64 = y.samples[e..16_000 - e].iter().map(|v| v * v).sum();
        assert!(10.0 * (p_in / p_out).log10() > 20.0);
    }

    #[test]
    fn augment_frequencies_follow_weights() {
        let cfg = ChannelConfig {
            codec_weights: vec![(CodecId::MuLaw, 0.5), (CodecId::ALaw, 0.5)],
            ..ChannelConfig::identity()
        };
        let mu = (0..10_000u64)
            .filter(|&s| sample_codec(&cfg, s).unwrap() == CodecId::MuLaw)
            .count();
        let f = mu as f64 / 10_000.0;
        assert!((f - 0.5).abs() <= 0.02, "{f}");
    }

    #[test]
    fn weights_must_sum_to_one() {
        let cfg = ChannelConfig {
            codec_weights: vec![(CodecId::MuLaw, 0.5), (CodecId::ALaw, 0.4)],
            ..ChannelConfig::identity()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ChannelConfig {
            codec_weights: vec![(CodecId::External("opus".into()), 1.0)],
            ..ChannelConfig::identity()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn codec_ids_parse_and_print() {
        for c in [
            CodecId::MuLaw,
            CodecId::ALaw,
            CodecId::BandlimitGsmLike,
            CodecId::None,
            CodecId::External("Opus".into()),
        ] {
            assert_eq!(c.to_string().parse::<CodecId>().unwrap(), c);
        }
        assert!("mp9".parse::<CodecId>().is_err());
    }

    #[test]
    fn external_copy_and_failure() {
        let x = sine(500.0, 0.3, 0.05, 16_000);
        let y = external_codec(&x, "cp {in} {out}").unwrap();
        let pcm = |b: &AudioBuffer| b.samples.iter().map(|v| crate::signal::to_pcm16(*v)).collect::<Vec<_>>();
        assert_eq!(pcm(&y), pcm(&x));
        match external_codec(&x, "exit 3 # {in} {out}") {
            Err(Error::Plugin { status, .. }) => assert_eq!(status, Some(3)),
            other => panic!("expected plugin error, got {other:?}"),
        }
        assert!(matches!(external_codec(&x, "true {in} {out}"), Err(Error::Plugin { .. })));
    }
}
