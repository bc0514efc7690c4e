//! Synthetic speech-like corpus with per-frame content symbols, deepfake
//! artifact transforms, and TSV manifests.
//!
//! A bonafide utterance is a harmonic complex whose spectral envelope is
//! switched every 20 ms between `V` formant templates (the content symbols),
//! with speaker-like pitch, tilt and loudness contours on top.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::cdm::HOP;
use crate::detector::Label;
use crate::diffnum::Real;
use crate::error::{Error, Result};
use crate::signal::{load_wav, write_wav, AudioBuffer, SAMPLE_RATE};

/// Syllables used to spell symbol sequences as transcripts.
pub const SYLLABLES: [&str; 16] = [
    "ba", "de", "gi", "ko", "mu", "na", "pe", "ri", "so", "tu", "va", "we", "xi", "yo", "za", "lu",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    /// Per-frame phase randomization with unchanged frame magnitudes.
    PhaseScramble,
    /// Fixed-band attenuation.
    SpectralNotch,
    /// Down-up resampling without an anti-aliasing filter.
    Alias,
}

impl Artifact {
    pub const ALL: [Artifact; 3] = [Artifact::PhaseScramble, Artifact::SpectralNotch, Artifact::Alias];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_utterances: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub vocabulary: usize,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    /// Fractions of each class assigned to dev and test; the rest is train.
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_utterances: 400,
            min_seconds: 2.0,
            max_seconds: 3.0,
            vocabulary: 8,
            seed: 0,
            artifacts: Artifact::ALL.to_vec(),
            dev_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=SYLLABLES.len()).contains(&self.vocabulary) {
            return Err(Error::Config(format!("vocabulary {} outside [2, {}]", self.vocabulary, SYLLABLES.len())));
        }
        if !(self.min_seconds > 0.0 && self.max_seconds >= self.min_seconds) {
            return Err(Error::Config("durations must be positive and ordered".into()));
        }
        if self.artifacts.is_empty() {
            return Err(Error::Config("at least one deepfake artifact is required".into()));
        }
        if self.dev_fraction < 0.0 || self.test_fraction < 0.0 || self.dev_fraction + self.test_fraction >= 1.0 {
            return Err(Error::Config("dev and test fractions must leave a training split".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub utterance_id: String,
    pub wav_path: PathBuf,
    pub label: Label,
    pub split: Split,
    pub symbols: Option<Vec<u32>>,
    pub transcript: Option<String>,
}

impl ManifestRow {
    pub fn load_audio(&self) -> Result<AudioBuffer> {
        load_wav(&self.wav_path)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_HEADER: &str = "utterance_id\twav_path\tlabel\tsplit\tsymbols\ttranscript";

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// TSV with [`MANIFEST_HEADER`]; symbols comma-separated, optional
    /// fields empty when absent.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.rows {
            let symbols = r
                .symbols
                .as_ref()
                .map(|v| v.iter().map(u32::to_string).collect::<Vec<_>>().join(","))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.utterance_id,
                r.wav_path.display(),
                r.label.as_str(),
                r.split.as_str(),
                symbols,
                r.transcript.as_deref().unwrap_or("")
            );
        }
        s
    }

    /// Parses a manifest; relative WAV paths resolve against `base`.
    pub fn from_tsv(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(MANIFEST_HEADER) {
            return Err(Error::Schema {
                field: "header".into(),
                message: format!("expected `{MANIFEST_HEADER}`"),
            });
        }
        let mut rows = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Schema {
                    field: format!("row {}", n + 2),
                    message: format!("{} columns, expected 6", f.len()),
                });
            }
            if !seen.insert(f[0].to_string()) {
                return Err(Error::Schema {
                    field: "utterance_id".into(),
                    message: format!("duplicate id `{}`", f[0]),
                });
            }
            let label = f[2].parse().map_err(|_| Error::Schema {
                field: "label".into(),
                message: format!("row {}: `{}`", n + 2, f[2]),
            })?;
            let split = f[3].parse().map_err(|_| Error::Schema {
                field: "split".into(),
                message: format!("row {}: `{}`", n + 2, f[3]),
            })?;
            let symbols = if f[4].is_empty() {
                None
            } else {
                Some(
                    f[4].split(',')
                        .map(|v| v.parse::<u32>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| Error::Schema {
                            field: "symbols".into(),
                            message: format!("row {}: {e}", n + 2),
                        })?,
                )
            };
            let path = PathBuf::from(f[1]);
            let wav_path = if path.is_absolute() { path } else { base.join(path) };
            if !wav_path.exists() {
                return Err(Error::Input(format!("manifest row {}: missing {}", n + 2, wav_path.display())));
            }
            rows.push(ManifestRow {
                utterance_id: f[0].to_string(),
                wav_path,
                label,
                split,
                symbols,
                transcript: (!f[5].is_empty()).then(|| f[5].to_string()),
            });
        }
        Ok(Self { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_tsv(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// Spells a symbol sequence with [`SYLLABLES`].
pub fn transcript_of(symbols: &[u32]) -> String {
    symbols.iter().map(|&s| SYLLABLES[s as usize]).collect::<Vec<_>>().join(" ")
}

/// Formant centres and bandwidths (Hz) of symbol `s`.
fn template(s: usize) -> [(f64, f64); 3] {
    // vowel-like F1/F2/F3 grid, spread so neighbouring symbols differ in at
    // least one formant by more than a bandwidth
    const F: [(f64, f64, f64); 16] = [
        (300.0, 2300.0, 3000.0),
        (700.0, 1200.0, 2600.0),
        (450.0, 900.0, 2400.0),
        (800.0, 1800.0, 3300.0),
        (350.0, 1500.0, 2200.0),
        (600.0, 2600.0, 3500.0),
        (250.0, 800.0, 2900.0),
        (550.0, 1700.0, 2500.0),
        (400.0, 2000.0, 3600.0),
        (750.0, 1000.0, 2100.0),
        (320.0, 1100.0, 3200.0),
        (650.0, 2200.0, 2800.0),
        (500.0, 1300.0, 3700.0),
        (850.0, 2400.0, 3100.0),
        (280.0, 1900.0, 2700.0),
        (580.0, 850.0, 3400.0),
    ];
    let (a, b, c) = F[s];
    [(a, 120.0), (b, 180.0), (c, 250.0)]
}

fn envelope(s: usize, f: f64) -> f64 {
    template(s)
        .iter()
        .enumerate()
        .map(|(i, &(c, bw))| (1.0 / (1 + i) as f64) * (-0.5 * ((f - c) / bw).powi(2)).exp())
        .sum::<f64>()
        + 0.01
}

/// Speaker-like traits drawn per utterance.
struct Voice {
    f0: f64,
    vibrato_hz: f64,
    vibrato_depth: f64,
    glide: f64,
    tilt: f64,
    syllable_hz: f64,
    level: f64,
    noise: f64,
}

impl Voice {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            f0: rng.random_range(90.0..240.0),
            vibrato_hz: rng.random_range(3.0..6.0),
            vibrato_depth: rng.random_range(0.01..0.04),
            glide: rng.random_range(-0.15..0.15),
            tilt: rng.random_range(-0.6..-0.1),
            syllable_hz: rng.random_range(2.5..5.0),
            level: rng.random_range(0.25..0.5),
            noise: rng.random_range(0.002..0.01),
        }
    }
}

/// Samples of crossfade between adjacent symbol templates.
const CROSSFADE: usize = 40;

/// Synthesizes one bonafide utterance and its per-frame symbols.
pub fn synth_bonafide(seconds: f64, vocabulary: usize, rng: &mut ChaCha8Rng) -> (AudioBuffer, Vec<u32>) {
    let frames = ((seconds * SAMPLE_RATE as f64) as usize / HOP).max(1);
    let n = frames * HOP;
    let symbols: Vec<u32> = (0..frames).map(|_| rng.random_range(0..vocabulary as u32)).collect();
    let v = Voice::draw(rng);
    let sr = SAMPLE_RATE as f64;
    let nyq = sr / 2.0;
    let mut phase = 0.0;
    let mut out = vec![0.0; n];
    let max_h = (nyq / (v.f0 * 0.8)) as usize;
    // per-harmonic amplitudes are evaluated once per frame for both the
    // frame's own template and the previous one, then blended
    let mut amps_prev = vec![0.0; max_h + 1];
    let mut amps_cur = vec![0.0; max_h + 1];
    for t in 0..frames {
        let fmid = v.f0 * (1.0 + v.glide * (t as f64 / frames as f64 - 0.5));
        for h in 1..=max_h {
            let f = fmid * h as f64;
            let gain = if f < nyq * 0.95 { (f / 100.0).powf(v.tilt) } else { 0.0 };
            amps_prev[h] = if t == 0 { 0.0 } else { amps_cur[h] };
            amps_cur[h] = gain * envelope(symbols[t] as usize, f);
        }
        if t == 0 {
            amps_prev.clone_from(&amps_cur);
        }
        for i in 0..HOP {
            let idx = t * HOP + i;
            let time = idx as f64 / sr;
            let f0 = fmid * (1.0 + v.vibrato_depth * (2.0 * PI * v.vibrato_hz * time).sin());
            phase += 2.0 * PI * f0 / sr;
            if phase > 2.0 * PI * 1e6 {
                phase -= 2.0 * PI * 1e6;
            }
            let w = if i < CROSSFADE {
                0.5 - 0.5 * (PI * (i as f64 + 0.5) / CROSSFADE as f64).cos()
            } else {
                1.0
            };
            let mut s = 0.0;
            for h in 1..=max_h {
                let a = w * amps_cur[h] + (1.0 - w) * amps_prev[h];
                if a != 0.0 {
                    s += a * (h as f64 * phase).sin();
                }
            }
            let loud = 0.6 + 0.4 * (2.0 * PI * v.syllable_hz * time).sin().abs();
            out[idx] = s * loud;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-9);
    for x in out.iter_mut() {
        *x = *x / peak * v.level + v.noise * rng.random_range(-1.0..1.0);
    }
    let ramp = 160.min(n / 2);
    for i in 0..ramp {
        let g = i as f64 / ramp as f64;
        out[i] *= g;
        out[n - 1 - i] *= g;
    }
    (
        AudioBuffer {
            samples: out,
            sample_rate: SAMPLE_RATE,
        },
        symbols,
    )
}

/// Replaces the phase of every non-overlapping 320-sample frame with random
/// values, keeping each frame's DFT magnitudes (and thus a rectangular,
/// hop-aligned magnitude spectrogram) unchanged.
pub fn phase_scramble(buf: &AudioBuffer, rng: &mut ChaCha8Rng) -> AudioBuffer {
    let mut out = buf.samples.clone();
    let mut spec = vec![Complex::new(0.0, 0.0); HOP];
    for frame in out.chunks_exact_mut(HOP) {
        for (c, x) in spec.iter_mut().zip(frame.iter()) {
            *c = Complex::new(*x, 0.0);
        }
        f64::fft(&mut spec, false);
        for k in 1..HOP.div_ceil(2) {
            let phi = rng.random_range(0.0..2.0 * PI);
            let m = spec[k].norm();
            spec[k] = Complex::from_polar(m, phi);
            spec[HOP - k] = spec[k].conj();
        }
        f64::fft(&mut spec, true);
        for (x, c) in frame.iter_mut().zip(&spec) {
            *x = (c.re / HOP as f64).clamp(-1.0, 1.0);
        }
    }
    AudioBuffer {
        samples: out,
        sample_rate: buf.sample_rate,
    }
}

/// Attenuates `[lo, hi]` Hz by `depth_db` with a zero-phase FFT mask.
pub fn spectral_notch(buf: &AudioBuffer, lo: f64, hi: f64, depth_db: f64) -> AudioBuffer {
    let n = buf.len();
    let mut spec: Vec<Complex<f64>> = buf.samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
    f64::fft(&mut spec, false);
    let g = 10f64.powf(-depth_db / 20.0);
    let sr = buf.sample_rate as f64;
    for (k, c) in spec.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if (lo..=hi).contains(&f) {
            *c *= g;
        }
    }
    f64::fft(&mut spec, true);
    AudioBuffer {
        samples: spec.iter().map(|c| (c.re / n as f64).clamp(-1.0, 1.0)).collect(),
        sample_rate: buf.sample_rate,
    }
}

/// Keeps every `factor`-th sample and holds it, folding content above the
/// reduced Nyquist frequency back into the band and imaging it upward.
pub fn alias(buf: &AudioBuffer, factor: usize) -> AudioBuffer {
    let samples = (0..buf.len()).map(|i| buf.samples[i - i % factor]).collect();
    AudioBuffer {
        samples,
        sample_rate: buf.sample_rate,
    }
}

pub fn apply_artifact(buf: &AudioBuffer, artifact: Artifact, rng: &mut ChaCha8Rng) -> AudioBuffer {
    match artifact {
        Artifact::PhaseScramble => phase_scramble(buf, rng),
        Artifact::SpectralNotch => spectral_notch(buf, 1000.0, 2000.0, 30.0),
        Artifact::Alias => alias(buf, 2),
    }
}

/// One generated utterance before it is written out.
#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub utterance_id: String,
    pub audio: AudioBuffer,
    pub label: Label,
    pub split: Split,
    pub symbols: Vec<u32>,
    pub artifact: Option<Artifact>,
}

/// Generates the corpus in memory: even indices bonafide, odd deepfake,
/// artifacts cycling over the configured list, splits balanced per class.
pub fn synth_utterances(cfg: &SynthConfig) -> Result<Vec<SynthUtterance>> {
    cfg.validate()?;
    let per_class = cfg.n_utterances / 2;
    let n_test = (per_class as f64 * cfg.test_fraction).round() as usize;
    let n_dev = (per_class as f64 * cfg.dev_fraction).round() as usize;
    let split_of = |k: usize| {
        if k < n_test {
            Split::Test
        } else if k < n_test + n_dev {
            Split::Dev
        } else {
            Split::Train
        }
    };
    let mut out = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let secs = rng.random_range(cfg.min_seconds..=cfg.max_seconds);
        let (audio, symbols) = synth_bonafide(secs, cfg.vocabulary, &mut rng);
        let k = i / 2;
        let (label, artifact, audio) = if i % 2 == 0 {
            (Label::Bonafide, None, audio)
        } else {
            let a = cfg.artifacts[k % cfg.artifacts.len()];
            (Label::Deepfake, Some(a), apply_artifact(&audio, a, &mut rng))
        };
        out.push(SynthUtterance {
            utterance_id: format!("utt{i:05}"),
            audio,
            label,
            split: split_of(k),
            symbols,
            artifact,
        });
    }
    Ok(out)
}

/// Writes the corpus WAVs and `manifest.tsv` into `out_dir`.
pub fn synth_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir.join("wav"))?;
    let mut rows = Vec::new();
    for u in synth_utterances(cfg)? {
        let rel = PathBuf::from("wav").join(format!("{}.wav", u.utterance_id));
        write_wav(dir.join(&rel), &u.audio)?;
        rows.push(ManifestRow {
            utterance_id: u.utterance_id,
            wav_path: dir.join(&rel),
            label: u.label,
            split: u.split,
            transcript: Some(transcript_of(&u.symbols)),
            symbols: Some(u.symbols),
        });
    }
    let manifest = Manifest { rows };
    // the written manifest stores paths relative to its own directory
    let relative = Manifest {
        rows: manifest
            .rows
            .iter()
            .map(|r| ManifestRow {
                wav_path: r.wav_path.strip_prefix(dir).unwrap_or(&r.wav_path).to_path_buf(),
                ..r.clone()
            })
            .collect(),
    };
    relative.save(dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_utterances: 10,
            min_seconds: 0.5,
            max_seconds: 0.8,
            ..Default::default()
        }
    }

    #[test]
    fn balanced_and_deterministic() {
        let a = synth_utterances(&small()).unwrap();
        let b = synth_utterances(&small()).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.iter().filter(|u| u.label == Label::Bonafide).count(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.audio, y.audio);
            assert_eq!(x.symbols, y.symbols);
            assert_eq!(x.symbols.len(), x.audio.len() / HOP);
            assert!(x.audio.samples.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn phase_scramble_keeps_frame_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, _) = synth_bonafide(0.5, 8, &mut rng);
        let y = phase_scramble(&x, &mut rng);
        let mags = |b: &AudioBuffer| -> Vec<f64> {
            let mut out = Vec::new();
            for f in b.samples.chunks_exact(HOP) {
                let mut s: Vec<Complex<f64>> = f.iter().map(|&v| Complex::new(v, 0.0)).collect();
                f64::fft(&mut s, false);
                out.extend(s.iter().map(|c| c.norm()));
            }
            out
        };
        let (mx, my) = (mags(&x), mags(&y));
        let scale = mx.iter().cloned().fold(0.0, f64::max);
        for (a, b) in mx.iter().zip(&my) {
            assert!((a - b).abs() <= 1e-3 * scale);
        }
        assert!(x.samples.iter().zip(&y.samples).any(|(a, b)| (a - b).abs() > 1e-3));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_corpus(&small(), dir.path()).unwrap();
        let back = Manifest::load(dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(back, m);
        let bad = format!("{MANIFEST_HEADER}\nu1\tmissing.wav\tbonafide\ttrain\t\t\n");
        assert!(matches!(Manifest::from_tsv(&bad, dir.path()), Err(Error::Input(_))));
        let dup = format!(
            "{MANIFEST_HEADER}\n{0}\twav/utt00000.wav\tbonafide\ttrain\t\t\n{0}\twav/utt00000.wav\tbonafide\ttrain\t\t\n",
            "u"
        );
        assert!(matches!(Manifest::from_tsv(&dup, dir.path()), Err(Error::Schema { .. })));
    }
}
