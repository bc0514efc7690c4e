//! Detection metrics (EER, t-DCF), transcription error rates and a
//! STOI-style intelligibility proxy.

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::diffnum::Real;
use crate::error::{Error, Result};
use crate::signal::{hann_periodic, resample, AudioBuffer, SAMPLE_RATE};

/// Detection scores split by ground truth; higher means more bonafide.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub bonafide: Vec<f64>,
    pub spoof: Vec<f64>,
}

impl ScoreSet {
    pub fn new(bonafide: Vec<f64>, spoof: Vec<f64>) -> Self {
        Self { bonafide, spoof }
    }

    pub fn len(&self) -> usize {
        self.bonafide.len() + self.spoof.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.bonafide.is_empty() || self.spoof.is_empty() {
            return Err(Error::Input(format!(
                "score set needs both classes (bonafide {}, spoof {})",
                self.bonafide.len(),
                self.spoof.len()
            )));
        }
        if self.bonafide.iter().chain(&self.spoof).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite detection score".into()));
        }
        Ok(())
    }
}

/// One threshold of the sweep: accept as bonafide when `score ≥ threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// Bonafide rejected (`P_miss`).
    pub frr: f64,
    /// Spoof accepted (`P_fa`).
    pub far: f64,
}

/// Operating points at `−∞`, every midpoint of adjacent distinct scores and
/// `+∞`, in ascending threshold order.
pub fn operating_points(scores: &ScoreSet) -> Result<Vec<OperatingPoint>> {
    scores.validate()?;
    let mut all: Vec<(f64, bool)> = scores
        .bonafide
        .iter()
        .map(|&s| (s, true))
        .chain(scores.spoof.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nb, ns) = (scores.bonafide.len() as f64, scores.spoof.len() as f64);
    let mut points = vec![OperatingPoint {
        threshold: f64::NEG_INFINITY,
        frr: 0.0,
        far: 1.0,
    }];
    let (mut below_b, mut below_s) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                below_b += 1;
            } else {
                below_s += 1;
            }
            i += 1;
        }
        let threshold = if i < all.len() { 0.5 * (v + all[i].0) } else { f64::INFINITY };
        points.push(OperatingPoint {
            threshold,
            frr: below_b as f64 / nb,
            // count ratio, not 1 − ratio, so rates are exact fractions
            far: (scores.spoof.len() - below_s) as f64 / ns,
        });
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate: the first crossing of FRR and FAR along the ascending
/// sweep, linearly interpolated between adjacent operating points.
pub fn eer(scores: &ScoreSet) -> Result<Eer> {
    let pts = operating_points(scores)?;
    let j = pts
        .iter()
        .position(|p| p.frr >= p.far)
        .expect("FRR reaches 1 and FAR reaches 0 at +∞");
    let b = pts[j];
    if b.frr == b.far {
        return Ok(Eer {
            eer: b.frr,
            threshold: finite_threshold(&pts, j, j, &all_scores(scores)),
        });
    }
    let a = pts[j - 1];
    let (da, db) = (a.frr - a.far, b.frr - b.far);
    let alpha = -da / (db - da);
    Ok(Eer {
        eer: a.frr + alpha * (b.frr - a.frr),
        threshold: finite_threshold(&pts, j - 1, j, &all_scores(scores)),
    })
}

fn all_scores(s: &ScoreSet) -> Vec<f64> {
    s.bonafide.iter().chain(&s.spoof).copied().collect()
}

/// The lower of the two bracketing thresholds that is finite; falls back to
/// the smallest score when the sweep has no midpoints.
fn finite_threshold(pts: &[OperatingPoint], lo: usize, hi: usize, scores: &[f64]) -> f64 {
    if pts[lo].threshold.is_finite() {
        pts[lo].threshold
    } else if pts[hi].threshold.is_finite() {
        pts[hi].threshold
    } else {
        scores.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Detection cost weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for TdcfParams {
    fn default() -> Self {
        Self {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 0.5,
        }
    }
}

impl TdcfParams {
    pub fn validate(&self) -> Result<()> {
        if self.c_miss < 0.0 || self.c_fa < 0.0 || (self.c_miss == 0.0 && self.c_fa == 0.0) {
            return Err(Error::Config("t-DCF costs must be non-negative and not both zero".into()));
        }
        if !(0.0..=1.0).contains(&self.p_target) {
            return Err(Error::Config(format!("P_target {} outside [0, 1]", self.p_target)));
        }
        Ok(())
    }
}

/// `C_miss·P_miss·P_target + C_fa·P_fa·(1 − P_target)`.
pub fn t_dcf(p_miss: f64, p_fa: f64, params: &TdcfParams) -> Result<f64> {
    params.validate()?;
    if !(0.0..=1.0).contains(&p_miss) || !(0.0..=1.0).contains(&p_fa) {
        return Err(Error::Domain(format!("error rates ({p_miss}, {p_fa}) outside [0, 1]")));
    }
    Ok(params.c_miss * p_miss * params.p_target + params.c_fa * p_fa * (1.0 - params.p_target))
}

/// Minimum of [`t_dcf`] over the EER threshold sweep.
pub fn min_t_dcf(scores: &ScoreSet, params: &TdcfParams) -> Result<f64> {
    let mut best = f64::INFINITY;
    for p in operating_points(scores)? {
        best = best.min(t_dcf(p.frr, p.far, params)?);
    }
    Ok(best)
}

/// Lowercase, drop everything except letters, digits, apostrophes and
/// whitespace, collapse whitespace.
pub fn normalize_text(s: &str) -> String {
    let kept: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() || c == '\'' || c.is_whitespace() { c } else { ' ' })
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T], what: &str) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input(format!("empty reference {what}")));
    }
    Ok(100.0 * edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Word error rate in percent over pre-tokenized words.
pub fn wer_words<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    error_rate(&r, &h, "word sequence")
}

/// Word error rate in percent of normalized texts.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let (r, h) = (normalize_text(reference), normalize_text(hypothesis));
    let r: Vec<&str> = r.split(' ').filter(|w| !w.is_empty()).collect();
    let h: Vec<&str> = h.split(' ').filter(|w| !w.is_empty()).collect();
    error_rate(&r, &h, "transcript")
}

/// Character error rate in percent of normalized texts (spaces included).
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = normalize_text(reference).chars().collect();
    let h: Vec<char> = normalize_text(hypothesis).chars().collect();
    error_rate(&r, &h, "transcript")
}

/// Analysis rate of the intelligibility proxy.
pub const PROXY_RATE: u32 = 10_000;
const PROXY_FRAME: usize = 256;
const PROXY_FFT: usize = 512;
const PROXY_BANDS: usize = 15;
const PROXY_LOW_CENTER: f64 = 150.0;
/// Frames per 384 ms analysis segment.
const PROXY_SEGMENT: usize = 30;
const PROXY_CLIP_DB: f64 = -15.0;
const PROXY_DYN_RANGE_DB: f64 = 40.0;

/// `[band][bin]` membership of the one-third-octave bands.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bin_hz = PROXY_RATE as f64 / PROXY_FFT as f64;
    (0..PROXY_BANDS)
        .map(|k| {
            let c = PROXY_LOW_CENTER * 2f64.powf(k as f64 / 3.0);
            let (lo, hi) = (c * 2f64.powf(-1.0 / 6.0), c * 2f64.powf(1.0 / 6.0));
            let lo = (lo / bin_hz).round() as usize;
            let hi = ((hi / bin_hz).round() as usize).max(lo + 1);
            (lo, hi)
        })
        .collect()
}

fn frames_of(x: &[f64]) -> Vec<Vec<f64>> {
    let win = hann_periodic(PROXY_FRAME);
    let hop = PROXY_FRAME / 2;
    if x.len() < PROXY_FRAME {
        return Vec::new();
    }
    (0..=(x.len() - PROXY_FRAME) / hop)
        .map(|f| (0..PROXY_FRAME).map(|n| x[f * hop + n] * win[n]).collect())
        .collect()
}

fn band_envelopes(frames: &[Vec<f64>], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let mut env = vec![Vec::with_capacity(frames.len()); bands.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); PROXY_FFT];
    for f in frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, v) in buf.iter_mut().zip(f) {
            *b = Complex::new(*v, 0.0);
        }
        f64::fft(&mut buf, false);
        for (k, &(lo, hi)) in bands.iter().enumerate() {
            let e: f64 = buf[lo..hi.min(PROXY_FFT / 2 + 1)].iter().map(|c| c.norm_sqr()).sum();
            env[k].push(e.sqrt());
        }
    }
    env
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma).powi(2);
        db += (y - mb).powi(2);
    }
    let den = (da * db).sqrt();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Simplified short-time objective intelligibility in `[0, 1]`.
///
/// Both signals are resampled to 10 kHz and analysed in 256-sample Hann
/// frames (50 % overlap). Frames more than 40 dB below the loudest reference
/// frame are dropped from both. Fifteen one-third-octave band envelopes
/// (centres from 150 Hz) are compared over 30-frame (384 ms) segments by
/// normalized correlation after scaling the degraded envelope to the
/// reference energy and clipping it at −15 dB signal-to-distortion.
pub fn intelligibility_proxy(reference: &AudioBuffer, degraded: &AudioBuffer) -> Result<f64> {
    for b in [reference, degraded] {
        if b.sample_rate != SAMPLE_RATE {
            return Err(Error::Domain(format!("proxy expects {SAMPLE_RATE} Hz audio, got {}", b.sample_rate)));
        }
    }
    let (nr, nd) = (reference.len(), degraded.len());
    if nr.abs_diff(nd) > 320 {
        return Err(Error::shape(format!("{nr} samples (±320)"), nd));
    }
    let n = nr.min(nd);
    let trim = |b: &AudioBuffer| AudioBuffer {
        samples: b.samples[..n].to_vec(),
        sample_rate: b.sample_rate,
    };
    let x = resample(&trim(reference), PROXY_RATE)?.samples;
    let y = resample(&trim(degraded), PROXY_RATE)?.samples;
    let (fx, fy) = (frames_of(&x), frames_of(&y));
    let energy = |f: &Vec<f64>| 10.0 * (f.iter().map(|v| v * v).sum::<f64>() + 1e-20).log10();
    let top = fx.iter().map(energy).fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..fx.len()).filter(|&i| energy(&fx[i]) > top - PROXY_DYN_RANGE_DB).collect();
    if keep.len() < PROXY_SEGMENT {
        return Err(Error::InsufficientInput {
            needed: PROXY_SEGMENT,
            got: keep.len(),
        });
    }
    let fx: Vec<Vec<f64>> = keep.iter().map(|&i| fx[i].clone()).collect();
    let fy: Vec<Vec<f64>> = keep.iter().map(|&i| fy[i].clone()).collect();
    let bands = third_octave_bands();
    let (ex, ey) = (band_envelopes(&fx, &bands), band_envelopes(&fy, &bands));
    let clip = 1.0 + 10f64.powf(-PROXY_CLIP_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for m in PROXY_SEGMENT..=fx.len() {
        for k in 0..PROXY_BANDS {
            let xs = &ex[k][m - PROXY_SEGMENT..m];
            let ys = &ey[k][m - PROXY_SEGMENT..m];
            let nx: f64 = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = if ny > 0.0 { nx / ny } else { 0.0 };
            let yc: Vec<f64> = ys.iter().zip(xs).map(|(y, x)| (alpha * y).min(clip * x)).collect();
            total += correlation(xs, &yc);
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

/// Serialized metric value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub params: serde_json::Value,
    pub n: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::sine;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eer_reference_cases() {
        let s = ScoreSet::new(vec![0.9, 0.8, 0.7], vec![0.2, 0.3, 0.4]);
        assert_eq!(eer(&s).unwrap().eer, 0.0);
        let s = ScoreSet::new(vec![0.8, 0.6], vec![0.7, 0.1]);
        let e = eer(&s).unwrap();
        assert_eq!(e.eer, 0.5);
        assert!(e.threshold > 0.6 && e.threshold <= 0.7);
        let s = ScoreSet::new(vec![0.1, 0.5, 0.3], vec![0.1, 0.5, 0.3]);
        assert_eq!(eer(&s).unwrap().eer, 0.5);
        assert!(matches!(eer(&ScoreSet::new(vec![], vec![0.1])), Err(Error::Input(_))));
    }

    #[test]
    fn tdcf_reference_cases() {
        let p = TdcfParams::default();
        assert_eq!(t_dcf(0.0, 0.0, &p).unwrap(), 0.0);
        assert!((t_dcf(0.1, 0.2, &p).unwrap() - 0.15).abs() < 1e-15);
        let s = ScoreSet::new(vec![0.9, 0.8], vec![0.1, 0.2]);
        assert_eq!(min_t_dcf(&s, &p).unwrap(), 0.0);
    }

    #[test]
    fn wer_reference_cases() {
        assert_eq!(wer("the cat sat", "the cat sat").unwrap(), 0.0);
        assert!((wer("the cat sat", "the bat sat on").unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(wer("hi", "a b c").unwrap(), 300.0);
        assert_eq!(wer("Hello, World!", "hello world").unwrap(), 0.0);
        assert!(matches!(wer(" ,. ", "x"), Err(Error::Input(_))));
        assert_eq!(cer("abc", "abd").unwrap(), 100.0 / 3.0);
    }

    #[test]
    fn proxy_self_noise_and_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // amplitude-modulated harmonic signal with speech-like envelopes
        let x: Vec<f64> = (0..32_000)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 4.0 * t).sin();
                env * (1..6).map(|h| (2.0 * std::f64::consts::PI * 200.0 * h as f64 * t).sin() / h as f64).sum::<f64>() * 0.2
            })
            .collect();
        let r = AudioBuffer::new(x.clone(), 16_000).unwrap();
        assert!(intelligibility_proxy(&r, &r).unwrap() >= 0.99);
        // reference STOI values (pystoi) for the same deterministic
        // inputs; the -15 dB clip gives noise a floor well above zero
        let hash: Vec<f64> = (0..32_000).map(|i| ((i as f64 * 12.9898).sin() * 43758.5453).fract() * 0.3).collect();
        let noise = AudioBuffer::new(hash.clone(), 16_000).unwrap();
        let mix = |g: f64| AudioBuffer::new(x.iter().zip(&hash).map(|(a, b)| a + g * b).collect(), 16_000).unwrap();
        for (deg, oracle) in [(noise, 0.31285), (mix(1.0), 0.64350), (mix(0.3), 0.71087)] {
            let v = intelligibility_proxy(&r, &deg).unwrap();
            assert!((v - oracle).abs() < 0.05, "{v} vs {oracle}");
        }
        let white = AudioBuffer::new((0..32_000).map(|_| rng.random_range(-0.3..0.3)).collect(), 16_000).unwrap();
        assert!(intelligibility_proxy(&r, &white).unwrap() < 0.35);
        let gained = AudioBuffer::new(x.iter().map(|v| v * 0.1).collect(), 16_000).unwrap();
        assert!((intelligibility_proxy(&r, &gained).unwrap() - 1.0).abs() < 1e-6);
        let short = sine(200.0, 0.3, 1.0, 16_000);
        assert!(matches!(intelligibility_proxy(&r, &short), Err(Error::Shape { .. })));
    }
}
