//! Waveform I/O, resampling, STFT and mel spectrograms.
//!
//! STFT frames use a periodic Hann window over a signal reflect-padded by
//! `window / 2` on both sides, so frame `m` is centred on sample `m · hop`.

use std::path::Path;

use rustfft::num_complex::Complex;

use crate::diffnum::Real;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM waveform with amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let buf = Self {
            samples,
            sample_rate,
        };
        buf.validate()?;
        Ok(buf)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if self.samples.is_empty() {
            return Err(Error::InsufficientInput { needed: 1, got: 0 });
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.samples.iter().map(|&v| v as f32).collect()
    }
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(m) => Error::Format(m.to_string()),
        hound::Error::Unsupported => Error::Unsupported("WAV encoding".into()),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a PCM16 or IEEE-float32 WAV file; multi-channel input is averaged
/// to mono. PCM16 is scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let mut reader = hound::WavReader::open(path.as_ref()).map_err(wav_error)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_error)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_error)?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!("{bits}-bit {fmt:?} samples")));
        }
    };
    let samples: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| (frame.iter().sum::<f64>() / channels as f64).clamp(-1.0, 1.0))
        .collect();
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Quantizes to PCM16 (round to nearest, saturating).
pub fn to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec).map_err(wav_error)?;
    for &s in &buf.samples {
        w.write_sample(to_pcm16(s)).map_err(wav_error)?;
    }
    w.finalize().map_err(wav_error)?;
    Ok(())
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc interpolation: 32 zero crossings per side at the
/// lower of the two rates, β = 8.6, cutoff 0.95 × the lower Nyquist.
pub const RESAMPLE_ZERO_CROSSINGS: usize = 32;
const RESAMPLE_BETA: f64 = 8.6;
const RESAMPLE_ROLLOFF: f64 = 0.95;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Band-limited resampling. Output length is `round(T · target / source)`;
/// matching rates return the input unchanged.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::Input("target rate must be positive".into()));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let (sr, tr) = (buf.sample_rate as u64, target_rate as u64);
    let out_len = ((buf.len() as u64 * tr) as f64 / sr as f64).round() as usize;
    // cutoff in cycles per input sample (input Nyquist = 0.5)
    let fc = 0.5 * RESAMPLE_ROLLOFF * (tr as f64 / sr as f64).min(1.0);
    let half = RESAMPLE_ZERO_CROSSINGS as f64 / (2.0 * fc);
    let taps = half.ceil() as isize;
    let i0b = bessel_i0(RESAMPLE_BETA);
    let kernel = |d: f64| -> f64 {
        if d.abs() >= half {
            return 0.0;
        }
        let s = if d == 0.0 {
            2.0 * fc
        } else {
            (2.0 * std::f64::consts::PI * fc * d).sin() / (std::f64::consts::PI * d)
        };
        let r = d / half;
        s * bessel_i0(RESAMPLE_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0b
    };
    // Output j sits at input position j·sr/tr; its fractional phase repeats
    // with period tr/g, so kernels are cached per phase.
    let g = gcd(sr, tr);
    let period = (tr / g) as usize;
    let step_num = sr / g; // input advance per output, as a fraction of period
    let cache_phases = period <= 4096;
    let mut cache: Vec<Option<Vec<f64>>> = if cache_phases { vec![None; period] } else { Vec::new() };
    let x = &buf.samples;
    let n = x.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let num = j as u64 * step_num; // position = num / period
        let base = (num / period as u64) as isize;
        let phase = (num % period as u64) as usize;
        let frac = phase as f64 / period as f64;
        let weights = if cache_phases {
            cache[phase].get_or_insert_with(|| (-taps..=taps).map(|k| kernel(k as f64 - frac)).collect())
        } else {
            cache.clear();
            cache.push(Some((-taps..=taps).map(|k| kernel(k as f64 - frac)).collect()));
            cache[0].as_mut().unwrap()
        };
        let mut acc = 0.0;
        for (wi, k) in (-taps..=taps).enumerate() {
            let idx = base + k;
            if idx >= 0 && idx < n {
                acc += weights[wi] * x[idx as usize];
            }
        }
        // kernel taps sum to ~1; ringing past full scale is clipped
        out.push(acc.clamp(-1.0, 1.0));
    }
    AudioBuffer::new(out, target_rate)
}

/// Periodic Hann window `0.5 − 0.5·cos(2πn/N)`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Framing of a centred STFT.
#[derive(Clone, Debug, PartialEq)]
pub struct StftPlan {
    pub len: usize,
    pub window: usize,
    pub hop: usize,
    pub pad: usize,
    pub frames: usize,
    pub bins: usize,
    win: Vec<f64>,
}

impl StftPlan {
    pub fn new(len: usize, window: usize, hop: usize) -> Result<Self> {
        if hop == 0 || window < hop {
            return Err(Error::Input(format!(
                "STFT requires window ≥ hop ≥ 1 (window {window}, hop {hop})"
            )));
        }
        if len < window {
            return Err(Error::InsufficientInput {
                needed: window,
                got: len,
            });
        }
        let pad = window / 2;
        let padded = len + 2 * pad;
        Ok(Self {
            len,
            window,
            hop,
            pad,
            frames: (padded - window) / hop + 1,
            bins: window / 2 + 1,
            win: hann_periodic(window),
        })
    }

    /// Index into the unpadded signal for padded position `j` (reflect).
    #[inline]
    fn src(&self, j: usize) -> usize {
        let i = j as isize - self.pad as isize;
        let n = self.len as isize;
        let r = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        r as usize
    }

    pub fn window_fn(&self) -> &[f64] {
        &self.win
    }
}

/// Forward STFT kernel: returns `(re, im)`, each `[bins, frames]` row-major.
pub fn stft_kernel<T: Real>(x: &[T], plan: &StftPlan) -> (Vec<T>, Vec<T>) {
    let (w, bins, frames) = (plan.window, plan.bins, plan.frames);
    let mut re = vec![T::zero(); bins * frames];
    let mut im = vec![T::zero(); bins * frames];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); w];
    for m in 0..frames {
        for n in 0..w {
            let v = x[plan.src(m * plan.hop + n)] * T::of(plan.win[n]);
            buf[n] = Complex::new(v, T::zero());
        }
        T::fft(&mut buf, false);
        for k in 0..bins {
            re[k * frames + m] = buf[k].re;
            im[k * frames + m] = buf[k].im;
        }
    }
    (re, im)
}

/// Adjoint of [`stft_kernel`]: accumulates `∂L/∂x` into `dx`.
pub fn stft_adjoint<T: Real>(dre: &[T], dim: &[T], plan: &StftPlan, dx: &mut [T]) {
    let (w, bins, frames) = (plan.window, plan.bins, plan.frames);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); w];
    for m in 0..frames {
        // dxw[n] = Re Σ_{k ≤ w/2} (dre_k + i·dim_k) e^{+2πikn/w}
        for (k, b) in buf.iter_mut().enumerate() {
            *b = if k < bins {
                Complex::new(dre[k * frames + m], dim[k * frames + m])
            } else {
                Complex::new(T::zero(), T::zero())
            };
        }
        T::fft(&mut buf, true);
        for n in 0..w {
            dx[plan.src(m * plan.hop + n)] += buf[n].re * T::of(plan.win[n]);
        }
    }
}

/// Non-negative-frequency STFT (`bins = window/2 + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: usize,
    pub frames: usize,
    pub window_size: usize,
    pub hop_size: usize,
    /// Row-major `[bins, frames]`.
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrogram {
    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(a, b)| a.hypot(*b)).collect()
    }

    pub fn at(&self, bin: usize, frame: usize) -> Complex<f64> {
        let i = bin * self.frames + frame;
        Complex::new(self.re[i], self.im[i])
    }
}

pub fn stft(buf: &AudioBuffer, window_size: usize, hop_size: usize) -> Result<ComplexSpectrogram> {
    let plan = StftPlan::new(buf.len(), window_size, hop_size)?;
    let (re, im) = stft_kernel(&buf.samples, &plan);
    Ok(ComplexSpectrogram {
        bins: plan.bins,
        frames: plan.frames,
        window_size,
        hop_size,
        re,
        im,
    })
}

pub const DEFAULT_MEL_BANDS: usize = 64;
pub const MEL_SCALES: std::ops::RangeInclusive<u32> = 5..=11;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank `[bands, n_fft/2 + 1]` spanning 0 Hz to Nyquist.
pub fn mel_filterbank(n_fft: usize, bands: usize, sample_rate: u32) -> Vec<f64> {
    let bins = n_fft / 2 + 1;
    let nyq = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyq);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    let mut fb = vec![0.0; bands * bins];
    for b in 0..bands {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[b * bins + k] = w;
        }
    }
    fb
}

/// Mel energies at one analysis scale (window `2^i`, hop `2^i / 4`).
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub scale_index: u32,
    pub band_count: usize,
    pub frames: usize,
    /// Row-major `[bands, frames]`.
    pub energies: Vec<f64>,
}

pub fn mel_scale_geometry(scale_index: u32) -> Result<(usize, usize)> {
    if !MEL_SCALES.contains(&scale_index) {
        return Err(Error::Domain(format!("mel scale index {scale_index} outside [5, 11]")));
    }
    let w = 1usize << scale_index;
    Ok((w, w / 4))
}

pub fn mel_spectrogram(buf: &AudioBuffer, scale_index: u32, band_count: usize) -> Result<MelSpectrogram> {
    let (w, hop) = mel_scale_geometry(scale_index)?;
    let spec = stft(buf, w, hop)?;
    let mag = spec.magnitude();
    let fb = mel_filterbank(w, band_count, buf.sample_rate);
    let mut energies = vec![0.0; band_count * spec.frames];
    crate::diffnum::matmul_into(&fb, false, &mag, false, band_count, spec.bins, spec.frames, &mut energies, false);
    energies.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(MelSpectrogram {
        scale_index,
        band_count,
        frames: spec.frames,
        energies,
    })
}

/// Signal-to-noise ratio of `test` against `reference` in dB.
pub fn snr_db(reference: &[f64], test: &[f64]) -> f64 {
    let n = reference.len().min(test.len());
    let sig: f64 = reference[..n].iter().map(|v| v * v).sum();
    let noise: f64 = reference[..n].iter().zip(&test[..n]).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (sig / noise.max(1e-300)).log10()
}

pub fn sine(freq: f64, amplitude: f64, seconds: f64, rate: u32) -> AudioBuffer {
    let n = (seconds * rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
        .collect();
    AudioBuffer {
        samples,
        sample_rate: rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pcm16_round_trip_and_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [-32768i16, 0, 16384, 32767] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let buf = load_wav(&path).unwrap();
        assert_eq!(buf.samples, vec![-1.0, 0.0, 0.5, 32767.0 / 32768.0]);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0.5f32, -0.25, 1.0, 0.0] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let buf = load_wav(&path).unwrap();
        assert_eq!(buf.samples, vec![0.125, 0.5]);
        assert_eq!(buf.sample_rate, 8000);
    }

    #[test]
    fn garbage_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFF\x04\x00\x00\x00JUNKJUNKJUNK").unwrap();
        assert!(matches!(load_wav(&path), Err(Error::Format(_))));
    }

    #[test]
    fn eight_bit_pcm_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&path), Err(Error::Unsupported(_))));
    }

    #[test]
    fn resample_lengths_and_identity() {
        let x = sine(440.0, 0.5, 1.0, 16_000);
        assert_eq!(resample(&x, 8000).unwrap().len(), 8000);
        assert_eq!(resample(&x, 16_000).unwrap(), x);
        assert_eq!(resample(&x, 22_050).unwrap().len(), 22_050);
    }

    #[test]
    fn resample_down_up_keeps_tone() {
        let x = sine(440.0, 0.5, 1.0, 16_000);
        let y = resample(&resample(&x, 8000).unwrap(), 16_000).unwrap();
        // skip the kernel half-width at each edge
        let e = 400;
        let snr = snr_db(&x.samples[e..16_000 - e], &y.samples[e..16_000 - e]);
        assert!(snr > 30.0, "snr {snr}");
    }

    #[test]
    fn stft_frame_count_and_peak_bin() {
        let x = sine(1000.0, 0.5, 1.0, 16_000);
        let s = stft(&x, 1024, 256).unwrap();
        assert_eq!(s.frames, (16_000 + 2 * 512 - 1024) / 256 + 1);
        let mag = s.magnitude();
        let mid = s.frames / 2;
        let peak = (0..s.bins)
            .max_by(|&a, &b| mag[a * s.frames + mid].total_cmp(&mag[b * s.frames + mid]))
            .unwrap();
        assert_eq!(peak, 64);

        let one_sec = AudioBuffer::new(vec![0.0; 16_000], 16_000).unwrap();
        let s = stft(&one_sec, 320, 320).unwrap();
        assert_eq!(s.frames, 51);
        assert!(s.re.iter().chain(&s.im).all(|v| *v == 0.0));
        assert!(matches!(
            stft(&AudioBuffer::new(vec![0.1; 100], 16_000).unwrap(), 128, 32),
            Err(Error::InsufficientInput { .. })
        ));
    }

    #[test]
    fn stft_parseval_with_cola_hann() {
        // The signal is zero near both edges, so reflect padding contributes
        // nothing and every sample is covered by a full window overlap; for
        // hop = w/4 the periodic Hann satisfies Σ_m w²[n − mH] = 3w/(8H).
        let w = 256;
        let h = w / 4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = vec![0.0; 4096 + 2 * w];
        for v in x[w..w + 4096].iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let buf = AudioBuffer::new(x.clone(), 16_000).unwrap();
        let s = stft(&buf, w, h).unwrap();
        let mut spec_energy = 0.0;
        for k in 0..s.bins {
            let mult = if k == 0 || k == w / 2 { 1.0 } else { 2.0 };
            for m in 0..s.frames {
                spec_energy += mult * s.at(k, m).norm_sqr();
            }
        }
        let factor = 3.0 * w as f64 / (8.0 * h as f64);
        let time_energy: f64 = x.iter().map(|v| v * v).sum::<f64>() * factor * w as f64;
        assert!((spec_energy - time_energy).abs() / time_energy < 1e-6);
    }

    #[test]
    fn stft_adjoint_identity() {
        let plan = StftPlan::new(100, 32, 8).unwrap();
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
        let n = plan.bins * plan.frames;
        let yr: Vec<f64> = (0..n).map(|i| (i as f64 * 0.17).cos()).collect();
        let yi: Vec<f64> = (0..n).map(|i| (i as f64 * 0.07).sin()).collect();
        let (re, im) = stft_kernel(&x, &plan);
        let lhs: f64 = re.iter().zip(&yr).map(|(a, b)| a * b).sum::<f64>()
            + im.iter().zip(&yi).map(|(a, b)| a * b).sum::<f64>();
        let mut dx = vec![0.0; 100];
        stft_adjoint(&yr, &yi, &plan, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn mel_geometry_and_dc() {
        assert_eq!(mel_scale_geometry(5).unwrap(), (32, 8));
        assert_eq!(mel_scale_geometry(11).unwrap(), (2048, 512));
        assert!(mel_scale_geometry(4).is_err());
        let dc = AudioBuffer::new(vec![0.3; 8000], 16_000).unwrap();
        for i in [9, 10, 11] {
            let m = mel_spectrogram(&dc, i, 64).unwrap();
            let f = m.frames / 2;
            let band = (0..64)
                .max_by(|&a, &b| m.energies[a * m.frames + f].total_cmp(&m.energies[b * m.frames + f]))
                .unwrap();
            assert_eq!(band, 0, "scale {i}");
        }
        let z = AudioBuffer::new(vec![0.0; 4096], 16_000).unwrap();
        assert!(mel_spectrogram(&z, 8, 64).unwrap().energies.iter().all(|v| *v == 0.0));
    }
}
