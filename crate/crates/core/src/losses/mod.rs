//! Training objectives for the codec and its discriminators.
//!
//! Every loss is built from graph operations so it can be differentiated
//! and finite-difference checked; closed forms are evaluated by running the
//! same graph in f64.

mod discriminators;

pub use discriminators::{DiscOutput, DiscriminatorConfig, DiscriminatorSet};

use serde::{Deserialize, Serialize};

use crate::diffnum::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::{mel_filterbank, mel_scale_geometry, DEFAULT_MEL_BANDS};

/// Coefficients of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub distill: f64,
    pub rec: f64,
    pub adv: f64,
    pub feat: f64,
    pub commit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            distill: 1.0,
            rec: 1.0,
            adv: 3.0,
            feat: 3.0,
            commit: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("distill", self.distill),
            ("rec", self.rec),
            ("adv", self.adv),
            ("feat", self.feat),
            ("commit", self.commit),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    /// Weights with the adversarial terms removed.
    pub fn without_gan(self) -> Self {
        Self {
            adv: 0.0,
            feat: 0.0,
            ..self
        }
    }
}

/// Scalar loss components in weight order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    /// The distillation term as it enters the sum (the trainer supplies the
    /// negated distillation objective).
    pub distill_term: f64,
    pub rec: f64,
    pub adv: f64,
    pub feat: f64,
    pub commit: f64,
}

pub fn total_generator_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.distill * c.distill_term + w.rec * c.rec + w.adv * c.adv + w.feat * c.feat + w.commit * c.commit
}

/// Graph form of [`total_generator_loss`]; `None` components are omitted.
pub fn total_generator_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    terms: [Option<Var>; 5],
    w: &LossWeights,
) -> Result<Var> {
    let weights = [w.distill, w.rec, w.adv, w.feat, w.commit];
    let mut acc: Option<Var> = None;
    for (t, lam) in terms.into_iter().zip(weights) {
        if let Some(t) = t {
            let s = g.scale(t, T::of(lam));
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
    }
    acc.ok_or_else(|| Error::Contract("generator loss has no components".into()))
}

/// `(1/T_n) Σ_t log σ(cos(W·S_t, H_t))` for `S: [C, T_n]`, `H: [H, T_n]`,
/// `W: [H, C]`. Frames where either vector has zero norm count as `cos = 0`.
pub fn distillation_loss<T: Real>(g: &mut Graph<'_, T>, s: Var, h: Var, w: Var) -> Result<Var> {
    let (_, ts) = g.value(s).dims2()?;
    let (_, th) = g.value(h).dims2()?;
    if ts != th {
        return Err(Error::Alignment {
            expected: ts,
            actual: th,
        });
    }
    let p = g.matmul(w, s)?; // [H, T]
    let ph = g.mul(p, h)?;
    let dot = g.sum_axis(ph, 0)?; // [1, T]
    let p2 = g.square(p);
    let np2 = g.sum_axis(p2, 0)?;
    let h2 = g.square(h);
    let nh2 = g.sum_axis(h2, 0)?;
    let den2 = g.mul(np2, nh2)?;
    let zero: Vec<bool> = g.value(den2).data().iter().map(|v| *v <= T::zero()).collect();
    let n_zero = zero.iter().filter(|z| **z).count();
    let (dot, den2) = if n_zero > 0 {
        log::warn!("distillation: {n_zero} of {ts} frames have a zero-norm vector; using cos = 0");
        let keep: Vec<T> = zero.iter().map(|z| if *z { T::zero() } else { T::one() }).collect();
        let fill: Vec<T> = zero.iter().map(|z| if *z { T::one() } else { T::zero() }).collect();
        let dot = g.mul_mask(dot, keep)?;
        let fill = g.input(Tensor::new(&[1, ts], fill)?);
        let den2 = g.add(den2, fill)?;
        (dot, den2)
    } else {
        (dot, den2)
    };
    let den = g.sqrt(den2);
    let cos = g.div(dot, den)?;
    let ls = g.log_sigmoid(cos);
    Ok(g.mean(ls))
}

/// Multi-scale mel configuration of the reconstruction loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelLossConfig {
    pub scales: Vec<u32>,
    pub bands: usize,
    pub sample_rate: u32,
    /// Largest length difference that is trimmed rather than rejected.
    pub max_trim: usize,
}

impl Default for MelLossConfig {
    fn default() -> Self {
        Self {
            scales: (5..=11).collect(),
            bands: DEFAULT_MEL_BANDS,
            sample_rate: 16_000,
            max_trim: 320,
        }
    }
}

/// Mel magnitudes `[bands, frames]` of a waveform node at one scale.
pub fn mel_graph<T: Real>(g: &mut Graph<'_, T>, x: Var, scale: u32, bands: usize, sample_rate: u32) -> Result<Var> {
    let (w, hop) = mel_scale_geometry(scale)?;
    let spec = g.stft(x, w, hop)?;
    let mag = g.complex_abs(spec)?;
    let fb = mel_filterbank(w, bands, sample_rate);
    let fb = g.input(Tensor::new(&[bands, w / 2 + 1], fb.into_iter().map(T::of).collect())?);
    g.matmul(fb, mag)
}

fn trim_pair<T: Real>(g: &mut Graph<'_, T>, x: Var, y: Var, max_trim: usize) -> Result<(Var, Var)> {
    let (nx, ny) = (g.value(x).len(), g.value(y).len());
    if nx == ny {
        let x = g.reshape(x, &[1, nx])?;
        let y = g.reshape(y, &[1, ny])?;
        return Ok((x, y));
    }
    let diff = nx.abs_diff(ny);
    if diff >= max_trim {
        return Err(Error::shape(format!("waveforms of equal length (±{max_trim})"), format!("{nx} vs {ny}")));
    }
    log::debug!("reconstruction: trimming {nx}/{ny} samples to {}", nx.min(ny));
    let n = nx.min(ny);
    let x = g.reshape(x, &[1, nx])?;
    let y = g.reshape(y, &[1, ny])?;
    Ok((g.slice_cols(x, 0, n)?, g.slice_cols(y, 0, n)?))
}

/// `‖X − X̂‖₁ + Σ_i (‖M_i(X) − M_i(X̂)‖₁ + ‖M_i(X) − M_i(X̂)‖₂)` over the
/// configured mel scales.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<'_, T>, x: Var, xhat: Var, cfg: &MelLossConfig) -> Result<Var> {
    let (x, xh) = trim_pair(g, x, xhat, cfg.max_trim)?;
    let d = g.sub(x, xh)?;
    let d = g.abs(d);
    let mut total = g.sum(d);
    for &i in &cfg.scales {
        let mx = mel_graph(g, x, i, cfg.bands, cfg.sample_rate)?;
        let my = mel_graph(g, xh, i, cfg.bands, cfg.sample_rate)?;
        let dm = g.sub(mx, my)?;
        let a = g.abs(dm);
        let l1 = g.sum(a);
        let sq = g.square(dm);
        let s2 = g.sum(sq);
        let l2 = g.sqrt(s2);
        total = g.add(total, l1)?;
        total = g.add(total, l2)?;
    }
    Ok(total)
}

fn hinge<T: Real>(g: &mut Graph<'_, T>, d: Var, sign: f64) -> Var {
    // mean(max(1 + sign·d, 0))
    let s = g.scale(d, T::of(sign));
    let s = g.add_scalar(s, T::one());
    let r = g.relu(s);
    g.mean(r)
}

/// Hinge losses `(L_G, L_D)` averaged over discriminators (and over the
/// elements of each score map).
pub fn adversarial_losses<T: Real>(g: &mut Graph<'_, T>, real: &[Var], fake: &[Var]) -> Result<(Var, Var)> {
    if fake.is_empty() || real.len() != fake.len() {
        return Err(Error::Contract(format!(
            "adversarial loss needs K ≥ 1 matching score maps (real {}, fake {})",
            real.len(),
            fake.len()
        )));
    }
    let k = T::of(1.0 / fake.len() as f64);
    let mut lg = None;
    let mut ld = None;
    for (&r, &f) in real.iter().zip(fake) {
        let gterm = hinge(g, f, -1.0);
        let dr = hinge(g, r, -1.0);
        let df = hinge(g, f, 1.0);
        let dterm = g.add(dr, df)?;
        lg = Some(match lg {
            Some(a) => g.add(a, gterm)?,
            None => gterm,
        });
        ld = Some(match ld {
            Some(a) => g.add(a, dterm)?,
            None => dterm,
        });
    }
    let lg = g.scale(lg.unwrap(), k);
    let ld = g.scale(ld.unwrap(), k);
    Ok((lg, ld))
}

/// `(1/KL) Σ_k Σ_l mean|D_k^l(x) − D_k^l(x̂)| / mean|D_k^l(x)|`.
pub fn feature_matching_loss<T: Real>(g: &mut Graph<'_, T>, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Contract("feature matching needs matching non-empty discriminator lists".into()));
    }
    let mut acc = None;
    let mut terms = 0usize;
    for (rl, fl) in real.iter().zip(fake) {
        if rl.len() != fl.len() {
            return Err(Error::Contract("feature lists differ in depth".into()));
        }
        for (&r, &f) in rl.iter().zip(fl) {
            if g.shape(r) != g.shape(f) {
                return Err(Error::shape(format!("{:?}", g.shape(r)), format!("{:?}", g.shape(f))));
            }
            let d = g.sub(r, f)?;
            let d = g.abs(d);
            let num = g.mean(d);
            let ar = g.abs(r);
            let mut den = g.mean(ar);
            if g.scalar(den) < T::of(1e-8) {
                log::warn!("feature matching: near-zero reference features; denominator guarded by 1e-8");
                den = g.add_scalar(den, T::of(1e-8));
            }
            let term = g.div(num, den)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
            terms += 1;
        }
    }
    let acc = acc.ok_or_else(|| Error::Contract("no feature layers".into()))?;
    Ok(g.scale(acc, T::of(1.0 / terms as f64)))
}

/// `Σ_i ‖z_i − sg(q_i)‖²`; the quantized side is detached.
pub fn commitment_loss<T: Real>(g: &mut Graph<'_, T>, pre: &[Var], quantized: &[Var]) -> Result<Var> {
    if pre.len() != quantized.len() || pre.is_empty() {
        return Err(Error::Contract("commitment loss needs matching non-empty stage lists".into()));
    }
    let mut acc = None;
    for (&z, &q) in pre.iter().zip(quantized) {
        let q = g.detach(q);
        let d = g.sub(z, q)?;
        let sq = g.square(d);
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.unwrap())
}

/// Binary cross-entropy of probabilities `p = σ(logits)` against `{0, 1}`
/// labels, computed stably from the logits and averaged.
pub fn bce_with_logits<T: Real>(g: &mut Graph<'_, T>, logits: Var, labels: &[f64]) -> Result<Var> {
    let n = g.value(logits).len();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} labels"), labels.len()));
    }
    // −[y log σ(z) + (1 − y) log σ(−z)]
    let shape = g.shape(logits).to_vec();
    let pos = g.log_sigmoid(logits);
    let negz = g.scale(logits, -T::one());
    let neg = g.log_sigmoid(negz);
    let y = g.input(Tensor::new(&shape, labels.iter().map(|&v| T::of(v)).collect())?);
    let one_minus: Vec<T> = labels.iter().map(|&v| T::of(1.0 - v)).collect();
    let ny = g.input(Tensor::new(&shape, one_minus)?);
    let a = g.mul(pos, y)?;
    let b = g.mul(neg, ny)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -T::one()))
}
