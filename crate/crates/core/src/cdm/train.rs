//! Codec training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CdmConfig, CdmModel, QuantTrace, SemanticTeacher, TokenStreams, N_STAGES};
use crate::diffnum::{clip_global_norm, AdamW, AdamWConfig, Gradients, Graph, Mode, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, commitment_loss, distillation_loss, feature_matching_loss, reconstruction_loss,
    total_generator_loss_graph, DiscriminatorConfig, DiscriminatorSet, LossWeights, MelLossConfig,
};
use crate::signal::AudioBuffer;

/// One training utterance.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub key: String,
    pub audio: AudioBuffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdmTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Segment length in samples, rounded down to whole frames. An epoch
    /// visits every whole segment of every clip once.
    pub crop_samples: usize,
    /// Upper bound on segments visited per epoch (all when `None`).
    pub segments_per_epoch: Option<usize>,
    /// Clips scored after every epoch with fixed crops.
    pub eval_clips: usize,
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub mel: MelLossConfig,
    /// Enables the adversarial terms and the discriminator updates.
    pub gan: bool,
    pub discriminators: DiscriminatorConfig,
    pub seed: u64,
}

impl Default for CdmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            // desk scale: two epochs over a few hundred clips need a larger
            // step and single-segment updates to leave the distillation plateau
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            batch_size: 1,
            crop_samples: 8_000,
            segments_per_epoch: None,
            eval_clips: 8,
            grad_clip: 10.0,
            weights: LossWeights::default(),
            mel: MelLossConfig::default(),
            gan: false,
            discriminators: DiscriminatorConfig::default(),
            seed: 0,
        }
    }
}

impl CdmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.crop_samples < 2048 {
            return Err(Error::Config(format!("crop of {} samples is below 2048", self.crop_samples)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.gan {
            self.discriminators.validate()?;
        }
        Ok(())
    }
}

/// Per-epoch summary. Epoch 0 is the untrained model; its training columns
/// are zero. `rec` is per waveform sample and `commit` per feature element.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CdmEpoch {
    pub epoch: usize,
    pub steps: usize,
    /// Training means over the epoch's clips.
    pub rec: f64,
    pub distill: f64,
    pub commit: f64,
    pub adv: f64,
    pub feat: f64,
    pub disc: f64,
    pub total: f64,
    /// Held-out reconstruction loss and mean teacher cosine on fixed crops.
    pub eval_rec: f64,
    pub eval_cos: f64,
}

struct ClipTerms {
    rec: Var,
    distill: Var,
    commit: Var,
    xhat: Var,
    x: Var,
    trace: QuantTrace,
}

fn crop(audio: &AudioBuffer, len: usize, rng: &mut ChaCha8Rng) -> AudioBuffer {
    let n = audio.len() - audio.len() % super::HOP;
    let len = len - len % super::HOP;
    if n <= len {
        return AudioBuffer {
            samples: audio.samples[..n].to_vec(),
            sample_rate: audio.sample_rate,
        };
    }
    let start = rng.random_range(0..=(n - len) / super::HOP) * super::HOP;
    AudioBuffer {
        samples: audio.samples[start..start + len].to_vec(),
        sample_rate: audio.sample_rate,
    }
}

/// Non-overlapping `len`-sample segments of every clip as `(clip, start)`,
/// with a random frame-aligned phase per clip so segment boundaries move
/// between epochs. Clips shorter than `len` contribute one whole-frame
/// segment.
fn segments(clips: &[TrainClip], len: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let hop = super::HOP;
    let len = len - len % hop;
    let mut out = Vec::new();
    for (i, c) in clips.iter().enumerate() {
        let n = c.audio.len() - c.audio.len() % hop;
        if n <= len {
            out.push((i, 0));
            continue;
        }
        let slack = (n % len) / hop;
        let mut start = rng.random_range(0..=slack) * hop;
        while start + len <= n {
            out.push((i, start));
            start += len;
        }
    }
    out
}

fn segment(audio: &AudioBuffer, start: usize, len: usize) -> AudioBuffer {
    let hop = super::HOP;
    let n = audio.len() - audio.len() % hop;
    let end = (start + len - len % hop).min(n);
    AudioBuffer {
        samples: audio.samples[start..end].to_vec(),
        sample_rate: audio.sample_rate,
    }
}

fn column_cos(w: &[f32], s: &[f32], h: &[f32], hd: usize, c: usize, frames: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..frames {
        let (mut dot, mut np, mut nh) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..hd {
            let p: f64 = (0..c).map(|j| w[i * c + j] as f64 * s[j * frames + t] as f64).sum();
            let hv = h[i * frames + t] as f64;
            dot += p * hv;
            np += p * p;
            nh += hv * hv;
        }
        if np > 0.0 && nh > 0.0 {
            total += dot / (np * nh).sqrt();
        }
    }
    total / frames.max(1) as f64
}

impl CdmModel {
    /// Builds the per-clip objective terms on `g`.
    fn clip_terms(
        &self,
        g: &mut Graph<'_, f32>,
        audio: &AudioBuffer,
        h: &[f32],
        mel: &MelLossConfig,
    ) -> Result<(ClipTerms, TokenStreams)> {
        let x = g.input(Tensor::new(&[1, audio.len()], audio.to_f32())?);
        let e = self.encode_graph(g, x)?;
        let ev = g.value(e).clone();
        let (c, frames) = ev.dims2()?;
        let (streams, trace) = self.rvq.quantize(ev.data(), frames)?;
        let hd = self.config.teacher_dim;
        if h.len() != hd * frames {
            return Err(Error::Alignment {
                expected: frames,
                actual: h.len() / hd,
            });
        }
        // straight-through: forward value of the quantizer, identity gradient
        let q_sum = streams.quantized_sum();
        let shift: Vec<f32> = q_sum.iter().zip(ev.data()).map(|(q, e)| q - e).collect();
        let shift = g.input(Tensor::new(&[c, frames], shift)?);
        let e_hat = g.add(e, shift)?;
        let s_shift: Vec<f32> = streams.semantic.iter().zip(ev.data()).map(|(q, e)| q - e).collect();
        let s_shift = g.input(Tensor::new(&[c, frames], s_shift)?);
        let s = g.add(e, s_shift)?;
        let hv = g.input(Tensor::new(&[hd, frames], h.to_vec())?);
        let w = g.param(self.distill_proj)?;
        let distill = distillation_loss(g, s, hv, w)?;
        let xhat = self.decode_graph(g, e_hat)?;
        let rec = reconstruction_loss(g, x, xhat, mel)?;
        let mut cum = vec![0f32; c * frames];
        let mut cums = Vec::with_capacity(N_STAGES);
        for k in 0..N_STAGES {
            cum.iter_mut().zip(streams.stage(k)).for_each(|(a, b)| *a += b);
            cums.push(g.input(Tensor::new(&[c, frames], cum.clone())?));
        }
        let pre = vec![e; N_STAGES];
        let commit = commitment_loss(g, &pre, &cums)?;
        Ok((
            ClipTerms {
                rec,
                distill,
                commit,
                xhat,
                x,
                trace,
            },
            streams,
        ))
    }

    /// Reconstruction loss and mean teacher cosine of one clip, no updates.
    pub fn evaluate_clip(&self, audio: &AudioBuffer, teacher: &dyn SemanticTeacher, key: &str, mel: &MelLossConfig) -> Result<(f64, f64)> {
        let h = teacher.targets(audio, key)?;
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let (terms, streams) = self.clip_terms(&mut g, audio, &h, mel)?;
        let w = self.store.get(self.distill_proj).data();
        let cos = column_cos(w, &streams.semantic, &h, self.config.teacher_dim, self.config.dim, streams.frames);
        Ok((g.scalar(terms.rec) as f64 / audio.len() as f64, cos))
    }
}

fn evaluate(
    model: &CdmModel,
    crops: &[(String, AudioBuffer)],
    teacher: &dyn SemanticTeacher,
    mel: &MelLossConfig,
) -> Result<(f64, f64)> {
    let (mut rec, mut cos) = (0.0, 0.0);
    for (key, audio) in crops {
        let (r, c) = model.evaluate_clip(audio, teacher, key, mel)?;
        rec += r;
        cos += c;
    }
    let n = crops.len().max(1) as f64;
    Ok((rec / n, cos / n))
}

/// Trains a codec from scratch. The generator minimizes
/// `λ_d·(−L_distill) + λ_r·L_rec/N + λ_c·L_c/(C·T_n)` (plus `λ_G·L_G +
/// λ_f·L_feat` when `gan` is set), where `N` is the segment length. The
/// norm-form reconstruction and commitment losses grow with segment length
/// while the other terms are means, so both are taken per element.
pub fn train_cdm(
    clips: &[TrainClip],
    teacher: &dyn SemanticTeacher,
    model_cfg: CdmConfig,
    cfg: &CdmTrainConfig,
) -> Result<(CdmModel, Vec<CdmEpoch>)> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Config("cdm training corpus is empty".into()));
    }
    if teacher.dim() != model_cfg.teacher_dim {
        return Err(Error::Config(format!(
            "teacher dim {} differs from configured {}",
            teacher.dim(),
            model_cfg.teacher_dim
        )));
    }
    let mut model = CdmModel::new(model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00c0_dec0);
    let weights = if cfg.gan { cfg.weights } else { cfg.weights.without_gan() };

    let mut store: ParamStore<f32> = model.store.clone();
    let gen_params = store.len();
    let disc = if cfg.gan {
        Some(DiscriminatorSet::new(cfg.discriminators.clone(), "disc", &mut store, &mut rng)?)
    } else {
        None
    };
    let adam = AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut gen_opt = AdamW::new(adam);
    let mut disc_opt = AdamW::new(adam);

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let eval_crops: Vec<(String, AudioBuffer)> = clips
        .iter()
        .take(cfg.eval_clips.max(1))
        .map(|c| (c.key.clone(), crop(&c.audio, cfg.crop_samples, &mut eval_rng)))
        .collect();
    let (eval_rec, eval_cos) = evaluate(&model, &eval_crops, teacher, &cfg.mel)?;
    let mut history = vec![CdmEpoch {
        eval_rec,
        eval_cos,
        ..Default::default()
    }];
    log::info!("cdm epoch 0: eval rec {eval_rec:.3} cos {eval_cos:.3}");

    for epoch in 1..=cfg.epochs {
        let mut order = segments(clips, cfg.crop_samples, &mut rng);
        order.shuffle(&mut rng);
        let take = cfg.segments_per_epoch.unwrap_or(order.len()).min(order.len());
        let mut sums = CdmEpoch {
            epoch,
            ..Default::default()
        };
        let mut seen = 0usize;
        for batch in order[..take].chunks(cfg.batch_size) {
            let mut grads = Gradients::empty(store.len());
            let mut dgrads = Gradients::empty(store.len());
            let mut traces = Vec::with_capacity(batch.len());
            for &(i, start) in batch {
                let audio = segment(&clips[i].audio, start, cfg.crop_samples);
                let h = teacher.targets(&audio, &clips[i].key)?;
                let step_seed = rng.random();
                let mut g = Graph::new(&store, Mode::Train, step_seed);
                let (t, _) = model.clip_terms(&mut g, &audio, &h, &cfg.mel)?;
                let neg = g.scale(t.distill, -1.0);
                let rec = g.scale(t.rec, 1.0 / audio.len() as f32);
                let elems = model.config.dim * (audio.len() / super::HOP);
                let commit = g.scale(t.commit, 1.0 / elems as f32);
                let (mut adv, mut feat) = (None, None);
                if let Some(d) = &disc {
                    let real = d.discriminate(&mut g, t.x)?;
                    let fake = d.discriminate(&mut g, t.xhat)?;
                    let rs: Vec<Var> = real.iter().map(|o| o.scores).collect();
                    let fs: Vec<Var> = fake.iter().map(|o| o.scores).collect();
                    let (lg, _) = adversarial_losses(&mut g, &rs, &fs)?;
                    let rf: Vec<Vec<Var>> = real.iter().map(|o| o.features.clone()).collect();
                    let ff: Vec<Vec<Var>> = fake.iter().map(|o| o.features.clone()).collect();
                    adv = Some(lg);
                    feat = Some(feature_matching_loss(&mut g, &rf, &ff)?);
                }
                let total = total_generator_loss_graph(&mut g, [Some(neg), Some(rec), adv, feat, Some(commit)], &weights)?;
                let mut b = g.backward(total)?.params;
                b.retain(|id| id.index() < gen_params);
                grads.accumulate(&b);
                sums.rec += g.scalar(rec) as f64;
                sums.distill += g.scalar(t.distill) as f64;
                sums.commit += g.scalar(commit) as f64;
                sums.total += g.scalar(total) as f64;
                if let (Some(a), Some(f)) = (adv, feat) {
                    sums.adv += g.scalar(a) as f64;
                    sums.feat += g.scalar(f) as f64;
                }
                if let Some(d) = &disc {
                    let xhat = g.take_value(t.xhat);
                    let real = g.take_value(t.x);
                    let mut dg = Graph::new(&store, Mode::Train, step_seed ^ 1);
                    let xr = dg.input(real);
                    let xf = dg.input(xhat);
                    let ro = d.discriminate(&mut dg, xr)?;
                    let fo = d.discriminate(&mut dg, xf)?;
                    let rs: Vec<Var> = ro.iter().map(|o| o.scores).collect();
                    let fs: Vec<Var> = fo.iter().map(|o| o.scores).collect();
                    let (_, ld) = adversarial_losses(&mut dg, &rs, &fs)?;
                    sums.disc += dg.scalar(ld) as f64;
                    let mut b = dg.backward(ld)?.params;
                    b.retain(|id| id.index() >= gen_params);
                    dgrads.accumulate(&b);
                }
                traces.push(t.trace);
                seen += 1;
            }
            let inv = 1.0 / batch.len() as f32;
            grads.scale(inv);
            clip_global_norm(&mut grads, cfg.grad_clip);
            gen_opt.step(&mut store, &grads)?;
            if disc.is_some() {
                dgrads.scale(inv);
                clip_global_norm(&mut dgrads, cfg.grad_clip);
                disc_opt.step(&mut store, &dgrads)?;
            }
            model.rvq.update(&traces, &mut rng);
            sums.steps += 1;
        }
        model.store.load_from(&store)?;
        let n = seen.max(1) as f64;
        for v in [
            &mut sums.rec,
            &mut sums.distill,
            &mut sums.commit,
            &mut sums.adv,
            &mut sums.feat,
            &mut sums.disc,
            &mut sums.total,
        ] {
            *v /= n;
        }
        let (er, ec) = evaluate(&model, &eval_crops, teacher, &cfg.mel)?;
        sums.eval_rec = er;
        sums.eval_cos = ec;
        log::info!(
            "cdm epoch {epoch}: rec {:.3} distill {:.4} commit {:.3} | eval rec {er:.3} cos {ec:.3}",
            sums.rec,
            sums.distill,
            sums.commit
        );
        history.push(sums);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdm::MockMelTeacher;

    #[test]
    fn empty_corpus_is_config_error() {
        let t = MockMelTeacher::new(32);
        assert!(matches!(
            train_cdm(&[], &t, CdmConfig::default(), &CdmTrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
