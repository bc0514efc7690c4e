//! Acoustic-only deepfake detector: sinusoidal positions over secured
//! acoustic frames, post-norm transformer blocks, temporal mean pooling and
//! a logistic head.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdm::{CdmModel, TokenStreams};
use crate::channel::{augment, ChannelConfig};
use crate::diffnum::{
    clip_global_norm, load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Graph, Layer, LayerSpec, Mode,
    ParamId, ParamStore, Real, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::losses::bce_with_logits;
use crate::metrics::{eer, ScoreSet};
use crate::privacy::{Bottleneck, PermutationRecord, PrivacyConfig};
use crate::signal::AudioBuffer;

pub const FRAME_RATE: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Bonafide,
    Deepfake,
}

impl Label {
    /// BCE target: bonafide is the positive class.
    pub fn target(self) -> f64 {
        match self {
            Label::Bonafide => 1.0,
            Label::Deepfake => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Deepfake => "deepfake",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "deepfake" | "spoof" => Ok(Label::Deepfake),
            _ => Err(Error::Input(format!("unknown label `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub positional: bool,
    pub crop_seconds: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Utterances per update, split evenly between the classes.
    pub batch_size: usize,
    pub grad_clip: f64,
    /// Reuse tokenizations per (utterance, codec) across epochs.
    pub cache_tokens: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 128,
            dropout: 0.1,
            positional: true,
            crop_seconds: 4.0,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 8,
            grad_clip: 5.0,
            cache_tokens: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("detector batch size must be ≥ 2".into()));
        }
        if self.crop_frames() == 0 {
            return Err(Error::Config("crop shorter than one frame".into()));
        }
        Ok(())
    }

    pub fn crop_frames(&self) -> usize {
        (self.crop_seconds * FRAME_RATE as f64).round() as usize
    }
}

/// `P(bonafide)` of one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub probability: f64,
    pub label_threshold: f64,
}

impl DetectionScore {
    pub fn label(&self) -> Label {
        if self.probability >= self.label_threshold {
            Label::Bonafide
        } else {
            Label::Deepfake
        }
    }
}

/// Sinusoidal table `[C, T]`: row `2i` holds `sin(t / 10000^{2i/C})`, row
/// `2i + 1` the cosine, with `t` the frame index.
pub fn positional_table(channels: usize, frames: usize) -> Result<Vec<f64>> {
    if !channels.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs even C, got {channels}")));
    }
    let mut pe = vec![0.0; channels * frames];
    for i in 0..channels / 2 {
        let rate = 10000f64.powf(-((2 * i) as f64) / channels as f64);
        for t in 0..frames {
            let a = t as f64 * rate;
            pe[2 * i * frames + t] = a.sin();
            pe[(2 * i + 1) * frames + t] = a.cos();
        }
    }
    Ok(pe)
}

/// Adds [`positional_table`] to a `[C, T]` stream.
pub fn positional_encode(x: &[f32], channels: usize, frames: usize) -> Result<Vec<f32>> {
    if x.len() != channels * frames {
        return Err(Error::shape(format!("[{channels}, {frames}] stream"), x.len()));
    }
    let pe = positional_table(channels, frames)?;
    Ok(x.iter().zip(pe).map(|(v, p)| (*v as f64 + p) as f32).collect())
}

/// Contiguous `frames`-long crop starting at a seeded offset; shorter inputs
/// are zero-padded on the right. Returns `(stream, offset)`.
pub fn crop_segment(x: &[f32], channels: usize, total: usize, frames: usize, seed: u64) -> (Vec<f32>, usize) {
    let offset = if total > frames {
        ChaCha8Rng::seed_from_u64(seed).random_range(0..=total - frames)
    } else {
        0
    };
    (crop_at(x, channels, total, frames, offset), offset)
}

fn crop_at(x: &[f32], channels: usize, total: usize, frames: usize, offset: usize) -> Vec<f32> {
    let mut out = vec![0f32; channels * frames];
    let n = frames.min(total.saturating_sub(offset));
    for c in 0..channels {
        out[c * frames..c * frames + n].copy_from_slice(&x[c * total + offset..c * total + offset + n]);
    }
    out
}

#[derive(Clone, Debug)]
struct Block {
    attn: Layer,
    norm1: Layer,
    ffn: Layer,
    norm2: Layer,
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    /// Token dimension `C`.
    pub dim: usize,
    pub store: ParamStore<f32>,
    pub bottleneck: Bottleneck,
    input: Layer,
    blocks: Vec<Block>,
    head: Layer,
}

pub const DETECTOR_CHECKPOINT_KIND: &str = "detector";

impl DetectorModel {
    /// A detector for acoustic streams of `7·dim` channels.
    pub fn new(config: DetectorConfig, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.positional && !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("positional encoding needs even C, got {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bottleneck = Bottleneck::new(7 * dim, dim, true, "det.bottleneck", &mut store, &mut rng)?;
        let d = config.embed_dim;
        let input = Layer::new(
            LayerSpec::Linear {
                din: dim,
                dout: d,
                bias: true,
            },
            "det.input",
            &mut store,
            &mut rng,
        )?;
        let norm = |i: usize, k: &str, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng| {
            Layer::new(
                LayerSpec::LayerNorm {
                    dim: d,
                    channels_first: false,
                },
                &format!("det.block{i}.{k}"),
                store,
                rng,
            )
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let attn = Layer::new(
                LayerSpec::Mhsa {
                    dim: d,
                    heads: config.heads,
                },
                &format!("det.block{i}.attn"),
                &mut store,
                &mut rng,
            )?;
            let norm1 = norm(i, "norm1", &mut store, &mut rng)?;
            let ffn = Layer::new(
                LayerSpec::Ffn {
                    dim: d,
                    hidden: config.ffn_hidden,
                    dropout: config.dropout,
                },
                &format!("det.block{i}.ffn"),
                &mut store,
                &mut rng,
            )?;
            let norm2 = norm(i, "norm2", &mut store, &mut rng)?;
            blocks.push(Block {
                attn,
                norm1,
                ffn,
                norm2,
            });
        }
        let head = Layer::new(
            LayerSpec::Linear {
                din: d,
                dout: 1,
                bias: true,
            },
            "det.head",
            &mut store,
            &mut rng,
        )?;
        Ok(Self {
            config,
            dim,
            store,
            bottleneck,
            input,
            blocks,
            head,
        })
    }

    /// Logit of `P(bonafide)` for a secured stream `[C, T]`.
    pub fn classify_graph<T: Real>(&self, g: &mut Graph<'_, T>, abar: Var) -> Result<Var> {
        let (c, t) = g.value(abar).dims2()?;
        if c != self.dim || t == 0 {
            return Err(Error::shape(format!("[{}, T ≥ 1] secured stream", self.dim), format!("{:?}", g.shape(abar))));
        }
        let mut x = abar;
        if self.config.positional {
            let pe = positional_table(c, t)?;
            let pe = g.input(Tensor::new(&[c, t], pe.into_iter().map(T::of).collect())?);
            x = g.add(x, pe)?;
        }
        let x = g.transpose(x)?;
        let mut h = self.input.forward(g, x)?;
        let p = self.config.dropout;
        for b in &self.blocks {
            let a = b.attn.forward(g, h)?;
            let a = g.dropout(a, p)?;
            let s = g.add(h, a)?;
            h = b.norm1.forward(g, s)?;
            let f = b.ffn.forward(g, h)?;
            let f = g.dropout(f, p)?;
            let s = g.add(h, f)?;
            h = b.norm2.forward(g, s)?;
        }
        let pooled = g.sum_axis(h, 0)?;
        let pooled = g.scale(pooled, T::of(1.0 / t as f64));
        let logit = self.head.forward(g, pooled)?;
        g.reshape(logit, &[1])
    }

    /// Bottleneck, optional shuffle and crop of an acoustic stream `[7C, T]`.
    pub fn secure_graph<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        acoustic: Var,
        record: Option<&PermutationRecord>,
        crop_offset: usize,
    ) -> Result<Var> {
        let ab = self.bottleneck.forward(g, acoustic)?;
        self.shuffle_and_crop(g, ab, record, crop_offset)
    }

    /// Shuffle and crop of a bottlenecked stream `[C, T]`.
    pub fn shuffle_and_crop<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        ab: Var,
        record: Option<&PermutationRecord>,
        crop_offset: usize,
    ) -> Result<Var> {
        let (_, t) = g.value(ab).dims2()?;
        let shuffled = match record {
            Some(r) => {
                if r.frames != t {
                    return Err(Error::Record(format!("record covers {} frames, stream has {t}", r.frames)));
                }
                g.permute_cols(ab, &r.full())?
            }
            None => ab,
        };
        let frames = self.config.crop_frames();
        let avail = t.saturating_sub(crop_offset).min(frames);
        let mut x = if crop_offset == 0 && avail == t {
            shuffled
        } else {
            g.slice_cols(shuffled, crop_offset, avail)?
        };
        if avail < frames {
            let pad = g.input(Tensor::zeros(&[self.dim, frames - avail]));
            x = g.concat_cols(&[x, pad])?;
        }
        Ok(x)
    }

    /// Eval-mode bottleneck output `[C, T]` before shuffling.
    pub fn bottleneck_eval(&self, acoustic: &[f32], frames: usize) -> Result<Vec<f32>> {
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let a = g.input(Tensor::new(&[7 * self.dim, frames], acoustic.to_vec())?);
        let y = self.bottleneck.forward(&mut g, a)?;
        Ok(g.take_value(y).into_data())
    }

    /// Classifies an already secured stream `[C, T]` (cropped or padded to
    /// the configured length from its start).
    pub fn detect(&self, abar: &[f32], frames: usize) -> Result<DetectionScore> {
        if abar.len() != self.dim * frames || frames == 0 {
            return Err(Error::shape(format!("[{}, {frames}] secured stream", self.dim), abar.len()));
        }
        let n = self.config.crop_frames();
        let x = crop_at(abar, self.dim, frames, n, 0);
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let v = g.input(Tensor::new(&[self.dim, n], x)?);
        let logit = self.classify_graph(&mut g, v)?;
        Ok(score_of(g.scalar(logit) as f64))
    }

    /// Full inference path from token streams; no augmentation.
    pub fn score_tokens(&self, tokens: &TokenStreams, privacy: &PrivacyConfig, salt: u64) -> Result<DetectionScore> {
        if tokens.dim != self.dim {
            return Err(Error::shape(format!("tokens of dimension {}", self.dim), tokens.dim));
        }
        let record = privacy.record(tokens.frames, salt)?;
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let a = g.input(Tensor::new(&[7 * self.dim, tokens.frames], tokens.acoustic.clone())?);
        let x = self.secure_graph(&mut g, a, record.as_ref(), 0)?;
        let logit = self.classify_graph(&mut g, x)?;
        Ok(score_of(g.scalar(logit) as f64))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": DETECTOR_CHECKPOINT_KIND,
            "config": self.config,
            "dim": self.dim,
        });
        save_checkpoint(path, &self.store, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (store, meta) = load_checkpoint::<f32>(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(DETECTOR_CHECKPOINT_KIND) {
            return Err(Error::Format("checkpoint is not a detector".into()));
        }
        let config: DetectorConfig = serde_json::from_value(meta["config"].clone())?;
        let dim = meta["dim"]
            .as_u64()
            .ok_or_else(|| Error::Format("detector checkpoint lacks dim".into()))? as usize;
        let mut model = Self::new(config, dim, 0)?;
        model.store.load_from(&store)?;
        Ok(model)
    }
}

fn score_of(logit: f64) -> DetectionScore {
    DetectionScore {
        probability: 1.0 / (1.0 + (-logit).exp()),
        label_threshold: 0.5,
    }
}

/// One labelled utterance.
#[derive(Clone, Debug)]
pub struct LabelledClip {
    pub key: String,
    pub audio: AudioBuffer,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_eer: f64,
}

/// Everything the training loop needs besides the data.
#[derive(Clone, Debug)]
pub struct DetectorTraining<'a> {
    pub cdm: &'a CdmModel,
    pub privacy: PrivacyConfig,
    pub channel: ChannelConfig,
    pub config: DetectorConfig,
    pub seed: u64,
}

pub fn utterance_salt(key: &str) -> u64 {
    // FNV-1a; stable across runs and platforms
    key.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Scores clips through the full inference path.
pub fn score_clips(
    model: &DetectorModel,
    cdm: &CdmModel,
    privacy: &PrivacyConfig,
    clips: &[LabelledClip],
) -> Result<Vec<DetectionScore>> {
    clips
        .iter()
        .map(|c| model.score_tokens(&cdm.tokenize(&c.audio)?, privacy, utterance_salt(&c.key)))
        .collect()
}

pub fn score_set(clips: &[LabelledClip], scores: &[DetectionScore]) -> ScoreSet {
    let mut s = ScoreSet::default();
    for (c, sc) in clips.iter().zip(scores) {
        match c.label {
            Label::Bonafide => s.bonafide.push(sc.probability),
            Label::Deepfake => s.spoof.push(sc.probability),
        }
    }
    s
}

/// Trains the bottleneck and detector on frozen codec tokens with codec
/// augmentation, balanced batches and binary cross-entropy.
pub fn train_detector(
    train: &[LabelledClip],
    heldout: &[LabelledClip],
    setup: &DetectorTraining<'_>,
) -> Result<(DetectorModel, Vec<DetectorEpoch>)> {
    let cfg = &setup.config;
    cfg.validate()?;
    setup.channel.validate()?;
    let bona: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == Label::Bonafide).collect();
    let fake: Vec<usize> = (0..train.len()).filter(|&i| train[i].label == Label::Deepfake).collect();
    if bona.is_empty() || fake.is_empty() {
        return Err(Error::Config("detector training needs both bonafide and deepfake utterances".into()));
    }
    let mut model = DetectorModel::new(cfg.clone(), setup.cdm.config.dim, setup.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0xde7e_c70e);
    let mut cache: HashMap<(usize, String), (Vec<f32>, usize)> = HashMap::new();
    let half = cfg.batch_size / 2;
    let steps = train.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut bo, mut fo) = (bona.clone(), fake.clone());
    let (mut bi, mut fi) = (bo.len(), fo.len());
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(2 * half);
            for _ in 0..half {
                if bi == bo.len() {
                    bo.shuffle(&mut rng);
                    bi = 0;
                }
                if fi == fo.len() {
                    fo.shuffle(&mut rng);
                    fi = 0;
                }
                batch.push(bo[bi]);
                batch.push(fo[fi]);
                bi += 1;
                fi += 1;
            }
            // one graph per batch so the bottleneck's batch statistics pool
            // every utterance in it, as they do at inference time via the
            // running averages
            let mut g = Graph::new(&model.store, Mode::Train, rng.random());
            let mut streams = Vec::with_capacity(batch.len());
            for &i in &batch {
                let clip = &train[i];
                let (aug, codec) = augment(&clip.audio, &setup.channel, rng.random())?;
                let key = (i, codec.to_string());
                let (acoustic, frames) = match cache.get(&key) {
                    Some(v) => v.clone(),
                    None => {
                        let t = setup.cdm.tokenize(&aug)?;
                        let v = (t.acoustic, t.frames);
                        if cfg.cache_tokens {
                            cache.insert(key, v.clone());
                        }
                        v
                    }
                };
                streams.push((g.input(Tensor::new(&[7 * model.dim, frames], acoustic)?), frames));
            }
            let inputs: Vec<Var> = streams.iter().map(|s| s.0).collect();
            let secured = model.bottleneck.forward_batch(&mut g, &inputs)?;
            let mut logits = Vec::with_capacity(batch.len());
            for (ab, &(_, frames)) in secured.into_iter().zip(&streams) {
                let record = setup.privacy.record(frames, rng.random())?;
                let n = cfg.crop_frames();
                let offset = if frames > n { rng.random_range(0..=frames - n) } else { 0 };
                let x = model.shuffle_and_crop(&mut g, ab, record.as_ref(), offset)?;
                let logit = model.classify_graph(&mut g, x)?;
                logits.push(g.reshape(logit, &[1, 1])?);
            }
            let logits = g.concat_cols(&logits)?;
            let targets: Vec<f64> = batch.iter().map(|&i| train[i].label.target()).collect();
            let loss = bce_with_logits(&mut g, logits, &targets)?;
            loss_sum += g.scalar(loss) as f64 * batch.len() as f64;
            seen += batch.len();
            let mut grads = g.backward(loss)?.params;
            let updates = g.take_buffer_updates();
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut model.store, &grads)?;
            // running statistics follow the batch in order
            for (id, v) in updates {
                model.store.set(id, v)?;
            }
        }
        let heldout_eer = if heldout.is_empty() {
            f64::NAN
        } else {
            let scores = score_clips(&model, setup.cdm, &setup.privacy, heldout)?;
            eer(&score_set(heldout, &scores))?.eer
        };
        let e = DetectorEpoch {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            heldout_eer,
        };
        log::info!("detector epoch {epoch}: loss {:.4} held-out EER {:.4}", e.train_loss, e.heldout_eer);
        history.push(e);
    }
    Ok((model, history))
}
