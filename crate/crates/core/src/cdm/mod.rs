//! Codec-based decoupling model: a strided convolutional encoder to 50 Hz
//! features, an eight-stage residual quantizer whose first stage is
//! distilled toward semantic targets, and a mirrored decoder.

mod rvq;
mod teacher;
mod tokens;
mod train;

pub use rvq::{rvq_quantize, Codebook, QuantTrace, RvqStack, TokenStreams, N_STAGES};
pub use teacher::{
    frame_count, frame_log_mel, ExternalTeacher, MockMelTeacher, SemanticTeacher, FEATURE_MAGIC, HOP, TEACHER_FFT,
    TEACHER_MELS,
};
pub use tokens::{read_tokens, write_tokens, TOKEN_MAGIC, TOKEN_VERSION};
pub use train::{train_cdm, CdmEpoch, CdmTrainConfig, TrainClip};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{
    load_checkpoint, save_checkpoint, Graph, Layer, LayerSpec, Mode, ParamId, ParamStore, Real, RecurrentCell, Tensor,
    Var,
};
use crate::error::{Error, Result};
use crate::signal::{AudioBuffer, SAMPLE_RATE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdmConfig {
    /// Token dimension `C`.
    pub dim: usize,
    /// Entries per codebook `K`.
    pub codebook_size: usize,
    pub base_channels: usize,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub cell: RecurrentCell,
    pub conv_bias: bool,
    pub teacher_dim: usize,
    pub codebook_decay: f32,
}

impl Default for CdmConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            codebook_size: 1024,
            base_channels: 8,
            strides: vec![2, 4, 5, 8],
            kernel: 7,
            cell: RecurrentCell::Gru,
            conv_bias: true,
            teacher_dim: 32,
            codebook_decay: 0.99,
        }
    }
}

impl CdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.base_channels == 0 || self.teacher_dim == 0 {
            return Err(Error::Config("cdm dimensions must be positive".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config(format!("codebook size {} < 2", self.codebook_size)));
        }
        if self.hop() != HOP {
            return Err(Error::Config(format!(
                "stride product {} must equal the 320-sample token hop",
                self.hop()
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("cdm kernel must be odd".into()));
        }
        if !(self.codebook_decay > 0.0 && self.codebook_decay < 1.0) {
            return Err(Error::Config("codebook decay must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    /// Channel width after `s` downsampling stages.
    fn width(&self, s: usize) -> usize {
        self.base_channels << s
    }
}

/// `x + conv(ELU(LN(x)))`.
#[derive(Clone, Debug)]
struct ResBlock {
    norm: Layer,
    conv: Layer,
}

impl ResBlock {
    fn new<T: Real>(ch: usize, cfg: &CdmConfig, p: &str, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm: Layer::new(norm_spec(ch), &format!("{p}.norm"), store, rng)?,
            conv: Layer::new(same_conv(ch, ch, cfg), &format!("{p}.conv"), store, rng)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = g.elu(h);
        let h = self.conv.forward(g, h)?;
        g.add(x, h)
    }
}

/// `ELU(x)` followed by a resampling convolution. There is deliberately no
/// norm on this path: normalizing each time step across channels discards
/// the signal level, so only residual branches are normalized.
#[derive(Clone, Debug)]
struct Resample {
    conv: Layer,
}

impl Resample {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = g.elu(x);
        self.conv.forward(g, h)
    }
}

/// Bidirectional recurrence over `[ch, T]` with a residual connection.
#[derive(Clone, Debug)]
struct Recurrence {
    rnn: Layer,
}

impl Recurrence {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let xt = g.transpose(x)?;
        let h = self.rnn.forward(g, xt)?;
        let h = g.transpose(h)?;
        g.add(x, h)
    }
}

fn norm_spec(dim: usize) -> LayerSpec {
    LayerSpec::LayerNorm {
        dim,
        channels_first: true,
    }
}

fn same_conv(cin: usize, cout: usize, cfg: &CdmConfig) -> LayerSpec {
    LayerSpec::Conv1d {
        cin,
        cout,
        kernel: cfg.kernel,
        stride: 1,
        dilation: 1,
        pad_l: cfg.kernel / 2,
        pad_r: cfg.kernel / 2,
        bias: cfg.conv_bias,
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Layer,
    stages: Vec<(ResBlock, Resample)>,
    rnn: Recurrence,
    out: Resample,
}

#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Layer,
    rnn: Recurrence,
    stages: Vec<(Resample, ResBlock)>,
    out: Resample,
}

/// Encoder, quantizer and decoder with their parameters.
#[derive(Clone, Debug)]
pub struct CdmModel {
    pub config: CdmConfig,
    pub store: ParamStore<f32>,
    pub rvq: RvqStack,
    /// Projection `W: [teacher_dim, C]` of the distillation objective.
    pub distill_proj: ParamId,
    encoder: Encoder,
    decoder: Decoder,
}

pub const CDM_CHECKPOINT_KIND: &str = "cdm";

impl CdmModel {
    pub fn new(config: CdmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (encoder, decoder, distill_proj) = build(&config, &mut store, &mut rng)?;
        let rvq = RvqStack::random(config.codebook_size, config.dim, 1.0, config.codebook_decay, &mut rng)?;
        Ok(Self {
            config,
            store,
            rvq,
            distill_proj,
            encoder,
            decoder,
        })
    }

    /// Encoder graph: waveform node `[t]`/`[1, t]` to `E: [C, T_n]`.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.value(x).len();
        let hop = self.config.hop();
        if n < hop {
            return Err(Error::InsufficientInput { needed: hop, got: n });
        }
        // trailing samples that do not fill a frame are dropped
        let x = g.reshape(x, &[1, n])?;
        let x = if !n.is_multiple_of(hop) { g.slice_cols(x, 0, n - n % hop)? } else { x };
        let enc = &self.encoder;
        let mut h = enc.conv_in.forward(g, x)?;
        for (res, down) in &enc.stages {
            h = res.forward(g, h)?;
            h = down.forward(g, h)?;
        }
        h = enc.rnn.forward(g, h)?;
        enc.out.forward(g, h)
    }

    /// Decoder graph: quantized features `[C, T_n]` to a `[1, T_n·320]` waveform.
    pub fn decode_graph<T: Real>(&self, g: &mut Graph<'_, T>, q: Var) -> Result<Var> {
        let (c, _) = g.value(q).dims2()?;
        if c != self.config.dim {
            return Err(Error::shape(format!("[{}, T_n] tokens", self.config.dim), format!("{:?}", g.shape(q))));
        }
        let dec = &self.decoder;
        let mut h = dec.conv_in.forward(g, q)?;
        h = dec.rnn.forward(g, h)?;
        for (up, res) in &dec.stages {
            h = up.forward(g, h)?;
            h = res.forward(g, h)?;
        }
        dec.out.forward(g, h)
    }

    pub fn encode(&self, buf: &AudioBuffer) -> Result<Tensor<f32>> {
        check_rate(buf)?;
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let x = g.input(Tensor::new(&[buf.len()], buf.to_f32())?);
        let e = self.encode_graph(&mut g, x)?;
        Ok(g.take_value(e))
    }

    pub fn quantize(&self, e: &Tensor<f32>) -> Result<TokenStreams> {
        let (c, t) = e.dims2()?;
        if c != self.config.dim {
            return Err(Error::shape(format!("[{}, T_n] features", self.config.dim), format!("{:?}", e.shape())));
        }
        rvq_quantize(e.data(), t, &self.rvq)
    }

    pub fn tokenize(&self, buf: &AudioBuffer) -> Result<TokenStreams> {
        self.quantize(&self.encode(buf)?)
    }

    /// Decodes the accumulated stage outputs, clamped to `[-1, 1]`.
    pub fn decode(&self, tokens: &TokenStreams) -> Result<AudioBuffer> {
        self.decode_features(&tokens.quantized_sum(), tokens.dim, tokens.frames)
    }

    /// Decodes an arbitrary `[C, T_n]` feature map.
    pub fn decode_features(&self, features: &[f32], dim: usize, frames: usize) -> Result<AudioBuffer> {
        if dim != self.config.dim || features.len() != dim * frames {
            return Err(Error::shape(
                format!("[{}, {frames}] features", self.config.dim),
                format!("[{dim}, ?] with {} values", features.len()),
            ));
        }
        let mut g = Graph::new(&self.store, Mode::Eval, 0);
        let q = g.input(Tensor::new(&[dim, frames], features.to_vec())?);
        let y = self.decode_graph(&mut g, q)?;
        let samples = g.value(y).data().iter().map(|&v| (v as f64).clamp(-1.0, 1.0)).collect();
        AudioBuffer::new(samples, SAMPLE_RATE)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Writes parameters, codebooks and configuration.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut store = self.store.clone();
        for (k, book) in self.rvq.stages.iter().enumerate() {
            store.add_buffer(
                &format!("cdm.rvq.{k}"),
                Tensor::new(&[book.len(), book.dim], book.entries.clone())?,
            );
        }
        let meta = serde_json::json!({ "kind": CDM_CHECKPOINT_KIND, "config": self.config });
        save_checkpoint(path, &store, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (store, meta) = load_checkpoint::<f32>(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CDM_CHECKPOINT_KIND) {
            return Err(Error::Format("checkpoint is not a cdm model".into()));
        }
        let config: CdmConfig = serde_json::from_value(meta["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        model.store.load_from(&store)?;
        for (k, book) in model.rvq.stages.iter_mut().enumerate() {
            let id = store
                .id(&format!("cdm.rvq.{k}"))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks codebook {k}")))?;
            *book = Codebook::new(store.get(id).data().to_vec(), model.config.dim, model.config.codebook_decay)?;
        }
        Ok(model)
    }
}

fn check_rate(buf: &AudioBuffer) -> Result<()> {
    if buf.sample_rate != SAMPLE_RATE {
        return Err(Error::Domain(format!(
            "codec expects {SAMPLE_RATE} Hz audio, got {}",
            buf.sample_rate
        )));
    }
    Ok(())
}

fn build(cfg: &CdmConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<(Encoder, Decoder, ParamId)> {
    let n = cfg.strides.len();
    let top = cfg.width(n);
    let sample_conv = |cin, cout| same_conv(cin, cout, cfg);

    let conv_in = Layer::new(sample_conv(1, cfg.base_channels), "enc.in", store, rng)?;
    let mut stages = Vec::with_capacity(n);
    for (s, &st) in cfg.strides.iter().enumerate() {
        let (cin, cout) = (cfg.width(s), cfg.width(s + 1));
        let res = ResBlock::new(cin, cfg, &format!("enc.{s}.res"), store, rng)?;
        let down = Resample {
            conv: Layer::new(
                LayerSpec::Conv1d {
                    cin,
                    cout,
                    kernel: 2 * st,
                    stride: st,
                    dilation: 1,
                    pad_l: st / 2,
                    pad_r: st.div_ceil(2),
                    bias: cfg.conv_bias,
                },
                &format!("enc.{s}.down.conv"),
                store,
                rng,
            )?,
        };
        stages.push((res, down));
    }
    let rnn = Recurrence {
        rnn: Layer::new(
            LayerSpec::BidirectionalRecurrent {
                din: top,
                hidden: top / 2,
                cell: cfg.cell,
            },
            "enc.rnn",
            store,
            rng,
        )?,
    };
    let out = Resample {
        conv: Layer::new(sample_conv(top, cfg.dim), "enc.out.conv", store, rng)?,
    };
    let encoder = Encoder {
        conv_in,
        stages,
        rnn,
        out,
    };

    let conv_in = Layer::new(sample_conv(cfg.dim, top), "dec.in", store, rng)?;
    let rnn = Recurrence {
        rnn: Layer::new(
            LayerSpec::BidirectionalRecurrent {
                din: top,
                hidden: top / 2,
                cell: cfg.cell,
            },
            "dec.rnn",
            store,
            rng,
        )?,
    };
    let mut stages = Vec::with_capacity(n);
    for (s, &st) in cfg.strides.iter().enumerate().rev() {
        let (cin, cout) = (cfg.width(s + 1), cfg.width(s));
        let up = Resample {
            conv: Layer::new(
                LayerSpec::ConvTranspose1d {
                    cin,
                    cout,
                    kernel: 2 * st,
                    stride: st,
                    crop_l: st / 2,
                    crop_r: st.div_ceil(2),
                    bias: cfg.conv_bias,
                },
                &format!("dec.{s}.up.conv"),
                store,
                rng,
            )?,
        };
        let res = ResBlock::new(cout, cfg, &format!("dec.{s}.res"), store, rng)?;
        stages.push((up, res));
    }
    let out = Resample {
        conv: Layer::new(sample_conv(cfg.base_channels, 1), "dec.out.conv", store, rng)?,
    };
    let decoder = Decoder {
        conv_in,
        rnn,
        stages,
        out,
    };
    let w = crate::diffnum::fan_in_uniform(&[cfg.teacher_dim, cfg.dim], cfg.dim, rng);
    let distill_proj = store.add("cdm.distill.w", w);
    Ok((encoder, decoder, distill_proj))
}
