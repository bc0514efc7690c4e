//! Multi-scale STFT, multi-period and multi-scale waveform discriminators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{Graph, Layer, LayerSpec, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};

/// Shortest waveform every sub-discriminator can score.
pub const MIN_SAMPLES: usize = 2048;
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// `log2` window sizes of the STFT discriminators (hop = window / 4).
    pub stft_scales: Vec<u32>,
    pub periods: Vec<usize>,
    /// Number of waveform scales; scale `j` is pooled `j` times.
    pub wave_scales: usize,
    pub channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            stft_scales: vec![7, 9, 11],
            periods: vec![2, 3, 5, 7, 11],
            wave_scales: 3,
            channels: 16,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels > 32 {
            return Err(Error::Config(format!("discriminator channels {} outside [1, 32]", self.channels)));
        }
        if self.stft_scales.iter().any(|s| !(5..=11).contains(s)) {
            return Err(Error::Config("stft discriminator scales must lie in [5, 11]".into()));
        }
        if self.periods.iter().any(|&p| p < 2) {
            return Err(Error::Config("discriminator periods must be ≥ 2".into()));
        }
        if self.stft_scales.is_empty() && self.periods.is_empty() && self.wave_scales == 0 {
            return Err(Error::Config("empty discriminator set".into()));
        }
        Ok(())
    }
}

/// Score map and intermediate activations of one sub-discriminator.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub scores: Var,
    pub features: Vec<Var>,
}

#[derive(Clone, Debug)]
enum Kind {
    Stft(u32),
    Period(usize),
    Wave(usize),
}

#[derive(Clone, Debug)]
struct Sub {
    kind: Kind,
    layers: Vec<Layer>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorSet {
    pub config: DiscriminatorConfig,
    subs: Vec<Sub>,
}

fn conv2d(cin: usize, cout: usize, kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> LayerSpec {
    LayerSpec::Conv2d {
        cin,
        cout,
        kernel,
        stride,
        dilation: (1, 1),
        pad,
        bias: true,
    }
}

fn conv1d(cin: usize, cout: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv1d {
        cin,
        cout,
        kernel,
        stride,
        dilation: 1,
        pad_l: kernel / 2,
        pad_r: kernel / 2,
        bias: true,
    }
}

impl DiscriminatorSet {
    pub fn new<T: Real, R: Rng>(
        config: DiscriminatorConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut subs = Vec::new();
        let mut build = |kind: Kind, specs: Vec<LayerSpec>, name: String, store: &mut ParamStore<T>| -> Result<()> {
            let layers = specs
                .into_iter()
                .enumerate()
                .map(|(i, s)| Layer::new(s, &format!("{prefix}.{name}.{i}"), store, rng))
                .collect::<Result<Vec<_>>>()?;
            subs.push(Sub { kind, layers });
            Ok(())
        };
        for &s in &config.stft_scales {
            let specs = vec![
                conv2d(2, c, (3, 3), (1, 1), (1, 1)),
                conv2d(c, c, (3, 3), (2, 1), (1, 1)),
                conv2d(c, c, (3, 3), (2, 1), (1, 1)),
                conv2d(c, 1, (3, 3), (1, 1), (1, 1)),
            ];
            build(Kind::Stft(s), specs, format!("stft{s}"), store)?;
        }
        for &p in &config.periods {
            let specs = vec![
                conv2d(1, c, (1, 5), (1, 3), (0, 2)),
                conv2d(c, c, (1, 5), (1, 3), (0, 2)),
                conv2d(c, c, (1, 5), (1, 1), (0, 2)),
                conv2d(c, 1, (1, 3), (1, 1), (0, 1)),
            ];
            build(Kind::Period(p), specs, format!("period{p}"), store)?;
        }
        for j in 0..config.wave_scales {
            let specs = vec![
                conv1d(1, c, 15, 1),
                conv1d(c, c, 11, 4),
                conv1d(c, c, 5, 4),
                conv1d(c, 1, 3, 1),
            ];
            build(Kind::Wave(j), specs, format!("wave{j}"), store)?;
        }
        Ok(Self { config, subs })
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.subs
            .iter()
            .flat_map(|s| s.layers.iter().flat_map(|l| l.param_ids().iter().copied()))
            .collect()
    }

    /// Scores a waveform node (`[t]` or `[1, t]`) with every sub-discriminator.
    pub fn discriminate<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<DiscOutput>> {
        let n = g.value(x).len();
        if n < MIN_SAMPLES {
            return Err(Error::InsufficientInput {
                needed: MIN_SAMPLES,
                got: n,
            });
        }
        let wave = g.reshape(x, &[1, n])?;
        self.subs.iter().map(|s| self.run(g, s, wave, n)).collect()
    }

    fn run<T: Real>(&self, g: &mut Graph<'_, T>, sub: &Sub, wave: Var, n: usize) -> Result<DiscOutput> {
        let mut h = match sub.kind {
            Kind::Stft(s) => {
                let w = 1usize << s;
                g.stft(wave, w, w / 4)?
            }
            Kind::Period(p) => {
                let rows = n.div_ceil(p);
                let padded = if rows * p > n {
                    let z = g.input(crate::diffnum::Tensor::zeros(&[1, rows * p - n]));
                    g.concat_cols(&[wave, z])?
                } else {
                    wave
                };
                let m = g.reshape(padded, &[rows, p])?;
                let m = g.transpose(m)?;
                g.reshape(m, &[1, p, rows])?
            }
            Kind::Wave(j) => {
                let mut h = wave;
                for _ in 0..j {
                    h = g.avg_pool1d(h, 4, 2, 1)?;
                }
                h
            }
        };
        let mut features = Vec::with_capacity(sub.layers.len());
        let last = sub.layers.len() - 1;
        for (i, layer) in sub.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = g.leaky_relu(h, SLOPE);
                features.push(h);
            }
        }
        Ok(DiscOutput { scores: h, features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn golden_score_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DiscriminatorSet::new(DiscriminatorConfig::default(), "d", &mut store, &mut rng).unwrap();
        assert_eq!(d.len(), 11);
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let x = g.input(Tensor::from_fn(&[4096], |i| (i as f64 * 0.01).sin()));
        let out = d.discriminate(&mut g, x).unwrap();
        let shapes: Vec<Vec<usize>> = out.iter().map(|o| g.shape(o.scores).to_vec()).collect();
        let want: Vec<Vec<usize>> = vec![
            // stft 128/32: 65 bins, 129 frames → halved twice over frequency
            vec![1, 17, 129],
            vec![1, 65, 33],
            vec![1, 257, 9],
            // periods: ⌈4096/p⌉ columns, then two stride-3 convolutions
            vec![1, 2, 228],
            vec![1, 3, 152],
            vec![1, 5, 92],
            vec![1, 7, 66],
            vec![1, 11, 42],
            // waveform scales 4096, 2048, 1024 with two stride-4 convolutions
            vec![1, 256],
            vec![1, 128],
            vec![1, 64],
        ];
        assert_eq!(shapes, want);
        for o in &out {
            assert_eq!(o.features.len(), 3);
        }
    }

    #[test]
    fn short_input_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DiscriminatorSet::new(DiscriminatorConfig::default(), "d", &mut store, &mut rng).unwrap();
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let x = g.input(Tensor::zeros(&[2047]));
        assert!(matches!(
            d.discriminate(&mut g, x),
            Err(Error::InsufficientInput { needed: 2048, got: 2047 })
        ));
    }

    #[test]
    fn wide_config_rejected() {
        let cfg = DiscriminatorConfig {
            channels: 64,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
