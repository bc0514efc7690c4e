//! Parameterized layers built on [`Graph`] operations.
//!
//! Layouts: convolutional kinds take `[channels, time]` (2-D conv takes
//! `[channels, h, w]`); linear, recurrent, attention and FFN kinds take
//! `[time, features]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{fan_in_uniform, orthogonal, Axis, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentCell {
    #[default]
    Gru,
    Lstm,
}

impl RecurrentCell {
    fn gates(self) -> usize {
        match self {
            RecurrentCell::Gru => 3,
            RecurrentCell::Lstm => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        pad_l: usize,
        pad_r: usize,
        bias: bool,
    },
    /// Weight `[cin, cout, kernel]`; output cropped by `crop_l`/`crop_r`.
    ConvTranspose1d {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        crop_l: usize,
        crop_r: usize,
        bias: bool,
    },
    Conv2d {
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        dilation: (usize, usize),
        pad: (usize, usize),
        bias: bool,
    },
    Linear {
        din: usize,
        dout: usize,
        bias: bool,
    },
    /// Normalizes each feature vector: rows of `[time, dim]`, or columns of
    /// `[dim, time]` when `channels_first`.
    LayerNorm {
        dim: usize,
        channels_first: bool,
    },
    /// Per-channel normalization of `[channels, samples]`.
    BatchNorm {
        channels: usize,
        momentum: f64,
    },
    Elu,
    Sigmoid,
    /// `[time, din] → [time, 2·hidden]` (forward then backward direction).
    BidirectionalRecurrent {
        din: usize,
        hidden: usize,
        cell: RecurrentCell,
    },
    Mhsa {
        dim: usize,
        heads: usize,
    },
    Ffn {
        dim: usize,
        hidden: usize,
        dropout: f64,
    },
    Dropout {
        p: f64,
    },
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        let rate = |p: f64| {
            if (0.0..1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("dropout rate {p} outside [0, 1)")))
            }
        };
        match *self {
            LayerSpec::Conv1d {
                cin,
                cout,
                kernel,
                stride,
                dilation,
                ..
            } => {
                positive("cin", cin)?;
                positive("cout", cout)?;
                positive("kernel", kernel)?;
                positive("stride", stride)?;
                positive("dilation", dilation)
            }
            LayerSpec::ConvTranspose1d {
                cin,
                cout,
                kernel,
                stride,
                ..
            } => {
                positive("cin", cin)?;
                positive("cout", cout)?;
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            LayerSpec::Conv2d {
                cin,
                cout,
                kernel,
                stride,
                dilation,
                ..
            } => {
                positive("cin", cin)?;
                positive("cout", cout)?;
                for v in [kernel.0, kernel.1, stride.0, stride.1, dilation.0, dilation.1] {
                    positive("conv2d geometry", v)?;
                }
                Ok(())
            }
            LayerSpec::Linear { din, dout, .. } => {
                positive("din", din)?;
                positive("dout", dout)
            }
            LayerSpec::LayerNorm { dim, .. } => positive("dim", dim),
            LayerSpec::BatchNorm { channels, momentum } => {
                positive("channels", channels)?;
                if !(0.0..=1.0).contains(&momentum) {
                    return Err(Error::Config(format!("batch-norm momentum {momentum} outside [0, 1]")));
                }
                Ok(())
            }
            LayerSpec::Elu | LayerSpec::Sigmoid => Ok(()),
            LayerSpec::BidirectionalRecurrent { din, hidden, .. } => {
                positive("din", din)?;
                positive("hidden", hidden)
            }
            LayerSpec::Mhsa { dim, heads } => {
                positive("dim", dim)?;
                positive("heads", heads)?;
                if dim % heads != 0 {
                    return Err(Error::Config(format!("heads {heads} does not divide dimension {dim}")));
                }
                Ok(())
            }
            LayerSpec::Ffn { dim, hidden, dropout } => {
                positive("dim", dim)?;
                positive("hidden", hidden)?;
                rate(dropout)
            }
            LayerSpec::Dropout { p } => rate(p),
        }
    }
}

/// A layer bound to its parameters in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    pub prefix: String,
    ids: Vec<ParamId>,
}

fn vec_param<T: Real>(store: &mut ParamStore<T>, name: String, n: usize, v: f64) -> ParamId {
    store.add(&name, Tensor::full(&[n], T::of(v)))
}

impl Layer {
    /// Registers parameters under `prefix.*`.
    pub fn new<T: Real, R: Rng>(spec: LayerSpec, prefix: &str, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let p = |s: &str| format!("{prefix}.{s}");
        let mut ids = Vec::new();
        match spec {
            LayerSpec::Conv1d {
                cin,
                cout,
                kernel,
                bias,
                ..
            } => {
                ids.push(store.add(&p("weight"), fan_in_uniform(&[cout, cin, kernel], cin * kernel, rng)));
                if bias {
                    ids.push(vec_param(store, p("bias"), cout, 0.0));
                }
            }
            LayerSpec::ConvTranspose1d {
                cin,
                cout,
                kernel,
                bias,
                ..
            } => {
                ids.push(store.add(&p("weight"), fan_in_uniform(&[cin, cout, kernel], cin * kernel, rng)));
                if bias {
                    ids.push(vec_param(store, p("bias"), cout, 0.0));
                }
            }
            LayerSpec::Conv2d {
                cin,
                cout,
                kernel,
                bias,
                ..
            } => {
                let fan = cin * kernel.0 * kernel.1;
                ids.push(store.add(&p("weight"), fan_in_uniform(&[cout, cin, kernel.0, kernel.1], fan, rng)));
                if bias {
                    ids.push(vec_param(store, p("bias"), cout, 0.0));
                }
            }
            LayerSpec::Linear { din, dout, bias } => {
                ids.push(store.add(&p("weight"), fan_in_uniform(&[dout, din], din, rng)));
                if bias {
                    ids.push(vec_param(store, p("bias"), dout, 0.0));
                }
            }
            LayerSpec::LayerNorm { dim, .. } => {
                ids.push(vec_param(store, p("gamma"), dim, 1.0));
                ids.push(vec_param(store, p("beta"), dim, 0.0));
            }
            LayerSpec::BatchNorm { channels, .. } => {
                ids.push(vec_param(store, p("gamma"), channels, 1.0));
                ids.push(vec_param(store, p("beta"), channels, 0.0));
                ids.push(store.add_buffer(&p("running_mean"), Tensor::zeros(&[channels])));
                ids.push(store.add_buffer(&p("running_var"), Tensor::full(&[channels], T::one())));
            }
            LayerSpec::Elu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } => {}
            LayerSpec::BidirectionalRecurrent { din, hidden, cell } => {
                let g = cell.gates() * hidden;
                for dir in ["fwd", "bwd"] {
                    ids.push(store.add(&p(&format!("{dir}.w_ih")), fan_in_uniform(&[g, din], hidden, rng)));
                    ids.push(store.add(&p(&format!("{dir}.w_hh")), orthogonal(g, hidden, rng)));
                    ids.push(vec_param(store, p(&format!("{dir}.b_ih")), g, 0.0));
                    ids.push(vec_param(store, p(&format!("{dir}.b_hh")), g, 0.0));
                }
            }
            LayerSpec::Mhsa { dim, .. } => {
                for w in ["q", "k", "v", "o"] {
                    ids.push(store.add(&p(&format!("w_{w}")), fan_in_uniform(&[dim, dim], dim, rng)));
                    ids.push(vec_param(store, p(&format!("b_{w}")), dim, 0.0));
                }
            }
            LayerSpec::Ffn { dim, hidden, .. } => {
                ids.push(store.add(&p("w1"), fan_in_uniform(&[hidden, dim], dim, rng)));
                ids.push(vec_param(store, p("b1"), hidden, 0.0));
                ids.push(store.add(&p("w2"), fan_in_uniform(&[dim, hidden], hidden, rng)));
                ids.push(vec_param(store, p("b2"), dim, 0.0));
            }
        }
        Ok(Self {
            spec,
            prefix: prefix.to_string(),
            ids,
        })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self.spec {
            LayerSpec::Conv1d {
                cin,
                stride,
                dilation,
                pad_l,
                pad_r,
                bias,
                ..
            } => {
                check_rows(g, x, cin, "conv1d input channels")?;
                let w = g.param(self.ids[0])?;
                let b = if bias { Some(g.param(self.ids[1])?) } else { None };
                g.conv1d(x, w, b, stride, dilation, pad_l, pad_r)
            }
            LayerSpec::ConvTranspose1d {
                cin,
                stride,
                crop_l,
                crop_r,
                bias,
                ..
            } => {
                check_rows(g, x, cin, "transposed conv input channels")?;
                let w = g.param(self.ids[0])?;
                let b = if bias { Some(g.param(self.ids[1])?) } else { None };
                g.conv_transpose1d(x, w, b, stride, crop_l, crop_r)
            }
            LayerSpec::Conv2d {
                stride,
                dilation,
                pad,
                bias,
                ..
            } => {
                let w = g.param(self.ids[0])?;
                let b = if bias { Some(g.param(self.ids[1])?) } else { None };
                g.conv2d(x, w, b, stride, dilation, pad)
            }
            LayerSpec::Linear { din, bias, .. } => {
                check_cols(g, x, din, "linear input features")?;
                let w = g.param(self.ids[0])?;
                let y = g.matmul_t(x, false, w, true)?;
                if bias {
                    let b = g.param(self.ids[1])?;
                    g.bcast(y, b, Axis::Row, false)
                } else {
                    Ok(y)
                }
            }
            LayerSpec::LayerNorm { dim, channels_first } => {
                let gamma = g.param(self.ids[0])?;
                let beta = g.param(self.ids[1])?;
                if channels_first {
                    check_rows(g, x, dim, "layer-norm channels")?;
                    g.layer_norm(x, gamma, beta, 0, NORM_EPS)
                } else {
                    check_cols(g, x, dim, "layer-norm features")?;
                    g.layer_norm(x, gamma, beta, 1, NORM_EPS)
                }
            }
            LayerSpec::BatchNorm { channels, momentum } => {
                check_rows(g, x, channels, "batch-norm channels")?;
                batch_norm(g, x, &self.ids, momentum)
            }
            LayerSpec::Elu => Ok(g.elu(x)),
            LayerSpec::Sigmoid => Ok(g.sigmoid(x)),
            LayerSpec::Dropout { p } => g.dropout(x, p),
            LayerSpec::BidirectionalRecurrent { din, hidden, cell } => {
                check_cols(g, x, din, "recurrent input features")?;
                let fwd = recurrent(g, x, &self.ids[0..4], hidden, cell, false)?;
                let bwd = recurrent(g, x, &self.ids[4..8], hidden, cell, true)?;
                g.concat_cols(&[fwd, bwd])
            }
            LayerSpec::Mhsa { dim, heads } => {
                check_cols(g, x, dim, "attention features")?;
                mhsa(g, x, &self.ids, dim, heads)
            }
            LayerSpec::Ffn { dim, dropout, .. } => {
                check_cols(g, x, dim, "ffn features")?;
                let w1 = g.param(self.ids[0])?;
                let b1 = g.param(self.ids[1])?;
                let w2 = g.param(self.ids[2])?;
                let b2 = g.param(self.ids[3])?;
                let h = g.matmul_t(x, false, w1, true)?;
                let h = g.bcast(h, b1, Axis::Row, false)?;
                let h = g.gelu(h);
                let h = g.dropout(h, dropout)?;
                let y = g.matmul_t(h, false, w2, true)?;
                g.bcast(y, b2, Axis::Row, false)
            }
        }
    }
}

fn check_rows<T: Real>(g: &Graph<'_, T>, x: Var, want: usize, what: &str) -> Result<()> {
    let (r, _) = g.value(x).dims2()?;
    if r != want {
        return Err(Error::shape(format!("{what} = {want}"), format!("{:?}", g.shape(x))));
    }
    Ok(())
}

fn check_cols<T: Real>(g: &Graph<'_, T>, x: Var, want: usize, what: &str) -> Result<()> {
    let (_, c) = g.value(x).dims2()?;
    if c != want {
        return Err(Error::shape(format!("{what} = {want}"), format!("{:?}", g.shape(x))));
    }
    Ok(())
}

fn batch_norm<T: Real>(g: &mut Graph<'_, T>, x: Var, ids: &[ParamId], momentum: f64) -> Result<Var> {
    let gamma = g.param(ids[0])?;
    let beta = g.param(ids[1])?;
    if g.is_train() {
        let n = g.value(x).shape()[1];
        let (y, means, vars) = g.batch_norm_train(x, gamma, beta, NORM_EPS)?;
        let store = g.store()?;
        let m = T::of(momentum);
        let unbias = if n > 1 { T::of(n as f64 / (n as f64 - 1.0)) } else { T::one() };
        let rm = store.get(ids[2]).data();
        let rv = store.get(ids[3]).data();
        let new_m: Vec<T> = rm.iter().zip(&means).map(|(r, b)| (T::one() - m) * *r + m * *b).collect();
        let new_v: Vec<T> = rv
            .iter()
            .zip(&vars)
            .map(|(r, b)| (T::one() - m) * *r + m * *b * unbias)
            .collect();
        let c = new_m.len();
        g.push_buffer_update(ids[2], Tensor::new(&[c], new_m)?);
        g.push_buffer_update(ids[3], Tensor::new(&[c], new_v)?);
        Ok(y)
    } else {
        let store = g.store()?;
        let rm = store.get(ids[2]).data();
        let rv = store.get(ids[3]).data();
        let c = rm.len();
        // y = x·s + (β − μ·s) with s = γ/√(σ² + ε), built from graph ops so
        // gradients still reach γ and β.
        let inv: Vec<T> = rv.iter().map(|v| T::one() / (*v + T::of(NORM_EPS)).sqrt()).collect();
        let neg_mean_inv: Vec<T> = rm.iter().zip(&inv).map(|(m, i)| -*m * *i).collect();
        let inv_v = g.input(Tensor::new(&[c], inv)?);
        let shift_v = g.input(Tensor::new(&[c], neg_mean_inv)?);
        let xs = g.bcast(x, inv_v, Axis::Col, true)?;
        let xh = g.bcast(xs, shift_v, Axis::Col, false)?;
        let y = g.bcast(xh, gamma, Axis::Col, true)?;
        g.bcast(y, beta, Axis::Col, false)
    }
}

fn recurrent<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    ids: &[ParamId],
    hidden: usize,
    cell: RecurrentCell,
    reverse: bool,
) -> Result<Var> {
    let t_len = g.value(x).shape()[0];
    let w_ih = g.param(ids[0])?;
    let w_hh = g.param(ids[1])?;
    let b_ih = g.param(ids[2])?;
    let b_hh = g.param(ids[3])?;
    let xi = g.matmul_t(x, false, w_ih, true)?;
    let xi = g.bcast(xi, b_ih, Axis::Row, false)?;
    let h0 = g.input(Tensor::zeros(&[1, hidden]));
    let mut h = h0;
    let mut c = h0;
    let mut outs = vec![h0; t_len];
    let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
    for t in order {
        let xt = g.slice_rows(xi, t, 1)?;
        let hh = g.matmul_t(h, false, w_hh, true)?;
        let hh = g.bcast(hh, b_hh, Axis::Row, false)?;
        match cell {
            RecurrentCell::Gru => {
                let xrz = g.slice_cols(xt, 0, 2 * hidden)?;
                let hrz = g.slice_cols(hh, 0, 2 * hidden)?;
                let rz = g.add(xrz, hrz)?;
                let rz = g.sigmoid(rz);
                let r = g.slice_cols(rz, 0, hidden)?;
                let z = g.slice_cols(rz, hidden, hidden)?;
                let xn = g.slice_cols(xt, 2 * hidden, hidden)?;
                let hn = g.slice_cols(hh, 2 * hidden, hidden)?;
                let rhn = g.mul(r, hn)?;
                let n = g.add(xn, rhn)?;
                let n = g.tanh(n);
                // h' = n + z·(h − n)
                let d = g.sub(h, n)?;
                let zd = g.mul(z, d)?;
                h = g.add(n, zd)?;
            }
            RecurrentCell::Lstm => {
                let pre = g.add(xt, hh)?;
                let ifo_pre = g.slice_cols(pre, 0, 3 * hidden)?;
                let ifo = g.sigmoid(ifo_pre);
                let i = g.slice_cols(ifo, 0, hidden)?;
                let f = g.slice_cols(ifo, hidden, hidden)?;
                let o = g.slice_cols(ifo, 2 * hidden, hidden)?;
                let gg = g.slice_cols(pre, 3 * hidden, hidden)?;
                let gg = g.tanh(gg);
                let fc = g.mul(f, c)?;
                let ig = g.mul(i, gg)?;
                c = g.add(fc, ig)?;
                let tc = g.tanh(c);
                h = g.mul(o, tc)?;
            }
        }
        outs[t] = h;
    }
    g.concat_rows(&outs)
}

fn mhsa<T: Real>(g: &mut Graph<'_, T>, x: Var, ids: &[ParamId], dim: usize, heads: usize) -> Result<Var> {
    let proj = |g: &mut Graph<'_, T>, k: usize| -> Result<Var> {
        let w = g.param(ids[2 * k])?;
        let b = g.param(ids[2 * k + 1])?;
        let y = g.matmul_t(x, false, w, true)?;
        g.bcast(y, b, Axis::Row, false)
    };
    let q = proj(g, 0)?;
    let k = proj(g, 1)?;
    let v = proj(g, 2)?;
    let dh = dim / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let s = g.matmul_t(qh, false, kh, true)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s)?;
        outs.push(g.matmul(a, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let wo = g.param(ids[6])?;
    let bo = g.param(ids[7])?;
    let y = g.matmul_t(merged, false, wo, true)?;
    g.bcast(y, bo, Axis::Row, false)
}
