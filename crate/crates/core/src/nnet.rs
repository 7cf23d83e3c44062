//! Small time-conditioned convolutional network with exact reverse-mode
//! gradients (parameters and input) and an Adam optimizer.
//!
//! Architecture, for `n_blocks` hidden layers of width `H`:
//!
//! ```text
//! emb   = sinusoidal(t)                         (time_embed_dim)
//! film  = W2 · gelu(W1 · emb + b1) + b2         (2 · H · n_blocks)
//! h0    = input
//! z_k   = conv3x3_k(h_k)
//! f_k   = z_k ⊙ (1 + γ_k) + β_k                 (FiLM, per channel)
//! h_k+1 = gelu(f_k)            for k = 0
//!       = h_k + gelu(f_k)      for k > 0
//! out   = head(conv3x3_out(h_n))
//! ```
//!
//! Convolutions are stride 1 with zero padding 1, so the spatial shape is
//! preserved. The head is either a per-pixel softmax over channels or the
//! identity. Activations are kept channel-major over the whole batch
//! (`C × (B·H·W)`) so each convolution is one GEMM over im2col columns.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::write_atomic;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    SoftmaxOverChannels,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub out_channels: usize,
    pub n_blocks: usize,
    pub time_embed_dim: usize,
    pub output_head: OutputHead,
}

impl ConvNetSpec {
    /// Default backbone for the mask prior: 2 probability channels in,
    /// 2 class probabilities out.
    pub fn mask_prior() -> Self {
        Self {
            in_channels: 2,
            hidden_channels: 32,
            out_channels: 2,
            n_blocks: 4,
            time_embed_dim: 32,
            output_head: OutputHead::SoftmaxOverChannels,
        }
    }

    /// Default backbone for the imputer: (masked values, context mask) in,
    /// one field channel out.
    pub fn imputer() -> Self {
        Self {
            in_channels: 2,
            hidden_channels: 48,
            out_channels: 1,
            n_blocks: 4,
            time_embed_dim: 32,
            output_head: OutputHead::Linear,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden_channels = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.hidden_channels == 0
            || self.out_channels == 0
            || self.n_blocks == 0
        {
            return Err(Error::InvalidArgument(format!(
                "network sizes must be positive: {self:?}"
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "time_embed_dim must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        if self.output_head == OutputHead::SoftmaxOverChannels && self.out_channels < 2 {
            return Err(Error::InvalidArgument(
                "softmax head needs at least 2 output channels".into(),
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone)]
pub struct ConvSlot {
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub cin: usize,
    pub cout: usize,
}

/// Offsets of every tensor inside the flat parameter vector. Order:
/// block convolutions, output convolution, time MLP (W1, b1, W2, b2).
#[derive(Debug, Clone)]
pub struct Layout {
    pub blocks: Vec<ConvSlot>,
    pub head: ConvSlot,
    pub t_w1: Range<usize>,
    pub t_b1: Range<usize>,
    pub t_w2: Range<usize>,
    pub t_b2: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(spec: &ConvNetSpec) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let hid = spec.hidden_channels;
        let mut blocks = Vec::with_capacity(spec.n_blocks);
        for k in 0..spec.n_blocks {
            let cin = if k == 0 { spec.in_channels } else { hid };
            let weight = take(hid * cin * 9);
            let bias = take(hid);
            blocks.push(ConvSlot {
                weight,
                bias,
                cin,
                cout: hid,
            });
        }
        let head = ConvSlot {
            weight: take(spec.out_channels * hid * 9),
            bias: take(spec.out_channels),
            cin: hid,
            cout: spec.out_channels,
        };
        let e = spec.time_embed_dim;
        let film = 2 * hid * spec.n_blocks;
        let t_w1 = take(e * e);
        let t_b1 = take(e);
        let t_w2 = take(film * e);
        let t_b2 = take(film);
        Self {
            blocks,
            head,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            total: off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// He-normal kernels, zero biases, zero output layer.
    HeNormalZeroHead,
    /// He-normal everywhere including the output layer (used where a
    /// non-degenerate random network is needed, e.g. gradient checks).
    HeNormalFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub seed: u64,
    pub scheme: InitScheme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub spec: ConvNetSpec,
    pub data: Vec<f64>,
    pub init: InitRecord,
}

impl NetParams {
    pub fn init(spec: ConvNetSpec, seed: u64, scheme: InitScheme) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut data = vec![0.0; layout.total];
        let mut r = rng::stream(seed, "nnet/init");
        let mut he = |dst: &mut [f64], fan_in: usize, gain: f64| {
            let std = gain * (2.0 / fan_in as f64).sqrt();
            for v in dst.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v = std * z;
            }
        };
        for slot in &layout.blocks {
            he(&mut data[slot.weight.clone()], slot.cin * 9, 1.0);
        }
        if scheme == InitScheme::HeNormalFull {
            he(&mut data[layout.head.weight.clone()], layout.head.cin * 9, 1.0);
        }
        let e = spec.time_embed_dim;
        he(&mut data[layout.t_w1.clone()], e, 1.0);
        // FiLM projection starts small so the blocks begin near identity
        // modulation.
        he(&mut data[layout.t_w2.clone()], e, 0.1);
        if scheme == InitScheme::HeNormalFull {
            let mut r2 = rng::stream(seed, "nnet/init/bias");
            for v in data[layout.head.bias.clone()].iter_mut() {
                *v = r2.random_range(-0.1..0.1);
            }
        }
        Ok(Self {
            spec,
            data,
            init: InitRecord { seed, scheme },
        })
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Elementwise pieces
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Sinusoidal embedding of `t ∈ [0,1]` (scaled by 1000).
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[j] = arg.sin();
        out[half + j] = arg.cos();
    }
    out
}

/// Per-pixel softmax over the channel axis of one `C × HW` sample.
pub fn softmax_channels(x: &[f64], channels: usize) -> Vec<f64> {
    let hw = x.len() / channels;
    let mut out = vec![0.0; x.len()];
    for p in 0..hw {
        let mut mx = f64::NEG_INFINITY;
        for c in 0..channels {
            mx = mx.max(x[c * hw + p]);
        }
        let mut sum = 0.0;
        for c in 0..channels {
            let e = (x[c * hw + p] - mx).exp();
            out[c * hw + p] = e;
            sum += e;
        }
        for c in 0..channels {
            out[c * hw + p] /= sum;
        }
    }
    out
}

/// Vector-Jacobian product of [`softmax_channels`]: given `probs` and
/// `d_probs`, returns `d_logits`.
pub fn softmax_channels_backward(probs: &[f64], d_probs: &[f64], channels: usize) -> Vec<f64> {
    let hw = probs.len() / channels;
    let mut out = vec![0.0; probs.len()];
    for p in 0..hw {
        let mut dot = 0.0;
        for c in 0..channels {
            dot += probs[c * hw + p] * d_probs[c * hw + p];
        }
        for c in 0..channels {
            let i = c * hw + p;
            out[i] = probs[i] * (d_probs[i] - dot);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Convolution helpers
// ---------------------------------------------------------------------------

/// `C (m×n) = A (m×k) · B (k×n) + beta·C`, with optional transposed
/// storage for A (stored k×m) and B (stored n×k).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe dense
    // row-major (or transposed) storage inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `c × (b·h·w)` activations into `(c·9) × (b·h·w)` columns for a
/// 3×3 kernel with zero padding 1.
fn im2col(src: &[f64], c: usize, b: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    let n = b * hw;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let base = ci * n + bi * hw;
                    for y in 0..h {
                        let dst = &mut dst_row[bi * hw + y * w..bi * hw + (y + 1) * w];
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let s = &src[base + sy as usize * w..base + sy as usize * w + w];
                        match kx {
                            0 => {
                                dst[0] = 0.0;
                                dst[1..].copy_from_slice(&s[..w - 1]);
                            }
                            1 => dst.copy_from_slice(s),
                            _ => {
                                dst[..w - 1].copy_from_slice(&s[1..]);
                                dst[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into activations.
fn col2im(cols: &[f64], c: usize, b: usize, h: usize, w: usize, dst: &mut [f64]) {
    let hw = h * w;
    let n = b * hw;
    dst.fill(0.0);
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                let src_row = &cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let base = ci * n + bi * hw;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s = &src_row[bi * hw + y * w..bi * hw + (y + 1) * w];
                        let d = &mut dst[base + sy as usize * w..base + sy as usize * w + w];
                        match kx {
                            0 => {
                                for x in 1..w {
                                    d[x - 1] += s[x];
                                }
                            }
                            1 => {
                                for x in 0..w {
                                    d[x] += s[x];
                                }
                            }
                            _ => {
                                for x in 0..w - 1 {
                                    d[x + 1] += s[x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Intermediate values recorded by [`forward_batch`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    height: usize,
    width: usize,
    emb: Vec<Vec<f64>>,
    pre1: Vec<Vec<f64>>,
    e1: Vec<Vec<f64>>,
    film: Vec<Vec<f64>>,
    /// `h_0 .. h_n`, channel-major over the batch.
    hs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
    fs: Vec<Vec<f64>>,
    /// Head output, channel-major (softmax probabilities or raw values).
    out: Vec<f64>,
}

/// Gradients returned by [`backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same layout as [`NetParams::data`]; `None` when not requested.
    pub params: Option<Vec<f64>>,
    /// Sample-major `B × C_in × H × W`.
    pub input: Vec<f64>,
}

fn to_channel_major(x: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let n = b * hw;
    let mut out = vec![0.0; c * n];
    for bi in 0..b {
        for ci in 0..c {
            out[ci * n + bi * hw..ci * n + (bi + 1) * hw]
                .copy_from_slice(&x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]);
        }
    }
    out
}

fn to_sample_major(x: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let n = b * hw;
    let mut out = vec![0.0; c * n];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                .copy_from_slice(&x[ci * n + bi * hw..ci * n + (bi + 1) * hw]);
        }
    }
    out
}

/// Runs the network on a batch. `inputs` is sample-major
/// `B × C_in × H × W`, `times` has one entry per sample. Returns the
/// sample-major output `B × C_out × H × W` and the tape.
pub fn forward_batch(
    params: &NetParams,
    inputs: &[f64],
    times: &[f64],
    height: usize,
    width: usize,
) -> Result<(Vec<f64>, Tape)> {
    let spec = &params.spec;
    let layout = spec.layout();
    if params.data.len() != layout.total {
        return Err(Error::Dimension(format!(
            "parameter vector has {} entries, spec needs {}",
            params.data.len(),
            layout.total
        )));
    }
    let b = times.len();
    let hw = height * width;
    if b == 0 || hw == 0 || inputs.len() != b * spec.in_channels * hw {
        return Err(Error::Dimension(format!(
            "input of length {} does not match batch {b} x {} channels x {height}x{width}",
            inputs.len(),
            spec.in_channels
        )));
    }
    if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0,1]")));
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite network input".into()));
    }
    let p = &params.data;
    let hid = spec.hidden_channels;
    let e = spec.time_embed_dim;
    let n_film = 2 * hid * spec.n_blocks;
    let n = b * hw;

    let mut emb = Vec::with_capacity(b);
    let mut pre1 = Vec::with_capacity(b);
    let mut e1 = Vec::with_capacity(b);
    let mut film = Vec::with_capacity(b);
    for &t in times {
        let em = time_embedding(t, e);
        let mut pr = p[layout.t_b1.clone()].to_vec();
        gemm(e, e, 1, &p[layout.t_w1.clone()], false, &em, false, 1.0, &mut pr);
        let act: Vec<f64> = pr.iter().map(|&v| gelu(v)).collect();
        let mut fm = p[layout.t_b2.clone()].to_vec();
        gemm(n_film, e, 1, &p[layout.t_w2.clone()], false, &act, false, 1.0, &mut fm);
        emb.push(em);
        pre1.push(pr);
        e1.push(act);
        film.push(fm);
    }

    let mut hs = Vec::with_capacity(spec.n_blocks + 1);
    let mut zs = Vec::with_capacity(spec.n_blocks);
    let mut fs = Vec::with_capacity(spec.n_blocks);
    hs.push(to_channel_major(inputs, b, spec.in_channels, hw));
    let mut cols = Vec::new();
    for (k, slot) in layout.blocks.iter().enumerate() {
        let cin = slot.cin;
        cols.resize(cin * 9 * n, 0.0);
        im2col(&hs[k], cin, b, height, width, &mut cols);
        let mut z = vec![0.0; hid * n];
        let bias = &p[slot.bias.clone()];
        for c in 0..hid {
            z[c * n..(c + 1) * n].fill(bias[c]);
        }
        gemm(hid, cin * 9, n, &p[slot.weight.clone()], false, &cols, false, 1.0, &mut z);
        let mut f = vec![0.0; hid * n];
        let mut h_next = if k == 0 { vec![0.0; hid * n] } else { hs[k].clone() };
        for bi in 0..b {
            let fm = &film[bi];
            for c in 0..hid {
                let gamma = fm[2 * k * hid + c];
                let beta = fm[2 * k * hid + hid + c];
                let r = c * n + bi * hw..c * n + (bi + 1) * hw;
                for i in r {
                    let fv = z[i] * (1.0 + gamma) + beta;
                    f[i] = fv;
                    h_next[i] += gelu(fv);
                }
            }
        }
        zs.push(z);
        fs.push(f);
        hs.push(h_next);
    }

    let head = &layout.head;
    cols.resize(hid * 9 * n, 0.0);
    im2col(&hs[spec.n_blocks], hid, b, height, width, &mut cols);
    let cout = spec.out_channels;
    let mut o = vec![0.0; cout * n];
    let hb = &p[head.bias.clone()];
    for c in 0..cout {
        o[c * n..(c + 1) * n].fill(hb[c]);
    }
    gemm(cout, hid * 9, n, &p[head.weight.clone()], false, &cols, false, 1.0, &mut o);
    if spec.output_head == OutputHead::SoftmaxOverChannels {
        o = softmax_channels(&o, cout);
    }
    if o.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite network output".into()));
    }
    let out = to_sample_major(&o, b, cout, hw);
    Ok((
        out,
        Tape {
            batch: b,
            height,
            width,
            emb,
            pre1,
            e1,
            film,
            hs,
            zs,
            fs,
            out: o,
        },
    ))
}

/// Single-sample forward pass: `input` is `C_in × H × W`.
pub fn forward(
    params: &NetParams,
    input: &[f64],
    t: f64,
    height: usize,
    width: usize,
) -> Result<Vec<f64>> {
    forward_batch(params, input, &[t], height, width).map(|(o, _)| o)
}

/// Reverse pass. `d_out` is the gradient of a scalar loss with respect to
/// the sample-major network output.
pub fn backward(
    params: &NetParams,
    tape: &Tape,
    d_out: &[f64],
    want_params: bool,
) -> Result<Gradients> {
    let spec = &params.spec;
    let layout = spec.layout();
    let p = &params.data;
    let (b, height, width) = (tape.batch, tape.height, tape.width);
    let hw = height * width;
    let n = b * hw;
    let hid = spec.hidden_channels;
    let cout = spec.out_channels;
    let e = spec.time_embed_dim;
    let n_film = 2 * hid * spec.n_blocks;
    if d_out.len() != cout * n {
        return Err(Error::Dimension(format!(
            "output gradient has {} entries, expected {}",
            d_out.len(),
            cout * n
        )));
    }
    if d_out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite output gradient".into()));
    }
    let mut grad = if want_params {
        Some(vec![0.0; layout.total])
    } else {
        None
    };

    let mut d_o = to_channel_major(d_out, b, cout, hw);
    if spec.output_head == OutputHead::SoftmaxOverChannels {
        d_o = softmax_channels_backward(&tape.out, &d_o, cout);
    }

    let mut cols = vec![0.0; hid * 9 * n];
    let mut dcols = vec![0.0; hid * 9 * n];
    // Head convolution.
    let head = &layout.head;
    if let Some(g) = grad.as_mut() {
        im2col(&tape.hs[spec.n_blocks], hid, b, height, width, &mut cols);
        gemm(cout, n, hid * 9, &d_o, false, &cols, true, 1.0, &mut g[head.weight.clone()]);
        let gb = &mut g[head.bias.clone()];
        for c in 0..cout {
            gb[c] += d_o[c * n..(c + 1) * n].iter().sum::<f64>();
        }
    }
    gemm(hid * 9, cout, n, &p[head.weight.clone()], true, &d_o, false, 0.0, &mut dcols);
    let mut dh = vec![0.0; hid * n];
    col2im(&dcols, hid, b, height, width, &mut dh);

    let mut d_film = vec![vec![0.0; n_film]; b];
    let mut d_input = Vec::new();
    for k in (0..spec.n_blocks).rev() {
        let slot = &layout.blocks[k];
        let cin = slot.cin;
        let z = &tape.zs[k];
        let f = &tape.fs[k];
        let mut dz = vec![0.0; hid * n];
        for bi in 0..b {
            let fm = &tape.film[bi];
            let dfm = &mut d_film[bi];
            for c in 0..hid {
                let gamma = fm[2 * k * hid + c];
                let mut dg = 0.0;
                let mut db = 0.0;
                for i in c * n + bi * hw..c * n + (bi + 1) * hw {
                    let df = dh[i] * gelu_grad(f[i]);
                    dg += df * z[i];
                    db += df;
                    dz[i] = df * (1.0 + gamma);
                }
                dfm[2 * k * hid + c] += dg;
                dfm[2 * k * hid + hid + c] += db;
            }
        }
        cols.resize(cin * 9 * n, 0.0);
        dcols.resize(cin * 9 * n, 0.0);
        if let Some(g) = grad.as_mut() {
            im2col(&tape.hs[k], cin, b, height, width, &mut cols);
            gemm(hid, n, cin * 9, &dz, false, &cols, true, 1.0, &mut g[slot.weight.clone()]);
            let gb = &mut g[slot.bias.clone()];
            for c in 0..hid {
                gb[c] += dz[c * n..(c + 1) * n].iter().sum::<f64>();
            }
        }
        gemm(cin * 9, hid, n, &p[slot.weight.clone()], true, &dz, false, 0.0, &mut dcols);
        let mut dprev = vec![0.0; cin * n];
        col2im(&dcols, cin, b, height, width, &mut dprev);
        if k > 0 {
            for (d, r) in dprev.iter_mut().zip(&dh) {
                *d += r;
            }
            dh = dprev;
        } else {
            d_input = dprev;
        }
    }

    if let Some(g) = grad.as_mut() {
        for bi in 0..b {
            let dfm = &d_film[bi];
            gemm(n_film, 1, e, dfm, false, &tape.e1[bi], false, 1.0, &mut g[layout.t_w2.clone()]);
            for (gb, d) in g[layout.t_b2.clone()].iter_mut().zip(dfm) {
                *gb += d;
            }
            let mut de1 = vec![0.0; e];
            gemm(e, n_film, 1, &p[layout.t_w2.clone()], true, dfm, false, 0.0, &mut de1);
            let dpre: Vec<f64> = de1
                .iter()
                .zip(&tape.pre1[bi])
                .map(|(d, &x)| d * gelu_grad(x))
                .collect();
            gemm(e, 1, e, &dpre, false, &tape.emb[bi], false, 1.0, &mut g[layout.t_w1.clone()]);
            for (gb, d) in g[layout.t_b1.clone()].iter_mut().zip(&dpre) {
                *gb += d;
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter gradient".into()));
        }
    }

    Ok(Gradients {
        params: grad,
        input: to_sample_major(&d_input, b, spec.in_channels, hw),
    })
}

/// Loss closure: maps the sample-major output to `(loss, ∂loss/∂output)`.
pub type LossFn<'a> = dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

/// Loss value and exact parameter gradient for a batch.
pub fn param_grad(
    params: &NetParams,
    loss: &LossFn<'_>,
    inputs: &[f64],
    times: &[f64],
    height: usize,
    width: usize,
) -> Result<(f64, Vec<f64>)> {
    let (out, tape) = forward_batch(params, inputs, times, height, width)?;
    let (l, d_out) = loss(&out)?;
    if !l.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {l}")));
    }
    let g = backward(params, &tape, &d_out, true)?;
    Ok((l, g.params.expect("requested")))
}

/// Loss value and exact gradient with respect to the network input.
pub fn input_grad(
    params: &NetParams,
    loss: &LossFn<'_>,
    input: &[f64],
    t: f64,
    height: usize,
    width: usize,
) -> Result<(f64, Vec<f64>)> {
    let (out, tape) = forward_batch(params, input, &[t], height, width)?;
    let (l, d_out) = loss(&out)?;
    if !l.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {l}")));
    }
    let g = backward(params, &tape, &d_out, false)?;
    Ok((l, g.input))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam state has {} entries, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `floor · base` over the run.
    Cosine { floor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { floor } => {
                let frac = if total <= 1 {
                    0.0
                } else {
                    step as f64 / (total - 1) as f64
                };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                base * (floor + (1.0 - floor) * c)
            }
        }
    }
}

/// Functional form: returns the updated state and parameters.
pub fn adam_step(
    state: &AdamState,
    params: &NetParams,
    grads: &[f64],
) -> Result<(AdamState, NetParams)> {
    let mut s = state.clone();
    let mut p = params.clone();
    s.step(&mut p.data, grads)?;
    Ok((s, p))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CKPT_MAGIC: &[u8; 4] = b"OAMW";
pub const CKPT_VERSION: u16 = 1;

fn head_code(h: OutputHead) -> u8 {
    match h {
        OutputHead::SoftmaxOverChannels => 0,
        OutputHead::Linear => 1,
    }
}

fn scheme_code(s: InitScheme) -> u8 {
    match s {
        InitScheme::HeNormalZeroHead => 0,
        InitScheme::HeNormalFull => 1,
    }
}

/// Layout: magic, version u16, in/hidden/out/n_blocks/time_embed_dim as
/// u32, head u8, init scheme u8, init seed u64, parameter count u64,
/// then the f64 payload in [`Layout`] order. All little-endian.
pub fn encode_checkpoint(params: &NetParams) -> Vec<u8> {
    let s = &params.spec;
    let mut buf = Vec::with_capacity(48 + 8 * params.data.len());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for v in [
        s.in_channels,
        s.hidden_channels,
        s.out_channels,
        s.n_blocks,
        s.time_embed_dim,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.push(head_code(s.output_head));
    buf.push(scheme_code(params.init.scheme));
    buf.extend_from_slice(&params.init.seed.to_le_bytes());
    buf.extend_from_slice(&(params.data.len() as u64).to_le_bytes());
    for v in &params.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetParams> {
    const HEADER: usize = 4 + 2 + 5 * 4 + 1 + 1 + 8 + 8;
    if bytes.len() < HEADER {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    if &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let output_head = match bytes[26] {
        0 => OutputHead::SoftmaxOverChannels,
        1 => OutputHead::Linear,
        h => return Err(Error::Format(format!("unknown head code {h}"))),
    };
    let scheme = match bytes[27] {
        0 => InitScheme::HeNormalZeroHead,
        1 => InitScheme::HeNormalFull,
        s => return Err(Error::Format(format!("unknown init scheme {s}"))),
    };
    let spec = ConvNetSpec {
        in_channels: u32_at(6),
        hidden_channels: u32_at(10),
        out_channels: u32_at(14),
        n_blocks: u32_at(18),
        time_embed_dim: u32_at(22),
        output_head,
    };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    let seed = u64_at(28);
    let count = u64_at(36) as usize;
    if count != spec.n_params() {
        return Err(Error::Format(format!(
            "checkpoint declares {count} parameters, spec needs {}",
            spec.n_params()
        )));
    }
    let payload = &bytes[HEADER..];
    if payload.len() != 8 * count {
        return Err(Error::Format("truncated checkpoint payload".into()));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(NetParams {
        spec,
        data,
        init: InitRecord { seed, scheme },
    })
}

pub fn save_checkpoint(path: &Path, params: &NetParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<NetParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
