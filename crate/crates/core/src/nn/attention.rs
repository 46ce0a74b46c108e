//! Windowed multi-head self-attention and the pre-norm transformer block
//! built on it (regular and cyclically shifted window partitions).

use super::gemm::{gemm, Operand};
use super::grid::FeatureGrid;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Row-major `rows × cols` matrix of token features.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokens {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tokens {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `C × H × W` grid to `(H·W) × C` tokens.
    pub fn from_grid(g: &FeatureGrid) -> Self {
        let n = g.plane_len();
        let mut t = Self::zeros(n, g.channels);
        for c in 0..g.channels {
            for (p, &v) in g.channel(c).iter().enumerate() {
                t.data[p * g.channels + c] = v;
            }
        }
        t
    }

    pub fn to_grid(&self, height: usize, width: usize, stride: usize) -> FeatureGrid {
        let mut g = FeatureGrid::zeros(self.cols, height, width, stride);
        let n = height * width;
        for p in 0..n {
            for c in 0..self.cols {
                g.data[c * n + p] = self.data[p * self.cols + c];
            }
        }
        g
    }
}

/// `y = x · Wᵀ + b` with `W` stored `[out, in]`.
fn linear(x: &Tokens, w: &[f64], b: &[f64]) -> Tokens {
    let out = b.len();
    let mut y = Tokens::zeros(x.rows, out);
    for r in 0..x.rows {
        y.data[r * out..(r + 1) * out].copy_from_slice(b);
    }
    gemm(x.rows, x.cols, out, Operand::n(&x.data, x.cols), Operand::t(w, x.cols), 1.0, &mut y.data);
    y
}

fn linear_backward(x: &Tokens, w: &[f64], dy: &Tokens, dw: &mut [f64], db: &mut [f64]) -> Tokens {
    let out = dy.cols;
    for r in 0..dy.rows {
        for (g, v) in db.iter_mut().zip(dy.row(r)) {
            *g += v;
        }
    }
    gemm(out, dy.rows, x.cols, Operand::t(&dy.data, out), Operand::n(&x.data, x.cols), 1.0, dw);
    let mut dx = Tokens::zeros(x.rows, x.cols);
    gemm(dy.rows, out, x.cols, Operand::n(&dy.data, out), Operand::n(w, x.cols), 0.0, &mut dx.data);
    dx
}

#[derive(Clone, Debug)]
struct NormCache {
    xhat: Tokens,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Tokens, gamma: &[f64], beta: &[f64]) -> (Tokens, NormCache) {
    let c = x.cols;
    let mut y = Tokens::zeros(x.rows, c);
    let mut xhat = Tokens::zeros(x.rows, c);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat.data[r * c + j] = h;
            y.data[r * c + j] = h * gamma[j] + beta[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(cache: &NormCache, gamma: &[f64], dy: &Tokens, dgamma: &mut [f64], dbeta: &mut [f64]) -> Tokens {
    let c = dy.cols;
    let mut dx = Tokens::zeros(dy.rows, c);
    let mut dxhat = vec![0.0; c];
    for r in 0..dy.rows {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..c {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        for j in 0..c {
            dx.data[r * c + j] = cache.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + v * pdf
}

/// Token reordering that applies the cyclic shift and window partition in one
/// gather: position `p` of the windowed sequence reads token `perm[p]`.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
    perm: Vec<usize>,
    region: Vec<u8>,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize, shifted: bool) -> Result<Self> {
        if window == 0 || height % window != 0 || width % window != 0 {
            return Err(Error::contract(format!(
                "window {window} does not tile a {height}x{width} token grid"
            )));
        }
        let shift = if shifted { window / 2 } else { 0 };
        let mut perm = Vec::with_capacity(height * width);
        let mut region = Vec::with_capacity(height * width);
        let band = |v: usize, extent: usize| -> u8 {
            if v < extent - window {
                0
            } else if v < extent - shift {
                1
            } else {
                2
            }
        };
        for wy in 0..height / window {
            for wx in 0..width / window {
                for iy in 0..window {
                    for ix in 0..window {
                        let (y, x) = (wy * window + iy, wx * window + ix);
                        perm.push(((y + shift) % height) * width + (x + shift) % width);
                        region.push(if shift > 0 { band(y, height) * 3 + band(x, width) } else { 0 });
                    }
                }
            }
        }
        Ok(Self {
            height,
            width,
            window,
            shift,
            perm,
            region,
        })
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    /// Shift + partition.
    pub fn gather(&self, x: &Tokens) -> Tokens {
        let mut out = Tokens::zeros(x.rows, x.cols);
        for (p, &src) in self.perm.iter().enumerate() {
            out.data[p * x.cols..(p + 1) * x.cols].copy_from_slice(x.row(src));
        }
        out
    }

    /// Inverse of [`gather`](Self::gather): un-partition + reverse shift.
    pub fn scatter(&self, x: &Tokens) -> Tokens {
        let mut out = Tokens::zeros(x.rows, x.cols);
        for (p, &dst) in self.perm.iter().enumerate() {
            out.data[dst * x.cols..(dst + 1) * x.cols].copy_from_slice(x.row(p));
        }
        out
    }

    fn masked(&self, a: usize, b: usize) -> bool {
        self.region[a] != self.region[b]
    }
}

/// Learnable weights of one attention block. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct SwinBlockWeights {
    pub norm1_weight: Vec<f64>,
    pub norm1_bias: Vec<f64>,
    pub qkv_weight: Vec<f64>,
    pub qkv_bias: Vec<f64>,
    /// `[heads, (2w-1)²]` relative position bias table.
    pub relative_position_bias: Vec<f64>,
    pub proj_weight: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub norm2_weight: Vec<f64>,
    pub norm2_bias: Vec<f64>,
    pub fc1_weight: Vec<f64>,
    pub fc1_bias: Vec<f64>,
    pub fc2_weight: Vec<f64>,
    pub fc2_bias: Vec<f64>,
}

/// Parameter names relative to a block prefix, in the order of the
/// [`SwinBlockWeights`] fields, with their shapes.
pub fn swin_param_shapes(dim: usize, heads: usize, window: usize, hidden: usize) -> Vec<(&'static str, Vec<usize>)> {
    let table = (2 * window - 1) * (2 * window - 1);
    vec![
        ("norm1.weight", vec![dim]),
        ("norm1.bias", vec![dim]),
        ("attn.qkv.weight", vec![3 * dim, dim]),
        ("attn.qkv.bias", vec![3 * dim]),
        ("attn.relative_position_bias", vec![heads, table]),
        ("attn.proj.weight", vec![dim, dim]),
        ("attn.proj.bias", vec![dim]),
        ("norm2.weight", vec![dim]),
        ("norm2.bias", vec![dim]),
        ("mlp.fc1.weight", vec![hidden, dim]),
        ("mlp.fc1.bias", vec![hidden]),
        ("mlp.fc2.weight", vec![dim, hidden]),
        ("mlp.fc2.bias", vec![dim]),
    ]
}

impl SwinBlockWeights {
    pub fn from_parts(mut parts: Vec<Vec<f64>>) -> Self {
        assert_eq!(parts.len(), 13);
        let mut next = || parts.remove(0);
        Self {
            norm1_weight: next(),
            norm1_bias: next(),
            qkv_weight: next(),
            qkv_bias: next(),
            relative_position_bias: next(),
            proj_weight: next(),
            proj_bias: next(),
            norm2_weight: next(),
            norm2_bias: next(),
            fc1_weight: next(),
            fc1_bias: next(),
            fc2_weight: next(),
            fc2_bias: next(),
        }
    }

    pub fn into_parts(self) -> Vec<Vec<f64>> {
        vec![
            self.norm1_weight,
            self.norm1_bias,
            self.qkv_weight,
            self.qkv_bias,
            self.relative_position_bias,
            self.proj_weight,
            self.proj_bias,
            self.norm2_weight,
            self.norm2_bias,
            self.fc1_weight,
            self.fc1_bias,
            self.fc2_weight,
            self.fc2_bias,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_parts(self.clone().into_parts().into_iter().map(|v| vec![0.0; v.len()]).collect())
    }
}

/// Geometry of one attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
    /// When false, shifted windows attend across wrapped-around regions.
    pub mask_shifted: bool,
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::contract(format!(
                "{} heads do not divide {} channels",
                self.heads, self.dim
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[heads, n, n]` bias per query/key pair, expanded from the table.
    fn bias_matrix(&self, table: &[f64]) -> Vec<f64> {
        let n = self.window * self.window;
        let size = (2 * self.window - 1).pow(2);
        let mut out = Vec::with_capacity(self.heads * n * n);
        for h in 0..self.heads {
            for i in 0..n {
                for j in 0..n {
                    out.push(table[h * size + self.rel_index(i, j)]);
                }
            }
        }
        out
    }

    /// `[n, n]` table index per query/key pair.
    fn rel_indices(&self) -> Vec<usize> {
        let n = self.window * self.window;
        (0..n * n).map(|p| self.rel_index(p / n, p % n)).collect()
    }

    fn rel_index(&self, a: usize, b: usize) -> usize {
        let w = self.window;
        let (ay, ax) = (a / w, a % w);
        let (by, bx) = (b / w, b % w);
        (ay + w - 1 - by) * (2 * w - 1) + (ax + w - 1 - bx)
    }
}

/// Cached state of [`window_attention`] needed for its backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    layout: WindowLayout,
    /// Windowed-order block input.
    input: Tokens,
    qkv: Tokens,
    /// `[window, head, query, key]` softmax weights.
    pub weights: Vec<f64>,
    context: Tokens,
}

/// Copies columns `off..off + dh` of rows `base..base + n` into `dst` (`n × dh`).
fn load_head(x: &Tokens, base: usize, off: usize, dh: usize, dst: &mut [f64]) {
    for (i, d) in dst.chunks_exact_mut(dh).enumerate() {
        d.copy_from_slice(&x.row(base + i)[off..off + dh]);
    }
}

/// Inverse of [`load_head`].
fn store_head(src: &[f64], base: usize, off: usize, dh: usize, x: &mut Tokens) {
    let cols = x.cols;
    for (i, s) in src.chunks_exact(dh).enumerate() {
        let r = (base + i) * cols + off;
        x.data[r..r + dh].copy_from_slice(s);
    }
}

/// Multi-head self-attention inside each (optionally shifted) window,
/// followed by the output projection. `x` holds `height·width` tokens.
pub fn window_attention(x: &Tokens, height: usize, width: usize, spec: &AttentionSpec, w: &SwinBlockWeights) -> Result<(Tokens, AttentionCache)> {
    spec.validate()?;
    if x.cols != spec.dim || x.rows != height * width {
        return Err(Error::contract(format!(
            "attention expects {}x{} tokens, got {}x{}",
            height * width,
            spec.dim,
            x.rows,
            x.cols
        )));
    }
    let layout = WindowLayout::new(height, width, spec.window, spec.shifted)?;
    let input = layout.gather(x);
    let qkv = linear(&input, &w.qkv_weight, &w.qkv_bias);
    let (c, dh, heads) = (spec.dim, spec.head_dim(), spec.heads);
    let n = layout.tokens_per_window();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = vec![0.0; layout.num_windows() * heads * n * n];
    let mut context = Tokens::zeros(x.rows, c);
    let bias = spec.bias_matrix(&w.relative_position_bias);
    let masking = spec.mask_shifted && layout.shift > 0;
    let mut logits = vec![0.0; n];
    let (mut q, mut k, mut v) = (vec![0.0; n * dh], vec![0.0; n * dh], vec![0.0; n * dh]);
    let mut mask = vec![false; n * n];
    for win in 0..layout.num_windows() {
        let base = win * n;
        if masking {
            for (p, m) in mask.iter_mut().enumerate() {
                *m = layout.masked(base + p / n, base + p % n);
            }
        }
        for h in 0..heads {
            let bias = &bias[h * n * n..(h + 1) * n * n];
            let a_off = (win * heads + h) * n * n;
            load_head(&qkv, base, h * dh, dh, &mut q);
            load_head(&qkv, base, c + h * dh, dh, &mut k);
            load_head(&qkv, base, 2 * c + h * dh, dh, &mut v);
            for (i, qi) in q.chunks_exact(dh).enumerate() {
                let mut max = f64::NEG_INFINITY;
                for (j, kj) in k.chunks_exact(dh).enumerate() {
                    if masking && mask[i * n + j] {
                        logits[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    logits[j] = dot * scale + bias[i * n + j];
                    max = max.max(logits[j]);
                }
                let row = &mut weights[a_off + i * n..a_off + (i + 1) * n];
                let mut z = 0.0;
                for (r, &l) in row.iter_mut().zip(&logits) {
                    *r = if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() };
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                let ctx = &mut context.data[(base + i) * c + h * dh..(base + i) * c + (h + 1) * dh];
                for (&a, vj) in row.iter().zip(v.chunks_exact(dh)) {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, vv) in ctx.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
        }
    }
    let projected = linear(&context, &w.proj_weight, &w.proj_bias);
    let out = layout.scatter(&projected);
    Ok((
        out,
        AttentionCache {
            layout,
            input,
            qkv,
            weights,
            context,
        },
    ))
}

pub fn window_attention_backward(cache: &AttentionCache, spec: &AttentionSpec, w: &SwinBlockWeights, dy: &Tokens, grads: &mut SwinBlockWeights) -> Tokens {
    let layout = &cache.layout;
    let d_proj = layout.gather(dy);
    let d_context = linear_backward(&cache.context, &w.proj_weight, &d_proj, &mut grads.proj_weight, &mut grads.proj_bias);
    let (c, dh, heads) = (spec.dim, spec.head_dim(), spec.heads);
    let n = layout.tokens_per_window();
    let table = (2 * spec.window - 1).pow(2);
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = &cache.qkv;
    let mut d_qkv = Tokens::zeros(qkv.rows, qkv.cols);
    let mut d_a = vec![0.0; n];
    let rel = spec.rel_indices();
    let (mut q, mut k, mut v) = (vec![0.0; n * dh], vec![0.0; n * dh], vec![0.0; n * dh]);
    let (mut dq, mut dk, mut dv) = (vec![0.0; n * dh], vec![0.0; n * dh], vec![0.0; n * dh]);
    for win in 0..layout.num_windows() {
        let base = win * n;
        for h in 0..heads {
            let a_off = (win * heads + h) * n * n;
            load_head(qkv, base, h * dh, dh, &mut q);
            load_head(qkv, base, c + h * dh, dh, &mut k);
            load_head(qkv, base, 2 * c + h * dh, dh, &mut v);
            dq.fill(0.0);
            dk.fill(0.0);
            dv.fill(0.0);
            let bias_grad = &mut grads.relative_position_bias[h * table..(h + 1) * table];
            for i in 0..n {
                let row = &cache.weights[a_off + i * n..a_off + (i + 1) * n];
                let dctx = &d_context.row(base + i)[h * dh..(h + 1) * dh];
                let mut dot_sum = 0.0;
                for j in 0..n {
                    if row[j] == 0.0 {
                        d_a[j] = 0.0;
                        continue;
                    }
                    d_a[j] = dctx.iter().zip(&v[j * dh..(j + 1) * dh]).map(|(a, b)| a * b).sum();
                    dot_sum += d_a[j] * row[j];
                    // dV_j += A_ij · dctx_i
                    for (g, d) in dv[j * dh..(j + 1) * dh].iter_mut().zip(dctx) {
                        *g += row[j] * d;
                    }
                }
                let (qi, dqi) = (&q[i * dh..(i + 1) * dh], &mut dq[i * dh..(i + 1) * dh]);
                for j in 0..n {
                    if row[j] == 0.0 {
                        continue;
                    }
                    let dl = row[j] * (d_a[j] - dot_sum);
                    bias_grad[rel[i * n + j]] += dl;
                    let gs = dl * scale;
                    let (kj, dkj) = (&k[j * dh..(j + 1) * dh], &mut dk[j * dh..(j + 1) * dh]);
                    for t in 0..dh {
                        dqi[t] += gs * kj[t];
                        dkj[t] += gs * qi[t];
                    }
                }
            }
            store_head(&dq, base, h * dh, dh, &mut d_qkv);
            store_head(&dk, base, c + h * dh, dh, &mut d_qkv);
            store_head(&dv, base, 2 * c + h * dh, dh, &mut d_qkv);
        }
    }
    let d_input = linear_backward(&cache.input, &w.qkv_weight, &d_qkv, &mut grads.qkv_weight, &mut grads.qkv_bias);
    layout.scatter(&d_input)
}

/// Cached state of [`swin_block`].
#[derive(Clone, Debug)]
pub struct SwinBlockCache {
    norm1: NormCache,
    attention: AttentionCache,
    norm2: NormCache,
    normed2: Tokens,
    hidden: Tokens,
    activated: Tokens,
}

/// `x + Attn(LN(x))` followed by `x + MLP(LN(x))` with a GELU hidden layer.
pub fn swin_block(x: &Tokens, height: usize, width: usize, spec: &AttentionSpec, w: &SwinBlockWeights) -> Result<(Tokens, SwinBlockCache)> {
    let (n1, norm1) = layer_norm(x, &w.norm1_weight, &w.norm1_bias);
    let (attn, attention) = window_attention(&n1, height, width, spec, w)?;
    let mut x1 = x.clone();
    for (a, b) in x1.data.iter_mut().zip(&attn.data) {
        *a += b;
    }
    let (normed2, norm2) = layer_norm(&x1, &w.norm2_weight, &w.norm2_bias);
    let hidden = linear(&normed2, &w.fc1_weight, &w.fc1_bias);
    let mut activated = hidden.clone();
    for v in &mut activated.data {
        *v = gelu(*v);
    }
    let mlp = linear(&activated, &w.fc2_weight, &w.fc2_bias);
    for (a, b) in x1.data.iter_mut().zip(&mlp.data) {
        *a += b;
    }
    Ok((
        x1,
        SwinBlockCache {
            norm1,
            attention,
            norm2,
            normed2,
            hidden,
            activated,
        },
    ))
}

pub fn swin_block_backward(cache: &SwinBlockCache, spec: &AttentionSpec, w: &SwinBlockWeights, dy: &Tokens, grads: &mut SwinBlockWeights) -> Tokens {
    let d_act = linear_backward(&cache.activated, &w.fc2_weight, dy, &mut grads.fc2_weight, &mut grads.fc2_bias);
    let mut d_hidden = d_act;
    for (g, &h) in d_hidden.data.iter_mut().zip(&cache.hidden.data) {
        *g *= gelu_grad(h);
    }
    let d_n2 = linear_backward(&cache.normed2, &w.fc1_weight, &d_hidden, &mut grads.fc1_weight, &mut grads.fc1_bias);
    let d_x1_norm = layer_norm_backward(&cache.norm2, &w.norm2_weight, &d_n2, &mut grads.norm2_weight, &mut grads.norm2_bias);
    let mut d_x1 = dy.clone();
    for (a, b) in d_x1.data.iter_mut().zip(&d_x1_norm.data) {
        *a += b;
    }
    let d_n1 = window_attention_backward(&cache.attention, spec, w, &d_x1, grads);
    let d_x_norm = layer_norm_backward(&cache.norm1, &w.norm1_weight, &d_n1, &mut grads.norm1_weight, &mut grads.norm1_bias);
    for (a, b) in d_x1.data.iter_mut().zip(&d_x_norm.data) {
        *a += b;
    }
    d_x1
}
