//! Forward-only attention building blocks at toy scale: multi-head
//! self-attention with additive bias, (shifted) window partitioning, patch
//! embedding and per-timestep cross-attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{shape_check, Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        shape_check(data.len() == n, || {
            format!("shape {shape:?} needs {n} values, got {}", data.len())
        })?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite tensor value at index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform values in `[-scale, scale)`.
    pub fn random(shape: Vec<usize>, scale: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(-scale..scale))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    fn dims<const N: usize>(&self, what: &str) -> Result<[usize; N]> {
        self.shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::ShapeMismatch(format!("{what}: expected rank {N}, got shape {:?}", self.shape)))
    }

    /// `self (n x k) * other (k x m)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [n, k] = self.dims::<2>("matmul lhs")?;
        let [k2, m] = other.dims::<2>("matmul rhs")?;
        shape_check(k == k2, || format!("matmul inner dims differ: {k} vs {k2}"))?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                for j in 0..m {
                    out[i * m + j] += a * other.data[p * m + j];
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Tensor> {
        let [n, d] = self.dims::<2>("permute_rows")?;
        shape_check(perm.len() == n, || {
            format!("permutation of {} rows for {n}", perm.len())
        })?;
        let data = perm
            .iter()
            .flat_map(|&p| self.data[p * d..(p + 1) * d].iter().copied())
            .collect();
        Ok(Tensor {
            shape: vec![n, d],
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub model_dim: usize,
    pub window_size: usize,
    pub shift: usize,
}

impl Default for AttentionConfig {
    /// First-stage sizes: 3 heads, 8x8 windows on a 64x64 embedded map.
    fn default() -> Self {
        Self {
            num_heads: 3,
            model_dim: 24,
            window_size: 8,
            shift: 0,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be positive".into()));
        }
        if self.shift != 0 && self.shift != self.window_size / 2 {
            return Err(Error::Config(format!(
                "shift must be 0 or window_size/2 = {}, got {}",
                self.window_size / 2,
                self.shift
            )));
        }
        Ok(())
    }

    fn validate_map(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        if h % self.window_size != 0 || w % self.window_size != 0 {
            return Err(Error::Config(format!(
                "window {} does not divide a {h}x{w} map",
                self.window_size
            )));
        }
        Ok(())
    }
}

/// Per-head attention probabilities `softmax(Q K^T / sqrt(d) + B)`, shaped
/// heads x queries x keys.
pub fn attention_probs(q: &Tensor, k: &Tensor, bias: Option<&Tensor>, cfg: &AttentionConfig) -> Result<Tensor> {
    cfg.validate()?;
    let [tq, dq] = q.dims::<2>("queries")?;
    let [tk, dk] = k.dims::<2>("keys")?;
    shape_check(dq == cfg.model_dim && dk == cfg.model_dim, || {
        format!("q/k widths {dq}/{dk} differ from model_dim {}", cfg.model_dim)
    })?;
    let heads = cfg.num_heads;
    if let Some(b) = bias {
        shape_check(b.shape() == [heads, tq, tk], || {
            format!("bias shape {:?}, expected {:?}", b.shape(), [heads, tq, tk])
        })?;
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; heads * tq * tk];
    for h in 0..heads {
        for i in 0..tq {
            let row = &mut out[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let qi = &q.data[i * cfg.model_dim + h * dh..i * cfg.model_dim + (h + 1) * dh];
            for (j, slot) in row.iter_mut().enumerate() {
                let kj = &k.data[j * cfg.model_dim + h * dh..j * cfg.model_dim + (h + 1) * dh];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                *slot = dot * scale + bias.map_or(0.0, |b| b.data[(h * tq + i) * tk + j]);
            }
            softmax_in_place(row);
        }
    }
    Ok(Tensor {
        shape: vec![heads, tq, tk],
        data: out,
    })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Multi-head attention: per head `softmax(Q K^T / sqrt(d) + B) V`, heads
/// concatenated and multiplied by `w_o` (identity when `None`).
pub fn mhsa(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    cfg: &AttentionConfig,
    w_o: Option<&Tensor>,
) -> Result<Tensor> {
    let probs = attention_probs(q, k, bias, cfg)?;
    let [tk, dv] = v.dims::<2>("values")?;
    shape_check(tk == k.shape[0] && dv == cfg.model_dim, || {
        format!("values shape {:?} does not match keys {:?}", v.shape, k.shape)
    })?;
    let tq = q.shape[0];
    let dh = cfg.head_dim();
    let d = cfg.model_dim;
    let mut out = vec![0.0; tq * d];
    for h in 0..cfg.num_heads {
        for i in 0..tq {
            let p = &probs.data[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &pij) in p.iter().enumerate() {
                for (x, vv) in o.iter_mut().zip(&v.data[j * d + h * dh..j * d + (h + 1) * dh]) {
                    *x += pij * vv;
                }
            }
        }
    }
    let concat = Tensor {
        shape: vec![tq, d],
        data: out,
    };
    match w_o {
        Some(w) => concat.matmul(w),
        None => Ok(concat),
    }
}

fn hwc(x: &Tensor, what: &str) -> Result<[usize; 3]> {
    x.dims::<3>(what)
}

/// Re-tiles an H x W x C map into (H*W/M^2) windows of M^2 tokens, windows
/// in row-major order, tokens row-major within each window.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let [h, w, c] = hwc(x, "window_partition")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Config(format!("window {window} does not divide a {h}x{w} map")));
    }
    let (nh, nw) = (h / window, w / window);
    let mut data = Vec::with_capacity(x.data.len());
    for wr in 0..nh {
        for wc in 0..nw {
            for r in 0..window {
                let row = wr * window + r;
                let start = (row * w + wc * window) * c;
                data.extend_from_slice(&x.data[start..start + window * c]);
            }
        }
    }
    Ok(Tensor {
        shape: vec![nh * nw, window * window, c],
        data,
    })
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, window: usize, h: usize, w: usize) -> Result<Tensor> {
    let [n, t, c] = windows.dims::<3>("window_reverse")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Config(format!("window {window} does not divide a {h}x{w} map")));
    }
    shape_check(n == (h / window) * (w / window) && t == window * window, || {
        format!("{n} windows of {t} tokens do not tile {h}x{w} with window {window}")
    })?;
    let nw = w / window;
    let mut data = vec![0.0; h * w * c];
    for (i, chunk) in windows.data.chunks(t * c).enumerate() {
        let (wr, wc) = (i / nw, i % nw);
        for r in 0..window {
            let dst = ((wr * window + r) * w + wc * window) * c;
            data[dst..dst + window * c].copy_from_slice(&chunk[r * window * c..(r + 1) * window * c]);
        }
    }
    Ok(Tensor {
        shape: vec![h, w, c],
        data,
    })
}

fn roll(x: &Tensor, dr: usize, dc: usize) -> Result<Tensor> {
    let [h, w, c] = hwc(x, "cyclic_shift")?;
    let mut data = Vec::with_capacity(x.data.len());
    for r in 0..h {
        let src_r = (r + dr) % h;
        for col in 0..w {
            let src = (src_r * w + (col + dc) % w) * c;
            data.extend_from_slice(&x.data[src..src + c]);
        }
    }
    Ok(Tensor {
        shape: vec![h, w, c],
        data,
    })
}

/// Toroidal roll by `(-shift, -shift)`: output `(r, c)` reads input
/// `(r + shift, c + shift)` modulo the map size.
pub fn cyclic_shift(x: &Tensor, shift: usize) -> Result<Tensor> {
    let [h, w, _] = hwc(x, "cyclic_shift")?;
    roll(x, shift % h, shift % w)
}

/// Inverse of [`cyclic_shift`].
pub fn cyclic_unshift(x: &Tensor, shift: usize) -> Result<Tensor> {
    let [h, w, _] = hwc(x, "cyclic_unshift")?;
    roll(x, (h - shift % h) % h, (w - shift % w) % w)
}

/// Additive value separating tokens from different regions after a shift.
pub const MASK_VALUE: f64 = -100.0;

/// Attention mask for shifted windows, shaped windows x M^2 x M^2: tokens
/// that were not neighbours before the roll get [`MASK_VALUE`].
pub fn shifted_window_mask(h: usize, w: usize, window: usize, shift: usize) -> Result<Tensor> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Config(format!("window {window} does not divide a {h}x{w} map")));
    }
    let band = |i: usize, n: usize| -> usize {
        if shift == 0 || i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let regions = Tensor::from_fn(vec![h, w, 1], |i| (band(i / w, h) * 3 + band(i % w, w)) as f64);
    let labels = window_partition(&regions, window)?;
    let t = window * window;
    let n = labels.shape[0];
    let mut data = vec![0.0; n * t * t];
    for win in 0..n {
        let l = &labels.data[win * t..(win + 1) * t];
        for i in 0..t {
            for j in 0..t {
                if l[i] != l[j] {
                    data[(win * t + i) * t + j] = MASK_VALUE;
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, t, t],
        data,
    })
}

/// Patch side (and stride) of the embedding.
pub const PATCH: usize = 4;

/// Non-overlapping 4x4 patch projection: `kernel` is 4 x 4 x C x D, the
/// output is H/4 x W/4 x D.
pub fn patch_embed(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [h, w, c] = hwc(x, "patch_embed input")?;
    let [kh, kw, kc, d] = kernel.dims::<4>("patch_embed kernel")?;
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::Config(format!(
            "{h}x{w} input is not divisible into 4x4 patches"
        )));
    }
    shape_check(kh == PATCH && kw == PATCH && kc == c, || {
        format!("kernel shape {:?}, expected [4, 4, {c}, D]", kernel.shape)
    })?;
    let (oh, ow) = (h / PATCH, w / PATCH);
    let mut out = vec![0.0; oh * ow * d];
    for orow in 0..oh {
        for ocol in 0..ow {
            let o = &mut out[(orow * ow + ocol) * d..(orow * ow + ocol + 1) * d];
            for pr in 0..PATCH {
                for pc in 0..PATCH {
                    let px = ((orow * PATCH + pr) * w + ocol * PATCH + pc) * c;
                    for ch in 0..c {
                        let xv = x.data[px + ch];
                        if xv == 0.0 {
                            continue;
                        }
                        let k = &kernel.data[((pr * PATCH + pc) * c + ch) * d..((pr * PATCH + pc) * c + ch + 1) * d];
                        for (acc, kv) in o.iter_mut().zip(k) {
                            *acc += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![oh, ow, d],
        data: out,
    })
}

/// Attention with Q taken from `query_feats` and K = V = `motion_feats`.
pub fn cross_attention(
    query_feats: &Tensor,
    motion_feats: &Tensor,
    cfg: &AttentionConfig,
    w_o: Option<&Tensor>,
) -> Result<Tensor> {
    mhsa(query_feats, motion_feats, motion_feats, None, cfg, w_o)
}

/// Projected attention layer with a learned relative-position bias table of
/// `(2M - 1)^2` entries per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub cfg: AttentionConfig,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub bias_table: Tensor,
}

impl AttentionLayer {
    pub fn new(cfg: AttentionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let span = 2 * cfg.window_size - 1;
        Ok(Self {
            cfg,
            w_q: Tensor::random(vec![d, d], scale, &mut rng),
            w_k: Tensor::random(vec![d, d], scale, &mut rng),
            w_v: Tensor::random(vec![d, d], scale, &mut rng),
            w_o: Tensor::random(vec![d, d], scale, &mut rng),
            bias_table: Tensor::random(vec![cfg.num_heads, span * span], 0.02, &mut rng),
        })
    }

    /// Identity projections and a zero bias table.
    pub fn identity(cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let span = 2 * cfg.window_size - 1;
        Ok(Self {
            cfg,
            w_q: Tensor::identity(d),
            w_k: Tensor::identity(d),
            w_v: Tensor::identity(d),
            w_o: Tensor::identity(d),
            bias_table: Tensor::zeros(vec![cfg.num_heads, span * span]),
        })
    }

    /// Dense heads x M^2 x M^2 bias gathered from the table by the relative
    /// offset between token positions inside a window.
    pub fn relative_position_bias(&self) -> Tensor {
        let m = self.cfg.window_size;
        let t = m * m;
        let span = 2 * m - 1;
        let heads = self.cfg.num_heads;
        let mut data = vec![0.0; heads * t * t];
        for h in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    let dr = i / m + m - 1 - j / m;
                    let dc = i % m + m - 1 - j % m;
                    data[(h * t + i) * t + j] = self.bias_table.data[h * span * span + dr * span + dc];
                }
            }
        }
        Tensor {
            shape: vec![heads, t, t],
            data,
        }
    }

    /// Attention of `x_q` over `x_kv` through this layer's projections.
    pub fn forward(&self, x_q: &Tensor, x_kv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let q = x_q.matmul(&self.w_q)?;
        let k = x_kv.matmul(&self.w_k)?;
        let v = x_kv.matmul(&self.w_v)?;
        mhsa(&q, &k, &v, bias, &self.cfg, Some(&self.w_o))
    }

    /// Window (or shifted-window) self-attention over an H x W x C map.
    pub fn window_forward(&self, x: &Tensor) -> Result<Tensor> {
        let [h, w, c] = hwc(x, "window attention")?;
        self.cfg.validate_map(h, w)?;
        shape_check(c == self.cfg.model_dim, || {
            format!("map has {c} channels, layer expects {}", self.cfg.model_dim)
        })?;
        let m = self.cfg.window_size;
        let t = m * m;
        let shift = self.cfg.shift;
        let shifted = if shift > 0 { cyclic_shift(x, shift)? } else { x.clone() };
        let windows = window_partition(&shifted, m)?;
        let rel = self.relative_position_bias();
        let mask = (shift > 0).then(|| shifted_window_mask(h, w, m, shift)).transpose()?;
        let heads = self.cfg.num_heads;
        let mut out = Vec::with_capacity(windows.data.len());
        for win in 0..windows.shape[0] {
            let tokens = Tensor {
                shape: vec![t, c],
                data: windows.data[win * t * c..(win + 1) * t * c].to_vec(),
            };
            let mut bias = rel.clone();
            if let Some(mask) = &mask {
                let m = &mask.data[win * t * t..(win + 1) * t * t];
                for h in 0..heads {
                    for (b, mv) in bias.data[h * t * t..(h + 1) * t * t].iter_mut().zip(m) {
                        *b += mv;
                    }
                }
            }
            out.extend(self.forward(&tokens, &tokens, Some(&bias))?.data);
        }
        let merged = window_reverse(
            &Tensor {
                shape: windows.shape.clone(),
                data: out,
            },
            m,
            h,
            w,
        )?;
        if shift > 0 {
            cyclic_unshift(&merged, shift)
        } else {
            Ok(merged)
        }
    }
}

/// One cross-attention layer per future waypoint; the motion features act
/// as keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionFusion {
    pub layers: Vec<AttentionLayer>,
}

impl CrossAttentionFusion {
    pub fn new(cfg: AttentionConfig, timesteps: usize, seed: u64) -> Result<Self> {
        let layers = (0..timesteps)
            .map(|t| AttentionLayer::new(cfg, seed.wrapping_add(t as u64)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, timestep: usize, query_feats: &Tensor, motion_feats: &Tensor) -> Result<Tensor> {
        let layer = self
            .layers
            .get(timestep)
            .ok_or_else(|| Error::ShapeMismatch(format!("no cross-attention layer for timestep {timestep}")))?;
        layer.forward(query_feats, motion_feats, None)
    }
}

/// Outcome of one self-test check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

/// Runs the block invariant suite with seeded random instances.
pub fn run_selftest(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    let mut worst_row = 0.0f64;
    for heads in [3, 6, 12] {
        let cfg = AttentionConfig {
            num_heads: heads,
            model_dim: 4 * heads,
            window_size: 4,
            shift: 0,
        };
        let q = Tensor::random(vec![16, cfg.model_dim], 3.0, &mut rng);
        let k = Tensor::random(vec![16, cfg.model_dim], 3.0, &mut rng);
        let bias = Tensor::random(vec![heads, 16, 16], 5.0, &mut rng);
        let p = attention_probs(&q, &k, Some(&bias), &cfg)?;
        for row in p.data.chunks(16) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    results.push(check(
        "softmax rows sum to 1",
        worst_row <= 1e-6,
        format!("max |row sum - 1| = {worst_row:.2e}"),
    ));

    let x = Tensor::random(vec![8, 8, 3], 1.0, &mut rng);
    let round = window_reverse(&window_partition(&x, 4)?, 4, 8, 8)?;
    results.push(check(
        "window partition round trip",
        round.data.iter().zip(&x.data).all(|(a, b)| a.to_bits() == b.to_bits()),
        "8x8x3, window 4".into(),
    ));

    let mut shift_ok = true;
    for shift in 0..=8 {
        let back = cyclic_unshift(&cyclic_shift(&x, shift)?, shift)?;
        shift_ok &= back.data.iter().zip(&x.data).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    shift_ok &= cyclic_shift(&x, 8)? == x;
    results.push(check(
        "cyclic shift round trip",
        shift_ok,
        "shifts 0..=8 on 8x8x3".into(),
    ));

    let cfg = AttentionConfig {
        num_heads: 3,
        model_dim: 12,
        window_size: 4,
        shift: 0,
    };
    let layer = AttentionLayer::new(cfg, seed ^ 0xA77E)?;
    let tokens = Tensor::random(vec![16, 12], 1.0, &mut rng);
    let perm = shuffled(16, &mut rng);
    let direct = layer.forward(&tokens, &tokens, None)?.permute_rows(&perm)?;
    let permuted_in = tokens.permute_rows(&perm)?;
    let via = layer.forward(&permuted_in, &permuted_in, None)?;
    let err = max_abs_diff(&direct.data, &via.data);
    results.push(check(
        "bias-free attention is permutation equivariant",
        err <= 1e-6,
        format!("max deviation {err:.2e}"),
    ));

    let motion = Tensor::random(vec![10, 12], 1.0, &mut rng);
    let query = Tensor::random(vec![6, 12], 1.0, &mut rng);
    let a = cross_attention(&query, &motion, &cfg, Some(&layer.w_o))?;
    let b = cross_attention(
        &query,
        &motion.permute_rows(&shuffled(10, &mut rng))?,
        &cfg,
        Some(&layer.w_o),
    )?;
    let err = max_abs_diff(&a.data, &b.data);
    results.push(check(
        "cross-attention ignores motion row order",
        err <= 1e-6,
        format!("max deviation {err:.2e}"),
    ));

    let kernel = Tensor::random(vec![4, 4, 1, 8], 0.5, &mut rng);
    let big = Tensor::random(vec![256, 256, 1], 1.0, &mut rng);
    let emb = patch_embed(&big, &kernel)?;
    results.push(check(
        "patch embedding downsamples by 4",
        emb.shape() == [64, 64, 8],
        format!("256x256 -> {:?}", emb.shape()),
    ));

    let small_kernel = Tensor::random(vec![4, 4, 2, 5], 0.5, &mut rng);
    let xa = Tensor::random(vec![8, 8, 2], 1.0, &mut rng);
    let xb = Tensor::random(vec![8, 8, 2], 1.0, &mut rng);
    let (ca, cb) = (0.7, -1.3);
    let mix = Tensor::from_fn(vec![8, 8, 2], |i| ca * xa.data[i] + cb * xb.data[i]);
    let lhs = patch_embed(&mix, &small_kernel)?;
    let fa = patch_embed(&xa, &small_kernel)?;
    let fb = patch_embed(&xb, &small_kernel)?;
    let rhs: Vec<f64> = fa.data.iter().zip(&fb.data).map(|(a, b)| ca * a + cb * b).collect();
    let err = max_abs_diff(&lhs.data, &rhs);
    results.push(check(
        "patch embedding is linear",
        err <= 1e-6,
        format!("max deviation {err:.2e}"),
    ));

    let shifted_cfg = AttentionConfig {
        num_heads: 3,
        model_dim: 12,
        window_size: 4,
        shift: 2,
    };
    let map = Tensor::random(vec![8, 8, 12], 1.0, &mut rng);
    let out = AttentionLayer::new(shifted_cfg, seed ^ 0x5817)?.window_forward(&map)?;
    results.push(check(
        "shifted window attention preserves map shape",
        out.shape() == map.shape(),
        format!("{:?}", out.shape()),
    ));

    Ok(results)
}
