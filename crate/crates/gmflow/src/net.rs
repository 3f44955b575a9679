//! A small fully-connected network mapping (x_t, t, condition) to Gaussian
//! mixture parameters in velocity space, with exact parameter gradients via
//! a recorded-activation tape. No external autodiff: forward passes record
//! what backward needs, and backward replays the layers in reverse.
//!
//! A checkpoint is a little-endian "GMFC" container of named f32 parameter
//! records; round-tripping a file reproduces it bit-exactly.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GmError, Result};
use crate::gm::IsoGaussianMixture;

const MAGIC: &[u8; 4] = b"GMFC";
const FORMAT_VERSION: u32 = 1;

/// Output head layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// K logits, K*D component means, one pre-activation for the shared std.
    Gm,
    /// D mean-velocity channels only (the L2 baseline).
    Vanilla,
}

#[derive(Debug, Clone)]
pub struct MlpConfig {
    pub data_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub k: usize,
    /// 0 = unconditional. Otherwise the input carries a one-hot of size
    /// `num_classes + 1`, the extra slot being the null (unconditional) token.
    pub num_classes: usize,
    pub head: HeadKind,
    pub t_embed_dim: usize,
    pub s_min: f64,
}

impl MlpConfig {
    pub fn toy(k: usize) -> Self {
        Self {
            data_dim: 2,
            hidden_dim: 128,
            hidden_layers: 5,
            k,
            num_classes: 0,
            head: HeadKind::Gm,
            t_embed_dim: 64,
            s_min: 1e-4,
        }
    }

    pub fn vanilla_toy() -> Self {
        Self { head: HeadKind::Vanilla, ..Self::toy(1) }
    }

    pub fn cond_dim(&self) -> usize {
        if self.num_classes == 0 {
            0
        } else {
            self.num_classes + 1
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.t_embed_dim + self.cond_dim()
    }

    pub fn head_dim(&self) -> usize {
        match self.head {
            HeadKind::Gm => self.k + self.k * self.data_dim + 1,
            HeadKind::Vanilla => self.data_dim,
        }
    }
}

/// One dense layer, weights stored row-major `[out][in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim], in_dim, out_dim }
    }
}

#[derive(Debug, Clone)]
pub struct GmMlp {
    pub cfg: MlpConfig,
    pub layers: Vec<Linear>,
}

/// Recorded activations from one batched forward pass: enough to produce
/// exact parameter gradients of any scalar loss on the raw head outputs.
pub struct GradientTape {
    /// Input to each layer, `[n][in_dim]` flattened; `inputs[0]` is the
    /// embedded network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation values of the trunk layers (needed for the SiLU
    /// derivative).
    preacts: Vec<Vec<f64>>,
    n: usize,
}

/// Per-layer parameter gradients with the same shapes as the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>, // (dw, db)
}

impl Gradients {
    pub fn zeros_like(model: &GmMlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.0.iter_mut().zip(&b.0) {
                *x += y;
            }
            for (x, y) in a.1.iter_mut().zip(&b.1) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            for x in &mut l.0 {
                *x *= c;
            }
            for x in &mut l.1 {
                *x *= c;
            }
        }
    }

    /// Flattens into the model's linear parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (dw, db) in &self.layers {
            out.extend_from_slice(dw);
            out.extend_from_slice(db);
        }
        out
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn softplus_grad(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators so the reduction vectorizes.
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl GmMlp {
    /// Truncated-normal trunk weights (std 0.02), zero head weights, and
    /// small random biases on the mean rows of the head so mixture
    /// components can separate during training.
    pub fn new<R: Rng + ?Sized>(cfg: MlpConfig, rng: &mut R) -> Self {
        assert!(cfg.hidden_layers >= 1 && cfg.t_embed_dim % 2 == 0 && cfg.t_embed_dim >= 4);
        let mut layers = Vec::with_capacity(cfg.hidden_layers + 1);
        let mut in_dim = cfg.input_dim();
        for _ in 0..cfg.hidden_layers {
            let mut l = Linear::zeros(in_dim, cfg.hidden_dim);
            for w in &mut l.w {
                *w = trunc_normal(rng, 0.02);
            }
            layers.push(l);
            in_dim = cfg.hidden_dim;
        }
        // Mean biases are seeded at the velocity scale (std 2) so the
        // components start spread over the target support and specialize
        // quickly instead of collapsing onto one another.
        const MEAN_BIAS_STD: f64 = 2.0;
        let mut head = Linear::zeros(in_dim, cfg.head_dim());
        match cfg.head {
            HeadKind::Gm => {
                // Mean biases come right after the K logit rows.
                for kd in 0..cfg.k * cfg.data_dim {
                    head.b[cfg.k + kd] = trunc_normal(rng, MEAN_BIAS_STD);
                }
                // softplus(ln(e - 1)) = 1, so s starts at 1 + s_min.
                head.b[cfg.k + cfg.k * cfg.data_dim] = (std::f64::consts::E - 1.0).ln();
            }
            HeadKind::Vanilla => {
                for b in &mut head.b {
                    *b = trunc_normal(rng, MEAN_BIAS_STD);
                }
            }
        }
        layers.push(head);
        Self { cfg, layers }
    }

    /// Sinusoidal time features followed by the optional one-hot condition.
    pub fn embed_input(&self, x_t: &[f64], t: f64, cond: Option<usize>, out: &mut [f64]) {
        let cfg = &self.cfg;
        debug_assert_eq!(x_t.len(), cfg.data_dim);
        debug_assert_eq!(out.len(), cfg.input_dim());
        out[..cfg.data_dim].copy_from_slice(x_t);
        let half = cfg.t_embed_dim / 2;
        for j in 0..half {
            // Frequencies geometric from 1 to 1000.
            let f = 1000f64.powf(j as f64 / (half - 1) as f64);
            out[cfg.data_dim + 2 * j] = (f * t).sin();
            out[cfg.data_dim + 2 * j + 1] = (f * t).cos();
        }
        let cond_base = cfg.data_dim + cfg.t_embed_dim;
        if cfg.num_classes > 0 {
            for v in &mut out[cond_base..] {
                *v = 0.0;
            }
            let idx = match cond {
                Some(c) => {
                    assert!(c < cfg.num_classes, "class {c} out of range");
                    c
                }
                None => cfg.num_classes, // null token
            };
            out[cond_base + idx] = 1.0;
        } else {
            assert!(cond.is_none(), "conditional input to an unconditional model");
        }
    }

    /// Batched forward over pre-embedded inputs, recording a tape.
    /// `inputs` is `[n][input_dim]` flattened; returns raw head outputs
    /// `[n][head_dim]`.
    pub fn forward_batch(&self, inputs: Vec<f64>, n: usize) -> (Vec<f64>, GradientTape) {
        let mut tape = GradientTape { inputs: Vec::new(), preacts: Vec::new(), n };
        let mut cur = inputs;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; n * layer.out_dim];
            gemm_bias(&cur, n, layer, &mut out);
            tape.inputs.push(cur);
            if li + 1 < self.layers.len() {
                tape.preacts.push(out.clone());
                for v in &mut out {
                    *v = silu(*v);
                }
            }
            cur = out;
        }
        (cur, tape)
    }

    /// Forward without a tape, writing raw head outputs into `out`.
    pub fn infer_batch(&self, inputs: &[f64], n: usize, out: &mut Vec<f64>) {
        let mut cur = inputs.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; n * layer.out_dim];
            gemm_bias(&cur, n, layer, &mut next);
            if li + 1 < self.layers.len() {
                for v in &mut next {
                    *v = silu(*v);
                }
            }
            cur = next;
        }
        *out = cur;
    }

    /// Exact parameter gradients for a loss whose gradient w.r.t. the raw
    /// head outputs is `d_raw` (`[n][head_dim]` flattened).
    pub fn backward_batch(&self, tape: &GradientTape, d_raw: &[f64]) -> Gradients {
        let n = tape.n;
        let mut grads = Gradients::zeros_like(self);
        let mut dy = d_raw.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let x = &tape.inputs[li];
            let (dw, db) = &mut grads.layers[li];
            for r in 0..n {
                let dyr = &dy[r * layer.out_dim..(r + 1) * layer.out_dim];
                let xr = &x[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (o, &g) in dyr.iter().enumerate() {
                    if g != 0.0 {
                        axpy(g, xr, &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim]);
                    }
                    db[o] += g;
                }
            }
            if li == 0 {
                break;
            }
            // dX = dY W, then through the previous layer's SiLU.
            let mut dx = vec![0.0; n * layer.in_dim];
            for r in 0..n {
                let dyr = &dy[r * layer.out_dim..(r + 1) * layer.out_dim];
                let dxr = &mut dx[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (o, &g) in dyr.iter().enumerate() {
                    if g != 0.0 {
                        axpy(g, &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim], dxr);
                    }
                }
            }
            let pre = &tape.preacts[li - 1];
            for (d, &p) in dx.iter_mut().zip(pre) {
                *d *= silu_grad(p);
            }
            dy = dx;
        }
        grads
    }

    /// Single-sample forward returning the u-space mixture (GM head only).
    pub fn forward(&self, x_t: &[f64], t: f64, cond: Option<usize>) -> IsoGaussianMixture {
        assert_eq!(self.cfg.head, HeadKind::Gm, "forward requires a GM head");
        let mut input = vec![0.0; self.cfg.input_dim()];
        self.embed_input(x_t, t, cond, &mut input);
        let mut raw = Vec::new();
        self.infer_batch(&input, 1, &mut raw);
        self.raw_to_gm(&raw)
    }

    /// Mean flow velocity: the vanilla head output, or the mixture mean for
    /// a GM head.
    pub fn mean_velocity(&self, x_t: &[f64], t: f64, cond: Option<usize>) -> Vec<f64> {
        let mut input = vec![0.0; self.cfg.input_dim()];
        self.embed_input(x_t, t, cond, &mut input);
        let mut raw = Vec::new();
        self.infer_batch(&input, 1, &mut raw);
        match self.cfg.head {
            HeadKind::Vanilla => raw,
            HeadKind::Gm => self.raw_to_gm(&raw).mean(),
        }
    }

    /// Interprets one raw GM-head row: shared std via softplus + s_min.
    pub fn raw_to_gm(&self, raw: &[f64]) -> IsoGaussianMixture {
        let (k, d) = (self.cfg.k, self.cfg.data_dim);
        debug_assert_eq!(raw.len(), self.cfg.head_dim());
        let logits = raw[..k].to_vec();
        let means = raw[k..k + k * d].to_vec();
        let s = softplus(raw[k + k * d]) + self.cfg.s_min;
        IsoGaussianMixture::new(logits, means, s, d).expect("finite head outputs")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Linear indexing over (w, b) of each layer in order; used by the
    /// optimizer and the finite-difference checks.
    pub fn param(&self, idx: usize) -> f64 {
        let mut i = idx;
        for l in &self.layers {
            if i < l.w.len() {
                return l.w[i];
            }
            i -= l.w.len();
            if i < l.b.len() {
                return l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index {idx} out of range");
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let mut i = idx;
        for l in &mut self.layers {
            if i < l.w.len() {
                return &mut l.w[i];
            }
            i -= l.w.len();
            if i < l.b.len() {
                return &mut l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index {idx} out of range");
    }

    /// Visits every parameter once, in the same order as [`param`](Self::param)
    /// indexing.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut i = 0;
        for l in &mut self.layers {
            for w in &mut l.w {
                f(i, w);
                i += 1;
            }
            for b in &mut l.b {
                f(i, b);
                i += 1;
            }
        }
    }

    pub fn grad_at(grads: &Gradients, idx: usize) -> f64 {
        let mut i = idx;
        for (dw, db) in &grads.layers {
            if i < dw.len() {
                return dw[i];
            }
            i -= dw.len();
            if i < db.len() {
                return db[i];
            }
            i -= db.len();
        }
        panic!("gradient index out of range");
    }

    // ---- checkpoint I/O -------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        buf.push(match self.cfg.head {
            HeadKind::Gm => 0,
            HeadKind::Vanilla => 1,
        });
        buf.extend_from_slice(&[0u8; 3]);
        for v in [
            self.cfg.k as u32,
            self.cfg.data_dim as u32,
            self.cfg.hidden_dim as u32,
            self.cfg.hidden_layers as u32,
            self.cfg.t_embed_dim as u32,
            self.cfg.num_classes as u32,
        ] {
            put_u32(&mut buf, v);
        }
        buf.extend_from_slice(&self.cfg.s_min.to_le_bytes());
        put_u32(&mut buf, self.layers.len() as u32);
        for (i, l) in self.layers.iter().enumerate() {
            put_record(&mut buf, &format!("layer{i}.w"), &l.w);
            put_record(&mut buf, &format!("layer{i}.b"), &l.b);
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path)?;
        let mut r = Cursor { data: &data, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(GmError::Format("bad magic (expected GMFC)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(GmError::Format(format!("unsupported checkpoint version {version}")));
        }
        let head = match r.u8()? {
            0 => HeadKind::Gm,
            1 => HeadKind::Vanilla,
            other => return Err(GmError::Format(format!("unknown head kind {other}"))),
        };
        r.take(3)?;
        let k = r.u32()? as usize;
        let data_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let hidden_layers = r.u32()? as usize;
        let t_embed_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let s_min = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let cfg = MlpConfig { data_dim, hidden_dim, hidden_layers, k, num_classes, head, t_embed_dim, s_min };
        if cfg.data_dim == 0 || cfg.hidden_dim == 0 || cfg.hidden_layers == 0 || cfg.k == 0 {
            return Err(GmError::Format("degenerate checkpoint dimensions".into()));
        }

        let n_layers = r.u32()? as usize;
        if n_layers != cfg.hidden_layers + 1 {
            return Err(GmError::Format("layer count does not match header".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut in_dim = cfg.input_dim();
        for i in 0..n_layers {
            let out_dim = if i + 1 == n_layers { cfg.head_dim() } else { cfg.hidden_dim };
            let mut l = Linear::zeros(in_dim, out_dim);
            read_record(&mut r, &format!("layer{i}.w"), &mut l.w)?;
            read_record(&mut r, &format!("layer{i}.b"), &mut l.b)?;
            layers.push(l);
            in_dim = out_dim;
        }
        if r.pos != data.len() {
            return Err(GmError::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Self { cfg, layers })
    }
}

fn gemm_bias(x: &[f64], n: usize, layer: &Linear, out: &mut [f64]) {
    let (in_dim, out_dim) = (layer.in_dim, layer.out_dim);
    for r in 0..n {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let or = &mut out[r * out_dim..(r + 1) * out_dim];
        for o in 0..out_dim {
            or[o] = layer.b[o] + dot(xr, &layer.w[o * in_dim..(o + 1) * in_dim]);
        }
    }
}

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            return std * x;
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(GmError::Format("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_record(r: &mut Cursor, expect_name: &str, out: &mut [f64]) -> Result<()> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| GmError::Format("non-utf8 record name".into()))?;
    if name != expect_name {
        return Err(GmError::Format(format!("expected record {expect_name}, found {name}")));
    }
    let len = r.u64()? as usize;
    if len != out.len() {
        return Err(GmError::Format(format!(
            "record {name} has {len} values, expected {}",
            out.len()
        )));
    }
    for v in out.iter_mut() {
        *v = f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64;
    }
    Ok(())
}
