//! Losses (GM KL, transition, baseline L2, spectral hook) and the training
//! loop: Adam over the MLP, deterministic per-sample RNG streams, and the
//! direct GM fit used by the mean-alignment property check.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_eval::{blob_image, Dataset, BLOB_GRID};
use crate::error::{GmError, Result};
use crate::gm::{log_sum_exp, softmax, IsoGaussianMixture};
use crate::net::{softplus, softplus_grad, GmMlp, Gradients, HeadKind, MlpConfig};
use crate::par;
use crate::schedule::LinearSchedule;
use crate::spectral::{fft_pack, spectral_loss, spectral_loss_grad, PixelwiseGm, SpectrumHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TSampler {
    Uniform,
    LogitNormal,
}

/// t ~ U(0,1) or t = sigmoid(z), z ~ N(0,1).
pub fn sample_t<R: Rng + ?Sized>(kind: TSampler, rng: &mut R) -> f64 {
    match kind {
        TSampler::Uniform => rng.gen::<f64>(),
        TSampler::LogitNormal => {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            1.0 / (1.0 + (-z).exp())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadCfg {
    Gm,
    Vanilla,
}

impl Default for HeadCfg {
    fn default() -> Self {
        Self::Gm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossCfg {
    /// Transition NLL with dt = lambda * t (the default training loss).
    Transition,
    /// Plain velocity-space NLL.
    Kl,
}

impl Default for LossCfg {
    fn default() -> Self {
        Self::Transition
    }
}

/// Training configuration; unknown JSON keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub t_sampler: TSampler,
    pub seed: u64,
    pub dataset: String,
    pub spectral: bool,
    #[serde(default)]
    pub head: HeadCfg,
    #[serde(default)]
    pub loss: LossCfg,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    /// Freezes the shared std at 1 (no gradient); with K = 1 this reduces
    /// the GM KL loss to the plain L2 flow loss.
    #[serde(default)]
    pub freeze_s: bool,
    /// Probability of replacing the class label with the null token.
    #[serde(default = "default_cond_drop")]
    pub cond_drop: f64,
}

fn default_hidden_dim() -> usize {
    128
}

fn default_hidden_layers() -> usize {
    5
}

fn default_cond_drop() -> f64 {
    0.1
}

impl TrainConfig {
    /// The default checkerboard run.
    pub fn toy_default(k: usize, seed: u64) -> Self {
        Self {
            k,
            lambda: 0.9,
            batch_size: 512,
            iterations: 8000,
            learning_rate: 1e-3,
            t_sampler: TSampler::Uniform,
            seed,
            dataset: "checkerboard".into(),
            spectral: false,
            head: HeadCfg::Gm,
            loss: LossCfg::Transition,
            hidden_dim: 128,
            hidden_layers: 5,
            freeze_s: false,
            cond_drop: default_cond_drop(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(GmError::Format("k must be >= 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(GmError::Format("lambda must lie in (0, 1]".into()));
        }
        if self.batch_size < 1 || self.iterations < 1 {
            return Err(GmError::Format("batch size and iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(GmError::Format("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(GmError::Format("cond_drop must lie in [0, 1]".into()));
        }
        Dataset::parse(&self.dataset)?;
        if self.spectral && self.dataset != "blobs16" {
            return Err(GmError::Format("spectral training requires the blobs16 dataset".into()));
        }
        Ok(())
    }

    pub fn dataset_kind(&self) -> Dataset {
        Dataset::parse(&self.dataset).expect("validated dataset")
    }

    pub fn mlp_config(&self) -> MlpConfig {
        let ds = self.dataset_kind();
        MlpConfig {
            data_dim: ds.data_dim(),
            hidden_dim: self.hidden_dim,
            hidden_layers: self.hidden_layers,
            k: self.k,
            num_classes: ds.num_classes(),
            head: match self.head {
                HeadCfg::Gm => HeadKind::Gm,
                HeadCfg::Vanilla => HeadKind::Vanilla,
            },
            t_embed_dim: 64,
            s_min: 1e-4,
        }
    }
}

// ---- losses -----------------------------------------------------------------

/// L2 flow matching loss 1/2 ||u - mean_u||^2.
pub fn loss_l2_flow(mean_u: &[f64], u: &[f64]) -> f64 {
    0.5 * mean_u.iter().zip(u).map(|(m, x)| (x - m) * (x - m)).sum::<f64>()
}

/// Expanded GM KL loss (the bracketed form):
/// -log sum_k exp(-||u - mu_k||^2 / (2 s^2) - D log s + log A_k).
/// Equals the full negative log density minus (D/2) log(2 pi).
pub fn loss_gm_nll(gm_u: &IsoGaussianMixture, u: &[f64]) -> f64 {
    gm_nll_with_grad(gm_u.logits(), gm_u.means(), gm_u.std(), gm_u.dim(), u).loss
}

/// Loss value plus exact gradients w.r.t. logits, means, and the shared std.
pub struct GmNllGrad {
    pub loss: f64,
    pub d_logits: Vec<f64>,
    pub d_means: Vec<f64>,
    pub d_std: f64,
}

pub fn gm_nll_with_grad(
    logits: &[f64],
    means: &[f64],
    std: f64,
    dim: usize,
    y: &[f64],
) -> GmNllGrad {
    let k = logits.len();
    let d = dim as f64;
    let inv_var = 1.0 / (std * std);
    let log_norm = log_sum_exp(logits);
    let mut g = vec![0.0; k];
    for ki in 0..k {
        let mu = &means[ki * dim..(ki + 1) * dim];
        let sq: f64 = mu.iter().zip(y).map(|(m, x)| (x - m) * (x - m)).sum();
        g[ki] = logits[ki] - log_norm - 0.5 * sq * inv_var - d * std.ln();
    }
    let loss = -log_sum_exp(&g);
    let resp = softmax(&g);
    let weights = softmax(logits);
    let d_logits: Vec<f64> = (0..k).map(|ki| weights[ki] - resp[ki]).collect();
    let mut d_means = vec![0.0; k * dim];
    let mut d_std = 0.0;
    for ki in 0..k {
        let mu = &means[ki * dim..(ki + 1) * dim];
        let mut sq = 0.0;
        for (j, (&m, &x)) in mu.iter().zip(y).enumerate() {
            d_means[ki * dim + j] = -resp[ki] * (x - m) * inv_var;
            sq += (x - m) * (x - m);
        }
        d_std -= resp[ki] * (sq * inv_var / std - d / std);
    }
    GmNllGrad { loss, d_logits, d_means, d_std }
}

/// Transition-loss coefficients at (t, dt = lambda t) plus the derived
/// per-component transform of the u-space prediction.
struct TransitionMap {
    c1: f64,
    c2: f64,
    c3: f64,
    sigma_t: f64,
}

impl TransitionMap {
    fn new(t: f64, lambda: f64) -> Result<Self> {
        let dt = lambda * t;
        let c = LinearSchedule.ddim_coeffs(t, dt)?;
        Ok(Self { c1: c.c1, c2: c.c2, c3: c.c3, sigma_t: LinearSchedule.sigma(t) })
    }

    /// Transition-GM mean of component k from the u-space mean.
    fn mean(&self, x_t: &[f64], mu_u: &[f64], out: &mut [f64]) {
        for ((o, &xt), &mu) in out.iter_mut().zip(x_t).zip(mu_u) {
            *o = self.c1 * xt + self.c2 * (xt - self.sigma_t * mu);
        }
    }

    /// Transition-GM std from the u-space shared std. The c3 = 0 branch
    /// (lambda = 1) keeps the value bit-identical to the x0-space std.
    fn std(&self, s_u: f64) -> f64 {
        let sx = self.sigma_t * s_u;
        if self.c3 == 0.0 {
            self.c2.abs() * sx
        } else {
            (self.c3 + self.c2 * self.c2 * sx * sx).sqrt()
        }
    }
}

/// Spec-level transition loss: draws x_{t-dt} ~ p(.|x0) and x_t ~ p(.|x_{t-dt}),
/// then evaluates the negative log density of the model's transition mixture
/// at x_{t-dt}. Returns `DegenerateTime` at t = 0 (callers skip the sample).
pub fn loss_transition<R: Rng + ?Sized>(
    model: &GmMlp,
    x0: &[f64],
    cond: Option<usize>,
    t: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<f64> {
    if t <= 0.0 {
        return Err(GmError::DegenerateTime { t, context: "transition loss at t = 0" });
    }
    let sched = LinearSchedule;
    let dt = lambda * t;
    let x_prev = sched.forward_diffuse(x0, t - dt, rng);
    let x_t = sched.forward_transition(&x_prev, t, dt, rng)?;
    let gm_u = model.forward(&x_t, t, cond);
    let map = TransitionMap::new(t, lambda)?;
    let k = gm_u.k();
    let dim = gm_u.dim();
    let mut means = vec![0.0; k * dim];
    for ki in 0..k {
        let mut row = vec![0.0; dim];
        map.mean(&x_t, gm_u.mean_of(ki), &mut row);
        means[ki * dim..(ki + 1) * dim].copy_from_slice(&row);
    }
    Ok(gm_nll_with_grad(gm_u.logits(), &means, map.std(gm_u.std()), dim, &x_prev).loss)
}

// ---- optimizer ----------------------------------------------------------------

/// Plain Adam over a flat parameter vector.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Computes the update for each gradient entry and hands it to `apply`.
    pub fn step(&mut self, grads: &[f64], mut apply: impl FnMut(usize, f64)) {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, &g) in grads.iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            apply(i, self.lr * mhat / (vhat.sqrt() + self.eps));
        }
    }
}

// ---- training loop --------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
    pub wallclock_s: f64,
}

pub struct TrainResult {
    pub model: GmMlp,
    pub spectrum: Option<SpectrumHead>,
    pub curve: Vec<LossPoint>,
}

/// `iteration,loss,wallclock_s` rows.
pub fn write_loss_csv(curve: &[LossPoint], path: &std::path::Path) -> Result<()> {
    let mut s = String::from("iteration,loss,wallclock_s\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.iteration, p.loss, p.wallclock_s));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Per-sample RNG stream: deterministic in (seed, iteration, index) and
/// independent of batch chunking or thread count. Stream 0 is reserved for
/// parameter initialization.
fn sample_rng(seed: u64, iteration: usize, index: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + (iteration * batch + index) as u64);
    rng
}

/// Runs the full training scheme. Deterministic: identical configs produce
/// bit-identical models.
pub fn train(cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if cfg.dataset_kind().is_image() {
        train_blobs(cfg)
    } else {
        train_points(cfg)
    }
}

fn train_points(cfg: &TrainConfig) -> Result<TrainResult> {
    let dataset = cfg.dataset_kind();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = GmMlp::new(cfg.mlp_config(), &mut init_rng);
    let n_params = model.param_count();
    let mut adam = Adam::new(n_params, cfg.learning_rate);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    let d = model.cfg.data_dim;
    let in_dim = model.cfg.input_dim();
    let head_dim = model.cfg.head_dim();
    let chunk = 128usize;

    for iter in 0..cfg.iterations {
        let model_ref = &model;
        let reduced = par::chunked_reduce(
            cfg.batch_size,
            chunk,
            |range| {
                let n = range.len();
                let mut inputs = vec![0.0; n * in_dim];
                let mut targets = vec![0.0; n * d]; // u or x_{t-dt} per row
                let mut ts = vec![0.0; n];
                let mut used = vec![true; n];
                for (row, idx) in range.clone().enumerate() {
                    let mut rng = sample_rng(cfg.seed, iter, idx, cfg.batch_size);
                    let (x0, cond_raw) = dataset.sample_point(&mut rng);
                    let cond = match cond_raw {
                        Some(c) if rng.gen::<f64>() >= cfg.cond_drop => Some(c),
                        Some(_) => None,
                        None => None,
                    };
                    let t = sample_t(cfg.t_sampler, &mut rng);
                    ts[row] = t;
                    if t <= 0.0 {
                        used[row] = false;
                        continue;
                    }
                    let sched = LinearSchedule;
                    let x_t;
                    match effective_loss(cfg) {
                        EffLoss::Transition => {
                            let dt = cfg.lambda * t;
                            let x_prev = sched.forward_diffuse(&x0, t - dt, &mut rng);
                            x_t = sched
                                .forward_transition(&x_prev, t, dt, &mut rng)
                                .expect("valid step");
                            targets[row * d..(row + 1) * d].copy_from_slice(&x_prev);
                        }
                        EffLoss::Velocity => {
                            // u = eps - x0 under the linear schedule.
                            let mut u = vec![0.0; d];
                            let mut xt = vec![0.0; d];
                            for j in 0..d {
                                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                                u[j] = eps - x0[j];
                                xt[j] = (1.0 - t) * x0[j] + t * eps;
                            }
                            x_t = xt;
                            targets[row * d..(row + 1) * d].copy_from_slice(&u);
                        }
                    }
                    model_ref.embed_input(&x_t, t, cond, &mut inputs[row * in_dim..(row + 1) * in_dim]);
                }
                let x_t_rows: Vec<f64> =
                    (0..n).flat_map(|r| inputs[r * in_dim..r * in_dim + d].to_vec()).collect();
                let (raw, tape) = model_ref.forward_batch(inputs, n);
                let mut d_raw = vec![0.0; n * head_dim];
                let mut loss_sum = 0.0;
                let mut n_used = 0usize;
                for row in 0..n {
                    if !used[row] {
                        continue;
                    }
                    let raw_row = &raw[row * head_dim..(row + 1) * head_dim];
                    let target = &targets[row * d..(row + 1) * d];
                    let (loss, grad_row) = per_sample_loss(
                        cfg,
                        model_ref,
                        raw_row,
                        target,
                        &x_t_rows[row * d..(row + 1) * d],
                        ts[row],
                    );
                    loss_sum += loss;
                    d_raw[row * head_dim..(row + 1) * head_dim].copy_from_slice(&grad_row);
                    n_used += 1;
                }
                let grads = model_ref.backward_batch(&tape, &d_raw);
                (loss_sum, grads, n_used)
            },
            |(l1, mut g1, u1), (l2, g2, u2)| {
                g1.add_assign(&g2);
                (l1 + l2, g1, u1 + u2)
            },
        );
        let (loss_sum, mut grads, n_used) =
            reduced.unwrap_or_else(|| (0.0, Gradients::zeros_like(&model), 0));
        if n_used == 0 {
            continue;
        }
        let mean_loss = loss_sum / n_used as f64;
        if !mean_loss.is_finite() {
            return Err(GmError::NonFiniteLoss { value: mean_loss, iteration: iter, seed: cfg.seed });
        }
        grads.scale(1.0 / n_used as f64);
        let flat = grads.flatten();
        let mut deltas = vec![0.0; n_params];
        adam.step(&flat, |i, delta| deltas[i] = delta);
        model.visit_params_mut(|i, p| *p -= deltas[i]);
        curve.push(LossPoint {
            iteration: iter,
            loss: mean_loss,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainResult { model, spectrum: None, curve })
}

enum EffLoss {
    Transition,
    Velocity,
}

fn effective_loss(cfg: &TrainConfig) -> EffLoss {
    match (cfg.head, cfg.loss) {
        (HeadCfg::Vanilla, _) | (_, LossCfg::Kl) => EffLoss::Velocity,
        (_, LossCfg::Transition) => EffLoss::Transition,
    }
}

/// Loss and d(loss)/d(raw head outputs) for one sample.
fn per_sample_loss(
    cfg: &TrainConfig,
    model: &GmMlp,
    raw: &[f64],
    target: &[f64],
    x_t: &[f64],
    t: f64,
) -> (f64, Vec<f64>) {
    let d = model.cfg.data_dim;
    match model.cfg.head {
        HeadKind::Vanilla => {
            let loss = loss_l2_flow(raw, target);
            let grad: Vec<f64> = raw.iter().zip(target).map(|(m, u)| m - u).collect();
            (loss, grad)
        }
        HeadKind::Gm => {
            let k = model.cfg.k;
            let logits = &raw[..k];
            let mu_u = &raw[k..k + k * d];
            let s_pre = raw[k + k * d];
            let s_u = if cfg.freeze_s { 1.0 } else { softplus(s_pre) + model.cfg.s_min };
            let mut grad = vec![0.0; raw.len()];
            match effective_loss(cfg) {
                EffLoss::Velocity => {
                    let g = gm_nll_with_grad(logits, mu_u, s_u, d, target);
                    grad[..k].copy_from_slice(&g.d_logits);
                    grad[k..k + k * d].copy_from_slice(&g.d_means);
                    if !cfg.freeze_s {
                        grad[k + k * d] = g.d_std * softplus_grad(s_pre);
                    }
                    (g.loss, grad)
                }
                EffLoss::Transition => {
                    let map = TransitionMap::new(t, cfg.lambda).expect("t > 0");
                    let mut means = vec![0.0; k * d];
                    for ki in 0..k {
                        let mut row = vec![0.0; d];
                        map.mean(x_t, &mu_u[ki * d..(ki + 1) * d], &mut row);
                        means[ki * d..(ki + 1) * d].copy_from_slice(&row);
                    }
                    let s_tr = map.std(s_u);
                    let g = gm_nll_with_grad(logits, &means, s_tr, d, target);
                    grad[..k].copy_from_slice(&g.d_logits);
                    // d mean_tr / d mu_u = -c2 sigma_t.
                    let scale = -map.c2 * map.sigma_t;
                    for (gi, &gm) in grad[k..k + k * d].iter_mut().zip(&g.d_means) {
                        *gi = gm * scale;
                    }
                    if !cfg.freeze_s {
                        // d s_tr / d s_u = c2^2 sigma_t^2 s_u / s_tr.
                        let ds = if s_tr > 0.0 {
                            g.d_std * map.c2 * map.c2 * map.sigma_t * map.sigma_t * s_u / s_tr
                        } else {
                            0.0
                        };
                        grad[k + k * d] = ds * softplus_grad(s_pre);
                    }
                    (g.loss, grad)
                }
            }
        }
    }
}

// ---- blob-image training (per-pixel factorization + spectral hook) -----------

fn train_blobs(cfg: &TrainConfig) -> Result<TrainResult> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = GmMlp::new(cfg.mlp_config(), &mut init_rng);
    let pixels = BLOB_GRID * BLOB_GRID;
    let mut head = SpectrumHead::new(pixels, 64, &mut init_rng);

    let n_params = model.param_count();
    let mut adam = Adam::new(n_params, cfg.learning_rate);
    let mut head_adam = Adam::new(head.param_count(), cfg.learning_rate);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    let in_dim = model.cfg.input_dim();
    let head_dim = model.cfg.head_dim();
    let k = cfg.k;
    let sched = LinearSchedule;

    for iter in 0..cfg.iterations {
        let model_ref = &model;
        let head_ref = &head;
        // One image per work item; rows = pixels.
        let reduced = par::chunked_reduce(
            cfg.batch_size,
            1,
            |range| {
                let mut grads = Gradients::zeros_like(model_ref);
                let mut head_grads = vec![0.0; head_ref.param_count()];
                let mut loss_sum = 0.0;
                let mut used = 0usize;
                for idx in range {
                    let mut rng = sample_rng(cfg.seed, iter, idx, cfg.batch_size);
                    let img = blob_image(&mut rng);
                    let t = sample_t(cfg.t_sampler, &mut rng);
                    if t <= 0.0 {
                        continue;
                    }
                    let dt = cfg.lambda * t;
                    let x_prev = sched.forward_diffuse(&img, t - dt, &mut rng);
                    let x_t = sched.forward_transition(&x_prev, t, dt, &mut rng).expect("step");
                    let mut inputs = vec![0.0; pixels * in_dim];
                    for p in 0..pixels {
                        model_ref.embed_input(
                            &x_t[p..p + 1],
                            t,
                            None,
                            &mut inputs[p * in_dim..(p + 1) * in_dim],
                        );
                    }
                    let (raw, tape) = model_ref.forward_batch(inputs, pixels);
                    // Shared per-image std from the mean pre-activation.
                    let s_pre_mean: f64 =
                        (0..pixels).map(|p| raw[p * head_dim + 2 * k]).sum::<f64>() / pixels as f64;
                    let s_u = if cfg.freeze_s {
                        1.0
                    } else {
                        softplus(s_pre_mean) + model_ref.cfg.s_min
                    };
                    let map = TransitionMap::new(t, cfg.lambda).expect("t > 0");
                    let s_tr = map.std(s_u);
                    let mut d_raw = vec![0.0; pixels * head_dim];
                    let mut d_s_u_total = 0.0;
                    for p in 0..pixels {
                        let row = &raw[p * head_dim..(p + 1) * head_dim];
                        let logits = &row[..k];
                        let mu_u = &row[k..2 * k];
                        let mut means = vec![0.0; k];
                        for ki in 0..k {
                            let mut m = [0.0];
                            map.mean(&x_t[p..p + 1], &mu_u[ki..ki + 1], &mut m);
                            means[ki] = m[0];
                        }
                        let g = gm_nll_with_grad(logits, &means, s_tr, 1, &x_prev[p..p + 1]);
                        loss_sum += g.loss / pixels as f64;
                        let gr = &mut d_raw[p * head_dim..(p + 1) * head_dim];
                        for ki in 0..k {
                            gr[ki] = g.d_logits[ki] / pixels as f64;
                            gr[k + ki] = g.d_means[ki] * (-map.c2 * map.sigma_t) / pixels as f64;
                        }
                        if s_tr > 0.0 {
                            d_s_u_total += g.d_std / pixels as f64
                                * (map.c2 * map.c2 * map.sigma_t * map.sigma_t * s_u / s_tr);
                        }
                    }
                    if !cfg.freeze_s {
                        // Shared s: every pixel's pre-activation shares the
                        // gradient through the mean.
                        let d_pre = d_s_u_total * softplus_grad(s_pre_mean) / pixels as f64;
                        for p in 0..pixels {
                            d_raw[p * head_dim + 2 * k] = d_pre;
                        }
                    }
                    grads.add_assign(&model_ref.backward_batch(&tape, &d_raw));

                    if cfg.spectral {
                        // Stop-gradient: the pixelwise mixture is rebuilt as
                        // constants; only the spectrum head trains.
                        let mut logits_px = Vec::with_capacity(pixels * k);
                        let mut means_px = Vec::with_capacity(pixels * k);
                        for p in 0..pixels {
                            let row = &raw[p * head_dim..(p + 1) * head_dim];
                            logits_px.extend_from_slice(&row[..k]);
                            for ki in 0..k {
                                means_px.push(x_t[p] - map.sigma_t * row[k + ki]);
                            }
                        }
                        let pix = PixelwiseGm {
                            h: BLOB_GRID,
                            w: BLOB_GRID,
                            k,
                            logits: logits_px,
                            means: means_px,
                            std: map.sigma_t * s_u,
                        };
                        let zeta = pix.kr_forward_grid(&img);
                        if let Ok(z_r) = fft_pack(&zeta, BLOB_GRID, BLOB_GRID) {
                            let tape_h = head_ref.forward(pix.head_stats());
                            loss_sum += spectral_loss(&z_r, &tape_h.s_f) / pixels as f64;
                            let d_sf = spectral_loss_grad(&z_r, &tape_h.s_f);
                            let hg = head_ref.backward(&tape_h, &d_sf);
                            let mut off = 0;
                            for src in [&hg.w1, &hg.b1, &hg.w2, &hg.b2] {
                                for (dst, &v) in
                                    head_grads[off..off + src.len()].iter_mut().zip(src.iter())
                                {
                                    *dst += v / pixels as f64;
                                }
                                off += src.len();
                            }
                        }
                    }
                    used += 1;
                }
                (loss_sum, grads, head_grads, used)
            },
            |(l1, mut g1, mut h1, u1), (l2, g2, h2, u2)| {
                g1.add_assign(&g2);
                for (a, b) in h1.iter_mut().zip(&h2) {
                    *a += b;
                }
                (l1 + l2, g1, h1, u1 + u2)
            },
        );
        let (loss_sum, mut grads, mut head_grads, n_used) = reduced.unwrap();
        if n_used == 0 {
            continue;
        }
        let mean_loss = loss_sum / n_used as f64;
        if !mean_loss.is_finite() {
            return Err(GmError::NonFiniteLoss { value: mean_loss, iteration: iter, seed: cfg.seed });
        }
        grads.scale(1.0 / n_used as f64);
        let flat = grads.flatten();
        let mut deltas = vec![0.0; n_params];
        adam.step(&flat, |i, delta| deltas[i] = delta);
        model.visit_params_mut(|i, p| *p -= deltas[i]);
        if cfg.spectral {
            for g in &mut head_grads {
                *g /= n_used as f64;
            }
            let mut head_deltas = vec![0.0; head.param_count()];
            head_adam.step(&head_grads, |i, delta| head_deltas[i] = delta);
            for i in 0..head.param_count() {
                *head.param_mut(i) -= head_deltas[i];
            }
        }
        curve.push(LossPoint {
            iteration: iter,
            loss: mean_loss,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
    }
    let spectrum = if cfg.spectral { Some(head) } else { None };
    Ok(TrainResult { model, spectrum, curve })
}

// ---- direct GM fitting (no trunk) ---------------------------------------------

/// Fits free logits and means (fixed shared std) to 1D samples by full-batch
/// Adam on the GM KL loss. Used to check the mean-alignment property: at any
/// stationary point the mixture mean equals the sample mean.
pub fn fit_gm_direct(
    samples: &[f64],
    k: usize,
    std: f64,
    iterations: usize,
    lr: f64,
) -> IsoGaussianMixture {
    assert!(k >= 1 && !samples.is_empty());
    let n = samples.len();
    // Initialize means at evenly spaced sample quantiles.
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut logits = vec![0.0; k];
    let mut means: Vec<f64> =
        (0..k).map(|i| sorted[(i * (n - 1)) / k.max(1) + (n - 1) / (2 * k)]).collect();
    let mut adam = Adam::new(2 * k, lr);
    for _ in 0..iterations {
        let (dl, dm) = par::chunked_reduce(
            n,
            1 << 14,
            |range| {
                let mut dl = vec![0.0; k];
                let mut dm = vec![0.0; k];
                for i in range {
                    let g = gm_nll_with_grad(&logits, &means, std, 1, &samples[i..i + 1]);
                    for ki in 0..k {
                        dl[ki] += g.d_logits[ki];
                        dm[ki] += g.d_means[ki];
                    }
                }
                (dl, dm)
            },
            |(mut a1, mut b1), (a2, b2)| {
                for (x, y) in a1.iter_mut().zip(&a2) {
                    *x += y;
                }
                for (x, y) in b1.iter_mut().zip(&b2) {
                    *x += y;
                }
                (a1, b1)
            },
        )
        .unwrap();
        let mut flat = Vec::with_capacity(2 * k);
        flat.extend(dl.iter().map(|g| g / n as f64));
        flat.extend(dm.iter().map(|g| g / n as f64));
        adam.step(&flat, |i, delta| {
            if i < k {
                logits[i] -= delta;
            } else {
                means[i - k] -= delta;
            }
        });
    }
    IsoGaussianMixture::new(logits, means, std, 1).expect("finite fit")
}
