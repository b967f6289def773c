//! Training: the joint regression + cross-entropy objective, self-conditioned
//! training steps, Adam, and an exponential moving average of the weights.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::{encode, encode_dense, DataBatch, ExtendedState, ScaleMode, ScaleSpec};
use crate::data::DatasetHandle;
use crate::denoiser::{Architecture, DenoiserParams, GradientSet, ModelKind, Tape};
use crate::error::{Result, SddError};
use crate::numerics::{sigmoid, softplus, Matrix, Rng};
use crate::schedule::NoiseSchedule;

/// Loss terms, each averaged over batch rows and data dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2: f64,
    pub ce: f64,
    pub total: f64,
}

/// Loss between a prediction and an encoded target (both `n × 2d`).
///
/// `l2` is the mean squared error over the dense half; `ce` is the mean of
/// `ln(1 + e^{-y·z})` over the bit half, with `y ∈ {-1, +1}` the target bit
/// and `z` the predicted logit.
pub fn loss(pred: &ExtendedState, target: &ExtendedState) -> Result<LossBreakdown> {
    loss_and_grad(pred.matrix(), target.matrix(), ModelKind::Sdd).map(|(l, _)| l)
}

/// Loss plus its gradient with respect to `pred`.
///
/// For [`ModelKind::Dense`] every column is a dense value and `ce` is zero.
pub fn loss_and_grad(pred: &Matrix, target: &Matrix, kind: ModelKind) -> Result<(LossBreakdown, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(SddError::shape(format!(
            "prediction {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let (n, c) = pred.shape();
    let d = kind.data_dim(c);
    if kind == ModelKind::Sdd && c % 2 != 0 {
        return Err(SddError::shape(format!("odd extended width {c}")));
    }
    let count = (n * d).max(1) as f64;

    let mut grad = Matrix::zeros(n, c);
    let (mut l2, mut ce) = (0.0, 0.0);
    for i in 0..n {
        let (p, y, g) = (pred.row(i), target.row(i), grad.row_mut(i));
        for j in 0..d {
            let r = p[j] - y[j];
            l2 += r * r;
            g[j] = 2.0 * r / count;
        }
        for j in d..c {
            let (z, label) = (p[j], y[j]);
            if label != 1.0 && label != -1.0 {
                return Err(SddError::Label {
                    row: i,
                    col: j,
                    value: label,
                });
            }
            ce += softplus(-label * z);
            g[j] = -label * sigmoid(-label * z) / count;
        }
    }
    let (l2, ce) = (l2 / count, ce / count);
    Ok((
        LossBreakdown {
            l2,
            ce,
            total: l2 + ce,
        },
        grad,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &DenoiserParams) -> Self {
        let zeros = GradientSet::zeros_like(params).tensors;
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut DenoiserParams, grads: &GradientSet, state: &mut AdamState, lr: f64) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.tensors.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(SddError::shape("gradient/optimizer state does not match parameters"));
    }
    for ((p, g), m) in tensors.iter().zip(&grads.tensors).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(SddError::shape("gradient tensor shape differs from parameter"));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    for (((p, g), m), v) in tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut DenoiserParams, params: &DenoiserParams, decay: f64) -> Result<()> {
    if ema.arch() != params.arch() {
        return Err(SddError::shape("EMA and parameters have different architectures"));
    }
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (e, p) in e.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *e = decay * *e + (1.0 - decay) * p;
        }
    }
    Ok(())
}

/// Training hyperparameters. The desk-scale defaults are much smaller than a
/// full-size run (constant lr 2e-4, batch 256, 300k steps, EMA 0.9999).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub ema_decay: f64,
    pub self_cond_prob: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub temb_dim: usize,
    pub scale_mode: ScaleMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 64,
            total_steps: 10_000,
            ema_decay: 0.999,
            self_cond_prob: 0.5,
            seed: 0,
            schedule: NoiseSchedule::default(),
            model: ModelKind::Sdd,
            hidden: vec![256, 256, 256],
            temb_dim: 64,
            scale_mode: ScaleMode::Global,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SddError::arg(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        // 0 is allowed: the EMA then simply tracks the current weights.
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(SddError::arg(format!("ema decay {} must lie in [0, 1)", self.ema_decay)));
        }
        if !(0.0..=1.0).contains(&self.self_cond_prob) {
            return Err(SddError::arg(format!(
                "self-conditioning probability {} must lie in [0, 1]",
                self.self_cond_prob
            )));
        }
        if self.batch_size == 0 {
            return Err(SddError::arg("batch size must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(SddError::arg("hidden widths must be positive"));
        }
        self.schedule.validate()
    }

    pub fn architecture(&self, d: usize) -> Architecture {
        Architecture {
            channels: self.model.channels(d),
            hidden: self.hidden.clone(),
            temb_dim: self.temb_dim,
        }
    }
}

/// Source of the self-conditioning input for one gradient evaluation.
#[derive(Debug, Clone)]
pub enum SelfCond {
    Zero,
    /// Run the network once on `[x_t | 0]` and feed the (detached) result,
    /// clamped to `[-1, 1]` exactly as the sampler feeds it.
    Network,
    Given(Matrix),
}

/// Per-step record for the CSV training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,l2,ce,total\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", r.step, r.loss.l2, r.loss.ce, r.loss.total);
    }
    s
}

type ScHook = Box<dyn FnMut(&Matrix) + Send>;

/// Owns the weights, optimizer state and EMA shadow for one training run.
pub struct Trainer {
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
    pub adam: AdamState,
    cfg: TrainConfig,
    scale: ScaleSpec,
    rng: Rng,
    step: u64,
    sc_hook: Option<ScHook>,
}

impl Trainer {
    /// Fresh weights from `Rng::stream(seed, 0)`; training noise uses stream 1.
    pub fn new(cfg: TrainConfig, d: usize, scale: ScaleSpec) -> Result<Self> {
        cfg.validate()?;
        scale.check_width(d)?;
        let params = DenoiserParams::init(&mut Rng::stream(cfg.seed, 0), cfg.architecture(d))?;
        Ok(Trainer {
            ema: params.clone(),
            adam: AdamState::new(&params),
            params,
            rng: Rng::stream(cfg.seed, 1),
            cfg,
            scale,
            step: 0,
            sc_hook: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn scale(&self) -> &ScaleSpec {
        &self.scale
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Observe the self-conditioning input of every training step.
    pub fn set_self_cond_hook(&mut self, hook: impl FnMut(&Matrix) + Send + 'static) {
        self.sc_hook = Some(Box::new(hook));
    }

    /// Encodes a batch into the training target (`n × channels`).
    pub fn target(&self, batch: &DataBatch) -> Result<Matrix> {
        match self.cfg.model {
            ModelKind::Sdd => Ok(encode(batch, &self.scale)?.into_matrix()),
            ModelKind::Dense => encode_dense(batch, &self.scale),
        }
    }

    /// Loss and parameter gradients for fixed `t`, `ε` and self-conditioning
    /// source. The self-conditioning estimate is never differentiated.
    pub fn compute_gradients(
        &self,
        x0: &Matrix,
        t: &[f64],
        eps: &Matrix,
        sc: &SelfCond,
    ) -> Result<(LossBreakdown, GradientSet, Matrix)> {
        let x_t = self.cfg.schedule.forward_diffuse_rows(x0, t, eps)?;
        let zeros = Matrix::zeros(x_t.rows(), x_t.cols());
        let sc_input = match sc {
            SelfCond::Zero => zeros,
            SelfCond::Network => self.params.forward(&x_t, t, &zeros)?.clamp(-1.0, 1.0),
            SelfCond::Given(m) => m.clone(),
        };
        let mut tape = Tape::new();
        let pred = self.params.forward_recorded(&x_t, t, &sc_input, &mut tape)?;
        let (loss, upstream) = loss_and_grad(&pred, x0, self.cfg.model)?;
        let grads = self.params.backward(&tape, &upstream)?;
        Ok((loss, grads.params, sc_input))
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &DataBatch) -> Result<LossBreakdown> {
        if batch.n() == 0 {
            return Err(SddError::arg("empty training batch"));
        }
        let x0 = self.target(batch)?;
        let n = x0.rows();
        let mut t = Vec::with_capacity(n);
        for _ in 0..n {
            t.push(self.rng.next_f64());
        }
        let eps = self.rng.gaussian(n, x0.cols());
        let sc = if self.rng.next_f64() < self.cfg.self_cond_prob {
            SelfCond::Network
        } else {
            SelfCond::Zero
        };
        let (loss, grads, sc_input) = self.compute_gradients(&x0, &t, &eps, &sc)?;
        if let Some(hook) = self.sc_hook.as_mut() {
            hook(&sc_input);
        }
        if !loss.total.is_finite() || !grads.tensors.iter().all(Matrix::is_finite) {
            return Err(SddError::Divergence { step: self.step });
        }
        adam_update(&mut self.params, &grads, &mut self.adam, self.cfg.learning_rate)?;
        ema_update(&mut self.ema, &self.params, self.cfg.ema_decay)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs `steps` training steps on shuffled batches of `data`, drawn with
    /// the configured seed; every call starts a fresh batch stream. Returns
    /// one log row per step.
    pub fn fit(&mut self, data: &DatasetHandle, steps: u64) -> Result<Vec<LogRow>> {
        let d = self.cfg.model.data_dim(self.params.arch().channels);
        if data.d() != d {
            return Err(SddError::shape(format!("dataset has d={}, model expects {d}", data.d())));
        }
        let mut batches = data.batches(self.cfg.batch_size, self.cfg.seed)?;
        let mut log = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let step = self.step;
            let batch = batches.next().expect("batch stream is endless");
            let loss = self.train_step(&batch)?;
            log.push(LogRow { step, loss });
        }
        Ok(log)
    }
}
