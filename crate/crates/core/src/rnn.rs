//! Single-layer LSTM with a linear read-out, trained by full backpropagation
//! through time and Adam. Everything is `f64`.
//!
//! Gate blocks are stacked in the order input, forget, candidate, output:
//!
//! ```text
//! a_t = W x_t + U h_{t-1} + b          (4H)
//! i, f, o = σ(a_i), σ(a_f), σ(a_o)     g = tanh(a_g)
//! c_t = f ⊙ c_{t-1} + i ⊙ g            h_t = o ⊙ tanh(c_t)
//! y_t = Wy h_t + by
//! ```

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim: 32,
            output_dim,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!(
                "all model dimensions must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `4H(D + H + 1) + O(H + 1)`
    pub fn param_count(&self) -> usize {
        let (d, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        4 * h * (d + h + 1) + o * (h + 1)
    }
}

/// Parameter tensors, stored row-major. Also used for gradients and Adam
/// moments, which share the same shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// input to gates, `4H × D`
    pub w: Vec<f64>,
    /// hidden to gates, `4H × H`
    pub u: Vec<f64>,
    /// gate bias, `4H`
    pub b: Vec<f64>,
    /// head weights, `O × H`
    pub wy: Vec<f64>,
    /// head bias, `O`
    pub by: Vec<f64>,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h, o) = (cfg.input_dim, cfg.hidden_dim, cfg.output_dim);
        Params {
            w: vec![0.0; 4 * h * d],
            u: vec![0.0; 4 * h * h],
            b: vec![0.0; 4 * h],
            wy: vec![0.0; o * h],
            by: vec![0.0; o],
        }
    }

    pub fn tensors(&self) -> [&Vec<f64>; 5] {
        [&self.w, &self.u, &self.b, &self.wy, &self.by]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.w,
            &mut self.u,
            &mut self.b,
            &mut self.wy,
            &mut self.by,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        let [w, u, b, wy, by] = self.tensors();
        w.iter().chain(u).chain(b).chain(wy).chain(by)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let [w, u, b, wy, by] = self.tensors_mut();
        w.iter_mut()
            .chain(u.iter_mut())
            .chain(b.iter_mut())
            .chain(wy.iter_mut())
            .chain(by.iter_mut())
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub(crate) fn shape_matches(&self, other: &Params) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.len() == b.len())
    }

    /// FNV-1a over the parameter bits; identifies the weights a cache was
    /// produced with.
    fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in self.iter() {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqModel {
    pub config: ModelConfig,
    pub params: Params,
}

pub type Sequence = Vec<Vec<f64>>;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-step activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    fingerprint: u64,
    inputs: Sequence,
    outputs: Sequence,
    /// gate activations `[i | f | g | o]` per step
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
}

impl Cache {
    pub fn outputs(&self) -> &Sequence {
        &self.outputs
    }
}

impl SeqModel {
    /// Uniform(-k, k) initialisation with `k = 1/√H`; forget-gate biases
    /// start at +1.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let k = 1.0 / (config.hidden_dim as f64).sqrt();
        let mut params = Params::zeros(&config);
        for v in params.iter_mut() {
            *v = rng.gen_range(-k..k);
        }
        let h = config.hidden_dim;
        for v in &mut params.b[h..2 * h] {
            *v = 1.0;
        }
        Ok(SeqModel { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(SeqModel {
            params: Params::zeros(&config),
            config,
        })
    }

    fn check_input(&self, xs: &[Vec<f64>]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::Shape(
                "sequence must contain at least one step".into(),
            ));
        }
        if let Some((t, x)) = xs
            .iter()
            .enumerate()
            .find(|(_, x)| x.len() != self.config.input_dim)
        {
            return Err(Error::Shape(format!(
                "step {t} has {} features, model expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Run the recurrence from zero state, keeping what backward needs.
    pub fn forward(&self, xs: &[Vec<f64>]) -> Result<(Sequence, Cache)> {
        self.check_input(xs)?;
        let ModelConfig {
            input_dim: d,
            hidden_dim: h,
            output_dim: o,
            ..
        } = self.config;
        let p = &self.params;
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut cache = Cache {
            fingerprint: p.fingerprint(),
            inputs: xs.to_vec(),
            outputs: Vec::with_capacity(xs.len()),
            gates: Vec::with_capacity(xs.len()),
            cells: Vec::with_capacity(xs.len()),
            hiddens: Vec::with_capacity(xs.len()),
        };

        for x in xs {
            let mut a = p.b.clone();
            for (r, ar) in a.iter_mut().enumerate() {
                let wr = &p.w[r * d..(r + 1) * d];
                let ur = &p.u[r * h..(r + 1) * h];
                *ar += wr.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
                    + ur.iter().zip(&h_prev).map(|(u, h)| u * h).sum::<f64>();
            }
            for (r, ar) in a.iter_mut().enumerate() {
                *ar = if (2 * h..3 * h).contains(&r) {
                    ar.tanh()
                } else {
                    sigmoid(*ar)
                };
            }
            let mut c = vec![0.0; h];
            let mut hid = vec![0.0; h];
            for j in 0..h {
                let (i_g, f_g, g_g, o_g) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                c[j] = f_g * c_prev[j] + i_g * g_g;
                hid[j] = o_g * c[j].tanh();
            }
            let y: Vec<f64> = (0..o)
                .map(|k| {
                    p.by[k]
                        + p.wy[k * h..(k + 1) * h]
                            .iter()
                            .zip(&hid)
                            .map(|(w, h)| w * h)
                            .sum::<f64>()
                })
                .collect();
            cache.gates.push(a);
            cache.cells.push(c.clone());
            cache.hiddens.push(hid.clone());
            cache.outputs.push(y);
            h_prev = hid;
            c_prev = c;
        }
        Ok((cache.outputs.clone(), cache))
    }

    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<Sequence> {
        Ok(self.forward(xs)?.0)
    }

    /// Exact gradient of [`mse_loss`] between the cached outputs and `target`.
    pub fn backward(&self, cache: &Cache, target: &[Vec<f64>]) -> Result<Params> {
        if cache.fingerprint != self.params.fingerprint()
            || cache.inputs.first().map(Vec::len) != Some(self.config.input_dim)
        {
            return Err(Error::Shape(
                "cache was produced by a different model state".into(),
            ));
        }
        check_pair(&cache.outputs, target)?;
        let ModelConfig {
            input_dim: d,
            hidden_dim: h,
            output_dim: o,
            ..
        } = self.config;
        let p = &self.params;
        let t_len = cache.outputs.len();
        let norm = 2.0 / (t_len * o) as f64;
        let mut grad = Params::zeros(&self.config);
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let zeros = vec![0.0; h];

        for t in (0..t_len).rev() {
            let hid = &cache.hiddens[t];
            let c = &cache.cells[t];
            let a = &cache.gates[t];
            let x = &cache.inputs[t];
            let h_prev = if t > 0 { &cache.hiddens[t - 1] } else { &zeros };
            let c_prev = if t > 0 { &cache.cells[t - 1] } else { &zeros };

            let dy: Vec<f64> = cache.outputs[t]
                .iter()
                .zip(&target[t])
                .map(|(y, z)| norm * (y - z))
                .collect();
            let mut dh = dh_next.clone();
            for k in 0..o {
                grad.by[k] += dy[k];
                for j in 0..h {
                    grad.wy[k * h + j] += dy[k] * hid[j];
                    dh[j] += p.wy[k * h + j] * dy[k];
                }
            }

            let mut da = vec![0.0; 4 * h];
            for j in 0..h {
                let (i_g, f_g, g_g, o_g) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                let tc = c[j].tanh();
                let d_o = dh[j] * tc;
                let dc = dh[j] * o_g * (1.0 - tc * tc) + dc_next[j];
                let d_f = dc * c_prev[j];
                let d_i = dc * g_g;
                let d_g = dc * i_g;
                dc_next[j] = dc * f_g;
                da[j] = d_i * i_g * (1.0 - i_g);
                da[h + j] = d_f * f_g * (1.0 - f_g);
                da[2 * h + j] = d_g * (1.0 - g_g * g_g);
                da[3 * h + j] = d_o * o_g * (1.0 - o_g);
            }

            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for (r, &dar) in da.iter().enumerate() {
                grad.b[r] += dar;
                for (gw, xv) in grad.w[r * d..(r + 1) * d].iter_mut().zip(x) {
                    *gw += dar * xv;
                }
                let ur = &p.u[r * h..(r + 1) * h];
                for j in 0..h {
                    grad.u[r * h + j] += dar * h_prev[j];
                    dh_next[j] += ur[j] * dar;
                }
            }
        }
        Ok(grad)
    }
}

fn check_pair(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} steps, target has {}",
            pred.len(),
            target.len()
        )));
    }
    if let Some(t) = (0..pred.len()).find(|&t| pred[t].len() != target[t].len()) {
        return Err(Error::Shape(format!(
            "step {t}: prediction width {} vs target width {}",
            pred[t].len(),
            target[t].len()
        )));
    }
    Ok(())
}

/// Mean of the squared residuals over every step and output.
pub fn mse_loss(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    check_pair(pred, target)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(target) {
        for (a, b) in p.iter().zip(t) {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients without
/// touching the model or the optimiser state.
pub fn adam_step(model: &mut SeqModel, grad: &Params, state: &mut AdamState) -> Result<()> {
    if !grad.shape_matches(&model.params) || !state.m.shape_matches(&model.params) {
        return Err(Error::Shape(
            "gradient/optimiser shapes differ from model".into(),
        ));
    }
    if !grad.all_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            detail: "non-finite gradient".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (((p, g), m), v) in model
        .params
        .iter_mut()
        .zip(grad.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    /// Stop once the monitored loss has not improved for this many epochs.
    pub patience: usize,
    pub lr: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 200,
            patience: 20,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One (features, targets) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub inputs: Sequence,
    pub targets: Sequence,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    /// Empty when no validation set was given.
    pub validation: Vec<f64>,
}

impl LossHistory {
    pub fn epochs(&self) -> usize {
        self.train.len()
    }
}

pub fn dataset_mse(model: &SeqModel, data: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        total += mse_loss(&model.predict(&ex.inputs)?, &ex.targets)?;
    }
    Ok(total / data.len() as f64)
}

/// Train with one Adam step per sequence, visiting sequences in a seeded
/// shuffled order each epoch. Early stopping watches validation MSE (training
/// MSE when no validation set is given); the best model seen is returned.
pub fn fit(
    mut model: SeqModel,
    train: &[Example],
    validation: &[Example],
    cfg: &FitConfig,
) -> Result<(SeqModel, LossHistory)> {
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let mut history = LossHistory::default();
    let mut adam = AdamState::new(&model.config, cfg.lr);
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &train[i];
            let (pred, cache) = model.forward(&ex.inputs)?;
            let loss = mse_loss(&pred, &ex.targets)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("loss {loss} on sequence {i}"),
                });
            }
            let grad = model.backward(&cache, &ex.targets)?;
            adam_step(&mut model, &grad, &mut adam).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { epoch, detail },
                other => other,
            })?;
        }
        let train_loss = dataset_mse(&model, train)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("training loss {train_loss}"),
            });
        }
        history.train.push(train_loss);
        let monitored = if validation.is_empty() {
            train_loss
        } else {
            let v = dataset_mse(&model, validation)?;
            history.validation.push(v);
            v
        };
        if monitored < best_loss {
            best_loss = monitored;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if history.train.is_empty() {
        return Ok((model, history));
    }
    Ok((best, history))
}
