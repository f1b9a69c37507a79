//! AdamW, warmup + cosine schedule, and the training loop.

use serde::{Deserialize, Serialize};

use crate::data::{MixtureSpec, SyntheticInstance};
use crate::error::{MoleError, Result};
use crate::model::{AdapterMode, AdapterSpec, Sequence, ToyTransformer};
use crate::numerics::Tensor;
use crate::params::{derive_seed, ParamId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub balance_coef: f64,
    pub seed: u64,
    pub mode: AdapterMode,
    pub experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub attention_lora: bool,
    pub router_init_std: f64,
    /// Router learning rate as a multiple of the adapter learning rate.
    pub router_lr_scale: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdapterSpec::default();
        Self {
            batch_size: 16,
            peak_lr: 1e-2,
            min_lr: 1e-3,
            warmup_steps: 50,
            total_steps: 500,
            balance_coef: 1e-2,
            seed: 0,
            mode: a.mode,
            experts: a.experts,
            rank: a.rank,
            alpha: a.alpha,
            attention_lora: a.attention_lora,
            router_init_std: a.router_init_std,
            router_lr_scale: 1.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MoleError::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return bad(format!("train: need 0 <= min_lr ({}) <= peak_lr ({})", self.min_lr, self.peak_lr));
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "train.warmup_steps ({}) must be below train.total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.balance_coef >= 0.0 && self.balance_coef.is_finite()) {
            return bad("train.balance_coef must be finite and nonnegative".into());
        }
        if self.mode.is_moe() && self.experts == 0 {
            return bad("train.experts must be at least 1".into());
        }
        if !(self.router_lr_scale.is_finite() && self.router_lr_scale >= 0.0) {
            return bad("train.router_lr_scale must be finite and nonnegative".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be finite and nonnegative".into());
        }
        Ok(())
    }

    pub fn adapter_spec(&self) -> AdapterSpec {
        AdapterSpec {
            mode: self.mode,
            experts: if self.mode.is_moe() { self.experts } else { 1 },
            rank: self.rank,
            alpha: self.alpha,
            attention_lora: self.attention_lora,
            router_init_std: self.router_init_std,
        }
    }
}

/// Linear ramp to the peak over warmup, then cosine decay to the floor.
pub fn lr_at(config: &TrainConfig, step: usize) -> Result<f64> {
    let total = config.total_steps;
    if step > total {
        return Err(MoleError::StepOutOfRange { step, total });
    }
    let w = config.warmup_steps;
    if step < w {
        return Ok(config.peak_lr * step as f64 / w as f64);
    }
    if step == w {
        return Ok(config.peak_lr);
    }
    let progress = (step - w) as f64 / (total - w) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(config.min_lr + (config.peak_lr - config.min_lr) * cos)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub param: ParamId,
    /// Multiplier on the scheduled learning rate for this parameter.
    pub lr_scale: f64,
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW state; moments exist only for trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new(model: &ToyTransformer, weight_decay: f64, router_lr_scale: f64) -> Self {
        let moments = model
            .store
            .trainable_ids()
            .map(|id| {
                let shape = model.store.get(id).shape().to_vec();
                let router = model.store.param(id).name.ends_with(".router");
                Moments {
                    param: id,
                    lr_scale: if router { router_lr_scale } else { 1.0 },
                    m: Tensor::zeros(&shape),
                    v: Tensor::zeros(&shape),
                }
            })
            .collect();
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            moments,
        }
    }

    /// One decoupled-weight-decay Adam update. `grads` must be in the order
    /// produced by `trainable_grads`.
    pub fn update(&mut self, model: &mut ToyTransformer, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if grads.len() != self.moments.len() {
            return Err(MoleError::Contract(format!(
                "{} gradients for {} optimizer slots",
                grads.len(),
                self.moments.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (slot, (id, g)) in self.moments.iter_mut().zip(grads) {
            if slot.param != *id {
                return Err(MoleError::Contract("gradient order differs from optimizer order".into()));
            }
            let lr = lr * slot.lr_scale;
            let p = model.store.get_mut(*id);
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *pi);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub lb_loss: f64,
    pub lr: f64,
    /// Max expert-load fraction of each MoE layer.
    pub max_load: Vec<f64>,
}

impl StepRecord {
    pub fn csv_header(layers: usize) -> String {
        let mut s = "step,lm_loss,lb_loss,lr".to_string();
        for l in 0..layers {
            s.push_str(&format!(",max_load_layer{l}"));
        }
        s
    }

    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{},{},{}", self.step, self.lm_loss, self.lb_loss, self.lr);
        for m in &self.max_load {
            s.push_str(&format!(",{m}"));
        }
        s
    }
}

pub struct TrainedModel {
    pub model: ToyTransformer,
    pub optimizer: OptimizerState,
    pub metrics: Vec<StepRecord>,
}

/// The training stream: independent of eval sets but fixed by the mixture and train seeds.
pub fn training_stream(mix: &MixtureSpec, config: &TrainConfig) -> MixtureSpec {
    MixtureSpec {
        domains: mix.domains.clone(),
        seed: derive_seed(mix.seed ^ config.seed, "train-stream"),
    }
}

/// Trains the model's adapters and routers on fresh categorical batches.
pub fn train(model: ToyTransformer, mix: &MixtureSpec, config: &TrainConfig) -> Result<TrainedModel> {
    train_with(model, mix, config, |_| {})
}

/// As [`train`], calling `on_step` after every update.
pub fn train_with(
    mut model: ToyTransformer,
    mix: &MixtureSpec,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainedModel> {
    config.validate()?;
    if mix.max_token() > model.config.vocab {
        return Err(MoleError::Config(format!(
            "mixture uses token ids up to {} but vocab is {}",
            mix.max_token(),
            model.config.vocab
        )));
    }
    if mix.max_sequence_len() > model.config.max_context {
        return Err(MoleError::SequenceTooLong {
            len: mix.max_sequence_len(),
            max: model.config.max_context,
        });
    }
    let stream = training_stream(mix, config);
    let mut opt = OptimizerState::new(&model, config.weight_decay, config.router_lr_scale);
    let mut metrics = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let batch: Vec<Sequence> = stream
            .sample_range((step * config.batch_size) as u64, config.batch_size)?
            .iter()
            .map(SyntheticInstance::sequence)
            .collect();
        let (pass, grads) = match model.loss_and_grads(&batch, config.balance_coef) {
            Ok(r) => r,
            Err(MoleError::NonFinite { op }) => {
                return Err(MoleError::Diverged {
                    step,
                    reason: format!("non-finite value in {op}"),
                })
            }
            Err(e) => return Err(e),
        };
        if pass.loss.lm_loss.is_nan() {
            return Err(MoleError::Diverged {
                step,
                reason: "lm loss is NaN".into(),
            });
        }
        let lr = lr_at(config, step + 1)?;
        opt.update(&mut model, &grads, lr)?;
        let rec = StepRecord {
            step,
            lm_loss: pass.loss.lm_loss,
            lb_loss: pass.loss.lb_loss,
            lr,
            max_load: pass.routing.iter().map(|(d, _)| d.max_load_fraction()).collect(),
        };
        on_step(&rec);
        metrics.push(rec);
    }
    Ok(TrainedModel {
        model,
        optimizer: opt,
        metrics,
    })
}

/// Mean lm loss per supervised token over `instances`.
pub fn evaluate(model: &ToyTransformer, instances: &[SyntheticInstance]) -> Result<f64> {
    let mut weighted = 0.0;
    let mut count = 0usize;
    for chunk in instances.chunks(32) {
        let seqs: Vec<Sequence> = chunk.iter().map(SyntheticInstance::sequence).collect();
        let n: usize = seqs.iter().map(|s| s.loss_mask.iter().filter(|&&m| m).count()).sum();
        let pass = model.forward(&seqs, 0.0)?;
        weighted += pass.loss.lm_loss * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(MoleError::EmptyMask);
    }
    Ok(weighted / count as f64)
}
