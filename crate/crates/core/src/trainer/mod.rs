//! Multi-task training: batch assembly (inpainting vs text-to-image, random
//! precision level, label vs caption, conditioning dropout), the optimizer
//! step, and the run directory with checkpoints and a metrics log.

mod checkpoint;
mod run;

pub use checkpoint::{
    export_weights, load_checkpoint, load_model, save_checkpoint, CHECKPOINT_FORMAT,
};
pub use run::{config_hash, run_training, MetricsLog, RunManifest};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    null_condition, Condition, Denoiser, DenoiserConfig, DenoiserInput, DenoiserOutput, Vocabulary,
};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossBreakdown, LossConfig};
use crate::maskops::{precision_mask, InstanceMask, LadderConfig, PrecisionMask};
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Graph};
use crate::rng::{keyed_rng, normal_tensor};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::shapesdata::TrainingSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskProbabilities {
    pub inpainting: f64,
    pub text_to_image: f64,
}

impl Default for TaskProbabilities {
    fn default() -> Self {
        Self {
            inpainting: 0.8,
            text_to_image: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub grad_clip: f64,
    pub cond_dropout_prob: f64,
    /// Probability that an inpainting item is conditioned on its caption
    /// rather than its bare class label.
    pub caption_prob: f64,
    /// Directory written by `write_dataset`.
    pub dataset: String,
    pub tasks: TaskProbabilities,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub ladder: LadderConfig,
    pub model: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            total_steps: 20_000,
            checkpoint_every: 1_000,
            grad_clip: 1.0,
            cond_dropout_prob: 0.1,
            caption_prob: 0.5,
            dataset: "data/train".into(),
            tasks: TaskProbabilities::default(),
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            ladder: LadderConfig::default(),
            model: DenoiserConfig::default(),
        }
    }
}

fn check_prob(field: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config(field, format!("{p} is not a probability")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        check_prob("tasks.inpainting", self.tasks.inpainting)?;
        check_prob("tasks.text_to_image", self.tasks.text_to_image)?;
        if (self.tasks.inpainting + self.tasks.text_to_image - 1.0).abs() > 1e-9 {
            return Err(Error::config("tasks", "probabilities must sum to 1"));
        }
        check_prob("cond_dropout_prob", self.cond_dropout_prob)?;
        check_prob("caption_prob", self.caption_prob)?;
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1)
            || !(0.0..1.0).contains(&self.optimizer.beta2)
        {
            return Err(Error::config("optimizer", "betas must lie in [0, 1)"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config(
                "grad_clip",
                "must be non-negative (0 disables)",
            ));
        }
        self.loss.validate()?;
        self.ladder.validate()?;
        self.schedule.build()?;
        self.model.validate()?;
        if self.model.levels != self.ladder.levels {
            return Err(Error::config("model.levels", "must equal ladder.levels"));
        }
        if self.model.timesteps != self.schedule.steps {
            return Err(Error::config(
                "model.timesteps",
                "must equal schedule.steps",
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("toml", e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Inpainting,
    TextToImage,
}

/// One assembled batch. Text-to-image items carry the full-frame mask at
/// level S and no mask target.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub sample_ids: Vec<usize>,
    /// `(B, C, H, W)`.
    pub images: Tensor<f32>,
    pub instance_masks: Vec<InstanceMask>,
    pub precision_masks: Vec<PrecisionMask>,
    pub conditions: Vec<Condition>,
    pub tasks: Vec<Task>,
    pub timesteps: Vec<usize>,
    /// `(B, C, H, W)`.
    pub noise: Tensor<f32>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn count(&self, task: Task) -> usize {
        self.tasks.iter().filter(|&&t| t == task).count()
    }
}

const BATCH_STREAM: u64 = 0xBA7C;

/// Draw the batch for `step`. Every item's randomness is keyed on
/// `(seed, step, item)`, so a batch does not depend on earlier batches.
pub fn assemble_batch(
    data: &[TrainingSample],
    vocab: &Vocabulary,
    step: u64,
    cfg: &TrainConfig,
) -> Result<TrainingBatch> {
    if data.is_empty() {
        return Err(Error::config("dataset", "is empty"));
    }
    let levels = cfg.ladder.levels;
    let b = cfg.batch_size;
    let mut out = TrainingBatch {
        sample_ids: Vec::with_capacity(b),
        images: Tensor::zeros(&[0]),
        instance_masks: Vec::with_capacity(b),
        precision_masks: Vec::with_capacity(b),
        conditions: Vec::with_capacity(b),
        tasks: Vec::with_capacity(b),
        timesteps: Vec::with_capacity(b),
        noise: Tensor::zeros(&[0]),
    };
    let mut images = Vec::with_capacity(b);
    let mut noises = Vec::with_capacity(b);
    for item in 0..b {
        let mut rng = keyed_rng(cfg.seed, &[BATCH_STREAM, step, item as u64]);
        let sample = &data[rng.random_range(0..data.len())];
        let (h, w) = (sample.mask.height(), sample.mask.width());
        let task = if rng.random_bool(cfg.tasks.inpainting) {
            Task::Inpainting
        } else {
            Task::TextToImage
        };
        let (pm, mut cond) = match task {
            Task::Inpainting => {
                let s = rng.random_range(0..=levels);
                let pm =
                    precision_mask(&sample.mask, s, &cfg.ladder).map_err(|e| Error::Sample {
                        id: sample.id,
                        reason: e.to_string(),
                    })?;
                let token = if rng.random_bool(cfg.caption_prob) {
                    sample.caption_token
                } else {
                    sample.class_token
                };
                (pm, vocab.decode(token)?)
            }
            Task::TextToImage => {
                let pm = PrecisionMask {
                    mask: InstanceMask::full(h, w),
                    level: levels,
                };
                (pm, vocab.decode(sample.caption_token)?)
            }
        };
        if rng.random_bool(cfg.cond_dropout_prob) {
            cond = null_condition();
        }
        let t = rng.random_range(1..=cfg.schedule.steps);
        noises.push(normal_tensor::<f32, _>(sample.image.shape(), &mut rng));
        images.push(sample.image.clone());
        out.sample_ids.push(sample.id);
        out.instance_masks.push(sample.mask.clone());
        out.precision_masks.push(pm);
        out.conditions.push(cond);
        out.tasks.push(task);
        out.timesteps.push(t);
    }
    out.images = Tensor::stack(&images)?;
    out.noise = Tensor::stack(&noises)?;
    Ok(out)
}

/// Model, optimizer and step counter: everything a checkpoint restores.
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Denoiser<f32>,
    pub optimizer: Adam<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Denoiser::new(config.model.clone(), config.seed)?;
        let optimizer = Adam::new(config.optimizer, model.params());
        Ok(Self {
            config,
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.config.schedule.build()
    }
}

/// Logged outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub inpainting: usize,
    pub text_to_image: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Network inputs for a batch: masked forward noising of every item.
pub fn batch_inputs(batch: &TrainingBatch, sched: &NoiseSchedule) -> Result<DenoiserInput<f32>> {
    let mut xs = Vec::with_capacity(batch.len());
    let mut ms = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let m = batch.precision_masks[i].mask.to_tensor::<f32>();
        let x0 = batch.images.item(i)?;
        let eps = batch.noise.item(i)?;
        xs.push(sched.masked_q_sample(&x0, &m, batch.timesteps[i], &eps)?);
        ms.push(m);
    }
    Ok(DenoiserInput {
        x_t: Tensor::stack(&xs)?,
        mask: Tensor::stack(&ms)?,
        t: batch.timesteps.clone(),
        s: batch.precision_masks.iter().map(|p| p.level).collect(),
        tokens: batch.conditions.iter().map(|c| c.token_id).collect(),
    })
}

/// Loss and head gradients for a batch without touching the parameters.
pub fn evaluate_batch(
    model: &Denoiser<f32>,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
    loss: &LossConfig,
) -> Result<(LossBreakdown, Graph<f32>, crate::nn::Var, Tensor<f32>)> {
    let inp = batch_inputs(batch, sched)?;
    let mut g = Graph::new();
    let head = model.record(&mut g, &inp)?;
    let out = DenoiserOutput::from_head(g.value(head))?;
    let targets: Vec<Option<&InstanceMask>> = batch
        .tasks
        .iter()
        .zip(&batch.instance_masks)
        .map(|(t, m)| (*t == Task::Inpainting).then_some(m))
        .collect();
    let bl = batch_loss(&batch.noise, &out, &targets, loss)?;
    let seed = DenoiserOutput::join_head(&bl.d_eps_hat, &bl.d_mask_logits)?;
    Ok((bl.breakdown, g, head, seed))
}

/// Forward, loss, backward, clip and one Adam update.
pub fn training_step(
    state: &mut TrainState,
    batch: &TrainingBatch,
    sched: &NoiseSchedule,
) -> Result<StepRecord> {
    let (loss, g, head, seed) = evaluate_batch(&state.model, batch, sched, &state.config.loss)?;
    let inpainting = batch.count(Task::Inpainting);
    let text_to_image = batch.count(Task::TextToImage);
    if !loss.total.is_finite() {
        let t_mean = batch.timesteps.iter().sum::<usize>() as f64 / batch.len() as f64;
        return Err(Error::NonFiniteLoss {
            step: state.step,
            inpainting,
            text_to_image,
            t_mean,
            t_max: batch.timesteps.iter().copied().max().unwrap_or(0),
        });
    }
    let grads = g.backward(&[(head, seed)])?;
    let mut pg = g.param_grads(&grads, state.model.params());
    let grad_norm = clip_grad_norm(&mut pg, state.config.grad_clip);
    state.optimizer.update(state.model.params_mut(), &pg);
    let record = StepRecord {
        step: state.step,
        inpainting,
        text_to_image,
        loss,
        grad_norm,
    };
    state.step += 1;
    Ok(record)
}

/// Assemble the batch for the current step and train on it.
pub fn train_one(
    state: &mut TrainState,
    data: &[TrainingSample],
    vocab: &Vocabulary,
    sched: &NoiseSchedule,
) -> Result<StepRecord> {
    let batch = assemble_batch(data, vocab, state.step, &state.config)?;
    training_step(state, &batch, sched)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::shapesdata::{Dataset, DatasetSpec};

    pub(crate) fn toy_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            schedule: ScheduleConfig {
                steps: 50,
                ..ScheduleConfig::default()
            },
            ladder: LadderConfig::for_resolution(16),
            model: DenoiserConfig {
                resolution: 16,
                base_width: 8,
                channel_mults: vec![1, 2],
                attention_resolutions: vec![8],
                head_dim: 8,
                embed_dim: 16,
                groups: 4,
                timesteps: 50,
                ..DenoiserConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub(crate) fn toy_data(count: usize) -> Dataset {
        Dataset::generate(&DatasetSpec {
            resolution: 16,
            size_min: 5,
            size_max: 10,
            count,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn default_config_is_valid_and_round_trips_toml() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("batch_sise = 3").is_err());
    }

    #[test]
    fn invalid_probabilities_are_rejected() {
        let cfg = TrainConfig {
            tasks: TaskProbabilities {
                inpainting: 0.7,
                text_to_image: 0.2,
            },
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "tasks"));
    }

    #[test]
    fn batches_are_deterministic_and_consistent() {
        let data = toy_data(20);
        let vocab = Vocabulary::default();
        let cfg = TrainConfig {
            batch_size: 32,
            ..toy_config()
        };
        let a = assemble_batch(&data.samples, &vocab, 7, &cfg).unwrap();
        let b = assemble_batch(&data.samples, &vocab, 7, &cfg).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.noise, b.noise);
        assert_eq!(a.timesteps, b.timesteps);
        assert_eq!(a.conditions, b.conditions);
        for i in 0..a.len() {
            let pm = &a.precision_masks[i];
            match a.tasks[i] {
                Task::TextToImage => {
                    assert!(pm.mask.is_full());
                    assert_eq!(pm.level, cfg.ladder.levels);
                }
                Task::Inpainting => assert!(a.instance_masks[i].is_subset_of(&pm.mask)),
            }
            assert!((1..=50).contains(&a.timesteps[i]));
        }
    }

    #[test]
    fn degenerate_task_and_dropout_settings() {
        let data = toy_data(10);
        let vocab = Vocabulary::default();
        let all_inpaint = TrainConfig {
            batch_size: 64,
            cond_dropout_prob: 0.0,
            tasks: TaskProbabilities {
                inpainting: 1.0,
                text_to_image: 0.0,
            },
            ..toy_config()
        };
        let b = assemble_batch(&data.samples, &vocab, 0, &all_inpaint).unwrap();
        assert_eq!(b.count(Task::Inpainting), 64);
        assert!(b.conditions.iter().all(|c| c.token_id != 0));
        let all_null = TrainConfig {
            cond_dropout_prob: 1.0,
            ..all_inpaint
        };
        let b = assemble_batch(&data.samples, &vocab, 0, &all_null).unwrap();
        assert!(b.conditions.iter().all(|c| *c == null_condition()));
    }

    #[test]
    fn background_of_model_input_is_clean() {
        let data = toy_data(10);
        let cfg = toy_config();
        let sched = cfg.schedule.build().unwrap();
        let batch = assemble_batch(&data.samples, &Vocabulary::default(), 3, &cfg).unwrap();
        let inp = batch_inputs(&batch, &sched).unwrap();
        for i in 0..batch.len() {
            let x = inp.x_t.item(i).unwrap();
            let x0 = batch.images.item(i).unwrap();
            let m = &batch.precision_masks[i].mask;
            for (k, (&a, &b)) in x.data().iter().zip(x0.data()).enumerate() {
                if m.data()[k % 256] == 0 {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn steps_move_the_loss() {
        let data = toy_data(16);
        let vocab = Vocabulary::default();
        let mut state = TrainState::new(toy_config()).unwrap();
        let sched = state.schedule().unwrap();
        let batch = assemble_batch(&data.samples, &vocab, 0, &state.config).unwrap();
        let r0 = training_step(&mut state, &batch, &sched).unwrap();
        let r1 = training_step(&mut state, &batch, &sched).unwrap();
        assert_ne!(r0.loss.total, r1.loss.total);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn lambda_only_changes_the_dice_term() {
        let data = toy_data(16);
        let vocab = Vocabulary::default();
        let cfg = toy_config();
        let sched = cfg.schedule.build().unwrap();
        let batch = assemble_batch(&data.samples, &vocab, 1, &cfg).unwrap();
        let mut with = TrainState::new(cfg.clone()).unwrap();
        let mut without = TrainState::new(TrainConfig {
            loss: LossConfig {
                lambda: 0.0,
                ..cfg.loss.clone()
            },
            ..cfg
        })
        .unwrap();
        let a = training_step(&mut with, &batch, &sched).unwrap();
        let b = training_step(&mut without, &batch, &sched).unwrap();
        assert_eq!(a.loss.seg, b.loss.seg);
        let dice = a.loss.dice.unwrap();
        assert!((a.loss.total - b.loss.total - 0.01 * dice).abs() < 1e-12);
    }
}
