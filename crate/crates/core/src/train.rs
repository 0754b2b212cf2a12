//! Two-stage training: known-class classifier pretraining, then end-to-end
//! episodic training.
//!
//! One instance (stage 1) or one episode (stage 2) per optimizer step; an
//! epoch is `train.steps_per_epoch` steps. Each stage starts its own learning
//! rate schedule and a fresh Adam state.

use camseg_tensor::{adam_step, AdamConfig, AdamState, ParamId, StepDecay, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{sample_episode, AuditLog, DatasetIndex, Instance, Pool, RenderedEpisode, Stage, StageSplit};
use crate::error::{Error, Result};
use crate::model::cam::classification_loss;
use crate::model::seg_head::seg_loss;
use crate::model::{ClassLabelVector, FewShotSegmenter, ModelConfig};
use crate::seed::mix;

const CLASSIFIER_STREAM: u64 = 0xC1A5;
const EPISODE_STREAM: u64 = 0xE915;
const REHEARSAL_STREAM: u64 = 0x2EE4;
const MODEL_STREAM: u64 = 0x30DE;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Adam over a fixed list of trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub ids: Vec<ParamId>,
    pub state: AdamState,
}

impl Optimizer {
    pub fn new(model: &FewShotSegmenter) -> Self {
        let ids = model.store().trainable_ids();
        let state = AdamState::new(ids.iter().map(|&id| model.store().get(id)));
        Optimizer { ids, state }
    }

    /// Accumulate the tape's gradients and take one step.
    pub fn step(&mut self, model: &mut FewShotSegmenter, tape: &Tape, lr: f64) -> Result<()> {
        let store = model.store_mut();
        store.accumulate_grads(tape);
        let mut params = store.many_mut(&self.ids);
        adam_step(&mut params, &mut self.state, AdamConfig::with_lr(lr as f32))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub optimizer: Optimizer,
    pub history: Vec<EpochLog>,
    pub audit: AuditLog,
}

pub fn schedule(cfg: &Config) -> StepDecay {
    StepDecay { base: cfg.train.lr, factor: cfg.train.lr_decay, every: cfg.train.decay_every_epochs }
}

pub fn model_config(cfg: &Config) -> ModelConfig {
    ModelConfig { backbone: cfg.backbone.clone(), ..ModelConfig::default() }
}

/// Freshly initialised model for the configured fold.
pub fn init_model(cfg: &Config) -> Result<FewShotSegmenter> {
    let split = StageSplit::for_fold(cfg.train.fold)?;
    let mc = ModelConfig { num_classes: split.num_known(), ..model_config(cfg) };
    FewShotSegmenter::new(mc, mix(&[cfg.data.master_seed, MODEL_STREAM, cfg.train.fold as u64]))
}

/// A model for `cfg` carrying the parameters of `checkpoint`, which must have
/// been written under the same training configuration.
pub fn restore_model(cfg: &Config, checkpoint: &Checkpoint) -> Result<FewShotSegmenter> {
    if checkpoint.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "checkpoint was written under config hash {:016x}, current config hashes to {:016x}",
            checkpoint.config_hash,
            cfg.hash()
        )));
    }
    let mut model = init_model(cfg)?;
    checkpoint.restore_into(&mut model)?;
    Ok(model)
}

fn check_finite(value: f32, stage: Stage, step: usize) -> Result<f32> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!("{} loss became {value} at step {step}", stage.as_str())))
    }
}

/// Classification loss of one masked instance whose class sits at `channel`.
pub fn classifier_loss(tape: &mut Tape, model: &FewShotSegmenter, instance: &Instance, channel: usize) -> Result<camseg_tensor::Var> {
    let s = model.support_weights(tape, &instance.image_tensor(), &instance.mask_tensor())?;
    let labels = ClassLabelVector::one_hot(model.cam().num_classes(), channel)?;
    classification_loss(tape, s, &labels)
}

/// One stage-1 update; returns the loss before the update.
pub fn classifier_step(
    model: &mut FewShotSegmenter,
    opt: &mut Optimizer,
    instance: &Instance,
    channel: usize,
    lr: f64,
) -> Result<f32> {
    let mut tape = Tape::new();
    let loss = classifier_loss(&mut tape, model, instance, channel)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    opt.step(model, &tape, lr)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodicLoss {
    pub seg: f32,
    pub cls: f32,
}

impl EpisodicLoss {
    pub fn total(&self, lambda: f64) -> f64 {
        self.seg as f64 + lambda * self.cls as f64
    }
}

/// One stage-2 update on `episode`, plus `λ·L_cls` on a known-class
/// rehearsal instance when given.
pub fn episodic_step(
    model: &mut FewShotSegmenter,
    opt: &mut Optimizer,
    episode: &RenderedEpisode,
    rehearsal: Option<(&Instance, usize)>,
    lambda: f64,
    lr: f64,
) -> Result<EpisodicLoss> {
    let mut tape = Tape::new();
    let out = model.forward_episode(&mut tape, episode)?;
    let seg = seg_loss(&mut tape, out.logits, &episode.query.mask_tensor())?;
    let mut loss = seg;
    let mut cls_value = 0.0;
    if let Some((instance, channel)) = rehearsal.filter(|_| lambda != 0.0) {
        let cls = classifier_loss(&mut tape, model, instance, channel)?;
        cls_value = tape.value(cls).item()?;
        let weighted = tape.scale(cls, lambda as f32);
        loss = tape.add(seg, weighted)?;
    }
    let seg_value = tape.value(seg).item()?;
    tape.backward(loss)?;
    opt.step(model, &tape, lr)?;
    Ok(EpisodicLoss { seg: seg_value, cls: cls_value })
}

fn draw_known_instance(
    index: &DatasetIndex,
    split: &StageSplit,
    seed: u64,
) -> Result<(usize, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_id = split.classifier_classes[rng.random_range(0..split.classifier_classes.len())];
    let pool = index.pool(class_id, Pool::Train)?;
    if pool.is_empty() {
        return Err(Error::Capacity { class_id, available: 0, needed: 1 });
    }
    Ok((class_id, pool[rng.random_range(0..pool.len())]))
}

/// Stage 1: the backbone and activation head learn to classify the known
/// classes from masked single-instance inputs.
pub fn train_classifier(
    cfg: &Config,
    index: &DatasetIndex,
    model: &mut FewShotSegmenter,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<StageOutcome> {
    let split = StageSplit::for_fold(cfg.train.fold)?;
    model.set_stage(Stage::Classifier);
    let mut opt = Optimizer::new(model);
    let sched = schedule(cfg);
    let mut history = Vec::with_capacity(cfg.train.cls_epochs);
    let mut audit = AuditLog::default();
    let mut step = 0;
    for epoch in 0..cfg.train.cls_epochs {
        let lr = sched.lr_at(epoch);
        let mut total = 0.0f64;
        for _ in 0..cfg.train.steps_per_epoch {
            let seed = mix(&[cfg.data.master_seed, CLASSIFIER_STREAM, cfg.train.fold as u64, step as u64]);
            let (class_id, inst_seed) = draw_known_instance(index, &split, seed)?;
            audit.record(Stage::Classifier, step, class_id, inst_seed, Pool::Train);
            let instance = index.render(class_id, inst_seed)?;
            let channel = split.channel_of(class_id).expect("classifier class");
            let loss = classifier_step(model, &mut opt, &instance, channel, lr)?;
            total += check_finite(loss, Stage::Classifier, step)? as f64;
            step += 1;
        }
        let log = EpochLog { stage: Stage::Classifier, epoch, lr, mean_loss: total / cfg.train.steps_per_epoch.max(1) as f64 };
        on_epoch(&log);
        history.push(log);
    }
    Ok(StageOutcome { optimizer: opt, history, audit })
}

/// Stage 2: end-to-end episodic training on the episodic classes with the
/// configured backbone stages frozen.
pub fn train_episodic(
    cfg: &Config,
    index: &DatasetIndex,
    model: &mut FewShotSegmenter,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<StageOutcome> {
    let split = StageSplit::for_fold(cfg.train.fold)?;
    model.set_stage(Stage::Episodic);
    let mut opt = Optimizer::new(model);
    let sched = schedule(cfg);
    let lambda = cfg.train.cls_lambda;
    let mut history = Vec::with_capacity(cfg.train.episodic_epochs);
    let mut audit = AuditLog::default();
    let mut step = 0;
    for epoch in 0..cfg.train.episodic_epochs {
        let lr = sched.lr_at(epoch);
        let mut total = 0.0f64;
        for _ in 0..cfg.train.steps_per_epoch {
            let fold = cfg.train.fold as u64;
            let ep_seed = mix(&[cfg.data.master_seed, EPISODE_STREAM, fold, step as u64]);
            let episode = sample_episode(index, &split.episodic_classes, cfg.train.k, Pool::Train, ep_seed)?;
            audit.record_episode(Stage::Episodic, step, &episode);
            let rendered = episode.render(index)?;
            let rehearsal = if lambda != 0.0 {
                let seed = mix(&[cfg.data.master_seed, REHEARSAL_STREAM, fold, step as u64]);
                let (class_id, inst_seed) = draw_known_instance(index, &split, seed)?;
                audit.record(Stage::Episodic, step, class_id, inst_seed, Pool::Train);
                Some((index.render(class_id, inst_seed)?, split.channel_of(class_id).expect("classifier class")))
            } else {
                None
            };
            let loss = episodic_step(model, &mut opt, &rendered, rehearsal.as_ref().map(|(i, c)| (i, *c)), lambda, lr)?;
            let total_loss = loss.total(lambda);
            check_finite(total_loss as f32, Stage::Episodic, step)?;
            total += total_loss;
            step += 1;
        }
        let log = EpochLog { stage: Stage::Episodic, epoch, lr, mean_loss: total / cfg.train.steps_per_epoch.max(1) as f64 };
        on_epoch(&log);
        history.push(log);
    }
    Ok(StageOutcome { optimizer: opt, history, audit })
}

/// Fraction of held-out known-class instances whose S peaks at their own
/// channel. Uses the first `per_class` test-pool instances of each
/// classifier class.
pub fn classifier_accuracy(model: &FewShotSegmenter, index: &DatasetIndex, split: &StageSplit, per_class: usize) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for &class_id in &split.classifier_classes {
        let channel = split.channel_of(class_id).expect("classifier class");
        for &seed in index.pool(class_id, Pool::Test)?.iter().take(per_class) {
            let instance = index.render(class_id, seed)?;
            let mut tape = Tape::no_grad();
            let s = model.support_weights(&mut tape, &instance.image_tensor(), &instance.mask_tensor())?;
            let scores = tape.value(s.0).data();
            let best = scores
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > scores[b] { i } else { b });
            hits += (best == channel) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}
