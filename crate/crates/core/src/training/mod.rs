//! Cross-entropy pre-training and self-critical sequence optimization.
//!
//! The self-critical stage samples K rollouts per image, scores each with
//! CIDEr-D against the image's references, and weights the rollout's summed
//! log-probability by its advantage over the mean of the other rollouts'
//! rewards divided by K (the stated baseline divides by K, not K−1, which
//! biases the baseline low; implemented verbatim).

pub mod optimizer;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SceneSample, TokenSequence, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::metrics::{build_idf, cider_d, corpus_bleu_n, corpus_cider_d, NGramStats};
use crate::model::decode::{sample, StepScorer};
use crate::model::{Model, ModelConfig};
use crate::tensor::ops::{gather_rows, hadamard, log_softmax_rows, scale, sum_all};
use crate::tensor::serialize::{read_checkpoint, write_checkpoint};
use crate::tensor::{backward, no_grad, Tensor};

pub use optimizer::{lr_at, Adam};

/// Training hyperparameters. Every field has a default; unknown keys in a
/// config document are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub anneal_factor: f64,
    pub anneal_every_epochs: usize,
    pub epochs: usize,
    /// Rollouts per image in the self-critical stage.
    pub scst_k: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub grad_clip: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Stop cross-entropy training once validation accuracy reaches this.
    pub target_val_accuracy: Option<f64>,
    /// Stop self-critical training once validation CIDEr-D reaches this.
    pub target_val_cider: Option<f64>,
    /// Optional fine-tuning phase at a small fixed LR after the main loop.
    pub fine_tune: bool,
    pub fine_tune_epochs: usize,
    pub fine_tune_lr: f64,
    pub fine_tune_batch_size: usize,
    pub sample_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            peak_lr: 2e-3,
            warmup_steps: 200,
            anneal_factor: 0.8,
            anneal_every_epochs: 2,
            epochs: 20,
            scst_k: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            grad_clip: 1.0,
            patience: 5,
            target_val_accuracy: None,
            target_val_cider: None,
            fine_tune: false,
            fine_tune_epochs: 1,
            fine_tune_lr: 5e-5,
            fine_tune_batch_size: 10,
            sample_temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scst_k < 2 {
            return Err(Error::config(
                "scst_k must be at least 2 (the baseline averages the other rollouts)".to_string(),
            ));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be at least 1".to_string()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive".to_string()));
        }
        Ok(())
    }

    /// SCST variant of the schedule: a much lower peak LR keeps the
    /// high-variance policy gradient from destabilizing the policy.
    pub fn scst_defaults(mut self) -> Self {
        self.peak_lr /= 10.0;
        self.epochs = 10;
        self
    }
}

// ── losses ───────────────────────────────────────────────────────────

/// Teacher-forced cross entropy: −Σ log p(y*_t | y*_{<t}), mean over non-pad
/// targets. `targets[t]` is the ground-truth token for logits row t.
pub fn xe_loss(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let t = logits.rows();
    if targets.len() != t {
        return Err(Error::dim(format!(
            "xe_loss: {} targets for {t} logit rows",
            targets.len()
        )));
    }
    let non_pad = targets.iter().filter(|&&y| y != PAD).count();
    if non_pad == 0 {
        return Err(Error::contract("xe_loss: all targets are padding".to_string()));
    }
    let idx: Vec<usize> = targets.iter().map(|&y| y as usize).collect();
    let mask: Vec<f64> = targets.iter().map(|&y| if y == PAD { 0.0 } else { 1.0 }).collect();
    let logp = log_softmax_rows(logits)?;
    let picked = gather_rows(&logp, &idx)?;
    let masked = hadamard(&picked, &Tensor::from_vec(vec![t], mask)?)?;
    Ok(scale(&sum_all(&masked), -1.0 / non_pad as f64))
}

/// Fraction of non-pad positions where the argmax token equals the target.
pub fn teacher_accuracy(logits: &Tensor, targets: &[u32]) -> (usize, usize) {
    let v = logits.cols();
    let mut correct = 0;
    let mut total = 0;
    for (t, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        total += 1;
        let row = &logits.data()[t * v..(t + 1) * v];
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        if best == y as usize {
            correct += 1;
        }
    }
    (correct, total)
}

/// Mean-of-others baseline: b(c_i) = (1/K)·Σ_{j≠i} R(c_j). The divisor is
/// K, not K−1, matching the stated formula.
pub fn scst_baseline(rewards: &[f64], i: usize) -> Result<f64> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::config(format!("scst baseline needs K ≥ 2, got {k}")));
    }
    if i >= k {
        return Err(Error::config(format!("baseline index {i} out of {k}")));
    }
    Ok(rewards
        .iter()
        .enumerate()
        .filter_map(|(j, &r)| (j != i).then_some(r))
        .sum::<f64>()
        / k as f64)
}

/// Policy-gradient loss: −Σ_i (r_i − b(c_i)) · Σ_t log p(y_t | y_{<t}),
/// mean-reduced over the K samples. `logp_sums[i]` is the (scalar, on-tape)
/// summed log-probability of sample i.
pub fn scst_loss(logp_sums: &[Tensor], rewards: &[f64]) -> Result<Tensor> {
    if logp_sums.len() != rewards.len() {
        return Err(Error::dim(format!(
            "scst_loss: {} samples vs {} rewards",
            logp_sums.len(),
            rewards.len()
        )));
    }
    let k = rewards.len();
    let mut acc: Option<Tensor> = None;
    for (i, sum_logp) in logp_sums.iter().enumerate() {
        let advantage = rewards[i] - scst_baseline(rewards, i)?;
        let term = scale(sum_logp, -advantage / k as f64);
        acc = Some(match acc {
            Some(a) => crate::tensor::ops::add(&a, &term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::config("scst_loss: zero samples".to_string()))
}

// ── dataset preparation ──────────────────────────────────────────────

/// A tokenized training item: features plus the canonical caption as the
/// teacher-forcing target, with all references kept for metric scoring.
pub struct TrainSample {
    pub id: u64,
    pub features: Tensor,
    /// Canonical caption token ids: sos … eos, bounded by max_seq_len.
    pub target: Vec<u32>,
    pub refs: Vec<TokenSequence>,
}

pub fn prepare_samples(
    samples: &[SceneSample],
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<Vec<TrainSample>> {
    samples
        .iter()
        .map(|s| {
            if s.refs.is_empty() {
                return Err(Error::contract(format!("sample {}: no references", s.id)));
            }
            let mut target = vocab.tokenize(&s.refs[0]).ids;
            if target.len() > config.max_seq_len {
                target.truncate(config.max_seq_len);
                *target.last_mut().expect("nonempty") = crate::data::EOS;
            }
            Ok(TrainSample {
                id: s.id,
                features: s.features_tensor()?,
                target,
                refs: s.refs.iter().map(|r| vocab.tokenize(r)).collect(),
            })
        })
        .collect()
}

/// idf statistics over a split's reference sets.
pub fn split_stats(samples: &[TrainSample]) -> Result<NGramStats> {
    build_idf(&samples.iter().map(|s| s.refs.clone()).collect::<Vec<_>>())
}

// ── epoch records and reports ────────────────────────────────────────

/// One JSON-lines metrics record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub cider_d: f64,
    pub bleu1: f64,
    pub bleu4: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Validation teacher-forced accuracy per epoch (cross-entropy stage).
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    /// Best validation metric: accuracy for XE, CIDEr-D for SCST.
    pub best_val_metric: f64,
}

fn snapshot_params(model: &Model) -> Vec<Vec<f64>> {
    model.named_params().iter().map(|(_, p)| p.value()).collect()
}

fn restore_params(model: &Model, snap: &[Vec<f64>]) {
    for ((_, p), values) in model.named_params().iter().zip(snap) {
        p.set_value(values.clone()).expect("snapshot shape matches");
    }
}

/// Teacher-forced loss tensor for one sample (on the tape).
pub fn xe_forward_loss(model: &Model, sample: &TrainSample) -> Result<Tensor> {
    let memory = model.encode(&sample.features)?;
    let input = &sample.target[..sample.target.len() - 1];
    let logits = model.decode_logits(input, &memory)?;
    xe_loss(&logits, &sample.target[1..])
}

/// One gradient-accumulated batch step; returns the mean batch loss.
pub fn run_xe_batch(
    model: &Model,
    batch: &[&TrainSample],
    opt: &mut Adam,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for sample in batch {
        let loss = xe_forward_loss(model, sample)?;
        total += loss.item();
        backward(&scale(&loss, 1.0 / batch.len() as f64))?;
    }
    opt.step(&model.named_params(), lr, Some(clip));
    Ok(total / batch.len() as f64)
}

/// Validation loss and teacher-forced accuracy.
pub fn validate_xe(model: &Model, val: &[TrainSample]) -> Result<(f64, f64)> {
    no_grad(|| {
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut total = 0;
        for sample in val {
            let memory = model.encode(&sample.features)?;
            let input = &sample.target[..sample.target.len() - 1];
            let logits = model.decode_logits(input, &memory)?;
            loss_sum += xe_loss(&logits, &sample.target[1..])?.item();
            let (c, t) = teacher_accuracy(&logits, &sample.target[1..]);
            correct += c;
            total += t;
        }
        Ok((loss_sum / val.len().max(1) as f64, correct as f64 / total.max(1) as f64))
    })
}

/// Greedy (width 1) or beam decodes over a split.
pub fn decode_split(model: &Model, samples: &[TrainSample], beam: usize) -> Result<Vec<TokenSequence>> {
    samples
        .iter()
        .map(|s| {
            if beam <= 1 {
                model.greedy_decode(&s.features)
            } else {
                model.beam_search(&s.features, beam)
            }
        })
        .collect()
}

/// CIDEr-D / BLEU-1 / BLEU-4 of decoded captions against a split's refs.
pub fn score_split(
    model: &Model,
    samples: &[TrainSample],
    stats: &NGramStats,
    beam: usize,
) -> Result<(f64, f64, f64)> {
    let decoded = decode_split(model, samples, beam)?;
    let refs: Vec<Vec<TokenSequence>> = samples.iter().map(|s| s.refs.clone()).collect();
    Ok((
        corpus_cider_d(&decoded, &refs, stats),
        corpus_bleu_n(&decoded, &refs, 1)?,
        corpus_bleu_n(&decoded, &refs, 4)?,
    ))
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Cross-entropy training: shuffled epochs, warmup/anneal LR, best-validation
/// parameter restore, patience/target early stop, optional fixed-LR
/// fine-tuning phase.
pub fn train_xe(
    model: &Model,
    train: &[TrainSample],
    val: &[TrainSample],
    val_stats: &NGramStats,
    cfg: &TrainConfig,
    opt: &mut Adam,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("train_xe: empty training set".to_string()));
    }
    let mut report = TrainReport {
        records: Vec::new(),
        val_accuracy: Vec::new(),
        best_epoch: start_epoch,
        best_val_metric: f64::NEG_INFINITY,
    };
    let mut best_snap = snapshot_params(model);
    let mut since_best = 0usize;

    'outer: for phase in 0..=usize::from(cfg.fine_tune) {
        let (phase_epochs, batch_size) = if phase == 0 {
            (cfg.epochs, cfg.batch_size)
        } else {
            // Fine-tuning: small batch, fixed small LR, starting from the
            // best parameters of the main phase.
            restore_params(model, &best_snap);
            (cfg.fine_tune_epochs, cfg.fine_tune_batch_size)
        };
        for _ in 0..phase_epochs {
            let epoch = start_epoch + report.records.len();
            let started = Instant::now();
            let order = shuffled_indices(train.len(), cfg.seed, epoch);
            let mut lr = 0.0;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train[i]).collect();
                lr = if phase == 0 { lr_at(opt.t + 1, epoch, cfg) } else { cfg.fine_tune_lr };
                run_xe_batch(model, &batch, opt, lr, cfg.grad_clip)?;
            }
            let (val_loss, val_acc) = validate_xe(model, val)?;
            let (cider, bleu1, bleu4) = score_split(model, val, val_stats, 1)?;
            let record = EpochRecord {
                epoch,
                split: "val".to_string(),
                loss: val_loss,
                cider_d: cider,
                bleu1,
                bleu4,
                lr,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            on_epoch(&record);
            report.records.push(record);
            report.val_accuracy.push(val_acc);

            if val_acc > report.best_val_metric {
                report.best_val_metric = val_acc;
                report.best_epoch = epoch;
                best_snap = snapshot_params(model);
                since_best = 0;
            } else {
                since_best += 1;
            }
            if let Some(target) = cfg.target_val_accuracy {
                if val_acc >= target {
                    break 'outer;
                }
            }
            if since_best > cfg.patience {
                break 'outer;
            }
        }
    }
    restore_params(model, &best_snap);
    Ok(report)
}

/// Deterministic per-image rollout seed.
fn rollout_seed(base: u64, epoch: usize, image_id: u64) -> u64 {
    base ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ image_id.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Self-critical loss for one image: sample K rollouts, score them with
/// CIDEr-D against the image's references, re-run the decoder on each
/// rollout to get on-tape log-probabilities, and weight by advantage.
/// Returns (loss tensor, mean reward).
pub fn scst_image_loss(
    model: &Model,
    sample: &TrainSample,
    stats: &NGramStats,
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<(Tensor, f64)> {
    let memory = model.encode(&sample.features)?;
    let scorer = model.scorer_from_memory(&memory.detach())?;
    let rollouts = sample_rollouts(&scorer, k, temperature, seed)?;
    let rewards: Vec<f64> =
        rollouts.iter().map(|r| cider_d(&r.seq, &sample.refs, stats)).collect();

    let mut logp_sums = Vec::with_capacity(k);
    for rollout in &rollouts {
        let ids = &rollout.seq.ids;
        let input = &ids[..ids.len() - 1];
        let logits = model.decode_logits(input, &memory)?;
        let logp = log_softmax_rows(&logits)?;
        let idx: Vec<usize> = ids[1..].iter().map(|&t| t as usize).collect();
        logp_sums.push(sum_all(&gather_rows(&logp, &idx)?));
    }
    let loss = scst_loss(&logp_sums, &rewards)?;
    let mean_reward = rewards.iter().sum::<f64>() / k as f64;
    Ok((loss, mean_reward))
}

fn sample_rollouts<S: StepScorer>(
    scorer: &S,
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<crate::model::decode::Sampled>> {
    sample(scorer, k, temperature, seed)
}

/// Self-critical training. Rewards use the training-reference idf table;
/// per-epoch validation decodes greedily and scores with `val_stats`.
#[allow(clippy::too_many_arguments)]
pub fn train_scst(
    model: &Model,
    train: &[TrainSample],
    val: &[TrainSample],
    train_stats: &NGramStats,
    val_stats: &NGramStats,
    cfg: &TrainConfig,
    opt: &mut Adam,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("train_scst: empty training set".to_string()));
    }
    let params = model.named_params();
    let mut report = TrainReport {
        records: Vec::new(),
        val_accuracy: Vec::new(),
        best_epoch: start_epoch,
        best_val_metric: f64::NEG_INFINITY,
    };
    let mut best_snap = snapshot_params(model);
    let mut since_best = 0usize;

    for e in 0..cfg.epochs {
        let epoch = start_epoch + e;
        let started = Instant::now();
        let order = shuffled_indices(train.len(), cfg.seed.wrapping_add(1), epoch);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            lr = lr_at(opt.t + 1, epoch, cfg);
            for &ix in chunk {
                let sample = &train[ix];
                let (loss, _reward) = scst_image_loss(
                    model,
                    sample,
                    train_stats,
                    cfg.scst_k,
                    cfg.sample_temperature,
                    rollout_seed(cfg.seed, epoch, sample.id),
                )?;
                loss_sum += loss.item();
                backward(&scale(&loss, 1.0 / chunk.len() as f64))?;
            }
            opt.step(&params, lr, Some(cfg.grad_clip));
        }
        let (cider, bleu1, bleu4) = score_split(model, val, val_stats, 1)?;
        let record = EpochRecord {
            epoch,
            split: "val".to_string(),
            loss: loss_sum / train.len() as f64,
            cider_d: cider,
            bleu1,
            bleu4,
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        report.records.push(record);

        if cider > report.best_val_metric {
            report.best_val_metric = cider;
            report.best_epoch = epoch;
            best_snap = snapshot_params(model);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(target) = cfg.target_val_cider {
            if cider >= target {
                break;
            }
        }
        if since_best > cfg.patience {
            break;
        }
    }
    restore_params(model, &best_snap);
    Ok(report)
}

// ── checkpoint files ─────────────────────────────────────────────────

/// Sidecar document written next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCard {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub epoch: usize,
    pub step: u64,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    ckpt.with_file_name(name)
}

/// Write model parameters, optimizer state, and the sidecar card.
pub fn save_checkpoint(path: &Path, model: &Model, opt: Option<&Adam>, card: &ModelCard) -> Result<()> {
    let mut records = model.state_records();
    if let Some(opt) = opt {
        records.extend(opt.state_records(&model.named_params()));
    }
    write_checkpoint(path, &records)?;
    let json = serde_json::to_string_pretty(card)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Read the sidecar card for a checkpoint.
pub fn load_card(path: &Path) -> Result<ModelCard> {
    let json = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
        Error::Config(format!(
            "missing sidecar {} for checkpoint: {e}",
            sidecar_path(path).display()
        ))
    })?;
    Ok(serde_json::from_str(&json)?)
}

/// Rebuild a model (and optionally optimizer state) from a checkpoint and
/// its sidecar.
pub fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<(Model, Adam, ModelCard)> {
    let card = load_card(path)?;
    let records = read_checkpoint(path)?;
    let model = Model::init(&card.model, 0)?;
    model.load_records(&records)?;
    let mut opt = Adam::for_params(&model.named_params(), cfg);
    opt.load_state(&records, &model.named_params())?;
    Ok((model, opt, card))
}
