//! Backbone pretraining, Stage I and Stage II.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamState};
use super::checkpoint::Checkpoint;
use super::config::{RunConfig, Stage1Eval, StageConfig, TrainConfig};
use crate::diffcore::{Graph, Init, ParamStore};
use crate::error::{Error, Result};
use crate::masking::MaskKind;
use crate::toyvqa::{batch_loss, evaluate, CueVariant, DatasetSplits, Metrics, ModelPredictor, ToySample, VqaArch};

const CUE_STREAM: u64 = 1;
const LORA_STREAM: u64 = 2;
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Names of the embedding tables that Stage II may optionally train.
pub const EMBEDDING_PARAMS: [&str; 2] = ["dec.tok_emb", "dec.pos_emb"];

/// An architecture together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: VqaArch,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn backbone(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.train.seed).with_scale(cfg.model.weight_scale);
        let arch = VqaArch::backbone(&mut store, &mut init, cfg.model)?;
        Ok(Self { arch, store })
    }

    pub fn with_cues(cfg: &RunConfig, variant: CueVariant, k: usize) -> Result<Self> {
        let mut m = Self::backbone(cfg)?;
        let mut init = Init::new(cfg.train.seed.wrapping_add(CUE_STREAM)).with_scale(cfg.model.weight_scale);
        m.arch.add_cues(&mut m.store, &mut init, variant, k)?;
        Ok(m)
    }

    pub fn attach_lora(&mut self, cfg: &RunConfig) -> Result<()> {
        let mut init = Init::new(cfg.train.seed.wrapping_add(LORA_STREAM));
        self.arch
            .decoder
            .attach_lora(&mut self.store, &mut init, "dec", cfg.train.lora_rank)
    }

    /// Rebuilds the architecture a checkpoint was saved from (cue kind,
    /// cue count and LoRA rank are read off the stored shapes) and loads it.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let (variant, k) = if let Some(t) = ckpt.get("cte.seed_slots") {
            (CueVariant::Cte, t.shape()[0])
        } else if let Some(t) = ckpt.get(crate::toyvqa::model::LEARNABLE_NAME) {
            (CueVariant::LearnableTokens, t.shape()[0])
        } else {
            (CueVariant::Cte, 0)
        };
        let lora_rank = ckpt.get("dec.block0.attn.wq.lora_a").map(|t| t.shape()[0]);
        let mut m = Self::with_cues(cfg, variant, k)?;
        if let Some(r) = lora_rank {
            let mut c = *cfg;
            c.train.lora_rank = r;
            m.attach_lora(&c)?;
        }
        ckpt.restore(&mut m.store, |_| true)?;
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    /// The mask a model is evaluated under by default: the bottleneck for a
    /// Stage I model, causal otherwise.
    pub fn default_eval_mask(&self, cfg: &TrainConfig) -> MaskKind {
        if self.arch.n_cues() > 0 && !self.arch.decoder.has_lora() && cfg.stage1_eval == Stage1Eval::Bottleneck {
            MaskKind::Bottleneck(cfg.mask_mode)
        } else {
            MaskKind::Causal
        }
    }

    pub fn evaluate(&self, samples: &[ToySample], majority: &[usize; 4], kind: MaskKind, batch: usize) -> Result<Metrics> {
        let p = ModelPredictor {
            arch: &self.arch,
            store: &self.store,
            kind,
            batch_size: batch,
        };
        evaluate(&p, samples, majority)
    }

    pub fn evaluate_tests(&self, data: &DatasetSplits, kind: MaskKind, batch: usize) -> Result<TestMetrics> {
        let maj = data.majority();
        Ok(TestMetrics {
            test_iid: self.evaluate(&data.test_iid, &maj, kind, batch)?,
            test_anti: self.evaluate(&data.test_anti, &maj, kind, batch)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub test_iid: Metrics,
    pub test_anti: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: String,
    pub eval_mask: MaskKind,
    pub epochs: Vec<EpochRecord>,
    pub metrics: TestMetrics,
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub model: Model,
    pub report: PhaseReport,
}

impl PhaseOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        self.model.checkpoint()
    }
}

/// Per-parameter CRC32 of the raw values of every parameter selected by `pred`.
pub fn param_digests(store: &ParamStore<f32>, pred: impl Fn(&str) -> bool) -> Vec<(String, u32)> {
    store
        .iter()
        .filter(|(_, p)| pred(&p.name))
        .map(|(_, p)| {
            let mut h = crc32fast::Hasher::new();
            for x in p.value.data() {
                h.update(&x.to_bits().to_le_bytes());
            }
            (p.name.clone(), h.finalize())
        })
        .collect()
}

/// Digests of every frozen parameter.
pub fn frozen_digests(store: &ParamStore<f32>) -> Vec<(String, u32)> {
    let frozen: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| p.name.clone())
        .collect();
    param_digests(store, |n| frozen.iter().any(|f| f == n))
}

fn audit_frozen(before: &[(String, u32)], store: &ParamStore<f32>) -> Result<()> {
    let after = param_digests(store, |n| before.iter().any(|(b, _)| b == n));
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if a != b {
            return Err(Error::FrozenChanged(name.clone()));
        }
    }
    Ok(())
}

fn shuffle_rng(seed: u64, phase: &str) -> Xoshiro256PlusPlus {
    let tag = crc32fast::hash(phase.as_bytes()) as u64;
    Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_mul(GOLDEN) ^ tag)
}

/// Mini-batch AdamW over `train` for up to `stage.epochs` epochs. After
/// each epoch `after(model, epoch)` may return `true` to stop early.
pub fn train_epochs(
    model: &mut Model,
    train: &[ToySample],
    kind: MaskKind,
    stage: StageConfig,
    cfg: &TrainConfig,
    phase: &str,
    mut after: impl FnMut(&Model, usize) -> Result<bool>,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let mut rng = shuffle_rng(cfg.seed, phase);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..stage.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ToySample> = chunk.iter().map(|&i| &train[i]).collect();
            let grads = {
                let mut g = Graph::with_params(&model.store);
                let loss = batch_loss(&mut g, &model.arch, &batch, kind)?;
                let l = g.value(loss).data()[0] as f64;
                if !l.is_finite() {
                    return Err(Error::Training(format!("{phase}: non-finite loss at epoch {epoch}, step {steps}")));
                }
                total += l;
                g.backward(loss)?;
                g.param_grads()
            };
            adamw_step(&mut model.store, &grads, &mut state, stage.lr, &cfg.adamw)?;
            steps += 1;
        }
        log.push(EpochRecord {
            phase: phase.into(),
            epoch,
            steps,
            lr: stage.lr,
            mean_loss: total / steps as f64,
        });
        if after(model, epoch)? {
            break;
        }
    }
    Ok(log)
}

/// Phase 0: trains encoder and decoder without cues until `test_iid`
/// accuracy reaches the threshold.
pub fn pretrain_backbone(cfg: &RunConfig, data: &DatasetSplits) -> Result<PhaseOutcome> {
    let mut model = Model::backbone(cfg)?;
    let t = &cfg.train;
    let stage = StageConfig {
        epochs: t.phase0.max_epochs,
        lr: t.phase0.lr,
    };
    let maj = data.majority();
    let mut last_iid = None;
    let epochs = train_epochs(&mut model, &data.train, MaskKind::Causal, stage, t, "phase0", |m, _| {
        let iid = m.evaluate(&data.test_iid, &maj, MaskKind::Causal, t.eval_batch_size)?;
        let done = iid.accuracy >= t.phase0.iid_threshold;
        last_iid = Some(iid);
        Ok(done)
    })?;
    let test_iid = last_iid.expect("at least one epoch");
    if test_iid.accuracy < t.phase0.iid_threshold {
        return Err(Error::Training(format!(
            "backbone reached test_iid accuracy {:.4} after {} epochs, below the {} threshold; \
             inspect train.phase0.lr and train.phase0.max_epochs",
            test_iid.accuracy,
            epochs.len(),
            t.phase0.iid_threshold
        )));
    }
    let test_anti = model.evaluate(&data.test_anti, &maj, MaskKind::Causal, t.eval_batch_size)?;
    Ok(PhaseOutcome {
        model,
        report: PhaseReport {
            phase: "phase0".into(),
            eval_mask: MaskKind::Causal,
            epochs,
            metrics: TestMetrics { test_iid, test_anti },
        },
    })
}

/// Stage I: only the cue source trains, under the bottleneck mask.
pub fn stage1(cfg: &RunConfig, data: &DatasetSplits, backbone: &Checkpoint) -> Result<PhaseOutcome> {
    let t = &cfg.train;
    if t.k == 0 {
        return Err(Error::Config("Stage I needs at least one cue token (train.k > 0)".into()));
    }
    let mut model = Model::with_cues(cfg, t.cue_variant, t.k)?;
    backbone.restore(&mut model.store, |n| !VqaArch::is_cue_param(n))?;
    model.store.train_only(VqaArch::is_cue_param);
    let eval = model.default_eval_mask(t);
    run_stage(model, data, MaskKind::Bottleneck(t.mask_mode), eval, t.stage1, t, "stage1")
}

/// Stage II: attaches LoRA and trains it jointly with the cue source under
/// the causal mask. `prev` is a Stage I checkpoint, or a backbone checkpoint
/// for the Stage-II-only schedule (the cue source then starts fresh).
pub fn stage2(cfg: &RunConfig, data: &DatasetSplits, prev: &Checkpoint) -> Result<PhaseOutcome> {
    let t = &cfg.train;
    let mut model = Model::with_cues(cfg, t.cue_variant, t.k)?;
    model.attach_lora(cfg)?;
    let has_cues = prev.names().any(VqaArch::is_cue_param);
    prev.restore(&mut model.store, |n| {
        !VqaArch::is_lora_param(n) && (has_cues || !VqaArch::is_cue_param(n))
    })?;
    let freeze_emb = t.freeze_embeddings;
    model.store.train_only(|n| {
        VqaArch::is_cue_param(n) || VqaArch::is_lora_param(n) || (!freeze_emb && EMBEDDING_PARAMS.contains(&n))
    });
    run_stage(model, data, MaskKind::Causal, MaskKind::Causal, t.stage2, t, "stage2")
}

fn run_stage(
    mut model: Model,
    data: &DatasetSplits,
    train_mask: MaskKind,
    eval_mask: MaskKind,
    stage: StageConfig,
    t: &TrainConfig,
    phase: &str,
) -> Result<PhaseOutcome> {
    let frozen = frozen_digests(&model.store);
    let epochs = train_epochs(&mut model, &data.train, train_mask, stage, t, phase, |_, _| Ok(false))?;
    audit_frozen(&frozen, &model.store)?;
    let metrics = model.evaluate_tests(data, eval_mask, t.eval_batch_size)?;
    Ok(PhaseOutcome {
        model,
        report: PhaseReport {
            phase: phase.into(),
            eval_mask,
            epochs,
            metrics,
        },
    })
}
