//! The full pipeline and its shortcut-mitigation checks.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::phases::{pretrain_backbone, stage1, stage2, PhaseOutcome, PhaseReport};
use crate::error::Result;
use crate::toyvqa::{evaluate, CueVariant, DatasetSplits, Metrics, QuestionOnlyBaseline};

/// Largest allowed gap between the backbone's anti-split accuracy and the
/// question-only baseline.
pub const PRIOR_GAP: f64 = 0.1;
/// Required anti-split margin of Stage I+II over Stage II alone.
pub const SCHEDULE_MARGIN: f64 = 0.05;

pub struct Pipeline {
    pub question_only: Metrics,
    pub phase0: PhaseOutcome,
    pub stage1: PhaseOutcome,
    pub stage2: PhaseOutcome,
}

/// Reference runs for the shortcut checks, sharing the pipeline's backbone.
pub struct Baselines {
    pub stage2_only: PhaseReport,
    pub learnable: PhaseReport,
}

/// Phase 0, Stage I and Stage II with the configured cue source.
pub fn run_pipeline(cfg: &RunConfig, data: &DatasetSplits) -> Result<Pipeline> {
    let base = QuestionOnlyBaseline::fit(&data.train);
    let question_only = evaluate(&base, &data.test_anti, &data.majority())?;
    let phase0 = pretrain_backbone(cfg, data)?;
    let s1 = stage1(cfg, data, &phase0.checkpoint())?;
    let s2 = stage2(cfg, data, &s1.checkpoint())?;
    Ok(Pipeline {
        question_only,
        phase0,
        stage1: s1,
        stage2: s2,
    })
}

/// Stage II alone from the backbone, and the learnable-token variant under
/// Stage I+II.
pub fn run_baselines(cfg: &RunConfig, data: &DatasetSplits, p: &Pipeline) -> Result<Baselines> {
    let backbone = p.phase0.checkpoint();
    let stage2_only = stage2(cfg, data, &backbone)?.report;
    let mut lc = *cfg;
    lc.train.cue_variant = CueVariant::LearnableTokens;
    let l1 = stage1(&lc, data, &backbone)?;
    let learnable = stage2(&lc, data, &l1.checkpoint())?.report;
    Ok(Baselines { stage2_only, learnable })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

pub fn shortcut_checks(cfg: &RunConfig, p: &Pipeline, b: &Baselines) -> Vec<Check> {
    let m0 = &p.phase0.report.metrics;
    let (iid, anti, prior) = (m0.test_iid.accuracy, m0.test_anti.accuracy, p.question_only.accuracy);
    let threshold = cfg.train.phase0.iid_threshold;
    let staged = p.stage2.report.metrics.test_anti.accuracy;
    let alone = b.stage2_only.metrics.test_anti.accuracy;
    let learnable = b.learnable.metrics.test_anti.accuracy;
    vec![
        Check {
            name: "backbone_shortcut".into(),
            passed: iid >= threshold && (anti - prior).abs() <= PRIOR_GAP,
            detail: format!(
                "test_iid {iid:.4} (need >= {threshold}), test_anti {anti:.4} vs question-only {prior:.4} (need within {PRIOR_GAP})"
            ),
        },
        Check {
            name: "stage1_helps".into(),
            passed: staged - alone >= SCHEDULE_MARGIN,
            detail: format!(
                "test_anti stage I+II {staged:.4} vs stage II only {alone:.4} (need margin >= {SCHEDULE_MARGIN})"
            ),
        },
        Check {
            name: "cte_beats_learnable".into(),
            passed: staged > learnable,
            detail: format!("test_anti cte {staged:.4} vs learnable tokens {learnable:.4}"),
        },
    ]
}
