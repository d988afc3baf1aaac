//! Grid of cue-source and schedule variants trained from one backbone.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::phases::{stage1, stage2, TestMetrics};
use crate::error::Result;
use crate::toyvqa::{CueVariant, DatasetSplits};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Stage II started from the backbone with a fresh cue source.
    StageIIOnly,
    StageIAndII,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::StageIIOnly => "stage2_only",
            Schedule::StageIAndII => "stage1+2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: CueVariant,
    pub schedule: Schedule,
    pub k: usize,
}

impl AblationCell {
    pub fn name(&self) -> String {
        format!("{}/{}/k{}", self.variant.name(), self.schedule.name(), self.k)
    }
}

/// Both cue sources under both schedules at `K = 16`, then the K sweep of
/// the CTE under Stage I+II.
pub fn default_grid() -> Vec<AblationCell> {
    let mut grid = Vec::new();
    for variant in [CueVariant::LearnableTokens, CueVariant::Cte] {
        for schedule in [Schedule::StageIIOnly, Schedule::StageIAndII] {
            grid.push(AblationCell { variant, schedule, k: 16 });
        }
    }
    for k in [4, 8, 32] {
        grid.push(AblationCell {
            variant: CueVariant::Cte,
            schedule: Schedule::StageIAndII,
            k,
        });
    }
    grid
}

/// The K sweep alone, `K ∈ {4, 8, 16, 32}`.
pub fn k_sweep_grid() -> Vec<AblationCell> {
    [4, 8, 16, 32]
        .into_iter()
        .map(|k| AblationCell {
            variant: CueVariant::Cte,
            schedule: Schedule::StageIAndII,
            k,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AblationCell,
    /// Final metrics, or the error that stopped the cell.
    pub outcome: std::result::Result<TestMetrics, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellResult>,
}

#[derive(Serialize)]
struct Row<'a> {
    cell: String,
    variant: &'a str,
    schedule: &'a str,
    k: usize,
    split: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shortcut_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

impl AblationReport {
    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(|c| c.outcome.is_err())
    }

    pub fn get(&self, cell: &AblationCell) -> Option<&TestMetrics> {
        self.cells
            .iter()
            .find(|c| c.cell == *cell)
            .and_then(|c| c.outcome.as_ref().ok())
    }

    /// One JSON record per (cell, split); a failed cell yields a single
    /// record carrying its error.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            let base = |split, accuracy, shortcut_rate, error| Row {
                cell: c.cell.name(),
                variant: c.cell.variant.name(),
                schedule: c.cell.schedule.name(),
                k: c.cell.k,
                split,
                accuracy,
                shortcut_rate,
                error,
            };
            let rows = match &c.outcome {
                Ok(m) => vec![
                    base("test_iid", Some(m.test_iid.accuracy), Some(m.test_iid.shortcut_rate), None),
                    base("test_anti", Some(m.test_anti.accuracy), Some(m.test_anti.shortcut_rate), None),
                ],
                Err(e) => vec![base("none", None, None, Some(e.as_str()))],
            };
            for r in rows {
                out.push_str(&serde_json::to_string(&r).expect("row serializes"));
                out.push('\n');
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| cell | iid acc | iid shortcut | anti acc | anti shortcut |\n|---|---|---|---|---|\n",
        );
        for c in &self.cells {
            match &c.outcome {
                Ok(m) => writeln!(
                    out,
                    "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    c.cell.name(),
                    m.test_iid.accuracy,
                    m.test_iid.shortcut_rate,
                    m.test_anti.accuracy,
                    m.test_anti.shortcut_rate
                ),
                Err(e) => writeln!(out, "| {} | failed: {} | | | |", c.cell.name(), e.replace('|', "/")),
            }
            .expect("writing to a String");
        }
        out
    }
}

/// Trains every cell from `backbone` with the seed and budgets of `cfg`.
/// A failing cell is recorded and the rest still run.
pub fn run_ablation(
    cfg: &RunConfig,
    data: &DatasetSplits,
    backbone: &Checkpoint,
    grid: &[AblationCell],
    mut progress: impl FnMut(&CellResult),
) -> AblationReport {
    let cells = grid
        .iter()
        .map(|&cell| {
            let outcome = run_cell(cfg, data, backbone, cell).map_err(|e| e.to_string());
            let r = CellResult { cell, outcome };
            progress(&r);
            r
        })
        .collect();
    AblationReport { cells }
}

pub fn run_cell(cfg: &RunConfig, data: &DatasetSplits, backbone: &Checkpoint, cell: AblationCell) -> Result<TestMetrics> {
    let mut c = *cfg;
    c.train.k = cell.k;
    c.train.cue_variant = cell.variant;
    let out = match cell.schedule {
        Schedule::StageIIOnly => stage2(&c, data, backbone)?,
        Schedule::StageIAndII => {
            let s1 = stage1(&c, data, backbone)?;
            stage2(&c, data, &s1.checkpoint())?
        }
    };
    Ok(out.report.metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyvqa::{Metrics, TemplateMetrics};

    fn metrics(acc: f64) -> Metrics {
        Metrics {
            n: 10,
            accuracy: acc,
            shortcut_rate: 0.5,
            per_template: vec![TemplateMetrics {
                template: "t".into(),
                n: 10,
                accuracy: acc,
                shortcut_rate: 0.5,
            }],
        }
    }

    #[test]
    fn grid_mirrors_both_panels() {
        let g = default_grid();
        assert_eq!(g.len(), 7);
        let names: Vec<String> = g.iter().map(|c| c.name()).collect();
        assert_eq!(names[0], "learnable_tokens/stage2_only/k16");
        assert_eq!(names[3], "cte/stage1+2/k16");
        assert_eq!(names[6], "cte/stage1+2/k32");
        let ks: Vec<usize> = k_sweep_grid().iter().map(|c| c.k).collect();
        assert_eq!(ks, [4, 8, 16, 32]);
    }

    #[test]
    fn report_rows_and_failures() {
        let g = default_grid();
        let report = AblationReport {
            cells: vec![
                CellResult {
                    cell: g[0],
                    outcome: Ok(TestMetrics {
                        test_iid: metrics(0.9),
                        test_anti: metrics(0.25),
                    }),
                },
                CellResult {
                    cell: g[1],
                    outcome: Err("boom | here".into()),
                },
            ],
        };
        assert!(report.any_failed());
        let jsonl = report.to_jsonl();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[1],
            r#"{"cell":"learnable_tokens/stage2_only/k16","variant":"learnable_tokens","schedule":"stage2_only","k":16,"split":"test_anti","accuracy":0.25,"shortcut_rate":0.5}"#
        );
        assert!(lines[2].contains(r#""error":"boom | here""#));
        let md = report.to_markdown();
        assert!(md.contains("| learnable_tokens/stage2_only/k16 | 0.9000 | 0.5000 | 0.2500 | 0.5000 |"));
        assert!(md.contains("failed: boom / here"));
        assert_eq!(report.get(&g[0]).unwrap().test_anti.accuracy, 0.25);
        assert!(report.get(&g[1]).is_none());
    }
}
