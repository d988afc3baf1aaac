//! Grid scenes, bias-controlled splits and their on-disk form.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::vocab::{self, Template, COLOR0, N_COLORS, N_SHAPES, SHAPE0};
use crate::error::{Error, Result};

/// One question about one scene. `grid` is row-major, each cell
/// `[shape, color]`; `a` holds the answer ids without `EOS`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySample {
    pub grid: Vec<[u8; 2]>,
    pub q: Vec<usize>,
    pub a: Vec<usize>,
    pub template: usize,
    pub bias_consistent: bool,
}

impl ToySample {
    pub fn template(&self) -> Template {
        Template::from_index(self.template).expect("valid template index")
    }

    pub fn side(&self) -> usize {
        (self.grid.len() as f64).sqrt().round() as usize
    }

    /// Answer targets including the trailing `EOS`.
    pub fn targets(&self) -> Vec<usize> {
        let mut t = self.a.clone();
        t.push(vocab::EOS_ID);
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub g: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub p_bias: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            g: 4,
            n_train: 4000,
            n_test: 1000,
            p_bias: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestIid,
    TestAnti,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestIid, Split::TestAnti];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestIid => "test_iid",
            Split::TestAnti => "test_anti",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub cfg: DataConfig,
    pub train: Vec<ToySample>,
    pub test_iid: Vec<ToySample>,
    pub test_anti: Vec<ToySample>,
}

impl DatasetSplits {
    pub fn split(&self, s: Split) -> &[ToySample] {
        match s {
            Split::Train => &self.train,
            Split::TestIid => &self.test_iid,
            Split::TestAnti => &self.test_anti,
        }
    }

    /// Per-template majority answer of the training split, by template index.
    pub fn majority(&self) -> [usize; 4] {
        Template::ALL.map(|t| t.majority())
    }
}

/// Share of a template's samples that carry its majority answer. Binary
/// templates cannot go below one half.
pub fn effective_bias(t: Template, p_bias: f64) -> f64 {
    p_bias.max(1.0 / t.answers().len() as f64)
}

pub fn gen_dataset(cfg: &DataConfig) -> Result<DatasetSplits> {
    let min_p = 1.0 / N_COLORS as f64;
    if !(min_p - 1e-12..=1.0).contains(&cfg.p_bias) {
        return Err(Error::Config(format!(
            "p_bias {} outside [{min_p}, 1]: the majority answer cannot be rarer than chance",
            cfg.p_bias
        )));
    }
    if !(2..=vocab::MAX_GRID).contains(&cfg.g) {
        return Err(Error::Config(format!("grid side {} outside 2..={}", cfg.g, vocab::MAX_GRID)));
    }
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    let mut seen = HashSet::new();
    let mut make = |split: Split, n: usize, stream: u64| {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        gen_split(cfg, split, n, &mut rng, &mut seen)
    };
    Ok(DatasetSplits {
        cfg: *cfg,
        train: make(Split::Train, cfg.n_train, 1),
        test_iid: make(Split::TestIid, cfg.n_test, 2),
        test_anti: make(Split::TestAnti, cfg.n_test, 3),
    })
}

fn gen_split(
    cfg: &DataConfig,
    split: Split,
    n: usize,
    rng: &mut Xoshiro256PlusPlus,
    seen: &mut HashSet<Vec<[u8; 2]>>,
) -> Vec<ToySample> {
    let mut per_template = [0usize; 4];
    let mut per_arg: Vec<Vec<usize>> = Template::ALL.iter().map(|t| vec![0; t.n_args(cfg.g)]).collect();
    let mut minority_turn: Vec<Vec<usize>> = per_arg.clone();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = Template::ALL[i % 4];
        let n_args = t.n_args(cfg.g);
        let arg = per_template[t.index()] % n_args;
        per_template[t.index()] += 1;
        let c = per_arg[t.index()][arg];
        per_arg[t.index()][arg] += 1;
        let answers = t.answers();
        let answer = match split {
            Split::TestAnti => answers[(c + arg) % answers.len()],
            _ => {
                // Exact stratification per (template, argument): the running
                // majority count tracks floor(count * p + phase), with phases
                // spread evenly over arguments.
                let p = effective_bias(t, cfg.p_bias);
                let phase = arg as f64 / n_args as f64;
                let at = |k: usize| (k as f64 * p + phase + 1e-9).floor();
                if at(c + 1) > at(c) {
                    answers[0]
                } else {
                    // Minorities cycle per argument too, so the question
                    // alone never predicts which one appears.
                    let k = minority_turn[t.index()][arg];
                    minority_turn[t.index()][arg] += 1;
                    answers[1 + (k + arg) % (answers.len() - 1)]
                }
            }
        };
        let grid = loop {
            let grid = scene(t, arg, answer, cfg.g, rng);
            if seen.insert(grid.clone()) {
                break grid;
            }
        };
        out.push(ToySample {
            grid,
            q: t.question(arg, cfg.g),
            a: vec![answer],
            template: t.index(),
            bias_consistent: answer == t.majority(),
        });
    }
    out.shuffle(rng);
    out
}

fn random_cell(rng: &mut Xoshiro256PlusPlus) -> [u8; 2] {
    [rng.random_range(0..N_SHAPES) as u8, rng.random_range(0..N_COLORS) as u8]
}

/// A random scene whose answer to `(t, arg)` is `answer`.
fn scene(t: Template, arg: usize, answer: usize, g: usize, rng: &mut Xoshiro256PlusPlus) -> Vec<[u8; 2]> {
    let cells = g * g;
    let mut grid: Vec<[u8; 2]> = (0..cells).map(|_| random_cell(rng)).collect();
    match t {
        Template::ColorOfShape => {
            let s = arg as u8;
            for cell in grid.iter_mut() {
                while cell[0] == s {
                    cell[0] = rng.random_range(0..N_SHAPES) as u8;
                }
            }
            let at = rng.random_range(0..cells);
            grid[at] = [s, (answer - COLOR0) as u8];
        }
        Template::ShapeAtCell => {
            grid[arg][0] = (answer - SHAPE0) as u8;
        }
        Template::CountParity => {
            let color = arg as u8;
            let count = grid.iter().filter(|c| c[1] == color).count();
            let want_even = answer == vocab::EVEN;
            if (count % 2 == 0) != want_even {
                let at = rng.random_range(0..cells);
                if grid[at][1] == color {
                    grid[at][1] = (color + 1 + rng.random_range(0..N_COLORS as u8 - 1)) % N_COLORS as u8;
                } else {
                    grid[at][1] = color;
                }
            }
        }
        Template::Presence => {
            let (color, shape) = ((arg / N_SHAPES) as u8, (arg % N_SHAPES) as u8);
            for cell in grid.iter_mut() {
                while cell[0] == shape && cell[1] == color {
                    cell[1] = rng.random_range(0..N_COLORS) as u8;
                }
            }
            if answer == vocab::YES {
                let at = rng.random_range(0..cells);
                grid[at] = [shape, color];
            }
        }
    }
    grid
}

/// Answers a sample by reading its grid.
pub fn oracle_answer(s: &ToySample) -> usize {
    let g = s.side();
    match s.template() {
        Template::ColorOfShape => {
            let shape = (s.q[4] - SHAPE0) as u8;
            let hits: Vec<_> = s.grid.iter().filter(|c| c[0] == shape).collect();
            assert_eq!(hits.len(), 1, "queried shape must appear exactly once");
            COLOR0 + hits[0][1] as usize
        }
        Template::ShapeAtCell => {
            let (r, c) = (s.q[4] - vocab::ROW0, s.q[5] - vocab::COL0);
            SHAPE0 + s.grid[r * g + c][0] as usize
        }
        Template::CountParity => {
            let color = (s.q[2] - COLOR0) as u8;
            let n = s.grid.iter().filter(|c| c[1] == color).count();
            if n % 2 == 0 {
                vocab::EVEN
            } else {
                vocab::ODD
            }
        }
        Template::Presence => {
            let (color, shape) = ((s.q[3] - COLOR0) as u8, (s.q[4] - SHAPE0) as u8);
            if s.grid.iter().any(|c| c[0] == shape && c[1] == color) {
                vocab::YES
            } else {
                vocab::NO
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub cfg: DataConfig,
    pub vocabulary: Vec<String>,
    pub templates: Vec<TemplateInfo>,
    pub counts: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateInfo {
    pub index: usize,
    pub name: String,
    pub majority_answer: usize,
    pub majority_word: String,
    pub answers: Vec<usize>,
}

pub const DATASET_FORMAT: &str = "invic-toyvqa-jsonl-1";

pub fn manifest(splits: &DatasetSplits) -> DatasetManifest {
    let words = vocab::words();
    DatasetManifest {
        format: DATASET_FORMAT.into(),
        cfg: splits.cfg,
        vocabulary: words.clone(),
        templates: Template::ALL
            .iter()
            .map(|t| TemplateInfo {
                index: t.index(),
                name: t.name().into(),
                majority_answer: t.majority(),
                majority_word: words[t.majority()].clone(),
                answers: t.answers(),
            })
            .collect(),
        counts: Split::ALL
            .iter()
            .map(|&s| (s.name().to_string(), splits.split(s).len()))
            .collect(),
    }
}

/// Writes `train.jsonl`, `test_iid.jsonl`, `test_anti.jsonl` and
/// `dataset.json` into `dir`.
pub fn write_dataset(dir: &Path, splits: &DatasetSplits) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in Split::ALL {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(format!("{}.jsonl", s.name())))?);
        for sample in splits.split(s) {
            serde_json::to_writer(&mut f, sample)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    let m = serde_json::to_string_pretty(&manifest(splits))?;
    fs::write(dir.join("dataset.json"), m + "\n")?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplits> {
    let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Config(format!("unsupported dataset format `{}`", m.format)));
    }
    let read = |s: Split| -> Result<Vec<ToySample>> {
        let f = BufReader::new(fs::File::open(dir.join(format!("{}.jsonl", s.name())))?);
        let mut out = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    };
    Ok(DatasetSplits {
        cfg: m.cfg,
        train: read(Split::Train)?,
        test_iid: read(Split::TestIid)?,
        test_anti: read(Split::TestAnti)?,
    })
}
