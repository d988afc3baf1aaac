//! Command-line front end. The `invic` binary only calls [`main`].

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::gradsuite;
use crate::masking::{stage_mask, BottleneckMode, MaskKind, SegmentLayout};
use crate::toyvqa::{gen_dataset, read_dataset, write_dataset, DatasetSplits};
use crate::trainer::{
    default_grid, k_sweep_grid, pretrain_backbone, run_ablation, run_baselines, run_pipeline, shortcut_checks, stage1,
    stage2, Checkpoint, Manifest, Model, PhaseOutcome, PhaseReport, RunConfig,
};

#[derive(Parser, Debug)]
#[command(name = "invic", version = crate::trainer::version_string(), about = "Cue-token training on a synthetic VQA task")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true, env = "INVIC_SEED")]
    pub seed: Option<u64>,
    /// TOML file with any subset of the config keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for every file a command writes.
    #[arg(long, global = true, env = "INVIC_OUT_DIR", default_value = "runs/default")]
    pub out_dir: PathBuf,
    /// Override one config key, e.g. `--set train.k=8`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Read the dataset from this directory instead of generating it.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the train, test_iid and test_anti splits.
    GenData {
        #[arg(long)]
        p_bias: Option<f64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Phase 0: train the cue-free backbone.
    Pretrain,
    /// Stage I: train the cue source under the bottleneck mask.
    Stage1 {
        /// Backbone checkpoint; defaults to `<out-dir>/backbone.ckpt`.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Stage II: attach LoRA and train it with the cue source.
    Stage2 {
        /// Stage I checkpoint, or a backbone checkpoint for Stage II alone;
        /// defaults to `<out-dir>/stage1.ckpt`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Full pipeline: Phase 0, Stage I, Stage II.
    Train {
        /// Also run the reference schedules and check the shortcut criteria.
        #[arg(long)]
        check: bool,
    },
    /// Evaluate a checkpoint on both test splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMask::Auto)]
        mask: EvalMask,
    },
    /// Train the ablation grid from one backbone.
    Ablate {
        /// Backbone checkpoint; trained first when absent.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Grid::Full)]
        grid: Grid,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck,
    /// Print the attention mask of a layout as a character grid.
    MaskDump {
        /// Segment sizes `n_v,n_q,n_c,n_a`.
        #[arg(long, value_delimiter = ',', required = true)]
        layout: Vec<usize>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2), default_value_t = 1)]
        stage: u8,
        #[arg(long, value_enum, default_value_t = ModeArg::Prose)]
        mode: ModeArg,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMask {
    /// Bottleneck for a Stage I model, causal otherwise.
    Auto,
    Causal,
    Prose,
    Strict,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Both cue sources under both schedules, plus the K sweep.
    Full,
    /// The CTE under Stage I+II at K = 4, 8, 16, 32.
    KSweep,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Prose,
    Strict,
}

impl From<ModeArg> for BottleneckMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Prose => BottleneckMode::Prose,
            ModeArg::Strict => BottleneckMode::Strict,
        }
    }
}

/// Every config key with its default value, one `key = value` per line.
pub fn config_keys() -> Vec<String> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => out.push(format!("{prefix} = {other}")),
        }
    }
    let v = toml::Value::try_from(RunConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    walk("", &v, &mut out);
    out
}

fn help_footer() -> String {
    let mut s = String::from(
        "Config precedence: defaults, then --config file, then --set, then dedicated flags \
         (--seed, gen-data --p-bias/--n-train/--n-test).\n\nConfig keys and defaults:\n",
    );
    for line in config_keys() {
        s.push_str("  ");
        s.push_str(&line);
        s.push('\n');
    }
    s
}

fn set_key(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not a section")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config(format!("empty config key in `{key}`")))
}

/// Merges defaults, the config file, `--set` overrides and the seed flag.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut cfg = RunConfig::from_toml(&text)?;
    if !common.overrides.is_empty() {
        let mut root = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
        for o in &common.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
            set_key(&mut root, k.trim(), v.trim())?;
        }
        cfg = RunConfig::from_toml(&toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?)?;
    }
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    start: Instant,
    written: Vec<String>,
}

impl Ctx {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join(name), contents)?;
        self.written.push(name.into());
        Ok(())
    }

    fn save_ckpt(&mut self, name: &str, c: &Checkpoint) -> Result<()> {
        c.save(&self.out.join(name))?;
        self.written.push(name.into());
        Ok(())
    }

    fn report(&mut self, r: &PhaseReport) -> Result<()> {
        let mut s = String::new();
        for e in &r.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
        self.write(&format!("{}.jsonl", r.phase), &s)?;
        println!("{}", summary_line(r));
        Ok(())
    }

    fn finish(self, command: &str) -> Result<()> {
        let m = Manifest::new(command, &self.cfg, self.start.elapsed().as_secs_f64(), self.written);
        m.save(&self.out.join(format!("{command}.manifest.json")))
    }

    fn data(&mut self, common: &Common) -> Result<DatasetSplits> {
        match &common.data {
            Some(dir) => {
                let d = read_dataset(dir)?;
                self.cfg.data = d.cfg;
                self.cfg.validate()?;
                Ok(d)
            }
            None => gen_dataset(&self.cfg.data),
        }
    }
}

fn summary_line(r: &PhaseReport) -> String {
    format!(
        "{}: test_iid {:.4} test_anti {:.4} (anti shortcut rate {:.4})",
        r.phase, r.metrics.test_iid.accuracy, r.metrics.test_anti.accuracy, r.metrics.test_anti.shortcut_rate
    )
}

fn phase_files(ctx: &mut Ctx, out: &PhaseOutcome, ckpt: &str) -> Result<()> {
    ctx.save_ckpt(ckpt, &out.checkpoint())?;
    ctx.report(&out.report)
}

fn or_default(p: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out.join(name))
}

/// Runs one parsed command. `Ok(false)` means a check failed.
pub fn dispatch(cli: Cli) -> Result<bool> {
    let common = cli.common;
    let cfg = resolve_config(&common)?;
    let mut ctx = Ctx {
        cfg,
        out: common.out_dir.clone(),
        start: Instant::now(),
        written: Vec::new(),
    };
    let mut ok = true;
    let name = match &cli.command {
        Command::GenData { p_bias, n_train, n_test } => {
            if let Some(p) = p_bias {
                ctx.cfg.data.p_bias = *p;
            }
            if let Some(n) = n_train {
                ctx.cfg.data.n_train = *n;
            }
            if let Some(n) = n_test {
                ctx.cfg.data.n_test = *n;
            }
            let d = gen_dataset(&ctx.cfg.data)?;
            write_dataset(&ctx.out, &d)?;
            for f in ["train.jsonl", "test_iid.jsonl", "test_anti.jsonl", "dataset.json"] {
                ctx.written.push(f.into());
            }
            println!("wrote {} / {} / {} samples to {}", d.train.len(), d.test_iid.len(), d.test_anti.len(), ctx.out.display());
            "gen-data"
        }
        Command::Pretrain => {
            let d = ctx.data(&common)?;
            let out = pretrain_backbone(&ctx.cfg, &d)?;
            phase_files(&mut ctx, &out, "backbone.ckpt")?;
            "pretrain"
        }
        Command::Stage1 { backbone } => {
            let d = ctx.data(&common)?;
            let bb = Checkpoint::load(&or_default(backbone, &ctx.out, "backbone.ckpt"))?;
            let out = stage1(&ctx.cfg, &d, &bb)?;
            phase_files(&mut ctx, &out, "stage1.ckpt")?;
            "stage1"
        }
        Command::Stage2 { from } => {
            let d = ctx.data(&common)?;
            let prev = Checkpoint::load(&or_default(from, &ctx.out, "stage1.ckpt"))?;
            let out = stage2(&ctx.cfg, &d, &prev)?;
            phase_files(&mut ctx, &out, "stage2.ckpt")?;
            "stage2"
        }
        Command::Train { check } => {
            let d = ctx.data(&common)?;
            let p = run_pipeline(&ctx.cfg, &d)?;
            println!("question-only baseline: test_anti {:.4}", p.question_only.accuracy);
            phase_files(&mut ctx, &p.phase0, "backbone.ckpt")?;
            phase_files(&mut ctx, &p.stage1, "stage1.ckpt")?;
            phase_files(&mut ctx, &p.stage2, "stage2.ckpt")?;
            if *check {
                let b = run_baselines(&ctx.cfg, &d, &p)?;
                let mut s2o = b.stage2_only.clone();
                s2o.phase = "stage2_only".into();
                ctx.report(&s2o)?;
                let mut learn = b.learnable.clone();
                learn.phase = "learnable_stage1+2".into();
                ctx.report(&learn)?;
                let checks = shortcut_checks(&ctx.cfg, &p, &b);
                let mut s = String::new();
                for c in &checks {
                    println!("{c}");
                    s.push_str(&serde_json::to_string(c)?);
                    s.push('\n');
                }
                ctx.write("check.jsonl", &s)?;
                ok = checks.iter().all(|c| c.passed);
            }
            "train"
        }
        Command::Eval { checkpoint, mask } => {
            let d = ctx.data(&common)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let model = Model::from_checkpoint(&ctx.cfg, &ckpt)?;
            let kind = match mask {
                EvalMask::Auto => model.default_eval_mask(&ctx.cfg.train),
                EvalMask::Causal => MaskKind::Causal,
                EvalMask::Prose => MaskKind::Bottleneck(BottleneckMode::Prose),
                EvalMask::Strict => MaskKind::Bottleneck(BottleneckMode::Strict),
            };
            let metrics = model.evaluate_tests(&d, kind, ctx.cfg.train.eval_batch_size)?;
            let r = PhaseReport {
                phase: "eval".into(),
                eval_mask: kind,
                epochs: Vec::new(),
                metrics,
            };
            ctx.report(&r)?;
            "eval"
        }
        Command::Ablate { backbone, grid } => {
            let d = ctx.data(&common)?;
            let bb = match backbone {
                Some(p) => Checkpoint::load(p)?,
                None => {
                    let out = pretrain_backbone(&ctx.cfg, &d)?;
                    phase_files(&mut ctx, &out, "backbone.ckpt")?;
                    out.checkpoint()
                }
            };
            let cells = match grid {
                Grid::Full => default_grid(),
                Grid::KSweep => k_sweep_grid(),
            };
            let report = run_ablation(&ctx.cfg, &d, &bb, &cells, |r| match &r.outcome {
                Ok(m) => println!("{}: test_iid {:.4} test_anti {:.4}", r.cell.name(), m.test_iid.accuracy, m.test_anti.accuracy),
                Err(e) => eprintln!("{}: failed: {e}", r.cell.name()),
            });
            ctx.write("ablation.jsonl", &report.to_jsonl())?;
            ctx.write("ablation.md", &report.to_markdown())?;
            ok = !report.any_failed();
            "ablate"
        }
        Command::Gradcheck => {
            let entries = gradsuite::run_suite(ctx.cfg.train.seed)?;
            let mut s = String::new();
            for e in &entries {
                let verdict = if e.passed() { "ok" } else { "FAIL" };
                println!("{verdict:4} {:32} max_rel_err {:.3e} over {} coords", e.component, e.max_rel_err, e.coords);
                s.push_str(&serde_json::to_string(e)?);
                s.push('\n');
            }
            ctx.write("gradcheck.jsonl", &s)?;
            ok = entries.iter().all(|e| e.passed());
            "gradcheck"
        }
        Command::MaskDump { layout, stage, mode } => {
            let &[n_v, n_q, n_c, n_a] = layout.as_slice() else {
                Cli::command()
                    .error(clap::error::ErrorKind::WrongNumberOfValues, "--layout takes four sizes n_v,n_q,n_c,n_a")
                    .exit();
            };
            let l = SegmentLayout::new(n_v, n_q, n_c, n_a);
            let kind = if *stage == 1 {
                MaskKind::Bottleneck((*mode).into())
            } else {
                MaskKind::Causal
            };
            print!("{}", stage_mask(&l, kind)?.render(&l));
            return Ok(true);
        }
    };
    ctx.finish(name)?;
    Ok(ok)
}

/// Parses the process arguments and runs the command. Usage errors exit
/// with 2, failed checks and runtime errors with 1.
pub fn main() -> ExitCode {
    let footer = help_footer();
    let cmd = Cli::command().after_long_help(footer.clone()).after_help(footer);
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = serde_json::json!({ "error": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
