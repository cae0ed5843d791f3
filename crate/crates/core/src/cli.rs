//! The `cdt` command line: `synth`, `train`, `eval` and `lodo`.
//!
//! Every command reads an optional JSON [`RunConfig`], applies flag
//! overrides on top (flags win) and writes the merged result next to its
//! artifacts as `config.json`. Exit codes: 0 success, 2 usage/config/data
//! error, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, DomainDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_domain, leave_one_domain_out, EvalOptions, EvalReport, Evaluation};
use crate::losses::LmclForm;
use crate::model::{ModelConfig, ModelParams};
use crate::trainer::{train, write_traces, ClassIndex, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Network widths; input and class counts come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden_dim: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub map_d: usize,
    pub final_dim: usize,
    pub embed_dim: usize,
    pub normalize_maps: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 1);
        ModelSpec {
            hidden_dim: d.hidden_dim,
            map_h: d.map_h,
            map_w: d.map_w,
            map_d: d.map_d,
            final_dim: d.final_dim,
            embed_dim: d.embed_dim,
            normalize_maps: d.normalize_maps,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, num_classes: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            map_h: self.map_h,
            map_w: self.map_w,
            map_d: self.map_d,
            repr_dim: self.map_h * self.map_w * self.map_d,
            final_dim: self.final_dim,
            embed_dim: self.embed_dim,
            num_classes,
            normalize_maps: self.normalize_maps,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Everything a run depends on. `seed` is the master seed: it replaces the
/// per-section seeds of `synth`, `train` and `eval` when the config is resolved.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub held_out: Option<u32>,
    pub synth: SynthConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    /// λ grid for `lodo`; empty means just `train.lambda`.
    pub sweep_lambda: Vec<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn resolve(mut self) -> Result<Self> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.synth.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if let Some(l) = self.sweep_lambda.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Contract(format!("sweep lambda {l} outside [0, 1]")));
        }
        Ok(self)
    }

    fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Contract("no dataset given (use --data)".into()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "cdt", version, about = "Cross-domain triplet training and open-set evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset.
    Synth {
        #[command(flatten)]
        common: Overrides,
        /// Dataset file; a `.bin` extension selects the binary format.
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train a model; writes checkpoint.json, trace.jsonl and config.json.
    Train {
        #[command(flatten)]
        common: Overrides,
        /// Domain to leave out of training.
        #[arg(long)]
        held_out: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one domain.
    Eval {
        #[command(flatten)]
        common: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        held_out: Option<u32>,
        /// Report JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the ROC curve as CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Leave-one-domain-out over every domain (and every λ of --sweep-lambda).
    Lodo {
        #[command(flatten)]
        common: Overrides,
        #[arg(long, value_delimiter = ',')]
        sweep_lambda: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long = "margin-m")]
    pub margin_m: Option<f64>,
    #[arg(long = "scale-s")]
    pub scale_s: Option<f64>,
    #[arg(long)]
    pub second_order: bool,
    #[arg(long)]
    pub no_cls: bool,
    #[arg(long)]
    pub no_trp: bool,
    #[arg(long)]
    pub no_cdt: bool,
    #[arg(long)]
    pub cov_grad: bool,
    #[arg(long, value_enum)]
    pub lmcl_form: Option<LmclForm>,
    #[arg(long, value_delimiter = ',')]
    pub far_levels: Option<Vec<f64>>,
}

impl Overrides {
    /// Config file (or defaults) with the flags applied.
    pub fn merged(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.data {
            c.data = Some(v.clone());
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        let t = &mut c.train;
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.lambda {
            t.lambda = v;
        }
        if let Some(v) = self.alpha {
            t.alpha = v;
        }
        if let Some(v) = self.beta {
            t.beta = v;
        }
        if let Some(v) = self.batch {
            t.batch = v;
        }
        if let Some(v) = self.tau {
            t.loss.tau = v;
        }
        if let Some(v) = self.rho {
            t.loss.rho = v;
        }
        if let Some(v) = self.margin_m {
            t.loss.m = v;
        }
        if let Some(v) = self.scale_s {
            t.loss.s = v;
        }
        if let Some(v) = self.lmcl_form {
            t.loss.lmcl_form = v;
        }
        t.second_order |= self.second_order;
        t.cov_grad |= self.cov_grad;
        t.toggles.cls &= !self.no_cls;
        t.toggles.trp &= !self.no_trp;
        t.toggles.cdt &= !self.no_cdt;
        if let Some(v) = &self.far_levels {
            c.eval.far_levels = v.clone();
        }
        Ok(c)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            print!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one command and returns what it would print.
pub fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::Synth { common, out } => cmd_synth(&common.merged()?.resolve()?, &out),
        Command::Train { common, held_out, out } => {
            let mut c = common.merged()?;
            c.held_out = held_out.or(c.held_out);
            cmd_train(&c.resolve()?, &out)
        }
        Command::Eval {
            common,
            checkpoint,
            held_out,
            out,
            roc,
        } => {
            let mut c = common.merged()?;
            c.held_out = held_out.or(c.held_out);
            cmd_eval(&c.resolve()?, &checkpoint, out.as_deref(), roc.as_deref())
        }
        Command::Lodo {
            common,
            sweep_lambda,
            out,
        } => {
            let mut c = common.merged()?;
            if let Some(grid) = sweep_lambda {
                c.sweep_lambda = grid;
            }
            cmd_lodo(&c.resolve()?, &out)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo(config: &RunConfig, dir: &Path) -> Result<()> {
    write(&dir.join("config.json"), &config.to_json()?)
}

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<String> {
    let domains = data::generate(&config.synth)?;
    data::store(out, &domains, config.synth.input_dim)?;
    let samples: usize = domains.iter().map(|d| d.samples().len()).sum();
    Ok(format!(
        "{}: {} domains, {} identities, {} samples, {} features\n",
        out.display(),
        domains.len(),
        domains.iter().map(DomainDataset::num_identities).sum::<usize>(),
        samples,
        config.synth.input_dim
    ))
}

fn split_held_out(domains: Vec<DomainDataset>, held_out: Option<u32>) -> Result<(Vec<DomainDataset>, Option<DomainDataset>)> {
    let Some(id) = held_out else {
        return Ok((domains, None));
    };
    let (test, rest): (Vec<_>, Vec<_>) = domains.into_iter().partition(|d| d.domain_id == id);
    match test.into_iter().next() {
        Some(t) => Ok((rest, Some(t))),
        None => Err(Error::Contract(format!("no domain with id {id}"))),
    }
}

fn train_params(config: &RunConfig, domains: &[DomainDataset], input_dim: usize, train_cfg: &TrainConfig) -> Result<ModelParams> {
    let model = config.model.build(input_dim, ClassIndex::from_domains(domains).len())?;
    Ok(train(domains, &model, train_cfg)?.params)
}

pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<String> {
    let (domains, input_dim) = data::load(config.data_path()?)?;
    let (domains, _) = split_held_out(domains, config.held_out)?;
    let model = config.model.build(input_dim, ClassIndex::from_domains(&domains).len())?;
    let outcome = train(&domains, &model, &config.train)?;
    create_dir(out)?;
    echo(config, out)?;
    outcome.params.save(&out.join("checkpoint.json"))?;
    write_traces(&out.join("trace.jsonl"), &outcome.traces)?;
    let last = outcome.traces.last();
    Ok(format!(
        "trained {} steps on {} domains ({} classes); final L_s {}\n",
        config.train.steps,
        domains.len(),
        model.num_classes,
        last.map_or("n/a".into(), |t| format!("{:.4}", t.l_s))
    ))
}

fn write_evaluation(ev: &Evaluation, report: Option<&Path>, roc: Option<&Path>) -> Result<()> {
    if let Some(p) = report {
        ev.report.save(p)?;
    }
    if let Some(p) = roc {
        write(p, &ev.roc.to_csv())?;
    }
    Ok(())
}

pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, out: Option<&Path>, roc: Option<&Path>) -> Result<String> {
    let params = ModelParams::load(checkpoint)?;
    let (domains, input_dim) = data::load(config.data_path()?)?;
    if input_dim != params.config.input_dim {
        return Err(Error::Dimension(format!(
            "data has {input_dim} features, checkpoint expects {}",
            params.config.input_dim
        )));
    }
    let held_out = config
        .held_out
        .ok_or_else(|| Error::Contract("no held-out domain given (use --held-out)".into()))?;
    let (_, test) = split_held_out(domains, Some(held_out))?;
    let ev = evaluate_domain(&params, &test.expect("split returns the held-out domain"), &config.eval)?;
    write_evaluation(&ev, out, roc)?;
    Ok(ev.report.table())
}

/// One row of the `lodo` summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoRow {
    pub lambda: f64,
    pub report_path: PathBuf,
    pub report: EvalReport,
}

pub fn summary_table(rows: &[LodoRow]) -> String {
    let mut out = String::new();
    let fars: Vec<f64> = rows
        .first()
        .map(|r| r.report.tar_at_far.iter().map(|t| t.far).collect())
        .unwrap_or_default();
    let _ = write!(out, "{:>6} {:>8}", "lambda", "held_out");
    for f in &fars {
        let _ = write!(out, " {:>10}", format!("TAR@{f}"));
    }
    let _ = writeln!(out, " {:>8} {:>8} {:>8} {:>8}", "rank1", "auc", "verif", "ident");
    for r in rows {
        let _ = write!(out, "{:>6} {:>8}", r.lambda, r.report.held_out_domain);
        for t in &r.report.tar_at_far {
            let _ = write!(out, " {:>10.4}", t.tar);
        }
        let _ = writeln!(
            out,
            " {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.report.rank1, r.report.auc, r.report.verification_accuracy.mean, r.report.identification_accuracy
        );
    }
    out
}

pub fn cmd_lodo(config: &RunConfig, out: &Path) -> Result<String> {
    let (domains, input_dim) = data::load(config.data_path()?)?;
    let grid = if config.sweep_lambda.is_empty() {
        vec![config.train.lambda]
    } else {
        config.sweep_lambda.clone()
    };
    create_dir(out)?;
    echo(config, out)?;
    let mut rows = Vec::new();
    for &lambda in &grid {
        let dir = out.join(format!("lambda-{lambda}"));
        create_dir(&dir)?;
        let train_cfg = TrainConfig {
            lambda,
            ..config.train.clone()
        };
        for d in &domains {
            let ev = leave_one_domain_out(
                &domains,
                d.domain_id,
                |tr| train_params(config, tr, input_dim, &train_cfg),
                &config.eval,
            )?;
            let report_path = dir.join(format!("domain-{}.json", d.domain_id));
            write_evaluation(&ev, Some(&report_path), Some(&dir.join(format!("domain-{}.roc.csv", d.domain_id))))?;
            rows.push(LodoRow {
                lambda,
                report_path,
                report: ev.report,
            });
        }
    }
    let table = summary_table(&rows);
    write(&out.join("summary.json"), &serde_json::to_string_pretty(&rows)?)?;
    write(&out.join("summary.txt"), &table)?;
    Ok(table)
}
