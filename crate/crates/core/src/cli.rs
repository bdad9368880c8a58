//! Command-line pipeline: ingest, mine, cfgen, train, eval and the
//! synthetic ablation demo.
//!
//! Configuration comes from an optional JSON file holding every
//! [`TrainConfig`] field plus the path keys of [`Paths`] (and a `synth`
//! object for the demo corpus). Command-line flags override the file.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::corpus::{parse_corpus, window_examples, Corpus};
use crate::counterfactual::{build_cf_dataset, EditKind};
use crate::error::Error;
use crate::metrics::{evaluate, EditDistanceVariant, EvalOptions, EvalReport, GroundTruthOracle};
use crate::synth::{synth_corpus, SynthSpec};
use crate::tensor::TensorDump;
use crate::toymodel::{train, Decode, EpochRecord, LossVariant, ModelParams, TrainConfig};
use crate::{par, rng};

#[derive(Debug, Parser)]
#[command(name = "plausible", version, about = "Constraint mining, counterfactuals and plausibility-aware action anticipation")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; every random stage derives its stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Primary output file of the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Summarize a corpus.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Mine temporal and verb-noun constraints.
    Mine {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Minimum number of sequences a pair must co-occur in.
        #[arg(long)]
        min_support: Option<usize>,
    },
    /// Generate counterfactual targets for every windowed example.
    Cfgen {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        matrices: Option<PathBuf>,
        /// Probability of trying a temporal swap before an entity swap.
        #[arg(long)]
        mix: Option<f64>,
    },
    /// Train the toy model; writes a checkpoint and a JSONL history.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// Drop the plausibility term from the objective.
        #[arg(long)]
        no_plau: bool,
    },
    /// Evaluate a checkpoint (or the ground-truth oracle) on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        matrices: Option<PathBuf>,
        /// Number of candidate continuations per example.
        #[arg(long)]
        k: Option<usize>,
        /// Anticipation horizon in actions.
        #[arg(long)]
        z: Option<usize>,
        #[arg(long, value_enum, default_value_t = PredictorArg::Model)]
        predictor: PredictorArg,
        /// Use optimal string alignment instead of unrestricted Damerau-Levenshtein.
        #[arg(long)]
        osa: bool,
    },
    /// Synthetic corpus plus the four-row loss ablation.
    Demo {
        /// Number of consecutive seeds to average over.
        #[arg(long, default_value_t = 1)]
        replicates: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Nll,
    Rep,
    RepFocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictorArg {
    Model,
    Oracle,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus_in: Option<PathBuf>,
    pub matrices_out: Option<PathBuf>,
    pub cf_out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub history_out: Option<PathBuf>,
}

const PATH_KEYS: [&str; 6] = ["corpus_in", "matrices_out", "cf_out", "checkpoint", "report_out", "history_out"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: Paths,
    pub synth: SynthSpec,
}

impl RunConfig {
    /// Parse the flat JSON layout: path keys, an optional `synth` object and
    /// the training fields side by side.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        let serde_json::Value::Object(mut map) = value else {
            return Err(CliError::usage("config: expected a JSON object"));
        };
        let mut paths = serde_json::Map::new();
        for key in PATH_KEYS {
            if let Some(v) = map.remove(key) {
                paths.insert(key.into(), v);
            }
        }
        let synth = map.remove("synth").unwrap_or_else(|| serde_json::json!({}));
        let bad = |what: &str, e: serde_json::Error| CliError::usage(format!("config {what}: {e}"));
        Ok(RunConfig {
            paths: serde_json::from_value(paths.into()).map_err(|e| bad("paths", e))?,
            synth: serde_json::from_value(synth).map_err(|e| bad("synth", e))?,
            train: serde_json::from_value(map.into()).map_err(|e| bad("fields", e))?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Exit status 2 for bad usage, configuration or unreadable inputs, 1 for
/// failures while running.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn required<'a>(flag: &'a Option<PathBuf>, config: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    flag.as_deref()
        .or(config.as_deref())
        .filter(|p| !p.as_os_str().is_empty())
        .ok_or_else(|| CliError::usage(format!("missing {what} path")))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn input<T>(path: &Path, r: crate::error::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> CliResult<Corpus> {
    input(path, parse_corpus(open(path)?))
}

fn load_constraints(path: &Path) -> CliResult<ConstraintSet> {
    input(path, ConstraintSet::read(open(path)?))
}

fn load_checkpoint(path: &Path) -> CliResult<(ModelParams, Vec<String>, Vec<String>)> {
    let dump = input(path, TensorDump::read(open(path)?))?;
    input(path, ModelParams::from_dump(&dump))
}

fn finish(mut w: BufWriter<File>) -> CliResult<()> {
    w.flush()?;
    Ok(())
}

/// Run a parsed command line, writing human-readable output to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let out = cli.out.clone();
    match &cli.command {
        Command::Ingest { corpus } => {
            let corpus = load_corpus(required(corpus, &cfg.paths.corpus_in, "corpus")?)?;
            let summary = corpus.summary();
            writeln!(stdout, "{summary}")?;
            writeln!(stdout, "actions: {}", summary.actions)?;
            writeln!(stdout, "length histogram:")?;
            for (len, count) in &summary.length_histogram {
                writeln!(stdout, "  {len:>4}: {count}")?;
            }
        }
        Command::Mine { corpus, min_support } => {
            if let Some(s) = min_support {
                cfg.train.min_support = *s;
            }
            let corpus = load_corpus(required(corpus, &cfg.paths.corpus_in, "corpus")?)?;
            if cfg.train.min_support == 0 {
                return Err(CliError::usage("min_support must be >= 1"));
            }
            let set = ConstraintSet::mine(&corpus, cfg.train.min_support)?;
            let path = required(&out, &cfg.paths.matrices_out, "matrices output")?;
            let mut w = create(path)?;
            set.write(&mut w)?;
            finish(w)?;
            writeln!(stdout, "temporal constraints: {} nonzero entries", set.temporal.nonzero())?;
            writeln!(stdout, "verb-noun constraints: {} implausible pairs", set.verb_noun.nonzero())?;
        }
        Command::Cfgen { corpus, matrices, mix } => {
            if let Some(m) = mix {
                cfg.train.mix = *m;
            }
            if !(0.0..=1.0).contains(&cfg.train.mix) {
                return Err(CliError::usage(format!("mix {} not in [0, 1]", cfg.train.mix)));
            }
            let window = cfg.train.window().map_err(|e| CliError::usage(e.to_string()))?;
            let corpus = load_corpus(required(corpus, &cfg.paths.corpus_in, "corpus")?)?;
            let set = load_constraints(required(matrices, &cfg.paths.matrices_out, "matrices")?)?;
            let examples = window_examples(&corpus, window).examples;
            let seed = rng::derive_seed(cfg.train.seed, "cf", 0);
            let data = build_cf_dataset(&examples, &set.temporal, &set.verb_noun, seed, cfg.train.mix)?;
            let path = required(&out, &cfg.paths.cf_out, "counterfactual output")?;
            let mut w = create(path)?;
            data.write_jsonl(&corpus, &mut w)?;
            finish(w)?;
            writeln!(stdout, "counterfactuals: {}", data.records.len())?;
            writeln!(stdout, "  temporal_swap: {}", data.count(EditKind::Temporal))?;
            writeln!(stdout, "  verb_swap: {}", data.count(EditKind::Verb))?;
            writeln!(stdout, "  noun_swap: {}", data.count(EditKind::Noun))?;
            writeln!(stdout, "dropped: {}", data.dropped)?;
        }
        Command::Train { corpus, epochs, loss, no_plau } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(l) = loss {
                cfg.train.loss_variant = match l {
                    LossArg::Nll => LossVariant::Nll,
                    LossArg::Rep => LossVariant::Rep,
                    LossArg::RepFocal => LossVariant::RepFocal,
                };
            }
            if *no_plau {
                cfg.train.use_plau = false;
            }
            cfg.train.validate().map_err(|e| CliError::usage(e.to_string()))?;
            let corpus = load_corpus(required(corpus, &cfg.paths.corpus_in, "corpus")?)?;
            let ckpt = required(&out, &cfg.paths.checkpoint, "checkpoint output")?.to_path_buf();
            let history_path =
                cfg.paths.history_out.clone().unwrap_or_else(|| ckpt.with_extension("history.jsonl"));
            let outcome = train(&corpus, &cfg.train)?;
            let mut w = create(&ckpt)?;
            outcome.params.to_dump(&corpus.verb_vocab, &corpus.noun_vocab).write(&mut w)?;
            finish(w)?;
            let mut w = create(&history_path)?;
            for rec in &outcome.history {
                serde_json::to_writer(&mut w, rec).map_err(Error::from)?;
                w.write_all(b"\n")?;
            }
            finish(w)?;
            writeln!(stdout, "{}", history_header())?;
            for rec in &outcome.history {
                writeln!(stdout, "{}", history_row(rec))?;
            }
            writeln!(stdout, "checkpoint: {}", ckpt.display())?;
            writeln!(stdout, "history: {}", history_path.display())?;
        }
        Command::Eval { checkpoint, corpus, matrices, k, z, predictor, osa } => {
            if let Some(k) = k {
                cfg.train.k = *k;
            }
            if let Some(z) = z {
                cfg.train.horizon = *z;
            }
            let window = cfg.train.window().map_err(|e| CliError::usage(e.to_string()))?;
            if cfg.train.k == 0 {
                return Err(CliError::usage("K must be >= 1"));
            }
            let raw = load_corpus(required(corpus, &cfg.paths.corpus_in, "corpus")?)?;
            let set = load_constraints(required(matrices, &cfg.paths.matrices_out, "matrices")?)?;
            let model = match (predictor, checkpoint.as_ref().or(cfg.paths.checkpoint.as_ref())) {
                (PredictorArg::Model, None) => return Err(CliError::usage("missing checkpoint path")),
                (_, Some(p)) => Some(load_checkpoint(p)?),
                (PredictorArg::Oracle, None) => None,
            };
            let corpus = match &model {
                Some((_, verbs, nouns)) => raw.reindex(verbs, nouns).map_err(|e| CliError::usage(e.to_string()))?,
                None => raw,
            };
            if set.temporal.n_verbs() != corpus.n_verbs() || set.temporal.n_nouns() != corpus.n_nouns() {
                return Err(CliError::usage("constraint matrices do not match the vocabulary"));
            }
            let examples = window_examples(&corpus, window).examples;
            let opts = EvalOptions {
                horizon: window.horizon,
                k: cfg.train.k,
                decode: Decode::Greedy,
                variant: if *osa { EditDistanceVariant::OptimalStringAlignment } else { EditDistanceVariant::Unrestricted },
                seed: rng::derive_seed(cfg.train.seed, "eval", 0),
            };
            let report = match (predictor, &model) {
                (PredictorArg::Model, Some((params, _, _))) => evaluate(params, &examples, &set, opts)?,
                _ => {
                    let oracle = GroundTruthOracle { n_verbs: corpus.n_verbs(), n_nouns: corpus.n_nouns() };
                    evaluate(&oracle, &examples, &set, opts)?
                }
            };
            if let Some(path) = out.as_ref().or(cfg.paths.report_out.as_ref()) {
                let mut w = create(path)?;
                serde_json::to_writer_pretty(&mut w, &report).map_err(Error::from)?;
                w.write_all(b"\n")?;
                finish(w)?;
            }
            writeln!(stdout, "examples: {}", report.examples)?;
            writeln!(stdout, "{}", EvalReport::TABLE_HEADER)?;
            writeln!(stdout, "{}", report.table_row())?;
        }
        Command::Demo { replicates } => {
            if *replicates == 0 {
                return Err(CliError::usage("replicates must be >= 1"));
            }
            cfg.train.validate().map_err(|e| CliError::usage(e.to_string()))?;
            cfg.synth.validate().map_err(|e| CliError::usage(e.to_string()))?;
            let seeds: Vec<u64> = (0..*replicates as u64).map(|i| cfg.train.seed.wrapping_add(i)).collect();
            let reports = seeds
                .iter()
                .map(|&s| run_demo(&cfg.synth, &cfg.train, s))
                .collect::<crate::error::Result<Vec<_>>>()?;
            let mut text = String::new();
            for r in &reports {
                text.push_str(&r.render());
            }
            if reports.len() > 1 {
                text.push_str(&render_mean(&reports));
            }
            stdout.write_all(text.as_bytes())?;
            if let Some(path) = out.as_ref().or(cfg.paths.report_out.as_ref()) {
                let mut w = create(path)?;
                w.write_all(text.as_bytes())?;
                finish(w)?;
            }
        }
    }
    Ok(())
}

fn history_header() -> &'static str {
    "epoch |    L_plau |     L_rep |   L_total | repetition | followed / checked"
}

fn history_row(r: &EpochRecord) -> String {
    let opt = |x: Option<f64>, w: usize| x.map_or_else(|| format!("{:>w$}", "-"), |v| format!("{v:>w$.3}"));
    format!(
        "{:>5} | {:>9.4} | {:>9.4} | {:>9.4} | {} | {} / {}",
        r.step,
        r.plau,
        r.rep,
        r.total,
        opt(r.repetition, 10),
        opt(r.followed, 6),
        opt(r.checked, 6)
    )
}

/// One row of the loss ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub use_plau: bool,
    pub loss: LossVariant,
}

pub const ABLATION_ROWS: [AblationRow; 4] = [
    AblationRow { name: "both", use_plau: true, loss: LossVariant::Rep },
    AblationRow { name: "plau only", use_plau: true, loss: LossVariant::Nll },
    AblationRow { name: "rep only", use_plau: false, loss: LossVariant::Rep },
    AblationRow { name: "neither", use_plau: false, loss: LossVariant::Nll },
];

#[derive(Debug, Clone, PartialEq)]
pub struct DemoRow {
    pub row: AblationRow,
    pub report: EvalReport,
    pub last_epoch: EpochRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    pub seed: u64,
    pub corpus: Corpus,
    pub temporal_constraints: usize,
    pub verbnoun_constraints: usize,
    /// (temporal swaps, verb swaps, noun swaps, dropped) over training examples.
    pub counterfactuals: (usize, usize, usize, usize),
    pub train_examples: usize,
    pub heldout_examples: usize,
    pub rows: Vec<DemoRow>,
}

/// Generate the synthetic corpus for `seed` and train/evaluate every row of
/// the ablation. Rows share the corpus, split and initialization; they run
/// concurrently but each is deterministic.
pub fn run_demo(spec: &SynthSpec, base: &TrainConfig, seed: u64) -> crate::error::Result<DemoReport> {
    base.validate()?;
    let (corpus, _) = synth_corpus(spec, rng::derive_seed(seed, "demo-corpus", 0))?;
    let train_seed = rng::derive_seed(seed, "demo-train", 0);
    let outcomes = par::map(&ABLATION_ROWS, |row| {
        let cfg = TrainConfig { seed: train_seed, use_plau: row.use_plau, loss_variant: row.loss, ..base.clone() };
        let outcome = train(&corpus, &cfg)?;
        let opts = EvalOptions {
            horizon: cfg.horizon,
            k: cfg.k,
            decode: Decode::Greedy,
            variant: EditDistanceVariant::Unrestricted,
            seed: rng::derive_seed(seed, "demo-eval", 0),
        };
        let report = evaluate(&outcome.params, &outcome.heldout_examples, &outcome.constraints, opts)?;
        let last_epoch = *outcome.history.last().expect("epochs >= 1");
        Ok((DemoRow { row: *row, report, last_epoch }, outcome))
    })
    .into_iter()
    .collect::<crate::error::Result<Vec<_>>>()?;

    let first = &outcomes[0].1;
    let cf = build_cf_dataset(
        &first.train_examples,
        &first.constraints.temporal,
        &first.constraints.verb_noun,
        rng::derive_seed(train_seed, "cf", 0),
        base.mix,
    )?;
    Ok(DemoReport {
        seed,
        temporal_constraints: first.constraints.temporal.nonzero() / 2,
        verbnoun_constraints: first.constraints.verb_noun.nonzero(),
        counterfactuals: (
            cf.count(EditKind::Temporal),
            cf.count(EditKind::Verb),
            cf.count(EditKind::Noun),
            cf.dropped,
        ),
        train_examples: first.train_examples.len(),
        heldout_examples: first.heldout_examples.len(),
        rows: outcomes.iter().map(|(r, _)| r.clone()).collect(),
        corpus,
    })
}

const GRID_HEADER_PREFIX: &str = "row       | L_plau | L_rep | ";

fn grid_line(name: &str, plau: bool, rep: bool, report: &EvalReport) -> String {
    let mark = |b: bool| if b { "  x   " } else { "      " };
    format!("{name:<9} | {} | {} | {}", mark(plau), &mark(rep)[..5], report.table_row())
}

impl DemoReport {
    pub fn row(&self, name: &str) -> Option<&DemoRow> {
        self.rows.iter().find(|r| r.row.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let (t, v, n, dropped) = self.counterfactuals;
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "corpus: {}", self.corpus.summary());
        let _ = writeln!(
            s,
            "constraints: {} temporal pairs, {} implausible verb-noun pairs",
            self.temporal_constraints, self.verbnoun_constraints
        );
        let _ = writeln!(s, "counterfactuals: {t} temporal swaps, {v} verb swaps, {n} noun swaps, {dropped} dropped");
        let _ = writeln!(s, "examples: {} train, {} held out", self.train_examples, self.heldout_examples);
        let _ = writeln!(s, "{GRID_HEADER_PREFIX}{}", EvalReport::TABLE_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{}", grid_line(r.row.name, r.row.use_plau, r.row.loss != LossVariant::Nll, &r.report));
        }
        s.push('\n');
        s
    }
}

/// Field-wise mean of the per-seed reports for every ablation row.
pub fn mean_rows(reports: &[DemoReport]) -> Vec<(AblationRow, EvalReport)> {
    ABLATION_ROWS
        .iter()
        .map(|row| {
            let rs: Vec<&EvalReport> = reports.iter().filter_map(|r| r.row(row.name)).map(|r| &r.report).collect();
            let n = rs.len() as f64;
            let mean = |f: fn(&EvalReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let mut m = *rs[0];
            m.ed_verb = mean(|r| r.ed_verb);
            m.ed_noun = mean(|r| r.ed_noun);
            m.top5_verb = mean(|r| r.top5_verb);
            m.top5_noun = mean(|r| r.top5_noun);
            m.top5_action = mean(|r| r.top5_action);
            m.repetition = mean(|r| r.repetition);
            m.bleu = mean(|r| r.bleu);
            m.compliance.avg_followed = mean(|r| r.compliance.avg_followed);
            m.compliance.avg_checked = mean(|r| r.compliance.avg_checked);
            m.examples = rs.iter().map(|r| r.examples).sum();
            (*row, m)
        })
        .collect()
}

fn render_mean(reports: &[DemoReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mean over {} seeds", reports.len());
    let _ = writeln!(s, "{GRID_HEADER_PREFIX}{}", EvalReport::TABLE_HEADER);
    for (row, m) in mean_rows(reports) {
        let _ = writeln!(s, "{}", grid_line(row.name, row.use_plau, row.loss != LossVariant::Nll, &m));
    }
    s
}
