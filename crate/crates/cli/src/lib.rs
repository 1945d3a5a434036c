//! Batch front end: `generate`, `solve` and `eval`.
//!
//! Exit codes are 0 on success, 2 for bad input (flags, files) and 3 when
//! the pipeline itself fails. Failures print one JSON object on stderr.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use mixbnd::alphabet::{
    clique_reduction, dary_max_abs_error, encode_samples, induced_binary_model, lift_parameters, random_dary_model,
    AlphabetError, AlphabetSpec, DaryModelFile, INDUCED_ETA,
};
use mixbnd::io::{self, IoError, RecoveredDocument};
use mixbnd::model::{compare_models, random_separated_model, ModelComparison};
use mixbnd::recovery::{Diagnostics, RecoveryError};
use mixbnd::run_builder::{build_generic, build_path, build_singletons, default_n_mp, BuildError};
use mixbnd::{
    split_seed, Dag, EmBackend, EmConfig, ExactBackend, MixProdOracle, MixtureModel, ModelError, NoisyBackend,
    RecoveredModel, RunCollection, SampleSet, SolveOptions,
};

// Sub-seed streams derived from `--seed`.
const STREAM_MODEL: u64 = 0;
const STREAM_SAMPLES: u64 = 1;
const STREAM_SCRAMBLE: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_EM: u64 = 4;

#[derive(Debug, Parser)]
#[command(name = "mixbnd", version, about = "Identify mixtures of Bayesian networks over a known DAG")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random separated model and optionally samples from it.
    Generate(GenerateArgs),
    /// Recover a mixture from an oracle over a known model or from samples.
    Solve(SolveArgs),
    /// Compare a recovered model with the true one.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub k: usize,
    /// Minimum gap between any two sources on every parameter.
    #[arg(long, default_value_t = 0.1)]
    pub zeta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Sample CSV output, written when `--count` is positive.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub count: usize,
    /// Generate a d-ary model instead of a binary one.
    #[arg(long)]
    pub alphabet_d: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    Exact,
    Noisy,
    Em,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunsKind {
    Generic,
    Path,
    /// Path construction on directed paths, generic otherwise; singletons
    /// when `k = 1`.
    Auto,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = OracleKind::Exact)]
    pub oracle: OracleKind,
    /// Relative error of the noisy oracle.
    #[arg(long, default_value_t = 1e-6)]
    pub noise_eps: f64,
    #[arg(long, value_enum, default_value_t = RunsKind::Auto)]
    pub runs: RunsKind,
    /// True model, queried by the exact and noisy oracles.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Samples, used by the EM oracle.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for oracle calls; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Print the run collection (encodings, then tree edges) to stdout.
    #[arg(long)]
    pub dump_runs: bool,
    #[arg(long)]
    pub alphabet_d: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Alignment separation tolerance; 1e-6 for exact, 1e-2 otherwise.
    #[arg(long)]
    pub sep_tol: Option<f64>,
    /// Independent vertices per run; defaults to max(3k-3, 2).
    #[arg(long)]
    pub n_mp: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub em_restarts: usize,
    #[arg(long)]
    pub min_postselect: Option<usize>,
    /// Largest off-one-hot block mass tolerated when lifting d-ary CPTs;
    /// 1e-6 for exact, 1e-2 otherwise.
    #[arg(long)]
    pub lift_tol: Option<f64>,
    /// Keep the oracle's source labels identical across runs.
    #[arg(long)]
    pub no_scramble: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// True model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub recovered: PathBuf,
    #[arg(long)]
    pub alphabet_d: Option<usize>,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub input: bool,
}

impl CliError {
    fn input(kind: &str, message: impl Into<String>) -> Self {
        CliError { kind: kind.into(), message: message.into(), input: true }
    }

    fn pipeline(kind: &str, message: impl Into<String>) -> Self {
        CliError { kind: kind.into(), message: message.into(), input: false }
    }

    pub fn exit_code(&self) -> i32 {
        if self.input {
            2
        } else {
            3
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message, "exit_code": self.exit_code() }).to_string()
    }
}

/// Innermost variant name of a nested error's `Debug` form, e.g.
/// `Dag(NotEnoughCenters { .. })` gives `NotEnoughCenters`.
fn variant_name(e: &impl std::fmt::Debug) -> String {
    let text = format!("{e:?}");
    let mut rest = text.as_str();
    loop {
        let end = rest.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(rest.len());
        let (name, tail) = rest.split_at(end);
        match tail.strip_prefix('(') {
            Some(inner) if inner.starts_with(|c: char| c.is_ascii_uppercase()) => rest = inner,
            _ => return name.to_string(),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        let kind = match &e {
            IoError::Dag { source, .. } => variant_name(source),
            IoError::Model { source, .. } => variant_name(source),
            IoError::Alphabet { source, .. } => variant_name(source),
            _ => variant_name(&e),
        };
        CliError::input(&kind, e.to_string())
    }
}

impl From<BuildError> for CliError {
    fn from(e: BuildError) -> Self {
        CliError::pipeline(&variant_name(&e), e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::pipeline(&variant_name(&e), e.to_string())
    }
}

impl From<AlphabetError> for CliError {
    fn from(e: AlphabetError) -> Self {
        CliError::pipeline(&variant_name(&e), e.to_string())
    }
}

/// Recovery failure, with the encodings of the runs it names.
fn recovery_error(e: RecoveryError, coll: &RunCollection) -> CliError {
    let runs: Vec<usize> = match &e {
        RecoveryError::Oracle { run, .. }
        | RecoveryError::BadOutput { run, .. }
        | RecoveryError::ZeroDenominator { run, .. }
        | RecoveryError::ZeroConditioningProbability { run, .. } => vec![*run],
        RecoveryError::NotSeparated { parent, child, .. }
        | RecoveryError::AmbiguousPermutation { parent, child, .. } => {
            vec![*parent, *child]
        }
        _ => vec![],
    };
    let mut message = e.to_string();
    for r in runs {
        if let Some(run) = coll.runs().get(r) {
            message.push_str(&format!(" [run {r} = {}]", run.encode()));
        }
    }
    CliError::pipeline(&variant_name(&e), message)
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Solve(a) => solve(&a, stdout),
        Command::Eval(a) => eval(&a, stdout),
    }
}

fn check_k(k: usize) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::input("BadArgument", "--k must be positive"));
    }
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    check_k(a.k)?;
    let g = io::read_dag(&a.graph)?;
    if a.count > 0 && a.samples.is_none() {
        return Err(CliError::input("BadArgument", "--count needs --samples"));
    }
    let model_seed = split_seed(a.seed, STREAM_MODEL);
    let sample_seed = split_seed(a.seed, STREAM_SAMPLES);
    let samples = match a.alphabet_d {
        Some(d) => {
            let m = random_dary_model(&g, d, a.k, a.zeta, model_seed)?;
            io::write_dary_model(&a.out, &m)?;
            (a.count > 0).then(|| m.sample(a.count, sample_seed))
        }
        None => {
            let m = random_separated_model(&g, a.k, a.zeta, model_seed)?;
            io::write_model(&a.out, &m)?;
            (a.count > 0).then(|| m.sample(a.count, sample_seed))
        }
    };
    if let (Some(s), Some(path)) = (samples, &a.samples) {
        io::write_samples(path, &s, true)?;
    }
    Ok(())
}

fn build_collection(g: &Dag, k: usize, n_mp: usize, kind: RunsKind) -> Result<RunCollection, CliError> {
    let coll = match kind {
        RunsKind::Generic => build_generic(g, n_mp)?,
        RunsKind::Path => build_path(g, n_mp)?,
        RunsKind::Auto if k == 1 => build_singletons(g)?,
        RunsKind::Auto if g.path_order().is_some() && g.n() >= 2 * n_mp && n_mp >= 2 => build_path(g, n_mp)?,
        RunsKind::Auto => build_generic(g, n_mp)?,
    };
    Ok(coll)
}

/// Recovered d-ary model with the diagnostics of the binary solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaryRecoveredDocument {
    #[serde(flatten)]
    pub model: DaryModelFile,
    pub alphabet: AlphabetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

/// Binary problem handed to the pipeline: the graph, and the model or
/// samples behind the oracle.
struct Problem {
    graph: Dag,
    model: Option<MixtureModel>,
    samples: Option<SampleSet>,
}

fn solve(a: &SolveArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    check_k(a.k)?;
    if a.jobs == 0 {
        return Err(CliError::input("BadArgument", "--jobs must be positive"));
    }
    if a.oracle == OracleKind::Noisy && !(0.0..1.0).contains(&a.noise_eps) {
        return Err(CliError::input("BadArgument", "--noise-eps must lie in [0, 1)"));
    }
    let g = io::read_dag(&a.graph)?;
    let reduction = a.alphabet_d.map(|d| clique_reduction(&g, d)).transpose()?;
    let n_mp = a.n_mp.unwrap_or_else(|| default_n_mp(a.k));

    let problem = match &reduction {
        None => Problem {
            graph: g.clone(),
            model: a.model.as_ref().map(|p| io::read_model(p, &g)).transpose()?,
            samples: a.samples.as_ref().map(|p| io::read_samples(p, Some(g.n()), 2)).transpose()?,
        },
        Some((reduced, spec)) => {
            let model = match &a.model {
                Some(p) => Some(induced_binary_model(&io::read_dary_model(p, &g)?, reduced, spec, INDUCED_ETA)?),
                None => None,
            };
            let samples = match &a.samples {
                Some(p) => Some(encode_samples(&io::read_samples(p, Some(g.n()), spec.d)?, spec)?),
                None => None,
            };
            Problem { graph: reduced.clone(), model, samples }
        }
    };

    let coll = build_collection(&problem.graph, a.k, n_mp, a.runs)?;
    if a.dump_runs {
        stdout.write_all(coll.dump().as_bytes()).map_err(|e| CliError::input("Io", format!("stdout: {e}")))?;
        if a.model.is_none() && a.samples.is_none() {
            return Ok(());
        }
    }
    let out = a.out.as_ref().ok_or_else(|| CliError::input("BadArgument", "--out is required to solve"))?;

    let scramble = (!a.no_scramble).then(|| split_seed(a.seed, STREAM_SCRAMBLE));
    let need_model = || {
        problem.model.as_ref().ok_or_else(|| CliError::input("BadArgument", "the exact and noisy oracles need --model"))
    };
    let exact;
    let noisy;
    let em;
    let em_config = EmConfig {
        restarts: a.em_restarts,
        min_postselect: a.min_postselect,
        seed: split_seed(a.seed, STREAM_EM),
        ..EmConfig::default()
    };
    let oracle: &dyn MixProdOracle = match a.oracle {
        OracleKind::Exact => {
            exact = ExactBackend::new(need_model()?, scramble);
            &exact
        }
        OracleKind::Noisy => {
            noisy = NoisyBackend::new(need_model()?, a.noise_eps, scramble, split_seed(a.seed, STREAM_NOISE));
            &noisy
        }
        OracleKind::Em => {
            let samples = problem
                .samples
                .as_ref()
                .ok_or_else(|| CliError::input("BadArgument", "the EM oracle needs --samples"))?;
            em = EmBackend::new(samples, em_config);
            &em
        }
    };
    let mut options =
        if a.oracle == OracleKind::Exact { SolveOptions::exact(n_mp) } else { SolveOptions::empirical(n_mp) };
    if let Some(t) = a.sep_tol {
        options.sep_tol = t;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::input("BadArgument", format!("--jobs: {e}")))?;
    let rec: RecoveredModel = pool
        .install(|| mixbnd::solve_mixbnd(&problem.graph, &coll, oracle, a.k, &options))
        .map_err(|e| recovery_error(e, &coll))?;

    let eps = (a.oracle == OracleKind::Noisy).then_some(a.noise_eps);
    match &reduction {
        None => io::write_json(out, &RecoveredDocument::new(&rec, eps))?,
        Some((_, spec)) => {
            let tol = a.lift_tol.unwrap_or(if a.oracle == OracleKind::Exact { 1e-6 } else { 1e-2 });
            let lifted = lift_parameters(&rec.model, spec, &g, tol)?;
            let doc = DaryRecoveredDocument {
                model: DaryModelFile::from_model(&lifted),
                alphabet: spec.clone(),
                diagnostics: Some(rec.diagnostics),
            };
            io::write_json(out, &doc)?
        }
    }
    Ok(())
}

/// Recovery error report. `bounds` is present when the recovered file
/// carries a stability-bound ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub comparison: ModelComparison,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundCheck>,
}

/// Errors measured against the ledger: a parameter is within bound when
/// `|p - p*| / min(p*, 1 - p*)` is at most its ledger entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub eps: f64,
    pub params_checked: usize,
    pub params_within: usize,
    /// Largest ratio of relative error to bound over parameters.
    pub worst_param_ratio: f64,
    pub weights_within: bool,
    pub worst_weight_ratio: f64,
    pub weight_hypothesis_met: bool,
    pub all_within: bool,
}

/// Compares `rec` against `truth` under the matched permutation and checks
/// every entry against the ledger in `doc`.
pub fn check_bounds(
    truth: &MixtureModel,
    rec: &MixtureModel,
    cmp: &ModelComparison,
    doc: &RecoveredDocument,
) -> Option<BoundCheck> {
    let ledger = doc.bounds.as_ref()?;
    let mut checked = 0;
    let mut within = 0;
    let mut worst = 0.0f64;
    for (u, &w) in cmp.permutation.iter().enumerate() {
        for v in truth.dag().vertices() {
            let (t, r) = (truth.cpt(u, v), rec.cpt(w, v));
            for (mask, (&x, &y)) in t.table.iter().zip(&r.table).enumerate() {
                let rel = (x - y).abs() / x.min(1.0 - x);
                let bound = ledger.param(v, mask).map_or(ledger.global_param_bound, |p| p.bound);
                checked += 1;
                if rel <= bound {
                    within += 1;
                }
                worst = worst.max(if bound > 0.0 { rel / bound } else { f64::INFINITY });
            }
        }
    }
    let mut worst_w = 0.0f64;
    for (u, &w) in cmp.permutation.iter().enumerate() {
        let rel = (truth.weights()[u] - rec.weights()[w]).abs() / truth.weights()[u];
        worst_w = worst_w.max(if ledger.weight_bound > 0.0 { rel / ledger.weight_bound } else { f64::INFINITY });
    }
    Some(BoundCheck {
        eps: ledger.eps,
        params_checked: checked,
        params_within: within,
        worst_param_ratio: worst,
        weights_within: worst_w <= 1.0,
        worst_weight_ratio: worst_w,
        weight_hypothesis_met: ledger.weight_hypothesis_met,
        all_within: within == checked && worst_w <= 1.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaryEvalReport {
    pub max_abs_error: f64,
}

fn eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let g = io::read_dag(&a.graph)?;
    let text = match a.alphabet_d {
        None => {
            let truth = io::read_model(&a.model, &g)?;
            let doc = io::read_recovered(&a.recovered)?;
            let rec = doc
                .model
                .clone()
                .into_model(&g)
                .map_err(|e| CliError::input(&variant_name(&e), format!("{}: {e}", a.recovered.display())))?;
            let comparison =
                compare_models(&truth, &rec).map_err(|e| CliError::input(&variant_name(&e), e.to_string()))?;
            let bounds = check_bounds(&truth, &rec, &comparison, &doc);
            serde_json::to_string_pretty(&EvalReport { comparison, bounds })
        }
        Some(d) => {
            let truth = io::read_dary_model(&a.model, &g)?;
            let doc: DaryRecoveredDocument = io::read_json(&a.recovered)?;
            let rec = doc
                .model
                .into_model(&g)
                .map_err(|e| CliError::input(&variant_name(&e), format!("{}: {e}", a.recovered.display())))?;
            if rec.d() != d || rec.k() != truth.k() {
                return Err(CliError::input("ShapeMismatch", "recovered model has a different alphabet or k"));
            }
            serde_json::to_string_pretty(&DaryEvalReport { max_abs_error: dary_max_abs_error(&truth, &rec) })
        }
    }
    .expect("reports serialize");
    match &a.out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| CliError::input("Io", format!("{}: {e}", p.display()))),
        None => writeln!(stdout, "{text}").map_err(|e| CliError::input("Io", format!("stdout: {e}"))),
    }
}
