//! Experiment configs, file formats and the four commands.
//!
//! Exit codes: 0 success, 2 input or config error, 3 completed with stalls
//! (or, for `gradcheck`, completed with failing checks).

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elbo::{
    elbo_recursive, elbo_recursive_with, grad_psi, grad_theta_with, streaming_update_summaries, Recursion,
};
use crate::learner::{mean_filter_l1, run_stream, LearnerConfig, RunOptions, Schedule, StreamRun};
use crate::mfa::{full_q, hat_elbo, InitRule, MfaFamily, MfaHistory, MfaSnapshot, PairwiseTables};
use crate::model::{sample_trajectory, GenerativeHmm, ModelParams, ModelSpec};
use crate::oracle::{
    brute_force_elbo, enumerate_posterior, finite_diff_grad, forward_filter, guarded_count, relative_error, vfe_forms,
    SequenceTable, FD_STEP,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_STALLED: i32 = 3;

/// Half-width of the uniform draw for random initial logits.
pub const THETA_INIT_SPREAD: f64 = 0.5;

/// Window for the trailing filter-error summary.
pub const FILTER_WINDOW: usize = 1000;

pub const OBSERVATIONS_FILE: &str = "observations.jsonl";
pub const STATES_FILE: &str = "ground_truth_states.jsonl";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaInit {
    /// Logits uniform in `[-0.5, 0.5]`, seeded.
    #[default]
    Random,
    /// The logits of the `model` section.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub model: ModelSpec,
    pub seed: u64,
    pub length: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub family: MfaFamily,
    #[serde(default)]
    pub init_rule: InitRule,
    #[serde(default)]
    pub theta_init: ThetaInit,
    #[serde(default)]
    pub oracle_enabled: bool,
    /// Wall-clock timings make traces differ between runs; off by default.
    #[serde(default)]
    pub record_wall_clock: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Number of random instances audited by `gradcheck`.
    #[serde(default = "default_gradcheck_instances")]
    pub gradcheck_instances: usize,
}

fn default_gradcheck_instances() -> usize {
    8
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let config: Self = serde_json::from_str(text).context("invalid config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.build()?;
        self.schedule.validate()?;
        Ok(())
    }

    /// The generating model of the `model` section.
    pub fn model(&self) -> anyhow::Result<GenerativeHmm> {
        Ok(self.model.build()?)
    }

    /// The model a fit starts from.
    pub fn initial_model(&self) -> anyhow::Result<GenerativeHmm> {
        let model = self.model()?;
        match self.theta_init {
            ThetaInit::Model => Ok(model),
            ThetaInit::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(1);
                Ok(model.with_params(ModelParams::random(model.space(), THETA_INIT_SPREAD, &mut rng))?)
            }
        }
    }

    pub fn learner(&self) -> LearnerConfig {
        LearnerConfig { schedule: self.schedule, family: self.family, init_rule: self.init_rule }
    }

    pub fn label(&self, path: &Path) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| path.file_stem().map_or_else(|| "config".into(), |s| s.to_string_lossy().into_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationLine {
    pub t: usize,
    pub o: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateLine {
    pub t: usize,
    pub s: usize,
}

/// Serialises 0-based symbols as 1-based JSON lines.
pub fn observations_jsonl(observations: &[usize]) -> String {
    let mut out = String::new();
    for (i, &o) in observations.iter().enumerate() {
        out.push_str(&serde_json::to_string(&ObservationLine { t: i + 1, o: o + 1 }).expect("plain struct"));
        out.push('\n');
    }
    out
}

fn states_jsonl(states: &[usize]) -> String {
    let mut out = String::new();
    for (i, &s) in states.iter().enumerate() {
        out.push_str(&serde_json::to_string(&StateLine { t: i + 1, s: s + 1 }).expect("plain struct"));
        out.push('\n');
    }
    out
}

/// Reads an observation stream, returning 0-based symbols. Lines must be
/// numbered `t = 1, 2, …` with `o ≥ 1`.
pub fn read_observations(path: &Path) -> anyhow::Result<Vec<usize>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        let rec: ObservationLine = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: not an observation record", path.display(), i + 1))?;
        if rec.t != i + 1 {
            bail!("{}:{}: expected t={}, found t={}", path.display(), i + 1, i + 1, rec.t);
        }
        if rec.o == 0 {
            bail!("{}:{}: symbols are numbered from 1", path.display(), i + 1);
        }
        out.push(rec.o - 1);
    }
    Ok(out)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().ok_or_else(|| anyhow!("{} is not a file path", path.display()))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn to_json_bytes<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

// ---------------------------------------------------------------- generate

pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> anyhow::Result<Vec<usize>> {
    let hmm = config.model()?;
    let traj = sample_trajectory(&hmm, config.length.max(1), config.seed)?;
    let (states, observations) = if config.length == 0 {
        (Vec::new(), Vec::new())
    } else {
        (traj.states, traj.observations)
    };
    write_atomic(&out.join(OBSERVATIONS_FILE), observations_jsonl(&observations).as_bytes())?;
    write_atomic(&out.join(STATES_FILE), states_jsonl(&states).as_bytes())?;
    Ok(observations)
}

// --------------------------------------------------------------------- fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalParams {
    pub alpha_tilde: Vec<Vec<f64>>,
    pub beta_tilde: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
}

impl FinalParams {
    pub fn from_model(hmm: &GenerativeHmm) -> Self {
        Self {
            alpha_tilde: hmm.params().alpha_tilde.clone(),
            beta_tilde: hmm.params().beta_tilde.clone(),
            a: hmm.emission().to_vec(),
            b: hmm.transition().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMetrics {
    /// Last trace `elbo` entry.
    pub final_elbo: Option<f64>,
    /// `-final_elbo / τ`.
    pub final_avg_vfe: Option<f64>,
    pub final_log_evidence: Option<f64>,
    pub min_gap: Option<f64>,
    pub mean_filter_l1_last_1000: Option<f64>,
    pub psi_updates: usize,
    pub theta_updates: usize,
    pub stalls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSummary {
    pub tau: usize,
    pub seed: u64,
    pub family: MfaFamily,
    pub init_rule: InitRule,
    pub theta_init: ThetaInit,
    pub schedule: Schedule,
    pub oracle_enabled: bool,
    pub final_params: FinalParams,
    pub final_history: Option<MfaSnapshot>,
    pub metrics: FitMetrics,
}

impl FitSummary {
    pub fn from_run(config: &ExperimentConfig, run: &StreamRun) -> anyhow::Result<Self> {
        let trace = &run.trace;
        let tau = trace.len();
        let last = trace.records.last();
        let final_elbo = last.map(|r| r.elbo);
        let metrics = FitMetrics {
            final_elbo,
            final_avg_vfe: final_elbo.map(|l| -l / tau as f64),
            final_log_evidence: last.and_then(|r| r.log_evidence),
            min_gap: trace.records.iter().filter_map(|r| r.gap).reduce(f64::min),
            mean_filter_l1_last_1000: mean_filter_l1(trace, FILTER_WINDOW),
            psi_updates: trace.records.iter().map(|r| r.psi_updates).sum(),
            theta_updates: trace.records.iter().map(|r| r.theta_updates).sum(),
            stalls: trace.total_stalls(),
        };
        Ok(Self {
            tau,
            seed: config.seed,
            family: config.family,
            init_rule: config.init_rule,
            theta_init: config.theta_init,
            schedule: config.schedule,
            oracle_enabled: config.oracle_enabled,
            final_params: FinalParams::from_model(run.state.hmm()),
            final_history: if tau > 0 { Some(run.state.history().checkpoint()?) } else { None },
            metrics,
        })
    }
}

fn check_symbols(observations: &[usize], m: usize) -> anyhow::Result<()> {
    if let Some((i, &o)) = observations.iter().enumerate().find(|(_, &o)| o >= m) {
        bail!("observation t={} is symbol {} but the model has M={m}", i + 1, o + 1);
    }
    Ok(())
}

pub fn fit(config: &ExperimentConfig, observations: &[usize]) -> anyhow::Result<StreamRun> {
    let start = config.initial_model()?;
    check_symbols(observations, start.m())?;
    let options = RunOptions { oracle_enabled: config.oracle_enabled, record_wall_clock: config.record_wall_clock };
    Ok(run_stream(start, observations.iter().copied(), &config.learner(), options)?)
}

pub fn cmd_fit(config: &ExperimentConfig, observations: &[usize], out: &Path) -> anyhow::Result<FitSummary> {
    let run = fit(config, observations)?;
    let mut csv = Vec::new();
    run.trace.write_csv(&mut csv)?;
    let summary = FitSummary::from_run(config, &run)?;
    write_atomic(&out.join(TRACE_FILE), &csv)?;
    write_atomic(&out.join(SUMMARY_FILE), &to_json_bytes(&summary)?)?;
    Ok(summary)
}

// ----------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateReport {
    pub label: String,
    pub family: MfaFamily,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    /// `-L_τ / τ` at the final θ.
    pub avg_vfe: f64,
    /// `L_τ` at the final θ, after a ψ-only pass with θ held there.
    pub elbo: f64,
    /// Pairwise objective over the same marginals.
    pub hat_elbo: f64,
    /// `ln p(o_{1:τ})` at the final θ.
    pub log_evidence: f64,
    pub stalls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareReport {
    pub tau: usize,
    pub candidates: Vec<CandidateReport>,
    /// Candidate indices ordered by ascending `avg_vfe`.
    pub ranking: Vec<usize>,
}

/// Fits the candidate, then re-runs the ψ schedule with θ fixed at its final
/// value so the reported bound belongs to a single model.
pub fn evaluate_candidate(label: String, config: &ExperimentConfig, observations: &[usize]) -> anyhow::Result<CandidateReport> {
    if observations.is_empty() {
        bail!("model comparison needs at least one observation");
    }
    let learned = fit(&ExperimentConfig { oracle_enabled: false, ..config.clone() }, observations)?;
    let hmm = learned.state.hmm().clone();
    let eval_config = LearnerConfig {
        schedule: Schedule { theta_updates_per_obs: 0, ..config.schedule },
        ..config.learner()
    };
    let eval = run_stream(hmm.clone(), observations.iter().copied(), &eval_config, RunOptions::default())?;
    let tau = observations.len();
    let (elbo, _) = elbo_recursive(&hmm, eval.state.history(), observations)?;
    let pairwise = PairwiseTables::from_marginals(&eval.state.history().current_marginals());
    Ok(CandidateReport {
        label,
        family: config.family,
        k: hmm.k(),
        m: hmm.m(),
        avg_vfe: -elbo / tau as f64,
        elbo,
        hat_elbo: hat_elbo(&hmm, &pairwise, observations)?,
        log_evidence: forward_filter(&hmm, observations)?.log_evidence,
        stalls: learned.trace.total_stalls() + eval.trace.total_stalls(),
    })
}

pub fn cmd_compare(candidates: &[(String, ExperimentConfig)], observations: &[usize]) -> anyhow::Result<CompareReport> {
    if candidates.len() < 2 {
        bail!("compare needs at least two candidate configs");
    }
    let m = candidates[0].1.model.space()?.m;
    for (label, c) in candidates {
        let cm = c.model.space()?.m;
        if cm != m {
            bail!("candidate {label} has M={cm}, expected M={m} for shared data");
        }
    }
    check_symbols(observations, m)?;
    let reports = candidates
        .par_iter()
        .map(|(label, c)| evaluate_candidate(label.clone(), c, observations))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut ranking: Vec<usize> = (0..reports.len()).collect();
    ranking.sort_by(|&i, &j| reports[i].avg_vfe.total_cmp(&reports[j].avg_vfe).then(i.cmp(&j)));
    Ok(CompareReport { tau: observations.len(), candidates: reports, ranking })
}

// --------------------------------------------------------------- gradcheck

pub const TOL_RECURSION: f64 = 1e-9;
pub const TOL_GRADIENT: f64 = 1e-5;
pub const GRADIENT_FLOOR: f64 = 1e-8;
pub const TOL_BOUND: f64 = 1e-10;
pub const TOL_VFE: f64 = 1e-10;
pub const TOL_HAT: f64 = 1e-12;
pub const TOL_STREAMING: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest error (or bound violation) over all instances.
    pub worst: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckReport {
    pub passed: bool,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub length: usize,
    pub instances: usize,
    pub checks: Vec<CheckResult>,
    pub failing: Vec<String>,
}

const CHECK_NAMES: [(&str, f64); 8] = [
    ("recursion_vs_brute_force", TOL_RECURSION),
    ("grad_theta_vs_finite_differences", TOL_GRADIENT),
    ("grad_psi_vs_finite_differences", TOL_GRADIENT),
    ("elbo_below_log_evidence", TOL_BOUND),
    ("vfe_forms_agree", TOL_VFE),
    ("vfe_at_posterior_is_neg_log_evidence", TOL_VFE),
    ("hat_elbo_below_elbo", TOL_HAT),
    ("streaming_matches_scratch", TOL_STREAMING),
];

/// Worst relative gradient error; coordinates that agree to within the
/// absolute floor count as exact.
fn gradient_error(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| if (a - f).abs() <= GRADIENT_FLOOR { 0.0 } else { relative_error(*a, *f, GRADIENT_FLOOR) })
        .fold(0.0, f64::max)
}

fn audit_instance(config: &ExperimentConfig, index: usize, variant: Recursion) -> anyhow::Result<[f64; 8]> {
    let base = config.model()?;
    let space = base.space();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2 + index as u64);
    let hmm = if index == 0 { base.clone() } else { base.with_params(ModelParams::random(space, 1.5, &mut rng))? };
    let len = config.length;
    let obs = sample_trajectory(&hmm, len, rng.gen())?.observations;
    let history = MfaHistory::random(space.k, len, 1.5, &mut rng);
    let k = space.k;

    // recursion
    let q = full_q(&history, MfaFamily::Reversed)?;
    let brute = brute_force_elbo(&hmm, &q.table, &obs)?;
    let (rec, _) = elbo_recursive_with(&hmm, &history, &obs, variant)?;
    let recursion = (rec - brute).abs();

    // θ gradient
    let (g, _) = grad_theta_with(&hmm, &history, &obs, variant)?;
    let layout = hmm.params().layout();
    let analytic: Vec<f64> = layout.free_indices().into_iter().map(|i| g[i]).collect();
    let elbo_theta = |free: &[f64]| -> f64 {
        let evaluate = || -> anyhow::Result<f64> {
            let m = hmm.with_params(hmm.params().with_free_coords(free)?)?;
            Ok(elbo_recursive_with(&m, &history, &obs, variant)?.0)
        };
        evaluate().unwrap_or(f64::NAN)
    };
    let fd = finite_diff_grad(elbo_theta, &hmm.params().free_coords(), FD_STEP)?;
    let theta_err = gradient_error(&analytic, &fd);

    // ψ gradient over the writable blocks
    let gp = grad_psi(&hmm, &history, &obs)?.coords();
    let tau = len;
    let mut point = history.block(tau, tau)?[1..].to_vec();
    if tau > 1 {
        point.extend_from_slice(&history.block(tau, tau - 1)?[1..]);
    }
    let elbo_psi = |coords: &[f64]| -> f64 {
        let evaluate = || -> anyhow::Result<f64> {
            let mut h = history.clone();
            let block = |c: &[f64]| std::iter::once(0.0).chain(c.iter().copied()).collect::<Vec<_>>();
            h.set_block(tau, block(&coords[..k - 1]))?;
            if tau > 1 {
                h.set_block(tau - 1, block(&coords[k - 1..]))?;
            }
            Ok(elbo_recursive_with(&hmm, &h, &obs, variant)?.0)
        };
        evaluate().unwrap_or(f64::NAN)
    };
    let fd_psi = finite_diff_grad(elbo_psi, &point, FD_STEP)?;
    let psi_err = gradient_error(&gp, &fd_psi);

    // bounds and identities
    let post = enumerate_posterior(&hmm, &obs)?;
    let bound = (rec - post.log_evidence).max(0.0);
    let forms = vfe_forms(&hmm, &q.table, &obs)?;
    let forms_err = [forms.complexity - forms.accuracy, forms.kl_form]
        .iter()
        .map(|x| (x - forms.joint_form).abs())
        .fold(0.0, f64::max);
    let at_post = vfe_forms(&hmm, &post.table, &obs)?;
    let posterior_err = (at_post.joint_form + post.log_evidence).abs();

    // pairwise objective with a product-form q
    let marginals: Vec<Vec<f64>> = (1..=tau).map(|t| history.pi(t, t)).collect();
    let product = SequenceTable::product(&marginals)?;
    let l_product = brute_force_elbo(&hmm, &product, &obs)?;
    let hat = hat_elbo(&hmm, &PairwiseTables::from_marginals(&marginals), &obs)?;
    let hat_violation = (hat - l_product).max(0.0);

    // streaming vs scratch on every prefix
    let mut streaming = 0.0f64;
    let mut carried = None;
    for t in 1..=tau {
        let prefix = MfaHistory::from_steps(k, history.steps()[..t].to_vec())?;
        let prev = carried.as_ref().map(|(v, u)| (v, u));
        let (v, u) = streaming_update_summaries(prev, &hmm, &prefix, obs[t - 1])?;
        let (_, vs) = elbo_recursive(&hmm, &prefix, &obs[..t])?;
        let (_, us) = grad_theta_with(&hmm, &prefix, &obs[..t], Recursion::Verified)?;
        for (a, b) in v.values.iter().zip(&vs.values) {
            streaming = streaming.max((a - b).abs());
        }
        for (ra, rb) in u.values.iter().zip(&us.values) {
            for (a, b) in ra.iter().zip(rb) {
                streaming = streaming.max((a - b).abs());
            }
        }
        carried = Some((v, u));
    }

    Ok([recursion, theta_err, psi_err, bound, forms_err, posterior_err, hat_violation, streaming])
}

pub fn cmd_gradcheck(config: &ExperimentConfig, inject_fault: bool) -> anyhow::Result<GradcheckReport> {
    let space = config.model.space()?;
    if config.length == 0 {
        bail!("gradcheck needs length >= 1");
    }
    guarded_count(space.k, config.length)?;
    let variant = if inject_fault { Recursion::Literal } else { Recursion::Verified };
    let instances = config.gradcheck_instances.max(1);
    let per_instance = (0..instances)
        .into_par_iter()
        .map(|i| audit_instance(config, i, variant))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let checks: Vec<CheckResult> = CHECK_NAMES
        .iter()
        .enumerate()
        .map(|(c, &(name, tolerance))| {
            let worst = per_instance.iter().map(|r| r[c]).fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
            CheckResult { name: name.into(), passed: worst <= tolerance, worst, tolerance }
        })
        .collect();
    let failing: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    Ok(GradcheckReport {
        passed: failing.is_empty(),
        k: space.k,
        m: space.m,
        length: config.length,
        instances,
        checks,
        failing,
    })
}

// ------------------------------------------------------------ entry point

#[derive(Debug, Parser)]
#[command(name = "vfe-stream", version, about = "Streaming variational inference and learning for discrete HMMs")]
pub struct Cli {
    /// Worker threads for compare and gradcheck.
    #[arg(long, env = "VFE_STREAM_THREADS", global = true, hide = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Overrides the seed of every config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (defaults to the config's `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample observations (and ground-truth states) from the config's model.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Stream observations through the learner; writes trace.csv and summary.json.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Force the exact-inference columns on.
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Rank candidate configs on shared data by final average VFE.
    Compare {
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Check recursions, gradients and bounds against exact enumeration.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Use the uncorrected recursion (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn out_dir(common: &CommonArgs, config: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set out_dir in the config"))
}

enum Outcome {
    Done,
    Stalled,
}

fn execute(cli: &Cli) -> anyhow::Result<Outcome> {
    let say = |quiet: bool, msg: String| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Generate { config, common } => {
            let cfg = load_config(config, common.seed)?;
            let out = out_dir(common, &cfg)?;
            let obs = cmd_generate(&cfg, &out)?;
            say(common.quiet, format!("wrote {} observations to {}", obs.len(), out.join(OBSERVATIONS_FILE).display()));
            Ok(Outcome::Done)
        }
        Command::Fit { config, data, oracle, common } => {
            let mut cfg = load_config(config, common.seed)?;
            cfg.oracle_enabled |= *oracle;
            let out = out_dir(common, &cfg)?;
            let obs = read_observations(data)?;
            let summary = cmd_fit(&cfg, &obs, &out)?;
            say(
                common.quiet,
                format!(
                    "tau={} final elbo={} stalls={}",
                    summary.tau,
                    summary.metrics.final_elbo.map_or("-".into(), |x| format!("{x:.6}")),
                    summary.metrics.stalls
                ),
            );
            Ok(if summary.metrics.stalls > 0 { Outcome::Stalled } else { Outcome::Done })
        }
        Command::Compare { configs, data, common } => {
            let candidates = configs
                .iter()
                .map(|p| load_config(p, common.seed).map(|c| (c.label(p), c)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let out = out_dir(common, &candidates[0].1)?;
            let obs = read_observations(data)?;
            let report = cmd_compare(&candidates, &obs)?;
            write_atomic(&out.join(REPORT_FILE), &to_json_bytes(&report)?)?;
            for &i in &report.ranking {
                let c = &report.candidates[i];
                say(common.quiet, format!("{:<24} avg_vfe={:.6}", c.label, c.avg_vfe));
            }
            let stalled = report.candidates.iter().any(|c| c.stalls > 0);
            Ok(if stalled { Outcome::Stalled } else { Outcome::Done })
        }
        Command::Gradcheck { config, inject_fault, common } => {
            let cfg = load_config(config, common.seed)?;
            let report = cmd_gradcheck(&cfg, *inject_fault)?;
            let bytes = to_json_bytes(&report)?;
            if let Some(out) = common.out.clone().or_else(|| cfg.out_dir.clone()) {
                write_atomic(&out.join(GRADCHECK_FILE), &bytes)?;
            }
            if !common.quiet {
                print!("{}", String::from_utf8_lossy(&bytes));
            }
            Ok(if report.passed { Outcome::Done } else { Outcome::Stalled })
        }
    }
}

/// Runs a parsed command line and maps the outcome to an exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match execute(&cli) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::Stalled) => EXIT_STALLED,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_INPUT
        }
    }
}

/// Parses `args` (including the program name) and runs. Usage errors exit 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INPUT,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"model":{"K":2,"M":2,"A":[[0.9,0.1],[0.2,0.8]],"B":[[0.7,0.3],[0.4,0.6]]},"seed":3,"length":4}"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_unknown_fields() {
        let c = small_config();
        assert_eq!(c.schedule, Schedule::default());
        assert_eq!(c.family, MfaFamily::Reversed);
        assert_eq!(c.theta_init, ThetaInit::Random);
        assert!(!c.oracle_enabled && !c.record_wall_clock);
        assert!(ExperimentConfig::from_json(r#"{"model":{"K":1},"seed":1,"length":2,"extra":1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model":{"K":1},"seed":1,"length":2,"schedule":{"psi_step":-1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model":{"K":2,"mu":[0.7,0.7]},"seed":1,"length":2}"#).is_err());
    }

    #[test]
    fn random_init_is_seeded_and_small() {
        let c = small_config();
        let a = c.initial_model().unwrap();
        let b = c.initial_model().unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.params().to_dense().iter().all(|x| x.abs() <= THETA_INIT_SPREAD));
        assert_ne!(a.params(), c.model().unwrap().params());
    }

    #[test]
    fn observation_lines() {
        assert_eq!(observations_jsonl(&[0, 0, 0]), "{\"t\":1,\"o\":1}\n{\"t\":2,\"o\":1}\n{\"t\":3,\"o\":1}\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.jsonl");
        fs::write(&p, observations_jsonl(&[1, 0, 2])).unwrap();
        assert_eq!(read_observations(&p).unwrap(), vec![1, 0, 2]);
        fs::write(&p, "{\"t\":1,\"o\":1}\n{\"t\":3,\"o\":1}\n").unwrap();
        assert!(read_observations(&p).is_err());
        fs::write(&p, "{\"t\":1,\"s\":1}\n").unwrap();
        assert!(read_observations(&p).is_err());
        fs::write(&p, "{\"t\":1,\"o\":0}\n").unwrap();
        assert!(read_observations(&p).is_err());
    }

    #[test]
    fn gradcheck_passes_and_negative_control_fails() {
        let report = cmd_gradcheck(&small_config(), false).unwrap();
        assert!(report.passed, "{report:?}");
        let bad = cmd_gradcheck(&small_config(), true).unwrap();
        assert!(!bad.passed);
        assert!(bad.failing.contains(&"recursion_vs_brute_force".to_string()));
    }

    #[test]
    fn gradcheck_single_state() {
        let c = ExperimentConfig::from_json(r#"{"model":{"K":1,"M":1},"seed":1,"length":3}"#).unwrap();
        let report = cmd_gradcheck(&c, false).unwrap();
        assert!(report.passed);
    }

    #[test]
    fn gradcheck_guard() {
        let c = ExperimentConfig::from_json(r#"{"model":{"K":2},"seed":1,"length":40}"#).unwrap();
        assert!(cmd_gradcheck(&c, false).is_err());
    }

    #[test]
    fn compare_self_is_a_tie() {
        let c = small_config();
        let obs = sample_trajectory(&c.model().unwrap(), 30, 1).unwrap().observations;
        let report = cmd_compare(&[("a".into(), c.clone()), ("b".into(), c)], &obs).unwrap();
        assert_eq!(report.candidates[0].avg_vfe, report.candidates[1].avg_vfe);
        assert_eq!(report.ranking, vec![0, 1]);
    }

    #[test]
    fn compare_rejects_mismatched_alphabets() {
        let c = small_config();
        let other = ExperimentConfig::from_json(r#"{"model":{"K":2,"M":3},"seed":1,"length":2}"#).unwrap();
        assert!(cmd_compare(&[("a".into(), c.clone()), ("b".into(), other)], &[0, 1]).is_err());
        assert!(cmd_compare(&[("a".into(), c.clone()), ("b".into(), c)], &[0, 5]).is_err());
    }

    #[test]
    fn single_state_candidate_is_iid_likelihood() {
        let c = ExperimentConfig::from_json(r#"{"model":{"K":1,"M":2},"seed":5,"length":2}"#).unwrap();
        let obs = vec![0, 1, 1, 0, 1, 1, 1];
        let report = evaluate_candidate("k1".into(), &c, &obs).unwrap();
        assert!((report.elbo - report.log_evidence).abs() < 1e-12);
    }
}
