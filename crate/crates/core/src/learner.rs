//! Streaming inference and learning.
//!
//! Each observation augments the MFA history, then runs a fixed number of
//! gradient-ascent updates on the two writable blocks followed by a fixed
//! number on θ. The θ-updates climb what the newest observation adds to the
//! bound. The carried `V_{τ-1}` and `U_{τ-1}` were computed at the θ in force
//! when the previous observation finished, so the past enters through the
//! first-order expansion `V_{τ-1}(k) + U_{τ-1}(k)·(θ - θ₀)` and only the newest
//! step is evaluated exactly.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::elbo::{
    elbo_recursive, objective_at_horizon, psi_gradient_at_horizon, streaming_update_summaries,
    theta_gradient_at_horizon, USummary, VSummary,
};
use crate::error::{Error, Result};
use crate::math::{l1_distance, total_variation};
use crate::mfa::{InitRule, MfaFamily, MfaHistory};
use crate::model::{GenerativeHmm, ModelParams};
use crate::oracle::forward_filter;

/// Maximum number of step halvings in a backtracking line search.
pub const MAX_HALVINGS: usize = 20;

/// An exhausted line search whose first-order predicted gain is below this
/// (relative to the objective) is a stationary point, not a stall.
const ROUNDING_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub psi_updates_per_obs: usize,
    pub theta_updates_per_obs: usize,
    pub psi_step: f64,
    pub theta_step: f64,
    pub line_search: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            psi_updates_per_obs: 80,
            theta_updates_per_obs: 50,
            psi_step: 0.1,
            theta_step: 0.01,
            line_search: true,
        }
    }
}

impl Schedule {
    /// No updates at all: the history is only augmented.
    pub fn frozen() -> Self {
        Self { psi_updates_per_obs: 0, theta_updates_per_obs: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("psi_step", self.psi_step), ("theta_step", self.theta_step)] {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Input(format!("{name} must be a positive finite number, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LearnerConfig {
    pub schedule: Schedule,
    pub family: MfaFamily,
    pub init_rule: InitRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    /// The point moved.
    Moved,
    /// Zero gradient, or a line search that could not find a gain larger than
    /// rounding noise.
    Stationary,
    /// Non-finite objective, or line-search exhaustion with a meaningful
    /// predicted gain. The point is unchanged.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentStep {
    pub point: Vec<f64>,
    pub value: f64,
    pub status: StepStatus,
}

/// One gradient-ascent step `x ← x + step·g`. With `line_search` the step is
/// halved up to [`MAX_HALVINGS`] times until the objective does not decrease.
pub fn ascent_step(
    x: &[f64],
    grad: &[f64],
    step: f64,
    line_search: bool,
    objective: &mut dyn FnMut(&[f64]) -> f64,
) -> Result<AscentStep> {
    if x.len() != grad.len() {
        return Err(Error::Input(format!("gradient has {} coordinates, point has {}", grad.len(), x.len())));
    }
    let stay = |value, status| AscentStep { point: x.to_vec(), value, status };
    if grad.iter().any(|g| !g.is_finite()) {
        return Ok(stay(f64::NAN, StepStatus::Stalled));
    }
    let f0 = if line_search { objective(x) } else { f64::NAN };
    if line_search && !f0.is_finite() {
        return Ok(stay(f0, StepStatus::Stalled));
    }
    if grad.iter().all(|&g| g == 0.0) {
        return Ok(stay(f0, StepStatus::Stationary));
    }
    let moved = |s: f64| -> Vec<f64> { x.iter().zip(grad).map(|(a, g)| a + s * g).collect() };
    if !line_search {
        let point = moved(step);
        let value = objective(&point);
        if !value.is_finite() {
            return Ok(stay(value, StepStatus::Stalled));
        }
        return Ok(AscentStep { point, value, status: StepStatus::Moved });
    }
    let mut s = step;
    for _ in 0..=MAX_HALVINGS {
        let point = moved(s);
        let value = objective(&point);
        if value.is_finite() && value >= f0 {
            return Ok(AscentStep { point, value, status: StepStatus::Moved });
        }
        s *= 0.5;
    }
    let sq: f64 = grad.iter().map(|g| g * g).sum();
    let status = if step * sq <= ROUNDING_GAIN * (1.0 + f0.abs()) {
        StepStatus::Stationary
    } else {
        StepStatus::Stalled
    };
    Ok(stay(f0, status))
}

/// What one [`LearnerState::ingest`] call did.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub psi_updates: usize,
    pub theta_updates: usize,
    pub stalls: usize,
    /// Streaming objective `Σ_l π_τ^τ(l) V_τ(l)` after the update.
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct LearnerState {
    hmm: GenerativeHmm,
    history: MfaHistory,
    summaries: Option<(VSummary, USummary)>,
}

impl LearnerState {
    pub fn new(hmm: GenerativeHmm) -> Self {
        let history = MfaHistory::new(hmm.k());
        Self { hmm, history, summaries: None }
    }

    pub fn tau(&self) -> usize {
        self.history.horizon()
    }

    pub fn hmm(&self) -> &GenerativeHmm {
        &self.hmm
    }

    pub fn params(&self) -> &ModelParams {
        self.hmm.params()
    }

    pub fn history(&self) -> &MfaHistory {
        &self.history
    }

    pub fn summaries(&self) -> Option<(&VSummary, &USummary)> {
        self.summaries.as_ref().map(|(v, u)| (v, u))
    }

    /// Absorbs observation `o` (0-based symbol).
    pub fn ingest(&mut self, o: usize, config: &LearnerConfig) -> Result<IngestReport> {
        if o >= self.hmm.m() {
            return Err(Error::Input(format!("observation {} outside 1..={}", o + 1, self.hmm.m())));
        }
        config.schedule.validate()?;
        self.history.augment(config.init_rule, &self.hmm);
        let revise = config.family.revises_previous() && self.tau() > 1;

        // Shifting V_{τ-1} by a constant leaves every gradient unchanged and
        // keeps line-search comparisons away from the magnitude of L_τ.
        let offset = self.summaries.as_ref().map_or(0.0, |(v, _)| v.values.iter().sum::<f64>() / v.values.len() as f64);
        let centered = self.summaries.as_ref().map(|(v, _)| VSummary {
            values: v.values.iter().map(|x| x - offset).collect(),
            time: v.time,
        });

        let mut report = IngestReport { psi_updates: 0, theta_updates: 0, stalls: 0, objective: f64::NAN };
        for _ in 0..config.schedule.psi_updates_per_obs {
            match self.psi_update(o, centered.as_ref(), revise, &config.schedule)? {
                StepStatus::Moved => report.psi_updates += 1,
                StepStatus::Stationary => break,
                StepStatus::Stalled => {
                    report.stalls += 1;
                    break;
                }
            }
        }
        let free = self.hmm.params().layout().free_dim();
        if free > 0 {
            let anchor = self.hmm.params().to_dense();
            for _ in 0..config.schedule.theta_updates_per_obs {
                match self.theta_update(o, centered.as_ref(), &anchor, &config.schedule)? {
                    StepStatus::Moved => report.theta_updates += 1,
                    StepStatus::Stationary => break,
                    StepStatus::Stalled => {
                        report.stalls += 1;
                        break;
                    }
                }
            }
        }

        let prev = self.summaries.as_ref().map(|(v, u)| (v, u));
        let (v, u) = streaming_update_summaries(prev, &self.hmm, &self.history, o)?;
        let tau = self.tau();
        report.objective = self.history.pi(tau, tau).iter().zip(&v.values).map(|(p, x)| p * x).sum();
        self.summaries = Some((v, u));
        Ok(report)
    }

    fn psi_update(&mut self, o: usize, prev_v: Option<&VSummary>, revise: bool, schedule: &Schedule) -> Result<StepStatus> {
        let tau = self.tau();
        let k = self.hmm.k();
        let g = psi_gradient_at_horizon(&self.hmm, &self.history, prev_v, o);
        let mut grad = g.current.clone();
        let mut point = self.history.block(tau, tau)?[1..].to_vec();
        if revise {
            grad.extend_from_slice(g.revised_prev.as_deref().unwrap_or(&[]));
            point.extend_from_slice(&self.history.block(tau, tau - 1)?[1..]);
        }
        let original = self.history.steps()[tau - 1].clone();
        let hmm = &self.hmm;
        let history = &mut self.history;
        let mut objective = |x: &[f64]| -> f64 {
            if write_psi(history, tau, k, x).is_err() {
                return f64::NAN;
            }
            objective_at_horizon(hmm, history, prev_v, o)
        };
        let outcome = ascent_step(&point, &grad, schedule.psi_step, schedule.line_search, &mut objective)?;
        if outcome.status == StepStatus::Moved {
            write_psi(&mut self.history, tau, k, &outcome.point)?;
        } else {
            self.history.restore_last(original);
        }
        Ok(outcome.status)
    }

    /// One ascent step on the increment `L_τ - L_{τ-1}` as a function of θ.
    ///
    /// `L_τ` itself grows linearly in τ and its carried gradient sums terms
    /// evaluated at every past θ, so stepping along it overshoots without
    /// bound. The increment keeps only what the newest observation adds:
    /// `Σ_k (a(k) - p(k)) [V_{τ-1}(k) + U_{τ-1}(k)·(θ - θ₀)] + Σ_kl a(k) b(l) v_τ(k, l; θ)`
    /// with `p = π_{τ-1}^{τ-1}`. Its gradient is
    /// `Σ_l b(l) U_τ(l) - Σ_k p(k) U_{τ-1}(k)`.
    fn theta_update(&mut self, o: usize, prev_v: Option<&VSummary>, anchor: &[f64], schedule: &Schedule) -> Result<StepStatus> {
        let layout = self.hmm.params().layout();
        let free = layout.free_indices();
        let tau = self.tau();
        let prev_u = self.summaries.as_ref().map(|(_, u)| u);
        let mut dense = theta_gradient_at_horizon(&self.hmm, &self.history, prev_u, o);

        let mut slope = vec![0.0; layout.dim()];
        let mut past_value = 0.0;
        if let (Some(u), Some(v)) = (prev_u, prev_v) {
            let a = self.history.pi(tau, tau - 1);
            let p = self.history.pi(tau - 1, tau - 1);
            for k in 0..a.len() {
                past_value += p[k] * v.values[k];
                for i in 0..layout.dim() {
                    slope[i] += (a[k] - p[k]) * u.values[k][i];
                    dense[i] -= p[k] * u.values[k][i];
                }
            }
        }
        let grad: Vec<f64> = free.iter().map(|&i| dense[i]).collect();
        let point = self.hmm.params().free_coords();

        let base = &self.hmm;
        let history = &self.history;
        let mut objective = |x: &[f64]| -> f64 {
            let Ok(params) = base.params().with_free_coords(x) else { return f64::NAN };
            let Ok(hmm) = base.with_params(params) else { return f64::NAN };
            let theta = hmm.params().to_dense();
            let linear: f64 = slope.iter().zip(theta.iter().zip(anchor)).map(|(s, (t, t0))| s * (t - t0)).sum();
            objective_at_horizon(&hmm, history, prev_v, o) - past_value + linear
        };
        let outcome = ascent_step(&point, &grad, schedule.theta_step, schedule.line_search, &mut objective)?;
        if outcome.status == StepStatus::Moved {
            let params = self.hmm.params().with_free_coords(&outcome.point)?;
            self.hmm = self.hmm.with_params(params)?;
        }
        Ok(outcome.status)
    }
}

fn write_psi(history: &mut MfaHistory, tau: usize, k: usize, x: &[f64]) -> Result<()> {
    let block = |c: &[f64]| std::iter::once(0.0).chain(c.iter().copied()).collect::<Vec<_>>();
    history.set_block(tau, block(&x[..k - 1]))?;
    if x.len() > k - 1 {
        history.set_block(tau - 1, block(&x[k - 1..]))?;
    }
    Ok(())
}

/// One row of the stream trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub tau: usize,
    /// Exact `L_τ` at the current θ when the oracle is enabled, otherwise the
    /// streaming objective.
    pub elbo: f64,
    pub log_evidence: Option<f64>,
    /// `log_evidence - elbo`.
    pub gap: Option<f64>,
    /// `‖π_τ^τ - p(s_τ | o_{1:τ})‖₁` under the current θ.
    pub filter_l1: Option<f64>,
    pub psi_updates: usize,
    pub theta_updates: usize,
    pub stalls: usize,
    pub wall_ms: f64,
}

pub const TRACE_HEADER: [&str; 9] = [
    "tau",
    "elbo",
    "log_evidence",
    "gap",
    "filter_l1",
    "psi_updates",
    "theta_updates",
    "stalls",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StreamTrace {
    pub records: Vec<TraceRecord>,
}

impl StreamTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_stalls(&self) -> usize {
        self.records.iter().map(|r| r.stalls).sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        let io = |e: csv::Error| Error::Input(format!("writing trace: {e}"));
        w.write_record(TRACE_HEADER).map_err(io)?;
        for r in &self.records {
            w.serialize(r).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Input(format!("writing trace: {e}")))?;
        Ok(())
    }

    /// Parses a trace, rejecting a wrong header or non-monotone `tau`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let bad = |e: csv::Error| Error::Input(format!("reading trace: {e}"));
        let header = r.headers().map_err(bad)?;
        if header.iter().ne(TRACE_HEADER) {
            return Err(Error::Input(format!("unexpected trace header {:?}", header)));
        }
        let records = r.deserialize().collect::<std::result::Result<Vec<TraceRecord>, _>>().map_err(bad)?;
        for (i, rec) in records.iter().enumerate() {
            if rec.tau != i + 1 {
                return Err(Error::Input(format!("trace row {} has tau={}", i + 1, rec.tau)));
            }
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub oracle_enabled: bool,
    pub record_wall_clock: bool,
}

#[derive(Debug, Clone)]
pub struct StreamRun {
    pub trace: StreamTrace,
    pub state: LearnerState,
}

/// Folds [`LearnerState::ingest`] over `source`, starting from `hmm`.
pub fn run_stream(
    hmm: GenerativeHmm,
    source: impl IntoIterator<Item = usize>,
    config: &LearnerConfig,
    options: RunOptions,
) -> Result<StreamRun> {
    config.schedule.validate()?;
    let mut state = LearnerState::new(hmm);
    let mut trace = StreamTrace::default();
    let mut seen = Vec::new();
    for o in source {
        let tau = seen.len() + 1;
        let ctx = |e: Error| Error::Stream { tau, source: Box::new(e) };
        let start = Instant::now();
        let report = state.ingest(o, config).map_err(ctx)?;
        let wall_ms = if options.record_wall_clock { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        seen.push(o);
        let mut record = TraceRecord {
            tau,
            elbo: report.objective,
            log_evidence: None,
            gap: None,
            filter_l1: None,
            psi_updates: report.psi_updates,
            theta_updates: report.theta_updates,
            stalls: report.stalls,
            wall_ms,
        };
        if options.oracle_enabled {
            let (elbo, _) = elbo_recursive(state.hmm(), state.history(), &seen).map_err(ctx)?;
            let filter = forward_filter(state.hmm(), &seen).map_err(ctx)?;
            let exact = filter.marginals.last().expect("non-empty stream");
            record.elbo = elbo;
            record.log_evidence = Some(filter.log_evidence);
            record.gap = Some(filter.log_evidence - elbo);
            record.filter_l1 = Some(l1_distance(&state.history().pi(tau, tau), exact));
        }
        trace.records.push(record);
    }
    Ok(StreamRun { trace, state })
}

/// Result of matching learned states to true states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `perm[i]` is the learned state matched to true state `i`.
    pub perm: Vec<usize>,
    pub emission_tv: Vec<f64>,
    pub transition_tv: Vec<f64>,
}

impl Alignment {
    pub fn max_tv(&self) -> f64 {
        self.emission_tv.iter().chain(&self.transition_tv).copied().fold(0.0, f64::max)
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Relabels learned states to minimise the summed row total variation over
/// emission and transition matrices. Tries all `K!` permutations.
pub fn align_states(
    true_a: &[Vec<f64>],
    true_b: &[Vec<f64>],
    learned_a: &[Vec<f64>],
    learned_b: &[Vec<f64>],
) -> Result<Alignment> {
    let k = true_a.len();
    if learned_a.len() != k || true_b.len() != k || learned_b.len() != k {
        return Err(Error::Input("alignment needs matrices with the same number of states".into()));
    }
    if k > 8 {
        return Err(Error::Input(format!("alignment over {k}! permutations is not supported")));
    }
    let score = |perm: &[usize]| -> Alignment {
        let emission_tv = (0..k).map(|i| total_variation(&true_a[i], &learned_a[perm[i]])).collect();
        let transition_tv = (0..k)
            .map(|i| {
                let row: Vec<f64> = (0..k).map(|j| learned_b[perm[i]][perm[j]]).collect();
                total_variation(&true_b[i], &row)
            })
            .collect();
        Alignment { perm: perm.to_vec(), emission_tv, transition_tv }
    };
    let total = |a: &Alignment| a.emission_tv.iter().chain(&a.transition_tv).sum::<f64>();
    permutations(k)
        .iter()
        .map(|p| score(p))
        .min_by(|x, y| total(x).total_cmp(&total(y)))
        .ok_or_else(|| Error::Input("no states to align".into()))
}

/// Mean of `filter_l1` over the last `window` records that carry it.
pub fn mean_filter_l1(trace: &StreamTrace, window: usize) -> Option<f64> {
    let tail: Vec<f64> = trace.records.iter().rev().take(window).filter_map(|r| r.filter_l1).collect();
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}
