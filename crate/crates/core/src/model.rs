//! Discrete-state generative model: fixed initial prior `mu`, emission matrix
//! `A` (K×M) and transition matrix `B` (K×K), both obtained row-wise through a
//! softmax of unconstrained logits whose first entry is pinned at zero.
//!
//! States and symbols are 0-indexed in this module. The JSON surfaces in
//! [`crate::cli`] convert from the 1-indexed external convention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::log_softmax;

/// Tolerance on `Σ mu = 1` accepted from callers before exact renormalisation.
pub const SIMPLEX_INPUT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    /// Number of hidden-state values.
    pub k: usize,
    /// Number of observation symbols.
    pub m: usize,
}

impl StateSpace {
    pub fn new(k: usize, m: usize) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::Input(format!(
                "state space needs K >= 1 and M >= 1, got K={k}, M={m}"
            )));
        }
        Ok(Self { k, m })
    }

    /// Square model, observation alphabet equal to the state alphabet.
    pub fn square(k: usize) -> Result<Self> {
        Self::new(k, k)
    }
}

/// Dense coordinate layout of `θ`: the K emission logit rows followed by the K
/// transition logit rows, `K·M + K·K` coordinates in total. Pinned coordinates
/// (column 0 of every row) are part of the layout but never free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThetaLayout {
    pub k: usize,
    pub m: usize,
}

impl ThetaLayout {
    pub fn new(space: StateSpace) -> Self {
        Self { k: space.k, m: space.m }
    }

    pub fn dim(&self) -> usize {
        self.k * self.m + self.k * self.k
    }

    #[inline]
    pub fn alpha(&self, row: usize, col: usize) -> usize {
        row * self.m + col
    }

    #[inline]
    pub fn beta(&self, row: usize, col: usize) -> usize {
        self.k * self.m + row * self.k + col
    }

    pub fn is_pinned(&self, idx: usize) -> bool {
        if idx < self.k * self.m {
            idx % self.m == 0
        } else {
            (idx - self.k * self.m) % self.k == 0
        }
    }

    /// Indices of the free (unpinned) coordinates, in layout order.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.is_pinned(i)).collect()
    }

    pub fn free_dim(&self) -> usize {
        self.k * (self.m - 1) + self.k * (self.k - 1)
    }
}

/// Unconstrained parametrisation `θ = (α̃¹..α̃ᴷ, β̃¹..β̃ᴷ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// K rows of M emission logits.
    pub alpha_tilde: Vec<Vec<f64>>,
    /// K rows of K transition logits.
    pub beta_tilde: Vec<Vec<f64>>,
}

impl ModelParams {
    /// Validates shape, finiteness and the pinned first entry of every row.
    pub fn new(alpha_tilde: Vec<Vec<f64>>, beta_tilde: Vec<Vec<f64>>) -> Result<Self> {
        let params = Self { alpha_tilde, beta_tilde };
        params.validate()?;
        Ok(params)
    }

    pub fn zeros(space: StateSpace) -> Self {
        Self {
            alpha_tilde: vec![vec![0.0; space.m]; space.k],
            beta_tilde: vec![vec![0.0; space.k]; space.k],
        }
    }

    /// Logits drawn uniformly from `[-spread, spread]`, first entries pinned.
    pub fn random<R: Rng>(space: StateSpace, spread: f64, rng: &mut R) -> Self {
        let mut row = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|j| if j == 0 { 0.0 } else { rng.gen_range(-spread..=spread) })
                .collect()
        };
        let alpha_tilde = (0..space.k).map(|_| row(space.m)).collect();
        let beta_tilde = (0..space.k).map(|_| row(space.k)).collect();
        Self { alpha_tilde, beta_tilde }
    }

    /// Converts row-stochastic matrices to pinned logits (row-wise log, then
    /// subtract the first entry). Entries must be strictly positive.
    pub fn from_stochastic(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self> {
        fn to_logits(name: &str, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
            rows.iter()
                .enumerate()
                .map(|(i, row)| {
                    if row.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
                        return Err(Error::Input(format!(
                            "{name} row {} must be strictly positive and finite",
                            i + 1
                        )));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > SIMPLEX_INPUT_TOL {
                        return Err(Error::Input(format!(
                            "{name} row {} sums to {sum}, expected 1",
                            i + 1
                        )));
                    }
                    let first = row[0].ln();
                    Ok(row.iter().map(|p| p.ln() - first).collect())
                })
                .collect()
        }
        Self::new(to_logits("A", a)?, to_logits("B", b)?)
    }

    pub fn space(&self) -> StateSpace {
        StateSpace {
            k: self.alpha_tilde.len(),
            m: self.alpha_tilde.first().map_or(0, Vec::len),
        }
    }

    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout::new(self.space())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.alpha_tilde.len();
        if k == 0 {
            return Err(Error::Input("alpha_tilde has no rows".into()));
        }
        let m = self.alpha_tilde[0].len();
        if m == 0 {
            return Err(Error::Input("alpha_tilde rows are empty".into()));
        }
        if self.beta_tilde.len() != k {
            return Err(Error::Input(format!(
                "beta_tilde has {} rows, expected {k}",
                self.beta_tilde.len()
            )));
        }
        for (name, rows, width) in [("alpha_tilde", &self.alpha_tilde, m), ("beta_tilde", &self.beta_tilde, k)] {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != width {
                    return Err(Error::Input(format!(
                        "{name} row {} has {} entries, expected {width}",
                        i + 1,
                        row.len()
                    )));
                }
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Parametrization(format!(
                        "{name} row {} has a non-finite logit",
                        i + 1
                    )));
                }
                if row[0] != 0.0 {
                    return Err(Error::Constraint(format!(
                        "{name} row {} first logit is {}, must be pinned at 0",
                        i + 1,
                        row[0]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flattens into the dense [`ThetaLayout`].
    pub fn to_dense(&self) -> Vec<f64> {
        self.alpha_tilde
            .iter()
            .chain(&self.beta_tilde)
            .flat_map(|row| row.iter().copied())
            .collect()
    }

    pub fn free_coords(&self) -> Vec<f64> {
        let dense = self.to_dense();
        self.layout().free_indices().into_iter().map(|i| dense[i]).collect()
    }

    /// Copy with the free coordinates replaced; pinned entries stay exactly 0.
    pub fn with_free_coords(&self, free: &[f64]) -> Result<Self> {
        let layout = self.layout();
        let idx = layout.free_indices();
        if free.len() != idx.len() {
            return Err(Error::Input(format!(
                "expected {} free coordinates, got {}",
                idx.len(),
                free.len()
            )));
        }
        let mut out = self.clone();
        for (&i, &v) in idx.iter().zip(free) {
            if i < layout.k * layout.m {
                out.alpha_tilde[i / layout.m][i % layout.m] = v;
            } else {
                let j = i - layout.k * layout.m;
                out.beta_tilde[j / layout.k][j % layout.k] = v;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Row softmax. Output is strictly positive for finite input and invariant to
/// adding a constant to every logit.
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Parametrization("empty logit row".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parametrization("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// The generative triple together with cached log tables.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeHmm {
    space: StateSpace,
    mu: Vec<f64>,
    params: ModelParams,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    log_mu: Vec<f64>,
    log_a: Vec<Vec<f64>>,
    log_b: Vec<Vec<f64>>,
}

/// Builds `A` and `B` as the row softmax images of `params`. `mu` must be a
/// simplex within [`SIMPLEX_INPUT_TOL`]; it is renormalised exactly.
pub fn build_hmm(mu: &[f64], params: ModelParams) -> Result<GenerativeHmm> {
    params.validate()?;
    let space = params.space();
    if mu.len() != space.k {
        return Err(Error::Input(format!(
            "mu has {} entries, expected K={}",
            mu.len(),
            space.k
        )));
    }
    if mu.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Input("mu entries must be finite and non-negative".into()));
    }
    let total: f64 = mu.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_INPUT_TOL {
        return Err(Error::Input(format!("mu sums to {total}, expected 1")));
    }
    let mu: Vec<f64> = mu.iter().map(|p| p / total).collect();

    let a = params
        .alpha_tilde
        .iter()
        .map(|r| softmax_row(r))
        .collect::<Result<Vec<_>>>()?;
    let b = params
        .beta_tilde
        .iter()
        .map(|r| softmax_row(r))
        .collect::<Result<Vec<_>>>()?;
    let log_a = params.alpha_tilde.iter().map(|r| log_softmax(r)).collect();
    let log_b = params.beta_tilde.iter().map(|r| log_softmax(r)).collect();
    let log_mu = mu.iter().map(|p| p.ln()).collect();
    Ok(GenerativeHmm { space, mu, params, a, b, log_mu, log_a, log_b })
}

impl GenerativeHmm {
    /// Uniform prior, all-zero logits.
    pub fn uniform(space: StateSpace) -> Self {
        let mu = vec![1.0 / space.k as f64; space.k];
        build_hmm(&mu, ModelParams::zeros(space)).expect("uniform model is valid")
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }
    pub fn k(&self) -> usize {
        self.space.k
    }
    pub fn m(&self) -> usize {
        self.space.m
    }
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }
    pub fn params(&self) -> &ModelParams {
        &self.params
    }
    /// Emission matrix, `A[i][j] = P(o = j | s = i)`.
    pub fn emission(&self) -> &[Vec<f64>] {
        &self.a
    }
    /// Transition matrix, `B[i][j] = P(s' = j | s = i)`.
    pub fn transition(&self) -> &[Vec<f64>] {
        &self.b
    }
    pub fn log_mu(&self) -> &[f64] {
        &self.log_mu
    }
    pub fn log_emission(&self) -> &[Vec<f64>] {
        &self.log_a
    }
    pub fn log_transition(&self) -> &[Vec<f64>] {
        &self.log_b
    }

    /// Same prior, new parameters.
    pub fn with_params(&self, params: ModelParams) -> Result<Self> {
        if params.space() != self.space {
            return Err(Error::Input("parameter shape does not match the model".into()));
        }
        build_hmm(&self.mu, params)
    }

    pub fn check_observations(&self, observations: &[usize]) -> Result<()> {
        if let Some((t, &o)) = observations.iter().enumerate().find(|(_, &o)| o >= self.space.m) {
            return Err(Error::Input(format!(
                "observation {} at t={} outside 1..={}",
                o + 1,
                t + 1,
                self.space.m
            )));
        }
        Ok(())
    }

    /// One-step state prediction `Bᵀ·pi`.
    pub fn predict(&self, pi: &[f64]) -> Vec<f64> {
        let k = self.space.k;
        (0..k)
            .map(|l| (0..k).map(|j| pi[j] * self.b[j][l]).sum())
            .collect()
    }

    /// Stationary distribution of `B` by power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let mut pi = vec![1.0 / self.space.k as f64; self.space.k];
        for _ in 0..100_000 {
            let next = self.predict(&pi);
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if diff < 1e-15 {
                break;
            }
        }
        pi
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub observations: Vec<usize>,
}

impl Trajectory {
    pub fn new(states: Vec<usize>, observations: Vec<usize>, space: StateSpace) -> Result<Self> {
        if states.len() != observations.len() {
            return Err(Error::Input(format!(
                "{} states but {} observations",
                states.len(),
                observations.len()
            )));
        }
        if states.iter().any(|&s| s >= space.k) || observations.iter().any(|&o| o >= space.m) {
            return Err(Error::Input("trajectory value out of range".into()));
        }
        Ok(Self { states, observations })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Seeded ancestral sampling. ChaCha8 with a fixed seed is portable across
/// platforms, so the same seed always yields the same trajectory.
pub fn sample_trajectory(hmm: &GenerativeHmm, length: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_trajectory_with(hmm, length, &mut rng)
}

pub fn sample_trajectory_with<R: Rng>(hmm: &GenerativeHmm, length: usize, rng: &mut R) -> Result<Trajectory> {
    if length == 0 {
        return Err(Error::Input("trajectory length must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(length);
    let mut observations = Vec::with_capacity(length);
    let mut s = draw(hmm.mu(), rng);
    for t in 0..length {
        if t > 0 {
            s = draw(&hmm.transition()[s], rng);
        }
        states.push(s);
        observations.push(draw(&hmm.emission()[s], rng));
    }
    Ok(Trajectory { states, observations })
}

/// `ln p(s_{1:τ}, o_{1:τ} | θ)`, accumulated in log space.
pub fn log_joint(hmm: &GenerativeHmm, traj: &Trajectory) -> f64 {
    log_joint_parts(hmm, &traj.states, &traj.observations)
}

pub(crate) fn log_joint_parts(hmm: &GenerativeHmm, states: &[usize], observations: &[usize]) -> f64 {
    let la = hmm.log_emission();
    let lb = hmm.log_transition();
    let mut total = hmm.log_mu()[states[0]];
    for t in 0..states.len() {
        if t > 0 {
            total += lb[states[t - 1]][states[t]];
        }
        total += la[states[t]][observations[t]];
    }
    total
}

/// JSON model description. Either logits or stochastic matrices may be given;
/// when neither is present all logits are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_tilde: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_tilde: Option<Vec<Vec<f64>>>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
}

impl ModelSpec {
    pub fn space(&self) -> Result<StateSpace> {
        StateSpace::new(self.k, self.m.unwrap_or(self.k))
    }

    pub fn mu(&self) -> Vec<f64> {
        self.mu
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.k as f64; self.k])
    }

    pub fn params(&self) -> Result<ModelParams> {
        let space = self.space()?;
        let has_logits = self.alpha_tilde.is_some() || self.beta_tilde.is_some();
        let has_matrices = self.a.is_some() || self.b.is_some();
        let params = match (has_logits, has_matrices) {
            (true, true) => {
                return Err(Error::Input(
                    "give either alpha_tilde/beta_tilde or A/B, not both".into(),
                ))
            }
            (true, false) => {
                let zeros = ModelParams::zeros(space);
                ModelParams::new(
                    self.alpha_tilde.clone().unwrap_or(zeros.alpha_tilde),
                    self.beta_tilde.clone().unwrap_or(zeros.beta_tilde),
                )?
            }
            (false, true) => {
                let uniform = GenerativeHmm::uniform(space);
                ModelParams::from_stochastic(
                    self.a.as_deref().unwrap_or(uniform.emission()),
                    self.b.as_deref().unwrap_or(uniform.transition()),
                )?
            }
            (false, false) => ModelParams::zeros(space),
        };
        if params.space() != space {
            return Err(Error::Input(format!(
                "matrix shapes do not match K={}, M={}",
                space.k, space.m
            )));
        }
        Ok(params)
    }

    pub fn build(&self) -> Result<GenerativeHmm> {
        build_hmm(&self.mu(), self.params()?)
    }
}
