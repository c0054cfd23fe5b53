//! Mean-field families over hidden-state sequences.
//!
//! At horizon `τ` the hyperparameters are `ψ_τ = (ρ_τ¹, …, ρ_τ^τ)`, one pinned
//! logit vector per time point, with marginals `π_τ^t = softmax(ρ_τ^t)`. When a
//! new observation arrives the sequence of snapshots `ψ_1, ψ_2, …` is extended
//! by one; only the newest block and the one before it may change afterwards.
//!
//! [`MfaHistory`] stores the snapshots compactly. Snapshot `ψ_t` differs from
//! `ψ_{t-1}` only in its last two blocks, so each time step keeps
//! `ρ_t^{t-1}` (the revision of the previous block) and `ρ_t^t`. Any older
//! block `ρ_τ^j`, `j < τ-1`, is read from the step that last revised it,
//! `ρ_{j+1}^j`, which is never written again.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_softmax, xlogx};
use crate::model::{softmax_row, GenerativeHmm};
use crate::oracle::SequenceTable;

/// Smallest probability turned into a logit by the warm-start rule.
const LOGIT_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfaFamily {
    /// `Π_t q_t(s_t)`.
    FullyDecoupled,
    /// `q_1(s_1) Π_t q_t(s_t | s_{t-1})`.
    ForwardMarkov,
    /// `q_τ(s_τ) Π_t q_t(s_{t-1} | s_t)`.
    #[default]
    Reversed,
}

impl MfaFamily {
    /// Whether ingesting an observation may revise the previous marginal.
    ///
    /// With marginal-form conditionals the decoupled and forward-Markov
    /// families reduce to the same product distribution and are fit through
    /// the pairwise objective, which only involves the newest marginal.
    pub fn revises_previous(self) -> bool {
        matches!(self, MfaFamily::Reversed)
    }

    pub fn name(self) -> &'static str {
        match self {
            MfaFamily::FullyDecoupled => "fully_decoupled",
            MfaFamily::ForwardMarkov => "forward_markov",
            MfaFamily::Reversed => "reversed",
        }
    }
}

/// How the newest block is initialised when the history is augmented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// `ρ = 0`, a uniform marginal.
    Zeros,
    /// `π = Bᵀ π_τ^τ` (the prior `mu` for the very first block).
    #[default]
    OneStepPrediction,
}

/// Pinned logits of a probability vector: `ln p - ln p_1`.
pub fn pinned_logits(probs: &[f64]) -> Vec<f64> {
    let first = probs[0].max(LOGIT_FLOOR).ln();
    probs.iter().map(|p| p.max(LOGIT_FLOOR).ln() - first).collect()
}

fn check_block(rho: &[f64], k: usize) -> Result<()> {
    if rho.len() != k {
        return Err(Error::Input(format!("block has {} entries, expected {k}", rho.len())));
    }
    if rho.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parametrization("non-finite MFA logit".into()));
    }
    if rho[0] != 0.0 {
        return Err(Error::Constraint(format!("MFA block first logit is {}, must be 0", rho[0])));
    }
    Ok(())
}

/// One snapshot `ψ_τ = (ρ_τ¹, …, ρ_τ^τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfaHyperparams {
    pub rho: Vec<Vec<f64>>,
}

impl MfaHyperparams {
    pub fn new(rho: Vec<Vec<f64>>) -> Result<Self> {
        let k = rho.first().map_or(0, Vec::len);
        for block in &rho {
            check_block(block, k)?;
        }
        Ok(Self { rho })
    }

    pub fn horizon(&self) -> usize {
        self.rho.len()
    }

    pub fn marginals(&self) -> Result<MfaMarginals> {
        let pi = self.rho.iter().map(|r| softmax_row(r)).collect::<Result<_>>()?;
        Ok(MfaMarginals { pi })
    }
}

/// `π_τ^t = softmax(ρ_τ^t)` for 1-based `t`.
pub fn marginal(hp: &MfaHyperparams, t: usize) -> Result<Vec<f64>> {
    if t == 0 || t > hp.horizon() {
        return Err(Error::TimeIndex { t, horizon: hp.horizon() });
    }
    softmax_row(&hp.rho[t - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfaMarginals {
    pub pi: Vec<Vec<f64>>,
}

/// Checkpoint form of the current snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfaSnapshot {
    pub horizon: usize,
    pub rho: Vec<Vec<f64>>,
    pub frozen_below: usize,
}

/// The blocks written at one time step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBlocks {
    /// `ρ_t^{t-1}`; absent at `t = 1`.
    pub revised_prev: Option<Vec<f64>>,
    /// `ρ_t^t`.
    pub current: Vec<f64>,
}

/// Append-only sequence of snapshots `ψ_1, …, ψ_τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfaHistory {
    k: usize,
    steps: Vec<StepBlocks>,
}

impl MfaHistory {
    pub fn new(k: usize) -> Self {
        Self { k, steps: Vec::new() }
    }

    /// Rebuilds a history from raw per-step blocks.
    pub fn from_steps(k: usize, steps: Vec<StepBlocks>) -> Result<Self> {
        for (i, step) in steps.iter().enumerate() {
            check_block(&step.current, k)?;
            match (&step.revised_prev, i) {
                (None, 0) => {}
                (Some(r), i) if i > 0 => check_block(r, k)?,
                _ => {
                    return Err(Error::Input(format!(
                        "step {} must {}carry a revised previous block",
                        i + 1,
                        if i == 0 { "not " } else { "" }
                    )))
                }
            }
        }
        Ok(Self { k, steps })
    }

    /// History whose blocks are all uniform.
    pub fn uniform(k: usize, horizon: usize) -> Self {
        let steps = (0..horizon)
            .map(|t| StepBlocks {
                revised_prev: (t > 0).then(|| vec![0.0; k]),
                current: vec![0.0; k],
            })
            .collect();
        Self { k, steps }
    }

    /// History with every block drawn uniformly from `[-spread, spread]`.
    pub fn random<R: rand::Rng>(k: usize, horizon: usize, spread: f64, rng: &mut R) -> Self {
        let mut block = || -> Vec<f64> {
            (0..k)
                .map(|j| if j == 0 { 0.0 } else { rng.gen_range(-spread..=spread) })
                .collect()
        };
        let mut steps = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let revised_prev = if t > 0 { Some(block()) } else { None };
            steps.push(StepBlocks { revised_prev, current: block() });
        }
        Self { k, steps }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[StepBlocks] {
        &self.steps
    }

    /// Blocks with index below this value are frozen.
    pub fn frozen_below(&self) -> usize {
        self.horizon().saturating_sub(1)
    }

    pub fn is_frozen(&self, j: usize) -> bool {
        j < self.frozen_below()
    }

    /// `ρ_t^j`, block `j` of snapshot `ψ_t` (both 1-based, `j ≤ t ≤ τ`).
    pub fn block(&self, t: usize, j: usize) -> Result<&[f64]> {
        if t == 0 || t > self.horizon() {
            return Err(Error::TimeIndex { t, horizon: self.horizon() });
        }
        if j == 0 || j > t {
            return Err(Error::TimeIndex { t: j, horizon: t });
        }
        Ok(self.block_unchecked(t, j))
    }

    pub(crate) fn block_unchecked(&self, t: usize, j: usize) -> &[f64] {
        if j == t {
            &self.steps[t - 1].current
        } else {
            // ρ_t^j = ρ_{j+1}^j for every j < t
            self.steps[j].revised_prev.as_deref().expect("steps after the first carry a revision")
        }
    }

    /// `ln π_t^j`.
    pub fn log_pi(&self, t: usize, j: usize) -> Vec<f64> {
        log_softmax(self.block_unchecked(t, j))
    }

    /// `π_t^j`.
    pub fn pi(&self, t: usize, j: usize) -> Vec<f64> {
        softmax_row(self.block_unchecked(t, j)).expect("stored blocks are finite")
    }

    /// Snapshot `ψ_t`.
    pub fn snapshot(&self, t: usize) -> Result<MfaHyperparams> {
        if t == 0 || t > self.horizon() {
            return Err(Error::TimeIndex { t, horizon: self.horizon() });
        }
        Ok(MfaHyperparams {
            rho: (1..=t).map(|j| self.block_unchecked(t, j).to_vec()).collect(),
        })
    }

    pub fn current(&self) -> Result<MfaHyperparams> {
        self.snapshot(self.horizon())
    }

    pub fn checkpoint(&self) -> Result<MfaSnapshot> {
        Ok(MfaSnapshot {
            horizon: self.horizon(),
            rho: self.current()?.rho,
            frozen_below: self.frozen_below(),
        })
    }

    /// Current marginals `π_τ^t`, `t = 1..τ`.
    pub fn current_marginals(&self) -> Vec<Vec<f64>> {
        let tau = self.horizon();
        (1..=tau).map(|j| self.pi(tau, j)).collect()
    }

    /// Overwrites block `j` of the current snapshot. Only `j = τ` and
    /// `j = τ-1` are writable; older blocks are frozen.
    pub fn set_block(&mut self, j: usize, rho: Vec<f64>) -> Result<()> {
        let tau = self.horizon();
        if j == 0 || j > tau {
            return Err(Error::TimeIndex { t: j, horizon: tau });
        }
        if self.is_frozen(j) {
            return Err(Error::Frozen { t: j, horizon: tau });
        }
        check_block(&rho, self.k)?;
        let step = &mut self.steps[tau - 1];
        if j == tau {
            step.current = rho;
        } else {
            step.revised_prev = Some(rho);
        }
        Ok(())
    }

    /// Extends the horizon by one. The revision of the previous block starts
    /// as a copy of it; the new block follows `rule`.
    pub fn augment(&mut self, rule: InitRule, hmm: &GenerativeHmm) {
        let k = self.k;
        let (revised_prev, current) = match self.steps.last() {
            None => {
                let current = match rule {
                    InitRule::Zeros => vec![0.0; k],
                    InitRule::OneStepPrediction => pinned_logits(hmm.mu()),
                };
                (None, current)
            }
            Some(last) => {
                let current = match rule {
                    InitRule::Zeros => vec![0.0; k],
                    InitRule::OneStepPrediction => {
                        let pi = softmax_row(&last.current).expect("stored blocks are finite");
                        pinned_logits(&hmm.predict(&pi))
                    }
                };
                (Some(last.current.clone()), current)
            }
        };
        self.steps.push(StepBlocks { revised_prev, current });
    }

    /// Puts back a previously saved copy of the newest step.
    pub(crate) fn restore_last(&mut self, step: StepBlocks) {
        if let Some(last) = self.steps.last_mut() {
            *last = step;
        }
    }

    /// Non-mutating [`augment`](Self::augment).
    pub fn augmented(&self, rule: InitRule, hmm: &GenerativeHmm) -> Self {
        let mut next = self.clone();
        next.augment(rule, hmm);
        next
    }
}

/// `m_{t+1}(l | k) = π_{t+1}^t(k) π_{t+1}^{t+1}(l) / π_t^t(k)` together with
/// its row sums `π_{t+1}^t(k) / π_t^t(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MConditional {
    /// Indexed `[k][l]`.
    pub table: Vec<Vec<f64>>,
    pub row_sums: Vec<f64>,
}

pub fn m_conditional(pi_prev_revised: &[f64], pi_new: &[f64], pi_prev_old: &[f64]) -> MConditional {
    let table: Vec<Vec<f64>> = pi_prev_revised
        .iter()
        .zip(pi_prev_old)
        .map(|(r, o)| pi_new.iter().map(|n| r * n / o).collect())
        .collect();
    let row_sums = pi_prev_revised.iter().zip(pi_prev_old).map(|(r, o)| r / o).collect();
    MConditional { table, row_sums }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullQ {
    pub table: SequenceTable,
    pub total_mass: f64,
}

/// The full sequence distribution of a history, for the enumeration oracles.
///
/// `Reversed` builds `π_1¹(s_1) Π_t m_t(s_t | s_{t-1})` from the historical
/// snapshots; the other families take the product of the current marginals.
pub fn full_q(history: &MfaHistory, family: MfaFamily) -> Result<FullQ> {
    let tau = history.horizon();
    if tau == 0 {
        return Err(Error::Input("empty history".into()));
    }
    let table = match family {
        MfaFamily::Reversed => {
            let first = history.pi(1, 1);
            let ms: Vec<MConditional> = (2..=tau)
                .map(|t| m_conditional(&history.pi(t, t - 1), &history.pi(t, t), &history.pi(t - 1, t - 1)))
                .collect();
            SequenceTable::from_fn(history.k(), tau, |seq| {
                let mut p = first[seq[0]];
                for (i, m) in ms.iter().enumerate() {
                    p *= m.table[seq[i]][seq[i + 1]];
                }
                p
            })?
        }
        MfaFamily::FullyDecoupled | MfaFamily::ForwardMarkov => {
            SequenceTable::product(&history.current_marginals())?
        }
    };
    let total_mass = table.total_mass();
    Ok(FullQ { table, total_mass })
}

/// Pairwise tables `q_t(s_{t-1}, s_t)`; the first time point has a singleton.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseTables {
    pub initial: Vec<f64>,
    /// `pairs[t-2][k][l] = q_t(s_{t-1} = k, s_t = l)` for `t = 2..τ`.
    pub pairs: Vec<Vec<Vec<f64>>>,
}

impl PairwiseTables {
    /// Tables induced by a product-form `q`.
    pub fn from_marginals(marginals: &[Vec<f64>]) -> Self {
        let pairs = marginals
            .windows(2)
            .map(|w| w[0].iter().map(|a| w[1].iter().map(|b| a * b).collect()).collect())
            .collect();
        Self { initial: marginals[0].clone(), pairs }
    }

    pub fn len(&self) -> usize {
        1 + self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn check_joint(values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut total = 0.0;
    for v in values {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Input(format!("{what} has negative or non-finite mass")));
        }
        total += v;
    }
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::Input(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// The pairwise approximate ELBO
/// `Σ_t E_{q_t(s_{t-1}, s_t)}[ln f(s_t | s_{t-1}) g(o_t | s_t) / q_t(s_t | s_{t-1})]`,
/// with `mu` in place of `f` and the singleton `q_1` at the first time point.
pub fn hat_elbo(hmm: &GenerativeHmm, pairwise: &PairwiseTables, observations: &[usize]) -> Result<f64> {
    let k = hmm.k();
    if pairwise.len() != observations.len() {
        return Err(Error::Horizon { history: pairwise.len(), observations: observations.len() });
    }
    hmm.check_observations(observations)?;
    if pairwise.initial.len() != k || pairwise.pairs.iter().any(|t| t.len() != k || t.iter().any(|r| r.len() != k)) {
        return Err(Error::Input("pairwise table shape does not match K".into()));
    }
    check_joint(pairwise.initial.iter().copied(), "initial table")?;
    for (i, table) in pairwise.pairs.iter().enumerate() {
        check_joint(table.iter().flatten().copied(), &format!("pairwise table t={}", i + 2))?;
    }

    let la = hmm.log_emission();
    let lb = hmm.log_transition();
    let o1 = observations[0];
    let mut total: f64 = (0..k)
        .filter(|&l| pairwise.initial[l] > 0.0)
        .map(|l| pairwise.initial[l] * (hmm.log_mu()[l] + la[l][o1]) - xlogx(pairwise.initial[l]))
        .sum();
    for (table, &o) in pairwise.pairs.iter().zip(&observations[1..]) {
        for (kk, row) in table.iter().enumerate() {
            let row_mass: f64 = row.iter().sum();
            for (l, &q) in row.iter().enumerate() {
                if q > 0.0 {
                    total += q * (lb[kk][l] + la[l][o] - (q / row_mass).ln());
                }
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_hmm, sample_trajectory, ModelParams, StateSpace};
    use crate::oracle::{brute_force_elbo, forward_backward};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn marginal_examples() {
        let hp = MfaHyperparams::new(vec![vec![0.0, 0.0, 0.0]]).unwrap();
        assert!(close(&marginal(&hp, 1).unwrap(), &[1.0 / 3.0; 3], 1e-15));
        let hp = MfaHyperparams::new(vec![vec![0.0]]).unwrap();
        assert_eq!(marginal(&hp, 1).unwrap(), vec![1.0]);
        let hp = MfaHyperparams::new(vec![vec![0.0, 4f64.ln()]]).unwrap();
        assert!(close(&marginal(&hp, 1).unwrap(), &[0.2, 0.8], 1e-15));
        assert!(matches!(marginal(&hp, 2), Err(Error::TimeIndex { .. })));
        assert!(matches!(marginal(&hp, 0), Err(Error::TimeIndex { .. })));
    }

    #[test]
    fn hyperparams_enforce_pinning() {
        assert!(matches!(MfaHyperparams::new(vec![vec![0.1, 0.0]]), Err(Error::Constraint(_))));
        assert!(MfaHyperparams::new(vec![vec![0.0, f64::NAN]]).is_err());
    }

    #[test]
    fn m_conditional_examples() {
        let m = m_conditional(&[0.5, 0.5], &[0.3, 0.7], &[0.5, 0.5]);
        assert!(close(&m.row_sums, &[1.0, 1.0], 1e-15));
        assert!(m.table.iter().all(|row| close(row, &[0.3, 0.7], 1e-15)));

        let m = m_conditional(&[1.0], &[1.0], &[1.0]);
        assert_eq!(m.table, vec![vec![1.0]]);

        let m = m_conditional(&[0.6, 0.4], &[0.3, 0.7], &[0.5, 0.5]);
        assert!(close(&m.table[0], &[0.36, 0.84], 1e-15));
        assert!(close(&m.table[1], &[0.24, 0.56], 1e-15));
        assert!(close(&m.row_sums, &[1.2, 0.8], 1e-15));
    }

    #[test]
    fn augment_zeros_is_uniform() {
        let hmm = GenerativeHmm::uniform(StateSpace::square(3).unwrap());
        let mut h = MfaHistory::new(3);
        h.augment(InitRule::Zeros, &hmm);
        h.augment(InitRule::Zeros, &hmm);
        assert_eq!(h.horizon(), 2);
        assert!(close(&h.pi(2, 2), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn augment_one_step_prediction_by_hand() {
        let params = ModelParams::from_stochastic(
            &[vec![0.5, 0.5], vec![0.5, 0.5]],
            &[vec![0.7, 0.3], vec![0.4, 0.6]],
        )
        .unwrap();
        let hmm = build_hmm(&[0.5, 0.5], params).unwrap();
        let mut h = MfaHistory::new(2);
        h.augment(InitRule::Zeros, &hmm);
        h.set_block(1, vec![0.0, 4f64.ln()]).unwrap(); // π = [0.2, 0.8]
        h.augment(InitRule::OneStepPrediction, &hmm);
        // Bᵀπ = [0.2·0.7 + 0.8·0.4, 0.2·0.3 + 0.8·0.6] = [0.46, 0.54]
        assert!(close(&h.pi(2, 2), &[0.46, 0.54], 1e-14));
        assert!(close(h.block(2, 2).unwrap(), &[0.0, (0.54f64 / 0.46).ln()], 1e-14));
        // the revision starts as a copy of the previous block
        assert_eq!(h.block(2, 1).unwrap(), h.block(1, 1).unwrap());
    }

    #[test]
    fn augment_first_block_uses_prior() {
        let params = ModelParams::zeros(StateSpace::square(2).unwrap());
        let hmm = build_hmm(&[0.25, 0.75], params).unwrap();
        let mut h = MfaHistory::new(2);
        h.augment(InitRule::OneStepPrediction, &hmm);
        assert!(close(&h.pi(1, 1), &[0.25, 0.75], 1e-15));
    }

    #[test]
    fn freezing_after_two_augments() {
        let hmm = GenerativeHmm::uniform(StateSpace::square(2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut h = MfaHistory::random(2, 3, 1.0, &mut rng);
        h.augment(InitRule::OneStepPrediction, &hmm); // τ = 4, block 3 updatable
        h.set_block(3, vec![0.0, 0.25]).unwrap();
        let before: Vec<u64> = h.block(4, 3).unwrap().iter().map(|x| x.to_bits()).collect();
        h.augment(InitRule::OneStepPrediction, &hmm);
        h.augment(InitRule::OneStepPrediction, &hmm); // τ = 6
        let after: Vec<u64> = h.block(6, 3).unwrap().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
        assert!(matches!(h.set_block(3, vec![0.0, 1.0]), Err(Error::Frozen { .. })));
        assert!(matches!(h.set_block(4, vec![0.0, 1.0]), Err(Error::Frozen { .. })));
        assert!(h.set_block(5, vec![0.0, 1.0]).is_ok());
        assert!(h.set_block(6, vec![0.0, 1.0]).is_ok());
        assert!(matches!(h.set_block(6, vec![1.0, 1.0]), Err(Error::Constraint(_))));
        assert_eq!(h.frozen_below(), 5);
    }

    #[test]
    fn snapshots_share_frozen_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = MfaHistory::random(3, 5, 1.0, &mut rng);
        let s5 = h.snapshot(5).unwrap();
        let s4 = h.snapshot(4).unwrap();
        assert_eq!(s5.rho[..3], s4.rho[..3]);
        assert_eq!(s5.horizon(), 5);
        let cp = h.checkpoint().unwrap();
        assert_eq!(cp.frozen_below, 4);
        let json = serde_json::to_string(&cp).unwrap();
        assert!(json.starts_with(r#"{"horizon":5,"rho":[[0.0,"#));
        assert_eq!(serde_json::from_str::<MfaSnapshot>(&json).unwrap(), cp);
    }

    #[test]
    fn from_steps_validation() {
        let ok = vec![StepBlocks { revised_prev: None, current: vec![0.0, 1.0] }];
        assert!(MfaHistory::from_steps(2, ok).is_ok());
        let bad = vec![StepBlocks { revised_prev: Some(vec![0.0, 1.0]), current: vec![0.0, 1.0] }];
        assert!(MfaHistory::from_steps(2, bad).is_err());
    }

    #[test]
    fn full_q_single_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = MfaHistory::random(3, 1, 1.0, &mut rng);
        let q = full_q(&h, MfaFamily::Reversed).unwrap();
        assert!(close(&q.table.probs, &h.pi(1, 1), 1e-15));
    }

    #[test]
    fn full_q_without_revisions_is_product() {
        let hmm = GenerativeHmm::uniform(StateSpace::square(2).unwrap());
        let mut h = MfaHistory::new(2);
        for t in 1..=4 {
            h.augment(InitRule::Zeros, &hmm);
            h.set_block(t, vec![0.0, 0.3 * t as f64 - 0.5]).unwrap();
        }
        let q = full_q(&h, MfaFamily::Reversed).unwrap();
        let prod = SequenceTable::product(&h.current_marginals()).unwrap();
        assert!((q.total_mass - 1.0).abs() < 1e-10);
        assert!(close(&q.table.probs, &prod.probs, 1e-15));
        for t in 2..=4 {
            let m = m_conditional(&h.pi(t, t - 1), &h.pi(t, t), &h.pi(t - 1, t - 1));
            assert!(close(&m.row_sums, &[1.0, 1.0], 1e-12));
        }
    }

    #[test]
    fn reversed_q_telescopes_with_revisions() {
        // the m-route and the product of current marginals agree even when the
        // individual m rows are unnormalised
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let k = rng.gen_range(2..=3);
            let h = MfaHistory::random(k, 4, 2.0, &mut rng);
            let rev = full_q(&h, MfaFamily::Reversed).unwrap();
            let dec = full_q(&h, MfaFamily::FullyDecoupled).unwrap();
            assert!(close(&rev.table.probs, &dec.table.probs, 1e-12));
            assert!((rev.total_mass - 1.0).abs() < 1e-10);
            let m = m_conditional(&h.pi(2, 1), &h.pi(2, 2), &h.pi(1, 1));
            for (kk, s) in m.row_sums.iter().enumerate() {
                assert!((s - h.pi(2, 1)[kk] / h.pi(1, 1)[kk]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_q_is_reproducible() {
        let h1 = MfaHistory::random(2, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let h2 = MfaHistory::random(2, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let a = full_q(&h1, MfaFamily::Reversed).unwrap();
        let b = full_q(&h2, MfaFamily::Reversed).unwrap();
        assert_eq!(a.total_mass.to_bits(), b.total_mass.to_bits());
    }

    #[test]
    fn hat_elbo_single_state() {
        let hmm = build_hmm(
            &[1.0],
            ModelParams::new(vec![vec![0.0, 0.5]], vec![vec![0.0]]).unwrap(),
        )
        .unwrap();
        let obs = [1, 0, 1];
        let tables = PairwiseTables::from_marginals(&vec![vec![1.0]; 3]);
        let expected: f64 = obs.iter().map(|&o| hmm.log_emission()[0][o]).sum();
        assert!((hat_elbo(&hmm, &tables, &obs).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn hat_elbo_uniform_equals_evidence() {
        let hmm = GenerativeHmm::uniform(StateSpace::square(2).unwrap());
        let obs = [0, 1, 1, 0];
        let tables = PairwiseTables::from_marginals(&vec![vec![0.5, 0.5]; 4]);
        let v = hat_elbo(&hmm, &tables, &obs).unwrap();
        assert!((v - 4.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hat_elbo_below_elbo_at_smoothing_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let space = StateSpace::square(2).unwrap();
            let hmm = build_hmm(&[0.4, 0.6], ModelParams::random(space, 1.5, &mut rng)).unwrap();
            let obs = sample_trajectory(&hmm, 3, rng.gen()).unwrap().observations;
            let smooth = forward_backward(&hmm, &obs).unwrap();
            let tables = PairwiseTables::from_marginals(&smooth.marginals);
            let q = SequenceTable::product(&smooth.marginals).unwrap();
            let hat = hat_elbo(&hmm, &tables, &obs).unwrap();
            let full = brute_force_elbo(&hmm, &q, &obs).unwrap();
            assert!(hat <= full + 1e-12, "{hat} > {full}");
        }
    }

    #[test]
    fn hat_elbo_rejects_invalid_tables() {
        let hmm = GenerativeHmm::uniform(StateSpace::square(2).unwrap());
        let mut tables = PairwiseTables::from_marginals(&vec![vec![0.5, 0.5]; 2]);
        tables.pairs[0][0][0] = 0.5;
        assert!(matches!(hat_elbo(&hmm, &tables, &[0, 0]), Err(Error::Input(_))));
        let tables = PairwiseTables::from_marginals(&vec![vec![0.5, 0.5]; 2]);
        assert!(matches!(hat_elbo(&hmm, &tables, &[0]), Err(Error::Horizon { .. })));
    }
}
