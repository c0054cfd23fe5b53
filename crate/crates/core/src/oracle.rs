//! Exact and brute-force reference computations.
//!
//! Everything here is independent of the variational recursions in
//! [`crate::elbo`]: forward filtering, forward-backward smoothing, full
//! posterior enumeration over all `K^τ` sequences, both forms of the
//! variational free energy, a brute-force ELBO and central finite differences.

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, normalize_log, weighted, xlogx};
use crate::model::{log_joint_parts, GenerativeHmm};

/// Largest number of sequences the enumeration oracles will visit.
pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    /// `p(s_t | o_{1:t})` for `t = 1..τ`.
    pub marginals: Vec<Vec<f64>>,
    /// `ln p(o_{1:τ})`.
    pub log_evidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingResult {
    /// `p(s_t | o_{1:τ})`.
    pub marginals: Vec<Vec<f64>>,
    /// `p(s_t, s_{t+1} | o_{1:τ})` indexed `[t][s_t][s_{t+1}]`, `τ-1` tables.
    pub pairwise: Vec<Vec<Vec<f64>>>,
    pub log_evidence: f64,
}

/// Forward (alpha) recursion with per-step log normalisers.
pub fn forward_filter(hmm: &GenerativeHmm, observations: &[usize]) -> Result<FilterResult> {
    if observations.is_empty() {
        return Err(Error::Input("forward filter needs at least one observation".into()));
    }
    hmm.check_observations(observations)?;
    let k = hmm.k();
    let la = hmm.log_emission();
    let lb = hmm.log_transition();

    let mut marginals = Vec::with_capacity(observations.len());
    let mut log_evidence = 0.0;
    let mut log_pred: Vec<f64> = hmm.log_mu().to_vec();
    let mut log_filt = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    for (t, &o) in observations.iter().enumerate() {
        if t > 0 {
            for l in 0..k {
                for j in 0..k {
                    scratch[j] = log_filt[j] + lb[j][l];
                }
                log_pred[l] = log_sum_exp(&scratch);
            }
        }
        for l in 0..k {
            log_filt[l] = log_pred[l] + la[l][o];
        }
        let c = log_sum_exp(&log_filt);
        log_evidence += c;
        log_filt.iter_mut().for_each(|x| *x -= c);
        marginals.push(log_filt.iter().map(|x| x.exp()).collect());
    }
    Ok(FilterResult { marginals, log_evidence })
}

/// Forward-backward smoothing in log space.
pub fn forward_backward(hmm: &GenerativeHmm, observations: &[usize]) -> Result<SmoothingResult> {
    if observations.is_empty() {
        return Err(Error::Input("smoothing needs at least one observation".into()));
    }
    hmm.check_observations(observations)?;
    let k = hmm.k();
    let n = observations.len();
    let la = hmm.log_emission();
    let lb = hmm.log_transition();

    let mut log_alpha = vec![vec![0.0; k]; n];
    for l in 0..k {
        log_alpha[0][l] = hmm.log_mu()[l] + la[l][observations[0]];
    }
    let mut buf = vec![0.0; k];
    for t in 1..n {
        for l in 0..k {
            for j in 0..k {
                buf[j] = log_alpha[t - 1][j] + lb[j][l];
            }
            log_alpha[t][l] = log_sum_exp(&buf) + la[l][observations[t]];
        }
    }
    let log_evidence = log_sum_exp(&log_alpha[n - 1]);

    let mut log_beta = vec![vec![0.0; k]; n];
    for t in (0..n - 1).rev() {
        for j in 0..k {
            for l in 0..k {
                buf[l] = lb[j][l] + la[l][observations[t + 1]] + log_beta[t + 1][l];
            }
            log_beta[t][j] = log_sum_exp(&buf);
        }
    }

    let marginals = (0..n)
        .map(|t| {
            let w: Vec<f64> = (0..k).map(|j| log_alpha[t][j] + log_beta[t][j]).collect();
            normalize_log(&w)
        })
        .collect();
    let pairwise = (0..n.saturating_sub(1))
        .map(|t| {
            let flat: Vec<f64> = (0..k * k)
                .map(|idx| {
                    let (j, l) = (idx / k, idx % k);
                    log_alpha[t][j] + lb[j][l] + la[l][observations[t + 1]] + log_beta[t + 1][l]
                })
                .collect();
            normalize_log(&flat).chunks(k).map(<[f64]>::to_vec).collect()
        })
        .collect();
    Ok(SmoothingResult { marginals, pairwise, log_evidence })
}

/// Number of sequences of length `len` over `k` values, refusing anything
/// above [`ENUMERATION_LIMIT`].
pub fn guarded_count(k: usize, len: usize) -> Result<usize> {
    u32::try_from(len)
        .ok()
        .and_then(|e| k.checked_pow(e))
        .filter(|&n| n <= ENUMERATION_LIMIT)
        .ok_or(Error::Guard { states: k, len, limit: ENUMERATION_LIMIT })
}

/// Decodes a table index into a state sequence; `s_1` is the most significant
/// base-K digit.
pub fn decode_sequence(mut index: usize, k: usize, len: usize, out: &mut [usize]) {
    for t in (0..len).rev() {
        out[t] = index % k;
        index /= k;
    }
}

pub fn encode_sequence(states: &[usize], k: usize) -> usize {
    states.iter().fold(0, |acc, &s| acc * k + s)
}

/// A weight for every one of the `K^τ` state sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTable {
    pub k: usize,
    pub len: usize,
    pub probs: Vec<f64>,
}

impl SequenceTable {
    /// Fills the table from a per-sequence weight function.
    pub fn from_fn(k: usize, len: usize, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n = guarded_count(k, len)?;
        let mut seq = vec![0; len];
        let probs = (0..n)
            .map(|i| {
                decode_sequence(i, k, len, &mut seq);
                f(&seq)
            })
            .collect();
        Ok(Self { k, len, probs })
    }

    /// Product-form table `Π_t marginals[t](s_t)`.
    pub fn product(marginals: &[Vec<f64>]) -> Result<Self> {
        let k = marginals.first().map_or(1, Vec::len);
        Self::from_fn(k, marginals.len(), |seq| {
            seq.iter().enumerate().map(|(t, &s)| marginals[t][s]).product()
        })
    }

    pub fn prob(&self, states: &[usize]) -> f64 {
        self.probs[encode_sequence(states, self.k)]
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Singleton marginal of `s_t` (0-based `t`).
    pub fn marginal(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        let mut seq = vec![0; self.len];
        for (i, &p) in self.probs.iter().enumerate() {
            decode_sequence(i, self.k, self.len, &mut seq);
            out[seq[t]] += p;
        }
        out
    }

    pub fn total_variation(&self, other: &SequenceTable) -> f64 {
        0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    fn check_distribution(&self) -> Result<()> {
        if self.probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Input("sequence distribution has negative or non-finite mass".into()));
        }
        let total = self.total_mass();
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::Input(format!("sequence distribution sums to {total}")));
        }
        Ok(())
    }
}

/// Exact posterior over all state sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedPosterior {
    pub table: SequenceTable,
    pub log_evidence: f64,
}

/// `p(s_{1:τ} | o_{1:τ}) = exp(log_joint - log_evidence)` for every sequence.
pub fn enumerate_posterior(hmm: &GenerativeHmm, observations: &[usize]) -> Result<EnumeratedPosterior> {
    if observations.is_empty() {
        return Err(Error::Input("enumeration needs at least one observation".into()));
    }
    hmm.check_observations(observations)?;
    let joints = SequenceTable::from_fn(hmm.k(), observations.len(), |seq| {
        log_joint_parts(hmm, seq, observations)
    })?;
    let log_evidence = log_sum_exp(&joints.probs);
    let probs = joints.probs.iter().map(|lj| (lj - log_evidence).exp()).collect();
    Ok(EnumeratedPosterior {
        table: SequenceTable { probs, ..joints },
        log_evidence,
    })
}

/// Both displayed forms of the free energy for one `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VfeForms {
    /// `KL[q || p(s)]`.
    pub complexity: f64,
    /// `E_q[ln p(o | s)]`.
    pub accuracy: f64,
    /// `complexity - accuracy`.
    pub kl_form: f64,
    /// `-E_q[ln p(o, s) / q(s)]`.
    pub joint_form: f64,
}

pub fn vfe_forms(hmm: &GenerativeHmm, q: &SequenceTable, observations: &[usize]) -> Result<VfeForms> {
    check_table(hmm, q, observations)?;
    q.check_distribution()?;
    let la = hmm.log_emission();
    let lb = hmm.log_transition();
    let mut seq = vec![0; q.len];
    let (mut complexity, mut accuracy, mut joint) = (0.0, 0.0, 0.0);
    for (i, &p) in q.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        decode_sequence(i, q.k, q.len, &mut seq);
        let mut log_prior = hmm.log_mu()[seq[0]];
        let mut log_lik = 0.0;
        for t in 0..q.len {
            if t > 0 {
                log_prior += lb[seq[t - 1]][seq[t]];
            }
            log_lik += la[seq[t]][observations[t]];
        }
        let log_q = p.ln();
        complexity += p * (log_q - log_prior);
        accuracy += p * log_lik;
        joint += p * (log_prior + log_lik - log_q);
    }
    Ok(VfeForms {
        complexity,
        accuracy,
        kl_form: complexity - accuracy,
        joint_form: -joint,
    })
}

/// Variational free energy (the joint form). Upper-bounds `-ln p(o)`.
pub fn vfe(hmm: &GenerativeHmm, q: &SequenceTable, observations: &[usize]) -> Result<f64> {
    Ok(vfe_forms(hmm, q, observations)?.joint_form)
}

/// `Σ_s q(s) [ln p(s, o) - ln q(s)]` by exhaustive summation. `q` need not be
/// normalised; sequences with zero weight contribute nothing.
pub fn brute_force_elbo(hmm: &GenerativeHmm, q: &SequenceTable, observations: &[usize]) -> Result<f64> {
    check_table(hmm, q, observations)?;
    let mut seq = vec![0; q.len];
    let mut total = 0.0;
    for (i, &p) in q.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        decode_sequence(i, q.k, q.len, &mut seq);
        total += weighted(p, log_joint_parts(hmm, &seq, observations)) - xlogx(p);
    }
    Ok(total)
}

fn check_table(hmm: &GenerativeHmm, q: &SequenceTable, observations: &[usize]) -> Result<()> {
    guarded_count(q.k, q.len)?;
    if q.k != hmm.k() || q.len != observations.len() {
        return Err(Error::Input(format!(
            "table covers K={} τ={}, model/data have K={} τ={}",
            q.k,
            q.len,
            hmm.k(),
            observations.len()
        )));
    }
    hmm.check_observations(observations)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let up = f(&x);
            x[i] = point[i] - step;
            let down = f(&x);
            x[i] = point[i];
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Oracle(format!("non-finite evaluation at coordinate {i}")));
            }
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// Relative error with an absolute floor: `|a - b| / max(|b|, floor)`.
pub fn relative_error(actual: f64, expected: f64, floor: f64) -> f64 {
    (actual - expected).abs() / expected.abs().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_hmm, sample_trajectory, ModelParams, StateSpace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn concrete_model() -> GenerativeHmm {
        let params = ModelParams::from_stochastic(
            &[vec![0.9, 0.1], vec![0.2, 0.8]],
            &[vec![0.7, 0.3], vec![0.4, 0.6]],
        )
        .unwrap();
        build_hmm(&[0.5, 0.5], params).unwrap()
    }

    fn random_model(k: usize, m: usize, rng: &mut ChaCha8Rng) -> GenerativeHmm {
        let space = StateSpace::new(k, m).unwrap();
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let mu: Vec<f64> = raw.iter().map(|x| x / z).collect();
        build_hmm(&mu, ModelParams::random(space, 1.5, rng)).unwrap()
    }

    #[test]
    fn filter_single_state() {
        let hmm = GenerativeHmm::uniform(StateSpace::square(1).unwrap());
        let res = forward_filter(&hmm, &[0, 0, 0]).unwrap();
        assert!(res.marginals.iter().all(|m| m == &vec![1.0]));
        assert_eq!(res.log_evidence, 0.0);
    }

    #[test]
    fn filter_uniform_model() {
        let hmm = GenerativeHmm::uniform(StateSpace::square(2).unwrap());
        let res = forward_filter(&hmm, &[0, 1, 1, 0]).unwrap();
        assert!((res.log_evidence - 4.0 * 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn filter_matches_enumeration_on_concrete_model() {
        let hmm = concrete_model();
        let obs = [0, 1, 1];
        // hand enumeration over the 8 sequences
        let mut terms = Vec::new();
        for s in 0..8usize {
            let seq = [s >> 2 & 1, s >> 1 & 1, s & 1];
            let mut p = hmm.mu()[seq[0]] * hmm.emission()[seq[0]][obs[0]];
            for t in 1..3 {
                p *= hmm.transition()[seq[t - 1]][seq[t]] * hmm.emission()[seq[t]][obs[t]];
            }
            terms.push(p);
        }
        let expected = terms.iter().sum::<f64>().ln();
        let res = forward_filter(&hmm, &obs).unwrap();
        assert!((res.log_evidence - expected).abs() < 1e-12);
        assert!((enumerate_posterior(&hmm, &obs).unwrap().log_evidence - expected).abs() < 1e-12);
    }

    #[test]
    fn filter_rejects_bad_input() {
        let hmm = concrete_model();
        assert!(forward_filter(&hmm, &[]).is_err());
        assert!(forward_filter(&hmm, &[0, 2]).is_err());
    }

    #[test]
    fn evidence_consistency_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let k = rng.gen_range(1..=4);
            let m = rng.gen_range(1..=3);
            let len = rng.gen_range(1..=5);
            let hmm = random_model(k, m, &mut rng);
            let obs = sample_trajectory(&hmm, len, rng.gen()).unwrap().observations;
            let filt = forward_filter(&hmm, &obs).unwrap();
            let post = enumerate_posterior(&hmm, &obs).unwrap();
            assert!((filt.log_evidence - post.log_evidence).abs() < 1e-10);
            // the filtering marginal at τ is the last-coordinate marginal of the posterior
            let last = post.table.marginal(len - 1);
            for (a, b) in filt.marginals[len - 1].iter().zip(&last) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn smoothing_single_state() {
        let hmm = GenerativeHmm::uniform(StateSpace::square(1).unwrap());
        let res = forward_backward(&hmm, &[0, 0]).unwrap();
        assert!(res.marginals.iter().all(|m| (m[0] - 1.0).abs() < 1e-15));
    }

    #[test]
    fn smoothing_noiseless_observation() {
        let k = 3;
        let mut alpha = vec![vec![0.0; k]; k];
        for (i, row) in alpha.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                if j > 0 {
                    // identity emission up to exp(-700)
                    *x = if i == j { 700.0 } else if i == 0 { -700.0 } else { 0.0 };
                }
            }
        }
        let params = ModelParams::new(alpha, vec![vec![0.0, 0.2, -0.3]; k]).unwrap();
        let hmm = build_hmm(&[0.2, 0.3, 0.5], params).unwrap();
        let obs = [2, 0, 1, 1];
        let res = forward_backward(&hmm, &obs).unwrap();
        for (t, &o) in obs.iter().enumerate() {
            for s in 0..k {
                let expected = if s == o { 1.0 } else { 0.0 };
                assert!((res.marginals[t][s] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smoothing_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let k = rng.gen_range(2..=3);
            let hmm = random_model(k, 2, &mut rng);
            let obs = sample_trajectory(&hmm, 4, rng.gen()).unwrap().observations;
            let res = forward_backward(&hmm, &obs).unwrap();
            let post = enumerate_posterior(&hmm, &obs).unwrap();
            for t in 0..4 {
                let m = post.table.marginal(t);
                for s in 0..k {
                    assert!((res.marginals[t][s] - m[s]).abs() < 1e-10);
                }
            }
            for (t, table) in res.pairwise.iter().enumerate() {
                let total: f64 = table.iter().flatten().sum();
                assert!((total - 1.0).abs() < 1e-10);
                for j in 0..k {
                    let row: f64 = table[j].iter().sum();
                    let col: f64 = table.iter().map(|r| r[j]).sum();
                    assert!((row - res.marginals[t][j]).abs() < 1e-10);
                    assert!((col - res.marginals[t + 1][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn enumeration_examples() {
        let hmm = GenerativeHmm::uniform(StateSpace::square(1).unwrap());
        let post = enumerate_posterior(&hmm, &[0, 0, 0]).unwrap();
        assert_eq!(post.table.probs, vec![1.0]);

        let params = ModelParams::new(
            vec![vec![0.0, 0.4], vec![0.0, -1.0]],
            vec![vec![0.0, -700.0], vec![0.0, 700.0]],
        )
        .unwrap();
        let hmm = build_hmm(&[1.0, 0.0], params).unwrap();
        let post = enumerate_posterior(&hmm, &[1, 0, 1]).unwrap();
        assert!((post.table.prob(&[0, 0, 0]) - 1.0).abs() < 1e-12);
        assert!((post.table.total_mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn enumeration_guard() {
        let hmm = GenerativeHmm::uniform(StateSpace::square(4).unwrap());
        let obs = vec![0; 11];
        assert!(matches!(enumerate_posterior(&hmm, &obs), Err(Error::Guard { .. })));
        assert!(guarded_count(10, 6).is_ok());
        assert!(guarded_count(10, 7).is_err());
        assert!(guarded_count(2, 1000).is_err());
    }

    #[test]
    fn vfe_examples() {
        let hmm = concrete_model();
        let obs = [0, 1, 1, 0];
        let post = enumerate_posterior(&hmm, &obs).unwrap();
        let f = vfe_forms(&hmm, &post.table, &obs).unwrap();
        assert!((f.joint_form + post.log_evidence).abs() < 1e-10);
        assert!((f.kl_form - f.joint_form).abs() < 1e-10);

        let hmm1 = build_hmm(
            &[1.0],
            ModelParams::new(vec![vec![0.0, 0.7, -0.2]], vec![vec![0.0]]).unwrap(),
        )
        .unwrap();
        let obs1 = [2, 1, 1];
        let q = SequenceTable { k: 1, len: 3, probs: vec![1.0] };
        let expected: f64 = -obs1.iter().map(|&o| hmm1.log_emission()[0][o]).sum::<f64>();
        assert!((vfe(&hmm1, &q, &obs1).unwrap() - expected).abs() < 1e-14);

        let uni = GenerativeHmm::uniform(StateSpace::new(2, 3).unwrap());
        let q = SequenceTable { k: 2, len: 3, probs: vec![1.0 / 8.0; 8] };
        assert!((vfe(&uni, &q, &[0, 2, 1]).unwrap() + 3.0 * (1.0f64 / 3.0).ln()).abs() < 1e-10);
    }

    #[test]
    fn vfe_rejects_invalid_q() {
        let hmm = concrete_model();
        let neg = SequenceTable { k: 2, len: 1, probs: vec![1.5, -0.5] };
        assert!(matches!(vfe(&hmm, &neg, &[0]), Err(Error::Input(_))));
        let short = SequenceTable { k: 2, len: 1, probs: vec![0.5, 0.4] };
        assert!(matches!(vfe(&hmm, &short, &[0]), Err(Error::Input(_))));
    }

    #[test]
    fn elbo_bound_and_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let k = rng.gen_range(2..=3);
            let len = rng.gen_range(1..=4);
            let hmm = random_model(k, 2, &mut rng);
            let obs = sample_trajectory(&hmm, len, rng.gen()).unwrap().observations;
            let post = enumerate_posterior(&hmm, &obs).unwrap();
            let raw: Vec<f64> = (0..post.table.probs.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let q = SequenceTable { k, len, probs: raw.iter().map(|x| x / z).collect() };
            let elbo = brute_force_elbo(&hmm, &q, &obs).unwrap();
            assert!(elbo <= post.log_evidence + 1e-12);
            assert!((elbo + vfe(&hmm, &q, &obs).unwrap()).abs() < 1e-10);
            let at_post = brute_force_elbo(&hmm, &post.table, &obs).unwrap();
            assert!((at_post - post.log_evidence).abs() < 1e-10);
        }
    }

    #[test]
    fn elbo_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hmm = random_model(2, 2, &mut rng);
        let obs = [1, 0, 1];
        let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let q = SequenceTable { k: 2, len: 3, probs: raw.iter().map(|x| x / z).collect() };
        let a = brute_force_elbo(&hmm, &q, &obs).unwrap();
        let b = brute_force_elbo(&hmm, &q, &obs).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], FD_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], FD_STEP).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));
        let err = finite_diff_grad(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], FD_STEP);
        assert!(matches!(err, Err(Error::Oracle(_))));
    }
}
