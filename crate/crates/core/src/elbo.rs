//! Constant-cost recursions for the ELBO under the reversed mean-field family
//! and for its gradients.
//!
//! With `a = π_t^{t-1}`, `b = π_t^t` and `p = π_{t-1}^{t-1}`:
//!
//! ```text
//! V_1(l) = ln μ(l) + ln α^l(o_1) - ln π_1¹(l)
//! V_t(l) = Σ_k a(k) [ V_{t-1}(k) + v_t(k, l) ]
//! v_t(k, l) = ln β^k(l) + ln α^l(o_t) - ln m_t(l | k),   m_t(l | k) = a(k) b(l) / p(k)
//! L_τ = Σ_l π_τ^τ(l) V_τ(l)
//!
//! U_1(l) = ∇_θ ln α^l(o_1)
//! U_t(l) = Σ_k a(k) [ U_{t-1}(k) + ∇_θ ln β^k(l) + ∇_θ ln α^l(o_t) ]
//! ∇_θ L_τ = Σ_l π_τ^τ(l) U_τ(l)
//! ```
//!
//! The `- ln π_1¹(l)` term in `V_1` is what makes `L_τ` equal the ELBO of the
//! sequence distribution the history defines; without it the recursion is off
//! by `E[ln π_1¹(s_1)]`. The U recursion propagates `U_{t-1}(k)` at the
//! summed-over state. [`Recursion::Literal`] keeps the other readings
//! (no entropy term in the base case, `U_{t-1}(l)` inside the sum) so the
//! oracle suite can show that they fail.

use crate::error::{Error, Result};
use crate::mfa::MfaHistory;
use crate::model::{GenerativeHmm, ThetaLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recursion {
    /// Matches the brute-force ELBO and its finite differences.
    #[default]
    Verified,
    /// Base case without the entropy term and `U_{t-1}(l)` propagated at the
    /// terminal state. Negative control only.
    Literal,
}

/// `V_t(l)` for every terminal state `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct VSummary {
    pub values: Vec<f64>,
    pub time: usize,
}

/// `U_t(l)`: one dense θ-gradient per terminal state `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct USummary {
    pub values: Vec<Vec<f64>>,
    pub time: usize,
}

/// `ln β^k(l) + ln α^l(o) - ln m(l | k)`, with `m` indexed `[k][l]`.
pub fn v_term(hmm: &GenerativeHmm, m: &[Vec<f64>], k: usize, l: usize, o: usize) -> f64 {
    hmm.log_transition()[k][l] + hmm.log_emission()[l][o] - m[k][l].ln()
}

fn check_horizon(history: &MfaHistory, observations: &[usize]) -> Result<()> {
    if history.horizon() != observations.len() || observations.is_empty() {
        return Err(Error::Horizon {
            history: history.horizon(),
            observations: observations.len(),
        });
    }
    if history.k() == 0 {
        return Err(Error::Input("history has K = 0".into()));
    }
    Ok(())
}

fn check_model(hmm: &GenerativeHmm, history: &MfaHistory, observations: &[usize]) -> Result<()> {
    if hmm.k() != history.k() {
        return Err(Error::Input(format!(
            "model has K={}, history has K={}",
            hmm.k(),
            history.k()
        )));
    }
    hmm.check_observations(observations)
}

/// `V_1`.
fn v_initial(hmm: &GenerativeHmm, history: &MfaHistory, o: usize, variant: Recursion) -> Vec<f64> {
    let la = hmm.log_emission();
    let log_pi = history.log_pi(1, 1);
    (0..hmm.k())
        .map(|l| {
            let base = hmm.log_mu()[l] + la[l][o];
            match variant {
                Recursion::Verified => base - log_pi[l],
                Recursion::Literal => base,
            }
        })
        .collect()
}

/// `V_t` from `V_{t-1}` using the blocks of snapshot `t` (and `π_{t-1}^{t-1}`).
fn v_advance(hmm: &GenerativeHmm, history: &MfaHistory, t: usize, prev: &[f64], o: usize) -> Vec<f64> {
    let k = hmm.k();
    let la = hmm.log_emission();
    let lb = hmm.log_transition();
    let log_a = history.log_pi(t, t - 1);
    let log_b = history.log_pi(t, t);
    let log_p = history.log_pi(t - 1, t - 1);
    let a: Vec<f64> = log_a.iter().map(|x| x.exp()).collect();
    (0..k)
        .map(|l| {
            (0..k)
                .map(|j| {
                    let log_m = log_a[j] + log_b[l] - log_p[j];
                    a[j] * (prev[j] + lb[j][l] + la[l][o] - log_m)
                })
                .sum()
        })
        .collect()
}

/// Accumulates `weight · ∇_θ ln α^l(o)` into `out`.
fn add_grad_log_emission(hmm: &GenerativeHmm, layout: &ThetaLayout, l: usize, o: usize, weight: f64, out: &mut [f64]) {
    let row = &hmm.emission()[l];
    for j in 1..layout.m {
        let delta = if j == o { 1.0 } else { 0.0 };
        out[layout.alpha(l, j)] += weight * (delta - row[j]);
    }
}

/// Accumulates `weight · ∇_θ ln β^k(l)` into `out`.
fn add_grad_log_transition(hmm: &GenerativeHmm, layout: &ThetaLayout, k: usize, l: usize, weight: f64, out: &mut [f64]) {
    let row = &hmm.transition()[k];
    for j in 1..layout.k {
        let delta = if j == l { 1.0 } else { 0.0 };
        out[layout.beta(k, j)] += weight * (delta - row[j]);
    }
}

fn u_initial(hmm: &GenerativeHmm, o: usize) -> Vec<Vec<f64>> {
    let layout = ThetaLayout::new(hmm.space());
    (0..hmm.k())
        .map(|l| {
            let mut g = vec![0.0; layout.dim()];
            add_grad_log_emission(hmm, &layout, l, o, 1.0, &mut g);
            g
        })
        .collect()
}

/// `U_t` from `U_{t-1}`; `a = π_t^{t-1}`.
fn u_advance(hmm: &GenerativeHmm, a: &[f64], prev: &[Vec<f64>], o: usize, variant: Recursion) -> Vec<Vec<f64>> {
    let layout = ThetaLayout::new(hmm.space());
    let k = hmm.k();
    let dim = layout.dim();
    let mut shared = vec![0.0; dim];
    if variant == Recursion::Verified {
        for (w, row) in a.iter().zip(prev) {
            for (s, x) in shared.iter_mut().zip(row) {
                *s += w * x;
            }
        }
    }
    (0..k)
        .map(|l| {
            let mut g = match variant {
                Recursion::Verified => shared.clone(),
                // Σ_k a(k) U_{t-1}(l) = U_{t-1}(l)
                Recursion::Literal => prev[l].clone(),
            };
            add_grad_log_emission(hmm, &layout, l, o, 1.0, &mut g);
            for (j, &w) in a.iter().enumerate() {
                add_grad_log_transition(hmm, &layout, j, l, w, &mut g);
            }
            g
        })
        .collect()
}

fn weighted_sum(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

fn weighted_rows(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for (w, row) in weights.iter().zip(rows) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += w * x;
        }
    }
    out
}

/// `V_τ` for the current horizon given the carried `V_{τ-1}` (absent at τ=1).
pub fn v_at_horizon(
    hmm: &GenerativeHmm,
    history: &MfaHistory,
    prev: Option<&VSummary>,
    o: usize,
) -> VSummary {
    let tau = history.horizon();
    let values = match prev {
        None => v_initial(hmm, history, o, Recursion::Verified),
        Some(p) => v_advance(hmm, history, tau, &p.values, o),
    };
    VSummary { values, time: tau }
}

/// `U_τ` for the current horizon given the carried `U_{τ-1}`.
pub fn u_at_horizon(
    hmm: &GenerativeHmm,
    history: &MfaHistory,
    prev: Option<&USummary>,
    o: usize,
) -> USummary {
    let tau = history.horizon();
    let values = match prev {
        None => u_initial(hmm, o),
        Some(p) => u_advance(hmm, &history.pi(tau, tau - 1), &p.values, o, Recursion::Verified),
    };
    USummary { values, time: tau }
}

/// `L_τ = Σ_l π_τ^τ(l) V_τ(l)` from a carried `V_{τ-1}`.
pub fn objective_at_horizon(hmm: &GenerativeHmm, history: &MfaHistory, prev: Option<&VSummary>, o: usize) -> f64 {
    let tau = history.horizon();
    weighted_sum(&history.pi(tau, tau), &v_at_horizon(hmm, history, prev, o).values)
}

/// `Σ_l π_τ^τ(l) U_τ(l)` from a carried `U_{τ-1}`.
pub fn theta_gradient_at_horizon(
    hmm: &GenerativeHmm,
    history: &MfaHistory,
    prev: Option<&USummary>,
    o: usize,
) -> Vec<f64> {
    let tau = history.horizon();
    weighted_rows(&history.pi(tau, tau), &u_at_horizon(hmm, history, prev, o).values)
}

/// Gradient of `L_τ` with respect to the two updatable blocks, free
/// coordinates only (`ρ(2..K)` of each block).
#[derive(Debug, Clone, PartialEq)]
pub struct PsiGradient {
    /// `∂L / ∂ρ_τ^τ(2..K)`.
    pub current: Vec<f64>,
    /// `∂L / ∂ρ_τ^{τ-1}(2..K)`; absent at τ = 1.
    pub revised_prev: Option<Vec<f64>>,
}

impl PsiGradient {
    /// `current` followed by `revised_prev`.
    pub fn coords(&self) -> Vec<f64> {
        let mut out = self.current.clone();
        if let Some(r) = &self.revised_prev {
            out.extend_from_slice(r);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.coords().iter().all(|x| x.is_finite())
    }
}

/// Chain rule through a softmax: `∂/∂ρ_j = π_j (g_j - Σ_i π_i g_i)`, `j ≥ 2`.
fn softmax_chain(pi: &[f64], g: &[f64]) -> Vec<f64> {
    let mean = weighted_sum(pi, g);
    (1..pi.len()).map(|j| pi[j] * (g[j] - mean)).collect()
}

/// ψ-gradient at the current horizon from a carried `V_{τ-1}`.
pub fn psi_gradient_at_horizon(
    hmm: &GenerativeHmm,
    history: &MfaHistory,
    prev: Option<&VSummary>,
    o: usize,
) -> PsiGradient {
    let tau = history.horizon();
    let k = hmm.k();
    let la = hmm.log_emission();
    let lb = hmm.log_transition();
    let b = history.pi(tau, tau);
    let log_b = history.log_pi(tau, tau);
    match prev {
        None => {
            let g: Vec<f64> = (0..k).map(|l| hmm.log_mu()[l] + la[l][o] - log_b[l]).collect();
            PsiGradient { current: softmax_chain(&b, &g), revised_prev: None }
        }
        Some(prev) => {
            let a = history.pi(tau, tau - 1);
            let log_a = history.log_pi(tau, tau - 1);
            let log_p = history.log_pi(tau - 1, tau - 1);
            // c(k, l) = ln β^k(l) + ln α^l(o)
            let c = |j: usize, l: usize| lb[j][l] + la[l][o];
            let g_b: Vec<f64> = (0..k)
                .map(|l| (0..k).map(|j| a[j] * c(j, l)).sum::<f64>() - log_b[l])
                .collect();
            let g_a: Vec<f64> = (0..k)
                .map(|j| {
                    prev.values[j] + log_p[j] - log_a[j] + (0..k).map(|l| b[l] * c(j, l)).sum::<f64>()
                })
                .collect();
            PsiGradient {
                current: softmax_chain(&b, &g_b),
                revised_prev: Some(softmax_chain(&a, &g_a)),
            }
        }
    }
}

/// `L_τ` from scratch, plus the terminal summary `V_τ`.
pub fn elbo_recursive(hmm: &GenerativeHmm, history: &MfaHistory, observations: &[usize]) -> Result<(f64, VSummary)> {
    elbo_recursive_with(hmm, history, observations, Recursion::Verified)
}

pub fn elbo_recursive_with(
    hmm: &GenerativeHmm,
    history: &MfaHistory,
    observations: &[usize],
    variant: Recursion,
) -> Result<(f64, VSummary)> {
    check_horizon(history, observations)?;
    check_model(hmm, history, observations)?;
    let mut v = v_initial(hmm, history, observations[0], variant);
    for (i, &o) in observations.iter().enumerate().skip(1) {
        v = v_advance(hmm, history, i + 1, &v, o);
    }
    let tau = history.horizon();
    let value = weighted_sum(&history.pi(tau, tau), &v);
    Ok((value, VSummary { values: v, time: tau }))
}

/// Dense `∇_θ L_τ` (pinned coordinates exactly 0) and `U_τ`, from scratch.
pub fn grad_theta(hmm: &GenerativeHmm, history: &MfaHistory, observations: &[usize]) -> Result<(Vec<f64>, USummary)> {
    grad_theta_with(hmm, history, observations, Recursion::Verified)
}

pub fn grad_theta_with(
    hmm: &GenerativeHmm,
    history: &MfaHistory,
    observations: &[usize],
    variant: Recursion,
) -> Result<(Vec<f64>, USummary)> {
    check_horizon(history, observations)?;
    check_model(hmm, history, observations)?;
    let mut u = u_initial(hmm, observations[0]);
    for (i, &o) in observations.iter().enumerate().skip(1) {
        let t = i + 1;
        u = u_advance(hmm, &history.pi(t, t - 1), &u, o, variant);
    }
    let tau = history.horizon();
    let grad = weighted_rows(&history.pi(tau, tau), &u);
    Ok((grad, USummary { values: u, time: tau }))
}

/// `∇_{ψ_τ} L_τ` over the updatable blocks, from scratch.
pub fn grad_psi(hmm: &GenerativeHmm, history: &MfaHistory, observations: &[usize]) -> Result<PsiGradient> {
    check_horizon(history, observations)?;
    check_model(hmm, history, observations)?;
    let tau = history.horizon();
    let prev = if tau > 1 {
        let mut v = v_initial(hmm, history, observations[0], Recursion::Verified);
        for t in 2..tau {
            v = v_advance(hmm, history, t, &v, observations[t - 1]);
        }
        Some(VSummary { values: v, time: tau - 1 })
    } else {
        None
    };
    Ok(psi_gradient_at_horizon(hmm, history, prev.as_ref(), observations[tau - 1]))
}

/// One recursion step: summaries at `τ-1` (none at the start) to summaries at
/// `τ = history.horizon()`, where `o` is the newest observation.
pub fn streaming_update_summaries(
    prev: Option<(&VSummary, &USummary)>,
    hmm: &GenerativeHmm,
    history: &MfaHistory,
    o: usize,
) -> Result<(VSummary, USummary)> {
    let tau = history.horizon();
    if o >= hmm.m() {
        return Err(Error::Input(format!("observation {} outside 1..={}", o + 1, hmm.m())));
    }
    match prev {
        None if tau != 1 => return Err(Error::Horizon { history: tau, observations: 1 }),
        Some((v, u)) if v.time + 1 != tau || u.time + 1 != tau => {
            return Err(Error::Horizon { history: tau, observations: v.time + 1 })
        }
        _ => {}
    }
    let (pv, pu) = prev.unzip();
    Ok((v_at_horizon(hmm, history, pv, o), u_at_horizon(hmm, history, pu, o)))
}
