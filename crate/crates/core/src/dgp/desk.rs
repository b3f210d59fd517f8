//! Small discrete process whose nuisances and estimand are exactly
//! computable by enumeration.
//!
//! Embedding of segment `s` is `r_s = (W_s, V_s, U_s, V'_s)` with binary
//! confounder `U_s`, noise bits `V_s, V'_s` and treatment `W_s = r_s[0]`.
//! `U` is a two-state Markov chain and
//! `P(W_s = 1 | U_s, W_{s-1}) = logistic(α + β U_s + κ W_{s-1})`.
//! The outcome is `Y = Σ τ_s W_s + Σ (γ_s + ζ_s W_s) U_s + ε`.
//! Lengths are drawn independently from `length_pmf`.

use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::estimator::UnitNuisance;
use crate::intervention::{q_unchecked, HistoryKey, InterventionSpec};
use crate::numerics::{sample_bernoulli, Rng};

pub const DESK_D_R: usize = 4;
/// Coordinate of the embedding that carries the confounder.
pub const DESK_CONFOUNDER_COORD: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskConfig {
    /// `P(S = s)` for `s = 1..=s_max`.
    pub length_pmf: Vec<f64>,
    pub u_first: f64,
    /// `P(U_s = 1 | U_{s-1} = 0)`.
    pub u_turn_on: f64,
    /// `P(U_s = 1 | U_{s-1} = 1)`.
    pub u_stay_on: f64,
    pub w_intercept: f64,
    pub w_confounder: f64,
    pub w_carry: f64,
    pub tau: Vec<f64>,
    pub gamma: Vec<f64>,
    pub interaction: Vec<f64>,
    pub noise_sd: f64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            length_pmf: vec![0.2, 0.3, 0.5],
            u_first: 0.5,
            u_turn_on: 0.25,
            u_stay_on: 0.75,
            w_intercept: -0.4,
            w_confounder: 1.2,
            w_carry: 0.6,
            tau: vec![1.0, 0.8, 0.6],
            gamma: vec![1.0, -0.5, 0.8],
            interaction: vec![0.5, 0.5, 0.5],
            noise_sd: 1.0,
        }
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bern(p: f64, x: u8) -> f64 {
    if x == 1 {
        p
    } else {
        1.0 - p
    }
}

/// All binary paths of length `len`, segment 1 first.
fn paths(len: usize) -> impl Iterator<Item = Vec<u8>> {
    (0..1u32 << len).map(move |bits| {
        (0..len)
            .map(|k| ((bits >> (len - 1 - k)) & 1) as u8)
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskInstance {
    cfg: DeskConfig,
}

impl DeskInstance {
    pub fn new(cfg: DeskConfig) -> Result<Self> {
        let s_max = cfg.length_pmf.len();
        if s_max == 0 || s_max > 8 {
            return Err(Error::Config("desk instance needs 1..=8 segment positions".into()));
        }
        let total: f64 = cfg.length_pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 || cfg.length_pmf.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!("length_pmf must be a distribution, sums to {total}")));
        }
        for (name, v) in [("tau", &cfg.tau), ("gamma", &cfg.gamma), ("interaction", &cfg.interaction)] {
            if v.len() != s_max {
                return Err(Error::Config(format!("{name} needs {s_max} entries")));
            }
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &DeskConfig {
        &self.cfg
    }

    pub fn s_max(&self) -> usize {
        self.cfg.length_pmf.len()
    }

    fn length_tail(&self, s: usize) -> f64 {
        self.cfg.length_pmf[s - 1..].iter().sum()
    }

    fn u_prob(&self, prev: Option<u8>) -> f64 {
        match prev {
            None => self.cfg.u_first,
            Some(0) => self.cfg.u_turn_on,
            Some(_) => self.cfg.u_stay_on,
        }
    }

    fn u_path_prob(&self, u: &[u8]) -> f64 {
        u.iter()
            .enumerate()
            .map(|(t, &ut)| bern(self.u_prob(t.checked_sub(1).map(|p| u[p])), ut))
            .product()
    }

    /// True propensity `P(W_s = 1 | U_s, W_{s-1})`.
    pub fn pi(&self, u_s: u8, w_prev: u8) -> f64 {
        logistic(
            self.cfg.w_intercept
                + self.cfg.w_confounder * f64::from(u_s)
                + self.cfg.w_carry * f64::from(w_prev),
        )
    }

    fn pi_at(&self, s: usize, w: &[u8], u: &[u8]) -> f64 {
        let prev = if s == 1 { 0 } else { w[s - 2] };
        self.pi(u[s - 1], prev)
    }

    /// `P(W̄_{s-1} = w̄ | Ū_{s-1} = ū)` for the first `s - 1` entries.
    fn w_history_prob(&self, w: &[u8], u: &[u8], upto: usize) -> f64 {
        (1..=upto).map(|t| bern(self.pi_at(t, w, u), w[t - 1])).product()
    }

    /// True `p_s(w̄_{s-1}) = P(W_s = 1 | W̄_{s-1} = w̄)`.
    pub fn p(&self, s: usize, history: &[u8]) -> f64 {
        debug_assert_eq!(history.len(), s - 1);
        let mut num = 0.0;
        let mut den = 0.0;
        let mut w = history.to_vec();
        w.push(0);
        for u in paths(s) {
            let weight = self.u_path_prob(&u) * self.w_history_prob(&w, &u, s - 1);
            num += weight * self.pi_at(s, &w, &u);
            den += weight;
        }
        num / den
    }

    /// `E[Y | W̄, Ū, S]` for a full path.
    pub fn mu(&self, w: &[u8], u: &[u8]) -> f64 {
        w.iter()
            .zip(u)
            .enumerate()
            .map(|(t, (&wt, &ut))| {
                let (wt, ut) = (f64::from(wt), f64::from(ut));
                self.cfg.tau[t] * wt + (self.cfg.gamma[t] + self.cfg.interaction[t] * wt) * ut
            })
            .sum()
    }

    /// True `m_s(H_s, w_s)` for a unit of length `s_len`; `w` and `u` hold
    /// the first `s` entries with `w[s-1]` the evaluated treatment.
    pub fn m(&self, s: usize, s_len: usize, w: &[u8], u: &[u8], delta: &InterventionSpec) -> f64 {
        debug_assert!(w.len() == s && u.len() == s && s <= s_len);
        if s == s_len {
            return self.mu(w, u);
        }
        let p_next = self.p(s + 1, w);
        let q = q_unchecked(delta.at(s + 1), p_next);
        let pu = self.u_prob(Some(u[s - 1]));
        let mut total = 0.0;
        for un in [0u8, 1] {
            let mut u_next = u.to_vec();
            u_next.push(un);
            for wn in [0u8, 1] {
                let mut w_next = w.to_vec();
                w_next.push(wn);
                total += bern(pu, un)
                    * bern(q, wn)
                    * self.m(s + 1, s_len, &w_next, &u_next, delta);
            }
        }
        total
    }

    fn omega_path(&self, w: &[u8], u: &[u8], upto: usize, delta: &InterventionSpec) -> f64 {
        (1..=upto)
            .map(|t| {
                crate::estimator::omega_weight(
                    w[t - 1],
                    delta.at(t),
                    self.p(t, &w[..t - 1]),
                    self.pi_at(t, w, u),
                )
            })
            .product()
    }

    /// True `t̃m_s(w̄_{s-1}, w)` among units with `S ≥ s`.
    pub fn tilde_m(&self, s: usize, history: &[u8], w_s: u8, delta: &InterventionSpec) -> f64 {
        let reach = self.length_tail(s);
        let mut w = history.to_vec();
        w.push(w_s);
        let mut num = 0.0;
        let mut den = 0.0;
        for u in paths(s) {
            let weight = self.u_path_prob(&u) * self.w_history_prob(&w, &u, s - 1);
            den += weight;
            let omega = self.omega_path(&w, &u, s - 1, delta);
            let m_avg: f64 = (s..=self.s_max())
                .map(|len| self.cfg.length_pmf[len - 1] / reach * self.m(s, len, &w, &u, delta))
                .sum();
            num += weight * omega * m_avg;
        }
        num / den
    }

    /// Exact estimand by enumeration of lengths, confounder paths and
    /// intervened treatment paths.
    pub fn psi(&self, delta: &InterventionSpec) -> Result<f64> {
        delta.check_len(self.s_max())?;
        let mut total = 0.0;
        for len in 1..=self.s_max() {
            let pl = self.cfg.length_pmf[len - 1];
            if pl == 0.0 {
                continue;
            }
            for u in paths(len) {
                let pu = self.u_path_prob(&u);
                for w in paths(len) {
                    let pw: f64 = (1..=len)
                        .map(|t| bern(q_unchecked(delta.at(t), self.p(t, &w[..t - 1])), w[t - 1]))
                        .product();
                    total += pl * pu * pw * self.mu(&w, &u);
                }
            }
        }
        Ok(total)
    }

    /// Monte-Carlo counterpart of [`DeskInstance::psi`]; returns mean and
    /// standard error.
    pub fn psi_monte_carlo(&self, delta: &InterventionSpec, n: usize, rng: &mut Rng) -> Result<(f64, f64)> {
        delta.check_len(self.s_max())?;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let (len, u) = self.draw_length_and_confounders(rng)?;
            let mut w = Vec::with_capacity(len);
            for t in 1..=len {
                let q = q_unchecked(delta.at(t), self.p(t, &w));
                w.push(sample_bernoulli(q, rng)?);
            }
            let y = self.mu(&w, &u) + self.cfg.noise_sd * rng.standard_normal();
            sum += y;
            sum_sq += y * y;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = (sum_sq - nf * mean * mean) / (nf - 1.0);
        Ok((mean, (var / nf).sqrt()))
    }

    fn draw_length_and_confounders(&self, rng: &mut Rng) -> Result<(usize, Vec<u8>)> {
        let draw = rng.uniform();
        let mut acc = 0.0;
        let mut len = self.s_max();
        for (i, p) in self.cfg.length_pmf.iter().enumerate() {
            acc += p;
            if draw < acc {
                len = i + 1;
                break;
            }
        }
        let mut u = Vec::with_capacity(len);
        for t in 0..len {
            let prev = t.checked_sub(1).map(|p| u[p]);
            u.push(sample_bernoulli(self.u_prob(prev), rng)?);
        }
        Ok((len, u))
    }

    /// Draws `n` observational units.
    pub fn simulate(&self, n: usize, rng: &mut Rng) -> Result<Dataset> {
        let mut units = Vec::with_capacity(n);
        for _ in 0..n {
            let (len, u) = self.draw_length_and_confounders(rng)?;
            let mut w = Vec::with_capacity(len);
            let mut r = Vec::with_capacity(len * DESK_D_R);
            for t in 0..len {
                let prev = if t == 0 { 0 } else { w[t - 1] };
                let wt = sample_bernoulli(self.pi(u[t], prev), rng)?;
                w.push(wt);
                let v1 = sample_bernoulli(0.5, rng)?;
                let v2 = sample_bernoulli(0.5, rng)?;
                r.extend([f64::from(wt), f64::from(v1), f64::from(u[t]), f64::from(v2)]);
            }
            let y = self.mu(&w, &u) + self.cfg.noise_sd * rng.standard_normal();
            units.push(Trajectory::from_flat(y, w, r, DESK_D_R));
        }
        Dataset::new(units, DESK_D_R, self.s_max())
    }

    /// Confounder path read back from a desk trajectory.
    pub fn confounders_of(traj: &Trajectory) -> Vec<u8> {
        traj.embeddings()
            .map(|r| u8::from(r[DESK_CONFOUNDER_COORD] > 0.5))
            .collect()
    }

    /// Exact nuisance values for one unit.
    pub fn oracle_nuisance(&self, traj: &Trajectory, delta: &InterventionSpec) -> UnitNuisance {
        let u = Self::confounders_of(traj);
        let w = &traj.w;
        let len = traj.s_len();
        let mut nu = UnitNuisance::with_len(len);
        for s in 1..=len {
            let hist = &w[..s - 1];
            nu.p[s - 1] = self.p(s, hist);
            nu.pi[s - 1] = self.pi_at(s, w, &u);
            for wv in [0u8, 1] {
                let mut ws = hist.to_vec();
                ws.push(wv);
                let m = self.m(s, len, &ws, &u[..s], delta);
                let tm = self.tilde_m(s, hist, wv, delta);
                if wv == 0 {
                    nu.m0[s - 1] = m;
                    nu.tm0[s - 1] = tm;
                } else {
                    nu.m1[s - 1] = m;
                    nu.tm1[s - 1] = tm;
                }
            }
        }
        nu
    }

    /// Exact `p_s` for every history, as saturated-table keys.
    pub fn p_table(&self) -> Vec<(usize, HistoryKey, f64)> {
        let mut out = Vec::new();
        for s in 1..=self.s_max() {
            for h in paths(s - 1) {
                out.push((s, HistoryKey::of(&h), self.p(s, &h)));
            }
        }
        out
    }
}
