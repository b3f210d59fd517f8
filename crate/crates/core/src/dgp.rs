//! Synthetic sequential-embedding data and its Monte-Carlo oracle.
//!
//! Each unit has `S = min(s_max, s_min + Poisson(λ))` segments. Embeddings
//! follow `R_1 ~ N(0, Σ)`, `R_s = tanh(A R_{s-1}) + η_s` with `η_s ~ N(0, Σ)`
//! and `Σ` compound-symmetric. The first `d_w` coordinates drive the
//! treatment `W_s = 1{bᵀR_s^(w) > 0}`, the last `d_u` the confounder
//! `U_s = tanh(C R_s^(u))`, and
//! `Y = Σ τ_s W_s + Σ γ1_sᵀU_s + Σ γ2_sᵀ(U_s ⊙ U_s) + ε`.

pub mod desk;

use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, LatentTruth, Trajectory, UnitLatent};
use crate::error::{Error, Result};
use crate::intervention::{q_unchecked, HistoryKey, InterventionSpec, PTables};
use crate::numerics::{cholesky, sample_bernoulli, sample_poisson, CholFactor, DenseMatrix, Rng};

/// Tables fit on an independent oracle sample share the estimator's type.
pub type OraclePTables = PTables;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub d_r: usize,
    pub d_w: usize,
    pub d_u: usize,
    pub p_u: usize,
    pub s_min: usize,
    pub lambda: f64,
    pub s_max: usize,
    pub sigma_diag: f64,
    pub sigma_offdiag: f64,
    pub a_scale: f64,
    pub tau_base: f64,
    pub tau_decay: f64,
    pub gamma2_scale: f64,
    pub structure_seed: u64,
    pub noise_seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            d_r: 512,
            d_w: 256,
            d_u: 256,
            p_u: 16,
            s_min: 2,
            lambda: 2.5,
            s_max: 5,
            sigma_diag: 1.0,
            sigma_offdiag: 0.2,
            a_scale: 0.8,
            tau_base: 0.6,
            tau_decay: 0.95,
            gamma2_scale: 0.3,
            structure_seed: 20_240_601,
            noise_seed: 1,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_r, self.d_w, self.d_u, self.p_u, self.s_max];
        if dims.contains(&0) {
            return Err(Error::Config("all DGP dimensions must be positive".into()));
        }
        if self.d_w + self.d_u != self.d_r {
            return Err(Error::Config(format!(
                "d_w + d_u = {} must equal d_r = {}",
                self.d_w + self.d_u,
                self.d_r
            )));
        }
        if self.s_min == 0 || self.s_min > self.s_max {
            return Err(Error::Config(format!(
                "need 1 <= s_min <= s_max, got s_min {} and s_max {}",
                self.s_min, self.s_max
            )));
        }
        if self.s_max > 32 {
            return Err(Error::Config("s_max above 32 is not supported".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn tau(&self, s: usize) -> f64 {
        self.tau_base * self.tau_decay.powi(s as i32 - 1)
    }
}

/// Coefficients fixed across replications, a function of `structure_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpStructure {
    /// Diagonal of the autoregressive matrix.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `p_u × d_u`.
    pub c: DenseMatrix,
    pub g1: Vec<Vec<f64>>,
    pub g2: Vec<Vec<f64>>,
    pub gamma1: Vec<Vec<f64>>,
    pub gamma2: Vec<Vec<f64>>,
    /// Treatment effect per segment; public so tests can null it.
    pub tau: Vec<f64>,
    pub chol_sigma: CholFactor,
    d_w: usize,
    s_min: usize,
    s_max: usize,
    lambda: f64,
}

const STRUCTURE_STREAM: u64 = 0x5354_5255;

pub fn build_structure(cfg: &DgpConfig) -> Result<DgpStructure> {
    cfg.validate()?;
    let mut rng = Rng::with_stream(cfg.structure_seed, STRUCTURE_STREAM);
    let d = cfg.d_r as f64;
    let a = (0..cfg.d_r).map(|_| rng.normal(0.0, cfg.a_scale)).collect();
    let b = (0..cfg.d_w).map(|_| rng.normal(0.0, (1.0 / d).sqrt())).collect();
    let c_vals = (0..cfg.p_u * cfg.d_u)
        .map(|_| rng.normal(0.0, (1.0 / d).sqrt()))
        .collect();
    let c = DenseMatrix::from_vec(cfg.p_u, cfg.d_u, c_vals)?;
    let mut g1 = Vec::with_capacity(cfg.s_max);
    let mut g2 = Vec::with_capacity(cfg.s_max);
    for _ in 0..cfg.s_max {
        g1.push((0..cfg.p_u).map(|_| rng.standard_normal()).collect::<Vec<_>>());
        g2.push((0..cfg.p_u).map(|_| rng.standard_normal()).collect::<Vec<_>>());
    }
    let root_p = (cfg.p_u as f64).sqrt();
    let gamma1 = g1
        .iter()
        .map(|g| g.iter().map(|v| v / root_p).collect())
        .collect();
    let gamma2 = g2
        .iter()
        .map(|g| g.iter().map(|v| cfg.gamma2_scale * v / root_p).collect())
        .collect();
    let sigma = DenseMatrix::compound_symmetry(cfg.d_r, cfg.sigma_diag, cfg.sigma_offdiag);
    Ok(DgpStructure {
        a,
        b,
        c,
        g1,
        g2,
        gamma1,
        gamma2,
        tau: (1..=cfg.s_max).map(|s| cfg.tau(s)).collect(),
        chol_sigma: cholesky(&sigma)?,
        d_w: cfg.d_w,
        s_min: cfg.s_min,
        s_max: cfg.s_max,
        lambda: cfg.lambda,
    })
}

/// One simulated unit before packaging.
#[derive(Debug, Clone)]
pub struct SimulatedUnit {
    /// Flattened embeddings, empty when not requested.
    pub r: Vec<f64>,
    pub w: Vec<u8>,
    pub u: Vec<Vec<f64>>,
    pub eps: f64,
    pub y: f64,
}

impl DgpStructure {
    pub fn d_r(&self) -> usize {
        self.a.len()
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    pub fn sample_length(&self, rng: &mut Rng) -> Result<usize> {
        let extra = sample_poisson(self.lambda, rng)? as usize;
        Ok((self.s_min + extra).min(self.s_max))
    }

    /// `1{bᵀR^(w) > 0}`.
    pub fn treatment_of(&self, r: &[f64]) -> u8 {
        let score: f64 = self.b.iter().zip(&r[..self.d_w]).map(|(b, x)| b * x).sum();
        u8::from(score > 0.0)
    }

    /// `tanh(C R^(u))`.
    pub fn confounder_of(&self, r: &[f64]) -> Vec<f64> {
        let ru = &r[self.d_w..];
        (0..self.c.rows())
            .map(|l| crate::numerics::dot(self.c.row(l), ru).tanh())
            .collect()
    }

    /// Outcome from a treatment path, confounder path and noise draw.
    pub fn outcome(&self, w: &[u8], u: &[Vec<f64>], eps: f64) -> f64 {
        let mut y = eps;
        for (s, (wt, ut)) in w.iter().zip(u).enumerate() {
            y += self.tau[s] * f64::from(*wt);
            for (k, uk) in ut.iter().enumerate() {
                y += self.gamma1[s][k] * uk + self.gamma2[s][k] * uk * uk;
            }
        }
        y
    }

    /// Simulates one unit. `assign(s, history, natural_w, rng)` picks the
    /// treatment of segment `s`; the confounder path never depends on it.
    pub fn simulate_unit<F>(&self, rng: &mut Rng, keep_r: bool, mut assign: F) -> Result<SimulatedUnit>
    where
        F: FnMut(usize, HistoryKey, u8, &mut Rng) -> Result<u8>,
    {
        let d = self.d_r();
        let s_len = self.sample_length(rng)?;
        let mut r = Vec::with_capacity(if keep_r { s_len * d } else { 0 });
        let mut w = Vec::with_capacity(s_len);
        let mut u = Vec::with_capacity(s_len);
        let mut prev = vec![0.0; d];
        let mut cur = vec![0.0; d];
        let mut eta = vec![0.0; d];
        let mut history = HistoryKey::EMPTY;
        for s in 1..=s_len {
            let z: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            self.chol_sigma.apply(&z, &mut eta);
            for j in 0..d {
                let drift = if s == 1 { 0.0 } else { (self.a[j] * prev[j]).tanh() };
                cur[j] = drift + eta[j];
            }
            let natural = self.treatment_of(&cur);
            let wt = assign(s, history, natural, rng)?;
            history = history.push(wt);
            w.push(wt);
            u.push(self.confounder_of(&cur));
            if keep_r {
                r.extend_from_slice(&cur);
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        let eps = rng.standard_normal();
        let y = self.outcome(&w, &u, eps);
        Ok(SimulatedUnit { r, w, u, eps, y })
    }
}

/// Draws `n` units from the observational law.
pub fn simulate_dataset(
    cfg: &DgpConfig,
    structure: &DgpStructure,
    n: usize,
    rng: &mut Rng,
) -> Result<(Dataset, LatentTruth)> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot simulate zero units".into()));
    }
    let mut units = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    for _ in 0..n {
        let sim = structure.simulate_unit(rng, true, |_, _, natural, _| Ok(natural))?;
        units.push(Trajectory::from_flat(sim.y, sim.w, sim.r, cfg.d_r));
        latent.push(UnitLatent { u: sim.u, eps: sim.eps });
    }
    Ok((
        Dataset::new(units, cfg.d_r, cfg.s_max)?,
        LatentTruth { units: latent },
    ))
}

/// Saturated treatment-history probabilities from an independent sample.
pub fn fit_oracle_p(
    cfg: &DgpConfig,
    structure: &DgpStructure,
    n_oracle: usize,
    rng: &mut Rng,
) -> Result<OraclePTables> {
    if n_oracle == 0 {
        return Err(Error::InvalidArgument("oracle sample must be non-empty".into()));
    }
    let mut paths = Vec::with_capacity(n_oracle);
    for _ in 0..n_oracle {
        let sim = structure.simulate_unit(rng, false, |_, _, natural, _| Ok(natural))?;
        paths.push(sim.w);
    }
    Ok(PTables::from_paths(cfg.s_max, paths.iter().map(Vec::as_slice)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleValue {
    pub psi: f64,
    pub mc_se: f64,
    pub n: usize,
}

/// Monte-Carlo value of the mean potential outcome when every treatment is
/// drawn from the shifted probability `q_s(δ_s; w̄_{s-1})` built on `ptables`.
pub fn oracle_psi(
    cfg: &DgpConfig,
    structure: &DgpStructure,
    ptables: &OraclePTables,
    delta: &InterventionSpec,
    n_truth: usize,
    rng: &mut Rng,
) -> Result<OracleValue> {
    if n_truth < 2 {
        return Err(Error::InvalidArgument("n_truth must be at least 2".into()));
    }
    delta.check_len(cfg.s_max)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_truth {
        let sim = structure.simulate_unit(rng, false, |s, history, _, rng| {
            let p = ptables.cell(s, history).map(|c| c.p_hat()).ok_or_else(|| {
                Error::UnreachableHistory {
                    segment: s,
                    pattern: history.to_string(),
                }
            })?;
            sample_bernoulli(q_unchecked(delta.at(s), p), rng)
        })?;
        sum += sim.y;
        sum_sq += sim.y * sim.y;
    }
    let n = n_truth as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(OracleValue {
        psi: mean,
        mc_se: (var / n).sqrt(),
        n: n_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DgpConfig {
        DgpConfig {
            d_r: 16,
            d_w: 8,
            d_u: 8,
            p_u: 4,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn defaults_match_published_design() {
        let c = DgpConfig::default();
        assert_eq!((c.d_r, c.d_w, c.d_u, c.p_u), (512, 256, 256, 16));
        assert_eq!((c.s_min, c.s_max), (2, 5));
        assert_eq!(c.lambda, 2.5);
        assert_eq!((c.sigma_diag, c.sigma_offdiag), (1.0, 0.2));
        assert_eq!((c.a_scale, c.tau_base, c.tau_decay, c.gamma2_scale), (0.8, 0.6, 0.95, 0.3));
        assert!((c.tau(3) - 0.6 * 0.95 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.d_w = 7;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.s_min = 6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn structure_is_deterministic() {
        let cfg = small_cfg();
        assert_eq!(build_structure(&cfg).unwrap(), build_structure(&cfg).unwrap());
        let other = DgpConfig {
            structure_seed: 9,
            ..small_cfg()
        };
        assert_ne!(build_structure(&cfg).unwrap().b, build_structure(&other).unwrap().b);
    }

    #[test]
    fn gamma2_is_scaled_g2() {
        let cfg = small_cfg();
        let st = build_structure(&cfg).unwrap();
        let root_p = (cfg.p_u as f64).sqrt();
        for s in 0..cfg.s_max {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scaled: Vec<f64> = st.g2[s].iter().map(|v| v / root_p).collect();
            assert!((norm(&st.gamma2[s]) / norm(&scaled) - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn b_variance_is_one_over_d() {
        let mut total = 0.0;
        let mut count = 0.0;
        for seed in 0..20 {
            let cfg = DgpConfig {
                structure_seed: seed,
                d_r: 512,
                d_w: 256,
                d_u: 256,
                p_u: 1,
                ..DgpConfig::default()
            };
            let st = build_structure(&cfg).unwrap();
            total += st.b.iter().map(|v| v * v).sum::<f64>();
            count += st.b.len() as f64;
        }
        let var = total / count;
        assert!(var > 1.0 / 512.0 / 1.5 && var < 1.5 / 512.0, "var {var}");
    }

    #[test]
    fn simulated_lengths_treatments_and_outcomes() {
        let cfg = small_cfg();
        let st = build_structure(&cfg).unwrap();
        let mut rng = Rng::new(4);
        let (ds, latent) = simulate_dataset(&cfg, &st, 400, &mut rng).unwrap();
        for (unit, lat) in ds.units().iter().zip(&latent.units) {
            assert!((2..=5).contains(&unit.s_len()));
            for s in 1..=unit.s_len() {
                assert_eq!(st.treatment_of(unit.segment(s)), unit.w[s - 1]);
                assert_eq!(st.confounder_of(unit.segment(s)), lat.u[s - 1]);
            }
            assert!((st.outcome(&unit.w, &lat.u, lat.eps) - unit.y).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_rate_gives_minimum_length() {
        let cfg = DgpConfig {
            lambda: 0.0,
            ..small_cfg()
        };
        let st = build_structure(&cfg).unwrap();
        let mut rng = Rng::new(5);
        let (ds, _) = simulate_dataset(&cfg, &st, 100, &mut rng).unwrap();
        assert!(ds.units().iter().all(|u| u.s_len() == 2));
    }

    #[test]
    fn treatment_and_confounder_blocks_are_separable() {
        let cfg = small_cfg();
        let st = build_structure(&cfg).unwrap();
        let mut rng = Rng::new(6);
        for _ in 0..200 {
            let r: Vec<f64> = (0..cfg.d_r).map(|_| rng.standard_normal()).collect();
            let mut rw = r.clone();
            for v in &mut rw[..cfg.d_w] {
                *v = rng.standard_normal();
            }
            assert_eq!(st.confounder_of(&r), st.confounder_of(&rw));
            let mut ru = r.clone();
            for v in &mut ru[cfg.d_w..] {
                *v = rng.standard_normal();
            }
            assert_eq!(st.treatment_of(&r), st.treatment_of(&ru));
        }
    }

    #[test]
    fn length_truncation_matches_poisson_tail() {
        let st = build_structure(&small_cfg()).unwrap();
        let mut rng = Rng::new(7);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| st.sample_length(&mut rng).unwrap() == 5)
            .count() as f64;
        let lambda: f64 = 2.5;
        let below: f64 = (0..3)
            .map(|k| (-lambda).exp() * lambda.powi(k) / (1..=k).product::<i32>().max(1) as f64)
            .sum();
        let p = 1.0 - below;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits / n as f64 - p).abs() <= 3.0 * se, "{} vs {p}", hits / n as f64);
    }

    #[test]
    fn oracle_tables_are_deterministic() {
        let cfg = small_cfg();
        let st = build_structure(&cfg).unwrap();
        let a = fit_oracle_p(&cfg, &st, 500, &mut Rng::new(8)).unwrap();
        let b = fit_oracle_p(&cfg, &st, 500, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn always_treated_first_segment() {
        let t = PTables::from_paths(2, [&[1u8, 0][..], &[1u8][..], &[1u8, 1][..]]);
        assert_eq!(t.p(1, HistoryKey::EMPTY).unwrap(), 1.0);
    }

    #[test]
    fn missing_history_is_unreachable_error() {
        let cfg = small_cfg();
        let st = build_structure(&cfg).unwrap();
        let tables = PTables::from_paths(cfg.s_max, [&[1u8, 1][..]]);
        let delta = InterventionSpec::uniform(1.0, cfg.s_max).unwrap();
        let err = oracle_psi(&cfg, &st, &tables, &delta, 50, &mut Rng::new(1)).unwrap_err();
        assert!(matches!(err, Error::UnreachableHistory { .. }), "{err}");
    }

    #[test]
    fn observed_regime_matches_simulated_mean_without_confounding() {
        // Independent treatment and confounder blocks.
        let cfg = DgpConfig { sigma_offdiag: 0.0, ..small_cfg() };
        let st = build_structure(&cfg).unwrap();
        let tables = fit_oracle_p(&cfg, &st, 20_000, &mut Rng::new(10)).unwrap();
        let delta = InterventionSpec::uniform(1.0, cfg.s_max).unwrap();
        let truth = oracle_psi(&cfg, &st, &tables, &delta, 20_000, &mut Rng::new(11)).unwrap();
        let (ds, _) = simulate_dataset(&cfg, &st, 20_000, &mut Rng::new(12)).unwrap();
        let ys: Vec<f64> = ds.units().iter().map(|u| u.y).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (ys.len() as f64 - 1.0);
        let se = (truth.mc_se.powi(2) + var / ys.len() as f64).sqrt();
        assert!((truth.psi - mean).abs() <= 3.0 * se, "{} vs {mean} (se {se})", truth.psi);
    }

    #[test]
    fn null_effect_makes_psi_flat_in_delta() {
        let cfg = small_cfg();
        let mut st = build_structure(&cfg).unwrap();
        st.tau.iter_mut().for_each(|t| *t = 0.0);
        let tables = fit_oracle_p(&cfg, &st, 5_000, &mut Rng::new(13)).unwrap();
        let lo = oracle_psi(
            &cfg,
            &st,
            &tables,
            &InterventionSpec::uniform(0.5, 5).unwrap(),
            10_000,
            &mut Rng::new(14),
        )
        .unwrap();
        let hi = oracle_psi(
            &cfg,
            &st,
            &tables,
            &InterventionSpec::uniform(2.0, 5).unwrap(),
            10_000,
            &mut Rng::new(15),
        )
        .unwrap();
        let se = (lo.mc_se.powi(2) + hi.mc_se.powi(2)).sqrt();
        assert!((lo.psi - hi.psi).abs() <= 3.0 * se);
    }

    #[test]
    fn stronger_intervention_raises_psi() {
        let cfg = small_cfg();
        let st = build_structure(&cfg).unwrap();
        let tables = fit_oracle_p(&cfg, &st, 5_000, &mut Rng::new(16)).unwrap();
        let run = |d: f64| {
            oracle_psi(
                &cfg,
                &st,
                &tables,
                &InterventionSpec::uniform(d, 5).unwrap(),
                10_000,
                &mut Rng::new(17),
            )
            .unwrap()
        };
        let (lo, hi) = (run(0.5), run(2.0));
        let se = (lo.mc_se.powi(2) + hi.mc_se.powi(2)).sqrt();
        assert!(hi.psi - lo.psi > 3.0 * se, "{} vs {}", hi.psi, lo.psi);
    }
}
