//! MAP estimation from selected measurements and Monte-Carlo error sweeps.

use std::collections::{BTreeMap, HashMap};

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fim::AtomId;
use crate::params::{GaussianPrior, MotionBlock, ParamVector};
use crate::scenario::{build_pools, Scenario, ScenarioPools};
use crate::select::{derive_seed, run_selector, Algorithm, CandidatePool, JointSelection, SelectionResult};
use crate::sensors::{synthesize, Measurement, MeasurementModel, SensorType};

pub const MAX_ITERATIONS: usize = 100;
pub const STEP_TOLERANCE: f64 = 1e-9;
pub const LAMBDA_INITIAL: f64 = 1e-3;
pub const LAMBDA_MIN: f64 = 1e-12;
pub const LAMBDA_MAX: f64 = 1e8;
/// Largest tolerated share of non-converged trials in a sweep cell.
pub const NONCONVERGED_LIMIT: f64 = 0.05;

/// Result of [`map_estimate`].
#[derive(Debug, Clone)]
pub struct MapEstimate {
    pub theta_hat: ParamVector,
    pub converged: bool,
    /// Number of linearizations performed.
    pub iterations: usize,
    pub objective: f64,
    /// Gauss-Newton Hessian at `theta_hat`: prior information plus
    /// `Σ JᵀΣ⁻¹J` of every measurement.
    pub information: DMatrix<f64>,
}

/// A measurement model with constant Jacobian: `μ(θ) = offset + Jθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub jacobian: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise: DMatrix<f64>,
}

impl MeasurementModel for LinearModel {
    fn dim(&self) -> usize {
        self.jacobian.nrows()
    }

    fn mean(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        Ok(&self.offset + &self.jacobian * theta.values())
    }

    fn jacobian(&self, _theta: &ParamVector) -> Result<DMatrix<f64>> {
        Ok(self.jacobian.clone())
    }

    fn noise_covariance(&self) -> DMatrix<f64> {
        self.noise.clone()
    }
}

// Whitening factors L⁻¹ for each measurement noise, so that ‖L⁻¹r‖² = rᵀΣ⁻¹r.
struct Problem<'a, M> {
    measurements: &'a [Measurement<M>],
    whiten: Vec<DMatrix<f64>>,
    prior_mean: &'a DVector<f64>,
    q0: DMatrix<f64>,
}

impl<'a, M: MeasurementModel> Problem<'a, M> {
    fn new(measurements: &'a [Measurement<M>], prior: &'a GaussianPrior) -> Result<Self> {
        let whiten = measurements
            .iter()
            .map(|m| {
                let chol = m
                    .spec
                    .noise_covariance()
                    .cholesky()
                    .ok_or(Error::NotPositiveDefinite("measurement noise covariance"))?;
                let l = chol.unpack();
                l.solve_lower_triangular(&DMatrix::identity(m.spec.dim(), m.spec.dim()))
                    .ok_or(Error::NotPositiveDefinite("measurement noise covariance"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Problem { measurements, whiten, prior_mean: prior.mean().values(), q0: crate::params::prior_information(prior)? })
    }

    fn objective(&self, theta: &ParamVector) -> Result<f64> {
        let d = theta.values() - self.prior_mean;
        let mut obj = 0.5 * d.dot(&(&self.q0 * &d));
        for (m, w) in self.measurements.iter().zip(&self.whiten) {
            let r = w * (&m.value - m.spec.mean(theta)?);
            obj += 0.5 * r.norm_squared();
        }
        Ok(obj)
    }

    // Gauss-Newton Hessian and gradient of the objective.
    fn linearize(&self, theta: &ParamVector) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let d = theta.values() - self.prior_mean;
        let mut h = self.q0.clone();
        let mut g = &self.q0 * &d;
        for (m, w) in self.measurements.iter().zip(&self.whiten) {
            let wj = w * m.spec.jacobian(theta)?;
            let r = w * (&m.value - m.spec.mean(theta)?);
            h.gemm_tr(1.0, &wj, &wj, 1.0);
            g.gemv_tr(-1.0, &wj, &r, 1.0);
        }
        Ok((h, g))
    }
}

struct Run {
    theta: ParamVector,
    objective: f64,
    converged: bool,
    iterations: usize,
}

fn levenberg_marquardt<M: MeasurementModel>(problem: &Problem<'_, M>, init: ParamVector) -> Result<Run> {
    let p = init.values().len();
    let mut theta = init;
    let mut objective = problem.objective(&theta)?;
    let mut lambda = LAMBDA_INITIAL;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (h, g) = problem.linearize(&theta)?;
        loop {
            let damped = &h + DMatrix::identity(p, p) * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    return Ok(Run { theta, objective, converged: false, iterations });
                }
                continue;
            };
            let step = -chol.solve(&g);
            let small = step.norm() < STEP_TOLERANCE * (1.0 + theta.values().norm());
            let candidate = theta.with_values(theta.values() + &step)?;
            match problem.objective(&candidate) {
                Ok(obj) if obj.is_finite() && obj <= objective => {
                    debug_assert!(obj <= objective);
                    theta = candidate;
                    objective = obj;
                    lambda = (lambda / 10.0).max(LAMBDA_MIN);
                    if small {
                        return Ok(Run { theta, objective, converged: true, iterations });
                    }
                    break;
                }
                Ok(_) | Err(_) if small => {
                    return Ok(Run { theta, objective, converged: true, iterations });
                }
                Err(e) if !e.is_geometry() => return Err(e),
                _ => {
                    lambda *= 10.0;
                    if lambda > LAMBDA_MAX {
                        return Ok(Run { theta, objective, converged: false, iterations });
                    }
                }
            }
        }
    }
    Ok(Run { theta, objective, converged: false, iterations })
}

/// Damped Gauss-Newton minimization of the negative log posterior
/// `½‖θ−μ0‖²_{Σ0⁻¹} + Σ_k ½‖y_k−μ_k(θ)‖²_{Σ_k⁻¹}` starting at `init`.
///
/// If the first run does not converge, one restart is made at
/// `μ0 + ½·sqrt(diag Σ0)` and the better of the two runs is returned.
pub fn map_estimate<M: MeasurementModel>(
    measurements: &[Measurement<M>],
    prior: &GaussianPrior,
    init: &ParamVector,
) -> Result<MapEstimate> {
    let problem = Problem::new(measurements, prior)?;
    let mut run = levenberg_marquardt(&problem, init.clone())?;
    if !run.converged {
        let offset = prior.covariance().diagonal().map(|v| 0.5 * v.sqrt());
        let restart_init = prior.mean().with_values(prior.mean().values() + offset)?;
        match levenberg_marquardt(&problem, restart_init) {
            Ok(second) if second.converged || second.objective < run.objective => {
                let iterations = run.iterations + second.iterations;
                run = Run { iterations, ..second };
            }
            Ok(_) => {}
            Err(e) if e.is_geometry() => debug!("restart point has invalid geometry: {e}"),
            Err(e) => return Err(e),
        }
    }
    let (information, _) = problem.linearize(&run.theta)?;
    Ok(MapEstimate {
        theta_hat: run.theta,
        converged: run.converged,
        iterations: run.iterations,
        objective: run.objective,
        information,
    })
}

/// Mean estimation errors of one selector over a budget sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorCurve {
    pub selector: Algorithm,
    pub budgets: Vec<usize>,
    /// Root mean square of the position error norm (m).
    pub rmse_pos: Vec<f64>,
    /// `sqrt(mean(eᵀ Q0 e) / p)` over the full parameter vector.
    pub weighted_err: Vec<f64>,
    pub nonconverged: Vec<usize>,
    pub trials: usize,
}

/// Selected-measurement counts by sensor type, summed over trials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MixRow {
    pub selector: Algorithm,
    pub budget: usize,
    pub sensor_type: SensorType,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub curves: Vec<ErrorCurve>,
    pub mix: Vec<MixRow>,
}

impl SweepReport {
    pub fn curve(&self, selector: Algorithm) -> Option<&ErrorCurve> {
        self.curves.iter().find(|c| c.selector == selector)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub budgets: Vec<usize>,
    pub trials: usize,
    pub selectors: Vec<Algorithm>,
    pub seed: u64,
}

// Per-trial, per-(selector, budget) outcome.
#[derive(Debug, Clone, Copy)]
struct TrialError {
    pos_sq: f64,
    weighted_sq: f64,
    converged: bool,
}

/// Draw a sample from the prior using the given generator.
pub fn sample_prior(prior: &GaussianPrior, rng: &mut ChaCha8Rng) -> Result<ParamVector> {
    let l = prior
        .covariance()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("prior covariance"))?
        .unpack();
    let z = DVector::from_fn(l.nrows(), |_, _| StandardNormal.sample(rng));
    prior.mean().with_values(prior.mean().values() + l * z)
}

/// Build the scenario's pools and run [`sweep_pools`].
pub fn monte_carlo_sweep(
    scenario: &Scenario,
    budgets: &[usize],
    trials: usize,
    selectors: &[Algorithm],
    seed: u64,
) -> Result<SweepReport> {
    let pools = build_pools(scenario)?;
    sweep_pools(&pools, &SweepConfig { budgets: budgets.to_vec(), trials, selectors: selectors.to_vec(), seed })
}

/// Monte-Carlo estimation error versus budget for each selector.
///
/// Every trial draws a true parameter from the prior, synthesizes all
/// candidate measurements, and estimates from each selector's subset.
/// Deterministic selectors linearize at the prior mean, so their picks are
/// computed once per budget and shared by all trials. The random selector is
/// reseeded for every (trial, budget).
pub fn sweep_pools(pools: &ScenarioPools, cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.trials == 0 {
        return Err(Error::Config("a sweep needs at least one trial".into()));
    }
    let mut fixed: HashMap<(Algorithm, usize), JointSelection> = HashMap::new();
    for &sel in cfg.selectors.iter().filter(|s| **s != Algorithm::Random) {
        for &b in &cfg.budgets {
            fixed.insert((sel, b), run_selector(sel, &pools.with_budget(b), &pools.q0, 0)?);
        }
    }

    let specs = pools.candidate_specs();
    let ids: Vec<AtomId> = pools.pools.iter().flat_map(|p| p.atoms().iter().map(|a| a.id())).collect();
    let p = pools.layout.dim() as f64;
    let pos = MotionBlock::Position.range();

    let per_trial: Vec<Result<(Vec<TrialError>, Vec<usize>)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let t = trial as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[t, 0]));
            let theta_true = sample_prior(&pools.prior, &mut rng)?;
            let synthesized = synthesize(&theta_true, &specs, derive_seed(cfg.seed, &[t, 1]))?;
            let by_id: HashMap<AtomId, &Measurement> = ids.iter().copied().zip(&synthesized).collect();

            let mut errors = Vec::with_capacity(cfg.selectors.len() * cfg.budgets.len());
            let mut counts = Vec::with_capacity(errors.capacity() * SensorType::ALL.len());
            for &sel in &cfg.selectors {
                for &b in &cfg.budgets {
                    let random;
                    let selection = if sel == Algorithm::Random {
                        let seed = derive_seed(cfg.seed, &[t, 2, b as u64]);
                        random = run_selector(sel, &pools.with_budget(b), &pools.q0, seed)?;
                        &random
                    } else {
                        &fixed[&(sel, b)]
                    };
                    // canonical order, so equal sets give bitwise-equal estimates
                    let mut chosen_ids: Vec<AtomId> = selection.chosen().collect();
                    chosen_ids.sort_unstable();
                    let chosen: Vec<Measurement> = chosen_ids.iter().map(|id| by_id[id].clone()).collect();
                    let est = map_estimate(&chosen, &pools.prior, pools.prior.mean())?;
                    let e = est.theta_hat.values() - theta_true.values();
                    errors.push(TrialError {
                        pos_sq: e.rows(pos.start, pos.len()).norm_squared(),
                        weighted_sq: e.dot(&(&pools.q0 * &e)) / p,
                        converged: est.converged,
                    });
                    let mix = selection_mix_report(&selection.per_agent, &pools.pools);
                    counts.extend(SensorType::ALL.iter().map(|&st| mix.count(st)));
                }
            }
            Ok((errors, counts))
        })
        .collect();
    let per_trial = per_trial.into_iter().collect::<Result<Vec<_>>>()?;

    let nb = cfg.budgets.len();
    let mut curves = Vec::with_capacity(cfg.selectors.len());
    let mut mix = Vec::new();
    for (si, &sel) in cfg.selectors.iter().enumerate() {
        let mut curve = ErrorCurve {
            selector: sel,
            budgets: cfg.budgets.clone(),
            rmse_pos: Vec::with_capacity(nb),
            weighted_err: Vec::with_capacity(nb),
            nonconverged: Vec::with_capacity(nb),
            trials: cfg.trials,
        };
        for (bi, &b) in cfg.budgets.iter().enumerate() {
            let cell = si * nb + bi;
            let (mut pos_sum, mut w_sum, mut n_ok, mut n_bad) = (0.0, 0.0, 0usize, 0usize);
            for (errors, _) in &per_trial {
                let e = errors[cell];
                if e.converged {
                    pos_sum += e.pos_sq;
                    w_sum += e.weighted_sq;
                    n_ok += 1;
                } else {
                    n_bad += 1;
                }
            }
            if n_bad > 0 {
                warn!("{sel} at budget {b}: {n_bad} of {} trials did not converge", cfg.trials);
            }
            if n_bad as f64 >= NONCONVERGED_LIMIT * cfg.trials as f64 {
                return Err(Error::Convergence(format!(
                    "{sel} at budget {b}: {n_bad} of {} trials did not converge",
                    cfg.trials
                )));
            }
            curve.rmse_pos.push((pos_sum / n_ok as f64).sqrt());
            curve.weighted_err.push((w_sum / n_ok as f64).sqrt());
            curve.nonconverged.push(n_bad);
            for (ti, &st) in SensorType::ALL.iter().enumerate() {
                let count = per_trial.iter().map(|(_, c)| c[cell * SensorType::ALL.len() + ti]).sum();
                mix.push(MixRow { selector: sel, budget: b, sensor_type: st, count });
            }
        }
        curves.push(curve);
    }
    Ok(SweepReport { curves, mix })
}

/// Chosen-measurement counts per agent and sensor type.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MixReport {
    pub counts: BTreeMap<(String, SensorType), usize>,
}

impl MixReport {
    pub fn count(&self, sensor_type: SensorType) -> usize {
        self.counts.iter().filter(|((_, st), _)| *st == sensor_type).map(|(_, c)| c).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Share of all chosen measurements that came from `sensor_type`;
    /// `None` when nothing was chosen.
    pub fn fraction(&self, sensor_type: SensorType) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.count(sensor_type) as f64 / total as f64)
    }
}

/// Count chosen measurements by agent and sensor type. Atoms without a
/// recorded source are not counted.
pub fn selection_mix_report(results: &[SelectionResult], pools: &[CandidatePool]) -> MixReport {
    let mut report = MixReport::default();
    for res in results {
        for id in &res.chosen {
            let source = pools.iter().find_map(|p| p.get(*id)).and_then(|a| a.source());
            if let Some(st) = source {
                *report.counts.entry((res.agent_id.clone(), st)).or_default() += 1;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fim::InfoAtom;
    use crate::params::ParamLayout;
    use crate::scenario::{builtin_scenario, BuiltinExample};
    use crate::select::greedy_select;
    use crate::sensors::synthesize_scaled;
    use rand::Rng;
    use std::sync::Arc;

    fn motion_prior(sigma: f64) -> GaussianPrior {
        let layout = Arc::new(ParamLayout::motion_only());
        let mean = ParamVector::new(layout, DVector::from_fn(9, |i, _| i as f64 * 0.1)).unwrap();
        GaussianPrior::diagonal(mean, &[sigma * sigma; 9]).unwrap()
    }

    #[test]
    fn no_measurements_returns_prior_mean() {
        let prior = motion_prior(2.0);
        let est = map_estimate::<LinearModel>(&[], &prior, prior.mean()).unwrap();
        assert!(est.converged);
        assert_eq!(est.theta_hat.values(), prior.mean().values());
        assert_eq!(est.objective, 0.0);
    }

    #[test]
    fn linear_gaussian_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = motion_prior(1.5);
        let q0 = crate::params::prior_information(&prior).unwrap();
        let mut measurements = Vec::new();
        let mut h = q0.clone();
        let mut b = &q0 * prior.mean().values();
        for _ in 0..6 {
            let r = rng.random_range(1..=3);
            let j = DMatrix::from_fn(r, 9, |_, _| rng.random_range(-1.0..1.0));
            let a = DMatrix::from_fn(r, r, |_, _| rng.random_range(-0.5..0.5));
            let noise = &a * a.transpose() + DMatrix::identity(r, r) * 0.1;
            let offset = DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(r, |_, _| rng.random_range(-3.0..3.0));
            let ninv = noise.clone().try_inverse().unwrap();
            h += j.transpose() * &ninv * &j;
            b += j.transpose() * &ninv * (&y - &offset);
            measurements.push(Measurement { spec: LinearModel { jacobian: j, offset, noise }, value: y });
        }
        let closed = h.clone().cholesky().unwrap().solve(&b);
        let est = map_estimate(&measurements, &prior, prior.mean()).unwrap();
        assert!(est.converged);
        assert!((est.theta_hat.values() - &closed).amax() < 1e-8);
        assert!((&est.information - &h).amax() < 1e-9 * h.amax());
    }

    #[test]
    fn camera_zero_noise_at_truth_is_stationary() {
        let sc = builtin_scenario(BuiltinExample::Example1);
        let pools = build_pools(&sc).unwrap();
        let res = greedy_select(&pools.pools[0].with_budget(10), &pools.q0).unwrap();
        let specs: Vec<_> = res.chosen.iter().map(|id| pools.spec(*id).clone()).collect();
        let truth = pools.prior.mean().clone();
        let meas = synthesize_scaled(&truth, &specs, 0, 0.0).unwrap();
        let est = map_estimate(&meas, &pools.prior, &truth).unwrap();
        assert!(est.converged);
        assert!(est.iterations <= 2);
        assert!(est.objective <= 1e-16);
    }

    #[test]
    fn camera_estimate_recovers_offset_truth() {
        let sc = builtin_scenario(BuiltinExample::Example1);
        let pools = build_pools(&sc).unwrap();
        let res = greedy_select(&pools.pools[0].with_budget(30), &pools.q0).unwrap();
        let specs: Vec<_> = res.chosen.iter().map(|id| pools.spec(*id).clone()).collect();
        let mut truth = pools.prior.mean().clone();
        truth.values_mut()[0] += 12.0;
        truth.values_mut()[1] -= 9.0;
        let meas = synthesize_scaled(&truth, &specs, 0, 0.0).unwrap();
        let est = map_estimate(&meas, &pools.prior, pools.prior.mean()).unwrap();
        assert!(est.converged);
        // prior pulls slightly toward the mean; the data dominate
        assert!((est.theta_hat.values() - truth.values()).rows(0, 3).norm() < 1.0);
    }

    #[test]
    fn mix_report_counts() {
        let sc = builtin_scenario(BuiltinExample::Example1);
        let pools = build_pools(&sc).unwrap();
        let res = greedy_select(&pools.pools[0].with_budget(7), &pools.q0).unwrap();
        let mix = selection_mix_report(std::slice::from_ref(&res), &pools.pools);
        assert_eq!(mix.count(SensorType::Camera), 7);
        assert_eq!(mix.fraction(SensorType::Camera), Some(1.0));
        assert_eq!(selection_mix_report(&[], &pools.pools).fraction(SensorType::Camera), None);
    }

    #[test]
    fn zero_information_rf_atoms_are_not_chosen() {
        let p = 3;
        let mut atoms = Vec::new();
        for i in 0..4 {
            let j = DMatrix::from_fn(1, p, |_, c| if c == i % p { 1.0 } else { 0.3 });
            atoms.push(InfoAtom::from_jacobian(AtomId(10 + i), &j, DMatrix::identity(1, 1)).unwrap().with_source(SensorType::Camera));
        }
        for i in 0..4 {
            let j = DMatrix::zeros(1, p);
            atoms.push(InfoAtom::from_jacobian(AtomId(i), &j, DMatrix::identity(1, 1)).unwrap().with_source(SensorType::Doppler));
        }
        let pool = CandidatePool::new("a", atoms, 3).unwrap();
        let res = greedy_select(&pool, &DMatrix::identity(p, p)).unwrap();
        let mix = selection_mix_report(&[res], &[pool]);
        assert_eq!(mix.count(SensorType::Doppler), 0);
        assert_eq!(mix.count(SensorType::Camera), 3);
    }

    fn small_sweep(trials: usize, budgets: Vec<usize>, seed: u64) -> SweepReport {
        let mut sc = builtin_scenario(BuiltinExample::Example1);
        sc.schedule.count = 40;
        let pools = build_pools(&sc).unwrap();
        sweep_pools(&pools, &SweepConfig { budgets, trials, selectors: vec![Algorithm::Greedy, Algorithm::Random], seed })
            .unwrap()
    }

    #[test]
    fn sweep_is_deterministic() {
        let a = small_sweep(3, vec![2, 5], 11);
        let b = small_sweep(3, vec![2, 5], 11);
        assert_eq!(a, b);
        let c = small_sweep(1, vec![5], 4);
        let d = small_sweep(1, vec![5], 4);
        assert_eq!(c, d);
    }

    #[test]
    fn full_budget_selectors_agree() {
        let r = small_sweep(3, vec![40], 5);
        let g = r.curve(Algorithm::Greedy).unwrap();
        let rnd = r.curve(Algorithm::Random).unwrap();
        assert_eq!(g.rmse_pos, rnd.rmse_pos);
        assert_eq!(g.weighted_err, rnd.weighted_err);
    }

    #[test]
    fn sweep_mix_sums_over_trials() {
        let r = small_sweep(4, vec![3], 2);
        let cam: usize = r.mix.iter().filter(|m| m.selector == Algorithm::Greedy && m.sensor_type == SensorType::Camera).map(|m| m.count).sum();
        assert_eq!(cam, 12);
    }

    #[test]
    fn sweep_rejects_zero_trials() {
        let pools = build_pools(&builtin_scenario(BuiltinExample::Example1)).unwrap();
        let cfg = SweepConfig { budgets: vec![1], trials: 0, selectors: vec![Algorithm::Greedy], seed: 0 };
        assert!(matches!(sweep_pools(&pools, &cfg), Err(Error::Config(_))));
    }
}
