//! Walk simulation on lazily sampled environments.
//!
//! Annealed quantities draw one fresh environment per walk: walk `i` under
//! master seed `s` uses the environment seed `derive_seed(s, Environment, i)`
//! and the step stream `derive_seed(s, Walk, i)`. Results are collected in
//! index order and folded sequentially, so they do not depend on the number
//! of worker threads.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_model::{Environment, EnvironmentLaw, LawSampler, LazyEnvironment};
use crate::error::{Error, Result};
use crate::lattice::{ExitClass, Region, Site};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::stats::{EmpiricalDistribution, MCEstimate};

pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000_000;

#[derive(Debug, Clone, Copy)]
pub enum StopRule<'a> {
    ExitRegion(&'a Region),
    HitSiteOrExit(&'a [i64], &'a Region),
    FixedSteps(u64),
}

#[derive(Debug, Clone, Copy)]
pub struct WalkOptions {
    pub budget: u64,
    pub record_visits: bool,
}

impl Default for WalkOptions {
    fn default() -> Self {
        WalkOptions {
            budget: DEFAULT_STEP_BUDGET,
            record_visits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkOutcome {
    pub final_site: Site,
    pub steps: u64,
    /// Set when the walk left its region.
    pub exit_class: Option<ExitClass>,
    /// Set when the walk stopped on its target site.
    pub hit_target: bool,
    pub visits: Option<HashMap<Site, u64>>,
}

impl WalkOutcome {
    pub fn exited_frontal(&self) -> bool {
        self.exit_class == Some(ExitClass::Frontal)
    }

    pub fn exited_other(&self) -> bool {
        self.exit_class == Some(ExitClass::Other)
    }
}

#[inline]
fn pick_direction(w: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding: fall back to the last direction with positive weight
    w.iter().rposition(|p| *p > 0.0).unwrap_or(w.len() - 1)
}

/// Runs one walk under the quenched law of `env`.
pub fn run_quenched_walk<R: Rng + ?Sized>(
    env: &dyn Environment,
    start: &[i64],
    stop: &StopRule,
    rng: &mut R,
    opts: &WalkOptions,
) -> Result<WalkOutcome> {
    let d = env.dim();
    if start.len() != d {
        return Err(Error::Precondition(format!(
            "start site has dimension {}, environment has {d}",
            start.len()
        )));
    }
    let region = match stop {
        StopRule::ExitRegion(r) | StopRule::HitSiteOrExit(_, r) => {
            if !r.contains(start) {
                return Err(Error::NotInterior(start.to_vec()));
            }
            Some(*r)
        }
        StopRule::FixedSteps(_) => None,
    };
    let target = match stop {
        StopRule::HitSiteOrExit(y, _) => Some(*y),
        _ => None,
    };
    let max_steps = match stop {
        StopRule::FixedSteps(n) => *n,
        _ => opts.budget,
    };
    let mut x = start.to_vec();
    let mut visits = opts.record_visits.then(HashMap::new);
    let mut steps = 0u64;
    loop {
        if let Some(t) = target {
            if x.as_slice() == t {
                return Ok(WalkOutcome {
                    final_site: x,
                    steps,
                    exit_class: None,
                    hit_target: true,
                    visits,
                });
            }
        }
        if steps == max_steps {
            if region.is_some() {
                return Err(Error::StepBudgetExceeded(opts.budget));
            }
            return Ok(WalkOutcome {
                final_site: x,
                steps,
                exit_class: None,
                hit_target: false,
                visits,
            });
        }
        if let Some(v) = visits.as_mut() {
            *v.entry(x.clone()).or_insert(0) += 1;
        }
        let k = pick_direction(env.weights(&x), rng.gen::<f64>());
        x[k / 2] += if k % 2 == 0 { 1 } else { -1 };
        steps += 1;
        if let Some(r) = region {
            if !r.contains(&x) {
                let class = r.exit_class_unchecked(&x);
                return Ok(WalkOutcome {
                    final_site: x,
                    steps,
                    exit_class: Some(class),
                    hit_target: false,
                    visits,
                });
            }
        }
    }
}

/// Environment seed of annealed sample `i`.
pub fn environment_seed(master: u64, i: u64) -> u64 {
    derive_seed(master, Stream::Environment, i)
}

/// Walk stream seed of annealed sample `i`.
pub fn walk_seed(master: u64, i: u64) -> u64 {
    derive_seed(master, Stream::Walk, i)
}

/// Deterministic parallel map over `0..n`, results in index order.
pub fn par_map_indexed<T, F>(n: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Annealed walks: one fresh environment per walk, `value` applied to each
/// outcome. Values are returned in walk order.
pub fn annealed_walk_values<F>(
    law: &EnvironmentLaw,
    start: &[i64],
    stop: &StopRule,
    n: u64,
    seed: u64,
    value: F,
) -> Result<Vec<f64>>
where
    F: Fn(&WalkOutcome) -> f64 + Sync + Send,
{
    let sampler = Arc::new(LawSampler::new(law)?);
    let opts = WalkOptions::default();
    par_map_indexed(n, |i| {
        let env_seed = environment_seed(seed, i);
        let env = LazyEnvironment::new(sampler.clone(), env_seed);
        let mut rng = stream_rng(walk_seed(seed, i));
        let out = run_quenched_walk(&env, start, stop, &mut rng, &opts)
            .map_err(|e| e.with_seed(env_seed))?;
        Ok(value(&out))
    })
}

/// Estimate of P_start(event) under the annealed law, for walks stopped on
/// leaving `region`.
pub fn annealed_event_probability<F>(
    law: &EnvironmentLaw,
    region: &Region,
    start: &[i64],
    event: F,
    n: u64,
    seed: u64,
) -> Result<MCEstimate>
where
    F: Fn(&WalkOutcome) -> bool + Sync + Send,
{
    if law.dim() != region.dim() {
        return Err(Error::InvalidRegion(
            "law and region dimensions differ".into(),
        ));
    }
    let stop = StopRule::ExitRegion(region);
    let values =
        annealed_walk_values(
            law,
            start,
            &stop,
            n,
            seed,
            |o| {
                if event(o) {
                    1.0
                } else {
                    0.0
                }
            },
        )?;
    Ok(MCEstimate::from_samples(&values, seed))
}

/// Annealed estimate of X_n . e1 / n from the origin.
pub fn estimate_velocity(
    law: &EnvironmentLaw,
    n_steps: u64,
    n_walks: u64,
    seed: u64,
) -> Result<MCEstimate> {
    if n_steps == 0 {
        return Err(Error::Precondition("n_steps must be at least 1".into()));
    }
    let origin = vec![0i64; law.dim()];
    let stop = StopRule::FixedSteps(n_steps);
    let values = annealed_walk_values(law, &origin, &stop, n_walks, seed, |o| {
        o.final_site[0] as f64 / n_steps as f64
    })?;
    Ok(MCEstimate::from_samples(&values, seed))
}

/// Evaluates an exact per-environment functional on `n_env` independent
/// environments. The functional receives the environment and its seed; its
/// errors are tagged with that seed for replay.
pub fn sample_statistic_over_environments<F>(
    law: &EnvironmentLaw,
    n_env: u64,
    seed: u64,
    functional: F,
) -> Result<EmpiricalDistribution>
where
    F: Fn(&LazyEnvironment) -> Result<f64> + Sync + Send,
{
    let sampler = Arc::new(LawSampler::new(law)?);
    let samples = par_map_indexed(n_env, |i| {
        let env_seed = environment_seed(seed, i);
        let env = LazyEnvironment::new(sampler.clone(), env_seed);
        functional(&env).map_err(|e| e.with_seed(env_seed))
    })?;
    let seeds = (0..n_env).map(|i| environment_seed(seed, i)).collect();
    Ok(EmpiricalDistribution::from_samples(samples, seeds))
}

/// Mean of `values` adjusted by a mean-zero companion with the estimated
/// optimal coefficient. Returns (mean, standard error, coefficient).
pub fn control_variate_mean(values: &[f64], companions: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    if values.len() < 3 {
        let m = values.iter().sum::<f64>() / n.max(1.0);
        return (m, 0.0, 0.0);
    }
    let my = values.iter().sum::<f64>() / n;
    let mc = companions.iter().sum::<f64>() / n;
    let mut scc = 0.0;
    let mut syc = 0.0;
    for (y, c) in values.iter().zip(companions) {
        scc += (c - mc) * (c - mc);
        syc += (y - my) * (c - mc);
    }
    let beta = if scc > 0.0 { syc / scc } else { 0.0 };
    let adj: Vec<f64> = values
        .iter()
        .zip(companions)
        .map(|(y, c)| y - beta * c)
        .collect();
    let ma = adj.iter().sum::<f64>() / n;
    let var = adj.iter().map(|a| (a - ma) * (a - ma)).sum::<f64>() / (n - 2.0);
    (ma, (var / n).sqrt(), beta)
}

/// Raw samples as `seed,value` CSV.
pub fn samples_to_csv(dist: &EmpiricalDistribution) -> String {
    let mut out = String::from("seed,value\n");
    for (s, v) in dist.seeds.iter().zip(&dist.samples) {
        out.push_str(&format!("{s},{v:.17e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::{sample_environment, HomogeneousEnvironment, ProbVector};
    use crate::exact_solver::{QuenchedSystem, SolverOptions};
    use crate::rng::stream_rng;

    fn east() -> HomogeneousEnvironment {
        HomogeneousEnvironment(ProbVector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap())
    }

    #[test]
    fn zero_steps_stays_put() {
        let mut rng = stream_rng(1);
        let env = HomogeneousEnvironment(ProbVector::ssrw(2));
        let o = run_quenched_walk(
            &env,
            &[3, -1],
            &StopRule::FixedSteps(0),
            &mut rng,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(o.final_site, vec![3, -1]);
        assert_eq!(o.steps, 0);
    }

    #[test]
    fn deterministic_walk_moves_right() {
        let mut rng = stream_rng(1);
        let o = run_quenched_walk(
            &east(),
            &[0, 0],
            &StopRule::FixedSteps(17),
            &mut rng,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(o.final_site, vec![17, 0]);
    }

    #[test]
    fn same_seed_same_path() {
        let law = EnvironmentLaw::signed_axis_kick(2, 0.05, 0.01).unwrap();
        let env = LazyEnvironment::from_law(&law, 9).unwrap();
        let opts = WalkOptions {
            record_visits: true,
            ..Default::default()
        };
        let a = run_quenched_walk(
            &env,
            &[0, 0],
            &StopRule::FixedSteps(500),
            &mut stream_rng(4),
            &opts,
        )
        .unwrap();
        let b = run_quenched_walk(
            &env,
            &[0, 0],
            &StopRule::FixedSteps(500),
            &mut stream_rng(4),
            &opts,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lazy_and_presampled_paths_coincide() {
        let law = EnvironmentLaw::signed_axis_kick(2, 0.05, 0.01).unwrap();
        let region = Region::cube(2, 6).unwrap();
        let lazy = LazyEnvironment::from_law(&law, 21).unwrap();
        let pre = sample_environment(&law, &region, 21).unwrap();
        let stop = StopRule::ExitRegion(&region);
        for s in 0..20 {
            let a = run_quenched_walk(
                &lazy,
                &[0, 0],
                &stop,
                &mut stream_rng(s),
                &Default::default(),
            )
            .unwrap();
            let b = run_quenched_walk(
                &pre,
                &[0, 0],
                &stop,
                &mut stream_rng(s),
                &Default::default(),
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn hit_rule_stops_on_target() {
        let region = Region::slab(2, 5, 5).unwrap();
        let target = [3i64, 0];
        let o = run_quenched_walk(
            &east(),
            &[0, 0],
            &StopRule::HitSiteOrExit(&target, &region),
            &mut stream_rng(0),
            &Default::default(),
        )
        .unwrap();
        assert!(o.hit_target);
        assert_eq!(o.steps, 3);
    }

    #[test]
    fn budget_is_enforced() {
        let region = Region::cube(2, 50).unwrap();
        let opts = WalkOptions {
            budget: 10,
            record_visits: false,
        };
        let env = HomogeneousEnvironment(ProbVector::ssrw(2));
        let r = run_quenched_walk(
            &env,
            &[0, 0],
            &StopRule::ExitRegion(&region),
            &mut stream_rng(0),
            &opts,
        );
        assert_eq!(r, Err(Error::StepBudgetExceeded(10)));
    }

    #[test]
    fn start_outside_region_is_rejected() {
        let region = Region::cube(2, 1).unwrap();
        let env = HomogeneousEnvironment(ProbVector::ssrw(2));
        let r = run_quenched_walk(
            &env,
            &[5, 0],
            &StopRule::ExitRegion(&region),
            &mut stream_rng(0),
            &Default::default(),
        );
        assert!(matches!(r, Err(Error::NotInterior(_))));
    }

    #[test]
    fn slab_frontal_exit_matches_gambler_ruin() {
        let law = EnvironmentLaw::ssrw(2);
        let region = Region::slab(2, 4, 64).unwrap();
        let est =
            annealed_event_probability(&law, &region, &[0, 0], |o| o.exited_frontal(), 100_000, 5)
                .unwrap();
        assert!(est.covers(5.0 / 9.0, 4.0), "{est:?}");
    }

    #[test]
    fn exact_and_monte_carlo_frontal_mass_agree() {
        let law = EnvironmentLaw::signed_axis_kick(2, 0.05, 0.02).unwrap();
        let region = Region::slab(2, 3, 12).unwrap();
        let n = 40_000;
        let est = annealed_event_probability(&law, &region, &[0, 0], |o| o.exited_frontal(), n, 77)
            .unwrap();
        // annealed mean of the exact quenched frontal mass
        let dist = sample_statistic_over_environments(&law, 4000, 78, |env| {
            let sys = QuenchedSystem::new(&region, env)?;
            Ok(sys
                .exit_distribution(&[0, 0], &SolverOptions::default())?
                .frontal)
        })
        .unwrap();
        let se = (est.std_error.powi(2) + dist.mean_se().powi(2)).sqrt();
        assert!((est.mean - dist.mean).abs() <= 4.0 * se);
    }

    #[test]
    fn point_mass_east_never_exits_sideways() {
        let law = EnvironmentLaw::point_mass(ProbVector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let region = Region::ballisticity_box(2, 2).unwrap();
        let est = annealed_event_probability(&law, &region, &[0, 0], |o| o.exited_other(), 1000, 1)
            .unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn frontal_probability_increases_with_shift() {
        let base = EnvironmentLaw::signed_axis_kick(2, 0.02, 0.0).unwrap();
        let region = Region::slab(2, 3, 12).unwrap();
        let mut last = -1.0;
        for s in [0.0, 0.05, 0.1] {
            let law = crate::env_model::build_shifted_law(&base, s).unwrap();
            let e = annealed_event_probability(
                &law,
                &region,
                &[0, 0],
                |o| o.exited_frontal(),
                20_000,
                3,
            )
            .unwrap();
            assert!(e.mean > last);
            last = e.mean;
        }
    }

    #[test]
    fn velocity_of_ssrw_is_zero() {
        let est = estimate_velocity(&EnvironmentLaw::ssrw(2), 1000, 2000, 8).unwrap();
        assert!(est.covers(0.0, 4.0));
    }

    #[test]
    fn velocity_of_drifted_point_mass() {
        let law = EnvironmentLaw::point_mass(ProbVector::drifted(2, 0.1).unwrap());
        let est = estimate_velocity(&law, 2000, 500, 8).unwrap();
        assert!(est.covers(0.1, 4.0));
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let law = EnvironmentLaw::signed_axis_kick(2, 0.05, 0.01).unwrap();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| estimate_velocity(&law, 200, 300, 11).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn point_mass_statistic_has_zero_variance() {
        let law = EnvironmentLaw::point_mass(ProbVector::drifted(2, 0.1).unwrap());
        let region = Region::slab(2, 2, 8).unwrap();
        let d = sample_statistic_over_environments(&law, 20, 2, |env| {
            let sys = QuenchedSystem::new(&region, env)?;
            Ok(sys
                .green_operator(&sys.drift_field(0), &[0, 0], &SolverOptions::default())?
                .value)
        })
        .unwrap();
        assert!(d.variance < 1e-20);
    }

    #[test]
    fn functional_errors_carry_the_environment_seed() {
        let law = EnvironmentLaw::ssrw(2);
        let r = sample_statistic_over_environments(&law, 3, 2, |_| {
            Err(Error::Precondition("x".into()))
        });
        match r {
            Err(Error::WithSeed { seed, .. }) => assert_eq!(seed, environment_seed(2, 0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn control_variate_removes_correlated_noise() {
        let mut rng = stream_rng(3);
        let c: Vec<f64> = (0..5000).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y: Vec<f64> = c.iter().map(|c| 1.0 + 2.0 * c).collect();
        let (m, se, beta) = control_variate_mean(&y, &c);
        assert!((m - 1.0).abs() < 1e-12);
        assert!(se < 1e-12);
        assert!((beta - 2.0).abs() < 1e-12);
    }
}
