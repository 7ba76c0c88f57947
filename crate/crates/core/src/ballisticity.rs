//! Ballisticity probes: the polynomial exit condition on B_M, the mean and
//! fluctuations of G_U[d . e1](0) on slabs, a Freedman-type martingale bound,
//! and the box-level quantities q_B, rho_B, rho_hat(0) and p.
//!
//! Probability thresholds are compared in log space; nothing here ever
//! exponentiates log M0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env_model::{law_moments, Environment, EnvironmentLaw};
use crate::error::{Error, Result};
use crate::exact_solver::{QuenchedSystem, SolverOptions};
use crate::lattice::{Region, Site};
use crate::monte_carlo::{
    annealed_event_probability, par_map_indexed, sample_statistic_over_environments,
};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::stats::{bonferroni_z, ls_slope, wilson_interval, EmpiricalDistribution, REPORT_Z};

/// log M0 = 100 + 4d (log kappa)^2 with kappa = 1/(4d).
pub fn log_m0(d: usize) -> f64 {
    let k = (1.0 / (4 * d) as f64).ln();
    100.0 + 4.0 * d as f64 * k * k
}

/// Exponent 15d + 5 of the polynomial threshold M^-(15d+5).
pub fn threshold_exponent(d: usize) -> u32 {
    15 * d as u32 + 5
}

// ---------------------------------------------------------------------------
// condition (P)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionPVerdict {
    /// No start site exceeds the threshold (informal: M is far below M0).
    PassInformal,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProbe {
    pub site: Site,
    pub failures: u64,
    pub n: u64,
    pub estimate: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPReport {
    pub d: usize,
    pub m: i64,
    pub threshold_exponent: u32,
    /// log of M^-(15d+5).
    pub log_threshold: f64,
    pub log_m0: f64,
    /// Always true at any computable scale.
    pub below_m0: bool,
    pub n_per_site: u64,
    pub starts_total: usize,
    pub starts_probed: usize,
    pub coverage: String,
    pub sites: Vec<SiteProbe>,
    pub sup_site: Site,
    pub sup_estimate: f64,
    /// Simultaneous (Bonferroni) Wilson upper bound on the sup.
    pub sup_upper: f64,
    pub z: f64,
    /// Exact sup over the probed starts, for point-mass laws.
    pub exact_sup: Option<f64>,
    pub verdict: ConditionPVerdict,
    pub seed: u64,
}

impl ConditionPReport {
    pub fn total_walks(&self) -> u64 {
        self.sites.iter().map(|s| s.n).sum()
    }

    pub fn total_failures(&self) -> u64 {
        self.sites.iter().map(|s| s.failures).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out: String = (1..=self.d).map(|k| format!("x{k},")).collect();
        out.push_str("failures,n,estimate,upper\n");
        for s in &self.sites {
            for v in &s.site {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!(
                "{},{},{:.17e},{:.17e}\n",
                s.failures, s.n, s.estimate, s.upper
            ));
        }
        out
    }
}

/// Evenly spaced subsample of `k` items, always keeping the first and last.
fn spread<T: Clone>(items: &[T], k: usize) -> Vec<T> {
    if k >= items.len() {
        return items.to_vec();
    }
    if k <= 1 {
        return items[items.len() / 2..=items.len() / 2].to_vec();
    }
    (0..k)
        .map(|i| items[i * (items.len() - 1) / (k - 1)].clone())
        .collect()
}

/// Monte Carlo estimate of sup_{x in B*_M} P_x(X_{T_{B_M}} not frontal).
pub fn condition_p_probe(
    law: &EnvironmentLaw,
    m: i64,
    n_per_site: u64,
    site_cap: Option<usize>,
    seed: u64,
) -> Result<ConditionPReport> {
    if m < 2 {
        return Err(Error::Precondition(format!("M must be >= 2, got {m}")));
    }
    if n_per_site == 0 {
        return Err(Error::Precondition("n_per_site must be positive".into()));
    }
    let d = law.dim();
    let region = Region::ballisticity_box(d, m)?;
    let all = region.middle_frontal().unwrap_or_default();
    let starts = match site_cap {
        Some(cap) => spread(&all, cap.max(1)),
        None => all.clone(),
    };
    let coverage = if starts.len() == all.len() {
        format!("all {} sites of B*_M", all.len())
    } else {
        format!(
            "{} of {} sites of B*_M, evenly spaced in lexicographic order",
            starts.len(),
            all.len()
        )
    };
    let z = bonferroni_z(REPORT_Z, starts.len());
    let mut sites = Vec::with_capacity(starts.len());
    for (i, x) in starts.iter().enumerate() {
        let est = annealed_event_probability(
            law,
            &region,
            x,
            |o| o.exited_other(),
            n_per_site,
            derive_seed(seed, Stream::Custom(0x5050), i as u64),
        )?;
        let failures = (est.mean * n_per_site as f64).round() as u64;
        let (_, upper) = wilson_interval(failures, n_per_site, z);
        sites.push(SiteProbe {
            site: x.clone(),
            failures,
            n: n_per_site,
            estimate: est.mean,
            upper,
        });
    }
    let (sup_i, sup) = sites.iter().enumerate().fold((0, -1.0), |(bi, b), (i, s)| {
        if s.estimate > b {
            (i, s.estimate)
        } else {
            (bi, b)
        }
    });
    let sup_upper = sites.iter().map(|s| s.upper).fold(0.0, f64::max);
    let exp = threshold_exponent(d);
    let log_threshold = -(exp as f64) * (m as f64).ln();
    let lm0 = log_m0(d);
    let exact_sup = if law.is_point_mass() {
        let env = crate::env_model::LazyEnvironment::from_law(law, 0)?;
        let sys = QuenchedSystem::new(&region, &env)?;
        let front = sys.frontal_exit_field(&SolverOptions::default())?;
        Some(
            starts
                .iter()
                .map(|x| 1.0 - front.values[region.index_of(x).unwrap_or(0)])
                .fold(0.0, f64::max)
                .max(0.0),
        )
    } else {
        None
    };
    let verdict = if sup <= 0.0 || sup.ln() <= log_threshold {
        ConditionPVerdict::PassInformal
    } else {
        ConditionPVerdict::Fail
    };
    Ok(ConditionPReport {
        d,
        m,
        threshold_exponent: exp,
        log_threshold,
        log_m0: lm0,
        below_m0: (m as f64).ln() < lm0,
        n_per_site,
        starts_total: all.len(),
        starts_probed: starts.len(),
        coverage,
        sup_site: sites[sup_i].site.clone(),
        sup_estimate: sup,
        sup_upper,
        z,
        exact_sup,
        verdict,
        seed,
        sites,
    })
}

// ---------------------------------------------------------------------------
// G_U[d . e1](0) on slabs

/// G_U[d . e1](x) for every interior x of `region`.
pub fn drift_green_field(
    env: &dyn Environment,
    region: &Region,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    let sys = QuenchedSystem::new(region, env)?;
    Ok(sys.green_operator_field(&sys.drift_field(0), opts)?.values)
}

/// G_U[d . e1](0).
pub fn drift_green_at_origin(
    env: &dyn Environment,
    region: &Region,
    opts: &SolverOptions,
) -> Result<f64> {
    let sys = QuenchedSystem::new(region, env)?;
    let origin = vec![0i64; region.dim()];
    Ok(sys
        .green_operator(&sys.drift_field(0), &origin, opts)?
        .value)
}

/// c_{alpha,L} of the fluctuation estimate.
pub fn c_alpha_l(d: usize, alpha: f64, l: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::Precondition(format!(
            "alpha must lie in (0, 2), got {alpha}"
        )));
    }
    match d {
        3 => Ok(l.powf(1.0 + 2.0 * (1.0 - alpha) / (2.0 - alpha))),
        4 => Ok(l.powf(4.0 * (1.0 - alpha) / (2.0 - alpha))),
        d if d >= 5 && alpha >= 0.8 => Ok(1.0),
        d if d >= 5 => Err(Error::Precondition(format!(
            "c_alpha_L for d >= 5 needs alpha >= 4/5, got {alpha}"
        ))),
        _ => Err(Error::Precondition(format!(
            "c_alpha_L is not defined for d = {d}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftGreenStats {
    pub d: usize,
    pub l: i64,
    pub w: i64,
    pub n_env: u64,
    pub lambda: f64,
    pub eps: f64,
    pub sigma2: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    /// mean - 3 se.
    pub lower: f64,
    /// (2/5) d lambda L^2.
    pub bound: f64,
    pub bound_holds: bool,
    /// lambda d L (L + 1), the value for constant drift and no lateral exits.
    pub constant_drift_value: f64,
    pub alpha: Option<f64>,
    pub c_alpha_l: Option<f64>,
    /// (u, fraction of samples with |G - mean| >= u).
    pub tail: Vec<(f64, f64)>,
    pub warning: Option<String>,
    pub seed: u64,
    #[serde(skip)]
    pub distribution: Option<EmpiricalDistribution>,
}

fn tail_table(dist: &EmpiricalDistribution) -> Vec<(f64, f64)> {
    let sd = dist.variance.sqrt();
    (1..=4)
        .map(|k| {
            let u = k as f64 * sd;
            (u, dist.two_sided_tail(u))
        })
        .collect()
}

/// Mean of G_U[d . e1](0) over environments against (2/5) d lambda L^2.
pub fn mean_drift_green_check(
    law: &EnvironmentLaw,
    l: i64,
    w: i64,
    n_env: u64,
    alpha: Option<f64>,
    seed: u64,
) -> Result<DriftGreenStats> {
    let mo = law_moments(law)?;
    if !(mo.lambda > 0.0) {
        return Err(Error::Precondition(format!(
            "the mean drift check needs lambda > 0, got {}",
            mo.lambda
        )));
    }
    let d = mo.d;
    let region = Region::slab(d, l, w)?;
    let opts = SolverOptions::default();
    let dist = sample_statistic_over_environments(law, n_env, seed, |env| {
        drift_green_at_origin(env, &region, &opts)
    })?;
    let bound = 0.4 * d as f64 * mo.lambda * (l * l) as f64;
    let lower = dist.mean - REPORT_Z * dist.mean_se();
    let warning =
        (mo.eps * l as f64 > 0.75).then(|| format!("eps L = {:.3} exceeds 3/4", mo.eps * l as f64));
    Ok(DriftGreenStats {
        d,
        l,
        w,
        n_env,
        lambda: mo.lambda,
        eps: mo.eps,
        sigma2: mo.sigma2,
        mean: dist.mean,
        mean_se: dist.mean_se(),
        variance: dist.variance,
        variance_se: dist.variance_se,
        lower,
        bound,
        bound_holds: lower > bound,
        constant_drift_value: mo.lambda * d as f64 * (l * (l + 1)) as f64,
        alpha,
        c_alpha_l: alpha.and_then(|a| c_alpha_l(d, a, l as f64).ok()),
        tail: tail_table(&dist),
        warning,
        seed,
        distribution: Some(dist),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationRow {
    pub amplitude: f64,
    pub sigma2: f64,
    pub mean: f64,
    pub variance: f64,
    pub variance_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationScan {
    pub d: usize,
    pub l: i64,
    pub w: i64,
    pub n_env: u64,
    pub rows: Vec<FluctuationRow>,
    /// Least-squares slope of log variance against log amplitude.
    pub slope: Option<f64>,
    /// (amplitude ratio, variance ratio) of consecutive rows.
    pub ratios: Vec<(f64, f64)>,
    pub alpha: Option<f64>,
    pub c_alpha_l: Option<f64>,
    pub note: String,
    pub seed: u64,
}

impl FluctuationScan {
    /// Two-column plot data: amplitude, variance.
    pub fn plot_data(&self) -> String {
        self.rows
            .iter()
            .map(|r| format!("{:.17e} {:.17e}\n", r.amplitude, r.variance))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("amplitude,sigma2,mean,variance,variance_se\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.amplitude, r.sigma2, r.mean, r.variance, r.variance_se
            ));
        }
        out
    }
}

/// Variance of G_U[d . e1](0) across amplitudes of a law family.
///
/// Every amplitude reuses the same environment seeds, so the uniforms
/// driving each site are shared across rows.
pub fn fluctuation_scan(
    family: &dyn Fn(f64) -> Result<EnvironmentLaw>,
    amplitudes: &[f64],
    l: i64,
    w: i64,
    n_env: u64,
    alpha: Option<f64>,
    seed: u64,
) -> Result<FluctuationScan> {
    if amplitudes.is_empty() || amplitudes.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::Precondition(
            "amplitudes must be strictly increasing".into(),
        ));
    }
    let mut rows = Vec::with_capacity(amplitudes.len());
    let mut d = 0;
    let opts = SolverOptions::default();
    for &a in amplitudes {
        let law = family(a)?;
        d = law.dim();
        let region = Region::slab(d, l, w)?;
        let mo = law_moments(&law)?;
        let dist = sample_statistic_over_environments(&law, n_env, seed, |env| {
            drift_green_at_origin(env, &region, &opts)
        })?;
        rows.push(FluctuationRow {
            amplitude: a,
            sigma2: mo.sigma2,
            mean: dist.mean,
            variance: dist.variance,
            variance_se: dist.variance_se,
        });
    }
    let slope = if rows.len() >= 2
        && rows
            .iter()
            .all(|r| r.variance > 1e-24 * r.mean * r.mean && r.amplitude > 0.0)
    {
        let x: Vec<f64> = rows.iter().map(|r| r.amplitude.ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.variance.ln()).collect();
        Some(ls_slope(&x, &y))
    } else {
        None
    };
    let ratios = rows
        .windows(2)
        .map(|p| {
            (
                p[1].amplitude / p[0].amplitude,
                p[1].variance / p[0].variance,
            )
        })
        .collect();
    Ok(FluctuationScan {
        d,
        l,
        w,
        n_env,
        rows,
        slope,
        ratios,
        alpha,
        c_alpha_l: alpha.and_then(|a| c_alpha_l(d, a, l as f64).ok()),
        note: "common environment seeds across amplitudes".into(),
        seed,
    })
}

// ---------------------------------------------------------------------------
// Freedman bound

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreedmanParams {
    pub u: f64,
    /// Increment bound.
    pub b: f64,
    /// Sum of conditional variances.
    pub sum_v2: f64,
}

/// exp{-u^2 / (2 (sum v^2 + u b / 3))}.
pub fn freedman_bound(p: &FreedmanParams) -> Result<f64> {
    if !(p.u >= 0.0 && p.b > 0.0 && p.sum_v2 >= 0.0)
        || !(p.u.is_finite() && p.b.is_finite() && p.sum_v2.is_finite())
    {
        return Err(Error::Precondition(format!(
            "need u >= 0, b > 0, sum v^2 >= 0 (got u={}, b={}, sum_v2={})",
            p.u, p.b, p.sum_v2
        )));
    }
    if p.u == 0.0 {
        return Ok(1.0);
    }
    Ok((-p.u * p.u / (2.0 * (p.sum_v2 + p.u * p.b / 3.0))).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IncrementLaw {
    /// +-1 with probability 1/2.
    Rademacher,
    /// Uniform on [-b, b].
    Uniform { b: f64 },
}

impl IncrementLaw {
    fn bound(&self) -> f64 {
        match self {
            IncrementLaw::Rademacher => 1.0,
            IncrementLaw::Uniform { b } => *b,
        }
    }

    fn variance(&self) -> f64 {
        match self {
            IncrementLaw::Rademacher => 1.0,
            IncrementLaw::Uniform { b } => b * b / 3.0,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            IncrementLaw::Rademacher => {
                if rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            IncrementLaw::Uniform { b } => rng.gen_range(-*b..=*b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub u: f64,
    pub bound: f64,
    /// Fraction of paths with |S_n| >= u.
    pub two_sided: f64,
    pub two_sided_se: f64,
    /// Fraction of paths with max_{k <= n} S_k >= u.
    pub running_max: f64,
    pub running_max_se: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTailReport {
    pub increments: IncrementLaw,
    pub n: u64,
    pub n_paths: u64,
    pub b: f64,
    pub sum_v2: f64,
    pub rows: Vec<TailRow>,
    pub seed: u64,
}

impl MartingaleTailReport {
    pub fn all_within_bound(&self) -> bool {
        self.rows.iter().all(|r| r.within_bound)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,bound,two_sided,two_sided_se,running_max,running_max_se\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.u, r.bound, r.two_sided, r.two_sided_se, r.running_max, r.running_max_se
            ));
        }
        out
    }
}

/// Simulated tails of i.i.d. bounded-increment martingales against the
/// Freedman bound with sum v^2 = n Var(increment).
pub fn martingale_tail_test(
    increments: IncrementLaw,
    n: u64,
    u_grid: &[f64],
    n_paths: u64,
    seed: u64,
) -> Result<MartingaleTailReport> {
    if let IncrementLaw::Uniform { b } = increments {
        if !(b > 0.0) {
            return Err(Error::Precondition(format!(
                "increment bound must be positive, got {b}"
            )));
        }
    }
    if n_paths < 2 {
        return Err(Error::Precondition("need at least 2 paths".into()));
    }
    let paths = par_map_indexed(n_paths, |i| {
        let mut rng = stream_rng(derive_seed(seed, Stream::Martingale, i));
        let mut s = 0.0;
        let mut max = 0.0f64;
        for _ in 0..n {
            s += increments.sample(&mut rng);
            max = max.max(s);
        }
        Ok((s, max))
    })?;
    let b = increments.bound();
    let sum_v2 = n as f64 * increments.variance();
    let np = n_paths as f64;
    let mut rows = Vec::with_capacity(u_grid.len());
    for &u in u_grid {
        let bound = freedman_bound(&FreedmanParams { u, b, sum_v2 })?;
        let two = paths.iter().filter(|(s, _)| s.abs() >= u).count() as f64 / np;
        let run = paths.iter().filter(|(_, m)| *m >= u).count() as f64 / np;
        let se = |p: f64| (p * (1.0 - p) / np).sqrt();
        rows.push(TailRow {
            u,
            bound,
            two_sided: two,
            two_sided_se: se(two),
            running_max: run,
            running_max_se: se(run),
            within_bound: two <= bound + 3.0 * se(two) && run <= bound + 3.0 * se(run),
        });
    }
    Ok(MartingaleTailReport {
        increments,
        n,
        n_paths,
        b,
        sum_v2,
        rows,
        seed,
    })
}

// ---------------------------------------------------------------------------
// q_B, rho_B, rho_hat(0), p

/// lambda_0 = max(sigma eps^(1.5 - eta), eps^(3 - eta)).
pub fn lambda0(sigma: f64, eps: f64, eta: f64) -> f64 {
    (sigma * eps.powf(1.5 - eta)).max(eps.powf(3.0 - eta))
}

/// q_B = P_0(exit not frontal) on `region`.
pub fn q_b(env: &dyn Environment, region: &Region, opts: &SolverOptions) -> Result<f64> {
    let sys = QuenchedSystem::new(region, env)?;
    let origin = vec![0i64; region.dim()];
    let i = sys.index(&origin)?;
    let front = sys.frontal_exit_field(opts)?;
    Ok((1.0 - front.values[i]).clamp(0.0, 1.0))
}

/// sup over the subgrid {x1 = 0, |x_j| <= radius} of
/// (1 - G/L) / (1 + G/L), G = G_U[d . e1](x), on `slab`.
pub fn rho_hat(
    env: &dyn Environment,
    slab: &Region,
    l: i64,
    radius: i64,
    opts: &SolverOptions,
) -> Result<f64> {
    let field = drift_green_field(env, slab, opts)?;
    rho_hat_from_field(&field, slab, l, radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RhoOptions {
    /// Lateral radius of the box used for q_B; `None` means the full
    /// (M^3 + 3)/4 - 1.
    pub lateral_cap: Option<i64>,
    /// Subgrid radius for rho_hat(0); default 2L.
    pub subgrid_radius: Option<i64>,
    /// Lateral radius of the slab used for G_U; default 4L^2 + radius.
    pub slab_w: Option<i64>,
    /// Largest box solved without a lateral cap.
    pub max_sites: usize,
}

impl Default for RhoOptions {
    fn default() -> Self {
        RhoOptions {
            lateral_cap: None,
            subgrid_radius: None,
            slab_w: None,
            max_sites: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoStats {
    pub d: usize,
    pub theta: f64,
    pub eta: f64,
    pub eps: f64,
    pub sigma: f64,
    pub l: i64,
    pub m: i64,
    pub lambda: f64,
    pub lambda0: f64,
    pub box_lateral: i64,
    pub box_lateral_full: i64,
    pub slab_w: i64,
    pub subgrid_radius: i64,
    pub declaration: String,
    pub n_env: u64,
    pub q: Vec<f64>,
    pub rho_b: Vec<f64>,
    pub rho_hat: Vec<f64>,
    pub g0: Vec<f64>,
    pub mean_sqrt_rho: f64,
    pub mean_sqrt_rho_se: f64,
    pub mean_rho_hat: f64,
    pub mean_rho_hat_se: f64,
    pub max_rho_hat: f64,
    /// eps L < 3/4.
    pub in_regime: bool,
    /// Fraction of environments with G_U[d . e1](0) <= lambda0 L + 4/L^2.
    pub low_fraction: f64,
    pub low_fraction_upper: f64,
    /// log10 of M^{2d}.
    pub log10_m2d: f64,
    /// 1 - M^{2d} * fraction, and the same with the upper bound.
    pub p_estimate: f64,
    pub p_lower: f64,
    pub seed: u64,
}

impl RhoStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("env,q_b,rho_b,rho_hat,g_drift_0\n");
        for i in 0..self.q.len() {
            out.push_str(&format!(
                "{i},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                self.q[i], self.rho_b[i], self.rho_hat[i], self.g0[i]
            ));
        }
        out
    }
}

/// Corollary-box and slab statistics at the scale L = 2 floor(theta/eps).
pub fn rho_statistics(
    law: &EnvironmentLaw,
    theta: f64,
    eta: f64,
    n_env: u64,
    opts: &RhoOptions,
    seed: u64,
) -> Result<RhoStats> {
    let mo = law_moments(law)?;
    if !(mo.eps > 0.0) {
        return Err(Error::Precondition("rho statistics need eps > 0".into()));
    }
    let d = mo.d;
    let l = 2 * (theta / mo.eps).floor() as i64;
    if l < 2 {
        return Err(Error::Precondition(format!(
            "L = 2 floor(theta / eps) = {l} < 2; increase theta"
        )));
    }
    let m = l
        .checked_pow(4)
        .ok_or_else(|| Error::Size(format!("M = {l}^4 overflows")))?;
    let full = (m
        .checked_pow(3)
        .ok_or_else(|| Error::Size("M^3 overflows".into()))?
        + 3)
        / 4
        - 1;
    let lateral = opts.lateral_cap.map_or(full, |c| c.min(full));
    let sites = (2 * m - 1) as f64 * ((2 * lateral + 1) as f64).powi(d as i32 - 1);
    if sites > opts.max_sites as f64 {
        return Err(Error::Size(format!(
            "box with lateral radius {lateral} has {sites:.3e} sites (limit {}); set a lateral cap",
            opts.max_sites
        )));
    }
    let boxr = Region::corollary_box(d, m)
        .map_err(|e| Error::Size(e.to_string()))?
        .with_lateral_radius(lateral)?;
    let radius = opts.subgrid_radius.unwrap_or(2 * l);
    let slab_w = opts.slab_w.unwrap_or(4 * l * l + radius);
    if slab_w < radius {
        return Err(Error::Precondition(
            "slab lateral radius below subgrid radius".into(),
        ));
    }
    let slab = Region::slab(d, l, slab_w)?;
    let lam0 = lambda0(mo.sigma(), mo.eps, eta);
    let sopts = SolverOptions::default();
    let sampler = std::sync::Arc::new(crate::env_model::LawSampler::new(law)?);
    let per_env = par_map_indexed(n_env, |i| {
        let env_seed = crate::monte_carlo::environment_seed(seed, i);
        let env = crate::env_model::LazyEnvironment::new(sampler.clone(), env_seed);
        let run = || -> Result<(f64, f64, f64)> {
            let q = q_b(&env, &boxr, &sopts)?;
            let field = drift_green_field(&env, &slab, &sopts)?;
            let origin = vec![0i64; d];
            let g0 = field[slab.index_of(&origin).unwrap_or(0)];
            let rh = rho_hat_from_field(&field, &slab, l, radius)?;
            Ok((q, rh, g0))
        };
        run().map_err(|e| e.with_seed(env_seed))
    })?;
    let q: Vec<f64> = per_env.iter().map(|t| t.0).collect();
    let rho_b: Vec<f64> = q.iter().map(|q| q / (1.0 - q)).collect();
    let rho_hat_v: Vec<f64> = per_env.iter().map(|t| t.1).collect();
    let g0: Vec<f64> = per_env.iter().map(|t| t.2).collect();
    let mean_se = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (m, (var / n).sqrt())
    };
    let sq: Vec<f64> = rho_b.iter().map(|r| r.sqrt()).collect();
    let (msr, msr_se) = mean_se(&sq);
    let (mrh, mrh_se) = mean_se(&rho_hat_v);
    let cut = lam0 * l as f64 + 4.0 / (l * l) as f64;
    let low = g0.iter().filter(|g| **g <= cut).count() as u64;
    let (_, low_up) = wilson_interval(low, n_env, REPORT_Z);
    let low_fraction = low as f64 / n_env as f64;
    let log10_m2d = 2.0 * d as f64 * (m as f64).log10();
    let m2d = 10f64.powf(log10_m2d);
    Ok(RhoStats {
        d,
        theta,
        eta,
        eps: mo.eps,
        sigma: mo.sigma(),
        l,
        m,
        lambda: mo.lambda,
        lambda0: lam0,
        box_lateral: lateral,
        box_lateral_full: full,
        slab_w,
        subgrid_radius: radius,
        declaration: format!(
            "q_B on y1 in [{}, {}], |y_j| <= {lateral} (full radius {full}); rho_hat(0) over x1 = 0, |x_j| <= {radius} on a slab of lateral radius {slab_w}",
            -m + 1,
            m - 1
        ),
        n_env,
        max_rho_hat: rho_hat_v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        q,
        rho_b,
        rho_hat: rho_hat_v,
        g0,
        mean_sqrt_rho: msr,
        mean_sqrt_rho_se: msr_se,
        mean_rho_hat: mrh,
        mean_rho_hat_se: mrh_se,
        in_regime: mo.eps * (l as f64) < 0.75,
        low_fraction,
        low_fraction_upper: low_up,
        log10_m2d,
        p_estimate: 1.0 - m2d * low_fraction,
        p_lower: 1.0 - m2d * low_up,
        seed,
    })
}

fn rho_hat_from_field(field: &[f64], slab: &Region, l: i64, radius: i64) -> Result<f64> {
    let d = slab.dim();
    let lf = l as f64;
    let side = (2 * radius + 1) as usize;
    let mut best = f64::NEG_INFINITY;
    let mut x = vec![0i64; d];
    for idx in 0..side.pow(d as u32 - 1) {
        let mut r = idx;
        for xj in x.iter_mut().skip(1) {
            *xj = (r % side) as i64 - radius;
            r /= side;
        }
        let i = slab
            .index_of(&x)
            .ok_or_else(|| Error::NotInterior(x.clone()))?;
        let g = field[i] / lf;
        best = best.max((1.0 - g) / (1.0 + g));
    }
    Ok(best)
}
