//! Kalikow's auxiliary environment on a finite set and its drift.
//!
//! For a finite set `B` containing `x`, the Kalikow environment is
//!
//! ```text
//! omega_B^x(y, e) = E[g_B(x, y) omega(y, e)] / E[g_B(x, y)]
//! ```
//!
//! It is computed along two routes. The definition route takes `g_B(x, .)`
//! from one row solve per environment. The formula route rebuilds it site by
//! site as `1 / sum_e omega(y, e) f(y, y + e)` with
//! `f(y, z) = P_z(T_B <= H_y) / P_x(H_y < T_B)`, using one pinned hitting
//! solve per site. The two agree per environment, so comparing them checks
//! the solver and the bookkeeping.
//!
//! Expectations are exact when the law restricted to `B` has at most
//! `max_enumeration` configurations, and Monte Carlo otherwise.

use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env_model::{
    check_k_conditions, law_moments, CheckStatus, EnvironmentLaw, HomogeneousEnvironment, KReport,
    LawSampler, LazyEnvironment, ProbVector,
};
use crate::error::{Error, Result};
use crate::exact_solver::{QuenchedSystem, SolverOptions, Topology};
use crate::lattice::{HalfSpaceSign, Region, RegionSpec, Site};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::stats::{CvRatioSums, RatioSums, REPORT_Z};

pub const DEFAULT_MAX_ENUMERATION: u64 = 1_000_000;

pub const EVIDENCE_DISCLAIMER: &str =
    "finite family of finite sets: evidence about the infimum, not a certificate";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Definition,
    Formula,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Computation {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalikowOptions {
    /// Environments per Monte Carlo estimate.
    pub n_env: u64,
    pub seed: u64,
    pub max_enumeration: u64,
    /// Never enumerate, even when the support is small.
    pub force_monte_carlo: bool,
    /// Use g0(x, y) * (delta(y) - E delta(y)) as a companion for the drift.
    pub control_variate: bool,
    /// Confidence radius in standard errors.
    pub z: f64,
    pub solver: SolverOptions,
}

impl Default for KalikowOptions {
    fn default() -> Self {
        KalikowOptions {
            n_env: 10_000,
            seed: 0,
            max_enumeration: DEFAULT_MAX_ENUMERATION,
            force_monte_carlo: false,
            control_variate: false,
            z: REPORT_Z,
            solver: SolverOptions::with_tol(1e-12),
        }
    }
}

impl KalikowOptions {
    pub fn monte_carlo(n_env: u64, seed: u64) -> Self {
        KalikowOptions {
            n_env,
            seed,
            force_monte_carlo: true,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalikowCell {
    pub site: Site,
    pub direction: usize,
    /// E[g(x, y) omega(y, e)].
    pub numerator: f64,
    /// E[g(x, y)].
    pub denominator: f64,
    pub ratio: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEstimate {
    pub site: Site,
    pub components: Vec<f64>,
    pub std_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalikowEnv {
    pub x: Site,
    pub d: usize,
    pub route: Route,
    pub computation: Computation,
    /// Environments (Monte Carlo) or configurations (exact).
    pub n_samples: u64,
    pub seed: u64,
    pub notice: Option<String>,
    /// Site-major, direction-minor.
    pub cells: Vec<KalikowCell>,
    pub drifts: Vec<DriftEstimate>,
}

impl KalikowEnv {
    fn site_index(&self, y: &[i64]) -> Result<usize> {
        self.drifts
            .iter()
            .position(|s| s.site == y)
            .ok_or_else(|| Error::NotInterior(y.to_vec()))
    }

    pub fn cell(&self, y: &[i64], e: usize) -> Result<&KalikowCell> {
        let i = self.site_index(y)?;
        Ok(&self.cells[i * 2 * self.d + e])
    }

    pub fn ratio(&self, y: &[i64], e: usize) -> Result<f64> {
        Ok(self.cell(y, e)?.ratio)
    }

    pub fn drift(&self, y: &[i64]) -> Result<&DriftEstimate> {
        Ok(&self.drifts[self.site_index(y)?])
    }

    /// Largest |sum_e omega_B(y, e) - 1| over sites.
    pub fn max_row_defect(&self) -> f64 {
        self.cells
            .chunks(2 * self.d)
            .map(|c| (c.iter().map(|c| c.ratio).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out: String = (1..=self.d).map(|k| format!("y{k},")).collect();
        out.push_str("direction,numerator,denominator,ratio,std_error\n");
        for c in &self.cells {
            for v in &c.site {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                c.direction, c.numerator, c.denominator, c.ratio, c.std_error
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalikowDriftReport {
    pub y: Site,
    pub drift: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// (lower, upper) at the option's z.
    pub ci: Vec<(f64, f64)>,
    pub route: Route,
    pub computation: Computation,
    pub n_samples: u64,
}

// ---------------------------------------------------------------------------
// engine

struct Plan<'r> {
    law: &'r EnvironmentLaw,
    region: &'r Region,
    topo: Arc<Topology>,
    xi: usize,
    focus: Vec<usize>,
    /// Per focus site: E delta(y).
    mean_drift: Vec<Vec<f64>>,
    /// Per focus site: g0(x, y), when a control variate is used.
    g0: Option<Vec<f64>>,
    route: Route,
    opts: KalikowOptions,
    d: usize,
}

#[derive(Clone)]
struct Accum {
    cells: Vec<RatioSums>,
    drift: Vec<CvRatioSums>,
}

impl Accum {
    fn new(m: usize, d: usize) -> Self {
        Accum {
            cells: vec![RatioSums::default(); m * 2 * d],
            drift: vec![CvRatioSums::default(); m * d],
        }
    }

    fn add(&mut self, o: &Accum) {
        for (a, b) in self.cells.iter_mut().zip(&o.cells) {
            a.add(b);
        }
        for (a, b) in self.drift.iter_mut().zip(&o.drift) {
            a.add(b);
        }
    }
}

const CHUNK: u64 = 256;

impl<'r> Plan<'r> {
    fn new(
        law: &'r EnvironmentLaw,
        region: &'r Region,
        x: &[i64],
        focus: Option<&[Site]>,
        route: Route,
        opts: &KalikowOptions,
    ) -> Result<Self> {
        let d = region.dim();
        if law.dim() != d {
            return Err(Error::InvalidRegion(
                "law and region dimensions differ".into(),
            ));
        }
        let xi = region
            .index_of(x)
            .ok_or_else(|| Error::NotInterior(x.to_vec()))?;
        let focus: Vec<usize> = match focus {
            Some(sites) => sites
                .iter()
                .map(|y| {
                    region
                        .index_of(y)
                        .ok_or_else(|| Error::NotInterior(y.clone()))
                })
                .collect::<Result<_>>()?,
            None => (0..region.len()).collect(),
        };
        let topo = Topology::new(region)?;
        let mean_drift = focus
            .iter()
            .map(|&i| {
                let sup = law.support_at(&region.site(i))?;
                let mut m = vec![0.0; d];
                for (p, q) in &sup {
                    for (j, v) in p.drift().iter().enumerate() {
                        m[j] += q * v;
                    }
                }
                Ok(m)
            })
            .collect::<Result<_>>()?;
        let g0 = if opts.control_variate {
            let ssrw = HomogeneousEnvironment(ProbVector::ssrw(d));
            let sys = QuenchedSystem::with_topology(region, topo.clone(), &ssrw)?;
            let row = sys.solve_row(xi, &opts.solver)?;
            Some(focus.iter().map(|&i| row.values[i]).collect())
        } else {
            None
        };
        Ok(Plan {
            law,
            region,
            topo,
            xi,
            focus,
            mean_drift,
            g0,
            route,
            opts: *opts,
            d,
        })
    }

    /// D(y) = g(x, y) for each focus site, computed along the plan's route.
    fn weights_for(&self, sys: &QuenchedSystem) -> Result<Vec<f64>> {
        match self.route {
            Route::Definition => {
                let row = sys.solve_row(self.xi, &self.opts.solver)?;
                Ok(self.focus.iter().map(|&i| row.values[i]).collect())
            }
            Route::Formula => self
                .focus
                .iter()
                .map(|&y| {
                    let hit = sys.hitting_field(y, &self.opts.solver)?.values;
                    let reach = hit[self.xi];
                    let w = sys.weights_at(y);
                    let s: f64 = (0..2 * self.d)
                        .map(|k| w[k] * sys.escape_after_step(y, k, &hit) / reach)
                        .sum();
                    Ok(1.0 / s)
                })
                .collect(),
        }
    }

    fn accumulate(&self, acc: &mut Accum, sys: &QuenchedSystem, g: &[f64], weight: Option<f64>) {
        let dd = 2 * self.d;
        for (m, (&y, &gy)) in self.focus.iter().zip(g).enumerate() {
            let w = sys.weights_at(y);
            for k in 0..dd {
                let cell = &mut acc.cells[m * dd + k];
                match weight {
                    Some(p) => cell.push_weighted(gy * w[k], gy, p),
                    None => cell.push(gy * w[k], gy),
                }
            }
            for j in 0..self.d {
                let delta = w[2 * j] - w[2 * j + 1];
                let cell = &mut acc.drift[m * self.d + j];
                match weight {
                    Some(p) => cell.base.push_weighted(gy * delta, gy, p),
                    None => {
                        let c = match &self.g0 {
                            Some(g0) => g0[m] * (delta - self.mean_drift[m][j]),
                            None => 0.0,
                        };
                        cell.push(gy * delta, gy, c)
                    }
                }
            }
        }
    }

    fn supports(&self) -> Result<Vec<Vec<(ProbVector, f64)>>> {
        self.region
            .interior()
            .map(|s| self.law.support_at(&s))
            .collect()
    }

    fn run_exact(&self, supports: &[Vec<(ProbVector, f64)>], total: u64) -> Result<Accum> {
        let n = self.region.len();
        let dd = 2 * self.d;
        let chunks = total.div_ceil(CHUNK);
        let parts: Vec<Accum> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = Accum::new(self.focus.len(), self.d);
                let mut weights = vec![0.0; n * dd];
                for idx in c * CHUNK..((c + 1) * CHUNK).min(total) {
                    let mut rest = idx;
                    let mut p = 1.0;
                    for (i, sup) in supports.iter().enumerate() {
                        let r = sup.len() as u64;
                        let (v, q) = &sup[(rest % r) as usize];
                        rest /= r;
                        p *= q;
                        weights[i * dd..(i + 1) * dd].copy_from_slice(v.weights());
                    }
                    let sys = QuenchedSystem::from_weights(
                        self.region,
                        self.topo.clone(),
                        weights.clone(),
                    )?;
                    let g = self.weights_for(&sys)?;
                    self.accumulate(&mut acc, &sys, &g, Some(p));
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        Ok(fold(parts, self.focus.len(), self.d))
    }

    fn run_mc(&self) -> Result<Accum> {
        let sampler = Arc::new(LawSampler::new(self.law)?);
        let n_env = self.opts.n_env;
        let chunks = n_env.div_ceil(CHUNK);
        let parts: Vec<Accum> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut acc = Accum::new(self.focus.len(), self.d);
                for i in c * CHUNK..((c + 1) * CHUNK).min(n_env) {
                    let env_seed = derive_seed(self.opts.seed, Stream::Environment, i);
                    let env = LazyEnvironment::new(sampler.clone(), env_seed);
                    let sys = QuenchedSystem::with_topology(self.region, self.topo.clone(), &env)
                        .map_err(|e| e.with_seed(env_seed))?;
                    let g = self.weights_for(&sys).map_err(|e| e.with_seed(env_seed))?;
                    self.accumulate(&mut acc, &sys, &g, None);
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        Ok(fold(parts, self.focus.len(), self.d))
    }

    fn run(&self) -> Result<KalikowEnv> {
        let supports = self.supports()?;
        let mut combos: Option<u64> = Some(1);
        for s in &supports {
            combos = combos.and_then(|c| c.checked_mul(s.len() as u64));
        }
        let exact =
            !self.opts.force_monte_carlo && combos.is_some_and(|c| c <= self.opts.max_enumeration);
        let notice = if !exact && !self.opts.force_monte_carlo {
            Some(format!(
                "support has {} configurations on the set (limit {}); using Monte Carlo over {} environments",
                combos.map_or("more than 2^64".to_string(), |c| c.to_string()),
                self.opts.max_enumeration,
                self.opts.n_env
            ))
        } else {
            None
        };
        let (acc, n_samples) = if exact {
            let c = combos.unwrap_or(1);
            (self.run_exact(&supports, c)?, c)
        } else {
            if self.opts.n_env < 2 {
                return Err(Error::Precondition("Monte Carlo needs n_env >= 2".into()));
            }
            (self.run_mc()?, self.opts.n_env)
        };
        Ok(self.finish(acc, exact, n_samples, notice))
    }

    fn finish(
        &self,
        acc: Accum,
        exact: bool,
        n_samples: u64,
        notice: Option<String>,
    ) -> KalikowEnv {
        let dd = 2 * self.d;
        let mut cells = Vec::with_capacity(self.focus.len() * dd);
        let mut drifts = Vec::with_capacity(self.focus.len());
        for (m, &y) in self.focus.iter().enumerate() {
            let site = self.region.site(y);
            for k in 0..dd {
                let s = &acc.cells[m * dd + k];
                cells.push(KalikowCell {
                    site: site.clone(),
                    direction: k,
                    numerator: s.mean_num(),
                    denominator: s.mean_den(),
                    ratio: s.ratio(),
                    std_error: if exact { 0.0 } else { s.ratio_se() },
                });
            }
            let mut components = Vec::with_capacity(self.d);
            let mut std_errors = Vec::with_capacity(self.d);
            for j in 0..self.d {
                let s = &acc.drift[m * self.d + j];
                if exact {
                    components.push(s.base.ratio());
                    std_errors.push(0.0);
                } else if self.g0.is_some() {
                    let (r, se, _) = s.estimate();
                    components.push(r);
                    std_errors.push(se);
                } else {
                    components.push(s.base.ratio());
                    std_errors.push(s.base.ratio_se());
                }
            }
            drifts.push(DriftEstimate {
                site,
                components,
                std_errors,
            });
        }
        KalikowEnv {
            x: self.region.site(self.xi),
            d: self.d,
            route: self.route,
            computation: if exact {
                Computation::Exact
            } else {
                Computation::MonteCarlo
            },
            n_samples,
            seed: self.opts.seed,
            notice,
            cells,
            drifts,
        }
    }
}

fn fold(parts: Vec<Accum>, m: usize, d: usize) -> Accum {
    let mut total = Accum::new(m, d);
    for p in &parts {
        total.add(p);
    }
    total
}

/// Kalikow environment on `region` seen from `x`, definition route.
pub fn kalikow_environment(
    law: &EnvironmentLaw,
    region: &Region,
    x: &[i64],
    opts: &KalikowOptions,
) -> Result<KalikowEnv> {
    Plan::new(law, region, x, None, Route::Definition, opts)?.run()
}

/// Kalikow environment on `region` seen from `x`, formula route.
pub fn kalikow_environment_formula(
    law: &EnvironmentLaw,
    region: &Region,
    x: &[i64],
    opts: &KalikowOptions,
) -> Result<KalikowEnv> {
    Plan::new(law, region, x, None, Route::Formula, opts)?.run()
}

fn drift_report(env: KalikowEnv, y: &[i64], z: f64) -> Result<KalikowDriftReport> {
    let de = env.drift(y)?;
    Ok(KalikowDriftReport {
        y: y.to_vec(),
        ci: de
            .components
            .iter()
            .zip(&de.std_errors)
            .map(|(v, s)| (v - z * s, v + z * s))
            .collect(),
        drift: de.components.clone(),
        std_errors: de.std_errors.clone(),
        route: env.route,
        computation: env.computation,
        n_samples: env.n_samples,
    })
}

/// Drift of Kalikow's walk at `y`, definition route.
pub fn kalikow_drift(
    law: &EnvironmentLaw,
    region: &Region,
    x: &[i64],
    y: &[i64],
    opts: &KalikowOptions,
) -> Result<KalikowDriftReport> {
    let focus = [y.to_vec()];
    let env = Plan::new(law, region, x, Some(&focus), Route::Definition, opts)?.run()?;
    drift_report(env, y, opts.z)
}

/// Drift of Kalikow's walk at `y`, formula route.
pub fn kalikow_drift_formula(
    law: &EnvironmentLaw,
    region: &Region,
    x: &[i64],
    y: &[i64],
    opts: &KalikowOptions,
) -> Result<KalikowDriftReport> {
    let focus = [y.to_vec()];
    let env = Plan::new(law, region, x, Some(&focus), Route::Formula, opts)?.run()?;
    drift_report(env, y, opts.z)
}

// ---------------------------------------------------------------------------
// epsilon_K over set families

/// Sets on which the e1-drift of Kalikow's walk is probed, all containing 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilySpec {
    /// Boxes [-k, k]^d translated by t e1, t in {-k, 0, k}, k = 1..=box_k_max.
    pub box_k_max: i64,
    /// Slabs of half-width L = 1..=slab_l_max and lateral radius 4 L^2.
    pub slab_l_max: i64,
    /// Half-space truncations of both signs.
    pub half_space_n: Vec<i64>,
    pub n_clusters: usize,
    pub cluster_max_size: usize,
    pub extra: Vec<RegionSpec>,
}

impl Default for FamilySpec {
    fn default() -> Self {
        FamilySpec {
            box_k_max: 3,
            slab_l_max: 4,
            half_space_n: vec![2, 4, 8],
            n_clusters: 30,
            cluster_max_size: 20,
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FamilyMember {
    pub label: String,
    pub region: Region,
}

impl FamilySpec {
    pub fn generate(&self, d: usize, seed: u64) -> Result<Vec<FamilyMember>> {
        let mut out = Vec::new();
        for k in 1..=self.box_k_max {
            for t in [-k, 0, k] {
                let mut lo = vec![-k; d];
                let mut hi = vec![k; d];
                lo[0] += t;
                hi[0] += t;
                out.push(FamilyMember {
                    label: format!("box k={k} shift={t}"),
                    region: Region::new_box(lo, hi)?,
                });
            }
        }
        for l in 1..=self.slab_l_max {
            out.push(FamilyMember {
                label: format!("slab L={l} W={}", 4 * l * l),
                region: Region::slab(d, l, 4 * l * l)?,
            });
        }
        for &n in &self.half_space_n {
            for (sign, tag) in [(HalfSpaceSign::Plus, "+"), (HalfSpaceSign::Minus, "-")] {
                out.push(FamilyMember {
                    label: format!("half-space{tag} N={n}"),
                    region: Region::half_space(d, sign, n)?,
                });
            }
        }
        for i in 0..self.n_clusters {
            let mut rng = stream_rng(derive_seed(seed, Stream::Cluster, i as u64));
            let size = rng.gen_range(2..=self.cluster_max_size.max(2));
            out.push(FamilyMember {
                label: format!("cluster #{i} size={size}"),
                region: Region::from_sites(d, grow_cluster(d, size, &mut rng))?,
            });
        }
        for (i, spec) in self.extra.iter().enumerate() {
            out.push(FamilyMember {
                label: format!("extra #{i}"),
                region: crate::lattice::build_region(spec, d)?,
            });
        }
        Ok(out)
    }
}

/// Eden growth from the origin: each new site is a uniformly chosen
/// (site, direction) pair pointing out of the current cluster.
pub fn grow_cluster<R: Rng + ?Sized>(d: usize, size: usize, rng: &mut R) -> Vec<Site> {
    let origin = vec![0i64; d];
    let mut members = vec![origin.clone()];
    let mut set: HashSet<Site> = HashSet::from([origin]);
    while members.len() < size {
        let mut candidates = Vec::new();
        for s in &members {
            for k in 0..2 * d {
                let mut nb = s.clone();
                nb[k / 2] += if k % 2 == 0 { 1 } else { -1 };
                if !set.contains(&nb) {
                    candidates.push(nb);
                }
            }
        }
        let pick = candidates.swap_remove(rng.gen_range(0..candidates.len()));
        set.insert(pick.clone());
        members.push(pick);
    }
    members.sort();
    members
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceVerdict {
    PositiveEvidence,
    Inconclusive,
    NegativeEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub label: String,
    pub n_sites: usize,
    pub computation: Computation,
    pub n_samples: u64,
    /// Site with the smallest lower bound.
    pub argmin: Site,
    pub min_drift: f64,
    pub min_std_error: f64,
    /// min over y of (drift - z se).
    pub min_lower: f64,
    /// min over y of (drift + z se).
    pub min_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsKReport {
    pub d: usize,
    pub z: f64,
    pub sets: Vec<SetResult>,
    pub global_min_drift: f64,
    pub global_min_lower: f64,
    pub verdict: EvidenceVerdict,
    pub disclaimer: String,
    pub seed: u64,
}

impl EpsKReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "set,n_sites,computation,n_samples,min_drift,min_std_error,min_lower,min_upper\n",
        );
        for s in &self.sets {
            out.push_str(&format!(
                "{},{},{:?},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                s.label,
                s.n_sites,
                s.computation,
                s.n_samples,
                s.min_drift,
                s.min_std_error,
                s.min_lower,
                s.min_upper
            ));
        }
        out
    }
}

/// Values this close to 0 count as 0 when deciding signs of exact results.
const ZERO_TOL: f64 = 1e-12;

/// Probes inf_{B, y} d_{B,0}(y) . e1 over a generated family.
pub fn estimate_eps_k(
    law: &EnvironmentLaw,
    family: &FamilySpec,
    opts: &KalikowOptions,
) -> Result<EpsKReport> {
    let d = law.dim();
    let members = family.generate(d, opts.seed)?;
    let origin = vec![0i64; d];
    let mut sets = Vec::with_capacity(members.len());
    for (i, m) in members.iter().enumerate() {
        let set_opts = KalikowOptions {
            seed: derive_seed(opts.seed, Stream::Custom(0x4b41_4c49), i as u64),
            ..*opts
        };
        let env = kalikow_environment(law, &m.region, &origin, &set_opts)?;
        let z = opts.z;
        let mut best: Option<(usize, f64)> = None;
        let mut min_drift = f64::INFINITY;
        let mut min_upper = f64::INFINITY;
        for (k, de) in env.drifts.iter().enumerate() {
            let (v, s) = (de.components[0], de.std_errors[0]);
            let lower = v - z * s;
            if best.is_none_or(|(_, b)| lower < b) {
                best = Some((k, lower));
            }
            min_drift = min_drift.min(v);
            min_upper = min_upper.min(v + z * s);
        }
        let (k, min_lower) = best.unwrap_or((0, f64::NAN));
        sets.push(SetResult {
            label: m.label.clone(),
            n_sites: m.region.len(),
            computation: env.computation,
            n_samples: env.n_samples,
            argmin: env.drifts[k].site.clone(),
            min_drift,
            min_std_error: env.drifts[k].std_errors[0],
            min_lower,
            min_upper,
        });
    }
    let global_min_drift = sets
        .iter()
        .map(|s| s.min_drift)
        .fold(f64::INFINITY, f64::min);
    let global_min_lower = sets
        .iter()
        .map(|s| s.min_lower)
        .fold(f64::INFINITY, f64::min);
    let verdict = if sets.iter().all(|s| s.min_lower > ZERO_TOL) {
        EvidenceVerdict::PositiveEvidence
    } else if sets.iter().any(|s| s.min_upper < -ZERO_TOL) {
        EvidenceVerdict::NegativeEvidence
    } else {
        EvidenceVerdict::Inconclusive
    };
    Ok(EpsKReport {
        d,
        z: opts.z,
        sets,
        global_min_drift,
        global_min_lower,
        verdict,
        disclaimer: EVIDENCE_DISCLAIMER.into(),
        seed: opts.seed,
    })
}

/// 4 d sigma^2 (1 + 9 eps).
pub fn theorem2_threshold(d: usize, sigma2: f64, eps: f64) -> f64 {
    4.0 * d as f64 * sigma2 * (1.0 + 9.0 * eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub d: usize,
    pub lambda: f64,
    pub sigma2: f64,
    pub eps: f64,
    pub threshold: f64,
    pub in_regime: bool,
    pub eps_k: EpsKReport,
}

/// Compares lambda with the threshold and probes the drift over `family`.
pub fn theorem2_experiment(
    law: &EnvironmentLaw,
    family: &FamilySpec,
    opts: &KalikowOptions,
) -> Result<Theorem2Report> {
    let m = law_moments(law)?;
    let threshold = theorem2_threshold(m.d, m.sigma2, m.eps);
    Ok(Theorem2Report {
        d: m.d,
        lambda: m.lambda,
        sigma2: m.sigma2,
        eps: m.eps,
        threshold,
        in_regime: m.lambda > threshold,
        eps_k: estimate_eps_k(law, family, opts)?,
    })
}

// ---------------------------------------------------------------------------
// half-space experiment

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem3Verdict {
    /// Drift positive on U+ and negative on U-.
    KalikowFailsEvidence,
    /// Both drifts bounded away from 0 with the same sign.
    SameSign,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Row {
    pub n: i64,
    pub sign: HalfSpaceSign,
    pub n_sites: usize,
    pub drift: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub computation: Computation,
    pub seed: u64,
}

impl Theorem3Row {
    pub fn lower(&self, j: usize, z: f64) -> f64 {
        self.drift[j] - z * self.std_errors[j]
    }

    pub fn upper(&self, j: usize, z: f64) -> f64 {
        self.drift[j] + z * self.std_errors[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    pub rho: f64,
    pub eps0: f64,
    pub conditions: KReport,
    pub warning: Option<String>,
    pub z: f64,
    pub rows: Vec<Theorem3Row>,
    pub stabilized: bool,
    /// Largest |perpendicular drift| / se over all rows.
    pub max_perpendicular_z: f64,
    pub verdict: Theorem3Verdict,
}

impl Theorem3Report {
    pub fn to_csv(&self) -> String {
        let d = self.rows.first().map_or(0, |r| r.drift.len());
        let mut out = String::from("n,sign,n_sites,computation,seed");
        for j in 1..=d {
            out.push_str(&format!(",drift{j},se{j}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:?},{}",
                r.n,
                if r.sign == HalfSpaceSign::Plus {
                    "+"
                } else {
                    "-"
                },
                r.n_sites,
                r.computation,
                r.seed
            ));
            for j in 0..d {
                out.push_str(&format!(",{:.17e},{:.17e}", r.drift[j], r.std_errors[j]));
            }
            out.push('\n');
        }
        out
    }

    /// Last row for the given sign.
    pub fn last(&self, sign: HalfSpaceSign) -> Option<&Theorem3Row> {
        self.rows.iter().rev().find(|r| r.sign == sign)
    }
}

/// Drift of Kalikow's walk at 0 on truncated half-spaces U+ and U- for each
/// N, with the control variate g0(0,0) (delta(0) - E delta(0)).
pub fn theorem3_experiment(
    law: &EnvironmentLaw,
    rho: f64,
    eps0: f64,
    n_list: &[i64],
    allow_failed_conditions: bool,
    opts: &KalikowOptions,
) -> Result<Theorem3Report> {
    let conditions = check_k_conditions(law, rho, eps0)?;
    let warning = if conditions.all_pass() {
        None
    } else {
        let failed: Vec<&str> = conditions
            .checks
            .iter()
            .filter(|c| c.status != CheckStatus::Pass)
            .map(|c| c.id.as_str())
            .collect();
        let msg = format!("conditions not satisfied: {}", failed.join(", "));
        if !allow_failed_conditions {
            return Err(Error::Precondition(msg));
        }
        Some(msg)
    };
    if n_list.is_empty() {
        return Err(Error::Precondition("empty truncation list".into()));
    }
    let d = law.dim();
    let origin = vec![0i64; d];
    let mut rows = Vec::new();
    for (i, &n) in n_list.iter().enumerate() {
        for (s, sign) in [HalfSpaceSign::Plus, HalfSpaceSign::Minus]
            .into_iter()
            .enumerate()
        {
            let region = Region::half_space(d, sign, n)?;
            let seed = derive_seed(opts.seed, Stream::Custom(0x5533), (2 * i + s) as u64);
            let row_opts = KalikowOptions {
                seed,
                control_variate: true,
                ..*opts
            };
            let focus = [origin.clone()];
            let env = Plan::new(
                law,
                &region,
                &origin,
                Some(&focus),
                Route::Definition,
                &row_opts,
            )?
            .run()?;
            let de = &env.drifts[0];
            rows.push(Theorem3Row {
                n,
                sign,
                n_sites: region.len(),
                drift: de.components.clone(),
                std_errors: de.std_errors.clone(),
                computation: env.computation,
                seed,
            });
        }
    }
    let z = opts.z;
    let stabilized = [HalfSpaceSign::Plus, HalfSpaceSign::Minus]
        .iter()
        .all(|&sign| {
            let r: Vec<&Theorem3Row> = rows.iter().filter(|r| r.sign == sign).collect();
            if r.len() < 2 {
                return true;
            }
            let (a, b) = (r[r.len() - 2], r[r.len() - 1]);
            let se = (a.std_errors[0].powi(2) + b.std_errors[0].powi(2)).sqrt();
            (a.drift[0] - b.drift[0]).abs() <= z * se + ZERO_TOL
        });
    let max_perpendicular_z = rows
        .iter()
        .flat_map(|r| {
            (1..d).map(move |j| {
                let v = r.drift[j].abs();
                if r.std_errors[j] > 0.0 {
                    v / r.std_errors[j]
                } else if v <= ZERO_TOL {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
        })
        .fold(0.0, f64::max);
    let plus = rows
        .iter()
        .rev()
        .find(|r| r.sign == HalfSpaceSign::Plus)
        .unwrap();
    let minus = rows
        .iter()
        .rev()
        .find(|r| r.sign == HalfSpaceSign::Minus)
        .unwrap();
    let verdict = if !stabilized {
        Theorem3Verdict::Inconclusive
    } else if plus.lower(0, z) > ZERO_TOL && minus.upper(0, z) < -ZERO_TOL {
        Theorem3Verdict::KalikowFailsEvidence
    } else if (plus.lower(0, z) > ZERO_TOL && minus.lower(0, z) > ZERO_TOL)
        || (plus.upper(0, z) < -ZERO_TOL && minus.upper(0, z) < -ZERO_TOL)
    {
        Theorem3Verdict::SameSign
    } else {
        Theorem3Verdict::Inconclusive
    };
    Ok(Theorem3Report {
        rho,
        eps0,
        conditions,
        warning,
        z,
        rows,
        stabilized,
        max_perpendicular_z,
        verdict,
    })
}
