//! Exact quenched computations on finite regions.
//!
//! A [`QuenchedSystem`] is the walk killed on leaving a region: for each
//! interior site, its 2d outgoing weights and the targets they lead to
//! (interior index or exit site). Every quantity here is the solution of a
//! linear system `u = b + P u` (column problems: hitting probabilities,
//! Green's operators, exit times) or `g = delta_x + g P` (row problems:
//! Green's functions, exit laws), where `P` is the substochastic interior
//! block.
//!
//! Two solvers are available. Over-relaxed Gauss-Seidel sweeps need no
//! storage beyond the system.
//! A banded LU factorization of `I - P`, with the longest axis of a box
//! placed outermost, is exact up to rounding and much faster for regions that
//! are narrow in some direction.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::banded::BandedLu;
use crate::env_model::Environment;
use crate::error::{Error, Result};
use crate::lattice::{ExitClass, Region, Site};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    /// Direct when the band is narrow enough, iterative otherwise.
    Auto,
    Iterative,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Absolute target accuracy.
    pub tol: f64,
    pub max_sweeps: usize,
    pub method: SolveMethod,
    /// Also compute a rigorous a-posteriori error bound (costs one extra
    /// solve per system, cached).
    pub certify: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_sweeps: 2_000_000,
            method: SolveMethod::Auto,
            certify: false,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        SolverOptions {
            tol,
            ..Default::default()
        }
    }

    pub fn method(mut self, method: SolveMethod) -> Self {
        self.method = method;
        self
    }

    pub fn certified(mut self) -> Self {
        self.certify = true;
        self
    }
}

/// Largest band the direct solver accepts.
const MAX_BANDWIDTH: usize = 512;
/// Largest n * bw^2 the direct solver accepts under `Auto`.
const MAX_DIRECT_WORK: f64 = 1.5e9;

/// Region connectivity, independent of the environment.
#[derive(Debug)]
pub struct Topology {
    n: usize,
    deg: usize,
    /// `targets[i * deg + k] < n` is an interior index, otherwise an exit
    /// index offset by `n`.
    targets: Vec<u32>,
    exits: Vec<Site>,
    exit_class: Vec<ExitClass>,
    /// Position of interior index i in the banded ordering.
    perm: Vec<usize>,
    bandwidth: usize,
}

impl Topology {
    pub fn new(region: &Region) -> Result<Arc<Topology>> {
        let n = region.len();
        let d = region.dim();
        let deg = 2 * d;
        if n + 4 * n * d >= u32::MAX as usize {
            return Err(Error::Size(format!("region with {n} sites is too large")));
        }
        let mut exit_map: BTreeMap<Site, u32> = BTreeMap::new();
        let mut raw = Vec::with_capacity(n * deg);
        let mut nb = vec![0i64; d];
        for i in 0..n {
            let site = region.site(i);
            for k in 0..deg {
                nb.copy_from_slice(&site);
                nb[k / 2] += if k % 2 == 0 { 1 } else { -1 };
                match region.index_of(&nb) {
                    Some(j) => raw.push((j as u32, false)),
                    None => {
                        let next = exit_map.len() as u32;
                        let e = *exit_map.entry(nb.clone()).or_insert(next);
                        raw.push((e, true));
                    }
                }
            }
        }
        // renumber exits in sorted order
        let mut remap = vec![0u32; exit_map.len()];
        let mut exits = Vec::with_capacity(exit_map.len());
        for (rank, (site, first)) in exit_map.into_iter().enumerate() {
            remap[first as usize] = rank as u32;
            exits.push(site);
        }
        let targets = raw
            .into_iter()
            .map(|(t, is_exit)| {
                if is_exit {
                    n as u32 + remap[t as usize]
                } else {
                    t
                }
            })
            .collect();
        let exit_class = exits
            .iter()
            .map(|s| region.exit_class_unchecked(s))
            .collect();
        let (perm, bandwidth) = band_ordering(region);
        Ok(Arc::new(Topology {
            n,
            deg,
            targets,
            exits,
            exit_class,
            perm,
            bandwidth,
        }))
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn exits(&self) -> &[Site] {
        &self.exits
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    fn direct_feasible(&self, auto: bool) -> bool {
        let work = self.n as f64 * (self.bandwidth as f64).powi(2);
        self.bandwidth <= MAX_BANDWIDTH && (!auto || work <= MAX_DIRECT_WORK)
    }
}

/// Ordering with the longest box axis outermost; bandwidth = n / longest
/// extent. Site sets keep their lexicographic order.
fn band_ordering(region: &Region) -> (Vec<usize>, usize) {
    let n = region.len();
    let d = region.dim();
    if !region.is_cuboid() {
        let mut bw = 0;
        let mut nb = vec![0i64; d];
        for i in 0..n {
            let s = region.site(i);
            for k in 0..2 * d {
                nb.copy_from_slice(&s);
                nb[k / 2] += if k % 2 == 0 { 1 } else { -1 };
                if let Some(j) = region.index_of(&nb) {
                    bw = bw.max(i.abs_diff(j));
                }
            }
        }
        return ((0..n).collect(), bw);
    }
    let (lo, hi) = region.bounds();
    let ext: Vec<usize> = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| (b - a + 1) as usize)
        .collect();
    let outer = (0..d)
        .max_by_key(|&k| (ext[k], std::cmp::Reverse(k)))
        .unwrap_or(0);
    let mut axes = vec![outer];
    axes.extend((0..d).filter(|&k| k != outer));
    let mut strides = vec![1usize; d];
    let mut acc = 1;
    for &k in axes.iter().rev() {
        strides[k] = acc;
        acc *= ext[k];
    }
    let perm = (0..n)
        .map(|i| {
            let s = region.site(i);
            (0..d).map(|k| (s[k] - lo[k]) as usize * strides[k]).sum()
        })
        .collect();
    (perm, n / ext[outer])
}

/// Solution of a linear problem on a quenched system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    /// One value per interior site, in region index order.
    pub values: Vec<f64>,
    /// Sup-norm residual of the defining identity.
    pub residual: f64,
    /// Rigorous bound on the sup-norm error, when certification was asked.
    pub error_bound: Option<f64>,
    pub sweeps: usize,
    pub method: SolveMethod,
}

/// g_B(x, .) on the interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenTable {
    pub source: Site,
    pub sites: Vec<Site>,
    pub values: Vec<f64>,
    /// Sup-norm residual of g = delta_x + g P.
    pub residual: f64,
    pub error_bound: Option<f64>,
}

impl GreenTable {
    pub fn get(&self, site: &[i64]) -> Option<f64> {
        self.sites
            .binary_search_by(|s| s.as_slice().cmp(site))
            .ok()
            .map(|i| self.values[i])
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        table_csv(&self.sites, &self.values, "g")
    }
}

/// Law of the exit position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDistribution {
    pub source: Site,
    pub masses: Vec<(Site, f64)>,
    pub frontal: f64,
    pub other: f64,
    pub residual: f64,
}

impl ExitDistribution {
    pub fn total(&self) -> f64 {
        self.frontal + self.other
    }

    pub fn to_csv(&self) -> String {
        let (s, v): (Vec<Site>, Vec<f64>) = self.masses.iter().cloned().unzip();
        table_csv(&s, &v, "mass")
    }
}

fn table_csv(sites: &[Site], values: &[f64], name: &str) -> String {
    let d = sites.first().map_or(0, |s| s.len());
    let mut out: String = (1..=d).map(|k| format!("x{k},")).collect();
    out.push_str(name);
    out.push('\n');
    for (s, v) in sites.iter().zip(values) {
        for x in s {
            out.push_str(&x.to_string());
            out.push(',');
        }
        out.push_str(&format!("{v:.17e}\n"));
    }
    out
}

/// Scalar result with its residual bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Value {
    pub value: f64,
    pub residual: f64,
    pub error_bound: Option<f64>,
}

/// The killed walk on a region under a fixed environment.
#[derive(Debug)]
pub struct QuenchedSystem<'r> {
    region: &'r Region,
    topo: Arc<Topology>,
    weights: Vec<f64>,
    lu: OnceLock<BandedLu>,
    incoming: OnceLock<(Vec<usize>, Vec<(u32, f64)>)>,
    exit_time_bound: OnceLock<f64>,
}

impl<'r> QuenchedSystem<'r> {
    pub fn new(region: &'r Region, env: &dyn Environment) -> Result<Self> {
        let topo = Topology::new(region)?;
        Self::with_topology(region, topo, env)
    }

    pub fn with_topology(
        region: &'r Region,
        topo: Arc<Topology>,
        env: &dyn Environment,
    ) -> Result<Self> {
        if env.dim() != region.dim() {
            return Err(Error::InvalidRegion(format!(
                "environment dimension {} does not match region dimension {}",
                env.dim(),
                region.dim()
            )));
        }
        let mut weights = Vec::with_capacity(topo.n * topo.deg);
        for i in 0..topo.n {
            weights.extend_from_slice(env.weights(&region.site(i)));
        }
        Self::from_weights(region, topo, weights)
    }

    /// Builds a system from explicit interior weights (`n * 2d`, region order).
    pub fn from_weights(
        region: &'r Region,
        topo: Arc<Topology>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != topo.n * topo.deg {
            return Err(Error::InvalidRegion(
                "weight table has the wrong length".into(),
            ));
        }
        Ok(QuenchedSystem {
            region,
            topo,
            weights,
            lu: OnceLock::new(),
            incoming: OnceLock::new(),
            exit_time_bound: OnceLock::new(),
        })
    }

    pub fn region(&self) -> &'r Region {
        self.region
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn len(&self) -> usize {
        self.topo.n
    }

    pub fn is_empty(&self) -> bool {
        self.topo.n == 0
    }

    pub fn weights_at(&self, i: usize) -> &[f64] {
        &self.weights[i * self.topo.deg..(i + 1) * self.topo.deg]
    }

    pub fn index(&self, site: &[i64]) -> Result<usize> {
        self.region
            .index_of(site)
            .ok_or_else(|| Error::NotInterior(site.to_vec()))
    }

    /// Local drift along `axis` at each interior site.
    pub fn drift_field(&self, axis: usize) -> Vec<f64> {
        (0..self.topo.n)
            .map(|i| {
                let w = self.weights_at(i);
                w[2 * axis] - w[2 * axis + 1]
            })
            .collect()
    }

    fn use_direct(&self, opts: &SolverOptions) -> bool {
        match opts.method {
            SolveMethod::Direct => true,
            SolveMethod::Iterative => false,
            SolveMethod::Auto => self.topo.direct_feasible(true),
        }
    }

    fn assemble(&self, pinned: Option<usize>) -> BandedLu {
        let t = &self.topo;
        let mut a = BandedLu::zeros(t.n, t.bandwidth);
        for i in 0..t.n {
            let r = t.perm[i];
            a.add(r, r, 1.0);
            if pinned == Some(i) {
                continue;
            }
            for k in 0..t.deg {
                let tg = t.targets[i * t.deg + k] as usize;
                if tg < t.n {
                    a.add(r, t.perm[tg], -self.weights[i * t.deg + k]);
                }
            }
        }
        if let Some(p) = pinned {
            a.pin_row(t.perm[p]);
        }
        a.factor();
        a
    }

    fn factored(&self) -> Result<&BandedLu> {
        if !self.topo.direct_feasible(false) {
            return Err(Error::Size(format!(
                "bandwidth {} exceeds the direct solver limit {MAX_BANDWIDTH}",
                self.topo.bandwidth
            )));
        }
        Ok(self.lu.get_or_init(|| self.assemble(None)))
    }

    /// Solves `u = source + P u` with `u = exit_values` on exits and
    /// `u(pinned) = value`.
    pub fn solve_column(
        &self,
        source: &[f64],
        exit_values: &[f64],
        pinned: Option<(usize, f64)>,
        opts: &SolverOptions,
    ) -> Result<Solution> {
        let t = &self.topo;
        if source.len() != t.n || exit_values.len() != t.exits.len() {
            return Err(Error::Precondition(
                "column problem has mismatched sizes".into(),
            ));
        }
        let direct = self.use_direct(opts);
        let (values, sweeps) = if direct {
            let mut rhs = vec![0.0; t.n];
            for i in 0..t.n {
                let mut b = source[i];
                for k in 0..t.deg {
                    let tg = t.targets[i * t.deg + k] as usize;
                    if tg >= t.n {
                        b += self.weights[i * t.deg + k] * exit_values[tg - t.n];
                    }
                }
                rhs[t.perm[i]] = b;
            }
            let fresh;
            let lu = match pinned {
                Some((p, v)) => {
                    rhs[t.perm[p]] = v;
                    if !t.direct_feasible(false) {
                        return Err(Error::Size("band too wide for a direct solve".into()));
                    }
                    fresh = self.assemble(Some(p));
                    &fresh
                }
                None => self.factored()?,
            };
            lu.solve(&mut rhs);
            ((0..t.n).map(|i| rhs[t.perm[i]]).collect(), 0)
        } else {
            self.gauss_seidel_column(source, exit_values, pinned, opts)?
        };
        let residual = self.column_residual(&values, source, exit_values, pinned);
        let error_bound = if opts.certify {
            Some(residual * self.exit_time_bound(opts)?)
        } else {
            None
        };
        Ok(Solution {
            values,
            residual,
            error_bound,
            sweeps,
            method: if direct {
                SolveMethod::Direct
            } else {
                SolveMethod::Iterative
            },
        })
    }

    fn gauss_seidel_column(
        &self,
        source: &[f64],
        exit_values: &[f64],
        pinned: Option<(usize, f64)>,
        opts: &SolverOptions,
    ) -> Result<(Vec<f64>, usize)> {
        let t = &self.topo;
        let mut u = vec![0.0; t.n];
        if let Some((p, v)) = pinned {
            u[p] = v;
        }
        let pin = pinned.map(|(p, _)| p);
        let mut monitor = Monitor::new(opts.tol);
        let mut relax = Relaxation::new();
        for sweep in 1..=opts.max_sweeps {
            let omega = relax.omega;
            let mut change: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for i in 0..t.n {
                if pin == Some(i) {
                    continue;
                }
                let row = i * t.deg;
                let mut acc = source[i];
                for k in 0..t.deg {
                    let tg = t.targets[row + k] as usize;
                    let w = self.weights[row + k];
                    acc += w * if tg < t.n {
                        u[tg]
                    } else {
                        exit_values[tg - t.n]
                    };
                }
                let step = omega * (acc - u[i]);
                change = change.max(step.abs());
                scale = scale.max(acc.abs());
                u[i] += step;
            }
            if relax.observe(change) {
                monitor = Monitor::new(opts.tol);
            } else if monitor.done(change, scale) {
                return Ok((u, sweep));
            }
        }
        Err(Error::NonConvergence {
            iterations: opts.max_sweeps,
            last_change: monitor.last,
        })
    }

    fn column_residual(
        &self,
        u: &[f64],
        source: &[f64],
        exit_values: &[f64],
        pinned: Option<(usize, f64)>,
    ) -> f64 {
        let t = &self.topo;
        let mut r: f64 = 0.0;
        for i in 0..t.n {
            if let Some((p, v)) = pinned {
                if p == i {
                    r = r.max((u[i] - v).abs());
                    continue;
                }
            }
            let row = i * t.deg;
            let mut acc = source[i];
            for k in 0..t.deg {
                let tg = t.targets[row + k] as usize;
                acc += self.weights[row + k]
                    * if tg < t.n {
                        u[tg]
                    } else {
                        exit_values[tg - t.n]
                    };
            }
            r = r.max((acc - u[i]).abs());
        }
        r
    }

    fn incoming(&self) -> &(Vec<usize>, Vec<(u32, f64)>) {
        self.incoming.get_or_init(|| {
            let t = &self.topo;
            let mut count = vec![0usize; t.n + 1];
            for &tg in &t.targets {
                if (tg as usize) < t.n {
                    count[tg as usize + 1] += 1;
                }
            }
            for j in 0..t.n {
                count[j + 1] += count[j];
            }
            let mut fill = count.clone();
            let mut entries = vec![(0u32, 0.0); count[t.n]];
            for i in 0..t.n {
                for k in 0..t.deg {
                    let tg = t.targets[i * t.deg + k] as usize;
                    if tg < t.n {
                        entries[fill[tg]] = (i as u32, self.weights[i * t.deg + k]);
                        fill[tg] += 1;
                    }
                }
            }
            (count, entries)
        })
    }

    /// Solves the row problem `g = delta_x + g P`, i.e. `g(y) = g_B(x, y)`.
    pub fn solve_row(&self, x: usize, opts: &SolverOptions) -> Result<Solution> {
        let t = &self.topo;
        let direct = self.use_direct(opts);
        let (values, sweeps) = if direct {
            let lu = self.factored()?;
            let mut rhs = vec![0.0; t.n];
            rhs[t.perm[x]] = 1.0;
            lu.solve_transpose(&mut rhs);
            ((0..t.n).map(|i| rhs[t.perm[i]]).collect(), 0)
        } else {
            let (start, entries) = self.incoming();
            let mut g = vec![0.0; t.n];
            let mut monitor = Monitor::new(opts.tol);
            let mut relax = Relaxation::new();
            let mut done = None;
            for sweep in 1..=opts.max_sweeps {
                let omega = relax.omega;
                let mut change: f64 = 0.0;
                let mut scale: f64 = 0.0;
                for j in 0..t.n {
                    let mut acc = if j == x { 1.0 } else { 0.0 };
                    for &(i, w) in &entries[start[j]..start[j + 1]] {
                        acc += w * g[i as usize];
                    }
                    let step = omega * (acc - g[j]);
                    change = change.max(step.abs());
                    scale = scale.max(acc.abs());
                    g[j] += step;
                }
                if relax.observe(change) {
                    monitor = Monitor::new(opts.tol);
                } else if monitor.done(change, scale) {
                    done = Some(sweep);
                    break;
                }
            }
            match done {
                Some(s) => (g, s),
                None => {
                    return Err(Error::NonConvergence {
                        iterations: opts.max_sweeps,
                        last_change: monitor.last,
                    })
                }
            }
        };
        let (res_sup, res_l1) = self.row_residual(&values, x);
        let error_bound = if opts.certify {
            Some(res_l1 * self.exit_time_bound(opts)?)
        } else {
            None
        };
        Ok(Solution {
            values,
            residual: res_sup,
            error_bound,
            sweeps,
            method: if direct {
                SolveMethod::Direct
            } else {
                SolveMethod::Iterative
            },
        })
    }

    fn row_residual(&self, g: &[f64], x: usize) -> (f64, f64) {
        let (start, entries) = self.incoming();
        let mut sup: f64 = 0.0;
        let mut l1 = 0.0;
        for j in 0..self.topo.n {
            let mut acc = if j == x { 1.0 } else { 0.0 };
            for &(i, w) in &entries[start[j]..start[j + 1]] {
                acc += w * g[i as usize];
            }
            let r = (acc - g[j]).abs();
            sup = sup.max(r);
            l1 += r;
        }
        (sup, l1)
    }

    /// Upper bound on max_z E_z(T_B): if tau solves tau = 1 + P tau up to a
    /// residual r < 1, then the true maximum is at most max(tau) / (1 - r).
    /// Every Green's function value is bounded by this quantity, which turns
    /// residuals into error bounds.
    pub fn exit_time_bound(&self, opts: &SolverOptions) -> Result<f64> {
        if let Some(b) = self.exit_time_bound.get() {
            return Ok(*b);
        }
        let inner = SolverOptions {
            certify: false,
            ..*opts
        };
        let ones = vec![1.0; self.topo.n];
        let zeros = vec![0.0; self.topo.exits.len()];
        let sol = self.solve_column(&ones, &zeros, None, &inner)?;
        if sol.residual >= 1.0 {
            return Err(Error::NonConvergence {
                iterations: sol.sweeps,
                last_change: sol.residual,
            });
        }
        let max = sol.values.iter().cloned().fold(0.0, f64::max);
        let b = max / (1.0 - sol.residual);
        Ok(*self.exit_time_bound.get_or_init(|| b))
    }

    pub fn green_row(&self, x: &[i64], opts: &SolverOptions) -> Result<GreenTable> {
        let xi = self.index(x)?;
        let sol = self.solve_row(xi, opts)?;
        Ok(GreenTable {
            source: x.to_vec(),
            sites: self.region.interior().collect(),
            values: sol.values,
            residual: sol.residual,
            error_bound: sol.error_bound,
        })
    }

    /// G_B[f](x) for f given on the interior in region order.
    pub fn green_operator(&self, f: &[f64], x: &[i64], opts: &SolverOptions) -> Result<Value> {
        let xi = self.index(x)?;
        let zeros = vec![0.0; self.topo.exits.len()];
        let sol = self.solve_column(f, &zeros, None, opts)?;
        Ok(Value {
            value: sol.values[xi],
            residual: sol.residual,
            error_bound: sol.error_bound,
        })
    }

    /// G_B[f] at every interior site.
    pub fn green_operator_field(&self, f: &[f64], opts: &SolverOptions) -> Result<Solution> {
        let zeros = vec![0.0; self.topo.exits.len()];
        self.solve_column(f, &zeros, None, opts)
    }

    /// z -> P_z(H_y < T_B) over the interior.
    pub fn hitting_field(&self, y: usize, opts: &SolverOptions) -> Result<Solution> {
        let zeros = vec![0.0; self.topo.n];
        let exits = vec![0.0; self.topo.exits.len()];
        self.solve_column(&zeros, &exits, Some((y, 1.0)), opts)
    }

    pub fn hitting_probability(&self, z: &[i64], y: &[i64], opts: &SolverOptions) -> Result<Value> {
        let zi = self.index(z)?;
        let yi = self.index(y)?;
        let sol = self.hitting_field(yi, opts)?;
        Ok(Value {
            value: sol.values[zi],
            residual: sol.residual,
            error_bound: sol.error_bound,
        })
    }

    /// Probability that a step from `y` along direction `k` never comes back
    /// to `y` before exiting, given the hitting field of `y`.
    #[inline]
    pub fn escape_after_step(&self, y: usize, k: usize, hit: &[f64]) -> f64 {
        let tg = self.topo.targets[y * self.topo.deg + k] as usize;
        if tg < self.topo.n {
            1.0 - hit[tg]
        } else {
            1.0
        }
    }

    /// P_y(no return to y before T_B).
    pub fn no_return_probability(&self, y: &[i64], opts: &SolverOptions) -> Result<Value> {
        let yi = self.index(y)?;
        let sol = self.hitting_field(yi, opts)?;
        let w = self.weights_at(yi);
        let value = (0..self.topo.deg)
            .map(|k| w[k] * self.escape_after_step(yi, k, &sol.values))
            .sum();
        Ok(Value {
            value,
            residual: sol.residual,
            error_bound: sol.error_bound,
        })
    }

    /// E_x(T_B).
    pub fn expected_exit_time(&self, x: &[i64], opts: &SolverOptions) -> Result<Value> {
        let ones = vec![1.0; self.topo.n];
        self.green_operator(&ones, x, opts)
    }

    /// P_x(X_{T_B} frontal) at every interior site.
    pub fn frontal_exit_field(&self, opts: &SolverOptions) -> Result<Solution> {
        let zeros = vec![0.0; self.topo.n];
        let exits: Vec<f64> = self
            .topo
            .exit_class
            .iter()
            .map(|c| if *c == ExitClass::Frontal { 1.0 } else { 0.0 })
            .collect();
        self.solve_column(&zeros, &exits, None, opts)
    }

    pub fn exit_distribution(&self, x: &[i64], opts: &SolverOptions) -> Result<ExitDistribution> {
        let xi = self.index(x)?;
        let g = self.solve_row(xi, opts)?;
        let t = &self.topo;
        let mut mass = vec![0.0; t.exits.len()];
        for i in 0..t.n {
            for k in 0..t.deg {
                let tg = t.targets[i * t.deg + k] as usize;
                if tg >= t.n {
                    mass[tg - t.n] += g.values[i] * self.weights[i * t.deg + k];
                }
            }
        }
        let mut frontal = 0.0;
        let mut other = 0.0;
        for (m, c) in mass.iter().zip(&t.exit_class) {
            match c {
                ExitClass::Frontal => frontal += m,
                ExitClass::Other => other += m,
            }
        }
        Ok(ExitDistribution {
            source: x.to_vec(),
            masses: t.exits.iter().cloned().zip(mass).collect(),
            frontal,
            other,
            residual: g.residual,
        })
    }

    /// Partial sums `sum_{n<k} (delta_x P^n)` for k = 1..=steps.
    pub fn neumann_iterates(&self, x: &[i64], steps: usize) -> Result<Vec<Vec<f64>>> {
        let xi = self.index(x)?;
        let t = &self.topo;
        let mut term = vec![0.0; t.n];
        term[xi] = 1.0;
        let mut sum = vec![0.0; t.n];
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            for (s, v) in sum.iter_mut().zip(&term) {
                *s += v;
            }
            out.push(sum.clone());
            let mut next = vec![0.0; t.n];
            for i in 0..t.n {
                if term[i] == 0.0 {
                    continue;
                }
                for k in 0..t.deg {
                    let tg = t.targets[i * t.deg + k] as usize;
                    if tg < t.n {
                        next[tg] += term[i] * self.weights[i * t.deg + k];
                    }
                }
            }
            term = next;
        }
        Ok(out)
    }
}

/// Over-relaxation factor for the sweeps. The first sweeps are plain
/// Gauss-Seidel; their contraction ratio q then sets Young's factor
/// `2 / (1 + sqrt(1 - q))`. If the changes later grow, it drops back to 1.
struct Relaxation {
    omega: f64,
    history: Vec<f64>,
    settled: bool,
    reference: f64,
}

impl Relaxation {
    const PROBE: usize = 24;
    const MAX_OMEGA: f64 = 1.95;

    fn new() -> Self {
        Relaxation {
            omega: 1.0,
            history: Vec::new(),
            settled: false,
            reference: 0.0,
        }
    }

    /// Records a sweep; true when `omega` changed and the stopping monitor
    /// must restart.
    fn observe(&mut self, change: f64) -> bool {
        if self.settled {
            if self.omega > 1.0 && change > 10.0 * self.reference {
                self.omega = 1.0;
                return true;
            }
            return false;
        }
        self.history.push(change);
        if self.history.len() < Self::PROBE {
            return false;
        }
        self.settled = true;
        let h = &self.history;
        let q = (h[Self::PROBE - 1] / h[Self::PROBE - 9]).powf(1.0 / 8.0);
        if !(q > 0.5 && q < 1.0) {
            return false;
        }
        self.omega = (2.0 / (1.0 + (1.0 - q).sqrt())).min(Self::MAX_OMEGA);
        self.reference = change;
        true
    }
}

/// Stopping rule for sweeps: the per-sweep change must be below `tol`, and
/// so must its geometric extrapolation `change * q / (1 - q)`, where `q` is
/// the observed contraction ratio over the last 8 sweeps. Changes at the
/// rounding level of the solution also stop the sweeps.
struct Monitor {
    tol: f64,
    history: Vec<f64>,
    last: f64,
}

impl Monitor {
    fn new(tol: f64) -> Self {
        Monitor {
            tol,
            history: Vec::new(),
            last: f64::INFINITY,
        }
    }

    fn done(&mut self, change: f64, scale: f64) -> bool {
        self.last = change;
        if change <= 16.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE) {
            return true;
        }
        self.history.push(change);
        if change > self.tol {
            return false;
        }
        let h = &self.history;
        if h.len() < 9 {
            return false;
        }
        let prev = h[h.len() - 9];
        let q = (change / prev).powf(1.0 / 8.0);
        q < 1.0 && change * q / (1.0 - q) <= self.tol
    }
}

// Free-function forms of the solver operations.

pub fn green_row(
    env: &dyn Environment,
    region: &Region,
    x: &[i64],
    tol: f64,
) -> Result<GreenTable> {
    QuenchedSystem::new(region, env)?.green_row(x, &SolverOptions::with_tol(tol))
}

/// G_B[f](x) with `f` a function of the site.
pub fn green_operator(
    env: &dyn Environment,
    region: &Region,
    f: impl Fn(&[i64]) -> f64,
    x: &[i64],
    tol: f64,
) -> Result<Value> {
    let sys = QuenchedSystem::new(region, env)?;
    let fv: Vec<f64> = region.interior().map(|s| f(&s)).collect();
    sys.green_operator(&fv, x, &SolverOptions::with_tol(tol))
}

pub fn hitting_probability(
    env: &dyn Environment,
    region: &Region,
    z: &[i64],
    y: &[i64],
    tol: f64,
) -> Result<Value> {
    QuenchedSystem::new(region, env)?.hitting_probability(z, y, &SolverOptions::with_tol(tol))
}

pub fn no_return_probability(
    env: &dyn Environment,
    region: &Region,
    y: &[i64],
    tol: f64,
) -> Result<Value> {
    QuenchedSystem::new(region, env)?.no_return_probability(y, &SolverOptions::with_tol(tol))
}

pub fn exit_distribution(
    env: &dyn Environment,
    region: &Region,
    x: &[i64],
    tol: f64,
) -> Result<ExitDistribution> {
    QuenchedSystem::new(region, env)?.exit_distribution(x, &SolverOptions::with_tol(tol))
}

pub fn expected_exit_time(
    env: &dyn Environment,
    region: &Region,
    x: &[i64],
    tol: f64,
) -> Result<Value> {
    QuenchedSystem::new(region, env)?.expected_exit_time(x, &SolverOptions::with_tol(tol))
}
