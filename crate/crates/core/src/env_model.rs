//! Single-site environment laws, their moments, and sampled environments.
//!
//! Directions are indexed `2i` for `+e_{i+1}` and `2i + 1` for `-e_{i+1}`,
//! so index 0 is `e_1` and index 1 is `-e_1`.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Region;
use crate::rng::{site_hash, unit_interval};

const SUM_TOL: f64 = 1e-12;

/// Index of the signed unit vector `sign * e_{axis+1}`.
#[inline]
pub fn dir_index(axis: usize, positive: bool) -> usize {
    2 * axis + usize::from(!positive)
}

/// Axis (0-based) and sign (+1/-1) of direction index `k`.
#[inline]
pub fn dir_axis_sign(k: usize) -> (usize, i64) {
    (k / 2, if k % 2 == 0 { 1 } else { -1 })
}

/// `e . e_1` for direction index `k`.
#[inline]
pub fn e1_component(k: usize) -> f64 {
    match k {
        0 => 1.0,
        1 => -1.0,
        _ => 0.0,
    }
}

/// Weights over the 2d signed unit steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    weights: Vec<f64>,
}

impl ProbVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 4 || weights.len() % 2 != 0 {
            return Err(Error::InvalidProbVector(format!(
                "expected 2d >= 4 weights, got {}",
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && **w <= 1.0)) {
            return Err(Error::InvalidProbVector(format!(
                "weight {w} outside [0,1]"
            )));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidProbVector(format!(
                "weights sum to {s}, not 1"
            )));
        }
        Ok(ProbVector { weights })
    }

    /// Simple symmetric random walk weights, 1/(2d) each.
    pub fn ssrw(d: usize) -> Self {
        ProbVector {
            weights: vec![1.0 / (2 * d) as f64; 2 * d],
        }
    }

    /// SSRW with `p(+-e_1) = 1/(2d) +- lambda/2`.
    pub fn drifted(d: usize, lambda: f64) -> Result<Self> {
        let mut w = vec![1.0 / (2 * d) as f64; 2 * d];
        w[0] += lambda / 2.0;
        w[1] -= lambda / 2.0;
        ProbVector::new(w)
    }

    pub fn dim(&self) -> usize {
        self.weights.len() / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, k: usize) -> f64 {
        self.weights[k]
    }

    /// Local drift vector, sum of w(e) e.
    pub fn drift(&self) -> Vec<f64> {
        drift_of(&self.weights)
    }

    /// max_e |w(e) - 1/(2d)|
    pub fn max_deviation(&self) -> f64 {
        let c = 1.0 / self.weights.len() as f64;
        self.weights
            .iter()
            .map(|w| (w - c).abs())
            .fold(0.0, f64::max)
    }

    fn permuted(&self, perm: &[usize]) -> ProbVector {
        let mut w = vec![0.0; self.weights.len()];
        for (k, &pk) in perm.iter().enumerate() {
            w[pk] = self.weights[k];
        }
        ProbVector { weights: w }
    }
}

#[inline]
pub fn drift_of(w: &[f64]) -> Vec<f64> {
    (0..w.len() / 2).map(|i| w[2 * i] - w[2 * i + 1]).collect()
}

/// Parametric single-site law.
#[derive(Debug, Clone, PartialEq)]
pub enum LawFamily {
    PointMass(ProbVector),
    /// Uniform signed axis (i, s); `p = SSRW + a` on `s e_i`, `- a` on
    /// `-s e_i`, then `+ (lambda_shift / 2)(e . e_1)`.
    SignedAxisKick {
        amplitude: f64,
        lambda_shift: f64,
    },
    /// `omega(0, e) = p(e) + (lambda_shift / 2)(e . e_1)` with `p ~ base`.
    Shifted {
        base: Box<EnvironmentLaw>,
        lambda_shift: f64,
    },
    Empirical(Vec<(ProbVector, f64)>),
    /// Site-dependent law, only for building closed-form oracles.
    InhomogeneousTest {
        default: Box<EnvironmentLaw>,
        overrides: Vec<(Vec<i64>, EnvironmentLaw)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentLaw {
    d: usize,
    family: LawFamily,
}

impl EnvironmentLaw {
    pub fn point_mass(p: ProbVector) -> Self {
        EnvironmentLaw {
            d: p.dim(),
            family: LawFamily::PointMass(p),
        }
    }

    pub fn ssrw(d: usize) -> Self {
        Self::point_mass(ProbVector::ssrw(d))
    }

    pub fn signed_axis_kick(d: usize, amplitude: f64, lambda_shift: f64) -> Result<Self> {
        check_dim(d)?;
        if !(amplitude >= 0.0) {
            return Err(Error::InvalidLaw(format!(
                "kick amplitude must be >= 0, got {amplitude}"
            )));
        }
        let law = EnvironmentLaw {
            d,
            family: LawFamily::SignedAxisKick {
                amplitude,
                lambda_shift,
            },
        };
        law.validate_support()?;
        Ok(law)
    }

    pub fn empirical(support: Vec<(ProbVector, f64)>) -> Result<Self> {
        let d = support
            .first()
            .map(|(p, _)| p.dim())
            .ok_or_else(|| Error::InvalidLaw("empty support".into()))?;
        if support.iter().any(|(p, _)| p.dim() != d) {
            return Err(Error::InvalidLaw(
                "support vectors differ in dimension".into(),
            ));
        }
        if support.iter().any(|(_, q)| !(*q > 0.0)) {
            return Err(Error::InvalidLaw(
                "support probabilities must be positive".into(),
            ));
        }
        let total: f64 = support.iter().map(|(_, q)| q).sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidLaw(format!(
                "support probabilities sum to {total}"
            )));
        }
        let law = EnvironmentLaw {
            d,
            family: LawFamily::Empirical(support),
        };
        law.validate_support()?;
        Ok(law)
    }

    pub fn inhomogeneous_test(
        default: EnvironmentLaw,
        overrides: Vec<(Vec<i64>, EnvironmentLaw)>,
    ) -> Result<Self> {
        let d = default.d;
        if overrides
            .iter()
            .any(|(s, l)| s.len() != d || l.d != d || !l.is_homogeneous())
        {
            return Err(Error::InvalidLaw(
                "inhomogeneous overrides must be homogeneous laws of matching dimension".into(),
            ));
        }
        if !default.is_homogeneous() {
            return Err(Error::InvalidLaw("default law must be homogeneous".into()));
        }
        Ok(EnvironmentLaw {
            d,
            family: LawFamily::InhomogeneousTest {
                default: Box::new(default),
                overrides,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn family(&self) -> &LawFamily {
        &self.family
    }

    pub fn is_homogeneous(&self) -> bool {
        !matches!(self.family, LawFamily::InhomogeneousTest { .. })
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self.family, LawFamily::PointMass(_))
    }

    /// Finite support with probabilities. All homogeneous families have one.
    pub fn support(&self) -> Result<Vec<(ProbVector, f64)>> {
        match &self.family {
            LawFamily::PointMass(p) => Ok(vec![(p.clone(), 1.0)]),
            LawFamily::SignedAxisKick {
                amplitude,
                lambda_shift,
            } => {
                let d = self.d;
                let q = 1.0 / (2 * d) as f64;
                Ok((0..2 * d)
                    .map(|k| {
                        let mut w = vec![q; 2 * d];
                        w[k] += amplitude;
                        w[k ^ 1] -= amplitude;
                        w[0] += lambda_shift / 2.0;
                        w[1] -= lambda_shift / 2.0;
                        (ProbVector { weights: w }, q)
                    })
                    .collect())
            }
            LawFamily::Shifted { base, lambda_shift } => Ok(base
                .support()?
                .into_iter()
                .map(|(mut p, q)| {
                    p.weights[0] += lambda_shift / 2.0;
                    p.weights[1] -= lambda_shift / 2.0;
                    (p, q)
                })
                .collect()),
            LawFamily::Empirical(s) => Ok(s.clone()),
            LawFamily::InhomogeneousTest { .. } => Err(Error::UnsupportedFamily(
                "inhomogeneous test law has no single-site support".into(),
            )),
        }
    }

    /// Support of the law at a given site (handles inhomogeneous laws).
    pub fn support_at(&self, site: &[i64]) -> Result<Vec<(ProbVector, f64)>> {
        match &self.family {
            LawFamily::InhomogeneousTest { default, overrides } => overrides
                .iter()
                .find(|(s, _)| s.as_slice() == site)
                .map(|(_, l)| l.support())
                .unwrap_or_else(|| default.support()),
            _ => self.support(),
        }
    }

    fn validate_support(&self) -> Result<()> {
        for (p, _) in self.support()? {
            if let Some(w) = p.weights.iter().find(|w| !(**w >= 0.0 && **w <= 1.0)) {
                return Err(Error::InvalidLaw(format!(
                    "support point {:?} has weight {w} outside [0,1]",
                    p.weights
                )));
            }
            let s: f64 = p.weights.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(Error::InvalidLaw(format!(
                    "support point {:?} sums to {s}",
                    p.weights
                )));
            }
        }
        if !self.is_point_mass() {
            let eps = eps_of_support(&self.support()?, self.d);
            if eps >= 1.0 {
                return Err(Error::InvalidLaw(format!(
                    "perturbation size eps = {eps} must be < 1"
                )));
            }
        }
        Ok(())
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidLaw(format!(
            "dimension must be >= 2, got {d}"
        )));
    }
    Ok(())
}

/// Adds `(lambda_shift / 2)(e . e_1)` to every support point of `base`.
pub fn build_shifted_law(base: &EnvironmentLaw, lambda_shift: f64) -> Result<EnvironmentLaw> {
    if !base.is_homogeneous() {
        return Err(Error::UnsupportedFamily(
            "cannot shift an inhomogeneous test law".into(),
        ));
    }
    for (p, _) in base.support()? {
        let up = p.weights[0] + lambda_shift / 2.0;
        let down = p.weights[1] - lambda_shift / 2.0;
        if !(0.0..=1.0).contains(&up) || !(0.0..=1.0).contains(&down) {
            return Err(Error::InvalidShift {
                shift: lambda_shift,
                point: format!("{:?}", p.weights),
            });
        }
    }
    let law = EnvironmentLaw {
        d: base.d,
        family: LawFamily::Shifted {
            base: Box::new(base.clone()),
            lambda_shift,
        },
    };
    if !base.is_point_mass() {
        law.validate_support()?;
    }
    Ok(law)
}

/// Exact moments of a single-site law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawMoments {
    pub d: usize,
    pub eps: f64,
    pub sigma2: f64,
    pub lambda: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Cov(omega(0, e_1), omega(0, -e_1)).
    pub cov_axis: f64,
    pub kappa: f64,
    /// eps == 0: the law is the SSRW point mass.
    pub degenerate: bool,
    /// eps in (0, 1).
    pub within_perturbative_range: bool,
}

impl LawMoments {
    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }
}

fn eps_of_support(support: &[(ProbVector, f64)], d: usize) -> f64 {
    4.0 * d as f64
        * support
            .iter()
            .map(|(p, _)| p.max_deviation())
            .fold(0.0, f64::max)
}

fn finish_moments(d: usize, eps: f64, mean: Vec<f64>, var: Vec<f64>, cov_axis: f64) -> LawMoments {
    let sigma2 = var.iter().sum::<f64>().max(0.0);
    LawMoments {
        d,
        eps,
        sigma2,
        lambda: mean[0] - mean[1],
        mean,
        var,
        cov_axis,
        kappa: 1.0 / (4 * d) as f64,
        degenerate: eps == 0.0,
        within_perturbative_range: eps > 0.0 && eps < 1.0,
    }
}

/// Moments obtained by direct summation over a finite support.
pub fn support_moments(support: &[(ProbVector, f64)], d: usize) -> LawMoments {
    let n = 2 * d;
    let mut mean = vec![0.0; n];
    for (p, q) in support {
        for k in 0..n {
            mean[k] += q * p.weights[k];
        }
    }
    let mut var = vec![0.0; n];
    let mut cov_axis = 0.0;
    for (p, q) in support {
        for k in 0..n {
            let c = p.weights[k] - mean[k];
            var[k] += q * c * c;
        }
        cov_axis += q * (p.weights[0] - mean[0]) * (p.weights[1] - mean[1]);
    }
    finish_moments(d, eps_of_support(support, d), mean, var, cov_axis)
}

/// Exact moments: closed forms for the parametric families, composition for
/// shifted laws, and summation for empirical laws.
pub fn law_moments(law: &EnvironmentLaw) -> Result<LawMoments> {
    let d = law.d;
    match &law.family {
        LawFamily::PointMass(p) => Ok(finish_moments(
            d,
            4.0 * d as f64 * p.max_deviation(),
            p.weights.clone(),
            vec![0.0; 2 * d],
            0.0,
        )),
        LawFamily::SignedAxisKick {
            amplitude: a,
            lambda_shift: s,
        } => {
            let q = 1.0 / (2 * d) as f64;
            let mut mean = vec![q; 2 * d];
            mean[0] += s / 2.0;
            mean[1] -= s / 2.0;
            let v = a * a / d as f64;
            Ok(finish_moments(
                d,
                4.0 * d as f64 * (a + s.abs() / 2.0),
                mean,
                vec![v; 2 * d],
                -v,
            ))
        }
        LawFamily::Shifted { base, lambda_shift } => {
            let b = law_moments(base)?;
            let mut mean = b.mean.clone();
            mean[0] += lambda_shift / 2.0;
            mean[1] -= lambda_shift / 2.0;
            let eps = eps_of_support(&law.support()?, d);
            Ok(finish_moments(d, eps, mean, b.var, b.cov_axis))
        }
        LawFamily::Empirical(s) => Ok(support_moments(s, d)),
        LawFamily::InhomogeneousTest { .. } => Err(Error::UnsupportedFamily(
            "moments are defined only for homogeneous laws".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// Cumulative table over a finite support.
#[derive(Debug, Clone)]
struct SupportTable {
    cum: Vec<f64>,
    weights: Vec<f64>,
    width: usize,
}

impl SupportTable {
    fn new(support: &[(ProbVector, f64)]) -> Self {
        let width = support[0].0.weights.len();
        let mut cum = Vec::with_capacity(support.len());
        let mut acc = 0.0;
        let mut weights = Vec::with_capacity(support.len() * width);
        for (p, q) in support {
            acc += q;
            cum.push(acc);
            weights.extend_from_slice(&p.weights);
        }
        if let Some(last) = cum.last_mut() {
            *last = f64::INFINITY;
        }
        SupportTable {
            cum,
            weights,
            width,
        }
    }

    #[inline]
    fn pick(&self, u: f64) -> &[f64] {
        let i = self.cum.iter().position(|&c| u < c).unwrap_or(0);
        &self.weights[i * self.width..(i + 1) * self.width]
    }
}

/// Turns uniforms into site vectors for a law.
#[derive(Debug, Clone)]
pub struct LawSampler {
    d: usize,
    default: SupportTable,
    overrides: HashMap<Vec<i64>, SupportTable>,
}

impl LawSampler {
    pub fn new(law: &EnvironmentLaw) -> Result<Self> {
        match &law.family {
            LawFamily::InhomogeneousTest { default, overrides } => Ok(LawSampler {
                d: law.d,
                default: SupportTable::new(&default.support()?),
                overrides: overrides
                    .iter()
                    .map(|(s, l)| Ok((s.clone(), SupportTable::new(&l.support()?))))
                    .collect::<Result<_>>()?,
            }),
            _ => Ok(LawSampler {
                d: law.d,
                default: SupportTable::new(&law.support()?),
                overrides: HashMap::new(),
            }),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn pick(&self, site: &[i64], u: f64) -> &[f64] {
        if self.overrides.is_empty() {
            return self.default.pick(u);
        }
        self.overrides.get(site).unwrap_or(&self.default).pick(u)
    }
}

/// Read access to the weights omega(x, .) of an environment.
pub trait Environment: Sync {
    fn dim(&self) -> usize;
    fn weights(&self, site: &[i64]) -> &[f64];
}

/// The same vector at every site.
#[derive(Debug, Clone)]
pub struct HomogeneousEnvironment(pub ProbVector);

impl Environment for HomogeneousEnvironment {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn weights(&self, _site: &[i64]) -> &[f64] {
        &self.0.weights
    }
}

/// An i.i.d. environment evaluated on demand: omega(x) is a pure function of
/// (seed, x), so any query order yields the same environment.
#[derive(Debug, Clone)]
pub struct LazyEnvironment {
    sampler: Arc<LawSampler>,
    seed: u64,
}

impl LazyEnvironment {
    pub fn new(sampler: Arc<LawSampler>, seed: u64) -> Self {
        LazyEnvironment { sampler, seed }
    }

    pub fn from_law(law: &EnvironmentLaw, seed: u64) -> Result<Self> {
        Ok(Self::new(Arc::new(LawSampler::new(law)?), seed))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Environment for LazyEnvironment {
    fn dim(&self) -> usize {
        self.sampler.d
    }
    #[inline]
    fn weights(&self, site: &[i64]) -> &[f64] {
        self.sampler
            .pick(site, unit_interval(site_hash(self.seed, site)))
    }
}

/// Materialised environment on a finite site set, extendable lazily with the
/// same per-site streams.
#[derive(Debug, Clone)]
pub struct EnvironmentRealization {
    sites: HashMap<Vec<i64>, ProbVector>,
    lazy: LazyEnvironment,
}

impl EnvironmentRealization {
    pub fn seed(&self) -> u64 {
        self.lazy.seed
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn get(&self, site: &[i64]) -> Option<&ProbVector> {
        self.sites.get(site)
    }

    /// Materialises `site` (no-op if already present).
    pub fn extend(&mut self, site: &[i64]) -> &ProbVector {
        if !self.sites.contains_key(site) {
            let w = ProbVector {
                weights: self.lazy.weights(site).to_vec(),
            };
            self.sites.insert(site.to_vec(), w);
        }
        &self.sites[site]
    }

    pub fn lazy(&self) -> &LazyEnvironment {
        &self.lazy
    }
}

impl Environment for EnvironmentRealization {
    fn dim(&self) -> usize {
        self.lazy.dim()
    }
    fn weights(&self, site: &[i64]) -> &[f64] {
        match self.sites.get(site) {
            Some(p) => &p.weights,
            None => self.lazy.weights(site),
        }
    }
}

/// Samples an i.i.d. environment on the interior of `region`.
pub fn sample_environment(
    law: &EnvironmentLaw,
    region: &Region,
    seed: u64,
) -> Result<EnvironmentRealization> {
    if region.dim() != law.d {
        return Err(Error::InvalidRegion(format!(
            "region dimension {} does not match law dimension {}",
            region.dim(),
            law.d
        )));
    }
    let lazy = LazyEnvironment::from_law(law, seed)?;
    let sites = region
        .interior()
        .map(|s| {
            let w = lazy.weights(&s).to_vec();
            (s, ProbVector { weights: w })
        })
        .collect();
    Ok(EnvironmentRealization { sites, lazy })
}

// ---------------------------------------------------------------------------
// Conditions K1-K5

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub id: String,
    pub status: CheckStatus,
    /// Positive when the condition holds with room to spare.
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KReport {
    pub rho: f64,
    pub eps0: f64,
    pub checks: Vec<ConditionCheck>,
}

impl KReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn get(&self, id: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}

/// Direction permutations generating the isometries of Z^d fixing e_1
/// (d = 2) or its rotations fixing e_1 (d >= 3).
fn symmetry_generators(d: usize) -> Vec<Vec<usize>> {
    let id: Vec<usize> = (0..2 * d).collect();
    if d == 2 {
        let mut p = id;
        p.swap(2, 3);
        return vec![p];
    }
    let mut gens = Vec::new();
    for i in 1..d {
        for j in i + 1..d {
            // +e_i -> +e_j -> -e_i -> -e_j -> +e_i
            let mut p = id.clone();
            p[dir_index(i, true)] = dir_index(j, true);
            p[dir_index(j, true)] = dir_index(i, false);
            p[dir_index(i, false)] = dir_index(j, false);
            p[dir_index(j, false)] = dir_index(i, true);
            gens.push(p);
        }
    }
    gens
}

fn merge_support(support: &[(ProbVector, f64)]) -> Vec<(ProbVector, f64)> {
    let mut out: Vec<(ProbVector, f64)> = Vec::new();
    for (p, q) in support {
        match out.iter_mut().find(|(r, _)| {
            r.weights
                .iter()
                .zip(&p.weights)
                .all(|(a, b)| (a - b).abs() <= 1e-12)
        }) {
            Some((_, acc)) => *acc += q,
            None => out.push((p.clone(), *q)),
        }
    }
    out
}

/// Exact invariance of a finite-support law under the e_1-fixing symmetries.
pub fn support_is_symmetric(support: &[(ProbVector, f64)], d: usize) -> bool {
    let merged = merge_support(support);
    symmetry_generators(d).iter().all(|g| {
        let image: Vec<_> = merged.iter().map(|(p, q)| (p.permuted(g), *q)).collect();
        let image = merge_support(&image);
        image.len() == merged.len()
            && image.iter().all(|(p, q)| {
                merged.iter().any(|(r, s)| {
                    (q - s).abs() <= 1e-12
                        && r.weights
                            .iter()
                            .zip(&p.weights)
                            .all(|(a, b)| (a - b).abs() <= 1e-12)
                })
            })
    })
}

/// Pass/fail with numeric margins for the hypotheses K1-K5.
pub fn check_k_conditions(law: &EnvironmentLaw, rho: f64, eps0: f64) -> Result<KReport> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Precondition(format!(
            "rho must lie in (0,1], got {rho}"
        )));
    }
    let m = law_moments(law)?;
    let d = m.d as f64;
    let scale = 1e-12 * m.sigma2.max(f64::MIN_POSITIVE);
    let status = |ok: bool| {
        if ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        }
    };

    let k1 = ConditionCheck {
        id: "K1".into(),
        status: status(m.eps <= eps0),
        margin: eps0 - m.eps,
        detail: format!("eps = {:.6} <= eps0 = {:.6}", m.eps, eps0),
    };

    let symmetric = support_is_symmetric(&law.support()?, m.d);
    let k2 = ConditionCheck {
        id: "K2".into(),
        status: status(symmetric),
        margin: if symmetric { 0.0 } else { -1.0 },
        detail: if m.d == 2 {
            "support invariant under the reflection y2 -> -y2".into()
        } else {
            "support invariant under the rotations fixing e1".into()
        },
    };

    let dv = m.var[0] - m.var[1];
    let k3 = ConditionCheck {
        id: "K3".into(),
        status: status(dv.abs() <= scale),
        margin: -dv.abs(),
        detail: format!("Var(e1) = {:.6e}, Var(-e1) = {:.6e}", m.var[0], m.var[1]),
    };

    let lhs4 = m.var[0] - m.cov_axis;
    let rs2 = rho * m.sigma2;
    let k4 = ConditionCheck {
        id: "K4".into(),
        status: status(lhs4 >= rs2 - scale && rs2 > 0.0),
        margin: lhs4 - rs2,
        detail: format!(
            "Var(e1) - Cov(e1,-e1) = {:.6e} >= rho sigma^2 = {:.6e} > 0",
            lhs4, rs2
        ),
    };

    let rhs5 = 32.0 * d * d * m.lambda;
    let k5 = ConditionCheck {
        id: "K5".into(),
        status: status(rs2 > rhs5 && m.lambda >= 0.0),
        margin: (rs2 - rhs5).min(m.lambda),
        detail: format!(
            "rho sigma^2 = {:.6e} > 32 d^2 lambda = {:.6e} >= 0",
            rs2, rhs5
        ),
    };

    Ok(KReport {
        rho,
        eps0,
        checks: vec![k1, k2, k3, k4, k5],
    })
}

// ---------------------------------------------------------------------------
// Config descriptors

/// Serializable law description.
///
/// ```toml
/// family = "signed-axis-kick"
/// d = 3
/// a = 0.01
/// lambda_shift = 0.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LawDescriptor {
    /// Point mass at `weights`, or at SSRW shifted by `lambda_shift` when
    /// `weights` is omitted.
    PointMass {
        d: usize,
        #[serde(default)]
        weights: Option<Vec<f64>>,
        #[serde(default)]
        lambda_shift: f64,
    },
    SignedAxisKick {
        d: usize,
        a: f64,
        #[serde(default)]
        lambda_shift: f64,
    },
    Shifted {
        base: Box<LawDescriptor>,
        lambda_shift: f64,
    },
    Empirical {
        d: usize,
        support: Vec<SupportEntry>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportEntry {
    pub weights: Vec<f64>,
    pub prob: f64,
}

impl LawDescriptor {
    pub fn dim(&self) -> usize {
        match self {
            LawDescriptor::PointMass { d, .. }
            | LawDescriptor::SignedAxisKick { d, .. }
            | LawDescriptor::Empirical { d, .. } => *d,
            LawDescriptor::Shifted { base, .. } => base.dim(),
        }
    }

    pub fn build(&self) -> Result<EnvironmentLaw> {
        check_dim(self.dim())?;
        let check_len = |w: &[f64], d: usize| {
            if w.len() != 2 * d {
                Err(Error::InvalidLaw(format!(
                    "expected {} weights for d = {d}, got {}",
                    2 * d,
                    w.len()
                )))
            } else {
                Ok(())
            }
        };
        match self {
            LawDescriptor::PointMass {
                d,
                weights,
                lambda_shift,
            } => {
                let p = match weights {
                    Some(w) => {
                        check_len(w, *d)?;
                        let mut w = w.clone();
                        w[0] += lambda_shift / 2.0;
                        w[1] -= lambda_shift / 2.0;
                        ProbVector::new(w)?
                    }
                    None => ProbVector::drifted(*d, *lambda_shift)?,
                };
                Ok(EnvironmentLaw::point_mass(p))
            }
            LawDescriptor::SignedAxisKick { d, a, lambda_shift } => {
                EnvironmentLaw::signed_axis_kick(*d, *a, *lambda_shift)
            }
            LawDescriptor::Shifted { base, lambda_shift } => {
                build_shifted_law(&base.build()?, *lambda_shift)
            }
            LawDescriptor::Empirical { d, support } => {
                let s = support
                    .iter()
                    .map(|e| {
                        check_len(&e.weights, *d)?;
                        Ok((ProbVector::new(e.weights.clone())?, e.prob))
                    })
                    .collect::<Result<Vec<_>>>()?;
                EnvironmentLaw::empirical(s)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Region;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn prob_vector_rejects_bad_input() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.5, 0.1, -0.1]).is_err());
        assert!(ProbVector::new(vec![0.3, 0.3, 0.3, 0.3]).is_err());
        assert!(ProbVector::new(vec![0.25; 4]).is_ok());
    }

    #[test]
    fn signed_axis_kick_moments_d3() {
        let law = EnvironmentLaw::signed_axis_kick(3, 0.01, 0.0).unwrap();
        let m = law_moments(&law).unwrap();
        assert!(close(m.eps, 0.12, 1e-15));
        assert!(close(m.sigma2, 2e-4, 1e-18));
        assert!(close(m.lambda, 0.0, 1e-18));
        assert!(close(m.var[0], 1e-4 / 3.0, 1e-18));
        assert!(close(m.cov_axis, -1e-4 / 3.0, 1e-18));
        assert!(close(m.kappa, 1.0 / 12.0, 1e-18));
    }

    #[test]
    fn drifted_point_mass_moments() {
        let p = ProbVector::new(vec![0.3, 0.2, 0.25, 0.25]).unwrap();
        let m = law_moments(&EnvironmentLaw::point_mass(p)).unwrap();
        assert!(close(m.eps, 0.4, 1e-12));
        assert_eq!(m.sigma2, 0.0);
        assert!(close(m.lambda, 0.1, 1e-15));
    }

    #[test]
    fn ssrw_is_flagged_degenerate() {
        let m = law_moments(&EnvironmentLaw::ssrw(2)).unwrap();
        assert!(m.degenerate);
        assert!(!m.within_perturbative_range);
    }

    #[test]
    fn closed_forms_match_support_summation() {
        for (d, a, s) in [
            (2, 0.05, 0.0),
            (3, 0.01, 1e-7),
            (2, 0.02, 0.03),
            (4, 0.01, -0.004),
        ] {
            let law = EnvironmentLaw::signed_axis_kick(d, a, s).unwrap();
            let closed = law_moments(&law).unwrap();
            let summed = support_moments(&law.support().unwrap(), d);
            assert!(close(closed.eps, summed.eps, 1e-14));
            assert!(close(closed.sigma2, summed.sigma2, 1e-16));
            assert!(close(closed.lambda, summed.lambda, 1e-16));
            assert!(close(closed.cov_axis, summed.cov_axis, 1e-16));
            for k in 0..2 * d {
                assert!(close(closed.mean[k], summed.mean[k], 1e-15));
                assert!(close(closed.var[k], summed.var[k], 1e-16));
            }
        }
    }

    #[test]
    fn shifted_ssrw_is_the_drifted_point_mass() {
        let law = build_shifted_law(&EnvironmentLaw::ssrw(2), 0.1).unwrap();
        let m = law_moments(&law).unwrap();
        assert!(close(m.lambda, 0.1, 1e-15));
        assert!(close(m.eps, 0.4, 1e-12));
        assert_eq!(m.sigma2, 0.0);
    }

    #[test]
    fn tiny_shift_keeps_variance() {
        let base = EnvironmentLaw::signed_axis_kick(3, 0.01, 0.0).unwrap();
        let law = build_shifted_law(&base, 1e-7).unwrap();
        let m = law_moments(&law).unwrap();
        assert!(close(m.sigma2, 2e-4, 1e-18));
        assert!(close(m.lambda, 1e-7, 1e-7 * 1e-9), "{}", m.lambda);
        let oracle = support_moments(&law.support().unwrap(), 3);
        assert!(close(m.sigma2, oracle.sigma2, 1e-16));
        assert!(close(m.lambda, oracle.lambda, 1e-16));
    }

    #[test]
    fn oversized_shift_names_offending_point() {
        let base = EnvironmentLaw::signed_axis_kick(2, 0.05, 0.0).unwrap();
        match build_shifted_law(&base, 0.45) {
            Err(Error::InvalidShift { point, .. }) => assert!(point.contains('[')),
            other => panic!("expected InvalidShift, got {other:?}"),
        }
    }

    #[test]
    fn inhomogeneous_law_has_no_moments() {
        let law = EnvironmentLaw::inhomogeneous_test(
            EnvironmentLaw::ssrw(2),
            vec![(
                vec![0, 0],
                EnvironmentLaw::signed_axis_kick(2, 0.05, 0.0).unwrap(),
            )],
        )
        .unwrap();
        assert!(matches!(
            law_moments(&law),
            Err(Error::UnsupportedFamily(_))
        ));
    }

    #[test]
    fn k_conditions_for_shifted_kick_d3() {
        let law = EnvironmentLaw::signed_axis_kick(3, 0.01, 1e-7).unwrap();
        let r = check_k_conditions(&law, 1.0 / 3.0, 0.2).unwrap();
        assert!(r.all_pass(), "{r:#?}");
        let k5 = r.get("K5").unwrap();
        assert!(k5.detail.contains("6.666667e-5"));
        assert!(k5.detail.contains("2.880000e-5"));
    }

    #[test]
    fn negative_drift_fails_k5() {
        let law = EnvironmentLaw::signed_axis_kick(2, 0.05, -1e-6).unwrap();
        let r = check_k_conditions(&law, 0.5, 1.0).unwrap();
        assert_eq!(r.get("K5").unwrap().status, CheckStatus::Fail);
    }

    #[test]
    fn unequal_axis_variances_fail_k3() {
        let a = ProbVector::new(vec![0.35, 0.15, 0.25, 0.25]).unwrap();
        let b = ProbVector::new(vec![0.15, 0.25, 0.35, 0.25]).unwrap();
        let law = EnvironmentLaw::empirical(vec![(a, 0.5), (b, 0.5)]).unwrap();
        let r = check_k_conditions(&law, 0.5, 1.0).unwrap();
        let k3 = r.get("K3").unwrap();
        assert_eq!(k3.status, CheckStatus::Fail);
        assert!(k3.detail.contains("Var(e1)") && k3.detail.contains("Var(-e1)"));
        // not mirror symmetric in y2 either
        assert_eq!(r.get("K2").unwrap().status, CheckStatus::Fail);
    }

    #[test]
    fn kick_law_is_structurally_symmetric() {
        for d in 2..=4 {
            let law = EnvironmentLaw::signed_axis_kick(d, 0.01, 0.001).unwrap();
            assert!(support_is_symmetric(&law.support().unwrap(), d));
        }
    }

    #[test]
    fn point_mass_environment_is_constant() {
        let p = ProbVector::new(vec![0.3, 0.2, 0.25, 0.25]).unwrap();
        let law = EnvironmentLaw::point_mass(p.clone());
        let region = Region::cube(2, 3).unwrap();
        let env = sample_environment(&law, &region, 99).unwrap();
        for s in region.interior() {
            assert_eq!(env.weights(&s), p.weights());
        }
    }

    #[test]
    fn sampling_is_deterministic_and_order_independent() {
        let law = EnvironmentLaw::signed_axis_kick(2, 0.05, 0.0).unwrap();
        let region = Region::cube(2, 5).unwrap();
        let a = sample_environment(&law, &region, 11).unwrap();
        let b = sample_environment(&law, &region, 11).unwrap();
        let lazy = LazyEnvironment::from_law(&law, 11).unwrap();
        let mut sites: Vec<_> = region.interior().collect();
        sites.reverse();
        for s in &sites {
            assert_eq!(a.weights(s), b.weights(s));
            assert_eq!(a.weights(s), lazy.weights(s));
        }
        let mut c = a.clone();
        let far = vec![1000, -7];
        let w = c.extend(&far).weights().to_vec();
        assert_eq!(w, lazy.weights(&far));
    }

    #[test]
    fn sampled_variance_matches_closed_form() {
        // 10^4 sites, per-direction variance within 4 SE of a^2/d.
        let a = 0.05;
        let law = EnvironmentLaw::signed_axis_kick(2, a, 0.0).unwrap();
        let region = Region::new_box(vec![0, 0], vec![99, 99]).unwrap();
        let env = sample_environment(&law, &region, 2024).unwrap();
        let target = a * a / 2.0;
        for k in 0..4 {
            let xs: Vec<f64> = region
                .interior()
                .map(|s| env.weights(&s)[k] - 0.25)
                .collect();
            let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
            let est = crate::stats::MCEstimate::from_samples(&sq, 0);
            assert!(
                est.covers(target, 4.0),
                "direction {k}: {} +- {} vs {target}",
                est.mean,
                est.std_error
            );
        }
    }

    #[test]
    fn descriptor_round_trip_builds_same_law() {
        let desc = LawDescriptor::Shifted {
            base: Box::new(LawDescriptor::SignedAxisKick {
                d: 2,
                a: 0.02,
                lambda_shift: 0.0,
            }),
            lambda_shift: 0.03,
        };
        let built = desc.build().unwrap();
        let m = law_moments(&built).unwrap();
        assert!(close(m.lambda, 0.03, 1e-15));
        assert!(close(m.sigma2, 8e-4, 1e-16));
    }

    #[test]
    fn descriptor_rejects_dimension_one() {
        let desc = LawDescriptor::SignedAxisKick {
            d: 1,
            a: 0.01,
            lambda_shift: 0.0,
        };
        assert!(desc.build().is_err());
    }

    proptest! {
        #[test]
        fn moment_inequalities_hold(d in 2usize..5, a in 0.0f64..0.2, s in -0.1f64..0.1) {
            let q = 1.0 / (2 * d) as f64;
            prop_assume!(a + s.abs() / 2.0 < q);
            prop_assume!(4.0 * d as f64 * (a + s.abs() / 2.0) < 1.0);
            let law = EnvironmentLaw::signed_axis_kick(d, a, s).unwrap();
            let m = law_moments(&law).unwrap();
            prop_assert!(m.sigma2 >= 0.0);
            prop_assert!(m.sigma2.sqrt() <= m.eps + 1e-15);
            prop_assert!(m.lambda.abs() <= m.eps / (2 * d) as f64 + 1e-15);
            // every support weight within eps/(4d) of 1/(2d)
            for (p, _) in law.support().unwrap() {
                for w in p.weights() {
                    prop_assert!((w - q).abs() <= m.eps / (4 * d) as f64 + 1e-15);
                }
            }
        }

        #[test]
        fn empirical_moment_inequalities(devs in prop::collection::vec(-0.02f64..0.02, 3), probs in prop::collection::vec(0.1f64..1.0, 3)) {
            let total: f64 = probs.iter().sum();
            let support: Vec<_> = devs.iter().zip(&probs).map(|(&x, &q)| {
                (ProbVector::new(vec![0.25 + x, 0.25 - x, 0.25 + x / 2.0, 0.25 - x / 2.0]).unwrap(), q / total)
            }).collect();
            let law = EnvironmentLaw::empirical(support).unwrap();
            let m = law_moments(&law).unwrap();
            prop_assert!(m.sigma2.sqrt() <= m.eps + 1e-15);
            prop_assert!(m.lambda.abs() <= m.eps / 4.0 + 1e-15);
        }
    }
}
