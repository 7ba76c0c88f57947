//! Monte Carlo estimates and the small amount of statistics built on them.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Default confidence radius, in standard errors, used in reports.
pub const REPORT_Z: f64 = 3.0;

/// Mean, standard error and sample count of a Monte Carlo run.
///
/// The running second central moment is kept so that shards computed from
/// disjoint seeds can be merged into exactly the pooled statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: u64,
    pub seeds: Vec<u64>,
    m2: f64,
}

impl MCEstimate {
    pub fn from_samples(samples: &[f64], seed: u64) -> Self {
        let mut est = Self::empty(seed);
        for &x in samples {
            est.push(x);
        }
        est
    }

    pub fn empty(seed: u64) -> Self {
        MCEstimate {
            mean: 0.0,
            std_error: 0.0,
            n: 0,
            seeds: vec![seed],
            m2: 0.0,
        }
    }

    /// Welford update.
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
        self.refresh_se();
    }

    fn refresh_se(&mut self) {
        self.std_error = if self.n > 1 {
            (self.sample_variance() / self.n as f64).sqrt()
        } else {
            0.0
        };
    }

    /// Unbiased sample variance.
    pub fn sample_variance(&self) -> f64 {
        if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        }
    }

    pub fn sample_std(&self) -> f64 {
        self.sample_variance().sqrt()
    }

    /// Pools two estimates computed from disjoint seeds.
    pub fn merge(&self, other: &MCEstimate) -> Result<MCEstimate> {
        if self.seeds.iter().any(|s| other.seeds.contains(s)) {
            return Err(Error::Precondition(
                "cannot merge Monte Carlo estimates that share a seed".into(),
            ));
        }
        let n = self.n + other.n;
        let mut seeds = self.seeds.clone();
        seeds.extend_from_slice(&other.seeds);
        seeds.sort_unstable();
        if n == 0 {
            return Ok(MCEstimate {
                seeds,
                ..MCEstimate::empty(0)
            });
        }
        let (na, nb, nt) = (self.n as f64, other.n as f64, n as f64);
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * nb / nt;
        let m2 = self.m2 + other.m2 + delta * delta * na * nb / nt;
        let mut out = MCEstimate {
            mean,
            std_error: 0.0,
            n,
            seeds,
            m2,
        };
        out.refresh_se();
        Ok(out)
    }

    pub fn lower(&self, z: f64) -> f64 {
        self.mean - z * self.std_error
    }

    pub fn upper(&self, z: f64) -> f64 {
        self.mean + z * self.std_error
    }

    /// True when `value` lies within `z` standard errors of the mean.
    pub fn covers(&self, value: f64, z: f64) -> bool {
        (self.mean - value).abs() <= z * self.std_error
    }
}

/// Empirical distribution of a scalar over independent environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// Standard error of `variance` (normal-theory approximation using the
    /// fourth central moment).
    pub variance_se: f64,
    /// (probability, value) pairs.
    pub quantiles: Vec<(f64, f64)>,
    pub samples: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl EmpiricalDistribution {
    pub fn from_samples(samples: Vec<f64>, seeds: Vec<u64>) -> Self {
        let n = samples.len();
        let nf = n as f64;
        let mean = if n > 0 {
            samples.iter().sum::<f64>() / nf
        } else {
            0.0
        };
        let (m2, m4) = samples.iter().fold((0.0, 0.0), |(a, b), &x| {
            let c = (x - mean) * (x - mean);
            (a + c, b + c * c)
        });
        let variance = if n > 1 { m2 / (nf - 1.0) } else { 0.0 };
        let variance_se = if n > 1 {
            let mu2 = m2 / nf;
            let mu4 = m4 / nf;
            ((mu4 - mu2 * mu2 * (nf - 3.0) / (nf - 1.0)).max(0.0) / nf).sqrt()
        } else {
            0.0
        };
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let quantiles = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99]
            .iter()
            .filter(|_| n > 0)
            .map(|&p| {
                let idx = ((p * (nf - 1.0)).round() as usize).min(n - 1);
                (p, sorted[idx])
            })
            .collect();
        EmpiricalDistribution {
            n,
            mean,
            variance,
            variance_se,
            quantiles,
            samples,
            seeds,
        }
    }

    pub fn mean_se(&self) -> f64 {
        if self.n > 1 {
            (self.variance / self.n as f64).sqrt()
        } else {
            0.0
        }
    }

    /// Fraction of samples with |x − mean| ≥ u.
    pub fn two_sided_tail(&self, u: f64) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.samples
            .iter()
            .filter(|&&x| (x - self.mean).abs() >= u)
            .count() as f64
            / self.n as f64
    }
}

/// Running sums for a ratio estimator E(N)/E(D) over paired samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioSums {
    pub n: f64,
    pub sn: f64,
    pub sd: f64,
    pub snn: f64,
    pub sdd: f64,
    pub snd: f64,
}

impl RatioSums {
    #[inline]
    pub fn push(&mut self, num: f64, den: f64) {
        self.push_weighted(num, den, 1.0);
    }

    /// Adds a sample with probability weight `w` (exact enumeration uses
    /// the probabilities as weights with total mass 1).
    #[inline]
    pub fn push_weighted(&mut self, num: f64, den: f64, w: f64) {
        self.n += w;
        self.sn += w * num;
        self.sd += w * den;
        self.snn += w * num * num;
        self.sdd += w * den * den;
        self.snd += w * num * den;
    }

    pub fn add(&mut self, o: &RatioSums) {
        self.n += o.n;
        self.sn += o.sn;
        self.sd += o.sd;
        self.snn += o.snn;
        self.sdd += o.sdd;
        self.snd += o.snd;
    }

    pub fn mean_num(&self) -> f64 {
        self.sn / self.n
    }

    pub fn mean_den(&self) -> f64 {
        self.sd / self.n
    }

    pub fn ratio(&self) -> f64 {
        self.sn / self.sd
    }

    /// Delta-method standard error of the ratio, treating `n` as a sample
    /// count.
    pub fn ratio_se(&self) -> f64 {
        if self.n <= 1.0 {
            return 0.0;
        }
        let n = self.n;
        let mn = self.sn / n;
        let md = self.sd / n;
        let r = mn / md;
        let var_n = (self.snn - n * mn * mn) / (n - 1.0);
        let var_d = (self.sdd - n * md * md) / (n - 1.0);
        let cov = (self.snd - n * mn * md) / (n - 1.0);
        let v = (var_n - 2.0 * r * cov + r * r * var_d).max(0.0);
        (v / n).sqrt() / md.abs()
    }
}

/// Ratio sums with a mean-zero companion `c` for variance reduction.
///
/// The estimate is `(mean(N) - beta * mean(C)) / mean(D)`, with `beta`
/// regressing the linearized residual `N - r D` on `C`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CvRatioSums {
    pub base: RatioSums,
    pub sc: f64,
    pub scc: f64,
    pub snc: f64,
    pub sdc: f64,
}

impl CvRatioSums {
    #[inline]
    pub fn push(&mut self, num: f64, den: f64, c: f64) {
        self.base.push(num, den);
        self.sc += c;
        self.scc += c * c;
        self.snc += num * c;
        self.sdc += den * c;
    }

    pub fn add(&mut self, o: &CvRatioSums) {
        self.base.add(&o.base);
        self.sc += o.sc;
        self.scc += o.scc;
        self.snc += o.snc;
        self.sdc += o.sdc;
    }

    /// (ratio, standard error, beta).
    pub fn estimate(&self) -> (f64, f64, f64) {
        let b = &self.base;
        let n = b.n;
        if n <= 2.0 {
            return (b.ratio(), 0.0, 0.0);
        }
        let (mn, md, mc) = (b.sn / n, b.sd / n, self.sc / n);
        let cov = |sxy: f64, mx: f64, my: f64| (sxy - n * mx * my) / (n - 1.0);
        let vn = cov(b.snn, mn, mn);
        let vd = cov(b.sdd, md, md);
        let vc = cov(self.scc, mc, mc);
        let cnd = cov(b.snd, mn, md);
        let cnc = cov(self.snc, mn, mc);
        let cdc = cov(self.sdc, md, mc);
        let r0 = mn / md;
        let beta = if vc > 0.0 { (cnc - r0 * cdc) / vc } else { 0.0 };
        let r = (mn - beta * mc) / md;
        let v = vn + beta * beta * vc + r * r * vd - 2.0 * beta * cnc - 2.0 * r * cnd
            + 2.0 * beta * r * cdc;
        (r, (v.max(0.0) / n).sqrt() / md.abs(), beta)
    }
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// One-sided z for a family of `k` simultaneous upper bounds at overall
/// level matching a single `z0`-sigma bound (Bonferroni).
pub fn bonferroni_z(z0: f64, k: usize) -> f64 {
    let tail = 1.0 - Normal::standard().cdf(z0);
    normal_quantile(1.0 - tail / k.max(1) as f64)
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Least-squares slope of y against x.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
