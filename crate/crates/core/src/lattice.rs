//! Finite lattice regions and exit classification.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Site = Vec<i64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HalfSpaceSign {
    Plus,
    Minus,
}

/// Region descriptor, as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RegionSpec {
    /// Inclusive integer bounds per axis.
    Box { lo: Vec<i64>, hi: Vec<i64> },
    /// `{-L <= y1 < L}` with lateral truncation `|y_j| <= W`.
    Slab { l: i64, w: i64 },
    /// `{-M/2 < y1 < M, |y_j| < 25 M^3}`.
    BallisticityBox { m: i64 },
    /// `(-M, M) x (-M^3/4, M^3/4)^(d-1)`.
    CorollaryBox { m: i64 },
    /// `{0 <= +-y1 <= N, |y_j| <= N}`.
    HalfSpaceTrunc { sign: HalfSpaceSign, n: i64 },
    /// Explicit finite site set.
    Sites { sites: Vec<Site> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitClass {
    Frontal,
    Other,
}

#[derive(Debug, Clone)]
enum Shape {
    Cuboid {
        lo: Vec<i64>,
        hi: Vec<i64>,
        strides: Vec<usize>,
        len: usize,
    },
    Set {
        sites: Vec<Site>,
        index: HashMap<Site, usize>,
    },
}

/// A finite lattice domain. Interior sites are indexed in lexicographic
/// order (axis 1 most significant).
#[derive(Debug, Clone)]
pub struct Region {
    d: usize,
    spec: RegionSpec,
    shape: Shape,
    /// Frontal side is `{y in dB : y1 >= t}`.
    frontal: Option<i64>,
    /// Middle-frontal part, as inclusive bounds.
    middle_frontal: Option<(Vec<i64>, Vec<i64>)>,
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidRegion(msg.into()))
}

/// Builds a region of dimension `d` from its descriptor.
pub fn build_region(spec: &RegionSpec, d: usize) -> Result<Region> {
    if d < 2 {
        return invalid(format!("dimension must be >= 2, got {d}"));
    }
    let lateral = |lo1: i64, hi1: i64, half: i64| {
        let mut lo = vec![-half; d];
        let mut hi = vec![half; d];
        lo[0] = lo1;
        hi[0] = hi1;
        (lo, hi)
    };
    let (shape, frontal, middle) = match spec {
        RegionSpec::Box { lo, hi } => {
            if lo.len() != d || hi.len() != d {
                return invalid("box bounds do not match the dimension");
            }
            (cuboid(lo.clone(), hi.clone())?, None, None)
        }
        RegionSpec::Slab { l, w } => {
            if *l <= 0 || *w <= 0 {
                return invalid("slab parameters must be positive");
            }
            if w < l {
                return invalid(format!("slab truncation W = {w} must be >= L = {l}"));
            }
            let (lo, hi) = lateral(-l, l - 1, *w);
            (cuboid(lo, hi)?, Some(*l), None)
        }
        RegionSpec::BallisticityBox { m } => {
            if *m <= 0 {
                return invalid("box scale M must be positive");
            }
            let m3 = m.checked_pow(3).and_then(|x| x.checked_mul(25));
            let Some(side) = m3 else {
                return invalid("box scale M too large");
            };
            // -M/2 < y1 < M and |y_j| < 25 M^3, on integers
            let (lo, hi) = lateral((-m).div_euclid(2) + 1, m - 1, side - 1);
            // M/2 <= y1 < M and |y_j| < M^3
            let (mlo, mhi) = lateral((m + 1).div_euclid(2), m - 1, m.pow(3) - 1);
            (cuboid(lo, hi)?, Some(*m), Some((mlo, mhi)))
        }
        RegionSpec::CorollaryBox { m } => {
            if *m <= 0 {
                return invalid("box scale M must be positive");
            }
            let Some(m3) = m.checked_pow(3) else {
                return invalid("box scale M too large");
            };
            // |y_j| < M^3/4  <=>  |y_j| <= ceil(M^3/4) - 1
            let (lo, hi) = lateral(-m + 1, m - 1, (m3 + 3) / 4 - 1);
            (cuboid(lo, hi)?, Some(*m), None)
        }
        RegionSpec::HalfSpaceTrunc { sign, n } => {
            if *n <= 0 {
                return invalid("half-space truncation N must be positive");
            }
            let (lo1, hi1) = match sign {
                HalfSpaceSign::Plus => (0, *n),
                HalfSpaceSign::Minus => (-n, 0),
            };
            let (lo, hi) = lateral(lo1, hi1, *n);
            (cuboid(lo, hi)?, None, None)
        }
        RegionSpec::Sites { sites } => {
            if sites.is_empty() {
                return invalid("site set is empty");
            }
            if sites.iter().any(|s| s.len() != d) {
                return invalid("site dimension mismatch");
            }
            let set: BTreeSet<Site> = sites.iter().cloned().collect();
            if set.len() != sites.len() {
                return invalid("duplicate sites");
            }
            let sites: Vec<Site> = set.into_iter().collect();
            let index = sites
                .iter()
                .cloned()
                .enumerate()
                .map(|(i, s)| (s, i))
                .collect();
            (Shape::Set { sites, index }, None, None)
        }
    };
    Ok(Region {
        d,
        spec: spec.clone(),
        shape,
        frontal,
        middle_frontal: middle,
    })
}

fn cuboid(lo: Vec<i64>, hi: Vec<i64>) -> Result<Shape> {
    if lo.iter().zip(&hi).any(|(a, b)| a > b) {
        return invalid("box has an empty axis");
    }
    let d = lo.len();
    let mut strides = vec![1usize; d];
    let mut len = 1usize;
    for k in (0..d).rev() {
        strides[k] = len;
        let ext = (hi[k] - lo[k] + 1) as usize;
        len = len
            .checked_mul(ext)
            .ok_or_else(|| Error::InvalidRegion("region too large to index".into()))?;
    }
    Ok(Shape::Cuboid {
        lo,
        hi,
        strides,
        len,
    })
}

impl Region {
    pub fn new_box(lo: Vec<i64>, hi: Vec<i64>) -> Result<Region> {
        let d = lo.len();
        build_region(&RegionSpec::Box { lo, hi }, d)
    }

    /// `[-k, k]^d`
    pub fn cube(d: usize, k: i64) -> Result<Region> {
        Self::new_box(vec![-k; d], vec![k; d])
    }

    pub fn slab(d: usize, l: i64, w: i64) -> Result<Region> {
        build_region(&RegionSpec::Slab { l, w }, d)
    }

    pub fn ballisticity_box(d: usize, m: i64) -> Result<Region> {
        build_region(&RegionSpec::BallisticityBox { m }, d)
    }

    pub fn corollary_box(d: usize, m: i64) -> Result<Region> {
        build_region(&RegionSpec::CorollaryBox { m }, d)
    }

    pub fn half_space(d: usize, sign: HalfSpaceSign, n: i64) -> Result<Region> {
        build_region(&RegionSpec::HalfSpaceTrunc { sign, n }, d)
    }

    /// Same box with every lateral axis clipped to `|y_j| <= radius`; the
    /// frontal side is kept.
    pub fn with_lateral_radius(&self, radius: i64) -> Result<Region> {
        let Shape::Cuboid { lo, hi, .. } = &self.shape else {
            return invalid("lateral clipping needs a box region");
        };
        if radius < 0 {
            return invalid("lateral radius must be >= 0");
        }
        let mut lo = lo.clone();
        let mut hi = hi.clone();
        for k in 1..self.d {
            lo[k] = lo[k].max(-radius);
            hi[k] = hi[k].min(radius);
        }
        let middle = self.middle_frontal.clone().map(|(mut a, mut b)| {
            for k in 1..self.d {
                a[k] = a[k].max(-radius);
                b[k] = b[k].min(radius);
            }
            (a, b)
        });
        Ok(Region {
            d: self.d,
            spec: RegionSpec::Box {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            shape: cuboid(lo, hi)?,
            frontal: self.frontal,
            middle_frontal: middle,
        })
    }

    pub fn from_sites(d: usize, sites: Vec<Site>) -> Result<Region> {
        build_region(&RegionSpec::Sites { sites }, d)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn spec(&self) -> &RegionSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        match &self.shape {
            Shape::Cuboid { len, .. } => *len,
            Shape::Set { sites, .. } => sites.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn contains(&self, site: &[i64]) -> bool {
        match &self.shape {
            Shape::Cuboid { lo, hi, .. } => site
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(x, (a, b))| a <= x && x <= b),
            Shape::Set { index, .. } => index.contains_key(site),
        }
    }

    #[inline]
    pub fn index_of(&self, site: &[i64]) -> Option<usize> {
        match &self.shape {
            Shape::Cuboid {
                lo, hi, strides, ..
            } => {
                let mut idx = 0usize;
                for k in 0..self.d {
                    let x = site[k];
                    if x < lo[k] || x > hi[k] {
                        return None;
                    }
                    idx += (x - lo[k]) as usize * strides[k];
                }
                Some(idx)
            }
            Shape::Set { index, .. } => index.get(site).copied(),
        }
    }

    /// Interior site with index `i`.
    pub fn site(&self, i: usize) -> Site {
        match &self.shape {
            Shape::Cuboid { lo, strides, .. } => {
                let mut rem = i;
                (0..self.d)
                    .map(|k| {
                        let q = rem / strides[k];
                        rem %= strides[k];
                        lo[k] + q as i64
                    })
                    .collect()
            }
            Shape::Set { sites, .. } => sites[i].clone(),
        }
    }

    /// Interior sites in index (lexicographic) order.
    pub fn interior(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.len()).map(move |i| self.site(i))
    }

    /// Inclusive bounding box of the interior.
    pub fn bounds(&self) -> (Vec<i64>, Vec<i64>) {
        match &self.shape {
            Shape::Cuboid { lo, hi, .. } => (lo.clone(), hi.clone()),
            Shape::Set { sites, .. } => {
                let mut lo = sites[0].clone();
                let mut hi = sites[0].clone();
                for s in sites {
                    for k in 0..self.d {
                        lo[k] = lo[k].min(s[k]);
                        hi[k] = hi[k].max(s[k]);
                    }
                }
                (lo, hi)
            }
        }
    }

    pub fn is_cuboid(&self) -> bool {
        matches!(self.shape, Shape::Cuboid { .. })
    }

    /// Not interior, and at l1-distance 1 from the interior.
    pub fn on_boundary(&self, site: &[i64]) -> bool {
        if site.len() != self.d || self.contains(site) {
            return false;
        }
        let mut nb = site.to_vec();
        for k in 0..self.d {
            for delta in [-1, 1] {
                nb[k] += delta;
                let inside = self.contains(&nb);
                nb[k] -= delta;
                if inside {
                    return true;
                }
            }
        }
        false
    }

    /// Outer boundary, sorted lexicographically.
    pub fn boundary(&self) -> Vec<Site> {
        match &self.shape {
            Shape::Cuboid { lo, hi, .. } => {
                let elo: Vec<i64> = lo.iter().map(|x| x - 1).collect();
                let ehi: Vec<i64> = hi.iter().map(|x| x + 1).collect();
                let mut out = Vec::new();
                let mut cur = elo.clone();
                loop {
                    let outside = (0..self.d)
                        .filter(|&k| cur[k] < lo[k] || cur[k] > hi[k])
                        .count();
                    if outside == 1 {
                        out.push(cur.clone());
                    }
                    // odometer
                    let mut k = self.d;
                    loop {
                        if k == 0 {
                            return out;
                        }
                        k -= 1;
                        if cur[k] < ehi[k] {
                            cur[k] += 1;
                            break;
                        }
                        cur[k] = elo[k];
                    }
                }
            }
            Shape::Set { sites, .. } => {
                let mut set = BTreeSet::new();
                for s in sites {
                    let mut nb = s.clone();
                    for k in 0..self.d {
                        for delta in [-1, 1] {
                            nb[k] += delta;
                            if !self.contains(&nb) {
                                set.insert(nb.clone());
                            }
                            nb[k] -= delta;
                        }
                    }
                }
                set.into_iter().collect()
            }
        }
    }

    pub fn has_frontal_side(&self) -> bool {
        self.frontal.is_some()
    }

    pub fn frontal_threshold(&self) -> Option<i64> {
        self.frontal
    }

    /// Frontal part of the boundary.
    pub fn frontal_boundary(&self) -> Vec<Site> {
        match self.frontal {
            Some(t) => self.boundary().into_iter().filter(|s| s[0] >= t).collect(),
            None => Vec::new(),
        }
    }

    /// Exit class of a boundary site, without checking membership in the
    /// boundary. Regions without a frontal side report `Other`.
    #[inline]
    pub fn exit_class_unchecked(&self, site: &[i64]) -> ExitClass {
        match self.frontal {
            Some(t) if site[0] >= t => ExitClass::Frontal,
            _ => ExitClass::Other,
        }
    }

    /// Middle-frontal part (ballisticity box only).
    pub fn middle_frontal(&self) -> Option<Vec<Site>> {
        let (lo, hi) = self.middle_frontal.as_ref()?;
        let r = Region::new_box(lo.clone(), hi.clone()).ok()?;
        Some(r.interior().collect())
    }

    pub fn middle_frontal_len(&self) -> Option<usize> {
        let (lo, hi) = self.middle_frontal.as_ref()?;
        Some(
            lo.iter()
                .zip(hi)
                .map(|(a, b)| (b - a + 1) as usize)
                .product(),
        )
    }
}

/// Exit class of a site on the outer boundary.
pub fn classify_exit(region: &Region, site: &[i64]) -> Result<ExitClass> {
    if !region.on_boundary(site) {
        return Err(Error::NotOnBoundary(site.to_vec()));
    }
    if !region.has_frontal_side() {
        return Err(Error::NoFrontalSide);
    }
    Ok(region.exit_class_unchecked(site))
}

/// CSV with one site per row.
pub fn sites_to_csv(sites: &[Site], d: usize) -> String {
    let mut out = String::new();
    let header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for s in sites {
        let row: Vec<String> = s.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ballisticity_box_counts() {
        let r = Region::ballisticity_box(2, 2).unwrap();
        assert_eq!(r.len(), 798);
        assert_eq!(r.bounds(), (vec![0, -199], vec![1, 199]));
        let mid = r.middle_frontal().unwrap();
        assert_eq!(mid.len(), 15);
        assert!(mid.iter().all(|s| s[0] == 1 && s[1].abs() <= 7));
    }

    #[test]
    fn odd_scale_uses_strict_left_edge() {
        let r = Region::ballisticity_box(2, 3).unwrap();
        let (lo, hi) = r.bounds();
        assert_eq!((lo[0], hi[0]), (-1, 2));
        let mid = r.middle_frontal().unwrap();
        assert!(mid.iter().all(|s| s[0] == 2));
    }

    #[test]
    fn slab_and_corollary_box_counts() {
        let s = Region::slab(2, 3, 10).unwrap();
        assert_eq!(s.len(), 126);
        assert_eq!(s.bounds(), (vec![-3, -10], vec![2, 10]));
        let c = Region::corollary_box(2, 4).unwrap();
        assert_eq!(c.len(), 217);
        assert_eq!(c.bounds(), (vec![-3, -15], vec![3, 15]));
    }

    #[test]
    fn exit_classification() {
        let r = Region::ballisticity_box(2, 2).unwrap();
        assert_eq!(classify_exit(&r, &[2, 0]).unwrap(), ExitClass::Frontal);
        assert_eq!(classify_exit(&r, &[-1, 0]).unwrap(), ExitClass::Other);
        assert_eq!(classify_exit(&r, &[0, 200]).unwrap(), ExitClass::Other);
        assert!(matches!(
            classify_exit(&r, &[-2, 0]),
            Err(Error::NotOnBoundary(_))
        ));
        assert!(matches!(
            classify_exit(&r, &[0, 0]),
            Err(Error::NotOnBoundary(_))
        ));
        let b = Region::cube(2, 1).unwrap();
        assert!(matches!(
            classify_exit(&b, &[2, 0]),
            Err(Error::NoFrontalSide)
        ));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Region::slab(2, 3, 2).is_err());
        assert!(Region::slab(2, 0, 2).is_err());
        assert!(Region::ballisticity_box(2, 0).is_err());
        assert!(Region::new_box(vec![0, 0], vec![1]).is_err());
        assert!(build_region(&RegionSpec::Slab { l: 2, w: 4 }, 1).is_err());
        assert!(Region::from_sites(2, vec![vec![0, 0], vec![0, 0]]).is_err());
    }

    #[test]
    fn boundary_of_small_sets() {
        let r = Region::from_sites(2, vec![vec![0, 0], vec![1, 0]]).unwrap();
        let b = r.boundary();
        assert_eq!(b.len(), 6);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        let single = Region::from_sites(2, vec![vec![0, 0]]).unwrap();
        assert_eq!(single.boundary().len(), 4);
    }

    #[test]
    fn frontal_plus_other_is_whole_boundary() {
        let r = Region::ballisticity_box(2, 2).unwrap();
        let all = r.boundary();
        let frontal = r.frontal_boundary();
        let other = all.iter().filter(|s| s[0] < 2).count();
        assert_eq!(frontal.len() + other, all.len());
        assert_eq!(frontal.len(), 399);
    }

    fn check_region_invariants(r: &Region) {
        let d = r.dim();
        let sites: Vec<Site> = r.interior().collect();
        assert!(sites.windows(2).all(|w| w[0] < w[1]), "interior not sorted");
        for (i, s) in sites.iter().enumerate() {
            assert_eq!(r.index_of(s), Some(i));
        }
        let boundary: BTreeSet<Site> = r.boundary().into_iter().collect();
        for s in &sites {
            assert!(!boundary.contains(s));
            let mut nb = s.clone();
            for k in 0..d {
                for delta in [-1, 1] {
                    nb[k] += delta;
                    assert!(r.contains(&nb) || boundary.contains(&nb));
                    nb[k] -= delta;
                }
            }
        }
        for b in &boundary {
            assert!(r.on_boundary(b));
        }
    }

    #[test]
    fn region_invariants_on_named_shapes() {
        check_region_invariants(&Region::slab(2, 3, 4).unwrap());
        check_region_invariants(&Region::slab(3, 2, 3).unwrap());
        check_region_invariants(&Region::corollary_box(2, 2).unwrap());
        check_region_invariants(&Region::half_space(2, HalfSpaceSign::Minus, 3).unwrap());
        check_region_invariants(&Region::ballisticity_box(2, 1).unwrap());
    }

    proptest! {
        #[test]
        fn random_site_sets_satisfy_invariants(pts in prop::collection::btree_set((-3i64..3, -3i64..3), 1..15)) {
            let sites: Vec<Site> = pts.into_iter().map(|(a, b)| vec![a, b]).collect();
            let r = Region::from_sites(2, sites).unwrap();
            check_region_invariants(&r);
        }

        #[test]
        fn random_boxes_satisfy_invariants(a in -3i64..3, b in -3i64..3, w in 0i64..3, h in 0i64..3, z in 0i64..2) {
            let r = Region::new_box(vec![a, b, 0], vec![a + w, b + h, z]).unwrap();
            check_region_invariants(&r);
            prop_assert_eq!(r.len(), ((w + 1) * (h + 1) * (z + 1)) as usize);
        }
    }
}
