//! Shade discovery: K-means over latent factor columns with silhouette-based
//! choice of K.
//!
//! Points are put in a canonical (lexicographic) order before any random
//! draw, so every result here depends only on the point multiset and the
//! seed, not on input order.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::FactorModel;
use crate::rng::{derive_indexed, seeded};

pub const DEFAULT_K_MIN: usize = 2;
pub const DEFAULT_K_MAX: usize = 15;
pub const DEFAULT_MIN_SIZE: usize = 10;
pub const DEFAULT_RESTARTS: usize = 10;
const MAX_LLOYD_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadeAssignment {
    pub k: usize,
    /// Shade id per point; `None` for pruned points.
    pub assignment: Vec<Option<usize>>,
    pub centroids: Vec<Vec<f64>>,
    pub silhouette: Option<f64>,
    /// (K, coefficient) for every K tried by [`select_k`].
    pub curve: Vec<(usize, f64)>,
    pub pruned: Vec<usize>,
    pub min_size: usize,
    pub within_ssd: f64,
}

impl ShadeAssignment {
    pub fn members(&self, shade: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, s)| (*s == Some(shade)).then_some(i))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for s in self.assignment.iter().flatten() {
            sizes[*s] += 1;
        }
        sizes
    }
}

/// How `b_i` aggregates the per-cluster mean distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SilhouetteVariant {
    /// Mean over all other clusters.
    #[default]
    MeanOverClusters,
    /// Classical Rousseeuw form: nearest other cluster.
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteReport {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub s: Vec<f64>,
    pub overall: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn validate_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map(Vec::len).ok_or_else(|| Error::domain("no points to cluster"))?;
    if dim == 0 {
        return Err(Error::domain("points have zero dimension"));
    }
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::domain("points have inconsistent dimension"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite coordinate"));
    }
    Ok(dim)
}

/// (canonical order, number of distinct points)
fn canonical_order(points: &[Vec<f64>]) -> (Vec<usize>, usize) {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&x, &y| lex_cmp(&points[x], &points[y]).then(x.cmp(&y)));
    let distinct = 1 + order
        .windows(2)
        .filter(|w| lex_cmp(&points[w[0]], &points[w[1]]) != Ordering::Equal)
        .count();
    (order, distinct)
}

fn centroid_of(points: &[Vec<f64>], members: impl Iterator<Item = usize>, dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim];
    let mut n = 0usize;
    for i in members {
        for (cv, pv) in c.iter_mut().zip(&points[i]) {
            *cv += pv;
        }
        n += 1;
    }
    if n > 0 {
        for v in &mut c {
            *v /= n as f64;
        }
    }
    c
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn ssd(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

fn kmeans_pp<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            // a zero-weight point must never be picked
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).expect("positive mass");
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[pick].clone());
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids. Returns labels, centroids and
/// the SSD after each assignment-plus-update round.
pub fn lloyd(
    points: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    max_iters: usize,
) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
    let mut trace = Vec::new();
    for iter in 0..max_iters {
        // repair empty clusters from the point farthest from its centroid
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&x, &y| {
                    sq_dist(&points[x], &centroids[labels[x]])
                        .total_cmp(&sq_dist(&points[y], &centroids[labels[y]]))
                        .then(y.cmp(&x))
                });
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                labels[i] = empty;
                counts[empty] = 1;
                centroids[empty] = points[i].clone();
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            *centroid = centroid_of(points, (0..points.len()).filter(|&i| labels[i] == c), dim);
        }
        trace.push(ssd(points, &labels, &centroids));
        let next: Vec<usize> = points
            .iter()
            .zip(&labels)
            .map(|(p, &cur)| {
                // keep the current label unless strictly closer elsewhere
                let (best, d) = nearest(&centroids, p);
                if d < sq_dist(p, &centroids[cur]) {
                    best
                } else {
                    cur
                }
            })
            .collect();
        if next == labels && iter > 0 {
            break;
        }
        labels = next;
    }
    (labels, centroids, trace)
}

/// Relabel clusters by first appearance.
fn relabel(labels: &[usize], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut map = vec![usize::MAX; centroids.len()];
    let mut next = 0;
    for &l in labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    let mut out_c = vec![Vec::new(); next];
    for (old, &new) in map.iter().enumerate() {
        if new != usize::MAX {
            out_c[new] = centroids[old].clone();
        }
    }
    (labels.iter().map(|&l| map[l]).collect(), out_c)
}

/// Best of `restarts` k-means++ / Lloyd runs by within-cluster SSD.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<ShadeAssignment> {
    validate_points(points)?;
    let (order, distinct) = canonical_order(points);
    if k == 0 || k > distinct {
        return Err(Error::domain(format!(
            "K = {k} but only {distinct} distinct points"
        )));
    }
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
    let mut best: Option<(f64, Vec<usize>, Vec<Vec<f64>>)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = seeded(derive_indexed(seed, r as u64));
        let init = kmeans_pp(&sorted, k, &mut rng);
        let (labels, centroids, trace) = lloyd(&sorted, init, MAX_LLOYD_ITERS);
        let cost = *trace.last().expect("at least one round");
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, labels, centroids));
        }
    }
    let (cost, labels, centroids) = best.expect("one restart");
    let (labels, centroids) = relabel(&labels, &centroids);
    debug_assert_eq!(centroids.len(), k);
    let mut assignment = vec![None; points.len()];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = Some(labels[pos]);
    }
    Ok(ShadeAssignment {
        k,
        assignment,
        centroids,
        silhouette: None,
        curve: Vec::new(),
        pruned: Vec::new(),
        min_size: 1,
        within_ssd: cost,
    })
}

/// Silhouette coefficient with `b_i` aggregated per `variant`. Singletons get 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize], variant: SilhouetteVariant) -> Result<SilhouetteReport> {
    validate_points(points)?;
    if labels.len() != points.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            found: labels.len(),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let nonempty = sizes.iter().filter(|&&s| s > 0).count();
    if nonempty < 2 {
        return Err(Error::domain("silhouette needs at least two clusters"));
    }
    let n = points.len();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n];
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(&points[i], &points[j]);
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        a[i] = sums[own] / (sizes[own] - 1) as f64;
        let others = (0..k).filter(|&c| c != own && sizes[c] > 0).map(|c| sums[c] / sizes[c] as f64);
        b[i] = match variant {
            SilhouetteVariant::MeanOverClusters => {
                let v: Vec<f64> = others.collect();
                v.iter().sum::<f64>() / v.len() as f64
            }
            SilhouetteVariant::Nearest => others.fold(f64::INFINITY, f64::min),
        };
        let m = a[i].max(b[i]);
        s[i] = if m > 0.0 { (b[i] - a[i]) / m } else { 0.0 };
    }
    let overall = s.iter().sum::<f64>() / n as f64;
    Ok(SilhouetteReport { a, b, s, overall })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub variant: SilhouetteVariant,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            k_min: DEFAULT_K_MIN,
            k_max: DEFAULT_K_MAX,
            restarts: DEFAULT_RESTARTS,
            variant: SilhouetteVariant::MeanOverClusters,
        }
    }
}

/// Run K-means for every K in range and keep the best silhouette; ties go
/// to the smaller K. K above the number of distinct points is skipped.
pub fn select_k(points: &[Vec<f64>], options: &SelectOptions, seed: u64) -> Result<ShadeAssignment> {
    validate_points(points)?;
    if options.k_min < 2 || options.k_max < options.k_min {
        return Err(Error::domain(format!(
            "invalid K range {}..={}",
            options.k_min, options.k_max
        )));
    }
    let (_, distinct) = canonical_order(points);
    if options.k_min > distinct {
        return Err(Error::domain(format!(
            "K = {} but only {distinct} distinct points",
            options.k_min
        )));
    }
    let ks: Vec<usize> = (options.k_min..=options.k_max.min(distinct)).collect();
    let runs: Vec<(ShadeAssignment, f64)> = ks
        .par_iter()
        .map(|&k| {
            let a = kmeans(points, k, options.restarts, derive_indexed(seed, k as u64))?;
            let labels: Vec<usize> = a.assignment.iter().map(|s| s.expect("unpruned")).collect();
            let coef = silhouette(points, &labels, options.variant)?.overall;
            Ok((a, coef))
        })
        .collect::<Result<_>>()?;
    let curve: Vec<(usize, f64)> = runs.iter().map(|(a, c)| (a.k, *c)).collect();
    let (mut best, coef) = runs
        .into_iter()
        .reduce(|acc, x| if x.1 > acc.1 { x } else { acc })
        .expect("non-empty K range");
    best.silhouette = Some(coef);
    best.curve = curve;
    Ok(best)
}

/// Dissolve clusters smaller than `min_size`; their members become pruned.
pub fn prune_small(assignment: &ShadeAssignment, min_size: usize) -> Result<ShadeAssignment> {
    if min_size == 0 {
        return Err(Error::domain("min_size must be at least 1"));
    }
    let sizes = assignment.sizes();
    let mut remap = vec![None; assignment.k];
    let mut centroids = Vec::new();
    for (old, &size) in sizes.iter().enumerate() {
        if size >= min_size {
            remap[old] = Some(centroids.len());
            centroids.push(assignment.centroids[old].clone());
        }
    }
    if centroids.is_empty() {
        return Err(Error::NoViableShades { min_size });
    }
    let mut pruned = assignment.pruned.clone();
    let new_assign = assignment
        .assignment
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            Some(old) => {
                let new = remap[*old];
                if new.is_none() {
                    pruned.push(i);
                }
                new
            }
            None => None,
        })
        .collect();
    pruned.sort_unstable();
    Ok(ShadeAssignment {
        k: centroids.len(),
        assignment: new_assign,
        centroids,
        silhouette: assignment.silhouette,
        curve: assignment.curve.clone(),
        pruned,
        min_size,
        within_ssd: assignment.within_ssd,
    })
}

pub fn factor_columns(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// Scale every point to unit Euclidean norm (zero vectors stay zero).
pub fn normalize_rows(points: &mut [Vec<f64>]) {
    for p in points {
        let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            p.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Shades over annotators: select_k on the columns of A.
pub fn cluster_annotators(model: &FactorModel, options: &SelectOptions, seed: u64) -> Result<ShadeAssignment> {
    select_k(&factor_columns(&model.annotator_factors), options, seed)
}

/// Shades over items: select_k on the columns of I.
pub fn cluster_items(model: &FactorModel, options: &SelectOptions, seed: u64) -> Result<ShadeAssignment> {
    select_k(&factor_columns(&model.item_factors), options, seed)
}

/// Nearest centroid; ties go to the lowest shade id.
pub fn route_annotator(centroids: &[Vec<f64>], factor: &[f64]) -> Result<usize> {
    if centroids.is_empty() {
        return Err(Error::domain("no centroids to route to"));
    }
    if centroids.iter().any(|c| c.len() != factor.len()) {
        return Err(Error::DimensionMismatch {
            expected: centroids[0].len(),
            found: factor.len(),
        });
    }
    Ok(nearest(centroids, factor).0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub coefficient: f64,
}

/// On-disk shade file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadeFile {
    pub attribute_id: String,
    /// "annotators" or "items".
    pub axis: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub min_size: usize,
    pub silhouette: Option<f64>,
    pub silhouette_curve: Vec<CurvePoint>,
    pub assignment: BTreeMap<String, usize>,
    pub pruned: Vec<String>,
    pub centroids: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl ShadeFile {
    pub fn from_assignment(
        attribute_id: &str,
        axis: &str,
        ids: &[String],
        a: &ShadeAssignment,
        provenance: Option<serde_json::Value>,
    ) -> Self {
        Self {
            attribute_id: attribute_id.to_string(),
            axis: axis.to_string(),
            k: a.k,
            min_size: a.min_size,
            silhouette: a.silhouette,
            silhouette_curve: a
                .curve
                .iter()
                .map(|&(k, coefficient)| CurvePoint { k, coefficient })
                .collect(),
            assignment: a
                .assignment
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.map(|s| (ids[i].clone(), s)))
                .collect(),
            pruned: a.pruned.iter().map(|&i| ids[i].clone()).collect(),
            centroids: a.centroids.clone(),
            provenance,
        }
    }

    /// Rebuild an in-memory assignment over `ids` (absent ids count as pruned).
    pub fn to_assignment(&self, ids: &[String]) -> ShadeAssignment {
        let assignment: Vec<Option<usize>> = ids.iter().map(|id| self.assignment.get(id).copied()).collect();
        let pruned = assignment
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.is_none().then_some(i))
            .collect();
        ShadeAssignment {
            k: self.k,
            assignment,
            centroids: self.centroids.clone(),
            silhouette: self.silhouette,
            curve: self.silhouette_curve.iter().map(|p| (p.k, p.coefficient)).collect(),
            pruned,
            min_size: self.min_size,
            within_ssd: f64::NAN,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
