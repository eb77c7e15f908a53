//! Aggregation and rank statistics over per-image gap rows.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{Method, Stage};
use crate::records::GapRow;
use crate::seed::derive_seed;

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Some(quantile_sorted(&s, 0.5))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    // sqrt of the product, not product of square roots: for exactly
    // (anti)monotone ranks sxy == -sxx == -syy and this yields exactly -1.
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermutationConfig {
    pub permutations: usize,
    pub seed: u64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        Self {
            permutations: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub x: String,
    pub y: String,
    pub n: usize,
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    /// Why `rho` is missing, if it is.
    pub note: Option<String>,
}

impl CorrelationResult {
    pub fn named(mut self, x: &str, y: &str) -> Self {
        self.x = x.to_string();
        self.y = y.to_string();
        self
    }
}

const PERMUTATION_BATCH: usize = 1000;

/// Spearman's rho (Pearson on average ranks) with a two-sided permutation p-value.
pub fn spearman(x: &[f64], y: &[f64], config: &PermutationConfig) -> Result<CorrelationResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!(
            "spearman needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "spearman needs at least 3 observations, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "spearman inputs must be finite".into(),
        ));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let mut result = CorrelationResult {
        x: "x".into(),
        y: "y".into(),
        n: x.len(),
        rho: None,
        p_value: None,
        note: None,
    };
    let Some(rho) = pearson(&rx, &ry) else {
        let side = if rx.iter().all(|&r| r == rx[0]) {
            "x"
        } else {
            "y"
        };
        result.note = Some(format!("zero rank variance in {side}"));
        return Ok(result);
    };
    result.rho = Some(rho);

    let batches = config.permutations.div_ceil(PERMUTATION_BATCH);
    let threshold = rho.abs() - 1e-12;
    let extreme: usize = (0..batches)
        .into_par_iter()
        .map(|b| {
            let count = PERMUTATION_BATCH.min(config.permutations - b * PERMUTATION_BATCH);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[b as u64]));
            let mut perm = ry.clone();
            (0..count)
                .filter(|_| {
                    perm.shuffle(&mut rng);
                    pearson(&rx, &perm).is_some_and(|r| r.abs() >= threshold)
                })
                .count()
        })
        .sum();
    result.p_value = Some((extreme + 1) as f64 / (config.permutations + 1) as f64);
    Ok(result)
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_mean_ci(
    values: &[f64],
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 || !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidParameter(
            "bootstrap needs data, resamples > 0 and a level in (0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((
        quantile_sorted(&means, alpha),
        quantile_sorted(&means, 1.0 - alpha),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub stage: Stage,
    pub n_images: usize,
    pub defined: usize,
    /// Defined and not capped; the statistics below are over these rows.
    pub measured: usize,
    pub undefined_count: usize,
    pub capped_count: usize,
    pub mean_gap: Option<f64>,
    pub median_gap: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

impl MethodSummary {
    /// Statistics over the defined, uncapped gaps of one group of rows.
    pub fn from_rows(method: Method, stage: Stage, rows: &[&GapRow]) -> Self {
        let defined = rows.iter().filter(|r| r.is_defined()).count();
        let mut gaps: Vec<f64> = rows
            .iter()
            .filter(|r| !r.is_capped())
            .filter_map(|r| r.gap)
            .map(|g| g as f64)
            .collect();
        gaps.sort_by(f64::total_cmp);
        let q = |p| (!gaps.is_empty()).then(|| quantile_sorted(&gaps, p));
        Self {
            method,
            stage,
            n_images: rows.len(),
            defined,
            measured: gaps.len(),
            undefined_count: rows.len() - defined,
            capped_count: rows.iter().filter(|r| r.is_capped()).count(),
            mean_gap: mean(&gaps),
            median_gap: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
        }
    }
}

/// One summary per (method, stage) present in `rows`, in method/stage order.
pub fn summarize(rows: &[GapRow]) -> Vec<MethodSummary> {
    let mut groups: BTreeMap<(Method, Stage), Vec<&GapRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method, r.stage)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((m, s), g)| MethodSummary::from_rows(m, s, &g))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub better: f64,
    pub equal: f64,
    pub worse: f64,
    /// Images compared.
    pub n: usize,
    /// Images skipped because either gap is undefined or missing.
    pub excluded: usize,
}

/// Fractions of shared images on which `a`'s gap is larger, equal or smaller than `b`'s.
pub fn pairwise(a: &[(u64, Option<i64>)], b: &[(u64, Option<i64>)]) -> PairwiseResult {
    let bm: HashMap<u64, Option<i64>> = b.iter().copied().collect();
    let (mut better, mut equal, mut worse, mut excluded) = (0usize, 0usize, 0usize, 0usize);
    let mut seen = std::collections::HashSet::new();
    for &(id, ga) in a {
        seen.insert(id);
        match (ga, bm.get(&id).copied().flatten()) {
            (Some(x), Some(y)) if x > y => better += 1,
            (Some(x), Some(y)) if x == y => equal += 1,
            (Some(_), Some(_)) => worse += 1,
            _ => excluded += 1,
        }
    }
    excluded += b.iter().filter(|(id, _)| !seen.contains(id)).count();
    let n = better + equal + worse;
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    PairwiseResult {
        better: frac(better),
        equal: frac(equal),
        worse: frac(worse),
        n,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonPlusDiff {
    /// `(image_id, eps_plus(a) - eps_plus(b))` for images defined under both.
    pub diffs: Vec<(u64, i64)>,
    /// `(bin lower edge, count)`; bins are `[lower, lower + width)`.
    pub bins: Vec<(i64, usize)>,
}

/// Per-image `eps_plus` differences between two methods, plus a histogram.
pub fn epsilon_plus_diff(a: &[GapRow], b: &[GapRow], bin_width: i64) -> Result<EpsilonPlusDiff> {
    if bin_width <= 0 {
        return Err(Error::InvalidParameter("bin width must be positive".into()));
    }
    let bm: HashMap<u64, u64> = b
        .iter()
        .filter_map(|r| r.eps_plus.map(|e| (r.image_id, e)))
        .collect();
    let mut diffs: Vec<(u64, i64)> = a
        .iter()
        .filter_map(|r| {
            let ea = r.eps_plus?;
            let eb = bm.get(&r.image_id)?;
            Some((r.image_id, ea as i64 - *eb as i64))
        })
        .collect();
    diffs.sort_unstable();
    let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
    for &(_, d) in &diffs {
        *hist.entry(d.div_euclid(bin_width) * bin_width).or_default() += 1;
    }
    Ok(EpsilonPlusDiff {
        diffs,
        bins: hist.into_iter().collect(),
    })
}
