//! Evaluation metrics for generated sparse data.
//!
//! Everything here is a pure function of its inputs and uses fixed-order
//! sequential reductions, so results do not depend on scheduling.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::DataBatch;
use crate::error::{Result, SddError};
use crate::numerics::Matrix;

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions,
/// integrating `|F_a⁻¹(u) − F_b⁻¹(u)|` over the merged quantile breakpoints.
/// With `normalize`, the result is divided by the standard deviation of `a`.
pub fn wasserstein1(a: &[f64], b: &[f64], normalize: bool) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SddError::arg("wasserstein distance needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(SddError::arg("wasserstein distance of non-finite values"));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let (m, n) = (sa.len(), sb.len());
    // Breakpoints i/m and j/n compared exactly as i·n vs j·m.
    let (mut i, mut j) = (0usize, 0usize);
    let mut last = 0usize; // current position in units of 1/(m·n)
    let mut total = 0.0;
    while i < m && j < n {
        let next_a = (i + 1) * n;
        let next_b = (j + 1) * m;
        let next = next_a.min(next_b);
        total += (next - last) as f64 * (sa[i] - sb[j]).abs();
        last = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    let w = total / (m * n) as f64;
    if normalize {
        let s = std_dev(a);
        if !(s > 0.0) {
            return Err(SddError::arg("cannot normalize by a reference sample with zero spread"));
        }
        Ok(w / s)
    } else {
        Ok(w)
    }
}

/// Per-row sum of entries (total deposited intensity).
pub fn pt_statistic(batch: &DataBatch) -> Vec<f64> {
    batch.values().row_iter().map(|r| r.iter().sum()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel bandwidth for [`mmd_rbf`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled sample.
    #[default]
    Median,
    Fixed(f64),
}

/// Median of the pooled pairwise Euclidean distances (`i < j`). A zero median
/// falls back to 1.
pub fn median_heuristic(x: &Matrix, y: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = x.row_iter().chain(y.row_iter()).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, &mut hi, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let med = if d.len() % 2 == 1 {
        hi.sqrt()
    } else {
        let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo.sqrt() + hi.sqrt())
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn check_same_d(x: &DataBatch, y: &DataBatch) -> Result<()> {
    if x.d() != y.d() {
        return Err(SddError::shape(format!("dimension mismatch: {} vs {}", x.d(), y.d())));
    }
    Ok(())
}

fn resolve_bandwidth(x: &Matrix, y: &Matrix, bw: Bandwidth) -> Result<f64> {
    match bw {
        Bandwidth::Median => Ok(median_heuristic(x, y)),
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
        Bandwidth::Fixed(s) => Err(SddError::arg(format!("bandwidth {s} must be positive"))),
    }
}

/// Kernel sums `(Σ_{i≠j} k(x_i,x_j), Σ_{i≠j} k(y_i,y_j), Σ_{i,j} k(x_i,y_j))`.
fn kernel_sums(x: &Matrix, y: &Matrix, sigma: f64) -> (f64, f64, f64) {
    let g = 1.0 / (2.0 * sigma * sigma);
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) * g).exp();
    let within = |m: &Matrix| {
        let mut s = 0.0;
        for i in 0..m.rows() {
            for j in i + 1..m.rows() {
                s += k(m.row(i), m.row(j));
            }
        }
        2.0 * s
    };
    let mut cross = 0.0;
    for a in x.row_iter() {
        for b in y.row_iter() {
            cross += k(a, b);
        }
    }
    (within(x), within(y), cross)
}

/// Unbiased (U-statistic) squared MMD with a Gaussian kernel, unfloored.
pub fn mmd_rbf_raw(x: &DataBatch, y: &DataBatch, bw: Bandwidth) -> Result<f64> {
    check_same_d(x, y)?;
    let (m, n) = (x.n(), y.n());
    if m < 2 || n < 2 {
        return Err(SddError::arg("mmd needs at least two rows in each sample"));
    }
    let sigma = resolve_bandwidth(x.values(), y.values(), bw)?;
    let (kxx, kyy, kxy) = kernel_sums(x.values(), y.values(), sigma);
    let (m, n) = (m as f64, n as f64);
    Ok(kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n))
}

/// Unbiased squared MMD, floored at 0 for reporting.
pub fn mmd_rbf(x: &DataBatch, y: &DataBatch, bw: Bandwidth) -> Result<f64> {
    Ok(mmd_rbf_raw(x, y, bw)?.max(0.0))
}

/// Biased (V-statistic) squared MMD, including the diagonal kernel terms.
pub fn mmd_rbf_biased(x: &DataBatch, y: &DataBatch, bw: Bandwidth) -> Result<f64> {
    check_same_d(x, y)?;
    let (m, n) = (x.n(), y.n());
    if m == 0 || n == 0 {
        return Err(SddError::arg("mmd needs non-empty samples"));
    }
    let sigma = resolve_bandwidth(x.values(), y.values(), bw)?;
    let (kxx, kyy, kxy) = kernel_sums(x.values(), y.values(), sigma);
    let (m, n) = (m as f64, n as f64);
    Ok((kxx + m) / (m * m) + (kyy + n) / (n * n) - 2.0 * kxy / (m * n))
}

/// Pearson correlation; errors when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(SddError::arg("correlation needs two equal-length vectors of length >= 2"));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(SddError::UndefinedCorrelation("zero-variance vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

fn column_means(b: &DataBatch) -> Vec<f64> {
    let n = b.n().max(1) as f64;
    b.values().col_sums().into_iter().map(|s| s / n).collect()
}

/// `(scc, pcc)` between the per-dimension mean vectors of two batches.
pub fn mean_expression_correlations(real: &DataBatch, gen: &DataBatch) -> Result<(f64, f64)> {
    check_same_d(real, gen)?;
    if real.d() < 2 {
        return Err(SddError::arg("correlations need d >= 2"));
    }
    if real.n() == 0 || gen.n() == 0 {
        return Err(SddError::arg("correlations need non-empty batches"));
    }
    let (a, b) = (column_means(real), column_means(gen));
    Ok((spearman(&a, &b)?, pearson(&a, &b)?))
}

pub const DEFAULT_LISI_K: usize = 30;

/// Mixing score in `[0, 1]`: the mean inverse Simpson index of real/generated
/// labels over each point's `k` nearest neighbours (self excluded, ties broken
/// by pooled index), rescaled by `(mean − 1)`.
pub fn lisi(real: &DataBatch, gen: &DataBatch, k: usize) -> Result<f64> {
    check_same_d(real, gen)?;
    let pooled: Vec<&[f64]> = real.values().row_iter().chain(gen.values().row_iter()).collect();
    let total = pooled.len();
    if k == 0 || k >= total {
        return Err(SddError::arg(format!("lisi needs 0 < k < pooled n ({k} vs {total})")));
    }
    let n_real = real.n();
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(total - 1);
    let mut sum = 0.0;
    for i in 0..total {
        dist.clear();
        dist.extend((0..total).filter(|&j| j != i).map(|j| (sq_dist(pooled[i], pooled[j]), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        dist.select_nth_unstable_by(k - 1, cmp);
        let gen_count = dist[..k].iter().filter(|(_, j)| *j >= n_real).count() as f64;
        let p1 = gen_count / k as f64;
        let p0 = 1.0 - p1;
        sum += 1.0 / (p0 * p0 + p1 * p1);
    }
    Ok((sum / total as f64 - 1.0).clamp(0.0, 1.0))
}

/// Equal-width histogram over `[lo, hi]`; the last bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.bins() as f64;
        let right = if bin + 1 == self.bins() { self.hi } else { self.lo + w * (bin + 1) as f64 };
        (self.lo + w * bin as f64, right)
    }

    /// Fraction of the total in `bin`.
    pub fn mass(&self, bin: usize) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.counts[bin] as f64 / t as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for b in 0..self.bins() {
            let (l, r) = self.edges(b);
            let _ = writeln!(s, "{l},{r},{}", self.counts[b]);
        }
        s
    }

    /// W1 between two histograms on the same bins, each treated as point
    /// masses at the bin centres.
    pub fn w1(&self, other: &Histogram) -> Result<f64> {
        if self.bins() != other.bins() || self.lo != other.lo || self.hi != other.hi {
            return Err(SddError::arg("histograms have different binning"));
        }
        if self.total() == 0 || other.total() == 0 {
            return Err(SddError::arg("W1 of an empty histogram"));
        }
        let w = (self.hi - self.lo) / self.bins() as f64;
        let (mut ca, mut cb, mut acc) = (0.0, 0.0, 0.0);
        for b in 0..self.bins() - 1 {
            ca += self.mass(b);
            cb += other.mass(b);
            acc += (ca - cb).abs() * w;
        }
        Ok(acc)
    }
}

pub const SPARSITY_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityHistogram {
    pub histogram: Histogram,
    pub mean: f64,
}

/// Per-row sparsity binned into 20 equal bins over `[0, 1]`. Bin indices are
/// computed from the integer zero count, so exact bin edges are never
/// misplaced by rounding.
pub fn sparsity_histogram(batch: &DataBatch) -> SparsityHistogram {
    let d = batch.d();
    let mut counts = vec![0u64; SPARSITY_BINS];
    let mut sum = 0.0;
    for row in batch.values().row_iter() {
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        let bin = if d == 0 { SPARSITY_BINS - 1 } else { (SPARSITY_BINS * zeros / d).min(SPARSITY_BINS - 1) };
        counts[bin] += 1;
        sum += if d == 0 { 1.0 } else { zeros as f64 / d as f64 };
    }
    SparsityHistogram {
        histogram: Histogram {
            lo: 0.0,
            hi: 1.0,
            counts,
        },
        mean: if batch.n() == 0 { 0.0 } else { sum / batch.n() as f64 },
    }
}

pub const LOGIT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitHistogram {
    pub histogram: Histogram,
    pub first_bin_mass: f64,
    pub last_bin_mass: f64,
    /// Mass in the first and last bins together.
    pub outer_mass: f64,
}

/// Histogram of sparsity-bit logits clamped to `[−1, 1]`.
pub fn sb_logit_histogram(logits: &Matrix, bins: usize) -> Result<LogitHistogram> {
    if bins < 2 {
        return Err(SddError::arg("logit histogram needs at least two bins"));
    }
    let mut counts = vec![0u64; bins];
    for &z in logits.as_slice() {
        let z = z.clamp(-1.0, 1.0);
        let b = (((z + 1.0) / 2.0 * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let histogram = Histogram {
        lo: -1.0,
        hi: 1.0,
        counts,
    };
    let first = histogram.mass(0);
    let last = histogram.mass(bins - 1);
    Ok(LogitHistogram {
        histogram,
        first_bin_mass: first,
        last_bin_mass: last,
        outer_mass: first + last,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    W1,
    Mmd,
    Corr,
    Lisi,
    Sparsity,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::W1,
        MetricKind::Mmd,
        MetricKind::Corr,
        MetricKind::Lisi,
        MetricKind::Sparsity,
    ];
}

impl std::str::FromStr for MetricKind {
    type Err = SddError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "w1" => MetricKind::W1,
            "mmd" => MetricKind::Mmd,
            "corr" | "scc" | "pcc" => MetricKind::Corr,
            "lisi" => MetricKind::Lisi,
            "sparsity" => MetricKind::Sparsity,
            other => return Err(SddError::arg(format!("unknown metric {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metrics: BTreeSet<MetricKind>,
    pub bandwidth: Bandwidth,
    pub lisi_k: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metrics: MetricKind::ALL.into_iter().collect(),
            bandwidth: Bandwidth::Median,
            lisi_k: DEFAULT_LISI_K,
        }
    }
}

/// Metrics comparing a generated batch to a real one. Metrics that were not
/// requested are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_real: usize,
    pub n_gen: usize,
    pub d: usize,
    /// W1 between per-row intensity sums, divided by the real sample's std.
    pub w1_stat: Option<f64>,
    pub mmd: Option<f64>,
    pub scc: Option<f64>,
    pub pcc: Option<f64>,
    /// Mean kNN inverse Simpson index minus 1, in `[0, 1]`.
    pub lisi: Option<f64>,
    pub lisi_k: usize,
    pub sparsity_mean_real: f64,
    pub sparsity_mean_gen: f64,
    pub sparsity_hist_real: Option<SparsityHistogram>,
    pub sparsity_hist_gen: Option<SparsityHistogram>,
    pub sparsity_w1: Option<f64>,
}

pub fn evaluate(real: &DataBatch, gen: &DataBatch, opts: &EvalOptions) -> Result<MetricsReport> {
    check_same_d(real, gen)?;
    if real.n() == 0 || gen.n() == 0 {
        return Err(SddError::arg("evaluation needs non-empty batches"));
    }
    let want = |m| opts.metrics.contains(&m);
    let w1_stat = if want(MetricKind::W1) {
        Some(wasserstein1(&pt_statistic(real), &pt_statistic(gen), true)?)
    } else {
        None
    };
    let mmd = if want(MetricKind::Mmd) { Some(mmd_rbf(real, gen, opts.bandwidth)?) } else { None };
    let (scc, pcc) = if want(MetricKind::Corr) {
        let (s, p) = mean_expression_correlations(real, gen)?;
        (Some(s), Some(p))
    } else {
        (None, None)
    };
    let lisi = if want(MetricKind::Lisi) {
        let k = opts.lisi_k.min(real.n() + gen.n() - 1);
        Some(lisi(real, gen, k)?)
    } else {
        None
    };
    let (hr, hg, sw) = if want(MetricKind::Sparsity) {
        let (hr, hg) = (sparsity_histogram(real), sparsity_histogram(gen));
        let w = hr.histogram.w1(&hg.histogram)?;
        (Some(hr), Some(hg), Some(w))
    } else {
        (None, None, None)
    };
    Ok(MetricsReport {
        n_real: real.n(),
        n_gen: gen.n(),
        d: real.d(),
        w1_stat,
        mmd,
        scc,
        pcc,
        lisi,
        lisi_k: opts.lisi_k.min(real.n() + gen.n() - 1),
        sparsity_mean_real: real.mean_sparsity(),
        sparsity_mean_gen: gen.mean_sparsity(),
        sparsity_hist_real: hr,
        sparsity_hist_gen: hg,
        sparsity_w1: sw,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Flat `metric,value` table of the scalar entries; missing metrics are
    /// left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let rows = [
            ("n_real", self.n_real.to_string()),
            ("n_gen", self.n_gen.to_string()),
            ("d", self.d.to_string()),
            ("w1_stat", opt(self.w1_stat)),
            ("mmd", opt(self.mmd)),
            ("scc", opt(self.scc)),
            ("pcc", opt(self.pcc)),
            ("lisi", opt(self.lisi)),
            ("lisi_k", self.lisi_k.to_string()),
            ("sparsity_mean_real", self.sparsity_mean_real.to_string()),
            ("sparsity_mean_gen", self.sparsity_mean_gen.to_string()),
            ("sparsity_w1", opt(self.sparsity_w1)),
        ];
        let mut s = String::from("metric,value\n");
        for (k, v) in rows {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}
