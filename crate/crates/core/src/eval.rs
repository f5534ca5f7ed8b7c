//! Evaluation against known networks and diagnostics on embeddings.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::CommunityData;
use crate::error::{Error, Result};
use crate::rng;

/// Relative abundance index of source `j` on target `i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rai {
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// `Δ_k = y_ki − ȳ_i` over sites where both species are present; `None` when
/// they never co-occur.
pub fn rai(data: &CommunityData, source: usize, target: usize) -> Option<Rai> {
    let y = &data.abundance;
    let grand = y.column(target).mean().unwrap_or(0.0);
    let deltas: Vec<f64> = (0..data.n_sites())
        .filter(|&k| y[(k, target)] > 0.0 && y[(k, source)] > 0.0)
        .map(|k| y[(k, target)] - grand)
        .collect();
    if deltas.is_empty() {
        return None;
    }
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let std = (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    Some(Rai {
        mean,
        std,
        ci_low: mean - 1.96 * std,
        ci_high: mean + 1.96 * std,
        n: deltas.len(),
    })
}

/// RAI for every ordered pair; entry (i, j) is the index of source j on
/// target i, matching the orientation of association matrices.
pub fn rai_matrix(data: &CommunityData) -> Array2<Option<Rai>> {
    let m = data.n_species();
    Array2::from_shape_fn((m, m), |(i, j)| if i == j { None } else { rai(data, j, i) })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn off_diagonal(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
}

fn check_shapes<A, B>(a: &Array2<A>, b: &Array2<B>) -> Result<()> {
    if a.dim() != b.dim() || a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and reference {:?} must be the same square shape",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// One-vs-rest precision, recall and F1 over ordered off-diagonal pairs, for
/// the classes −1, 0 and 1.
pub fn classify_associations(predicted: &Array2<i8>, truth: &Array2<i8>) -> Result<BTreeMap<i8, ClassMetrics>> {
    check_shapes(predicted, truth)?;
    let mut out = BTreeMap::new();
    for class in [-1i8, 0, 1] {
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for (i, j) in off_diagonal(truth.nrows()) {
            let (p, t) = (predicted[(i, j)] == class, truth[(i, j)] == class);
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        out.insert(class, ClassMetrics { precision, recall, f1, support: tp + fneg });
    }
    Ok(out)
}

/// Area under the ROC curve from the Mann–Whitney rank statistic with
/// midranks. `None` when one class is empty.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// Precision–recall area by the trapezoid rule over distinct score
/// thresholds, starting at recall 0 with the first precision.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    let mut idx = 0;
    while idx < order.len() {
        let s = scores[order[idx]];
        while idx < order.len() && scores[order[idx]] == s {
            if labels[order[idx]] {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        points.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut area = 0.0;
    let (mut r0, mut p0) = (0.0, points[0].1);
    for (r, p) in points {
        area += (r - r0) * (p + p0) / 2.0;
        r0 = r;
        p0 = p;
    }
    Some(area)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f2: f64,
    pub tss: f64,
    pub confusion: Confusion,
}

/// Scores the strength matrix against a binary reference network: edges are
/// predicted where `a > threshold`; AUC ranks the raw strengths.
pub fn binary_structure_metrics(strengths: &Array2<f64>, reference: &Array2<u8>, threshold: f64) -> Result<BinaryMetrics> {
    check_shapes(strengths, reference)?;
    let mut c = Confusion::default();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, j) in off_diagonal(strengths.nrows()) {
        let truth = reference[(i, j)] > 0;
        let pred = strengths[(i, j)] > threshold;
        match (pred, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
        scores.push(strengths[(i, j)]);
        labels.push(truth);
    }
    let total = c.tp + c.fp + c.tn + c.fn_;
    let precision = ratio(c.tp, c.tp + c.fp);
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    let f2 = if precision + sensitivity > 0.0 {
        5.0 * precision * sensitivity / (4.0 * precision + sensitivity)
    } else {
        0.0
    };
    Ok(BinaryMetrics {
        accuracy: ratio(c.tp + c.tn, total),
        auc: roc_auc(&scores, &labels),
        precision,
        sensitivity,
        specificity,
        f2,
        tss: sensitivity + specificity - 1.0,
        confusion: c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub reference: String,
    pub threshold_positive: f64,
    pub threshold_negative: f64,
    /// Keyed by class name: "negative", "neutral", "positive".
    pub classes: BTreeMap<String, ClassMetrics>,
    pub pr_auc: BTreeMap<String, Option<f64>>,
    pub binary: BinaryMetrics,
}

fn class_name(c: i8) -> &'static str {
    match c {
        -1 => "negative",
        0 => "neutral",
        _ => "positive",
    }
}

/// Full report for a strength matrix against signed truth labels. Binary
/// metrics treat positive truth labels as edges.
pub fn evaluate(strengths: &Array2<f64>, truth: &Array2<i8>, eps_pos: f64, eps_neg: f64, reference: &str) -> Result<EvaluationReport> {
    check_shapes(strengths, truth)?;
    let predicted = crate::network::discretize(strengths, eps_pos, eps_neg)?;
    let classes = classify_associations(&predicted, truth)?
        .into_iter()
        .map(|(c, v)| (class_name(c).to_string(), v))
        .collect();
    let mut pr = BTreeMap::new();
    for (class, sign) in [(1i8, 1.0), (-1, -1.0)] {
        let (scores, labels): (Vec<f64>, Vec<bool>) = off_diagonal(truth.nrows())
            .map(|(i, j)| (sign * strengths[(i, j)], truth[(i, j)] == class))
            .unzip();
        pr.insert(class_name(class).to_string(), pr_auc(&scores, &labels));
    }
    let edges = truth.mapv(|t| u8::from(t > 0));
    Ok(EvaluationReport {
        reference: reference.to_string(),
        threshold_positive: eps_pos,
        threshold_negative: eps_neg,
        classes,
        pr_auc: pr,
        binary: binary_structure_metrics(strengths, &edges, eps_pos)?,
    })
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let r = (start + end) as f64 / 2.0 + 1.0;
        for &idx in &order[start..=end] {
            ranks[idx] = r;
        }
        start = end + 1;
    }
    ranks
}

/// One-sided Mann–Whitney test of `x` stochastically greater than `y`.
/// Returns `(U_x, p)`. Exact over the (tied) rank configuration when both
/// samples have at most 20 elements, otherwise the tie-corrected normal
/// approximation with continuity correction.
pub fn mann_whitney_greater(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return None;
    }
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&all);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    if n1 <= 20 && n2 <= 20 {
        return Some((u, exact_upper_tail(&ranks, n1, r1)));
    }
    let n = (n1 + n2) as f64;
    let mut ties = BTreeMap::new();
    for r in &ranks {
        *ties.entry(r.to_bits()).or_insert(0usize) += 1;
    }
    let tie_term: f64 = ties.values().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - tie_term);
    if var <= 0.0 {
        return Some((u, 1.0));
    }
    let z = (u - (n1 * n2) as f64 / 2.0 - 0.5) / var.sqrt();
    let p = 1.0 - Normal::standard().cdf(z);
    Some((u, p))
}

/// `P(R ≥ observed)` for the rank sum of a random `n1`-subset, counted over
/// doubled midranks so every rank is an integer.
fn exact_upper_tail(ranks: &[f64], n1: usize, observed: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[c][s]: number of c-subsets with doubled rank sum s.
    let mut ways = vec![vec![0f64; max_sum + 1]; n1 + 1];
    ways[0][0] = 1.0;
    for &r in &doubled {
        for c in (1..=n1).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[c - 1][s - r];
                if add > 0.0 {
                    ways[c][s] += add;
                }
            }
        }
    }
    let target = (2.0 * observed).round() as usize;
    let total: f64 = ways[n1].iter().sum();
    let tail: f64 = ways[n1][target.min(max_sum + 1)..].iter().sum();
    tail / total
}

pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Within-group versus between-group cosine similarities of embedding rows,
/// tested with a one-sided Mann–Whitney (within > between).
pub fn embedding_group_test(emb: &Array2<f64>, groups: &[usize]) -> Result<(f64, f64)> {
    if groups.len() != emb.nrows() {
        return Err(Error::Dimension(format!("{} labels for {} rows", groups.len(), emb.nrows())));
    }
    let mut sizes = BTreeMap::new();
    for &g in groups {
        *sizes.entry(g).or_insert(0usize) += 1;
    }
    if sizes.len() < 2 {
        return Err(Error::Invalid("embedding group test needs at least two groups".into()));
    }
    for (g, s) in &sizes {
        if *s == 1 {
            warn!("group {g} has a single species and contributes no within-group pair");
        }
    }
    let (mut within, mut between) = (Vec::new(), Vec::new());
    for a in 0..emb.nrows() {
        for b in a + 1..emb.nrows() {
            let s = cosine(emb.row(a), emb.row(b));
            if groups[a] == groups[b] {
                within.push(s);
            } else {
                between.push(s);
            }
        }
    }
    mann_whitney_greater(&within, &between)
        .ok_or_else(|| Error::Invalid("no within-group pair to compare".into()))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between embedding cosine similarity and a target
/// similarity over unordered species pairs, with a two-sided permutation
/// p-value over `permutations` relabelings of the target.
pub fn similarity_correlation(emb: &Array2<f64>, target: &Array2<f64>, permutations: usize, seed: u64) -> Option<(f64, f64)> {
    let m = emb.nrows();
    if target.dim() != (m, m) {
        return None;
    }
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let sims: Vec<f64> = pairs.iter().map(|&(a, b)| cosine(emb.row(a), emb.row(b))).collect();
    let t: Vec<f64> = pairs.iter().map(|&(a, b)| target[(a, b)]).collect();
    let r = pearson(&sims, &t)?;
    let mut r_gen = rng::stream(seed, "similarity-permutation", 0);
    let mut perm: Vec<usize> = (0..m).collect();
    let mut extreme = 0usize;
    for _ in 0..permutations {
        perm.shuffle(&mut r_gen);
        let tp: Vec<f64> = pairs.iter().map(|&(a, b)| target[(perm[a], perm[b])]).collect();
        if let Some(rp) = pearson(&sims, &tp) {
            if rp.abs() >= r.abs() - 1e-12 {
                extreme += 1;
            }
        }
    }
    Some((r, (extreme + 1) as f64 / (permutations + 1) as f64))
}

/// Quantile bin index of every value, `bins` levels, ties kept together.
pub fn quantile_bins(values: ArrayView1<'_, f64>, bins: usize) -> Vec<usize> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins)
        .map(|b| {
            let pos = b as f64 / bins as f64 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        })
        .collect();
    values.iter().map(|&v| edges.iter().filter(|&&e| v > e).count()).collect()
}

fn entropy(counts: &mut [usize], total: usize) -> f64 {
    counts.sort_unstable();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information (nats) between two quantile-binned variables.
pub fn mutual_information(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, bins: usize) -> f64 {
    let n = a.len();
    let (ba, bb) = (quantile_bins(a, bins), quantile_bins(b, bins));
    let mut ca = vec![0usize; bins];
    let mut cb = vec![0usize; bins];
    let mut joint = vec![0usize; bins * bins];
    for k in 0..n {
        ca[ba[k]] += 1;
        cb[bb[k]] += 1;
        joint[ba[k] * bins + bb[k]] += 1;
    }
    (entropy(&mut ca, n) + entropy(&mut cb, n) - entropy(&mut joint, n)).max(0.0)
}

/// Mutual information between every trait (columns of `traits`) and every
/// embedding dimension.
pub fn trait_embedding_mi(traits: &Array2<f64>, emb: &Array2<f64>, bins: usize) -> Result<Array2<f64>> {
    if traits.nrows() != emb.nrows() {
        return Err(Error::Dimension(format!("{} trait rows for {} species", traits.nrows(), emb.nrows())));
    }
    if bins < 2 {
        return Err(Error::Invalid("at least two bins are needed".into()));
    }
    let m = traits.nrows();
    if m < bins * bins {
        warn!("{m} species for {bins} bins; the plug-in estimate will be biased upward");
    }
    let mut out = Array2::zeros((traits.ncols(), emb.ncols()));
    for t in 0..traits.ncols() {
        let col = traits.column(t);
        if col.iter().all(|&v| v == col[0]) {
            warn!("trait {t} is constant; its mutual information is 0");
            continue;
        }
        for d in 0..emb.ncols() {
            out[(t, d)] = mutual_information(col, emb.column(d), bins);
        }
    }
    Ok(out)
}
