//! Verification-side evaluation: cosine scoring of sample pairs, ROC and
//! TAR@FAR tables, norm-bucket diagnostics, template pooling, and angular
//! spread statistics.
//!
//! Scoring uses cosine similarity; ranking by it is equivalent to ranking
//! by L2 distance between unit-normalized descriptors (`d^2 = 2 - 2s`), and
//! [`ranking_equivalence_check`] verifies that identity numerically.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norm threshold below which a descriptor cannot be scored.
const SCORE_EPSILON: f64 = 1e-12;

/// FAR targets reported in the TAR table.
pub const FAR_TARGETS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// A set of raw (unnormalized) feature descriptors with identity labels.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    /// Media/source tag per sample, used by template pooling.
    pub media: Vec<String>,
    /// `N x D`, raw penultimate-layer descriptors.
    pub features: Tensor,
    /// Cached L2 norm per row.
    pub norms: Vec<f64>,
}

impl FeatureSet {
    pub fn new(
        ids: Vec<String>,
        labels: Vec<usize>,
        media: Vec<String>,
        features: Tensor,
    ) -> Result<Self> {
        let n = features.shape()[0];
        if features.rank() != 2 || ids.len() != n || labels.len() != n || media.len() != n {
            return Err(Error::ShapeMismatch {
                op: "feature_set",
                lhs: features.shape().to_vec(),
                rhs: vec![ids.len(), labels.len(), media.len()],
            });
        }
        let norms = (0..n)
            .map(|r| features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            ids,
            labels,
            media,
            features,
            norms,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// CSV with header `id,label,media,f0,...,f{D-1}`, 9 significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("id,label,media");
        for j in 0..d {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for r in 0..self.len() {
            let _ = write!(out, "{},{},{}", self.ids[r], self.labels[r], self.media[r]);
            for v in self.features.row(r) {
                let _ = write!(out, ",{v:.8e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let bad = |detail: String| Error::DataFormat {
            path: source.to_string(),
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[0] != "id" || cols[1] != "label" || cols[2] != "media" {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let d = cols.len() - 3;
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut media = Vec::new();
        let mut data = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 3 {
                return Err(bad(format!(
                    "line {}: {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    d + 3
                )));
            }
            ids.push(fields[0].to_string());
            labels.push(
                fields[1]
                    .parse::<usize>()
                    .map_err(|e| bad(format!("line {}: bad label: {e}", lineno + 2)))?,
            );
            media.push(fields[2].to_string());
            for f in &fields[3..] {
                data.push(
                    f.parse::<f64>()
                        .map_err(|e| bad(format!("line {}: bad value: {e}", lineno + 2)))?,
                );
            }
        }
        if ids.is_empty() {
            return Err(bad("no feature rows".into()));
        }
        let n = ids.len();
        Self::new(ids, labels, media, Tensor::new(&[n, d], data)?)
    }

    fn id_index(&self) -> Result<HashMap<&str, usize>> {
        let mut map = HashMap::with_capacity(self.len());
        for (i, id) in self.ids.iter().enumerate() {
            if map.insert(id.as_str(), i).is_some() {
                return Err(Error::DataFormat {
                    path: "<features>".into(),
                    detail: format!("duplicate sample id {id:?}"),
                });
            }
        }
        Ok(map)
    }
}

/// One evaluation pair, by row index into a [`FeatureSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRecord {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// An evaluation pair list. Valid lists hold at least one genuine and one
/// impostor pair so a ROC exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairList {
    pub pairs: Vec<PairRecord>,
}

impl PairList {
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let mut genuine = 0usize;
        let mut impostor = 0usize;
        for p in &self.pairs {
            if p.a >= n_samples || p.b >= n_samples {
                return Err(Error::InvalidConfig {
                    detail: format!("pair ({}, {}) out of range for {n_samples} samples", p.a, p.b),
                });
            }
            if p.same {
                genuine += 1;
            } else {
                impostor += 1;
            }
        }
        if genuine == 0 || impostor == 0 {
            return Err(Error::InsufficientData {
                detail: format!(
                    "pair list needs both categories, has {genuine} genuine / {impostor} impostor"
                ),
            });
        }
        Ok(())
    }

    /// Serialize as one `<id_a>\t<id_b>\t<0|1>` line per pair.
    pub fn to_text(&self, ids: &[String]) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let _ = writeln!(out, "{}\t{}\t{}", ids[p.a], ids[p.b], u8::from(p.same));
        }
        out
    }

    /// Parse the tab format, resolving ids against the feature set.
    pub fn from_text(text: &str, features: &FeatureSet, source: &str) -> Result<Self> {
        let index = features.id_index()?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::DataFormat {
                    path: source.to_string(),
                    detail: format!("line {}: expected 3 tab-separated fields", lineno + 1),
                });
            }
            let resolve = |id: &str| {
                index.get(id).copied().ok_or(Error::UnknownId { id: id.into() })
            };
            let same = match fields[2] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::DataFormat {
                        path: source.to_string(),
                        detail: format!("line {}: flag must be 0 or 1, got {other:?}", lineno + 1),
                    })
                }
            };
            pairs.push(PairRecord {
                a: resolve(fields[0])?,
                b: resolve(fields[1])?,
                same,
            });
        }
        Ok(Self { pairs })
    }
}

/// Cosine similarity between two descriptors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= SCORE_EPSILON || nb <= SCORE_EPSILON {
        return Err(Error::DegenerateInput {
            op: "cosine_similarity",
            row: usize::from(na > SCORE_EPSILON),
            norm: na.min(nb),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// One ROC point: the rates obtained by accepting scores `>= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
}

/// TAR at one FAR target, with the operating threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TarAtFar {
    pub far_target: f64,
    pub tar: f64,
    pub threshold: f64,
}

/// Result of a pair-list evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Swept over every distinct score, highest threshold first.
    pub roc: Vec<RocPoint>,
    pub tar_at_far: Vec<TarAtFar>,
    pub best_threshold: f64,
    pub best_accuracy: f64,
    pub buckets: Option<BucketMatrix>,
}

/// Per-bucket-pair evaluation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketCell {
    pub bucket_a: u8,
    pub bucket_b: u8,
    pub genuine: usize,
    pub impostor: usize,
    /// Present only when the cell has both pair categories.
    pub report: Option<EvalReport>,
}

/// The six-cell matrix over unordered bucket pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketMatrix {
    pub thresholds: (f64, f64),
    pub cells: Vec<BucketCell>,
}

fn scores_for(features: &FeatureSet, pairs: &PairList) -> Result<Vec<(f64, bool)>> {
    for p in &pairs.pairs {
        for idx in [p.a, p.b] {
            if features.norms[idx] <= SCORE_EPSILON {
                return Err(Error::DegenerateInput {
                    op: "evaluate_pairs",
                    row: idx,
                    norm: features.norms[idx],
                });
            }
        }
    }
    pairs
        .pairs
        .iter()
        .map(|p| {
            cosine_similarity(features.features.row(p.a), features.features.row(p.b))
                .map(|s| (s, p.same))
        })
        .collect()
}

/// ROC over all distinct thresholds of the given scores, plus the TAR table
/// and the best single-threshold accuracy.
pub fn evaluate_scores(scored: &[(f64, bool)]) -> EvalReport {
    let genuine_total = scored.iter().filter(|(_, same)| *same).count();
    let impostor_total = scored.len() - genuine_total;
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("finite scores"));

    let mut roc = Vec::new();
    let (mut ta, mut fa) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                ta += 1;
            } else {
                fa += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            far: fa as f64 / impostor_total.max(1) as f64,
            tar: ta as f64 / genuine_total.max(1) as f64,
            threshold,
        });
    }

    // Conservative TAR@FAR: no interpolation; take the highest achievable
    // FAR that does not exceed the target. FAR and TAR are both
    // non-decreasing along the sweep, so the last qualifying point wins.
    let tar_at_far = FAR_TARGETS
        .iter()
        .map(|&far_target| {
            let mut best = TarAtFar {
                far_target,
                tar: 0.0,
                threshold: f64::INFINITY,
            };
            for point in &roc {
                if point.far <= far_target {
                    best.tar = point.tar;
                    best.threshold = point.threshold;
                } else {
                    break;
                }
            }
            best
        })
        .collect();

    // Accuracy sweep includes the reject-everything threshold.
    let total = scored.len().max(1) as f64;
    let mut best_threshold = f64::INFINITY;
    let mut best_accuracy = impostor_total as f64 / total;
    for point in &roc {
        let accepted_true = point.tar * genuine_total as f64;
        let rejected_true = (1.0 - point.far) * impostor_total as f64;
        let acc = (accepted_true + rejected_true) / total;
        if acc > best_accuracy {
            best_accuracy = acc;
            best_threshold = point.threshold;
        }
    }

    EvalReport {
        roc,
        tar_at_far,
        best_threshold,
        best_accuracy,
        buckets: None,
    }
}

/// Score every pair with cosine similarity and sweep the ROC.
pub fn evaluate_pairs(features: &FeatureSet, pairs: &PairList) -> Result<EvalReport> {
    pairs.validate(features.len())?;
    Ok(evaluate_scores(&scores_for(features, pairs)?))
}

/// Assign each sample to a norm bucket: 1 below `t1`, 2 in `[t1, t2)`,
/// 3 at or above `t2`.
pub fn norm_buckets(features: &FeatureSet, thresholds: (f64, f64)) -> Result<Vec<u8>> {
    let (t1, t2) = thresholds;
    if !(t1 < t2) {
        return Err(Error::InvalidConfig {
            detail: format!("bucket thresholds must satisfy t1 < t2, got ({t1}, {t2})"),
        });
    }
    Ok(features
        .norms
        .iter()
        .map(|&n| {
            if n < t1 {
                1
            } else if n < t2 {
                2
            } else {
                3
            }
        })
        .collect())
}

/// [`evaluate_pairs`] plus the six-cell bucket matrix: pairs are grouped by
/// the unordered pair of their endpoints' norm buckets and each populated
/// cell is evaluated on its own.
pub fn evaluate_pairs_with_buckets(
    features: &FeatureSet,
    pairs: &PairList,
    thresholds: (f64, f64),
) -> Result<EvalReport> {
    let mut report = evaluate_pairs(features, pairs)?;
    let buckets = norm_buckets(features, thresholds)?;
    let mut grouped: BTreeMap<(u8, u8), Vec<(f64, bool)>> = BTreeMap::new();
    for (a, b) in [(1u8, 1u8), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)] {
        grouped.insert((a, b), Vec::new());
    }
    let scored = scores_for(features, pairs)?;
    for (p, &(score, same)) in pairs.pairs.iter().zip(&scored) {
        let (ba, bb) = (buckets[p.a], buckets[p.b]);
        let key = (ba.min(bb), ba.max(bb));
        grouped.get_mut(&key).expect("bucket key").push((score, same));
    }
    let cells = grouped
        .into_iter()
        .map(|((bucket_a, bucket_b), scored)| {
            let genuine = scored.iter().filter(|(_, same)| *same).count();
            let impostor = scored.len() - genuine;
            let report = (genuine > 0 && impostor > 0).then(|| evaluate_scores(&scored));
            BucketCell {
                bucket_a,
                bucket_b,
                genuine,
                impostor,
                report,
            }
        })
        .collect();
    report.buckets = Some(BucketMatrix { thresholds, cells });
    Ok(report)
}

/// Check `d^2 = 2 - 2 s` per pair, where `d` is the L2 distance between the
/// unit-normalized descriptors and `s` the cosine score. Returns whether
/// every pair satisfies the identity within 1e-9.
pub fn ranking_equivalence_check(features: &FeatureSet, pairs: &PairList) -> Result<bool> {
    for p in &pairs.pairs {
        let s = cosine_similarity(features.features.row(p.a), features.features.row(p.b))?;
        let (ra, rb) = (features.features.row(p.a), features.features.row(p.b));
        let (na, nb) = (features.norms[p.a], features.norms[p.b]);
        let d2: f64 = ra
            .iter()
            .zip(rb)
            .map(|(x, y)| {
                let diff = x / na - y / nb;
                diff * diff
            })
            .sum();
        if (d2 - (2.0 - 2.0 * s)).abs() > 1e-9 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Two-level template pooling: average the unit-normalized descriptors
/// within each media id, average the media means, then unit-normalize.
pub fn pool_template(features: &Tensor, media_ids: &[String]) -> Result<Vec<f64>> {
    if features.rank() != 2 || features.rows() != media_ids.len() || media_ids.is_empty() {
        return Err(Error::InsufficientData {
            detail: format!(
                "template needs matching non-empty descriptors and media ids, got {} rows / {} ids",
                features.shape()[0],
                media_ids.len()
            ),
        });
    }
    let d = features.cols();
    let mut by_media: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (r, media) in media_ids.iter().enumerate() {
        let row = features.row(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= SCORE_EPSILON {
            return Err(Error::DegenerateInput {
                op: "pool_template",
                row: r,
                norm,
            });
        }
        let entry = by_media
            .entry(media.as_str())
            .or_insert_with(|| (vec![0.0; d], 0));
        for (acc, v) in entry.0.iter_mut().zip(row) {
            *acc += v / norm;
        }
        entry.1 += 1;
    }
    let mut pooled = vec![0.0; d];
    let media_count = by_media.len() as f64;
    for (sum, count) in by_media.values() {
        for (p, s) in pooled.iter_mut().zip(sum) {
            *p += s / *count as f64 / media_count;
        }
    }
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= SCORE_EPSILON {
        return Err(Error::DegenerateInput {
            op: "pool_template",
            row: 0,
            norm,
        });
    }
    for v in &mut pooled {
        *v /= norm;
    }
    Ok(pooled)
}

/// Per-class angular spread: the RMS angle between a class's unit-normalized
/// descriptors and their mean direction.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularSpread {
    /// `(class, sample count, spread in radians)` per measured class.
    pub per_class: Vec<(usize, usize, f64)>,
    /// Classes skipped for having fewer than two samples (or a vanishing
    /// mean direction).
    pub skipped: Vec<usize>,
    pub macro_avg: f64,
}

pub fn angular_spread(features: &FeatureSet) -> Result<AngularSpread> {
    let d = features.dim();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &label) in features.labels.iter().enumerate() {
        by_class.entry(label).or_default().push(r);
    }
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for (class, rows) in by_class {
        if rows.len() < 2 {
            skipped.push(class);
            continue;
        }
        let mut mean = vec![0.0; d];
        let mut units = Vec::with_capacity(rows.len());
        let mut degenerate = false;
        for &r in &rows {
            let norm = features.norms[r];
            if norm <= SCORE_EPSILON {
                return Err(Error::DegenerateInput {
                    op: "angular_spread",
                    row: r,
                    norm,
                });
            }
            let unit: Vec<f64> = features.features.row(r).iter().map(|v| v / norm).collect();
            for (m, u) in mean.iter_mut().zip(&unit) {
                *m += u;
            }
            units.push(unit);
        }
        let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if mean_norm <= SCORE_EPSILON {
            degenerate = true;
        }
        if degenerate {
            skipped.push(class);
            continue;
        }
        for m in &mut mean {
            *m /= mean_norm;
        }
        let sq_sum: f64 = units
            .iter()
            .map(|u| {
                let dot: f64 = u.iter().zip(&mean).map(|(a, b)| a * b).sum();
                let angle = dot.clamp(-1.0, 1.0).acos();
                angle * angle
            })
            .sum();
        per_class.push((class, rows.len(), (sq_sum / rows.len() as f64).sqrt()));
    }
    if per_class.is_empty() {
        return Err(Error::InsufficientData {
            detail: "no class has two or more samples".into(),
        });
    }
    let macro_avg = per_class.iter().map(|(_, _, s)| s).sum::<f64>() / per_class.len() as f64;
    Ok(AngularSpread {
        per_class,
        skipped,
        macro_avg,
    })
}

/// Evaluation report serialized as sectioned CSV.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("# roc\nfar,tar,threshold\n");
    for p in &report.roc {
        let _ = writeln!(out, "{:.8e},{:.8e},{:.8e}", p.far, p.tar, p.threshold);
    }
    out.push_str("# tar_at_far\nfar_target,tar,threshold\n");
    for t in &report.tar_at_far {
        let _ = writeln!(out, "{:.8e},{:.8e},{:.8e}", t.far_target, t.tar, t.threshold);
    }
    out.push_str("# accuracy\nbest_threshold,accuracy\n");
    let _ = writeln!(out, "{:.8e},{:.8e}", report.best_threshold, report.best_accuracy);
    if let Some(matrix) = &report.buckets {
        let _ = writeln!(
            out,
            "# buckets t1={:.8e} t2={:.8e}",
            matrix.thresholds.0, matrix.thresholds.1
        );
        out.push_str("bucket_a,bucket_b,genuine,impostor,accuracy,tar_at_far_1e-2\n");
        for cell in &matrix.cells {
            match &cell.report {
                Some(r) => {
                    let tar = r
                        .tar_at_far
                        .iter()
                        .find(|t| t.far_target == 1e-2)
                        .map(|t| t.tar)
                        .unwrap_or(0.0);
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{:.8e},{:.8e}",
                        cell.bucket_a, cell.bucket_b, cell.genuine, cell.impostor, r.best_accuracy, tar
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},,",
                        cell.bucket_a, cell.bucket_b, cell.genuine, cell.impostor
                    );
                }
            }
        }
    }
    out
}
