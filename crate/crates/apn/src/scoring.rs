//! Per-frame anomaly scores and ROC-AUC evaluation.
//!
//! The prediction cue is PSNR of the predicted frame (lower PSNR means more
//! anomalous), the feature cue is the compactness error of the encoding
//! against the prototype pool. Both are min-max normalized per video, then
//! fused as (pred + lambda_s * feat) / (1 + lambda_s).

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Scoring knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Balance weight of the feature cue against the prediction cue.
    pub lambda_s: f64,
    /// Average per-video AUCs instead of one global curve.
    pub per_video_auc: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { lambda_s: 1.0, per_video_auc: false }
    }
}

/// One scored frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub psnr: f64,
    pub pred_score: f64,
    pub feat_score: f64,
    pub combined: f64,
    /// 0 = normal, 1 = anomalous.
    pub label: u8,
}

/// Peak signal-to-noise ratio in dB for frames in [-1, 1] (peak = 2).
/// The MSE is floored at 1e-12, capping perfect predictions near 126 dB.
pub fn psnr(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    if y_hat.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            detail: format!("{:?} vs {:?}", y_hat.shape(), y.shape()),
        });
    }
    let mse: f64 = y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.numel() as f64;
    let mse = mse.max(1e-12);
    Ok(10.0 * (4.0 / mse).log10())
}

/// Compactness error of an encoding against a prototype pool: the mean L2
/// distance from each encoding row to its most beta-relevant prototype.
/// Same formula as the compactness loss, evaluated without gradients.
pub fn feature_error(enc_rows: &Tensor, pool: &Tensor, beta: &Tensor) -> Result<f64> {
    let (n, c) = (enc_rows.shape()[0], enc_rows.shape()[1]);
    let m = pool.shape()[0];
    if m == 0 {
        return Err(Error::TooFewPrototypes { needed: 1, got: 0 });
    }
    if pool.shape()[1] != c || beta.shape() != [n, m] {
        return Err(Error::ShapeMismatch {
            op: "feature_error",
            detail: format!(
                "enc {:?}, pool {:?}, beta {:?}",
                enc_rows.shape(),
                pool.shape(),
                beta.shape()
            ),
        });
    }
    let mut acc = 0.0;
    for i in 0..n {
        let row = &beta.data()[i * m..(i + 1) * m];
        let best = (0..m).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let d: f64 = (0..c)
            .map(|ch| {
                let diff = enc_rows.idx2(i, ch) - pool.idx2(best, ch);
                diff * diff
            })
            .sum::<f64>()
            .sqrt();
        acc += d;
    }
    Ok(acc / n as f64)
}

/// Per-video min-max normalization to [0, 1]. Constant sequences map to all
/// zeros; fewer than 2 frames is an error.
pub fn normalize_scores(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::EmptyVideo);
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span < 1e-12 {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - lo) / span).collect())
}

/// Convex fusion (pred + lambda_s * feat) / (1 + lambda_s); lambda_s = 0
/// keeps the prediction score alone.
pub fn combine(pred_score: f64, feat_score: f64, lambda_s: f64) -> Result<f64> {
    if lambda_s < 0.0 {
        return Err(Error::NegativeWeight(lambda_s));
    }
    Ok((pred_score + lambda_s * feat_score) / (1.0 + lambda_s))
}

/// ROC curve points and trapezoidal AUC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    /// (false positive rate, true positive rate), from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Threshold sweep over distinct score values with trapezoidal area. Tied
/// scores share one threshold step, which makes the area equal the
/// rank statistic (concordant + 0.5 * ties) / (pos * neg).
pub fn roc_auc(scores: &[(f64, u8)]) -> Result<RocCurve> {
    let n_pos = scores.iter().filter(|(_, l)| *l == 1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass { n_pos, n_neg });
    }
    let mut sorted: Vec<(f64, u8)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let mut area = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut last_tpr, mut last_fpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < sorted.len() {
        // Consume the whole tie group at this threshold.
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        area += (fpr - last_fpr) * (tpr + last_tpr) / 2.0;
        points.push((fpr, tpr));
        last_tpr = tpr;
        last_fpr = fpr;
    }
    Ok(RocCurve { points, auc: area, n_pos, n_neg })
}

/// AUC over all records: one global curve by default, or the mean of
/// per-video curves when configured.
pub fn evaluate(records: &[ScoreRecord], cfg: &ScoreConfig) -> Result<RocCurve> {
    if !cfg.per_video_auc {
        let scores: Vec<(f64, u8)> = records.iter().map(|r| (r.combined, r.label)).collect();
        return roc_auc(&scores);
    }
    let mut videos: Vec<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    videos.dedup();
    videos.sort_unstable();
    videos.dedup();
    let mut aucs = Vec::new();
    let (mut n_pos, mut n_neg) = (0, 0);
    for vid in &videos {
        let scores: Vec<(f64, u8)> = records
            .iter()
            .filter(|r| r.video_id == *vid)
            .map(|r| (r.combined, r.label))
            .collect();
        let curve = roc_auc(&scores)?;
        n_pos += curve.n_pos;
        n_neg += curve.n_neg;
        aucs.push(curve.auc);
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    Ok(RocCurve { points: vec![(0.0, 0.0), (1.0, 1.0)], auc: mean, n_pos, n_neg })
}

/// Builds per-frame records for one video from raw descriptor sequences:
/// pred_score = 1 - minmax(psnr), feat_score = minmax(feature_error).
pub fn video_records(
    video_id: &str,
    first_frame_index: usize,
    psnrs: &[f64],
    feat_errors: &[f64],
    labels: &[u8],
    cfg: &ScoreConfig,
) -> Result<Vec<ScoreRecord>> {
    if psnrs.len() != feat_errors.len() || psnrs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "video_records",
            detail: format!(
                "psnr {} / feat {} / labels {}",
                psnrs.len(),
                feat_errors.len(),
                labels.len()
            ),
        });
    }
    let norm_psnr = normalize_scores(psnrs)?;
    let norm_feat = normalize_scores(feat_errors)?;
    let mut out = Vec::with_capacity(psnrs.len());
    for i in 0..psnrs.len() {
        let pred_score = 1.0 - norm_psnr[i];
        let feat_score = norm_feat[i];
        out.push(ScoreRecord {
            video_id: video_id.to_string(),
            frame_index: first_frame_index + i,
            psnr: psnrs[i],
            pred_score,
            feat_score,
            combined: combine(pred_score, feat_score, cfg.lambda_s)?,
            label: labels[i],
        });
    }
    Ok(out)
}

// -- CSV / JSON interfaces ---------------------------------------------------

pub const SCORES_HEADER: [&str; 7] = [
    "video_id",
    "frame_index",
    "psnr",
    "pred_score",
    "feat_score",
    "combined",
    "label",
];

pub fn write_scores_csv(path: &std::path::Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(SCORES_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record(&[
            r.video_id.clone(),
            r.frame_index.to_string(),
            r.psnr.to_string(),
            r.pred_score.to_string(),
            r.feat_score.to_string(),
            r.combined.to_string(),
            r.label.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: &std::path::Path) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != 7 {
            return Err(Error::ShapeMismatch {
                op: "read_scores_csv",
                detail: format!("expected 7 columns, got {}", row.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::InvalidConfig(format!("bad float {s:?} in scores CSV")))
        };
        out.push(ScoreRecord {
            video_id: row[0].to_string(),
            frame_index: row[1]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad index {:?}", &row[1])))?,
            psnr: parse_f(&row[2])?,
            pred_score: parse_f(&row[3])?,
            feat_score: parse_f(&row[4])?,
            combined: parse_f(&row[5])?,
            label: row[6]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad label {:?}", &row[6])))?,
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("csv: {other:?}")),
    }
}

/// Canonical JSON report: {auc, curve_points, n_neg, n_pos} (sorted keys).
pub fn auc_report_json(curve: &RocCurve) -> Result<String> {
    let value = serde_json::json!({
        "auc": curve.auc,
        "n_pos": curve.n_pos,
        "n_neg": curve.n_neg,
        "curve_points": curve.points,
    });
    Ok(serde_json::to_string_pretty(&value)?)
}
