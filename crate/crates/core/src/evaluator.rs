//! Proposal generation and detection mAP over temporal IoU thresholds.

use std::fmt::Write as _;
use std::thread;

use crate::base_model::Cas;
use crate::corpus::{Segment, Video};
use crate::error::{Error, Result};
use crate::model::{ForwardSettings, Inference, Model};

/// Localization and scoring parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Number of attention thresholds, spread evenly inside (low, high).
    pub num_att_thresholds: usize,
    pub att_threshold_low: f64,
    pub att_threshold_high: f64,
    /// Outer margin on each side of a proposal, as a fraction of its length.
    pub outer_ratio: f64,
    /// Categories with a video score above this produce proposals.
    pub accept_cut: f64,
    pub nms_iou: f64,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            num_att_thresholds: 10,
            att_threshold_low: 0.1,
            att_threshold_high: 0.9,
            outer_ratio: 0.25,
            accept_cut: 0.1,
            nms_iou: 0.5,
            threads: 1,
        }
    }
}

impl EvalConfig {
    pub fn att_thresholds(&self) -> Vec<f64> {
        let n = self.num_att_thresholds;
        let span = self.att_threshold_high - self.att_threshold_low;
        (1..=n)
            .map(|i| self.att_threshold_low + span * i as f64 / (n + 1) as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() || self.iou_thresholds.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::Domain("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.num_att_thresholds == 0 || !(self.att_threshold_low < self.att_threshold_high) {
            return Err(Error::Domain("attention threshold range is empty".into()));
        }
        if self.threads == 0 {
            return Err(Error::Domain("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scored temporal interval, 1-based snippet positions inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub start: usize,
    pub end: usize,
    pub category: usize,
    pub score: f64,
}

/// IoU of inclusive snippet intervals, each read as `[start, end + 1)`.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = (a.1 + 1).min(b.1 + 1);
    let inter = hi.saturating_sub(lo) as f64;
    let union = (a.1 + 1 - a.0) as f64 + (b.1 + 1 - b.0) as f64 - inter;
    inter / union
}

/// Maximal runs of `values[t] >= threshold`, as 0-based inclusive ranges.
pub fn runs_above(values: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &v) in values.iter().enumerate() {
        match (v >= threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, values.len() - 1));
    }
    out
}

/// Mean inside `[s, e]` minus mean over the flanking margins. A proposal
/// spanning the whole video has no outer region and scores its inner mean.
pub fn outer_inner_contrast(values: &[f64], s: usize, e: usize, outer_ratio: f64) -> f64 {
    let len = e + 1 - s;
    let margin = ((len as f64 * outer_ratio).round() as usize).max(1);
    let inner = values[s..=e].iter().sum::<f64>() / len as f64;
    let left = s.saturating_sub(margin)..s;
    let right = e + 1..(e + 1 + margin).min(values.len());
    let n_outer = left.len() + right.len();
    if n_outer == 0 {
        return inner;
    }
    let outer: f64 = values[left].iter().chain(&values[right]).sum();
    inner - outer / n_outer as f64
}

/// Greedy per-category suppression; keeps the higher-scoring proposal of any
/// pair overlapping above `iou`. Output is ordered by score, then start.
pub fn nms(mut proposals: Vec<Proposal>, iou: f64) -> Vec<Proposal> {
    proposals.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)));
    let mut kept: Vec<Proposal> = Vec::new();
    for p in proposals {
        let clash = kept
            .iter()
            .any(|k| k.category == p.category && temporal_iou((k.start, k.end), (p.start, p.end)) > iou);
        if !clash {
            kept.push(p);
        }
    }
    kept
}

/// Candidate proposals before suppression.
///
/// Every category whose video score (background excluded) passes the
/// acceptance cut turns each maximal run of `att >= v` into a candidate,
/// scored by the outer-inner contrast of its suppressed-CAS row plus the
/// category's video score.
pub fn generate_proposals(
    att: &[f64],
    pbar: &Cas,
    video_scores: &[f64],
    thresholds: &[f64],
    cfg: &EvalConfig,
) -> Vec<Proposal> {
    let c = pbar.num_classes();
    let mut out = Vec::new();
    for k in (0..c).filter(|&k| video_scores[k] > cfg.accept_cut) {
        let row = pbar.matrix().row(k);
        for &v in thresholds {
            for (s, e) in runs_above(att, v) {
                out.push(Proposal {
                    start: s + 1,
                    end: e + 1,
                    category: k,
                    score: outer_inner_contrast(row, s, e, cfg.outer_ratio) + video_scores[k],
                });
            }
        }
    }
    out
}

/// Suppressed proposals of one video.
pub fn localize(inf: &Inference, cfg: &EvalConfig) -> Vec<Proposal> {
    let raw = generate_proposals(
        &inf.att_fused,
        &inf.cas_suppressed,
        &inf.video_scores,
        &cfg.att_thresholds(),
        cfg,
    );
    nms(raw, cfg.nms_iou)
}

/// All-points interpolated average precision of one category at one IoU.
///
/// `predictions` are `(video index, proposal)`; `ground_truth[v]` holds the
/// segments of video `v` of this category. Returns `None` with no ground truth.
pub fn average_precision(
    predictions: &[(usize, Proposal)],
    ground_truth: &[Vec<(usize, usize)>],
    iou: f64,
) -> Option<f64> {
    let total: usize = ground_truth.iter().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .1
            .score
            .total_cmp(&predictions[a].1.score)
            .then(a.cmp(&b))
    });
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        let (v, p) = predictions[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, &g) in ground_truth[v].iter().enumerate() {
            if used[v][j] {
                continue;
            }
            let o = temporal_iou((p.start, p.end), g);
            if o >= iou && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[v][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / total as f64);
    }
    // Precision envelope, then area under the step curve.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Per-category AP and mAP at each IoU threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    /// `ap[category][threshold]`; NaN for categories absent from the test set.
    pub ap: Vec<Vec<f64>>,
    pub map: Vec<f64>,
}

impl EvalReport {
    /// Mean of the per-threshold mAP values.
    pub fn average_map(&self) -> f64 {
        self.map.iter().sum::<f64>() / self.map.len() as f64
    }

    /// Mean mAP over the listed thresholds, which must be in the report.
    pub fn average_map_at(&self, thresholds: &[f64]) -> Result<f64> {
        let mut sum = 0.0;
        for &t in thresholds {
            let i = self
                .iou_thresholds
                .iter()
                .position(|&x| (x - t).abs() < 1e-9)
                .ok_or_else(|| Error::Domain(format!("IoU {t} was not evaluated")))?;
            sum += self.map[i];
        }
        Ok(sum / thresholds.len() as f64)
    }

    /// Rows are categories then `mAP`; columns are thresholds then `avg`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category");
        for t in &self.iou_thresholds {
            let _ = write!(out, ",{t:.1}");
        }
        out.push_str(",Avg\n");
        let mut row = |name: String, vals: &[f64]| {
            out.push_str(&name);
            for v in vals {
                let _ = write!(out, ",{v:.6}");
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let _ = writeln!(out, ",{mean:.6}");
        };
        for (c, aps) in self.ap.iter().enumerate() {
            row(format!("{c}"), aps);
        }
        row("mAP".into(), &self.map);
        out
    }
}

/// Runs inference on every video, fanning out over `cfg.threads` workers.
/// Output order follows `videos` regardless of the thread count.
pub fn infer_all(
    model: &Model,
    videos: &[&Video],
    settings: &ForwardSettings,
    threads: usize,
) -> Result<Vec<Inference>> {
    let chunk = videos.len().div_ceil(threads.max(1)).max(1);
    let results: Vec<Result<Vec<Inference>>> = thread::scope(|s| {
        let handles: Vec<_> = videos
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|v| model.infer(&v.rgb, &v.flow, settings))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("inference worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(videos.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Scores proposals against ground truth for every category and threshold.
pub fn score_proposals(
    proposals: &[Vec<Proposal>],
    ground_truth: &[&[Segment]],
    num_categories: usize,
    iou_thresholds: &[f64],
) -> EvalReport {
    let mut ap = vec![vec![f64::NAN; iou_thresholds.len()]; num_categories];
    for (c, row) in ap.iter_mut().enumerate() {
        let preds: Vec<(usize, Proposal)> = proposals
            .iter()
            .enumerate()
            .flat_map(|(v, ps)| ps.iter().filter(|p| p.category == c).map(move |&p| (v, p)))
            .collect();
        let gt: Vec<Vec<(usize, usize)>> = ground_truth
            .iter()
            .map(|segs| {
                segs.iter()
                    .filter(|s| s.category == c)
                    .map(|s| (s.start, s.end))
                    .collect()
            })
            .collect();
        for (k, &iou) in iou_thresholds.iter().enumerate() {
            if let Some(v) = average_precision(&preds, &gt, iou) {
                row[k] = v;
            }
        }
    }
    let map = (0..iou_thresholds.len())
        .map(|k| {
            let vals: Vec<f64> = ap.iter().map(|r| r[k]).filter(|v| !v.is_nan()).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    EvalReport {
        iou_thresholds: iou_thresholds.to_vec(),
        ap,
        map,
    }
}

/// Full evaluation of `model` on `videos`.
pub fn evaluate(model: &Model, videos: &[&Video], settings: &ForwardSettings, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let inferences = infer_all(model, videos, settings, cfg.threads)?;
    let proposals: Vec<Vec<Proposal>> = inferences.iter().map(|inf| localize(inf, cfg)).collect();
    let gt: Vec<&[Segment]> = videos.iter().map(|v| v.segments.as_slice()).collect();
    Ok(score_proposals(
        &proposals,
        &gt,
        model.config().num_classes,
        &cfg.iou_thresholds,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(start: usize, end: usize, score: f64) -> Proposal {
        Proposal {
            start,
            end,
            category: 0,
            score,
        }
    }

    #[test]
    fn iou_values() {
        assert_eq!(temporal_iou((0, 9), (5, 14)), 5.0 / 15.0);
        assert_eq!(temporal_iou((0, 4), (5, 9)), 0.0);
        assert_eq!(temporal_iou((3, 3), (3, 3)), 1.0);
    }

    #[test]
    fn ap_spot_values() {
        let gt = vec![vec![(0, 9)]];
        assert_eq!(average_precision(&[(0, prop(0, 9, 1.0))], &gt, 0.5), Some(1.0));
        assert_eq!(average_precision(&[], &gt, 0.5), Some(0.0));
        assert_eq!(average_precision(&[(0, prop(0, 9, 1.0))], &[vec![]], 0.5), None);
        // Duplicate detection: the second hit on the same segment is a false positive.
        let two = [(0, prop(0, 9, 0.9)), (0, prop(0, 8, 0.8))];
        assert_eq!(average_precision(&two, &gt, 0.5), Some(1.0));
        // False positive ranked first halves the precision at full recall.
        let fp_first = [(0, prop(30, 39, 0.9)), (0, prop(0, 9, 0.8))];
        assert_eq!(average_precision(&fp_first, &gt, 0.5), Some(0.5));
    }

    #[test]
    fn runs_and_contrast() {
        let v = [0.0, 0.9, 0.9, 0.1, 0.95, 0.95];
        assert_eq!(runs_above(&v, 0.5), vec![(1, 2), (4, 5)]);
        let oic = outer_inner_contrast(&v, 1, 2, 0.25);
        assert!((oic - (0.9 - 0.05)).abs() < 1e-12);
        assert_eq!(outer_inner_contrast(&v, 0, 5, 0.25), v.iter().sum::<f64>() / 6.0);
    }

    #[test]
    fn nms_keeps_best_of_overlaps() {
        let kept = nms(vec![prop(0, 9, 0.5), prop(0, 8, 0.9), prop(20, 29, 0.1)], 0.5);
        assert_eq!(kept, vec![prop(0, 8, 0.9), prop(20, 29, 0.1)]);
        let mut other = prop(0, 9, 0.5);
        other.category = 1;
        assert_eq!(nms(vec![prop(0, 9, 0.6), other], 0.5).len(), 2);
    }

    #[test]
    fn thresholds_are_interior() {
        let t = EvalConfig::default().att_thresholds();
        assert_eq!(t.len(), 10);
        assert!(t.iter().all(|&x| x > 0.1 && x < 0.9));
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport {
            iou_thresholds: vec![0.1, 0.5],
            ap: vec![vec![1.0, 0.5], vec![0.0, 0.5]],
            map: vec![0.5, 0.5],
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "category,0.1,0.5,Avg");
        assert_eq!(lines[1], "0,1.000000,0.500000,0.750000");
        assert_eq!(lines[3], "mAP,0.500000,0.500000,0.500000");
        assert_eq!(r.average_map_at(&[0.5]).unwrap(), 0.5);
        assert!(r.average_map_at(&[0.3]).is_err());
    }
}
