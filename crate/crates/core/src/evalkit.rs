//! Temporal-detection evaluation: tIoU, average precision, mAP over
//! threshold grids and sensitivity by coverage and instance count.
//!
//! Times are normalized to the video length, so an instance's coverage is
//! `end - start`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::featbank::write_file;
use crate::nn::{detection_sets, DetectionTransformer, Graph, Tensor};

/// Temporal intersection over union of `[s, e]` intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if !(a.1 > a.0) || !(b.1 > b.0) {
        return Err(Error::Domain(format!("zero-length or reversed interval in {a:?} / {b:?}")));
    }
    let inter = a.1.min(b.1) - a.0.max(b.0);
    if inter <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / (a.1.max(b.1) - a.0.min(b.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: usize,
    pub category: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: usize,
    pub category: usize,
    pub start: f64,
    pub end: f64,
}

impl GroundTruth {
    fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

fn overlap(p: &Prediction, g: &GroundTruth) -> f64 {
    // degenerate predictions match nothing
    tiou((p.start, p.end), g.interval()).unwrap_or(0.0)
}

/// Descending score; ties broken by earlier start, then input order.
fn ranked(preds: &[&Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then(preds[a].start.total_cmp(&preds[b].start))
            .then(a.cmp(&b))
    });
    order
}

/// AP of one category's predictions against its ground truth at `theta`:
/// the sum of precision at each newly recalled instance over `#GT`. `None`
/// without ground truth.
pub fn average_precision(preds: &[&Prediction], gts: &[&GroundTruth], theta: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut by_video: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id).or_default().push(i);
    }
    let mut used = vec![false; gts.len()];
    let (mut tp, mut seen, mut sum) = (0usize, 0usize, 0.0);
    for i in ranked(preds) {
        let p = preds[i];
        seen += 1;
        let mut candidates: Vec<(f64, usize)> = by_video
            .get(&p.video_id)
            .map(|v| v.iter().map(|&j| (overlap(p, gts[j]), j)).collect())
            .unwrap_or_default();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if let Some(&(_, j)) = candidates.iter().find(|&&(o, j)| o >= theta && !used[j]) {
            used[j] = true;
            tp += 1;
            sum += tp as f64 / seen as f64;
        }
    }
    Some(sum / gts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSet {
    /// 0.3, 0.4, ..., 0.7.
    ThumosStyle,
    /// 0.5, 0.55, ..., 0.95.
    AnetStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub threshold_set: ThresholdSet,
    /// Thresholds printed individually; all thresholds enter the average.
    pub report_points: Vec<f64>,
}

impl EvalProtocol {
    pub fn thumos() -> Self {
        Self {
            threshold_set: ThresholdSet::ThumosStyle,
            report_points: vec![0.3, 0.4, 0.5, 0.6, 0.7],
        }
    }

    pub fn anet() -> Self {
        Self {
            threshold_set: ThresholdSet::AnetStyle,
            report_points: vec![0.5, 0.75, 0.95],
        }
    }

    pub fn of(set: ThresholdSet) -> Self {
        match set {
            ThresholdSet::ThumosStyle => Self::thumos(),
            ThresholdSet::AnetStyle => Self::anet(),
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        match self.threshold_set {
            ThresholdSet::ThumosStyle => (3..=7).map(|i| i as f64 / 10.0).collect(),
            ThresholdSet::AnetStyle => (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapTable {
    /// `(θ, mAP)` over the full threshold set.
    pub per_threshold: Vec<(f64, f64)>,
    pub average: f64,
}

impl MapTable {
    pub fn at(&self, theta: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|(t, _)| (t - theta).abs() < 1e-9)
            .map(|p| p.1)
    }
}

/// mAP at one threshold: mean AP over categories that have ground truth.
/// `None` without ground truth.
pub fn map_at(preds: &[&Prediction], gts: &[&GroundTruth], theta: f64) -> Option<f64> {
    let cats: BTreeSet<usize> = gts.iter().map(|g| g.category).collect();
    if cats.is_empty() {
        return None;
    }
    let aps: Vec<f64> = cats
        .iter()
        .map(|&c| {
            let p: Vec<&Prediction> = preds.iter().copied().filter(|p| p.category == c).collect();
            let g: Vec<&GroundTruth> = gts.iter().copied().filter(|g| g.category == c).collect();
            average_precision(&p, &g, theta).expect("category has ground truth")
        })
        .collect();
    Some(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn map_table(preds: &[&Prediction], gts: &[&GroundTruth], protocol: &EvalProtocol) -> Option<MapTable> {
    let per_threshold: Vec<(f64, f64)> = protocol
        .thresholds()
        .into_iter()
        .map(|t| map_at(preds, gts, t).map(|m| (t, m)))
        .collect::<Option<_>>()?;
    let average = per_threshold.iter().map(|p| p.1).sum::<f64>() / per_threshold.len() as f64;
    Some(MapTable { per_threshold, average })
}

/// mAP at every threshold of the protocol and their mean.
pub fn map_over_thresholds(preds: &[Prediction], gts: &[GroundTruth], protocol: &EvalProtocol) -> Result<MapTable> {
    let p: Vec<&Prediction> = preds.iter().collect();
    let g: Vec<&GroundTruth> = gts.iter().collect();
    map_table(&p, &g, protocol).ok_or_else(|| Error::Domain("no ground truth to evaluate".into()))
}

pub const COVERAGE_BUCKETS: [&str; 5] = ["XS", "S", "M", "L", "XL"];
pub const COUNT_BUCKETS: [&str; 4] = ["XS", "S", "M", "L"];

/// Coverage quintile: XS (0, 0.2], S (0.2, 0.4], ..., XL (0.8, 1].
pub fn coverage_bucket(coverage: f64) -> usize {
    ((coverage * 5.0 - 1e-12).ceil().clamp(1.0, 5.0) as usize) - 1
}

/// XS = 1, S = 2-4, M = 5-8, L >= 9 instances per video.
pub fn count_bucket(count: usize) -> usize {
    match count {
        0 | 1 => 0,
        2..=4 => 1,
        5..=8 => 2,
        _ => 3,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketResult {
    pub axis: String,
    pub bucket: String,
    pub num_gt: usize,
    /// Average mAP over the protocol thresholds; absent for empty buckets.
    pub average_map: Option<f64>,
}

/// Per-bucket average mAP along the coverage and instance-count axes.
///
/// Coverage: ground truth is restricted to the bucket; a prediction is kept
/// when its best-overlapping same-category instance is in the bucket, or
/// when it overlaps no instance at all. Instance count: whole videos are
/// kept or dropped with their predictions.
pub fn detad_sensitivity(preds: &[Prediction], gts: &[GroundTruth], protocol: &EvalProtocol) -> Vec<BucketResult> {
    let mut out = Vec::new();
    let gt_bucket: Vec<usize> = gts.iter().map(|g| coverage_bucket(g.end - g.start)).collect();
    let pred_bucket: Vec<Option<usize>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .enumerate()
                .filter(|(_, g)| g.video_id == p.video_id && g.category == p.category)
                .map(|(j, g)| (overlap(p, g), j))
                .filter(|&(o, _)| o > 0.0)
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                .map(|(_, j)| gt_bucket[j])
        })
        .collect();
    for (b, name) in COVERAGE_BUCKETS.iter().enumerate() {
        let g: Vec<&GroundTruth> = gts.iter().zip(&gt_bucket).filter(|(_, &k)| k == b).map(|(g, _)| g).collect();
        let p: Vec<&Prediction> = preds
            .iter()
            .zip(&pred_bucket)
            .filter(|(_, k)| k.is_none_or(|k| k == b))
            .map(|(p, _)| p)
            .collect();
        out.push(BucketResult {
            axis: "coverage".into(),
            bucket: (*name).into(),
            num_gt: g.len(),
            average_map: map_table(&p, &g, protocol).map(|t| t.average),
        });
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gts {
        *counts.entry(g.video_id).or_default() += 1;
    }
    for (b, name) in COUNT_BUCKETS.iter().enumerate() {
        let videos: BTreeSet<usize> = counts.iter().filter(|(_, &c)| count_bucket(c) == b).map(|(&v, _)| v).collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| videos.contains(&g.video_id)).collect();
        let p: Vec<&Prediction> = preds.iter().filter(|p| videos.contains(&p.video_id)).collect();
        out.push(BucketResult {
            axis: "instances".into(),
            bucket: (*name).into(),
            num_gt: g.len(),
            average_map: map_table(&p, &g, protocol).map(|t| t.average),
        });
    }
    out
}

/// Ground truth of a downstream dataset, classes relative to its offset.
pub fn dataset_ground_truth(ds: &Dataset) -> Vec<GroundTruth> {
    ds.samples
        .iter()
        .enumerate()
        .flat_map(|(v, s)| {
            s.instances.iter().map(move |i| {
                let (start, end) = i.normalized(s.len());
                GroundTruth {
                    video_id: v,
                    category: ds.class_of(i.category),
                    start,
                    end,
                }
            })
        })
        .collect()
}

/// Scores every (query, class) pair of every video and keeps the `top_k`
/// highest per video.
pub fn predict_dataset(model: &DetectionTransformer, ds: &Dataset, batch_size: usize, top_k: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let seqs: Vec<Tensor> = chunk
            .iter()
            .map(|&i| {
                let s = &ds.samples[i];
                Tensor::matrix(s.len(), s.dim, s.features.iter().map(|&x| f64::from(x)).collect())
            })
            .collect();
        let refs: Vec<&Tensor> = seqs.iter().collect();
        let mut g = Graph::new();
        let fo = model.forward(&mut g, &refs, None)?;
        let sets = detection_sets(g.value(fo.logits), g.value(fo.boxes), chunk.len());
        for (&v, set) in chunk.iter().zip(sets) {
            let mut video: Vec<Prediction> = Vec::new();
            for q in &set.queries {
                let (start, end) = q.interval();
                for (c, &score) in q.probs[..q.probs.len() - 1].iter().enumerate() {
                    video.push(Prediction {
                        video_id: v,
                        category: c,
                        start,
                        end,
                        score,
                    });
                }
            }
            video.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.total_cmp(&b.start)));
            video.truncate(top_k);
            out.extend(video);
        }
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).expect("record serializes"));
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| {
                Error::format(path, offset + e.column().saturating_sub(1) as u64, e.to_string())
            })?);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    write_jsonl(path, preds)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_jsonl(path)
}

pub fn write_ground_truth(path: &Path, gts: &[GroundTruth]) -> Result<()> {
    write_jsonl(path, gts)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    read_jsonl(path)
}

/// mAP table and sensitivity buckets of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub map: MapTable,
    pub sensitivity: Vec<BucketResult>,
}

impl EvalReport {
    pub fn compute(preds: &[Prediction], gts: &[GroundTruth], protocol: &EvalProtocol) -> Result<Self> {
        Ok(Self {
            protocol: protocol.clone(),
            map: map_over_thresholds(preds, gts, protocol)?,
            sensitivity: detad_sensitivity(preds, gts, protocol),
        })
    }

    /// Rows `kind,key,value`: report points, the average, then buckets.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,key,value\n");
        for &t in &self.protocol.report_points {
            if let Some(m) = self.map.at(t) {
                s.push_str(&format!("map,{t:.2},{m:.6}\n"));
            }
        }
        s.push_str(&format!("map,avg,{:.6}\n", self.map.average));
        for b in &self.sensitivity {
            let v = b.average_map.map_or(String::new(), |m| format!("{m:.6}"));
            s.push_str(&format!("{},{},{v}\n", b.axis, b.bucket));
        }
        s
    }

    /// Writes `eval.csv` and `eval.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("eval.csv"), self.to_csv().as_bytes())?;
        let json = serde_json::to_vec_pretty(self).expect("report serializes");
        write_file(&dir.join("eval.json"), &json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(v: usize, c: usize, s: f64, e: f64) -> GroundTruth {
        GroundTruth { video_id: v, category: c, start: s, end: e }
    }

    fn pr(v: usize, c: usize, s: f64, e: f64, score: f64) -> Prediction {
        Prediction { video_id: v, category: c, start: s, end: e, score }
    }

    #[test]
    fn tiou_cases() {
        assert_eq!(tiou((0.1, 0.4), (0.1, 0.4)).unwrap(), 1.0);
        assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert_eq!(tiou((0.0, 1.0), (1.0, 2.0)).unwrap(), 0.0);
        assert!((tiou((0.0, 2.0), (1.0, 3.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(tiou((0.5, 0.5), (0.0, 1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn ap_cases() {
        let g = [gt(0, 0, 0.1, 0.3)];
        let gr: Vec<&GroundTruth> = g.iter().collect();
        let p = [pr(0, 0, 0.1, 0.3, 0.9)];
        assert_eq!(average_precision(&p.iter().collect::<Vec<_>>(), &gr, 0.5), Some(1.0));
        assert_eq!(average_precision(&[], &gr, 0.5), Some(0.0));
        assert_eq!(average_precision(&p.iter().collect::<Vec<_>>(), &[], 0.5), None);
        let g2 = [gt(0, 0, 0.0, 0.2), gt(0, 0, 0.5, 0.7)];
        let p2 = [pr(0, 0, 0.0, 0.2, 0.9), pr(0, 0, 0.8, 0.95, 0.8), pr(0, 0, 0.5, 0.7, 0.7)];
        let ap = average_precision(&p2.iter().collect::<Vec<_>>(), &g2.iter().collect::<Vec<_>>(), 0.5).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detections_count_once() {
        let g = [gt(0, 0, 0.1, 0.3)];
        let p = [pr(0, 0, 0.1, 0.3, 0.9), pr(0, 0, 0.1, 0.3, 0.8)];
        let ap = average_precision(&p.iter().collect::<Vec<_>>(), &g.iter().collect::<Vec<_>>(), 0.5).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn anet_average_counts_thresholds() {
        // tIoU exactly 0.7 between prediction and ground truth
        let g = [gt(0, 0, 0.0, 0.7)];
        let p = [pr(0, 0, 0.0, 1.0, 1.0)];
        let t = map_over_thresholds(&p, &g, &EvalProtocol::anet()).unwrap();
        assert!((t.average - 0.5).abs() < 1e-12, "{t:?}");
    }

    #[test]
    fn buckets() {
        assert_eq!(coverage_bucket(0.2), 0);
        assert_eq!(coverage_bucket(0.21), 1);
        assert_eq!(coverage_bucket(1.0), 4);
        assert_eq!(coverage_bucket(0.0001), 0);
        assert_eq!(count_bucket(1), 0);
        assert_eq!(count_bucket(3), 1);
        assert_eq!(count_bucket(8), 2);
        assert_eq!(count_bucket(9), 3);
    }

    #[test]
    fn single_bucket_equals_global() {
        let g = [gt(0, 0, 0.1, 0.2), gt(1, 1, 0.5, 0.6)];
        let p = [pr(0, 0, 0.1, 0.2, 0.9), pr(1, 1, 0.52, 0.6, 0.5), pr(1, 0, 0.0, 0.1, 0.7)];
        let proto = EvalProtocol::thumos();
        let global = map_over_thresholds(&p, &g, &proto).unwrap().average;
        let rep = detad_sensitivity(&p, &g, &proto);
        let cov: Vec<_> = rep.iter().filter(|b| b.axis == "coverage").collect();
        assert_eq!(cov[0].average_map, Some(global));
        assert!(cov[1..].iter().all(|b| b.average_map.is_none()));
    }
}
