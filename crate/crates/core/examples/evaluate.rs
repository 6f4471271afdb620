//! Scores a toy set of detections: tIoU, per-threshold mAP under both
//! threshold grids, and the coverage / instance-count breakdown.

use ltp::evalkit::{detad_sensitivity, map_over_thresholds, tiou, EvalProtocol, GroundTruth, Prediction};

fn main() -> ltp::Result<()> {
    let gt = |video_id, category, start, end| GroundTruth { video_id, category, start, end };
    let pr = |video_id, category, start, end, score| Prediction { video_id, category, start, end, score };
    let gts = vec![
        gt(0, 0, 0.05, 0.20),
        gt(0, 0, 0.50, 0.70),
        gt(1, 1, 0.10, 0.90),
        gt(2, 0, 0.30, 0.35),
        gt(2, 1, 0.60, 0.80),
    ];
    let preds = vec![
        pr(0, 0, 0.06, 0.21, 0.95),
        pr(0, 0, 0.45, 0.72, 0.80),
        pr(0, 1, 0.50, 0.70, 0.40),
        pr(1, 1, 0.15, 0.85, 0.90),
        pr(2, 0, 0.20, 0.40, 0.60),
        pr(2, 1, 0.62, 0.78, 0.70),
        pr(2, 1, 0.00, 0.10, 0.30),
    ];
    println!("tIoU of the first pair: {:.3}", tiou((0.06, 0.21), (0.05, 0.20))?);
    for proto in [EvalProtocol::thumos(), EvalProtocol::anet()] {
        let t = map_over_thresholds(&preds, &gts, &proto)?;
        let cells: Vec<String> = t.per_threshold.iter().map(|(th, m)| format!("{th:.2}:{:.1}", 100.0 * m)).collect();
        println!("{:?}: {}  avg {:.2}", proto.threshold_set, cells.join(" "), 100.0 * t.average);
    }
    for b in detad_sensitivity(&preds, &gts, &EvalProtocol::anet()) {
        let m = b.average_map.map_or("-".to_string(), |m| format!("{:.2}", 100.0 * m));
        println!("{:>9} {:>2}: {} ground truth, avg mAP {m}", b.axis, b.bucket, b.num_gt);
    }
    Ok(())
}
