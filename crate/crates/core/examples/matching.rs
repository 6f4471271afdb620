//! Matches a handful of query predictions to ground-truth instances and
//! prints the cost matrix, the optimal assignment and the set loss.

use ltp::matching::{cost_matrix, detr_loss, hungarian, MatchCostConfig, Target};
use ltp::nn::QueryPrediction;

fn main() -> ltp::Result<()> {
    let cfg = MatchCostConfig::default();
    let gts = vec![
        Target { class: 0, center: 0.20, width: 0.10 },
        Target { class: 1, center: 0.55, width: 0.30 },
        Target { class: 0, center: 0.85, width: 0.08 },
    ];
    let q = |p0: f64, p1: f64, center: f64, width: f64| QueryPrediction {
        probs: vec![p0, p1, 1.0 - p0 - p1],
        center,
        width,
    };
    let preds = vec![
        q(0.1, 0.6, 0.50, 0.25),
        q(0.7, 0.1, 0.22, 0.12),
        q(0.1, 0.1, 0.40, 0.50),
        q(0.5, 0.2, 0.80, 0.10),
        q(0.3, 0.3, 0.10, 0.05),
    ];
    let cost = cost_matrix(&gts, &preds, &cfg);
    println!("cost (rows: ground truth, columns: queries)");
    for row in &cost {
        println!("  {}", row.iter().map(|c| format!("{c:7.3}")).collect::<Vec<_>>().join(" "));
    }
    let a = hungarian(&cost)?;
    for (i, &j) in a.pred_for_gt.iter().enumerate() {
        println!("gt {i} -> query {j}");
    }
    println!("total cost {:.4}", a.total(&cost));
    println!("set loss {:.4}", detr_loss(&gts, &preds, &a, &cfg));
    Ok(())
}
