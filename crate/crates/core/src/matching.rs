//! Bipartite matching of ground truth to prediction slots and the set loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, Graph, QueryPrediction, Tensor, Var};
use crate::synthesis::ActionInstance;

/// Weights of the matching cost; the loss reuses the two regression weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchCostConfig {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
}

impl Default for MatchCostConfig {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            iou: 2.0,
        }
    }
}

impl MatchCostConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.cls, self.l1, self.iou];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config(format!("match weights {w:?} must be nonnegative and not all zero")));
        }
        Ok(())
    }
}

/// A ground-truth instance in normalized `(center, width)` form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class: usize,
    pub center: f64,
    pub width: f64,
}

impl Target {
    pub fn from_interval(class: usize, start: f64, end: f64) -> Self {
        Self {
            class,
            center: (start + end) / 2.0,
            width: end - start,
        }
    }

    pub fn from_instance(class: usize, inst: &ActionInstance, len: usize) -> Self {
        let (s, e) = inst.normalized(len);
        Self::from_interval(class, s, e)
    }
}

/// Class-agnostic targets: every instance becomes foreground class 0.
pub fn binary_relabel(instances: &[ActionInstance], len: usize) -> Vec<Target> {
    instances
        .iter()
        .map(|i| Target::from_instance(0, i, len))
        .collect()
}

/// Temporal IoU of two `(center, width)` intervals; 0 without overlap.
pub fn cw_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (s1, e1) = (a.0 - a.1 / 2.0, a.0 + a.1 / 2.0);
    let (s2, e2) = (b.0 - b.1 / 2.0, b.0 + b.1 / 2.0);
    let inter = e1.min(e2) - s1.max(s2);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (e1.max(e2) - s1.min(s2))
}

/// `λ_L1 ‖t − t̂‖₁ + λ_iou (1 − tIoU)` over `(center, width)` pairs.
pub fn reg_loss(t: (f64, f64), t_hat: (f64, f64), cfg: &MatchCostConfig) -> f64 {
    let l1 = (t.0 - t_hat.0).abs() + (t.1 - t_hat.1).abs();
    cfg.l1 * l1 + cfg.iou * (1.0 - cw_iou(t, t_hat))
}

pub fn match_cost(gt: &Target, pred: &QueryPrediction, cfg: &MatchCostConfig) -> f64 {
    -cfg.cls * pred.probs[gt.class] + reg_loss((gt.center, gt.width), (pred.center, pred.width), cfg)
}

/// `gts x preds` matching costs.
pub fn cost_matrix(gts: &[Target], preds: &[QueryPrediction], cfg: &MatchCostConfig) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| preds.iter().map(|p| match_cost(g, p, cfg)).collect())
        .collect()
}

/// Injective map from ground-truth rows to prediction columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub pred_for_gt: Vec<usize>,
}

impl Assignment {
    pub fn total(&self, cost: &[Vec<f64>]) -> f64 {
        self.pred_for_gt
            .iter()
            .enumerate()
            .map(|(i, &j)| cost[i][j])
            .sum()
    }
}

/// Shortest augmenting path with potentials over the rows and columns
/// selected by `rows`/`cols`; returns a column position per row position.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

fn optimum(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    solve(cost, rows, cols)
        .iter()
        .zip(rows)
        .map(|(&j, &i)| cost[i][cols[j]])
        .sum()
}

/// Minimum-cost assignment of `n` rows to `m >= n` columns. Among optimal
/// assignments the lexicographically smallest column vector is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::Shape(format!("{n} ground truths but only {m} predictions")));
    }
    if cost.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Domain("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Assignment { pred_for_gt: Vec::new() });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = optimum(cost, &all_rows, &all_cols);
    let scale = cost.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-10 * (1.0 + scale * n as f64);
    // fix rows in order to the smallest column that still admits the optimum
    let mut used = vec![false; m];
    let mut prefix = 0.0;
    let mut pred_for_gt = Vec::with_capacity(n);
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for j in 0..m {
            if used[j] {
                continue;
            }
            let cols: Vec<usize> = (0..m).filter(|&c| !used[c] && c != j).collect();
            let total = prefix + cost[i][j] + optimum(cost, &rest, &cols);
            if total <= best + tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("some column attains the optimum");
        used[j] = true;
        prefix += cost[i][j];
        pred_for_gt.push(j);
    }
    Ok(Assignment { pred_for_gt })
}

/// Value of the set loss for one item from probabilities, with a 1e-12 floor
/// inside the logarithms.
pub fn detr_loss(gts: &[Target], preds: &[QueryPrediction], assignment: &Assignment, cfg: &MatchCostConfig) -> f64 {
    let nll = |p: f64| -p.max(1e-12).ln();
    let mut matched = vec![None; preds.len()];
    for (i, &j) in assignment.pred_for_gt.iter().enumerate() {
        matched[j] = Some(i);
    }
    let mut total = 0.0;
    for (j, pred) in preds.iter().enumerate() {
        match matched[j] {
            Some(i) => {
                let g = &gts[i];
                total += nll(pred.probs[g.class]);
                total += reg_loss((g.center, g.width), (pred.center, pred.width), cfg);
            }
            None => total += nll(pred.background_prob()),
        }
    }
    total
}

/// Gradient of `λ_L1 ‖t − t̂‖₁ + λ_iou (1 − tIoU)` with respect to `t̂`.
fn reg_grad(t: (f64, f64), t_hat: (f64, f64), cfg: &MatchCostConfig) -> [f64; 2] {
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let mut g = [cfg.l1 * sign(t_hat.0 - t.0), cfg.l1 * sign(t_hat.1 - t.1)];
    let (s, e) = (t_hat.0 - t_hat.1 / 2.0, t_hat.0 + t_hat.1 / 2.0);
    let (gs, ge) = (t.0 - t.1 / 2.0, t.0 + t.1 / 2.0);
    let inter = e.min(ge) - s.max(gs);
    if inter > 0.0 {
        let union = t_hat.1 + t.1 - inter;
        let di_ds = if s > gs { -1.0 } else { 0.0 };
        let di_de = if e < ge { 1.0 } else { 0.0 };
        // union = (e - s) + w* - inter
        let du_ds = -1.0 - di_ds;
        let du_de = 1.0 - di_de;
        let diou_ds = (di_ds * union - inter * du_ds) / (union * union);
        let diou_de = (di_de * union - inter * du_de) / (union * union);
        let dc = diou_ds + diou_de;
        let dw = 0.5 * (diou_de - diou_ds);
        g[0] -= cfg.iou * dc;
        g[1] -= cfg.iou * dw;
    }
    g
}

/// Predictions of item `b` from raw logits and boxes.
fn item_predictions(logits: &Tensor, boxes: &Tensor, b: usize, m: usize) -> Vec<QueryPrediction> {
    (0..m)
        .map(|j| {
            let r = b * m + j;
            let mut probs = logits.row(r).to_vec();
            softmax_in_place(&mut probs);
            QueryPrediction {
                probs,
                center: boxes.get(r, 0),
                width: boxes.get(r, 1),
            }
        })
        .collect()
}

/// Hungarian assignments for every item given the current outputs.
pub fn match_batch(
    logits: &Tensor,
    boxes: &Tensor,
    targets: &[Vec<Target>],
    cfg: &MatchCostConfig,
) -> Result<Vec<Assignment>> {
    let batch = targets.len();
    if batch == 0 || logits.rows() % batch != 0 {
        return Err(Error::Shape(format!("{} rows do not split into {batch} items", logits.rows())));
    }
    let m = logits.rows() / batch;
    targets
        .iter()
        .enumerate()
        .map(|(b, gts)| {
            let preds = item_predictions(logits, boxes, b, m);
            hungarian(&cost_matrix(gts, &preds, cfg))
        })
        .collect()
}

/// Set loss averaged over the batch as one graph node, for fixed
/// assignments. Classification terms use log-softmax of the logits.
pub fn set_loss_with(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    targets: &[Vec<Target>],
    assignments: &[Assignment],
    cfg: &MatchCostConfig,
) -> Result<Var> {
    let (lv, bv) = (g.value(logits), g.value(boxes));
    let batch = targets.len();
    if batch == 0 || assignments.len() != batch || lv.rows() % batch != 0 || bv.rows() != lv.rows() || bv.cols() != 2 {
        return Err(Error::Shape("set loss: logits, boxes, targets and assignments disagree".into()));
    }
    let (m, c) = (lv.rows() / batch, lv.cols());
    let bg = c - 1;
    let mut dl = vec![0.0; lv.len()];
    let mut db = vec![0.0; bv.len()];
    let mut total = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (b, (gts, asg)) in targets.iter().zip(assignments).enumerate() {
        if asg.pred_for_gt.len() != gts.len() {
            return Err(Error::Shape("assignment does not cover the targets".into()));
        }
        let mut class_of = vec![bg; m];
        let mut gt_of = vec![None; m];
        for (i, &j) in asg.pred_for_gt.iter().enumerate() {
            if j >= m || gts[i].class >= bg {
                return Err(Error::Shape("assignment or class index out of range".into()));
            }
            class_of[j] = gts[i].class;
            gt_of[j] = Some(i);
        }
        for j in 0..m {
            let r = b * m + j;
            let mut p = lv.row(r).to_vec();
            softmax_in_place(&mut p);
            let t = class_of[j];
            let max = lv.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lv.row(r).iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - lv.get(r, t);
            for (k, pk) in p.iter().enumerate() {
                dl[r * c + k] = (pk - if k == t { 1.0 } else { 0.0 }) * inv_b;
            }
            if let Some(i) = gt_of[j] {
                let gt = (gts[i].center, gts[i].width);
                let pred = (bv.get(r, 0), bv.get(r, 1));
                total += reg_loss(gt, pred, cfg);
                let gr = reg_grad(gt, pred, cfg);
                db[r * 2] = gr[0] * inv_b;
                db[r * 2 + 1] = gr[1] * inv_b;
            }
        }
    }
    let gl = Tensor::new(lv.shape().to_vec(), dl)?;
    let gb = Tensor::new(bv.shape().to_vec(), db)?;
    g.fused_scalar(vec![logits, boxes], total * inv_b, vec![gl, gb])
}

/// Matches with the current outputs, then builds the set loss.
pub fn set_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    targets: &[Vec<Target>],
    cfg: &MatchCostConfig,
) -> Result<(Var, Vec<Assignment>)> {
    let assignments = match_batch(g.value(logits), g.value(boxes), targets, cfg)?;
    let loss = set_loss_with(g, logits, boxes, targets, &assignments, cfg)?;
    Ok((loss, assignments))
}
