//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use ltp::featbank::{generate_bank, BankConfig, FeatureBank};
use ltp::synthesis::{SynthesisParams, SynthesizedSample};

pub mod grad;

/// Minimum total cost over all injections of rows into columns, by
/// exhaustive search. Returns the cost and the lexicographically smallest
/// optimal assignment found within `tol`.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    let mut best = (f64::INFINITY, Vec::new());
    let mut cur = Vec::with_capacity(n);
    let mut used = vec![false; m];
    fn rec(
        cost: &[Vec<f64>],
        cur: &mut Vec<usize>,
        used: &mut [bool],
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        let i = cur.len();
        if i == cost.len() {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(cost, cur, used, acc + cost[i][j], best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    rec(cost, &mut cur, &mut used, 0.0, &mut best);
    if n == 0 {
        return (0.0, Vec::new());
    }
    best
}

/// All injections with total within `tol` of `opt`, in lexicographic order.
pub fn optimal_assignments(cost: &[Vec<f64>], opt: f64, tol: f64) -> Vec<Vec<usize>> {
    let m = cost.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut used = vec![false; m];
    fn rec(cost: &[Vec<f64>], cur: &mut Vec<usize>, used: &mut [bool], acc: f64, opt: f64, tol: f64, out: &mut Vec<Vec<usize>>) {
        if cur.len() == cost.len() {
            if (acc - opt).abs() <= tol {
                out.push(cur.clone());
            }
            return;
        }
        let i = cur.len();
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(cost, cur, used, acc + cost[i][j], opt, tol, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    rec(cost, &mut cur, &mut used, 0.0, opt, tol, &mut out);
    out
}

/// `sqrt(max column abs-sum · max row abs-sum)` over a row-major matrix.
pub fn composite_norm_ref(rows: &[Vec<f64>]) -> f64 {
    let c = rows.first().map_or(0, Vec::len);
    let row_max = rows
        .iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let col_max = (0..c)
        .map(|j| rows.iter().map(|r| r[j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    (row_max * col_max).sqrt()
}

/// Smallest residual `‖A − 1aᵀ‖` over a grid of step `step` on `[0, 1]^m`.
pub fn grid_rank1_oracle(rows: &[Vec<f64>], step: f64) -> (f64, Vec<f64>) {
    let m = rows[0].len();
    assert!(m <= 3, "grid oracle is exhaustive only for m <= 3");
    let n = rows.len();
    let k = (1.0 / step).round() as usize + 1;
    // |A_ij - g| for every grid value g, so the sweep is table lookups
    let dev: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|j| (0..k).map(|g| (0..n).map(|i| (rows[i][j] - g as f64 * step).abs()).collect()).collect())
        .collect();
    let mut best = (f64::INFINITY, [0usize; 3]);
    let mut idx = [0usize; 3];
    let mut row = vec![0.0; n];
    let total = k.pow(m as u32);
    for flat in 0..total {
        let mut f = flat;
        for p in idx.iter_mut().take(m) {
            *p = f % k;
            f /= k;
        }
        row.iter_mut().for_each(|r| *r = 0.0);
        let mut col_max = 0.0f64;
        for j in 0..m {
            let d = &dev[j][idx[j]];
            col_max = col_max.max(d.iter().sum());
            for (r, x) in row.iter_mut().zip(d) {
                *r += x;
            }
        }
        let row_max = row.iter().copied().fold(0.0, f64::max);
        let v = (col_max * row_max).sqrt();
        if v < best.0 {
            best = (v, idx);
        }
    }
    (best.0, best.1[..m].iter().map(|&i| i as f64 * step).collect())
}

/// Union of half-open spans as a boolean timeline, then read back as runs;
/// `touching` also joins runs separated by no gap (they already touch).
pub fn timeline_union(spans: &[(usize, usize)], len: usize) -> Vec<(usize, usize)> {
    let mut on = vec![false; len];
    for &(s, e) in spans {
        for x in &mut on[s..e] {
            *x = true;
        }
    }
    let mut out = Vec::new();
    let mut t = 0;
    while t < len {
        if on[t] {
            let s = t;
            while t < len && on[t] {
                t += 1;
            }
            out.push((s, t));
        } else {
            t += 1;
        }
    }
    out
}

/// tIoU by counting grid cells of width `1/res` (intervals must lie on it).
pub fn tiou_grid(a: (f64, f64), b: (f64, f64), res: usize) -> f64 {
    let cell = |x: f64| (x * res as f64).round() as i64;
    let (a0, a1, b0, b1) = (cell(a.0), cell(a.1), cell(b.0), cell(b.1));
    let mut inter = 0;
    let mut union = 0;
    for t in a0.min(b0)..a1.max(b1) {
        let ia = t >= a0 && t < a1;
        let ib = t >= b0 && t < b1;
        inter += (ia && ib) as i64;
        union += (ia || ib) as i64;
    }
    inter as f64 / union as f64
}

/// Small bank used across integration tests.
pub fn small_bank(seed: u64, noise: f64) -> FeatureBank {
    generate_bank(&BankConfig {
        num_categories: 6,
        feature_dim: 16,
        clips_per_category: 8,
        clip_len_range: [8, 16],
        prototype_noise: noise,
        drift_amplitude: 0.2,
        seed,
    })
    .expect("valid bank config")
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Category whose prototype has the highest cosine with `row`.
pub fn nearest_prototype(bank: &FeatureBank, row: &[f32]) -> usize {
    (0..bank.num_categories())
        .max_by(|&a, &b| cosine(row, bank.prototype(a)).total_cmp(&cosine(row, bank.prototype(b))))
        .expect("bank has categories")
}

/// Checks a sample against a timeline built from its labels alone.
pub fn audit_sample(s: &SynthesizedSample, p: &SynthesisParams) -> Result<(), String> {
    let l = p.target_len;
    let n = s.instances.len();
    if n == 0 || n > p.n_max {
        return Err(format!("{n} instances"));
    }
    let spans: Vec<(usize, usize)> = s.instances.iter().map(|i| (i.start, i.end)).collect();
    if spans.iter().any(|&(a, b)| a >= b || b > l) {
        return Err("instance out of bounds".into());
    }
    // the labels must already be the maximal runs of their union
    if timeline_union(&spans, l) != spans {
        return Err(format!("instances are not disjoint maximal runs: {spans:?}"));
    }
    let mut by_start = s.instances.clone();
    by_start.sort_by_key(|i| i.start);
    if by_start.iter().enumerate().any(|(k, i)| i.ordinal != k + 1) {
        return Err("ordinals are not 1..n by start".into());
    }
    if s.instances.iter().any(|i| i.r != (i.end - i.start) as f64 / l as f64) {
        return Err("r mismatch".into());
    }
    let mut owner = vec![0u32; l];
    for &(a, b) in &spans {
        owner[a..b].iter_mut().for_each(|o| *o += 1);
    }
    for b in &s.background_spans {
        if b.category == s.target_category || b.start >= b.end || b.end > l {
            return Err("bad background span".into());
        }
        owner[b.start..b.end].iter_mut().for_each(|o| *o += 1);
    }
    if owner.iter().any(|&o| o != 1) {
        return Err("instances and background do not partition the timeline".into());
    }
    Ok(())
}
