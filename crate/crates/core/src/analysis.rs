//! Attention-collapse measurement: distance of each attention map to its
//! nearest rank-1 matrix `1·aᵀ`, aggregated per layer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::featbank::write_file;
use crate::nn::{AttnTag, DetectionTransformer, Graph, Tensor};

/// `sqrt(‖M‖₁·‖M‖∞)`: max absolute column sum times max absolute row sum.
pub fn composite_norm(m: &Tensor) -> f64 {
    let (r, c) = (m.rows(), m.cols());
    let mut col = vec![0.0f64; c];
    let mut row_max = 0.0f64;
    for i in 0..r {
        let row = m.row(i);
        let mut s = 0.0;
        for (j, &x) in row.iter().enumerate() {
            s += x.abs();
            col[j] += x.abs();
        }
        row_max = row_max.max(s);
    }
    let col_max = col.into_iter().fold(0.0, f64::max);
    (col_max * row_max).sqrt()
}

/// Composite norm of `A − 1·aᵀ`.
pub fn rank1_residual(a_mat: &Tensor, a: &[f64]) -> f64 {
    let mut r = a_mat.clone();
    let c = r.cols();
    for (k, x) in r.data_mut().iter_mut().enumerate() {
        *x -= a[k % c];
    }
    composite_norm(&r)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Best of the candidates {each row, column median, column mean} under
/// [`rank1_residual`] (earlier candidates win ties), then polished by a
/// pattern search that only accepts strict improvements.
pub fn rank1_fit(a_mat: &Tensor) -> Vec<f64> {
    let (r, c) = (a_mat.rows(), a_mat.cols());
    if r == 0 {
        return vec![0.0; c];
    }
    let mut candidates: Vec<Vec<f64>> = (0..r).map(|i| a_mat.row(i).to_vec()).collect();
    candidates.push(
        (0..c)
            .map(|j| median(&mut (0..r).map(|i| a_mat.get(i, j)).collect::<Vec<_>>()))
            .collect(),
    );
    candidates.push((0..c).map(|j| (0..r).map(|i| a_mat.get(i, j)).sum::<f64>() / r as f64).collect());
    let mut best = 0;
    let mut best_res = f64::INFINITY;
    for (k, cand) in candidates.iter().enumerate() {
        let res = rank1_residual(a_mat, cand);
        if res < best_res {
            best_res = res;
            best = k;
        }
    }
    let start = candidates.swap_remove(best);
    refine(a_mat, start)
}

/// Residual state for `A − 1·aᵀ` with cached column and row abs-sums.
struct Residual<'a> {
    m: &'a Tensor,
    a: Vec<f64>,
    cols: Vec<f64>,
    rows: Vec<f64>,
}

impl<'a> Residual<'a> {
    fn new(m: &'a Tensor, a: Vec<f64>) -> Self {
        let (r, c) = (m.rows(), m.cols());
        let mut cols = vec![0.0; c];
        let mut rows = vec![0.0; r];
        for i in 0..r {
            for j in 0..c {
                let x = (m.get(i, j) - a[j]).abs();
                cols[j] += x;
                rows[i] += x;
            }
        }
        Self { m, a, cols, rows }
    }

    /// Squared composite norm, monotone in the residual.
    fn objective(&self) -> f64 {
        let c = self.cols.iter().copied().fold(0.0, f64::max);
        let r = self.rows.iter().copied().fold(0.0, f64::max);
        c * r
    }

    /// Objective after moving `a` along `dir`, plus the updated sums.
    fn trial(&self, dir: &[(usize, f64)]) -> (f64, Vec<f64>, Vec<f64>) {
        let mut rows = self.rows.clone();
        let mut new_cols = Vec::with_capacity(dir.len());
        for &(j, d) in dir {
            let (old, new) = (self.a[j], self.a[j] + d);
            let mut s = 0.0;
            for (i, r) in rows.iter_mut().enumerate() {
                let x = self.m.get(i, j);
                let after = (x - new).abs();
                *r += after - (x - old).abs();
                s += after;
            }
            new_cols.push(s);
        }
        let mut c_max = 0.0f64;
        for (j, &v) in self.cols.iter().enumerate() {
            let v = dir.iter().position(|&(k, _)| k == j).map_or(v, |p| new_cols[p]);
            c_max = c_max.max(v);
        }
        let r_max = rows.iter().copied().fold(0.0, f64::max);
        (c_max * r_max, new_cols, rows)
    }

    fn apply(&mut self, dir: &[(usize, f64)], new_cols: Vec<f64>, rows: Vec<f64>) {
        for (&(j, d), s) in dir.iter().zip(new_cols) {
            self.a[j] += d;
            self.cols[j] = s;
        }
        self.rows = rows;
    }
}

/// Coordinate moves always; pairwise diagonal moves for narrow maps.
fn directions(c: usize, step: f64) -> Vec<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for j in 0..c {
        for s in [step, -step] {
            out.push(vec![(j, s)]);
        }
    }
    if c <= 8 {
        for j in 0..c {
            for k in j + 1..c {
                for (sj, sk) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    out.push(vec![(j, sj * step), (k, sk * step)]);
                }
            }
        }
    }
    out
}

fn refine(m: &Tensor, start: Vec<f64>) -> Vec<f64> {
    let mut st = Residual::new(m, start);
    let mut cur = st.objective();
    if cur == 0.0 {
        return st.a;
    }
    let mut step = 0.25;
    while step > 1e-6 {
        let dirs = directions(m.cols(), step);
        for _ in 0..64 {
            let mut moved = false;
            for d in &dirs {
                let (obj, cols, rows) = st.trial(d);
                if obj < cur * (1.0 - 1e-12) {
                    st.apply(d, cols, rows);
                    cur = obj;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
        step *= 0.5;
    }
    st.a
}

/// `d(A)`: residual of `A` against its fitted rank-1 approximation.
pub fn diversity(a_mat: &Tensor) -> f64 {
    rank1_residual(a_mat, &rank1_fit(a_mat))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoDiversity {
    pub video: usize,
    pub tag: AttnTag,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiversity {
    pub tag: AttnTag,
    pub mean_diversity: f64,
    /// Map shape; values are not normalized by size.
    pub rows: usize,
    pub cols: usize,
    pub videos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub layers: Vec<LayerDiversity>,
    pub per_video: Vec<VideoDiversity>,
}

impl DiversityReport {
    /// Aggregates head-averaged maps tagged by video and capture point.
    pub fn from_maps(maps: &[(usize, AttnTag, Tensor)]) -> Self {
        let per_video: Vec<VideoDiversity> = maps
            .iter()
            .map(|(v, tag, m)| VideoDiversity {
                video: *v,
                tag: *tag,
                diversity: diversity(m),
            })
            .collect();
        let mut acc: BTreeMap<AttnTag, (f64, usize, usize, usize)> = BTreeMap::new();
        for ((_, tag, m), d) in maps.iter().zip(&per_video) {
            let e = acc.entry(*tag).or_insert((0.0, 0, m.rows(), m.cols()));
            e.0 += d.diversity;
            e.1 += 1;
        }
        let layers = acc
            .into_iter()
            .map(|(tag, (sum, n, rows, cols))| LayerDiversity {
                tag,
                mean_diversity: sum / n as f64,
                rows,
                cols,
                videos: n,
            })
            .collect();
        Self { layers, per_video }
    }

    pub fn mean(&self, tag: AttnTag) -> Option<f64> {
        self.layers.iter().find(|l| l.tag == tag).map(|l| l.mean_diversity)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,layer,mean_diversity,rows,cols,videos\n");
        for l in &self.layers {
            s.push_str(&format!(
                "{},{},{:.9},{},{},{}\n",
                l.tag.component.as_str(),
                l.tag.layer,
                l.mean_diversity,
                l.rows,
                l.cols,
                l.videos
            ));
        }
        s
    }

    /// Writes `diversity.csv` and `diversity.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("diversity.csv"), self.to_csv().as_bytes())?;
        let json = serde_json::to_vec_pretty(self).expect("report serializes");
        write_file(&dir.join("diversity.json"), &json)
    }
}

/// Head-averaged attention maps of every video, in video order.
pub fn capture_attention(
    model: &DetectionTransformer,
    ds: &Dataset,
    batch_size: usize,
    new_graph: impl Fn() -> Graph,
) -> Result<Vec<(usize, AttnTag, Tensor)>> {
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut g = new_graph();
        if !g.capture_enabled() {
            return Err(Error::Usage("attention capture is disabled on the graph".into()));
        }
        let seqs: Vec<Tensor> = chunk
            .iter()
            .map(|&i| {
                let s = &ds.samples[i];
                Tensor::matrix(s.len(), s.dim, s.features.iter().map(|&x| f64::from(x)).collect())
            })
            .collect();
        let refs: Vec<&Tensor> = seqs.iter().collect();
        model.forward(&mut g, &refs, None)?;
        let mut per_video: Vec<Vec<(AttnTag, Tensor)>> = vec![Vec::new(); chunk.len()];
        for cap in g.take_captured() {
            for (b, m) in cap.maps.into_iter().enumerate() {
                per_video[b].push((cap.tag, m));
            }
        }
        for (&v, maps) in chunk.iter().zip(per_video) {
            out.extend(maps.into_iter().map(|(t, m)| (v, t, m)));
        }
    }
    Ok(out)
}

/// Mean `d(A)` per capture point over every video of `ds`.
pub fn layer_diversity_profile(model: &DetectionTransformer, ds: &Dataset, batch_size: usize) -> Result<DiversityReport> {
    layer_diversity_profile_with(model, ds, batch_size, || Graph::new().with_capture())
}

/// As [`layer_diversity_profile`] with a caller-built graph per batch.
pub fn layer_diversity_profile_with(
    model: &DetectionTransformer,
    ds: &Dataset,
    batch_size: usize,
    new_graph: impl Fn() -> Graph,
) -> Result<DiversityReport> {
    let maps = capture_attention(model, ds, batch_size, new_graph)?;
    Ok(DiversityReport::from_maps(&maps))
}
