//! Central finite-difference verification of reverse-mode gradients.

use rand::Rng as _;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;
use crate::rng::Rng;

/// Denominator floor of [`relative_error`]. Gradients smaller than this are
/// compared in absolute terms, which keeps finite-difference round-off
/// (about `1e-16 |f| / h`) from dominating near-zero entries.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares `∂loss/∂θ` from one backward pass against
/// `(f(θ + h) − f(θ − h)) / 2h` at each coordinate. `params` exposes the
/// store `loss` reads from.
pub fn grad_check<T>(
    target: &mut T,
    params: impl Fn(&mut T) -> &mut ParamStore,
    loss: impl Fn(&T, &mut Graph) -> Result<Var>,
    coords: &[(ParamId, usize)],
    h: f64,
) -> Result<GradCheckReport> {
    params(target).zero_grads();
    let mut g = Graph::new();
    let v = loss(target, &mut g)?;
    g.backward(v, params(target))?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, k)| params(target).grad(id).data()[k])
        .collect();
    let eval = |t: &T| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(t, &mut g)?;
        Ok(g.value(v).data()[0])
    };
    let mut report = GradCheckReport::default();
    for (&(id, k), a) in coords.iter().zip(analytic) {
        let orig = params(target).value(id).data()[k];
        params(target).value_mut(id).data_mut()[k] = orig + h;
        let fp = eval(target)?;
        params(target).value_mut(id).data_mut()[k] = orig - h;
        let fm = eval(target)?;
        params(target).value_mut(id).data_mut()[k] = orig;
        let n = (fp - fm) / (2.0 * h);
        report.coordinates.push(CoordinateCheck {
            name: params(target).name(id).to_string(),
            index: k,
            analytic: a,
            numeric: n,
            rel_error: relative_error(a, n),
        });
    }
    Ok(report)
}

/// `count` coordinates drawn uniformly over the scalars of parameters whose
/// name passes `filter`.
pub fn sample_coordinates(
    store: &ParamStore,
    filter: impl Fn(&str) -> bool,
    count: usize,
    rng: &mut Rng,
) -> Vec<(ParamId, usize)> {
    let pool: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, name, _)| filter(name))
        .map(|(id, _, t)| (id, t.len()))
        .collect();
    let total: usize = pool.iter().map(|p| p.1).sum();
    if total == 0 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let mut r = rng.random_range(0..total);
            for &(id, len) in &pool {
                if r < len {
                    return (id, r);
                }
                r -= len;
            }
            unreachable!("r < total")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AttnComponent, AttnTag, Tensor};
    use crate::rng;

    fn random_store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut r = rng::stream(seed, 0);
        let mut s = ParamStore::new();
        for &(name, a, b) in shapes {
            let data = (0..a * b).map(|_| r.random_range(-1.0..1.0)).collect();
            s.register(name, Tensor::matrix(a, b, data));
        }
        s
    }

    fn all_coords(s: &ParamStore) -> Vec<(ParamId, usize)> {
        s.iter().flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k))).collect()
    }

    #[test]
    fn affine_layer() {
        let mut s = random_store(&[("x", 3, 4), ("w", 4, 2), ("b", 1, 2)], 1);
        let coords = all_coords(&s);
        let rep = grad_check(&mut s, |s| s, |s, g| {
            let ids: Vec<_> = s.ids().collect();
            let (x, w, b) = (g.param(s, ids[0]), g.param(s, ids[1]), g.param(s, ids[2]));
            let y = g.affine(x, w, b)?;
            let y2 = g.sigmoid(y);
            Ok(g.sum(y2))
        }, &coords, 1e-5).unwrap();
        assert!(rep.max_rel_error() < 1e-7, "{:?}", rep.worst());
    }

    #[test]
    fn softmax_cross_entropy() {
        let mut s = random_store(&[("z", 5, 4)], 2);
        let coords = all_coords(&s);
        let rep = grad_check(&mut s, |s| s, |s, g| {
            let z = g.param(s, s.ids().next().unwrap());
            g.softmax_cross_entropy(z, &[0, 3, 1, 1, 2])
        }, &coords, 1e-5).unwrap();
        assert!(rep.max_rel_error() < 1e-6, "{:?}", rep.worst());
    }

    #[test]
    fn attention_block() {
        let mut s = random_store(&[("q", 6, 4), ("k", 10, 4), ("v", 10, 4), ("w", 4, 3)], 3);
        let coords = all_coords(&s);
        let tag = AttnTag { component: AttnComponent::DecoderCross, layer: 0 };
        let rep = grad_check(&mut s, |s| s, |s, g| {
            let ids: Vec<_> = s.ids().collect();
            let (q, k, v, w) = (g.param(s, ids[0]), g.param(s, ids[1]), g.param(s, ids[2]), g.param(s, ids[3]));
            let a = g.attention(q, k, v, 2, 2, Some(tag))?;
            let y = g.matmul(a, w)?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        }, &coords, 1e-5).unwrap();
        assert!(rep.max_rel_error() < 1e-5, "{:?}", rep.worst());
    }
}
