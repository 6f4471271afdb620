//! Differentiable tensor core and the detection transformer built on it.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod model;
mod params;
mod tensor;

pub use graph::{
    sigmoid, softmax_in_place, AttnComponent, AttnTag, CapturedAttention, Graph, Var,
};
pub use model::{
    detection_sets, sinusoidal_positions, Component, DetectionTransformer, ForwardOutput,
    ModelConfig, Profile,
};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Row-stochastic attention weights, queries by keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(pub Tensor);

impl AttentionMap {
    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    pub fn max_row_sum_error(&self) -> f64 {
        let t = &self.0;
        (0..t.rows())
            .map(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Single-head `softmax(Q Kᵀ / √d_k) V`, returning the output and the map.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, AttentionMap)> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "query dim {} != key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    let mut g = Graph::new().with_capture();
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let tag = AttnTag {
        component: AttnComponent::EncoderSelf,
        layer: 0,
    };
    let out = g.attention(qv, kv, vv, 1, 1, Some(tag))?;
    let map = g
        .take_captured()
        .pop()
        .and_then(|c| c.maps.into_iter().next())
        .expect("capture enabled");
    Ok((g.value(out).clone(), AttentionMap(map)))
}

/// One decoder slot's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPrediction {
    /// Probabilities over foreground classes followed by "no action".
    pub probs: Vec<f64>,
    pub center: f64,
    pub width: f64,
}

impl QueryPrediction {
    pub fn background_prob(&self) -> f64 {
        *self.probs.last().expect("non-empty probabilities")
    }

    /// `[center - width/2, center + width/2]` clamped to `[0, 1]`.
    pub fn interval(&self) -> (f64, f64) {
        center_width_to_interval(self.center, self.width)
    }
}

/// The model's output for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub queries: Vec<QueryPrediction>,
}

pub fn center_width_to_interval(center: f64, width: f64) -> (f64, f64) {
    (
        (center - width / 2.0).clamp(0.0, 1.0),
        (center + width / 2.0).clamp(0.0, 1.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_queries_attend_uniformly() {
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.5, 0.5, 0.5], vec![-1.0, 3.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let (out, map) = attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            for &a in map.matrix().row(r) {
                assert!((a - 0.25).abs() < 1e-15);
            }
            assert!((out.get(r, 0) - 4.0).abs() < 1e-12);
            assert!((out.get(r, 1) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_map_is_all_ones() {
        let q = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.3, 0.9]]).unwrap();
        let k = Tensor::from_rows(&[vec![4.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![2.0, -3.0, 1.0]]).unwrap();
        let (out, map) = attention(&q, &k, &v).unwrap();
        assert!(map.matrix().data().iter().all(|&a| a == 1.0));
        assert_eq!(out.row(1), v.row(0));
    }

    #[test]
    fn random_rows_sum_to_one() {
        let q = Tensor::from_rows(&[vec![0.2, -1.1, 0.7, 0.3], vec![1.5, 0.0, -0.4, 2.0], vec![-0.6, 0.8, 0.1, -1.2]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.9, 0.1, -0.3, 0.4], vec![-1.0, 0.2, 0.5, 0.0], vec![0.3, -0.7, 1.2, 0.6]]).unwrap();
        let (_, map) = attention(&q, &k, &k).unwrap();
        assert!(map.max_row_sum_error() < 1e-12);
        assert!(attention(&q, &Tensor::zeros(&[3, 2]), &k).is_err());
    }
}
