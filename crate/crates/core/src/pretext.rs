//! Pretext conditions: which target instances the decoder should report, and
//! the indicator vectors that tell it so.
//!
//! A task vector is `[z_b, z_o, z_s]`: a one-hot target class, an ordinal
//! block `[on, start one-hot (N_max), end one-hot (N_max)]` and a scale block
//! `[on, XS, S, L, XL]`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DetectionTransformer, Graph, Tensor};
use crate::rng::Rng;
use crate::synthesis::{ActionInstance, ScaleBucket, SynthesizedSample};

/// Active restriction on a sample's ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Condition {
    pub target_category: usize,
    /// Inclusive 1-based ordinal range.
    pub ordinal: Option<[usize; 2]>,
    pub scale: Option<ScaleBucket>,
}

/// The serialized part of a [`Condition`]; the category is stored with the
/// sample.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub ordinal: Option<[usize; 2]>,
    pub scale: Option<ScaleBucket>,
}

impl Condition {
    pub fn none(target_category: usize) -> Self {
        Self {
            target_category,
            ordinal: None,
            scale: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.ordinal.is_some() || self.scale.is_some()
    }

    pub fn record(&self) -> ConditionRecord {
        ConditionRecord {
            ordinal: self.ordinal,
            scale: self.scale,
        }
    }

    pub fn from_record(target_category: usize, rec: &ConditionRecord) -> Self {
        Self {
            target_category,
            ordinal: rec.ordinal,
            scale: rec.scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector {
    pub z_b: Vec<f64>,
    pub z_o: Vec<f64>,
    pub z_s: Vec<f64>,
}

impl ConditionVector {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.z_b.len() + self.z_o.len() + self.z_s.len());
        v.extend_from_slice(&self.z_b);
        v.extend_from_slice(&self.z_o);
        v.extend_from_slice(&self.z_s);
        v
    }

    /// Checks the one-hot structure of every block.
    pub fn validate(&self, n_max: usize) -> Result<()> {
        let ones = |s: &[f64]| s.iter().filter(|&&x| x == 1.0).count();
        let binary = |s: &[f64]| s.iter().all(|&x| x == 0.0 || x == 1.0);
        if !binary(&self.z_b) || ones(&self.z_b) != 1 {
            return Err(Error::Domain("z_b must be one-hot".into()));
        }
        if self.z_o.len() != 2 * n_max + 1 || !binary(&self.z_o) {
            return Err(Error::Domain("z_o has the wrong length or non-binary entries".into()));
        }
        let on = self.z_o[0] == 1.0;
        let (a, b) = (ones(&self.z_o[1..=n_max]), ones(&self.z_o[n_max + 1..]));
        if (on && (a != 1 || b != 1)) || (!on && a + b != 0) {
            return Err(Error::Domain("z_o blocks disagree with its indicator".into()));
        }
        if self.z_s.len() != 5 || !binary(&self.z_s) {
            return Err(Error::Domain("z_s has the wrong length or non-binary entries".into()));
        }
        let n = ones(&self.z_s[1..]);
        if (self.z_s[0] == 1.0 && n != 1) || (self.z_s[0] == 0.0 && n != 0) {
            return Err(Error::Domain("z_s block disagrees with its indicator".into()));
        }
        Ok(())
    }
}

/// One-hot of `k` over `n_target` classes.
pub fn encode_basic(k: usize, n_target: usize) -> Result<Vec<f64>> {
    if k >= n_target {
        return Err(Error::Domain(format!("category {k} outside [0, {n_target})")));
    }
    let mut z = vec![0.0; n_target];
    z[k] = 1.0;
    Ok(z)
}

pub fn encode_ordinal(range: Option<[usize; 2]>, n_max: usize) -> Result<Vec<f64>> {
    let mut z = vec![0.0; 2 * n_max + 1];
    if let Some([o1, o2]) = range {
        if o1 == 0 || o2 < o1 || o2 > n_max {
            return Err(Error::Domain(format!("ordinal range [{o1}, {o2}] invalid for n_max {n_max}")));
        }
        z[0] = 1.0;
        z[o1] = 1.0;
        z[n_max + o2] = 1.0;
    }
    Ok(z)
}

pub fn encode_scale(bucket: Option<ScaleBucket>) -> Vec<f64> {
    let mut z = vec![0.0; 5];
    if let Some(b) = bucket {
        z[0] = 1.0;
        z[1 + b.index()] = 1.0;
    }
    z
}

/// Task vector of `cond`, where class `category_offset` maps to `z_b[0]`.
pub fn encode_condition(
    cond: &Condition,
    category_offset: usize,
    n_target: usize,
    n_max: usize,
) -> Result<ConditionVector> {
    let k = cond
        .target_category
        .checked_sub(category_offset)
        .ok_or_else(|| Error::Domain(format!("category {} below offset {category_offset}", cond.target_category)))?;
    Ok(ConditionVector {
        z_b: encode_basic(k, n_target)?,
        z_o: encode_ordinal(cond.ordinal, n_max)?,
        z_s: encode_scale(cond.scale),
    })
}

/// Inverse of [`encode_condition`].
pub fn decode_condition(cv: &ConditionVector, category_offset: usize, n_max: usize) -> Result<Condition> {
    cv.validate(n_max)?;
    let hot = |s: &[f64]| s.iter().position(|&x| x == 1.0);
    let k = hot(&cv.z_b).expect("validated");
    let ordinal = if cv.z_o[0] == 1.0 {
        let o1 = hot(&cv.z_o[1..=n_max]).expect("validated") + 1;
        let o2 = hot(&cv.z_o[n_max + 1..]).expect("validated") + 1;
        if o2 < o1 {
            return Err(Error::Domain(format!("decoded ordinal range [{o1}, {o2}] is reversed")));
        }
        Some([o1, o2])
    } else {
        None
    };
    let scale = if cv.z_s[0] == 1.0 {
        Some(ScaleBucket::ALL[hot(&cv.z_s[1..]).expect("validated")])
    } else {
        None
    };
    Ok(Condition {
        target_category: k + category_offset,
        ordinal,
        scale,
    })
}

/// Draws a condition for `sample`: none with probability `1 - p_cond`, else
/// an ordinal or a scale restriction (or, with `allow_joint`, possibly both).
/// Every drawn condition keeps at least one instance.
pub fn sample_condition(sample: &SynthesizedSample, p_cond: f64, allow_joint: bool, rng: &mut Rng) -> Condition {
    let mut cond = Condition::none(sample.target_category);
    let n = sample.instances.len();
    if n == 0 || !rng.random_bool(p_cond.clamp(0.0, 1.0)) {
        return cond;
    }
    let kinds = if allow_joint { 3 } else { 2 };
    let kind = rng.random_range(0..kinds);
    if kind == 0 || kind == 2 {
        let o1 = rng.random_range(1..=n);
        let len = rng.random_range(1..=n - o1 + 1);
        cond.ordinal = Some([o1, o1 + len - 1]);
    }
    if kind == 1 || kind == 2 {
        let [lo, hi] = cond.ordinal.unwrap_or([1, n]);
        let pick = rng.random_range(lo..=hi);
        cond.scale = Some(sample.instances[pick - 1].bucket());
    }
    cond
}

/// Instances kept by `cond`, order preserved.
pub fn filter_targets(instances: &[ActionInstance], cond: &Condition) -> Vec<ActionInstance> {
    instances
        .iter()
        .filter(|i| cond.ordinal.is_none_or(|[o1, o2]| (o1..=o2).contains(&i.ordinal)))
        .filter(|i| cond.scale.is_none_or(|b| i.bucket() == b))
        .cloned()
        .collect()
}

/// `q + 1 E(z)ᵀ`: the task encoding of `cv` added to every query row.
pub fn condition_queries(q: &Tensor, cv: &ConditionVector, model: &DetectionTransformer) -> Result<Tensor> {
    let d = model.config().hidden_dim;
    if q.cols() != d {
        return Err(Error::Shape(format!("queries have width {}, task encoder emits {d}", q.cols())));
    }
    let z = cv.concat();
    let mut g = Graph::new();
    let e = model.task_encode(&mut g, &Tensor::matrix(1, z.len(), z))?;
    let e = g.value(e).data().to_vec();
    let mut out = q.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (x, y) in row.iter_mut().zip(&e) {
            *x += y;
        }
    }
    Ok(out)
}
