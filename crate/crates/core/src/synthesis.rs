//! Class-wise synthesis of long feature sequences.
//!
//! A sample is built from a background template of clips whose category is
//! not the target, then `N_t` target clips are cropped, optionally resized,
//! and written over the template at random positions. Same-category
//! overlapping (or touching) insertions are grouped into one instance.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featbank::{ClipFeatures, FeatureBank};
use crate::pretext::Condition;
use crate::rng::{self, Rng};

/// Half-open interval `[start, end)` in feature steps.
pub type Span = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisParams {
    /// Sequence length every sample is normalized to.
    pub target_len: usize,
    /// Number of clips concatenated into the background template.
    pub n_bg: usize,
    /// Inclusive range of inserted target clips.
    pub n_t_range: [usize; 2],
    /// Crop length as a fraction of the source clip, drawn uniformly.
    pub crop_fraction_range: [f64; 2],
    pub n_max: usize,
    /// When set, each cropped target is stretched to `round(L * u)` steps with
    /// `u ~ U(lo, max(lo, hi / N_t))`. Without it every instance of a bank
    /// with clips of 8-16 steps is shorter than a tenth of the sequence.
    pub resize: Option<[f64; 2]>,
    /// Half-open range of bank categories used for targets and background.
    /// `None` means the whole bank.
    pub categories: Option<[usize; 2]>,
    pub seed: u64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            target_len: 192,
            n_bg: 16,
            n_t_range: [1, 6],
            crop_fraction_range: [0.25, 1.0],
            n_max: 12,
            resize: Some([0.03, 1.0]),
            categories: None,
            seed: 11,
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self, bank: &FeatureBank) -> Result<()> {
        let [tlo, thi] = self.n_t_range;
        if tlo == 0 || thi < tlo {
            return Err(Error::Config(format!("n_t_range {:?} is empty or starts at 0", self.n_t_range)));
        }
        if thi > self.n_max {
            return Err(Error::Config(format!("n_t_range max {thi} exceeds n_max {}", self.n_max)));
        }
        if self.n_bg == 0 || self.target_len == 0 {
            return Err(Error::Config("n_bg and target_len must be positive".into()));
        }
        if self.target_len < bank.max_clip_len() {
            return Err(Error::Config(format!(
                "target_len {} is shorter than the longest bank clip ({})",
                self.target_len,
                bank.max_clip_len()
            )));
        }
        check_fraction_range(self.crop_fraction_range)?;
        if let Some([lo, hi]) = self.resize {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("resize range {:?} must satisfy 0 < lo <= hi <= 1", [lo, hi])));
            }
        }
        let [clo, chi] = self.category_range(bank);
        if chi > bank.num_categories() || chi < clo + 2 {
            return Err(Error::Config(format!(
                "category range [{clo}, {chi}) needs at least 2 categories within the bank's {}",
                bank.num_categories()
            )));
        }
        Ok(())
    }

    pub fn category_range(&self, bank: &FeatureBank) -> [usize; 2] {
        self.categories.unwrap_or([0, bank.num_categories()])
    }
}

fn check_fraction_range([lo, hi]: [f64; 2]) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("fraction range [{lo}, {hi}] must lie in (0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScaleBucket {
    XS,
    S,
    L,
    XL,
}

impl ScaleBucket {
    pub const ALL: [ScaleBucket; 4] = [ScaleBucket::XS, ScaleBucket::S, ScaleBucket::L, ScaleBucket::XL];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleBucket::XS => "XS",
            ScaleBucket::S => "S",
            ScaleBucket::L => "L",
            ScaleBucket::XL => "XL",
        }
    }
}

/// Quartile bucket of a duration ratio.
pub fn assign_scale_bucket(r: f64) -> Result<ScaleBucket> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Domain(format!("duration ratio {r} outside (0, 1]")));
    }
    Ok(if r < 0.25 {
        ScaleBucket::XS
    } else if r < 0.5 {
        ScaleBucket::S
    } else if r < 0.75 {
        ScaleBucket::L
    } else {
        ScaleBucket::XL
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub category: usize,
    pub start: usize,
    pub end: usize,
    /// 1-based rank among target instances by start.
    pub ordinal: usize,
    /// Duration over sequence length.
    pub r: f64,
}

impl ActionInstance {
    /// `(start, end)` divided by the sequence length.
    pub fn normalized(&self, len: usize) -> (f64, f64) {
        (self.start as f64 / len as f64, self.end as f64 / len as f64)
    }

    pub fn bucket(&self) -> ScaleBucket {
        assign_scale_bucket(self.r).expect("instances have r in (0, 1]")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundSpan {
    pub category: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedSample {
    /// `len x dim` row-major.
    pub features: Vec<f32>,
    pub dim: usize,
    pub target_category: usize,
    pub instances: Vec<ActionInstance>,
    pub background_spans: Vec<BackgroundSpan>,
    pub condition: Condition,
}

impl SynthesizedSample {
    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }

    /// Ground truth under the active condition.
    pub fn targets(&self) -> Vec<ActionInstance> {
        crate::pretext::filter_targets(&self.instances, &self.condition)
    }
}

/// Per-category clip lists a sample draws from.
#[derive(Clone, Debug)]
pub struct ClipSource<'a> {
    pub categories: Vec<(usize, &'a [ClipFeatures])>,
}

impl<'a> ClipSource<'a> {
    pub fn from_bank(bank: &'a FeatureBank, [lo, hi]: [usize; 2]) -> Result<Self> {
        let categories = (lo..hi)
            .map(|k| Ok((k, bank.clips(k)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { categories })
    }

    fn clips(&self, category: usize) -> Result<&'a [ClipFeatures]> {
        self.categories
            .iter()
            .find(|(k, _)| *k == category)
            .map(|(_, c)| *c)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Lookup(format!("category {category} has no clips in this source")))
    }
}

fn concat_template(
    background: &ClipSource,
    exclude: usize,
    n_bg: usize,
    target_len: usize,
    dim: usize,
    rng: &mut Rng,
) -> Result<(Vec<f32>, Vec<BackgroundSpan>)> {
    let allowed: Vec<&(usize, &[ClipFeatures])> = background
        .categories
        .iter()
        .filter(|(k, c)| *k != exclude && !c.is_empty())
        .collect();
    if allowed.is_empty() {
        return Err(Error::Config("background needs a category other than the target".into()));
    }
    let mut picked: Vec<&ClipFeatures> = Vec::with_capacity(n_bg);
    for _ in 0..n_bg {
        let (_, clips) = allowed[rng.random_range(0..allowed.len())];
        picked.push(&clips[rng.random_range(0..clips.len())]);
    }
    // cycle through the picked clips until full, truncating the last one
    let mut features = Vec::with_capacity(target_len * dim);
    let mut spans = Vec::new();
    let mut t = 0;
    let mut i = 0;
    while t < target_len {
        let clip = picked[i % picked.len()];
        let take = clip.len().min(target_len - t);
        features.extend_from_slice(&clip.data()[..take * dim]);
        spans.push(BackgroundSpan {
            category: clip.category,
            start: t,
            end: t + take,
        });
        t += take;
        i += 1;
    }
    Ok((features, spans))
}

/// Concatenates `n_bg` clips of categories other than `target` into exactly
/// `target_len` steps.
pub fn build_background(
    bank: &FeatureBank,
    target: usize,
    n_bg: usize,
    target_len: usize,
    rng: &mut Rng,
) -> Result<(Vec<f32>, Vec<BackgroundSpan>)> {
    if bank.num_categories() < 2 {
        return Err(Error::Config("a background needs at least two categories".into()));
    }
    let source = ClipSource::from_bank(bank, [0, bank.num_categories()])?;
    concat_template(&source, target, n_bg, target_len, bank.feature_dim(), rng)
}

/// `n_t` clips of `category` drawn uniformly with replacement.
pub fn sample_targets(bank: &FeatureBank, category: usize, n_t: usize, rng: &mut Rng) -> Result<Vec<ClipFeatures>> {
    if n_t == 0 {
        return Err(Error::Domain("at least one target clip is required".into()));
    }
    let clips = bank.clips(category)?;
    Ok((0..n_t)
        .map(|_| clips[rng.random_range(0..clips.len())].clone())
        .collect())
}

/// Contiguous slice of `round(f * T)` rows, `f` uniform in `fraction_range`.
pub fn crop_random(clip: &ClipFeatures, fraction_range: [f64; 2], rng: &mut Rng) -> Result<ClipFeatures> {
    check_fraction_range(fraction_range)?;
    let [lo, hi] = fraction_range;
    let f = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let len = (f * clip.len() as f64).round() as usize;
    if len == 0 {
        return Err(Error::Config(format!(
            "crop fraction {f} of a {}-step clip is empty",
            clip.len()
        )));
    }
    let start = rng.random_range(0..=clip.len() - len);
    Ok(clip.slice(start, start + len))
}

/// Linear interpolation of rows to `len` steps, rows renormalized.
pub fn resize_clip(clip: &ClipFeatures, len: usize) -> ClipFeatures {
    let (t, d) = (clip.len(), clip.dim());
    if len == t {
        return clip.clone();
    }
    let mut out = Vec::with_capacity(len * d);
    let mut row = vec![0.0f64; d];
    for i in 0..len {
        let pos = if len == 1 {
            (t - 1) as f64 / 2.0
        } else {
            i as f64 * (t - 1) as f64 / (len - 1) as f64
        };
        let a = (pos.floor() as usize).min(t - 1);
        let b = (a + 1).min(t - 1);
        let w = pos - a as f64;
        for (j, x) in row.iter_mut().enumerate() {
            *x = (1.0 - w) * clip.row(a)[j] as f64 + w * clip.row(b)[j] as f64;
        }
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(row.iter().map(|&x| (if n > 0.0 { x / n } else { x }) as f32));
    }
    ClipFeatures::new(clip.category, d, out).expect("non-empty resize")
}

/// Union hulls of overlapping or touching spans, sorted by start.
pub fn merge_overlaps(spans: &[Span]) -> Vec<Span> {
    let mut sorted = spans.to_vec();
    sorted.sort_unstable();
    let mut out: Vec<Span> = Vec::with_capacity(sorted.len());
    for (s, e) in sorted {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Writes target clips over a background and labels the merged instances.
pub(crate) fn synthesize_from(
    targets: &ClipSource,
    background: &ClipSource,
    target_category: usize,
    params: &SynthesisParams,
    dim: usize,
    rng: &mut Rng,
) -> Result<SynthesizedSample> {
    let l = params.target_len;
    let (mut features, template) =
        concat_template(background, target_category, params.n_bg, l, dim, rng)?;
    let clips = targets.clips(target_category)?;
    let [tlo, thi] = params.n_t_range;
    let n_t = rng.random_range(tlo..=thi);
    let mut inserted: Vec<Span> = Vec::with_capacity(n_t);
    for _ in 0..n_t {
        let clip = &clips[rng.random_range(0..clips.len())];
        let mut piece = crop_random(clip, params.crop_fraction_range, rng)?;
        if let Some([lo, hi]) = params.resize {
            let hi = (hi / n_t as f64).max(lo);
            let u = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            let len = ((l as f64 * u).round() as usize).clamp(1, l);
            piece = resize_clip(&piece, len);
        }
        let len = piece.len().min(l);
        let start = rng.random_range(0..=l - len);
        features[start * dim..(start + len) * dim].copy_from_slice(&piece.data()[..len * dim]);
        inserted.push((start, start + len));
    }
    let merged = merge_overlaps(&inserted);
    let instances: Vec<ActionInstance> = merged
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| ActionInstance {
            category: target_category,
            start: s,
            end: e,
            ordinal: i + 1,
            r: (e - s) as f64 / l as f64,
        })
        .collect();
    let background_spans = subtract_spans(&template, &merged);
    Ok(SynthesizedSample {
        features,
        dim,
        target_category,
        instances,
        background_spans,
        condition: Condition::none(target_category),
    })
}

/// Template spans with the (sorted, disjoint) instance spans cut out.
fn subtract_spans(template: &[BackgroundSpan], cut: &[Span]) -> Vec<BackgroundSpan> {
    let mut out = Vec::new();
    for span in template {
        let mut pieces = vec![(span.start, span.end)];
        for &(cs, ce) in cut {
            pieces = pieces
                .into_iter()
                .flat_map(|(s, e)| {
                    let mut keep = Vec::with_capacity(2);
                    if ce <= s || cs >= e {
                        keep.push((s, e));
                    } else {
                        if s < cs {
                            keep.push((s, cs));
                        }
                        if ce < e {
                            keep.push((ce, e));
                        }
                    }
                    keep
                })
                .collect();
        }
        out.extend(pieces.into_iter().map(|(start, end)| BackgroundSpan {
            category: span.category,
            start,
            end,
        }));
    }
    out
}

/// One sample with an explicit random stream; the target category is drawn
/// uniformly from the configured range.
pub fn synthesize_sample(bank: &FeatureBank, params: &SynthesisParams, rng: &mut Rng) -> Result<SynthesizedSample> {
    params.validate(bank)?;
    let range = params.category_range(bank);
    let source = ClipSource::from_bank(bank, range)?;
    let k = rng.random_range(range[0]..range[1]);
    synthesize_from(&source, &source, k, params, bank.feature_dim(), rng)
}

/// Random stream of sample `index` under `seed`.
pub fn sample_stream(seed: u64, index: u64) -> Rng {
    rng::stream(rng::mix64(seed, rng::tag::SYNTH), index)
}

/// Sample `index` of the stream defined by `params.seed`.
pub fn synthesize_indexed(bank: &FeatureBank, params: &SynthesisParams, index: u64) -> Result<SynthesizedSample> {
    synthesize_sample(bank, params, &mut sample_stream(params.seed, index))
}

/// Samples `indices` in order, generated on the current rayon pool.
pub fn synthesize_many(bank: &FeatureBank, params: &SynthesisParams, indices: &[u64]) -> Result<Vec<SynthesizedSample>> {
    params.validate(bank)?;
    indices
        .par_iter()
        .map(|&i| synthesize_indexed(bank, params, i))
        .collect()
}

/// Checks every structural invariant of a sample, returning a description
/// of the first violation.
pub fn check_sample(sample: &SynthesizedSample, params: &SynthesisParams) -> std::result::Result<(), String> {
    let l = params.target_len;
    if sample.len() != l || sample.features.len() != l * sample.dim {
        return Err(format!("length {} != {l}", sample.len()));
    }
    let n = sample.instances.len();
    if n == 0 || n > params.n_max {
        return Err(format!("{n} instances outside [1, {}]", params.n_max));
    }
    let mut covered = vec![0u8; l];
    for (i, inst) in sample.instances.iter().enumerate() {
        if !(inst.start < inst.end && inst.end <= l) {
            return Err(format!("instance {i} interval [{}, {}) out of bounds", inst.start, inst.end));
        }
        if inst.ordinal != i + 1 {
            return Err(format!("instance {i} has ordinal {}", inst.ordinal));
        }
        if inst.r != (inst.end - inst.start) as f64 / l as f64 {
            return Err(format!("instance {i} has r {}", inst.r));
        }
        if inst.category != sample.target_category {
            return Err(format!("instance {i} has category {}", inst.category));
        }
        if i > 0 && sample.instances[i - 1].end >= inst.start {
            return Err(format!("instances {} and {i} overlap or touch", i - 1));
        }
        for c in &mut covered[inst.start..inst.end] {
            *c += 1;
        }
    }
    for span in &sample.background_spans {
        if span.category == sample.target_category {
            return Err("background span of the target category".into());
        }
        if !(span.start < span.end && span.end <= l) {
            return Err(format!("background span [{}, {}) out of bounds", span.start, span.end));
        }
        for c in &mut covered[span.start..span.end] {
            *c += 1;
        }
    }
    if let Some(t) = covered.iter().position(|&c| c != 1) {
        return Err(format!("step {t} covered {} times", covered[t]));
    }
    let total_r: f64 = sample.instances.iter().map(|i| i.r).sum();
    if total_r > 1.0 + 1e-12 {
        return Err(format!("total duration ratio {total_r} exceeds 1"));
    }
    Ok(())
}
