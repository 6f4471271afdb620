//! Synthetic trimmed-clip feature bank.
//!
//! Each category owns a random prototype direction. A clip of length `T` is
//! generated row by row as `normalize(prototype + α·drift_t + σ·ε_t)`, where
//! the drift is a 3-tap moving average of a Gaussian random walk. Rows are
//! stored as binary32, which is also the on-disk representation, so a saved
//! bank reloads bit-exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLIPS_FILE: &str = "clips.bin";

/// Generator settings for a feature bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub num_categories: usize,
    pub feature_dim: usize,
    pub clips_per_category: usize,
    /// Inclusive clip length range in feature steps.
    pub clip_len_range: [usize; 2],
    /// σ, scale of per-step Gaussian noise.
    pub prototype_noise: f64,
    /// α, scale of the smooth temporal drift.
    pub drift_amplitude: f64,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            num_categories: 40,
            feature_dim: 64,
            clips_per_category: 50,
            clip_len_range: [8, 16],
            prototype_noise: 0.3,
            drift_amplitude: 0.2,
            seed: 7,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.clip_len_range;
        if self.num_categories < 2 {
            return Err(Error::Config("num_categories must be at least 2".into()));
        }
        if self.feature_dim == 0 || self.clips_per_category == 0 {
            return Err(Error::Config(
                "feature_dim and clips_per_category must be positive".into(),
            ));
        }
        if lo < 2 || hi < lo {
            return Err(Error::Config(format!(
                "clip_len_range [{lo}, {hi}] needs 2 <= min <= max"
            )));
        }
        if !(self.prototype_noise >= 0.0 && self.drift_amplitude >= 0.0) {
            return Err(Error::Config("noise and drift must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One trimmed clip: `len x dim` unit-norm rows of a single category.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    pub category: usize,
    dim: usize,
    features: Vec<f32>,
}

impl ClipFeatures {
    pub fn new(category: usize, dim: usize, features: Vec<f32>) -> Result<Self> {
        if dim == 0 || features.is_empty() || features.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of width {dim}",
                features.len()
            )));
        }
        Ok(Self {
            category,
            dim,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.features
    }

    /// Rows `start..end` as a new clip of the same category.
    pub fn slice(&self, start: usize, end: usize) -> ClipFeatures {
        ClipFeatures {
            category: self.category,
            dim: self.dim,
            features: self.features[start * self.dim..end * self.dim].to_vec(),
        }
    }
}

/// An immutable collection of clips grouped by category.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub config: BankConfig,
    /// `num_categories x feature_dim`, row-major.
    pub prototypes: Vec<f32>,
    clips: Vec<Vec<ClipFeatures>>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates a bank; equal configs give bit-identical banks.
pub fn generate_bank(config: &BankConfig) -> Result<FeatureBank> {
    config.validate()?;
    let d = config.feature_dim;
    let mut rng = rng::stream(config.seed, rng::tag::BANK);
    let prototypes_f64: Vec<f64> = (0..config.num_categories * d)
        .map(|_| normal(&mut rng))
        .collect();
    let [lo, hi] = config.clip_len_range;
    let mut clips = Vec::with_capacity(config.num_categories);
    for k in 0..config.num_categories {
        let proto = &prototypes_f64[k * d..(k + 1) * d];
        let mut per_cat = Vec::with_capacity(config.clips_per_category);
        for _ in 0..config.clips_per_category {
            let len = rng.random_range(lo..=hi);
            // cumulative Gaussian walk, padded by one step on each side for the filter
            let mut walk = vec![0.0; (len + 2) * d];
            for t in 1..len + 2 {
                for j in 0..d {
                    walk[t * d + j] = walk[(t - 1) * d + j] + normal(&mut rng);
                }
            }
            let mut features = Vec::with_capacity(len * d);
            let mut row = vec![0.0; d];
            for t in 0..len {
                for j in 0..d {
                    let drift =
                        (walk[t * d + j] + walk[(t + 1) * d + j] + walk[(t + 2) * d + j]) / 3.0;
                    row[j] = proto[j]
                        + config.drift_amplitude * drift
                        + config.prototype_noise * normal(&mut rng);
                }
                normalize(&mut row);
                features.extend(row.iter().map(|&x| x as f32));
            }
            per_cat.push(ClipFeatures {
                category: k,
                dim: d,
                features,
            });
        }
        clips.push(per_cat);
    }
    Ok(FeatureBank {
        config: config.clone(),
        prototypes: prototypes_f64.iter().map(|&x| x as f32).collect(),
        clips,
    })
}

impl FeatureBank {
    pub fn num_categories(&self) -> usize {
        self.clips.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn clips(&self, category: usize) -> Result<&[ClipFeatures]> {
        self.clips
            .get(category)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Lookup(format!(
                    "category {category} not in bank of {} categories",
                    self.clips.len()
                ))
            })
    }

    pub fn prototype(&self, category: usize) -> &[f32] {
        let d = self.feature_dim();
        &self.prototypes[category * d..(category + 1) * d]
    }

    pub fn iter_clips(&self) -> impl Iterator<Item = &ClipFeatures> {
        self.clips.iter().flatten()
    }

    pub fn max_clip_len(&self) -> usize {
        self.iter_clips().map(ClipFeatures::len).max().unwrap_or(0)
    }

    /// Builds a bank from explicit clips; every category needs one clip.
    pub fn from_clips(config: BankConfig, prototypes: Vec<f32>, clips: Vec<Vec<ClipFeatures>>) -> Result<Self> {
        if clips.len() != config.num_categories {
            return Err(Error::Config("one clip list per category required".into()));
        }
        if prototypes.len() != config.num_categories * config.feature_dim {
            return Err(Error::Shape("prototype matrix has the wrong size".into()));
        }
        for (k, list) in clips.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Config(format!("category {k} has no clips")));
            }
            if list
                .iter()
                .any(|c| c.category != k || c.dim != config.feature_dim)
            {
                return Err(Error::Config(format!(
                    "category {k} holds a clip of another category or width"
                )));
            }
        }
        Ok(Self {
            config,
            prototypes,
            clips,
        })
    }
}

/// Draws one clip of `category` uniformly.
pub fn sample_clip<'a>(bank: &'a FeatureBank, category: usize, rng: &mut Rng) -> Result<&'a ClipFeatures> {
    let clips = bank.clips(category)?;
    Ok(&clips[rng.random_range(0..clips.len())])
}

#[derive(Serialize, Deserialize)]
struct ClipRecord {
    category: usize,
    length: usize,
    byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    num_categories: usize,
    #[serde(rename = "D")]
    feature_dim: usize,
    dtype: String,
    config: BankConfig,
    prototypes: Vec<f32>,
    clips: Vec<ClipRecord>,
}

/// Writes `manifest.json` and `clips.bin` into `dir` (created if missing).
pub fn save_bank(bank: &FeatureBank, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload: Vec<u8> = Vec::new();
    let mut records = Vec::new();
    for clip in bank.iter_clips() {
        records.push(ClipRecord {
            category: clip.category,
            length: clip.len(),
            byte_offset: payload.len() as u64,
        });
        for x in clip.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        num_categories: bank.num_categories(),
        feature_dim: bank.feature_dim(),
        dtype: "f32le".into(),
        config: bank.config.clone(),
        prototypes: bank.prototypes.clone(),
        clips: records,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(CLIPS_FILE), &payload)?;
    write_file(&dir.join(MANIFEST_FILE), &json)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Byte offset of a serde_json error position within `text`.
pub(crate) fn json_error_offset(text: &[u8], err: &serde_json::Error) -> u64 {
    if err.line() == 0 {
        return text.len() as u64;
    }
    let mut line = 1;
    let mut offset = 0usize;
    for (i, &b) in text.iter().enumerate() {
        if line == err.line() {
            offset = i;
            break;
        }
        if b == b'\n' {
            line += 1;
        }
    }
    (offset + err.column().saturating_sub(1)) as u64
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::format(path, 0, "empty file"));
    }
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(path, json_error_offset(&bytes, &e), e.to_string()))
}

pub(crate) fn decode_f32(path: &Path, bytes: &[u8], offset: u64, count: usize) -> Result<Vec<f32>> {
    let start = offset as usize;
    let end = start + count * 4;
    if end > bytes.len() {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("payload truncated: need bytes {start}..{end}, have {}", bytes.len()),
        ));
    }
    Ok(bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads a bank written by [`save_bank`].
pub fn load_bank(dir: &Path) -> Result<FeatureBank> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.dtype != "f32le" {
        return Err(Error::format(&mpath, 0, format!("unsupported dtype {}", manifest.dtype)));
    }
    let d = manifest.feature_dim;
    if d == 0
        || d != manifest.config.feature_dim
        || manifest.num_categories != manifest.config.num_categories
    {
        return Err(Error::format(&mpath, 0, "header dimensions disagree with config"));
    }
    if manifest.prototypes.len() != manifest.num_categories * d {
        return Err(Error::format(&mpath, 0, "prototype matrix size mismatch"));
    }
    let cpath = dir.join(CLIPS_FILE);
    let payload = fs::read(&cpath).map_err(|e| Error::io(&cpath, e))?;
    let mut clips: Vec<Vec<ClipFeatures>> = vec![Vec::new(); manifest.num_categories];
    let mut expected_offset = 0u64;
    for rec in &manifest.clips {
        if rec.byte_offset != expected_offset {
            return Err(Error::format(
                &cpath,
                rec.byte_offset,
                format!("clip record offset {} != expected {expected_offset}", rec.byte_offset),
            ));
        }
        if rec.category >= manifest.num_categories || rec.length == 0 {
            return Err(Error::format(&mpath, 0, "clip record out of range"));
        }
        let features = decode_f32(&cpath, &payload, rec.byte_offset, rec.length * d)?;
        expected_offset += (rec.length * d * 4) as u64;
        clips[rec.category].push(ClipFeatures {
            category: rec.category,
            dim: d,
            features,
        });
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::format(
            &cpath,
            expected_offset,
            format!(
                "payload has {} bytes, records describe {expected_offset}",
                payload.len()
            ),
        ));
    }
    FeatureBank::from_clips(manifest.config, manifest.prototypes, clips)
        .map_err(|e| Error::format(&mpath, 0, e.to_string()))
}

/// Default on-disk location of a bank inside a run directory.
pub fn bank_dir(root: &Path) -> PathBuf {
    root.join("bank")
}
