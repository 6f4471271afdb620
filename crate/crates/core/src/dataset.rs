//! On-disk datasets of synthesized sequences and the downstream benchmark.
//!
//! A dataset directory holds `samples.bin` (binary32 rows, as in a bank's
//! `clips.bin`), `labels.jsonl` with one record per sample and
//! `dataset_manifest.json`.

use std::fs;
use std::io::{BufRead as _, BufReader};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featbank::{decode_f32, read_json, write_file, FeatureBank};
use crate::pretext::{sample_condition, Condition, ConditionRecord};
use crate::rng::{self, tag};
use crate::synthesis::{
    synthesize_from, ActionInstance, BackgroundSpan, ClipSource, SynthesisParams, SynthesizedSample,
};

pub const SAMPLES_FILE: &str = "samples.bin";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const MANIFEST_FILE: &str = "dataset_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// `pretext`, `train` or `test`.
    pub kind: String,
    pub params: SynthesisParams,
    pub master_seed: u64,
    pub count: usize,
    pub feature_dim: usize,
    /// Bank category that maps to class 0.
    pub category_offset: usize,
    /// Number of classes labels are drawn from.
    pub num_classes: usize,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SynthesizedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<_> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset {
            manifest: DatasetManifest {
                count: samples.len(),
                ..self.manifest.clone()
            },
            samples,
        }
    }

    /// Class index of a bank category.
    pub fn class_of(&self, category: usize) -> usize {
        category - self.manifest.category_offset
    }
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    #[serde(rename = "k*")]
    target_category: usize,
    instances: Vec<ActionInstance>,
    condition: ConditionRecord,
    background_spans: Vec<BackgroundSpan>,
    offset: u64,
    length: usize,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut payload = Vec::new();
    let mut labels = String::new();
    for s in &dataset.samples {
        let rec = LabelRecord {
            target_category: s.target_category,
            instances: s.instances.clone(),
            condition: s.condition.record(),
            background_spans: s.background_spans.clone(),
            offset: payload.len() as u64,
            length: s.len(),
        };
        for x in &s.features {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        labels.push_str(&serde_json::to_string(&rec).expect("label serializes"));
        labels.push('\n');
    }
    write_file(&dir.join(SAMPLES_FILE), &payload)?;
    write_file(&dir.join(LABELS_FILE), labels.as_bytes())?;
    let json = serde_json::to_vec_pretty(&dataset.manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &json)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::Config(format!("no dataset at {}", dir.display())));
    }
    let manifest: DatasetManifest = read_json(&mpath)?;
    let d = manifest.feature_dim;
    if d == 0 || manifest.dtype != "f32le" {
        return Err(Error::format(&mpath, 0, "bad feature_dim or dtype"));
    }
    let spath = dir.join(SAMPLES_FILE);
    let payload = fs::read(&spath).map_err(|e| Error::io(&spath, e))?;
    let lpath = dir.join(LABELS_FILE);
    let file = fs::File::open(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let mut samples = Vec::with_capacity(manifest.count);
    let mut byte = 0u64;
    let mut expected = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&lpath, e))?;
        let line_start = byte;
        byte += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| {
            Error::format(&lpath, line_start + e.column().saturating_sub(1) as u64, e.to_string())
        })?;
        if rec.offset != expected {
            return Err(Error::format(&spath, rec.offset, format!("sample offset != {expected}")));
        }
        let features = decode_f32(&spath, &payload, rec.offset, rec.length * d)?;
        expected += (rec.length * d * 4) as u64;
        samples.push(SynthesizedSample {
            features,
            dim: d,
            target_category: rec.target_category,
            instances: rec.instances,
            background_spans: rec.background_spans,
            condition: Condition::from_record(rec.target_category, &rec.condition),
        });
    }
    if samples.len() != manifest.count {
        return Err(Error::format(&lpath, byte, format!("{} labels, manifest says {}", samples.len(), manifest.count)));
    }
    if expected != payload.len() as u64 {
        return Err(Error::format(&spath, expected, "payload size disagrees with labels"));
    }
    Ok(Dataset { manifest, samples })
}

/// Pre-training samples `0..count` with conditions drawn at `p_cond`.
pub fn generate_pretext_dataset(
    bank: &FeatureBank,
    params: &SynthesisParams,
    count: usize,
    p_cond: f64,
    allow_joint: bool,
) -> Result<Dataset> {
    let indices: Vec<u64> = (0..count as u64).collect();
    let mut samples = crate::synthesis::synthesize_many(bank, params, &indices)?;
    for (i, s) in samples.iter_mut().enumerate() {
        let mut r = condition_stream(params.seed, i as u64);
        s.condition = sample_condition(s, p_cond, allow_joint, &mut r);
    }
    let [lo, hi] = params.category_range(bank);
    Ok(Dataset {
        manifest: DatasetManifest {
            kind: "pretext".into(),
            params: params.clone(),
            master_seed: params.seed,
            count,
            feature_dim: bank.feature_dim(),
            category_offset: lo,
            num_classes: hi - lo,
            dtype: "f32le".into(),
        },
        samples,
    })
}

/// Random stream for the condition of sample `index`.
pub fn condition_stream(seed: u64, index: u64) -> rng::Rng {
    rng::stream(rng::mix64(seed, tag::COND), index)
}

/// Downstream benchmark: untrimmed sequences of held-out categories on a
/// background of pre-training categories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    /// Half-open range of action categories.
    pub target_categories: [usize; 2],
    /// Half-open range of background categories.
    pub background_categories: [usize; 2],
    pub synthesis: SynthesisParams,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            train_videos: 200,
            test_videos: 100,
            target_categories: [32, 40],
            background_categories: [0, 32],
            synthesis: SynthesisParams {
                n_t_range: [1, 8],
                ..SynthesisParams::default()
            },
            seed: 23,
        }
    }
}

impl BenchmarkConfig {
    pub fn num_classes(&self) -> usize {
        self.target_categories[1].saturating_sub(self.target_categories[0])
    }

    pub fn validate(&self, bank: &FeatureBank) -> Result<()> {
        let [tl, th] = self.target_categories;
        let [bl, bh] = self.background_categories;
        if th <= tl || bh <= bl || th > bank.num_categories() || bh > bank.num_categories() {
            return Err(Error::Config("benchmark category ranges are empty or outside the bank".into()));
        }
        if tl < bh && bl < th {
            return Err(Error::Config("target and background categories overlap".into()));
        }
        if self.train_videos == 0 || self.test_videos == 0 {
            return Err(Error::Config("benchmark splits must be non-empty".into()));
        }
        let mut p = self.synthesis.clone();
        p.categories = None;
        p.validate(bank)?;
        for k in tl..th {
            if bank.clips(k)?.len() < 2 {
                return Err(Error::Config(format!("category {k} needs two clips to split train/test")));
            }
        }
        Ok(())
    }
}

/// Train and test splits. Train videos draw from the first half of every
/// category's clips and test videos from the second half.
pub fn generate_benchmark(bank: &FeatureBank, cfg: &BenchmarkConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate(bank)?;
    let split = |first_half: bool, range: [usize; 2]| -> Result<ClipSource> {
        let categories = (range[0]..range[1])
            .map(|k| {
                let clips = bank.clips(k)?;
                let h = clips.len().div_ceil(2);
                Ok((k, if first_half { &clips[..h] } else { &clips[h..] }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipSource { categories })
    };
    let make = |kind: &str, split_id: u64, count: usize| -> Result<Dataset> {
        let first = split_id == 0;
        let targets = split(first, cfg.target_categories)?;
        let background = split(first, cfg.background_categories)?;
        let seed = rng::mix64(cfg.seed, tag::BENCH);
        let samples = (0..count)
            .into_par_iter()
            .map(|v| {
                let mut r = rng::stream(rng::mix64(seed, split_id), v as u64);
                let k = r.random_range(cfg.target_categories[0]..cfg.target_categories[1]);
                synthesize_from(&targets, &background, k, &cfg.synthesis, bank.feature_dim(), &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest: DatasetManifest {
                kind: kind.into(),
                params: cfg.synthesis.clone(),
                master_seed: cfg.seed,
                count,
                feature_dim: bank.feature_dim(),
                category_offset: cfg.target_categories[0],
                num_classes: cfg.num_classes(),
                dtype: "f32le".into(),
            },
            samples,
        })
    };
    Ok((make("train", 0, cfg.train_videos)?, make("test", 1, cfg.test_videos)?))
}
