//! End-to-end comparison of warm-started and scratch fine-tuning on the
//! synthetic benchmark, over several seeds and training fractions.

use serde::{Deserialize, Serialize};

use crate::analysis::layer_diversity_profile;
use crate::dataset::{generate_benchmark, BenchmarkConfig, Dataset};
use crate::error::Result;
use crate::evalkit::{dataset_ground_truth, predict_dataset, EvalProtocol, EvalReport};
use crate::featbank::{generate_bank, BankConfig, FeatureBank};
use crate::nn::{AttnComponent, AttnTag, DetectionTransformer, ModelConfig};
use crate::synthesis::SynthesisParams;
use crate::trainer::{finetune, pretrain, FinetuneInit, RunOptions, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub bank: BankConfig,
    pub benchmark: BenchmarkConfig,
    /// Pre-training synthesis; its category range should exclude the
    /// benchmark's target categories.
    pub synthesis: SynthesisParams,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub seeds: Vec<u64>,
    /// Pre-train a single model with the first seed and warm-start every
    /// seed from it, instead of pre-training once per seed.
    pub shared_pretrain: bool,
    pub fractions: Vec<f64>,
    pub protocol: EvalProtocol,
    pub top_k: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let bank = BankConfig::default();
        let benchmark = BenchmarkConfig::default();
        Self {
            synthesis: SynthesisParams {
                categories: Some(benchmark.background_categories),
                ..SynthesisParams::default()
            },
            model: ModelConfig::desk(bank.feature_dim, 32),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            seeds: vec![0, 1, 2],
            shared_pretrain: true,
            fractions: vec![1.0, 0.25],
            protocol: EvalProtocol::anet(),
            top_k: 100,
            bank,
            benchmark,
        }
    }
}

/// Outcome of one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub warm_start: bool,
    pub train_fraction: f64,
    pub average_map: f64,
    pub first_val_loss: Option<f64>,
    pub final_encoder_diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub pretrain_losses: Vec<f64>,
    pub arms: Vec<ArmResult>,
}

impl SeedResult {
    pub fn arm(&self, warm_start: bool, fraction: f64) -> Option<&ArmResult> {
        self.arms
            .iter()
            .find(|a| a.warm_start == warm_start && (a.train_fraction - fraction).abs() < 1e-12)
    }

    /// Warm-start minus scratch average mAP, in points.
    pub fn gap(&self, fraction: f64) -> Option<f64> {
        Some(100.0 * (self.arm(true, fraction)?.average_map - self.arm(false, fraction)?.average_map))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub seeds: Vec<SeedResult>,
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl StudyResult {
    /// Median over seeds of the warm-start arm's and the scratch arm's mAP.
    pub fn median_maps(&self, fraction: f64) -> (f64, f64) {
        let pick = |warm: bool| {
            median(
                self.seeds
                    .iter()
                    .filter_map(|s| s.arm(warm, fraction).map(|a| a.average_map))
                    .collect(),
            )
        };
        (pick(true), pick(false))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,init,train_fraction,average_map,first_val_loss,final_encoder_diversity\n");
        for r in &self.seeds {
            for a in &r.arms {
                s.push_str(&format!(
                    "{},{},{},{:.6},{},{:.6}\n",
                    r.seed,
                    if a.warm_start { "ltp" } else { "scratch" },
                    a.train_fraction,
                    a.average_map,
                    a.first_val_loss.map_or(String::new(), |v| format!("{v:.6}")),
                    a.final_encoder_diversity
                ));
            }
        }
        s
    }
}

/// Fine-tunes one arm and evaluates it on `test`.
pub fn run_arm(
    init: FinetuneInit,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    protocol: &EvalProtocol,
    top_k: usize,
) -> Result<(DetectionTransformer, ArmResult, EvalReport)> {
    let warm_start = matches!(init, FinetuneInit::Pretrained(_));
    let out = finetune(init, train, Some(test), cfg, &RunOptions::default())?;
    let model = out.state.model;
    let preds = predict_dataset(&model, test, cfg.batch_size, top_k)?;
    let report = EvalReport::compute(&preds, &dataset_ground_truth(test), protocol)?;
    let last = AttnTag {
        component: AttnComponent::EncoderSelf,
        layer: model.config().encoder_layers - 1,
    };
    let div = layer_diversity_profile(&model, test, cfg.batch_size)?;
    let arm = ArmResult {
        warm_start,
        train_fraction: cfg.train_fraction,
        average_map: report.map.average,
        first_val_loss: out.val_losses.first().map(|v| v.1),
        final_encoder_diversity: div.mean(last).unwrap_or(f64::NAN),
    };
    Ok((model, arm, report))
}

/// Pre-trains (once, or once per seed), then fine-tunes warm-started and
/// scratch models at every fraction. `progress` receives one line per
/// finished run.
pub fn run_study(cfg: &StudyConfig, mut progress: impl FnMut(&str)) -> Result<StudyResult> {
    let bank = generate_bank(&cfg.bank)?;
    let (train, test) = generate_benchmark(&bank, &cfg.benchmark)?;
    let mut shared = None;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        if shared.is_none() || !cfg.shared_pretrain {
            shared = Some(pretrain_seed(cfg, &bank, seed, &mut progress)?);
        }
        let (model, losses) = shared.as_ref().expect("pre-trained above");
        seeds.push(run_seed(cfg, model, losses, &train, &test, seed, &mut progress)?);
    }
    Ok(StudyResult { seeds })
}

fn pretrain_seed(
    cfg: &StudyConfig,
    bank: &FeatureBank,
    seed: u64,
    progress: &mut impl FnMut(&str),
) -> Result<(DetectionTransformer, Vec<f64>)> {
    let pcfg = TrainConfig { seed, ..cfg.pretrain.clone() };
    let pre = pretrain(bank, &cfg.synthesis, &cfg.model, &pcfg, &RunOptions::default())?;
    progress(&format!(
        "seed {seed}: pretrain loss {:.4} -> {:.4}",
        pre.epoch_losses.first().copied().unwrap_or(f64::NAN),
        pre.epoch_losses.last().copied().unwrap_or(f64::NAN)
    ));
    Ok((pre.state.model, pre.epoch_losses))
}

fn run_seed(
    cfg: &StudyConfig,
    pre: &DetectionTransformer,
    pretrain_losses: &[f64],
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    progress: &mut impl FnMut(&str),
) -> Result<SeedResult> {
    let mut arms = Vec::new();
    for &fraction in &cfg.fractions {
        let fcfg = TrainConfig {
            seed,
            train_fraction: fraction,
            ..cfg.finetune.clone()
        };
        for init in [FinetuneInit::Pretrained(pre), FinetuneInit::Scratch(&cfg.model)] {
            let (_, arm, _) = run_arm(init, train, test, &fcfg, &cfg.protocol, cfg.top_k)?;
            progress(&format!(
                "seed {seed} fraction {fraction} {}: avg mAP {:.2}, val1 {:.4}, enc diversity {:.4}",
                if arm.warm_start { "ltp" } else { "scratch" },
                100.0 * arm.average_map,
                arm.first_val_loss.unwrap_or(f64::NAN),
                arm.final_encoder_diversity
            ));
            arms.push(arm);
        }
    }
    Ok(SeedResult {
        seed,
        pretrain_losses: pretrain_losses.to_vec(),
        arms,
    })
}
