//! Attention-collapse measure on hand-made maps, then the per-layer profile
//! of an untrained model on a few synthesized sequences.

use ltp::analysis::{composite_norm, diversity, layer_diversity_profile, rank1_fit};
use ltp::dataset::generate_pretext_dataset;
use ltp::featbank::{generate_bank, BankConfig};
use ltp::nn::{DetectionTransformer, ModelConfig, Tensor};
use ltp::synthesis::SynthesisParams;

fn main() -> ltp::Result<()> {
    let maps = [
        ("uniform", Tensor::from_rows(&[vec![0.25; 4], vec![0.25; 4], vec![0.25; 4]])?),
        ("identity", Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])?),
        ("peaked", Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.6, 0.3, 0.1], vec![0.1, 0.1, 0.8]])?),
    ];
    for (name, a) in &maps {
        let fit: Vec<String> = rank1_fit(a).iter().map(|x| format!("{x:.3}")).collect();
        println!("{name:>8}: norm {:.3}  d(A) {:.3}  a = [{}]", composite_norm(a), diversity(a), fit.join(", "));
    }

    let bank = generate_bank(&BankConfig { num_categories: 6, clips_per_category: 6, ..BankConfig::default() })?;
    let params = SynthesisParams { target_len: 64, n_bg: 6, ..SynthesisParams::default() };
    let ds = generate_pretext_dataset(&bank, &params, 4, 0.0, false)?;
    let model = DetectionTransformer::new(ModelConfig::desk(bank.feature_dim(), 6), 0)?;
    let rep = layer_diversity_profile(&model, &ds, 4)?;
    print!("\n{}", rep.to_csv());
    Ok(())
}
