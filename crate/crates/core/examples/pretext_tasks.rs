//! Draws pretext conditions for synthesized samples and shows their one-hot
//! encodings and the ground truth each condition keeps.

use ltp::featbank::{generate_bank, BankConfig};
use ltp::pretext::{decode_condition, encode_condition, filter_targets, sample_condition};
use ltp::rng;
use ltp::synthesis::{synthesize_indexed, SynthesisParams};

fn bits(v: &[f64]) -> String {
    v.iter().map(|&x| if x > 0.5 { '1' } else { '0' }).collect()
}

fn main() -> ltp::Result<()> {
    let bank = generate_bank(&BankConfig { num_categories: 6, clips_per_category: 6, ..BankConfig::default() })?;
    let params = SynthesisParams { target_len: 96, n_bg: 8, n_max: 6, n_t_range: [2, 6], ..SynthesisParams::default() };
    let mut r = rng::rng_from_seed(3);
    for i in 0..6 {
        let s = synthesize_indexed(&bank, &params, i)?;
        let cond = sample_condition(&s, 1.0, false, &mut r);
        let cv = encode_condition(&cond, 0, bank.num_categories(), params.n_max)?;
        assert_eq!(decode_condition(&cv, 0, params.n_max)?, cond);
        let kept: Vec<usize> = filter_targets(&s.instances, &cond).iter().map(|x| x.ordinal).collect();
        println!(
            "sample {i}: {} instances, ordinal {:?}, scale {:?}",
            s.instances.len(),
            cond.ordinal,
            cond.scale
        );
        println!("  z_b {}  z_o {}  z_s {}", bits(&cv.z_b), bits(&cv.z_o), bits(&cv.z_s));
        println!("  keeps instances {kept:?}");
    }
    Ok(())
}
