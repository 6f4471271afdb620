//! Generates a small clip bank and prints a few synthesized sequences as
//! text timelines: target instances as letters, background as dots.
//!
//! Optional args: number of samples, sequence length.

use ltp::featbank::{generate_bank, BankConfig};
use ltp::synthesis::{assign_scale_bucket, synthesize_indexed, SynthesisParams};

fn main() -> ltp::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let count = args.first().copied().unwrap_or(5);
    let len = args.get(1).copied().unwrap_or(96);
    let bank = generate_bank(&BankConfig { num_categories: 10, clips_per_category: 8, ..BankConfig::default() })?;
    let params = SynthesisParams { target_len: len, n_bg: 10, ..SynthesisParams::default() };
    println!(
        "bank: {} categories, {} clips, {}-dim features",
        bank.num_categories(),
        bank.iter_clips().count(),
        bank.feature_dim()
    );
    for i in 0..count as u64 {
        let s = synthesize_indexed(&bank, &params, i)?;
        let mut line = vec!['.'; s.len()];
        for inst in &s.instances {
            let mark = char::from(b'a' + (inst.ordinal as u8 - 1) % 26);
            line[inst.start..inst.end].iter_mut().for_each(|c| *c = mark);
        }
        println!("\nsample {i}: target category {}", s.target_category);
        println!("  {}", line.into_iter().collect::<String>());
        for inst in &s.instances {
            println!(
                "  #{} [{:3}, {:3})  r = {:.3}  scale {:?}",
                inst.ordinal,
                inst.start,
                inst.end,
                inst.r,
                assign_scale_bucket(inst.r)?
            );
        }
        let bg: Vec<usize> = s.background_spans.iter().map(|b| b.category).collect();
        println!("  background categories {bg:?}");
    }
    Ok(())
}
