//! Pre-trains on synthesized sequences, then compares warm-started and
//! scratch fine-tuning on the held-out-category benchmark.
//!
//! Optional args: pretrain samples per epoch, pretrain epochs, finetune
//! epochs, number of seeds.

use std::time::Instant;

use ltp::study::{run_study, StudyConfig};

fn main() -> ltp::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cfg = StudyConfig::default();
    if let Some(&n) = args.first() {
        cfg.pretrain.samples_per_epoch = n;
    }
    if let Some(&e) = args.get(1) {
        cfg.pretrain.epochs = e;
    }
    if let Some(&e) = args.get(2) {
        cfg.finetune.epochs = e;
    }
    if let Some(&s) = args.get(3) {
        cfg.seeds = (0..s as u64).collect();
    }
    let start = Instant::now();
    let res = run_study(&cfg, |line| println!("[{:7.1}s] {line}", start.elapsed().as_secs_f64()))?;
    for &f in &cfg.fractions {
        let (ltp, scratch) = res.median_maps(f);
        println!("fraction {f}: median avg mAP ltp {:.2} scratch {:.2}", 100.0 * ltp, 100.0 * scratch);
    }
    print!("{}", res.to_csv());
    Ok(())
}
