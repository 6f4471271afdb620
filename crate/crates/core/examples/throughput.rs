//! Times one training-style forward/backward pass of the desk model.

use std::time::Instant;

use ltp::nn::{DetectionTransformer, Graph, ModelConfig, Tensor};

fn main() -> ltp::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let len = args.first().copied().unwrap_or(192);
    let batch = args.get(1).copied().unwrap_or(8);
    let hidden = args.get(2).copied().unwrap_or(64);
    let mut cfg = ModelConfig::desk(64, 32);
    cfg.hidden_dim = hidden;
    cfg.ffn_dim = 2 * hidden;
    let mut model = DetectionTransformer::new(cfg, 0)?;
    let seqs: Vec<Tensor> = (0..batch)
        .map(|b| Tensor::matrix(len, 64, (0..len * 64).map(|i| ((i + b) as f64 * 0.37).sin()).collect()))
        .collect();
    let refs: Vec<&Tensor> = seqs.iter().collect();
    let reps = 5;
    let start = Instant::now();
    let mut fwd = 0.0;
    for _ in 0..reps {
        let t = Instant::now();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &refs, None)?;
        let a = g.sum(out.logits);
        let b = g.sum(out.boxes);
        let s = g.add(a, b)?;
        fwd += t.elapsed().as_secs_f64();
        g.backward(s, model.params_mut())?;
    }
    println!("forward share {:.0}%", 100.0 * fwd / start.elapsed().as_secs_f64());
    let per_sample = start.elapsed().as_secs_f64() / (reps * batch) as f64;
    println!(
        "len={len} batch={batch} hidden={hidden}: {:.2} ms per sample (fwd+bwd), {} params",
        per_sample * 1e3,
        model.params().num_scalars()
    );
    Ok(())
}
