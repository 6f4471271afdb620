mod common;

use common::{composite_norm_ref, grid_rank1_oracle, small_bank};
use ltp::analysis::{composite_norm, diversity, layer_diversity_profile, layer_diversity_profile_with, rank1_fit, rank1_residual};
use ltp::dataset::{generate_pretext_dataset, Dataset};
use ltp::nn::{AttnComponent, DetectionTransformer, Graph, ModelConfig, Tensor};
use ltp::synthesis::SynthesisParams;
use ltp::Error;
use proptest::prelude::*;
use proptest::strategy::ValueTree;

fn stochastic(n: usize, m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, m), n).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            })
            .collect()
    })
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

proptest! {
    #[test]
    fn norm_matches_reference(rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 1..6)) {
        prop_assert!((composite_norm(&tensor(&rows)) - composite_norm_ref(&rows)).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_have_zero_diversity(row in stochastic(1, 5), n in 1usize..8) {
        let rows = vec![row[0].clone(); n];
        prop_assert!(diversity(&tensor(&rows)).abs() < 1e-9);
    }

    #[test]
    fn row_permutation_leaves_diversity_unchanged(rows in stochastic(5, 4), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..5).collect();
        let mut s = seed;
        for i in (1..5).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        prop_assert!((diversity(&tensor(&rows)) - diversity(&tensor(&permuted))).abs() < 1e-12);
    }

    #[test]
    fn fit_beats_every_row(rows in stochastic(4, 3)) {
        let a = tensor(&rows);
        let best = rank1_residual(&a, &rank1_fit(&a));
        for r in &rows {
            prop_assert!(best <= rank1_residual(&a, r) + 1e-15);
        }
        prop_assert!(best >= 0.0);
    }
}

#[test]
fn heuristic_stays_near_the_grid_optimum() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    for _ in 0..25 {
        let rows = stochastic(3, 3).new_tree(&mut runner).unwrap().current();
        let (oracle, _) = grid_rank1_oracle(&rows, 0.01);
        let heuristic = diversity(&tensor(&rows));
        assert!(heuristic <= oracle + 0.02, "{heuristic} vs {oracle}");
    }
}

#[test]
fn identity_examples() {
    let id2 = tensor(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(rank1_fit(&id2), vec![0.5, 0.5]);
    assert!((diversity(&id2) - 1.0).abs() < 1e-12);
    let (oracle, _) = grid_rank1_oracle(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.01);
    assert!(oracle >= 1.0 - 1e-12);
    let id3 = tensor(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    assert!(diversity(&id3) > 0.0);
    assert!((composite_norm(&tensor(&[vec![1.0, 1.0], vec![0.0, 0.0]])) - 2f64.sqrt()).abs() < 1e-15);
}

fn tiny() -> (DetectionTransformer, Dataset) {
    let bank = small_bank(4, 0.3);
    let p = SynthesisParams { target_len: 32, n_bg: 4, n_max: 6, ..SynthesisParams::default() };
    let ds = generate_pretext_dataset(&bank, &p, 3, 0.0, false).unwrap();
    let cfg = ModelConfig { hidden_dim: 8, ffn_dim: 16, heads: 2, num_queries: 6, n_max: 6, ..ModelConfig::desk(16, 6) };
    (DetectionTransformer::new(cfg, 3).unwrap(), ds)
}

#[test]
fn profile_covers_every_capture_point() {
    let (model, ds) = tiny();
    let rep = layer_diversity_profile(&model, &ds, 2).unwrap();
    let c = model.config();
    assert_eq!(rep.layers.len(), c.encoder_layers + 2 * c.decoder_layers);
    assert_eq!(rep.per_video.len(), ds.len() * rep.layers.len());
    assert!(rep.layers.iter().all(|l| l.mean_diversity >= 0.0));
    let enc = rep.layers.iter().find(|l| l.tag.component == AttnComponent::EncoderSelf).unwrap();
    assert_eq!((enc.rows, enc.cols), (32, 32));
}

#[test]
fn profile_means_follow_the_videos() {
    let (model, ds) = tiny();
    let one = ds.subset(&[1]);
    let single = layer_diversity_profile(&model, &one, 4).unwrap();
    for l in &single.layers {
        let v = single.per_video.iter().find(|v| v.tag == l.tag).unwrap();
        assert_eq!(l.mean_diversity, v.diversity);
    }
    let base = layer_diversity_profile(&model, &ds, 4).unwrap();
    let doubled = ds.subset(&[0, 1, 2, 0, 1, 2]);
    let twice = layer_diversity_profile(&model, &doubled, 4).unwrap();
    for (a, b) in base.layers.iter().zip(&twice.layers) {
        assert!((a.mean_diversity - b.mean_diversity).abs() < 1e-12);
    }
}

#[test]
fn capture_must_be_enabled() {
    let (model, ds) = tiny();
    assert!(matches!(layer_diversity_profile_with(&model, &ds, 2, Graph::new), Err(Error::Usage(_))));
}

