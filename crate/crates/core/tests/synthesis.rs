mod common;

use common::{audit_sample as audit, nearest_prototype, small_bank, timeline_union};
use ltp::featbank::ClipFeatures;
use ltp::rng;
use ltp::synthesis::{
    assign_scale_bucket, build_background, crop_random, merge_overlaps, sample_targets, synthesize_indexed,
    synthesize_many, ScaleBucket, SynthesisParams, SynthesizedSample,
};
use proptest::prelude::*;

fn params(seed: u64) -> SynthesisParams {
    SynthesisParams {
        target_len: 64,
        n_bg: 6,
        seed,
        ..SynthesisParams::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn samples_satisfy_label_invariants(seed in any::<u64>(), index in 0u64..1000) {
        let bank = small_bank(3, 0.3);
        let p = params(seed);
        let s = synthesize_indexed(&bank, &p, index).unwrap();
        prop_assert_eq!(audit(&s, &p), Ok(()));
    }

    #[test]
    fn merge_equals_timeline_union(spans in proptest::collection::vec((0usize..60, 1usize..12), 0..8)) {
        let spans: Vec<(usize, usize)> = spans.into_iter().map(|(s, w)| (s, (s + w).min(64))).collect();
        prop_assert_eq!(merge_overlaps(&spans), timeline_union(&spans, 64));
    }

    #[test]
    fn crops_are_verbatim_slices(seed in any::<u64>(), lo in 0.25f64..1.0) {
        let bank = small_bank(5, 0.3);
        let clip = &bank.clips(1).unwrap()[0];
        let mut r = rng::rng_from_seed(seed);
        let c = crop_random(clip, [lo, 1.0], &mut r).unwrap();
        let t = clip.len();
        prop_assert!(c.len() >= (lo * t as f64).round() as usize && c.len() <= t);
        let found = (0..=t - c.len()).any(|s| clip.slice(s, s + c.len()).data() == c.data());
        prop_assert!(found);
    }

    #[test]
    fn scale_bucket_thresholds(r in 0.0001f64..=1.0) {
        let b = assign_scale_bucket(r).unwrap();
        let expect = if r < 0.25 { ScaleBucket::XS } else if r < 0.5 { ScaleBucket::S } else if r < 0.75 { ScaleBucket::L } else { ScaleBucket::XL };
        prop_assert_eq!(b, expect);
    }
}

#[test]
fn bucket_boundaries_and_domain() {
    assert_eq!(assign_scale_bucket(0.10).unwrap(), ScaleBucket::XS);
    assert_eq!(assign_scale_bucket(0.25).unwrap(), ScaleBucket::S);
    assert_eq!(assign_scale_bucket(0.75).unwrap(), ScaleBucket::XL);
    assert!(assign_scale_bucket(0.0).is_err());
    assert!(assign_scale_bucket(1.5).is_err());
}

#[test]
fn merge_examples() {
    assert_eq!(merge_overlaps(&[(0, 10), (5, 15)]), vec![(0, 15)]);
    assert_eq!(merge_overlaps(&[(0, 5), (10, 15)]), vec![(0, 5), (10, 15)]);
    assert_eq!(merge_overlaps(&[(0, 4), (3, 8), (7, 12)]), vec![(0, 12)]);
    assert!(merge_overlaps(&[]).is_empty());
}

#[test]
fn crop_lengths_stay_in_bounds() {
    let clip = ClipFeatures::new(0, 2, (0..32).map(|x| x as f32).collect()).unwrap();
    let mut r = rng::rng_from_seed(1);
    for _ in 0..1000 {
        let c = crop_random(&clip, [0.25, 1.0], &mut r).unwrap();
        assert!((4..=16).contains(&c.len()));
    }
    let full = crop_random(&clip, [1.0, 1.0], &mut r).unwrap();
    assert_eq!(full.data(), clip.data());
}

#[test]
fn background_excludes_the_target_and_is_deterministic() {
    let bank = small_bank(8, 0.0);
    for k in 0..bank.num_categories() {
        let (f, spans) = build_background(&bank, k, 5, 64, &mut rng::rng_from_seed(k as u64)).unwrap();
        assert_eq!(f.len(), 64 * bank.feature_dim());
        assert!(spans.iter().all(|s| s.category != k));
        let d = bank.feature_dim();
        // every span is a verbatim prefix of some clip of its stated category
        for sp in &spans {
            let got = &f[sp.start * d..sp.end * d];
            let clips = bank.clips(sp.category).unwrap();
            assert!(clips.iter().any(|c| c.len() >= sp.end - sp.start && &c.data()[..got.len()] == got));
            assert!(bank.clips(k).unwrap().iter().all(|c| c.len() < sp.end - sp.start || &c.data()[..got.len()] != got));
        }
        let (g, _) = build_background(&bank, k, 5, 64, &mut rng::rng_from_seed(k as u64)).unwrap();
        assert_eq!(f, g);
    }
}

#[test]
fn target_clips_share_the_category_and_zero_is_rejected() {
    let bank = small_bank(2, 0.3);
    let mut r = rng::rng_from_seed(0);
    let t = sample_targets(&bank, 4, 3, &mut r).unwrap();
    assert_eq!(t.len(), 3);
    assert!(t.iter().all(|c| c.category == 4));
    assert!(sample_targets(&bank, 4, 0, &mut r).is_err());
}

#[test]
fn target_draws_are_uniform_over_clips() {
    let bank = small_bank(2, 0.3);
    let clips = bank.clips(1).unwrap();
    let mut counts = vec![0usize; clips.len()];
    let mut r = rng::rng_from_seed(42);
    let n = 10_000;
    for c in sample_targets(&bank, 1, n, &mut r).unwrap() {
        let i = clips.iter().position(|x| x.data() == c.data()).unwrap();
        counts[i] += 1;
    }
    let e = n as f64 / clips.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 7 degrees of freedom: mean 7, sd sqrt(14)
    assert!(chi2 < 7.0 + 3.0 * 14f64.sqrt(), "chi2 {chi2}");
}

#[test]
fn target_rows_are_nearest_to_the_target_prototype() {
    let bank = small_bank(11, 0.0);
    let p = params(4);
    for i in 0..50 {
        let s = synthesize_indexed(&bank, &p, i).unwrap();
        for t in 0..s.len() {
            let inside = s.instances.iter().any(|x| x.start <= t && t < x.end);
            let k = nearest_prototype(&bank, s.row(t));
            assert_eq!(k == s.target_category, inside, "sample {i} step {t}");
        }
    }
}

#[test]
fn parallel_generation_is_bit_identical_to_serial() {
    let bank = small_bank(6, 0.3);
    let p = params(99);
    let idx: Vec<u64> = (0..64).collect();
    let par = synthesize_many(&bank, &p, &idx).unwrap();
    let ser: Vec<SynthesizedSample> = idx.iter().map(|&i| synthesize_indexed(&bank, &p, i).unwrap()).collect();
    assert_eq!(par, ser);
}
