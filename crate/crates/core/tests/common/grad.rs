//! Small-model fixture for analytic-vs-numeric gradient checks.

use ltp::matching::{match_batch, set_loss_with, MatchCostConfig, Target};
use ltp::nn::gradcheck::{grad_check, sample_coordinates, GradCheckReport};
use ltp::nn::{Component, DetectionTransformer, Graph, ModelConfig, ParamStore, Tensor};
use ltp::rng;
use rand::Rng as _;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const COORDS: usize = 100;

struct Fixture {
    model: DetectionTransformer,
    seqs: Vec<Tensor>,
    task: Tensor,
    targets: Vec<Vec<Target>>,
}

fn fixture() -> Fixture {
    let cfg = ModelConfig {
        hidden_dim: 16,
        ffn_dim: 24,
        heads: 2,
        num_queries: 5,
        encoder_layers: 2,
        decoder_layers: 2,
        n_max: 4,
        num_classes: 2,
        ..ModelConfig::desk(6, 3)
    };
    let model = DetectionTransformer::new(cfg.clone(), 17).unwrap();
    let mut r = rng::rng_from_seed(5);
    let seqs = (0..2)
        .map(|_| Tensor::matrix(12, 6, (0..72).map(|_| r.random_range(-1.0..1.0)).collect()))
        .collect();
    let w = cfg.task_input_dim();
    let mut task = vec![0.0; 2 * w];
    task[0] = 1.0;
    task[w + 2] = 1.0;
    task[w + 3] = 1.0;
    task[w + 3 + 2] = 1.0;
    task[w + 3 + 4 + 3] = 1.0;
    let targets = vec![
        vec![Target { class: 0, center: 0.3, width: 0.2 }, Target { class: 1, center: 0.7, width: 0.1 }],
        vec![Target { class: 1, center: 0.5, width: 0.4 }],
    ];
    Fixture {
        model,
        seqs,
        task: Tensor::matrix(2, w, task),
        targets,
    }
}

pub fn check_component(c: Component) -> GradCheckReport {
    let mut f = fixture();
    let cfg = MatchCostConfig::default();
    // the assignment is held fixed so the loss is smooth in the parameters
    let assignments = {
        let mut g = Graph::new();
        let refs: Vec<&Tensor> = f.seqs.iter().collect();
        let out = f.model.forward(&mut g, &refs, Some(&f.task)).unwrap();
        match_batch(g.value(out.logits), g.value(out.boxes), &f.targets, &cfg).unwrap()
    };
    let coords = sample_coordinates(
        f.model.params(),
        |n| Component::of(n) == c,
        COORDS,
        &mut rng::rng_from_seed(c as u64 + 100),
    );
    assert_eq!(coords.len(), COORDS);
    let (seqs, task, targets) = (f.seqs.clone(), f.task.clone(), f.targets.clone());
    grad_check(
        &mut f.model,
        |m| m.params_mut(),
        |m, g| {
            let refs: Vec<&Tensor> = seqs.iter().collect();
            let out = m.forward(g, &refs, Some(&task))?;
            set_loss_with(g, out.logits, out.boxes, &targets, &assignments, &cfg)
        },
        &coords,
        H,
    )
    .unwrap()
}

pub fn assert_ok(name: &str, rep: &GradCheckReport) {
    let e = rep.max_rel_error();
    assert!(e < TOLERANCE, "{name}: max relative error {e:e} at {:?}", rep.worst());
}

pub fn check_set_loss() -> GradCheckReport {
    let mut r = rng::rng_from_seed(9);
    let mut store = ParamStore::new();
    store.register("logits", Tensor::matrix(10, 3, (0..30).map(|_| r.random_range(-2.0..2.0)).collect()));
    store.register("boxes", Tensor::matrix(10, 2, (0..20).map(|_| r.random_range(0.15..0.6)).collect()));
    let targets = vec![
        vec![Target { class: 0, center: 0.3, width: 0.25 }, Target { class: 1, center: 0.55, width: 0.3 }],
        vec![Target { class: 1, center: 0.45, width: 0.35 }],
    ];
    let cfg = MatchCostConfig::default();
    let ids: Vec<_> = store.ids().collect();
    let asg = match_batch(store.value(ids[0]), store.value(ids[1]), &targets, &cfg).unwrap();
    let coords = sample_coordinates(&store, |_| true, COORDS, &mut r);
    grad_check(
        &mut store,
        |s| s,
        |s, g| {
            let l = g.param(s, ids[0]);
            let b = g.param(s, ids[1]);
            set_loss_with(g, l, b, &targets, &asg, &cfg)
        },
        &coords,
        H,
    )
    .unwrap()
}
