use izoo_autograd::{grad_check, Tape};
use izoo_core::downstream::{forward, predict_logits, train_joint, ToyDataset, ToyModel, TrainConfig};
use izoo_core::tokenizer::{build_grouping, Strategy};
use izoo_core::{Arch, Inr2d};

fn random_data(n: usize, classes: usize) -> ToyDataset {
    ToyDataset {
        height: 8,
        width: 8,
        classes,
        items: (0..n)
            .map(|i| (Inr2d::siren_init(Arch::new(2, 8), 40 + i as u64).unwrap(), i % classes))
            .collect(),
    }
}

fn quick_cfg(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        epochs: 3,
        batch: 2,
        lr: 1e-2,
        embed: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_gradient_in_raw_coordinates_matches_finite_differences() {
    let data = random_data(3, 3);
    let fields: Vec<&Inr2d> = data.items.iter().map(|(f, _)| f).collect();
    let labels: Vec<usize> = data.items.iter().map(|(_, l)| *l).collect();
    for strategy in [Strategy::LearnablePixels, Strategy::LearnableCentersScale] {
        let g = build_grouping(strategy, 8, 8, 4, 1).unwrap();
        let model = ToyModel::init(g.tokens(), g.per_token() * 3, 8, 3, 2).unwrap();
        let report = grad_check(
            |tape, raw| {
                let vars = model.bind(tape, false);
                let coords = g.activate(tape, raw).unwrap();
                let logits = forward(tape, &fields, &g, coords, &vars).unwrap();
                tape.softmax_cross_entropy(logits, &labels)
            },
            &g.raw_tensor(),
            1e-7,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{strategy}: {:e}", report.max_rel_error);
    }
}

#[test]
fn identical_fields_give_identical_logits() {
    let inr = Inr2d::siren_init(Arch::new(2, 8), 3).unwrap();
    let other = Inr2d::siren_init(Arch::new(2, 8), 4).unwrap();
    let g = build_grouping(Strategy::LearnablePixels, 8, 8, 4, 0).unwrap();
    let model = ToyModel::init(g.tokens(), g.per_token() * 3, 8, 2, 0).unwrap();
    let mut tape = Tape::<f64>::new();
    let vars = model.bind(&mut tape, false);
    let raw = tape.constant(g.raw_tensor());
    let coords = g.activate(&mut tape, raw).unwrap();
    let logits = forward(&mut tape, &[&inr, &other, &inr], &g, coords, &vars).unwrap();
    let v = tape.value(logits).data().to_vec();
    assert_eq!(v[0..2], v[4..6]);
    assert_ne!(v[0..2], v[2..4]);
    // Batched and single-item paths agree.
    let single = predict_logits(&model, &g, &inr).unwrap();
    assert_eq!(single, v[0..2]);
}

#[test]
fn uniform_coordinates_never_move() {
    let data = random_data(8, 2);
    let before = build_grouping(Strategy::Uniform, 8, 8, 4, 0).unwrap().activated();
    let state = train_joint(
        &data,
        &TrainConfig {
            trajectory: true,
            ..quick_cfg(Strategy::Uniform)
        },
    )
    .unwrap();
    assert_eq!(state.grouping.activated(), before);
    assert!(state.trajectory.iter().all(|t| *t == before));
    assert!(state.metrics.iter().all(|m| m.violating_pairs == state.metrics[0].violating_pairs));
}

#[test]
fn learnable_coordinates_move_after_training() {
    let data = random_data(8, 2);
    let init = build_grouping(Strategy::LearnablePixels, 8, 8, 4, 0).unwrap();
    let state = train_joint(
        &data,
        &TrainConfig {
            epochs: 1,
            ..quick_cfg(Strategy::LearnablePixels)
        },
    )
    .unwrap();
    assert_ne!(state.grouping.raw(), init.raw());
    assert_eq!(state.metrics.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let data = random_data(8, 2);
    let cfg = quick_cfg(Strategy::LearnablePixels);
    let a = train_joint(&data, &cfg).unwrap();
    let b = train_joint(&data, &cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model, b.model);
    assert_eq!(a.grouping.raw(), b.grouping.raw());
    let c = train_joint(&data, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn bad_configs_are_rejected() {
    let data = random_data(4, 2);
    let cfg = quick_cfg(Strategy::Uniform);
    assert!(train_joint(&data, &TrainConfig { batch: 0, ..cfg.clone() }).is_err());
    assert!(train_joint(&data, &TrainConfig { lr: 0.0, ..cfg.clone() }).is_err());
    assert!(train_joint(&random_data(0, 2), &cfg).is_err());
}
