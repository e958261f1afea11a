use super::*;
use crate::data::{make_windows, RawSeries};
use crate::engine::{Gradients, ParamSet};
use crate::loss::QuantileSet;
use crate::models::{build_model, Family, ModelSpec};

/// Gradients equal to `values` for each parameter, via `loss = sum(p * c)`.
fn constant_grads(params: &ParamSet, values: &[Tensor]) -> Gradients {
    let mut g = Graph::with_params(params);
    let mut total = None;
    for (id, c) in params.ids().zip(values) {
        let p = g.param(id);
        let c = g.input(c.clone());
        let prod = g.hadamard(p, c).unwrap();
        let s = g.reduce_sum(prod).unwrap();
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s).unwrap(),
        });
    }
    g.backward(total.unwrap()).unwrap()
}

fn scalar_params(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.add("theta", Tensor::from_vec(&[1], vec![v]).unwrap());
    p
}

fn sine_dataset(n: usize, d: usize, m: usize, seed: u64) -> WindowedDataset {
    let values = (0..n).map(|t| (0.3 * t as f64).sin()).collect();
    make_windows(&RawSeries::univariate("sine", "Value", values), d, m, "Value")
        .unwrap()
        .normalize_and_split(seed)
        .unwrap()
}

#[test]
fn zero_gradient_changes_nothing() {
    let mut params = scalar_params(0.7);
    let mut state = AdamState::new(&params, 1e-3);
    let grads = constant_grads(&params, &[Tensor::zeros(&[1]).unwrap()]);
    for _ in 0..5 {
        adam_step(&mut params, &grads, &mut state).unwrap();
    }
    assert_eq!(params.get(params.find("theta").unwrap()).data(), &[0.7]);
    assert_eq!(state.m[0].data(), &[0.0]);
    assert_eq!(state.v[0].data(), &[0.0]);
    assert_eq!(state.t, 5);
}

#[test]
fn first_step_moves_by_learning_rate() {
    let mut params = scalar_params(0.0);
    let mut state = AdamState::new(&params, 1e-4);
    let grads = constant_grads(&params, &[Tensor::from_vec(&[1], vec![1.0]).unwrap()]);
    adam_step(&mut params, &grads, &mut state).unwrap();
    // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    let moved = params.get(params.find("theta").unwrap()).data()[0];
    assert!((moved + 1e-4).abs() < 1e-6 * 1e-4);
}

#[test]
fn constant_gradient_step_tends_to_lr_sign() {
    let mut params = scalar_params(0.0);
    let lr = 1e-3;
    let mut state = AdamState::new(&params, lr);
    let g = -0.03;
    let grads = constant_grads(&params, &[Tensor::from_vec(&[1], vec![g]).unwrap()]);
    let mut last = 0.0;
    let mut step = 0.0;
    for _ in 0..2000 {
        adam_step(&mut params, &grads, &mut state).unwrap();
        let now = params.get(params.find("theta").unwrap()).data()[0];
        step = now - last;
        last = now;
    }
    assert!((step - lr).abs() < 1e-6 * lr, "{step}");
}

#[test]
fn nan_gradient_names_parameter() {
    let mut params = scalar_params(0.0);
    params.add("bias", Tensor::zeros(&[2]).unwrap());
    let mut state = AdamState::new(&params, 1e-3);
    let grads = Gradients::from_tensors(vec![
        Tensor::from_vec(&[1], vec![1.0]).unwrap(),
        Tensor::from_vec(&[2], vec![0.0, f64::NAN]).unwrap(),
    ]);
    match adam_step(&mut params, &grads, &mut state) {
        Err(TrainError::Numerical { param }) => assert_eq!(param, "bias"),
        other => panic!("{other:?}"),
    }
    assert_eq!(state.t, 0);
}

#[test]
fn linear_model_fits_exact_linear_data() {
    // a sinusoid obeys x[t+1] = 2 cos(w) x[t] - x[t-1], so future values are
    // exactly linear in the window
    let ds = sine_dataset(200, 4, 2, 0);
    let spec = ModelSpec::new(Family::Linear, 1, 4, 2).with_quantiles(QuantileSet::median_only());
    let model = build_model(&spec, &mut SeededRng::new(1)).unwrap();
    let config = TrainConfig {
        epochs: 2000,
        batch_size: ds.train_indices().len(),
        learning_rate: 1e-2,
        loss: LossKind::Mse,
        ..Default::default()
    };
    let out = train(model, &ds, &config).unwrap();
    assert_eq!(out.trace.len(), 2000);
    let mse = loss_eval(&out.model, &ds, ds.train_indices(), LossKind::Mse, 64).unwrap();
    assert!(mse.total < 1e-6, "{}", mse.total);
}

#[test]
fn zero_epochs_is_config_error() {
    let ds = sine_dataset(50, 4, 2, 0);
    let spec = ModelSpec::new(Family::Linear, 1, 4, 2);
    let model = build_model(&spec, &mut SeededRng::new(1)).unwrap();
    let config = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    assert!(matches!(train(model, &ds, &config), Err(TrainError::Config(_))));
}

#[test]
fn mse_needs_single_output() {
    let ds = sine_dataset(50, 4, 2, 0);
    let model = build_model(&ModelSpec::new(Family::Linear, 1, 4, 2), &mut SeededRng::new(1)).unwrap();
    let config = TrainConfig {
        loss: LossKind::Mse,
        ..Default::default()
    };
    assert!(matches!(train(model, &ds, &config), Err(TrainError::Config(_))));
}

#[test]
fn same_seed_same_trace_bits() {
    let ds = sine_dataset(120, 5, 3, 2);
    let spec = ModelSpec::new(Family::EdLstm, 1, 5, 3).with_hidden(6, 6);
    let config = TrainConfig {
        epochs: 4,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let model = build_model(&spec, &mut SeededRng::new(3)).unwrap();
        train(model, &ds, &config).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.trace), bits(&b.trace));
    assert_eq!(a.model, b.model);
    assert!(a.trace.iter().all(|v| v.is_finite()));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = sine_dataset(100, 4, 2, 4);
    let spec = ModelSpec::new(Family::Lstm, 1, 4, 2).with_hidden(5, 4);
    let config = TrainConfig {
        epochs: 6,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 5,
        checkpoint_every: Some(3),
        lr_decay: Some(0.9),
        ..Default::default()
    };
    let model = build_model(&spec, &mut SeededRng::new(6)).unwrap();
    let mut saved = Vec::new();
    let full = train_from(
        TrainingState::new(model, &config),
        &ds,
        &config,
        &mut |s| {
            saved.push(s.to_checkpoint_string());
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(saved.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    std::fs::write(&path, &saved[0]).unwrap();
    let halfway = TrainingState::load(&path).unwrap();
    assert_eq!(halfway.epoch, 3);
    let resumed = train_from(halfway, &ds, &config, &mut |_| Ok(())).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(resumed.to_checkpoint_string(), full.to_checkpoint_string());
}

#[test]
fn overflow_reports_divergence_with_last_good_model() {
    let ds = sine_dataset(60, 4, 2, 0);
    let spec = ModelSpec::new(Family::Lstm, 1, 4, 2).with_hidden(3, 3);
    let mut model = build_model(&spec, &mut SeededRng::new(1)).unwrap();
    let w = model.params().find("head.w").unwrap();
    model.params_mut().get_mut(w).data_mut().fill(1e308);
    let initial = model.clone();
    match train(model, &ds, &TrainConfig::default()) {
        Err(TrainError::TrainingDiverged { epoch, last_good }) => {
            assert_eq!(epoch, 0);
            assert_eq!(*last_good, initial);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_head_on_zero_targets_has_zero_loss() {
    let values: Vec<f64> = (0..30).map(|t| if t % 7 == 0 { 1.0 } else { 0.0 }).collect();
    let ds = make_windows(&RawSeries::univariate("z", "Value", values), 3, 2, "Value").unwrap();
    let spec = ModelSpec::new(Family::Lstm, 1, 3, 2).with_hidden(3, 3);
    let mut model = build_model(&spec, &mut SeededRng::new(1)).unwrap();
    for name in ["head.w", "head.b"] {
        let id = model.params().find(name).unwrap();
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    // windows whose targets avoid the spikes
    let ids: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.target(i).iter().all(|&v| v == 0.0))
        .collect();
    assert!(!ids.is_empty());
    let v = loss_eval(&model, &ds, &ids, LossKind::Quantile, 4).unwrap();
    assert_eq!(v.total, 0.0);
}

#[test]
fn loss_eval_is_pure_and_composes() {
    let ds = sine_dataset(90, 4, 3, 1);
    let spec = ModelSpec::new(Family::BdLstm, 1, 4, 3).with_hidden(4, 4);
    let model = build_model(&spec, &mut SeededRng::new(2)).unwrap();
    let ids = ds.test_indices();
    let a = loss_eval(&model, &ds, ids, LossKind::Quantile, 5).unwrap();
    let b = loss_eval(&model, &ds, ids, LossKind::Quantile, 5).unwrap();
    assert_eq!(a, b);

    let mut total = 0.0;
    for chunk in ids.chunks(5) {
        let preds = model.forward_pass(&ds.inputs(chunk)).unwrap();
        let part = quantile_loss_batch(&ds.targets(chunk), &preds, &spec.quantiles).unwrap();
        total += part.total * chunk.len() as f64;
    }
    assert!((a.total - total / ids.len() as f64).abs() < 1e-12);
}

#[test]
fn clipping_keeps_training_finite() {
    let ds = sine_dataset(80, 4, 2, 3);
    let spec = ModelSpec::new(Family::ConvLstm, 1, 4, 2).with_hidden(4, 4);
    let model = build_model(&spec, &mut SeededRng::new(2)).unwrap();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 8,
        learning_rate: 1e-2,
        clip_norm: Some(0.1),
        ..Default::default()
    };
    let out = train(model, &ds, &config).unwrap();
    assert!(out.trace.iter().all(|v| v.is_finite()));
}

/// Quantile heads trained on i.i.d. noise around a constant learn ordered
/// levels.
#[test]
fn noise_quantiles_are_ordered() {
    for seed in 0..3u64 {
        let mut rng = SeededRng::new(100 + seed);
        let values = (0..400).map(|_| 0.5 + rng.uniform_range(-0.2, 0.2)).collect();
        let ds = make_windows(&RawSeries::univariate("noise", "Value", values), 4, 2, "Value")
            .unwrap()
            .normalize_and_split(seed)
            .unwrap();
        let spec = ModelSpec::new(Family::Lstm, 1, 4, 2).with_hidden(4, 4);
        let model = build_model(&spec, &mut SeededRng::new(seed)).unwrap();
        let config = TrainConfig {
            epochs: 40,
            batch_size: 32,
            learning_rate: 5e-3,
            seed,
            ..Default::default()
        };
        let out = train(model, &ds, &config).unwrap();
        let preds = out.model.forward_pass(&ds.inputs(ds.test_indices())).unwrap();
        let k = spec.quantiles.len();
        let mut mean = vec![0.0; k];
        for row in preds.data().chunks(k) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let (lo, mid, hi) = (mean[0], mean[2], mean[4]);
        assert!(lo < mid && mid < hi, "seed {seed}: {mean:?}");
    }
}
