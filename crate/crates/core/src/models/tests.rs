use super::*;

fn random_windows(b: usize, d: usize, f: usize, seed: u64) -> Tensor {
    Tensor::new(&[b, d, f], Fill::StandardNormal, &mut SeededRng::new(seed)).unwrap()
}

#[test]
fn edlstm_output_is_horizon_by_quantile() {
    let spec = ModelSpec::new(Family::EdLstm, 6, 6, 5).with_hidden(100, 100);
    let model = build_model(&spec, &mut SeededRng::new(0)).unwrap();
    let y = model.forward_pass(&random_windows(3, 6, 6, 1)).unwrap();
    assert_eq!(y.shape(), &[3, 5, 5]);
}

#[test]
fn grouped_arrangement_is_flat() {
    let spec = ModelSpec::new(Family::Lstm, 1, 5, 4)
        .with_hidden(3, 3)
        .with_arrangement(Arrangement::Grouped);
    let model = build_model(&spec, &mut SeededRng::new(0)).unwrap();
    let mut g = Graph::with_params(model.params());
    let x = g.input(random_windows(2, 5, 1, 2));
    let y = model.forward_arranged(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[2, 20]);
}

#[test]
fn bdlstm_state_width_doubles() {
    let spec = ModelSpec::new(Family::BdLstm, 1, 6, 5).with_hidden(50, 50);
    let model = build_model(&spec, &mut SeededRng::new(0)).unwrap();
    let mut g = Graph::with_params(model.params());
    let x = g.input(random_windows(2, 6, 1, 3));
    let states = model.bidirectional_states(&mut g, x).unwrap();
    assert_eq!(states.len(), 6);
    assert_eq!(g.shape(states[0]), &[2, 100]);
}

#[test]
fn convlstm_sequence_length() {
    let spec = ModelSpec::new(Family::ConvLstm, 1, 6, 5);
    assert_eq!(spec.conv_output_len(), 5);
    let model = build_model(&spec, &mut SeededRng::new(0)).unwrap();
    let kernel = model.params().find("conv.w").unwrap();
    assert_eq!(model.params().get(kernel).shape(), &[2, 1, 64]);
    let y = model.forward_pass(&random_windows(2, 6, 1, 4)).unwrap();
    assert_eq!(y.shape(), &[2, 5, 5]);

    let multi = ModelSpec::new(Family::ConvLstm, 6, 6, 5);
    let model = build_model(&multi, &mut SeededRng::new(0)).unwrap();
    let kernel = model.params().find("conv.w").unwrap();
    assert_eq!(model.params().get(kernel).shape(), &[2, 6, 1, 64]);
    let y = model.forward_pass(&random_windows(2, 6, 6, 4)).unwrap();
    assert_eq!(y.shape(), &[2, 5, 5]);
}

#[test]
fn zero_head_predicts_bias() {
    for family in Family::ALL {
        let spec = ModelSpec::new(family, 2, 4, 3).with_hidden(3, 3);
        let mut model = build_model(&spec, &mut SeededRng::new(9)).unwrap();
        let w = model.params().find("head.w").unwrap();
        let b = model.params().find("head.b").unwrap();
        model.params_mut().get_mut(w).data_mut().fill(0.0);
        let bias: Vec<f64> = (0..model.params().get(b).len()).map(|i| i as f64 * 0.1 - 0.2).collect();
        model.params_mut().get_mut(b).data_mut().copy_from_slice(&bias);
        let y = model.forward_pass(&random_windows(4, 4, 2, 5)).unwrap();
        let k = spec.quantiles.len();
        for row in 0..4 {
            for h in 0..3 {
                for q in 0..k {
                    let expected = if family == Family::EdLstm {
                        bias[q]
                    } else {
                        bias[h * k + q]
                    };
                    assert_eq!(y.at(&[row, h, q]), expected, "{family}");
                }
            }
        }
    }
}

#[test]
fn batch_rows_are_independent() {
    for family in Family::ALL {
        let spec = ModelSpec::new(family, 1, 5, 2).with_hidden(4, 4);
        let model = build_model(&spec, &mut SeededRng::new(1)).unwrap();
        let one = random_windows(1, 5, 1, 6);
        let eight = Tensor::from_vec(&[8, 5, 1], one.data().repeat(8)).unwrap();
        let y1 = model.forward_pass(&one).unwrap();
        let y8 = model.forward_pass(&eight).unwrap();
        for row in y8.data().chunks(y1.len()) {
            for (a, b) in row.iter().zip(y1.data()) {
                assert!((a - b).abs() < 1e-14, "{family}");
            }
        }
    }
}

#[test]
fn input_shape_is_checked() {
    let spec = ModelSpec::new(Family::Lstm, 2, 4, 3).with_hidden(3, 3);
    let model = build_model(&spec, &mut SeededRng::new(0)).unwrap();
    assert!(matches!(
        model.forward_pass(&random_windows(2, 5, 2, 0)),
        Err(ModelError::InputShape { .. })
    ));
}

#[test]
fn unknown_family_is_config_error() {
    assert!(matches!("transformer".parse::<Family>(), Err(ModelError::Config(_))));
    assert_eq!("ED-LSTM".parse::<Family>().unwrap(), Family::EdLstm);
    assert_eq!("conv_lstm".parse::<Family>().unwrap(), Family::ConvLstm);
}

#[test]
fn invalid_specs_rejected() {
    let mut spec = ModelSpec::new(Family::Lstm, 1, 0, 3);
    assert!(spec.validate().is_err());
    spec.window = 4;
    spec.hidden = (0, 3);
    assert!(spec.validate().is_err());
}

/// Parameter counts for the cryptocurrency configurations, computed by hand
/// from `4H(in + H + 1)` per LSTM layer plus dense and conv terms.
#[test]
fn golden_parameter_counts() {
    let q1 = QuantileSet::median_only();
    let q5 = QuantileSet::default();
    let table = [
        // family, f, (h1, h2), K=1 count, K=5 count
        (Family::BdLstm, 1, (50, 50), 51_255, 52_275),
        (Family::BdLstm, 6, (50, 50), 53_255, 54_275),
        (Family::EdLstm, 1, (100, 100), 121_301, 121_705),
        (Family::EdLstm, 6, (100, 100), 123_301, 123_705),
        (Family::ConvLstm, 1, (20, 20), 7_097, 7_517),
        (Family::ConvLstm, 6, (20, 20), 7_737, 8_157),
        (Family::Lstm, 1, (50, 50), 30_855, 31_875),
        (Family::Linear, 6, (1, 1), 185, 925),
    ];
    for (family, f, (h1, h2), single, quantile) in table {
        for (q, expected) in [(q1.clone(), single), (q5.clone(), quantile)] {
            let spec = ModelSpec::new(family, f, 6, 5)
                .with_hidden(h1, h2)
                .with_quantiles(q);
            assert_eq!(spec.param_count(), expected, "{family} f={f}");
            let model = build_model(&spec, &mut SeededRng::new(0)).unwrap();
            assert_eq!(model.params().count(), expected, "{family} f={f}");
        }
    }
}

#[test]
fn bdlstm_reversal_symmetry() {
    let spec = ModelSpec::new(Family::BdLstm, 2, 5, 3).with_hidden(4, 3);
    let model = build_model(&spec, &mut SeededRng::new(12)).unwrap();
    let window = random_windows(2, 5, 2, 13);

    let mut g = Graph::with_params(model.params());
    let x = g.input(window.clone());
    let states = model.bidirectional_states(&mut g, x).unwrap();
    let original: Vec<Tensor> = states.iter().map(|&s| g.value(s).clone()).collect();

    let mut swapped = model.clone();
    swapped.swap_directions().unwrap();
    let mut g2 = Graph::with_params(swapped.params());
    let x = g2.input(window);
    let xr = g2.reverse_time(x).unwrap();
    let mirrored = swapped.bidirectional_states(&mut g2, xr).unwrap();

    let h = 4;
    let d = 5;
    for t in 0..d {
        let a = &original[d - 1 - t];
        let b = g2.value(mirrored[t]);
        for row in 0..2 {
            for u in 0..h {
                // forward half of the mirrored run == backward half of the original
                assert!((b.at(&[row, u]) - a.at(&[row, h + u])).abs() < 1e-14);
                assert!((b.at(&[row, h + u]) - a.at(&[row, u])).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn edlstm_horizon_does_not_touch_encoder() {
    let short = ModelSpec::new(Family::EdLstm, 1, 5, 3).with_hidden(6, 6);
    let long = ModelSpec { horizons: 10, ..short.clone() };
    let a = build_model(&short, &mut SeededRng::new(4)).unwrap();
    let b = build_model(&long, &mut SeededRng::new(4)).unwrap();
    for name in ["encoder.wx", "encoder.wh", "encoder.b"] {
        let ia = a.params().find(name).unwrap();
        let ib = b.params().find(name).unwrap();
        assert_eq!(a.params().get(ia), b.params().get(ib));
    }
    let y = b.forward_pass(&random_windows(2, 5, 1, 1)).unwrap();
    assert_eq!(y.shape(), &[2, 10, 5]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let spec = ModelSpec::new(Family::ConvLstm, 3, 5, 2).with_hidden(4, 4);
    let model = build_model(&spec, &mut SeededRng::new(77)).unwrap();
    let text = model.to_checkpoint_string();
    let back = Model::from_checkpoint_str(&text).unwrap();
    assert_eq!(back.spec(), model.spec());
    for (id, name, t) in model.params().iter() {
        assert_eq!(back.params().name(id), name);
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.params().get(id)), bits(t));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    assert_eq!(Model::load(&path).unwrap(), model);

    let corrupted = text.replacen("\"format\": \"qforecast-model\"", "\"format\": \"other\"", 1);
    assert!(matches!(
        Model::from_checkpoint_str(&corrupted),
        Err(ModelError::Checkpoint(_))
    ));
}
