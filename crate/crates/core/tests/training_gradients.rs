//! Finite-difference checks of the hand-written training gradients.

use nterrain::raster::Grid;
use nterrain::rng::SeededRng;
use nterrain::siren::{build_frequency_table, FrequencyConfig, SirenStage};
use nterrain::trainer::{
    adam_step, decode_field, geometry_loss_and_grads, geometry_params, set_geometry_params,
    set_stage_params, stage_loss_and_grads, stage_params, AdamState, GradTerm, ValueTerm,
};
use nterrain::wavelet::build_features;
use nterrain::wcf::{FeatureMap, ThresholdSet, WcfDecoder};

const FD_STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;
/// Absolute floor for entries whose true gradient is ~0.
const ABS_FLOOR: f64 = 1e-8;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()) + ABS_FLOOR
}

fn tiny_stage(seed: u64, omega0: f64) -> SirenStage {
    let cfg = FrequencyConfig {
        low_limit: 3,
        edges: vec![],
        sizes: vec![8],
    };
    let freq = build_frequency_table(seed, &cfg).unwrap();
    let mut stage = SirenStage::new(freq, omega0, 8, 3, seed + 1);
    // nonzero biases so every path is exercised
    let mut rng = SeededRng::new(seed + 2);
    for l in stage
        .hidden
        .iter_mut()
        .chain(std::iter::once(&mut stage.output))
    {
        l.bias.mapv_inplace(|_| rng.uniform_in(-0.05, 0.05));
    }
    stage
}

fn random_points(rng: &mut SeededRng, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.uniform(), rng.uniform()]).collect()
}

#[test]
fn shape_loss_gradients_match_finite_differences() {
    let mut rng = SeededRng::new(77);
    for seed in [3u64, 11] {
        let stage = tiny_stage(seed, 30.0);
        let vc = random_points(&mut rng, 40);
        let vt: Vec<f64> = (0..40).map(|_| rng.uniform()).collect();
        let gc = random_points(&mut rng, 30);
        let gt: Vec<[f64; 2]> = (0..30)
            .map(|_| [rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0)])
            .collect();
        let value = ValueTerm {
            coords: &vc,
            targets: &vt,
            masks: None,
            nodes: None,
        };
        let grad = GradTerm {
            coords: &gc,
            targets: &gt,
            lambda: 0.1,
            nodes: None,
        };
        let loss_of = |p: &[f64]| {
            let mut s = stage.clone();
            set_stage_params(&mut s, p);
            stage_loss_and_grads(&s, Some(&value), Some(&grad)).loss
        };
        let analytic = stage_loss_and_grads(&stage, Some(&value), Some(&grad))
            .grads
            .flatten();
        let params = stage_params(&stage);
        assert_eq!(analytic.len(), params.len());
        let mut bad = Vec::new();
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += FD_STEP;
            let up = loss_of(&p);
            p[i] -= 2.0 * FD_STEP;
            let down = loss_of(&p);
            let numeric = (up - down) / (2.0 * FD_STEP);
            if !close(analytic[i], numeric) {
                bad.push((i, analytic[i], numeric));
            }
        }
        assert!(bad.is_empty(), "seed {seed}: mismatches {bad:?}");
    }
}

#[test]
fn gradient_term_alone_matches_finite_differences() {
    // isolates the second-order path: no value term at all
    let mut rng = SeededRng::new(5);
    let stage = tiny_stage(21, 30.0);
    let gc = random_points(&mut rng, 25);
    let gt: Vec<[f64; 2]> = (0..25).map(|_| [rng.normal(), rng.normal()]).collect();
    let grad = GradTerm {
        coords: &gc,
        targets: &gt,
        lambda: 0.1,
        nodes: None,
    };
    let analytic = stage_loss_and_grads(&stage, None, Some(&grad))
        .grads
        .flatten();
    let params = stage_params(&stage);
    for i in 0..params.len() {
        let eval = |delta: f64| {
            let mut p = params.clone();
            p[i] += delta;
            let mut s = stage.clone();
            set_stage_params(&mut s, &p);
            stage_loss_and_grads(&s, None, Some(&grad)).loss
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        assert!(
            close(analytic[i], numeric),
            "param {i}: {} vs {numeric}",
            analytic[i]
        );
    }
}

#[test]
fn zero_hidden_weights_give_closed_form_bias_gradient() {
    let mut stage = tiny_stage(8, 30.0);
    for l in stage
        .hidden
        .iter_mut()
        .chain(std::iter::once(&mut stage.output))
    {
        l.weight.fill(0.0);
        l.bias.fill(0.0);
    }
    stage.output.bias[0] = 0.3;
    let coords = [[0.1, 0.2], [0.5, 0.5], [0.9, 0.3]];
    let targets = [0.0, 1.0, 0.5];
    let vt = ValueTerm {
        coords: &coords,
        targets: &targets,
        masks: None,
        nodes: None,
    };
    let sl = stage_loss_and_grads(&stage, Some(&vt), None);
    let expected = 2.0 * targets.iter().map(|t| 0.3 - t).sum::<f64>() / 3.0;
    assert!((sl.grads.output.bias[0] - expected).abs() < 1e-15);
}

#[test]
fn zero_lambda_removes_gradient_term() {
    let mut rng = SeededRng::new(2);
    let stage = tiny_stage(4, 30.0);
    let vc = random_points(&mut rng, 10);
    let vt: Vec<f64> = (0..10).map(|_| rng.uniform()).collect();
    let gc = random_points(&mut rng, 10);
    let gt = vec![[1.0, -1.0]; 10];
    let value = ValueTerm {
        coords: &vc,
        targets: &vt,
        masks: None,
        nodes: None,
    };
    let with = stage_loss_and_grads(
        &stage,
        Some(&value),
        Some(&GradTerm {
            coords: &gc,
            targets: &gt,
            lambda: 0.0,
            nodes: None,
        }),
    );
    let without = stage_loss_and_grads(&stage, Some(&value), None);
    assert_eq!(with.grads, without.grads);
    assert_eq!(with.loss, without.loss);
}

fn tiny_geometry(seed: u64) -> (SirenStage, WcfDecoder, ThresholdSet, FeatureMap) {
    let cfg = FrequencyConfig {
        low_limit: 2,
        edges: vec![4, 6],
        sizes: vec![4, 2, 2],
    };
    let freq = build_frequency_table(seed, &cfg).unwrap();
    let stage = SirenStage::new(freq, 30.0, 8, 2, seed + 1);
    let mut rng = SeededRng::new(seed + 2);
    let residual = Grid::from_fn(16, 16, |_, _| rng.uniform_in(-1.0, 1.0));
    let features = FeatureMap::from_features(&build_features(&residual).unwrap());
    let mut decoder = WcfDecoder::new(seed + 3);
    for l in &mut decoder.layers {
        l.bias.mapv_inplace(|_| rng.uniform_in(-0.1, 0.1));
    }
    let ts = ThresholdSet {
        tau1: -0.4,
        deltas: vec![0.2],
    };
    (stage, decoder, ts, features)
}

#[test]
fn geometry_gradients_flow_into_decoder_and_thresholds() {
    let (stage, decoder, ts, features) = tiny_geometry(31);
    let mut rng = SeededRng::new(9);
    let coords = random_points(&mut rng, 60);
    let targets: Vec<f64> = (0..60).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let loss_of = |p: &[f64]| {
        let (mut s, mut d, mut t) = (stage.clone(), decoder.clone(), ts.clone());
        set_geometry_params(&mut s, &mut d, &mut t, p);
        let dec = decode_field(&d, &features);
        geometry_loss_and_grads(&s, &d, &t, &dec, &coords, &targets, None, true).0
    };
    let decoded = decode_field(&decoder, &features);
    let (_, grads) = geometry_loss_and_grads(
        &stage, &decoder, &ts, &decoded, &coords, &targets, None, true,
    );
    let analytic = grads.flatten();
    let params = geometry_params(&stage, &decoder, &ts);
    assert_eq!(analytic.len(), params.len());

    let n_stage = stage_params(&stage).len();
    let n_dec = decoder.parameter_count();
    // every stage and threshold entry, a seeded subset of decoder entries
    let mut idx: Vec<usize> = (0..n_stage).collect();
    idx.extend(n_stage + n_dec..params.len());
    let mut pick = SeededRng::new(1);
    for _ in 0..300 {
        idx.push(n_stage + pick.below(n_dec as u64) as usize);
    }
    // the final-layer bias cancels in instance norm: its gradient is ~0
    idx.push(n_stage + n_dec - 1);
    let mut bad = Vec::new();
    for &i in &idx {
        let mut p = params.clone();
        p[i] += FD_STEP;
        let up = loss_of(&p);
        p[i] -= 2.0 * FD_STEP;
        let down = loss_of(&p);
        let numeric = (up - down) / (2.0 * FD_STEP);
        if !close(analytic[i], numeric) {
            bad.push((i, analytic[i], numeric));
        }
    }
    assert!(bad.is_empty(), "mismatches {bad:?}");
    // thresholds and decoder really receive signal
    assert!(analytic[n_stage + n_dec..].iter().any(|g| g.abs() > 1e-6));
    assert!(analytic[n_stage..n_stage + n_dec]
        .iter()
        .any(|g| g.abs() > 1e-6));
}

#[test]
fn unmasked_geometry_leaves_decoder_untouched() {
    let (stage, decoder, ts, features) = tiny_geometry(3);
    let coords = [[0.2, 0.3], [0.7, 0.1]];
    let targets = [0.1, -0.2];
    let decoded = decode_field(&decoder, &features);
    let (_, grads) = geometry_loss_and_grads(
        &stage, &decoder, &ts, &decoded, &coords, &targets, None, false,
    );
    let n_stage = stage_params(&stage).len();
    assert!(grads.flatten()[n_stage..].iter().all(|&g| g == 0.0));
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut p = vec![1.0, -2.0, 0.5];
    let g = [3.0, -0.001, 1e3];
    let mut st = AdamState::new(3);
    adam_step(&mut p, &g, &mut st, 1e-4).unwrap();
    let expected = [1.0 - 1e-4, -2.0 + 1e-4, 0.5 - 1e-4];
    for (a, b) in p.iter().zip(expected) {
        assert!((a - b).abs() < 1e-4 * 1e-4);
    }
}

#[test]
fn adam_zero_gradient_keeps_params_and_decays_moments() {
    let mut p = vec![1.0, 2.0];
    let mut st = AdamState::new(2);
    adam_step(&mut p, &[1.0, 1.0], &mut st, 0.1).unwrap();
    let before = p.clone();
    let (m, v) = (st.m.clone(), st.v.clone());
    adam_step(&mut p, &[0.0, 0.0], &mut st, 0.0).unwrap();
    assert_eq!(p, before);
    for i in 0..2 {
        assert!((st.m[i] - 0.9 * m[i]).abs() < 1e-15);
        assert!((st.v[i] - 0.999 * v[i]).abs() < 1e-15);
    }
}

#[test]
fn adam_minimizes_a_parabola() {
    let mut p = vec![1.0];
    let mut st = AdamState::new(1);
    for _ in 0..100 {
        let g = [2.0 * p[0]];
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
    }
    assert!(p[0].abs() < 0.05, "theta = {}", p[0]);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut p = vec![1.0];
    let mut st = AdamState::new(1);
    assert!(adam_step(&mut p, &[f64::NAN], &mut st, 0.1).is_err());
    assert_eq!(st.t, 0);
    assert_eq!(p, vec![1.0]);
}
