//! Analytic gradients of the training loss against central finite differences.

use sdd::denoiser::{Architecture, DenoiserParams, ModelKind};
use sdd::trainer::{loss_and_grad, SelfCond, TrainConfig, Trainer};
use sdd::{DataBatch, Matrix, Rng, ScaleSpec};

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Loss of `params` on fixed inputs, with `x_sc` treated as a constant.
fn loss_at(params: &DenoiserParams, x_t: &Matrix, t: &[f64], x_sc: &Matrix, x0: &Matrix, kind: ModelKind) -> f64 {
    let pred = params.forward(x_t, t, x_sc).unwrap();
    loss_and_grad(&pred, x0, kind).unwrap().0.total
}

fn check_config(seed: u64, d: usize, hidden: Vec<usize>, temb: usize, n: usize, kind: ModelKind) -> f64 {
    let mut rng = Rng::new(seed);
    let c = kind.channels(d);
    let arch = Architecture {
        channels: c,
        hidden,
        temb_dim: temb,
    };
    let params = DenoiserParams::init(&mut rng, arch).unwrap();
    let x0 = Matrix::from_fn(n, c, |_, j| {
        if j >= d {
            if rng.bernoulli(0.5) { 1.0 } else { -1.0 }
        } else {
            rng.uniform(-1.0, 1.0).unwrap()
        }
    });
    let x_t = rng.gaussian(n, c);
    let x_sc = rng.gaussian(n, c).scale(0.5);
    let t: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();

    let mut tape = sdd::denoiser::Tape::new();
    let pred = params.forward_recorded(&x_t, &t, &x_sc, &mut tape).unwrap();
    let (_, upstream) = loss_and_grad(&pred, &x0, kind).unwrap();
    let grads = params.backward(&tape, &upstream).unwrap();

    let mut worst: f64 = 0.0;
    for (ti, g) in grads.params.tensors.iter().enumerate() {
        for k in 0..g.as_slice().len() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].as_mut_slice()[k] += H;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].as_mut_slice()[k] -= H;
            let fd = (loss_at(&plus, &x_t, &t, &x_sc, &x0, kind) - loss_at(&minus, &x_t, &t, &x_sc, &x0, kind)) / (2.0 * H);
            let e = rel_err(g.as_slice()[k], fd);
            // Entries whose true gradient vanishes are compared absolutely.
            let e = if fd.abs() < 1e-7 && g.as_slice()[k].abs() < 1e-7 { 0.0 } else { e };
            worst = worst.max(e);
        }
    }
    worst
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = Rng::new(2024);
    for case in 0..24 {
        let d = 1 + rng.below(4) as usize;
        let layers = rng.below(3) as usize;
        let hidden: Vec<usize> = (0..layers).map(|_| 1 + rng.below(16) as usize).collect();
        let temb = rng.below(9) as usize;
        let n = 1 + rng.below(8) as usize;
        let kind = if case % 4 == 3 { ModelKind::Dense } else { ModelKind::Sdd };
        let err = check_config(case, d, hidden.clone(), temb, n, kind);
        assert!(err < 1e-4, "case {case} (d={d} hidden={hidden:?} temb={temb} n={n} {kind:?}): {err}");
    }
}

#[test]
fn linear_model_matches_closed_form_gradient() {
    // No hidden layers and no time embedding: pred = [x_t | x_sc]·W + b.
    let mut rng = Rng::new(5);
    let (n, c) = (6, 3);
    let arch = Architecture {
        channels: c,
        hidden: vec![],
        temb_dim: 0,
    };
    let params = DenoiserParams::init(&mut rng, arch).unwrap();
    let x_t = rng.gaussian(n, c);
    let x_sc = rng.gaussian(n, c);
    let y = rng.gaussian(n, c);
    let mut tape = sdd::denoiser::Tape::new();
    let pred = params.forward_recorded(&x_t, &[0.3; 6], &x_sc, &mut tape).unwrap();
    let (_, upstream) = loss_and_grad(&pred, &y, ModelKind::Dense).unwrap();
    let g = params.backward(&tape, &upstream).unwrap();
    let x = x_t.hcat(&x_sc).unwrap();
    let expect = x.transpose().matmul(&pred.sub(&y).unwrap()).unwrap().scale(2.0 / (n * c) as f64);
    for (a, b) in g.params.tensors[0].as_slice().iter().zip(expect.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn tiny_trainer(self_cond_prob: f64, ema_decay: f64) -> Trainer {
    let cfg = TrainConfig {
        hidden: vec![8],
        temb_dim: 4,
        batch_size: 4,
        self_cond_prob,
        ema_decay,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    Trainer::new(cfg, 3, ScaleSpec::global(0.0, 1.0).unwrap()).unwrap()
}

fn tiny_batch(seed: u64) -> DataBatch {
    let mut rng = Rng::new(seed);
    DataBatch::new(Matrix::from_fn(4, 3, |_, _| if rng.bernoulli(0.5) { 0.0 } else { rng.next_f64() })).unwrap()
}

#[test]
fn self_conditioning_is_detached() {
    let tr = tiny_trainer(0.5, 0.9);
    let x0 = tr.target(&tiny_batch(1)).unwrap();
    let mut rng = Rng::new(2);
    let t: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
    let eps = rng.gaussian(4, 6);
    let (l1, g1, sc) = tr.compute_gradients(&x0, &t, &eps, &SelfCond::Network).unwrap();
    let (l2, g2, _) = tr.compute_gradients(&x0, &t, &eps, &SelfCond::Given(sc)).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}
