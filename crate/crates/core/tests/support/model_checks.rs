//! Finite-difference checks of the masking layer and of a shrunken model.

use opo_core::autodiff::{OpKind, Tape};
use opo_core::model::{mask_impute, mask_impute_backward, predict, BoundParams, ModelConfig, ModelParams, Observation};
use opo_core::rng::seeded;
use opo_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn unit_direction(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = seeded(seed);
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

fn weighted_sum(out: &Tensor, w: &[f32]) -> f64 {
    out.data().iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Counterfactual mask gradient against central differences of the relaxed
/// masking map, for a shared and a per-item mask.
pub fn counterfactual_mask_gradient() -> Result<(), String> {
    let tokens = random(&[2, 9, 8], 1, -1.0, 1.0);
    let lambda = random(&[8], 2, -1.0, 1.0);
    let w = random(&[2, 9, 8], 3, -1.0, 1.0);
    for (seed, shape) in [(4u64, vec![9usize]), (5, vec![2, 9])] {
        let s = random(&shape, seed, 0.0, 1.0);
        let g = mask_impute_backward(&w, &tokens, &s, &lambda).unwrap();
        for i in 0..s.numel() {
            let h = 0.25;
            let mut plus = s.clone();
            plus.data_mut()[i] += h;
            let mut minus = s.clone();
            minus.data_mut()[i] -= h;
            let fd = (weighted_sum(&mask_impute(&tokens, &plus, &lambda).unwrap(), w.data())
                - weighted_sum(&mask_impute(&tokens, &minus, &lambda).unwrap(), w.data()))
                / (2.0 * h as f64);
            let an = g.s.data()[i] as f64;
            if (fd - an).abs() > 1e-4 * fd.abs().max(an.abs()) + 1e-7 {
                return Err(format!("s[{i}]: fd {fd} vs {an}"));
            }
        }
    }
    Ok(())
}

/// Sign pattern of every ReLU input on the tape. A finite-difference segment
/// is only meaningful when this pattern is the same at both ends.
fn relu_pattern(tape: &Tape) -> Vec<bool> {
    tape.vars()
        .filter(|&v| tape.kind(v) == OpKind::Relu)
        .flat_map(|v| tape.value(tape.inputs(v)[0]).data().iter().map(|&x| x > 0.0).collect::<Vec<_>>())
        .collect()
}

/// Loss `sum(w * m(z, s; W))` on a k=3, d_model=8, one-block model, checked
/// per parameter tensor along a random unit direction, plus the relaxed mask.
pub fn shrunken_model_gradients() -> Result<(), String> {
    let cfg = ModelConfig {
        d_model: 8,
        blocks: 1,
        heads: 2,
        ..ModelConfig::new(3)
    };
    let params = ModelParams::init(cfg.clone(), 11).unwrap();
    let images = random(&[2, 24, 24, 3], 12, 0.0, 1.0);
    let s0 = Tensor::from_vec(vec![1., 0., 1., 1., 0., 1., 0., 1., 1.]);
    let w = random(&[2, 9], 13, -1.0, 1.0);

    let eval = |params: &ModelParams, s: &Tensor| -> (f64, Vec<bool>) {
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, params, false);
        let img = tape.constant(images.clone());
        let s = tape.constant(s.clone());
        let out = predict(&mut tape, &p, &cfg, img, s, Observation::Full).unwrap();
        (weighted_sum(tape.value(out), w.data()), relu_pattern(&tape))
    };

    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &params, true);
    let img = tape.constant(images.clone());
    let s = tape.param(s0.clone());
    let out = predict(&mut tape, &p, &cfg, img, s, Observation::Full).unwrap();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let l = tape.sum(prod);
    let grads = tape.backward(l).unwrap();
    let (_, base_pattern) = eval(&params, &s0);

    // `shifted(sign * eps, dir)` evaluates the loss with one input moved along `dir`.
    let check = |name: &str, grad: &Tensor, seed: u64, shifted: &dyn Fn(f32, &[f32]) -> (f64, Vec<bool>)| {
        for attempt in 0..8u64 {
            let dir = unit_direction(grad.numel(), seed + 1000 * attempt);
            let an: f64 = grad.data().iter().zip(&dir).map(|(&a, &b)| a as f64 * b as f64).sum();
            for eps in [1e-2f32, 3e-3, 1e-3] {
                let (lp, pp) = shifted(eps, &dir);
                let (lm, pm) = shifted(-eps, &dir);
                if pp != base_pattern || pm != base_pattern {
                    continue;
                }
                let fd = (lp - lm) / (2.0 * eps as f64);
                if (fd - an).abs() > 1e-2 * fd.abs().max(an.abs()) + 1e-5 {
                    return Err(format!("{name}: finite difference {fd} vs analytic {an} (step {eps})"));
                }
                return Ok(());
            }
        }
        Err(format!("{name}: every sampled direction crosses a ReLU kink"))
    };

    for (idx, name) in params.names().iter().enumerate() {
        let g = grads.get(p.vars[idx]).expect("every parameter reaches the loss");
        check(name, g, 100 + idx as u64, &|step, dir| {
            let mut moved = params.clone();
            for (x, d) in moved.tensors_mut()[idx].data_mut().iter_mut().zip(dir) {
                *x += step * d;
            }
            eval(&moved, &s0)
        })?;
    }
    check("mask", grads.get(s).unwrap(), 99, &|step, dir| {
        let mut moved = s0.clone();
        for (x, d) in moved.data_mut().iter_mut().zip(dir) {
            *x += step * d;
        }
        eval(&params, &moved)
    })
}
