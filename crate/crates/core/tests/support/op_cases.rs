//! Finite-difference oracle for every autodiff op.
//!
//! Each op has an independent f64 reference forward. The analytic f32 gradient
//! of `sum(r * op(inputs))` is compared with central differences of the
//! reference at step 1e-3.

use opo_core::autodiff::{Tape, Var};
use opo_core::rng::Rng;
use opo_core::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

type Reference = fn(&[Vec<f64>], &[Vec<usize>]) -> Vec<f64>;
type Build = fn(&mut Tape, &[Var]) -> opo_core::Result<Var>;

pub struct Case {
    shapes: Vec<Vec<usize>>,
    build: Build,
    reference: Reference,
    /// Inputs are kept at least this far from zero (kinks).
    avoid_zero: f64,
}

fn randn(rng: &mut Rng, n: usize, avoid_zero: f64) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let v: f32 = StandardNormal.sample(rng);
            if (v as f64).abs() >= avoid_zero {
                break v;
            }
        })
        .collect()
}

const STEP: f64 = 1e-3;
const RTOL: f64 = 1e-3;
const ATOL: f64 = 1e-6;

pub fn check_case(case: &Case, rng: &mut Rng) -> Result<(), String> {
    let inputs: Vec<Vec<f32>> = case
        .shapes
        .iter()
        .map(|s| randn(rng, s.iter().product(), case.avoid_zero))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.shapes)
        .map(|(d, s)| tape.param(Tensor::new(s.clone(), d.clone()).unwrap()))
        .collect();
    let out = (case.build)(&mut tape, &vars).map_err(|e| format!("{e}"))?;
    let out_shape = tape.value(out).shape().to_vec();
    let weights = randn(rng, tape.value(out).numel(), 0.0);
    let w = tape.constant(Tensor::new(out_shape, weights.clone()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).map_err(|e| format!("{e}"))?;

    let as64: Vec<Vec<f64>> = inputs.iter().map(|d| d.iter().map(|&v| v as f64).collect()).collect();
    let objective = |xs: &[Vec<f64>]| -> f64 {
        (case.reference)(xs, &case.shapes)
            .iter()
            .zip(&weights)
            .map(|(y, &w)| y * w as f64)
            .sum()
    };
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).ok_or("missing gradient")?;
        for j in 0..as64[i].len() {
            let mut xs = as64.clone();
            xs[i][j] += STEP;
            let plus = objective(&xs);
            xs[i][j] -= 2.0 * STEP;
            let minus = objective(&xs);
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[j] as f64;
            if (a - numeric).abs() > RTOL * a.abs().max(numeric.abs()) + ATOL {
                return Err(format!(
                    "input {i} elem {j}: analytic {a} numeric {numeric} shapes {:?}",
                    case.shapes
                ));
            }
        }
    }
    Ok(())
}

fn rand_dims(rng: &mut Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=4)).collect()
}

fn ref_matmul(x: &[Vec<f64>], s: &[Vec<usize>]) -> Vec<f64> {
    let (k, n) = (s[1][0], s[1][1]);
    let m = x[0].len() / k;
    let mut out = std::vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for kk in 0..k {
                out[i * n + j] += x[0][i * k + kk] * x[1][kk * n + j];
            }
        }
    }
    out
}

fn ref_bmm(x: &[Vec<f64>], s: &[Vec<usize>], trans: bool) -> Vec<f64> {
    let (b, m, k) = (s[0][0], s[0][1], s[0][2]);
    let n = if trans { s[1][1] } else { s[1][2] };
    let mut out = std::vec![0.0; b * m * n];
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    let bv = if trans {
                        x[1][bi * n * k + j * k + kk]
                    } else {
                        x[1][bi * k * n + kk * n + j]
                    };
                    out[bi * m * n + i * n + j] += x[0][bi * m * k + i * k + kk] * bv;
                }
            }
        }
    }
    out
}

fn ref_broadcast(x: &[Vec<f64>], f: fn(f64, f64) -> f64) -> Vec<f64> {
    let nb = x[1].len();
    x[0].iter().enumerate().map(|(i, &a)| f(a, x[1][i % nb])).collect()
}

fn ref_rows(x: &[f64], n: usize, f: fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    x.chunks(n).flat_map(f).collect()
}

fn erf64(v: f64) -> f64 {
    libm::erf(v)
}

pub fn cases(rng: &mut Rng) -> Vec<(&'static str, Case)> {
    let d = rand_dims(rng, 4);
    let (m, k, n, b) = (d[0], d[1], d[2], d[3]);
    let lead = rng.random_range(1..=3);
    let row = rand_dims(rng, 2);
    std::vec![
        ("matmul", Case {
            shapes: std::vec![std::vec![lead, m, k], std::vec![k, n]],
            build: |t, v| t.matmul(v[0], v[1]),
            reference: ref_matmul,
            avoid_zero: 0.0,
        }),
        ("bmm", Case {
            shapes: std::vec![std::vec![b, m, k], std::vec![b, k, n]],
            build: |t, v| t.bmm(v[0], v[1], false),
            reference: |x, s| ref_bmm(x, s, false),
            avoid_zero: 0.0,
        }),
        ("bmm_t", Case {
            shapes: std::vec![std::vec![b, m, k], std::vec![b, n, k]],
            build: |t, v| t.bmm(v[0], v[1], true),
            reference: |x, s| ref_bmm(x, s, true),
            avoid_zero: 0.0,
        }),
        ("add", Case {
            shapes: std::vec![std::vec![m, k, n], std::vec![k, n]],
            build: |t, v| t.add(v[0], v[1]),
            reference: |x, _| ref_broadcast(x, |a, b| a + b),
            avoid_zero: 0.0,
        }),
        ("sub", Case {
            shapes: std::vec![std::vec![m, n], std::vec![m, n]],
            build: |t, v| t.sub(v[0], v[1]),
            reference: |x, _| ref_broadcast(x, |a, b| a - b),
            avoid_zero: 0.0,
        }),
        ("mul", Case {
            shapes: std::vec![std::vec![m, k, n], std::vec![n]],
            build: |t, v| t.mul(v[0], v[1]),
            reference: |x, _| ref_broadcast(x, |a, b| a * b),
            avoid_zero: 0.0,
        }),
        ("scale", Case {
            shapes: std::vec![std::vec![m, n]],
            build: |t, v| Ok(t.scale(v[0], -1.7)),
            reference: |x, _| x[0].iter().map(|a| -1.7f32 as f64 * a).collect(),
            avoid_zero: 0.0,
        }),
        ("add_scalar", Case {
            shapes: std::vec![std::vec![m, n]],
            build: |t, v| Ok(t.add_scalar(v[0], 0.3)),
            reference: |x, _| x[0].iter().map(|a| a + 0.3).collect(),
            avoid_zero: 0.0,
        }),
        ("relu", Case {
            shapes: std::vec![std::vec![m, n]],
            build: |t, v| Ok(t.relu(v[0])),
            reference: |x, _| x[0].iter().map(|a| a.max(0.0)).collect(),
            avoid_zero: 1e-2,
        }),
        ("gelu", Case {
            shapes: std::vec![std::vec![m, n]],
            build: |t, v| Ok(t.gelu(v[0])),
            reference: |x, _| x[0].iter().map(|a| 0.5 * a * (1.0 + erf64(a / 2f64.sqrt()))).collect(),
            avoid_zero: 0.0,
        }),
        ("softplus", Case {
            shapes: std::vec![std::vec![m, n]],
            build: |t, v| Ok(t.softplus(v[0])),
            reference: |x, _| x[0].iter().map(|a| (1.0 + a.exp()).ln()).collect(),
            avoid_zero: 0.0,
        }),
        ("square", Case {
            shapes: std::vec![std::vec![m, n]],
            build: |t, v| Ok(t.square(v[0])),
            reference: |x, _| x[0].iter().map(|a| a * a).collect(),
            avoid_zero: 0.0,
        }),
        ("softmax", Case {
            shapes: std::vec![std::vec![m, n + 1]],
            build: |t, v| t.softmax(v[0]),
            reference: |x, s| ref_rows(&x[0], s[0][1], |r| {
                let mx = r.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|v| v / z).collect()
            }),
            avoid_zero: 0.0,
        }),
        ("layer_norm", Case {
            shapes: std::vec![std::vec![m, n + 2]],
            build: |t, v| t.layer_norm(v[0], 1e-5),
            reference: |x, s| ref_rows(&x[0], s[0][1], |r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let eps = 1e-5f32 as f64;
                r.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
            }),
            avoid_zero: 0.0,
        }),
        ("concat", Case {
            shapes: std::vec![std::vec![m, k, n], std::vec![m, row[0], n]],
            build: |t, v| t.concat(&[v[0], v[1]], 1),
            reference: |x, s| {
                let (m, k1, k2, n) = (s[0][0], s[0][1], s[1][1], s[0][2]);
                let mut out = Vec::new();
                for i in 0..m {
                    out.extend_from_slice(&x[0][i * k1 * n..(i + 1) * k1 * n]);
                    out.extend_from_slice(&x[1][i * k2 * n..(i + 1) * k2 * n]);
                }
                out
            },
            avoid_zero: 0.0,
        }),
        ("reshape", Case {
            shapes: std::vec![std::vec![m, k, n]],
            build: |t, v| {
                let s = t.value(v[0]).shape().to_vec();
                t.reshape(v[0], &[s[0] * s[1], s[2]])
            },
            reference: |x, _| x[0].clone(),
            avoid_zero: 0.0,
        }),
        ("permute", Case {
            shapes: std::vec![std::vec![m, k, n]],
            build: |t, v| t.permute(v[0], &[2, 0, 1]),
            reference: |x, s| {
                let (a, b, c) = (s[0][0], s[0][1], s[0][2]);
                let mut out = std::vec![0.0; a * b * c];
                for i in 0..a {
                    for j in 0..b {
                        for l in 0..c {
                            out[l * a * b + i * b + j] = x[0][i * b * c + j * c + l];
                        }
                    }
                }
                out
            },
            avoid_zero: 0.0,
        }),
        ("slice", Case {
            shapes: std::vec![std::vec![m, k + 2, n]],
            build: |t, v| {
                let len = t.value(v[0]).shape()[1] - 2;
                t.slice(v[0], 1, 1, len)
            },
            reference: |x, s| {
                let (a, b, c) = (s[0][0], s[0][1], s[0][2]);
                let mut out = Vec::new();
                for i in 0..a {
                    for j in 1..b - 1 {
                        out.extend_from_slice(&x[0][i * b * c + j * c..i * b * c + (j + 1) * c]);
                    }
                }
                out
            },
            avoid_zero: 0.0,
        }),
        ("sum", Case {
            shapes: std::vec![std::vec![m, n]],
            build: |t, v| Ok(t.sum(v[0])),
            reference: |x, _| std::vec![x[0].iter().sum()],
            avoid_zero: 0.0,
        }),
        ("mean", Case {
            shapes: std::vec![std::vec![m, n]],
            build: |t, v| Ok(t.mean(v[0])),
            reference: |x, _| std::vec![x[0].iter().sum::<f64>() / x[0].len() as f64],
            avoid_zero: 0.0,
        }),
    ]
}
