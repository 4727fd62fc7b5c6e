#![allow(dead_code)]

use fairpipe::gradengine::{Tape, Tensor, Var};
use fairpipe::seed::rng_from;
use fairpipe::Result;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
/// Denominator floor for the relative error, so gradients that are
/// numerically zero compare by absolute difference.
pub const FD_FLOOR: f64 = 1e-4;

pub type Builder = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn loss_of(inputs: &[Tensor<f64>], build: &Builder) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true).unwrap()).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.value(loss).item().unwrap()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every element of `inputs[i]` for `i` in `wrt`.
pub fn max_fd_error(inputs: &[Tensor<f64>], wrt: &[usize], build: &Builder) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true).unwrap()).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for &i in wrt {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (e, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let numeric = (loss_of(&plus, build) - loss_of(&minus, build)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(a, numeric));
        }
    }
    worst
}

/// Scalar reduction whose gradient differs per element.
pub fn reduce(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let sq = tape.sum_squares(v)?;
    let s = tape.sum(v)?;
    let half = tape.scale(s, 0.5)?;
    tape.add(sq, half)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn values<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -3.0, 3.0)
}

/// A gradient-check case: inputs, which of them to differentiate, and the
/// scalar function of them.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub wrt: Vec<usize>,
    pub build: Box<Builder>,
}

impl Case {
    pub fn max_error(&self) -> f64 {
        max_fd_error(&self.inputs, &self.wrt, &*self.build)
    }
}

pub const PRIMITIVES: [&str; 13] = [
    "affine",
    "sigmoid",
    "softmax",
    "concat",
    "mean_rows",
    "dropout",
    "rmse_loss",
    "cross_entropy",
    "neg_entropy",
    "add",
    "scale",
    "sum",
    "sum_squares",
];

/// A random instance of one primitive, wrapped so the output is scalar.
pub fn primitive_case(name: &str, seed: u64) -> Case {
    let mut rng = rng_from(&[0xFD, seed]);
    let b = rng.random_range(1..5usize);
    let c = rng.random_range(2..6usize);
    match name {
        "affine" => {
            let o = rng.random_range(1..5usize);
            Case {
                inputs: vec![values(&mut rng, &[b, c]), values(&mut rng, &[c, o]), values(&mut rng, &[o])],
                wrt: vec![0, 1, 2],
                build: Box::new(|t, v| {
                    let y = t.affine(v[0], v[1], v[2])?;
                    reduce(t, y)
                }),
            }
        }
        "sigmoid" => unary(values(&mut rng, &[b, c]), |t, x| t.sigmoid(x)),
        "softmax" => unary(values(&mut rng, &[b, c]), |t, x| t.softmax(x)),
        "concat" => {
            let c2 = rng.random_range(1..4usize);
            Case {
                inputs: vec![values(&mut rng, &[b, c]), values(&mut rng, &[b, c2])],
                wrt: vec![0, 1],
                build: Box::new(|t, v| {
                    let y = t.concat(v[0], v[1])?;
                    reduce(t, y)
                }),
            }
        }
        "mean_rows" => {
            let rows = rng.random_range(2..7usize);
            let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.6)).collect();
            mask[rng.random_range(0..rows)] = true;
            Case {
                inputs: vec![values(&mut rng, &[rows, c])],
                wrt: vec![0],
                build: Box::new(move |t, v| {
                    let y = t.mean_rows(v[0], &mask)?;
                    reduce(t, y)
                }),
            }
        }
        "dropout" => Case {
            inputs: vec![values(&mut rng, &[b, c])],
            wrt: vec![0],
            build: Box::new(move |t, v| {
                let mut r = rng_from(&[0xD0, seed]);
                let y = t.dropout(v[0], 0.3, &mut r, true)?;
                reduce(t, y)
            }),
        },
        "rmse_loss" => {
            let target: Vec<f64> = (0..b).map(|_| rng.random_range(-3.0..3.0)).collect();
            Case {
                inputs: vec![values(&mut rng, &[b, 1])],
                wrt: vec![0],
                build: Box::new(move |t, v| t.rmse_loss(v[0], &target)),
            }
        }
        "cross_entropy" => {
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
            Case {
                inputs: vec![uniform(&mut rng, &[b, c], 0.05, 1.0)],
                wrt: vec![0],
                build: Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
            }
        }
        "neg_entropy" => Case {
            inputs: vec![uniform(&mut rng, &[b, c], 0.05, 1.0)],
            wrt: vec![0],
            build: Box::new(|t, v| t.neg_entropy(v[0])),
        },
        "add" => Case {
            inputs: vec![values(&mut rng, &[b, c]), values(&mut rng, &[b, c])],
            wrt: vec![0, 1],
            build: Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                reduce(t, y)
            }),
        },
        "scale" => {
            let s = rng.random_range(-3.0..3.0);
            unary(values(&mut rng, &[b, c]), move |t, x| t.scale(x, s))
        }
        "sum" => Case {
            inputs: vec![values(&mut rng, &[b, c])],
            wrt: vec![0],
            build: Box::new(|t, v| {
                let s = t.sum(v[0])?;
                t.sum_squares(s)
            }),
        },
        "sum_squares" => Case {
            inputs: vec![values(&mut rng, &[b, c])],
            wrt: vec![0],
            build: Box::new(|t, v| t.sum_squares(v[0])),
        },
        other => panic!("unknown primitive {other}"),
    }
}

fn unary(x: Tensor<f64>, op: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static) -> Case {
    Case {
        inputs: vec![x],
        wrt: vec![0],
        build: Box::new(move |t, v| {
            let y = op(t, v[0])?;
            reduce(t, y)
        }),
    }
}

pub const NETWORKS: [&str; 3] = ["fusion", "adversary", "pooling"];

/// Random end-to-end networks built from the same primitives as the models.
pub fn network_case(name: &str, seed: u64) -> Case {
    let mut rng = rng_from(&[0xE2E, seed]);
    let b = rng.random_range(2..5usize);
    match name {
        // text -> sigmoid layer -> dropout -> sigmoid layer -> concat(x) -> sigmoid head -> RMSE
        "fusion" => {
            let (d, h1, h2, k) = (6, 5, 3, 2);
            let target: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
            Case {
                inputs: vec![
                    values(&mut rng, &[b, d]),
                    values(&mut rng, &[b, k]),
                    uniform(&mut rng, &[d, h1], -1.0, 1.0),
                    values(&mut rng, &[h1]),
                    uniform(&mut rng, &[h1, h2], -1.0, 1.0),
                    values(&mut rng, &[h2]),
                    uniform(&mut rng, &[h2 + k, 1], -1.0, 1.0),
                    values(&mut rng, &[1]),
                ],
                wrt: (0..8).collect(),
                build: Box::new(move |t, v| {
                    let a = t.affine(v[0], v[2], v[3])?;
                    let h = t.sigmoid(a)?;
                    let mut r = rng_from(&[0xD1, seed]);
                    let h = t.dropout(h, 0.3, &mut r, true)?;
                    let a2 = t.affine(h, v[4], v[5])?;
                    let l2 = t.sigmoid(a2)?;
                    let c = t.concat(l2, v[1])?;
                    let o = t.affine(c, v[6], v[7])?;
                    let y = t.sigmoid(o)?;
                    t.rmse_loss(y, &target)
                }),
            }
        }
        // latent -> sigmoid layer -> softmax posterior -> RMSE-free min-max objective
        "adversary" => {
            let (d, h) = (5, 4);
            let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
            Case {
                inputs: vec![
                    uniform(&mut rng, &[b, d], 0.0, 1.0),
                    uniform(&mut rng, &[d, h], -1.0, 1.0),
                    values(&mut rng, &[h]),
                    uniform(&mut rng, &[h, 2], -1.0, 1.0),
                    values(&mut rng, &[2]),
                ],
                wrt: (0..5).collect(),
                build: Box::new(move |t, v| {
                    let a = t.affine(v[0], v[1], v[2])?;
                    let s = t.sigmoid(a)?;
                    let logits = t.affine(s, v[3], v[4])?;
                    let q = t.softmax(logits)?;
                    let ne = t.neg_entropy(q)?;
                    let ce = t.cross_entropy(q, &labels)?;
                    let ne = t.scale(ne, 0.1)?;
                    let ce = t.scale(ce, -1.0)?;
                    t.add(ne, ce)
                }),
            }
        }
        // token rows -> masked mean pooling -> sigmoid layer -> squared sum
        "pooling" => {
            let (rows, d, o) = (6, 4, 3);
            let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            Case {
                inputs: vec![
                    values(&mut rng, &[rows, d]),
                    uniform(&mut rng, &[d, o], -1.0, 1.0),
                    values(&mut rng, &[o]),
                ],
                wrt: vec![0, 1, 2],
                build: Box::new(move |t, v| {
                    let p = t.mean_rows(v[0], &mask)?;
                    let a = t.affine(p, v[1], v[2])?;
                    let y = t.sigmoid(a)?;
                    reduce(t, y)
                }),
            }
        }
        other => panic!("unknown network {other}"),
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
