//! Central finite-difference verification of backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Conv2dSpec, Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so gradients that are
/// zero up to round-off do not divide by zero.
pub const RELATIVE_FLOOR: f64 = 1e-4;

pub type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable function of a few tensors, reduced to a scalar.
pub struct GradCase {
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Fault injection for harness self-tests: scales analytic gradients so a
/// correct backward rule looks wrong.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Fault {
    #[default]
    None,
    ScaleAnalytic(f64),
}

fn run_forward(case: &GradCase, inputs: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), requires_grad))
        .collect();
    let out = (case.forward)(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|,
/// RELATIVE_FLOOR)` over every input element.
pub fn max_relative_error(case: &GradCase, h: f64, fault: Fault) -> Result<f64> {
    let (tape, vars, out) = run_forward(case, &case.inputs, true)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        for j in 0..input.len() {
            let mut probe = case.inputs.clone();
            probe[i].data_mut()[j] += h;
            let (t, _, o) = run_forward(case, &probe, false)?;
            let plus = t.value(o).item();
            probe[i].data_mut()[j] -= 2.0 * h;
            let (t, _, o) = run_forward(case, &probe, false)?;
            let minus = t.value(o).item();
            let numeric = (plus - minus) / (2.0 * h);
            let mut a = analytic.data()[j];
            if let Fault::ScaleAnalytic(s) = fault {
                a *= s;
            }
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Runs `trials` random instances produced by `make` and keeps the worst.
pub fn check_cases(
    name: &str,
    trials: usize,
    fault: Fault,
    mut make: impl FnMut(usize) -> GradCase,
) -> Result<GradCheckResult> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let case = make(t);
        worst = worst.max(max_relative_error(&case, FD_STEP, fault)?);
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        trials,
        max_rel_error: worst,
        passed: worst < FD_TOLERANCE,
    })
}

pub(crate) fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = super::numel(shape);
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Sums `y` against fixed random weights so every output element reaches
/// the scalar with a distinct coefficient.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = rand_tensor(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn dims<R: Rng>(rng: &mut R, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=max)).collect()
}

type Builder = fn(&mut ChaCha8Rng, u64) -> GradCase;

fn unary_case(rng: &mut ChaCha8Rng, seed: u64, lo: f64, hi: f64, f: fn(&mut Tape, Var) -> Result<Var>) -> GradCase {
    let rank = rng.gen_range(1..=3);
    let shape = dims(rng, rank, 4);
    GradCase {
        inputs: vec![rand_tensor(rng, &shape, lo, hi)],
        forward: Box::new(move |t, v| {
            let y = f(t, v[0])?;
            project(t, y, seed)
        }),
    }
}

fn broadcast_case(rng: &mut ChaCha8Rng, seed: u64, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> GradCase {
    let rank = rng.gen_range(1..=3);
    let shape = dims(rng, rank, 4);
    let keep = rng.gen_range(0..=rank);
    let b_shape = shape[rank - keep..].to_vec();
    GradCase {
        inputs: vec![
            rand_tensor(rng, &shape, -2.0, 2.0),
            rand_tensor(rng, &b_shape, -2.0, 2.0),
        ],
        forward: Box::new(move |t, v| {
            let y = f(t, v[0], v[1])?;
            project(t, y, seed)
        }),
    }
}

fn primitive_builders() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |r, s| broadcast_case(r, s, |t, a, b| t.add(a, b))),
        ("sub", |r, s| broadcast_case(r, s, |t, a, b| t.sub(a, b))),
        ("mul", |r, s| broadcast_case(r, s, |t, a, b| t.mul(a, b))),
        ("scale", |r, s| unary_case(r, s, -2.0, 2.0, |t, a| Ok(t.scale(a, -1.7)))),
        ("add_scalar", |r, s| unary_case(r, s, -2.0, 2.0, |t, a| Ok(t.add_scalar(a, 0.3)))),
        ("matmul", |r, s| {
            let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            let batched = r.gen_bool(0.5);
            let (sa, sb) = if batched {
                let b = r.gen_range(1..4);
                (vec![b, m, k], vec![b, k, n])
            } else {
                (vec![m, k], vec![k, n])
            };
            GradCase {
                inputs: vec![rand_tensor(r, &sa, -1.0, 1.0), rand_tensor(r, &sb, -1.0, 1.0)],
                forward: Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, s)
                }),
            }
        }),
        ("transpose", |r, s| {
            let rank = r.gen_range(2..=3);
            let shape = dims(r, rank, 4);
            GradCase {
                inputs: vec![rand_tensor(r, &shape, -1.0, 1.0)],
                forward: Box::new(move |t, v| {
                    let y = t.transpose(v[0])?;
                    project(t, y, s)
                }),
            }
        }),
        ("permute", |r, s| {
            let shape = dims(r, 3, 3);
            let perms = [[0, 2, 1], [1, 0, 2], [2, 0, 1], [1, 2, 0], [2, 1, 0]];
            let axes = perms[r.gen_range(0..perms.len())];
            GradCase {
                inputs: vec![rand_tensor(r, &shape, -1.0, 1.0)],
                forward: Box::new(move |t, v| {
                    let y = t.permute(v[0], &axes)?;
                    project(t, y, s)
                }),
            }
        }),
        ("reshape", |r, s| {
            let (a, b) = (r.gen_range(1..5), r.gen_range(1..5));
            GradCase {
                inputs: vec![rand_tensor(r, &[a, b], -1.0, 1.0)],
                forward: Box::new(move |t, v| {
                    let y = t.reshape(v[0], &[b, a])?;
                    project(t, y, s)
                }),
            }
        }),
        ("concat", |r, s| {
            let rank = r.gen_range(1..=3);
            let axis = r.gen_range(0..rank);
            let base = dims(r, rank, 3);
            let mut other = base.clone();
            other[axis] = r.gen_range(1..4);
            GradCase {
                inputs: vec![rand_tensor(r, &base, -1.0, 1.0), rand_tensor(r, &other, -1.0, 1.0)],
                forward: Box::new(move |t, v| {
                    let y = t.concat(&[v[0], v[1], v[0]], axis)?;
                    project(t, y, s)
                }),
            }
        }),
        ("slice", |r, s| {
            let rank = r.gen_range(1..=3);
            let axis = r.gen_range(0..rank);
            let mut shape = dims(r, rank, 4);
            shape[axis] = r.gen_range(2..6);
            let start = r.gen_range(0..shape[axis] - 1);
            let end = r.gen_range(start + 1..=shape[axis]);
            GradCase {
                inputs: vec![rand_tensor(r, &shape, -1.0, 1.0)],
                forward: Box::new(move |t, v| {
                    let y = t.slice(v[0], axis, start, end)?;
                    project(t, y, s)
                }),
            }
        }),
        ("gather_rows", |r, s| {
            let (n, c) = (r.gen_range(1..6), r.gen_range(1..4));
            let rows: Vec<usize> = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..n)).collect();
            GradCase {
                inputs: vec![rand_tensor(r, &[n, c], -1.0, 1.0)],
                forward: Box::new(move |t, v| {
                    let y = t.gather_rows(v[0], &rows)?;
                    project(t, y, s)
                }),
            }
        }),
        ("sum", |r, s| unary_case(r, s, -2.0, 2.0, |t, a| {
            let y = t.sum(a);
            Ok(t.scale(y, 1.3))
        })),
        ("mean", |r, s| unary_case(r, s, -2.0, 2.0, |t, a| Ok(t.mean(a)))),
        ("max", |r, s| unary_case(r, s, -2.0, 2.0, |t, a| Ok(t.max(a)))),
        ("exp", |r, s| unary_case(r, s, -2.0, 2.0, |t, a| Ok(t.exp(a)))),
        ("log", |r, s| unary_case(r, s, 0.2, 3.0, |t, a| Ok(t.log(a)))),
        ("sqrt", |r, s| unary_case(r, s, 0.2, 3.0, |t, a| Ok(t.sqrt(a)))),
        ("relu", |r, s| {
            let mut case = unary_case(r, s, -2.0, 2.0, |t, a| Ok(t.relu(a)));
            // finite differences are undefined at the kink
            for x in case.inputs[0].data_mut() {
                if x.abs() < 1e-3 {
                    *x += 2e-3f64.copysign(*x);
                }
            }
            case
        }),
        ("gelu", |r, s| unary_case(r, s, -3.0, 3.0, |t, a| Ok(t.gelu(a)))),
        ("sigmoid", |r, s| unary_case(r, s, -4.0, 4.0, |t, a| Ok(t.sigmoid(a)))),
        ("softmax", |r, s| {
            let rank = r.gen_range(1..=3);
            let axis = r.gen_range(0..rank);
            let shape = dims(r, rank, 4);
            GradCase {
                inputs: vec![rand_tensor(r, &shape, -2.0, 2.0)],
                forward: Box::new(move |t, v| {
                    let y = t.softmax(v[0], axis)?;
                    project(t, y, s)
                }),
            }
        }),
        ("layer_norm", |r, s| {
            let rank = r.gen_range(1..=3);
            let axis = r.gen_range(0..rank);
            let mut shape = dims(r, rank, 4);
            shape[axis] = r.gen_range(2..6);
            GradCase {
                inputs: vec![rand_tensor(r, &shape, -2.0, 2.0)],
                forward: Box::new(move |t, v| {
                    let y = t.layer_norm(v[0], axis)?;
                    project(t, y, s)
                }),
            }
        }),
        ("dropout", |r, s| unary_case(r, s, -2.0, 2.0, |t, a| {
            // same mask on every call: the rng is reseeded per forward
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            t.dropout(a, 0.1, true, &mut rng)
        })),
        ("bilinear_sample", |r, s| {
            let (c, h, w) = (r.gen_range(1..4), r.gen_range(2..5), r.gen_range(2..5));
            let k = r.gen_range(1..5);
            let coords: Vec<f64> = (0..k)
                .flat_map(|_| {
                    // keep away from integer nodes where the stencil switches
                    let x = r.gen_range(0..w - 1) as f64 + r.gen_range(0.05..0.95);
                    let y = r.gen_range(0..h - 1) as f64 + r.gen_range(0.05..0.95);
                    [x, y]
                })
                .collect();
            GradCase {
                inputs: vec![
                    rand_tensor(r, &[c, h, w], -1.0, 1.0),
                    Tensor::from_parts(vec![k, 2], coords),
                ],
                forward: Box::new(move |t, v| {
                    let y = t.bilinear_sample(v[0], v[1])?;
                    project(t, y, s)
                }),
            }
        }),
        ("conv2d", |r, s| {
            let (cin, cout) = (r.gen_range(1..3), r.gen_range(1..3));
            let (h, w) = (r.gen_range(2..5), r.gen_range(2..5));
            let kernel = if r.gen_bool(0.7) { 3 } else { 1 };
            let dilation = r.gen_range(1..=2);
            let spec = Conv2dSpec { kernel, dilation };
            GradCase {
                inputs: vec![
                    rand_tensor(r, &[cin, h, w], -1.0, 1.0),
                    rand_tensor(r, &[cout, cin, kernel, kernel], -1.0, 1.0),
                    rand_tensor(r, &[cout], -1.0, 1.0),
                ],
                forward: Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], spec)?;
                    project(t, y, s)
                }),
            }
        }),
        ("max_pool2", |r, s| {
            let (c, h, w) = (r.gen_range(1..3), r.gen_range(2..6), r.gen_range(2..6));
            GradCase {
                inputs: vec![rand_tensor(r, &[c, h, w], -1.0, 1.0)],
                forward: Box::new(move |t, v| {
                    let y = t.max_pool2(v[0])?;
                    project(t, y, s)
                }),
            }
        }),
    ]
}

/// Checks every tape primitive on `trials` random shapes and values.
pub fn primitive_suite(seed: u64, trials: usize, fault: Fault) -> Result<Vec<GradCheckResult>> {
    primitive_builders()
        .into_iter()
        .enumerate()
        .map(|(i, (name, build))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 * i as u64));
            check_cases(name, trials, fault, |t| {
                let case_seed = seed ^ ((i as u64) << 32) ^ t as u64;
                build(&mut rng, case_seed)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_finite_differences() {
        for r in primitive_suite(7, 100, Fault::None).unwrap() {
            assert!(r.passed, "{} max rel error {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let results = primitive_suite(7, 3, Fault::ScaleAnalytic(1.5)).unwrap();
        assert!(results.iter().all(|r| !r.passed));
    }

    #[test]
    fn smooth_composite_matches_fd() {
        // mean(x * x) / (1 + sum(exp(x)))-style composite
        let case = GradCase {
            inputs: vec![Tensor::new(vec![3, 2], vec![0.3, -0.7, 1.1, 0.2, -1.4, 0.9]).unwrap()],
            forward: Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                let m = t.mean(sq);
                let e = t.exp(v[0]);
                let s = t.sum(e);
                let d = t.add_scalar(s, 1.0);
                let inv = t.log(d);
                let n = t.scale(inv, -1.0);
                let w = t.exp(n);
                t.mul(m, w)
            }),
        };
        assert!(max_relative_error(&case, FD_STEP, Fault::None).unwrap() < FD_TOLERANCE);
    }
}
