//! Finite-difference gradient suite over every tape primitive, layer and
//! loss, each on randomized shapes.
//!
//! Non-scalar outputs are reduced with a fixed random weighting, so a graph
//! whose plain sum is constant (standardization, normalization) still has a
//! non-trivial gradient. Loss inputs are row-normalized inside the graph and
//! pseudo-label masks are frozen at the unperturbed point.
//!
//! `stop_gradient` is absent by construction: finite differences see through
//! it. Its zero gradient is asserted directly by the tests.

use rand::Rng as _;

use crate::loss::{self, LossConfig};
use crate::nn::{self, Mode};
use crate::rng::{self, Rng};
use crate::tensor::kernels::GroupLayout;
use crate::tensor::{grad_check, GradCheckOptions, Result, Tape, Tensor, Var};

type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One randomized instance: the inputs and the scalar graph over them.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub graph: Graph,
}

/// Outcome of all instances of one case.
#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// Elements skipped because a perturbation crossed a kink.
    pub excluded: usize,
    pub shapes: Vec<Vec<Vec<usize>>>,
    pub error: Option<String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.error.is_none()
    }
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    normal(rng, shape).map(|v| 0.5 + v.abs() * 1.5)
}

/// `sum(y * w)` with `w` drawn from `seed`.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = normal(&mut rng::seeded(seed), &shape);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Wraps an elementwise or structural op into a weighted-sum graph.
fn reduce(seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Graph {
    Box::new(move |t, v| {
        let y = f(t, v)?;
        weighted_sum(t, y, seed)
    })
}

type Maker = fn(&mut Rng, u64) -> Instance;

fn unary(rng: &mut Rng, seed: u64, pos: bool, f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Instance {
    let rank = dim(rng, 1, 3);
    let shape: Vec<usize> = (0..rank).map(|_| dim(rng, 1, 4)).collect();
    let x = if pos { positive(rng, &shape) } else { normal(rng, &shape) };
    Instance {
        inputs: vec![x],
        graph: reduce(seed, move |t, v| f(t, v[0])),
    }
}

/// Two operands with a random broadcast pattern.
fn binary(rng: &mut Rng, seed: u64, pos_rhs: bool, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Instance {
    let rank = dim(rng, 1, 3);
    let shape: Vec<usize> = (0..rank).map(|_| dim(rng, 1, 4)).collect();
    let other: Vec<usize> = shape
        .iter()
        .map(|&d| if rng.random_bool(0.3) { 1 } else { d })
        .collect();
    let (sa, sb) = if rng.random_bool(0.5) { (shape, other) } else { (other, shape) };
    let a = normal(rng, &sa);
    let b = if pos_rhs { positive(rng, &sb) } else { normal(rng, &sb) };
    Instance {
        inputs: vec![a, b],
        graph: reduce(seed, move |t, v| f(t, v[0], v[1])),
    }
}

fn image_shape(rng: &mut Rng) -> Vec<usize> {
    vec![dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 2, 5), dim(rng, 2, 5)]
}

fn pair_rows(rng: &mut Rng) -> (usize, usize) {
    (dim(rng, 2, 6), dim(rng, 2, 5))
}

/// Threshold settings that make both masks non-empty for random rows.
fn loss_config() -> LossConfig {
    LossConfig {
        lambda: 0.3,
        theta_p: 0.2,
        theta_n: -0.2,
        ..LossConfig::default()
    }
}

/// Normalized `q`, `z` plus masks frozen at the base point.
fn loss_instance(rng: &mut Rng, f: fn(&mut Tape<f64>, Var, Var, &LossConfig, &loss::SimilarityMatrix) -> Result<Var>) -> Instance {
    let (n, d) = pair_rows(rng);
    let q = normal(rng, &[n, d]);
    let z = normal(rng, &[n, d]);
    let cfg = loss_config();
    let masks = {
        let mut t = Tape::<f64>::new();
        let (a, b) = (t.constant(q.clone()), t.constant(z.clone()));
        let (a, b) = (t.l2_normalize(a).expect("rows"), t.l2_normalize(b).expect("rows"));
        loss::pair_masks(&t, a, b, &cfg).expect("same shape")
    };
    Instance {
        inputs: vec![q, z],
        graph: Box::new(move |t, v| {
            let q = t.l2_normalize(v[0])?;
            let z = t.l2_normalize(v[1])?;
            f(t, q, z, &cfg, &masks)
        }),
    }
}

fn cases() -> Vec<(&'static str, Maker)> {
    vec![
        ("add", |r, s| binary(r, s, false, |t, a, b| t.add(a, b))),
        ("sub", |r, s| binary(r, s, false, |t, a, b| t.sub(a, b))),
        ("mul", |r, s| binary(r, s, false, |t, a, b| t.mul(a, b))),
        ("div", |r, s| binary(r, s, true, |t, a, b| t.div(a, b))),
        ("scale", |r, s| unary(r, s, false, |t, a| t.scale(a, -1.7))),
        ("neg", |r, s| unary(r, s, false, |t, a| t.neg(a))),
        ("add_scalar", |r, s| unary(r, s, false, |t, a| t.add_scalar(a, 0.3))),
        ("relu", |r, s| unary(r, s, false, |t, a| t.relu(a))),
        ("sigmoid", |r, s| unary(r, s, false, |t, a| t.sigmoid(a))),
        ("log", |r, s| unary(r, s, true, |t, a| t.log(a))),
        ("exp", |r, s| unary(r, s, false, |t, a| t.exp(a))),
        ("sqrt", |r, s| unary(r, s, true, |t, a| t.sqrt(a))),
        ("sum_all", |r, _| {
            let shape = image_shape(r);
            let x = normal(r, &shape);
            Instance {
                inputs: vec![x],
                graph: Box::new(|t, v| {
                    let y = t.mul(v[0], v[0])?;
                    t.sum_all(y)
                }),
            }
        }),
        ("mean_all", |r, _| {
            let shape = image_shape(r);
            let x = normal(r, &shape);
            Instance {
                inputs: vec![x],
                graph: Box::new(|t, v| {
                    let y = t.mul(v[0], v[0])?;
                    t.mean_all(y)
                }),
            }
        }),
        ("sum", |r, s| {
            let shape = image_shape(r);
            let axis = dim(r, 0, 3);
            let keep = r.random_bool(0.5);
            Instance {
                inputs: vec![normal(r, &shape)],
                graph: reduce(s, move |t, v| t.sum(v[0], &[axis], keep)),
            }
        }),
        ("mean", |r, s| {
            let shape = image_shape(r);
            let axes = if r.random_bool(0.5) { vec![0, 2] } else { vec![1] };
            Instance {
                inputs: vec![normal(r, &shape)],
                graph: reduce(s, move |t, v| t.mean(v[0], &axes, true)),
            }
        }),
        ("matmul", |r, s| {
            let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
            Instance {
                inputs: vec![normal(r, &[m, k]), normal(r, &[k, n])],
                graph: reduce(s, |t, v| t.matmul(v[0], v[1])),
            }
        }),
        ("transpose", |r, s| {
            let (m, n) = (dim(r, 1, 5), dim(r, 1, 5));
            Instance {
                inputs: vec![normal(r, &[m, n])],
                graph: reduce(s, |t, v| t.transpose(v[0])),
            }
        }),
        ("reshape", |r, s| {
            let shape = image_shape(r);
            let flat = shape.iter().product::<usize>();
            Instance {
                inputs: vec![normal(r, &shape)],
                graph: reduce(s, move |t, v| t.reshape(v[0], &[flat])),
            }
        }),
        ("concat", |r, s| {
            let (a, b, c) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4));
            let axis = dim(r, 0, 1);
            let (sa, sb) = if axis == 0 { ([a, c], [b, c]) } else { ([c, a], [c, b]) };
            Instance {
                inputs: vec![normal(r, &sa), normal(r, &sb)],
                graph: reduce(s, move |t, v| t.concat(&[v[0], v[1]], axis)),
            }
        }),
        ("conv2d", |r, s| {
            let x = image_shape(r);
            let (o, k) = (dim(r, 1, 3), dim(r, 1, 3).min(x[2]).min(x[3]));
            let stride = dim(r, 1, 2);
            let pad = dim(r, 0, 1);
            Instance {
                inputs: vec![normal(r, &x), normal(r, &[o, x[1], k, k])],
                graph: reduce(s, move |t, v| t.conv2d(v[0], v[1], stride, pad)),
            }
        }),
        ("max_pool2d", |r, s| {
            let x = image_shape(r);
            let k = dim(r, 2, 3).min(x[2]).min(x[3]);
            let stride = dim(r, 1, 2);
            Instance {
                inputs: vec![normal(r, &x)],
                graph: reduce(s, move |t, v| t.max_pool2d(v[0], k, stride, k / 2)),
            }
        }),
        ("l2_normalize", |r, s| {
            let (n, d) = pair_rows(r);
            Instance {
                inputs: vec![normal(r, &[n, d])],
                graph: reduce(s, |t, v| t.l2_normalize(v[0])),
            }
        }),
        ("standardize", |r, s| {
            let layout = GroupLayout {
                outer: dim(r, 1, 3),
                groups: dim(r, 1, 3),
                inner: dim(r, 2, 4),
            };
            Instance {
                inputs: vec![normal(r, &[layout.outer, layout.groups, layout.inner])],
                graph: reduce(s, move |t, v| t.standardize(v[0], layout, 1e-5)),
            }
        }),
        ("batch_norm", |r, s| {
            let mut x = image_shape(r);
            x[0] = x[0].max(2);
            let c = x[1];
            Instance {
                inputs: vec![normal(r, &x), positive(r, &[c]), normal(r, &[c])],
                graph: reduce(s, |t, v| nn::batch_norm(t, v[0], v[1], v[2], nn::NORM_EPS, None)),
            }
        }),
        ("batch_norm_inference", |r, s| {
            let x = image_shape(r);
            let c = x[1];
            let mean = normal(r, &[c]).to_f64_vec();
            let var = positive(r, &[c]).to_f64_vec();
            Instance {
                inputs: vec![normal(r, &x), positive(r, &[c]), normal(r, &[c])],
                graph: reduce(s, move |t, v| nn::batch_norm(t, v[0], v[1], v[2], nn::NORM_EPS, Some((&mean, &var)))),
            }
        }),
        ("layer_norm", |r, s| {
            let x = image_shape(r);
            let c = x[1];
            Instance {
                inputs: vec![normal(r, &x), positive(r, &[c]), normal(r, &[c])],
                graph: reduce(s, |t, v| nn::layer_norm(t, v[0], v[1], v[2], nn::NORM_EPS)),
            }
        }),
        ("group_norm", |r, s| {
            let groups = dim(r, 1, 3);
            let mut x = image_shape(r);
            x[1] = groups * dim(r, 1, 2);
            let c = x[1];
            Instance {
                inputs: vec![normal(r, &x), positive(r, &[c]), normal(r, &[c])],
                graph: reduce(s, move |t, v| nn::group_norm(t, v[0], groups, v[1], v[2], nn::NORM_EPS)),
            }
        }),
        ("weight_standardize", |r, s| {
            let shape = [dim(r, 1, 4), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let mut shape = shape.to_vec();
            if shape[1..].iter().product::<usize>() < 2 {
                shape[1] = 2;
            }
            Instance {
                inputs: vec![normal(r, &shape)],
                graph: reduce(s, |t, v| nn::weight_standardize(t, v[0], nn::WS_EPS)),
            }
        }),
        ("linear", |r, s| {
            let (n, i, o) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 5));
            Instance {
                inputs: vec![normal(r, &[n, i]), normal(r, &[o, i]), normal(r, &[o])],
                graph: reduce(s, |t, v| nn::linear(t, v[0], v[1], Some(v[2]))),
            }
        }),
        ("dropout", |r, s| {
            let (n, d) = pair_rows(r);
            Instance {
                inputs: vec![normal(r, &[n, d])],
                graph: reduce(s, move |t, v| {
                    let mut mask_rng = rng::seeded(s);
                    nn::dropout(t, v[0], 0.3, Mode::Train, &mut mask_rng)
                }),
            }
        }),
        ("byol", |r, _| loss_instance(r, |t, q, z, _, _| loss::byol_pair_loss(t, q, z))),
        ("ccsl", |r, _| {
            loss_instance(r, |t, q, z, c, m| Ok(loss::ccsl_loss_masked(t, q, z, c, m, false)?.total))
        }),
        ("ccsl-with-repulsion", |r, _| {
            loss_instance(r, |t, q, z, c, m| Ok(loss::ccsl_loss_masked(t, q, z, c, m, true)?.total))
        }),
        ("cssl", |r, _| {
            loss_instance(r, |t, q, z, c, m| Ok(loss::cssl_loss_masked(t, q, z, c, m)?.total))
        }),
        ("nt_xent", |r, _| {
            let (n, d) = pair_rows(r);
            let temp = r.random_range(0.2..1.0);
            Instance {
                inputs: vec![normal(r, &[n, d]), normal(r, &[n, d])],
                graph: Box::new(move |t, v| loss::nt_xent(t, v[0], v[1], temp)),
            }
        }),
    ]
}

/// Case names in suite order.
pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs `per_case` randomized instances of every case whose name passes
/// `filter`.
pub fn gradient_suite(seed: u64, per_case: usize, opts: &GradCheckOptions, filter: impl Fn(&str) -> bool) -> Vec<CaseOutcome> {
    let mut out = Vec::new();
    for (name, make) in cases() {
        if !filter(name) {
            continue;
        }
        let mut outcome = CaseOutcome {
            name,
            instances: 0,
            failures: 0,
            max_rel_error: 0.0,
            excluded: 0,
            shapes: Vec::new(),
            error: None,
        };
        for k in 0..per_case {
            let case_seed = rng::derive_indexed(seed, name, k as u64);
            let mut r = rng::seeded(case_seed);
            let inst = make(&mut r, rng::derive(case_seed, "weights"));
            outcome.shapes.push(inst.inputs.iter().map(|t| t.shape().to_vec()).collect());
            match grad_check(&inst.graph, &inst.inputs, opts) {
                Ok(report) => {
                    outcome.instances += 1;
                    outcome.excluded += report.excluded();
                    outcome.max_rel_error = outcome.max_rel_error.max(report.max_rel_error());
                    if !report.passed() {
                        outcome.failures += 1;
                    }
                }
                Err(e) => {
                    outcome.error = Some(format!("instance {k}: {e}"));
                    break;
                }
            }
        }
        out.push(outcome);
    }
    out
}
