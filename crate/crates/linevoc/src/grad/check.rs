//! Finite-difference verification of every backward rule.
//!
//! The checker compares analytic gradients against central differences at
//! 64-bit precision: `rel = |analytic - numeric| / (|numeric| + 1e-8)` with
//! `numeric = (f(p + h) - f(p - h)) / 2h`. Test points are chosen so true
//! gradients stay well above the finite-difference noise floor.

use std::collections::BTreeMap;

use super::graph::{Graph, Node};
use super::tensor::{Param, Tensor};
use crate::rng::Rng;

pub const DEFAULT_H: f64 = 1e-5;
/// Relative-error bound every backward rule must meet at 64-bit precision.
pub const GRAD_TOL: f64 = 1e-4;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

/// Generic checker: `visit` enumerates the model's parameters in a stable
/// order, `build` constructs the scalar loss graph binding those parameters
/// by name. Parameter names must be unique within one check.
pub fn grad_check_with<M: ?Sized>(
    model: &mut M,
    visit: &mut dyn FnMut(&mut M, &mut dyn FnMut(&mut Param<f64>)),
    build: &mut dyn FnMut(&M) -> (Graph<f64>, Node<f64>),
    h: f64,
) -> CheckReport {
    grad_check_multi_h(model, visit, build, &[h])
}

/// Like [`grad_check_with`], but each coordinate is compared against central
/// differences at several step sizes and the best agreement counts. High
/// curvature wants a small step (truncation ~ h^2); gradients near the
/// rounding-noise floor want a large one (noise ~ 1/h). A wrong backward
/// rule disagrees at every step size.
pub fn grad_check_multi_h<M: ?Sized>(
    model: &mut M,
    visit: &mut dyn FnMut(&mut M, &mut dyn FnMut(&mut Param<f64>)),
    build: &mut dyn FnMut(&M) -> (Graph<f64>, Node<f64>),
    hs: &[f64],
) -> CheckReport {
    assert!(!hs.is_empty());
    // Analytic gradients.
    let (graph, loss) = build(model);
    assert!(
        loss.item().is_finite(),
        "loss is not finite at the probe point"
    );
    graph.backward(&loss);
    let analytic: BTreeMap<String, Tensor<f64>> = graph.param_grads().into_iter().collect();
    drop(graph);

    let mut sizes: Vec<(String, usize)> = Vec::new();
    visit(model, &mut |p| sizes.push((p.name.clone(), p.value.numel())));

    let bump = |model: &mut M,
                    visit: &mut dyn FnMut(&mut M, &mut dyn FnMut(&mut Param<f64>)),
                    pi: usize,
                    j: usize,
                    delta: f64| {
        let mut k = 0usize;
        visit(model, &mut |p| {
            if k == pi {
                p.value.data_mut()[j] += delta;
            }
            k += 1;
        });
    };

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for (pi, (name, numel)) in sizes.iter().enumerate() {
        let ana = analytic.get(name);
        for j in 0..*numel {
            let a = ana.map(|t| t.data()[j]).unwrap_or(0.0);
            let mut best_rel = f64::MAX;
            for &h in hs {
                bump(model, visit, pi, j, h);
                let lp = build(model).1.item();
                bump(model, visit, pi, j, -2.0 * h);
                let lm = build(model).1.item();
                bump(model, visit, pi, j, h);
                assert!(
                    lp.is_finite() && lm.is_finite(),
                    "loss not finite while probing {name}[{j}]"
                );
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
                best_rel = best_rel.min(rel);
            }
            if best_rel > report.max_rel_err {
                report.max_rel_err = best_rel;
                report.worst_param = name.clone();
                report.worst_index = j;
            }
        }
    }
    report
}

/// Checker over a flat list of named parameters; `build` receives the bound
/// nodes in the same order.
pub fn grad_check(
    params: &mut Vec<Param<f64>>,
    build: &dyn Fn(&Graph<f64>, &[Node<f64>]) -> Node<f64>,
    h: f64,
) -> CheckReport {
    grad_check_with(
        params,
        &mut |ps, f| {
            for p in ps.iter_mut() {
                f(p);
            }
        },
        &mut |ps| {
            let g = Graph::new();
            let nodes: Vec<Node<f64>> = ps.iter().map(|p| g.param(p)).collect();
            let loss = build(&g, &nodes);
            (g, loss)
        },
        h,
    )
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// One named finite-difference check over the built-in op set.
pub struct OpCheck {
    pub name: &'static str,
    pub report: CheckReport,
}

/// Run the finite-difference oracle against every registered op, returning
/// one row per op variant. All rows must satisfy [`GRAD_TOL`].
pub fn builtin_op_checks() -> Vec<OpCheck> {
    let mut rng = Rng::seed_from(0x0c0ffee);
    let mut out = Vec::new();
    let push = |name: &'static str,
                    rng: &mut Rng,
                    shapes: &[&[usize]],
                    ranges: &[(f64, f64)],
                    build: Box<dyn Fn(&Graph<f64>, &[Node<f64>]) -> Node<f64>>,
                    out: &mut Vec<OpCheck>| {
        let mut params: Vec<Param<f64>> = shapes
            .iter()
            .zip(ranges)
            .enumerate()
            .map(|(i, (shape, &(lo, hi)))| {
                Param::new(format!("p{i}"), rand_tensor(shape, lo, hi, rng))
            })
            .collect();
        let report = grad_check(&mut params, &|g, nodes| build(g, nodes), DEFAULT_H);
        out.push(OpCheck { name, report });
    };

    // Common scalarizer: mean(square(out * c)) with c minted per call on the
    // same graph (deterministic because the weights tensor is fixed across
    // probes of one check via closure capture).
    fn reduce(g: &Graph<f64>, out: &Node<f64>, seed: u64) -> Node<f64> {
        let shape = out.shape();
        let mut r = Rng::seed_from(seed);
        let w = g.constant(Tensor::from_fn(&shape, |_| r.uniform(0.5, 1.5)));
        out.mul(&w).square().mean()
    }

    push(
        "add",
        &mut rng,
        &[&[3, 4], &[3, 4]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].add(&n[1]), 11)),
        &mut out,
    );
    push(
        "add_row_broadcast",
        &mut rng,
        &[&[3, 4], &[4]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].add(&n[1]), 12)),
        &mut out,
    );
    push(
        "add_scalar_broadcast",
        &mut rng,
        &[&[3, 4], &[1]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].add(&n[1]), 13)),
        &mut out,
    );
    push(
        "add_scalar_const",
        &mut rng,
        &[&[5]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].add_scalar(0.7), 14)),
        &mut out,
    );
    push(
        "neg",
        &mut rng,
        &[&[5]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].neg(), 15)),
        &mut out,
    );
    push(
        "scale",
        &mut rng,
        &[&[5]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].scale(-2.3), 16)),
        &mut out,
    );
    push(
        "mul",
        &mut rng,
        &[&[3, 4], &[3, 4]],
        &[(0.5, 1.5), (0.5, 1.5)],
        Box::new(|g, n| reduce(g, &n[0].mul(&n[1]), 17)),
        &mut out,
    );
    push(
        "mul_row_broadcast",
        &mut rng,
        &[&[3, 4], &[4]],
        &[(0.5, 1.5), (0.5, 1.5)],
        Box::new(|g, n| reduce(g, &n[0].mul(&n[1]), 18)),
        &mut out,
    );
    push(
        "mul_scalar_broadcast",
        &mut rng,
        &[&[3, 4], &[1]],
        &[(0.5, 1.5), (0.5, 1.5)],
        Box::new(|g, n| reduce(g, &n[0].mul(&n[1]), 19)),
        &mut out,
    );
    push(
        "matmul",
        &mut rng,
        &[&[3, 4], &[4, 2]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].matmul(&n[1]), 20)),
        &mut out,
    );
    push(
        "transpose",
        &mut rng,
        &[&[3, 4]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].transpose(), 21)),
        &mut out,
    );
    push(
        "reshape",
        &mut rng,
        &[&[3, 4]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].reshape(&[2, 6]), 22)),
        &mut out,
    );
    push(
        "slice",
        &mut rng,
        &[&[4, 5]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].slice(1, 1, 3), 23)),
        &mut out,
    );
    push(
        "concat",
        &mut rng,
        &[&[2, 3], &[2, 2]],
        &[(-1.0, 1.0), (-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &Node::concat(&[n[0].clone(), n[1].clone()], 1), 24)),
        &mut out,
    );
    push(
        "frame1d",
        &mut rng,
        &[&[24]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].frame1d(8, 4), 25)),
        &mut out,
    );
    push(
        "conv1d",
        &mut rng,
        &[&[2, 10], &[3, 2, 3], &[3]],
        &[(-1.0, 1.0), (-1.0, 1.0), (-0.5, 0.5)],
        Box::new(|g, n| reduce(g, &n[0].conv1d(&n[1], Some(&n[2]), 1, 1, 1, 1), 26)),
        &mut out,
    );
    push(
        "conv1d_strided_dilated",
        &mut rng,
        &[&[2, 12], &[4, 2, 3], &[4]],
        &[(-1.0, 1.0), (-1.0, 1.0), (-0.5, 0.5)],
        Box::new(|g, n| reduce(g, &n[0].conv1d(&n[1], Some(&n[2]), 2, 2, 2, 1), 27)),
        &mut out,
    );
    push(
        "conv1d_grouped",
        &mut rng,
        &[&[4, 9], &[4, 2, 3], &[4]],
        &[(-1.0, 1.0), (-1.0, 1.0), (-0.5, 0.5)],
        Box::new(|g, n| reduce(g, &n[0].conv1d(&n[1], Some(&n[2]), 1, 1, 1, 2), 28)),
        &mut out,
    );
    push(
        "lv_conv1d",
        &mut rng,
        &[&[2, 12], &[3, 2, 2, 3], &[3, 2]],
        &[(-1.0, 1.0), (-1.0, 1.0), (-0.5, 0.5)],
        Box::new(|g, n| reduce(g, &n[0].lv_conv1d(&n[1], &n[2], 4), 45)),
        &mut out,
    );
    push(
        "conv2d",
        &mut rng,
        &[&[2, 5, 6], &[3, 2, 3, 3], &[3]],
        &[(-1.0, 1.0), (-1.0, 1.0), (-0.5, 0.5)],
        Box::new(|g, n| reduce(g, &n[0].conv2d(&n[1], Some(&n[2]), (2, 2), (1, 1)), 29)),
        &mut out,
    );
    push(
        "avg_pool1d",
        &mut rng,
        &[&[2, 10]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].avg_pool1d(2, 2), 30)),
        &mut out,
    );
    push(
        "mean",
        &mut rng,
        &[&[3, 4]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].mean(), 31)),
        &mut out,
    );
    push(
        "sum",
        &mut rng,
        &[&[3, 4]],
        &[(-0.5, 0.5)],
        Box::new(|g, n| reduce(g, &n[0].sum(), 32)),
        &mut out,
    );
    push(
        "square",
        &mut rng,
        &[&[5]],
        &[(0.5, 1.5)],
        Box::new(|g, n| reduce(g, &n[0].square(), 33)),
        &mut out,
    );
    push(
        "sqrt",
        &mut rng,
        &[&[5]],
        &[(0.5, 1.5)],
        Box::new(|g, n| reduce(g, &n[0].sqrt(), 34)),
        &mut out,
    );
    push(
        "exp",
        &mut rng,
        &[&[5]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].exp(), 35)),
        &mut out,
    );
    push(
        "log",
        &mut rng,
        &[&[5]],
        &[(0.5, 2.0)],
        Box::new(|g, n| reduce(g, &n[0].log(), 36)),
        &mut out,
    );
    push(
        "softmax",
        &mut rng,
        &[&[3, 4]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].softmax(1), 37)),
        &mut out,
    );
    push(
        "softmax_axis0",
        &mut rng,
        &[&[3, 4]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].softmax(0), 38)),
        &mut out,
    );
    push(
        "gelu",
        &mut rng,
        &[&[6]],
        &[(-2.0, 2.0)],
        Box::new(|g, n| reduce(g, &n[0].gelu(), 39)),
        &mut out,
    );
    push(
        "leaky_relu",
        &mut rng,
        &[&[6]],
        &[(-2.0, 2.0)],
        Box::new(|g, n| reduce(g, &n[0].leaky_relu(0.2), 40)),
        &mut out,
    );
    push(
        "layer_norm",
        &mut rng,
        &[&[3, 6]],
        &[(-1.0, 1.0)],
        Box::new(|g, n| reduce(g, &n[0].layer_norm(1, 1e-5), 41)),
        &mut out,
    );
    push(
        "sqrt_of_sum_of_squares",
        &mut rng,
        &[&[4], &[4]],
        &[(0.3, 1.0), (0.3, 1.0)],
        Box::new(|g, n| {
            // The magnitude composition used by the spectral losses.
            reduce(g, &n[0].square().add(&n[1].square()).sqrt(), 42)
        }),
        &mut out,
    );
    out
}

/// A deliberately wrong analytic gradient compared against the same
/// finite-difference oracle. Used to prove the harness actually fails when a
/// backward rule is corrupted.
pub fn corrupted_rule_check() -> CheckReport {
    let x = 1.3f64;
    let loss = |v: f64| v * v;
    let h = DEFAULT_H;
    let numeric = (loss(x + h) - loss(x - h)) / (2.0 * h);
    let analytic_wrong = 2.0 * x * 1.37;
    CheckReport {
        max_rel_err: (analytic_wrong - numeric).abs() / (numeric.abs() + 1e-8),
        worst_param: "corrupted".into(),
        worst_index: 0,
    }
}
