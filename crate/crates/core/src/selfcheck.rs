//! Finite-difference gradient suite over every primitive and the full
//! composed loss of a tiny model.

use std::time::Instant;

use serde::Serialize;

use crate::data::{generate_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::gradcore::gradcheck::{check_gradients, GradCheckConfig, GradCheckResult};
use crate::gradcore::{Axis, ParamStore, Rng, Shape, Tape, Tensor, Var};
use crate::losses::{loss_grad, loss_log, total_loss, LossWeights};
use crate::network::{DepthNet, NetworkConfig};
use crate::ordhead::{confidence, expected_label, ordinal_loss, pair_softmax, soft_decode};
use crate::sid::{encode_rank, label_to_depth_var, make_thresholds, LabelMap, SidThresholds};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;
/// Spatial size of every primitive input and of the tiny model.
pub const SIDE: usize = 8;
pub const TINY_K: usize = 4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub results: Vec<GradCheckResult>,
    pub passed: bool,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn names(&self) -> Vec<&str> {
        self.results.iter().map(|r| r.name.as_str()).collect()
    }

    /// One human-readable line per component.
    pub fn lines(&self) -> Vec<String> {
        self.results
            .iter()
            .map(|r| {
                format!(
                    "{:<18} max_rel_err {:.3e}  tol {:.0e}  entries {:>4}  kinks {:>2}  {}",
                    r.name,
                    r.max_rel_error,
                    r.tolerance,
                    r.checked,
                    r.nonsmooth,
                    if r.passed { "PASS" } else { "FAIL" }
                )
            })
            .collect()
    }
}

/// Tiny model used for the composed check.
pub fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        k: TINY_K,
        input_channels: 3,
        base_width: 2,
        fusion_width: 2,
        stages: 3,
        refinement: true,
        detach_confidence: false,
    }
}

fn shape(c: usize) -> Shape {
    Shape::new(1, c, SIDE, SIDE)
}

fn uniform(rng: &mut Rng, s: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(s, |_| rng.uniform(lo, hi))
}

/// Values with magnitude in `[gap, gap + 1)` and random sign, away from
/// the kink at 0.
fn away_from_zero(rng: &mut Rng, s: Shape, gap: f64) -> Tensor {
    Tensor::from_fn(s, |_| {
        let v = gap + rng.uniform(0.0, 1.0);
        if rng.below(2) == 0 {
            v
        } else {
            -v
        }
    })
}

fn store(items: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in items {
        s.insert_tensor(n, t).expect("unique names");
    }
    s
}

type Case = (
    &'static str,
    ParamStore,
    Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>,
);

fn unary(name: &'static str, x: Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    (
        name,
        store(vec![("x", x)]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            f(t, x)
        }),
    )
}

fn binary(name: &'static str, a: Tensor, b: Tensor, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Case {
    (
        name,
        store(vec![("a", a), ("b", b)]),
        Box::new(move |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            f(t, a, b)
        }),
    )
}

fn primitive_cases(rng: &mut Rng, th: &SidThresholds) -> Vec<Case> {
    let n = TINY_K - 1;
    let mut cases: Vec<Case> = Vec::new();
    let s2 = shape(2);
    cases.push(binary(
        "add",
        uniform(rng, s2, -1.0, 1.0),
        uniform(rng, s2, -1.0, 1.0),
        Tape::add,
    ));
    cases.push(binary(
        "sub",
        uniform(rng, s2, -1.0, 1.0),
        uniform(rng, s2, -1.0, 1.0),
        Tape::sub,
    ));
    cases.push(binary(
        "mul",
        uniform(rng, s2, -1.0, 1.0),
        uniform(rng, s2, -1.0, 1.0),
        Tape::mul,
    ));
    cases.push(unary("relu", away_from_zero(rng, s2, 0.05), Tape::relu));
    cases.push(unary("abs", away_from_zero(rng, s2, 0.05), Tape::abs));
    cases.push(unary("sigmoid", uniform(rng, s2, -3.0, 3.0), Tape::sigmoid));
    cases.push(unary("exp", uniform(rng, s2, -2.0, 2.0), Tape::exp));
    cases.push(unary("log", uniform(rng, s2, 0.2, 3.0), Tape::log));
    cases.push(unary("scale", uniform(rng, s2, -1.0, 1.0), |t, x| t.scale(x, -1.7)));
    cases.push(unary("add_scalar", uniform(rng, s2, -1.0, 1.0), |t, x| {
        t.add_scalar(x, 0.3)
    }));
    // interior points and points clamped on either side, none near a bound
    let clamp_in = Tensor::from_fn(s2, |[_, c, h, w]| match (c + h + w) % 3 {
        0 => -0.9,
        1 => 0.1 + 0.01 * (h * SIDE + w) as f64 / 2.0,
        _ => 1.9,
    });
    cases.push(unary("clamp", clamp_in, |t, x| t.clamp(x, -0.5, 1.5)));
    cases.push(unary("sum", uniform(rng, s2, -1.0, 1.0), Tape::sum));
    cases.push(unary(
        "sum_channels",
        uniform(rng, shape(3), -1.0, 1.0),
        Tape::sum_channels,
    ));
    let mask = Tensor::from_fn(shape(1), |[_, _, h, w]| f64::from((h + 2 * w) % 3 != 0));
    cases.push((
        "reduce_mean",
        store(vec![("x", uniform(rng, s2, -1.0, 1.0))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            t.reduce_mean(x, Some(&mask))
        }),
    ));
    cases.push(binary(
        "concat_channels",
        uniform(rng, shape(1), -1.0, 1.0),
        uniform(rng, s2, -1.0, 1.0),
        |t, a, b| t.concat_channels(&[a, b]),
    ));
    cases.push(unary(
        "upsample_nearest",
        uniform(rng, Shape::new(1, 2, SIDE / 2, SIDE / 2), -1.0, 1.0),
        |t, x| t.upsample_nearest(x, 2),
    ));
    cases.push(unary("diff_x", uniform(rng, s2, -1.0, 1.0), |t, x| {
        t.forward_diff(x, Axis::X)
    }));
    cases.push(unary("diff_y", uniform(rng, s2, -1.0, 1.0), |t, x| {
        t.forward_diff(x, Axis::Y)
    }));
    for (name, stride, pad) in [("conv2d", 1, 1), ("conv2d_stride2", 2, 1)] {
        cases.push((
            name,
            store(vec![
                ("x", uniform(rng, shape(2), -1.0, 1.0)),
                ("w", uniform(rng, Shape::new(3, 2, 3, 3), -0.5, 0.5)),
                ("b", uniform(rng, Shape::new(1, 3, 1, 1), -0.5, 0.5)),
            ]),
            Box::new(move |t, s| {
                let x = t.param(s, "x")?;
                let w = t.param(s, "w")?;
                let b = t.param(s, "b")?;
                t.conv2d(x, w, b, stride, pad)
            }),
        ));
    }

    cases.push(unary(
        "pair_softmax",
        uniform(rng, shape(2 * n), -3.0, 3.0),
        pair_softmax,
    ));
    cases.push(unary(
        "expected_label",
        uniform(rng, shape(n), 0.05, 0.95),
        expected_label,
    ));

    let gt = uniform(rng, shape(1), th.t(0), th.t(TINY_K));
    let full = Tensor::full(shape(1), 1.0);
    let labels = LabelMap::from_depth(&gt, &full, th).expect("in range");
    let target = encode_rank(&labels, TINY_K).expect("valid K");
    let half_mask = mask_pattern();
    {
        let target = target.clone();
        let m = half_mask.clone();
        cases.push((
            "ordinal_loss",
            store(vec![("x", uniform(rng, shape(n), 0.05, 0.95))]),
            Box::new(move |t, s| {
                let x = t.param(s, "x")?;
                ordinal_loss(t, x, &target, &m)
            }),
        ));
    }

    // probabilities and an independent label whose fractional part stays
    // away from the integer kinks
    let p = Tensor::from_fn(shape(1), |_| rng.below(n) as f64 + rng.uniform(0.1, 0.9));
    cases.push(binary("confidence", uniform(rng, shape(n), 0.05, 0.95), p, confidence));

    let th_decode = th.clone();
    cases.push((
        "label_to_depth",
        store(vec![("x", uniform(rng, shape(1), 0.1, n as f64 + 0.9))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            label_to_depth_var(t, x, &th_decode)
        }),
    ));
    let th_soft = th.clone();
    cases.push((
        "soft_decode",
        store(vec![("x", uniform(rng, shape(n), 0.05, 0.95))]),
        Box::new(move |t, s| {
            let x = t.param(s, "x")?;
            soft_decode(t, x, &th_soft)
        }),
    ));

    let offsets = away_from_zero(rng, shape(1), 0.05);
    let d_log = Tensor::from_fn(shape(1), |i| {
        gt.get(i[0], i[1], i[2], i[3]) + offsets.get(i[0], i[1], i[2], i[3])
    });
    for (name, f) in [
        ("loss_log", loss_log as fn(&mut Tape, Var, Var, &Tensor) -> Result<Var>),
        ("loss_grad", loss_grad),
    ] {
        let gt = gt.clone();
        let m = half_mask.clone();
        cases.push((
            name,
            store(vec![("d", d_log.clone())]),
            Box::new(move |t, s| {
                let d = t.param(s, "d")?;
                let g = t.constant(gt.clone());
                f(t, d, g, &m)
            }),
        ));
    }
    cases
}

fn mask_pattern() -> Tensor {
    Tensor::from_fn(shape(1), |[_, _, h, w]| f64::from((h * 3 + w) % 5 != 0))
}

fn composed_case(rng: &mut Rng, th: &SidThresholds) -> Result<Case> {
    let net = DepthNet::new(tiny_network())?;
    let params = net.init_params(rng)?;
    let range = th.range();
    let spec = SceneSpec::new(rng.next_u64(), 16, 16, range);
    let scene = generate_scene(&spec, 0)?;
    let crop = |t: &Tensor| {
        Tensor::from_fn(Shape::new(1, t.shape().channels(), SIDE, SIDE), |[_, c, h, w]| {
            t.get(0, c, h + 4, w + 4)
        })
    };
    let image = crop(&scene.image);
    let depth = crop(&scene.depth);
    let mask = mask_pattern();
    let target = encode_rank(&LabelMap::from_depth(&depth, &mask, th)?, th.k())?;
    let th = th.clone();
    Ok((
        "total_loss_model",
        params,
        Box::new(move |t, s| {
            let x = t.constant(image.clone());
            let gt = t.constant(depth.clone());
            let out = net.forward(t, s, x, &th)?;
            let terms = total_loss(t, out.probs, &target, out.refined, gt, &mask, LossWeights::default())?;
            Ok(terms.total)
        }),
    ))
}

/// Runs the full suite. `fault` scales the backward rule of the named op.
pub fn run_grad_check(seed: u64, fault: Option<&str>) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let th = make_thresholds(0.5, 8.0, TINY_K)?;
    let prim = GradCheckConfig {
        tolerance: PRIMITIVE_TOLERANCE,
        ..GradCheckConfig::default()
    };
    let composed = GradCheckConfig {
        tolerance: COMPOSED_TOLERANCE,
        ..GradCheckConfig::default()
    };
    let mut results = Vec::new();
    for (name, params, f) in primitive_cases(&mut rng, &th) {
        results.push(check_gradients(name, &params, prim, &mut rng, fault, f)?);
    }
    let (name, params, f) = composed_case(&mut rng, &th)?;
    results.push(check_gradients(name, &params, composed, &mut rng, fault, f)?);
    let passed = results.iter().all(|r| r.passed);
    if let (Some(op), true) = (fault, passed) {
        return Err(Error::InvalidArgument(format!(
            "fault `{op}` matched no op in the checked graphs"
        )));
    }
    Ok(GradCheckReport {
        results,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    })
}
