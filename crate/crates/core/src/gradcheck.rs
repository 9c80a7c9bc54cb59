//! Central finite-difference audit of every differentiable op.
//!
//! Each case builds a scalar loss from randomized small tensors (at most 64
//! elements, values kept away from non-smooth points), runs one backward
//! pass, and compares every analytic input gradient against
//! `(f(x+h) - f(x-h)) / 2h` with `h = 1e-3`. The reported error is
//! `|a - n| / max(|a| + |n|, 1)`, the usual bounded relative form.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::named_rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-2;

type BuildFn = Box<dyn Fn(&mut Tape<f32>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f32>>,
    build: BuildFn,
}

#[derive(Debug, Clone)]
pub struct OpAudit {
    pub op: String,
    pub instances: usize,
    pub max_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub ops: Vec<OpAudit>,
    pub tolerance: f64,
}

impl AuditReport {
    pub fn pass(&self) -> bool {
        self.ops.iter().all(|o| o.pass)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "gradient audit: central differences, h = {FD_STEP:e}, tolerance {:.0e}\n",
            self.tolerance
        );
        for op in &self.ops {
            out.push_str(&format!(
                "{:<24} {:>3} instances  max err {:>10.3e}  {}\n",
                op.op,
                op.instances,
                op.max_err,
                if op.pass { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(if self.pass() {
            "result: PASS\n"
        } else {
            "result: FAIL\n"
        });
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f32, hi: f32) -> Tensor<f32> {
    let data = (0..shape.iter().product())
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Values in `[-1, -margin] U [margin, 1]`, for ops that kink at zero.
fn uniform_away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4], margin: f32) -> Tensor<f32> {
    let data = (0..shape.iter().product())
        .map(|_| {
            let mag = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Projection weights for turning an op output into a scalar loss.
fn loss_weights(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f32> {
    uniform(rng, shape, -0.5, 0.5)
}

fn eval_case(case: &Case, inputs: &[Tensor<f32>]) -> Result<f32> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(loss).scalar())
}

fn max_case_err(case: &Case) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad()))
        .collect();
    let loss = (case.build)(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f32>> = vars
        .iter()
        .zip(case.inputs.iter())
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst = 0.0f64;
    for i in 0..case.inputs.len() {
        for j in 0..case.inputs[i].numel() {
            let mut plus: Vec<Tensor<f32>> = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus: Vec<Tensor<f32>> = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric =
                (eval_case(case, &plus)? - eval_case(case, &minus)?) as f64 / (2.0 * FD_STEP as f64);
            let a = analytic[i].data()[j] as f64;
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn conv2d_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, in_c, out_c) = (1, rng.gen_range(1..=2), rng.gen_range(1..=2));
    let (h, w) = (rng.gen_range(3..=4), rng.gen_range(3..=4));
    let (k, stride, padding) = if rng.gen_bool(0.5) {
        (3, rng.gen_range(1..=2usize), 1)
    } else {
        (1, 1, 0)
    };
    let input = uniform(rng, [n, in_c, h, w], -1.0, 1.0);
    let weight = uniform(rng, [out_c, in_c, k, k], -0.6, 0.6);
    let bias = uniform(rng, [1, out_c, 1, 1], -0.3, 0.3);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let weights = loss_weights(rng, [n, out_c, oh, ow]);
    Case {
        inputs: vec![input, weight, bias],
        build: Box::new(move |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), stride, padding)?;
            tape.dot_const(y, weights.clone())
        }),
    }
}

fn pixel_shuffle_case(rng: &mut ChaCha8Rng) -> Case {
    let (h, w) = (rng.gen_range(2..=3), rng.gen_range(2..=3));
    let input = uniform(rng, [1, 4, h, w], -1.0, 1.0);
    let weights = loss_weights(rng, [1, 1, 2 * h, 2 * w]);
    Case {
        inputs: vec![input],
        build: Box::new(move |tape, vars| {
            let y = tape.pixel_shuffle(vars[0], 2)?;
            tape.dot_const(y, weights.clone())
        }),
    }
}

fn unary_case(rng: &mut ChaCha8Rng, which: &'static str) -> Case {
    let shape = [1, rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)];
    let input = match which {
        "sigmoid" => uniform(rng, shape, -2.0, 2.0),
        _ => uniform_away_from_zero(rng, shape, 0.05),
    };
    let weights = loss_weights(rng, shape);
    Case {
        inputs: vec![input],
        build: Box::new(move |tape, vars| {
            let y = match which {
                "leaky_relu" => tape.leaky_relu(vars[0], 0.2),
                "relu" => tape.relu(vars[0]),
                "sigmoid" => tape.sigmoid(vars[0]),
                _ => unreachable!(),
            };
            tape.dot_const(y, weights.clone())
        }),
    }
}

fn gap_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [1, rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)];
    let input = uniform(rng, shape, -1.0, 1.0);
    let weights = loss_weights(rng, [shape[0], shape[1], 1, 1]);
    Case {
        inputs: vec![input],
        build: Box::new(move |tape, vars| {
            let y = tape.global_avg_pool(vars[0])?;
            tape.dot_const(y, weights.clone())
        }),
    }
}

fn add_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [1, rng.gen_range(1..=2), rng.gen_range(2..=4), rng.gen_range(2..=4)];
    let a = uniform(rng, shape, -1.0, 1.0);
    let b = uniform(rng, shape, -1.0, 1.0);
    let weights = loss_weights(rng, shape);
    Case {
        inputs: vec![a, b],
        build: Box::new(move |tape, vars| {
            let y = tape.add(vars[0], vars[1])?;
            tape.dot_const(y, weights.clone())
        }),
    }
}

fn mul_broadcast_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [1, rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)];
    let a = uniform(rng, shape, -1.0, 1.0);
    let scale = uniform(rng, [shape[0], shape[1], 1, 1], -1.0, 1.0);
    let weights = loss_weights(rng, shape);
    Case {
        inputs: vec![a, scale],
        build: Box::new(move |tape, vars| {
            let y = tape.mul_broadcast(vars[0], vars[1])?;
            tape.dot_const(y, weights.clone())
        }),
    }
}

fn concat_case(rng: &mut ChaCha8Rng) -> Case {
    let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let (ca, cb) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let a = uniform(rng, [1, ca, h, w], -1.0, 1.0);
    let b = uniform(rng, [1, cb, h, w], -1.0, 1.0);
    let weights = loss_weights(rng, [1, ca + cb, h, w]);
    Case {
        inputs: vec![a, b],
        build: Box::new(move |tape, vars| {
            let y = tape.concat_channels(vars[0], vars[1])?;
            tape.dot_const(y, weights.clone())
        }),
    }
}

fn l1_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [1, rng.gen_range(1..=2), rng.gen_range(2..=4), rng.gen_range(2..=4)];
    let target = uniform(rng, shape, -1.0, 1.0);
    // Keep |pred - target| well away from the kink at zero.
    let offset = uniform_away_from_zero(rng, shape, 0.1);
    let mut pred = target.clone();
    for (p, o) in pred.data_mut().iter_mut().zip(offset.data()) {
        *p += o;
    }
    Case {
        inputs: vec![pred, target],
        build: Box::new(move |tape, vars| tape.l1_loss(vars[0], vars[1])),
    }
}

/// Runs the audit: `instances` random cases per op, finite differences on
/// every input element of every case.
pub fn run_audit(instances: usize, seed: u64) -> Result<AuditReport> {
    let ops: Vec<(&str, Box<dyn Fn(&mut ChaCha8Rng) -> Case>)> = vec![
        ("conv2d", Box::new(conv2d_case)),
        ("pixel_shuffle", Box::new(pixel_shuffle_case)),
        ("leaky_relu", Box::new(|r| unary_case(r, "leaky_relu"))),
        ("relu", Box::new(|r| unary_case(r, "relu"))),
        ("sigmoid", Box::new(|r| unary_case(r, "sigmoid"))),
        ("global_avg_pool", Box::new(gap_case)),
        ("elementwise_add", Box::new(add_case)),
        ("mul_broadcast", Box::new(mul_broadcast_case)),
        ("concat_channels", Box::new(concat_case)),
        ("l1_loss", Box::new(l1_case)),
    ];
    let mut report = AuditReport {
        ops: Vec::new(),
        tolerance: FD_TOLERANCE,
    };
    for (name, gen) in &ops {
        let mut rng = named_rng(seed, &format!("gradcheck.{name}"));
        let mut max_err = 0.0f64;
        for _ in 0..instances {
            let case = gen(&mut rng);
            max_err = max_err.max(max_case_err(&case)?);
        }
        report.ops.push(OpAudit {
            op: name.to_string(),
            instances,
            max_err,
            pass: max_err < FD_TOLERANCE,
        });
    }
    Ok(report)
}
