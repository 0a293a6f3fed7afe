//! Central finite-difference verification of analytic gradients.

use super::{Graph, NodeId, Precision, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Elementwise relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient of a scalar loss built by `build` against
/// central differences. Every element of every input is perturbed unless
/// `max_per_input` limits it to an evenly strided subset.
pub fn check<F>(inputs: &[Tensor], step: f64, max_per_input: Option<usize>, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Precision::High);
        let ids: Vec<NodeId> = values.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new(Precision::High);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut values: Vec<Tensor> = inputs.to_vec();
    for (k, &id) in ids.iter().enumerate() {
        let analytic = grads.get(id);
        let n = values[k].len();
        let stride = match max_per_input {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let orig = values[k].data()[e];
            values[k].data_mut()[e] = orig + step;
            let up = eval(&values)?;
            values[k].data_mut()[e] = orig - step;
            let down = eval(&values)?;
            values[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::Numerical(format!("non-finite difference at input {k}[{e}]")));
            }
            let a = analytic.data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (k, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Named check outcome.
#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

fn random_tensor(rng: &mut impl rand::Rng, shape: &[usize], lo: f64, hi: f64, signed: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if signed && rng.gen_bool(0.5) {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Weighted sum with a fixed random weight tensor, so seeds are not all ones.
fn weighted_sum(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape, 0.5, 1.5, true));
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

/// Finite-difference checks of every operator on random inputs with at most
/// six elements per axis.
pub fn operator_suite(seed: u64) -> Result<Vec<NamedCheck>> {
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run =
        |name: &str, inputs: Vec<Tensor>, build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>| -> Result<()> {
            let report = check(&inputs, DEFAULT_STEP, None, |g, ids| {
                let y = build(g, ids)?;
                weighted_sum(g, y, 99)
            })?;
            out.push(NamedCheck {
                name: name.to_string(),
                report,
            });
            Ok(())
        };
    let s = [4, 5];
    let signed = |rng: &mut rand_chacha::ChaCha8Rng, sh: &[usize]| random_tensor(rng, sh, 0.1, 1.0, true);
    let positive = |rng: &mut rand_chacha::ChaCha8Rng, sh: &[usize]| random_tensor(rng, sh, 0.3, 2.0, false);

    let (a, b) = (signed(&mut rng, &s), signed(&mut rng, &s));
    run("add", vec![a.clone(), b.clone()], &|g, x| g.add(x[0], x[1]))?;
    run("sub", vec![a.clone(), b.clone()], &|g, x| g.sub(x[0], x[1]))?;
    run("mul", vec![a.clone(), b.clone()], &|g, x| g.mul(x[0], x[1]))?;
    run("div", vec![a.clone(), positive(&mut rng, &s)], &|g, x| {
        g.div(x[0], x[1])
    })?;
    run("add_scalar", vec![a.clone()], &|g, x| g.add_scalar(x[0], 0.7))?;
    run("mul_scalar", vec![a.clone()], &|g, x| g.mul_scalar(x[0], -1.3))?;
    run("square", vec![a.clone()], &|g, x| g.square(x[0]))?;
    run("sqrt", vec![positive(&mut rng, &s)], &|g, x| g.sqrt(x[0]))?;
    run("log", vec![positive(&mut rng, &s)], &|g, x| g.log(x[0]))?;
    run("exp", vec![a.clone()], &|g, x| g.exp(x[0]))?;
    run("relu", vec![a.clone()], &|g, x| g.relu(x[0]))?;
    run(
        "matmul",
        vec![signed(&mut rng, &[3, 4]), signed(&mut rng, &[4, 5])],
        &|g, x| g.matmul(x[0], x[1]),
    )?;
    run(
        "conv2d",
        vec![signed(&mut rng, &[6, 5, 2]), signed(&mut rng, &[5, 3, 2, 3])],
        &|g, x| g.conv2d(x[0], x[1]),
    )?;
    let pool_in = {
        // distinct values so no window has a tie within the step size
        let mut v: Vec<f64> = (0..5 * 6 * 2).map(|i| i as f64 * 0.05 - 1.5).collect();
        for i in (1..v.len()).rev() {
            v.swap(i, rng.gen_range(0..=i));
        }
        Tensor::new(vec![5, 6, 2], v).expect("shape")
    };
    run("maxpool2d", vec![pool_in], &|g, x| g.maxpool2d(x[0], 2, 2))?;
    run(
        "channel_affine",
        vec![
            signed(&mut rng, &[3, 4, 3]),
            signed(&mut rng, &[3]),
            signed(&mut rng, &[3]),
        ],
        &|g, x| g.channel_affine(x[0], x[1], x[2]),
    )?;
    let r3 = signed(&mut rng, &[3, 4, 5]);
    run("sum_axes", vec![r3.clone()], &|g, x| g.sum_axes(x[0], &[0, 2]))?;
    run("mean_axes", vec![r3.clone()], &|g, x| g.mean_axes(x[0], &[1]))?;
    run(
        "concat",
        vec![signed(&mut rng, &[3, 2, 4]), signed(&mut rng, &[3, 1, 4])],
        &|g, x| g.concat(&[x[0], x[1]], 1),
    )?;
    let idx = Arc::new(vec![0usize, 3, 3, 7, 11, 2, 5, 5]);
    run("gather", vec![signed(&mut rng, &[12])], &|g, x| {
        g.gather(x[0], idx.clone(), &[2, 4])
    })?;
    run("reshape", vec![r3], &|g, x| g.reshape(x[0], &[5, 12]))?;
    run("gram", vec![signed(&mut rng, &[5, 6])], &|g, x| g.gram(x[0]))?;
    Ok(out)
}
