//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Worst-case agreement between analytic and numeric derivatives.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub compared: usize,
    pub skipped: usize,
    /// (tensor index, element index, analytic, numeric) of the worst component.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, tensor: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        if analytic.abs() + numeric.abs() <= floor {
            self.skipped += 1;
            return;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        self.compared += 1;
        if self.worst.is_none() || rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some((tensor, elem, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.compared += other.compared;
        self.skipped += other.skipped;
        if other.worst.is_some()
            && (self.worst.is_none() || other.max_rel_error > self.max_rel_error)
        {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Components with `|analytic| + |numeric|` at or below this are not compared.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-8,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

fn chosen(len: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match opts.max_per_tensor {
        Some(m) if m < len => {
            let mut v = sample(rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks d(f)/d(inputs) for a scalar-valued `f` built on a fresh graph.
pub fn check_inputs<F>(
    inputs: &[Tensor<f64>],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.value(out).item())
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut xs = inputs.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[ti].len()]);
        for j in chosen(inputs[ti].len(), &opts, &mut rng) {
            let orig = xs[ti].data()[j];
            xs[ti].data_mut()[j] = orig + opts.step;
            let fp = eval(&xs)?;
            xs[ti].data_mut()[j] = orig - opts.step;
            let fm = eval(&xs)?;
            xs[ti].data_mut()[j] = orig;
            report.record(
                ti,
                j,
                analytic[j],
                (fp - fm) / (2.0 * opts.step),
                opts.floor,
            );
        }
    }
    Ok(report)
}

/// Checks d(f)/d(parameters) for a scalar-valued `f` of a parameter store.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    {
        let g = Graph::new();
        let out = f(&g, store)?;
        let grads = g.backward(out)?;
        store.accumulate(&g, &grads);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for (ti, &id) in ids.iter().enumerate() {
        let analytic = store.grad(id).data().to_vec();
        for j in chosen(analytic.len(), &opts, &mut rng) {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + opts.step;
            let fp = {
                let g = Graph::new();
                let out = f(&g, store)?;

                g.value(out).item()
            };
            store.value_mut(id).data_mut()[j] = orig - opts.step;
            let fm = {
                let g = Graph::new();
                let out = f(&g, store)?;

                g.value(out).item()
            };
            store.value_mut(id).data_mut()[j] = orig;
            report.record(
                ti,
                j,
                analytic[j],
                (fp - fm) / (2.0 * opts.step),
                opts.floor,
            );
        }
    }
    Ok(report)
}

/// One row of the operator suite: operator name, input shapes, result.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub report: GradCheckReport,
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Uniform values with `|x| >= margin`, so kinked operators are probed away from the kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64) -> Tensor<f64> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Projects an arbitrary-shaped output to a scalar with fixed random weights.
fn project(g: &Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ shape.iter().product::<usize>() as u64);
    let r = g.constant(random_tensor(&shape, &mut rng, -1.0, 1.0));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>>;

/// Central-difference check of every differentiable operator on three random
/// shapes each (64-bit, step `1e-5`).
pub fn operator_suite(seed: u64) -> Result<Vec<OpCheck>> {
    use super::Upsample;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    let elementwise: [(&[usize], &[usize]); 3] =
        [(&[5], &[5]), (&[3, 4], &[4]), (&[2, 3, 4], &[2, 3, 4])];

    for (sa, sb) in elementwise {
        let a = random_tensor(sa, &mut rng, -1.0, 1.0);
        let b = random_tensor(sb, &mut rng, -1.0, 1.0);
        cases.push((
            "add",
            vec![a.clone(), b.clone()],
            Box::new(|g, v| project(g, g.add(v[0], v[1])?)),
        ));
        cases.push((
            "sub",
            vec![a.clone(), b.clone()],
            Box::new(|g, v| project(g, g.sub(v[0], v[1])?)),
        ));
        cases.push((
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|g, v| project(g, g.mul(v[0], v[1])?)),
        ));
        let bpos = random_tensor(sb, &mut rng, 0.5, 2.0);
        cases.push((
            "div",
            vec![a.clone(), bpos],
            Box::new(|g, v| project(g, g.div(v[0], v[1])?)),
        ));
        cases.push((
            "scale",
            vec![a.clone()],
            Box::new(|g, v| project(g, g.scale(v[0], -1.7))),
        ));
        cases.push((
            "add_scalar",
            vec![a.clone()],
            Box::new(|g, v| project(g, g.add_scalar(v[0], 0.3))),
        ));
        cases.push((
            "abs",
            vec![away_from_zero(sa, &mut rng, 1e-2)],
            Box::new(|g, v| project(g, g.abs(v[0]))),
        ));
        cases.push((
            "leaky_relu",
            vec![away_from_zero(sa, &mut rng, 1e-2)],
            Box::new(|g, v| project(g, g.leaky_relu(v[0], 0.01))),
        ));
        cases.push((
            "sigmoid",
            vec![random_tensor(sa, &mut rng, -4.0, 4.0)],
            Box::new(|g, v| project(g, g.sigmoid(v[0]))),
        ));
        cases.push((
            "softmax",
            vec![random_tensor(sa, &mut rng, -3.0, 3.0)],
            Box::new(|g, v| project(g, g.softmax(v[0])?)),
        ));
        cases.push(("sum", vec![a.clone()], Box::new(|g, v| Ok(g.sum(v[0])))));
        cases.push(("mean", vec![a.clone()], Box::new(|g, v| Ok(g.mean(v[0])))));
    }

    for (m, k, n) in [(1, 3, 2), (4, 5, 3), (6, 2, 7)] {
        let a = random_tensor(&[m, k], &mut rng, -1.0, 1.0);
        let b = random_tensor(&[k, n], &mut rng, -1.0, 1.0);
        cases.push((
            "matmul",
            vec![a, b],
            Box::new(|g, v| project(g, g.matmul(v[0], v[1])?)),
        ));
    }

    // (batch, cin, cout, dims, kernel, stride, pad)
    let convs: [(usize, usize, usize, [usize; 3], usize, usize, usize); 3] = [
        (1, 2, 3, [4, 5, 3], 3, 1, 1),
        (2, 1, 2, [5, 5, 5], 3, 2, 1),
        (1, 3, 2, [4, 4, 4], 2, 2, 0),
    ];
    for (bt, ci, co, dims, k, s, p) in convs {
        let x = random_tensor(&[bt, ci, dims[0], dims[1], dims[2]], &mut rng, -1.0, 1.0);
        let w = random_tensor(&[co, ci, k, k, k], &mut rng, -1.0, 1.0);
        let b = random_tensor(&[co], &mut rng, -1.0, 1.0);
        cases.push((
            "conv3d",
            vec![x, w, b],
            Box::new(move |g, v| project(g, g.conv3d(v[0], v[1], Some(v[2]), s, p)?)),
        ));
    }

    for shape in [[2usize, 3, 4, 4, 4], [1, 2, 3, 2, 5], [2, 1, 3, 3, 3]] {
        let c = shape[1];
        let x = random_tensor(&shape, &mut rng, -2.0, 2.0);
        let gm = random_tensor(&[c], &mut rng, 0.5, 1.5);
        let bt = random_tensor(&[c], &mut rng, -0.5, 0.5);
        cases.push((
            "instance_norm",
            vec![x, gm, bt],
            Box::new(|g, v| project(g, g.instance_norm(v[0], v[1], v[2], 1e-5)?)),
        ));
    }

    for shape in [&[4usize, 6][..], &[3, 2, 5], &[1, 8]] {
        let d = *shape.last().unwrap();
        let x = random_tensor(shape, &mut rng, -2.0, 2.0);
        let gm = random_tensor(&[d], &mut rng, 0.5, 1.5);
        let bt = random_tensor(&[d], &mut rng, -0.5, 0.5);
        cases.push((
            "layer_norm",
            vec![x, gm, bt],
            Box::new(|g, v| project(g, g.layer_norm(v[0], v[1], v[2], 1e-5)?)),
        ));
    }

    let concats: [(&[usize], &[usize], usize); 3] = [
        (&[2, 3], &[4, 3], 0),
        (&[2, 3], &[2, 1], 1),
        (&[1, 2, 2, 2, 2], &[1, 3, 2, 2, 2], 1),
    ];
    for (sa, sb, axis) in concats {
        let a = random_tensor(sa, &mut rng, -1.0, 1.0);
        let b = random_tensor(sb, &mut rng, -1.0, 1.0);
        cases.push((
            "concat",
            vec![a, b],
            Box::new(move |g, v| project(g, g.concat(&[v[0], v[1], v[0]], axis)?)),
        ));
    }

    let reshapes: [(&[usize], &'static [usize]); 3] = [
        (&[2, 6], &[3, 4]),
        (&[24], &[2, 3, 4]),
        (&[1, 2, 2, 2, 2], &[2, 8]),
    ];
    for (from, to) in reshapes {
        let a = random_tensor(from, &mut rng, -1.0, 1.0);
        cases.push((
            "reshape",
            vec![a],
            Box::new(move |g, v| project(g, g.reshape(v[0], to)?)),
        ));
    }

    let perms: [(&[usize], &'static [usize]); 3] = [
        (&[3, 4], &[1, 0]),
        (&[2, 3, 4], &[2, 0, 1]),
        (&[2, 1, 3, 2], &[3, 1, 0, 2]),
    ];
    for (shape, perm) in perms {
        let a = random_tensor(shape, &mut rng, -1.0, 1.0);
        cases.push((
            "permute",
            vec![a],
            Box::new(move |g, v| project(g, g.permute(v[0], perm)?)),
        ));
    }

    for shape in [[1usize, 1, 2, 2, 2], [1, 2, 1, 2, 3], [2, 1, 2, 1, 1]] {
        let a = random_tensor(&shape, &mut rng, -1.0, 1.0);
        cases.push((
            "upsample_nearest2x",
            vec![a.clone()],
            Box::new(|g, v| project(g, g.upsample_nearest2x(v[0])?)),
        ));
        cases.push((
            "upsample_trilinear2x",
            vec![a],
            Box::new(|g, v| project(g, g.upsample2x(v[0], Upsample::Trilinear)?)),
        ));
    }

    let slices: [(&[usize], usize, usize, usize); 3] =
        [(&[5], 0, 1, 3), (&[3, 4], 1, 2, 2), (&[2, 3, 4], 1, 0, 2)];
    for (shape, axis, start, len) in slices {
        let a = random_tensor(shape, &mut rng, -1.0, 1.0);
        cases.push((
            "slice",
            vec![a],
            Box::new(move |g, v| project(g, g.slice(v[0], axis, start, len)?)),
        ));
    }

    let mut out = Vec::with_capacity(cases.len());
    for (op, inputs, f) in cases {
        let report = check_inputs(&inputs, |g, v| f(g, v), opts)?;
        out.push(OpCheck {
            op,
            shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
            report,
        });
    }
    Ok(out)
}

/// Operators every graph must support; each must appear in [`operator_suite`].
pub const OP_INVENTORY: [&str; 17] = [
    "add",
    "sub",
    "mul",
    "matmul",
    "conv3d",
    "instance_norm",
    "layer_norm",
    "leaky_relu",
    "sigmoid",
    "softmax",
    "concat",
    "reshape",
    "permute",
    "mean",
    "sum",
    "upsample_nearest2x",
    "slice",
];
