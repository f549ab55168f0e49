//! Central finite-difference gradient checking.
//!
//! The checker evaluates the forward pass only; backward results are compared
//! against it, never used to produce the reference.

use rand::Rng as _;

use super::{seeded_rng, GradError, Graph, NodeId, Primitive, Rng, Tensor};

/// Denominator floor for relative error, so gradients that are zero on both
/// sides compare absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Max-norm relative error of one gradient tensor:
/// `max|a - n| / max(max|a|, max|n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(REL_ERR_FLOOR)
}

type BuildFn = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, GradError>>;

/// One differentiable function of several tensors.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    /// Which inputs are differentiated (others are bound as constants).
    pub differentiable: Vec<bool>,
    build: BuildFn,
    projection: Vec<f64>,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        differentiable: Vec<bool>,
        rng: &mut Rng,
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, GradError> + 'static,
    ) -> Result<Self, GradError> {
        let mut case =
            Self { name: name.into(), inputs, differentiable, build: Box::new(build), projection: Vec::new() };
        let mut g = Graph::new();
        let out = case.forward(&mut g, &case.inputs)?;
        case.projection = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(case)
    }

    fn forward(&self, g: &mut Graph<f64>, inputs: &[Tensor<f64>]) -> Result<NodeId, GradError> {
        let ids: Vec<NodeId> = inputs
            .iter()
            .zip(&self.differentiable)
            .map(|(t, &d)| if d { g.leaf(&t.clone().with_grad()) } else { g.constant(t) })
            .collect();
        (self.build)(g, &ids)
    }

    /// Scalar `sum(projection * f(inputs))`, recorded in `g`.
    fn loss(&self, g: &mut Graph<f64>, inputs: &[Tensor<f64>]) -> Result<(NodeId, Vec<NodeId>), GradError> {
        let ids: Vec<NodeId> = inputs
            .iter()
            .zip(&self.differentiable)
            .map(|(t, &d)| if d { g.leaf(&t.clone().with_grad()) } else { g.constant(t) })
            .collect();
        let out = (self.build)(g, &ids)?;
        let shape = g.shape(out).to_vec();
        let r = g.input(&shape, self.projection.clone())?;
        let prod = g.mul(out, r)?;
        let mean = g.mean(prod, None)?;
        let n = self.projection.len() as f64;
        Ok((g.scale(mean, n)?, ids))
    }

    fn loss_value(&self, inputs: &[Tensor<f64>]) -> Result<f64, GradError> {
        let mut g = Graph::new();
        let (l, _) = self.loss(&mut g, inputs)?;
        Ok(g.value(l)[0])
    }

    /// Largest relative error between backward and central differences.
    pub fn max_relative_error(&self, step: f64) -> Result<f64, GradError> {
        let mut g = Graph::new();
        let (l, ids) = self.loss(&mut g, &self.inputs)?;
        let grads = g.backward(l)?;
        let mut worst = 0.0f64;
        for (k, id) in ids.iter().enumerate() {
            if !self.differentiable[k] {
                continue;
            }
            let analytic = grads.get(*id).expect("differentiable input has a gradient");
            let numeric: Vec<f64> =
                (0..analytic.len()).map(|j| self.central_difference(k, j, step)).collect::<Result<_, _>>()?;
            worst = worst.max(relative_error(analytic, &numeric));
        }
        Ok(worst)
    }

    fn central_difference(&self, input: usize, elem: usize, step: f64) -> Result<f64, GradError> {
        let mut plus = self.inputs.clone();
        plus[input].data_mut()[elem] += step;
        let mut minus = self.inputs.clone();
        minus[input].data_mut()[elem] -= step;
        Ok((self.loss_value(&plus)? - self.loss_value(&minus)?) / (2.0 * step))
    }
}

/// Checks an arbitrary builder with every input differentiable.
pub fn gradient_check(
    inputs: Vec<Tensor<f64>>,
    step: f64,
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, GradError> + 'static,
) -> Result<f64, GradError> {
    let mut rng = seeded_rng(seed);
    let n = inputs.len();
    GradCase::new("custom", inputs, vec![true; n], &mut rng, build)?.max_relative_error(step)
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero by `margin`.
fn away_from_zero(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(margin..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Smallest gap between the best and second-best squared distance over all
/// nearest-neighbour queries in both directions.
fn nn_margin(a: &[f64], b: &[f64]) -> f64 {
    let gap = |p: &[f64], q: &[f64]| {
        let mut worst = f64::INFINITY;
        for x in p.chunks_exact(3) {
            let mut d: Vec<f64> = q.chunks_exact(3).map(|y| (0..3).map(|t| (x[t] - y[t]).powi(2)).sum()).collect();
            d.sort_by(f64::total_cmp);
            if d.len() > 1 {
                worst = worst.min(d[1] - d[0]);
            }
        }
        worst
    };
    gap(a, b).min(gap(b, a))
}

/// Random tensor whose entries along `axis` have a unique maximum separated
/// from the runner-up by at least `margin`.
fn separated_max(rng: &mut Rng, shape: &[usize], axis: usize, margin: f64) -> Tensor<f64> {
    loop {
        let t = uniform(rng, shape, -2.0, 2.0);
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let ok = (0..outer).all(|o| {
            (0..inner).all(|i| {
                let mut col: Vec<f64> = (0..len).map(|a| t.data()[(o * len + a) * inner + i]).collect();
                col.sort_by(|x, y| y.total_cmp(x));
                len == 1 || col[0] - col[1] > margin
            })
        });
        if ok {
            return t;
        }
    }
}

/// Random cases for one primitive.
pub fn primitive_cases(prim: &Primitive, trials: usize, seed: u64) -> Result<Vec<GradCase>, GradError> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        out.push(primitive_case(prim, &mut rng)?);
    }
    Ok(out)
}

/// One example of every primitive, used to enumerate the catalog.
pub fn catalog() -> Vec<Primitive> {
    vec![
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale(0.0),
        Primitive::MatMul,
        Primitive::AddRow,
        Primitive::Conv1d,
        Primitive::Conv3d { stride: 1, padding: 0 },
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::Tanh,
        Primitive::Exp,
        Primitive::Concat { axis: 0 },
        Primitive::Reshape(vec![]),
        Primitive::Transpose,
        Primitive::MaxReduce { axis: 0 },
        Primitive::MeanReduce { axis: None },
        Primitive::Mse,
        Primitive::Bce,
        Primitive::Reparameterize,
        Primitive::KlStdNormal,
        Primitive::Chamfer,
    ]
}

fn primitive_case(prim: &Primitive, rng: &mut Rng) -> Result<GradCase, GradError> {
    let name = prim.name();
    let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 5));
    let two = |rng: &mut Rng| vec![uniform(rng, &[r, c], -2.0, 2.0), uniform(rng, &[r, c], -2.0, 2.0)];
    macro_rules! case {
        ($inputs:expr, $diff:expr, $f:expr) => {
            GradCase::new(name, $inputs, $diff, rng, $f)
        };
    }
    match prim {
        Primitive::Add => case!(two(rng), vec![true, true], |g, x| g.add(x[0], x[1])),
        Primitive::Sub => case!(two(rng), vec![true, true], |g, x| g.sub(x[0], x[1])),
        Primitive::Mul => case!(two(rng), vec![true, true], |g, x| g.mul(x[0], x[1])),
        Primitive::Scale(_) => {
            let k = rng.random_range(-3.0..3.0);
            case!(vec![uniform(rng, &[r, c], -2.0, 2.0)], vec![true], move |g, x| g.scale(x[0], k))
        }
        Primitive::MatMul => {
            let n = dim(rng, 1, 4);
            let ins = vec![uniform(rng, &[r, c], -2.0, 2.0), uniform(rng, &[c, n], -2.0, 2.0)];
            case!(ins, vec![true, true], |g, x| g.matmul(x[0], x[1]))
        }
        Primitive::AddRow => {
            let ins = vec![uniform(rng, &[r, c], -2.0, 2.0), uniform(rng, &[c], -2.0, 2.0)];
            case!(ins, vec![true, true], |g, x| g.add_row(x[0], x[1]))
        }
        Primitive::Conv1d => {
            let (cin, cout, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 6));
            let ins = vec![
                uniform(rng, &[cin, n], -2.0, 2.0),
                uniform(rng, &[cout, cin], -1.0, 1.0),
                uniform(rng, &[cout], -1.0, 1.0),
            ];
            case!(ins, vec![true, true, true], |g, x| g.conv1d(x[0], x[1], x[2]))
        }
        Primitive::Conv3d { .. } => {
            let (cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 2));
            let k = dim(rng, 1, 3);
            let stride = dim(rng, 1, 2);
            let padding = dim(rng, 0, 1);
            let s = [dim(rng, 3, 5), dim(rng, 3, 5), dim(rng, 3, 5)];
            let ins = vec![
                uniform(rng, &[cin, s[0], s[1], s[2]], -1.0, 1.0),
                uniform(rng, &[cout, cin, k, k, k], -1.0, 1.0),
                uniform(rng, &[cout], -1.0, 1.0),
            ];
            case!(ins, vec![true, true, true], move |g, x| g.conv3d(x[0], x[1], x[2], stride, padding))
        }
        Primitive::Relu => case!(vec![away_from_zero(rng, &[r, c], 1e-2)], vec![true], |g, x| g.relu(x[0])),
        Primitive::Sigmoid => case!(vec![uniform(rng, &[r, c], -3.0, 3.0)], vec![true], |g, x| g.sigmoid(x[0])),
        Primitive::Tanh => case!(vec![uniform(rng, &[r, c], -2.0, 2.0)], vec![true], |g, x| g.tanh(x[0])),
        Primitive::Exp => case!(vec![uniform(rng, &[r, c], -2.0, 2.0)], vec![true], |g, x| g.exp(x[0])),
        Primitive::Concat { .. } => {
            let axis = dim(rng, 0, 1);
            let parts = dim(rng, 2, 3);
            let ins: Vec<Tensor<f64>> = (0..parts)
                .map(|_| {
                    let w = dim(rng, 1, 3);
                    let shape = if axis == 0 { [w, c] } else { [r, w] };
                    uniform(rng, &shape, -2.0, 2.0)
                })
                .collect();
            case!(ins, vec![true; parts], move |g, x| g.concat(x, axis))
        }
        Primitive::Reshape(_) => {
            case!(vec![uniform(rng, &[r, c], -2.0, 2.0)], vec![true], move |g, x| g.reshape(x[0], &[c, r]))
        }
        Primitive::Transpose => case!(vec![uniform(rng, &[r, c], -2.0, 2.0)], vec![true], |g, x| g.transpose(x[0])),
        Primitive::MaxReduce { .. } => {
            let shape = [dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 3)];
            let axis = dim(rng, 0, 2);
            let t = separated_max(rng, &shape, axis, 1e-2);
            case!(vec![t], vec![true], move |g, x| g.max_reduce(x[0], axis))
        }
        Primitive::MeanReduce { .. } => {
            let axis = match dim(rng, 0, 2) {
                2 => None,
                a => Some(a),
            };
            case!(vec![uniform(rng, &[r, c], -2.0, 2.0)], vec![true], move |g, x| g.mean(x[0], axis))
        }
        Primitive::Mse => case!(two(rng), vec![true, true], |g, x| g.mse(x[0], x[1])),
        Primitive::Bce => {
            let p = uniform(rng, &[r, c], 0.1, 0.9);
            let t = Tensor::new(&[r, c], (0..r * c).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())?;
            case!(vec![p, t], vec![true, false], |g, x| g.bce(x[0], x[1]))
        }
        Primitive::Reparameterize => {
            let ins = vec![
                uniform(rng, &[r, c], -2.0, 2.0),
                uniform(rng, &[r, c], -2.0, 2.0),
                uniform(rng, &[r, c], -2.0, 2.0),
            ];
            case!(ins, vec![true, true, true], |g, x| g.reparameterize(x[0], x[1], x[2]))
        }
        Primitive::KlStdNormal => case!(two(rng), vec![true, true], |g, x| g.kl_std_normal(x[0], x[1])),
        Primitive::Chamfer => loop {
            let (n, m) = (dim(rng, 2, 8), dim(rng, 2, 8));
            let a = uniform(rng, &[n, 3], -1.0, 1.0);
            let b = uniform(rng, &[m, 3], -1.0, 1.0);
            if nn_margin(a.data(), b.data()) > 1e-2 {
                break case!(vec![a, b], vec![true, true], |g, x| g.chamfer(x[0], x[1]));
            }
        },
    }
}

/// Random three-layer composition `sigmoid(tanh(x W1 + b1) W2) W3`.
pub fn composite_case(rng: &mut Rng) -> Result<GradCase, GradError> {
    let (i, h1, h2, o) = (dim(rng, 2, 5), dim(rng, 2, 6), dim(rng, 2, 6), dim(rng, 1, 4));
    let ins = vec![
        uniform(rng, &[2, i], -1.0, 1.0),
        uniform(rng, &[i, h1], -1.0, 1.0),
        uniform(rng, &[h1], -1.0, 1.0),
        uniform(rng, &[h1, h2], -1.0, 1.0),
        uniform(rng, &[h2, o], -1.0, 1.0),
    ];
    GradCase::new("composite", ins, vec![true; 5], rng, |g, x| {
        let a = g.linear(x[0], x[1], x[2])?;
        let a = g.tanh(a)?;
        let b = g.matmul(a, x[3])?;
        let b = g.sigmoid(b)?;
        g.matmul(b, x[4])
    })
}
