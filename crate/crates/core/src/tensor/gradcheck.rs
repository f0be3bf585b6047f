//! Central-difference verification of the adjoints, run in `f64`.

use rand::Rng;

use super::{Graph, Result, Tensor, Var};

/// Max over all input coordinates of
/// `|g_analytic - g_fd| / max(1e-8, |g_analytic| + |g_fd|)`.
///
/// `g_fd` is taken from two central stencils: a two-point one at `eps`,
/// narrow enough to stay clear of activation kinks, and a fourth-order one
/// at `100·eps`, whose roundoff is small enough for near-zero gradients.
/// Each fails only in its own regime (a kink inside the wide stencil,
/// roundoff swamping a tiny slope in the narrow one), so a coordinate is
/// scored against whichever agrees better. A wrong adjoint disagrees with
/// both.
///
/// Non-scalar outputs are contracted with a fixed weight pattern so every
/// output coordinate contributes to the checked scalar.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let n = g.value(out).numel();
        let loss = if n == 1 {
            g.sum(out)?
        } else {
            let w: Vec<f64> = (0..n).map(|i| (0.37 + 1.3 * i as f64).sin()).collect();
            let shape = g.shape(out).to_vec();
            let wv = g.constant(Tensor::new(&shape, w)?);
            let p = g.mul(out, wv)?;
            g.sum(p)?
        };
        let value = g.value(loss).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (j, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            let mut at = |x: f64| -> Result<f64> {
                xs[j].data_mut()[i] = x;
                Ok(eval(&xs, false)?.0)
            };
            let narrow = (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps);
            let h = 100.0 * eps;
            let (p1, m1) = (at(orig + h)?, at(orig - h)?);
            let (p2, m2) = (at(orig + 2.0 * h)?, at(orig - 2.0 * h)?);
            xs[j].data_mut()[i] = orig;
            let wide = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let ga = analytic[j].as_ref().map_or(0.0, |t| t.data()[i]);
            let rel = |fd: f64| (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
            let rel = rel(narrow).min(rel(wide));
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Primitive ops of the engine, for sweeping gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradcheckOp {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    LeakyRelu,
    Tanh,
    Sin,
    Cos,
    Acos,
    Norm,
    Normalize,
    Mean,
    Sum,
    SumLast,
    Concat,
    Slice,
    Reshape,
    Transpose,
    RotateEmbedding,
    Conv2d,
}

impl GradcheckOp {
    pub const ALL: [GradcheckOp; 22] = [
        GradcheckOp::MatMul,
        GradcheckOp::Add,
        GradcheckOp::Sub,
        GradcheckOp::Mul,
        GradcheckOp::Div,
        GradcheckOp::Scale,
        GradcheckOp::LeakyRelu,
        GradcheckOp::Tanh,
        GradcheckOp::Sin,
        GradcheckOp::Cos,
        GradcheckOp::Acos,
        GradcheckOp::Norm,
        GradcheckOp::Normalize,
        GradcheckOp::Mean,
        GradcheckOp::Sum,
        GradcheckOp::SumLast,
        GradcheckOp::Concat,
        GradcheckOp::Slice,
        GradcheckOp::Reshape,
        GradcheckOp::Transpose,
        GradcheckOp::RotateEmbedding,
        GradcheckOp::Conv2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradcheckOp::MatMul => "matmul",
            GradcheckOp::Add => "add",
            GradcheckOp::Sub => "sub",
            GradcheckOp::Mul => "mul",
            GradcheckOp::Div => "div",
            GradcheckOp::Scale => "scale",
            GradcheckOp::LeakyRelu => "leaky_relu",
            GradcheckOp::Tanh => "tanh",
            GradcheckOp::Sin => "sin",
            GradcheckOp::Cos => "cos",
            GradcheckOp::Acos => "acos",
            GradcheckOp::Norm => "norm",
            GradcheckOp::Normalize => "normalize",
            GradcheckOp::Mean => "mean",
            GradcheckOp::Sum => "sum",
            GradcheckOp::SumLast => "sum_last",
            GradcheckOp::Concat => "concat",
            GradcheckOp::Slice => "slice",
            GradcheckOp::Reshape => "reshape",
            GradcheckOp::Transpose => "transpose",
            GradcheckOp::RotateEmbedding => "rotate_3x3_by_3x16",
            GradcheckOp::Conv2d => "conv2d",
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Like [`uniform`] but keeps every entry at least `gap` away from zero.
fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Checks one primitive op at a random point that satisfies its
/// differentiability preconditions.
pub fn gradcheck_op<R: Rng>(op: GradcheckOp, rng: &mut R, eps: f64) -> Result<f64> {
    use GradcheckOp::*;
    match op {
        MatMul => gradcheck(
            |g, v| g.matmul(v[0], v[1]),
            &[uniform(rng, &[4, 4], -1.0, 1.0), uniform(rng, &[4, 4], -1.0, 1.0)],
            eps,
        ),
        Add => gradcheck(
            |g, v| g.add(v[0], v[1]),
            &[uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)],
            eps,
        ),
        Sub => gradcheck(
            |g, v| g.sub(v[0], v[1]),
            &[uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
            eps,
        ),
        Mul => gradcheck(
            |g, v| g.mul(v[0], v[1]),
            &[uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[1], -1.0, 1.0)],
            eps,
        ),
        Div => gradcheck(
            |g, v| g.div(v[0], v[1]),
            &[uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[3], 0.5, 2.0)],
            eps,
        ),
        Scale => gradcheck(|g, v| g.scale(v[0], -2.5), &[uniform(rng, &[5], -1.0, 1.0)], eps),
        LeakyRelu => gradcheck(|g, v| g.leaky_relu(v[0]), &[away_from_zero(rng, &[8], 20.0 * eps)], eps),
        Tanh => gradcheck(|g, v| g.tanh(v[0]), &[uniform(rng, &[6], -2.0, 2.0)], eps),
        Sin => gradcheck(|g, v| g.sin(v[0]), &[uniform(rng, &[6], -3.0, 3.0)], eps),
        Cos => gradcheck(|g, v| g.cos(v[0]), &[uniform(rng, &[6], -3.0, 3.0)], eps),
        Acos => gradcheck(|g, v| g.acos(v[0]), &[uniform(rng, &[6], -0.95, 0.95)], eps),
        Norm => gradcheck(|g, v| g.norm(v[0]), &[away_from_zero(rng, &[3, 5], 0.1)], eps),
        Normalize => gradcheck(|g, v| g.normalize(v[0]), &[away_from_zero(rng, &[2, 4], 0.1)], eps),
        Mean => gradcheck(|g, v| g.mean(v[0]), &[uniform(rng, &[2, 3], -1.0, 1.0)], eps),
        Sum => gradcheck(|g, v| g.sum(v[0]), &[uniform(rng, &[2, 3], -1.0, 1.0)], eps),
        SumLast => gradcheck(|g, v| g.sum_last(v[0]), &[uniform(rng, &[2, 3], -1.0, 1.0)], eps),
        Concat => gradcheck(
            |g, v| g.concat(&[v[0], v[1]], 1),
            &[uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 2], -1.0, 1.0)],
            eps,
        ),
        Slice => gradcheck(|g, v| g.slice(v[0], 1, 1, 3), &[uniform(rng, &[3, 4], -1.0, 1.0)], eps),
        Reshape => gradcheck(|g, v| g.reshape(v[0], &[6, 2]), &[uniform(rng, &[3, 4], -1.0, 1.0)], eps),
        Transpose => gradcheck(|g, v| g.transpose(v[0]), &[uniform(rng, &[3, 4], -1.0, 1.0)], eps),
        RotateEmbedding => gradcheck(
            |g, v| g.matmul(v[0], v[1]),
            &[uniform(rng, &[3, 3], -1.0, 1.0), uniform(rng, &[3, 16], -1.0, 1.0)],
            eps,
        ),
        Conv2d => gradcheck(
            |g, v| g.conv2d(v[0], v[1], 2, 1),
            &[uniform(rng, &[1, 2, 6, 6], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -1.0, 1.0)],
            eps,
        ),
    }
}
