//! One finite-difference case per differentiable op.

use textfuse::tensor::rng::{normal_vec, stream, uniform_vec};
use textfuse::tensor::{check_input_gradients, GradCheckReport, Graph, Result, Tensor, Var};

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut stream(seed, &[n as u64]), n)).unwrap()
}

/// Values in ±[0.2, 1.5], away from the kinks of relu/abs at zero.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    let mut r = stream(seed, &[7]);
    let mags = uniform_vec(&mut r, n, 0.2, 1.5);
    let signs = uniform_vec(&mut r, n, -1.0, 1.0);
    Tensor::new(shape.to_vec(), mags.iter().zip(&signs).map(|(m, s)| m * s.signum()).collect()).unwrap()
}

/// Reduce an arbitrary output to a scalar through fixed random weights so
/// that no gradient is trivially constant.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(y), seed ^ 0xABCD);
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, inputs, f: Box::new(f) }
}

const S: [usize; 4] = [2, 3, 4, 4];

pub fn op_cases() -> Vec<OpCase> {
    let a = randn(&S, 7);
    let b = a.map(|x| x + if (x * 1e3).sin() > 0.0 { 0.3 } else { -0.3 });
    vec![
        case("add", vec![randn(&S, 1), randn(&S, 2)], |g, v| g.add(v[0], v[1])),
        case("add_broadcast", vec![randn(&S, 1), randn(&[4, 1], 2)], |g, v| g.add(v[0], v[1])),
        case("sub", vec![randn(&S, 1), randn(&S, 2)], |g, v| g.sub(v[0], v[1])),
        case("mul", vec![randn(&S, 3), randn(&[3, 1, 4], 4)], |g, v| g.mul(v[0], v[1])),
        case("div", vec![randn(&S, 5), away_from_zero(&S, 6)], |g, v| g.div(v[0], v[1])),
        case("max_elementwise", vec![a, b], |g, v| g.maximum(v[0], v[1])),
        case("affine", vec![randn(&S, 8)], |g, v| g.affine(v[0], -1.7, 0.4)),
        case("sigmoid", vec![randn(&S, 9)], |g, v| g.sigmoid(v[0])),
        case("relu", vec![away_from_zero(&S, 10)], |g, v| g.relu(v[0])),
        case("gelu", vec![randn(&S, 11)], |g, v| g.gelu(v[0])),
        case("abs", vec![away_from_zero(&S, 12)], |g, v| g.abs(v[0])),
        case("pow", vec![away_from_zero(&S, 13).map(f64::abs)], |g, v| g.pow(v[0], 1.5)),
        case("pow_int", vec![randn(&S, 14)], |g, v| g.pow(v[0], 3.0)),
        case("reshape", vec![randn(&S, 20)], |g, v| g.reshape(v[0], &[6, 16])),
        case("transpose", vec![randn(&S, 21)], |g, v| g.transpose(v[0], &[2, 0, 3, 1])),
        case("slice", vec![randn(&S, 22)], |g, v| g.slice(v[0], 2, 1, 3)),
        case("concat", vec![randn(&S, 23), randn(&[2, 1, 4, 4], 24)], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("reduce_sum_all", vec![randn(&S, 25)], |g, v| g.sum(v[0], None)),
        case("reduce_sum_axis", vec![randn(&S, 26)], |g, v| g.sum(v[0], Some(1))),
        case("reduce_mean_all", vec![randn(&S, 27)], |g, v| g.mean(v[0], None)),
        case("reduce_mean_axis", vec![randn(&S, 28)], |g, v| g.mean(v[0], Some(3))),
        case("softmax", vec![randn(&S, 30)], |g, v| g.softmax(v[0])),
        case("layer_norm", vec![randn(&S, 31), randn(&[4], 32), randn(&[4], 33)], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("matmul", vec![randn(&[6, 4], 40), randn(&[4, 5], 41)], |g, v| g.matmul(v[0], v[1])),
        case("matmul_batched", vec![randn(&[3, 4, 4], 42), randn(&[3, 4, 2], 43)], |g, v| g.matmul(v[0], v[1])),
        case("matmul_shared", vec![randn(&[2, 3, 4], 44), randn(&[4, 4], 45)], |g, v| g.matmul(v[0], v[1])),
        case("conv2d", vec![randn(&S, 46), randn(&[2, 3, 3, 3], 47), randn(&[2], 48)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        case("conv2d_stride2", vec![randn(&S, 49), randn(&[4, 3, 2, 2], 50)], |g, v| g.conv2d(v[0], v[1], None, 2, 0)),
        case("attention", vec![randn(&[3, 4], 51), randn(&[5, 4], 52), randn(&[5, 6], 53)], |g, v| g.attention(v[0], v[1], v[2], 2)),
    ]
}

pub fn check_op(c: &OpCase) -> GradCheckReport {
    check_input_gradients(
        &c.inputs,
        |g, v| {
            let y = (c.f)(g, v)?;
            project(g, y, 99)
        },
        EPS,
    )
    .unwrap()
}
