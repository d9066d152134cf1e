//! Every differentiable op against central finite differences (ε = 1e-4).

mod common;

use common::ops::{check_op, op_cases, TOL};
use textfuse::tensor::rng::{normal_vec, stream};
use textfuse::tensor::{Graph, Result, Tensor, Var};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut stream(seed, &[n as u64]), n)).unwrap()
}

#[test]
fn every_op_matches_finite_differences() {
    let mut failed = Vec::new();
    for c in op_cases() {
        let r = check_op(&c);
        println!("gradcheck {:<16} max rel err {:.2e} over {} elements", c.name, r.max_rel_err, r.checked);
        if r.max_rel_err >= TOL {
            failed.push(format!("{}: {r:?}", c.name));
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn backward_is_linear() {
    // grad(a·L1 + b·L2) == a·grad(L1) + b·grad(L2) on three random graphs.
    let graphs: [fn(&mut Graph, Var) -> Result<Var>; 3] = [
        |g, x| {
            let s = g.sigmoid(x)?;
            let m = g.mul(s, x)?;
            g.sum(m, None)
        },
        |g, x| {
            let s = g.softmax(x)?;
            let p = g.pow(s, 2.0)?;
            g.mean(p, None)
        },
        |g, x| {
            let t = g.transpose(x, &[1, 0])?;
            let m = g.matmul(x, t)?;
            let r = g.gelu(m)?;
            g.sum(r, None)
        },
    ];
    let x0 = randn(&[3, 4], 60);
    let grad_of = |f: &dyn Fn(&mut Graph, Var) -> Result<Var>| {
        let mut g = Graph::new();
        let x = g.input(x0.clone(), true).unwrap();
        let l = f(&mut g, x).unwrap();
        g.backward(l).unwrap().wrt(x).unwrap().clone()
    };
    let (a, b) = (0.7, -2.3);
    for i in 0..3 {
        let (f1, f2) = (graphs[i], graphs[(i + 1) % 3]);
        let combined = grad_of(&|g: &mut Graph, x: Var| {
            let l1 = f1(g, x)?;
            let l2 = f2(g, x)?;
            let l1 = g.scale(l1, a)?;
            let l2 = g.scale(l2, b)?;
            g.add(l1, l2)
        });
        let (g1, g2) = (grad_of(&|g: &mut Graph, x: Var| f1(g, x)), grad_of(&|g: &mut Graph, x: Var| f2(g, x)));
        for j in 0..combined.numel() {
            let want = a * g1.data()[j] + b * g2.data()[j];
            assert!((combined.data()[j] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let x = g.constant(randn(&[7, 13], 70).map(|v| v * 10.0)).unwrap();
    let y = g.softmax(x).unwrap();
    for row in g.value(y).data().chunks(13) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
