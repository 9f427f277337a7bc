use posefree::tensor::gradcheck::grad_check;
use posefree::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Projects `y` onto fixed random weights so no gradient component is degenerate.
fn project<'g>(y: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &y.shape(), -1.0, 1.0);
    (y * y.graph().constant(w)).sum()
}

fn check_unary(name: &str, lo: f64, hi: f64, op: fn(Var<'_, f64>) -> Var<'_, f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    for shape in [vec![3], vec![2, 4], vec![2, 3, 2]] {
        let x = random(&mut rng, &shape, lo, hi);
        let r = grad_check(|v| project(op(v), 7), &x, EPS);
        assert!(r.passed(TOL), "{name} {shape:?}: {r:?}");
    }
}

#[test]
fn sum_of_squares_example() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]));
    let y = x.square().sum();
    g.backward(y);
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn constant_function_has_zero_gradient() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]));
    let c = g.constant(Tensor::from_f64(&[3], &[4.0, 5.0, 6.0]));
    let y = (x.scale(0.0) + c).sum();
    g.backward(y);
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]));
    let y = x.square().sum();
    g.backward(y);
    g.backward(y);
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
    g.backward(y);
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
#[should_panic(expected = "scalar root")]
fn non_scalar_root_is_a_contract_violation() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]));
    g.backward(x.square());
}

#[test]
fn elementwise_unary_primitives() {
    check_unary("exp", -1.5, 1.5, |v| v.exp());
    check_unary("log", 0.3, 3.0, |v| v.log());
    check_unary("softplus", -3.0, 3.0, |v| v.softplus());
    check_unary("sigmoid", -3.0, 3.0, |v| v.sigmoid());
    check_unary("tanh", -2.0, 2.0, |v| v.tanh());
    check_unary("sqrt", 0.3, 3.0, |v| v.sqrt());
    check_unary("powf", 0.3, 2.0, |v| v.powf(2.7));
    check_unary("neg", -1.0, 1.0, |v| v.neg());
    check_unary("scale", -1.0, 1.0, |v| v.scale(-1.7));
    check_unary("add_scalar", -1.0, 1.0, |v| v.add_scalar(0.4).square());
}

#[test]
fn binary_primitives_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (sa, sb) in [
        (vec![3], vec![3]),
        (vec![2, 3], vec![3]),
        (vec![2, 1, 4], vec![3, 1]),
    ] {
        let b = random(&mut rng, &sb, 0.5, 2.0);
        let x = random(&mut rng, &sa, -1.0, 1.0);
        for kind in 0..4 {
            let bb = b.clone();
            let r = grad_check(
                move |v| {
                    let c = v.graph().constant(bb.clone());
                    let y = match kind {
                        0 => v + c,
                        1 => v - c,
                        2 => v * c,
                        _ => v / c,
                    };
                    project(y, 11)
                },
                &x,
                EPS,
            );
            assert!(r.passed(TOL), "kind {kind} {sa:?} {sb:?}: {r:?}");
        }
        // gradient through the broadcast operand
        let a = x.clone();
        let r = grad_check(
            move |v| {
                let c = v.graph().constant(a.clone());
                project(c * v + c / v, 13)
            },
            &b,
            EPS,
        );
        assert!(r.passed(TOL), "rhs {sa:?} {sb:?}: {r:?}");
    }
}

#[test]
fn matmul_and_batched_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (sa, sb) in [
        (vec![3, 4], vec![4, 2]),
        (vec![2, 3, 4], vec![4, 5]),
        (vec![2, 3, 4], vec![2, 4, 3]),
    ] {
        let a = random(&mut rng, &sa, -1.0, 1.0);
        let b = random(&mut rng, &sb, -1.0, 1.0);
        let bc = b.clone();
        let r = grad_check(
            move |v| {
                let c = v.graph().constant(bc.clone());
                project(v.matmul(c), 17)
            },
            &a,
            EPS,
        );
        assert!(r.passed(TOL), "lhs {sa:?}: {r:?}");
        let ac = a.clone();
        let r = grad_check(
            move |v| {
                let c = v.graph().constant(ac.clone());
                project(c.matmul(v), 19)
            },
            &b,
            EPS,
        );
        assert!(r.passed(TOL), "rhs {sb:?}: {r:?}");
    }
}

#[test]
fn shape_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for shape in [vec![2, 3], vec![2, 3, 4], vec![4, 1, 3]] {
        let x = random(&mut rng, &shape, -1.0, 1.0);
        let n: usize = shape.iter().product();
        let r = grad_check(|v| project(v.reshape(&[n]).square(), 1), &x, EPS);
        assert!(r.passed(TOL), "reshape {r:?}");
        let r = grad_check(|v| project(v.transpose().exp(), 2), &x, EPS);
        assert!(r.passed(TOL), "transpose {r:?}");
        let rank = shape.len();
        let perm: Vec<usize> = (0..rank).rev().collect();
        let r = grad_check(move |v| project(v.permute(&perm).tanh(), 3), &x, EPS);
        assert!(r.passed(TOL), "permute {r:?}");
        let mut big = vec![2];
        big.extend(&shape);
        let r = grad_check(move |v| project(v.broadcast_to(&big).sigmoid(), 4), &x, EPS);
        assert!(r.passed(TOL), "broadcast {r:?}");
        let r = grad_check(|v| project(v.slice(1, 0, 1).exp(), 5), &x, EPS);
        assert!(r.passed(TOL), "slice {r:?}");
    }
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for shape in [vec![4], vec![3, 4], vec![2, 3, 4]] {
        let x = random(&mut rng, &shape, -1.0, 1.0);
        let r = grad_check(|v| v.exp().sum().square(), &x, EPS);
        assert!(r.passed(TOL), "sum {r:?}");
        let r = grad_check(|v| v.exp().mean().log(), &x, EPS);
        assert!(r.passed(TOL), "mean {r:?}");
        let last = shape.len() - 1;
        let r = grad_check(move |v| project(v.sum_axis(last).tanh(), 6), &x, EPS);
        assert!(r.passed(TOL), "sum_axis {r:?}");
        let r = grad_check(|v| project(v.max_axis(0).exp(), 7), &x, EPS);
        assert!(r.passed(TOL), "max_axis {r:?}");
    }
}

#[test]
fn gather_scatter_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for shape in [vec![4, 2], vec![5, 3], vec![3, 2, 2]] {
        let x = random(&mut rng, &shape, -1.0, 1.0);
        let rows = vec![2, 0, 2, 1];
        let r = grad_check(|v| project(v.index_select(&rows).exp(), 8), &x, EPS);
        assert!(r.passed(TOL), "index_select {r:?}");
        let targets: Vec<usize> = (0..shape[0]).map(|i| (i * 2) % 3).collect();
        let r = grad_check(
            move |v| project(v.scatter_rows(&targets, 3).tanh(), 9),
            &x,
            EPS,
        );
        assert!(r.passed(TOL), "scatter {r:?}");
        let other = random(&mut rng, &shape, -1.0, 1.0);
        for axis in 0..shape.len() {
            let o = other.clone();
            let r = grad_check(
                move |v| {
                    let c = v.graph().constant(o.clone());
                    project(Var::concat(&[v, c, v], axis).sigmoid(), 10)
                },
                &x,
                EPS,
            );
            assert!(r.passed(TOL), "concat axis {axis}: {r:?}");
        }
    }
}

#[test]
fn softmax_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for shape in [vec![5], vec![3, 4], vec![2, 2, 6]] {
        let x = random(&mut rng, &shape, -2.0, 2.0);
        let r = grad_check(|v| v.softmax().square().sum(), &x, EPS);
        assert!(r.passed(TOL), "softmax sq {r:?}");
        let r = grad_check(|v| project(v.softmax(), 15), &x, EPS);
        assert!(r.passed(TOL), "softmax {r:?}");
        let r = grad_check(|v| project(v.layer_norm(1e-5), 16), &x, EPS);
        assert!(r.passed(TOL), "layer_norm {r:?}");
    }
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for dims in [[2, 2, 2], [3, 2, 4], [1, 3, 3]] {
        let (cin, cout) = (2, 3);
        let x = random(&mut rng, &[dims[0], dims[1], dims[2], cin], -1.0, 1.0);
        let w = random(&mut rng, &[3, 3, 3, cin, cout], -0.5, 0.5);
        let wc = w.clone();
        let r = grad_check(
            move |v| {
                let k = v.graph().constant(wc.clone());
                project(v.conv3d(k), 21)
            },
            &x,
            EPS,
        );
        assert!(r.passed(TOL), "conv3d input {dims:?}: {r:?}");
        let xc = x.clone();
        let r = grad_check(
            move |k| {
                let v = k.graph().constant(xc.clone());
                project(v.conv3d(k), 22)
            },
            &w,
            EPS,
        );
        assert!(r.passed(TOL), "conv3d kernel {dims:?}: {r:?}");
    }
    for (h, w) in [(3, 3), (4, 2), (2, 5)] {
        let x = random(&mut rng, &[h, w, 2], -1.0, 1.0);
        let k = random(&mut rng, &[3, 3, 2, 2], -0.5, 0.5);
        let kc = k.clone();
        let r = grad_check(
            move |v| {
                let kk = v.graph().constant(kc.clone());
                project(v.conv2d(kk), 23)
            },
            &x,
            EPS,
        );
        assert!(r.passed(TOL), "conv2d input: {r:?}");
        let xc = x.clone();
        let r = grad_check(
            move |kk| {
                let v = kk.graph().constant(xc.clone());
                project(v.conv2d(kk), 24)
            },
            &k,
            EPS,
        );
        assert!(r.passed(TOL), "conv2d kernel: {r:?}");
    }
}

#[test]
fn interpolation_and_compositing() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for (rows, c, n, taps) in [(8, 2, 5, 8), (4, 3, 6, 4), (27, 1, 3, 8)] {
        let grid = random(&mut rng, &[rows, c], -1.0, 1.0);
        let idx: Vec<u32> = (0..n * taps)
            .map(|_| rng.random_range(0..rows as u32))
            .collect();
        let w: Vec<f64> = (0..n * taps).map(|_| rng.random_range(0.0..1.0)).collect();
        let r = grad_check(
            move |v| project(v.interp(taps, idx.clone(), w.clone()), 31),
            &grid,
            EPS,
        );
        assert!(r.passed(TOL), "interp: {r:?}");
    }
    for (rays, samples) in [(1, 4), (3, 5), (2, 16)] {
        let sigma = random(&mut rng, &[rays, samples], 0.0, 3.0);
        let deltas: Vec<f64> = (0..rays).map(|_| rng.random_range(0.05..0.5)).collect();
        let r = grad_check(
            move |v| project(v.composite_weights(deltas.clone()), 32),
            &sigma,
            EPS,
        );
        assert!(r.passed(TOL), "composite: {r:?}");
    }
}

#[test]
fn linearity_of_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x0 = random(&mut rng, &[3, 4], -1.0, 1.0);
    let grads = |which: u8| {
        let g = Graph::<f64>::new();
        let x = g.param(x0.clone());
        let f = x.softmax().square().sum();
        let h = x.tanh().mul(x).sum();
        let root = match which {
            0 => f,
            1 => h,
            _ => f.scale(2.5) + h.scale(-0.75),
        };
        g.backward(root);
        g.grad(x).unwrap()
    };
    let (gf, gh, gc) = (grads(0), grads(1), grads(2));
    for i in 0..gc.numel() {
        let expect = 2.5 * gf.data()[i] - 0.75 * gh.data()[i];
        let rel = (gc.data()[i] - expect).abs() / expect.abs().max(1e-12);
        assert!(rel < 1e-10, "component {i}: {} vs {expect}", gc.data()[i]);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let g = Graph::<f32>::new();
        let a = g.param(Tensor::from_fn(&[16, 8], |_| rng.random_range(-1.0..1.0)));
        let b = g.param(Tensor::from_fn(&[8, 8], |_| rng.random_range(-1.0..1.0)));
        let y = a.matmul(b).softmax().layer_norm(1e-5).square().mean();
        g.backward(y);
        (
            y.item().to_bits(),
            g.grad(a)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
