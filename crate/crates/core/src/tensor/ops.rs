//! Differentiable primitives: forward construction on [`Var`] and the
//! matching vector-Jacobian products.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::graph::Node;
use super::{broadcast_index, broadcast_shape, gemm, permute_index, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind<T> {
    Neg,
    Scale(T),
    AddScalar(T),
    Powf(T),
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Tanh,
    Sqrt,
    Relu,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Binary {
        a: usize,
        b: usize,
        kind: BinKind,
        ia: Option<Vec<usize>>,
        ib: Option<Vec<usize>>,
    },
    Unary {
        a: usize,
        kind: UnaryKind<T>,
    },
    /// `[rows, k] x [k, n]` (leading dims of `a` flattened into rows).
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        k: usize,
        n: usize,
    },
    /// `[batch, m, k] x [batch, k, n]`.
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape {
        a: usize,
    },
    /// `out[i] = a[idx[i]]` (permute, broadcast, slice).
    Gather {
        a: usize,
        idx: Vec<u32>,
    },
    /// `out[i, :] = a[rows[i], :]`.
    RowGather {
        a: usize,
        rows: Vec<u32>,
        row_len: usize,
    },
    /// `out[rows[i], :] += a[i, :]` into a zeroed output.
    RowScatter {
        a: usize,
        rows: Vec<u32>,
        row_len: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<u32>,
    },
    Softmax {
        a: usize,
        len: usize,
    },
    LayerNorm {
        a: usize,
        len: usize,
        inv_std: Vec<T>,
    },
    Conv {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    /// `out[i, :] = sum_t w[i*taps+t] * grid[idx[i*taps+t], :]`.
    Interp {
        grid: usize,
        taps: usize,
        idx: Vec<u32>,
        weights: Vec<T>,
        row_len: usize,
    },
    /// Volume-rendering weights along each ray of `sigma: [rays, samples]`.
    CompositeWeights {
        sigma: usize,
        deltas: Vec<T>,
        samples: usize,
    },
}

fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]))
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Op<T> {
    pub(crate) fn backward(
        &self,
        nodes: &[Node<T>],
        out: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        match self {
            Op::Leaf => {}
            Op::Binary { a, b, kind, ia, ib } => {
                let av = nodes[*a].value.clone();
                let bv = nodes[*b].value.clone();
                let (ad, bd) = (av.data(), bv.data());
                let ai = |i: usize| ia.as_ref().map_or(i, |m| m[i]);
                let bi = |i: usize| ib.as_ref().map_or(i, |m| m[i]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinKind::Add | BinKind::Sub => gi,
                            BinKind::Mul => gi * bd[bi(i)],
                            BinKind::Div => gi / bd[bi(i)],
                        };
                        ga[ai(i)] += d;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * ad[ai(i)],
                            BinKind::Div => {
                                let bb = bd[bi(i)];
                                -gi * ad[ai(i)] / (bb * bb)
                            }
                        };
                        gb[bi(i)] += d;
                    }
                }
            }
            Op::Unary { a, kind } => {
                let xv = nodes[*a].value.clone();
                let x = xv.data();
                let y = out.data();
                let Some(ga) = slot(nodes, grads, *a) else {
                    return;
                };
                for i in 0..g.len() {
                    let d = match *kind {
                        UnaryKind::Neg => -g[i],
                        UnaryKind::Scale(s) => g[i] * s,
                        UnaryKind::AddScalar(_) => g[i],
                        UnaryKind::Powf(p) => g[i] * p * x[i].powf(p - T::one()),
                        UnaryKind::Exp => g[i] * y[i],
                        UnaryKind::Log => g[i] / x[i],
                        UnaryKind::Softplus => g[i] * sigmoid(x[i]),
                        UnaryKind::Sigmoid => g[i] * y[i] * (T::one() - y[i]),
                        UnaryKind::Tanh => g[i] * (T::one() - y[i] * y[i]),
                        UnaryKind::Sqrt => g[i] * T::lit(0.5) / y[i],
                        UnaryKind::Relu => {
                            if x[i] > T::zero() {
                                g[i]
                            } else {
                                T::zero()
                            }
                        }
                    };
                    ga[i] += d;
                }
            }
            Op::MatMul { a, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                let av = nodes[*a].value.clone();
                let bv = nodes[*b].value.clone();
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(rows, n, k, g, false, bv.data(), true, ga, true);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(k, rows, n, av.data(), true, g, false, gb, true);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = nodes[*a].value.clone();
                let bv = nodes[*b].value.clone();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for bi in 0..*batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            false,
                            &bv.data()[bi * k * n..],
                            true,
                            &mut ga[bi * m * k..],
                            true,
                        );
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for bi in 0..*batch {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[bi * m * k..],
                            true,
                            &g[bi * m * n..],
                            false,
                            &mut gb[bi * k * n..],
                            true,
                        );
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::Gather { a, idx } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, &src) in idx.iter().enumerate() {
                        ga[src as usize] += g[i];
                    }
                }
            }
            Op::RowGather { a, rows, row_len } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut ga[r as usize * row_len..(r as usize + 1) * row_len];
                        for (d, &s) in dst.iter_mut().zip(&g[i * row_len..(i + 1) * row_len]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::RowScatter { a, rows, row_len } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &g[r as usize * row_len..(r as usize + 1) * row_len];
                        for (d, &s) in ga[i * row_len..(i + 1) * row_len].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&inp, &chunk) in inputs.iter().zip(chunks) {
                    if let Some(gi) = slot(nodes, grads, inp) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (d, &s) in gi[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::SumAll { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            } => {
                let (len, inner) = (*len, *inner);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for o in 0..*outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                ga[base + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MaxAxis {
                a,
                outer,
                len,
                inner,
                argmax,
            } => {
                let (len, inner) = (*len, *inner);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for o in 0..*outer {
                        for i in 0..inner {
                            let l = argmax[o * inner + i] as usize;
                            ga[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Softmax { a, len } => {
                let y = out.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (r, (yr, gr)) in y.chunks(*len).zip(g.chunks(*len)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..*len {
                            ga[r * len + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, len, inv_std } => {
                let y = out.data();
                let n = T::lit(*len as f64);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (r, (yr, gr)) in y.chunks(*len).zip(g.chunks(*len)).enumerate() {
                        let mean_g: T = gr.iter().copied().sum::<T>() / n;
                        let mean_gy: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / n;
                        for j in 0..*len {
                            ga[r * len + j] += inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Conv { x, w, geom } => {
                let xv = nodes[*x].value.clone();
                let wv = nodes[*w].value.clone();
                let need_x = nodes[*x].requires_grad;
                let need_w = nodes[*w].requires_grad;
                let n: usize = geom.dims.iter().product();
                let (cin, cout) = (geom.cin, geom.cout);
                let mut shifted = vec![T::zero(); n * cout];
                let mut gx = need_x.then(|| vec![T::zero(); n * cin]);
                let mut gw = need_w.then(|| vec![T::zero(); wv.numel()]);
                for (t, off) in kernel_offsets(geom.kernel).into_iter().enumerate() {
                    shifted.iter_mut().for_each(|v| *v = T::zero());
                    let neg = [-off[0], -off[1], -off[2]];
                    shifted_add(&mut shifted, g, geom.dims, neg, cout);
                    let w_t = &wv.data()[t * cin * cout..(t + 1) * cin * cout];
                    if let Some(gx) = gx.as_mut() {
                        gemm(n, cout, cin, &shifted, false, w_t, true, gx, true);
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(
                            cin,
                            n,
                            cout,
                            xv.data(),
                            true,
                            &shifted,
                            false,
                            &mut gw[t * cin * cout..(t + 1) * cin * cout],
                            true,
                        );
                    }
                }
                if let (Some(src), Some(dst)) = (gx, slot(nodes, grads, *x)) {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                if let (Some(src), Some(dst)) = (gw, slot(nodes, grads, *w)) {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Op::Interp {
                grid,
                taps,
                idx,
                weights,
                row_len,
            } => {
                let c = *row_len;
                if let Some(gg) = slot(nodes, grads, *grid) {
                    for (i, gr) in g.chunks(c).enumerate() {
                        for t in 0..*taps {
                            let wt = weights[i * taps + t];
                            if wt == T::zero() {
                                continue;
                            }
                            let base = idx[i * taps + t] as usize * c;
                            for (d, &s) in gg[base..base + c].iter_mut().zip(gr) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
            Op::CompositeWeights {
                sigma,
                deltas,
                samples,
            } => {
                let s = *samples;
                let sv = nodes[*sigma].value.clone();
                let w = out.data();
                if let Some(gs) = slot(nodes, grads, *sigma) {
                    for (r, &delta) in deltas.iter().enumerate() {
                        let sig = &sv.data()[r * s..(r + 1) * s];
                        let wr = &w[r * s..(r + 1) * s];
                        let gr = &g[r * s..(r + 1) * s];
                        // suffix[i] = sum_{j > i} g_j w_j
                        let mut suffix = T::zero();
                        let mut optical = T::zero();
                        let mut trans_after = Vec::with_capacity(s);
                        for &sg in sig {
                            optical += sg * delta;
                            trans_after.push((-optical).exp());
                        }
                        for i in (0..s).rev() {
                            gs[r * s + i] += delta * (gr[i] * trans_after[i] - suffix);
                            suffix += gr[i] * wr[i];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn kernel_offsets(kernel: [usize; 3]) -> Vec<[isize; 3]> {
    let mut out = Vec::with_capacity(kernel.iter().product());
    for a in 0..kernel[0] {
        for b in 0..kernel[1] {
            for c in 0..kernel[2] {
                out.push([
                    a as isize - (kernel[0] / 2) as isize,
                    b as isize - (kernel[1] / 2) as isize,
                    c as isize - (kernel[2] / 2) as isize,
                ]);
            }
        }
    }
    out
}

/// `dst[p] += src[p + off]` for every voxel `p` with `p + off` in bounds.
fn shifted_add<T: Real>(dst: &mut [T], src: &[T], dims: [usize; 3], off: [isize; 3], c: usize) {
    let range = |n: usize, o: isize| {
        let lo = (-o).max(0) as usize;
        let hi = (n as isize - o).min(n as isize).max(0) as usize;
        (lo, hi)
    };
    let (x0, x1) = range(dims[0], off[0]);
    let (y0, y1) = range(dims[1], off[1]);
    let (z0, z1) = range(dims[2], off[2]);
    if x0 >= x1 || y0 >= y1 || z0 >= z1 {
        return;
    }
    let len = (z1 - z0) * c;
    for x in x0..x1 {
        for y in y0..y1 {
            let d = ((x * dims[1] + y) * dims[2] + z0) * c;
            let sx = (x as isize + off[0]) as usize;
            let sy = (y as isize + off[1]) as usize;
            let sz = (z0 as isize + off[2]) as usize;
            let s = ((sx * dims[1] + sy) * dims[2] + sz) * c;
            for (a, &b) in dst[d..d + len].iter_mut().zip(&src[s..s + len]) {
                *a += b;
            }
        }
    }
}

fn to_u32(v: Vec<usize>) -> Vec<u32> {
    v.into_iter()
        .map(|i| u32::try_from(i).expect("tensor too large for u32 indexing"))
        .collect()
}

impl<'g, T: Real> Var<'g, T> {
    fn emit(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'g, T> {
        self.graph.push(Rc::new(value), op, requires_grad)
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn binary(&self, other: Var<'g, T>, kind: BinKind) -> Var<'g, T> {
        self.same_graph(&other);
        let av = self.value();
        let bv = other.value();
        let (value, ia, ib) = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| apply_bin(kind, x, y))
                .collect();
            (Tensor::new(av.shape(), data), None, None)
        } else {
            let shape = broadcast_shape(av.shape(), bv.shape()).unwrap_or_else(|| {
                panic!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape())
            });
            let ia = (av.shape() != shape.as_slice()).then(|| broadcast_index(&shape, av.shape()));
            let ib = (bv.shape() != shape.as_slice()).then(|| broadcast_index(&shape, bv.shape()));
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|i| {
                    let x = av.data()[ia.as_ref().map_or(i, |m| m[i])];
                    let y = bv.data()[ib.as_ref().map_or(i, |m| m[i])];
                    apply_bin(kind, x, y)
                })
                .collect();
            (Tensor::new(&shape, data), ia, ib)
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.emit(
            value,
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
                ia,
                ib,
            },
            rg,
        )
    }

    fn unary(&self, kind: UnaryKind<T>) -> Var<'g, T> {
        let x = self.value();
        let f = |v: T| -> T {
            match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Scale(s) => v * s,
                UnaryKind::AddScalar(s) => v + s,
                UnaryKind::Powf(p) => v.powf(p),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Relu => v.max(T::zero()),
            }
        };
        self.emit(
            x.map(f),
            Op::Unary { a: self.id, kind },
            self.requires_grad(),
        )
    }

    pub fn add(&self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(&self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(&self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(&self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, BinKind::Div)
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(&self, s: f64) -> Var<'g, T> {
        self.unary(UnaryKind::Scale(T::lit(s)))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g, T> {
        self.unary(UnaryKind::AddScalar(T::lit(s)))
    }

    pub fn powf(&self, p: f64) -> Var<'g, T> {
        self.unary(UnaryKind::Powf(T::lit(p)))
    }

    pub fn square(&self) -> Var<'g, T> {
        self.mul(*self)
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Log)
    }

    pub fn softplus(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Softplus)
    }

    /// `softplus(x) - ln 2`, a smooth activation with `f(0) = 0`.
    pub fn shifted_softplus(&self) -> Var<'g, T> {
        self.softplus().add_scalar(-std::f64::consts::LN_2)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sqrt(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Relu)
    }

    /// `[.., k] x [k, n]` with leading dims flattened, or `[b, m, k] x [b, k, n]`.
    pub fn matmul(&self, other: Var<'g, T>) -> Var<'g, T> {
        self.same_graph(&other);
        let av = self.value();
        let bv = other.value();
        let rg = self.requires_grad() || other.requires_grad();
        match bv.rank() {
            2 => {
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let k_a = *av.shape().last().expect("rank >= 1");
                assert_eq!(
                    k_a,
                    k,
                    "matmul inner dims {:?} x {:?}",
                    av.shape(),
                    bv.shape()
                );
                let rows = av.numel() / k;
                let mut out = vec![T::zero(); rows * n];
                gemm(
                    rows,
                    k,
                    n,
                    av.data(),
                    false,
                    bv.data(),
                    false,
                    &mut out,
                    false,
                );
                let mut shape = av.shape().to_vec();
                *shape.last_mut().unwrap() = n;
                self.emit(
                    Tensor::new(&shape, out),
                    Op::MatMul {
                        a: self.id,
                        b: other.id,
                        rows,
                        k,
                        n,
                    },
                    rg,
                )
            }
            3 => {
                assert_eq!(av.rank(), 3, "batched matmul needs rank-3 operands");
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                assert_eq!(bv.shape()[0], batch);
                assert_eq!(
                    bv.shape()[1],
                    k,
                    "bmm inner dims {:?} x {:?}",
                    av.shape(),
                    bv.shape()
                );
                let n = bv.shape()[2];
                let mut out = vec![T::zero(); batch * m * n];
                for bi in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av.data()[bi * m * k..],
                        false,
                        &bv.data()[bi * k * n..],
                        false,
                        &mut out[bi * m * n..],
                        false,
                    );
                }
                self.emit(
                    Tensor::new(&[batch, m, n], out),
                    Op::BatchMatMul {
                        a: self.id,
                        b: other.id,
                        batch,
                        m,
                        k,
                        n,
                    },
                    rg,
                )
            }
            r => panic!("matmul rhs must be rank 2 or 3, got {r}"),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g, T> {
        let v = self.value();
        assert_eq!(
            shape.iter().product::<usize>(),
            v.numel(),
            "cannot reshape {:?} to {:?}",
            v.shape(),
            shape
        );
        let value = Tensor::new(shape, v.data().to_vec());
        self.emit(value, Op::Reshape { a: self.id }, self.requires_grad())
    }

    fn gather(&self, shape: &[usize], idx: Vec<usize>) -> Var<'g, T> {
        let v = self.value();
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        self.emit(
            Tensor::new(shape, data),
            Op::Gather {
                a: self.id,
                idx: to_u32(idx),
            },
            self.requires_grad(),
        )
    }

    pub fn permute(&self, perm: &[usize]) -> Var<'g, T> {
        let shape = self.shape();
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.gather(&out, permute_index(&shape, perm))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Var<'g, T> {
        let r = self.shape().len();
        assert!(r >= 2);
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<'g, T> {
        let src = self.shape();
        assert_eq!(
            broadcast_shape(&src, shape).as_deref(),
            Some(shape),
            "cannot broadcast {src:?} to {shape:?}"
        );
        self.gather(shape, broadcast_index(shape, &src))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "slice out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            idx.extend(base..base + len * inner);
        }
        let mut out = shape.clone();
        out[axis] = len;
        self.gather(&out, idx)
    }

    /// Selects rows along axis 0.
    pub fn index_select(&self, rows: &[usize]) -> Var<'g, T> {
        let v = self.value();
        let shape = v.shape();
        let row_len: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            assert!(r < shape[0], "row {r} out of range {}", shape[0]);
            data.extend_from_slice(&v.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut out = shape.to_vec();
        out[0] = rows.len();
        self.emit(
            Tensor::new(&out, data),
            Op::RowGather {
                a: self.id,
                rows: to_u32(rows.to_vec()),
                row_len,
            },
            self.requires_grad(),
        )
    }

    /// Adds row `i` of `self` into row `rows[i]` of a zero tensor with `total` rows.
    pub fn scatter_rows(&self, rows: &[usize], total: usize) -> Var<'g, T> {
        let v = self.value();
        let shape = v.shape();
        assert_eq!(rows.len(), shape[0]);
        let row_len: usize = shape[1..].iter().product();
        let mut data = vec![T::zero(); total * row_len];
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < total);
            for (d, &s) in data[r * row_len..(r + 1) * row_len]
                .iter_mut()
                .zip(&v.data()[i * row_len..(i + 1) * row_len])
            {
                *d += s;
            }
        }
        let mut out = shape.to_vec();
        out[0] = total;
        self.emit(
            Tensor::new(&out, data),
            Op::RowScatter {
                a: self.id,
                rows: to_u32(rows.to_vec()),
                row_len,
            },
            self.requires_grad(),
        )
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        let outer: usize = first[..axis].iter().product();
        let mut chunks = Vec::with_capacity(parts.len());
        let mut extent = 0;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for (p, v) in parts.iter().zip(&values) {
            parts[0].same_graph(p);
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (ax, (&x, &y)) in s.iter().zip(&first).enumerate() {
                assert!(
                    ax == axis || x == y,
                    "concat shape mismatch {s:?} vs {first:?}"
                );
            }
            extent += s[axis];
            chunks.push(s[axis..].iter().product::<usize>());
        }
        let total: usize = chunks.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &chunk) in values.iter().zip(&chunks) {
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = extent;
        let rg = parts.iter().any(|p| p.requires_grad());
        parts[0].emit(
            Tensor::new(&shape, data),
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                outer,
                chunks,
            },
            rg,
        )
    }

    pub fn sum(&self) -> Var<'g, T> {
        let v = self.value();
        self.emit(
            Tensor::scalar(v.sum()),
            Op::SumAll { a: self.id },
            self.requires_grad(),
        )
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    fn axis_split(&self, axis: usize) -> (Vec<usize>, usize, usize, usize) {
        let shape = self.shape();
        assert!(axis < shape.len());
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out = shape.clone();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        (out, outer, len, inner)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&self, axis: usize) -> Var<'g, T> {
        let (shape, outer, len, inner) = self.axis_split(axis);
        let v = self.value();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += v.data()[base + i];
                }
            }
        }
        self.emit(
            Tensor::new(&shape, data),
            Op::SumAxis {
                a: self.id,
                outer,
                len,
                inner,
            },
            self.requires_grad(),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'g, T> {
        let len = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / len)
    }

    /// Maximum over `axis` (the axis is removed). Ties go to the first index.
    pub fn max_axis(&self, axis: usize) -> Var<'g, T> {
        let (shape, outer, len, inner) = self.axis_split(axis);
        let v = self.value();
        let mut data = vec![T::zero(); outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = v.data()[o * len * inner + i];
                let mut arg = 0;
                for l in 1..len {
                    let x = v.data()[(o * len + l) * inner + i];
                    if x > best {
                        best = x;
                        arg = l;
                    }
                }
                data[o * inner + i] = best;
                argmax[o * inner + i] = arg as u32;
            }
        }
        self.emit(
            Tensor::new(&shape, data),
            Op::MaxAxis {
                a: self.id,
                outer,
                len,
                inner,
                argmax,
            },
            self.requires_grad(),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g, T> {
        let v = self.value();
        let len = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(len) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.emit(
            Tensor::new(v.shape(), data),
            Op::Softmax { a: self.id, len },
            self.requires_grad(),
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Var<'g, T> {
        let v = self.value();
        let len = *v.shape().last().unwrap();
        let n = T::lit(len as f64);
        let mut data = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / len);
        for row in data.chunks_mut(len) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::lit(eps)).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.emit(
            Tensor::new(v.shape(), data),
            Op::LayerNorm {
                a: self.id,
                len,
                inv_std,
            },
            self.requires_grad(),
        )
    }

    /// Same-padded, stride-1 convolution of `[X, Y, Z, cin]` with a
    /// `[kx, ky, kz, cin, cout]` kernel (odd extents).
    pub fn conv3d(&self, weight: Var<'g, T>) -> Var<'g, T> {
        self.same_graph(&weight);
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4, "conv3d input must be [X,Y,Z,c], got {xs:?}");
        assert_eq!(
            ws.len(),
            5,
            "conv3d kernel must be [kx,ky,kz,cin,cout], got {ws:?}"
        );
        assert!(
            ws[..3].iter().all(|k| k % 2 == 1),
            "kernel extents must be odd"
        );
        assert_eq!(ws[3], xs[3], "conv3d channel mismatch");
        let geom = ConvGeom {
            dims: [xs[0], xs[1], xs[2]],
            kernel: [ws[0], ws[1], ws[2]],
            cin: ws[3],
            cout: ws[4],
        };
        let xv = self.value();
        let wv = weight.value();
        let out = conv_forward(xv.data(), wv.data(), &geom);
        let rg = self.requires_grad() || weight.requires_grad();
        self.emit(
            Tensor::new(&[xs[0], xs[1], xs[2], geom.cout], out),
            Op::Conv {
                x: self.id,
                w: weight.id,
                geom,
            },
            rg,
        )
    }

    /// Same-padded, stride-1 convolution of `[H, W, cin]` with a `[kh, kw, cin, cout]` kernel.
    pub fn conv2d(&self, weight: Var<'g, T>) -> Var<'g, T> {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 3, "conv2d input must be [H,W,c], got {xs:?}");
        assert_eq!(
            ws.len(),
            4,
            "conv2d kernel must be [kh,kw,cin,cout], got {ws:?}"
        );
        let x3 = self.reshape(&[xs[0], xs[1], 1, xs[2]]);
        let w3 = weight.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]]);
        x3.conv3d(w3).reshape(&[xs[0], xs[1], ws[3]])
    }

    /// Weighted gather of rows of a `[rows, c]` grid: output row `i` is
    /// `sum_t weights[i*taps+t] * grid[idx[i*taps+t]]`. Weights are constants.
    pub fn interp(&self, taps: usize, idx: Vec<u32>, weights: Vec<T>) -> Var<'g, T> {
        let v = self.value();
        assert_eq!(v.rank(), 2, "interp grid must be [rows, c]");
        assert_eq!(idx.len(), weights.len());
        assert!(taps > 0 && idx.len().is_multiple_of(taps));
        let rows = v.shape()[0];
        let c = v.shape()[1];
        let n = idx.len() / taps;
        let mut data = vec![T::zero(); n * c];
        for i in 0..n {
            let out = &mut data[i * c..(i + 1) * c];
            for t in 0..taps {
                let wt = weights[i * taps + t];
                let r = idx[i * taps + t] as usize;
                assert!(r < rows, "interp index {r} out of range {rows}");
                if wt == T::zero() {
                    continue;
                }
                for (o, &s) in out.iter_mut().zip(&v.data()[r * c..(r + 1) * c]) {
                    *o += wt * s;
                }
            }
        }
        self.emit(
            Tensor::new(&[n, c], data),
            Op::Interp {
                grid: self.id,
                taps,
                idx,
                weights,
                row_len: c,
            },
            self.requires_grad(),
        )
    }

    /// Alpha-compositing weights `w_i = T_i (1 - exp(-sigma_i delta))`,
    /// `T_i = exp(-sum_{j<i} sigma_j delta)`, for `self: [rays, samples]`
    /// with one constant step `deltas[r]` per ray.
    pub fn composite_weights(&self, deltas: Vec<T>) -> Var<'g, T> {
        let v = self.value();
        assert_eq!(v.rank(), 2);
        let (rays, s) = (v.shape()[0], v.shape()[1]);
        assert_eq!(deltas.len(), rays);
        let mut data = vec![T::zero(); rays * s];
        for r in 0..rays {
            let delta = deltas[r];
            let mut optical = T::zero();
            for i in 0..s {
                let sd = v.data()[r * s + i] * delta;
                let trans = (-optical).exp();
                data[r * s + i] = trans * -(-sd).exp_m1();
                optical += sd;
            }
        }
        self.emit(
            Tensor::new(&[rays, s], data),
            Op::CompositeWeights {
                sigma: self.id,
                deltas,
                samples: s,
            },
            self.requires_grad(),
        )
    }
}

fn apply_bin<T: Real>(kind: BinKind, x: T, y: T) -> T {
    match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    }
}

pub(crate) fn conv_forward<T: Real>(x: &[T], w: &[T], geom: &ConvGeom) -> Vec<T> {
    let n: usize = geom.dims.iter().product();
    let (cin, cout) = (geom.cin, geom.cout);
    let mut out = vec![T::zero(); n * cout];
    let mut tmp = vec![T::zero(); n * cout];
    for (t, off) in kernel_offsets(geom.kernel).into_iter().enumerate() {
        let w_t = &w[t * cin * cout..(t + 1) * cin * cout];
        if w_t.iter().all(|v| *v == T::zero()) {
            continue;
        }
        gemm(n, cin, cout, x, false, w_t, false, &mut tmp, false);
        shifted_add(&mut out, &tmp, geom.dims, off, cout);
    }
    out
}

impl<'g, T: Real> Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(&self, rhs)
    }
}

impl<'g, T: Real> Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(&self, rhs)
    }
}

impl<'g, T: Real> Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(&self, rhs)
    }
}

impl<'g, T: Real> Div for Var<'g, T> {
    type Output = Var<'g, T>;
    fn div(self, rhs: Self) -> Self::Output {
        Var::div(&self, rhs)
    }
}

impl<'g, T: Real> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        Var::neg(&self)
    }
}

impl<T: Real> Graph<T> {
    /// Convenience for a scalar constant.
    pub fn scalar(&self, v: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::lit(v)))
    }
}
