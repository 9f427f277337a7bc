//! Interpolation taps for sampling voxel and pixel grids.
//!
//! Taps are computed in `f64` and fed to [`Var::interp`], so gradients
//! flow to the grid values but not to the sample positions.

use crate::tensor::{Real, Var};

/// Gather indices and weights, `taps` per sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Taps {
    pub taps: usize,
    pub idx: Vec<u32>,
    pub weights: Vec<f64>,
}

impl Taps {
    pub fn new(taps: usize) -> Self {
        Taps {
            taps,
            idx: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.idx.len() / self.taps.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn apply<'g, T: Real>(&self, rows: Var<'g, T>) -> Var<'g, T> {
        rows.interp(
            self.taps,
            self.idx.clone(),
            self.weights.iter().map(|&w| T::lit(w)).collect(),
        )
    }
}

/// Lower node and fraction along one axis of `n` nodes for a continuous
/// node coordinate, clamped to the grid.
pub fn axis_weights(u: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let u = u.clamp(0.0, (n - 1) as f64);
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, i0 + 1, u - i0 as f64)
}

/// Maps `[-1, 1]` to node coordinates `[0, n-1]`.
pub fn unit_to_node(p: f64, n: usize) -> f64 {
    (p + 1.0) * 0.5 * (n.saturating_sub(1)) as f64
}

/// Appends the 8 trilinear taps of point `p` (each coordinate in `[-1, 1]`,
/// first coordinate along the first grid axis) for a `dims` grid.
pub fn push_trilinear(taps: &mut Taps, dims: [usize; 3], p: [f64; 3]) {
    debug_assert_eq!(taps.taps, 8);
    let ax: Vec<_> = (0..3)
        .map(|a| axis_weights(unit_to_node(p[a], dims[a]), dims[a]))
        .collect();
    for corner in 0..8 {
        let mut w = 1.0;
        let mut flat = 0usize;
        for a in 0..3 {
            let (i0, i1, f) = ax[a];
            let hi = (corner >> (2 - a)) & 1 == 1;
            w *= if hi { f } else { 1.0 - f };
            flat = flat * dims[a] + if hi { i1 } else { i0 };
        }
        taps.idx.push(flat as u32);
        taps.weights.push(w);
    }
}

pub fn trilinear_taps(dims: [usize; 3], points: &[[f64; 3]]) -> Taps {
    let mut t = Taps::new(8);
    t.idx.reserve(points.len() * 8);
    t.weights.reserve(points.len() * 8);
    for &p in points {
        push_trilinear(&mut t, dims, p);
    }
    t
}

/// Samples `grid: [X, Y, Z, c]` at points in `[-1, 1]^3`; returns `[n, c]`.
pub fn trilinear_sample<'g, T: Real>(grid: Var<'g, T>, points: &[[f64; 3]]) -> Var<'g, T> {
    let s = grid.shape();
    assert_eq!(s.len(), 4, "trilinear grid must be [X,Y,Z,c], got {s:?}");
    let dims = [s[0], s[1], s[2]];
    trilinear_taps(dims, points).apply(grid.reshape(&[dims.iter().product(), s[3]]))
}

/// Appends the 4 bilinear taps at continuous node coordinates `(row, col)`
/// of a `[rows, cols]` grid, offset by `base` rows and scaled by `scale`.
pub fn push_bilinear(
    taps: &mut Taps,
    dims: [usize; 2],
    row: f64,
    col: f64,
    base: usize,
    scale: f64,
) {
    debug_assert_eq!(taps.taps % 4, 0);
    let (r0, r1, fr) = axis_weights(row, dims[0]);
    let (c0, c1, fc) = axis_weights(col, dims[1]);
    for (r, wr) in [(r0, 1.0 - fr), (r1, fr)] {
        for (c, wc) in [(c0, 1.0 - fc), (c1, fc)] {
            taps.idx.push((base + r * dims[1] + c) as u32);
            taps.weights.push(scale * wr * wc);
        }
    }
}

/// Samples `grid: [R, C, c]` at node coordinates `(row, col)`; returns `[n, c]`.
pub fn bilinear_sample<'g, T: Real>(grid: Var<'g, T>, coords: &[(f64, f64)]) -> Var<'g, T> {
    let s = grid.shape();
    assert_eq!(s.len(), 3, "bilinear grid must be [R,C,c], got {s:?}");
    let mut t = Taps::new(4);
    for &(r, c) in coords {
        push_bilinear(&mut t, [s[0], s[1]], r, c, 0, 1.0);
    }
    t.apply(grid.reshape(&[s[0] * s[1], s[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn grid() -> Tensor<f64> {
        Tensor::from_fn(&[3, 4, 2, 1], |i| (i * i) as f64 * 0.1 - 0.7)
    }

    #[test]
    fn node_points_return_node_values() {
        let g = Graph::<f64>::new();
        let t = grid();
        let v = g.constant(t.clone());
        let out = trilinear_sample(
            v,
            &[[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], [0.0, -1.0 / 3.0, 1.0]],
        );
        let d = out.value();
        assert_eq!(d.data()[0], t.data()[0]);
        assert_eq!(d.data()[1], t.data()[23]);
        // node (1, 1, 1)
        assert!((d.data()[2] - t.data()[8 + 2 + 1]).abs() < 1e-12);
    }

    #[test]
    fn cell_center_is_mean_of_corners() {
        let g = Graph::<f64>::new();
        let t = Tensor::from_fn(&[2, 2, 2, 1], |i| {
            [1.0, 5.0, -2.0, 0.5, 3.0, 3.0, 9.0, -4.0][i]
        });
        let out = trilinear_sample(g.constant(t.clone()), &[[0.0, 0.0, 0.0]]);
        assert!((out.item() - t.sum() / 8.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_clamps() {
        let g = Graph::<f64>::new();
        let t = grid();
        let a = trilinear_sample(g.constant(t.clone()), &[[-3.0, -1.0, 7.0]]).item();
        let b = trilinear_sample(g.constant(t), &[[-1.0, -1.0, 1.0]]).item();
        assert_eq!(a, b);
    }

    #[test]
    fn bilinear_midpoint() {
        let g = Graph::<f64>::new();
        let t = Tensor::from_f64(&[2, 2, 1], &[0.0, 1.0, 2.0, 3.0]);
        let out = bilinear_sample(g.constant(t), &[(0.5, 0.5), (1.0, 0.0), (0.25, 1.0)]);
        let d = out.value();
        assert!((d.data()[0] - 1.5).abs() < 1e-12);
        assert!((d.data()[1] - 2.0).abs() < 1e-12);
        assert!((d.data()[2] - 1.5).abs() < 1e-12);
    }
}
