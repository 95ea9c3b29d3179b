//! Differentiable bilinear sampling of feature maps through an affine grid.
//!
//! Output cell `(i, j)` of an `out_h x out_w` grid sits at normalized target
//! coordinates `((j + 1/2) / out_w, (i + 1/2) / out_h)`. Theta maps them to
//! normalized source coordinates `(x', y')`, which become source pixel-centre
//! units `col = x' src_w - 1/2`, `row = y' src_h - 1/2`. The value is
//!
//! ```text
//! V(i, j) = sum_{m, n} U(n, m) max(0, 1 - |col - m|) max(0, 1 - |row - n|)
//! ```
//!
//! with `U` read as zero outside the source.

use crate::autodiff::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::AffineTheta;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_OUT_SIZE: usize = 6;

/// Warped source positions of every output cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub out_h: usize,
    pub out_w: usize,
    pub src_h: usize,
    pub src_w: usize,
    /// `[col, row]` in source pixel units, row-major over output cells.
    pub coords: Vec<[f64; 2]>,
}

fn target(i: usize, j: usize, out_h: usize, out_w: usize) -> (f64, f64) {
    ((j as f64 + 0.5) / out_w as f64, (i as f64 + 0.5) / out_h as f64)
}

pub fn make_grid(theta: &AffineTheta, out_h: usize, out_w: usize, src_h: usize, src_w: usize) -> Result<SampleGrid> {
    if out_h == 0 || out_w == 0 || src_h == 0 || src_w == 0 {
        return Err(Error::Shape(format!(
            "sampling grid extents must be positive, got out {out_h}x{out_w} src {src_h}x{src_w}"
        )));
    }
    let mut coords = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            let (x, y) = target(i, j, out_h, out_w);
            let [xs, ys] = theta.apply(x, y);
            let c = [xs * src_w as f64 - 0.5, ys * src_h as f64 - 0.5];
            if !(c[0].is_finite() && c[1].is_finite()) {
                return Err(Error::NonFinite { index: coords.len() });
            }
            coords.push(c);
        }
    }
    Ok(SampleGrid { out_h, out_w, src_h, src_w, coords })
}

/// Gradient of a loss with respect to theta given its gradient with respect
/// to the grid coordinates.
pub fn grid_backward(grid: &SampleGrid, coord_grad: &[[f64; 2]]) -> [f64; 6] {
    let (sw, sh) = (grid.src_w as f64, grid.src_h as f64);
    let mut g = [0.0; 6];
    for i in 0..grid.out_h {
        for j in 0..grid.out_w {
            let (x, y) = target(i, j, grid.out_h, grid.out_w);
            let [dc, dr] = coord_grad[i * grid.out_w + j];
            g[0] += dc * x * sw;
            g[1] += dc * y * sw;
            g[2] += dc * sw;
            g[3] += dr * x * sh;
            g[4] += dr * y * sh;
            g[5] += dr * sh;
        }
    }
    g
}

/// One in-bounds neighbour of a sample point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    /// Flat index `row * src_w + col` into a source plane.
    pub index: usize,
    pub weight: f64,
    pub d_col: f64,
    pub d_row: f64,
}

/// The up to four in-bounds bilinear neighbours of `[col, row]`.
pub fn taps(coord: [f64; 2], src_h: usize, src_w: usize) -> impl Iterator<Item = Tap> {
    let [col, row] = coord;
    let (m0, n0) = (col.floor(), row.floor());
    let (fx, fy) = (col - m0, row - n0);
    let xs = [(m0, 1.0 - fx, -1.0), (m0 + 1.0, fx, 1.0)];
    let ys = [(n0, 1.0 - fy, -1.0), (n0 + 1.0, fy, 1.0)];
    ys.into_iter().flat_map(move |(n, wy, sy)| {
        xs.into_iter().filter_map(move |(m, wx, sx)| {
            let inside = m >= 0.0 && n >= 0.0 && m < src_w as f64 && n < src_h as f64;
            inside.then(|| Tap {
                index: n as usize * src_w + m as usize,
                weight: wx * wy,
                d_col: sx * wy,
                d_row: sy * wx,
            })
        })
    })
}

/// Samples every channel of `u: [C, H, W]` (flat) into `out: [C, out_h, out_w]`.
pub fn sample_into<T: Scalar>(u: &[T], channels: usize, grid: &SampleGrid, out: &mut [T]) {
    let plane = grid.src_h * grid.src_w;
    let cells = grid.coords.len();
    debug_assert_eq!(u.len(), channels * plane);
    debug_assert_eq!(out.len(), channels * cells);
    out.fill(T::zero());
    for (cell, &coord) in grid.coords.iter().enumerate() {
        for tap in taps(coord, grid.src_h, grid.src_w) {
            let w = T::of(tap.weight);
            for c in 0..channels {
                let o = &mut out[c * cells + cell];
                *o = *o + w * u[c * plane + tap.index];
            }
        }
    }
}

/// Accumulates into `du` and returns the gradient with respect to the grid
/// coordinates.
pub fn sample_backward_into<T: Scalar>(
    u: &[T],
    channels: usize,
    grid: &SampleGrid,
    grad: &[T],
    mut du: Option<&mut [T]>,
) -> Vec<[f64; 2]> {
    let plane = grid.src_h * grid.src_w;
    let cells = grid.coords.len();
    let mut dcoord = vec![[0.0; 2]; cells];
    for (cell, &coord) in grid.coords.iter().enumerate() {
        for tap in taps(coord, grid.src_h, grid.src_w) {
            let w = T::of(tap.weight);
            let mut dot = 0.0;
            for c in 0..channels {
                let g = grad[c * cells + cell];
                dot += (g * u[c * plane + tap.index]).as_f64();
                if let Some(du) = du.as_deref_mut() {
                    let d = &mut du[c * plane + tap.index];
                    *d = *d + w * g;
                }
            }
            dcoord[cell][0] += dot * tap.d_col;
            dcoord[cell][1] += dot * tap.d_row;
        }
    }
    dcoord
}

/// Bilinear sample of a single `[C, H, W]` tensor.
pub fn sample<T: Scalar>(u: &Tensor<T>, grid: &SampleGrid) -> Result<Tensor<T>> {
    if u.rank() != 3 || u.dim(1) != grid.src_h || u.dim(2) != grid.src_w {
        return Err(Error::Dimension {
            op: "sample",
            lhs: u.shape().to_vec(),
            rhs: vec![grid.src_h, grid.src_w],
        });
    }
    let c = u.dim(0);
    let mut out = vec![T::zero(); c * grid.coords.len()];
    sample_into(u.data(), c, grid, &mut out);
    Ok(Tensor::from_vec_unchecked(vec![c, grid.out_h, grid.out_w], out))
}

/// Returns `(dL/dU, dL/dcoords)` for a single sample.
pub fn sample_backward<T: Scalar>(u: &Tensor<T>, grid: &SampleGrid, grad: &Tensor<T>) -> (Tensor<T>, Vec<[f64; 2]>) {
    let mut du = Tensor::zeros(u.shape());
    let dcoord = sample_backward_into(u.data(), u.dim(0), grid, grad.data(), Some(du.data_mut()));
    (du, dcoord)
}

struct SampleBackward {
    grids: Vec<SampleGrid>,
}

impl<T: Scalar> Backward<T> for SampleBackward {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let u = inputs[0];
        let (batch, channels) = (u.dim(0), u.dim(1));
        let in_size = u.len() / batch;
        let out_size = output.len() / batch;
        let mut du = needs[0].then(|| Tensor::zeros(u.shape()));
        let mut dtheta = Vec::with_capacity(batch * 6);
        for (b, grid) in self.grids.iter().enumerate() {
            let dslice = du.as_mut().map(|d| &mut d.data_mut()[b * in_size..(b + 1) * in_size]);
            let dcoord = sample_backward_into(
                &u.data()[b * in_size..(b + 1) * in_size],
                channels,
                grid,
                &grad.data()[b * out_size..(b + 1) * out_size],
                dslice,
            );
            dtheta.extend(grid_backward(grid, &dcoord).map(T::of));
        }
        let dtheta = needs[1].then(|| Tensor::from_vec_unchecked(vec![batch, 6], dtheta));
        vec![du, dtheta]
    }
}

/// Samples `features: [B, C, H, W]` through per-sample `theta: [B, 6]` into
/// `[B, C, out_h, out_w]`.
pub fn sample_features<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    theta: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let (fv, tv) = (tape.value(features), tape.value(theta));
    if fv.rank() != 4 || tv.shape() != [fv.dim(0), 6] {
        return Err(Error::Dimension {
            op: "sample_features",
            lhs: fv.shape().to_vec(),
            rhs: tv.shape().to_vec(),
        });
    }
    let (batch, channels, h, w) = (fv.dim(0), fv.dim(1), fv.dim(2), fv.dim(3));
    let in_size = channels * h * w;
    let out_size = channels * out_h * out_w;
    let mut out = vec![T::zero(); batch * out_size];
    let mut grids = Vec::with_capacity(batch);
    for b in 0..batch {
        let row: Vec<f64> = tv.data()[b * 6..(b + 1) * 6].iter().map(|v| v.as_f64()).collect();
        let grid = make_grid(&AffineTheta::from_slice(&row), out_h, out_w, h, w)?;
        sample_into(&fv.data()[b * in_size..(b + 1) * in_size], channels, &grid, &mut out[b * out_size..(b + 1) * out_size]);
        grids.push(grid);
    }
    let value = Tensor::from_vec_unchecked(vec![batch, channels, out_h, out_w], out);
    Ok(tape.push(value, &[features, theta], SampleBackward { grids }))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn identity_grid_hits_pixel_centres() {
        let g = make_grid(&AffineTheta::identity(), 5, 7, 5, 7).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let [c, r] = g.coords[i * 7 + j];
                assert!((c - j as f64).abs() < 1e-12 && (r - i as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_sampling_reproduces_input() {
        let u = Tensor::<f64>::from_fn(&[3, 8, 8], |i| ((i * 37) % 11) as f64 - 4.0);
        let v = sample(&u, &make_grid(&AffineTheta::identity(), 8, 8, 8, 8).unwrap()).unwrap();
        assert!(v.max_abs_diff(&u) <= 1e-12);
    }

    #[test]
    fn half_box_on_four_by_four() {
        let theta = AffineTheta([[0.5, 0.0, 0.25], [0.0, 0.5, 0.25]]);
        let g = make_grid(&theta, 2, 2, 4, 4).unwrap();
        assert_eq!(g.coords, vec![[1.0, 1.0], [2.0, 1.0], [1.0, 2.0], [2.0, 2.0]]);
    }

    #[test]
    fn midpoint_of_four_neighbours() {
        let u = Tensor::<f64>::from_f64(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let grid = SampleGrid { out_h: 1, out_w: 1, src_h: 2, src_w: 2, coords: vec![[0.5, 0.5]] };
        assert_eq!(sample(&u, &grid).unwrap().data(), &[1.5]);
    }

    #[test]
    fn outside_reads_zero() {
        let u = Tensor::<f64>::full(&[1, 2, 2], 1.0);
        let grid = SampleGrid { out_h: 1, out_w: 2, src_h: 2, src_w: 2, coords: vec![[-0.5, 0.0], [5.0, 5.0]] };
        assert_eq!(sample(&u, &grid).unwrap().data(), &[0.5, 0.0]);
    }

    fn arb_coord() -> impl Strategy<Value = [f64; 2]> {
        (-2.0f64..7.0, -2.0f64..7.0).prop_map(|(c, r)| [c, r])
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_inside(coord in arb_coord()) {
            let total: f64 = taps(coord, 6, 6).map(|t| t.weight).sum();
            let interior = coord.iter().all(|&v| (0.0..=5.0).contains(&v));
            if interior {
                prop_assert!((total - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(total <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn interior_samples_stay_within_range(
            data in prop::collection::vec(-5.0f64..5.0, 36),
            coord in (0.0f64..5.0, 0.0f64..5.0),
        ) {
            let u = Tensor::<f64>::from_f64(&[1, 6, 6], &data).unwrap();
            let grid = SampleGrid { out_h: 1, out_w: 1, src_h: 6, src_w: 6, coords: vec![[coord.0, coord.1]] };
            let v = sample(&u, &grid).unwrap().item();
            let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn linear_in_source(
            a in prop::collection::vec(-3.0f64..3.0, 2 * 25),
            b in prop::collection::vec(-3.0f64..3.0, 2 * 25),
            s in -2.0f64..2.0,
            t in -2.0f64..2.0,
            theta in prop::array::uniform6(-1.0f64..1.5),
        ) {
            let grid = make_grid(&AffineTheta::from_slice(&theta), 3, 4, 5, 5).unwrap();
            let ua = Tensor::<f64>::from_f64(&[2, 5, 5], &a).unwrap();
            let ub = Tensor::<f64>::from_f64(&[2, 5, 5], &b).unwrap();
            let mix = Tensor::from_fn(&[2, 5, 5], |i| s * a[i] + t * b[i]);
            let lhs = sample(&mix, &grid).unwrap();
            let (va, vb) = (sample(&ua, &grid).unwrap(), sample(&ub, &grid).unwrap());
            let rhs = Tensor::from_fn(lhs.shape(), |i| s * va.data()[i] + t * vb.data()[i]);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }
}
