//! B-spline basis evaluation and the `KanLinear` layer: a matrix of
//! learnable univariate splines applied as a linear-operator analogue.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::{run_chunks, Mode};
use crate::tensor::ops::{self, Activation};
use crate::tensor::{Tape, Tensor};

/// Uniform knot grid for order-`k` B-splines over `[range_min, range_max]`
/// with `intervals` interior intervals, extended `order` knots beyond each
/// end. The grid carries `intervals + order` basis functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineGrid {
    pub range_min: f64,
    pub range_max: f64,
    pub intervals: usize,
    pub order: usize,
}

impl SplineGrid {
    pub fn new(range_min: f64, range_max: f64, intervals: usize, order: usize) -> Result<SplineGrid> {
        if !(range_min < range_max) {
            return Err(Error::Configuration(format!(
                "spline range must satisfy min < max, got [{range_min}, {range_max}]"
            )));
        }
        if intervals == 0 {
            return Err(Error::Configuration("spline grid needs >= 1 interval".into()));
        }
        Ok(SplineGrid {
            range_min,
            range_max,
            intervals,
            order,
        })
    }

    /// The original-KAN defaults: 5 intervals, cubic order, range [-1, 1].
    pub fn default_kan() -> SplineGrid {
        SplineGrid {
            range_min: -1.0,
            range_max: 1.0,
            intervals: 5,
            order: 3,
        }
    }

    /// Number of basis functions (g + k).
    pub fn num_basis(&self) -> usize {
        self.intervals + self.order
    }

    /// Knot count (g + 2k + 1).
    pub fn num_knots(&self) -> usize {
        self.intervals + 2 * self.order + 1
    }

    /// Knot spacing.
    pub fn step(&self) -> f64 {
        (self.range_max - self.range_min) / self.intervals as f64
    }

    /// Knot `i` for `i` in `0..num_knots()`; the first `order` knots extend
    /// below `range_min`.
    pub fn knot(&self, i: usize) -> f64 {
        self.range_min + (i as f64 - self.order as f64) * self.step()
    }

    /// Trainable scalars per spline edge: g + k coefficients plus the base
    /// weight.
    pub fn params_per_edge(&self) -> usize {
        self.num_basis() + 1
    }
}

/// Values of all `g + k` basis functions at `x`, written into `out`.
/// When `deriv` is given, also writes d/dx of each basis function.
///
/// Total over all of R: outside the extended knot span every value is 0;
/// inside `[range_min, range_max]` the values form a partition of unity.
fn basis_into(
    x: f64,
    grid: &SplineGrid,
    table: &mut [f64],
    out: &mut [f64],
    deriv: Option<&mut [f64]>,
) {
    let g = grid.intervals;
    let k = grid.order;
    let n_int = g + 2 * k; // number of order-0 indicator intervals
    let h = grid.step();
    let t0 = grid.range_min - k as f64 * h;

    for v in table.iter_mut() {
        *v = 0.0;
    }
    // Indicator row with half-open intervals; the exact right end of the
    // range is snapped into the last in-range interval so the partition of
    // unity holds on the closed range (continuity makes this a no-op for
    // k >= 1).
    let mut j = ((x - t0) / h).floor();
    if x == grid.range_max {
        j = (g + k) as f64 - 1.0;
    }
    if j >= 0.0 && (j as usize) < n_int {
        table[j as usize] = 1.0;
    }

    let mut lower_order = Vec::new();
    for d in 1..=k {
        if d == k && deriv.is_some() {
            lower_order = table[..n_int - k + 1].to_vec();
        }
        for i in 0..n_int - d {
            let ti = t0 + i as f64 * h;
            let left = (x - ti) * table[i];
            let right = (ti + (d + 1) as f64 * h - x) * table[i + 1];
            table[i] = (left + right) / (d as f64 * h);
        }
    }
    out.copy_from_slice(&table[..g + k]);
    if let Some(dv) = deriv {
        if k == 0 {
            for v in dv.iter_mut() {
                *v = 0.0;
            }
        } else {
            // B'_{i,k} = (B_{i,k-1} - B_{i+1,k-1}) / h on a uniform grid.
            for (i, d) in dv.iter_mut().enumerate() {
                *d = (lower_order[i] - lower_order[i + 1]) / h;
            }
        }
    }
}

/// Values of all `g + k` order-`k` B-spline basis functions at `x`.
pub fn bspline_basis(x: f64, grid: &SplineGrid) -> Vec<f64> {
    let mut table = vec![0.0; grid.intervals + 2 * grid.order];
    let mut out = vec![0.0; grid.num_basis()];
    basis_into(x, grid, &mut table, &mut out, None);
    out
}

/// Basis values and their derivatives at `x`.
pub fn bspline_basis_and_deriv(x: f64, grid: &SplineGrid) -> (Vec<f64>, Vec<f64>) {
    let mut table = vec![0.0; grid.intervals + 2 * grid.order];
    let mut out = vec![0.0; grid.num_basis()];
    let mut dv = vec![0.0; grid.num_basis()];
    basis_into(x, grid, &mut table, &mut out, Some(&mut dv));
    (out, dv)
}

/// Batched basis evaluation over a flat slice of scalars; returns one
/// `g + k` row per input scalar. Exposed for the criterion benches.
pub fn batch_basis(xs: &[f64], grid: &SplineGrid) -> Vec<f64> {
    batch_basis_impl(xs, grid, Mode::Auto)
}

/// Sequential baseline for [`batch_basis`].
pub fn batch_basis_seq(xs: &[f64], grid: &SplineGrid) -> Vec<f64> {
    batch_basis_impl(xs, grid, Mode::Sequential)
}

fn batch_basis_impl(xs: &[f64], grid: &SplineGrid, mode: Mode) -> Vec<f64> {
    let nb = grid.num_basis();
    let mut values = vec![0.0; xs.len() * nb];
    let chunk_scalars = 64usize.min(xs.len().max(1));
    let grid = *grid;
    run_chunks(&mut values, chunk_scalars * nb, 8 * grid.order.max(1), mode, |ci, chunk| {
        let mut table = vec![0.0; grid.intervals + 2 * grid.order];
        let base = ci * chunk_scalars;
        for (s, vals) in chunk.chunks_mut(nb).enumerate() {
            basis_into(xs[base + s], &grid, &mut table, vals, None);
        }
    });
    values
}

/// Taped batched basis evaluation: appends a `g + k` axis to `x`'s shape.
/// The backward rule contracts the output gradient with the analytic basis
/// derivatives saved during the forward pass.
pub fn basis_op(tape: &Tape, x: &Tensor, grid: &SplineGrid) -> Tensor {
    let nb = grid.num_basis();
    let numel = x.numel();
    let tracked = tape.is_recording() && x.requires_grad();
    let grid_v = *grid;

    let (values, derivs) = {
        let xref = x.data();
        let xd: &[f64] = &xref;
        if tracked {
            // Interleave [values | derivs] per scalar so one chunked pass
            // fills both, then split.
            let mut both = vec![0.0; numel * nb * 2];
            let chunk_scalars = 64usize.min(numel.max(1));
            run_chunks(&mut both, chunk_scalars * nb * 2, 8 * grid_v.order.max(1), Mode::Auto, |ci, chunk| {
                let mut table = vec![0.0; grid_v.intervals + 2 * grid_v.order];
                let base = ci * chunk_scalars;
                for (s, pair) in chunk.chunks_mut(2 * nb).enumerate() {
                    let (vals, dvs) = pair.split_at_mut(nb);
                    basis_into(xd[base + s], &grid_v, &mut table, vals, Some(dvs));
                }
            });
            let mut values = vec![0.0; numel * nb];
            let mut derivs = vec![0.0; numel * nb];
            for s in 0..numel {
                values[s * nb..(s + 1) * nb].copy_from_slice(&both[s * 2 * nb..s * 2 * nb + nb]);
                derivs[s * nb..(s + 1) * nb]
                    .copy_from_slice(&both[s * 2 * nb + nb..(s + 1) * 2 * nb]);
            }
            (values, derivs)
        } else {
            (batch_basis_impl(xd, &grid_v, Mode::Auto), Vec::new())
        }
    };

    let mut out_shape = x.shape();
    out_shape.push(nb);
    let out = Tensor::new_raw(out_shape, values, tracked);
    if tracked {
        let (x_, o_) = (x.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                let mut gin = vec![0.0; numel];
                for (s, gi) in gin.iter_mut().enumerate() {
                    let grow = &g[s * nb..(s + 1) * nb];
                    let drow = &derivs[s * nb..(s + 1) * nb];
                    let mut acc = 0.0;
                    for (gv, dv) in grow.iter().zip(drow) {
                        acc += gv * dv;
                    }
                    *gi = acc;
                }
                x_.accumulate_grad(&gin);
            }),
        );
    }
    out
}

/// Trainable scalar count of a `KanLinear`: `out * in * (g + k + 1)`.
pub fn kan_param_count(in_dim: usize, out_dim: usize, grid: &SplineGrid) -> usize {
    out_dim * in_dim * grid.params_per_edge()
}

/// A `d_in -> d_out` mapping where every edge (q, p) is a learnable
/// univariate function `phi_{q,p}(x) = base_weight[q,p] * act(x) +
/// sum_i coeffs[q,p,i] B_i(x)`.
pub struct KanLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    pub base_activation: Activation,
    /// [out_dim, in_dim, g + k]
    pub spline_coeffs: Tensor,
    /// [out_dim, in_dim]
    pub base_weight: Tensor,
}

impl KanLinear {
    pub fn new<R: Rng>(
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
        base_activation: Activation,
        rng: &mut R,
    ) -> KanLinear {
        let nb = grid.num_basis();
        // Small spline coefficients plus fan-in scaled base weights keep the
        // initial output close to a plain linear layer's statistics.
        let coeff_std = 0.1 / nb as f64;
        let bound = 1.0 / (in_dim as f64).sqrt();
        KanLinear {
            in_dim,
            out_dim,
            grid,
            base_activation,
            spline_coeffs: Tensor::randn(&[out_dim, in_dim, nb], coeff_std, rng).as_param(),
            base_weight: Tensor::rand_uniform(&[out_dim, in_dim], -bound, bound, rng).as_param(),
        }
    }

    /// `out[m, q] = sum_p phi_{q,p}(x[m, p])`.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 2 || xs[1] != self.in_dim {
            return Err(Error::Dimension(format!(
                "kan_forward expects [M, {}], got {xs:?}",
                self.in_dim
            )));
        }
        let m = xs[0];
        let nb = self.grid.num_basis();

        let basis = basis_op(tape, x, &self.grid);
        let flat = ops::reshape(tape, &basis, &[m, self.in_dim * nb])?;
        let coeff_flat = ops::reshape(tape, &self.spline_coeffs, &[self.out_dim, self.in_dim * nb])?;
        let coeff_t = ops::permute(tape, &coeff_flat, &[1, 0])?;
        let spline_out = ops::matmul(tape, &flat, &coeff_t)?;

        let act = self.base_activation.apply(tape, x);
        let w_t = ops::permute(tape, &self.base_weight, &[1, 0])?;
        let base_out = ops::matmul(tape, &act, &w_t)?;

        ops::add(tape, &spline_out, &base_out)
    }

    pub fn param_count(&self) -> usize {
        kan_param_count(self.in_dim, self.out_dim, &self.grid)
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        vec![
            ("spline_coeffs".into(), self.spline_coeffs.clone()),
            ("base_weight".into(), self.base_weight.clone()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent naive Cox-de Boor recursion (the oracle): textbook
    /// two-branch recursion straight off the definition.
    fn naive_basis(i: usize, d: usize, x: f64, knots: &[f64]) -> f64 {
        if d == 0 {
            return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let den_l = knots[i + d] - knots[i];
        if den_l != 0.0 {
            v += (x - knots[i]) / den_l * naive_basis(i, d - 1, x, knots);
        }
        let den_r = knots[i + d + 1] - knots[i + 1];
        if den_r != 0.0 {
            v += (knots[i + d + 1] - x) / den_r * naive_basis(i + 1, d - 1, x, knots);
        }
        v
    }

    fn knots_of(grid: &SplineGrid) -> Vec<f64> {
        (0..grid.num_knots()).map(|i| grid.knot(i)).collect()
    }

    #[test]
    fn grid_invariants() {
        let g = SplineGrid::default_kan();
        assert_eq!(g.num_basis(), 8);
        assert_eq!(g.num_knots(), 12); // 5 + 2*3 + 1
        assert!((g.knot(3) - (-1.0)).abs() < 1e-15);
        assert!((g.knot(8) - 1.0).abs() < 1e-15);
        assert!(SplineGrid::new(1.0, -1.0, 5, 3).is_err());
    }

    #[test]
    fn partition_of_unity_in_range() {
        let grid = SplineGrid::default_kan();
        for i in 0..=1000 {
            let x = -1.0 + 2.0 * i as f64 / 1000.0;
            let b = bspline_basis(x, &grid);
            let sum: f64 = b.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "x={x} sum={sum}");
        }
    }

    #[test]
    fn order_zero_is_interval_indicator() {
        let grid = SplineGrid::new(-1.0, 1.0, 4, 0).unwrap();
        let b = bspline_basis(-0.3, &grid);
        assert_eq!(b.len(), 4);
        let ones: Vec<usize> = b
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ones, vec![1]); // -0.3 lies in [-0.5, 0.0)
        assert_eq!(b.iter().sum::<f64>(), 1.0);
        // right edge snaps into the final interval
        let edge = bspline_basis(1.0, &grid);
        assert_eq!(edge[3], 1.0);
    }

    #[test]
    fn matches_naive_cox_de_boor_at_random_points() {
        let grid = SplineGrid::new(-1.0, 1.0, 5, 3).unwrap();
        let knots = knots_of(&grid);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = rng.gen_range(-0.999..0.999);
            let fast = bspline_basis(x, &grid);
            for (i, &f) in fast.iter().enumerate() {
                let slow = naive_basis(i, 3, x, &knots);
                assert!((f - slow).abs() < 1e-12, "i={i} x={x}: {f} vs {slow}");
            }
        }
    }

    #[test]
    fn local_support() {
        let grid = SplineGrid::default_kan();
        let k = grid.order;
        for i in 0..grid.num_basis() {
            let lo = grid.knot(i);
            let hi = grid.knot(i + k + 1);
            for &x in &[lo - 0.05, hi + 0.05, lo - 2.0, hi + 2.0] {
                let b = bspline_basis(x, &grid);
                assert_eq!(b[i], 0.0, "B_{i} should vanish at x={x} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let grid = SplineGrid::default_kan();
        let h = 1e-6;
        for j in 0..40 {
            let x = -0.95 + j as f64 * 0.047;
            let (_, dv) = bspline_basis_and_deriv(x, &grid);
            let plus = bspline_basis(x + h, &grid);
            let minus = bspline_basis(x - h, &grid);
            for i in 0..grid.num_basis() {
                let fd = (plus[i] - minus[i]) / (2.0 * h);
                assert!((dv[i] - fd).abs() < 1e-7, "i={i} x={x}: {} vs {fd}", dv[i]);
            }
        }
    }

    #[test]
    fn batch_basis_matches_scalar_eval() {
        let grid = SplineGrid::default_kan();
        let xs: Vec<f64> = (0..300).map(|i| -1.2 + i as f64 * 0.008).collect();
        let batch = batch_basis(&xs, &grid);
        let batch_sequential = batch_basis_seq(&xs, &grid);
        assert_eq!(batch, batch_sequential);
        for (s, &x) in xs.iter().enumerate() {
            let single = bspline_basis(x, &grid);
            assert_eq!(&batch[s * 8..(s + 1) * 8], single.as_slice());
        }
    }

    #[test]
    fn param_count_formula() {
        let grid = SplineGrid::default_kan();
        assert_eq!(kan_param_count(1, 1, &grid), 9);
        assert_eq!(kan_param_count(160, 160, &grid), 230_400);
        // quadratic growth: doubling dims quadruples the count
        assert_eq!(kan_param_count(64, 64, &grid) * 4, kan_param_count(128, 128, &grid));
    }

    #[test]
    fn param_count_matches_allocation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = KanLinear::new(7, 5, SplineGrid::default_kan(), Activation::Silu, &mut rng);
        let allocated: usize = layer.parameters().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(allocated, layer.param_count());
        assert_eq!(allocated, 5 * 7 * 9);
    }

    #[test]
    fn zero_splines_identity_base_reduces_to_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer =
            KanLinear::new(4, 3, SplineGrid::default_kan(), Activation::Identity, &mut rng);
        layer.spline_coeffs = Tensor::zeros(&[3, 4, 8]).as_param();
        let tape = Tape::inference();
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let y = layer.forward(&tape, &x).unwrap();
        let wt = ops::permute(&tape, &layer.base_weight, &[1, 0]).unwrap();
        let want = ops::matmul(&tape, &x, &wt).unwrap();
        for (a, b) in y.data_vec().iter().zip(want.data_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dim_layer_matches_basis_oracle_on_knots() {
        let grid = SplineGrid::default_kan();
        let knots = knots_of(&grid);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = KanLinear::new(1, 1, grid, Activation::Silu, &mut rng);
        let coeffs = layer.spline_coeffs.data_vec();
        let w = layer.base_weight.data_vec()[0];
        let tape = Tape::inference();
        // interior knots of the grid
        for &x in &knots[grid.order..grid.order + grid.intervals + 1] {
            let x_in = Tensor::from_vec(&[1, 1], vec![x]).unwrap();
            let y = layer.forward(&tape, &x_in).unwrap().item();
            let mut oracle = w * Activation::Silu.eval(x);
            for (i, &c) in coeffs.iter().enumerate() {
                oracle += c * naive_basis(i, grid.order, x, &knots);
            }
            assert!((y - oracle).abs() < 1e-12, "x={x}: {y} vs {oracle}");
        }
    }

    #[test]
    fn forward_is_linear_in_spline_coeffs() {
        let grid = SplineGrid::default_kan();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::inference();
        let x = Tensor::randn(&[5, 3], 0.5, &mut rng);
        let l1 = KanLinear::new(3, 2, grid, Activation::Silu, &mut rng);
        let mut l2 = KanLinear::new(3, 2, grid, Activation::Silu, &mut rng);
        l2.base_weight = l1.base_weight.clone();
        let mut lsum = KanLinear::new(3, 2, grid, Activation::Silu, &mut rng);
        lsum.base_weight = l1.base_weight.clone();
        let summed: Vec<f64> = l1
            .spline_coeffs
            .data_vec()
            .iter()
            .zip(l2.spline_coeffs.data_vec())
            .map(|(a, b)| a + b)
            .collect();
        lsum.spline_coeffs = Tensor::from_vec(&[2, 3, 8], summed).unwrap();
        let mut lzero = KanLinear::new(3, 2, grid, Activation::Silu, &mut rng);
        lzero.base_weight = l1.base_weight.clone();
        lzero.spline_coeffs = Tensor::zeros(&[2, 3, 8]);

        let y1 = l1.forward(&tape, &x).unwrap().data_vec();
        let y2 = l2.forward(&tape, &x).unwrap().data_vec();
        let ysum = lsum.forward(&tape, &x).unwrap().data_vec();
        let yzero = lzero.forward(&tape, &x).unwrap().data_vec();
        for i in 0..y1.len() {
            assert!((ysum[i] - (y1[i] + y2[i] - yzero[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = KanLinear::new(3, 2, SplineGrid::default_kan(), Activation::Silu, &mut rng);
        let tape = Tape::inference();
        let err = layer.forward(&tape, &Tensor::zeros(&[4, 5])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
