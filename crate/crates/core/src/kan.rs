//! KANLinear: every input→output edge carries its own learnable spline plus
//! a SiLU residual, and each output sums its incoming edges:
//!
//! ```text
//! y[b, j] = Σ_i  w_b[j, i] · silu(x[b, i])  +  w_s[j, i] · spline_{j,i}(x[b, i])
//! ```
//!
//! All edges leaving input column `i` share one knot grid, so basis values
//! are computed once per `(b, i)` and reused for every output.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::bspline::{self, KnotGrid, LeastSquares, LocalBasis};
use crate::error::{Error, Result};
use crate::nn::{silu, silu_grad};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct KanLinearLayer {
    n_in: usize,
    n_out: usize,
    /// One grid per input column.
    pub grids: Vec<KnotGrid>,
    /// `[n_out, n_in, G + k]`
    pub spline_coeffs: Tensor,
    /// `[n_out, n_in]`
    pub spline_scaler: Tensor,
    /// `[n_out, n_in]`
    pub base_weight: Tensor,
    /// When false the SiLU residual is pinned to zero and never trained.
    pub base_term: bool,
}

/// Seeded initialization: base weights uniform in `±sqrt(6 / n_in)`, spline
/// coefficients normal with std `0.1 / sqrt(G + k)`, scalers one.
pub fn kan_init(n_in: usize, n_out: usize, grid: &KnotGrid, seed: u64) -> Result<KanLinearLayer> {
    if n_in == 0 || n_out == 0 {
        return Err(Error::InvalidConfig(format!(
            "KAN layer sizes must be positive, got {n_in}x{n_out}"
        )));
    }
    let nb = grid.basis_count();
    let mut r = rng::seeded(seed);
    let bound = (6.0 / n_in as f64).sqrt();
    let base_weight = Tensor::from_fn(&[n_out, n_in], |_| r.random_range(-bound..bound));
    let normal = Normal::new(0.0, 0.1 / (nb as f64).sqrt()).expect("positive std");
    let spline_coeffs = Tensor::from_fn(&[n_out, n_in, nb], |_| normal.sample(&mut r));
    Ok(KanLinearLayer {
        n_in,
        n_out,
        grids: vec![grid.clone(); n_in],
        spline_coeffs,
        spline_scaler: Tensor::ones(&[n_out, n_in]),
        base_weight,
        base_term: true,
    })
}

impl KanLinearLayer {
    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn basis_count(&self) -> usize {
        self.grids[0].basis_count()
    }

    /// `n_out · n_in · (G + k + 2)`.
    pub fn parameter_count(&self) -> usize {
        self.n_out * self.n_in * (self.basis_count() + 2)
    }

    /// Zeroes and freezes the SiLU residual.
    pub fn disable_base_term(&mut self) {
        self.base_term = false;
        self.base_weight.fill(0.0);
    }

    /// Coefficients of edge `input → output`.
    pub fn edge_coeffs(&self, output: usize, input: usize) -> &[f64] {
        let nb = self.basis_count();
        &self.spline_coeffs.data()[(output * self.n_in + input) * nb..][..nb]
    }

    /// Forward pass without gradient recording.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        kan_forward(
            x,
            &self.spline_coeffs,
            &self.spline_scaler,
            &self.base_weight,
            &self.grids,
        )
        .map(|(y, _)| y)
    }

    /// Adapts each input column's grid to the batch values in that column and
    /// refits every edge leaving it so the spline values on the batch are kept.
    pub fn update_grids(&mut self, batch: &Tensor, blend: f64) -> Result<()> {
        let rows = match *batch.shape() {
            [rows, cols] if cols == self.n_in => rows,
            ref s => {
                return Err(Error::shape(
                    "kan_update_grids",
                    format!("batch {s:?} does not have {} columns", self.n_in),
                ))
            }
        };
        if rows == 0 {
            return Err(Error::EmptyDataset);
        }
        let nb = self.basis_count();
        let mut column = vec![0.0; rows];
        let mut targets = vec![0.0; rows];
        for i in 0..self.n_in {
            for (b, v) in column.iter_mut().enumerate() {
                *v = batch.data()[b * self.n_in + i];
            }
            let old = &self.grids[i];
            let new_grid = bspline::adapt_knots(old, &column, blend)?;
            let old_locals: Vec<LocalBasis> = column.iter().map(|&x| old.local_basis(x)).collect();
            let solver = LeastSquares::new(&new_grid, &column)?;
            for j in 0..self.n_out {
                let off = (j * self.n_in + i) * nb;
                let coeffs = &self.spline_coeffs.data()[off..off + nb];
                for (t, local) in targets.iter_mut().zip(&old_locals) {
                    *t = bspline::eval_local(old, coeffs, local);
                }
                let fitted = solver.solve(&targets)?;
                self.spline_coeffs.data_mut()[off..off + nb].copy_from_slice(&fitted.0);
            }
            self.grids[i] = new_grid;
        }
        Ok(())
    }
}

/// Free-function form of [`KanLinearLayer::update_grids`].
pub fn kan_update_grids(layer: &mut KanLinearLayer, batch: &Tensor, blend: f64) -> Result<()> {
    layer.update_grids(batch, blend)
}

/// Per-`(b, i)` values saved by the forward pass.
#[derive(Clone, Debug)]
pub struct KanCache {
    locals: Vec<LocalBasis>,
    silu: Vec<f64>,
    silu_grad: Vec<f64>,
}

pub(crate) fn check_kan_shapes(
    x: &Tensor,
    coeffs: &Tensor,
    scaler: &Tensor,
    base: &Tensor,
    grids: &[KnotGrid],
) -> Result<(usize, usize, usize, usize)> {
    let (batch, n_in) = match *x.shape() {
        [b, i] => (b, i),
        ref s => return Err(Error::shape("kan_linear", format!("input must be 2-d, got {s:?}"))),
    };
    let (n_out, c_in, nb) = match *coeffs.shape() {
        [o, i, m] => (o, i, m),
        ref s => {
            return Err(Error::shape(
                "kan_linear",
                format!("coefficients must be 3-d, got {s:?}"),
            ))
        }
    };
    if c_in != n_in
        || scaler.shape() != [n_out, n_in]
        || base.shape() != [n_out, n_in]
        || grids.len() != n_in
        || grids.iter().any(|g| g.basis_count() != nb)
    {
        return Err(Error::shape(
            "kan_linear",
            format!(
                "input {:?}, coefficients {:?}, scaler {:?}, base {:?}, {} grids",
                x.shape(),
                coeffs.shape(),
                scaler.shape(),
                base.shape(),
                grids.len()
            ),
        ));
    }
    Ok((batch, n_in, n_out, nb))
}

pub fn kan_forward(
    x: &Tensor,
    coeffs: &Tensor,
    scaler: &Tensor,
    base: &Tensor,
    grids: &[KnotGrid],
) -> Result<(Tensor, KanCache)> {
    let (batch, n_in, n_out, nb) = check_kan_shapes(x, coeffs, scaler, base, grids)?;
    let mut locals = Vec::with_capacity(batch * n_in);
    let mut s = Vec::with_capacity(batch * n_in);
    let mut sg = Vec::with_capacity(batch * n_in);
    for row in x.data().chunks(n_in) {
        for (&v, grid) in row.iter().zip(grids) {
            locals.push(grid.local_basis(v));
            s.push(silu(v));
            sg.push(silu_grad(v));
        }
    }
    let c = coeffs.data();
    let ws = scaler.data();
    let wb = base.data();
    let mut out = vec![0.0; batch * n_out];
    for b in 0..batch {
        for j in 0..n_out {
            let mut acc = 0.0;
            for i in 0..n_in {
                let local = &locals[b * n_in + i];
                let grid = &grids[i];
                let edge = &c[(j * n_in + i) * nb..][..nb];
                let spline = bspline::eval_local(grid, edge, local);
                acc += wb[j * n_in + i] * s[b * n_in + i] + ws[j * n_in + i] * spline;
            }
            out[b * n_out + j] = acc;
        }
    }
    Ok((
        Tensor::new(vec![batch, n_out], out)?,
        KanCache {
            locals,
            silu: s,
            silu_grad: sg,
        },
    ))
}

/// Gradients of `(x, coeffs, scaler, base)` given upstream `gy [batch, n_out]`.
pub fn kan_backward(
    x: &Tensor,
    coeffs: &Tensor,
    scaler: &Tensor,
    base: &Tensor,
    grids: &[KnotGrid],
    cache: &KanCache,
    gy: &Tensor,
) -> [Tensor; 4] {
    let batch = x.shape()[0];
    let n_in = x.shape()[1];
    let [n_out, _, nb] = [coeffs.shape()[0], coeffs.shape()[1], coeffs.shape()[2]];
    let c = coeffs.data();
    let ws = scaler.data();
    let wb = base.data();
    let g = gy.data();
    let mut gx = vec![0.0; x.len()];
    let mut gc = vec![0.0; c.len()];
    let mut gws = vec![0.0; ws.len()];
    let mut gwb = vec![0.0; wb.len()];
    for b in 0..batch {
        for j in 0..n_out {
            let gv = g[b * n_out + j];
            if gv == 0.0 {
                continue;
            }
            for i in 0..n_in {
                let bi = b * n_in + i;
                let ji = j * n_in + i;
                let local = &cache.locals[bi];
                let deg = grids[i].degree();
                let off = ji * nb + local.start;
                let edge = &c[off..off + deg + 1];
                let vals = local.values(deg);
                let ders = local.derivs(deg);
                let mut spline = 0.0;
                let mut dspline = 0.0;
                for r in 0..=deg {
                    spline += vals[r] * edge[r];
                    dspline += ders[r] * edge[r];
                }
                let gcs = &mut gc[off..off + deg + 1];
                for r in 0..=deg {
                    gcs[r] += gv * ws[ji] * vals[r];
                }
                gws[ji] += gv * spline;
                gwb[ji] += gv * cache.silu[bi];
                gx[bi] += gv * (wb[ji] * cache.silu_grad[bi] + ws[ji] * dspline);
            }
        }
    }
    [
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(coeffs.shape().to_vec(), gc).expect("shape"),
        Tensor::new(scaler.shape().to_vec(), gws).expect("shape"),
        Tensor::new(base.shape().to_vec(), gwb).expect("shape"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::{fit_least_squares, make_uniform_grid};

    fn grid() -> KnotGrid {
        make_uniform_grid(-1.0, 1.0, 5, 3).unwrap()
    }

    fn scalar_layer(base: f64, scaler: f64, coeffs: &[f64]) -> KanLinearLayer {
        let mut layer = kan_init(1, 1, &grid(), 0).unwrap();
        layer.base_weight = Tensor::full(&[1, 1], base);
        layer.spline_scaler = Tensor::full(&[1, 1], scaler);
        layer.spline_coeffs = Tensor::new(vec![1, 1, coeffs.len()], coeffs.to_vec()).unwrap();
        layer
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut layer = kan_init(3, 2, &grid(), 1).unwrap();
        layer.spline_coeffs.fill(0.0);
        layer.base_weight.fill(0.0);
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.3).sin());
        assert!(layer.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn base_only_is_silu() {
        let layer = scalar_layer(1.0, 0.0, &[0.3; 8]);
        let y = layer.forward(&Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        assert!((y.item() - 0.7310585786).abs() < 1e-10);
    }

    #[test]
    fn spline_only_reproduces_identity_fit() {
        let g = grid();
        let xs: Vec<f64> = (0..200).map(|i| -1.0 + 2.0 * i as f64 / 199.0).collect();
        let c = fit_least_squares(&g, &xs, &xs).unwrap();
        let layer = scalar_layer(0.0, 1.0, &c.0);
        let probe: Vec<f64> = (0..=90).map(|i| -0.9 + 0.02 * i as f64).collect();
        let y = layer
            .forward(&Tensor::new(vec![probe.len(), 1], probe.clone()).unwrap())
            .unwrap();
        for (a, b) in y.data().iter().zip(&probe) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn init_is_seeded() {
        let g = grid();
        let a = kan_init(2, 3, &g, 9).unwrap();
        assert_eq!(a, kan_init(2, 3, &g, 9).unwrap());
        assert_ne!(a, kan_init(2, 3, &g, 10).unwrap());
        assert_eq!(a.parameter_count(), 60);
        assert_eq!(a.spline_coeffs.shape(), &[3, 2, 8]);
        assert!(a.spline_scaler.data().iter().all(|&v| v == 1.0));
        let bound = (6.0f64 / 2.0).sqrt();
        assert!(a.base_weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let layer = kan_init(3, 2, &grid(), 1).unwrap();
        assert!(matches!(
            layer.forward(&Tensor::zeros(&[2, 4])),
            Err(Error::ShapeMismatch { op: "kan_linear", .. })
        ));
    }

    #[test]
    fn constant_batch_grid_update() {
        let mut layer = kan_init(2, 2, &grid(), 4).unwrap();
        layer
            .update_grids(&Tensor::full(&[16, 2], 0.25), bspline::DEFAULT_GRID_BLEND)
            .unwrap();
        for g in &layer.grids {
            assert!(g.knots().windows(2).all(|w| w[0] < w[1]));
        }
        assert!(layer.spline_coeffs.is_finite());
    }
}
