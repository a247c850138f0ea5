//! The supremal energy, the integral power energies and the exact gradient of
//! the normalized discrete energy.
//!
//! Everything uses one quadrature rule: cell midpoints for `x`, nodal averages
//! for `eta`, forward differences for the slope. Large powers live in the log
//! domain with max-shifted summation, and the solver only ever sees the
//! normalized power mean `(E_m / |A|)^(1/m)` and its gradient, which stay O(1)
//! for every `m` in the schedule.

use crate::grid::GridFunction;
use crate::lagrangian::LagrangianModel;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Selection of cells; the discrete stand-in for a measurable subset.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMask {
    bits: Vec<bool>,
}

impl CellMask {
    pub fn full(n_cells: usize) -> Self {
        Self {
            bits: vec![true; n_cells],
        }
    }

    /// Cells `lo..hi` (half-open).
    pub fn span(n_cells: usize, lo: usize, hi: usize) -> Self {
        let mut bits = vec![false; n_cells];
        for b in bits.iter_mut().take(hi.min(n_cells)).skip(lo) {
            *b = true;
        }
        Self { bits }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn selected(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// True if every selected cell is also selected in `other`.
    pub fn subset_of(&self, other: &CellMask) -> bool {
        self.bits
            .iter()
            .zip(&other.bits)
            .all(|(&a, &b)| !a || b)
    }
}

/// Max-shifted `log(sum(exp(t)))`; `-inf` terms are allowed.
pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Integrand values over all cells: `L_j = H(x_{j+1/2}, u-bar_j, p_j)`.
pub fn cell_lagrangian(u: &GridFunction, model: &LagrangianModel) -> Result<Vec<f64>> {
    if u.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: u.dim(),
        });
    }
    (0..u.grid().n_cells())
        .map(|j| {
            let x = u.grid().midpoint(j);
            let eta = u.cell_average(j);
            let du = u.cell_slope(j);
            let val = model.eval_l(x, &eta, &du)?;
            if val <= 0.0 {
                return Err(Error::ModelEval {
                    x,
                    eta: eta.iter().copied().collect(),
                    p: model.radial(x, &eta, &du),
                });
            }
            Ok(val)
        })
        .collect()
}

/// Supremal energy: max of the integrand over the selected cells.
pub fn esup_energy(u: &GridFunction, model: &LagrangianModel, mask: &CellMask) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let cells = cell_lagrangian(u, model)?;
    Ok(mask.cells().map(|j| cells[j]).fold(f64::NEG_INFINITY, f64::max))
}

/// Power energy in the log domain plus its normalized power mean.
#[derive(Debug, Clone, Copy)]
pub struct EmEnergy {
    /// `log( sum_j h L_j^m )` over the selected cells.
    pub log_integral: f64,
    /// `((1/|A|) * integral)^(1/m)`, the quantity the solver works with.
    pub normalized: f64,
}

/// Integral energy `E_m` computed by max-shifted exponential summation so
/// that powers up to 2^12 never overflow.
pub fn em_energy_log(
    u: &GridFunction,
    model: &LagrangianModel,
    m: u32,
    mask: &CellMask,
) -> Result<EmEnergy> {
    if m < 1 {
        return Err(Error::InvalidPower { min: 1, got: m });
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let cells = cell_lagrangian(u, model)?;
    em_from_cells(&cells, u.grid().h(), m, mask)
}

pub(crate) fn em_from_cells(cells: &[f64], h: f64, m: u32, mask: &CellMask) -> Result<EmEnergy> {
    let log_h = h.ln();
    let terms: Vec<f64> = mask
        .cells()
        .map(|j| log_h + m as f64 * cells[j].ln())
        .collect();
    let log_integral = log_sum_exp(&terms);
    let measure = mask.count() as f64 * h;
    let normalized = ((log_integral - measure.ln()) / m as f64).exp();
    if !normalized.is_finite() {
        return Err(Error::NonFinite("normalized power energy".into()));
    }
    Ok(EmEnergy {
        log_integral,
        normalized,
    })
}

/// Per-cell integrand values with the masked energy summaries.
#[derive(Debug, Clone)]
pub struct EnergyBreakdown {
    pub cell_values: Vec<f64>,
    pub mask: CellMask,
    pub m: u32,
    /// `log E_m` over the mask.
    pub log_em: f64,
    /// `(E_m / |A|)^(1/m)`.
    pub normalized: f64,
    /// Max of the integrand over the mask.
    pub esup: f64,
}

pub fn energy_breakdown(
    u: &GridFunction,
    model: &LagrangianModel,
    m: u32,
    mask: &CellMask,
) -> Result<EnergyBreakdown> {
    if m < 1 {
        return Err(Error::InvalidPower { min: 1, got: m });
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let cell_values = cell_lagrangian(u, model)?;
    let em = em_from_cells(&cell_values, u.grid().h(), m, mask)?;
    let esup = mask
        .cells()
        .map(|j| cell_values[j])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(EnergyBreakdown {
        cell_values,
        mask: mask.clone(),
        m,
        log_em: em.log_integral,
        normalized: em.normalized,
        esup,
    })
}

/// All model partials of one quadrature cell, shared by the gradient, the
/// Hessian and the smoothed-max descent in the minimality verifier.
pub(crate) struct CellEval {
    pub l: f64,
    pub log_l: f64,
    pub w: DVector<f64>,
    pub h_p: f64,
    pub h_pp: f64,
    pub h_eta: DVector<f64>,
    pub h_peta: DVector<f64>,
    pub h_eta_eta: DMatrix<f64>,
    pub v_eta: DMatrix<f64>,
    /// `V_eta^T W`.
    pub veta_t_w: DVector<f64>,
    /// Field curvature contracted with `W`.
    pub v_curv_w: DMatrix<f64>,
    /// Mesh size of the owning grid.
    pub h: f64,
}

impl CellEval {
    /// `B_s^T W` for a cell endpoint with orientation `sigma` (-1 left, +1
    /// right): the derivative of the radial argument w.r.t. that node.
    pub fn bw(&self, sigma: f64) -> DVector<f64> {
        &self.w * (sigma / self.h) - &self.veta_t_w * 0.5
    }

    /// Gradient of the cell integrand w.r.t. the node with orientation
    /// `sigma`.
    pub fn node_gradient(&self, sigma: f64) -> DVector<f64> {
        (&self.h_eta - &self.veta_t_w * self.h_p) * 0.5 + &self.w * (sigma * self.h_p / self.h)
    }

    /// Second derivative block of the cell integrand for the node pair with
    /// orientations `(sigma_s, sigma_t)`.
    pub fn node_hessian_block(&self, sigma_s: f64, sigma_t: f64) -> DMatrix<f64> {
        let n = self.w.len();
        let bw_s = self.bw(sigma_s);
        let bw_t = self.bw(sigma_t);
        let mut block = &self.h_eta_eta * 0.25;
        block += (&self.h_peta * bw_t.transpose() + &bw_s * self.h_peta.transpose()) * 0.5;
        block += &bw_s * bw_t.transpose() * self.h_pp;
        // B_s^T B_t expanded: ss't'/h^2 I - s'/2h V_eta^T - s/2h V_eta + 1/4 V_eta^T V_eta
        let mut bstbt = DMatrix::identity(n, n) * (sigma_s * sigma_t / (self.h * self.h));
        bstbt -= self.v_eta.transpose() * (sigma_t / (2.0 * self.h));
        bstbt -= &self.v_eta * (sigma_s / (2.0 * self.h));
        bstbt += self.v_eta.transpose() * &self.v_eta * 0.25;
        block += (bstbt - &self.v_curv_w * 0.25) * self.h_p;
        block
    }
}

pub(crate) fn eval_cell(
    model: &LagrangianModel,
    x: f64,
    u_l: &DVector<f64>,
    u_r: &DVector<f64>,
    h: f64,
    with_curvature: bool,
) -> Result<CellEval> {
    let eta = (u_l + u_r) * 0.5;
    let du = (u_r - u_l) / h;
    let w = &du - model.v(x, &eta);
    let p = 0.5 * w.norm_squared();
    let l = model.h(x, &eta, p);
    if !l.is_finite() || l <= 0.0 {
        return Err(Error::ModelEval {
            x,
            eta: eta.iter().copied().collect(),
            p,
        });
    }
    let v_eta = model.v_eta(x, &eta);
    let veta_t_w = v_eta.transpose() * &w;
    let n = model.dim();
    let (h_eta_eta, v_curv_w) = if with_curvature {
        (
            model.h_eta_eta(x, &eta, p),
            model.field().v_eta_eta(x, &eta, &w),
        )
    } else {
        (DMatrix::zeros(n, n), DMatrix::zeros(n, n))
    };
    Ok(CellEval {
        l,
        log_l: l.ln(),
        h_p: model.h_p(x, &eta, p),
        h_pp: model.h_pp(x, &eta, p),
        h_eta: model.h_eta(x, &eta, p),
        h_peta: model.h_peta(x, &eta, p),
        h_eta_eta,
        v_eta,
        veta_t_w,
        v_curv_w,
        w,
        h,
    })
}

/// Evaluates every cell of `u`.
pub(crate) fn eval_all_cells(
    u: &GridFunction,
    model: &LagrangianModel,
    with_curvature: bool,
) -> Result<Vec<CellEval>> {
    (0..u.grid().n_cells())
        .map(|j| {
            eval_cell(
                model,
                u.grid().midpoint(j),
                u.value(j),
                u.value(j + 1),
                u.grid().h(),
                with_curvature,
            )
        })
        .collect()
}

/// Log-domain quadrature weights `w_j = h L_j^(m-1) / E_m` of the normalized
/// energy gradient; they sum to `avg(L^(m-1)) / avg(L^m) <= 1`.
pub(crate) fn gradient_weights(cells: &[CellEval], h: f64, m: u32) -> (f64, Vec<f64>) {
    let log_h = h.ln();
    let terms: Vec<f64> = cells
        .iter()
        .map(|c| log_h + m as f64 * c.log_l)
        .collect();
    let log_e = log_sum_exp(&terms);
    let weights = cells
        .iter()
        .map(|c| (log_h + (m as f64 - 1.0) * c.log_l - log_e).exp())
        .collect();
    (log_e, weights)
}

/// Exact gradient of the normalized energy `(E_m/|Omega|)^(1/m)` with respect
/// to the interior nodal values. Assembled in the log domain; magnitudes stay
/// O(1) for every `m` in the schedule.
pub fn em_gradient(
    u: &GridFunction,
    model: &LagrangianModel,
    m: u32,
) -> Result<Vec<DVector<f64>>> {
    if m < 1 {
        return Err(Error::InvalidPower { min: 1, got: m });
    }
    let cells = eval_all_cells(u, model, false)?;
    let h = u.grid().h();
    let n = u.grid().n_cells();
    let (log_e, weights) = gradient_weights(&cells, h, m);
    let normalized = ((log_e - (n as f64 * h).ln()) / m as f64).exp();

    let mut grad = Vec::with_capacity(n - 1);
    for i in 1..n {
        // node i touches cell i-1 on its right end and cell i on its left end
        let g = cells[i - 1].node_gradient(1.0) * weights[i - 1]
            + cells[i].node_gradient(-1.0) * weights[i];
        let g = g * normalized;
        if g.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("normalized energy gradient".into()));
        }
        grad.push(g);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{affine_interpolant, build_grid, AffineData, Interval};
    use crate::lagrangian::{builtin_power, builtin_yu};
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, ToPrimitive, Zero};

    fn vecd(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    fn unit_grid(n: usize) -> crate::grid::Grid {
        build_grid(Interval::new(0.0, 1.0).unwrap(), n).unwrap()
    }

    #[test]
    fn esup_constant_integrand() {
        let g = unit_grid(16);
        let data = AffineData::new(vecd(&[0.0, 0.0]), vecd(&[2.0, 0.0])).unwrap();
        let u = affine_interpolant(&g, &data);
        let model = builtin_power(2);
        for mask in [CellMask::full(16), CellMask::span(16, 3, 9)] {
            let e = esup_energy(&u, &model, &mask).unwrap();
            assert!((e - 3.0).abs() < 1e-12);
        }
        assert!(matches!(
            esup_energy(&u, &model, &CellMask::span(16, 3, 3)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn esup_yu_flat_map() {
        let g = build_grid(Interval::new(0.0, std::f64::consts::PI).unwrap(), 64).unwrap();
        let u = GridFunction::from_fn(g.clone(), |_| vecd(&[0.0])).unwrap();
        let model = builtin_yu(1);
        let e = esup_energy(&u, &model, &CellMask::full(64)).unwrap();
        // enumerate the midpoints independently
        let expect = (0..64)
            .map(|j| 1.0 + g.midpoint(j).sin().powi(2))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(e, expect);
    }

    #[test]
    fn em_constant_integrand() {
        let g = unit_grid(8);
        let data = AffineData::new(vecd(&[0.0, 0.0]), vecd(&[2.0, 0.0])).unwrap();
        let u = affine_interpolant(&g, &data);
        let model = builtin_power(2);
        let mask = CellMask::full(8);
        let e2 = em_energy_log(&u, &model, 2, &mask).unwrap();
        assert!((e2.log_integral.exp() - 9.0).abs() < 1e-10);
        assert!((e2.normalized - 3.0).abs() < 1e-12);
        // m = 4096 of a constant: no overflow, normalized value intact
        let big = em_energy_log(&u, &model, 4096, &mask).unwrap();
        assert!((big.normalized - 3.0).abs() < 1e-12);
        assert!(big.log_integral.is_finite());
    }

    #[test]
    fn em_matches_exact_rational_oracle() {
        // power model, u(x) = x^2 on n = 16, m = 2: independent high-precision
        // summation of sum_j h (1 + 1/2 Du_j^2)^2 in exact rational arithmetic
        let n = 16usize;
        let g = unit_grid(n);
        let u = GridFunction::from_fn(g, |x| vecd(&[x * x])).unwrap();
        let model = builtin_power(1);

        let h = BigRational::new(BigInt::one(), BigInt::from(n));
        let mut exact = BigRational::zero();
        for j in 0..n {
            let xj = BigRational::new(BigInt::from(j), BigInt::from(n));
            let xj1 = BigRational::new(BigInt::from(j + 1), BigInt::from(n));
            let du = (xj1.clone() * xj1.clone() - xj.clone() * xj.clone()) / h.clone();
            let l = BigRational::one()
                + BigRational::new(BigInt::one(), BigInt::from(2)) * du.clone() * du;
            exact += h.clone() * l.clone() * l;
        }
        let got = em_energy_log(&u, &model, 2, &CellMask::full(n))
            .unwrap()
            .log_integral
            .exp();
        let exact_f = exact.to_f64().unwrap();
        assert!(
            (got - exact_f).abs() <= 1e-13 * exact_f,
            "got {got}, oracle {exact_f}"
        );
    }

    #[test]
    fn power_mean_monotone_and_below_esup() {
        let g = unit_grid(32);
        let u = GridFunction::from_fn(g, |x| vecd(&[(3.0 * x).sin()])).unwrap();
        let model = builtin_power(1);
        let mask = CellMask::full(32);
        let esup = esup_energy(&u, &model, &mask).unwrap();
        let mut prev = 0.0;
        let mut m = 1u32;
        while m <= 4096 {
            let e = em_energy_log(&u, &model, m, &mask).unwrap().normalized;
            assert!(e >= prev - 1e-12, "power mean decreased at m={m}");
            assert!(e <= esup + 1e-12);
            prev = e;
            m *= 2;
        }
        // the tail approaches the sup within 2 percent
        assert!(esup - prev <= 0.02 * esup);
    }

    #[test]
    fn restriction_monotonicity() {
        let g = unit_grid(32);
        let u = GridFunction::from_fn(g, |x| vecd(&[x * x])).unwrap();
        let model = builtin_power(1);
        let full = esup_energy(&u, &model, &CellMask::full(32)).unwrap();
        for lo in [0usize, 5, 20] {
            let sub = esup_energy(&u, &model, &CellMask::span(32, lo, lo + 8)).unwrap();
            assert!(sub <= full + 1e-15);
        }
    }

    #[test]
    fn gradient_zero_for_affine_power() {
        let g = unit_grid(16);
        let data = AffineData::new(vecd(&[1.0, 0.0]), vecd(&[2.0, -1.0])).unwrap();
        let u = affine_interpolant(&g, &data);
        let model = builtin_power(2);
        for m in [1u32, 2, 64, 1024] {
            let grad = em_gradient(&u, &model, m).unwrap();
            let sup = grad.iter().map(|v| v.amax()).fold(0.0, f64::max);
            assert!(sup < 1e-12, "m={m}: affine stationarity violated: {sup}");
        }
    }

    #[test]
    fn gradient_zero_for_flat_yu() {
        let g = build_grid(Interval::new(0.0, std::f64::consts::PI).unwrap(), 20).unwrap();
        let u = GridFunction::from_fn(g, |_| vecd(&[0.0])).unwrap();
        let model = builtin_yu(1);
        let grad = em_gradient(&u, &model, 1).unwrap();
        for gi in grad {
            assert_eq!(gi[0], 0.0);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        // finite-difference audit on a rough map for several powers; at large
        // m the plain central stencil's own truncation error grows with m, so
        // those rows use a Richardson-extrapolated central difference
        let n = 16usize;
        let g = unit_grid(n);
        let u = GridFunction::from_fn(g, |x| {
            vecd(&[(5.0 * x).sin() * 0.4, 0.3 * x * x - 0.1])
        })
        .unwrap();
        let model = builtin_power(2);
        let mask = CellMask::full(n);
        let energy_at = |i: usize, c: usize, d: f64, m: u32| {
            let mut v = u.clone();
            v.values_mut()[i][c] += d;
            em_energy_log(&v, &model, m, &mask).unwrap().normalized
        };
        // moderate powers: the literal per-node central stencil at step 1e-6
        for m in [1u32, 2, 8] {
            let grad = em_gradient(&u, &model, m).unwrap();
            for i in [1usize, 7, 15] {
                for c in 0..2 {
                    let t = 1e-6;
                    let fd = (energy_at(i, c, t, m) - energy_at(i, c, -t, m)) / (2.0 * t);
                    let an = grad[i - 1][c];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-6, "m={m} node={i} comp={c}: rel={rel}");
                }
            }
        }
        // large powers: dense directions keep the directional derivative well
        // above the oracle's roundoff floor; Richardson kills its truncation
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for m in [32u32, 256] {
            let grad = em_gradient(&u, &model, m).unwrap();
            for _ in 0..20 {
                let dir: Vec<DVector<f64>> = (0..n - 1)
                    .map(|_| DVector::from_iterator(2, (0..2).map(|_| rng.random_range(-1.0..1.0))))
                    .collect();
                let at = |t: f64| {
                    let mut v = u.clone();
                    for (a, d) in dir.iter().enumerate() {
                        v.values_mut()[a + 1] += d * t;
                    }
                    em_energy_log(&v, &model, m, &mask).unwrap().normalized
                };
                let t = 1e-4 / (1.0 + m as f64).sqrt();
                let d1 = (at(t) - at(-t)) / (2.0 * t);
                let d2 = (at(0.5 * t) - at(-0.5 * t)) / t;
                let fd = (4.0 * d2 - d1) / 3.0;
                let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-6, "m={m}: directional rel={rel}");
            }
        }
    }
}
