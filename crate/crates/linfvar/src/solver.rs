//! Minimisation of the normalized power energies with Dirichlet affine data,
//! and continuation in the power `m`.
//!
//! Each stage runs a damped Newton iteration on the normalized energy
//! `(E_m / |Omega|)^(1/m)` over the interior nodes. The exact Hessian of that
//! quantity is block-tridiagonal plus a rank-one downdate along the gradient
//! (the outer `1/m` power contributes it); the Newton system is solved by a
//! block Cholesky factorisation of the tridiagonal part with a Levenberg shift
//! and a Sherman-Morrison correction for the downdate. Armijo backtracking
//! guards every step, so accepted iterates never increase the energy.

use crate::functionals::{
    em_from_cells, energy_breakdown, eval_all_cells, gradient_weights, CellMask,
};
use crate::grid::{affine_interpolant, AffineData, Grid, GridFunction};
use crate::lagrangian::LagrangianModel;
use crate::elsystem::{expanded_residual, ResidualField, ResidualPower};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Frozen constant of the discrete Sobolev-type stage bound
/// `||u||_{W^{1,2m}} <= C (E_m^{1/2m} + max|b| + 1)`; calibrated once on the
/// power model.
pub const SOBOLEV_BOUND_CONST: f64 = 8.0;

/// Configuration of one continuation solve.
#[derive(Debug, Clone)]
pub struct SolveConfig {
    /// Strictly increasing powers; the default is the doubling schedule
    /// 1, 2, 4, ..., 1024.
    pub m_schedule: Vec<u32>,
    /// Stop a stage when the sup norm of the normalized-energy gradient falls
    /// below this.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// Initial Levenberg shift; zero tries the pure Newton step first.
    pub levenberg_lambda0: f64,
    /// Armijo slope fraction in (0, 1).
    pub armijo_c: f64,
    /// Step shrink factor of the backtracking line search.
    pub backtrack: f64,
    /// Stop the continuation early when the sup-norm slope change between
    /// consecutive stages drops below this; zero disables early stopping.
    pub continuation_stop: f64,
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            m_schedule: default_schedule(1024),
            newton_tol: 1e-10,
            max_newton_iters: 100,
            levenberg_lambda0: 0.0,
            armijo_c: 1e-4,
            backtrack: 0.5,
            continuation_stop: 1e-6,
            seed: 0,
        }
    }
}

/// Doubling schedule `1, 2, 4, ..., m_max` (clipped at `m_max`).
pub fn default_schedule(m_max: u32) -> Vec<u32> {
    let mut v = vec![1u32];
    let mut m = 2u32;
    while m < m_max {
        v.push(m);
        m = m.saturating_mul(2);
    }
    if m_max > 1 {
        v.push(m_max);
    }
    v
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_schedule.is_empty() || self.m_schedule[0] < 1 {
            return Err(Error::InvalidPower {
                min: 1,
                got: self.m_schedule.first().copied().unwrap_or(0),
            });
        }
        if !self.m_schedule.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::NonFinite("m schedule must be strictly increasing".into()));
        }
        if self.newton_tol <= 0.0 || !(0.0 < self.armijo_c && self.armijo_c < 1.0) {
            return Err(Error::NonFinite("solver tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one continuation stage.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub m: u32,
    pub iterations: usize,
    pub converged: bool,
    /// Sup norm of the normalized-energy gradient at the returned iterate.
    pub grad_norm: f64,
    /// Normalized energy of the returned iterate.
    pub normalized_energy: f64,
    /// Supremal energy of the returned iterate.
    pub esup: f64,
    /// Sup-norm slope change from the previous stage (filled by the
    /// continuation driver).
    pub du_change_sup: Option<f64>,
    /// Slope-change norms for q = 1, 2, 4.
    pub du_change_lq: Option<[f64; 3]>,
    /// Discrete Sobolev-bound check: measured left side and the frozen-C
    /// right side.
    pub bound_lhs: f64,
    pub bound_rhs: f64,
    pub iterate: GridFunction,
}

impl StageRecord {
    pub fn bound_ok(&self) -> bool {
        self.bound_lhs <= self.bound_rhs
    }
}

/// Full record of a continuation solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub stages: Vec<StageRecord>,
    pub u_final: GridFunction,
    pub esup_final: f64,
    /// Residual of the limiting system on the final iterate.
    pub residual_limit: Option<ResidualField>,
    /// Normalized energies of the *final* iterate over the full schedule; the
    /// power-mean monotonicity table.
    pub energy_table: Vec<(u32, f64)>,
    pub schedule: Vec<u32>,
    pub all_converged: bool,
    pub stopped_early: bool,
}

/// Block-tridiagonal-plus-rank-one representation of the exact Hessian of the
/// normalized energy over the interior nodes.
pub struct EnergyHessian {
    dim: usize,
    diag: Vec<DMatrix<f64>>,
    /// `off[a]` couples interior block `a` to `a + 1`.
    off: Vec<DMatrix<f64>>,
    /// Downdate coefficient `(m - 1) * N`.
    rank1_coeff: f64,
    /// Downdate direction, the gradient divided by the normalized energy.
    rank1_vec: Vec<DVector<f64>>,
}

fn dot(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn sup_norm(a: &[DVector<f64>]) -> f64 {
    a.iter().map(|x| x.amax()).fold(0.0, f64::max)
}

impl EnergyHessian {
    pub fn n_blocks(&self) -> usize {
        self.diag.len()
    }

    /// Matrix-vector product with the full operator.
    pub fn apply(&self, w: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let k = self.diag.len();
        let mut out: Vec<DVector<f64>> = Vec::with_capacity(k);
        for a in 0..k {
            let mut r = &self.diag[a] * &w[a];
            if a > 0 {
                r += self.off[a - 1].transpose() * &w[a - 1];
            }
            if a + 1 < k {
                r += &self.off[a] * &w[a + 1];
            }
            out.push(r);
        }
        let vw = dot(&self.rank1_vec, w);
        for (o, v) in out.iter_mut().zip(&self.rank1_vec) {
            *o -= v * (self.rank1_coeff * vw);
        }
        out
    }

    /// Solves `(H + lambda I) d = rhs` where `H` includes the rank-one
    /// downdate. Returns `None` when the shifted operator is not positive
    /// definite (a pivot fails or the Sherman-Morrison denominator is not
    /// positive).
    pub fn solve_shifted(&self, rhs: &[DVector<f64>], lambda: f64) -> Option<Vec<DVector<f64>>> {
        let factor = self.factor_tridiag(lambda)?;
        let y = factor.solve(rhs);
        if self.rank1_coeff == 0.0 {
            return Some(y);
        }
        let z = factor.solve(&self.rank1_vec);
        let denom = 1.0 - self.rank1_coeff * dot(&self.rank1_vec, &z);
        if denom <= 1e-14 {
            return None;
        }
        let scale = self.rank1_coeff * dot(&self.rank1_vec, &y) / denom;
        Some(
            y.iter()
                .zip(&z)
                .map(|(yi, zi)| yi + zi * scale)
                .collect(),
        )
    }

    fn factor_tridiag(&self, lambda: f64) -> Option<TridiagFactor<'_>> {
        let k = self.diag.len();
        let mut pivots: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>> = Vec::with_capacity(k);
        let shift = DMatrix::identity(self.dim, self.dim) * lambda;
        for a in 0..k {
            // Schur complement S_a = D_a + lambda I - E_{a-1}^T S_{a-1}^{-1} E_{a-1}
            let mut s = &self.diag[a] + &shift;
            if a > 0 {
                let e = &self.off[a - 1];
                let sol = pivots[a - 1].solve(e);
                s -= e.transpose() * sol;
            }
            pivots.push(nalgebra::Cholesky::new(s)?);
        }
        Some(TridiagFactor {
            pivots,
            off: &self.off,
        })
    }
}

/// Block LDL-style factorisation of the shifted tridiagonal part.
struct TridiagFactor<'a> {
    pivots: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    off: &'a [DMatrix<f64>],
}

impl TridiagFactor<'_> {
    fn solve(&self, rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let k = rhs.len();
        // forward sweep
        let mut y: Vec<DVector<f64>> = Vec::with_capacity(k);
        for a in 0..k {
            let mut r = rhs[a].clone();
            if a > 0 {
                let prev = self.pivots[a - 1].solve(&y[a - 1]);
                r -= self.off[a - 1].transpose() * prev;
            }
            y.push(r);
        }
        // backward sweep
        let mut x = vec![DVector::zeros(0); k];
        for a in (0..k).rev() {
            let mut r = y[a].clone();
            if a + 1 < k {
                r -= &self.off[a] * &x[a + 1];
            }
            x[a] = self.pivots[a].solve(&r);
        }
        x
    }
}

/// Exact second derivative of the normalized energy with respect to the
/// interior nodal values.
pub fn hessian_assemble(
    u: &GridFunction,
    model: &LagrangianModel,
    m: u32,
) -> Result<EnergyHessian> {
    if m < 1 {
        return Err(Error::InvalidPower { min: 1, got: m });
    }
    let n = u.grid().n_cells();
    let dim = u.dim();
    let h = u.grid().h();
    let cells = eval_all_cells(u, model, true)?;
    let (log_e, weights) = gradient_weights(&cells, h, m);
    let normalized = ((log_e - (n as f64 * h).ln()) / m as f64).exp();

    let k = n - 1;
    let mut diag = vec![DMatrix::zeros(dim, dim); k];
    let mut off = vec![DMatrix::zeros(dim, dim); k.saturating_sub(1)];
    let mut rank1 = vec![DVector::zeros(dim); k];
    let mfac = m as f64 - 1.0;

    for (j, cell) in cells.iter().enumerate() {
        let kappa = normalized * weights[j];
        let gl = cell.node_gradient(-1.0);
        let gr = cell.node_gradient(1.0);
        // left node of cell j is node j (flat j-1), right node is node j+1 (flat j)
        if j >= 1 {
            let a = j - 1;
            diag[a] += (cell.node_hessian_block(-1.0, -1.0) + &gl * gl.transpose() * (mfac / cell.l))
                * kappa;
            rank1[a] += &gl * weights[j];
        }
        if j + 1 <= k {
            let a = j;
            diag[a] += (cell.node_hessian_block(1.0, 1.0) + &gr * gr.transpose() * (mfac / cell.l))
                * kappa;
            rank1[a] += &gr * weights[j];
        }
        if j >= 1 && j + 1 <= k {
            off[j - 1] += (cell.node_hessian_block(-1.0, 1.0) + &gl * gr.transpose() * (mfac / cell.l))
                * kappa;
        }
    }

    Ok(EnergyHessian {
        dim,
        diag,
        off,
        rank1_coeff: mfac * normalized,
        rank1_vec: rank1,
    })
}

fn normalized_energy(u: &GridFunction, model: &LagrangianModel, m: u32) -> Result<f64> {
    Ok(
        crate::functionals::em_energy_log(u, model, m, &CellMask::full(u.grid().n_cells()))?
            .normalized,
    )
}

fn interior_gradient(u: &GridFunction, model: &LagrangianModel, m: u32) -> Result<Vec<DVector<f64>>> {
    crate::functionals::em_gradient(u, model, m)
}

fn add_step(u: &GridFunction, step: &[DVector<f64>], t: f64) -> GridFunction {
    let mut out = u.clone();
    for (a, s) in step.iter().enumerate() {
        let i = a + 1;
        out.values_mut()[i] += s * t;
    }
    out
}

/// Discrete Sobolev-type bound data for one iterate: the measured norm and
/// the frozen-constant right side.
fn sobolev_bound(
    u: &GridFunction,
    model: &LagrangianModel,
    m: u32,
    data: &AffineData,
) -> Result<(f64, f64)> {
    let n = u.grid().n_cells();
    let h = u.grid().h();
    let two_m = 2.0 * m as f64;
    let log_h = h.ln();
    let mut terms = Vec::with_capacity(2 * n);
    for j in 0..n {
        let ubar = u.cell_average(j).norm();
        let du = u.cell_slope(j).norm();
        if ubar > 0.0 {
            terms.push(log_h + two_m * ubar.ln());
        }
        if du > 0.0 {
            terms.push(log_h + two_m * du.ln());
        }
    }
    let lhs = if terms.is_empty() {
        0.0
    } else {
        (crate::functionals::log_sum_exp(&terms) / two_m).exp()
    };
    let cells = crate::functionals::cell_lagrangian(u, model)?;
    let mask = CellMask::full(n);
    let em = em_from_cells(&cells, h, m, &mask)?;
    let rhs_core = (em.log_integral / two_m).exp() + data.endpoint_sup(u.grid().interval()) + 1.0;
    Ok((lhs, SOBOLEV_BOUND_CONST * rhs_core))
}

/// Minimises the normalized energy at a fixed power `m` by damped Newton with
/// the endpoints pinned to the affine data. Returns the iterate and its stage
/// record; an exhausted iteration budget or a failed line search returns the
/// best iterate flagged as non-converged.
pub fn minimize_em(
    u0: &GridFunction,
    model: &LagrangianModel,
    m: u32,
    data: &AffineData,
    cfg: &SolveConfig,
) -> Result<(GridFunction, StageRecord)> {
    if m < 1 {
        return Err(Error::InvalidPower { min: 1, got: m });
    }
    if u0.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: u0.dim(),
            got: data.dim(),
        });
    }
    let n = u0.grid().n_cells();
    let mut u = u0.clone();
    // endpoints pinned to the data throughout
    let len = u.grid().interval().length();
    u.values_mut()[0] = data.eval(0.0);
    u.values_mut()[n] = data.eval(len);

    let mut energy = normalized_energy(&u, model, m)?;
    let mut grad = interior_gradient(&u, model, m)?;
    let mut lambda = cfg.levenberg_lambda0;
    let mut iterations = 0usize;
    let mut converged = sup_norm(&grad) <= cfg.newton_tol;

    while !converged && iterations < cfg.max_newton_iters {
        let hess = hessian_assemble(&u, model, m)?;
        let diag_scale = hess
            .diag
            .iter()
            .map(|d| d.trace().abs() / hess.dim as f64)
            .sum::<f64>()
            / hess.diag.len() as f64;
        let neg_grad: Vec<DVector<f64>> = grad.iter().map(|g| -g).collect();

        // find a positive-definite shift and a descent direction
        let mut step = None;
        for _ in 0..60 {
            match hess.solve_shifted(&neg_grad, lambda) {
                Some(d) => {
                    let slope = dot(&grad, &d);
                    if slope < 0.0 && d.iter().all(|v| v.iter().all(|c| c.is_finite())) {
                        step = Some((d, slope));
                        break;
                    }
                    lambda = (lambda * 10.0).max(1e-10 * (1.0 + diag_scale));
                }
                None => {
                    lambda = (lambda * 10.0).max(1e-10 * (1.0 + diag_scale));
                }
            }
        }
        let Some((direction, slope)) = step else {
            converged = false;
            break;
        };

        // Armijo backtracking
        let mut t = 1.0;
        let mut accepted = false;
        while t >= 1e-14 {
            let candidate = add_step(&u, &direction, t);
            match normalized_energy(&candidate, model, m) {
                Ok(e_new) if e_new <= energy + cfg.armijo_c * t * slope => {
                    u = candidate;
                    energy = e_new;
                    accepted = true;
                    break;
                }
                _ => t *= cfg.backtrack,
            }
        }
        iterations += 1;
        if !accepted {
            break; // line search failed below machine step
        }
        if t == 1.0 {
            lambda *= 0.25;
            if lambda < 1e-14 * (1.0 + diag_scale) {
                lambda = 0.0;
            }
        }
        grad = interior_gradient(&u, model, m)?;
        converged = sup_norm(&grad) <= cfg.newton_tol;
    }

    let grad_norm = sup_norm(&grad);
    let breakdown = energy_breakdown(&u, model, m, &CellMask::full(n))?;
    let (bound_lhs, bound_rhs) = sobolev_bound(&u, model, m, data)?;
    let record = StageRecord {
        m,
        iterations,
        converged,
        grad_norm,
        normalized_energy: breakdown.normalized,
        esup: breakdown.esup,
        du_change_sup: None,
        du_change_lq: None,
        bound_lhs,
        bound_rhs,
        iterate: u.clone(),
    };
    Ok((u, record))
}

/// Slope-change norms between two iterates: sup and the `L^q` norms for
/// q = 1, 2, 4.
fn slope_change(prev: &GridFunction, next: &GridFunction) -> (f64, [f64; 3]) {
    let n = prev.grid().n_cells();
    let h = prev.grid().h();
    let mut sup: f64 = 0.0;
    let mut sums = [0.0f64; 3];
    for j in 0..n {
        let d = (next.cell_slope(j) - prev.cell_slope(j)).norm();
        sup = sup.max(d);
        sums[0] += h * d;
        sums[1] += h * d * d;
        sums[2] += h * d.powi(4);
    }
    (sup, [sums[0], sums[1].sqrt(), sums[2].powf(0.25)])
}

/// Runs the continuation: minimises along the schedule with warm starts from
/// the previous stage, starting from the affine interpolant of the data, and
/// assembles the report. A non-converged stage is recorded and the
/// continuation keeps going with its best iterate.
pub fn continuation_solve(
    model: &LagrangianModel,
    data: &AffineData,
    grid: &Grid,
    cfg: &SolveConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    if model.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: data.dim(),
        });
    }
    let mut u = affine_interpolant(grid, data);
    let mut stages: Vec<StageRecord> = Vec::new();
    let mut stopped_early = false;

    for &m in &cfg.m_schedule {
        let prev = u.clone();
        let (next, mut record) = minimize_em(&u, model, m, data, cfg)?;
        let (sup, lq) = slope_change(&prev, &next);
        if !stages.is_empty() {
            record.du_change_sup = Some(sup);
            record.du_change_lq = Some(lq);
        }
        u = next;
        let du_small = record.du_change_sup.map_or(false, |s| s <= cfg.continuation_stop);
        stages.push(record);
        if cfg.continuation_stop > 0.0 && du_small {
            stopped_early = true;
            break;
        }
    }

    let mask = CellMask::full(grid.n_cells());
    let esup_final = crate::functionals::esup_energy(&u, model, &mask)?;
    let energy_table = cfg
        .m_schedule
        .iter()
        .map(|&m| {
            crate::functionals::em_energy_log(&u, model, m, &mask)
                .map(|e| (m, e.normalized))
        })
        .collect::<Result<Vec<_>>>()?;
    let residual_limit = if grid.n_cells() >= 3 {
        Some(expanded_residual(&u, model, ResidualPower::Limit)?)
    } else {
        None
    };
    let all_converged = stages.iter().all(|s| s.converged);
    Ok(SolveReport {
        stages,
        u_final: u,
        esup_final,
        residual_limit,
        energy_table,
        schedule: cfg.m_schedule.clone(),
        all_converged,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, Interval};
    use crate::lagrangian::{builtin_power, builtin_yu, VectorField};
    use std::sync::Arc;

    fn vecd(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    fn unit_grid(n: usize) -> Grid {
        build_grid(Interval::new(0.0, 1.0).unwrap(), n).unwrap()
    }

    /// x-only field used by the compatible-case tests.
    fn compatible_field() -> VectorField {
        VectorField::x_only(
            2,
            "compatible",
            Arc::new(|x: f64| vecd(&[(std::f64::consts::PI * x).cos(), 0.5])),
            Arc::new(|x: f64| {
                vecd(&[
                    -std::f64::consts::PI * (std::f64::consts::PI * x).sin(),
                    0.0,
                ])
            }),
        )
    }

    /// Misfit integrand `1 + p` over an x-only field; its exact discrete
    /// minimiser integrates the field with the midpoint rule.
    fn compatible_model() -> LagrangianModel {
        use crate::lagrangian::HypothesisConstants;
        LagrangianModel::new(
            "compatible",
            2,
            Arc::new(|_, _, p| 1.0 + p),
            Arc::new(|_, _, _| 1.0),
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _: &DVector<f64>, _| DVector::zeros(2)),
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _: &DVector<f64>, _| DVector::zeros(2)),
            compatible_field(),
            HypothesisConstants::new(0.25, 0.5, 1, Arc::new(|s| 8.0 + s), "8 + s"),
        )
    }

    /// Exact discrete minimiser of the compatible model plus the consistent
    /// affine data.
    fn compatible_minimiser(grid: &Grid) -> (GridFunction, AffineData) {
        let field = compatible_field();
        let h = grid.h();
        let mut values = vec![vecd(&[0.0, 0.0])];
        for j in 0..grid.n_cells() {
            let v = field.v(grid.midpoint(j), &values[j]);
            let next = &values[j] + v * h;
            values.push(next);
        }
        let last = values.last().unwrap().clone();
        let slope = &last / grid.interval().length();
        let u = GridFunction::new(grid.clone(), values).unwrap();
        let data = AffineData::new(vecd(&[0.0, 0.0]), slope).unwrap();
        (u, data)
    }

    #[test]
    fn affine_start_converges_immediately() {
        let g = unit_grid(32);
        let data = AffineData::new(vecd(&[0.0, 1.0]), vecd(&[2.0, -1.0])).unwrap();
        let u0 = affine_interpolant(&g, &data);
        let model = builtin_power(2);
        let cfg = SolveConfig::default();
        for m in [1u32, 2, 64, 1024] {
            let (_, rec) = minimize_em(&u0, &model, m, &data, &cfg).unwrap();
            assert!(rec.converged);
            assert_eq!(rec.iterations, 0, "m={m}: affine start must be stationary");
        }
    }

    #[test]
    fn bump_relaxes_to_affine() {
        let g = unit_grid(24);
        let data = AffineData::new(vecd(&[0.0]), vecd(&[1.5])).unwrap();
        let mut u0 = affine_interpolant(&g, &data);
        for i in 8..16 {
            u0.values_mut()[i][0] += 0.4 * ((i - 8) as f64) * ((16 - i) as f64) / 16.0;
        }
        let model = builtin_power(1);
        let cfg = SolveConfig::default();
        let (u, rec) = minimize_em(&u0, &model, 2, &data, &cfg).unwrap();
        assert!(rec.converged, "gradient stalled at {}", rec.grad_norm);
        let affine = affine_interpolant(&g, &data);
        assert!(u.sup_distance(&affine).unwrap() < 1e-8);
    }

    #[test]
    fn compatible_case_reaches_unit_energy() {
        let g = unit_grid(40);
        let (expected, data) = compatible_minimiser(&g);
        let model = compatible_model();
        let cfg = SolveConfig::default();
        let (u, rec) = minimize_em(&affine_interpolant(&g, &data), &model, 2, &data, &cfg).unwrap();
        assert!(rec.converged);
        assert!(
            u.sup_distance(&expected).unwrap() < 1e-7,
            "distance {}",
            u.sup_distance(&expected).unwrap()
        );
        assert!((rec.normalized_energy - 1.0).abs() < 1e-10);
    }

    #[test]
    fn hessian_matches_finite_differences_of_gradient() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let g = unit_grid(10);
        let u = GridFunction::from_fn(g, |x| vecd(&[(4.0 * x).sin() * 0.4, 0.2 * x])).unwrap();
        for model in [builtin_power(2), compatible_model()] {
            for m in [1u32, 2, 8] {
                let hess = hessian_assemble(&u, &model, m).unwrap();
                let k = hess.n_blocks();
                // random direction
                let dir: Vec<DVector<f64>> = (0..k)
                    .map(|_| {
                        DVector::from_iterator(2, (0..2).map(|_| rng.random_range(-1.0..1.0)))
                    })
                    .collect();
                let hd = hess.apply(&dir);
                let t = 1e-6;
                let up = add_step(&u, &dir, t);
                let dn = add_step(&u, &dir, -t);
                let gp = interior_gradient(&up, &model, m).unwrap();
                let gn = interior_gradient(&dn, &model, m).unwrap();
                let mut max_rel: f64 = 0.0;
                for a in 0..k {
                    let fd = (&gp[a] - &gn[a]) / (2.0 * t);
                    let denom = hd[a].norm().max(fd.norm()).max(1e-6);
                    max_rel = max_rel.max((&hd[a] - fd).norm() / denom);
                }
                assert!(
                    max_rel < 1e-5,
                    "{} m={m}: Hessian-gradient mismatch {max_rel}",
                    model.name()
                );
            }
        }
    }

    #[test]
    fn hessian_positive_definite_at_compatible_minimiser() {
        let g = unit_grid(24);
        let (u, _) = compatible_minimiser(&g);
        let model = compatible_model();
        let hess = hessian_assemble(&u, &model, 2).unwrap();
        // power iteration on the inverse estimates the smallest eigenvalue
        let k = hess.n_blocks();
        let mut x: Vec<DVector<f64>> = (0..k).map(|_| DVector::from_element(2, 1.0)).collect();
        let mut lam_min = 0.0;
        for _ in 0..60 {
            let y = hess.solve_shifted(&x, 0.0).expect("operator must be SPD");
            let ny = dot(&y, &y).sqrt();
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi = yi / ny;
            }
            let hx = hess.apply(&x);
            lam_min = dot(&x, &hx) / dot(&x, &x);
        }
        assert!(lam_min > 0.0, "smallest eigenvalue {lam_min}");
    }

    #[test]
    fn continuation_power_is_affine_at_every_stage() {
        let g = unit_grid(64);
        let data = AffineData::new(vecd(&[0.0, 0.0]), vecd(&[2.0, -1.0])).unwrap();
        let model = builtin_power(2);
        let cfg = SolveConfig::default();
        let report = continuation_solve(&model, &data, &g, &cfg).unwrap();
        assert!(report.all_converged);
        let affine = affine_interpolant(&g, &data);
        for stage in &report.stages {
            assert!(stage.iterate.sup_distance(&affine).unwrap() < 1e-8);
            assert!(stage.bound_ok(), "stage m={} bound violated", stage.m);
        }
        assert!((report.esup_final - 3.5).abs() < 1e-10);
        // warm-start power-mean monotonicity over the energy table
        for w in report.energy_table.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-12);
            assert!(w[1].1 <= report.esup_final + 1e-12);
        }
    }

    #[test]
    fn continuation_yu_energies_increase_toward_esup() {
        let g = build_grid(Interval::new(0.0, std::f64::consts::PI).unwrap(), 50).unwrap();
        let data = AffineData::new(vecd(&[0.0]), vecd(&[0.0])).unwrap();
        let model = builtin_yu(1);
        let cfg = SolveConfig {
            continuation_stop: 0.0,
            ..SolveConfig::default()
        };
        let report = continuation_solve(&model, &data, &g, &cfg).unwrap();
        assert!(report.all_converged);
        assert!(!report.stopped_early);
        assert_eq!(report.stages.len(), cfg.m_schedule.len());
        for w in report.stages.windows(2) {
            assert!(w[1].normalized_energy >= w[0].normalized_energy - 1e-12);
        }
        let last = report.stages.last().unwrap();
        assert!(report.esup_final >= last.normalized_energy - 1e-12);
        assert!((report.esup_final - 2.0).abs() < 1e-2);
        // slope changes are identically zero here, hence Cauchy
        for s in &report.stages[1..] {
            assert_eq!(s.du_change_sup.unwrap(), 0.0);
        }
    }

    #[test]
    fn early_stop_fires_on_stationary_schedules() {
        let g = unit_grid(16);
        let data = AffineData::new(vecd(&[0.0]), vecd(&[1.0])).unwrap();
        let model = builtin_power(1);
        let cfg = SolveConfig::default();
        let report = continuation_solve(&model, &data, &g, &cfg).unwrap();
        assert!(report.stopped_early);
        assert!(report.stages.len() < cfg.m_schedule.len());
    }
}
