//! Pointwise assembly of the second-order systems: the orthogonal projection
//! pair, the coefficient blocks of the expanded power-m system, the limiting
//! degenerate operator, and the data-assimilation instance.
//!
//! Two independent assemblies of the limiting operator are kept deliberately:
//! [`linf_operator`] evaluates the full expression directly, while
//! [`linf_operator_split`] goes through the coefficient blocks. Their
//! agreement at random states is an acceptance gate.

use crate::functionals::CellMask;
use crate::grid::{second_difference, GridFunction};
use crate::lagrangian::{LagrangianModel, ObservationModel, VectorField};
use crate::{fmt_full, Error, Result};
use nalgebra::{DMatrix, DVector};

/// `sgn(xi) = xi/|xi|` with `sgn(0) = 0`.
pub fn sgn(xi: &DVector<f64>) -> DVector<f64> {
    let n = xi.norm();
    if n == 0.0 {
        DVector::zeros(xi.len())
    } else {
        xi / n
    }
}

/// Orthogonal projections along and against `xi`:
/// `tangent = sgn(xi) (x) sgn(xi)`, `perp = I - tangent`. For `xi = 0` the
/// tangent part is zero and the perpendicular part is the identity.
pub fn proj_pair(xi: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = xi.len();
    let s = sgn(xi);
    let tangent = &s * s.transpose();
    let perp = DMatrix::identity(n, n) - &tangent;
    (tangent, perp)
}

/// A point of the second-order system: position, value, slope and the
/// second-derivative slot, with every model partial evaluated at the radial
/// argument.
#[derive(Debug, Clone)]
pub struct SystemPointState {
    pub x: f64,
    pub eta: DVector<f64>,
    pub slope: DVector<f64>,
    pub curvature: DVector<f64>,
    /// Misfit `W = P - V(x, eta)`.
    pub misfit: DVector<f64>,
    /// Radial argument `p = 1/2 |W|^2`.
    pub radial: f64,
    pub h_val: f64,
    pub h_p: f64,
    pub h_pp: f64,
    pub h_x: f64,
    pub h_eta: DVector<f64>,
    pub h_px: f64,
    pub h_peta: DVector<f64>,
    pub v: DVector<f64>,
    pub v_x: DVector<f64>,
    pub v_eta: DMatrix<f64>,
}

impl SystemPointState {
    pub fn new(
        model: &LagrangianModel,
        x: f64,
        eta: DVector<f64>,
        slope: DVector<f64>,
        curvature: DVector<f64>,
    ) -> Result<Self> {
        let v = model.v(x, &eta);
        let misfit = &slope - &v;
        let radial = 0.5 * misfit.norm_squared();
        let h_val = model.h(x, &eta, radial);
        if !h_val.is_finite() || !radial.is_finite() {
            return Err(Error::ModelEval {
                x,
                eta: eta.iter().copied().collect(),
                p: radial,
            });
        }
        Ok(Self {
            h_p: model.h_p(x, &eta, radial),
            h_pp: model.h_pp(x, &eta, radial),
            h_x: model.h_x(x, &eta, radial),
            h_eta: model.h_eta(x, &eta, radial),
            h_px: model.h_px(x, &eta, radial),
            h_peta: model.h_peta(x, &eta, radial),
            v_x: model.v_x(x, &eta),
            v_eta: model.v_eta(x, &eta),
            x,
            eta,
            slope,
            curvature,
            misfit,
            radial,
            h_val,
            v,
        })
    }

    /// State at interior node `i` of a grid function: centered slope paired
    /// with the 3-point second difference.
    pub fn at_node(u: &GridFunction, model: &LagrangianModel, i: usize) -> Result<Self> {
        let slope = u.centered_slope(i);
        let curvature = second_difference(u, i, 1)?;
        Self::new(
            model,
            u.grid().node(i),
            u.value(i).clone(),
            slope,
            curvature,
        )
    }

    /// `D(Wu) = X - V_eta P - V_x`, the derivative of the misfit field.
    pub fn misfit_derivative(&self) -> DVector<f64> {
        &self.curvature - &self.v_eta * &self.slope - &self.v_x
    }

    /// `V_eta^T W`.
    pub fn veta_t_w(&self) -> DVector<f64> {
        self.v_eta.transpose() * &self.misfit
    }

    /// Scale-free residual normalisation `1 + |W|^2 H_p^2`; the leading
    /// coefficient of the limiting operator degenerates exactly where this
    /// is 1.
    pub fn residual_scale(&self) -> f64 {
        1.0 + self.misfit.norm_squared() * self.h_p * self.h_p
    }
}

/// Weight of the misfit-slope factor in the perpendicular low-order block.
///
/// `Single` is the convention consistent with the limiting operator and the
/// expanded power-m system; `Squared` reproduces the alternate printed form
/// of the block for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerpScaling {
    #[default]
    Single,
    Squared,
}

/// Coefficient blocks of the expanded system: the zero-order forcing, the
/// vanishing-order forcing and the tangent second-order matrix.
#[derive(Debug, Clone)]
pub struct CoeffBlocks {
    /// Forcing that survives the limit.
    pub f_cap: DVector<f64>,
    /// Forcing multiplied by `1/(m-1)`.
    pub f_low: DVector<f64>,
    /// Tangent second-order block multiplied by `1/(m-1)`.
    pub a_mat: DMatrix<f64>,
}

pub fn coeff_blocks(s: &SystemPointState) -> CoeffBlocks {
    coeff_blocks_with(s, PerpScaling::Single)
}

pub fn coeff_blocks_with(s: &SystemPointState, scaling: PerpScaling) -> CoeffBlocks {
    let (tangent, perp) = proj_pair(&s.misfit);
    let w2 = s.misfit.norm_squared();
    let hp_weight = match scaling {
        PerpScaling::Single => s.h_p,
        PerpScaling::Squared => s.h_p * s.h_p,
    };
    let f_cap = -(&s.misfit) * (s.h_p * (s.h_x + s.h_eta.dot(&s.slope)))
        + &perp * (&s.h_eta - s.veta_t_w() * s.h_p) * (hp_weight * w2);
    let f_low = -(&tangent
        * (-&s.h_eta
            + s.veta_t_w() * s.h_p
            + &s.misfit * (s.h_peta.dot(&s.slope) + s.h_px)))
        * s.h_val;
    let a_mat = tangent * (s.h_val * (s.h_p + s.h_pp * w2));
    CoeffBlocks {
        f_cap,
        f_low,
        a_mat,
    }
}

/// Direct assembly of the limiting operator: the full expression evaluated
/// term by term, with the perpendicular block written as `|W|^2 I - W (x) W`.
pub fn linf_operator(s: &SystemPointState) -> DVector<f64> {
    let n = s.eta.len();
    let w2 = s.misfit.norm_squared();
    let hp2 = s.h_p * s.h_p;
    let perp_unnorm = DMatrix::identity(n, n) * w2 - &s.misfit * s.misfit.transpose();
    s.misfit_derivative() * (hp2 * w2)
        + &s.misfit * (s.h_p * (s.h_x + s.slope.dot(&s.h_eta)))
        - perp_unnorm * (&s.h_eta - s.veta_t_w() * s.h_p) * s.h_p
}

/// The same operator through the coefficient blocks:
/// `H_p^2 |W|^2 D(Wu) - F`. Agreement with [`linf_operator`] at random states
/// is the dual-assembly identity.
pub fn linf_operator_split(s: &SystemPointState) -> DVector<f64> {
    let blocks = coeff_blocks(s);
    let w2 = s.misfit.norm_squared();
    s.misfit_derivative() * (s.h_p * s.h_p * w2) - blocks.f_cap
}

/// Power selector for the expanded residual: a finite `m >= 2` or the limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualPower {
    Finite(u32),
    Limit,
}

/// Residual vectors at the interior nodes with scale-free summaries.
#[derive(Debug, Clone)]
pub struct ResidualField {
    xs: Vec<f64>,
    h: f64,
    residuals: Vec<DVector<f64>>,
    scales: Vec<f64>,
}

impl ResidualField {
    pub(crate) fn new(xs: Vec<f64>, h: f64, residuals: Vec<DVector<f64>>, scales: Vec<f64>) -> Self {
        Self {
            xs,
            h,
            residuals,
            scales,
        }
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn residuals(&self) -> &[DVector<f64>] {
        &self.residuals
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn sup(&self) -> f64 {
        self.residuals.iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    pub fn l2(&self) -> f64 {
        (self.h
            * self
                .residuals
                .iter()
                .map(|r| r.norm_squared())
                .sum::<f64>())
        .sqrt()
    }

    pub fn sup_normalized(&self) -> f64 {
        self.residuals
            .iter()
            .zip(&self.scales)
            .map(|(r, s)| r.norm() / s)
            .fold(0.0, f64::max)
    }

    pub fn l2_normalized(&self) -> f64 {
        (self.h
            * self
                .residuals
                .iter()
                .zip(&self.scales)
                .map(|(r, s)| r.norm_squared() / (s * s))
                .sum::<f64>())
        .sqrt()
    }

    /// CSV `x,res_1..res_N,|res|` per interior node.
    pub fn to_csv(&self) -> String {
        let dim = self.residuals.first().map_or(0, |r| r.len());
        let mut out = String::from("x");
        for c in 1..=dim {
            out.push_str(&format!(",res_{c}"));
        }
        out.push_str(",|res|\n");
        for (x, r) in self.xs.iter().zip(&self.residuals) {
            out.push_str(&fmt_full(*x));
            for c in 0..dim {
                out.push(',');
                out.push_str(&fmt_full(r[c]));
            }
            out.push(',');
            out.push_str(&fmt_full(r.norm()));
            out.push('\n');
        }
        out
    }

    /// Sup of the normalized residual over nodes whose flanking cells are both
    /// selected in `mask`.
    pub fn sup_normalized_over(&self, mask: &CellMask) -> f64 {
        self.residuals
            .iter()
            .zip(&self.scales)
            .enumerate()
            .filter(|(idx, _)| {
                let i = idx + 1; // interior node index
                mask.selected(i - 1) && mask.selected(i)
            })
            .map(|(_, (r, s))| r.norm() / s)
            .fold(0.0, f64::max)
    }
}

/// Residual of the expanded power-m system (or its limit) at every interior
/// node: `[A/(m-1) + H_p^2 |W|^2 I] D(Wu) - F - f/(m-1)`, with the
/// `1/(m-1)` terms dropped in the limit.
pub fn expanded_residual(
    u: &GridFunction,
    model: &LagrangianModel,
    power: ResidualPower,
) -> Result<ResidualField> {
    if let ResidualPower::Finite(m) = power {
        if m < 2 {
            return Err(Error::InvalidPower { min: 2, got: m });
        }
    }
    let n = u.grid().n_cells();
    if n < 3 {
        return Err(Error::TooFewCells(n));
    }
    let mut xs = Vec::with_capacity(n - 1);
    let mut residuals = Vec::with_capacity(n - 1);
    let mut scales = Vec::with_capacity(n - 1);
    for i in 1..n {
        let s = SystemPointState::at_node(u, model, i)?;
        let blocks = coeff_blocks(&s);
        let w2 = s.misfit.norm_squared();
        let dw = s.misfit_derivative();
        let res = match power {
            ResidualPower::Finite(m) => {
                let inv = 1.0 / (m as f64 - 1.0);
                (&blocks.a_mat * &dw) * inv + &dw * (s.h_p * s.h_p * w2)
                    - &blocks.f_cap
                    - &blocks.f_low * inv
            }
            ResidualPower::Limit => dw * (s.h_p * s.h_p * w2) - &blocks.f_cap,
        };
        if res.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("residual at node {i}")));
        }
        xs.push(s.x);
        scales.push(s.residual_scale());
        residuals.push(res);
    }
    Ok(ResidualField::new(xs, u.grid().h(), residuals, scales))
}

/// Direct assembly of the limiting data-assimilation system from the
/// observation operator, the measurement series and the dynamics field; an
/// independent code path cross-checked against [`expanded_residual`] on the
/// misfit integrand.
pub fn da_residual(
    u: &GridFunction,
    obs: &ObservationModel,
    field: &VectorField,
) -> Result<ResidualField> {
    if u.dim() != field.dim() || obs.operator().state_dim() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: u.dim(),
        });
    }
    let n = u.grid().n_cells();
    if n < 3 {
        return Err(Error::TooFewCells(n));
    }
    let dim = u.dim();
    let mut xs = Vec::with_capacity(n - 1);
    let mut residuals = Vec::with_capacity(n - 1);
    let mut scales = Vec::with_capacity(n - 1);
    for i in 1..n {
        let x = u.grid().node(i);
        let eta = u.value(i);
        let slope = u.centered_slope(i);
        let curvature = second_difference(u, i, 1)?;
        let v = field.v(x, eta);
        let v_x = field.v_x(x, eta);
        let v_eta = field.v_eta(x, eta);
        let w = &slope - &v;
        let w2 = w.norm_squared();
        let om = obs.k(eta) - obs.measured(x); // K(u) - k
        let k_eta = obs.k_eta(eta);
        let k_x = obs.measured_slope(x);

        let dw = &curvature - &v_eta * &slope - &v_x;
        let perp_unnorm = DMatrix::identity(dim, dim) * w2 - &w * w.transpose();
        let res = dw * w2 - perp_unnorm * (k_eta.transpose() * &om - v_eta.transpose() * &w)
            + &w * (om.dot(&(&k_eta * &slope)) - om.dot(&k_x));
        if res.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("residual at node {i}")));
        }
        xs.push(x);
        scales.push(1.0 + w2);
        residuals.push(res);
    }
    Ok(ResidualField::new(xs, u.grid().h(), residuals, scales))
}
