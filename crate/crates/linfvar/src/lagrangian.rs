//! Radial integrands `L(x, eta, P) = H(x, eta, 1/2 |P - V(x, eta)|^2)`.
//!
//! Models are bundles of derivative evaluators rather than symbolic
//! expressions; a finite-difference consistency audit (part of
//! [`check_hypotheses`]) catches wrong derivatives. The structural hypotheses
//! quantify over unbounded sets, so the audit samples a user box with a seeded
//! quasi-random sequence and reports worst margins instead of proving them.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

type ScalarEval = Arc<dyn Fn(f64, &DVector<f64>, f64) -> f64 + Send + Sync>;
type VectorEval = Arc<dyn Fn(f64, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
type MatrixEval = Arc<dyn Fn(f64, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
type FieldVec = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type FieldMat = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type FieldCurvature = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// First-order vector field `V(x, eta)` with its partial derivatives.
///
/// `v_eta` is the Jacobian with entries `d V_g / d eta_a` at `(g, a)`. The
/// optional `v_eta_eta` evaluator returns the curvature contracted against a
/// direction `w`, `(a, b) -> sum_g w_g d^2 V_g / d eta_a d eta_b`; it defaults
/// to zero and is only consumed by the exact energy Hessian.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    name: String,
    v: FieldVec,
    v_x: FieldVec,
    v_eta: FieldMat,
    v_eta_eta: Option<FieldCurvature>,
}

impl VectorField {
    pub fn new(dim: usize, name: &str, v: FieldVec, v_x: FieldVec, v_eta: FieldMat) -> Self {
        Self {
            dim,
            name: name.to_string(),
            v,
            v_x,
            v_eta,
            v_eta_eta: None,
        }
    }

    pub fn with_curvature(mut self, v_eta_eta: FieldCurvature) -> Self {
        self.v_eta_eta = Some(v_eta_eta);
        self
    }

    /// The zero field; trajectories are constants.
    pub fn zero(dim: usize) -> Self {
        Self::new(
            dim,
            "zero",
            Arc::new(move |_, _| DVector::zeros(dim)),
            Arc::new(move |_, _| DVector::zeros(dim)),
            Arc::new(move |_, _| DMatrix::zeros(dim, dim)),
        )
    }

    /// Planar rotation `V(x, eta) = (eta_2, -eta_1)`; trajectories are circles.
    pub fn rotation() -> Self {
        Self::new(
            2,
            "rotation",
            Arc::new(|_, eta: &DVector<f64>| DVector::from_vec(vec![eta[1], -eta[0]])),
            Arc::new(|_, _| DVector::zeros(2)),
            Arc::new(|_, _| {
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
            }),
        )
    }

    /// Affine field `V(x, eta) = A eta + c + d x`.
    pub fn affine(matrix: DMatrix<f64>, offset: DVector<f64>, drift: DVector<f64>) -> Result<Self> {
        let dim = offset.len();
        if matrix.nrows() != dim || matrix.ncols() != dim || drift.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: matrix.nrows().max(drift.len()),
            });
        }
        let m = matrix.clone();
        let c = offset.clone();
        let d = drift.clone();
        let dx = drift;
        Ok(Self::new(
            dim,
            "affine",
            Arc::new(move |x, eta| &m * eta + &c + &d * x),
            Arc::new(move |_, _| dx.clone()),
            Arc::new(move |_, _| matrix.clone()),
        ))
    }

    /// A smooth x-only field (no eta dependence); with consistent endpoint
    /// data its integral is the exact pointwise minimiser of every energy.
    pub fn x_only(dim: usize, name: &str, f: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>, fx: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>) -> Self {
        let g = f.clone();
        Self::new(
            dim,
            name,
            Arc::new(move |x, _| g(x)),
            Arc::new(move |x, _| fx(x)),
            Arc::new(move |_, _| DMatrix::zeros(dim, dim)),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn v(&self, x: f64, eta: &DVector<f64>) -> DVector<f64> {
        (self.v)(x, eta)
    }

    pub fn v_x(&self, x: f64, eta: &DVector<f64>) -> DVector<f64> {
        (self.v_x)(x, eta)
    }

    pub fn v_eta(&self, x: f64, eta: &DVector<f64>) -> DMatrix<f64> {
        (self.v_eta)(x, eta)
    }

    /// Curvature contracted with `w`; zero unless supplied.
    pub fn v_eta_eta(&self, x: f64, eta: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
        match &self.v_eta_eta {
            Some(f) => f(x, eta, w),
            None => DMatrix::zeros(self.dim, self.dim),
        }
    }
}

/// Constants of the structural hypotheses plus the growth majorant `C(.)`.
#[derive(Clone)]
pub struct HypothesisConstants {
    pub c0: f64,
    pub alpha: f64,
    /// Exponent `M` in the second-derivative growth bound.
    pub growth_exponent: u32,
    growth: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub growth_desc: String,
}

impl HypothesisConstants {
    pub fn new(
        c0: f64,
        alpha: f64,
        growth_exponent: u32,
        growth: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        growth_desc: &str,
    ) -> Self {
        Self {
            c0,
            alpha,
            growth_exponent,
            growth,
            growth_desc: growth_desc.to_string(),
        }
    }

    /// Majorant `C(s)` evaluated at `s = |eta|`.
    pub fn growth(&self, s: f64) -> f64 {
        (self.growth)(s)
    }
}

/// A radial integrand as a bundle of evaluators for the profile `H`, the
/// field `V` and every partial the assembled operators need.
///
/// The optional `h_eta_eta` block (and the field's curvature) only feed the
/// exact energy Hessian; omitting them leaves gradients and residuals exact
/// and degrades Newton to a Gauss-Newton step in the missing curvature.
#[derive(Clone)]
pub struct LagrangianModel {
    name: String,
    dim: usize,
    h: ScalarEval,
    h_p: ScalarEval,
    h_pp: ScalarEval,
    h_x: ScalarEval,
    h_eta: VectorEval,
    h_px: ScalarEval,
    h_peta: VectorEval,
    h_eta_eta: Option<MatrixEval>,
    field: VectorField,
    constants: HypothesisConstants,
}

#[allow(clippy::too_many_arguments)]
impl LagrangianModel {
    pub fn new(
        name: &str,
        dim: usize,
        h: ScalarEval,
        h_p: ScalarEval,
        h_pp: ScalarEval,
        h_x: ScalarEval,
        h_eta: VectorEval,
        h_px: ScalarEval,
        h_peta: VectorEval,
        field: VectorField,
        constants: HypothesisConstants,
    ) -> Self {
        Self {
            name: name.to_string(),
            dim,
            h,
            h_p,
            h_pp,
            h_x,
            h_eta,
            h_px,
            h_peta,
            h_eta_eta: None,
            field,
            constants,
        }
    }

    pub fn with_eta_curvature(mut self, h_eta_eta: MatrixEval) -> Self {
        self.h_eta_eta = Some(h_eta_eta);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn field(&self) -> &VectorField {
        &self.field
    }

    pub fn constants(&self) -> &HypothesisConstants {
        &self.constants
    }

    pub fn h(&self, x: f64, eta: &DVector<f64>, p: f64) -> f64 {
        (self.h)(x, eta, p)
    }

    pub fn h_p(&self, x: f64, eta: &DVector<f64>, p: f64) -> f64 {
        (self.h_p)(x, eta, p)
    }

    pub fn h_pp(&self, x: f64, eta: &DVector<f64>, p: f64) -> f64 {
        (self.h_pp)(x, eta, p)
    }

    pub fn h_x(&self, x: f64, eta: &DVector<f64>, p: f64) -> f64 {
        (self.h_x)(x, eta, p)
    }

    pub fn h_eta(&self, x: f64, eta: &DVector<f64>, p: f64) -> DVector<f64> {
        (self.h_eta)(x, eta, p)
    }

    pub fn h_px(&self, x: f64, eta: &DVector<f64>, p: f64) -> f64 {
        (self.h_px)(x, eta, p)
    }

    pub fn h_peta(&self, x: f64, eta: &DVector<f64>, p: f64) -> DVector<f64> {
        (self.h_peta)(x, eta, p)
    }

    /// Second eta-derivative block; zero unless supplied.
    pub fn h_eta_eta(&self, x: f64, eta: &DVector<f64>, p: f64) -> DMatrix<f64> {
        match &self.h_eta_eta {
            Some(f) => f(x, eta, p),
            None => DMatrix::zeros(self.dim, self.dim),
        }
    }

    pub fn v(&self, x: f64, eta: &DVector<f64>) -> DVector<f64> {
        self.field.v(x, eta)
    }

    pub fn v_x(&self, x: f64, eta: &DVector<f64>) -> DVector<f64> {
        self.field.v_x(x, eta)
    }

    pub fn v_eta(&self, x: f64, eta: &DVector<f64>) -> DMatrix<f64> {
        self.field.v_eta(x, eta)
    }

    /// Radial argument `p = 1/2 |P - V(x, eta)|^2`.
    pub fn radial(&self, x: f64, eta: &DVector<f64>, slope: &DVector<f64>) -> f64 {
        let w = slope - self.v(x, eta);
        0.5 * w.norm_squared()
    }

    /// Full integrand `L(x, eta, P)`.
    pub fn eval_l(&self, x: f64, eta: &DVector<f64>, slope: &DVector<f64>) -> Result<f64> {
        let p = self.radial(x, eta, slope);
        let val = self.h(x, eta, p);
        if !val.is_finite() || !p.is_finite() {
            return Err(Error::ModelEval {
                x,
                eta: eta.iter().copied().collect(),
                p,
            });
        }
        Ok(val)
    }
}

/// Integrand `1 + p`: the squared-slope model, slope-only and convex.
pub fn builtin_power(dim: usize) -> LagrangianModel {
    LagrangianModel::new(
        "power",
        dim,
        Arc::new(|_, _, p| 1.0 + p),
        Arc::new(|_, _, _| 1.0),
        Arc::new(|_, _, _| 0.0),
        Arc::new(|_, _, _| 0.0),
        Arc::new(move |_, _: &DVector<f64>, _| DVector::zeros(dim)),
        Arc::new(|_, _, _| 0.0),
        Arc::new(move |_, _: &DVector<f64>, _| DVector::zeros(dim)),
        VectorField::zero(dim),
        HypothesisConstants::new(0.5, 0.5, 1, Arc::new(|s| 2.0 + s), "2 + s"),
    )
}

/// Integrand `1 + sin^2(x) + 2 p`: the classical x-dependent example with
/// non-unique limiting minimisers. The additive 1 keeps `H >= 1`.
pub fn builtin_yu(dim: usize) -> LagrangianModel {
    LagrangianModel::new(
        "yu",
        dim,
        Arc::new(|x: f64, _, p| 1.0 + x.sin().powi(2) + 2.0 * p),
        Arc::new(|_, _, _| 2.0),
        Arc::new(|_, _, _| 0.0),
        Arc::new(|x: f64, _, _| (2.0 * x).sin()),
        Arc::new(move |_, _: &DVector<f64>, _| DVector::zeros(dim)),
        Arc::new(|_, _, _| 0.0),
        Arc::new(move |_, _: &DVector<f64>, _| DVector::zeros(dim)),
        VectorField::zero(dim),
        HypothesisConstants::new(0.5, 0.5, 1, Arc::new(|s| 4.0 + s), "4 + s"),
    )
}

/// Measurement series `k(x)`: sampled values with linear interpolation and a
/// piecewise-constant slope from the per-segment differences.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries {
    xs: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl MeasurementSeries {
    pub fn new(xs: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != values.len() {
            return Err(Error::NodeCountMismatch {
                expected: xs.len().max(2),
                got: values.len(),
            });
        }
        let dim = values[0].len();
        for (i, w) in xs.windows(2).enumerate() {
            if !(w[0] < w[1]) {
                return Err(Error::Schema {
                    path: "measurements".into(),
                    line: i + 2,
                    msg: format!("x values must be strictly increasing ({} then {})", w[0], w[1]),
                });
            }
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            if !xs[i].is_finite() || v.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("measurement sample {i}")));
            }
        }
        Ok(Self { xs, values })
    }

    pub fn obs_dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    /// Index of the segment containing `x` (clamped to the first/last one).
    fn segment(&self, x: f64) -> usize {
        let n = self.xs.len();
        let i = self.xs.partition_point(|&s| s <= x);
        i.clamp(1, n - 1) - 1
    }

    /// Linear interpolation between samples, clamped at the ends.
    pub fn eval(&self, x: f64) -> DVector<f64> {
        let s = self.segment(x);
        let (x0, x1) = (self.xs[s], self.xs[s + 1]);
        let t = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
        &self.values[s] * (1.0 - t) + &self.values[s + 1] * t
    }

    /// Per-segment slope, the piecewise-constant derivative of the series.
    pub fn slope(&self, x: f64) -> DVector<f64> {
        let s = self.segment(x);
        (&self.values[s + 1] - &self.values[s]) / (self.xs[s + 1] - self.xs[s])
    }

    /// Checks that the samples cover the interval.
    pub fn check_coverage(&self, interval: &crate::grid::Interval) -> Result<()> {
        let (lo, hi) = self.x_range();
        let tol = 1e-9 * (1.0 + interval.length());
        if lo > interval.a() + tol || hi < interval.b() - tol {
            return Err(Error::CoverageGap {
                lo,
                hi,
                a: interval.a(),
                b: interval.b(),
            });
        }
        Ok(())
    }

    /// Parses CSV `x,k_1,...,k_M` with strictly increasing `x`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let pstr = path.display().to_string();
        let schema = |line: usize, msg: String| Error::Schema {
            path: pstr.clone(),
            line,
            msg,
        };
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut xs = Vec::new();
        let mut vals: Vec<DVector<f64>> = Vec::new();
        let mut dim = 0usize;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if idx == 0 {
                let cols: Vec<&str> = line.trim().split(',').collect();
                if cols.first() != Some(&"x") || cols.len() < 2 {
                    return Err(schema(lineno, format!("bad header {line:?}")));
                }
                dim = cols.len() - 1;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(schema(
                    lineno,
                    format!("expected {} fields, got {}", dim + 1, fields.len()),
                ));
            }
            let mut nums = Vec::with_capacity(dim + 1);
            for s in &fields {
                nums.push(
                    s.parse::<f64>()
                        .map_err(|e| schema(lineno, format!("bad number {s:?}: {e}")))?,
                );
            }
            if let Some(&prev) = xs.last() {
                if nums[0] <= prev {
                    return Err(schema(
                        lineno,
                        format!("x values must be strictly increasing ({prev} then {})", nums[0]),
                    ));
                }
            }
            xs.push(nums[0]);
            vals.push(DVector::from_vec(nums[1..].to_vec()));
        }
        Self::new(xs, vals)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x");
        for c in 1..=self.obs_dim() {
            out.push_str(&format!(",k_{c}"));
        }
        out.push('\n');
        for (x, v) in self.xs.iter().zip(&self.values) {
            out.push_str(&crate::fmt_full(*x));
            for c in 0..self.obs_dim() {
                out.push(',');
                out.push_str(&crate::fmt_full(v[c]));
            }
            out.push('\n');
        }
        out
    }
}

/// Observation operator `K` with its Jacobian `K_eta`.
#[derive(Clone)]
pub struct ObservationOperator {
    state_dim: usize,
    obs_dim: usize,
    name: String,
    k: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    k_eta: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
}

impl ObservationOperator {
    pub fn new(
        state_dim: usize,
        obs_dim: usize,
        name: &str,
        k: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
        k_eta: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    ) -> Self {
        Self {
            state_dim,
            obs_dim,
            name: name.to_string(),
            k,
            k_eta,
        }
    }

    /// Observe the full state.
    pub fn identity(dim: usize) -> Self {
        Self::new(
            dim,
            dim,
            "identity",
            Arc::new(|eta: &DVector<f64>| eta.clone()),
            Arc::new(move |_| DMatrix::identity(dim, dim)),
        )
    }

    /// Observe a single component of the state.
    pub fn component(dim: usize, index: usize) -> Self {
        Self::new(
            dim,
            1,
            "component",
            Arc::new(move |eta: &DVector<f64>| DVector::from_vec(vec![eta[index]])),
            Arc::new(move |_| {
                let mut m = DMatrix::zeros(1, dim);
                m[(0, index)] = 1.0;
                m
            }),
        )
    }

    /// General linear observation `K(eta) = A eta`.
    pub fn linear(matrix: DMatrix<f64>) -> Self {
        let (obs_dim, state_dim) = (matrix.nrows(), matrix.ncols());
        let m = matrix.clone();
        Self::new(
            state_dim,
            obs_dim,
            "linear",
            Arc::new(move |eta: &DVector<f64>| &m * eta),
            Arc::new(move |_| matrix.clone()),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn k(&self, eta: &DVector<f64>) -> DVector<f64> {
        (self.k)(eta)
    }

    pub fn k_eta(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        (self.k_eta)(eta)
    }
}

/// Observation operator together with a measurement series covering the
/// domain; everything the misfit integrand needs from the data side.
#[derive(Clone)]
pub struct ObservationModel {
    operator: ObservationOperator,
    series: MeasurementSeries,
}

impl ObservationModel {
    pub fn new(operator: ObservationOperator, series: MeasurementSeries) -> Result<Self> {
        if series.obs_dim() != operator.obs_dim() {
            return Err(Error::DimensionMismatch {
                expected: operator.obs_dim(),
                got: series.obs_dim(),
            });
        }
        Ok(Self { operator, series })
    }

    pub fn operator(&self) -> &ObservationOperator {
        &self.operator
    }

    pub fn series(&self) -> &MeasurementSeries {
        &self.series
    }

    pub fn k(&self, eta: &DVector<f64>) -> DVector<f64> {
        self.operator.k(eta)
    }

    pub fn k_eta(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        self.operator.k_eta(eta)
    }

    pub fn measured(&self, x: f64) -> DVector<f64> {
        self.series.eval(x)
    }

    pub fn measured_slope(&self, x: f64) -> DVector<f64> {
        self.series.slope(x)
    }
}

/// Misfit integrand `1 + 1/2 |k(x) - K(eta)|^2 + p` over the supplied
/// dynamics field. The observation block of the eta-curvature uses the
/// Jacobian square `K_eta^T K_eta`, exact for linear observation operators.
pub fn builtin_data_assimilation(
    obs: ObservationModel,
    field: VectorField,
) -> Result<LagrangianModel> {
    let dim = field.dim();
    if obs.operator().state_dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: obs.operator().state_dim(),
        });
    }
    let k_max = obs
        .series()
        .samples()
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max);
    let kx_max = obs
        .series()
        .xs()
        .windows(2)
        .map(|w| obs.series().slope(0.5 * (w[0] + w[1])).norm())
        .fold(0.0, f64::max);
    let kappa = obs.k_eta(&DVector::zeros(dim)).norm();
    let c_growth = (1.0 + k_max + kx_max) * (1.0 + kappa) * (1.0 + kappa + k_max);
    let growth_desc = format!("{c_growth:.3} * (1 + s)");

    let o = obs.clone();
    let h = Arc::new(move |x: f64, eta: &DVector<f64>, p: f64| {
        let mis = o.measured(x) - o.k(eta);
        1.0 + 0.5 * mis.norm_squared() + p
    });
    let o = obs.clone();
    let h_x = Arc::new(move |x: f64, eta: &DVector<f64>, _p: f64| {
        let mis = o.measured(x) - o.k(eta);
        mis.dot(&o.measured_slope(x))
    });
    let o = obs.clone();
    let h_eta = Arc::new(move |x: f64, eta: &DVector<f64>, _p: f64| {
        let mis = o.measured(x) - o.k(eta);
        -(o.k_eta(eta).transpose() * mis)
    });
    let o = obs.clone();
    let h_eta_eta = Arc::new(move |_x: f64, eta: &DVector<f64>, _p: f64| {
        let j = o.k_eta(eta);
        j.transpose() * j
    });

    Ok(LagrangianModel::new(
        "data_assimilation",
        dim,
        h,
        Arc::new(|_, _, _| 1.0),
        Arc::new(|_, _, _| 0.0),
        h_x,
        h_eta,
        Arc::new(|_, _, _| 0.0),
        Arc::new(move |_, _: &DVector<f64>, _| DVector::zeros(dim)),
        field,
        HypothesisConstants::new(
            0.25,
            0.5,
            1,
            Arc::new(move |s| c_growth * (1.0 + s)),
            &growth_desc,
        ),
    )
    .with_eta_curvature(h_eta_eta))
}

/// Sampling box for the hypothesis audit: `x` in a range, `eta` in a centred
/// cube, `p` in a nonnegative range.
#[derive(Debug, Clone, Copy)]
pub struct HypothesisBox {
    pub x: (f64, f64),
    pub eta_halfwidth: f64,
    pub p: (f64, f64),
}

impl HypothesisBox {
    pub fn new(x: (f64, f64), eta_halfwidth: f64, p: (f64, f64)) -> Self {
        Self {
            x,
            eta_halfwidth,
            p: (p.0.max(0.0), p.1.max(0.0)),
        }
    }
}

/// One audited hypothesis line: worst sampled margin and where it occurred.
/// Nonnegative margins mean the line held at every sample.
#[derive(Debug, Clone)]
pub struct HypothesisLine {
    pub id: String,
    pub worst_margin: f64,
    pub witness_x: f64,
    pub witness_eta: Vec<f64>,
    pub witness_p: f64,
}

/// Outcome of the sampled hypothesis audit.
#[derive(Debug, Clone)]
pub struct HypothesisReport {
    pub lines: Vec<HypothesisLine>,
    pub pass: bool,
    pub samples: usize,
    pub seed: u64,
}

impl HypothesisReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "hypothesis audit: {} ({} samples, seed {})\n",
            if self.pass { "PASS" } else { "FAIL" },
            self.samples,
            self.seed
        ));
        for l in &self.lines {
            out.push_str(&format!(
                "  [{}] {:<40} worst margin {:+.6e} at x={:.6}, eta={:?}, p={:.6}\n",
                if l.worst_margin >= -1e-12 { "ok" } else { "VIOLATED" },
                l.id,
                l.worst_margin,
                l.witness_x,
                l.witness_eta,
                l.witness_p
            ));
        }
        out
    }
}

const HALTON_BASES: [u64; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

struct MarginTracker {
    id: &'static str,
    worst: f64,
    witness: (f64, Vec<f64>, f64),
}

impl MarginTracker {
    fn new(id: &'static str) -> Self {
        Self {
            id,
            worst: f64::INFINITY,
            witness: (f64::NAN, Vec::new(), f64::NAN),
        }
    }

    fn observe(&mut self, margin: f64, x: f64, eta: &DVector<f64>, p: f64) {
        if margin < self.worst {
            self.worst = margin;
            self.witness = (x, eta.iter().copied().collect(), p);
        }
    }

    fn into_line(self) -> HypothesisLine {
        HypothesisLine {
            id: self.id.to_string(),
            worst_margin: self.worst,
            witness_x: self.witness.0,
            witness_eta: self.witness.1,
            witness_p: self.witness.2,
        }
    }
}

/// Audits the structural hypotheses over a box with a seeded quasi-random
/// sample and cross-checks every derivative evaluator against central finite
/// differences. Violations are reported, not thrown.
pub fn check_hypotheses(
    model: &LagrangianModel,
    sample_box: &HypothesisBox,
    samples: usize,
    seed: u64,
) -> HypothesisReport {
    let n = model.dim();
    let c = model.constants();
    let offset = 101 + (seed % 100_003);

    let mut floor = MarginTracker::new("H >= 1");
    let mut slope_lo = MarginTracker::new("H_p >= c0");
    let mut slope_hi = MarginTracker::new("H_p <= C(|eta|)");
    let mut ellipticity = MarginTracker::new("2 p H_pp + H_p >= c0");
    let mut first_growth = MarginTracker::new("|H_x| + |H_eta| <= C(|eta|)(1 + p)");
    let mut second_growth = MarginTracker::new("|H_pp| + |H_peta| + |H_px| <= C(|eta|)(1 + p^M)");
    let mut field_growth = MarginTracker::new("|V| <= (1/c0)(1 + |eta|^alpha)");
    let mut fd_h = MarginTracker::new("gradients of H match finite differences (tol 1e-5)");
    let mut fd_hp = MarginTracker::new("gradients of H_p match finite differences (tol 1e-5)");
    let mut fd_v = MarginTracker::new("gradients of V match finite differences (tol 1e-5)");

    let fd_samples = samples.min(200);

    for s in 0..samples {
        let idx = offset + s as u64;
        let x = sample_box.x.0 + halton(idx, HALTON_BASES[0]) * (sample_box.x.1 - sample_box.x.0);
        let p = sample_box.p.0 + halton(idx, HALTON_BASES[1]) * (sample_box.p.1 - sample_box.p.0);
        let eta = DVector::from_iterator(
            n,
            (0..n).map(|k| {
                let b = HALTON_BASES[(2 + k) % HALTON_BASES.len()];
                sample_box.eta_halfwidth * (2.0 * halton(idx, b) - 1.0)
            }),
        );
        let cg = c.growth(eta.norm());

        let h = model.h(x, &eta, p);
        let hp = model.h_p(x, &eta, p);
        let hpp = model.h_pp(x, &eta, p);
        let hx = model.h_x(x, &eta, p);
        let heta = model.h_eta(x, &eta, p);
        let hpx = model.h_px(x, &eta, p);
        let hpeta = model.h_peta(x, &eta, p);
        let v = model.v(x, &eta);

        floor.observe(h - 1.0, x, &eta, p);
        slope_lo.observe(hp - c.c0, x, &eta, p);
        slope_hi.observe(cg - hp, x, &eta, p);
        ellipticity.observe(2.0 * hpp * p + hp - c.c0, x, &eta, p);
        first_growth.observe(cg * (1.0 + p) - (hx.abs() + heta.norm()), x, &eta, p);
        second_growth.observe(
            cg * (1.0 + p.powi(c.growth_exponent as i32)) - (hpp.abs() + hpeta.norm() + hpx.abs()),
            x,
            &eta,
            p,
        );
        field_growth.observe(
            (1.0 / c.c0) * (1.0 + eta.norm().powf(c.alpha)) - v.norm(),
            x,
            &eta,
            p,
        );

        if s < fd_samples {
            let tol = 1e-5;
            // safeguarded central difference: two step sizes; if they
            // disagree the point straddles a kink (piecewise-linear
            // measurements produce those) and the direction is skipped
            let fd_margin = |an: f64, f: &dyn Fn(f64) -> f64, dt: f64| -> Option<f64> {
                let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                let fd1 = (f(dt) - f(-dt)) / (2.0 * dt);
                let fd2 = (f(0.5 * dt) - f(-0.5 * dt)) / dt;
                if rel(fd1, fd2) > 1e-6 {
                    return None;
                }
                Some(tol - rel(an, fd2))
            };

            // profile H: p, x and eta directions (p is shifted so the central
            // stencil stays in [0, inf))
            let dp = 1e-5 * (1.0 + p.abs());
            let pb = p.max(dp);
            if let Some(m) = fd_margin(model.h_p(x, &eta, pb), &|d| model.h(x, &eta, pb + d), dp) {
                fd_h.observe(m, x, &eta, pb);
            }
            let dx = 1e-5 * (1.0 + x.abs());
            if let Some(m) = fd_margin(hx, &|d| model.h(x + d, &eta, p), dx) {
                fd_h.observe(m, x, &eta, p);
            }
            let de = 1e-5 * (1.0 + eta.amax());
            for k in 0..n {
                let shifted = |d: f64| {
                    let mut e = eta.clone();
                    e[k] += d;
                    e
                };
                if let Some(m) = fd_margin(heta[k], &|d| model.h(x, &shifted(d), p), de) {
                    fd_h.observe(m, x, &eta, p);
                }
                if let Some(m) = fd_margin(hpeta[k], &|d| model.h_p(x, &shifted(d), p), de) {
                    fd_hp.observe(m, x, &eta, p);
                }
            }

            // second derivatives through H_p
            if let Some(m) =
                fd_margin(model.h_pp(x, &eta, pb), &|d| model.h_p(x, &eta, pb + d), dp)
            {
                fd_hp.observe(m, x, &eta, pb);
            }
            if let Some(m) = fd_margin(hpx, &|d| model.h_p(x + d, &eta, p), dx) {
                fd_hp.observe(m, x, &eta, p);
            }

            // field V: x direction and the Jacobian columns
            let vx = model.v_x(x, &eta);
            let veta = model.v_eta(x, &eta);
            for g in 0..n {
                if let Some(m) = fd_margin(vx[g], &|d| model.v(x + d, &eta)[g], dx) {
                    fd_v.observe(m, x, &eta, p);
                }
                for k in 0..n {
                    let col = |d: f64| {
                        let mut e = eta.clone();
                        e[k] += d;
                        model.v(x, &e)[g]
                    };
                    if let Some(m) = fd_margin(veta[(g, k)], &col, de) {
                        fd_v.observe(m, x, &eta, p);
                    }
                }
            }
        }
    }

    let lines: Vec<HypothesisLine> = vec![
        floor, slope_lo, slope_hi, ellipticity, first_growth, second_growth, field_growth, fd_h,
        fd_hp, fd_v,
    ]
    .into_iter()
    .map(MarginTracker::into_line)
    .collect();
    let pass = lines.iter().all(|l| l.worst_margin >= -1e-12);
    HypothesisReport {
        lines,
        pass,
        samples,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecd(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    fn default_box() -> HypothesisBox {
        HypothesisBox::new((0.0, 1.0), 10.0, (0.0, 100.0))
    }

    #[test]
    fn eval_l_examples() {
        let power = builtin_power(2);
        // H = 1 + p, V = 0, P = (2, 0): 1 + 1/2 * 4 = 3
        let val = power
            .eval_l(0.3, &vecd(&[0.0, 0.0]), &vecd(&[2.0, 0.0]))
            .unwrap();
        assert_eq!(val, 3.0);

        // P = V makes the radial argument vanish for any model
        let yu = builtin_yu(1);
        let at_field = yu.eval_l(0.7, &vecd(&[3.0]), &vecd(&[0.0])).unwrap();
        assert_eq!(at_field, yu.h(0.7, &vecd(&[3.0]), 0.0));

        // yu at x = pi/2, eta = 0, P = 1: 1 + 1 + 2 * (1/2) = 3
        let v = yu
            .eval_l(std::f64::consts::FRAC_PI_2, &vecd(&[0.0]), &vecd(&[1.0]))
            .unwrap();
        assert!((v - 3.0).abs() < 1e-12);

        // and at x = 0, P = 0 the integrand is exactly 1
        assert_eq!(yu.eval_l(0.0, &vecd(&[0.0]), &vecd(&[0.0])).unwrap(), 1.0);
    }

    #[test]
    fn eval_l_reports_non_finite_models() {
        let mut bad = builtin_power(1);
        bad.h = Arc::new(|_, _, _| f64::NAN);
        assert!(matches!(
            bad.eval_l(0.0, &vecd(&[0.0]), &vecd(&[1.0])),
            Err(Error::ModelEval { .. })
        ));
    }

    #[test]
    fn yu_derivatives() {
        let yu = builtin_yu(1);
        let eta = vecd(&[0.4]);
        for &x in &[0.1, 0.9, 2.3] {
            assert!((yu.h_x(x, &eta, 1.0) - (2.0 * x).sin()).abs() < 1e-14);
        }
        assert_eq!(yu.h_p(0.2, &eta, 5.0), 2.0);
        assert_eq!(yu.h_pp(0.2, &eta, 5.0), 0.0);
    }

    #[test]
    fn power_passes_and_quadratic_slope_fails() {
        let power = builtin_power(2);
        let report = check_hypotheses(&power, &default_box(), 500, 7);
        assert!(report.pass, "{}", report.render());

        // H = 1 + p^2 has H_p(., ., 0) = 0 < c0: the slope lower bound fails
        // with a witness near p = 0
        let bad = LagrangianModel::new(
            "quadratic",
            1,
            Arc::new(|_, _, p| 1.0 + p * p),
            Arc::new(|_, _, p| 2.0 * p),
            Arc::new(|_, _, _| 2.0),
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _: &DVector<f64>, _| DVector::zeros(1)),
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _: &DVector<f64>, _| DVector::zeros(1)),
            VectorField::zero(1),
            HypothesisConstants::new(0.5, 0.5, 1, Arc::new(|s| 300.0 + s), "300 + s"),
        );
        let report = check_hypotheses(&bad, &default_box(), 500, 7);
        assert!(!report.pass);
        let line = report
            .lines
            .iter()
            .find(|l| l.id.starts_with("H_p >= c0"))
            .unwrap();
        assert!(line.worst_margin < 0.0);
        assert!(line.witness_p < 0.25, "witness should sit near p = 0");
    }

    #[test]
    fn yu_passes_hypotheses() {
        let yu = builtin_yu(1);
        let report = check_hypotheses(&yu, &default_box(), 1000, 3);
        assert!(report.pass, "{}", report.render());
    }

    #[test]
    fn derivative_audit_catches_wrong_derivative() {
        let mut wrong = builtin_yu(1);
        wrong.h_x = Arc::new(|x: f64, _, _| x.cos());
        let report = check_hypotheses(&wrong, &default_box(), 200, 1);
        assert!(!report.pass);
        let line = report
            .lines
            .iter()
            .find(|l| l.id.starts_with("gradients of H match"))
            .unwrap();
        assert!(line.worst_margin < 0.0);
    }

    #[test]
    fn measurement_series_interpolation() {
        let s = MeasurementSeries::new(
            vec![0.0, 0.5, 1.0],
            vec![vecd(&[0.0]), vecd(&[1.0]), vecd(&[0.0])],
        )
        .unwrap();
        assert_eq!(s.eval(0.25)[0], 0.5);
        assert_eq!(s.eval(0.75)[0], 0.5);
        assert_eq!(s.slope(0.25)[0], 2.0);
        assert_eq!(s.slope(0.75)[0], -2.0);
        // slope uses the segment containing x; at the last node it is the
        // final segment's
        assert_eq!(s.slope(1.0)[0], -2.0);

        assert!(MeasurementSeries::new(
            vec![0.0, 0.5, 0.4],
            vec![vecd(&[0.0]), vecd(&[1.0]), vecd(&[0.0])],
        )
        .is_err());
    }

    #[test]
    fn data_assimilation_model_values() {
        // N = 1, K identity, k = 0: H(x, 2, p) = 1 + 2 + p and H_eta = 2
        let series =
            MeasurementSeries::new(vec![0.0, 1.0], vec![vecd(&[0.0]), vecd(&[0.0])]).unwrap();
        let obs = ObservationModel::new(ObservationOperator::identity(1), series).unwrap();
        let model = builtin_data_assimilation(obs, VectorField::zero(1)).unwrap();
        let eta = vecd(&[2.0]);
        assert!((model.h(0.3, &eta, 1.5) - 4.5).abs() < 1e-14);
        assert!((model.h_eta(0.3, &eta, 0.0)[0] - 2.0).abs() < 1e-14);
        assert_eq!(model.h_p(0.3, &eta, 0.0), 1.0);
        assert_eq!(model.h_pp(0.3, &eta, 0.0), 0.0);

        // zero misfit along the data reduces H to 1 + p
        let series2 =
            MeasurementSeries::new(vec![0.0, 1.0], vec![vecd(&[0.7]), vecd(&[0.7])]).unwrap();
        let obs2 = ObservationModel::new(ObservationOperator::identity(1), series2).unwrap();
        let model2 = builtin_data_assimilation(obs2, VectorField::zero(1)).unwrap();
        assert!((model2.h(0.5, &vecd(&[0.7]), 2.0) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn data_assimilation_passes_on_bounded_box() {
        let xs: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let vals: Vec<DVector<f64>> = xs.iter().map(|&x| vecd(&[(2.0 * x).sin()])).collect();
        let series = MeasurementSeries::new(xs, vals).unwrap();
        let obs = ObservationModel::new(ObservationOperator::component(2, 0), series).unwrap();
        let model = builtin_data_assimilation(obs, VectorField::rotation()).unwrap();
        let b = HypothesisBox::new((0.0, 1.0), 5.0, (0.0, 50.0));
        let report = check_hypotheses(&model, &b, 800, 11);
        assert!(report.pass, "{}", report.render());
    }

    #[test]
    fn radial_argument_identity() {
        let yu = builtin_yu(2);
        let eta = vecd(&[1.0, -2.0]);
        let v = yu.v(0.4, &eta);
        assert_eq!(yu.eval_l(0.4, &eta, &v).unwrap(), yu.h(0.4, &eta, 0.0));
    }

    #[test]
    fn rotation_field_shape() {
        let f = VectorField::rotation();
        let v = f.v(0.0, &vecd(&[1.0, 0.0]));
        assert_eq!(v, vecd(&[0.0, -1.0]));
        let j = f.v_eta(0.0, &vecd(&[3.0, 4.0]));
        assert_eq!(j[(0, 1)], 1.0);
        assert_eq!(j[(1, 0)], -1.0);
    }
}
