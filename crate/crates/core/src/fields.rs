//! Volatility and drift catalog.
//!
//! Every volatility field is `sigma_i(r) = phi_i(r) * s_i` where `s_i` is a
//! fixed profile (already multiplied by the long-rate taper when one is
//! active) and `phi_i` is either `1` or a smooth gate `g(l(r))` of a linear
//! functional. This structure gives closed-form first and second directional
//! derivatives for every catalog model; finite differences are kept as an
//! independent cross-check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{apply_generator, functional_row, Curve, GridSpec, LinearFunctional};
use crate::shapes::CurveSpec;

/// Smooth scalar gate `g` with bounded derivatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GateFn {
    /// Affine `slope z + intercept` near the centre of `[lo, hi]`, saturating
    /// smoothly (tanh) at both bounds.
    AffineClamped {
        slope: f64,
        intercept: f64,
        lo: f64,
        hi: f64,
    },
    /// `offset + amplitude / (1 + exp(-scale (z - center)))`.
    Logistic {
        scale: f64,
        center: f64,
        amplitude: f64,
        offset: f64,
    },
}

impl GateFn {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GateFn::AffineClamped {
                slope,
                intercept,
                lo,
                hi,
            } => {
                if !(lo.is_finite() && hi.is_finite()) {
                    return Err(Error::InvalidModel(
                        "affine gate needs finite clamp bounds".into(),
                    ));
                }
                if !(lo < hi) || !slope.is_finite() || !intercept.is_finite() {
                    return Err(Error::InvalidModel(format!(
                        "affine gate: need lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
            GateFn::Logistic {
                scale,
                center,
                amplitude,
                offset,
            } => {
                if ![scale, center, amplitude, offset]
                    .iter()
                    .all(|v| v.is_finite())
                {
                    return Err(Error::InvalidModel(
                        "logistic gate parameters must be finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `(g, g', g'')` at `z`.
    pub fn eval(&self, z: f64) -> (f64, f64, f64) {
        match *self {
            GateFn::AffineClamped {
                slope,
                intercept,
                lo,
                hi,
            } => {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                let t = ((slope * z + intercept - mid) / half).tanh();
                let sech2 = 1.0 - t * t;
                (
                    mid + half * t,
                    slope * sech2,
                    -2.0 * slope * slope / half * t * sech2,
                )
            }
            GateFn::Logistic {
                scale,
                center,
                amplitude,
                offset,
            } => {
                let s = 1.0 / (1.0 + (-scale * (z - center)).exp());
                let ds = s * (1.0 - s);
                (
                    offset + amplitude * s,
                    amplitude * scale * ds,
                    amplitude * scale * scale * ds * (1.0 - 2.0 * s),
                )
            }
        }
    }

    pub fn value(&self, z: f64) -> f64 {
        self.eval(z).0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub functional: LinearFunctional,
    pub g: GateFn,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldSpec {
    /// `sigma(r) = h`.
    Additive { h: Curve },
    /// `sigma(r) = g(l(r)) h`.
    ScalarGate { h: Curve, gate: GateSpec },
    /// `sigma(r)(x) = c e^{-lambda x}`.
    ExpDecay { c: f64, lambda: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DriftMode {
    Zero,
    /// No-arbitrage drift `sum_i S(sigma_i)`.
    Hjm,
    /// State-independent drift curve.
    Custom(Curve),
}

/// Smooth cutoff: `1` up to `x_cut`, `0` from `x_cut + width` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taper {
    pub x_cut: f64,
    pub width: f64,
}

impl Taper {
    /// `x_cut = 0.8 x_max`, zero on the upper half of the remaining tail.
    pub fn default_for(grid: &GridSpec) -> Self {
        let x_cut = 0.8 * grid.x_max;
        Taper {
            x_cut,
            width: 0.5 * (grid.x_max - x_cut),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        fn bump(t: f64) -> f64 {
            if t > 0.0 {
                (-1.0 / t).exp()
            } else {
                0.0
            }
        }
        let s = (x - self.x_cut) / self.width;
        if s <= 0.0 {
            1.0
        } else if s >= 1.0 {
            0.0
        } else {
            let a = bump(1.0 - s);
            a / (a + bump(s))
        }
    }

    pub fn curve(&self, grid: &GridSpec) -> Curve {
        Curve::from_fn(*grid, |x| self.value(x))
    }
}

#[derive(Clone, Debug)]
struct PreparedGate {
    row: Vec<f64>,
    /// `l(1)`, so that `l(r + c) = l(r) + c l(1)`.
    row_of_one: f64,
    g: GateFn,
    /// `l(s_i)`.
    ell_shape: f64,
}

/// A validated volatility/drift specification on a fixed grid.
#[derive(Clone, Debug)]
pub struct FieldModel {
    grid: GridSpec,
    fields: Vec<FieldSpec>,
    drift: DriftMode,
    taper: Option<Taper>,
    state_offset: f64,
    shapes: Vec<Curve>,
    /// `S(s_i)`, cached for the HJM drift.
    shape_s_maps: Vec<Curve>,
    gates: Vec<Option<PreparedGate>>,
}

impl FieldModel {
    /// Builds a model; HJM drift switches the default taper on.
    pub fn new(grid: GridSpec, fields: Vec<FieldSpec>, drift: DriftMode) -> Result<Self> {
        let taper = matches!(drift, DriftMode::Hjm).then(|| Taper::default_for(&grid));
        Self::with_parts(grid, fields, drift, taper, 0.0)
    }

    pub fn with_parts(
        grid: GridSpec,
        fields: Vec<FieldSpec>,
        drift: DriftMode,
        taper: Option<Taper>,
        state_offset: f64,
    ) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::InvalidModel(
                "at least one volatility field is required".into(),
            ));
        }
        if !state_offset.is_finite() {
            return Err(Error::InvalidModel("state offset must be finite".into()));
        }
        if let Some(t) = taper {
            if !(t.width > 0.0) || !t.x_cut.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "taper needs finite x_cut and width > 0, got {t:?}"
                )));
            }
        }
        if let DriftMode::Custom(c) = &drift {
            if c.grid() != &grid {
                return Err(Error::GridMismatch);
            }
        }
        let taper_curve = taper.map(|t| t.curve(&grid));
        let mut shapes = Vec::with_capacity(fields.len());
        let mut gates = Vec::with_capacity(fields.len());
        for f in &fields {
            let raw = match f {
                FieldSpec::Additive { h } | FieldSpec::ScalarGate { h, .. } => {
                    if h.grid() != &grid {
                        return Err(Error::GridMismatch);
                    }
                    h.clone()
                }
                FieldSpec::ExpDecay { c, lambda } => {
                    if !c.is_finite() || !lambda.is_finite() {
                        return Err(Error::InvalidModel(
                            "exp-decay parameters must be finite".into(),
                        ));
                    }
                    Curve::from_fn(grid, |x| c * (-lambda * x).exp())
                }
            };
            if !raw.is_finite() {
                return Err(Error::InvalidModel(
                    "volatility profile has non-finite values".into(),
                ));
            }
            let shape = match &taper_curve {
                Some(t) => raw.hadamard(t),
                None => raw,
            };
            let gate = match f {
                FieldSpec::ScalarGate { gate, .. } => {
                    gate.g.validate()?;
                    let row = functional_row(&gate.functional, &grid)?;
                    let row_of_one = row.iter().sum();
                    let ell_shape = dot(&row, shape.values());
                    Some(PreparedGate {
                        row,
                        row_of_one,
                        g: gate.g.clone(),
                        ell_shape,
                    })
                }
                _ => None,
            };
            shapes.push(shape);
            gates.push(gate);
        }
        let shape_s_maps = shapes.iter().map(s_map).collect();
        Ok(Self {
            grid,
            fields,
            drift,
            taper,
            state_offset,
            shapes,
            shape_s_maps,
            gates,
        })
    }

    /// Replaces the taper (`None` disables it).
    pub fn with_taper(self, taper: Option<Taper>) -> Result<Self> {
        Self::with_parts(self.grid, self.fields, self.drift, taper, self.state_offset)
    }

    /// Fields are evaluated at `r + offset` (constant curve).
    pub fn with_state_offset(self, offset: f64) -> Result<Self> {
        Self::with_parts(self.grid, self.fields, self.drift, self.taper, offset)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn d(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn drift_mode(&self) -> &DriftMode {
        &self.drift
    }

    pub fn taper(&self) -> Option<Taper> {
        self.taper
    }

    pub fn state_offset(&self) -> f64 {
        self.state_offset
    }

    /// Profile `s_i` (tapered).
    pub fn shape(&self, i: usize) -> &Curve {
        &self.shapes[i]
    }

    /// No field depends on the state.
    pub fn is_state_independent(&self) -> bool {
        self.gates.iter().all(Option::is_none)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.d() {
            return Err(Error::IndexOutOfRange {
                index: i,
                d: self.d(),
            });
        }
        Ok(())
    }

    fn gate_eval(&self, gate: &PreparedGate, r: &Curve) -> (f64, f64, f64) {
        let z = dot(&gate.row, r.values()) + self.state_offset * gate.row_of_one;
        gate.g.eval(z)
    }

    /// `phi_i(r)`; `1` for state-independent fields.
    pub fn gate_value(&self, i: usize, r: &Curve) -> f64 {
        match &self.gates[i] {
            Some(gate) => self.gate_eval(gate, r).0,
            None => 1.0,
        }
    }

    /// `sigma_i(r)` with a zero-based index.
    pub fn sigma(&self, i: usize, r: &Curve) -> Result<Curve> {
        self.check_index(i)?;
        if !r.same_grid(&self.shapes[i]) {
            return Err(Error::GridMismatch);
        }
        Ok(self.sigma_at(i, r))
    }

    pub(crate) fn sigma_at(&self, i: usize, r: &Curve) -> Curve {
        match &self.gates[i] {
            Some(gate) => self.shapes[i].scaled(self.gate_eval(gate, r).0),
            None => self.shapes[i].clone(),
        }
    }

    pub fn sigmas(&self, r: &Curve) -> Vec<Curve> {
        (0..self.d()).map(|i| self.sigma_at(i, r)).collect()
    }

    /// Exact `D sigma_i(r) . v`.
    pub fn sigma_derivative(&self, i: usize, r: &Curve, v: &Curve) -> Curve {
        match &self.gates[i] {
            Some(gate) => {
                let (_, dg, _) = self.gate_eval(gate, r);
                self.shapes[i].scaled(dg * dot(&gate.row, v.values()))
            }
            None => Curve::zeros(self.grid),
        }
    }

    /// `alpha(r)`.
    pub fn drift(&self, r: &Curve) -> Curve {
        match &self.drift {
            DriftMode::Zero => Curve::zeros(self.grid),
            DriftMode::Hjm => self.hjm_drift(r),
            DriftMode::Custom(c) => c.clone(),
        }
    }

    /// `sum_i S(sigma_i(r))`, independent of the configured drift mode.
    pub fn hjm_drift(&self, r: &Curve) -> Curve {
        let mut out = Curve::zeros(self.grid);
        for i in 0..self.d() {
            let phi = self.gate_value(i, r);
            out.axpy(phi * phi, &self.shape_s_maps[i]);
        }
        out
    }

    /// Exact `D alpha(r) . v`.
    pub fn drift_derivative(&self, r: &Curve, v: &Curve) -> Curve {
        let mut out = Curve::zeros(self.grid);
        if !matches!(self.drift, DriftMode::Hjm) {
            return out;
        }
        for (i, gate) in self.gates.iter().enumerate() {
            if let Some(gate) = gate {
                let (g, dg, _) = self.gate_eval(gate, r);
                out.axpy(
                    2.0 * g * dg * dot(&gate.row, v.values()),
                    &self.shape_s_maps[i],
                );
            }
        }
        out
    }

    /// `sum_i D sigma_i(r) . sigma_i(r)`, the Ito-Stratonovich correction
    /// (before the factor one half).
    pub fn ito_correction(&self, r: &Curve) -> Curve {
        let mut out = Curve::zeros(self.grid);
        for (i, gate) in self.gates.iter().enumerate() {
            if let Some(gate) = gate {
                let (g, dg, _) = self.gate_eval(gate, r);
                out.axpy(dg * g * gate.ell_shape, &self.shapes[i]);
            }
        }
        out
    }

    pub fn ito_correction_derivative(&self, r: &Curve, v: &Curve) -> Curve {
        let mut out = Curve::zeros(self.grid);
        for (i, gate) in self.gates.iter().enumerate() {
            if let Some(gate) = gate {
                let (g, dg, d2g) = self.gate_eval(gate, r);
                let coef = (d2g * g + dg * dg) * dot(&gate.row, v.values()) * gate.ell_shape;
                out.axpy(coef, &self.shapes[i]);
            }
        }
        out
    }

    /// `beta(r) = alpha(r) - 1/2 sum_i D sigma_i(r) . sigma_i(r)`: the
    /// Stratonovich drift without the generator.
    pub fn nonlocal_drift_part(&self, r: &Curve) -> Curve {
        let mut out = self.drift(r);
        if !self.is_state_independent() {
            out.axpy(-0.5, &self.ito_correction(r));
        }
        out
    }

    pub fn nonlocal_drift_derivative(&self, r: &Curve, v: &Curve) -> Curve {
        let mut out = self.drift_derivative(r, v);
        if !self.is_state_independent() {
            out.axpy(-0.5, &self.ito_correction_derivative(r, v));
        }
        out
    }

    /// `mu(r) = A r + beta(r)`.
    pub fn stratonovich_drift(&self, r: &Curve) -> Curve {
        let mut out = apply_generator(r);
        out.axpy(1.0, &self.nonlocal_drift_part(r));
        out
    }

    /// `D mu(r) . v = A v + D beta(r) . v`.
    pub fn stratonovich_drift_derivative(&self, r: &Curve, v: &Curve) -> Curve {
        let mut out = apply_generator(v);
        out.axpy(1.0, &self.nonlocal_drift_derivative(r, v));
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `int_0^{x_i} b` for every node, signed for nodes left of the origin.
/// The origin is clamped into the grid.
pub fn cumulative_integral(b: &Curve) -> Vec<f64> {
    let g = b.grid();
    let v = b.values();
    let mut cum = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for i in 1..v.len() {
        acc += 0.5 * g.dx * (v[i - 1] + v[i]);
        cum.push(acc);
    }
    let origin = 0.0f64.clamp(g.x_min, g.x_max);
    let (j, s) = g.locate(origin);
    let at_origin = if s == 0.0 {
        cum[j]
    } else {
        let v0 = v[j] * (1.0 - s) + v[j + 1] * s;
        cum[j] + 0.5 * s * g.dx * (v[j] + v0)
    };
    for c in &mut cum {
        *c -= at_origin;
    }
    cum
}

/// `S(a, b)(x) = a(x) int_0^x b`.
pub fn s_map_bilinear(a: &Curve, b: &Curve) -> Curve {
    let cum = cumulative_integral(b);
    Curve::from_raw(
        *a.grid(),
        a.values().iter().zip(&cum).map(|(x, c)| x * c).collect(),
    )
}

/// `S(h)(x) = h(x) int_0^x h(y) dy`.
pub fn s_map(h: &Curve) -> Curve {
    s_map_bilinear(h, h)
}

/// Which vector field a directional derivative refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VectorField {
    Sigma(usize),
    /// `alpha`
    Drift,
    /// `beta = mu - A`
    NonlocalDrift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativeMethod {
    Exact,
    CentralDifference,
}

/// Central-difference step for directional derivatives at `r`.
pub fn fd_step(r: &Curve) -> f64 {
    1e-5 * r.norm_l2().max(1.0)
}

pub fn eval_field(model: &FieldModel, field: VectorField, r: &Curve) -> Result<Curve> {
    match field {
        VectorField::Sigma(i) => model.sigma(i, r),
        VectorField::Drift => Ok(model.drift(r)),
        VectorField::NonlocalDrift => Ok(model.nonlocal_drift_part(r)),
    }
}

/// `DF(r) . v`. A zero direction gives the zero curve.
pub fn dir_derivative(
    model: &FieldModel,
    field: VectorField,
    r: &Curve,
    v: &Curve,
    method: DerivativeMethod,
) -> Result<Curve> {
    if !r.same_grid(v) || r.grid() != model.grid() {
        return Err(Error::GridMismatch);
    }
    if let VectorField::Sigma(i) = field {
        model.check_index(i)?;
    }
    let norm = v.norm_l2();
    if norm == 0.0 {
        return Ok(Curve::zeros(*model.grid()));
    }
    match method {
        DerivativeMethod::Exact => Ok(match field {
            VectorField::Sigma(i) => model.sigma_derivative(i, r, v),
            VectorField::Drift => model.drift_derivative(r, v),
            VectorField::NonlocalDrift => model.nonlocal_drift_derivative(r, v),
        }),
        DerivativeMethod::CentralDifference => {
            let eps = fd_step(r);
            let mut plus = r.clone();
            plus.axpy(eps / norm, v);
            let mut minus = r.clone();
            minus.axpy(-eps / norm, v);
            let diff = &eval_field(model, field, &plus)? - &eval_field(model, field, &minus)?;
            Ok(diff.scaled(norm / (2.0 * eps)))
        }
    }
}

/// Config-level description of a volatility field, with analytic shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    Additive { h: CurveSpec },
    ScalarGate { h: CurveSpec, gate: GateSpec },
    ExpDecay { c: f64, lambda: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftConfig {
    Zero,
    Hjm,
    Custom { curve: CurveSpec },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaperChoice {
    /// On for HJM drift, off otherwise.
    #[default]
    Auto,
    Off,
    Window(Taper),
}

/// Serializable model description; [`ModelSpec::build`] samples it on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub fields: Vec<FieldConfig>,
    pub drift: DriftConfig,
    #[serde(default)]
    pub taper: TaperChoice,
    #[serde(default)]
    pub state_offset: f64,
}

impl ModelSpec {
    pub fn build(&self, grid: &GridSpec) -> Result<FieldModel> {
        let fields = self
            .fields
            .iter()
            .map(|f| {
                Ok(match f {
                    FieldConfig::Additive { h } => FieldSpec::Additive { h: h.sample(grid)? },
                    FieldConfig::ScalarGate { h, gate } => FieldSpec::ScalarGate {
                        h: h.sample(grid)?,
                        gate: gate.clone(),
                    },
                    FieldConfig::ExpDecay { c, lambda } => FieldSpec::ExpDecay {
                        c: *c,
                        lambda: *lambda,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let drift = match &self.drift {
            DriftConfig::Zero => DriftMode::Zero,
            DriftConfig::Hjm => DriftMode::Hjm,
            DriftConfig::Custom { curve } => DriftMode::Custom(curve.sample(grid)?),
        };
        FieldModel::with_parts(*grid, fields, drift, self.taper(grid), self.state_offset)
    }

    pub fn taper(&self, grid: &GridSpec) -> Option<Taper> {
        match &self.taper {
            TaperChoice::Auto => {
                matches!(self.drift, DriftConfig::Hjm).then(|| Taper::default_for(grid))
            }
            TaperChoice::Off => None,
            TaperChoice::Window(t) => Some(*t),
        }
    }
}
