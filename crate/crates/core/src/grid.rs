//! Discretized forward-curve space.
//!
//! A [`GridSpec`] samples time-to-maturity on `n_points` equally spaced nodes.
//! Curves are transported by the shift group `(T_t r)(x) = r(x + t)`, which on
//! the grid is an exact index shift, and differentiated by the generator
//! `A = d/dx` realized as a second-order central stencil.

use std::ops::{Add, Mul, Neg, Range, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Positions closer than this (in units of dx) to a node are snapped onto it.
const NODE_SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Index arithmetic modulo `n_points`; the shift is a permutation.
    Periodic,
    /// Values beyond the last node are held at the edge value.
    FlatExtrapolate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
    pub dx: f64,
    pub boundary: BoundaryMode,
}

pub fn make_grid(
    x_min: f64,
    x_max: f64,
    n_points: usize,
    boundary: BoundaryMode,
) -> Result<GridSpec> {
    if !x_min.is_finite() || !x_max.is_finite() {
        return Err(Error::InvalidGrid(format!(
            "non-finite bounds [{x_min}, {x_max}]"
        )));
    }
    if n_points < 2 {
        return Err(Error::InvalidGrid(format!(
            "n_points = {n_points}, need at least 2"
        )));
    }
    if x_min >= x_max {
        return Err(Error::InvalidGrid(format!(
            "x_min = {x_min} must be below x_max = {x_max}"
        )));
    }
    let dx = (x_max - x_min) / (n_points - 1) as f64;
    Ok(GridSpec {
        x_min,
        x_max,
        n_points,
        dx,
        boundary,
    })
}

impl GridSpec {
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.x(i)).collect()
    }

    /// Length of one full wrap for periodic grids.
    pub fn period(&self) -> Option<f64> {
        match self.boundary {
            BoundaryMode::Periodic => Some(self.n_points as f64 * self.dx),
            BoundaryMode::FlatExtrapolate => None,
        }
    }

    /// Number of grid steps corresponding to a shift by `t`.
    pub fn shift_steps(&self, t: f64) -> Result<isize> {
        let steps = t / self.dx;
        let rounded = steps.round();
        if !steps.is_finite() || (steps - rounded).abs() > 1e-9 * rounded.abs().max(1.0) {
            return Err(Error::ShiftNotMultiple { t, dx: self.dx });
        }
        Ok(rounded as isize)
    }

    /// `out[i] = values[i + steps]` with the grid's boundary rule.
    pub fn shift_values(&self, values: &[f64], steps: isize) -> Vec<f64> {
        let n = self.n_points as isize;
        match self.boundary {
            BoundaryMode::Periodic => (0..n)
                .map(|i| values[(i + steps).rem_euclid(n) as usize])
                .collect(),
            BoundaryMode::FlatExtrapolate => (0..n)
                .map(|i| values[(i + steps).clamp(0, n - 1) as usize])
                .collect(),
        }
    }

    /// Central 60% of the nodes, used to keep boundary stencils and the
    /// volatility taper out of rank decisions.
    pub fn default_window(&self) -> Range<usize> {
        let margin = self.n_points / 5;
        margin..self.n_points - margin
    }

    /// Fractional node index of `x`, snapped onto a node when within round-off.
    fn position(&self, x: f64) -> f64 {
        let pos = (x - self.x_min) / self.dx;
        let nearest = pos.round();
        if (pos - nearest).abs() <= NODE_SNAP {
            nearest
        } else {
            pos
        }
    }

    /// Cell index `j` and fraction `s` with `x = x_j + s dx`, `j <= n - 2`.
    pub(crate) fn locate(&self, x: f64) -> (usize, f64) {
        let pos = self.position(x);
        let j = (pos.floor().max(0.0) as usize).min(self.n_points - 2);
        (j, pos - j as f64)
    }

    fn check_tenor(&self, x: f64) -> Result<()> {
        let lo = self.x_min.max(0.0);
        let slack = 1e-12 * self.dx;
        if !x.is_finite() || x < lo - slack || x > self.x_max + slack {
            return Err(Error::TenorOutOfRange {
                tenor: x,
                lo,
                hi: self.x_max,
            });
        }
        Ok(())
    }

    /// Nonzero entries of row `i` of the generator stencil.
    fn generator_stencil(&self, i: usize) -> ([(usize, f64); 3], usize) {
        let n = self.n_points;
        let h = 0.5 / self.dx;
        let mut out = [(0usize, 0.0f64); 3];
        match self.boundary {
            BoundaryMode::Periodic => {
                out[0] = ((i + n - 1) % n, -h);
                out[1] = ((i + 1) % n, h);
                (out, 2)
            }
            BoundaryMode::FlatExtrapolate if n == 2 => {
                out[0] = (0, -1.0 / self.dx);
                out[1] = (1, 1.0 / self.dx);
                (out, 2)
            }
            BoundaryMode::FlatExtrapolate => {
                if i == 0 {
                    out = [(0, -3.0 * h), (1, 4.0 * h), (2, -h)];
                    (out, 3)
                } else if i == n - 1 {
                    out = [(n - 1, 3.0 * h), (n - 2, -4.0 * h), (n - 3, h)];
                    (out, 3)
                } else {
                    out[0] = (i - 1, -h);
                    out[1] = (i + 1, h);
                    (out, 2)
                }
            }
        }
    }

    /// Dense matrix of the discrete generator.
    pub fn generator_matrix(&self) -> DMatrix<f64> {
        let n = self.n_points;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let (st, len) = self.generator_stencil(i);
            for &(j, c) in &st[..len] {
                m[(i, j)] += c;
            }
        }
        m
    }
}

/// A forward-rate curve sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Serialize for Curve {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.values.serialize(serializer)
    }
}

impl Curve {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_points {
            return Err(Error::WeightsLength {
                got: values.len(),
                expected: grid.n_points,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("curve value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    /// Construction without the finiteness check; callers that can produce
    /// NaN (the simulator) check with [`Curve::is_finite`].
    pub(crate) fn from_raw(grid: GridSpec, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.n_points);
        Self { grid, values }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: GridSpec, level: f64) -> Self {
        Self {
            grid,
            values: vec![level; grid.n_points],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid,
            values: grid.nodes().into_iter().map(f).collect(),
        }
    }

    /// Unit vector at node `i`.
    pub fn unit(grid: GridSpec, i: usize) -> Self {
        let mut c = Self::zeros(grid);
        c.values[i] = 1.0;
        c
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_grid(&self, other: &Curve) -> bool {
        self.grid == other.grid
    }

    fn assert_grid(&self, other: &Curve) {
        assert!(
            self.same_grid(other),
            "curve arithmetic across different grids"
        );
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Curve) {
        self.assert_grid(x);
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
    }

    pub fn scaled(&self, a: f64) -> Curve {
        Curve {
            grid: self.grid,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Curve {
        Curve {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise product.
    pub fn hadamard(&self, other: &Curve) -> Curve {
        self.assert_grid(other);
        Curve {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn try_add(&self, other: &Curve) -> Result<Curve> {
        if !self.same_grid(other) {
            return Err(Error::GridMismatch);
        }
        Ok(self + other)
    }

    pub fn try_sub(&self, other: &Curve) -> Result<Curve> {
        if !self.same_grid(other) {
            return Err(Error::GridMismatch);
        }
        Ok(self - other)
    }

    /// Euclidean dot product of the node values (no dx factor).
    pub fn dot(&self, other: &Curve) -> f64 {
        self.assert_grid(other);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Norm induced by the L2Grid metric.
    pub fn norm_l2(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.dx).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn restrict(&self, window: Range<usize>) -> &[f64] {
        &self.values[window]
    }
}

impl Add for &Curve {
    type Output = Curve;
    fn add(self, rhs: &Curve) -> Curve {
        self.assert_grid(rhs);
        Curve {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&rhs.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

impl Sub for &Curve {
    type Output = Curve;
    fn sub(self, rhs: &Curve) -> Curve {
        self.assert_grid(rhs);
        Curve {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&rhs.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl Mul<&Curve> for f64 {
    type Output = Curve;
    fn mul(self, rhs: &Curve) -> Curve {
        rhs.scaled(self)
    }
}

impl Neg for &Curve {
    type Output = Curve;
    fn neg(self) -> Curve {
        self.scaled(-1.0)
    }
}

/// `(T_t r)(x) = r(x + t)`; `t` must be an integer multiple of dx.
pub fn shift(curve: &Curve, t: f64) -> Result<Curve> {
    let steps = curve.grid.shift_steps(t)?;
    Ok(shift_by_steps(curve, steps))
}

pub fn shift_by_steps(curve: &Curve, steps: isize) -> Curve {
    Curve::from_raw(curve.grid, curve.grid.shift_values(&curve.values, steps))
}

/// Discrete `A = d/dx`.
pub fn apply_generator(curve: &Curve) -> Curve {
    let g = &curve.grid;
    let v = &curve.values;
    let values = (0..g.n_points)
        .map(|i| {
            let (st, len) = g.generator_stencil(i);
            st[..len].iter().map(|&(j, c)| c * v[j]).sum()
        })
        .collect();
    Curve::from_raw(*g, values)
}

/// Euclidean transpose of the discrete generator.
pub fn apply_generator_transpose(curve: &Curve) -> Curve {
    let g = &curve.grid;
    let mut out = vec![0.0; g.n_points];
    for (i, &vi) in curve.values.iter().enumerate() {
        let (st, len) = g.generator_stencil(i);
        for &(j, c) in &st[..len] {
            out[j] += c * vi;
        }
    }
    Curve::from_raw(*g, out)
}

/// Inner product on the discretized curve space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `sum a_i b_i dx`.
    #[default]
    L2Grid,
    /// Discrete `int a' b' w dx + a(0) b(0)` with `w(x) = e^{beta x}` for
    /// `x >= 0` and `1` otherwise.
    Hw { beta: f64 },
}

pub const DEFAULT_HW_BETA: f64 = 0.1;

pub fn hw_weight(x: f64, beta: f64) -> f64 {
    if x >= 0.0 {
        (beta * x).exp()
    } else {
        1.0
    }
}

pub fn inner_product(a: &Curve, b: &Curve, metric: Metric) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(Error::GridMismatch);
    }
    match metric {
        Metric::L2Grid => Ok(a.dot(b) * a.grid.dx),
        Metric::Hw { beta } => {
            let g = a.grid;
            let da = apply_generator(a);
            let db = apply_generator(b);
            let slope: f64 = (0..g.n_points)
                .map(|i| da.values[i] * db.values[i] * hw_weight(g.x(i), beta))
                .sum::<f64>()
                * g.dx;
            let at_zero = LinearFunctional::PointEval(0.0);
            Ok(slope + eval_functional(&at_zero, a)? * eval_functional(&at_zero, b)?)
        }
    }
}

pub fn norm(a: &Curve, metric: Metric) -> Result<f64> {
    Ok(inner_product(a, a, metric)?.max(0.0).sqrt())
}

/// Gram matrix `G` with `<a, b> = a^T G b`.
pub fn gram_matrix(grid: &GridSpec, metric: Metric) -> Result<DMatrix<f64>> {
    let n = grid.n_points;
    match metric {
        Metric::L2Grid => Ok(DMatrix::identity(n, n) * grid.dx),
        Metric::Hw { beta } => {
            let d = grid.generator_matrix();
            let w = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                n,
                (0..n).map(|i| hw_weight(grid.x(i), beta) * grid.dx),
            ));
            let e = nalgebra::DVector::from_vec(functional_row(
                &LinearFunctional::PointEval(0.0),
                grid,
            )?);
            Ok(d.transpose() * w * d + &e * e.transpose())
        }
    }
}

/// Continuous linear functionals on curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearFunctional {
    /// `r(x)` with linear interpolation between nodes.
    PointEval(f64),
    /// `(1/x) int_0^x r(y) dy`; `Yield(0)` is the short rate `r(0)`.
    Yield(f64),
    /// Value at the last node, standing in for `r(infinity)`.
    LongRate,
    /// Explicit grid coefficients.
    Weights(Vec<f64>),
}

impl LinearFunctional {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        match self {
            LinearFunctional::PointEval(x) | LinearFunctional::Yield(x) => grid.check_tenor(*x),
            LinearFunctional::LongRate => Ok(()),
            LinearFunctional::Weights(w) if w.len() != grid.n_points => Err(Error::WeightsLength {
                got: w.len(),
                expected: grid.n_points,
            }),
            LinearFunctional::Weights(_) => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            LinearFunctional::PointEval(x) => format!("point({x})"),
            LinearFunctional::Yield(x) => format!("yield({x})"),
            LinearFunctional::LongRate => "long_rate".to_string(),
            LinearFunctional::Weights(_) => "weights".to_string(),
        }
    }
}

fn interpolate(grid: &GridSpec, values: &[f64], x: f64) -> f64 {
    let (j, s) = grid.locate(x);
    if s == 0.0 {
        values[j]
    } else if s == 1.0 {
        values[j + 1]
    } else {
        values[j] * (1.0 - s) + values[j + 1] * s
    }
}

/// Exact integral over `[a, b]` of the piecewise-linear interpolant.
fn integrate_linear(grid: &GridSpec, values: &[f64], a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let (jl, _) = grid.locate(lo);
    let (jh, _) = grid.locate(hi);
    let mut total = 0.0;
    for j in jl..=jh {
        let p = lo.max(grid.x(j));
        let q = hi.min(grid.x(j + 1));
        if q <= p {
            continue;
        }
        total += 0.5 * (q - p) * (interpolate(grid, values, p) + interpolate(grid, values, q));
    }
    sign * total
}

pub fn eval_functional(f: &LinearFunctional, r: &Curve) -> Result<f64> {
    let grid = &r.grid;
    f.validate(grid)?;
    Ok(match f {
        LinearFunctional::PointEval(x) => interpolate(grid, &r.values, *x),
        LinearFunctional::Yield(x) if *x == 0.0 => interpolate(grid, &r.values, 0.0),
        LinearFunctional::Yield(x) => integrate_linear(grid, &r.values, 0.0, *x) / x,
        LinearFunctional::LongRate => r.values[grid.n_points - 1],
        LinearFunctional::Weights(w) => w.iter().zip(&r.values).map(|(a, b)| a * b).sum(),
    })
}

/// Adds the weights of `int_a^b` (a <= b) of the linear interpolant into `row`.
fn integral_weights(grid: &GridSpec, a: f64, b: f64, row: &mut [f64]) {
    let (jl, _) = grid.locate(a);
    let (jh, _) = grid.locate(b);
    for j in jl..=jh {
        let xj = grid.x(j);
        let sp = ((a.max(xj) - xj) / grid.dx).clamp(0.0, 1.0);
        let sq = ((b.min(grid.x(j + 1)) - xj) / grid.dx).clamp(0.0, 1.0);
        if sq <= sp {
            continue;
        }
        let first = (sq - sp) - 0.5 * (sq * sq - sp * sp);
        let second = 0.5 * (sq * sq - sp * sp);
        row[j] += grid.dx * first;
        row[j + 1] += grid.dx * second;
    }
}

/// Grid coefficients `w` with `eval_functional(f, r) = sum w_i r_i`.
pub fn functional_row(f: &LinearFunctional, grid: &GridSpec) -> Result<Vec<f64>> {
    f.validate(grid)?;
    let n = grid.n_points;
    let mut row = vec![0.0; n];
    let point = |x: f64, row: &mut [f64]| {
        let (j, s) = grid.locate(x);
        row[j] += 1.0 - s;
        row[j + 1] += s;
    };
    match f {
        LinearFunctional::PointEval(x) => point(*x, &mut row),
        LinearFunctional::Yield(x) if *x == 0.0 => point(0.0, &mut row),
        LinearFunctional::Yield(x) => {
            integral_weights(grid, 0.0, *x, &mut row);
            for w in &mut row {
                *w /= x;
            }
        }
        LinearFunctional::LongRate => row[n - 1] = 1.0,
        LinearFunctional::Weights(w) => row.copy_from_slice(w),
    }
    Ok(row)
}

/// Two-column (x, value) CSV.
pub fn write_curve_csv<W: std::io::Write>(curve: &Curve, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "value"])?;
    for (i, v) in curve.values.iter().enumerate() {
        w.write_record([format!("{}", curve.grid.x(i)), format!("{v}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: std::io::Read>(grid: GridSpec, reader: R) -> Result<Curve> {
    let mut r = csv::Reader::from_reader(reader);
    let mut values = Vec::with_capacity(grid.n_points);
    for rec in r.records() {
        let rec = rec?;
        let v: f64 = rec
            .get(1)
            .ok_or_else(|| Error::InvalidInput("curve csv row without value column".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::InvalidInput(format!("curve csv: {e}")))?;
        values.push(v);
    }
    Curve::new(grid, values)
}
