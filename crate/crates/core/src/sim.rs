//! Path simulation by operator splitting, first-variation flow and its
//! inverse adjoint.
//!
//! Every scheme advances one step as a nonlocal substep combined with an
//! exact grid shift, so `dt = dx` always. The tangent map of a step is its
//! exact derivative, which makes the discrete flow identities (pairing,
//! composition) hold to round-off.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::FieldModel;
use crate::grid::{
    gram_matrix, inner_product, shift_by_steps, BoundaryMode, Curve, GridSpec, Metric,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `r+ = shift(r + alpha dt + sum sigma_i dW_i)`.
    ItoSplit,
    /// Heun predictor-corrector on `beta` and `sigma_i`, then shift.
    StratonovichHeun,
    /// Increment split half before and half after the shift:
    /// `r+ = shift(r + inc/2) + inc/2` with `inc = alpha dt + sum sigma_i dW_i`.
    MildTrapezoid,
}

#[derive(Clone, Debug, PartialEq)]
pub enum JacobianMode {
    /// Dense cumulative matrices, `O(n^2)` per step.
    FullMatrix,
    /// Actions on the given probe vectors only.
    ActionOnBasis(Vec<Curve>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub t_end: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub record_jacobian: bool,
    pub record_inverse_adjoint: bool,
    pub jacobian_mode: JacobianMode,
    pub metric: Metric,
}

impl SimConfig {
    /// `dt = dx`, no flow records.
    pub fn new(grid: &GridSpec, t_end: f64, scheme: Scheme) -> Self {
        SimConfig {
            t_end,
            dt: grid.dx,
            scheme,
            record_jacobian: false,
            record_inverse_adjoint: false,
            jacobian_mode: JacobianMode::ActionOnBasis(Vec::new()),
            metric: Metric::default(),
        }
    }

    pub fn with_full_records(mut self) -> Self {
        self.record_jacobian = true;
        self.record_inverse_adjoint = true;
        self.jacobian_mode = JacobianMode::FullMatrix;
        self
    }

    /// Number of steps; checks `dt = dx` and `t_end / dt` integral.
    pub fn steps(&self, grid: &GridSpec) -> Result<usize> {
        if !((self.dt - grid.dx).abs() <= 1e-9 * grid.dx) {
            return Err(Error::InvalidConfig(format!(
                "dt = {} must equal dx = {}",
                self.dt, grid.dx
            )));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "t_end = {} must be finite and >= 0",
                self.t_end
            )));
        }
        let k = (self.t_end / grid.dx).round();
        if (k * grid.dx - self.t_end).abs() > 1e-9 * self.t_end.max(grid.dx) {
            return Err(Error::InvalidConfig(format!(
                "t_end = {} is not a multiple of dt = {}",
                self.t_end, grid.dx
            )));
        }
        if let JacobianMode::ActionOnBasis(p) = &self.jacobian_mode {
            if p.iter().any(|c| c.grid() != grid) {
                return Err(Error::GridMismatch);
            }
        }
        Ok(k as usize)
    }
}

/// Per-step flow records.
#[derive(Clone, Debug, PartialEq)]
pub enum FlowRecord {
    /// Cumulative operators, index `k` maps time 0 to step `k`.
    Matrices(Vec<DMatrix<f64>>),
    /// `actions[j][k]` is the flow at step `k` applied to `probes[j]`.
    Actions {
        probes: Vec<Curve>,
        actions: Vec<Vec<Curve>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub grid: GridSpec,
    pub times: Vec<f64>,
    pub states: Vec<Curve>,
    /// `noise[k][i]`: increment of `B^i` over step `k`.
    pub noise: Vec<Vec<f64>>,
    pub jac: Option<FlowRecord>,
    pub inv_adj: Option<FlowRecord>,
    /// Step matrices `M_k`, kept with full records.
    pub step_matrices: Option<Vec<DMatrix<f64>>>,
    pub seed: u64,
    pub path_index: u64,
    pub scheme: Scheme,
    pub metric: Metric,
    pub dt: f64,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.noise.len()
    }

    pub fn terminal(&self) -> &Curve {
        self.states
            .last()
            .expect("bundle has at least the initial state")
    }

    /// Writes `states.csv`, `noise.csv` and `meta.json` into `dir`.
    pub fn write_dir(&self, dir: &Path, config_echo: Option<&serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("states.csv"))?;
        let mut header = vec!["t".to_string()];
        header.extend(self.grid.nodes().iter().map(|x| format!("{x}")));
        w.write_record(&header)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut row = vec![format!("{t:e}")];
            row.extend(s.values().iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("noise.csv"))?;
        let d = self.noise.first().map_or(0, Vec::len);
        w.write_record((1..=d).map(|i| format!("dW{i}")))?;
        for row in &self.noise {
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        let meta = serde_json::json!({
            "seed": self.seed,
            "path_index": self.path_index,
            "scheme": self.scheme,
            "metric": self.metric,
            "dt": self.dt,
            "steps": self.steps(),
            "grid": self.grid,
            "config": config_echo,
        });
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads states and noise written by [`PathBundle::write_dir`].
    pub fn read_dir(dir: &Path, grid: GridSpec) -> Result<Self> {
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let mut times = Vec::new();
        let mut states = Vec::new();
        for rec in csv::Reader::from_path(dir.join("states.csv"))?.records() {
            let rec = rec?;
            let vals = parse_row(&rec)?;
            times.push(vals[0]);
            states.push(Curve::new(grid, vals[1..].to_vec())?);
        }
        let mut noise = Vec::new();
        for rec in csv::Reader::from_path(dir.join("noise.csv"))?.records() {
            noise.push(parse_row(&rec?)?);
        }
        Ok(PathBundle {
            grid,
            times,
            states,
            noise,
            jac: None,
            inv_adj: None,
            step_matrices: None,
            seed: meta["seed"].as_u64().unwrap_or(0),
            path_index: meta["path_index"].as_u64().unwrap_or(0),
            scheme: serde_json::from_value(meta["scheme"].clone())?,
            metric: serde_json::from_value(meta["metric"].clone())?,
            dt: meta["dt"].as_f64().unwrap_or(grid.dx),
        })
    }
}

fn parse_row(rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad number {s:?}: {e}")))
        })
        .collect()
}

/// Brownian increments for one path: `steps x d` draws of `N(0, dt)` from
/// the ChaCha8 stream `path_index` of `master_seed`.
pub fn brownian_increments(
    master_seed: u64,
    path_index: u64,
    steps: usize,
    d: usize,
    dt: f64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path_index);
    let sd = dt.sqrt();
    (0..steps)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * sd
                })
                .collect()
        })
        .collect()
}

/// Sums consecutive blocks of `factor` increments (coarser time grid,
/// same Brownian path).
pub fn coarsen_increments(noise: &[Vec<f64>], factor: usize) -> Result<Vec<Vec<f64>>> {
    if factor == 0 || !noise.len().is_multiple_of(factor) {
        return Err(Error::InvalidInput(format!(
            "{} steps not divisible by {factor}",
            noise.len()
        )));
    }
    Ok(noise
        .chunks(factor)
        .map(|block| {
            let mut acc = vec![0.0; block[0].len()];
            for row in block {
                acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            acc
        })
        .collect())
}

fn check_noise(model: &FieldModel, dw: &[f64]) -> Result<()> {
    if dw.len() != model.d() {
        return Err(Error::InvalidInput(format!(
            "{} increments for {} fields",
            dw.len(),
            model.d()
        )));
    }
    if dw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Brownian increment".into()));
    }
    Ok(())
}

fn increment(model: &FieldModel, r: &Curve, dw: &[f64], dt: f64) -> Curve {
    let mut inc = model.drift(r).scaled(dt);
    for (i, &w) in dw.iter().enumerate() {
        inc.axpy(w, &model.sigma_at(i, r));
    }
    inc
}

fn increment_derivative(model: &FieldModel, r: &Curve, v: &Curve, dw: &[f64], dt: f64) -> Curve {
    let mut out = model.drift_derivative(r, v).scaled(dt);
    for (i, &w) in dw.iter().enumerate() {
        out.axpy(w, &model.sigma_derivative(i, r, v));
    }
    out
}

fn heun_predictor(model: &FieldModel, r: &Curve, dw: &[f64], dt: f64) -> Curve {
    let mut y = r.clone();
    y.axpy(dt, &model.nonlocal_drift_part(r));
    for (i, &w) in dw.iter().enumerate() {
        y.axpy(w, &model.sigma_at(i, r));
    }
    y
}

fn average(a: &Curve, b: &Curve) -> Curve {
    (a + b).scaled(0.5)
}

/// Nonlocal substep of a scheme, before any shift. For the trapezoid scheme
/// this is the half increment.
fn substep(model: &FieldModel, r: &Curve, dw: &[f64], dt: f64, scheme: Scheme) -> Curve {
    match scheme {
        Scheme::ItoSplit => {
            let mut y = r.clone();
            y.axpy(dt, &model.drift(r));
            for (i, &w) in dw.iter().enumerate() {
                y.axpy(w, &model.sigma_at(i, r));
            }
            y
        }
        Scheme::StratonovichHeun => {
            let pred = heun_predictor(model, r, dw, dt);
            let mut y = r.clone();
            y.axpy(
                dt,
                &average(
                    &model.nonlocal_drift_part(r),
                    &model.nonlocal_drift_part(&pred),
                ),
            );
            for (i, &w) in dw.iter().enumerate() {
                y.axpy(
                    w,
                    &average(&model.sigma_at(i, r), &model.sigma_at(i, &pred)),
                );
            }
            y
        }
        Scheme::MildTrapezoid => increment(model, r, dw, dt).scaled(0.5),
    }
}

/// One step `r_k -> r_{k+1}`.
pub fn step(model: &FieldModel, r: &Curve, dw: &[f64], cfg: &SimConfig) -> Result<Curve> {
    check_noise(model, dw)?;
    if r.grid() != model.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(step_unchecked(model, r, dw, cfg.dt, cfg.scheme))
}

fn step_unchecked(model: &FieldModel, r: &Curve, dw: &[f64], dt: f64, scheme: Scheme) -> Curve {
    let y = substep(model, r, dw, dt, scheme);
    match scheme {
        Scheme::MildTrapezoid => {
            let mut out = shift_by_steps(&(r + &y), 1);
            out.axpy(1.0, &y);
            out
        }
        _ => shift_by_steps(&y, 1),
    }
}

/// Exact derivative of [`step`] at `r` in direction `v`.
pub fn tangent_step(
    model: &FieldModel,
    r: &Curve,
    v: &Curve,
    dw: &[f64],
    cfg: &SimConfig,
) -> Result<Curve> {
    check_noise(model, dw)?;
    if r.grid() != model.grid() || v.grid() != model.grid() {
        return Err(Error::GridMismatch);
    }
    Ok(tangent_unchecked(model, r, v, dw, cfg.dt, cfg.scheme))
}

fn tangent_unchecked(
    model: &FieldModel,
    r: &Curve,
    v: &Curve,
    dw: &[f64],
    dt: f64,
    scheme: Scheme,
) -> Curve {
    match scheme {
        Scheme::ItoSplit => {
            let mut y = v.clone();
            y.axpy(1.0, &increment_derivative(model, r, v, dw, dt));
            shift_by_steps(&y, 1)
        }
        Scheme::StratonovichHeun => {
            let pred = heun_predictor(model, r, dw, dt);
            let mut dpred = v.clone();
            dpred.axpy(dt, &model.nonlocal_drift_derivative(r, v));
            for i in 0..dw.len() {
                dpred.axpy(dw[i], &model.sigma_derivative(i, r, v));
            }
            let mut y = v.clone();
            let db = &model.nonlocal_drift_derivative(r, v)
                + &model.nonlocal_drift_derivative(&pred, &dpred);
            y.axpy(0.5 * dt, &db);
            for (i, &w) in dw.iter().enumerate() {
                let ds =
                    &model.sigma_derivative(i, r, v) + &model.sigma_derivative(i, &pred, &dpred);
                y.axpy(0.5 * w, &ds);
            }
            shift_by_steps(&y, 1)
        }
        Scheme::MildTrapezoid => {
            let half = increment_derivative(model, r, v, dw, dt).scaled(0.5);
            let mut out = shift_by_steps(&(v + &half), 1);
            out.axpy(1.0, &half);
            out
        }
    }
}

/// Dense step matrix `M` with `tangent_step(r, v) = M v`.
pub fn step_matrix(
    model: &FieldModel,
    r: &Curve,
    dw: &[f64],
    cfg: &SimConfig,
) -> Result<DMatrix<f64>> {
    check_noise(model, dw)?;
    let g = *model.grid();
    let n = g.n_points;
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let col = tangent_unchecked(model, r, &Curve::unit(g, j), dw, cfg.dt, cfg.scheme);
        m.set_column(j, &DVector::from_column_slice(col.values()));
    }
    Ok(m)
}

/// The step map is a pure permutation of the nodes (periodic grid, no
/// state dependence in the increment).
fn is_pure_shift(model: &FieldModel) -> bool {
    model.grid().boundary == BoundaryMode::Periodic && model.is_state_independent()
}

fn to_dvec(c: &Curve) -> DVector<f64> {
    DVector::from_column_slice(c.values())
}

fn from_dvec(g: GridSpec, v: &DVector<f64>) -> Curve {
    Curve::from_raw(g, v.iter().copied().collect())
}

/// LU of a square matrix with a pivot-ratio singularity check.
struct CheckedLu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>);

impl CheckedLu {
    fn new(m: DMatrix<f64>, step: usize) -> Result<Self> {
        let lu = m.lu();
        let u = lu.u();
        let diag: Vec<f64> = u.diagonal().iter().map(|v| v.abs()).collect();
        let max = diag.iter().copied().fold(0.0, f64::max);
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let pivot_ratio = if max > 0.0 { min / max } else { 0.0 };
        if !(pivot_ratio >= 1e-13) {
            return Err(Error::SingularStep { step, pivot_ratio });
        }
        Ok(CheckedLu(lu))
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.0.solve(b).expect("pivots checked")
    }
}

/// Metric adjoint helper: `X* = G^{-1} X^T G`; `None` stands for a multiple
/// of the identity, where `G` cancels.
struct MetricOps {
    gram: Option<(DMatrix<f64>, CheckedLu)>,
}

impl MetricOps {
    fn new(grid: &GridSpec, metric: Metric) -> Result<Self> {
        Ok(match metric {
            Metric::L2Grid => MetricOps { gram: None },
            Metric::Hw { .. } => {
                let g = gram_matrix(grid, metric)?;
                let lu = CheckedLu::new(g.clone(), 0).map_err(|_| {
                    Error::InvalidInput("metric Gram matrix is singular on this grid".into())
                })?;
                MetricOps {
                    gram: Some((g, lu)),
                }
            }
        })
    }

    /// `G^{-1} M^{-T} G x` for every column of `x`.
    fn inverse_adjoint(
        &self,
        m: &DMatrix<f64>,
        x: &DMatrix<f64>,
        step: usize,
    ) -> Result<DMatrix<f64>> {
        let lu = CheckedLu::new(m.transpose(), step)?;
        Ok(match &self.gram {
            None => lu.solve(x),
            Some((g, glu)) => glu.solve(&lu.solve(&(g * x))),
        })
    }

    /// `G^{-1} X^T G`.
    fn adjoint(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.gram {
            None => m.transpose(),
            Some((g, glu)) => glu.solve(&(m.transpose() * g)),
        }
    }
}

/// Simulates one path with increments from stream `path_index` of `seed`.
pub fn simulate_path(
    model: &FieldModel,
    r0: &Curve,
    cfg: &SimConfig,
    seed: u64,
    path_index: u64,
) -> Result<PathBundle> {
    let steps = cfg.steps(model.grid())?;
    let noise = brownian_increments(seed, path_index, steps, model.d(), cfg.dt);
    simulate_with_noise(model, r0, cfg, noise, seed, path_index)
}

/// Simulates one path driven by the given increments.
pub fn simulate_with_noise(
    model: &FieldModel,
    r0: &Curve,
    cfg: &SimConfig,
    noise: Vec<Vec<f64>>,
    seed: u64,
    path_index: u64,
) -> Result<PathBundle> {
    let steps = cfg.steps(model.grid())?;
    if noise.len() != steps {
        return Err(Error::InvalidInput(format!(
            "{} noise rows for {steps} steps",
            noise.len()
        )));
    }
    if r0.grid() != model.grid() {
        return Err(Error::GridMismatch);
    }
    if !r0.is_finite() {
        return Err(Error::NonFinite("initial curve".into()));
    }
    let mut states = Vec::with_capacity(steps + 1);
    states.push(r0.clone());
    for (k, dw) in noise.iter().enumerate() {
        check_noise(model, dw)?;
        let next = step_unchecked(model, &states[k], dw, cfg.dt, cfg.scheme);
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("state at step {}", k + 1)));
        }
        states.push(next);
    }
    let times = (0..=steps).map(|k| k as f64 * cfg.dt).collect();
    let mut bundle = PathBundle {
        grid: *model.grid(),
        times,
        states,
        noise,
        jac: None,
        inv_adj: None,
        step_matrices: None,
        seed,
        path_index,
        scheme: cfg.scheme,
        metric: cfg.metric,
        dt: cfg.dt,
    };
    attach_records(model, &mut bundle, cfg)?;
    Ok(bundle)
}

fn attach_records(model: &FieldModel, bundle: &mut PathBundle, cfg: &SimConfig) -> Result<()> {
    if !cfg.record_jacobian && !cfg.record_inverse_adjoint {
        return Ok(());
    }
    match &cfg.jacobian_mode {
        JacobianMode::FullMatrix => {
            let mats = (0..bundle.steps())
                .map(|k| step_matrix(model, &bundle.states[k], &bundle.noise[k], cfg))
                .collect::<Result<Vec<_>>>()?;
            let n = bundle.grid.n_points;
            if cfg.record_jacobian {
                let mut cum = vec![DMatrix::identity(n, n)];
                for m in &mats {
                    let next = m * cum.last().unwrap();
                    cum.push(next);
                }
                bundle.jac = Some(FlowRecord::Matrices(cum));
            }
            if cfg.record_inverse_adjoint {
                let ops = MetricOps::new(&bundle.grid, cfg.metric)?;
                let mut cum = vec![DMatrix::identity(n, n)];
                for (k, m) in mats.iter().enumerate() {
                    let next = ops.inverse_adjoint(m, cum.last().unwrap(), k)?;
                    cum.push(next);
                }
                bundle.inv_adj = Some(FlowRecord::Matrices(cum));
            }
            bundle.step_matrices = Some(mats);
        }
        JacobianMode::ActionOnBasis(probes) => {
            if cfg.record_jacobian {
                let actions = probes
                    .iter()
                    .map(|h| propagate_jacobian(model, bundle, h))
                    .collect::<Result<_>>()?;
                bundle.jac = Some(FlowRecord::Actions {
                    probes: probes.clone(),
                    actions,
                });
            }
            if cfg.record_inverse_adjoint {
                let actions = probes
                    .iter()
                    .map(|y| propagate_inverse_adjoint(model, bundle, y))
                    .collect::<Result<_>>()?;
                bundle.inv_adj = Some(FlowRecord::Actions {
                    probes: probes.clone(),
                    actions,
                });
            }
        }
    }
    Ok(())
}

fn bundle_scheme_cfg(bundle: &PathBundle) -> SimConfig {
    SimConfig {
        t_end: bundle.steps() as f64 * bundle.dt,
        dt: bundle.dt,
        scheme: bundle.scheme,
        record_jacobian: false,
        record_inverse_adjoint: false,
        jacobian_mode: JacobianMode::ActionOnBasis(Vec::new()),
        metric: bundle.metric,
    }
}

/// `J_{from -> k} h` for `k = from..=steps`, replaying the path's noise.
pub fn propagate_jacobian_from(
    model: &FieldModel,
    bundle: &PathBundle,
    h: &Curve,
    from: usize,
) -> Result<Vec<Curve>> {
    if h.grid() != &bundle.grid || model.grid() != &bundle.grid {
        return Err(Error::GridMismatch);
    }
    if from > bundle.steps() {
        return Err(Error::InvalidInput(format!(
            "start step {from} beyond {} steps",
            bundle.steps()
        )));
    }
    let mut out = Vec::with_capacity(bundle.steps() + 1 - from);
    out.push(h.clone());
    for k in from..bundle.steps() {
        let next = tangent_unchecked(
            model,
            &bundle.states[k],
            out.last().unwrap(),
            &bundle.noise[k],
            bundle.dt,
            bundle.scheme,
        );
        out.push(next);
    }
    Ok(out)
}

/// `J_{0 -> k} h` for every step.
pub fn propagate_jacobian(
    model: &FieldModel,
    bundle: &PathBundle,
    h: &Curve,
) -> Result<Vec<Curve>> {
    propagate_jacobian_from(model, bundle, h, 0)
}

/// `m_k = (J_{0 -> k}^{-1})^* y` in the bundle's metric, by exact inverse
/// transposes of the step matrices.
pub fn propagate_inverse_adjoint(
    model: &FieldModel,
    bundle: &PathBundle,
    y: &Curve,
) -> Result<Vec<Curve>> {
    if y.grid() != &bundle.grid || model.grid() != &bundle.grid {
        return Err(Error::GridMismatch);
    }
    let g = bundle.grid;
    let mut out = Vec::with_capacity(bundle.steps() + 1);
    out.push(y.clone());
    if is_pure_shift(model) && bundle.metric == Metric::L2Grid {
        // the step is the permutation S, and S^{-T} = S
        for _ in 0..bundle.steps() {
            let next = shift_by_steps(out.last().unwrap(), 1);
            out.push(next);
        }
        return Ok(out);
    }
    let ops = MetricOps::new(&g, bundle.metric)?;
    let cfg = bundle_scheme_cfg(bundle);
    for k in 0..bundle.steps() {
        let m = match &bundle.step_matrices {
            Some(mats) => mats[k].clone(),
            None => step_matrix(model, &bundle.states[k], &bundle.noise[k], &cfg)?,
        };
        let x = DMatrix::from_column_slice(g.n_points, 1, out.last().unwrap().values());
        let next = ops.inverse_adjoint(&m, &x, k)?;
        out.push(Curve::from_raw(g, next.column(0).iter().copied().collect()));
    }
    Ok(out)
}

/// Direct Heun integration of
/// `dm = -D beta(r)^* m dt - sum_i D sigma_i(r)^* m o dB^i`
/// over each substep, followed by the inverse-adjoint transport. Agrees
/// with [`propagate_inverse_adjoint`] to first order in `dt`.
pub fn integrate_inverse_adjoint_direct(
    model: &FieldModel,
    bundle: &PathBundle,
    y: &Curve,
) -> Result<Vec<Curve>> {
    if y.grid() != &bundle.grid || model.grid() != &bundle.grid {
        return Err(Error::GridMismatch);
    }
    let g = bundle.grid;
    if g.boundary != BoundaryMode::Periodic {
        return Err(Error::InvalidInput(
            "direct inverse-adjoint integration needs a periodic grid".into(),
        ));
    }
    let n = g.n_points;
    let ops = MetricOps::new(&g, bundle.metric)?;
    let generator = |r: &Curve, dw: &[f64]| -> DMatrix<f64> {
        let mut b = DMatrix::zeros(n, n);
        for j in 0..n {
            let e = Curve::unit(g, j);
            let mut col = model.nonlocal_drift_derivative(r, &e).scaled(bundle.dt);
            for (i, &w) in dw.iter().enumerate() {
                col.axpy(w, &model.sigma_derivative(i, r, &e));
            }
            b.set_column(j, &to_dvec(&col));
        }
        -ops.adjoint(&b)
    };
    // (S^{-1})^* = G^{-1} S G with S the one-step shift
    let shift_matrix = {
        let mut s = DMatrix::zeros(n, n);
        for j in 0..n {
            s.set_column(j, &to_dvec(&shift_by_steps(&Curve::unit(g, j), 1)));
        }
        s
    };
    let transport = match &ops.gram {
        None => shift_matrix,
        Some((gm, glu)) => glu.solve(&(&shift_matrix * gm)),
    };
    let mut out = vec![y.clone()];
    for k in 0..bundle.steps() {
        let r = &bundle.states[k];
        let dw = &bundle.noise[k];
        let pred_state = heun_predictor(model, r, dw, bundle.dt);
        let b0 = generator(r, dw);
        let b1 = generator(&pred_state, dw);
        let m = to_dvec(out.last().unwrap());
        let m_pred = &m + &b0 * &m;
        let m_next = &m + (&b0 * &m + &b1 * &m_pred) * 0.5;
        out.push(from_dvec(g, &(&transport * m_next)));
    }
    Ok(out)
}

/// `|<J_k h, m_k y> - <h, y>|` per step, in the bundle's metric.
pub fn pairing_residual(
    model: &FieldModel,
    bundle: &PathBundle,
    h: &Curve,
    y: &Curve,
) -> Result<Vec<f64>> {
    let jh = propagate_jacobian(model, bundle, h)?;
    let my = propagate_inverse_adjoint(model, bundle, y)?;
    let base = inner_product(h, y, bundle.metric)?;
    jh.iter()
        .zip(&my)
        .enumerate()
        .map(|(k, (a, b))| {
            if k == 0 {
                Ok(0.0)
            } else {
                Ok((inner_product(a, b, bundle.metric)? - base).abs())
            }
        })
        .collect()
}

/// Relative norm of `(J_{s->t} - J_{0->t} J_{0->s}^{-1}) probe`.
pub fn flow_property_residual(
    bundle: &PathBundle,
    s_index: usize,
    t_index: usize,
    probe: &Curve,
) -> Result<f64> {
    let (Some(FlowRecord::Matrices(cum)), Some(mats)) = (&bundle.jac, &bundle.step_matrices) else {
        return Err(Error::MissingRecords("full-matrix Jacobian"));
    };
    if s_index > t_index || t_index > bundle.steps() {
        return Err(Error::InvalidInput(format!(
            "need 0 <= s <= t <= {}, got ({s_index}, {t_index})",
            bundle.steps()
        )));
    }
    if s_index == t_index {
        return Ok(0.0);
    }
    let n = bundle.grid.n_points;
    let mut js = DMatrix::identity(n, n);
    for m in &mats[s_index..t_index] {
        js = m * js;
    }
    let p = to_dvec(probe);
    let lhs = &js * &p;
    let x = if s_index == 0 {
        p.clone()
    } else {
        CheckedLu::new(cum[s_index].clone(), s_index)?
            .0
            .solve(&p)
            .expect("pivots checked")
    };
    let rhs = &cum[t_index] * x;
    let denom = lhs.norm();
    Ok(if denom > 0.0 {
        (&lhs - &rhs).norm() / denom
    } else {
        (&lhs - &rhs).norm()
    })
}

/// 2-norm condition number of each recorded step matrix.
pub fn step_condition_numbers(bundle: &PathBundle) -> Result<Vec<f64>> {
    let Some(mats) = &bundle.step_matrices else {
        return Err(Error::MissingRecords("step matrices"));
    };
    Ok(mats
        .iter()
        .map(|m| {
            let s = m.singular_values();
            let max = s.max();
            let min = s.min();
            if min > 0.0 {
                max / min
            } else {
                f64::INFINITY
            }
        })
        .collect())
}
