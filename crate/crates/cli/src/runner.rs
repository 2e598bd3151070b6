//! Subcommand bodies. Paths fan out over a worker pool and are merged in
//! path-index order, so every reducer sees the same sequence at any worker count.

use hjm_hypo_core::brackets::{
    default_rank_tol, generate_basis, hormander_verdict, numeric_rank, BasisOptions,
};
use hjm_hypo_core::grid::{eval_functional, norm, Curve, LinearFunctional};
use hjm_hypo_core::h0::{long_rate_deviation, long_rate_series, write_long_rate_csv};
use hjm_hypo_core::malliavin::{
    density_verdict, eigen_histogram, malliavin_matrix, median, write_gamma_csv,
    write_histogram_csv, MalliavinReport,
};
use hjm_hypo_core::oracles::{
    compare_cov, fd_jacobian_action, gaussian_mean_cov, gaussianity_check, mc_moments,
};
use hjm_hypo_core::sim::{
    flow_property_residual, pairing_residual, propagate_jacobian, simulate_path,
    simulate_with_noise, step_condition_numbers,
};
use hjm_hypo_core::{BoundaryMode, Error, PathBundle};
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::Serialize;

use crate::config::Resolved;
use crate::output::OutputDir;
use crate::RunError;

pub(crate) struct Ctx<'a> {
    pub res: &'a Resolved,
    pub pool: &'a ThreadPool,
    pub out: OutputDir,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.res.config.experiment.seed
    }

    fn r0(&self) -> Result<Curve, RunError> {
        Ok(self.res.config.sim.initial.sample(&self.res.grid)?)
    }

    /// `f(path_index)` for `0..n`, results in index order.
    fn map_paths<T: Send>(
        &self,
        n: usize,
        f: impl Fn(u64) -> hjm_hypo_core::Result<T> + Sync,
    ) -> Result<Vec<T>, RunError> {
        Ok(self.pool.install(|| {
            (0..n as u64)
                .into_par_iter()
                .map(&f)
                .collect::<hjm_hypo_core::Result<Vec<T>>>()
        })?)
    }

    fn terminal_values(&self, bundle: &PathBundle) -> hjm_hypo_core::Result<Vec<f64>> {
        self.res
            .config
            .functionals
            .iter()
            .map(|f| eval_functional(f, bundle.terminal()))
            .collect()
    }

    fn labels(&self) -> Vec<String> {
        self.res
            .config
            .functionals
            .iter()
            .map(LinearFunctional::label)
            .collect()
    }

    /// Terminal functional values of every path.
    fn terminal_samples(&self) -> Result<Vec<Vec<f64>>, RunError> {
        let r0 = self.r0()?;
        let res = self.res;
        self.map_paths(res.config.experiment.paths, |i| {
            let b = simulate_path(&res.model, &r0, &res.sim, self.seed(), i)?;
            self.terminal_values(&b)
        })
    }

    fn write_samples(&mut self, name: &str, samples: &[Vec<f64>]) -> Result<(), RunError> {
        let labels = self.labels();
        self.out.csv(name, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            let mut header = vec!["path_index".to_string()];
            header.extend(labels);
            w.write_record(&header)?;
            for (i, s) in samples.iter().enumerate() {
                let mut row = vec![i.to_string()];
                row.extend(s.iter().map(|v| format!("{v:e}")));
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(())
        })
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    functionals: Vec<String>,
    t: f64,
    steps: usize,
    scheme: hjm_hypo_core::Scheme,
    moments: Option<hjm_hypo_core::oracles::Moments>,
}

pub(crate) fn simulate(ctx: &mut Ctx) -> Result<String, RunError> {
    let res = ctx.res;
    let r0 = ctx.r0()?;
    let save = res.config.experiment.save_paths;
    let results = ctx.map_paths(res.config.experiment.paths, |i| {
        let b = simulate_path(&res.model, &r0, &res.sim, ctx.seed(), i)?;
        let values = ctx.terminal_values(&b)?;
        Ok((values, (i < save as u64).then_some(b)))
    })?;
    let (samples, kept): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    ctx.write_samples("terminal.csv", &samples)?;
    let echo = serde_json::to_value(ctx.out.stamp()).map_err(|e| RunError::Io(e.to_string()))?;
    for b in kept.into_iter().flatten() {
        let dir = ctx.out.path(&format!("paths/path_{:05}", b.path_index));
        b.write_dir(&dir, Some(&echo))?;
    }
    let moments = if samples.len() >= 2 {
        Some(mc_moments(&samples)?)
    } else {
        None
    };
    let summary = SimulateSummary {
        functionals: ctx.labels(),
        t: res.sim.t_end,
        steps: res.steps,
        scheme: res.sim.scheme,
        moments,
    };
    ctx.out.json("summary.json", &summary)?;
    Ok(format!(
        "simulated {} paths over {} steps",
        samples.len(),
        res.steps
    ))
}

fn check_step_cap(res: &Resolved) -> Result<(), RunError> {
    let cap = res.config.experiment.max_steps;
    if res.steps > cap {
        return Err(RunError::Config(format!(
            "sim: {} steps exceed experiment.max_steps = {cap}",
            res.steps
        )));
    }
    Ok(())
}

pub(crate) fn covariance(ctx: &mut Ctx) -> Result<String, RunError> {
    let res = ctx.res;
    check_step_cap(res)?;
    let r0 = ctx.r0()?;
    let reports: Vec<MalliavinReport> = ctx.map_paths(res.config.experiment.paths, |i| {
        let b = simulate_path(&res.model, &r0, &res.sim, ctx.seed(), i)?;
        malliavin_matrix(&res.model, &b, &res.config.functionals, b.steps())
    })?;
    let e = &res.config.experiment;
    let verdict = density_verdict(&reports, e.density_threshold)?;
    let hist = eigen_histogram(&reports, e.histogram_bins, -16.0, 0.0);
    ctx.out
        .csv("gamma.csv", |buf| write_gamma_csv(&reports, buf))?;
    ctx.out
        .csv("min_eig_hist.csv", |buf| write_histogram_csv(&hist, buf))?;
    ctx.out.csv("eigenvalues.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        let k = res.config.functionals.len();
        let mut header = vec!["path_index".to_string(), "min_eig_rel".to_string()];
        header.extend((0..k).map(|i| format!("eig{i}")));
        w.write_record(&header)?;
        for r in &reports {
            let mut row = vec![r.path_index.to_string(), format!("{:e}", r.min_eig_rel)];
            row.extend(r.eigenvalues.iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    })?;
    ctx.out.json("verdict.json", &verdict)?;
    Ok(format!(
        "{:?}: min_eig_rel in [{:.3e}, {:.3e}] over {} paths",
        verdict.verdict, verdict.min_eig_rel_min, verdict.min_eig_rel_max, verdict.n_paths
    ))
}

#[derive(Serialize)]
struct HormanderOutput {
    labels: Vec<String>,
    target_dim: usize,
    rank: hjm_hypo_core::brackets::RankReport,
    verdict: hjm_hypo_core::brackets::HormanderVerdict,
}

pub(crate) fn hormander(ctx: &mut Ctx) -> Result<String, RunError> {
    let res = ctx.res;
    let e = &res.config.experiment;
    let r0 = ctx.r0()?;
    let opts = BasisOptions {
        max_depth: e.max_depth,
        ..Default::default()
    };
    let basis = generate_basis(&res.model, &r0, &opts)?;
    let window = res.grid.default_window();
    let tol = e
        .rank_tol
        .unwrap_or_else(|| default_rank_tol(res.grid.n_points));
    let rank = numeric_rank(&basis, window.clone(), tol)?;
    let target_dim = e.target_dim.unwrap_or(window.len());
    let verdict = hormander_verdict(&rank, target_dim);
    ctx.out.csv("basis.csv", |buf| basis.write_csv(buf))?;
    let headline = format!("{verdict:?}: rank by depth {:?}", rank.rank_at_depth);
    let labels = basis.vectors.iter().map(|(w, _)| w.label()).collect();
    ctx.out.json(
        "rank.json",
        &HormanderOutput {
            labels,
            target_dim,
            rank,
            verdict,
        },
    )?;
    Ok(headline)
}

#[derive(Serialize)]
struct OracleOutput {
    functionals: Vec<String>,
    oracle: hjm_hypo_core::oracles::GaussianLaw,
    moments: hjm_hypo_core::oracles::Moments,
    mean_z: Vec<f64>,
    covariance: hjm_hypo_core::oracles::CovComparison,
    gaussianity: hjm_hypo_core::oracles::GaussianityReport,
    pass: bool,
}

pub(crate) fn oracle(ctx: &mut Ctx) -> Result<String, RunError> {
    let res = ctx.res;
    let e = &res.config.experiment;
    let law = gaussian_mean_cov(
        &res.config.model,
        &res.grid,
        &res.config.sim.initial,
        &res.config.functionals,
        res.sim.t_end,
        e.oracle_substeps,
    )?;
    let samples = ctx.terminal_samples()?;
    let moments = mc_moments(&samples)?;
    let covariance = compare_cov(&moments.cov, &law.cov, samples.len(), e.z_threshold)?;
    let gaussianity = gaussianity_check(&samples)?;
    let mean_z: Vec<f64> = moments
        .mean
        .iter()
        .zip(&law.mean)
        .zip(&moments.standard_errors)
        .map(|((m, o), se)| if *se > 0.0 { (m - o) / se } else { 0.0 })
        .collect();
    let pass = covariance.pass
        && gaussianity.flagged.is_empty()
        && mean_z.iter().all(|z| z.abs() < e.z_threshold);
    ctx.write_samples("terminal.csv", &samples)?;
    let headline = format!(
        "{}: rel Frobenius {:.3e}, max |z| {:.2}, gaussianity flags {:?}",
        if pass { "pass" } else { "fail" },
        covariance.rel_frobenius,
        covariance.max_abs_z,
        gaussianity.flagged
    );
    let out = OracleOutput {
        functionals: ctx.labels(),
        oracle: law,
        moments,
        mean_z,
        covariance,
        gaussianity,
        pass,
    };
    ctx.out.json("oracle.json", &out)?;
    Ok(headline)
}

/// Evenly spread Gaussian bumps used as probe directions.
fn probe_curves(res: &Resolved, count: usize) -> Vec<Curve> {
    let g = res.grid;
    let span = g.x_max - g.x_min;
    let width = span / 10.0;
    (0..count)
        .map(|j| {
            let c = g.x_min + span * (j + 1) as f64 / (count + 1) as f64;
            Curve::from_fn(g, |x| (-(x - c).powi(2) / (2.0 * width * width)).exp())
        })
        .collect()
}

/// Deterministic `(s, t)` pairs spread over `0..=steps`.
fn step_pairs(steps: usize, count: usize) -> Vec<(usize, usize)> {
    (0..count)
        .map(|j| {
            let s = j * steps / count.max(1);
            let t = steps - j * steps / (2 * count.max(1));
            (s.min(t), s.max(t))
        })
        .collect()
}

#[derive(Serialize)]
struct PathChecks {
    path_index: u64,
    fd_rel_errors: Vec<f64>,
    /// `None` when the step matrices are not invertible.
    pairing_rel_max: Option<f64>,
    flow_rel_max: Option<f64>,
    max_step_condition: Option<f64>,
    note: Option<String>,
}

#[derive(Serialize)]
struct FlowSummary {
    fd_rel_max: f64,
    pairing_rel_max: Option<f64>,
    flow_rel_max: Option<f64>,
    paths: Vec<PathChecks>,
}

fn max_opt(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    it.fold(None, |acc, v| match (acc, v) {
        (Some(a), Some(b)) => Some(f64::max(a, b)),
        (None, v) | (v, None) => v,
    })
}

pub(crate) fn flowcheck(ctx: &mut Ctx) -> Result<String, RunError> {
    let res = ctx.res;
    check_step_cap(res)?;
    let e = &res.config.experiment;
    let r0 = ctx.r0()?;
    let probes = probe_curves(res, e.probes.max(2));
    let pairs = step_pairs(res.steps, e.flow_pairs);
    let metric = res.sim.metric;
    let paths = ctx.map_paths(e.check_paths, |i| {
        let plain = simulate_path(&res.model, &r0, &res.sim, ctx.seed(), i)?;
        let fd_rel_errors = probes
            .iter()
            .map(|h| {
                let var = propagate_jacobian(&res.model, &plain, h)?
                    .pop()
                    .expect("nonempty");
                let fd = fd_jacobian_action(&res.model, &r0, &plain.noise, h, e.fd_eps, &res.sim)?;
                let denom = var.norm_l2();
                let diff = (&var - &fd).norm_l2();
                Ok(if denom > 0.0 { diff / denom } else { diff })
            })
            .collect::<hjm_hypo_core::Result<Vec<f64>>>()?;
        let full_cfg = res.sim.clone().with_full_records();
        let full = match simulate_with_noise(
            &res.model,
            &r0,
            &full_cfg,
            plain.noise.clone(),
            ctx.seed(),
            i,
        ) {
            Ok(b) => b,
            Err(err @ Error::SingularStep { .. }) => {
                return Ok(PathChecks {
                    path_index: i,
                    fd_rel_errors,
                    pairing_rel_max: None,
                    flow_rel_max: None,
                    max_step_condition: None,
                    note: Some(format!("inverse flow unavailable: {err}")),
                })
            }
            Err(err) => return Err(err),
        };
        let mut pairing = 0.0f64;
        for (j, h) in probes.iter().enumerate() {
            let y = &probes[(j + 1) % probes.len()];
            let scale = norm(h, metric)? * norm(y, metric)?;
            let worst = pairing_residual(&res.model, &full, h, y)?
                .into_iter()
                .fold(0.0, f64::max);
            pairing = pairing.max(worst / scale);
        }
        let mut flow = 0.0f64;
        for (j, &(s, t)) in pairs.iter().enumerate() {
            flow = flow.max(flow_property_residual(
                &full,
                s,
                t,
                &probes[j % probes.len()],
            )?);
        }
        let cond = step_condition_numbers(&full)?
            .into_iter()
            .fold(0.0, f64::max);
        Ok(PathChecks {
            path_index: i,
            fd_rel_errors,
            pairing_rel_max: Some(pairing),
            flow_rel_max: Some(flow),
            max_step_condition: Some(cond),
            note: None,
        })
    })?;
    let summary = FlowSummary {
        fd_rel_max: paths
            .iter()
            .flat_map(|p| p.fd_rel_errors.iter().copied())
            .fold(0.0, f64::max),
        pairing_rel_max: max_opt(paths.iter().map(|p| p.pairing_rel_max)),
        flow_rel_max: max_opt(paths.iter().map(|p| p.flow_rel_max)),
        paths,
    };
    let headline = format!(
        "fd {:.3e}, pairing {}, flow {}{}",
        summary.fd_rel_max,
        summary
            .pairing_rel_max
            .map_or("n/a".into(), |v| format!("{v:.3e}")),
        summary
            .flow_rel_max
            .map_or("n/a".into(), |v| format!("{v:.3e}")),
        if res.grid.boundary == BoundaryMode::FlatExtrapolate {
            " (flat grid)"
        } else {
            ""
        }
    );
    ctx.out.json("flowcheck.json", &summary)?;
    Ok(headline)
}

#[derive(Serialize)]
struct LongRateSummary {
    max_deviation: f64,
    median_deviation: f64,
    initial_long_rate: f64,
}

pub(crate) fn longrate(ctx: &mut Ctx) -> Result<String, RunError> {
    let res = ctx.res;
    let r0 = ctx.r0()?;
    let series = ctx.map_paths(res.config.experiment.paths, |i| {
        let b = simulate_path(&res.model, &r0, &res.sim, ctx.seed(), i)?;
        Ok((b.times.clone(), long_rate_series(&b)?))
    })?;
    let devs: Vec<f64> = series.iter().map(|(_, s)| long_rate_deviation(s)).collect();
    let (times, first) = &series[0];
    ctx.out.csv("longrate_path0.csv", |buf| {
        write_long_rate_csv(times, first, buf)
    })?;
    ctx.out.csv("deviations.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["path_index", "max_abs_deviation"])?;
        for (i, d) in devs.iter().enumerate() {
            w.write_record([i.to_string(), format!("{d:e}")])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let mut sorted = devs.clone();
    sorted.sort_by(f64::total_cmp);
    let summary = LongRateSummary {
        max_deviation: sorted.last().copied().unwrap_or(0.0),
        median_deviation: median(&sorted),
        initial_long_rate: first[0],
    };
    let headline = format!(
        "max long-rate drift {:.3e} over {} paths",
        summary.max_deviation,
        devs.len()
    );
    ctx.out.json("longrate.json", &summary)?;
    Ok(headline)
}
