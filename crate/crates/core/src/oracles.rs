//! Independent reference computations: the Gaussian law of additive models,
//! finite-difference flow derivatives and Monte Carlo statistics.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fields::{DriftConfig, FieldConfig, FieldModel, ModelSpec};
use crate::grid::{BoundaryMode, Curve, GridSpec, LinearFunctional};
use crate::shapes::CurveSpec;
use crate::sim::{simulate_with_noise, SimConfig};

/// Default number of time panels, far above any path step count used here.
pub const DEFAULT_ORACLE_SUBSTEPS: usize = 1024;

/// Panels for yield integrals inside the oracle.
const YIELD_PANELS: usize = 2048;

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    if h == 0.0 {
        return 0.0;
    }
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Position `x + u` mapped back into the domain the way the grid shift
/// treats it: clamped for flat extrapolation, wrapped for periodic grids.
fn transported(grid: &GridSpec, x: f64, u: f64) -> f64 {
    let y = x + u;
    match grid.boundary {
        BoundaryMode::FlatExtrapolate => y.min(grid.x_max),
        BoundaryMode::Periodic => {
            let p = grid.n_points as f64 * grid.dx;
            grid.x_min + (y - grid.x_min).rem_euclid(p)
        }
    }
}

/// `l(f)` for a function given pointwise, without grid quadrature.
fn eval_continuous(f: &impl Fn(f64) -> f64, l: &LinearFunctional, grid: &GridSpec) -> f64 {
    match l {
        LinearFunctional::PointEval(x) => f(*x),
        LinearFunctional::Yield(x) if *x == 0.0 => f(0.0),
        LinearFunctional::Yield(x) => simpson(f, 0.0, *x, YIELD_PANELS) / x,
        LinearFunctional::LongRate => f(grid.x_max),
        LinearFunctional::Weights(w) => w.iter().enumerate().map(|(i, wi)| wi * f(grid.x(i))).sum(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussianLaw {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// Mean and covariance of `(l_a(r_t))` for an additive model with zero
/// drift: `mean_a = l_a(T_t r0)`, `cov_ab = sum_i int_0^t l_a(T_u h_i) l_b(T_u h_i) du`.
/// The time integral uses `substeps` Simpson panels.
pub fn gaussian_mean_cov(
    spec: &ModelSpec,
    grid: &GridSpec,
    r0: &CurveSpec,
    functionals: &[LinearFunctional],
    t: f64,
    substeps: usize,
) -> Result<GaussianLaw> {
    if spec.drift != DriftConfig::Zero {
        return Err(Error::InvalidModel(
            "Gaussian oracle needs zero drift".into(),
        ));
    }
    let mut shapes = Vec::new();
    for f in &spec.fields {
        match f {
            FieldConfig::Additive { h } => {
                h.validate()?;
                shapes.push(h.clone());
            }
            _ => {
                return Err(Error::InvalidModel(
                    "Gaussian oracle needs additive fields only".into(),
                ))
            }
        }
    }
    r0.validate()?;
    for l in functionals {
        l.validate(grid)?;
    }
    if !(t >= 0.0) || substeps == 0 {
        return Err(Error::InvalidInput(format!(
            "need t >= 0 and substeps > 0, got t = {t}, substeps = {substeps}"
        )));
    }
    let taper = spec.taper(grid);
    let profile = |h: &CurveSpec, x: f64| h.eval(x, grid) * taper.map_or(1.0, |tp| tp.value(x));

    let mean = functionals
        .iter()
        .map(|l| eval_continuous(&|x| r0.eval(transported(grid, x, t), grid), l, grid))
        .collect();
    let k = functionals.len();
    let mut cov = vec![vec![0.0; k]; k];
    for h in &shapes {
        let sens = |u: f64| -> Vec<f64> {
            functionals
                .iter()
                .map(|l| eval_continuous(&|x| profile(h, transported(grid, x, u)), l, grid))
                .collect()
        };
        let n = substeps + substeps % 2;
        let du = t / n as f64;
        for i in 0..=n {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let s = sens(i as f64 * du);
            for a in 0..k {
                for b in 0..k {
                    cov[a][b] += w * du / 3.0 * s[a] * s[b];
                }
            }
        }
    }
    Ok(GaussianLaw { mean, cov })
}

/// `(flow(r0 + eps h) - flow(r0 - eps h)) / (2 eps)` at the final step,
/// both flows driven by `noise`.
pub fn fd_jacobian_action(
    model: &FieldModel,
    r0: &Curve,
    noise: &[Vec<f64>],
    h: &Curve,
    eps: f64,
    cfg: &SimConfig,
) -> Result<Curve> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let mut cfg = cfg.clone();
    cfg.record_jacobian = false;
    cfg.record_inverse_adjoint = false;
    let mut plus = r0.clone();
    plus.axpy(eps, h);
    let mut minus = r0.clone();
    minus.axpy(-eps, h);
    let a = simulate_with_noise(model, &plus, &cfg, noise.to_vec(), 0, 0)?;
    let b = simulate_with_noise(model, &minus, &cfg, noise.to_vec(), 0, 0)?;
    Ok((a.terminal() - b.terminal()).scaled(0.5 / eps))
}

#[derive(Clone, Debug, Serialize)]
pub struct Moments {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Unbiased sample covariance.
    pub cov: Vec<Vec<f64>>,
    /// `sqrt(cov_aa / n)`.
    pub standard_errors: Vec<f64>,
}

/// Moments of `samples[path][coordinate]`.
pub fn mc_moments(samples: &[Vec<f64>]) -> Result<Moments> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    let k = samples[0].len();
    if samples.iter().any(|s| s.len() != k) {
        return Err(Error::InvalidInput("samples have different lengths".into()));
    }
    let mut mean = vec![0.0; k];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; k]; k];
    for s in samples {
        for a in 0..k {
            let da = s[a] - mean[a];
            for b in 0..k {
                cov[a][b] += da * (s[b] - mean[b]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|c| *c /= (n - 1) as f64);
    let standard_errors = (0..k).map(|a| (cov[a][a] / n as f64).sqrt()).collect();
    Ok(Moments {
        n,
        mean,
        cov,
        standard_errors,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CovComparison {
    pub rel_frobenius: f64,
    /// `(mc - oracle) / sqrt((o_aa o_bb + o_ab^2) / n)`.
    pub z: Vec<Vec<f64>>,
    pub max_abs_z: f64,
    pub z_threshold: f64,
    pub flagged: Vec<(usize, usize)>,
    pub pass: bool,
}

/// Two-sided normal quantile for a pass probability, e.g. `0.9999 -> 3.89`.
pub fn z_for_two_sided(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!(
            "probability {p} outside (0, 1)"
        )));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 + 0.5 * p))
}

pub fn compare_cov(
    mc: &[Vec<f64>],
    oracle: &[Vec<f64>],
    n_paths: usize,
    z_threshold: f64,
) -> Result<CovComparison> {
    let k = oracle.len();
    if mc.len() != k || mc.iter().chain(oracle).any(|r| r.len() != k) {
        return Err(Error::InvalidInput("covariance shapes differ".into()));
    }
    let mut diff2 = 0.0;
    let mut norm2 = 0.0;
    let mut z = vec![vec![0.0; k]; k];
    let mut flagged = Vec::new();
    let mut max_abs_z: f64 = 0.0;
    for a in 0..k {
        for b in 0..k {
            let d = mc[a][b] - oracle[a][b];
            diff2 += d * d;
            norm2 += oracle[a][b] * oracle[a][b];
            let var = (oracle[a][a] * oracle[b][b] + oracle[a][b] * oracle[a][b]) / n_paths as f64;
            let zi = if var > 0.0 {
                d / var.sqrt()
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            z[a][b] = zi;
            max_abs_z = max_abs_z.max(zi.abs());
            if zi.abs() >= z_threshold {
                flagged.push((a, b));
            }
        }
    }
    let rel_frobenius = if norm2 > 0.0 {
        (diff2 / norm2).sqrt()
    } else if diff2 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(CovComparison {
        rel_frobenius,
        z,
        max_abs_z,
        z_threshold,
        pass: flagged.is_empty(),
        flagged,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussianityReport {
    pub n: usize,
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
    pub se_skewness: f64,
    pub se_kurtosis: f64,
    /// Coordinates with skewness or kurtosis beyond 4 standard errors.
    pub flagged: Vec<usize>,
    /// Coordinates with zero variance.
    pub degenerate: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn gaussianity_check(samples: &[Vec<f64>]) -> Result<GaussianityReport> {
    let n = samples.len();
    if n < 100 {
        return Err(Error::InvalidInput(format!(
            "gaussianity check needs at least 100 samples, got {n}"
        )));
    }
    let k = samples[0].len();
    let nf = n as f64;
    let se_skewness = (6.0 / nf).sqrt();
    let se_kurtosis = (24.0 / nf).sqrt();
    let mut skewness = Vec::with_capacity(k);
    let mut excess_kurtosis = Vec::with_capacity(k);
    let mut flagged = Vec::new();
    let mut degenerate = Vec::new();
    let mut warnings = Vec::new();
    for a in 0..k {
        let mean = samples.iter().map(|s| s[a]).sum::<f64>() / nf;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for s in samples {
            let d = s[a] - mean;
            m2 += d * d;
            m3 += d * d * d;
            m4 += d * d * d * d;
        }
        m2 /= nf;
        m3 /= nf;
        m4 /= nf;
        if m2 <= 1e-30 * mean * mean || m2 == 0.0 {
            degenerate.push(a);
            warnings.push(format!("coordinate {a} has zero variance"));
            skewness.push(0.0);
            excess_kurtosis.push(0.0);
            continue;
        }
        let sk = m3 / m2.powf(1.5);
        let ku = m4 / (m2 * m2) - 3.0;
        if sk.abs() > 4.0 * se_skewness || ku.abs() > 4.0 * se_kurtosis {
            flagged.push(a);
        }
        skewness.push(sk);
        excess_kurtosis.push(ku);
    }
    Ok(GaussianityReport {
        n,
        skewness,
        excess_kurtosis,
        se_skewness,
        se_kurtosis,
        flagged,
        degenerate,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{DriftMode, FieldSpec, GateFn, GateSpec, TaperChoice};
    use crate::grid::make_grid;
    use crate::sim::{brownian_increments, propagate_jacobian, simulate_path, Scheme};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, StandardNormal};

    fn flat() -> GridSpec {
        make_grid(-4.0, 16.0, 201, BoundaryMode::FlatExtrapolate).unwrap()
    }

    fn bump_spec() -> ModelSpec {
        ModelSpec {
            fields: vec![FieldConfig::Additive {
                h: CurveSpec::unit_gaussian(),
            }],
            drift: DriftConfig::Zero,
            taper: TaperChoice::Auto,
            state_offset: 0.0,
        }
    }

    #[test]
    fn zero_horizon() {
        let g = flat();
        let r0 = CurveSpec::NelsonSiegel {
            level: 0.04,
            slope: -0.01,
            curvature: 0.01,
            tau: 2.0,
        };
        let f = vec![
            LinearFunctional::Yield(1.0),
            LinearFunctional::PointEval(2.0),
        ];
        let law = gaussian_mean_cov(&bump_spec(), &g, &r0, &f, 0.0, 100).unwrap();
        assert!(law.cov.iter().flatten().all(|&c| c == 0.0));
        assert_eq!(law.mean[1], r0.eval(2.0, &g));
    }

    #[test]
    fn point_eval_scalar_integral() {
        let g = flat();
        let law = gaussian_mean_cov(
            &bump_spec(),
            &g,
            &CurveSpec::Constant { level: 0.03 },
            &[LinearFunctional::PointEval(0.5)],
            1.0,
            200,
        )
        .unwrap();
        // int_0^1 e^{-(0.5+u)^2} du = sqrt(pi)/2 (erf(1.5) - erf(0.5))
        let erf = |x: f64| statrs::function::erf::erf(x);
        let exact = std::f64::consts::PI.sqrt() / 2.0 * (erf(1.5) - erf(0.5));
        assert!((law.cov[0][0] - exact).abs() < 1e-10);
        assert_eq!(law.mean[0], 0.03);
    }

    #[test]
    fn oracle_is_psd_and_self_converged() {
        let g = flat();
        let f: Vec<_> = [0.5, 1.0, 2.0, 3.0, 5.0]
            .iter()
            .map(|&x| LinearFunctional::Yield(x))
            .collect();
        let a = gaussian_mean_cov(
            &bump_spec(),
            &g,
            &CurveSpec::Constant { level: 0.0 },
            &f,
            1.0,
            1000,
        )
        .unwrap();
        let b = gaussian_mean_cov(
            &bump_spec(),
            &g,
            &CurveSpec::Constant { level: 0.0 },
            &f,
            1.0,
            2000,
        )
        .unwrap();
        let m = nalgebra::DMatrix::from_fn(5, 5, |i, j| a.cov[i][j]);
        let ev = nalgebra::SymmetricEigen::new(m.clone()).eigenvalues;
        assert!(ev.min() >= -1e-14 * m.trace());
        let diff: f64 = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| (a.cov[i][j] - b.cov[i][j]).powi(2))
            .sum();
        assert!(diff.sqrt() < 1e-10 * m.norm());
    }

    #[test]
    fn oracle_rejects_non_additive() {
        let g = flat();
        let mut spec = bump_spec();
        spec.drift = DriftConfig::Hjm;
        assert!(gaussian_mean_cov(
            &spec,
            &g,
            &CurveSpec::Constant { level: 0.0 },
            &[LinearFunctional::Yield(1.0)],
            1.0,
            10
        )
        .is_err());
        let spec = ModelSpec {
            fields: vec![FieldConfig::ExpDecay {
                c: 0.01,
                lambda: 1.0,
            }],
            ..bump_spec()
        };
        assert!(gaussian_mean_cov(
            &spec,
            &g,
            &CurveSpec::Constant { level: 0.0 },
            &[LinearFunctional::Yield(1.0)],
            1.0,
            10
        )
        .is_err());
    }

    fn periodic() -> GridSpec {
        make_grid(-8.0, 7.875, 128, BoundaryMode::Periodic).unwrap()
    }

    #[test]
    fn fd_flow_of_additive_is_shift() {
        let g = periodic();
        let spec = bump_spec();
        let m = spec.build(&g).unwrap();
        let cfg = SimConfig::new(&g, 1.0, Scheme::ItoSplit);
        let noise = brownian_increments(3, 0, 8, 1, g.dx);
        let r0 = Curve::constant(g, 0.03);
        let h = Curve::from_fn(g, |x| (0.5 * x).sin());
        let fd = fd_jacobian_action(&m, &r0, &noise, &h, 1e-4, &cfg).unwrap();
        let shifted = crate::grid::shift_by_steps(&h, 8);
        assert!((&fd - &shifted).max_abs() < 1e-10);
        assert!(fd_jacobian_action(&m, &r0, &noise, &h, 0.0, &cfg).is_err());
        // exact linearity of the affine flow
        let h2 = Curve::from_fn(g, |x| (-x * x).exp());
        let sum = fd_jacobian_action(&m, &r0, &noise, &(&h + &h2), 1e-4, &cfg).unwrap();
        let parts = &fd + &fd_jacobian_action(&m, &r0, &noise, &h2, 1e-4, &cfg).unwrap();
        assert!((&sum - &parts).max_abs() < 1e-10);
    }

    #[test]
    fn fd_matches_variational_on_scalar_gate() {
        let g = periodic();
        let bump = Curve::from_fn(g, |x| 0.01 * (-x * x / 2.0).exp());
        let gate = GateSpec {
            functional: LinearFunctional::PointEval(0.0),
            g: GateFn::Logistic {
                scale: 50.0,
                center: 0.03,
                amplitude: 0.02,
                offset: 0.005,
            },
        };
        let m = FieldModel::new(
            g,
            vec![FieldSpec::ScalarGate { h: bump, gate }],
            DriftMode::Zero,
        )
        .unwrap();
        let cfg = SimConfig::new(&g, 0.25, Scheme::ItoSplit);
        let r0 = Curve::from_fn(g, |x| 0.03 + 0.002 * (-x * x).exp());
        let b = simulate_path(&m, &r0, &cfg, 1, 0).unwrap();
        let h = Curve::from_fn(g, |x| (-(x - 0.3).powi(2)).exp());
        let var = propagate_jacobian(&m, &b, &h).unwrap().pop().unwrap();
        let fd1 = fd_jacobian_action(&m, &r0, &b.noise, &h, 1e-4, &cfg).unwrap();
        let fd2 = fd_jacobian_action(&m, &r0, &b.noise, &h, 5e-5, &cfg).unwrap();
        assert!((&var - &fd1).norm_l2() <= 1e-3 * var.norm_l2());
        // Richardson: the eps^2 error shrinks by about 4
        let e1 = (&var - &fd1).norm_l2();
        let e2 = (&var - &fd2).norm_l2();
        assert!(e2 < e1);
    }

    #[test]
    fn moments_examples() {
        let c = mc_moments(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(c.cov.iter().flatten().all(|&v| v == 0.0));
        let two = mc_moments(&[vec![1.0, 3.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(two.cov, vec![vec![0.5, -1.0], vec![-1.0, 2.0]]);
        assert!(mc_moments(&[vec![1.0]]).is_err());

        // known generator: x = z1, y = 0.5 z1 + z2
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec<f64>> = (0..20000)
            .map(|_| {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                vec![z1, 0.5 * z1 + z2]
            })
            .collect();
        let m = mc_moments(&samples).unwrap();
        let truth = vec![vec![1.0, 0.5], vec![0.5, 1.25]];
        let cmp = compare_cov(&m.cov, &truth, samples.len(), 3.0).unwrap();
        assert!(cmp.pass, "{cmp:?}");
        for a in 0..2 {
            assert!(m.mean[a].abs() < 3.0 * m.standard_errors[a]);
        }
    }

    #[test]
    fn compare_cov_examples() {
        let o = vec![vec![2.0, 0.5], vec![0.5, 1.0]];
        let same = compare_cov(&o, &o, 100, 4.0).unwrap();
        assert_eq!(same.rel_frobenius, 0.0);
        assert!(same.pass);
        let inflated: Vec<Vec<f64>> = o
            .iter()
            .map(|r| r.iter().map(|v| v * 1.3).collect())
            .collect();
        let c = compare_cov(&inflated, &o, 100, 2.0).unwrap();
        assert!(!c.flagged.is_empty());
        // z for (0,0): 0.6 / sqrt((4 + 4) / 100)
        assert!((c.z[0][0] - 0.6 / (0.08f64).sqrt()).abs() < 1e-12);
        let zero = vec![vec![0.0; 2]; 2];
        let zz = compare_cov(&zero, &zero, 100, 4.0).unwrap();
        assert!(zz.pass && zz.rel_frobenius == 0.0);
        assert!(compare_cov(&zero, &o[..1], 10, 4.0).is_err());
        assert!((z_for_two_sided(0.95).unwrap() - 1.959964).abs() < 1e-5);
    }

    #[test]
    fn gaussianity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gauss: Vec<Vec<f64>> = (0..5000)
            .map(|_| vec![StandardNormal.sample(&mut rng)])
            .collect();
        assert!(gaussianity_check(&gauss).unwrap().flagged.is_empty());
        let exp = Exp::new(1.0).unwrap();
        let e: Vec<Vec<f64>> = (0..5000).map(|_| vec![exp.sample(&mut rng)]).collect();
        let rep = gaussianity_check(&e).unwrap();
        assert_eq!(rep.flagged, vec![0]);
        assert!(rep.excess_kurtosis[0] > 3.0);
        let c = gaussianity_check(&vec![vec![1.0]; 200]).unwrap();
        assert_eq!(c.degenerate, vec![0]);
        assert!(!c.warnings.is_empty());
        assert!(gaussianity_check(&gauss[..50]).is_err());
    }
}
