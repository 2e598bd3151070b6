//! Analytic curve shapes used to describe initial curves and volatility
//! profiles in configs. A shape can be sampled onto a grid or evaluated at an
//! arbitrary maturity (the Gaussian oracle needs the latter).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Curve, GridSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveSpec {
    Constant {
        level: f64,
    },
    /// `amplitude * exp(-(x - center)^2 / (2 width^2))`
    Gaussian {
        amplitude: f64,
        center: f64,
        width: f64,
    },
    /// `amplitude * exp(-rate x)`
    Exponential {
        amplitude: f64,
        rate: f64,
    },
    /// `amplitude * x * exp(-rate x)`
    Hump {
        amplitude: f64,
        rate: f64,
    },
    NelsonSiegel {
        level: f64,
        slope: f64,
        curvature: f64,
        tau: f64,
    },
    /// Explicit node values; evaluated off-grid by linear interpolation.
    Values {
        values: Vec<f64>,
    },
}

impl CurveSpec {
    /// Unit-height, unit-width bump `e^{-x^2/2}`.
    pub fn unit_gaussian() -> Self {
        CurveSpec::Gaussian {
            amplitude: 1.0,
            center: 0.0,
            width: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidModel(format!("curve shape: {m}")));
        match self {
            CurveSpec::Gaussian { width, .. } if !(*width > 0.0) => {
                bad("gaussian width must be positive")
            }
            CurveSpec::NelsonSiegel { tau, .. } if !(*tau > 0.0) => {
                bad("nelson_siegel tau must be positive")
            }
            CurveSpec::Values { values } if values.iter().any(|v| !v.is_finite()) => {
                bad("non-finite values")
            }
            _ => Ok(()),
        }
    }

    /// Value at maturity `x`. `grid` is only consulted by `Values`.
    pub fn eval(&self, x: f64, grid: &GridSpec) -> f64 {
        match self {
            CurveSpec::Constant { level } => *level,
            CurveSpec::Gaussian {
                amplitude,
                center,
                width,
            } => {
                let z = (x - center) / width;
                amplitude * (-0.5 * z * z).exp()
            }
            CurveSpec::Exponential { amplitude, rate } => amplitude * (-rate * x).exp(),
            CurveSpec::Hump { amplitude, rate } => amplitude * x * (-rate * x).exp(),
            CurveSpec::NelsonSiegel {
                level,
                slope,
                curvature,
                tau,
            } => {
                let u = x / tau;
                let e = (-u).exp();
                level + slope * e + curvature * u * e
            }
            CurveSpec::Values { values } => {
                let pos = ((x - grid.x_min) / grid.dx).clamp(0.0, (values.len() - 1) as f64);
                let j = (pos.floor() as usize).min(values.len().saturating_sub(2));
                let s = pos - j as f64;
                if values.len() == 1 {
                    values[0]
                } else {
                    values[j] * (1.0 - s) + values[j + 1] * s
                }
            }
        }
    }

    pub fn sample(&self, grid: &GridSpec) -> Result<Curve> {
        self.validate()?;
        if let CurveSpec::Values { values } = self {
            return Curve::new(*grid, values.clone());
        }
        Curve::new(
            *grid,
            grid.nodes()
                .into_iter()
                .map(|x| self.eval(x, grid))
                .collect(),
        )
    }
}
