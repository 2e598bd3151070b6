//! Long-rate conservation and translation of a problem onto curves with a
//! zero long rate.

use crate::error::Result;
use crate::fields::FieldModel;
use crate::grid::{eval_functional, Curve, LinearFunctional};
use crate::sim::PathBundle;

/// `l_inf(r_k)` for every recorded state.
pub fn long_rate_series(bundle: &PathBundle) -> Result<Vec<f64>> {
    bundle
        .states
        .iter()
        .map(|s| eval_functional(&LinearFunctional::LongRate, s))
        .collect()
}

/// Largest `|l_inf(r_k) - l_inf(r_0)|`.
pub fn long_rate_deviation(series: &[f64]) -> f64 {
    series
        .iter()
        .map(|v| (v - series[0]).abs())
        .fold(0.0, f64::max)
}

pub fn write_long_rate_csv<W: std::io::Write>(
    times: &[f64],
    series: &[f64],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "long_rate"])?;
    for (t, v) in times.iter().zip(series) {
        w.write_record([format!("{t:e}"), format!("{v:e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Translated {
    /// Fields evaluated at `r + c`.
    pub model: FieldModel,
    /// `r0 - c`, with zero long rate.
    pub r_star: Curve,
    /// `c = l_inf(r0)`.
    pub level: f64,
}

/// Moves `r0` onto the zero-long-rate subspace and compensates in the fields.
pub fn translate_to_h0(model: &FieldModel, r0: &Curve) -> Result<Translated> {
    let level = eval_functional(&LinearFunctional::LongRate, r0)?;
    if level == 0.0 {
        return Ok(Translated {
            model: model.clone(),
            r_star: r0.clone(),
            level,
        });
    }
    let shifted = model
        .clone()
        .with_state_offset(model.state_offset() + level)?;
    Ok(Translated {
        model: shifted,
        r_star: r0.map(|v| v - level),
        level,
    })
}

impl Translated {
    /// Adds the level back to a translated state.
    pub fn restore(&self, r: &Curve) -> Curve {
        r.map(|v| v + self.level)
    }
}
