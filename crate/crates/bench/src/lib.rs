//! Fixtures shared by the kernel benchmarks.

use hjm_hypo_core::{
    make_grid, BoundaryMode, Curve, DriftMode, FieldModel, FieldSpec, GateFn, GateSpec, GridSpec,
    LinearFunctional,
};

/// Periodic grid on `[-8, 8)` with `n` nodes.
pub fn periodic(n: usize) -> GridSpec {
    let dx = 16.0 / n as f64;
    make_grid(-8.0, 8.0 - dx, n, BoundaryMode::Periodic).expect("valid grid")
}

pub fn initial_curve(g: GridSpec) -> Curve {
    Curve::from_fn(g, |x| 0.03 + 0.005 * (-x * x / 4.0).exp())
}

/// One gated field plus one additive field.
pub fn gate_model(g: GridSpec) -> FieldModel {
    let gate = GateSpec {
        functional: LinearFunctional::Yield(1.0),
        g: GateFn::Logistic {
            scale: 50.0,
            center: 0.03,
            amplitude: 0.02,
            offset: 0.005,
        },
    };
    FieldModel::new(
        g,
        vec![
            FieldSpec::ScalarGate {
                h: Curve::from_fn(g, |x| (-x * x / 2.0).exp()),
                gate,
            },
            FieldSpec::Additive {
                h: Curve::from_fn(g, |x| 0.01 * (-(x - 1.0).powi(2)).exp()),
            },
        ],
        DriftMode::Zero,
    )
    .expect("valid model")
}

pub fn additive_model(g: GridSpec) -> FieldModel {
    FieldModel::new(
        g,
        vec![FieldSpec::Additive {
            h: Curve::from_fn(g, |x| (-x * x / 2.0).exp()),
        }],
        DriftMode::Zero,
    )
    .expect("valid model")
}
