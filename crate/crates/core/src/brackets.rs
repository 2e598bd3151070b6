//! Iterated Lie brackets of the drift and volatility fields at a point, and
//! the numerical rank of their span.
//!
//! Vectors produced at depth one and beyond are re-entered as frozen
//! (state-independent) fields. This is exact for additive models and a
//! single-point approximation otherwise; [`RankReport::frozen_approximation`]
//! records when it applies.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{dir_derivative, DerivativeMethod, FieldModel, VectorField};
use crate::grid::{apply_generator, Curve};

/// Deepest bracket level accepted by [`generate_basis`].
pub const MAX_DEPTH_LIMIT: usize = 12;

/// A vector field that can enter a bracket.
#[derive(Clone, Debug)]
pub enum BracketField {
    /// `sigma_i` from the model, with its state dependence.
    Catalog(usize),
    /// A fixed vector with zero derivative.
    Frozen(Curve),
}

impl BracketField {
    fn value(&self, model: &FieldModel, r: &Curve) -> Result<Curve> {
        match self {
            BracketField::Catalog(i) => model.sigma(*i, r),
            BracketField::Frozen(c) => Ok(c.clone()),
        }
    }

    fn derivative(
        &self,
        model: &FieldModel,
        r: &Curve,
        v: &Curve,
        method: DerivativeMethod,
    ) -> Result<Curve> {
        match self {
            BracketField::Catalog(i) => dir_derivative(model, VectorField::Sigma(*i), r, v, method),
            BracketField::Frozen(_) => Ok(Curve::zeros(*r.grid())),
        }
    }
}

/// `[V1, V2](r) = DV1(r) V2(r) - DV2(r) V1(r)`.
pub fn lie_bracket(
    model: &FieldModel,
    v1: &BracketField,
    v2: &BracketField,
    r: &Curve,
    method: DerivativeMethod,
) -> Result<Curve> {
    let a = v1.value(model, r)?;
    let b = v2.value(model, r)?;
    let mut out = v1.derivative(model, r, &b, method)?;
    out.axpy(-1.0, &v2.derivative(model, r, &a, method)?);
    Ok(out)
}

/// `[mu, V](r) = A V + D beta(r) V - DV(r) A r - DV(r) beta(r)`.
pub fn mu_bracket(
    model: &FieldModel,
    v: &BracketField,
    r: &Curve,
    method: DerivativeMethod,
) -> Result<Curve> {
    let val = v.value(model, r)?;
    let mut out = apply_generator(&val);
    out.axpy(
        1.0,
        &dir_derivative(model, VectorField::NonlocalDrift, r, &val, method)?,
    );
    if let BracketField::Catalog(_) = v {
        let mut push = apply_generator(r);
        push.axpy(1.0, &model.nonlocal_drift_part(r));
        out.axpy(-1.0, &v.derivative(model, r, &push, method)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Letter {
    Mu,
    Sigma(usize),
}

/// Construction record of a bracket vector. `letters[0]` is the seed
/// `Sigma(i)`; every later letter brackets from the left.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BracketWord {
    pub letters: Vec<Letter>,
}

impl BracketWord {
    pub fn seed(i: usize) -> Self {
        BracketWord {
            letters: vec![Letter::Sigma(i)],
        }
    }

    pub fn depth(&self) -> usize {
        self.letters.len() - 1
    }

    fn extended(&self, l: Letter) -> Self {
        let mut letters = self.letters.clone();
        letters.push(l);
        BracketWord { letters }
    }

    /// Nested form with one-based sigma indices, e.g. `[mu,[s1,s2]]`.
    pub fn label(&self) -> String {
        let name = |l: &Letter| match l {
            Letter::Mu => "mu".to_string(),
            Letter::Sigma(i) => format!("s{}", i + 1),
        };
        let mut s = name(&self.letters[0]);
        for l in &self.letters[1..] {
            s = format!("[{},{}]", name(l), s);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct BracketBasis {
    pub vectors: Vec<(BracketWord, Curve)>,
    pub r0: Curve,
    /// `depth_ranges[k]` indexes the depth-`k` vectors.
    pub depth_ranges: Vec<Range<usize>>,
    /// Some vector was frozen while the model depends on the state.
    pub frozen_approximation: bool,
}

impl BracketBasis {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.depth_ranges.len().saturating_sub(1)
    }

    /// One row per vector: label followed by the node values.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["word".to_string(), "depth".to_string()];
        header.extend(self.r0.grid().nodes().iter().map(|x| format!("{x}")));
        w.write_record(&header)?;
        for (word, c) in &self.vectors {
            let mut row = vec![word.label(), word.depth().to_string()];
            row.extend(c.values().iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BasisOptions {
    pub max_depth: usize,
    /// Relative projection residual below which a new vector is dropped.
    /// Exactly zero vectors are always dropped.
    pub prune_tol: Option<f64>,
    pub method: DerivativeMethod,
}

impl Default for BasisOptions {
    fn default() -> Self {
        BasisOptions {
            max_depth: 8,
            prune_tol: Some(1e-10),
            method: DerivativeMethod::Exact,
        }
    }
}

/// Orthonormal running basis for duplicate rejection.
struct Span {
    q: Vec<Vec<f64>>,
}

impl Span {
    /// Relative residual of `v` after projection; adds the direction if kept.
    fn try_add(&mut self, v: &[f64], tol: f64) -> bool {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut res = v.to_vec();
        for _ in 0..2 {
            for q in &self.q {
                let c: f64 = q.iter().zip(&res).map(|(a, b)| a * b).sum();
                res.iter_mut().zip(q).for_each(|(r, qi)| *r -= c * qi);
            }
        }
        let rn = res.iter().map(|x| x * x).sum::<f64>().sqrt();
        if rn < tol * norm {
            return false;
        }
        res.iter_mut().for_each(|r| *r /= rn);
        self.q.push(res);
        true
    }
}

/// Brackets of `{mu, sigma_1..sigma_d}` at `r0` up to `max_depth`.
pub fn generate_basis(model: &FieldModel, r0: &Curve, opts: &BasisOptions) -> Result<BracketBasis> {
    if opts.max_depth > MAX_DEPTH_LIMIT {
        return Err(Error::MaxDepthExceeded {
            requested: opts.max_depth,
            limit: MAX_DEPTH_LIMIT,
        });
    }
    if r0.grid() != model.grid() {
        return Err(Error::GridMismatch);
    }
    let mut span = Span { q: Vec::new() };
    let mut keep = |c: &Curve| -> bool {
        if c.max_abs() == 0.0 {
            return false;
        }
        match opts.prune_tol {
            Some(tol) => span.try_add(c.values(), tol),
            None => true,
        }
    };

    let mut vectors: Vec<(BracketWord, Curve)> = Vec::new();
    let mut fields: Vec<BracketField> = Vec::new();
    let mut depth_ranges = Vec::new();
    for i in 0..model.d() {
        let s = model.sigma(i, r0)?;
        // depth 0 is kept verbatim
        keep(&s);
        vectors.push((BracketWord::seed(i), s));
        fields.push(BracketField::Catalog(i));
    }
    depth_ranges.push(0..vectors.len());

    for _ in 0..opts.max_depth {
        let prev = depth_ranges.last().unwrap().clone();
        let start = vectors.len();
        for k in prev {
            let word = vectors[k].0.clone();
            let v = fields[k].clone();
            let mut candidates = vec![(Letter::Mu, mu_bracket(model, &v, r0, opts.method)?)];
            for i in 0..model.d() {
                candidates.push((
                    Letter::Sigma(i),
                    lie_bracket(model, &BracketField::Catalog(i), &v, r0, opts.method)?,
                ));
            }
            for (letter, c) in candidates {
                if !c.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "bracket {}",
                        word.extended(letter).label()
                    )));
                }
                if keep(&c) {
                    fields.push(BracketField::Frozen(c.clone()));
                    vectors.push((word.extended(letter), c));
                }
            }
        }
        depth_ranges.push(start..vectors.len());
    }
    let frozen_approximation = !model.is_state_independent() && opts.max_depth >= 2;
    Ok(BracketBasis {
        vectors,
        r0: r0.clone(),
        depth_ranges,
        frozen_approximation,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RankReport {
    /// Singular values of the full stacked basis, descending.
    pub singular_values: Vec<f64>,
    pub rank_at_depth: Vec<usize>,
    pub count_at_depth: Vec<usize>,
    pub window: Range<usize>,
    pub tol_used: f64,
    pub frozen_approximation: bool,
}

/// Default relative threshold `1e-8 n_points`.
pub fn default_rank_tol(n_points: usize) -> f64 {
    1e-8 * n_points as f64
}

fn singular_values(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    if rows.is_empty() {
        return Vec::new();
    }
    let m = DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn rank_of(s: &[f64], tol: f64) -> usize {
    match s.first() {
        Some(&s1) if s1 > 0.0 => s.iter().filter(|&&v| v > tol * s1).count(),
        _ => 0,
    }
}

/// Numerical rank of the basis restricted to `window`, cumulatively by depth.
/// Each restricted vector is scaled to unit length first.
pub fn numeric_rank(
    basis: &BracketBasis,
    window: Range<usize>,
    tol_rel: f64,
) -> Result<RankReport> {
    if basis.is_empty() {
        return Err(Error::EmptyBasis);
    }
    let n = basis.r0.len();
    if window.is_empty() || window.end > n {
        return Err(Error::InvalidInput(format!(
            "window {window:?} invalid for {n} points"
        )));
    }
    let rows: Vec<Vec<f64>> = basis
        .vectors
        .iter()
        .map(|(_, c)| {
            let w = c.restrict(window.clone());
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                w.iter().map(|x| x / norm).collect()
            } else {
                w.to_vec()
            }
        })
        .collect();
    let width = window.len();
    let mut rank_at_depth = Vec::with_capacity(basis.depth_ranges.len());
    let mut count_at_depth = Vec::with_capacity(basis.depth_ranges.len());
    let mut last = Vec::new();
    for r in &basis.depth_ranges {
        last = singular_values(&rows[..r.end], width);
        rank_at_depth.push(rank_of(&last, tol_rel));
        count_at_depth.push(r.end);
    }
    Ok(RankReport {
        singular_values: last,
        rank_at_depth,
        count_at_depth,
        window,
        tol_used: tol_rel,
        frozen_approximation: basis.frozen_approximation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum HormanderVerdict {
    /// Rank grows with depth and fills the window (or the vector count).
    SaturatesH0,
    /// Rank stuck at `m` below the target for the last three depths.
    FiniteDimensional(usize),
    Inconclusive,
}

pub fn hormander_verdict(report: &RankReport, target_dim: usize) -> HormanderVerdict {
    let ranks = &report.rank_at_depth;
    let (Some(&first), Some(&last)) = (ranks.first(), ranks.last()) else {
        return HormanderVerdict::Inconclusive;
    };
    let count = report.count_at_depth.last().copied().unwrap_or(0);
    if ranks.len() >= 2 && last > first && last >= target_dim.min(count) {
        return HormanderVerdict::SaturatesH0;
    }
    if ranks.len() >= 3 && last < target_dim && ranks[ranks.len() - 3..].iter().all(|&r| r == last)
    {
        return HormanderVerdict::FiniteDimensional(last);
    }
    HormanderVerdict::Inconclusive
}
