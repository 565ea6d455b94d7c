//! Collocation system assembly, weight solves, constrained-field evaluation,
//! and gradient propagation through the solve (adjoint method).
//!
//! One basis per constraint row. For scalar basis families one matrix is
//! shared across output channels; vector-valued (polynomial) families carry
//! one matrix per channel.

use crate::basis::{Basis, PointCotangents};
use crate::diff::{DerivativeBundle, ParamGrad};
use crate::linalg::{
    cond_surrogate_from, cond_surrogate_grad_from, inverse, lu_factor, lu_solve,
    lu_solve_transpose, DenseMatrix, LuFactorization,
};
use crate::operators::{apply_resolved, CoeffRegistry, LinearOperator};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

/// One collocation row: apply `op` at `anchor`, require the result to equal
/// `target` (one value per output channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub op: LinearOperator,
    pub anchor: Vec<f64>,
    pub target: Vec<f64>,
}

/// Ordered constraints plus the coefficient registry used to resolve named
/// operator coefficients. Duplicate `(op, anchor)` pairs are rejected: with
/// kernel bases they provably singularize the system.
pub struct ConstraintSet {
    constraints: Vec<Constraint>,
    dim: usize,
    channels: usize,
    registry: Arc<CoeffRegistry>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>, registry: Arc<CoeffRegistry>) -> Result<Self> {
        if constraints.is_empty() {
            return Err(Error::BadConfig("constraint set is empty".into()));
        }
        let dim = constraints[0].anchor.len();
        let channels = constraints[0].target.len();
        for (r, c) in constraints.iter().enumerate() {
            if c.anchor.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "constraint {r}: anchor dimension {} != {dim}",
                    c.anchor.len()
                )));
            }
            if c.target.len() != channels {
                return Err(Error::DimensionMismatch(format!(
                    "constraint {r}: target has {} channels, expected {channels}",
                    c.target.len()
                )));
            }
            if c.op.input_dims() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "constraint {r}: operator over {} dims, anchors have {dim}",
                    c.op.input_dims()
                )));
            }
            if !c.anchor.iter().chain(&c.target).all(|v| v.is_finite()) {
                return Err(Error::BadConfig(format!(
                    "constraint {r}: non-finite anchor or target"
                )));
            }
        }
        for i in 0..constraints.len() {
            for j in (i + 1)..constraints.len() {
                if constraints[i].op == constraints[j].op
                    && constraints[i].anchor == constraints[j].anchor
                {
                    return Err(Error::BadConfig(format!(
                        "constraints {i} and {j} duplicate the same (operator, anchor) pair"
                    )));
                }
            }
        }
        Ok(Self { constraints, dim, channels, registry })
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn registry(&self) -> &CoeffRegistry {
        &self.registry
    }

    pub fn registry_arc(&self) -> Arc<CoeffRegistry> {
        Arc::clone(&self.registry)
    }

    /// Anchor list in constraint order (the usual basis-anchor layout).
    pub fn anchors(&self) -> Vec<Vec<f64>> {
        self.constraints.iter().map(|c| c.anchor.clone()).collect()
    }

    /// Max abs target value over all rows and channels.
    pub fn targets_inf_norm(&self) -> f64 {
        self.constraints
            .iter()
            .flat_map(|c| &c.target)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Replaces the targets row by row (same shapes), e.g. for inference-only
    /// re-solves on new data.
    pub fn set_targets(&mut self, targets: &[Vec<f64>]) -> Result<()> {
        if targets.len() != self.constraints.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} target rows, got {}",
                self.constraints.len(),
                targets.len()
            )));
        }
        for (c, t) in self.constraints.iter_mut().zip(targets) {
            if t.len() != self.channels || !t.iter().all(|v| v.is_finite()) {
                return Err(Error::BadTarget("target row shape or finiteness".into()));
            }
            c.target = t.clone();
        }
        Ok(())
    }
}

enum SystemMatrices {
    /// Scalar basis: one matrix shared by every output channel.
    Shared {
        matrix: DenseMatrix,
        lu: LuFactorization,
        inv: DenseMatrix,
    },
    /// Vector basis: one matrix per output channel.
    PerChannel {
        matrices: Vec<DenseMatrix>,
        lus: Vec<LuFactorization>,
    },
}

/// Assembled collocation system: matrix (or per-channel matrices), right-hand
/// sides, factorization, and the condition surrogate.
pub struct CollocationSystem {
    mats: SystemMatrices,
    /// `rhs[r * channels + n]`
    rhs: Vec<f64>,
    size: usize,
    channels: usize,
    cond: f64,
}

impl CollocationSystem {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Frobenius condition surrogate (max over channels for vector systems).
    pub fn cond(&self) -> f64 {
        self.cond
    }

    pub fn is_shared(&self) -> bool {
        matches!(self.mats, SystemMatrices::Shared { .. })
    }

    /// The shared matrix (scalar-basis systems).
    pub fn matrix(&self) -> Option<&DenseMatrix> {
        match &self.mats {
            SystemMatrices::Shared { matrix, .. } => Some(matrix),
            SystemMatrices::PerChannel { .. } => None,
        }
    }

    pub fn channel_matrix(&self, n: usize) -> &DenseMatrix {
        match &self.mats {
            SystemMatrices::Shared { matrix, .. } => matrix,
            SystemMatrices::PerChannel { matrices, .. } => &matrices[n],
        }
    }

    fn channel_lu(&self, n: usize) -> &LuFactorization {
        match &self.mats {
            SystemMatrices::Shared { lu, .. } => lu,
            SystemMatrices::PerChannel { lus, .. } => &lus[n],
        }
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    fn rhs_channel(&self, n: usize) -> Vec<f64> {
        (0..self.size)
            .map(|r| self.rhs[r * self.channels + n])
            .collect()
    }
}

/// Assembles the collocation matrix rowwise: entry `(r, c)` applies
/// constraint `r`'s operator to basis `c` at constraint `r`'s anchor.
/// Factorizes and computes the condition surrogate.
pub fn assemble(family: &dyn Basis, constraints: &ConstraintSet) -> Result<CollocationSystem> {
    let n = constraints.len();
    if family.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "family has {} bases but the constraint set has {n} rows",
            family.len()
        )));
    }
    if family.input_dim() != constraints.dim() {
        return Err(Error::DimensionMismatch(format!(
            "family input dim {} != constraint dim {}",
            family.input_dim(),
            constraints.dim()
        )));
    }
    let channels = constraints.channels();
    if family.channels() != 1 && family.channels() != channels {
        return Err(Error::DimensionMismatch(format!(
            "family channels {} incompatible with {} target channels",
            family.channels(),
            channels
        )));
    }
    let rhs: Vec<f64> = constraints
        .constraints()
        .iter()
        .flat_map(|c| c.target.clone())
        .collect();

    if family.channels() == 1 {
        let compute_row = |c: &Constraint| -> Result<Vec<f64>> {
            let bundle = family.eval_all(&c.anchor, c.op.order())?;
            let coeffs = c.op.resolve_coeffs(&c.anchor, constraints.registry())?;
            apply_resolved(&c.op, &bundle, &coeffs)
        };
        let rows: Vec<Result<Vec<f64>>> = if n >= 64 {
            constraints.constraints().par_iter().map(compute_row).collect()
        } else {
            constraints.constraints().iter().map(compute_row).collect()
        };
        let mut matrix = DenseMatrix::zeros(n, n);
        for (r, row) in rows.into_iter().enumerate() {
            let row = row?;
            for (c, v) in row.into_iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::BadConfig(format!(
                        "non-finite matrix entry at ({r},{c})"
                    )));
                }
                matrix.set(r, c, v);
            }
        }
        let lu = lu_factor(&matrix)?;
        let inv = inverse(&lu);
        let cond = matrix.frobenius_norm() * inv.frobenius_norm();
        Ok(CollocationSystem {
            mats: SystemMatrices::Shared { matrix, lu, inv },
            rhs,
            size: n,
            channels,
            cond,
        })
    } else {
        let mut matrices = vec![DenseMatrix::zeros(n, n); channels];
        for (r, cons) in constraints.constraints().iter().enumerate() {
            let coeffs = cons.op.resolve_coeffs(&cons.anchor, constraints.registry())?;
            for c in 0..n {
                let bundle = family.eval(c, &cons.anchor, cons.op.order())?;
                let vals = apply_resolved(&cons.op, &bundle, &coeffs)?;
                for (ch, v) in vals.into_iter().enumerate() {
                    matrices[ch].set(r, c, v);
                }
            }
        }
        let lus = matrices
            .iter()
            .map(lu_factor)
            .collect::<Result<Vec<_>>>()?;
        let cond = matrices
            .iter()
            .zip(&lus)
            .map(|(m, f)| cond_surrogate_from(m, f))
            .fold(0.0_f64, f64::max);
        Ok(CollocationSystem {
            mats: SystemMatrices::PerChannel { matrices, lus },
            rhs,
            size: n,
            channels,
            cond,
        })
    }
}

/// Solves for the weight matrix `B` (`size x channels`, row-major).
pub fn solve_weights(system: &CollocationSystem) -> Result<Vec<f64>> {
    let (n, channels) = (system.size, system.channels);
    let mut weights = vec![0.0; n * channels];
    for ch in 0..channels {
        let b = system.rhs_channel(ch);
        let x = lu_solve(system.channel_lu(ch), &b)?;
        for (r, v) in x.into_iter().enumerate() {
            weights[r * channels + ch] = v;
        }
    }
    Ok(weights)
}

/// Per-channel max-abs residual `||A B - G||_inf`.
pub fn residual(system: &CollocationSystem, weights: &[f64]) -> Vec<f64> {
    let (n, channels) = (system.size, system.channels);
    let mut out = vec![0.0; channels];
    for ch in 0..channels {
        let col: Vec<f64> = (0..n).map(|r| weights[r * channels + ch]).collect();
        let ax = system
            .channel_matrix(ch)
            .matvec(&col)
            .expect("weight column length matches system size");
        let g = system.rhs_channel(ch);
        out[ch] = ax
            .iter()
            .zip(&g)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
    }
    out
}

/// Residual bound honoured by the solver: `64 eps kappa (||G||_inf + 1)`.
pub fn residual_bound(cond: f64, targets_inf: f64) -> f64 {
    64.0 * f64::EPSILON * cond * (targets_inf + 1.0)
}

/// A basis family bound to a constraint set with solved weights: constraints
/// hold by construction wherever the weights are fresh.
pub struct ConstrainedField {
    family: Box<dyn Basis>,
    constraints: ConstraintSet,
    system: Option<CollocationSystem>,
    weights: Option<Vec<f64>>,
    stale: bool,
}

impl ConstrainedField {
    pub fn new(family: Box<dyn Basis>, constraints: ConstraintSet) -> Result<Self> {
        if family.len() != constraints.len() {
            return Err(Error::DimensionMismatch(format!(
                "family has {} bases, constraint set has {} rows",
                family.len(),
                constraints.len()
            )));
        }
        Ok(Self {
            family,
            constraints,
            system: None,
            weights: None,
            stale: true,
        })
    }

    pub fn family(&self) -> &dyn Basis {
        self.family.as_ref()
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn channels(&self) -> usize {
        self.constraints.channels()
    }

    pub fn is_stale(&self) -> bool {
        self.stale
    }

    /// Updates family parameters and invalidates weights.
    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.family.set_params(p)?;
        self.stale = true;
        Ok(())
    }

    /// Swaps the targets (same constraint geometry) and invalidates weights.
    pub fn set_targets(&mut self, targets: &[Vec<f64>]) -> Result<()> {
        self.constraints.set_targets(targets)?;
        self.stale = true;
        Ok(())
    }

    /// Re-assembles and re-solves if stale.
    pub fn solve(&mut self) -> Result<()> {
        if !self.stale && self.system.is_some() {
            return Ok(());
        }
        let system = assemble(self.family.as_ref(), &self.constraints)?;
        let weights = solve_weights(&system)?;
        self.system = Some(system);
        self.weights = Some(weights);
        self.stale = false;
        Ok(())
    }

    pub fn system(&self) -> Result<&CollocationSystem> {
        if self.stale {
            return Err(Error::StaleWeights);
        }
        self.system.as_ref().ok_or(Error::StaleWeights)
    }

    /// Solved weights, `size x channels` row-major.
    pub fn weights(&self) -> Result<&[f64]> {
        if self.stale {
            return Err(Error::StaleWeights);
        }
        self.weights.as_deref().ok_or(Error::StaleWeights)
    }

    /// Max residual over channels for the current weights.
    pub fn max_residual(&self) -> Result<f64> {
        let system = self.system()?;
        let weights = self.weights()?;
        Ok(residual(system, weights).into_iter().fold(0.0, f64::max))
    }

    /// The residual bound for the current system.
    pub fn current_residual_bound(&self) -> Result<f64> {
        Ok(residual_bound(
            self.system()?.cond(),
            self.constraints.targets_inf_norm(),
        ))
    }

    /// Evaluates the field (optionally under a linear operator) at `x`.
    ///
    /// For compactly supported families a query with an empty support set
    /// returns the family's fallback value on every channel.
    pub fn eval(&self, x: &[f64], op: Option<&LinearOperator>) -> Result<Vec<f64>> {
        let weights = self.weights()?;
        let channels = self.channels();
        let order = op.map(|o| o.order()).unwrap_or(0);
        let family = self.family.as_ref();

        // Compact support: restrict to bases whose kernel is nonzero.
        let support: Option<Vec<usize>> = family.support_radius().map(|radius| {
            (0..family.len())
                .filter(|&i| {
                    let a = family.anchor(i).expect("compact families have anchors");
                    squared_dist(a, x) < radius * radius
                })
                .collect()
        });
        if let Some(ref s) = support {
            if s.is_empty() {
                let fb = family.fallback_value().unwrap_or(0.0);
                return Ok(vec![fb; channels]);
            }
        }

        let mut out = vec![0.0; channels];
        let coeffs = match op {
            Some(o) => Some(o.resolve_coeffs(x, self.constraints.registry())?),
            None => None,
        };
        if family.channels() == 1 {
            match support {
                None => {
                    let bundle = family.eval_all(x, order)?;
                    let vals = match (op, &coeffs) {
                        (Some(o), Some(cf)) => apply_resolved(o, &bundle, cf)?,
                        _ => bundle.value,
                    };
                    for (i, v) in vals.into_iter().enumerate() {
                        for ch in 0..channels {
                            out[ch] += weights[i * channels + ch] * v;
                        }
                    }
                }
                Some(idxs) => {
                    for i in idxs {
                        let bundle = family.eval(i, x, order)?;
                        let v = match (op, &coeffs) {
                            (Some(o), Some(cf)) => apply_resolved(o, &bundle, cf)?[0],
                            _ => bundle.value[0],
                        };
                        for ch in 0..channels {
                            out[ch] += weights[i * channels + ch] * v;
                        }
                    }
                }
            }
        } else {
            for i in 0..family.len() {
                let bundle = family.eval(i, x, order)?;
                let vals = match (op, &coeffs) {
                    (Some(o), Some(cf)) => apply_resolved(o, &bundle, cf)?,
                    _ => bundle.value,
                };
                for (ch, v) in vals.into_iter().enumerate() {
                    out[ch] += weights[i * channels + ch] * v;
                }
            }
        }
        Ok(out)
    }

    /// Gradient of a single-channel field at `x`.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let weights = self.weights()?;
        if self.channels() != 1 {
            return Err(Error::DimensionMismatch(
                "gradient() expects a single-channel field".into(),
            ));
        }
        let family = self.family.as_ref();
        let m = family.input_dim();
        if let Some(radius) = family.support_radius() {
            let mut g = vec![0.0; m];
            for i in 0..family.len() {
                let a = family.anchor(i).expect("compact families have anchors");
                if squared_dist(a, x) < radius * radius {
                    let b = family.eval(i, x, 1)?;
                    for k in 0..m {
                        g[k] += weights[i] * b.jac[k];
                    }
                }
            }
            return Ok(g);
        }
        let bundle = family.eval_all(x, 1)?;
        let mut g = vec![0.0; m];
        for i in 0..family.len() {
            for k in 0..m {
                g[k] += weights[i] * bundle.jac_at(i, k);
            }
        }
        Ok(g)
    }
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Bundle-shaped cotangent that pushes a sensitivity `scale` through `op`
/// applied to a single-channel basis bundle.
fn op_cotangent(op: &LinearOperator, coeffs: &[f64], scale: f64, inputs: usize) -> DerivativeBundle {
    let order = op.order();
    let mut cot = DerivativeBundle::zeros(1, inputs, order);
    for (term, &coeff) in op.terms.iter().zip(coeffs) {
        let w = coeff * scale;
        if w == 0.0 {
            continue;
        }
        let mut dims = term
            .multi_index
            .iter()
            .enumerate()
            .filter(|(_, &o)| o > 0)
            .flat_map(|(k, &o)| std::iter::repeat(k).take(o as usize));
        match (dims.next(), dims.next()) {
            (None, _) => cot.value[0] += w,
            (Some(k), None) => cot.jac[k] += w,
            (Some(k1), Some(k2)) => cot.hess[k1 * inputs + k2] += w,
        }
    }
    cot
}

fn chunk_rows(family: &dyn Basis, n: usize) -> usize {
    // Bound tape size: roughly len * cost nodes per collocation row.
    let cost = family.tape_cost_hint().max(1);
    let budget = 12_000_000usize;
    (budget / (n.max(1) * cost)).clamp(1, n.max(1))
}

/// Pushes a loss sensitivity through the linear solve by the adjoint method:
/// solves `A^T lambda = dL/dB` per channel, forms `dL/dA = -lambda B^T`, and
/// contracts it with the parameter sensitivities of the matrix entries.
/// Targets are parameter-independent, so no `dL/dG` term arises.
pub fn vjp_through_solve(
    system: &CollocationSystem,
    family: &dyn Basis,
    constraints: &ConstraintSet,
    weights: &[f64],
    d_weights: &[f64],
) -> Result<ParamGrad> {
    let (n, channels) = (system.size, system.channels);
    if d_weights.len() != n * channels || weights.len() != n * channels {
        return Err(Error::ShapeMismatch(format!(
            "weight cotangent must be {n} x {channels}"
        )));
    }
    if d_weights.iter().all(|&v| v == 0.0) {
        return Ok(ParamGrad::zeros(family.param_count()));
    }
    let mut lambdas = vec![vec![0.0; n]; channels];
    for ch in 0..channels {
        let rhs: Vec<f64> = (0..n).map(|r| d_weights[r * channels + ch]).collect();
        lambdas[ch] = lu_solve_transpose(system.channel_lu(ch), &rhs)?;
    }
    if system.is_shared() {
        contract_matrix_cotangent(family, constraints, |r, c| {
            let mut acc = 0.0;
            for ch in 0..channels {
                acc -= lambdas[ch][r] * weights[c * channels + ch];
            }
            acc
        })
    } else {
        contract_per_channel_cotangent(family, constraints, |r, c, ch| {
            -lambdas[ch][r] * weights[c * channels + ch]
        })
    }
}

/// Contracts an entrywise cotangent on the shared collocation matrix with
/// the parameter jacobian of the assembly, batched row by row on tapes.
pub fn contract_matrix_cotangent(
    family: &dyn Basis,
    constraints: &ConstraintSet,
    d_matrix: impl Fn(usize, usize) -> f64 + Sync,
) -> Result<ParamGrad> {
    let n = constraints.len();
    let m = constraints.dim();
    if family.channels() != 1 {
        return Err(Error::DimensionMismatch(
            "shared-matrix cotangent needs a scalar family".into(),
        ));
    }
    let rows_per_chunk = chunk_rows(family, n);
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(rows_per_chunk)
        .map(|start| (start, (start + rows_per_chunk).min(n)))
        .collect();
    let grads: Vec<Result<ParamGrad>> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut points = Vec::with_capacity(end - start);
            for r in start..end {
                let cons = &constraints.constraints()[r];
                let coeffs = cons
                    .op
                    .resolve_coeffs(&cons.anchor, constraints.registry())?;
                let mut per_basis = Vec::new();
                for c in 0..n {
                    let scale = d_matrix(r, c);
                    if scale != 0.0 {
                        per_basis.push((c, op_cotangent(&cons.op, &coeffs, scale, m)));
                    }
                }
                if !per_basis.is_empty() {
                    points.push(PointCotangents {
                        x: cons.anchor.clone(),
                        per_basis,
                    });
                }
            }
            if points.is_empty() {
                Ok(ParamGrad::zeros(family.param_count()))
            } else {
                family.param_grad_batch(&points)
            }
        })
        .collect();
    let mut total = ParamGrad::zeros(family.param_count());
    for g in grads {
        total.add_assign(&g?);
    }
    Ok(total)
}

/// Per-channel variant for vector families: `d_matrix(r, c, ch)` is the
/// cotangent on channel `ch`'s matrix entry.
fn contract_per_channel_cotangent(
    family: &dyn Basis,
    constraints: &ConstraintSet,
    d_matrix: impl Fn(usize, usize, usize) -> f64,
) -> Result<ParamGrad> {
    let n = constraints.len();
    let m = constraints.dim();
    let channels = family.channels();
    let mut points = Vec::with_capacity(n);
    for r in 0..n {
        let cons = &constraints.constraints()[r];
        let coeffs = cons
            .op
            .resolve_coeffs(&cons.anchor, constraints.registry())?;
        let mut per_basis = Vec::new();
        for c in 0..n {
            let mut cot = DerivativeBundle::zeros(channels, m, cons.op.order());
            let mut any = false;
            for ch in 0..channels {
                let scale = d_matrix(r, c, ch);
                if scale == 0.0 {
                    continue;
                }
                any = true;
                let scalar = op_cotangent(&cons.op, &coeffs, scale, m);
                cot.value[ch] += scalar.value[0];
                if scalar.order >= 1 {
                    for k in 0..m {
                        cot.jac[ch * m + k] += scalar.jac[k];
                    }
                }
                if scalar.order >= 2 {
                    for k in 0..m * m {
                        cot.hess[ch * m * m + k] += scalar.hess[k];
                    }
                }
            }
            if any {
                per_basis.push((c, cot));
            }
        }
        if !per_basis.is_empty() {
            points.push(PointCotangents {
                x: cons.anchor.clone(),
                per_basis,
            });
        }
    }
    if points.is_empty() {
        return Ok(ParamGrad::zeros(family.param_count()));
    }
    family.param_grad_batch(&points)
}

/// How a loss communicates its sensitivities to the gradient machinery.
///
/// `cotangents` carry `dL / d(field outputs)` at sample points; both the
/// direct parameter path and the solve-mediated path derive from them.
/// `cond_weight` adds `w * ln(cond)` with its gradient routed through the
/// assembly.
pub struct LossEval {
    pub value: f64,
    pub cotangents: Vec<FieldCotangent>,
    pub cond_weight: f64,
}

/// `dL/d value_n(x)` and `dL/d (d value_n / d x_k)` at one sample point.
#[derive(Debug, Clone)]
pub struct FieldCotangent {
    pub x: Vec<f64>,
    pub order: u8,
    /// Length N.
    pub d_value: Vec<f64>,
    /// N x M row-major; empty when `order == 0`.
    pub d_jac: Vec<f64>,
}

/// A differentiable training objective over a constrained field.
pub trait FieldLoss {
    fn evaluate(&self, field: &ConstrainedField, rng: &mut ChaCha8Rng) -> Result<LossEval>;
}

/// Full parameter gradient of a loss: the direct path (through basis
/// evaluations at the loss samples, weights held fixed) plus the indirect
/// path (through the solved weights, via the adjoint). Returns the loss
/// value and the gradient.
pub fn total_loss_grad(
    field: &mut ConstrainedField,
    loss: &dyn FieldLoss,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ParamGrad)> {
    field.solve()?;
    let eval = loss.evaluate(&*field, rng)?;
    let grad = loss_grad_from_eval(field, &eval)?;
    Ok((eval.value, grad))
}

/// Gradient assembly from an already-computed [`LossEval`].
pub fn loss_grad_from_eval(field: &ConstrainedField, eval: &LossEval) -> Result<ParamGrad> {
    let system = field.system()?;
    let weights = field.weights()?;
    let family = field.family();
    let constraints = field.constraints();
    let (n, channels) = (system.size(), system.channels());
    let m = constraints.dim();

    let mut total = ParamGrad::zeros(family.param_count());

    // Direct path and dL/dB accumulate from the same per-sample bundles.
    let mut d_weights = vec![0.0; n * channels];
    if !eval.cotangents.is_empty() {
        let max_pts = chunk_rows(family, n);
        let chunks: Vec<&[FieldCotangent]> = eval.cotangents.chunks(max_pts).collect();
        let results: Vec<Result<(ParamGrad, Vec<f64>)>> = chunks
            .par_iter()
            .map(|chunk| direct_chunk(family, n, channels, m, weights, chunk))
            .collect();
        for r in results {
            let (g, dw) = r?;
            total.add_assign(&g);
            for (a, b) in d_weights.iter_mut().zip(dw) {
                *a += b;
            }
        }
    }

    // Indirect path through the solve.
    if d_weights.iter().any(|&v| v != 0.0) {
        let g = vjp_through_solve(system, family, constraints, weights, &d_weights)?;
        total.add_assign(&g);
    }

    // Conditioning term: d(w ln kappa)/dA = (w / kappa) dkappa/dA.
    if eval.cond_weight != 0.0 {
        let matrix = system.matrix().ok_or_else(|| {
            Error::DimensionMismatch("conditioning loss needs a shared-matrix system".into())
        })?;
        let inv = match &system.mats {
            SystemMatrices::Shared { inv, .. } => inv,
            SystemMatrices::PerChannel { .. } => unreachable!(),
        };
        let kappa = system.cond();
        let dk = cond_surrogate_grad_from(matrix, inv)?;
        let w = eval.cond_weight / kappa;
        let g = contract_matrix_cotangent(family, constraints, |r, c| w * dk.at(r, c))?;
        total.add_assign(&g);
    }

    Ok(total)
}

/// Direct-path work for one chunk of loss samples: accumulates dL/dB and the
/// parameter gradient with weights held fixed.
fn direct_chunk(
    family: &dyn Basis,
    n: usize,
    channels: usize,
    m: usize,
    weights: &[f64],
    chunk: &[FieldCotangent],
) -> Result<(ParamGrad, Vec<f64>)> {
    let mut dw = vec![0.0; n * channels];
    let mut points = Vec::with_capacity(chunk.len());
    for cot in chunk {
        if cot.d_value.len() != channels || (cot.order >= 1 && cot.d_jac.len() != channels * m)
        {
            return Err(Error::ShapeMismatch("field cotangent shape mismatch".into()));
        }
        let mut per_basis = Vec::with_capacity(n);
        if family.channels() == 1 {
            let bundle = family.eval_all(&cot.x, cot.order)?;
            for i in 0..n {
                for ch in 0..channels {
                    let mut acc = cot.d_value[ch] * bundle.value[i];
                    if cot.order >= 1 {
                        for k in 0..m {
                            acc += cot.d_jac[ch * m + k] * bundle.jac_at(i, k);
                        }
                    }
                    dw[i * channels + ch] += acc;
                }
                // Cotangent on basis i's bundle: sum_ch B[i][ch] * channel ch.
                let mut bc = DerivativeBundle::zeros(1, m, cot.order);
                for ch in 0..channels {
                    let w = weights[i * channels + ch];
                    if w != 0.0 {
                        bc.value[0] += w * cot.d_value[ch];
                        if cot.order >= 1 {
                            for k in 0..m {
                                bc.jac[k] += w * cot.d_jac[ch * m + k];
                            }
                        }
                    }
                }
                if bc.value[0] != 0.0 || bc.jac.iter().any(|&v| v != 0.0) {
                    per_basis.push((i, bc));
                }
            }
        } else {
            for i in 0..n {
                let bundle = family.eval(i, &cot.x, cot.order)?;
                let mut bc = DerivativeBundle::zeros(channels, m, cot.order);
                for ch in 0..channels {
                    let mut acc = cot.d_value[ch] * bundle.value[ch];
                    if cot.order >= 1 {
                        for k in 0..m {
                            acc += cot.d_jac[ch * m + k] * bundle.jac_at(ch, k);
                        }
                    }
                    dw[i * channels + ch] += acc;
                    let w = weights[i * channels + ch];
                    bc.value[ch] = w * cot.d_value[ch];
                    if cot.order >= 1 {
                        for k in 0..m {
                            bc.jac[ch * m + k] = w * cot.d_jac[ch * m + k];
                        }
                    }
                }
                per_basis.push((i, bc));
            }
        }
        if !per_basis.is_empty() {
            points.push(PointCotangents {
                x: cot.x.clone(),
                per_basis,
            });
        }
    }
    let grad = if points.is_empty() {
        ParamGrad::zeros(family.param_count())
    } else {
        family.param_grad_batch(&points)?
    };
    Ok((grad, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{
        basis_param_grad, GaussianKernelBasis, PolynomialBasis, SkewedRbfBasis,
    };
    use crate::diff::{Activation, EncoderArch};
    use crate::operators::parse_operator;
    use rand::{Rng, SeedableRng};

    fn reg() -> Arc<CoeffRegistry> {
        Arc::new(CoeffRegistry::new())
    }

    fn identity_constraint(anchor: Vec<f64>, target: Vec<f64>, dims: &[&str]) -> Constraint {
        Constraint {
            op: LinearOperator::identity(dims),
            anchor,
            target,
        }
    }

    #[test]
    fn one_by_one_system() {
        // Single RBF with unit bandwidth anchored at 0: psi(0) = 1.
        let family = SkewedRbfBasis::init(vec![vec![0.0]], 1.0, false).unwrap();
        let set = ConstraintSet::new(
            vec![identity_constraint(vec![0.0], vec![3.0], &["x"])],
            reg(),
        )
        .unwrap();
        let system = assemble(&family, &set).unwrap();
        assert_eq!(system.matrix().unwrap().at(0, 0), 1.0);
        assert_eq!(system.rhs(), &[3.0]);
        let weights = solve_weights(&system).unwrap();
        assert_eq!(weights, vec![3.0]);
    }

    #[test]
    fn repeated_anchor_kernel_is_singular() {
        // Two gaussian-kernel bases at one shared anchor with {id, dx}
        // constraints: repeated columns.
        let arch = EncoderArch::mlp(&[1, 4, 3], Activation::Tanh).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let anchor = vec![0.3];
        let family = GaussianKernelBasis::init(
            arch,
            vec![anchor.clone(), anchor.clone()],
            1.0,
            true,
            &mut rng,
        )
        .unwrap();
        let set = ConstraintSet::new(
            vec![
                identity_constraint(anchor.clone(), vec![0.0], &["x"]),
                Constraint {
                    op: parse_operator("dx", &["x"]).unwrap(),
                    anchor: anchor.clone(),
                    target: vec![1.0],
                },
            ],
            reg(),
        )
        .unwrap();
        assert!(matches!(
            assemble(&family, &set),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn duplicate_op_anchor_rejected() {
        let c = identity_constraint(vec![0.1, 0.2], vec![1.0], &["x", "y"]);
        assert!(matches!(
            ConstraintSet::new(vec![c.clone(), c], reg()),
            Err(Error::BadConfig(_))
        ));
    }

    #[test]
    fn identity_like_system_broadcasts_channels() {
        // Far-apart anchors with a sharp RBF: the matrix is numerically the
        // identity, so each channel's weights equal its targets.
        let family = SkewedRbfBasis::init(vec![vec![0.0], vec![10.0]], 0.1, false).unwrap();
        let set = ConstraintSet::new(
            vec![
                identity_constraint(vec![0.0], vec![2.0, -1.0], &["x"]),
                identity_constraint(vec![10.0], vec![0.5, 4.0], &["x"]),
            ],
            reg(),
        )
        .unwrap();
        let system = assemble(&family, &set).unwrap();
        let w = solve_weights(&system).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-12);
        assert!((w[1] + 1.0).abs() < 1e-12);
        assert!((w[2] - 0.5).abs() < 1e-12);
        assert!((w[3] - 4.0).abs() < 1e-12);

        // Channel broadcast: per-channel solves with the shared factorization
        // match independent single-channel problems.
        for ch in 0..2 {
            let single = ConstraintSet::new(
                vec![
                    identity_constraint(vec![0.0], vec![set.constraints()[0].target[ch]], &["x"]),
                    identity_constraint(vec![10.0], vec![set.constraints()[1].target[ch]], &["x"]),
                ],
                reg(),
            )
            .unwrap();
            let fam = SkewedRbfBasis::init(vec![vec![0.0], vec![10.0]], 0.1, false).unwrap();
            let sys = assemble(&fam, &single).unwrap();
            let ws = solve_weights(&sys).unwrap();
            assert_eq!(ws[0], w[ch]);
            assert_eq!(ws[1], w[2 + ch]);
        }
    }

    fn gaussian_elimination_oracle(a: &DenseMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = a.row(i).to_vec();
                r.push(b[i]);
                r
            })
            .collect();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&x, &y| aug[x][k].abs().total_cmp(&aug[y][k].abs()))
                .unwrap();
            aug.swap(k, p);
            for i in (k + 1)..n {
                let f = aug[i][k] / aug[k][k];
                for j in k..=n {
                    aug[i][j] -= f * aug[k][j];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = aug[i][n];
            for j in (i + 1)..n {
                s -= aug[i][j] * x[j];
            }
            x[i] = s / aug[i][i];
        }
        x
    }

    fn random_rbf_problem(seed: u64, n: usize) -> (SkewedRbfBasis, ConstraintSet) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let anchors: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let family = SkewedRbfBasis::init(anchors.clone(), 0.6, false).unwrap();
        let constraints: Vec<Constraint> = anchors
            .iter()
            .map(|a| identity_constraint(a.clone(), vec![rng.gen_range(-1.0..1.0)], &["x", "y"]))
            .collect();
        (family, ConstraintSet::new(constraints, reg()).unwrap())
    }

    #[test]
    fn solve_matches_elimination_oracle_16x16() {
        let (family, set) = random_rbf_problem(7, 16);
        let system = assemble(&family, &set).unwrap();
        let w = solve_weights(&system).unwrap();
        let g: Vec<f64> = (0..16).map(|r| system.rhs()[r]).collect();
        let oracle = gaussian_elimination_oracle(system.matrix().unwrap(), &g);
        for (a, b) in w.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn residual_properties() {
        let (family, set) = random_rbf_problem(11, 12);
        let system = assemble(&family, &set).unwrap();
        let w = solve_weights(&system).unwrap();
        let res = residual(&system, &w);
        let bound = residual_bound(system.cond(), set.targets_inf_norm());
        assert!(res[0] <= bound, "residual {} bound {bound}", res[0]);

        // B = 0 gives ||G||_inf.
        let zero = vec![0.0; w.len()];
        let res0 = residual(&system, &zero);
        assert!((res0[0] - set.targets_inf_norm()).abs() <= 1e-15);

        // Perturbing one weight by 1e-3 moves A*B by at least 1e-3 times
        // the perturbed column's max entry (direct multiplication).
        let mut wp = w.clone();
        wp[3] += 1e-3;
        let resp = residual(&system, &wp);
        let a = system.matrix().unwrap();
        let col_max = (0..12).map(|r| a.at(r, 3).abs()).fold(0.0_f64, f64::max);
        assert!(resp[0] + res[0] >= 1e-3 * col_max * 0.999);
    }

    #[test]
    fn field_satisfies_constraints_at_anchors() {
        let (family, set) = random_rbf_problem(13, 10);
        let mut field = ConstrainedField::new(Box::new(family), set).unwrap();
        assert!(matches!(
            field.eval(&[0.0, 0.0], None),
            Err(Error::StaleWeights)
        ));
        field.solve().unwrap();
        let bound = field.current_residual_bound().unwrap();
        for cons in field.constraints().constraints().iter() {
            let v = field.eval(&cons.anchor, Some(&cons.op)).unwrap();
            assert!((v[0] - cons.target[0]).abs() <= bound);
        }
        assert!(field.max_residual().unwrap() <= bound);
    }

    #[test]
    fn single_basis_field_evaluation() {
        let family = SkewedRbfBasis::init(vec![vec![0.0]], 1.0, false).unwrap();
        let set = ConstraintSet::new(
            vec![identity_constraint(vec![0.0], vec![2.0], &["x"])],
            reg(),
        )
        .unwrap();
        let mut field = ConstrainedField::new(Box::new(family), set).unwrap();
        field.solve().unwrap();
        // B = 2; where psi = 0.5 the field is 1.0.
        let x = (2.0f64.ln() * 2.0).sqrt();
        let v = field.eval(&[x], None).unwrap();
        assert!((v[0] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn resolve_is_cached_and_bitwise_reproducible() {
        let (family, set) = random_rbf_problem(17, 8);
        let mut field = ConstrainedField::new(Box::new(family), set).unwrap();
        field.solve().unwrap();
        let w1 = field.weights().unwrap().to_vec();
        field.solve().unwrap();
        let w2 = field.weights().unwrap().to_vec();
        assert_eq!(w1, w2);
        // Forcing a re-solve with unchanged parameters is bit-identical.
        let p = field.family().params().to_vec();
        field.set_params(&p).unwrap();
        assert!(field.is_stale());
        field.solve().unwrap();
        assert_eq!(w1, field.weights().unwrap());
    }

    #[test]
    fn vjp_zero_cotangent_is_zero() {
        let (family, set) = random_rbf_problem(19, 6);
        let system = assemble(&family, &set).unwrap();
        let w = solve_weights(&system).unwrap();
        let g = vjp_through_solve(&system, &family, &set, &w, &vec![0.0; 6]).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vjp_scalar_chain_rule_exact() {
        // One basis anchored at 0, constrained at x0 != anchor:
        // beta = g / psi(x0), d beta / d theta = -g psi' / psi^2.
        let family = SkewedRbfBasis::init(vec![vec![0.0]], 0.8, false).unwrap();
        let x0 = vec![0.5];
        let g_target = 2.0;
        let set = ConstraintSet::new(
            vec![identity_constraint(x0.clone(), vec![g_target], &["x"])],
            reg(),
        )
        .unwrap();
        let system = assemble(&family, &set).unwrap();
        let w = solve_weights(&system).unwrap();
        let grad = vjp_through_solve(&system, &family, &set, &w, &[1.0]).unwrap();

        let lv = family.params()[0];
        let psi = (-(x0[0] * x0[0]) * (-lv).exp() / 2.0).exp();
        let dpsi = psi * x0[0] * x0[0] * (-lv).exp() / 2.0;
        let expected = -g_target * dpsi / (psi * psi);
        assert!(
            (grad.as_slice()[0] - expected).abs() <= 1e-12 * expected.abs().max(1.0),
            "adjoint {} expected {expected}",
            grad.as_slice()[0]
        );
    }

    #[test]
    fn vjp_matches_fd_on_gaussian_kernel_system() {
        // Loss = sum B^2 over an 8-constraint gaussian-kernel system.
        let arch = EncoderArch::mlp(&[2, 4, 3], Activation::Tanh).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let anchors: Vec<Vec<f64>> = (0..8)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let family =
            GaussianKernelBasis::init(arch.clone(), anchors.clone(), 1.2, true, &mut rng)
                .unwrap();
        let constraints: Vec<Constraint> = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| {
                identity_constraint(a.clone(), vec![(i as f64 * 0.7).sin() + 0.2], &["x", "y"])
            })
            .collect();
        let set = ConstraintSet::new(constraints, reg()).unwrap();

        let loss_of = |params: &[f64]| -> f64 {
            let fam =
                GaussianKernelBasis::new(arch.clone(), anchors.clone(), params.to_vec(), true)
                    .unwrap();
            let system = assemble(&fam, &set).unwrap();
            let w = solve_weights(&system).unwrap();
            w.iter().map(|v| v * v).sum()
        };

        let system = assemble(&family, &set).unwrap();
        let w = solve_weights(&system).unwrap();
        let d_w: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let analytic = vjp_through_solve(&system, &family, &set, &w, &d_w).unwrap();

        let p0 = family.params().to_vec();
        let scale = analytic
            .as_slice()
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(1e-2);
        let mut p = p0.clone();
        for s in 0..p0.len() {
            let h = 1e-5 * (1.0 + p0[s].abs());
            p[s] = p0[s] + h;
            let plus = loss_of(&p);
            p[s] = p0[s] - h;
            let minus = loss_of(&p);
            p[s] = p0[s];
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.as_slice()[s];
            assert!(
                (fd - a).abs() / scale <= 1e-4,
                "slot {s}: fd {fd} analytic {a}"
            );
        }
    }

    #[test]
    fn per_channel_polynomial_system() {
        // Two quadratic bases over R -> R^2, endpoint identity constraints.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let family = PolynomialBasis::init(2, 2, &mut rng).unwrap();
        let set = ConstraintSet::new(
            vec![
                identity_constraint(vec![0.0], vec![0.0, 1.0], &["x"]),
                identity_constraint(vec![1.0], vec![2.0, -1.0], &["x"]),
            ],
            reg(),
        )
        .unwrap();
        let mut field = ConstrainedField::new(Box::new(family), set).unwrap();
        field.solve().unwrap();
        let bound = field.current_residual_bound().unwrap();
        let at0 = field.eval(&[0.0], None).unwrap();
        let at1 = field.eval(&[1.0], None).unwrap();
        assert!((at0[0] - 0.0).abs() <= bound && (at0[1] - 1.0).abs() <= bound);
        assert!((at1[0] - 2.0).abs() <= bound && (at1[1] + 1.0).abs() <= bound);
        assert!(!field.system().unwrap().is_shared());
    }

    #[test]
    fn per_channel_vjp_matches_fd() {
        // Vector (polynomial) family: loss = sum B^2, FD over coefficients.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let family = PolynomialBasis::init(2, 2, &mut rng).unwrap();
        let set = ConstraintSet::new(
            vec![
                identity_constraint(vec![0.1], vec![0.4, 1.0], &["x"]),
                identity_constraint(vec![0.9], vec![2.0, -1.0], &["x"]),
            ],
            reg(),
        )
        .unwrap();
        let loss_of = |p: &[f64]| -> f64 {
            let fam = PolynomialBasis::from_coeffs(2, 2, p.to_vec()).unwrap();
            let system = assemble(&fam, &set).unwrap();
            let w = solve_weights(&system).unwrap();
            w.iter().map(|v| v * v).sum()
        };
        let system = assemble(&family, &set).unwrap();
        let w = solve_weights(&system).unwrap();
        let d_w: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let analytic = vjp_through_solve(&system, &family, &set, &w, &d_w).unwrap();
        let p0 = family.params().to_vec();
        let scale = analytic
            .as_slice()
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(1e-2);
        let mut p = p0.clone();
        for s in 0..p0.len() {
            let h = 1e-5 * (1.0 + p0[s].abs());
            p[s] = p0[s] + h;
            let plus = loss_of(&p);
            p[s] = p0[s] - h;
            let minus = loss_of(&p);
            p[s] = p0[s];
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.as_slice()[s];
            assert!(
                (fd - a).abs() / scale <= 1e-4,
                "slot {s}: fd {fd} analytic {a}"
            );
        }
    }

    struct MidpointSquareLoss;

    impl FieldLoss for MidpointSquareLoss {
        fn evaluate(&self, field: &ConstrainedField, _rng: &mut ChaCha8Rng) -> Result<LossEval> {
            // L = sum over anchors of field(anchor / 2)^2, exercising both
            // the direct path and the solve path.
            let mut value = 0.0;
            let mut cots = Vec::new();
            for cons in field.constraints().constraints() {
                let x: Vec<f64> = cons.anchor.iter().map(|v| v * 0.5).collect();
                let v = field.eval(&x, None)?;
                value += v[0] * v[0];
                cots.push(FieldCotangent {
                    x,
                    order: 0,
                    d_value: vec![2.0 * v[0]],
                    d_jac: Vec::new(),
                });
            }
            Ok(LossEval {
                value,
                cotangents: cots,
                cond_weight: 0.0,
            })
        }
    }

    #[test]
    fn total_loss_grad_matches_fd_on_six_constraint_toy() {
        let (family, set) = random_rbf_problem(31, 6);
        let p0 = family.params().to_vec();
        let anchors: Vec<Vec<f64>> = set.anchors();
        let targets: Vec<Vec<f64>> =
            set.constraints().iter().map(|c| c.target.clone()).collect();

        let rebuild = |p: &[f64]| -> ConstrainedField {
            let mut fam = SkewedRbfBasis::init(anchors.clone(), 0.6, false).unwrap();
            fam.set_params(p).unwrap();
            let cons: Vec<Constraint> = anchors
                .iter()
                .zip(&targets)
                .map(|(a, t)| identity_constraint(a.clone(), t.clone(), &["x", "y"]))
                .collect();
            ConstrainedField::new(Box::new(fam), ConstraintSet::new(cons, reg()).unwrap())
                .unwrap()
        };

        let mut field = rebuild(&p0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (value, grad) = total_loss_grad(&mut field, &MidpointSquareLoss, &mut rng).unwrap();
        assert!(value.is_finite());

        let scale = grad
            .as_slice()
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(1e-2);
        let mut p = p0.clone();
        for s in 0..p0.len() {
            let h = 1e-5;
            p[s] = p0[s] + h;
            let mut fp = rebuild(&p);
            fp.solve().unwrap();
            let plus = MidpointSquareLoss
                .evaluate(&fp, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
                .unwrap()
                .value;
            p[s] = p0[s] - h;
            let mut fm = rebuild(&p);
            fm.solve().unwrap();
            let minus = MidpointSquareLoss
                .evaluate(&fm, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
                .unwrap()
                .value;
            p[s] = p0[s];
            let fd = (plus - minus) / (2.0 * h);
            let a = grad.as_slice()[s];
            assert!(
                (fd - a).abs() / scale <= 1e-3,
                "slot {s}: fd {fd} analytic {a}"
            );
        }
    }

    #[test]
    fn loss_independent_of_field_has_zero_gradient() {
        struct ConstLoss;
        impl FieldLoss for ConstLoss {
            fn evaluate(
                &self,
                _field: &ConstrainedField,
                _rng: &mut ChaCha8Rng,
            ) -> Result<LossEval> {
                Ok(LossEval {
                    value: 42.0,
                    cotangents: Vec::new(),
                    cond_weight: 0.0,
                })
            }
        }
        let (family, set) = random_rbf_problem(37, 5);
        let mut field = ConstrainedField::new(Box::new(family), set).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (v, g) = total_loss_grad(&mut field, &ConstLoss, &mut rng).unwrap();
        assert_eq!(v, 42.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn op_cotangent_selects_entries() {
        let family = SkewedRbfBasis::init(vec![vec![0.0, 0.0]], 0.5, false).unwrap();
        let op = parse_operator("dx", &["x", "y"]).unwrap();
        let coeffs = op.resolve_coeffs(&[0.2, 0.1], &CoeffRegistry::new()).unwrap();
        let cot = op_cotangent(&op, &coeffs, 1.5, 2);
        assert_eq!(cot.order, 1);
        assert_eq!(cot.jac, vec![1.5, 0.0]);
        let g = basis_param_grad(&family, 0, &[0.2, 0.1], 1, &cot).unwrap();
        assert_eq!(g.len(), 2);

        let mixed = parse_operator("0.5*dx dy", &["x", "y"]).unwrap();
        let coeffs = mixed
            .resolve_coeffs(&[0.0, 0.0], &CoeffRegistry::new())
            .unwrap();
        let cot = op_cotangent(&mixed, &coeffs, 2.0, 2);
        assert_eq!(cot.order, 2);
        assert_eq!(cot.hess[0 * 2 + 1], 1.0);
        assert_eq!(cot.hess[1 * 2 + 0], 0.0);
    }
}
