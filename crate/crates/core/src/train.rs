//! Loss library (Eikonal, total variation, condition regularizer, data
//! fits), a bias-corrected Adam optimizer, and the training loop: re-solve
//! the collocation system, differentiate the loss through it, step the
//! parameters, and assert the constraint residual every iteration.

use crate::collocation::{ConstrainedField, FieldCotangent, FieldLoss, LossEval};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Norm floor guarding gradient-direction divisions.
const NORM_FLOOR: f64 = 1e-12;

/// Weighted loss terms over a sampling domain.
#[derive(Debug, Clone)]
pub enum LossTerm {
    /// `weight * E_x (||grad f(x)|| - 1)^2`, sampled uniformly over the
    /// domain box with fresh points each evaluation.
    Eikonal { weight: f64, samples: usize },
    /// `weight * vol(domain) * E_x ||grad f(x)||`.
    TotalVariation { weight: f64, samples: usize },
    /// `weight * ln(cond surrogate)` of the current system.
    Cond { weight: f64 },
    /// `weight * mean_i ||f(x_i) - y_i||^2` over a fixed dataset.
    DataL2 {
        weight: f64,
        dataset: Vec<(Vec<f64>, Vec<f64>)>,
    },
    /// `weight * mean_i |f(x_i) - ln(y_i + 1)|` over a fixed dataset, the
    /// field modelling the log-domain signal. Requires `y > -1`.
    DataLogL1 {
        weight: f64,
        dataset: Vec<(Vec<f64>, Vec<f64>)>,
    },
}

impl LossTerm {
    pub fn name(&self) -> &'static str {
        match self {
            LossTerm::Eikonal { .. } => "eikonal",
            LossTerm::TotalVariation { .. } => "total_variation",
            LossTerm::Cond { .. } => "cond",
            LossTerm::DataL2 { .. } => "data_l2",
            LossTerm::DataLogL1 { .. } => "data_log_l1",
        }
    }

    pub fn weight(&self) -> f64 {
        match self {
            LossTerm::Eikonal { weight, .. }
            | LossTerm::TotalVariation { weight, .. }
            | LossTerm::Cond { weight }
            | LossTerm::DataL2 { weight, .. }
            | LossTerm::DataLogL1 { weight, .. } => *weight,
        }
    }
}

/// A weighted sum of loss terms plus the sampling box.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
    /// Per-dimension `(lo, hi)` bounds of the sampling domain.
    pub domain: Vec<(f64, f64)>,
}

impl LossSpec {
    pub fn new(terms: Vec<LossTerm>, domain: Vec<(f64, f64)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::BadConfig("loss needs at least one term".into()));
        }
        for t in &terms {
            if t.weight() < 0.0 {
                return Err(Error::BadConfig(format!(
                    "loss term {} has negative weight",
                    t.name()
                )));
            }
            if let LossTerm::DataLogL1 { dataset, .. } = t {
                for (_, y) in dataset {
                    if y.iter().any(|&v| v <= -1.0) {
                        return Err(Error::BadTarget(
                            "log-domain data loss needs y > -1".into(),
                        ));
                    }
                }
            }
        }
        let needs_domain = terms.iter().any(|t| {
            matches!(
                t,
                LossTerm::Eikonal { .. } | LossTerm::TotalVariation { .. }
            )
        });
        if needs_domain && domain.iter().any(|(lo, hi)| hi <= lo) {
            return Err(Error::BadConfig("sampling domain box is degenerate".into()));
        }
        Ok(Self { terms, domain })
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name().to_string()).collect()
    }

    fn volume(&self) -> f64 {
        self.domain.iter().map(|(lo, hi)| hi - lo).product()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.domain
            .iter()
            .map(|&(lo, hi)| rng.gen_range(lo..hi))
            .collect()
    }

    /// Evaluates all terms, returning per-term values and the aggregated
    /// sensitivities for the gradient machinery.
    pub fn evaluate_terms(
        &self,
        field: &ConstrainedField,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, LossEval)> {
        let mut term_values = Vec::with_capacity(self.terms.len());
        let mut cotangents: Vec<FieldCotangent> = Vec::new();
        let mut cond_weight = 0.0;
        let mut total = 0.0;
        for term in &self.terms {
            let value = match term {
                LossTerm::Eikonal { weight, samples } => {
                    let pts: Vec<Vec<f64>> =
                        (0..*samples).map(|_| self.sample(rng)).collect();
                    let (v, cots) = eikonal_eval(field, &pts, *weight)?;
                    cotangents.extend(cots);
                    weight * v
                }
                LossTerm::TotalVariation { weight, samples } => {
                    let pts: Vec<Vec<f64>> =
                        (0..*samples).map(|_| self.sample(rng)).collect();
                    let (v, cots) = tv_eval(field, &pts, self.volume(), *weight)?;
                    cotangents.extend(cots);
                    weight * v
                }
                LossTerm::Cond { weight } => {
                    cond_weight += weight;
                    weight * loss_cond(field.system()?)
                }
                LossTerm::DataL2 { weight, dataset } => {
                    let (v, cots) = data_l2_eval(field, dataset, *weight)?;
                    cotangents.extend(cots);
                    weight * v
                }
                LossTerm::DataLogL1 { weight, dataset } => {
                    let (v, cots) = data_log_l1_eval(field, dataset, *weight)?;
                    cotangents.extend(cots);
                    weight * v
                }
            };
            term_values.push(value);
            total += value;
        }
        Ok((
            term_values,
            LossEval {
                value: total,
                cotangents,
                cond_weight,
            },
        ))
    }
}

impl FieldLoss for LossSpec {
    fn evaluate(&self, field: &ConstrainedField, rng: &mut ChaCha8Rng) -> Result<LossEval> {
        let (_, eval) = self.evaluate_terms(field, rng)?;
        Ok(eval)
    }
}

/// A loss the training loop can run and trace: named terms plus per-term
/// values alongside the aggregated sensitivities.
pub trait TraceableLoss: FieldLoss {
    fn trace_term_names(&self) -> Vec<String>;
    fn trace_evaluate(
        &self,
        field: &ConstrainedField,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, LossEval)>;
}

impl TraceableLoss for LossSpec {
    fn trace_term_names(&self) -> Vec<String> {
        self.term_names()
    }

    fn trace_evaluate(
        &self,
        field: &ConstrainedField,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, LossEval)> {
        self.evaluate_terms(field, rng)
    }
}

/// Mean over samples of `(||grad f(x)|| - 1)^2` for a single-channel field.
pub fn loss_eikonal(field: &ConstrainedField, samples: &[Vec<f64>]) -> Result<f64> {
    Ok(eikonal_eval(field, samples, 0.0)?.0)
}

fn eikonal_eval(
    field: &ConstrainedField,
    samples: &[Vec<f64>],
    weight: f64,
) -> Result<(f64, Vec<FieldCotangent>)> {
    if samples.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let m = field.constraints().dim();
    let k = samples.len() as f64;
    let mut value = 0.0;
    let mut cots = Vec::with_capacity(samples.len());
    for x in samples {
        let g = field.gradient(x)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = norm - 1.0;
        value += diff * diff / k;
        if weight != 0.0 {
            // d/dg (||g|| - 1)^2 = 2 (||g|| - 1) g / ||g||, floored norm.
            let denom = norm.max(NORM_FLOOR);
            let scale = weight * 2.0 * diff / (k * denom);
            let d_jac: Vec<f64> = g.iter().map(|v| scale * v).collect();
            cots.push(FieldCotangent {
                x: x.clone(),
                order: 1,
                d_value: vec![0.0],
                d_jac,
            });
        }
    }
    let _ = m;
    Ok((value, cots))
}

/// Monte-Carlo total variation: `vol * mean ||grad f||_2`.
pub fn loss_total_variation(field: &ConstrainedField, samples: &[Vec<f64>], volume: f64) -> Result<f64> {
    Ok(tv_eval(field, samples, volume, 0.0)?.0)
}

fn tv_eval(
    field: &ConstrainedField,
    samples: &[Vec<f64>],
    volume: f64,
    weight: f64,
) -> Result<(f64, Vec<FieldCotangent>)> {
    if samples.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let k = samples.len() as f64;
    let mut value = 0.0;
    let mut cots = Vec::with_capacity(samples.len());
    for x in samples {
        let g = field.gradient(x)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        value += volume * norm / k;
        if weight != 0.0 && norm > NORM_FLOOR {
            let scale = weight * volume / (k * norm);
            cots.push(FieldCotangent {
                x: x.clone(),
                order: 1,
                d_value: vec![0.0],
                d_jac: g.iter().map(|v| scale * v).collect(),
            });
        }
    }
    Ok((value, cots))
}

/// Log of the condition surrogate: the raw surrogate spans many orders of
/// magnitude, so optimization works on its log.
pub fn loss_cond(system: &crate::collocation::CollocationSystem) -> f64 {
    system.cond().ln()
}

/// Mean squared data fit over a fixed dataset.
pub fn loss_data_l2(
    field: &ConstrainedField,
    dataset: &[(Vec<f64>, Vec<f64>)],
) -> Result<f64> {
    Ok(data_l2_eval(field, dataset, 0.0)?.0)
}

fn data_l2_eval(
    field: &ConstrainedField,
    dataset: &[(Vec<f64>, Vec<f64>)],
    weight: f64,
) -> Result<(f64, Vec<FieldCotangent>)> {
    if dataset.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let k = dataset.len() as f64;
    let channels = field.channels();
    let mut value = 0.0;
    let mut cots = Vec::with_capacity(dataset.len());
    for (x, y) in dataset {
        if y.len() != channels {
            return Err(Error::DimensionMismatch(
                "dataset target channel mismatch".into(),
            ));
        }
        let f = field.eval(x, None)?;
        let mut d_value = vec![0.0; channels];
        for ch in 0..channels {
            let diff = f[ch] - y[ch];
            value += diff * diff / k;
            d_value[ch] = weight * 2.0 * diff / k;
        }
        if weight != 0.0 {
            cots.push(FieldCotangent {
                x: x.clone(),
                order: 0,
                d_value,
                d_jac: Vec::new(),
            });
        }
    }
    Ok((value, cots))
}

/// Mean log-domain L1 fit: `mean |f(x) - ln(y + 1)|` with the field
/// modelling the log-domain signal.
pub fn loss_data_log_l1(
    field: &ConstrainedField,
    dataset: &[(Vec<f64>, Vec<f64>)],
) -> Result<f64> {
    Ok(data_log_l1_eval(field, dataset, 0.0)?.0)
}

fn data_log_l1_eval(
    field: &ConstrainedField,
    dataset: &[(Vec<f64>, Vec<f64>)],
    weight: f64,
) -> Result<(f64, Vec<FieldCotangent>)> {
    if dataset.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let k = dataset.len() as f64;
    let channels = field.channels();
    let mut value = 0.0;
    let mut cots = Vec::with_capacity(dataset.len());
    for (x, y) in dataset {
        if y.len() != channels {
            return Err(Error::DimensionMismatch(
                "dataset target channel mismatch".into(),
            ));
        }
        if y.iter().any(|&v| v <= -1.0) {
            return Err(Error::BadTarget(format!(
                "log-domain target must exceed -1, got {y:?}"
            )));
        }
        let f = field.eval(x, None)?;
        let mut d_value = vec![0.0; channels];
        for ch in 0..channels {
            let diff = f[ch] - (y[ch] + 1.0).ln();
            value += diff.abs() / k;
            d_value[ch] = weight * diff.signum() / k;
            if diff == 0.0 {
                d_value[ch] = 0.0;
            }
        }
        if weight != 0.0 {
            cots.push(FieldCotangent {
                x: x.clone(),
                order: 0,
                d_value,
                d_jac: Vec::new(),
            });
        }
    }
    Ok((value, cots))
}

/// Bias-corrected Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One deterministic Adam update, in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grad.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam state sized for {} params, got {} params / {} grads",
            state.m.len(),
            params.len(),
            grad.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Training options; the condition threshold flags (not stops) runs whose
/// system becomes numerically untrustworthy.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub untrusted_cond: f64,
}

impl TrainOptions {
    pub fn new(iterations: usize, lr: f64, seed: u64) -> Self {
        Self {
            iterations,
            lr,
            seed,
            untrusted_cond: 1e10,
        }
    }
}

/// One training-trace row, recorded before each parameter update.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub loss_total: f64,
    pub term_values: Vec<f64>,
    pub cond: f64,
    pub residual_max: f64,
    pub untrusted: bool,
}

/// Per-iteration record of a training run.
#[derive(Debug)]
pub struct TrainingTrace {
    pub term_names: Vec<String>,
    pub rows: Vec<TraceRow>,
    /// `Err` when the run aborted (singular system or residual violation);
    /// the rows cover the iterations completed before the abort.
    pub outcome: Result<()>,
}

impl TrainingTrace {
    /// CSV with the header
    /// `iter,loss_total,loss_<term>...,cond_surrogate,residual_max`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss_total");
        for name in &self.term_names {
            out.push_str(",loss_");
            out.push_str(name);
        }
        out.push_str(",cond_surrogate,residual_max\n");
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.iter, row.loss_total));
            for v in &row.term_values {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{},{}\n", row.cond, row.residual_max));
        }
        out
    }
}

/// Runs the training loop: every iteration re-assembles the system, solves
/// for the weights, differentiates the loss through the solve, and applies
/// one Adam step. The constraint residual is asserted against the solver
/// bound on every iteration; a violation aborts with the trace so far.
pub fn train(
    field: &mut ConstrainedField,
    loss: &dyn TraceableLoss,
    opts: &TrainOptions,
) -> TrainingTrace {
    let mut trace = TrainingTrace {
        term_names: loss.trace_term_names(),
        rows: Vec::with_capacity(opts.iterations),
        outcome: Ok(()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = AdamState::new(field.family().param_count(), opts.lr);

    // Alg. 2 alone: even a zero-iteration run leaves solved weights behind.
    if let Err(e) = field.solve() {
        trace.outcome = Err(e);
        return trace;
    }

    for iter in 0..opts.iterations {
        if let Err(e) = field.solve() {
            trace.outcome = Err(e);
            return trace;
        }
        let step = (|| -> Result<TraceRow> {
            let (term_values, eval) = loss.trace_evaluate(&*field, &mut rng)?;
            let residual_max = field.max_residual()?;
            let bound = field.current_residual_bound()?;
            if residual_max > bound {
                return Err(Error::ResidualViolation {
                    residual: residual_max,
                    bound,
                });
            }
            let cond = field.system()?.cond();
            let grad = crate::collocation::loss_grad_from_eval(field, &eval)?;
            let mut params = field.family().params().to_vec();
            adam_step(&mut adam, &mut params, grad.as_slice())?;
            field.set_params(&params)?;
            Ok(TraceRow {
                iter,
                loss_total: eval.value,
                term_values,
                cond,
                residual_max,
                untrusted: cond > opts.untrusted_cond,
            })
        })();
        match step {
            Ok(row) => trace.rows.push(row),
            Err(e) => {
                trace.outcome = Err(e);
                return trace;
            }
        }
    }
    trace
}

use rand::SeedableRng;
