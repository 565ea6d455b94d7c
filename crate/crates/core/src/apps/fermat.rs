//! Least-time ray path between two fixed endpoints in a vertically graded
//! medium. The path is a weighted pair of quadratic polynomials with the
//! endpoints enforced as hard identity constraints (per-channel 2x2
//! systems); the polynomial coefficients train to minimize the travel time.

use super::config::Config;
use super::emit;
use crate::basis::PolynomialBasis;
use crate::collocation::{
    Constraint, ConstrainedField, ConstraintSet, FieldCotangent, FieldLoss, LossEval,
};
use crate::operators::{parse_operator, CoeffRegistry, LinearOperator};
use crate::train::{train, TraceableLoss, TrainOptions, TrainingTrace};
use crate::Result;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;

/// Refractive-index floor; an affine profile is clamped here to keep the
/// travel-time integrand positive.
const INDEX_FLOOR: f64 = 0.05;

/// Travel time along the contour by composite trapezoid:
/// `T = sum_k w_k ||p'(x_k)|| n(p_y(x_k))` with an affine `n(y)`.
struct TravelTimeLoss {
    n_base: f64,
    n_slope: f64,
    quad_points: usize,
    dx_op: LinearOperator,
}

impl TravelTimeLoss {
    fn index_at(&self, y: f64) -> (f64, f64) {
        let n = self.n_base + self.n_slope * y;
        if n < INDEX_FLOOR {
            (INDEX_FLOOR, 0.0)
        } else {
            (n, self.n_slope)
        }
    }
}

impl FieldLoss for TravelTimeLoss {
    fn evaluate(&self, field: &ConstrainedField, _rng: &mut ChaCha8Rng) -> Result<LossEval> {
        let k = self.quad_points;
        let h = 1.0 / k as f64;
        let mut value = 0.0;
        let mut cotangents = Vec::with_capacity(k + 1);
        for s in 0..=k {
            let x = s as f64 / k as f64;
            let w = if s == 0 || s == k { 0.5 * h } else { h };
            let p = field.eval(&[x], None)?;
            let d = field.eval(&[x], Some(&self.dx_op))?;
            let speed = (d[0] * d[0] + d[1] * d[1]).sqrt().max(1e-12);
            let (n, dn) = self.index_at(p[1]);
            value += w * speed * n;
            cotangents.push(FieldCotangent {
                x: vec![x],
                order: 1,
                d_value: vec![0.0, w * speed * dn],
                d_jac: vec![w * n * d[0] / speed, w * n * d[1] / speed],
            });
        }
        Ok(LossEval {
            value,
            cotangents,
            cond_weight: 0.0,
        })
    }
}

impl TraceableLoss for TravelTimeLoss {
    fn trace_term_names(&self) -> Vec<String> {
        vec!["travel_time".into()]
    }

    fn trace_evaluate(
        &self,
        field: &ConstrainedField,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, LossEval)> {
        let eval = self.evaluate(field, rng)?;
        Ok((vec![eval.value], eval))
    }
}

pub struct FermatReport {
    pub initial_time: f64,
    pub final_time: f64,
    pub chord_time: f64,
    pub trace: TrainingTrace,
    pub endpoints: ([f64; 2], [f64; 2]),
}

/// Runs the demo and writes `trace.csv`, `path.csv`, `path_initial.csv`,
/// `path.svg`, and `meta.txt` under `out`.
pub fn run_fermat(cfg: &Config, out: &Path) -> Result<FermatReport> {
    let seed = cfg.u64_or("seed", 0)?;
    let p0 = [
        cfg.f64_or("fermat.p0x", 0.0)?,
        cfg.f64_or("fermat.p0y", 0.0)?,
    ];
    let p1 = [
        cfg.f64_or("fermat.p1x", 1.0)?,
        cfg.f64_or("fermat.p1y", 1.0)?,
    ];
    let n_base = cfg.f64_or("fermat.n_base", 1.0)?;
    let n_slope = cfg.f64_or("fermat.n_slope", 1.0)?;
    let quad_points = cfg.usize_or("fermat.quad_points", 256)?;
    let iterations = cfg.usize_or("fermat.iterations", 2000)?;
    let lr = cfg.f64_or("fermat.lr", 0.02)?;

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let family = PolynomialBasis::init(2, 2, &mut rng)?;
    let set = ConstraintSet::new(
        vec![
            Constraint {
                op: LinearOperator::identity(&["x"]),
                anchor: vec![0.0],
                target: p0.to_vec(),
            },
            Constraint {
                op: LinearOperator::identity(&["x"]),
                anchor: vec![1.0],
                target: p1.to_vec(),
            },
        ],
        Arc::new(CoeffRegistry::new()),
    )?;
    let mut field = ConstrainedField::new(Box::new(family), set)?;
    field.solve()?;

    let loss = TravelTimeLoss {
        n_base,
        n_slope,
        quad_points,
        dx_op: parse_operator("dx", &["x"])?,
    };
    let mut scratch = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let initial_time = loss.evaluate(&field, &mut scratch)?.value;
    let initial_path = sample_path(&field, quad_points)?;

    let trace = train(&mut field, &loss, &TrainOptions::new(iterations, lr, seed));
    trace.outcome.clone()?;
    field.solve()?;
    let final_time = loss.evaluate(&field, &mut scratch)?.value;
    let final_path = sample_path(&field, quad_points)?;

    // Straight chord in an affine medium: the trapezoid rule is exact.
    let chord_len = ((p1[0] - p0[0]).powi(2) + (p1[1] - p0[1]).powi(2)).sqrt();
    let chord_time = chord_len
        * 0.5
        * ((n_base + n_slope * p0[1]).max(INDEX_FLOOR)
            + (n_base + n_slope * p1[1]).max(INDEX_FLOOR));

    emit::write_text(&out.join("trace.csv"), &trace.to_csv())?;
    emit::write_text(
        &out.join("path.csv"),
        &path_csv(&final_path),
    )?;
    emit::write_text(
        &out.join("path_initial.csv"),
        &path_csv(&initial_path),
    )?;
    let bounds = path_bounds(&[&initial_path, &final_path]);
    emit::write_text(
        &out.join("path.svg"),
        &emit::svg_polylines(
            "ray path: initial and optimized",
            bounds,
            &[
                initial_path.iter().map(|p| [p[1], p[2]]).collect(),
                final_path.iter().map(|p| [p[1], p[2]]).collect(),
            ],
            &[[p0[0], p0[1]], [p1[0], p1[1]]],
        ),
    )?;
    let mut meta = String::new();
    meta.push_str("demo = fermat\ncond_norm = frobenius_surrogate\n");
    for (k, v) in cfg.echo() {
        meta.push_str(&format!("config.{k} = {v}\n"));
    }
    meta.push_str(&format!(
        "initial_time = {initial_time}\nfinal_time = {final_time}\nchord_time = {chord_time}\n"
    ));
    meta.push_str(&format!(
        "targets_inf_norm = {}\n",
        field.constraints().targets_inf_norm()
    ));
    emit::write_text(&out.join("meta.txt"), &meta)?;

    Ok(FermatReport {
        initial_time,
        final_time,
        chord_time,
        trace,
        endpoints: (p0, p1),
    })
}

fn sample_path(field: &ConstrainedField, k: usize) -> Result<Vec<[f64; 3]>> {
    (0..=k)
        .map(|s| {
            let x = s as f64 / k as f64;
            let p = field.eval(&[x], None)?;
            Ok([x, p[0], p[1]])
        })
        .collect()
}

fn path_csv(path: &[[f64; 3]]) -> String {
    emit::csv_string(
        &["x", "px", "py"],
        &path.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
    )
}

fn path_bounds(paths: &[&Vec<[f64; 3]>]) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for path in paths {
        for p in path.iter() {
            b.0 = b.0.min(p[1]);
            b.1 = b.1.min(p[2]);
            b.2 = b.2.max(p[1]);
            b.3 = b.3.max(p[2]);
        }
    }
    let pad = 0.1 * ((b.2 - b.0).max(b.3 - b.1)).max(1e-6);
    (b.0 - pad, b.1 - pad, b.2 + pad, b.3 + pad)
}
