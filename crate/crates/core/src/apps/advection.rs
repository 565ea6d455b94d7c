//! Self-tuning transport solver on an irregular space-time grid, plus
//! inference-only transfer to shifted initial conditions.
//!
//! Constraints: identity rows on the `t = 0` boundary carrying the initial
//! state, and `du/dt + beta du/dx = 0` rows at jittered interior points.
//! The (skewed) RBF bandwidths train against conditioning + total variation;
//! accuracy is scored against the analytic travelling wave.

use super::config::Config;
use super::emit;
use super::grid::{rmse_metrics, EvalGrid};
use super::marching::GridValues2D;
use crate::basis::{Basis, SkewedRbfBasis};
use crate::collocation::{Constraint, ConstrainedField, ConstraintSet};
use crate::operators::{parse_operator, CoeffRegistry, LinearOperator};
use crate::train::{train, LossSpec, LossTerm, TrainOptions, TrainingTrace};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;

const SEPARATION: f64 = 1e-4;

pub struct AdvectionSetup {
    pub beta: f64,
    pub shift: f64,
    pub anchors: Vec<Vec<f64>>,
    /// Row indices lying on the `t = 0` boundary.
    pub boundary: Vec<usize>,
    pub op_text: String,
}

impl AdvectionSetup {
    /// Target vector for every row: initial state on the boundary, zero
    /// transport residual inside.
    pub fn targets(&self) -> Vec<Vec<f64>> {
        self.anchors
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if self.boundary.contains(&i) {
                    vec![initial_state(a[0], self.shift)]
                } else {
                    vec![0.0]
                }
            })
            .collect()
    }

    pub fn constraint_set(&self) -> Result<ConstraintSet> {
        let mut registry = CoeffRegistry::new();
        registry.insert_const("beta", self.beta);
        let dims = ["x", "t"];
        let interior_op = parse_operator(&self.op_text, &dims)?;
        let id = LinearOperator::identity(&dims);
        let targets = self.targets();
        let constraints = self
            .anchors
            .iter()
            .enumerate()
            .map(|(i, a)| Constraint {
                op: if self.boundary.contains(&i) {
                    id.clone()
                } else {
                    interior_op.clone()
                },
                anchor: a.clone(),
                target: targets[i].clone(),
            })
            .collect();
        ConstraintSet::new(constraints, Arc::new(registry))
    }
}

fn initial_state(x: f64, shift: f64) -> f64 {
    (std::f64::consts::TAU * x).sin() + shift
}

fn analytic(x: f64, t: f64, beta: f64, shift: f64) -> f64 {
    (std::f64::consts::TAU * (x - beta * t)).sin() + shift
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; deterministic under the seeded stream.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform lattice (boundary on `t = 0`, interior levels) with Gaussian
/// jitter of std `perturbation * cell` on the interior, clipped to the open
/// domain; near-duplicates are resampled until every pair is at least
/// `1e-4` apart.
pub fn build_grid(
    nb: usize,
    nx: usize,
    nt: usize,
    perturbation: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = 1.0 / nx as f64;
    let std = perturbation * cell;
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(nb + nx * nt);
    let mut boundary = Vec::with_capacity(nb);
    for i in 0..nb {
        boundary.push(anchors.len());
        anchors.push(vec![(i as f64 + 0.5) / nb as f64, 0.0]);
    }
    let clip = |v: f64| v.clamp(SEPARATION, 1.0 - SEPARATION);
    for j in 1..=nt {
        for i in 0..nx {
            let base_x = (i as f64 + 0.5) / nx as f64;
            let base_t = j as f64 / (nt + 1) as f64;
            let mut candidate = vec![
                clip(base_x + std * sample_normal(&mut rng)),
                clip(base_t + std * sample_normal(&mut rng)),
            ];
            // Resample jitter until the point clears every earlier one.
            let mut attempts = 0;
            while anchors.iter().any(|a| too_close(a, &candidate)) && attempts < 64 {
                candidate = vec![
                    clip(base_x + std * sample_normal(&mut rng)),
                    clip(base_t + std * sample_normal(&mut rng)),
                ];
                attempts += 1;
            }
            anchors.push(candidate);
        }
    }
    (anchors, boundary)
}

fn too_close(a: &[f64], b: &[f64]) -> bool {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d2 < SEPARATION * SEPARATION
}

pub struct AdvectionReport {
    pub rmse: f64,
    pub nrmse: f64,
    pub trace: TrainingTrace,
    pub kind: String,
}

/// Runs the demo: builds the jittered grid, trains the bandwidths under the
/// conditioning + smoothness objective, scores against the analytic
/// solution, and writes trace/metrics/error-map/model files.
pub fn run_advection(cfg: &Config, out: &Path) -> Result<AdvectionReport> {
    let seed = cfg.u64_or("seed", 0)?;
    let beta = cfg.f64_or("advection.beta", 0.1)?;
    let shift = cfg.f64_or("advection.shift", 0.0)?;
    let perturbation = cfg.f64_or("advection.perturbation", 0.10)?;
    let nb = cfg.usize_or("advection.boundary_points", 32)?;
    let nx = cfg.usize_or("advection.interior_x", 32)?;
    let nt = cfg.usize_or("advection.interior_t", 31)?;
    let kind = cfg.str_or("advection.basis", "skewed_rbf");
    let bandwidth = cfg.f64_or("advection.bandwidth", 0.06)?;
    let iterations = cfg.usize_or("advection.iterations", 50)?;
    let lr = cfg.f64_or("advection.lr", 0.05)?;
    let omega_cond = cfg.f64_or("advection.omega_cond", 1.0)?;
    let omega_tv = cfg.f64_or("advection.omega_tv", 1.0)?;
    let tv_samples = cfg.usize_or("advection.tv_samples", 256)?;
    let eval_res = cfg.usize_or("advection.eval_resolution", 64)?;
    let op_text = cfg.str_or("advection.op", "dt + beta*dx");

    let shared = match kind.as_str() {
        "skewed_rbf" => false,
        "simple_rbf" => true,
        other => {
            return Err(Error::BadConfig(format!(
                "advection.basis must be skewed_rbf or simple_rbf, got {other:?}"
            )))
        }
    };

    let (anchors, boundary) = build_grid(nb, nx, nt, perturbation, seed);
    let setup = AdvectionSetup {
        beta,
        shift,
        anchors: anchors.clone(),
        boundary,
        op_text,
    };
    let family = SkewedRbfBasis::init(anchors, bandwidth, shared)?;
    let set = setup.constraint_set()?;
    let mut field = ConstrainedField::new(Box::new(family), set)?;

    let loss = LossSpec::new(
        vec![
            LossTerm::Cond { weight: omega_cond },
            LossTerm::TotalVariation {
                weight: omega_tv,
                samples: tv_samples,
            },
        ],
        vec![(0.0, 1.0), (0.0, 1.0)],
    )?;
    let trace = train(&mut field, &loss, &TrainOptions::new(iterations, lr, seed));
    trace.outcome.clone()?;
    field.solve()?;

    let (rmse, nrmse, err_grid) = score(&field, beta, shift, eval_res)?;

    emit::write_text(&out.join("trace.csv"), &trace.to_csv())?;
    emit::write_text(
        &out.join("metrics.csv"),
        &emit::csv_string(&["rmse", "nrmse"], &[vec![rmse, nrmse]]),
    )?;
    emit::write_text(&out.join("errmap.csv"), &errmap_csv(&err_grid))?;
    emit::write_text(
        &out.join("errmap.svg"),
        &emit::svg_heatmap("abs error vs analytic solution", &err_grid),
    )?;
    emit::write_text(
        &out.join("trace.svg"),
        &emit::svg_line_chart(
            "training trace",
            &[
                (
                    "loss_total".to_string(),
                    trace.rows.iter().map(|r| r.loss_total).collect(),
                ),
                (
                    "cond_surrogate".to_string(),
                    trace.rows.iter().map(|r| r.cond).collect(),
                ),
            ],
        ),
    )?;
    save_model(&out.join("model.txt"), &field, &setup, shared)?;
    let mut meta = String::new();
    meta.push_str("demo = advection\ncond_norm = frobenius_surrogate\n");
    for (k, v) in cfg.echo() {
        meta.push_str(&format!("config.{k} = {v}\n"));
    }
    meta.push_str(&format!(
        "rmse = {rmse}\nnrmse = {nrmse}\ntargets_inf_norm = {}\n",
        field.constraints().targets_inf_norm()
    ));
    if trace.rows.iter().any(|r| r.untrusted) {
        meta.push_str("warning = condition surrogate exceeded 1e10; field flagged untrusted\n");
    }
    emit::write_text(&out.join("meta.txt"), &meta)?;

    Ok(AdvectionReport {
        rmse,
        nrmse,
        trace,
        kind,
    })
}

fn score(
    field: &ConstrainedField,
    beta: f64,
    shift: f64,
    res: usize,
) -> Result<(f64, f64, GridValues2D)> {
    let grid = EvalGrid::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![res, res])?;
    let mut predicted = Vec::with_capacity(grid.len());
    let mut truth = Vec::with_capacity(grid.len());
    // Heatmap layout: values[it * res + ix] with x horizontal, t vertical.
    let mut err = vec![0.0; grid.len()];
    for ix in 0..res {
        for it in 0..res {
            let x = grid.coord(0, ix);
            let t = grid.coord(1, it);
            let f = field.eval(&[x, t], None)?[0];
            let u = analytic(x, t, beta, shift);
            predicted.push(f);
            truth.push(u);
            err[it * res + ix] = (f - u).abs();
        }
    }
    let (rmse, nrmse) = rmse_metrics(&predicted, &truth);
    let step = 1.0 / (res - 1) as f64;
    Ok((
        rmse,
        nrmse,
        GridValues2D::new(res, res, 0.0, 0.0, step, step, err)?,
    ))
}

fn errmap_csv(grid: &GridValues2D) -> String {
    let rows: Vec<Vec<f64>> = (0..grid.ny)
        .flat_map(|iy| {
            (0..grid.nx).map(move |ix| {
                vec![
                    grid.x0 + grid.dx * ix as f64,
                    grid.y0 + grid.dy * iy as f64,
                    grid.values[iy * grid.nx + ix],
                ]
            })
        })
        .collect();
    emit::csv_string(&["x", "t", "abs_error"], &rows)
}

fn save_model(
    path: &Path,
    field: &ConstrainedField,
    setup: &AdvectionSetup,
    shared: bool,
) -> Result<()> {
    let mut text = String::from("# rbf field model\n");
    text.push_str(&format!(
        "kind = {}\n",
        if shared { "simple_rbf" } else { "skewed_rbf" }
    ));
    text.push_str(&format!("beta = {}\n", setup.beta));
    text.push_str(&format!("op = {}\n", setup.op_text));
    text.push_str(&format!("bases = {}\n", field.family().len()));
    text.push_str(&format!("params = {}\n", field.family().param_count()));
    for p in field.family().params() {
        text.push_str(&format!("p {p}\n"));
    }
    for (i, a) in setup.anchors.iter().enumerate() {
        let tag = if setup.boundary.contains(&i) { "b" } else { "i" };
        text.push_str(&format!("a {tag} {} {}\n", a[0], a[1]));
    }
    emit::write_text(path, &text)
}

pub struct LoadedModel {
    pub family: SkewedRbfBasis,
    pub beta: f64,
    pub op_text: String,
    pub anchors: Vec<Vec<f64>>,
    pub boundary: Vec<usize>,
}

/// Reads a model written by [`run_advection`].
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("missing parameter file {}: {e}", path.display())))?;
    let mut kind = None;
    let mut beta = None;
    let mut op_text = "dt + beta*dx".to_string();
    let mut params = Vec::new();
    let mut anchors = Vec::new();
    let mut boundary = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| {
            Error::BadConfig(format!("model line {}: {what}", lineno + 1))
        };
        if let Some(rest) = line.strip_prefix("p ") {
            params.push(rest.trim().parse::<f64>().map_err(|_| bad("bad param"))?);
        } else if let Some(rest) = line.strip_prefix("a ") {
            let mut it = rest.split_whitespace();
            let tag = it.next().ok_or_else(|| bad("missing anchor tag"))?;
            let x: f64 = it
                .next()
                .ok_or_else(|| bad("missing x"))?
                .parse()
                .map_err(|_| bad("bad x"))?;
            let t: f64 = it
                .next()
                .ok_or_else(|| bad("missing t"))?
                .parse()
                .map_err(|_| bad("bad t"))?;
            if tag == "b" {
                boundary.push(anchors.len());
            }
            anchors.push(vec![x, t]);
        } else if let Some(rest) = line.strip_prefix("kind = ") {
            kind = Some(rest.trim().to_string());
        } else if let Some(rest) = line.strip_prefix("beta = ") {
            beta = Some(rest.trim().parse::<f64>().map_err(|_| bad("bad beta"))?);
        } else if let Some(rest) = line.strip_prefix("op = ") {
            op_text = rest.trim().to_string();
        } else if line.starts_with("bases = ") || line.starts_with("params = ") {
            // Redundant counts; shapes are validated below.
        } else {
            return Err(bad("unrecognized line"));
        }
    }
    let kind = kind.ok_or_else(|| Error::BadConfig("model missing kind".into()))?;
    let shared = kind == "simple_rbf";
    let beta = beta.ok_or_else(|| Error::BadConfig("model missing beta".into()))?;
    let mut family = SkewedRbfBasis::init(anchors.clone(), 1.0, shared)?;
    family.set_params(&params)?;
    Ok(LoadedModel {
        family,
        beta,
        op_text,
        anchors,
        boundary,
    })
}

pub struct TransferReport {
    pub rows: Vec<(f64, f64, f64)>,
}

/// Inference-only transfer: re-solve the trained kernel's weights against
/// shifted initial conditions (no parameter updates) and score each shift.
pub fn run_transfer(cfg: &Config, out: &Path) -> Result<TransferReport> {
    let model_path = cfg
        .get_str("transfer.model")
        .ok_or_else(|| Error::Io("transfer.model (trained parameter file) is required".into()))?;
    let eval_res = cfg.usize_or("transfer.eval_resolution", 64)?;
    let shifts: Vec<f64> = cfg
        .list_or("transfer.shifts", &["0", "1", "10", "100"])
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::BadConfig(format!("bad shift {s:?}")))
        })
        .collect::<Result<_>>()?;

    let model = load_model(Path::new(&model_path))?;
    let mut rows = Vec::new();
    for &shift in &shifts {
        let setup = AdvectionSetup {
            beta: model.beta,
            shift,
            anchors: model.anchors.clone(),
            boundary: model.boundary.clone(),
            op_text: model.op_text.clone(),
        };
        let mut family = SkewedRbfBasis::init(
            model.anchors.clone(),
            1.0,
            model.family.is_shared(),
        )?;
        family.set_params(model.family.params())?;
        let mut field = ConstrainedField::new(Box::new(family), setup.constraint_set()?)?;
        field.solve()?;
        let bound = field.current_residual_bound()?;
        let res = field.max_residual()?;
        if res > bound {
            return Err(Error::ResidualViolation {
                residual: res,
                bound,
            });
        }
        let (rmse, nrmse, _) = score(&field, model.beta, shift, eval_res)?;
        rows.push((shift, rmse, nrmse));
    }
    emit::write_text(
        &out.join("metrics.csv"),
        &emit::csv_string(
            &["shift", "rmse", "nrmse"],
            &rows.iter().map(|r| vec![r.0, r.1, r.2]).collect::<Vec<_>>(),
        ),
    )?;
    let mut meta = String::from("demo = transfer\ncond_norm = frobenius_surrogate\n");
    for (k, v) in cfg.echo() {
        meta.push_str(&format!("config.{k} = {v}\n"));
    }
    emit::write_text(&out.join("meta.txt"), &meta)?;
    Ok(TransferReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_and_separation() {
        let (anchors, boundary) = build_grid(32, 32, 31, 0.10, 0);
        assert_eq!(anchors.len(), 1024);
        assert_eq!(boundary.len(), 32);
        for (i, a) in anchors.iter().enumerate() {
            assert!(a[0] > 0.0 && a[0] < 1.0);
            assert!(a[1] >= 0.0 && a[1] < 1.0);
            for b in &anchors[i + 1..] {
                assert!(!too_close(a, b), "{a:?} vs {b:?}");
            }
        }
        // Determinism.
        let (again, _) = build_grid(32, 32, 31, 0.10, 0);
        assert_eq!(anchors, again);
    }

    #[test]
    fn zero_beta_is_stationary_for_both_kernels() {
        for basis in ["skewed_rbf", "simple_rbf"] {
            let cfg = Config::parse(&format!(
                "seed = 1\n[advection]\nbeta = 0\nboundary_points = 16\ninterior_x = 16\n\
                 interior_t = 15\niterations = 0\nbasis = {basis}\nbandwidth = 0.1875\n\
                 eval_resolution = 32\n"
            ))
            .unwrap();
            let dir = std::env::temp_dir().join(format!("cnfield_test_adv_{basis}"));
            let report = run_advection(&cfg, &dir).unwrap();
            cfg.finish().unwrap();
            assert!(
                report.nrmse <= 1e-3,
                "{basis}: stationary transport nrmse {}",
                report.nrmse
            );
        }
    }

    #[test]
    fn model_roundtrip_and_transfer_identity() {
        let cfg = Config::parse(
            "seed = 2\n[advection]\nboundary_points = 8\ninterior_x = 8\ninterior_t = 7\n\
             iterations = 3\nlr = 0.02\ntv_samples = 32\neval_resolution = 16\nbandwidth = 0.15\n",
        )
        .unwrap();
        let dir = std::env::temp_dir().join("cnfield_test_adv_roundtrip");
        let report = run_advection(&cfg, &dir).unwrap();
        cfg.finish().unwrap();

        let model = load_model(&dir.join("model.txt")).unwrap();
        assert_eq!(model.anchors.len(), 64);
        assert_eq!(model.boundary.len(), 8);

        // Transfer at shift 0 reproduces the advection metrics exactly.
        let tcfg = Config::parse(&format!(
            "[transfer]\nmodel = {}\nshifts = 0,10\neval_resolution = 16\n",
            dir.join("model.txt").display()
        ))
        .unwrap();
        let tdir = std::env::temp_dir().join("cnfield_test_transfer");
        let transfer = run_transfer(&tcfg, &tdir).unwrap();
        tcfg.finish().unwrap();
        assert_eq!(transfer.rows[0].0, 0.0);
        assert_eq!(transfer.rows[0].1, report.rmse);
        assert_eq!(transfer.rows[0].2, report.nrmse);
        // Large shifts keep nRMSE comparable while RMSE scales with the
        // shifted signal.
        assert!(transfer.rows[1].1.is_finite());
    }

    #[test]
    fn missing_model_file_is_io_error() {
        let cfg = Config::parse("[transfer]\nmodel = /nonexistent/m.txt\n").unwrap();
        let dir = std::env::temp_dir().join("cnfield_test_transfer_missing");
        assert!(matches!(
            run_transfer(&cfg, &dir),
            Err(Error::Io(_))
        ));
    }
}
