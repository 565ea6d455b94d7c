//! Large-scale sparse reconstruction: pseudo-normal value constraints on a
//! compactly supported hybrid kernel, evaluated through the patch solver
//! with no training, and extracted as a zero level set.

use super::config::Config;
use super::emit;
use super::marching::{marching_squares, GridValues2D};
use super::shapes::shape_cloud;
use crate::basis::{GaussianKernelBasis, HybridInner, HybridKernelBasis};
use crate::collocation::{Constraint, ConstraintSet};
use crate::diff::{Activation, EncoderArch};
use crate::operators::{CoeffRegistry, LinearOperator};
use crate::sparse::{average_nn_distance, read_point_cloud, OrientedPoint, PatchSolver};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;

/// Pseudo-normal constraints: `f(x +- eps n) = +-eps`, identity rows only.
pub fn pseudo_normal_constraints(
    cloud: &[OrientedPoint],
    eps: f64,
) -> Result<(Vec<Vec<f64>>, ConstraintSet)> {
    let dims = ["x", "y"];
    let id = LinearOperator::identity(&dims);
    let mut anchors = Vec::with_capacity(cloud.len() * 2);
    let mut constraints = Vec::with_capacity(cloud.len() * 2);
    for p in cloud {
        for (sign, target) in [(1.0, eps), (-1.0, -eps)] {
            let anchor: Vec<f64> = p
                .pos
                .iter()
                .zip(&p.normal)
                .map(|(x, n)| x + sign * eps * n)
                .collect();
            anchors.push(anchor.clone());
            constraints.push(Constraint {
                op: id.clone(),
                anchor,
                target: vec![target],
            });
        }
    }
    let set = ConstraintSet::new(constraints, Arc::new(CoeffRegistry::new()))?;
    Ok((anchors, set))
}

/// Builds the hybrid family for a reconstruction problem: feature-space
/// Gaussian inner kernel times a truncated input-space Gaussian whose
/// support radius is `support_multiplier` times the average nearest-neighbor
/// distance of the input cloud.
pub struct ReconProblem {
    pub family: HybridKernelBasis,
    pub set: ConstraintSet,
    pub sigma: f64,
    pub nn_distance: f64,
}

pub fn build_recon_problem(
    cloud: &[OrientedPoint],
    eps: f64,
    support_multiplier: f64,
    hidden: usize,
    features: usize,
    kernel_scale: f64,
    seed: u64,
) -> Result<ReconProblem> {
    let positions: Vec<Vec<f64>> = cloud.iter().map(|p| p.pos.clone()).collect();
    let nn = average_nn_distance(&positions);
    if nn <= 0.0 {
        return Err(Error::BadConfig("cloud has coincident points".into()));
    }
    let support = support_multiplier * nn;
    let sigma = support / 3.0;
    let (anchors, set) = pseudo_normal_constraints(cloud, eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = EncoderArch::mlp(&[2, hidden, features], Activation::Tanh)?;
    let inner = GaussianKernelBasis::init(arch, anchors, kernel_scale, true, &mut rng)?;
    let family = HybridKernelBasis::new(HybridInner::Gaussian(inner), sigma, 1e5)?;
    Ok(ReconProblem {
        family,
        set,
        sigma,
        nn_distance: nn,
    })
}

pub struct ReconReport {
    pub polyline_count: usize,
    pub vertex_count: usize,
    /// Max radial deviation from the analytic circle (built-in circle runs).
    pub max_radial_deviation: Option<f64>,
    pub sigma: f64,
    pub solve_count: usize,
}

pub fn run_recon_sparse(cfg: &Config, out: &Path) -> Result<ReconReport> {
    let seed = cfg.u64_or("seed", 0)?;
    let shape = cfg.str_or("recon.shape", "circle");
    let points = cfg.usize_or("recon.points", 2000)?;
    let radius = cfg.f64_or("recon.radius", 0.5)?;
    let cloud = match cfg.get_str("recon.cloud_file") {
        Some(path) => read_point_cloud(Path::new(&path))?,
        None => shape_cloud(&shape, points, radius)?,
    };
    let eps = cfg.f64_or("recon.epsilon", 0.01)?;
    let support_multiplier = cfg.f64_or("recon.support_multiplier", 4.0)?;
    let cap = cfg.usize_or("recon.cap", 60)?;
    let hidden = cfg.usize_or("recon.hidden", 16)?;
    let features = cfg.usize_or("recon.features", 8)?;
    let kernel_scale = cfg.f64_or("recon.kernel_scale", 1.0)?;
    let step = cfg.f64_or("recon.grid_step", 0.004)?;
    let pad = cfg.f64_or("recon.grid_pad", 0.08)?;

    let problem = build_recon_problem(
        &cloud,
        eps,
        support_multiplier,
        hidden,
        features,
        kernel_scale,
        seed,
    )?;
    let solver = PatchSolver::new(&problem.family, &problem.set, cap)?;

    // Evaluation window: padded bounding box of the cloud.
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in &cloud {
        x0 = x0.min(p.pos[0]);
        y0 = y0.min(p.pos[1]);
        x1 = x1.max(p.pos[0]);
        y1 = y1.max(p.pos[1]);
    }
    x0 -= pad;
    y0 -= pad;
    x1 += pad;
    y1 += pad;
    let nx = ((x1 - x0) / step).ceil() as usize + 1;
    let ny = ((y1 - y0) / step).ceil() as usize + 1;
    let mut values = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let q = [x0 + step * ix as f64, y0 + step * iy as f64];
            values.push(solver.eval(&q)?[0]);
        }
    }
    let grid = GridValues2D::new(nx, ny, x0, y0, step, step, values)?;
    let polylines = marching_squares(&grid, 0.0);

    let max_radial_deviation = if shape == "circle" && cfg.get_str("recon.cloud_file").is_none()
    {
        let mut worst = 0.0_f64;
        for poly in &polylines {
            for p in poly {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                worst = worst.max((r - radius).abs());
            }
        }
        Some(worst)
    } else {
        None
    };

    let rows: Vec<Vec<f64>> = polylines
        .iter()
        .enumerate()
        .flat_map(|(id, poly)| poly.iter().map(move |p| vec![id as f64, p[0], p[1]]))
        .collect();
    emit::write_text(
        &out.join("levelset.csv"),
        &emit::csv_string(&["polyline", "x", "y"], &rows),
    )?;
    emit::write_text(
        &out.join("levelset.svg"),
        &emit::svg_polylines(
            "sparse reconstruction zero level set",
            (x0, y0, x1, y1),
            &polylines,
            &[],
        ),
    )?;
    let mut meta = String::from("demo = recon_sparse\ncond_norm = frobenius_surrogate\n");
    for (k, v) in cfg.echo() {
        meta.push_str(&format!("config.{k} = {v}\n"));
    }
    meta.push_str(&format!(
        "nn_distance = {}\nsigma = {}\nsupport_radius = {}\npatch_solves = {}\n",
        problem.nn_distance,
        problem.sigma,
        3.0 * problem.sigma,
        solver.solve_count()
    ));
    if let Some(dev) = max_radial_deviation {
        meta.push_str(&format!("max_radial_deviation = {dev}\n"));
    }
    emit::write_text(&out.join("meta.txt"), &meta)?;

    Ok(ReconReport {
        polyline_count: polylines.len(),
        vertex_count: polylines.iter().map(|p| p.len()).sum(),
        max_radial_deviation,
        sigma: problem.sigma,
        solve_count: solver.solve_count(),
    })
}
