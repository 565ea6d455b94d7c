//! Implicit 2D shape interpolation with exact point and normal constraints:
//! three collocation rows per cloud point (value 0, gradient components),
//! a hypernet-kernel basis, optional circle-signed-distance pretraining, and
//! Eikonal training of the inductive bias.

use super::config::Config;
use super::emit;
use super::marching::{marching_squares, GridValues2D};
use super::shapes::{circle_cloud, circle_sdf, shape_cloud};
use crate::basis::{init_basis, BasisInit, BasisKind};
use crate::collocation::{Constraint, ConstrainedField, ConstraintSet};
use crate::diff::Activation;
use crate::operators::{parse_operator, CoeffRegistry, LinearOperator};
use crate::sparse::{read_point_cloud, OrientedPoint};
use crate::train::{loss_eikonal, train, LossSpec, LossTerm, TrainOptions, TrainingTrace};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use std::sync::Arc;

/// Domain of the shape experiments.
pub const DOMAIN: (f64, f64) = (-2.0, 2.0);

/// Exact point + normal constraints: `f(x_i) = 0`, `df/dx(x_i) = n_x`,
/// `df/dy(x_i) = n_y`.
pub fn normal_constraints(cloud: &[OrientedPoint]) -> Result<ConstraintSet> {
    let dims = ["x", "y"];
    let id = LinearOperator::identity(&dims);
    let dx = parse_operator("dx", &dims)?;
    let dy = parse_operator("dy", &dims)?;
    let mut constraints = Vec::with_capacity(cloud.len() * 3);
    for p in cloud {
        constraints.push(Constraint {
            op: id.clone(),
            anchor: p.pos.clone(),
            target: vec![0.0],
        });
        constraints.push(Constraint {
            op: dx.clone(),
            anchor: p.pos.clone(),
            target: vec![p.normal[0]],
        });
        constraints.push(Constraint {
            op: dy.clone(),
            anchor: p.pos.clone(),
            target: vec![p.normal[1]],
        });
    }
    ConstraintSet::new(constraints, Arc::new(CoeffRegistry::new()))
}

/// Mean normal error over the cloud: `1/N sum ||grad f(x_i) - n_i||`.
pub fn mean_normal_error(field: &ConstrainedField, cloud: &[OrientedPoint]) -> Result<f64> {
    let mut total = 0.0;
    for p in cloud {
        let g = field.gradient(&p.pos)?;
        let d: f64 = g
            .iter()
            .zip(&p.normal)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += d.sqrt();
    }
    Ok(total / cloud.len() as f64)
}

pub struct Shape2dReport {
    pub e_n_init: f64,
    pub e_n_final: f64,
    pub eikonal_init: f64,
    pub eikonal_final: f64,
    pub trace: TrainingTrace,
    pub polyline_count: usize,
}

pub fn run_shape2d(cfg: &Config, out: &Path) -> Result<Shape2dReport> {
    let seed = cfg.u64_or("seed", 0)?;
    let shape = cfg.str_or("shape2d.shape", "circle");
    let points = cfg.usize_or("shape2d.points", 32)?;
    let radius = cfg.f64_or("shape2d.radius", 1.0)?;
    let cloud = match cfg.get_str("shape2d.cloud_file") {
        Some(path) => read_point_cloud(Path::new(&path))?,
        None => shape_cloud(&shape, points, radius)?,
    };
    let hidden = cfg.usize_or("shape2d.hidden", 64)?;
    let features = cfg.usize_or("shape2d.features", 32)?;
    let kernel_scale = cfg.f64_or("shape2d.kernel_scale", 50.0)?;
    let hyper_hidden = cfg.usize_or("shape2d.hyper_hidden", 32)?;
    let basis_kind = BasisKind::parse(&cfg.str_or("shape2d.basis", "hypernet_kernel"))?;
    let iterations = cfg.usize_or("shape2d.iterations", 50)?;
    let lr = cfg.f64_or("shape2d.lr", 1e-5)?;
    let eikonal_samples = cfg.usize_or("shape2d.eikonal_samples", 1000)?;
    let pretrain_iterations = cfg.usize_or("shape2d.pretrain_iterations", 40)?;
    let pretrain_lr = cfg.f64_or("shape2d.pretrain_lr", 1e-3)?;
    let pretrain_samples = cfg.usize_or("shape2d.pretrain_samples", 512)?;
    let step = cfg.f64_or("shape2d.levelset_step", 1.0 / 60.0)?;

    let init = BasisInit {
        kind: basis_kind,
        encoder_hidden: vec![hidden],
        features,
        activation: Activation::Softplus { beta: 10.0 },
        kernel_scale,
        hyper_hidden,
        ..BasisInit::default()
    };

    // Pretrain toward the signed distance of a circle with the same
    // constraint count; the circle itself skips this (it is the target).
    let mut params: Option<Vec<f64>> = None;
    if shape != "circle" && pretrain_iterations > 0 {
        let circle = circle_cloud(points, radius);
        let set = normal_constraints(&circle)?;
        let family = init_basis(&init, set.anchors(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5df0);
        let dataset: Vec<(Vec<f64>, Vec<f64>)> = (0..pretrain_samples)
            .map(|_| {
                let x = vec![
                    rng.gen_range(DOMAIN.0..DOMAIN.1),
                    rng.gen_range(DOMAIN.0..DOMAIN.1),
                ];
                let d = circle_sdf(radius, &x);
                (x, vec![d])
            })
            .collect();
        let loss = LossSpec::new(
            vec![LossTerm::DataL2 {
                weight: 1.0,
                dataset,
            }],
            vec![(DOMAIN.0, DOMAIN.1); 2],
        )?;
        let mut field = ConstrainedField::new(family, set)?;
        let trace = train(
            &mut field,
            &loss,
            &TrainOptions::new(pretrain_iterations, pretrain_lr, seed),
        );
        trace.outcome.clone()?;
        params = Some(field.family().params().to_vec());
    }

    let set = normal_constraints(&cloud)?;
    let mut family = init_basis(&init, set.anchors(), seed)?;
    if let Some(p) = params {
        family.set_params(&p)?;
    }
    let mut field = ConstrainedField::new(family, set)?;
    field.solve()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b9);
    let eik_points = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                vec![
                    rng.gen_range(DOMAIN.0..DOMAIN.1),
                    rng.gen_range(DOMAIN.0..DOMAIN.1),
                ]
            })
            .collect()
    };
    let e_n_init = mean_normal_error(&field, &cloud)?;
    let eikonal_init = loss_eikonal(&field, &eik_points(&mut rng, eikonal_samples))?;

    let loss = LossSpec::new(
        vec![LossTerm::Eikonal {
            weight: 1.0,
            samples: eikonal_samples,
        }],
        vec![(DOMAIN.0, DOMAIN.1); 2],
    )?;
    let trace = train(&mut field, &loss, &TrainOptions::new(iterations, lr, seed));
    trace.outcome.clone()?;
    field.solve()?;

    let e_n_final = mean_normal_error(&field, &cloud)?;
    let eikonal_final = loss_eikonal(&field, &eik_points(&mut rng, eikonal_samples))?;

    // Zero level set on the uniform grid.
    let nodes = ((DOMAIN.1 - DOMAIN.0) / step).round() as usize + 1;
    let values: Vec<f64> = (0..nodes * nodes)
        .into_par_iter()
        .map(|idx| {
            let ix = idx % nodes;
            let iy = idx / nodes;
            let x = DOMAIN.0 + step * ix as f64;
            let y = DOMAIN.0 + step * iy as f64;
            field.eval(&[x, y], None).map(|v| v[0])
        })
        .collect::<Result<_>>()?;
    let grid = GridValues2D::new(nodes, nodes, DOMAIN.0, DOMAIN.0, step, step, values)?;
    let polylines = marching_squares(&grid, 0.0);

    emit::write_text(&out.join("trace.csv"), &trace.to_csv())?;
    emit::write_text(&out.join("levelset.csv"), &polyline_csv(&polylines))?;
    emit::write_text(
        &out.join("levelset.svg"),
        &emit::svg_polylines(
            "zero level set and constraint points",
            (DOMAIN.0, DOMAIN.0, DOMAIN.1, DOMAIN.1),
            &polylines,
            &cloud
                .iter()
                .map(|p| [p.pos[0], p.pos[1]])
                .collect::<Vec<_>>(),
        ),
    )?;
    let mut normal_rows = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.iter().enumerate() {
        let g = field.gradient(&p.pos)?;
        let err = g
            .iter()
            .zip(&p.normal)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        normal_rows.push(vec![i as f64, p.pos[0], p.pos[1], err]);
    }
    emit::write_text(
        &out.join("normals.csv"),
        &emit::csv_string(&["index", "x", "y", "normal_error"], &normal_rows),
    )?;
    emit::write_text(
        &out.join("metrics.csv"),
        &emit::csv_string(
            &[
                "normal_error_init",
                "normal_error_final",
                "eikonal_init",
                "eikonal_final",
            ],
            &[vec![e_n_init, e_n_final, eikonal_init, eikonal_final]],
        ),
    )?;
    let mut meta = String::from("demo = shape2d\ncond_norm = frobenius_surrogate\n");
    for (k, v) in cfg.echo() {
        meta.push_str(&format!("config.{k} = {v}\n"));
    }
    meta.push_str(&format!(
        "family = {}\ntargets_inf_norm = {}\n",
        field.family().describe(),
        field.constraints().targets_inf_norm()
    ));
    emit::write_text(&out.join("meta.txt"), &meta)?;

    Ok(Shape2dReport {
        e_n_init,
        e_n_final,
        eikonal_init,
        eikonal_final,
        trace,
        polyline_count: polylines.len(),
    })
}

fn polyline_csv(polylines: &[Vec<[f64; 2]>]) -> String {
    let rows: Vec<Vec<f64>> = polylines
        .iter()
        .enumerate()
        .flat_map(|(id, poly)| {
            poly.iter()
                .map(move |p| vec![id as f64, p[0], p[1]])
        })
        .collect();
    emit::csv_string(&["polyline", "x", "y"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn normal_constraints_reject_plain_gaussian_kernel() {
        // Repeated anchors with a shared-encoder kernel singularize the
        // system at assembly.
        let cloud = circle_cloud(4, 1.0);
        let set = normal_constraints(&cloud).unwrap();
        let init = BasisInit {
            kind: BasisKind::GaussianKernel,
            encoder_hidden: vec![8],
            features: 4,
            kernel_scale: 1.0,
            ..BasisInit::default()
        };
        let family = init_basis(&init, set.anchors(), 0).unwrap();
        assert!(matches!(
            crate::collocation::assemble(family.as_ref(), &set),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn circle_exact_normals_small() {
        let cfg = Config::parse(
            "seed = 0\n[shape2d]\nshape = circle\npoints = 8\nhidden = 16\nfeatures = 8\n\
             hyper_hidden = 8\nkernel_scale = 2\niterations = 4\neikonal_samples = 64\n\
             levelset_step = 0.1\n",
        )
        .unwrap();
        let dir = std::env::temp_dir().join("cnfield_test_shape_small");
        let report = run_shape2d(&cfg, &dir).unwrap();
        cfg.finish().unwrap();
        assert!(report.e_n_init <= 1e-4, "E_n init {}", report.e_n_init);
        assert!(report.e_n_final <= 1e-4, "E_n final {}", report.e_n_final);
        assert!(report.polyline_count >= 1);
    }
}
