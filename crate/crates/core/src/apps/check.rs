//! Quick self-verification suite behind `cnfield check`: finite-difference
//! and brute-force oracles over the numerical core, one pass/fail line each.

use crate::basis::{basis_param_grad, Basis, GaussianKernelBasis, SkewedRbfBasis};
use crate::collocation::{
    assemble, solve_weights, vjp_through_solve, Constraint, ConstraintSet,
};
use crate::diff::{encoder_eval, Activation, DerivativeBundle, Encoder, EncoderArch};
use crate::linalg::{lu_factor, lu_solve, DenseMatrix};
use crate::operators::{CoeffRegistry, LinearOperator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<f64, String>, tol: f64) -> CheckResult {
    match run() {
        Ok(err) => CheckResult {
            name,
            passed: err <= tol,
            detail: format!("max error {err:.3e} (tolerance {tol:.1e})"),
        },
        Err(msg) => CheckResult {
            name,
            passed: false,
            detail: msg,
        },
    }
}

fn lu_vs_elimination() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10;
    let mut a = DenseMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    for i in 0..n {
        let v = a.at(i, i);
        a.set(i, i, v + n as f64);
    }
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = lu_solve(&lu_factor(&a).map_err(|e| e.to_string())?, &b)
        .map_err(|e| e.to_string())?;
    // Naive elimination oracle.
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = a.row(i).to_vec();
            r.push(b[i]);
            r
        })
        .collect();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| aug[i][k].abs().total_cmp(&aug[j][k].abs()))
            .unwrap();
        aug.swap(k, p);
        for i in (k + 1)..n {
            let f = aug[i][k] / aug[k][k];
            for j in k..=n {
                aug[i][j] -= f * aug[k][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = aug[i][n];
        for j in (i + 1)..n {
            s -= aug[i][j] * y[j];
        }
        y[i] = s / aug[i][i];
    }
    Ok(x.iter()
        .zip(&y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn encoder_fd() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arch = EncoderArch::mlp(&[2, 6, 3], Activation::Tanh).map_err(|e| e.to_string())?;
    let weights = (0..arch.param_count())
        .map(|_| rng.gen_range(-0.8..0.8))
        .collect();
    let enc = Encoder::new(arch, weights).map_err(|e| e.to_string())?;
    let x = [0.3, -0.5];
    let bundle = encoder_eval(&enc, &x, 2).map_err(|e| e.to_string())?;
    let mut worst = 0.0_f64;
    let mut p = x;
    for k in 0..2 {
        let h = 1e-5;
        p[k] = x[k] + h;
        let plus = encoder_eval(&enc, &p, 1).map_err(|e| e.to_string())?;
        p[k] = x[k] - h;
        let minus = encoder_eval(&enc, &p, 1).map_err(|e| e.to_string())?;
        p[k] = x[k];
        for f in 0..3 {
            let fd = (plus.value[f] - minus.value[f]) / (2.0 * h);
            worst = worst.max((fd - bundle.jac_at(f, k)).abs());
            for k1 in 0..2 {
                let fd2 = (plus.jac_at(f, k1) - minus.jac_at(f, k1)) / (2.0 * h);
                worst = worst.max((fd2 - bundle.hess_at(f, k1, k)).abs());
            }
        }
    }
    Ok(worst)
}

fn kernel_param_grad_fd() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = EncoderArch::mlp(&[2, 4, 3], Activation::Tanh).map_err(|e| e.to_string())?;
    let anchors = vec![vec![0.0, 0.0], vec![0.4, -0.2]];
    let fam = GaussianKernelBasis::init(arch.clone(), anchors.clone(), 0.9, true, &mut rng)
        .map_err(|e| e.to_string())?;
    let x = [0.2, 0.1];
    let mut cot = DerivativeBundle::zeros(1, 2, 1);
    cot.value[0] = 0.8;
    cot.jac = vec![-0.3, 0.5];
    let analytic =
        basis_param_grad(&fam, 1, &x, 1, &cot).map_err(|e| e.to_string())?;
    let p0 = fam.params().to_vec();
    let eval = |p: &[f64]| -> f64 {
        let f = GaussianKernelBasis::new(arch.clone(), anchors.clone(), p.to_vec(), true)
            .unwrap();
        let b = f.eval(1, &x, 1).unwrap();
        cot.value[0] * b.value[0] + cot.jac[0] * b.jac[0] + cot.jac[1] * b.jac[1]
    };
    let mut worst = 0.0_f64;
    let mut p = p0.clone();
    for s in 0..p0.len() {
        let h = 1e-5 * (1.0 + p0[s].abs());
        p[s] = p0[s] + h;
        let plus = eval(&p);
        p[s] = p0[s] - h;
        let minus = eval(&p);
        p[s] = p0[s];
        worst = worst.max(((plus - minus) / (2.0 * h) - analytic.as_slice()[s]).abs());
    }
    Ok(worst)
}

fn adjoint_fd() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let anchors: Vec<Vec<f64>> = (0..6)
        .map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
        .collect();
    let targets: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let build_set = || {
        ConstraintSet::new(
            anchors
                .iter()
                .zip(&targets)
                .map(|(a, t)| Constraint {
                    op: LinearOperator::identity(&["x", "y"]),
                    anchor: a.clone(),
                    target: vec![*t],
                })
                .collect(),
            Arc::new(CoeffRegistry::new()),
        )
        .unwrap()
    };
    let fam = SkewedRbfBasis::init(anchors.clone(), 0.5, false).map_err(|e| e.to_string())?;
    let set = build_set();
    let system = assemble(&fam, &set).map_err(|e| e.to_string())?;
    let w = solve_weights(&system).map_err(|e| e.to_string())?;
    let dw: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    let analytic =
        vjp_through_solve(&system, &fam, &set, &w, &dw).map_err(|e| e.to_string())?;
    let p0 = fam.params().to_vec();
    let loss_of = |p: &[f64]| -> f64 {
        let mut f = SkewedRbfBasis::init(anchors.clone(), 0.5, false).unwrap();
        f.set_params(p).unwrap();
        let sys = assemble(&f, &build_set()).unwrap();
        solve_weights(&sys).unwrap().iter().map(|v| v * v).sum()
    };
    let mut worst = 0.0_f64;
    let mut p = p0.clone();
    for s in 0..p0.len() {
        let h = 1e-5;
        p[s] = p0[s] + h;
        let plus = loss_of(&p);
        p[s] = p0[s] - h;
        let minus = loss_of(&p);
        p[s] = p0[s];
        worst = worst.max(((plus - minus) / (2.0 * h) - analytic.as_slice()[s]).abs());
    }
    Ok(worst)
}

fn support_oracle() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let anchors: Vec<Vec<f64>> = (0..400)
        .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let sigma = 0.05;
    let index = crate::sparse::build_index(&anchors, sigma).map_err(|e| e.to_string())?;
    for _ in 0..25 {
        let q = [rng.gen_range(-1.1..1.1), rng.gen_range(-1.1..1.1)];
        let got = crate::sparse::support_set(&index, &q, usize::MAX);
        let mut want: Vec<(f64, usize)> = anchors
            .iter()
            .enumerate()
            .filter_map(|(i, a)| {
                let d2 = (a[0] - q[0]).powi(2) + (a[1] - q[1]).powi(2);
                if d2 < (3.0 * sigma) * (3.0 * sigma) {
                    Some((d2, i))
                } else {
                    None
                }
            })
            .collect();
        want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = want.into_iter().map(|(_, i)| i).collect();
        if got != want {
            return Err(format!("support mismatch at {q:?}"));
        }
    }
    Ok(0.0)
}

fn marching_circle() -> Result<f64, String> {
    let n = 64;
    let half = 2.0;
    let d = 2.0 * half / (n - 1) as f64;
    let values: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (ix, iy) = (idx % n, idx / n);
            let x = -half + d * ix as f64;
            let y = -half + d * iy as f64;
            x * x + y * y - 1.0
        })
        .collect();
    let grid = crate::apps::marching::GridValues2D::new(n, n, -half, -half, d, d, values)
        .map_err(|e| e.to_string())?;
    let polys = crate::apps::marching::marching_squares(&grid, 0.0);
    if polys.is_empty() {
        return Err("no contour extracted".into());
    }
    let mut worst = 0.0_f64;
    for poly in &polys {
        for p in poly {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            worst = worst.max((r - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Runs all checks, printing one line per check; true iff all passed.
pub fn run_checks() -> bool {
    let results = [
        check("lu_solve_vs_elimination_oracle", lu_vs_elimination, 1e-10),
        check("encoder_derivatives_vs_fd", encoder_fd, 1e-6),
        check("kernel_param_grad_vs_fd", kernel_param_grad_fd, 1e-6),
        check("adjoint_vjp_vs_fd", adjoint_fd, 1e-5),
        check("spatial_index_vs_brute_force", support_oracle, 0.0),
        check("marching_squares_circle", marching_circle, 1e-2),
    ];
    let mut all = true;
    for r in &results {
        println!(
            "{} {} - {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        all &= r.passed;
    }
    all
}

#[cfg(test)]
mod tests {
    #[test]
    fn verification_suite_passes() {
        assert!(super::run_checks());
    }
}
