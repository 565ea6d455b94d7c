// Scratch calibration runner (not shipped): bandwidth / lr sweeps.
use cnfield::apps::advection::{build_grid, AdvectionSetup};
use cnfield::apps::grid::{rmse_metrics, EvalGrid};
use cnfield::basis::SkewedRbfBasis;
use cnfield::collocation::ConstrainedField;

fn score(field: &ConstrainedField, beta: f64, res: usize) -> (f64, f64) {
    let grid = EvalGrid::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![res, res]).unwrap();
    let mut p = Vec::new();
    let mut t = Vec::new();
    for pt in grid.points() {
        p.push(field.eval(&pt, None).unwrap()[0]);
        t.push((std::f64::consts::TAU * (pt[0] - beta * pt[1])).sin());
    }
    rmse_metrics(&p, &t)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let nb: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(16);
    let nx: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let nt: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(15);
    let beta: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let pert: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    for bw_mul in [1.0, 1.5, 2.0, 2.5, 3.0, 4.0] {
        let bandwidth = bw_mul / nx as f64;
        let (anchors, boundary) = build_grid(nb, nx, nt, pert, 0);
        let setup = AdvectionSetup {
            beta,
            shift: 0.0,
            anchors: anchors.clone(),
            boundary,
            op_text: "dt + beta*dx".into(),
        };
        let family = SkewedRbfBasis::init(anchors, bandwidth, false).unwrap();
        let set = setup.constraint_set().unwrap();
        let mut field = ConstrainedField::new(Box::new(family), set).unwrap();
        match field.solve() {
            Ok(()) => {
                let cond = field.system().unwrap().cond();
                let (rmse, nrmse) = score(&field, beta, 48);
                println!("bw={bandwidth:.4} ({bw_mul} cells): cond={cond:.3e} rmse={rmse:.4e} nrmse={nrmse:.4e}");
            }
            Err(e) => println!("bw={bandwidth:.4}: {e}"),
        }
    }
}
