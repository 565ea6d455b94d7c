// Scratch profiling of one training iteration's pieces (not shipped).
use cnfield::apps::advection::{build_grid, AdvectionSetup};
use cnfield::basis::{Basis, SkewedRbfBasis};
use cnfield::collocation::{assemble, solve_weights, vjp_through_solve, ConstrainedField};
use cnfield::linalg::{cond_surrogate_grad_from, inverse, lu_factor};
use cnfield::train::{LossSpec, LossTerm};
use std::time::Instant;

fn main() {
    let (anchors, boundary) = build_grid(32, 32, 31, 0.1, 0);
    let setup = AdvectionSetup {
        beta: 0.1, shift: 0.0, anchors: anchors.clone(), boundary,
        op_text: "dt + beta*dx".into(),
    };
    let family = SkewedRbfBasis::init(anchors.clone(), 0.0625, false).unwrap();
    let set = setup.constraint_set().unwrap();

    let t = Instant::now();
    let system = assemble(&family, &set).unwrap();
    println!("assemble (incl. LU + inverse for cond): {:?}", t.elapsed());

    let t = Instant::now();
    let lu = lu_factor(system.matrix().unwrap()).unwrap();
    println!("  lu_factor alone: {:?}", t.elapsed());
    let t = Instant::now();
    let inv = inverse(&lu);
    println!("  inverse alone: {:?}", t.elapsed());
    let t = Instant::now();
    let _g = cond_surrogate_grad_from(system.matrix().unwrap(), &inv).unwrap();
    println!("cond_surrogate_grad (2 matmuls): {:?}", t.elapsed());

    let w = solve_weights(&system).unwrap();
    let dw: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    let t = Instant::now();
    let _ = vjp_through_solve(&system, &family, &set, &w, &dw).unwrap();
    println!("vjp_through_solve (adjoint + tape rows): {:?}", t.elapsed());

    let mut field = ConstrainedField::new(Box::new(family), set).unwrap();
    field.solve().unwrap();
    let loss = LossSpec::new(
        vec![LossTerm::Cond { weight: 1.0 }, LossTerm::TotalVariation { weight: 1.0, samples: 256 }],
        vec![(0.0, 1.0); 2],
    ).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let t = Instant::now();
    let (v, _g) = cnfield::collocation::total_loss_grad(&mut field, &loss, &mut rng).unwrap();
    println!("total_loss_grad full iteration: {:?} (loss {v:.3})", t.elapsed());
}
