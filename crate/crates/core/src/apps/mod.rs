//! Demo applications, configuration, level-set extraction, and output
//! emitters.

pub mod ablation;
pub mod advection;
pub mod check;
pub mod config;
pub mod emit;
pub mod fermat;
pub mod grid;
pub mod marching;
pub mod recon;
pub mod shape2d;
pub mod shapes;

use crate::{Error, Result};
use config::Config;
use std::path::Path;

/// Built-in default configuration for a demo, shipped in-repo and embedded
/// in the binary.
pub fn default_config(demo: &str) -> Option<&'static str> {
    Some(match demo {
        "fermat" => include_str!("../../configs/fermat.cfg"),
        "advection" => include_str!("../../configs/advection.cfg"),
        "transfer" => include_str!("../../configs/transfer.cfg"),
        "shape2d" => include_str!("../../configs/shape2d.cfg"),
        "recon_sparse" => include_str!("../../configs/recon_sparse.cfg"),
        "cond_ablation" => include_str!("../../configs/cond_ablation.cfg"),
        _ => return None,
    })
}

pub const DEMOS: [&str; 6] = [
    "fermat",
    "advection",
    "transfer",
    "shape2d",
    "recon_sparse",
    "cond_ablation",
];

/// Runs a demo against a parsed config, writing outputs under `out`.
/// Rejects configs containing keys the demo does not know.
pub fn run_demo(demo: &str, cfg: &Config, out: &Path) -> Result<()> {
    match demo {
        "fermat" => {
            fermat::run_fermat(cfg, out)?;
        }
        "advection" => {
            advection::run_advection(cfg, out)?;
        }
        "transfer" => {
            advection::run_transfer(cfg, out)?;
        }
        "shape2d" => {
            shape2d::run_shape2d(cfg, out)?;
        }
        "recon_sparse" => {
            recon::run_recon_sparse(cfg, out)?;
        }
        "cond_ablation" => {
            ablation::run_cond_ablation(cfg, out)?;
        }
        other => {
            return Err(Error::BadConfig(format!(
                "unknown demo {other:?}; expected one of {DEMOS:?}"
            )))
        }
    }
    cfg.finish()
}

/// Exit code mapping: 0 success, 2 residual violation, 3 singular system,
/// 4 config/input error, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ResidualViolation { .. } => 2,
        Error::SingularMatrix { .. } | Error::SingularPatch { .. } => 3,
        Error::BadConfig(_) | Error::ParseError { .. } | Error::Io(_) | Error::BadTarget(_) => 4,
        _ => 1,
    }
}
