//! Basis-function families. Each family exposes the derivative-bundle
//! contract per basis index plus parameter-gradient hooks, with evaluation
//! written once against [`Scalar`] so the identical formulas run on plain
//! numbers or on the tape.

mod kernels;
mod simple;

pub use kernels::{
    DotProductKernelBasis, GaussianKernelBasis, HybridInner, HybridKernelBasis,
    HypernetKernelBasis, SkewedRbfBasis,
};
pub use simple::{
    hypernet_generate, ConstraintLayerBasis, HypernetBasis, IndependentBasis, PolynomialBasis,
};

use crate::diff::{contract_bundle, BundleOf, DerivativeBundle, ParamGrad, Tape, Var};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cotangents against the bundles of several bases at one point; the unit of
/// work for batched parameter gradients.
#[derive(Debug, Clone)]
pub struct PointCotangents {
    pub x: Vec<f64>,
    /// `(basis index, bundle-shaped weights)` pairs.
    pub per_basis: Vec<(usize, DerivativeBundle)>,
}

/// Common contract for every basis family.
///
/// Parameters are a single flat vector (layout documented per family);
/// anchors are constants, never parameters.
pub trait Basis: Send + Sync {
    /// Input dimension M.
    fn input_dim(&self) -> usize;

    /// Output channels per basis: 1 for kernel families, N for vector
    /// (polynomial) families.
    fn channels(&self) -> usize;

    /// Number of bases I.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn param_count(&self) -> usize {
        self.params().len()
    }

    /// Flat parameter vector.
    fn params(&self) -> &[f64];

    /// Replaces the parameter vector (same length), refreshing caches.
    fn set_params(&mut self, p: &[f64]) -> Result<()>;

    /// Anchor point of basis `i`, for families that have one.
    fn anchor(&self, i: usize) -> Option<&[f64]>;

    /// Parameter slots excluded from training (gradients zeroed).
    fn frozen_slots(&self) -> Vec<usize> {
        Vec::new()
    }

    /// Evaluates basis `i` at `x` with derivatives up to `order`.
    fn eval(&self, i: usize, x: &[f64], order: u8) -> Result<DerivativeBundle>;

    /// Tape-recorded evaluation with parameters supplied as tape variables
    /// (same layout as [`Basis::params`]).
    fn eval_tape<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        i: usize,
        x: &[f64],
        order: u8,
    ) -> Result<BundleOf<Var<'t>>>;

    /// Evaluates every basis at one point into a single bundle with
    /// `outputs = len()`. Only valid for scalar (channels = 1) families;
    /// families with shared per-point work override this.
    fn eval_all(&self, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        scalar_eval_all(self, x, order)
    }

    /// Gradient of a sum of cotangent-weighted bundles over many points with
    /// respect to all parameters. One tape per call; families with shared
    /// per-point or per-anchor work override this.
    fn param_grad_batch(&self, points: &[PointCotangents]) -> Result<ParamGrad> {
        let tape = Tape::new();
        let params = tape.leaves(self.params());
        let mut total = tape.leaf(0.0);
        for point in points {
            for (i, cot) in &point.per_basis {
                let bundle = self.eval_tape(&tape, &params, *i, &point.x, cot.order)?;
                let c = contract_bundle(&tape, &bundle, cot)?;
                total = total + c;
            }
        }
        let mut grad = ParamGrad(tape.gradient(total, &params));
        zero_frozen(self, &mut grad);
        Ok(grad)
    }

    /// Rough number of tape nodes one basis evaluation records; callers use
    /// it to size batched-gradient chunks.
    fn tape_cost_hint(&self) -> usize {
        64
    }

    /// Compact support radius for families with exact sparsity.
    fn support_radius(&self) -> Option<f64> {
        None
    }

    /// Field value reported where no basis has support.
    fn fallback_value(&self) -> Option<f64> {
        None
    }

    /// Human-readable description for run metadata.
    fn describe(&self) -> String;
}

pub(crate) fn zero_frozen(family: &(impl Basis + ?Sized), grad: &mut ParamGrad) {
    for slot in family.frozen_slots() {
        grad.0[slot] = 0.0;
    }
}

pub(crate) fn scalar_eval_all(
    family: &(impl Basis + ?Sized),
    x: &[f64],
    order: u8,
) -> Result<DerivativeBundle> {
    if family.channels() != 1 {
        return Err(Error::DimensionMismatch(
            "eval_all requires a scalar (single-channel) family".into(),
        ));
    }
    let count = family.len();
    let m = family.input_dim();
    let mut out = DerivativeBundle::zeros(count, m, order);
    for i in 0..count {
        let b = family.eval(i, x, order)?;
        out.value[i] = b.value[0];
        if order >= 1 {
            out.jac[i * m..(i + 1) * m].copy_from_slice(&b.jac);
        }
        if order >= 2 {
            out.hess[i * m * m..(i + 1) * m * m].copy_from_slice(&b.hess);
        }
    }
    Ok(out)
}

/// Gradient of one cotangent-weighted bundle with respect to all family
/// parameters, via the recorded-operation tape.
pub fn basis_param_grad(
    family: &dyn Basis,
    i: usize,
    x: &[f64],
    order: u8,
    cotangent: &DerivativeBundle,
) -> Result<ParamGrad> {
    if cotangent.order > order {
        return Err(Error::DimensionMismatch(format!(
            "cotangent order {} exceeds requested order {order}",
            cotangent.order
        )));
    }
    family.param_grad_batch(&[PointCotangents {
        x: x.to_vec(),
        per_basis: vec![(i, cotangent.clone())],
    }])
}

pub(crate) fn check_index(family: &(impl Basis + ?Sized), i: usize) -> Result<()> {
    if i >= family.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            count: family.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_order(order: u8) -> Result<()> {
    if order > 2 {
        return Err(Error::UnsupportedOrder {
            requested: order,
            max: 2,
        });
    }
    Ok(())
}

/// Xavier-uniform initialization for an encoder architecture.
pub(crate) fn xavier_init(
    arch: &crate::diff::EncoderArch,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut w = Vec::with_capacity(arch.param_count());
    for layer in &arch.layers {
        let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
        for _ in 0..layer.inputs * layer.outputs {
            w.push(rng.gen_range(-bound..bound));
        }
        for _ in 0..layer.outputs {
            w.push(0.0);
        }
    }
    w
}

/// Which family to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    GaussianKernel,
    DotProductKernel,
    HypernetKernel,
    HybridGaussian,
    HybridHypernet,
    SkewedRbf,
    SimpleRbf,
    Polynomial,
    Independent,
    ConstraintLayer,
    Hypernet,
}

impl BasisKind {
    pub fn parse(tag: &str) -> Result<Self> {
        Ok(match tag {
            "gaussian_kernel" => Self::GaussianKernel,
            "dot_product_kernel" => Self::DotProductKernel,
            "hypernet_kernel" => Self::HypernetKernel,
            "hybrid_gaussian" => Self::HybridGaussian,
            "hybrid_hypernet" => Self::HybridHypernet,
            "skewed_rbf" => Self::SkewedRbf,
            "simple_rbf" => Self::SimpleRbf,
            "polynomial" => Self::Polynomial,
            "independent" => Self::Independent,
            "constraint_layer" => Self::ConstraintLayer,
            "hypernet" => Self::Hypernet,
            other => {
                return Err(Error::BadConfig(format!("unknown basis kind {other:?}")))
            }
        })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::GaussianKernel => "gaussian_kernel",
            Self::DotProductKernel => "dot_product_kernel",
            Self::HypernetKernel => "hypernet_kernel",
            Self::HybridGaussian => "hybrid_gaussian",
            Self::HybridHypernet => "hybrid_hypernet",
            Self::SkewedRbf => "skewed_rbf",
            Self::SimpleRbf => "simple_rbf",
            Self::Polynomial => "polynomial",
            Self::Independent => "independent",
            Self::ConstraintLayer => "constraint_layer",
            Self::Hypernet => "hypernet",
        }
    }
}

/// Family-independent initialization settings.
#[derive(Debug, Clone)]
pub struct BasisInit {
    pub kind: BasisKind,
    /// Hidden layer widths of the encoder (input/output dims are implied).
    pub encoder_hidden: Vec<usize>,
    /// Feature-space dimension of kernel encoders (or per-basis output dim).
    pub features: usize,
    pub activation: crate::diff::Activation,
    /// Initial kernel scale `s` for feature-space Gaussian kernels.
    pub kernel_scale: f64,
    /// Train `log s` alongside the other parameters.
    pub train_scale: bool,
    /// Hidden width of hypernetworks.
    pub hyper_hidden: usize,
    /// Initial bandwidth `h` for (skewed) RBFs; variances start at `h^2`.
    pub bandwidth: f64,
    /// Truncation width of the hybrid kernel's compact factor.
    pub truncation_sigma: f64,
    /// Field value where a hybrid family has no support.
    pub fallback_value: f64,
    /// Output channels for vector (polynomial) families.
    pub channels: usize,
}

impl Default for BasisInit {
    fn default() -> Self {
        Self {
            kind: BasisKind::GaussianKernel,
            encoder_hidden: vec![64],
            features: 32,
            activation: crate::diff::Activation::Softplus {
                beta: crate::diff::SOFTPLUS_BETA_DEFAULT,
            },
            kernel_scale: 50.0,
            train_scale: true,
            hyper_hidden: 32,
            bandwidth: 0.1,
            truncation_sigma: 0.05,
            fallback_value: 1e5,
            channels: 1,
        }
    }
}

/// Builds a basis family with one basis per anchor, deterministically from
/// the seed. Encoder weights draw from the Xavier-uniform range.
pub fn init_basis(init: &BasisInit, anchors: Vec<Vec<f64>>, seed: u64) -> Result<Box<dyn Basis>> {
    if anchors.is_empty() {
        return Err(Error::BadConfig("basis family needs at least one anchor".into()));
    }
    let dim = anchors[0].len();
    if anchors.iter().any(|a| a.len() != dim) {
        return Err(Error::BadConfig("anchors must share one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![dim];
    dims.extend(&init.encoder_hidden);
    dims.push(init.features);
    let arch = crate::diff::EncoderArch::mlp(&dims, init.activation)?;

    Ok(match init.kind {
        BasisKind::GaussianKernel => Box::new(GaussianKernelBasis::init(
            arch,
            anchors,
            init.kernel_scale,
            init.train_scale,
            &mut rng,
        )?),
        BasisKind::DotProductKernel => {
            Box::new(DotProductKernelBasis::init(arch, anchors, &mut rng)?)
        }
        BasisKind::HypernetKernel => Box::new(HypernetKernelBasis::init(
            arch,
            init.hyper_hidden,
            anchors,
            init.kernel_scale,
            init.train_scale,
            &mut rng,
        )?),
        BasisKind::HybridGaussian => {
            let inner = GaussianKernelBasis::init(
                arch,
                anchors,
                init.kernel_scale,
                init.train_scale,
                &mut rng,
            )?;
            Box::new(HybridKernelBasis::new(
                HybridInner::Gaussian(inner),
                init.truncation_sigma,
                init.fallback_value,
            )?)
        }
        BasisKind::HybridHypernet => {
            let inner = HypernetKernelBasis::init(
                arch,
                init.hyper_hidden,
                anchors,
                init.kernel_scale,
                init.train_scale,
                &mut rng,
            )?;
            Box::new(HybridKernelBasis::new(
                HybridInner::Hypernet(inner),
                init.truncation_sigma,
                init.fallback_value,
            )?)
        }
        BasisKind::SkewedRbf => {
            Box::new(SkewedRbfBasis::init(anchors, init.bandwidth, false)?)
        }
        BasisKind::SimpleRbf => {
            Box::new(SkewedRbfBasis::init(anchors, init.bandwidth, true)?)
        }
        BasisKind::Polynomial => Box::new(PolynomialBasis::init(
            anchors.len(),
            init.channels,
            &mut rng,
        )?),
        BasisKind::Independent => {
            Box::new(IndependentBasis::init(arch, anchors.len(), &mut rng)?)
        }
        BasisKind::ConstraintLayer => {
            // The encoder's output features are the bases: one per anchor.
            let mut dims = vec![dim];
            dims.extend(&init.encoder_hidden);
            dims.push(anchors.len());
            let arch = crate::diff::EncoderArch::mlp(&dims, init.activation)?;
            Box::new(ConstraintLayerBasis::init(arch, &mut rng)?)
        }
        BasisKind::Hypernet => Box::new(HypernetBasis::init(
            arch,
            init.hyper_hidden,
            anchors.len(),
            &mut rng,
        )?),
    })
}
