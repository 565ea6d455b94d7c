//! Derivative bundles, a small feed-forward encoder with analytic layerwise
//! derivatives, parameter gradients via a recorded-operation tape, and
//! finite-difference verifiers.

pub mod pullback;
pub mod scalar;
pub mod tape;

pub use scalar::Scalar;
pub use tape::{Tape, Var};

use crate::{Error, Result};

/// A function's value and input-derivatives up to order 2 at one point,
/// generic over the scalar type so the same structure carries plain numbers
/// or tape variables.
///
/// Layout: `value[f]`, `jac[f * m + k] = d value_f / d x_k` (present for
/// order >= 1), `hess[(f * m + k1) * m + k2]` (present iff order = 2,
/// symmetric in `k1, k2`).
#[derive(Debug, Clone)]
pub struct BundleOf<S> {
    pub order: u8,
    pub outputs: usize,
    pub inputs: usize,
    pub value: Vec<S>,
    pub jac: Vec<S>,
    pub hess: Vec<S>,
}

/// The plain-number derivative bundle used across module boundaries.
pub type DerivativeBundle = BundleOf<f64>;

impl<S: Copy> BundleOf<S> {
    #[inline]
    pub fn jac_at(&self, f: usize, k: usize) -> S {
        self.jac[f * self.inputs + k]
    }

    #[inline]
    pub fn hess_at(&self, f: usize, k1: usize, k2: usize) -> S {
        self.hess[(f * self.inputs + k1) * self.inputs + k2]
    }
}

impl<S: Scalar> BundleOf<S> {
    /// Strips tape/context information down to plain values.
    pub fn to_values(&self) -> DerivativeBundle {
        DerivativeBundle {
            order: self.order,
            outputs: self.outputs,
            inputs: self.inputs,
            value: self.value.iter().map(|s| s.val()).collect(),
            jac: self.jac.iter().map(|s| s.val()).collect(),
            hess: self.hess.iter().map(|s| s.val()).collect(),
        }
    }
}

impl DerivativeBundle {
    /// Zero-filled bundle, useful as a cotangent container.
    pub fn zeros(outputs: usize, inputs: usize, order: u8) -> Self {
        Self {
            order,
            outputs,
            inputs,
            value: vec![0.0; outputs],
            jac: if order >= 1 {
                vec![0.0; outputs * inputs]
            } else {
                Vec::new()
            },
            hess: if order >= 2 {
                vec![0.0; outputs * inputs * inputs]
            } else {
                Vec::new()
            },
        }
    }

    pub fn set_jac(&mut self, f: usize, k: usize, v: f64) {
        let m = self.inputs;
        self.jac[f * m + k] = v;
    }

    pub fn set_hess(&mut self, f: usize, k1: usize, k2: usize, v: f64) {
        let m = self.inputs;
        self.hess[(f * m + k1) * m + k2] = v;
    }

    /// Checks finiteness and Hessian symmetry.
    pub fn check_invariants(&self) -> Result<()> {
        let all = self
            .value
            .iter()
            .chain(&self.jac)
            .chain(&self.hess)
            .all(|v| v.is_finite());
        if !all {
            return Err(Error::DimensionMismatch(
                "derivative bundle contains non-finite entries".into(),
            ));
        }
        if self.order == 2 {
            for f in 0..self.outputs {
                for k1 in 0..self.inputs {
                    for k2 in 0..k1 {
                        let d = (self.hess_at(f, k1, k2) - self.hess_at(f, k2, k1)).abs();
                        if d > 1e-10 {
                            return Err(Error::DimensionMismatch(format!(
                                "hessian asymmetry {d} at ({f},{k1},{k2})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Pointwise activation with analytic first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
    Softplus { beta: f64 },
    Sine { omega: f64 },
}

/// Default sharpness for softplus.
pub const SOFTPLUS_BETA_DEFAULT: f64 = 10.0;
/// Default frequency for the sinusoidal activation.
pub const SINE_OMEGA_DEFAULT: f64 = 30.0;

impl Activation {
    /// Parses an activation tag: `tanh`, `softplus`, `sine`, `relu`, `linear`.
    pub fn parse(tag: &str) -> Result<Self> {
        Ok(match tag {
            "linear" | "id" => Activation::Linear,
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            "softplus" => Activation::Softplus {
                beta: SOFTPLUS_BETA_DEFAULT,
            },
            "sine" => Activation::Sine {
                omega: SINE_OMEGA_DEFAULT,
            },
            other => {
                return Err(Error::BadConfig(format!(
                    "unknown activation tag {other:?}"
                )))
            }
        })
    }

    pub fn tag(&self) -> String {
        match self {
            Activation::Linear => "linear".into(),
            Activation::Tanh => "tanh".into(),
            Activation::Relu => "relu".into(),
            Activation::Softplus { beta } => format!("softplus(beta={beta})"),
            Activation::Sine { omega } => format!("sine(omega={omega})"),
        }
    }

    /// Value and first/second derivatives at a preactivation `z`.
    #[inline]
    pub fn apply<S: Scalar>(self, z: S, order: u8) -> (S, S, S) {
        let zero = z.lit(0.0);
        match self {
            Activation::Linear => (z, z.lit(1.0), zero),
            Activation::Tanh => {
                let t = z.tanh();
                let d = z.lit(1.0) - t * t;
                let dd = if order >= 2 { -(t + t) * d } else { zero };
                (t, d, dd)
            }
            Activation::Relu => {
                if z.val() > 0.0 {
                    (z, z.lit(1.0), zero)
                } else {
                    (zero, zero, zero)
                }
            }
            Activation::Softplus { beta } => {
                let u = z * beta;
                // Stable softplus and sigmoid; the branch freezes at the value.
                let (v, sig) = if u.val() > 0.0 {
                    let e = (-u).exp();
                    ((u + (e + 1.0).ln()) / beta, z.lit(1.0) / (e + 1.0))
                } else {
                    let e = u.exp();
                    ((e + 1.0).ln() / beta, e / (e + 1.0))
                };
                let dd = if order >= 2 {
                    sig * (z.lit(1.0) - sig) * beta
                } else {
                    zero
                };
                (v, sig, dd)
            }
            Activation::Sine { omega } => {
                let u = z * omega;
                let s = u.sin();
                let d = u.cos() * omega;
                let dd = if order >= 2 { -s * (omega * omega) } else { zero };
                (s, d, dd)
            }
        }
    }
}

/// One dense layer: `outputs x inputs` weights followed by `outputs` biases
/// in the flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// Architecture of a feed-forward encoder. An empty layer list is the
/// identity map on `input_dim` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderArch {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl EncoderArch {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut prev = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs != prev {
                return Err(Error::ArchMismatch(format!(
                    "layer {i} expects {} inputs but receives {prev}",
                    layer.inputs
                )));
            }
            if layer.outputs == 0 {
                return Err(Error::ArchMismatch(format!("layer {i} has zero outputs")));
            }
            prev = layer.outputs;
        }
        Ok(Self { input_dim, layers })
    }

    /// MLP from a dimension chain with a uniform hidden activation; the final
    /// layer is linear.
    pub fn mlp(dims: &[usize], hidden: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::ArchMismatch(
                "mlp needs at least input and output dims".into(),
            ));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                inputs: dims[i],
                outputs: dims[i + 1],
                activation: if i + 1 < n { hidden } else { Activation::Linear },
            })
            .collect();
        Self::new(dims[0], layers)
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.outputs)
            .unwrap_or(self.input_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.inputs * l.outputs + l.outputs)
            .sum()
    }
}

/// An encoder: architecture plus the flat parameter vector (per layer, the
/// row-major weight matrix then the bias vector).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub arch: EncoderArch,
    pub weights: Vec<f64>,
}

impl Encoder {
    pub fn new(arch: EncoderArch, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != arch.param_count() {
            return Err(Error::ArchMismatch(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                weights.len()
            )));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::ArchMismatch("encoder weights must be finite".into()));
        }
        Ok(Self { arch, weights })
    }

    /// Identity encoder (no layers): value `x`, jacobian `I`, hessian `0`.
    pub fn identity(input_dim: usize) -> Self {
        Self {
            arch: EncoderArch {
                input_dim,
                layers: Vec::new(),
            },
            weights: Vec::new(),
        }
    }
}

/// Evaluates the encoder and its input derivatives, generic over the scalar
/// carrier. `weights` follows the flat layout of [`Encoder`].
pub fn encoder_bundle<S: Scalar>(
    arch: &EncoderArch,
    weights: &[S],
    x: &[S],
    order: u8,
) -> Result<BundleOf<S>> {
    if x.len() != arch.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "encoder expects {} inputs, got {}",
            arch.input_dim,
            x.len()
        )));
    }
    if order > 2 {
        return Err(Error::UnsupportedOrder {
            requested: order,
            max: 2,
        });
    }
    let m = x.len();
    let some = x[0];
    let zero = some.lit(0.0);
    let one = some.lit(1.0);

    let mut value: Vec<S> = x.to_vec();
    let mut jac: Vec<S> = if order >= 1 {
        let mut j = vec![zero; m * m];
        for k in 0..m {
            j[k * m + k] = one;
        }
        j
    } else {
        Vec::new()
    };
    let mut hess: Vec<S> = if order >= 2 {
        vec![zero; m * m * m]
    } else {
        Vec::new()
    };

    let mut offset = 0usize;
    for layer in &arch.layers {
        let (n_in, n_out) = (layer.inputs, layer.outputs);
        let w = &weights[offset..offset + n_in * n_out];
        let b = &weights[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;

        // Preactivations and their input derivatives: linear in the layer
        // input, so the chain rule is a contraction with W.
        let mut z = Vec::with_capacity(n_out);
        let mut zjac = if order >= 1 {
            vec![zero; n_out * m]
        } else {
            Vec::new()
        };
        let mut zhess = if order >= 2 {
            vec![zero; n_out * m * m]
        } else {
            Vec::new()
        };
        for o in 0..n_out {
            let w_row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = b[o];
            for j in 0..n_in {
                acc = acc + w_row[j] * value[j];
            }
            z.push(acc);
            if order >= 1 {
                for k in 0..m {
                    let mut acc = zero;
                    for j in 0..n_in {
                        acc = acc + w_row[j] * jac[j * m + k];
                    }
                    zjac[o * m + k] = acc;
                }
            }
            if order >= 2 {
                for k1 in 0..m {
                    for k2 in 0..=k1 {
                        let mut acc = zero;
                        for j in 0..n_in {
                            acc = acc + w_row[j] * hess[(j * m + k1) * m + k2];
                        }
                        zhess[(o * m + k1) * m + k2] = acc;
                        zhess[(o * m + k2) * m + k1] = acc;
                    }
                }
            }
        }

        // Activation: value, d * zjac, and dd * (zjac x zjac) + d * zhess.
        let mut new_val = Vec::with_capacity(n_out);
        let mut new_jac = if order >= 1 {
            vec![zero; n_out * m]
        } else {
            Vec::new()
        };
        let mut new_hess = if order >= 2 {
            vec![zero; n_out * m * m]
        } else {
            Vec::new()
        };
        for o in 0..n_out {
            let (v, d, dd) = layer.activation.apply(z[o], order);
            new_val.push(v);
            if order >= 1 {
                for k in 0..m {
                    new_jac[o * m + k] = d * zjac[o * m + k];
                }
            }
            if order >= 2 {
                for k1 in 0..m {
                    for k2 in 0..=k1 {
                        let t = dd * zjac[o * m + k1] * zjac[o * m + k2]
                            + d * zhess[(o * m + k1) * m + k2];
                        new_hess[(o * m + k1) * m + k2] = t;
                        new_hess[(o * m + k2) * m + k1] = t;
                    }
                }
            }
        }
        value = new_val;
        jac = new_jac;
        hess = new_hess;
    }

    Ok(BundleOf {
        order,
        outputs: value.len(),
        inputs: m,
        value,
        jac,
        hess,
    })
}

/// Evaluates the encoder at a point with derivatives up to `order`.
pub fn encoder_eval(encoder: &Encoder, x: &[f64], order: u8) -> Result<DerivativeBundle> {
    encoder_bundle::<f64>(&encoder.arch, &encoder.weights, x, order)
}

/// Flat gradient with respect to a family's (or encoder's) parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad(pub Vec<f64>);

impl ParamGrad {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        assert_eq!(self.0.len(), other.0.len(), "param grad length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrad, s: f64) {
        assert_eq!(self.0.len(), other.0.len(), "param grad length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }
}

/// Contracts a cotangent (bundle-shaped weights) with a tape-recorded bundle
/// into a single scalar for the reverse sweep. Zero-weight entries are
/// skipped.
pub fn contract_bundle<'t>(
    tape: &'t Tape,
    bundle: &BundleOf<Var<'t>>,
    cotangent: &DerivativeBundle,
) -> Result<Var<'t>> {
    if cotangent.outputs != bundle.outputs || cotangent.order > bundle.order {
        return Err(Error::DimensionMismatch(format!(
            "cotangent shape ({} outputs, order {}) does not match bundle ({} outputs, order {})",
            cotangent.outputs, cotangent.order, bundle.outputs, bundle.order
        )));
    }
    let mut acc = tape.leaf(0.0);
    for (f, &w) in cotangent.value.iter().enumerate() {
        if w != 0.0 {
            acc = acc + bundle.value[f] * w;
        }
    }
    for (i, &w) in cotangent.jac.iter().enumerate() {
        if w != 0.0 {
            acc = acc + bundle.jac[i] * w;
        }
    }
    for (i, &w) in cotangent.hess.iter().enumerate() {
        if w != 0.0 {
            acc = acc + bundle.hess[i] * w;
        }
    }
    Ok(acc)
}

/// Parameter gradient of the cotangent-weighted bundle entries: records the
/// bundle computation as elementary operations and sweeps in reverse.
pub fn encoder_param_grad(
    encoder: &Encoder,
    x: &[f64],
    order: u8,
    cotangent: &DerivativeBundle,
) -> Result<ParamGrad> {
    let tape = Tape::new();
    let w_vars = tape.leaves(&encoder.weights);
    let x_vars = tape.leaves(x);
    let bundle = encoder_bundle(&encoder.arch, &w_vars, &x_vars, order)?;
    let output = contract_bundle(&tape, &bundle, cotangent)?;
    Ok(ParamGrad(tape.gradient(output, &w_vars)))
}

/// Central-difference check: compares an analytic gradient of a scalar
/// function against finite differences with per-component step
/// `h = 1e-5 * (1 + |v|)`. Returns the max over components of
/// `|fd - analytic| / (|fd| + |analytic| + 1e-12)`.
pub fn fd_check(eval: impl Fn(&[f64]) -> f64, at: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(at.len(), analytic.len(), "fd_check length mismatch");
    let mut worst = 0.0_f64;
    let mut point = at.to_vec();
    for i in 0..at.len() {
        let h = 1e-5 * (1.0 + at[i].abs());
        point[i] = at[i] + h;
        let plus = eval(&point);
        point[i] = at[i] - h;
        let minus = eval(&point);
        point[i] = at[i];
        let fd = (plus - minus) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs() + 1e-12);
        worst = worst.max(err);
    }
    worst
}
