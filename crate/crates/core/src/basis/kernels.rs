//! Kernel-style basis families: feature-space Gaussian and dot-product
//! kernels over a shared encoder, the hypernet kernel for repeated anchors,
//! the compactly supported hybrid kernel, and the skewed RBF.

use super::{check_index, check_order, zero_frozen, Basis, PointCotangents};
use crate::diff::{
    contract_bundle, encoder_bundle, BundleOf, DerivativeBundle, EncoderArch, ParamGrad, Scalar,
    Tape, Var,
};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// Gaussian similarity of a feature bundle against fixed anchor features:
/// `psi = exp(-c * sum_f (c_f - v_f)^2)` with its input derivatives chained
/// through the feature jacobian/hessian.
fn gaussian_compose<S: Scalar>(
    anchor_feat: &[S],
    feat: &BundleOf<S>,
    c: S,
    order: u8,
) -> BundleOf<S> {
    let m = feat.inputs;
    let nf = feat.outputs;
    let zero = c.lit(0.0);
    let delta: Vec<S> = anchor_feat
        .iter()
        .zip(&feat.value)
        .map(|(&a, &v)| a - v)
        .collect();
    let mut q = zero;
    for &d in &delta {
        q = q + d * d;
    }
    let psi = (-(c * q)).exp();

    let mut out = BundleOf {
        order,
        outputs: 1,
        inputs: m,
        value: vec![psi],
        jac: Vec::new(),
        hess: Vec::new(),
    };
    if order >= 1 {
        // dq_k = -2 sum_f delta_f J_fk
        let mut dq = vec![zero; m];
        for k in 0..m {
            let mut acc = zero;
            for f in 0..nf {
                acc = acc + delta[f] * feat.jac_at(f, k);
            }
            dq[k] = acc * (-2.0);
        }
        out.jac = dq.iter().map(|&qk| -(c * psi * qk)).collect();
        if order >= 2 {
            let mut hess = vec![zero; m * m];
            for k1 in 0..m {
                for k2 in 0..=k1 {
                    // d2q = 2 sum_f (J_fk1 J_fk2 - delta_f H_fk1k2)
                    let mut acc = zero;
                    for f in 0..nf {
                        acc = acc + feat.jac_at(f, k1) * feat.jac_at(f, k2)
                            - delta[f] * feat.hess_at(f, k1, k2);
                    }
                    let d2q = acc * 2.0;
                    let h = psi * (c * c * dq[k1] * dq[k2] - c * d2q);
                    hess[k1 * m + k2] = h;
                    hess[k2 * m + k1] = h;
                }
            }
            out.hess = hess;
        }
    }
    out
}

/// Dot-product similarity `psi = sum_f c_f v_f`, linear in the features.
fn dot_compose<S: Scalar>(anchor_feat: &[S], feat: &BundleOf<S>, order: u8) -> BundleOf<S> {
    let m = feat.inputs;
    let nf = feat.outputs;
    let zero = anchor_feat[0].lit(0.0);
    let mut value = zero;
    for f in 0..nf {
        value = value + anchor_feat[f] * feat.value[f];
    }
    let mut out = BundleOf {
        order,
        outputs: 1,
        inputs: m,
        value: vec![value],
        jac: Vec::new(),
        hess: Vec::new(),
    };
    if order >= 1 {
        out.jac = (0..m)
            .map(|k| {
                let mut acc = zero;
                for f in 0..nf {
                    acc = acc + anchor_feat[f] * feat.jac_at(f, k);
                }
                acc
            })
            .collect();
        if order >= 2 {
            let mut hess = vec![zero; m * m];
            for k1 in 0..m {
                for k2 in 0..=k1 {
                    let mut acc = zero;
                    for f in 0..nf {
                        acc = acc + anchor_feat[f] * feat.hess_at(f, k1, k2);
                    }
                    hess[k1 * m + k2] = acc;
                    hess[k2 * m + k1] = acc;
                }
            }
            out.hess = hess;
        }
    }
    out
}

/// Product of two scalar bundles by the Leibniz rule.
fn product_bundle<S: Scalar>(a: &BundleOf<S>, b: &BundleOf<S>, order: u8) -> BundleOf<S> {
    let m = a.inputs;
    let av = a.value[0];
    let bv = b.value[0];
    let mut out = BundleOf {
        order,
        outputs: 1,
        inputs: m,
        value: vec![av * bv],
        jac: Vec::new(),
        hess: Vec::new(),
    };
    if order >= 1 {
        out.jac = (0..m).map(|k| a.jac[k] * bv + av * b.jac[k]).collect();
        if order >= 2 {
            let mut hess = vec![av.lit(0.0); m * m];
            for k1 in 0..m {
                for k2 in 0..=k1 {
                    let h = a.hess_at(0, k1, k2) * bv
                        + a.jac[k1] * b.jac[k2]
                        + a.jac[k2] * b.jac[k1]
                        + av * b.hess_at(0, k1, k2);
                    hess[k1 * m + k2] = h;
                    hess[k2 * m + k1] = h;
                }
            }
            out.hess = hess;
        }
    }
    out
}

/// Bundle for the identity features of `x` (value `x`, jacobian `I`), used
/// to route input-space kernels through [`gaussian_compose`].
fn input_feature_bundle<S: Scalar>(x: &[S], order: u8) -> BundleOf<S> {
    let m = x.len();
    let zero = x[0].lit(0.0);
    let one = x[0].lit(1.0);
    let mut jac = Vec::new();
    if order >= 1 {
        jac = vec![zero; m * m];
        for k in 0..m {
            jac[k * m + k] = one;
        }
    }
    BundleOf {
        order,
        outputs: m,
        inputs: m,
        value: x.to_vec(),
        jac,
        hess: if order >= 2 { vec![zero; m * m * m] } else { Vec::new() },
    }
}

fn all_zero_bundle(m: usize, order: u8) -> DerivativeBundle {
    DerivativeBundle::zeros(1, m, order)
}

fn check_finite_params(p: &[f64]) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch("parameters must be finite".into()))
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------------------
// Gaussian feature kernel
// ---------------------------------------------------------------------------

/// `psi_i(x) = exp(-||phi(x_i) - phi(x)||^2 / (2 s^2))` with a shared
/// encoder `phi` and one anchor per basis. The kernel scale is stored and
/// trained as `log s` (the final parameter slot).
pub struct GaussianKernelBasis {
    arch: EncoderArch,
    anchors: Vec<Vec<f64>>,
    /// `[encoder weights .., log_s]`
    params: Vec<f64>,
    train_scale: bool,
    anchor_feats: Vec<Vec<f64>>,
}

impl GaussianKernelBasis {
    pub fn init(
        arch: EncoderArch,
        anchors: Vec<Vec<f64>>,
        kernel_scale: f64,
        train_scale: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel_scale <= 0.0 {
            return Err(Error::BadConfig("kernel scale must be positive".into()));
        }
        let mut params = super::xavier_init(&arch, rng);
        params.push(kernel_scale.ln());
        Self::new(arch, anchors, params, train_scale)
    }

    pub fn new(
        arch: EncoderArch,
        anchors: Vec<Vec<f64>>,
        params: Vec<f64>,
        train_scale: bool,
    ) -> Result<Self> {
        if params.len() != arch.param_count() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "gaussian kernel needs {} params (+ log scale), got {}",
                arch.param_count() + 1,
                params.len()
            )));
        }
        check_finite_params(&params)?;
        let mut family = Self {
            arch,
            anchors,
            params,
            train_scale,
            anchor_feats: Vec::new(),
        };
        family.refresh_cache()?;
        Ok(family)
    }

    fn enc_params(&self) -> &[f64] {
        &self.params[..self.arch.param_count()]
    }

    fn log_scale(&self) -> f64 {
        self.params[self.arch.param_count()]
    }

    /// `c = 1 / (2 s^2)` as a differentiable function of `log s`.
    fn half_inv_scale_sq<S: Scalar>(log_s: S) -> S {
        (log_s * (-2.0)).exp() * 0.5
    }

    fn refresh_cache(&mut self) -> Result<()> {
        self.anchor_feats = self
            .anchors
            .iter()
            .map(|a| Ok(encoder_bundle::<f64>(&self.arch, self.enc_params(), a, 0)?.value))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

impl Basis for GaussianKernelBasis {
    fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn channels(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.anchors.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} params, got {}",
                self.params.len(),
                p.len()
            )));
        }
        check_finite_params(p)?;
        self.params.copy_from_slice(p);
        self.refresh_cache()
    }

    fn anchor(&self, i: usize) -> Option<&[f64]> {
        self.anchors.get(i).map(|a| a.as_slice())
    }

    fn frozen_slots(&self) -> Vec<usize> {
        if self.train_scale {
            Vec::new()
        } else {
            vec![self.arch.param_count()]
        }
    }

    fn eval(&self, i: usize, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_index(self, i)?;
        check_order(order)?;
        let feat = encoder_bundle::<f64>(&self.arch, self.enc_params(), x, order)?;
        let c = Self::half_inv_scale_sq(self.log_scale());
        Ok(gaussian_compose(&self.anchor_feats[i], &feat, c, order))
    }

    fn eval_all(&self, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_order(order)?;
        let feat = encoder_bundle::<f64>(&self.arch, self.enc_params(), x, order)?;
        let c = Self::half_inv_scale_sq(self.log_scale());
        let m = self.input_dim();
        let mut out = DerivativeBundle::zeros(self.len(), m, order);
        for i in 0..self.len() {
            let b = gaussian_compose(&self.anchor_feats[i], &feat, c, order);
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

    fn eval_tape<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        i: usize,
        x: &[f64],
        order: u8,
    ) -> Result<BundleOf<Var<'t>>> {
        check_index(self, i)?;
        check_order(order)?;
        let enc = &params[..self.arch.param_count()];
        let log_s = params[self.arch.param_count()];
        let anchor_vars = tape.leaves(&self.anchors[i]);
        let anchor_feat = encoder_bundle(&self.arch, enc, &anchor_vars, 0)?.value;
        let x_vars = tape.leaves(x);
        let feat = encoder_bundle(&self.arch, enc, &x_vars, order)?;
        let c = Self::half_inv_scale_sq(log_s);
        Ok(gaussian_compose(&anchor_feat, &feat, c, order))
    }

    fn param_grad_batch(&self, points: &[PointCotangents]) -> Result<ParamGrad> {
        let tape = Tape::new();
        let params = tape.leaves(&self.params);
        let enc = &params[..self.arch.param_count()];
        let log_s = params[self.arch.param_count()];
        let c = Self::half_inv_scale_sq(log_s);
        // Anchor features recorded once, shared across every point and row.
        let mut anchor_feats: Vec<Option<Vec<Var<'_>>>> = vec![None; self.len()];
        let mut total = tape.leaf(0.0);
        for point in points {
            let order = point
                .per_basis
                .iter()
                .map(|(_, cot)| cot.order)
                .max()
                .unwrap_or(0);
            let x_vars = tape.leaves(&point.x);
            let feat = encoder_bundle(&self.arch, enc, &x_vars, order)?;
            for (i, cot) in &point.per_basis {
                check_index(self, *i)?;
                if anchor_feats[*i].is_none() {
                    let a_vars = tape.leaves(&self.anchors[*i]);
                    anchor_feats[*i] =
                        Some(encoder_bundle(&self.arch, enc, &a_vars, 0)?.value);
                }
                let bundle =
                    gaussian_compose(anchor_feats[*i].as_ref().unwrap(), &feat, c, cot.order);
                let contribution = contract_bundle(&tape, &bundle, cot)?;
                total = total + contribution;
            }
        }
        let mut grad = ParamGrad(tape.gradient(total, &params));
        zero_frozen(self, &mut grad);
        Ok(grad)
    }

    fn tape_cost_hint(&self) -> usize {
        6 * self.arch.output_dim() + 48
    }

    fn describe(&self) -> String {
        format!(
            "gaussian_kernel(bases={}, features={}, scale={:.6}, train_scale={})",
            self.len(),
            self.arch.output_dim(),
            self.log_scale().exp(),
            self.train_scale
        )
    }
}

// ---------------------------------------------------------------------------
// Dot-product feature kernel
// ---------------------------------------------------------------------------

/// `psi_i(x) = phi(x_i) . phi(x)` with a shared encoder.
pub struct DotProductKernelBasis {
    arch: EncoderArch,
    anchors: Vec<Vec<f64>>,
    params: Vec<f64>,
    anchor_feats: Vec<Vec<f64>>,
}

impl DotProductKernelBasis {
    pub fn init(arch: EncoderArch, anchors: Vec<Vec<f64>>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = super::xavier_init(&arch, rng);
        Self::new(arch, anchors, params)
    }

    pub fn new(arch: EncoderArch, anchors: Vec<Vec<f64>>, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "dot-product kernel needs {} params, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        check_finite_params(&params)?;
        let mut family = Self {
            arch,
            anchors,
            params,
            anchor_feats: Vec::new(),
        };
        family.refresh_cache()?;
        Ok(family)
    }

    fn refresh_cache(&mut self) -> Result<()> {
        self.anchor_feats = self
            .anchors
            .iter()
            .map(|a| Ok(encoder_bundle::<f64>(&self.arch, &self.params, a, 0)?.value))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

impl Basis for DotProductKernelBasis {
    fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn channels(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.anchors.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} params, got {}",
                self.params.len(),
                p.len()
            )));
        }
        check_finite_params(p)?;
        self.params.copy_from_slice(p);
        self.refresh_cache()
    }

    fn anchor(&self, i: usize) -> Option<&[f64]> {
        self.anchors.get(i).map(|a| a.as_slice())
    }

    fn eval(&self, i: usize, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_index(self, i)?;
        check_order(order)?;
        let feat = encoder_bundle::<f64>(&self.arch, &self.params, x, order)?;
        Ok(dot_compose(&self.anchor_feats[i], &feat, order))
    }

    fn eval_all(&self, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_order(order)?;
        let feat = encoder_bundle::<f64>(&self.arch, &self.params, x, order)?;
        let m = self.input_dim();
        let mut out = DerivativeBundle::zeros(self.len(), m, order);
        for i in 0..self.len() {
            let b = dot_compose(&self.anchor_feats[i], &feat, order);
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

    fn eval_tape<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        i: usize,
        x: &[f64],
        order: u8,
    ) -> Result<BundleOf<Var<'t>>> {
        check_index(self, i)?;
        check_order(order)?;
        let anchor_vars = tape.leaves(&self.anchors[i]);
        let anchor_feat = encoder_bundle(&self.arch, params, &anchor_vars, 0)?.value;
        let x_vars = tape.leaves(x);
        let feat = encoder_bundle(&self.arch, params, &x_vars, order)?;
        Ok(dot_compose(&anchor_feat, &feat, order))
    }

    fn param_grad_batch(&self, points: &[PointCotangents]) -> Result<ParamGrad> {
        let tape = Tape::new();
        let params = tape.leaves(&self.params);
        let mut anchor_feats: Vec<Option<Vec<Var<'_>>>> = vec![None; self.len()];
        let mut total = tape.leaf(0.0);
        for point in points {
            let order = point
                .per_basis
                .iter()
                .map(|(_, cot)| cot.order)
                .max()
                .unwrap_or(0);
            let x_vars = tape.leaves(&point.x);
            let feat = encoder_bundle(&self.arch, &params, &x_vars, order)?;
            for (i, cot) in &point.per_basis {
                check_index(self, *i)?;
                if anchor_feats[*i].is_none() {
                    let a_vars = tape.leaves(&self.anchors[*i]);
                    anchor_feats[*i] =
                        Some(encoder_bundle(&self.arch, &params, &a_vars, 0)?.value);
                }
                let bundle = dot_compose(anchor_feats[*i].as_ref().unwrap(), &feat, cot.order);
                let contribution = contract_bundle(&tape, &bundle, cot)?;
                total = total + contribution;
            }
        }
        Ok(ParamGrad(tape.gradient(total, &params)))
    }

    fn tape_cost_hint(&self) -> usize {
        6 * self.arch.output_dim() + 48
    }

    fn describe(&self) -> String {
        format!(
            "dot_product_kernel(bases={}, features={})",
            self.len(),
            self.arch.output_dim()
        )
    }
}

// ---------------------------------------------------------------------------
// Hypernet kernel
// ---------------------------------------------------------------------------

/// `psi_i(x) = exp(-||phi_i(x_i) - phi_i(x)||^2 / (2 s^2))` where the
/// weights of `phi_i` come from a hypernetwork conditioned on the anchor
/// point.
///
/// The hypernetwork input is the anchor with one extra channel carrying the
/// basis ordinal among bases sharing that exact anchor (0 when unique), so
/// collocated constraints still generate distinct encoders and the system
/// stays invertible.
pub struct HypernetKernelBasis {
    inner_arch: EncoderArch,
    hyper_arch: EncoderArch,
    anchors: Vec<Vec<f64>>,
    /// Hypernet inputs: anchor coordinates plus the collocation ordinal.
    cond_inputs: Vec<Vec<f64>>,
    /// `[hypernet weights .., log_s]`
    params: Vec<f64>,
    train_scale: bool,
    gen_weights: Vec<Vec<f64>>,
    anchor_feats: Vec<Vec<f64>>,
}

/// Anchor coordinates plus a per-anchor-group ordinal channel.
fn conditioning_inputs(anchors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let ordinal = anchors[..i].iter().filter(|b| b.as_slice() == a.as_slice()).count();
        let mut cond = a.clone();
        cond.push(ordinal as f64);
        out.push(cond);
    }
    out
}

impl HypernetKernelBasis {
    pub fn init(
        inner_arch: EncoderArch,
        hyper_hidden: usize,
        anchors: Vec<Vec<f64>>,
        kernel_scale: f64,
        train_scale: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel_scale <= 0.0 {
            return Err(Error::BadConfig("kernel scale must be positive".into()));
        }
        let dim = anchors.first().map(|a| a.len()).unwrap_or(0);
        let hyper_arch = EncoderArch::mlp(
            &[dim + 1, hyper_hidden, inner_arch.param_count()],
            crate::diff::Activation::Tanh,
        )?;
        let mut params = super::xavier_init(&hyper_arch, rng);
        // Seed the output bias with a plain encoder initialization: the
        // generated encoders start near a shared base and diverge per anchor.
        let base = super::xavier_init(&inner_arch, rng);
        let bias_start = params.len() - inner_arch.param_count();
        params[bias_start..].copy_from_slice(&base);
        params.push(kernel_scale.ln());
        Self::new(inner_arch, hyper_arch, anchors, params, train_scale)
    }

    pub fn new(
        inner_arch: EncoderArch,
        hyper_arch: EncoderArch,
        anchors: Vec<Vec<f64>>,
        params: Vec<f64>,
        train_scale: bool,
    ) -> Result<Self> {
        if hyper_arch.output_dim() != inner_arch.param_count() {
            return Err(Error::ArchMismatch(format!(
                "hypernet outputs {} values but the encoder needs {}",
                hyper_arch.output_dim(),
                inner_arch.param_count()
            )));
        }
        if params.len() != hyper_arch.param_count() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "hypernet kernel needs {} params (+ log scale), got {}",
                hyper_arch.param_count() + 1,
                params.len()
            )));
        }
        check_finite_params(&params)?;
        let cond_inputs = conditioning_inputs(&anchors);
        let mut family = Self {
            inner_arch,
            hyper_arch,
            anchors,
            cond_inputs,
            params,
            train_scale,
            gen_weights: Vec::new(),
            anchor_feats: Vec::new(),
        };
        family.refresh_cache()?;
        Ok(family)
    }

    fn hyper_params(&self) -> &[f64] {
        &self.params[..self.hyper_arch.param_count()]
    }

    fn log_scale(&self) -> f64 {
        self.params[self.hyper_arch.param_count()]
    }

    fn refresh_cache(&mut self) -> Result<()> {
        self.gen_weights = self
            .cond_inputs
            .iter()
            .map(|c| {
                Ok(encoder_bundle::<f64>(&self.hyper_arch, self.hyper_params(), c, 0)?.value)
            })
            .collect::<Result<_>>()?;
        self.anchor_feats = self
            .anchors
            .iter()
            .zip(&self.gen_weights)
            .map(|(a, w)| Ok(encoder_bundle::<f64>(&self.inner_arch, w, a, 0)?.value))
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Encoder weights generated for basis `i` (for diagnostics and tests).
    pub fn generated_weights(&self, i: usize) -> &[f64] {
        &self.gen_weights[i]
    }
}

impl Basis for HypernetKernelBasis {
    fn input_dim(&self) -> usize {
        self.inner_arch.input_dim
    }

    fn channels(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.anchors.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} params, got {}",
                self.params.len(),
                p.len()
            )));
        }
        check_finite_params(p)?;
        self.params.copy_from_slice(p);
        self.refresh_cache()
    }

    fn anchor(&self, i: usize) -> Option<&[f64]> {
        self.anchors.get(i).map(|a| a.as_slice())
    }

    fn frozen_slots(&self) -> Vec<usize> {
        if self.train_scale {
            Vec::new()
        } else {
            vec![self.hyper_arch.param_count()]
        }
    }

    fn eval(&self, i: usize, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_index(self, i)?;
        check_order(order)?;
        let feat = encoder_bundle::<f64>(&self.inner_arch, &self.gen_weights[i], x, order)?;
        let c = GaussianKernelBasis::half_inv_scale_sq(self.log_scale());
        Ok(gaussian_compose(&self.anchor_feats[i], &feat, c, order))
    }

    fn eval_tape<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        i: usize,
        x: &[f64],
        order: u8,
    ) -> Result<BundleOf<Var<'t>>> {
        check_index(self, i)?;
        check_order(order)?;
        let hyper = &params[..self.hyper_arch.param_count()];
        let log_s = params[self.hyper_arch.param_count()];
        let cond_vars = tape.leaves(&self.cond_inputs[i]);
        let w = encoder_bundle(&self.hyper_arch, hyper, &cond_vars, 0)?.value;
        let anchor_vars = tape.leaves(&self.anchors[i]);
        let anchor_feat = encoder_bundle(&self.inner_arch, &w, &anchor_vars, 0)?.value;
        let x_vars = tape.leaves(x);
        let feat = encoder_bundle(&self.inner_arch, &w, &x_vars, order)?;
        let c = GaussianKernelBasis::half_inv_scale_sq(log_s);
        Ok(gaussian_compose(&anchor_feat, &feat, c, order))
    }

    fn param_grad_batch(&self, points: &[PointCotangents]) -> Result<ParamGrad> {
        let tape = Tape::new();
        let params = tape.leaves(&self.params);
        let hyper = &params[..self.hyper_arch.param_count()];
        let log_s = params[self.hyper_arch.param_count()];
        let c = GaussianKernelBasis::half_inv_scale_sq(log_s);
        // Hypernet forwards and anchor features recorded once per basis.
        let mut prepared: Vec<Option<(Vec<Var<'_>>, Vec<Var<'_>>)>> = vec![None; self.len()];
        let mut total = tape.leaf(0.0);
        for point in points {
            let x_vars = tape.leaves(&point.x);
            for (i, cot) in &point.per_basis {
                check_index(self, *i)?;
                if prepared[*i].is_none() {
                    let cond_vars = tape.leaves(&self.cond_inputs[*i]);
                    let w = encoder_bundle(&self.hyper_arch, hyper, &cond_vars, 0)?.value;
                    let anchor_vars = tape.leaves(&self.anchors[*i]);
                    let anchor_feat =
                        encoder_bundle(&self.inner_arch, &w, &anchor_vars, 0)?.value;
                    prepared[*i] = Some((w, anchor_feat));
                }
                let (w, anchor_feat) = prepared[*i].as_ref().unwrap();
                let feat = encoder_bundle(&self.inner_arch, w, &x_vars, cot.order)?;
                let bundle = gaussian_compose(anchor_feat, &feat, c, cot.order);
                let contribution = contract_bundle(&tape, &bundle, cot)?;
                total = total + contribution;
            }
        }
        let mut grad = ParamGrad(tape.gradient(total, &params));
        zero_frozen(self, &mut grad);
        Ok(grad)
    }

    fn tape_cost_hint(&self) -> usize {
        4 * self.inner_arch.param_count() + 6 * self.inner_arch.output_dim() + 48
    }

    fn describe(&self) -> String {
        format!(
            "hypernet_kernel(bases={}, features={}, hyper_params={}, scale={:.6})",
            self.len(),
            self.inner_arch.output_dim(),
            self.hyper_arch.param_count(),
            self.log_scale().exp()
        )
    }
}

// ---------------------------------------------------------------------------
// Hybrid kernel (compact support)
// ---------------------------------------------------------------------------

/// The feature-space factor of a hybrid kernel.
pub enum HybridInner {
    Gaussian(GaussianKernelBasis),
    Hypernet(HypernetKernelBasis),
}

impl HybridInner {
    fn as_basis(&self) -> &dyn Basis {
        match self {
            HybridInner::Gaussian(g) => g,
            HybridInner::Hypernet(h) => h,
        }
    }

    fn as_basis_mut(&mut self) -> &mut dyn Basis {
        match self {
            HybridInner::Gaussian(g) => g,
            HybridInner::Hypernet(h) => h,
        }
    }
}

/// Feature kernel times a truncated input-space Gaussian:
/// `psi_i(x) = kappa(phi_i(x_i), phi_i(x)) * exp(-||x_i - x||^2 / (2 sigma^2))`
/// for `||x_i - x|| < 3 sigma`, and exactly zero outside.
///
/// The truncation is the stated formula, discontinuous at the cutoff with a
/// jump of `exp(-4.5) ~ 0.011` times the feature factor. `sigma` is
/// structural (it fixes the sparsity pattern) and is not trained.
pub struct HybridKernelBasis {
    inner: HybridInner,
    sigma: f64,
    fallback: f64,
}

impl HybridKernelBasis {
    pub fn new(inner: HybridInner, sigma: f64, fallback: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::BadConfig("truncation sigma must be positive".into()));
        }
        Ok(Self { inner, sigma, fallback })
    }

    pub fn cutoff(&self) -> f64 {
        3.0 * self.sigma
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn truncation_bundle<S: Scalar>(&self, anchor: &[f64], x: &[S], order: u8) -> BundleOf<S> {
        let feat = input_feature_bundle(x, order);
        let anchor_vars: Vec<S> = anchor.iter().map(|&a| x[0].lit(a)).collect();
        let c = x[0].lit(0.5 / (self.sigma * self.sigma));
        gaussian_compose(&anchor_vars, &feat, c, order)
    }
}

impl Basis for HybridKernelBasis {
    fn input_dim(&self) -> usize {
        self.inner.as_basis().input_dim()
    }

    fn channels(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.inner.as_basis().len()
    }

    fn params(&self) -> &[f64] {
        self.inner.as_basis().params()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.inner.as_basis_mut().set_params(p)
    }

    fn anchor(&self, i: usize) -> Option<&[f64]> {
        self.inner.as_basis().anchor(i)
    }

    fn frozen_slots(&self) -> Vec<usize> {
        self.inner.as_basis().frozen_slots()
    }

    fn eval(&self, i: usize, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_index(self, i)?;
        check_order(order)?;
        let anchor = self.anchor(i).expect("kernel families have anchors");
        if squared_distance(anchor, x) >= self.cutoff() * self.cutoff() {
            return Ok(all_zero_bundle(self.input_dim(), order));
        }
        let inner = self.inner.as_basis().eval(i, x, order)?;
        let anchor = self.anchor(i).unwrap().to_vec();
        let trunc = self.truncation_bundle(&anchor, x, order);
        Ok(product_bundle(&inner, &trunc, order))
    }

    fn eval_tape<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        i: usize,
        x: &[f64],
        order: u8,
    ) -> Result<BundleOf<Var<'t>>> {
        check_index(self, i)?;
        check_order(order)?;
        let anchor = self.anchor(i).expect("kernel families have anchors").to_vec();
        if squared_distance(&anchor, x) >= self.cutoff() * self.cutoff() {
            let zero = tape.leaf(0.0);
            let m = self.input_dim();
            return Ok(BundleOf {
                order,
                outputs: 1,
                inputs: m,
                value: vec![zero],
                jac: if order >= 1 { vec![zero; m] } else { Vec::new() },
                hess: if order >= 2 { vec![zero; m * m] } else { Vec::new() },
            });
        }
        let inner = self.inner.as_basis().eval_tape(tape, params, i, x, order)?;
        let x_vars = tape.leaves(x);
        let trunc = self.truncation_bundle(&anchor, &x_vars, order);
        Ok(product_bundle(&inner, &trunc, order))
    }

    fn support_radius(&self) -> Option<f64> {
        Some(self.cutoff())
    }

    fn fallback_value(&self) -> Option<f64> {
        Some(self.fallback)
    }

    fn tape_cost_hint(&self) -> usize {
        self.inner.as_basis().tape_cost_hint() + 48
    }

    fn describe(&self) -> String {
        format!(
            "hybrid[{}](sigma={}, cutoff={}, fallback={})",
            self.inner.as_basis().describe(),
            self.sigma,
            self.cutoff(),
            self.fallback
        )
    }
}

// ---------------------------------------------------------------------------
// Skewed RBF
// ---------------------------------------------------------------------------

/// Gaussian radial basis with a per-basis learnable diagonal covariance:
/// `psi_i(x) = exp(-1/2 (x - x_i)^T diag(exp(lv_i))^-1 (x - x_i))`.
///
/// Parameters are the log-variances, `params[i * M + k]`. In shared mode
/// (the plain RBF of the same machinery) a single log-variance is used for
/// every basis and dimension.
pub struct SkewedRbfBasis {
    anchors: Vec<Vec<f64>>,
    params: Vec<f64>,
    shared: bool,
}

impl SkewedRbfBasis {
    pub fn init(anchors: Vec<Vec<f64>>, bandwidth: f64, shared: bool) -> Result<Self> {
        if bandwidth <= 0.0 {
            return Err(Error::BadConfig("bandwidth must be positive".into()));
        }
        let dim = anchors.first().map(|a| a.len()).unwrap_or(0);
        let count = if shared { 1 } else { anchors.len() * dim };
        let params = vec![2.0 * bandwidth.ln(); count];
        Ok(Self { anchors, params, shared })
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    fn log_var_slot(&self, i: usize, k: usize) -> usize {
        if self.shared {
            0
        } else {
            i * self.input_dim() + k
        }
    }

    fn eval_generic<S: Scalar>(
        &self,
        params: &[S],
        i: usize,
        x: &[S],
        order: u8,
    ) -> BundleOf<S> {
        let m = x.len();
        let zero = x[0].lit(0.0);
        let anchor = &self.anchors[i];
        // Per-dimension precision exp(-lv_k) and offsets.
        let mut diff = Vec::with_capacity(m);
        let mut precision = Vec::with_capacity(m);
        let mut q = zero;
        for k in 0..m {
            let d = x[k] - anchor[k];
            let p = (-params[self.log_var_slot(i, k)]).exp();
            q = q + d * d * p;
            diff.push(d);
            precision.push(p);
        }
        let psi = (q * (-0.5)).exp();
        let mut out = BundleOf {
            order,
            outputs: 1,
            inputs: m,
            value: vec![psi],
            jac: Vec::new(),
            hess: Vec::new(),
        };
        if order >= 1 {
            // g_k = -d_k * precision_k; jac = psi * g_k.
            let g: Vec<S> = (0..m).map(|k| -(diff[k] * precision[k])).collect();
            out.jac = g.iter().map(|&gk| psi * gk).collect();
            if order >= 2 {
                let mut hess = vec![zero; m * m];
                for k1 in 0..m {
                    for k2 in 0..=k1 {
                        let mut h = psi * g[k1] * g[k2];
                        if k1 == k2 {
                            h = h - psi * precision[k1];
                        }
                        hess[k1 * m + k2] = h;
                        hess[k2 * m + k1] = h;
                    }
                }
                out.hess = hess;
            }
        }
        out
    }
}

impl Basis for SkewedRbfBasis {
    fn input_dim(&self) -> usize {
        self.anchors.first().map(|a| a.len()).unwrap_or(0)
    }

    fn channels(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.anchors.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} params, got {}",
                self.params.len(),
                p.len()
            )));
        }
        check_finite_params(p)?;
        self.params.copy_from_slice(p);
        Ok(())
    }

    fn anchor(&self, i: usize) -> Option<&[f64]> {
        self.anchors.get(i).map(|a| a.as_slice())
    }

    fn eval(&self, i: usize, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_index(self, i)?;
        check_order(order)?;
        Ok(self.eval_generic(&self.params, i, x, order))
    }

    fn eval_tape<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        i: usize,
        x: &[f64],
        order: u8,
    ) -> Result<BundleOf<Var<'t>>> {
        check_index(self, i)?;
        check_order(order)?;
        let x_vars = tape.leaves(x);
        Ok(self.eval_generic(params, i, &x_vars, order))
    }

    fn eval_all(&self, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_order(order)?;
        let m = self.input_dim();
        let count = self.len();
        let mut out = DerivativeBundle::zeros(count, m, order);
        let mut diff = vec![0.0; m];
        let mut precision = vec![0.0; m];
        for i in 0..count {
            let anchor = &self.anchors[i];
            let mut q = 0.0;
            for k in 0..m {
                let d = x[k] - anchor[k];
                let p = (-self.params[self.log_var_slot(i, k)]).exp();
                q += d * d * p;
                diff[k] = d;
                precision[k] = p;
            }
            let psi = (-0.5 * q).exp();
            out.value[i] = psi;
            if order >= 1 {
                for k in 0..m {
                    out.jac[i * m + k] = -psi * diff[k] * precision[k];
                }
            }
            if order >= 2 {
                for k1 in 0..m {
                    for k2 in 0..=k1 {
                        let mut h =
                            psi * diff[k1] * precision[k1] * diff[k2] * precision[k2];
                        if k1 == k2 {
                            h -= psi * precision[k1];
                        }
                        out.hess[(i * m + k1) * m + k2] = h;
                        out.hess[(i * m + k2) * m + k1] = h;
                    }
                }
            }
        }
        Ok(out)
    }

    fn param_grad_batch(&self, points: &[PointCotangents]) -> Result<ParamGrad> {
        // Closed-form gradients for cotangent orders <= 1 (the training hot
        // path); order-2 cotangents go through the recorded tape.
        if points
            .iter()
            .any(|p| p.per_basis.iter().any(|(_, c)| c.order >= 2))
        {
            let tape = Tape::new();
            let params = tape.leaves(&self.params);
            let mut total = tape.leaf(0.0);
            for point in points {
                let x_vars = tape.leaves(&point.x);
                for (i, cot) in &point.per_basis {
                    check_index(self, *i)?;
                    let bundle = self.eval_generic(&params, *i, &x_vars, cot.order);
                    let c = contract_bundle(&tape, &bundle, cot)?;
                    total = total + c;
                }
            }
            return Ok(ParamGrad(tape.gradient(total, &params)));
        }
        let m = self.input_dim();
        let mut grad = ParamGrad::zeros(self.param_count());
        let mut diff = vec![0.0; m];
        let mut precision = vec![0.0; m];
        for point in points {
            for (i, cot) in &point.per_basis {
                check_index(self, *i)?;
                let anchor = &self.anchors[*i];
                let mut q = 0.0;
                for k in 0..m {
                    let d = point.x[k] - anchor[k];
                    let p = (-self.params[self.log_var_slot(*i, k)]).exp();
                    q += d * d * p;
                    diff[k] = d;
                    precision[k] = p;
                }
                let psi = (-0.5 * q).exp();
                // d psi / d lv_m = psi d_m^2 p_m / 2;
                // d (psi g_k) / d lv_m = psi (g_k d_m^2 p_m / 2 + [k=m] d_k p_k),
                // with g_k = -d_k p_k.
                for mm in 0..m {
                    let dpsi = psi * diff[mm] * diff[mm] * precision[mm] * 0.5;
                    let mut acc = cot.value[0] * dpsi;
                    if cot.order >= 1 {
                        for k in 0..m {
                            let w = cot.jac[k];
                            if w != 0.0 {
                                let g_k = -diff[k] * precision[k];
                                let mut dj = dpsi * g_k;
                                if k == mm {
                                    dj += psi * diff[k] * precision[k];
                                }
                                acc += w * dj;
                            }
                        }
                    }
                    grad.0[self.log_var_slot(*i, mm)] += acc;
                }
            }
        }
        Ok(grad)
    }

    fn tape_cost_hint(&self) -> usize {
        20 * self.input_dim().max(1)
    }

    fn describe(&self) -> String {
        format!(
            "{}(bases={}, dims={})",
            if self.shared { "simple_rbf" } else { "skewed_rbf" },
            self.len(),
            self.input_dim()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::basis_param_grad;
    use crate::basis::scalar_eval_all;
    use crate::diff::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> EncoderArch {
        EncoderArch::mlp(&[2, 4, 3], Activation::Tanh).unwrap()
    }

    fn anchors() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0], vec![0.5, -0.3], vec![-0.4, 0.8]]
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gaussian_kernel_peak_exact() {
        let fam =
            GaussianKernelBasis::init(small_arch(), anchors(), 1.5, true, &mut rng(3)).unwrap();
        for i in 0..fam.len() {
            let at = fam.anchor(i).unwrap().to_vec();
            let b = fam.eval(i, &at, 2).unwrap();
            assert_eq!(b.value[0], 1.0);
            assert!(b.jac.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gaussian_kernel_fd_wrt_inputs() {
        let fam =
            GaussianKernelBasis::init(small_arch(), anchors(), 0.8, true, &mut rng(5)).unwrap();
        let x = [0.23, -0.41];
        let b = fam.eval(1, &x, 2).unwrap();
        b.check_invariants().unwrap();
        // Jacobian via central differences of the value.
        for k in 0..2 {
            let h = 1e-5;
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let fd = (fam.eval(1, &xp, 0).unwrap().value[0]
                - fam.eval(1, &xm, 0).unwrap().value[0])
                / (2.0 * h);
            let a = b.jac[k];
            assert!((a - fd).abs() / (a.abs() + fd.abs() + 1e-9) < 1e-4);
            // Hessian row via differences of the jacobian.
            for k1 in 0..2 {
                let fd2 = (fam.eval(1, &xp, 1).unwrap().jac[k1]
                    - fam.eval(1, &xm, 1).unwrap().jac[k1])
                    / (2.0 * h);
                let a2 = b.hess_at(0, k1, k);
                assert!((a2 - fd2).abs() / (a2.abs() + fd2.abs() + 1e-6) < 1e-4);
            }
        }
    }

    /// Central-difference check with a scale floor: slots whose true
    /// gradient is exactly zero (e.g. output biases cancelling inside a
    /// difference kernel) otherwise drown in truncation noise.
    fn fd_param_check(
        build: &dyn Fn(&[f64]) -> Box<dyn Basis>,
        params0: &[f64],
        i: usize,
        x: &[f64],
        cot: &DerivativeBundle,
    ) -> f64 {
        let fam0 = build(params0);
        let analytic = basis_param_grad(fam0.as_ref(), i, x, cot.order, cot).unwrap();
        let eval = |p: &[f64]| {
            let fam = build(p);
            let b = fam.eval(i, x, cot.order).unwrap();
            let mut acc = 0.0;
            for (w, v) in cot.value.iter().zip(&b.value) {
                acc += w * v;
            }
            for (w, v) in cot.jac.iter().zip(&b.jac) {
                acc += w * v;
            }
            for (w, v) in cot.hess.iter().zip(&b.hess) {
                acc += w * v;
            }
            acc
        };
        let scale = analytic
            .as_slice()
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(1e-3);
        let mut p = params0.to_vec();
        let mut worst = 0.0_f64;
        for s in 0..params0.len() {
            let h = 1e-5 * (1.0 + params0[s].abs());
            p[s] = params0[s] + h;
            let plus = eval(&p);
            p[s] = params0[s] - h;
            let minus = eval(&p);
            p[s] = params0[s];
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max((fd - analytic.as_slice()[s]).abs() / scale);
        }
        worst
    }

    #[test]
    fn gaussian_kernel_param_grad_fd() {
        let fam =
            GaussianKernelBasis::init(small_arch(), anchors(), 0.9, true, &mut rng(7)).unwrap();
        let params0 = fam.params().to_vec();
        let mut r = rng(11);
        let mut cot = DerivativeBundle::zeros(1, 2, 1);
        cot.value[0] = r.gen_range(-1.0..1.0);
        cot.jac[0] = r.gen_range(-1.0..1.0);
        cot.jac[1] = r.gen_range(-1.0..1.0);
        let build = |p: &[f64]| -> Box<dyn Basis> {
            Box::new(
                GaussianKernelBasis::new(small_arch(), anchors(), p.to_vec(), true).unwrap(),
            )
        };
        let err = fd_param_check(&build, &params0, 2, &[0.1, 0.3], &cot);
        assert!(err <= 1e-4, "fd error {err}");
    }

    #[test]
    fn frozen_scale_slot_zeroes_gradient() {
        let fam =
            GaussianKernelBasis::init(small_arch(), anchors(), 0.9, false, &mut rng(7)).unwrap();
        let mut cot = DerivativeBundle::zeros(1, 2, 0);
        cot.value[0] = 1.0;
        let g = basis_param_grad(&fam, 0, &[0.3, 0.2], 0, &cot).unwrap();
        assert_eq!(g.as_slice()[fam.params().len() - 1], 0.0);
    }

    #[test]
    fn dot_product_kernel_symmetry() {
        let fam = DotProductKernelBasis::init(small_arch(), anchors(), &mut rng(13)).unwrap();
        for i in 0..fam.len() {
            for j in 0..fam.len() {
                let a = fam.eval(i, fam.anchor(j).unwrap(), 0).unwrap().value[0];
                let b = fam.eval(j, fam.anchor(i).unwrap(), 0).unwrap().value[0];
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dot_product_param_grad_fd() {
        let fam = DotProductKernelBasis::init(small_arch(), anchors(), &mut rng(17)).unwrap();
        let params0 = fam.params().to_vec();
        let mut cot = DerivativeBundle::zeros(1, 2, 1);
        cot.value[0] = 0.7;
        cot.jac[0] = -0.4;
        cot.jac[1] = 1.1;
        let build = |p: &[f64]| -> Box<dyn Basis> {
            Box::new(DotProductKernelBasis::new(small_arch(), anchors(), p.to_vec()).unwrap())
        };
        let err = fd_param_check(&build, &params0, 0, &[-0.2, 0.5], &cot);
        assert!(err <= 1e-4, "fd error {err}");
    }

    #[test]
    fn hypernet_kernel_distinct_anchors_distinct_encoders() {
        let fam = HypernetKernelBasis::init(
            small_arch(),
            8,
            anchors(),
            1.0,
            true,
            &mut rng(19),
        )
        .unwrap();
        let w0 = fam.generated_weights(0);
        let w1 = fam.generated_weights(1);
        assert!(w0.iter().zip(w1).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn hypernet_kernel_repeated_anchor_distinct_weights() {
        // Collocated bases receive distinct ordinals, hence distinct
        // generated encoders; that is what keeps {id, dx} rows at one
        // shared anchor invertible.
        let same = vec![vec![0.1, 0.2], vec![0.1, 0.2]];
        let fam =
            HypernetKernelBasis::init(small_arch(), 8, same, 1.0, true, &mut rng(23)).unwrap();
        assert!(fam
            .generated_weights(0)
            .iter()
            .zip(fam.generated_weights(1))
            .any(|(a, b)| (a - b).abs() > 1e-9));
        let x = [0.4, -0.1];
        let b0 = fam.eval(0, &x, 0).unwrap().value[0];
        let b1 = fam.eval(1, &x, 0).unwrap().value[0];
        assert_ne!(b0, b1);
    }

    #[test]
    fn hypernet_kernel_param_grad_fd() {
        let fam = HypernetKernelBasis::init(
            EncoderArch::mlp(&[2, 3, 2], Activation::Tanh).unwrap(),
            4,
            anchors(),
            0.7,
            true,
            &mut rng(29),
        )
        .unwrap();
        let params0 = fam.params().to_vec();
        let inner = EncoderArch::mlp(&[2, 3, 2], Activation::Tanh).unwrap();
        let hyper = fam.hyper_arch.clone();
        let mut cot = DerivativeBundle::zeros(1, 2, 1);
        cot.value[0] = -0.9;
        cot.jac[0] = 0.6;
        cot.jac[1] = 0.3;
        let build = move |p: &[f64]| -> Box<dyn Basis> {
            Box::new(
                HypernetKernelBasis::new(
                    inner.clone(),
                    hyper.clone(),
                    anchors(),
                    p.to_vec(),
                    true,
                )
                .unwrap(),
            )
        };
        let err = fd_param_check(&build, &params0, 1, &[0.4, 0.1], &cot);
        assert!(err <= 1e-4, "fd error {err}");
    }

    #[test]
    fn hybrid_kernel_zero_outside_support() {
        let inner = GaussianKernelBasis::init(
            small_arch(),
            vec![vec![0.0, 0.0]],
            1.0,
            true,
            &mut rng(31),
        )
        .unwrap();
        let fam = HybridKernelBasis::new(HybridInner::Gaussian(inner), 0.1, 1e5).unwrap();
        // 3.5 sigma away: all orders exactly zero.
        let x = [0.35, 0.0];
        let b = fam.eval(0, &x, 2).unwrap();
        assert!(b.value[0] == 0.0);
        assert!(b.jac.iter().all(|&v| v == 0.0));
        assert!(b.hess.iter().all(|&v| v == 0.0));
        assert!((fam.support_radius().unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(fam.fallback_value(), Some(1e5));
    }

    #[test]
    fn hybrid_kernel_jump_at_cutoff() {
        let inner = GaussianKernelBasis::init(
            small_arch(),
            vec![vec![0.0, 0.0]],
            1.0,
            true,
            &mut rng(37),
        )
        .unwrap();
        let fam = HybridKernelBasis::new(HybridInner::Gaussian(inner), 0.1, 1e5).unwrap();
        // Just inside the cutoff the truncation factor is exp(-4.5).
        let eps = 1e-9;
        let inside = fam.eval(0, &[0.3 - eps, 0.0], 0).unwrap().value[0];
        let inner_only = fam.inner.as_basis().eval(0, &[0.3 - eps, 0.0], 0).unwrap().value[0];
        let ratio = inside / inner_only;
        assert!((ratio - (-4.5f64).exp()).abs() < 1e-6, "ratio {ratio}");
        let outside = fam.eval(0, &[0.3 + eps, 0.0], 0).unwrap().value[0];
        assert_eq!(outside, 0.0);
    }

    #[test]
    fn hybrid_kernel_param_grad_fd_inside_support() {
        let inner_arch = small_arch();
        let fam = HybridKernelBasis::new(
            HybridInner::Gaussian(
                GaussianKernelBasis::init(
                    inner_arch.clone(),
                    anchors(),
                    0.8,
                    true,
                    &mut rng(41),
                )
                .unwrap(),
            ),
            0.5,
            1e5,
        )
        .unwrap();
        let params0 = fam.params().to_vec();
        let mut cot = DerivativeBundle::zeros(1, 2, 1);
        cot.value[0] = 1.3;
        cot.jac[0] = -0.2;
        cot.jac[1] = 0.8;
        let build = move |p: &[f64]| -> Box<dyn Basis> {
            Box::new(
                HybridKernelBasis::new(
                    HybridInner::Gaussian(
                        GaussianKernelBasis::new(
                            small_arch(),
                            anchors(),
                            p.to_vec(),
                            true,
                        )
                        .unwrap(),
                    ),
                    0.5,
                    1e5,
                )
                .unwrap(),
            )
        };
        // Point well inside the support of basis 0 and away from the cutoff.
        let err = fd_param_check(&build, &params0, 0, &[0.05, -0.1], &cot);
        assert!(err <= 1e-4, "fd error {err}");
    }

    #[test]
    fn skewed_rbf_closed_forms() {
        let fam = SkewedRbfBasis::init(vec![vec![0.0, 0.0]], 1.0, false).unwrap();
        // Sigma = diag(1,1), offset (1,0): value e^{-1/2}, d/dx1 = -e^{-1/2}.
        let b = fam.eval(0, &[1.0, 0.0], 2).unwrap();
        let e = (-0.5f64).exp();
        assert!((b.value[0] - e).abs() < 1e-15);
        assert!((b.jac[0] + e).abs() < 1e-15);
        assert!(b.jac[1].abs() < 1e-15);
    }

    #[test]
    fn skewed_rbf_log_scale_gradient_closed_form_and_fd() {
        // d psi / d(log a) = psi * d1^2 / (2 a) for the first log-variance.
        let anchors = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let fam = SkewedRbfBasis::init(anchors.clone(), 0.7, false).unwrap();
        let x = [0.5, -0.3];
        let mut cot = DerivativeBundle::zeros(1, 2, 0);
        cot.value[0] = 1.0;
        let g = basis_param_grad(&fam, 0, &x, 0, &cot).unwrap();
        let a = (2.0 * 0.7f64.ln()).exp();
        let q = (x[0] * x[0] + x[1] * x[1]) / a;
        let psi = (-0.5 * q).exp();
        let expected = psi * x[0] * x[0] / (2.0 * a);
        assert!((g.as_slice()[0] - expected).abs() < 1e-12);

        let params0 = fam.params().to_vec();
        let build = move |p: &[f64]| -> Box<dyn Basis> {
            let mut f = SkewedRbfBasis::init(anchors.clone(), 0.7, false).unwrap();
            f.set_params(p).unwrap();
            Box::new(f)
        };
        let err = fd_param_check(&build, &params0, 0, &x, &cot);
        assert!(err <= 1e-5, "fd error {err}");
    }

    #[test]
    fn shared_rbf_has_single_parameter() {
        let fam = SkewedRbfBasis::init(anchors(), 0.4, true).unwrap();
        assert_eq!(fam.param_count(), 1);
        let mut cot = DerivativeBundle::zeros(1, 2, 1);
        cot.value[0] = 0.5;
        cot.jac[0] = 0.2;
        cot.jac[1] = -0.7;
        let params0 = fam.params().to_vec();
        let a2 = anchors();
        let build = move |p: &[f64]| -> Box<dyn Basis> {
            let mut f = SkewedRbfBasis::init(a2.clone(), 0.4, true).unwrap();
            f.set_params(p).unwrap();
            Box::new(f)
        };
        let err = fd_param_check(&build, &params0, 1, &[0.2, 0.2], &cot);
        assert!(err <= 1e-5, "fd error {err}");
    }

    #[test]
    fn eval_all_matches_per_basis_eval() {
        let fam =
            GaussianKernelBasis::init(small_arch(), anchors(), 0.8, true, &mut rng(43)).unwrap();
        let x = [0.15, -0.25];
        let all = fam.eval_all(&x, 2).unwrap();
        for i in 0..fam.len() {
            let b = fam.eval(i, &x, 2).unwrap();
            assert_eq!(all.value[i], b.value[0]);
            for k in 0..2 {
                assert_eq!(all.jac_at(i, k), b.jac[k]);
            }
            for k1 in 0..2 {
                for k2 in 0..2 {
                    assert_eq!(all.hess_at(i, k1, k2), b.hess_at(0, k1, k2));
                }
            }
        }
    }

    #[test]
    fn eval_and_eval_tape_agree() {
        let fam = HypernetKernelBasis::init(
            EncoderArch::mlp(&[2, 3, 2], Activation::Tanh).unwrap(),
            4,
            anchors(),
            0.7,
            true,
            &mut rng(47),
        )
        .unwrap();
        let x = [0.31, 0.12];
        let plain = fam.eval(1, &x, 2).unwrap();
        let tape = Tape::new();
        let params = tape.leaves(fam.params());
        let taped = fam.eval_tape(&tape, &params, 1, &x, 2).unwrap().to_values();
        for (a, b) in plain.value.iter().zip(&taped.value) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in plain.jac.iter().zip(&taped.jac) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in plain.hess.iter().zip(&taped.hess) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn index_and_order_errors() {
        let fam = SkewedRbfBasis::init(anchors(), 0.4, false).unwrap();
        assert!(matches!(
            fam.eval(9, &[0.0, 0.0], 0),
            Err(Error::IndexOutOfRange { index: 9, count: 3 })
        ));
        assert!(matches!(
            fam.eval(0, &[0.0, 0.0], 3),
            Err(Error::UnsupportedOrder { .. })
        ));
    }

    #[test]
    fn eval_all_for_default_loop_matches(){
        let fam = SkewedRbfBasis::init(anchors(), 0.4, false).unwrap();
        let x = [0.05, 0.22];
        let all = scalar_eval_all(&fam, &x, 1).unwrap();
        for i in 0..fam.len() {
            let b = fam.eval(i, &x, 1).unwrap();
            assert_eq!(all.value[i], b.value[0]);
        }
    }
}
