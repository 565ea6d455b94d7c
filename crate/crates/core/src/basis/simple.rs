//! Non-kernel families: per-basis quadratic polynomials, one independent
//! encoder per basis, the constraint layer (encoder features are the bases),
//! and the one-hot hypernetwork basis.

use super::{check_index, check_order, Basis};
use crate::diff::{
    encoder_bundle, BundleOf, DerivativeBundle, Encoder, EncoderArch, Scalar, Tape, Var,
};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Generates encoder weights for one anchor from a hypernetwork. The output
/// layout matches the flat [`Encoder`] parameter order.
pub fn hypernet_generate(hyper: &Encoder, anchor: &[f64], arch: &EncoderArch) -> Result<Encoder> {
    if hyper.arch.output_dim() != arch.param_count() {
        return Err(Error::ArchMismatch(format!(
            "hypernet outputs {} values but the encoder needs {}",
            hyper.arch.output_dim(),
            arch.param_count()
        )));
    }
    let weights = crate::diff::encoder_eval(hyper, anchor, 0)?.value;
    Encoder::new(arch.clone(), weights)
}

// ---------------------------------------------------------------------------
// Polynomial basis (vector-valued)
// ---------------------------------------------------------------------------

/// Degree-<=2 polynomials `R -> R^N`, one independent polynomial per basis
/// and channel. Parameters: `params[(i * N + n) * 3 + d]` is the coefficient
/// of `x^d` for basis `i`, channel `n`.
pub struct PolynomialBasis {
    bases: usize,
    channels: usize,
    params: Vec<f64>,
}

impl PolynomialBasis {
    pub fn init(bases: usize, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if bases == 0 || channels == 0 {
            return Err(Error::BadConfig(
                "polynomial basis needs at least one basis and channel".into(),
            ));
        }
        let params = (0..bases * channels * 3)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Ok(Self { bases, channels, params })
    }

    pub fn from_coeffs(bases: usize, channels: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != bases * channels * 3 {
            return Err(Error::ShapeMismatch(format!(
                "polynomial basis needs {} coefficients, got {}",
                bases * channels * 3,
                params.len()
            )));
        }
        Ok(Self { bases, channels, params })
    }

    fn eval_generic<S: Scalar>(&self, params: &[S], i: usize, x: S, order: u8) -> BundleOf<S> {
        let n = self.channels;
        let mut value = Vec::with_capacity(n);
        let mut jac = Vec::new();
        let mut hess = Vec::new();
        for ch in 0..n {
            let base = (i * n + ch) * 3;
            let (c0, c1, c2) = (params[base], params[base + 1], params[base + 2]);
            value.push(c0 + c1 * x + c2 * x * x);
            if order >= 1 {
                jac.push(c1 + c2 * x * 2.0);
            }
            if order >= 2 {
                hess.push(c2 * 2.0);
            }
        }
        BundleOf {
            order,
            outputs: n,
            inputs: 1,
            value,
            jac,
            hess,
        }
    }
}

impl Basis for PolynomialBasis {
    fn input_dim(&self) -> usize {
        1
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn len(&self) -> usize {
        self.bases
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
        self.params.copy_from_slice(p);
        Ok(())
    }

    fn anchor(&self, _i: usize) -> Option<&[f64]> {
        None
    }

    fn eval(&self, i: usize, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_index(self, i)?;
        check_order(order)?;
        if x.len() != 1 {
            return Err(Error::DimensionMismatch(
                "polynomial basis is univariate".into(),
            ));
        }
        Ok(self.eval_generic(&self.params, i, x[0], order))
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
        if x.len() != 1 {
            return Err(Error::DimensionMismatch(
                "polynomial basis is univariate".into(),
            ));
        }
        Ok(self.eval_generic(params, i, tape.leaf(x[0]), order))
    }

    fn tape_cost_hint(&self) -> usize {
        10 * self.channels
    }

    fn describe(&self) -> String {
        format!(
            "polynomial(bases={}, channels={}, degree<=2)",
            self.bases, self.channels
        )
    }
}

// ---------------------------------------------------------------------------
// Independent basis
// ---------------------------------------------------------------------------

/// One independent encoder per basis; the most expressive family, with
/// parameter count growing linearly in the number of bases.
pub struct IndependentBasis {
    arch: EncoderArch,
    bases: usize,
    /// Concatenated per-basis encoder weights.
    params: Vec<f64>,
}

impl IndependentBasis {
    pub fn init(arch: EncoderArch, bases: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if bases == 0 {
            return Err(Error::BadConfig("independent basis needs bases".into()));
        }
        let mut params = Vec::with_capacity(bases * arch.param_count());
        for _ in 0..bases {
            params.extend(super::xavier_init(&arch, rng));
        }
        Ok(Self { arch, bases, params })
    }

    fn slice(&self, i: usize) -> std::ops::Range<usize> {
        let n = self.arch.param_count();
        i * n..(i + 1) * n
    }
}

impl Basis for IndependentBasis {
    fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn channels(&self) -> usize {
        self.arch.output_dim()
    }

    fn len(&self) -> usize {
        self.bases
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
        self.params.copy_from_slice(p);
        Ok(())
    }

    fn anchor(&self, _i: usize) -> Option<&[f64]> {
        None
    }

    fn eval(&self, i: usize, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_index(self, i)?;
        check_order(order)?;
        encoder_bundle::<f64>(&self.arch, &self.params[self.slice(i)], x, order)
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
        encoder_bundle(&self.arch, &params[self.slice(i)], &x_vars, order)
    }

    fn tape_cost_hint(&self) -> usize {
        4 * self.arch.param_count()
    }

    fn describe(&self) -> String {
        format!(
            "independent(bases={}, per_basis_params={})",
            self.bases,
            self.arch.param_count()
        )
    }
}

// ---------------------------------------------------------------------------
// Constraint layer
// ---------------------------------------------------------------------------

/// A single encoder whose output features are the bases: `psi_i` is the
/// `i`-th feature of the last layer.
pub struct ConstraintLayerBasis {
    arch: EncoderArch,
    params: Vec<f64>,
}

impl ConstraintLayerBasis {
    pub fn init(arch: EncoderArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = super::xavier_init(&arch, rng);
        Ok(Self { arch, params })
    }

    fn select<S: Scalar>(bundle: &BundleOf<S>, i: usize, order: u8) -> BundleOf<S> {
        let m = bundle.inputs;
        BundleOf {
            order,
            outputs: 1,
            inputs: m,
            value: vec![bundle.value[i]],
            jac: if order >= 1 {
                bundle.jac[i * m..(i + 1) * m].to_vec()
            } else {
                Vec::new()
            },
            hess: if order >= 2 {
                bundle.hess[i * m * m..(i + 1) * m * m].to_vec()
            } else {
                Vec::new()
            },
        }
    }
}

impl Basis for ConstraintLayerBasis {
    fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn channels(&self) -> usize {
        1
    }

    fn len(&self) -> usize {
        self.arch.output_dim()
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
        self.params.copy_from_slice(p);
        Ok(())
    }

    fn anchor(&self, _i: usize) -> Option<&[f64]> {
        None
    }

    fn eval(&self, i: usize, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_index(self, i)?;
        check_order(order)?;
        let full = encoder_bundle::<f64>(&self.arch, &self.params, x, order)?;
        Ok(Self::select(&full, i, order))
    }

    /// One encoder evaluation serves every basis.
    fn eval_all(&self, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_order(order)?;
        encoder_bundle::<f64>(&self.arch, &self.params, x, order)
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
        let full = encoder_bundle(&self.arch, params, &x_vars, order)?;
        Ok(Self::select(&full, i, order))
    }

    fn param_grad_batch(
        &self,
        points: &[super::PointCotangents],
    ) -> Result<crate::diff::ParamGrad> {
        let tape = Tape::new();
        let params = tape.leaves(&self.params);
        let mut total = tape.leaf(0.0);
        for point in points {
            let order = point
                .per_basis
                .iter()
                .map(|(_, cot)| cot.order)
                .max()
                .unwrap_or(0);
            let x_vars = tape.leaves(&point.x);
            let full = encoder_bundle(&self.arch, &params, &x_vars, order)?;
            for (i, cot) in &point.per_basis {
                check_index(self, *i)?;
                let bundle = Self::select(&full, *i, cot.order);
                let c = crate::diff::contract_bundle(&tape, &bundle, cot)?;
                total = total + c;
            }
        }
        Ok(crate::diff::ParamGrad(tape.gradient(total, &params)))
    }

    fn tape_cost_hint(&self) -> usize {
        // One shared encoder forward per point amortizes over the bases.
        (4 * self.arch.param_count() / self.len().max(1)).max(8)
    }

    fn describe(&self) -> String {
        format!("constraint_layer(bases={})", self.len())
    }
}

// ---------------------------------------------------------------------------
// Hypernet basis (one-hot)
// ---------------------------------------------------------------------------

/// Encoder weights generated from a one-hot encoding of the basis index.
pub struct HypernetBasis {
    inner_arch: EncoderArch,
    hyper_arch: EncoderArch,
    count: usize,
    params: Vec<f64>,
    gen_weights: Vec<Vec<f64>>,
}

impl HypernetBasis {
    pub fn init(
        inner_arch: EncoderArch,
        hyper_hidden: usize,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::BadConfig("hypernet basis needs bases".into()));
        }
        let hyper_arch = EncoderArch::mlp(
            &[count, hyper_hidden, inner_arch.param_count()],
            crate::diff::Activation::Tanh,
        )?;
        let mut params = super::xavier_init(&hyper_arch, rng);
        let base = super::xavier_init(&inner_arch, rng);
        let bias_start = params.len() - inner_arch.param_count();
        params[bias_start..].copy_from_slice(&base);
        let mut family = Self {
            inner_arch,
            hyper_arch,
            count,
            params,
            gen_weights: Vec::new(),
        };
        family.refresh_cache()?;
        Ok(family)
    }

    fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.count];
        v[i] = 1.0;
        v
    }

    fn refresh_cache(&mut self) -> Result<()> {
        self.gen_weights = (0..self.count)
            .map(|i| {
                let one_hot = self.one_hot(i);
                Ok(encoder_bundle::<f64>(&self.hyper_arch, &self.params, &one_hot, 0)?.value)
            })
            .collect::<Result<_>>()?;
        Ok(())
    }
}

impl Basis for HypernetBasis {
    fn input_dim(&self) -> usize {
        self.inner_arch.input_dim
    }

    fn channels(&self) -> usize {
        self.inner_arch.output_dim()
    }

    fn len(&self) -> usize {
        self.count
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
        self.params.copy_from_slice(p);
        self.refresh_cache()
    }

    fn anchor(&self, _i: usize) -> Option<&[f64]> {
        None
    }

    fn eval(&self, i: usize, x: &[f64], order: u8) -> Result<DerivativeBundle> {
        check_index(self, i)?;
        check_order(order)?;
        encoder_bundle::<f64>(&self.inner_arch, &self.gen_weights[i], x, order)
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
        let one_hot = tape.leaves(&self.one_hot(i));
        let w = encoder_bundle(&self.hyper_arch, params, &one_hot, 0)?.value;
        let x_vars = tape.leaves(x);
        encoder_bundle(&self.inner_arch, &w, &x_vars, order)
    }

    fn param_grad_batch(
        &self,
        points: &[super::PointCotangents],
    ) -> Result<crate::diff::ParamGrad> {
        let tape = Tape::new();
        let params = tape.leaves(&self.params);
        // Generated weights recorded once per basis.
        let mut gen: Vec<Option<Vec<Var<'_>>>> = vec![None; self.count];
        let mut total = tape.leaf(0.0);
        for point in points {
            let x_vars = tape.leaves(&point.x);
            for (i, cot) in &point.per_basis {
                check_index(self, *i)?;
                if gen[*i].is_none() {
                    let one_hot = tape.leaves(&self.one_hot(*i));
                    gen[*i] =
                        Some(encoder_bundle(&self.hyper_arch, &params, &one_hot, 0)?.value);
                }
                let bundle = encoder_bundle(
                    &self.inner_arch,
                    gen[*i].as_ref().unwrap(),
                    &x_vars,
                    cot.order,
                )?;
                let c = crate::diff::contract_bundle(&tape, &bundle, cot)?;
                total = total + c;
            }
        }
        Ok(crate::diff::ParamGrad(tape.gradient(total, &params)))
    }

    fn tape_cost_hint(&self) -> usize {
        4 * self.inner_arch.param_count()
    }

    fn describe(&self) -> String {
        format!(
            "hypernet(bases={}, inner_params={}, hyper_params={})",
            self.count,
            self.inner_arch.param_count(),
            self.hyper_arch.param_count()
        )
    }
}
