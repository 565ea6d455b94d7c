//! Hand-fused reverse pass through the encoder's value-and-jacobian
//! computation, for cotangents of order <= 1. This is the hot path of
//! batched parameter gradients; order-2 cotangents take the recorded tape
//! instead.

use super::{Activation, BundleOf, DerivativeBundle, EncoderArch};
use crate::{Error, Result};

struct LayerCache {
    /// Layer input `h^{l-1}`.
    input: Vec<f64>,
    /// Activation first derivative at the preactivation.
    d1: Vec<f64>,
    /// Activation second derivative at the preactivation.
    d2: Vec<f64>,
    /// Input jacobian `J^{l-1}` (in x m), present at order 1.
    input_jac: Vec<f64>,
    /// Pre-activation jacobian `P = W J^{l-1}` (out x m), present at order 1.
    pre_jac: Vec<f64>,
}

/// Intermediate state of one cached forward evaluation.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    order: u8,
}

/// Forward pass storing what the pullback needs. Supports orders 0 and 1.
pub fn encoder_forward_cached(
    arch: &EncoderArch,
    weights: &[f64],
    x: &[f64],
    order: u8,
) -> Result<(DerivativeBundle, ForwardCache)> {
    if order > 1 {
        return Err(Error::UnsupportedOrder {
            requested: order,
            max: 1,
        });
    }
    if x.len() != arch.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "encoder expects {} inputs, got {}",
            arch.input_dim,
            x.len()
        )));
    }
    let m = x.len();
    let mut value = x.to_vec();
    let mut jac = if order >= 1 {
        let mut j = vec![0.0; m * m];
        for k in 0..m {
            j[k * m + k] = 1.0;
        }
        j
    } else {
        Vec::new()
    };
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut offset = 0usize;
    for layer in &arch.layers {
        let (n_in, n_out) = (layer.inputs, layer.outputs);
        let w = &weights[offset..offset + n_in * n_out];
        let b = &weights[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;

        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            z[o] = b[o] + dot(row, &value);
        }
        let mut pre_jac = Vec::new();
        if order >= 1 {
            pre_jac = vec![0.0; n_out * m];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                for k in 0..m {
                    let mut acc = 0.0;
                    for j_in in 0..n_in {
                        acc += row[j_in] * jac[j_in * m + k];
                    }
                    pre_jac[o * m + k] = acc;
                }
            }
        }
        let mut new_value = vec![0.0; n_out];
        let mut d1 = vec![0.0; n_out];
        let mut d2 = vec![0.0; n_out];
        for o in 0..n_out {
            let (v, d, dd) = layer.activation.apply::<f64>(z[o], 2);
            new_value[o] = v;
            d1[o] = d;
            d2[o] = dd;
        }
        let mut new_jac = Vec::new();
        if order >= 1 {
            new_jac = vec![0.0; n_out * m];
            for o in 0..n_out {
                for k in 0..m {
                    new_jac[o * m + k] = d1[o] * pre_jac[o * m + k];
                }
            }
        }
        layers.push(LayerCache {
            input: std::mem::take(&mut value),
            d1,
            d2,
            input_jac: std::mem::replace(&mut jac, new_jac),
            pre_jac,
        });
        value = new_value;
    }
    let bundle = BundleOf {
        order,
        outputs: value.len(),
        inputs: m,
        value,
        jac,
        hess: Vec::new(),
    };
    Ok((bundle, ForwardCache { layers, order }))
}

/// Accumulates `dL/dweights` into `grad` given cotangents on the encoder
/// output value (`bar_value`) and jacobian (`bar_jac`, empty at order 0).
///
/// Reverse of `z = W h + b`, `h' = act(z)`, `J' = act'(z) * (W J)`:
/// the jacobian path contributes both through `W` directly and through the
/// activation derivative's dependence on `z`.
pub fn encoder_pullback(
    arch: &EncoderArch,
    weights: &[f64],
    cache: &ForwardCache,
    bar_value: &[f64],
    bar_jac: &[f64],
    grad: &mut [f64],
) {
    debug_assert_eq!(grad.len(), arch.param_count());
    let m = arch.input_dim;
    let mut bar_h = bar_value.to_vec();
    let mut bar_j = bar_jac.to_vec();
    let mut offset = arch.param_count();
    for (layer, lc) in arch.layers.iter().zip(&cache.layers).rev() {
        let (n_in, n_out) = (layer.inputs, layer.outputs);
        offset -= n_in * n_out + n_out;
        let w = &weights[offset..offset + n_in * n_out];
        let (gw, gb) = {
            let slice = &mut grad[offset..offset + n_in * n_out + n_out];
            let (a, b) = slice.split_at_mut(n_in * n_out);
            (a, b)
        };

        let has_jac = cache.order >= 1 && !bar_j.is_empty();
        // bar_z folds the value path and, through act'(z), the jac path.
        let mut bar_z = vec![0.0; n_out];
        let mut bar_p = Vec::new();
        if has_jac {
            bar_p = vec![0.0; n_out * m];
            for o in 0..n_out {
                let mut dd_acc = 0.0;
                for k in 0..m {
                    let bj = bar_j[o * m + k];
                    bar_p[o * m + k] = lc.d1[o] * bj;
                    dd_acc += bj * lc.pre_jac[o * m + k];
                }
                bar_z[o] = lc.d2[o] * dd_acc;
            }
        }
        for o in 0..n_out {
            bar_z[o] += lc.d1[o] * bar_h[o];
        }

        // Parameter gradients.
        for o in 0..n_out {
            let bz = bar_z[o];
            gb[o] += bz;
            let grow = &mut gw[o * n_in..(o + 1) * n_in];
            if bz != 0.0 {
                for j_in in 0..n_in {
                    grow[j_in] += bz * lc.input[j_in];
                }
            }
            if has_jac {
                let bp = &bar_p[o * m..(o + 1) * m];
                for j_in in 0..n_in {
                    let mut acc = 0.0;
                    for k in 0..m {
                        acc += bp[k] * lc.input_jac[j_in * m + k];
                    }
                    grow[j_in] += acc;
                }
            }
        }

        // Cotangents for the layer input.
        let mut new_bar_h = vec![0.0; n_in];
        for o in 0..n_out {
            let bz = bar_z[o];
            if bz != 0.0 {
                let row = &w[o * n_in..(o + 1) * n_in];
                for j_in in 0..n_in {
                    new_bar_h[j_in] += row[j_in] * bz;
                }
            }
        }
        let mut new_bar_j = Vec::new();
        if has_jac {
            new_bar_j = vec![0.0; n_in * m];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let bp = &bar_p[o * m..(o + 1) * m];
                for j_in in 0..n_in {
                    let wv = row[j_in];
                    if wv != 0.0 {
                        for k in 0..m {
                            new_bar_j[j_in * m + k] += wv * bp[k];
                        }
                    }
                }
            }
        }
        bar_h = new_bar_h;
        bar_j = new_bar_j;
    }
}

/// Reverse of the feature-space Gaussian composition
/// `psi = exp(-c sum_f (a_f - v_f)^2)` with jacobian `-c psi dq` where
/// `dq_k = -2 sum_f (a_f - v_f) J_fk`.
///
/// Given cotangents on `psi` and its jacobian, returns the cotangents on the
/// anchor features, the point features (value and jacobian), and `c`.
pub struct GaussianKernelPullback {
    pub bar_anchor: Vec<f64>,
    pub bar_value: Vec<f64>,
    pub bar_jac: Vec<f64>,
    pub bar_c: f64,
}

pub fn gaussian_kernel_pullback(
    anchor_feat: &[f64],
    feat: &DerivativeBundle,
    c: f64,
    bar_psi: f64,
    bar_psi_jac: &[f64],
) -> GaussianKernelPullback {
    let nf = feat.outputs;
    let m = feat.inputs;
    let has_jac = !bar_psi_jac.is_empty();
    let delta: Vec<f64> = anchor_feat
        .iter()
        .zip(&feat.value)
        .map(|(a, v)| a - v)
        .collect();
    let q: f64 = delta.iter().map(|d| d * d).sum();
    let psi = (-c * q).exp();
    let mut dq = vec![0.0; m];
    if has_jac {
        for k in 0..m {
            let mut acc = 0.0;
            for f in 0..nf {
                acc += delta[f] * feat.jac[f * m + k];
            }
            dq[k] = -2.0 * acc;
        }
    }

    // bar on psi itself collects the direct cotangent plus the jac terms'
    // dependence through psi: jac_k = -c psi dq_k.
    let mut bar_psi_total = bar_psi;
    let mut bar_dq = vec![0.0; m];
    if has_jac {
        for k in 0..m {
            bar_psi_total += bar_psi_jac[k] * (-c * dq[k]);
            bar_dq[k] = bar_psi_jac[k] * (-c * psi);
        }
    }
    // psi = exp(-c q): bar_q and bar_c.
    let bar_q = bar_psi_total * (-c * psi);
    let mut bar_c = bar_psi_total * (-q * psi);
    if has_jac {
        for k in 0..m {
            bar_c += bar_psi_jac[k] * (-psi * dq[k]);
        }
    }

    // q = sum delta^2, dq_k = -2 sum delta_f J_fk.
    let mut bar_delta: Vec<f64> = delta.iter().map(|d| 2.0 * d * bar_q).collect();
    let mut bar_jac = vec![0.0; if has_jac { nf * m } else { 0 }];
    if has_jac {
        for f in 0..nf {
            for k in 0..m {
                bar_delta[f] += bar_dq[k] * (-2.0 * feat.jac[f * m + k]);
                bar_jac[f * m + k] = bar_dq[k] * (-2.0 * delta[f]);
            }
        }
    }
    let bar_anchor = bar_delta.clone();
    let bar_value: Vec<f64> = bar_delta.iter().map(|b| -b).collect();
    GaussianKernelPullback {
        bar_anchor,
        bar_value,
        bar_jac,
        bar_c,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{encoder_bundle, encoder_param_grad, Encoder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cached_forward_matches_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = EncoderArch::mlp(&[2, 5, 3], Activation::Softplus { beta: 10.0 }).unwrap();
        let w: Vec<f64> = (0..arch.param_count())
            .map(|_| rng.gen_range(-0.8..0.8))
            .collect();
        let x = [0.3, -0.4];
        let (bundle, _) = encoder_forward_cached(&arch, &w, &x, 1).unwrap();
        let reference = encoder_bundle::<f64>(&arch, &w, &x, 1).unwrap();
        for (a, b) in bundle
            .value
            .iter()
            .zip(&reference.value)
            .chain(bundle.jac.iter().zip(&reference.jac))
        {
            assert!((a - b).abs() <= 1e-13 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn pullback_matches_tape_param_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for act in [
            Activation::Tanh,
            Activation::Softplus { beta: 10.0 },
            Activation::Sine { omega: 30.0 },
        ] {
            let arch = EncoderArch::mlp(&[2, 4, 3], act).unwrap();
            let w: Vec<f64> = (0..arch.param_count())
                .map(|_| rng.gen_range(-0.8..0.8))
                .collect();
            let x = [0.25, -0.55];
            let mut cot = DerivativeBundle::zeros(3, 2, 1);
            for v in cot.value.iter_mut().chain(cot.jac.iter_mut()) {
                *v = rng.gen_range(-1.0..1.0);
            }
            let enc = Encoder::new(arch.clone(), w.clone()).unwrap();
            let reference = encoder_param_grad(&enc, &x, 1, &cot).unwrap();

            let (_, cache) = encoder_forward_cached(&arch, &w, &x, 1).unwrap();
            let mut grad = vec![0.0; arch.param_count()];
            encoder_pullback(&arch, &w, &cache, &cot.value, &cot.jac, &mut grad);
            for (a, b) in grad.iter().zip(reference.as_slice()) {
                assert!((a - b).abs() <= 1e-12, "fused {a} vs tape {b}");
            }
        }
    }

    #[test]
    fn value_only_pullback_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = EncoderArch::mlp(&[3, 4, 2], Activation::Tanh).unwrap();
        let w: Vec<f64> = (0..arch.param_count())
            .map(|_| rng.gen_range(-0.8..0.8))
            .collect();
        let x = [0.1, 0.6, -0.3];
        let mut cot = DerivativeBundle::zeros(2, 3, 0);
        cot.value = vec![1.3, -0.4];
        let enc = Encoder::new(arch.clone(), w.clone()).unwrap();
        let reference = encoder_param_grad(&enc, &x, 0, &cot).unwrap();
        let (_, cache) = encoder_forward_cached(&arch, &w, &x, 0).unwrap();
        let mut grad = vec![0.0; arch.param_count()];
        encoder_pullback(&arch, &w, &cache, &cot.value, &[], &mut grad);
        for (a, b) in grad.iter().zip(reference.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn kernel_pullback_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let nf = 4;
        let m = 2;
        let anchor: Vec<f64> = (0..nf).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut feat = DerivativeBundle::zeros(nf, m, 1);
        for v in feat.value.iter_mut().chain(feat.jac.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let c = 0.7;
        let bar_psi = 0.9;
        let bar_psi_jac = [0.4, -1.1];

        let forward = |anchor: &[f64], value: &[f64], jac: &[f64], c: f64| -> f64 {
            let delta: Vec<f64> = anchor.iter().zip(value).map(|(a, v)| a - v).collect();
            let q: f64 = delta.iter().map(|d| d * d).sum();
            let psi = (-c * q).exp();
            let mut acc = bar_psi * psi;
            for k in 0..m {
                let mut dq = 0.0;
                for f in 0..nf {
                    dq += delta[f] * jac[f * m + k];
                }
                acc += bar_psi_jac[k] * (-c * psi * (-2.0 * dq));
            }
            acc
        };

        let pb = gaussian_kernel_pullback(&anchor, &feat, c, bar_psi, &bar_psi_jac);
        let h = 1e-6;
        for f in 0..nf {
            let mut ap = anchor.clone();
            ap[f] += h;
            let mut am = anchor.clone();
            am[f] -= h;
            let fd = (forward(&ap, &feat.value, &feat.jac, c)
                - forward(&am, &feat.value, &feat.jac, c))
                / (2.0 * h);
            assert!((fd - pb.bar_anchor[f]).abs() <= 1e-7, "anchor {f}");

            let mut vp = feat.value.clone();
            vp[f] += h;
            let mut vm = feat.value.clone();
            vm[f] -= h;
            let fd = (forward(&anchor, &vp, &feat.jac, c)
                - forward(&anchor, &vm, &feat.jac, c))
                / (2.0 * h);
            assert!((fd - pb.bar_value[f]).abs() <= 1e-7, "value {f}");
        }
        for idx in 0..nf * m {
            let mut jp = feat.jac.clone();
            jp[idx] += h;
            let mut jm = feat.jac.clone();
            jm[idx] -= h;
            let fd = (forward(&anchor, &feat.value, &jp, c)
                - forward(&anchor, &feat.value, &jm, c))
                / (2.0 * h);
            assert!((fd - pb.bar_jac[idx]).abs() <= 1e-7, "jac {idx}");
        }
        let fd = (forward(&anchor, &feat.value, &feat.jac, c + h)
            - forward(&anchor, &feat.value, &feat.jac, c - h))
            / (2.0 * h);
        assert!((fd - pb.bar_c).abs() <= 1e-7, "c");
    }
}
