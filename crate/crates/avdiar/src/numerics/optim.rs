//! Adam optimizer over a [`ParamSet`].

use super::params::ParamSet;
use super::scalar::Scalar;
use super::NumericsError;

/// Adam moment decay and stabilization constants.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over every trainable entry, using the gradients populated
/// by backward passes.
///
/// Frozen entries are skipped entirely: neither their values nor their
/// moments change. A trainable entry without a gradient is a contract error,
/// since the caller is expected to freeze whatever the current loss does not
/// reach.
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    lr: f64,
    hyper: AdamHyper,
) -> Result<(), NumericsError> {
    let b1 = S::of(hyper.beta1);
    let b2 = S::of(hyper.beta2);
    let eps = S::of(hyper.eps);
    let lr = S::of(lr);
    let one = S::one();
    for (name, p) in params.entries.iter_mut() {
        if p.frozen {
            continue;
        }
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| NumericsError::MissingGradient { name: name.clone() })?;
        p.steps += 1;
        let t = p.steps as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for ((value, g), (m, v)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .map(|(value, g)| (value, *g))
            .zip(p.m.iter_mut().zip(p.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *value = *value - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
