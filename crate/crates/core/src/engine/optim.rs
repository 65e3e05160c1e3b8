use alloc::format;
use alloc::vec::Vec;

use super::network::{GradientRecord, ParamStore};
use crate::error::Pass;
use crate::{Error, Result};

/// One SGD-with-momentum step: `v ← momentum·v − lr·g`, `p ← p + v`.
///
/// The store is left untouched if any updated value would be non-finite.
pub fn sgd_step(params: &mut ParamStore, grads: &GradientRecord, lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    if grads.grads.len() != params.params.len() {
        return Err(Error::invalid("gradient record does not match parameter store"));
    }
    let mut staged = Vec::with_capacity(params.params.len());
    for ((p, v), g) in params.params.iter().zip(&params.velocity).zip(&grads.grads) {
        if p.layer != g.layer || p.weights.shape() != g.weights.shape() || p.bias.shape() != g.bias.shape() {
            return Err(Error::Shape {
                op: "sgd",
                expected: p.weights.shape().to_vec(),
                found: g.weights.shape().to_vec(),
            });
        }
        let (w, vw) = update(p.weights.data(), &v.0, g.weights.data(), lr, momentum);
        let (b, vb) = update(p.bias.data(), &v.1, g.bias.data(), lr, momentum);
        if !(w.iter().chain(&vw).chain(&b).chain(&vb).all(|x| x.is_finite())) {
            return Err(Error::NonFinite {
                layer: p.layer,
                kind: "sgd",
                pass: Pass::Update,
            });
        }
        staged.push((w, b, vw, vb));
    }
    for ((p, v), (w, b, vw, vb)) in params.params.iter_mut().zip(params.velocity.iter_mut()).zip(staged) {
        p.weights.data_mut().copy_from_slice(&w);
        p.bias.data_mut().copy_from_slice(&b);
        *v = (vw, vb);
    }
    Ok(())
}

fn update(p: &[f64], v: &[f64], g: &[f64], lr: f64, momentum: f64) -> (Vec<f64>, Vec<f64>) {
    let vel: Vec<f64> = v.iter().zip(g).map(|(&v, &g)| momentum * v - lr * g).collect();
    let out = p.iter().zip(&vel).map(|(&p, &v)| p + v).collect();
    (out, vel)
}
