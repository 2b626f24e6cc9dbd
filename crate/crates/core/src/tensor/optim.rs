use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Momentum SGD with L2 weight decay folded into the velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar>(&self, param: &mut [T], grad: &[T], velocity: &mut [T]) -> Result<()> {
        sgd_update(param, grad, velocity, self.lr, self.momentum, self.weight_decay)
    }
}

/// `v ← momentum·v + grad + wd·param; param ← param − lr·v`.
///
/// Nothing is written when `grad` holds a non-finite value.
pub fn sgd_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::dim("sgd_update: parameter, gradient and velocity lengths differ"));
    }
    let bad = grad.iter().filter(|g| !g.is_finite()).count();
    if bad > 0 {
        let first = grad.iter().position(|g| !g.is_finite()).unwrap_or(0);
        return Err(Error::Numeric(format!(
            "sgd_update: {bad} non-finite gradient entries (first at {first}: {})",
            grad[first]
        )));
    }
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}
