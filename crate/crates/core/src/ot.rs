//! Inexact proximal point solver for discrete optimal transport.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtConfig {
    /// Proximal strength; the generalized stepsize is `1 / beta`.
    pub beta: f64,
    /// Scaling updates per proximal step.
    pub inner_k: usize,
    /// Proximal steps.
    pub outer_n: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            inner_k: 1,
            outer_n: 10,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || self.inner_k == 0 || self.outer_n == 0 {
            return Err(Error::Config("OT needs beta > 0, inner_k >= 1, outer_n >= 1".into()));
        }
        Ok(())
    }
}

/// Coupling between two discrete distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T> {
    pub plan: Tensor<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> TransportPlan<T> {
    /// `<T, C>`.
    pub fn cost(&self, cost: &Tensor<T>) -> T {
        self.plan
            .data()
            .iter()
            .zip(cost.data())
            .map(|(&t, &c)| t * c)
            .sum()
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.plan.rows())
            .map(|i| self.plan.row(i).iter().copied().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        let (p, q) = (self.plan.rows(), self.plan.cols());
        (0..q)
            .map(|j| (0..p).map(|i| self.plan.at(i, j)).sum())
            .collect()
    }

    /// `(|T 1 - a|_inf, |T^T 1 - b|_inf)`.
    pub fn marginal_violation(&self) -> (T, T) {
        let max_dev = |s: Vec<T>, target: &[T]| {
            s.iter()
                .zip(target)
                .map(|(&x, &y)| (x - y).abs())
                .fold(T::zero(), T::max)
        };
        (
            max_dev(self.row_sums(), &self.a),
            max_dev(self.col_sums(), &self.b),
        )
    }
}

pub fn uniform<T: Scalar>(n: usize) -> Vec<T> {
    vec![T::one() / T::lit(n as f64); n]
}

fn check_marginal<T: Scalar>(m: &[T], len: usize, name: &str) -> Result<()> {
    if m.len() != len {
        return Err(Error::Marginal(format!("{name} has {} entries, expected {len}", m.len())));
    }
    if m.iter().any(|&x| !(x > T::zero()) || !x.is_finite()) {
        return Err(Error::Marginal(format!("{name} must be strictly positive")));
    }
    let total: T = m.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-6) {
        return Err(Error::Marginal(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Approximates the optimal plan for `cost` between marginals `a` (rows)
/// and `b` (columns).
///
/// With `A = exp(-C / beta)`, `T = 1 1^T` and `sigma = 1/q`, each of the
/// `outer_n` steps forms `Q = A ⊙ T`, runs `inner_k` scaling updates
/// `delta = a / (Q sigma)`, `sigma = b / (Q^T delta)` and sets
/// `T = diag(delta) Q diag(sigma)`. `sigma` carries over between steps.
pub fn ipot<T: Scalar>(cost: &Tensor<T>, a: &[T], b: &[T], cfg: &OtConfig) -> Result<TransportPlan<T>> {
    cfg.validate()?;
    let (p, q) = match cost.shape() {
        [p, q] => (*p, *q),
        s => return Err(Error::shape(format!("cost must be a matrix, got {s:?}"))),
    };
    if cost.data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN in cost matrix".into()));
    }
    check_marginal(a, p, "a")?;
    check_marginal(b, q, "b")?;
    let beta = T::lit(cfg.beta);
    let kernel: Vec<T> = cost.data().iter().map(|&c| (-c / beta).exp()).collect();
    let mut plan = vec![T::one(); p * q];
    let mut sigma = vec![T::one() / T::lit(q as f64); q];
    let mut delta = vec![T::zero(); p];
    let mut prox = vec![T::zero(); p * q];
    for _ in 0..cfg.outer_n {
        for ((g, &k), &t) in prox.iter_mut().zip(&kernel).zip(&plan) {
            *g = k * t;
        }
        for _ in 0..cfg.inner_k {
            for i in 0..p {
                let s: T = (0..q).map(|j| prox[i * q + j] * sigma[j]).sum();
                delta[i] = a[i] / s;
            }
            for j in 0..q {
                let s: T = (0..p).map(|i| prox[i * q + j] * delta[i]).sum();
                sigma[j] = b[j] / s;
            }
        }
        for i in 0..p {
            for j in 0..q {
                plan[i * q + j] = delta[i] * prox[i * q + j] * sigma[j];
            }
        }
    }
    if plan.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("transport plan became non-finite".into()));
    }
    Ok(TransportPlan {
        plan: Tensor::new(vec![p, q], plan)?,
        a: a.to_vec(),
        b: b.to_vec(),
    })
}
