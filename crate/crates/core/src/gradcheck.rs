//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator. Gradient entries whose
    /// magnitude is below it are effectively compared in absolute terms,
    /// which keeps floating-point noise in (near-)zero gradients from
    /// counting as a failure.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn elements(&self) -> usize {
        self.params.iter().map(|p| p.elements).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of `f` produced by [`Graph::backward_to`] against
/// `(f(θ+eps) - f(θ-eps)) / 2eps` for every element of every parameter.
///
/// `f` must build its scalar loss deterministically from the store it is
/// given. Gradients in `store` are cleared on entry and hold the analytic
/// gradient on return.
pub fn grad_check<T, F>(
    store: &mut ParamStore<T>,
    opts: GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward_to(loss, store)?;

    let mut eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok(g.value(loss).item().as_f64())
    };

    let eps = T::lit(opts.eps);
    let mut params = Vec::with_capacity(store.len());
    for idx in 0..store.len() {
        let (name, p) = store.by_index(idx);
        let name = name.to_string();
        let analytic: Vec<f64> = p
            .grad
            .as_ref()
            .expect("backward_to fills every gradient")
            .iter()
            .map(|g| g.as_f64())
            .collect();
        let mut check = ParamCheck {
            name,
            elements: analytic.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for (e, &a) in analytic.iter().enumerate() {
            let orig = store.by_index(idx).1.value.data()[e];
            store.by_index_mut(idx).1.value.data_mut()[e] = orig + eps;
            let plus = eval(store)?;
            store.by_index_mut(idx).1.value.data_mut()[e] = orig - eps;
            let minus = eval(store)?;
            store.by_index_mut(idx).1.value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric, opts.floor));
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        tol: opts.tol,
    })
}
