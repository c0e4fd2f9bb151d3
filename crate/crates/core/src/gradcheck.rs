//! Central finite-difference checks against tape gradients.
//!
//! Error per coordinate is `|analytic - numeric| / max(1, |analytic|)`.

use crate::autograd::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Result, Tensor, TensorError};

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v)
        .item()
        .ok_or_else(|| TensorError::NonScalarLoss(tape.shape(v).to_vec()))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks the gradient of a scalar function of one tensor input.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.constant(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p);
        let y = f(&mut t, x)?;
        scalar_of(&t, y)
    };
    let mut worst = 0.0_f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
    }
}

/// Checks every scalar of every parameter in `store` for a loss built by `f`.
///
/// `store` is perturbed in place and restored afterwards; its accumulated
/// gradients are left untouched.
pub fn grad_check_params<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    for (id, g) in grads.params() {
        for (a, gi) in analytic[id.0].iter_mut().zip(g) {
            *a += gi;
        }
    }
    drop(tape);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let y = f(&mut t, store)?;
        scalar_of(&t, y)
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let mut worst = 0.0_f64;
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[id.0][i], numeric));
        }
        report.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_error: worst,
        });
    }
    Ok(GradCheckReport { params: report })
}
