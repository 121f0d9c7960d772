use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Record, Var};

/// Largest relative disagreement between reverse-mode gradients of `f` and
/// central differences, over every scalar entry of every parameter:
/// `|analytic - fd| / (|fd| + 1e-12)`.
///
/// `f` builds the scalar loss on the record it is handed and must be
/// deterministic in the parameter values.
pub fn grad_check<T, F>(store: &ParamStore<T>, f: F, eps: T) -> Result<T>
where
    T: Scalar,
    F: for<'a> Fn(&mut Record<'a, T>) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("grad_check: eps must be positive".into()));
    }
    let analytic = {
        let mut rec = Record::with_params(store);
        let loss = f(&mut rec)?;
        ensure_finite(rec.value(loss).item(), "loss")?;
        rec.backward(loss)?
    };

    let eval = |s: &ParamStore<T>| -> Result<T> {
        let mut rec = Record::with_params(s);
        let loss = f(&mut rec)?;
        let v = rec.value(loss).item();
        ensure_finite(v, "perturbed loss")?;
        Ok(v)
    };

    let two = T::one() + T::one();
    let floor = T::lit(1e-12);
    let mut work = store.clone();
    let mut worst = T::zero();
    for id in store.ids() {
        let grad = analytic.param(id);
        for k in 0..store.get(id).numel() {
            let x0 = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = x0 + eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[k] = x0 - eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[k] = x0;
            let fd = (fp - fm) / (two * eps);
            let a = grad.data()[k];
            ensure_finite(a, "analytic gradient")?;
            let rel = (a - fd).abs() / (fd.abs() + floor);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Central-difference gradient of a plain function.
pub fn central_difference<T: Scalar>(f: impl Fn(&[T]) -> T, x: &[T], eps: T) -> Vec<T> {
    let two = T::one() + T::one();
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + eps;
            let fp = f(&work);
            work[i] = x[i] - eps;
            let fm = f(&work);
            work[i] = x[i];
            (fp - fm) / (two * eps)
        })
        .collect()
}

fn ensure_finite<T: Scalar>(v: T, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("grad_check: {what} = {v}")))
    }
}
