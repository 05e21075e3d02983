//! Central-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::dim("gradient_check output", v.shape(), &[1]));
    }
    Ok(v.data()[0])
}

/// Compares analytic gradients of the scalar computation `f` with central
/// differences of step `h` and returns the maximum relative error
/// `|a - n| / max(1, |a|, |n|)` over every non-frozen parameter entry.
///
/// On return the store holds the analytic gradients. Frozen parameters must
/// end up with an all-zero gradient buffer.
pub fn gradient_check<F>(store: &mut ParamStore, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Config(format!("step h must be in [1e-7, 1e-4], got {h}")));
    }
    let first = eval(store, &f)?;
    let second = eval(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    store.zero_grads();
    let grads = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        tape.backward(out, 1.0)
    };
    grads.apply_to(store);

    for p in store.iter().filter(|p| p.frozen) {
        if p.value.grad().is_some_and(|g| g.iter().any(|&x| x != 0.0)) {
            return Err(Error::Numeric(format!(
                "frozen parameter {} accumulated a gradient",
                p.name
            )));
        }
    }

    let mut worst = 0.0f64;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if store.get(id).frozen {
            continue;
        }
        let analytic = store.get(id).value.grad().map(<[f64]>::to_vec).unwrap_or_default();
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(k).copied().unwrap_or(0.0);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Tensor};

    #[test]
    fn constant_function_has_zero_error_and_zero_grads() {
        let mut store = ParamStore::new();
        store.add(Parameter::new("w", Tensor::full(&[2, 2], 0.5)));
        let err = gradient_check(&mut store, 1e-5, |t| Ok(t.constant(Tensor::scalar(3.0)))).unwrap();
        assert_eq!(err, 0.0);
        assert!(store.iter().all(|p| p.value.grad().unwrap().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn step_out_of_range_is_config_error() {
        let mut store = ParamStore::new();
        let r = gradient_check(&mut store, 1e-2, |t| Ok(t.constant(Tensor::scalar(0.0))));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn nondeterministic_function_detected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        let calls = Cell::new(0.0);
        let r = gradient_check(&mut store, 1e-5, |t| {
            calls.set(calls.get() + 1.0);
            Ok(t.constant(Tensor::scalar(calls.get())))
        });
        assert!(matches!(r, Err(Error::Determinism { .. })));
    }
}
