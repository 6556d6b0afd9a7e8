use crate::error::Result;
use crate::numerics::{ParameterStore, Tape, Var};

/// Compares tape gradients against central finite differences for every
/// scalar in `store` and returns the largest relative error, where the
/// relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `loss` must be deterministic: it is re-evaluated twice per scalar.
/// Gradients in `store` are zeroed before and after the check.
pub fn fd_check<F>(store: &mut ParameterStore, eps: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    fd_check_scaled(store, eps, loss, |_| 1.0)
}

/// As [`fd_check`], but the analytic gradient of entry `name` is compared
/// against `scale(name)` times the finite-difference estimate. Used for
/// losses whose tape gradient is deliberately rescaled on some parameters,
/// such as gradient reversal.
pub fn fd_check_scaled<F, S>(store: &mut ParameterStore, eps: f64, loss: F, scale: S) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
    S: Fn(&str) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    store.zero_grads();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out, store)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(name, p)| (name.to_string(), p.grad.data().to_vec()))
        .collect();
    store.zero_grads();

    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, store)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0_f64;
    for (name, grads) in &analytic {
        let k = scale(name);
        for (i, &a) in grads.iter().enumerate() {
            let orig = store.value(name)?.data()[i];
            store.value_mut(name)?.data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.value_mut(name)?.data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.value_mut(name)?.data_mut()[i] = orig;
            let numeric = k * (plus - minus) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Matrix::new(2, 2, vec![0.3, -1.2, 0.7, 2.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut s = store();
        let err = fd_check(&mut s, 1e-5, |tape, _| Ok(tape.constant(Matrix::scalar(4.0)))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_loss_is_exact() {
        let mut s = store();
        let err = fd_check(&mut s, 1e-5, |tape, st| {
            let w = tape.param(st, "w")?;
            Ok(tape.sum(w))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn check_leaves_values_and_grads_clean() {
        let mut s = store();
        let before = s.clone();
        fd_check(&mut s, 1e-5, |tape, st| {
            let w = tape.param(st, "w")?;
            let sq = tape.square(w);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(s, before);
    }
}
