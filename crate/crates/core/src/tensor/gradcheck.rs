use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative error between tape gradients and central differences.
///
/// `f` builds a scalar from the registered input. The error per coordinate is
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// [`finite_diff_check`] over several inputs at once; every coordinate of
/// every input is perturbed.
pub fn finite_diff_check_many<T, F>(f: F, xs: &[Tensor<T>], h: f64) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let eval = |inputs: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item()?.as_f64())
    };

    let tape = Tape::new();
    let vars: Vec<_> = xs.iter().map(|t| tape.variable(t)).collect();
    let out = f(&tape, &vars)?;
    if out.shape().iter().product::<usize>() != 1 {
        return Err(Error::Contract("finite_diff_check needs a scalar function".into()));
    }
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut inputs = xs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*var) {
            Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; xs[i].numel()],
        };
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            inputs[i].data_mut()[j] = T::of(orig.as_f64() + h);
            let plus = eval(&inputs)?;
            inputs[i].data_mut()[j] = T::of(orig.as_f64() - h);
            let minus = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
