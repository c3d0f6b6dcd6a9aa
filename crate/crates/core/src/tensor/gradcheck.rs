use super::{Real, Tape, Tensor, TensorResult, Var};

/// Multiple of machine epsilon allowed on each loss evaluation.
pub const FD_ROUNDOFF_ULPS: f64 = 8.0;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares tape gradients of a scalar function against central differences
/// and returns the largest relative error over all input elements.
///
/// A difference within the round-off bound of the central difference itself
/// counts as agreement, so gradients that are exactly zero by symmetry do not
/// read as relative error 1 against numerical noise.
pub fn gradcheck<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> TensorResult<f64>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> TensorResult<Var<'t, T>>,
{
    let analytic: Vec<Tensor<T>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get(v)).collect()
    };

    let eval = |inputs: &[Tensor<T>]| -> TensorResult<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item().as_f64())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = T::of(orig.as_f64() + eps);
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = T::of(orig.as_f64() - eps);
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j].as_f64();
            let noise = FD_ROUNDOFF_ULPS * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * eps);
            if (a - numeric).abs() > noise {
                worst = worst.max(relative_error(a, numeric));
            }
        }
    }
    Ok(worst)
}
