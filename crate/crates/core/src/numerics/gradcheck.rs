use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tape, Var};

/// Largest relative disagreement between tape gradients and central
/// differences over every scalar in `params`:
/// `|analytic − fd| / max(1, |analytic|, |fd|)`.
///
/// `f` builds the scalar loss on a fresh tape, binding parameters with
/// [`Tape::param`].
pub fn check_gradients<F>(params: &mut ParamSet, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, params)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("objective during gradient check".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(Error::Numeric("objective during gradient check".into()));
    }
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    for (id, g) in grads.param_grads(&tape) {
        analytic[id.index()].copy_from_slice(g);
    }

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for (i, &a) in analytic[id.index()].iter().enumerate() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(params);
            params.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(params);
            params.get_mut(id).data_mut()[i] = orig;
            let fd = (plus? - minus?) / (2.0 * h);
            let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_is_exact() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::scalar(3.0));
        let err = check_gradients(&mut ps, 1e-5, |t, p| {
            let v = t.param(p, x);
            t.mul(v, v)
        })
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn sine_is_close() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::scalar(1.0));
        let err = check_gradients(&mut ps, 1e-5, |t, p| {
            let v = t.param(p, x);
            Ok(t.sin(v))
        })
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::scalar(1.0));
        let r = check_gradients(&mut ps, 1e-5, |t, p| {
            let v = t.param(p, x);
            Ok(t.scale(v, f64::INFINITY))
        });
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at a kink evaluated by central differences disagrees
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::scalar(0.0));
        let err = check_gradients(&mut ps, 1e-5, |t, p| {
            let v = t.param(p, x);
            Ok(t.relu(v))
        })
        .unwrap();
        assert!(err > 0.4);
    }
}
