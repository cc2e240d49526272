use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{dim_err, LaxError, Result};

/// Denominator floor for relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Largest relative error within each parameter tensor.
    pub per_param: Vec<f64>,
    /// `(param, coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_scalar<F>(f: &F, params: &[Tensor], leaves: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if leaves {
                tape.leaf(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return dim_err(format!("grad_check needs a scalar function, got {:?}", value.shape()));
    }
    if !value.item().is_finite() {
        return Err(LaxError::Numeric(format!("function evaluated to {}", value.item())));
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of the scalar function `f` with central
/// differences. The perturbation for coordinate `x` is `step * (1 + |x|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(LaxError::Numeric(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let (tape, vars, out) = eval_scalar(&f, params, true)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();
    drop(tape);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    for p in 0..params.len() {
        let mut local: f64 = 0.0;
        for i in 0..params[p].len() {
            let x0 = params[p].data()[i];
            let h = step * (1.0 + x0.abs());
            work[p].data_mut()[i] = x0 + h;
            let (t, _, o) = eval_scalar(&f, &work, false)?;
            let plus = t.value(o).item();
            work[p].data_mut()[i] = x0 - h;
            let (t, _, o) = eval_scalar(&f, &work, false)?;
            let minus = t.value(o).item();
            work[p].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[p].data()[i], numeric);
            local = local.max(err);
            if err > max_rel_err || worst.is_none() {
                max_rel_err = max_rel_err.max(err);
                worst = Some((p, i));
            }
        }
        per_param.push(local);
    }
    Ok(GradCheckReport {
        max_rel_err,
        per_param,
        worst,
        pass: max_rel_err < tolerance,
    })
}
