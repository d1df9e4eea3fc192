use crate::error::{Error, Result};
use crate::math::{Graph, Real, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst component-wise relative error.
    pub max_rel_error: f64,
    /// Index `(argument, component)` where the worst error occurred.
    pub worst: (usize, usize),
    pub components: usize,
}

/// Components whose gradients are both below this magnitude are compared on
/// an absolute scale.
const REL_FLOOR: f64 = 1e-4;

fn eval<T: Real, F>(f: &F, point: &[Tensor<T>]) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Invalid("gradient check needs a scalar function".into()));
    }
    if !v.data()[0].is_finite() {
        return Err(Error::NonFinite("function value during gradient check".into()));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences with step `epsilon`, component by component.
pub fn check_gradients<T: Real, F>(f: F, point: &[Tensor<T>], epsilon: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = eval(&f, point)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
    drop(g);

    let h = T::lit(epsilon);
    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), components: 0 };
    let mut probe: Vec<Tensor<T>> = point.to_vec();
    for arg in 0..point.len() {
        for i in 0..point[arg].len() {
            let x0 = point[arg].data()[i];
            probe[arg].data_mut()[i] = x0 + h;
            let (gp, _, op) = eval(&f, &probe)?;
            let fp = gp.value(op).data()[0];
            probe[arg].data_mut()[i] = x0 - h;
            let (gm, _, om) = eval(&f, &probe)?;
            let fm = gm.value(om).data()[0];
            probe[arg].data_mut()[i] = x0;

            let numeric = (fp - fm).as_f64() / (2.0 * epsilon);
            let a = analytic[arg].data()[i].as_f64();
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient component ({arg}, {i})")));
            }
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.components += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (arg, i);
            }
        }
    }
    Ok(report)
}
