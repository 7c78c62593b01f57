use super::{EngineError, Graph, Real, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `step`, over every coordinate of every input.
///
/// Returns `max_k |analytic_k - numeric_k| / (|analytic_k| + |numeric_k| + 1e-12)`.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], step: Real) -> Result<Real, EngineError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, EngineError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<Real>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.len()], <[Real]>::to_vec))
        .collect();

    let eval = |probe: &[Tensor], input: usize, coord: usize| -> Result<Real, EngineError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EngineError::NonFinite { input, coord })
        }
    };

    let mut worst: Real = 0.0;
    let mut probe = inputs.to_vec();
    for (input, t) in inputs.iter().enumerate() {
        for coord in 0..t.len() {
            let orig = t.data()[coord];
            probe[input].data_mut()[coord] = orig + step;
            let plus = eval(&probe, input, coord)?;
            probe[input].data_mut()[coord] = orig - step;
            let minus = eval(&probe, input, coord)?;
            probe[input].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[input][coord];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: Real) -> Result<Real, EngineError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, EngineError>,
{
    finite_diff_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), step)
}
