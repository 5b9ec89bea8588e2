use super::{Result, Tape, Tensor, Var};

/// Componentwise relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares tape gradients of a scalar function against central
/// differences `(f(x+h) − f(x−h)) / 2h`. Returns the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input variant of [`grad_check`]; every input is perturbed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| {
            let mut x = x.clone();
            x.clear_grad();
            tape.leaf(x.with_grad())
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).data()[0])
    };

    let mut worst = 0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    #[allow(clippy::needless_range_loop)]
    for k in 0..inputs.len() {
        for c in 0..inputs[k].numel() {
            let base = inputs[k].data()[c];
            probe[k].data_mut()[c] = base + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[c] = base - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[c] = base;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k][c], numeric));
        }
    }
    Ok(worst)
}
