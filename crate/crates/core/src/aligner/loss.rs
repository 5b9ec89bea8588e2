use super::{AlignError, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// `M = I − (1 − I)/(n − 1)`, so `sum(D ⊙ M)` is the matched-minus-mean-
/// mismatched distance summed over rows.
fn contrast_weights<T: Real>(n: usize) -> Tensor<T> {
    let off = -1.0 / (n as f64 - 1.0);
    let data = (0..n * n)
        .map(|k| T::from_f64(if k / n == k % n { 1.0 } else { off }))
        .collect();
    Tensor::matrix(n, n, data).expect("square weight matrix")
}

/// `Σ_i (‖t_i − a_i‖² − 1/(n−1) Σ_{j≠i} ‖t_i − a_j‖²)`.
pub fn loss_eq1<T: Real>(tape: &mut Tape<T>, h_t: Var, h_a: Var) -> Result<Var> {
    let n = tape.value(h_t).rows();
    if n < 2 {
        return Err(AlignError::TooFewSeeds(n));
    }
    if tape.value(h_a).rows() != n {
        return Err(AlignError::Tensor(crate::tensor::TensorError::Shape {
            op: "loss_eq1",
            lhs: tape.value(h_t).shape().to_vec(),
            rhs: tape.value(h_a).shape().to_vec(),
        }));
    }
    let d = tape.pairwise_sq_dist(h_t, h_a)?;
    let m = tape.constant(contrast_weights(n));
    let weighted = tape.mul(d, m)?;
    Ok(tape.sum(weighted)?)
}

/// `α · L(h_t, z_a) + (1 − α) · L(h_t, h_a)`, where `z_a` already carries the
/// straight-through gradient to `h_a`.
pub fn loss_combined<T: Real>(tape: &mut Tape<T>, h_t: Var, h_a: Var, z_a: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AlignError::Alpha(alpha));
    }
    if alpha == 0.0 {
        return loss_eq1(tape, h_t, h_a);
    }
    let proto = loss_eq1(tape, h_t, z_a)?;
    if alpha == 1.0 {
        return Ok(proto);
    }
    let l1 = loss_eq1(tape, h_t, h_a)?;
    let a = tape.scale(proto, T::from_f64(alpha))?;
    let b = tape.scale(l1, T::from_f64(1.0 - alpha))?;
    Ok(tape.add(a, b)?)
}
