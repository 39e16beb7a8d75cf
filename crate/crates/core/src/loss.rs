//! Generalized Dice loss over probability maps.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Smoothing added to numerator and denominator; guards empty-vs-empty
/// agreement (0/0) while keeping the perfect-match loss at 0.
pub const GDL_EPS: f64 = 1e-6;

/// Generalized Dice loss: 1 − (2·Σ r·p + ε)/(Σ r + Σ p + ε).
///
/// `p` holds predicted probabilities, `r` the reference mask; both
/// (n, 1, h, w). Differentiable with respect to `p` only; `r` is treated as
/// a constant. Sums run in f64 so large maps do not lose mass.
pub fn gdl(p: &Tensor, r: &Tensor) -> Result<Tensor> {
    if p.shape() != r.shape() {
        return Err(Error::Shape(format!(
            "gdl: probability map {} does not match reference {}",
            p.shape(),
            r.shape()
        )));
    }
    let (mut inter, mut sum_r, mut sum_p) = (0.0f64, 0.0f64, 0.0f64);
    {
        let pd = p.data();
        let rd = r.data();
        for (&pv, &rv) in pd.iter().zip(rd.iter()) {
            inter += (pv as f64) * (rv as f64);
            sum_r += rv as f64;
            sum_p += pv as f64;
        }
    }
    let a = 2.0 * inter + GDL_EPS;
    let b = sum_r + sum_p + GDL_EPS;
    let loss = 1.0 - a / b;

    let (pp, pr) = (p.clone(), r.clone());
    Ok(Tensor::from_op(
        Shape::new(1, 1, 1, 1),
        vec![loss as f32],
        "gdl",
        vec![p.clone()],
        move |g| {
            let g0 = g[0] as f64;
            let rd = pr.data();
            let inv_b2 = 1.0 / (b * b);
            let gp: Vec<f32> = rd
                .iter()
                .map(|&rv| (g0 * (a - 2.0 * rv as f64 * b) * inv_b2) as f32)
                .collect();
            drop(rd);
            pp.accumulate_grad(&gp);
        },
    ))
}
