//! Self-verification suite: finite-difference gradient checks for every
//! differentiable operation, plus the full model probed through its head
//! weights. Each check reports the maximum relative error between the
//! backward pass and central differences on small seeded random inputs.

use std::cell::RefCell;

use crate::error::Result;
use crate::layers::{
    adaptive_avg_pool2d, batch_norm2d, concat_channels, conv2d, conv_transpose2d, max_pool2d,
    relu, sigmoid, upsample_bilinear, BatchNormParams, Conv2dParams,
};
use crate::loss::gdl;
use crate::model::{build_model, Mode, ModelConfig, PPMConfig};
use crate::rng::Rng;
use crate::tensor::{grad_check, mean_all, sum_all, Shape, Tensor};

/// Every per-element relative error must stay below this.
pub const GRADCHECK_TOL: f32 = 1e-2;
/// Central-difference step.
pub const GRADCHECK_EPS: f32 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckRow {
    pub op: &'static str,
    pub max_rel_err: f32,
    pub pass: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    /// Fixed-width text table, one row per checked operation.
    pub fn table(&self) -> String {
        let mut out = String::from("op                     max_rel_err  status\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22} {:<12.3e} {}\n",
                r.op,
                r.max_rel_err,
                if r.pass { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Uniform values in [lo, hi); positive ranges keep true gradient entries
/// away from zero, where central differences lose all relative accuracy.
fn uniform_tensor(rng: &mut Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    let vals = (0..shape.numel()).map(|_| rng.range_f32(lo, hi)).collect();
    Tensor::from_vec(shape, vals).expect("generated length matches")
}

/// Values with |v| in [0.3, 1.0) and mixed signs: safely away from the
/// kink of relu at 0 relative to the finite-difference step.
fn signed_tensor(rng: &mut Rng, shape: Shape) -> Tensor {
    let vals = (0..shape.numel())
        .map(|_| {
            let mag = rng.range_f32(0.3, 1.0);
            if rng.u01() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_vec(shape, vals).expect("generated length matches")
}

/// Scalar objective sum(y * weights).
fn weighted_sum(y: &Tensor, weights: Vec<f32>) -> Tensor {
    let m = Tensor::from_vec(y.shape(), weights).expect("weights match shape");
    sum_all(&crate::tensor::elementwise_mul(y, &m).expect("same shape"))
}

/// Strictly positive deterministic weights so the scalar objective
/// sum(y * mask) has nonvanishing gradient w.r.t. every element of y while
/// still catching index permutation bugs.
fn masked_sum(y: &Tensor) -> Tensor {
    let mask = (0..y.numel())
        .map(|i| 0.3 + ((i * 37) % 101) as f32 / 101.0)
        .collect();
    weighted_sum(y, mask)
}

fn check(op: &'static str, err: Result<f32>) -> Result<GradCheckRow> {
    let max_rel_err = err?;
    Ok(GradCheckRow {
        op,
        max_rel_err,
        pass: max_rel_err < GRADCHECK_TOL,
    })
}

fn check_conv2d(rng: &mut Rng) -> Result<GradCheckRow> {
    // Small maps keep the scalar objective near the magnitude of single
    // gradient entries; a large summed objective would drown the central
    // difference in f32 rounding (noise ~ ulp(f)/eps).
    let x = uniform_tensor(rng, Shape::new(1, 2, 4, 5), 0.3, 1.0);
    let w = uniform_tensor(rng, Shape::new(2, 2, 3, 3), 0.3, 1.0);
    let b = uniform_tensor(rng, Shape::new(1, 2, 1, 1), 0.3, 1.0);
    let params = |w: &Tensor, b: &Tensor| Conv2dParams::new(w.clone(), b.clone(), 1, 1, 2);
    let ex = grad_check(
        |p| Ok(masked_sum(&conv2d(p, &params(&w, &b))?)),
        &x,
        GRADCHECK_EPS,
    )?;
    let ew = grad_check(
        |p| Ok(masked_sum(&conv2d(&x, &params(p, &b))?)),
        &w,
        GRADCHECK_EPS,
    )?;
    let eb = grad_check(
        |p| Ok(masked_sum(&conv2d(&x, &params(&w, p))?)),
        &b,
        GRADCHECK_EPS,
    )?;
    check("conv2d", Ok(ex.max(ew).max(eb)))
}

fn check_conv_transpose2d(rng: &mut Rng) -> Result<GradCheckRow> {
    let x = uniform_tensor(rng, Shape::new(1, 3, 3, 3), 0.3, 1.0);
    let w = uniform_tensor(rng, Shape::new(3, 2, 2, 2), 0.3, 1.0);
    let b = uniform_tensor(rng, Shape::new(1, 2, 1, 1), 0.3, 1.0);
    let ex = grad_check(
        |p| Ok(masked_sum(&conv_transpose2d(p, &w, &b, 2)?)),
        &x,
        GRADCHECK_EPS,
    )?;
    let ew = grad_check(
        |p| Ok(masked_sum(&conv_transpose2d(&x, p, &b, 2)?)),
        &w,
        GRADCHECK_EPS,
    )?;
    let eb = grad_check(
        |p| Ok(masked_sum(&conv_transpose2d(&x, &w, p, 2)?)),
        &b,
        GRADCHECK_EPS,
    )?;
    check("conv_transpose2d", Ok(ex.max(ew).max(eb)))
}

/// Standardized values of `x` per channel (biased variance), computed
/// outside the graph; used to build well-conditioned objectives below.
fn standardized(x: &Tensor) -> Vec<f32> {
    let s = x.shape();
    let hw = s.h * s.w;
    let data = x.to_vec();
    let mut out = vec![0.0f32; data.len()];
    for c in 0..s.c {
        let idx = |n: usize, k: usize| (n * s.c + c) * hw + k;
        let count = (s.n * hw) as f64;
        let mut mean = 0.0f64;
        for n in 0..s.n {
            for k in 0..hw {
                mean += data[idx(n, k)] as f64;
            }
        }
        mean /= count;
        let mut var = 0.0f64;
        for n in 0..s.n {
            for k in 0..hw {
                var += (data[idx(n, k)] as f64 - mean).powi(2);
            }
        }
        var /= count;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for n in 0..s.n {
            for k in 0..hw {
                out[idx(n, k)] = ((data[idx(n, k)] as f64 - mean) * inv) as f32;
            }
        }
    }
    out
}

fn check_batch_norm2d(rng: &mut Rng) -> Result<GradCheckRow> {
    // Batch norm centers its input gradient (dx = gamma*is*(g - mean(g) -
    // xhat*mean(g*xhat)) per channel), so a positive mask does NOT keep
    // gradient entries away from zero. Each probe leg gets weights chosen
    // so its own gradient is bounded below: an alternating +-1 mask for x
    // (mean(g) = 0, |xhat*mean(g*xhat)| << 1 over 72 elements/channel),
    // sign(xhat) for gamma (d_gamma = sum |xhat|), and a positive mask for
    // beta (d_beta = sum of weights).
    let x = uniform_tensor(rng, Shape::new(2, 3, 6, 6), 0.3, 1.3);
    let gamma = uniform_tensor(rng, Shape::new(1, 3, 1, 1), 0.5, 1.5);
    let beta = uniform_tensor(rng, Shape::new(1, 3, 1, 1), 0.3, 1.0);
    let bn = |gamma: &Tensor, beta: &Tensor| {
        let mut p = BatchNormParams::new(3);
        p.gamma = gamma.clone();
        p.beta = beta.clone();
        p
    };
    let alternating: Vec<f32> = (0..x.numel()).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let xhat_sign: Vec<f32> = standardized(&x)
        .iter()
        .map(|&v| if v >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    let ex = grad_check(
        |p| Ok(weighted_sum(&batch_norm2d(p, &bn(&gamma, &beta))?, alternating.clone())),
        &x,
        GRADCHECK_EPS,
    )?;
    let eg = grad_check(
        |p| Ok(weighted_sum(&batch_norm2d(&x, &bn(p, &beta))?, xhat_sign.clone())),
        &gamma,
        GRADCHECK_EPS,
    )?;
    let eb = grad_check(
        |p| Ok(masked_sum(&batch_norm2d(&x, &bn(&gamma, p))?)),
        &beta,
        GRADCHECK_EPS,
    )?;
    check("batch_norm2d", Ok(ex.max(eg).max(eb)))
}

fn check_relu(rng: &mut Rng) -> Result<GradCheckRow> {
    let x = signed_tensor(rng, Shape::new(1, 2, 3, 4));
    check(
        "relu",
        grad_check(|p| Ok(masked_sum(&relu(p))), &x, GRADCHECK_EPS),
    )
}

fn check_sigmoid(rng: &mut Rng) -> Result<GradCheckRow> {
    // Few elements keep the summed objective small next to the weakest
    // gradient entry (sigmoid' >= 0.2 on [-1, 1]).
    let x = uniform_tensor(rng, Shape::new(1, 1, 2, 3), -1.0, 1.0);
    check(
        "sigmoid",
        grad_check(|p| Ok(masked_sum(&sigmoid(p))), &x, GRADCHECK_EPS),
    )
}

fn check_max_pool2d(rng: &mut Rng) -> Result<GradCheckRow> {
    // Distinct values with gaps far larger than the step keep the argmax
    // stable under the +/- eps probes.
    let shape = Shape::new(1, 2, 4, 6);
    let mut vals: Vec<f32> = (0..shape.numel()).map(|i| 0.1 + 0.05 * i as f32).collect();
    rng.shuffle(&mut vals);
    let x = Tensor::from_vec(shape, vals).expect("length matches");
    check(
        "max_pool2d",
        grad_check(|p| Ok(masked_sum(&max_pool2d(p)?)), &x, GRADCHECK_EPS),
    )
}

fn check_adaptive_avg_pool2d(rng: &mut Rng) -> Result<GradCheckRow> {
    let x = uniform_tensor(rng, Shape::new(1, 3, 5, 6), 0.3, 1.0);
    check(
        "adaptive_avg_pool2d",
        grad_check(
            |p| Ok(masked_sum(&adaptive_avg_pool2d(p, (2, 3))?)),
            &x,
            GRADCHECK_EPS,
        ),
    )
}

fn check_upsample_bilinear(rng: &mut Rng) -> Result<GradCheckRow> {
    let x = uniform_tensor(rng, Shape::new(1, 2, 3, 4), 0.3, 1.0);
    check(
        "upsample_bilinear",
        grad_check(
            |p| Ok(masked_sum(&upsample_bilinear(p, (5, 6))?)),
            &x,
            GRADCHECK_EPS,
        ),
    )
}

fn check_concat(rng: &mut Rng) -> Result<GradCheckRow> {
    let a = uniform_tensor(rng, Shape::new(1, 2, 3, 3), 0.3, 1.0);
    let b = uniform_tensor(rng, Shape::new(1, 3, 3, 3), 0.3, 1.0);
    let ea = grad_check(
        |p| Ok(masked_sum(&concat_channels(&[p.clone(), b.clone()])?)),
        &a,
        GRADCHECK_EPS,
    )?;
    let eb = grad_check(
        |p| Ok(masked_sum(&concat_channels(&[a.clone(), p.clone()])?)),
        &b,
        GRADCHECK_EPS,
    )?;
    check("concat", Ok(ea.max(eb)))
}

fn check_gdl(rng: &mut Rng) -> Result<GradCheckRow> {
    let p = uniform_tensor(rng, Shape::new(1, 1, 4, 6), 0.05, 0.95);
    let r_vals: Vec<f32> = (0..24).map(|_| (rng.u01() < 0.5) as u32 as f32).collect();
    let r = Tensor::from_vec(Shape::new(1, 1, 4, 6), r_vals).expect("length matches");
    check("gdl", grad_check(|q| gdl(q, &r), &p, GRADCHECK_EPS))
}

/// Reduced configuration for the whole-network check. The init seed is
/// pinned to one whose random head features are healthy in every channel:
/// a mostly-dead ReLU channel would make mean(forward) nearly flat along
/// that weight, and central differences lose all relative accuracy at
/// near-zero gradient components (the check would report noise, not a
/// backward-pass defect).
fn head_check_config() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        input_size: (48, 64),
        encoder_stage_channels: vec![4, 6, 8, 10, 12],
        decoder_channels: vec![8, 6, 4, 4],
        ppm: PPMConfig {
            bins: vec![1, 2, 3],
            branch_channels: 4,
            fused: true,
        },
        decoder_dilation: 2,
        seed: 5,
    }
}

/// The full network as a function of its head weights: mean(forward(x)).
fn check_model_head(rng: &mut Rng) -> Result<GradCheckRow> {
    let mut model = build_model(&head_check_config())?;
    model.set_mode(Mode::Inference);
    // Positive head weights keep the objective's gradient components away
    // from zero, where central differences have no relative accuracy.
    let c_head = model.config().decoder_channels[3];
    let _ = model.swap_head_weight(uniform_tensor(rng, Shape::new(1, c_head, 1, 1), 0.3, 1.0))?;
    let x = uniform_tensor(rng, Shape::new(1, 3, 48, 64), 0.3, 1.3);
    let probe = {
        let params = model.named_parameters();
        params
            .into_iter()
            .find(|(n, _)| n == "head.conv.weight")
            .expect("head weight exists")
            .1
    };
    let model = RefCell::new(model);
    let err = grad_check(
        |w| {
            let mut m = model.borrow_mut();
            m.swap_head_weight(w.clone())?;
            Ok(mean_all(&m.forward(&x)?))
        },
        &probe,
        GRADCHECK_EPS,
    );
    check("model_head", err)
}

/// A fixture whose backward pass is deliberately wrong (forward doubles,
/// backward claims the slope is 3). Used to prove the suite can fail.
fn check_broken_fixture(rng: &mut Rng) -> Result<GradCheckRow> {
    let x = uniform_tensor(rng, Shape::new(1, 1, 2, 3), 0.3, 1.0);
    let broken_double = |x: &Tensor| {
        let data = x.data().iter().map(|v| 2.0 * v).collect();
        let parent = x.clone();
        Tensor::from_op(
            x.shape(),
            data,
            "broken_double",
            vec![x.clone()],
            move |g| {
                let wrong: Vec<f32> = g.iter().map(|v| 3.0 * v).collect();
                parent.accumulate_grad(&wrong);
            },
        )
    };
    check(
        "broken_fixture",
        grad_check(|p| Ok(masked_sum(&broken_double(p))), &x, GRADCHECK_EPS),
    )
}

/// Run every gradient check with inputs seeded from `seed`. With
/// `include_broken` an intentionally faulty backward is appended, which
/// must fail — it exists so the failure path of this suite is itself
/// testable.
pub fn run_suite(seed: u64, include_broken: bool) -> Result<GradCheckReport> {
    let mut rng = Rng::for_stream(seed, 0x6AD);
    let mut rows = vec![
        check_conv2d(&mut rng)?,
        check_conv_transpose2d(&mut rng)?,
        check_batch_norm2d(&mut rng)?,
        check_relu(&mut rng)?,
        check_sigmoid(&mut rng)?,
        check_max_pool2d(&mut rng)?,
        check_adaptive_avg_pool2d(&mut rng)?,
        check_upsample_bilinear(&mut rng)?,
        check_concat(&mut rng)?,
        check_gdl(&mut rng)?,
        check_model_head(&mut rng)?,
    ];
    if include_broken {
        rows.push(check_broken_fixture(&mut rng)?);
    }
    Ok(GradCheckReport { rows })
}
