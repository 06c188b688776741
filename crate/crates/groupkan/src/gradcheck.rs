//! Finite-difference gradient verification suites.
//!
//! Every differentiable operation, layer, and the full model are checked
//! against central finite differences (h = 1e-5 by default). The relative
//! error of a coordinate is |ad - fd| / max(|ad|, |fd|, 1).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{GkaMode, GktOptions, GroupedKanActivation, GroupedKanTransform, StageKind};
use crate::model::{build, GroupKanConfig, Mode};
use crate::spline::{basis_op, KanLinear, SplineGrid};
use crate::tensor::ops::{self, Activation};
use crate::tensor::{Tape, Tensor};
use crate::train::{bce_dice_loss, LossConfig};

/// Outcome of one named gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub coords_checked: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Worst failure across a suite, if any.
pub fn worst(reports: &[CheckReport]) -> Option<&CheckReport> {
    reports
        .iter()
        .max_by(|a, b| (a.max_rel_err / a.tol).total_cmp(&(b.max_rel_err / b.tol)))
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(CheckReport::passed)
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0)
}

/// Check d(loss)/d(t) for every tensor in `wrt` at up to `samples` random
/// coordinates each. `f` must rebuild the loss from current tensor values;
/// it runs once on a recording tape for analytic gradients and then twice
/// per coordinate on inference tapes for the central difference.
pub fn fd_check<F>(
    name: &str,
    wrt: &[Tensor],
    f: F,
    samples: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<CheckReport>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    for t in wrt {
        t.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(&loss)?;
    let grads: Vec<Vec<f64>> = wrt
        .iter()
        .map(|t| t.grad_vec().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    let mut coords_checked = 0;
    for (t, grad) in wrt.iter().zip(&grads) {
        let n = t.numel();
        let count = samples.min(n);
        let coords: Vec<usize> = if count == n {
            (0..n).collect()
        } else {
            (0..count).map(|_| rng.gen_range(0..n)).collect()
        };
        for &c in &coords {
            let original = t.data()[c];
            t.update_data(|d| d[c] = original + h);
            let plus = f(&Tape::inference())?.item();
            t.update_data(|d| d[c] = original - h);
            let minus = f(&Tape::inference())?.item();
            t.update_data(|d| d[c] = original);
            let fd = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(grad[c], fd));
            coords_checked += 1;
        }
    }
    Ok(CheckReport {
        name: name.into(),
        max_rel_err: max_err,
        tol,
        coords_checked,
    })
}

// Deterministic weight tensor so reduction losses have no cancellation
// blind spots (a plain sum has zero gradient through layer norm).
fn probe_weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, 0.2, 1.0, rng)
}

fn weighted_sum(tape: &Tape, out: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(ops::sum_all(tape, &ops::mul(tape, out, w)?))
}

// Nudge values away from the kink at zero for relu / maxpool checks.
fn nudged(t: &Tensor, margin: f64) -> Tensor {
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|&v| {
            if v.abs() < margin {
                margin.copysign(if v == 0.0 { 1.0 } else { v })
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(&t.shape(), data).unwrap()
}

const OPS_TOL: f64 = 1e-6;
const LAYERS_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;
const FD_H: f64 = 1e-5;

/// Gradient checks for every primitive tensor operation.
pub fn check_ops(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1));
    let mut reports = Vec::new();

    // matmul: gradients of sum(output), per the canonical example
    {
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng).as_param();
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng).as_param();
        let (a2, b2) = (a.clone(), b.clone());
        reports.push(fd_check(
            "matmul",
            &[a, b],
            move |t| Ok(ops::sum_all(t, &ops::matmul(t, &a2, &b2)?)),
            25,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // conv2d over a random 2x3x8x8 input
    {
        let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng).as_param();
        let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng).as_param();
        let pw = probe_weights(&[2, 4, 8, 8], &mut rng);
        let (x2, w2) = (x.clone(), w.clone());
        reports.push(fd_check(
            "conv2d",
            &[x, w],
            move |t| weighted_sum(t, &ops::conv2d(t, &x2, &w2, 1, 1)?, &pw),
            25,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // strided conv
    {
        let x = Tensor::randn(&[1, 2, 9, 9], 1.0, &mut rng).as_param();
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng).as_param();
        let pw = probe_weights(&[1, 3, 5, 5], &mut rng);
        let (x2, w2) = (x.clone(), w.clone());
        reports.push(fd_check(
            "conv2d_stride2",
            &[x, w],
            move |t| weighted_sum(t, &ops::conv2d(t, &x2, &w2, 2, 1)?, &pw),
            25,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // depthwise conv
    {
        let x = Tensor::randn(&[2, 4, 6, 6], 1.0, &mut rng).as_param();
        let w = Tensor::randn(&[4, 1, 3, 3], 0.5, &mut rng).as_param();
        let pw = probe_weights(&[2, 4, 6, 6], &mut rng);
        let (x2, w2) = (x.clone(), w.clone());
        reports.push(fd_check(
            "depthwise_conv2d",
            &[x, w],
            move |t| weighted_sum(t, &ops::depthwise_conv2d(t, &x2, &w2, 1, 1)?, &pw),
            25,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // layer norm
    {
        let x = Tensor::randn(&[6, 5], 1.0, &mut rng).as_param();
        let g = Tensor::rand_uniform(&[5], 0.5, 1.5, &mut rng).as_param();
        let b = Tensor::randn(&[5], 0.3, &mut rng).as_param();
        let pw = probe_weights(&[6, 5], &mut rng);
        let (x2, g2, b2) = (x.clone(), g.clone(), b.clone());
        reports.push(fd_check(
            "layer_norm",
            &[x, g, b],
            move |t| weighted_sum(t, &ops::layer_norm(t, &x2, &g2, &b2, 1e-5)?, &pw),
            25,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // batch norm (training statistics)
    {
        let x = Tensor::randn(&[3, 4, 5, 5], 1.0, &mut rng).as_param();
        let g = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng).as_param();
        let b = Tensor::randn(&[4], 0.3, &mut rng).as_param();
        let pw = probe_weights(&[3, 4, 5, 5], &mut rng);
        let (x2, g2, b2) = (x.clone(), g.clone(), b.clone());
        reports.push(fd_check(
            "batch_norm2d_train",
            &[x, g, b],
            move |t| {
                let (y, _) = ops::batch_norm2d_train(t, &x2, &g2, &b2, 1e-5)?;
                weighted_sum(t, &y, &pw)
            },
            25,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // elementwise activations (relu inputs nudged off the kink)
    for act in [
        Activation::Relu,
        Activation::Gelu,
        Activation::Silu,
        Activation::Sigmoid,
    ] {
        let raw = Tensor::randn(&[10, 10], 1.0, &mut rng);
        let x = if act == Activation::Relu {
            nudged(&raw, 1e-3).as_param()
        } else {
            raw.as_param()
        };
        let pw = probe_weights(&[10, 10], &mut rng);
        let x2 = x.clone();
        reports.push(fd_check(
            act.name(),
            &[x],
            move |t| weighted_sum(t, &act.apply(t, &x2), &pw),
            100,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // broadcast binary ops
    {
        let a = Tensor::randn(&[4, 3, 2], 1.0, &mut rng).as_param();
        let b = Tensor::rand_uniform(&[3, 1], 0.5, 2.0, &mut rng).as_param();
        let pw = probe_weights(&[4, 3, 2], &mut rng);
        for (name, op) in [
            ("add_broadcast", 0),
            ("sub_broadcast", 1),
            ("mul_broadcast", 2),
            ("div_broadcast", 3),
        ] {
            let (a2, b2, pw2) = (a.clone(), b.clone(), pw.clone());
            reports.push(fd_check(
                name,
                &[a.clone(), b.clone()],
                move |t| {
                    let y = match op {
                        0 => ops::add(t, &a2, &b2)?,
                        1 => ops::sub(t, &a2, &b2)?,
                        2 => ops::mul(t, &a2, &b2)?,
                        _ => ops::div(t, &a2, &b2)?,
                    };
                    weighted_sum(t, &y, &pw2)
                },
                24,
                FD_H,
                OPS_TOL,
                seed,
            )?);
        }
    }

    // shape ops composed: reshape -> permute -> narrow -> concat
    {
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng).as_param();
        let pw = probe_weights(&[3, 8], &mut rng);
        let x2 = x.clone();
        reports.push(fd_check(
            "reshape_permute_narrow_concat",
            &[x],
            move |t| {
                let r = ops::reshape(t, &x2, &[2, 3, 4])?;
                let p = ops::permute(t, &r, &[1, 0, 2])?; // [3,2,4]
                let left = ops::narrow(t, &p, 2, 0, 2)?;
                let right = ops::narrow(t, &p, 2, 2, 2)?;
                let joined = ops::concat(t, &[&p, &left, &right], 2)?; // [3,2,8]
                let flat = ops::reshape(t, &joined, &[3, 16])?;
                let half = ops::narrow(t, &flat, 1, 0, 8)?;
                weighted_sum(t, &half, &pw)
            },
            24,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // max pool (inputs separated from ties)
    {
        let raw = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let x = nudged(&raw, 1e-3).as_param();
        let pw = probe_weights(&[2, 2, 2, 2], &mut rng);
        let x2 = x.clone();
        reports.push(fd_check(
            "max_pool2d",
            &[x],
            move |t| weighted_sum(t, &ops::max_pool2d(t, &x2)?, &pw),
            30,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // nearest upsample
    {
        let x = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng).as_param();
        let pw = probe_weights(&[2, 3, 6, 6], &mut rng);
        let x2 = x.clone();
        reports.push(fd_check(
            "upsample_nearest2",
            &[x],
            move |t| weighted_sum(t, &ops::upsample_nearest2(t, &x2)?, &pw),
            27,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // spline basis op
    {
        let grid = SplineGrid::default_kan();
        let x = Tensor::rand_uniform(&[8, 4], -0.95, 0.95, &mut rng).as_param();
        let pw = probe_weights(&[8, 4, 8], &mut rng);
        let x2 = x.clone();
        reports.push(fd_check(
            "bspline_basis",
            &[x],
            move |t| weighted_sum(t, &basis_op(t, &x2, &grid), &pw),
            32,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // bce with logits
    {
        let z = Tensor::randn(&[3, 6], 2.0, &mut rng).as_param();
        let bits: Vec<f64> = (0..18).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let target = Tensor::from_vec(&[3, 6], bits)?;
        let z2 = z.clone();
        reports.push(fd_check(
            "bce_with_logits",
            &[z],
            move |t| ops::bce_with_logits_mean(t, &z2, &target),
            18,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    // affine + reductions
    {
        let x = Tensor::randn(&[5, 5], 1.0, &mut rng).as_param();
        let x2 = x.clone();
        reports.push(fd_check(
            "affine_mean",
            &[x],
            move |t| Ok(ops::mean_all(t, &ops::affine(t, &x2, 1.7, -0.3))),
            25,
            FD_H,
            OPS_TOL,
            seed,
        )?);
    }

    Ok(reports)
}

/// Gradient checks for the composite layers.
pub fn check_layers(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xD1B54A32D192ED03).wrapping_add(2));
    let grid = SplineGrid::default_kan();
    let mut reports = Vec::new();

    // KanLinear w.r.t. input and both parameter tensors
    {
        let layer = KanLinear::new(6, 4, grid, Activation::Silu, &mut rng);
        let x = Tensor::rand_uniform(&[7, 6], -0.9, 0.9, &mut rng).as_param();
        let pw = probe_weights(&[7, 4], &mut rng);
        let wrt = vec![
            x.clone(),
            layer.spline_coeffs.clone(),
            layer.base_weight.clone(),
        ];
        let x2 = x.clone();
        reports.push(fd_check(
            "kan_forward",
            &wrt,
            move |t| weighted_sum(t, &layer.forward(t, &x2)?, &pw),
            30,
            FD_H,
            LAYERS_TOL,
            seed,
        )?);
    }

    // GKA in both modes
    for (name, mode) in [
        ("gka_shared", GkaMode::SharedPerGroup),
        ("gka_per_channel", GkaMode::PerChannel),
    ] {
        let gka = GroupedKanActivation::new(8, 4, mode, grid, Activation::Silu, &mut rng)?;
        let x = Tensor::rand_uniform(&[2, 5, 8], -0.9, 0.9, &mut rng).as_param();
        let pw = probe_weights(&[2, 5, 8], &mut rng);
        let mut wrt = vec![x.clone()];
        for s in &gka.splines {
            wrt.push(s.spline_coeffs.clone());
            wrt.push(s.base_weight.clone());
        }
        let x2 = x.clone();
        reports.push(fd_check(
            name,
            &wrt,
            move |t| weighted_sum(t, &gka.forward(t, &x2)?, &pw),
            15,
            FD_H,
            LAYERS_TOL,
            seed,
        )?);
    }

    // full GKT layer
    {
        let gkt = GroupedKanTransform::new(
            8,
            2,
            grid,
            Activation::Silu,
            GktOptions::default(),
            &mut rng,
        )?;
        let x = Tensor::rand_uniform(&[2, 9, 8], -0.9, 0.9, &mut rng).as_param();
        let pw = probe_weights(&[2, 9, 8], &mut rng);
        let mut wrt = vec![x.clone(), gkt.ln_gamma.clone(), gkt.ln_beta.clone()];
        if let crate::layers::TokenMixStage::Grouped(kans) = &gkt.stage {
            for k in kans {
                wrt.push(k.spline_coeffs.clone());
                wrt.push(k.base_weight.clone());
            }
        }
        if let Some((w, b)) = &gkt.pw {
            wrt.push(w.clone());
            wrt.push(b.clone());
        }
        if let Some((w, b)) = &gkt.dw {
            wrt.push(w.clone());
            wrt.push(b.clone());
        }
        let x2 = x.clone();
        reports.push(fd_check(
            "gkt_layer",
            &wrt,
            move |t| weighted_sum(t, &gkt.forward(t, &x2, (3, 3))?, &pw),
            12,
            FD_H,
            LAYERS_TOL,
            seed,
        )?);
    }

    // combined BCE + Dice loss w.r.t. logits
    {
        let z = Tensor::randn(&[1, 1, 4, 4], 1.5, &mut rng).as_param();
        let bits: Vec<f64> = (0..16).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let target = Tensor::from_vec(&[1, 1, 4, 4], bits)?;
        let cfg = LossConfig::default();
        let z2 = z.clone();
        reports.push(fd_check(
            "bce_dice_loss",
            &[z],
            move |t| bce_dice_loss(t, &z2, &target, &cfg),
            16,
            FD_H,
            LAYERS_TOL,
            seed,
        )?);
    }

    Ok(reports)
}

/// The tiny probe configuration used for full-model gradient checks.
pub fn probe_config() -> GroupKanConfig {
    let mut cfg = GroupKanConfig::with_channels(16, 16, 16);
    cfg.g_gka = 4;
    cfg.g_gkt = 4;
    cfg.n_gkt_layers = 1;
    cfg.token_layers = vec![StageKind::GroupedKan];
    cfg.input_channels = 1;
    cfg
}

/// End-to-end gradient check of every parameter tensor inuate tiny model
/// against finite differences of the full forward + BCE/Dice loss.
pub fn check_model(seed: u64, coords_per_tensor: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xA24BAED4963EE407).wrapping_add(3));
    let cfg = probe_config();
    let net = build(&cfg, seed)?;
    let x = Tensor::rand_uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut rng);
    let bits: Vec<f64> = (0..32 * 32)
        .map(|i| f64::from((i / 32 + i % 32) % 7 < 3))
        .collect();
    let target = Tensor::from_vec(&[1, 1, 32, 32], bits)?;
    let cfg_loss = LossConfig::default();

    let tensors = net.named_tensors();
    let mut reports = Vec::new();
    for nt in tensors.into_iter().filter(|n| n.trainable) {
        let net_ref = &net;
        let x_ref = &x;
        let target_ref = &target;
        let report = fd_check(
            &format!("model.{}", nt.name),
            std::slice::from_ref(&nt.tensor),
            move |t| {
                let logits = net_ref.forward(t, x_ref, Mode::Train)?;
                bce_dice_loss(t, &logits, target_ref, &cfg_loss)
            },
            coords_per_tensor,
            FD_H,
            MODEL_TOL,
            seed,
        )?;
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_suite_passes_at_1e6() {
        let reports = check_ops(0).unwrap();
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: max rel err {} >= {}",
                r.name,
                r.max_rel_err,
                r.tol
            );
        }
    }

    #[test]
    fn layers_suite_passes_at_1e5() {
        let reports = check_layers(0).unwrap();
        for r in &reports {
            assert!(
                r.passed(),
                "{} failed: max rel err {} >= {}",
                r.name,
                r.max_rel_err,
                r.tol
            );
        }
    }

    #[test]
    fn ops_invariant_holds_across_ten_seeds() {
        // the cross-seed robustness claim at the relaxed 1e-4 tolerance
        for seed in 0..10 {
            let reports = check_ops(seed).unwrap();
            for r in &reports {
                assert!(
                    r.max_rel_err < 1e-4,
                    "seed {seed}: {} err {}",
                    r.name,
                    r.max_rel_err
                );
            }
        }
    }
}
