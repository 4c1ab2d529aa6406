//! Central finite-difference gradient verification.
//!
//! The comparator is elementwise relative error with the denominator floored
//! at 1e-8: `|a - f| / max(|a|, |f|, 1e-8)`. Checks pass below 1e-4.

use std::collections::BTreeMap;

use crate::tensor::Tensor;
use crate::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
pub fn finite_diff_grad<F>(mut f: F, theta: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0, "finite_diff_grad needs h > 0");
    let mut probe = theta.clone();
    let mut grad = vec![0.0; theta.numel()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Tensor::new(theta.shape().to_vec(), grad)
}

/// Worst elementwise relative error between two gradients.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// One parameter's comparison in a multi-tensor check.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of checking a whole parameter set against finite differences.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_error(&self) -> f64 {
        self.worst().map(|p| p.max_rel_error).unwrap_or(0.0)
    }
}

/// Verifies analytic gradients of a scalar function over a set of named
/// parameters. `loss_and_grads` evaluates the function once with backward
/// enabled; `loss_only` re-evaluates it for perturbed parameters.
pub fn check_params<F, G>(
    params: &BTreeMap<String, Tensor>,
    mut loss_and_grads: F,
    mut loss_only: G,
    h: f64,
    tol: f64,
) -> Result<CheckReport>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>>,
    G: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    let analytic = loss_and_grads(params)?;
    let mut reports = Vec::new();
    for (name, value) in params {
        let ana = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let mut work = params.clone();
        let num = finite_diff_grad(
            |probe| {
                work.insert(name.clone(), probe.clone());
                loss_only(&work)
            },
            value,
            h,
        )?;
        let mut worst = 0usize;
        let mut worst_err = 0.0f64;
        for (i, (a, f)) in ana.data().iter().zip(num.data()).enumerate() {
            let err = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
            if err > worst_err {
                worst_err = err;
                worst = i;
            }
        }
        reports.push(ParamReport {
            name: name.clone(),
            max_rel_error: worst_err,
            worst_index: worst,
            analytic: ana.data().get(worst).copied().unwrap_or(0.0),
            numeric: num.data().get(worst).copied().unwrap_or(0.0),
        });
    }
    Ok(CheckReport { params: reports, tol })
}


/// Ready-made gradient checks for each differentiable subsystem. Each check
/// evaluates the real loss graph of its module and compares every parameter
/// against central finite differences.
///
/// Instances are drawn from the seed and re-drawn (deterministically, seed +
/// 1000 * attempt) until they are well-posed for finite differencing:
/// away from the argmax/hinge/abs kinks the objective is only piecewise
/// smooth across, and with no gradient coordinate so small that the h = 1e-5
/// truncation error (~1e-10 in f64) swamps it. The kink margins implement
/// the measure-zero exclusions the loss definitions assume; the magnitude
/// floor is the resolvability bound of the difference quotient itself. A
/// wrong gradient would fail at every draw; the redraws only reject
/// ill-conditioned instances, never wrong answers.
pub mod harness {
    use std::collections::BTreeMap;

    use super::{check_params, CheckReport, DEFAULT_STEP, DEFAULT_TOL};
    use crate::apu::{self, ApuParams, Encoding};
    use crate::backbone::{self, ModelConfig, ModelParams};
    use crate::cau::{self, CauParams, OpCounter};
    use crate::losses::{self, LossWeights};
    use crate::tape::{Tape, Var};
    use crate::tensor::{uniform, Tensor};
    use crate::{Error, Result};

    const MAX_ATTEMPTS: u64 = 40;
    /// A kink (argmax tie, hinge corner, abs zero) must sit further from
    /// the operating point than SAFETY * h * (its own gradient magnitude),
    /// so no +-h evaluation can cross it.
    const SAFETY: f64 = 3.0;
    /// Smallest gradient coordinate finite differences can certify at
    /// h = 1e-5 and tolerance 1e-4 with headroom (truncation error sits
    /// near 1e-10, so 4e-6 keeps the worst quotient near 5e-5).
    const GRAD_FLOOR: f64 = 4e-6;
    /// Positions whose argmax gap exceeds this cannot flip within the
    /// stencil for any plausible sensitivity; skip their hazard backward.
    const GAP_COARSE: f64 = 0.05;
    /// Cosine similarity differentiates like 1/norm, with curvature growing
    /// as 1/norm^3; rows or prototypes closer to zero than this leave the
    /// difference quotient dominated by truncation error.
    const NORM_FLOOR: f64 = 0.02;

    /// The pinned end-to-end configuration: 16x16 frames, depth 2, M = 2,
    /// R = 2.
    pub fn e2e_config() -> ModelConfig {
        ModelConfig {
            t_window: 4,
            frame_channels: 1,
            frame_h: 16,
            frame_w: 16,
            base_channels: 8,
            depth: 2,
            apu_enabled: true,
            apu_level: 1,
            prototype_count: 2,
            retrieve_sharpness: 10.0,
            cau_enabled: true,
            rca_loops: 2,
            cc_reduction: 8,
            cc_temperature: 1.0,
        }
    }

    fn min_row_norm(t: &Tensor) -> f64 {
        let (n, c) = (t.shape()[0], t.shape()[1]);
        (0..n)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    fn min_nonzero_grad(grads: &BTreeMap<String, Tensor>) -> f64 {
        grads
            .values()
            .flat_map(|g| g.data().iter())
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }

    /// Measures how close the instance sits to the kinks the loss graph
    /// crosses, in units of how far one +-h finite-difference step can move
    /// them. For every spatial position, the retrieval argmax gap (top-2
    /// cosine difference) is differentiated w.r.t. every checked leaf; the
    /// instance is hazardous if any gap (or hinge margin, or covariance
    /// off-diagonal) is within SAFETY * h * |gradient| of its kink.
    /// Returns the worst ratio (h * |grad|_inf / distance); well-posed
    /// instances stay below 1 / SAFETY.
    fn kink_hazard(
        tape: &mut Tape,
        enc_rows: Var,
        pool: Var,
        cov: Var,
        gamma: f64,
        h: f64,
        check_argmax: bool,
    ) -> crate::Result<f64> {
        let max_leaf_grad = |tape: &Tape, leaves: &[Var]| -> f64 {
            leaves
                .iter()
                .filter_map(|v| tape.grad(*v))
                .flat_map(|g| g.data().iter().map(|x| x.abs()).collect::<Vec<_>>())
                .fold(0.0, f64::max)
        };
        // Leaves = every requires-grad node currently on the tape.
        let leaves: Vec<Var> = tape.leaves_requiring_grad();
        let mut worst: f64 = 0.0;

        let (n, _c) = {
            let s = tape.value(enc_rows).shape();
            (s[0], s[1])
        };
        let m = tape.value(pool).shape()[0];
        if m >= 2 && check_argmax {
            // Top-2 cosine gap per position.
            let cosines = tape.cosine_rows(enc_rows, pool)?;
            for i in 0..n {
                let row: Vec<f64> =
                    tape.value(cosines).data()[i * m..(i + 1) * m].to_vec();
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
                let gap = row[order[0]] - row[order[1]];
                if gap > GAP_COARSE {
                    continue;
                }
                let top = tape.gather_flat(cosines, vec![i * m + order[0]])?;
                let second = tape.gather_flat(cosines, vec![i * m + order[1]])?;
                let gap_var = tape.sub(top, second)?;
                tape.backward(gap_var)?;
                let s_max = max_leaf_grad(tape, &leaves);
                worst = worst.max(h * s_max / gap.max(1e-300));
            }
        }
        if m >= 2 {
            // Hinge corners and covariance abs kinks per prototype pair.
            for a in 0..m {
                for b in (a + 1)..m {
                    let pa = tape.gather_rows(pool, vec![a])?;
                    let pb = tape.gather_rows(pool, vec![b])?;
                    let diff = tape.sub(pa, pb)?;
                    let dist = tape.l2_norm(diff)?;
                    let margin = (tape.value(dist).item() - gamma).abs();
                    tape.backward(dist)?;
                    let s_max = max_leaf_grad(tape, &leaves);
                    worst = worst.max(h * s_max / margin.max(1e-300));

                    let cm = tape.value(cov).shape()[1];
                    let entry = tape.gather_flat(cov, vec![a * cm + b])?;
                    let cval = tape.value(entry).item().abs();
                    let es = tape.sum(entry)?;
                    tape.backward(es)?;
                    let s_max = max_leaf_grad(tape, &leaves);
                    worst = worst.max(h * s_max / cval.max(1e-300));
                }
            }
        }
        Ok(worst)
    }

    /// End-to-end check on the pinned config: the full training objective
    /// differentiated through backbone, CAU, APU, and all loss terms.
    pub fn check_e2e(seed: u64) -> Result<CheckReport> {
        let cfg = e2e_config();
        let weights = LossWeights::default();
        for attempt in 0..MAX_ATTEMPTS {
            let inst = seed + 1000 * attempt;
            let params = backbone::build_randomized(&cfg, inst)?;
            let mut rng = crate::substream(inst, "gradcheck/e2e");
            let frames =
                uniform(vec![cfg.input_channels(), cfg.frame_h, cfg.frame_w], 1.0, &mut rng);
            let target =
                uniform(vec![cfg.frame_channels, cfg.frame_h, cfg.frame_w], 0.8, &mut rng);

            let build = |tape: &mut Tape,
                         p: &ModelParams,
                         want: bool|
             -> Result<(crate::losses::LossVars, crate::apu::ApuOutputs, BTreeMap<String, Var>)> {
                let vars = backbone::register_params(tape, p, |_| want);
                let fv = tape.constant(frames.clone());
                let tv = tape.constant(target.clone());
                let out = backbone::forward(tape, &cfg, &vars, fv)?;
                let l_fra = losses::frame_loss(tape, out.y_hat, tv, losses::FrameLossKind::L2)?;
                let a = out.apu.expect("apu enabled in e2e config");
                let l_c = losses::compact_loss(tape, a.enc_rows, a.pool, a.scores)?;
                let l_d =
                    losses::diversity_loss(tape, a.pool, weights.gamma, losses::HingeKind::Linear)?;
                let l_cov = losses::covariance_loss(tape, a.cov, losses::CovPenaltyKind::MeanAbs)?;
                let lv = losses::total_loss(tape, l_fra, l_c, Some(l_d), Some(l_cov), &weights)?;
                Ok((lv, a, vars))
            };

            // Well-posedness probe: resolvable gradients and no kink inside
            // the finite-difference stencil.
            {
                let mut tape = Tape::new();
                let (lv, a, vars) = build(&mut tape, &params, true)?;
                tape.backward(lv.l_total)?;
                let mut grads = BTreeMap::new();
                for (name, var) in &vars {
                    if let Some(g) = tape.grad(*var) {
                        grads.insert(name.clone(), g);
                    }
                }
                if min_nonzero_grad(&grads) < GRAD_FLOOR {
                    continue;
                }
                if min_row_norm(tape.value(a.enc_rows)) < NORM_FLOOR
                    || min_row_norm(tape.value(a.pool)) < NORM_FLOOR
                {
                    continue;
                }
                let hazard = kink_hazard(
                    &mut tape,
                    a.enc_rows,
                    a.pool,
                    a.cov,
                    weights.gamma,
                    DEFAULT_STEP,
                    true,
                )?;
                if hazard >= 1.0 / SAFETY {
                    continue;
                }
            }

            let loss_and_grads = |p: &ModelParams| -> Result<BTreeMap<String, Tensor>> {
                let mut tape = Tape::new();
                let (lv, _, vars) = build(&mut tape, p, true)?;
                tape.backward(lv.l_total)?;
                let mut grads = BTreeMap::new();
                for (name, var) in &vars {
                    if let Some(g) = tape.grad(*var) {
                        grads.insert(name.clone(), g);
                    }
                }
                Ok(grads)
            };
            let loss_only = |p: &ModelParams| -> Result<f64> {
                let mut tape = Tape::new();
                let (lv, _, _) = build(&mut tape, p, false)?;
                Ok(tape.value(lv.l_total).item())
            };
            return check_params(&params, loss_and_grads, loss_only, DEFAULT_STEP, DEFAULT_TOL);
        }
        Err(Error::InvalidConfig(format!(
            "no well-posed e2e gradcheck instance within {MAX_ATTEMPTS} attempts of seed {seed}"
        )))
    }

    /// APU-only check: attention heads and the encoding differentiated
    /// through attention/ensemble/retrieve/distinguish plus the feature
    /// losses.
    pub fn check_apu(seed: u64) -> Result<CheckReport> {
        let (m, c, h, w) = (3usize, 5usize, 3usize, 2usize);
        let weights = LossWeights::default();
        for attempt in 0..MAX_ATTEMPTS {
            let inst = seed + 1000 * attempt;
            let mut rng = crate::substream(inst, "gradcheck/apu");
            let enc_t = {
                let raw = uniform(vec![c, h, w], 1.0, &mut rng);
                Tensor::from_fn(vec![c, h, w], |i| raw.data()[i] + 0.6)?
            };
            let probe = uniform(vec![c, h, w], 1.0, &mut rng);
            let mut params = BTreeMap::new();
            params.insert("apu.head.weight".to_string(), uniform(vec![m, c], 1.0, &mut rng));
            params.insert("enc".to_string(), enc_t);

            let build = |tape: &mut Tape,
                         p: &BTreeMap<String, Tensor>,
                         want: bool|
             -> Result<(Var, crate::apu::ApuOutputs, Var, Var)> {
                let enc_v = tape.leaf(p["enc"].clone(), want);
                let enc = Encoding::new(tape, enc_v)?;
                let head = tape.leaf(p["apu.head.weight"].clone(), want);
                let ap = ApuParams { head_weight: head, sharpness: 8.0 };
                let outs = apu::apu_forward(tape, enc, &ap)?;
                let pr = tape.constant(probe.clone());
                let weighted = tape.mul(outs.out, pr)?;
                let l_probe = tape.sum(weighted)?;
                let l_c = losses::compact_loss(tape, outs.enc_rows, outs.pool, outs.scores)?;
                let l_d =
                    losses::diversity_loss(tape, outs.pool, weights.gamma, losses::HingeKind::Linear)?;
                let l_cov =
                    losses::covariance_loss(tape, outs.cov, losses::CovPenaltyKind::MeanAbs)?;
                let lv = losses::total_loss(tape, l_probe, l_c, Some(l_d), Some(l_cov), &weights)?;
                Ok((lv.l_total, outs, enc_v, head))
            };

            {
                let mut tape = Tape::new();
                let (l_total, outs, enc_v, head) = build(&mut tape, &params, true)?;
                tape.backward(l_total)?;
                let mut grads = BTreeMap::new();
                grads.insert("apu.head.weight".to_string(), tape.grad(head).unwrap());
                grads.insert("enc".to_string(), tape.grad(enc_v).unwrap());
                if min_nonzero_grad(&grads) < GRAD_FLOOR {
                    continue;
                }
                if min_row_norm(tape.value(outs.enc_rows)) < NORM_FLOOR
                    || min_row_norm(tape.value(outs.pool)) < NORM_FLOOR
                {
                    continue;
                }
                let hazard = kink_hazard(
                    &mut tape,
                    outs.enc_rows,
                    outs.pool,
                    outs.cov,
                    weights.gamma,
                    DEFAULT_STEP,
                    true,
                )?;
                if hazard >= 1.0 / SAFETY {
                    continue;
                }
            }

            let loss_and_grads = |p: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
                let mut tape = Tape::new();
                let (l_total, _, enc_v, head) = build(&mut tape, p, true)?;
                tape.backward(l_total)?;
                let mut grads = BTreeMap::new();
                grads.insert("apu.head.weight".to_string(), tape.grad(head).unwrap());
                grads.insert("enc".to_string(), tape.grad(enc_v).unwrap());
                Ok(grads)
            };
            let loss_only = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
                let mut tape = Tape::new();
                let (l_total, _, _, _) = build(&mut tape, p, false)?;
                Ok(tape.value(l_total).item())
            };
            return check_params(&params, loss_and_grads, loss_only, DEFAULT_STEP, DEFAULT_TOL);
        }
        Err(Error::InvalidConfig(format!(
            "no well-posed apu gradcheck instance within {MAX_ATTEMPTS} attempts of seed {seed}"
        )))
    }

    /// CAU-only check: Q/K/V/fusion kernels differentiated through two
    /// recurrent criss-cross loops against a random linear probe.
    pub fn check_cau(seed: u64) -> Result<CheckReport> {
        let (c, h, w) = (8usize, 4usize, 3usize);
        let cr = cau::reduced_channels(c, 8);
        for attempt in 0..MAX_ATTEMPTS {
            let inst = seed + 1000 * attempt;
            let mut rng = crate::substream(inst, "gradcheck/cau");
            let feat_t = uniform(vec![c, h, w], 1.0, &mut rng);
            let probe = uniform(vec![c, h, w], 1.0, &mut rng);
            let mut params = BTreeMap::new();
            params.insert("cau.wq".to_string(), uniform(vec![cr, c], 1.4, &mut rng));
            params.insert("cau.wk".to_string(), uniform(vec![cr, c], 1.4, &mut rng));
            params.insert("cau.wv".to_string(), uniform(vec![c, c], 0.7, &mut rng));
            params.insert("cau.wfuse".to_string(), uniform(vec![c, 2 * c], 0.7, &mut rng));
            params.insert("feat".to_string(), feat_t);

            let run =
                |p: &BTreeMap<String, Tensor>, want: bool| -> Result<(f64, BTreeMap<String, Tensor>)> {
                    let mut tape = Tape::new();
                    let feat_v = tape.leaf(p["feat"].clone(), want);
                    let feat = Encoding::new(&tape, feat_v)?;
                    let cp = CauParams {
                        w_q: tape.leaf(p["cau.wq"].clone(), want),
                        w_k: tape.leaf(p["cau.wk"].clone(), want),
                        w_v: tape.leaf(p["cau.wv"].clone(), want),
                        w_fuse: tape.leaf(p["cau.wfuse"].clone(), want),
                        temperature: 1.0,
                    };
                    let mut counter = OpCounter::default();
                    let out = cau::rca_forward(&mut tape, feat, &cp, 2, &mut counter)?;
                    let pr = tape.constant(probe.clone());
                    let weighted = tape.mul(out, pr)?;
                    let loss = tape.sum(weighted)?;
                    let value = tape.value(loss).item();
                    let mut grads = BTreeMap::new();
                    if want {
                        tape.backward(loss)?;
                        for (name, var) in [
                            ("cau.wq", cp.w_q),
                            ("cau.wk", cp.w_k),
                            ("cau.wv", cp.w_v),
                            ("cau.wfuse", cp.w_fuse),
                            ("feat", feat_v),
                        ] {
                            grads.insert(name.to_string(), tape.grad(var).unwrap());
                        }
                    }
                    Ok((value, grads))
                };

            let (_, grads) = run(&params, true)?;
            if min_nonzero_grad(&grads) < GRAD_FLOOR {
                continue;
            }
            return check_params(
                &params,
                |p| run(p, true).map(|(_, g)| g),
                |p| run(p, false).map(|(v, _)| v),
                DEFAULT_STEP,
                DEFAULT_TOL,
            );
        }
        Err(Error::InvalidConfig(format!(
            "no well-posed cau gradcheck instance within {MAX_ATTEMPTS} attempts of seed {seed}"
        )))
    }

    /// Loss-layer check: total objective differentiated w.r.t. prediction,
    /// encodings, and prototypes fed in as leaves.
    pub fn check_losses(seed: u64) -> Result<CheckReport> {
        let (n, m, c) = (6usize, 3usize, 4usize);
        let weights = LossWeights::default();
        for attempt in 0..MAX_ATTEMPTS {
            let inst = seed + 1000 * attempt;
            let mut rng = crate::substream(inst, "gradcheck/losses");
            let mut params = BTreeMap::new();
            params.insert("y_hat".to_string(), uniform(vec![1, 4, 4], 0.8, &mut rng));
            params.insert("enc".to_string(), uniform(vec![n, c], 0.8, &mut rng));
            params.insert("pool".to_string(), uniform(vec![m, c], 0.8, &mut rng));
            let target = uniform(vec![1, 4, 4], 0.8, &mut rng);
            let beta = uniform(vec![n, m], 1.0, &mut rng);

            let build = |tape: &mut Tape,
                         p: &BTreeMap<String, Tensor>,
                         want: bool|
             -> Result<(Var, Var, Var, Var, Var)> {
                let y_hat = tape.leaf(p["y_hat"].clone(), want);
                let enc = tape.leaf(p["enc"].clone(), want);
                let pool = tape.leaf(p["pool"].clone(), want);
                let tv = tape.constant(target.clone());
                let bv = tape.constant(beta.clone());
                let l_fra = losses::frame_loss(tape, y_hat, tv, losses::FrameLossKind::L2)?;
                let l_c = losses::compact_loss(tape, enc, pool, bv)?;
                let l_d =
                    losses::diversity_loss(tape, pool, weights.gamma, losses::HingeKind::Linear)?;
                let cov = apu::distinguish(tape, pool)?;
                let l_cov = losses::covariance_loss(tape, cov, losses::CovPenaltyKind::MeanAbs)?;
                let lv = losses::total_loss(tape, l_fra, l_c, Some(l_d), Some(l_cov), &weights)?;
                Ok((lv.l_total, y_hat, enc, pool, cov))
            };

            {
                // The argmax pairing here reads the constant beta leaf, so
                // ties cannot move with the parameters; guard only the
                // hinge/abs kinks and the gradient floor.
                let mut tape = Tape::new();
                let (l_total, y_hat, enc, pool, cov) = build(&mut tape, &params, true)?;
                tape.backward(l_total)?;
                let mut grads = BTreeMap::new();
                grads.insert("y_hat".to_string(), tape.grad(y_hat).unwrap());
                grads.insert("enc".to_string(), tape.grad(enc).unwrap());
                grads.insert("pool".to_string(), tape.grad(pool).unwrap());
                if min_nonzero_grad(&grads) < GRAD_FLOOR {
                    continue;
                }
                let hazard =
                    kink_hazard(&mut tape, enc, pool, cov, weights.gamma, DEFAULT_STEP, false)?;
                if hazard >= 1.0 / SAFETY {
                    continue;
                }
            }

            let loss_and_grads = |p: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
                let mut tape = Tape::new();
                let (l_total, y_hat, enc, pool, _) = build(&mut tape, p, true)?;
                tape.backward(l_total)?;
                let mut grads = BTreeMap::new();
                grads.insert("y_hat".to_string(), tape.grad(y_hat).unwrap());
                grads.insert("enc".to_string(), tape.grad(enc).unwrap());
                grads.insert("pool".to_string(), tape.grad(pool).unwrap());
                Ok(grads)
            };
            let loss_only = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
                let mut tape = Tape::new();
                let (l_total, _, _, _, _) = build(&mut tape, p, false)?;
                Ok(tape.value(l_total).item())
            };
            return check_params(&params, loss_and_grads, loss_only, DEFAULT_STEP, DEFAULT_TOL);
        }
        Err(Error::InvalidConfig(format!(
            "no well-posed losses gradcheck instance within {MAX_ATTEMPTS} attempts of seed {seed}"
        )))
    }
}
