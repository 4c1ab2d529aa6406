//! Two-phase optimization: pretrain the full network on frame prediction
//! plus feature losses, then freeze the backbone and tune the attention
//! prototype unit alone at a lower learning rate. AdamW with decoupled
//! weight decay, deterministic epoch shuffles, per-step loss logging, and
//! bit-exact checkpoint/resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, ModelConfig, ModelParams};
use crate::data::ClipSample;
use crate::losses::{self, LossBreakdown, LossVariants, LossWeights};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter first/second moment buffers and the step count.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect::<BTreeMap<_, _>>();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW update with decoupled weight decay: the decay shrinks weights
/// directly (from their pre-update value) instead of entering the gradient.
/// Parameters matched by `frozen` are untouched, moments included.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
    frozen: &dyn Fn(&str) -> bool,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, value) in params.iter_mut() {
        if frozen(name) {
            continue;
        }
        let grad = match grads.get(name) {
            Some(g) => g,
            None => continue,
        };
        if grad.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                detail: format!("{name}: param {:?} vs grad {:?}", value.shape(), grad.shape()),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
        let decay = lr * weight_decay;
        for i in 0..value.numel() {
            let g = grad.data()[i];
            let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * g;
            let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let w = value.data()[i];
            value.data_mut()[i] = w - lr * m_hat / (v_hat.sqrt() + EPSILON) - decay * w;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    ApuFinetune,
}

impl Phase {
    pub fn default_lr(&self) -> f64 {
        match self {
            Phase::Pretrain => 1e-4,
            Phase::ApuFinetune => 1e-5,
        }
    }

    /// Finetune freezes every backbone-path parameter and leaves the
    /// APU-path parameters live.
    pub fn is_frozen(&self, name: &str) -> bool {
        match self {
            Phase::Pretrain => false,
            Phase::ApuFinetune => !backbone::is_apu_param(name),
        }
    }
}

/// Training recipe for one phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate; None takes the phase default (1e-4 pretrain, 1e-5
    /// finetune).
    pub lr: Option<f64>,
    pub weight_decay: f64,
    /// Global-norm gradient clip; None disables.
    pub grad_clip: Option<f64>,
    /// Checkpoint every this many epochs (and always at the end).
    pub ckpt_every: usize,
    pub seed: u64,
}

impl TrainPlan {
    pub fn new(phase: Phase, epochs: usize, seed: u64) -> Self {
        Self {
            phase,
            epochs,
            batch_size: 4,
            lr: None,
            weight_decay: 1e-4,
            grad_clip: Some(10.0),
            ckpt_every: 5,
            seed,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.phase.default_lr())
    }
}

type SampleEval = (LossBreakdown, BTreeMap<String, Tensor>);

/// One sample's loss evaluation with gradients.
fn sample_loss_and_grads(
    config: &ModelConfig,
    params: &ModelParams,
    sample: &ClipSample,
    weights: &LossWeights,
    variants: &LossVariants,
    live: &(dyn Fn(&str) -> bool + Sync),
    want_grads: bool,
) -> Result<SampleEval> {
    let mut tape = Tape::new();
    let vars = backbone::register_params(&mut tape, params, |n| want_grads && live(n));
    let fv = tape.constant(sample.inputs.clone());
    let tv = tape.constant(sample.target.clone());
    let out = backbone::forward(&mut tape, config, &vars, fv)?;
    let l_fra = losses::frame_loss(&mut tape, out.y_hat, tv, variants.frame)?;
    let lv = match &out.apu {
        Some(a) => {
            let l_c = losses::compact_loss(&mut tape, a.enc_rows, a.pool, a.scores)?;
            let m = tape.value(a.pool).shape()[0];
            // Diversity and covariance need at least two prototypes.
            let (l_d, l_cov) = if m >= 2 {
                let l_d = losses::diversity_loss(&mut tape, a.pool, weights.gamma, variants.hinge)?;
                let l_cov = losses::covariance_loss(&mut tape, a.cov, variants.cov)?;
                (Some(l_d), Some(l_cov))
            } else {
                (None, None)
            };
            losses::total_loss(&mut tape, l_fra, l_c, l_d, l_cov, weights)?
        }
        None => {
            let zero = tape.constant(Tensor::scalar(0.0)?);
            let mut lv = losses::total_loss(&mut tape, l_fra, zero, None, None, weights)?;
            lv.l_total = l_fra;
            lv
        }
    };
    let breakdown = lv.breakdown(&tape);
    let mut grads = BTreeMap::new();
    if want_grads {
        tape.backward(lv.l_total)?;
        for (name, var) in &vars {
            if let Some(g) = tape.grad(*var) {
                grads.insert(name.clone(), g);
            }
        }
    }
    Ok((breakdown, grads))
}

/// Mean loss and summed-then-averaged gradients over a batch. Worker count
/// comes from `threads`; results are reduced in sample order so the output
/// is bit-identical to the sequential evaluation.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grads(
    config: &ModelConfig,
    params: &ModelParams,
    batch: &[&ClipSample],
    weights: &LossWeights,
    variants: &LossVariants,
    live: &(dyn Fn(&str) -> bool + Sync),
    threads: usize,
    want_grads: bool,
) -> Result<SampleEval> {
    let n = batch.len().max(1) as f64;
    let mut per_sample: Vec<Option<SampleEval>> = (0..batch.len()).map(|_| None).collect();

    if threads <= 1 || batch.len() <= 1 {
        for (slot, sample) in per_sample.iter_mut().zip(batch) {
            *slot = Some(sample_loss_and_grads(
                config, params, sample, weights, variants, live, want_grads,
            )?);
        }
    } else {
        let workers = threads.min(batch.len());
        let results: Vec<Result<(usize, SampleEval)>> =
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for w in 0..workers {
                    let batch_ref = &batch;
                    let handle = scope.spawn(move || {
                        let mut out = Vec::new();
                        let mut idx = w;
                        while idx < batch_ref.len() {
                            let r = sample_loss_and_grads(
                                config,
                                params,
                                batch_ref[idx],
                                weights,
                                variants,
                                live,
                                want_grads,
                            );
                            out.push(r.map(|v| (idx, v)));
                            idx += workers;
                        }
                        out
                    });
                    handles.push(handle);
                }
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            });
        for r in results {
            let (idx, v) = r?;
            per_sample[idx] = Some(v);
        }
    }

    let mut total = LossBreakdown {
        l_fra: 0.0,
        l_c: 0.0,
        l_d: 0.0,
        l_cov: 0.0,
        l_fea: 0.0,
        l_total: 0.0,
    };
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for slot in per_sample {
        let (bd, g) = slot.expect("all samples evaluated");
        total.l_fra += bd.l_fra / n;
        total.l_c += bd.l_c / n;
        total.l_d += bd.l_d / n;
        total.l_cov += bd.l_cov / n;
        total.l_fea += bd.l_fea / n;
        total.l_total += bd.l_total / n;
        for (name, gt) in g {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                        *a += b;
                    }
                }
                None => {
                    grads.insert(name, gt);
                }
            }
        }
    }
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    Ok((total, grads))
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let sq: f64 = grads.values().flat_map(|g| g.data().iter().map(|v| v * v)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

/// Outcome of a phase: final parameter/optimizer state plus where things
/// were written.
pub struct PhaseOutcome {
    pub params: ModelParams,
    pub optim: OptimState,
    pub epochs_done: usize,
    pub loss_log: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Serializes model + optimizer + phase progress into one checkpoint
/// tensor map.
pub fn checkpoint_tensors(
    params: &ModelParams,
    optim: &OptimState,
    phase: Phase,
    epochs_done: usize,
) -> BTreeMap<String, Tensor> {
    let mut tensors = params.clone();
    for (k, v) in &optim.m {
        tensors.insert(format!("optim.m.{k}"), v.clone());
    }
    for (k, v) in &optim.v {
        tensors.insert(format!("optim.v.{k}"), v.clone());
    }
    tensors.insert(
        "train.step".into(),
        Tensor::scalar(optim.step as f64).expect("finite"),
    );
    tensors.insert(
        "train.epochs_done".into(),
        Tensor::scalar(epochs_done as f64).expect("finite"),
    );
    let phase_id = match phase {
        Phase::Pretrain => 0.0,
        Phase::ApuFinetune => 1.0,
    };
    tensors.insert("train.phase".into(), Tensor::scalar(phase_id).expect("finite"));
    tensors
}

/// Splits a loaded checkpoint back into (params, optimizer state, phase,
/// epochs done within that phase).
pub fn split_checkpoint(
    tensors: &BTreeMap<String, Tensor>,
) -> (ModelParams, OptimState, Phase, usize) {
    let mut params = ModelParams::new();
    let mut optim = OptimState::default();
    let mut epochs_done = 0usize;
    let mut phase = Phase::Pretrain;
    for (k, v) in tensors {
        if let Some(name) = k.strip_prefix("optim.m.") {
            optim.m.insert(name.to_string(), v.clone());
        } else if let Some(name) = k.strip_prefix("optim.v.") {
            optim.v.insert(name.to_string(), v.clone());
        } else if k == "train.step" {
            optim.step = v.item() as u64;
        } else if k == "train.epochs_done" {
            epochs_done = v.item() as usize;
        } else if k == "train.phase" {
            phase = if v.item() == 1.0 { Phase::ApuFinetune } else { Phase::Pretrain };
        } else {
            params.insert(k.clone(), v.clone());
        }
    }
    if optim.m.is_empty() {
        optim = OptimState::new(&params);
    }
    (params, optim, phase, epochs_done)
}

/// Runs one training phase over the samples. Writes `loss_<phase>.csv`
/// (step, L_fra, L_c, L_d, L_cov, L_total) and periodic checkpoints into
/// `out_dir`. Resumes from `start_epochs_done` (epochs already recorded in
/// the incoming state), reproducing the uninterrupted run bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn run_phase(
    plan: &TrainPlan,
    config: &ModelConfig,
    mut params: ModelParams,
    mut optim: OptimState,
    start_epochs_done: usize,
    samples: &[ClipSample],
    weights: &LossWeights,
    variants: &LossVariants,
    out_dir: &Path,
    threads: usize,
) -> Result<PhaseOutcome> {
    if samples.is_empty() && plan.epochs > start_epochs_done {
        return Err(Error::InvalidSpec("training dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let phase_tag = match plan.phase {
        Phase::Pretrain => "pretrain",
        Phase::ApuFinetune => "apu",
    };
    let log_path = out_dir.join(format!("loss_{phase_tag}.csv"));
    let mut log = if start_epochs_done == 0 {
        let mut f = std::fs::File::create(&log_path)?;
        writeln!(f, "step,l_fra,l_c,l_d,l_cov,l_total")?;
        f
    } else {
        std::fs::OpenOptions::new().append(true).create(true).open(&log_path)?
    };

    // Freeze integrity: the frozen set must be byte-identical afterwards.
    let frozen_before: BTreeMap<String, Tensor> = params
        .iter()
        .filter(|(k, _)| plan.phase.is_frozen(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    let live = |name: &str| !plan.phase.is_frozen(name);
    let lr = plan.lr();
    let mut step = optim.step as usize;
    for epoch in start_epochs_done..plan.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = crate::substream(plan.seed, &format!("shuffle/{phase_tag}/{epoch}"));
        order.shuffle(&mut rng);
        for chunk in order.chunks(plan.batch_size.max(1)) {
            let batch: Vec<&ClipSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (bd, mut grads) = batch_loss_and_grads(
                config, &params, &batch, weights, variants, &live, threads, true,
            )?;
            if !bd.l_total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            if let Some(clip) = plan.grad_clip {
                clip_global_norm(&mut grads, clip);
            }
            adamw_step(&mut params, &grads, &mut optim, lr, plan.weight_decay, &|n| {
                plan.phase.is_frozen(n)
            })?;
            writeln!(
                log,
                "{},{},{},{},{},{}",
                step, bd.l_fra, bd.l_c, bd.l_d, bd.l_cov, bd.l_total
            )?;
            step += 1;
        }
        let epochs_done = epoch + 1;
        if epochs_done % plan.ckpt_every.max(1) == 0 || epochs_done == plan.epochs {
            let path = out_dir.join(format!("ckpt_{phase_tag}_{epochs_done:04}.ckpt"));
            backbone::save_checkpoint(
                &path,
                config,
                &checkpoint_tensors(&params, &optim, plan.phase, epochs_done),
            )?;
        }
    }
    log.flush()?;

    for (k, before) in &frozen_before {
        let after = params.get(k).expect("frozen parameter still present");
        assert_eq!(
            before.data(),
            after.data(),
            "frozen parameter {k} changed during {phase_tag}"
        );
    }

    let final_checkpoint = out_dir.join(format!("ckpt_{phase_tag}_{:04}.ckpt", plan.epochs));
    if plan.epochs == 0 {
        backbone::save_checkpoint(
            &final_checkpoint,
            config,
            &checkpoint_tensors(&params, &optim, plan.phase, 0),
        )?;
    }
    Ok(PhaseOutcome {
        params,
        optim,
        epochs_done: plan.epochs,
        loss_log: log_path,
        final_checkpoint,
    })
}
