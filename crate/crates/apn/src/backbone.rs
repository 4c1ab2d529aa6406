//! The frame-prediction auto-encoder.
//!
//! Encoder: a full-resolution 3x3 conv, then per additional level a 2x2
//! average pool and a 3x3 conv (channels double per level), then a 3x3
//! bottleneck conv. Pooling does the downsampling because a stride-2 conv
//! with an odd kernel can never split an even input exactly.
//! Decoder: per level, nearest-neighbor 2x upsample, concat with the
//! encoder skip, a 1x1 channel reduction and a 3x3 conv. All hidden
//! activations are tanh (smooth everywhere, which keeps finite-difference
//! gradient verification honest); the output head is a zero-initialized 3x3
//! conv + tanh, bounding predictions to [-1, 1].
//!
//! The attention units sit on the feature map of the configured level
//! (level 1 = full resolution, level = depth is the bottleneck): CAU first,
//! then APU, per the unit layering. Placement map for the default config:
//!
//! | apu_level | feature map     | channels |
//! |-----------|-----------------|----------|
//! | 1         | 64x64 (full)    | base     |
//! | 2         | 32x32           | 2*base   |
//! | 3 = depth | 16x16 bottleneck| 4*base   |

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::apu::{self, ApuOutputs, ApuParams, Encoding};
use crate::cau::{self, CauParams, OpCounter};
use crate::tape::{Tape, Var};
use crate::tensor::{uniform, Tensor};
use crate::{substream, Error, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"APNCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input window length T (frames fed as channels).
    pub t_window: usize,
    /// Channels per frame (grayscale = 1).
    pub frame_channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub base_channels: usize,
    /// Encoder levels; level l runs at 1/2^(l-1) resolution.
    pub depth: usize,
    pub apu_enabled: bool,
    /// Level whose feature map hosts the attention units.
    pub apu_level: usize,
    /// Prototype count M.
    pub prototype_count: usize,
    /// Inverse temperature of the retrieval softmax.
    pub retrieve_sharpness: f64,
    pub cau_enabled: bool,
    /// Recurrence loops R of the criss-cross unit.
    pub rca_loops: usize,
    /// Q/K channel reduction divisor (floor 1).
    pub cc_reduction: usize,
    /// Multiplier on criss-cross affinity logits.
    pub cc_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_window: 4,
            frame_channels: 1,
            frame_h: 64,
            frame_w: 64,
            base_channels: 8,
            depth: 3,
            apu_enabled: true,
            apu_level: 1,
            prototype_count: 10,
            retrieve_sharpness: 10.0,
            cau_enabled: true,
            rca_loops: 2,
            cc_reduction: 8,
            cc_temperature: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidConfig(msg));
        if self.t_window == 0 {
            return err("t_window must be >= 1".into());
        }
        if self.frame_channels == 0 || self.base_channels == 0 {
            return err("channel counts must be >= 1".into());
        }
        if self.depth == 0 {
            return err("depth must be >= 1".into());
        }
        if !(1..=self.depth).contains(&self.apu_level) {
            return err(format!(
                "apu_level {} outside 1..={}",
                self.apu_level, self.depth
            ));
        }
        if self.prototype_count == 0 {
            return err("prototype_count must be >= 1".into());
        }
        if self.rca_loops == 0 {
            return err("rca_loops must be >= 1".into());
        }
        if self.cc_reduction == 0 {
            return err("cc_reduction must be >= 1".into());
        }
        let div = 1 << (self.depth - 1);
        if !self.frame_h.is_multiple_of(div) || !self.frame_w.is_multiple_of(div) {
            return err(format!(
                "frame {}x{} not divisible by 2^(depth-1) = {}",
                self.frame_h, self.frame_w, div
            ));
        }
        Ok(())
    }

    /// Channels at level l (1-based).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Spatial size at level l.
    pub fn size_at(&self, level: usize) -> (usize, usize) {
        (self.frame_h >> (level - 1), self.frame_w >> (level - 1))
    }

    pub fn input_channels(&self) -> usize {
        self.t_window * self.frame_channels
    }
}

/// All learned tensors keyed by stable path names. The name set is a
/// function of the config only.
pub type ModelParams = BTreeMap<String, Tensor>;

/// Whether a parameter belongs to the attention-prototype unit (the set
/// left live during the finetune phase).
pub fn is_apu_param(name: &str) -> bool {
    name.starts_with("apu.")
}

fn conv_init(
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor {
    let fan_in = (in_c * k * k) as f64;
    uniform(vec![out_c, in_c, k, k], 1.0 / fan_in.sqrt(), rng)
}

fn mat_init(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    uniform(vec![rows, cols], 1.0 / (cols as f64).sqrt(), rng)
}

/// Deterministic parameter initialization: uniform scaled by 1/sqrt(fan_in),
/// biases zero, final head conv zero so early training predicts background.
pub fn build(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    build_with_head_init(config, seed, true)
}

/// `build` with a randomly initialized head instead of the zero head, and
/// the attention Q/K projections scaled up. Gradient checking uses this: a
/// zero head would make every upstream frame-loss gradient vanish, and
/// fan-in-scaled Q/K leave affinity logits so flat that their gradients sink
/// below what central differences at h = 1e-5 can resolve in f64.
pub fn build_randomized(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = build_with_head_init(config, seed, false)?;
    // Q/K at fan-in scale leave affinity logits nearly flat; attention heads
    // at fan-in scale leave prototypes nearly identical. Both starve the
    // difference quotient: boost them so the instance has resolvable
    // gradients and well-separated retrieval argmaxes.
    for name in ["cau.wq", "cau.wk", "apu.head.weight"] {
        if let Some(t) = params.get(name) {
            let boosted =
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 4.0 * v).collect())?;
            params.insert(name.to_string(), boosted);
        }
    }
    // Zero biases leave activations symmetric around zero, which parks
    // encoding vectors and prototypes next to the cosine singularity at the
    // origin. Shift every channel so the checked instance has healthy norms.
    let mut rng = substream(seed, "init/randomized-bias");
    let bias_names: Vec<String> =
        params.keys().filter(|k| k.ends_with(".bias") || k.ends_with("bias")).cloned().collect();
    for name in bias_names {
        let shape = params[&name].shape().to_vec();
        params.insert(name, uniform(shape, 0.4, &mut rng));
    }
    Ok(params)
}

fn build_with_head_init(config: &ModelConfig, seed: u64, zero_head: bool) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = substream(seed, "init");
    let mut params = ModelParams::new();

    // Biases draw from the same fan-in-scaled uniform as their weights: an
    // exactly-zero bias would leave background-only receptive fields at
    // exactly zero activation, a degenerate encoding for the cosine
    // retrieval.
    let mut bias_init = |out_c: usize, fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        uniform(vec![out_c], 1.0 / (fan_in as f64).sqrt(), rng)
    };
    let mut in_c = config.input_channels();
    for level in 1..=config.depth {
        let out_c = config.channels_at(level);
        params.insert(format!("enc.l{level}.weight"), conv_init(out_c, in_c, 3, &mut rng));
        let b = bias_init(out_c, in_c * 9, &mut rng);
        params.insert(format!("enc.l{level}.bias"), b);
        in_c = out_c;
    }
    let cb = config.channels_at(config.depth);
    params.insert("bottleneck.weight".into(), conv_init(cb, cb, 3, &mut rng));
    let b = bias_init(cb, cb * 9, &mut rng);
    params.insert("bottleneck.bias".into(), b);

    for level in (1..config.depth).rev() {
        let c_up = config.channels_at(level + 1);
        let c_skip = config.channels_at(level);
        params.insert(
            format!("dec.l{level}.reduce.weight"),
            mat_init(c_skip, c_up + c_skip, &mut rng),
        );
        params.insert(
            format!("dec.l{level}.conv.weight"),
            conv_init(c_skip, c_skip, 3, &mut rng),
        );
        let b = bias_init(c_skip, c_skip * 9, &mut rng);
        params.insert(format!("dec.l{level}.conv.bias"), b);
    }

    let head_in = config.channels_at(1);
    let head = if zero_head {
        Tensor::zeros(vec![config.frame_channels, head_in, 3, 3])
    } else {
        conv_init(config.frame_channels, head_in, 3, &mut rng)
    };
    params.insert("head.weight".into(), head);
    params.insert(
        "head.bias".into(),
        Tensor::zeros(vec![config.frame_channels]),
    );

    if config.cau_enabled {
        let c = config.channels_at(config.apu_level);
        let cr = cau::reduced_channels(c, config.cc_reduction);
        params.insert("cau.wq".into(), mat_init(cr, c, &mut rng));
        params.insert("cau.wk".into(), mat_init(cr, c, &mut rng));
        params.insert("cau.wv".into(), mat_init(c, c, &mut rng));
        params.insert("cau.wfuse".into(), mat_init(c, 2 * c, &mut rng));
    }
    if config.apu_enabled {
        let c = config.channels_at(config.apu_level);
        params.insert(
            "apu.head.weight".into(),
            mat_init(config.prototype_count, c, &mut rng),
        );
    }
    Ok(params)
}

/// Human-readable placement of the attention units for a config.
pub fn insert_points(config: &ModelConfig) -> Result<String> {
    config.validate()?;
    let (h, w) = config.size_at(config.apu_level);
    let c = config.channels_at(config.apu_level);
    let spot = if config.apu_level == config.depth {
        "bottleneck"
    } else {
        "decoder"
    };
    let cau_line = if config.cau_enabled {
        format!(
            "cau: level {} {spot} ({h}x{w}, c={c}), R={}, shared params",
            config.apu_level, config.rca_loops
        )
    } else {
        "cau: disabled".to_string()
    };
    let apu_line = if config.apu_enabled {
        format!(
            "apu: level {} {spot} ({h}x{w}, c={c}), M={}, after cau",
            config.apu_level, config.prototype_count
        )
    } else {
        "apu: disabled".to_string()
    };
    Ok(format!("{cau_line}\n{apu_line}"))
}

/// Everything one forward pass yields on the tape.
pub struct ForwardOut {
    pub y_hat: Var,
    pub apu: Option<ApuOutputs>,
    /// Criss-cross dot products performed (0 when CAU is disabled).
    pub cc_ops: u64,
}

/// Registers every parameter as a tape leaf; `live` decides requires_grad.
pub fn register_params(
    tape: &mut Tape,
    params: &ModelParams,
    live: impl Fn(&str) -> bool,
) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, value)| (name.clone(), tape.leaf(value.clone(), live(name))))
        .collect()
}

fn conv_block(
    tape: &mut Tape,
    x: Var,
    vars: &BTreeMap<String, Var>,
    weight: &str,
    bias: &str,
    stride: usize,
) -> Result<Var> {
    let w = *vars.get(weight).ok_or_else(|| missing(weight))?;
    let b = *vars.get(bias).ok_or_else(|| missing(bias))?;
    let c = tape.conv2d(x, w, stride, 1)?;
    let c = tape.bias_add_chw(c, b)?;
    tape.tanh(c)
}

fn missing(name: &str) -> Error {
    Error::InvalidConfig(format!("parameter {name:?} missing from checkpoint"))
}

/// Full differentiable forward pass over the tape: frames (T*fc x h x w,
/// already in [-1, 1]) to the predicted frame, with APU intermediates when
/// the unit is enabled.
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &BTreeMap<String, Var>,
    frames: Var,
) -> Result<ForwardOut> {
    let fs = tape.value(frames).shape();
    let expect = [config.input_channels(), config.frame_h, config.frame_w];
    if fs != expect {
        return Err(Error::ShapeMismatch {
            op: "backbone::forward",
            detail: format!("frames {fs:?}, config wants {expect:?}"),
        });
    }

    // Encoder.
    let mut skips = Vec::with_capacity(config.depth);
    let mut x = frames;
    for level in 1..=config.depth {
        if level > 1 {
            x = tape.avg_pool2(x)?;
        }
        x = conv_block(
            tape,
            x,
            vars,
            &format!("enc.l{level}.weight"),
            &format!("enc.l{level}.bias"),
            1,
        )?;
        skips.push(x);
    }
    x = conv_block(tape, x, vars, "bottleneck.weight", "bottleneck.bias", 1)?;

    let mut apu_out = None;
    let mut cc_ops = 0;
    if config.apu_level == config.depth {
        let (x2, outs, ops) = attention_units(tape, config, vars, x)?;
        x = x2;
        apu_out = outs;
        cc_ops = ops;
    }

    // Decoder with skip connections.
    for level in (1..config.depth).rev() {
        let up = tape.upsample_nearest2(x)?;
        let cat = tape.concat_c(up, skips[level - 1])?;
        let reduce = *vars
            .get(&format!("dec.l{level}.reduce.weight"))
            .ok_or_else(|| missing(&format!("dec.l{level}.reduce.weight")))?;
        let cat_enc = Encoding::new(tape, cat)?;
        let reduced = conv1x1(tape, cat_enc, reduce)?;
        x = conv_block(
            tape,
            reduced,
            vars,
            &format!("dec.l{level}.conv.weight"),
            &format!("dec.l{level}.conv.bias"),
            1,
        )?;
        if config.apu_level == level {
            let (x2, outs, ops) = attention_units(tape, config, vars, x)?;
            x = x2;
            apu_out = outs;
            cc_ops = ops;
        }
    }

    // Output head, bounded by tanh.
    let y_hat = conv_block(tape, x, vars, "head.weight", "head.bias", 1)?;
    Ok(ForwardOut { y_hat, apu: apu_out, cc_ops })
}

fn conv1x1(tape: &mut Tape, feat: Encoding, weight: Var) -> Result<Var> {
    let out_c = tape.value(weight).shape()[0];
    let flat = tape.reshape(feat.var, vec![feat.c, feat.h * feat.w])?;
    let out = tape.matmul(weight, flat)?;
    tape.reshape(out, vec![out_c, feat.h, feat.w])
}

fn attention_units(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &BTreeMap<String, Var>,
    x: Var,
) -> Result<(Var, Option<ApuOutputs>, u64)> {
    let mut cur = x;
    let mut cc_ops = 0;
    if config.cau_enabled {
        let feat = Encoding::new(tape, cur)?;
        let params = CauParams {
            w_q: *vars.get("cau.wq").ok_or_else(|| missing("cau.wq"))?,
            w_k: *vars.get("cau.wk").ok_or_else(|| missing("cau.wk"))?,
            w_v: *vars.get("cau.wv").ok_or_else(|| missing("cau.wv"))?,
            w_fuse: *vars.get("cau.wfuse").ok_or_else(|| missing("cau.wfuse"))?,
            temperature: config.cc_temperature,
        };
        let mut counter = OpCounter::default();
        cur = cau::rca_forward(tape, feat, &params, config.rca_loops, &mut counter)?;
        cc_ops = counter.affinity_ops;
    }
    let apu_out = if config.apu_enabled {
        let enc = Encoding::new(tape, cur)?;
        let params = ApuParams {
            head_weight: *vars
                .get("apu.head.weight")
                .ok_or_else(|| missing("apu.head.weight"))?,
            sharpness: config.retrieve_sharpness,
        };
        let outs = apu::apu_forward(tape, enc, &params)?;
        cur = outs.out;
        Some(outs)
    } else {
        None
    };
    Ok((cur, apu_out, cc_ops))
}

/// APU intermediates as concrete tensors, for scoring and map export.
#[derive(Debug, Clone)]
pub struct ApuIntermediates {
    pub enc_rows: Tensor,
    pub maps: Tensor,
    pub pool: Tensor,
    pub beta: Tensor,
    pub cov: Tensor,
    /// Spatial size of the hosting feature map.
    pub map_h: usize,
    pub map_w: usize,
}

/// Inference-only forward pass: no gradients recorded.
pub fn predict(
    config: &ModelConfig,
    params: &ModelParams,
    frames: &Tensor,
) -> Result<(Tensor, Option<ApuIntermediates>)> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, |_| false);
    let fv = tape.constant(frames.clone());
    let out = forward(&mut tape, config, &vars, fv).map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFiniteActivation(op.to_string()),
        other => other,
    })?;
    let (mh, mw) = config.size_at(config.apu_level);
    let apu = out.apu.map(|a| ApuIntermediates {
        enc_rows: tape.value(a.enc_rows).clone(),
        maps: tape.value(a.maps).clone(),
        pool: tape.value(a.pool).clone(),
        beta: tape.value(a.scores).clone(),
        cov: tape.value(a.cov).clone(),
        map_h: mh,
        map_w: mw,
    });
    Ok((tape.value(out.y_hat).clone(), apu))
}

// -- checkpoint format ---------------------------------------------------------
// magic "APNCKPT1" | u32-LE config JSON length | canonical config JSON |
// u32-LE tensor count | per tensor in lexicographic name order:
//   u32-LE name length | name UTF-8 | u32-LE rank | u32-LE dims |
//   f64-LE payload.

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let json = crate::data::to_canonical_json(config)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(json.len() as u32).to_le_bytes())?;
    f.write_all(json.as_bytes())?;
    f.write_all(&(tensors.len() as u32).to_le_bytes())?;
    // BTreeMap iterates in lexicographic key order.
    for (name, tensor) in tensors {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        f.write_all(&tensor.to_le_bytes())?;
    }
    Ok(())
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Model parameters only (training bookkeeping tensors stripped).
    pub fn model_params(&self) -> ModelParams {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("optim.") && !k.starts_with("train."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Errors unless the model tensor names match exactly what the embedded
    /// config builds.
    pub fn validate_names(&self) -> Result<()> {
        let expect = build(&self.config, 0)?;
        let got = self.model_params();
        let expect_names: Vec<&String> = expect.keys().collect();
        let got_names: Vec<&String> = got.keys().collect();
        if expect_names != got_names {
            return Err(Error::CheckpointMismatch(format!(
                "named-tensor set differs: config builds {expect_names:?}, checkpoint holds {got_names:?}"
            )));
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let display = path.display().to_string();
    let mut f = std::fs::File::open(path)?;
    let total = f.metadata()?.len();
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::TruncatedFile {
                path: display.clone(),
                expected: (*at + n) as u64,
                found: total,
            });
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let magic = take(&mut at, 8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic {
            path: display,
            expected: String::from_utf8_lossy(CKPT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let jlen = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let json = std::str::from_utf8(take(&mut at, jlen)?)
        .map_err(|_| Error::InvalidConfig("checkpoint config is not UTF-8".into()))?;
    let config: ModelConfig = serde_json::from_str(json)?;
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut at, nlen)?)
            .map_err(|_| Error::InvalidConfig("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut at, numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint { config, tensors })
}
