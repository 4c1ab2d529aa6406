//! Circulative attention: criss-cross (row + column) attention applied
//! recurrently with shared parameters, plus the dense non-local baseline it
//! is measured against.
//!
//! Each position attends to the h + w - 1 positions sharing its row or
//! column (itself counted once). One loop propagates information along the
//! attention paths; two loops reach the full grid. The loops reuse one
//! parameter set, so parameter count is independent of R. A live counter
//! tracks query-key dot products: R*h*w*(h+w-1) for the recurrent path
//! against (h*w)^2 for dense attention.

use std::time::Instant;

use crate::apu::Encoding;
use crate::tape::{Tape, Var};
use crate::tensor::uniform;
use crate::{Error, Result};

/// 1x1-conv weights of the unit. Q/K project c -> c' with
/// c' = max(1, c / reduction); V keeps c; the fusion maps the concatenated
/// 2c channels back to c. No biases.
#[derive(Debug, Clone, Copy)]
pub struct CauParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_fuse: Var,
    /// Multiplier on affinity logits (1.0 = unscaled dot products).
    pub temperature: f64,
}

/// Channel width of the Q/K projections.
pub fn reduced_channels(c: usize, reduction: usize) -> usize {
    (c / reduction).max(1)
}

/// Counts query-key dot products performed by attention forward passes.
/// Monotone non-decreasing within a pass.
#[derive(Debug, Default, Clone, Copy)]
pub struct OpCounter {
    pub affinity_ops: u64,
}

impl OpCounter {
    pub fn add(&mut self, n: u64) {
        self.affinity_ops += n;
    }
}

fn conv1x1(tape: &mut Tape, feat: Encoding, weight: Var) -> Result<Var> {
    let ws = tape.value(weight).shape().to_vec();
    if ws.len() != 2 || ws[1] != feat.c {
        return Err(Error::ShapeMismatch {
            op: "cau::conv1x1",
            detail: format!("weight {ws:?} vs c = {}", feat.c),
        });
    }
    let flat = tape.reshape(feat.var, vec![feat.c, feat.h * feat.w])?;
    let out = tape.matmul(weight, flat)?;
    tape.reshape(out, vec![ws[0], feat.h, feat.w])
}

/// Affinity of every position against its row/column keys, softmax-normalized
/// over the h + w - 1 keys. Increments the counter by the dot products done.
pub fn cc_affinity(
    tape: &mut Tape,
    feat: Encoding,
    params: &CauParams,
    counter: &mut OpCounter,
) -> Result<Var> {
    let q = conv1x1(tape, feat, params.w_q)?;
    let k = conv1x1(tape, feat, params.w_k)?;
    let (logits, dots) = tape.cc_affinity_logits(q, k)?;
    counter.add(dots);
    let scaled = if params.temperature != 1.0 {
        tape.scale(logits, params.temperature)?
    } else {
        logits
    };
    tape.softmax(scaled, 0)
}

/// Aggregates V along the criss-cross paths and adds the input back:
/// out_u = sum_t A[t, u] V_{key_t(u)} + feat_u.
pub fn cc_aggregate(
    tape: &mut Tape,
    feat: Encoding,
    affinity: Var,
    params: &CauParams,
) -> Result<Var> {
    let v = conv1x1(tape, feat, params.w_v)?;
    let mixed = tape.cc_mix(v, affinity)?;
    tape.add(mixed, feat.var)
}

/// R criss-cross loops with shared parameters, before fusion. Exposed so the
/// receptive-field structure can be probed without the concat (which
/// reintroduces the input's own channels).
pub fn rca_context(
    tape: &mut Tape,
    feat: Encoding,
    params: &CauParams,
    loops: usize,
    counter: &mut OpCounter,
) -> Result<Var> {
    if loops == 0 {
        return Err(Error::InvalidConfig("rca needs R >= 1".into()));
    }
    let mut cur = feat;
    for _ in 0..loops {
        let aff = cc_affinity(tape, cur, params, counter)?;
        let next = cc_aggregate(tape, cur, aff, params)?;
        cur = Encoding { var: next, ..cur };
    }
    Ok(cur.var)
}

/// Full unit: R shared-parameter loops, then concat with the original input
/// and a 1x1 fusion conv back to c channels.
pub fn rca_forward(
    tape: &mut Tape,
    feat: Encoding,
    params: &CauParams,
    loops: usize,
    counter: &mut OpCounter,
) -> Result<Var> {
    let context = rca_context(tape, feat, params, loops, counter)?;
    let ctx_enc = Encoding::new(tape, context)?;
    fuse(tape, ctx_enc, feat, params)
}

fn fuse(tape: &mut Tape, context: Encoding, feat: Encoding, params: &CauParams) -> Result<Var> {
    let cat = tape.concat_c(context.var, feat.var)?;
    let cat_enc = Encoding::new(tape, cat)?;
    conv1x1(tape, cat_enc, params.w_fuse)
}

/// Dense (non-local) attention baseline: every position attends to every
/// position with the same Q/K/V parameterization, residual add, then the
/// same concat + fuse. Increments the counter by (h*w)^2.
pub fn dense_attention_forward(
    tape: &mut Tape,
    feat: Encoding,
    params: &CauParams,
    counter: &mut OpCounter,
) -> Result<Var> {
    let context = dense_context(tape, feat, params, counter)?;
    let ctx_enc = Encoding::new(tape, context)?;
    fuse(tape, ctx_enc, feat, params)
}

/// Pre-fusion dense attention: out_u = sum_v A[u, v] V_v + feat_u.
pub fn dense_context(
    tape: &mut Tape,
    feat: Encoding,
    params: &CauParams,
    counter: &mut OpCounter,
) -> Result<Var> {
    let q = conv1x1(tape, feat, params.w_q)?;
    let k = conv1x1(tape, feat, params.w_k)?;
    let v = conv1x1(tape, feat, params.w_v)?;
    let n = feat.h * feat.w;
    let cq = tape.value(q).shape()[0];
    let q2 = tape.reshape(q, vec![cq, n])?;
    let k2 = tape.reshape(k, vec![cq, n])?;
    let qt = tape.transpose2d(q2)?; // N x c'
    let logits = tape.matmul(qt, k2)?; // N x N, one dot per entry
    counter.add((n * n) as u64);
    let scaled = if params.temperature != 1.0 {
        tape.scale(logits, params.temperature)?
    } else {
        logits
    };
    let att = tape.softmax(scaled, 1)?; // per query row
    let v2 = tape.reshape(v, vec![feat.c, n])?;
    let att_t = tape.transpose2d(att)?; // keys x queries
    let mixed = tape.matmul(v2, att_t)?; // c x N
    let mixed3 = tape.reshape(mixed, vec![feat.c, feat.h, feat.w])?;
    tape.add(mixed3, feat.var)
}

/// Counter values and wall times for one grid size, as written to the
/// benchmark CSV.
#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub h: usize,
    pub w: usize,
    pub loops: usize,
    pub cc_ops: u64,
    pub dense_ops: u64,
    pub cc_analytic: u64,
    pub dense_analytic: u64,
    pub ratio: f64,
    pub wall_time_cc: f64,
    pub wall_time_dense: f64,
}

impl ComplexityReport {
    pub fn counters_match(&self) -> bool {
        self.cc_ops == self.cc_analytic && self.dense_ops == self.dense_analytic
    }
}

/// Runs both attention paths on a random c=8 map of the given size and
/// reports live counters beside the analytic predictions
/// R*h*w*(h+w-1) and (h*w)^2.
pub fn complexity_report(h: usize, w: usize, loops: usize, seed: u64) -> Result<ComplexityReport> {
    let mut rng = crate::substream(seed, "bench");
    let c = 8;
    let cr = reduced_channels(c, 8);
    let feat_t = uniform(vec![c, h, w], 1.0, &mut rng);
    let w_q = uniform(vec![cr, c], 0.5, &mut rng);
    let w_k = uniform(vec![cr, c], 0.5, &mut rng);
    let w_v = uniform(vec![c, c], 0.5, &mut rng);
    let w_fuse = uniform(vec![c, 2 * c], 0.5, &mut rng);

    let run = |dense: bool| -> Result<(u64, f64)> {
        let mut tape = Tape::new();
        let fv = tape.constant(feat_t.clone());
        let feat = Encoding::new(&tape, fv)?;
        let params = CauParams {
            w_q: tape.constant(w_q.clone()),
            w_k: tape.constant(w_k.clone()),
            w_v: tape.constant(w_v.clone()),
            w_fuse: tape.constant(w_fuse.clone()),
            temperature: 1.0,
        };
        let mut counter = OpCounter::default();
        let start = Instant::now();
        if dense {
            dense_attention_forward(&mut tape, feat, &params, &mut counter)?;
        } else {
            rca_forward(&mut tape, feat, &params, loops, &mut counter)?;
        }
        Ok((counter.affinity_ops, start.elapsed().as_secs_f64()))
    };

    let (cc_ops, wall_time_cc) = run(false)?;
    let (dense_ops, wall_time_dense) = run(true)?;
    let hw = (h * w) as u64;
    Ok(ComplexityReport {
        h,
        w,
        loops,
        cc_ops,
        dense_ops,
        cc_analytic: loops as u64 * hw * (h + w - 1) as u64,
        dense_analytic: hw * hw,
        ratio: cc_ops as f64 / dense_ops as f64,
        wall_time_cc,
        wall_time_dense,
    })
}
