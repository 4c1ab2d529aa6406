//! Scratch: per-op timing of the criss-cross unit at 64x64.

use std::time::Instant;

use apn::apu::Encoding;
use apn::cau::{self, CauParams, OpCounter};
use apn::tape::Tape;
use apn::tensor::uniform;

fn main() {
    let mut rng = apn::substream(1, "bench");
    let (c, h, w) = (8usize, 64usize, 64usize);
    let cr = cau::reduced_channels(c, 8);
    let feat_t = uniform(vec![c, h, w], 1.0, &mut rng);
    let wq = uniform(vec![cr, c], 0.5, &mut rng);
    let wk = uniform(vec![cr, c], 0.5, &mut rng);
    let iters = 50;

    let mut tape = Tape::new();
    let fv = tape.constant(feat_t.clone());
    let feat = Encoding::new(&tape, fv).unwrap();
    let params = CauParams {
        w_q: tape.constant(wq.clone()),
        w_k: tape.constant(wk.clone()),
        w_v: tape.constant(uniform(vec![c, c], 0.5, &mut rng)),
        w_fuse: tape.constant(uniform(vec![c, 2 * c], 0.5, &mut rng)),
        temperature: 1.0,
    };

    // time cc_affinity (conv1x1 q/k + logits + softmax)
    let t0 = Instant::now();
    let mut aff_final = None;
    for _ in 0..iters {
        let mut counter = OpCounter::default();
        aff_final = Some(cau::cc_affinity(&mut tape, feat, &params, &mut counter).unwrap());
    }
    println!("cc_affinity total: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);

    let aff = aff_final.unwrap();
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = cau::cc_aggregate(&mut tape, feat, aff, &params).unwrap();
    }
    println!("cc_aggregate: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);

    // raw pieces
    let q = uniform(vec![cr, h, w], 1.0, &mut rng);
    let k = uniform(vec![cr, h, w], 1.0, &mut rng);
    let t0 = Instant::now();
    let mut lg = None;
    for _ in 0..iters {
        let qv = tape.constant(q.clone());
        let kv = tape.constant(k.clone());
        lg = Some(tape.cc_affinity_logits(qv, kv).unwrap().0);
    }
    println!("logits only: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);

    let lgv = lg.unwrap();
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = tape.softmax(lgv, 0).unwrap();
    }
    println!("softmax axis0: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);

    let v3 = tape.constant(uniform(vec![c, h, w], 1.0, &mut rng));
    let sm = tape.softmax(lgv, 0).unwrap();
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = tape.cc_mix(v3, sm).unwrap();
    }
    println!("cc_mix only: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);
}
