//! Command-line front end: data generation, two-phase training, scoring,
//! ROC evaluation, gradient checking, attention benchmarking, and normalcy
//! map export. Every command is deterministic given its flags and seed,
//! and writes a run manifest beside its outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use apn::backbone::{self, ModelConfig};
use apn::cau;
use apn::data::{self, DatasetSpec};
use apn::losses::{LossVariants, LossWeights};
use apn::scoring::{self, ScoreConfig};
use apn::train::{self, OptimState, Phase, TrainPlan};
use apn::{Error, Result};

/// Full resolved configuration: model, objective, scoring, training.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
struct RunConfig {
    model: ModelConfig,
    loss_weights: LossWeights,
    loss_variants: LossVariants,
    scoring: ScoreConfig,
    train: TrainParams,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TrainParams {
    pretrain_epochs: usize,
    finetune_epochs: usize,
    batch_size: usize,
    /// None takes the phase defaults (1e-4 pretrain, 1e-5 finetune).
    pretrain_lr: Option<f64>,
    finetune_lr: Option<f64>,
    weight_decay: f64,
    grad_clip: Option<f64>,
    ckpt_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            pretrain_epochs: 20,
            finetune_epochs: 10,
            batch_size: 4,
            pretrain_lr: None,
            finetune_lr: None,
            weight_decay: 1e-4,
            grad_clip: Some(10.0),
            ckpt_every: 5,
        }
    }
}


#[derive(Parser)]
#[command(name = "apn", version, about = "Attention-prototype video anomaly detection")]
struct Cli {
    /// Root seed; all randomness derives from it through named sub-streams.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Both,
    Pretrain,
    Apu,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModuleArg {
    Apu,
    Cau,
    Losses,
    E2e,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (default desk spec unless --spec given).
    GenData {
        /// JSON DatasetSpec file; omitted = built-in desk spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model (pretrain, apu finetune, or both phases).
    Train {
        /// JSON RunConfig; omitted = defaults (see print-config).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        phase: PhaseArg,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the test split of a dataset with a checkpoint.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Balance weight between prediction and feature cues.
        #[arg(long)]
        lambda_s: Option<f64>,
    },
    /// Compute ROC-AUC from a scores CSV.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average per-video AUCs instead of one global curve.
        #[arg(long)]
        per_video: bool,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
        /// Number of seeds per module.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Benchmark criss-cross vs dense attention op counts and wall time.
    BenchAttn {
        /// Comma-separated HxW sizes, e.g. 8x8,16x16,16x32.
        #[arg(long, default_value = "8x8,16x16,16x32")]
        sizes: String,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export APU normalcy maps for one frame as PGM heatmaps.
    ExportMaps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Target frame index within the video (>= T).
        #[arg(long)]
        frame: usize,
        /// Video id; default = first test video.
        #[arg(long)]
        video: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the full default configuration as canonical JSON.
    PrintConfig,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    version: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_time_secs: f64,
    status: String,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidSpec(_)
        | Error::CheckpointMismatch(_)
        | Error::BadMagic { .. }
        | Error::TruncatedFile { .. } => 2,
        Error::NonFiniteLoss { .. } => 3,
        Error::SingleClass { .. } => 4,
        _ => 1,
    }
}

fn env_threads() -> usize {
    std::env::var("APN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn main() {
    let cli = Cli::parse();
    let started = Instant::now();
    let seed = cli.seed;
    let (label, manifest_dir, config_json, inputs, outputs, result) = dispatch(&cli.command, seed);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    let manifest = RunManifest {
        command: label,
        config: config_json,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs,
        outputs,
        wall_time_secs: started.elapsed().as_secs_f64(),
        status,
    };
    if let Some(dir) = manifest_dir {
        let _ = std::fs::create_dir_all(&dir);
        let _ = data::write_canonical_json(&dir.join("run_manifest.json"), &manifest);
    }
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

type Dispatch = (
    String,
    Option<PathBuf>,
    serde_json::Value,
    Vec<String>,
    Vec<String>,
    Result<()>,
);

fn dispatch(command: &Command, seed: u64) -> Dispatch {
    let null = serde_json::Value::Null;
    match command {
        Command::GenData { spec, out } => {
            let result = cmd_gen_data(spec.as_deref(), out, seed);
            let cfg = spec
                .as_deref()
                .and_then(|p| std::fs::read_to_string(p).ok())
                .and_then(|s| serde_json::from_str(&s).ok())
                .unwrap_or(null);
            (
                "gen-data".into(),
                Some(out.clone()),
                cfg,
                spec.iter().map(|p| p.display().to_string()).collect(),
                vec![out.display().to_string()],
                result,
            )
        }
        Command::Train { config, data, out, phase, resume } => {
            let loaded = load_run_config(config.as_deref());
            let cfg_json = loaded
                .as_ref()
                .ok()
                .and_then(|c| serde_json::to_value(c).ok())
                .unwrap_or(null);
            let result =
                loaded.and_then(|cfg| cmd_train(&cfg, data, out, *phase, resume.as_deref(), seed));
            (
                "train".into(),
                Some(out.clone()),
                cfg_json,
                vec![data.display().to_string()],
                vec![out.display().to_string()],
                result,
            )
        }
        Command::Score { ckpt, data, out, lambda_s } => {
            let result = cmd_score(ckpt, data, out, *lambda_s);
            let dir = out.parent().map(|p| p.to_path_buf()).unwrap_or_else(|| PathBuf::from("."));
            (
                "score".into(),
                Some(dir),
                null,
                vec![ckpt.display().to_string(), data.display().to_string()],
                vec![out.display().to_string()],
                result,
            )
        }
        Command::Eval { scores, out, per_video } => {
            let result = cmd_eval(scores, out, *per_video);
            let dir = out.parent().map(|p| p.to_path_buf()).unwrap_or_else(|| PathBuf::from("."));
            (
                "eval".into(),
                Some(dir),
                null,
                vec![scores.display().to_string()],
                vec![out.display().to_string()],
                result,
            )
        }
        Command::Gradcheck { module, seeds } => {
            let result = cmd_gradcheck(*module, *seeds, seed);
            ("gradcheck".into(), None, null, vec![], vec![], result)
        }
        Command::BenchAttn { sizes, r, out } => {
            let result = cmd_bench(sizes, *r, out, seed);
            let dir = out.parent().map(|p| p.to_path_buf()).unwrap_or_else(|| PathBuf::from("."));
            (
                "bench-attn".into(),
                Some(dir),
                null,
                vec![],
                vec![out.display().to_string()],
                result,
            )
        }
        Command::ExportMaps { ckpt, data, frame, video, out } => {
            let result = cmd_export_maps(ckpt, data, *frame, video.as_deref(), out);
            (
                "export-maps".into(),
                Some(out.clone()),
                null,
                vec![ckpt.display().to_string(), data.display().to_string()],
                vec![out.display().to_string()],
                result,
            )
        }
        Command::PrintConfig => {
            let result = (|| -> Result<()> {
                println!("{}", data::to_canonical_json(&RunConfig::default())?);
                Ok(())
            })();
            ("print-config".into(), None, null, vec![], vec![], result)
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    cfg.model.validate()?;
    Ok(cfg)
}

fn cmd_gen_data(spec: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<DatasetSpec>(&text)
                .map_err(|e| Error::InvalidSpec(format!("{}: {e}", p.display())))?
        }
        None => DatasetSpec::default_desk(seed),
    };
    let manifest = data::generate_dataset(&spec, out)?;
    println!(
        "wrote {} videos ({} train, {} test) under {}",
        manifest.videos.len(),
        manifest.videos.iter().filter(|v| v.split == "train").count(),
        manifest.videos.iter().filter(|v| v.split == "test").count(),
        out.display()
    );
    Ok(())
}

fn load_train_samples(dir: &Path, t_window: usize) -> Result<Vec<data::ClipSample>> {
    let manifest = data::load_manifest(dir)?;
    let videos = data::load_split(dir, &manifest, "train")?;
    let mut samples = Vec::new();
    for v in &videos {
        samples.extend(data::window(v, t_window)?);
    }
    Ok(samples)
}

fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    phase: PhaseArg,
    resume: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let threads = env_threads();
    let samples = load_train_samples(data_dir, cfg.model.t_window)?;
    let target_phase = match phase {
        PhaseArg::Apu => Phase::ApuFinetune,
        _ => Phase::Pretrain,
    };
    let (mut params, mut optim, mut epochs_done) = match resume {
        Some(p) => {
            let ck = backbone::load_checkpoint(p)?;
            if ck.config != cfg.model {
                return Err(Error::CheckpointMismatch(
                    "checkpoint config differs from run config".into(),
                ));
            }
            let (params, optim, ck_phase, done) = train::split_checkpoint(&ck.tensors);
            if ck_phase == target_phase {
                // Same phase: continue mid-phase.
                (params, optim, done)
            } else {
                // Different phase: take the weights, start the phase fresh.
                let optim = OptimState::new(&params);
                (params, optim, 0)
            }
        }
        None => {
            let params = backbone::build(&cfg.model, seed)?;
            let optim = OptimState::new(&params);
            (params, optim, 0)
        }
    };

    let plan_for = |ph: Phase, epochs: usize, lr: Option<f64>| -> TrainPlan {
        let mut plan = TrainPlan::new(ph, epochs, seed);
        plan.batch_size = cfg.train.batch_size;
        plan.lr = lr;
        plan.weight_decay = cfg.train.weight_decay;
        plan.grad_clip = cfg.train.grad_clip;
        plan.ckpt_every = cfg.train.ckpt_every;
        plan
    };

    if phase != PhaseArg::Apu {
        let plan = plan_for(Phase::Pretrain, cfg.train.pretrain_epochs, cfg.train.pretrain_lr);
        let outcome = train::run_phase(
            &plan,
            &cfg.model,
            params,
            optim,
            epochs_done,
            &samples,
            &cfg.loss_weights,
            &cfg.loss_variants,
            out,
            threads,
        )?;
        params = outcome.params;
        optim = if phase == PhaseArg::Both {
            // The finetune phase starts with fresh optimizer statistics.
            OptimState::new(&params)
        } else {
            outcome.optim
        };
        epochs_done = 0;
        println!("pretrain done: {}", outcome.final_checkpoint.display());
        if phase == PhaseArg::Pretrain {
            return Ok(());
        }
    }
    if !cfg.model.apu_enabled {
        return Err(Error::InvalidConfig(
            "apu finetune phase requires apu_enabled = true".into(),
        ));
    }
    let plan = plan_for(Phase::ApuFinetune, cfg.train.finetune_epochs, cfg.train.finetune_lr);
    let outcome = train::run_phase(
        &plan,
        &cfg.model,
        params,
        optim,
        if phase == PhaseArg::Apu { epochs_done } else { 0 },
        &samples,
        &cfg.loss_weights,
        &cfg.loss_variants,
        out,
        threads,
    )?;
    let final_path = out.join("ckpt_final.ckpt");
    backbone::save_checkpoint(
        &final_path,
        &cfg.model,
        &train::checkpoint_tensors(
            &outcome.params,
            &outcome.optim,
            Phase::ApuFinetune,
            outcome.epochs_done,
        ),
    )?;
    println!("finetune done: {}", final_path.display());
    Ok(())
}

/// Scores every test video with the checkpoint; records cover frames T..end.
fn score_records(
    ckpt_path: &Path,
    data_dir: &Path,
    lambda_s: Option<f64>,
) -> Result<Vec<scoring::ScoreRecord>> {
    let ck = backbone::load_checkpoint(ckpt_path)?;
    ck.validate_names()?;
    let config = ck.config.clone();
    let params = ck.model_params();
    let manifest = data::load_manifest(data_dir)?;
    let videos = data::load_split(data_dir, &manifest, "test")?;
    let cfg = ScoreConfig { lambda_s: lambda_s.unwrap_or(1.0), ..Default::default() };

    let mut records = Vec::new();
    for video in &videos {
        let samples = data::window(video, config.t_window)?;
        let mut psnrs = Vec::with_capacity(samples.len());
        let mut feats = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        for s in &samples {
            let (y_hat, apu) = backbone::predict(&config, &params, &s.inputs)?;
            psnrs.push(scoring::psnr(&y_hat, &s.target)?);
            feats.push(match &apu {
                Some(a) => scoring::feature_error(&a.enc_rows, &a.pool, &a.beta)?,
                None => 0.0,
            });
            labels.push(s.label);
        }
        let first_index = samples.first().map(|s| s.frame_index).unwrap_or(0);
        let mut recs = scoring::video_records(&video.id, first_index, &psnrs, &feats, &labels, &cfg)?;
        if !config.apu_enabled {
            // Prediction cue only; the balance weight has nothing to weigh.
            for r in &mut recs {
                r.combined = r.pred_score;
            }
        }
        records.extend(recs);
    }
    Ok(records)
}

fn cmd_score(ckpt: &Path, data_dir: &Path, out: &Path, lambda_s: Option<f64>) -> Result<()> {
    let records = score_records(ckpt, data_dir, lambda_s)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    scoring::write_scores_csv(out, &records)?;
    println!("wrote {} score records to {}", records.len(), out.display());
    Ok(())
}

fn cmd_eval(scores: &Path, out: &Path, per_video: bool) -> Result<()> {
    let records = scoring::read_scores_csv(scores)?;
    let cfg = ScoreConfig { per_video_auc: per_video, ..Default::default() };
    let curve = scoring::evaluate(&records, &cfg)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, scoring::auc_report_json(&curve)? + "\n")?;
    println!("auc {:.6} ({} pos / {} neg)", curve.auc, curve.n_pos, curve.n_neg);
    Ok(())
}

type ModuleCheck = fn(u64) -> Result<apn::gradcheck::CheckReport>;

fn cmd_gradcheck(module: ModuleArg, seeds: u64, seed: u64) -> Result<()> {
    use apn::gradcheck::harness;
    let mods: Vec<(&str, ModuleCheck)> = match module {
        ModuleArg::Apu => vec![("apu", harness::check_apu)],
        ModuleArg::Cau => vec![("cau", harness::check_cau)],
        ModuleArg::Losses => vec![("losses", harness::check_losses)],
        ModuleArg::E2e => vec![("e2e", harness::check_e2e)],
        ModuleArg::All => vec![
            ("apu", harness::check_apu),
            ("cau", harness::check_cau),
            ("losses", harness::check_losses),
            ("e2e", harness::check_e2e),
        ],
    };
    let mut all_ok = true;
    for (name, check) in mods {
        let mut worst_err: f64 = 0.0;
        let mut worst_desc = String::new();
        let mut ok = true;
        for s in 0..seeds {
            let report = check(seed + s)?;
            ok &= report.passed();
            if let Some(w) = report.worst() {
                if w.max_rel_error > worst_err {
                    worst_err = w.max_rel_error;
                    worst_desc = format!(
                        "{}[{}] analytic {:e} vs numeric {:e}",
                        w.name, w.worst_index, w.analytic, w.numeric
                    );
                }
            }
        }
        println!(
            "{}: {} over {} seeds, worst rel err {:.3e} at {}",
            name,
            if ok { "PASS" } else { "FAIL" },
            seeds,
            worst_err,
            worst_desc
        );
        all_ok &= ok;
    }
    if !all_ok {
        eprintln!("gradient check failed");
        std::process::exit(5);
    }
    Ok(())
}

fn cmd_bench(sizes: &str, loops: usize, out: &Path, seed: u64) -> Result<()> {
    let mut reports = Vec::new();
    for token in sizes.split(',') {
        let (h, w) = token
            .trim()
            .split_once('x')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| Error::InvalidConfig(format!("bad size {token:?}, want HxW")))?;
        reports.push(cau::complexity_report(h, w, loops, seed)?);
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut text = String::from("h,w,R,cc_ops,dense_ops,wall_time_cc,wall_time_dense\n");
    for r in &reports {
        if !r.counters_match() {
            return Err(Error::InvalidConfig(format!(
                "op counter mismatch at {}x{}: cc {} vs analytic {}, dense {} vs analytic {}",
                r.h, r.w, r.cc_ops, r.cc_analytic, r.dense_ops, r.dense_analytic
            )));
        }
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.h, r.w, r.loops, r.cc_ops, r.dense_ops, r.wall_time_cc, r.wall_time_dense
        ));
        println!(
            "{}x{} R={}: cc_ops {} dense_ops {} ratio {:.4}",
            r.h, r.w, r.loops, r.cc_ops, r.dense_ops, r.ratio
        );
    }
    std::fs::write(out, text)?;
    Ok(())
}

fn cmd_export_maps(
    ckpt: &Path,
    data_dir: &Path,
    frame: usize,
    video_id: Option<&str>,
    out: &Path,
) -> Result<()> {
    let ck = backbone::load_checkpoint(ckpt)?;
    ck.validate_names()?;
    let config = ck.config.clone();
    if !config.apu_enabled {
        return Err(Error::InvalidConfig("checkpoint has no attention prototype unit".into()));
    }
    let params = ck.model_params();
    let manifest = data::load_manifest(data_dir)?;
    let videos = data::load_split(data_dir, &manifest, "test")?;
    let video = match video_id {
        Some(id) => videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::InvalidSpec(format!("video {id:?} not in test split")))?,
        None => videos
            .first()
            .ok_or_else(|| Error::InvalidSpec("dataset has no test videos".into()))?,
    };
    let samples = data::window(video, config.t_window)?;
    let sample = samples
        .iter()
        .find(|s| s.frame_index == frame)
        .ok_or_else(|| {
            Error::InvalidSpec(format!(
                "frame {frame} not scorable (valid range {}..{})",
                config.t_window,
                video.frames.len()
            ))
        })?;
    let (_, apu) = backbone::predict(&config, &params, &sample.inputs)?;
    let apu = apu.expect("apu enabled");
    let files = apn::apu::export_normalcy_maps(&apu.maps, apu.map_h, apu.map_w, out)?;
    println!("wrote {} maps to {}", files.len(), out.display());
    Ok(())
}
