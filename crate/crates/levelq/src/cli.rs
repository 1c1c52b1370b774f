//! Command implementations behind the `levelq` binary: baseline training,
//! quantization runs, evaluation, artifact inspection and report emission.
//!
//! Every run directory gets a flat `run.config` key-value file recording the
//! resolved settings; command-line flags override keys loaded from an
//! optional `--config` file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;

use crate::arch;
use crate::checkpoint;
use crate::clustering::{InitMode, TCentroidKind, TCentroidSpec};
use crate::codec;
use crate::data::{load_dataset, synth, DataFormat, Dataset};
use crate::error::{LqError, Result};
use crate::manifest::{RoundRecord, RunManifest};
use crate::partition::{append_eq_csv, EqEstimator, PartitionPlan, EQ_CSV_HEADER};
use crate::quantizer::{
    frozen_fraction, run_quantization_with, verify_quantized, QuantConfig, QuantMode,
};
use crate::train::{evaluate, train, LrSchedule, TrainConfig};

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "LEVELQ_DATA_ROOT";

pub const EQ_CSV_FILE: &str = "eq_rounds.csv";
pub const RUN_CONFIG_FILE: &str = "run.config";
pub const BASELINE_CKPT: &str = "baseline.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const ENCODED_MODEL_FILE: &str = "model.lqm";

// ── flat key-value config files ───────────────────────────────────────

pub mod config_file {
    use super::*;

    pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LqError::format(ln, format!("expected 'key = value': {line}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<BTreeMap<String, String>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LqError::argument(format!("cannot read config {}: {e}", path.display())))?;
        parse(&text)
    }

    pub fn save(path: &Path, map: &BTreeMap<String, String>) -> Result<()> {
        let mut s = String::new();
        for (k, v) in map {
            let _ = writeln!(s, "{k} = {v}");
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

// ── shared dataset options ────────────────────────────────────────────

#[derive(Args, Debug, Clone)]
pub struct DataOpts {
    /// Dataset directory; falls back to $LEVELQ_DATA_ROOT.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Dataset format: cifar-binary, idx-images or synth.
    #[arg(long, default_value = "synth")]
    pub format: String,

    /// Cap the training set at N samples (seeded selection).
    #[arg(long)]
    pub subset: Option<usize>,

    /// Training samples generated for the synth format.
    #[arg(long, default_value_t = 5000)]
    pub synth_train: usize,

    /// Test samples generated for the synth format.
    #[arg(long, default_value_t = 1000)]
    pub synth_test: usize,
}

impl DataOpts {
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let format = DataFormat::parse(&self.format)?;
        let (mut train, test) = match format {
            DataFormat::Synth => synth::generate(self.synth_train, self.synth_test, seed),
            _ => {
                let root = self
                    .data
                    .clone()
                    .or_else(|| std::env::var(DATA_ROOT_ENV).ok().map(PathBuf::from))
                    .ok_or_else(|| {
                        LqError::argument(format!("--data not given and ${DATA_ROOT_ENV} unset"))
                    })?;
                if !root.exists() {
                    return Err(LqError::argument(format!("data path {} does not exist", root.display())));
                }
                load_dataset(&root, format)?
            }
        };
        if let Some(n) = self.subset {
            train = train.subset(n, seed);
        }
        Ok((train, test))
    }

    fn describe(&self, pairs: &mut BTreeMap<String, String>) {
        pairs.insert("format".into(), self.format.clone());
        if let Some(d) = &self.data {
            pairs.insert("data".into(), d.display().to_string());
        }
        if let Some(n) = self.subset {
            pairs.insert("subset".into(), n.to_string());
        }
        if self.format == "synth" {
            pairs.insert("synth_train".into(), self.synth_train.to_string());
            pairs.insert("synth_test".into(), self.synth_test.to_string());
        }
    }
}

// ── train ─────────────────────────────────────────────────────────────

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataOpts,

    /// Architecture: light-cnn, mlp or resnet20-lite.
    #[arg(long, default_value = "light-cnn")]
    pub arch: String,

    #[arg(long, default_value_t = 20)]
    pub epochs: usize,

    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,

    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,

    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f32,

    /// Learning-rate multiplier applied every --lr-decay-interval epochs.
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay: f64,

    #[arg(long, default_value_t = 8)]
    pub lr_decay_interval: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Output directory for the checkpoint and logs.
    #[arg(long, default_value = "runs/baseline")]
    pub out: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (train_set, test_set) = args.data.load(args.seed)?;
    let mut net = arch::by_name(&args.arch, &train_set.sample_shape, 10.max(train_set.num_classes()), args.seed)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        batch_size: args.batch_size,
        epochs_per_iteration: args.epochs,
        lr_schedule: LrSchedule::StepDecay { factor: args.lr_decay, interval: args.lr_decay_interval },
    };
    std::fs::create_dir_all(&args.out)?;

    println!(
        "training {} on {} samples ({} test), {} epochs",
        args.arch,
        train_set.len(),
        test_set.len(),
        args.epochs
    );
    let stats = train(&mut net, &train_set, &cfg, args.seed)?;
    let mut log = String::from("epoch,lr,loss,accuracy\n");
    for s in &stats {
        let _ = writeln!(log, "{},{:.6e},{:.6},{:.6}", s.epoch, s.lr, s.loss, s.accuracy);
        println!("epoch {:>3}: loss {:.4} accuracy {:.4} (lr {:.2e})", s.epoch, s.loss, s.accuracy, s.lr);
    }
    std::fs::write(args.out.join("train_log.csv"), log)?;

    let (test_loss, test_acc) = evaluate(&net, &test_set, 256)?;
    println!("test: loss {test_loss:.4} accuracy {test_acc:.4}");

    checkpoint::save_network(&net, &args.out.join(BASELINE_CKPT))?;

    let mut pairs = BTreeMap::new();
    pairs.insert("command".into(), "train".into());
    pairs.insert("arch".into(), args.arch.clone());
    pairs.insert("epochs".into(), args.epochs.to_string());
    pairs.insert("batch_size".into(), args.batch_size.to_string());
    pairs.insert("lr".into(), args.lr.to_string());
    pairs.insert("momentum".into(), args.momentum.to_string());
    pairs.insert("weight_decay".into(), args.weight_decay.to_string());
    pairs.insert("seed".into(), args.seed.to_string());
    pairs.insert("test_accuracy".into(), format!("{test_acc:.6}"));
    args.data.describe(&mut pairs);
    config_file::save(&args.out.join(RUN_CONFIG_FILE), &pairs)?;
    println!("wrote {}", args.out.join(BASELINE_CKPT).display());
    Ok(())
}

// ── quantize ──────────────────────────────────────────────────────────

#[derive(Args, Debug, Clone)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub data: DataOpts,

    /// Baseline checkpoint produced by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Optional flat key-value config file; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Quantization mode: slq, eslq or mlq.
    #[arg(long)]
    pub mode: Option<String>,

    /// Codeword bit width b (codebook size 2^(b-1)+1).
    #[arg(long)]
    pub bits: Option<u32>,

    /// Per-round quantize counts, e.g. 5,4,4,2,2.
    #[arg(long)]
    pub plan: Option<String>,

    /// EQ estimator: loss or sse.
    #[arg(long)]
    pub eq: Option<String>,

    /// ESLQ t-centroid type: pow2 or sci2.
    #[arg(long)]
    pub t_type: Option<String>,

    /// ESLQ L1 strength.
    #[arg(long)]
    pub beta: Option<f32>,

    /// MLQ: share the heart cluster at its mean instead of zero.
    #[arg(long)]
    pub keep_heart: bool,

    /// Centroid initialization: linear or exponential.
    #[arg(long)]
    pub init: Option<String>,

    #[arg(long)]
    pub epochs_per_iter: Option<usize>,

    #[arg(long)]
    pub lr: Option<f32>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Calibration batch size for EQ measurement.
    #[arg(long)]
    pub calibration: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, default_value = "runs/quantize")]
    pub out: PathBuf,
}

struct Resolved {
    quant: QuantConfig,
    seed: u64,
    pairs: BTreeMap<String, String>,
}

fn resolve_quant_settings(args: &QuantizeArgs) -> Result<Resolved> {
    let file = match &args.config {
        Some(p) => config_file::load(p)?,
        None => BTreeMap::new(),
    };
    let get = |flag: Option<String>, key: &str| -> Option<String> {
        flag.or_else(|| file.get(key).cloned())
    };

    let mode_s = get(args.mode.clone(), "mode").unwrap_or_else(|| "slq".into());
    let mode = QuantMode::parse(&mode_s)?;
    let bits = match get(args.bits.map(|b| b.to_string()), "bits") {
        Some(s) => s.parse::<u32>().map_err(|_| LqError::argument(format!("bad bits '{s}'")))?,
        None => match mode {
            QuantMode::Mlq => 2,
            _ => 5,
        },
    };
    let plan = match get(args.plan.clone(), "plan") {
        Some(s) => Some(PartitionPlan::parse(&s)?),
        None => None,
    };
    let eq = match get(args.eq.clone(), "eq") {
        Some(s) => EqEstimator::parse(&s)?,
        None => EqEstimator::LossDelta,
    };
    let init_mode = match get(args.init.clone(), "init").as_deref() {
        None | Some("exponential") => InitMode::Exponential,
        Some("linear") => InitMode::Linear,
        Some(other) => return Err(LqError::argument(format!("unknown init mode '{other}'"))),
    };
    let t_spec = match get(args.t_type.clone(), "t_type").as_deref() {
        None => None,
        Some("pow2") => Some(TCentroidKind::PowerOfTwoOrZero),
        Some("sci2") => Some(TCentroidKind::Scientific2Sig),
        Some(other) => return Err(LqError::argument(format!("unknown t-centroid type '{other}'"))),
    }
    .map(|kind| {
        let beta = args
            .beta
            .or_else(|| file.get("beta").and_then(|s| s.parse().ok()))
            .unwrap_or(1.0);
        TCentroidSpec::new(kind, beta)
    })
    .transpose()?;
    let seed = match get(args.seed.map(|s| s.to_string()), "seed") {
        Some(s) => s.parse::<u64>().map_err(|_| LqError::argument(format!("bad seed '{s}'")))?,
        None => 0,
    };
    let parse_or = |flag: Option<String>, key: &str, default: f64| -> Result<f64> {
        match get(flag, key) {
            Some(s) => s.parse().map_err(|_| LqError::argument(format!("bad {key} '{s}'"))),
            None => Ok(default),
        }
    };
    let retrain = TrainConfig {
        learning_rate: parse_or(args.lr.map(|v| v.to_string()), "lr", 0.01)? as f32,
        momentum: 0.9,
        weight_decay: 5e-4,
        batch_size: parse_or(args.batch_size.map(|v| v.to_string()), "batch_size", 64.0)? as usize,
        epochs_per_iteration: parse_or(
            args.epochs_per_iter.map(|v| v.to_string()),
            "epochs_per_iter",
            3.0,
        )? as usize,
        lr_schedule: LrSchedule::StepDecay { factor: 0.5, interval: 2 },
    };
    let zero_heart = if args.keep_heart {
        false
    } else {
        file.get("zero_heart").map_or(true, |v| v != "false")
    };
    let calibration_size = parse_or(args.calibration.map(|v| v.to_string()), "calibration", 256.0)? as usize;

    let quant = QuantConfig {
        bits,
        mode,
        plan,
        t_spec,
        eq_estimator: eq,
        retrain,
        zero_heart,
        init_mode,
        calibration_size,
        seed,
    };
    quant.validate()?;

    let mut pairs = BTreeMap::new();
    pairs.insert("command".into(), "quantize".into());
    pairs.insert("mode".into(), mode.name().into());
    pairs.insert("bits".into(), bits.to_string());
    pairs.insert("eq".into(), quant.eq_estimator.name().into());
    pairs.insert("init".into(), quant.init_mode.name().into());
    pairs.insert("seed".into(), seed.to_string());
    pairs.insert("zero_heart".into(), zero_heart.to_string());
    pairs.insert("epochs_per_iter".into(), quant.retrain.epochs_per_iteration.to_string());
    pairs.insert("lr".into(), quant.retrain.learning_rate.to_string());
    pairs.insert("batch_size".into(), quant.retrain.batch_size.to_string());
    pairs.insert("calibration".into(), calibration_size.to_string());
    pairs.insert("checkpoint".into(), args.checkpoint.display().to_string());
    if let Some(p) = &quant.plan {
        let counts: Vec<String> = p.counts.iter().map(|c| c.to_string()).collect();
        pairs.insert("plan".into(), counts.join(","));
    }
    if let Some(t) = &quant.t_spec {
        pairs.insert(
            "t_type".into(),
            match t.kind {
                TCentroidKind::PowerOfTwoOrZero => "pow2".into(),
                TCentroidKind::Scientific2Sig => "sci2".into(),
            },
        );
        pairs.insert("beta".into(), t.beta.to_string());
    }
    Ok(Resolved { quant, seed, pairs })
}

pub fn cmd_quantize(args: &QuantizeArgs) -> Result<()> {
    let mut resolved = resolve_quant_settings(args)?;
    if !args.checkpoint.exists() {
        return Err(LqError::argument(format!(
            "baseline checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    let net = checkpoint::load_network(&args.checkpoint)?;
    let (train_set, test_set) = args.data.load(resolved.seed)?;
    args.data.describe(&mut resolved.pairs);
    std::fs::create_dir_all(&args.out)?;

    let (baseline_loss, baseline_acc) = evaluate(&net, &test_set, 256)?;
    println!(
        "baseline: loss {baseline_loss:.4} accuracy {baseline_acc:.4} ({} weights)",
        net.num_weights()
    );

    let mut eq_csv = format!("{EQ_CSV_HEADER}\n");
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let out_dir = args.out.clone();
    let plan_len_hint = resolved
        .quant
        .plan
        .as_ref()
        .map(|p| p.counts.len())
        .unwrap_or(0);
    let _ = plan_len_hint;

    let outcome = {
        let mut hook = |net: &crate::network::Network,
                        state: &crate::quantizer::QuantState,
                        report: &crate::quantizer::QuantReport|
         -> Result<()> {
            append_eq_csv(&mut eq_csv, report.round, &report.cluster_losses, &report.chosen);
            rounds.push(RoundRecord::from_report(report));
            let ckpt = out_dir.join(format!("round_{:02}.ckpt", report.round));
            checkpoint::save_network(net, &ckpt)?;
            let _ = state;
            println!(
                "round {:>2} [{}]: pre {:.4} -> shared {:.4} -> retrained {:.4} | frozen {:.1}% | eval acc {}",
                report.round,
                report.phase.name(),
                report.pre_quant_loss,
                report.post_share_loss,
                report.post_retrain_loss,
                100.0 * report.frozen_fraction,
                report
                    .eval_accuracy
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "-".into()),
            );
            Ok(())
        };
        run_quantization_with(net, &train_set, Some(&test_set), &resolved.quant, &mut hook)?
    };

    let violations = verify_quantized(&outcome.network, &outcome.state);
    let (quant_loss, quant_acc) = evaluate(&outcome.network, &test_set, 256)?;
    let encoded = codec::encode_model(&outcome.network, &outcome.state, resolved.quant.bits)?;
    std::fs::write(args.out.join(ENCODED_MODEL_FILE), &encoded)?;
    checkpoint::save_network(&outcome.network, &args.out.join(FINAL_CKPT))?;
    std::fs::write(args.out.join(EQ_CSV_FILE), &eq_csv)?;

    let ratio_excl = codec::compression_ratio(&outcome.network, resolved.quant.bits, false)?;
    let ratio_incl = codec::compression_ratio(&outcome.network, resolved.quant.bits, true)?;

    let mut manifest = RunManifest {
        config: resolved.pairs.clone(),
        rounds,
        finals: BTreeMap::new(),
    };
    manifest.finals.insert("baseline_loss".into(), format!("{baseline_loss:.6}"));
    manifest.finals.insert("baseline_accuracy".into(), format!("{baseline_acc:.6}"));
    manifest.finals.insert("quantized_loss".into(), format!("{quant_loss:.6}"));
    manifest.finals.insert("quantized_accuracy".into(), format!("{quant_acc:.6}"));
    manifest
        .finals
        .insert("accuracy_increase".into(), format!("{:.6}", quant_acc - baseline_acc));
    manifest.finals.insert("compression_ratio_excl".into(), format!("{ratio_excl:.2}"));
    manifest.finals.insert("compression_ratio_incl".into(), format!("{ratio_incl:.2}"));
    manifest.finals.insert("verify_violations".into(), violations.len().to_string());
    manifest
        .finals
        .insert("frozen_fraction".into(), format!("{:.6}", frozen_fraction(&outcome.network)));
    manifest.save(&args.out)?;
    config_file::save(&args.out.join(RUN_CONFIG_FILE), &resolved.pairs)?;

    let label = network_label(&args.checkpoint);
    let table = metrics_table(&label, resolved.quant.bits, baseline_acc, quant_acc);
    std::fs::write(args.out.join("metrics.txt"), &table)?;
    println!("{table}");
    println!("compression: {ratio_excl:.2}x (codebooks excluded), {ratio_incl:.2}x (included)");

    if !violations.is_empty() {
        return Err(LqError::state(format!(
            "verification failed with {} violations (layer {} first: {})",
            violations.len(),
            violations[0].layer,
            violations[0].detail
        )));
    }
    println!("verification: all weights on codebook centroids");
    println!("wrote {}", args.out.join(ENCODED_MODEL_FILE).display());
    Ok(())
}

fn network_label(ckpt: &Path) -> String {
    // Prefer the arch recorded alongside the baseline checkpoint.
    if let Some(dir) = ckpt.parent() {
        if let Ok(map) = config_file::load(&dir.join(RUN_CONFIG_FILE)) {
            if let Some(a) = map.get("arch") {
                return a.clone();
            }
        }
    }
    "network".into()
}

fn metrics_table(label: &str, bits: u32, baseline: f64, quantized: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<18} {:>9} {:>10} {:>10}", "network", "bit-width", "accuracy", "increase");
    let _ = writeln!(s, "{:<18} {:>9} {:>9.2}% {:>10}", label, 32, baseline * 100.0, "");
    let _ = writeln!(
        s,
        "{:<18} {:>9} {:>9.2}% {:>+9.2}%",
        label,
        bits,
        quantized * 100.0,
        (quantized - baseline) * 100.0
    );
    s
}

// ── eval ──────────────────────────────────────────────────────────────

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataOpts,

    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Evaluate on `test` (default) or `train`.
    #[arg(long, default_value = "test")]
    pub split: String,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let net = checkpoint::load_network(&args.checkpoint)?;
    let (train_set, test_set) = args.data.load(args.seed)?;
    let ds = match args.split.as_str() {
        "test" => &test_set,
        "train" => &train_set,
        other => return Err(LqError::argument(format!("unknown split '{other}'"))),
    };
    let (loss, acc) = evaluate(&net, ds, 256)?;
    println!("{} ({} samples): loss {loss:.6} accuracy {acc:.6}", args.split, ds.len());
    println!("frozen weights: {:.2}%", 100.0 * frozen_fraction(&net));
    Ok(())
}

// ── inspect ───────────────────────────────────────────────────────────

#[derive(Args, Debug, Clone)]
pub struct InspectArgs {
    /// Encoded model (.lqm) or checkpoint (.ckpt).
    pub path: PathBuf,
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&args.path)
        .map_err(|e| LqError::argument(format!("cannot read {}: {e}", args.path.display())))?;
    if bytes.len() >= 4 && &bytes[..4] == codec::MAGIC {
        print!("{}", codec::inspect_dump(&bytes)?);
        return Ok(());
    }
    if bytes.len() >= 4 && &bytes[..4] == checkpoint::MAGIC {
        let net = checkpoint::decode_network(&bytes)?;
        println!(
            "checkpoint: {} layers, {} weights, input {:?}",
            net.layers.len(),
            net.num_weights(),
            net.input_shape
        );
        for (i, layer) in net.layers.iter().enumerate() {
            match layer.params() {
                Some((w, _, mask)) => {
                    let frozen = mask.frozen_count();
                    let cb = layer
                        .codebook()
                        .map(|c| format!(", codebook k={} ({} frozen)", c.k(), c.frozen_count()))
                        .unwrap_or_default();
                    println!(
                        "layer {i:>2} {}: {:?} ({} weights, {frozen} frozen{cb})",
                        layer.kind_name(),
                        w.shape,
                        w.len()
                    );
                }
                None => println!("layer {i:>2} {}", layer.kind_name()),
            }
        }
        return Ok(());
    }
    Err(LqError::format(0, "unrecognized file (neither encoded model nor checkpoint)"))
}

// ── report ────────────────────────────────────────────────────────────

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Run directory containing manifest.txt and eq_rounds.csv.
    pub run: PathBuf,
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.run)?;
    let report_dir = args.run.join("report");
    std::fs::create_dir_all(&report_dir)?;

    // Accuracy-vs-round curve; round 0 is the float baseline.
    let mut curve = String::from("round,phase,loss,accuracy,frozen_fraction\n");
    let baseline_acc = manifest.finals.get("baseline_accuracy").cloned().unwrap_or_default();
    let baseline_loss = manifest.finals.get("baseline_loss").cloned().unwrap_or_default();
    let _ = writeln!(curve, "0,baseline,{baseline_loss},{baseline_acc},0.0");
    for r in &manifest.rounds {
        let _ = writeln!(
            curve,
            "{},{},{},{},{:.6}",
            r.round,
            r.phase,
            r.eval_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.eval_accuracy.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.frozen_fraction
        );
    }
    std::fs::write(report_dir.join("accuracy_vs_round.csv"), &curve)?;

    // EQ tables, re-sorted per round, cross-checked against the manifest.
    let eq_path = args.run.join(EQ_CSV_FILE);
    let eq_text = std::fs::read_to_string(&eq_path)
        .map_err(|e| LqError::argument(format!("missing {}: {e}", eq_path.display())))?;
    let rows = parse_eq_csv(&eq_text)?;
    cross_check_partitions(&manifest, &rows)?;

    let mut table = format!("{EQ_CSV_HEADER}\n");
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| {
        a.round
            .cmp(&b.round)
            .then(a.layer.cmp(&b.layer))
            .then(b.eq.partial_cmp(&a.eq).unwrap())
            .then(a.cluster.cmp(&b.cluster))
    });
    for r in &sorted {
        let _ = writeln!(
            table,
            "{},{},{},{:.9e},{}",
            r.round,
            r.layer,
            r.cluster,
            r.eq,
            if r.quantized { "quantize" } else { "retrain" }
        );
    }
    std::fs::write(report_dir.join("eq_tables.csv"), &table)?;

    println!("rounds: {}", manifest.rounds.len());
    for key in [
        "baseline_accuracy",
        "quantized_accuracy",
        "accuracy_increase",
        "compression_ratio_excl",
        "compression_ratio_incl",
        "verify_violations",
    ] {
        if let Some(v) = manifest.finals.get(key) {
            println!("{key}: {v}");
        }
    }
    println!("partition ordering: consistent with manifest");
    println!("wrote {}", report_dir.join("accuracy_vs_round.csv").display());
    println!("wrote {}", report_dir.join("eq_tables.csv").display());
    Ok(())
}

#[derive(Debug, Clone)]
struct EqRow {
    round: usize,
    layer: usize,
    cluster: usize,
    eq: f64,
    quantized: bool,
}

fn parse_eq_csv(text: &str) -> Result<Vec<EqRow>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line.trim() != EQ_CSV_HEADER {
                return Err(LqError::format(0, "unexpected EQ csv header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(LqError::format(ln, format!("bad EQ csv row: {line}")));
        }
        rows.push(EqRow {
            round: parts[0].parse().map_err(|_| LqError::format(ln, "bad round"))?,
            layer: parts[1].parse().map_err(|_| LqError::format(ln, "bad layer"))?,
            cluster: parts[2].parse().map_err(|_| LqError::format(ln, "bad cluster"))?,
            eq: parts[3].parse().map_err(|_| LqError::format(ln, "bad eq"))?,
            quantized: parts[4] == "quantize",
        });
    }
    Ok(rows)
}

/// Confirms that the CSV's quantize/retrain marking matches the manifest's
/// chosen sets and respects the loss ordering within each round and layer.
fn cross_check_partitions(manifest: &RunManifest, rows: &[EqRow]) -> Result<()> {
    for rec in &manifest.rounds {
        for (layer, clusters) in &rec.chosen {
            for c in clusters {
                let row = rows
                    .iter()
                    .find(|r| r.round == rec.round && r.layer == *layer && r.cluster == *c)
                    .ok_or_else(|| {
                        LqError::state(format!(
                            "round {} layer {layer} cluster {c}: chosen in manifest but absent from EQ csv",
                            rec.round
                        ))
                    })?;
                if !row.quantized {
                    return Err(LqError::state(format!(
                        "round {} layer {layer} cluster {c}: manifest says quantize, csv says retrain",
                        rec.round
                    )));
                }
            }
        }
    }
    // Ordering: per round and layer, every quantized EQ >= every retained EQ.
    for r in rows {
        if !r.quantized {
            continue;
        }
        for other in rows {
            if other.round == r.round && other.layer == r.layer && !other.quantized && other.eq > r.eq {
                return Err(LqError::state(format!(
                    "round {} layer {}: retained cluster {} has larger EQ than quantized cluster {}",
                    r.round, r.layer, other.cluster, r.cluster
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_roundtrip() {
        let mut m = BTreeMap::new();
        m.insert("mode".to_string(), "slq".to_string());
        m.insert("bits".to_string(), "5".to_string());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.config");
        config_file::save(&p, &m).unwrap();
        assert_eq!(config_file::load(&p).unwrap(), m);
        assert!(config_file::parse("nonsense without equals").is_err());
        let parsed = config_file::parse("# comment\n\nkey = value\n").unwrap();
        assert_eq!(parsed["key"], "value");
    }

    #[test]
    fn eq_csv_parses_back() {
        let mut csv = format!("{EQ_CSV_HEADER}\n");
        csv.push_str("1,0,3,1.5e-2,quantize\n1,0,4,5.0e-3,retrain\n");
        let rows = parse_eq_csv(&csv).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].quantized);
        assert!(!rows[1].quantized);
        assert!(parse_eq_csv("bogus\n").is_err());
    }
}
