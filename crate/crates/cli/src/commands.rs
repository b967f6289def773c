//! Subcommand implementations. Every artifact is written atomically, and only
//! after all computation has succeeded, so a failing run leaves nothing
//! behind.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use sdd::codec::{decode, decode_dense};
use sdd::data::{self, load_dataset, write_csv_matrix};
use sdd::denoiser::ModelKind;
use sdd::io::{fnv1a64, write_atomic, write_matrix};
use sdd::metrics::{self, Bandwidth, MetricKind, LOGIT_BINS};
use sdd::sampler::{sample_raw, threshold_to_sparsity, SampleConfig, SamplerKind};
use sdd::trainer::log_to_csv;
use sdd::{Checkpoint, DatasetHandle, ExtendedState, Result, ScaleMode, SddError, SyntheticKind, SyntheticSpec, TrainConfig, Trainer};

use crate::manifest::{self, fingerprint_hex, RunManifest, BUILD_ID};
use crate::{EvalArgs, GenDataArgs, GenKind, KindArg, SampleArgs, ThresholdArgs, TrainArgs};

pub const SEED_ENV: &str = "SDD_SEED";

/// `SDD_SEED` wins over the flag, which wins over `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| SddError::Argument(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(flag.unwrap_or(fallback)),
    }
}

/// Fails with a usage error naming the path when an input file is missing.
fn input(path: &Path) -> Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(SddError::Argument(format!("input file {} does not exist", path.display())))
    }
}

fn read_json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&std::fs::read_to_string(input(path)?)?)?)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Applies `a.b.c=value` to a JSON object. The value is parsed as JSON when
/// possible and taken as a string otherwise.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| SddError::Argument(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| SddError::Argument(format!("override key {key:?} descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Err(SddError::Argument(format!("empty override key in {spec:?}")))
}

#[allow(clippy::too_many_arguments)]
fn record(
    command: &str,
    args: &[String],
    seed: Option<u64>,
    config: Value,
    dataset: Option<u64>,
    artifacts: Vec<PathBuf>,
    explicit: Option<&Path>,
    primary: &Path,
) -> Result<()> {
    let rec = RunManifest {
        command: command.to_string(),
        args: args.to_vec(),
        seed,
        build: BUILD_ID.to_string(),
        config,
        dataset_fingerprint: dataset.map(fingerprint_hex),
        artifacts,
    };
    manifest::append(&manifest::manifest_path(explicit, primary), &rec)
}

pub fn gen_data(a: GenDataArgs, args: &[String]) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => serde_json::from_value(read_json(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(k) = a.kind {
        spec.kind = match k {
            GenKind::ClusteredDeposits => SyntheticKind::ClusteredDeposits,
            GenKind::SparseMixture => SyntheticKind::SparseMixture,
        };
    }
    if let Some(d) = a.d {
        spec.d = d;
    }
    if let Some(s) = a.sparsity {
        spec.target_sparsity = s;
    }
    if let Some(c) = a.clusters {
        spec.cluster_count = c;
    }
    spec.seed = resolve_seed(a.seed, spec.seed)?;
    let batch = data::generate(&spec, a.n)?;
    let fp = sdd::io::matrix_fingerprint(batch.values());

    write_matrix(&a.out, batch.values())?;
    let mut artifacts = vec![a.out.clone()];
    if let Some(csv) = &a.csv {
        write_csv_matrix(csv, batch.values(), None)?;
        artifacts.push(csv.clone());
    }
    println!("rows={} d={} mean_sparsity={}", batch.n(), batch.d(), batch.mean_sparsity());
    let config = json!({ "spec": spec, "n": a.n });
    record("gen-data", args, Some(spec.seed), config, Some(fp), artifacts, a.manifest.manifest.as_deref(), &a.out)
}

pub fn train(a: TrainArgs, args: &[String]) -> Result<()> {
    let mut cfg_value = match &a.config {
        Some(p) => read_json(p)?,
        None => serde_json::to_value(TrainConfig::default())?,
    };
    for o in &a.overrides {
        apply_override(&mut cfg_value, o)?;
    }
    let mut cfg: TrainConfig = serde_json::from_value(cfg_value)?;
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.validate()?;

    let dataset = match (&a.data, &a.synthetic) {
        (Some(p), None) => load_dataset(input(p)?, cfg.scale_mode)?,
        (None, Some(p)) => {
            let spec: SyntheticSpec = serde_json::from_value(read_json(p)?)?;
            let batch = data::generate(&spec, a.n)?;
            DatasetHandle::fitted(format!("synthetic:{}", p.display()), batch, cfg.scale_mode)
        }
        _ => return Err(SddError::Argument("exactly one of --data or --synthetic is required".into())),
    };

    let mut trainer = Trainer::new(cfg.clone(), dataset.d(), dataset.scale().clone())?;
    let log = trainer.fit(&dataset, cfg.total_steps)?;
    let ckpt = Checkpoint::from_trainer(&trainer, dataset.d());
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));

    ckpt.save(&a.out)?;
    write_atomic(&log_path, log_to_csv(&log).as_bytes())?;
    if let Some(last) = log.last() {
        println!("steps={} final_loss={:e} l2={:e} ce={:e}", last.step + 1, last.loss.total, last.loss.l2, last.loss.ce);
    } else {
        println!("steps=0");
    }
    let config = json!({ "train": cfg, "dataset": dataset.name, "rows": dataset.n(), "d": dataset.d() });
    record(
        "train",
        args,
        Some(cfg.seed),
        config,
        Some(dataset.fingerprint()),
        vec![a.out.clone(), log_path],
        a.manifest.manifest.as_deref(),
        &a.out,
    )
}

pub fn sample(a: SampleArgs, args: &[String]) -> Result<()> {
    let ckpt_bytes = std::fs::read(input(&a.checkpoint)?)?;
    let ckpt = Checkpoint::from_bytes(&ckpt_bytes)?;
    let cfg = SampleConfig {
        steps: a.steps,
        kind: match a.kind {
            KindArg::Ddim => SamplerKind::Ddim,
            KindArg::Ddpm => SamplerKind::Ddpm,
        },
        seed: resolve_seed(a.seed, 0)?,
        batch: a.n,
        use_ema: !a.no_ema,
    };
    let meta = &ckpt.meta;
    if a.logit_hist.is_some() && meta.model == ModelKind::Dense {
        return Err(SddError::Argument("dense checkpoints have no sparsity-bit logits".into()));
    }
    let raw = sample_raw(ckpt.weights(cfg.use_ema), &cfg, &meta.schedule)?;
    let (batch, logit_hist) = match meta.model {
        ModelKind::Sdd => {
            let state = ExtendedState::new(raw)?;
            let hist = metrics::sb_logit_histogram(&state.bits(), LOGIT_BINS)?;
            (decode(&state, &meta.scale)?, Some(hist))
        }
        ModelKind::Dense => (decode_dense(&raw, &meta.scale)?, None),
    };
    let mean_sparsity = metrics::sparsity_histogram(&batch).mean;

    write_matrix(&a.out, batch.values())?;
    let mut artifacts = vec![a.out.clone()];
    if let Some(csv) = &a.csv {
        write_csv_matrix(csv, batch.values(), None)?;
        artifacts.push(csv.clone());
    }
    if let (Some(p), Some(hist)) = (&a.logit_hist, &logit_hist) {
        write_atomic(p, hist.histogram.to_csv().as_bytes())?;
        artifacts.push(p.clone());
    }
    println!("mean_sparsity={mean_sparsity}");
    if let Some(h) = &logit_hist {
        println!("logit_outer_mass={}", h.outer_mass);
    }
    let config = json!({
        "sample": cfg,
        "checkpoint": a.checkpoint,
        "checkpoint_fingerprint": fingerprint_hex(fnv1a64(&ckpt_bytes)),
        "model": meta.model,
    });
    record("sample", args, Some(cfg.seed), config, None, artifacts, a.manifest.manifest.as_deref(), &a.out)
}

pub fn threshold(a: ThresholdArgs, args: &[String]) -> Result<()> {
    let samples = load_dataset(input(&a.samples)?, ScaleMode::Global)?;
    let target = match (&a.target_sparsity, &a.match_data) {
        (Some(t), None) => *t,
        (None, Some(p)) => load_dataset(input(p)?, ScaleMode::Global)?.batch().mean_sparsity(),
        _ => return Err(SddError::Argument("exactly one of --target-sparsity or --match is required".into())),
    };
    let (out, result) = threshold_to_sparsity(samples.batch(), target, a.grid)?;
    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".threshold.json"));

    write_matrix(&a.out, out.values())?;
    write_atomic(&report_path, serde_json::to_string_pretty(&result)?.as_bytes())?;
    println!(
        "threshold={} achieved_sparsity={} target_sparsity={} converged={}",
        result.threshold, result.achieved_sparsity, result.target_sparsity, result.converged
    );
    if !result.converged {
        eprintln!(
            "warning: sparsity {} overshoots target {} by more than one grid quantum",
            result.achieved_sparsity, result.target_sparsity
        );
    }
    let config = json!({ "grid": a.grid, "target_sparsity": target, "samples": a.samples, "match": a.match_data });
    record(
        "threshold",
        args,
        None,
        config,
        Some(samples.fingerprint()),
        vec![a.out.clone(), report_path],
        a.manifest.manifest.as_deref(),
        &a.out,
    )
}

pub fn eval(a: EvalArgs, args: &[String]) -> Result<()> {
    let real = load_dataset(input(&a.real)?, ScaleMode::Global)?;
    let gen = load_dataset(input(&a.gen)?, ScaleMode::Global)?;
    let metrics: BTreeSet<MetricKind> = match &a.metrics {
        Some(list) => list.iter().map(|m| m.trim().parse()).collect::<Result<_>>()?,
        None => MetricKind::ALL.into_iter().collect(),
    };
    let opts = metrics::EvalOptions {
        metrics,
        bandwidth: match a.bandwidth {
            Some(b) if b > 0.0 && b.is_finite() => Bandwidth::Fixed(b),
            Some(b) => return Err(SddError::Argument(format!("bandwidth {b} must be > 0"))),
            None => Bandwidth::Median,
        },
        lisi_k: a.lisi_k,
    };
    let report = metrics::evaluate(real.batch(), gen.batch(), &opts)?;

    write_atomic(&a.out, report.to_json()?.as_bytes())?;
    let mut artifacts = vec![a.out.clone()];
    if let Some(csv) = &a.csv {
        write_atomic(csv, report.to_csv().as_bytes())?;
        artifacts.push(csv.clone());
    }
    if let Some(dir) = &a.hist_dir {
        std::fs::create_dir_all(dir)?;
        for (name, h) in [("sparsity_real.csv", &report.sparsity_hist_real), ("sparsity_gen.csv", &report.sparsity_hist_gen)] {
            if let Some(h) = h {
                let p = dir.join(name);
                write_atomic(&p, h.histogram.to_csv().as_bytes())?;
                artifacts.push(p);
            }
        }
    }
    print!("{}", report.to_csv());
    let config = json!({ "options": opts, "real": a.real, "gen": a.gen, "gen_fingerprint": fingerprint_hex(gen.fingerprint()) });
    record("eval", args, None, config, Some(real.fingerprint()), artifacts, a.manifest.manifest.as_deref(), &a.out)
}
