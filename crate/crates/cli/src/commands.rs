use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use stcl::finetune::{finetune_classify, finetune_tp, FinetuneConfig, Task};
use stcl::geocode::{geohash_decode, geohash_encode};
use stcl::ingest::{
    build_bundle, filter_and_segment, load_bundle, parse_checkins, read_edge_list, save_bundle, BundleManifest,
    CheckInSequence, DatasetBundle, LogFormat, Split,
};
use stcl::pretrain::{
    config_hash, export_representations, load_checkpoint, save_checkpoint, train, validation_loss,
    write_representations, LogEvent, RowInfo, TrainState,
};
use stcl::synth::{generate, SynthSpec};

use crate::config::{RunConfig, SweepParameter};
use crate::report::{numeric_fields, summarize_runs, table, Summary};
use crate::{Common, ExportSplit, FormatArg, PretrainOverrides, SplitArg};

const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "train_log.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn fmt(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.4}")
    }
}

/// The bundle named by the flag, the configuration, or the configuration
/// frozen next to the checkpoint, in that order.
fn locate_bundle(cfg: &RunConfig, flag: Option<PathBuf>, checkpoint: Option<&Path>) -> anyhow::Result<PathBuf> {
    if let Ok(dir) = cfg.bundle_dir(flag.as_deref()) {
        return Ok(dir);
    }
    if let Some(frozen) = checkpoint.and_then(Path::parent).map(|d| d.join(CONFIG_FILE)) {
        if frozen.exists() {
            return RunConfig::load(Some(&frozen))?.bundle_dir(None);
        }
    }
    bail!("no bundle directory: pass --bundle or set data.bundle_dir")
}

fn open_bundle(dir: &Path) -> anyhow::Result<DatasetBundle> {
    load_bundle(dir).with_context(|| format!("loading bundle {}", dir.display()))
}

fn open_checkpoint(path: &Path, bundle: &DatasetBundle) -> anyhow::Result<TrainState> {
    load_checkpoint(path, Some(bundle)).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn ingest(
    common: &Common,
    input: Option<PathBuf>,
    edges: Option<PathBuf>,
    format: Option<FormatArg>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(f) = format {
        cfg.data.format = match f {
            FormatArg::Gowalla => LogFormat::Gowalla,
            FormatArg::Weeplace => LogFormat::Weeplace,
        };
    }
    let input = input
        .or_else(|| cfg.data.checkins.clone())
        .context("no input file: pass --input or set data.checkins")?;
    let edges = edges.or_else(|| cfg.data.edges.clone());
    let out = out
        .or_else(|| cfg.data.bundle_dir.clone())
        .unwrap_or_else(|| cfg.output_root(common.output_root.as_deref()).join("bundle"));

    // Everything that can fail on the inputs happens before the first write.
    let parsed = parse_checkins(&input, &cfg.data.format)?;
    let edge_list = edges.as_deref().map(read_edge_list).transpose()?;
    let sequences = filter_and_segment(&parsed.records, &cfg.data.bundle.filter);
    let bundle = build_bundle(sequences, edge_list.as_deref(), &cfg.data.bundle)?;

    let name = out.file_name().context("bundle path has no final component")?.to_string_lossy().into_owned();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let staged = (|| -> anyhow::Result<()> {
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        save_bundle(&bundle, &staging)?;
        write_json(
            &staging.join("parse_report.json"),
            &serde_json::json!({
                "input": input,
                "records": parsed.records.len(),
                "malformed_lines": parsed.malformed,
                "rejected_coordinates": parsed.rejected_coordinates,
                "interned_ids": parsed.interned_ids.len(),
            }),
        )?;
        if out.exists() {
            fs::remove_dir_all(&out)?;
        }
        fs::rename(&staging, &out)?;
        Ok(())
    })();
    if let Err(e) = staged {
        let _ = fs::remove_dir_all(&staging);
        return Err(e.context(format!("writing bundle {}", out.display())));
    }

    let c = BundleManifest::of(&bundle).counts;
    let rows = vec![
        vec!["users".into(), c.users.to_string()],
        vec!["locations".into(), c.locations.to_string()],
        vec!["check-ins".into(), c.checkins.to_string()],
        vec!["train sequences".into(), c.train_sequences.to_string()],
        vec!["val sequences".into(), c.val_sequences.to_string()],
        vec!["test sequences".into(), c.test_sequences.to_string()],
        vec!["skipped lines".into(), parsed.warnings().to_string()],
    ];
    println!("{}", table(&["dataset", &name], &rows));
    println!("bundle written to {}", out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, o: &PretrainOverrides) {
    if let Some(a) = o.ablation {
        cfg.pretrain.ablation = a.into();
    }
    if let Some(e) = o.epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(s) = o.seed {
        cfg.seed = Some(s);
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config_hash: String,
    bundle: &'a Path,
    ablation: &'static str,
    seed: u64,
    margin: f64,
    num_prototypes: usize,
    queue_capacity: usize,
    projection_dim: usize,
    epochs_run: usize,
    best_epoch: usize,
    best_val_loss: f64,
}

/// Pre-trains into `run_dir`: frozen configuration first, then the JSON
/// lines log as training goes, then the checkpoint and manifest.
fn run_pretrain(cfg: &RunConfig, bundle: &DatasetBundle, bundle_dir: &Path, run_dir: &Path) -> anyhow::Result<TrainState> {
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let mut frozen = cfg.clone();
    frozen.data.bundle_dir = Some(bundle_dir.to_path_buf());
    frozen.freeze(&run_dir.join(CONFIG_FILE))?;

    let log_path = run_dir.join(LOG_FILE);
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let io_err = |source| stcl::Error::Io {
        path: log_path.clone(),
        source,
    };
    let mut state = TrainState::new(bundle, cfg.pretrain.clone())?;
    let result = train(&mut state, bundle, &mut |event: &LogEvent| {
        serde_json::to_writer(&mut log, event)?;
        log.write_all(b"\n").map_err(io_err)?;
        if !matches!(event, LogEvent::Step { .. }) {
            log.flush().map_err(io_err)?;
        }
        Ok(())
    });
    log.flush()?;
    result.with_context(|| format!("pre-training into {}", run_dir.display()))?;

    save_checkpoint(&state, &run_dir.join(CHECKPOINT_FILE))?;
    let p = &cfg.pretrain;
    write_json(
        &run_dir.join(MANIFEST_FILE),
        &RunManifest {
            config_hash: config_hash(p)?,
            bundle: bundle_dir,
            ablation: p.ablation.name(),
            seed: p.seed,
            margin: p.weights.margin,
            num_prototypes: p.model.num_prototypes,
            queue_capacity: p.queue_capacity,
            projection_dim: p.model.projection_dim,
            epochs_run: state.epoch,
            best_epoch: state.best_epoch,
            best_val_loss: state.best_val_loss,
        },
    )?;
    Ok(state)
}

pub fn pretrain(
    common: &Common,
    overrides: &PretrainOverrides,
    bundle: Option<PathBuf>,
    run_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    apply_overrides(&mut cfg, overrides);
    let cfg = cfg.resolve()?;
    let bundle_dir = cfg.bundle_dir(bundle.as_deref())?;
    let data = open_bundle(&bundle_dir)?;
    let run_dir = run_dir.unwrap_or_else(|| {
        cfg.output_root(common.output_root.as_deref())
            .join("pretrain")
            .join(format!("{}-seed{}", cfg.pretrain.ablation.name(), cfg.pretrain.seed))
    });
    let state = run_pretrain(&cfg, &data, &bundle_dir, &run_dir)?;
    let rows: Vec<Vec<String>> = state
        .history
        .iter()
        .map(|r| vec![r.epoch.to_string(), fmt(r.train_loss), fmt(r.val_loss)])
        .collect();
    println!("{}", table(&["epoch", "train loss", "val loss"], &rows));
    println!(
        "best epoch {} (val loss {}); run directory {}",
        state.best_epoch,
        fmt(state.best_val_loss),
        run_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct TaskRun {
    seed: u64,
    best_epoch: usize,
    val: Vec<(String, f64)>,
    test: Vec<(String, f64)>,
}

fn run_task(state: &TrainState, bundle: &DatasetBundle, cfg: &FinetuneConfig) -> anyhow::Result<TaskRun> {
    let (best_epoch, val, test) = match cfg.task {
        Task::Lp | Task::Tul => {
            let (_, r) = finetune_classify(&state.model, bundle, cfg)?;
            (r.fit.best_epoch, numeric_fields(&r.val), numeric_fields(&r.test))
        }
        Task::Tp => {
            let (_, r) = finetune_tp(&state.model, bundle, cfg)?;
            (r.fit.best_epoch, numeric_fields(&r.val), numeric_fields(&r.test))
        }
    };
    Ok(TaskRun {
        seed: cfg.seed,
        best_epoch,
        val,
        test,
    })
}

fn primary_metric(task: Task) -> &'static str {
    match task {
        Task::Tp => "mae",
        _ => "acc1",
    }
}

pub struct FinetuneArgs {
    pub checkpoint: PathBuf,
    pub bundle: Option<PathBuf>,
    pub task: Option<Task>,
    pub repeats: usize,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub freeze: bool,
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct FinetuneReport<'a> {
    task: Task,
    checkpoint: &'a Path,
    config: &'a FinetuneConfig,
    runs: Vec<MetricRun>,
    val: std::collections::BTreeMap<String, Summary>,
    test: std::collections::BTreeMap<String, Summary>,
}

#[derive(Serialize)]
struct MetricRun {
    seed: u64,
    best_epoch: usize,
    val: serde_json::Map<String, serde_json::Value>,
    test: serde_json::Map<String, serde_json::Value>,
}

fn as_map(fields: &[(String, f64)]) -> serde_json::Map<String, serde_json::Value> {
    fields.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect()
}

pub fn finetune(common: &Common, args: FinetuneArgs) -> anyhow::Result<()> {
    if args.repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(t) = args.task {
        cfg.finetune.task = t;
    }
    if let Some(e) = args.epochs {
        cfg.finetune.epochs = e;
    }
    cfg.finetune.freeze_encoder |= args.freeze;
    let cfg = cfg.resolve()?;
    let bundle_dir = locate_bundle(&cfg, args.bundle, Some(&args.checkpoint))?;
    let bundle = open_bundle(&bundle_dir)?;
    let state = open_checkpoint(&args.checkpoint, &bundle)?;

    let mut runs = Vec::with_capacity(args.repeats);
    for i in 0..args.repeats {
        let mut ft = cfg.finetune.clone();
        ft.seed = cfg.finetune.seed + i as u64;
        runs.push(run_task(&state, &bundle, &ft)?);
    }
    let val = summarize_runs(&runs.iter().map(|r| r.val.clone()).collect::<Vec<_>>());
    let test = summarize_runs(&runs.iter().map(|r| r.test.clone()).collect::<Vec<_>>());
    let task = cfg.finetune.task;
    let report_path = args.report.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("finetune-{}.json", task.name()))
    });
    write_json(
        &report_path,
        &FinetuneReport {
            task,
            checkpoint: &args.checkpoint,
            config: &cfg.finetune,
            runs: runs
                .iter()
                .map(|r| MetricRun {
                    seed: r.seed,
                    best_epoch: r.best_epoch,
                    val: as_map(&r.val),
                    test: as_map(&r.test),
                })
                .collect(),
            val: val.clone(),
            test: test.clone(),
        },
    )?;
    let rows: Vec<Vec<String>> = test
        .iter()
        .map(|(k, s)| vec![k.clone(), format!("{} ± {}", fmt(s.mean), fmt(s.std)), fmt(val[k].mean)])
        .collect();
    let header = format!("test ({} runs)", args.repeats);
    println!("{}", table(&[task.name(), &header, "val mean"], &rows));
    println!("report written to {}", report_path.display());
    Ok(())
}

pub fn evaluate(
    common: &Common,
    checkpoint: &Path,
    bundle: Option<PathBuf>,
    split: SplitArg,
    task: Option<Task>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(t) = task {
        cfg.finetune.task = t;
    }
    cfg.finetune.freeze_encoder = true;
    let cfg = cfg.resolve()?;
    let bundle_dir = locate_bundle(&cfg, bundle, Some(checkpoint))?;
    let data = open_bundle(&bundle_dir)?;
    let state = open_checkpoint(checkpoint, &data)?;
    let (split, split_name) = match split {
        SplitArg::Val => (Split::Val, "val"),
        SplitArg::Test => (Split::Test, "test"),
    };
    let loss = validation_loss(&state, data.split(split))?;
    let probe = run_task(&state, &data, &cfg.finetune)?;
    let metrics = match split {
        Split::Test => &probe.test,
        _ => &probe.val,
    };
    let task = cfg.finetune.task;
    let out = checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(format!("evaluate-{split_name}.json"));
    write_json(
        &out,
        &serde_json::json!({
            "split": split_name,
            "pretrain_loss": loss,
            "probe_task": task,
            "probe": as_map(metrics),
        }),
    )?;
    let mut rows = vec![vec!["pre-training loss".to_string(), fmt(loss)]];
    rows.extend(metrics.iter().map(|(k, v)| vec![format!("{} probe {k}", task.name()), fmt(*v)]));
    println!("{}", table(&["metric", split_name], &rows));
    println!("report written to {}", out.display());
    Ok(())
}

fn set_parameter(cfg: &mut RunConfig, p: SweepParameter, value: f64) -> anyhow::Result<()> {
    let as_count = || -> anyhow::Result<usize> {
        if value < 0.0 || value.fract() != 0.0 {
            bail!("{} takes whole non-negative values, got {value}", p.name());
        }
        Ok(value as usize)
    };
    match p {
        SweepParameter::Clusters => cfg.pretrain.model.num_prototypes = as_count()?,
        SweepParameter::Queue => cfg.pretrain.queue_capacity = as_count()?,
        SweepParameter::Margin => cfg.pretrain.weights.margin = value,
        SweepParameter::Projection => cfg.pretrain.model.projection_dim = as_count()?,
    }
    Ok(())
}

fn write_sweep_csv(path: &Path, parameter: &str, rows: &[(f64, f64, Vec<(String, f64)>)]) -> anyhow::Result<()> {
    let mut text = String::new();
    if let Some((_, _, first)) = rows.first() {
        text.push_str(parameter);
        text.push_str(",pretrain_val_loss");
        for (k, _) in first {
            text.push(',');
            text.push_str(k);
        }
        text.push('\n');
    }
    for (value, loss, metrics) in rows {
        text.push_str(&format!("{value},{loss}"));
        for (_, v) in metrics {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    // Rename over the old file so a crash never leaves a torn CSV.
    let tmp = path.with_extension("csv.partial");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sweep(
    common: &Common,
    overrides: &PretrainOverrides,
    parameter: SweepParameter,
    values: Option<Vec<f64>>,
    bundle: Option<PathBuf>,
    task: Option<Task>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    apply_overrides(&mut cfg, overrides);
    if let Some(t) = task {
        cfg.finetune.task = t;
    }
    let cfg = cfg.resolve()?;
    let values = values.unwrap_or_else(|| cfg.sweep.values(parameter));
    if values.is_empty() {
        bail!("no sweep values");
    }
    let bundle_dir = cfg.bundle_dir(bundle.as_deref())?;
    let data = open_bundle(&bundle_dir)?;
    let out = out.unwrap_or_else(|| {
        cfg.output_root(common.output_root.as_deref())
            .join("sweep")
            .join(parameter.name())
    });
    fs::create_dir_all(&out)?;
    cfg.freeze(&out.join(CONFIG_FILE))?;
    let csv_path = out.join("sweep.csv");
    let plot_path = out.join("sweep.svg");
    let task = cfg.finetune.task;
    let metric = primary_metric(task);

    let mut rows: Vec<(f64, f64, Vec<(String, f64)>)> = Vec::new();
    let mut failure = None;
    for &value in &values {
        let point = (|| -> anyhow::Result<(f64, Vec<(String, f64)>)> {
            let mut point_cfg = cfg.clone();
            set_parameter(&mut point_cfg, parameter, value)?;
            let point_cfg = point_cfg.resolve()?;
            let run_dir = out.join(format!("{}-{value}", parameter.name()));
            let state = run_pretrain(&point_cfg, &data, &bundle_dir, &run_dir)?;
            let run = run_task(&state, &data, &point_cfg.finetune)?;
            write_json(&run_dir.join(format!("finetune-{}.json", task.name())), &run)?;
            Ok((state.best_val_loss, run.test))
        })();
        match point {
            Ok((loss, metrics)) => {
                rows.push((value, loss, metrics));
                write_sweep_csv(&csv_path, parameter.name(), &rows)?;
                eprintln!("{} = {value}: done", parameter.name());
            }
            Err(e) => {
                failure = Some(e.context(format!("sweep point {} = {value}", parameter.name())));
                break;
            }
        }
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|(v, _, m)| (*v, m.iter().find(|(k, _)| k == metric).map_or(f64::NAN, |x| x.1)))
        .collect();
    if !points.is_empty() {
        crate::plot::sweep_curve(&plot_path, parameter.name(), &format!("test {metric}"), &points)?;
    }
    let table_rows: Vec<Vec<String>> = rows
        .iter()
        .zip(&points)
        .map(|((v, loss, _), (_, m))| vec![v.to_string(), fmt(*loss), fmt(*m)])
        .collect();
    println!("{}", table(&[parameter.name(), "pretrain val loss", &format!("test {metric}")], &table_rows));
    println!("curve written to {} and {}", csv_path.display(), plot_path.display());
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn export_embeddings(
    common: &Common,
    checkpoint: &Path,
    bundle: Option<PathBuf>,
    split: ExportSplit,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let bundle_dir = locate_bundle(&cfg, bundle, Some(checkpoint))?;
    let data = open_bundle(&bundle_dir)?;
    let state = open_checkpoint(checkpoint, &data)?;
    let splits: &[(Split, &str)] = match split {
        ExportSplit::All => &[(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")],
        ExportSplit::Train => &[(Split::Train, "train")],
        ExportSplit::Val => &[(Split::Val, "val")],
        ExportSplit::Test => &[(Split::Test, "test")],
    };
    let mut seqs: Vec<CheckInSequence> = Vec::new();
    let mut rows = Vec::new();
    for &(s, name) in splits {
        for (i, seq) in data.split(s).iter().enumerate() {
            rows.push(RowInfo {
                row: rows.len(),
                split: name.to_string(),
                sequence: i,
                user: data.vocab.users[seq.user as usize],
                start_time: seq.start_time(),
                length: seq.len(),
            });
            seqs.push(seq.clone());
        }
    }
    if seqs.is_empty() {
        bail!("nothing to export");
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let matrix = export_representations(&state.model, &seqs)?;
    let sidecar = out.with_extension("json");
    write_representations(&matrix, &rows, out, &sidecar)?;
    let (n, d) = matrix.dims2()?;
    println!("{n} x {d} representations written to {} ({})", out.display(), sidecar.display());
    Ok(())
}

pub fn geohash(lat: Option<f64>, lon: Option<f64>, bits: usize, decode: Option<String>) -> anyhow::Result<()> {
    let cell = match decode {
        Some(text) => geohash_decode(&text)?,
        None => {
            let (lat, lon) = (lat.context("latitude missing")?, lon.context("longitude missing")?);
            let code = geohash_encode(lat, lon, bits)?;
            let bit_text: String = code.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
            println!("geohash  {}", code.text);
            println!("bits     {bit_text}");
            code.cell()
        }
    };
    println!("lat      [{}, {}]", cell.lat.0, cell.lat.1);
    println!("lon      [{}, {}]", cell.lon.0, cell.lon.1);
    Ok(())
}

pub fn synth(spec: &SynthSpec, out: &Path) -> anyhow::Result<()> {
    let data = generate(spec)?;
    data.write(out)?;
    let records = data.records().count();
    println!(
        "{} users, {} sequences, {records} check-ins, {} friendships written to {}",
        spec.users,
        data.sequences.len(),
        data.friendships.len(),
        out.display()
    );
    Ok(())
}
