//! The `wsdet` command line.
//!
//! Every subcommand reads its inputs, computes all outputs in memory and
//! then writes them under `--out` together with `params.json`, a record of
//! the resolved parameters. Outputs are a pure function of inputs, flags
//! and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::dataset::{generate_synthetic, split_partial, Protocol};
use crate::error::{Error, Result};
use crate::fusion::{fuse_pseudo_labels, nms, Detection, DetectionRecord, DEFAULT_CAM_EPOCHS, DEFAULT_TAU_NMS};
use crate::heatmap::{cam_to_boxes, CamBoxConfig, Connectivity, DEFAULT_MAX_AREA, DEFAULT_MIN_AREA, DEFAULT_TAU};
use crate::io::{
    encode_checkpoint, encode_feature_grid, encode_heatmap, encode_jsonl, load_dataset, read_heatmap, read_jsonl,
    relative_to, DatasetManifest, GroundTruthRecord, ManifestEntry, OutputSet, MANIFEST_FILE,
};
use crate::metrics::{froc, mean_average_precision, precision_recall, recall_at_fppi, EvalSet, DEFAULT_IOU};
use crate::toydet::{run_benchmark, TrainConfig};

pub const PARAMS_FILE: &str = "params.json";
pub const THREADS_ENV: &str = "WSDET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "wsdet", version, about = "Pseudo-labels, fusion, training and evaluation for lesion detection")]
pub struct Cli {
    /// Seed for every random choice; overrides the config file's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Training/data configuration (TOML or JSON, chosen by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "wsdet-out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a dataset: feature grids, CAM heatmaps, manifest and
    /// ground-truth JSONL.
    Generate {
        /// Number of images; defaults to the config's n_train + n_test.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Keep boxes on a fraction of a fully annotated dataset and demote the
    /// rest to image-level labels.
    Split {
        /// Dataset manifest to split.
        #[arg(long)]
        manifest: PathBuf,
        /// Fraction keeping boxes; defaults to the config's data.ratio.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Convert heatmaps into CAM boxes. The image id is the file stem.
    Cam2box(Cam2BoxArgs),
    /// Per-image non-maximum suppression of a detection file.
    Nms {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU_NMS)]
        tau_nms: f64,
    },
    /// Fuse teacher detections with CAM boxes into pseudo-labels.
    Fuse {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        cam: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU_NMS)]
        tau_nms: f64,
        /// Current training epoch, counted from 0.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        #[arg(long, default_value_t = DEFAULT_CAM_EPOCHS)]
        cam_epochs: usize,
    },
    /// Train the toy detector on the synthetic benchmark described by
    /// --config.
    TrainSim,
    /// Score detections against ground truth: mAP, Recall@0.5FPPI, FROC.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU)]
        iou: f64,
        /// Also write the precision-recall curve as CSV to this path.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Cam2BoxArgs {
    /// Heatmap files (binary format or PGM).
    #[arg(required = true)]
    pub heatmaps: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
    pub min_area: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_AREA)]
    pub max_area: usize,
    /// Image-level classifier score given to every box.
    #[arg(long, default_value_t = 1.0)]
    pub score: f64,
    #[arg(long, default_value = "8")]
    pub connectivity: Connectivity,
}

/// Reads a [`TrainConfig`] from TOML or JSON.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| Error::format(path, e.to_string())),
        Some("json") => serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string())),
        _ => Err(Error::format(path, "config must have a .toml or .json extension")),
    }
}

/// Caps the global rayon pool at `WSDET_THREADS` when set.
pub fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(vec![format!("{THREADS_ENV} = {raw:?} must be a positive integer")]))?;
    // A pool that already exists (e.g. in tests) is left as is.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn pretty(value: &impl serde::Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

/// Runs one invocation and returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let config = cli.config.as_deref().map(load_config).transpose()?;
    let out = &cli.out;
    let mut files = OutputSet::new();
    let params = match &cli.command {
        Command::Generate { n } => generate(cli, config, *n, &mut files)?,
        Command::Split { manifest, ratio } => split(cli, config, manifest, *ratio, &mut files)?,
        Command::Cam2box(args) => cam2box(out, args, &mut files)?,
        Command::Nms { detections, tau_nms } => nms_cmd(out, detections, *tau_nms, &mut files)?,
        Command::Fuse {
            teacher,
            cam,
            tau_nms,
            epoch,
            cam_epochs,
        } => fuse(out, teacher, cam, *tau_nms, *epoch, *cam_epochs, &mut files)?,
        Command::TrainSim => train_sim(cli, config, &mut files)?,
        Command::Eval {
            gt,
            detections,
            iou,
            pr_csv,
        } => eval(out, gt, detections, *iou, pr_csv.as_deref(), &mut files)?,
    };
    files.add(out.join(PARAMS_FILE), pretty(&params));
    files.commit()
}

fn generate(cli: &Cli, config: Option<TrainConfig>, n: Option<usize>, files: &mut OutputSet) -> Result<serde_json::Value> {
    let config = config.unwrap_or_default();
    let seed = cli.seed.unwrap_or(config.seed);
    let n = n.unwrap_or(config.data.n_train + config.data.n_test);
    if n == 0 {
        return Err(Error::InvalidConfig(vec!["--n must be at least 1".into()]));
    }
    let synthetic = config.data.synthetic;
    let records = generate_synthetic(n, seed, &synthetic)?;
    let mut entries = Vec::with_capacity(records.len());
    let mut gt = Vec::new();
    for r in &records {
        let features = PathBuf::from("features").join(format!("{}.bin", r.image_id));
        files.add(cli.out.join(&features), encode_feature_grid(&r.features));
        let heatmap = r.heatmap.as_ref().map(|h| {
            let p = PathBuf::from("heatmaps").join(format!("{}.bin", r.image_id));
            files.add(cli.out.join(&p), encode_heatmap(h));
            p
        });
        if r.boxes().is_empty() {
            gt.push(GroundTruthRecord {
                image_id: r.image_id.clone(),
                bbox: None,
            });
        }
        gt.extend(r.boxes().iter().map(|b| GroundTruthRecord {
            image_id: r.image_id.clone(),
            bbox: Some(*b),
        }));
        entries.push(ManifestEntry {
            image_id: r.image_id.clone(),
            annotation: r.annotation.clone(),
            features,
            heatmap,
            classifier_score: r.classifier_score,
            auxiliary_image_id: r.auxiliary_image_id.clone(),
        });
    }
    let manifest = DatasetManifest {
        protocol: None,
        records: entries,
    };
    files.add(cli.out.join(MANIFEST_FILE), pretty(&manifest));
    files.add(cli.out.join("gt.jsonl"), encode_jsonl(&gt));
    Ok(json!({"command": "generate", "seed": seed, "n": n, "synthetic": synthetic}))
}

fn split(
    cli: &Cli,
    config: Option<TrainConfig>,
    manifest_path: &Path,
    ratio: Option<f64>,
    files: &mut OutputSet,
) -> Result<serde_json::Value> {
    let config = config.unwrap_or_default();
    let seed = cli.seed.unwrap_or(config.seed);
    let ratio = ratio.unwrap_or(config.data.ratio);
    let (manifest, records) = load_dataset(manifest_path)?;
    let split = split_partial(&records, ratio, seed)?;

    // Payload paths are rewritten relative to the output directory.
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let source_dir = manifest_path.parent().unwrap_or(Path::new("")).to_path_buf();
    let source_dir = if source_dir.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        source_dir
    };
    let by_id: BTreeMap<&str, &ManifestEntry> = manifest.records.iter().map(|e| (e.image_id.as_str(), e)).collect();
    let mut entries = Vec::with_capacity(records.len());
    for r in split.fully.iter().chain(&split.weakly) {
        let src = by_id[r.image_id.as_str()];
        entries.push(ManifestEntry {
            annotation: r.annotation.clone(),
            features: relative_to(&source_dir.join(&src.features), &cli.out)?,
            heatmap: src
                .heatmap
                .as_ref()
                .map(|h| relative_to(&source_dir.join(h), &cli.out))
                .transpose()?,
            ..src.clone()
        });
    }
    // Restore the source order so the manifest reads like its input.
    let position: BTreeMap<&str, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, e)| (e.image_id.as_str(), i))
        .collect();
    entries.sort_by_key(|e| position[e.image_id.as_str()]);
    let out_manifest = DatasetManifest {
        protocol: Some(split.protocol),
        records: entries,
    };
    files.add(cli.out.join(MANIFEST_FILE), pretty(&out_manifest));
    let protocol = match split.protocol {
        Protocol::Full => "full".to_string(),
        Protocol::Partial { ratio } => format!("partial({ratio})"),
    };
    Ok(json!({
        "command": "split",
        "seed": seed,
        "ratio": ratio,
        "manifest": manifest_path,
        "fully": split.fully.len(),
        "weakly": split.weakly.len(),
        "protocol": protocol,
    }))
}

fn cam2box(out: &Path, args: &Cam2BoxArgs, files: &mut OutputSet) -> Result<serde_json::Value> {
    let config = CamBoxConfig {
        tau: args.tau,
        min_area: args.min_area,
        max_area: args.max_area,
        connectivity: args.connectivity,
    };
    config.validate()?;
    let mut records = Vec::new();
    for path in &args.heatmaps {
        let heatmap = read_heatmap(path)?;
        let image_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(path, "file name is not valid UTF-8"))?;
        for det in cam_to_boxes(&heatmap, &config, args.score)? {
            records.push(DetectionRecord::new(image_id, &det));
        }
    }
    files.add(out.join("cam.jsonl"), encode_jsonl(&records));
    Ok(json!({
        "command": "cam2box",
        "heatmaps": args.heatmaps,
        "tau": config.tau,
        "min_area": config.min_area,
        "max_area": config.max_area,
        "score": args.score,
        "connectivity": config.connectivity,
    }))
}

/// Detections grouped by image id, ids in sorted order.
fn read_grouped(path: &Path) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut groups: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    let records: Vec<DetectionRecord> = read_jsonl(path)?;
    for (i, r) in records.into_iter().enumerate() {
        let det = r.detection().map_err(|e| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        groups.entry(r.image_id).or_default().push(det);
    }
    Ok(groups)
}

/// Image id, then score descending; equal scores keep their order.
fn flatten_sorted(groups: BTreeMap<String, Vec<Detection>>) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    for (id, mut dets) in groups {
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.extend(dets.iter().map(|d| DetectionRecord::new(id.clone(), d)));
    }
    out
}

fn nms_cmd(out: &Path, detections: &Path, tau_nms: f64, files: &mut OutputSet) -> Result<serde_json::Value> {
    crate::error::check_closed_unit("tau_nms", tau_nms)?;
    let groups = read_grouped(detections)?
        .into_iter()
        .map(|(id, dets)| (id, nms(&dets, tau_nms)))
        .collect();
    files.add(out.join("nms.jsonl"), encode_jsonl(&flatten_sorted(groups)));
    Ok(json!({"command": "nms", "detections": detections, "tau_nms": tau_nms}))
}

fn fuse(
    out: &Path,
    teacher: &Path,
    cam: &Path,
    tau_nms: f64,
    epoch: usize,
    cam_epochs: usize,
    files: &mut OutputSet,
) -> Result<serde_json::Value> {
    crate::error::check_closed_unit("tau_nms", tau_nms)?;
    let mut teacher_groups = read_grouped(teacher)?;
    let cam_groups = read_grouped(cam)?;
    let mut fused = BTreeMap::new();
    let ids: Vec<String> = teacher_groups.keys().chain(cam_groups.keys()).cloned().collect();
    for id in ids {
        if fused.contains_key(&id) {
            continue;
        }
        let t = teacher_groups.remove(&id).unwrap_or_default();
        let c = cam_groups.get(&id).map(Vec::as_slice).unwrap_or(&[]);
        fused.insert(id, fuse_pseudo_labels(&t, c, tau_nms, epoch, cam_epochs));
    }
    files.add(out.join("fused.jsonl"), encode_jsonl(&flatten_sorted(fused)));
    Ok(json!({
        "command": "fuse",
        "teacher": teacher,
        "cam": cam,
        "tau_nms": tau_nms,
        "epoch": epoch,
        "cam_epochs": cam_epochs,
    }))
}

fn train_sim(cli: &Cli, config: Option<TrainConfig>, files: &mut OutputSet) -> Result<serde_json::Value> {
    let mut config = config.ok_or_else(|| Error::InvalidConfig(vec!["train-sim requires --config".into()]))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let report = run_benchmark(&config)?;
    files.add(cli.out.join("report.json"), pretty(&report));
    for (name, state) in [("teacher.ckpt", &report.teacher), ("student.ckpt", &report.student)] {
        let state = state.as_ref().expect("train returns final states");
        files.add(cli.out.join(name), encode_checkpoint(state));
    }
    Ok(json!({"command": "train-sim", "config": config}))
}

fn eval(
    out: &Path,
    gt_path: &Path,
    det_path: &Path,
    iou: f64,
    pr_csv: Option<&Path>,
    files: &mut OutputSet,
) -> Result<serde_json::Value> {
    crate::error::check_closed_unit("iou", iou)?;
    let mut set = EvalSet::new();
    let gts: Vec<GroundTruthRecord> = read_jsonl(gt_path)?;
    for g in gts {
        match g.bbox {
            Some(b) => set.add_ground_truth(g.image_id, b),
            None => set.add_image(g.image_id),
        }
    }
    let dets: Vec<DetectionRecord> = read_jsonl(det_path)?;
    for (i, r) in dets.into_iter().enumerate() {
        let line_err = |e: Error| Error::Jsonl {
            path: det_path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        };
        let det = r.detection().map_err(line_err)?;
        set.add_detection(&r.image_id, det).map_err(line_err)?;
    }
    let map = mean_average_precision(&set, iou)?;
    let curve = froc(&set, iou)?;
    let recall = recall_at_fppi(&curve, 0.5)?;
    files.add(
        out.join("metrics.json"),
        pretty(&json!({
            "map": map,
            "recall_at_0.5_fppi": recall,
            "froc": curve,
            "images": set.image_count(),
            "ground_truth": set.ground_truth_count(),
        })),
    );
    if let Some(csv) = pr_csv {
        let mut text = String::from("score,recall,precision\n");
        for p in precision_recall(&set, iou)? {
            text.push_str(&format!("{},{},{}\n", p.score, p.recall, p.precision));
        }
        files.add(csv, text.into_bytes());
    }
    Ok(json!({
        "command": "eval",
        "gt": gt_path,
        "detections": det_path,
        "iou": iou,
        "pr_csv": pr_csv,
    }))
}
