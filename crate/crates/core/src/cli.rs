//! Command-line front end: `synth`, `train`, `eval` and `viz`.
//!
//! Exit codes: 0 on success, 1 on internal failure, 2 on usage or
//! configuration errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::make_views;
use crate::checkpoint;
use crate::data::{synthesize, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, KnnOptions, Which};
use crate::geometry::{geometric_match, matchings_to_jsonl, similarity_match, token_centers, MatchingRecord};
use crate::image::Image;
use crate::losses::Setting;
use crate::model::{encode, ModelState};
use crate::trainer::{init_state, train_with, Schedule, TrainConfig, METRICS_FILE};
use crate::viz::{render_svg, Panel, VizOptions};

pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Parser)]
#[command(
    name = "glsd",
    version,
    about = "Global-local self-distillation with geometric token matching"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a class-balanced synthetic texture dataset.
    Synth(SynthArgs),
    /// Train student and teacher, writing checkpoints, metrics and a run manifest.
    Train(TrainArgs),
    /// Score a checkpoint with k-NN, linear probe and correspondence benchmarks.
    Eval(EvalArgs),
    /// Draw the token matching between two views of an image as SVG.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub images: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run manifest of an earlier run to repeat.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// vanilla, similarity or geometric.
    #[arg(long)]
    pub setting: Option<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate and print the step count without training.
    #[arg(long)]
    pub dry_run: bool,
    /// Extra `key=value` overrides, applied last.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Anchor/training set; defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Held-out query set.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// knn, linear, correspondence or all.
    #[arg(long, default_value = "all")]
    pub which: String,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long)]
    pub weighted: bool,
    /// Images used for correspondence; zero uses all.
    #[arg(long, default_value_t = 0)]
    pub corr_images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// teacher or student.
    #[arg(long, default_value = "teacher")]
    pub network: String,
    /// Report path; defaults to `eval.json` in the checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// PPM or GLTD image, or a dataset directory.
    #[arg(long)]
    pub image: PathBuf,
    /// Image index when `--image` is a dataset.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Checkpoint for similarity matching; a random initialisation otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// geometric or similarity.
    #[arg(long, default_value = "geometric")]
    pub mode: String,
    /// Source and target view indices (globals first, then locals).
    #[arg(long, num_args = 2, default_values_t = [0, 1])]
    pub views: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the matching as JSON lines.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    #[arg(long, default_value_t = 8.0)]
    pub scale: f64,
    /// `key=value` config overrides when no checkpoint is given.
    pub overrides: Vec<String>,
}

/// Everything needed to trace and repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub code_hash: String,
    pub dataset: String,
    pub outputs: BTreeMap<String, String>,
}

const SOURCES: &[(&str, &str)] = &[
    ("augment.rs", include_str!("augment.rs")),
    ("checkpoint.rs", include_str!("checkpoint.rs")),
    ("cli.rs", include_str!("cli.rs")),
    ("data.rs", include_str!("data.rs")),
    ("error.rs", include_str!("error.rs")),
    ("eval.rs", include_str!("eval.rs")),
    ("geometry.rs", include_str!("geometry.rs")),
    ("image.rs", include_str!("image.rs")),
    ("lib.rs", include_str!("lib.rs")),
    ("losses.rs", include_str!("losses.rs")),
    ("model.rs", include_str!("model.rs")),
    ("numerics/gltd.rs", include_str!("numerics/gltd.rs")),
    ("numerics/gradcheck.rs", include_str!("numerics/gradcheck.rs")),
    ("numerics/mod.rs", include_str!("numerics/mod.rs")),
    ("numerics/tape.rs", include_str!("numerics/tape.rs")),
    ("numerics/tensor.rs", include_str!("numerics/tensor.rs")),
    ("trainer.rs", include_str!("trainer.rs")),
    ("viz.rs", include_str!("viz.rs")),
];

/// SHA-256 over the library sources, each framed as `path\0len\0bytes`.
pub fn code_hash() -> String {
    let mut h = Sha256::new();
    for (path, text) in SOURCES {
        h.update(path.as_bytes());
        h.update([0]);
        h.update(text.len().to_string().as_bytes());
        h.update([0]);
        h.update(text.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            write!(out, "{e}").map_err(|e| Error::io("stdout", e))?;
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            return Err(Error::Usage(text.trim_start_matches("error: ").trim_end().to_string()));
        }
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Viz(a) => cmd_viz(&a, out),
    }
}

/// Runs the CLI on the process arguments and returns the exit code.
pub fn main_exit_code() -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(std::env::args_os(), &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("stdout", e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_dir() {
        return Err(Error::Usage(format!(
            "dataset directory {} does not exist",
            path.display()
        )));
    }
    Dataset::load(path)
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let set = synthesize(&SynthConfig {
        n_images: a.images,
        n_classes: a.classes,
        size: a.size,
        seed: a.seed,
    })?;
    set.save(&a.out)?;
    say(
        out,
        format!(
            "wrote {} images of {}x{} in {} classes to {}",
            a.images,
            a.size,
            a.size,
            a.classes,
            a.out.display()
        ),
    )
}

/// Training config from the manifest, config file, flags and overrides, in
/// that order.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    if let Some(path) = &a.manifest {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        c = TrainConfig::from_snapshot(&m.config)?;
        if let Some(dir) = m.outputs.get("dir") {
            c.out_dir = dir.clone();
        }
    }
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        c.apply_text(&text)?;
    }
    if let Some(s) = &a.setting {
        c.setting = s.parse::<Setting>()?;
    }
    if let Some(d) = &a.dataset {
        c.dataset = d.display().to_string();
    }
    if let Some(o) = &a.out {
        c.out_dir = o.display().to_string();
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    for kv in &a.overrides {
        c.apply_override(kv)?;
    }
    c.validate()?;
    Ok(c)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = resolve_train_config(a)?;
    if config.dataset.is_empty() {
        return Err(Error::Usage(
            "no dataset given; pass --dataset or set dataset in the config".into(),
        ));
    }
    let dataset = load_dataset(Path::new(&config.dataset))?;
    let schedule = Schedule::new(&config, dataset.len());
    if a.dry_run {
        say(out, format!("images: {}", dataset.len()))?;
        say(out, format!("steps_per_epoch: {}", schedule.steps_per_epoch))?;
        say(out, format!("epochs: {}", config.epochs))?;
        return say(out, format!("total_steps: {}", schedule.total_steps));
    }
    if config.out_dir.is_empty() {
        return Err(Error::Usage(
            "no output directory given; pass --out or set out_dir".into(),
        ));
    }
    let dir = PathBuf::from(&config.out_dir);
    say(
        out,
        format!(
            "training {} on {} images: {} epochs x {} steps",
            config.setting,
            dataset.len(),
            config.epochs,
            schedule.steps_per_epoch
        ),
    )?;
    let mut last_epoch = None;
    let mut lines = Vec::new();
    let outcome = train_with(&config, &dataset, Some(&dir), |m| {
        if Some(m.epoch) != last_epoch {
            last_epoch = Some(m.epoch);
            lines.push(format!(
                "epoch {:>3} loss {:.4} (global {:.4}, local {:.4}) fill {:.3} collapse {:.3}",
                m.epoch, m.loss_total, m.loss_global, m.loss_local, m.mask_fill_rate, m.collapse_index
            ));
        }
    })?;
    for l in lines {
        say(out, l)?;
    }
    write_file(&dir.join(CONFIG_FILE), config.to_text())?;
    let manifest = run_manifest(&config, &dir);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&dir.join(RUN_MANIFEST_FILE), json)?;
    say(
        out,
        format!("finished {} steps; outputs in {}", outcome.state.step, dir.display()),
    )
}

fn run_manifest(config: &TrainConfig, dir: &Path) -> RunManifest {
    let mut outputs = BTreeMap::new();
    let path = |f: &str| dir.join(f).display().to_string();
    outputs.insert("dir".to_string(), dir.display().to_string());
    outputs.insert("checkpoint".to_string(), path(checkpoint::TENSORS_FILE));
    outputs.insert("checkpoint_manifest".to_string(), path(checkpoint::MANIFEST_FILE));
    outputs.insert("metrics".to_string(), path(METRICS_FILE));
    outputs.insert("config".to_string(), path(CONFIG_FILE));
    RunManifest {
        format: "glsd-run".into(),
        config: config.snapshot(),
        seed: config.seed,
        code_hash: code_hash(),
        dataset: config.dataset.clone(),
        outputs,
    }
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    if !a.checkpoint.is_dir() {
        return Err(Error::Usage(format!(
            "checkpoint directory {} does not exist",
            a.checkpoint.display()
        )));
    }
    let (state, manifest) = checkpoint::load(&a.checkpoint)?;
    let config = TrainConfig::from_snapshot(&manifest.config)?;
    let which: Which = a.which.parse()?;
    let params = match a.network.as_str() {
        "teacher" => &state.teacher,
        "student" => &state.student,
        other => {
            return Err(Error::Usage(format!(
                "network must be teacher or student, got {other:?}"
            )))
        }
    };
    let train_path = match (&a.dataset, config.dataset.as_str()) {
        (Some(p), _) => p.clone(),
        (None, "") => {
            return Err(Error::Usage(
                "no dataset given and none recorded in the checkpoint".into(),
            ))
        }
        (None, p) => PathBuf::from(p),
    };
    let train = load_dataset(&train_path)?;
    let test = a.test.as_deref().map(load_dataset).transpose()?;
    let opts = EvalOptions {
        which,
        knn: KnnOptions {
            k: a.k,
            weighted: a.weighted,
            exclude_self: false,
        },
        corr_images: a.corr_images,
        seed: a.seed,
        ..Default::default()
    };
    let report = evaluate(
        params,
        &state.config,
        config.global_size,
        &config.crops(),
        (&train.images, &train.labels),
        test.as_ref().map(|t| (t.images.as_slice(), t.labels.as_slice())),
        &opts,
    )?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    let path = a.out.clone().unwrap_or_else(|| a.checkpoint.join(EVAL_FILE));
    write_file(&path, &json)?;
    out.write_all(json.as_bytes()).map_err(|e| Error::io("stdout", e))
}

fn load_image(path: &Path, index: usize) -> Result<Image> {
    if path.is_dir() {
        let set = Dataset::load(path)?;
        let n = set.len();
        set.images
            .into_iter()
            .nth(index)
            .ok_or_else(|| Error::Usage(format!("image index {index} out of range for {n} images")))
    } else if path.is_file() {
        Image::load(path)
    } else {
        Err(Error::Usage(format!("image {} does not exist", path.display())))
    }
}

pub fn cmd_viz(a: &VizArgs, out: &mut dyn Write) -> Result<()> {
    let image = load_image(&a.image, a.index)?;
    let (config, state) = match &a.checkpoint {
        Some(dir) => {
            let (state, manifest) = checkpoint::load(dir)?;
            (TrainConfig::from_snapshot(&manifest.config)?, state)
        }
        None => {
            let mut c = TrainConfig::default();
            for kv in &a.overrides {
                c.apply_override(kv)?;
            }
            c.validate()?;
            let state: ModelState = init_state(&c)?;
            (c, state)
        }
    };
    let crops = config.crops();
    let set = make_views(&image, &crops, a.seed)?;
    let (ia, ib) = (a.views[0], a.views[1]);
    let n = set.views.len();
    if ia >= n || ib >= n {
        return Err(Error::Usage(format!("view indices must be below {n}")));
    }
    let (va, vb) = (&set.views[ia], &set.views[ib]);
    let pa = token_centers(&va.geo, &crops.downscale)?;
    let pb = token_centers(&vb.geo, &crops.downscale)?;
    let m = match a.mode.as_str() {
        "geometric" => geometric_match(&pa, &pb)?,
        "similarity" => {
            let (_, za) = encode(&state.teacher, &state.config, &[&va.image])?;
            let (_, zb) = encode(&state.teacher, &state.config, &[&vb.image])?;
            similarity_match(&za, &zb)?
        }
        other => {
            return Err(Error::Usage(format!(
                "mode must be geometric or similarity, got {other:?}"
            )))
        }
    };
    let opts = VizOptions {
        scale: a.scale,
        ..Default::default()
    };
    let svg = render_svg(
        &Panel {
            image: &va.image,
            geo: &va.geo,
            pos: &pa,
        },
        &Panel {
            image: &vb.image,
            geo: &vb.geo,
            pos: &pb,
        },
        &m,
        &opts,
    )?;
    write_file(&a.out, svg)?;
    if let Some(path) = &a.matches {
        write_file(path, matchings_to_jsonl(&[MatchingRecord::new(ia, ib, &m)])?)?;
    }
    say(
        out,
        format!(
            "{} matching of {} tokens ({} active) written to {}",
            a.mode,
            m.len(),
            m.active(),
            a.out.display()
        ),
    )
}
