//! Training loop: multi-crop views, student/teacher forwards, AdamW on the
//! student, EMA teacher, centring, schedules, metrics and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{child_rng, derive_seed, make_views, MultiCropConfig, PhotoDistribution, ViewSet};
use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::collapse_index;
use crate::geometry::{similarity_match, token_centers, DownscaleSpec};
use crate::image::Image;
use crate::losses::{total_loss, ForwardBundle, LossParts, Setting, StudentView, TeacherView};
use crate::model::{
    center_update, ema_update, forward, head_logits, student_probs, teacher_probs, view_rows, BackboneConfig,
    BlockKind, Bound, Head, ModelState, Params,
};
use crate::numerics::{Tape, Tensor, Var};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";
/// Environment variable capping the number of view-generation workers.
pub const THREADS_ENV: &str = "GLTD_THREADS";

const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;
const INIT_STREAM: u64 = 0x1A17;
const ORDER_STREAM: u64 = 0x0D3E;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmaEvery {
    Step,
    Epoch,
}

impl std::str::FromStr for EmaEvery {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(EmaEvery::Step),
            "epoch" => Ok(EmaEvery::Epoch),
            other => Err(Error::Config(format!("ema_every must be step or epoch, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for EmaEvery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmaEvery::Step => "step",
            EmaEvery::Epoch => "epoch",
        })
    }
}

/// Which teacher logits feed which centring vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Global and local heads each keep their own centre.
    PerHead,
    /// One centre over the rows of both heads, used for both.
    Pooled,
}

impl std::str::FromStr for CenterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_head" => Ok(CenterMode::PerHead),
            "pooled" => Ok(CenterMode::Pooled),
            other => Err(Error::Config(format!(
                "center_mode must be per_head or pooled, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for CenterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CenterMode::PerHead => "per_head",
            CenterMode::Pooled => "pooled",
        })
    }
}

/// Every run hyperparameter, addressable by name as `key=value`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub setting: Setting,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate is `base_lr * batch_size / 256`.
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub weight_decay_end: f64,
    pub lambda_ema: f64,
    pub lambda_ema_end: f64,
    pub ema_every: EmaEvery,
    pub tau_s: f64,
    pub tau_t: f64,
    pub tau_t_start: f64,
    pub tau_t_warmup_epochs: usize,
    pub center_momentum: f64,
    pub center_mode: CenterMode,
    pub local_weight: f64,
    /// Gradient-norm clip; zero disables clipping.
    pub clip_grad: f64,
    pub seed: u64,
    pub n_local_crops: usize,
    pub global_size: usize,
    pub local_size: usize,
    pub global_scale_min: f64,
    pub global_scale_max: f64,
    pub local_scale_min: f64,
    pub local_scale_max: f64,
    pub photometric: bool,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub block: BlockKind,
    pub mlp_hidden: usize,
    pub pos_embed: bool,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    pub prototypes: usize,
    pub dataset: String,
    pub out_dir: String,
    /// Worker cap for view generation; zero defers to the environment.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Geometric,
            epochs: 30,
            batch_size: 16,
            base_lr: 0.0005,
            min_lr: 1e-6,
            warmup_epochs: 10,
            weight_decay: 0.04,
            weight_decay_end: 0.4,
            lambda_ema: 0.996,
            lambda_ema_end: 1.0,
            ema_every: EmaEvery::Step,
            tau_s: 0.1,
            tau_t: 0.04,
            tau_t_start: 0.04,
            tau_t_warmup_epochs: 0,
            center_momentum: 0.9,
            center_mode: CenterMode::PerHead,
            local_weight: 1.0,
            clip_grad: 3.0,
            seed: 0,
            n_local_crops: 8,
            global_size: 64,
            local_size: 32,
            global_scale_min: 0.4,
            global_scale_max: 1.0,
            local_scale_min: 0.05,
            local_scale_max: 0.4,
            photometric: true,
            patch: 16,
            dim: 32,
            depth: 2,
            block: BlockKind::Attention,
            mlp_hidden: 64,
            pos_embed: true,
            head_hidden: 64,
            head_bottleneck: 32,
            prototypes: 256,
            dataset: String::new(),
            out_dir: String::new(),
            threads: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

macro_rules! config_keys {
    ($($key:ident),* $(,)?) => {
        impl TrainConfig {
            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => self.$key = parse_value(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// All fields as `(key, value)` in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string()),)*]
            }
        }
    };
}

config_keys!(
    setting,
    epochs,
    batch_size,
    base_lr,
    min_lr,
    warmup_epochs,
    weight_decay,
    weight_decay_end,
    lambda_ema,
    lambda_ema_end,
    ema_every,
    tau_s,
    tau_t,
    tau_t_start,
    tau_t_warmup_epochs,
    center_momentum,
    center_mode,
    local_weight,
    clip_grad,
    seed,
    n_local_crops,
    global_size,
    local_size,
    global_scale_min,
    global_scale_max,
    local_scale_min,
    local_scale_max,
    photometric,
    patch,
    dim,
    depth,
    block,
    mlp_hidden,
    pos_embed,
    head_hidden,
    head_bottleneck,
    prototypes,
    dataset,
    out_dir,
    threads,
);

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override must be key=value, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Fields that determine the training result; excludes output location
    /// and worker count.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| !matches!(*k, "out_dir" | "threads"))
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Inverse of [`TrainConfig::snapshot`]; missing keys keep their defaults.
    pub fn from_snapshot(snapshot: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in snapshot {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            patch: self.patch,
            dim: self.dim,
            depth: self.depth,
            block: self.block,
            mlp_hidden: self.mlp_hidden,
            pos_embed: self.pos_embed,
            head_hidden: self.head_hidden,
            head_bottleneck: self.head_bottleneck,
            prototypes: self.prototypes,
        }
    }

    pub fn crops(&self) -> MultiCropConfig {
        let mut c = MultiCropConfig::desk(self.n_local_crops);
        for g in c.global.iter_mut() {
            g.area = (self.global_scale_min, self.global_scale_max);
            g.out_h = self.global_size;
            g.out_w = self.global_size;
        }
        c.local.area = (self.local_scale_min, self.local_scale_max);
        c.local.out_h = self.local_size;
        c.local.out_w = self.local_size;
        if !self.photometric {
            for d in c.global.iter_mut().chain(std::iter::once(&mut c.local)) {
                d.photo = PhotoDistribution::disabled();
            }
        }
        c.downscale = DownscaleSpec { factor: self.patch };
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup_epochs exceeds epochs".into()));
        }
        if self.tau_s <= 0.0 || self.tau_t <= 0.0 || self.tau_t_start <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        for (name, v) in [
            ("lambda_ema", self.lambda_ema),
            ("lambda_ema_end", self.lambda_ema_end),
            ("center_momentum", self.center_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.base_lr < 0.0 || self.min_lr < 0.0 || self.clip_grad < 0.0 || self.local_weight < 0.0 {
            return Err(Error::Config(
                "learning rates, clip and loss weight must be non-negative".into(),
            ));
        }
        self.backbone().validate()?;
        self.crops().validate()
    }
}

/// Step arithmetic and the schedules derived from a config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Schedule {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    min_lr: f64,
    wd: (f64, f64),
    lambda: (f64, f64),
    tau_t: (f64, f64),
    tau_t_warmup_steps: usize,
}

/// `to + (from - to) * (1 + cos(pi * t / span)) / 2`, clamped at `t = span`.
fn cosine(from: f64, to: f64, t: usize, span: usize) -> f64 {
    if span == 0 || t >= span {
        return to;
    }
    if t == 0 {
        return from;
    }
    let x = t.min(span) as f64 / span as f64;
    to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

impl Schedule {
    pub fn new(config: &TrainConfig, n_images: usize) -> Self {
        let steps_per_epoch = n_images.div_ceil(config.batch_size);
        Self {
            steps_per_epoch,
            total_steps: steps_per_epoch * config.epochs,
            warmup_steps: steps_per_epoch * config.warmup_epochs,
            peak_lr: config.base_lr * config.batch_size as f64 / 256.0,
            min_lr: config.min_lr,
            wd: (config.weight_decay, config.weight_decay_end),
            lambda: (config.lambda_ema, config.lambda_ema_end),
            tau_t: (config.tau_t_start, config.tau_t),
            tau_t_warmup_steps: steps_per_epoch * config.tau_t_warmup_epochs,
        }
    }

    fn last(&self) -> usize {
        self.total_steps.saturating_sub(1)
    }

    /// Linear ramp from 0 over the warmup steps, then half-cosine decay
    /// reaching `min_lr` at the final step.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.last().saturating_sub(self.warmup_steps);
        cosine(self.peak_lr, self.min_lr, step - self.warmup_steps, span)
    }

    pub fn weight_decay(&self, step: usize) -> f64 {
        cosine(self.wd.0, self.wd.1, step, self.last())
    }

    /// EMA momentum for step `step`.
    pub fn ema_momentum(&self, step: usize) -> f64 {
        cosine(self.lambda.0, self.lambda.1, step, self.last())
    }

    /// EMA momentum at the end of epoch `epoch` when averaging per epoch.
    pub fn ema_momentum_epoch(&self, epoch: usize, epochs: usize) -> f64 {
        cosine(self.lambda.0, self.lambda.1, epoch, epochs.saturating_sub(1))
    }

    pub fn teacher_temp(&self, step: usize) -> f64 {
        if step >= self.tau_t_warmup_steps {
            return self.tau_t.1;
        }
        self.tau_t.0 + (self.tau_t.1 - self.tau_t.0) * step as f64 / self.tau_t_warmup_steps as f64
    }
}

/// Learning rate at `step` for `config` on a dataset of `n_images`.
pub fn lr_at(step: usize, config: &TrainConfig, n_images: usize) -> f64 {
    Schedule::new(config, n_images).lr(step)
}

/// AdamW moments for every student tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr: 0.0,
        }
    }

    /// One AdamW update with decoupled weight decay on weights only.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("adamw", "gradient count differs from parameter count"));
        }
        self.t += 1;
        self.lr = lr;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decays: Vec<bool> = (0..params.len()).map(|i| params.decays(i)).collect();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let wd = if decays[i] { weight_decay } else { 0.0 };
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                *w -= lr * (update + wd * *w);
            }
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_global: f64,
    pub loss_local: f64,
    pub mask_fill_rate: f64,
    pub grad_norm: f64,
    pub collapse_index: f64,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub metrics: StepMetrics,
    /// Largest absolute gradient that reached any teacher parameter.
    pub teacher_grad_max: f64,
}

/// Number of view-generation workers: the config value, else `GLTD_THREADS`,
/// else the available parallelism.
pub fn worker_count(config: &TrainConfig) -> usize {
    if config.threads > 0 {
        return config.threads;
    }
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// View sets for `images`, one seed each; output order follows input order.
pub fn generate_views(
    images: &[&Image],
    seeds: &[u64],
    crops: &MultiCropConfig,
    workers: usize,
) -> Result<Vec<ViewSet>> {
    let workers = workers.clamp(1, images.len().max(1));
    if workers == 1 {
        return images
            .iter()
            .zip(seeds)
            .map(|(img, &s)| make_views(img, crops, s))
            .collect();
    }
    let chunk = images.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .zip(seeds.chunks(chunk))
            .map(|(imgs, ss)| {
                scope.spawn(move || {
                    imgs.iter()
                        .zip(ss)
                        .map(|(img, &s)| make_views(img, crops, s))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::invalid("view worker panicked"))??);
        }
        Ok(out)
    })
}

/// Loss graph of one batch plus the teacher outputs needed after backward.
pub struct StepGraph {
    pub parts: LossParts,
    /// Teacher global-head logits (detached).
    pub teacher_global_logits: Var,
    /// Teacher local-head logits (detached), when a local loss is active.
    pub teacher_local_logits: Option<Var>,
    /// Teacher pre-head dense outputs of the global views, `[2B*K, d]`.
    pub teacher_dense: Tensor,
    /// Student pre-head dense outputs of the global views, `[2B*K, d]`.
    pub student_dense: Tensor,
    pub tokens_per_view: usize,
}

/// Records the full loss of `views` on `tape`: student forward on every
/// view, teacher forward on the global views with stop-gradient outputs.
#[allow(clippy::too_many_arguments)]
pub fn step_graph(
    tape: &mut Tape,
    student: &Bound,
    teacher: &Bound,
    state: &ModelState,
    views: &[ViewSet],
    config: &TrainConfig,
    tau_t: f64,
) -> Result<StepGraph> {
    if views.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = &state.config;
    let crops = config.crops();
    let n_local = config.n_local_crops;
    let dense = config.setting != Setting::Vanilla;
    let support = cfg.prototypes;
    let (sp, tp) = (student, teacher);

    let globals: Vec<&Image> = views
        .iter()
        .flat_map(|v| v.globals().iter().map(|x| &x.image))
        .collect();
    let locals: Vec<&Image> = views.iter().flat_map(|v| v.locals().iter().map(|x| &x.image)).collect();
    // student: every view
    let s_glob = forward(tape, sp, cfg, &globals)?;
    let s_gl = head_logits(tape, sp, Head::Global, s_glob.global)?;
    let s_gp = student_probs(tape, s_gl, config.tau_s)?;
    let s_gdp = if dense {
        let l = head_logits(tape, sp, Head::Local, s_glob.dense)?;
        Some(student_probs(tape, l, config.tau_s)?)
    } else {
        None
    };
    let s_gz = tape.value(s_glob.dense).clone();
    let s_loc = if n_local > 0 {
        let out = forward(tape, sp, cfg, &locals)?;
        let gl = head_logits(tape, sp, Head::Global, out.global)?;
        let gp = student_probs(tape, gl, config.tau_s)?;
        let dp = if dense {
            let l = head_logits(tape, sp, Head::Local, out.dense)?;
            Some(student_probs(tape, l, config.tau_s)?)
        } else {
            None
        };
        Some((out, gp, dp, tape.value(out.dense).clone()))
    } else {
        None
    };

    // teacher: globals only, stop-gradient on every output
    let t_out = forward(tape, tp, cfg, &globals)?;
    let t_gl = head_logits(tape, tp, Head::Global, t_out.global)?;
    let t_gl = tape.detach(t_gl);
    let t_dl = if dense {
        let l = head_logits(tape, tp, Head::Local, t_out.dense)?;
        Some(tape.detach(l))
    } else {
        None
    };
    let t_z = tape.detach(t_out.dense);
    let t_z = tape.value(t_z).clone();
    let t_gp = teacher_probs(tape.value(t_gl), &state.center, tau_t)?;
    let t_dp = t_dl
        .map(|v| {
            let c = match config.center_mode {
                CenterMode::PerHead => &state.local_center,
                CenterMode::Pooled => &state.center,
            };
            teacher_probs(tape.value(v), c, tau_t)
        })
        .transpose()?;

    let kg = s_glob.tokens_per_view;
    let mut bundles = Vec::with_capacity(views.len());
    for (b, vs) in views.iter().enumerate() {
        let mut teacher = Vec::with_capacity(2);
        let mut student = Vec::with_capacity(2 + n_local);
        for v in 0..2 {
            let row = 2 * b + v;
            let pos = token_centers(&vs.views[v].geo, &crops.downscale)?;
            teacher.push(TeacherView {
                view: v,
                global: t_gp.row(row).to_vec(),
                dense: t_dp
                    .as_ref()
                    .map_or_else(|| Tensor::zeros(&[0, support]), |d| view_rows(d, row, kg)),
                z: view_rows(&t_z, row, kg),
                pos: pos.clone(),
            });
            student.push(StudentView {
                view: v,
                global: s_gp,
                global_row: row,
                dense: s_gdp.unwrap_or(s_glob.dense),
                dense_offset: row * kg,
                z: view_rows(&s_gz, row, kg),
                pos,
            });
        }
        if let Some((out, gp, dp, z)) = &s_loc {
            let kl = out.tokens_per_view;
            for j in 0..n_local {
                let row = b * n_local + j;
                student.push(StudentView {
                    view: 2 + j,
                    global: *gp,
                    global_row: row,
                    dense: dp.unwrap_or(out.dense),
                    dense_offset: row * kl,
                    z: view_rows(z, row, kl),
                    pos: token_centers(&vs.views[2 + j].geo, &crops.downscale)?,
                });
            }
        }
        bundles.push(ForwardBundle { teacher, student });
    }

    let parts = total_loss(tape, &bundles, config.setting, config.local_weight, false)?;
    Ok(StepGraph {
        parts,
        teacher_global_logits: t_gl,
        teacher_local_logits: t_dl,
        teacher_dense: t_z,
        student_dense: s_gz,
        tokens_per_view: kg,
    })
}

/// One optimisation step on a batch of images.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut OptimizerState,
    views: &[ViewSet],
    config: &TrainConfig,
    schedule: &Schedule,
    epoch: usize,
) -> Result<StepReport> {
    let step = state.step as usize;
    let mut tape = Tape::new();
    let sp = state.student.bind(&mut tape);
    let tp = state.teacher.bind(&mut tape);
    let graph = step_graph(&mut tape, &sp, &tp, state, views, config, schedule.teacher_temp(step))?;
    let StepGraph {
        parts,
        teacher_global_logits: t_gl,
        teacher_local_logits: t_dl,
        teacher_dense: t_z,
        student_dense: s_gz,
        tokens_per_view: kg,
    } = graph;
    let grads = tape.backward(parts.total)?;

    let mut student_grads: Vec<Tensor> = sp.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
    let teacher_grad_max = tp
        .vars()
        .iter()
        .filter_map(|&v| grads.get(v))
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let grad_norm = student_grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if config.clip_grad > 0.0 && grad_norm > config.clip_grad {
        let s = config.clip_grad / (grad_norm + 1e-6);
        for g in student_grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    let mut collapse = 0.0;
    for b in 0..views.len() {
        for (a, c) in [(0, 1), (1, 0)] {
            let m = similarity_match(&view_rows(&t_z, 2 * b + a, kg), &view_rows(&s_gz, 2 * b + c, kg))?;
            collapse += collapse_index(&m)?;
        }
    }
    collapse /= (2 * views.len()) as f64;

    let lr = schedule.lr(step);
    let value = |v| tape.value(v).item().unwrap_or(0.0);
    let metrics = StepMetrics {
        step: state.step,
        epoch,
        lr,
        loss_total: value(parts.total),
        loss_global: value(parts.global),
        loss_local: value(parts.local),
        mask_fill_rate: parts.stats.fill_rate(),
        grad_norm,
        collapse_index: collapse,
    };

    opt.step(&mut state.student, &student_grads, lr, schedule.weight_decay(step))?;
    match (config.center_mode, t_dl) {
        (CenterMode::Pooled, Some(d)) => {
            center_update(
                &mut state.center,
                &[tape.value(t_gl), tape.value(d)],
                config.center_momentum,
            )?;
        }
        (CenterMode::PerHead, Some(d)) => {
            center_update(&mut state.center, &[tape.value(t_gl)], config.center_momentum)?;
            center_update(&mut state.local_center, &[tape.value(d)], config.center_momentum)?;
        }
        (_, None) => center_update(&mut state.center, &[tape.value(t_gl)], config.center_momentum)?,
    }
    if config.ema_every == EmaEvery::Step {
        ema_update(&mut state.teacher, &state.student, schedule.ema_momentum(step))?;
    }
    state.step += 1;
    Ok(StepReport {
        metrics,
        teacher_grad_max,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub metrics: Vec<StepMetrics>,
    pub schedule: Schedule,
}

/// Initial state for `config`: student and teacher share one draw.
pub fn init_state(config: &TrainConfig) -> Result<ModelState> {
    ModelState::init(config.backbone(), derive_seed(&[config.seed, INIT_STREAM]))
}

/// Seed of the view set for dataset image `index` in `epoch`.
pub fn view_seed(config: &TrainConfig, epoch: usize, index: usize) -> u64 {
    derive_seed(&[config.seed, epoch as u64, index as u64])
}

/// Image order of `epoch`.
pub fn epoch_order(config: &TrainConfig, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut child_rng(
        derive_seed(&[config.seed, epoch as u64, ORDER_STREAM]),
        0,
    ));
    order
}

/// Runs the full schedule. With `out_dir`, writes one metrics line per step
/// and a checkpoint after every epoch (and once for zero epochs).
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_with(config, dataset, out_dir, |_| {})
}

pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let schedule = Schedule::new(config, dataset.len());
    let mut state = init_state(config)?;
    let mut opt = OptimizerState::new(&state.student);
    let crops = config.crops();
    let workers = worker_count(config);
    let snapshot = config.snapshot();

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut history = Vec::with_capacity(schedule.total_steps);
    for epoch in 0..config.epochs {
        let order = epoch_order(config, epoch, dataset.len());
        for batch in order.chunks(config.batch_size) {
            let images: Vec<&Image> = batch.iter().map(|&i| &dataset.images[i]).collect();
            let seeds: Vec<u64> = batch.iter().map(|&i| view_seed(config, epoch, i)).collect();
            let views = generate_views(&images, &seeds, &crops, workers)?;
            let report = match train_step(&mut state, &mut opt, &views, config, &schedule, epoch) {
                Ok(r) => r,
                Err(e) => {
                    if let (Error::NonFinite(_), Some(dir)) = (&e, out_dir) {
                        write_diagnostic(dir, &state, epoch, &e, history.last())?;
                    }
                    return Err(e);
                }
            };
            if let Some((f, path)) = metrics_file.as_mut() {
                let mut line = serde_json::to_string(&report.metrics)?;
                line.push('\n');
                f.write_all(line.as_bytes()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_step(&report.metrics);
            history.push(report.metrics);
        }
        if config.ema_every == EmaEvery::Epoch {
            ema_update(
                &mut state.teacher,
                &state.student,
                schedule.ema_momentum_epoch(epoch, config.epochs),
            )?;
        }
        if let Some(dir) = out_dir {
            checkpoint::save(dir, &state, &snapshot)?;
        }
    }
    if let (Some(dir), 0) = (out_dir, config.epochs) {
        checkpoint::save(dir, &state, &snapshot)?;
    }
    Ok(TrainOutcome {
        state,
        metrics: history,
        schedule,
    })
}

fn write_diagnostic(
    dir: &Path,
    state: &ModelState,
    epoch: usize,
    err: &Error,
    last: Option<&StepMetrics>,
) -> Result<()> {
    let dump = serde_json::json!({
        "error": err.to_string(),
        "step": state.step,
        "epoch": epoch,
        "last_metrics": last,
        "center_max_abs": state.center.iter().fold(0.0f64, |m, c| m.max(c.abs())),
        "local_center_max_abs": state.local_center.iter().fold(0.0f64, |m, c| m.max(c.abs())),
    });
    let path = dir.join(DIAGNOSTIC_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))
}
