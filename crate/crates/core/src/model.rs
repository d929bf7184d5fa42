//! Patch backbone, projection heads, EMA teacher and centering.
//!
//! The backbone maps a batch of equally sized views to a dense token matrix
//! `z` (`K` rows per view, row-major over the token grid, the same order as
//! [`crate::geometry::token_centers`]) and a pooled global vector per view.
//! Blocks are either single-head self-attention or a mean-token mixer; both
//! are equivariant to token permutations when positional terms are off.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::child_rng;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::numerics::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;
/// Guard for the head bottleneck normalisation.
pub const BOTTLENECK_EPS: f64 = 1e-9;
const POS_FEATURES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Attention,
    MeanMix,
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "attention" => Ok(BlockKind::Attention),
            "meanmix" | "mean_mix" => Ok(BlockKind::MeanMix),
            other => Err(Error::Config(format!("unknown block kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockKind::Attention => "attention",
            BlockKind::MeanMix => "meanmix",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Patch size `r`.
    pub patch: usize,
    /// Feature dimension `d`.
    pub dim: usize,
    pub depth: usize,
    pub block: BlockKind,
    pub mlp_hidden: usize,
    pub pos_embed: bool,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    /// Prototype count `I`.
    pub prototypes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            dim: 32,
            depth: 2,
            block: BlockKind::Attention,
            mlp_hidden: 64,
            pos_embed: true,
            head_hidden: 64,
            head_bottleneck: 32,
            prototypes: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes < 2 {
            return Err(Error::Config("prototype count must be at least 2".into()));
        }
        if self.dim < 4 {
            return Err(Error::Config("feature dimension must be at least 4".into()));
        }
        if self.patch == 0 || self.mlp_hidden == 0 || self.head_hidden == 0 || self.head_bottleneck == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Global,
    Local,
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Global => "global_head",
            Head::Local => "local_head",
        }
    }
}

fn layout(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
    ];
    if cfg.pos_embed {
        out.push(("pos_embed.weight".into(), vec![POS_FEATURES, d]));
    }
    for b in 0..cfg.depth {
        let p = format!("blocks.{b}");
        out.push((format!("{p}.norm1.gain"), vec![d]));
        out.push((format!("{p}.norm1.bias"), vec![d]));
        match cfg.block {
            BlockKind::Attention => {
                for m in ["q", "k", "v"] {
                    out.push((format!("{p}.attn.{m}.weight"), vec![d, d]));
                }
                out.push((format!("{p}.attn.out.weight"), vec![d, d]));
                out.push((format!("{p}.attn.out.bias"), vec![d]));
            }
            BlockKind::MeanMix => {
                out.push((format!("{p}.mix.weight"), vec![d, d]));
                out.push((format!("{p}.mix.bias"), vec![d]));
            }
        }
        out.push((format!("{p}.norm2.gain"), vec![d]));
        out.push((format!("{p}.norm2.bias"), vec![d]));
        out.push((format!("{p}.mlp.fc1.weight"), vec![d, cfg.mlp_hidden]));
        out.push((format!("{p}.mlp.fc1.bias"), vec![cfg.mlp_hidden]));
        out.push((format!("{p}.mlp.fc2.weight"), vec![cfg.mlp_hidden, d]));
        out.push((format!("{p}.mlp.fc2.bias"), vec![d]));
    }
    out.push(("norm.gain".into(), vec![d]));
    out.push(("norm.bias".into(), vec![d]));
    for head in [Head::Global, Head::Local] {
        let p = head.prefix();
        out.push((format!("{p}.fc1.weight"), vec![d, cfg.head_hidden]));
        out.push((format!("{p}.fc1.bias"), vec![cfg.head_hidden]));
        out.push((format!("{p}.fc2.weight"), vec![cfg.head_hidden, cfg.head_bottleneck]));
        out.push((format!("{p}.fc2.bias"), vec![cfg.head_bottleneck]));
        out.push((format!("{p}.prototypes"), vec![cfg.prototypes, cfg.head_bottleneck]));
    }
    out
}

impl Params {
    /// Random initialisation: weights `N(0, 1/fan_in)`, prototypes `N(0, 1)`,
    /// gains one, biases zero.
    pub fn init(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let entries = layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".gain") {
                    vec![1.0; n]
                } else if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let std = if name.ends_with("prototypes") {
                        1.0
                    } else {
                        1.0 / (shape[0] as f64).sqrt()
                    };
                    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
                };
                (name, Tensor::from_parts(shape, data))
            })
            .collect();
        Ok(Self::from_entries(entries))
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    /// Checks names and shapes against the layout of `cfg`.
    pub fn check_layout(&self, cfg: &BackboneConfig) -> Result<()> {
        let expected = layout(cfg);
        if expected.len() != self.names.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match config ({})",
                self.names.len(),
                expected.len()
            )));
        }
        for ((name, shape), (n, t)) in expected.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {n} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Biases and normalisation gains are excluded from weight decay.
    pub fn decays(&self, i: usize) -> bool {
        let n = &self.names[i];
        !(n.ends_with(".bias") || n.ends_with(".gain"))
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Bound { params: self, vars }
    }

    /// Registers every tensor on `tape` as a constant.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        Bound { params: self, vars }
    }
}

/// Parameters registered on a tape.
pub struct Bound<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Backbone output for a group of equally sized views.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOut {
    /// `[V, d]` pooled global representations.
    pub global: Var,
    /// `[V*K, d]` dense representations, view-major.
    pub dense: Var,
    pub tokens_per_view: usize,
    pub views: usize,
}

fn pos_features(gh: usize, gw: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut out = Vec::with_capacity(gh * gw * POS_FEATURES);
    for i in 0..gh {
        let v = (i as f64 + 0.5) / gh as f64;
        for j in 0..gw {
            let u = (j as f64 + 0.5) / gw as f64;
            out.extend_from_slice(&[
                (PI * u).sin(),
                (PI * u).cos(),
                (PI * v).sin(),
                (PI * v).cos(),
                (2.0 * PI * u).sin(),
                (2.0 * PI * u).cos(),
                (2.0 * PI * v).sin(),
                (2.0 * PI * v).cos(),
            ]);
        }
    }
    out
}

fn linear(tape: &mut Tape, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{prefix}.weight"))?)?;
    tape.add_row(y, p.var(&format!("{prefix}.bias"))?)
}

fn norm(tape: &mut Tape, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.layer_norm(x, LN_EPS)?;
    let y = tape.mul_row(y, p.var(&format!("{prefix}.gain"))?)?;
    tape.add_row(y, p.var(&format!("{prefix}.bias"))?)
}

/// Per-channel input normalisation applied before the patch embedding.
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Runs the backbone on views of identical size.
pub fn forward(tape: &mut Tape, p: &Bound, cfg: &BackboneConfig, views: &[&Image]) -> Result<BackboneOut> {
    let first = views
        .first()
        .ok_or_else(|| Error::invalid("forward on an empty batch"))?;
    let (h, w) = (first.height(), first.width());
    if views.iter().any(|v| v.height() != h || v.width() != w) {
        return Err(Error::invalid("forward requires views of one size"));
    }
    let r = cfg.patch;
    if h % r != 0 || w % r != 0 {
        return Err(Error::invalid(format!("view size {h}x{w} not divisible by patch {r}")));
    }
    let (gh, gw) = (h / r, w / r);
    let k = gh * gw;
    let n = views.len();
    let d = cfg.dim;

    let mut patches = Vec::with_capacity(n * k * cfg.patch_dim());
    for v in views {
        patches.extend(v.patchify(r)?.into_data());
    }
    for (i, x) in patches.iter_mut().enumerate() {
        let c = i % CHANNELS;
        *x = (*x - INPUT_MEAN[c]) / INPUT_STD[c];
    }
    let patches = tape.constant(Tensor::new(vec![n * k, cfg.patch_dim()], patches)?);
    let mut x = linear(tape, p, patches, "patch_embed")?;
    if cfg.pos_embed {
        let one = pos_features(gh, gw);
        let feats: Vec<f64> = (0..n).flat_map(|_| one.iter().copied()).collect();
        let feats = tape.constant(Tensor::new(vec![n * k, POS_FEATURES], feats)?);
        let pe = tape.matmul(feats, p.var("pos_embed.weight")?)?;
        x = tape.add(x, pe)?;
    }
    let owner: Vec<usize> = (0..n * k).map(|i| i / k).collect();
    for b in 0..cfg.depth {
        let pre = format!("blocks.{b}");
        let hdn = norm(tape, p, x, &format!("{pre}.norm1"))?;
        let mixed = match cfg.block {
            BlockKind::Attention => {
                let q = tape.matmul(hdn, p.var(&format!("{pre}.attn.q.weight"))?)?;
                let kk = tape.matmul(hdn, p.var(&format!("{pre}.attn.k.weight"))?)?;
                let v = tape.matmul(hdn, p.var(&format!("{pre}.attn.v.weight"))?)?;
                let q = tape.reshape(q, &[n, k, d])?;
                let kk = tape.reshape(kk, &[n, k, d])?;
                let v = tape.reshape(v, &[n, k, d])?;
                let scores = tape.batch_matmul(q, kk, true)?;
                let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
                let attn = tape.softmax(scores, 1.0)?;
                let o = tape.batch_matmul(attn, v, false)?;
                let o = tape.reshape(o, &[n * k, d])?;
                linear(tape, p, o, &format!("{pre}.attn.out"))?
            }
            BlockKind::MeanMix => {
                let pooled = tape.mean_groups(hdn, k)?;
                let spread = tape.gather_rows(pooled, &owner)?;
                linear(tape, p, spread, &format!("{pre}.mix"))?
            }
        };
        x = tape.add(x, mixed)?;
        let hdn = norm(tape, p, x, &format!("{pre}.norm2"))?;
        let m = linear(tape, p, hdn, &format!("{pre}.mlp.fc1"))?;
        let m = tape.gelu(m)?;
        let m = linear(tape, p, m, &format!("{pre}.mlp.fc2"))?;
        x = tape.add(x, m)?;
    }
    let dense = norm(tape, p, x, "norm")?;
    let global = tape.mean_groups(dense, k)?;
    Ok(BackboneOut {
        global,
        dense,
        tokens_per_view: k,
        views: n,
    })
}

/// Projection head: MLP, L2-normalised bottleneck, then cosine logits
/// against unit-norm prototypes.
pub fn head_logits(tape: &mut Tape, p: &Bound, head: Head, rep: Var) -> Result<Var> {
    let pre = head.prefix();
    let h = linear(tape, p, rep, &format!("{pre}.fc1"))?;
    let h = tape.gelu(h)?;
    let h = linear(tape, p, h, &format!("{pre}.fc2"))?;
    let h = tape.l2_normalize_rows(h, BOTTLENECK_EPS)?;
    let protos = tape.l2_normalize_rows(p.var(&format!("{pre}.prototypes"))?, BOTTLENECK_EPS)?;
    tape.matmul_ext(h, protos, true)
}

/// Student/teacher temperatures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub student: f64,
    pub teacher: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            student: 0.1,
            teacher: 0.04,
        }
    }
}

/// Student distribution `softmax(logits / tau_s)`, differentiable.
pub fn student_probs(tape: &mut Tape, logits: Var, tau: f64) -> Result<Var> {
    tape.softmax(logits, tau)
}

/// Teacher distribution `softmax((logits - c) / tau_t)`, a plain value.
pub fn teacher_probs(logits: &Tensor, center: &[f64], tau: f64) -> Result<Tensor> {
    if center.len() != logits.cols() {
        return Err(Error::shape(
            "teacher_probs",
            format!("center of length {} for {:?} logits", center.len(), logits.shape()),
        ));
    }
    let cols = logits.cols();
    let shifted: Vec<f64> = logits
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v - center[i % cols])
        .collect();
    crate::numerics::softmax_rows(&Tensor::new(logits.shape().to_vec(), shifted)?, tau)
}

/// `theta_t <- lambda * theta_t + (1 - lambda) * theta_s`, elementwise.
pub fn ema_update(teacher: &mut Params, student: &Params, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("EMA momentum {lambda} outside [0, 1]")));
    }
    if teacher.names != student.names
        || teacher
            .tensors
            .iter()
            .zip(&student.tensors)
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::shape("ema_update", "teacher and student layouts differ"));
    }
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = lambda * *a + (1.0 - lambda) * b;
        }
    }
    Ok(())
}

/// `c <- m * c + (1 - m) * mean(rows)` over all rows of every batch entry.
pub fn center_update(center: &mut [f64], batches: &[&Tensor], momentum: f64) -> Result<()> {
    let cols = center.len();
    let mut sum = vec![0.0; cols];
    let mut count = 0usize;
    for b in batches {
        if b.cols() != cols {
            return Err(Error::shape(
                "center_update",
                format!("{:?} vs center {cols}", b.shape()),
            ));
        }
        for row in b.iter_rows() {
            sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("center_update on an empty batch"));
    }
    for (c, s) in center.iter_mut().zip(sum) {
        *c = momentum * *c + (1.0 - momentum) * s / count as f64;
    }
    Ok(())
}

/// Student and teacher parameters, centring vectors and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: BackboneConfig,
    pub student: Params,
    pub teacher: Params,
    /// Centre of the global head's teacher logits.
    pub center: Vec<f64>,
    /// Centre of the local head's teacher logits.
    pub local_center: Vec<f64>,
    pub step: u64,
}

impl ModelState {
    /// Student and teacher start from the same random parameters.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = child_rng(seed, 0x1417);
        let student = Params::init(&config, &mut rng)?;
        Ok(Self {
            teacher: student.clone(),
            center: vec![0.0; config.prototypes],
            local_center: vec![0.0; config.prototypes],
            student,
            config,
            step: 0,
        })
    }
}

/// Inference-only encoding: `(global [V, d], dense [V*K, d])`.
pub fn encode(params: &Params, cfg: &BackboneConfig, views: &[&Image]) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let out = forward(&mut tape, &bound, cfg, views)?;
    Ok((tape.value(out.global).clone(), tape.value(out.dense).clone()))
}

/// Reads the `K` dense rows of view `v` out of a view-major dense matrix.
pub fn view_rows(dense: &Tensor, v: usize, k: usize) -> Tensor {
    let d = dense.cols();
    Tensor::from_parts(vec![k, d], dense.data()[v * k * d..(v + 1) * k * d].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::child_rng;

    fn small_cfg(block: BlockKind, pos: bool) -> BackboneConfig {
        BackboneConfig {
            patch: 4,
            dim: 8,
            depth: 2,
            block,
            mlp_hidden: 12,
            pos_embed: pos,
            head_hidden: 10,
            head_bottleneck: 6,
            prototypes: 16,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn output_shapes() {
        let cfg = BackboneConfig::default();
        let params = Params::init(&cfg, &mut child_rng(1, 0)).unwrap();
        let img = Image::filled(64, 64, [0.2, 0.4, 0.6]);
        let (g, z) = encode(&params, &cfg, &[&img]).unwrap();
        assert_eq!(g.shape(), &[1, cfg.dim]);
        assert_eq!(z.shape(), &[16, cfg.dim]);
    }

    #[test]
    fn uniform_input_gives_identical_rows() {
        for block in [BlockKind::Attention, BlockKind::MeanMix] {
            let cfg = small_cfg(block, false);
            let params = Params::init(&cfg, &mut child_rng(2, 0)).unwrap();
            let img = Image::filled(16, 16, [0.3, 0.1, 0.9]);
            let (g, z) = encode(&params, &cfg, &[&img]).unwrap();
            for row in z.iter_rows() {
                for (a, b) in row.iter().zip(z.row(0)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            for (a, b) in g.data().iter().zip(z.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_permutation_permutes_tokens() {
        let mut rng = child_rng(3, 0);
        for block in [BlockKind::Attention, BlockKind::MeanMix] {
            let cfg = small_cfg(block, false);
            let params = Params::init(&cfg, &mut rng).unwrap();
            let colors: Vec<[f64; 3]> = (0..16).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
            let img = Image::from_fn(16, 16, |y, x| colors[(y / 4) * 4 + x / 4]);
            let shuffled = Image::from_fn(16, 16, |y, x| colors[perm[(y / 4) * 4 + x / 4]]);
            let (_, z) = encode(&params, &cfg, &[&img]).unwrap();
            let (_, zp) = encode(&params, &cfg, &[&shuffled]).unwrap();
            for k in 0..16 {
                for (a, b) in zp.row(k).iter().zip(z.row(perm[k])) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn bright_patch_lands_on_its_token() {
        let cfg = small_cfg(BlockKind::Attention, false);
        let params = Params::init(&cfg, &mut child_rng(4, 0)).unwrap();
        for target in [0usize, 6, 13] {
            let (ti, tj) = (target / 4, target % 4);
            let img = Image::from_fn(
                16,
                16,
                |y, x| if y / 4 == ti && x / 4 == tj { [1.0; 3] } else { [0.1; 3] },
            );
            let (_, z) = encode(&params, &cfg, &[&img]).unwrap();
            let mean: Vec<f64> = (0..cfg.dim)
                .map(|c| z.iter_rows().map(|r| r[c]).sum::<f64>() / 16.0)
                .collect();
            let dev = |k: usize| z.row(k).iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..16).max_by(|&a, &b| dev(a).total_cmp(&dev(b))).unwrap();
            assert_eq!(best, target);
        }
    }

    #[test]
    fn views_in_one_batch_are_independent() {
        let mut rng = child_rng(5, 0);
        let cfg = small_cfg(BlockKind::Attention, true);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let (_, both) = encode(&params, &cfg, &[&a, &b]).unwrap();
        let (_, only_b) = encode(&params, &cfg, &[&b]).unwrap();
        assert!(view_rows(&both, 1, 16).max_abs_diff(&only_b) < 1e-12);
    }

    #[test]
    fn head_outputs_are_distributions() {
        let mut rng = child_rng(6, 0);
        let cfg = small_cfg(BlockKind::Attention, true);
        let params = Params::init(&cfg, &mut rng).unwrap();
        let img = random_image(&mut rng, 16, 16);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let out = forward(&mut tape, &p, &cfg, &[&img]).unwrap();
        let logits = head_logits(&mut tape, &p, Head::Local, out.dense).unwrap();
        let probs = student_probs(&mut tape, logits, 0.1).unwrap();
        for row in tape.value(probs).iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
        let t = teacher_probs(tape.value(logits), &[0.0; 16], 0.04).unwrap();
        for row in t.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_weights_equal_temperatures_agree() {
        let mut rng = child_rng(7, 0);
        let cfg = small_cfg(BlockKind::MeanMix, true);
        let state = ModelState::init(cfg.clone(), 9).unwrap();
        assert_eq!(state.student, state.teacher);
        let img = random_image(&mut rng, 16, 16);
        let mut tape = Tape::new();
        let s = state.student.bind(&mut tape);
        let t = state.teacher.bind(&mut tape);
        let so = forward(&mut tape, &s, &cfg, &[&img]).unwrap();
        let to = forward(&mut tape, &t, &cfg, &[&img]).unwrap();
        let sl = head_logits(&mut tape, &s, Head::Global, so.global).unwrap();
        let tl = head_logits(&mut tape, &t, Head::Global, to.global).unwrap();
        let sp = student_probs(&mut tape, sl, 0.07).unwrap();
        let tp = teacher_probs(tape.value(tl), &state.center, 0.07).unwrap();
        assert!(tape.value(sp).max_abs_diff(&tp) < 1e-15);
    }

    #[test]
    fn sharp_teacher_approaches_one_hot() {
        let logits = Tensor::matrix(1, 4, vec![0.1, 0.5, 0.3, -0.2]).unwrap();
        let p = teacher_probs(&logits, &[0.0; 4], 1e-3).unwrap();
        assert!(p.data()[1] > 1.0 - 1e-12);
    }

    #[test]
    fn centred_teacher_matches_direct_softmax() {
        let mut rng = child_rng(8, 0);
        let logits = Tensor::matrix(5, 6, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let center: Vec<f64> = (0..6)
            .map(|c| (0..5).map(|r| logits.row(r)[c]).sum::<f64>() / 5.0)
            .collect();
        let p = teacher_probs(&logits, &center, 0.04).unwrap();
        for r in 0..5 {
            let e: Vec<f64> = (0..6).map(|c| ((logits.row(r)[c] - center[c]) / 0.04).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..6 {
                assert!((p.row(r)[c] - e[c] / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_identities() {
        let cfg = small_cfg(BlockKind::Attention, true);
        let s = Params::init(&cfg, &mut child_rng(10, 0)).unwrap();
        let t0 = Params::init(&cfg, &mut child_rng(11, 0)).unwrap();
        let mut t = t0.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, t0);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
        let mut t = t0.clone();
        ema_update(&mut t, &s, 0.996).unwrap();
        for ((a, b), c) in t.tensors().iter().zip(t0.tensors()).zip(s.tensors()) {
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
                assert!((x - (0.996 * y + 0.004 * z)).abs() < 1e-15);
            }
        }
        assert!(ema_update(&mut t, &s, 1.5).is_err());
    }

    #[test]
    fn center_update_blend() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();
        let b = Tensor::matrix(1, 3, vec![5.0, 5.0, 5.0]).unwrap();
        let mut c = vec![1.0, -1.0, 0.0];
        center_update(&mut c, &[&a, &b], 1.0).unwrap();
        assert_eq!(c, vec![1.0, -1.0, 0.0]);
        center_update(&mut c, &[&a, &b], 0.0).unwrap();
        assert_eq!(c, vec![3.0, 3.0, 3.0]);
        let mut c = vec![1.0, -1.0, 0.0];
        center_update(&mut c, &[&a, &b], 0.9).unwrap();
        let expect = [0.9 * 1.0 + 0.1 * 3.0, -0.9 + 0.1 * 3.0, 0.1 * 3.0];
        for (x, y) in c.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(center_update(&mut c, &[], 0.9).is_err());
    }

    #[test]
    fn zero_bottleneck_is_an_error() {
        let cfg = small_cfg(BlockKind::Attention, false);
        let mut params = Params::init(&cfg, &mut child_rng(12, 0)).unwrap();
        for (n, t) in params.names.clone().iter().zip(params.tensors_mut()) {
            if n.starts_with("global_head.fc2") {
                t.data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let rep = tape.constant(Tensor::matrix(1, 8, vec![1.0; 8]).unwrap());
        assert!(matches!(
            head_logits(&mut tape, &p, Head::Global, rep),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn rejects_invalid_config() {
        let mut cfg = small_cfg(BlockKind::Attention, false);
        cfg.prototypes = 1;
        assert!(cfg.validate().is_err());
        cfg.prototypes = 8;
        cfg.dim = 3;
        assert!(cfg.validate().is_err());
    }
}
