//! Global and local self-distillation losses.
//!
//! Each loss is a pair-averaged sum of cross-entropies `H(p_teacher, q_student)`
//! over ordered pairs `(a, b)` of a teacher view `a` and a different student
//! view `b`. With all views seen by both networks this is `N(N-1)` pairs;
//! under multi-crop the teacher sees only the two globals, giving
//! `2(N_L + 1)` pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geometric_match, similarity_match, Matching, MatchingRecord, PosEncoding};
use crate::numerics::{Tape, Tensor, Var};

/// Floor applied to student probabilities before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Global loss only.
    Vanilla,
    /// Global loss plus the similarity-matched local loss.
    Similarity,
    /// Global loss plus the geometry-matched local loss.
    Geometric,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Setting::Vanilla),
            "similarity" => Ok(Setting::Similarity),
            "geometric" => Ok(Setting::Geometric),
            other => Err(Error::Config(format!("unknown setting {other:?}"))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::Vanilla => "vanilla",
            Setting::Similarity => "similarity",
            Setting::Geometric => "geometric",
        })
    }
}

/// Which views the teacher sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairScheme {
    /// Teacher and student both see all `n` views.
    AllViews { n: usize },
    /// Teacher sees the 2 globals, student sees them plus `n_local` locals.
    MultiCrop { n_local: usize },
}

impl PairScheme {
    pub fn normalizer(self) -> usize {
        match self {
            PairScheme::AllViews { n } => n * n.saturating_sub(1),
            PairScheme::MultiCrop { n_local } => 2 * (n_local + 1),
        }
    }
}

/// Teacher outputs for one view, as plain values.
#[derive(Clone, Debug)]
pub struct TeacherView {
    pub view: usize,
    /// Global distribution over the `I` prototypes.
    pub global: Vec<f64>,
    /// `[K, I]` per-token distributions.
    pub dense: Tensor,
    /// `[K, d]` pre-head dense representation.
    pub z: Tensor,
    pub pos: PosEncoding,
}

/// Student outputs for one view, as rows of tape nodes.
#[derive(Clone, Debug)]
pub struct StudentView {
    pub view: usize,
    /// Node holding global distributions, one row per view.
    pub global: Var,
    pub global_row: usize,
    /// Node holding dense distributions, view-major.
    pub dense: Var,
    pub dense_offset: usize,
    /// `[K', d]` pre-head dense representation.
    pub z: Tensor,
    pub pos: PosEncoding,
}

impl StudentView {
    pub fn tokens(&self) -> usize {
        self.z.rows()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardBundle {
    pub teacher: Vec<TeacherView>,
    pub student: Vec<StudentView>,
}

impl ForwardBundle {
    /// Ordered `(teacher index, student index)` pairs with distinct views.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, t) in self.teacher.iter().enumerate() {
            for (b, s) in self.student.iter().enumerate() {
                if t.view != s.view {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn validate(&self, tape: &Tape) -> Result<()> {
        if self.student.len() < 2 || self.teacher.is_empty() {
            return Err(Error::invalid("a loss needs at least 2 views"));
        }
        let support = self.teacher[0].global.len();
        for t in &self.teacher {
            if t.global.len() != support {
                return Err(Error::shape("ForwardBundle", "teacher support sizes differ"));
            }
        }
        for s in &self.student {
            let g = tape.shape(s.global);
            if g.len() != 2 || g[1] != support || s.global_row >= g[0] {
                return Err(Error::shape("ForwardBundle", format!("student global node {g:?}")));
            }
        }
        if self.pairs().is_empty() {
            return Err(Error::invalid("bundle has no teacher/student pairs"));
        }
        Ok(())
    }

    /// Additional checks for the dense entries used by local losses.
    pub fn validate_dense(&self, tape: &Tape) -> Result<()> {
        self.validate(tape)?;
        let support = self.teacher[0].global.len();
        for t in &self.teacher {
            if t.dense.cols() != support || t.dense.rows() != t.pos.len() || t.z.rows() != t.pos.len() {
                return Err(Error::shape(
                    "ForwardBundle",
                    format!("teacher view {} has mismatched K", t.view),
                ));
            }
        }
        for s in &self.student {
            let d = tape.shape(s.dense);
            if d.len() != 2 || d[1] != support || s.dense_offset + s.tokens() > d[0] {
                return Err(Error::shape("ForwardBundle", format!("student dense node {d:?}")));
            }
            if s.tokens() != s.pos.len() {
                return Err(Error::shape(
                    "ForwardBundle",
                    format!("student view {} has mismatched K", s.view),
                ));
            }
        }
        Ok(())
    }
}

/// `H(p, q) = -sum_i p_i log max(q_i, 1e-12)`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("support {} vs {}", p.len(), q.len()),
        ));
    }
    Ok(-p.iter().zip(q).map(|(a, b)| a * b.max(LOG_FLOOR).ln()).sum::<f64>())
}

struct NodeTerms {
    node: Var,
    rows: Vec<usize>,
    weights: Vec<f64>,
}

/// Collects weighted cross-entropy terms against rows of student nodes and
/// emits one differentiable scalar.
#[derive(Default)]
pub struct LossBuilder {
    nodes: Vec<NodeTerms>,
    terms: usize,
}

impl LossBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `coef * H(p, q[row])`.
    pub fn add(&mut self, q: Var, row: usize, p: &[f64], coef: f64) {
        let entry = match self.nodes.iter().position(|n| n.node == q) {
            Some(i) => &mut self.nodes[i],
            None => {
                self.nodes.push(NodeTerms {
                    node: q,
                    rows: Vec::new(),
                    weights: Vec::new(),
                });
                self.nodes.last_mut().unwrap()
            }
        };
        entry.rows.push(row);
        entry.weights.extend(p.iter().map(|v| v * coef));
        self.terms += 1;
    }

    /// Number of cross-entropy terms added so far.
    pub fn terms(&self) -> usize {
        self.terms
    }

    /// Sum of all terms; a zero constant when nothing was added.
    pub fn finish(self, tape: &mut Tape) -> Result<Var> {
        let mut total: Option<Var> = None;
        for n in self.nodes {
            let cols = tape.shape(n.node)[1];
            let logq = tape.log(n.node, LOG_FLOOR)?;
            let picked = tape.gather_rows(logq, &n.rows)?;
            let weighted = tape.mul_const(picked, Tensor::new(vec![n.rows.len(), cols], n.weights)?)?;
            let s = tape.sum(weighted)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        match total {
            Some(t) => tape.scale(t, -1.0),
            None => Ok(tape.constant(Tensor::scalar(0.0))),
        }
    }
}

/// Counters and matchings produced while accumulating a local loss.
#[derive(Clone, Debug, Default)]
pub struct LocalStats {
    pub pairs: usize,
    /// Source tokens whose match passed the mask.
    pub active: usize,
    /// Source tokens considered.
    pub tokens: usize,
    pub records: Vec<MatchingRecord>,
}

impl LocalStats {
    pub fn fill_rate(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.active as f64 / self.tokens as f64
        }
    }

    fn merge(&mut self, other: LocalStats) {
        self.pairs += other.pairs;
        self.active += other.active;
        self.tokens += other.tokens;
        self.records.extend(other.records);
    }
}

/// Adds `weight * L_G` for one bundle; returns the number of pair terms.
pub fn accumulate_global(tape: &Tape, b: &mut LossBuilder, bundle: &ForwardBundle, weight: f64) -> Result<usize> {
    bundle.validate(tape)?;
    let pairs = bundle.pairs();
    let coef = weight / pairs.len() as f64;
    for &(a, s) in &pairs {
        let (t, s) = (&bundle.teacher[a], &bundle.student[s]);
        b.add(s.global, s.global_row, &t.global, coef);
    }
    Ok(pairs.len())
}

/// Matching from teacher view tokens onto student view tokens.
pub fn match_pair(t: &TeacherView, s: &StudentView, mode: crate::geometry::MatchMode) -> Result<Matching> {
    match mode {
        crate::geometry::MatchMode::Geometric => geometric_match(&t.pos, &s.pos),
        crate::geometry::MatchMode::Similarity => similarity_match(&t.z, &s.z),
    }
}

/// Adds `weight * L_L` for one bundle. Each pair sums its masked terms and
/// divides by the teacher view's token count.
pub fn accumulate_local(
    tape: &Tape,
    b: &mut LossBuilder,
    bundle: &ForwardBundle,
    mode: crate::geometry::MatchMode,
    weight: f64,
    keep_records: bool,
) -> Result<LocalStats> {
    bundle.validate_dense(tape)?;
    let pairs = bundle.pairs();
    let mut stats = LocalStats::default();
    for &(a, sb) in &pairs {
        let (t, s) = (&bundle.teacher[a], &bundle.student[sb]);
        let m = match_pair(t, s, mode)?;
        let k = m.len();
        let coef = weight / (pairs.len() * k) as f64;
        for i in 0..k {
            if m.mask[i] {
                b.add(s.dense, s.dense_offset + m.target[i], t.dense.row(i), coef);
            }
        }
        stats.merge(LocalStats {
            pairs: 1,
            active: m.active(),
            tokens: k,
            records: if keep_records {
                vec![MatchingRecord::new(t.view, s.view, &m)]
            } else {
                Vec::new()
            },
        });
    }
    Ok(stats)
}

/// Loss nodes and counters for one or more bundles.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    pub global: Var,
    pub local: Var,
    pub global_pairs: usize,
    pub stats: LocalStats,
}

/// Global loss `L_G` of one bundle.
pub fn global_loss(tape: &mut Tape, bundle: &ForwardBundle) -> Result<Var> {
    let mut b = LossBuilder::new();
    accumulate_global(tape, &mut b, bundle, 1.0)?;
    b.finish(tape)
}

/// Similarity-matched local loss of one bundle.
pub fn local_loss_sim(tape: &mut Tape, bundle: &ForwardBundle) -> Result<Var> {
    let mut b = LossBuilder::new();
    accumulate_local(tape, &mut b, bundle, crate::geometry::MatchMode::Similarity, 1.0, false)?;
    b.finish(tape)
}

/// Geometry-matched local loss of one bundle.
pub fn local_loss_geo(tape: &mut Tape, bundle: &ForwardBundle) -> Result<Var> {
    let mut b = LossBuilder::new();
    accumulate_local(tape, &mut b, bundle, crate::geometry::MatchMode::Geometric, 1.0, false)?;
    b.finish(tape)
}

/// Batch-averaged `L_G + local_weight * L_L` over `bundles`.
pub fn total_loss(
    tape: &mut Tape,
    bundles: &[ForwardBundle],
    setting: Setting,
    local_weight: f64,
    keep_records: bool,
) -> Result<LossParts> {
    if bundles.is_empty() {
        return Err(Error::invalid("total_loss on an empty batch"));
    }
    let w = 1.0 / bundles.len() as f64;
    let mut gb = LossBuilder::new();
    let mut lb = LossBuilder::new();
    let mut global_pairs = 0;
    let mut stats = LocalStats::default();
    for bundle in bundles {
        global_pairs += accumulate_global(tape, &mut gb, bundle, w)?;
        let mode = match setting {
            Setting::Vanilla => None,
            Setting::Similarity => Some(crate::geometry::MatchMode::Similarity),
            Setting::Geometric => Some(crate::geometry::MatchMode::Geometric),
        };
        if let Some(mode) = mode {
            stats.merge(accumulate_local(tape, &mut lb, bundle, mode, w, keep_records)?);
        }
    }
    let global = gb.finish(tape)?;
    let local = lb.finish(tape)?;
    let total = if setting == Setting::Vanilla {
        global
    } else {
        let l = tape.scale(local, local_weight)?;
        tape.add(global, l)?
    };
    Ok(LossParts {
        total,
        global,
        local,
        global_pairs,
        stats,
    })
}
