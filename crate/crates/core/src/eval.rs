//! Frozen-feature evaluation: k-NN, linear probe, correspondence accuracy
//! and the collapse index of a matching.

use serde::{Deserialize, Serialize};

use crate::augment::{child_rng, derive_seed, make_eval_pair, MultiCropConfig};
use crate::error::{Error, Result};
use crate::geometry::{similarity_match, token_centers, GeoParams, Matching};
use crate::image::Image;
use crate::model::{encode, view_rows, BackboneConfig, Params};
use crate::numerics::{norm, Tensor};

/// Fraction of the shorter side kept by the evaluation centre crop.
pub const CENTER_CROP: f64 = 0.875;
const EMBED_CHUNK: usize = 32;

/// Largest share of source tokens mapped onto a single target token.
pub fn collapse_index(m: &Matching) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::invalid("collapse index of an empty matching"));
    }
    let top = m.target.iter().max().copied().unwrap_or(0);
    let mut counts = vec![0usize; top + 1];
    for &t in &m.target {
        counts[t] += 1;
    }
    Ok(*counts.iter().max().unwrap() as f64 / m.len() as f64)
}

/// Centred square crop covering `fraction` of the shorter side, resized to
/// `out x out`.
pub fn center_crop(img_h: usize, img_w: usize, out: usize, fraction: f64) -> GeoParams {
    let side = fraction * img_h.min(img_w) as f64;
    let (x0, y0) = ((img_w as f64 - side) / 2.0, (img_h as f64 - side) / 2.0);
    GeoParams {
        ul_x: x0,
        ul_y: y0,
        lr_x: x0 + side,
        lr_y: y0 + side,
        h: out,
        w: out,
        flip: false,
    }
}

/// Labelled global representations.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    pub anchors: Tensor,
    pub labels: Vec<usize>,
}

impl EmbeddingBank {
    pub fn new(anchors: Tensor, labels: Vec<usize>) -> Result<Self> {
        if anchors.rank() != 2 || anchors.rows() != labels.len() {
            return Err(Error::shape(
                "EmbeddingBank",
                format!("{:?} anchors for {} labels", anchors.shape(), labels.len()),
            ));
        }
        Ok(Self { anchors, labels })
    }

    /// Centre-crop global representations of `images`.
    pub fn build(
        params: &Params,
        cfg: &BackboneConfig,
        images: &[Image],
        labels: &[usize],
        view: usize,
    ) -> Result<Self> {
        Self::new(embed_images(params, cfg, images, view)?, labels.to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Global representations `[M, d]` of centre crops resized to `view`.
pub fn embed_images(params: &Params, cfg: &BackboneConfig, images: &[Image], view: usize) -> Result<Tensor> {
    let mut rows = Vec::new();
    for chunk in images.chunks(EMBED_CHUNK) {
        let crops = chunk
            .iter()
            .map(|img| {
                crate::geometry::apply_geometric(img, &center_crop(img.height(), img.width(), view, CENTER_CROP))
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = crops.iter().collect();
        let (g, _) = encode(params, cfg, &refs)?;
        rows.extend(g.into_data());
    }
    Tensor::new(vec![images.len(), cfg.dim], rows)
}

fn unit_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    x.iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n < 1e-12 {
                return Err(Error::ZeroNorm {
                    what: "embedding",
                    row: i,
                });
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnOptions {
    pub k: usize,
    /// Similarity-weighted votes instead of plain counts.
    pub weighted: bool,
    /// Skip anchors with the query's own index (bank used as query set).
    pub exclude_self: bool,
}

impl Default for KnnOptions {
    fn default() -> Self {
        Self {
            k: 20,
            weighted: false,
            exclude_self: false,
        }
    }
}

/// Cosine k-NN predictions. Neighbours are ranked by similarity, then by
/// anchor index; vote ties go to the smaller class id.
pub fn knn_predict(bank: &EmbeddingBank, queries: &Tensor, opts: KnnOptions) -> Result<Vec<usize>> {
    if bank.is_empty() {
        return Err(Error::invalid("k-NN with an empty bank"));
    }
    let available = bank.len() - usize::from(opts.exclude_self);
    if opts.k == 0 || opts.k > available {
        return Err(Error::invalid(format!("k = {} with {available} anchors", opts.k)));
    }
    if queries.cols() != bank.anchors.cols() {
        return Err(Error::shape("knn_predict", "query and anchor dimensions differ"));
    }
    let anchors = unit_rows(&bank.anchors)?;
    let queries = unit_rows(queries)?;
    let classes = bank.labels.iter().max().unwrap() + 1;
    let mut out = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let mut sims: Vec<(f64, usize)> = anchors
            .iter()
            .enumerate()
            .filter(|&(a, _)| !(opts.exclude_self && a == qi))
            .map(|(a, r)| (crate::numerics::dot(q, r), a))
            .collect();
        sims.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let mut votes = vec![0.0; classes];
        for &(s, a) in &sims[..opts.k] {
            votes[bank.labels[a]] += if opts.weighted { (s / 0.07).exp() } else { 1.0 };
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64
}

/// Top-1 k-NN accuracy of `queries` against `bank`.
pub fn knn_eval(bank: &EmbeddingBank, queries: &Tensor, query_labels: &[usize], opts: KnnOptions) -> Result<f64> {
    if queries.rows() != query_labels.len() {
        return Err(Error::shape("knn_eval", "query count and label count differ"));
    }
    Ok(accuracy(&knn_predict(bank, queries, opts)?, query_labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub l2: f64,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            tolerance: 1e-6,
            max_iters: 5000,
        }
    }
}

/// Fitted multinomial logistic regression on standardised features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[(d + 1), C]`, bias in the last row.
    weights: Vec<f64>,
    classes: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn standardized(x: &Tensor, mean: &[f64], scale: &[f64]) -> Vec<Vec<f64>> {
    x.iter_rows()
        .map(|r| {
            let mut v: Vec<f64> = r.iter().zip(mean).zip(scale).map(|((a, m), s)| (a - m) / s).collect();
            v.push(1.0);
            v
        })
        .collect()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

impl LinearProbe {
    /// Full-batch gradient descent with step `1 / L`, `L` the smoothness
    /// bound `lambda_max(X^T X) / (2n) + l2` estimated by power iteration.
    pub fn fit(x: &Tensor, labels: &[usize], opts: ProbeOptions) -> Result<Self> {
        let n = x.rows();
        if n != labels.len() || n == 0 {
            return Err(Error::shape("linear_probe", "feature and label counts differ"));
        }
        let classes = labels.iter().max().unwrap() + 1;
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::invalid("linear probe needs at least 2 classes"));
        }
        let d = x.cols();
        let mean: Vec<f64> = (0..d)
            .map(|c| x.iter_rows().map(|r| r[c]).sum::<f64>() / n as f64)
            .collect();
        let scale: Vec<f64> = (0..d)
            .map(|c| {
                let v = x.iter_rows().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n as f64;
                if v.sqrt() > 1e-12 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let xs = standardized(x, &mean, &scale);
        let dd = d + 1;

        let mut v = vec![1.0 / (dd as f64).sqrt(); dd];
        let mut lambda = 0.0;
        for _ in 0..50 {
            let mut w = vec![0.0; dd];
            for r in &xs {
                let p = crate::numerics::dot(r, &v);
                w.iter_mut().zip(r).for_each(|(a, b)| *a += p * b);
            }
            lambda = norm(&w);
            v = w.iter().map(|a| a / lambda).collect();
        }
        let step = 1.0 / (lambda / (2.0 * n as f64) + opts.l2);

        let mut weights = vec![0.0; dd * classes];
        let mut probs = vec![0.0; classes];
        let mut iterations = 0;
        let mut converged = false;
        while iterations < opts.max_iters {
            let mut grad = vec![0.0; dd * classes];
            for (r, &y) in xs.iter().zip(labels) {
                for (c, p) in probs.iter_mut().enumerate() {
                    *p = (0..dd).map(|j| r[j] * weights[j * classes + c]).sum();
                }
                softmax_in_place(&mut probs);
                probs[y] -= 1.0;
                for j in 0..dd {
                    for c in 0..classes {
                        grad[j * classes + c] += r[j] * probs[c] / n as f64;
                    }
                }
            }
            for j in 0..d {
                for c in 0..classes {
                    grad[j * classes + c] += opts.l2 * weights[j * classes + c];
                }
            }
            iterations += 1;
            if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < opts.tolerance {
                converged = true;
                break;
            }
            weights.iter_mut().zip(&grad).for_each(|(w, g)| *w -= step * g);
        }
        Ok(Self {
            mean,
            scale,
            weights,
            classes,
            iterations,
            converged,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape(
                "LinearProbe::predict",
                "feature dimension differs from training",
            ));
        }
        let dd = self.mean.len() + 1;
        Ok(standardized(x, &self.mean, &self.scale)
            .iter()
            .map(|r| {
                let mut best = (f64::NEG_INFINITY, 0);
                for c in 0..self.classes {
                    let s: f64 = (0..dd).map(|j| r[j] * self.weights[j * self.classes + c]).sum();
                    if s > best.0 {
                        best = (s, c);
                    }
                }
                best.1
            })
            .collect())
    }
}

/// Test accuracy of a linear probe fitted on `(train_x, train_y)`.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    opts: ProbeOptions,
) -> Result<f64> {
    let probe = LinearProbe::fit(train_x, train_y, opts)?;
    Ok(accuracy(&probe.predict(test_x)?, test_y))
}

/// Splits indices per class: the last `test_fraction` of each class's
/// images (in dataset order) form the test set.
pub fn holdout_split(labels: &[usize], test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        let cut = idx.len() - n_test.min(idx.len());
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Rows `idx` of `x`.
pub fn select_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::from_parts(vec![idx.len(), x.cols()], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceReport {
    pub accuracy: f64,
    /// Mean distance in original-image pixels between matched and true token centres.
    pub distance_error: f64,
    pub collapse_index: f64,
}

/// Correspondence of one photometrically perturbed view pair with identity
/// ground truth.
pub fn correspondence_scores(z_a: &Tensor, z_b: &Tensor, centers: &[[f64; 2]]) -> Result<CorrespondenceReport> {
    let m = similarity_match(z_a, z_b)?;
    let k = m.len();
    let hits = m.target.iter().enumerate().filter(|(i, t)| *i == **t).count();
    let err: f64 = m
        .target
        .iter()
        .enumerate()
        .map(|(i, &t)| ((centers[t][0] - centers[i][0]).powi(2) + (centers[t][1] - centers[i][1]).powi(2)).sqrt())
        .sum();
    Ok(CorrespondenceReport {
        accuracy: hits as f64 / k as f64,
        distance_error: err / k as f64,
        collapse_index: collapse_index(&m)?,
    })
}

/// Correspondence accuracy averaged over `images`. Image `i` draws its view
/// pair from a stream seeded by `(seed, i)`.
pub fn correspondence_eval(
    params: &Params,
    cfg: &BackboneConfig,
    images: &[Image],
    crops: &MultiCropConfig,
    seed: u64,
) -> Result<CorrespondenceReport> {
    if images.is_empty() {
        return Err(Error::invalid("correspondence eval on an empty image set"));
    }
    let mut sum = CorrespondenceReport {
        accuracy: 0.0,
        distance_error: 0.0,
        collapse_index: 0.0,
    };
    for (i, img) in images.iter().enumerate() {
        let mut rng = child_rng(derive_seed(&[seed, i as u64]), 0);
        let (a, b) = make_eval_pair(img, crops, &mut rng)?;
        let (_, z) = encode(params, cfg, &[&a.image, &b.image])?;
        let k = z.rows() / 2;
        let pos = token_centers(&a.geo, &crops.downscale)?;
        let r = correspondence_scores(&view_rows(&z, 0, k), &view_rows(&z, 1, k), &pos.centers)?;
        sum.accuracy += r.accuracy;
        sum.distance_error += r.distance_error;
        sum.collapse_index += r.collapse_index;
    }
    let n = images.len() as f64;
    Ok(CorrespondenceReport {
        accuracy: sum.accuracy / n,
        distance_error: sum.distance_error / n,
        collapse_index: sum.collapse_index / n,
    })
}

/// Evaluation summary; absent metrics are omitted from the JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knn_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corr_distance_error_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collapse_index_mean: Option<f64>,
}

/// Which metrics [`evaluate`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Knn,
    Linear,
    Correspondence,
    All,
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(Which::Knn),
            "linear" => Ok(Which::Linear),
            "correspondence" => Ok(Which::Correspondence),
            "all" => Ok(Which::All),
            other => Err(Error::Config(format!(
                "unknown evaluation {other:?}; expected knn, linear, correspondence or all"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub which: Which,
    pub knn: KnnOptions,
    pub probe: ProbeOptions,
    /// Per-class fraction held out for the probe when no test set is given.
    pub holdout: f64,
    /// Images used for correspondence; zero means all.
    pub corr_images: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            which: Which::All,
            knn: KnnOptions::default(),
            probe: ProbeOptions::default(),
            holdout: 0.2,
            corr_images: 0,
            seed: 0,
        }
    }
}

/// Runs the selected benchmarks on frozen `params`.
///
/// With a test set, k-NN uses the training images as anchors and the test
/// images as queries, the probe trains on one and scores the other, and
/// correspondence runs on the test images. Without one, k-NN is
/// leave-one-out over the training set, the probe uses a per-class holdout
/// and correspondence runs on the training images.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &Params,
    cfg: &BackboneConfig,
    view_size: usize,
    crops: &MultiCropConfig,
    train: (&[Image], &[usize]),
    test: Option<(&[Image], &[usize])>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let all = opts.which == Which::All;
    let mut report = EvalReport::default();
    let needs_features = all || matches!(opts.which, Which::Knn | Which::Linear);
    let train_x = if needs_features {
        Some(embed_images(params, cfg, train.0, view_size)?)
    } else {
        None
    };
    let test_x = match (needs_features, test) {
        (true, Some((imgs, _))) => Some(embed_images(params, cfg, imgs, view_size)?),
        _ => None,
    };
    if all || opts.which == Which::Knn {
        let x = train_x.clone().expect("features");
        let bank = EmbeddingBank::new(x.clone(), train.1.to_vec())?;
        report.knn_top1 = Some(match (&test_x, test) {
            (Some(q), Some((_, labels))) => knn_eval(&bank, q, labels, opts.knn)?,
            _ => knn_eval(
                &bank,
                &x,
                train.1,
                KnnOptions {
                    exclude_self: true,
                    ..opts.knn
                },
            )?,
        });
    }
    if all || opts.which == Which::Linear {
        let x = train_x.as_ref().expect("features");
        report.linear_top1 = Some(match (&test_x, test) {
            (Some(q), Some((_, labels))) => linear_probe(x, train.1, q, labels, opts.probe)?,
            _ => {
                let (tr, te) = holdout_split(train.1, opts.holdout);
                let pick = |idx: &[usize]| idx.iter().map(|&i| train.1[i]).collect::<Vec<_>>();
                linear_probe(
                    &select_rows(x, &tr),
                    &pick(&tr),
                    &select_rows(x, &te),
                    &pick(&te),
                    opts.probe,
                )?
            }
        });
    }
    if all || opts.which == Which::Correspondence {
        let imgs = test.map_or(train.0, |t| t.0);
        let n = if opts.corr_images == 0 {
            imgs.len()
        } else {
            opts.corr_images.min(imgs.len())
        };
        let r = correspondence_eval(params, cfg, &imgs[..n], crops, opts.seed)?;
        report.corr_accuracy = Some(r.accuracy);
        report.corr_distance_error_px = Some(r.distance_error);
        report.collapse_index_mean = Some(r.collapse_index);
    }
    Ok(report)
}
