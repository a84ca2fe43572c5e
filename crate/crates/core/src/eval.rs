//! Frozen-backbone linear probes: image classification on pooled features and
//! per-position segmentation with bilinear upsampling.

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{apply_view, axis_taps, AugmentConfig, CropRect, SeedSample};
use crate::model::{pool, Model};
use crate::nn::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Learning rates tried; the best held-out result is reported.
    pub lrs: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of the dataset, taken from its end, used for evaluation.
    pub holdout: f64,
    /// Concatenate every encoder stage, average-pooled to the final stage's
    /// resolution, instead of probing the final stage alone.
    pub concat_stages: bool,
    /// Drives minibatch order.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lrs: vec![1.0, 0.3, 0.1, 0.03],
            epochs: 30,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 0.0,
            holdout: 0.2,
            concat_stages: false,
            seed: 0,
        }
    }
}

/// Outcome of one probe, with the whole learning-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `accuracy` or `miou`.
    pub metric: String,
    pub value: f64,
    /// Per-class accuracy or IoU; `None` where the class is absent.
    pub per_class: Vec<Option<f64>>,
    pub best_lr: f64,
    /// `(lr, value)` for every swept learning rate.
    pub sweep: Vec<(f64, f64)>,
    /// Backbone checksum before and after probing; equal for a frozen backbone.
    pub backbone_checksum: (u64, u64),
    pub config: ProbeConfig,
}

/// Mean IoU over classes present in either the prediction or the ground
/// truth, with the per-class IoU (`None` for classes absent from both).
pub fn miou_per_class<'a>(
    pred: impl IntoIterator<Item = &'a ndarray::Array2<u8>>,
    gt: impl IntoIterator<Item = &'a ndarray::Array2<u8>>,
    num_classes: usize,
) -> Result<(f64, Vec<Option<f64>>)> {
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (p, g) in pred.into_iter().zip(gt) {
        if p.dim() != g.dim() {
            return Err(Error::invalid(format!(
                "mask shapes differ: {:?} vs {:?}",
                p.dim(),
                g.dim()
            )));
        }
        for (&a, &b) in p.iter().zip(g.iter()) {
            let (a, b) = (a as usize, b as usize);
            if a >= num_classes || b >= num_classes {
                return Err(Error::invalid(format!(
                    "class id {} exceeds {num_classes} classes",
                    a.max(b)
                )));
            }
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let per: Vec<Option<f64>> = (0..num_classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok((mean, per))
}

/// [`miou_per_class`] without the breakdown.
pub fn miou(pred: &[Array2<u8>], gt: &[Array2<u8>], num_classes: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} masks",
            pred.len(),
            gt.len()
        )));
    }
    Ok(miou_per_class(pred, gt, num_classes)?.0)
}

/// `out x src` half-pixel-center bilinear interpolation matrix.
pub fn interp_matrix(out: usize, src: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out, src));
    for (u, (i0, i1, f)) in axis_taps(out, 0.0, src as f64, src).into_iter().enumerate() {
        m[[u, i0]] += 1.0 - f;
        m[[u, i1]] += f;
    }
    m
}

/// Bilinear upsampling of every channel of a `K x h x w` map to `K x H x W`.
pub fn upsample(x: ArrayView3<f64>, out: (usize, usize)) -> Array3<f64> {
    let (k, h, w) = x.dim();
    let (uh, uw) = (interp_matrix(out.0, h), interp_matrix(out.1, w));
    let mut y = Array3::zeros((k, out.0, out.1));
    for c in 0..k {
        y.index_axis_mut(Axis(0), c)
            .assign(&uh.dot(&x.index_axis(Axis(0), c)).dot(&uw.t()));
    }
    y
}

/// Adjoint of [`upsample`]: maps a `K x H x W` gradient back to `K x h x w`.
pub fn upsample_backward(dy: ArrayView3<f64>, src: (usize, usize)) -> Array3<f64> {
    let (k, oh, ow) = dy.dim();
    let (uh, uw) = (interp_matrix(oh, src.0), interp_matrix(ow, src.1));
    let mut dx = Array3::zeros((k, src.0, src.1));
    for c in 0..k {
        dx.index_axis_mut(Axis(0), c)
            .assign(&uh.t().dot(&dy.index_axis(Axis(0), c)).dot(&uw));
    }
    dx
}

/// Seed image resized to the encoder's input resolution.
fn model_input(sample: &SeedSample, size: usize) -> Result<Array3<f64>> {
    if sample.height() == size && sample.width() == size {
        return Ok(sample.pixels.clone());
    }
    let crop = CropRect::full(sample.height(), sample.width(), size, size);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    apply_view(sample, &crop, &AugmentConfig::off(), &mut unused)
}

const FEATURE_BATCH: usize = 64;

/// Frozen feature maps `N x C x h x w` of every sample, in eval mode. With
/// `concat_stages`, the stages are average-pooled to the final stage's
/// resolution and stacked along channels.
pub fn extract_maps(model: &mut Model, samples: &[SeedSample], concat_stages: bool) -> Result<Array4<f64>> {
    let size = model.config().encoder.input_size;
    let mut chunks = Vec::new();
    for batch in samples.chunks(FEATURE_BATCH) {
        let mut x = Array4::zeros((batch.len(), 3, size, size));
        for (b, s) in batch.iter().enumerate() {
            x.index_axis_mut(Axis(0), b).assign(&model_input(s, size)?);
        }
        let maps = if concat_stages {
            let stages = model.encode_stages(x.view(), Mode::Eval)?;
            let (_, _, h, w) = stages.last().expect("encoder has a stage").dim();
            let resized: Vec<Array4<f64>> = stages
                .iter()
                .map(|st| {
                    let (n, c, ..) = st.dim();
                    let mut r = Array4::zeros((n, c, h, w));
                    for i in 0..n {
                        r.index_axis_mut(Axis(0), i)
                            .assign(&downsample_mean(st.index_axis(Axis(0), i), (h, w)));
                    }
                    r
                })
                .collect();
            let views: Vec<_> = resized.iter().map(|r| r.view()).collect();
            concatenate(Axis(1), &views).expect("same batch and spatial dims")
        } else {
            model.encode(x.view(), Mode::Eval)?
        };
        chunks.push(maps);
    }
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("same map dims"))
}

/// Average pooling of a `C x H x W` map onto an `h x w` grid whose cells tile it evenly.
fn downsample_mean(x: ArrayView3<f64>, out: (usize, usize)) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (fy, fx) = (h / out.0, w / out.1);
    Array3::from_shape_fn((c, out.0, out.1), |(k, i, j)| {
        x.slice(s![k, i * fy..(i + 1) * fy, j * fx..(j + 1) * fx])
            .mean()
            .unwrap_or(0.0)
    })
}

/// Column mean and standard deviation of the training features.
fn standardizer(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("nonempty features");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, std)
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Linear softmax classifier `W x + b` with momentum SGD.
#[derive(Debug, Clone)]
struct LinearHead {
    w: Array2<f64>,
    b: Array1<f64>,
    vw: Array2<f64>,
    vb: Array1<f64>,
}

impl LinearHead {
    fn new(features: usize, classes: usize) -> Self {
        Self {
            w: Array2::zeros((features, classes)),
            b: Array1::zeros(classes),
            vw: Array2::zeros((features, classes)),
            vb: Array1::zeros(classes),
        }
    }

    fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    fn update(&mut self, gw: &Array2<f64>, gb: &Array1<f64>, lr: f64, cfg: &ProbeConfig) {
        self.vw = &self.vw * cfg.momentum + gw + &(&self.w * cfg.weight_decay);
        self.vb = &self.vb * cfg.momentum + gb;
        self.w.scaled_add(-lr, &self.vw);
        self.b.scaled_add(-lr, &self.vb);
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(l) => Err(Error::invalid(format!(
            "label {l} out of range for {num_classes} classes"
        ))),
        None => Ok(()),
    }
}

/// Trains a softmax probe on `train_x` for each swept learning rate and
/// reports the best held-out accuracy. Features are standardized with
/// training statistics.
pub fn probe_features(
    train_x: ArrayView2<f64>,
    train_y: &[usize],
    test_x: ArrayView2<f64>,
    test_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() {
        return Err(Error::invalid("feature and label counts differ"));
    }
    if train_x.nrows() == 0 || test_x.nrows() == 0 {
        return Err(Error::invalid("probe needs nonempty train and test splits"));
    }
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::invalid("train and test feature widths differ"));
    }
    if cfg.lrs.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid(
            "probe needs at least one learning rate and a nonzero batch size",
        ));
    }
    check_labels(train_y, num_classes)?;
    check_labels(test_y, num_classes)?;
    let (mean, std) = standardizer(train_x);
    let xtr = (&train_x - &mean) / &std;
    let xte = (&test_x - &mean) / &std;

    let mut best: Option<(f64, f64, Vec<Option<f64>>)> = None;
    let mut sweep = Vec::new();
    for &lr in &cfg.lrs {
        let mut head = LinearHead::new(xtr.ncols(), num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..xtr.nrows()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(cfg.batch_size) {
                let xb = xtr.select(Axis(0), idx);
                let mut p = head.logits(xb.view());
                softmax_rows(&mut p);
                for (r, &i) in idx.iter().enumerate() {
                    p[[r, train_y[i]]] -= 1.0;
                }
                p /= idx.len() as f64;
                let gw = xb.t().dot(&p);
                let gb = p.sum_axis(Axis(0));
                head.update(&gw, &gb, lr, cfg);
            }
        }
        let logits = head.logits(xte.view());
        let mut hits = vec![0usize; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (r, &y) in test_y.iter().enumerate() {
            counts[y] += 1;
            if argmax(logits.row(r)) == y {
                hits[y] += 1;
            }
        }
        let acc = hits.iter().sum::<usize>() as f64 / test_y.len() as f64;
        let per = (0..num_classes)
            .map(|c| (counts[c] > 0).then(|| hits[c] as f64 / counts[c] as f64))
            .collect();
        sweep.push((lr, acc));
        if best.as_ref().is_none_or(|b| acc > b.1) {
            best = Some((lr, acc, per));
        }
    }
    let (best_lr, value, per_class) = best.expect("at least one learning rate");
    Ok(ProbeResult {
        metric: "accuracy".into(),
        value,
        per_class,
        best_lr,
        sweep,
        backbone_checksum: (0, 0),
        config: cfg.clone(),
    })
}

fn labels_of(data: &Dataset) -> Result<Vec<usize>> {
    data.samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label
                .map(|l| l as usize)
                .ok_or_else(|| Error::invalid(format!("sample {i} has no label")))
        })
        .collect()
}

fn frozen<T>(model: &mut Model, f: impl FnOnce(&mut Model) -> Result<T>) -> Result<(T, (u64, u64))> {
    let before = model.checksum();
    let out = f(model)?;
    let after = model.checksum();
    if before != after {
        return Err(Error::invalid("backbone parameters changed during probing"));
    }
    Ok((out, (before, after)))
}

/// Linear classifier on pooled frozen features, trained on the first part of
/// `data` and scored on the held-out tail.
pub fn linear_probe_classify(model: &mut Model, data: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let labels = labels_of(data)?;
    check_labels(&labels, data.num_classes)?;
    let (train, test) = data.split(cfg.holdout)?;
    let n_train = train.len();
    let ((ftr, fte), checksum) = frozen(model, |m| {
        let pooled = |d: &Dataset, m: &mut Model| -> Result<Array2<f64>> {
            Ok(pool(extract_maps(m, &d.samples, cfg.concat_stages)?.view()))
        };
        Ok((pooled(&train, m)?, pooled(&test, m)?))
    })?;
    let mut r = probe_features(
        ftr.view(),
        &labels[..n_train],
        fte.view(),
        &labels[n_train..],
        data.num_classes,
        cfg,
    )?;
    r.backbone_checksum = checksum;
    Ok(r)
}

/// Per-position linear classifier on frozen feature maps, bilinearly
/// upsampled to the mask resolution and scored by mIoU on the held-out tail.
pub fn linear_probe_segment(model: &mut Model, data: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if !data.has_masks() {
        return Err(Error::invalid("segmentation probe needs masks on every sample"));
    }
    let k = data.num_classes;
    for (i, s) in data.samples.iter().enumerate() {
        let m = s.mask.as_ref().expect("checked above");
        if let Some(&bad) = m.iter().find(|&&c| c as usize >= k) {
            return Err(Error::invalid(format!(
                "sample {i}: mask class {bad} out of range for {k} classes"
            )));
        }
    }
    if cfg.lrs.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid(
            "probe needs at least one learning rate and a nonzero batch size",
        ));
    }
    let (train, test) = data.split(cfg.holdout)?;
    let ((mtr, mte), checksum) = frozen(model, |m| {
        Ok((
            extract_maps(m, &train.samples, cfg.concat_stages)?,
            extract_maps(m, &test.samples, cfg.concat_stages)?,
        ))
    })?;
    let (_, c, h, w) = mtr.dim();

    // standardize channels with training statistics over all positions
    let flat = mtr.view().permuted_axes([0, 2, 3, 1]).as_standard_layout().into_owned();
    let flat = flat.into_shape_with_order((mtr.len() / c, c)).expect("contiguous");
    let (mean, std) = standardizer(flat.view());
    let norm = |maps: &Array4<f64>| -> Array4<f64> {
        let mut out = maps.clone();
        for ch in 0..c {
            out.slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|v| (v - mean[ch]) / std[ch]);
        }
        out
    };
    let (mtr, mte) = (norm(&mtr), norm(&mte));

    let mut best: Option<(f64, f64, Vec<Option<f64>>)> = None;
    let mut sweep = Vec::new();
    for &lr in &cfg.lrs {
        let mut head = LinearHead::new(c, k);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(cfg.batch_size) {
                let mut gw = Array2::zeros((c, k));
                let mut gb = Array1::zeros(k);
                let mut pixels = 0usize;
                for &i in idx {
                    let mask = train.samples[i].mask.as_ref().expect("checked above");
                    let (mh, mw) = mask.dim();
                    let x = position_rows(mtr.index_axis(Axis(0), i));
                    let logits = rows_to_map(&head.logits(x.view()), (h, w));
                    let mut p = upsample(logits.view(), (mh, mw));
                    softmax_channels(&mut p);
                    for ((y, xx), &t) in mask.indexed_iter() {
                        p[[t as usize, y, xx]] -= 1.0;
                    }
                    pixels += mh * mw;
                    let d_low = upsample_backward(p.view(), (h, w));
                    let d_rows = map_to_rows(d_low.view());
                    gw += &x.t().dot(&d_rows);
                    gb += &d_rows.sum_axis(Axis(0));
                }
                gw /= pixels as f64;
                gb /= pixels as f64;
                head.update(&gw, &gb, lr, cfg);
            }
        }
        let preds: Vec<Array2<u8>> = (0..test.len())
            .map(|i| {
                let mask = test.samples[i].mask.as_ref().expect("checked above");
                let x = position_rows(mte.index_axis(Axis(0), i));
                let logits = rows_to_map(&head.logits(x.view()), (h, w));
                predict(upsample(logits.view(), mask.dim()).view())
            })
            .collect();
        let gts = test.samples.iter().map(|s| s.mask.as_ref().expect("checked above"));
        let (value, per) = miou_per_class(&preds, gts, k)?;
        sweep.push((lr, value));
        if best.as_ref().is_none_or(|b| value > b.1) {
            best = Some((lr, value, per));
        }
    }
    let (best_lr, value, per_class) = best.expect("at least one learning rate");
    Ok(ProbeResult {
        metric: "miou".into(),
        value,
        per_class,
        best_lr,
        sweep,
        backbone_checksum: checksum,
        config: cfg.clone(),
    })
}

/// `C x h x w` map to `(h * w) x C` rows.
fn position_rows(x: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    x.permuted_axes([1, 2, 0])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, c))
        .expect("contiguous")
}

/// `(h * w) x K` rows to a `K x h x w` map.
fn rows_to_map(rows: &Array2<f64>, (h, w): (usize, usize)) -> Array3<f64> {
    let k = rows.ncols();
    rows.t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((k, h, w))
        .expect("contiguous")
}

fn map_to_rows(x: ArrayView3<f64>) -> Array2<f64> {
    position_rows(x)
}

fn softmax_channels(p: &mut Array3<f64>) {
    let (k, h, w) = p.dim();
    for y in 0..h {
        for x in 0..w {
            let m = (0..k).map(|c| p[[c, y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (p[[c, y, x]] - m).exp();
                p[[c, y, x]] = e;
                z += e;
            }
            for c in 0..k {
                p[[c, y, x]] /= z;
            }
        }
    }
}

/// Per-pixel argmax over the class axis of `K x H x W` scores.
pub fn predict(scores: ArrayView3<f64>) -> Array2<u8> {
    let (k, h, w) = scores.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for c in 1..k {
            if scores[[c, y, x]] > scores[[best, y, x]] {
                best = c;
            }
        }
        best as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn miou_examples() {
        let gt = vec![array![[0u8, 0], [1, 1]]];
        assert_eq!(miou(&gt, &gt, 2).unwrap(), 1.0);
        let all_zero = vec![array![[0u8, 0], [0, 0]]];
        assert_eq!(miou(&all_zero, &gt, 2).unwrap(), 0.25);
        let ones = vec![array![[1u8, 1], [1, 1]]];
        assert_eq!(miou(&all_zero, &ones, 2).unwrap(), 0.0);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Array3::from_elem((2, 3, 5), 0.7);
        let y = upsample(x.view(), (13, 8));
        assert!(y.iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a * 12 + b * 4 + c) as f64 * 0.1 - 1.0);
        let dy = Array3::from_shape_fn((2, 7, 9), |(a, b, c)| ((a * 5 + b * 3 + c) % 7) as f64 - 3.0);
        let lhs = (&upsample(x.view(), (7, 9)) * &dy).sum();
        let rhs = (&x * &upsample_backward(dy.view(), (3, 4))).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn interp_rows_sum_to_one() {
        let m = interp_matrix(64, 4);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
        // pixel centers that land exactly on a source center copy it
        let m = interp_matrix(4, 4);
        assert_eq!(m, Array2::<f64>::eye(4));
    }
}
