//! The trainable stand-in for representation refinement: a shallow
//! rectifier network with a softmax head, trained on the current cluster
//! labels. Its hidden activations become the refined features for the next
//! iteration; its class probabilities feed the evaluation and the category
//! tree.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::io::{
    open_reader, open_writer, read_container_header, write_container_header, ContainerTag,
};
use crate::metrics::topk_accuracy;
use crate::types::{FeatureMatrix, LabelVector};

/// Training hyperparameters; stored in the model as a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Hidden width; 0 trains a plain multilogit head on the inputs.
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 0,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer<F: Float> {
    /// `in_dim x hidden`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

/// Shallow softmax classifier; the head learning rate is ten times the body
/// rate whenever a hidden layer is present.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<F: Float> {
    pub hidden: Option<HiddenLayer<F>>,
    /// `(hidden | in_dim) x n_classes`
    pub head_weight: Array2<F>,
    pub head_bias: Array1<F>,
    pub config: EncoderConfig,
}

impl<F: Float> EncoderModel<F> {
    pub fn input_dim(&self) -> usize {
        match &self.hidden {
            Some(h) => h.weight.nrows(),
            None => self.head_weight.nrows(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.as_ref().map_or(0, |h| h.weight.ncols())
    }

    pub fn n_classes(&self) -> usize {
        self.head_weight.ncols()
    }

    fn hidden_activations(&self, x: &Array2<F>) -> Option<Array2<F>> {
        self.hidden.as_ref().map(|h| {
            let mut a = x.dot(&h.weight);
            for mut row in a.rows_mut() {
                row += &h.bias;
            }
            a.mapv_inplace(|v| v.max(F::zero()));
            a
        })
    }

    fn scores(&self, x: &Array2<F>) -> Array2<F> {
        let input = self.hidden_activations(x);
        let base = input.as_ref().unwrap_or(x);
        let mut s = base.dot(&self.head_weight);
        for mut row in s.rows_mut() {
            row += &self.head_bias;
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = open_writer(path)?;
        write_container_header(&mut w, ContainerTag::Encoder)?;
        w.write_u64(self.input_dim() as u64)?;
        w.write_u64(self.hidden_dim() as u64)?;
        w.write_u64(self.n_classes() as u64)?;
        w.write_u64(self.config.epochs as u64)?;
        w.write_u64(self.config.batch_size as u64)?;
        w.write_u64(self.config.seed)?;
        w.write_f64(self.config.learning_rate)?;
        w.write_f64(self.config.momentum)?;
        w.write_f64(self.config.weight_decay)?;
        if let Some(h) = &self.hidden {
            for v in h.weight.iter() {
                w.write_f64(v.as_f64())?;
            }
            for v in h.bias.iter() {
                w.write_f64(v.as_f64())?;
            }
        }
        for v in self.head_weight.iter() {
            w.write_f64(v.as_f64())?;
        }
        for v in self.head_bias.iter() {
            w.write_f64(v.as_f64())?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = open_reader(path)?;
        read_container_header(&mut r, ContainerTag::Encoder)?;
        let in_dim = r.read_u64()? as usize;
        let hidden_dim = r.read_u64()? as usize;
        let n_classes = r.read_u64()? as usize;
        let config = EncoderConfig {
            hidden_dim,
            epochs: r.read_u64()? as usize,
            batch_size: r.read_u64()? as usize,
            seed: r.read_u64()?,
            learning_rate: r.read_f64()?,
            momentum: r.read_f64()?,
            weight_decay: r.read_f64()?,
        };
        let mut read_matrix = |r: &mut _, rows: usize, cols: usize| -> Result<Array2<F>> {
            let r: &mut crate::io::TrackedReader<std::io::BufReader<std::fs::File>> = r;
            let mut m = Array2::zeros((rows, cols));
            for i in 0..rows {
                for j in 0..cols {
                    m[[i, j]] = F::cast(r.read_f64()?);
                }
            }
            Ok(m)
        };
        let hidden = if hidden_dim > 0 {
            let weight = read_matrix(&mut r, in_dim, hidden_dim)?;
            let mut bias = Array1::zeros(hidden_dim);
            for j in 0..hidden_dim {
                bias[j] = F::cast(r.read_f64()?);
            }
            Some(HiddenLayer { weight, bias })
        } else {
            None
        };
        let head_rows = if hidden_dim > 0 { hidden_dim } else { in_dim };
        let head_weight = read_matrix(&mut r, head_rows, n_classes)?;
        let mut head_bias = Array1::zeros(n_classes);
        for j in 0..n_classes {
            head_bias[j] = F::cast(r.read_f64()?);
        }
        r.expect_end()?;
        Ok(Self {
            hidden,
            head_weight,
            head_bias,
            config,
        })
    }
}

/// Gradient with the same shape as the trainable parameters.
#[derive(Debug, Clone)]
pub struct EncoderGradient<F: Float> {
    pub hidden_weight: Option<Array2<F>>,
    pub hidden_bias: Option<Array1<F>>,
    pub head_weight: Array2<F>,
    pub head_bias: Array1<F>,
}

/// Cross-entropy loss with L2 weight penalty, plus its exact gradient,
/// over the given rows.
pub fn encoder_loss_and_grad<F: Float>(
    model: &EncoderModel<F>,
    x: &Array2<F>,
    y: &[usize],
    weight_decay: F,
) -> (F, EncoderGradient<F>) {
    let n = x.nrows();
    assert!(n > 0 && n == y.len());
    let nf = F::cast(n);
    let hidden_act = model.hidden_activations(x);
    let head_in = hidden_act.as_ref().unwrap_or(x);
    let mut probs = {
        let mut s = head_in.dot(&model.head_weight);
        for mut row in s.rows_mut() {
            row += &model.head_bias;
        }
        s
    };
    let mut loss = F::zero();
    let tiny = F::cast(1e-300);
    for (mut row, &label) in probs.rows_mut().into_iter().zip(y) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / z);
        loss -= row[label].max(tiny).ln();
    }
    loss /= nf;
    let two = F::cast(2.0);
    loss += weight_decay
        * (model.head_weight.iter().map(|&v| v * v).sum::<F>()
            + model
                .hidden
                .as_ref()
                .map_or(F::zero(), |h| h.weight.iter().map(|&v| v * v).sum::<F>()));

    // d loss / d scores
    let mut dscores = probs;
    for (mut row, &label) in dscores.rows_mut().into_iter().zip(y) {
        row[label] -= F::one();
        row.mapv_inplace(|v| v / nf);
    }
    let head_weight =
        head_in.t().dot(&dscores) + &model.head_weight.mapv(|v| two * weight_decay * v);
    let head_bias = dscores.sum_axis(Axis(0));

    let (hidden_weight, hidden_bias) = match (&model.hidden, &hidden_act) {
        (Some(h), Some(act)) => {
            let mut dhidden = dscores.dot(&model.head_weight.t());
            // rectifier gate
            for (mut row, act_row) in dhidden.rows_mut().into_iter().zip(act.rows()) {
                for (g, &a) in row.iter_mut().zip(act_row) {
                    if a <= F::zero() {
                        *g = F::zero();
                    }
                }
            }
            let dw = x.t().dot(&dhidden) + &h.weight.mapv(|v| two * weight_decay * v);
            let db = dhidden.sum_axis(Axis(0));
            (Some(dw), Some(db))
        }
        _ => (None, None),
    };

    (
        loss,
        EncoderGradient {
            hidden_weight,
            hidden_bias,
            head_weight,
            head_bias,
        },
    )
}

/// A trained encoder plus its training curve and validation outcome.
#[derive(Debug, Clone)]
pub struct TrainedEncoder<F: Float> {
    pub model: EncoderModel<F>,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub best_epoch: usize,
    pub val_top1: f64,
}

/// Train by seeded mini-batch gradient descent with momentum, keeping the
/// parameter snapshot with the best validation top-1. A warm start reuses
/// the previous hidden layer when its shape still fits; the head is always
/// reinitialized because the class count changes between iterations.
pub fn train_encoder<F: Float>(
    x_train: &FeatureMatrix<F>,
    y_train: &LabelVector,
    x_val: &FeatureMatrix<F>,
    y_val: &LabelVector,
    config: &EncoderConfig,
    warm_start: Option<&EncoderModel<F>>,
) -> Result<TrainedEncoder<F>> {
    y_train.validate_alignment(x_train.item_ids())?;
    y_val.validate_alignment(x_val.item_ids())?;
    let k = y_train.k();
    if k < 2 {
        return Err(Error::invalid("need at least two classes to train"));
    }
    if x_val.n_items() == 0 {
        return Err(Error::invalid("empty validation set"));
    }
    let mut present = vec![false; k];
    for &l in y_train.labels() {
        present[l] = true;
    }
    if let Some(class) = present.iter().position(|&p| !p) {
        return Err(Error::invalid(format!(
            "class {class} absent from training set"
        )));
    }

    let d = x_train.dim();
    let h = config.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut normal = |rows: usize, cols: usize, std: f64| -> Array2<F> {
        Array2::from_shape_fn((rows, cols), |_| {
            F::cast(std * rand::Rng::sample::<f64, _>(&mut rng, StandardNormal))
        })
    };

    let hidden = if h > 0 {
        let reusable = warm_start.and_then(|m| m.hidden.as_ref()).filter(|layer| {
            layer.weight.nrows() == d && layer.weight.ncols() == h
        });
        Some(match reusable {
            Some(layer) => layer.clone(),
            None => HiddenLayer {
                weight: normal(d, h, (2.0 / d as f64).sqrt()),
                bias: Array1::zeros(h),
            },
        })
    } else {
        None
    };
    let head_rows = if h > 0 { h } else { d };
    let mut model = EncoderModel {
        hidden,
        head_weight: normal(head_rows, k, (1.0 / head_rows as f64).sqrt()),
        head_bias: Array1::zeros(k),
        config: config.clone(),
    };

    let decay = F::cast(config.weight_decay);
    let body_lr = F::cast(config.learning_rate);
    let head_lr = if h > 0 {
        F::cast(config.learning_rate * 10.0)
    } else {
        body_lr
    };
    let momentum = F::cast(config.momentum);

    let mut v_head_w: Array2<F> = Array2::zeros(model.head_weight.raw_dim());
    let mut v_head_b: Array1<F> = Array1::zeros(k);
    let mut v_hidden_w: Option<Array2<F>> =
        model.hidden.as_ref().map(|l| Array2::zeros(l.weight.raw_dim()));
    let mut v_hidden_b: Option<Array1<F>> = model.hidden.as_ref().map(|_| Array1::zeros(h));

    let n = x_train.n_items();
    let labels = y_train.labels().to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    let batch = config.batch_size.max(1);

    let mut best = model.clone();
    let mut best_top1 = -1.0f64;
    let mut best_epoch = 0;
    let mut train_loss = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let xb = x_train.data().select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = encoder_loss_and_grad(&model, &xb, &yb, decay);
            epoch_loss += loss.as_f64();
            batches += 1;

            v_head_w.zip_mut_with(&grad.head_weight, |v, &g| {
                *v = momentum * *v - head_lr * g;
            });
            model.head_weight += &v_head_w;
            v_head_b.zip_mut_with(&grad.head_bias, |v, &g| {
                *v = momentum * *v - head_lr * g;
            });
            model.head_bias += &v_head_b;
            if let (Some(layer), Some(vw), Some(vb), Some(gw), Some(gb)) = (
                model.hidden.as_mut(),
                v_hidden_w.as_mut(),
                v_hidden_b.as_mut(),
                grad.hidden_weight.as_ref(),
                grad.hidden_bias.as_ref(),
            ) {
                vw.zip_mut_with(gw, |v, &g| *v = momentum * *v - body_lr * g);
                layer.weight += &*vw;
                vb.zip_mut_with(gb, |v, &g| *v = momentum * *v - body_lr * g);
                layer.bias += &*vb;
            }
        }
        train_loss.push(epoch_loss / batches.max(1) as f64);

        let val_proba = predict_proba(&model, x_val)?;
        let top1 = topk_accuracy(val_proba.view(), y_val, 1)?;
        // ties keep the latest epoch, whose representation is most trained
        if top1 >= best_top1 {
            best_top1 = top1;
            best = model.clone();
            best_epoch = epoch;
        }
    }

    Ok(TrainedEncoder {
        model: best,
        train_loss,
        best_epoch,
        val_top1: best_top1,
    })
}

/// The refined representation: hidden activations when a hidden layer
/// exists, otherwise the pre-softmax class scores.
pub fn encode_refined<F: Float>(
    model: &EncoderModel<F>,
    x: &FeatureMatrix<F>,
) -> Result<FeatureMatrix<F>> {
    if x.dim() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            actual: x.dim(),
        });
    }
    let data = match model.hidden_activations(x.data()) {
        Some(h) => h,
        None => model.scores(x.data()),
    };
    FeatureMatrix::new(data, x.item_ids().to_vec())
}

/// Row-wise class probabilities (softmax of the head scores).
pub fn predict_proba<F: Float>(
    model: &EncoderModel<F>,
    x: &FeatureMatrix<F>,
) -> Result<Array2<F>> {
    if x.dim() != model.input_dim() {
        return Err(Error::DimMismatch {
            expected: model.input_dim(),
            actual: x.dim(),
        });
    }
    let mut s = model.scores(x.data());
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / z);
    }
    Ok(s)
}

/// Held-out accuracy report. `top5` is reported as 1.0 with the
/// `top5_defaulted` flag when fewer than five classes exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub per_class: Vec<f64>,
    pub n_test: usize,
    pub top5_defaulted: bool,
}

pub fn evaluate<F: Float>(
    model: &EncoderModel<F>,
    x_test: &FeatureMatrix<F>,
    y_test: &LabelVector,
) -> Result<EvalReport> {
    if x_test.n_items() == 0 {
        return Err(Error::invalid("empty test set"));
    }
    y_test.validate_alignment(x_test.item_ids())?;
    let proba = predict_proba(model, x_test)?;
    let k = model.n_classes();
    let top1 = topk_accuracy(proba.view(), y_test, 1)?;
    let (top5, top5_defaulted) = if k >= 5 {
        (topk_accuracy(proba.view(), y_test, 5)?, false)
    } else {
        (1.0, true)
    };
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (row, &label) in proba.outer_iter().zip(y_test.labels()) {
        totals[label] += 1;
        let mut arg = 0;
        let mut best = row[0];
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                arg = j;
            }
        }
        if arg == label {
            hits[label] += 1;
        }
    }
    let per_class = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t > 0 { h as f64 / t as f64 } else { 0.0 })
        .collect();
    Ok(EvalReport {
        top1,
        top5,
        per_class,
        n_test: x_test.n_items(),
        top5_defaulted,
    })
}
