//! Minibatch training of `J(θ) = -(1/N) Σ_i log P(ŷ_i = y_i | x_i; θ)`.
//!
//! Gradients of a minibatch are computed over fixed chunks of
//! [`GRAD_CHUNK`] samples, possibly in parallel, and the chunk sums are
//! added in chunk order. The result is therefore the same for any thread
//! count and with or without the `parallel` feature.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::arch::Model;
use crate::datapipe::WindowedDataset;
use crate::exec::{self, Execution};
use crate::layers::{softmax, Mode};
use crate::seed;
use crate::tensor::{ParamGrads, Tape, Tensor};
use crate::{Error, Real, Result};

pub const GRAD_CHUNK: usize = 8;

const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_DROPOUT: u64 = 0x4452_4f50;
const STREAM_LOSS: u64 = 0x4c4f_5353;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Optimizer::Adam { beta1, beta2, eps } => write!(f, "adam {beta1} {beta2} {eps:e}"),
            Optimizer::Sgd => write!(f, "sgd"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            batch_size: 128,
            epochs: 50,
            learning_rate: 0.001,
            dropout: 0.5,
            optimizer: Optimizer::default(),
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One training example: a `[n, w]` image and its class index.
pub type Sample<'a, T> = (&'a Tensor<T>, usize);

fn check_label<T: Real>(model: &Model<T>, label: usize) -> Result<()> {
    let classes = model.arch().classes;
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Loss and gradient of one sample, with `weight · ∂loss/∂θ` added to `acc`.
/// Returns the loss and whether the argmax was correct.
fn sample_grad<T: Real>(
    model: &Model<T>,
    (image, label): Sample<'_, T>,
    dropout_seed: Option<u64>,
    acc: &mut ParamGrads<T>,
    weight: T,
) -> Result<(f64, bool)> {
    check_label(model, label)?;
    let mut tape = Tape::with_params(model.params());
    let mut rng = dropout_seed.map(seed::rng);
    let logits = model.network().logits(&mut tape, image, rng.as_mut())?;
    let correct = argmax(tape.value(logits)?) == label;
    let (loss, _) = tape.softmax_cross_entropy(logits, label)?;
    let value = tape.value(loss)?[0].as_f64();
    tape.backward_into(loss, acc, weight)?;
    Ok((value, correct))
}

/// Sum of per-sample losses, count of correct argmaxes and the gradient of
/// the mean loss over `batch`. `dropout_seeds[i]` seeds sample `i`'s
/// dropout masks; `None` disables dropout.
pub fn batch_gradient<T: Real>(
    model: &Model<T>,
    batch: &[Sample<'_, T>],
    dropout_seeds: Option<&[u64]>,
    exec: Execution,
) -> Result<(f64, usize, ParamGrads<T>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(s) = dropout_seeds {
        if s.len() != batch.len() {
            return Err(Error::invalid("one dropout seed per sample is required"));
        }
    }
    let weight = T::from_f64(1.0 / batch.len() as f64);
    let chunks = batch.len().div_ceil(GRAD_CHUNK);
    let partials = exec::map_range(exec, chunks, |c| -> Result<(f64, usize, ParamGrads<T>)> {
        let mut acc = ParamGrads::zeros_like(model.params());
        let (mut loss, mut correct) = (0.0, 0);
        for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(batch.len()) {
            let (l, ok) = sample_grad(model, batch[i], dropout_seeds.map(|s| s[i]), &mut acc, weight)?;
            loss += l;
            correct += ok as usize;
        }
        Ok((loss, correct, acc))
    });
    let mut parts = partials.into_iter();
    let (mut loss, mut correct, mut grads) = parts.next().expect("non-empty batch")?;
    for part in parts {
        let (l, c, g) = part?;
        loss += l;
        correct += c;
        grads.add_assign(&g);
    }
    Ok((loss, correct, grads))
}

/// Mean cross-entropy over `batch`. In train mode, sample `i` draws its
/// dropout masks from a stream derived from the model seed and `i`.
pub fn batch_loss<T: Real>(model: &Model<T>, batch: &[Sample<'_, T>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (i, &(image, label)) in batch.iter().enumerate() {
        check_label(model, label)?;
        let mut tape = Tape::with_params(model.params());
        let mut rng = (model.mode() == Mode::Train).then(|| seed::rng(seed::derive(model.seed(), STREAM_LOSS, i as u64, 0)));
        let logits = model.forward(&mut tape, image, rng.as_mut())?;
        let (loss, _) = tape.softmax_cross_entropy(logits, label)?;
        total += tape.value(loss)?[0].as_f64();
    }
    Ok(total / batch.len() as f64)
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

fn check_grads<T: Real>(params: &[Tensor<T>], grads: &ParamGrads<T>) -> Result<()> {
    let ok = grads.len() == params.len() && params.iter().zip(grads.iter()).all(|(p, g)| p.len() == g.len());
    if !ok {
        return Err(Error::invalid("gradients do not match the parameter set"));
    }
    Ok(())
}

/// One bias-corrected Adam update: `θ ← θ - η·m̂ / (sqrt(v̂) + ε)`.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_grads(params, grads)?;
    let state_ok = state.m.len() == params.len()
        && state.v.len() == params.len()
        && params.iter().zip(&state.m).zip(&state.v).all(|((p, m), v)| m.len() == p.len() && v.len() == p.len());
    if !state_ok {
        return Err(Error::invalid("optimizer state does not match the parameter set"));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let step = T::from_f64(lr / (1.0 - beta1.powi(t)));
    let v_corr = T::from_f64(1.0 / (1.0 - beta2.powi(t)));
    let eps = T::from_f64(eps);
    for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *x -= step * *m / ((*v * v_corr).sqrt() + eps);
        }
    }
    Ok(())
}

/// `θ ← θ - η·g`.
pub fn sgd_step<T: Real>(params: &mut [Tensor<T>], grads: &ParamGrads<T>, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    let lr = T::from_f64(lr);
    for (p, g) in params.iter_mut().zip(grads.iter()) {
        for (x, &g) in p.data_mut().iter_mut().zip(g) {
            *x -= lr * g;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's forward passes (dropout on).
    pub loss: f64,
    /// Training accuracy over the same passes.
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

pub const HISTORY_MAGIC: &str = "gfcnn-history 1";

impl TrainHistory {
    /// One `epoch` line per record. Wall time is left out so that files
    /// from identical runs compare equal.
    pub fn to_text(&self) -> String {
        let mut s = format!("{HISTORY_MAGIC}\n");
        for r in &self.epochs {
            s.push_str(&format!("epoch {} loss {:?} train-acc {:?}", r.epoch, r.loss, r.train_accuracy));
            if let Some(a) = r.eval_accuracy {
                s.push_str(&format!(" eval-acc {a:?}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |r: String| Error::format("training history", r);
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_MAGIC) {
            return Err(bad(format!("missing {HISTORY_MAGIC:?} header")));
        }
        let mut epochs = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let tok: Vec<&str> = line.split_whitespace().collect();
            let field = |key: &str| -> Result<Option<&str>> {
                match tok.iter().position(|t| *t == key) {
                    Some(i) => tok.get(i + 1).copied().map(Some).ok_or_else(|| bad(format!("{key} without value"))),
                    None => Ok(None),
                }
            };
            let num = |key: &str| -> Result<f64> {
                field(key)?
                    .ok_or_else(|| bad(format!("missing {key} in {line:?}")))?
                    .parse()
                    .map_err(|_| bad(format!("bad {key} in {line:?}")))
            };
            epochs.push(EpochRecord {
                epoch: num("epoch")? as usize,
                loss: num("loss")?,
                train_accuracy: num("train-acc")?,
                eval_accuracy: field("eval-acc")?.map(|_| num("eval-acc")).transpose()?,
                wall_seconds: 0.0,
            });
        }
        Ok(TrainHistory { epochs })
    }
}

/// Converts every image of `ds` to a network input tensor.
pub fn dataset_tensors<T: Real>(ds: &WindowedDataset) -> Result<Vec<Tensor<T>>> {
    ds.images.iter().map(|img| img.to_tensor(ds.n, ds.w)).collect()
}

fn check_dataset<T: Real>(model: &Model<T>, ds: &WindowedDataset) -> Result<()> {
    let arch = model.arch();
    if (ds.n, ds.w) != arch.input {
        return Err(Error::ShapeMismatch {
            op: "dataset vs model input",
            lhs: vec![ds.n, ds.w],
            rhs: vec![arch.input.0, arch.input.1],
        });
    }
    if ds.classes != arch.classes {
        return Err(Error::invalid(format!("dataset has {} classes, model outputs {}", ds.classes, arch.classes)));
    }
    Ok(())
}

/// Trains for `hp.epochs` epochs. Each epoch visits the data in an order
/// shuffled from `hp.seed` and the epoch number, in minibatches of
/// `hp.batch_size` (the last one may be short). Returns the model in eval
/// mode and one history record per epoch.
pub fn train<T: Real>(
    mut model: Model<T>,
    train_set: &WindowedDataset,
    hp: &HyperParams,
    eval_set: Option<&WindowedDataset>,
    exec: Execution,
) -> Result<(Model<T>, TrainHistory)> {
    hp.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    check_dataset(&model, train_set)?;
    if let Some(e) = eval_set {
        check_dataset(&model, e)?;
    }
    model.set_dropout_rate(hp.dropout)?;
    model.set_mode(Mode::Train);

    let inputs = dataset_tensors::<T>(train_set)?;
    let eval_inputs = eval_set.map(dataset_tensors::<T>).transpose()?;
    let mut adam = AdamState::new(model.params());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..inputs.len()).collect();

    for epoch in 0..hp.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(hp.seed, STREAM_SHUFFLE, epoch as u64, 0)));
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, idx) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<Sample<'_, T>> = idx.iter().map(|&i| (&inputs[i], train_set.images[i].label)).collect();
            let seeds: Vec<u64> = (0..idx.len())
                .map(|k| seed::derive(hp.seed, STREAM_DROPOUT, epoch as u64, (b * hp.batch_size + k) as u64))
                .collect();
            let (l, c, grads) = batch_gradient(&model, &batch, Some(&seeds), exec)?;
            loss_sum += l;
            correct += c;
            match hp.optimizer {
                Optimizer::Adam { beta1, beta2, eps } => {
                    adam_step(model.params_mut(), &grads, &mut adam, hp.learning_rate, beta1, beta2, eps)?
                }
                Optimizer::Sgd => sgd_step(model.params_mut(), &grads, hp.learning_rate)?,
            }
        }
        let eval_accuracy = match (&eval_inputs, eval_set) {
            (Some(x), Some(ds)) => Some(accuracy(&predict_classes(&model, x, exec)?, &ds.labels())),
            _ => None,
        };
        let n = inputs.len() as f64;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            eval_accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    model.set_mode(Mode::Eval);
    Ok((model, history))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: PartialOrd>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub class: usize,
}

/// Class probabilities with dropout off. The model is not modified.
pub fn predict<T: Real>(model: &Model<T>, images: &[Tensor<T>], exec: Execution) -> Result<Vec<Prediction>> {
    exec::map(exec, images, |img| -> Result<Prediction> {
        let mut tape = Tape::with_params(model.params());
        let logits = model.network().logits(&mut tape, img, None)?;
        let values = tape.value(logits)?;
        let probs: Vec<f64> = softmax(values).iter().map(|p| p.as_f64()).collect();
        Ok(Prediction {
            class: argmax(values),
            probs,
        })
    })
    .into_iter()
    .collect()
}

pub fn predict_classes<T: Real>(model: &Model<T>, images: &[Tensor<T>], exec: Execution) -> Result<Vec<usize>> {
    Ok(predict(model, images, exec)?.into_iter().map(|p| p.class).collect())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64
}

/// Plain-text record of a training run.
pub fn run_manifest<T: Real>(model: &Model<T>, hp: &HyperParams, train_set: &WindowedDataset, eval_set: Option<&WindowedDataset>) -> String {
    let mut s = String::from("gfcnn-run 1\n");
    let mut line = |k: &str, v: String| s.push_str(&format!("{k} {v}\n"));
    line("arch", model.arch().arch_string());
    line("input", format!("{} {}", model.arch().input.0, model.arch().input.1));
    line("classes", model.arch().classes.to_string());
    line("params", model.count_params().total.to_string());
    line("precision", T::NAME.to_string());
    line("init", "he-uniform".into());
    line("input-scaling", "pixel/255".into());
    line("seed", hp.seed.to_string());
    line("batch-size", hp.batch_size.to_string());
    line("epochs", hp.epochs.to_string());
    line("learning-rate", hp.learning_rate.to_string());
    line("dropout", hp.dropout.to_string());
    line("optimizer", hp.optimizer.to_string());
    line("grad-chunk", GRAD_CHUNK.to_string());
    line("train-images", train_set.len().to_string());
    line("train-crc32", format!("{:08x}", crc32fast::hash(&train_set.to_bytes())));
    if let Some(e) = eval_set {
        line("eval-images", e.len().to_string());
        line("eval-crc32", format!("{:08x}", crc32fast::hash(&e.to_bytes())));
    }
    s
}
