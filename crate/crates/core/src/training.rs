//! Supervised training: softmax cross-entropy, Adam, and an epoch loop with
//! best-validation checkpoints and exact resume.
//!
//! Each sample of a minibatch gets its own tape, so samples can run on
//! separate threads; their gradients are summed in sample order, which keeps
//! results bit-identical for any thread count.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::{keyed_rng, Manifest, Split};
use crate::error::{Error, Result};
use crate::imageproc::{tan_triggs_pipeline, GrayImage};
use crate::model::{ModelConfig, PocVit};
use crate::tensor::{read_archive, write_archive, Dtype, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub seed: u64,
    /// Run adaptive Tan-Triggs on every image before patching.
    pub preprocess: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            seed: 0,
            preprocess: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps_opt > 0.0
            && self.epochs > 0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

/// A model and its training settings, as stored in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Mean over the batch of `logsumexp(z) - z[label]`, fused for stability.
pub fn cross_entropy_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let z = logits.value();
    let shape = z.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::Shape(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} outside {c} classes")));
    }
    let mut probs = vec![0.0; b * c];
    let mut total = 0.0;
    for (i, row) in z.data().chunks(c).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - row[labels[i]];
        for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    let labels = labels.to_vec();
    Ok(logits.tape().op(
        Tensor::scalar(total / b as f64),
        &[logits],
        Box::new(move |g, _| {
            let k = g.data()[0] / b as f64;
            let mut grad = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                grad[i * c + l] -= 1.0;
            }
            grad.iter_mut().for_each(|v| *v *= k);
            vec![Some(Tensor::new(&[b, c], grad).expect("shape"))]
        }),
    ))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Adam {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn update(
        &mut self,
        names: &[String],
        params: &mut [Tensor],
        grads: &[Tensor],
        cfg: &TrainConfig,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() || names.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((n, p), g) in names.iter().zip(params.iter()).zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("{n}: parameter {:?}, gradient {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {n}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((w, mj), vj) in params[i].data_mut().iter_mut().zip(m).zip(v) {
                *w -= cfg.learning_rate * (mj / c1) / ((vj / c2).sqrt() + cfg.eps_opt);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<EpochStats>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_acc\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.train_acc, e.val_acc));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("line {} has {} fields", i + 1, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 1)));
            entries.push(EpochStats {
                epoch: f[0].parse().map_err(|e| bad(format!("line {}: {e}", i + 1)))?,
                train_loss: num(f[1])?,
                train_acc: num(f[2])?,
                val_acc: num(f[3])?,
            });
        }
        Ok(TrainLog { entries })
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.val_acc).reduce(f64::max)
    }
}

/// Image pairs of one split held in memory, optionally preprocessed.
#[derive(Clone, Debug)]
pub struct Samples {
    pub pairs: Vec<(GrayImage, GrayImage)>,
    pub labels: Vec<usize>,
    pub subjects: Vec<u64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Applies `f` to every image; used for test-time perturbations.
    pub fn map_images(&self, f: impl Fn(&GrayImage) -> Result<GrayImage> + Sync) -> Result<Samples> {
        let pairs = self
            .pairs
            .par_iter()
            .map(|(a, b)| Ok((f(a)?, f(b)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Samples {
            pairs,
            ..self.clone()
        })
    }

    pub fn preprocessed(&self) -> Result<Samples> {
        self.map_images(|img| Ok(tan_triggs_pipeline(img)?.0))
    }
}

pub fn load_samples(manifest: &Manifest, split: Split, preprocess: bool) -> Result<Samples> {
    let entries = manifest.split(split);
    let pairs = entries
        .par_iter()
        .map(|e| {
            let (a, b) = manifest.load_pair(e)?;
            if preprocess {
                Ok((tan_triggs_pipeline(&a)?.0, tan_triggs_pipeline(&b)?.0))
            } else {
                Ok((a, b))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Samples {
        pairs,
        labels: entries.iter().map(|e| e.label).collect(),
        subjects: entries.iter().map(|e| e.subject).collect(),
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax predictions for every sample.
pub fn predict(model: &PocVit, samples: &Samples) -> Result<Vec<usize>> {
    samples
        .pairs
        .par_iter()
        .map(|(a, b)| Ok(argmax(model.infer(a, b)?.0.data())))
        .collect()
}

pub fn accuracy(model: &PocVit, samples: &Samples) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("accuracy of an empty split".into()));
    }
    let preds = predict(model, samples)?;
    let hits = preds.iter().zip(&samples.labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor>,
}

fn sample_step(model: &PocVit, pair: &(GrayImage, GrayImage), label: usize, weight: f64) -> Result<SampleResult> {
    let tape = Tape::new();
    let vars = model.bind(&tape);
    let out = model.forward_with(&vars, &pair.0, &pair.1)?;
    let logits = out.logits.reshape(&[1, model.config().n_classes])?;
    let correct = argmax(logits.value().data()) == label;
    let loss = cross_entropy_loss(logits, &[label])?;
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss for a label-{label} sample")));
    }
    let mut g = tape.backward(loss.scale(weight))?;
    let grads = vars
        .iter()
        .map(|v| g.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    Ok(SampleResult {
        loss: value,
        correct,
        grads,
    })
}

/// Mean loss gradient over `batch`. Returns the summed loss, the number of
/// correct pre-update predictions and the gradients in parameter order.
pub fn batch_gradients(model: &PocVit, samples: &Samples, batch: &[usize]) -> Result<(f64, usize, Vec<Tensor>)> {
    let weight = 1.0 / batch.len() as f64;
    let mut acc: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let (mut loss, mut correct) = (0.0, 0);
    let chunk = rayon::current_num_threads().max(1);
    for ids in batch.chunks(chunk) {
        let results = ids
            .par_iter()
            .map(|&i| sample_step(model, &samples.pairs[i], samples.labels[i], weight))
            .collect::<Result<Vec<_>>>()?;
        for r in results {
            loss += r.loss;
            correct += r.correct as usize;
            for (a, g) in acc.iter_mut().zip(&r.grads) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
    }
    Ok((loss, correct, acc))
}

/// Minibatches of one epoch: a shuffle keyed by `(seed, epoch)`.
pub fn epoch_batches(seed: u64, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(&[seed, epoch as u64, 0x7472_6169_6e]));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Files under a training output directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        RunLayout {
            root: root.to_path_buf(),
        }
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }
    pub fn best(&self) -> PathBuf {
        self.root.join("best")
    }
    pub fn last(&self) -> PathBuf {
        self.root.join("last")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("state")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    epochs_done: usize,
    adam_step: u64,
    best_val_acc: Option<f64>,
    best_epoch: Option<usize>,
    log: TrainLog,
    train: TrainConfig,
    model: ModelConfig,
}

fn save_state(dir: &Path, model: &PocVit, adam: &Adam, state: &ResumeState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        named.push((format!("param/{}", p.name), p.value.as_ref()));
        named.push((format!("m/{}", p.name), &adam.m[i]));
        named.push((format!("v/{}", p.name), &adam.v[i]));
    }
    write_archive(&dir.join("tensors.json"), &named, Dtype::F64)?;
    let path = dir.join("state.json");
    let json = serde_json::to_string_pretty(state).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn load_state(dir: &Path) -> Result<(PocVit, Adam, ResumeState)> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state: ResumeState = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let mut model = PocVit::new(state.model.clone())?;
    let stored = read_archive(&dir.join("tensors.json"))?;
    let n = model.params().len();
    if stored.len() != 3 * n {
        return Err(Error::Format {
            path: dir.join("tensors.json"),
            msg: format!("{} tensors for a {n}-parameter model", stored.len()),
        });
    }
    let mut params = Vec::with_capacity(n);
    let mut adam = Adam {
        step: state.adam_step,
        m: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
    };
    for (i, chunk) in stored.chunks(3).enumerate() {
        let name = &model.params()[i].name;
        if chunk[0].0 != format!("param/{name}") {
            return Err(Error::Format {
                path: dir.join("tensors.json"),
                msg: format!("expected {name}, found {}", chunk[0].0),
            });
        }
        params.push(chunk[0].1.clone());
        adam.m.push(chunk[1].1.clone());
        adam.v.push(chunk[2].1.clone());
    }
    model.set_values(params)?;
    Ok((model, adam, state))
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: PocVit,
    pub log: TrainLog,
    pub best_val_acc: f64,
    pub best_epoch: usize,
}

/// Trains `model` on the manifest's train split, validating on its test
/// split after every epoch. Writes `train_log.csv`, `best/` (highest
/// validation accuracy so far, latest epoch on ties), `last/` and an exact
/// f64 `state/` snapshot under `out_dir`. With `resume`, training continues
/// from `state/` up to `cfg.epochs` and `model` is ignored; only the epoch
/// budget may differ from the interrupted run.
pub fn train_loop(
    model: PocVit,
    manifest: &Manifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let layout = RunLayout::new(out_dir);
    let (mut model, mut adam, mut state) = if resume {
        let (m, a, s) = load_state(&layout.state())?;
        let same = TrainConfig {
            epochs: cfg.epochs,
            ..s.train.clone()
        };
        if same != *cfg {
            return Err(Error::Config("resumed run has different training settings".into()));
        }
        let s = ResumeState { train: cfg.clone(), ..s };
        (m, a, s)
    } else {
        let values: Vec<Tensor> = model.params().iter().map(|p| (*p.value).clone()).collect();
        let adam = Adam::new(&values);
        let state = ResumeState {
            epochs_done: 0,
            adam_step: 0,
            best_val_acc: None,
            best_epoch: None,
            log: TrainLog::default(),
            train: cfg.clone(),
            model: model.config().clone(),
        };
        (model, adam, state)
    };
    let mc = model.config().clone();
    if mc.n_classes != manifest.n_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            mc.n_classes,
            manifest.n_classes()
        )));
    }
    if manifest.image_size != mc.image_size {
        return Err(Error::Config(format!(
            "model expects {} pixel images, dataset has {}",
            mc.image_size, manifest.image_size
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = load_samples(manifest, Split::Train, cfg.preprocess)?;
    let val = load_samples(manifest, Split::Test, cfg.preprocess)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("train and test splits must both be nonempty".into()));
    }
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();

    for epoch in state.epochs_done..cfg.epochs {
        let (mut loss_sum, mut hits) = (0.0, 0);
        for batch in epoch_batches(cfg.seed, epoch, train.len(), cfg.batch_size) {
            let (loss, correct, grads) = batch_gradients(&model, &train, &batch)?;
            loss_sum += loss;
            hits += correct;
            let mut values: Vec<Tensor> = model.params().iter().map(|p| (*p.value).clone()).collect();
            adam.update(&names, &mut values, &grads, cfg)?;
            model.set_values(values)?;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_acc: 100.0 * hits as f64 / train.len() as f64,
            val_acc: accuracy(&model, &val)?,
        };
        log::info!(
            "epoch {} loss {:.5} train {:.2}% val {:.2}%",
            stats.epoch,
            stats.train_loss,
            stats.train_acc,
            stats.val_acc
        );
        state.log.entries.push(stats);
        if state.best_val_acc.map_or(true, |b| stats.val_acc >= b) {
            state.best_val_acc = Some(stats.val_acc);
            state.best_epoch = Some(stats.epoch);
            model.save(&layout.best())?;
        }
        state.epochs_done = epoch + 1;
        state.adam_step = adam.step;
        model.save(&layout.last())?;
        save_state(&layout.state(), &model, &adam, &state)?;
        state.log.write_csv(&layout.log())?;
    }
    Ok(TrainOutcome {
        best_val_acc: state.best_val_acc.unwrap_or(0.0),
        best_epoch: state.best_epoch.unwrap_or(0),
        model,
        log: state.log,
    })
}
