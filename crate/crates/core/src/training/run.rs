use std::time::Instant;

use image::RgbImage;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Paradigm, TrainConfig};
use super::loss::{cross_entropy_batch, supcon_loss_and_grad};
use super::optim::AdamW;
use crate::dataset::{augment, center_view, DatasetManifest, ImageSource, SampleRecord, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::metrics::PredictionRecord;
use crate::model::{
    Checkpoint, ClassifierHead, EncoderSpec, Gradients, ImageEncoder, ParamStore, ProjectionHead, Tape, TinyEncoder,
    Var,
};
use crate::taxonomy::Taxonomy;

const STREAM_SHUFFLE: u64 = 0;
const STREAM_AUGMENT: u64 = 1;
const STREAM_INIT: u64 = 2;
/// Words reserved per augmentation draw; far more than one pipeline uses.
const WORDS_PER_DRAW: u128 = 1024;

/// Everything a training run reads: records, their split, pixels, labels.
#[derive(Clone, Copy)]
pub struct TrainingData<'a> {
    pub manifest: &'a DatasetManifest,
    pub split: &'a SplitAssignment,
    pub images: &'a dyn ImageSource,
    pub taxonomy: &'a Taxonomy,
}

impl<'a> TrainingData<'a> {
    /// Records of one split in manifest order, with their L3 indices.
    pub fn subset(&self, which: Split) -> Result<Vec<(&'a SampleRecord, usize)>> {
        self.split.check_covers(self.manifest)?;
        self.manifest
            .records()
            .iter()
            .filter(|r| self.split.get(&r.sample_id) == Some(which))
            .map(|r| {
                let idx = self
                    .taxonomy
                    .l3_index(&r.l3_label)
                    .ok_or_else(|| Error::UnknownClass(r.l3_label.clone()))?;
                Ok((r, idx))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent for contrastive pretraining.
    pub train_top1: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub stage: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the best-validation checkpoint (0 = initialization).
    pub best_epoch: usize,
    /// Encoder parameter fingerprint at the end of the stage.
    pub encoder_fingerprint: String,
    pub checkpoints: Vec<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainRunRecord {
    /// One CSV line per epoch; empty cells for absent values.
    pub fn epoch_log_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("epoch,train_loss,train_top1,val_loss,val_top1\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                opt(e.train_top1),
                opt(e.val_loss),
                opt(e.val_top1)
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub record: TrainRunRecord,
}

fn augment_rng(seed: u64, draw: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_AUGMENT);
    rng.set_word_pos(draw as u128 * WORDS_PER_DRAW);
    rng
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_input_size(config: &TrainConfig, spec: &EncoderSpec) -> Result<()> {
    config.validate()?;
    spec.validate()?;
    if config.augmentation.output_size() != spec.input_size {
        return Err(Error::InvalidParameter(format!(
            "augmentation produces {} px but the encoder expects {} px",
            config.augmentation.output_size(),
            spec.input_size
        )));
    }
    Ok(())
}

fn apply(opt: &mut AdamW, store: &mut ParamStore, grads: &Gradients, vars: &[Var]) {
    let g: Vec<Array2<f64>> = vars
        .iter()
        .zip(store.values())
        .map(|(v, p)| grads.get_or_zeros(*v, p.dim()))
        .collect();
    opt.step(store, &g);
}

fn ensure_finite(loss: f64, stage: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{stage} loss became {loss} in epoch {epoch}; try a lower learning rate"
        )))
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

fn snapshot(
    encoder: &TinyEncoder,
    head: Option<&ClassifierHead>,
    projection: Option<&ProjectionHead>,
    taxonomy: &Taxonomy,
    config: &TrainConfig,
) -> Checkpoint {
    Checkpoint {
        encoder: encoder.clone(),
        head: head.cloned(),
        projection: projection.cloned(),
        class_order: taxonomy.l3_order().to_vec(),
        taxonomy_ref: taxonomy.identity(),
        metadata: serde_json::to_value(config).expect("config serializes"),
    }
}

/// Center views for one split, loaded once.
fn eval_views(data: &TrainingData, which: Split, config: &TrainConfig) -> Result<(Vec<RgbImage>, Vec<usize>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (r, y) in data.subset(which)? {
        images.push(center_view(&data.images.load(r)?, &config.augmentation)?);
        labels.push(y);
    }
    Ok((images, labels))
}

/// Mean cross-entropy and top-1 of `logits` against `labels`.
fn score_logits(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, f64)> {
    let (loss, _) = cross_entropy_batch(logits, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    Ok((loss, hits as f64 / labels.len() as f64))
}

fn classify_batch(encoder: &TinyEncoder, head: &ClassifierHead, images: &[RgbImage]) -> Result<Array2<f64>> {
    let emb = encoder.encode_batch(images)?;
    logits_of(head, &emb)
}

fn logits_of(head: &ClassifierHead, embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((embeddings.nrows(), head.class_order().len()));
    for (i, e) in embeddings.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&head.classify(&e.to_owned())?.raw);
    }
    Ok(out)
}

/// Tracks the best validation top-1 seen so far; ties keep the earlier.
struct BestTracker {
    top1: Option<f64>,
    epoch: usize,
}

impl BestTracker {
    fn improves(&mut self, epoch: usize, val_top1: Option<f64>) -> bool {
        match (val_top1, self.top1) {
            (Some(v), Some(b)) if v <= b => false,
            (Some(v), _) => {
                self.top1 = Some(v);
                self.epoch = epoch;
                true
            }
            (None, _) => {
                self.epoch = epoch;
                true
            }
        }
    }
}

/// Jointly trains a fresh encoder and classifier head with cross-entropy.
/// Keeps both the best-validation and the final checkpoint.
pub fn train_supervised(config: &TrainConfig, data: &TrainingData, spec: &EncoderSpec) -> Result<TrainOutcome> {
    if config.paradigm != Paradigm::Supervised {
        return Err(Error::InvalidParameter(
            "train_supervised needs the supervised paradigm".into(),
        ));
    }
    check_input_size(config, spec)?;
    let train = data.subset(Split::Train)?;
    if train.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    let (val_images, val_labels) = eval_views(data, Split::Val, config)?;
    let started = Instant::now();
    let class_order = data.taxonomy.l3_order().to_vec();
    let mut encoder = TinyEncoder::new(spec.clone(), config.seed)?;
    let mut head = ClassifierHead::random(spec.embed_dim, class_order, &mut stream_rng(config.seed, STREAM_INIT));
    let mut enc_opt = AdamW::new(config.learning_rate, config.weight_decay, encoder.params());
    let mut head_opt = AdamW::new(config.learning_rate, config.weight_decay, head.params());
    let mut shuffle = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let evaluate_val = |encoder: &TinyEncoder, head: &ClassifierHead| -> Result<(Option<f64>, Option<f64>)> {
        if val_images.is_empty() {
            return Ok((None, None));
        }
        let (l, a) = score_logits(&classify_batch(encoder, head, &val_images)?, &val_labels)?;
        Ok((Some(l), Some(a)))
    };

    let mut best_tracker = BestTracker { top1: None, epoch: 0 };
    best_tracker.improves(0, evaluate_val(&encoder, &head)?.1);
    let mut best = snapshot(&encoder, Some(&head), None, data.taxonomy, config);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let enc_vars = encoder.params().bind(&mut tape, true);
            let head_vars = head.params().bind(&mut tape, true);
            let mut rows = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for (pos, &i) in chunk.iter().enumerate() {
                let (record, y) = train[i];
                let draw = ((epoch - 1) * train.len() + b * config.batch_size + pos) as u64;
                let mut rng = augment_rng(config.augmentation.rng_seed, draw);
                let view = augment(&data.images.load(record)?, &config.augmentation, &mut rng)?;
                rows.push(encoder.forward(&mut tape, &enc_vars, &view)?.embedding);
                targets.push(y);
            }
            let emb = tape.concat_rows(&rows);
            let logits = head.logits(&mut tape, &head_vars, emb);
            let (loss, grad) = cross_entropy_batch(tape.value(logits), &targets)?;
            ensure_finite(loss, "cross-entropy", epoch)?;
            hits += targets
                .iter()
                .enumerate()
                .filter(|(r, &y)| argmax(tape.value(logits).row(*r)) == y)
                .count();
            loss_sum += loss * chunk.len() as f64;
            let root = tape.scalar_loss(logits, loss, grad);
            let grads = tape.backward(root);
            apply(&mut enc_opt, encoder.params_mut(), &grads, &enc_vars);
            apply(&mut head_opt, head.params_mut(), &grads, &head_vars);
        }
        let (val_loss, val_top1) = evaluate_val(&encoder, &head)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_top1: Some(hits as f64 / train.len() as f64),
            val_loss,
            val_top1,
        };
        log::info!(
            "supervised epoch {epoch}: train loss {:.4}, val top1 {:?}",
            rec.train_loss,
            rec.val_top1
        );
        epochs.push(rec);
        if best_tracker.improves(epoch, val_top1) {
            best = snapshot(&encoder, Some(&head), None, data.taxonomy, config);
        }
    }
    let last = snapshot(&encoder, Some(&head), None, data.taxonomy, config);
    Ok(TrainOutcome {
        best,
        record: TrainRunRecord {
            stage: "supervised".into(),
            config: config.clone(),
            epochs,
            best_epoch: best_tracker.epoch,
            encoder_fingerprint: last.encoder.params().fingerprint(),
            checkpoints: vec!["best.ckpt".into(), "final.ckpt".into()],
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        last,
    })
}

/// Contrastive pretraining of a fresh encoder plus projection head. Each
/// sample contributes two independently augmented views, so every step sees
/// `2 × batch_size` projections. The returned checkpoints carry the
/// projection head for analysis; the probe stage ignores it.
pub fn pretrain_supcon(config: &TrainConfig, data: &TrainingData, spec: &EncoderSpec) -> Result<TrainOutcome> {
    if config.paradigm != Paradigm::Supcon {
        return Err(Error::InvalidParameter(
            "pretrain_supcon needs the supcon paradigm".into(),
        ));
    }
    check_input_size(config, spec)?;
    let train = data.subset(Split::Train)?;
    if train.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    let (val_images, val_labels) = eval_views(data, Split::Val, config)?;
    let started = Instant::now();
    let mut encoder = TinyEncoder::new(spec.clone(), config.seed)?;
    let hidden = config.projection_hidden.unwrap_or(spec.embed_dim);
    let mut projection = ProjectionHead::random(
        spec.embed_dim,
        hidden,
        config.projection_dim,
        &mut stream_rng(config.seed, STREAM_INIT),
    );
    let mut enc_opt = AdamW::new(config.learning_rate, config.weight_decay, encoder.params());
    let mut proj_opt = AdamW::new(config.learning_rate, config.weight_decay, projection.params());
    let mut shuffle = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let enc_vars = encoder.params().bind(&mut tape, true);
            let proj_vars = projection.params().bind(&mut tape, true);
            let mut rows = Vec::with_capacity(2 * chunk.len());
            let mut labels = Vec::with_capacity(2 * chunk.len());
            for (pos, &i) in chunk.iter().enumerate() {
                let (record, y) = train[i];
                let image = data.images.load(record)?;
                let base = ((epoch - 1) * train.len() + b * config.batch_size + pos) as u64;
                for view in 0..2 {
                    let mut rng = augment_rng(config.augmentation.rng_seed, 2 * base + view);
                    let img = augment(&image, &config.augmentation, &mut rng)?;
                    rows.push(encoder.forward(&mut tape, &enc_vars, &img)?.embedding);
                    labels.push(y);
                }
            }
            let emb = tape.concat_rows(&rows);
            let z = projection.forward(&mut tape, &proj_vars, emb)?;
            let (loss, grad) = supcon_loss_and_grad(tape.value(z), &labels, config.temperature)?;
            ensure_finite(loss, "contrastive", epoch)?;
            loss_sum += loss * chunk.len() as f64;
            let root = tape.scalar_loss(z, loss, grad);
            let grads = tape.backward(root);
            apply(&mut enc_opt, encoder.params_mut(), &grads, &enc_vars);
            apply(&mut proj_opt, projection.params_mut(), &grads, &proj_vars);
        }
        let val_loss = if val_images.is_empty() {
            None
        } else {
            let emb = encoder.encode_batch(&val_images)?;
            let mut z = Array2::zeros((emb.nrows(), projection.output_dim()));
            for (i, e) in emb.rows().into_iter().enumerate() {
                z.row_mut(i).assign(&projection.project(&e.to_owned())?);
            }
            // a validation set without any repeated label has no contrastive loss
            supcon_loss_and_grad(&z, &val_labels, config.temperature)
                .ok()
                .map(|(l, _)| l)
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_top1: None,
            val_loss,
            val_top1: None,
        };
        log::info!("supcon epoch {epoch}: train loss {:.4}", rec.train_loss);
        epochs.push(rec);
    }
    let last = snapshot(&encoder, None, Some(&projection), data.taxonomy, config);
    Ok(TrainOutcome {
        best: last.clone(),
        record: TrainRunRecord {
            stage: "supcon_pretrain".into(),
            config: config.clone(),
            best_epoch: config.epochs,
            epochs,
            encoder_fingerprint: last.encoder.params().fingerprint(),
            checkpoints: vec!["encoder.ckpt".into()],
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        last,
    })
}

/// Center-view embeddings of one split under a fixed encoder.
fn split_embeddings(
    encoder: &TinyEncoder,
    data: &TrainingData,
    which: Split,
    config: &TrainConfig,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let (images, labels) = eval_views(data, which, config)?;
    Ok((encoder.encode_batch(&images)?, labels))
}

/// Trains a fresh linear head on a frozen encoder. Embeddings are the
/// center views of each record, computed once; the encoder never enters an
/// optimizer and its fingerprint is checked before returning.
pub fn linear_probe(
    encoder_checkpoint: &Checkpoint,
    config: &TrainConfig,
    data: &TrainingData,
) -> Result<TrainOutcome> {
    let encoder = &encoder_checkpoint.encoder;
    check_input_size(config, encoder.spec())?;
    let before = encoder.params().fingerprint();
    let (train_x, train_y) = split_embeddings(encoder, data, Split::Train, config)?;
    if train_y.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    let (val_x, val_y) = split_embeddings(encoder, data, Split::Val, config)?;
    let started = Instant::now();
    let mut head = ClassifierHead::random(
        encoder.spec().embed_dim,
        data.taxonomy.l3_order().to_vec(),
        &mut stream_rng(config.seed, STREAM_INIT),
    );
    if head.input_dim() != train_x.ncols() {
        return Err(Error::Shape("encoder width does not match the head".into()));
    }
    let mut opt = AdamW::new(config.probe_lr(), config.weight_decay, head.params());
    let mut shuffle = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train_y.len()).collect();

    let evaluate_val = |head: &ClassifierHead| -> Result<(Option<f64>, Option<f64>)> {
        if val_y.is_empty() {
            return Ok((None, None));
        }
        let (l, a) = score_logits(&logits_of(head, &val_x)?, &val_y)?;
        Ok((Some(l), Some(a)))
    };
    let mut tracker = BestTracker { top1: None, epoch: 0 };
    tracker.improves(0, evaluate_val(&head)?.1);
    let mut best_head = head.clone();
    let mut epochs = Vec::new();
    for epoch in 1..=config.probe_epoch_count() {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = head.params().bind(&mut tape, true);
            let x = Array2::from_shape_fn((chunk.len(), train_x.ncols()), |(r, c)| train_x[[chunk[r], c]]);
            let targets: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let xv = tape.constant(x);
            let logits = head.logits(&mut tape, &vars, xv);
            let (loss, grad) = cross_entropy_batch(tape.value(logits), &targets)?;
            ensure_finite(loss, "probe cross-entropy", epoch)?;
            hits += targets
                .iter()
                .enumerate()
                .filter(|(r, &y)| argmax(tape.value(logits).row(*r)) == y)
                .count();
            loss_sum += loss * chunk.len() as f64;
            let root = tape.scalar_loss(logits, loss, grad);
            let grads = tape.backward(root);
            apply(&mut opt, head.params_mut(), &grads, &vars);
        }
        let (val_loss, val_top1) = evaluate_val(&head)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_y.len() as f64,
            train_top1: Some(hits as f64 / train_y.len() as f64),
            val_loss,
            val_top1,
        });
        if tracker.improves(epoch, val_top1) {
            best_head = head.clone();
        }
    }
    let after = encoder.params().fingerprint();
    if after != before {
        return Err(Error::Degenerate("encoder changed during the linear probe".into()));
    }
    let make = |h: &ClassifierHead| snapshot(encoder, Some(h), None, data.taxonomy, config);
    Ok(TrainOutcome {
        best: make(&best_head),
        last: make(&head),
        record: TrainRunRecord {
            stage: "linear_probe".into(),
            config: config.clone(),
            epochs,
            best_epoch: tracker.epoch,
            encoder_fingerprint: after,
            checkpoints: vec!["best.ckpt".into(), "final.ckpt".into()],
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Both SupCon stages back to back.
pub fn train_supcon(
    config: &TrainConfig,
    data: &TrainingData,
    spec: &EncoderSpec,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let pre = pretrain_supcon(config, data, spec)?;
    let probe = linear_probe(&pre.last, config, data)?;
    Ok((pre, probe))
}

/// Ranked predictions for every record of `which`, from center views.
/// Scores are softmax probabilities in taxonomy order.
pub fn predict_split(
    checkpoint: &Checkpoint,
    data: &TrainingData,
    which: Split,
    view: &crate::dataset::AugmentationConfig,
) -> Result<Vec<PredictionRecord>> {
    let head = checkpoint.require_head()?;
    let mut out = Vec::new();
    for (record, _) in data.subset(which)? {
        let image = center_view(&data.images.load(record)?, view)?;
        let emb: Array1<f64> = checkpoint.encoder.encode(&image)?;
        let scores = head.classify(&emb)?;
        out.push(PredictionRecord::from_scores(
            record.sample_id.clone(),
            record.l3_label.clone(),
            scores.probabilities.as_slice().expect("contiguous"),
            head.class_order(),
        ));
    }
    Ok(out)
}
