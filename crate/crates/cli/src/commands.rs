use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use habclass_core::dataset::{
    self, center_view, generate_toy_dataset, stratified_split, AugmentationConfig, DatasetManifest, Difficulty,
    DirectoryImages, ImageSource, Split, SplitAssignment, SplitFractions, ToyConfig,
};
use habclass_core::embedding::{export_embeddings, grouped_quality, EmbeddingSet};
use habclass_core::expert::{self, agreement_matrix, AnnotationSet};
use habclass_core::explain::{gradcam, write_overlays};
use habclass_core::metrics::{self, confusion_matrix, LabelledMatrix, Normalization, PredictionRecord};
use habclass_core::model::{Checkpoint, EncoderSpec};
use habclass_core::taxonomy::{Level, Taxonomy};
use habclass_core::training::{
    predict_split, train_supcon, train_supervised, Paradigm, TrainConfig, TrainOutcome, TrainingData,
};
use serde_json::json;

use crate::plot::{self, Palette};
use crate::*;

fn taxonomy(path: &Option<PathBuf>) -> Result<Taxonomy> {
    match path {
        Some(p) => Ok(Taxonomy::load(p)?),
        None => Ok(Taxonomy::default()),
    }
}

fn level(s: &str) -> Result<Level> {
    match s {
        "l3" => Ok(Level::L3),
        "l2" => Ok(Level::L2),
        other => bail!("unknown level `{other}` (expected l3 or l2)"),
    }
}

fn difficulty(s: &str) -> Result<Difficulty> {
    match s {
        "separable" => Ok(Difficulty::Separable),
        "confusable-pair" => Ok(Difficulty::ConfusablePair),
        other => bail!("unknown difficulty `{other}` (expected separable or confusable-pair)"),
    }
}

fn image_root(images: &Option<PathBuf>, manifest: &Path) -> PathBuf {
    images.clone().unwrap_or_else(|| {
        manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn json_text<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializes");
    s.push('\n');
    s
}

fn timing(out: &Path, started: Instant) -> Result<()> {
    let secs = started.elapsed().as_secs_f64();
    write(out.join("timing.json"), json_text(&json!({ "wall_clock_secs": secs })))
}

/// Training configuration from a preset plus explicit overrides.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let paradigm: Paradigm = a.paradigm.parse()?;
    let mut c = TrainConfig::preset(&a.preset, paradigm, a.seed)?;
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.temperature {
        c.temperature = v;
    }
    if a.probe_lr.is_some() {
        c.probe_learning_rate = a.probe_lr;
    }
    if a.probe_epochs.is_some() {
        c.probe_epochs = a.probe_epochs;
    }
    if let Some(v) = a.projection_dim {
        c.projection_dim = v;
    }
    if a.projection_hidden.is_some() {
        c.projection_hidden = a.projection_hidden;
    }
    let (resize, crop, rotation) = preset_view(&c.augmentation);
    c.augmentation = AugmentationConfig::new(
        a.resize.unwrap_or(resize),
        a.crop.unwrap_or(crop),
        a.rotation.unwrap_or(rotation),
        a.seed,
    );
    Ok(c)
}

fn preset_view(aug: &AugmentationConfig) -> (u32, u32, f64) {
    let mut crop = aug.resize_to;
    let mut rotation = 0.0;
    for op in &aug.ops {
        match *op {
            dataset::AugmentOp::RandomCrop { size } => crop = size,
            dataset::AugmentOp::RandomRotation { max_degrees } => rotation = max_degrees,
        }
    }
    (aug.resize_to, crop, rotation)
}

pub(crate) fn resolve_train_args(a: &TrainArgs) -> Result<TrainArgs> {
    let c = resolve_train_config(a)?;
    let (resize, crop, rotation) = preset_view(&c.augmentation);
    Ok(TrainArgs {
        epochs: Some(c.epochs),
        lr: Some(c.learning_rate),
        weight_decay: Some(c.weight_decay),
        batch_size: Some(c.batch_size),
        temperature: Some(c.temperature),
        probe_lr: Some(c.probe_lr()),
        probe_epochs: Some(c.probe_epoch_count()),
        projection_dim: Some(c.projection_dim),
        projection_hidden: Some(c.projection_hidden.unwrap_or(a.embed_dim)),
        resize: Some(resize),
        crop: Some(crop),
        rotation: Some(rotation),
        ..a.clone()
    })
}

fn encoder_spec(a: &TrainArgs, crop: u32) -> EncoderSpec {
    let mut spec = EncoderSpec::reference_tiny(crop, a.embed_dim);
    spec.patch_size = a.patch_size;
    spec.depth = a.depth;
    spec.mlp_hidden = 2 * a.embed_dim;
    spec
}

fn unit_interval(name: &str, v: f64, out: &mut Vec<String>) {
    if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
        out.push(format!("{name} must lie in [0, 1], got {v}"));
    }
}

/// Parameter problems that can be found without touching any input file.
pub(crate) fn diagnostics(command: &Command) -> Vec<String> {
    let mut out = Vec::new();
    match command {
        Command::Split(a) => {
            let f = SplitFractions {
                train: a.train,
                val_of_train: a.val_of_train,
                test: a.test,
            };
            if let Err(e) = f.validate() {
                out.push(e.to_string());
            }
        }
        Command::Toydata(a) => {
            if a.classes < 2 {
                out.push(format!("classes must be at least 2, got {}", a.classes));
            }
            if a.per_class == 0 {
                out.push("per_class must be positive".into());
            }
            if a.size < 8 {
                out.push(format!("size must be at least 8, got {}", a.size));
            }
            if let Err(e) = difficulty(&a.difficulty) {
                out.push(e.to_string());
            }
        }
        Command::Train(a) => match resolve_train_config(a) {
            Ok(c) => {
                out.extend(c.diagnostics());
                let crop = preset_view(&c.augmentation).1;
                if let Err(e) = encoder_spec(a, crop).validate() {
                    out.push(e.to_string());
                }
            }
            Err(e) => out.push(e.to_string()),
        },
        Command::Eval(a) => {
            if let Err(e) = level(&a.level) {
                out.push(e.to_string());
            }
            if let Err(e) = a.subset.parse::<Split>() {
                out.push(e.to_string());
            }
            match (&a.predictions, &a.checkpoint) {
                (Some(_), Some(_)) => out.push("give --predictions or --checkpoint, not both".into()),
                (None, None) => out.push("give --predictions or --checkpoint".into()),
                (None, Some(_)) if a.manifest.is_none() || a.split.is_none() => {
                    out.push("--checkpoint needs --manifest and --split".into())
                }
                _ => {}
            }
        }
        Command::Cm(a) => {
            if let Err(e) = level(&a.level) {
                out.push(e.to_string());
            }
        }
        Command::Embed(a) => {
            if let Err(e) = a.subset.parse::<Split>() {
                out.push(e.to_string());
            }
        }
        Command::Gradcam(a) => {
            if let Err(e) = a.subset.parse::<Split>() {
                out.push(e.to_string());
            }
            unit_interval("alpha", a.alpha, &mut out);
            if a.ids.is_empty() && a.limit == 0 {
                out.push("limit must be positive when no ids are given".into());
            }
        }
        Command::ExpertSubset(a) => {
            if !(a.fraction > 0.0 && a.fraction <= 1.0) {
                out.push(format!("fraction must be in (0, 1], got {}", a.fraction));
            }
        }
        Command::ExpertScore(ExpertScoreArgs { annotations, .. }) | Command::Agree(AgreeArgs { annotations, .. }) => {
            if annotations.is_empty() {
                out.push("at least one annotation file is required".into());
            }
        }
        Command::CmDelta(_) | Command::ClusterQuality(_) | Command::Validate(_) => {}
    }
    out
}

pub(crate) fn dispatch(command: &Command, out: &Path) -> Result<()> {
    match command {
        Command::Split(a) => split(a, out),
        Command::Toydata(a) => toydata(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Cm(a) => cm(a, out),
        Command::CmDelta(a) => cm_delta(a, out),
        Command::Embed(a) => embed(a, out),
        Command::ClusterQuality(a) => cluster_quality(a, out),
        Command::Gradcam(a) => gradcam_cmd(a, out),
        Command::ExpertSubset(a) => expert_subset(a, out),
        Command::ExpertScore(a) => expert_score(a, out),
        Command::Agree(a) => agree(a, out),
        Command::Validate(_) => unreachable!("handled before dispatch"),
    }
}

fn split_summary(manifest: &DatasetManifest, split: &SplitAssignment) -> serde_json::Value {
    let mut per_class: BTreeMap<&str, BTreeMap<String, usize>> = BTreeMap::new();
    for r in manifest.records() {
        if let Some(s) = split.get(&r.sample_id) {
            *per_class
                .entry(&r.l3_label)
                .or_default()
                .entry(s.to_string())
                .or_default() += 1;
        }
    }
    json!({
        "train": split.count(Split::Train),
        "val": split.count(Split::Val),
        "test": split.count(Split::Test),
        "per_class": per_class,
    })
}

fn split(a: &SplitArgs, out: &Path) -> Result<()> {
    let tax = taxonomy(&a.taxonomy)?;
    let manifest = DatasetManifest::read(&a.manifest, &tax)?;
    let fractions = SplitFractions {
        train: a.train,
        val_of_train: a.val_of_train,
        test: a.test,
    };
    let assignment = stratified_split(&manifest, fractions, a.min_test_count, a.seed)?;
    assignment.write(out.join("split.csv"))?;
    write(
        out.join("split_summary.json"),
        json_text(&split_summary(&manifest, &assignment)),
    )
}

fn toydata(a: &ToyArgs, out: &Path) -> Result<()> {
    let tax = taxonomy(&a.taxonomy)?;
    let config = ToyConfig {
        n_classes: a.classes,
        n_per_class: a.per_class,
        image_size: a.size,
        difficulty: difficulty(&a.difficulty)?,
        seed: a.seed,
    };
    let toy = generate_toy_dataset(&config, &tax)?;
    toy.write(out)?;
    let classes: Vec<&str> = {
        let mut seen = Vec::new();
        for r in toy.manifest.records() {
            if !seen.contains(&r.l3_label.as_str()) {
                seen.push(r.l3_label.as_str());
            }
        }
        seen
    };
    let info = json!({
        "config": config,
        "classes": classes,
        "designated_pair": toy.designated_pair,
        "n_samples": toy.manifest.len(),
    });
    write(out.join("toy_info.json"), json_text(&info))
}

fn write_stage(out: &Path, prefix: &str, outcome: &TrainOutcome) -> Result<()> {
    let r = &outcome.record;
    write(out.join(format!("{prefix}_log.csv")), r.epoch_log_csv())?;
    write(out.join(format!("{prefix}_record.json")), json_text(r))?;
    let series: Vec<Vec<Option<f64>>> = vec![
        r.epochs.iter().map(|e| Some(e.train_loss)).collect(),
        r.epochs.iter().map(|e| e.val_loss).collect(),
    ];
    plot::curves(&series).save(out.join(format!("{prefix}_loss.png")))?;
    let acc: Vec<Vec<Option<f64>>> = vec![
        r.epochs.iter().map(|e| e.train_top1).collect(),
        r.epochs.iter().map(|e| e.val_top1).collect(),
    ];
    if acc.iter().flatten().any(Option::is_some) {
        plot::curves(&acc).save(out.join(format!("{prefix}_top1.png")))?;
    }
    Ok(())
}

fn train(a: &TrainArgs, out: &Path) -> Result<()> {
    let started = Instant::now();
    let tax = taxonomy(&a.taxonomy)?;
    let manifest = DatasetManifest::read(&a.manifest, &tax)?;
    let split = SplitAssignment::read(&a.split)?;
    let images = DirectoryImages::new(image_root(&a.images, &a.manifest));
    let data = TrainingData {
        manifest: &manifest,
        split: &split,
        images: &images,
        taxonomy: &tax,
    };
    let config = resolve_train_config(a)?;
    let spec = encoder_spec(a, preset_view(&config.augmentation).1);
    match config.paradigm {
        Paradigm::Supervised => {
            let outcome = train_supervised(&config, &data, &spec)?;
            outcome.best.save(&out.join("best.ckpt"))?;
            outcome.last.save(&out.join("final.ckpt"))?;
            write_stage(out, "train", &outcome)?;
        }
        Paradigm::Supcon => {
            let (pre, probe) = train_supcon(&config, &data, &spec)?;
            pre.last.save(&out.join("pretrain.ckpt"))?;
            write_stage(out, "pretrain", &pre)?;
            probe.best.save(&out.join("best.ckpt"))?;
            probe.last.save(&out.join("final.ckpt"))?;
            write_stage(out, "probe", &probe)?;
        }
    }
    timing(out, started)
}

/// The center-view pipeline the checkpoint was trained with.
fn view_of(ck: &Checkpoint) -> Result<AugmentationConfig> {
    let config: TrainConfig =
        serde_json::from_value(ck.metadata.clone()).context("checkpoint metadata carries no training configuration")?;
    Ok(config.augmentation)
}

struct Loaded {
    tax: Taxonomy,
    manifest: DatasetManifest,
    split: SplitAssignment,
    images: DirectoryImages,
}

impl Loaded {
    fn new(tax: &Option<PathBuf>, manifest: &Path, split: &Path, images: &Option<PathBuf>) -> Result<Self> {
        let tax = taxonomy(tax)?;
        Ok(Loaded {
            manifest: DatasetManifest::read(manifest, &tax)?,
            split: SplitAssignment::read(split)?,
            images: DirectoryImages::new(image_root(images, manifest)),
            tax,
        })
    }

    fn data(&self) -> TrainingData<'_> {
        TrainingData {
            manifest: &self.manifest,
            split: &self.split,
            images: &self.images,
            taxonomy: &self.tax,
        }
    }
}

fn eval(a: &EvalArgs, out: &Path) -> Result<()> {
    let tax = taxonomy(&a.taxonomy)?;
    let mut records = match (&a.predictions, &a.checkpoint) {
        (Some(p), None) => metrics::read_predictions(p)?,
        (None, Some(ck_path)) => {
            let manifest = a.manifest.as_ref().ok_or_else(|| anyhow!("--manifest is required"))?;
            let split = a.split.as_ref().ok_or_else(|| anyhow!("--split is required"))?;
            let loaded = Loaded::new(&a.taxonomy, manifest, split, &a.images)?;
            let ck = Checkpoint::load(ck_path)?;
            let preds = predict_split(&ck, &loaded.data(), a.subset.parse()?, &view_of(&ck)?)?;
            metrics::write_predictions(out.join("predictions.csv"), &preds)?;
            preds
        }
        _ => bail!("give exactly one of --predictions and --checkpoint"),
    };
    let order = match level(&a.level)? {
        Level::L3 => tax.l3_order().to_vec(),
        Level::L2 => {
            records = tax.aggregate_to_l2(&records)?;
            tax.l2_order().to_vec()
        }
    };
    let report = metrics::evaluate(&records, &order)?;
    write(out.join("metrics.json"), report.to_json())
}

fn cm(a: &CmArgs, out: &Path) -> Result<()> {
    let tax = taxonomy(&a.taxonomy)?;
    let mut records = metrics::read_predictions(&a.predictions)?;
    let order = match level(&a.level)? {
        Level::L3 => tax.l3_order().to_vec(),
        Level::L2 => {
            records = tax.aggregate_to_l2(&records)?;
            tax.l2_order().to_vec()
        }
    };
    let counts = confusion_matrix(&records, &order, Normalization::None)?;
    let norm = counts.with_normalization(Normalization::PerTrueClass);
    write(out.join("cm_counts.csv"), counts.to_matrix().to_csv())?;
    write(out.join("cm_normalized.csv"), norm.to_matrix().to_csv())?;
    plot::heatmap(&norm.values(), Palette::Sequential).save(out.join("cm_normalized.png"))?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<LabelledMatrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    LabelledMatrix::from_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cm_delta(a: &CmDeltaArgs, out: &Path) -> Result<()> {
    let delta = read_matrix(&a.a)?.minus(&read_matrix(&a.b)?)?;
    write(out.join("cm_delta.csv"), delta.to_csv())?;
    plot::heatmap(&delta.values, Palette::Diverging).save(out.join("cm_delta.png"))?;
    Ok(())
}

fn embed(a: &EmbedArgs, out: &Path) -> Result<()> {
    let loaded = Loaded::new(&a.taxonomy, &a.manifest, &a.split, &a.images)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let outcome = export_embeddings(&ck, &loaded.data(), a.subset.parse()?, &view_of(&ck)?)?;
    outcome.set.write(out.join("embeddings.bin"))?;
    let summary = json!({
        "n": outcome.set.len(),
        "dim": outcome.set.dim(),
        "skipped": outcome.skipped,
        "encoder_id": outcome.set.encoder_id,
        "split_id": outcome.set.split_id,
    });
    write(out.join("embed_summary.json"), json_text(&summary))
}

fn cluster_quality(a: &ClusterArgs, out: &Path) -> Result<()> {
    let tax = taxonomy(&a.taxonomy)?;
    let set = EmbeddingSet::read(&a.embeddings)?;
    set.check_labels(&tax)?;
    grouped_quality(&set, &tax).write(out.join("cluster_quality.json"))?;
    Ok(())
}

fn gradcam_cmd(a: &GradcamArgs, out: &Path) -> Result<()> {
    let tax = taxonomy(&a.taxonomy)?;
    let manifest = DatasetManifest::read(&a.manifest, &tax)?;
    let images = DirectoryImages::new(image_root(&a.images, &a.manifest));
    let ck = Checkpoint::load(&a.checkpoint)?;
    let head = ck.require_head()?;
    let view = view_of(&ck)?;
    let records: Vec<_> = if a.ids.is_empty() {
        let split = a.split.as_ref().map(SplitAssignment::read).transpose()?;
        let subset: Split = a.subset.parse()?;
        manifest
            .records()
            .iter()
            .filter(|r| split.as_ref().is_none_or(|s| s.get(&r.sample_id) == Some(subset)))
            .take(a.limit)
            .collect()
    } else {
        a.ids
            .iter()
            .map(|id| {
                manifest
                    .get(id)
                    .ok_or_else(|| anyhow!("sample `{id}` is not in the manifest"))
            })
            .collect::<Result<_>>()?
    };
    if records.is_empty() {
        bail!("no records selected for GradCAM");
    }
    fs::create_dir_all(out.join("grids"))?;
    let mut items = Vec::new();
    let mut index = String::from("index,sample_id,true_class,target_class,layer\n");
    for (i, r) in records.iter().enumerate() {
        let image = center_view(&images.load(r)?, &view)?;
        let target = match a.target.as_str() {
            "predicted" => {
                let emb = habclass_core::model::ImageEncoder::encode(&ck.encoder, &image)?;
                let scores = head.classify(&emb)?;
                let best =
                    scores
                        .probabilities
                        .iter()
                        .enumerate()
                        .fold(0, |b, (j, v)| if *v > scores.probabilities[b] { j } else { b });
                head.class_order()[best].clone()
            }
            "truth" => r.l3_label.clone(),
            code => code.to_string(),
        };
        let map = gradcam(&ck, &image, &target, a.layer.as_deref())?;
        write(out.join("grids").join(format!("{i:03}.csv")), map.grid_csv())?;
        index.push_str(&format!(
            "{i},{},{},{target},{}\n",
            r.sample_id, r.l3_label, map.layer_tag
        ));
        items.push((r.sample_id.clone(), map, image));
    }
    write_overlays(&items, out.join("overlays"), a.alpha)?;
    write(out.join("gradcam_index.csv"), index)
}

fn expert_subset(a: &ExpertSubsetArgs, out: &Path) -> Result<()> {
    let tax = taxonomy(&a.taxonomy)?;
    let manifest = DatasetManifest::read(&a.manifest, &tax)?;
    let split = SplitAssignment::read(&a.split)?;
    let subset = expert::draw_expert_subset(&manifest, &split, a.fraction, a.seed, &tax)?;
    subset.write(out.join("subset.csv"))?;
    let n_test = split.count(Split::Test);
    let summary = json!({
        "fraction": a.fraction,
        "test_records": n_test,
        "target": (a.fraction * n_test as f64).round() as usize,
        "realized": subset.len(),
        "per_class": dataset::class_distribution(&subset, Level::L3, &tax)?,
    });
    write(out.join("subset_summary.json"), json_text(&summary))
}

fn participants(
    annotations: &[PathBuf],
    predictions: &Option<PathBuf>,
    model_id: &str,
    keep: Option<&HashSet<String>>,
) -> Result<Vec<AnnotationSet>> {
    let mut sets = annotations
        .iter()
        .map(|p| AnnotationSet::read(p).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = predictions {
        let keep = keep
            .cloned()
            .unwrap_or_else(|| sets[0].records.keys().cloned().collect());
        let preds: Vec<PredictionRecord> = metrics::read_predictions(p)?
            .into_iter()
            .filter(|r| keep.contains(&r.sample_id))
            .collect();
        sets.push(AnnotationSet::from_predictions(model_id, &preds)?);
    }
    let mut seen = HashSet::new();
    for s in &sets {
        if !seen.insert(s.annotator_id.clone()) {
            bail!("participant id `{}` appears twice", s.annotator_id);
        }
    }
    Ok(sets)
}

fn write_agreement(sets: &[AnnotationSet], out: &Path) -> Result<()> {
    let agreement = agreement_matrix(sets)?;
    write(out.join("agreement.csv"), agreement.to_csv())?;
    plot::heatmap(&agreement.values, Palette::Diverging).save(out.join("agreement.png"))?;
    Ok(())
}

fn expert_score(a: &ExpertScoreArgs, out: &Path) -> Result<()> {
    let tax = taxonomy(&a.taxonomy)?;
    let truth = DatasetManifest::read(&a.subset, &tax)?;
    let ids: HashSet<String> = truth.records().iter().map(|r| r.sample_id.clone()).collect();
    let sets = participants(&a.annotations, &a.predictions, &a.model_id, Some(&ids))?;
    let mut scores = BTreeMap::new();
    for set in &sets {
        let report = expert::score_participant(set, &truth, &tax)?;
        let cm = expert::per_participant_cm(set, &truth, &tax)?;
        let stem = set
            .annotator_id
            .replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_");
        write(out.join(format!("cm_{stem}.csv")), cm.to_matrix().to_csv())?;
        plot::heatmap(&cm.values(), Palette::Sequential).save(out.join(format!("cm_{stem}.png")))?;
        scores.insert(set.annotator_id.clone(), report);
    }
    write(out.join("scores.json"), json_text(&scores))?;
    write_agreement(&sets, out)
}

fn agree(a: &AgreeArgs, out: &Path) -> Result<()> {
    let keep = match &a.subset {
        Some(path) => {
            let tax = taxonomy(&a.taxonomy)?;
            let m = DatasetManifest::read(path, &tax)?;
            Some(m.records().iter().map(|r| r.sample_id.clone()).collect::<HashSet<_>>())
        }
        None => None,
    };
    let sets = participants(&a.annotations, &a.predictions, &a.model_id, keep.as_ref())?;
    write_agreement(&sets, out)
}
