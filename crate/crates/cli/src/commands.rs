use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cxr_core::backbone::BackboneKind;
use cxr_core::classifier::{
    evaluate, history_table, train_classifier, Classifier, ClassifierCheckpoint, DiskSource, MaskCache, MaskMode,
    PredictionRecord, Predictor, TrainOptions,
};
use cxr_core::core_ops::{Disease, NUM_CLASSES};
use cxr_core::data_pipeline::{
    load_image, load_manifest, load_seg_dataset, make_val_split, preprocess, to_frame, DatasetManifest, FrameBox,
    ImageTensor, ManifestEntry, PreprocessConfig, Split,
};
use cxr_core::evaluation::{
    cam, evaluate_localization, localization_table, oracle_feature, overlay, roc_curve, roc_plot,
    roc_table, save_png, LocalizationRow,
};
use cxr_core::fixtures::{cls_fixture, write_cls_fixture, write_seg_fixture};
use cxr_core::segmentation::{curve_table, train_segmenter, SegCheckpoint, Segmenter};
use cxr_core::{Error, Result};
use cxr_tensor::io::atomic_write;
use cxr_tensor::{ParamStore, Tensor};

use crate::config::{CamSource, RunConfig};
use crate::{Cli, Command};

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

/// Config file, then flag overrides, then validation.
fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.deterministic |= cli.deterministic;
    cfg.resolve()
}

/// Output directory plus the provenance copy of the config for `command`.
fn prepare_out(cfg: &RunConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_text(&cfg.out.join(format!("{command}.config.toml")), &cfg.to_toml())
}

fn provenance(cfg: &RunConfig, command: &str) -> Vec<(&'static str, String)> {
    vec![("command", command.to_string()), ("run_config", cfg.to_toml())]
}

fn or_default(p: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| cfg.out.join(name))
}

fn mask_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data.mask_cache.clone().unwrap_or_else(|| cfg.out.join("masks"))
}

/// Loads a segmenter if the explicit path is given or the default one exists.
fn optional_segmenter(explicit: &Option<PathBuf>, cfg: &RunConfig) -> Result<Option<Segmenter>> {
    let path = or_default(explicit, cfg, "segmenter.safetensors");
    if explicit.is_none() && !path.exists() {
        return Ok(None);
    }
    let ckpt = SegCheckpoint::load(&path)?;
    if ckpt.input_size != cfg.preprocess.crop {
        return Err(Error::Config(format!(
            "segmenter was trained on {0}×{0} images, preprocessing produces {1}×{1}",
            ckpt.input_size, cfg.preprocess.crop
        )));
    }
    Ok(Some(Segmenter::new(&ckpt)))
}

fn load_classifier(path: &Path, cfg: &RunConfig) -> Result<ClassifierCheckpoint> {
    let ckpt = ClassifierCheckpoint::load(path)?;
    if ckpt.config.image_size != cfg.preprocess.crop {
        return Err(Error::Config(format!(
            "{} expects {} pixel images, preprocessing produces {}",
            path.display(),
            ckpt.config.image_size,
            cfg.preprocess.crop
        )));
    }
    Ok(ckpt)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cfg.deterministic {
        log::info!("deterministic mode: seed {}, single-threaded kernels, fixed data order", cfg.seed);
    }
    match &cli.command {
        Command::Fixtures { dir, samples, size } => fixtures(dir, *samples, *size, cfg.seed),
        Command::SegmentTrain => segment_train(&cfg),
        Command::SegmentRun { checkpoint, images } => segment_run(&cfg, checkpoint, images),
        Command::Train { resume, seg_checkpoint, stop_after, all_ones_mask } => {
            let mode = match (cli.no_mask, *all_ones_mask) {
                (true, true) => return Err(Error::Config("--no-mask and --all-ones-mask exclude each other".into())),
                (true, false) => MaskMode::Off,
                (false, true) => MaskMode::AllOnes,
                (false, false) => MaskMode::Anatomical,
            };
            train(&cfg, mode, *resume, seg_checkpoint, *stop_after)
        }
        Command::Eval { checkpoint, seg_checkpoint } => eval(&cfg, checkpoint, seg_checkpoint),
        Command::Localize { checkpoint, ablation, oracle, seg_checkpoint } => {
            localize(&cfg, checkpoint, ablation, *oracle, seg_checkpoint)
        }
        Command::Infer { checkpoint, seg_checkpoint, list, output, images } => {
            infer(&cfg, checkpoint, seg_checkpoint, list, output, images)
        }
    }
}

fn fixtures(dir: &Path, samples: usize, size: usize, seed: u64) -> Result<()> {
    if samples == 0 || size == 0 || size % 16 != 0 {
        return Err(Error::Config("fixtures need at least one sample and a size that is a multiple of 16".into()));
    }
    write_seg_fixture(&dir.join("seg"), samples, size, seed)?;
    write_cls_fixture(&dir.join("cls"), &cls_fixture(samples, size, seed.wrapping_add(1)))?;
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    let d = &mut cfg.data;
    d.labels = Some("cls/labels.csv".into());
    d.train_list = Some("cls/train_list.txt".into());
    d.test_list = Some("cls/test_list.txt".into());
    d.boxes = Some("cls/boxes.csv".into());
    d.images = Some("cls/images".into());
    d.seg_data = Some("seg".into());
    d.mask_cache = Some("cls/masks".into());
    d.val_fraction = 0.0;
    cfg.preprocess = PreprocessConfig { resize: size, crop: size, ..PreprocessConfig::default() };
    let s = &mut cfg.segmentation;
    (s.base_width, s.epochs, s.batch_size, s.val_fraction) = (8, 60, 4, 0.0);
    let c = &mut cfg.classifier;
    (c.backbone, c.image_size, c.batch_size, c.epochs) = (BackboneKind::Tiny, size, 8, 40);
    write_text(&dir.join("fixture.toml"), &cfg.to_toml())?;
    log::info!("wrote {samples} segmentation and {samples} classification images under {}", dir.display());
    Ok(())
}

fn segment_train(cfg: &RunConfig) -> Result<()> {
    let root = cfg.data.seg_data.as_ref().ok_or_else(|| Error::Config("data.seg_data is not set".into()))?;
    prepare_out(cfg, "segment-train")?;
    let samples = load_seg_dataset(root, &cfg.preprocess)?;
    log::info!("training the segmenter on {} images", samples.len());
    let trained = train_segmenter(&samples, &cfg.segmentation)?;
    let ckpt = &trained.checkpoint;
    write_text(&cfg.out.join("segmentation_curve.tsv"), &curve_table(&ckpt.curve))?;
    ckpt.save(&cfg.out.join("segmenter.safetensors"), &provenance(cfg, "segment-train"))?;
    log::info!(
        "best epoch {} dice left/right/heart {:.4}/{:.4}/{:.4}",
        ckpt.best_epoch,
        ckpt.best_dice[0],
        ckpt.best_dice[1],
        ckpt.best_dice[2]
    );
    Ok(())
}

fn segment_run(cfg: &RunConfig, checkpoint: &Option<PathBuf>, images: &[PathBuf]) -> Result<()> {
    let path = or_default(checkpoint, cfg, "segmenter.safetensors");
    let seg = optional_segmenter(&Some(path), cfg)?.expect("explicit path always loads");
    prepare_out(cfg, "segment-run")?;
    let targets: Vec<(String, PathBuf)> = if images.is_empty() {
        let manifest = load_manifest(&cfg.data.sources(), cfg.strict_counts)?;
        manifest.entries.iter().map(|e| (e.image_id.clone(), manifest.image_path(&e.image_id))).collect()
    } else {
        images
            .iter()
            .map(|p| (p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(), p.clone()))
            .collect()
    };
    let dir = mask_dir(cfg);
    let cache = MaskCache::new(&dir, None);
    let mut summary = String::from("image_id\tmask_pixels\tfallback\n");
    for (id, path) in &targets {
        let image = preprocess(&load_image(path)?, &cfg.preprocess)?;
        let g = seg.generate_mask(&image)?;
        if g.fallback {
            log::warn!("{id}: segmentation found no anatomy, using the all-ones mask");
        }
        cxr_core::data_pipeline::save_mask(&g.mask, &cache.path(id))?;
        let _ = writeln!(summary, "{id}\t{}\t{}", g.mask.count(), g.fallback);
    }
    write_text(&cfg.out.join("masks.tsv"), &summary)?;
    log::info!("wrote {} masks to {}", targets.len(), dir.display());
    Ok(())
}

fn splits(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    if cfg.data.val_fraction == 0.0 {
        let train: Vec<ManifestEntry> = manifest.split(Split::Train).cloned().collect();
        return Ok((train.clone(), train));
    }
    make_val_split(manifest, cfg.data.val_fraction, cfg.seed)
}

fn train(
    cfg: &RunConfig,
    mode: MaskMode,
    resume: bool,
    seg_checkpoint: &Option<PathBuf>,
    stop_after: Option<usize>,
) -> Result<()> {
    prepare_out(cfg, "train")?;
    let manifest = load_manifest(&cfg.data.sources(), cfg.strict_counts)?;
    let (train_entries, val_entries) = splits(cfg, &manifest)?;
    log::info!("{} training and {} validation images, mask mode {mode:?}", train_entries.len(), val_entries.len());
    let cache = match mode {
        MaskMode::Anatomical => Some(MaskCache::new(mask_dir(cfg), optional_segmenter(seg_checkpoint, cfg)?)),
        _ => None,
    };
    let train_src = DiskSource::new(&manifest, train_entries, cfg.preprocess.clone(), cache.as_ref());
    let val_src = DiskSource::new(&manifest, val_entries, cfg.preprocess.clone(), cache.as_ref());
    let opts = TrainOptions {
        mask_mode: mode,
        state_path: Some(cfg.out.join("train_state.safetensors")),
        resume,
        stop_after,
    };
    let outcome = train_classifier(&cfg.classifier, &cfg.attention, &train_src, &val_src, &opts)?;
    let ckpt = &outcome.checkpoint;
    write_text(&cfg.out.join("history.tsv"), &history_table(&ckpt.history))?;
    if !outcome.completed {
        log::info!("stopped after {} epochs; continue with --resume", ckpt.history.len());
        return Ok(());
    }
    ckpt.save(&cfg.out.join("classifier.safetensors"), &provenance(cfg, "train"))?;
    log::info!(
        "best epoch {} validation mean AUROC {}",
        ckpt.best_epoch,
        ckpt.best_auroc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "NA".into())
    );
    Ok(())
}

fn file_name(d: Disease) -> String {
    d.name().replace(' ', "_")
}

fn eval(cfg: &RunConfig, checkpoint: &Option<PathBuf>, seg_checkpoint: &Option<PathBuf>) -> Result<()> {
    let ckpt = load_classifier(&or_default(checkpoint, cfg, "classifier.safetensors"), cfg)?;
    let manifest = load_manifest(&cfg.data.sources(), cfg.strict_counts)?;
    let test: Vec<ManifestEntry> = manifest.split(Split::Test).cloned().collect();
    if test.is_empty() {
        return Err(Error::Config("no test list configured".into()));
    }
    let dir = cfg.out.join("eval");
    prepare_out(cfg, "eval")?;
    let cache = match ckpt.mask_mode {
        MaskMode::Anatomical => Some(MaskCache::new(mask_dir(cfg), optional_segmenter(seg_checkpoint, cfg)?)),
        _ => None,
    };
    let source = DiskSource::new(&manifest, test.clone(), cfg.preprocess.clone(), cache.as_ref());
    let mut scratch = ParamStore::new();
    let model = Classifier::new(&mut scratch, &ckpt.config, &ckpt.attention)?;
    let (_, scores, report) = evaluate(&model, &ckpt.store, &source, ckpt.mask_mode, ckpt.config.batch_size)?;
    write_text(&dir.join("auroc.tsv"), &report.to_tsv())?;

    let mut table = String::from("image_id");
    for d in Disease::ALL {
        let _ = write!(table, "\t{}", d.name());
    }
    table.push('\n');
    for (e, row) in test.iter().zip(&scores) {
        table.push_str(&e.image_id);
        for p in row {
            let _ = write!(table, "\t{p:.6}");
        }
        table.push('\n');
    }
    write_text(&dir.join("scores.tsv"), &table)?;

    let mut curves = Vec::new();
    for d in Disease::ALL {
        let k = d.index();
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<bool> = test.iter().map(|e| e.labels.as_bools()[k]).collect();
        match roc_curve(&s, &l) {
            Some(curve) => {
                write_text(&dir.join("roc").join(format!("{}.tsv", file_name(d))), &roc_table(&curve))?;
                curves.push((k, curve));
            }
            None => log::warn!("{}: AUROC undefined, test labels are all one value", d.name()),
        }
    }
    save_png(&roc_plot(&curves, 512), &dir.join("roc.png"))?;
    let mean = report.mean().map(|m| format!("{m:.4}")).unwrap_or_else(|| "NA".into());
    log::info!("mean AUROC {mean} over {} classes", NUM_CLASSES - report.undefined());
    Ok(())
}

/// A preprocessed box-set image plus its original size.
struct BoxImage {
    tensor: ImageTensor,
    width: u32,
    height: u32,
}

/// One classifier's heatmap source, with per-image feature caching.
struct CamModel {
    label: String,
    predictor: Predictor,
    head: cxr_tensor::Tensor<f32>,
}

fn cam_model(label: &str, path: &Path, cfg: &RunConfig) -> Result<CamModel> {
    let ckpt = load_classifier(path, cfg)?;
    let predictor = Predictor::new(&ckpt)?;
    let head = predictor.head_weights();
    Ok(CamModel { label: label.to_string(), predictor, head })
}

fn localize(
    cfg: &RunConfig,
    checkpoint: &Option<PathBuf>,
    ablation: &Option<PathBuf>,
    oracle: bool,
    seg_checkpoint: &Option<PathBuf>,
) -> Result<()> {
    let manifest = load_manifest(&cfg.data.sources(), cfg.strict_counts)?;
    if manifest.boxes.is_empty() {
        return Err(Error::Config("no box annotations configured (data.boxes)".into()));
    }
    let dir = cfg.out.join("localize");
    prepare_out(cfg, "localize")?;
    let frame = cfg.preprocess.crop;

    let mut images: HashMap<String, Option<BoxImage>> = HashMap::new();
    for ann in &manifest.boxes {
        if images.contains_key(&ann.image_id) {
            continue;
        }
        let loaded = match load_image(&manifest.image_path(&ann.image_id)) {
            Ok(img) => Some(BoxImage {
                width: img.width(),
                height: img.height(),
                tensor: preprocess(&img, &cfg.preprocess)?,
            }),
            Err(e) => {
                log::warn!("{e}");
                None
            }
        };
        images.insert(ann.image_id.clone(), loaded);
    }
    let gts: Vec<FrameBox> = manifest
        .boxes
        .iter()
        .map(|ann| match &images[&ann.image_id] {
            Some(b) => to_frame(ann, b.width, b.height, &cfg.preprocess),
            None => FrameBox { image_id: ann.image_id.clone(), disease: ann.disease, rect: ann.rect, clipped: false },
        })
        .collect();

    let mut models = Vec::new();
    let main = or_default(checkpoint, cfg, "classifier.safetensors");
    if checkpoint.is_some() || main.exists() || !oracle {
        models.push(cam_model("model", &main, cfg)?);
    }
    if let Some(p) = ablation {
        models.push(cam_model("ablation", p, cfg)?);
    }
    let needs_masks = models.iter().any(|m| m.predictor.mask_mode() == MaskMode::Anatomical);
    let cache = if needs_masks {
        Some(MaskCache::new(mask_dir(cfg), optional_segmenter(seg_checkpoint, cfg)?))
    } else {
        None
    };

    let mut rows: Vec<LocalizationRow> = Vec::new();
    for m in &models {
        let mut features = HashMap::new();
        let row = evaluate_localization(&m.label, &gts, frame, cfg.evaluation.threshold_fraction, |gt| {
            let Some(img) = &images[&gt.image_id] else { return Ok(None) };
            if !features.contains_key(&gt.image_id) {
                let mask = match (m.predictor.mask_mode(), &cache) {
                    (MaskMode::Anatomical, Some(c)) => Some(c.get(&gt.image_id, &img.tensor)?.0),
                    _ => None,
                };
                let mut out = m.predictor.inspect(&[&img.tensor], &[mask.as_ref()])?;
                let ins = out.remove(0);
                let feature = match cfg.evaluation.cam_source {
                    CamSource::Local => ins.local,
                    CamSource::Global => ins.global,
                };
                features.insert(gt.image_id.clone(), feature);
            }
            Ok(Some(cam(&features[&gt.image_id], &m.head, gt.disease.index())?))
        })?;
        rows.push(row);
    }
    if oracle {
        let row = evaluate_localization("oracle", &gts, frame, cfg.evaluation.threshold_fraction, |gt| {
            if images[&gt.image_id].is_none() {
                return Ok(None);
            }
            // a single-channel map read through a unit head weight
            Ok(Some(cam(&oracle_feature(&gt.rect, frame), &Tensor::new(&[1, 1], vec![1.0]), 0)?))
        })?;
        rows.push(row);
    }

    write_text(&dir.join("iou.tsv"), &localization_table(&rows))?;
    let mut detail = String::from("model\timage_id\tdisease\tclipped\tgt_x\tgt_y\tgt_w\tgt_h\tbox_x\tbox_y\tbox_w\tbox_h\tiou\n");
    for r in &rows {
        for it in &r.items {
            let (g, p) = (&it.gt.rect, &it.predicted.rect);
            let _ = writeln!(
                detail,
                "{}\t{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}\t{}\t{}\t{}\t{:.4}",
                r.label,
                it.gt.image_id,
                it.gt.disease.name(),
                it.gt.clipped,
                g.x,
                g.y,
                g.w,
                g.h,
                p.x,
                p.y,
                p.w,
                p.h,
                it.iou
            );
            if let Some(img) = &images[&it.gt.image_id] {
                let stem = Path::new(&it.gt.image_id).with_extension("");
                let name = format!("{}_{}.png", stem.display(), file_name(it.gt.disease));
                save_png(&overlay(&img.tensor, &cfg.preprocess, g, p), &dir.join("overlays").join(&r.label).join(name))?;
            }
        }
    }
    write_text(&dir.join("boxes.tsv"), &detail)?;
    for r in &rows {
        let mean = r.mean().map(|m| format!("{m:.4}")).unwrap_or_else(|| "NA".into());
        log::info!("{}: mean IoU {mean} over {} boxes", r.label, r.items.len());
    }
    Ok(())
}

fn read_list(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        })
        .collect())
}

fn infer(
    cfg: &RunConfig,
    checkpoint: &Option<PathBuf>,
    seg_checkpoint: &Option<PathBuf>,
    list: &Option<PathBuf>,
    output: &Option<PathBuf>,
    images: &[PathBuf],
) -> Result<()> {
    let mut paths = images.to_vec();
    if let Some(l) = list {
        paths.extend(read_list(l)?);
    }
    if paths.is_empty() {
        return Err(Error::Config("no images given".into()));
    }
    let ckpt = load_classifier(&or_default(checkpoint, cfg, "classifier.safetensors"), cfg)?;
    let predictor = Predictor::new(&ckpt)?;
    let seg = match ckpt.mask_mode {
        MaskMode::Anatomical => Some(
            optional_segmenter(seg_checkpoint, cfg)?
                .ok_or_else(|| Error::Config("this classifier needs a segmentation checkpoint".into()))?,
        ),
        _ => None,
    };
    let mut text = PredictionRecord::header();
    text.push('\n');
    let mut ok = 0;
    for p in &paths {
        match predictor.predict_path(p, &cfg.preprocess, seg.as_ref()) {
            Ok(rec) => {
                ok += 1;
                text.push_str(&rec.to_tsv());
            }
            Err(e) => {
                log::warn!("{}: {e}", p.display());
                let msg = e.to_string().replace(['\t', '\n'], " ");
                let _ = write!(text, "{}\terror\t{msg}", p.display());
            }
        }
        text.push('\n');
    }
    match output {
        Some(o) => write_text(o, &text)?,
        None => print!("{text}"),
    }
    log::info!("{ok} of {} images classified", paths.len());
    if ok == 0 {
        return Err(Error::data(&paths[0], "no image could be classified"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_paths_are_relative_to_the_list() {
        let dir = tempfile::tempdir().unwrap();
        let list = dir.path().join("l.txt");
        std::fs::write(&list, "a.png\n\n# note\n/abs/b.png\n").unwrap();
        assert_eq!(read_list(&list).unwrap(), vec![dir.path().join("a.png"), PathBuf::from("/abs/b.png")]);
    }

    #[test]
    fn disease_file_names_have_no_spaces() {
        assert_eq!(file_name(Disease::PleuralThickening), "Pleural_Thickening");
    }
}
