//! The pipeline stages and the on-disk layout of their artifacts.
//!
//! Under the output directory a full run writes:
//!
//! ```text
//! manifest.json, activations/<id>.dffa     extract
//! factorization.dffn                        factorize
//! maps.json, maps/<id>.dffa                 refine (upsampled, refined maps)
//! factor_maps/<id>_f<j>.png, overlays/<id>.png
//! masks/index.json, masks/f<j>/<id>.png     segment
//! boxes/f<j>.json                           largest component per mask
//! metrics.csv, corloc.csv, summary.json     evaluation
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dff_core::adapter::{
    decode_activations, load_rgb, save_activations, ActivationExtractor, BatchManifest, ManifestEntry,
};
use dff_core::formats::{
    load_boxes, load_factor_part_map, load_factorization, read_mask_png, save_factorization, save_json,
    write_mask_png, PartIndex,
};
use dff_core::heatmap::{columns_to_heatmaps, default_palette, grayscale_factor_maps, render_overlay};
use dff_core::nmf::nmf_factorize;
use dff_core::refine::{luma, meanfield_refine};
use dff_core::segmentation::{binarize_factor, largest_component_bbox, SegmentationError};
use dff_core::tensor::{concat_batch, ImageFeatures};
use dff_core::{
    ActivationTensor, BBox, BatchLayout, BinaryMaskSet, Factorization, HeatMapStack, NmfConfig, RefineConfig,
};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, Stage, StageContext};
use crate::eval::{average_best_iou, corloc_over_images, corloc_csv, part_rows, part_rows_csv, PartRow};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FACTORIZATION_FILE: &str = "factorization.dffn";
pub const MAPS_FILE: &str = "maps.json";
pub const MASK_INDEX_FILE: &str = "masks/index.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CORLOC_FILE: &str = "corloc.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn create_dir(stage: Stage, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(stage, format!("{}: {e}", dir.display())))
}

fn write_text(stage: Stage, path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data(stage, format!("{}: {e}", path.display())))
}

/// Runs the model over the configured images, writing one DFFA file per
/// image and a manifest listing them.
pub fn extract_stage(cfg: &PipelineConfig, layer: Option<&str>, out: &Path) -> Result<BatchManifest, CliError> {
    let spec = cfg.model_spec(Stage::Extract, layer)?;
    let images = cfg.image_list(Stage::Extract)?;
    let extractor = ActivationExtractor::load(spec.clone()).stage(Stage::Extract)?;
    let act_dir = out.join("activations");
    create_dir(Stage::Extract, &act_dir)?;
    let mut entries = Vec::with_capacity(images.len());
    for (id, path) in images {
        let image = load_rgb(&path).stage(Stage::Extract)?;
        let t = extractor.extract(&id, &image).stage(Stage::Extract)?;
        let act = act_dir.join(format!("{id}.dffa"));
        save_activations(&t, &act).stage(Stage::Extract)?;
        log::info!("extracted {id}: {}x{}x{}", t.height(), t.width(), t.channels());
        entries.push(ManifestEntry {
            id,
            image_path: path,
            activation_path: act,
        });
    }
    let manifest = BatchManifest {
        images: entries,
        layer: spec.layer_name,
        model: spec.model_path.display().to_string(),
    };
    manifest.save(&out.join(MANIFEST_FILE)).stage(Stage::Extract)?;
    Ok(manifest)
}

/// Runs the model over images already in memory; used by sweeps.
pub fn extract_in_memory(
    extractor: &ActivationExtractor,
    images: &[(String, RgbImage)],
) -> Result<Vec<ActivationTensor>, CliError> {
    images
        .iter()
        .map(|(id, img)| extractor.extract(id, img).stage(Stage::Extract))
        .collect()
}

/// Reads every activation file a manifest lists, keeping the manifest ids.
pub fn load_activation_set(manifest: &BatchManifest, stage: Stage) -> Result<Vec<ActivationTensor>, CliError> {
    manifest
        .images
        .iter()
        .map(|e| {
            let bytes = fs::read(&e.activation_path)
                .map_err(|err| CliError::data(stage, format!("{}: {err}", e.activation_path.display())))?;
            decode_activations(&e.id, &bytes).stage(stage)
        })
        .collect()
}

pub fn load_images(manifest: &BatchManifest, stage: Stage) -> Result<Vec<RgbImage>, CliError> {
    manifest
        .images
        .iter()
        .map(|e| load_rgb(&e.image_path).stage(stage))
        .collect()
}

pub fn factorize_tensors(
    tensors: &[ActivationTensor],
    nmf: &NmfConfig,
) -> Result<(Factorization, BatchLayout), CliError> {
    let items: Vec<ImageFeatures> = tensors.iter().map(ImageFeatures::from_tensor).collect();
    let (a, layout) = concat_batch(&items).stage(Stage::Factorize)?;
    let f = nmf_factorize(&a, nmf).stage(Stage::Factorize)?;
    log::info!(
        "factorized {}x{} at k={} in {} iterations, loss {:.6e}",
        a.rows(),
        a.cols(),
        nmf.k,
        f.iterations_run,
        f.final_loss()
    );
    Ok((f, layout))
}

pub fn factorize_stage(
    manifest: &BatchManifest,
    nmf: &NmfConfig,
    out: &Path,
) -> Result<(Factorization, BatchLayout), CliError> {
    let tensors = load_activation_set(manifest, Stage::Factorize)?;
    let (f, layout) = factorize_tensors(&tensors, nmf)?;
    create_dir(Stage::Factorize, out)?;
    save_factorization(&f, &layout, &out.join(FACTORIZATION_FILE)).stage(Stage::Factorize)?;
    Ok((f, layout))
}

/// Reshapes `H` into per-image maps, upsamples each to its image's size and,
/// when `refine` is given, sharpens them with the guided mean-field pass.
pub fn factor_maps(
    f: &Factorization,
    layout: &BatchLayout,
    images: &[RgbImage],
    refine: Option<&RefineConfig>,
) -> Result<Vec<HeatMapStack>, CliError> {
    let stacks = columns_to_heatmaps(f, layout).stage(Stage::Refine)?;
    if stacks.len() != images.len() {
        return Err(CliError::data(
            Stage::Refine,
            format!("{} heat-map stacks for {} images", stacks.len(), images.len()),
        ));
    }
    let upsampled: Vec<HeatMapStack> = stacks
        .iter()
        .zip(images)
        .map(|(s, img)| s.upsample(img.height() as usize, img.width() as usize))
        .collect();
    match refine {
        Some(cfg) => {
            let guides: Vec<_> = images.iter().map(luma).collect();
            meanfield_refine(&upsampled, &guides, cfg).stage(Stage::Refine)
        }
        None => Ok(upsampled),
    }
}

/// Checks that a factorization's layout names the manifest's images in order.
pub fn check_layout(layout: &BatchLayout, manifest: &BatchManifest, stage: Stage) -> Result<(), CliError> {
    let ids: Vec<&str> = layout.entries().iter().map(|e| e.image_id.as_str()).collect();
    let expected: Vec<&str> = manifest.images.iter().map(|e| e.id.as_str()).collect();
    if ids != expected {
        return Err(CliError::data(
            stage,
            format!("factorization covers images {ids:?}, manifest lists {expected:?}"),
        ));
    }
    Ok(())
}

pub fn refine_stage(
    manifest: &BatchManifest,
    factorization: &Path,
    refine: Option<&RefineConfig>,
    out: &Path,
) -> Result<Vec<HeatMapStack>, CliError> {
    let (f, layout) = load_factorization(factorization).stage(Stage::Refine)?;
    check_layout(&layout, manifest, Stage::Refine)?;
    let images = load_images(manifest, Stage::Refine)?;
    let stacks = factor_maps(&f, &layout, &images, refine)?;
    save_maps(&stacks, manifest, out)?;
    Ok(stacks)
}

/// Writes final maps as DFFA files (h x w x k) with a manifest pointing back
/// at the source images.
pub fn save_maps(stacks: &[HeatMapStack], source: &BatchManifest, out: &Path) -> Result<BatchManifest, CliError> {
    let dir = out.join("maps");
    create_dir(Stage::Refine, &dir)?;
    let mut entries = Vec::with_capacity(stacks.len());
    for (s, e) in stacks.iter().zip(&source.images) {
        let path = dir.join(format!("{}.dffa", e.id));
        save_activations(&s.to_tensor(), &path).stage(Stage::Refine)?;
        entries.push(ManifestEntry {
            id: e.id.clone(),
            image_path: e.image_path.clone(),
            activation_path: path,
        });
    }
    let manifest = BatchManifest {
        images: entries,
        layer: source.layer.clone(),
        model: source.model.clone(),
    };
    manifest.save(&out.join(MAPS_FILE)).stage(Stage::Refine)?;
    Ok(manifest)
}

pub fn load_maps(path: &Path, stage: Stage) -> Result<(BatchManifest, Vec<HeatMapStack>), CliError> {
    let manifest = BatchManifest::load(path).stage(stage)?;
    let stacks = load_activation_set(&manifest, stage)?
        .iter()
        .map(|t| HeatMapStack::from_tensor(t).stage(stage))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, stacks))
}

pub fn render_stage(
    stacks: &[HeatMapStack],
    images: &[RgbImage],
    out: &Path,
) -> Result<(), CliError> {
    let gray_dir = out.join("factor_maps");
    let overlay_dir = out.join("overlays");
    create_dir(Stage::Render, &gray_dir)?;
    create_dir(Stage::Render, &overlay_dir)?;
    let palette = default_palette(stacks.first().map_or(0, HeatMapStack::k));
    for (s, gray) in stacks.iter().zip(grayscale_factor_maps(stacks)) {
        for (j, g) in gray.iter().enumerate() {
            g.save(gray_dir.join(format!("{}_f{j}.png", s.image_id))).stage(Stage::Render)?;
        }
    }
    for (s, img) in stacks.iter().zip(images) {
        render_overlay(img, s, &palette)
            .stage(Stage::Render)?
            .save(overlay_dir.join(format!("{}.png", s.image_id)))
            .stage(Stage::Render)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskImage {
    pub id: String,
    pub height: usize,
    pub width: usize,
}

/// Lists what `masks/` holds: `f<j>/<id>.png` for every factor and image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskIndex {
    pub k: usize,
    pub percentile: f64,
    pub images: Vec<MaskImage>,
}

impl MaskIndex {
    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|m| m.id.clone()).collect()
    }

    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        self.images.iter().map(|m| (m.id.clone(), m.height, m.width)).collect()
    }
}

/// Binarizes every factor over the set; the threshold is shared by all
/// images of a factor.
pub fn binarize_all(stacks: &[HeatMapStack], percentile: f64) -> Result<Vec<BinaryMaskSet>, CliError> {
    let k = stacks.first().map_or(0, HeatMapStack::k);
    (0..k)
        .map(|j| {
            let maps: Vec<_> = stacks.iter().map(|s| s.map(j)).collect();
            binarize_factor(j, &maps, percentile).stage(Stage::Segment)
        })
        .collect()
}

/// Largest-component box of every non-empty mask, keyed by image id.
pub fn mask_boxes(set: &BinaryMaskSet, ids: &[String]) -> Result<BTreeMap<String, BBox>, CliError> {
    let mut boxes = BTreeMap::new();
    for (m, id) in set.masks.iter().zip(ids) {
        match largest_component_bbox(m) {
            Ok(b) => {
                boxes.insert(id.clone(), b);
            }
            Err(SegmentationError::NoForeground) => {}
            Err(e) => return Err(e).stage(Stage::Segment),
        }
    }
    Ok(boxes)
}

pub fn segment_stage(
    stacks: &[HeatMapStack],
    percentile: f64,
    out: &Path,
) -> Result<(MaskIndex, Vec<BinaryMaskSet>), CliError> {
    let sets = binarize_all(stacks, percentile)?;
    let index = MaskIndex {
        k: sets.len(),
        percentile,
        images: stacks
            .iter()
            .map(|s| MaskImage {
                id: s.image_id.clone(),
                height: s.height(),
                width: s.width(),
            })
            .collect(),
    };
    let ids = index.ids();
    create_dir(Stage::Segment, &out.join("boxes"))?;
    for set in &sets {
        let dir = out.join(format!("masks/f{}", set.factor_id));
        create_dir(Stage::Segment, &dir)?;
        for (m, id) in set.masks.iter().zip(&ids) {
            write_mask_png(m, &dir.join(format!("{id}.png"))).stage(Stage::Segment)?;
        }
        let boxes = mask_boxes(set, &ids)?;
        save_json(&boxes, &out.join(format!("boxes/f{}.json", set.factor_id))).stage(Stage::Segment)?;
    }
    save_json(&index, &out.join(MASK_INDEX_FILE)).stage(Stage::Segment)?;
    Ok((index, sets))
}

pub fn load_masks(index_path: &Path, stage: Stage) -> Result<(MaskIndex, Vec<BinaryMaskSet>), CliError> {
    let text = fs::read_to_string(index_path)
        .map_err(|e| CliError::data(stage, format!("{}: {e}", index_path.display())))?;
    let index: MaskIndex = serde_json::from_str(&text)
        .map_err(|e| CliError::data(stage, format!("{}: {e}", index_path.display())))?;
    let base = index_path.parent().unwrap_or(Path::new(""));
    let sets = (0..index.k)
        .map(|j| {
            let masks = index
                .images
                .iter()
                .map(|img| {
                    let m = read_mask_png(&base.join(format!("f{j}/{}.png", img.id))).stage(stage)?;
                    if m.dim() != (img.height, img.width) {
                        return Err(CliError::data(stage, format!("mask f{j}/{} has the wrong size", img.id)));
                    }
                    Ok(m)
                })
                .collect::<Result<_, _>>()?;
            Ok(BinaryMaskSet { factor_id: j, masks })
        })
        .collect::<Result<_, CliError>>()?;
    Ok((index, sets))
}

/// Result of scoring masks against part annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct PartScores {
    pub rows: Vec<PartRow>,
    /// `None` when every annotated part is background.
    pub average_best_iou: Option<f64>,
}

pub fn eval_parts_stage(
    cfg: &PipelineConfig,
    index: &MaskIndex,
    sets: &[BinaryMaskSet],
    out_csv: &Path,
) -> Result<PartScores, CliError> {
    let parts_path = cfg
        .parts
        .as_ref()
        .ok_or_else(|| CliError::config(Stage::EvalParts, "no part index given"))?;
    let part_index = PartIndex::load(parts_path).stage(Stage::EvalParts)?;
    let parts = part_index.annotations(&index.shapes()).stage(Stage::EvalParts)?;
    let manual = cfg
        .factor_part_map
        .as_ref()
        .map(|p| load_factor_part_map(p).stage(Stage::EvalParts))
        .transpose()?;
    let rows = part_rows(sets, &parts, cfg.cov_threshold, manual.as_ref())
        .map_err(|e| CliError::data(Stage::EvalParts, e.to_string()))?;
    let average = match average_best_iou(sets, &parts, &part_index.background) {
        Ok(v) => Some(v),
        Err(crate::eval::EvalError::NoParts) => None,
        Err(e) => return Err(CliError::data(Stage::EvalParts, e.to_string())),
    };
    write_text(Stage::EvalParts, out_csv, &part_rows_csv(&rows))?;
    Ok(PartScores {
        rows,
        average_best_iou: average,
    })
}

pub fn eval_corloc_stage(
    cfg: &PipelineConfig,
    boxes: &BTreeMap<String, BBox>,
    ids: &[String],
    out_csv: &Path,
) -> Result<f64, CliError> {
    let gt_path = cfg
        .gt_boxes
        .as_ref()
        .ok_or_else(|| CliError::config(Stage::EvalCorloc, "no ground-truth boxes given"))?;
    let gts = load_boxes(gt_path).stage(Stage::EvalCorloc)?;
    let score =
        corloc_over_images(boxes, &gts, ids).map_err(|e| CliError::data(Stage::EvalCorloc, e.to_string()))?;
    write_text(Stage::EvalCorloc, out_csv, &corloc_csv(&cfg.class_name, score))?;
    Ok(score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub images: usize,
    pub k: usize,
    pub iterations_run: usize,
    pub final_loss: f64,
    pub average_best_iou: Option<f64>,
    pub corloc: Option<f64>,
}

/// Every stage in order. Activations come from `cfg.manifest` when given,
/// otherwise from running the model.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    cfg.check_paths_exist()?;
    let out = cfg.output_dir()?.to_path_buf();
    create_dir(Stage::Config, &out)?;
    let manifest = match &cfg.manifest {
        Some(path) => BatchManifest::load(path).stage(Stage::Extract)?,
        None => extract_stage(cfg, None, &out)?,
    };
    let (f, layout) = factorize_stage(&manifest, &cfg.nmf, &out)?;
    let images = load_images(&manifest, Stage::Refine)?;
    let stacks = factor_maps(&f, &layout, &images, cfg.use_refine.then_some(&cfg.refine))?;
    save_maps(&stacks, &manifest, &out)?;
    render_stage(&stacks, &images, &out)?;
    let (index, sets) = segment_stage(&stacks, cfg.percentile, &out)?;
    let average_best_iou = match cfg.parts {
        Some(_) => eval_parts_stage(cfg, &index, &sets, &out.join(METRICS_FILE))?.average_best_iou,
        None => None,
    };
    let corloc = match cfg.gt_boxes {
        Some(_) => {
            let set = sets.get(cfg.corloc_factor).ok_or_else(|| {
                CliError::config(
                    Stage::EvalCorloc,
                    format!("corloc_factor {} is not below k = {}", cfg.corloc_factor, sets.len()),
                )
            })?;
            let ids = index.ids();
            let boxes = mask_boxes(set, &ids)?;
            Some(eval_corloc_stage(cfg, &boxes, &ids, &out.join(CORLOC_FILE))?)
        }
        None => None,
    };
    let summary = RunSummary {
        images: manifest.images.len(),
        k: f.k(),
        iterations_run: f.iterations_run,
        final_loss: f.final_loss(),
        average_best_iou,
        corloc,
    };
    save_json(&summary, &out.join(SUMMARY_FILE)).stage(Stage::Config)?;
    Ok(summary)
}

pub fn default_output(cfg: &PipelineConfig, file: &str) -> Result<PathBuf, CliError> {
    Ok(cfg.output_dir()?.join(file))
}
