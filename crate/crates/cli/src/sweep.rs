//! Average best-match IoU over a grid of layers and ranks, each cell
//! repeated over several NMF seeds.

use dff_core::adapter::{load_rgb, ActivationExtractor, BatchManifest};
use dff_core::formats::PartIndex;
use dff_core::{ActivationTensor, NmfConfig, PartAnnotation};
use image::RgbImage;

use crate::config::PipelineConfig;
use crate::error::{CliError, Stage, StageContext};
use crate::eval::{average_best_iou, sweep_csv, SweepRow};
use crate::pipeline::{binarize_all, extract_in_memory, factor_maps, factorize_tensors, load_activation_set, load_images};

pub const SWEEP_FILE: &str = "sweep.csv";

struct Inputs {
    ids: Vec<String>,
    images: Vec<RgbImage>,
}

/// Runs the sweep and writes `sweep.csv` into the output directory. Without
/// `sweep_layers`, a configured `manifest` supplies a single precomputed
/// layer; otherwise `layer` is used.
pub fn run_sweep(cfg: &PipelineConfig) -> Result<Vec<SweepRow>, CliError> {
    cfg.validate()?;
    cfg.check_paths_exist()?;
    if cfg.sweep_ks.is_empty() {
        return Err(CliError::config(Stage::Sweep, "k-list is empty"));
    }
    if cfg.sweep_seeds == 0 {
        return Err(CliError::config(Stage::Sweep, "sweep_seeds must be at least 1"));
    }
    let out = cfg.output_dir()?.to_path_buf();
    let parts_path = cfg
        .parts
        .as_ref()
        .ok_or_else(|| CliError::config(Stage::Sweep, "no part index given"))?;
    let part_index = PartIndex::load(parts_path).stage(Stage::Sweep)?;

    let mut layers: Vec<(String, Vec<ActivationTensor>)> = Vec::new();
    let inputs = if cfg.sweep_layers.is_empty() && cfg.manifest.is_some() {
        let manifest = BatchManifest::load(cfg.manifest.as_ref().unwrap()).stage(Stage::Sweep)?;
        layers.push((manifest.layer.clone(), load_activation_set(&manifest, Stage::Sweep)?));
        Inputs {
            ids: manifest.images.iter().map(|e| e.id.clone()).collect(),
            images: load_images(&manifest, Stage::Sweep)?,
        }
    } else {
        let list = cfg.image_list(Stage::Sweep)?;
        let loaded: Vec<(String, RgbImage)> = list
            .iter()
            .map(|(id, p)| Ok((id.clone(), load_rgb(p).stage(Stage::Sweep)?)))
            .collect::<Result<_, CliError>>()?;
        let names: Vec<String> = if cfg.sweep_layers.is_empty() {
            vec![cfg
                .layer
                .clone()
                .ok_or_else(|| CliError::config(Stage::Sweep, "no layer given"))?]
        } else {
            cfg.sweep_layers.clone()
        };
        for name in names {
            let spec = cfg.model_spec(Stage::Sweep, Some(&name))?;
            let extractor = ActivationExtractor::load(spec).stage(Stage::Sweep)?;
            layers.push((name, extract_in_memory(&extractor, &loaded)?));
        }
        let (ids, images) = loaded.into_iter().unzip();
        Inputs { ids, images }
    };

    let shapes: Vec<(String, usize, usize)> = inputs
        .ids
        .iter()
        .zip(&inputs.images)
        .map(|(id, img)| (id.clone(), img.height() as usize, img.width() as usize))
        .collect();
    let parts = part_index.annotations(&shapes).stage(Stage::Sweep)?;

    let mut rows = Vec::new();
    for (layer, tensors) in &layers {
        for &k in &cfg.sweep_ks {
            let scores = (0..cfg.sweep_seeds as u64)
                .map(|s| {
                    let nmf = NmfConfig {
                        k,
                        seed: cfg.nmf.seed + s,
                        ..cfg.nmf.clone()
                    };
                    trial(cfg, tensors, &inputs.images, &nmf, &parts, &part_index.background)
                })
                .collect::<Result<Vec<_>, _>>()?;
            log::info!("sweep {layer} k={k}: {scores:?}");
            rows.push(SweepRow {
                layer: layer.clone(),
                k,
                scores,
            });
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| CliError::data(Stage::Sweep, format!("{}: {e}", out.display())))?;
    let path = out.join(SWEEP_FILE);
    std::fs::write(&path, sweep_csv(&rows))
        .map_err(|e| CliError::data(Stage::Sweep, format!("{}: {e}", path.display())))?;
    Ok(rows)
}

fn trial(
    cfg: &PipelineConfig,
    tensors: &[ActivationTensor],
    images: &[RgbImage],
    nmf: &NmfConfig,
    parts: &[PartAnnotation],
    background: &[String],
) -> Result<f64, CliError> {
    let (f, layout) = factorize_tensors(tensors, nmf)?;
    let stacks = factor_maps(&f, &layout, images, cfg.use_refine.then_some(&cfg.refine))?;
    let sets = binarize_all(&stacks, cfg.percentile)?;
    average_best_iou(&sets, parts, background).map_err(|e| CliError::data(Stage::Sweep, e.to_string()))
}
