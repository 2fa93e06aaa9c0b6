//! Pipeline configuration: a JSON file, overridden field by field by flags.

use std::fs;
use std::path::{Path, PathBuf};

use dff_core::adapter::{ModelSpec, IMAGENET_MEAN, IMAGENET_STD};
use dff_core::segmentation::{DEFAULT_COVERAGE_THRESHOLD, DEFAULT_PERCENTILE};
use dff_core::{NmfConfig, RefineConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Stage, StageContext};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: Option<PathBuf>,
    pub layer: Option<String>,
    /// Square network input size; `null` feeds images at their own size.
    pub input_size: Option<u32>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Image files or directories of images; directories expand to their
    /// image files in name order.
    pub images: Vec<PathBuf>,
    /// Precomputed activations; used instead of running the model.
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub nmf: NmfConfig,
    pub refine: RefineConfig,
    pub use_refine: bool,
    pub percentile: f64,
    pub cov_threshold: f64,
    pub parts: Option<PathBuf>,
    pub gt_boxes: Option<PathBuf>,
    pub class_name: String,
    /// Factor whose boxes are scored by CorLoc.
    pub corloc_factor: usize,
    pub factor_part_map: Option<PathBuf>,
    pub sweep_ks: Vec<usize>,
    pub sweep_layers: Vec<String>,
    /// Seeds per sweep cell, starting at `nmf.seed`.
    pub sweep_seeds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: None,
            layer: None,
            input_size: Some(224),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            images: Vec::new(),
            manifest: None,
            output_dir: None,
            nmf: NmfConfig::default(),
            refine: RefineConfig::default(),
            use_refine: true,
            percentile: DEFAULT_PERCENTILE,
            cov_threshold: DEFAULT_COVERAGE_THRESHOLD,
            parts: None,
            gt_boxes: None,
            class_name: "object".into(),
            corloc_factor: 0,
            factor_part_map: None,
            sweep_ks: Vec::new(),
            sweep_layers: Vec::new(),
            sweep_seeds: 1,
        }
    }
}

impl PipelineConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(Stage::Config, format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(Stage::Config, format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.model,
            &mut self.manifest,
            &mut self.output_dir,
            &mut self.parts,
            &mut self.gt_boxes,
            &mut self.factor_part_map,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.images.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.nmf.validate().stage(Stage::Config)?;
        self.refine.validate().stage(Stage::Config)?;
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(CliError::config(
                Stage::Config,
                format!("InvalidPercentile: {} is outside (0, 100)", self.percentile),
            ));
        }
        if !(0.0..=1.0).contains(&self.cov_threshold) {
            return Err(CliError::config(
                Stage::Config,
                format!("cov_threshold {} is outside [0, 1]", self.cov_threshold),
            ));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(CliError::config(Stage::Config, "std entries must be positive"));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::config(Stage::Config, "no output directory given"))
    }

    pub fn model_spec(&self, stage: Stage, layer: Option<&str>) -> Result<ModelSpec, CliError> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| CliError::config(stage, "no model given"))?;
        let layer = layer
            .or(self.layer.as_deref())
            .ok_or_else(|| CliError::config(stage, "no layer given"))?;
        Ok(ModelSpec {
            model_path: model.clone(),
            layer_name: layer.to_string(),
            input_size: self.input_size,
            mean: self.mean,
            std: self.std,
        })
    }

    /// Expands `images` into `(id, path)` pairs; the id is the file stem
    /// and must be unique.
    pub fn image_list(&self, stage: Stage) -> Result<Vec<(String, PathBuf)>, CliError> {
        let mut files = Vec::new();
        for p in &self.images {
            if p.is_dir() {
                let mut found: Vec<PathBuf> = fs::read_dir(p)
                    .map_err(|e| CliError::config(stage, format!("{}: {e}", p.display())))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| f.is_file() && is_image(f))
                    .collect();
                found.sort();
                files.extend(found);
            } else if p.is_file() {
                files.push(p.clone());
            } else {
                return Err(CliError::config(stage, format!("{}: no such image", p.display())));
            }
        }
        if files.is_empty() {
            return Err(CliError::config(stage, "no input images"));
        }
        let mut seen = std::collections::BTreeSet::new();
        files
            .into_iter()
            .map(|f| {
                let id = f
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                if !seen.insert(id.clone()) {
                    return Err(CliError::config(stage, format!("duplicate image id {id:?}")));
                }
                Ok((id, f))
            })
            .collect()
    }

    /// Fails with a config error if any referenced file is missing.
    pub fn check_paths_exist(&self) -> Result<(), CliError> {
        for p in [&self.model, &self.manifest, &self.parts, &self.gt_boxes, &self.factor_part_map]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(CliError::config(
                    Stage::Config,
                    format!("{}: no such file", p.display()),
                ));
            }
        }
        Ok(())
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}
