//! Runs an ONNX network up to a named tap and returns its activations.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;

use super::AdapterError;
use crate::tensor::{ActivationTensor, TensorError};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

fn default_input_size() -> Option<u32> {
    Some(224)
}

fn default_mean() -> [f32; 3] {
    IMAGENET_MEAN
}

fn default_std() -> [f32; 3] {
    IMAGENET_STD
}

/// Which network to run and where to tap it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_path: PathBuf,
    /// Node or value name whose output is the activation tap.
    pub layer_name: String,
    /// Square resize target; `None` feeds images at their own size.
    #[serde(default = "default_input_size")]
    pub input_size: Option<u32>,
    #[serde(default = "default_mean")]
    pub mean: [f32; 3],
    #[serde(default = "default_std")]
    pub std: [f32; 3],
}

impl ModelSpec {
    pub fn new(model_path: impl Into<PathBuf>, layer_name: impl Into<String>) -> Self {
        Self {
            model_path: model_path.into(),
            layer_name: layer_name.into(),
            input_size: default_input_size(),
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

type Plan = Arc<TypedRunnableModel>;

/// A loaded network with its output redirected to the tap. Optimized plans
/// are cached per input size, so one extractor serves any number of images.
pub struct ActivationExtractor {
    spec: ModelSpec,
    model: InferenceModel,
    plans: Mutex<HashMap<(u32, u32), Plan>>,
}

impl std::fmt::Debug for ActivationExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActivationExtractor").field("spec", &self.spec).finish()
    }
}

impl ActivationExtractor {
    pub fn load(spec: ModelSpec) -> Result<Self, AdapterError> {
        let model = tract_onnx::onnx()
            .model_for_path(&spec.model_path)
            .map_err(|e| AdapterError::ModelLoad(format!("{}: {e:#}", spec.model_path.display())))?;
        Self::from_model(spec, model)
    }

    /// Builds an extractor from serialized ONNX bytes; `spec.model_path` is
    /// only used in messages.
    pub fn from_bytes(spec: ModelSpec, bytes: &[u8]) -> Result<Self, AdapterError> {
        let model = tract_onnx::onnx()
            .model_for_read(&mut &bytes[..])
            .map_err(|e| AdapterError::ModelLoad(format!("{e:#}")))?;
        Self::from_model(spec, model)
    }

    fn from_model(spec: ModelSpec, mut model: InferenceModel) -> Result<Self, AdapterError> {
        model
            .select_outputs_by_name([spec.layer_name.as_str()])
            .map_err(|_| AdapterError::LayerNotFound(spec.layer_name.clone()))?;
        Ok(Self {
            spec,
            model,
            plans: Mutex::new(HashMap::new()),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn plan(&self, height: u32, width: u32) -> Result<Plan, AdapterError> {
        let mut plans = self.plans.lock().expect("plan cache poisoned");
        if let Some(p) = plans.get(&(height, width)) {
            return Ok(p.clone());
        }
        let shape = [1usize, 3, height as usize, width as usize];
        let plan = self
            .model
            .clone()
            .with_input_fact(0, f32::fact(shape).into())
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| AdapterError::ModelLoad(format!("{e:#}")))?;
        plans.insert((height, width), plan.clone());
        Ok(plan)
    }

    /// Resized (bilinear) to the spec's input size unless the image already
    /// has it, then normalized `(x/255 − mean)/std` into an NCHW tensor.
    pub fn preprocess(&self, image: &RgbImage) -> Tensor {
        let resized;
        let image = match self.spec.input_size {
            Some(s) if (image.width(), image.height()) != (s, s) => {
                resized = image::imageops::resize(image, s, s, FilterType::Triangle);
                &resized
            }
            _ => image,
        };
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, p) in image.enumerate_pixels() {
            let idx = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * h * w + idx] = (p[c] as f32 / 255.0 - self.spec.mean[c]) / self.spec.std[c];
            }
        }
        tract_ndarray::Array4::from_shape_vec((1, 3, h, w), data)
            .expect("buffer sized for the image")
            .into()
    }

    pub fn extract(&self, image_id: &str, image: &RgbImage) -> Result<ActivationTensor, AdapterError> {
        let input = self.preprocess(image);
        let (h, w) = (input.shape()[2] as u32, input.shape()[3] as u32);
        let outputs = self
            .plan(h, w)?
            .run(tvec!(input.into()))
            .map_err(|e| AdapterError::Inference(format!("{e:#}")))?;
        let out = outputs[0]
            .to_plain_array_view::<f32>()
            .map_err(|e| AdapterError::Inference(format!("{e:#}")))?;
        let (c, th, tw) = match out.shape() {
            [1, c, h, w] | [c, h, w] => (*c, *h, *w),
            other => {
                return Err(AdapterError::TapShape {
                    layer: self.spec.layer_name.clone(),
                    shape: other.to_vec(),
                })
            }
        };
        let chw = out
            .into_shape_with_order((c, th, tw))
            .map_err(|e| AdapterError::Inference(e.to_string()))?;
        let mut data = Vec::with_capacity(c * th * tw);
        for y in 0..th {
            for x in 0..tw {
                data.extend((0..c).map(|ch| chw[[ch, y, x]]));
            }
        }
        ActivationTensor::new(image_id, th, tw, c, data).map_err(|e| match e {
            TensorError::NonNegativityViolated { .. } => AdapterError::PreActivationTap {
                layer: self.spec.layer_name.clone(),
                source: e,
            },
            other => other.into(),
        })
    }
}
