//! Small hand-weighted convolutional networks described in JSON and
//! serialized to ONNX, so the pipeline can be exercised end to end without
//! downloading pretrained weights.
//!
//! Each layer is `Conv` (stride 1, square kernel, symmetric zero padding),
//! optionally followed by `Relu` and a 2x2/stride-2 `MaxPool`. Every node's
//! output value carries the node's name, so any of them can be tapped.

use prost::Message;
use serde::{Deserialize, Serialize};
use tract_onnx::pb;

use super::AdapterError;

pub const INPUT_NAME: &str = "input";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
    /// `out_channels x in_channels x kernel x kernel`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    /// Name of the ReLU node following the convolution, if any.
    #[serde(default)]
    pub relu: Option<String>,
    /// Name of the 2x2 max-pool node following the ReLU, if any.
    #[serde(default)]
    pub pool: Option<String>,
}

impl ConvLayer {
    pub fn weight(&self, out: usize, inp: usize, ky: usize, kx: usize) -> f32 {
        let k = self.kernel;
        self.weights[((out * self.in_channels + inp) * k + ky) * k + kx]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyNet {
    pub name: String,
    pub layers: Vec<ConvLayer>,
}

impl TinyNet {
    pub fn from_json(text: &str) -> Result<Self, AdapterError> {
        let net: TinyNet =
            serde_json::from_str(text).map_err(|e| AdapterError::ModelLoad(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        let mut channels = 3;
        for l in &self.layers {
            let bad = |msg: String| AdapterError::ModelLoad(format!("layer {}: {msg}", l.name));
            if l.in_channels != channels {
                return Err(bad(format!("expects {} inputs, previous layer gives {channels}", l.in_channels)));
            }
            let n = l.out_channels * l.in_channels * l.kernel * l.kernel;
            if l.weights.len() != n {
                return Err(bad(format!("{} weights, expected {n}", l.weights.len())));
            }
            if l.bias.len() != l.out_channels {
                return Err(bad(format!("{} biases, expected {}", l.bias.len(), l.out_channels)));
            }
            if l.pool.is_some() && l.relu.is_none() {
                return Err(bad("pooling requires a relu".into()));
            }
            channels = l.out_channels;
        }
        if self.layers.is_empty() {
            return Err(AdapterError::ModelLoad("network has no layers".into()));
        }
        Ok(())
    }

    /// Name of the last node, the graph output.
    pub fn output_name(&self) -> &str {
        let last = self.layers.last().expect("validated non-empty");
        last.pool.as_deref().or(last.relu.as_deref()).unwrap_or(&last.name)
    }

    pub fn to_onnx(&self) -> pb::ModelProto {
        let mut nodes = Vec::new();
        let mut initializers = Vec::new();
        let mut prev = INPUT_NAME.to_string();
        for l in &self.layers {
            let (wname, bname) = (format!("{}.weight", l.name), format!("{}.bias", l.name));
            initializers.push(float_tensor(
                &wname,
                &[l.out_channels, l.in_channels, l.kernel, l.kernel],
                &l.weights,
            ));
            initializers.push(float_tensor(&bname, &[l.out_channels], &l.bias));
            let p = l.pad as i64;
            let k = l.kernel as i64;
            nodes.push(node(
                &l.name,
                "Conv",
                vec![prev.clone(), wname, bname],
                vec![ints("kernel_shape", &[k, k]), ints("pads", &[p, p, p, p]), ints("strides", &[1, 1])],
            ));
            prev = l.name.clone();
            if let Some(relu) = &l.relu {
                nodes.push(node(relu, "Relu", vec![prev.clone()], vec![]));
                prev = relu.clone();
            }
            if let Some(pool) = &l.pool {
                nodes.push(node(
                    pool,
                    "MaxPool",
                    vec![prev.clone()],
                    vec![ints("kernel_shape", &[2, 2]), ints("strides", &[2, 2])],
                ));
                prev = pool.clone();
            }
        }
        let input = value_info(INPUT_NAME, &[Dim::Fixed(1), Dim::Fixed(3), Dim::Named("height"), Dim::Named("width")]);
        let out_c = self.layers.last().map_or(0, |l| l.out_channels as i64);
        let output = value_info(&prev, &[Dim::Fixed(1), Dim::Fixed(out_c), Dim::Named("out_height"), Dim::Named("out_width")]);
        pb::ModelProto {
            ir_version: 7,
            opset_import: vec![pb::OperatorSetIdProto {
                domain: String::new(),
                version: 13,
            }],
            producer_name: "dff-core".into(),
            graph: Some(pb::GraphProto {
                name: self.name.clone(),
                node: nodes,
                initializer: initializers,
                input: vec![input],
                output: vec![output],
                ..Default::default()
            }),
            ..Default::default()
        }
    }

    pub fn to_onnx_bytes(&self) -> Vec<u8> {
        self.to_onnx().encode_to_vec()
    }
}

fn float_tensor(name: &str, dims: &[usize], data: &[f32]) -> pb::TensorProto {
    pb::TensorProto {
        name: name.into(),
        dims: dims.iter().map(|&d| d as i64).collect(),
        data_type: pb::tensor_proto::DataType::Float as i32,
        float_data: data.to_vec(),
        ..Default::default()
    }
}

fn ints(name: &str, values: &[i64]) -> pb::AttributeProto {
    pb::AttributeProto {
        name: name.into(),
        r#type: pb::attribute_proto::AttributeType::Ints as i32,
        ints: values.to_vec(),
        ..Default::default()
    }
}

fn node(name: &str, op: &str, input: Vec<String>, attribute: Vec<pb::AttributeProto>) -> pb::NodeProto {
    pb::NodeProto {
        name: name.into(),
        op_type: op.into(),
        input,
        output: vec![name.into()],
        attribute,
        ..Default::default()
    }
}

enum Dim {
    Fixed(i64),
    Named(&'static str),
}

fn value_info(name: &str, dims: &[Dim]) -> pb::ValueInfoProto {
    use pb::tensor_shape_proto::{dimension::Value, Dimension};
    let dim = dims
        .iter()
        .map(|d| Dimension {
            value: Some(match d {
                Dim::Fixed(v) => Value::DimValue(*v),
                Dim::Named(s) => Value::DimParam((*s).into()),
            }),
            ..Default::default()
        })
        .collect();
    pb::ValueInfoProto {
        name: name.into(),
        r#type: Some(pb::TypeProto {
            value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                elem_type: pb::tensor_proto::DataType::Float as i32,
                shape: Some(pb::TensorShapeProto { dim }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}
