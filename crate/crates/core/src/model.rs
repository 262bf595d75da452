//! Encoder / bottleneck / weight-normalized classifier at MLP scale.
//!
//! `input -> [dense -> relu]* -> dense -> batch-norm -> features -> V,g -> logits`
//!
//! The feature extractor (`encode`) ends after batch-norm. The classifier
//! is a bias-free linear layer whose row `k` is `g[k] * V[k] / |V[k]|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BatchStats, ColumnStats, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Fraction of the running batch-norm statistics kept at every update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-feature affine map fitted on source data and frozen into the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for row in x.iter_rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.iter_rows() {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = x.cols();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in x fan_out`
    pub weight: Tensor,
    pub bias: Tensor,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: BatchNormState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightNormLinear {
    /// Direction matrix, `classes x features`.
    pub v: Tensor,
    /// Per-row scale.
    pub g: Tensor,
}

impl WeightNormLinear {
    /// Effective weights `g[k] * V[k] / |V[k]|`, `classes x features`.
    pub fn effective_weight(&self) -> Tensor {
        let mut w = self.v.clone();
        let p = w.cols();
        for (k, row) in w.data_mut().chunks_mut(p).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x *= self.g.data()[k] / norm);
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderClassifier {
    pub input_dim: usize,
    pub num_classes: usize,
    pub input_norm: Option<Standardizer>,
    pub encoder: Vec<DenseLayer>,
    pub bottleneck: Bottleneck,
    pub classifier: WeightNormLinear,
    pub frozen_classifier: bool,
}

/// Batch-norm behaviour of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Running statistics; samples are independent of each other.
    Eval,
    /// Statistics of the first `reference_rows` rows of the batch.
    Train { reference_rows: usize },
}

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Plays the role of the pre-trained backbone.
    Encoder,
    /// Newly added layers: bottleneck and batch-norm affine.
    Bottleneck,
    Classifier,
}

impl ParamGroup {
    pub fn is_new_layer(self) -> bool {
        !matches!(self, ParamGroup::Encoder)
    }
}

/// Which parameters enter a graph as trainable nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Encoder and bottleneck; the classifier enters as constants.
    FeatureExtractor,
    Nothing,
}

/// Node handles produced by [`EncoderClassifier::build`].
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub features: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    pub batch_norm: NodeId,
    pub params: Vec<(String, ParamGroup, NodeId)>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect()
}

impl EncoderClassifier {
    /// Xavier-uniform weights, zero biases, `g[k] = |V[k]|`.
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        bottleneck_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || bottleneck_dim == 0 || num_classes == 0 || hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("all model dimensions must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(hidden_dims.len());
        let mut fan_in = input_dim;
        for &h in hidden_dims {
            encoder.push(DenseLayer {
                weight: Tensor::matrix(fan_in, h, xavier(&mut rng, fan_in, h))?,
                bias: Tensor::zeros(&[h]),
                relu: true,
            });
            fan_in = h;
        }
        let bottleneck = Bottleneck {
            weight: Tensor::matrix(fan_in, bottleneck_dim, xavier(&mut rng, fan_in, bottleneck_dim))?,
            bias: Tensor::zeros(&[bottleneck_dim]),
            bn: BatchNormState {
                gamma: Tensor::full(&[bottleneck_dim], 1.0),
                beta: Tensor::zeros(&[bottleneck_dim]),
                running_mean: vec![0.0; bottleneck_dim],
                running_var: vec![1.0; bottleneck_dim],
            },
        };
        let v = Tensor::matrix(
            num_classes,
            bottleneck_dim,
            xavier(&mut rng, bottleneck_dim, num_classes),
        )?;
        let g = Tensor::vector(v.iter_rows().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect());
        Ok(Self {
            input_dim,
            num_classes,
            input_norm: None,
            encoder,
            bottleneck,
            classifier: WeightNormLinear { v, g },
            frozen_classifier: false,
        })
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.encoder.iter().map(|l| l.bias.len()).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.bottleneck.bias.len()
    }

    pub fn set_classifier_frozen(&mut self, frozen: bool) {
        self.frozen_classifier = frozen;
    }

    pub fn with_input_norm(mut self, norm: Standardizer) -> Self {
        self.input_norm = Some(norm);
        self
    }

    /// Every parameter with its graph name and learning-rate group.
    pub fn named_params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), ParamGroup::Encoder, &layer.weight));
            out.push((format!("encoder.{i}.bias"), ParamGroup::Encoder, &layer.bias));
        }
        out.push(("bottleneck.weight".into(), ParamGroup::Bottleneck, &self.bottleneck.weight));
        out.push(("bottleneck.bias".into(), ParamGroup::Bottleneck, &self.bottleneck.bias));
        out.push(("bn.gamma".into(), ParamGroup::Bottleneck, &self.bottleneck.bn.gamma));
        out.push(("bn.beta".into(), ParamGroup::Bottleneck, &self.bottleneck.bn.beta));
        out.push(("classifier.v".into(), ParamGroup::Classifier, &self.classifier.v));
        out.push(("classifier.g".into(), ParamGroup::Classifier, &self.classifier.g));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("encoder.") {
            let (idx, field) = rest.split_once('.')?;
            let layer = self.encoder.get_mut(idx.parse::<usize>().ok()?)?;
            return match field {
                "weight" => Some(&mut layer.weight),
                "bias" => Some(&mut layer.bias),
                _ => None,
            };
        }
        match name {
            "bottleneck.weight" => Some(&mut self.bottleneck.weight),
            "bottleneck.bias" => Some(&mut self.bottleneck.bias),
            "bn.gamma" => Some(&mut self.bottleneck.bn.gamma),
            "bn.beta" => Some(&mut self.bottleneck.bn.beta),
            "classifier.v" => Some(&mut self.classifier.v),
            "classifier.g" => Some(&mut self.classifier.g),
            _ => None,
        }
    }

    /// Records the model on `g`, reading inputs from node `x` (`n x input_dim`).
    pub fn build(&self, g: &mut Graph, x: NodeId, mode: ForwardMode, trainable: Trainable) -> Result<ModelGraph> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::shape(
                "model input",
                format!("expected n x {}, got {:?}", self.input_dim, shape),
            ));
        }
        let mut params = Vec::new();
        let mut leaf = |g: &mut Graph, name: String, group: ParamGroup, value: &Tensor| -> Result<NodeId> {
            let train = match trainable {
                Trainable::All => !(group == ParamGroup::Classifier && self.frozen_classifier),
                Trainable::FeatureExtractor => group != ParamGroup::Classifier,
                Trainable::Nothing => false,
            };
            if train {
                let id = g.param(&name, value.clone())?;
                params.push((name, group, id));
                Ok(id)
            } else {
                Ok(g.constant(value.clone()))
            }
        };

        let mut h = x;
        if let Some(norm) = &self.input_norm {
            let d = self.input_dim;
            let mut scale = Tensor::zeros(&[d, d]);
            for j in 0..d {
                scale.data_mut()[j * d + j] = 1.0 / norm.std[j];
            }
            let shift = Tensor::vector((0..d).map(|j| -norm.mean[j] / norm.std[j]).collect());
            let s = g.constant(scale);
            let b = g.constant(shift);
            let scaled = g.matmul(h, s)?;
            h = g.add_row(scaled, b)?;
        }
        for (i, layer) in self.encoder.iter().enumerate() {
            let w = leaf(g, format!("encoder.{i}.weight"), ParamGroup::Encoder, &layer.weight)?;
            let b = leaf(g, format!("encoder.{i}.bias"), ParamGroup::Encoder, &layer.bias)?;
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if layer.relu {
                h = g.relu(h);
            }
        }
        let bn = &self.bottleneck.bn;
        let w = leaf(g, "bottleneck.weight".into(), ParamGroup::Bottleneck, &self.bottleneck.weight)?;
        let b = leaf(g, "bottleneck.bias".into(), ParamGroup::Bottleneck, &self.bottleneck.bias)?;
        let gamma = leaf(g, "bn.gamma".into(), ParamGroup::Bottleneck, &bn.gamma)?;
        let beta = leaf(g, "bn.beta".into(), ParamGroup::Bottleneck, &bn.beta)?;
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, b)?;
        let stats = match mode {
            ForwardMode::Eval => BatchStats::Fixed {
                mean: bn.running_mean.clone(),
                var: bn.running_var.clone(),
            },
            ForwardMode::Train { reference_rows } => BatchStats::Batch { reference_rows },
        };
        let features = g.batch_norm(z, gamma, beta, stats)?;

        let v = leaf(g, "classifier.v".into(), ParamGroup::Classifier, &self.classifier.v)?;
        let gs = leaf(g, "classifier.g".into(), ParamGroup::Classifier, &self.classifier.g)?;
        let weight = g.weight_norm(v, gs)?;
        let weight_t = g.transpose(weight)?;
        let logits = g.matmul(features, weight_t)?;
        let probs = g.softmax(logits)?;
        Ok(ModelGraph {
            features,
            logits,
            probs,
            batch_norm: features,
            params,
        })
    }

    fn eval_node(&self, x: &Tensor, pick: impl Fn(&ModelGraph) -> NodeId) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.input("x", x.shape())?;
        let mg = self.build(&mut g, input, ForwardMode::Eval, Trainable::Nothing)?;
        g.run(&[("x", x)], pick(&mg))
    }

    /// Bottleneck features (post batch-norm) in eval mode.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_node(x, |m| m.features)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_node(x, |m| m.logits)
    }

    /// Softmax class probabilities in eval mode.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_node(x, |m| m.probs)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_probs(x)?.argmax_rows())
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running_stats(&mut self, batch: &ColumnStats) {
        let bn = &mut self.bottleneck.bn;
        for j in 0..bn.running_mean.len() {
            bn.running_mean[j] = BN_MOMENTUM * bn.running_mean[j] + (1.0 - BN_MOMENTUM) * batch.mean[j];
            bn.running_var[j] = BN_MOMENTUM * bn.running_var[j] + (1.0 - BN_MOMENTUM) * batch.var[j];
        }
    }

    pub fn classifier_params_equal(&self, other: &Self) -> bool {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        bits(&self.classifier.v) == bits(&other.classifier.v) && bits(&self.classifier.g) == bits(&other.classifier.g)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile::from(self);
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: e.line(),
            detail: e.to_string(),
        };
        let raw: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
        let version = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Parse {
                line: 1,
                detail: "missing format_version".into(),
            })?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(Error::Version {
                found: version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_str(text).map_err(parse_err)?;
        file.into_model()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

// ---- file format ------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Dims {
    input: usize,
    hidden: Vec<usize>,
    bottleneck: usize,
    classes: usize,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    relu: bool,
}

#[derive(Serialize, Deserialize)]
struct BottleneckFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BnFile {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ClassifierFile {
    V: Vec<Vec<f64>>,
    g: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    dims: Dims,
    input_norm: Option<Standardizer>,
    encoder: Vec<LayerFile>,
    bottleneck: BottleneckFile,
    bn_state: BnFile,
    classifier: ClassifierFile,
    frozen: bool,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

fn matrix_of(rows: &[Vec<f64>], r: usize, c: usize, what: &str) -> Result<Tensor> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Parse {
            line: 0,
            detail: format!("{what}: expected {r}x{c} matrix"),
        });
    }
    if r == 0 {
        return Ok(Tensor::zeros(&[0, c]));
    }
    Tensor::from_rows(rows)
}

fn vector_of(v: &[f64], n: usize, what: &str) -> Result<Tensor> {
    if v.len() != n {
        return Err(Error::Parse {
            line: 0,
            detail: format!("{what}: expected length {n}, got {}", v.len()),
        });
    }
    Ok(Tensor::vector(v.to_vec()))
}

impl From<&EncoderClassifier> for ModelFile {
    fn from(m: &EncoderClassifier) -> Self {
        let bn = &m.bottleneck.bn;
        ModelFile {
            format_version: FORMAT_VERSION,
            dims: Dims {
                input: m.input_dim,
                hidden: m.hidden_dims(),
                bottleneck: m.feature_dim(),
                classes: m.num_classes,
            },
            input_norm: m.input_norm.clone(),
            encoder: m
                .encoder
                .iter()
                .map(|l| LayerFile {
                    weight: rows_of(&l.weight),
                    bias: l.bias.data().to_vec(),
                    relu: l.relu,
                })
                .collect(),
            bottleneck: BottleneckFile {
                weight: rows_of(&m.bottleneck.weight),
                bias: m.bottleneck.bias.data().to_vec(),
            },
            bn_state: BnFile {
                gamma: bn.gamma.data().to_vec(),
                beta: bn.beta.data().to_vec(),
                running_mean: bn.running_mean.clone(),
                running_var: bn.running_var.clone(),
            },
            classifier: ClassifierFile {
                V: rows_of(&m.classifier.v),
                g: m.classifier.g.data().to_vec(),
            },
            frozen: m.frozen_classifier,
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<EncoderClassifier> {
        let d = &self.dims;
        if d.hidden.len() != self.encoder.len() {
            return Err(Error::Parse {
                line: 0,
                detail: "dims.hidden does not match encoder layer count".into(),
            });
        }
        let mut encoder = Vec::new();
        let mut fan_in = d.input;
        for (i, (layer, &h)) in self.encoder.iter().zip(&d.hidden).enumerate() {
            encoder.push(DenseLayer {
                weight: matrix_of(&layer.weight, fan_in, h, &format!("encoder[{i}].weight"))?,
                bias: vector_of(&layer.bias, h, &format!("encoder[{i}].bias"))?,
                relu: layer.relu,
            });
            fan_in = h;
        }
        let p = d.bottleneck;
        let bn = &self.bn_state;
        let bottleneck = Bottleneck {
            weight: matrix_of(&self.bottleneck.weight, fan_in, p, "bottleneck.weight")?,
            bias: vector_of(&self.bottleneck.bias, p, "bottleneck.bias")?,
            bn: BatchNormState {
                gamma: vector_of(&bn.gamma, p, "bn_state.gamma")?,
                beta: vector_of(&bn.beta, p, "bn_state.beta")?,
                running_mean: vector_of(&bn.running_mean, p, "bn_state.running_mean")?.into_data(),
                running_var: vector_of(&bn.running_var, p, "bn_state.running_var")?.into_data(),
            },
        };
        let classifier = WeightNormLinear {
            v: matrix_of(&self.classifier.V, d.classes, p, "classifier.V")?,
            g: vector_of(&self.classifier.g, d.classes, "classifier.g")?,
        };
        if let Some(norm) = &self.input_norm {
            if norm.mean.len() != d.input || norm.std.len() != d.input {
                return Err(Error::Parse {
                    line: 0,
                    detail: "input_norm does not match dims.input".into(),
                });
            }
        }
        Ok(EncoderClassifier {
            input_dim: d.input,
            num_classes: d.classes,
            input_norm: self.input_norm,
            encoder,
            bottleneck,
            classifier,
            frozen_classifier: self.frozen,
        })
    }
}
