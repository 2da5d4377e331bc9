use serde::{Deserialize, Serialize};

use crate::digest::fnv1a64;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputShape {
    Flat { features: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn numel(&self) -> usize {
        match *self {
            InputShape::Flat { features } => features,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Flat { features } => vec![features],
            InputShape::Image { channels, height, width } => vec![channels, height, width],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    None,
    Max2,
    GlobalAvg,
}

/// One parameterized layer θ_l with its optional norm, activation, and pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub pool: Pool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Self {
            kind: LayerKind::Dense { inputs, outputs },
            batch_norm: false,
            activation: Activation::None,
            pool: Pool::None,
            group: None,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv { in_channels, out_channels, kernel, stride, pad },
            batch_norm: false,
            activation: Activation::None,
            pool: Pool::None,
            group: None,
        }
    }

    pub fn relu(mut self) -> Self {
        self.activation = Activation::Relu;
        self
    }

    pub fn norm(mut self) -> Self {
        self.batch_norm = true;
        self
    }

    pub fn pool(mut self, pool: Pool) -> Self {
        self.pool = pool;
        self
    }

    pub fn in_group(mut self, group: &str) -> Self {
        self.group = Some(group.to_string());
        self
    }

    /// Units of this layer: dense output neurons or conv output channels.
    pub fn units(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { out_channels, .. } => out_channels,
        }
    }
}

/// Architecture of a feed-forward classifier. The last layer is the output
/// head: dense, `classes` outputs, no activation or pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Act {
    Flat(usize),
    Image(usize, usize, usize),
}

impl ModelSpec {
    /// Dense ReLU network `input → hidden… → classes`.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(LayerSpec::dense(prev, h).relu());
            prev = h;
        }
        layers.push(LayerSpec::dense(prev, classes));
        Self { input: InputShape::Flat { features: input }, layers, classes }
    }

    pub fn group_of(&self, layer: usize) -> String {
        self.layers[layer].group.clone().unwrap_or_else(|| format!("layer{layer}"))
    }

    /// Group labels in order of first appearance, with their member layers.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for l in 0..self.layers.len() {
            let g = self.group_of(l);
            match out.iter_mut().find(|(name, _)| *name == g) {
                Some((_, members)) => members.push(l),
                None => out.push((g, vec![l])),
            }
        }
        out
    }

    /// Checks that layer shapes compose and returns the activation shape
    /// entering each layer.
    pub(crate) fn trace(&self) -> Result<Vec<Act>> {
        if self.layers.is_empty() {
            return Err(Error::Spec("model has no layers".into()));
        }
        if self.classes < 2 {
            return Err(Error::Spec("at least two classes are required".into()));
        }
        let mut act = match self.input {
            InputShape::Flat { features } if features > 0 => Act::Flat(features),
            InputShape::Image { channels, height, width } if channels * height * width > 0 => {
                Act::Image(channels, height, width)
            }
            _ => return Err(Error::Spec("input shape has a zero extent".into())),
        };
        let mut entering = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            entering.push(act);
            act = match layer.kind {
                LayerKind::Dense { inputs, outputs } => {
                    let have = match act {
                        Act::Flat(f) => f,
                        Act::Image(c, h, w) => c * h * w,
                    };
                    if have != inputs || outputs == 0 {
                        return Err(Error::Spec(format!(
                            "layer {l}: dense expects {inputs} inputs, previous layer provides {have}"
                        )));
                    }
                    Act::Flat(outputs)
                }
                LayerKind::Conv { in_channels, out_channels, kernel, stride, pad } => {
                    let Act::Image(c, h, w) = act else {
                        return Err(Error::Spec(format!("layer {l}: conv needs an image input")));
                    };
                    if c != in_channels || out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Spec(format!(
                            "layer {l}: conv expects {in_channels} channels, previous layer provides {c}"
                        )));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(Error::Spec(format!("layer {l}: kernel {kernel} larger than padded input")));
                    }
                    Act::Image(out_channels, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1)
                }
            };
            act = match (layer.pool, act) {
                (Pool::None, a) => a,
                (Pool::Max2, Act::Image(c, h, w)) if h >= 2 && w >= 2 => Act::Image(c, h / 2, w / 2),
                (Pool::GlobalAvg, Act::Image(c, _, _)) => Act::Flat(c),
                (p, _) => return Err(Error::Spec(format!("layer {l}: pool {p:?} needs a large enough image"))),
            };
        }
        let head = self.layers.last().expect("nonempty");
        match head.kind {
            LayerKind::Dense { outputs, .. } if outputs == self.classes => {}
            _ => {
                return Err(Error::Spec(format!(
                    "output head must be a dense layer with {} outputs",
                    self.classes
                )))
            }
        }
        if head.activation != Activation::None || head.pool != Pool::None {
            return Err(Error::Spec("output head must not have an activation or pool".into()));
        }
        Ok(entering)
    }

    pub fn validate(&self) -> Result<()> {
        self.trace().map(|_| ())
    }

    /// Canonical serialization used for checkpoint compatibility digests.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }
}
