//! Feed-forward classifiers evaluated on logits, and the margin function
//! `g_t(x) = f_c(x) - f_t(x)`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, GraphBuilder, OutputSelector, ScalarField, ScalarGraph};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone)]
pub enum Layer {
    /// `weight` has shape `[out, in]`.
    Affine {
        weight: Arc<Tensor>,
        bias: Arc<Tensor>,
    },
    Activation(Activation),
}

/// A K-class classifier `R^d -> R^K` producing logits. Immutable once built.
#[derive(Debug, Clone)]
pub struct Model {
    name: String,
    input_dim: usize,
    num_classes: usize,
    input_range: (f64, f64),
    layers: Vec<Layer>,
    logits_graph: Graph,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    name: String,
    input_dim: usize,
    num_classes: usize,
    #[serde(default = "default_range")]
    input_range: [f64; 2],
    layers: Vec<LayerDocument>,
}

fn default_range() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum LayerDocument {
    Affine {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Activation {
        kind: Activation,
    },
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        num_classes: usize,
        input_range: (f64, f64),
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let invalid =
            |layer: Option<usize>, message: String| Error::InvalidModel { layer, message };
        if input_dim < 1 {
            return Err(invalid(None, "input_dim must be at least 1".into()));
        }
        if num_classes < 2 {
            return Err(invalid(None, "num_classes must be at least 2".into()));
        }
        let (lo, hi) = input_range;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(invalid(
                None,
                format!("input_range [{lo}, {hi}] is not valid"),
            ));
        }

        let mut gb = GraphBuilder::new();
        let mut node = gb.input(vec![input_dim])?;
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Affine { weight, bias } => {
                    if weight.shape().len() != 2 || weight.cols() != width {
                        return Err(invalid(
                            Some(i),
                            format!(
                                "affine layer expects {} inputs but receives {width}",
                                weight.shape().get(1).copied().unwrap_or(0)
                            ),
                        ));
                    }
                    if bias.len() != weight.rows() {
                        return Err(invalid(
                            Some(i),
                            format!(
                                "bias has {} entries for {} outputs",
                                bias.len(),
                                weight.rows()
                            ),
                        ));
                    }
                    if !weight.is_finite() || !bias.is_finite() {
                        return Err(invalid(Some(i), "non-finite weight".into()));
                    }
                    node = gb.affine(weight.clone(), bias.clone(), node)?;
                    width = weight.rows();
                }
                Layer::Activation(kind) => node = gb.activation(*kind, node),
            }
        }
        if width != num_classes {
            return Err(invalid(
                layers.len().checked_sub(1),
                format!("final layer produces {width} outputs, expected {num_classes} logits"),
            ));
        }
        let logits_graph = gb.build(node)?;
        Ok(Self {
            name: name.into(),
            input_dim,
            num_classes,
            input_range,
            layers,
            logits_graph,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        let layers = doc
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerDocument::Affine { weight, bias } => {
                    let wrap = |e: Error| Error::InvalidModel {
                        layer: Some(i),
                        message: e.to_string(),
                    };
                    Ok(Layer::Affine {
                        weight: Arc::new(Tensor::matrix(weight).map_err(wrap)?),
                        bias: Arc::new(Tensor::vector(bias).map_err(wrap)?),
                    })
                }
                LayerDocument::Activation { kind } => Ok(Layer::Activation(kind)),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            doc.name,
            doc.input_dim,
            doc.num_classes,
            (doc.input_range[0], doc.input_range[1]),
            layers,
        )
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDocument {
            name: self.name.clone(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            input_range: [self.input_range.0, self.input_range.1],
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Affine { weight, bias } => LayerDocument::Affine {
                        weight: (0..weight.rows()).map(|r| weight.row(r).to_vec()).collect(),
                        bias: bias.data().to_vec(),
                    },
                    Layer::Activation(kind) => LayerDocument::Activation { kind: *kind },
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("model document serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_range(&self) -> (f64, f64) {
        self.input_range
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn is_twice_differentiable(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::Activation(kind) => kind.is_twice_differentiable(),
            Layer::Affine { .. } => true,
        })
    }

    /// A fresh evaluation graph producing the logits.
    pub fn logits_graph(&self) -> Graph {
        self.logits_graph.clone()
    }

    /// Raw pre-softmax class scores.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_graph().forward(x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(x)?.data()))
    }

    pub fn margin_fn(&self, true_class: usize, target: usize) -> Result<MarginFn> {
        MarginFn::new(self, true_class, target)
    }
}

/// `g_t(x) = f_c(x) - f_t(x)` for a fixed pair of classes.
#[derive(Debug, Clone)]
pub struct MarginFn {
    field: ScalarGraph,
    true_class: usize,
    target: usize,
    twice_differentiable: bool,
}

impl MarginFn {
    pub fn new(model: &Model, true_class: usize, target: usize) -> Result<Self> {
        let k = model.num_classes();
        if true_class >= k || target >= k {
            return Err(Error::InvalidParameter(format!(
                "classes ({true_class}, {target}) out of range for {k} classes"
            )));
        }
        if true_class == target {
            return Err(Error::InvalidParameter(format!(
                "target class equals true class {true_class}"
            )));
        }
        let mut gb = GraphBuilder::new();
        let mut node = gb.input(vec![model.input_dim()])?;
        for layer in model.layers() {
            node = match layer {
                Layer::Affine { weight, bias } => gb.affine(weight.clone(), bias.clone(), node)?,
                Layer::Activation(kind) => gb.activation(*kind, node),
            };
        }
        let fc = gb.index(node, true_class)?;
        let ft = gb.index(node, target)?;
        let g = gb.sub(fc, ft)?;
        Ok(Self {
            field: ScalarGraph::new(gb.build(g)?)?,
            true_class,
            target,
            twice_differentiable: model.is_twice_differentiable(),
        })
    }

    pub fn true_class(&self) -> usize {
        self.true_class
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn margin(&mut self, x: &Tensor) -> Result<f64> {
        self.field.value(x.data())
    }

    pub fn margin_grad(&mut self, x: &Tensor) -> Result<Tensor> {
        Tensor::vector(self.field.gradient(x.data())?)
    }
}

impl ScalarField for MarginFn {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn value(&mut self, x: &[f64]) -> Result<f64> {
        self.field.value(x)
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.field.gradient(x)
    }

    fn is_twice_differentiable(&self) -> bool {
        self.twice_differentiable
    }
}

/// Gradient of `logits[a] - logits[b]` at `x`.
pub fn logit_difference_grad(graph: &mut Graph, x: &Tensor, a: usize, b: usize) -> Result<Tensor> {
    graph.gradient(x, OutputSelector::Difference(a, b))
}
