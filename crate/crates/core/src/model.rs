//! The three networks: a representation network producing `H×W×D` feature
//! maps, a cosine classifier head and an l2-normalized embedding head.
//!
//! Parameters live as plain arrays in [`ModelParams`] between steps and are
//! bound onto a fresh [`Graph`] (as [`BoundParams`]) whenever gradients are
//! needed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MapShape;
use crate::tensor::{Graph, Tensor};

const MAP_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub map_d: usize,
    /// Flattened size of the representation, `map_h · map_w · map_d`.
    pub repr_dim: usize,
    /// Width of the classifier-side feature (the generalized space used at test time).
    pub final_dim: usize,
    /// Width of the embedding head output.
    pub embed_dim: usize,
    /// Identities across all training domains.
    pub num_classes: usize,
    /// Scale each of the `H·W` feature vectors to (soft) unit length.
    pub normalize_maps: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: `2×2×16` maps from a 64-wide hidden layer.
    pub fn desk(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim: 64,
            map_h: 2,
            map_w: 2,
            map_d: 16,
            repr_dim: 64,
            final_dim: 32,
            embed_dim: 16,
            num_classes,
            normalize_maps: false,
        }
    }

    pub fn map_shape(&self) -> MapShape {
        MapShape {
            h: self.map_h,
            w: self.map_w,
            d: self.map_d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.hidden_dim,
            self.repr_dim,
            self.final_dim,
            self.embed_dim,
            self.num_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Contract(format!("model dimensions must be positive: {self:?}")));
        }
        MapShape::new(self.map_h, self.map_w, self.map_d)?;
        if self.map_h * self.map_w * self.map_d != self.repr_dim {
            return Err(Error::Contract(format!(
                "map {}x{}x{} does not flatten to repr_dim {}",
                self.map_h, self.map_w, self.map_d, self.repr_dim
            )));
        }
        if self.embed_dim > self.repr_dim {
            return Err(Error::Contract(format!(
                "embed_dim {} exceeds repr_dim {}",
                self.embed_dim, self.repr_dim
            )));
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` in enumeration order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        vec![
            ("r.w1", vec![self.input_dim, self.hidden_dim], self.input_dim),
            ("r.b1", vec![self.hidden_dim], self.input_dim),
            ("r.w2", vec![self.hidden_dim, self.repr_dim], self.hidden_dim),
            ("r.b2", vec![self.repr_dim], self.hidden_dim),
            ("c.w", vec![self.repr_dim, self.final_dim], self.repr_dim),
            ("c.b", vec![self.final_dim], self.repr_dim),
            ("c.classes", vec![self.num_classes, self.final_dim], self.final_dim),
            ("e.w", vec![self.repr_dim, self.embed_dim], self.repr_dim),
            ("e.b", vec![self.embed_dim], self.repr_dim),
        ]
    }
}

/// Which of the three networks a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Representation network.
    Repr,
    /// Classifier head, including the per-identity weight rows.
    Classifier,
    /// Embedding head.
    Embed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn group(&self) -> ParamGroup {
        match self.name.split('.').next() {
            Some("r") => ParamGroup::Repr,
            Some("c") => ParamGroup::Classifier,
            _ => ParamGroup::Embed,
        }
    }
}

/// All trainable parameters, in a fixed enumeration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

impl ModelParams {
    /// Uniform in `[−1/√fan_in, 1/√fan_in]`.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                Param {
                    name: name.to_string(),
                    shape,
                    values: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            params,
        })
    }

    /// Every parameter set to zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, _)| Param {
                name: name.to_string(),
                values: vec![0.0; shape.iter().product()],
                shape,
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            params,
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group() == group)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Leaves on `graph` that require gradients, one per parameter.
    pub fn bind(&self, graph: &Graph) -> BoundParams {
        let tensors = self
            .params
            .iter()
            .map(|p| graph.param(p.values.clone(), &p.shape).expect("shape matches values"))
            .collect();
        BoundParams {
            config: self.config.clone(),
            tensors,
        }
    }

    /// Copies values out of bound tensors (e.g. after an update).
    pub fn from_bound(bound: &BoundParams, template: &ModelParams) -> Self {
        let params = template
            .params
            .iter()
            .zip(&bound.tensors)
            .map(|(p, t)| Param {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: t.to_vec(),
            })
            .collect();
        ModelParams {
            config: template.config.clone(),
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let record = Checkpoint {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        StoredParam {
                            shape: p.shape.clone(),
                            values: p.values.clone(),
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut record: Checkpoint = serde_json::from_str(text)?;
        record.config.validate()?;
        let mut params = Vec::new();
        for (name, shape, _) in record.config.layout() {
            let stored = record
                .params
                .remove(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {name}")))?;
            if stored.shape != shape || stored.values.len() != shape.iter().product::<usize>() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: expected shape {shape:?}, found {:?} with {} values",
                    stored.shape,
                    stored.values.len()
                )));
            }
            params.push(Param {
                name: name.to_string(),
                shape,
                values: stored.values,
            });
        }
        if let Some(extra) = record.params.keys().next() {
            return Err(Error::Contract(format!("unknown parameter {extra} in checkpoint")));
        }
        Ok(ModelParams {
            config: record.config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    config: ModelConfig,
    params: BTreeMap<String, StoredParam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredParam {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Parameters living on a graph; either `Θ` itself or a derived `Θ′`.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

impl BoundParams {
    fn get(&self, name: &str) -> &Tensor {
        let idx = self
            .config
            .layout()
            .iter()
            .position(|(n, _, _)| *n == name)
            .expect("known parameter name");
        &self.tensors[idx]
    }

    fn affine(&self, x: &Tensor, w: &str, b: &str) -> Result<Tensor> {
        let y = x.matmul(self.get(w))?;
        let rows = y.shape()[0];
        y.add(&self.get(b).repeat_rows(rows)?)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "expected [n, {}] inputs, got {s:?}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Flattened feature maps `[n, H·W·D]` for inputs `[n, input_dim]`.
    ///
    /// With `normalize_maps` every position's `D`-vector `v` becomes
    /// `v / √(‖v‖² + ε)`, so a zero map stays zero.
    pub fn forward_repr(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let hidden = self.affine(x, "r.w1", "r.b1")?.relu();
        let maps = self.affine(&hidden, "r.w2", "r.b2")?;
        if !self.config.normalize_maps {
            return Ok(maps);
        }
        let n = maps.shape()[0];
        let shape = self.config.map_shape();
        let rows = maps.reshape(&[n * shape.positions(), shape.d])?;
        let norms = rows.square().sum(&[1])?.add_scalar(MAP_NORM_EPS).sqrt()?;
        rows.div(&norms.repeat_cols(shape.d)?)?.reshape(&[n, shape.numel()])
    }

    /// Classifier-side features before normalization, `[n, final_dim]`.
    pub fn classifier_features(&self, repr: &Tensor) -> Result<Tensor> {
        self.affine(repr, "c.w", "c.b")
    }

    /// Unit-norm class weight rows `[C, final_dim]`.
    pub fn class_weights(&self) -> Result<Tensor> {
        self.get("c.classes").l2_normalize_rows()
    }

    /// Unit-norm embeddings `[n, embed_dim]` from representations.
    pub fn embed_head(&self, repr: &Tensor) -> Result<Tensor> {
        self.affine(repr, "e.w", "e.b")?.l2_normalize_rows()
    }

    pub fn forward_embed(&self, x: &Tensor) -> Result<Tensor> {
        self.embed_head(&self.forward_repr(x)?)
    }

    /// Cosines between each input's classifier feature and every class weight, `[n, C]`.
    pub fn forward_classify(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self
            .classifier_features(&self.forward_repr(x)?)?
            .l2_normalize_rows()?;
        feats.matmul(&self.class_weights()?.t()?)
    }
}

/// `Θ′ = Θ − α·∇`.
///
/// With `differentiable` the result stays connected to `params` on the graph,
/// so a later backward pass through `Θ′` reaches `Θ` (and, if `grads` were
/// built with `create_graph`, picks up second-order terms). Otherwise `Θ′`
/// is a fresh set of leaves.
pub fn inner_update(params: &BoundParams, grads: &[Tensor], alpha: f64, differentiable: bool) -> Result<BoundParams> {
    if grads.len() != params.tensors.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.tensors.len()
        )));
    }
    let mut tensors = Vec::with_capacity(grads.len());
    for (p, g) in params.tensors.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let updated = if differentiable {
            p.sub(&g.scale(alpha))?
        } else {
            let values = p.data().iter().zip(g.data().iter()).map(|(w, d)| w - alpha * d).collect();
            p.graph().param(values, &p.shape())?
        };
        tensors.push(updated);
    }
    Ok(BoundParams {
        config: params.config.clone(),
        tensors,
    })
}

/// Per-parameter gradient arrays aligned with [`ModelParams::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients(params.params.iter().map(|p| vec![0.0; p.values.len()]).collect())
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Self {
        Gradients(tensors.iter().map(Tensor::to_vec).collect())
    }

    /// `self += weight · other`.
    pub fn add_scaled(&mut self, other: &Gradients, weight: f64) -> Result<()> {
        if self.0.len() != other.0.len() || self.0.iter().zip(&other.0).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Contract("gradient sets are not aligned".into()));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += weight * y;
            }
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}
