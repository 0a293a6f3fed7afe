//! Gram statistics and the weighted style/content/energy objective.
//!
//! For activations `C` of shape `T × F × D` the speech Gram tensor is
//! `G[i,j,k,l] = (1/T) Σ_t C[t,i,k] C[t,j,l]`, correlations over time only.
//! It is stored as the `FD × FD` matrix `(1/T) XᵀX` where `X` is `C`
//! flattened to `T × FD`, so `G[i,j,k,l]` sits at row `i·D + k`, column
//! `j·D + l`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gram_raw, Graph, NodeId, Precision, Tensor};
use crate::error::{Error, Result};
use crate::net::{ActivationSet, LayerKind, NetworkSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct GramTensor {
    pub freq: usize,
    pub filters: usize,
    /// frames averaged over
    pub frames: usize,
    /// `FD × FD`
    pub matrix: Tensor,
}

impl GramTensor {
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let d = self.filters;
        self.matrix.get(&[i * d + k, j * d + l])
    }

    /// Number of entries `F²D²`.
    pub fn numel(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.freq * self.filters;
        let m = self.matrix.data();
        (0..n).all(|a| (a..n).all(|b| m[a * n + b].to_bits() == m[b * n + a].to_bits()))
    }
}

fn check_activation(c: &Tensor) -> Result<(usize, usize, usize)> {
    if c.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "gram_tensor",
            detail: format!("activations {:?}, expected [T, F, D]", c.shape()),
        });
    }
    Ok((c.shape()[0], c.shape()[1], c.shape()[2]))
}

pub fn gram_tensor(c: &Tensor) -> Result<GramTensor> {
    pooled_style_gram(std::slice::from_ref(c))
}

/// Gram tensor over the concatenated frames of several utterances.
pub fn pooled_style_gram(utterances: &[Tensor]) -> Result<GramTensor> {
    let first = utterances
        .first()
        .ok_or_else(|| Error::InvalidArgument("no style utterances".into()))?;
    let (_, f, d) = check_activation(first)?;
    let mut data = Vec::new();
    let mut frames = 0;
    for u in utterances {
        let (t, uf, ud) = check_activation(u)?;
        if (uf, ud) != (f, d) {
            return Err(Error::ShapeMismatch {
                op: "pooled_style_gram",
                detail: format!("{:?} vs F={f}, D={d}", u.shape()),
            });
        }
        data.extend_from_slice(u.data());
        frames += t;
    }
    let n = f * d;
    Ok(GramTensor {
        freq: f,
        filters: d,
        frames,
        matrix: Tensor::new(vec![n, n], gram_raw(&data, frames, n))?,
    })
}

/// Image Gram matrix `G[i,j] = (1/(WH)) Σ_{w,h} C[w,h,i] C[w,h,j]`.
pub fn gram_matrix_image(c: &Tensor) -> Result<Tensor> {
    if c.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "gram_matrix_image",
            detail: format!("activations {:?}, expected [W, H, D]", c.shape()),
        });
    }
    let (w, h, d) = (c.shape()[0], c.shape()[1], c.shape()[2]);
    Tensor::new(vec![d, d], gram_raw(c.data(), w * h, d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Style,
    Content,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub layer: String,
    pub role: Role,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
    pub energy_weight: f64,
}

pub const STYLE_WEIGHT: f64 = 1e5;
pub const MID_CONTENT_WEIGHT: f64 = 0.2;
pub const DEEP_CONTENT_WEIGHT: f64 = 10.0;
pub const DEFAULT_ENERGY_WEIGHT: f64 = 1.0;

impl LossSpec {
    /// Voice-conversion weighting restricted to the layers `spec` has:
    /// Gram terms on C0–C5 (1e5), activation terms on C6–C9 (0.2) and the
    /// fully connected layers (10), plus the energy penalty.
    pub fn conversion_defaults(spec: &NetworkSpec) -> Self {
        let mut terms = Vec::new();
        for l in &spec.layers {
            let term = match (l.kind, l.name.as_str()) {
                (LayerKind::Conv, "C0" | "C1" | "C2" | "C3" | "C4" | "C5") => (Role::Style, STYLE_WEIGHT),
                (LayerKind::Conv, _) => (Role::Content, MID_CONTENT_WEIGHT),
                (LayerKind::FullyConnected, _) => (Role::Content, DEEP_CONTENT_WEIGHT),
                (LayerKind::Output, _) => continue,
            };
            terms.push(LossTerm {
                layer: l.name.clone(),
                role: term.0,
                weight: term.1,
            });
        }
        Self {
            terms,
            energy_weight: DEFAULT_ENERGY_WEIGHT,
        }
    }

    /// Style-only objective on the given layers.
    pub fn texture(layers: &[String]) -> Self {
        Self {
            terms: layers
                .iter()
                .map(|l| LossTerm {
                    layer: l.clone(),
                    role: Role::Style,
                    weight: STYLE_WEIGHT,
                })
                .collect(),
            energy_weight: 0.0,
        }
    }

    /// Content-only objective on one layer, weight 1.
    pub fn inversion(layer: &str, energy_weight: f64) -> Self {
        Self {
            terms: vec![LossTerm {
                layer: layer.to_string(),
                role: Role::Content,
                weight: 1.0,
            }],
            energy_weight,
        }
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.terms.iter().any(|t| t.role == role && t.weight > 0.0)
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.terms {
            spec.layer_index(&t.layer)?;
            if !seen.insert(t.layer.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "layer {} appears twice in the loss",
                    t.layer
                )));
            }
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "weight {} for layer {}",
                    t.weight, t.layer
                )));
            }
        }
        if !(self.energy_weight >= 0.0 && self.energy_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("energy weight {}", self.energy_weight)));
        }
        Ok(())
    }

    /// Index of the deepest layer any term needs.
    pub fn deepest_layer(&self, spec: &NetworkSpec) -> Result<Option<usize>> {
        let mut deepest = None;
        for t in &self.terms {
            let i = spec.layer_index(&t.layer)?;
            deepest = Some(deepest.map_or(i, |d: usize| d.max(i)));
        }
        Ok(deepest)
    }
}

/// Reference statistics the generated signal is matched against.
#[derive(Clone, Debug, Default)]
pub struct LossTargets {
    /// `T' × F' × D` activations per content layer
    pub content: Vec<(String, Tensor)>,
    pub style: Vec<(String, GramTensor)>,
    /// per-frame `E(t)` of the reference features
    pub energy: Option<Vec<f64>>,
}

impl LossTargets {
    fn content(&self, layer: &str) -> Result<&Tensor> {
        self.content
            .iter()
            .find(|(n, _)| n == layer)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidArgument(format!("no content target for layer {layer}")))
    }

    fn style(&self, layer: &str) -> Result<&GramTensor> {
        self.style
            .iter()
            .find(|(n, _)| n == layer)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidArgument(format!("no style target for layer {layer}")))
    }
}

/// Scalar nodes of a built objective.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    /// per term, in [`LossSpec`] order, already weighted
    pub terms: Vec<(String, Role, NodeId)>,
    pub energy: Option<NodeId>,
}

/// Records the objective. `activations` maps layer names to the activation
/// nodes of the generated signal; `energy` is the `[T]` frame-energy node.
pub fn graph_total_loss(
    g: &mut Graph,
    activations: &[(String, NodeId)],
    energy: Option<NodeId>,
    targets: &LossTargets,
    spec: &LossSpec,
) -> Result<LossNodes> {
    let mut parts = Vec::new();
    let mut terms = Vec::new();
    for term in &spec.terms {
        let node = activations
            .iter()
            .find(|(n, _)| *n == term.layer)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::UnknownLayer(term.layer.clone()))?;
        let shape = g.shape(node).to_vec();
        let t = shape[0];
        let width: usize = shape[1..].iter().product();
        let raw = match term.role {
            Role::Style => {
                let target = targets.style(&term.layer)?;
                if target.freq * target.filters != width {
                    return Err(Error::ShapeMismatch {
                        op: "total_loss",
                        detail: format!(
                            "style target for {} is {}x{}, activations {shape:?}",
                            term.layer, target.freq, target.filters
                        ),
                    });
                }
                let flat = g.reshape(node, &[t, width])?;
                let gram = g.gram(flat)?;
                let tgt = g.constant(target.matrix.clone());
                let d = g.squared_distance(gram, tgt)?;
                g.mul_scalar(d, term.weight / target.numel() as f64)?
            }
            Role::Content => {
                let target = targets.content(&term.layer)?;
                if target.len() != t * width || target.shape()[0] != t {
                    return Err(Error::ShapeMismatch {
                        op: "total_loss",
                        detail: format!(
                            "content target for {} is {:?}, activations {shape:?}",
                            term.layer,
                            target.shape()
                        ),
                    });
                }
                let tgt = g.constant(target.reshape(&shape)?);
                let d = g.squared_distance(node, tgt)?;
                g.mul_scalar(d, term.weight / (t * width) as f64)?
            }
        };
        terms.push((term.layer.clone(), term.role, raw));
        parts.push(raw);
    }
    let mut energy_node = None;
    if spec.energy_weight > 0.0 {
        let e = energy.ok_or_else(|| Error::InvalidArgument("energy penalty needs frame energies".into()))?;
        let reference = targets
            .energy
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("energy penalty needs reference frame energies".into()))?;
        let t = g.shape(e)[0];
        if reference.len() != t {
            return Err(Error::ShapeMismatch {
                op: "total_loss",
                detail: format!("{t} generated frames vs {} reference energies", reference.len()),
            });
        }
        let r = g.constant(Tensor::vector(reference.clone()));
        let d = g.squared_distance(e, r)?;
        let n = g.mul_scalar(d, spec.energy_weight / t as f64)?;
        energy_node = Some(n);
        parts.push(n);
    }
    let mut total = *parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("loss has no terms".into()))?;
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok(LossNodes {
        total,
        terms,
        energy: energy_node,
    })
}

/// Value of the objective for already computed activations and frame
/// energies.
pub fn total_loss(
    generated: &ActivationSet,
    frame_energies: Option<&[f64]>,
    targets: &LossTargets,
    spec: &LossSpec,
) -> Result<f64> {
    let mut g = Graph::new(Precision::High);
    let acts = generated
        .layers
        .iter()
        .map(|(n, t)| (n.clone(), g.constant(t.clone())))
        .collect::<Vec<_>>();
    let e = frame_energies.map(|e| g.constant(Tensor::vector(e.to_vec())));
    let nodes = graph_total_loss(&mut g, &acts, e, targets, spec)?;
    Ok(g.value(nodes.total).item())
}
