use serde::{Deserialize, Serialize};

use crate::error::{spec_err, Result};
use crate::primitives::PrimitiveKind;

pub const SPEC_SCHEMA: &str = "nkn-spec/1";

fn spec_schema() -> String {
    SPEC_SCHEMA.to_string()
}

/// A primitive kernel together with its initial raw parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSlot {
    #[serde(flatten)]
    pub kind: PrimitiveKind,
    pub init: Vec<f64>,
}

/// Elementwise activation applied to every unit of the previous layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Exp,
    /// `sum_k coeffs[k] * z^k` with nonnegative coefficients.
    Poly { coeffs: Vec<f64> },
}

/// Nonnegative linear combination `h_u = sum_v softplus(A_uv) h_v + softplus(b_u)`.
///
/// Dense layers store `A` row-major with one extra trailing column for the
/// bias when `bias` is set. Sparse layers list their edges as
/// `(output unit, source)`, where `source == input width` addresses the bias;
/// `init` then holds one raw value per edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub out: usize,
    #[serde(default)]
    pub bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
    pub init: Vec<f64>,
}

impl LinearSpec {
    pub fn param_count(&self, in_width: usize) -> usize {
        match &self.edges {
            Some(e) => e.len(),
            None => self.out * (in_width + usize::from(self.bias)),
        }
    }

    /// `(unit, source, raw index)` for every connection; `source == in_width` is the bias.
    pub fn connections(&self, in_width: usize) -> Vec<(usize, usize, usize)> {
        match &self.edges {
            Some(e) => e.iter().enumerate().map(|(k, &(u, s))| (u, s, k)).collect(),
            None => {
                let cols = in_width + usize::from(self.bias);
                let mut v = Vec::with_capacity(self.out * cols);
                for u in 0..self.out {
                    for s in 0..cols {
                        v.push((u, s, u * cols + s));
                    }
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear(LinearSpec),
    /// Unit `j` multiplies inputs `arity*j .. arity*j + arity - 1`.
    Product { arity: usize },
    Activation { activation: Activation },
}

/// Declarative description of a kernel network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default = "spec_schema")]
    pub schema: String,
    /// Dimensionality of the inputs the primitives see.
    pub input_dim: usize,
    pub primitives: Vec<PrimitiveSlot>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub output_take_real: bool,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, primitives: Vec<PrimitiveSlot>, layers: Vec<LayerSpec>) -> Self {
        let output_take_real = primitives.iter().any(|p| p.kind.is_complex());
        Self { schema: spec_schema(), input_dim, primitives, layers, output_take_real }
    }

    /// Output width of every stage; entry 0 is the primitive layer.
    pub fn widths(&self) -> Result<Vec<usize>> {
        let mut widths = vec![self.primitives.len()];
        let mut w = self.primitives.len();
        for (l, layer) in self.layers.iter().enumerate() {
            w = match layer {
                LayerSpec::Linear(lin) => lin.out,
                LayerSpec::Product { arity } => {
                    if *arity == 0 || w % arity != 0 {
                        return Err(spec_err(format!(
                            "layer {l}: product arity {arity} does not divide input width {w}"
                        )));
                    }
                    w / arity
                }
                LayerSpec::Activation { .. } => w,
            };
            widths.push(w);
        }
        Ok(widths)
    }

    /// Largest width anywhere in the network.
    pub fn max_width(&self) -> Result<usize> {
        Ok(self.widths()?.into_iter().max().unwrap_or(0))
    }

    /// Trainable kernel parameters (primitives plus linear weights), excluding noise.
    pub fn kernel_param_count(&self) -> Result<usize> {
        let widths = self.widths()?;
        let prim: usize = self.primitives.iter().map(|p| p.kind.param_count(self.input_dim)).sum();
        let lin: usize = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| match layer {
                LayerSpec::Linear(lin) => lin.param_count(widths[l]),
                _ => 0,
            })
            .sum();
        Ok(prim + lin)
    }

    /// Whether the final unit may carry an imaginary part before `output_take_real`.
    pub fn has_complex_primitives(&self) -> bool {
        self.primitives.iter().any(|p| p.kind.is_complex())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SPEC_SCHEMA {
            return Err(spec_err(format!("unsupported schema {:?}", self.schema)));
        }
        if self.primitives.is_empty() {
            return Err(spec_err("network has no primitives"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.kind
                .validate(self.input_dim)
                .map_err(|e| spec_err(format!("primitive {i}: {e}")))?;
            let want = p.kind.param_count(self.input_dim);
            if p.init.len() != want {
                return Err(spec_err(format!(
                    "primitive {i} ({}) has {} initial values, expected {want}",
                    p.kind.tag.name(),
                    p.init.len()
                )));
            }
        }
        let widths = self.widths()?;
        for (l, layer) in self.layers.iter().enumerate() {
            let w_in = widths[l];
            match layer {
                LayerSpec::Linear(lin) => {
                    if lin.out == 0 {
                        return Err(spec_err(format!("layer {l}: linear layer with zero outputs")));
                    }
                    if lin.init.len() != lin.param_count(w_in) {
                        return Err(spec_err(format!(
                            "layer {l}: {} raw weights, expected {}",
                            lin.init.len(),
                            lin.param_count(w_in)
                        )));
                    }
                    if let Some(edges) = &lin.edges {
                        for &(u, s) in edges {
                            let max_src = if lin.bias { w_in } else { w_in.saturating_sub(1) };
                            if u >= lin.out || s > max_src {
                                return Err(spec_err(format!(
                                    "layer {l}: edge ({u}, {s}) out of range"
                                )));
                            }
                        }
                    }
                }
                LayerSpec::Product { .. } => {}
                LayerSpec::Activation { activation } => {
                    if let Activation::Poly { coeffs } = activation {
                        if coeffs.is_empty() || coeffs.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
                            return Err(spec_err(format!(
                                "layer {l}: polynomial activation needs nonnegative coefficients"
                            )));
                        }
                    }
                }
            }
        }
        if *widths.last().expect("nonempty") != 1 {
            return Err(spec_err(format!(
                "final width is {}, expected 1",
                widths.last().expect("nonempty")
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}
