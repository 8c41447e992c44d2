use serde::{Deserialize, Serialize};

use crate::error::{spec_err, Result};
use crate::nkn::spec::{LayerSpec, NetworkSpec};

/// Owner of a slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRef {
    Primitive(usize),
    Layer(usize),
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub node: NodeRef,
    pub offset: usize,
    pub len: usize,
}

/// Flat vector of unconstrained parameters with a map from network elements
/// to their slices. The observation-noise raw value always comes last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    pub flat: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParameterStore {
    /// Store initialized from the spec's `init` values plus a noise raw value.
    pub fn from_spec(spec: &NetworkSpec, noise_raw: f64) -> Result<Self> {
        spec.validate()?;
        let mut flat = Vec::new();
        let mut layout = Vec::new();
        for (i, p) in spec.primitives.iter().enumerate() {
            layout.push(Segment { node: NodeRef::Primitive(i), offset: flat.len(), len: p.init.len() });
            flat.extend_from_slice(&p.init);
        }
        for (l, layer) in spec.layers.iter().enumerate() {
            if let LayerSpec::Linear(lin) = layer {
                layout.push(Segment { node: NodeRef::Layer(l), offset: flat.len(), len: lin.init.len() });
                flat.extend_from_slice(&lin.init);
            }
        }
        layout.push(Segment { node: NodeRef::Noise, offset: flat.len(), len: 1 });
        flat.push(noise_raw);
        Ok(Self { flat, layout })
    }

    /// Rebuilds the store for `spec` around an existing flat vector.
    pub fn with_values(spec: &NetworkSpec, flat: Vec<f64>) -> Result<Self> {
        let mut store = Self::from_spec(spec, 0.0)?;
        if flat.len() != store.flat.len() {
            return Err(spec_err(format!(
                "parameter vector has {} entries, spec needs {}",
                flat.len(),
                store.flat.len()
            )));
        }
        store.flat = flat;
        Ok(store)
    }

    /// Total number of trainable scalars, noise included.
    pub fn param_count(&self) -> usize {
        self.flat.len()
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, node: NodeRef) -> Option<Segment> {
        self.layout.iter().copied().find(|s| s.node == node)
    }

    pub fn slice(&self, node: NodeRef) -> &[f64] {
        let s = self.segment(node).expect("node owns a segment");
        &self.flat[s.offset..s.offset + s.len]
    }

    pub fn slice_mut(&mut self, node: NodeRef) -> &mut [f64] {
        let s = self.segment(node).expect("node owns a segment");
        &mut self.flat[s.offset..s.offset + s.len]
    }

    pub fn noise_raw(&self) -> f64 {
        *self.flat.last().expect("noise slot")
    }

    pub fn set_noise_raw(&mut self, v: f64) {
        *self.flat.last_mut().expect("noise slot") = v;
    }

    pub fn noise_index(&self) -> usize {
        self.flat.len() - 1
    }

    /// Copies the current values back into the spec's `init` fields.
    pub fn write_back(&self, spec: &mut NetworkSpec) {
        for (i, p) in spec.primitives.iter_mut().enumerate() {
            p.init = self.slice(NodeRef::Primitive(i)).to_vec();
        }
        let n_layers = spec.layers.len();
        for l in 0..n_layers {
            if let LayerSpec::Linear(lin) = &mut spec.layers[l] {
                lin.init = self.slice(NodeRef::Layer(l)).to_vec();
            }
        }
    }
}
