//! Positive-weighted polynomials of primitive kernels and their compilation
//! into fixed-width networks.
//!
//! The compiled network keeps a state of `B + 3` units between modules:
//! the `B` primitives, an accumulator holding the terms added so far, a
//! running product for the term under construction, and one scratch unit
//! used for repeated squaring. Every Linear layer emits the state twice as
//! wide, pairing each unit with the value it should be multiplied by (the
//! constant 1 comes from a bias edge), so the following arity-2 Product
//! layer advances the state by one step. Width never exceeds `2B + 6`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{spec_err, Result};
use crate::nkn::spec::{LayerSpec, LinearSpec, NetworkSpec, PrimitiveSlot};
use crate::primitives::{eval_primitive, softplus_inv, Hyper, PrimitiveKind, PrimitiveTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwpTerm {
    pub weight: f64,
    /// Power of each primitive kernel in this term.
    pub exponents: Vec<u32>,
}

impl PwpTerm {
    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }
}

/// `k = sum_t w_t prod_j k_j^{p_tj}` with nonnegative weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwpExpr {
    pub terms: Vec<PwpTerm>,
}

impl PwpExpr {
    pub fn degree(&self) -> u32 {
        self.terms.iter().map(PwpTerm::degree).max().unwrap_or(0)
    }

    /// Direct evaluation from primitive values `k_j`.
    pub fn evaluate(&self, prims: &[Complex64]) -> Complex64 {
        self.terms
            .iter()
            .map(|t| {
                t.exponents
                    .iter()
                    .zip(prims)
                    .fold(Complex64::new(t.weight, 0.0), |acc, (&p, k)| acc * k.powu(p))
            })
            .sum()
    }

    /// Direct evaluation at an input pair, using the primitives' initial values.
    pub fn evaluate_at(&self, slots: &[PrimitiveSlot], x: &[f64], y: &[f64]) -> Result<Complex64> {
        let prims = slots
            .iter()
            .map(|s| eval_primitive(&s.kind, &s.init, x, y))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.evaluate(&prims))
    }

    /// Parses `w * k0^2 * k1 + k2` style text over `b` primitives (default:
    /// one past the largest index used).
    pub fn parse(s: &str, b: Option<usize>) -> Result<Self> {
        let mut raw: Vec<(f64, Vec<(usize, u32)>)> = Vec::new();
        for term in s.split('+') {
            let term = term.trim();
            if term.is_empty() {
                return Err(spec_err(format!("empty term in {s:?}")));
            }
            let mut weight = 1.0;
            let mut factors = Vec::new();
            for f in term.split('*').map(str::trim) {
                if let Some(rest) = f.strip_prefix('k') {
                    let (idx, pow) = match rest.split_once('^') {
                        Some((i, p)) => (i, p.trim().parse::<u32>().ok()),
                        None => (rest, Some(1)),
                    };
                    match (idx.trim().parse::<usize>(), pow) {
                        (Ok(i), Some(p)) => factors.push((i, p)),
                        _ => return Err(spec_err(format!("cannot parse factor {f:?}"))),
                    }
                } else {
                    weight *= f.parse::<f64>().map_err(|_| spec_err(format!("cannot parse factor {f:?}")))?;
                }
            }
            raw.push((weight, factors));
        }
        let used = raw.iter().flat_map(|(_, f)| f.iter().map(|(i, _)| i + 1)).max().unwrap_or(0);
        let b = b.unwrap_or(used.max(1));
        if used > b {
            return Err(spec_err(format!("expression uses k{} but only {b} primitives exist", used - 1)));
        }
        let terms = raw
            .into_iter()
            .map(|(weight, factors)| {
                let mut exponents = vec![0u32; b];
                for (i, p) in factors {
                    exponents[i] += p;
                }
                PwpTerm { weight, exponents }
            })
            .collect();
        let e = Self { terms };
        e.validate(b)?;
        Ok(e)
    }

    fn validate(&self, b: usize) -> Result<()> {
        if self.terms.is_empty() {
            return Err(spec_err("polynomial has no terms"));
        }
        for (t, term) in self.terms.iter().enumerate() {
            if !(term.weight >= 0.0) || !term.weight.is_finite() {
                return Err(spec_err(format!("term {t} has weight {}", term.weight)));
            }
            if term.exponents.len() != b {
                return Err(spec_err(format!(
                    "term {t} has {} exponents for {b} primitives",
                    term.exponents.len()
                )));
            }
        }
        Ok(())
    }
}

/// Unit indices within the compiled state.
#[derive(Clone, Copy)]
struct Layout {
    b: usize,
}

impl Layout {
    fn width(self) -> usize {
        self.b + 3
    }
    fn acc(self) -> usize {
        self.b
    }
    fn run(self) -> usize {
        self.b + 1
    }
    fn scratch(self) -> usize {
        self.b + 2
    }
}

/// Where each state unit's pair of factors comes from for one module.
#[derive(Clone)]
enum Src {
    /// Bias edge with the given weight.
    Const(f64),
    /// Sum of weighted state (or primitive) units.
    Units(Vec<(usize, f64)>),
    Zero,
}

struct ModuleBuilder {
    lay: Layout,
    pairs: Vec<(Src, Src)>,
}

impl ModuleBuilder {
    /// Identity step: every unit is multiplied by 1.
    fn keep(lay: Layout) -> Self {
        let pairs = (0..lay.width()).map(|u| (Src::Units(vec![(u, 1.0)]), Src::Const(1.0))).collect();
        Self { lay, pairs }
    }

    fn set(&mut self, unit: usize, a: Src, b: Src) {
        self.pairs[unit] = (a, b);
    }

    fn into_layers(self, in_width: usize) -> [LayerSpec; 2] {
        let mut edges = Vec::new();
        let mut init = Vec::new();
        for (u, (a, b)) in self.pairs.into_iter().enumerate() {
            for (slot, src) in [(2 * u, a), (2 * u + 1, b)] {
                match src {
                    Src::Const(w) => {
                        if w > 0.0 {
                            edges.push((slot, in_width));
                            init.push(softplus_inv(w));
                        }
                    }
                    Src::Units(list) => {
                        for (s, w) in list {
                            if w > 0.0 {
                                edges.push((slot, s));
                                init.push(softplus_inv(w));
                            }
                        }
                    }
                    Src::Zero => {}
                }
            }
        }
        [
            LayerSpec::Linear(LinearSpec {
                out: 2 * self.lay.width(),
                bias: true,
                edges: Some(edges),
                init,
            }),
            LayerSpec::Product { arity: 2 },
        ]
    }
}

/// Compiles `pwp` over the given primitives into a network whose output
/// equals the polynomial at every input pair.
pub fn compile_pwp(pwp: &PwpExpr, primitives: &[PrimitiveSlot], input_dim: usize) -> Result<NetworkSpec> {
    let b = primitives.len();
    if b == 0 {
        return Err(spec_err("no primitives to compile against"));
    }
    pwp.validate(b)?;
    let lay = Layout { b };
    let s = lay.width();
    let mut layers: Vec<LayerSpec> = Vec::new();

    // Entry module reads primitives directly: state = [k_1..k_B, 0, 1, 1].
    {
        let mut m = ModuleBuilder::keep(lay);
        m.set(lay.acc(), Src::Zero, Src::Const(1.0));
        m.set(lay.run(), Src::Const(1.0), Src::Const(1.0));
        m.set(lay.scratch(), Src::Const(1.0), Src::Const(1.0));
        layers.extend(m.into_layers(b));
    }

    let mut push = |m: ModuleBuilder| layers.extend(m.into_layers(s));
    for term in &pwp.terms {
        for (j, &p) in term.exponents.iter().enumerate() {
            if p == 0 {
                continue;
            }
            if p == 1 {
                let mut m = ModuleBuilder::keep(lay);
                m.set(lay.run(), Src::Units(vec![(lay.run(), 1.0)]), Src::Units(vec![(j, 1.0)]));
                push(m);
                continue;
            }
            // scratch <- k_j, then square-and-multiply over the remaining bits.
            let mut m = ModuleBuilder::keep(lay);
            m.set(lay.scratch(), Src::Units(vec![(j, 1.0)]), Src::Const(1.0));
            push(m);
            let bits = 32 - p.leading_zeros();
            for bit in (0..bits - 1).rev() {
                let mut sq = ModuleBuilder::keep(lay);
                let sc = Src::Units(vec![(lay.scratch(), 1.0)]);
                sq.set(lay.scratch(), sc.clone(), sc);
                push(sq);
                if (p >> bit) & 1 == 1 {
                    let mut mul = ModuleBuilder::keep(lay);
                    mul.set(
                        lay.scratch(),
                        Src::Units(vec![(lay.scratch(), 1.0)]),
                        Src::Units(vec![(j, 1.0)]),
                    );
                    push(mul);
                }
            }
            let mut m = ModuleBuilder::keep(lay);
            m.set(
                lay.run(),
                Src::Units(vec![(lay.run(), 1.0)]),
                Src::Units(vec![(lay.scratch(), 1.0)]),
            );
            push(m);
        }
        // acc <- acc + w * run, run <- 1.
        let mut m = ModuleBuilder::keep(lay);
        m.set(
            lay.acc(),
            Src::Units(vec![(lay.acc(), 1.0), (lay.run(), term.weight)]),
            Src::Const(1.0),
        );
        m.set(lay.run(), Src::Const(1.0), Src::Const(1.0));
        push(m);
    }

    layers.push(LayerSpec::Linear(LinearSpec {
        out: 1,
        bias: false,
        edges: Some(vec![(0, lay.acc())]),
        init: vec![softplus_inv(1.0)],
    }));

    let spec = NetworkSpec::new(input_dim, primitives.to_vec(), layers);
    spec.validate()?;
    Ok(spec)
}

/// Mixture order and dimensionality of the spectral-mixture target whose
/// real-valued NKN form needs one primitive per component but whose complex
/// form needs a single `exp(i 1^T tau)` primitive.
#[derive(Debug, Clone, Copy)]
pub struct Example1Target {
    pub n: u32,
    pub d: usize,
}

fn binom2(n: u32) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

impl Example1Target {
    /// `k*(tau) = sum_{t=1}^{n+1} C(n,2)^{2t} cos(4^t 1^T tau)`.
    pub fn eval(&self, tau: &[f64]) -> f64 {
        let s: f64 = tau.iter().sum();
        let c = binom2(self.n);
        (1..=self.n + 1)
            .map(|t| c.powi(2 * t as i32) * (4f64.powi(t as i32) * s).cos())
            .sum()
    }
}

/// The single complex primitive `exp(i 1^T tau)` and the polynomial over it
/// whose real part equals [`Example1Target::eval`].
pub fn example1_kernel(n: u32, d: usize) -> Result<(PwpExpr, PrimitiveSlot, Example1Target)> {
    if n == 0 {
        return Err(spec_err("mixture order must be at least 1"));
    }
    let kind = PrimitiveKind::new(PrimitiveTag::Cexp);
    let init = kind.encode(&Hyper::frequencies(1.0, vec![1.0; d]), d)?;
    let c = binom2(n);
    let terms = (1..=n + 1)
        .map(|t| PwpTerm { weight: c.powi(2 * t as i32), exponents: vec![4u32.pow(t)] })
        .collect();
    Ok((PwpExpr { terms }, PrimitiveSlot { kind, init }, Example1Target { n, d }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nkn::graph::kernel_matrix;
    use crate::nkn::store::ParameterStore;
    use crate::points::Points;

    fn slots() -> Vec<PrimitiveSlot> {
        [
            (PrimitiveTag::Rbf, Hyper::rbf(1.2, 0.8)),
            (PrimitiveTag::Per, Hyper::per(0.9, 1.1, 1.7)),
            (PrimitiveTag::Lin, Hyper::variance(0.5)),
        ]
        .into_iter()
        .map(|(tag, h)| {
            let kind = PrimitiveKind::new(tag);
            let init = kind.encode(&h, 1).unwrap();
            PrimitiveSlot { kind, init }
        })
        .collect()
    }

    fn network_value(spec: &NetworkSpec, x: f64, y: f64) -> f64 {
        let store = ParameterStore::from_spec(spec, 0.0).unwrap();
        kernel_matrix(spec, &store, &Points::from_scalars(&[x]), &Points::from_scalars(&[y]))
            .unwrap()
            .get(0, 0)
            .re
    }

    #[test]
    fn figure_term_point_three_k1_k2_squared() {
        let prims = slots();
        let pwp = PwpExpr { terms: vec![PwpTerm { weight: 0.3, exponents: vec![1, 2, 0] }] };
        let spec = compile_pwp(&pwp, &prims, 1).unwrap();
        assert!(spec.max_width().unwrap() <= 2 * 3 + 6);
        for (x, y) in [(0.1, 0.4), (-1.0, 2.0), (3.0, 3.0)] {
            let k1 = eval_primitive(&prims[0].kind, &prims[0].init, &[x], &[y]).unwrap().re;
            let k2 = eval_primitive(&prims[1].kind, &prims[1].init, &[x], &[y]).unwrap().re;
            let want = 0.3 * k1 * k2 * k2;
            assert!((network_value(&spec, x, y) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_term_identity() {
        let prims = slots();
        let pwp = PwpExpr { terms: vec![PwpTerm { weight: 1.0, exponents: vec![1, 0, 0] }] };
        let spec = compile_pwp(&pwp, &prims, 1).unwrap();
        let k1 = eval_primitive(&prims[0].kind, &prims[0].init, &[0.2], &[1.3]).unwrap().re;
        assert!((network_value(&spec, 0.2, 1.3) - k1).abs() < 1e-12);
    }

    #[test]
    fn text_form_parses() {
        let e = PwpExpr::parse("0.3 * k0 * k1^2 + k2", None).unwrap();
        assert_eq!(e.terms[0], PwpTerm { weight: 0.3, exponents: vec![1, 2, 0] });
        assert_eq!(e.terms[1], PwpTerm { weight: 1.0, exponents: vec![0, 0, 1] });
        assert!(PwpExpr::parse("k0 + ", None).is_err());
        assert!(PwpExpr::parse("k3", Some(2)).is_err());
        assert!(PwpExpr::parse("-1 * k0", None).is_err());
    }

    #[test]
    fn empty_polynomial_is_a_spec_error() {
        let err = compile_pwp(&PwpExpr { terms: vec![] }, &slots(), 1).unwrap_err();
        assert!(matches!(err, crate::NknError::Spec(_)));
    }

    #[test]
    fn example1_small_orders() {
        let (pwp, slot, target) = example1_kernel(1, 2).unwrap();
        let spec = compile_pwp(&pwp, std::slice::from_ref(&slot), 2).unwrap();
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let p = Points::from_rows(&[[0.0, 0.0]]).unwrap();
        assert_eq!(target.eval(&[0.0, 0.0]), 0.0);
        assert_eq!(kernel_matrix(&spec, &store, &p, &p).unwrap().get(0, 0).re, 0.0);

        let (pwp, slot, target) = example1_kernel(2, 2).unwrap();
        let spec = compile_pwp(&pwp, std::slice::from_ref(&slot), 2).unwrap();
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        assert_eq!(target.eval(&[0.0, 0.0]), 3.0);
        let k = kernel_matrix(&spec, &store, &p, &p).unwrap().get(0, 0).re;
        assert!((k - 3.0).abs() < 1e-12);
    }
}
