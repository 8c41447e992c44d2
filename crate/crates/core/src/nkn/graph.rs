//! Forward evaluation and reverse-mode differentiation of a kernel network.
//!
//! Every node holds a full kernel matrix. Complex adjoints treat the real and
//! imaginary planes as independent reals: for a node `Z` the adjoint is
//! `G = dL/dRe(Z) + i dL/dIm(Z)`, so a parameter `t` receives
//! `sum Re(conj(G) * dZ/dt)`.

use num_complex::Complex64;

use crate::error::{numeric, spec_err, NknError, Result};
use crate::matrix::KernelValueMatrix;
use crate::nkn::spec::{Activation, LayerSpec, NetworkSpec};
use crate::nkn::store::{NodeRef, ParameterStore};
use crate::points::Points;
use crate::primitives::{
    packed_len, primitive_gram, primitive_gram_grad, primitive_pairs, primitive_upper, primitive_upper_grad,
    sigmoid, softplus,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Gram { symmetric: bool },
    Pairs,
}

/// Result of a forward evaluation, optionally retaining every node for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    x: Points,
    y: Points,
    mode: Mode,
    nodes: Option<Vec<Vec<KernelValueMatrix>>>,
    output: KernelValueMatrix,
}

impl ForwardPass {
    pub fn output(&self) -> &KernelValueMatrix {
        &self.output
    }

    pub fn into_output(self) -> KernelValueMatrix {
        self.output
    }

    /// Retained values for stage `s` (0 = primitives, `l + 1` = output of layer `l`).
    /// Symmetric evaluations store each node as its packed upper triangle
    /// (`i <= j`, row by row) in a single column.
    pub fn node_values(&self, s: usize) -> Option<&[KernelValueMatrix]> {
        self.nodes.as_ref().and_then(|n| n.get(s)).map(|v| v.as_slice())
    }

    pub fn stage_count(&self) -> usize {
        self.nodes.as_ref().map_or(0, |n| n.len())
    }
}

/// Evaluates `k(X, Y)` and retains every node for backpropagation.
pub fn forward_matrix(
    spec: &NetworkSpec,
    store: &ParameterStore,
    x: &Points,
    y: &Points,
) -> Result<ForwardPass> {
    run(spec, store, x, y, Mode::Gram { symmetric: false }, true)
}

/// Evaluates `k(X, X)` exploiting symmetry, retaining every node.
pub fn forward_gram(spec: &NetworkSpec, store: &ParameterStore, x: &Points) -> Result<ForwardPass> {
    run(spec, store, x, x, Mode::Gram { symmetric: true }, true)
}

/// Output matrix `k(X, X)` without retaining intermediates.
pub fn kernel_gram(spec: &NetworkSpec, store: &ParameterStore, x: &Points) -> Result<KernelValueMatrix> {
    Ok(run(spec, store, x, x, Mode::Gram { symmetric: true }, false)?.output)
}

/// Output matrix `k(X, Y)` without retaining intermediates.
pub fn kernel_matrix(
    spec: &NetworkSpec,
    store: &ParameterStore,
    x: &Points,
    y: &Points,
) -> Result<KernelValueMatrix> {
    Ok(run(spec, store, x, y, Mode::Gram { symmetric: false }, false)?.output)
}

/// `k(x_i, x_i)` for every row.
pub fn kernel_diag(spec: &NetworkSpec, store: &ParameterStore, x: &Points) -> Result<Vec<f64>> {
    Ok(run(spec, store, x, x, Mode::Pairs, false)?.output.re)
}

fn check_inputs(spec: &NetworkSpec, x: &Points, y: &Points) -> Result<()> {
    if x.dim() != spec.input_dim || y.dim() != spec.input_dim {
        return Err(NknError::InvalidInput(format!(
            "network expects {}-dimensional inputs, got {} and {}",
            spec.input_dim,
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

fn run(
    spec: &NetworkSpec,
    store: &ParameterStore,
    x: &Points,
    y: &Points,
    mode: Mode,
    retain: bool,
) -> Result<ForwardPass> {
    check_inputs(spec, x, y)?;
    let widths = spec.widths()?;
    if *widths.last().expect("nonempty") != 1 {
        return Err(spec_err("final layer width must be 1"));
    }

    let mut cur: Vec<KernelValueMatrix> = Vec::with_capacity(spec.primitives.len());
    for (i, p) in spec.primitives.iter().enumerate() {
        let raw = store.slice(NodeRef::Primitive(i));
        let m = match mode {
            Mode::Gram { symmetric: true } => primitive_upper(&p.kind, raw, x)?,
            Mode::Gram { symmetric: false } => primitive_gram(&p.kind, raw, x, y, false)?,
            Mode::Pairs => primitive_pairs(&p.kind, raw, x, y)?,
        };
        cur.push(m);
    }
    check_finite(&cur, "primitive")?;

    let mut nodes = retain.then(Vec::new);
    for (l, layer) in spec.layers.iter().enumerate() {
        let next = apply_layer(layer, widths[l], store, l, &cur)?;
        check_finite(&next, &format!("layer {l}"))?;
        let prev = std::mem::replace(&mut cur, next);
        if let Some(n) = nodes.as_mut() {
            n.push(prev);
        }
    }
    let mut output = match mode {
        Mode::Gram { symmetric: true } => unpack(&cur[0], x.len()),
        _ => cur[0].clone(),
    };
    if let Some(n) = nodes.as_mut() {
        n.push(cur);
    }
    if spec.output_take_real {
        output = output.into_real();
    }
    Ok(ForwardPass { x: x.clone(), y: y.clone(), mode, nodes, output })
}

/// Full conjugate-symmetric matrix from its packed upper triangle.
fn unpack(m: &KernelValueMatrix, n: usize) -> KernelValueMatrix {
    let mut out = KernelValueMatrix::zeros(n, n, !m.is_real(), true);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            let v = m.get(k, 0);
            out.set(i, j, v);
            out.set(j, i, v.conj());
            k += 1;
        }
    }
    out
}

/// Packed adjoint of the upper triangle: `G_ii` and `G_ij + conj(G_ji)` for `i < j`.
fn fold_upper(g: &KernelValueMatrix) -> KernelValueMatrix {
    let n = g.rows();
    let mut out = KernelValueMatrix::zeros(packed_len(n), 1, !g.is_real(), false);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            let v = if i == j { g.get(i, i) } else { g.get(i, j) + g.get(j, i).conj() };
            out.set(k, 0, v);
            k += 1;
        }
    }
    out
}

fn check_finite(stage: &[KernelValueMatrix], what: &str) -> Result<()> {
    for (u, m) in stage.iter().enumerate() {
        if let Some(k) = m.first_non_finite() {
            return Err(numeric(format!(
                "non-finite kernel value at {what} unit {u} (entry {}, {})",
                k / m.cols().max(1),
                k % m.cols().max(1)
            )));
        }
    }
    Ok(())
}

fn apply_layer(
    layer: &LayerSpec,
    w_in: usize,
    store: &ParameterStore,
    l: usize,
    inputs: &[KernelValueMatrix],
) -> Result<Vec<KernelValueMatrix>> {
    let (rows, cols, sym) = (inputs[0].rows(), inputs[0].cols(), inputs[0].symmetric);
    match layer {
        LayerSpec::Linear(lin) => {
            let raw = store.slice(NodeRef::Layer(l));
            let conns = lin.connections(w_in);
            let mut complex = vec![false; lin.out];
            for &(u, s, _) in &conns {
                complex[u] |= s < w_in && !inputs[s].is_real();
            }
            let mut out: Vec<KernelValueMatrix> =
                complex.iter().map(|&c| KernelValueMatrix::zeros(rows, cols, c, sym)).collect();
            let w: Vec<f64> = raw.iter().map(|&r| softplus(r)).collect();
            for r in blocks(rows * cols) {
                for &(u, s, k) in &conns {
                    if s == w_in {
                        out[u].re[r.clone()].iter_mut().for_each(|v| *v += w[k]);
                    } else {
                        out[u].axpy_range(w[k], &inputs[s], r.clone());
                    }
                }
            }
            Ok(out)
        }
        LayerSpec::Product { arity } => Ok(inputs
            .chunks(*arity)
            .map(|group| {
                let mut acc = group[0].clone();
                for m in &group[1..] {
                    acc.mul_assign_elementwise(m);
                }
                acc
            })
            .collect()),
        LayerSpec::Activation { activation } => {
            Ok(inputs.iter().map(|m| map_entries(m, |z| activate(activation, z))).collect())
        }
    }
}

/// Flat entry ranges small enough to keep every operand in cache.
fn blocks(len: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    const BLOCK: usize = 2048;
    (0..len).step_by(BLOCK).map(move |s| s..(s + BLOCK).min(len))
}

fn activate(a: &Activation, z: Complex64) -> Complex64 {
    match a {
        Activation::Identity => z,
        Activation::Exp => z.exp(),
        Activation::Poly { coeffs } => {
            coeffs.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
        }
    }
}

fn activate_deriv(a: &Activation, z: Complex64) -> Complex64 {
    match a {
        Activation::Identity => Complex64::new(1.0, 0.0),
        Activation::Exp => z.exp(),
        Activation::Poly { coeffs } => coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, (k, &c)| acc * z + c * k as f64),
    }
}

fn map_entries(m: &KernelValueMatrix, f: impl Fn(Complex64) -> Complex64) -> KernelValueMatrix {
    let mut out = KernelValueMatrix::zeros(m.rows(), m.cols(), !m.is_real(), m.symmetric);
    match m.im.as_ref() {
        None => {
            for k in 0..m.len() {
                out.re[k] = f(Complex64::new(m.re[k], 0.0)).re;
            }
        }
        Some(im) => {
            let oim = out.im.as_mut().expect("complex");
            for k in 0..m.len() {
                let v = f(Complex64::new(m.re[k], im[k]));
                out.re[k] = v.re;
                oim[k] = v.im;
            }
        }
    }
    out
}

/// Drops the imaginary adjoint of a structurally real node.
fn match_realness(mut g: KernelValueMatrix, like: &KernelValueMatrix) -> KernelValueMatrix {
    if like.is_real() {
        g.im = None;
    }
    g
}

/// Gradient of `sum_ij adjoint_ij * Re(k(X, Y))_ij` with respect to every
/// entry of the parameter store. The noise slot receives 0.
pub fn backward(
    spec: &NetworkSpec,
    store: &ParameterStore,
    pass: &ForwardPass,
    adjoint: &KernelValueMatrix,
) -> Result<Vec<f64>> {
    let nodes = pass
        .nodes
        .as_ref()
        .ok_or_else(|| NknError::State("forward pass did not retain node values".into()))?;
    let symmetric = match pass.mode {
        Mode::Gram { symmetric } => symmetric,
        Mode::Pairs => return Err(NknError::State("paired evaluations cannot be differentiated".into())),
    };
    let out = &pass.output;
    if adjoint.rows() != out.rows() || adjoint.cols() != out.cols() {
        return Err(NknError::InvalidInput(format!(
            "adjoint is {}x{}, output is {}x{}",
            adjoint.rows(),
            adjoint.cols(),
            out.rows(),
            out.cols()
        )));
    }
    let widths = spec.widths()?;
    let mut grad = vec![0.0; store.param_count()];
    let real_adjoint = adjoint.clone().into_real();
    let mut g: Vec<KernelValueMatrix> =
        vec![if symmetric { fold_upper(&real_adjoint) } else { real_adjoint }];

    for (l, layer) in spec.layers.iter().enumerate().rev() {
        let inputs = &nodes[l];
        let w_in = widths[l];
        let g_in: Vec<KernelValueMatrix> = match layer {
            LayerSpec::Linear(lin) => {
                let seg = store.segment(NodeRef::Layer(l)).expect("linear layer segment");
                let raw = &store.flat[seg.offset..seg.offset + seg.len];
                let conns = lin.connections(w_in);
                let mut g_in: Vec<KernelValueMatrix> = inputs
                    .iter()
                    .map(|m| KernelValueMatrix::zeros(m.rows(), m.cols(), false, m.symmetric))
                    .collect();
                for &(u, s, _) in &conns {
                    if s < w_in && !g[u].is_real() {
                        g_in[s].ensure_complex();
                    }
                }
                let w: Vec<f64> = raw.iter().map(|&r| softplus(r)).collect();
                let mut dw = vec![0.0; raw.len()];
                for r in blocks(g[0].len()) {
                    for &(u, s, k) in &conns {
                        if s == w_in {
                            dw[k] += g[u].re[r.clone()].iter().sum::<f64>();
                        } else {
                            dw[k] += g[u].real_inner_range(&inputs[s], r.clone());
                            g_in[s].axpy_range(w[k], &g[u], r.clone());
                        }
                    }
                }
                for (k, d) in dw.into_iter().enumerate() {
                    grad[seg.offset + k] += sigmoid(raw[k]) * d;
                }
                g_in
            }
            LayerSpec::Product { arity } => {
                let mut g_in = Vec::with_capacity(inputs.len());
                for (j, group) in inputs.chunks(*arity).enumerate() {
                    for t in 0..*arity {
                        let mut acc = g[j].clone();
                        for (o, m) in group.iter().enumerate() {
                            if o != t {
                                acc.mul_assign_elementwise(&conj(m));
                            }
                        }
                        g_in.push(acc);
                    }
                }
                g_in
            }
            LayerSpec::Activation { activation } => inputs
                .iter()
                .zip(&g)
                .map(|(z, gu)| {
                    let mut d = map_entries(z, |v| activate_deriv(activation, v).conj());
                    d.mul_assign_elementwise(gu);
                    d
                })
                .collect(),
        };
        g = g_in.into_iter().zip(inputs).map(|(gi, m)| match_realness(gi, m)).collect();
    }

    for (i, p) in spec.primitives.iter().enumerate() {
        let seg = store.segment(NodeRef::Primitive(i)).expect("primitive segment");
        let raw = &store.flat[seg.offset..seg.offset + seg.len];
        let out = &mut grad[seg.offset..seg.offset + seg.len];
        if symmetric {
            primitive_upper_grad(&p.kind, raw, &pass.x, &g[i], out)?;
        } else {
            primitive_gram_grad(&p.kind, raw, &pass.x, &pass.y, false, &g[i], out)?;
        }
    }
    Ok(grad)
}

fn conj(m: &KernelValueMatrix) -> KernelValueMatrix {
    let mut c = m.clone();
    if let Some(im) = c.im.as_mut() {
        for v in im.iter_mut() {
            *v = -*v;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nkn::spec::{LinearSpec, PrimitiveSlot};
    use crate::primitives::{eval_primitive, softplus_inv, Hyper, PrimitiveKind, PrimitiveTag};

    fn slot(tag: PrimitiveTag, h: Hyper, d: usize) -> PrimitiveSlot {
        let kind = PrimitiveKind::new(tag);
        let init = kind.encode(&h, d).unwrap();
        PrimitiveSlot { kind, init }
    }

    fn unit_linear(out: usize, in_width: usize) -> LayerSpec {
        LayerSpec::Linear(LinearSpec {
            out,
            bias: false,
            edges: None,
            init: vec![softplus_inv(1.0); out * in_width],
        })
    }

    fn pts(rows: &[[f64; 2]]) -> Points {
        Points::from_rows(rows).unwrap()
    }

    #[test]
    fn constant_propagates_through_unit_linear() {
        let spec = NetworkSpec::new(2, vec![slot(PrimitiveTag::Const, Hyper::variance(3.0), 2)], vec![unit_linear(1, 1)]);
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let x = pts(&[[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]);
        let k = kernel_matrix(&spec, &store, &x, &x).unwrap();
        assert!(k.re.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn product_of_unit_constants_is_one() {
        let c = slot(PrimitiveTag::Const, Hyper::variance(1.0), 2);
        let spec = NetworkSpec::new(2, vec![c.clone(), c], vec![LayerSpec::Product { arity: 2 }]);
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let x = pts(&[[0.0, 1.0], [2.0, -1.0]]);
        let k = kernel_matrix(&spec, &store, &x, &x).unwrap();
        assert!(k.re.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn diag_matches_gram_diagonal() {
        let spec = NetworkSpec::new(
            2,
            vec![
                slot(PrimitiveTag::Rbf, Hyper::rbf(1.3, 0.7), 2),
                slot(PrimitiveTag::Lin, Hyper::variance(0.4), 2),
            ],
            vec![unit_linear(1, 2)],
        );
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let x = pts(&[[0.0, 1.0], [2.0, -1.0], [0.3, 0.9]]);
        let k = kernel_matrix(&spec, &store, &x, &x).unwrap();
        let diag = kernel_diag(&spec, &store, &x).unwrap();
        for i in 0..3 {
            assert!((k.get(i, i).re - diag[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let spec = NetworkSpec::new(2, vec![slot(PrimitiveTag::Rbf, Hyper::rbf(1.0, 1.0), 2)], vec![unit_linear(1, 1)]);
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let x = pts(&[[0.0, 1.0], [2.0, -1.0]]);
        let pass = forward_gram(&spec, &store, &x).unwrap();
        let g = backward(&spec, &store, &pass, &KernelValueMatrix::zeros(2, 2, false, true)).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_requires_retained_nodes() {
        let spec = NetworkSpec::new(2, vec![slot(PrimitiveTag::Rbf, Hyper::rbf(1.0, 1.0), 2)], vec![]);
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let x = pts(&[[0.0, 1.0]]);
        let pass = run(&spec, &store, &x, &x, Mode::Gram { symmetric: true }, false).unwrap();
        let err = backward(&spec, &store, &pass, &KernelValueMatrix::zeros(1, 1, false, true)).unwrap_err();
        assert!(matches!(err, NknError::State(_)));
    }

    #[test]
    fn trace_gradient_matches_central_differences() {
        let spec = NetworkSpec::new(2, vec![slot(PrimitiveTag::Rbf, Hyper::rbf(0.8, 1.1), 2)], vec![unit_linear(1, 1)]);
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let x = pts(&[[0.0, 1.0], [2.0, -1.0], [0.3, 0.9], [1.0, 1.0], [-0.5, 0.2]]);
        let pass = forward_gram(&spec, &store, &x).unwrap();
        let mut eye = KernelValueMatrix::zeros(5, 5, false, true);
        for i in 0..5 {
            eye.set(i, i, Complex64::new(1.0, 0.0));
        }
        // Off-diagonal weights exercise more than the variance path.
        eye.set(0, 1, Complex64::new(0.5, 0.0));
        eye.set(1, 0, Complex64::new(0.5, 0.0));
        let g = backward(&spec, &store, &pass, &eye).unwrap();
        let objective = |s: &ParameterStore| {
            let k = kernel_matrix(&spec, s, &x, &x).unwrap();
            k.real_inner(&eye)
        };
        for p in 0..store.param_count() - 1 {
            let h = 1e-5;
            let mut a = store.clone();
            a.flat[p] += h;
            let mut b = store.clone();
            b.flat[p] -= h;
            let fd = (objective(&a) - objective(&b)) / (2.0 * h);
            assert!((fd - g[p]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {p}: {fd} vs {}", g[p]);
        }
    }

    #[test]
    fn single_pair_matches_scalar_recursion() {
        let prims = vec![
            slot(PrimitiveTag::Rbf, Hyper::rbf(1.0, 0.9), 2),
            slot(PrimitiveTag::Per, Hyper::per(0.7, 1.2, 2.5), 2),
            slot(PrimitiveTag::Lin, Hyper::variance(0.3), 2),
            slot(PrimitiveTag::Rq, Hyper::rbf(1.4, 0.6), 2),
        ];
        let mut k = 0.0;
        let mut lin = |out: usize, w: usize| {
            let init = (0..out * (w + 1))
                .map(|_| {
                    k += 0.37;
                    (k as f64).sin()
                })
                .collect();
            LayerSpec::Linear(LinearSpec { out, bias: true, edges: None, init })
        };
        let layers = vec![
            lin(8, 4),
            LayerSpec::Product { arity: 2 },
            lin(4, 4),
            LayerSpec::Product { arity: 2 },
            lin(1, 2),
        ];
        let spec = NetworkSpec::new(2, prims, layers);
        let store = ParameterStore::from_spec(&spec, 0.0).unwrap();
        let (xa, ya) = ([0.3, -1.2], [1.1, 0.4]);
        let got = kernel_matrix(&spec, &store, &pts(&[xa]), &pts(&[ya])).unwrap().get(0, 0).re;

        let mut h: Vec<f64> = spec
            .primitives
            .iter()
            .map(|p| eval_primitive(&p.kind, &p.init, &xa, &ya).unwrap().re)
            .collect();
        for layer in &spec.layers {
            h = match layer {
                LayerSpec::Linear(l) => {
                    let cols = h.len() + 1;
                    (0..l.out)
                        .map(|u| {
                            let mut s = softplus(l.init[u * cols + h.len()]);
                            for (v, hv) in h.iter().enumerate() {
                                s += softplus(l.init[u * cols + v]) * hv;
                            }
                            s
                        })
                        .collect()
                }
                LayerSpec::Product { .. } => h.chunks(2).map(|c| c[0] * c[1]).collect(),
                LayerSpec::Activation { .. } => unreachable!(),
            };
        }
        assert!((got - h[0]).abs() < 1e-12 * h[0].abs().max(1.0));
    }
}
