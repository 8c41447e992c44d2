//! Named architectures with freshly initialized parameters.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nkn::spec::{LayerSpec, LinearSpec, NetworkSpec, PrimitiveSlot};
use crate::points::Points;
use crate::primitives::{softplus_inv, Hyper, PrimitiveKind, PrimitiveTag};

/// Architecture presets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `PER + LIN + RBF + CONST` with trainable mixing weights.
    Heuristic,
    /// 2 RQ, 2 RBF, 2 LIN into Linear8-Product4-Linear4-Product2-Linear1.
    Default6,
    /// 2 RBF, 2 PER, 2 LIN, 2 RQ into the same module stack (time-series net).
    Timeseries8,
    /// Spectral mixture `sum_q w_q RBF_q COS_q`.
    Sm(usize),
    /// One RBF per input dimension into the Default6 module stack.
    BoAdditive,
    /// A single RBF over all dimensions.
    Rbf,
    /// `RBF + RBF`.
    TwoRbf,
    /// Linear combination of RBFs over the given dimension groups.
    Oracle(Vec<Vec<usize>>),
}

impl Preset {
    pub fn name(&self) -> String {
        match self {
            Self::Heuristic => "heuristic".into(),
            Self::Default6 => "default6".into(),
            Self::Timeseries8 => "timeseries8".into(),
            Self::Sm(q) => format!("sm{q}"),
            Self::BoAdditive => "bo_additive".into(),
            Self::Rbf => "rbf".into(),
            Self::TwoRbf => "2rbf".into(),
            Self::Oracle(_) => "oracle".into(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Preset {
    type Err = crate::NknError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let parsed = match s.as_str() {
            "heuristic" => Self::Heuristic,
            "default6" | "nkn" => Self::Default6,
            "timeseries8" => Self::Timeseries8,
            "bo_additive" => Self::BoAdditive,
            "rbf" => Self::Rbf,
            "2rbf" => Self::TwoRbf,
            _ => {
                let q = s
                    .strip_prefix("sm(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("sm"))
                    .and_then(|q| q.parse::<usize>().ok())
                    .filter(|&q| q > 0);
                match q {
                    Some(q) => Self::Sm(q),
                    None => return Err(invalid(format!("unknown preset {s:?}"))),
                }
            }
        };
        Ok(parsed)
    }
}

/// Data summaries used to initialize primitive hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitContext {
    pub d: usize,
    /// Median pairwise Euclidean distance of the (standardized) inputs.
    pub median_dist: f64,
    /// Per-dimension extent `max - min`.
    pub span: Vec<f64>,
    /// Use one shared lengthscale per primitive instead of one per dimension.
    pub shared_lengthscale: bool,
    pub seed: u64,
}

impl InitContext {
    pub fn from_points(x: &Points, seed: u64) -> Self {
        let d = x.dim();
        let n = x.len();
        let mut dists = Vec::new();
        // Deterministic subsample of at most ~20k pairs.
        let stride = (n * n.saturating_sub(1) / 2 / 20_000).max(1);
        let mut c = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                if c % stride == 0 {
                    let r = x.row(i);
                    let s = x.row(j);
                    dists.push(r.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
                }
                c += 1;
            }
        }
        dists.retain(|v| *v > 0.0);
        dists.sort_by(|a, b| a.total_cmp(b));
        let median_dist = if dists.is_empty() { 1.0 } else { dists[dists.len() / 2] };
        let span = (0..d)
            .map(|j| {
                let col = x.column(j);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    hi - lo
                } else {
                    1.0
                }
            })
            .collect();
        Self { d, median_dist, span, shared_lengthscale: false, seed }
    }

    /// Context without data: unit distances.
    pub fn unit(d: usize, seed: u64) -> Self {
        Self { d, median_dist: 1.0, span: vec![1.0; d], shared_lengthscale: false, seed }
    }

    fn mean_span(&self) -> f64 {
        self.span.iter().sum::<f64>() / self.span.len().max(1) as f64
    }
}

struct Init<'a> {
    ctx: &'a InitContext,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    /// `exp(U(-a, a))` multiplicative jitter.
    fn jitter(&mut self, a: f64) -> f64 {
        (self.rng.random_range(-a..a)).exp()
    }

    fn kind(&self, tag: PrimitiveTag) -> PrimitiveKind {
        let k = PrimitiveKind::new(tag);
        if self.ctx.shared_lengthscale {
            k.shared_lengthscale()
        } else {
            k
        }
    }

    /// `copy` of `copies` instances of `tag`, optionally restricted to `dims`.
    fn slot(
        &mut self,
        tag: PrimitiveTag,
        copy: usize,
        copies: usize,
        dims: Option<Vec<usize>>,
    ) -> Result<PrimitiveSlot> {
        let mut kind = self.kind(tag);
        let mut md = self.ctx.median_dist;
        let mut span = self.ctx.mean_span();
        if let Some(dims) = dims {
            md = dims.iter().map(|&j| self.ctx.span[j] * self.ctx.span[j]).sum::<f64>().sqrt() / 2.0;
            span = dims.iter().map(|&j| self.ctx.span[j]).sum::<f64>() / dims.len() as f64;
            kind = kind.on_dims(dims);
        }
        let d = self.ctx.d;
        let nd = kind.active_dims(d);
        // Spread copies geometrically around the reference scale.
        let spread = 2f64.powf(copy as f64 - (copies as f64 - 1.0) / 2.0);
        let h = match tag {
            PrimitiveTag::Rbf | PrimitiveTag::Rq => {
                Hyper::rbf(1.0, md * spread * self.jitter(0.2))
            }
            PrimitiveTag::Per => {
                let frac = if copies > 1 { copy as f64 / (copies as f64 - 1.0) } else { 0.5 };
                let period = span / 20.0 * 20f64.powf(frac) * self.jitter(0.1);
                Hyper::per(1.0, self.jitter(0.2), period)
            }
            PrimitiveTag::Lin => Hyper::variance(1.0 / d as f64),
            PrimitiveTag::Const => Hyper::variance(1.0),
            PrimitiveTag::Wn => Hyper::variance(0.1),
            PrimitiveTag::Cos | PrimitiveTag::Cexp => {
                let mu = 2.0 * std::f64::consts::PI * (copy as f64 + 1.0) / span;
                Hyper::frequencies(1.0, vec![mu; nd])
            }
        };
        let init = kind.encode(&h, d)?;
        Ok(PrimitiveSlot { kind, init })
    }

    /// Dense linear layer with `softplus(A) ~ 1/fan_in` and +-20% log-jitter.
    fn linear(&mut self, in_width: usize, out: usize, bias: bool) -> LayerSpec {
        let fan_in = in_width + usize::from(bias);
        let init = (0..out * fan_in)
            .map(|_| softplus_inv(self.jitter(0.2) / fan_in as f64))
            .collect();
        LayerSpec::Linear(LinearSpec { out, bias, edges: None, init })
    }

    /// Linear8-Product4-Linear4-Product2-Linear1 over `b` primitives.
    fn module_stack(&mut self, b: usize) -> Vec<LayerSpec> {
        vec![
            self.linear(b, 8, true),
            LayerSpec::Product { arity: 2 },
            self.linear(4, 4, true),
            LayerSpec::Product { arity: 2 },
            self.linear(2, 1, true),
        ]
    }
}

/// Builds the named architecture for the data summarized by `ctx`.
pub fn preset(p: &Preset, ctx: &InitContext) -> Result<NetworkSpec> {
    if ctx.d == 0 {
        return Err(invalid("inputs must have at least one dimension"));
    }
    let mut it = Init { ctx, rng: ChaCha8Rng::seed_from_u64(ctx.seed) };
    let d = ctx.d;
    use PrimitiveTag::*;
    let spec = match p {
        Preset::Heuristic => {
            let prims = vec![
                it.slot(Per, 0, 1, None)?,
                it.slot(Lin, 0, 1, None)?,
                it.slot(Rbf, 0, 1, None)?,
                it.slot(Const, 0, 1, None)?,
            ];
            let layers = vec![it.linear(4, 1, false)];
            NetworkSpec::new(d, prims, layers)
        }
        Preset::Default6 => {
            let mut prims = Vec::new();
            for tag in [Rq, Rbf, Lin] {
                for c in 0..2 {
                    prims.push(it.slot(tag, c, 2, None)?);
                }
            }
            let layers = it.module_stack(prims.len());
            NetworkSpec::new(d, prims, layers)
        }
        Preset::Timeseries8 => {
            let mut prims = Vec::new();
            for tag in [Rbf, Per, Lin, Rq] {
                for c in 0..2 {
                    prims.push(it.slot(tag, c, 2, None)?);
                }
            }
            let layers = it.module_stack(prims.len());
            NetworkSpec::new(d, prims, layers)
        }
        Preset::Sm(q) => {
            let mut prims = Vec::new();
            for c in 0..*q {
                prims.push(it.slot(Rbf, 1, 3, None)?);
                prims.push(it.slot(Cos, c, *q, None)?);
            }
            let layers = vec![LayerSpec::Product { arity: 2 }, it.linear(*q, 1, false)];
            NetworkSpec::new(d, prims, layers)
        }
        Preset::BoAdditive => {
            let prims = (0..d)
                .map(|j| it.slot(Rbf, 0, 1, Some(vec![j])))
                .collect::<Result<Vec<_>>>()?;
            let layers = it.module_stack(prims.len());
            NetworkSpec::new(d, prims, layers)
        }
        Preset::Rbf => NetworkSpec::new(d, vec![it.slot(Rbf, 0, 1, None)?], vec![]),
        Preset::TwoRbf => {
            let prims = vec![it.slot(Rbf, 0, 2, None)?, it.slot(Rbf, 1, 2, None)?];
            let layers = vec![it.linear(2, 1, false)];
            NetworkSpec::new(d, prims, layers)
        }
        Preset::Oracle(groups) => {
            if groups.is_empty() {
                return Err(invalid("oracle preset needs at least one group"));
            }
            let prims = groups
                .iter()
                .map(|g| it.slot(Rbf, 0, 1, Some(g.clone())))
                .collect::<Result<Vec<_>>>()?;
            let n = prims.len();
            let layers = if n > 1 { vec![it.linear(n, 1, false)] } else { vec![] };
            NetworkSpec::new(d, prims, layers)
        }
    };
    spec.validate()?;
    Ok(spec)
}
