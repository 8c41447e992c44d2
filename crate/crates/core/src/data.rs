//! Datasets, train/test splits and synthetic generators.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NknError, Result};
use crate::gp::SpdFactor;
use crate::nkn::{kernel_matrix, LayerSpec, LinearSpec, NetworkSpec, ParameterStore, PrimitiveSlot};
use crate::points::Points;
use crate::primitives::{softplus_inv, Hyper, PrimitiveKind, PrimitiveTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub x: Points,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    /// Rows discarded during ingestion because they held missing values.
    pub dropped: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Points, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(invalid(format!("{} inputs but {} targets", x.len(), y.len())));
        }
        let feature_names = (0..x.dim()).map(|j| format!("x{j}")).collect();
        Ok(Self { name: name.into(), x, y, feature_names, dropped: 0 })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            x: self.x.select(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            dropped: 0,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = self.feature_names.clone();
        header.push("y".into());
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.x.rows().enumerate() {
            let rec: Vec<String> = row.iter().chain([&self.y[i]]).map(|v| format!("{v:?}")).collect();
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> NknError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => NknError::Io(io),
        other => NknError::Parse(format!("{other:?}")),
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.to_ascii_lowercase().as_str(), "" | "nan" | "na" | "?" | "null")
}

/// Reads a headed CSV whose last column is the target. Rows with missing
/// values are dropped and counted.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(NknError::Parse(format!(
            "{}: need at least one feature column and a target column",
            path.display()
        )));
    }
    let d = header.len() - 1;
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut dropped = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let mut row = Vec::with_capacity(d + 1);
        let mut missing = false;
        for (c, cell) in rec.iter().enumerate() {
            if is_missing(cell) {
                missing = true;
                row.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                NknError::Parse(format!(
                    "{}: row {}, column {} ({}): cannot parse {cell:?}",
                    path.display(),
                    r + 1,
                    c + 1,
                    header.get(c).map_or("?", String::as_str)
                ))
            })?;
            missing |= v.is_nan();
            row.push(v);
        }
        if row.len() != d + 1 {
            return Err(NknError::Parse(format!(
                "{}: row {} has {} cells, header has {}",
                path.display(),
                r + 1,
                row.len(),
                d + 1
            )));
        }
        if missing {
            dropped += 1;
            continue;
        }
        y.push(row[d]);
        data.extend_from_slice(&row[..d]);
    }
    if y.is_empty() {
        return Err(NknError::Parse(format!("{}: no data rows", path.display())));
    }
    let name = path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset {
        name,
        x: Points::new(y.len(), d, data)?,
        y,
        feature_names: header[..d].to_vec(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    Random { train_frac: f64, repeats: usize },
    Pca { tail_frac: f64 },
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::Random { train_frac: 0.9, repeats: 10 }
    }
}

/// Index sets of one train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled split with `round(train_frac * n)` training rows; both sides sorted.
pub fn random_split(n: usize, train_frac: f64, seed: u64) -> Result<Split> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(invalid(format!("train fraction {train_frac} outside (0, 1)")));
    }
    if n < 2 {
        return Err(invalid("splitting needs at least two rows"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Splits for every repeat of `spec`; repeat `r` of a random split uses seed `seed + r`.
pub fn make_splits(ds: &Dataset, spec: &SplitSpec, seed: u64) -> Result<Vec<Split>> {
    match spec {
        SplitSpec::Random { train_frac, repeats } => (0..*repeats as u64)
            .map(|r| random_split(ds.len(), *train_frac, seed.wrapping_add(r)))
            .collect(),
        SplitSpec::Pca { tail_frac } => Ok(vec![pca_split_frac(ds, *tail_frac)?]),
    }
}

/// Extreme `ceil(n/15)` rows on each side of the top principal component are
/// held out.
pub fn pca_split(ds: &Dataset) -> Result<Split> {
    pca_split_frac(ds, 1.0 / 15.0)
}

pub fn pca_split_frac(ds: &Dataset, tail_frac: f64) -> Result<Split> {
    let n = ds.len();
    if !(tail_frac > 0.0 && tail_frac < 0.5) {
        return Err(invalid(format!("tail fraction {tail_frac} outside (0, 0.5)")));
    }
    if (n as f64) * tail_frac < 1.0 || n < 3 {
        return Err(invalid(format!("PCA split needs at least {} rows, got {n}", (1.0 / tail_frac).ceil())));
    }
    let d = ds.dim();
    let means: Vec<f64> = (0..d).map(|j| ds.x.column(j).iter().sum::<f64>() / n as f64).collect();
    let xc = DMatrix::from_fn(n, d, |i, j| ds.x.row(i)[j] - means[j]);
    let cov = xc.transpose() * &xc / n as f64;
    let eig = SymmetricEigen::new(cov);
    let (k, top) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let scale = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if !(top > 1e-12 * scale.max(f64::MIN_POSITIVE)) || top <= 0.0 {
        return Err(NknError::Numeric("PCA split: inputs have rank 0 (all rows identical)".into()));
    }
    let mut dir: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
    // Orient so the largest-magnitude loading is positive.
    let lead = dir
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0f64), |b, (i, v)| if v.abs() > b.1.abs() { (i, v) } else { b });
    if lead.1 < 0.0 {
        dir.iter_mut().for_each(|v| *v = -*v);
    }
    let proj: Vec<f64> = (0..n).map(|i| (0..d).map(|j| xc[(i, j)] * dir[j]).sum()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    let tail = (n as f64 * tail_frac).ceil() as usize;
    let mut test: Vec<usize> = order[..tail].iter().chain(&order[n - tail..]).copied().collect();
    let mut train = order[tail..n - tail].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    #[serde(rename = "fig1_2d")]
    Fig12d,
    #[serde(rename = "gp_sample_1d")]
    GpSample1d,
    #[serde(rename = "neuron_toy")]
    NeuronToy,
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fig12d => "fig1_2d",
            Self::GpSample1d => "gp_sample_1d",
            Self::NeuronToy => "neuron_toy",
        })
    }
}

impl std::str::FromStr for SynthKind {
    type Err = NknError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig1_2d" => Ok(Self::Fig12d),
            "gp_sample_1d" => Ok(Self::GpSample1d),
            "neuron_toy" => Ok(Self::NeuronToy),
            _ => Err(invalid(format!("unknown synthetic dataset {s:?}"))),
        }
    }
}

/// Training sample plus a dense ground-truth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub train: Dataset,
    pub truth: Dataset,
}

/// `(cos 2 x1 + cos 2 x2) * sqrt(|x1 x2|)`.
pub fn fig1_function(x1: f64, x2: f64) -> f64 {
    ((2.0 * x1).cos() + (2.0 * x2).cos()) * (x1 * x2).abs().sqrt()
}

pub fn synth_generate(kind: SynthKind, seed: u64) -> Result<Synthetic> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SynthKind::Fig12d => {
            let mut train = Vec::with_capacity(100);
            let mut ty = Vec::with_capacity(100);
            for _ in 0..100 {
                let (a, b) = (rng.random_range(-6.0..=6.0), rng.random_range(-6.0..=6.0));
                train.push([a, b]);
                ty.push(fig1_function(a, b));
            }
            let g = 41;
            let mut grid = Vec::with_capacity(g * g);
            let mut gy = Vec::with_capacity(g * g);
            for i in 0..g {
                for j in 0..g {
                    let a = -6.0 + 12.0 * i as f64 / (g - 1) as f64;
                    let b = -6.0 + 12.0 * j as f64 / (g - 1) as f64;
                    grid.push([a, b]);
                    gy.push(fig1_function(a, b));
                }
            }
            Ok(Synthetic {
                train: Dataset::new("fig1_2d", Points::from_rows(&train)?, ty)?,
                truth: Dataset::new("fig1_2d_truth", Points::from_rows(&grid)?, gy)?,
            })
        }
        SynthKind::GpSample1d => {
            let prims = vec![
                slot(PrimitiveTag::Rbf, Hyper::rbf(1.0, 2.0))?,
                slot(PrimitiveTag::Per, Hyper::per(1.0, 1.0, 3.0))?,
            ];
            let spec = NetworkSpec::new(1, prims, vec![unit_sum(2)]);
            sample_on_grid("gp_sample_1d", &spec, -12.0, 14.0, 521, |x| x <= 0.0 || x >= 6.0, &mut rng)
        }
        SynthKind::NeuronToy => {
            // [RBF, PER, LIN, CONST(1)] -> Product -> [RBF*PER, LIN] -> sum.
            let prims = vec![
                slot(PrimitiveTag::Rbf, Hyper::rbf(1.0, 4.0))?,
                slot(PrimitiveTag::Per, Hyper::per(1.0, 1.0, 2.0))?,
                slot(PrimitiveTag::Lin, Hyper::variance(0.05))?,
                slot(PrimitiveTag::Const, Hyper::variance(1.0))?,
            ];
            let spec = NetworkSpec::new(1, prims, vec![LayerSpec::Product { arity: 2 }, unit_sum(2)]);
            sample_on_grid("neuron_toy", &spec, -10.0, 10.0, 401, |x| x <= 4.0, &mut rng)
        }
    }
}

fn slot(tag: PrimitiveTag, h: Hyper) -> Result<PrimitiveSlot> {
    let kind = PrimitiveKind::new(tag);
    let init = kind.encode(&h, 1)?;
    Ok(PrimitiveSlot { kind, init })
}

fn unit_sum(w: usize) -> LayerSpec {
    LayerSpec::Linear(LinearSpec { out: 1, bias: false, edges: None, init: vec![softplus_inv(1.0); w] })
}

/// Draws one function from the GP prior with kernel `spec` on a uniform grid,
/// keeps 100 random grid points satisfying `in_train` (plus N(0, 0.01) noise)
/// as training data and the noiseless grid as truth.
fn sample_on_grid(
    name: &str,
    spec: &NetworkSpec,
    lo: f64,
    hi: f64,
    n_grid: usize,
    in_train: impl Fn(f64) -> bool,
    rng: &mut ChaCha8Rng,
) -> Result<Synthetic> {
    let xs: Vec<f64> = (0..n_grid).map(|i| lo + (hi - lo) * i as f64 / (n_grid - 1) as f64).collect();
    let grid = Points::from_scalars(&xs);
    let store = ParameterStore::from_spec(spec, 0.0)?;
    let k = kernel_matrix(spec, &store, &grid, &grid)?.to_dmatrix();
    let f = SpdFactor::new(&k)?;
    let z: Vec<f64> = (0..n_grid).map(|_| rng.sample(StandardNormal)).collect();
    let fz = f.l() * nalgebra::DVector::from_vec(z);
    let truth_y: Vec<f64> = fz.iter().copied().collect();

    let mut eligible: Vec<usize> = (0..n_grid).filter(|&i| in_train(xs[i])).collect();
    eligible.shuffle(rng);
    let mut pick: Vec<usize> = eligible.into_iter().take(100).collect();
    pick.sort_unstable();
    let tx: Vec<f64> = pick.iter().map(|&i| xs[i]).collect();
    let ty: Vec<f64> = pick
        .iter()
        .map(|&i| truth_y[i] + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Synthetic {
        train: Dataset::new(name, Points::from_scalars(&tx), ty)?,
        truth: Dataset::new(format!("{name}_truth"), grid, truth_y)?,
    })
}

/// `[lo, hi]` partition of an ordered 1-D series at `cutoff_frac` of its length.
pub fn time_cutoff_split(n: usize, cutoff_frac: f64) -> Result<Split> {
    if !(cutoff_frac > 0.0 && cutoff_frac < 1.0) {
        return Err(invalid(format!("cutoff fraction {cutoff_frac} outside (0, 1)")));
    }
    let c = ((n as f64) * cutoff_frac).round() as usize;
    if c == 0 || c >= n {
        return Err(invalid("cutoff leaves an empty side"));
    }
    Ok(Split { train: (0..c).collect(), test: (c..n).collect() })
}


#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn nan_rows_are_dropped_and_counted() {
        let f = write("a,b,y\n1,2,3\n4,NaN,6\n7,8,9\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.dropped), (2, 2, 1));
        assert_eq!(ds.y, vec![3.0, 9.0]);
    }

    #[test]
    fn header_only_has_no_data_rows() {
        let f = write("a,b,y\n");
        let msg = load_csv(f.path()).unwrap_err().to_string();
        assert!(msg.contains("no data rows"), "{msg}");
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let f = write("a,y\n1,2\nfoo,3\n");
        let msg = load_csv(f.path()).unwrap_err().to_string();
        assert!(msg.contains("row 2, column 1"), "{msg}");
    }

    #[test]
    fn collinear_pca_split_takes_extremes() {
        let rows: Vec<[f64; 2]> = (0..15).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let ds = Dataset::new("line", Points::from_rows(&rows).unwrap(), vec![0.0; 15]).unwrap();
        let s = pca_split(&ds).unwrap();
        assert_eq!(s.test, vec![0, 14]);
        assert_eq!(s.train.len(), 13);
    }

    #[test]
    fn identical_rows_have_rank_zero() {
        let rows = vec![[1.0, 1.0]; 20];
        let ds = Dataset::new("dup", Points::from_rows(&rows).unwrap(), vec![0.0; 20]).unwrap();
        assert!(pca_split(&ds).is_err());
    }

    #[test]
    fn random_split_is_a_partition() {
        let s = random_split(506, 0.9, 4).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (455, 51));
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..506).collect::<Vec<_>>());
    }

    #[test]
    fn fig1_value_at_half_pi() {
        let h = std::f64::consts::FRAC_PI_2;
        assert!((fig1_function(h, h) + std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn synthetic_domains() {
        let s = synth_generate(SynthKind::Fig12d, 1).unwrap();
        assert_eq!(s.train.len(), 100);
        assert!(s.train.x.as_slice().iter().all(|v| (-6.0..=6.0).contains(v)));
        let s = synth_generate(SynthKind::GpSample1d, 1).unwrap();
        assert_eq!(s.train.len(), 100);
        assert!(s.train.x.as_slice().iter().all(|&v| (-12.0..=0.0).contains(&v) || (6.0..=14.0).contains(&v)));
        let a = synth_generate(SynthKind::NeuronToy, 5).unwrap();
        let b = synth_generate(SynthKind::NeuronToy, 5).unwrap();
        assert_eq!(a, b);
    }
}
