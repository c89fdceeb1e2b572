//! Evaluation machinery: chamfer and earth-mover distances, the
//! coverage/MMD/1-NNA generative metric suite, ICP alignment, and the
//! training-set oracle baseline.

pub mod emd;
pub mod icp;

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use once_cell::sync::OnceCell;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::StreamRng;

pub use emd::{emd, EmdMethod};
pub use icp::{icp_align, IcpResult, RigidTransform};

/// Pairwise distance used to compare two clouds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMetric {
    /// Chamfer with squared euclidean norms.
    Cd,
    /// Chamfer without squaring (the reconstruction-protocol variant).
    CdL1,
    /// Earth mover's distance (exact assignment).
    Emd,
}

impl PairMetric {
    pub fn name(&self) -> &'static str {
        match self {
            PairMetric::Cd => "cd",
            PairMetric::CdL1 => "cd-l1",
            PairMetric::Emd => "emd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cd" => Ok(PairMetric::Cd),
            "cd-l1" => Ok(PairMetric::CdL1),
            "emd" => Ok(PairMetric::Emd),
            other => Err(Error::InvalidInput(format!("unknown metric {other:?}"))),
        }
    }

    pub fn eval(&self, p: &PointCloud, q: &PointCloud) -> Result<f64> {
        match self {
            PairMetric::Cd => chamfer(p, q, ChamferNorm::SquaredL2),
            PairMetric::CdL1 => chamfer(p, q, ChamferNorm::L1OfL2),
            PairMetric::Emd => emd(p, q, EmdMethod::Exact),
        }
    }
}

/// Which norm the chamfer distance applies to nearest-neighbor distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChamferNorm {
    SquaredL2,
    L1OfL2,
}

/// Symmetrized nearest-neighbor distance; each directed sum is normalized by
/// its own set size (reduces to the usual 1/N [sum + sum] for equal sizes).
pub fn chamfer(p: &PointCloud, q: &PointCloud, norm: ChamferNorm) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::SizeError("chamfer needs equal dimensionality".into()));
    }
    let directed = |a: &PointCloud, b: &PointCloud| -> f64 {
        let mut acc = 0.0;
        for a_row in a.points().rows() {
            let mut best = f64::INFINITY;
            for b_row in b.points().rows() {
                let d2: f64 = a_row
                    .iter()
                    .zip(b_row.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                best = best.min(d2);
            }
            acc += match norm {
                ChamferNorm::SquaredL2 => best,
                ChamferNorm::L1OfL2 => best.sqrt(),
            };
        }
        acc / a.len() as f64
    };
    Ok(directed(p, q) + directed(q, p))
}

/// Distances between every (reference, generated) pair; rows are references.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
    pub metric: PairMetric,
}

static POOL: OnceCell<rayon::ThreadPool> = OnceCell::new();

/// Worker pool honoring the GECCO_THREADS cap.
fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Ok(v) = std::env::var("GECCO_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                builder = builder.num_threads(n.max(1));
            }
        }
        builder.build().expect("worker pool")
    })
}

/// Every (reference, generated) pair's distance. Entries are computed
/// independently into preallocated slots, so results are identical for any
/// worker count.
pub fn pairwise_matrix(
    references: &[PointCloud],
    generated: &[PointCloud],
    metric: PairMetric,
) -> Result<DistanceMatrix> {
    if references.is_empty() || generated.is_empty() {
        return Err(Error::SizeError("pairwise matrix needs non-empty sets".into()));
    }
    let (rows, cols) = (references.len(), generated.len());
    let mut values = vec![0.0f64; rows * cols];
    let result: Result<()> = pool().install(|| {
        use rayon::prelude::*;
        values
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(k, slot)| -> Result<()> {
                let (i, j) = (k / cols, k % cols);
                *slot = metric.eval(&references[i], &generated[j])?;
                Ok(())
            })
    });
    result?;
    Ok(DistanceMatrix {
        values: Array2::from_shape_vec((rows, cols), values).unwrap(),
        metric,
    })
}

/// Fraction of references that are the nearest reference of at least one
/// generated sample (ties broken toward the lowest reference index).
pub fn coverage(matrix: &DistanceMatrix) -> f64 {
    let (rows, cols) = matrix.values.dim();
    let mut hit = vec![false; rows];
    for j in 0..cols {
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..rows {
            let d = matrix.values[[i, j]];
            if d < best.0 {
                best = (d, i);
            }
        }
        hit[best.1] = true;
    }
    hit.iter().filter(|h| **h).count() as f64 / rows as f64
}

/// Mean over references of the distance to the closest generated sample.
pub fn mmd(matrix: &DistanceMatrix) -> f64 {
    let (rows, _) = matrix.values.dim();
    let mut acc = 0.0;
    for row in matrix.values.rows() {
        acc += row.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    acc / rows as f64
}

/// Leave-one-out 1-nearest-neighbor two-sample accuracy over the union of
/// the two sets. Nearest-distance ties prefer the opposite set (pessimistic),
/// then the lowest index.
pub fn one_nna(
    references: &[PointCloud],
    generated: &[PointCloud],
    metric: PairMetric,
) -> Result<f64> {
    if references.len() != generated.len() {
        return Err(Error::SizeError(format!(
            "1-NNA needs equal set sizes, got {} and {}",
            references.len(),
            generated.len()
        )));
    }
    let n = references.len();
    let union: Vec<&PointCloud> = references.iter().chain(generated.iter()).collect();
    let total = 2 * n;
    let mut dist = vec![0.0f64; total * total];
    let result: Result<()> = pool().install(|| {
        use rayon::prelude::*;
        dist.par_iter_mut()
            .enumerate()
            .try_for_each(|(k, slot)| -> Result<()> {
                let (i, j) = (k / total, k % total);
                if i < j {
                    *slot = metric.eval(union[i], union[j])?;
                }
                Ok(())
            })
    });
    result?;
    let d = |i: usize, j: usize| {
        if i < j {
            dist[i * total + j]
        } else {
            dist[j * total + i]
        }
    };

    let mut correct = 0usize;
    for u in 0..total {
        let same_set = |v: usize| (u < n) == (v < n);
        // (distance, tie priority: opposite set first, index) lexicographic min
        let mut best: Option<(f64, u8, usize)> = None;
        for v in 0..total {
            if v == u {
                continue;
            }
            let key = (d(u, v), same_set(v) as u8, v);
            let better = match &best {
                None => true,
                Some(b) => key.0 < b.0 || (key.0 == b.0 && (key.1, key.2) < (b.1, b.2)),
            };
            if better {
                best = Some(key);
            }
        }
        if best.map(|b| b.1 == 1).unwrap_or(false) {
            correct += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Full generative evaluation of a generated set against references.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub metric: PairMetric,
    pub matrix: DistanceMatrix,
    pub coverage: f64,
    pub mmd: f64,
    pub one_nna: f64,
}

impl MetricReport {
    /// Machine-readable `metric,distance,value` rows.
    pub fn table_rows(&self) -> String {
        let d = self.metric.name();
        format!(
            "cov,{d},{}\nmmd,{d},{}\n1-nna,{d},{}\n",
            self.coverage, self.mmd, self.one_nna
        )
    }
}

/// Compute coverage, MMD, and 1-NNA of a generated set against references.
pub fn evaluate_sets(
    references: &[PointCloud],
    generated: &[PointCloud],
    metric: PairMetric,
) -> Result<MetricReport> {
    let matrix = pairwise_matrix(references, generated, metric)?;
    Ok(MetricReport {
        metric,
        coverage: coverage(&matrix),
        mmd: mmd(&matrix),
        one_nna: one_nna(references, generated, metric)?,
        matrix,
    })
}

/// Baseline that "generates" by drawing reference-set-sized samples from the
/// training set (seeded, without replacement).
pub fn oracle_eval(
    train: &[PointCloud],
    references: &[PointCloud],
    metric: PairMetric,
    rng: &mut StreamRng,
) -> Result<MetricReport> {
    if train.len() < references.len() {
        return Err(Error::SizeError(format!(
            "oracle needs |train| >= |reference| ({} < {})",
            train.len(),
            references.len()
        )));
    }
    let idx = rng.choose_indices(train.len(), references.len());
    let drawn: Vec<PointCloud> = idx.into_iter().map(|i| train[i].clone()).collect();
    evaluate_sets(references, &drawn, metric)
}

const MTX_MAGIC: &[u8; 4] = b"MTX1";

/// Dump a distance matrix: magic, u32 rows, u32 cols, f64 LE payload.
pub fn write_mtx1(path: &Path, matrix: &DistanceMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MTX_MAGIC)?;
    let (rows, cols) = matrix.values.dim();
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in matrix.values.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read back a matrix written by [`write_mtx1`] (metric tag defaults to CD).
pub fn read_mtx1(path: &Path) -> Result<Array2<f64>> {
    let mut r = std::io::BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MTX_MAGIC {
        return Err(Error::MagicMismatch {
            expected: String::from_utf8_lossy(MTX_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let rows = u32::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let cols = u32::from_le_bytes(b) as usize;
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Truncated("mtx1 payload too short".into()))?;
    let vals: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), vals).unwrap())
}
