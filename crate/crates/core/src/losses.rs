//! Batch losses: aggregation centers and their inverse separation, the
//! HSIC dependence term on paired encoder features, and the two binary
//! cross-entropy heads. Everything is built on a [`Tape`] so gradients of
//! each term can be taken separately.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Group;
use crate::tape::{bce_logit, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.004;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationMetric {
    /// Sum of per-coordinate absolute differences.
    #[default]
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HsicKernel {
    Linear,
    /// Gaussian kernel with bandwidth² set to the median pairwise squared
    /// distance (1.0 when that median is zero).
    #[default]
    RbfMedian,
}

impl std::str::FromStr for SeparationMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(SeparationMetric::L1),
            "l2" => Ok(SeparationMetric::L2),
            other => Err(Error::InvalidArgument(format!("unknown separation metric {other:?}"))),
        }
    }
}

impl std::str::FromStr for HsicKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HsicKernel::Linear),
            "rbf_median" => Ok(HsicKernel::RbfMedian),
            other => Err(Error::InvalidArgument(format!("unknown kernel {other:?}"))),
        }
    }
}

/// The four per-batch group means of `h_H`. Absent groups have no center.
#[derive(Clone, Debug)]
pub struct ClusterCenters {
    centers: [Option<Var>; 4],
    counts: [usize; 4],
}

impl ClusterCenters {
    pub fn center(&self, g: Group) -> Option<Var> {
        self.centers[g as usize]
    }

    pub fn count(&self, g: Group) -> usize {
        self.counts[g as usize]
    }

    pub fn c_t(&self) -> Option<Var> {
        self.center(Group::RealRaw)
    }

    pub fn c_t_cmp(&self) -> Option<Var> {
        self.center(Group::RealCompressed)
    }

    pub fn c_f(&self) -> Option<Var> {
        self.center(Group::FakeRaw)
    }

    pub fn c_f_cmp(&self) -> Option<Var> {
        self.center(Group::FakeCompressed)
    }
}

/// Group means of the rows of `features` (`[B×D]`), one group label per row.
pub fn compute_centers(tape: &mut Tape, features: Var, groups: &[Group]) -> Result<ClusterCenters> {
    let s = tape.shape(features).to_vec();
    if groups.is_empty() || s.len() != 2 || s[0] != groups.len() {
        return Err(Error::InvalidArgument(format!(
            "compute_centers needs one group per feature row; got {} groups for shape {s:?}",
            groups.len()
        )));
    }
    let mut centers = [None; 4];
    let mut counts = [0; 4];
    for g in Group::ALL {
        let rows: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        counts[g as usize] = rows.len();
        if !rows.is_empty() {
            let members = tape.gather_rows(features, &rows)?;
            centers[g as usize] = Some(tape.mean(members, Some(0))?);
        }
    }
    Ok(ClusterCenters { centers, counts })
}

/// `S = 1 / (1 + dist(a, b))`, in `(0, 1]`.
pub fn inverse_separation(tape: &mut Tape, a: Var, b: Var, metric: SeparationMetric) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "inverse_separation",
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    let diff = tape.sub(a, b)?;
    let dist = match metric {
        SeparationMetric::L1 => {
            let abs = tape.abs(diff)?;
            tape.sum(abs, None)?
        }
        SeparationMetric::L2 => {
            let sq = tape.square(diff)?;
            let s = tape.sum(sq, None)?;
            tape.sqrt(s)?
        }
    };
    let denom = tape.add_scalar(dist, 1.0)?;
    let one = tape.scalar(1.0);
    tape.div(one, denom)
}

#[derive(Clone, Copy, Debug)]
pub struct UnpairLoss {
    pub value: Var,
    /// Set when a compressed center was missing and `S_cmp` was left out.
    pub dropped_cmp: bool,
}

/// `S(c_t, c_f) + S(c_t_cmp, c_f_cmp)`; the compressed term is dropped when
/// either compressed center is absent.
pub fn loss_unpair(
    tape: &mut Tape,
    centers: &ClusterCenters,
    metric: SeparationMetric,
) -> Result<UnpairLoss> {
    let (Some(ct), Some(cf)) = (centers.c_t(), centers.c_f()) else {
        return Err(Error::InvalidArgument(
            "unpaired loss needs both real and fake raw centers".into(),
        ));
    };
    let s = inverse_separation(tape, ct, cf, metric)?;
    match (centers.c_t_cmp(), centers.c_f_cmp()) {
        (Some(a), Some(b)) => {
            let s_cmp = inverse_separation(tape, a, b, metric)?;
            Ok(UnpairLoss {
                value: tape.add(s, s_cmp)?,
                dropped_cmp: false,
            })
        }
        _ => {
            log::debug!("batch lacks a compressed center; dropping S_cmp");
            Ok(UnpairLoss {
                value: s,
                dropped_cmp: true,
            })
        }
    }
}

fn gram(tape: &mut Tape, x: Var, kernel: HsicKernel) -> Result<Var> {
    match kernel {
        HsicKernel::Linear => {
            let xt = tape.transpose(x)?;
            tape.matmul(x, xt)
        }
        HsicKernel::RbfMedian => {
            let d = tape.pairwise_sq_dists(x)?;
            let bw = median_bandwidth(tape.value(d));
            rbf_from_dists(tape, d, bw)
        }
    }
}

fn rbf_from_dists(tape: &mut Tape, d: Var, bandwidth: f64) -> Result<Var> {
    let scaled = tape.scale(d, -1.0 / bandwidth);
    tape.exp(scaled)
}

/// Median of the strictly-upper-triangular entries of a square distance
/// matrix, or 1.0 if that median is zero.
pub fn median_bandwidth(d: &Tensor) -> f64 {
    let n = d.shape()[0];
    let mut vals: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d.data()[i * n + j])
        .collect();
    if vals.is_empty() {
        return 1.0;
    }
    vals.sort_by(|a, b| a.total_cmp(b));
    let m = vals.len();
    let med = if m % 2 == 1 {
        vals[m / 2]
    } else {
        0.5 * (vals[m / 2 - 1] + vals[m / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn check_pair(tape: &Tape, x: Var, y: Var) -> Result<usize> {
    let (sx, sy) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
    if sx.len() != 2 || sy.len() != 2 || sx[0] != sy[0] {
        return Err(Error::ShapeMismatch {
            op: "hsic",
            lhs: sx,
            rhs: sy,
        });
    }
    let n = sx[0];
    if n < 2 {
        return Err(Error::InvalidArgument(format!("hsic needs n >= 2, got {n}")));
    }
    Ok(n)
}

fn centered_trace(tape: &mut Tape, k: Var, l: Var, n: usize) -> Result<Var> {
    let mut h = Tensor::full(&[n, n], -1.0 / n as f64);
    for i in 0..n {
        h.data_mut()[i * n + i] += 1.0;
    }
    let h = tape.constant(h);
    let hk = tape.matmul(h, k)?;
    let hkh = tape.matmul(hk, h)?;
    let lt = tape.transpose(l)?;
    let prod = tape.mul(hkh, lt)?;
    let tr = tape.sum(prod, None)?;
    Ok(tape.scale(tr, 1.0 / ((n - 1) * (n - 1)) as f64))
}

/// Biased empirical HSIC, `trace(K·H·L·H) / (n−1)²` with centering matrix
/// `H = I − 11ᵀ/n`. Rows of `x` and `y` are paired.
pub fn hsic(tape: &mut Tape, x: Var, y: Var, kernel: HsicKernel) -> Result<Var> {
    let n = check_pair(tape, x, y)?;
    let k = gram(tape, x, kernel)?;
    let l = gram(tape, y, kernel)?;
    centered_trace(tape, k, l, n)
}

/// RBF-kernel HSIC with caller-supplied squared bandwidths. With the median
/// bandwidths of `x` and `y` this equals [`hsic`] under
/// [`HsicKernel::RbfMedian`], value and gradient.
pub fn hsic_rbf_fixed(tape: &mut Tape, x: Var, y: Var, bw_x: f64, bw_y: f64) -> Result<Var> {
    let n = check_pair(tape, x, y)?;
    if !(bw_x > 0.0 && bw_y > 0.0) {
        return Err(Error::Domain {
            op: "hsic_rbf_fixed",
            reason: "bandwidths must be positive".into(),
        });
    }
    let dx = tape.pairwise_sq_dists(x)?;
    let k = rbf_from_dists(tape, dx, bw_x)?;
    let dy = tape.pairwise_sq_dists(y)?;
    let l = rbf_from_dists(tape, dy, bw_y)?;
    centered_trace(tape, k, l, n)
}

/// HSIC of two plain matrices, without gradients.
pub fn hsic_value(x: &Tensor, y: &Tensor, kernel: HsicKernel) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let h = hsic(&mut tape, xv, yv, kernel)?;
    Ok(tape.value(h).item().expect("scalar"))
}

/// `−HSIC(h_E[compressed rows], h_E[raw rows])` over the batch's pairs, given
/// as `(raw_row, compressed_row)`. Returns `None` (term skipped) with fewer
/// than two pairs.
pub fn loss_pair(
    tape: &mut Tape,
    h_e: Var,
    pairs: &[(usize, usize)],
    kernel: HsicKernel,
) -> Result<Option<Var>> {
    if pairs.len() < 2 {
        log::debug!("{} pair(s) in batch; skipping HSIC term", pairs.len());
        return Ok(None);
    }
    let raw: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let cmp: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let x = tape.gather_rows(h_e, &cmp)?;
    let y = tape.gather_rows(h_e, &raw)?;
    let dep = hsic(tape, x, y, kernel)?;
    Ok(Some(tape.neg(dep)?))
}

/// Stable binary cross-entropy of one logit.
pub fn bce(logit: f64, label: f64) -> f64 {
    bce_logit(logit, label)
}

/// Mean BCE of `[k×1]` (or `[k]`) logits against `labels`.
pub fn loss_bce(tape: &mut Tape, logits: Var, labels: &[f64]) -> Result<Var> {
    let per = tape.bce_with_logits(logits, labels)?;
    tape.mean(per, None)
}

/// `L_unpair + α·L_pair + L_tf + L_cmp`.
pub fn loss_all(l_unpair: f64, l_pair: f64, l_tf: f64, l_cmp: f64, alpha: f64) -> f64 {
    l_unpair + alpha * l_pair + l_tf + l_cmp
}
