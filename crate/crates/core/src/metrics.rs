//! RMSE / SAD scoring with endmember matching, report tables and PGM output.

use serde::{Deserialize, Serialize};

use crate::data::{AbundanceMap, EndmemberMatrix};
use crate::error::{Error, Result};

/// Per-endmember root-mean-square abundance error and its mean over `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rmse {
    pub per_endmember: Vec<f64>,
    pub average: f64,
}

/// RMSE between two row-major `N × K` abundance matrices, per column.
pub fn rmse(z_true: &[f64], z_hat: &[f64], k: usize) -> Result<Rmse> {
    if k == 0 || z_true.len() != z_hat.len() || z_true.len() % k != 0 {
        return Err(Error::shape(format!(
            "rmse needs equal N x K inputs, got {} and {} values with K={k}",
            z_true.len(),
            z_hat.len()
        )));
    }
    let n = z_true.len() / k;
    if n == 0 {
        return Err(Error::contract("rmse over zero pixels"));
    }
    let mut sq = vec![0.0; k];
    for (t, h) in z_true.chunks_exact(k).zip(z_hat.chunks_exact(k)) {
        for j in 0..k {
            sq[j] += (t[j] - h[j]).powi(2);
        }
    }
    let per: Vec<f64> = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
    let average = per.iter().sum::<f64>() / k as f64;
    Ok(Rmse {
        per_endmember: per,
        average,
    })
}

/// Spectral angle in radians, in `[0, π]`.
pub fn sad(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::shape(format!("sad of lengths {} and {}", est.len(), truth.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (a, b) in est.iter().zip(truth) {
        ab += a * b;
        aa += a * a;
        bb += b * b;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::contract("sad of a zero vector"));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0).acos())
}

/// Minimum-cost assignment on a square row-major cost matrix; entry `i` of
/// the result is the column given to row `i`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // potentials formulation, 1-based with a sentinel column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// `K × K` matrix with entry `(t, e)` = SAD between truth row `t` and
/// estimated row `e`.
pub fn sad_matrix(est: &EndmemberMatrix, truth: &EndmemberMatrix) -> Result<Vec<f64>> {
    if est.k() != truth.k() || est.bands() != truth.bands() {
        return Err(Error::shape(format!(
            "cannot match {}x{} estimates to {}x{} truth",
            est.k(),
            est.bands(),
            truth.k(),
            truth.bands()
        )));
    }
    let k = est.k();
    let mut cost = vec![0.0; k * k];
    for t in 0..k {
        for e in 0..k {
            cost[t * k + e] = sad(est.row(e), truth.row(t))?;
        }
    }
    Ok(cost)
}

/// Assignment of estimated endmembers to ground truth that minimizes total
/// SAD. Entry `t` is the estimated row paired with truth row `t`.
pub fn match_endmembers(est: &EndmemberMatrix, truth: &EndmemberMatrix) -> Result<Vec<usize>> {
    let cost = sad_matrix(est, truth)?;
    Ok(hungarian(&cost, est.k()))
}

/// Provenance carried alongside a report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub dataset_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndmemberScore {
    pub name: String,
    pub rmse: f64,
    pub sad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_endmember: Vec<EndmemberScore>,
    pub average_rmse: f64,
    pub average_sad: f64,
    /// Assignment applied: truth endmember `t` was scored against estimate `permutation[t]`.
    pub permutation: Vec<usize>,
    pub metadata: RunMetadata,
}

/// Abundance columns reordered so that column `t` is input column `perm[t]`.
pub fn permute_columns(z: &[f64], k: usize, perm: &[usize]) -> Vec<f64> {
    z.chunks_exact(k).flat_map(|row| perm.iter().map(move |&p| row[p])).collect()
}

/// Scores estimated endmembers and abundances (rows for the same pixels as
/// `z_true`, `N × K`) after Hungarian matching on SAD.
pub fn evaluate(
    z_true: &[f64],
    z_hat: &[f64],
    est: &EndmemberMatrix,
    truth: &EndmemberMatrix,
    metadata: RunMetadata,
) -> Result<EvaluationReport> {
    let k = truth.k();
    let perm = match_endmembers(est, truth)?;
    let z_matched = permute_columns(z_hat, k, &perm);
    let r = rmse(z_true, &z_matched, k)?;
    let mut per = Vec::with_capacity(k);
    for t in 0..k {
        per.push(EndmemberScore {
            name: format!("em{}", t + 1),
            rmse: r.per_endmember[t],
            sad: sad(est.row(perm[t]), truth.row(t))?,
        });
    }
    let average_sad = per.iter().map(|s| s.sad).sum::<f64>() / k as f64;
    Ok(EvaluationReport {
        per_endmember: per,
        average_rmse: r.average,
        average_sad,
        permutation: perm,
        metadata,
    })
}

/// Like [`evaluate`] on whole maps restricted to `pixels`.
pub fn evaluate_maps(
    truth_map: &AbundanceMap,
    est_map: &AbundanceMap,
    pixels: &[usize],
    est: &EndmemberMatrix,
    truth: &EndmemberMatrix,
    metadata: RunMetadata,
) -> Result<EvaluationReport> {
    if (truth_map.height(), truth_map.width(), truth_map.k()) != (est_map.height(), est_map.width(), est_map.k()) {
        return Err(Error::shape(format!(
            "abundance maps {}x{}x{} and {}x{}x{} differ",
            truth_map.height(),
            truth_map.width(),
            truth_map.k(),
            est_map.height(),
            est_map.width(),
            est_map.k()
        )));
    }
    evaluate(&truth_map.rows(pixels), &est_map.rows(pixels), est, truth, metadata)
}

/// One row of a (possibly multi-run) report table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub rmse: f64,
    pub rmse_std: f64,
    pub sad: f64,
    pub sad_std: f64,
}

/// Mean and sample standard deviation (`n - 1`; zero for a single run) of
/// each entry across runs, with the `average` row last.
pub fn summarize(reports: &[EvaluationReport]) -> Result<Vec<SummaryRow>> {
    let first = reports.first().ok_or_else(|| Error::contract("no reports to summarize"))?;
    let k = first.per_endmember.len();
    if reports.iter().any(|r| r.per_endmember.len() != k) {
        return Err(Error::shape("reports have different endmember counts"));
    }
    let stat = |vals: Vec<f64>| -> (f64, f64) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, sd)
    };
    let mut rows = Vec::with_capacity(k + 1);
    for t in 0..k {
        let (rmse, rmse_std) = stat(reports.iter().map(|r| r.per_endmember[t].rmse).collect());
        let (sad, sad_std) = stat(reports.iter().map(|r| r.per_endmember[t].sad).collect());
        rows.push(SummaryRow {
            name: first.per_endmember[t].name.clone(),
            rmse,
            rmse_std,
            sad,
            sad_std,
        });
    }
    let (rmse, rmse_std) = stat(reports.iter().map(|r| r.average_rmse).collect());
    let (sad, sad_std) = stat(reports.iter().map(|r| r.average_sad).collect());
    rows.push(SummaryRow {
        name: "average".into(),
        rmse,
        rmse_std,
        sad,
        sad_std,
    });
    Ok(rows)
}

pub const REPORT_HEADER: &str = "endmember,rmse,rmse_std,sad,sad_std";

/// CSV table (`endmember,rmse,rmse_std,sad,sad_std`) over one or more runs.
pub fn report_csv(reports: &[EvaluationReport]) -> Result<String> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in summarize(reports)? {
        out.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", r.name, r.rmse, r.rmse_std, r.sad, r.sad_std));
    }
    Ok(out)
}

/// Binary 8-bit PGM of abundance channel `k`, pixel value `round(255·z)`.
pub fn abundance_pgm(map: &AbundanceMap, k: usize) -> Result<Vec<u8>> {
    if k >= map.k() {
        return Err(Error::contract(format!("channel {k} of a K={} map", map.k())));
    }
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.channel(k).iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}
