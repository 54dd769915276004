//! Training losses and attention diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sign of the diagonal term of the diagonality-preserving loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagSign {
    /// `+ sum_i ((N-1) A_ii - sum_{j!=i} A_ij)`. Minimizing this lowers the diagonal.
    #[default]
    AsPrinted,
    /// Negated diagonal term, which rewards a dominant diagonal.
    Reversed,
}

/// Which off-diagonal entries the diagonal term subtracts for index `i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffDiagSum {
    /// `sum_{j!=i} A_ij`
    #[default]
    Row,
    /// `sum_{j!=i} A_ji`
    Column,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpOptions {
    pub diag_sign: DiagSign,
    pub off_diag: OffDiagSum,
}

fn square_maps(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    let s = a.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::invalid(op, format!("expected [H, N, N], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Diagonality-preserving loss with default options, averaged over heads.
pub fn dp_loss(a: &Tensor) -> Result<f64> {
    dp_loss_with(a, DpOptions::default())
}

pub fn dp_loss_with(a: &Tensor, opts: DpOptions) -> Result<f64> {
    let (h, n) = square_maps("dp_loss", a)?;
    let sign = match opts.diag_sign {
        DiagSign::AsPrinted => 1.0,
        DiagSign::Reversed => -1.0,
    };
    let mut total = 0.0;
    for m in a.data().chunks_exact(n * n) {
        let mut sym = 0.0;
        for i in 0..n {
            for j in 0..n {
                sym += (m[i * n + j] - m[j * n + i]).abs();
            }
        }
        let mut diag = 0.0;
        for i in 0..n {
            let off: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| match opts.off_diag {
                    OffDiagSum::Row => m[i * n + j],
                    OffDiagSum::Column => m[j * n + i],
                })
                .sum();
            diag += (n as f64 - 1.0) * m[i * n + i] - off;
        }
        total += sym + sign * diag;
    }
    Ok(total / h as f64)
}

/// Gradient of [`dp_loss_with`]; the subgradient of `|0|` is taken as 0.
pub fn dp_loss_grad(a: &Tensor, opts: DpOptions) -> Result<Tensor> {
    let (h, n) = square_maps("dp_loss", a)?;
    let sign = match opts.diag_sign {
        DiagSign::AsPrinted => 1.0,
        DiagSign::Reversed => -1.0,
    };
    // Row and column variants touch every off-diagonal entry exactly once,
    // so their gradients coincide.
    let inv_h = 1.0 / h as f64;
    let mut out = vec![0.0; a.len()];
    for (m, g) in a.data().chunks_exact(n * n).zip(out.chunks_exact_mut(n * n)) {
        for i in 0..n {
            for j in 0..n {
                let d = m[i * n + j] - m[j * n + i];
                let s = if d > 0.0 {
                    2.0
                } else if d < 0.0 {
                    -2.0
                } else {
                    0.0
                };
                let diag = if i == j { sign * (n as f64 - 1.0) } else { -sign };
                g[i * n + j] = (s + diag) * inv_h;
            }
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

fn check_logits(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::invalid("cross_entropy", format!("logits must be [B, K>=2], got {s:?}")));
    }
    if labels.len() != s[0] {
        return Err(Error::invalid("cross_entropy", format!("{} labels for batch of {}", labels.len(), s[0])));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {} classes", s[1])));
    }
    Ok((s[0], s[1]))
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = check_logits(logits, labels)?;
    let total: f64 = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &l)| log_sum_exp(row) - row[l])
        .sum();
    Ok(total / b as f64)
}

pub(crate) fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Tensor {
    let k = logits.last_dim();
    let b = labels.len() as f64;
    let mut out = Vec::with_capacity(logits.len());
    for (row, &l) in logits.data().chunks_exact(k).zip(labels) {
        let lse = log_sum_exp(row);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            out.push((p - if j == l { 1.0 } else { 0.0 }) / b);
        }
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DpTerm {
    pub stage: usize,
    pub layer: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dp_per_layer: Vec<DpTerm>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn dp_sum(&self) -> f64 {
        self.dp_per_layer.iter().map(|t| t.value).sum()
    }
}

pub fn total_loss(ce: f64, dp_terms: Vec<DpTerm>, dp_weight: f64) -> LossBreakdown {
    let sum: f64 = dp_terms.iter().map(|t| t.value).sum();
    LossBreakdown { ce, total: ce + dp_weight * sum, dp_per_layer: dp_terms }
}

/// Mean of `|A_ij - A_ji|` over all `H * N * N` entries.
pub fn symmetry_score(a: &Tensor) -> Result<f64> {
    let (_, n) = square_maps("symmetry_score", a)?;
    let mut total = 0.0;
    for m in a.data().chunks_exact(n * n) {
        for i in 0..n {
            for j in 0..n {
                total += (m[i * n + j] - m[j * n + i]).abs();
            }
        }
    }
    Ok(total / a.len() as f64)
}

/// Cosine similarity of flattened per-head maps, averaged over heads.
/// A zero map has similarity 0 with anything.
pub fn layer_similarity(current: &Tensor, previous: &Tensor) -> Result<f64> {
    let (h, n) = square_maps("layer_similarity", current)?;
    if current.shape() != previous.shape() {
        return Err(Error::shape("layer_similarity", current.shape(), previous.shape()));
    }
    let mut total = 0.0;
    for (a, b) in current.data().chunks_exact(n * n).zip(previous.data().chunks_exact(n * n)) {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            total += dot / (na * nb);
        }
    }
    Ok(total / h as f64)
}

/// One row of the per-layer attention diagnostics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub stage: usize,
    pub layer: usize,
    /// Similarity with the previous layer of the same stage; absent for a stage's first layer.
    pub similarity: Option<f64>,
    pub symmetry: f64,
    pub dp_loss: f64,
}

pub const METRIC_CSV_HEADER: &str = "stage,layer,similarity,symmetry,dp_loss";

/// Formats with 9 significant digits and a '.' decimal separator.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v:.8e}")
}

pub fn write_metric_csv<W: Write>(rows: &[MetricRow], w: &mut W) -> Result<()> {
    writeln!(w, "{METRIC_CSV_HEADER}")?;
    for r in rows {
        let sim = r.similarity.map(fmt_sig9).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", r.stage, r.layer, sim, fmt_sig9(r.symmetry), fmt_sig9(r.dp_loss))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_head(n: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![1, n, n], data.to_vec()).unwrap()
    }

    #[test]
    fn dp_loss_golden() {
        assert_eq!(dp_loss(&one_head(2, &[1., 0., 0., 1.])).unwrap(), 2.0);
        assert_eq!(dp_loss(&Tensor::zeros(&[1, 3, 3])).unwrap(), 0.0);
        assert_eq!(dp_loss(&one_head(2, &[0., 1., 1., 0.])).unwrap(), -2.0);
        let reversed = DpOptions { diag_sign: DiagSign::Reversed, ..Default::default() };
        assert_eq!(dp_loss_with(&one_head(2, &[1., 0., 0., 1.]), reversed).unwrap(), -2.0);
        assert!(dp_loss(&Tensor::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let ce = cross_entropy(&Tensor::zeros(&[1, 4]), &[2]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let logits = Tensor::new(vec![1, 3], vec![30.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&logits, &[0]).unwrap() < 1e-9);
        assert!(cross_entropy(&logits, &[3]).is_err());
        assert!(cross_entropy(&Tensor::zeros(&[1, 1]), &[0]).is_err());
    }

    #[test]
    fn total_loss_sums() {
        let terms = vec![DpTerm { stage: 0, layer: 1, value: 2.0 }, DpTerm { stage: 1, layer: 1, value: -2.0 }];
        assert_eq!(total_loss(1.0, terms.clone(), 1.0).total, 1.0);
        assert_eq!(total_loss(1.5, terms, 0.0).total, 1.5);
    }

    #[test]
    fn symmetry_and_similarity_golden() {
        assert_eq!(symmetry_score(&one_head(2, &[0., 1., 0., 0.])).unwrap(), 0.5);
        assert_eq!(symmetry_score(&one_head(2, &[3., 1., 1., 3.])).unwrap(), 0.0);
        let a = one_head(2, &[1., 0., 0., 1.]);
        let b = one_head(2, &[0., 1., 1., 0.]);
        assert_eq!(layer_similarity(&a, &b).unwrap(), 0.0);
        assert!((layer_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(layer_similarity(&Tensor::zeros(&[1, 2, 2]), &a).unwrap(), 0.0);
    }

    #[test]
    fn csv_format() {
        let rows = vec![
            MetricRow { stage: 0, layer: 0, similarity: None, symmetry: 0.5, dp_loss: -2.0 },
            MetricRow { stage: 0, layer: 1, similarity: Some(1.0 / 3.0), symmetry: 0.0, dp_loss: 1234.5 },
        ];
        let mut buf = Vec::new();
        write_metric_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "stage,layer,similarity,symmetry,dp_loss\n0,0,,5.00000000e-1,-2.00000000e0\n0,1,3.33333333e-1,0,1.23450000e3\n"
        );
    }
}
