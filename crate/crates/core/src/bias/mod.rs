//! Subjective-bias analysis between labelling systems: cross-annotation
//! through nearest label clusters, the resulting accuracy matrix, and the
//! annotation and subjective bias tables derived from it.

mod cross;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cross::{
    accuracy_matrix, cross_annotate, embed_records, read_embeddings, write_embeddings, Correspondence,
    CrossAnnotation, EmbeddingRecord,
};

use crate::error::{Error, Result};

const TABLE6: &str = include_str!("../../fixtures/table6.json");

/// `acc[i][j]`: accuracy in percent of dataset `i`'s samples under dataset
/// `j`'s labelling system. The diagonal holds own-label accuracy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyMatrix {
    pub datasets: Vec<String>,
    pub acc: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    datasets: Vec<String>,
    acc: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(datasets: Vec<String>, acc: Vec<Vec<f64>>) -> Result<Self> {
        let n = datasets.len();
        if acc.len() != n || acc.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!("accuracy matrix must be {n}x{n}")));
        }
        if let Some(v) = acc.iter().flatten().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Config(format!("accuracy {v} outside [0, 100]")));
        }
        Ok(AccuracyMatrix { datasets, acc })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawMatrix = serde_json::from_str(text)?;
        Self::new(raw.datasets, raw.acc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The published cross-annotation matrix over IEMOCAP, MELD, EmoryNLP
    /// and MOSI.
    pub fn table6() -> Self {
        Self::from_json(TABLE6).expect("bundled matrix is valid")
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Index(format!("dataset {i} of {}", self.len())));
        }
        Ok(())
    }
}

/// Annotation bias: how far accuracy drops when the labelling system changes.
pub fn bias_ana(acc_own: f64, acc_other: f64) -> f64 {
    (acc_own - acc_other).abs()
}

/// Subjective bias between datasets `i` and `j`: the gap between their two
/// annotation biases.
pub fn bias_sub(m: &AccuracyMatrix, i: usize, j: usize) -> Result<f64> {
    m.check(i)?;
    m.check(j)?;
    let a = &m.acc;
    Ok((bias_ana(a[i][i], a[i][j]) - bias_ana(a[j][j], a[j][i])).abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub datasets: Vec<String>,
    pub accuracy: Vec<Vec<f64>>,
    pub bias_ana: Vec<Vec<f64>>,
    pub bias_sub: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasPair {
    pub a: String,
    pub b: String,
    pub bias_sub: f64,
}

pub fn bias_report(m: &AccuracyMatrix) -> BiasReport {
    let n = m.len();
    let ana = (0..n).map(|i| (0..n).map(|j| bias_ana(m.acc[i][i], m.acc[i][j])).collect()).collect();
    let sub = (0..n)
        .map(|i| (0..n).map(|j| bias_sub(m, i, j).expect("indices in range")).collect())
        .collect();
    BiasReport { datasets: m.datasets.clone(), accuracy: m.acc.clone(), bias_ana: ana, bias_sub: sub }
}

impl BiasReport {
    /// Upper-triangle subjective biases in row-major order.
    pub fn pairs(&self) -> Vec<BiasPair> {
        let n = self.datasets.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                out.push(BiasPair {
                    a: self.datasets[i].clone(),
                    b: self.datasets[j].clone(),
                    bias_sub: self.bias_sub[i][j],
                });
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let heads: Vec<String> = self.datasets.iter().map(|d| format!("ACC_{d}")).collect();
        out.push_str(&square("accuracy (%)", &self.datasets, &heads, &self.accuracy));
        out.push('\n');
        out.push_str(&square("annotation bias (%)", &self.datasets, &self.datasets, &self.bias_ana));
        out.push('\n');
        out.push_str(&square("subjective bias (%)", &self.datasets, &self.datasets, &self.bias_sub));
        out.push('\n');
        for p in self.pairs() {
            let _ = writeln!(out, "{}-{}: {:.2}", p.a, p.b, p.bias_sub);
        }
        out
    }
}

fn square(title: &str, rows: &[String], cols: &[String], values: &[Vec<f64>]) -> String {
    let w0 = rows.iter().map(String::len).max().unwrap_or(0).max(title.len());
    let w = cols.iter().map(String::len).max().unwrap_or(0).max(6);
    let mut out = format!("{title:<w0$}");
    for c in cols {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (r, vals) in rows.iter().zip(values) {
        let _ = write!(out, "{r:<w0$}");
        for v in vals {
            let _ = write!(out, "  {v:>w$.2}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_bias_examples() {
        assert!((bias_ana(64.30, 37.36) - 26.94).abs() < 1e-9);
        assert!((bias_ana(62.29, 55.36) - 6.93).abs() < 1e-9);
        assert_eq!(bias_ana(40.0, 40.0), 0.0);
    }

    #[test]
    fn bundled_matrix_values() {
        let m = AccuracyMatrix::table6();
        assert_eq!(m.datasets, ["IEMOCAP", "MELD", "EmoryNLP", "MOSI"]);
        assert!((bias_sub(&m, 0, 1).unwrap() - 20.01).abs() < 1e-9);
        assert!((bias_sub(&m, 1, 3).unwrap() - 10.47).abs() < 1e-9);
        assert_eq!(bias_sub(&m, 2, 2).unwrap(), 0.0);
        assert!(bias_sub(&m, 0, 4).is_err());
    }

    #[test]
    fn constant_matrix_has_no_bias() {
        let m = AccuracyMatrix::new(vec!["a".into(), "b".into(), "c".into()], vec![vec![50.0; 3]; 3]).unwrap();
        let r = bias_report(&m);
        assert!(r.bias_ana.iter().chain(&r.bias_sub).flatten().all(|&v| v == 0.0));
        assert_eq!(r.pairs().len(), 3);
    }

    #[test]
    fn matrix_validation() {
        assert!(AccuracyMatrix::new(vec!["a".into()], vec![vec![101.0]]).is_err());
        assert!(AccuracyMatrix::new(vec!["a".into()], vec![vec![1.0, 2.0]]).is_err());
        assert!(AccuracyMatrix::from_json(r#"{"datasets": [], "acc": [], "x": 1}"#).is_err());
    }

    #[test]
    fn text_report_lists_pairs() {
        let text = bias_report(&AccuracyMatrix::table6()).to_text();
        assert!(text.contains("IEMOCAP-EmoryNLP: 43.58"), "{text}");
        assert!(text.contains("ACC_MOSI"));
    }
}
