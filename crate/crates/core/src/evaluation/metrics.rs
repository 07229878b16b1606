use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::score_bin;
use crate::error::{Error, Result};

fn check_lengths<T>(golds: &[T], preds: &[T]) -> Result<()> {
    if golds.len() != preds.len() {
        return Err(Error::Dimension(format!("{} golds against {} predictions", golds.len(), preds.len())));
    }
    if golds.is_empty() {
        return Err(Error::UndefinedMetric("no samples".into()));
    }
    Ok(())
}

/// F1 of one class; zero when the class is never predicted correctly.
fn class_f1<T: PartialEq>(golds: &[T], preds: &[T], class: &T) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (g, p) in golds.iter().zip(preds) {
        match (g == class, p == class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Overall accuracy.
pub fn metric_wa<T: PartialEq>(golds: &[T], preds: &[T]) -> Result<f64> {
    check_lengths(golds, preds)?;
    let hits = golds.iter().zip(preds).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Support-weighted mean F1 over the gold classes.
pub fn metric_wf1<T: Ord>(golds: &[T], preds: &[T]) -> Result<f64> {
    check_lengths(golds, preds)?;
    let classes: BTreeSet<&T> = golds.iter().collect();
    let n = golds.len() as f64;
    Ok(classes
        .into_iter()
        .map(|c| {
            let support = golds.iter().filter(|g| *g == c).count() as f64;
            support / n * class_f1(golds, preds, c)
        })
        .sum())
}

/// Unweighted mean F1 over the gold classes other than `neutral`. Neutral
/// predictions still count as misses for the remaining classes.
pub fn metric_mf1_excl_neutral<T: Ord>(golds: &[T], preds: &[T], neutral: &T) -> Result<f64> {
    check_lengths(golds, preds)?;
    let classes: BTreeSet<&T> = golds.iter().filter(|g| *g != neutral).collect();
    if classes.is_empty() {
        return Err(Error::UndefinedMetric("every gold label is neutral".into()));
    }
    let k = classes.len() as f64;
    Ok(classes.into_iter().map(|c| class_f1(golds, preds, c)).sum::<f64>() / k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsaMetrics {
    pub mae: f64,
    pub acc7: f64,
    /// `None` when every gold score is exactly zero.
    pub acc2: Option<f64>,
}

/// MAE, 7-bin accuracy and sign accuracy over non-zero golds.
pub fn metrics_msa(golds: &[f64], preds: &[f64]) -> Result<MsaMetrics> {
    check_lengths(golds, preds)?;
    if golds.iter().chain(preds).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sentiment score".into()));
    }
    let n = golds.len() as f64;
    let mae = golds.iter().zip(preds).map(|(g, p)| (g - p).abs()).sum::<f64>() / n;
    let acc7 = golds.iter().zip(preds).filter(|(g, p)| score_bin(**g) == score_bin(**p)).count() as f64 / n;
    let signed: Vec<(f64, f64)> = golds.iter().zip(preds).filter(|(g, _)| **g != 0.0).map(|(g, p)| (*g, *p)).collect();
    let acc2 = (!signed.is_empty())
        .then(|| signed.iter().filter(|(g, p)| (*g > 0.0) == (*p > 0.0)).count() as f64 / signed.len() as f64);
    Ok(MsaMetrics { mae, acc7, acc2 })
}
