use std::sync::Arc;

use crate::tensor::{Tensor, Var};
use crate::{invalid, Result};

/// `(N, C, d1, d2, ..)` to rows `(N·d1·d2·.., C)`, one row per voxel.
pub fn class_rows(logits: Var<'_>) -> Result<Var<'_>> {
    let s = logits.shape();
    if s.len() < 2 {
        return Err(invalid("class rows", format!("expected (N, C, ...), got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    Ok(logits
        .reshape([n, c, spatial])?
        .permute(&[0, 2, 1])?
        .reshape([n * spatial, c])?)
}

/// Mean negative log-likelihood of `targets` (one per voxel, sample-major).
///
/// With `class_weights`, each voxel counts with the weight of its target class
/// and the sum is divided by the total weight.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[u16], class_weights: Option<&[f64]>) -> Result<Var<'t>> {
    let rows = class_rows(logits)?;
    let shape = rows.shape();
    let (r, c) = (shape[0], shape[1]);
    if targets.len() != r {
        return Err(invalid("cross entropy", format!("{} targets for {r} voxels", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(invalid("cross entropy", format!("target {bad} with {c} classes")));
    }
    let picked = rows
        .log_softmax()?
        .pick_last(Arc::new(targets.iter().map(|&t| t as usize).collect()))?;
    match class_weights {
        None => Ok(picked.mean().neg()),
        Some(w) => {
            if w.len() != c {
                return Err(invalid("cross entropy", format!("{} weights for {c} classes", w.len())));
            }
            let per: Vec<f64> = targets.iter().map(|&t| w[t as usize]).collect();
            let total: f64 = per.iter().sum();
            let wv = rows.tape().constant(Tensor::new([r], per)?);
            Ok(picked.mul(wv)?.sum().scale(-1.0 / total.max(f64::MIN_POSITIVE)))
        }
    }
}

/// Inverse-log-frequency class weights `1 / ln(1.02 + p_c)` from label counts.
pub fn class_weights(histogram: &[usize]) -> Vec<f64> {
    let total: usize = histogram.iter().sum();
    histogram
        .iter()
        .map(|&n| 1.0 / (1.02 + n as f64 / total.max(1) as f64).ln())
        .collect()
}
