//! Fréchet Audio Distance between Gaussian fits of two embedding sets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{input_err, FlabError, Result};

/// Eigenvalues below this are treated as numerical noise around zero.
pub const EIG_CLAMP: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl EmbeddingStats {
    /// Validates a given mean/covariance pair: symmetric, numerically PSD, `n >= 2`.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return input_err(format!(
                "covariance {:?} does not match mean of length {d}",
                sigma.shape()
            ));
        }
        if n < 2 {
            return input_err(format!("statistics need at least 2 samples, got {n}"));
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > 1e-9 * scale {
            return input_err("covariance is not symmetric");
        }
        let min_eig = sigma.clone().symmetric_eigenvalues().min();
        if min_eig < EIG_CLAMP * scale {
            return input_err(format!(
                "covariance is not positive semi-definite (eigenvalue {min_eig:.3e})"
            ));
        }
        Ok(Self { mu, sigma, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and `1/(n-1)` covariance, symmetrized.
pub fn fit_stats(embeddings: &[Embedding]) -> Result<EmbeddingStats> {
    let n = embeddings.len();
    if n < 2 {
        return input_err(format!("FAD statistics need at least 2 embeddings, got {n}"));
    }
    let d = embeddings[0].dim();
    if embeddings.iter().any(|e| e.dim() != d) {
        return input_err("embeddings have mixed dimensions");
    }
    let mut mu = DVector::zeros(d);
    for e in embeddings {
        mu += DVector::from_vec(e.to_f64());
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for e in embeddings {
        let x = DVector::from_vec(e.to_f64()) - &mu;
        sigma.ger(1.0, &x, &x, 1.0);
    }
    sigma /= (n - 1) as f64;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(EmbeddingStats { mu, sigma, n })
}

fn eigen(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    m.clone().try_symmetric_eigen(1e-14, 10_000).ok_or_else(|| {
        let diag = m.diagonal();
        FlabError::Numerical(format!(
            "eigendecomposition of {what} did not converge (dim {}, diagonal range {:.3e}..{:.3e})",
            m.nrows(),
            diag.min(),
            diag.max()
        ))
    })
}

/// PSD square root via eigendecomposition, negative eigenvalues clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m, "covariance")?;
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose())
}

/// `tr sqrt(Sr St)`, computed as `tr sqrt(sqrt(Sr) St sqrt(Sr))` on the symmetrized product.
pub fn trace_sqrt_product(sr: &DMatrix<f64>, st: &DMatrix<f64>) -> Result<f64> {
    let root = sqrt_psd(sr)?;
    let m = &root * st * &root;
    let m = (&m + m.transpose()) * 0.5;
    let e = eigen(&m, "covariance product")?;
    Ok(e.eigenvalues
        .iter()
        .map(|&l| if l < EIG_CLAMP { 0.0 } else { l.max(0.0).sqrt() })
        .sum())
}

/// `||mu_r - mu_t||^2 + tr(Sr + St - 2 sqrt(Sr St))`, clamped at zero.
pub fn frechet_distance(r: &EmbeddingStats, t: &EmbeddingStats) -> Result<f64> {
    if r.dim() != t.dim() {
        return input_err(format!("FAD dimension mismatch: {} vs {}", r.dim(), t.dim()));
    }
    let mean_term = (&r.mu - &t.mu).norm_squared();
    let cross = trace_sqrt_product(&r.sigma, &t.sigma)?;
    let f = mean_term + r.sigma.trace() + t.sigma.trace() - 2.0 * cross;
    if !f.is_finite() {
        return Err(FlabError::Numerical(format!("FAD evaluated to {f}")));
    }
    Ok(f.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFad {
    /// `None` when either side has fewer than two clips of the class.
    pub fad: Option<f64>,
    pub n_generated: usize,
    pub n_reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadReport {
    pub extractor: String,
    pub per_class: BTreeMap<String, ClassFad>,
    /// FAD between the union of all generated and all reference clips.
    pub pooled: Option<f64>,
}

impl FadReport {
    /// Mean of the per-class values that are present.
    pub fn class_mean(&self) -> Option<f64> {
        let vals: Vec<f64> = self.per_class.values().filter_map(|c| c.fad).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn get(&self, class: &str) -> Option<f64> {
        self.per_class.get(class).and_then(|c| c.fad)
    }

    /// `class,F,n_generated,n_reference`; absent classes carry `absent` in the F column.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,F,n_generated,n_reference\n");
        for (class, c) in &self.per_class {
            let f = c.fad.map(|v| format!("{v:.6}")).unwrap_or_else(|| "absent".into());
            let _ = writeln!(s, "{class},{f},{},{}", c.n_generated, c.n_reference);
        }
        let pooled = self
            .pooled
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "absent".into());
        let (ng, nr) = self
            .per_class
            .values()
            .fold((0, 0), |(g, r), c| (g + c.n_generated, r + c.n_reference));
        let _ = writeln!(s, "pooled,{pooled},{ng},{nr}");
        s
    }

    /// One JSON object per class, then the pooled value.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for (class, c) in &self.per_class {
            let line = serde_json::json!({
                "extractor": self.extractor,
                "class": class,
                "fad": c.fad,
                "n_generated": c.n_generated,
                "n_reference": c.n_reference,
            });
            s.push_str(&serde_json::to_string(&line)?);
            s.push('\n');
        }
        let line = serde_json::json!({"extractor": self.extractor, "class": "pooled", "fad": self.pooled});
        s.push_str(&serde_json::to_string(&line)?);
        s.push('\n');
        Ok(s)
    }
}

/// Per-class and pooled FAD over grouped embeddings; the report carries exactly `classes`.
pub fn evaluate_fad(
    generated: &BTreeMap<String, Vec<Embedding>>,
    reference: &BTreeMap<String, Vec<Embedding>>,
    classes: &[String],
    extractor: &str,
) -> Result<FadReport> {
    let empty = Vec::new();
    let mut per_class = BTreeMap::new();
    for class in classes {
        let g = generated.get(class).unwrap_or(&empty);
        let r = reference.get(class).unwrap_or(&empty);
        let fad = if g.len() >= 2 && r.len() >= 2 {
            Some(frechet_distance(&fit_stats(g)?, &fit_stats(r)?)?)
        } else {
            None
        };
        per_class.insert(
            class.clone(),
            ClassFad {
                fad,
                n_generated: g.len(),
                n_reference: r.len(),
            },
        );
    }
    let all = |m: &BTreeMap<String, Vec<Embedding>>| -> Vec<Embedding> {
        classes.iter().filter_map(|c| m.get(c)).flatten().cloned().collect()
    };
    let (ga, ra) = (all(generated), all(reference));
    let pooled = if ga.len() >= 2 && ra.len() >= 2 {
        Some(frechet_distance(&fit_stats(&ga)?, &fit_stats(&ra)?)?)
    } else {
        None
    };
    Ok(FadReport {
        extractor: extractor.to_string(),
        per_class,
        pooled,
    })
}
