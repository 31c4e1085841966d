//! Evaluation battery: flip ratio, bounded KL complement, pixel l1,
//! correlation difference, diversity, attribute-change counts, embedding
//! verification accuracy and the Frechet embedding distance with its
//! equal-count subsampling protocol.
//!
//! Population conventions: BKL, l1, MNAC, verification accuracy and the
//! Frechet protocol run on successful explanations only; diversity uses all
//! runs including failures. Success-only metrics are therefore unchanged by
//! appending failed results.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::CounterfactualResult;
use crate::nets::{AttributeTarget, Classifier, Embedder, Oracle};
use crate::Image;

/// Fraction of explanations that fooled the classifier.
pub fn flip_ratio(results: &[CounterfactualResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput("flip ratio of no results".into()));
    }
    let flips = results.iter().filter(|r| r.success).count();
    Ok(flips as f64 / results.len() as f64)
}

/// Bounded confidence complement of the target posterior,
/// `1 - C(y | counterfactual)`.
pub fn bkl(classifier: &dyn Classifier, counterfactual: &Image, y: AttributeTarget) -> Result<f64> {
    Ok(1.0 - classifier.posterior(counterfactual, y)?)
}

/// Mean absolute per-pixel difference.
pub fn l1_distance(x: &Image, counterfactual: &Image) -> Result<f64> {
    if x.dim() != counterfactual.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.dim()),
            got: format!("{:?}", counterfactual.dim()),
        });
    }
    Ok((x - counterfactual).mapv(f64::abs).mean().unwrap_or(0.0))
}

/// Signed oracle decision change for attribute `a`: -1, 0 or +1.
pub fn delta_attribute(
    oracle: &dyn Oracle,
    x: &Image,
    counterfactual: &Image,
    a: usize,
) -> Result<i8> {
    if a >= oracle.num_attributes() {
        return Err(Error::InvalidAttribute {
            index: a,
            count: oracle.num_attributes(),
        });
    }
    let before = oracle.decide_attributes(x)[a] as i8;
    let after = oracle.decide_attributes(counterfactual)[a] as i8;
    Ok(after - before)
}

/// Pearson coefficient or an explicit degenerate marker for zero-variance
/// series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    Value(f64),
    Degenerate,
}

impl Correlation {
    pub fn value(&self) -> Option<f64> {
        match self {
            Correlation::Value(v) => Some(*v),
            Correlation::Degenerate => None,
        }
    }
}

pub fn pearson(series_a: &[f64], series_b: &[f64]) -> Result<Correlation> {
    if series_a.len() != series_b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", series_a.len()),
            got: format!("{}", series_b.len()),
        });
    }
    if series_a.len() < 2 {
        return Err(Error::EmptyInput("pearson needs length >= 2".into()));
    }
    let constant = |s: &[f64]| s.iter().all(|v| *v == s[0]);
    if constant(series_a) || constant(series_b) {
        return Ok(Correlation::Degenerate);
    }
    let n = series_a.len() as f64;
    let ma = series_a.iter().sum::<f64>() / n;
    let mb = series_b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (a, b) in series_a.iter().zip(series_b.iter()) {
        cov += (a - ma) * (b - mb);
        va += (a - ma) * (a - ma);
        vb += (b - mb) * (b - mb);
    }
    Ok(Correlation::Value((cov / (va * vb).sqrt()).clamp(-1.0, 1.0)))
}

/// Per-attribute row of a correlation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub attribute: usize,
    pub name: String,
    pub true_correlation: Correlation,
    pub method_correlation: Correlation,
    /// Counts of delta values (-1, 0, +1) over the evaluated explanations.
    pub delta_counts: [usize; 3],
}

/// Gap between ground-truth label correlations and the correlations of
/// oracle-decision changes induced by the method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub query_attribute: usize,
    pub rows: Vec<CorrelationRow>,
    /// Sum over non-query, non-degenerate attributes of
    /// `|c_qa - c_qa_method|`; absent when fewer than two successes exist.
    pub cd_value: Option<f64>,
    pub degenerate_attributes: Vec<usize>,
    pub successes_used: usize,
}

/// Computes the correlation report for query attribute `q`.
///
/// True correlations come from the provided label rows (the training split);
/// method correlations come from oracle-decision deltas over successful
/// explanations only.
pub fn correlation_difference(
    oracle: &dyn Oracle,
    dataset_labels: &[Vec<bool>],
    attribute_names: &[String],
    results: &[CounterfactualResult],
    q: usize,
) -> Result<CorrelationReport> {
    let k = oracle.num_attributes();
    if q >= k {
        return Err(Error::InvalidAttribute { index: q, count: k });
    }
    if dataset_labels.is_empty() {
        return Err(Error::EmptyInput("no dataset labels".into()));
    }

    let successes: Vec<&CounterfactualResult> = results.iter().filter(|r| r.success).collect();
    // Delta series per attribute over successful explanations.
    let mut deltas: Vec<Vec<f64>> = vec![Vec::with_capacity(successes.len()); k];
    for r in &successes {
        let before = oracle.decide_attributes(&r.query);
        let after = oracle.decide_attributes(&r.counterfactual);
        for a in 0..k {
            deltas[a].push(after[a] as i8 as f64 - before[a] as i8 as f64);
        }
    }

    let label_series: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            dataset_labels
                .iter()
                .map(|row| row[a] as u8 as f64)
                .collect()
        })
        .collect();

    let enough = successes.len() >= 2;
    let mut rows = Vec::with_capacity(k);
    let mut degenerate = Vec::new();
    let mut cd = 0.0;
    let mut cd_defined = enough;
    for a in 0..k {
        let true_corr = pearson(&label_series[q], &label_series[a])?;
        let method_corr = if enough {
            pearson(&deltas[q], &deltas[a])?
        } else {
            Correlation::Degenerate
        };
        let mut counts = [0usize; 3];
        for d in &deltas[a] {
            counts[(*d as i8 + 1) as usize] += 1;
        }
        if a != q {
            match (true_corr, method_corr) {
                (Correlation::Value(t), Correlation::Value(m)) => cd += (t - m).abs(),
                _ => degenerate.push(a),
            }
        }
        rows.push(CorrelationRow {
            attribute: a,
            name: attribute_names
                .get(a)
                .cloned()
                .unwrap_or_else(|| format!("attr{}", a)),
            true_correlation: true_corr,
            method_correlation: method_corr,
            delta_counts: counts,
        });
    }
    if !enough {
        cd_defined = false;
    }
    Ok(CorrelationReport {
        query_attribute: q,
        rows,
        cd_value: cd_defined.then_some(cd),
        degenerate_attributes: degenerate,
        successes_used: successes.len(),
    })
}

/// Mean pairwise distance between independent runs, averaged over queries.
/// All runs count, including unsuccessful ones; the query image itself is
/// not part of the comparison.
pub fn diversity_score(
    distance: &dyn Fn(&Image, &Image) -> Result<f64>,
    runs_per_query: &[Vec<Image>],
) -> Result<f64> {
    if runs_per_query.is_empty() {
        return Err(Error::EmptyInput("no queries".into()));
    }
    let mut query_means = Vec::with_capacity(runs_per_query.len());
    for runs in runs_per_query {
        if runs.len() < 2 {
            return Err(Error::InvalidConfig(
                "diversity needs at least two runs per query".into(),
            ));
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..runs.len() {
            for j in (i + 1)..runs.len() {
                total += distance(&runs[i], &runs[j])?;
                pairs += 1;
            }
        }
        query_means.push(total / pairs as f64);
    }
    Ok(query_means.iter().sum::<f64>() / query_means.len() as f64)
}

/// Mean number of attributes whose oracle decision changed, over a
/// success-only population of (query, counterfactual) pairs.
pub fn mnac(oracle: &dyn Oracle, pairs: &[(&Image, &Image)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("mnac of no pairs".into()));
    }
    let mut total = 0usize;
    for (x, cf) in pairs {
        let before = oracle.decide_attributes(x);
        let after = oracle.decide_attributes(cf);
        total += before
            .iter()
            .zip(after.iter())
            .filter(|(b, a)| b != a)
            .count();
    }
    Ok(total as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerificationSummary {
    /// Fraction of compared pairs with embedding cosine similarity > 0.5.
    pub accuracy: f64,
    pub compared: usize,
    /// Pairs dropped because an embedding had zero norm.
    pub excluded: usize,
}

pub fn verification_accuracy(
    embedder: &dyn Embedder,
    pairs: &[(&Image, &Image)],
) -> Result<VerificationSummary> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("verification of no pairs".into()));
    }
    let mut kept = 0usize;
    let mut excluded = 0usize;
    let mut hits = 0usize;
    for (x, cf) in pairs {
        let ea = embedder.embed(x);
        let eb = embedder.embed(cf);
        let na = ea.dot(&ea).sqrt();
        let nb = eb.dot(&eb).sqrt();
        if na == 0.0 || nb == 0.0 {
            excluded += 1;
            continue;
        }
        kept += 1;
        if ea.dot(&eb) / (na * nb) > 0.5 {
            hits += 1;
        }
    }
    if kept == 0 {
        return Err(Error::Degenerate(
            "all embeddings had zero norm".into(),
        ));
    }
    Ok(VerificationSummary {
        accuracy: hits as f64 / kept as f64,
        compared: kept,
        excluded,
    })
}

fn mean_and_covariance(samples: &Array2<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = samples.dim();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "need >= 2 samples for covariance, got {}",
            n
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding samples".into()));
    }
    let mut mean = DVector::zeros(d);
    for row in samples.rows() {
        for (j, v) in row.iter().enumerate() {
            mean[j] += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in samples.rows() {
        let centered = DVector::from_iterator(d, row.iter().copied()) - &mean;
        cov += &centered * centered.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

const EIGEN_CLIP_REL_TOL: f64 = 1e-10;

/// Symmetric PSD square root via eigendecomposition, clipping eigenvalues
/// within tolerance of zero and rejecting anything clearly negative.
fn sqrt_psd(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = EIGEN_CLIP_REL_TOL * max_abs.max(1.0);
    let mut clipped = eig.eigenvalues.clone();
    for v in clipped.iter_mut() {
        if *v < -tol {
            return Err(Error::Degenerate(format!(
                "{}: eigenvalue {} below -{} (not PSD)",
                context, v, tol
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let lam = DMatrix::from_diagonal(&clipped);
    Ok(&eig.eigenvectors * lam * eig.eigenvectors.transpose())
}

/// Frechet distance between the Gaussian summaries of two embedding sets:
/// `|mu_a - mu_b|^2 + Tr(Ca + Cb - 2 (Ca Cb)^{1/2})`.
pub fn frechet_distance(embeddings_a: &Array2<f64>, embeddings_b: &Array2<f64>) -> Result<f64> {
    if embeddings_a.ncols() != embeddings_b.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("dim {}", embeddings_a.ncols()),
            got: format!("dim {}", embeddings_b.ncols()),
        });
    }
    let (mu_a, cov_a) = mean_and_covariance(embeddings_a)?;
    let (mu_b, cov_b) = mean_and_covariance(embeddings_b)?;
    let sqrt_a = sqrt_psd(&cov_a, "first covariance")?;
    // Tr((Ca Cb)^{1/2}) computed from the symmetric form
    // sqrt(Ca) Cb sqrt(Ca).
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = EIGEN_CLIP_REL_TOL * max_abs.max(1.0);
    let mut tr_sqrt = 0.0;
    for v in eig.eigenvalues.iter() {
        if *v < -tol {
            return Err(Error::Degenerate(format!(
                "covariance product eigenvalue {} below -{}",
                v, tol
            )));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let diff = &mu_a - &mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if value < -1e-6 {
        return Err(Error::Degenerate(format!(
            "negative distance {} beyond tolerance",
            value
        )));
    }
    Ok(value.max(0.0))
}

/// Equal-count protocol: subsample the method embeddings to `subsample_size`
/// without replacement, compute the Frechet distance against the full
/// reference, repeat, and report mean and standard deviation.
pub fn fid_plus_protocol(
    reference: &Array2<f64>,
    samples: &Array2<f64>,
    subsample_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("zero repeats".into()));
    }
    if subsample_size < 2 || subsample_size > samples.nrows() {
        return Err(Error::InvalidConfig(format!(
            "subsample size {} outside 2..={}",
            subsample_size,
            samples.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let picked = rand::seq::index::sample(&mut rng, samples.nrows(), subsample_size);
        let mut sub = Array2::zeros((subsample_size, samples.ncols()));
        for (row, idx) in picked.iter().enumerate() {
            sub.row_mut(row).assign(&samples.row(idx));
        }
        values.push(frechet_distance(reference, &sub)?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Aggregate report over one batch of explanations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub variant: String,
    pub queries: usize,
    pub successes: usize,
    pub failures: usize,
    pub flip_ratio: f64,
    /// Mean over successful explanations; absent without successes.
    pub mean_bkl: Option<f64>,
    pub mean_l1: Option<f64>,
    pub mnac: Option<f64>,
    pub verification_accuracy: Option<f64>,
    pub verification_excluded: usize,
    pub diversity: Option<f64>,
    pub frechet_mean: Option<f64>,
    pub frechet_std: Option<f64>,
    pub mean_model_evals: f64,
}

/// Computes the success-only scalar metrics for one result batch. Diversity
/// and Frechet values need extra inputs and are filled in by the caller.
pub fn evaluate(
    classifier: &dyn Classifier,
    oracle: &dyn Oracle,
    embedder: &dyn Embedder,
    results: &[CounterfactualResult],
) -> Result<EvaluationReport> {
    let fr = flip_ratio(results)?;
    let successes: Vec<&CounterfactualResult> = results.iter().filter(|r| r.success).collect();
    let variant = results
        .first()
        .map(|r| r.variant.to_string())
        .unwrap_or_default();
    let mut mean_bkl = None;
    let mut mean_l1 = None;
    let mut mnac_value = None;
    let mut fva = None;
    let mut fva_excluded = 0;
    if !successes.is_empty() {
        let mut b = 0.0;
        let mut l = 0.0;
        for r in &successes {
            b += bkl(classifier, &r.counterfactual, r.target)?;
            l += l1_distance(&r.query, &r.counterfactual)?;
        }
        mean_bkl = Some(b / successes.len() as f64);
        mean_l1 = Some(l / successes.len() as f64);
        let pairs: Vec<(&Image, &Image)> = successes
            .iter()
            .map(|r| (&r.query, &r.counterfactual))
            .collect();
        mnac_value = Some(mnac(oracle, &pairs)?);
        let v = verification_accuracy(embedder, &pairs)?;
        fva = Some(v.accuracy);
        fva_excluded = v.excluded;
    }
    Ok(EvaluationReport {
        variant,
        queries: results.len(),
        successes: successes.len(),
        failures: results.len() - successes.len(),
        flip_ratio: fr,
        mean_bkl,
        mean_l1,
        mnac: mnac_value,
        verification_accuracy: fva,
        verification_excluded: fva_excluded,
        diversity: None,
        frechet_mean: None,
        frechet_std: None,
        mean_model_evals: results.iter().map(|r| r.model_eval_count as f64).sum::<f64>()
            / results.len().max(1) as f64,
    })
}
