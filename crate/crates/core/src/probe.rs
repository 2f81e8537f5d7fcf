//! Attribute-leakage probe: a linear logistic classifier trained on unprotected
//! embeddings and evaluated on protected or reconstructed ones.
//!
//! Inputs are scaled to unit norm before the linear score, so predictions are
//! invariant to positive rescaling; for unit-norm data the rule is plain
//! `dot(w, v) + b >= 0`.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, ZERO_NORM};
use crate::error::{Error, Result};
use crate::permutation::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        ProbeHyper {
            epochs: 200,
            learning_rate: 0.1,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub folds: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1) over folds.
    pub std: f64,
    pub n_folds: usize,
    pub seed: u64,
}

impl ProbeReport {
    pub fn from_folds(folds: Vec<f64>, seed: u64) -> Self {
        let n = folds.len();
        let mean = folds.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            folds.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        ProbeReport {
            folds,
            mean,
            std: var.sqrt(),
            n_folds: n,
            seed,
        }
    }
}

fn unit_features(v: &Embedding) -> Vec<f64> {
    let x: Vec<f64> = v.as_slice().iter().map(|&a| a as f64).collect();
    let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm <= ZERO_NORM {
        return x;
    }
    x.into_iter().map(|a| a / norm).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, a)| w * a).sum::<f64>() + self.bias
    }

    pub fn predict(&self, v: &Embedding) -> Result<u8> {
        if v.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: v.dim(),
            });
        }
        Ok(u8::from(self.score(&unit_features(v)) >= 0.0))
    }

    /// Full-batch gradient descent on the mean logistic loss plus `l2/2 * |w|^2`,
    /// from zero weights.
    pub fn fit(x: &[Vec<f64>], y: &[u8], hyper: &ProbeHyper, seed: u64) -> LinearProbe {
        let dim = x.first().map_or(0, Vec::len);
        let n = x.len() as f64;
        let mut probe = LinearProbe {
            weights: vec![0.0; dim],
            bias: 0.0,
            meta: TrainingMeta {
                epochs: hyper.epochs,
                learning_rate: hyper.learning_rate,
                l2: hyper.l2,
                seed,
            },
        };
        let mut grad = vec![0.0; dim];
        for _ in 0..hyper.epochs {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_bias = 0.0;
            for (xi, &yi) in x.iter().zip(y) {
                let err = sigmoid(probe.score(xi)) - yi as f64;
                grad_bias += err;
                for (g, a) in grad.iter_mut().zip(xi) {
                    *g += err * a;
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= hyper.learning_rate * (g / n + hyper.l2 * *w);
            }
            probe.bias -= hyper.learning_rate * grad_bias / n;
        }
        probe
    }
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidConfig(format!("label {bad} is not binary")));
    }
    Ok(())
}

/// Fraction of `embeddings` whose predicted label equals `labels`.
pub fn evaluate_probe(probe: &LinearProbe, embeddings: &[Embedding], labels: &[u8]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.is_empty() {
        return Err(Error::TooFewExamples("nothing to evaluate".into()));
    }
    check_labels(labels)?;
    let correct = embeddings
        .iter()
        .zip(labels)
        .map(|(v, &l)| Ok(u32::from(probe.predict(v)? == l)))
        .sum::<Result<u32>>()?;
    Ok(correct as f64 / embeddings.len() as f64)
}

/// Per-fold probes with the stratified fold assignment used to train them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub probes: Vec<LinearProbe>,
    /// Held-out fold of each training example.
    pub fold_of: Vec<usize>,
    pub report: ProbeReport,
}

impl CrossValidation {
    /// Scores each fold's probe on the matching held-out positions of another
    /// view of the same examples (e.g. their protected embeddings).
    pub fn evaluate_held_out(&self, embeddings: &[Embedding], labels: &[u8]) -> Result<ProbeReport> {
        if embeddings.len() != self.fold_of.len() || labels.len() != self.fold_of.len() {
            return Err(Error::InvalidConfig(format!(
                "evaluation set has {} examples, training set had {}",
                embeddings.len(),
                self.fold_of.len()
            )));
        }
        let accuracies = self
            .probes
            .iter()
            .enumerate()
            .map(|(fold, probe)| {
                let (xs, ys): (Vec<Embedding>, Vec<u8>) = self
                    .fold_of
                    .iter()
                    .enumerate()
                    .filter(|(_, &f)| f == fold)
                    .map(|(i, _)| (embeddings[i].clone(), labels[i]))
                    .unzip();
                evaluate_probe(probe, &xs, &ys)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProbeReport::from_folds(accuracies, self.report.seed))
    }
}

/// Stratified assignment: each class is shuffled with `seed`, then dealt round-robin.
fn stratified_folds(labels: &[u8], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    let mut fold_of = vec![0; labels.len()];
    let mut dealt = 0;
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold_of[i] = dealt % folds;
            dealt += 1;
        }
    }
    fold_of
}

/// K-fold stratified cross-validation of the linear probe.
pub fn train_probe(
    embeddings: &[Embedding],
    labels: &[u8],
    folds: usize,
    hyper: &ProbeHyper,
    seed: u64,
) -> Result<CrossValidation> {
    if embeddings.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    check_labels(labels)?;
    if folds < 2 {
        return Err(Error::InvalidConfig("at least 2 folds are required".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    if positives < 2 || negatives < 2 {
        return Err(Error::TooFewExamples("need at least 2 examples per class".into()));
    }
    if labels.len() < folds {
        return Err(Error::TooFewExamples(format!(
            "{} examples cannot fill {folds} folds",
            labels.len()
        )));
    }
    let dim = embeddings[0].dim();
    if let Some(e) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: e.dim(),
        });
    }

    let features: Vec<Vec<f64>> = embeddings.par_iter().map(unit_features).collect();
    let fold_of = stratified_folds(labels, folds, seed);
    let results: Vec<(LinearProbe, f64)> = (0..folds)
        .into_par_iter()
        .map(|fold| {
            let (train_x, train_y): (Vec<Vec<f64>>, Vec<u8>) = fold_of
                .iter()
                .enumerate()
                .filter(|(_, &f)| f != fold)
                .map(|(i, _)| (features[i].clone(), labels[i]))
                .unzip();
            let probe = LinearProbe::fit(&train_x, &train_y, hyper, seed);
            let (held_x, held_y): (Vec<Embedding>, Vec<u8>) = fold_of
                .iter()
                .enumerate()
                .filter(|(_, &f)| f == fold)
                .map(|(i, _)| (embeddings[i].clone(), labels[i]))
                .unzip();
            let accuracy = evaluate_probe(&probe, &held_x, &held_y)?;
            Ok((probe, accuracy))
        })
        .collect::<Result<_>>()?;
    let (probes, accuracies): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(CrossValidation {
        probes,
        fold_of,
        report: ProbeReport::from_folds(accuracies, seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthSpec};
    use rand::Rng;

    fn split(spec: &SynthSpec) -> (Vec<Embedding>, Vec<u8>) {
        let d = generate(spec).unwrap();
        let x = d.records().iter().map(|r| r.embedding.clone()).collect();
        (x, d.attributes().unwrap())
    }

    #[test]
    fn identical_features_give_chance() {
        let x = vec![Embedding::new(vec![0.3, -0.1, 0.7]).unwrap(); 100];
        let y: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let cv = train_probe(&x, &y, 5, &ProbeHyper::default(), 1).unwrap();
        assert!((cv.report.mean - 0.5).abs() <= 0.05, "{}", cv.report.mean);
    }

    #[test]
    fn separable_attribute_is_learned() {
        let (x, y) = split(&SynthSpec {
            n_identities: 200,
            ..SynthSpec::reference()
        });
        let cv = train_probe(&x, &y, 5, &ProbeHyper::default(), 7).unwrap();
        assert!(cv.report.mean >= 0.95, "{:?}", cv.report);
        assert_eq!(cv.report.n_folds, 5);
    }

    #[test]
    fn deterministic_report() {
        let (x, y) = split(&SynthSpec {
            n_identities: 60,
            ..SynthSpec::reference()
        });
        let a = train_probe(&x, &y, 5, &ProbeHyper::default(), 3).unwrap();
        let b = train_probe(&x, &y, 5, &ProbeHyper::default(), 3).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn report_statistics_match_folds() {
        let r = ProbeReport::from_folds(vec![0.5, 0.7, 0.6], 0);
        assert_eq!(r.mean, (0.5 + 0.7 + 0.6) / 3.0);
        let m = r.mean;
        let var = ((0.5 - m).powi(2) + (0.7 - m).powi(2) + (0.6 - m).powi(2)) / 2.0;
        assert_eq!(r.std, var.sqrt());
    }

    #[test]
    fn flipped_labels_complement_accuracy() {
        let (x, y) = split(&SynthSpec {
            n_identities: 40,
            intra_sigma: 0.3,
            attribute_offset: 0.05,
            ..SynthSpec::reference()
        });
        let cv = train_probe(&x, &y, 2, &ProbeHyper::default(), 2).unwrap();
        let probe = &cv.probes[0];
        let acc = evaluate_probe(probe, &x, &y).unwrap();
        let flipped: Vec<u8> = y.iter().map(|l| 1 - l).collect();
        let acc_flipped = evaluate_probe(probe, &x, &flipped).unwrap();
        assert_eq!(acc + acc_flipped, 1.0);
    }

    #[test]
    fn training_accuracy_at_least_held_out() {
        let (x, y) = split(&SynthSpec {
            n_identities: 100,
            attribute_offset: 0.03,
            ..SynthSpec::reference()
        });
        let cv = train_probe(&x, &y, 5, &ProbeHyper::default(), 7).unwrap();
        let train_acc: f64 = cv
            .probes
            .iter()
            .enumerate()
            .map(|(fold, p)| {
                let (xs, ys): (Vec<Embedding>, Vec<u8>) = cv
                    .fold_of
                    .iter()
                    .enumerate()
                    .filter(|(_, &f)| f != fold)
                    .map(|(i, _)| (x[i].clone(), y[i]))
                    .unzip();
                evaluate_probe(p, &xs, &ys).unwrap()
            })
            .sum::<f64>()
            / 5.0;
        assert!(train_acc >= cv.report.mean, "{train_acc} < {}", cv.report.mean);
    }

    #[test]
    fn random_labels_concentrate_at_chance() {
        let (x, _) = split(&SynthSpec {
            n_identities: 200,
            ..SynthSpec::reference()
        });
        let mut rng = seeded_rng(99);
        let mut y: Vec<u8> = (0..x.len()).map(|i| (i % 2) as u8).collect();
        y.shuffle(&mut rng);
        let cv = train_probe(&x, &y, 5, &ProbeHyper::default(), 1).unwrap();
        let n = x.len() as f64;
        assert!((cv.report.mean - 0.5).abs() <= 3.0 / n.sqrt(), "{}", cv.report.mean);
    }

    #[test]
    fn prediction_is_scale_invariant() {
        let (x, y) = split(&SynthSpec {
            n_identities: 30,
            ..SynthSpec::reference()
        });
        let cv = train_probe(&x, &y, 3, &ProbeHyper::default(), 1).unwrap();
        let mut rng = seeded_rng(5);
        for v in &x {
            let c = rng.random_range(0.01f32..100.0);
            assert_eq!(cv.probes[0].predict(v).unwrap(), cv.probes[0].predict(&v.scaled(c).unwrap()).unwrap());
        }
    }

    #[test]
    fn error_cases() {
        let x = vec![Embedding::new(vec![1.0, 0.0]).unwrap(); 6];
        let h = ProbeHyper::default();
        assert!(matches!(train_probe(&x, &[1; 6], 2, &h, 0), Err(Error::SingleClass)));
        assert!(matches!(
            train_probe(&x, &[1, 0, 0, 0, 0, 0], 2, &h, 0),
            Err(Error::TooFewExamples(_))
        ));
        let cv = train_probe(&x, &[1, 1, 0, 0, 1, 0], 2, &h, 0).unwrap();
        let wrong = vec![Embedding::new(vec![1.0, 0.0, 0.0]).unwrap()];
        assert!(matches!(
            evaluate_probe(&cv.probes[0], &wrong, &[1]),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
    }
}
