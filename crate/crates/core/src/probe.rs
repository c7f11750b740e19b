//! Linear evaluation: extract frozen embeddings from a trained network and
//! train/evaluate a softmax classifier with leave-one-fold-out
//! cross-validation.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ProbeSource;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::mel;
use crate::network::{self, DualNetworkState, ParamVars};
use crate::ops::Mode;
use crate::tensor::Tensor;
use crate::wav::{load_wav, random_crop_clip, resample_linear};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub embedding: Vec<f64>,
    pub label: String,
    pub fold: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map(|r| r.embedding.len()).unwrap_or(0)
    }

    pub fn label_set(&self) -> Vec<String> {
        let mut labels = Vec::new();
        for row in &self.rows {
            if !labels.contains(&row.label) {
                labels.push(row.label.clone());
            }
        }
        labels
    }

    pub fn folds(&self) -> Vec<u32> {
        let mut folds: Vec<u32> = self.rows.iter().map(|r| r.fold).collect();
        folds.sort_unstable();
        folds.dedup();
        folds
    }
}

/// Run the frozen encoder in eval mode over every manifest clip. Each clip is
/// cropped (deterministically per seed) to the dataset's average duration.
pub fn extract_embeddings(
    state: &mut DualNetworkState,
    manifest: &Manifest,
    source: ProbeSource,
    use_projection: bool,
    seed: u64,
) -> Result<EmbeddingTable> {
    if manifest.is_empty() {
        return Err(Error::contract("manifest is empty"));
    }
    let mut clips = Vec::new();
    for row in &manifest.rows {
        match load_wav(&row.path).and_then(|c| resample_linear(&c, mel::SAMPLE_RATE)) {
            Ok(c) => clips.push((row, c)),
            Err(e) => eprintln!("warning: skipping {}: {e}", row.path.display()),
        }
    }
    if clips.is_empty() {
        return Err(Error::contract("no readable audio files in manifest"));
    }
    let avg_duration =
        clips.iter().map(|(_, c)| c.duration_seconds()).sum::<f64>() / clips.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = state.dims;
    let (m, e) = (state.bn_momentum, state.bn_eps);
    // the target branch has no predictor; encoder + projector mirror online
    let (encoder, projector) = match source {
        ProbeSource::Online => (&mut state.online.encoder, &mut state.online.projector),
        ProbeSource::Target => (&mut state.target.encoder, &mut state.target.projector),
    };
    let mut rows = Vec::with_capacity(clips.len());
    for (row, clip) in clips {
        let crop = random_crop_clip(&clip, avg_duration, &mut rng)?;
        let spec = mel::logmel(&crop)?.values;
        let frames = spec.shape()[0];
        let views = spec.reshaped(vec![1, frames, mel::N_MELS])?;
        let mut vars = ParamVars::default();
        let emb = network::encode_batch(
            encoder, &dims, &mut vars, "enc", &views, Mode::Eval, false, m, e,
        )?;
        let out = if use_projection {
            network::head_forward(projector, &mut vars, "proj", &emb, Mode::Eval, false, m, e)?
        } else {
            emb
        };
        rows.push(EmbeddingRow {
            id: row.path.to_string_lossy().into_owned(),
            embedding: out.value().data().to_vec(),
            label: row.label.clone(),
            fold: row.fold,
        });
    }
    Ok(EmbeddingTable { rows })
}

pub fn save_table(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "id,label,fold")?;
    for i in 0..table.dim() {
        write!(f, ",e{i}")?;
    }
    writeln!(f)?;
    for row in &table.rows {
        write!(f, "{},{},{}", row.id, row.label, row.fold)?;
        for v in &row.embedding {
            write!(f, ",{v:.9e}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Multinomial logistic regression over standardized embeddings.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    /// classes x dim
    pub weights: Tensor,
    pub bias: Vec<f64>,
    /// per-dimension standardization from the training folds
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub labels: Vec<String>,
}

impl LinearClassifier {
    fn standardized(&self, embedding: &[f64]) -> Vec<f64> {
        embedding
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&x, &m), &s)| (x - m) / s)
            .collect()
    }

    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        let x = self.standardized(embedding);
        let c = self.labels.len();
        let d = x.len();
        (0..c)
            .map(|k| {
                self.bias[k]
                    + self.weights.data()[k * d..(k + 1) * d]
                        .iter()
                        .zip(&x)
                        .map(|(w, xv)| w * xv)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, embedding: &[f64]) -> usize {
        let logits = self.logits(embedding);
        logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Full-batch gradient descent on softmax cross-entropy. Returns the
/// classifier and the per-iteration loss trace.
pub fn train_linear(
    table: &EmbeddingTable,
    train_folds: &[u32],
    lr: f64,
    iters: usize,
) -> Result<(LinearClassifier, Vec<f64>)> {
    let labels = table.label_set();
    let train: Vec<&EmbeddingRow> =
        table.rows.iter().filter(|r| train_folds.contains(&r.fold)).collect();
    if train.is_empty() {
        return Err(Error::contract("no rows in the selected training folds"));
    }
    let train_labels: Vec<usize> = train
        .iter()
        .map(|r| labels.iter().position(|l| *l == r.label).unwrap())
        .collect();
    {
        let mut seen: Vec<usize> = train_labels.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() < 2 {
            return Err(Error::contract(
                "training folds contain a single class; cannot fit a classifier",
            ));
        }
    }
    let d = table.dim();
    let n = train.len();
    let c = labels.len();

    // standardization from training folds only
    let mut mean = vec![0.0; d];
    for r in &train {
        for (m, &x) in mean.iter_mut().zip(&r.embedding) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut std = vec![0.0; d];
    for r in &train {
        for ((s, &x), &m) in std.iter_mut().zip(&r.embedding).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    for s in &mut std {
        *s = (*s / n as f64).sqrt().max(1e-8);
    }

    let x: Vec<Vec<f64>> = train
        .iter()
        .map(|r| {
            r.embedding
                .iter()
                .zip(&mean)
                .zip(&std)
                .map(|((&v, &m), &s)| (v - m) / s)
                .collect()
        })
        .collect();

    let mut weights = Tensor::zeros(vec![c, d]);
    let mut bias = vec![0.0; c];
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut grad_w = vec![0.0; c * d];
        let mut grad_b = vec![0.0; c];
        let mut loss = 0.0;
        for (xi, &yi) in x.iter().zip(&train_labels) {
            let logits: Vec<f64> = (0..c)
                .map(|k| {
                    bias[k]
                        + weights.data()[k * d..(k + 1) * d]
                            .iter()
                            .zip(xi)
                            .map(|(w, v)| w * v)
                            .sum::<f64>()
                })
                .collect();
            let p = softmax(&logits);
            loss -= p[yi].max(1e-300).ln();
            for k in 0..c {
                let err = p[k] - if k == yi { 1.0 } else { 0.0 };
                grad_b[k] += err;
                for (g, &v) in grad_w[k * d..(k + 1) * d].iter_mut().zip(xi) {
                    *g += err * v;
                }
            }
        }
        loss /= n as f64;
        trace.push(loss);
        let scale = lr / n as f64;
        for (w, g) in weights.data_mut().iter_mut().zip(&grad_w) {
            *w -= scale * g;
        }
        for (b, g) in bias.iter_mut().zip(&grad_b) {
            *b -= scale * g;
        }
    }

    Ok((LinearClassifier { weights, bias, mean, std, labels }, trace))
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub accuracy: f64,
    /// (label, correct, total) per class
    pub per_class: Vec<(String, usize, usize)>,
}

pub fn evaluate(
    clf: &LinearClassifier,
    table: &EmbeddingTable,
    test_fold: u32,
) -> Result<EvalReport> {
    let test: Vec<&EmbeddingRow> =
        table.rows.iter().filter(|r| r.fold == test_fold).collect();
    if test.is_empty() {
        return Err(Error::contract(format!("test fold {test_fold} is empty")));
    }
    let mut per_class: Vec<(String, usize, usize)> =
        clf.labels.iter().map(|l| (l.clone(), 0, 0)).collect();
    let mut correct = 0;
    for row in &test {
        let pred = clf.predict(&row.embedding);
        let truth = clf.labels.iter().position(|l| *l == row.label).ok_or_else(|| {
            Error::contract(format!("label {} absent from the classifier's label set", row.label))
        })?;
        per_class[truth].2 += 1;
        if pred == truth {
            per_class[truth].1 += 1;
            correct += 1;
        }
    }
    Ok(EvalReport { accuracy: correct as f64 / test.len() as f64, per_class })
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub per_fold: Vec<(u32, f64)>,
    pub mean_accuracy: f64,
}

/// Leave-one-fold-out cross-validation.
pub fn cross_validate(table: &EmbeddingTable, lr: f64, iters: usize) -> Result<ProbeReport> {
    let folds = table.folds();
    if folds.len() < 2 {
        return Err(Error::contract("cross-validation needs at least two folds"));
    }
    let mut per_fold = Vec::with_capacity(folds.len());
    for &test_fold in &folds {
        let train_folds: Vec<u32> = folds.iter().copied().filter(|&f| f != test_fold).collect();
        let (clf, _) = train_linear(table, &train_folds, lr, iters)?;
        let report = evaluate(&clf, table, test_fold)?;
        per_fold.push((test_fold, report.accuracy));
    }
    let mean_accuracy =
        per_fold.iter().map(|(_, a)| a).sum::<f64>() / per_fold.len() as f64;
    Ok(ProbeReport { per_fold, mean_accuracy })
}

pub fn report_json(report: &ProbeReport, source: ProbeSource) -> String {
    let folds: Vec<serde_json::Value> = report
        .per_fold
        .iter()
        .map(|(fold, acc)| serde_json::json!({ "fold": fold, "accuracy": acc }))
        .collect();
    serde_json::json!({
        "source": source.to_string(),
        "per_fold": folds,
        "mean_accuracy": report.mean_accuracy,
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn table_from(rows: Vec<(Vec<f64>, &str, u32)>) -> EmbeddingTable {
        EmbeddingTable {
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (embedding, label, fold))| EmbeddingRow {
                    id: format!("row{i}"),
                    embedding,
                    label: label.to_string(),
                    fold,
                })
                .collect(),
        }
    }

    fn separable_two_class(n_per: usize, fold_split: bool) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut rows = Vec::new();
        for i in 0..n_per {
            let fold = if fold_split { (i % 2) as u32 } else { 0 };
            rows.push((
                vec![2.0 + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                "a",
                fold,
            ));
            rows.push((
                vec![-2.0 + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                "b",
                fold,
            ));
        }
        table_from(rows)
    }

    #[test]
    fn separable_classes_reach_perfect_training_accuracy() {
        let table = separable_two_class(20, false);
        let (clf, _) = train_linear(&table, &[0], 0.5, 200).unwrap();
        let report = evaluate(&clf, &table, 0).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let labels = ["a", "b", "c", "d"];
        let rows: Vec<(Vec<f64>, &str, u32)> = (0..800)
            .map(|i| {
                let e: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (e, labels[rng.gen_range(0..4)], (i % 2) as u32)
            })
            .collect();
        let table = table_from(rows);
        let (clf, _) = train_linear(&table, &[0], 0.5, 100).unwrap();
        let report = evaluate(&clf, &table, 1).unwrap();
        assert!(
            (report.accuracy - 0.25).abs() <= 0.05,
            "accuracy {} not near chance",
            report.accuracy
        );
    }

    #[test]
    fn loss_decreases_monotonically_under_small_lr() {
        let table = separable_two_class(10, false);
        let (_, trace) = train_linear(&table, &[0], 0.05, 100).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn constant_class_zero_predictor_scores_class_share() {
        // balanced 4-class fold; a classifier whose bias singles out class 0
        let labels = ["a", "b", "c", "d"];
        let rows: Vec<(Vec<f64>, &str, u32)> =
            (0..40).map(|i| (vec![i as f64, 1.0], labels[i % 4], 0)).collect();
        let table = table_from(rows);
        let clf = LinearClassifier {
            weights: Tensor::zeros(vec![4, 2]),
            bias: vec![1.0, 0.0, 0.0, 0.0],
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        let report = evaluate(&clf, &table, 0).unwrap();
        assert_eq!(report.accuracy, 0.25);
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let table = separable_two_class(10, true);
        let (clf, _) = train_linear(&table, &[0], 0.5, 300).unwrap();
        let report = evaluate(&clf, &table, 1).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn accuracy_matches_hand_count_on_fixture() {
        let labels = ["a", "b"];
        let rows: Vec<(Vec<f64>, &str, u32)> = (0..10)
            .map(|i| (vec![i as f64 - 4.5, 0.3 * i as f64], labels[i % 2], 0))
            .collect();
        let table = table_from(rows);
        let clf = LinearClassifier {
            weights: Tensor::from_vec(vec![2, 2], vec![1.0, -0.2, -0.5, 0.4]),
            bias: vec![0.1, -0.1],
            mean: vec![0.5, -0.5],
            std: vec![2.0, 1.5],
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        let report = evaluate(&clf, &table, 0).unwrap();
        let mut correct = 0;
        for row in &table.rows {
            let x0 = (row.embedding[0] - 0.5) / 2.0;
            let x1 = (row.embedding[1] + 0.5) / 1.5;
            let l0 = 0.1 + x0 - 0.2 * x1;
            let l1 = -0.1 - 0.5 * x0 + 0.4 * x1;
            let pred = if l0 >= l1 { "a" } else { "b" };
            if pred == row.label {
                correct += 1;
            }
        }
        assert_eq!(report.accuracy, correct as f64 / 10.0);
        let total: usize = report.per_class.iter().map(|(_, _, t)| t).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn standardization_ignores_test_fold() {
        let mut table = separable_two_class(10, true);
        let (clf_a, _) = train_linear(&table, &[0], 0.5, 50).unwrap();
        // corrupt the test fold wildly; the fitted classifier must not move
        for row in table.rows.iter_mut().filter(|r| r.fold == 1) {
            for v in &mut row.embedding {
                *v *= 1e6;
            }
        }
        let (clf_b, _) = train_linear(&table, &[0], 0.5, 50).unwrap();
        assert_eq!(clf_a.weights, clf_b.weights);
        assert_eq!(clf_a.mean, clf_b.mean);
        assert_eq!(clf_a.std, clf_b.std);
    }

    #[test]
    fn single_class_training_fold_is_rejected() {
        let table = table_from(vec![
            (vec![1.0, 0.0], "a", 0),
            (vec![2.0, 0.0], "a", 0),
            (vec![-1.0, 0.0], "b", 1),
        ]);
        assert!(train_linear(&table, &[0], 0.5, 10).is_err());
    }

    #[test]
    fn empty_test_fold_is_rejected() {
        let table = separable_two_class(4, false);
        let (clf, _) = train_linear(&table, &[0], 0.5, 10).unwrap();
        assert!(evaluate(&clf, &table, 7).is_err());
    }

    #[test]
    fn cross_validation_covers_every_fold_once() {
        let table = separable_two_class(10, true);
        let report = cross_validate(&table, 0.5, 100).unwrap();
        let folds: Vec<u32> = report.per_fold.iter().map(|(f, _)| *f).collect();
        assert_eq!(folds, vec![0, 1]);
        assert!(report.mean_accuracy >= 0.9);
        let json = report_json(&report, ProbeSource::Online);
        assert!(json.contains("\"per_fold\""));
        assert!(json.contains("\"mean_accuracy\""));
    }
}
