//! Applying a trained pipeline to subjects, and the k-fold protocol.

use crate::error::{CqError, Result};
use crate::geometry::{quantify_sequence, Connectivity, IndexVector, MaskSequence, INDEX_COUNT, INDEX_NAMES};
use crate::imaging::dataset::Subject;
use crate::metrics::{MetricsReport, SubjectEval};
use crate::numfmt::sig6;

use super::kfold::{kfold_split, FoldSplit};
use super::model::Model;
use super::pipeline::{prepare_samples, train, LogRow, TrainConfig};

/// Full pipeline (G then D) on every subject.
pub fn evaluate(model: &Model, subjects: &[Subject]) -> Result<Vec<SubjectEval>> {
    subjects
        .iter()
        .map(|s| {
            let m = &s.masks;
            let p = model.predict(&s.images, m.spacing).map_err(|e| prefixed(&s.id, e))?;
            Ok(SubjectEval {
                id: s.id.clone(),
                spacing: m.spacing,
                height: m.height,
                width: m.width,
                pred_labels: p.labels,
                true_labels: m.labels.clone(),
                pred_indices: p.indices,
                true_indices: s.indices.clone(),
            })
        })
        .collect()
}

fn prefixed(id: &str, e: CqError) -> CqError {
    CqError::invalid("evaluate", format!("subject {id}: {e}"))
}

/// Source of hard label masks for geometric quantification.
pub trait Segmenter {
    fn labels(&self, subject: &Subject) -> Result<Vec<u8>>;
}

/// Returns the stored ground-truth masks.
pub struct IdentitySegmenter;

impl Segmenter for IdentitySegmenter {
    fn labels(&self, subject: &Subject) -> Result<Vec<u8>> {
        Ok(subject.masks.labels.clone())
    }
}

/// G with the model's post-processing.
impl Segmenter for Model {
    fn labels(&self, subject: &Subject) -> Result<Vec<u8>> {
        let m = &subject.masks;
        let seg = self.segment(&subject.images)?;
        Ok(self.clean_labels(&seg.labels, m.frames, m.height, m.width))
    }
}

/// Indices measured by the geometric oracle on the segmenter's masks.
pub fn quantify_subject(seg: &dyn Segmenter, subject: &Subject, conn: Connectivity) -> Result<Vec<IndexVector>> {
    let m = &subject.masks;
    let masks = MaskSequence::new(seg.labels(subject)?, m.frames, m.height, m.width, m.spacing)?;
    quantify_sequence(&masks, conn)
}

/// Per-frame predicted and true index curves.
pub fn curves_csv(evals: &[SubjectEval]) -> String {
    let mut s = String::from("subject,frame");
    for name in INDEX_NAMES {
        s.push_str(&format!(",pred_{name},true_{name}"));
    }
    s.push_str(",pred_phase,true_phase\n");
    for e in evals {
        for (f, (p, t)) in e.pred_indices.iter().zip(&e.true_indices).enumerate() {
            s.push_str(&format!("{},{f}", e.id));
            for i in 0..INDEX_COUNT {
                s.push_str(&format!(",{},{}", sig6(p.values[i]), sig6(t.values[i])));
            }
            s.push_str(&format!(",{},{}\n", p.phase, t.phase));
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub model: Model,
    pub log_primary: Vec<LogRow>,
    pub log_secondary: Vec<LogRow>,
    pub evals: Vec<SubjectEval>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub split: FoldSplit,
    pub folds: Vec<FoldResult>,
    /// Metrics over every held-out subject pooled together.
    pub aggregate: MetricsReport,
}

/// Trains on k−1 folds and tests on the remaining one, for each fold in turn.
/// Fold `i` uses seed `seed + 1 + i` for training.
pub fn cross_validate(subjects: &[Subject], cfg: &TrainConfig, k: usize, seed: u64) -> Result<CrossValidation> {
    if k < 2 {
        return Err(CqError::config("folds", format!("cross-validation needs at least 2 folds, got {k}")));
    }
    let split = kfold_split(subjects.len(), k, seed)?;
    let mut folds = Vec::with_capacity(k);
    let mut pooled = Vec::with_capacity(subjects.len());
    for (i, test) in split.folds.iter().enumerate() {
        let train_idx = split.train_indices(i);
        let train_set: Vec<Subject> = train_idx.iter().map(|&j| subjects[j].clone()).collect();
        let test_set: Vec<Subject> = test.iter().map(|&j| subjects[j].clone()).collect();
        let fold_seed = seed.wrapping_add(1 + i as u64);
        let samples = prepare_samples(&train_set, cfg, fold_seed)?;
        let outcome = train(&samples, cfg, fold_seed)?;
        let evals = evaluate(&outcome.model, &test_set)?;
        let report = MetricsReport::compute(&evals)?;
        pooled.extend(evals.iter().cloned());
        folds.push(FoldResult {
            fold: i,
            train_ids: train_set.iter().map(|s| s.id.clone()).collect(),
            test_ids: test_set.iter().map(|s| s.id.clone()).collect(),
            model: outcome.model,
            log_primary: outcome.log_primary,
            log_secondary: outcome.log_secondary,
            evals,
            report,
        });
    }
    let aggregate = MetricsReport::compute(&pooled)?;
    Ok(CrossValidation { split, folds, aggregate })
}
