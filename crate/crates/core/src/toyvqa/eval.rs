//! Exact-match evaluation and reference predictors.

use serde::{Deserialize, Serialize};

use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::masking::MaskKind;

use super::data::{oracle_answer, ToySample};
use super::model::{predict, VqaArch};
use super::vocab::{Template, EOS_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateMetrics {
    pub template: String,
    pub n: usize,
    pub accuracy: f64,
    pub shortcut_rate: f64,
}

/// `shortcut_rate` is the share of wrong predictions that equal the
/// template's training-majority answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub shortcut_rate: f64,
    pub per_template: Vec<TemplateMetrics>,
}

/// Anything that maps samples to generated answer tokens.
pub trait Predictor {
    fn predict(&self, samples: &[ToySample]) -> Result<Vec<Vec<usize>>>;
}

/// Scores predictions against `[answer, EOS]`.
pub fn score(samples: &[ToySample], predictions: &[Vec<usize>], majority: &[usize; 4]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("no samples to evaluate".into()));
    }
    if samples.len() != predictions.len() {
        return Err(Error::EmptySplit(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    // (n, correct, wrong, wrong-and-majority) per template.
    let mut counts = [[0usize; 4]; 4];
    for (s, p) in samples.iter().zip(predictions) {
        let c = &mut counts[s.template];
        c[0] += 1;
        if *p == s.targets() {
            c[1] += 1;
        } else {
            c[2] += 1;
            if p.as_slice() == [majority[s.template], EOS_ID] {
                c[3] += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let total = counts.iter().fold([0; 4], |mut acc, c| {
        for i in 0..4 {
            acc[i] += c[i];
        }
        acc
    });
    Ok(Metrics {
        n: total[0],
        accuracy: ratio(total[1], total[0]),
        shortcut_rate: ratio(total[3], total[2]),
        per_template: Template::ALL
            .iter()
            .filter(|t| counts[t.index()][0] > 0)
            .map(|t| {
                let c = counts[t.index()];
                TemplateMetrics {
                    template: t.name().into(),
                    n: c[0],
                    accuracy: ratio(c[1], c[0]),
                    shortcut_rate: ratio(c[3], c[2]),
                }
            })
            .collect(),
    })
}

pub fn evaluate(p: &dyn Predictor, samples: &[ToySample], majority: &[usize; 4]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("no samples to evaluate".into()));
    }
    let preds = p.predict(samples)?;
    score(samples, &preds, majority)
}

/// Reads the answer off the grid.
pub struct RuleOracle;

impl Predictor for RuleOracle {
    fn predict(&self, samples: &[ToySample]) -> Result<Vec<Vec<usize>>> {
        Ok(samples.iter().map(|s| vec![oracle_answer(s), EOS_ID]).collect())
    }
}

/// Answers every question with its template's most frequent training answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionOnlyBaseline {
    pub answer: [usize; 4],
}

impl QuestionOnlyBaseline {
    pub fn fit(train: &[ToySample]) -> Self {
        let mut votes = [std::collections::BTreeMap::<usize, usize>::new(), Default::default(), Default::default(), Default::default()];
        for s in train {
            *votes[s.template].entry(s.a[0]).or_default() += 1;
        }
        let answer = std::array::from_fn(|t| {
            votes[t]
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map_or(Template::ALL[t].majority(), |(&a, _)| a)
        });
        Self { answer }
    }
}

impl Predictor for QuestionOnlyBaseline {
    fn predict(&self, samples: &[ToySample]) -> Result<Vec<Vec<usize>>> {
        Ok(samples.iter().map(|s| vec![self.answer[s.template], EOS_ID]).collect())
    }
}

/// Greedy decoding with a trained model.
pub struct ModelPredictor<'a> {
    pub arch: &'a VqaArch,
    pub store: &'a ParamStore<f32>,
    pub kind: MaskKind,
    pub batch_size: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, samples: &[ToySample]) -> Result<Vec<Vec<usize>>> {
        Ok(predict(self.arch, self.store, samples, self.kind, self.batch_size)?
            .into_iter()
            .map(|g| g.tokens)
            .collect())
    }
}
