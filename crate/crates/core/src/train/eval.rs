use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LabelSpace;
use crate::aggregation::{encode_image, encode_text, BoundPrompts, PromptLearner};
use crate::backbone::{classify, Backbone, Modality};
use crate::data::{class_position, Dataset, Image, LabeledExample};
use crate::par;
use crate::tensor::{Result, Tape, TensorError};

/// Anything that maps captions and images into the shared space.
pub trait FeatureModel: Sync {
    fn class_features(&self, captions: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
    fn image_feature(&self, image: &Image) -> Result<Vec<f64>>;
    fn tau(&self) -> f64;
}

/// The frozen backbone with no prompts.
pub struct ZeroShotModel<'a> {
    pub backbone: &'a Backbone,
}

impl FeatureModel for ZeroShotModel<'_> {
    fn class_features(&self, captions: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let bb = self.backbone;
        par::map(captions, |c| {
            let pos = class_position(c).ok_or(TensorError::Invalid {
                op: "class_features",
                reason: "caption is all padding".into(),
            })?;
            let mut tape = Tape::new();
            let w = bb.embed_caption(&mut tape, c)?;
            let out = bb.plain_forward(&mut tape, Modality::Language, w)?;
            let z = bb.text_feature(&mut tape, out, pos)?;
            Ok(tape.value(z).data().to_vec())
        })
        .into_iter()
        .collect()
    }

    fn image_feature(&self, image: &Image) -> Result<Vec<f64>> {
        let bb = self.backbone;
        let mut tape = Tape::new();
        let e = bb.embed_image_tokens(&mut tape, image)?;
        let out = bb.plain_forward(&mut tape, Modality::Vision, e)?;
        let x = bb.image_feature(&mut tape, out)?;
        Ok(tape.value(x).data().to_vec())
    }

    fn tau(&self) -> f64 {
        self.backbone.tau()
    }
}

/// Frozen backbone plus tuned prompts and interaction modules.
pub struct PromptedModel<'a> {
    pub backbone: &'a Backbone,
    pub learner: &'a PromptLearner,
}

impl FeatureModel for PromptedModel<'_> {
    fn class_features(&self, captions: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        par::map(captions, |c| {
            let mut tape = Tape::new();
            let bound = BoundPrompts::bind(&mut tape, self.learner)?;
            let e = encode_text(&mut tape, self.backbone, self.learner, &bound, c)?;
            Ok(tape.value(e.feature).data().to_vec())
        })
        .into_iter()
        .collect()
    }

    fn image_feature(&self, image: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = BoundPrompts::bind(&mut tape, self.learner)?;
        let e = encode_image(&mut tape, self.backbone, self.learner, &bound, image)?;
        Ok(tape.value(e.feature).data().to_vec())
    }

    fn tau(&self) -> f64 {
        self.backbone.tau()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in row.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Top-1 accuracy of score rows against target indices.
pub fn accuracy(scores: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if scores.is_empty() {
        return Err(TensorError::Invalid {
            op: "accuracy",
            reason: "no examples".into(),
        });
    }
    if scores.len() != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "accuracy",
            left: vec![scores.len()],
            right: vec![targets.len()],
        });
    }
    let correct = scores.iter().zip(targets).filter(|(s, &t)| argmax(s) == Some(t)).count();
    Ok(correct as f64 / scores.len() as f64)
}

/// `2·b·n / (b + n)`, and 0 when either side is 0.
pub fn harmonic_mean(base: f64, new: f64) -> f64 {
    if base <= 0.0 || new <= 0.0 {
        0.0
    } else if base == new {
        base
    } else {
        2.0 * base * new / (base + new)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedEval {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Accuracy per class id present in the data.
    pub per_class: BTreeMap<usize, f64>,
}

fn image_features<M: FeatureModel + ?Sized>(model: &M, examples: &[&LabeledExample]) -> Result<Vec<Vec<f64>>> {
    par::map(examples, |e| model.image_feature(&e.image)).into_iter().collect()
}

/// Predicted class ids of already-extracted image features.
fn predict(features: &[Vec<f64>], class_features: &[Vec<f64>], classes: &[usize], tau: f64) -> Result<Vec<usize>> {
    features
        .iter()
        .map(|x| {
            let p = classify(x, class_features, tau)?;
            Ok(classes[argmax(&p).expect("non-empty label space")])
        })
        .collect()
}

fn summarize(examples: &[&LabeledExample], predicted: &[usize]) -> Result<ClosedEval> {
    if examples.is_empty() {
        return Err(TensorError::Invalid {
            op: "eval",
            reason: "empty evaluation set".into(),
        });
    }
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (e, &p) in examples.iter().zip(predicted) {
        let slot = per.entry(e.class).or_default();
        slot.1 += 1;
        if p == e.class {
            slot.0 += 1;
            correct += 1;
        }
    }
    Ok(ClosedEval {
        accuracy: correct as f64 / examples.len() as f64,
        correct,
        total: examples.len(),
        per_class: per.into_iter().map(|(c, (k, n))| (c, k as f64 / n as f64)).collect(),
    })
}

fn check_inside(examples: &[&LabeledExample], space: &LabelSpace) -> Result<()> {
    if let Some(e) = examples.iter().find(|e| space.index_of(e.class).is_none()) {
        return Err(TensorError::Invalid {
            op: "eval",
            reason: format!("class {} is outside the label space", e.class),
        });
    }
    Ok(())
}

/// Top-1 accuracy over a fixed label space.
pub fn eval_closed<M: FeatureModel + ?Sized>(
    model: &M,
    examples: &[LabeledExample],
    space: &LabelSpace,
) -> Result<ClosedEval> {
    let refs: Vec<&LabeledExample> = examples.iter().collect();
    if refs.is_empty() {
        return summarize(&refs, &[]);
    }
    check_inside(&refs, space)?;
    let z = model.class_features(&space.captions)?;
    let x = image_features(model, &refs)?;
    let predicted = predict(&x, &z, &space.classes, model.tau())?;
    summarize(&refs, &predicted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenWorldRecord {
    /// Base-class test accuracy with every class as a candidate.
    pub base_acc: f64,
    pub new_acc: f64,
    pub hm: f64,
    /// Pooled accuracy over the mixed base and new test set.
    pub open_world_acc: f64,
    /// Same images scored against the base classes only.
    pub closed_base_acc: f64,
    pub closed_new_acc: f64,
    pub base_correct: usize,
    pub base_total: usize,
    pub new_correct: usize,
    pub new_total: usize,
    pub per_class: BTreeMap<usize, f64>,
}

/// Base and new test images classified over the union of both class sets.
pub fn eval_open_world<M: FeatureModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    base: &[usize],
    new: &[usize],
) -> Result<OpenWorldRecord> {
    if let Some(c) = base.iter().find(|c| new.contains(c)) {
        return Err(TensorError::Invalid {
            op: "eval_open_world",
            reason: format!("class {c} is both base and new"),
        });
    }
    let mut union: Vec<usize> = base.iter().chain(new).copied().collect();
    union.sort_unstable();
    let space = LabelSpace::new(dataset, &union)?;
    let base_test: Vec<&LabeledExample> = dataset.test.iter().filter(|e| base.contains(&e.class)).collect();
    let new_test: Vec<&LabeledExample> = dataset.test.iter().filter(|e| new.contains(&e.class)).collect();

    let z = model.class_features(&space.captions)?;
    let tau = model.tau();
    let xb = image_features(model, &base_test)?;
    let xn = image_features(model, &new_test)?;
    let base_eval = summarize(&base_test, &predict(&xb, &z, &space.classes, tau)?)?;
    let new_eval = summarize(&new_test, &predict(&xn, &z, &space.classes, tau)?)?;

    let subset = |classes: &[usize]| -> Vec<Vec<f64>> {
        classes.iter().map(|c| z[space.index_of(*c).expect("in union")].clone()).collect()
    };
    let closed_base = summarize(&base_test, &predict(&xb, &subset(base), base, tau)?)?;
    let closed_new = summarize(&new_test, &predict(&xn, &subset(new), new, tau)?)?;

    let mut per_class = base_eval.per_class.clone();
    per_class.extend(new_eval.per_class.iter().map(|(&k, &v)| (k, v)));
    Ok(OpenWorldRecord {
        base_acc: base_eval.accuracy,
        new_acc: new_eval.accuracy,
        hm: harmonic_mean(base_eval.accuracy, new_eval.accuracy),
        open_world_acc: (base_eval.correct + new_eval.correct) as f64 / (base_eval.total + new_eval.total) as f64,
        closed_base_acc: closed_base.accuracy,
        closed_new_acc: closed_new.accuracy,
        base_correct: base_eval.correct,
        base_total: base_eval.total,
        new_correct: new_eval.correct,
        new_total: new_eval.total,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetRecord {
    pub source_acc: f64,
    pub targets: BTreeMap<String, f64>,
    /// Mean over targets.
    pub average: f64,
}

fn full_accuracy<M: FeatureModel + ?Sized>(model: &M, dataset: &Dataset) -> Result<f64> {
    Ok(eval_closed(model, &dataset.test, &LabelSpace::all(dataset))?.accuracy)
}

fn per_target<M: FeatureModel + ?Sized>(
    model: &M,
    source: &Dataset,
    targets: &[(String, Dataset)],
) -> Result<(f64, BTreeMap<String, f64>, f64)> {
    let source_acc = full_accuracy(model, source)?;
    let mut out = BTreeMap::new();
    for (name, ds) in targets {
        if out.insert(name.clone(), full_accuracy(model, ds)?).is_some() {
            return Err(TensorError::Config(format!("duplicate target name {name:?}")));
        }
    }
    let average = if out.is_empty() {
        0.0
    } else {
        out.values().sum::<f64>() / out.len() as f64
    };
    Ok((source_acc, out, average))
}

/// Zero-shot transfer of source-tuned prompts to each target's full label space.
pub fn eval_cross_dataset<M: FeatureModel + ?Sized>(
    model: &M,
    source: &Dataset,
    targets: &[(String, Dataset)],
) -> Result<CrossDatasetRecord> {
    let (source_acc, targets, average) = per_target(model, source, targets)?;
    Ok(CrossDatasetRecord {
        source_acc,
        targets,
        average,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub source_acc: f64,
    pub variants: BTreeMap<String, f64>,
    pub ood_average: f64,
}

/// Source accuracy next to accuracy on label-preserving shifted variants.
pub fn eval_domain_generalization<M: FeatureModel + ?Sized>(
    model: &M,
    source: &Dataset,
    variants: &[(String, Dataset)],
) -> Result<DomainRecord> {
    let (source_acc, variants, ood_average) = per_target(model, source, variants)?;
    Ok(DomainRecord {
        source_acc,
        variants,
        ood_average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), Some(1));
        assert_eq!(argmax(&[f64::NAN, 0.2]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn hm_laws() {
        assert!((harmonic_mean(0.8, 0.7) - 0.746_666_666_666_666_7).abs() < 1e-12);
        assert_eq!(harmonic_mean(0.3, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.37, 0.37), 0.37);
    }

    #[test]
    fn mean_std_single_value() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn accuracy_rejects_empty() {
        assert!(accuracy(&[], &[]).is_err());
        assert_eq!(accuracy(&[vec![0.0, 1.0]], &[1]).unwrap(), 1.0);
    }
}
