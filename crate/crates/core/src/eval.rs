//! Segmentation metrics from a confusion matrix.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::math::argmax;
use crate::model::Model;
use crate::types::{ClassId, Scene};

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: ClassId, prediction: ClassId) {
        self.counts[truth * self.classes + prediction] += 1;
    }

    pub fn get(&self, truth: ClassId, prediction: ClassId) -> u64 {
        self.counts[truth * self.classes + prediction]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn true_positives(&self, c: ClassId) -> u64 {
        self.get(c, c)
    }

    fn truth_total(&self, c: ClassId) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn predicted_total(&self, c: ClassId) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    /// `None` when the class appears in neither truth nor prediction.
    pub fn iou(&self, c: ClassId) -> Option<f64> {
        let tp = self.true_positives(c);
        let union = self.truth_total(c) + self.predicted_total(c) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// Recall of class `c`.
    pub fn accuracy(&self, c: ClassId) -> Option<f64> {
        let total = self.truth_total(c);
        (total > 0).then(|| self.true_positives(c) as f64 / total as f64)
    }

    pub fn precision(&self, c: ClassId) -> Option<f64> {
        let total = self.predicted_total(c);
        (total > 0).then(|| self.true_positives(c) as f64 / total as f64)
    }

    /// Mean over classes with a defined IoU; 0 for an empty matrix.
    pub fn miou(&self) -> f64 {
        let defined: Vec<f64> = (0..self.classes).filter_map(|c| self.iou(c)).collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.true_positives(c)).sum::<u64>() as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelQuality {
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    /// Pseudo-label quality against the hidden labels, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_labels: Option<LabelQuality>,
}

impl EvalResult {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let c = cm.classes();
        Self {
            per_class_iou: (0..c).map(|k| cm.iou(k)).collect(),
            miou: cm.miou(),
            per_class_accuracy: (0..c).map(|k| cm.accuracy(k)).collect(),
            pixel_accuracy: cm.pixel_accuracy(),
            pseudo_labels: None,
        }
    }
}

pub fn label_quality(cm: &ConfusionMatrix) -> LabelQuality {
    LabelQuality {
        precision: (0..cm.classes()).map(|c| cm.precision(c)).collect(),
        recall: (0..cm.classes()).map(|c| cm.accuracy(c)).collect(),
    }
}

pub fn evaluate_predictions(truth: &[ClassId], predictions: &[ClassId], classes: usize) -> EvalResult {
    let mut cm = ConfusionMatrix::new(classes);
    for (&t, &p) in truth.iter().zip(predictions) {
        cm.add(t, p);
    }
    EvalResult::from_confusion(&cm)
}

/// Raw features of a scene as a `pixels x raw_dim` matrix.
pub fn scene_inputs(scene: &Scene) -> Array2<f64> {
    Array2::from_shape_fn((scene.pixel_count(), scene.raw_dim()), |(i, d)| {
        scene.raw_features()[i * scene.raw_dim() + d] as f64
    })
}

/// Argmax class per pixel.
pub fn predict(model: &Model, scene: &Scene) -> Vec<ClassId> {
    let logits = model.logits(&scene_inputs(scene).view());
    logits.rows().into_iter().map(|r| argmax(r.as_slice().expect("contiguous row"))).collect()
}

/// Classifier argmax against the hidden labels over every pixel of `scenes`.
pub fn confusion(model: &Model, scenes: &[Scene]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(model.shape().classes);
    for scene in scenes {
        for (p, &t) in predict(model, scene).into_iter().zip(scene.ground_truth()) {
            cm.add(t as usize, p);
        }
    }
    cm
}

pub fn evaluate(model: &Model, scenes: &[Scene]) -> EvalResult {
    EvalResult::from_confusion(&confusion(model, scenes))
}
