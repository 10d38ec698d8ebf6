//! Value types shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a semantic class, always in `[0, C)`.
pub type ClassId = usize;

/// An L2-normalized embedding of one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Projects `raw` onto the unit sphere.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateFeature);
        }
        Ok(Self(raw.iter().map(|v| v / norm).collect()))
    }

    /// Wraps a vector that is already unit-norm (e.g. a row produced by the
    /// projection head). The zero vector is also accepted: the head emits it
    /// when every projector unit is inactive. Only checked in debug builds.
    pub fn from_unit(values: Vec<f64>) -> Self {
        debug_assert!(
            {
                let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                (norm - 1.0).abs() < 1e-6 || norm == 0.0
            },
            "vector is neither unit norm nor zero"
        );
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Supervision available for a single pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelState {
    Full(ClassId),
    Point(ClassId),
    Coarse(ClassId),
    Noisy(ClassId),
    Unlabeled,
}

impl LabelState {
    pub fn class(self) -> Option<ClassId> {
        match self {
            LabelState::Full(c)
            | LabelState::Point(c)
            | LabelState::Coarse(c)
            | LabelState::Noisy(c) => Some(c),
            LabelState::Unlabeled => None,
        }
    }

    /// Point and coarse annotations.
    pub fn is_weak(self) -> bool {
        matches!(self, LabelState::Point(_) | LabelState::Coarse(_))
    }

    pub(crate) fn kind_byte(self) -> u8 {
        match self {
            LabelState::Unlabeled => 0,
            LabelState::Full(_) => 1,
            LabelState::Point(_) => 2,
            LabelState::Coarse(_) => 3,
            LabelState::Noisy(_) => 4,
        }
    }

    pub(crate) fn from_bytes(kind: u8, class: u8) -> Option<Self> {
        let c = class as ClassId;
        Some(match kind {
            0 => LabelState::Unlabeled,
            1 => LabelState::Full(c),
            2 => LabelState::Point(c),
            3 => LabelState::Coarse(c),
            4 => LabelState::Noisy(c),
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// One synthetic "image": an `H x W` grid of raw feature vectors with their
/// supervision state. The true labels are only exposed through
/// [`Scene::ground_truth`], which training code never calls.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    id: usize,
    domain: Domain,
    height: usize,
    width: usize,
    raw_dim: usize,
    features: Vec<f32>,
    labels: Vec<LabelState>,
    truth: Vec<u16>,
}

impl Scene {
    pub fn new(
        id: usize,
        domain: Domain,
        height: usize,
        width: usize,
        raw_dim: usize,
        features: Vec<f32>,
        labels: Vec<LabelState>,
        truth: Vec<u16>,
    ) -> Result<Self> {
        let n = height * width;
        if n == 0 || raw_dim == 0 {
            return Err(Error::InvalidConfig("scene grid must be non-empty".into()));
        }
        if features.len() != n * raw_dim {
            return Err(Error::DimensionMismatch {
                expected: n * raw_dim,
                got: features.len(),
            });
        }
        if labels.len() != n || truth.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: labels.len().min(truth.len()),
            });
        }
        Ok(Self {
            id,
            domain,
            height,
            width,
            raw_dim,
            features,
            labels,
            truth,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn raw(&self, pixel: usize) -> &[f32] {
        &self.features[pixel * self.raw_dim..(pixel + 1) * self.raw_dim]
    }

    pub fn raw_features(&self) -> &[f32] {
        &self.features
    }

    pub fn label(&self, pixel: usize) -> LabelState {
        self.labels[pixel]
    }

    pub fn labels(&self) -> &[LabelState] {
        &self.labels
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(|l| l.class().is_some())
    }

    /// Hidden class of every pixel. Evaluation only.
    pub fn ground_truth(&self) -> &[u16] {
        &self.truth
    }

    /// Replaces the hidden labels; used by audits that check nothing on the
    /// training path depends on them.
    pub fn with_ground_truth(mut self, truth: Vec<u16>) -> Result<Self> {
        if truth.len() != self.truth.len() {
            return Err(Error::DimensionMismatch {
                expected: self.truth.len(),
                got: truth.len(),
            });
        }
        self.truth = truth;
        Ok(self)
    }
}

/// A pixel embedding together with its supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPixel {
    pub feature: FeatureVector,
    pub label: LabelState,
    pub scene_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    domain: Domain,
    pixels: Vec<BatchPixel>,
}

impl Batch {
    pub fn new(domain: Domain, pixels: Vec<BatchPixel>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::InvalidConfig("batch must be non-empty".into()));
        }
        Ok(Self { domain, pixels })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn pixels(&self) -> &[BatchPixel] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Hyper-parameters of the density model, prototype memories and losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_classes: usize,
    pub embed_dim: usize,
    /// Mixture components per class.
    pub components: usize,
    /// Contrastive temperature.
    pub temperature: f64,
    /// Teacher confidence threshold for self-training weights and target priors.
    pub confidence_threshold: f64,
    /// Momentum shared by GMM updates, target prototypes and class priors.
    pub ema_momentum: f64,
    pub teacher_momentum: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_eps: f64,
    /// FIFO capacity per class, used for both the source and target banks.
    pub bank_capacity: usize,
    pub bank_push_per_class: usize,
    /// Reliable target embeddings pushed per class per batch.
    pub k_top: usize,
    pub var_floor: f64,
    pub prior_floor: f64,
    /// Read the scene-GMM spread with soft pseudo-label weights instead of
    /// hard indicators.
    pub soft_scene_sigma: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            embed_dim: 64,
            components: 3,
            temperature: 0.1,
            confidence_threshold: 0.968,
            ema_momentum: 0.9,
            teacher_momentum: 0.999,
            sinkhorn_iters: 10,
            sinkhorn_eps: 0.05,
            bank_capacity: 32_768,
            bank_push_per_class: 100,
            k_top: 10,
            var_floor: 1e-4,
            prior_floor: 1e-6,
            soft_scene_sigma: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.num_classes == 0 {
            return fail("num_classes must be positive");
        }
        if self.embed_dim < 2 {
            return fail("embed_dim must be at least 2");
        }
        if self.components == 0 {
            return fail("components must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return fail("confidence_threshold must lie in [0, 1]");
        }
        for (name, v) in [
            ("ema_momentum", self.ema_momentum),
            ("teacher_momentum", self.teacher_momentum),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.sinkhorn_iters == 0 || !(self.sinkhorn_eps > 0.0) {
            return fail("sinkhorn needs at least one iteration and a positive epsilon");
        }
        if self.bank_capacity == 0 || self.bank_push_per_class == 0 || self.k_top == 0 {
            return fail("bank sizes must be positive");
        }
        if !(self.var_floor > 0.0) || !(self.prior_floor > 0.0) {
            return fail("floors must be positive");
        }
        if self.num_classes > 256 {
            return fail("at most 256 classes are supported by the container format");
        }
        Ok(())
    }
}
