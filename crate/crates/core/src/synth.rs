//! Synthetic two-domain segmentation scenarios.
//!
//! Each scene is a grid split into Voronoi regions. A region carries one
//! class and one of that class's modes; pixels draw raw features around the
//! mode centre. Target scenes rotate and translate the feature space and may
//! use different class priors.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassId, Domain, LabelState, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetAnnotation {
    None,
    Point,
    Coarse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub num_classes: usize,
    pub modes_per_class: usize,
    pub raw_dim: usize,
    /// Per-dimension standard deviation of the mode centres.
    pub mode_separation: f64,
    /// Per-dimension standard deviation of pixels around their mode.
    pub mode_noise: f64,
    pub regions_per_scene: usize,
    /// Class prior of source regions; empty means uniform.
    pub source_prior: Vec<f64>,
    /// Class prior of target regions; empty means the source prior.
    pub target_prior: Vec<f64>,
    /// Rotation angle (radians) applied to each consecutive pair of target
    /// feature dimensions.
    pub target_rotation: f64,
    /// Length of the translation applied to target features.
    pub target_shift: f64,
    /// Fraction of source scenes that carry labels.
    pub label_fraction: f64,
    /// Probability that a labeled source pixel is flipped to another class.
    pub noise_rate: f64,
    pub target_annotation: TargetAnnotation,
    pub point_radius: usize,
    /// Discs per present class per target scene.
    pub point_count: usize,
    pub coarse_width: usize,
    pub source_scenes: usize,
    pub target_scenes: usize,
    pub heldout_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            modes_per_class: 2,
            raw_dim: 16,
            mode_separation: 1.0,
            mode_noise: 0.5,
            regions_per_scene: 8,
            source_prior: Vec::new(),
            target_prior: Vec::new(),
            target_rotation: 0.6,
            target_shift: 2.0,
            label_fraction: 1.0,
            noise_rate: 0.0,
            target_annotation: TargetAnnotation::None,
            point_radius: 4,
            point_count: 1,
            coarse_width: 2,
            source_scenes: 200,
            target_scenes: 200,
            heldout_scenes: 50,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

fn check_simplex(name: &str, p: &[f64], classes: usize) -> Result<()> {
    if p.is_empty() {
        return Ok(());
    }
    if p.len() != classes {
        return Err(Error::InvalidConfig(format!("{name} needs {classes} entries")));
    }
    if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("{name} must be a probability vector")));
    }
    Ok(())
}

impl ScenarioSpec {
    /// Structural checks (`InvalidConfig`) then feasibility checks (`Spec`).
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_classes == 0 || self.num_classes > 256 {
            return fail("num_classes must be in 1..=256");
        }
        if self.modes_per_class == 0 || self.raw_dim == 0 || self.regions_per_scene == 0 {
            return fail("modes_per_class, raw_dim and regions_per_scene must be positive");
        }
        if self.height == 0 || self.width == 0 {
            return fail("grid must be non-empty");
        }
        if !(self.mode_separation >= 0.0 && self.mode_noise >= 0.0) {
            return fail("mode_separation and mode_noise must be non-negative");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return fail("label_fraction must be in (0, 1]");
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate < 1.0) {
            return fail("noise_rate must be in [0, 1)");
        }
        if !self.target_rotation.is_finite() || !self.target_shift.is_finite() {
            return fail("target transform must be finite");
        }
        check_simplex("source_prior", &self.source_prior, self.num_classes)?;
        check_simplex("target_prior", &self.target_prior, self.num_classes)?;
        if self.noise_rate > 0.0 && self.num_classes < 2 {
            return Err(Error::Spec("label noise needs at least two classes".into()));
        }
        if self.target_annotation == TargetAnnotation::Point {
            if self.point_count == 0 {
                return Err(Error::Spec("point annotation needs at least one disc".into()));
            }
            if self.point_count * self.num_classes > self.height * self.width {
                return Err(Error::Spec(format!(
                    "{} discs per class do not fit a {}x{} grid",
                    self.point_count, self.height, self.width
                )));
            }
            if self.point_radius > self.height.max(self.width) {
                return Err(Error::Spec("point radius exceeds the grid".into()));
            }
        }
        Ok(())
    }

    fn prior(&self, domain: Domain) -> Vec<f64> {
        let uniform = vec![1.0 / self.num_classes as f64; self.num_classes];
        let source = if self.source_prior.is_empty() {
            uniform
        } else {
            self.source_prior.clone()
        };
        match domain {
            Domain::Target if !self.target_prior.is_empty() => self.target_prior.clone(),
            _ => source,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub source: Vec<Scene>,
    pub target: Vec<Scene>,
    pub heldout: Vec<Scene>,
}

/// Mode centres and the target transform, shared by all scenes.
struct World {
    centers: Vec<Vec<Vec<f64>>>,
    shift: Vec<f64>,
}

const WORLD_STREAM: u64 = 0;
const SOURCE_STREAM: u64 = 1 << 32;
const TARGET_STREAM: u64 = 2 << 32;
const HELDOUT_STREAM: u64 = 3 << 32;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl World {
    fn new(spec: &ScenarioSpec) -> Self {
        let mut rng = stream(spec.seed, WORLD_STREAM);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let centers = (0..spec.num_classes)
            .map(|_| {
                (0..spec.modes_per_class)
                    .map(|_| (0..spec.raw_dim).map(|_| spec.mode_separation * normal.sample(&mut rng)).collect())
                    .collect()
            })
            .collect();
        let dir: Vec<f64> = (0..spec.raw_dim).map(|_| normal.sample(&mut rng)).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let shift = dir.iter().map(|v| spec.target_shift * v / len).collect();
        Self { centers, shift }
    }

    fn transform(&self, spec: &ScenarioSpec, x: &mut [f64]) {
        let (s, c) = spec.target_rotation.sin_cos();
        for pair in x.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
        for (v, d) in x.iter_mut().zip(&self.shift) {
            *v += d;
        }
    }
}

/// Builds the source, target and held-out target scenes. A pure function of
/// `spec`.
pub fn generate(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let world = World::new(spec);
    let labeled_sources = (spec.label_fraction * spec.source_scenes as f64).round() as usize;
    let source = (0..spec.source_scenes)
        .map(|i| {
            let mut rng = stream(spec.seed, SOURCE_STREAM + i as u64);
            let (features, truth) = draw_scene(spec, &world, Domain::Source, &mut rng);
            let labels = if i < labeled_sources {
                source_labels(spec, &truth, &mut rng)
            } else {
                vec![LabelState::Unlabeled; truth.len()]
            };
            finish(spec, i, Domain::Source, features, labels, truth)
        })
        .collect::<Result<Vec<_>>>()?;
    let target = (0..spec.target_scenes)
        .map(|i| {
            let mut rng = stream(spec.seed, TARGET_STREAM + i as u64);
            let (features, truth) = draw_scene(spec, &world, Domain::Target, &mut rng);
            let labels = target_labels(spec, &truth, &mut rng);
            finish(spec, spec.source_scenes + i, Domain::Target, features, labels, truth)
        })
        .collect::<Result<Vec<_>>>()?;
    let heldout = (0..spec.heldout_scenes)
        .map(|i| {
            let mut rng = stream(spec.seed, HELDOUT_STREAM + i as u64);
            let (features, truth) = draw_scene(spec, &world, Domain::Target, &mut rng);
            let labels = vec![LabelState::Unlabeled; truth.len()];
            finish(spec, spec.source_scenes + spec.target_scenes + i, Domain::Target, features, labels, truth)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { source, target, heldout })
}

fn finish(
    spec: &ScenarioSpec,
    id: usize,
    domain: Domain,
    features: Vec<f32>,
    labels: Vec<LabelState>,
    truth: Vec<ClassId>,
) -> Result<Scene> {
    let truth = truth.into_iter().map(|c| c as u16).collect();
    Scene::new(id, domain, spec.height, spec.width, spec.raw_dim, features, labels, truth)
}

/// Voronoi layout and raw features. Returns features (row-major) and the
/// class of every pixel.
fn draw_scene(spec: &ScenarioSpec, world: &World, domain: Domain, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<ClassId>) {
    let prior = WeightedIndex::new(spec.prior(domain)).expect("validated prior");
    let sites: Vec<(f64, f64, ClassId, usize)> = (0..spec.regions_per_scene)
        .map(|_| {
            let r = rng.random_range(0.0..spec.height as f64);
            let c = rng.random_range(0.0..spec.width as f64);
            let class = prior.sample(rng);
            let mode = rng.random_range(0..spec.modes_per_class);
            (r, c, class, mode)
        })
        .collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n = spec.height * spec.width;
    let mut features = Vec::with_capacity(n * spec.raw_dim);
    let mut truth = Vec::with_capacity(n);
    let mut x = vec![0.0; spec.raw_dim];
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (pr, pc) = (row as f64 + 0.5, col as f64 + 0.5);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, &(r, c, _, _)) in sites.iter().enumerate() {
                let d = (r - pr).powi(2) + (c - pc).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            let (_, _, class, mode) = sites[best];
            let center = &world.centers[class][mode];
            for (v, m) in x.iter_mut().zip(center) {
                *v = m + spec.mode_noise * noise.sample(rng);
            }
            if domain == Domain::Target {
                world.transform(spec, &mut x);
            }
            features.extend(x.iter().map(|&v| v as f32));
            truth.push(class);
        }
    }
    (features, truth)
}

fn source_labels(spec: &ScenarioSpec, truth: &[ClassId], rng: &mut ChaCha8Rng) -> Vec<LabelState> {
    if spec.noise_rate == 0.0 {
        return truth.iter().map(|&c| LabelState::Full(c)).collect();
    }
    truth
        .iter()
        .map(|&c| {
            if rng.random::<f64>() < spec.noise_rate {
                // uniform over the other classes
                let k = rng.random_range(0..spec.num_classes - 1);
                LabelState::Noisy(if k >= c { k + 1 } else { k })
            } else {
                LabelState::Noisy(c)
            }
        })
        .collect()
}

fn target_labels(spec: &ScenarioSpec, truth: &[ClassId], rng: &mut ChaCha8Rng) -> Vec<LabelState> {
    match spec.target_annotation {
        TargetAnnotation::None => vec![LabelState::Unlabeled; truth.len()],
        TargetAnnotation::Point => point_labels(spec, truth, rng),
        TargetAnnotation::Coarse => coarse_labels(spec.height, spec.width, spec.coarse_width, truth),
    }
}

/// Discs of `point_radius` around random pixels of each present class,
/// restricted to pixels of that class.
fn point_labels(spec: &ScenarioSpec, truth: &[ClassId], rng: &mut ChaCha8Rng) -> Vec<LabelState> {
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![LabelState::Unlabeled; truth.len()];
    let r = spec.point_radius as i64;
    for class in 0..spec.num_classes {
        let members: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        for _ in 0..spec.point_count {
            let center = members[rng.random_range(0..members.len())];
            let (cr, cc) = ((center / w) as i64, (center % w) as i64);
            for dr in -r..=r {
                for dc in -r..=r {
                    let (y, x) = (cr + dr, cc + dc);
                    if dr * dr + dc * dc > r * r || y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                        continue;
                    }
                    let i = y as usize * w + x as usize;
                    if truth[i] == class {
                        labels[i] = LabelState::Point(class);
                    }
                }
            }
        }
    }
    labels
}

/// A pixel keeps its class as a coarse label when every pixel within
/// Chebyshev distance `width` shares that class.
pub fn coarse_labels(h: usize, w: usize, width: usize, truth: &[ClassId]) -> Vec<LabelState> {
    (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let class = truth[i];
            let rows = r.saturating_sub(width)..=(r + width).min(h - 1);
            let uniform = rows.into_iter().all(|y| {
                (c.saturating_sub(width)..=(c + width).min(w - 1)).all(|x| truth[y * w + x] == class)
            });
            if uniform {
                LabelState::Coarse(class)
            } else {
                LabelState::Unlabeled
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioSpec {
        ScenarioSpec {
            source_scenes: 6,
            target_scenes: 6,
            heldout_scenes: 2,
            height: 12,
            width: 10,
            ..ScenarioSpec::default()
        }
    }

    fn truth(scene: &Scene) -> Vec<ClassId> {
        scene.ground_truth().iter().map(|&t| t as usize).collect()
    }

    #[test]
    fn deterministic() {
        let spec = ScenarioSpec {
            noise_rate: 0.2,
            target_annotation: TargetAnnotation::Point,
            ..small()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = ScenarioSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().source, generate(&other).unwrap().source);
    }

    #[test]
    fn sizes_and_domains() {
        let d = generate(&small()).unwrap();
        assert_eq!((d.source.len(), d.target.len(), d.heldout.len()), (6, 6, 2));
        assert!(d.source.iter().all(|s| s.domain() == Domain::Source && s.pixel_count() == 120));
        assert!(d.target.iter().chain(&d.heldout).all(|s| s.domain() == Domain::Target));
        let ids: Vec<usize> = d.source.iter().chain(&d.target).chain(&d.heldout).map(|s| s.id()).collect();
        assert_eq!(ids, (0..14).collect::<Vec<_>>());
    }

    #[test]
    fn null_shift_matches_source_distribution() {
        // same layout stream offsets differ, so compare statistics, not scenes
        let spec = ScenarioSpec {
            source_scenes: 40,
            target_scenes: 40,
            target_rotation: 0.0,
            target_shift: 0.0,
            ..small()
        };
        let d = generate(&spec).unwrap();
        let mean = |scenes: &[Scene]| {
            let mut acc = vec![0.0; spec.raw_dim];
            let mut n = 0.0;
            for s in scenes {
                for p in 0..s.pixel_count() {
                    for (a, v) in acc.iter_mut().zip(s.raw(p)) {
                        *a += *v as f64;
                    }
                    n += 1.0;
                }
            }
            acc.iter().map(|a| a / n).collect::<Vec<_>>()
        };
        let (ms, mt) = (mean(&d.source), mean(&d.target));
        for (a, b) in ms.iter().zip(&mt) {
            assert!((a - b).abs() < 0.5);
        }
    }

    #[test]
    fn rotation_and_shift_move_target_features() {
        let spec = ScenarioSpec {
            mode_noise: 0.0,
            target_rotation: std::f64::consts::FRAC_PI_2,
            target_shift: 0.0,
            ..small()
        };
        let d = generate(&spec).unwrap();
        let world = World::new(&spec);
        let s = &d.target[0];
        let t = truth(s);
        // quarter turn of each pair: (a, b) -> (-b, a)
        let center = |p: usize| {
            (0..spec.modes_per_class)
                .map(|m| &world.centers[t[p]][m])
                .find(|c| {
                    let x = s.raw(p);
                    (x[0] as f64 + c[1]).abs() < 1e-5 && (x[1] as f64 - c[0]).abs() < 1e-5
                })
                .is_some()
        };
        assert!((0..s.pixel_count()).all(center));
    }

    #[test]
    fn label_fraction_and_noise() {
        let spec = ScenarioSpec {
            label_fraction: 0.5,
            ..small()
        };
        let d = generate(&spec).unwrap();
        let labeled: Vec<bool> = d.source.iter().map(|s| s.has_labels()).collect();
        assert_eq!(labeled, vec![true, true, true, false, false, false]);
        for s in &d.source[..3] {
            for (l, t) in s.labels().iter().zip(truth(s)) {
                assert_eq!(*l, LabelState::Full(t));
            }
        }

        let noisy = ScenarioSpec {
            noise_rate: 0.3,
            source_scenes: 30,
            ..small()
        };
        let d = generate(&noisy).unwrap();
        let (mut flips, mut total) = (0.0, 0.0);
        for s in &d.source {
            for (l, t) in s.labels().iter().zip(truth(s)) {
                let LabelState::Noisy(c) = *l else { panic!("expected noisy label") };
                flips += f64::from(c != t);
                total += 1.0;
            }
        }
        let rate = flips / total;
        let sd = (0.3f64 * 0.7 / total).sqrt();
        assert!((rate - 0.3).abs() < 4.0 * sd, "flip rate {rate}");
    }

    #[test]
    fn weak_labels_never_change_truth_and_match_class() {
        for annotation in [TargetAnnotation::Point, TargetAnnotation::Coarse] {
            let spec = ScenarioSpec {
                target_annotation: annotation,
                point_radius: 2,
                coarse_width: 1,
                ..small()
            };
            let plain = generate(&ScenarioSpec {
                target_annotation: TargetAnnotation::None,
                ..spec.clone()
            })
            .unwrap();
            let d = generate(&spec).unwrap();
            for (a, b) in d.target.iter().zip(&plain.target) {
                assert_eq!(a.ground_truth(), b.ground_truth());
                for (l, t) in a.labels().iter().zip(truth(a)) {
                    if let Some(c) = l.class() {
                        assert!(l.is_weak());
                        assert_eq!(c, t);
                    }
                }
                assert!(a.has_labels());
            }
        }
    }

    #[test]
    fn zero_erosion_is_full_labeling() {
        let t = vec![0, 0, 1, 2, 2, 1];
        let labels = coarse_labels(2, 3, 0, &t);
        for (l, c) in labels.iter().zip(&t) {
            assert_eq!(*l, LabelState::Coarse(*c));
        }
    }

    #[test]
    fn erosion_leaves_boundary_band() {
        // two vertical halves of a 4x4 grid
        let t: Vec<usize> = (0..16).map(|i| usize::from(i % 4 >= 2)).collect();
        let labels = coarse_labels(4, 4, 1, &t);
        for i in 0..16 {
            let col = i % 4;
            if col == 1 || col == 2 {
                assert_eq!(labels[i], LabelState::Unlabeled);
            } else {
                assert_eq!(labels[i].class(), Some(t[i]));
            }
        }
    }

    #[test]
    fn label_shift_histogram_within_three_sigma() {
        // one region per scene: each scene's class is a single multinomial draw
        let prior = vec![0.5, 0.2, 0.2, 0.1];
        let spec = ScenarioSpec {
            num_classes: 4,
            regions_per_scene: 1,
            target_prior: prior.clone(),
            source_scenes: 1,
            target_scenes: 600,
            heldout_scenes: 0,
            height: 2,
            width: 2,
            ..ScenarioSpec::default()
        };
        let d = generate(&spec).unwrap();
        let n = d.target.len() as f64;
        let mut counts = [0.0; 4];
        for s in &d.target {
            counts[s.ground_truth()[0] as usize] += 1.0;
        }
        for (c, p) in counts.iter().zip(&prior) {
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((c - n * p).abs() <= 3.0 * sd, "count {c} vs {}", n * p);
        }
    }

    #[test]
    fn infeasible_specs() {
        let too_many = ScenarioSpec {
            target_annotation: TargetAnnotation::Point,
            point_count: 100,
            ..small()
        };
        assert!(matches!(generate(&too_many), Err(Error::Spec(_))));
        let too_wide = ScenarioSpec {
            target_annotation: TargetAnnotation::Point,
            point_radius: 50,
            ..small()
        };
        assert!(matches!(generate(&too_wide), Err(Error::Spec(_))));
        let bad_prior = ScenarioSpec {
            source_prior: vec![0.5, 0.5],
            ..small()
        };
        assert!(matches!(generate(&bad_prior), Err(Error::InvalidConfig(_))));
    }
}
