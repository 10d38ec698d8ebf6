//! Target-domain state: reliable-embedding memory, EMA class prototypes,
//! EMA class priors of both domains, and per-scene mixtures fitted from weak
//! annotations.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::gmm::GmmBank;
use crate::math::{argmax, cosine, renormalize, softmax, squared_distance};
use crate::select::{gaussian_alpha, select_with_class, Prototype, PrototypeSelection};
use crate::types::{Batch, ClassId, Domain, LabelState, RunConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TargetState {
    num_classes: usize,
    dim: usize,
    capacity: usize,
    k_top: usize,
    momentum: f64,
    prior_floor: f64,
    prototypes: Vec<Option<Vec<f64>>>,
    queues: Vec<VecDeque<Vec<f64>>>,
    source_prior: Vec<f64>,
    target_prior: Vec<f64>,
}

impl TargetState {
    pub fn new(cfg: &RunConfig) -> Self {
        let uniform = vec![1.0 / cfg.num_classes as f64; cfg.num_classes];
        Self {
            num_classes: cfg.num_classes,
            dim: cfg.embed_dim,
            capacity: cfg.bank_capacity,
            k_top: cfg.k_top,
            momentum: cfg.ema_momentum,
            prior_floor: cfg.prior_floor,
            prototypes: vec![None; cfg.num_classes],
            queues: vec![VecDeque::new(); cfg.num_classes],
            source_prior: uniform.clone(),
            target_prior: uniform,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, class: ClassId) -> Option<&[f64]> {
        self.prototypes[class].as_deref()
    }

    pub fn set_prototype(&mut self, class: ClassId, prototype: Vec<f64>) -> Result<()> {
        if prototype.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: prototype.len(),
            });
        }
        self.prototypes[class] = Some(unit(prototype));
        Ok(())
    }

    pub fn queue(&self, class: ClassId) -> &VecDeque<Vec<f64>> {
        &self.queues[class]
    }

    pub fn source_prior(&self) -> &[f64] {
        &self.source_prior
    }

    pub fn target_prior(&self) -> &[f64] {
        &self.target_prior
    }

    pub fn set_priors(&mut self, source: Vec<f64>, target: Vec<f64>) -> Result<()> {
        if source.len() != self.num_classes || target.len() != self.num_classes {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes,
                got: source.len().min(target.len()),
            });
        }
        self.source_prior = floor_simplex(source, self.prior_floor);
        self.target_prior = floor_simplex(target, self.prior_floor);
        Ok(())
    }

    /// Ranks each pseudo-class's members by cosine similarity to the class
    /// batch mean and pushes the top `k_top` into that class's FIFO; the
    /// prototype then moves toward the queue mean. Classes absent from the
    /// batch are untouched. Returns the selected batch indices per class.
    pub fn update_target_bank(&mut self, batch: &Batch, pseudo_labels: &[ClassId]) -> Result<Vec<Vec<usize>>> {
        if batch.domain() != Domain::Target {
            return Err(Error::InvalidConfig("target bank only accepts target batches".into()));
        }
        if pseudo_labels.len() != batch.len() {
            return Err(Error::DimensionMismatch {
                expected: batch.len(),
                got: pseudo_labels.len(),
            });
        }
        let mut selected = vec![Vec::new(); self.num_classes];
        for class in 0..self.num_classes {
            let members: Vec<usize> = (0..batch.len()).filter(|&i| pseudo_labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; self.dim];
            for &i in &members {
                for (m, v) in mean.iter_mut().zip(batch.pixels()[i].feature.as_slice()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= members.len() as f64);
            let mut ranked: Vec<(f64, usize)> = members
                .iter()
                .map(|&i| (cosine(batch.pixels()[i].feature.as_slice(), &mean), i))
                .collect();
            // descending similarity, ties by batch index
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            ranked.truncate(self.k_top);
            let queue = &mut self.queues[class];
            for &(_, i) in &ranked {
                if queue.len() == self.capacity {
                    queue.pop_front();
                }
                queue.push_back(batch.pixels()[i].feature.as_slice().to_vec());
            }
            selected[class] = ranked.into_iter().map(|(_, i)| i).collect();

            let mut queue_mean = vec![0.0; self.dim];
            for e in queue.iter() {
                for (m, v) in queue_mean.iter_mut().zip(e) {
                    *m += v;
                }
            }
            queue_mean.iter_mut().for_each(|m| *m /= queue.len() as f64);
            let next = match &self.prototypes[class] {
                Some(_) if self.momentum >= 1.0 => continue,
                Some(old) => old
                    .iter()
                    .zip(&queue_mean)
                    .map(|(o, q)| self.momentum * o + (1.0 - self.momentum) * q)
                    .collect(),
                None => queue_mean,
            };
            self.prototypes[class] = Some(unit(next));
        }
        Ok(selected)
    }

    /// Folds normalized label histograms into the EMA priors. An empty
    /// slice leaves the corresponding prior untouched.
    pub fn update_priors(&mut self, source_labels: &[ClassId], target_labels: &[ClassId]) {
        let fold = |prior: &mut Vec<f64>, labels: &[ClassId], momentum: f64, floor: f64, classes: usize| {
            if labels.is_empty() {
                return;
            }
            let hist = floor_simplex(histogram(labels, classes), floor);
            let blended = prior
                .iter()
                .zip(&hist)
                .map(|(p, h)| momentum * p + (1.0 - momentum) * h)
                .collect();
            *prior = floor_simplex(blended, floor);
        };
        fold(&mut self.source_prior, source_labels, self.momentum, self.prior_floor, self.num_classes);
        fold(&mut self.target_prior, target_labels, self.momentum, self.prior_floor, self.num_classes);
    }

    pub(crate) fn restore_parts(
        &mut self,
        prototypes: Vec<Option<Vec<f64>>>,
        queues: Vec<VecDeque<Vec<f64>>>,
        source_prior: Vec<f64>,
        target_prior: Vec<f64>,
    ) -> Result<()> {
        let c = self.num_classes;
        if prototypes.len() != c || queues.len() != c || source_prior.len() != c || target_prior.len() != c {
            return Err(Error::Format("class count mismatch in target snapshot".into()));
        }
        self.prototypes = prototypes;
        self.queues = queues;
        self.source_prior = source_prior;
        self.target_prior = target_prior;
        Ok(())
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn histogram(labels: &[ClassId], classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; classes];
    for &l in labels {
        h[l] += 1.0;
    }
    h.iter_mut().for_each(|v| *v /= labels.len() as f64);
    h
}

/// Projects onto the simplex with every entry at least `floor`: floored
/// entries are pinned and the remaining mass is rescaled over the rest.
pub fn floor_simplex(mut v: Vec<f64>, floor: f64) -> Vec<f64> {
    renormalize(&mut v);
    let mut pinned = vec![false; v.len()];
    loop {
        let mut changed = false;
        for (x, p) in v.iter_mut().zip(pinned.iter_mut()) {
            if !*p && *x < floor {
                *x = floor;
                *p = true;
                changed = true;
            }
        }
        let fixed: f64 = v.iter().zip(&pinned).filter(|(_, p)| **p).map(|(x, _)| x).sum();
        let free: f64 = v.iter().zip(&pinned).filter(|(_, p)| !**p).map(|(x, _)| x).sum();
        if free > 0.0 {
            let scale = (1.0 - fixed) / free;
            for (x, p) in v.iter_mut().zip(&pinned) {
                if !*p {
                    *x *= scale;
                }
            }
        }
        if !changed {
            return v;
        }
    }
}

/// Source class posterior scaled by `target_prior / source_prior` and
/// renormalized.
pub fn shift_corrected_posterior(bank: &GmmBank, state: &TargetState, f: &[f64]) -> Result<Vec<f64>> {
    let source = bank.class_posterior(f)?;
    Ok(apply_prior_ratio(&source, state.source_prior(), state.target_prior()))
}

/// `renormalize(posterior * target / source)`.
pub fn apply_prior_ratio(posterior: &[f64], source_prior: &[f64], target_prior: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = posterior
        .iter()
        .zip(source_prior.iter().zip(target_prior))
        .map(|(p, (s, t))| p * (t / s))
        .collect();
    renormalize(&mut out);
    out
}

/// Scores every class by the shift-corrected posterior times a softmax over
/// cosine similarities to the target prototypes, returning the best class
/// and its score. Classes without a prototype contribute a cosine of zero.
pub fn pseudo_label_target(bank: &GmmBank, state: &TargetState, f: &[f64]) -> Result<(ClassId, f64)> {
    let posterior = shift_corrected_posterior(bank, state, f)?;
    let sims: Vec<f64> = (0..state.num_classes())
        .map(|c| state.prototype(c).map_or(0.0, |p| cosine(p, f)))
        .collect();
    let sim = softmax(&sims);
    let scores: Vec<f64> = posterior.iter().zip(&sim).map(|(p, s)| p * s).collect();
    let best = argmax(&scores);
    Ok((best, scores[best]))
}

/// Nearest component of `class` as positive and of every other class as
/// negative; `alpha` starts at 1 and is replaced by the scene weight for
/// weakly annotated scenes.
pub fn select_target_prototypes(bank: &GmmBank, f: &[f64], class: ClassId) -> Result<PrototypeSelection> {
    select_with_class(bank, f, class)
}

/// One isotropic component per weakly annotated class of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGmm {
    components: Vec<Option<SceneComponent>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneComponent {
    pub mean: Vec<f64>,
    pub sigma: f64,
}

impl SceneGmm {
    pub fn component(&self, class: ClassId) -> Option<&SceneComponent> {
        self.components.get(class).and_then(Option::as_ref)
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.components
            .iter()
            .enumerate()
            .filter_map(|(c, s)| s.as_ref().map(|_| c))
    }
}

/// Fits a scene mixture: each class mean is the mean of the pixels annotated
/// with that class; its spread is the RMS distance to that mean over the
/// pixels pseudo-labeled with the class, floored at `var_floor`.
///
/// `soft_pseudo`, when given, holds per-pixel class probabilities and
/// replaces the hard indicator, averaging over all pixels instead.
pub fn fit_scene_gmm<E: AsRef<[f64]>>(
    embeddings: &[E],
    labels: &[LabelState],
    pseudo_labels: &[ClassId],
    soft_pseudo: Option<&[Vec<f64>]>,
    num_classes: usize,
    var_floor: f64,
) -> Result<SceneGmm> {
    let n = embeddings.len();
    if labels.len() != n || pseudo_labels.len() != n || soft_pseudo.is_some_and(|s| s.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let mut means: Vec<Option<(Vec<f64>, usize)>> = vec![None; num_classes];
    for (e, label) in embeddings.iter().zip(labels) {
        let Some(class) = label.class() else { continue };
        let e = e.as_ref();
        let (mean, count) = means[class].get_or_insert_with(|| (vec![0.0; e.len()], 0));
        *count += 1;
        // running mean
        let k = *count as f64;
        for (m, x) in mean.iter_mut().zip(e) {
            *m += (x - *m) / k;
        }
    }
    if means.iter().all(Option::is_none) {
        return Err(Error::InvalidConfig("scene has no weakly labeled pixel".into()));
    }
    let components = means
        .into_iter()
        .enumerate()
        .map(|(class, entry)| {
            entry.map(|(mean, _)| {
                let (total, weight) = match soft_pseudo {
                    Some(probs) => {
                        let total: f64 = embeddings
                            .iter()
                            .zip(probs)
                            .map(|(e, p)| p[class] * squared_distance(e.as_ref(), &mean))
                            .sum();
                        (total, n as f64)
                    }
                    None => embeddings
                        .iter()
                        .zip(pseudo_labels)
                        .filter(|(_, &y)| y == class)
                        .fold((0.0, 0.0), |(t, w), (e, _)| (t + squared_distance(e.as_ref(), &mean), w + 1.0)),
                };
                let sigma = if weight > 0.0 { (total / weight).sqrt() } else { 0.0 };
                SceneComponent {
                    mean,
                    sigma: sigma.max(var_floor),
                }
            })
        })
        .collect();
    Ok(SceneGmm { components })
}

/// `exp(-|f - mu_k|^2 / (2 sigma_k))` for the positive prototype's class; if
/// the scene has no annotation of that class, the source-mixture weight of
/// the positive component is used instead.
pub fn scene_alpha(scene: &SceneGmm, bank: &GmmBank, f: &[f64], positive: &Prototype) -> Result<f64> {
    match scene.component(positive.class) {
        Some(comp) => Ok(gaussian_alpha(f, &comp.mean, comp.sigma)),
        None => {
            let gmm = bank.require(positive.class)?;
            Ok(gaussian_alpha(
                f,
                gmm.mean(positive.component),
                gmm.scalar_variance(positive.component),
            ))
        }
    }
}
