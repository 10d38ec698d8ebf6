//! Teacher-student training loop over the four data streams: labeled source,
//! unlabeled source, weakly labeled target and unlabeled target.
//!
//! Every per-row decision of a step (bank contents, prototype choice,
//! weights, pseudo-labels) is computed from the teacher. The student only
//! enters through the loss.

use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::eval::{evaluate, scene_inputs, EvalResult};
use crate::gmm::GmmBank;
use crate::loss::{confidence_weight, total_loss, LossReport, StepPlan};
use crate::math::{argmax, softmax};
use crate::model::{ramped_momentum, Model, ModelShape, Sgd, TeacherStudent};
use crate::select::{select_labeled_source, select_noisy_source, select_unlabeled_source, PrototypeSelection};
use crate::synth::Dataset;
use crate::target::{fit_scene_gmm, pseudo_label_target, scene_alpha, select_target_prototypes, TargetState};
use crate::types::{Batch, BatchPixel, ClassId, Domain, FeatureVector, LabelState, RunConfig, Scene};

/// Per-pixel weight of target self-training in weakly labeled scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfTrainWeight {
    /// Fraction of confident teacher predictions in the scene.
    Confidence,
    /// Distance of the pixel to its scene-mixture component.
    Alpha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub labeled_batch: usize,
    pub scenes_per_batch: usize,
    pub pixels_per_scene: usize,
    /// Iterations trained on labeled pixels only while the mixtures and the
    /// teacher settle; no contrastive or self-training term before this.
    pub warmup_iters: usize,
    /// Weight of the mean contrastive loss; 0 disables it.
    pub contrastive_weight: f64,
    /// Cross-entropy against teacher pseudo-labels on unlabeled pixels.
    pub self_training: bool,
    pub target_weighting: SelfTrainWeight,
    /// Route noisy source labels through the label-free prototype choice.
    pub noisy_source: bool,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            hidden_dim: 128,
            learning_rate: 0.05,
            sgd_momentum: 0.9,
            labeled_batch: 256,
            scenes_per_batch: 2,
            pixels_per_scene: 128,
            warmup_iters: 200,
            contrastive_weight: 1.0,
            self_training: true,
            target_weighting: SelfTrainWeight::Confidence,
            noisy_source: true,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.hidden_dim == 0 || self.labeled_batch == 0 || self.scenes_per_batch == 0 || self.pixels_per_scene == 0 {
            return fail("batch sizes and hidden_dim must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return fail("learning_rate must be positive and sgd_momentum in [0, 1)");
        }
        if !(self.contrastive_weight >= 0.0) {
            return fail("contrastive_weight must be non-negative");
        }
        if self.log_interval == 0 {
            return fail("log_interval must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    LabeledSource,
    UnlabeledSource,
    WeakTarget,
    UnlabeledTarget,
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub l_ce_l: f64,
    pub l_ce_u: f64,
    pub l_cl: f64,
    pub mean_alpha: f64,
    pub mean_w: f64,
    pub target_miou: f64,
}

/// Pseudo-labels handed out during one step, for audits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelTrace {
    pub source: Vec<ClassId>,
    pub target: Vec<ClassId>,
    /// Class used for the target positive prototype.
    pub target_contrastive: Vec<ClassId>,
    pub confidences: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub iteration: usize,
    pub branches: Vec<Branch>,
    pub pseudo: PseudoLabelTrace,
    pub loss: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRef {
    pub scene: u32,
    pub pixel: u32,
}

/// Index pools for the streams of a dataset.
#[derive(Clone, Debug, Default)]
pub struct Streams {
    pub labeled: Vec<PixelRef>,
    pub labeled_classes: Vec<ClassId>,
    pub unlabeled_source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Streams {
    /// Indices refer to `data.source` for source pools and `data.target`
    /// for the target pool.
    pub fn new(data: &Dataset) -> Self {
        let mut streams = Streams::default();
        for (s, scene) in data.source.iter().enumerate() {
            if !scene.has_labels() {
                streams.unlabeled_source.push(s);
                continue;
            }
            for (p, label) in scene.labels().iter().enumerate() {
                if let Some(c) = label.class() {
                    streams.labeled.push(PixelRef {
                        scene: s as u32,
                        pixel: p as u32,
                    });
                    streams.labeled_classes.push(c);
                }
            }
        }
        streams.target = (0..data.target.len()).collect();
        streams
    }

    /// Branches a dataset can exercise.
    pub fn allowed_branches(&self, data: &Dataset) -> Vec<Branch> {
        let mut out = Vec::new();
        if !self.labeled.is_empty() {
            out.push(Branch::LabeledSource);
        }
        if !self.unlabeled_source.is_empty() {
            out.push(Branch::UnlabeledSource);
        }
        if data.target.iter().any(Scene::has_labels) {
            out.push(Branch::WeakTarget);
        }
        if data.target.iter().any(|s| !s.has_labels()) {
            out.push(Branch::UnlabeledTarget);
        }
        out
    }
}

/// Draws `n` indices so every class present in `classes` is equally likely,
/// then a uniform member of that class.
pub fn class_balanced_sample(classes: &[ClassId], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(!classes.is_empty(), "empty pool");
    let num = classes.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); num];
    for (i, &c) in classes.iter().enumerate() {
        members[c].push(i);
    }
    let present: Vec<&Vec<usize>> = members.iter().filter(|m| !m.is_empty()).collect();
    (0..n)
        .map(|_| {
            let group = present[rng.random_range(0..present.len())];
            group[rng.random_range(0..group.len())]
        })
        .collect()
}

fn gather(scene: &Scene, pixels: &[usize], out: &mut Vec<f64>) {
    for &p in pixels {
        out.extend(scene.raw(p).iter().map(|&v| v as f64));
    }
}

fn rows_to_matrix(flat: Vec<f64>, cols: usize) -> Array2<f64> {
    let rows = flat.len() / cols;
    Array2::from_shape_vec((rows, cols), flat).expect("row-major buffer")
}

/// Softmax confidence and argmax of each logit row.
fn teacher_decisions(logits: &Array2<f64>) -> (Vec<ClassId>, Vec<f64>) {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let p = softmax(&row.to_vec());
            let c = argmax(&p);
            (c, p[c])
        })
        .unzip()
}

fn unit_rows(m: &Array2<f64>) -> Vec<FeatureVector> {
    m.axis_iter(Axis(0)).map(|r| FeatureVector::from_unit(r.to_vec())).collect()
}

#[derive(Default)]
struct PlanRows {
    inputs: Vec<f64>,
    labeled: Vec<Option<ClassId>>,
    selftrain: Vec<Option<(ClassId, f64)>>,
    contrastive: Vec<Option<PrototypeSelection>>,
}

impl PlanRows {
    fn push(&mut self, labeled: Option<ClassId>, selftrain: Option<(ClassId, f64)>, sel: Option<PrototypeSelection>) {
        self.labeled.push(labeled);
        self.selftrain.push(selftrain);
        self.contrastive.push(sel);
    }
}

/// Model, optimizer, density bank and target state, advanced one step at a
/// time.
pub struct Trainer<'a> {
    pub run: RunConfig,
    pub train: TrainConfig,
    data: &'a Dataset,
    streams: Streams,
    pub pair: TeacherStudent,
    pub sgd: Sgd,
    pub bank: GmmBank,
    pub target: TargetState,
    pub(crate) rng: ChaCha8Rng,
    pub iteration: usize,
    pub teacher_updates: u64,
    /// Whether logged rows evaluate the student on the held-out scenes.
    pub evaluate_heldout: bool,
    /// Class priors of both domains at every logged row.
    pub prior_log: Vec<PriorSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSnapshot {
    pub iter: usize,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

const INIT_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

impl<'a> Trainer<'a> {
    pub fn new(run: RunConfig, train: TrainConfig, data: &'a Dataset) -> Result<Self> {
        run.validate()?;
        train.validate()?;
        let raw_dim = data
            .source
            .first()
            .or(data.target.first())
            .map(Scene::raw_dim)
            .ok_or_else(|| Error::InvalidConfig("dataset has no training scenes".into()))?;
        let shape = ModelShape {
            raw_dim,
            hidden: train.hidden_dim,
            embed: run.embed_dim,
            classes: run.num_classes,
        };
        let mut init = ChaCha8Rng::seed_from_u64(run.seed);
        init.set_stream(INIT_STREAM);
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        rng.set_stream(SAMPLE_STREAM);
        Ok(Self {
            streams: Streams::new(data),
            pair: TeacherStudent::new(Model::new(shape, &mut init)),
            sgd: Sgd::new(shape, train.learning_rate, train.sgd_momentum),
            bank: GmmBank::new(&run),
            target: TargetState::new(&run),
            rng,
            iteration: 0,
            teacher_updates: 0,
            evaluate_heldout: true,
            prior_log: Vec::new(),
            run,
            train,
            data,
        })
    }

    /// Snapshot of every piece of state the next step depends on.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            run: self.run.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            teacher_updates: self.teacher_updates,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            pair: self.pair.clone(),
            velocity: self.sgd.velocity().clone(),
            bank: self.bank.clone(),
            target: self.target.clone(),
        }
    }

    /// Continues a checkpointed run on the dataset it was trained on.
    pub fn resume(ck: Checkpoint, data: &'a Dataset) -> Result<Self> {
        let mut trainer = Self::new(ck.run, ck.train, data)?;
        if ck.pair.student.shape() != trainer.pair.student.shape() {
            return Err(Error::InvalidConfig("checkpoint model does not fit this dataset".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_stream(ck.rng.stream);
        rng.set_word_pos(ck.rng.word_pos);
        trainer.rng = rng;
        trainer.pair = ck.pair;
        *trainer.sgd.velocity_mut() = ck.velocity;
        trainer.bank = ck.bank;
        trainer.target = ck.target;
        trainer.iteration = ck.iteration;
        trainer.teacher_updates = ck.teacher_updates;
        Ok(trainer)
    }

    pub fn streams(&self) -> &Streams {
        &self.streams
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    fn contrastive_active(&self) -> bool {
        self.train.contrastive_weight > 0.0 && self.iteration >= self.train.warmup_iters && self.bank.is_ready()
    }

    fn self_training_active(&self) -> bool {
        self.train.self_training && self.iteration >= self.train.warmup_iters
    }

    /// Samples the batches, refreshes the bank, target state and priors, and
    /// decides every per-row target of the loss.
    fn plan(&mut self) -> Result<(StepPlan, Vec<Branch>, PseudoLabelTrace)> {
        let mut rows = PlanRows::default();
        let mut branches = Vec::new();
        let mut trace = PseudoLabelTrace::default();
        let raw_dim = self.pair.student.shape().raw_dim;

        if !self.streams.labeled.is_empty() {
            branches.push(Branch::LabeledSource);
            self.labeled_source(&mut rows, raw_dim)?;
        }
        if !self.streams.unlabeled_source.is_empty() {
            branches.push(Branch::UnlabeledSource);
            self.unlabeled_source(&mut rows, &mut trace, raw_dim)?;
        }
        if !self.streams.target.is_empty() {
            self.target_batch(&mut rows, &mut branches, &mut trace, raw_dim)?;
        }
        let plan = StepPlan {
            inputs: rows_to_matrix(rows.inputs, raw_dim),
            labeled: rows.labeled,
            selftrain: rows.selftrain,
            contrastive: rows.contrastive,
            temperature: self.run.temperature,
            contrastive_weight: self.train.contrastive_weight,
        };
        Ok((plan, branches, trace))
    }

    fn labeled_source(&mut self, rows: &mut PlanRows, raw_dim: usize) -> Result<()> {
        let picks = class_balanced_sample(&self.streams.labeled_classes, self.train.labeled_batch, &mut self.rng);
        let mut flat = Vec::with_capacity(picks.len() * raw_dim);
        let mut labels = Vec::with_capacity(picks.len());
        let mut scene_ids = Vec::with_capacity(picks.len());
        for &i in &picks {
            let r = self.streams.labeled[i];
            let scene = &self.data.source[r.scene as usize];
            gather(scene, &[r.pixel as usize], &mut flat);
            labels.push(scene.label(r.pixel as usize));
            scene_ids.push(scene.id());
        }
        let x = rows_to_matrix(flat, raw_dim);
        let teacher = self.pair.teacher.forward(x.clone());
        let (teacher_pred, _) = teacher_decisions(&teacher.logits);
        let feats = unit_rows(&teacher.embeddings);
        let batch = Batch::new(
            Domain::Source,
            feats
                .iter()
                .zip(&labels)
                .zip(&scene_ids)
                .map(|((f, &label), &scene_id)| BatchPixel {
                    feature: f.clone(),
                    label,
                    scene_id,
                })
                .collect(),
        )?;
        self.bank.gated_update(&batch, &teacher_pred)?;
        let given: Vec<ClassId> = labels.iter().filter_map(|l| l.class()).collect();
        self.target.update_priors(&given, &[]);

        let contrastive = self.contrastive_active();
        for (f, label) in feats.iter().zip(&labels) {
            let class = label.class().expect("labeled pool");
            let sel = if contrastive {
                Some(match label {
                    LabelState::Noisy(c) if self.train.noisy_source => select_noisy_source(&self.bank, f.as_slice(), *c)?,
                    _ => select_labeled_source(&self.bank, f.as_slice(), class)?,
                })
            } else {
                None
            };
            rows.push(Some(class), None, sel);
        }
        rows.inputs.extend(x.iter());
        Ok(())
    }

    /// Picks scenes uniformly with replacement and pixels without.
    fn sample_scene_pixels(&mut self, pool: &[usize], pixel_count: usize) -> Vec<(usize, Vec<usize>)> {
        (0..self.train.scenes_per_batch)
            .map(|_| {
                let s = pool[self.rng.random_range(0..pool.len())];
                let k = self.train.pixels_per_scene.min(pixel_count);
                let mut px = sample_indices(&mut self.rng, pixel_count, k).into_vec();
                px.sort_unstable();
                (s, px)
            })
            .collect()
    }

    fn unlabeled_source(&mut self, rows: &mut PlanRows, trace: &mut PseudoLabelTrace, raw_dim: usize) -> Result<()> {
        let pool = self.streams.unlabeled_source.clone();
        let pixel_count = self.data.source[pool[0]].pixel_count();
        let picks = self.sample_scene_pixels(&pool, pixel_count);
        let contrastive = self.contrastive_active();
        let self_training = self.self_training_active();
        for (s, pixels) in picks {
            let scene = &self.data.source[s];
            let (pred, conf) = teacher_decisions(&self.pair.teacher.logits(&scene_inputs(scene).view()));
            let w = confidence_weight(&conf, self.run.confidence_threshold);
            let mut flat = Vec::with_capacity(pixels.len() * raw_dim);
            gather(scene, &pixels, &mut flat);
            let x = rows_to_matrix(flat, raw_dim);
            let teacher = contrastive.then(|| self.pair.teacher.forward(x.clone()));
            for (row, &p) in pixels.iter().enumerate() {
                trace.source.push(pred[p]);
                trace.confidences.push(conf[p]);
                let sel = match &teacher {
                    Some(fwd) => Some(select_unlabeled_source(&self.bank, fwd.embeddings.row(row).as_slice().expect("row"))?),
                    None => None,
                };
                let st = self_training.then_some((pred[p], w));
                rows.push(None, st, sel);
            }
            rows.inputs.extend(x.iter());
        }
        Ok(())
    }

    fn target_batch(
        &mut self,
        rows: &mut PlanRows,
        branches: &mut Vec<Branch>,
        trace: &mut PseudoLabelTrace,
        raw_dim: usize,
    ) -> Result<()> {
        let pool = self.streams.target.clone();
        let pixel_count = self.data.target[pool[0]].pixel_count();
        let picks = self.sample_scene_pixels(&pool, pixel_count);
        let contrastive = self.contrastive_active();
        let self_training = self.self_training_active();
        let ready = self.bank.is_ready();
        let beta = self.run.confidence_threshold;
        let mut bank_pixels = Vec::new();
        let mut bank_labels = Vec::new();
        let mut confident = Vec::new();
        for (s, pixels) in picks {
            let scene = &self.data.target[s];
            let weak = scene.has_labels();
            branches.push(if weak { Branch::WeakTarget } else { Branch::UnlabeledTarget });
            // confidences over the whole scene feed the scene weight; full
            // embeddings are only needed for the scene mixture
            let use_alpha = weak && ready && (contrastive || self.train.target_weighting == SelfTrainWeight::Alpha);
            let inputs = scene_inputs(scene);
            let full = use_alpha.then(|| self.pair.teacher.forward(inputs.clone()));
            let logits = match &full {
                Some(fwd) => fwd.logits.clone(),
                None => self.pair.teacher.logits(&inputs.view()),
            };
            let (pred, conf) = teacher_decisions(&logits);
            let w = confidence_weight(&conf, beta);

            let mut flat = Vec::with_capacity(pixels.len() * raw_dim);
            gather(scene, &pixels, &mut flat);
            let x = rows_to_matrix(flat, raw_dim);
            let sampled = match &full {
                Some(_) => None,
                None => Some(self.pair.teacher.forward(x.clone())),
            };

            let scene_gmm = if let Some(full) = &full {
                let emb: Vec<&[f64]> = full.embeddings.axis_iter(Axis(0)).map(|r| r.to_slice().expect("row")).collect();
                let soft: Option<Vec<Vec<f64>>> = self
                    .run
                    .soft_scene_sigma
                    .then(|| full.logits.axis_iter(Axis(0)).map(|r| softmax(&r.to_vec())).collect());
                Some(fit_scene_gmm(
                    &emb,
                    scene.labels(),
                    &pred,
                    soft.as_deref(),
                    self.run.num_classes,
                    self.run.var_floor,
                )?)
            } else {
                None
            };

            for (row, &p) in pixels.iter().enumerate() {
                let f = match (&full, &sampled) {
                    (Some(fwd), _) => fwd.embeddings.row(p),
                    (None, Some(fwd)) => fwd.embeddings.row(row),
                    (None, None) => unreachable!("one teacher pass always runs"),
                };
                let f = f.as_slice().expect("row");
                let weak_label = scene.label(p).class();
                trace.target.push(pred[p]);
                trace.confidences.push(conf[p]);
                if conf[p] > beta {
                    confident.push(pred[p]);
                }
                bank_pixels.push(BatchPixel {
                    feature: FeatureVector::from_unit(f.to_vec()),
                    label: scene.label(p),
                    scene_id: scene.id(),
                });
                bank_labels.push(weak_label.unwrap_or(pred[p]));

                let mut sel = None;
                let mut alpha = None;
                if ready && (contrastive || use_alpha) {
                    let class = match weak_label {
                        Some(c) => c,
                        None => pseudo_label_target(&self.bank, &self.target, f)?.0,
                    };
                    trace.target_contrastive.push(class);
                    let mut choice = select_target_prototypes(&self.bank, f, class)?;
                    if let Some(g) = &scene_gmm {
                        choice.alpha = scene_alpha(g, &self.bank, f, &choice.positive)?;
                        alpha = Some(choice.alpha);
                    }
                    if contrastive {
                        sel = Some(choice);
                    }
                }
                let st = if self_training && weak_label.is_none() {
                    let weight = match (self.train.target_weighting, alpha) {
                        (SelfTrainWeight::Alpha, Some(a)) => a,
                        _ => w,
                    };
                    Some((pred[p], weight))
                } else {
                    None
                };
                rows.push(weak_label, st, sel);
            }
            rows.inputs.extend(x.iter());
        }
        let batch = Batch::new(Domain::Target, bank_pixels)?;
        self.target.update_target_bank(&batch, &bank_labels)?;
        self.target.update_priors(&[], &confident);
        Ok(())
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let (plan, branches, pseudo) = self.plan()?;
        let loss = total_loss(&self.pair.student, &plan);
        if !loss.total.is_finite() || !loss.grads.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                reason: format!(
                    "non-finite loss (ce_l {}, ce_u {}, cl {})",
                    loss.l_ce_labeled, loss.l_ce_unlabeled, loss.l_contrastive
                ),
            });
        }
        self.sgd.step(&mut self.pair.student, &loss.grads);
        if !self.pair.student.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                reason: "non-finite parameters after update".into(),
            });
        }
        let momentum = ramped_momentum(self.teacher_updates, self.run.teacher_momentum);
        self.pair.teacher_update(momentum);
        self.teacher_updates += 1;
        let record = StepRecord {
            iteration: self.iteration,
            branches,
            pseudo,
            loss,
        };
        self.iteration += 1;
        Ok(record)
    }

    pub fn evaluate(&self) -> EvalResult {
        evaluate(&self.pair.student, &self.data.heldout)
    }

    fn row(&self, record: &StepRecord) -> MetricsRow {
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        MetricsRow {
            iter: record.iteration + 1,
            l_ce_l: record.loss.l_ce_labeled,
            l_ce_u: record.loss.l_ce_unlabeled,
            l_cl: record.loss.l_contrastive,
            mean_alpha: mean(&record.loss.alphas),
            mean_w: mean(&record.loss.weights),
            target_miou: if self.evaluate_heldout && !self.data.heldout.is_empty() {
                self.evaluate().miou
            } else {
                0.0
            },
        }
    }

    /// Runs until `train.iterations`, logging a row every `log_interval`
    /// steps and after the last one. `on_step` sees every step record.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.iteration < self.train.iterations {
            let record = self.step()?;
            on_step(&record);
            let done = record.iteration + 1;
            if done % self.train.log_interval == 0 || done == self.train.iterations {
                rows.push(self.row(&record));
                self.prior_log.push(PriorSnapshot {
                    iter: done,
                    source: self.target.source_prior().to_vec(),
                    target: self.target.target_prior().to_vec(),
                });
            }
        }
        Ok(rows)
    }
}

/// Output of a complete training run.
pub struct TrainOutcome {
    pub pair: TeacherStudent,
    pub bank: GmmBank,
    pub target: TargetState,
    pub metrics: Vec<MetricsRow>,
    pub priors: Vec<PriorSnapshot>,
    pub branches: Vec<Vec<Branch>>,
    pub eval: EvalResult,
}

pub fn train(run: RunConfig, train: TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(run, train, data)?;
    let mut branches = Vec::new();
    let metrics = trainer.run(|r| branches.push(r.branches.clone()))?;
    let eval = trainer.evaluate();
    Ok(TrainOutcome {
        pair: trainer.pair,
        bank: trainer.bank,
        target: trainer.target,
        metrics,
        priors: trainer.prior_log,
        branches,
        eval,
    })
}

/// Writes metrics rows as CSV with a header.
pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}
