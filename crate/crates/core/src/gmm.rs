//! Per-class diagonal Gaussian mixtures over source embeddings.
//!
//! Each class keeps a FIFO queue of embeddings whose classifier prediction
//! agreed with their annotation. After every push the class mixture is
//! refitted with one momentum Sinkhorn-EM step over the queue: the E-step
//! solves an entropic transport problem between queue entries (uniform row
//! mass) and components (column mass equal to the mixing weights), the
//! M-step blends the weighted batch estimates into the running parameters.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, log_sum_exp, squared_distance};
use crate::types::{Batch, ClassId, Domain, RunConfig};

/// Consecutive starved updates after which a component is re-seeded.
pub const STARVATION_LIMIT: u32 = 100;

/// Total responsibility below which a component counts as starved.
const STARVED_MASS: f64 = 1e-9;

/// `log N(x; mean, diag(var))`.
pub fn log_gaussian_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var) {
        let diff = xi - mi;
        acc += (2.0 * PI * vi).ln() + diff * diff / vi;
    }
    -0.5 * acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassGmm {
    class: ClassId,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    var_floor: f64,
    // -0.5 * sum(ln(2 pi var)) per component
    log_norms: Vec<f64>,
    inv_variances: Vec<Vec<f64>>,
    starved: Vec<u32>,
}

impl ClassGmm {
    pub fn new(
        class: ClassId,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
        var_floor: f64,
    ) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.len() != m || variances.len() != m {
            return Err(Error::InvalidConfig(
                "mixture needs matching, non-empty weights/means/variances".into(),
            ));
        }
        let dim = means[0].len();
        if means.iter().chain(&variances).any(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: means.iter().chain(&variances).map(Vec::len).find(|&l| l != dim).unwrap_or(0),
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig("mixture weights must form a simplex".into()));
        }
        let mut gmm = Self {
            class,
            weights,
            means,
            variances,
            var_floor,
            log_norms: vec![0.0; m],
            inv_variances: Vec::new(),
            starved: vec![0; m],
        };
        gmm.finish_update();
        Ok(gmm)
    }

    /// Farthest-point seeding: the first mean is the entry closest to the
    /// data centroid, each further mean the entry farthest from those chosen.
    /// Weights start uniform and every variance at the average per-dimension
    /// spread of the data.
    pub fn seed<'a, I>(class: ClassId, data: I, components: usize, var_floor: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let data: Vec<&[f64]> = data.into_iter().collect();
        if data.len() < components || components == 0 {
            return Err(Error::InvalidConfig(format!(
                "seeding {components} components needs at least as many points, got {}",
                data.len()
            )));
        }
        let dim = data[0].len();
        let mut centroid = vec![0.0; dim];
        for x in &data {
            for (c, v) in centroid.iter_mut().zip(x.iter()) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= data.len() as f64);
        let spread = data.iter().map(|x| squared_distance(x, &centroid)).sum::<f64>()
            / (data.len() * dim) as f64;

        let first = data
            .iter()
            .map(|x| squared_distance(x, &centroid))
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
            .0;
        let mut chosen = vec![first];
        let mut nearest: Vec<f64> = data.iter().map(|x| squared_distance(x, data[first])).collect();
        while chosen.len() < components {
            let next = argmax(&nearest);
            chosen.push(next);
            for (d, x) in nearest.iter_mut().zip(&data) {
                *d = d.min(squared_distance(x, data[next]));
            }
        }
        let var = spread.max(var_floor);
        Self::new(
            class,
            vec![1.0 / components as f64; components],
            chosen.iter().map(|&i| data[i].to_vec()).collect(),
            vec![vec![var; dim]; components],
            var_floor,
        )
    }

    fn finish_update(&mut self) {
        for var in &mut self.variances {
            for v in var.iter_mut() {
                if !(*v >= self.var_floor) {
                    *v = self.var_floor;
                }
            }
        }
        let total: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= total);
        self.refresh_cache();
    }

    fn refresh_cache(&mut self) {
        self.log_norms = self
            .variances
            .iter()
            .map(|var| -0.5 * var.iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>())
            .collect();
        self.inv_variances = self.variances.iter().map(|var| var.iter().map(|v| 1.0 / v).collect()).collect();
    }

    pub fn class(&self) -> ClassId {
        self.class
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn mean(&self, component: usize) -> &[f64] {
        &self.means[component]
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    pub fn var_floor(&self) -> f64 {
        self.var_floor
    }

    /// Scalar spread of one component: the mean of its diagonal variances.
    pub fn scalar_variance(&self, component: usize) -> f64 {
        let var = &self.variances[component];
        var.iter().sum::<f64>() / var.len() as f64
    }

    /// `log N(f; mu_m, Sigma_m)` for every component.
    pub fn component_log_densities(&self, f: &[f64]) -> Vec<f64> {
        (0..self.components())
            .map(|m| self.component_log_density(m, f))
            .collect()
    }

    fn component_log_density(&self, m: usize, f: &[f64]) -> f64 {
        let mut quad = 0.0;
        for ((x, mu), iv) in f.iter().zip(&self.means[m]).zip(&self.inv_variances[m]) {
            let diff = x - mu;
            quad += diff * diff * iv;
        }
        self.log_norms[m] - 0.5 * quad
    }

    /// `log pi_m + log N(f; mu_m, Sigma_m)` for every component.
    pub fn weighted_log_densities(&self, f: &[f64]) -> Vec<f64> {
        (0..self.components())
            .map(|m| self.weights[m].ln() + self.component_log_density(m, f))
            .collect()
    }

    /// `log p(f | c)` of the whole mixture.
    pub fn log_class_conditional(&self, f: &[f64]) -> f64 {
        log_sum_exp(&self.weighted_log_densities(f))
    }

    /// `p(m | f, c)` for every component.
    pub fn component_posterior(&self, f: &[f64]) -> Vec<f64> {
        let logs = self.weighted_log_densities(f);
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Component with the highest posterior for `f` (lowest index on ties).
    pub fn nearest_component(&self, f: &[f64]) -> usize {
        argmax(&self.weighted_log_densities(f))
    }
}

/// Entropic transport plan between `n` points and `m` components.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    /// Row-major `rows x cols`; rows carry mass `1/rows`, columns the
    /// requested marginals.
    plan: Vec<f64>,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.plan[row * self.cols + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.plan
    }

    /// Plan rescaled so every row is a per-point responsibility vector.
    pub fn responsibilities(&self) -> Vec<f64> {
        let n = self.rows as f64;
        self.plan.iter().map(|p| p * n).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.plan.chunks(self.cols) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }
}

/// Log-domain Sinkhorn iterations on the kernel `exp(log_lik / eps)`.
///
/// Each iteration rescales rows to mass `1/n` and then columns to
/// `col_marginals`. Stops after `max_iters` iterations, or earlier once the
/// largest row-marginal violation drops below `tol` (pass `0.0` for a fixed
/// iteration count).
pub fn sinkhorn(
    log_lik: &[f64],
    rows: usize,
    col_marginals: &[f64],
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let cols = col_marginals.len();
    if rows == 0 || cols == 0 || log_lik.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            got: log_lik.len(),
        });
    }
    if let Some(bad) = log_lik.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericalInstability(format!(
            "non-finite log-likelihood {bad} in sinkhorn input"
        )));
    }
    let kernel: Vec<f64> = log_lik.iter().map(|l| l / eps).collect();
    if let Some(plan) = scaled_sinkhorn(&kernel, rows, col_marginals, max_iters, tol) {
        return Ok(plan);
    }
    let log_row = -(rows as f64).ln();
    let log_col: Vec<f64> = col_marginals.iter().map(|c| c.ln()).collect();
    let mut f = vec![0.0; rows];
    let mut g = vec![0.0; cols];
    let mut scratch_row = vec![0.0; cols];
    let mut scratch_col = vec![0.0; rows];
    let mut iterations = 0;
    while iterations < max_iters {
        for i in 0..rows {
            for j in 0..cols {
                scratch_row[j] = kernel[i * cols + j] + g[j];
            }
            f[i] = log_row - log_sum_exp(&scratch_row);
        }
        for j in 0..cols {
            for i in 0..rows {
                scratch_col[i] = kernel[i * cols + j] + f[i];
            }
            g[j] = if log_col[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_col[j] - log_sum_exp(&scratch_col)
            };
        }
        iterations += 1;
        if tol > 0.0 {
            let target = 1.0 / rows as f64;
            let worst = (0..rows)
                .map(|i| {
                    let s: f64 = (0..cols).map(|j| (f[i] + kernel[i * cols + j] + g[j]).exp()).sum();
                    (s - target).abs()
                })
                .fold(0.0, f64::max);
            if worst < tol {
                break;
            }
        }
    }
    let mut plan = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            plan.push((f[i] + kernel[i * cols + j] + g[j]).exp());
        }
    }
    if plan.iter().any(|p| !p.is_finite()) {
        return Err(Error::NumericalInstability("sinkhorn plan is not finite".into()));
    }
    Ok(TransportPlan {
        rows,
        cols,
        plan,
        iterations,
    })
}

/// Sinkhorn in the linear domain on a row-max-shifted kernel, so the loop
/// needs no exponentials. Returns `None` when scaling under- or overflows
/// and the log-domain solver has to take over.
fn scaled_sinkhorn(kernel: &[f64], rows: usize, col_marginals: &[f64], max_iters: usize, tol: f64) -> Option<TransportPlan> {
    let cols = col_marginals.len();
    let mut k = Vec::with_capacity(kernel.len());
    for row in kernel.chunks_exact(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        k.extend(row.iter().map(|v| (v - max).exp()));
    }
    let target = 1.0 / rows as f64;
    let mut u = vec![1.0; rows];
    let mut v = vec![1.0; cols];
    let mut col_acc = vec![0.0; cols];
    let mut iterations = 0;
    while iterations < max_iters {
        for (i, ui) in u.iter_mut().enumerate() {
            let s: f64 = k[i * cols..(i + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
            *ui = target / s;
        }
        col_acc.iter_mut().for_each(|c| *c = 0.0);
        for (i, ui) in u.iter().enumerate() {
            for (acc, kij) in col_acc.iter_mut().zip(&k[i * cols..(i + 1) * cols]) {
                *acc += kij * ui;
            }
        }
        for ((vj, acc), c) in v.iter_mut().zip(&col_acc).zip(col_marginals) {
            *vj = if *c == 0.0 { 0.0 } else { c / acc };
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return None;
        }
        iterations += 1;
        if tol > 0.0 {
            let worst = (0..rows)
                .map(|i| {
                    let s: f64 = k[i * cols..(i + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
                    (u[i] * s - target).abs()
                })
                .fold(0.0, f64::max);
            if worst < tol {
                break;
            }
        }
    }
    let mut plan = Vec::with_capacity(rows * cols);
    for (i, ui) in u.iter().enumerate() {
        for (kij, vj) in k[i * cols..(i + 1) * cols].iter().zip(&v) {
            plan.push(ui * kij * vj);
        }
    }
    if plan.iter().any(|p| !p.is_finite()) || (0..rows).any(|i| plan[i * cols..(i + 1) * cols].iter().all(|&p| p == 0.0)) {
        return None;
    }
    Some(TransportPlan {
        rows,
        cols,
        plan,
        iterations,
    })
}

/// E-step: transport plan between `embeddings` and the mixture components
/// with column marginals equal to the current mixing weights.
pub fn sinkhorn_e_step<E: AsRef<[f64]>>(
    gmm: &ClassGmm,
    embeddings: &[E],
    eps: f64,
    iters: usize,
) -> Result<TransportPlan> {
    if embeddings.is_empty() {
        return Err(Error::InvalidConfig("e-step needs at least one embedding".into()));
    }
    let m = gmm.components();
    let mut log_lik = Vec::with_capacity(embeddings.len() * m);
    for e in embeddings {
        let e = e.as_ref();
        if e.len() != gmm.dim() {
            return Err(Error::DimensionMismatch {
                expected: gmm.dim(),
                got: e.len(),
            });
        }
        for j in 0..m {
            log_lik.push(gmm.component_log_density(j, e));
        }
    }
    sinkhorn(&log_lik, embeddings.len(), gmm.weights(), eps, iters, 0.0)
}

/// M-step: weighted batch estimates blended into the running parameters as
/// `momentum * old + (1 - momentum) * estimate`. `responsibilities` is
/// row-major `n x M`; a component with no responsibility mass keeps its
/// parameters.
pub fn momentum_m_step<E: AsRef<[f64]>>(
    gmm: &ClassGmm,
    embeddings: &[E],
    responsibilities: &[f64],
    momentum: f64,
) -> Result<ClassGmm> {
    let m = gmm.components();
    let dim = gmm.dim();
    let n = embeddings.len();
    if responsibilities.len() != n * m {
        return Err(Error::DimensionMismatch {
            expected: n * m,
            got: responsibilities.len(),
        });
    }
    let total: f64 = responsibilities.iter().sum();
    let mut next = gmm.clone();
    for j in 0..m {
        let mass: f64 = (0..n).map(|i| responsibilities[i * m + j]).sum();
        if !(mass > STARVED_MASS) {
            next.starved[j] = next.starved[j].saturating_add(1);
            continue;
        }
        next.starved[j] = 0;
        let mut mean = vec![0.0; dim];
        for (i, e) in embeddings.iter().enumerate() {
            let r = responsibilities[i * m + j];
            for (acc, x) in mean.iter_mut().zip(e.as_ref()) {
                *acc += r * x;
            }
        }
        mean.iter_mut().for_each(|v| *v /= mass);
        let mut var = vec![0.0; dim];
        for (i, e) in embeddings.iter().enumerate() {
            let r = responsibilities[i * m + j];
            for ((acc, x), mu) in var.iter_mut().zip(e.as_ref()).zip(&mean) {
                *acc += r * (x - mu) * (x - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= mass);
        let keep = momentum;
        let blend = 1.0 - momentum;
        for (old, new) in next.means[j].iter_mut().zip(&mean) {
            *old = keep * *old + blend * new;
        }
        for (old, new) in next.variances[j].iter_mut().zip(&var) {
            *old = keep * *old + blend * new;
        }
        next.weights[j] = keep * next.weights[j] + blend * mass / total;
    }
    next.finish_update();
    Ok(next)
}

/// Outcome of one gated bank update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateReport {
    /// Batch indices whose embeddings were pushed.
    pub pushed: Vec<usize>,
    /// Classes whose mixture was refitted.
    pub refitted: Vec<ClassId>,
}

/// Class mixtures plus their embedding queues.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmBank {
    num_classes: usize,
    dim: usize,
    components: usize,
    var_floor: f64,
    capacity: usize,
    push_per_class: usize,
    momentum: f64,
    sinkhorn_eps: f64,
    sinkhorn_iters: usize,
    gmms: Vec<Option<ClassGmm>>,
    queues: Vec<VecDeque<Vec<f64>>>,
}

impl GmmBank {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            num_classes: cfg.num_classes,
            dim: cfg.embed_dim,
            components: cfg.components,
            var_floor: cfg.var_floor,
            capacity: cfg.bank_capacity,
            push_per_class: cfg.bank_push_per_class,
            momentum: cfg.ema_momentum,
            sinkhorn_eps: cfg.sinkhorn_eps,
            sinkhorn_iters: cfg.sinkhorn_iters,
            gmms: vec![None; cfg.num_classes],
            queues: vec![VecDeque::new(); cfg.num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn gmm(&self, class: ClassId) -> Option<&ClassGmm> {
        self.gmms.get(class).and_then(Option::as_ref)
    }

    /// Mixture of `class`, or an error while it is still uninitialized.
    pub fn require(&self, class: ClassId) -> Result<&ClassGmm> {
        self.gmm(class).ok_or(Error::Uninitialized(class))
    }

    pub fn set_gmm(&mut self, gmm: ClassGmm) -> Result<()> {
        let class = gmm.class();
        if class >= self.num_classes {
            return Err(Error::InvalidConfig(format!("class {class} out of range")));
        }
        if gmm.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: gmm.dim(),
            });
        }
        self.gmms[class] = Some(gmm);
        Ok(())
    }

    pub fn queue(&self, class: ClassId) -> &VecDeque<Vec<f64>> {
        &self.queues[class]
    }

    /// True once every class has a fitted mixture.
    pub fn is_ready(&self) -> bool {
        self.gmms.iter().all(Option::is_some)
    }

    /// Appends to the class queue, evicting the oldest entry when full.
    pub fn push(&mut self, class: ClassId, embedding: Vec<f64>) {
        let queue = &mut self.queues[class];
        if queue.len() == self.capacity {
            queue.pop_front();
        }
        queue.push_back(embedding);
    }

    /// Pushes the source pixels whose predicted class equals their annotated
    /// class (at most `bank_push_per_class` per class, in batch order), then
    /// runs one Sinkhorn-EM step for every class with a non-empty queue.
    pub fn gated_update(&mut self, batch: &Batch, predictions: &[ClassId]) -> Result<GateReport> {
        if batch.domain() != Domain::Source {
            return Err(Error::InvalidConfig("the source GMM only accepts source batches".into()));
        }
        if predictions.len() != batch.len() {
            return Err(Error::DimensionMismatch {
                expected: batch.len(),
                got: predictions.len(),
            });
        }
        let mut report = GateReport::default();
        let mut pushed_per_class = vec![0usize; self.num_classes];
        for (i, (pixel, &pred)) in batch.pixels().iter().zip(predictions).enumerate() {
            let Some(label) = pixel.label.class() else {
                continue;
            };
            if label != pred || pushed_per_class[label] >= self.push_per_class {
                continue;
            }
            if pixel.feature.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: pixel.feature.dim(),
                });
            }
            pushed_per_class[label] += 1;
            self.push(label, pixel.feature.as_slice().to_vec());
            report.pushed.push(i);
        }
        for class in 0..self.num_classes {
            if self.refit_class(class)? {
                report.refitted.push(class);
            }
        }
        Ok(report)
    }

    /// One E/M step over the queue of `class`, seeding the mixture first if
    /// it does not exist yet. Returns whether anything was fitted.
    pub fn refit_class(&mut self, class: ClassId) -> Result<bool> {
        let queue = &self.queues[class];
        if queue.is_empty() {
            return Ok(false);
        }
        let data: Vec<&[f64]> = queue.iter().map(Vec::as_slice).collect();
        let current = match &self.gmms[class] {
            Some(g) => g.clone(),
            None if data.len() >= self.components => {
                ClassGmm::seed(class, data.iter().copied(), self.components, self.var_floor)?
            }
            None => return Ok(false),
        };
        let plan = sinkhorn_e_step(&current, &data, self.sinkhorn_eps, self.sinkhorn_iters)?;
        let mut next = momentum_m_step(&current, &data, &plan.responsibilities(), self.momentum)?;
        for m in 0..next.components() {
            if next.starved[m] >= STARVATION_LIMIT {
                reseed_component(&mut next, m, &data);
            }
        }
        self.gmms[class] = Some(next);
        Ok(true)
    }

    /// `p(c, m | f)` for every class and component under `class_priors`.
    pub fn joint_posterior(&self, f: &[f64], class_priors: &[f64]) -> Result<Vec<Vec<f64>>> {
        if class_priors.len() != self.num_classes {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes,
                got: class_priors.len(),
            });
        }
        let mut logs = Vec::with_capacity(self.num_classes);
        for (c, prior) in class_priors.iter().enumerate() {
            let gmm = self.require(c)?;
            let lp = prior.ln();
            logs.push(gmm.weighted_log_densities(f).into_iter().map(|l| l + lp).collect::<Vec<_>>());
        }
        let flat: Vec<f64> = logs.iter().flatten().copied().collect();
        let lse = log_sum_exp(&flat);
        Ok(logs
            .into_iter()
            .map(|row| row.into_iter().map(|l| (l - lse).exp()).collect())
            .collect())
    }

    /// `p(c | f) = sum_m p(c, m | f)` under uniform class priors.
    pub fn class_posterior(&self, f: &[f64]) -> Result<Vec<f64>> {
        let uniform = vec![1.0 / self.num_classes as f64; self.num_classes];
        Ok(self
            .joint_posterior(f, &uniform)?
            .iter()
            .map(|row| row.iter().sum())
            .collect())
    }
}

fn reseed_component(gmm: &mut ClassGmm, m: usize, data: &[&[f64]]) {
    let worst = data
        .iter()
        .map(|x| gmm.log_class_conditional(x))
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, l)| if l < best.1 { (i, l) } else { best })
        .0;
    let others = gmm.components().saturating_sub(1).max(1) as f64;
    let dim = gmm.dim();
    let mut var = vec![0.0; dim];
    for (j, v) in gmm.variances.iter().enumerate() {
        if j != m || gmm.components() == 1 {
            for (acc, x) in var.iter_mut().zip(v) {
                *acc += x / others;
            }
        }
    }
    gmm.means[m] = data[worst].to_vec();
    gmm.variances[m] = var;
    gmm.weights[m] = gmm.weights[m].max(1.0 / gmm.components() as f64);
    gmm.starved[m] = 0;
    gmm.finish_update();
}

/// Serializable view of a mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGmmSnapshot {
    pub class: ClassId,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl From<&ClassGmm> for ClassGmmSnapshot {
    fn from(g: &ClassGmm) -> Self {
        Self {
            class: g.class,
            weights: g.weights.clone(),
            means: g.means.clone(),
            variances: g.variances.clone(),
        }
    }
}

impl GmmBank {
    pub fn snapshot(&self) -> Vec<Option<ClassGmmSnapshot>> {
        self.gmms.iter().map(|g| g.as_ref().map(ClassGmmSnapshot::from)).collect()
    }

    pub(crate) fn restore_parts(
        &mut self,
        gmms: Vec<Option<ClassGmm>>,
        queues: Vec<VecDeque<Vec<f64>>>,
    ) -> Result<()> {
        if gmms.len() != self.num_classes || queues.len() != self.num_classes {
            return Err(Error::Format("class count mismatch in bank snapshot".into()));
        }
        self.gmms = gmms;
        self.queues = queues;
        Ok(())
    }
}

impl ClassGmm {
    /// Rebuilds a stored mixture bit for bit: no renormalization, no flooring.
    pub(crate) fn from_stored(
        class: ClassId,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
        var_floor: f64,
        starved: Vec<u32>,
    ) -> Result<Self> {
        let m = weights.len();
        let dim = means.first().map_or(0, Vec::len);
        if m == 0
            || dim == 0
            || means.len() != m
            || variances.len() != m
            || starved.len() != m
            || means.iter().chain(&variances).any(|v| v.len() != dim)
        {
            return Err(Error::Format(format!("inconsistent mixture shapes for class {class}")));
        }
        if variances.iter().flatten().any(|v| !(*v > 0.0)) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Format(format!("invalid mixture parameters for class {class}")));
        }
        let mut gmm = Self {
            class,
            weights,
            means,
            variances,
            var_floor,
            log_norms: Vec::new(),
            inv_variances: Vec::new(),
            starved,
        };
        gmm.refresh_cache();
        Ok(gmm)
    }

    pub(crate) fn starved(&self) -> &[u32] {
        &self.starved
    }
}
