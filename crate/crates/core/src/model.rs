//! Toy segmentation network: an encoder shared by a classifier head and an
//! L2-normalized projection head, with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub raw_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
}

/// Affine map `x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("positive std");
        Self {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || normal.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `d x`.
    fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub input: Array2<f64>,
    pub hidden: Array2<f64>,
    pub proj_hidden: Array2<f64>,
    pub proj_raw: Array2<f64>,
    pub proj_norms: Array1<f64>,
    /// Unit-norm embeddings, one row per pixel.
    pub embeddings: Array2<f64>,
    pub logits: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    shape: ModelShape,
    pub encoder: Linear,
    pub proj_hidden: Linear,
    pub proj_out: Linear,
    pub classifier: Linear,
}

const NORM_EPS: f64 = 1e-12;

fn relu(mut a: Array2<f64>) -> Array2<f64> {
    a.mapv_inplace(|v| v.max(0.0));
    a
}

fn relu_backward(activated: &Array2<f64>, mut d: Array2<f64>) -> Array2<f64> {
    Zip::from(&mut d).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

impl Model {
    pub fn new(shape: ModelShape, rng: &mut impl Rng) -> Self {
        Self {
            shape,
            encoder: Linear::new(shape.raw_dim, shape.hidden, rng),
            proj_hidden: Linear::new(shape.hidden, shape.hidden, rng),
            proj_out: Linear::new(shape.hidden, shape.embed, rng),
            classifier: Linear::new(shape.hidden, shape.classes, rng),
        }
    }

    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            encoder: Linear::zeros(shape.raw_dim, shape.hidden),
            proj_hidden: Linear::zeros(shape.hidden, shape.hidden),
            proj_out: Linear::zeros(shape.hidden, shape.embed),
            classifier: Linear::zeros(shape.hidden, shape.classes),
        }
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    fn layers(&self) -> [&Linear; 4] {
        [&self.encoder, &self.proj_hidden, &self.proj_out, &self.classifier]
    }

    fn layers_mut(&mut self) -> [&mut Linear; 4] {
        [
            &mut self.encoder,
            &mut self.proj_hidden,
            &mut self.proj_out,
            &mut self.classifier,
        ]
    }

    pub fn forward(&self, input: Array2<f64>) -> Forward {
        let hidden = relu(self.encoder.forward(&input.view()));
        let proj_hidden = relu(self.proj_hidden.forward(&hidden.view()));
        let proj_raw = self.proj_out.forward(&proj_hidden.view());
        let proj_norms = proj_raw.map_axis(Axis(1), |row| row.dot(&row).sqrt().max(NORM_EPS));
        let embeddings = &proj_raw / &proj_norms.view().insert_axis(Axis(1));
        let logits = self.classifier.forward(&hidden.view());
        Forward {
            input,
            hidden,
            proj_hidden,
            proj_raw,
            proj_norms,
            embeddings,
            logits,
        }
    }

    /// Classifier logits only.
    pub fn logits(&self, input: &ArrayView2<f64>) -> Array2<f64> {
        let hidden = relu(self.encoder.forward(input));
        self.classifier.forward(&hidden.view())
    }

    /// Parameter gradients given upstream gradients on the embeddings and
    /// logits of `fwd`.
    pub fn backward(&self, fwd: &Forward, d_embeddings: &Array2<f64>, d_logits: &Array2<f64>) -> Model {
        let mut grads = Model::zeros(self.shape);
        // through x / |x|: (g - e (e . g)) / |x|
        let along = (d_embeddings * &fwd.embeddings).sum_axis(Axis(1));
        let d_raw = (d_embeddings - &(&fwd.embeddings * &along.view().insert_axis(Axis(1))))
            / &fwd.proj_norms.view().insert_axis(Axis(1));
        let d_ph = self
            .proj_out
            .backward(&fwd.proj_hidden.view(), &d_raw, &mut grads.proj_out);
        let d_ph = relu_backward(&fwd.proj_hidden, d_ph);
        let mut d_hidden = self
            .proj_hidden
            .backward(&fwd.hidden.view(), &d_ph, &mut grads.proj_hidden);
        d_hidden += &self
            .classifier
            .backward(&fwd.hidden.view(), d_logits, &mut grads.classifier);
        let d_hidden = relu_backward(&fwd.hidden, d_hidden);
        self.encoder
            .backward(&fwd.input.view(), &d_hidden, &mut grads.encoder);
        grads
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }

    /// Parameters in a fixed order: per layer weight (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers() {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params(), "flat parameter length");
        let mut it = values.iter();
        for layer in self.layers_mut() {
            layer.weight.iter_mut().chain(layer.bias.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// `self <- momentum * self + (1 - momentum) * other`.
    pub fn ema_towards(&mut self, other: &Model, momentum: f64) {
        for (mine, theirs) in self.layers_mut().into_iter().zip(other.layers()) {
            Zip::from(&mut mine.weight)
                .and(&theirs.weight)
                .for_each(|a, &b| *a = momentum * *a + (1.0 - momentum) * b);
            Zip::from(&mut mine.bias)
                .and(&theirs.bias)
                .for_each(|a, &b| *a = momentum * *a + (1.0 - momentum) * b);
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Model, scale: f64) {
        for (mine, theirs) in self.layers_mut().into_iter().zip(other.layers()) {
            mine.weight.scaled_add(scale, &theirs.weight);
            mine.bias.scaled_add(scale, &theirs.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in self.layers_mut() {
            layer.weight *= factor;
            layer.bias *= factor;
        }
    }
}

/// SGD with heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Model,
}

impl Sgd {
    pub fn new(shape: ModelShape, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Model::zeros(shape),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Model) {
        self.velocity.scale(self.momentum);
        self.velocity.add_scaled(grads, 1.0);
        model.add_scaled(&self.velocity, -self.lr);
    }

    pub fn velocity(&self) -> &Model {
        &self.velocity
    }

    pub(crate) fn velocity_mut(&mut self) -> &mut Model {
        &mut self.velocity
    }
}

/// Mean-teacher pair. The teacher is never trained directly.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudent {
    pub student: Model,
    pub teacher: Model,
}

impl TeacherStudent {
    pub fn new(student: Model) -> Self {
        Self {
            teacher: student.clone(),
            student,
        }
    }

    /// `teacher <- momentum * teacher + (1 - momentum) * student`.
    pub fn teacher_update(&mut self, momentum: f64) {
        self.teacher.ema_towards(&self.student, momentum);
    }
}

/// Teacher momentum actually applied at update `step` (0-based): ramps up as
/// `1 - 1/(step + 1)` so an early teacher is not dominated by the random
/// initialization, capped at `target`.
pub fn ramped_momentum(step: u64, target: f64) -> f64 {
    (1.0 - 1.0 / (step as f64 + 1.0)).min(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> ModelShape {
        ModelShape {
            raw_dim: 4,
            hidden: 6,
            embed: 3,
            classes: 3,
        }
    }

    fn input(rng: &mut impl Rng, n: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, 4), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(shape(), &mut rng);
        let fwd = model.forward(input(&mut rng, 10));
        for row in fwd.embeddings.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
        assert_eq!(fwd.logits.dim(), (10, 3));
        assert_eq!(model.logits(&fwd.input.view()), fwd.logits);
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(shape(), &mut rng);
        let flat = model.to_flat();
        assert_eq!(flat.len(), 4 * 6 + 6 + 6 * 6 + 6 + 6 * 3 + 3 + 6 * 3 + 3);
        let mut other = Model::zeros(shape());
        other.set_flat(&flat);
        assert_eq!(other, model);
    }

    /// Scalar objective sum(E * A) + sum(logits * B) for fixed random A, B.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::new(shape(), &mut rng);
        let x = input(&mut rng, 7);
        let a = Array2::from_shape_simple_fn((7, 3), || rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_simple_fn((7, 3), || rng.random_range(-1.0..1.0));
        let objective = |m: &Model| {
            let f = m.forward(x.clone());
            (&f.embeddings * &a).sum() + (&f.logits * &b).sum()
        };
        let grads = model.backward(&model.forward(x.clone()), &a, &b).to_flat();
        let base = model.to_flat();
        let h = 1e-6;
        let mut numeric = Vec::new();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            model.set_flat(&p);
            let up = objective(&model);
            p[i] -= 2.0 * h;
            model.set_flat(&p);
            numeric.push((up - objective(&model)) / (2.0 * h));
        }
        let diff: f64 = grads.iter().zip(&numeric).map(|(g, n)| (g - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
    }

    #[test]
    fn teacher_momentum_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pair = TeacherStudent::new(Model::new(shape(), &mut rng));
        let original = pair.teacher.clone();
        pair.student = Model::new(shape(), &mut rng);
        pair.teacher_update(1.0);
        assert_eq!(pair.teacher, original);
        pair.teacher_update(0.0);
        assert_eq!(pair.teacher, pair.student);
    }

    #[test]
    fn teacher_converges_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pair = TeacherStudent::new(Model::new(shape(), &mut rng));
        pair.student = Model::new(shape(), &mut rng);
        let t0 = pair.teacher.to_flat();
        let s = pair.student.to_flat();
        let lambda: f64 = 0.7;
        for _ in 0..12 {
            pair.teacher_update(lambda);
        }
        let closed = lambda.powi(12);
        for ((t, t0), s) in pair.teacher.to_flat().iter().zip(&t0).zip(&s) {
            let want = closed * t0 + (1.0 - closed) * s;
            assert!((t - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_caps_at_target() {
        assert_eq!(ramped_momentum(0, 0.999), 0.0);
        assert_eq!(ramped_momentum(1, 0.999), 0.5);
        assert_eq!(ramped_momentum(1_000_000, 0.999), 0.999);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut model = Model::zeros(shape());
        let mut grads = Model::zeros(shape());
        grads.classifier.bias.fill(1.0);
        let mut sgd = Sgd::new(shape(), 0.1, 0.9);
        sgd.step(&mut model, &grads);
        sgd.step(&mut model, &grads);
        // v1 = 1, v2 = 1.9 -> p = -0.1 * 2.9
        assert!((model.classifier.bias[0] + 0.29).abs() < 1e-12);
    }
}
