//! Training objectives with closed-form gradients.

use ndarray::{Array2, ArrayView2};

use crate::math::{dot, log_sum_exp};
use crate::model::Model;
use crate::select::PrototypeSelection;
use crate::types::ClassId;

/// Prototype InfoNCE: `-alpha * log softmax_0(f . q / tau)` with the positive
/// prototype at index 0. Returns the value and its gradient w.r.t. `f`.
pub fn contrastive_loss(f: &[f64], sel: &PrototypeSelection, tau: f64) -> (f64, Vec<f64>) {
    let protos: Vec<&[f64]> = sel.prototypes().map(|p| p.mean.as_slice()).collect();
    let scores: Vec<f64> = protos.iter().map(|q| dot(f, q) / tau).collect();
    let lse = log_sum_exp(&scores);
    let value = sel.alpha * (lse - scores[0]);
    let mut grad = vec![0.0; f.len()];
    for (q, s) in protos.iter().zip(&scores) {
        let p = (s - lse).exp();
        for (g, v) in grad.iter_mut().zip(q.iter()) {
            *g += p * v;
        }
    }
    for (g, v) in grad.iter_mut().zip(protos[0]) {
        *g = sel.alpha / tau * (*g - v);
    }
    (value, grad)
}

/// Cross-entropy of one logit row and its gradient `softmax - onehot`.
fn row_ce(logits: &[f64], target: ClassId) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

/// Mean cross-entropy over rows whose label is present. Rows without a label
/// get zero gradient; with no labels at all the value is 0.
pub fn ce_labeled(logits: &ArrayView2<f64>, labels: &[Option<ClassId>]) -> (f64, Array2<f64>) {
    let weights: Vec<Option<(ClassId, f64)>> = labels.iter().map(|l| l.map(|c| (c, 1.0))).collect();
    weighted_ce(logits, &weights)
}

/// `sum_i w_i CE_i / count` over rows with `Some((target, w_i))`.
pub fn weighted_ce(logits: &ArrayView2<f64>, targets: &[Option<(ClassId, f64)>]) -> (f64, Array2<f64>) {
    assert_eq!(logits.nrows(), targets.len(), "one target slot per row");
    let mut grad = Array2::zeros(logits.raw_dim());
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    for (i, target) in targets.iter().enumerate() {
        let Some((class, weight)) = *target else { continue };
        let row = logits.row(i).to_vec();
        let (value, g) = row_ce(&row, class);
        total += weight * value;
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = weight * scale * v;
        }
    }
    (total * scale, grad)
}

/// Fraction of `confidences` strictly above `beta`; 0 for an empty slice.
pub fn confidence_weight(confidences: &[f64], beta: f64) -> f64 {
    if confidences.is_empty() {
        return 0.0;
    }
    confidences.iter().filter(|&&c| c > beta).count() as f64 / confidences.len() as f64
}

#[derive(Clone, Debug)]
pub struct SelfTrainOutput {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Weight applied to each row.
    pub weights: Vec<f64>,
}

/// Self-training cross-entropy against teacher pseudo-labels. Each row is
/// weighted by its scene's confident fraction, or by `alpha_override` when
/// given.
pub fn ce_selftrain(
    logits: &ArrayView2<f64>,
    pseudo_labels: &[ClassId],
    confidences: &[f64],
    scene_ids: &[usize],
    beta: f64,
    alpha_override: Option<&[f64]>,
) -> SelfTrainOutput {
    let weights: Vec<f64> = match alpha_override {
        Some(a) => a.to_vec(),
        None => scene_ids
            .iter()
            .map(|&s| {
                let scene: Vec<f64> = confidences
                    .iter()
                    .zip(scene_ids)
                    .filter(|(_, &id)| id == s)
                    .map(|(c, _)| *c)
                    .collect();
                confidence_weight(&scene, beta)
            })
            .collect(),
    };
    let targets: Vec<Option<(ClassId, f64)>> = pseudo_labels.iter().zip(&weights).map(|(&c, &w)| Some((c, w))).collect();
    let (value, grad) = weighted_ce(logits, &targets);
    SelfTrainOutput { value, grad, weights }
}

/// Everything `total_loss` needs besides the parameters: per-row inputs and
/// targets, decided beforehand and held fixed while differentiating.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub inputs: Array2<f64>,
    /// Supervised cross-entropy target per row.
    pub labeled: Vec<Option<ClassId>>,
    /// Pseudo-label and weight per row.
    pub selftrain: Vec<Option<(ClassId, f64)>>,
    /// Prototype choice per row for the contrastive term.
    pub contrastive: Vec<Option<PrototypeSelection>>,
    pub temperature: f64,
    pub contrastive_weight: f64,
}

impl StepPlan {
    pub fn rows(&self) -> usize {
        self.inputs.nrows()
    }
}

#[derive(Clone, Debug)]
pub struct LossReport {
    pub l_contrastive: f64,
    pub l_ce_labeled: f64,
    pub l_ce_unlabeled: f64,
    pub total: f64,
    pub alphas: Vec<f64>,
    pub weights: Vec<f64>,
    pub grads: Model,
}

/// `ce_labeled + ce_selftrain + weight * mean(contrastive)` and the gradient
/// of that sum w.r.t. every model parameter.
pub fn total_loss(model: &Model, plan: &StepPlan) -> LossReport {
    let n = plan.rows();
    assert!(plan.labeled.len() == n && plan.selftrain.len() == n && plan.contrastive.len() == n);
    let fwd = model.forward(plan.inputs.clone());
    let (l_ce_labeled, g_lab) = ce_labeled(&fwd.logits.view(), &plan.labeled);
    let (l_ce_unlabeled, g_self) = weighted_ce(&fwd.logits.view(), &plan.selftrain);
    let d_logits = g_lab + g_self;

    let mut d_embed = Array2::zeros(fwd.embeddings.raw_dim());
    let count = plan.contrastive.iter().filter(|s| s.is_some()).count();
    let mut l_contrastive = 0.0;
    let mut alphas = Vec::with_capacity(count);
    if count > 0 && plan.contrastive_weight != 0.0 {
        let scale = plan.contrastive_weight / count as f64;
        for (i, sel) in plan.contrastive.iter().enumerate() {
            let Some(sel) = sel else { continue };
            let f = fwd.embeddings.row(i).to_vec();
            let (value, g) = contrastive_loss(&f, sel, plan.temperature);
            l_contrastive += value;
            alphas.push(sel.alpha);
            for (dst, v) in d_embed.row_mut(i).iter_mut().zip(g) {
                *dst = scale * v;
            }
        }
        l_contrastive /= count as f64;
    }
    let grads = model.backward(&fwd, &d_embed, &d_logits);
    LossReport {
        l_contrastive,
        l_ce_labeled,
        l_ce_unlabeled,
        total: l_ce_labeled + l_ce_unlabeled + plan.contrastive_weight * l_contrastive,
        alphas,
        weights: plan.selftrain.iter().flatten().map(|(_, w)| *w).collect(),
        grads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::select::Prototype;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn proto(class: usize, mean: Vec<f64>) -> Prototype {
        Prototype {
            class,
            component: 0,
            mean,
        }
    }

    fn random_selection(rng: &mut impl Rng, dim: usize, classes: usize) -> PrototypeSelection {
        let mut v = |c| proto(c, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        PrototypeSelection {
            positive: v(0),
            negatives: (1..classes).map(&mut v).collect(),
            alpha: 0.7,
        }
    }

    #[test]
    fn orthogonal_embedding_gives_log_c() {
        let sel = PrototypeSelection {
            positive: proto(0, vec![0.0, 1.0, 0.0]),
            negatives: vec![proto(1, vec![0.0, 0.0, 1.0]), proto(2, vec![0.0, -1.0, 0.0])],
            alpha: 0.5,
        };
        let (v, _) = contrastive_loss(&[1.0, 0.0, 0.0], &sel, 0.1);
        assert!((v - 0.5 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_positive_vanishes() {
        let sel = PrototypeSelection {
            positive: proto(0, vec![1.0, 0.0]),
            negatives: vec![proto(1, vec![-1.0, 0.0])],
            alpha: 1.0,
        };
        let (v, _) = contrastive_loss(&[1.0, 0.0], &sel, 0.01);
        assert!(v < 1e-80);
    }

    #[test]
    fn contrastive_gradient_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sel = random_selection(&mut rng, 8, 4);
        let f: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g) = contrastive_loss(&f, &sel, 0.5);
        for d in 0..8 {
            let mut up = f.clone();
            up[d] += 1e-5;
            let mut down = f.clone();
            down[d] -= 1e-5;
            let num = (contrastive_loss(&up, &sel, 0.5).0 - contrastive_loss(&down, &sel, 0.5).0) / 2e-5;
            assert!((num - g[d]).abs() <= 1e-5 * num.abs().max(g[d].abs()).max(1e-3));
        }
    }

    #[test]
    fn uniform_logits_give_log_four() {
        let logits = Array2::zeros((3, 4));
        let (v, _) = ce_labeled(&logits.view(), &[Some(0), Some(3), Some(1)]);
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((v - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let mut logits = Array2::zeros((2, 3));
        logits[(0, 1)] = 50.0;
        logits[(1, 2)] = 50.0;
        let (v, _) = ce_labeled(&logits.view(), &[Some(1), Some(2)]);
        assert!(v < 1e-20);
    }

    #[test]
    fn no_labels_gives_zero() {
        let logits = Array2::from_elem((2, 3), 0.3);
        let (v, g) = ce_labeled(&logits.view(), &[None, None]);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot_over_count() {
        let logits = ndarray::array![[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]];
        let (_, g) = ce_labeled(&logits.view(), &[Some(2), None]);
        let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
        assert!((g[(0, 0)] - 1f64.exp() / z).abs() < 1e-12);
        assert!((g[(0, 2)] - (0.5f64.exp() / z - 1.0)).abs() < 1e-12);
        assert_eq!(g.row(1).sum(), 0.0);
    }

    #[test]
    fn selftrain_weights() {
        let logits = Array2::zeros((4, 2));
        let view = logits.view();
        let all = ce_selftrain(&view, &[0, 1, 0, 1], &[0.99; 4], &[0; 4], 0.968, None);
        assert_eq!(all.weights, vec![1.0; 4]);
        let half = ce_selftrain(&view, &[0, 1, 0, 1], &[0.99, 0.5, 0.99, 0.2], &[0; 4], 0.968, None);
        assert_eq!(half.weights, vec![0.5; 4]);
        let per_scene = ce_selftrain(&view, &[0, 1, 0, 1], &[0.99, 0.99, 0.5, 0.2], &[0, 0, 1, 1], 0.968, None);
        assert_eq!(per_scene.weights, vec![1.0, 1.0, 0.0, 0.0]);
        let zero = ce_selftrain(&view, &[0, 1, 0, 1], &[0.99; 4], &[0; 4], 0.968, Some(&[0.0; 4]));
        assert_eq!(zero.value, 0.0);
        assert!(zero.grad.iter().all(|&g| g == 0.0));
        let top = ce_selftrain(&view, &[0, 1, 0, 1], &[1.0; 4], &[0; 4], 1.0, None);
        assert_eq!(top.value, 0.0);
    }

    #[test]
    fn total_loss_gradient_end_to_end() {
        use crate::gradcheck::check;
        use crate::model::ModelShape;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = ModelShape {
            raw_dim: 4,
            hidden: 6,
            embed: 3,
            classes: 3,
        };
        let mut model = Model::new(shape, &mut rng);
        let n = 9;
        let plan = StepPlan {
            inputs: Array2::from_shape_simple_fn((n, 4), || rng.random_range(-1.0..1.0)),
            labeled: (0..n).map(|i| (i % 3 == 0).then_some(i % 3)).collect(),
            selftrain: (0..n).map(|i| (i % 3 == 1).then_some((i % 2, 0.6))).collect(),
            contrastive: (0..n).map(|i| (i % 2 == 0).then(|| random_selection(&mut rng, 3, 3))).collect(),
            temperature: 0.3,
            contrastive_weight: 1.0,
        };
        let report = total_loss(&model, &plan);
        let x = model.to_flat();
        let err = check(
            |p| {
                model.set_flat(p);
                total_loss(&model, &plan).total
            },
            &x,
            &report.grads.to_flat(),
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn zero_contrastive_weight_is_plain_self_training() {
        use crate::model::ModelShape;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shape = ModelShape {
            raw_dim: 4,
            hidden: 5,
            embed: 3,
            classes: 2,
        };
        let model = Model::new(shape, &mut rng);
        let mut plan = StepPlan {
            inputs: Array2::from_shape_simple_fn((4, 4), || rng.random_range(-1.0..1.0)),
            labeled: vec![Some(0), None, None, Some(1)],
            selftrain: vec![None, Some((1, 1.0)), Some((0, 0.5)), None],
            contrastive: (0..4).map(|_| Some(random_selection(&mut rng, 3, 2))).collect(),
            temperature: 0.1,
            contrastive_weight: 0.0,
        };
        let with = total_loss(&model, &plan);
        plan.contrastive = vec![None; 4];
        let without = total_loss(&model, &plan);
        assert_eq!(with.total, without.total);
        assert_eq!(with.grads, without.grads);
        assert_eq!(with.total, with.l_ce_labeled + with.l_ce_unlabeled);
        plan.selftrain = vec![None; 4];
        assert_eq!(total_loss(&model, &plan).l_ce_unlabeled, 0.0);
    }

    proptest! {
        #[test]
        fn contrastive_shift_invariant(seed in any::<u64>(), shift in -3.0f64..3.0) {
            // adding shift * f / |f|^2 to every prototype adds `shift` to every logit
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sel = random_selection(&mut rng, 5, 3);
            let f: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ff = dot(&f, &f);
            prop_assume!(ff > 1e-3);
            let mut moved = sel.clone();
            let offset: Vec<f64> = f.iter().map(|v| shift * 0.1 * v / ff).collect();
            for p in std::iter::once(&mut moved.positive).chain(moved.negatives.iter_mut()) {
                for (m, o) in p.mean.iter_mut().zip(&offset) {
                    *m += o;
                }
            }
            let a = contrastive_loss(&f, &sel, 0.1).0;
            let b = contrastive_loss(&f, &moved, 0.1).0;
            prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn alpha_scales_value_and_gradient(seed in any::<u64>(), s in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sel = random_selection(&mut rng, 6, 4);
            sel.alpha = 1.0;
            let f: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (v1, g1) = contrastive_loss(&f, &sel, 0.2);
            sel.alpha = s;
            let (vs, gs) = contrastive_loss(&f, &sel, 0.2);
            prop_assert!((vs - s * v1).abs() <= 1e-12 * v1.abs().max(1.0));
            for (a, b) in gs.iter().zip(&g1) {
                prop_assert!((a - s * b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
