//! Positive / hardest-negative prototype choice for a pixel embedding.
//!
//! Prototypes are component means of the source mixtures. Within a class the
//! "nearest" component is the one with the highest posterior `p(m | f, c)`;
//! ties go to the lowest index.

use crate::error::{Error, Result};
use crate::gmm::GmmBank;
use crate::math::{argmax, squared_distance};
use crate::types::ClassId;

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub class: ClassId,
    pub component: usize,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSelection {
    pub positive: Prototype,
    /// One entry per class other than `positive.class`, in class order.
    pub negatives: Vec<Prototype>,
    /// Confidence weight in `(0, 1]`.
    pub alpha: f64,
}

impl PrototypeSelection {
    /// Positive first, then the negatives.
    pub fn prototypes(&self) -> impl Iterator<Item = &Prototype> {
        std::iter::once(&self.positive).chain(self.negatives.iter())
    }
}

fn nearest_in_class(bank: &GmmBank, f: &[f64], class: ClassId) -> Result<Prototype> {
    let gmm = bank.require(class)?;
    let component = gmm.nearest_component(f);
    Ok(Prototype {
        class,
        component,
        mean: gmm.mean(component).to_vec(),
    })
}

fn check(bank: &GmmBank, f: &[f64], class: Option<ClassId>) -> Result<()> {
    if f.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            got: f.len(),
        });
    }
    if let Some(c) = class {
        if c >= bank.num_classes() {
            return Err(Error::InvalidConfig(format!("class {c} out of range")));
        }
    }
    Ok(())
}

/// Nearest component of `class` as positive, nearest component of every
/// other class as negative, `alpha = 1`.
pub fn select_with_class(bank: &GmmBank, f: &[f64], class: ClassId) -> Result<PrototypeSelection> {
    check(bank, f, Some(class))?;
    let positive = nearest_in_class(bank, f, class)?;
    let negatives = (0..bank.num_classes())
        .filter(|&c| c != class)
        .map(|c| nearest_in_class(bank, f, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrototypeSelection {
        positive,
        negatives,
        alpha: 1.0,
    })
}

/// Labeled source pixel: the annotation fixes the positive class.
pub fn select_labeled_source(bank: &GmmBank, f: &[f64], label: ClassId) -> Result<PrototypeSelection> {
    select_with_class(bank, f, label)
}

/// Unlabeled source pixel: the positive is the `(class, component)` pair
/// with the highest joint posterior under uniform class priors, and `alpha`
/// decays with the distance to it.
pub fn select_unlabeled_source(bank: &GmmBank, f: &[f64]) -> Result<PrototypeSelection> {
    check(bank, f, None)?;
    let mut best: Option<(f64, ClassId, usize)> = None;
    for c in 0..bank.num_classes() {
        let logs = bank.require(c)?.weighted_log_densities(f);
        let m = argmax(&logs);
        if best.map_or(true, |(score, _, _)| logs[m] > score) {
            best = Some((logs[m], c, m));
        }
    }
    let (_, class, component) = best.expect("at least one class");
    let gmm = bank.require(class)?;
    let alpha = gaussian_alpha(f, gmm.mean(component), gmm.scalar_variance(component));
    let mut sel = select_with_class(bank, f, class)?;
    debug_assert_eq!(sel.positive.component, component);
    sel.alpha = alpha;
    Ok(sel)
}

/// Noisy source pixel: the annotation is not trusted for the prototype
/// choice, so this is the unlabeled rule. The label is only range-checked.
pub fn select_noisy_source(bank: &GmmBank, f: &[f64], noisy_label: ClassId) -> Result<PrototypeSelection> {
    check(bank, f, Some(noisy_label))?;
    select_unlabeled_source(bank, f)
}

/// `exp(-d^2 / (2 sigma))` with `d` the Euclidean distance to `center`.
pub fn gaussian_alpha(f: &[f64], center: &[f64], sigma: f64) -> f64 {
    let alpha = (-squared_distance(f, center) / (2.0 * sigma)).exp();
    // keep strictly positive so the weight never vanishes entirely
    alpha.max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::ClassGmm;
    use crate::types::{FeatureVector, RunConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureVector::normalize(&raw).unwrap().into_inner()
    }

    pub(crate) fn random_bank(rng: &mut impl Rng, classes: usize, m: usize, dim: usize) -> GmmBank {
        let cfg = RunConfig {
            num_classes: classes,
            embed_dim: dim,
            components: m,
            ..RunConfig::default()
        };
        let mut bank = GmmBank::new(&cfg);
        for c in 0..classes {
            let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            let means = (0..m).map(|_| unit(rng, dim)).collect();
            let vars = (0..m)
                .map(|_| (0..dim).map(|_| rng.random_range(0.02..0.3)).collect())
                .collect();
            bank.set_gmm(ClassGmm::new(c, w, means, vars, 1e-4).unwrap()).unwrap();
        }
        bank
    }

    fn pdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
        x.iter()
            .zip(mean)
            .zip(var)
            .map(|((x, m), v)| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
            .product()
    }

    /// Figure-style layout in the plane: two classes, two components each.
    fn two_class_bank() -> GmmBank {
        let cfg = RunConfig {
            num_classes: 2,
            embed_dim: 2,
            components: 2,
            ..RunConfig::default()
        };
        let mut bank = GmmBank::new(&cfg);
        let var = vec![vec![0.05, 0.05]; 2];
        // class 0: components at (1, 0) and (0.6, 0.8)
        bank.set_gmm(ClassGmm::new(0, vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![0.6, 0.8]], var.clone(), 1e-4).unwrap())
            .unwrap();
        // class 1: components at (-0.6, 0.8) and (0.0, -1.0)
        bank.set_gmm(ClassGmm::new(1, vec![0.5, 0.5], vec![vec![-0.6, 0.8], vec![0.0, -1.0]], var, 1e-4).unwrap())
            .unwrap();
        bank
    }

    #[test]
    fn labeled_picks_own_nearest_and_foreign_nearest() {
        let bank = two_class_bank();
        // near class-0 component 0 and closer to class-1 component 1 than 0
        let f = [0.8, -0.6];
        let sel = select_labeled_source(&bank, &f, 0).unwrap();
        assert_eq!((sel.positive.class, sel.positive.component), (0, 0));
        assert_eq!(sel.negatives.len(), 1);
        assert_eq!((sel.negatives[0].class, sel.negatives[0].component), (1, 1));
        assert_eq!(sel.alpha, 1.0);
    }

    #[test]
    fn unlabeled_follows_density_not_label() {
        let bank = two_class_bank();
        // sits between the upper components, nearer class-0 component 1
        let f = [0.3, 0.95];
        let sel = select_unlabeled_source(&bank, &f).unwrap();
        assert_eq!((sel.positive.class, sel.positive.component), (0, 1));
        assert_eq!((sel.negatives[0].class, sel.negatives[0].component), (1, 0));
        // mislabeled point lying on class 1's mode
        let g = [-0.6, 0.8];
        let noisy = select_noisy_source(&bank, &g, 0).unwrap();
        assert_eq!(noisy.positive.class, 1);
        assert_eq!(noisy.alpha, 1.0);
        assert_eq!(noisy, select_unlabeled_source(&bank, &g).unwrap());
    }

    #[test]
    fn single_component_uses_class_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = random_bank(&mut rng, 4, 1, 6);
        let f = unit(&mut rng, 6);
        let sel = select_labeled_source(&bank, &f, 2).unwrap();
        assert_eq!(sel.positive.mean, bank.gmm(2).unwrap().mean(0));
        let classes: Vec<_> = sel.negatives.iter().map(|p| p.class).collect();
        assert_eq!(classes, vec![0, 1, 3]);
        for n in &sel.negatives {
            assert_eq!(n.mean, bank.gmm(n.class).unwrap().mean(0));
        }
    }

    #[test]
    fn alpha_analytic_values() {
        let center = [0.0, 1.0, 0.0];
        assert_eq!(gaussian_alpha(&center, &center, 0.2), 1.0);
        // d^2 = 2 sigma
        let f = [0.0, 1.0, 0.4f64.sqrt()];
        let alpha = gaussian_alpha(&f, &center, 0.2);
        assert!((alpha - (-1.0f64).exp()).abs() < 1e-12);
        assert!((alpha - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn selections_match_exhaustive_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let bank = random_bank(&mut rng, 3, 4, 5);
            let f = unit(&mut rng, 5);
            let y = rng.random_range(0..3);
            // brute force with explicit densities
            let score = |c: usize, m: usize| {
                let g = bank.gmm(c).unwrap();
                g.weights()[m] * pdf(&f, g.mean(m), &g.variances()[m])
            };
            let best_in = |c: usize| {
                let mut best = 0;
                for m in 1..4 {
                    if score(c, m) > score(c, best) {
                        best = m;
                    }
                }
                best
            };
            let sel = select_labeled_source(&bank, &f, y).unwrap();
            assert_eq!(sel.positive.component, best_in(y));
            for n in &sel.negatives {
                assert_eq!(n.component, best_in(n.class));
            }
            let mut joint_best = (0, 0);
            for c in 0..3 {
                for m in 0..4 {
                    if score(c, m) > score(joint_best.0, joint_best.1) {
                        joint_best = (c, m);
                    }
                }
            }
            let sel = select_unlabeled_source(&bank, &f).unwrap();
            assert_eq!((sel.positive.class, sel.positive.component), joint_best);
        }
    }

    proptest! {
        #[test]
        fn alpha_never_increases_moving_away(seed in any::<u64>(), t1 in 0.0f64..2.0, dt in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let center = unit(&mut rng, 6);
            let dir = unit(&mut rng, 6);
            let at = |t: f64| -> Vec<f64> { center.iter().zip(&dir).map(|(c, d)| c + t * d).collect() };
            let a1 = gaussian_alpha(&at(t1), &center, 0.1);
            let a2 = gaussian_alpha(&at(t1 + dt), &center, 0.1);
            prop_assert!(a2 <= a1);
            prop_assert!(a1 > 0.0 && a1 <= 1.0);
        }

        #[test]
        fn labeled_positive_class_is_the_label(seed in any::<u64>(), y in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = random_bank(&mut rng, 4, 3, 5);
            let f = unit(&mut rng, 5);
            let sel = select_labeled_source(&bank, &f, y).unwrap();
            prop_assert_eq!(sel.positive.class, y);
            prop_assert_eq!(sel.negatives.len(), 3);
            prop_assert!(sel.negatives.iter().all(|n| n.class != y));
        }
    }
}
