//! Ablation arms: named config overrides run over several seeds.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::synth::generate;
use crate::trainer::train;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    /// `key=value` assignments applied on top of the base config.
    pub overrides: Vec<String>,
}

impl Arm {
    pub fn new(name: &str, overrides: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }
}

/// Labeled source only, then self-training added, then the contrastive term.
pub fn component_arms() -> Vec<Arm> {
    vec![
        Arm::new("Lb", &["contrastive_weight=0", "self_training=false"]),
        Arm::new("Lb+UL", &["contrastive_weight=0", "self_training=true"]),
        Arm::new("Lb+UL+GMM-Cl", &["self_training=true"]),
    ]
}

/// Scene-confidence against proximity weighting of weak-target self-training.
pub fn weighting_arms() -> Vec<Arm> {
    vec![
        Arm::new("w", &["target_weighting=confidence"]),
        Arm::new("alpha", &["target_weighting=alpha"]),
    ]
}

pub fn component_count_arms(values: &[usize]) -> Vec<Arm> {
    values
        .iter()
        .map(|m| Arm {
            name: format!("M={m}"),
            overrides: vec![format!("components={m}")],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub runs: Vec<SeedResult>,
    pub median_miou: f64,
}

/// Upper median for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Trains every arm on every seed. One seed drives both the scenario and
/// the run, so arms sharing a seed see the same dataset.
pub fn run_arms(base: &ExperimentConfig, arms: &[Arm], seeds: &[u64]) -> Result<Vec<ArmResult>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let configs: Vec<ExperimentConfig> = arms.iter().map(|a| a.apply(base)).collect::<Result<_>>()?;
    let mut runs = vec![Vec::with_capacity(seeds.len()); arms.len()];
    for &seed in seeds {
        let mut scenario = base.scenario.clone();
        scenario.seed = seed;
        let data = generate(&scenario)?;
        for (cfg, out) in configs.iter().zip(runs.iter_mut()) {
            if cfg.scenario != base.scenario {
                return Err(Error::InvalidConfig("ablation arms may not change the scenario".into()));
            }
            let mut run = cfg.run.clone();
            run.seed = seed;
            let outcome = train(run, cfg.train.clone(), &data)?;
            out.push(SeedResult {
                seed,
                miou: outcome.eval.miou,
            });
        }
    }
    Ok(arms
        .iter()
        .zip(runs)
        .map(|(arm, runs)| {
            let scores: Vec<f64> = runs.iter().map(|r| r.miou).collect();
            ArmResult {
                arm: arm.clone(),
                median_miou: median(&scores),
                runs,
            }
        })
        .collect())
}

/// Plain-text comparison table, mIoU in percent.
pub fn format_table(results: &[ArmResult]) -> String {
    let width = results.iter().map(|r| r.arm.name.len()).max().unwrap_or(3).max(3);
    let mut out = format!("{:<width$}  median  per-seed\n", "arm");
    for r in results {
        let seeds: Vec<String> = r.runs.iter().map(|s| format!("{}:{:.2}", s.seed, 100.0 * s.miou)).collect();
        out.push_str(&format!("{:<width$}  {:>6.2}  {}\n", r.arm.name, 100.0 * r.median_miou, seeds.join(" ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 3.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn component_arms_toggle_the_two_terms() {
        let base = ExperimentConfig::default();
        let cfgs: Vec<ExperimentConfig> = component_arms().iter().map(|a| a.apply(&base).unwrap()).collect();
        assert_eq!(
            cfgs.iter().map(|c| (c.train.self_training, c.train.contrastive_weight > 0.0)).collect::<Vec<_>>(),
            vec![(false, false), (true, false), (true, true)]
        );
    }

    #[test]
    fn component_count_arms_set_m() {
        let arms = component_count_arms(&[1, 3, 5, 7]);
        let ms: Vec<usize> = arms
            .iter()
            .map(|a| a.apply(&ExperimentConfig::default()).unwrap().run.components)
            .collect();
        assert_eq!(ms, vec![1, 3, 5, 7]);
        assert_eq!(arms[2].name, "M=5");
    }

    #[test]
    fn arms_may_not_touch_the_scenario() {
        let mut base = ExperimentConfig::default();
        base.set("iterations=0").unwrap();
        base.set("source_scenes=2").unwrap();
        base.set("target_scenes=2").unwrap();
        base.set("heldout_scenes=1").unwrap();
        let bad = Arm::new("bad", &["noise_rate=0.1"]);
        assert!(run_arms(&base, &[bad], &[1]).is_err());
    }

    #[test]
    fn table_lists_every_arm() {
        let results = vec![ArmResult {
            arm: Arm::new("Lb", &[]),
            runs: vec![SeedResult { seed: 1, miou: 0.5 }],
            median_miou: 0.5,
        }];
        let table = format_table(&results);
        assert!(table.contains("Lb") && table.contains("50.00") && table.contains("1:50.00"));
    }
}
