//! Synthetic attention traces with designated retrieval heads.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::builder::BenchmarkInstance;
use crate::error::{Error, Result};
use crate::rap::AttentionTrace;
use crate::seed::rng_for;

const JITTER: (f64, f64) = (0.9, 1.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Distribution {
    /// Jittered uniform mass.
    #[default]
    DirichletLike,
    /// Each head's leftover mass lands on a single random passage.
    OneHot,
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dirichlet_like" => Ok(Distribution::DirichletLike),
            "one_hot" => Ok(Distribution::OneHot),
            other => Err(Error::Config(format!("unknown distribution `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub heads: usize,
    pub retrieval_heads: Vec<usize>,
    pub kappa: f64,
    pub noise_seed: u64,
    #[serde(default)]
    pub distribution: Distribution,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("need at least one head".into()));
        }
        if let Some(h) = self.retrieval_heads.iter().find(|&&h| h >= self.heads) {
            return Err(Error::Config(format!("retrieval head {h} out of range for {} heads", self.heads)));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Config(format!("kappa must lie in [0, 1], got {}", self.kappa)));
        }
        Ok(())
    }
}

fn jittered_uniform(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(JITTER.0..=JITTER.1)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn one_hot(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut row = vec![0.0; n];
    row[rng.random_range(0..n)] = 1.0;
    row
}

/// Per-head passage attention for one instance. Retrieval heads put mass
/// `kappa` uniformly on the gold passages and spread `1 - kappa` like a
/// noise head over the whole context; other heads are pure noise.
pub fn simulate_trace(instance: &BenchmarkInstance, config: &SimConfig) -> Result<AttentionTrace> {
    config.validate()?;
    let n = instance.context.len();
    if instance.gold_positions.is_empty() {
        return Err(Error::Integrity(format!("instance `{}` has no gold passage in context", instance.query_id)));
    }
    let mut rng = rng_for(config.noise_seed, &["sim", &instance.query_id]);
    let gold_share = config.kappa / instance.gold_positions.len() as f64;
    let scores = (0..config.heads)
        .map(|h| {
            let noise = match config.distribution {
                Distribution::DirichletLike => jittered_uniform(n, &mut rng),
                Distribution::OneHot => one_hot(n, &mut rng),
            };
            if !config.retrieval_heads.contains(&h) {
                return noise;
            }
            let mut row: Vec<f64> = noise.iter().map(|x| (1.0 - config.kappa) * x).collect();
            for &g in &instance.gold_positions {
                row[g] += gold_share;
            }
            row
        })
        .collect();
    AttentionTrace::new(
        instance.query_id.clone(),
        instance.context.iter().map(|p| p.id.clone()).collect(),
        scores,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Passage, TaskKind, Tokenizer};
    use std::collections::BTreeSet;

    pub(crate) fn instance(n: usize, gold: &[usize]) -> BenchmarkInstance {
        let context: Vec<Passage> = (0..n)
            .map(|i| Passage::new(format!("p{i}"), format!("t{i}"), "text", Tokenizer::Whitespace).unwrap())
            .collect();
        BenchmarkInstance {
            query_id: "q".into(),
            task_kind: TaskKind::Qa,
            q: "question".into(),
            a: "answer".into(),
            gold_ids: gold.iter().map(|&g| format!("p{g}")).collect::<BTreeSet<_>>(),
            gold_positions: gold.to_vec(),
            context,
            retrieved_count: 0,
            p_used: 0.0,
            seed: 0,
            missing_gold: Vec::new(),
        }
    }

    fn config(kappa: f64, distribution: Distribution, seed: u64) -> SimConfig {
        SimConfig {
            heads: 6,
            retrieval_heads: vec![1, 4],
            kappa,
            noise_seed: seed,
            distribution,
        }
    }

    #[test]
    fn rows_are_distributions() {
        for dist in [Distribution::DirichletLike, Distribution::OneHot] {
            for kappa in [0.0, 0.3, 1.0] {
                let t = simulate_trace(&instance(7, &[2, 5]), &config(kappa, dist, 3)).unwrap();
                for row in &t.scores {
                    assert!(row.iter().all(|&x| x >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn full_concentration_one_hot_on_gold() {
        let t = simulate_trace(&instance(5, &[3]), &config(1.0, Distribution::OneHot, 9)).unwrap();
        for h in [1, 4] {
            assert_eq!(t.scores[h], vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let inst = instance(10, &[0]);
        let a = simulate_trace(&inst, &config(0.5, Distribution::DirichletLike, 1)).unwrap();
        let b = simulate_trace(&inst, &config(0.5, Distribution::DirichletLike, 1)).unwrap();
        let c = simulate_trace(&inst, &config(0.5, Distribution::DirichletLike, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs() {
        let inst = instance(4, &[0]);
        let mut c = config(0.5, Distribution::OneHot, 0);
        c.retrieval_heads = vec![6];
        assert!(simulate_trace(&inst, &c).is_err());
        assert!(simulate_trace(&inst, &config(1.5, Distribution::OneHot, 0)).is_err());
        assert!(simulate_trace(&instance(4, &[]), &config(0.5, Distribution::OneHot, 0)).is_err());
    }

    #[test]
    fn top1_is_gold_at_high_concentration() {
        // worst case: gold gets 0.9 + 0.1 * 0.9/(1.1*99 + 0.9), any other
        // passage at most 0.1 * 1.1/(0.9*99 + 1.1)
        let inst = instance(100, &[42]);
        for seed in 0..1000 {
            let t = simulate_trace(&inst, &config(0.9, Distribution::DirichletLike, seed)).unwrap();
            for h in [1, 4] {
                assert_eq!(crate::rap::top_m_positions(&t, h, 1).unwrap(), vec![42]);
            }
        }
    }

    #[test]
    fn zero_concentration_matches_noise_in_mean() {
        let inst = instance(8, &[0]);
        let (mut retrieval, mut noise) = (0.0, 0.0);
        for seed in 0..2000 {
            let t = simulate_trace(&inst, &config(0.0, Distribution::DirichletLike, seed)).unwrap();
            retrieval += t.scores[1][0];
            noise += t.scores[0][0];
        }
        assert!((retrieval - noise).abs() / 2000.0 < 2e-3);
    }
}
