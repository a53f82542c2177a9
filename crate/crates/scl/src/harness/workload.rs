//! Key-value operation streams with a skewed access pattern.
//!
//! Keys are drawn by rank from a Zipf distribution (exponent 0 falls back
//! to uniform) and ranks are scattered across the keyspace with a fixed
//! permutation, so the hottest keys are not lexicographic neighbors — a
//! sorted storage layout has to earn its locality.

use rand::distributions::{Alphanumeric, Distribution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::Zipf;

/// One generated client operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Put { key: Vec<u8>, value: Vec<u8> },
    Get { key: Vec<u8> },
}

/// Shape of the operation stream.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadCfg {
    /// Distinct keys in play.
    pub key_count: u64,
    /// Bytes per written value.
    pub value_len: usize,
    /// Fraction of operations that read instead of write.
    pub read_fraction: f64,
    /// Zipf skew; 0 keys are drawn uniformly.
    pub zipf_exponent: f64,
}

impl Default for WorkloadCfg {
    fn default() -> Self {
        WorkloadCfg {
            key_count: 200,
            value_len: 32,
            read_fraction: 0.0,
            zipf_exponent: 0.99,
        }
    }
}

impl WorkloadCfg {
    /// Half reads, half writes over a skewed keyspace.
    pub fn update_heavy() -> Self {
        WorkloadCfg {
            read_fraction: 0.5,
            ..Default::default()
        }
    }

    /// Mostly reads with occasional writes.
    pub fn read_heavy() -> Self {
        WorkloadCfg {
            read_fraction: 0.95,
            ..Default::default()
        }
    }

    /// Writes only; the throughput-trend staple.
    pub fn put_only() -> Self {
        WorkloadCfg {
            read_fraction: 0.0,
            ..Default::default()
        }
    }
}

/// Deterministic operation stream for one client.
pub struct WorkloadGen {
    cfg: WorkloadCfg,
    zipf: Option<Zipf<f64>>,
    rng: ChaCha20Rng,
    /// Rank-to-index permutation so hot ranks land on arbitrary points of
    /// the keyspace instead of clustering lexicographically. Seeded by the
    /// key count alone, so every client agrees on which keys are hot.
    scatter: Vec<u64>,
    issued: u64,
}

impl WorkloadGen {
    pub fn new(cfg: WorkloadCfg, seed: u64) -> WorkloadGen {
        let zipf = if cfg.zipf_exponent > 0.0 {
            Some(Zipf::new(cfg.key_count.max(1), cfg.zipf_exponent).expect("valid Zipf parameters"))
        } else {
            None
        };
        let mut scatter: Vec<u64> = (0..cfg.key_count.max(1)).collect();
        scatter.shuffle(&mut ChaCha20Rng::seed_from_u64(0x5EED ^ cfg.key_count));
        WorkloadGen {
            cfg,
            zipf,
            rng: ChaCha20Rng::seed_from_u64(seed),
            scatter,
            issued: 0,
        }
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    fn key_for_rank(&self, rank: u64) -> Vec<u8> {
        let index = self.scatter[(rank as usize - 1) % self.scatter.len()];
        format!("user{index:08}").into_bytes()
    }

    fn draw_key(&mut self) -> Vec<u8> {
        let rank = match &self.zipf {
            Some(z) => z.sample(&mut self.rng) as u64,
            None => self.rng.gen_range(1..=self.cfg.key_count.max(1)),
        };
        self.key_for_rank(rank)
    }

    fn draw_value(&mut self) -> Vec<u8> {
        (&mut self.rng)
            .sample_iter(&Alphanumeric)
            .take(self.cfg.value_len)
            .collect()
    }

    pub fn next_op(&mut self) -> Op {
        self.issued += 1;
        if self.cfg.read_fraction > 0.0 && self.rng.gen::<f64>() < self.cfg.read_fraction {
            Op::Get {
                key: self.draw_key(),
            }
        } else {
            Op::Put {
                key: self.draw_key(),
                value: self.draw_value(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn same_seed_same_stream() {
        let mut a = WorkloadGen::new(WorkloadCfg::update_heavy(), 7);
        let mut b = WorkloadGen::new(WorkloadCfg::update_heavy(), 7);
        for _ in 0..500 {
            assert_eq!(a.next_op(), b.next_op());
        }
    }

    #[test]
    fn read_fraction_is_respected() {
        let mut g = WorkloadGen::new(WorkloadCfg::read_heavy(), 3);
        let reads = (0..4000)
            .filter(|_| matches!(g.next_op(), Op::Get { .. }))
            .count();
        let frac = reads as f64 / 4000.0;
        assert!((0.9..=1.0).contains(&frac), "read fraction {frac} out of band");
        let mut p = WorkloadGen::new(WorkloadCfg::put_only(), 3);
        assert!((0..500).all(|_| matches!(p.next_op(), Op::Put { .. })));
    }

    #[test]
    fn zipf_skews_and_uniform_does_not() {
        let count_hits = |zipf_exponent: f64| -> usize {
            let mut g = WorkloadGen::new(
                WorkloadCfg {
                    key_count: 100,
                    zipf_exponent,
                    ..Default::default()
                },
                11,
            );
            let mut freq: HashMap<Vec<u8>, usize> = HashMap::new();
            for _ in 0..5000 {
                if let Op::Put { key, .. } = g.next_op() {
                    *freq.entry(key).or_default() += 1;
                }
            }
            *freq.values().max().unwrap()
        };
        let skewed_max = count_hits(1.1);
        let uniform_max = count_hits(0.0);
        // Under heavy skew the hottest key dominates; uniform stays near
        // the mean (50 per key here).
        assert!(
            skewed_max > uniform_max * 3,
            "skewed max {skewed_max} vs uniform max {uniform_max}"
        );
    }

    #[test]
    fn keys_stay_in_the_declared_space() {
        let mut g = WorkloadGen::new(
            WorkloadCfg {
                key_count: 10,
                ..Default::default()
            },
            5,
        );
        for _ in 0..200 {
            let key = match g.next_op() {
                Op::Put { key, .. } | Op::Get { key } => key,
            };
            let text = String::from_utf8(key).unwrap();
            let index: u64 = text.strip_prefix("user").unwrap().parse().unwrap();
            assert!(index < 10);
        }
    }
}
