use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{MarkovChain, CHAIN_STATES};
use super::Vocab;
use crate::error::{CoreError, Result};
use crate::rng::{rng_from, SALT_TASK};

/// Synthetic binary classification tasks standing in for a downstream
/// benchmark: counting (parity), aggregation (majority) and pattern
/// matching (trigram presence). `PatternImbalanced` is the same rule with a
/// 25/75 class split, scored by Matthews correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    Parity,
    Majority,
    Pattern,
    PatternImbalanced,
}

impl TaskId {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Parity => "parity",
            TaskId::Majority => "majority",
            TaskId::Pattern => "pattern",
            TaskId::PatternImbalanced => "pattern-imbalanced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parity" => Ok(TaskId::Parity),
            "majority" => Ok(TaskId::Majority),
            "pattern" => Ok(TaskId::Pattern),
            "pattern-imbalanced" => Ok(TaskId::PatternImbalanced),
            other => Err(CoreError::InvalidConfig(format!("unknown task id `{}`", other))),
        }
    }

    /// Target fraction of positive labels, enforced by rejection sampling.
    pub fn positive_fraction(self) -> f64 {
        match self {
            TaskId::PatternImbalanced => 0.25,
            _ => 0.5,
        }
    }

    /// Whether accuracy or MCC is the headline metric for this task.
    pub fn primary_metric_is_mcc(self) -> bool {
        matches!(self, TaskId::PatternImbalanced)
    }

    pub fn balanced() -> [TaskId; 3] {
        [TaskId::Parity, TaskId::Majority, TaskId::Pattern]
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamExample {
    /// [CLS] content... [SEP]
    pub tokens: Vec<u16>,
    pub label: u8,
    pub task: TaskId,
}

/// Rules are derived from the chain alone (not from the example seed), so
/// train/val/test splits generated with different seeds share the same rule.
#[derive(Debug, Clone, Copy)]
pub struct TaskRule {
    pub designated_token: u16,
    pub trigram: [u16; 3],
}

impl TaskRule {
    pub fn from_chain(chain: &MarkovChain) -> Self {
        let pi = chain.stationary();
        let argmax = |w: &[f64]| {
            w.iter().enumerate().fold((0usize, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
        };
        // Most frequent state; the trigram follows the likeliest path from it
        // so that positives occur often enough for rejection sampling.
        let s0 = argmax(&pi);
        let s1 = argmax(chain.row(s0));
        let s2 = argmax(chain.row(s1));
        TaskRule {
            designated_token: MarkovChain::token_for_state(s0),
            trigram: [
                MarkovChain::token_for_state(s0),
                MarkovChain::token_for_state(s1),
                MarkovChain::token_for_state(s2),
            ],
        }
    }

    pub fn label(&self, task: TaskId, content: &[u16]) -> u8 {
        match task {
            TaskId::Parity => {
                let count = content.iter().filter(|&&t| t == self.designated_token).count();
                (count % 2 == 1) as u8
            }
            TaskId::Majority => {
                let half = Vocab::FIRST_CONTENT + (CHAIN_STATES / 2) as u16;
                let first = content.iter().filter(|&&t| t < half).count();
                (first > content.len() - first) as u8
            }
            TaskId::Pattern | TaskId::PatternImbalanced => {
                content.windows(3).any(|w| w == self.trigram) as u8
            }
        }
    }
}

/// Generate `num_examples` labeled sequences from the chain, balanced to the
/// task's target class fractions by rejection (quota) sampling.
pub fn make_downstream_task(
    task: TaskId,
    chain: &MarkovChain,
    min_len: usize,
    max_len: usize,
    num_examples: usize,
    seed: u64,
) -> Result<Vec<DownstreamExample>> {
    if min_len < 3 || max_len < min_len {
        return Err(CoreError::InvalidConfig(format!(
            "task length bounds [{}, {}] invalid",
            min_len, max_len
        )));
    }
    let rule = TaskRule::from_chain(chain);
    let target_pos = ((num_examples as f64) * task.positive_fraction()).round() as usize;
    let target_neg = num_examples - target_pos;

    let mut rng = rng_from(&[seed, SALT_TASK, task as u64]);
    let mut examples = Vec::with_capacity(num_examples);
    let (mut pos, mut neg) = (0usize, 0usize);
    let mut attempts = 0u64;
    let attempt_budget = (num_examples as u64) * 10_000;
    while pos < target_pos || neg < target_neg {
        attempts += 1;
        if attempts > attempt_budget {
            return Err(CoreError::InvalidConfig(format!(
                "task {} could not reach class balance after {} draws",
                task, attempts
            )));
        }
        let len = rng.gen_range(min_len..=max_len);
        let content = chain.sample_sequence(len, &mut rng);
        let label = rule.label(task, &content);
        let quota_open = if label == 1 { pos < target_pos } else { neg < target_neg };
        if !quota_open {
            continue;
        }
        if label == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        let mut tokens = Vec::with_capacity(content.len() + 2);
        tokens.push(Vocab::CLS);
        tokens.extend(content);
        tokens.push(Vocab::SEP);
        examples.push(DownstreamExample { tokens, label, task });
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> MarkovChain {
        MarkovChain::from_seed(17)
    }

    #[test]
    fn parity_counts_designated_token() {
        let rule = TaskRule::from_chain(&chain());
        let d = rule.designated_token;
        let other = if d == Vocab::FIRST_CONTENT { d + 1 } else { Vocab::FIRST_CONTENT };
        let three = vec![d, other, d, other, d];
        assert_eq!(rule.label(TaskId::Parity, &three), 1);
        let two = vec![d, other, d];
        assert_eq!(rule.label(TaskId::Parity, &two), 0);
    }

    #[test]
    fn majority_is_strict() {
        let rule = TaskRule::from_chain(&chain());
        let lo = Vocab::FIRST_CONTENT;
        let hi = Vocab::FIRST_CONTENT + (CHAIN_STATES / 2) as u16;
        assert_eq!(rule.label(TaskId::Majority, &[lo, lo, hi]), 1);
        assert_eq!(rule.label(TaskId::Majority, &[lo, hi, hi]), 0);
        // Tie does not count as "outnumber".
        assert_eq!(rule.label(TaskId::Majority, &[lo, hi]), 0);
    }

    #[test]
    fn pattern_detects_contiguous_trigram() {
        let rule = TaskRule::from_chain(&chain());
        let [a, b, c] = rule.trigram;
        let mut seq = vec![Vocab::FIRST_CONTENT + 7; 4];
        assert_eq!(rule.label(TaskId::Pattern, &seq), 0);
        seq.extend([a, b, c]);
        assert_eq!(rule.label(TaskId::Pattern, &seq), 1);
    }

    #[test]
    fn generated_labels_match_independent_oracle() {
        // Straight-line reimplementation of the three rules.
        let ch = chain();
        let rule = TaskRule::from_chain(&ch);
        for task in [TaskId::Parity, TaskId::Majority, TaskId::Pattern, TaskId::PatternImbalanced] {
            let examples = make_downstream_task(task, &ch, 8, 12, 300, 5).unwrap();
            for ex in &examples {
                let content = &ex.tokens[1..ex.tokens.len() - 1];
                let expect = match task {
                    TaskId::Parity => {
                        let mut n = 0;
                        for &t in content {
                            if t == rule.designated_token {
                                n += 1;
                            }
                        }
                        if n % 2 == 1 { 1 } else { 0 }
                    }
                    TaskId::Majority => {
                        let mut first = 0;
                        let mut rest = 0;
                        for &t in content {
                            if t < Vocab::FIRST_CONTENT + 4 {
                                first += 1;
                            } else {
                                rest += 1;
                            }
                        }
                        if first > rest { 1 } else { 0 }
                    }
                    TaskId::Pattern | TaskId::PatternImbalanced => {
                        let mut found = 0;
                        for i in 0..content.len().saturating_sub(2) {
                            if content[i] == rule.trigram[0]
                                && content[i + 1] == rule.trigram[1]
                                && content[i + 2] == rule.trigram[2]
                            {
                                found = 1;
                            }
                        }
                        found
                    }
                };
                assert_eq!(ex.label, expect, "task {} example mislabeled", task);
            }
        }
    }

    #[test]
    fn class_balance_is_enforced() {
        let ch = chain();
        for task in [TaskId::Parity, TaskId::Majority, TaskId::Pattern] {
            let examples = make_downstream_task(task, &ch, 8, 12, 2000, 9).unwrap();
            assert_eq!(examples.len(), 2000);
            let pos: usize = examples.iter().map(|e| e.label as usize).sum();
            let frac = pos as f64 / 2000.0;
            assert!((0.4..=0.6).contains(&frac), "{}: positive fraction {}", task, frac);
        }
        let imbalanced = make_downstreams_imbalanced();
        let pos: usize = imbalanced.iter().map(|e| e.label as usize).sum();
        assert_eq!(pos, 500);
    }

    fn make_downstreams_imbalanced() -> Vec<DownstreamExample> {
        make_downstream_task(TaskId::PatternImbalanced, &chain(), 8, 12, 2000, 9).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let ch = chain();
        let a = make_downstream_task(TaskId::Majority, &ch, 8, 12, 100, 3).unwrap();
        let b = make_downstream_task(TaskId::Majority, &ch, 8, 12, 100, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_task_id_is_error() {
        assert!(TaskId::parse("sentiment").is_err());
        assert_eq!(TaskId::parse("pattern-imbalanced").unwrap(), TaskId::PatternImbalanced);
    }

    #[test]
    fn every_example_starts_with_cls() {
        let examples = make_downstream_task(TaskId::Pattern, &chain(), 8, 12, 50, 1).unwrap();
        for ex in examples {
            assert_eq!(ex.tokens[0], Vocab::CLS);
            assert_eq!(*ex.tokens.last().unwrap(), Vocab::SEP);
        }
    }
}
