//! Synthetic Game-of-24 backends with a tunable competence knob. They read
//! the live number state out of the prompt and consult the exhaustive
//! solver.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backend::{BackendError, PolicyBackend};
use crate::env::game24::{apply_step, format_numbers, is_solvable, legal_steps, numbers_from_prompt, Num};

#[derive(Default)]
struct SolvableCache(Mutex<HashMap<Vec<Num>, bool>>);

impl SolvableCache {
    fn get(&self, nums: &[Num]) -> bool {
        let mut key = nums.to_vec();
        key.sort();
        if let Some(&v) = self.0.lock().expect("cache lock").get(&key) {
            return v;
        }
        let v = is_solvable(&key);
        self.0.lock().expect("cache lock").insert(key, v);
        v
    }
}

fn state_from(prompt: &str) -> Result<Vec<Num>, BackendError> {
    numbers_from_prompt(prompt).ok_or_else(|| BackendError::Prompt("no Game of 24 number state found".into()))
}

/// Proposes `combine[a op b]` steps. With probability `p_correct` a step is
/// drawn from those that keep the puzzle solvable; otherwise from all legal
/// steps.
pub struct Oracle24Backend {
    p_correct: f64,
    cache: SolvableCache,
}

impl Oracle24Backend {
    pub fn new(p_correct: f64) -> Self {
        Self {
            p_correct: p_correct.clamp(0.0, 1.0),
            cache: SolvableCache::default(),
        }
    }
}

impl PolicyBackend for Oracle24Backend {
    fn propose(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>, BackendError> {
        let nums = state_from(prompt)?;
        if nums.len() < 2 {
            return Err(BackendError::Prompt(format!(
                "nothing left to combine: {}",
                format_numbers(&nums)
            )));
        }
        let legal = legal_steps(&nums);
        let correct: Vec<_> = legal
            .iter()
            .filter(|s| apply_step(&nums, s).is_some_and(|rest| self.cache.get(&rest)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = (0..n)
            .map(|_| {
                let use_oracle = rng.gen::<f64>() < self.p_correct;
                let step = if use_oracle && !correct.is_empty() {
                    correct[rng.gen_range(0..correct.len())]
                } else {
                    &legal[rng.gen_range(0..legal.len())]
                };
                step.to_action().raw
            })
            .collect();
        Ok(out)
    }
}

/// Value-role companion: answers with "Thus the correctness score is s".
/// With probability `accuracy` the score reflects whether the current state
/// can still reach 24 (solvable: 10, dead: 1); otherwise it is uniform in
/// 1..=10.
pub struct Oracle24Valuer {
    accuracy: f64,
    cache: SolvableCache,
}

impl Oracle24Valuer {
    pub fn new(accuracy: f64) -> Self {
        Self {
            accuracy: accuracy.clamp(0.0, 1.0),
            cache: SolvableCache::default(),
        }
    }
}

impl PolicyBackend for Oracle24Valuer {
    fn propose(&self, prompt: &str, n: usize, seed: u64) -> Result<Vec<String>, BackendError> {
        let nums = state_from(prompt)?;
        let alive = self.cache.get(&nums);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let score = if rng.gen::<f64>() < self.accuracy {
                    if alive {
                        10
                    } else {
                        1
                    }
                } else {
                    rng.gen_range(1..=10)
                };
                format!("The remaining numbers are {}.\nThus the correctness score is {score}", format_numbers(&nums))
            })
            .collect())
    }
}
