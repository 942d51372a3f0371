//! Round-to-stage scheduling for the three training modes.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::model::{boundary_layers, BlockPartition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One block per round, cycling 1, 2, …, T, 1, 2, …
    Blockfed,
    /// Train each block until held-out accuracy stalls, then freeze it for good.
    NaivePt,
    /// Plain FedAvg over the full model.
    E2e,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NaiveRule {
    /// Window length `w` in rounds.
    pub patience: usize,
    /// Minimum accuracy gain `δ` over the window to keep training.
    pub min_improvement: f64,
}

impl Default for NaiveRule {
    fn default() -> Self {
        Self {
            patience: 5,
            min_improvement: 0.002,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputModulePolicy {
    #[default]
    CarryOver,
    ReinitPerStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub rounds: usize,
    pub blocks: usize,
    pub mode: Mode,
    #[serde(default)]
    pub naive_rule: NaiveRule,
    /// Tail layers of the previous block trained alongside the current one.
    pub boundary_width: usize,
    #[serde(default)]
    pub output_module_policy: OutputModulePolicy,
}

impl TrainingPlan {
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut issues = Vec::new();
        if self.rounds == 0 {
            issues.push(("rounds".into(), "must be ≥ 1".into()));
        }
        if self.blocks == 0 {
            issues.push(("blocks".into(), "must be ≥ 1".into()));
        }
        if self.mode == Mode::NaivePt {
            if self.naive_rule.patience == 0 {
                issues.push(("naive_rule.patience".into(), "must be ≥ 1".into()));
            }
            let d = self.naive_rule.min_improvement;
            if !(d.is_finite() && d >= 0.0) {
                issues.push((
                    "naive_rule.min_improvement".into(),
                    format!("must be a finite value ≥ 0, got {d}"),
                ));
            }
        }
        issues
    }

    /// Block count the plan actually trains with; e2e uses the whole model as one block.
    pub fn effective_blocks(&self) -> usize {
        match self.mode {
            Mode::E2e => 1,
            _ => self.blocks,
        }
    }
}

/// `((r − 1) mod T) + 1` for 1-indexed round `r`.
pub fn stage_for_round(blocks: usize, r: usize) -> usize {
    debug_assert!(r >= 1 && blocks >= 1);
    (r - 1) % blocks + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Advance {
    Stay,
    Advance,
}

/// Stage transition for naive progressive training.
///
/// `history` holds held-out accuracies recorded while training `stage`. Once at
/// least `w` entries exist, the gain is the best of the last `w` entries over
/// the one just before them (or the first entry when only `w` exist); a gain
/// below `δ` advances.
pub fn naive_pt_advance(history: &[f64], rule: &NaiveRule, stage: usize, blocks: usize) -> Advance {
    let w = rule.patience.max(1);
    if stage >= blocks || history.len() < w {
        return Advance::Stay;
    }
    let window = &history[history.len() - history.len().min(w + 1)..];
    let base = window[0];
    let best = window[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gain = if window.len() > 1 { best - base } else { 0.0 };
    if gain < rule.min_improvement {
        Advance::Advance
    } else {
        Advance::Stay
    }
}

/// Groups uploaded after training stage `t`: boundary layers, the block, and
/// the stage's output module with its projection head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSet {
    pub boundary: Vec<usize>,
    pub block: Range<usize>,
    pub output_module: bool,
}

impl TrainableSet {
    /// Global layer indices trained this stage.
    pub fn global_layers(&self) -> Vec<usize> {
        self.boundary.iter().copied().chain(self.block.clone()).collect()
    }
}

pub fn trainable_set(partition: &BlockPartition, t: usize, k: usize) -> TrainableSet {
    TrainableSet {
        boundary: boundary_layers(partition, t, k),
        block: partition.block(t),
        output_module: true,
    }
}

/// Tracks which stage the next round trains.
#[derive(Debug, Clone)]
pub struct Scheduler {
    plan: TrainingPlan,
    naive_stage: usize,
    history: Vec<f64>,
    trained_final: bool,
}

impl Scheduler {
    pub fn new(plan: TrainingPlan) -> Self {
        Self {
            plan,
            naive_stage: 1,
            history: Vec::new(),
            trained_final: false,
        }
    }

    pub fn stage_for(&self, r: usize) -> usize {
        match self.plan.mode {
            Mode::Blockfed => stage_for_round(self.plan.blocks, r),
            Mode::NaivePt => self.naive_stage,
            Mode::E2e => 1,
        }
    }

    /// Records the outcome of a round that trained `stage`.
    pub fn observe(&mut self, stage: usize, accuracy: f64) {
        let blocks = self.plan.effective_blocks();
        if stage == blocks {
            self.trained_final = true;
        }
        if self.plan.mode == Mode::NaivePt {
            self.history.push(accuracy);
            if naive_pt_advance(&self.history, &self.plan.naive_rule, self.naive_stage, blocks) == Advance::Advance {
                self.naive_stage += 1;
                self.history.clear();
            }
        }
    }

    /// Whether the last block has been trained at least once, so the full
    /// model is the one to evaluate.
    pub fn full_model_ready(&self) -> bool {
        self.trained_final
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{partition, GlobalModelSpec};
    use proptest::prelude::*;

    fn plan(mode: Mode) -> TrainingPlan {
        TrainingPlan {
            rounds: 12,
            blocks: 4,
            mode,
            naive_rule: NaiveRule::default(),
            boundary_width: 1,
            output_module_policy: OutputModulePolicy::CarryOver,
        }
    }

    #[test]
    fn cyclic_stage_sequence() {
        let seq: Vec<usize> = (1..=5).map(|r| stage_for_round(4, r)).collect();
        assert_eq!(seq, vec![1, 2, 3, 4, 1]);
        assert!((1..20).all(|r| stage_for_round(1, r) == 1));
        assert_eq!(stage_for_round(3, 7), 1);
    }

    #[test]
    fn naive_rule_examples() {
        let rule = NaiveRule {
            patience: 3,
            min_improvement: 0.005,
        };
        assert_eq!(
            naive_pt_advance(&[0.60, 0.602, 0.603, 0.604], &rule, 1, 4),
            Advance::Advance
        );
        assert_eq!(naive_pt_advance(&[0.5, 0.5, 0.5], &rule, 1, 4), Advance::Advance);
        assert_eq!(naive_pt_advance(&[0.1, 0.2, 0.3, 0.4], &rule, 1, 4), Advance::Stay);
        assert_eq!(naive_pt_advance(&[0.5, 0.5], &rule, 1, 4), Advance::Stay);
        assert_eq!(naive_pt_advance(&[0.5; 10], &rule, 4, 4), Advance::Stay);
    }

    #[test]
    fn trainable_set_examples() {
        let spec = GlobalModelSpec::desk_default();
        let p = partition(&spec, 4).unwrap();
        assert_eq!(trainable_set(&p, 1, 1).global_layers(), vec![0, 1]);
        assert_eq!(trainable_set(&p, 3, 0).global_layers(), vec![4, 5]);
        // 1-indexed layers {2, 3, 4}
        assert_eq!(trainable_set(&p, 2, 1).global_layers(), vec![1, 2, 3]);
    }

    #[test]
    fn full_model_ready_after_last_block() {
        let mut s = Scheduler::new(plan(Mode::Blockfed));
        for r in 1..=3 {
            s.observe(s.stage_for(r), 0.1);
            assert!(!s.full_model_ready());
        }
        s.observe(s.stage_for(4), 0.1);
        assert!(s.full_model_ready());

        let mut e = Scheduler::new(plan(Mode::E2e));
        e.observe(e.stage_for(1), 0.1);
        assert!(e.full_model_ready());
    }

    #[test]
    fn each_block_trains_c_times_per_c_cycles() {
        for c in 1..4 {
            let s = Scheduler::new(plan(Mode::Blockfed));
            let mut counts = [0; 4];
            for r in 1..=4 * c {
                counts[s.stage_for(r) - 1] += 1;
            }
            assert_eq!(counts, [c; 4]);
        }
    }

    proptest! {
        #[test]
        fn naive_stage_is_nondecreasing(accs in proptest::collection::vec(0.0f64..1.0, 1..80)) {
            let mut s = Scheduler::new(plan(Mode::NaivePt));
            let mut prev = 1;
            for (i, a) in accs.iter().enumerate() {
                let t = s.stage_for(i + 1);
                prop_assert!(t >= prev && t <= 4);
                s.observe(t, *a);
                prev = t;
            }
        }
    }
}
