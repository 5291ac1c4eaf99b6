use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ChatResponse, Stage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub calls: u64,
    pub input_tokens: u64,
    pub cached_input_tokens: u64,
    pub output_tokens: u64,
}

impl StageUsage {
    fn add(&mut self, other: &StageUsage) {
        self.calls += other.calls;
        self.input_tokens += other.input_tokens;
        self.cached_input_tokens += other.cached_input_tokens;
        self.output_tokens += other.output_tokens;
    }
}

/// Per-stage token accumulators. Counters only ever grow.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub stages: BTreeMap<Stage, StageUsage>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub input_tokens: u64,
    pub cached_input_tokens: u64,
    pub output_tokens: u64,
    pub grand_total: u64,
}

impl UsageLedger {
    pub fn record(&mut self, stage: Stage, response: &ChatResponse) {
        self.stages.entry(stage).or_default().add(&StageUsage {
            calls: 1,
            input_tokens: response.input_tokens,
            cached_input_tokens: response.cached_input_tokens,
            output_tokens: response.output_tokens,
        });
    }

    /// Adds a pre-aggregated row, e.g. when loading published figures.
    pub fn record_usage(&mut self, stage: Stage, usage: StageUsage) {
        self.stages.entry(stage).or_default().add(&usage);
    }

    pub fn merge(&mut self, other: &UsageLedger) {
        for (stage, usage) in &other.stages {
            self.stages.entry(*stage).or_default().add(usage);
        }
    }

    pub fn stage(&self, stage: Stage) -> StageUsage {
        self.stages.get(&stage).copied().unwrap_or_default()
    }

    pub fn totals(&self) -> LedgerTotals {
        ledger_totals(self)
    }
}

pub fn ledger_totals(ledger: &UsageLedger) -> LedgerTotals {
    let mut sum = StageUsage::default();
    for usage in ledger.stages.values() {
        sum.add(usage);
    }
    LedgerTotals {
        input_tokens: sum.input_tokens,
        cached_input_tokens: sum.cached_input_tokens,
        output_tokens: sum.output_tokens,
        grand_total: sum.input_tokens + sum.output_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_ledger_is_zero() {
        assert_eq!(ledger_totals(&UsageLedger::default()), LedgerTotals::default());
    }

    #[test]
    fn merge_adds_stagewise() {
        let mut a = UsageLedger::default();
        a.record(
            Stage::Debate,
            &ChatResponse { text: String::new(), input_tokens: 10, cached_input_tokens: 4, output_tokens: 3 },
        );
        let mut b = a.clone();
        b.merge(&a);
        assert_eq!(b.stage(Stage::Debate).calls, 2);
        assert_eq!(b.totals().grand_total, 26);
    }
}
