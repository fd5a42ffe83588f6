use serde::Serialize;

use crate::types::{RequestClass, RequestId};

/// What an entry's compute tokens do for the request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Prefill,
    Decode,
    /// Rebuilds KV that was discarded; produces no new progress.
    Recompute,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanEntry {
    pub request: RequestId,
    pub class: RequestClass,
    pub kind: EntryKind,
    /// P_i
    pub compute_tokens: u32,
    /// C_i
    pub context_tokens: u32,
}

impl PlanEntry {
    fn attention_term(&self) -> u64 {
        let p = self.compute_tokens as u64;
        p * (p + self.context_tokens as u64)
    }

    fn memory_term(&self) -> u64 {
        self.compute_tokens as u64 + self.context_tokens as u64
    }
}

/// Aggregate load of a batch, the only thing the latency model looks at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchShape {
    pub entries: usize,
    /// ΣP_i
    pub total_p: u64,
    /// ΣP_i(P_i + C_i)
    pub attention: u64,
    /// Σ(P_i + C_i)
    pub memory: u64,
}

impl BatchShape {
    pub fn single(p: u32, c: u32) -> Self {
        let mut s = BatchShape::default();
        s.add(p, c);
        s
    }

    pub fn add(&mut self, p: u32, c: u32) {
        let (p, c) = (p as u64, c as u64);
        self.entries += 1;
        self.total_p += p;
        self.attention += p * (p + c);
        self.memory += p + c;
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }
}

/// Compute-token assignment for one iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchPlan {
    pub entries: Vec<PlanEntry>,
    pub total_p: u64,
    pub weighted_context: u64,
    pub total_context: u64,
    /// Milliseconds, as predicted by the fitted model when the plan was built.
    pub predicted_latency: f64,
}

impl BatchPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: PlanEntry) {
        debug_assert!(entry.compute_tokens >= 1);
        self.total_p += entry.compute_tokens as u64;
        self.weighted_context += entry.attention_term();
        self.total_context += entry.memory_term();
        self.entries.push(entry);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn shape(&self) -> BatchShape {
        BatchShape {
            entries: self.entries.len(),
            total_p: self.total_p,
            attention: self.weighted_context,
            memory: self.total_context,
        }
    }

    pub fn has_class(&self, class: RequestClass) -> bool {
        self.entries.iter().any(|e| e.class == class)
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.entries.iter().any(|e| e.request == id)
    }

    /// Entries of the given class only, with aggregates recomputed.
    pub fn retain_class(&self, class: RequestClass) -> BatchPlan {
        let mut out = BatchPlan::new();
        for e in self.entries.iter().filter(|e| e.class == class) {
            out.push(e.clone());
        }
        out
    }
}
