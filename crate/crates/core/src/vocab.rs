//! The union vocabulary grown across tasks, token statistics and the
//! per-token update coefficients derived from them.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::bpe::{MergeRule, Scope, TaskVocab, TokenId, BYTE_TOKENS};
use crate::error::{Error, Result};

/// Evolving token inventory. Ids are stable: the token list only grows at the end.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VocabState {
    tokens: Vec<Vec<u8>>,
    id_of: HashMap<Vec<u8>, TokenId>,
    /// Merge rules per task, rewritten into global ids.
    per_task_rules: Vec<Vec<MergeRule>>,
    current_task: Option<usize>,
}

/// How the tokens of the current vocabulary relate to the incoming task.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Known before, absent from the task vocab.
    pub old: BTreeSet<TokenId>,
    /// Known before and present in the task vocab.
    pub overlap: BTreeSet<TokenId>,
    /// First introduced by the task vocab.
    pub new: BTreeSet<TokenId>,
}

impl Partition {
    /// Partition `0..total` given the ids known before and the ids of the task.
    ///
    /// Ids that are neither known nor part of the task fall into `old`; they
    /// only exist when a vocabulary is allocated up front.
    pub fn from_sets(total: usize, known: &BTreeSet<TokenId>, task: &BTreeSet<TokenId>) -> Self {
        let mut p = Partition::default();
        for id in 0..total as TokenId {
            match (known.contains(&id), task.contains(&id)) {
                (true, true) => p.overlap.insert(id),
                (false, true) => p.new.insert(id),
                _ => p.old.insert(id),
            };
        }
        p
    }

    pub fn total(&self) -> usize {
        self.old.len() + self.overlap.len() + self.new.len()
    }
}

impl VocabState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuild a state from persisted tokens and rules.
    pub fn from_parts(tokens: Vec<Vec<u8>>, rules: Vec<MergeRule>) -> Result<Self> {
        let id_of: HashMap<Vec<u8>, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        if id_of.len() != tokens.len() {
            return Err(Error::InvalidInput("duplicate token in vocabulary".into()));
        }
        let n_tasks = rules.iter().map(|r| r.task_index + 1).max().unwrap_or(0);
        let mut per_task_rules = vec![Vec::new(); n_tasks];
        for r in rules {
            let n = tokens.len() as TokenId;
            if r.left >= n || r.right >= n || r.result >= n {
                return Err(Error::InvalidId {
                    id: r.left.max(r.right).max(r.result),
                    len: tokens.len(),
                });
            }
            per_task_rules[r.task_index].push(r);
        }
        for rules in &mut per_task_rules {
            rules.sort_by_key(|r| r.rank);
        }
        Ok(VocabState {
            tokens,
            id_of,
            current_task: n_tasks.checked_sub(1),
            per_task_rules,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn id_of(&self, token: &[u8]) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn current_task(&self) -> Option<usize> {
        self.current_task
    }

    pub fn task_rules(&self, task: usize) -> &[MergeRule] {
        self.per_task_rules.get(task).map_or(&[], Vec::as_slice)
    }

    pub fn all_rules(&self) -> impl Iterator<Item = &MergeRule> {
        self.per_task_rules.iter().flatten()
    }

    /// Encode with the merges learned for one task, emitting global ids.
    pub fn task_scope(&self, task: usize) -> Scope<'_> {
        Scope::new(&self.tokens, self.task_rules(task).iter().copied())
    }

    /// Encode with the merges of tasks `0..=upto`.
    pub fn merged_scope(&self, upto: usize) -> Scope<'_> {
        Scope::new(
            &self.tokens,
            self.per_task_rules.iter().take(upto + 1).flatten().copied(),
        )
    }

    /// Global ids of every token of `task_vocab`, in task-vocab order.
    /// Tokens not yet registered yield `None`.
    pub fn lookup_all(&self, task_vocab: &TaskVocab) -> Vec<Option<TokenId>> {
        task_vocab.tokens.iter().map(|t| self.id_of(t)).collect()
    }

    /// Union the task vocab into the state and classify every id.
    pub fn merge_vocab(mut self, task_vocab: &TaskVocab) -> (VocabState, Partition) {
        let known: BTreeSet<TokenId> = (0..self.tokens.len() as TokenId).collect();
        let mut local_to_global = Vec::with_capacity(task_vocab.tokens.len());
        for tok in &task_vocab.tokens {
            let id = match self.id_of.get(tok) {
                Some(&id) => id,
                None => {
                    let id = self.tokens.len() as TokenId;
                    self.id_of.insert(tok.clone(), id);
                    self.tokens.push(tok.clone());
                    id
                }
            };
            local_to_global.push(id);
        }
        let task_ids: BTreeSet<TokenId> = local_to_global.iter().copied().collect();
        let t = self.current_task.map_or(0, |c| c + 1);
        let rules = task_vocab
            .rules
            .iter()
            .map(|r| MergeRule {
                left: local_to_global[r.left as usize],
                right: local_to_global[r.right as usize],
                result: local_to_global[r.result as usize],
                task_index: t,
                rank: r.rank,
            })
            .collect();
        if self.per_task_rules.len() <= t {
            self.per_task_rules.resize(t + 1, Vec::new());
        }
        self.per_task_rules[t] = rules;
        self.current_task = Some(t);
        let partition = Partition::from_sets(self.tokens.len(), &known, &task_ids);
        (self, partition)
    }
}

/// Number of task vocabularies each token has appeared in.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub counts: Vec<u32>,
}

impl TokenCounts {
    pub fn get(&self, id: TokenId) -> Option<u32> {
        self.counts.get(id as usize).copied()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Increment the count of every id in `task_ids`; unseen ids enter at zero first.
pub fn update_counts_ids(counts: &TokenCounts, total: usize, task_ids: &BTreeSet<TokenId>) -> TokenCounts {
    let mut next = counts.counts.clone();
    if next.len() < total {
        next.resize(total, 0);
    }
    for &id in task_ids {
        if id as usize >= next.len() {
            next.resize(id as usize + 1, 0);
        }
        next[id as usize] += 1;
    }
    TokenCounts { counts: next }
}

/// Record that the tokens of `task_vocab` took part in one more task.
pub fn update_counts(counts: &TokenCounts, state: &VocabState, task_vocab: &TaskVocab) -> TokenCounts {
    let ids: BTreeSet<TokenId> = state.lookup_all(task_vocab).into_iter().flatten().collect();
    update_counts_ids(counts, state.len(), &ids)
}

/// Per-token scale applied to gradients and weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaVector {
    pub lambda: Vec<f64>,
}

impl LambdaVector {
    pub fn ones(n: usize) -> Self {
        LambdaVector { lambda: vec![1.0; n] }
    }

    pub fn get(&self, id: TokenId) -> Option<f64> {
        self.lambda.get(id as usize).copied()
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

/// `0` for old tokens, `1/(c+1)` for overlapping tokens, `1` for new ones.
pub fn lambda_for(partition: &Partition, counts: &TokenCounts) -> Result<LambdaVector> {
    let mut lambda = vec![0.0; partition.total()];
    for &id in &partition.old {
        if counts.get(id).is_none() {
            return Err(Error::Consistency(format!("old token {id} has no count")));
        }
    }
    for &id in &partition.overlap {
        let c = counts
            .get(id)
            .ok_or_else(|| Error::Consistency(format!("overlapping token {id} has no count")))?;
        lambda[id as usize] = 1.0 / (f64::from(c) + 1.0);
    }
    for &id in &partition.new {
        lambda[id as usize] = 1.0;
    }
    Ok(LambdaVector { lambda })
}

/// Ids of a task vocab that are not byte tokens.
pub fn non_byte_ids(ids: &BTreeSet<TokenId>) -> BTreeSet<TokenId> {
    ids.iter().copied().filter(|&i| i as usize >= BYTE_TOKENS).collect()
}
