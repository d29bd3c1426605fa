use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{DataError, InteractionRecord};

/// Per-user item sequences over contiguous integer ids.
///
/// User and item ids are assigned in lexicographic order of the original
/// strings, so the mapping does not depend on input order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub user_names: Vec<String>,
    pub item_names: Vec<String>,
    /// Indexed by user id; ascending timestamp order.
    pub sequences: Vec<Vec<usize>>,
    pub timestamps: Vec<Vec<u64>>,
}

impl SequenceDataset {
    pub fn n_items(&self) -> usize {
        self.item_names.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_names.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.item_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.user_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

pub fn build_sequences(records: &[InteractionRecord]) -> Result<SequenceDataset, DataError> {
    if records.is_empty() {
        return Err(DataError::Empty("no records to build sequences from".into()));
    }
    let users: Vec<String> = records.iter().map(|r| r.user_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let items: Vec<String> = records.iter().map(|r| r.item_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let uidx: HashMap<&str, usize> = users.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let iidx: HashMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut per_user: Vec<Vec<(u64, usize)>> = vec![Vec::new(); users.len()];
    for r in records {
        per_user[uidx[r.user_id.as_str()]].push((r.timestamp, iidx[r.item_id.as_str()]));
    }
    let mut sequences = Vec::with_capacity(users.len());
    let mut timestamps = Vec::with_capacity(users.len());
    for mut events in per_user {
        // stable: equal timestamps keep input order
        events.sort_by_key(|&(ts, _)| ts);
        timestamps.push(events.iter().map(|e| e.0).collect());
        sequences.push(events.into_iter().map(|e| e.1).collect());
    }
    Ok(SequenceDataset { user_names: users, item_names: items, sequences, timestamps })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    /// Train history followed by the validation item, used to score the test item.
    pub fn train_and_valid(&self) -> Vec<usize> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }

    pub fn full_sequence(&self) -> Vec<usize> {
        let mut h = self.train_and_valid();
        h.push(self.test);
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub n_items: usize,
    pub users: Vec<UserSplit>,
    /// Users dropped for having fewer than three interactions.
    pub excluded: Vec<usize>,
}

impl SplitDataset {
    /// Training-only view, e.g. for popularity counts.
    pub fn train_view(&self) -> Vec<&[usize]> {
        self.users.iter().map(|u| u.train.as_slice()).collect()
    }
}

/// Last item to test, second-last to validation, the rest to training.
pub fn leave_one_out(ds: &SequenceDataset) -> SplitDataset {
    let mut users = Vec::new();
    let mut excluded = Vec::new();
    for (u, seq) in ds.sequences.iter().enumerate() {
        if seq.len() < 3 {
            log::warn!("user {} has {} interactions; excluded from the split", ds.user_names[u], seq.len());
            excluded.push(u);
            continue;
        }
        let n = seq.len();
        users.push(UserSplit { user: u, train: seq[..n - 2].to_vec(), valid: seq[n - 2], test: seq[n - 1] });
    }
    SplitDataset { n_items: ds.n_items(), users, excluded }
}

/// The most recent `max_len` items (the whole sequence when shorter).
pub fn truncate(sequence: &[usize], max_len: usize) -> &[usize] {
    let max_len = max_len.max(1);
    &sequence[sequence.len().saturating_sub(max_len)..]
}
