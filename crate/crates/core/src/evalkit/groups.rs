use serde::{Deserialize, Serialize};

use crate::datasets::SplitDataset;

/// Inclusive upper interaction counts of the sparse and medium groups;
/// everything above `medium_max` is dense.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityBounds {
    pub sparse_max: usize,
    pub medium_max: usize,
}

impl Default for SparsityBounds {
    fn default() -> Self {
        Self { sparse_max: 5, medium_max: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserGroup {
    pub label: String,
    pub min_interactions: usize,
    pub max_interactions: Option<usize>,
    pub members: Vec<usize>,
}

impl UserGroup {
    pub fn bounds_label(&self) -> String {
        match self.max_interactions {
            Some(hi) if self.min_interactions == 0 => format!("<={hi}"),
            Some(hi) => format!("{}-{}", self.min_interactions, hi),
            None => format!(">{}", self.min_interactions - 1),
        }
    }
}

/// Splits users into sparse / medium / dense by total interaction count.
pub fn group_by_sparsity(split: &SplitDataset, bounds: SparsityBounds) -> Vec<UserGroup> {
    let mut groups = vec![
        UserGroup {
            label: "sparse".into(),
            min_interactions: 0,
            max_interactions: Some(bounds.sparse_max),
            members: Vec::new(),
        },
        UserGroup {
            label: "medium".into(),
            min_interactions: bounds.sparse_max + 1,
            max_interactions: Some(bounds.medium_max),
            members: Vec::new(),
        },
        UserGroup {
            label: "dense".into(),
            min_interactions: bounds.medium_max + 1,
            max_interactions: None,
            members: Vec::new(),
        },
    ];
    for u in &split.users {
        let count = u.train.len() + 2;
        let g = if count <= bounds.sparse_max {
            0
        } else if count <= bounds.medium_max {
            1
        } else {
            2
        };
        groups[g].members.push(u.user);
    }
    groups
}
