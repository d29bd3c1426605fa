use std::fmt;

use serde::{Deserialize, Serialize};

use super::groups::UserGroup;
use super::metrics::{hr_at_k, mrr, ndcg_at_k};
use super::protocols::RankingResult;
use super::EvalError;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Protocol {
    Full,
    Sampled { n_neg: usize },
}

impl Protocol {
    pub fn cutoffs(self) -> (&'static [usize], &'static [usize], bool) {
        match self {
            Protocol::Full => (&[5, 10, 20], &[5, 10, 20], false),
            Protocol::Sampled { .. } => (&[1, 5, 10], &[5, 10], true),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Full => write!(f, "full"),
            Protocol::Sampled { n_neg } => write!(f, "sampled{n_neg}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub label: String,
    pub bounds: String,
    pub n_users: usize,
    pub metrics: Vec<Metric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub model: String,
    pub n_users: usize,
    pub metrics: Vec<Metric>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupReport>,
}

fn compute(protocol: Protocol, ranks: &[usize]) -> Result<Vec<Metric>, EvalError> {
    let (hr_ks, ndcg_ks, with_mrr) = protocol.cutoffs();
    let mut out = Vec::new();
    for &k in hr_ks {
        out.push(Metric { name: format!("HR@{k}"), value: hr_at_k(ranks, k)? });
    }
    for &k in ndcg_ks {
        out.push(Metric { name: format!("nDCG@{k}"), value: ndcg_at_k(ranks, k)? });
    }
    if with_mrr {
        out.push(Metric { name: "MRR".into(), value: mrr(ranks)? });
    }
    Ok(out)
}

impl MetricsReport {
    pub fn from_rankings(protocol: Protocol, rankings: &[RankingResult]) -> Result<Self, EvalError> {
        let ranks: Vec<usize> = rankings.iter().map(|r| r.rank).collect();
        Ok(Self { protocol, model: String::new(), n_users: ranks.len(), metrics: compute(protocol, &ranks)?, groups: vec![] })
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    /// Adds a per-group breakdown; groups without evaluated users get no metrics.
    pub fn with_groups(mut self, rankings: &[RankingResult], groups: &[UserGroup]) -> Result<Self, EvalError> {
        let by_user: std::collections::HashMap<usize, usize> = rankings.iter().map(|r| (r.user, r.rank)).collect();
        self.groups.clear();
        for g in groups {
            let ranks: Vec<usize> = g.members.iter().filter_map(|u| by_user.get(u).copied()).collect();
            let metrics = if ranks.is_empty() { vec![] } else { compute(self.protocol, &ranks)? };
            self.groups.push(GroupReport { label: g.label.clone(), bounds: g.bounds_label(), n_users: ranks.len(), metrics });
        }
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    /// Aligned plain-text table: one row for all users, then one per group.
    pub fn to_table(&self) -> String {
        let mut header = vec!["model".to_string(), "users".to_string()];
        header.extend(self.metrics.iter().map(|m| m.name.clone()));
        let mut rows = vec![header];
        let label = if self.model.is_empty() { self.protocol.to_string() } else { self.model.clone() };
        let mut row = vec![label, self.n_users.to_string()];
        row.extend(self.metrics.iter().map(|m| format!("{:.4}", m.value)));
        rows.push(row);
        for g in &self.groups {
            let mut row = vec![format!("  {} ({})", g.label, g.bounds), g.n_users.to_string()];
            row.extend(self.metrics.iter().map(|m| {
                g.metrics.iter().find(|x| x.name == m.name).map_or("-".to_string(), |x| format!("{:.4}", x.value))
            }));
            rows.push(row);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("protocol: {}\n", self.protocol);
        for row in rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// Group breakdown as CSV (`group,bounds,users,<metrics...>`).
    pub fn groups_csv(&self) -> String {
        let mut out = String::from("group,bounds,users");
        for m in &self.metrics {
            out.push(',');
            out.push_str(&m.name);
        }
        out.push('\n');
        for g in &self.groups {
            out.push_str(&format!("{},{},{}", g.label, g.bounds, g.n_users));
            for m in &self.metrics {
                out.push(',');
                if let Some(x) = g.metrics.iter().find(|x| x.name == m.name) {
                    out.push_str(&format!("{:.6}", x.value));
                }
            }
            out.push('\n');
        }
        out
    }
}
