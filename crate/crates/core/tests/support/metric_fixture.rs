//! Compares evalkit against the committed brute-force results in
//! `fixtures/metrics_expected.json` (produced by `fixtures/metrics_oracle.py`).

use e4srec_core::evalkit::{hr_at_k, mrr, ndcg_at_k, rank_of_target};
use serde_json::Value;

const FIXTURE: &str = include_str!("../fixtures/metrics_fixture.json");
const EXPECTED: &str = include_str!("../fixtures/metrics_expected.json");

pub const NDCG_TOL: f64 = 1e-9;

/// Returns the number of compared values, or a description of the first mismatch.
pub fn check() -> Result<usize, String> {
    let fx: Value = serde_json::from_str(FIXTURE).map_err(|e| e.to_string())?;
    let want: Value = serde_json::from_str(EXPECTED).map_err(|e| e.to_string())?;
    let n = fx["n_items"].as_u64().unwrap() as usize;
    let all: Vec<usize> = (0..n).collect();
    let mut compared = 0;
    for (mode, restrict) in [("full", false), ("candidates", true)] {
        let mut ranks = Vec::new();
        for u in fx["users"].as_array().unwrap() {
            let scores: Vec<f32> = u["scores"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap() as f32).collect();
            let target = u["target"].as_u64().unwrap() as usize;
            let cands: Vec<usize> = u["candidates"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
            let cset = if restrict { Some(cands.as_slice()) } else { Some(all.as_slice()) };
            let r = rank_of_target(&scores, target, cset).map_err(|e| e.to_string())?;
            if !restrict && r != rank_of_target(&scores, target, None).map_err(|e| e.to_string())? {
                return Err("explicit full candidate list disagrees with implicit full ranking".into());
            }
            ranks.push(r);
        }
        let want_ranks: Vec<usize> =
            want[mode]["ranks"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
        if ranks != want_ranks {
            return Err(format!("{mode}: ranks {ranks:?} != {want_ranks:?}"));
        }
        compared += ranks.len();
        for (name, value) in want[mode]["metrics"].as_object().unwrap() {
            let expected = value.as_f64().unwrap();
            let (kind, k) = match name.split_once('@') {
                Some((kind, k)) => (kind, k.parse::<usize>().unwrap()),
                None => (name.as_str(), 0),
            };
            let got = match kind {
                "HR" => hr_at_k(&ranks, k),
                "nDCG" => ndcg_at_k(&ranks, k),
                "MRR" => mrr(&ranks),
                other => return Err(format!("unknown metric {other}")),
            }
            .map_err(|e| e.to_string())?;
            let ok = if kind == "HR" { got == expected } else { (got - expected).abs() <= NDCG_TOL };
            if !ok {
                return Err(format!("{mode} {name}: got {got}, brute force {expected}"));
            }
            compared += 1;
        }
    }
    Ok(compared)
}
