use std::collections::HashMap;

use super::{DataError, InteractionRecord};

/// Repeatedly drops interactions of users or items with fewer than `k`
/// interactions until nothing changes. The survivors form the largest
/// subset in which every user and every item has at least `k`.
pub fn k_core_filter(records: &[InteractionRecord], k: usize) -> Result<Vec<InteractionRecord>, DataError> {
    if k == 0 {
        return Err(DataError::Invalid("k-core needs k >= 1".into()));
    }
    let mut alive: Vec<bool> = vec![true; records.len()];
    let mut rounds = 0;
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (r, _) in records.iter().zip(&alive).filter(|(_, a)| **a) {
            *users.entry(&r.user_id).or_default() += 1;
            *items.entry(&r.item_id).or_default() += 1;
        }
        let mut removed = 0;
        for (r, a) in records.iter().zip(alive.iter_mut()) {
            if *a && (users[r.user_id.as_str()] < k || items[r.item_id.as_str()] < k) {
                *a = false;
                removed += 1;
            }
        }
        rounds += 1;
        if removed == 0 {
            break;
        }
    }
    log::debug!("{k}-core reached after {rounds} rounds");
    let out: Vec<InteractionRecord> =
        records.iter().zip(&alive).filter(|(_, a)| **a).map(|(r, _)| r.clone()).collect();
    if out.is_empty() {
        return Err(DataError::Empty(format!("{k}-core of the interactions is empty")));
    }
    Ok(out)
}
