use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::Serialize;

use super::servable::Servable;
use super::ServeError;
use crate::backbone::Backbone;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Recommendation {
    pub items: Vec<usize>,
    pub scores: Vec<f32>,
    pub version: u64,
}

/// Per-dataset bundles over one shared frozen backbone.
///
/// A load builds the new snapshot off to the side and then replaces the map
/// entry; requests already holding the old `Arc` finish on it.
#[derive(Debug)]
pub struct Registry {
    backbone: Arc<Backbone>,
    bundles: RwLock<HashMap<String, Arc<Servable>>>,
    next_version: AtomicU64,
    loading: Mutex<()>,
}

impl Registry {
    pub fn new(backbone: Arc<Backbone>) -> Self {
        Self { backbone, bundles: RwLock::new(HashMap::new()), next_version: AtomicU64::new(1), loading: Mutex::new(()) }
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    /// Imports a bundle and publishes it under `dataset_id`, returning its version.
    pub fn load(&self, dataset_id: &str, path: impl AsRef<Path>) -> Result<u64, ServeError> {
        let _serial = self.loading.lock().unwrap_or_else(|e| e.into_inner());
        let version = self.next_version.fetch_add(1, Ordering::SeqCst);
        let servable = Servable::load(path, Arc::clone(&self.backbone), version)?;
        self.publish(dataset_id, servable);
        Ok(version)
    }

    /// Publishes an already built servable; it must share this registry's backbone.
    pub fn insert(&self, dataset_id: &str, servable: Servable) -> Result<u64, ServeError> {
        if !Arc::ptr_eq(&servable.model().backbone, &self.backbone) {
            return Err(ServeError::Invalid("servable was built on a different backbone".into()));
        }
        let version = servable.version();
        self.publish(dataset_id, servable);
        Ok(version)
    }

    fn publish(&self, dataset_id: &str, servable: Servable) {
        let fresh = Arc::new(servable);
        let old = self.bundles.write().unwrap_or_else(|e| e.into_inner()).insert(dataset_id.to_string(), fresh);
        drop(old);
    }

    pub fn next_version(&self) -> u64 {
        self.next_version.fetch_add(1, Ordering::SeqCst)
    }

    pub fn get(&self, dataset_id: &str) -> Result<Arc<Servable>, ServeError> {
        self.bundles
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(dataset_id)
            .cloned()
            .ok_or_else(|| ServeError::UnknownDataset(dataset_id.to_string()))
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.bundles.read().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn recommend(&self, dataset_id: &str, item_ids: &[usize], k: usize) -> Result<Recommendation, ServeError> {
        let snapshot = self.get(dataset_id)?;
        let (items, scores) = snapshot.infer_topk(item_ids, k)?;
        Ok(Recommendation { items, scores, version: snapshot.version() })
    }
}
