//! Lightweight call counters for verifying which code paths a run exercised.
//!
//! A disabled probe (the default) costs one branch per hit.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

pub mod site {
    pub const MASKS_RESTRICTIVE: &str = "masks.restrictive_subset";
    pub const MASKS_FRESH: &str = "masks.fresh_bernoulli";
    pub const MASKS_DISABLED: &str = "masks.disabled";
    pub const LOSS_TWO_STEP: &str = "loss.two_step";
    pub const LOSS_ONE_STEP: &str = "loss.one_step";
    pub const PROPAGATE_MEAN: &str = "propagate.mean_only";
    pub const PROPAGATE_SAMPLE: &str = "propagate.sampled";
    pub const BOOTSTRAP: &str = "train.bootstrap_resample";
}

#[derive(Clone, Debug, Default)]
pub struct Probe(Option<Arc<Mutex<BTreeMap<&'static str, u64>>>>);

impl Probe {
    pub fn disabled() -> Self {
        Self(None)
    }

    pub fn recording() -> Self {
        Self(Some(Arc::default()))
    }

    #[inline]
    pub fn hit(&self, site: &'static str) {
        if let Some(m) = &self.0 {
            *m.lock().unwrap().entry(site).or_default() += 1;
        }
    }

    pub fn count(&self, site: &str) -> u64 {
        self.0
            .as_ref()
            .and_then(|m| m.lock().unwrap().get(site).copied())
            .unwrap_or(0)
    }

    pub fn snapshot(&self) -> BTreeMap<&'static str, u64> {
        self.0
            .as_ref()
            .map(|m| m.lock().unwrap().clone())
            .unwrap_or_default()
    }
}
