use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("policy needs T > R >= 0, got T = {threshold}, R = {reserve}")]
pub struct PolicyError {
    pub threshold: usize,
    pub reserve: usize,
}

/// Transfer threshold `T` and per-link reserve `R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPolicy {
    threshold: usize,
    reserve: usize,
}

impl TransferPolicy {
    pub const FIELD_TEST: TransferPolicy = TransferPolicy { threshold: 60, reserve: 20 };

    pub fn new(threshold: usize, reserve: usize) -> Result<Self, PolicyError> {
        if threshold > reserve {
            Ok(Self { threshold, reserve })
        } else {
            Err(PolicyError { threshold, reserve })
        }
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn reserve(&self) -> usize {
        self.reserve
    }
}

impl Default for TransferPolicy {
    fn default() -> Self {
        Self::FIELD_TEST
    }
}

/// Batch size for the current per-link Fresh counts: `min - R` once the
/// smallest pool has reached `T`.
pub fn nm_trigger(counts: &[usize], policy: &TransferPolicy) -> Option<usize> {
    let min = *counts.iter().min()?;
    (min >= policy.threshold).then(|| min - policy.reserve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn field_test_values() {
        let p = TransferPolicy::new(60, 20).unwrap();
        assert_eq!(nm_trigger(&[60, 200, 300], &p), Some(40));
        assert_eq!(nm_trigger(&[59, 200, 300], &p), None);
        assert_eq!(nm_trigger(&[75, 80, 61], &p), Some(41));
        assert_eq!(nm_trigger(&[], &p), None);
    }

    #[test]
    fn policy_bounds() {
        assert!(TransferPolicy::new(20, 20).is_err());
        assert!(TransferPolicy::new(1, 0).is_ok());
    }

    proptest! {
        #[test]
        fn trigger_leaves_reserve(counts in prop::collection::vec(0usize..500, 1..6), t in 1usize..100, r in 0usize..100) {
            prop_assume!(t > r);
            let p = TransferPolicy::new(t, r).unwrap();
            let min = *counts.iter().min().unwrap();
            match nm_trigger(&counts, &p) {
                Some(h) => {
                    prop_assert!(min >= t);
                    prop_assert_eq!(min - h, r);
                    prop_assert!(counts.iter().all(|c| c - h >= r));
                }
                None => prop_assert!(min < t),
            }
        }
    }
}
