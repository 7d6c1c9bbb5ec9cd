use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target of the three-way fusion classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FusionClass {
    Live = 0,
    SpoofNormalMovement = 1,
    SpoofAbnormalMovement = 2,
}

impl FusionClass {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Groups attack-type labels into normal-movement and abnormal-movement
/// classes. Live faces and video replays both move like faces; prints and
/// rigid masks do not.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovementClassMap {
    pub normal_labels: BTreeSet<String>,
    pub abnormal_labels: BTreeSet<String>,
    pub live_labels: BTreeSet<String>,
}

impl Default for MovementClassMap {
    fn default() -> Self {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            normal_labels: set(&["live", "replay"]),
            abnormal_labels: set(&["print", "print_rigid", "print_bent", "mask_rigid", "mask_bent"]),
            live_labels: set(&["live"]),
        }
    }
}

impl MovementClassMap {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.normal_labels.intersection(&self.abnormal_labels).next() {
            return Err(Error::InvalidArgument(format!(
                "label `{l}` is both normal and abnormal movement"
            )));
        }
        if let Some(l) = self.live_labels.difference(&self.normal_labels).next() {
            return Err(Error::InvalidArgument(format!(
                "live label `{l}` is not a normal-movement label"
            )));
        }
        if self.live_labels.is_empty() {
            return Err(Error::InvalidArgument("no live labels configured".into()));
        }
        Ok(())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.normal_labels.contains(label) || self.abnormal_labels.contains(label)
    }

    pub fn is_live(&self, label: &str) -> bool {
        self.live_labels.contains(label)
    }

    /// `(l_g, fusion class)`: `l_g = 1` for normal movement; fusion classes
    /// are live, spoof with normal movement, spoof with abnormal movement.
    pub fn movement_label(&self, label: &str) -> Result<(u8, FusionClass)> {
        if self.live_labels.contains(label) {
            Ok((1, FusionClass::Live))
        } else if self.normal_labels.contains(label) {
            Ok((1, FusionClass::SpoofNormalMovement))
        } else if self.abnormal_labels.contains(label) {
            Ok((0, FusionClass::SpoofAbnormalMovement))
        } else {
            Err(Error::InvalidArgument(format!(
                "label `{label}` is not in the movement class map"
            )))
        }
    }
}
