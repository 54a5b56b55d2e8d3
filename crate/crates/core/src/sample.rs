use serde::{Deserialize, Serialize};

/// One training example.
///
/// Features are kept in single precision, which is also what the archive
/// writes to disk, so a round trip through storage is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub label: u32,
    pub task: u32,
    pub features: Vec<f32>,
    /// Optional per-class logits stored alongside the sample (distillation payloads).
    pub aux_logits: Option<Vec<f32>>,
}

impl Sample {
    pub fn new(id: u64, label: u32, task: u32, features: Vec<f32>) -> Self {
        Sample {
            id,
            label,
            task,
            features,
            aux_logits: None,
        }
    }

    pub fn with_aux_logits(mut self, logits: Vec<f32>) -> Self {
        self.aux_logits = Some(logits);
        self
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Sample) -> bool {
        fn bits(v: &[f32]) -> impl Iterator<Item = u32> + '_ {
            v.iter().map(|f| f.to_bits())
        }
        self.id == other.id
            && self.label == other.label
            && self.task == other.task
            && self.features.len() == other.features.len()
            && bits(&self.features).eq(bits(&other.features))
            && match (&self.aux_logits, &other.aux_logits) {
                (None, None) => true,
                (Some(a), Some(b)) => a.len() == b.len() && bits(a).eq(bits(b)),
                _ => false,
            }
    }
}
