use std::fmt;
use std::str::FromStr;

use crate::error::{HcwError, Result};
use crate::rng::SeededRng;
use crate::tree::ConceptId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    /// Held out from the training portion for the rotation updates.
    Concept,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
            Self::Concept => "concept",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = HcwError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            "concept" => Ok(Self::Concept),
            other => Err(HcwError::validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r >= 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(HcwError::validation(format!(
                "split ratios must be non-negative and sum to 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub const DEFAULT_CONCEPT_PER_CLASS: usize = 8;

/// Stratified split. Per class: shuffle, `floor(val·n)` to val, `floor(test·n)`
/// to test, the remainder to train; the first `concept_per_class` of each
/// class's training share are re-tagged [`SplitTag::Concept`].
pub fn split_dataset(
    labels: &[ConceptId],
    ratios: SplitRatios,
    concept_per_class: usize,
    seed: u64,
) -> Result<Vec<SplitTag>> {
    ratios.validate()?;
    let mut classes: Vec<ConceptId> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let mut tags = vec![SplitTag::Train; labels.len()];
    let mut rng = SeededRng::new(seed);
    for class in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut members);
        let n = members.len();
        let n_val = (ratios.val * n as f64 + 1e-9).floor() as usize;
        let n_test = (ratios.test * n as f64 + 1e-9).floor() as usize;
        let n_train = n - n_val - n_test;
        if n_val == 0 || n_test == 0 {
            return Err(HcwError::validation(format!(
                "class {class} has {n} samples, too few for non-empty val and test splits"
            )));
        }
        if concept_per_class >= n_train {
            return Err(HcwError::validation(format!(
                "class {class}: {concept_per_class} concept samples leave no training samples out of {n_train}"
            )));
        }
        for (k, &i) in members.iter().enumerate() {
            tags[i] = if k < n_val {
                SplitTag::Val
            } else if k < n_val + n_test {
                SplitTag::Test
            } else if k < n_val + n_test + concept_per_class {
                SplitTag::Concept
            } else {
                SplitTag::Train
            };
        }
    }
    Ok(tags)
}
