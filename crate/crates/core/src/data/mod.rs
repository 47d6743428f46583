//! Synthetic hierarchical image data, splits and on-disk layout.
//!
//! A dataset directory holds `images.hcwt` (f32, `[N, C, H, W]`),
//! `labels.hcwt` (u32 concept ids), `split.txt` (one tag per sample) and
//! `tree.txt`.

pub mod container;
pub mod split;
pub mod synth;

use std::path::Path;

pub use container::{read_tensor, write_tensor, DType, StoredTensor, TensorData};
pub use split::{split_dataset, SplitRatios, SplitTag, DEFAULT_CONCEPT_PER_CLASS};
pub use synth::{generate_dataset, DatasetSpec, Generated};

use crate::error::{HcwError, Result};
use crate::tensor::Tensor;
use crate::tree::{ConceptId, ConceptTree};

pub const IMAGES_FILE: &str = "images.hcwt";
pub const LABELS_FILE: &str = "labels.hcwt";
pub const SPLIT_FILE: &str = "split.txt";
pub const TREE_FILE: &str = "tree.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<ConceptId>,
    pub splits: Vec<SplitTag>,
    pub tree: ConceptTree,
}

impl Dataset {
    /// Generates and splits in one go with the default ratios.
    pub fn synthesize(spec: &DatasetSpec, concept_per_class: usize) -> Result<Self> {
        let g = generate_dataset(spec)?;
        let splits = split_dataset(
            &g.labels,
            SplitRatios::default(),
            concept_per_class,
            spec.seed,
        )?;
        let ds = Self {
            images: g.images,
            labels: g.labels,
            splits,
            tree: spec.tree.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == tag).collect()
    }

    /// Samples reserved for rotation updates.
    pub fn concept_subset_indices(&self) -> Vec<usize> {
        self.indices(SplitTag::Concept)
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Classifier target (position among the leaves) for every sample.
    pub fn class_indices(&self) -> Result<Vec<usize>> {
        let leaves = self.tree.leaves();
        self.labels
            .iter()
            .map(|l| {
                leaves.iter().position(|x| x == l).ok_or_else(|| {
                    HcwError::validation(format!(
                        "label {} is not a leaf concept",
                        self.tree.name(*l)
                    ))
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, _, h, w) = self.images.dims4()?;
        if h != w {
            return Err(HcwError::validation(format!(
                "images must be square, got {h}x{w}"
            )));
        }
        if n != self.labels.len() || n != self.splits.len() {
            return Err(HcwError::validation(format!(
                "{n} images, {} labels, {} split tags",
                self.labels.len(),
                self.splits.len()
            )));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(HcwError::validation("pixel values must lie in [0, 1]"));
        }
        for l in &self.labels {
            self.tree.node(*l)?;
        }
        self.class_indices()?;
        for leaf in self.tree.leaves() {
            for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
                let present = self
                    .labels
                    .iter()
                    .zip(&self.splits)
                    .any(|(l, t)| *l == leaf && *t == tag);
                if !present {
                    return Err(HcwError::validation(format!(
                        "leaf {} has no {tag} samples",
                        self.tree.name(leaf)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HcwError::io(dir, e))?;
        let images = StoredTensor::new(
            self.images.shape().to_vec(),
            TensorData::F32(self.images.data().iter().map(|&v| v as f32).collect()),
        )?;
        write_tensor(&dir.join(IMAGES_FILE), &images)?;
        let labels = StoredTensor::new(
            vec![self.len()],
            TensorData::U32(self.labels.iter().map(|l| l.0 as u32).collect()),
        )?;
        write_tensor(&dir.join(LABELS_FILE), &labels)?;
        let mut split = String::with_capacity(self.len() * 6);
        for t in &self.splits {
            split.push_str(t.as_str());
            split.push('\n');
        }
        write_text(&dir.join(SPLIT_FILE), &split)?;
        write_text(&dir.join(TREE_FILE), &self.tree.to_text())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let tree_path = dir.join(TREE_FILE);
        let tree = ConceptTree::parse(&read_text(&tree_path)?)?;
        let (dims, images) = read_tensor(&dir.join(IMAGES_FILE))?.into_f64()?;
        if dims.len() != 4 {
            return Err(HcwError::format(
                dir.join(IMAGES_FILE),
                format!("expected 4 dims, found {dims:?}"),
            ));
        }
        let images = Tensor::from_vec(&dims, images)?;
        let labels_path = dir.join(LABELS_FILE);
        let (ldims, raw) = read_tensor(&labels_path)?
            .into_u32()
            .map_err(|_| HcwError::format(&labels_path, "labels must be u32"))?;
        if ldims.len() != 1 {
            return Err(HcwError::format(
                &labels_path,
                format!("expected 1 dim, found {ldims:?}"),
            ));
        }
        let labels: Vec<ConceptId> = raw.into_iter().map(|v| ConceptId(v as usize)).collect();
        let split_path = dir.join(SPLIT_FILE);
        let splits = read_text(&split_path)?
            .lines()
            .enumerate()
            .map(|(i, line)| {
                line.trim().parse::<SplitTag>().map_err(|_| {
                    HcwError::format(&split_path, format!("line {}: bad tag {line:?}", i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            images,
            labels,
            splits,
            tree,
        };
        ds.validate()?;
        Ok(ds)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HcwError::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| HcwError::io(path, e))?;
    String::from_utf8(bytes).map_err(|_| HcwError::format(path, "not valid UTF-8"))
}
