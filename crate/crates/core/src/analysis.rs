//! Read-only interpretability queries over a trained model: top-k concept
//! activations, two-axis projections and per-sample activation trees.

use std::fmt::Write as _;

use crate::data::{Dataset, SplitTag};
use crate::error::{HcwError, Result};
use crate::trainer::HcwModel;
use crate::tree::ConceptId;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub sample_index: usize,
    pub concept: String,
    pub value: f64,
    /// 1-based.
    pub rank: usize,
}

/// Reduced activations of the test split, one row per test image.
fn test_activations(model: &HcwModel, ds: &Dataset) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let test = ds.indices(SplitTag::Test);
    let inf = model.infer(&ds.images.gather(&test))?;
    let d = model.latent_dim();
    let rows = inf.reduced.data().chunks(d).map(|r| r.to_vec()).collect();
    Ok((test, rows))
}

fn check_tree(model: &HcwModel, ds: &Dataset) -> Result<()> {
    if model.tree != ds.tree {
        return Err(HcwError::validation(
            "model and dataset use different concept trees",
        ));
    }
    Ok(())
}

/// Test images ranked by their activation on `concept`'s axis, highest
/// first, ties by ascending sample index. `k` is capped at the test size.
pub fn top_k_activations(
    model: &HcwModel,
    ds: &Dataset,
    concept: &str,
    k: usize,
) -> Result<Vec<ActivationRecord>> {
    check_tree(model, ds)?;
    if k < 1 {
        return Err(HcwError::validation("k must be >= 1"));
    }
    let id = ds.tree.lookup(concept)?;
    let axis = ds.tree.axis_of(id);
    let (test, rows) = test_activations(model, ds)?;
    let mut scored: Vec<(f64, usize)> =
        test.iter().zip(&rows).map(|(&i, r)| (r[axis], i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, (value, sample_index))| ActivationRecord {
            sample_index,
            concept: concept.to_string(),
            value,
            rank: r + 1,
        })
        .collect())
}

pub fn records_csv(records: &[ActivationRecord]) -> String {
    let mut out = String::from("rank,sample_index,concept,activation\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.rank, r.sample_index, r.concept, r.value
        )
        .expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRow {
    pub sample_index: usize,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

/// Every test image placed at its activations on the two concept axes.
pub fn concept_pair_projection(
    model: &HcwModel,
    ds: &Dataset,
    cx: &str,
    cy: &str,
) -> Result<Vec<ProjectionRow>> {
    check_tree(model, ds)?;
    let ax = ds.tree.axis_of(ds.tree.lookup(cx)?);
    let ay = ds.tree.axis_of(ds.tree.lookup(cy)?);
    let (test, rows) = test_activations(model, ds)?;
    Ok(test
        .iter()
        .zip(&rows)
        .map(|(&i, r)| ProjectionRow {
            sample_index: i,
            label: ds.tree.name(ds.labels[i]).to_string(),
            x: r[ax],
            y: r[ay],
        })
        .collect())
}

pub fn projection_csv(rows: &[ProjectionRow]) -> String {
    let mut out = String::from("sample_index,label_name,activation_x,activation_y\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.sample_index, r.label, r.x, r.y).expect("string write");
    }
    out
}

/// Min-max scaling to `[0, 1]`; a constant input maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationNode {
    pub concept: ConceptId,
    pub raw: f64,
    pub normalized: f64,
}

/// One sample's activation on every concept axis, in tree node order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTree {
    pub sample_index: usize,
    pub label: ConceptId,
    pub nodes: Vec<ActivationNode>,
}

pub fn activation_tree(
    model: &HcwModel,
    ds: &Dataset,
    sample_index: usize,
) -> Result<ActivationTree> {
    check_tree(model, ds)?;
    if sample_index >= ds.len() {
        return Err(HcwError::validation(format!(
            "sample index {sample_index} out of range for {} samples",
            ds.len()
        )));
    }
    let inf = model.infer(&ds.images.gather(&[sample_index]))?;
    let row = inf.reduced.data();
    let raw: Vec<f64> = ds.tree.ids().map(|c| row[ds.tree.axis_of(c)]).collect();
    let normalized = min_max_normalize(&raw);
    Ok(ActivationTree {
        sample_index,
        label: ds.labels[sample_index],
        nodes: ds
            .tree
            .ids()
            .zip(raw.into_iter().zip(normalized))
            .map(|(concept, (raw, normalized))| ActivationNode {
                concept,
                raw,
                normalized,
            })
            .collect(),
    })
}

impl ActivationTree {
    pub fn normalized(&self, id: ConceptId) -> f64 {
        self.nodes[id.0].normalized
    }

    /// Whether every node on the true label's root path is the largest
    /// activation among the nodes of its depth.
    pub fn path_holds_level_maxima(&self, tree: &crate::tree::ConceptTree) -> bool {
        tree.path_to(self.label).into_iter().all(|on_path| {
            let depth = tree.depth(on_path);
            let v = self.normalized(on_path);
            tree.ids()
                .filter(|&c| c != on_path && tree.depth(c) == depth)
                .all(|c| self.normalized(c) < v)
        })
    }

    /// Indented text, two spaces per level, values to three decimals.
    pub fn to_text(&self, tree: &crate::tree::ConceptTree) -> String {
        let mut out = format!("sample {} ({})\n", self.sample_index, tree.name(self.label));
        let mut stack: Vec<ConceptId> = tree.roots().into_iter().rev().collect();
        while let Some(c) = stack.pop() {
            let indent = "  ".repeat(tree.depth(c) - 1);
            writeln!(out, "{indent}{}: {:.3}", tree.name(c), self.normalized(c))
                .expect("string write");
            stack.extend(tree.children(c).iter().rev());
        }
        out
    }
}
