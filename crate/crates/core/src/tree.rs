//! The semantic concept hierarchy.
//!
//! File format: one `name,parent` pair per line, `-` for roots, `#` comments.
//! Parents must be declared before their children, so the parsed structure
//! is always a forest. Concept ids and latent axes follow file order.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{HcwError, Result};

/// The tree shipped with the synthetic dataset: 2 roots, 5 mid-level
/// concepts, 9 leaves.
pub const DEFAULT_TREE: &str = "\
# root concepts
Fruit,-
Weed,-
# mid level
Apple,Fruit
Citrus,Fruit
Grass,Weed
Broadleaf,Weed
Sedge,Weed
# leaves
Fuji,Apple
Gala,Apple
Melrose,Apple
Lemon,Citrus
Orange,Citrus
Crabgrass,Grass
Foxtail,Grass
Dandelion,Broadleaf
Nutsedge,Sedge
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConceptId(pub usize);

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptNode {
    pub id: ConceptId,
    pub name: String,
    pub parent: Option<ConceptId>,
    /// 1 for roots.
    pub depth: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationSet {
    pub parent: Option<ConceptId>,
    pub children: BTreeSet<ConceptId>,
    pub brothers: BTreeSet<ConceptId>,
    pub cousins: BTreeSet<ConceptId>,
    pub descendants: BTreeSet<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptTree {
    nodes: Vec<ConceptNode>,
    children: Vec<Vec<ConceptId>>,
    by_name: HashMap<String, ConceptId>,
}

impl ConceptTree {
    pub fn parse(text: &str) -> Result<Self> {
        let mut nodes: Vec<ConceptNode> = Vec::new();
        let mut children: Vec<Vec<ConceptId>> = Vec::new();
        let mut by_name: HashMap<String, ConceptId> = HashMap::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 {
                return Err(HcwError::validation(format!(
                    "tree line {line_no}: expected `name,parent`, got {line:?}"
                )));
            }
            let (name, parent_name) = (fields[0], fields[1]);
            if name.is_empty() || parent_name.is_empty() {
                return Err(HcwError::validation(format!(
                    "tree line {line_no}: empty concept or parent name"
                )));
            }
            if name == "-" {
                return Err(HcwError::validation(format!(
                    "tree line {line_no}: `-` is reserved for the root marker"
                )));
            }
            if by_name.contains_key(name) {
                return Err(HcwError::validation(format!(
                    "tree line {line_no}: duplicate concept name {name:?}"
                )));
            }
            let (parent, depth) = if parent_name == "-" {
                (None, 1)
            } else if parent_name == name {
                return Err(HcwError::validation(format!(
                    "tree line {line_no}: cycle, {name:?} is its own parent"
                )));
            } else {
                let Some(&pid) = by_name.get(parent_name) else {
                    return Err(HcwError::validation(format!(
                        "tree line {line_no}: unknown parent {parent_name:?} \
                         (parents must be declared before children)"
                    )));
                };
                (Some(pid), nodes[pid.0].depth + 1)
            };
            let id = ConceptId(nodes.len());
            if let Some(pid) = parent {
                children[pid.0].push(id);
            }
            nodes.push(ConceptNode {
                id,
                name: name.to_string(),
                parent,
                depth,
            });
            children.push(Vec::new());
            by_name.insert(name.to_string(), id);
        }
        if nodes.is_empty() {
            return Err(HcwError::validation("tree has no concepts"));
        }
        Ok(Self {
            nodes,
            children,
            by_name,
        })
    }

    pub fn default_tree() -> Self {
        Self::parse(DEFAULT_TREE).expect("built-in tree is valid")
    }

    /// Serializes back to the file format (round-trips through [`parse`](Self::parse)).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let parent = node.parent.map_or("-", |p| self.nodes[p.0].name.as_str());
            out.push_str(&format!("{},{}\n", node.name, parent));
        }
        out
    }

    /// Checks that every concept gets its own axis in a `d`-dimensional latent space.
    pub fn bind(&self, latent_dim: usize) -> Result<()> {
        if self.len() > latent_dim {
            return Err(HcwError::validation(format!(
                "tree has {} concepts but the latent space has only {latent_dim} axes",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn ids(&self) -> impl Iterator<Item = ConceptId> + '_ {
        (0..self.nodes.len()).map(ConceptId)
    }

    pub fn node(&self, id: ConceptId) -> Result<&ConceptNode> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| HcwError::validation(format!("unknown concept id {id}")))
    }

    pub fn name(&self, id: ConceptId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn depth(&self, id: ConceptId) -> usize {
        self.nodes[id.0].depth
    }

    pub fn parent(&self, id: ConceptId) -> Option<ConceptId> {
        self.nodes[id.0].parent
    }

    pub fn children(&self, id: ConceptId) -> &[ConceptId] {
        &self.children[id.0]
    }

    pub fn is_leaf(&self, id: ConceptId) -> bool {
        self.children[id.0].is_empty()
    }

    pub fn lookup(&self, name: &str) -> Result<ConceptId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| HcwError::validation(format!("unknown concept {name:?}")))
    }

    pub fn roots(&self) -> Vec<ConceptId> {
        self.ids().filter(|&c| self.parent(c).is_none()).collect()
    }

    /// Leaves in file order; position in this list is the classifier's class index.
    pub fn leaves(&self) -> Vec<ConceptId> {
        self.ids().filter(|&c| self.is_leaf(c)).collect()
    }

    pub fn class_of_leaf(&self, leaf: ConceptId) -> Option<usize> {
        self.leaves().iter().position(|&l| l == leaf)
    }

    /// Latent axis assigned to a concept.
    pub fn axis_of(&self, id: ConceptId) -> usize {
        id.0
    }

    /// Inverse of [`axis_of`](Self::axis_of); `None` for unassigned axes.
    pub fn concept_of(&self, axis: usize) -> Option<ConceptId> {
        (axis < self.nodes.len()).then_some(ConceptId(axis))
    }

    /// Root-first path ending at `id`.
    pub fn path_to(&self, id: ConceptId) -> Vec<ConceptId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    fn siblings(&self, id: ConceptId) -> BTreeSet<ConceptId> {
        let pool: Vec<ConceptId> = match self.parent(id) {
            Some(p) => self.children(p).to_vec(),
            None => self.roots(),
        };
        pool.into_iter().filter(|&c| c != id).collect()
    }

    pub fn descendants(&self, id: ConceptId) -> BTreeSet<ConceptId> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<ConceptId> = self.children(id).to_vec();
        while let Some(c) = stack.pop() {
            if out.insert(c) {
                stack.extend_from_slice(self.children(c));
            }
        }
        out
    }

    /// `id` together with its descendants.
    pub fn subtree(&self, id: ConceptId) -> BTreeSet<ConceptId> {
        let mut s = self.descendants(id);
        s.insert(id);
        s
    }

    pub fn relations(&self, id: ConceptId) -> Result<RelationSet> {
        let node = self.node(id)?;
        let brothers = self.siblings(id);
        let cousins = match node.parent {
            Some(p) => self
                .siblings(p)
                .into_iter()
                .flat_map(|uncle| self.children(uncle).iter().copied())
                .collect(),
            None => BTreeSet::new(),
        };
        Ok(RelationSet {
            parent: node.parent,
            children: self.children(id).iter().copied().collect(),
            brothers,
            cousins,
            descendants: self.descendants(id),
        })
    }

    /// Indices of samples whose label is `id` or one of its descendants.
    pub fn concept_samples(&self, id: ConceptId, labels: &[ConceptId]) -> Vec<usize> {
        let members = self.subtree(id);
        labels
            .iter()
            .enumerate()
            .filter(|(_, l)| members.contains(l))
            .map(|(i, _)| i)
            .collect()
    }
}
