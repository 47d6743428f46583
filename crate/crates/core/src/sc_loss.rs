//! Semantic constraint loss over reduced concept activations.
//!
//! `L = α·L_B + β·L_C` where `L_B` is a contrastive hinge that pushes brother
//! classes at least `m_B` apart and `L_C` is a triplet hinge asking every
//! anchor–brother distance to be at least `m_C` shorter than the matching
//! anchor–cousin distance. Distances are Euclidean.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{HcwError, Result};
use crate::tree::{ConceptId, ConceptTree};

/// How hinge terms are combined across one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScReduction {
    /// Plain sums over every pair and triple.
    Sum,
    /// `L_B` averaged over brother pairs and `L_C` over triples.
    Mean,
}

impl ScReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        }
    }
}

impl fmt::Display for ScReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScReduction {
    type Err = HcwError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(HcwError::validation(format!(
                "unknown reduction {other:?} (expected sum or mean)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub margin_brother: f64,
    pub margin_cousin: f64,
    /// Maximum anchors drawn per concept from one batch.
    pub pairs_per_batch: usize,
    pub reduction: ScReduction,
}

impl Default for ScLossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            margin_brother: 1.0,
            margin_cousin: 0.5,
            pairs_per_batch: 16,
            reduction: ScReduction::Mean,
        }
    }
}

impl ScLossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.beta >= 0.0
            && self.margin_brother >= 0.0
            && self.margin_cousin >= 0.0;
        if !ok {
            return Err(HcwError::validation(format!(
                "semantic-constraint weights and margins must be >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn pair_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(HcwError::validation(format!(
            "distance between vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(dist(u, v))
}

fn dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Adds `scale · ∂d(u, v)/∂u` to `gu` and the opposite to `gv`.
/// The derivative is taken as zero when `u == v`.
fn add_dist_grad(u: &[f64], v: &[f64], scale: f64, gu: &mut [f64], gv: &mut [f64]) {
    let d = dist(u, v);
    if d == 0.0 || scale == 0.0 {
        return;
    }
    for k in 0..u.len() {
        let g = scale * (u[k] - v[k]) / d;
        gu[k] += g;
        gv[k] -= g;
    }
}

fn zeros_like(batch: &[Vec<f64>]) -> Vec<Vec<f64>> {
    batch.iter().map(|v| vec![0.0; v.len()]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub grad_anchor: Vec<Vec<f64>>,
    pub grad_brother: Vec<Vec<f64>>,
}

/// `Σ_j Σ_k max{0, m_B − d(a_j, b_k)}`.
pub fn brother_loss(anchors: &[Vec<f64>], brothers: &[Vec<f64>], margin: f64) -> PairLoss {
    let mut out = PairLoss {
        value: 0.0,
        grad_anchor: zeros_like(anchors),
        grad_brother: zeros_like(brothers),
    };
    for (j, a) in anchors.iter().enumerate() {
        for (k, b) in brothers.iter().enumerate() {
            let slack = margin - dist(a, b);
            if slack > 0.0 {
                out.value += slack;
                add_dist_grad(
                    a,
                    b,
                    -1.0,
                    &mut out.grad_anchor[j],
                    &mut out.grad_brother[k],
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub value: f64,
    pub grad_anchor: Vec<Vec<f64>>,
    pub grad_brother: Vec<Vec<f64>>,
    pub grad_cousin: Vec<Vec<f64>>,
}

/// `Σ_j Σ_k Σ_l max{0, d(a_j, b_k) − d(a_j, c_l) + m_C}`.
pub fn cousin_triplet_loss(
    anchors: &[Vec<f64>],
    brothers: &[Vec<f64>],
    cousins: &[Vec<f64>],
    margin: f64,
) -> TripletLoss {
    let mut out = TripletLoss {
        value: 0.0,
        grad_anchor: zeros_like(anchors),
        grad_brother: zeros_like(brothers),
        grad_cousin: zeros_like(cousins),
    };
    for (j, a) in anchors.iter().enumerate() {
        for (k, b) in brothers.iter().enumerate() {
            let dab = dist(a, b);
            for (l, c) in cousins.iter().enumerate() {
                let slack = dab - dist(a, c) + margin;
                if slack > 0.0 {
                    out.value += slack;
                    add_dist_grad(a, b, 1.0, &mut out.grad_anchor[j], &mut out.grad_brother[k]);
                    add_dist_grad(a, c, -1.0, &mut out.grad_anchor[j], &mut out.grad_cousin[l]);
                }
            }
        }
    }
    out
}

/// Breakdown of one batch's semantic-constraint loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ScLossValue {
    pub total: f64,
    pub brother: f64,
    pub cousin: f64,
    pub brother_pairs: usize,
    pub triples: usize,
    /// Gradient with respect to each input vector.
    pub grads: Vec<Vec<f64>>,
}

/// Semantic-constraint loss over one batch of reduced activations.
///
/// Samples are grouped by label; every concept present acts as anchor group
/// (capped at `pairs_per_batch` samples). Brother and cousin groups are the
/// ones present in the same batch.
pub fn sc_loss(
    reduced: &[Vec<f64>],
    labels: &[ConceptId],
    tree: &ConceptTree,
    cfg: &ScLossConfig,
) -> Result<ScLossValue> {
    if reduced.len() != labels.len() {
        return Err(HcwError::validation(format!(
            "{} vectors but {} labels",
            reduced.len(),
            labels.len()
        )));
    }
    cfg.validate()?;
    let mut groups: BTreeMap<ConceptId, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        tree.node(l)?;
        groups.entry(l).or_default().push(i);
    }
    let mut result = ScLossValue {
        total: 0.0,
        brother: 0.0,
        cousin: 0.0,
        brother_pairs: 0,
        triples: 0,
        grads: zeros_like(reduced),
    };
    if cfg.alpha == 0.0 && cfg.beta == 0.0 {
        return Ok(result);
    }
    let take =
        |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| reduced[i].clone()).collect() };
    let scatter = |grads: &mut Vec<Vec<f64>>, idx: &[usize], g: &[Vec<f64>]| {
        for (&i, gi) in idx.iter().zip(g) {
            for (a, b) in grads[i].iter_mut().zip(gi) {
                *a += b;
            }
        }
    };
    let mut grad_b = zeros_like(reduced);
    let mut grad_c = zeros_like(reduced);

    for (&concept, members) in &groups {
        let rel = tree.relations(concept)?;
        let anchor_idx: Vec<usize> = members.iter().copied().take(cfg.pairs_per_batch).collect();
        if anchor_idx.is_empty() {
            continue;
        }
        let anchors = take(&anchor_idx);
        let cousin_idx: Vec<usize> = rel
            .cousins
            .iter()
            .filter_map(|c| groups.get(c))
            .flatten()
            .copied()
            .collect();
        let cousins = take(&cousin_idx);
        for b in &rel.brothers {
            let Some(brother_idx) = groups.get(b) else {
                continue;
            };
            let brothers = take(brother_idx);
            if cfg.alpha > 0.0 {
                let lb = brother_loss(&anchors, &brothers, cfg.margin_brother);
                result.brother += lb.value;
                result.brother_pairs += anchors.len() * brothers.len();
                scatter(&mut grad_b, &anchor_idx, &lb.grad_anchor);
                scatter(&mut grad_b, brother_idx, &lb.grad_brother);
            }
            if cfg.beta > 0.0 && !cousins.is_empty() {
                let lc = cousin_triplet_loss(&anchors, &brothers, &cousins, cfg.margin_cousin);
                result.cousin += lc.value;
                result.triples += anchors.len() * brothers.len() * cousins.len();
                scatter(&mut grad_c, &anchor_idx, &lc.grad_anchor);
                scatter(&mut grad_c, brother_idx, &lc.grad_brother);
                scatter(&mut grad_c, &cousin_idx, &lc.grad_cousin);
            }
        }
    }
    if cfg.reduction == ScReduction::Mean {
        result.brother /= result.brother_pairs.max(1) as f64;
        result.cousin /= result.triples.max(1) as f64;
    }
    let (wb, wc) = match cfg.reduction {
        ScReduction::Sum => (cfg.alpha, cfg.beta),
        ScReduction::Mean => (
            cfg.alpha / result.brother_pairs.max(1) as f64,
            cfg.beta / result.triples.max(1) as f64,
        ),
    };
    for ((g, b), c) in result.grads.iter_mut().zip(&grad_b).zip(&grad_c) {
        for ((gi, bi), ci) in g.iter_mut().zip(b).zip(c) {
            *gi = wb * bi + wc * ci;
        }
    }
    result.total = cfg.alpha * result.brother + cfg.beta * result.cousin;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vec<f64> {
        xs.to_vec()
    }

    #[test]
    fn distance_basics() {
        assert_eq!(pair_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(pair_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(pair_distance(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn brother_hinge_values() {
        let far = brother_loss(&[v(&[0.0, 0.0])], &[v(&[3.0, 0.0])], 1.0);
        assert_eq!(far.value, 0.0);
        let near = brother_loss(&[v(&[0.0, 0.0])], &[v(&[0.3, 0.0])], 1.0);
        assert!((near.value - 0.7).abs() < 1e-15);
        // Hinge pulls the pair apart: anchor gradient points toward the brother.
        assert!(near.grad_anchor[0][0] > 0.0 && near.grad_brother[0][0] < 0.0);
    }

    #[test]
    fn brother_two_by_two_by_hand() {
        let a = [v(&[0.0, 0.0]), v(&[1.0, 0.0])];
        let b = [v(&[0.0, 0.5]), v(&[1.0, 1.5])];
        // d: (a0,b0)=0.5, (a0,b1)=√3.25≈1.803, (a1,b0)=√1.25≈1.118, (a1,b1)=1.5 ; m=1.6
        let m = 1.6;
        let expect = (m - 0.5) + 0.0 + (m - 1.25f64.sqrt()) + (m - 1.5);
        let l = brother_loss(&a, &b, m);
        assert!((l.value - expect).abs() < 1e-14);
        check_pair_grads(&a, &b, m);
    }

    fn check_pair_grads(a: &[Vec<f64>], b: &[Vec<f64>], m: f64) {
        let l = brother_loss(a, b, m);
        let h = 1e-6;
        for (which, set) in [(0, a), (1, b)] {
            for i in 0..set.len() {
                for k in 0..set[i].len() {
                    let mut ap = a.to_vec();
                    let mut am = a.to_vec();
                    let mut bp = b.to_vec();
                    let mut bm = b.to_vec();
                    if which == 0 {
                        ap[i][k] += h;
                        am[i][k] -= h;
                    } else {
                        bp[i][k] += h;
                        bm[i][k] -= h;
                    }
                    let fd = (brother_loss(&ap, &bp, m).value - brother_loss(&am, &bm, m).value)
                        / (2.0 * h);
                    let an = if which == 0 {
                        l.grad_anchor[i][k]
                    } else {
                        l.grad_brother[i][k]
                    };
                    assert!(close(an, fd, 1e-6), "{an} vs {fd}");
                }
            }
        }
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        let diff = (a - b).abs();
        diff <= 1e-9 || diff / a.abs().max(b.abs()) <= rel
    }

    #[test]
    fn triplet_hinge_values() {
        // d(a,b)=0.2, d(a,c)=1.0, m=0.5 → 0
        let a = [v(&[0.0])];
        let t = cousin_triplet_loss(&a, &[v(&[0.2])], &[v(&[1.0])], 0.5);
        assert_eq!(t.value, 0.0);
        // d(a,b)=0.8, d(a,c)=1.0 → 0.3
        let t = cousin_triplet_loss(&a, &[v(&[0.8])], &[v(&[-1.0])], 0.5);
        assert!((t.value - 0.3).abs() < 1e-15);
    }

    #[test]
    fn triplet_two_one_two_by_hand() {
        let a = [v(&[0.0, 0.0]), v(&[2.0, 0.0])];
        let b = [v(&[1.0, 0.0])];
        let c = [v(&[0.0, 1.2]), v(&[3.0, 1.0])];
        let m = 0.5;
        let d = |x: &[f64], y: &[f64]| dist(x, y);
        let mut expect = 0.0;
        for aj in &a {
            for ck in &c {
                expect += (d(aj, &b[0]) - d(aj, ck) + m).max(0.0);
            }
        }
        let t = cousin_triplet_loss(&a, &b, &c, m);
        assert!((t.value - expect).abs() < 1e-14);
        // central differences on every coordinate of every input
        let h = 1e-6;
        let eval =
            |a: &[Vec<f64>], b: &[Vec<f64>], c: &[Vec<f64>]| cousin_triplet_loss(a, b, c, m).value;
        for set in 0..3 {
            let n = [a.len(), b.len(), c.len()][set];
            for i in 0..n {
                for k in 0..2 {
                    let mut p = [a.to_vec(), b.to_vec(), c.to_vec()];
                    let mut q = p.clone();
                    p[set][i][k] += h;
                    q[set][i][k] -= h;
                    let fd = (eval(&p[0], &p[1], &p[2]) - eval(&q[0], &q[1], &q[2])) / (2.0 * h);
                    let an = [&t.grad_anchor, &t.grad_brother, &t.grad_cousin][set][i][k];
                    assert!(close(an, fd, 1e-6), "set {set} {i} {k}: {an} vs {fd}");
                }
            }
        }
    }

    fn tiny_tree() -> ConceptTree {
        // R → {M1 → {X, Y}, M2 → {Z}}: X,Y brothers; Z is their cousin.
        ConceptTree::parse("R,-\nM1,R\nM2,R\nX,M1\nY,M1\nZ,M2").unwrap()
    }

    #[test]
    fn single_concept_batch_is_zero() {
        let t = tiny_tree();
        let x = t.lookup("X").unwrap();
        let vecs = vec![v(&[0.0, 0.0]), v(&[0.1, 0.0])];
        let out = sc_loss(&vecs, &[x, x], &t, &ScLossConfig::default()).unwrap();
        assert_eq!(out.total, 0.0);
    }

    #[test]
    fn zero_weights_give_zero() {
        let t = tiny_tree();
        let ids = [
            t.lookup("X").unwrap(),
            t.lookup("Y").unwrap(),
            t.lookup("Z").unwrap(),
        ];
        let vecs = vec![v(&[0.0]), v(&[0.1]), v(&[0.2])];
        let cfg = ScLossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let out = sc_loss(&vecs, &ids, &t, &cfg).unwrap();
        assert_eq!(out.total, 0.0);
        assert!(out.grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn scripted_batch_by_hand() {
        let t = tiny_tree();
        let (x, y, z) = (
            t.lookup("X").unwrap(),
            t.lookup("Y").unwrap(),
            t.lookup("Z").unwrap(),
        );
        // One X, one Y (brothers at distance 0.6) and one Z.
        let vecs = vec![v(&[0.0, 0.0]), v(&[0.6, 0.0]), v(&[0.0, 0.8])];
        let cfg = ScLossConfig {
            alpha: 0.7,
            beta: 1.3,
            margin_brother: 1.0,
            margin_cousin: 0.5,
            pairs_per_batch: 16,
            reduction: ScReduction::Sum,
        };
        let out = sc_loss(&vecs, &[x, y, z], &t, &cfg).unwrap();
        // L_B: anchor X→Y and anchor Y→X, each 1.0 − 0.6 = 0.4.
        let lb = 0.8;
        // L_C: anchor X: d(X,Y) − d(X,Z) + 0.5 = 0.6 − 0.8 + 0.5 = 0.3
        //      anchor Y: 0.6 − d(Y,Z)=1.0 → 0.6 − 1.0 + 0.5 = 0.1
        //      anchor Z has no brothers present.
        let lc = 0.4;
        assert!((out.brother - lb).abs() < 1e-14);
        assert!((out.cousin - lc).abs() < 1e-14);
        assert!((out.total - (0.7 * lb + 1.3 * lc)).abs() < 1e-14);
        assert_eq!((out.brother_pairs, out.triples), (2, 2));

        let mean = sc_loss(
            &vecs,
            &[x, y, z],
            &t,
            &ScLossConfig {
                reduction: ScReduction::Mean,
                ..cfg
            },
        )
        .unwrap();
        assert!((mean.brother - 0.4).abs() < 1e-14);
        assert!((mean.cousin - 0.2).abs() < 1e-14);
        for (gm, gs) in mean.grads.iter().flatten().zip(out.grads.iter().flatten()) {
            assert!((gm - gs / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sc_loss_gradient_matches_finite_differences() {
        let t = tiny_tree();
        let leaves = [
            t.lookup("X").unwrap(),
            t.lookup("Y").unwrap(),
            t.lookup("Z").unwrap(),
        ];
        let mut rng = SeededRng::new(6);
        let n = 7;
        let labels: Vec<ConceptId> = (0..n).map(|i| leaves[i % 3]).collect();
        let vecs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.uniform(-0.6, 0.6)).collect())
            .collect();
        for reduction in [ScReduction::Sum, ScReduction::Mean] {
            let cfg = ScLossConfig {
                reduction,
                ..Default::default()
            };
            let out = sc_loss(&vecs, &labels, &t, &cfg).unwrap();
            assert!(out.total > 0.0);
            let h = 1e-6;
            for i in 0..n {
                for k in 0..3 {
                    let mut p = vecs.clone();
                    let mut m = vecs.clone();
                    p[i][k] += h;
                    m[i][k] -= h;
                    let fd = (sc_loss(&p, &labels, &t, &cfg).unwrap().total
                        - sc_loss(&m, &labels, &t, &cfg).unwrap().total)
                        / (2.0 * h);
                    assert!(
                        close(out.grads[i][k], fd, 1e-6),
                        "{i},{k}: {} vs {fd}",
                        out.grads[i][k]
                    );
                }
            }
        }
    }

    #[test]
    fn anchor_cap_limits_pairs() {
        let t = tiny_tree();
        let (x, y) = (t.lookup("X").unwrap(), t.lookup("Y").unwrap());
        let vecs = vec![v(&[0.0]), v(&[0.0]), v(&[0.0]), v(&[0.5])];
        let labels = [x, x, x, y];
        let cfg = ScLossConfig {
            pairs_per_batch: 1,
            beta: 0.0,
            reduction: ScReduction::Sum,
            ..Default::default()
        };
        let out = sc_loss(&vecs, &labels, &t, &cfg).unwrap();
        // One X anchor against Y (0.5) plus the Y anchor against three Xs (3·0.5).
        assert!((out.brother - 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn nonnegative_and_rotation_invariant(
            coords in proptest::collection::vec(-2.0f64..2.0, 12),
            angle in 0.0f64..std::f64::consts::TAU,
        ) {
            let t = tiny_tree();
            let leaves = [t.lookup("X").unwrap(), t.lookup("Y").unwrap(), t.lookup("Z").unwrap()];
            let vecs: Vec<Vec<f64>> = coords.chunks(2).map(|c| c.to_vec()).collect();
            let labels: Vec<ConceptId> = (0..vecs.len()).map(|i| leaves[i % 3]).collect();
            let cfg = ScLossConfig::default();
            let base = sc_loss(&vecs, &labels, &t, &cfg).unwrap();
            prop_assert!(base.total >= 0.0);
            let (s, c) = angle.sin_cos();
            let rotated: Vec<Vec<f64>> = vecs.iter().map(|p| vec![c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
            let rot = sc_loss(&rotated, &labels, &t, &cfg).unwrap();
            prop_assert!((rot.total - base.total).abs() < 1e-9);
        }

        #[test]
        fn inactive_hinges_vanish(scale in 10.0f64..50.0) {
            // Brothers far apart, cousins much farther: every hinge inactive.
            let t = tiny_tree();
            let (x, y, z) = (t.lookup("X").unwrap(), t.lookup("Y").unwrap(), t.lookup("Z").unwrap());
            let vecs = vec![v(&[0.0, 0.0]), v(&[scale * 0.1, 0.0]), v(&[0.0, scale])];
            let out = sc_loss(&vecs, &[x, y, z], &t, &ScLossConfig::default()).unwrap();
            prop_assert_eq!(out.total, 0.0);
            prop_assert!(out.grads.iter().flatten().all(|&g| g == 0.0));
        }
    }
}
