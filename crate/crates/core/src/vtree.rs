//! Vtrees over sequence positions: full binary trees whose leaves biject with
//! the positions. Every scope split of a structured-decomposable circuit is
//! governed by one of these.
//!
//! Balanced vtrees additionally carry a leaf permutation mapping tree leaf
//! index to original sequence position; the two layouts used throughout are
//! the identity ("standard") layout and the bit-reversal pairing
//! ("shifted-induction") layout.

use crate::{Error, Result};

/// Scopes are bitmasks over positions, so everything here caps at 64
/// variables. Desk scale is far below that.
pub type Scope = u64;

pub const MAX_VARS: usize = 64;

pub fn scope_of(positions: impl IntoIterator<Item = usize>) -> Scope {
    let mut s = 0u64;
    for p in positions {
        assert!(p < MAX_VARS);
        s |= 1u64 << p;
    }
    s
}

pub fn scope_positions(s: Scope) -> Vec<usize> {
    (0..MAX_VARS).filter(|p| s & (1u64 << p) != 0).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VtreeNode {
    Leaf { pos: usize },
    Internal { left: usize, right: usize },
}

/// Full binary tree over positions. `nodes` is topologically ordered
/// (children precede parents) with the root last.
#[derive(Clone, Debug)]
pub struct Vtree {
    nodes: Vec<VtreeNode>,
    scopes: Vec<Scope>,
    parents: Vec<Option<usize>>,
    root: usize,
    /// tree leaf index -> original position; meaningful for balanced trees
    /// built from a permutation, identity-filled otherwise.
    perm: Vec<usize>,
    /// tree leaf index -> node id of that leaf.
    leaf_nodes: Vec<usize>,
}

/// A two-block partition of the positions, both sides nonempty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionCut {
    pub a: Scope,
    pub b: Scope,
}

impl PartitionCut {
    pub fn new(a: Scope, b: Scope) -> Result<Self> {
        if a == 0 || b == 0 {
            return Err(Error::ScopeMismatch("partition side is empty".into()));
        }
        if a & b != 0 {
            return Err(Error::ScopeMismatch("partition sides overlap".into()));
        }
        Ok(PartitionCut { a, b })
    }

    pub fn flip(self) -> Self {
        PartitionCut { a: self.b, b: self.a }
    }
}

impl Vtree {
    pub fn num_positions(&self) -> usize {
        self.perm.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, id: usize) -> &VtreeNode {
        &self.nodes[id]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn scope(&self, id: usize) -> Scope {
        self.scopes[id]
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.parents[id]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Node id of the tree leaf with the given leaf index.
    pub fn leaf_node(&self, leaf_idx: usize) -> usize {
        self.leaf_nodes[leaf_idx]
    }

    /// Ids in children-before-parents order.
    pub fn topo_order(&self) -> impl Iterator<Item = usize> + '_ {
        0..self.nodes.len()
    }

    /// The split `(scope(left), scope(right))` of an internal node.
    pub fn split(&self, id: usize) -> Option<(Scope, Scope)> {
        match self.nodes[id] {
            VtreeNode::Leaf { .. } => None,
            VtreeNode::Internal { left, right } => Some((self.scopes[left], self.scopes[right])),
        }
    }

    /// Looks up the node whose scope equals `s`, if any.
    pub fn node_with_scope(&self, s: Scope) -> Option<usize> {
        self.scopes.iter().position(|&sc| sc == s)
    }

    fn from_parts(nodes: Vec<VtreeNode>, perm: Vec<usize>) -> Self {
        let mut scopes = vec![0u64; nodes.len()];
        let mut parents = vec![None; nodes.len()];
        let mut leaf_nodes_by_pos: Vec<Option<usize>> = vec![None; perm.len()];
        for (id, node) in nodes.iter().enumerate() {
            match node {
                VtreeNode::Leaf { pos } => {
                    scopes[id] = 1u64 << pos;
                }
                VtreeNode::Internal { left, right } => {
                    debug_assert!(*left < id && *right < id, "children must precede parents");
                    debug_assert_eq!(scopes[*left] & scopes[*right], 0, "child scopes overlap");
                    scopes[id] = scopes[*left] | scopes[*right];
                    parents[*left] = Some(id);
                    parents[*right] = Some(id);
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if let VtreeNode::Leaf { pos } = node {
                leaf_nodes_by_pos[*pos] = Some(id);
            }
        }
        let leaf_nodes = perm
            .iter()
            .map(|&p| leaf_nodes_by_pos[p].expect("leaf for every position"))
            .collect();
        let root = nodes.len() - 1;
        Vtree { nodes, scopes, parents, root, perm, leaf_nodes }
    }

    /// Nested-parenthesis serialization: a leaf prints its position, an
    /// internal node prints `(left right)`. Golden tests and the CLI
    /// inspector compare these strings.
    pub fn to_text(&self) -> String {
        fn rec(v: &Vtree, id: usize, out: &mut String) {
            match v.nodes[id] {
                VtreeNode::Leaf { pos } => out.push_str(&pos.to_string()),
                VtreeNode::Internal { left, right } => {
                    out.push('(');
                    rec(v, left, out);
                    out.push(' ');
                    rec(v, right, out);
                    out.push(')');
                }
            }
        }
        let mut s = String::new();
        rec(self, self.root, &mut s);
        s
    }

    /// Canonical form: children of every internal node ordered by smallest
    /// position, so mirror trees print identically. The product scope split
    /// is an unordered pair for compatibility purposes; this is the matching
    /// canonical representation.
    pub fn to_canonical_text(&self) -> String {
        fn rec(v: &Vtree, id: usize, out: &mut String) {
            match v.nodes[id] {
                VtreeNode::Leaf { pos } => out.push_str(&pos.to_string()),
                VtreeNode::Internal { left, right } => {
                    let (first, second) =
                        if v.scopes[left].trailing_zeros() <= v.scopes[right].trailing_zeros() {
                            (left, right)
                        } else {
                            (right, left)
                        };
                    out.push('(');
                    rec(v, first, out);
                    out.push(' ');
                    rec(v, second, out);
                    out.push(')');
                }
            }
        }
        let mut s = String::new();
        rec(self, self.root, &mut s);
        s
    }
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::BadPermutation(format!("{perm:?}"), n));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::BadPermutation(format!("{perm:?}"), n));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Balanced vtree over `n` positions (a power of two) with tree leaf `i`
/// carrying original position `perm[i]`. Built by repeatedly pairing
/// adjacent nodes, so the depth is `log2(n)`.
pub fn build_balanced(n: usize, perm: &[usize]) -> Result<Vtree> {
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    if n > MAX_VARS {
        return Err(Error::BlowupGuard {
            what: "vtree positions",
            size: n as u128,
            limit: MAX_VARS as u128,
        });
    }
    check_perm(perm, n)?;
    let mut nodes: Vec<VtreeNode> = perm.iter().map(|&p| VtreeNode::Leaf { pos: p }).collect();
    let mut level: Vec<usize> = (0..n).collect();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len() / 2);
        for pair in level.chunks(2) {
            nodes.push(VtreeNode::Internal { left: pair[0], right: pair[1] });
            next.push(nodes.len() - 1);
        }
        level = next;
    }
    Ok(Vtree::from_parts(nodes, perm.to_vec()))
}

/// The identity layout.
pub fn standard_perm(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Pairs each prefix position with its copy target half a sequence away and
/// orders the pairs by bit reversal so the tree stays balanced: with
/// `h = n/2` and `r` the bit reversal of `0..h` on `log2(n) - 1` bits,
/// leaf `2k` carries `r[k]` and leaf `2k+1` carries `h + r[k]`.
pub fn shifted_induction_perm(n: usize) -> Result<Vec<usize>> {
    if n < 4 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    let h = n / 2;
    let bits = n.trailing_zeros() as usize - 1;
    let mut perm = Vec::with_capacity(n);
    for k in 0..h {
        let mut r = 0usize;
        for b in 0..bits {
            if k & (1 << b) != 0 {
                r |= 1 << (bits - 1 - b);
            }
        }
        perm.push(r);
        perm.push(h + r);
    }
    Ok(perm)
}

/// Future mask at prediction step `t`: entry `p` is true iff the original
/// position carried by tree leaf `p` is `>= t`, i.e. not yet observed and to
/// be marginalized.
pub fn future_mask(perm: &[usize], t: usize) -> Result<Vec<bool>> {
    let n = perm.len();
    if t > n {
        return Err(Error::StepOutOfRange { t, n });
    }
    Ok(perm.iter().map(|&orig| orig >= t).collect())
}

const ENUM_LIMIT: usize = 7;

/// All distinct vtrees (leaf-labeled full binary trees with unordered
/// children) over `n` variables. There are `(2n-3)!!` of them, which is why
/// `n` is capped at 7.
pub fn enumerate_vtrees(n: usize) -> Result<Vec<Vtree>> {
    if !(2..=ENUM_LIMIT).contains(&n) {
        return Err(Error::BlowupGuard {
            what: "vtree enumeration",
            size: n as u128,
            limit: ENUM_LIMIT as u128,
        });
    }
    // grow trees by inserting variable v into every edge (including above the
    // root) of every tree over 0..v; each unordered tree arises exactly once
    #[derive(Clone)]
    enum T {
        Leaf(usize),
        Node(Box<T>, Box<T>),
    }
    fn insert_everywhere(t: &T, v: usize, out: &mut Vec<T>) {
        out.push(T::Node(Box::new(t.clone()), Box::new(T::Leaf(v))));
        if let T::Node(l, r) = t {
            let mut ls = Vec::new();
            insert_everywhere(l, v, &mut ls);
            for nl in ls {
                out.push(T::Node(Box::new(nl), Box::new((**r).clone())));
            }
            let mut rs = Vec::new();
            insert_everywhere(r, v, &mut rs);
            for nr in rs {
                out.push(T::Node(Box::new((**l).clone()), Box::new(nr)));
            }
        }
    }
    let mut trees = vec![T::Leaf(0)];
    for v in 1..n {
        let mut next = Vec::new();
        for t in &trees {
            insert_everywhere(t, v, &mut next);
        }
        trees = next;
    }
    fn flatten(t: &T, nodes: &mut Vec<VtreeNode>) -> usize {
        match t {
            T::Leaf(p) => {
                nodes.push(VtreeNode::Leaf { pos: *p });
                nodes.len() - 1
            }
            T::Node(l, r) => {
                let li = flatten(l, nodes);
                let ri = flatten(r, nodes);
                nodes.push(VtreeNode::Internal { left: li, right: ri });
                nodes.len() - 1
            }
        }
    }
    let vtrees: Vec<Vtree> = trees
        .iter()
        .map(|t| {
            let mut nodes = Vec::new();
            flatten(t, &mut nodes);
            Vtree::from_parts(nodes, (0..n).collect())
        })
        .collect();
    // the construction is duplicate-free; canonical texts double-check that
    debug_assert_eq!(
        {
            let mut texts: Vec<String> = vtrees.iter().map(|v| v.to_canonical_text()).collect();
            texts.sort();
            texts.dedup();
            texts.len()
        },
        vtrees.len()
    );
    Ok(vtrees)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_perm_is_identity() {
        assert_eq!(standard_perm(4), vec![0, 1, 2, 3]);
        assert_eq!(standard_perm(2), vec![0, 1]);
        // composing with itself changes nothing
        let p = standard_perm(4);
        let composed: Vec<usize> = p.iter().map(|&i| p[i]).collect();
        assert_eq!(composed, p);
    }

    #[test]
    fn shifted_induction_small_cases() {
        assert_eq!(shifted_induction_perm(4).unwrap(), vec![0, 2, 1, 3]);
        assert_eq!(shifted_induction_perm(8).unwrap(), vec![0, 4, 2, 6, 1, 5, 3, 7]);
    }

    #[test]
    fn shifted_induction_pairs_across_halves() {
        for n in [4usize, 8, 16, 32] {
            let p = shifted_induction_perm(n).unwrap();
            for k in 0..n / 2 {
                assert_eq!(p[2 * k + 1] - p[2 * k], n / 2);
            }
            let mut inv = vec![0usize; n];
            for (i, &v) in p.iter().enumerate() {
                inv[v] = i;
            }
            for (i, &v) in p.iter().enumerate() {
                assert_eq!(inv[v], i);
            }
        }
    }

    #[test]
    fn balanced_two_leaves() {
        let v = build_balanced(2, &standard_perm(2)).unwrap();
        assert_eq!(v.to_text(), "(0 1)");
        assert_eq!(v.num_nodes(), 3);
    }

    #[test]
    fn balanced_four_splits_in_halves() {
        let v = build_balanced(4, &standard_perm(4)).unwrap();
        let (l, r) = v.split(v.root()).unwrap();
        assert_eq!(l, scope_of([0, 1]));
        assert_eq!(r, scope_of([2, 3]));
        assert_eq!(v.to_text(), "((0 1) (2 3))");
    }

    #[test]
    fn balanced_eight_induction_sibling_pairs() {
        let perm = shifted_induction_perm(8).unwrap();
        let v = build_balanced(8, &perm).unwrap();
        let mut pairs = Vec::new();
        for id in v.topo_order() {
            if let VtreeNode::Internal { left, right } = v.node(id) {
                if let (VtreeNode::Leaf { pos: a }, VtreeNode::Leaf { pos: b }) =
                    (v.node(*left), v.node(*right))
                {
                    pairs.push((*a, *b));
                }
            }
        }
        assert_eq!(pairs, vec![(0, 4), (2, 6), (1, 5), (3, 7)]);
    }

    #[test]
    fn balanced_rejects_non_power_of_two() {
        assert!(matches!(build_balanced(6, &standard_perm(6)), Err(Error::NotPowerOfTwo(6))));
        assert!(matches!(shifted_induction_perm(6), Err(Error::NotPowerOfTwo(6))));
    }

    #[test]
    fn scopes_partition_at_every_internal_node() {
        for perm in [standard_perm(8), shifted_induction_perm(8).unwrap()] {
            let v = build_balanced(8, &perm).unwrap();
            for id in v.topo_order() {
                if let Some((l, r)) = v.split(id) {
                    assert_eq!(l & r, 0);
                    assert_eq!(l | r, v.scope(id));
                }
            }
            assert_eq!(v.scope(v.root()), scope_of(0..8));
        }
    }

    #[test]
    fn future_mask_edges_and_counts() {
        let idp = standard_perm(8);
        assert_eq!(future_mask(&idp, 0).unwrap(), vec![true; 8]);
        assert_eq!(future_mask(&idp, 8).unwrap(), vec![false; 8]);
        assert!(future_mask(&idp, 9).is_err());

        let p = shifted_induction_perm(8).unwrap();
        let m = future_mask(&p, 2).unwrap();
        // exactly the leaves carrying original positions 0 and 1 are observed
        let observed: Vec<usize> = (0..8).filter(|&i| !m[i]).map(|i| p[i]).collect();
        assert_eq!(observed, vec![0, 1]);
    }

    #[test]
    fn vtree_counts_match_double_factorial() {
        assert_eq!(enumerate_vtrees(2).unwrap().len(), 1);
        assert_eq!(enumerate_vtrees(3).unwrap().len(), 3);
        assert_eq!(enumerate_vtrees(4).unwrap().len(), 15);
        assert_eq!(enumerate_vtrees(5).unwrap().len(), 105);
        assert!(enumerate_vtrees(8).is_err());
        assert!(enumerate_vtrees(1).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn future_mask_has_n_minus_t_true(k in 2usize..6, t_frac in 0.0f64..=1.0) {
                let n = 1usize << k;
                let perm = shifted_induction_perm(n).unwrap();
                let t = ((n as f64) * t_frac).round() as usize;
                let m = future_mask(&perm, t).unwrap();
                prop_assert_eq!(m.iter().filter(|&&b| b).count(), n - t);
            }

            #[test]
            fn random_perm_scopes_partition(seed in 0u64..1000) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut perm: Vec<usize> = (0..8).collect();
                perm.shuffle(&mut rng);
                let v = build_balanced(8, &perm).unwrap();
                for id in v.topo_order() {
                    if let Some((l, r)) = v.split(id) {
                        prop_assert_eq!(l & r, 0);
                        prop_assert_eq!(l | r, v.scope(id));
                    }
                }
            }
        }
    }
}
