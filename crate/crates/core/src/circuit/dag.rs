//! Generic probabilistic-circuit DAG: categorical or indicator inputs, sum
//! nodes with normalized log-weights, product nodes. Evaluation is exact and
//! entirely in log space.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::vtree::{scope_positions, Scope, Vtree};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum InputDist {
    /// Normalized log-probability table over the variable's values.
    Categorical { log_probs: Vec<f64> },
    /// One-hot on a designated value.
    Indicator { value: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum NodeKind {
    Input { var: usize, dist: InputDist },
    Sum { children: Vec<NodeId>, log_weights: Vec<f64> },
    Product { children: Vec<NodeId> },
}

/// Observation state of one variable during an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarState {
    Observed(usize),
    Marginalized,
}

const NORM_TOL: f64 = 1e-9;

/// Rooted DAG in children-before-parents order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Circuit {
    nodes: Vec<NodeKind>,
    root: NodeId,
    /// per-variable cardinality
    cards: Vec<usize>,
    #[serde(skip)]
    scopes: Vec<Scope>,
    /// attached when the circuit was built against a known vtree; raw
    /// documents reload without one and fall back to the implied check
    #[serde(skip)]
    vtree: Option<Vtree>,
}

pub struct CircuitBuilder {
    nodes: Vec<NodeKind>,
    scopes: Vec<Scope>,
    cards: Vec<usize>,
}

impl CircuitBuilder {
    pub fn new(cards: Vec<usize>) -> Self {
        assert!(!cards.is_empty() && cards.len() <= crate::vtree::MAX_VARS);
        CircuitBuilder { nodes: Vec::new(), scopes: Vec::new(), cards }
    }

    pub fn categorical(&mut self, var: usize, log_probs: Vec<f64>) -> NodeId {
        assert!(var < self.cards.len(), "variable {var} out of range");
        assert_eq!(log_probs.len(), self.cards[var], "table size vs cardinality");
        let lse = crate::diff::logsumexp_slice(log_probs.iter().cloned());
        assert!(
            lse.abs() <= NORM_TOL,
            "input table not normalized: logsumexp = {lse:e}"
        );
        self.push(NodeKind::Input { var, dist: InputDist::Categorical { log_probs } }, 1u64 << var)
    }

    pub fn indicator(&mut self, var: usize, value: usize) -> NodeId {
        assert!(var < self.cards.len() && value < self.cards[var]);
        self.push(NodeKind::Input { var, dist: InputDist::Indicator { value } }, 1u64 << var)
    }

    pub fn sum(&mut self, children: Vec<NodeId>, log_weights: Vec<f64>) -> NodeId {
        assert!(!children.is_empty());
        assert_eq!(children.len(), log_weights.len());
        let lse = crate::diff::logsumexp_slice(log_weights.iter().cloned());
        assert!(lse.abs() <= NORM_TOL, "sum weights not normalized: logsumexp = {lse:e}");
        let scope = children.iter().fold(0u64, |s, &c| s | self.scopes[c]);
        self.push(NodeKind::Sum { children, log_weights }, scope)
    }

    /// Sum node from unnormalized weights in probability space.
    pub fn sum_probs(&mut self, children: Vec<NodeId>, weights: &[f64]) -> NodeId {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0);
        let lw = weights.iter().map(|w| (w / total).ln()).collect();
        self.sum(children, lw)
    }

    pub fn product(&mut self, children: Vec<NodeId>) -> NodeId {
        assert!(!children.is_empty());
        let scope = children.iter().fold(0u64, |s, &c| s | self.scopes[c]);
        self.push(NodeKind::Product { children }, scope)
    }

    fn push(&mut self, node: NodeKind, scope: Scope) -> NodeId {
        if let NodeKind::Sum { children, .. } | NodeKind::Product { children } = &node {
            for &c in children {
                assert!(c < self.nodes.len(), "child {c} not yet defined");
            }
        }
        self.nodes.push(node);
        self.scopes.push(scope);
        self.nodes.len() - 1
    }

    pub fn finish(self, root: NodeId) -> Circuit {
        assert!(root < self.nodes.len());
        Circuit { nodes: self.nodes, root, cards: self.cards, scopes: self.scopes, vtree: None }
    }

    pub fn finish_with_vtree(self, root: NodeId, vtree: Vtree) -> Circuit {
        let mut c = self.finish(root);
        c.vtree = Some(vtree);
        c
    }
}

/// Result of the structural checks, with the first offending node per check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationReport {
    pub decomposable_violation: Option<NodeId>,
    pub smoothness_violation: Option<NodeId>,
    pub structured_violation: Option<NodeId>,
}

impl ValidationReport {
    pub fn decomposable(&self) -> bool {
        self.decomposable_violation.is_none()
    }

    pub fn smooth(&self) -> bool {
        self.smoothness_violation.is_none()
    }

    pub fn structured(&self) -> bool {
        self.structured_violation.is_none()
    }
}

impl Circuit {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &NodeKind {
        &self.nodes[id]
    }

    pub fn scope(&self, id: NodeId) -> Scope {
        self.scopes[id]
    }

    pub fn num_vars(&self) -> usize {
        self.cards.len()
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn vtree(&self) -> Option<&Vtree> {
        self.vtree.as_ref()
    }

    pub fn attach_vtree(&mut self, vtree: Vtree) {
        self.vtree = Some(vtree);
    }

    /// Restores the derived scope cache after deserialization.
    pub fn rebuild_scopes(&mut self) {
        let mut scopes = vec![0u64; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            scopes[id] = match node {
                NodeKind::Input { var, .. } => 1u64 << var,
                NodeKind::Sum { children, .. } | NodeKind::Product { children } => {
                    children.iter().fold(0u64, |s, &c| s | scopes[c])
                }
            };
        }
        self.scopes = scopes;
    }

    pub fn to_json(&self) -> Result<String> {
        for node in &self.nodes {
            let finite = match node {
                NodeKind::Input { dist: InputDist::Categorical { log_probs }, .. } => {
                    log_probs.iter().all(|v| v.is_finite())
                }
                NodeKind::Sum { log_weights, .. } => log_weights.iter().all(|v| v.is_finite()),
                _ => true,
            };
            if !finite {
                return Err(Error::NonFinite("circuit parameters for JSON document".into()));
            }
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: Circuit = serde_json::from_str(text)?;
        if c.nodes.is_empty() || c.root >= c.nodes.len() {
            return Err(Error::BadDocument("empty circuit or dangling root".into()));
        }
        for (id, node) in c.nodes.iter().enumerate() {
            if let NodeKind::Sum { children, .. } | NodeKind::Product { children } = node {
                if children.iter().any(|&ch| ch >= id) {
                    return Err(Error::BadDocument(format!("node {id} references a later child")));
                }
            }
        }
        c.rebuild_scopes();
        Ok(c)
    }

    fn check_tokens(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.cards.len() {
            return Err(Error::InvalidConfig(format!(
                "assignment over {} variables, circuit has {}",
                x.len(),
                self.cards.len()
            )));
        }
        for (v, (&t, &card)) in x.iter().zip(&self.cards).enumerate() {
            if t >= card {
                let _ = v;
                return Err(Error::TokenOutOfRange { token: t, vocab: card });
            }
        }
        Ok(())
    }

    /// Exact log-probability of one evaluation state, with optional forced
    /// values on individual nodes (used for interface injections).
    pub fn eval_log(&self, states: &[VarState], overrides: Option<&HashMap<NodeId, f64>>) -> f64 {
        assert_eq!(states.len(), self.cards.len());
        let mut vals = vec![0.0f64; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(ovr) = overrides {
                if let Some(&v) = ovr.get(&id) {
                    vals[id] = v;
                    continue;
                }
            }
            vals[id] = match node {
                NodeKind::Input { var, dist } => match states[*var] {
                    VarState::Marginalized => 0.0,
                    VarState::Observed(x) => match dist {
                        InputDist::Categorical { log_probs } => log_probs[x],
                        InputDist::Indicator { value } => {
                            if x == *value {
                                0.0
                            } else {
                                f64::NEG_INFINITY
                            }
                        }
                    },
                },
                NodeKind::Sum { children, log_weights } => crate::diff::logsumexp_slice(
                    children.iter().zip(log_weights).map(|(&c, &w)| vals[c] + w),
                ),
                NodeKind::Product { children } => children.iter().map(|&c| vals[c]).sum(),
            };
        }
        vals[self.root]
    }

    /// Exact `log p(x)` of a full assignment.
    pub fn log_prob(&self, x: &[usize]) -> Result<f64> {
        self.check_tokens(x)?;
        let states: Vec<VarState> = x.iter().map(|&t| VarState::Observed(t)).collect();
        Ok(self.eval_log(&states, None))
    }

    /// Exact `log p(x_observed)` with `marginalized[v]` dropping variable `v`.
    pub fn marginal_log_prob(&self, x: &[usize], marginalized: &[bool]) -> Result<f64> {
        self.check_tokens(x)?;
        assert_eq!(marginalized.len(), x.len());
        let states: Vec<VarState> = x
            .iter()
            .zip(marginalized)
            .map(|(&t, &m)| if m { VarState::Marginalized } else { VarState::Observed(t) })
            .collect();
        Ok(self.eval_log(&states, None))
    }

    /// Exact autoregressive conditional `p(X_t | x_{<t})` with every later
    /// variable marginalized; `t = prefix.len()`.
    pub fn next_token_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let n = self.cards.len();
        let t = prefix.len();
        if t >= n {
            return Err(Error::StepOutOfRange { t, n });
        }
        for (v, &tok) in prefix.iter().enumerate() {
            if tok >= self.cards[v] {
                return Err(Error::TokenOutOfRange { token: tok, vocab: self.cards[v] });
            }
        }
        let mut states: Vec<VarState> = Vec::with_capacity(n);
        states.extend(prefix.iter().map(|&p| VarState::Observed(p)));
        states.extend(std::iter::repeat(VarState::Marginalized).take(n - t));
        let v = self.cards[t];
        let mut scores = Vec::with_capacity(v);
        for cand in 0..v {
            states[t] = VarState::Observed(cand);
            scores.push(self.eval_log(&states, None));
        }
        let lse = crate::diff::logsumexp_slice(scores.iter().cloned());
        Ok(scores.into_iter().map(|s| (s - lse).exp()).collect())
    }

    /// Mean `-ln p(x_t | x_{<t})` over the batch's masked positions.
    pub fn sequence_nll(&self, batch: &crate::data::SequenceBatch) -> Result<f64> {
        if batch.n != self.cards.len() {
            return Err(Error::InvalidConfig("batch length vs circuit variables".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..batch.rows() {
            let row: Vec<usize> = batch.row_tokens(r).iter().map(|&t| t as usize).collect();
            for t in 0..batch.n {
                if !batch.row_mask(r)[t] {
                    continue;
                }
                let dist = self.next_token_distribution(&row[..t])?;
                total -= dist[row[t]].ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(total / count as f64)
    }

    /// Structural checks: decomposability, sum smoothness, and structuredness
    /// (against the attached vtree when present, otherwise whether any single
    /// vtree could license every product split).
    pub fn validate(&self) -> ValidationReport {
        let mut decomposable_violation = None;
        let mut smoothness_violation = None;
        for (id, node) in self.nodes.iter().enumerate() {
            match node {
                NodeKind::Product { children } => {
                    'outer: for (i, &a) in children.iter().enumerate() {
                        for &b in &children[i + 1..] {
                            if self.scopes[a] & self.scopes[b] != 0 {
                                decomposable_violation.get_or_insert(id);
                                break 'outer;
                            }
                        }
                    }
                }
                NodeKind::Sum { children, .. } => {
                    let s0 = self.scopes[children[0]];
                    if children.iter().any(|&c| self.scopes[c] != s0) {
                        smoothness_violation.get_or_insert(id);
                    }
                }
                NodeKind::Input { .. } => {}
            }
        }
        let structured_violation = if decomposable_violation.is_some() {
            decomposable_violation
        } else {
            self.structured_violation()
        };
        ValidationReport { decomposable_violation, smoothness_violation, structured_violation }
    }

    fn product_constraints(&self) -> Vec<(NodeId, Scope, Vec<Scope>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match n {
                NodeKind::Product { children } if children.len() >= 2 => Some((
                    id,
                    self.scopes[id],
                    children.iter().map(|&c| self.scopes[c]).collect(),
                )),
                _ => None,
            })
            .collect()
    }

    fn structured_violation(&self) -> Option<NodeId> {
        let constraints = self.product_constraints();
        match &self.vtree {
            Some(vt) => constraints
                .iter()
                .find(|(_, scope, parts)| !vtree_refines(vt, *scope, parts))
                .map(|(id, _, _)| *id),
            None => common_refinement_violation(&constraints),
        }
    }

    /// True when every product split follows the given vtree. Multi-child
    /// products count as compatible when the vtree's recursive partition of
    /// their scope refines the child scopes.
    pub fn compatible_with(&self, vtree: &Vtree) -> bool {
        self.product_constraints()
            .iter()
            .all(|(_, scope, parts)| vtree_refines(vtree, *scope, parts))
    }
}

/// Does the vtree's recursive split of `scope` refine `parts`
/// (a partition of `scope`)? Left/right orientation is immaterial.
pub(crate) fn vtree_refines(vt: &Vtree, scope: Scope, parts: &[Scope]) -> bool {
    if parts.len() == 1 {
        return parts[0] == scope;
    }
    let Some(v) = vt.node_with_scope(scope) else {
        return false;
    };
    let Some((l, r)) = vt.split(v) else {
        return false;
    };
    let mut parts_l = Vec::new();
    let mut parts_r = Vec::new();
    for &p in parts {
        if p & l == p {
            parts_l.push(p);
        } else if p & r == p {
            parts_r.push(p);
        } else {
            return false; // straddles the split
        }
    }
    if parts_l.is_empty() || parts_r.is_empty() {
        return false;
    }
    vtree_refines(vt, l, &parts_l) && vtree_refines(vt, r, &parts_r)
}

/// Whether a single vtree could license every product constraint; returns the
/// offending product when not. Works top-down: at each scope the blocks that
/// may not be straddled (child scopes of products at this scope, plus whole
/// scopes of products strictly inside) are merged with union-find; if they
/// merge into a single group no split exists.
fn common_refinement_violation(constraints: &[(NodeId, Scope, Vec<Scope>)]) -> Option<NodeId> {
    fn solve(scope: Scope, active: &[(NodeId, Scope, Vec<Scope>)]) -> Option<NodeId> {
        if scope.count_ones() <= 1 || active.is_empty() {
            return None;
        }
        let vars = scope_positions(scope);
        let mut blocks: Vec<(Scope, NodeId)> = Vec::new();
        let mut exact: Vec<&(NodeId, Scope, Vec<Scope>)> = Vec::new();
        for c in active {
            if c.1 == scope {
                for &p in &c.2 {
                    if p != scope {
                        blocks.push((p, c.0));
                    }
                }
                exact.push(c);
            } else {
                blocks.push((c.1, c.0));
            }
        }
        if blocks.is_empty() {
            return None;
        }
        // union-find over the variables of `scope`
        let mut parent: HashMap<usize, usize> = vars.iter().map(|&v| (v, v)).collect();
        fn find(parent: &mut HashMap<usize, usize>, v: usize) -> usize {
            let p = parent[&v];
            if p == v {
                v
            } else {
                let r = find(parent, p);
                parent.insert(v, r);
                r
            }
        }
        let mut last_block_src = blocks[0].1;
        for (b, src) in &blocks {
            let bv = scope_positions(*b);
            for w in &bv[1..] {
                let (ra, rb) = (find(&mut parent, bv[0]), find(&mut parent, *w));
                if ra != rb {
                    parent.insert(ra, rb);
                }
            }
            last_block_src = *src;
        }
        let mut groups: HashMap<usize, Scope> = HashMap::new();
        for &v in &vars {
            let r = find(&mut parent, v);
            *groups.entry(r).or_insert(0) |= 1u64 << v;
        }
        if groups.len() < 2 {
            // every variable is glued together: no split can avoid straddling
            return Some(exact.first().map(|c| c.0).unwrap_or(last_block_src));
        }
        // split off one group at a time; groups are mutually unconstrained
        for (_, gscope) in groups {
            let inside: Vec<(NodeId, Scope, Vec<Scope>)> = active
                .iter()
                .filter(|c| c.1 & gscope == c.1 && c.1 != scope)
                .cloned()
                .collect();
            // products with scope == `scope` induce sub-constraints over the
            // parts that landed in this group
            let mut derived = inside;
            for c in &exact {
                let sub: Vec<Scope> = c.2.iter().copied().filter(|&p| p & gscope == p).collect();
                if sub.len() >= 2 {
                    derived.push((c.0, gscope, sub));
                }
            }
            if let Some(bad) = solve(gscope, &derived) {
                return Some(bad);
            }
        }
        None
    }

    if constraints.is_empty() {
        return None;
    }
    // one solve over the union scope; strictly contained scopes enter as
    // unbreakable blocks, so partially overlapping scopes merge and fail
    let top = constraints.iter().fold(0u64, |s, (_, sc, _)| s | sc);
    solve(top, constraints)
}

/// Root-level mixture of circuits over identical variables. The result is
/// decomposable when the components are; it is generally not
/// structured-decomposable when components follow different vtrees.
pub fn mix(components: &[&Circuit], log_weights: &[f64]) -> Result<Circuit> {
    if components.is_empty() || components.len() != log_weights.len() {
        return Err(Error::InvalidConfig("mix needs one weight per component".into()));
    }
    let cards = components[0].cards.clone();
    let scope = components[0].scopes[components[0].root];
    for c in components {
        if c.cards != cards {
            return Err(Error::ScopeMismatch("components over different variables".into()));
        }
        if c.scopes[c.root] != scope {
            return Err(Error::ScopeMismatch("component root scopes differ".into()));
        }
    }
    let lse = crate::diff::logsumexp_slice(log_weights.iter().cloned());
    if lse.abs() > NORM_TOL {
        return Err(Error::InvalidConfig(format!("mixture weights not normalized ({lse:e})")));
    }
    let mut nodes = Vec::new();
    let mut scopes = Vec::new();
    let mut roots = Vec::new();
    for c in components {
        let offset = nodes.len();
        for node in &c.nodes {
            let remapped = match node {
                NodeKind::Input { .. } => node.clone(),
                NodeKind::Sum { children, log_weights } => NodeKind::Sum {
                    children: children.iter().map(|&x| x + offset).collect(),
                    log_weights: log_weights.clone(),
                },
                NodeKind::Product { children } => NodeKind::Product {
                    children: children.iter().map(|&x| x + offset).collect(),
                },
            };
            nodes.push(remapped);
        }
        scopes.extend_from_slice(&c.scopes);
        roots.push(c.root + offset);
    }
    nodes.push(NodeKind::Sum { children: roots, log_weights: log_weights.to_vec() });
    scopes.push(scope);
    let root = nodes.len() - 1;
    Ok(Circuit { nodes, root, cards, scopes, vtree: None })
}

/// The latent readout at one prediction position: states, emission matrix
/// and posterior, with `predict() == W e` reproducing the exact conditional.
#[derive(Clone, Debug)]
pub struct LatentInterface {
    pub t: usize,
    /// input nodes acting as the latent states, in node order
    pub states: Vec<NodeId>,
    /// `vocab x k`, row-major; columns are categorical distributions
    pub emission: Vec<f64>,
    pub vocab: usize,
    /// posterior over the k states given the prefix
    pub posterior: Vec<f64>,
}

impl LatentInterface {
    pub fn k(&self) -> usize {
        self.states.len()
    }

    /// `W e`: the mixture prediction over the vocabulary.
    pub fn predict(&self) -> Vec<f64> {
        let k = self.k();
        (0..self.vocab)
            .map(|v| (0..k).map(|j| self.emission[v * k + j] * self.posterior[j]).sum())
            .collect()
    }
}

impl Circuit {
    /// Splits the next-token computation at position `t` into an emission
    /// matrix over the position's input nodes and a posterior given the
    /// prefix. Relies on smoothness and decomposability, which make the root
    /// linear in the position-`t` input values.
    pub fn extract_latent_interface(&self, t: usize, prefix: &[usize]) -> Result<LatentInterface> {
        let n = self.cards.len();
        if t >= n {
            return Err(Error::StepOutOfRange { t, n });
        }
        if prefix.len() != t {
            return Err(Error::InvalidConfig(format!(
                "prefix of length {} for position {t}",
                prefix.len()
            )));
        }
        let states_nodes: Vec<NodeId> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, node)| match node {
                NodeKind::Input { var, .. } if *var == t => Some(id),
                _ => None,
            })
            .collect();
        if states_nodes.is_empty() {
            return Err(Error::InvalidConfig(format!("no input nodes for position {t}")));
        }
        let vocab = self.cards[t];
        let k = states_nodes.len();
        let mut emission = vec![0.0; vocab * k];
        for (j, &id) in states_nodes.iter().enumerate() {
            if let NodeKind::Input { dist, .. } = &self.nodes[id] {
                match dist {
                    InputDist::Categorical { log_probs } => {
                        for v in 0..vocab {
                            emission[v * k + j] = log_probs[v].exp();
                        }
                    }
                    InputDist::Indicator { value } => emission[*value * k + j] = 1.0,
                }
            }
        }
        // basis injection: force state j to 1 and the others to 0, prefix
        // observed, future marginalized; the root value is then the linear
        // coefficient of state j
        let mut eval_states: Vec<VarState> = Vec::with_capacity(n);
        eval_states.extend(prefix.iter().map(|&p| VarState::Observed(p)));
        eval_states.extend(std::iter::repeat(VarState::Marginalized).take(n - t));
        let mut log_beta = Vec::with_capacity(k);
        for j in 0..k {
            let overrides: HashMap<NodeId, f64> = states_nodes
                .iter()
                .enumerate()
                .map(|(jj, &id)| (id, if jj == j { 0.0 } else { f64::NEG_INFINITY }))
                .collect();
            log_beta.push(self.eval_log(&eval_states, Some(&overrides)));
        }
        let lse = crate::diff::logsumexp_slice(log_beta.iter().cloned());
        if lse == f64::NEG_INFINITY {
            return Err(Error::NonFinite("interface posterior has zero mass".into()));
        }
        let posterior: Vec<f64> = log_beta.iter().map(|&b| (b - lse).exp()).collect();
        Ok(LatentInterface { t, states: states_nodes, emission, vocab, posterior })
    }
}
