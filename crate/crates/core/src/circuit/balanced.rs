//! Balanced-tree structured-decomposable PCs.
//!
//! The architecture alternates a sum layer and a product layer per tree
//! level: at each internal vtree node, each child's `C` channels are first
//! remixed by a `C x C` weight matrix (one per side), then combined
//! channelwise by a product. A final root sum with a learned `C`-vector
//! yields the scalar. Leaves are per-position, per-channel categorical
//! tables over the vocabulary.
//!
//! Sum weights and leaf rows live as unconstrained logits mapped through
//! log-softmax, so the simplex constraints hold exactly under gradient
//! training. Everything evaluates in log space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::dag::{Circuit, CircuitBuilder, VarState};
use crate::data::SequenceBatch;
use crate::diff::{logsumexp_slice, Tape, TensorId};
use crate::params::{ParamBinding, ParamSet};
use crate::vtree::{build_balanced, future_mask, Vtree, VtreeNode};
use crate::{Error, Result};

const INIT_SCALE: f64 = 0.1;

/// Architecture of a balanced-tree PC, independent of any parameter values.
/// Mixtures reuse one structure per component against a pooled parameter set.
#[derive(Clone, Debug)]
pub struct PcStructure {
    n: usize,
    vocab: usize,
    channels: usize,
    vtree: Vtree,
    /// vtree internal node id -> (stage, index within stage)
    stage_of: Vec<Option<(usize, usize)>>,
    num_stages: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcConfig {
    pub n: usize,
    pub vocab: usize,
    pub channels: usize,
    pub perm: Vec<usize>,
}

impl PcStructure {
    pub fn new(n: usize, vocab: usize, channels: usize, perm: &[usize]) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidConfig(format!("vocabulary {vocab} too small")));
        }
        if channels < 1 {
            return Err(Error::InvalidConfig("channel count must be positive".into()));
        }
        let vtree = build_balanced(n, perm)?;
        let num_stages = n.trailing_zeros() as usize;
        // balanced construction lays out internals level by level after the
        // n leaves, so stage membership is positional
        let mut stage_of = vec![None; vtree.num_nodes()];
        let mut id = n;
        for s in 0..num_stages {
            let m2 = n >> (s + 1);
            for idx in 0..m2 {
                stage_of[id] = Some((s, idx));
                id += 1;
            }
        }
        debug_assert_eq!(id, vtree.num_nodes());
        Ok(PcStructure { n, vocab, channels, vtree, stage_of, num_stages })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn vtree(&self) -> &Vtree {
        &self.vtree
    }

    pub fn perm(&self) -> &[usize] {
        self.vtree.perm()
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn config(&self) -> PcConfig {
        PcConfig {
            n: self.n,
            vocab: self.vocab,
            channels: self.channels,
            perm: self.perm().to_vec(),
        }
    }

    /// Stage and intra-stage index of an internal vtree node.
    pub fn stage_of(&self, vtree_node: usize) -> Option<(usize, usize)> {
        self.stage_of[vtree_node]
    }

    fn leaf_name(prefix: &str) -> String {
        format!("{prefix}leaf")
    }

    fn sum_name(prefix: &str, stage: usize, side: &str) -> String {
        format!("{prefix}sum_{side}{stage}")
    }

    fn root_name(prefix: &str) -> String {
        format!("{prefix}root")
    }

    /// Fresh Gaussian-initialized parameters (scale 0.1).
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = self.channels;
        ps.insert_gaussian("leaf", vec![self.n, c, self.vocab], INIT_SCALE, &mut rng);
        for s in 0..self.num_stages {
            let m2 = self.n >> (s + 1);
            ps.insert_gaussian(&Self::sum_name("", s, "l"), vec![m2, c, c], INIT_SCALE, &mut rng);
            ps.insert_gaussian(&Self::sum_name("", s, "r"), vec![m2, c, c], INIT_SCALE, &mut rng);
        }
        ps.insert_gaussian("root", vec![c], INIT_SCALE, &mut rng);
        ps
    }

    // -- f64 evaluation ----------------------------------------------------

    /// Normalized leaf log-tables `[n][c][vocab]`, tree-leaf order.
    pub fn leaf_log_tables(&self, params: &ParamSet, prefix: &str) -> Vec<f64> {
        let raw = &params.get(&Self::leaf_name(prefix)).values;
        log_softmax_rows(raw, self.vocab)
    }

    fn stage_log_weights(&self, params: &ParamSet, prefix: &str, s: usize, side: &str) -> Vec<f64> {
        let raw = &params.get(&Self::sum_name(prefix, s, side)).values;
        log_softmax_rows(raw, self.channels)
    }

    fn root_log_weights(&self, params: &ParamSet, prefix: &str) -> Vec<f64> {
        let raw = &params.get(&Self::root_name(prefix)).values;
        log_softmax_rows(raw, self.channels)
    }

    /// Log channel values for every vtree node under the given observation
    /// states (indexed by original position), optionally forcing the channel
    /// vector of one node. Returns `[num_nodes][channels]`, flattened.
    pub fn node_channel_values(
        &self,
        params: &ParamSet,
        prefix: &str,
        states: &[VarState],
        force: Option<(usize, &[f64])>,
    ) -> Vec<f64> {
        assert_eq!(states.len(), self.n);
        let c = self.channels;
        let tables = self.leaf_log_tables(params, prefix);
        let mut vals = vec![0.0f64; self.vtree.num_nodes() * c];
        let mut weights: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.num_stages);
        for s in 0..self.num_stages {
            weights.push((
                self.stage_log_weights(params, prefix, s, "l"),
                self.stage_log_weights(params, prefix, s, "r"),
            ));
        }
        for id in self.vtree.topo_order() {
            if let Some((fid, fvals)) = force {
                if fid == id {
                    vals[id * c..(id + 1) * c].copy_from_slice(fvals);
                    continue;
                }
            }
            match *self.vtree.node(id) {
                VtreeNode::Leaf { pos } => {
                    // leaf tables are stored by tree leaf index
                    let leaf_idx = id; // leaves occupy ids 0..n in tree order
                    match states[pos] {
                        VarState::Marginalized => {
                            for ch in 0..c {
                                vals[id * c + ch] = 0.0;
                            }
                        }
                        VarState::Observed(tok) => {
                            for ch in 0..c {
                                vals[id * c + ch] =
                                    tables[(leaf_idx * c + ch) * self.vocab + tok];
                            }
                        }
                    }
                }
                VtreeNode::Internal { left, right } => {
                    let (s, idx) = self.stage_of[id].expect("internal node has a stage");
                    let (wl, wr) = &weights[s];
                    for co in 0..c {
                        let l = logsumexp_slice(
                            (0..c).map(|ci| wl[(idx * c + co) * c + ci] + vals[left * c + ci]),
                        );
                        let r = logsumexp_slice(
                            (0..c).map(|ci| wr[(idx * c + co) * c + ci] + vals[right * c + ci]),
                        );
                        vals[id * c + co] = l + r;
                    }
                }
            }
        }
        vals
    }

    /// Root log-score from precomputed node channel values.
    pub fn root_score(&self, params: &ParamSet, prefix: &str, node_vals: &[f64]) -> f64 {
        let c = self.channels;
        let rw = self.root_log_weights(params, prefix);
        let root = self.vtree.root();
        logsumexp_slice((0..c).map(|ch| rw[ch] + node_vals[root * c + ch]))
    }

    fn eval_states(&self, params: &ParamSet, prefix: &str, states: &[VarState]) -> f64 {
        let vals = self.node_channel_values(params, prefix, states, None);
        self.root_score(params, prefix, &vals)
    }

    /// `log p(x_{<t}, rest marginalized)` for `t = 0..=n`.
    pub fn prefix_scores(&self, params: &ParamSet, prefix: &str, x: &[u32]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..=self.n)
            .map(|t| {
                let states: Vec<VarState> = (0..self.n)
                    .map(|p| {
                        if p < t {
                            VarState::Observed(x[p] as usize)
                        } else {
                            VarState::Marginalized
                        }
                    })
                    .collect();
                self.eval_states(params, prefix, &states)
            })
            .collect()
    }

    // -- tape evaluation ----------------------------------------------------

    /// Records `log p(x_{<t}, rest marginalized)` for every row and every
    /// `t = 0..=n` onto the tape; output is `[rows, n+1]`.
    ///
    /// The observation pattern enters only at the leaves: a marginalized
    /// leaf contributes log 1 = 0, which is the leaf value multiplied by an
    /// indicator, so one gather feeds all n+1 prefix configurations.
    pub fn prefix_scores_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        prefix: &str,
        batch: &SequenceBatch,
    ) -> TensorId {
        assert_eq!(batch.n, self.n);
        assert!(batch.vocab <= self.vocab, "batch vocabulary exceeds model");
        let (n, c, v) = (self.n, self.channels, self.vocab);
        let rows = batch.rows();
        let perm = self.perm().to_vec();

        let tables = {
            let leaf = binding.id(&Self::leaf_name(prefix));
            let flat = tape.reshape(leaf, vec![n * c, v]);
            let ls = tape.log_softmax(flat);
            tape.reshape(ls, vec![n, c, v])
        };
        // tokens rearranged to tree-leaf order so the gather lines up with
        // the leaf tables
        let mut tok_tree = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = batch.row_tokens(r);
            for i in 0..n {
                tok_tree.push(row[perm[i]] as usize);
            }
        }
        let gathered = tape.gather_token(tables, &tok_tree, rows); // [rows, n, c]
        let g_flat = tape.reshape(gathered, vec![rows, n * c]);

        let mut stage_w = Vec::with_capacity(self.num_stages);
        for s in 0..self.num_stages {
            let m2 = n >> (s + 1);
            let mk = |tape: &mut Tape, name: String| {
                let raw = binding.id(&name);
                let flat = tape.reshape(raw, vec![m2 * c, c]);
                let ls = tape.log_softmax(flat);
                tape.reshape(ls, vec![m2, c, c])
            };
            let wl = mk(tape, Self::sum_name(prefix, s, "l"));
            let wr = mk(tape, Self::sum_name(prefix, s, "r"));
            stage_w.push((wl, wr));
        }
        let root_w = {
            let raw = binding.id(&Self::root_name(prefix));
            let ls = tape.log_softmax(raw);
            tape.reshape(ls, vec![1, 1, c])
        };

        let mut scores = Vec::with_capacity(n + 1);
        for t in 0..=n {
            let fm = future_mask(&perm, t).expect("t in range");
            let mut mask = Vec::with_capacity(n * c);
            for i in 0..n {
                let keep = if fm[i] { 0.0 } else { 1.0 };
                mask.extend(std::iter::repeat(keep).take(c));
            }
            let m = tape.constant(vec![n * c], mask);
            let masked = tape.mul(g_flat, m);
            let mut x = tape.reshape(masked, vec![rows, n, c]);
            for (s, &(wl, wr)) in stage_w.iter().enumerate() {
                let m_in = n >> s;
                let evens: Vec<usize> = (0..m_in).step_by(2).collect();
                let odds: Vec<usize> = (1..m_in).step_by(2).collect();
                let even = tape.index_select(x, 1, &evens);
                let odd = tape.index_select(x, 1, &odds);
                let l = tape.log_mix(even, wl);
                let r = tape.log_mix(odd, wr);
                x = tape.add(l, r);
            }
            let rooted = tape.log_mix(x, root_w); // [rows, 1, 1]
            scores.push(tape.reshape(rooted, vec![rows]));
        }
        let stacked = tape.stack_last(&scores); // [rows, n+1]
        stacked
    }

    /// Per-position conditionals `log p(x_t | x_{<t})` as `[rows, n]`.
    pub fn conditionals_from_scores(tape: &mut Tape, scores: TensorId, n: usize) -> TensorId {
        let hi: Vec<usize> = (1..=n).collect();
        let lo: Vec<usize> = (0..n).collect();
        let h = tape.index_select(scores, 1, &hi);
        let l = tape.index_select(scores, 1, &lo);
        tape.sub(h, l)
    }
}

fn log_softmax_rows(raw: &[f64], width: usize) -> Vec<f64> {
    let mut out = raw.to_vec();
    for row in out.chunks_mut(width) {
        let lse = logsumexp_slice(row.iter().cloned());
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// A balanced-tree PC with its parameters: the trainable model.
#[derive(Clone, Debug)]
pub struct BalancedTreePc {
    structure: PcStructure,
    pub params: ParamSet,
}

impl BalancedTreePc {
    /// Randomly initialized model over `n` positions (a power of two).
    pub fn build(n: usize, vocab: usize, channels: usize, perm: &[usize], seed: u64) -> Result<Self> {
        let structure = PcStructure::new(n, vocab, channels, perm)?;
        let params = structure.init_params(seed);
        Ok(BalancedTreePc { structure, params })
    }

    pub fn from_parts(structure: PcStructure, params: ParamSet) -> Self {
        BalancedTreePc { structure, params }
    }

    pub fn structure(&self) -> &PcStructure {
        &self.structure
    }

    pub fn n(&self) -> usize {
        self.structure.n
    }

    pub fn vocab(&self) -> usize {
        self.structure.vocab
    }

    pub fn channels(&self) -> usize {
        self.structure.channels
    }

    pub fn perm(&self) -> &[usize] {
        self.structure.perm()
    }

    pub fn vtree(&self) -> &Vtree {
        self.structure.vtree()
    }

    fn check_tokens(&self, x: &[u32]) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::InvalidConfig(format!(
                "sequence of length {}, model expects {}",
                x.len(),
                self.n()
            )));
        }
        for &t in x {
            if t as usize >= self.vocab() {
                return Err(Error::TokenOutOfRange { token: t as usize, vocab: self.vocab() });
            }
        }
        Ok(())
    }

    /// Exact `log p(x)`.
    pub fn log_prob(&self, x: &[u32]) -> Result<f64> {
        self.check_tokens(x)?;
        let states: Vec<VarState> =
            x.iter().map(|&t| VarState::Observed(t as usize)).collect();
        let vals = self.structure.node_channel_values(&self.params, "", &states, None);
        Ok(self.structure.root_score(&self.params, "", &vals))
    }

    /// Exact `log p(x_observed)`; `marginalized` is indexed by original
    /// position.
    pub fn marginal_log_prob(&self, x: &[u32], marginalized: &[bool]) -> Result<f64> {
        self.check_tokens(x)?;
        assert_eq!(marginalized.len(), self.n());
        let states: Vec<VarState> = x
            .iter()
            .zip(marginalized)
            .map(|(&t, &m)| if m { VarState::Marginalized } else { VarState::Observed(t as usize) })
            .collect();
        let vals = self.structure.node_channel_values(&self.params, "", &states, None);
        Ok(self.structure.root_score(&self.params, "", &vals))
    }

    /// Exact `p(X_t | x_{<t})` with the future marginalized; `t = prefix.len()`.
    pub fn next_token_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let t = prefix.len();
        if t >= self.n() {
            return Err(Error::StepOutOfRange { t, n: self.n() });
        }
        for &tok in prefix {
            if tok as usize >= self.vocab() {
                return Err(Error::TokenOutOfRange { token: tok as usize, vocab: self.vocab() });
            }
        }
        let mut states: Vec<VarState> = Vec::with_capacity(self.n());
        states.extend(prefix.iter().map(|&p| VarState::Observed(p as usize)));
        states.extend(std::iter::repeat(VarState::Marginalized).take(self.n() - t));
        let mut scores = Vec::with_capacity(self.vocab());
        for cand in 0..self.vocab() {
            states[t] = VarState::Observed(cand);
            let vals = self.structure.node_channel_values(&self.params, "", &states, None);
            scores.push(self.structure.root_score(&self.params, "", &vals));
        }
        let lse = logsumexp_slice(scores.iter().cloned());
        Ok(scores.into_iter().map(|s| (s - lse).exp()).collect())
    }

    /// `log p(x_{<t}, rest marginalized)` for `t = 0..=n` (plain f64 path).
    pub fn prefix_scores(&self, x: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(x)?;
        Ok(self.structure.prefix_scores(&self.params, "", x))
    }

    /// Mean masked NLL over a batch, f64 path.
    pub fn sequence_nll(&self, batch: &SequenceBatch) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..batch.rows() {
            let scores = self.prefix_scores(batch.row_tokens(r))?;
            for t in 0..batch.n {
                if batch.row_mask(r)[t] {
                    total -= scores[t + 1] - scores[t];
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(total / count as f64)
    }

    /// Materializes the generic DAG (with the vtree attached). Unary channel
    /// mixes (C = 1) collapse to pass-throughs except at the root.
    pub fn to_circuit(&self) -> Circuit {
        let s = &self.structure;
        let (n, c, v) = (s.n, s.channels, s.vocab);
        let tables = s.leaf_log_tables(&self.params, "");
        let mut b = CircuitBuilder::new(vec![v; n]);
        // current[level node][channel]
        let mut current: Vec<Vec<usize>> = Vec::with_capacity(n);
        for i in 0..n {
            let pos = s.perm()[i];
            let mut chans = Vec::with_capacity(c);
            for ch in 0..c {
                let table = tables[(i * c + ch) * v..(i * c + ch + 1) * v].to_vec();
                chans.push(b.categorical(pos, table));
            }
            current.push(chans);
        }
        for stage in 0..s.num_stages {
            let wl = s.stage_log_weights(&self.params, "", stage, "l");
            let wr = s.stage_log_weights(&self.params, "", stage, "r");
            let mut next = Vec::with_capacity(current.len() / 2);
            for k in 0..current.len() / 2 {
                let (lkids, rkids) = (&current[2 * k], &current[2 * k + 1]);
                let mut chans = Vec::with_capacity(c);
                for co in 0..c {
                    let lsum = if c == 1 {
                        lkids[0]
                    } else {
                        b.sum(lkids.clone(), wl[(k * c + co) * c..(k * c + co + 1) * c].to_vec())
                    };
                    let rsum = if c == 1 {
                        rkids[0]
                    } else {
                        b.sum(rkids.clone(), wr[(k * c + co) * c..(k * c + co + 1) * c].to_vec())
                    };
                    chans.push(b.product(vec![lsum, rsum]));
                }
                next.push(chans);
            }
            current = next;
        }
        let rw = s.root_log_weights(&self.params, "");
        let root = b.sum(current[0].clone(), rw);
        b.finish_with_vtree(root, s.vtree.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vtree::{shifted_induction_perm, standard_perm};

    fn all_sequences(n: usize, v: usize) -> Vec<Vec<u32>> {
        let total = (v as u64).pow(n as u32) as usize;
        (0..total)
            .map(|mut i| {
                (0..n)
                    .map(|_| {
                        let t = (i % v) as u32;
                        i /= v;
                        t
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn minimal_two_leaf_circuit_shape() {
        let pc = BalancedTreePc::build(2, 3, 1, &standard_perm(2), 0).unwrap();
        let c = pc.to_circuit();
        // two leaves, one product, root sum with a single unit-weight child
        assert_eq!(c.num_nodes(), 4);
        let report = c.validate();
        assert!(report.decomposable() && report.smooth() && report.structured());
    }

    #[test]
    fn uniform_pc_scores_every_sequence_equally() {
        let mut pc = BalancedTreePc::build(4, 3, 2, &standard_perm(4), 1).unwrap();
        // zero logits -> uniform leaves and uniform sums
        for name in ["leaf", "sum_l0", "sum_r0", "sum_l1", "sum_r1", "root"] {
            let t = pc.params.get_mut(name);
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let expect = -(3.0f64.ln()) * 4.0;
        for x in all_sequences(4, 3) {
            let lp = pc.log_prob(&x).unwrap();
            assert!((lp - expect).abs() < 1e-12, "lp {lp} expect {expect}");
        }
    }

    #[test]
    fn normalization_over_all_sequences() {
        for (n, v, c, seed) in [(4, 3, 2, 7u64), (4, 3, 3, 8), (8, 2, 2, 9)] {
            let pc = BalancedTreePc::build(n, v, c, &standard_perm(n), seed).unwrap();
            let total: f64 = all_sequences(n, v)
                .iter()
                .map(|x| pc.log_prob(x).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "total mass {total}");
        }
    }

    #[test]
    fn marginals_match_brute_force() {
        let pc = BalancedTreePc::build(4, 3, 2, &standard_perm(4), 3).unwrap();
        let x = [1u32, 2, 0, 1];
        // marginalize the last two positions
        let marg = [false, false, true, true];
        let got = pc.marginal_log_prob(&x, &marg).unwrap();
        let mut total = 0.0;
        for a in 0..3u32 {
            for b in 0..3u32 {
                total += pc.log_prob(&[1, 2, a, b]).unwrap().exp();
            }
        }
        assert!((got.exp() - total).abs() < 1e-9);
        // no positions marginalized reduces to log_prob
        let none = pc.marginal_log_prob(&x, &[false; 4]).unwrap();
        assert!((none - pc.log_prob(&x).unwrap()).abs() < 1e-12);
        // all positions marginalized is the total mass
        let all = pc.marginal_log_prob(&x, &[true; 4]).unwrap();
        assert!(all.abs() < 1e-9);
    }

    #[test]
    fn hand_computed_three_node_mixture() {
        // n=2, c=1, explicit 2-token tables: p(x) = l(x0) * r(x1)
        let mut pc = BalancedTreePc::build(2, 2, 1, &standard_perm(2), 0).unwrap();
        // leaf logits: position 0 table ~ (0.8, 0.2); position 1 ~ (0.3, 0.7)
        let l0 = (0.8f64.ln(), 0.2f64.ln());
        let l1 = (0.3f64.ln(), 0.7f64.ln());
        pc.params.get_mut("leaf").values = vec![l0.0, l0.1, l1.0, l1.1];
        pc.params.get_mut("sum_l0").values = vec![0.0];
        pc.params.get_mut("sum_r0").values = vec![0.0];
        pc.params.get_mut("root").values = vec![0.0];
        let got = pc.log_prob(&[0, 1]).unwrap();
        assert!((got - (0.8f64 * 0.7).ln()).abs() < 1e-12);
    }

    #[test]
    fn next_token_chain_rule_identity() {
        let pc = BalancedTreePc::build(4, 3, 2, &shifted_induction_perm(4).unwrap(), 5).unwrap();
        let x = [2u32, 0, 1, 1];
        let mut chain = 0.0;
        for t in 0..4 {
            let dist = pc.next_token_distribution(&x[..t]).unwrap();
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            chain += dist[x[t] as usize].ln();
        }
        let joint = pc.log_prob(&x).unwrap();
        assert!((chain - joint).abs() < 1e-9, "chain {chain} joint {joint}");
    }

    #[test]
    fn next_token_at_zero_matches_brute_force_marginal() {
        let pc = BalancedTreePc::build(4, 3, 2, &standard_perm(4), 11).unwrap();
        let dist = pc.next_token_distribution(&[]).unwrap();
        for v in 0..3u32 {
            let mut total = 0.0;
            for x in all_sequences(3, 3) {
                let full = [&[v][..], &x[..]].concat();
                total += pc.log_prob(&full).unwrap().exp();
            }
            assert!((dist[v as usize] - total).abs() < 1e-9);
        }
    }

    #[test]
    fn validator_accepts_both_layouts() {
        for n in [4usize, 8, 16] {
            for perm in [standard_perm(n), shifted_induction_perm(n).unwrap()] {
                let pc = BalancedTreePc::build(n, 3, 2, &perm, 1).unwrap();
                let report = pc.to_circuit().validate();
                assert!(report.decomposable() && report.smooth() && report.structured());
            }
        }
    }

    #[test]
    fn circuit_and_layered_paths_agree() {
        let pc = BalancedTreePc::build(8, 3, 3, &shifted_induction_perm(8).unwrap(), 13).unwrap();
        let circuit = pc.to_circuit();
        for x in [[0u32, 1, 2, 0, 1, 2, 0, 1], [2, 2, 2, 0, 0, 0, 1, 1]] {
            let xi: Vec<usize> = x.iter().map(|&t| t as usize).collect();
            let a = pc.log_prob(&x).unwrap();
            let b = circuit.log_prob(&xi).unwrap();
            assert!((a - b).abs() < 1e-10, "layered {a} dag {b}");
        }
    }

    #[test]
    fn prefix_scores_tape_matches_f64_path() {
        use crate::data::gen_mixed;
        let pc = BalancedTreePc::build(8, 4, 2, &standard_perm(8), 17).unwrap();
        let batch = gen_mixed(8, 4, 6, 0.5, 3).unwrap();
        let mut tape = Tape::new();
        let binding = pc.params.bind(&mut tape);
        let scores = pc.structure.prefix_scores_tape(&mut tape, &binding, "", &batch);
        let got = tape.value(scores);
        assert_eq!(got.shape, vec![6, 9]);
        for r in 0..batch.rows() {
            let expect = pc.prefix_scores(batch.row_tokens(r)).unwrap();
            for t in 0..=8 {
                let g = got.values[r * 9 + t];
                assert!((g - expect[t]).abs() < 1e-10, "row {r} t {t}: {g} vs {}", expect[t]);
            }
        }
        // first column is log 1: everything marginalized
        for r in 0..batch.rows() {
            assert!(got.values[r * 9].abs() < 1e-10);
        }
    }

    #[test]
    fn tape_nll_gradients_match_finite_differences() {
        use crate::data::gen_local_copy;
        let pc = BalancedTreePc::build(4, 3, 2, &standard_perm(4), 23).unwrap();
        let batch = gen_local_copy(4, 3, 3, 1).unwrap();
        let tensors: Vec<crate::diff::Tensor> =
            pc.params.iter().map(|(_, t)| t.clone()).collect();
        let names: Vec<String> = pc.params.iter().map(|(n, _)| n.to_string()).collect();
        let structure = pc.structure.clone();
        crate::diff::check::assert_grads_match(
            &|tape, ids| {
                let map: std::collections::HashMap<String, crate::diff::TensorId> =
                    names.iter().cloned().zip(ids.iter().copied()).collect();
                let binding = crate::params::ParamBinding::from_map(map);
                let scores = structure.prefix_scores_tape(tape, &binding, "", &batch);
                let cond = PcStructure::conditionals_from_scores(tape, scores, 4);
                let flat = tape.reshape(cond, vec![batch.rows() * 4]);
                let m = tape.masked_mean(flat, &batch.mask);
                tape.scale(m, -1.0)
            },
            &tensors,
            1e-4,
            1e-3,
        );
    }
}
