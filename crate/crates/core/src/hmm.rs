//! Homogeneous hidden Markov models over token sequences, plus the
//! logit-head variant that reads the predictive state posterior through a
//! linear layer instead of the emission mixture.
//!
//! All distributions are parameterized as unconstrained logits mapped through
//! log-softmax rows, mirroring the circuit module, and the forward recursion
//! runs in log space throughout.
//!
//! The logit head consumes the *predictive* posterior `log p(z_t | x_{<t})`,
//! not the filtered `log p(z_t | x_{<=t})`: conditioning on `x_t` would leak
//! the token being predicted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, CircuitBuilder};
use crate::data::{Provenance, SequenceBatch};
use crate::diff::{logsumexp_slice, Tape, TensorId};
use crate::params::{ParamBinding, ParamSet};
use crate::{Error, Result};

pub const P_INIT: &str = "init";
pub const P_TRANS: &str = "trans";
pub const P_EMIT: &str = "emit";
pub const P_HEAD_W: &str = "w";
pub const P_HEAD_B: &str = "bias";

const INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HmmConfig {
    pub states: usize,
    pub vocab: usize,
}

/// State-space shape shared by the plain and logit-head variants.
#[derive(Clone, Copy, Debug)]
pub struct HmmStructure {
    pub states: usize,
    pub vocab: usize,
}

/// Result of one forward sweep over a sequence.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `log p(z_t | x_{<t})` for `t = 0..=len` (entry `len` is the one-step
    /// prediction past the end)
    pub predictive: Vec<Vec<f64>>,
    /// `log p(z_t | x_{<=t})` for `t = 0..len`
    pub filtered: Vec<Vec<f64>>,
    /// `log p(x_t | x_{<t})` for `t = 0..len`
    pub step_loglik: Vec<f64>,
}

impl ForwardPass {
    pub fn log_prob(&self) -> f64 {
        self.step_loglik.iter().sum()
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

impl HmmStructure {
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        ps.insert_gaussian(P_INIT, vec![self.states], INIT_SCALE, &mut rng);
        ps.insert_gaussian(P_TRANS, vec![self.states, self.states], INIT_SCALE, &mut rng);
        ps.insert_gaussian(P_EMIT, vec![self.states, self.vocab], INIT_SCALE, &mut rng);
        ps
    }

    pub fn log_init(&self, params: &ParamSet) -> Vec<f64> {
        log_softmax_rows(&params.get(P_INIT).values, self.states)
    }

    /// Row-normalized `log p(z' | z)`, row-major `[z][z']`.
    pub fn log_trans(&self, params: &ParamSet) -> Vec<f64> {
        log_softmax_rows(&params.get(P_TRANS).values, self.states)
    }

    /// Row-normalized `log p(v | z)`, row-major `[z][v]`.
    pub fn log_emit(&self, params: &ParamSet) -> Vec<f64> {
        log_softmax_rows(&params.get(P_EMIT).values, self.vocab)
    }

    fn check_tokens(&self, x: &[u32]) -> Result<()> {
        for &t in x {
            if t as usize >= self.vocab {
                return Err(Error::TokenOutOfRange { token: t as usize, vocab: self.vocab });
            }
        }
        Ok(())
    }

    /// Log-space forward recursion.
    pub fn forward(&self, params: &ParamSet, x: &[u32]) -> Result<ForwardPass> {
        self.check_tokens(x)?;
        let d = self.states;
        let (lpi, la, le) = (self.log_init(params), self.log_trans(params), self.log_emit(params));
        let mut predictive = vec![lpi];
        let mut filtered = Vec::with_capacity(x.len());
        let mut step_loglik = Vec::with_capacity(x.len());
        for (t, &tok) in x.iter().enumerate() {
            let pred = &predictive[t];
            let joint: Vec<f64> =
                (0..d).map(|z| pred[z] + le[z * self.vocab + tok as usize]).collect();
            let step = logsumexp_slice(joint.iter().cloned());
            step_loglik.push(step);
            let filt: Vec<f64> = joint.iter().map(|j| j - step).collect();
            let next: Vec<f64> = (0..d)
                .map(|z2| logsumexp_slice((0..d).map(|z| filt[z] + la[z * d + z2])))
                .collect();
            filtered.push(filt);
            predictive.push(next);
        }
        Ok(ForwardPass { predictive, filtered, step_loglik })
    }
}

/// Plain HMM: the next-token distribution is the emission mixture
/// `E' p(z_t | x_{<t})`.
#[derive(Clone, Debug)]
pub struct HmmModel {
    structure: HmmStructure,
    pub params: ParamSet,
}

impl HmmModel {
    pub fn new(states: usize, vocab: usize, seed: u64) -> Result<Self> {
        if states < 1 || vocab < 2 {
            return Err(Error::InvalidConfig(format!(
                "hmm needs states >= 1 and vocab >= 2, got d={states}, v={vocab}"
            )));
        }
        let structure = HmmStructure { states, vocab };
        let params = structure.init_params(seed);
        Ok(HmmModel { structure, params })
    }

    pub fn from_parts(structure: HmmStructure, params: ParamSet) -> Self {
        HmmModel { structure, params }
    }

    pub fn states(&self) -> usize {
        self.structure.states
    }

    pub fn vocab(&self) -> usize {
        self.structure.vocab
    }

    pub fn structure(&self) -> HmmStructure {
        self.structure
    }

    pub fn forward(&self, x: &[u32]) -> Result<ForwardPass> {
        self.structure.forward(&self.params, x)
    }

    /// Normalized `log p(z_t | x_{<=t})` for the full prefix.
    pub fn forward_filter(&self, x: &[u32]) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Err(Error::InvalidConfig("filter needs at least one token".into()));
        }
        Ok(self.forward(x)?.filtered.last().unwrap().clone())
    }

    pub fn log_prob(&self, x: &[u32]) -> Result<f64> {
        Ok(self.forward(x)?.log_prob())
    }

    /// `p(X_t | x_{<t})` with `t = prefix.len()`.
    pub fn next_token(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let fwd = self.forward(prefix)?;
        let pred = fwd.predictive.last().unwrap();
        let le = self.structure.log_emit(&self.params);
        let d = self.structure.states;
        Ok((0..self.vocab())
            .map(|v| logsumexp_slice((0..d).map(|z| pred[z] + le[z * self.vocab() + v])).exp())
            .collect())
    }

    /// Mean masked NLL, f64 path.
    pub fn sequence_nll(&self, batch: &SequenceBatch) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..batch.rows() {
            let fwd = self.forward(batch.row_tokens(r))?;
            for t in 0..batch.n {
                if batch.row_mask(r)[t] {
                    total -= fwd.step_loglik[t];
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(total / count as f64)
    }

    /// Ancestral sampling; every position unmasked, tagged as generic text.
    pub fn sample(&self, n: usize, rows: usize, seed: u64) -> SequenceBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.states();
        let lpi = self.structure.log_init(&self.params);
        let la = self.structure.log_trans(&self.params);
        let le = self.structure.log_emit(&self.params);
        let draw = |rng: &mut ChaCha8Rng, logp: &[f64]| -> usize {
            let mut u: f64 = rng.random();
            for (i, &lp) in logp.iter().enumerate() {
                u -= lp.exp();
                if u <= 0.0 {
                    return i;
                }
            }
            logp.len() - 1
        };
        let mut tokens = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            let mut z = draw(&mut rng, &lpi);
            for t in 0..n {
                let v = draw(&mut rng, &le[z * self.vocab()..(z + 1) * self.vocab()]);
                tokens.push(v as u32);
                if t + 1 < n {
                    z = draw(&mut rng, &la[z * d..(z + 1) * d]);
                }
            }
        }
        SequenceBatch::new(n, self.vocab(), tokens, vec![true; rows * n], vec![
            Provenance::CharText;
            rows
        ])
        .expect("sampled batch is well-formed")
    }

    /// Chain compilation: alternating state-mixture sums and
    /// emission-times-continuation products, size `O(n d^2)`. The circuit's
    /// joint equals the forward algorithm's.
    pub fn to_circuit(&self, n: usize) -> Result<Circuit> {
        if n < 1 {
            return Err(Error::InvalidConfig("circuit needs n >= 1".into()));
        }
        let d = self.states();
        let v = self.vocab();
        let lpi = self.structure.log_init(&self.params);
        let la = self.structure.log_trans(&self.params);
        let le = self.structure.log_emit(&self.params);
        let mut b = CircuitBuilder::new(vec![v; n]);
        // current[z] computes p(x_t.., future | z_t = z); build from the end
        let mut current: Vec<usize> = (0..d)
            .map(|z| b.categorical(n - 1, le[z * v..(z + 1) * v].to_vec()))
            .collect();
        for t in (0..n - 1).rev() {
            let mut next: Vec<usize> = Vec::with_capacity(d);
            for z in 0..d {
                let cont = b.sum(current.clone(), la[z * d..(z + 1) * d].to_vec());
                let leaf = b.categorical(t, le[z * v..(z + 1) * v].to_vec());
                next.push(b.product(vec![leaf, cont]));
            }
            current = next;
        }
        let root = b.sum(current, lpi);
        Ok(b.finish(root))
    }

    /// Tape loss: mean masked `-log p(x_t | x_{<t})`.
    pub fn build_nll_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        batch: &SequenceBatch,
    ) -> TensorId {
        let steps = hmm_step_logliks_tape(self.structure, tape, binding, batch);
        let cond = tape.stack_last(&steps); // [rows, n]
        let flat = tape.reshape(cond, vec![batch.rows() * batch.n]);
        let mean = tape.masked_mean(flat, &batch.mask);
        tape.scale(mean, -1.0)
    }
}

/// Shared tape recursion: per-step `log p(x_t | x_{<t})` tensors, one `[rows]`
/// tensor per position. Also returns nothing else; the logit head re-derives
/// the predictive posterior itself.
fn hmm_step_logliks_tape(
    s: HmmStructure,
    tape: &mut Tape,
    binding: &ParamBinding,
    batch: &SequenceBatch,
) -> Vec<TensorId> {
    let (steps, _) = hmm_recursion_tape(s, tape, binding, batch);
    steps
}

/// Runs the forward recursion on the tape, returning per-step logliks and
/// per-step predictive log-posteriors (including step 0).
fn hmm_recursion_tape(
    s: HmmStructure,
    tape: &mut Tape,
    binding: &ParamBinding,
    batch: &SequenceBatch,
) -> (Vec<TensorId>, Vec<TensorId>) {
    let d = s.states;
    let rows = batch.rows();
    let n = batch.n;
    let le = {
        let raw = binding.id(P_EMIT);
        let ls = tape.log_softmax(raw); // [d, v]
        tape.transpose2d(ls) // [v, d]
    };
    let wa = {
        let raw = binding.id(P_TRANS);
        let ls = tape.log_softmax(raw); // [d, d], rows z -> z'
        let tr = tape.transpose2d(ls);
        tape.reshape(tr, vec![1, d, d]) // mix weights [n=1, j=z', k=z]
    };
    let lpi = {
        let raw = binding.id(P_INIT);
        tape.log_softmax(raw) // [d]
    };
    let zeros = tape.constant(vec![rows, d], vec![0.0; rows * d]);
    let mut pred = tape.add(zeros, lpi); // broadcast to [rows, d]
    let mut preds = vec![pred];
    let mut steps = Vec::with_capacity(n);
    for t in 0..n {
        let ids: Vec<usize> = (0..rows).map(|r| batch.row_tokens(r)[t] as usize).collect();
        let emis = tape.embedding(le, &ids); // [rows, d]
        let joint = tape.add(pred, emis);
        let step = tape.logsumexp(joint, 1, false); // [rows]
        steps.push(step);
        if t + 1 < n {
            let step_col = tape.reshape(step, vec![rows, 1]);
            let filt = tape.sub(joint, step_col);
            let filt3 = tape.reshape(filt, vec![rows, 1, d]);
            let mixed = tape.log_mix(filt3, wa);
            pred = tape.reshape(mixed, vec![rows, d]);
            preds.push(pred);
        }
    }
    (steps, preds)
}

/// HMM with a logit output head: `softmax(W e_t + b)` where `e_t` is the
/// predictive log-posterior over states.
#[derive(Clone, Debug)]
pub struct LogitHmm {
    structure: HmmStructure,
    pub params: ParamSet,
}

impl LogitHmm {
    pub fn from_parts(structure: HmmStructure, params: ParamSet) -> Self {
        LogitHmm { structure, params }
    }

    pub fn new(states: usize, vocab: usize, seed: u64) -> Result<Self> {
        if states < 1 || vocab < 2 {
            return Err(Error::InvalidConfig(format!(
                "logit-hmm needs states >= 1 and vocab >= 2, got d={states}, v={vocab}"
            )));
        }
        let structure = HmmStructure { states, vocab };
        let mut params = structure.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b9));
        params.insert_gaussian(P_HEAD_W, vec![vocab, states], INIT_SCALE, &mut rng);
        params.insert_zeros(P_HEAD_B, vec![vocab]);
        Ok(LogitHmm { structure, params })
    }

    /// Head imitation of an existing HMM: copies the state-space parameters
    /// and starts the head from the transposed log-emission matrix, which
    /// reproduces the convex readout when the posterior concentrates.
    pub fn from_hmm(hmm: &HmmModel, seed: u64) -> Self {
        let structure = hmm.structure();
        let mut params = ParamSet::new();
        for (name, t) in hmm.params.iter() {
            params.insert(name, t.clone());
        }
        let le = structure.log_emit(&hmm.params);
        let d = structure.states;
        let v = structure.vocab;
        let mut w = vec![0.0; v * d];
        for z in 0..d {
            for tok in 0..v {
                w[tok * d + z] = le[z * v + tok];
            }
        }
        let _ = seed;
        params.insert(P_HEAD_W, crate::diff::Tensor::new(vec![v, d], w));
        params.insert_zeros(P_HEAD_B, vec![v]);
        LogitHmm { structure, params }
    }

    pub fn states(&self) -> usize {
        self.structure.states
    }

    pub fn vocab(&self) -> usize {
        self.structure.vocab
    }

    pub fn structure(&self) -> HmmStructure {
        self.structure
    }

    /// `softmax(W e_t + b)` with `t = prefix.len()`.
    pub fn next_token(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let fwd = self.structure.forward(&self.params, prefix)?;
        let e = fwd.predictive.last().unwrap();
        let w = &self.params.get(P_HEAD_W).values;
        let b = &self.params.get(P_HEAD_B).values;
        let d = self.states();
        let logits: Vec<f64> = (0..self.vocab())
            .map(|v| b[v] + (0..d).map(|z| w[v * d + z] * e[z]).sum::<f64>())
            .collect();
        let lse = logsumexp_slice(logits.iter().cloned());
        Ok(logits.into_iter().map(|l| (l - lse).exp()).collect())
    }

    pub fn sequence_nll(&self, batch: &SequenceBatch) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        let w = &self.params.get(P_HEAD_W).values;
        let b = &self.params.get(P_HEAD_B).values;
        let d = self.states();
        for r in 0..batch.rows() {
            let row = batch.row_tokens(r);
            let fwd = self.structure.forward(&self.params, row)?;
            for t in 0..batch.n {
                if !batch.row_mask(r)[t] {
                    continue;
                }
                let e = &fwd.predictive[t];
                let logits: Vec<f64> = (0..self.vocab())
                    .map(|v| b[v] + (0..d).map(|z| w[v * d + z] * e[z]).sum::<f64>())
                    .collect();
                let lse = logsumexp_slice(logits.iter().cloned());
                total -= logits[row[t] as usize] - lse;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(total / count as f64)
    }

    pub fn build_nll_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        batch: &SequenceBatch,
    ) -> TensorId {
        let (_, preds) = hmm_recursion_tape(self.structure, tape, binding, batch);
        let rows = batch.rows();
        let n = batch.n;
        let w = binding.id(P_HEAD_W);
        let wt = tape.transpose2d(w); // [d, v]
        let bias = binding.id(P_HEAD_B);
        let mut conds = Vec::with_capacity(n);
        for (t, &pred) in preds.iter().enumerate() {
            let logits = tape.matmul(pred, wt); // [rows, v]
            let logits = tape.add(logits, bias);
            let ls = tape.log_softmax(logits);
            let ids: Vec<usize> = (0..rows).map(|r| batch.row_tokens(r)[t] as usize).collect();
            conds.push(tape.take_per_row(ls, &ids)); // [rows]
        }
        let cond = tape.stack_last(&conds);
        let flat = tape.reshape(cond, vec![rows * n]);
        let mean = tape.masked_mean(flat, &batch.mask);
        tape.scale(mean, -1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_hmm(d: usize, v: usize) -> HmmModel {
        let mut m = HmmModel::new(d, v, 0).unwrap();
        for name in [P_INIT, P_TRANS, P_EMIT] {
            m.params.get_mut(name).values.iter_mut().for_each(|x| *x = 0.0);
        }
        m
    }

    /// Hand-set d=2, v=2 model in probability space.
    fn hand_model() -> (HmmModel, [f64; 2], [[f64; 2]; 2], [[f64; 2]; 2]) {
        let pi = [0.6, 0.4];
        let a = [[0.7, 0.3], [0.2, 0.8]];
        let e = [[0.9, 0.1], [0.25, 0.75]];
        let mut m = HmmModel::new(2, 2, 0).unwrap();
        m.params.get_mut(P_INIT).values = pi.iter().map(|&p: &f64| p.ln()).collect();
        m.params.get_mut(P_TRANS).values = a.iter().flatten().map(|&p: &f64| p.ln()).collect();
        m.params.get_mut(P_EMIT).values = e.iter().flatten().map(|&p: &f64| p.ln()).collect();
        (m, pi, a, e)
    }

    #[test]
    fn uniform_model_gives_uniform_posterior_and_prediction() {
        let m = uniform_hmm(3, 4);
        let post = m.forward_filter(&[1, 2, 0]).unwrap();
        for &p in &post {
            assert!((p - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
        let dist = m.next_token(&[1, 2]).unwrap();
        for &p in &dist {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_filter_matches_bayes_rule_by_hand() {
        let (m, pi, a, e) = hand_model();
        // t=0: observe token 0
        let post0 = m.forward_filter(&[0]).unwrap();
        let joint: Vec<f64> = (0..2).map(|z| pi[z] * e[z][0]).collect();
        let norm: f64 = joint.iter().sum();
        for z in 0..2 {
            assert!((post0[z].exp() - joint[z] / norm).abs() < 1e-12);
        }
        // t=1: observe token 1 after token 0
        let post1 = m.forward_filter(&[0, 1]).unwrap();
        let pred1: Vec<f64> =
            (0..2).map(|z2| (0..2).map(|z| (joint[z] / norm) * a[z][z2]).sum()).collect();
        let joint1: Vec<f64> = (0..2).map(|z| pred1[z] * e[z][1]).collect();
        let norm1: f64 = joint1.iter().sum();
        for z in 0..2 {
            assert!((post1[z].exp() - joint1[z] / norm1).abs() < 1e-12);
        }
    }

    #[test]
    fn posteriors_normalize_for_random_models() {
        let m = HmmModel::new(3, 5, 7).unwrap();
        for len in 1..6 {
            let x: Vec<u32> = (0..len).map(|i| (i % 5) as u32).collect();
            let post = m.forward_filter(&x).unwrap();
            let total: f64 = post.iter().map(|p| p.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn filter_is_invariant_to_incremental_evaluation() {
        let m = HmmModel::new(3, 4, 11).unwrap();
        let x = [0u32, 3, 1, 2, 2, 0];
        let full = m.forward(&x).unwrap();
        for t in 1..=x.len() {
            let part = m.forward(&x[..t]).unwrap();
            for z in 0..3 {
                assert!((full.filtered[t - 1][z] - part.filtered[t - 1][z]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_rule_identity_joint_vs_autoregressive() {
        let m = HmmModel::new(3, 4, 13).unwrap();
        let x = [2u32, 0, 3, 1];
        let mut chain = 0.0;
        for t in 0..4 {
            let dist = m.next_token(&x[..t]).unwrap();
            let total: f64 = dist.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            chain += dist[x[t] as usize].ln();
        }
        assert!((chain - m.log_prob(&x).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn single_state_prediction_is_the_emission_row() {
        let m = HmmModel::new(1, 4, 17).unwrap();
        let le = m.structure.log_emit(&m.params);
        for prefix in [&[][..], &[1u32][..], &[3u32, 0][..]] {
            let dist = m.next_token(prefix).unwrap();
            for v in 0..4 {
                assert!((dist[v] - le[v].exp()).abs() < 1e-12);
            }
        }
    }

    /// Brute-force joint by explicit path enumeration in probability space,
    /// independent of the forward recursion.
    fn path_sum_joint(m: &HmmModel, x: &[u32]) -> f64 {
        let d = m.states();
        let v = m.vocab();
        let pi: Vec<f64> = m.structure.log_init(&m.params).iter().map(|p| p.exp()).collect();
        let a: Vec<f64> = m.structure.log_trans(&m.params).iter().map(|p| p.exp()).collect();
        let e: Vec<f64> = m.structure.log_emit(&m.params).iter().map(|p| p.exp()).collect();
        let n = x.len();
        let paths = d.pow(n as u32);
        let mut total = 0.0;
        for mut code in 0..paths {
            let mut zs = Vec::with_capacity(n);
            for _ in 0..n {
                zs.push(code % d);
                code /= d;
            }
            let mut p = pi[zs[0]] * e[zs[0] * v + x[0] as usize];
            for t in 1..n {
                p *= a[zs[t - 1] * d + zs[t]] * e[zs[t] * v + x[t] as usize];
            }
            total += p;
        }
        total
    }

    #[test]
    fn forward_joint_matches_path_enumeration() {
        let m = HmmModel::new(3, 3, 19).unwrap();
        for x in [[0u32, 1, 2], [2, 2, 0], [1, 0, 1]] {
            let via_forward = m.log_prob(&x).unwrap().exp();
            let via_paths = path_sum_joint(&m, &x);
            assert!((via_forward - via_paths).abs() < 1e-12);
        }
    }

    #[test]
    fn circuit_compilation_matches_forward_on_all_sequences() {
        for (d, v, n) in [(2usize, 2usize, 3usize), (3, 3, 4), (2, 3, 4)] {
            let m = HmmModel::new(d, v, 23 + d as u64).unwrap();
            let c = m.to_circuit(n).unwrap();
            assert!(c.validate().decomposable());
            let total = (v as u32).pow(n as u32);
            for code in 0..total {
                let mut x = Vec::with_capacity(n);
                let mut cc = code;
                for _ in 0..n {
                    x.push(cc % v as u32);
                    cc /= v as u32;
                }
                let xi: Vec<usize> = x.iter().map(|&t| t as usize).collect();
                let lp_hmm = m.log_prob(&x).unwrap();
                let lp_circ = c.log_prob(&xi).unwrap();
                assert!(
                    (lp_hmm - lp_circ).abs() < 1e-9,
                    "d={d} v={v} n={n}: {lp_hmm} vs {lp_circ}"
                );
            }
        }
    }

    #[test]
    fn single_position_circuit_is_emission_mixture() {
        let m = HmmModel::new(2, 3, 29).unwrap();
        let c = m.to_circuit(1).unwrap();
        let lpi = m.structure.log_init(&m.params);
        let le = m.structure.log_emit(&m.params);
        for v in 0..3usize {
            let expect = logsumexp_slice((0..2).map(|z| lpi[z] + le[z * 3 + v]));
            assert!((c.log_prob(&[v]).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn hmm_circuit_interface_recovers_emission_matrix() {
        let m = HmmModel::new(3, 3, 31).unwrap();
        let c = m.to_circuit(4).unwrap();
        let li = c.extract_latent_interface(2, &[1, 0]).unwrap();
        assert_eq!(li.k(), 3);
        let le = m.structure.log_emit(&m.params);
        // interface states are created in state order at each position
        for v in 0..3 {
            for z in 0..3 {
                assert!((li.emission[v * 3 + z] - le[z * 3 + v].exp()).abs() < 1e-12);
            }
        }
        // and the readout reproduces the exact conditional
        let direct = m.next_token(&[1, 0]).unwrap();
        let via = li.predict();
        for v in 0..3 {
            assert!((direct[v] - via[v]).abs() < 1e-9);
        }
    }

    #[test]
    fn next_token_matches_exhaustive_joint_conditional() {
        let m = HmmModel::new(3, 3, 37).unwrap();
        let n = 4;
        let prefix = [2u32, 1];
        let dist = m.next_token(&prefix).unwrap();
        // oracle: conditional from the path-enumeration joint, marginalizing
        // the future by summing over completions
        let mut scores = vec![0.0f64; 3];
        for v in 0..3u32 {
            for c1 in 0..3u32 {
                let x = [prefix[0], prefix[1], v, c1];
                scores[v as usize] += path_sum_joint(&m, &x);
            }
        }
        let norm: f64 = scores.iter().sum();
        for v in 0..3 {
            assert!((dist[v] - scores[v] / norm).abs() < 1e-9);
        }
        let _ = n;
    }

    #[test]
    fn logit_head_zero_weights_is_uniform() {
        let mut m = LogitHmm::new(3, 5, 41).unwrap();
        m.params.get_mut(P_HEAD_W).values.iter_mut().for_each(|x| *x = 0.0);
        m.params.get_mut(P_HEAD_B).values.iter_mut().for_each(|x| *x = 0.0);
        let dist = m.next_token(&[1, 2]).unwrap();
        for &p in &dist {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_features_recover_convex_readout() {
        // d = v with near-deterministic emissions: the predictive posterior
        // is the next-token distribution itself, and softmax of its log is
        // the identity map, so W = I reproduces the emission-mixture head
        let d = 3;
        let mut hmm = HmmModel::new(d, d, 43).unwrap();
        let sharp = 50.0;
        let mut emit = vec![0.0; d * d];
        for z in 0..d {
            emit[z * d + z] = sharp;
        }
        hmm.params.get_mut(P_EMIT).values = emit;
        let mut lm = LogitHmm::from_hmm(&hmm, 0);
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        lm.params.get_mut(P_HEAD_W).values = w;
        for prefix in [&[0u32][..], &[1u32, 2][..]] {
            let convex = hmm.next_token(prefix).unwrap();
            let logit = lm.next_token(prefix).unwrap();
            for v in 0..d {
                assert!((convex[v] - logit[v]).abs() < 1e-9, "{convex:?} vs {logit:?}");
            }
        }
    }

    #[test]
    fn tape_nll_matches_f64_and_gradients_check() {
        use crate::data::gen_local_copy;
        let batch = gen_local_copy(4, 3, 4, 5).unwrap();

        let m = HmmModel::new(2, 3, 47).unwrap();
        let mut tape = Tape::new();
        let binding = m.params.bind(&mut tape);
        let loss = m.build_nll_tape(&mut tape, &binding, &batch);
        let got = tape.value(loss).item();
        let want = m.sequence_nll(&batch).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");

        let lm = LogitHmm::new(2, 3, 53).unwrap();
        let mut tape = Tape::new();
        let binding = lm.params.bind(&mut tape);
        let loss = lm.build_nll_tape(&mut tape, &binding, &batch);
        let got = tape.value(loss).item();
        let want = lm.sequence_nll(&batch).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");

        // finite differences for both variants, including the head
        for variant in 0..2 {
            let (names, tensors): (Vec<String>, Vec<crate::diff::Tensor>) = if variant == 0 {
                let m = HmmModel::new(2, 3, 59).unwrap();
                (
                    m.params.iter().map(|(n, _)| n.to_string()).collect(),
                    m.params.iter().map(|(_, t)| t.clone()).collect(),
                )
            } else {
                let m = LogitHmm::new(2, 3, 61).unwrap();
                (
                    m.params.iter().map(|(n, _)| n.to_string()).collect(),
                    m.params.iter().map(|(_, t)| t.clone()).collect(),
                )
            };
            let batch = batch.clone();
            let structure = HmmStructure { states: 2, vocab: 3 };
            crate::diff::check::assert_grads_match(
                &|tape, ids| {
                    let map: std::collections::HashMap<String, TensorId> =
                        names.iter().cloned().zip(ids.iter().copied()).collect();
                    let binding = ParamBinding::from_map(map);
                    if variant == 0 {
                        let m = HmmModel::from_parts(structure, ParamSet::new());
                        m.build_nll_tape(tape, &binding, &batch)
                    } else {
                        let m = LogitHmm {
                            structure,
                            params: ParamSet::new(),
                        };
                        m.build_nll_tape(tape, &binding, &batch)
                    }
                },
                &tensors,
                1e-4,
                1e-3,
            );
        }
    }
}
