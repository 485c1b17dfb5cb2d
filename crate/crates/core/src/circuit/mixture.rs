//! Trainable root-level mixtures of balanced-tree PCs with distinct leaf
//! layouts. The result is decomposable but, with conflicting layouts, not
//! structured-decomposable.

use crate::circuit::balanced::{BalancedTreePc, PcStructure};
use crate::circuit::dag::{mix, Circuit};
use crate::data::SequenceBatch;
use crate::diff::{logsumexp_slice, Tape, TensorId};
use crate::params::{ParamBinding, ParamSet};
use crate::{Error, Result};

const ROOT_MIX: &str = "root_mix";

/// Mixture over `K` component structures with a pooled parameter set:
/// `root_mix` holds the K mixture logits, component `i`'s parameters live
/// under the prefix `c{i}.`.
#[derive(Clone, Debug)]
pub struct PcMixture {
    structures: Vec<PcStructure>,
    pub params: ParamSet,
    /// when set, only the root mixture weights train
    pub freeze_components: bool,
}

impl PcMixture {
    /// Mixture seeded from independently trained specialists; the root
    /// weights start uniform.
    pub fn from_specialists(specialists: &[BalancedTreePc]) -> Result<Self> {
        if specialists.len() < 2 {
            return Err(Error::InvalidConfig("mixture needs at least two components".into()));
        }
        let n = specialists[0].n();
        let vocab = specialists[0].vocab();
        for s in specialists {
            if s.n() != n || s.vocab() != vocab {
                return Err(Error::ScopeMismatch(
                    "specialists disagree on length or vocabulary".into(),
                ));
            }
        }
        let mut params = ParamSet::new();
        params.insert_zeros(ROOT_MIX, vec![specialists.len()]);
        for (i, s) in specialists.iter().enumerate() {
            params.adopt(&format!("c{i}"), &s.params);
        }
        Ok(PcMixture {
            structures: specialists.iter().map(|s| s.structure().clone()).collect(),
            params,
            freeze_components: false,
        })
    }

    /// Freshly initialized mixture over the given layouts, trained end to
    /// end from scratch.
    pub fn build_scratch(
        n: usize,
        vocab: usize,
        channels: usize,
        perms: &[Vec<usize>],
        seed: u64,
    ) -> Result<Self> {
        if perms.len() < 2 {
            return Err(Error::InvalidConfig("mixture needs at least two layouts".into()));
        }
        let mut params = ParamSet::new();
        params.insert_zeros(ROOT_MIX, vec![perms.len()]);
        let mut structures = Vec::with_capacity(perms.len());
        for (i, perm) in perms.iter().enumerate() {
            let st = PcStructure::new(n, vocab, channels, perm)?;
            params.adopt(&format!("c{i}"), &st.init_params(seed.wrapping_add(i as u64)));
            structures.push(st);
        }
        Ok(PcMixture { structures, params, freeze_components: false })
    }

    /// Reassembly from a saved document.
    pub fn from_doc_parts(
        structures: Vec<PcStructure>,
        params: ParamSet,
        freeze_components: bool,
    ) -> Self {
        PcMixture { structures, params, freeze_components }
    }

    pub fn num_components(&self) -> usize {
        self.structures.len()
    }

    pub fn n(&self) -> usize {
        self.structures[0].n()
    }

    pub fn vocab(&self) -> usize {
        self.structures[0].vocab()
    }

    pub fn structure(&self, i: usize) -> &PcStructure {
        &self.structures[i]
    }

    /// Materializes component `i` as a standalone model (copying its slice
    /// of the pooled parameters).
    pub fn component(&self, i: usize) -> BalancedTreePc {
        BalancedTreePc::from_parts(self.structures[i].clone(), self.params.extract(&format!("c{i}")))
    }

    pub fn log_mix_weights(&self) -> Vec<f64> {
        let raw = &self.params.get(ROOT_MIX).values;
        let lse = logsumexp_slice(raw.iter().cloned());
        raw.iter().map(|w| w - lse).collect()
    }

    /// Root-sum DAG over the component circuits.
    pub fn to_circuit(&self) -> Result<Circuit> {
        let comps: Vec<Circuit> = (0..self.num_components()).map(|i| self.component(i).to_circuit()).collect();
        let refs: Vec<&Circuit> = comps.iter().collect();
        mix(&refs, &self.log_mix_weights())
    }

    /// `log p(x_{<t}, rest marginalized)` under the mixture, f64 path.
    pub fn prefix_scores(&self, x: &[u32]) -> Result<Vec<f64>> {
        let lw = self.log_mix_weights();
        let mut acc = vec![Vec::new(); 0];
        for (i, st) in self.structures.iter().enumerate() {
            let s = st.prefix_scores(&self.params, &format!("c{i}."), x);
            acc.push(s);
        }
        Ok((0..=self.n())
            .map(|t| logsumexp_slice(acc.iter().zip(&lw).map(|(s, &w)| w + s[t])))
            .collect())
    }

    pub fn log_prob(&self, x: &[u32]) -> Result<f64> {
        Ok(*self.prefix_scores(x)?.last().unwrap())
    }

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

    /// Tape loss: mean masked `-log p_mix(x_t | x_{<t})`.
    pub fn build_nll_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        batch: &SequenceBatch,
    ) -> TensorId {
        let n = self.n();
        let per_comp: Vec<TensorId> = self
            .structures
            .iter()
            .enumerate()
            .map(|(i, st)| st.prefix_scores_tape(tape, binding, &format!("c{i}."), batch))
            .collect();
        let stacked = tape.stack_last(&per_comp); // [rows, n+1, K]
        let raw_w = binding.id(ROOT_MIX);
        let lw = tape.log_softmax(raw_w); // [K]
        let weighted = tape.add(stacked, lw); // trailing-vector broadcast
        let mixed = tape.logsumexp(weighted, 2, false); // [rows, n+1]
        let cond = PcStructure::conditionals_from_scores(tape, mixed, n);
        let flat = tape.reshape(cond, vec![batch.rows() * n]);
        let mean = tape.masked_mean(flat, &batch.mask);
        tape.scale(mean, -1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vtree::{shifted_induction_perm, standard_perm};

    #[test]
    fn single_component_mixture_equals_component() {
        // a 2-component mixture with all weight on one side scores like it
        let a = BalancedTreePc::build(4, 3, 2, &standard_perm(4), 1).unwrap();
        let b = BalancedTreePc::build(4, 3, 2, &standard_perm(4), 2).unwrap();
        let mut m = PcMixture::from_specialists(&[a.clone(), b]).unwrap();
        m.params.get_mut(ROOT_MIX).values = vec![60.0, -60.0];
        for x in [[0u32, 1, 2, 0], [2, 2, 1, 1]] {
            let got = m.log_prob(&x).unwrap();
            let want = a.log_prob(&x).unwrap();
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn mixture_mass_is_weighted_sum_of_components() {
        let a = BalancedTreePc::build(4, 2, 2, &standard_perm(4), 5).unwrap();
        let b =
            BalancedTreePc::build(4, 2, 2, &shifted_induction_perm(4).unwrap(), 6).unwrap();
        let mut m = PcMixture::from_specialists(&[a.clone(), b.clone()]).unwrap();
        m.params.get_mut(ROOT_MIX).values = vec![0.3, -0.4];
        let lw = m.log_mix_weights();
        for x in [[0u32, 0, 1, 1], [1, 0, 1, 0]] {
            let direct = m.log_prob(&x).unwrap().exp();
            let expect = lw[0].exp() * a.log_prob(&x).unwrap().exp()
                + lw[1].exp() * b.log_prob(&x).unwrap().exp();
            assert!((direct - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn conflicting_layout_mixture_is_not_structured() {
        let a = BalancedTreePc::build(4, 2, 2, &standard_perm(4), 5).unwrap();
        let b =
            BalancedTreePc::build(4, 2, 2, &shifted_induction_perm(4).unwrap(), 6).unwrap();
        let m = PcMixture::from_specialists(&[a, b]).unwrap();
        let c = m.to_circuit().unwrap();
        let report = c.validate();
        assert!(report.decomposable());
        assert!(report.smooth());
        assert!(!report.structured());
    }

    #[test]
    fn same_layout_mixture_stays_structured() {
        let a = BalancedTreePc::build(4, 2, 2, &standard_perm(4), 5).unwrap();
        let b = BalancedTreePc::build(4, 2, 2, &standard_perm(4), 6).unwrap();
        let m = PcMixture::from_specialists(&[a, b]).unwrap();
        let report = m.to_circuit().unwrap().validate();
        assert!(report.decomposable() && report.structured());
    }

    #[test]
    fn tape_and_f64_nll_agree() {
        use crate::data::gen_mixed;
        let m = PcMixture::build_scratch(
            4,
            3,
            2,
            &[standard_perm(4), shifted_induction_perm(4).unwrap()],
            9,
        )
        .unwrap();
        let batch = gen_mixed(4, 3, 5, 0.5, 2).unwrap();
        let f64_nll = m.sequence_nll(&batch).unwrap();
        let mut tape = Tape::new();
        let binding = m.params.bind(&mut tape);
        let loss = m.build_nll_tape(&mut tape, &binding, &batch);
        let tape_nll = tape.value(loss).item();
        assert!((f64_nll - tape_nll).abs() < 1e-10, "{f64_nll} vs {tape_nll}");
    }
}
