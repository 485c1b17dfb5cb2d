use super::check::{assert_grads_match, grad_check};
use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale)
        .collect()
}

fn t(shape: &[usize], values: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), values)
}

#[test]
fn softmax_symmetry() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2], vec![0.0, 0.0]);
    let y = tape.softmax(x);
    assert_eq!(tape.value(y).values, vec![0.5, 0.5]);
}

#[test]
fn logsumexp_normalizes() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2], vec![0.3_f64.ln(), 0.7_f64.ln()]);
    let y = tape.logsumexp(x, 0, false);
    assert!(tape.value(y).item().abs() < 1e-12);
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let eye = tape.constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    let a = tape.constant(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]);
    let y = tape.matmul(eye, a);
    assert_eq!(tape.value(y).values, tape.value(a).values);
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let p = tape.leaf(t(&[4], vec![1., -2., 3., 0.5]).with_grad());
    let loss = tape.sum_all(p);
    let grads = tape.backward(loss);
    assert_eq!(grads.get(p, 4), vec![1.0; 4]);
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::scalar(3.0).with_grad());
    let sq = tape.mul(p, p);
    let loss = tape.sum_all(sq);
    let grads = tape.backward(loss);
    assert!((grads.get(p, 1)[0] - 6.0).abs() < 1e-12);
}

#[test]
fn disconnected_param_gets_zero_grad() {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::scalar(1.0).with_grad());
    let q = tape.leaf(Tensor::scalar(2.0).with_grad());
    let loss = tape.sum_all(p);
    let grads = tape.backward(loss);
    assert_eq!(grads.get(q, 1), vec![0.0]);
}

#[test]
#[should_panic(expected = "non-scalar")]
fn backward_from_vector_panics() {
    let mut tape = Tape::new();
    let p = tape.leaf(t(&[2], vec![1.0, 2.0]).with_grad());
    tape.backward(p);
}

#[test]
#[should_panic(expected = "incompatible elementwise shapes")]
fn shape_mismatch_panics() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![3], vec![1., 2., 3.]);
    let b = tape.constant(vec![2], vec![1., 2.]);
    tape.add(a, b);
}

#[test]
fn random_composite_matches_finite_differences() {
    // five-parameter composite touching matmul, softplus, exp/log and reductions
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = vec![
        t(&[2, 3], randn(&mut rng, 6, 1.0)),
        t(&[3, 2], randn(&mut rng, 6, 1.0)),
        t(&[2], randn(&mut rng, 2, 1.0)),
        t(&[2, 2], randn(&mut rng, 4, 0.5)),
        t(&[], randn(&mut rng, 1, 1.0)),
    ];
    assert_grads_match(
        &|tape, ids| {
            let m = tape.matmul(ids[0], ids[1]);
            let m = tape.add(m, ids[2]); // bias broadcast
            let m = tape.softplus(m);
            let m = tape.mul(m, ids[3]);
            let e = tape.exp(ids[4]);
            let m = tape.mul(m, e); // scalar broadcast
            let lm = tape.logsumexp(m, 1, false);
            tape.sum_all(lm)
        },
        &params,
        EPS,
        TOL,
    );
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // unary chain: exp, ln (through softplus to stay positive), gelu, recip
    let x = t(&[2, 3], randn(&mut rng, 6, 0.8));
    assert_grads_match(
        &|tape, ids| {
            let sp = tape.softplus(ids[0]);
            let l = tape.ln(sp);
            let ge = tape.gelu(l);
            let e = tape.exp(ge);
            let r = tape.recip(e);
            tape.mean_all(r)
        },
        &[x],
        EPS,
        TOL,
    );

    // softmax / log_softmax / scale / add_const
    let x = t(&[3, 4], randn(&mut rng, 12, 1.0));
    assert_grads_match(
        &|tape, ids| {
            let s = tape.softmax(ids[0]);
            let ls = tape.log_softmax(ids[0]);
            let both = tape.mul(s, ls);
            let sc = tape.scale(both, 1.7);
            let sc = tape.add_const(sc, 0.3);
            tape.sum_all(sc)
        },
        &[x],
        EPS,
        TOL,
    );

    // reductions, stack, index_select, transpose, reshape, sub
    let a = t(&[2, 4], randn(&mut rng, 8, 1.0));
    let b = t(&[2, 4], randn(&mut rng, 8, 1.0));
    assert_grads_match(
        &|tape, ids| {
            let s = tape.sub(ids[0], ids[1]);
            let st = tape.stack_last(&[ids[0], s]);
            let sel = tape.index_select(st, 1, &[3, 0, 0]);
            let sa = tape.sum_axis(sel, 2, false);
            let tr = tape.transpose2d(sa);
            let rs = tape.reshape(tr, vec![6]);
            let lse = tape.logsumexp(rs, 0, false);
            tape.sum_all(lse)
        },
        &[a, b],
        EPS,
        TOL,
    );

    // embedding + take_per_row + masked_mean
    let table = t(&[5, 3], randn(&mut rng, 15, 1.0));
    assert_grads_match(
        &|tape, ids| {
            let rows = tape.embedding(ids[0], &[4, 0, 2, 2]);
            let picked = tape.take_per_row(rows, &[0, 2, 1, 1]);
            tape.masked_mean(picked, &[true, false, true, true])
        },
        &[table],
        EPS,
        TOL,
    );

    // gather_token + log_mix
    let table = t(&[2, 3, 4], randn(&mut rng, 24, 1.0));
    let w = t(&[2, 2, 3], randn(&mut rng, 12, 1.0));
    assert_grads_match(
        &|tape, ids| {
            let g = tape.gather_token(ids[0], &[1, 3, 0, 2], 2);
            let m = tape.log_mix(g, ids[1]);
            tape.sum_all(m)
        },
        &[table, w],
        EPS,
        TOL,
    );

    // layer_norm
    let x = t(&[3, 4], randn(&mut rng, 12, 1.0));
    let gamma = t(&[4], randn(&mut rng, 4, 0.5));
    let beta = t(&[4], randn(&mut rng, 4, 0.5));
    assert_grads_match(
        &|tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            let y = tape.mul(y, y);
            tape.sum_all(y)
        },
        &[x, gamma, beta],
        EPS,
        TOL,
    );

    // attention + split/merge heads (causal mask)
    let tlen = 4;
    let d = 6;
    let x = t(&[1, tlen, d], randn(&mut rng, tlen * d, 0.7));
    let causal: Vec<bool> = (0..tlen * tlen).map(|i| i % tlen <= i / tlen).collect();
    assert_grads_match(
        &|tape, ids| {
            let q = tape.split_heads(ids[0], 2);
            let k = tape.split_heads(ids[0], 2);
            let v = tape.split_heads(ids[0], 2);
            let o = tape.attention(q, k, v, &causal);
            let m = tape.merge_heads(o);
            tape.mean_all(m)
        },
        &[x],
        EPS,
        TOL,
    );

    // cross entropy with ignore index
    let logits = t(&[4, 5], randn(&mut rng, 20, 1.0));
    assert_grads_match(
        &|tape, ids| tape.cross_entropy(ids[0], &[2, -1, 0, 4]),
        &[logits],
        EPS,
        TOL,
    );

    // dropout backward (fixed mask via seeded rng)
    let x = t(&[2, 5], randn(&mut rng, 10, 1.0));
    let check = grad_check(
        &|tape, ids| {
            let mut drng = ChaCha8Rng::seed_from_u64(99);
            let d = tape.dropout(ids[0], 0.4, &mut drng);
            tape.sum_all(d)
        },
        &[x],
        EPS,
    );
    assert!(check.max_rel_err < TOL, "dropout grad err {}", check.max_rel_err);
}

#[test]
fn replay_reproduces_values_bit_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[3, 3], randn(&mut rng, 9, 1.0)).with_grad());
    let b = tape.leaf(t(&[3, 3], randn(&mut rng, 9, 1.0)));
    let m = tape.matmul(a, b);
    let s = tape.softmax(m);
    let l = tape.ln(s);
    let mut drng = ChaCha8Rng::seed_from_u64(5);
    let d = tape.dropout(l, 0.3, &mut drng);
    let _ = tape.mean_all(d);
    assert!(tape.replay_matches());
}

#[test]
fn dropout_scales_kept_entries() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1000], vec![1.0; 1000]);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let d = tape.dropout(x, 0.25, &mut rng);
    let vals = &tape.value(d).values;
    let kept = vals.iter().filter(|&&v| v != 0.0).count();
    for &v in vals.iter() {
        assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
    }
    // keep rate concentrates around 0.75
    assert!((kept as f64 / 1000.0 - 0.75).abs() < 0.06, "kept {kept}");
}

#[test]
fn attention_is_causal() {
    // perturbing a future position must not change earlier outputs
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tlen = 5;
    let dh = 4;
    let base = randn(&mut rng, tlen * dh, 1.0);
    let causal: Vec<bool> = (0..tlen * tlen).map(|i| i % tlen <= i / tlen).collect();
    let run = |values: Vec<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 1, tlen, dh], values);
        let o = tape.attention(x, x, x, &causal);
        tape.value(o).values.clone()
    };
    let out0 = run(base.clone());
    let mut poked = base.clone();
    for i in 0..dh {
        poked[(tlen - 1) * dh + i] += 3.0;
    }
    let out1 = run(poked);
    for t in 0..tlen - 1 {
        for i in 0..dh {
            assert!((out0[t * dh + i] - out1[t * dh + i]).abs() < 1e-15);
        }
    }
}

#[test]
fn check_finite_flags_nan() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![f64::NAN, 1.0]));
    let _ = x;
    assert!(tape.check_finite().is_err());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn logsumexp_translation_stable(xs in proptest::collection::vec(-20.0f64..20.0, 2..8), c in -50.0f64..50.0) {
            let mut tape = Tape::new();
            let n = xs.len();
            let a = tape.constant(vec![n], xs.clone());
            let b = tape.constant(vec![n], xs.iter().map(|v| v + c).collect());
            let la = tape.logsumexp(a, 0, false);
            let lb = tape.logsumexp(b, 0, false);
            let (la, lb) = (tape.value(la).item(), tape.value(lb).item());
            prop_assert!((lb - (la + c)).abs() < 1e-12 * (1.0 + la.abs() + c.abs()));
        }

        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut tape = Tape::new();
            let a = tape.constant(vec![3, 4], xs);
            let s = tape.softmax(a);
            for row in tape.value(s).values.chunks(4) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
