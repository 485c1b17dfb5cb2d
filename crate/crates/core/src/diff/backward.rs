//! Reverse sweep: visits every tape record exactly once, newest first.

use super::{axis_view, gelu_grad_scalar, logsumexp_slice, Bcast, Gradients, Op, Tape, TensorId};

/// Folds a full-shaped upstream gradient into the gradient of the broadcast
/// (right) operand of an elementwise op.
fn reduce_bcast(db: &mut [f64], g: &[f64], bc: Bcast, last: usize, sign: f64) {
    match bc {
        Bcast::Same => {
            for (d, &gv) in db.iter_mut().zip(g) {
                *d += sign * gv;
            }
        }
        Bcast::Scalar => {
            db[0] += sign * g.iter().sum::<f64>();
        }
        Bcast::TrailingVec => {
            for (i, &gv) in g.iter().enumerate() {
                db[i % last] += sign * gv;
            }
        }
        Bcast::KeepLast1 => {
            for (i, &gv) in g.iter().enumerate() {
                db[i / last] += sign * gv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Gradients of a scalar `loss` w.r.t. every tensor on the tape that
    /// requires grad. Tensors not connected to the loss keep a zero gradient.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        assert!(
            self.value(loss).is_scalar(),
            "backward from non-scalar of shape {:?}",
            self.value(loss).shape
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.backprop(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }

    fn acc<'g>(
        &self,
        grads: &'g mut Vec<Option<Vec<f64>>>,
        id: TensorId,
    ) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        Some(grads[id].get_or_insert_with(|| vec![0.0; self.value(id).numel()]))
    }

    fn backprop(&self, id: TensorId, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b, bc } => {
                if let Some(da) = self.acc(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                let d = self.value(*a).last_dim();
                if let Some(db) = self.acc(grads, *b) {
                    reduce_bcast(db, g, *bc, d, 1.0);
                }
            }
            Op::Sub { a, b, bc } => {
                if let Some(da) = self.acc(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                let d = self.value(*a).last_dim();
                if let Some(db) = self.acc(grads, *b) {
                    reduce_bcast(db, g, *bc, d, -1.0);
                }
            }
            Op::Mul { a, b, bc } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.last_dim();
                if self.nodes[*a].needs_grad {
                    let da = self.acc(grads, *a).unwrap();
                    match bc {
                        Bcast::Same => {
                            for i in 0..g.len() {
                                da[i] += g[i] * tb.values[i];
                            }
                        }
                        Bcast::Scalar => {
                            let y = tb.values[0];
                            for i in 0..g.len() {
                                da[i] += g[i] * y;
                            }
                        }
                        Bcast::TrailingVec => {
                            for i in 0..g.len() {
                                da[i] += g[i] * tb.values[i % d];
                            }
                        }
                        Bcast::KeepLast1 => {
                            for i in 0..g.len() {
                                da[i] += g[i] * tb.values[i / d];
                            }
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let scaled: Vec<f64> =
                        g.iter().zip(&ta.values).map(|(&gv, &av)| gv * av).collect();
                    let db = self.acc(grads, *b).unwrap();
                    reduce_bcast(db, &scaled, *bc, d, 1.0);
                }
            }
            Op::Scale { a, c } => {
                if let Some(da) = self.acc(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::AddConst { a, .. } => {
                if let Some(da) = self.acc(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Exp { a } => {
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * out.values[i];
                    }
                }
            }
            Op::Ln { a } => {
                let ta = self.value(*a);
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] / ta.values[i];
                    }
                }
            }
            Op::Softplus { a } => {
                let ta = self.value(*a);
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * sigmoid(ta.values[i]);
                    }
                }
            }
            Op::Gelu { a } => {
                let ta = self.value(*a);
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_grad_scalar(ta.values[i]);
                    }
                }
            }
            Op::Recip { a } => {
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        da[i] -= g[i] * out.values[i] * out.values[i];
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.nodes[*a].needs_grad {
                    let da = self.acc(grads, *a).unwrap();
                    for i in 0..*m {
                        for kk in 0..*k {
                            let brow = &tb.values[kk * n..(kk + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let mut s = 0.0;
                            for j in 0..*n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + kk] += s;
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let db = self.acc(grads, *b).unwrap();
                    for i in 0..*m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..*k {
                            let aik = ta.values[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..*n {
                                drow[j] += aik * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose2d { a, rows, cols } => {
                if let Some(da) = self.acc(grads, *a) {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            da[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = self.acc(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Softmax { a } => {
                let d = out.last_dim();
                if let Some(da) = self.acc(grads, *a) {
                    for r in 0..out.numel() / d {
                        let y = &out.values[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for i in 0..d {
                            da[r * d + i] += y[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let d = out.last_dim();
                if let Some(da) = self.acc(grads, *a) {
                    for r in 0..out.numel() / d {
                        let orow = &out.values[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let gsum: f64 = gr.iter().sum();
                        for i in 0..d {
                            da[r * d + i] += gr[i] - orow[i].exp() * gsum;
                        }
                    }
                }
            }
            Op::LogSumExp { a, axis, .. } => {
                let ta = self.value(*a);
                let (outer, extent, inner) = axis_view(&ta.shape, *axis);
                if let Some(da) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let ov = out.values[o * inner + i];
                            if ov == f64::NEG_INFINITY {
                                continue;
                            }
                            let gv = g[o * inner + i];
                            for e in 0..extent {
                                let idx = o * extent * inner + e * inner + i;
                                da[idx] += gv * (ta.values[idx] - ov).exp();
                            }
                        }
                    }
                }
            }
            Op::SumAxis { a, axis, .. } => {
                let ta = self.value(*a);
                let (outer, extent, inner) = axis_view(&ta.shape, *axis);
                if let Some(da) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for e in 0..extent {
                            for i in 0..inner {
                                da[o * extent * inner + e * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(da) = self.acc(grads, *a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll { a } => {
                let n = self.value(*a).numel() as f64;
                if let Some(da) = self.acc(grads, *a) {
                    for d in da.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::StackLast { parts } => {
                let k = parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    if let Some(dp) = self.acc(grads, p) {
                        for (i, d) in dp.iter_mut().enumerate() {
                            *d += g[i * k + pi];
                        }
                    }
                }
            }
            Op::IndexSelect { a, axis, indices } => {
                let ta = self.value(*a);
                let (outer, extent, inner) = axis_view(&ta.shape, *axis);
                if let Some(da) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for (ei, &e) in indices.iter().enumerate() {
                            for i in 0..inner {
                                da[o * extent * inner + e * inner + i] +=
                                    g[o * indices.len() * inner + ei * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape[1];
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for i in 0..d {
                            dt[id * d + i] += g[r * d + i];
                        }
                    }
                }
            }
            Op::TakePerRow { a, ids } => {
                let v = self.value(*a).shape[1];
                if let Some(da) = self.acc(grads, *a) {
                    for (r, &i) in ids.iter().enumerate() {
                        da[r * v + i] += g[r];
                    }
                }
            }
            Op::GatherToken { table, tokens, batch } => {
                let t = self.value(*table);
                let (p, c, v) = (t.shape[0], t.shape[1], t.shape[2]);
                if let Some(dt) = self.acc(grads, *table) {
                    for b in 0..*batch {
                        for pos in 0..p {
                            let tok = tokens[b * p + pos];
                            for ch in 0..c {
                                dt[(pos * c + ch) * v + tok] += g[(b * p + pos) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::LogMix { x, w } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, j, k) = (tw.shape[0], tw.shape[1], tw.shape[2]);
                let outer = tx.numel() / (n * k);
                let need_x = self.nodes[*x].needs_grad;
                let need_w = self.nodes[*w].needs_grad;
                let mut dx = if need_x { vec![0.0; tx.numel()] } else { Vec::new() };
                let mut dw = if need_w { vec![0.0; tw.numel()] } else { Vec::new() };
                for o in 0..outer {
                    for nn in 0..n {
                        let xbase = (o * n + nn) * k;
                        for jj in 0..j {
                            let ov = out.values[(o * n + nn) * j + jj];
                            if ov == f64::NEG_INFINITY {
                                continue;
                            }
                            let gv = g[(o * n + nn) * j + jj];
                            if gv == 0.0 {
                                continue;
                            }
                            let wbase = (nn * j + jj) * k;
                            for kk in 0..k {
                                let p = (tw.values[wbase + kk] + tx.values[xbase + kk] - ov).exp();
                                let contrib = gv * p;
                                if need_x {
                                    dx[xbase + kk] += contrib;
                                }
                                if need_w {
                                    dw[wbase + kk] += contrib;
                                }
                            }
                        }
                    }
                }
                if need_x {
                    let da = self.acc(grads, *x).unwrap();
                    for (d, v) in da.iter_mut().zip(dx) {
                        *d += v;
                    }
                }
                if need_w {
                    let da = self.acc(grads, *w).unwrap();
                    for (d, v) in da.iter_mut().zip(dw) {
                        *d += v;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = self.value(*x);
                let gm = &self.value(*gamma).values;
                let d = tx.last_dim();
                let rows = tx.numel() / d;
                let need_x = self.nodes[*x].needs_grad;
                let need_g = self.nodes[*gamma].needs_grad;
                let need_b = self.nodes[*beta].needs_grad;
                let mut dx = if need_x { vec![0.0; tx.numel()] } else { Vec::new() };
                let mut dg = if need_g { vec![0.0; d] } else { Vec::new() };
                let mut db = if need_b { vec![0.0; d] } else { Vec::new() };
                for r in 0..rows {
                    let row = &tx.values[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let mut m1 = 0.0; // mean of g*gamma
                    let mut m2 = 0.0; // mean of g*gamma*xhat
                    for i in 0..d {
                        let xhat = (row[i] - mean) * rstd;
                        let gg = gr[i] * gm[i];
                        m1 += gg;
                        m2 += gg * xhat;
                        if need_g {
                            dg[i] += gr[i] * xhat;
                        }
                        if need_b {
                            db[i] += gr[i];
                        }
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    if need_x {
                        for i in 0..d {
                            let xhat = (row[i] - mean) * rstd;
                            let gg = gr[i] * gm[i];
                            dx[r * d + i] += rstd * (gg - m1 - xhat * m2);
                        }
                    }
                }
                if need_x {
                    let da = self.acc(grads, *x).unwrap();
                    for (dst, v) in da.iter_mut().zip(dx) {
                        *dst += v;
                    }
                }
                if need_g {
                    let da = self.acc(grads, *gamma).unwrap();
                    for (dst, v) in da.iter_mut().zip(dg) {
                        *dst += v;
                    }
                }
                if need_b {
                    let da = self.acc(grads, *beta).unwrap();
                    for (dst, v) in da.iter_mut().zip(db) {
                        *dst += v;
                    }
                }
            }
            Op::Dropout { x, keep, mask } => {
                let inv = 1.0 / keep;
                if let Some(da) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        if mask[i] {
                            da[i] += g[i] * inv;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, allowed } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let s = &tq.shape;
                let (b, h, t, dh) = (s[0], s[1], s[2], s[3]);
                let scale = 1.0 / (dh as f64).sqrt();
                let need_q = self.nodes[*q].needs_grad;
                let need_k = self.nodes[*k].needs_grad;
                let need_v = self.nodes[*v].needs_grad;
                let mut dq = if need_q { vec![0.0; tq.numel()] } else { Vec::new() };
                let mut dk = if need_k { vec![0.0; tk.numel()] } else { Vec::new() };
                let mut dv = if need_v { vec![0.0; tv.numel()] } else { Vec::new() };
                let mut probs = vec![0.0; t];
                let mut dprob = vec![0.0; t];
                for bi in 0..b {
                    for hi in 0..h {
                        let base = (bi * h + hi) * t * dh;
                        for qi in 0..t {
                            let qrow = &tq.values[base + qi * dh..base + (qi + 1) * dh];
                            // recompute the softmax row
                            let mut max = f64::NEG_INFINITY;
                            for ki in 0..t {
                                probs[ki] = if allowed[qi * t + ki] {
                                    let krow = &tk.values[base + ki * dh..base + (ki + 1) * dh];
                                    let dot: f64 =
                                        qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                                    let sc = dot * scale;
                                    if sc > max {
                                        max = sc;
                                    }
                                    sc
                                } else {
                                    f64::NEG_INFINITY
                                };
                            }
                            let mut sum = 0.0;
                            for p in probs.iter_mut() {
                                *p = if p.is_finite() { (*p - max).exp() } else { 0.0 };
                                sum += *p;
                            }
                            for p in probs.iter_mut() {
                                *p /= sum;
                            }
                            let grow = &g[base + qi * dh..base + (qi + 1) * dh];
                            // dV and dP
                            let mut dot_dp_p = 0.0;
                            for ki in 0..t {
                                if probs[ki] == 0.0 {
                                    dprob[ki] = 0.0;
                                    continue;
                                }
                                let vrow = &tv.values[base + ki * dh..base + (ki + 1) * dh];
                                let dp: f64 = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                                dprob[ki] = dp;
                                dot_dp_p += dp * probs[ki];
                                if need_v {
                                    let dvrow = &mut dv[base + ki * dh..base + (ki + 1) * dh];
                                    for di in 0..dh {
                                        dvrow[di] += probs[ki] * grow[di];
                                    }
                                }
                            }
                            // dScore -> dQ, dK
                            for ki in 0..t {
                                if probs[ki] == 0.0 {
                                    continue;
                                }
                                let ds = probs[ki] * (dprob[ki] - dot_dp_p) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = &tk.values[base + ki * dh..base + (ki + 1) * dh];
                                if need_q {
                                    let dqrow = &mut dq[base + qi * dh..base + (qi + 1) * dh];
                                    for di in 0..dh {
                                        dqrow[di] += ds * krow[di];
                                    }
                                }
                                if need_k {
                                    let dkrow = &mut dk[base + ki * dh..base + (ki + 1) * dh];
                                    for di in 0..dh {
                                        dkrow[di] += ds * qrow[di];
                                    }
                                }
                            }
                        }
                    }
                }
                if need_q {
                    let da = self.acc(grads, *q).unwrap();
                    for (dst, v) in da.iter_mut().zip(dq) {
                        *dst += v;
                    }
                }
                if need_k {
                    let da = self.acc(grads, *k).unwrap();
                    for (dst, v) in da.iter_mut().zip(dk) {
                        *dst += v;
                    }
                }
                if need_v {
                    let da = self.acc(grads, *v).unwrap();
                    for (dst, v) in da.iter_mut().zip(dv) {
                        *dst += v;
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                let tx = self.value(*x);
                let (b, tt, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let dh = d / heads;
                if let Some(da) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for ti in 0..tt {
                            for hi in 0..*heads {
                                let dst = (bi * tt + ti) * d + hi * dh;
                                let src = ((bi * heads + hi) * tt + ti) * dh;
                                for i in 0..dh {
                                    da[dst + i] += g[src + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, .. } => {
                let tx = self.value(*x);
                let (b, h, tt, dh) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
                let d = h * dh;
                if let Some(da) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for hi in 0..h {
                            for ti in 0..tt {
                                let dst = ((bi * h + hi) * tt + ti) * dh;
                                let src = (bi * tt + ti) * d + hi * dh;
                                for i in 0..dh {
                                    da[dst + i] += g[src + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let t = self.value(*logits);
                let v = t.shape[1];
                let count = targets.iter().filter(|&&tg| tg >= 0).count() as f64;
                if let Some(da) = self.acc(grads, *logits) {
                    for (r, &tg) in targets.iter().enumerate() {
                        if tg < 0 {
                            continue;
                        }
                        let row = &t.values[r * v..(r + 1) * v];
                        let lse = logsumexp_slice(row.iter().cloned());
                        for i in 0..v {
                            let p = (row[i] - lse).exp();
                            let onehot = if i == tg as usize { 1.0 } else { 0.0 };
                            da[r * v + i] += g[0] * (p - onehot) / count;
                        }
                    }
                }
            }
            Op::MaskedMean { x, mask } => {
                let count = mask.iter().filter(|&&m| m).count() as f64;
                if let Some(da) = self.acc(grads, *x) {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            da[i] += g[0] / count;
                        }
                    }
                }
            }
        }
    }
}
