//! Per-tile kernels.
//!
//! A tile holds `kb` consecutive samples; every buffer is row-major with the
//! value of row `r`, sample `b` at `r * kb + b`. Rows below the reserved
//! count are constant `-inf` (values) or zero (flows) and pseudo entries of
//! the index tensors point at them, so the kernels skip such entries instead
//! of reading them.

use num_traits::{Float, FromPrimitive};

use crate::compiler::{ElementStage, SumGroupBackIr, SumGroupIr};

/// Floating-point type the engine can run in.
pub trait Real: Float + FromPrimitive + Send + Sync + Default + std::fmt::Debug + std::iter::Sum + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + Send + Sync + Default + std::fmt::Debug + std::iter::Sum + 'static {}

#[inline]
fn row<R>(buf: &[R], r: usize, kb: usize) -> &[R] {
    &buf[r * kb..(r + 1) * kb]
}

#[inline]
fn row_mut<R>(buf: &mut [R], r: usize, kb: usize) -> &mut [R] {
    &mut buf[r * kb..(r + 1) * kb]
}

/// Rescaling factors for folding a block with column maxima `lmax` into a
/// running `(max, scaled sum)` accumulator: the old sums are multiplied by
/// `keep` and the block's partial sums by `add`. Updates `acc_max`.
#[inline]
pub fn merge_factors<R: Real>(acc_max: &mut [R], lmax: &[R], keep: &mut [R], add: &mut [R]) {
    let ninf = R::neg_infinity();
    for (((a, &m), k), d) in acc_max.iter_mut().zip(lmax).zip(keep.iter_mut()).zip(add.iter_mut()) {
        if m == ninf {
            (*k, *d) = (R::one(), R::zero());
        } else if m > *a {
            (*k, *d) = ((*a - m).exp(), R::one());
            *a = m;
        } else {
            (*k, *d) = (R::one(), (m - *a).exp());
        }
    }
}

#[inline]
fn fold_row<R: Real>(acc: &mut [R], ps: &[R], keep: &[R], add: &[R]) {
    for (((a, &p), &k), &d) in acc.iter_mut().zip(ps).zip(keep).zip(add) {
        *a = *a * k + p * d;
    }
}

#[inline]
fn finish_row<R: Real>(dst: &mut [R], acc: &[R], acc_max: &[R]) {
    for ((d, &a), &m) in dst.iter_mut().zip(acc).zip(acc_max) {
        *d = a.ln() + m;
    }
}

/// Evaluates every element of a stage into `out` rows `offset..`: the sum of
/// its source value rows, or `-inf` for padding.
pub fn eval_stage<R: Real>(stage: &ElementStage, vals: &[R], out: &mut [R], offset: usize, kb: usize) {
    for e in 0..stage.len() {
        let dst = row_mut(out, offset + e, kb);
        let src = stage.sources(e);
        match src.split_first() {
            None => dst.fill(R::neg_infinity()),
            Some((&first, rest)) => {
                dst.copy_from_slice(row(vals, first as usize, kb));
                for &s in rest {
                    for (d, &v) in dst.iter_mut().zip(row(vals, s as usize, kb)) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Column maxima of every `k`-row block in `rows` (stored in the block's first
/// row of `max_out`) and `exp(value - max)` of every row (in `exp_out`).
pub fn prepare_blocks<R: Real>(
    vals: &[R],
    rows: std::ops::Range<usize>,
    k: usize,
    kb: usize,
    exp_out: &mut [R],
    max_out: &mut [R],
) {
    let ninf = R::neg_infinity();
    let mut start = rows.start;
    while start < rows.end {
        let mx = row_mut(max_out, start, kb);
        mx.fill(ninf);
        for r in start..start + k {
            for (m, &v) in mx.iter_mut().zip(row(vals, r, kb)) {
                *m = m.max(v);
            }
        }
        let mx = row(max_out, start, kb);
        for r in start..start + k {
            let e = row_mut(exp_out, r, kb);
            for ((o, &v), &m) in e.iter_mut().zip(row(vals, r, kb)).zip(mx) {
                *o = if m == ninf { R::zero() } else { (v - m).exp() };
            }
        }
        start += k;
    }
}

/// Blocked forward pass of one group over one tile. `elem_exp` and
/// `elem_max` come from [`prepare_blocks`] over the stage's child blocks.
#[allow(clippy::too_many_arguments)]
pub fn forward_group_blocked<R: Real>(
    ir: &SumGroupIr,
    theta: &[R],
    reserve_n: usize,
    kb: usize,
    elem_exp: &[R],
    elem_max: &[R],
    out: &mut [R],
) {
    let (km, kn, cn) = (ir.k_m as usize, ir.k_n as usize, ir.c_n as usize);
    let mut acc = vec![R::zero(); km * kb];
    let mut acc_max = vec![R::neg_infinity(); kb];
    let mut ps = vec![R::zero(); km * kb];
    let (mut keep, mut add) = (vec![R::one(); kb], vec![R::zero(); kb]);
    for (i, &sum_row) in ir.sum_ids.iter().enumerate() {
        acc.fill(R::zero());
        acc_max.fill(R::neg_infinity());
        for j in 0..cn {
            let child = ir.prod_ids[i * cn + j] as usize;
            if child < reserve_n {
                continue;
            }
            let th = &theta[ir.param_ids[i * cn + j] as usize..][..km * kn];
            ps.fill(R::zero());
            for r in 0..km {
                let p = &mut ps[r * kb..(r + 1) * kb];
                for k in 0..kn {
                    let t = th[r * kn + k];
                    if t == R::zero() {
                        continue;
                    }
                    for (p, &e) in p.iter_mut().zip(row(elem_exp, child + k, kb)) {
                        *p = *p + t * e;
                    }
                }
            }
            merge_factors(&mut acc_max, row(elem_max, child, kb), &mut keep, &mut add);
            for r in 0..km {
                fold_row(&mut acc[r * kb..(r + 1) * kb], &ps[r * kb..(r + 1) * kb], &keep, &add);
            }
        }
        for r in 0..km {
            finish_row(row_mut(out, sum_row as usize + r, kb), &acc[r * kb..(r + 1) * kb], &acc_max);
        }
    }
}

/// Forward pass of a group with single-node blocks: a max pass over the
/// children followed by one weighted exponential sum.
pub fn forward_group_scalar<R: Real>(ir: &SumGroupIr, theta: &[R], reserve_n: usize, kb: usize, elems: &[R], out: &mut [R]) {
    let cn = ir.c_n as usize;
    let ninf = R::neg_infinity();
    let mut mx = vec![ninf; kb];
    let mut s = vec![R::zero(); kb];
    for (i, &sum_row) in ir.sum_ids.iter().enumerate() {
        let children = &ir.prod_ids[i * cn..(i + 1) * cn];
        let params = &ir.param_ids[i * cn..(i + 1) * cn];
        mx.fill(ninf);
        for (&c, &p) in children.iter().zip(params) {
            if (c as usize) < reserve_n || theta[p as usize] == R::zero() {
                continue;
            }
            for (m, &v) in mx.iter_mut().zip(row(elems, c as usize, kb)) {
                *m = m.max(v);
            }
        }
        s.fill(R::zero());
        for (&c, &p) in children.iter().zip(params) {
            let t = theta[p as usize];
            if (c as usize) < reserve_n || t == R::zero() {
                continue;
            }
            for ((acc, &v), &m) in s.iter_mut().zip(row(elems, c as usize, kb)).zip(&mx) {
                if m != ninf {
                    *acc = *acc + t * (v - m).exp();
                }
            }
        }
        let dst = row_mut(out, sum_row as usize, kb);
        for ((d, &acc), &m) in dst.iter_mut().zip(&s).zip(&mx) {
            *d = if m == ninf { ninf } else { acc.ln() + m };
        }
    }
}

/// `ln(f / p)` of every row in `rows`, `-inf` where the flow is zero or the
/// value is `-inf`.
pub fn log_flow_ratio<R: Real>(vals: &[R], flows: &[R], rows: std::ops::Range<usize>, kb: usize, out: &mut [R]) {
    let ninf = R::neg_infinity();
    for r in rows {
        let o = row_mut(out, r, kb);
        for ((o, &l), &f) in o.iter_mut().zip(row(vals, r, kb)).zip(row(flows, r, kb)) {
            *o = if f <= R::zero() || l == ninf { ninf } else { f.ln() - l };
        }
    }
}

/// Backward pass of one group over one tile: child flows
/// `f_c = exp(l_c + ln sum_m theta_mc * f_m / p_m)`. `nf_exp` and `nf_max`
/// come from [`prepare_blocks`] over the layer's `ln(f / p)` rows.
#[allow(clippy::too_many_arguments)]
pub fn backward_group<R: Real>(
    ir: &SumGroupBackIr,
    theta: &[R],
    reserve_m: usize,
    kb: usize,
    nf_exp: &[R],
    nf_max: &[R],
    elems: &[R],
    elem_flow: &mut [R],
) {
    let (km, kn, cm) = (ir.k_m as usize, ir.k_n as usize, ir.c_m as usize);
    let mut cum = vec![R::zero(); kn * kb];
    let mut cum_max = vec![R::neg_infinity(); kb];
    let mut ps = vec![R::zero(); kn * kb];
    let (mut keep, mut add) = (vec![R::one(); kb], vec![R::zero(); kb]);
    for (i, &child) in ir.ch_ids.iter().enumerate() {
        let child = child as usize;
        cum.fill(R::zero());
        cum_max.fill(R::neg_infinity());
        for j in 0..cm {
            let par = ir.par_ids[i * cm + j] as usize;
            if par < reserve_m {
                continue;
            }
            let th = &theta[ir.par_param_ids[i * cm + j] as usize..][..km * kn];
            ps.fill(R::zero());
            for r in 0..km {
                let e = row(nf_exp, par + r, kb);
                for k in 0..kn {
                    let t = th[r * kn + k];
                    if t == R::zero() {
                        continue;
                    }
                    for (p, &e) in ps[k * kb..(k + 1) * kb].iter_mut().zip(e) {
                        *p = *p + t * e;
                    }
                }
            }
            merge_factors(&mut cum_max, row(nf_max, par, kb), &mut keep, &mut add);
            for k in 0..kn {
                fold_row(&mut cum[k * kb..(k + 1) * kb], &ps[k * kb..(k + 1) * kb], &keep, &add);
            }
        }
        for k in 0..kn {
            let dst = row_mut(elem_flow, child + k, kb);
            let src = &cum[k * kb..(k + 1) * kb];
            for (((d, &c), &m), &l) in dst.iter_mut().zip(src).zip(&cum_max).zip(row(elems, child + k, kb)) {
                *d = if c == R::zero() { R::zero() } else { (c.ln() + m + l).exp() };
            }
        }
    }
}

/// Backward pass of a group with single-node blocks, reading the raw
/// `ln(f / p)` rows: a max pass over the parents followed by one weighted
/// exponential sum per child.
pub fn backward_group_scalar<R: Real>(
    ir: &SumGroupBackIr,
    theta: &[R],
    reserve_m: usize,
    kb: usize,
    ratio: &[R],
    elems: &[R],
    elem_flow: &mut [R],
) {
    let cm = ir.c_m as usize;
    let ninf = R::neg_infinity();
    let mut mx = vec![ninf; kb];
    let mut s = vec![R::zero(); kb];
    for (i, &child) in ir.ch_ids.iter().enumerate() {
        let parents = &ir.par_ids[i * cm..(i + 1) * cm];
        let params = &ir.par_param_ids[i * cm..(i + 1) * cm];
        mx.fill(ninf);
        for (&m, &p) in parents.iter().zip(params) {
            if (m as usize) < reserve_m || theta[p as usize] == R::zero() {
                continue;
            }
            for (x, &v) in mx.iter_mut().zip(row(ratio, m as usize, kb)) {
                *x = x.max(v);
            }
        }
        s.fill(R::zero());
        for (&m, &p) in parents.iter().zip(params) {
            let t = theta[p as usize];
            if (m as usize) < reserve_m || t == R::zero() {
                continue;
            }
            for ((acc, &v), &x) in s.iter_mut().zip(row(ratio, m as usize, kb)).zip(&mx) {
                if x != ninf {
                    *acc = *acc + t * (v - x).exp();
                }
            }
        }
        let dst = row_mut(elem_flow, child as usize, kb);
        for (((d, &acc), &x), &l) in dst.iter_mut().zip(&s).zip(&mx).zip(row(elems, child as usize, kb)) {
            *d = if x == ninf { R::zero() } else { (acc.ln() + x + l).exp() };
        }
    }
}

/// Adds this tile's contribution `sum_b exp(ln(f_m/p_m) + l_c)` for one block
/// pair into `cum` (`k_m x k_n`, row-major). Only the first `cols` samples of
/// the tile are real.
#[allow(clippy::too_many_arguments)]
pub fn pair_flow_tile<R: Real>(
    sum_row: usize,
    child_row: usize,
    km: usize,
    kn: usize,
    kb: usize,
    cols: usize,
    nf_exp: &[R],
    nf_max: &[R],
    elems: &[R],
    weights: &mut [R],
    cum: &mut [R],
) {
    let ninf = R::neg_infinity();
    let mx = &row(nf_max, sum_row, kb)[..cols];
    for k in 0..kn {
        let w = &mut weights[k * kb..k * kb + cols];
        for ((w, &l), &m) in w.iter_mut().zip(row(elems, child_row + k, kb)).zip(mx) {
            *w = if m == ninf { R::zero() } else { (l + m).exp() };
        }
    }
    for r in 0..km {
        let e = &row(nf_exp, sum_row + r, kb)[..cols];
        for k in 0..kn {
            let w = &weights[k * kb..k * kb + cols];
            let dot: R = e.iter().zip(w).map(|(&a, &b)| a * b).sum();
            cum[r * kn + k] = cum[r * kn + k] + dot;
        }
    }
}

/// Adds element flows to their product rows and to every source row.
pub fn push_stage_flows<R: Real>(stage: &ElementStage, offset: usize, elem_flow: &[R], flows: &mut [R], prod_flow: &mut [R], kb: usize) {
    for e in 0..stage.len() {
        let f = row(elem_flow, offset + e, kb);
        let p = stage.product[e];
        if p != crate::compiler::NONE {
            for (d, &v) in row_mut(prod_flow, p as usize, kb).iter_mut().zip(f) {
                *d = *d + v;
            }
        }
        for &s in stage.sources(e) {
            for (d, &v) in row_mut(flows, s as usize, kb).iter_mut().zip(f) {
                *d = *d + v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lse(v: &[f64]) -> f64 {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn running_merge_equals_logsumexp() {
        let parts = [[-1.0, -3.0], [-0.5, f64::NEG_INFINITY], [-700.0, -2.0], [f64::NEG_INFINITY; 2]];
        let mut acc = vec![0.0];
        let mut acc_max = vec![f64::NEG_INFINITY];
        let (mut keep, mut add) = (vec![0.0], vec![0.0]);
        let mut all = Vec::new();
        for p in parts {
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ps = [if m == f64::NEG_INFINITY { 0.0 } else { p.iter().map(|x| (x - m).exp()).sum::<f64>() }];
            merge_factors(&mut acc_max, &[m], &mut keep, &mut add);
            fold_row(&mut acc, &ps, &keep, &add);
            all.extend(p);
        }
        let mut out = [0.0];
        finish_row(&mut out, &acc, &acc_max);
        assert!((out[0] - lse(&all)).abs() < 1e-15);
    }

    #[test]
    fn one_block_on_equal_children() {
        // theta row [0.3, 0.7] over two children at ln 0.5
        let ir = SumGroupIr { k_m: 1, k_n: 2, c_m: 1, c_n: 1, sum_ids: vec![1], prod_ids: vec![2], param_ids: vec![2] };
        let theta = [0.0, 0.0, 0.3, 0.7];
        let elems = [f64::NEG_INFINITY, f64::NEG_INFINITY, 0.5f64.ln(), 0.5f64.ln()];
        let mut ex = vec![0.0; 4];
        let mut mx = vec![0.0; 4];
        prepare_blocks(&elems, 2..4, 2, 1, &mut ex, &mut mx);
        let mut out = vec![0.0; 2];
        forward_group_blocked(&ir, &theta, 2, 1, &ex, &mx, &mut out);
        assert!((out[1] - 0.5f64.ln()).abs() < 1e-15);
        let scalar = SumGroupIr { k_m: 1, k_n: 1, c_m: 1, c_n: 2, sum_ids: vec![1], prod_ids: vec![2, 3], param_ids: vec![2, 3] };
        let mut out2 = vec![0.0; 2];
        forward_group_scalar(&scalar, &theta, 2, 1, &elems, &mut out2);
        assert!((out2[1] - out[1]).abs() < 1e-15);
    }
}
