//! Layer primitives with hand-written backward passes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn lrelu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn lrelu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| (v - lse).exp()).collect()
}

/// Gradient w.r.t. logits given the gradient w.r.t. the softmax output.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pk, dk)| pk * (dk - dot)).collect()
}

fn check_cols(w: &DMatrix<f64>, x: usize) -> Result<()> {
    if w.ncols() != x {
        return Err(Error::DimensionMismatch {
            expected: w.ncols(),
            actual: x,
        });
    }
    Ok(())
}

/// `lrelu(W x)`; also returns the pre-activation.
pub fn fc_forward(w: &DMatrix<f64>, x: &DVector<f64>, slope: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    check_cols(w, x.len())?;
    let pre = w * x;
    let out = pre.map(|v| lrelu(v, slope));
    Ok((out, pre))
}

pub fn fc_backward(
    w: &DMatrix<f64>,
    x: &DVector<f64>,
    pre: &DVector<f64>,
    dy: &DVector<f64>,
    slope: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let dpre = dy.zip_map(pre, |d, p| d * lrelu_grad(p, slope));
    let dw = &dpre * x.transpose();
    let dx = w.transpose() * &dpre;
    (dw, dx)
}

/// One attention pair: the query-side input and the neighbor input.
pub type GatPair = (DVector<f64>, DVector<f64>);

#[derive(Debug, Clone)]
pub struct GatCache {
    proj_c: Vec<Vec<DVector<f64>>>,
    proj_d: Vec<Vec<DVector<f64>>>,
    logits: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    agg: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct GatGrad {
    pub w: Vec<DMatrix<f64>>,
    pub att: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
    pub d: Vec<DVector<f64>>,
}

/// Multi-head attention aggregation at one node. Head k scores pair j with
/// `lrelu(att_k · [W_k c_j ; W_k d_j])`, normalizes by softmax over j, and
/// the node output is `lrelu(mean_k Σ_j α_kj W_k d_j)`.
///
/// `att_k` is a 1 × 2V row.
pub fn gat_forward(w: &[DMatrix<f64>], att: &[DMatrix<f64>], pairs: &[GatPair], slope: f64) -> Result<(DVector<f64>, GatCache)> {
    if w.is_empty() || w.len() != att.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            actual: att.len(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Empty("attention neighborhood"));
    }
    let out_dim = w[0].nrows();
    let heads = w.len() as f64;
    let mut agg = DVector::zeros(out_dim);
    let mut cache = GatCache {
        proj_c: Vec::with_capacity(w.len()),
        proj_d: Vec::with_capacity(w.len()),
        logits: Vec::with_capacity(w.len()),
        alpha: Vec::with_capacity(w.len()),
        agg: DVector::zeros(0),
    };
    for (wk, ak) in w.iter().zip(att) {
        if ak.ncols() != 2 * wk.nrows() || wk.nrows() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: 2 * wk.nrows(),
                actual: ak.ncols(),
            });
        }
        let mut pc = Vec::with_capacity(pairs.len());
        let mut pd = Vec::with_capacity(pairs.len());
        let mut e = Vec::with_capacity(pairs.len());
        for (c, d) in pairs {
            check_cols(wk, c.len())?;
            check_cols(wk, d.len())?;
            let wc = wk * c;
            let wd = wk * d;
            let score = ak.columns(0, out_dim).dot(&wc.transpose()) + ak.columns(out_dim, out_dim).dot(&wd.transpose());
            e.push(score);
            pc.push(wc);
            pd.push(wd);
        }
        let s: Vec<f64> = e.iter().map(|&v| lrelu(v, slope)).collect();
        let alpha = softmax(&s);
        for (a, wd) in alpha.iter().zip(&pd) {
            agg += wd * (*a / heads);
        }
        cache.proj_c.push(pc);
        cache.proj_d.push(pd);
        cache.logits.push(e);
        cache.alpha.push(alpha);
    }
    let out = agg.map(|v| lrelu(v, slope));
    cache.agg = agg;
    Ok((out, cache))
}

pub fn gat_backward(
    w: &[DMatrix<f64>],
    att: &[DMatrix<f64>],
    pairs: &[GatPair],
    cache: &GatCache,
    dq: &DVector<f64>,
    slope: f64,
) -> GatGrad {
    let out_dim = w[0].nrows();
    let heads = w.len() as f64;
    let dagg = dq.zip_map(&cache.agg, |d, a| d * lrelu_grad(a, slope));
    let dm = &dagg / heads;
    let mut grad = GatGrad {
        w: w.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect(),
        att: att.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect(),
        c: pairs.iter().map(|(c, _)| DVector::zeros(c.len())).collect(),
        d: pairs.iter().map(|(_, d)| DVector::zeros(d.len())).collect(),
    };
    for k in 0..w.len() {
        let alpha = &cache.alpha[k];
        let pd = &cache.proj_d[k];
        let pc = &cache.proj_c[k];
        let dalpha: Vec<f64> = pd.iter().map(|v| v.dot(&dm)).collect();
        let ds = softmax_backward(alpha, &dalpha);
        let att_c = att[k].columns(0, out_dim).transpose();
        let att_d = att[k].columns(out_dim, out_dim).transpose();
        for (j, (c, d)) in pairs.iter().enumerate() {
            let de = ds[j] * lrelu_grad(cache.logits[k][j], slope);
            {
                let mut ga = grad.att[k].columns_mut(0, out_dim);
                ga += pc[j].transpose() * de;
            }
            {
                let mut ga = grad.att[k].columns_mut(out_dim, out_dim);
                ga += pd[j].transpose() * de;
            }
            let dpc = &att_c * de;
            let dpd = &dm * alpha[j] + &att_d * de;
            grad.w[k] += &dpc * c.transpose() + &dpd * d.transpose();
            grad.c[j] += w[k].transpose() * dpc;
            grad.d[j] += w[k].transpose() * dpd;
        }
    }
    grad
}

/// GRU weights; every matrix is V × V.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub we1: DMatrix<f64>,
    pub we2: DMatrix<f64>,
    pub wr1: DMatrix<f64>,
    pub wr2: DMatrix<f64>,
    pub wa: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl GruWeights {
    pub fn zeros(v: usize) -> Self {
        let z = DMatrix::zeros(v, v);
        Self {
            we1: z.clone(),
            we2: z.clone(),
            wr1: z.clone(),
            wr2: z.clone(),
            wa: z.clone(),
            u: z,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GruCache {
    e: DVector<f64>,
    r: DVector<f64>,
    cand: DVector<f64>,
}

pub struct GruGrad {
    pub weights: GruWeights,
    pub z: DVector<f64>,
    pub h: DVector<f64>,
}

pub fn gru_step(g: &GruWeights, z: &DVector<f64>, h: &DVector<f64>) -> Result<(DVector<f64>, GruCache)> {
    check_cols(&g.we1, z.len())?;
    check_cols(&g.we2, h.len())?;
    if g.we1.nrows() != h.len() {
        return Err(Error::DimensionMismatch {
            expected: g.we1.nrows(),
            actual: h.len(),
        });
    }
    let e = (&g.we1 * z + &g.we2 * h).map(sigmoid);
    let r = (&g.wr1 * z + &g.wr2 * h).map(sigmoid);
    let cand = (&g.wa * z + &g.u * r.component_mul(h)).map(f64::tanh);
    let out = h.zip_zip_map(&e, &cand, |hp, ev, c| (1.0 - ev) * hp + ev * c);
    Ok((out, GruCache { e, r, cand }))
}

pub fn gru_backward(g: &GruWeights, z: &DVector<f64>, h: &DVector<f64>, cache: &GruCache, dout: &DVector<f64>) -> GruGrad {
    let GruCache { e, r, cand } = cache;
    let de = dout.component_mul(&(cand - h));
    let dcand = dout.component_mul(e);
    let mut dh = dout.zip_map(e, |d, ev| d * (1.0 - ev));

    let dcand_pre = dcand.zip_map(cand, |d, c| d * (1.0 - c * c));
    let rh = r.component_mul(h);
    let wa = &dcand_pre * z.transpose();
    let u = &dcand_pre * rh.transpose();
    let mut dz = g.wa.transpose() * &dcand_pre;
    let drh = g.u.transpose() * &dcand_pre;
    let dr = drh.component_mul(h);
    dh += drh.component_mul(r);

    let de_pre = de.zip_map(e, |d, ev| d * ev * (1.0 - ev));
    let we1 = &de_pre * z.transpose();
    let we2 = &de_pre * h.transpose();
    dz += g.we1.transpose() * &de_pre;
    dh += g.we2.transpose() * &de_pre;

    let dr_pre = dr.zip_map(r, |d, rv| d * rv * (1.0 - rv));
    let wr1 = &dr_pre * z.transpose();
    let wr2 = &dr_pre * h.transpose();
    dz += g.wr1.transpose() * &dr_pre;
    dh += g.wr2.transpose() * &dr_pre;

    GruGrad {
        weights: GruWeights { we1, we2, wr1, wr2, wa, u },
        z: dz,
        h: dh,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    const SLOPE: f64 = 0.01;

    fn rmat(r: &mut rng::SimRng, n: usize, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| r.random_range(-1.0..1.0))
    }

    fn rvec(r: &mut rng::SimRng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0))
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn fc_examples() {
        let x = DVector::from_vec(vec![0.5, 2.0, 0.0]);
        let (y, _) = fc_forward(&DMatrix::identity(3, 3), &x, SLOPE).unwrap();
        assert_eq!(y, x);
        let (y, _) = fc_forward(&DMatrix::zeros(2, 3), &x, SLOPE).unwrap();
        assert_eq!(y, DVector::zeros(2));
        let mut r = rng::stream(1, &[]);
        let w = rmat(&mut r, 4, 3);
        let x = rvec(&mut r, 3);
        let (y, _) = fc_forward(&w, &x, SLOPE).unwrap();
        for i in 0..4 {
            let p: f64 = (0..3).map(|j| w[(i, j)] * x[j]).sum();
            assert!((y[i] - lrelu(p, SLOPE)).abs() < 1e-14);
        }
        assert!(fc_forward(&w, &DVector::zeros(2), SLOPE).is_err());
    }

    #[test]
    fn fc_gradients() {
        let mut r = rng::stream(2, &[]);
        for _ in 0..50 {
            let (n, m) = (r.random_range(1..6), r.random_range(1..6));
            let mut w = rmat(&mut r, n, m);
            let mut x = rvec(&mut r, m);
            let c = rvec(&mut r, n);
            let loss = |w: &DMatrix<f64>, x: &DVector<f64>| fc_forward(w, x, SLOPE).unwrap().0.dot(&c);
            let (_, pre) = fc_forward(&w, &x, SLOPE).unwrap();
            let (dw, dx) = fc_backward(&w, &x, &pre, &c, SLOPE);
            for k in 0..n * m {
                let base = w.as_slice()[k];
                let h = 1e-6;
                w.as_mut_slice()[k] = base + h;
                let p = loss(&w, &x);
                w.as_mut_slice()[k] = base - h;
                let q = loss(&w, &x);
                w.as_mut_slice()[k] = base;
                assert!(rel((p - q) / (2.0 * h), dw.as_slice()[k]) < 1e-3);
            }
            for k in 0..m {
                let base = x[k];
                x[k] = base + 1e-6;
                let p = loss(&w, &x);
                x[k] = base - 1e-6;
                let q = loss(&w, &x);
                x[k] = base;
                assert!(rel((p - q) / 2e-6, dx[k]) < 1e-3);
            }
        }
    }

    fn gat_instance(r: &mut rng::SimRng, heads: usize, din: usize, dout: usize, n: usize) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<GatPair>) {
        let w = (0..heads).map(|_| rmat(r, dout, din)).collect();
        let att = (0..heads).map(|_| rmat(r, 1, 2 * dout)).collect();
        let pairs = (0..n).map(|_| (rvec(r, din), rvec(r, din))).collect();
        (w, att, pairs)
    }

    #[test]
    fn gat_examples() {
        let mut r = rng::stream(3, &[]);
        let (w, att, pairs) = gat_instance(&mut r, 2, 4, 3, 1);
        let (_, cache) = gat_forward(&w, &att, &pairs, SLOPE).unwrap();
        assert!(cache.alpha.iter().all(|a| a == &vec![1.0]));

        let c = rvec(&mut r, 4);
        let d = rvec(&mut r, 4);
        let same = vec![(c.clone(), d.clone()); 4];
        let (_, cache) = gat_forward(&w, &att, &same, SLOPE).unwrap();
        for a in &cache.alpha {
            assert!(a.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn gat_matches_straight_line() {
        let mut r = rng::stream(4, &[]);
        let (w, att, pairs) = gat_instance(&mut r, 2, 4, 3, 5);
        let (out, _) = gat_forward(&w, &att, &pairs, SLOPE).unwrap();
        let mut acc = [0.0; 3];
        for k in 0..2 {
            let proj = |v: &DVector<f64>| -> Vec<f64> { (0..3).map(|o| (0..4).map(|i| w[k][(o, i)] * v[i]).sum()).collect() };
            let mut s = Vec::new();
            for (c, d) in &pairs {
                let (pc, pd) = (proj(c), proj(d));
                let e: f64 = (0..3).map(|o| att[k][(0, o)] * pc[o] + att[k][(0, 3 + o)] * pd[o]).sum();
                s.push(if e > 0.0 { e } else { SLOPE * e });
            }
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for (j, (_, d)) in pairs.iter().enumerate() {
                let pd = proj(d);
                for o in 0..3 {
                    acc[o] += 0.5 * s[j].exp() / z * pd[o];
                }
            }
        }
        for o in 0..3 {
            let expect = if acc[o] > 0.0 { acc[o] } else { SLOPE * acc[o] };
            assert!((out[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gat_gradients() {
        let mut r = rng::stream(5, &[]);
        for _ in 0..50 {
            let heads = r.random_range(1..4);
            let (din, dout, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            let (mut w, mut att, mut pairs) = gat_instance(&mut r, heads, din, dout, n);
            let cvec = rvec(&mut r, dout);
            let (_, cache) = gat_forward(&w, &att, &pairs, SLOPE).unwrap();
            let g = gat_backward(&w, &att, &pairs, &cache, &cvec, SLOPE);
            macro_rules! check {
                ($param:expr, $grad:expr) => {{
                    let len = $param.len();
                    for k in 0..len {
                        let base = $param[k];
                        $param[k] = base + 1e-6;
                        let p = gat_forward(&w, &att, &pairs, SLOPE).unwrap().0.dot(&cvec);
                        $param[k] = base - 1e-6;
                        let q = gat_forward(&w, &att, &pairs, SLOPE).unwrap().0.dot(&cvec);
                        $param[k] = base;
                        let num = (p - q) / 2e-6;
                        assert!(rel(num, $grad[k]) < 1e-3 || (num - $grad[k]).abs() < 1e-8, "{num} vs {}", $grad[k]);
                    }
                }};
            }
            for h in 0..heads {
                check!(w[h].as_mut_slice(), g.w[h].as_slice());
                check!(att[h].as_mut_slice(), g.att[h].as_slice());
            }
            for j in 0..n {
                check!(pairs[j].0.as_mut_slice(), g.c[j].as_slice());
                check!(pairs[j].1.as_mut_slice(), g.d[j].as_slice());
            }
        }
    }

    fn gru_instance(r: &mut rng::SimRng, v: usize) -> GruWeights {
        GruWeights {
            we1: rmat(r, v, v),
            we2: rmat(r, v, v),
            wr1: rmat(r, v, v),
            wr2: rmat(r, v, v),
            wa: rmat(r, v, v),
            u: rmat(r, v, v),
        }
    }

    #[test]
    fn gru_examples() {
        let mut r = rng::stream(6, &[]);
        let z = rvec(&mut r, 3);
        let h = rvec(&mut r, 3);
        let (out, _) = gru_step(&GruWeights::zeros(3), &z, &h).unwrap();
        assert!((out - &h * 0.5).norm() < 1e-15);

        let mut g = gru_instance(&mut r, 3);
        g.we2.fill(0.0);
        g.wr2.fill(0.0);
        g.u.fill(0.0);
        let (out, _) = gru_step(&g, &z, &DVector::zeros(3)).unwrap();
        let expect = (&g.we1 * &z).map(sigmoid).component_mul(&(&g.wa * &z).map(f64::tanh));
        assert!((out - expect).norm() < 1e-15);
    }

    #[test]
    fn gru_matches_straight_line() {
        let mut r = rng::stream(7, &[]);
        let g = gru_instance(&mut r, 3);
        let z = rvec(&mut r, 3);
        let h = rvec(&mut r, 3);
        let (out, _) = gru_step(&g, &z, &h).unwrap();
        let mv = |m: &DMatrix<f64>, v: &[f64]| -> Vec<f64> { (0..3).map(|i| (0..3).map(|j| m[(i, j)] * v[j]).sum()).collect() };
        let (zs, hs) = (z.as_slice(), h.as_slice());
        let (a, b) = (mv(&g.we1, zs), mv(&g.we2, hs));
        let e: Vec<f64> = (0..3).map(|i| 1.0 / (1.0 + (-(a[i] + b[i])).exp())).collect();
        let (a, b) = (mv(&g.wr1, zs), mv(&g.wr2, hs));
        let rr: Vec<f64> = (0..3).map(|i| 1.0 / (1.0 + (-(a[i] + b[i])).exp())).collect();
        let rh: Vec<f64> = (0..3).map(|i| rr[i] * hs[i]).collect();
        let (a, b) = (mv(&g.wa, zs), mv(&g.u, &rh));
        for i in 0..3 {
            let c = (a[i] + b[i]).tanh();
            assert!((out[i] - ((1.0 - e[i]) * hs[i] + e[i] * c)).abs() < 1e-14);
        }
    }

    #[test]
    fn gru_gradients() {
        let mut r = rng::stream(8, &[]);
        for _ in 0..50 {
            let v = r.random_range(1..6);
            let mut g = gru_instance(&mut r, v);
            let mut z = rvec(&mut r, v);
            let mut h = rvec(&mut r, v);
            let c = rvec(&mut r, v);
            let (_, cache) = gru_step(&g, &z, &h).unwrap();
            let grad = gru_backward(&g, &z, &h, &cache, &c);
            macro_rules! check {
                ($param:expr, $an:expr) => {{
                    for k in 0..$param.len() {
                        let base = $param[k];
                        $param[k] = base + 1e-6;
                        let p = gru_step(&g, &z, &h).unwrap().0.dot(&c);
                        $param[k] = base - 1e-6;
                        let q = gru_step(&g, &z, &h).unwrap().0.dot(&c);
                        $param[k] = base;
                        let num = (p - q) / 2e-6;
                        assert!(rel(num, $an[k]) < 1e-3 || (num - $an[k]).abs() < 1e-8);
                    }
                }};
            }
            check!(g.we1.as_mut_slice(), grad.weights.we1.as_slice());
            check!(g.we2.as_mut_slice(), grad.weights.we2.as_slice());
            check!(g.wr1.as_mut_slice(), grad.weights.wr1.as_slice());
            check!(g.wr2.as_mut_slice(), grad.weights.wr2.as_slice());
            check!(g.wa.as_mut_slice(), grad.weights.wa.as_slice());
            check!(g.u.as_mut_slice(), grad.weights.u.as_slice());
            check!(z.as_mut_slice(), grad.z.as_slice());
            check!(h.as_mut_slice(), grad.h.as_slice());
        }
    }

    #[test]
    fn softmax_properties() {
        let p = softmax(&[100.0, 0.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-10);
        assert!((softmax(&[1.0, 2.0, 3.0]).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let dp = [0.2, -1.0, 0.5];
        let logits = [0.1, -0.4, 0.7];
        let an = softmax_backward(&softmax(&logits), &dp);
        let f = |x0: f64| softmax(&[x0, -0.4, 0.7]).iter().zip(&dp).map(|(a, b)| a * b).sum::<f64>();
        let num = (f(0.1 + 1e-6) - f(0.1 - 1e-6)) / 2e-6;
        assert!(rel(num, an[0]) < 1e-6);
    }

    use proptest::prelude::*;
    proptest! {
        #[test]
        fn gru_output_bounded(seed in 0u64..5000, v in 1usize..6, scale in 0.1..10.0f64) {
            let mut r = rng::stream(seed, &[]);
            let mut g = gru_instance(&mut r, v);
            g.wa *= scale;
            let z = rvec(&mut r, v) * scale;
            let h = rvec(&mut r, v) * scale;
            let (out, _) = gru_step(&g, &z, &h).unwrap();
            for k in 0..v {
                prop_assert!(out[k].abs() <= h[k].abs().max(1.0) + 1e-12);
            }
        }
    }
}
