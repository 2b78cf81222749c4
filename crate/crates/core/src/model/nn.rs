//! Pre-norm transformer encoder over coarse steps with hand-written backprop.
//!
//! All parameters live in one flat `Vec<f64>`; [`Net`] records where each
//! tensor sits. Activations use a row-per-token convention, so a linear layer
//! is `x · W + b` with `W` stored as `fan_in x fan_out`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Mat {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Mat {
    fn len(self) -> usize {
        self.rows * self.cols
    }

    fn view(self, p: &[f64]) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &p[self.off..self.off + self.len()]).expect("parameter layout")
    }

    fn view_mut(self, p: &mut [f64]) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut p[self.off..self.off + self.len()]).expect("parameter layout")
    }

    fn vec(self, p: &[f64]) -> ArrayView1<'_, f64> {
        ArrayView1::from(&p[self.off..self.off + self.len()])
    }

    fn acc(self, grad: &mut [f64], v: &Array2<f64>) {
        self.view_mut(grad).zip_mut_with(v, |g, x| *g += x);
    }

    fn acc_rows(self, grad: &mut [f64], v: &Array2<f64>) {
        let sum = v.sum_axis(Axis(0));
        for (g, x) in grad[self.off..self.off + self.len()].iter_mut().zip(sum.iter()) {
            *g += x;
        }
    }
}

struct Alloc(usize);

impl Alloc {
    fn mat(&mut self, rows: usize, cols: usize) -> Mat {
        let m = Mat { off: self.0, rows, cols };
        self.0 += rows * cols;
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Shape {
    pub tokens: usize,
    pub inputs: usize,
    pub width: usize,
    pub heads: usize,
    pub ff: usize,
    pub zoom: usize,
    pub layers: usize,
}

#[derive(Debug, Clone)]
struct LayerP {
    ln1_g: Mat,
    ln1_b: Mat,
    wq: Mat,
    bq: Mat,
    wk: Mat,
    bk: Mat,
    wv: Mat,
    bv: Mat,
    wo: Mat,
    bo: Mat,
    ln2_g: Mat,
    ln2_b: Mat,
    w1: Mat,
    b1: Mat,
    w2: Mat,
    b2: Mat,
}

#[derive(Debug, Clone)]
pub(crate) struct Net {
    pub shape: Shape,
    w_in: Mat,
    b_in: Mat,
    pos: Mat,
    layers: Vec<LayerP>,
    lnf_g: Mat,
    lnf_b: Mat,
    w_out: Mat,
    b_out: Mat,
    pub n_params: usize,
}

struct LnCache {
    xhat: Array2<f64>,
    inv: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    mask1: Option<Array2<f64>>,
    ln2: LnCache,
    f: Array2<f64>,
    z1: Array2<f64>,
    mask2: Option<Array2<f64>>,
}

pub(crate) struct Cache {
    x: Array2<f64>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
    y: Array2<f64>,
}

fn ln_fwd(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, iv) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mu = row.sum() / d;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        *iv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mu) * *iv);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, inv })
}

fn ln_bwd(dy: &Array2<f64>, g: ArrayView1<f64>, c: &LnCache, dg: Mat, db: Mat, grad: &mut [f64]) -> Array2<f64> {
    let dgv = (dy * &c.xhat).sum_axis(Axis(0));
    let dbv = dy.sum_axis(Axis(0));
    for (i, (a, b)) in dgv.iter().zip(dbv.iter()).enumerate() {
        grad[dg.off + i] += a;
        grad[db.off + i] += b;
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dh = dxhat.row(r);
        let xh = c.xhat.row(r);
        let s1 = dh.sum();
        let s2 = dh.dot(&xh);
        let inv = c.inv[r];
        for j in 0..dy.ncols() {
            dx[[r, j]] = inv / d * (d * dh[j] - s1 - xh[j] * s2);
        }
    }
    dx
}

fn linear(x: &Array2<f64>, w: Mat, b: Mat, p: &[f64]) -> Array2<f64> {
    x.dot(&w.view(p)) + &b.vec(p)
}

pub(crate) fn softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp().ln_1p()
    }
}

fn sigmoid(y: f64) -> f64 {
    1.0 / (1.0 + (-y).exp())
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

impl Net {
    pub fn new(shape: Shape) -> Self {
        let (d, ff) = (shape.width, shape.ff);
        let mut a = Alloc(0);
        let w_in = a.mat(shape.inputs, d);
        let b_in = a.mat(1, d);
        let pos = a.mat(shape.tokens, d);
        let layers = (0..shape.layers)
            .map(|_| LayerP {
                ln1_g: a.mat(1, d),
                ln1_b: a.mat(1, d),
                wq: a.mat(d, d),
                bq: a.mat(1, d),
                wk: a.mat(d, d),
                bk: a.mat(1, d),
                wv: a.mat(d, d),
                bv: a.mat(1, d),
                wo: a.mat(d, d),
                bo: a.mat(1, d),
                ln2_g: a.mat(1, d),
                ln2_b: a.mat(1, d),
                w1: a.mat(d, ff),
                b1: a.mat(1, ff),
                w2: a.mat(ff, d),
                b2: a.mat(1, d),
            })
            .collect();
        let lnf_g = a.mat(1, d);
        let lnf_b = a.mat(1, d);
        let w_out = a.mat(d, shape.zoom);
        let b_out = a.mat(1, shape.zoom);
        Net { shape, w_in, b_in, pos, layers, lnf_g, lnf_b, w_out, b_out, n_params: a.0 }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let depth_scale = 1.0 / (2.0 * self.shape.layers.max(1) as f64).sqrt();
        let mut fill = |m: Mat, std: f64, p: &mut [f64]| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in &mut p[m.off..m.off + m.len()] {
                *v = dist.sample(rng);
            }
        };
        let fan = |m: Mat| (1.0 / m.rows as f64).sqrt();
        fill(self.w_in, fan(self.w_in), &mut p);
        fill(self.pos, 0.1, &mut p);
        for l in &self.layers {
            for m in [l.wq, l.wk, l.wv, l.w1] {
                fill(m, fan(m), &mut p);
            }
            for m in [l.wo, l.w2] {
                fill(m, fan(m) * depth_scale, &mut p);
            }
            for g in [l.ln1_g, l.ln2_g] {
                p[g.off..g.off + g.len()].fill(1.0);
            }
        }
        p[self.lnf_g.off..self.lnf_g.off + self.lnf_g.len()].fill(1.0);
        fill(self.w_out, fan(self.w_out), &mut p);
        p
    }

    /// Forward pass for one example. `x` is tokens x inputs. The output is
    /// flattened token-major (`token * zoom + k`) and strictly positive.
    /// Passing a dropout rate and RNG enables training-mode dropout.
    pub fn forward(&self, p: &[f64], x: &Array2<f64>, mut dropout: Option<(f64, &mut ChaCha8Rng)>) -> (Vec<f64>, Cache) {
        let sh = self.shape;
        let dh = sh.width / sh.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = linear(x, self.w_in, self.b_in, p) + &self.pos.view(p);
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (a, ln1) = ln_fwd(&h, l.ln1_g.vec(p), l.ln1_b.vec(p));
            let q = linear(&a, l.wq, l.bq, p);
            let k = linear(&a, l.wk, l.bk, p);
            let v = linear(&a, l.wv, l.bv, p);
            let mut ctx = Array2::zeros((sh.tokens, sh.width));
            let mut probs = Vec::with_capacity(sh.heads);
            for hd in 0..sh.heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                for mut row in sc.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|v| (v - m).exp());
                    let z = row.sum();
                    row /= z;
                }
                ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let mut o = linear(&ctx, l.wo, l.bo, p);
            let mask1 = match dropout.as_mut() {
                Some((r, rng)) if *r > 0.0 => Some(dropout_mask(sh.tokens, sh.width, *r, rng)),
                _ => None,
            };
            if let Some(m) = &mask1 {
                o *= m;
            }
            h += &o;
            let (f, ln2) = ln_fwd(&h, l.ln2_g.vec(p), l.ln2_b.vec(p));
            let z1 = linear(&f, l.w1, l.b1, p);
            let mut g = linear(&z1.mapv(|v| v.max(0.0)), l.w2, l.b2, p);
            let mask2 = match dropout.as_mut() {
                Some((r, rng)) if *r > 0.0 => Some(dropout_mask(sh.tokens, sh.width, *r, rng)),
                _ => None,
            };
            if let Some(m) = &mask2 {
                g *= m;
            }
            h += &g;
            caches.push(LayerCache { ln1, a, q, k, v, probs, ctx, mask1, ln2, f, z1, mask2 });
        }
        let (hf, lnf) = ln_fwd(&h, self.lnf_g.vec(p), self.lnf_b.vec(p));
        let y = linear(&hf, self.w_out, self.b_out, p);
        let out = y.iter().map(|&v| softplus(v)).collect();
        (out, Cache { x: x.clone(), layers: caches, lnf, hf, y })
    }

    /// Accumulate the gradient of a loss with output gradient `dout` into `grad`.
    pub fn backward(&self, p: &[f64], c: &Cache, dout: &[f64], grad: &mut [f64]) {
        let sh = self.shape;
        let dh = sh.width / sh.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dy = Array2::from_shape_vec((sh.tokens, sh.zoom), dout.to_vec()).expect("output shape");
        dy.zip_mut_with(&c.y, |d, &y| *d *= sigmoid(y));
        self.w_out.acc(grad, &c.hf.t().dot(&dy));
        self.b_out.acc_rows(grad, &dy);
        let dhf = dy.dot(&self.w_out.view(p).t());
        let mut dh_ = ln_bwd(&dhf, self.lnf_g.vec(p), &c.lnf, self.lnf_g, self.lnf_b, grad);

        for (l, lc) in self.layers.iter().zip(&c.layers).rev() {
            // feed-forward branch
            let mut dg = dh_.clone();
            if let Some(m) = &lc.mask2 {
                dg *= m;
            }
            let r = lc.z1.mapv(|v| v.max(0.0));
            l.w2.acc(grad, &r.t().dot(&dg));
            l.b2.acc_rows(grad, &dg);
            let mut dz1 = dg.dot(&l.w2.view(p).t());
            dz1.zip_mut_with(&lc.z1, |d, &z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
            l.w1.acc(grad, &lc.f.t().dot(&dz1));
            l.b1.acc_rows(grad, &dz1);
            let df = dz1.dot(&l.w1.view(p).t());
            dh_ += &ln_bwd(&df, l.ln2_g.vec(p), &lc.ln2, l.ln2_g, l.ln2_b, grad);

            // attention branch
            let mut do_ = dh_.clone();
            if let Some(m) = &lc.mask1 {
                do_ *= m;
            }
            l.wo.acc(grad, &lc.ctx.t().dot(&do_));
            l.bo.acc_rows(grad, &do_);
            let dctx = do_.dot(&l.wo.view(p).t());
            let mut dq = Array2::zeros((sh.tokens, sh.width));
            let mut dk = Array2::zeros((sh.tokens, sh.width));
            let mut dv = Array2::zeros((sh.tokens, sh.width));
            for (hd, pr) in lc.probs.iter().enumerate() {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let dc = dctx.slice(cols);
                let dp = dc.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&pr.t().dot(&dc));
                let mut ds = &dp * pr;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(pr.rows()) {
                    let dot: f64 = row.sum();
                    row.zip_mut_with(&prow, |d, &pv| *d -= pv * dot);
                }
                ds *= scale;
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            let mut da = Array2::zeros((sh.tokens, sh.width));
            for (w, b, d) in [(l.wq, l.bq, &dq), (l.wk, l.bk, &dk), (l.wv, l.bv, &dv)] {
                w.acc(grad, &lc.a.t().dot(d));
                b.acc_rows(grad, d);
                da += &d.dot(&w.view(p).t());
            }
            dh_ += &ln_bwd(&da, l.ln1_g.vec(p), &lc.ln1, l.ln1_g, l.ln1_b, grad);
        }
        self.w_in.acc(grad, &c.x.t().dot(&dh_));
        self.b_in.acc_rows(grad, &dh_);
        self.pos.acc(grad, &dh_);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> (Net, Vec<f64>, Array2<f64>) {
        let shape = Shape { tokens: 3, inputs: 2, width: 8, heads: 2, ff: 12, zoom: 4, layers: 2 };
        let net = Net::new(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = net.init(&mut rng);
        let x = Array2::from_shape_fn((3, 2), |(i, j)| (i as f64 - 1.0) * 0.7 + j as f64 * 0.3);
        (net, p, x)
    }

    #[test]
    fn output_shape_and_positivity() {
        let (net, p, x) = tiny();
        let (out, _) = net.forward(&p, &x, None);
        assert_eq!(out.len(), 12);
        assert!(out.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let (net, p, x) = tiny();
        let w: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let loss = |p: &[f64]| net.forward(p, &x, None).0.iter().zip(&w).map(|(o, w)| o * w).sum::<f64>();
        let (_, cache) = net.forward(&p, &x, None);
        let mut g = vec![0.0; net.n_params];
        net.backward(&p, &cache, &w, &mut g);
        let h = 1e-6;
        for i in (0..net.n_params).step_by(3) {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 + 1e-4 * fd.abs(), "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn dropout_gradient_consistent_with_mask() {
        let (net, p, x) = tiny();
        let w = vec![1.0; 12];
        let run = |p: &[f64]| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            net.forward(p, &x, Some((0.3, &mut rng)))
        };
        let (_, cache) = run(&p);
        let mut g = vec![0.0; net.n_params];
        net.backward(&p, &cache, &w, &mut g);
        let h = 1e-6;
        for i in (0..net.n_params).step_by(5) {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (run(&pp).0.iter().sum::<f64>() - run(&pm).0.iter().sum::<f64>()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 + 1e-4 * fd.abs(), "param {i}");
        }
    }
}
