//! Pre-norm transformer encoder with max/mean pooling and an MLP head, with a
//! hand-written reverse pass.
//!
//! Sequences of a batch are packed row-wise (no padding), so attention never
//! sees padded keys and padded rows receive no gradient.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::{gelu_pair, gemm, sigmoid, Real, View, LN_EPS};

pub const D_EMB: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("token width {got} does not match the model input width {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("robot {0} has no embedding row")]
    UnknownRobot(usize),
    #[error("place {0} has no embedding row")]
    UnknownPlace(usize),
    #[error("empty sequence")]
    EmptySequence,
    #[error("{heads} heads do not divide width {width}")]
    Heads { heads: usize, width: usize },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    Max,
    Mean,
}

/// How tokens enter the model.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputKind {
    /// `[W_ID[robot] | W_place[src] | W_place[dst] | fixed]` with trainable
    /// tables.
    Embedded { team: usize, places: usize, fixed: usize },
    /// Fully precomputed token vectors.
    Dense { dim: usize },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputKind,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub head_hidden: usize,
    pub pooling: Pooling,
}

impl ModelConfig {
    /// Width 256, 4 heads, 2 layers, FFN 1024, head 256 → 128 → 1.
    pub fn standard(input: InputKind) -> Self {
        ModelConfig {
            input,
            width: 256,
            heads: 4,
            layers: 2,
            ffn: 1024,
            head_hidden: 128,
            pooling: Pooling::Max,
        }
    }

    pub fn d_in(&self) -> usize {
        match self.input {
            InputKind::Embedded { fixed, .. } => 3 * D_EMB + fixed,
            InputKind::Dense { dim } => dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(ModelError::Heads {
                heads: self.heads,
                width: self.width,
            });
        }
        Ok(())
    }
}

/// One encoder layer's slots in the flat parameter buffer.
#[derive(Clone, Debug)]
struct LayerSlots {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w_qkv: Range<usize>,
    b_qkv: Range<usize>,
    w_o: Range<usize>,
    b_o: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w_1: Range<usize>,
    b_1: Range<usize>,
    w_2: Range<usize>,
    b_2: Range<usize>,
}

/// Named tensors inside the flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Layout {
    w_id: Option<Range<usize>>,
    w_place: Option<Range<usize>>,
    w_in: Range<usize>,
    b_in: Range<usize>,
    layers: Vec<LayerSlots>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    w_h1: Range<usize>,
    b_h1: Range<usize>,
    w_h2: Range<usize>,
    b_h2: Range<usize>,
    names: Vec<(String, Range<usize>)>,
    total: usize,
}

#[derive(Copy, Clone)]
enum Init {
    Normal,
    /// Uniform in ±1/sqrt(fan_in).
    Fan(usize),
    Ones,
    Zeros,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> (Layout, Vec<Init>) {
        let mut total = 0;
        let mut names = Vec::new();
        let mut inits = Vec::new();
        let mut take = |name: String, n: usize, init: Init| {
            let r = total..total + n;
            total += n;
            names.push((name, r.clone()));
            inits.push(init);
            r
        };
        let (d, f, h1) = (cfg.width, cfg.ffn, cfg.head_hidden);
        let (w_id, w_place) = match cfg.input {
            InputKind::Embedded { team, places, .. } => (
                Some(take("w_id".into(), team * D_EMB, Init::Normal)),
                Some(take("w_place".into(), places * D_EMB, Init::Normal)),
            ),
            InputKind::Dense { .. } => (None, None),
        };
        let d_in = cfg.d_in();
        let w_in = take("w_in".into(), d_in * d, Init::Fan(d_in));
        let b_in = take("b_in".into(), d, Init::Fan(d_in));
        let layers = (0..cfg.layers)
            .map(|l| LayerSlots {
                ln1_g: take(format!("l{l}.ln1_g"), d, Init::Ones),
                ln1_b: take(format!("l{l}.ln1_b"), d, Init::Zeros),
                w_qkv: take(format!("l{l}.w_qkv"), d * 3 * d, Init::Fan(d)),
                b_qkv: take(format!("l{l}.b_qkv"), 3 * d, Init::Zeros),
                w_o: take(format!("l{l}.w_o"), d * d, Init::Fan(d)),
                b_o: take(format!("l{l}.b_o"), d, Init::Zeros),
                ln2_g: take(format!("l{l}.ln2_g"), d, Init::Ones),
                ln2_b: take(format!("l{l}.ln2_b"), d, Init::Zeros),
                w_1: take(format!("l{l}.w_1"), d * f, Init::Fan(d)),
                b_1: take(format!("l{l}.b_1"), f, Init::Fan(d)),
                w_2: take(format!("l{l}.w_2"), f * d, Init::Fan(f)),
                b_2: take(format!("l{l}.b_2"), d, Init::Fan(f)),
            })
            .collect();
        let lnf_g = take("lnf_g".into(), d, Init::Ones);
        let lnf_b = take("lnf_b".into(), d, Init::Zeros);
        let w_h1 = take("w_h1".into(), d * h1, Init::Fan(d));
        let b_h1 = take("b_h1".into(), h1, Init::Fan(d));
        let w_h2 = take("w_h2".into(), h1, Init::Fan(h1));
        let b_h2 = take("b_h2".into(), 1, Init::Fan(h1));
        (
            Layout {
                w_id,
                w_place,
                w_in,
                b_in,
                layers,
                lnf_g,
                lnf_b,
                w_h1,
                b_h1,
                w_h2,
                b_h2,
                names,
                total,
            },
            inits,
        )
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Every parameter tensor by name.
    pub fn tensors(&self) -> &[(String, Range<usize>)] {
        &self.names
    }
}

/// One input sequence. For embedded inputs `ids[i] = [robot, src, dst]` and
/// `fixed` holds the non-trainable tail of every token; for dense inputs `ids`
/// is empty and `fixed` holds whole tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub ids: Vec<[u32; 3]>,
    pub fixed: Vec<f64>,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub params: Vec<T>,
    layout: Layout,
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    ln2: LnCache<T>,
    b: Vec<T>,
    /// GELU derivative at the FFN pre-activations.
    dg: Vec<T>,
    g: Vec<T>,
}

struct Cache<T> {
    x0: Vec<T>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    z: Vec<T>,
    pooled: Vec<T>,
    argmax: Vec<usize>,
    m: Vec<T>,
    gm: Vec<T>,
    logits: Vec<f64>,
}

/// Row offsets of packed sequences and of their attention maps.
struct Packing {
    starts: Vec<usize>,
    lens: Vec<usize>,
    rows: usize,
    prob_starts: Vec<usize>,
}

impl Packing {
    fn new(lens: &[usize], heads: usize) -> Packing {
        let mut starts = Vec::with_capacity(lens.len());
        let mut prob_starts = Vec::with_capacity(lens.len());
        let (mut rows, mut probs) = (0, 0);
        for &n in lens {
            starts.push(rows);
            prob_starts.push(probs);
            rows += n;
            probs += heads * n * n;
        }
        prob_starts.push(probs);
        Packing {
            starts,
            lens: lens.to_vec(),
            rows,
            prob_starts,
        }
    }
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
}

fn col_sums<T: Real>(dy: &[T], cols: usize, into: &mut [T]) {
    for row in dy.chunks_exact(cols) {
        for (g, v) in into.iter_mut().zip(row) {
            *g = *g + *v;
        }
    }
}

/// `y = x·W (+ bias)` for row-major `x (rows × k)` and `W (k × n)`.
fn linear<T: Real>(x: &[T], rows: usize, k: usize, w: &[T], bias: Option<&[T]>, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * n];
    gemm(T::one(), x, View::rm(0, rows, k, k), w, View::rm(0, k, n, n), T::zero(), &mut y, View::rm(0, rows, n, n));
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    y
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·Wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_back<T: Real>(
    x: &[T],
    dy: &[T],
    rows: usize,
    k: usize,
    n: usize,
    w: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Vec<T> {
    gemm(T::one(), x, View::rm(0, rows, k, k).t(), dy, View::rm(0, rows, n, n), T::one(), dw, View::rm(0, k, n, n));
    if let Some(db) = db {
        col_sums(dy, n, db);
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); rows * k];
    gemm(T::one(), dy, View::rm(0, rows, n, n), w, View::rm(0, k, n, n).t(), T::zero(), &mut dx, View::rm(0, rows, k, k));
    dx
}

fn layer_norm<T: Real>(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back<T: Real>(dy: &[T], c: &LnCache<T>, d: usize, g: &[T], dg: &mut [T], db: &mut [T]) -> Vec<T> {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let inv_d = T::of(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let (dyr, xh) = (&dy[r * d..(r + 1) * d], &c.xhat[r * d..(r + 1) * d]);
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for j in 0..d {
            dg[j] = dg[j] + dyr[j] * xh[j];
            db[j] = db[j] + dyr[j];
            dxhat[j] = dyr[j] * g[j];
            s1 = s1 + dxhat[j];
            s2 = s2 + dxhat[j] * xh[j];
        }
        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
        for j in 0..d {
            dx[r * d + j] = c.rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// Mean binary cross-entropy with the probability clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn loss_bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `d loss_bce / d p`; zero where the clamp is active.
pub fn loss_bce_grad(p: f64, y: f64) -> f64 {
    if !(1e-7..=1.0 - 1e-7).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (layout, inits) = Layout::new(&cfg);
        let mut params = Vec::with_capacity(layout.total);
        for ((_, r), init) in layout.names.iter().zip(inits) {
            for _ in r.clone() {
                let v = match init {
                    Init::Normal => StandardNormal.sample(rng),
                    Init::Fan(fan) => {
                        let bound = 1.0 / (fan as f64).sqrt();
                        Uniform::new_inclusive(-bound, bound).expect("finite bound").sample(rng)
                    }
                    Init::Ones => 1.0,
                    Init::Zeros => 0.0,
                };
                params.push(T::of(v));
            }
        }
        Ok(Model { cfg, params, layout })
    }

    /// Rebuilds a model around an existing parameter vector.
    pub fn from_params(cfg: ModelConfig, params: Vec<T>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (layout, _) = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(ModelError::DimensionMismatch {
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(Model { cfg, params, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg,
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
            layout: self.layout.clone(),
        }
    }

    fn p(&self, r: &Range<usize>) -> &[T] {
        &self.params[r.clone()]
    }

    fn check(&self, seqs: &[&Sequence]) -> Result<(), ModelError> {
        let fixed = match self.cfg.input {
            InputKind::Embedded { team, places, fixed } => {
                for s in seqs {
                    for id in &s.ids {
                        if id[0] as usize >= team {
                            return Err(ModelError::UnknownRobot(id[0] as usize));
                        }
                        for &p in &id[1..] {
                            if p as usize >= places {
                                return Err(ModelError::UnknownPlace(p as usize));
                            }
                        }
                    }
                }
                fixed
            }
            InputKind::Dense { dim } => dim,
        };
        for s in seqs {
            if s.len == 0 {
                return Err(ModelError::EmptySequence);
            }
            let embedded = matches!(self.cfg.input, InputKind::Embedded { .. });
            if s.fixed.len() != s.len * fixed || (embedded && s.ids.len() != s.len) {
                return Err(ModelError::DimensionMismatch {
                    expected: fixed,
                    got: s.fixed.len() / s.len,
                });
            }
        }
        Ok(())
    }

    /// Packed input matrix `N × d_in`.
    fn assemble(&self, seqs: &[&Sequence]) -> Vec<T> {
        let d_in = self.cfg.d_in();
        let rows: usize = seqs.iter().map(|s| s.len).sum();
        let mut x = Vec::with_capacity(rows * d_in);
        match self.cfg.input {
            InputKind::Embedded { fixed, .. } => {
                let (wid, wpl) = (
                    self.p(self.layout.w_id.as_ref().unwrap()),
                    self.p(self.layout.w_place.as_ref().unwrap()),
                );
                for s in seqs {
                    for (i, id) in s.ids.iter().enumerate() {
                        let r = id[0] as usize;
                        x.extend_from_slice(&wid[r * D_EMB..(r + 1) * D_EMB]);
                        for &p in &id[1..] {
                            let p = p as usize;
                            x.extend_from_slice(&wpl[p * D_EMB..(p + 1) * D_EMB]);
                        }
                        x.extend(s.fixed[i * fixed..(i + 1) * fixed].iter().map(|&v| T::of(v)));
                    }
                }
            }
            InputKind::Dense { .. } => {
                for s in seqs {
                    x.extend(s.fixed.iter().map(|&v| T::of(v)));
                }
            }
        }
        x
    }

    fn run(&self, x0: Vec<T>, pack: &Packing) -> Cache<T> {
        let cfg = &self.cfg;
        let (d, f, nh, dh) = (cfg.width, cfg.ffn, cfg.heads, cfg.head_dim());
        let n = pack.rows;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut h = linear(&x0, n, cfg.d_in(), self.p(&self.layout.w_in), Some(self.p(&self.layout.b_in)), d);
        let mut layers = Vec::with_capacity(cfg.layers);
        for ls in &self.layout.layers {
            let (a, ln1) = layer_norm(&h, d, self.p(&ls.ln1_g), self.p(&ls.ln1_b));
            let qkv = linear(&a, n, d, self.p(&ls.w_qkv), Some(self.p(&ls.b_qkv)), 3 * d);
            let mut probs = vec![T::zero(); *pack.prob_starts.last().unwrap()];
            let mut o = vec![T::zero(); n * d];
            for (b, (&s0, &len)) in pack.starts.iter().zip(&pack.lens).enumerate() {
                for head in 0..nh {
                    let po = pack.prob_starts[b] + head * len * len;
                    let q = View::rm(s0 * 3 * d + head * dh, len, dh, 3 * d);
                    let k = View::rm(s0 * 3 * d + d + head * dh, len, dh, 3 * d);
                    let v = View::rm(s0 * 3 * d + 2 * d + head * dh, len, dh, 3 * d);
                    let pv = View::rm(po, len, len, len);
                    gemm(scale, &qkv, q, &qkv, k.t(), T::zero(), &mut probs, pv);
                    for row in probs[po..po + len * len].chunks_exact_mut(len) {
                        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                        let mut sum = T::zero();
                        for v in row.iter_mut() {
                            *v = (*v - mx).exp();
                            sum = sum + *v;
                        }
                        for v in row.iter_mut() {
                            *v = *v / sum;
                        }
                    }
                    gemm(T::one(), &probs, pv, &qkv, v, T::zero(), &mut o, View::rm(s0 * d + head * dh, len, dh, d));
                }
            }
            let att = linear(&o, n, d, self.p(&ls.w_o), Some(self.p(&ls.b_o)), d);
            for (x, y) in h.iter_mut().zip(&att) {
                *x = *x + *y;
            }
            let (bn, ln2) = layer_norm(&h, d, self.p(&ls.ln2_g), self.p(&ls.ln2_b));
            let mut g = linear(&bn, n, d, self.p(&ls.w_1), Some(self.p(&ls.b_1)), f);
            let mut dg = vec![T::zero(); g.len()];
            for (x, d) in g.iter_mut().zip(dg.iter_mut()) {
                (*x, *d) = gelu_pair(*x);
            }
            let ff = linear(&g, n, f, self.p(&ls.w_2), Some(self.p(&ls.b_2)), d);
            for (x, y) in h.iter_mut().zip(&ff) {
                *x = *x + *y;
            }
            layers.push(LayerCache {
                ln1,
                a,
                qkv,
                probs,
                o,
                ln2,
                b: bn,
                dg,
                g,
            });
        }
        let (z, lnf) = layer_norm(&h, d, self.p(&self.layout.lnf_g), self.p(&self.layout.lnf_b));
        let nb = pack.lens.len();
        let mut pooled = vec![T::zero(); nb * d];
        let mut argmax = vec![0usize; nb * d];
        for (b, (&s0, &len)) in pack.starts.iter().zip(&pack.lens).enumerate() {
            for j in 0..d {
                match cfg.pooling {
                    Pooling::Max => {
                        let mut best = s0;
                        for r in s0 + 1..s0 + len {
                            if z[r * d + j] > z[best * d + j] {
                                best = r;
                            }
                        }
                        argmax[b * d + j] = best;
                        pooled[b * d + j] = z[best * d + j];
                    }
                    Pooling::Mean => {
                        let s = (s0..s0 + len).fold(T::zero(), |acc, r| acc + z[r * d + j]);
                        pooled[b * d + j] = s / T::of(len as f64);
                    }
                }
            }
        }
        let hh = cfg.head_hidden;
        let m = linear(&pooled, nb, d, self.p(&self.layout.w_h1), Some(self.p(&self.layout.b_h1)), hh);
        let gm: Vec<T> = m.iter().map(|&x| gelu_pair(x).0).collect();
        let w2 = self.p(&self.layout.w_h2);
        let b2 = self.p(&self.layout.b_h2)[0].f64();
        let logits = gm
            .chunks_exact(hh)
            .map(|row| row.iter().zip(w2).fold(0.0, |s, (a, w)| s + a.f64() * w.f64()) + b2)
            .collect();
        Cache {
            x0,
            layers,
            lnf,
            z,
            pooled,
            argmax,
            m,
            gm,
            logits,
        }
    }

    /// Gradient of `Σ_b dlogit[b]·logit[b]` w.r.t. every parameter, and w.r.t.
    /// the packed input matrix.
    fn backward(&self, c: &Cache<T>, pack: &Packing, dlogit: &[f64], grad: &mut [T]) -> Vec<T> {
        let cfg = &self.cfg;
        let (d, f, nh, dh, hh) = (cfg.width, cfg.ffn, cfg.heads, cfg.head_dim(), cfg.head_hidden);
        let n = pack.rows;
        let nb = pack.lens.len();
        let lay = &self.layout;
        let scale = T::of(1.0 / (dh as f64).sqrt());

        // head
        let w2 = self.p(&lay.w_h2);
        let mut dm = vec![T::zero(); nb * hh];
        for b in 0..nb {
            let dl = T::of(dlogit[b]);
            grad[lay.b_h2.start] = grad[lay.b_h2.start] + dl;
            for j in 0..hh {
                let gi = lay.w_h2.start + j;
                grad[gi] = grad[gi] + dl * c.gm[b * hh + j];
                dm[b * hh + j] = dl * w2[j] * gelu_pair(c.m[b * hh + j]).1;
            }
        }
        let (gw, rest) = split_two(grad, &lay.w_h1, &lay.b_h1);
        let dpooled = linear_back(&c.pooled, &dm, nb, d, hh, self.p(&lay.w_h1), gw, Some(rest), true);

        // pooling
        let mut dz = vec![T::zero(); n * d];
        for (b, (&s0, &len)) in pack.starts.iter().zip(&pack.lens).enumerate() {
            for j in 0..d {
                let g = dpooled[b * d + j];
                match cfg.pooling {
                    Pooling::Max => {
                        let r = c.argmax[b * d + j];
                        dz[r * d + j] = dz[r * d + j] + g;
                    }
                    Pooling::Mean => {
                        let share = g / T::of(len as f64);
                        for r in s0..s0 + len {
                            dz[r * d + j] = dz[r * d + j] + share;
                        }
                    }
                }
            }
        }
        let _ = &c.z;
        let (gg, gb) = split_two(grad, &lay.lnf_g, &lay.lnf_b);
        let mut dh_ = layer_norm_back(&dz, &c.lnf, d, self.p(&lay.lnf_g), gg, gb);

        for (ls, lc) in lay.layers.iter().zip(&c.layers).rev() {
            // feed-forward block
            let (gw, gb) = split_two(grad, &ls.w_2, &ls.b_2);
            let mut dg = linear_back(&lc.g, &dh_, n, f, d, self.p(&ls.w_2), gw, Some(gb), true);
            for (x, &d) in dg.iter_mut().zip(&lc.dg) {
                *x = *x * d;
            }
            let (gw, gb) = split_two(grad, &ls.w_1, &ls.b_1);
            let dbn = linear_back(&lc.b, &dg, n, d, f, self.p(&ls.w_1), gw, Some(gb), true);
            let (gg, gb) = split_two(grad, &ls.ln2_g, &ls.ln2_b);
            let dln = layer_norm_back(&dbn, &lc.ln2, d, self.p(&ls.ln2_g), gg, gb);
            for (x, y) in dh_.iter_mut().zip(&dln) {
                *x = *x + *y;
            }

            // attention block
            let (gw, gb) = split_two(grad, &ls.w_o, &ls.b_o);
            let do_ = linear_back(&lc.o, &dh_, n, d, d, self.p(&ls.w_o), gw, Some(gb), true);
            let mut dqkv = vec![T::zero(); n * 3 * d];
            let mut dp = Vec::new();
            for (b, (&s0, &len)) in pack.starts.iter().zip(&pack.lens).enumerate() {
                for head in 0..nh {
                    let po = pack.prob_starts[b] + head * len * len;
                    let pv = View::rm(po, len, len, len);
                    let q = View::rm(s0 * 3 * d + head * dh, len, dh, 3 * d);
                    let k = View::rm(s0 * 3 * d + d + head * dh, len, dh, 3 * d);
                    let v = View::rm(s0 * 3 * d + 2 * d + head * dh, len, dh, 3 * d);
                    let dov = View::rm(s0 * d + head * dh, len, dh, d);
                    // dV = Pᵀ dO
                    gemm(T::one(), &lc.probs, pv.t(), &do_, dov, T::zero(), &mut dqkv, v);
                    // dP = dO Vᵀ
                    dp.clear();
                    dp.resize(len * len, T::zero());
                    let dpv = View::rm(0, len, len, len);
                    gemm(T::one(), &do_, dov, &lc.qkv, v.t(), T::zero(), &mut dp, dpv);
                    // softmax backward, in place: dS = P ∘ (dP − Σ dP∘P)
                    let probs = &lc.probs[po..po + len * len];
                    for (dr, pr) in dp.chunks_exact_mut(len).zip(probs.chunks_exact(len)) {
                        let dot = dr.iter().zip(pr).fold(T::zero(), |s, (a, b)| s + *a * *b);
                        for (x, &p) in dr.iter_mut().zip(pr) {
                            *x = p * (*x - dot);
                        }
                    }
                    // dQ = s·dS K, dK = s·dSᵀ Q
                    gemm(scale, &dp, dpv, &lc.qkv, k, T::zero(), &mut dqkv, q);
                    gemm(scale, &dp, dpv.t(), &lc.qkv, q, T::zero(), &mut dqkv, k);
                }
            }
            let (gw, gb) = split_two(grad, &ls.w_qkv, &ls.b_qkv);
            let da = linear_back(&lc.a, &dqkv, n, d, 3 * d, self.p(&ls.w_qkv), gw, Some(gb), true);
            let (gg, gb) = split_two(grad, &ls.ln1_g, &ls.ln1_b);
            let dln = layer_norm_back(&da, &lc.ln1, d, self.p(&ls.ln1_g), gg, gb);
            for (x, y) in dh_.iter_mut().zip(&dln) {
                *x = *x + *y;
            }
        }

        let d_in = cfg.d_in();
        let (gw, gb) = split_two(grad, &lay.w_in, &lay.b_in);
        linear_back(&c.x0, &dh_, n, d_in, d, self.p(&lay.w_in), gw, Some(gb), true)
    }

    /// Scatters the input gradient into the embedding tables.
    fn scatter_embeddings(&self, seqs: &[&Sequence], dx0: &[T], grad: &mut [T]) {
        let (Some(wid), Some(wpl)) = (&self.layout.w_id, &self.layout.w_place) else {
            return;
        };
        let d_in = self.cfg.d_in();
        let mut row = 0;
        for s in seqs {
            for id in &s.ids {
                let dx = &dx0[row * d_in..(row + 1) * d_in];
                for (seg, (base, idx)) in [(wid.start, id[0]), (wpl.start, id[1]), (wpl.start, id[2])]
                    .into_iter()
                    .enumerate()
                {
                    let dst = base + idx as usize * D_EMB;
                    for j in 0..D_EMB {
                        grad[dst + j] = grad[dst + j] + dx[seg * D_EMB + j];
                    }
                }
                row += 1;
            }
        }
    }

    fn packing(&self, seqs: &[&Sequence]) -> Packing {
        let lens: Vec<usize> = seqs.iter().map(|s| s.len).collect();
        Packing::new(&lens, self.cfg.heads)
    }

    /// Raw scores before the sigmoid.
    pub fn logits(&self, seqs: &[&Sequence]) -> Result<Vec<f64>, ModelError> {
        self.check(seqs)?;
        let pack = self.packing(seqs);
        Ok(self.run(self.assemble(seqs), &pack).logits)
    }

    /// Probability of the spurious class for each sequence.
    pub fn forward(&self, seqs: &[&Sequence]) -> Result<Vec<f64>, ModelError> {
        Ok(self.logits(seqs)?.into_iter().map(sigmoid).collect())
    }

    /// Mean clamped BCE over the batch.
    pub fn loss(&self, seqs: &[&Sequence], labels: &[f64]) -> Result<f64, ModelError> {
        let probs = self.forward(seqs)?;
        Ok(probs.iter().zip(labels).map(|(&p, &y)| loss_bce(p, y)).sum::<f64>() / labels.len() as f64)
    }

    /// Mean clamped BCE over the batch and its gradient w.r.t. all parameters.
    pub fn loss_and_grad(&self, seqs: &[&Sequence], labels: &[f64]) -> Result<(f64, Vec<T>), ModelError> {
        self.check(seqs)?;
        assert_eq!(seqs.len(), labels.len());
        let pack = self.packing(seqs);
        let cache = self.run(self.assemble(seqs), &pack);
        let nb = seqs.len() as f64;
        let mut loss = 0.0;
        let dlogit: Vec<f64> = cache
            .logits
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                let p = sigmoid(z);
                loss += loss_bce(p, y);
                loss_bce_grad(p, y) * p * (1.0 - p) / nb
            })
            .collect();
        let mut grad = vec![T::zero(); self.layout.total];
        let dx0 = self.backward(&cache, &pack, &dlogit, &mut grad);
        self.scatter_embeddings(seqs, &dx0, &mut grad);
        Ok((loss / nb, grad))
    }

    /// Runs a zero-padded `batch × max_len × d_in` token tensor with a
    /// validity mask, bypassing any embedding tables. Valid rows of each item
    /// must come first.
    pub fn forward_tokens(&self, tokens: &[T], mask: &[bool], max_len: usize) -> Result<Vec<f64>, ModelError> {
        let (x0, pack) = self.unpad(tokens, mask, max_len)?;
        Ok(self.run(x0, &pack).logits.into_iter().map(sigmoid).collect())
    }

    /// Loss and gradients for a padded token tensor; the third result is the
    /// gradient w.r.t. every token entry, zero on padding.
    pub fn loss_and_grad_tokens(
        &self,
        tokens: &[T],
        mask: &[bool],
        max_len: usize,
        labels: &[f64],
    ) -> Result<(f64, Vec<T>, Vec<T>), ModelError> {
        let d_in = self.cfg.d_in();
        let (x0, pack) = self.unpad(tokens, mask, max_len)?;
        let cache = self.run(x0, &pack);
        let nb = labels.len() as f64;
        let mut loss = 0.0;
        let dlogit: Vec<f64> = cache
            .logits
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                let p = sigmoid(z);
                loss += loss_bce(p, y);
                loss_bce_grad(p, y) * p * (1.0 - p) / nb
            })
            .collect();
        let mut grad = vec![T::zero(); self.layout.total];
        let dx0 = self.backward(&cache, &pack, &dlogit, &mut grad);
        let mut dtok = vec![T::zero(); tokens.len()];
        for (b, (&s0, &len)) in pack.starts.iter().zip(&pack.lens).enumerate() {
            let dst = b * max_len * d_in;
            dtok[dst..dst + len * d_in].copy_from_slice(&dx0[s0 * d_in..(s0 + len) * d_in]);
        }
        Ok((loss / nb, grad, dtok))
    }

    fn unpad(&self, tokens: &[T], mask: &[bool], max_len: usize) -> Result<(Vec<T>, Packing), ModelError> {
        let d_in = self.cfg.d_in();
        if max_len == 0 || tokens.len() != mask.len() * d_in || mask.len() % max_len != 0 {
            return Err(ModelError::DimensionMismatch {
                expected: d_in,
                got: tokens.len() / mask.len().max(1),
            });
        }
        let mut lens = Vec::new();
        let mut x0 = Vec::new();
        for (b, m) in mask.chunks_exact(max_len).enumerate() {
            let len = m.iter().take_while(|&&v| v).count();
            if len == 0 {
                return Err(ModelError::EmptySequence);
            }
            let base = b * max_len * d_in;
            x0.extend_from_slice(&tokens[base..base + len * d_in]);
            lens.push(len);
        }
        Ok((x0, Packing::new(&lens, self.cfg.heads)))
    }

    /// Softmax rows of every attention map for the given batch (testing aid).
    pub fn attention_row_sums(&self, seqs: &[&Sequence]) -> Result<Vec<f64>, ModelError> {
        self.check(seqs)?;
        let pack = self.packing(seqs);
        let cache = self.run(self.assemble(seqs), &pack);
        let mut sums = Vec::new();
        for lc in &cache.layers {
            for (b, &len) in pack.lens.iter().enumerate() {
                let block = &lc.probs[pack.prob_starts[b]..pack.prob_starts[b + 1]];
                sums.extend(block.chunks_exact(len).map(|r| r.iter().map(|v| v.f64()).sum::<f64>()));
            }
        }
        Ok(sums)
    }

    /// Mean loss and, under max pooling, the winning row of every pooled
    /// channel. Away from ties the winners fix the smooth piece the loss is on.
    pub fn loss_and_winners(&self, seqs: &[&Sequence], labels: &[f64]) -> Result<(f64, Vec<usize>), ModelError> {
        self.check(seqs)?;
        let pack = self.packing(seqs);
        let cache = self.run(self.assemble(seqs), &pack);
        let loss = cache
            .logits
            .iter()
            .zip(labels)
            .map(|(&l, &y)| loss_bce(sigmoid(l), y))
            .sum::<f64>()
            / labels.len() as f64;
        let winners = match self.cfg.pooling {
            Pooling::Max => cache.argmax,
            Pooling::Mean => Vec::new(),
        };
        Ok((loss, winners))
    }

    /// Max-pooled (or mean-pooled) features, before the head.
    pub fn pooled_features(&self, seqs: &[&Sequence]) -> Result<Vec<f64>, ModelError> {
        self.check(seqs)?;
        let pack = self.packing(seqs);
        Ok(self.run(self.assemble(seqs), &pack).pooled.iter().map(|v| v.f64()).collect())
    }
}

/// Two disjoint mutable sub-slices of the gradient buffer, `a` before `b`.
fn split_two<'g, T>(grad: &'g mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'g mut [T], &'g mut [T]) {
    assert!(a.end <= b.start);
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}
