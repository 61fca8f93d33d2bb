//! Small causal transformer with hand-written backward passes.
//!
//! All parameters of a model live in one flat `Vec<f64>`; layers address
//! their tensors through [`Span`]s into it. Gradients use the same layout,
//! which keeps the optimizer, checkpoints and finite-difference checks
//! oblivious to the architecture.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    len: usize,
}

impl LayoutBuilder {
    pub fn alloc(&mut self, len: usize) -> Span {
        let s = Span {
            offset: self.len,
            len,
        };
        self.len += len;
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// `c = a * b` (or `c += a * b`), with `a` logically `m x k` and `b`
/// logically `k x n`. `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    c: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gaussian(p: &mut [f64], std: f64, rng: &mut Rng) {
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in p {
        *v = normal.sample(rng);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Span,
    pub b: Option<Span>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(lb: &mut LayoutBuilder, n_in: usize, n_out: usize) -> Self {
        Linear {
            w: lb.alloc(n_in * n_out),
            b: Some(lb.alloc(n_out)),
            n_in,
            n_out,
        }
    }

    pub fn without_bias(lb: &mut LayoutBuilder, n_in: usize, n_out: usize) -> Self {
        Linear {
            w: lb.alloc(n_in * n_out),
            b: None,
            n_in,
            n_out,
        }
    }

    fn init(&self, p: &mut [f64], std: f64, rng: &mut Rng) {
        gaussian(self.w.of_mut(p), std, rng);
        if let Some(b) = self.b {
            b.of_mut(p).fill(0.0);
        }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.n_out];
        matmul(&mut y, x, self.w.of(p), rows, self.n_in, self.n_out, false, false, false);
        if let Some(b) = self.b {
            let b = b.of(p);
            for row in y.chunks_exact_mut(self.n_out) {
                for (o, bb) in row.iter_mut().zip(b) {
                    *o += bb;
                }
            }
        }
        y
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], rows: usize, g: &mut [f64]) -> Vec<f64> {
        matmul(self.w.of_mut(g), x, dy, self.n_in, rows, self.n_out, true, false, true);
        if let Some(b) = self.b {
            let gb = b.of_mut(g);
            for row in dy.chunks_exact(self.n_out) {
                for (o, d) in gb.iter_mut().zip(row) {
                    *o += d;
                }
            }
        }
        let mut dx = vec![0.0; rows * self.n_in];
        matmul(&mut dx, dy, self.w.of(p), rows, self.n_out, self.n_in, false, true, false);
        dx
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Span,
    pub beta: Span,
    pub dim: usize,
}

#[derive(Clone, Debug, Default)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(lb: &mut LayoutBuilder, dim: usize) -> Self {
        LayerNorm {
            gamma: lb.alloc(dim),
            beta: lb.alloc(dim),
            dim,
        }
    }

    fn init(&self, p: &mut [f64]) {
        self.gamma.of_mut(p).fill(1.0);
        self.beta.of_mut(p).fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let d = self.dim;
        let gamma = self.gamma.of(p);
        let beta = self.beta.of(p);
        let rows = x.len() / d;
        let mut y = vec![0.0; x.len()];
        let mut cache = LayerNormCache {
            xhat: vec![0.0; x.len()],
            inv_std: vec![0.0; rows],
        };
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            cache.inv_std[r] = inv;
            for i in 0..d {
                let h = (xr[i] - mean) * inv;
                cache.xhat[r * d + i] = h;
                y[r * d + i] = gamma[i] * h + beta[i];
            }
        }
        (y, cache)
    }

    pub fn backward(&self, p: &[f64], cache: &LayerNormCache, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let d = self.dim;
        let gamma = self.gamma.of(p);
        let rows = dy.len() / d;
        {
            let gg = self.gamma.of_mut(g);
            for r in 0..rows {
                for i in 0..d {
                    gg[i] += dy[r * d + i] * cache.xhat[r * d + i];
                }
            }
        }
        {
            let gb = self.beta.of_mut(g);
            for r in 0..rows {
                for i in 0..d {
                    gb[i] += dy[r * d + i];
                }
            }
        }
        let mut dx = vec![0.0; dy.len()];
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut sum = 0.0;
            let mut sum_xh = 0.0;
            for i in 0..d {
                dxhat[i] = dy[r * d + i] * gamma[i];
                sum += dxhat[i];
                sum_xh += dxhat[i] * xh[i];
            }
            let scale = cache.inv_std[r] / d as f64;
            for i in 0..d {
                dx[r * d + i] = scale * (d as f64 * dxhat[i] - sum - xh[i] * sum_xh);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub init_std: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.max_len == 0 || self.ffn_mult == 0 {
            return Err(Error::InvalidConfig("transformer dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct BlockCache {
    ln1: LayerNormCache,
    a_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LayerNormCache,
    f_in: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

/// Multi-head causal attention. Query row `r` sits at absolute position
/// `offset + r` and sees keys `0..=offset + r`. Returns the concatenated head
/// outputs and the attention probabilities (`heads x n_q x n_kv`).
#[allow(clippy::too_many_arguments)]
fn attend(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_q: usize,
    n_kv: usize,
    offset: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = vec![0.0; n_q * d];
    let mut probs = vec![0.0; heads * n_q * n_kv];
    for h in 0..heads {
        let c0 = h * dh;
        for r in 0..n_q {
            let visible = (offset + r + 1).min(n_kv);
            let qr = &q[r * d + c0..r * d + c0 + dh];
            let row = &mut probs[(h * n_q + r) * n_kv..(h * n_q + r + 1) * n_kv];
            let mut m = f64::NEG_INFINITY;
            for j in 0..visible {
                let kj = &k[j * d + c0..j * d + c0 + dh];
                let s = qr.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                row[j] = s;
                m = m.max(s);
            }
            let mut sum = 0.0;
            for s in row.iter_mut().take(visible) {
                *s = (*s - m).exp();
                sum += *s;
            }
            let out = &mut ctx[r * d + c0..r * d + c0 + dh];
            for j in 0..visible {
                row[j] /= sum;
                let a = row[j];
                let vj = &v[j * d + c0..j * d + c0 + dh];
                for (o, vv) in out.iter_mut().zip(vj) {
                    *o += a * vv;
                }
            }
        }
    }
    (ctx, probs)
}

impl Block {
    fn new(lb: &mut LayoutBuilder, d: usize, ffn: usize) -> Self {
        Block {
            ln1: LayerNorm::new(lb, d),
            wq: Linear::new(lb, d, d),
            // a key bias shifts every score in a row equally, so it has no gradient
            wk: Linear::without_bias(lb, d, d),
            wv: Linear::new(lb, d, d),
            wo: Linear::new(lb, d, d),
            ln2: LayerNorm::new(lb, d),
            fc1: Linear::new(lb, d, ffn),
            fc2: Linear::new(lb, ffn, d),
        }
    }

    fn init(&self, p: &mut [f64], n_blocks: usize, rng: &mut Rng) {
        let d = self.wq.n_in as f64;
        let resid = 1.0 / ((2 * n_blocks) as f64).sqrt();
        self.ln1.init(p);
        self.ln2.init(p);
        self.wq.init(p, 1.0 / d.sqrt(), rng);
        self.wk.init(p, 1.0 / d.sqrt(), rng);
        self.wv.init(p, 1.0 / d.sqrt(), rng);
        self.wo.init(p, resid / d.sqrt(), rng);
        self.fc1.init(p, 1.0 / d.sqrt(), rng);
        self.fc2.init(p, resid / (self.fc2.n_in as f64).sqrt(), rng);
    }

    fn forward(&self, p: &[f64], x: Vec<f64>, t: usize, heads: usize) -> (Vec<f64>, BlockCache) {
        let d = self.wq.n_in;
        let (a_in, ln1) = self.ln1.forward(p, &x);
        let q = self.wq.forward(p, &a_in, t);
        let k = self.wk.forward(p, &a_in, t);
        let v = self.wv.forward(p, &a_in, t);
        let (ctx, probs) = attend(&q, &k, &v, t, t, 0, d, heads);
        let att = self.wo.forward(p, &ctx, t);
        let h: Vec<f64> = x.iter().zip(&att).map(|(a, b)| a + b).collect();
        let (f_in, ln2) = self.ln2.forward(p, &h);
        let u = self.fc1.forward(p, &f_in, t);
        let act: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let f = self.fc2.forward(p, &act, t);
        let out = h.iter().zip(&f).map(|(a, b)| a + b).collect();
        let cache = BlockCache {
            ln1,
            a_in,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            f_in,
            u,
            act,
        };
        (out, cache)
    }

    fn backward(&self, p: &[f64], c: &BlockCache, dout: &[f64], t: usize, heads: usize, g: &mut [f64]) -> Vec<f64> {
        let d = self.wq.n_in;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // feed-forward branch
        let dact = self.fc2.backward(p, &c.act, dout, t, g);
        let du: Vec<f64> = dact.iter().zip(&c.u).map(|(a, &u)| a * gelu_grad(u)).collect();
        let df_in = self.fc1.backward(p, &c.f_in, &du, t, g);
        let mut dh_res = self.ln2.backward(p, &c.ln2, &df_in, g);
        for (a, b) in dh_res.iter_mut().zip(dout) {
            *a += b;
        }
        // attention branch
        let dctx = self.wo.backward(p, &c.ctx, &dh_res, t, g);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..heads {
            let c0 = h * dh;
            for r in 0..t {
                let row = &c.probs[(h * t + r) * t..(h * t + r + 1) * t];
                let dc = &dctx[r * d + c0..r * d + c0 + dh];
                let mut dot = 0.0;
                for j in 0..=r {
                    let vj = &c.v[j * d + c0..j * d + c0 + dh];
                    dp[j] = dc.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += dp[j] * row[j];
                    let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                    for (o, x) in dvj.iter_mut().zip(dc) {
                        *o += row[j] * x;
                    }
                }
                for j in 0..=r {
                    let ds = row[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for i in 0..dh {
                        dq[r * d + c0 + i] += ds * c.k[j * d + c0 + i];
                        dk[j * d + c0 + i] += ds * c.q[r * d + c0 + i];
                    }
                }
            }
        }
        let mut da = self.wq.backward(p, &c.a_in, &dq, t, g);
        for (a, b) in da.iter_mut().zip(self.wk.backward(p, &c.a_in, &dk, t, g)) {
            *a += b;
        }
        for (a, b) in da.iter_mut().zip(self.wv.backward(p, &c.a_in, &dv, t, g)) {
            *a += b;
        }
        let mut dx = self.ln1.backward(p, &c.ln1, &da, g);
        for (a, b) in dx.iter_mut().zip(&dh_res) {
            *a += b;
        }
        dx
    }

    /// Inference step over new rows given the keys/values of earlier
    /// positions. Returns the outputs and this call's keys and values.
    fn infer(&self, p: &[f64], x: &[f64], past_k: &[f64], past_v: &[f64], heads: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.wq.n_in;
        let s = x.len() / d;
        let past = past_k.len() / d;
        let (a_in, _) = self.ln1.forward(p, x);
        let q = self.wq.forward(p, &a_in, s);
        let k_new = self.wk.forward(p, &a_in, s);
        let v_new = self.wv.forward(p, &a_in, s);
        let k_all = [past_k, &k_new].concat();
        let v_all = [past_v, &v_new].concat();
        let (ctx, _) = attend(&q, &k_all, &v_all, s, past + s, past, d, heads);
        let att = self.wo.forward(p, &ctx, s);
        let h: Vec<f64> = x.iter().zip(&att).map(|(a, b)| a + b).collect();
        let (f_in, _) = self.ln2.forward(p, &h);
        let u = self.fc1.forward(p, &f_in, s);
        let act: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let f = self.fc2.forward(p, &act, s);
        let out = h.iter().zip(&f).map(|(a, b)| a + b).collect();
        (out, k_new, v_new)
    }
}

/// Token + learned position embeddings, pre-norm causal blocks, final norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub tok_emb: Span,
    pub pos_emb: Span,
    blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

pub struct Trace {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    /// Final hidden states, `t x d_model`.
    pub hidden: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Keys and values of an encoded context, for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache {
    len: usize,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Final hidden state of the last context position.
    pub last_hidden: Vec<f64>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Transformer {
    pub fn new(cfg: TransformerConfig, lb: &mut LayoutBuilder) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok_emb = lb.alloc(cfg.vocab * d);
        let pos_emb = lb.alloc(cfg.max_len * d);
        let blocks = (0..cfg.n_blocks)
            .map(|_| Block::new(lb, d, d * cfg.ffn_mult))
            .collect();
        let ln_f = LayerNorm::new(lb, d);
        Ok(Transformer {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    pub fn init(&self, p: &mut [f64], rng: &mut Rng) {
        gaussian(self.tok_emb.of_mut(p), self.cfg.init_std, rng);
        gaussian(self.pos_emb.of_mut(p), self.cfg.init_std, rng);
        for b in &self.blocks {
            b.init(p, self.cfg.n_blocks.max(1), rng);
        }
        self.ln_f.init(p);
    }

    pub fn token_embedding<'a>(&self, p: &'a [f64], token: usize) -> &'a [f64] {
        let d = self.cfg.d_model;
        &self.tok_emb.of(p)[token * d..(token + 1) * d]
    }

    fn embed(&self, p: &[f64], tokens: &[usize], start: usize) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        if start + tokens.len() > self.cfg.max_len {
            return Err(Error::ContractViolation(format!(
                "sequence of {} exceeds max length {}",
                start + tokens.len(),
                self.cfg.max_len
            )));
        }
        let te = self.tok_emb.of(p);
        let pe = self.pos_emb.of(p);
        let mut x = vec![0.0; tokens.len() * d];
        for (r, &tok) in tokens.iter().enumerate() {
            if tok >= self.cfg.vocab {
                return Err(Error::ContractViolation(format!("token {tok} outside vocabulary")));
            }
            let pos = start + r;
            for i in 0..d {
                x[r * d + i] = te[tok * d + i] + pe[pos * d + i];
            }
        }
        Ok(x)
    }

    pub fn forward(&self, p: &[f64], tokens: &[usize]) -> Result<Trace> {
        let t = tokens.len();
        let mut x = self.embed(p, tokens, 0)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, c) = b.forward(p, x, t, self.cfg.n_heads);
            caches.push(c);
            x = out;
        }
        let (hidden, ln_f) = self.ln_f.forward(p, &x);
        Ok(Trace {
            tokens: tokens.to_vec(),
            blocks: caches,
            ln_f,
            hidden,
        })
    }

    /// Accumulates parameter gradients given the gradient of the final
    /// hidden states.
    pub fn backward(&self, p: &[f64], trace: &Trace, d_hidden: &[f64], g: &mut [f64]) {
        let t = trace.tokens.len();
        let d = self.cfg.d_model;
        let mut dx = self.ln_f.backward(p, &trace.ln_f, d_hidden, g);
        for (b, c) in self.blocks.iter().zip(&trace.blocks).rev() {
            dx = b.backward(p, c, &dx, t, self.cfg.n_heads, g);
        }
        {
            let gt = self.tok_emb.of_mut(g);
            for (r, &tok) in trace.tokens.iter().enumerate() {
                for i in 0..d {
                    gt[tok * d + i] += dx[r * d + i];
                }
            }
        }
        let gp = self.pos_emb.of_mut(g);
        for r in 0..t {
            for i in 0..d {
                gp[r * d + i] += dx[r * d + i];
            }
        }
    }

    pub fn encode(&self, p: &[f64], tokens: &[usize]) -> Result<KvCache> {
        if tokens.is_empty() {
            return Err(Error::ContractViolation("cannot encode an empty context".into()));
        }
        let d = self.cfg.d_model;
        let mut x = self.embed(p, tokens, 0)?;
        let mut ks = Vec::with_capacity(self.blocks.len());
        let mut vs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, k, v) = b.infer(p, &x, &[], &[], self.cfg.n_heads);
            ks.push(k);
            vs.push(v);
            x = out;
        }
        let last = &x[(tokens.len() - 1) * d..];
        let (h, _) = self.ln_f.forward(p, last);
        Ok(KvCache {
            len: tokens.len(),
            k: ks,
            v: vs,
            last_hidden: h,
        })
    }

    /// Final hidden state of the last `suffix` position, continuing `cache`.
    /// An empty suffix returns the cached context state.
    pub fn extend(&self, p: &[f64], cache: &KvCache, suffix: &[usize]) -> Result<Vec<f64>> {
        if suffix.is_empty() {
            return Ok(cache.last_hidden.clone());
        }
        let d = self.cfg.d_model;
        let mut x = self.embed(p, suffix, cache.len)?;
        for (i, b) in self.blocks.iter().enumerate() {
            let (out, _, _) = b.infer(p, &x, &cache.k[i], &cache.v[i], self.cfg.n_heads);
            x = out;
        }
        let last = &x[(suffix.len() - 1) * d..];
        Ok(self.ln_f.forward(p, last).0)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Rescales `g` in place so its L2 norm is at most `max_norm`.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for v in g.iter_mut() {
            *v *= s;
        }
    }
    norm
}

/// Examples per gradient accumulator; fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 4;

/// Sums per-example gradients and losses. `f` accumulates one example's
/// gradient into the buffer it is given and returns its loss.
pub fn batch_gradient<T, F>(n_params: usize, examples: &[T], f: F) -> Result<(Vec<f64>, f64)>
where
    T: Sync,
    F: Fn(&T, &mut [f64]) -> Result<f64> + Sync,
{
    let parts: Vec<Result<(Vec<f64>, f64)>> = examples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; n_params];
            let mut loss = 0.0;
            for ex in chunk {
                loss += f(ex, &mut g)?;
            }
            Ok((g, loss))
        })
        .collect();
    let mut total = vec![0.0; n_params];
    let mut loss = 0.0;
    for part in parts {
        let (g, l) = part?;
        for (a, b) in total.iter_mut().zip(&g) {
            *a += b;
        }
        loss += l;
    }
    Ok((total, loss))
}

/// Uniform integer in `0..n` (`n > 0`).
pub fn below(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
