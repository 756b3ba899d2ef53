//! Byte-level causal language model: one single-head self-attention block
//! followed by a ReLU feed-forward layer, both residual, with an untied output
//! projection. Forward and backward passes are written out by hand for this
//! fixed architecture.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{log_sum_exp, Scalar};

pub type Token = u16;

pub const BYTE_TOKENS: usize = 256;
pub const BOS: Token = 256;
pub const EOS: Token = 257;
pub const PAD: Token = 258;
pub const VOCAB_SIZE: usize = 259;

pub const ARCH_TAG: &str = "byte-attn1-relu";

pub fn encode(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

/// Decode byte tokens, dropping special tokens. Invalid UTF-8 is replaced.
pub fn decode(tokens: &[Token]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| (t as usize) < BYTE_TOKENS)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// `BOS` followed by the bytes of `text`.
pub fn encode_with_bos(text: &str) -> Vec<Token> {
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(BOS);
    out.extend(text.bytes().map(Token::from));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Positions available, including the leading BOS.
    pub max_seq: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            embed_dim: 64,
            hidden_dim: 128,
            max_seq: 256,
        }
    }
}

impl LmConfig {
    /// Width grows with capability rank: 32/64/128 for ranks 1/2/3.
    pub fn for_capability(rank: u32) -> Self {
        let embed_dim = 16usize << rank.clamp(1, 4);
        LmConfig {
            embed_dim,
            hidden_dim: 2 * embed_dim,
            ..LmConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    tok: usize,
    pos: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wout: usize,
    bout: usize,
    total: usize,
}

impl Layout {
    fn new(c: &LmConfig) -> Self {
        let (d, h, v, p) = (c.embed_dim, c.hidden_dim, VOCAB_SIZE, c.max_seq);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(v * d);
        let pos = take(p * d);
        let wq = take(d * d);
        let wk = take(d * d);
        let wv = take(d * d);
        let wo = take(d * d);
        let w1 = take(d * h);
        let b1 = take(h);
        let w2 = take(h * d);
        let b2 = take(d);
        let wout = take(d * v);
        let bout = take(v);
        Layout {
            tok,
            pos,
            wq,
            wk,
            wv,
            wo,
            w1,
            b1,
            w2,
            b2,
            wout,
            bout,
            total: at,
        }
    }

    /// Range of the output projection (weights and bias).
    fn output_head(&self) -> std::ops::Range<usize> {
        self.wout..self.total
    }
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<S> {
    pub tokens: Vec<Token>,
    x0: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    /// Row-major `len x len`, lower triangular.
    probs: Vec<S>,
    att: Vec<S>,
    x1: Vec<S>,
    hpre: Vec<S>,
    /// Final residual stream, `len x embed_dim`.
    pub x2: Vec<S>,
}

impl<S> Trace<S> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Output log-distributions for a contiguous run of positions.
#[derive(Debug, Clone)]
pub struct HeadCache<S> {
    pub start: usize,
    /// `n x VOCAB_SIZE` log-probabilities.
    pub logprobs: Vec<S>,
}

impl<S: Scalar> HeadCache<S> {
    pub fn row(&self, i: usize) -> &[S] {
        &self.logprobs[i * VOCAB_SIZE..(i + 1) * VOCAB_SIZE]
    }
}

/// Cached keys and values for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache<S> {
    k: Vec<S>,
    v: Vec<S>,
    len: usize,
}

impl<S> KvCache<S> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm<S> {
    config: LmConfig,
    layout: Layout,
    params: Vec<S>,
}

// out[m x n] += a[m x k] * b[k x n]
fn mm_acc<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + aip * bv;
            }
        }
    }
}

// out[k x n] += a[m x k]^T * b[m x n]
fn mm_at_b_acc<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

// out[m x k] += a[m x n] * b[k x n]^T
fn mm_a_bt_acc<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let dot: S = arow
                .iter()
                .zip(&b[p * n..(p + 1) * n])
                .map(|(&x, &y)| x * y)
                .sum();
            out[i * k + p] = out[i * k + p] + dot;
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl<S: Scalar> TinyLm<S> {
    /// Random initialization with a zero output projection, so the initial
    /// next-token distribution is uniform.
    pub fn new(config: LmConfig, rng: &mut impl Rng) -> Self {
        let mut lm = TinyLm::zeros(config);
        let l = lm.layout;
        let d = config.embed_dim;
        let h = config.hidden_dim;
        let mut fill = |params: &mut [S], scale: f64| {
            for p in params {
                *p = S::of(rng.gen_range(-scale..scale));
            }
        };
        let emb = 0.5;
        let proj = (3.0 / d as f64).sqrt();
        fill(&mut lm.params[l.tok..l.pos], emb);
        fill(&mut lm.params[l.pos..l.wq], emb * 0.5);
        fill(&mut lm.params[l.wq..l.w1], proj);
        fill(&mut lm.params[l.w1..l.b1], proj);
        fill(&mut lm.params[l.w2..l.b2], (3.0 / h as f64).sqrt() * 0.5);
        lm
    }

    pub fn zeros(config: LmConfig) -> Self {
        assert!(config.embed_dim > 0 && config.hidden_dim > 0 && config.max_seq > 1);
        let layout = Layout::new(&config);
        TinyLm {
            config,
            layout,
            params: vec![S::zero(); layout.total],
        }
    }

    pub fn from_params(config: LmConfig, params: Vec<S>) -> Option<Self> {
        let layout = Layout::new(&config);
        (params.len() == layout.total).then_some(TinyLm {
            config,
            layout,
            params,
        })
    }

    /// Randomize the output projection as well (useful for tests that need
    /// a non-uniform model without training).
    pub fn randomize_output_head(&mut self, scale: f64, rng: &mut impl Rng) {
        for p in &mut self.params[self.layout.output_head()] {
            *p = S::of(rng.gen_range(-scale..scale));
        }
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn cast<T: Scalar>(&self) -> TinyLm<T> {
        TinyLm {
            config: self.config,
            layout: self.layout,
            params: self.params.iter().map(|p| T::of(p.as_f64())).collect(),
        }
    }

    pub fn forward(&self, tokens: &[Token]) -> Trace<S> {
        let t = tokens.len();
        let c = &self.config;
        assert!(t > 0, "empty sequence");
        assert!(
            t <= c.max_seq,
            "sequence of {t} tokens exceeds max_seq {}",
            c.max_seq
        );
        let (d, h) = (c.embed_dim, c.hidden_dim);
        let l = &self.layout;
        let p = &self.params;

        let mut x0 = vec![S::zero(); t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = &p[l.tok + tok as usize * d..][..d];
            let pe = &p[l.pos + i * d..][..d];
            for ((o, &a), &b) in x0[i * d..(i + 1) * d].iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        let mut q = vec![S::zero(); t * d];
        let mut k = vec![S::zero(); t * d];
        let mut v = vec![S::zero(); t * d];
        mm_acc(&mut q, &x0, &p[l.wq..l.wq + d * d], t, d, d);
        mm_acc(&mut k, &x0, &p[l.wk..l.wk + d * d], t, d, d);
        mm_acc(&mut v, &x0, &p[l.wv..l.wv + d * d], t, d, d);

        let scale = S::one() / S::of(d as f64).sqrt();
        let mut probs = vec![S::zero(); t * t];
        let mut att = vec![S::zero(); t * d];
        for i in 0..t {
            let qi = &q[i * d..(i + 1) * d];
            let row = &mut probs[i * t..i * t + i + 1];
            for (j, r) in row.iter_mut().enumerate() {
                *r = dot(qi, &k[j * d..(j + 1) * d]) * scale;
            }
            crate::scalar::softmax_in_place(row);
            let out = &mut att[i * d..(i + 1) * d];
            for (j, &pij) in row.iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *o = *o + pij * vv;
                }
            }
        }
        let mut x1 = x0.clone();
        mm_acc(&mut x1, &att, &p[l.wo..l.wo + d * d], t, d, d);

        let mut hpre = vec![S::zero(); t * h];
        for i in 0..t {
            hpre[i * h..(i + 1) * h].copy_from_slice(&p[l.b1..l.b1 + h]);
        }
        mm_acc(&mut hpre, &x1, &p[l.w1..l.w1 + d * h], t, d, h);
        let hact: Vec<S> = hpre.iter().map(|&x| x.max(S::zero())).collect();
        let mut x2 = x1.clone();
        for i in 0..t {
            for (o, &b) in x2[i * d..(i + 1) * d].iter_mut().zip(&p[l.b2..l.b2 + d]) {
                *o = *o + b;
            }
        }
        mm_acc(&mut x2, &hact, &p[l.w2..l.w2 + h * d], t, h, d);

        Trace {
            tokens: tokens.to_vec(),
            x0,
            q,
            k,
            v,
            probs,
            att,
            x1,
            hpre,
            x2,
        }
    }

    /// Output logits for one final-stream row.
    pub fn logits_for(&self, x2_row: &[S], out: &mut [S]) {
        let (d, l) = (self.config.embed_dim, &self.layout);
        out.copy_from_slice(&self.params[l.bout..l.bout + VOCAB_SIZE]);
        mm_acc(
            out,
            x2_row,
            &self.params[l.wout..l.wout + d * VOCAB_SIZE],
            1,
            d,
            VOCAB_SIZE,
        );
    }

    /// Log next-token distributions at positions `start..trace.len()`.
    pub fn head(&self, trace: &Trace<S>, start: usize) -> HeadCache<S> {
        let d = self.config.embed_dim;
        let n = trace.len().saturating_sub(start);
        let mut logprobs = vec![S::zero(); n * VOCAB_SIZE];
        for r in 0..n {
            let i = start + r;
            let row = &mut logprobs[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE];
            self.logits_for(&trace.x2[i * d..(i + 1) * d], row);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        HeadCache { start, logprobs }
    }

    /// `log p(tokens[i + 1] | tokens[..=i])` for every position covered by `cache`
    /// that has a successor.
    pub fn target_logprobs(&self, trace: &Trace<S>, cache: &HeadCache<S>) -> Vec<S> {
        (cache.start..trace.len() - 1)
            .map(|i| cache.row(i - cache.start)[trace.tokens[i + 1] as usize])
            .collect()
    }

    /// Accumulate into `grad` the gradient of `sum_i coeffs[i] * log p(target_i)`
    /// over positions `cache.start + i`, and return the resulting gradient on
    /// the final residual stream (to be passed to [`TinyLm::backward`]).
    pub fn head_backward(
        &self,
        trace: &Trace<S>,
        cache: &HeadCache<S>,
        coeffs: &[S],
        grad: &mut [S],
    ) -> Vec<S> {
        let d = self.config.embed_dim;
        let l = &self.layout;
        let mut dx2 = vec![S::zero(); trace.len() * d];
        let mut dlogits = vec![S::zero(); VOCAB_SIZE];
        for (r, &c) in coeffs.iter().enumerate() {
            if c == S::zero() {
                continue;
            }
            let i = cache.start + r;
            let target = trace.tokens[i + 1] as usize;
            for (dl, &lp) in dlogits.iter_mut().zip(cache.row(r)) {
                *dl = -c * lp.exp();
            }
            dlogits[target] = dlogits[target] + c;
            let x2_row = &trace.x2[i * d..(i + 1) * d];
            mm_at_b_acc(
                &mut grad[l.wout..l.wout + d * VOCAB_SIZE],
                x2_row,
                &dlogits,
                1,
                d,
                VOCAB_SIZE,
            );
            for (g, &dl) in grad[l.bout..l.bout + VOCAB_SIZE].iter_mut().zip(&dlogits) {
                *g = *g + dl;
            }
            mm_a_bt_acc(
                &mut dx2[i * d..(i + 1) * d],
                &dlogits,
                &self.params[l.wout..l.wout + d * VOCAB_SIZE],
                1,
                d,
                VOCAB_SIZE,
            );
        }
        dx2
    }

    /// Backpropagate a gradient on the final residual stream into `grad`.
    pub fn backward(&self, trace: &Trace<S>, dx2: &[S], grad: &mut [S]) {
        let t = trace.len();
        let (d, h) = (self.config.embed_dim, self.config.hidden_dim);
        let l = &self.layout;
        let p = &self.params;
        assert_eq!(dx2.len(), t * d);
        assert_eq!(grad.len(), p.len());

        // feed-forward
        let hact: Vec<S> = trace.hpre.iter().map(|&x| x.max(S::zero())).collect();
        mm_at_b_acc(&mut grad[l.w2..l.w2 + h * d], &hact, dx2, t, h, d);
        for i in 0..t {
            for (g, &dv) in grad[l.b2..l.b2 + d]
                .iter_mut()
                .zip(&dx2[i * d..(i + 1) * d])
            {
                *g = *g + dv;
            }
        }
        let mut dh = vec![S::zero(); t * h];
        mm_a_bt_acc(&mut dh, dx2, &p[l.w2..l.w2 + h * d], t, h, d);
        for (g, &pre) in dh.iter_mut().zip(&trace.hpre) {
            if pre <= S::zero() {
                *g = S::zero();
            }
        }
        mm_at_b_acc(&mut grad[l.w1..l.w1 + d * h], &trace.x1, &dh, t, d, h);
        for i in 0..t {
            for (g, &dv) in grad[l.b1..l.b1 + h].iter_mut().zip(&dh[i * h..(i + 1) * h]) {
                *g = *g + dv;
            }
        }
        let mut dx1 = dx2.to_vec();
        mm_a_bt_acc(&mut dx1, &dh, &p[l.w1..l.w1 + d * h], t, d, h);

        // attention output projection
        mm_at_b_acc(&mut grad[l.wo..l.wo + d * d], &trace.att, &dx1, t, d, d);
        let mut datt = vec![S::zero(); t * d];
        mm_a_bt_acc(&mut datt, &dx1, &p[l.wo..l.wo + d * d], t, d, d);

        // attention
        let scale = S::one() / S::of(d as f64).sqrt();
        let mut dq = vec![S::zero(); t * d];
        let mut dk = vec![S::zero(); t * d];
        let mut dv = vec![S::zero(); t * d];
        let mut dp = vec![S::zero(); t];
        for i in 0..t {
            let da = &datt[i * d..(i + 1) * d];
            let probs = &trace.probs[i * t..i * t + i + 1];
            for j in 0..=i {
                dp[j] = dot(da, &trace.v[j * d..(j + 1) * d]);
                let pij = probs[j];
                for (o, &g) in dv[j * d..(j + 1) * d].iter_mut().zip(da) {
                    *o = *o + pij * g;
                }
            }
            let mean: S = probs.iter().zip(&dp[..=i]).map(|(&a, &b)| a * b).sum();
            for j in 0..=i {
                let ds = probs[j] * (dp[j] - mean) * scale;
                if ds == S::zero() {
                    continue;
                }
                for (o, &kv) in dq[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&trace.k[j * d..(j + 1) * d])
                {
                    *o = *o + ds * kv;
                }
                for (o, &qv) in dk[j * d..(j + 1) * d]
                    .iter_mut()
                    .zip(&trace.q[i * d..(i + 1) * d])
                {
                    *o = *o + ds * qv;
                }
            }
        }
        mm_at_b_acc(&mut grad[l.wq..l.wq + d * d], &trace.x0, &dq, t, d, d);
        mm_at_b_acc(&mut grad[l.wk..l.wk + d * d], &trace.x0, &dk, t, d, d);
        mm_at_b_acc(&mut grad[l.wv..l.wv + d * d], &trace.x0, &dv, t, d, d);
        let mut dx0 = dx1;
        mm_a_bt_acc(&mut dx0, &dq, &p[l.wq..l.wq + d * d], t, d, d);
        mm_a_bt_acc(&mut dx0, &dk, &p[l.wk..l.wk + d * d], t, d, d);
        mm_a_bt_acc(&mut dx0, &dv, &p[l.wv..l.wv + d * d], t, d, d);

        // embeddings
        for (i, &tok) in trace.tokens.iter().enumerate() {
            let row = &dx0[i * d..(i + 1) * d];
            let te = l.tok + tok as usize * d;
            for (g, &v) in grad[te..te + d].iter_mut().zip(row) {
                *g = *g + v;
            }
            let pe = l.pos + i * d;
            for (g, &v) in grad[pe..pe + d].iter_mut().zip(row) {
                *g = *g + v;
            }
        }
    }

    pub fn new_cache(&self) -> KvCache<S> {
        let n = self.config.max_seq * self.config.embed_dim;
        KvCache {
            k: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            len: 0,
        }
    }

    /// Feed one token at the next position and return the final-stream row for
    /// it. Matches the corresponding row of [`TinyLm::forward`].
    pub fn step(&self, cache: &mut KvCache<S>, token: Token) -> Vec<S> {
        let c = &self.config;
        let (d, h) = (c.embed_dim, c.hidden_dim);
        let i = cache.len;
        assert!(i < c.max_seq, "position {i} exceeds max_seq {}", c.max_seq);
        let l = &self.layout;
        let p = &self.params;
        let x0: Vec<S> = p[l.tok + token as usize * d..][..d]
            .iter()
            .zip(&p[l.pos + i * d..][..d])
            .map(|(&a, &b)| a + b)
            .collect();
        let mut q = vec![S::zero(); d];
        let mut k = vec![S::zero(); d];
        let mut v = vec![S::zero(); d];
        mm_acc(&mut q, &x0, &p[l.wq..l.wq + d * d], 1, d, d);
        mm_acc(&mut k, &x0, &p[l.wk..l.wk + d * d], 1, d, d);
        mm_acc(&mut v, &x0, &p[l.wv..l.wv + d * d], 1, d, d);
        cache.k.extend_from_slice(&k);
        cache.v.extend_from_slice(&v);
        cache.len += 1;

        let scale = S::one() / S::of(d as f64).sqrt();
        let mut scores: Vec<S> = (0..=i)
            .map(|j| dot(&q, &cache.k[j * d..(j + 1) * d]) * scale)
            .collect();
        crate::scalar::softmax_in_place(&mut scores);
        let mut att = vec![S::zero(); d];
        for (j, &pij) in scores.iter().enumerate() {
            for (o, &vv) in att.iter_mut().zip(&cache.v[j * d..(j + 1) * d]) {
                *o = *o + pij * vv;
            }
        }
        let mut x1 = x0;
        mm_acc(&mut x1, &att, &p[l.wo..l.wo + d * d], 1, d, d);
        let mut hid = p[l.b1..l.b1 + h].to_vec();
        mm_acc(&mut hid, &x1, &p[l.w1..l.w1 + d * h], 1, d, h);
        for x in hid.iter_mut() {
            *x = x.max(S::zero());
        }
        let mut x2 = x1;
        for (o, &b) in x2.iter_mut().zip(&p[l.b2..l.b2 + d]) {
            *o = *o + b;
        }
        mm_acc(&mut x2, &hid, &p[l.w2..l.w2 + h * d], 1, h, d);
        x2
    }

    /// Next-token log-distribution after a step.
    pub fn step_logprobs(&self, x2_row: &[S]) -> Vec<S> {
        let mut logits = vec![S::zero(); VOCAB_SIZE];
        self.logits_for(x2_row, &mut logits);
        let lse = log_sum_exp(&logits);
        logits.iter().map(|&x| x - lse).collect()
    }

    /// Sum of log-probabilities of `continuation` given `prompt` (both raw text;
    /// a BOS token is prepended to the prompt).
    pub fn log_prob(&self, prompt: &str, continuation: &str) -> S {
        let mut tokens = encode_with_bos(prompt);
        let start = tokens.len() - 1;
        tokens.extend(encode(continuation));
        self.log_prob_tokens(&tokens, start)
    }

    /// Sum of `log p(tokens[i + 1] | tokens[..=i])` for `i >= start`.
    pub fn log_prob_tokens(&self, tokens: &[Token], start: usize) -> S {
        let trace = self.forward(tokens);
        let cache = self.head(&trace, start);
        self.target_logprobs(&trace, &cache).into_iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> LmConfig {
        LmConfig {
            embed_dim: 8,
            hidden_dim: 12,
            max_seq: 40,
        }
    }

    fn random_lm(seed: u64) -> TinyLm<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lm = TinyLm::new(small(), &mut rng);
        lm.randomize_output_head(0.5, &mut rng);
        lm
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lm: TinyLm<f64> = TinyLm::new(small(), &mut rng);
        let lp = lm.log_prob("hello", "x");
        assert!((lp - (1.0 / VOCAB_SIZE as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn distributions_normalize() {
        let lm = random_lm(2);
        let trace = lm.forward(&encode_with_bos("abc def"));
        let cache = lm.head(&trace, 0);
        for r in 0..trace.len() {
            let total: f64 = cache.row(r).iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn chain_rule_of_log_prob() {
        let lm = random_lm(3);
        let whole = lm.log_prob("Human: hi", " there you");
        let split = lm.log_prob("Human: hi", " there") + lm.log_prob("Human: hi there", " you");
        assert!((whole - split).abs() < 1e-9);
    }

    #[test]
    fn incremental_steps_match_full_forward() {
        let lm = random_lm(4);
        let tokens = encode_with_bos("incremental!");
        let trace = lm.forward(&tokens);
        let mut cache = lm.new_cache();
        let d = lm.config().embed_dim;
        for (i, &t) in tokens.iter().enumerate() {
            let row = lm.step(&mut cache, t);
            for (a, b) in row.iter().zip(&trace.x2[i * d..(i + 1) * d]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cast_round_trip_preserves_shape() {
        let lm = random_lm(5);
        let f: TinyLm<f32> = lm.cast();
        assert_eq!(f.num_params(), lm.num_params());
        assert!(TinyLm::<f32>::from_params(small(), vec![0.0; 3]).is_none());
    }

    #[test]
    fn capability_widths() {
        assert_eq!(LmConfig::for_capability(1).embed_dim, 32);
        assert_eq!(LmConfig::for_capability(2).embed_dim, 64);
        assert_eq!(LmConfig::for_capability(3).embed_dim, 128);
    }

    #[test]
    fn decode_skips_specials() {
        let mut t = encode_with_bos("ok");
        t.push(EOS);
        assert_eq!(decode(&t), "ok");
    }
}
