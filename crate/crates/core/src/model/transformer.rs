//! Decoder-only transformer: pre-norm RMSNorm blocks, causal multi-head
//! attention with rotary position embeddings, SwiGLU MLP, untied output
//! head. Forward and backward passes are written out by hand over flat
//! row-major buffers.
//!
//! The output head is either a language-model head (`hidden → vocab`) or a
//! class head (`hidden → n_classes`) applied at every position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::linalg::{gemm, MatMut, MatRef, Scalar};
use super::params::ParamStore;
use super::{HeadMode, Positional, TransformerConfig};
use crate::error::{Error, Result};

pub type TransformerModel = Transformer<f32>;

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    Full,
    /// Only the output head; the body is treated as frozen.
    HeadOnly,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIdx {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    mlp_norm: usize,
    w1: usize,
    w3: usize,
    w2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<F: Scalar = f32> {
    pub config: TransformerConfig,
    pub head_mode: HeadMode,
    pub seed: u64,
    pub params: ParamStore<F>,
    /// Round matmul inputs to bfloat16 in the forward pass; parameters and
    /// gradients stay in full precision.
    pub mixed_precision: bool,
    tok_emb: usize,
    layers: Vec<LayerIdx>,
    final_norm: usize,
    head: usize,
    rope_cos: Vec<F>,
    rope_sin: Vec<F>,
}

struct LayerCache<F> {
    x: Vec<F>,
    rstd1: Vec<F>,
    n1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    o: Vec<F>,
    x_mid: Vec<F>,
    rstd2: Vec<F>,
    n2: Vec<F>,
    a: Vec<F>,
    gate: Vec<F>,
    s: Vec<F>,
}

struct Activations<F> {
    batch: usize,
    len: usize,
    tokens: Vec<u32>,
    layers: Vec<LayerCache<F>>,
    xf: Vec<F>,
    rstdf: Vec<F>,
    nf: Vec<F>,
    logits: Vec<F>,
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Truncated normal at two standard deviations, sampled in f64.
fn trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> impl FnMut() -> F + '_ {
    let normal = Normal::new(0.0, std).expect("positive std");
    move || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return F::of(x);
        }
    }
}

pub fn build_transformer<F: Scalar>(config: &TransformerConfig, head_mode: HeadMode, seed: u64) -> Result<Transformer<F>> {
    let mut config = config.clone();
    if let HeadMode::ClassHead { n_classes } = head_mode {
        config.n_classes = n_classes;
    }
    config.validate()?;
    let d = config.hidden_dim;
    let f = config.ffn_dim();
    let std = config.init_std;
    let mut rng = init_rng(seed, 0);
    let mut p = ParamStore::new();
    let one = || F::one();
    let tok_emb = p.push("tok_emb", &[config.vocab_size, d], trunc_normal(&mut rng, std));
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(LayerIdx {
            attn_norm: p.push(format!("layers.{l}.attn_norm"), &[d], one),
            wq: p.push(format!("layers.{l}.wq"), &[d, d], trunc_normal(&mut rng, std)),
            wk: p.push(format!("layers.{l}.wk"), &[d, d], trunc_normal(&mut rng, std)),
            wv: p.push(format!("layers.{l}.wv"), &[d, d], trunc_normal(&mut rng, std)),
            wo: p.push(format!("layers.{l}.wo"), &[d, d], trunc_normal(&mut rng, std)),
            mlp_norm: p.push(format!("layers.{l}.mlp_norm"), &[d], one),
            w1: p.push(format!("layers.{l}.w1"), &[d, f], trunc_normal(&mut rng, std)),
            w3: p.push(format!("layers.{l}.w3"), &[d, f], trunc_normal(&mut rng, std)),
            w2: p.push(format!("layers.{l}.w2"), &[f, d], trunc_normal(&mut rng, std)),
        });
    }
    let final_norm = p.push("final_norm", &[d], one);
    let out = head_width(&config, head_mode);
    let head = p.push(head_name(head_mode), &[d, out], trunc_normal(&mut rng, std));
    let (rope_cos, rope_sin) = rope_tables(&config);
    Ok(Transformer {
        config,
        head_mode,
        seed,
        params: p,
        mixed_precision: false,
        tok_emb,
        layers,
        final_norm,
        head,
        rope_cos,
        rope_sin,
    })
}

fn head_width(config: &TransformerConfig, mode: HeadMode) -> usize {
    match mode {
        HeadMode::LmHead => config.vocab_size,
        HeadMode::ClassHead { n_classes } => n_classes,
    }
}

fn head_name(mode: HeadMode) -> &'static str {
    match mode {
        HeadMode::LmHead => "lm_head",
        HeadMode::ClassHead { .. } => "class_head",
    }
}

fn rope_tables<F: Scalar>(config: &TransformerConfig) -> (Vec<F>, Vec<F>) {
    let Positional::Rotary { base } = config.positional;
    let half = config.head_dim() / 2;
    let mut cos = Vec::with_capacity(config.context_length * half);
    let mut sin = Vec::with_capacity(config.context_length * half);
    for pos in 0..config.context_length {
        for i in 0..half {
            let freq = base.powf(-(2.0 * i as f64) / config.head_dim() as f64);
            let ang = pos as f64 * freq;
            cos.push(F::of(ang.cos()));
            sin.push(F::of(ang.sin()));
        }
    }
    (cos, sin)
}

fn rmsnorm<F: Scalar>(x: &[F], g: &[F], eps: F, out: &mut [F], rstd: &mut [F]) {
    let d = g.len();
    for (r, (xr, yr)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let ms = xr.iter().map(|&v| v * v).sum::<F>() / F::of(d as f64);
        let s = F::one() / (ms + eps).sqrt();
        rstd[r] = s;
        for i in 0..d {
            yr[i] = xr[i] * s * g[i];
        }
    }
}

/// Accumulates the gain gradient into `dg` and adds the input gradient to `dx`.
fn rmsnorm_backward<F: Scalar>(x: &[F], rstd: &[F], g: &[F], dy: &[F], dg: Option<&mut [F]>, dx: &mut [F]) {
    let d = g.len();
    let mut dg = dg;
    for r in 0..rstd.len() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let s = rstd[r];
        let mut dot = F::zero();
        for i in 0..d {
            let xhat = xr[i] * s;
            let dxhat = dyr[i] * g[i];
            dot += dxhat * xhat;
            if let Some(dg) = dg.as_deref_mut() {
                dg[i] += dyr[i] * xhat;
            }
        }
        let mean = dot / F::of(d as f64);
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = xr[i] * s;
            dxr[i] += s * (dyr[i] * g[i] - xhat * mean);
        }
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `out = x · w` for row-major `x: rows × w_rows`.
fn linear<F: Scalar>(x: &[F], w: &[F], rows: usize, w_rows: usize, w_cols: usize, out: &mut [F]) {
    gemm(
        F::one(),
        MatRef::new(x, rows, w_rows),
        MatRef::new(w, w_rows, w_cols),
        F::zero(),
        MatMut::new(out, rows, w_cols),
    );
}

/// `dx (+)= dy · wᵀ` and `dw += xᵀ · dy`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    rows: usize,
    w_rows: usize,
    w_cols: usize,
    dw: Option<&mut [F]>,
    dx: Option<&mut [F]>,
    accumulate_dx: bool,
) {
    if let Some(dw) = dw {
        gemm(
            F::one(),
            MatRef::new(x, rows, w_rows).t(),
            MatRef::new(dy, rows, w_cols),
            F::one(),
            MatMut::new(dw, w_rows, w_cols),
        );
    }
    if let Some(dx) = dx {
        let beta = if accumulate_dx { F::one() } else { F::zero() };
        gemm(
            F::one(),
            MatRef::new(dy, rows, w_cols),
            MatRef::new(w, w_rows, w_cols).t(),
            beta,
            MatMut::new(dx, rows, w_rows),
        );
    }
}

/// Softmax cross-entropy averaged over rows; returns the loss and writes
/// the gradient w.r.t. logits (already divided by the row count).
pub(crate) fn softmax_xent<F: Scalar>(logits: &[F], width: usize, targets: &[u32], dlogits: Option<&mut [F]>) -> F {
    let n = targets.len();
    let inv_n = F::one() / F::of(n as f64);
    let mut total = F::zero();
    let mut dl = dlogits;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * width..(r + 1) * width];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let z: F = row.iter().map(|&v| (v - max).exp()).sum();
        let lz = z.ln() + max;
        total += lz - row[t as usize];
        if let Some(dl) = dl.as_deref_mut() {
            let out = &mut dl[r * width..(r + 1) * width];
            for i in 0..width {
                out[i] = (row[i] - lz).exp() * inv_n;
            }
            out[t as usize] -= inv_n;
        }
    }
    total * inv_n
}

fn round_all<F: Scalar>(buf: &mut [F]) {
    for v in buf {
        *v = v.round_bf16();
    }
}

impl<F: Scalar> Transformer<F> {
    pub fn out_width(&self) -> usize {
        head_width(&self.config, self.head_mode)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Flat range of the output head inside [`ParamStore::data`].
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.params.tensors[self.head].range()
    }

    /// Flat range of every parameter except the head.
    pub fn body_range(&self) -> std::ops::Range<usize> {
        0..self.params.tensors[self.head].offset
    }

    pub fn body_checksum(&self) -> u64 {
        self.params.range_checksum(self.body_range())
    }

    pub fn checksum(&self) -> u64 {
        self.params.range_checksum(0..self.params.len())
    }

    pub fn cast<G: Scalar>(&self) -> Transformer<G> {
        let (rope_cos, rope_sin) = rope_tables(&self.config);
        Transformer {
            config: self.config.clone(),
            head_mode: self.head_mode,
            seed: self.seed,
            params: self.params.cast(),
            mixed_precision: self.mixed_precision,
            tok_emb: self.tok_emb,
            layers: self.layers.clone(),
            final_norm: self.final_norm,
            head: self.head,
            rope_cos,
            rope_sin,
        }
    }

    /// Rebuild from a parameter store laid out by [`build_transformer`].
    pub fn from_params(config: &TransformerConfig, head_mode: HeadMode, seed: u64, params: ParamStore<F>) -> Result<Self> {
        let mut model: Transformer<F> = build_shell(config, head_mode, seed)?;
        if model.params.tensors != params.tensors {
            return Err(Error::Shape("checkpoint tensors do not match the configuration".into()));
        }
        model.params = params;
        Ok(model)
    }

    /// Swap the language-model head for a freshly initialized class head.
    /// Body parameters are kept bit for bit.
    pub fn replace_head(mut self, n_classes: usize) -> Result<Self> {
        if !self.head_mode.is_lm() {
            return Err(Error::InvalidArgument("model already has a class head".into()));
        }
        if n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be at least 2, got {n_classes}")));
        }
        self.params.pop();
        self.head_mode = HeadMode::ClassHead { n_classes };
        self.config.n_classes = n_classes;
        let d = self.config.hidden_dim;
        let mut rng = init_rng(self.seed, 1);
        self.head = self.params.push(
            head_name(self.head_mode),
            &[d, n_classes],
            trunc_normal(&mut rng, self.config.init_std),
        );
        Ok(self)
    }

    fn check_tokens(&self, tokens: &[u32], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Shape(format!("{} tokens do not split into {batch} rows", tokens.len())));
        }
        let len = tokens.len() / batch;
        if len > self.config.context_length {
            return Err(Error::InvalidArgument(format!(
                "input of length {len} exceeds the context length {}",
                self.config.context_length
            )));
        }
        let v = self.config.vocab_size as u32;
        if let Some(&id) = tokens.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id, vocab_size: v });
        }
        Ok(len)
    }

    fn rope_rows(&self, buf: &mut [F], batch: usize, len: usize, inverse: bool) {
        let d = self.config.hidden_dim;
        let hd = self.config.head_dim();
        let half = hd / 2;
        for b in 0..batch {
            for t in 0..len {
                let row = &mut buf[(b * len + t) * d..(b * len + t + 1) * d];
                let cos = &self.rope_cos[t * half..(t + 1) * half];
                let sin = &self.rope_sin[t * half..(t + 1) * half];
                for h in row.chunks_exact_mut(hd) {
                    for i in 0..half {
                        let (x1, x2) = (h[i], h[i + half]);
                        let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                        h[i] = x1 * c - x2 * s;
                        h[i + half] = x1 * s + x2 * c;
                    }
                }
            }
        }
    }

    fn forward_layer(&self, li: &LayerIdx, x: Vec<F>, batch: usize, len: usize) -> LayerCache<F> {
        let c = &self.config;
        let (d, f, nh, hd) = (c.hidden_dim, c.ffn_dim(), c.n_heads, c.head_dim());
        let rows = batch * len;
        let p = &self.params;
        let eps = F::of(c.norm_eps);
        let mut rstd1 = vec![F::zero(); rows];
        let mut n1 = vec![F::zero(); rows * d];
        rmsnorm(&x, p.get(li.attn_norm), eps, &mut n1, &mut rstd1);
        if self.mixed_precision {
            round_all(&mut n1);
        }
        let mut q = vec![F::zero(); rows * d];
        let mut k = vec![F::zero(); rows * d];
        let mut v = vec![F::zero(); rows * d];
        linear(&n1, p.get(li.wq), rows, d, d, &mut q);
        linear(&n1, p.get(li.wk), rows, d, d, &mut k);
        linear(&n1, p.get(li.wv), rows, d, d, &mut v);
        self.rope_rows(&mut q, batch, len, false);
        self.rope_rows(&mut k, batch, len, false);

        let scale = F::one() / F::of(hd as f64).sqrt();
        let mut probs = vec![F::zero(); batch * nh * len * len];
        let mut o = vec![F::zero(); rows * d];
        for b in 0..batch {
            let r0 = b * len * d;
            let (qb, kb, vb) = (&q[r0..r0 + len * d], &k[r0..r0 + len * d], &v[r0..r0 + len * d]);
            let ob = &mut o[r0..r0 + len * d];
            for h in 0..nh {
                let pbh = &mut probs[(b * nh + h) * len * len..(b * nh + h + 1) * len * len];
                gemm(
                    scale,
                    MatRef::block(qb, len, hd, d, h * hd),
                    MatRef::block(kb, len, hd, d, h * hd).t(),
                    F::zero(),
                    MatMut::new(pbh, len, len),
                );
                for i in 0..len {
                    let row = &mut pbh[i * len..(i + 1) * len];
                    let max = row[..=i].iter().copied().fold(F::neg_infinity(), F::max);
                    let mut z = F::zero();
                    for e in row[..=i].iter_mut() {
                        *e = (*e - max).exp();
                        z += *e;
                    }
                    for e in row[..=i].iter_mut() {
                        *e /= z;
                    }
                    for e in row[i + 1..].iter_mut() {
                        *e = F::zero();
                    }
                }
                gemm(
                    F::one(),
                    MatRef::new(pbh, len, len),
                    MatRef::block(vb, len, hd, d, h * hd),
                    F::zero(),
                    MatMut::block(ob, len, hd, d, h * hd),
                );
            }
        }
        if self.mixed_precision {
            round_all(&mut o);
        }
        let mut x_mid = vec![F::zero(); rows * d];
        linear(&o, p.get(li.wo), rows, d, d, &mut x_mid);
        for (m, &xi) in x_mid.iter_mut().zip(&x) {
            *m += xi;
        }

        let mut rstd2 = vec![F::zero(); rows];
        let mut n2 = vec![F::zero(); rows * d];
        rmsnorm(&x_mid, p.get(li.mlp_norm), eps, &mut n2, &mut rstd2);
        if self.mixed_precision {
            round_all(&mut n2);
        }
        let mut a = vec![F::zero(); rows * f];
        let mut gate = vec![F::zero(); rows * f];
        linear(&n2, p.get(li.w1), rows, d, f, &mut a);
        linear(&n2, p.get(li.w3), rows, d, f, &mut gate);
        let mut s: Vec<F> = a.iter().zip(&gate).map(|(&ai, &gi)| ai * sigmoid(ai) * gi).collect();
        if self.mixed_precision {
            round_all(&mut s);
        }
        LayerCache {
            x,
            rstd1,
            n1,
            q,
            k,
            v,
            probs,
            o,
            x_mid,
            rstd2,
            n2,
            a,
            gate,
            s,
        }
    }

    fn layer_output(&self, li: &LayerIdx, cache: &LayerCache<F>, rows: usize) -> Vec<F> {
        let (d, f) = (self.config.hidden_dim, self.config.ffn_dim());
        let mut out = vec![F::zero(); rows * d];
        linear(&cache.s, self.params.get(li.w2), rows, f, d, &mut out);
        for (o, &m) in out.iter_mut().zip(&cache.x_mid) {
            *o += m;
        }
        out
    }

    fn forward(&self, tokens: &[u32], batch: usize, keep: bool) -> Result<Activations<F>> {
        let len = self.check_tokens(tokens, batch)?;
        let c = &self.config;
        let d = c.hidden_dim;
        let rows = batch * len;
        let emb = self.params.get(self.tok_emb);
        let mut x = Vec::with_capacity(rows * d);
        for &t in tokens {
            x.extend_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
        }
        let mut layers = Vec::with_capacity(if keep { c.n_layers } else { 0 });
        for li in &self.layers {
            let cache = self.forward_layer(li, x, batch, len);
            x = self.layer_output(li, &cache, rows);
            if keep {
                layers.push(cache);
            }
        }
        let mut rstdf = vec![F::zero(); rows];
        let mut nf = vec![F::zero(); rows * d];
        rmsnorm(&x, self.params.get(self.final_norm), F::of(c.norm_eps), &mut nf, &mut rstdf);
        if self.mixed_precision {
            round_all(&mut nf);
        }
        let w = self.out_width();
        let mut logits = vec![F::zero(); rows * w];
        linear(&nf, self.params.get(self.head), rows, d, w, &mut logits);
        Ok(Activations {
            batch,
            len,
            tokens: tokens.to_vec(),
            layers,
            xf: x,
            rstdf,
            nf,
            logits,
        })
    }

    /// Per-position logits (`len × out_width`, row-major) for one sequence.
    pub fn logits(&self, tokens: &[u32]) -> Result<Vec<F>> {
        Ok(self.forward(tokens, 1, false)?.logits)
    }

    /// Per-position logits for `batch` rows of equal length.
    pub fn logits_batch(&self, tokens: &[u32], batch: usize) -> Result<Vec<F>> {
        Ok(self.forward(tokens, batch, false)?.logits)
    }

    fn check_targets(&self, tokens: &[u32], targets: &[u32]) -> Result<()> {
        if targets.len() != tokens.len() {
            return Err(Error::Shape(format!(
                "{} targets for {} inputs",
                targets.len(),
                tokens.len()
            )));
        }
        let w = self.out_width() as u32;
        if let Some(&t) = targets.iter().find(|&&t| t >= w) {
            return Err(Error::InvalidArgument(format!("target {t} outside the head width {w}")));
        }
        Ok(())
    }

    /// Mean per-position cross-entropy.
    pub fn loss(&self, tokens: &[u32], targets: &[u32], batch: usize) -> Result<F> {
        self.check_targets(tokens, targets)?;
        let act = self.forward(tokens, batch, false)?;
        Ok(softmax_xent(&act.logits, self.out_width(), targets, None))
    }

    /// Mean per-position cross-entropy; adds its gradient into `grad`
    /// (same layout as the parameters).
    pub fn loss_and_grad(&self, tokens: &[u32], targets: &[u32], batch: usize, grad: &mut [F], scope: GradScope) -> Result<F> {
        self.check_targets(tokens, targets)?;
        if grad.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        let act = self.forward(tokens, batch, scope == GradScope::Full)?;
        let w = self.out_width();
        let mut dlogits = vec![F::zero(); act.logits.len()];
        let loss = softmax_xent(&act.logits, w, targets, Some(&mut dlogits));
        self.backward(&act, &dlogits, grad, scope);
        Ok(loss)
    }

    fn backward(&self, act: &Activations<F>, dlogits: &[F], grad: &mut [F], scope: GradScope) {
        let c = &self.config;
        let (d, f, nh, hd) = (c.hidden_dim, c.ffn_dim(), c.n_heads, c.head_dim());
        let (batch, len) = (act.batch, act.len);
        let rows = batch * len;
        let p = &self.params;
        let tens = &p.tensors;
        let w = self.out_width();
        macro_rules! gslice {
            ($idx:expr) => {
                &mut grad[tens[$idx].range()]
            };
        }

        let mut dx = vec![F::zero(); rows * d];
        linear_backward(
            &act.nf,
            p.get(self.head),
            dlogits,
            rows,
            d,
            w,
            Some(gslice!(self.head)),
            if scope == GradScope::Full { Some(&mut dx[..]) } else { None },
            false,
        );
        if scope == GradScope::HeadOnly {
            return;
        }
        let dnf = std::mem::take(&mut dx);
        let mut dx = vec![F::zero(); rows * d];
        rmsnorm_backward(
            &act.xf,
            &act.rstdf,
            p.get(self.final_norm),
            &dnf,
            Some(gslice!(self.final_norm)),
            &mut dx,
        );

        let scale = F::one() / F::of(hd as f64).sqrt();
        let mut ds = vec![F::zero(); rows * f];
        let mut dn = vec![F::zero(); rows * d];
        let mut dpt = vec![F::zero(); len * len];
        for (li, cache) in self.layers.iter().zip(&act.layers).rev() {
            // MLP: x_out = x_mid + (silu(a) * gate) · w2
            linear_backward(&cache.s, p.get(li.w2), &dx, rows, f, d, Some(gslice!(li.w2)), Some(&mut ds[..]), false);
            let mut da = vec![F::zero(); rows * f];
            let mut dgate = vec![F::zero(); rows * f];
            for i in 0..rows * f {
                let (ai, gi) = (cache.a[i], cache.gate[i]);
                let sg = sigmoid(ai);
                let silu = ai * sg;
                dgate[i] = ds[i] * silu;
                da[i] = ds[i] * gi * sg * (F::one() + ai * (F::one() - sg));
            }
            linear_backward(&cache.n2, p.get(li.w1), &da, rows, d, f, Some(gslice!(li.w1)), Some(&mut dn[..]), false);
            linear_backward(&cache.n2, p.get(li.w3), &dgate, rows, d, f, Some(gslice!(li.w3)), Some(&mut dn[..]), true);
            // dx currently holds d(x_out) = d(x_mid) through the residual
            rmsnorm_backward(
                &cache.x_mid,
                &cache.rstd2,
                p.get(li.mlp_norm),
                &dn,
                Some(gslice!(li.mlp_norm)),
                &mut dx,
            );

            // attention: x_mid = x + o · wo
            let mut dout = vec![F::zero(); rows * d];
            linear_backward(&cache.o, p.get(li.wo), &dx, rows, d, d, Some(gslice!(li.wo)), Some(&mut dout[..]), false);
            let mut dq = vec![F::zero(); rows * d];
            let mut dk = vec![F::zero(); rows * d];
            let mut dv = vec![F::zero(); rows * d];
            for b in 0..batch {
                let r = b * len * d..(b + 1) * len * d;
                let (qb, kb, vb) = (&cache.q[r.clone()], &cache.k[r.clone()], &cache.v[r.clone()]);
                let dob = &dout[r.clone()];
                for h in 0..nh {
                    let pbh = &cache.probs[(b * nh + h) * len * len..(b * nh + h + 1) * len * len];
                    // dP = dO · Vᵀ
                    gemm(
                        F::one(),
                        MatRef::block(dob, len, hd, d, h * hd),
                        MatRef::block(vb, len, hd, d, h * hd).t(),
                        F::zero(),
                        MatMut::new(&mut dpt, len, len),
                    );
                    // dV += Pᵀ · dO
                    gemm(
                        F::one(),
                        MatRef::new(pbh, len, len).t(),
                        MatRef::block(dob, len, hd, d, h * hd),
                        F::one(),
                        MatMut::block(&mut dv[r.clone()], len, hd, d, h * hd),
                    );
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), zero above the diagonal
                    for i in 0..len {
                        let prow = &pbh[i * len..(i + 1) * len];
                        let drow = &mut dpt[i * len..(i + 1) * len];
                        let dot: F = (0..=i).map(|j| drow[j] * prow[j]).sum();
                        for j in 0..len {
                            drow[j] = if j <= i { prow[j] * (drow[j] - dot) } else { F::zero() };
                        }
                    }
                    gemm(
                        scale,
                        MatRef::new(&dpt, len, len),
                        MatRef::block(kb, len, hd, d, h * hd),
                        F::zero(),
                        MatMut::block(&mut dq[r.clone()], len, hd, d, h * hd),
                    );
                    gemm(
                        scale,
                        MatRef::new(&dpt, len, len).t(),
                        MatRef::block(qb, len, hd, d, h * hd),
                        F::zero(),
                        MatMut::block(&mut dk[r.clone()], len, hd, d, h * hd),
                    );
                }
            }
            self.rope_rows(&mut dq, batch, len, true);
            self.rope_rows(&mut dk, batch, len, true);
            linear_backward(&cache.n1, p.get(li.wq), &dq, rows, d, d, Some(gslice!(li.wq)), Some(&mut dn[..]), false);
            linear_backward(&cache.n1, p.get(li.wk), &dk, rows, d, d, Some(gslice!(li.wk)), Some(&mut dn[..]), true);
            linear_backward(&cache.n1, p.get(li.wv), &dv, rows, d, d, Some(gslice!(li.wv)), Some(&mut dn[..]), true);
            rmsnorm_backward(
                &cache.x,
                &cache.rstd1,
                p.get(li.attn_norm),
                &dn,
                Some(gslice!(li.attn_norm)),
                &mut dx,
            );
        }
        let demb = gslice!(self.tok_emb);
        for (r, &t) in act.tokens.iter().enumerate() {
            let dst = &mut demb[t as usize * d..(t as usize + 1) * d];
            for (a, &b) in dst.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *a += b;
            }
        }
    }

    /// Start incremental decoding with a key/value cache.
    pub fn decode_state(&self) -> DecodeState<F> {
        DecodeState {
            k: vec![Vec::new(); self.config.n_layers],
            v: vec![Vec::new(); self.config.n_layers],
            pos: 0,
        }
    }

    /// Feed one token; returns the output logits at its position. Matches
    /// the last row of [`logits`](Self::logits) on the same prefix.
    pub fn decode_step(&self, state: &mut DecodeState<F>, token: u32) -> Result<Vec<F>> {
        let c = &self.config;
        if state.pos >= c.context_length {
            return Err(Error::InvalidArgument("decode position exceeds the context length".into()));
        }
        if token as usize >= c.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: c.vocab_size as u32,
            });
        }
        let (d, f, nh, hd) = (c.hidden_dim, c.ffn_dim(), c.n_heads, c.head_dim());
        let half = hd / 2;
        let pos = state.pos;
        let n_ctx = pos + 1;
        let p = &self.params;
        let eps = F::of(c.norm_eps);
        let mut x = p.get(self.tok_emb)[token as usize * d..(token as usize + 1) * d].to_vec();
        let mut n = vec![F::zero(); d];
        let mut rstd = [F::zero()];
        let scale = F::one() / F::of(hd as f64).sqrt();
        let cos = &self.rope_cos[pos * half..(pos + 1) * half];
        let sin = &self.rope_sin[pos * half..(pos + 1) * half];
        let rope = |buf: &mut [F]| {
            for h in buf.chunks_exact_mut(hd) {
                for i in 0..half {
                    let (x1, x2) = (h[i], h[i + half]);
                    h[i] = x1 * cos[i] - x2 * sin[i];
                    h[i + half] = x1 * sin[i] + x2 * cos[i];
                }
            }
        };
        for (l, li) in self.layers.iter().enumerate() {
            rmsnorm(&x, p.get(li.attn_norm), eps, &mut n, &mut rstd);
            if self.mixed_precision {
                round_all(&mut n);
            }
            let mut q = vec![F::zero(); d];
            let mut k = vec![F::zero(); d];
            let mut v = vec![F::zero(); d];
            linear(&n, p.get(li.wq), 1, d, d, &mut q);
            linear(&n, p.get(li.wk), 1, d, d, &mut k);
            linear(&n, p.get(li.wv), 1, d, d, &mut v);
            rope(&mut q);
            rope(&mut k);
            state.k[l].extend_from_slice(&k);
            state.v[l].extend_from_slice(&v);
            let (kc, vc) = (&state.k[l], &state.v[l]);
            let mut o = vec![F::zero(); d];
            let mut scores = vec![F::zero(); n_ctx];
            for h in 0..nh {
                let qh = &q[h * hd..(h + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &kc[j * d + h * hd..j * d + (h + 1) * hd];
                    *s = qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                }
                let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let oh = &mut o[h * hd..(h + 1) * hd];
                for (j, &s) in scores.iter().enumerate() {
                    let wgt = s / z;
                    let vj = &vc[j * d + h * hd..j * d + (h + 1) * hd];
                    for (a, &b) in oh.iter_mut().zip(vj) {
                        *a += wgt * b;
                    }
                }
            }
            if self.mixed_precision {
                round_all(&mut o);
            }
            let mut attn = vec![F::zero(); d];
            linear(&o, p.get(li.wo), 1, d, d, &mut attn);
            for (a, &b) in x.iter_mut().zip(&attn) {
                *a += b;
            }
            rmsnorm(&x, p.get(li.mlp_norm), eps, &mut n, &mut rstd);
            if self.mixed_precision {
                round_all(&mut n);
            }
            let mut a = vec![F::zero(); f];
            let mut gate = vec![F::zero(); f];
            linear(&n, p.get(li.w1), 1, d, f, &mut a);
            linear(&n, p.get(li.w3), 1, d, f, &mut gate);
            let mut s: Vec<F> = a.iter().zip(&gate).map(|(&ai, &gi)| ai * sigmoid(ai) * gi).collect();
            if self.mixed_precision {
                round_all(&mut s);
            }
            let mut m = vec![F::zero(); d];
            linear(&s, p.get(li.w2), 1, f, d, &mut m);
            for (a, &b) in x.iter_mut().zip(&m) {
                *a += b;
            }
        }
        rmsnorm(&x, p.get(self.final_norm), eps, &mut n, &mut rstd);
        if self.mixed_precision {
            round_all(&mut n);
        }
        let w = self.out_width();
        let mut logits = vec![F::zero(); w];
        linear(&n, p.get(self.head), 1, d, w, &mut logits);
        state.pos += 1;
        Ok(logits)
    }
}

/// Model with the right tensor table and rope tables; parameter values are
/// zeros until replaced.
fn build_shell<F: Scalar>(config: &TransformerConfig, head_mode: HeadMode, seed: u64) -> Result<Transformer<F>> {
    let mut cfg = config.clone();
    if let HeadMode::ClassHead { n_classes } = head_mode {
        cfg.n_classes = n_classes;
    }
    cfg.validate()?;
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim();
    let mut p = ParamStore::new();
    let z = || F::zero();
    let tok_emb = p.push("tok_emb", &[cfg.vocab_size, d], z);
    let layers = (0..cfg.n_layers)
        .map(|l| LayerIdx {
            attn_norm: p.push(format!("layers.{l}.attn_norm"), &[d], z),
            wq: p.push(format!("layers.{l}.wq"), &[d, d], z),
            wk: p.push(format!("layers.{l}.wk"), &[d, d], z),
            wv: p.push(format!("layers.{l}.wv"), &[d, d], z),
            wo: p.push(format!("layers.{l}.wo"), &[d, d], z),
            mlp_norm: p.push(format!("layers.{l}.mlp_norm"), &[d], z),
            w1: p.push(format!("layers.{l}.w1"), &[d, f], z),
            w3: p.push(format!("layers.{l}.w3"), &[d, f], z),
            w2: p.push(format!("layers.{l}.w2"), &[f, d], z),
        })
        .collect();
    let final_norm = p.push("final_norm", &[d], z);
    let head = p.push(head_name(head_mode), &[d, head_width(&cfg, head_mode)], z);
    let (rope_cos, rope_sin) = rope_tables(&cfg);
    Ok(Transformer {
        config: cfg,
        head_mode,
        seed,
        params: p,
        mixed_precision: false,
        tok_emb,
        layers,
        final_norm,
        head,
        rope_cos,
        rope_sin,
    })
}

#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    k: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    pos: usize,
}

impl<F> DecodeState<F> {
    pub fn position(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            hidden_dim: 16,
            n_heads: 2,
            n_layers: 2,
            context_length: 12,
            vocab_size: 20,
            ffn_multiple_of: 4,
            ..TransformerConfig::preset("tiny").unwrap()
        }
    }

    #[test]
    fn causal_logits() {
        let m: Transformer<f64> = build_transformer(&tiny_cfg(), HeadMode::ClassHead { n_classes: 3 }, 1).unwrap();
        let a = vec![1u32, 5, 7, 3, 9, 2];
        let mut b = a.clone();
        b[3] = 11;
        let la = m.logits(&a).unwrap();
        let lb = m.logits(&b).unwrap();
        assert_eq!(&la[..3 * 3], &lb[..3 * 3]);
        assert_ne!(&la[3 * 3..], &lb[3 * 3..]);
    }

    #[test]
    fn overlong_input_rejected() {
        let m: Transformer<f32> = build_transformer(&tiny_cfg(), HeadMode::LmHead, 1).unwrap();
        assert!(m.logits(&[1; 13]).is_err());
        assert!(m.logits(&[25]).is_err());
    }

    #[test]
    fn kv_decode_matches_full_forward() {
        let m: Transformer<f64> = build_transformer(&tiny_cfg(), HeadMode::LmHead, 4).unwrap();
        let toks = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let full = m.logits(&toks).unwrap();
        let mut st = m.decode_state();
        let w = m.out_width();
        for (i, &t) in toks.iter().enumerate() {
            let step = m.decode_step(&mut st, t).unwrap();
            for j in 0..w {
                assert!((step[j] - full[i * w + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn batch_rows_independent() {
        let m: Transformer<f64> = build_transformer(&tiny_cfg(), HeadMode::ClassHead { n_classes: 2 }, 2).unwrap();
        let r1 = [1u32, 2, 3, 4];
        let r2 = [5u32, 6, 7, 8];
        let both: Vec<u32> = r1.iter().chain(&r2).copied().collect();
        let lb = m.logits_batch(&both, 2).unwrap();
        let l1 = m.logits(&r1).unwrap();
        let l2 = m.logits(&r2).unwrap();
        for (x, y) in lb.iter().zip(l1.iter().chain(&l2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn replace_head_keeps_body() {
        let m: Transformer<f32> = build_transformer(&tiny_cfg(), HeadMode::LmHead, 3).unwrap();
        let body = m.body_checksum();
        let c = m.replace_head(3).unwrap();
        assert_eq!(c.body_checksum(), body);
        assert_eq!(c.out_width(), 3);
        assert_eq!(c.logits(&[1, 2, 3]).unwrap().len(), 9);
        assert!(c.replace_head(4).is_err());
    }

    #[test]
    fn head_only_scope_touches_only_head() {
        let m: Transformer<f64> = build_transformer(&tiny_cfg(), HeadMode::ClassHead { n_classes: 3 }, 5).unwrap();
        let mut g = vec![0.0; m.n_params()];
        m.loss_and_grad(&[1, 2, 3], &[0, 0, 0], 1, &mut g, GradScope::HeadOnly).unwrap();
        assert!(g[m.body_range()].iter().all(|&x| x == 0.0));
        assert!(g[m.head_range()].iter().any(|&x| x != 0.0));
    }
}
