//! Position-wise layers and multi-head attention with explicit backward passes.
//!
//! Every layer works on one sequence at a time: inputs are `rows x features`
//! matrices. `forward` returns the output plus a cache; `backward` consumes
//! the cache and the output gradient, accumulates parameter gradients and
//! returns the input gradient.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{glorot_uniform, Grads, ParamId, ParamStore};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Forward-pass mode. Dropout is active only in `Training`.
pub enum Mode<'a> {
    Inference,
    Training(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    /// Inverted-dropout multiplier mask, or `None` when dropout is off.
    fn dropout_mask(&mut self, rate: f64, shape: (usize, usize)) -> Option<Array2<f64>> {
        match self {
            Mode::Training(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                Some(Array2::from_shape_simple_fn(shape, || {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }))
            }
            _ => None,
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Training(_))
    }
}

/// Applies dropout, returning the output and the mask used.
pub(crate) fn dropout(x: Array2<f64>, rate: f64, mode: &mut Mode) -> (Array2<f64>, Option<Array2<f64>>) {
    match mode.dropout_mask(rate, x.dim()) {
        Some(mask) => (&x * &mask, Some(mask)),
        None => (x, None),
    }
}

pub(crate) fn dropout_backward(dy: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy,
    }
}

pub(crate) fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the activation output.
pub(crate) fn relu_backward(dy: Array2<f64>, activated: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy;
    dx.zip_mut_with(activated, |d, &a| {
        if a <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.kernel"), glorot_uniform(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self { w, b }
    }

    pub fn forward(&self, p: &ParamStore, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(p.get(self.w)) + p.get(self.b)
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: &ArrayView2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        g.add_to(self.w, &x.t().dot(dy));
        g.add_to(self.b, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
        dy.dot(&p.get(self.w).t())
    }

    pub fn num_scalars(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

/// Feature-wise standardization with trainable scale and offset.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub(crate) struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward(&self, p: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in normalized.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let y = &normalized * p.get(self.gamma) + p.get(self.beta);
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let xhat = &cache.normalized;
        g.add_to(self.gamma, &(dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
        g.add_to(self.beta, &dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let dxhat = dy * p.get(self.gamma);
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let dh = dxhat.row(i);
            let xh = xhat.row(i);
            let mean_dh = dh.sum() / d;
            let mean_dh_xh = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            let inv = cache.inv_std[i];
            for j in 0..row.len() {
                row[j] = inv * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
            }
        }
        dx
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/output
/// projections. Each head works on `embed_dim / heads` columns.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub dropout: f64,
}

pub(crate) struct AttentionCache {
    queries_in: Array2<f64>,
    keys_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per head (before dropout).
    weights: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    context: Array2<f64>,
}

impl AttentionCache {
    pub fn weights(&self) -> Array3<f64> {
        let (n, m) = self.weights[0].dim();
        let mut out = Array3::zeros((self.weights.len(), n, m));
        for (h, w) in self.weights.iter().enumerate() {
            out.index_axis_mut(Axis(0), h).assign(w);
        }
        out
    }
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        embed_dim: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        Self {
            query: Dense::new(store, rng, &format!("{name}.query"), embed_dim, embed_dim),
            key: Dense::new(store, rng, &format!("{name}.key"), embed_dim, embed_dim),
            value: Dense::new(store, rng, &format!("{name}.value"), embed_dim, embed_dim),
            output: Dense::new(store, rng, &format!("{name}.output"), embed_dim, embed_dim),
            heads,
            dropout,
        }
    }

    pub fn num_scalars(embed_dim: usize) -> usize {
        4 * Dense::num_scalars(embed_dim, embed_dim)
    }

    /// `allowed[(i, j)]` says whether query `i` may attend to key `j`;
    /// `None` allows everything. Disallowed weights are exactly zero.
    pub fn forward(
        &self,
        p: &ParamStore,
        queries_in: &Array2<f64>,
        keys_in: &Array2<f64>,
        allowed: Option<&Array2<bool>>,
        mode: &mut Mode,
    ) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(p, &queries_in.view());
        let k = self.key.forward(p, &keys_in.view());
        let v = self.value.forward(p, &keys_in.view());
        let dim = q.ncols();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut context = Array2::zeros((q.nrows(), dim));
        let mut weights = Vec::with_capacity(self.heads);
        let mut masks = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let w = masked_softmax(scores, allowed);
            let (dropped, mask) = dropout(w.clone(), self.dropout, mode);
            context.slice_mut(cols).assign(&dropped.dot(&v.slice(cols)));
            weights.push(w);
            masks.push(mask);
        }
        let out = self.output.forward(p, &context.view());
        let cache = AttentionCache {
            queries_in: queries_in.clone(),
            keys_in: keys_in.clone(),
            q,
            k,
            v,
            weights,
            masks,
            context,
        };
        (out, cache)
    }

    /// Returns gradients with respect to the query input and the key/value input.
    pub fn backward(
        &self,
        p: &ParamStore,
        g: &mut Grads,
        cache: &AttentionCache,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let dcontext = self.output.backward(p, g, &cache.context.view(), dy);
        let dim = cache.q.ncols();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let w = &cache.weights[h];
            let dropped = match &cache.masks[h] {
                Some(m) => w * m,
                None => w.clone(),
            };
            let dctx_h = dcontext.slice(cols);
            dv.slice_mut(cols).assign(&dropped.t().dot(&dctx_h));
            let dw = dropout_backward(dctx_h.dot(&cache.v.slice(cols).t()), &cache.masks[h]);
            // Softmax backward: dS = W * (dW - rowsum(dW * W)).
            let mut dscores = dw;
            for (mut drow, wrow) in dscores.rows_mut().into_iter().zip(w.rows()) {
                let dot: f64 = drow.iter().zip(wrow.iter()).map(|(a, b)| a * b).sum();
                drow.zip_mut_with(&wrow, |d, &wv| *d = wv * (*d - dot) * scale);
            }
            dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
        }
        let dqueries = self.query.backward(p, g, &cache.queries_in.view(), &dq);
        let dkeys = self.key.backward(p, g, &cache.keys_in.view(), &dk)
            + self.value.backward(p, g, &cache.keys_in.view(), &dv);
        (dqueries, dkeys)
    }
}

/// Row-wise softmax over allowed entries; disallowed entries get weight 0.
pub(crate) fn masked_softmax(mut scores: Array2<f64>, allowed: Option<&Array2<bool>>) -> Array2<f64> {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let ok = |j: usize| allowed.map_or(true, |a| a[(i, j)]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| ok(*j))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if ok(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        }
    }
    scores
}

/// Row-wise softmax.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    masked_softmax(logits.clone(), None)
}
