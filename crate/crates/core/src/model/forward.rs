//! Training pass over one positioned example, its reverse pass, and the
//! blank-infilling loss.

use rand::Rng as _;

use super::ops::{
    attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    log_sum_exp, NormCache, View,
};
use super::params::{ModelParams, ParamClass, Role, Trainable};
use super::scalar::{matmul, Op, Scalar};
use crate::error::{Error, Result};
use crate::positions::PositionedExample;
use crate::seed::Rng;
use crate::vocab::TokenId;

/// Keys visible to row `i` form the prefix `0..visible_prefix(i, part_a_len)`.
pub fn visible_prefix(i: usize, part_a_len: usize) -> usize {
    if i < part_a_len {
        part_a_len
    } else {
        i + 1
    }
}

struct LayerCache<T> {
    ln1: NormCache<T>,
    h1: Vec<T>,
    qkv_t: Option<Vec<T>>,
    qkv: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    dense_t: Option<Vec<T>>,
    drop1: Option<Vec<T>>,
    ln2: NormCache<T>,
    h2: Vec<T>,
    up_t: Option<Vec<T>>,
    u: Vec<T>,
    g: Vec<T>,
    down_t: Option<Vec<T>>,
    drop2: Option<Vec<T>>,
}

/// Activations of one forward pass, kept for the reverse pass.
pub struct Forward<T> {
    n: usize,
    part_a_len: usize,
    layers: Vec<LayerCache<T>>,
    final_ln: NormCache<T>,
    /// Final normalized hidden states, `n x d`.
    pub hidden: Vec<T>,
}

fn dropout_mask<T: Scalar>(len: usize, p: f64, rng: &mut Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect()
}

/// Token + inter + intra embedding rows.
pub(crate) fn embed<T: Scalar>(params: &ModelParams<T>, tokens: &[TokenId], inter: &[u32], intra: &[u32]) -> Result<Vec<T>> {
    let d = params.config.d_model;
    let mut x = Vec::with_capacity(tokens.len() * d);
    for i in 0..tokens.len() {
        params.check_token(tokens[i])?;
        params.check_positions(inter[i], intra[i])?;
        let (e, a, b) = (
            params.word_embeddings.row(tokens[i] as usize),
            params.inter_embeddings.row(inter[i] as usize),
            params.intra_embeddings.row(intra[i] as usize),
        );
        x.extend((0..d).map(|k| e[k] + a[k] + b[k]));
    }
    Ok(x)
}

fn check_example(params: &ModelParams<impl Scalar>, ex: &PositionedExample) -> Result<()> {
    let n = ex.len();
    if ex.inter.len() != n || ex.intra.len() != n || ex.targets.len() != n || ex.part_a_len > n {
        return Err(Error::Shape(format!("example {} has inconsistent lengths", ex.doc_id)));
    }
    if n > params.config.max_len {
        return Err(Error::SequenceTooLong {
            doc_id: ex.doc_id.clone(),
            len: n,
            max_len: params.config.max_len,
        });
    }
    Ok(())
}

/// Runs the stack over `ex`. Dropout applies only when `rng` is given and the
/// configured rate is positive.
pub fn forward<T: Scalar>(params: &ModelParams<T>, ex: &PositionedExample, mut rng: Option<&mut Rng>) -> Result<Forward<T>> {
    check_example(params, ex)?;
    let cfg = &params.config;
    let (n, d, heads, dh) = (ex.len(), cfg.d_model, cfg.n_heads, cfg.head_dim());
    let pa = ex.part_a_len;
    let scale = params.lora.map_or(0.0, |l| l.scale());
    let p_drop = cfg.dropout;

    let mut x = embed(params, &ex.tokens, &ex.inter, &ex.intra)?;
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (h1, ln1) = layer_norm(&layer.input_norm, &x, d);
        let (qkv, qkv_t) = linear(&layer.qkv, &h1, scale);
        let mut probs = vec![T::zero(); heads * n * n];
        let mut ctx = vec![T::zero(); n * d];
        let view = |off| View { data: &qkv[..], offset: off, stride: 3 * d };
        attention(view(0), view(d), view(2 * d), n, n, heads, dh, |i| visible_prefix(i, pa), &mut probs, &mut ctx);
        let (mut a, dense_t) = linear(&layer.dense, &ctx, scale);
        let drop1 = match rng.as_deref_mut() {
            Some(r) if p_drop > 0.0 => Some(dropout_mask::<T>(a.len(), p_drop, r)),
            _ => None,
        };
        if let Some(mask) = &drop1 {
            a.iter_mut().zip(mask).for_each(|(v, m)| *v = *v * *m);
        }
        x.iter_mut().zip(&a).for_each(|(xv, av)| *xv = *xv + *av);

        let (h2, ln2) = layer_norm(&layer.post_norm, &x, d);
        let (u, up_t) = linear(&layer.up, &h2, scale);
        let g: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
        let (mut mo, down_t) = linear(&layer.down, &g, scale);
        let drop2 = match rng.as_deref_mut() {
            Some(r) if p_drop > 0.0 => Some(dropout_mask::<T>(mo.len(), p_drop, r)),
            _ => None,
        };
        if let Some(mask) = &drop2 {
            mo.iter_mut().zip(mask).for_each(|(v, m)| *v = *v * *m);
        }
        x.iter_mut().zip(&mo).for_each(|(xv, mv)| *xv = *xv + *mv);

        caches.push(LayerCache {
            ln1,
            h1,
            qkv_t,
            qkv,
            probs,
            ctx,
            dense_t,
            drop1,
            ln2,
            h2,
            up_t,
            u,
            g,
            down_t,
            drop2,
        });
    }
    let (hidden, final_ln) = layer_norm(&params.final_norm, &x, d);
    Ok(Forward {
        n,
        part_a_len: pa,
        layers: caches,
        final_ln,
        hidden,
    })
}

/// Output logits (`rows.len() x V`) through the tied embedding.
pub fn project<T: Scalar>(params: &ModelParams<T>, hidden: &[T], rows: &[usize]) -> Vec<T> {
    let (d, v) = (params.config.d_model, params.config.vocab_size);
    let mut h = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        h.extend_from_slice(&hidden[r * d..(r + 1) * d]);
    }
    let mut logits = vec![T::zero(); rows.len() * v];
    matmul(&mut logits, &h, Op::N, &params.word_embeddings.data, Op::T, rows.len(), d, v, false);
    logits
}

impl<T: Scalar> Forward<T> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn part_a_len(&self) -> usize {
        self.part_a_len
    }

    pub fn logits(&self, params: &ModelParams<T>, rows: &[usize]) -> Vec<T> {
        project(params, &self.hidden, rows)
    }

    /// Attention probabilities of `layer`, `heads x n x n`.
    pub fn attention_probs(&self, layer: usize) -> &[T] {
        &self.layers[layer].probs
    }
}

/// Logits at every position, `n x V`.
pub fn logits_all<T: Scalar>(params: &ModelParams<T>, ex: &PositionedExample) -> Result<Vec<T>> {
    let fwd = forward(params, ex, None)?;
    let rows: Vec<usize> = (0..ex.len()).collect();
    Ok(fwd.logits(params, &rows))
}

/// Mean of `-log softmax(logits_r)[target_r]` over rows. `logits` is `targets.len() x vocab`.
pub fn infill_loss<T: Scalar>(logits: &[T], targets: &[TokenId], vocab: usize) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptySpansBatch);
    }
    if logits.len() != targets.len() * vocab {
        return Err(Error::LengthMismatch(logits.len(), targets.len() * vocab));
    }
    let mut sum = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        sum += log_sum_exp(row) - row[t as usize].f64();
    }
    Ok(sum / targets.len() as f64)
}

fn target_rows(ex: &PositionedExample) -> (Vec<usize>, Vec<TokenId>) {
    ex.targets.iter().enumerate().filter_map(|(i, t)| t.map(|t| (i, t))).unzip()
}

/// Summed target negative log-likelihood and target count for one example.
pub fn example_nll<T: Scalar>(params: &ModelParams<T>, ex: &PositionedExample) -> Result<(f64, usize)> {
    let (rows, targets) = target_rows(ex);
    if rows.is_empty() {
        return Ok((0.0, 0));
    }
    let fwd = forward(params, ex, None)?;
    let logits = fwd.logits(params, &rows);
    let v = params.config.vocab_size;
    let sum = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &logits[r * v..(r + 1) * v];
            log_sum_exp(row) - row[t as usize].f64()
        })
        .sum();
    Ok((sum, rows.len()))
}

/// Mean loss over every target position of the batch.
pub fn batch_loss<T: Scalar>(params: &ModelParams<T>, batch: &[PositionedExample]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0);
    for ex in batch {
        let (s, c) = example_nll(params, ex)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptySpansBatch);
    }
    Ok(sum / count as f64)
}

/// Mean batch loss and its gradient. Examples are reduced sequentially in batch
/// order; frozen classes get no gradient.
pub fn batch_gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[PositionedExample],
    trainable: &Trainable,
    mut rng: Option<&mut Rng>,
) -> Result<(f64, ModelParams<T>)> {
    let total: usize = batch.iter().map(PositionedExample::target_count).sum();
    if total == 0 {
        return Err(Error::EmptySpansBatch);
    }
    let mut grads = params.zeros_like();
    let mut sum = 0.0;
    for ex in batch {
        if ex.target_count() == 0 {
            continue;
        }
        let fwd = forward(params, ex, rng.as_deref_mut())?;
        sum += backward(params, ex, &fwd, 1.0 / total as f64, trainable, &mut grads);
    }
    Ok((sum / total as f64, grads))
}

/// Accumulates `scale * d(sum of target NLL)` into `grads`; returns the summed NLL.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    ex: &PositionedExample,
    fwd: &Forward<T>,
    scale: f64,
    trainable: &Trainable,
    grads: &mut ModelParams<T>,
) -> f64 {
    let cfg = &params.config;
    let (n, d, v, heads, dh) = (fwd.n, cfg.d_model, cfg.vocab_size, cfg.n_heads, cfg.head_dim());
    let lora_scale = params.lora.map_or(0.0, |l| l.scale());
    let (rows, targets) = target_rows(ex);

    let logits = fwd.logits(params, &rows);
    let mut nll = 0.0;
    let mut dlogits = vec![T::zero(); logits.len()];
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * v..(r + 1) * v];
        let lse = log_sum_exp(row);
        nll += lse - row[t as usize].f64();
        for c in 0..v {
            let p = (row[c].f64() - lse).exp();
            let onehot = if c == t as usize { 1.0 } else { 0.0 };
            dlogits[r * v + c] = T::of(scale * (p - onehot));
        }
    }
    let m = rows.len();
    if trainable.allows(ParamClass::TokenEmbedding) {
        let mut h = Vec::with_capacity(m * d);
        for &r in &rows {
            h.extend_from_slice(&fwd.hidden[r * d..(r + 1) * d]);
        }
        matmul(&mut grads.word_embeddings.data, &dlogits, Op::T, &h, Op::N, v, m, d, true);
    }
    let mut dh_rows = vec![T::zero(); m * d];
    matmul(&mut dh_rows, &dlogits, Op::N, &params.word_embeddings.data, Op::N, m, v, d, false);
    let mut dhidden = vec![T::zero(); n * d];
    for (k, &r) in rows.iter().enumerate() {
        dhidden[r * d..(r + 1) * d].copy_from_slice(&dh_rows[k * d..(k + 1) * d]);
    }

    let train_norm = trainable.allows(ParamClass::LayerNorm);
    let mut dx = vec![T::zero(); n * d];
    layer_norm_backward(
        &params.final_norm,
        &fwd.final_ln,
        &dhidden,
        d,
        train_norm.then_some(&mut grads.final_norm),
        &mut dx,
    );

    for (li, (layer, c)) in params.layers.iter().zip(&fwd.layers).enumerate().rev() {
        let g = &mut grads.layers[li];
        let base = |role| trainable.allows(ParamClass::Projection(role));
        let lora = trainable.allows(ParamClass::LoraA(Role::Dense));

        let mut dmo = dx.clone();
        if let Some(mask) = &c.drop2 {
            dmo.iter_mut().zip(mask).for_each(|(x, m)| *x = *x * *m);
        }
        let dg = linear_backward(&layer.down, &c.g, c.down_t.as_deref(), &dmo, lora_scale, &mut g.down, base(Role::Dense4hToH), lora);
        let du: Vec<T> = dg.iter().zip(&c.u).map(|(&a, &u)| a * gelu_grad(u)).collect();
        let dh2 = linear_backward(&layer.up, &c.h2, c.up_t.as_deref(), &du, lora_scale, &mut g.up, base(Role::DenseHTo4h), lora);
        layer_norm_backward(&layer.post_norm, &c.ln2, &dh2, d, train_norm.then_some(&mut g.post_norm), &mut dx);

        let mut da = dx.clone();
        if let Some(mask) = &c.drop1 {
            da.iter_mut().zip(mask).for_each(|(x, m)| *x = *x * *m);
        }
        let dctx = linear_backward(&layer.dense, &c.ctx, c.dense_t.as_deref(), &da, lora_scale, &mut g.dense, base(Role::Dense), lora);
        let dqkv = attention_backward(&c.qkv, &c.probs, &dctx, n, heads, dh);
        let dh1 = linear_backward(&layer.qkv, &c.h1, c.qkv_t.as_deref(), &dqkv, lora_scale, &mut g.qkv, base(Role::QueryKeyValue), lora);
        layer_norm_backward(&layer.input_norm, &c.ln1, &dh1, d, train_norm.then_some(&mut g.input_norm), &mut dx);
    }

    let add_row = |table: &mut [T], row: usize, src: &[T]| {
        for (t, s) in table[row * d..(row + 1) * d].iter_mut().zip(src) {
            *t = *t + *s;
        }
    };
    for i in 0..n {
        let src = &dx[i * d..(i + 1) * d];
        if trainable.allows(ParamClass::TokenEmbedding) {
            add_row(&mut grads.word_embeddings.data, ex.tokens[i] as usize, src);
        }
        if trainable.allows(ParamClass::InterPosition) {
            add_row(&mut grads.inter_embeddings.data, ex.inter[i] as usize, src);
            add_row(&mut grads.intra_embeddings.data, ex.intra[i] as usize, src);
        }
    }
    nll
}
