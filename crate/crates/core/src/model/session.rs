use super::forward::embed;
use super::ops::{attention, gelu, layer_norm, linear, View};
use super::params::ModelParams;
use super::forward::project;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Key/value cache for incremental decoding.
///
/// Part A rows never attend to Part B, so their keys and values are final once
/// computed; each Part B row only needs the cache plus itself.
#[derive(Debug, Clone)]
pub struct Session<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Scalar> Session<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            keys: vec![Vec::new(); params.layers.len()],
            values: vec![Vec::new(); params.layers.len()],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `tokens` and returns their final hidden states (`m x d`).
    /// `bidirectional` rows see the whole new block (Part A); otherwise rows
    /// see the cache and the block causally (Part B).
    pub fn extend(
        &mut self,
        params: &ModelParams<T>,
        tokens: &[TokenId],
        inter: &[u32],
        intra: &[u32],
        bidirectional: bool,
    ) -> Result<Vec<T>> {
        let cfg = &params.config;
        let (m, d, heads, dh) = (tokens.len(), cfg.d_model, cfg.n_heads, cfg.head_dim());
        if inter.len() != m || intra.len() != m {
            return Err(Error::Shape("session rows need one inter and intra id per token".into()));
        }
        if self.len + m > cfg.max_len {
            return Err(Error::SequenceTooLong {
                doc_id: "<decode>".into(),
                len: self.len + m,
                max_len: cfg.max_len,
            });
        }
        let scale = params.lora.map_or(0.0, |l| l.scale());
        let n_keys = self.len + m;
        let base = self.len;
        let limit = |i: usize| if bidirectional { n_keys } else { base + i + 1 };

        let mut x = embed(params, tokens, inter, intra)?;
        for (li, layer) in params.layers.iter().enumerate() {
            let (h1, _) = layer_norm(&layer.input_norm, &x, d);
            let (qkv, _) = linear(&layer.qkv, &h1, scale);
            for r in 0..m {
                let row = &qkv[r * 3 * d..(r + 1) * 3 * d];
                self.keys[li].extend_from_slice(&row[d..2 * d]);
                self.values[li].extend_from_slice(&row[2 * d..]);
            }
            let mut probs = vec![T::zero(); heads * m * n_keys];
            let mut ctx = vec![T::zero(); m * d];
            attention(
                View { data: &qkv, offset: 0, stride: 3 * d },
                View { data: &self.keys[li], offset: 0, stride: d },
                View { data: &self.values[li], offset: 0, stride: d },
                m,
                n_keys,
                heads,
                dh,
                limit,
                &mut probs,
                &mut ctx,
            );
            let (a, _) = linear(&layer.dense, &ctx, scale);
            x.iter_mut().zip(&a).for_each(|(xv, av)| *xv = *xv + *av);
            let (h2, _) = layer_norm(&layer.post_norm, &x, d);
            let (u, _) = linear(&layer.up, &h2, scale);
            let g: Vec<T> = u.into_iter().map(gelu).collect();
            let (mo, _) = linear(&layer.down, &g, scale);
            x.iter_mut().zip(&mo).for_each(|(xv, mv)| *xv = *xv + *mv);
        }
        self.len = n_keys;
        let (hidden, _) = layer_norm(&params.final_norm, &x, d);
        Ok(hidden)
    }

    /// Appends one causal row and returns its logits.
    pub fn push(&mut self, params: &ModelParams<T>, token: TokenId, inter: u32, intra: u32) -> Result<Vec<T>> {
        let h = self.extend(params, &[token], &[inter], &[intra], false)?;
        Ok(project(params, &h, &[0]))
    }
}
