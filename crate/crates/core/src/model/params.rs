use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::positions::INTRA_TABLE_SIZE;
use crate::seed;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Filled from the vocabulary when left at 0.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width is `ffn_mult * d_model`.
    pub ffn_mult: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            max_len: crate::positions::DEFAULT_MAX_LEN,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model.{m}")));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn_mult == 0 {
            return bad("d_model, n_heads, n_layers and ffn_mult must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model ({}) must be divisible by n_heads ({})", self.d_model, self.n_heads));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn inter_table_size(&self) -> usize {
        self.max_len + 1
    }

    /// Closed-form count of base parameters.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.ffn_dim());
        let embeddings = (v + self.inter_table_size() + INTRA_TABLE_SIZE) * d;
        let per_layer = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d);
        embeddings + self.n_layers * per_layer + 2 * d
    }

    /// Closed-form count of adapter parameters for rank `r`.
    pub fn lora_param_count(&self, rank: usize) -> usize {
        let per_layer: usize = Role::ALL
            .iter()
            .map(|role| {
                let (i, o) = role.dims(self);
                rank * (i + o)
            })
            .sum();
        self.n_layers * per_layer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// The four adapted projections of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    QueryKeyValue,
    Dense,
    DenseHTo4h,
    Dense4hToH,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::QueryKeyValue, Role::Dense, Role::DenseHTo4h, Role::Dense4hToH];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::QueryKeyValue => "query_key_value",
            Role::Dense => "dense",
            Role::DenseHTo4h => "dense_h_to_4h",
            Role::Dense4hToH => "dense_4h_to_h",
        }
    }

    /// `(d_in, d_out)`.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        let (d, f) = (cfg.d_model, cfg.ffn_dim());
        match self {
            Role::QueryKeyValue => (d, 3 * d),
            Role::Dense => (d, d),
            Role::DenseHTo4h => (d, f),
            Role::Dense4hToH => (f, d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamClass {
    TokenEmbedding,
    InterPosition,
    IntraPosition,
    LayerNorm,
    Projection(Role),
    LoraA(Role),
    LoraB(Role),
}

/// Which parameter classes receive gradients and updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trainable {
    pub token_embeddings: bool,
    pub position_tables: bool,
    pub layer_norms: bool,
    pub projections: bool,
    pub lora: bool,
}

impl Trainable {
    pub fn full() -> Self {
        Self {
            token_embeddings: true,
            position_tables: true,
            layer_norms: true,
            projections: true,
            lora: true,
        }
    }

    /// Base model frozen except the position tables.
    pub fn lora_only() -> Self {
        Self {
            token_embeddings: false,
            position_tables: true,
            layer_norms: false,
            projections: false,
            lora: true,
        }
    }

    pub fn allows(&self, class: ParamClass) -> bool {
        match class {
            ParamClass::TokenEmbedding => self.token_embeddings,
            ParamClass::InterPosition | ParamClass::IntraPosition => self.position_tables,
            ParamClass::LayerNorm => self.layer_norms,
            ParamClass::Projection(_) => self.projections,
            ParamClass::LoraA(_) | ParamClass::LoraB(_) => self.lora,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    fn normal(shape: &[usize], std: f64, seed: u64, name: &str) -> Self {
        let mut rng = seed::stream(seed, "init", name);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Low-rank update `(alpha / r) * B A` to a projection; `a` is `[r x d_in]`, `b` is `[d_out x r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

/// `y = x W + bias (+ adapter)`; `weight` is stored `[d_in x d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub lora: Option<Adapter<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub input_norm: Norm<T>,
    pub qkv: Linear<T>,
    pub dense: Linear<T>,
    pub post_norm: Norm<T>,
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl<T> Layer<T> {
    pub fn linear(&self, role: Role) -> &Linear<T> {
        match role {
            Role::QueryKeyValue => &self.qkv,
            Role::Dense => &self.dense,
            Role::DenseHTo4h => &self.up,
            Role::Dense4hToH => &self.down,
        }
    }

    pub fn linear_mut(&mut self, role: Role) -> &mut Linear<T> {
        match role {
            Role::QueryKeyValue => &mut self.qkv,
            Role::Dense => &mut self.dense,
            Role::DenseHTo4h => &mut self.up,
            Role::Dense4hToH => &mut self.down,
        }
    }
}

/// All model parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub word_embeddings: Tensor<T>,
    pub inter_embeddings: Tensor<T>,
    pub intra_embeddings: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Norm<T>,
}

/// Named view of one parameter tensor.
pub type Entry<R> = (String, ParamClass, R);

macro_rules! collect_entries {
    ($params:expr $(, $m:tt)?) => {{
        let p = $params;
        let mut out = Vec::new();
        let mut adapters = Vec::new();
        out.push(("word_embeddings".to_owned(), ParamClass::TokenEmbedding, & $($m)? p.word_embeddings));
        out.push(("inter_position_embeddings".to_owned(), ParamClass::InterPosition, & $($m)? p.inter_embeddings));
        out.push(("intra_position_embeddings".to_owned(), ParamClass::IntraPosition, & $($m)? p.intra_embeddings));
        for (i, layer) in (& $($m)? p.layers).into_iter().enumerate() {
            let Layer { input_norm, qkv, dense, post_norm, up, down } = layer;
            let linears = [(Role::QueryKeyValue, qkv), (Role::Dense, dense), (Role::DenseHTo4h, up), (Role::Dense4hToH, down)];
            let Norm { gain, bias } = input_norm;
            out.push((format!("layer.{i}.input_layernorm.weight"), ParamClass::LayerNorm, gain));
            out.push((format!("layer.{i}.input_layernorm.bias"), ParamClass::LayerNorm, bias));
            let mut norm2 = Some(post_norm);
            for (role, lin) in linears {
                if role == Role::DenseHTo4h {
                    let Norm { gain, bias } = norm2.take().expect("visited once");
                    out.push((format!("layer.{i}.post_attention_layernorm.weight"), ParamClass::LayerNorm, gain));
                    out.push((format!("layer.{i}.post_attention_layernorm.bias"), ParamClass::LayerNorm, bias));
                }
                let Linear { weight, bias, lora } = lin;
                let r = role.as_str();
                out.push((format!("layer.{i}.{r}.weight"), ParamClass::Projection(role), weight));
                out.push((format!("layer.{i}.{r}.bias"), ParamClass::Projection(role), bias));
                if let Some(Adapter { a, b }) = lora {
                    adapters.push((format!("lora.{i}.{r}.A"), ParamClass::LoraA(role), a));
                    adapters.push((format!("lora.{i}.{r}.B"), ParamClass::LoraB(role), b));
                }
            }
        }
        let Norm { gain, bias } = & $($m)? p.final_norm;
        out.push(("final_layernorm.weight".to_owned(), ParamClass::LayerNorm, gain));
        out.push(("final_layernorm.bias".to_owned(), ParamClass::LayerNorm, bias));
        out.extend(adapters);
        out
    }};
}

impl<T: Scalar> ModelParams<T> {
    /// Every tensor in a fixed order: base parameters, then adapters.
    pub fn entries(&self) -> Vec<Entry<&Tensor<T>>> {
        collect_entries!(self)
    }

    pub fn entries_mut(&mut self) -> Vec<Entry<&mut Tensor<T>>> {
        collect_entries!(self, mut)
    }

    pub fn num_params(&self) -> usize {
        self.entries().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn num_base_params(&self) -> usize {
        self.entries()
            .iter()
            .filter(|(_, c, _)| !matches!(c, ParamClass::LoraA(_) | ParamClass::LoraB(_)))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Same structure, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, t) in z.entries_mut() {
            t.data.iter_mut().for_each(|x| *x = T::zero());
        }
        z
    }

    /// `inter_table[inter] + intra_table[intra]`.
    pub fn position_vector(&self, inter: u32, intra: u32) -> Result<Vec<T>> {
        self.check_positions(inter, intra)?;
        Ok(self
            .inter_embeddings
            .row(inter as usize)
            .iter()
            .zip(self.intra_embeddings.row(intra as usize))
            .map(|(&a, &b)| a + b)
            .collect())
    }

    pub(crate) fn check_positions(&self, inter: u32, intra: u32) -> Result<()> {
        if inter as usize >= self.inter_embeddings.shape[0] {
            return Err(Error::Shape(format!(
                "inter position {inter} outside table of {}",
                self.inter_embeddings.shape[0]
            )));
        }
        if intra as usize >= self.intra_embeddings.shape[0] {
            return Err(Error::Shape(format!(
                "intra position {intra} outside table of {}",
                self.intra_embeddings.shape[0]
            )));
        }
        Ok(())
    }

    pub fn check_token(&self, tok: u32) -> Result<()> {
        if tok as usize >= self.config.vocab_size {
            return Err(Error::IdOutOfRange {
                id: tok,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Adds zero-initialized-B adapters to every projection; the forward pass is unchanged.
    pub fn attach_lora(&mut self, lora: LoraConfig) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::LoraAlreadyAttached);
        }
        if lora.rank == 0 {
            return Err(Error::Config("lora.rank must be at least 1".into()));
        }
        let seed = self.config.seed;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for role in Role::ALL {
                let lin = layer.linear_mut(role);
                let (d_in, d_out) = (lin.d_in(), lin.d_out());
                let name = format!("lora.{i}.{}.A", role.as_str());
                lin.lora = Some(Adapter {
                    a: Tensor::normal(&[lora.rank, d_in], 1.0 / (d_in as f64).sqrt(), seed, &name),
                    b: Tensor::zeros(&[d_out, lora.rank]),
                });
            }
        }
        self.lora = Some(lora);
        Ok(())
    }

    /// Folds every adapter into its weight: `W[i][o] += s * sum_k B[o][k] A[k][i]`.
    pub fn merge_lora(&mut self) {
        let Some(cfg) = self.lora.take() else { return };
        let s = cfg.scale();
        for layer in &mut self.layers {
            for role in Role::ALL {
                let lin = layer.linear_mut(role);
                let Some(Adapter { a, b }) = lin.lora.take() else { continue };
                let (d_in, d_out, r) = (lin.d_in(), lin.d_out(), cfg.rank);
                for i in 0..d_in {
                    for o in 0..d_out {
                        let delta: f64 = (0..r).map(|k| b.data[o * r + k].f64() * a.data[k * d_in + i].f64()).sum();
                        let w = &mut lin.weight.data[i * d_out + o];
                        *w = T::of(w.f64() + s * delta);
                    }
                }
            }
        }
    }

    /// Converts element type, e.g. to run the f64 gradient check on an f32 model.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config, self.lora);
        for ((_, _, dst), (_, _, src)) in out.entries_mut().into_iter().zip(self.entries()) {
            for (d, s) in dst.data.iter_mut().zip(&src.data) {
                *d = U::of(s.f64());
            }
        }
        out
    }

    /// Correctly shaped, all-zero parameters (adapters included when `lora` is set).
    pub fn zeros(config: &ModelConfig, lora: Option<LoraConfig>) -> Self {
        let (d, f) = (config.d_model, config.ffn_dim());
        let linear = |d_in: usize, d_out: usize| Linear {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
            lora: lora.map(|l| Adapter {
                a: Tensor::zeros(&[l.rank, d_in]),
                b: Tensor::zeros(&[d_out, l.rank]),
            }),
        };
        let norm = || Norm {
            gain: Tensor::zeros(&[d]),
            bias: Tensor::zeros(&[d]),
        };
        Self {
            config: config.clone(),
            lora,
            word_embeddings: Tensor::zeros(&[config.vocab_size, d]),
            inter_embeddings: Tensor::zeros(&[config.inter_table_size(), d]),
            intra_embeddings: Tensor::zeros(&[INTRA_TABLE_SIZE, d]),
            layers: (0..config.n_layers)
                .map(|_| Layer {
                    input_norm: norm(),
                    qkv: linear(d, 3 * d),
                    dense: linear(d, d),
                    post_norm: norm(),
                    up: linear(d, f),
                    down: linear(f, d),
                })
                .collect(),
            final_norm: norm(),
        }
    }
}

/// Deterministic initialization: scaled normal for embeddings and projections,
/// unit gains, zero biases. Each tensor draws from its own seeded stream.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut p = ModelParams::zeros(config, None);
    // residual-branch outputs are scaled down with depth
    let out_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    for (name, class, t) in p.entries_mut() {
        let is_bias = name.ends_with(".bias");
        let std = match class {
            ParamClass::LayerNorm => {
                if !is_bias {
                    t.data.iter_mut().for_each(|x| *x = T::one());
                }
                continue;
            }
            _ if is_bias => continue,
            ParamClass::Projection(Role::Dense | Role::Dense4hToH) => out_std,
            _ => INIT_STD,
        };
        *t = Tensor::normal(&t.shape, std, config.seed, &name);
    }
    Ok(p)
}
