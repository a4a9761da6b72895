//! Python bindings: vocabulary, entity pool, positions, model decoding,
//! metrics and the command line.

use std::path::PathBuf;

use ::entity_infill as ei;
use ei::decode::{self, CandidateScoring, Constraint, DecodeConfig};
use ei::entity_pool::{EntityId, EntityKind, Unit};
use ei::masking::{corrupt, MaskLevel, MaskSpan};
use ei::model::{checkpoint, init_model, LoraConfig, ModelConfig, ModelParams};
use ei::positions::assign_positions;
use ei::vocab::TokenId;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: ei::Error) -> PyErr {
    match e {
        ei::Error::File { .. } | ei::Error::Io(_) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(module = "entity_infill", frozen)]
struct Vocabulary {
    inner: ei::vocab::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    /// Builds a vocabulary from text lines, keeping words seen `min_count` times.
    #[staticmethod]
    #[pyo3(signature = (lines, min_count = 1))]
    fn build(lines: Vec<String>, min_count: u64) -> PyResult<Self> {
        Ok(Self { inner: ei::vocab::Vocabulary::build(lines, min_count).map_err(err)? })
    }

    /// Reads a `vocab.tsv` written by `ingest`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let f = std::fs::File::open(&path).map_err(|e| err(ei::Error::file(&path, e)))?;
        Ok(Self { inner: ei::vocab::Vocabulary::read_tsv(std::io::BufReader::new(f)).map_err(err)? })
    }

    fn encode(&self, text: &str) -> PyResult<Vec<TokenId>> {
        self.inner.encode(text).map_err(err)
    }

    /// Like `encode`, but `[M]`, `[sM]` and `[gM]` become mask tokens.
    fn encode_prompt(&self, text: &str) -> PyResult<Vec<TokenId>> {
        self.inner.encode_prompt(text).map_err(err)
    }

    fn decode(&self, ids: Vec<TokenId>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(err)
    }

    fn id(&self, token: &str) -> Option<TokenId> {
        self.inner.id(token)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(module = "entity_infill")]
struct EntityPool {
    inner: ei::entity_pool::EntityPool,
}

#[pymethods]
impl EntityPool {
    #[new]
    fn new() -> Self {
        Self { inner: ei::entity_pool::EntityPool::new() }
    }

    /// Reads an `entities.tsv` written by `ingest`.
    #[staticmethod]
    fn load(path: PathBuf, vocab: &Vocabulary) -> PyResult<Self> {
        let f = std::fs::File::open(&path).map_err(|e| err(ei::Error::file(&path, e)))?;
        let inner = ei::entity_pool::EntityPool::read_tsv(std::io::BufReader::new(f), &vocab.inner).map_err(err)?;
        Ok(Self { inner })
    }

    fn register(&mut self, tokens: Vec<TokenId>, surface: String) -> PyResult<u32> {
        Ok(self.inner.register(&tokens, surface, EntityKind::Item).map_err(err)?.0)
    }

    fn lookup(&self, tokens: Vec<TokenId>) -> Option<u32> {
        self.inner.lookup(&tokens).map(|id| id.0)
    }

    fn surface(&self, id: u32) -> Option<String> {
        self.inner.entity(EntityId(id)).map(|e| e.surface.clone())
    }

    fn tokens(&self, id: u32) -> Option<Vec<TokenId>> {
        self.inner.entity(EntityId(id)).map(|e| e.tokens.clone())
    }

    /// Greedy longest-match segmentation as `(start, len, entity_id or None)`.
    fn segment(&self, tokens: Vec<TokenId>) -> Vec<(usize, usize, Option<u32>)> {
        self.inner
            .segment(&tokens)
            .into_iter()
            .map(|u| match u {
                Unit::Entity { id, start, len } => (start, len, Some(id.0)),
                Unit::Single(i) => (i, 1, None),
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Blanks `spans` (pairs of start and length) and returns the model input:
/// tokens, inter and intra ids, Part A length and next-token targets.
#[pyfunction]
#[pyo3(signature = (tokens, spans, pool, level = "entity", max_len = 1024))]
fn positions<'py>(
    py: Python<'py>,
    tokens: Vec<TokenId>,
    spans: Vec<(usize, usize)>,
    pool: &EntityPool,
    level: &str,
    max_len: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let level: MaskLevel = level.parse().map_err(err)?;
    let spans: Vec<MaskSpan> = spans.into_iter().map(|(start, len)| MaskSpan { start, len, level }).collect();
    let ex = corrupt("python", &tokens, &spans, level).map_err(err)?;
    let p = assign_positions(&ex, &pool.inner, max_len).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("tokens", p.tokens)?;
    d.set_item("inter", p.inter)?;
    d.set_item("intra", p.intra)?;
    d.set_item("part_a_len", p.part_a_len)?;
    d.set_item("targets", p.targets)?;
    Ok(d)
}

fn constraint(name: &str) -> PyResult<Constraint> {
    match name {
        "none" => Ok(Constraint::None),
        "catalog" => Ok(Constraint::Catalog),
        "single_entity" => Ok(Constraint::SingleEntity),
        other => Err(PyValueError::new_err(format!("unknown constraint {other:?}"))),
    }
}

#[pyclass(module = "entity_infill")]
struct Model {
    inner: ModelParams<f32>,
}

#[pymethods]
impl Model {
    /// A freshly initialized model; `lora_rank > 0` attaches adapters.
    #[staticmethod]
    #[pyo3(signature = (vocab_size, d_model = 64, n_layers = 2, n_heads = 4, max_len = 1024, seed = 0, lora_rank = 0))]
    fn init(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        max_len: usize,
        seed: u64,
        lora_rank: usize,
    ) -> PyResult<Self> {
        let cfg = ModelConfig { vocab_size, d_model, n_layers, n_heads, max_len, seed, ..ModelConfig::default() };
        let mut inner = init_model(&cfg).map_err(err)?;
        if lora_rank > 0 {
            inner
                .attach_lora(LoraConfig { rank: lora_rank, alpha: 2.0 * lora_rank as f64 })
                .map_err(err)?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load_file(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_file(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    /// Fills every mask slot greedily; one `(tokens, log_likelihood)` per slot.
    #[pyo3(signature = (prompt, pool, constrain = "none", max_steps = decode::DEFAULT_MAX_STEPS))]
    fn infill(
        &self,
        py: Python<'_>,
        prompt: Vec<TokenId>,
        pool: &EntityPool,
        constrain: &str,
        max_steps: usize,
    ) -> PyResult<Vec<(Vec<TokenId>, f64)>> {
        let cfg = DecodeConfig { max_steps, constraint: constraint(constrain)?, top_k: None };
        let out = py
            .detach(|| decode::infill(&self.inner, &prompt, &pool.inner, &cfg, None))
            .map_err(err)?;
        Ok(out.slots.iter().map(|s| (s.text_tokens().to_vec(), s.log_likelihood())).collect())
    }

    /// Beam search over catalog entities for the first slot: `(entity_id, log_likelihood)`.
    #[pyo3(signature = (prompt, pool, beam = 10, max_steps = decode::DEFAULT_MAX_STEPS))]
    fn next_item(
        &self,
        py: Python<'_>,
        prompt: Vec<TokenId>,
        pool: &EntityPool,
        beam: usize,
        max_steps: usize,
    ) -> PyResult<Vec<(u32, f64)>> {
        let ranked = py
            .detach(|| decode::next_item_predict(&self.inner, &prompt, &pool.inner, beam, max_steps))
            .map_err(err)?;
        Ok(ranked.into_iter().map(|(id, s)| (id.0, s)).collect())
    }

    /// Orders candidate entities by mean per-token log-likelihood in the first slot.
    fn candidate_rank(
        &self,
        py: Python<'_>,
        prompt: Vec<TokenId>,
        candidates: Vec<u32>,
        pool: &EntityPool,
    ) -> PyResult<Vec<(u32, f64)>> {
        let ids: Vec<EntityId> = candidates.into_iter().map(EntityId).collect();
        let ranked = py
            .detach(|| decode::candidate_rank(&self.inner, &prompt, &ids, &pool.inner, CandidateScoring::Likelihood))
            .map_err(err)?;
        Ok(ranked.into_iter().map(|(id, s)| (id.0, s)).collect())
    }
}

fn ranking_cases(ranked: Vec<Vec<u32>>, truths: Vec<u32>) -> PyResult<Vec<ei::metrics::RankingCase<u32>>> {
    if ranked.len() != truths.len() {
        return Err(err(ei::Error::LengthMismatch(ranked.len(), truths.len())));
    }
    Ok(ranked.into_iter().zip(truths).map(|(ranked, truth)| ei::metrics::RankingCase { ranked, truth }).collect())
}

#[pyfunction]
fn hr_at_k(ranked: Vec<Vec<u32>>, truths: Vec<u32>, k: usize) -> PyResult<f64> {
    ei::metrics::hr_at_k(&ranking_cases(ranked, truths)?, k).map_err(err)
}

#[pyfunction]
fn ndcg_at_k(ranked: Vec<Vec<u32>>, truths: Vec<u32>, k: usize) -> PyResult<f64> {
    ei::metrics::ndcg_at_k(&ranking_cases(ranked, truths)?, k).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (candidate, references, n = 4))]
fn bleu(candidate: Vec<String>, references: Vec<Vec<String>>, n: usize) -> f64 {
    ei::metrics::bleu(&candidate, &references, n)
}

/// ROUGE F1 ×100; `variant` is "1", "2" or "l".
#[pyfunction]
#[pyo3(signature = (candidate, reference, variant = "l"))]
fn rouge(candidate: Vec<String>, reference: Vec<String>, variant: &str) -> PyResult<f64> {
    let v = match variant.to_ascii_lowercase().as_str() {
        "1" => ei::metrics::Rouge::One,
        "2" => ei::metrics::Rouge::Two,
        "l" => ei::metrics::Rouge::L,
        other => return Err(PyValueError::new_err(format!("unknown ROUGE variant {other:?}"))),
    };
    Ok(ei::metrics::rouge(&candidate, &reference, v))
}

/// Runs one command-line invocation in-process and returns its standard output.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> PyResult<String> {
    let mut out = Vec::new();
    let argv = std::iter::once("entity-infill".to_owned()).chain(args);
    py.detach(|| ei::cli::run(argv, &mut out)).map_err(err)?;
    String::from_utf8(out).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn entity_infill(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<EntityPool>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(positions, m)?)?;
    m.add_function(wrap_pyfunction!(hr_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("MASK", ei::vocab::MASK)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
