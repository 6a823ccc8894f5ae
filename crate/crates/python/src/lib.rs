//! Python bindings: graphs, trained models, the trie constraint and the
//! ranking metrics, plus the command-line entry point.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use kgs2s::checkpoint::Checkpoint;
use kgs2s::cli::{load_trained, parse_query, run_args};
use kgs2s::codec::{Codec, Vocab};
use kgs2s::config::{parse_config, RunConfig};
use kgs2s::decode::{NameIndex, Predictor};
use kgs2s::eval::{evaluate_split, filtered_rank as rank, query_rng, Metrics, ScoreVector};
use kgs2s::kg::{load_graph, write_graph, Entity, EntityId, KnowledgeGraph, KnownTrueIndex, MetaKind, Relation, RelationId, Split};
use kgs2s::synth::{composition_graph, memorization_graph, CompositionSpec, MemorizationSpec};
use kgs2s::trie::{allowed_next, build_block_trie, build_entity_trie, CountedTrie};

fn py_err(e: kgs2s::Error) -> PyErr {
    match e {
        kgs2s::Error::Io { .. } | kgs2s::Error::MissingFile(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_split(s: &str) -> PyResult<Split> {
    s.parse().map_err(|e: String| PyValueError::new_err(e))
}

fn metrics_dict(m: &Metrics) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::from([("mrr".to_string(), m.mrr)]);
    for (n, h) in &m.hits {
        out.insert(format!("hits@{n}"), *h);
    }
    out
}

/// A knowledge graph: entities with names and descriptions, relations, and
/// train/valid/test facts.
#[pyclass(module = "kgs2s_py")]
struct Graph {
    inner: KnowledgeGraph,
}

#[pymethods]
impl Graph {
    /// Load `entities.tsv`, `relations.tsv` and the split files from `dir`.
    #[staticmethod]
    #[pyo3(signature = (dir, meta_kind="none"))]
    fn load(dir: PathBuf, meta_kind: &str) -> PyResult<Self> {
        let kind: MetaKind = meta_kind.parse().map_err(|e: String| PyValueError::new_err(e))?;
        Ok(Graph {
            inner: load_graph(dir, kind).map_err(py_err)?,
        })
    }

    /// Random facts over entities with unique multi-word names.
    #[staticmethod]
    #[pyo3(signature = (entities=50, relations=5, facts=200, min_len=3, max_len=8, valid=20, seed=0))]
    fn memorization(
        entities: usize,
        relations: usize,
        facts: usize,
        min_len: usize,
        max_len: usize,
        valid: usize,
        seed: u64,
    ) -> PyResult<Self> {
        if entities < 2 || relations == 0 || min_len == 0 || min_len > max_len {
            return Err(PyValueError::new_err("need 2+ entities, 1+ relations and 1 <= min_len <= max_len"));
        }
        if facts > entities * (entities - 1) * relations {
            return Err(PyValueError::new_err("too many facts for this many entities"));
        }
        Ok(Graph {
            inner: memorization_graph(&MemorizationSpec {
                entities,
                relations,
                facts,
                min_len,
                max_len,
                valid,
                seed,
            }),
        })
    }

    /// Three-layer graph where `r2` is the composition of `r0` and `r1`.
    #[staticmethod]
    #[pyo3(signature = (per_layer=40, groups=8, held_out=0.2, valid_share=0.1, seed=0))]
    fn composition(per_layer: usize, groups: usize, held_out: f64, valid_share: f64, seed: u64) -> PyResult<Self> {
        if per_layer == 0 || !(0.0..=1.0).contains(&(held_out + valid_share)) {
            return Err(PyValueError::new_err("bad composition parameters"));
        }
        Ok(Graph {
            inner: composition_graph(&CompositionSpec {
                per_layer,
                groups,
                held_out,
                valid_share,
                seed,
            }),
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        write_graph(&self.inner, dir).map_err(py_err)
    }

    #[getter]
    fn n_entities(&self) -> usize {
        self.inner.entities.len()
    }

    #[getter]
    fn n_relations(&self) -> usize {
        self.inner.relations.len()
    }

    fn n_facts(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.split(parse_split(split)?).len())
    }

    /// `(raw_id, name, description)` of entity `index`.
    fn entity(&self, index: usize) -> PyResult<(String, String, String)> {
        let e = self
            .inner
            .entities
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no entity {index}")))?;
        Ok((e.raw_id.clone(), e.name.clone(), e.description.clone()))
    }

    /// Facts of a split as `(head, relation, tail)` raw ids.
    fn facts(&self, split: &str) -> PyResult<Vec<(String, String, String)>> {
        let g = &self.inner;
        Ok(g.split(parse_split(split)?)
            .iter()
            .map(|f| {
                (
                    g.entity(f.head).raw_id.clone(),
                    g.relation(f.rel).raw_id.clone(),
                    g.entity(f.tail).raw_id.clone(),
                )
            })
            .collect())
    }

    fn __len__(&self) -> usize {
        self.inner.train.len() + self.inner.valid.len() + self.inner.test.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(entities={}, relations={}, train={}, valid={}, test={})",
            self.inner.entities.len(),
            self.inner.relations.len(),
            self.inner.train.len(),
            self.inner.valid.len(),
            self.inner.test.len()
        )
    }
}

/// A trained model loaded from the output directory of a `train` run.
#[pyclass(module = "kgs2s_py")]
struct Model {
    cfg: RunConfig,
    graph: KnowledgeGraph,
    codec: Codec,
    ckpt: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (config, seed=None))]
    fn load(config: PathBuf, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = parse_config(config).map_err(py_err)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let (graph, codec, ckpt) = load_trained(&cfg).map_err(py_err)?;
        Ok(Model { cfg, graph, codec, ckpt })
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.ckpt.params.n_params()
    }

    /// Top candidates for a `head,rel,tail[,meta]` query with `?` on one
    /// side, as `(raw_id, name, score)`.
    #[pyo3(signature = (query, beam_width=None))]
    fn predict(&self, py: Python<'_>, query: &str, beam_width: Option<usize>) -> PyResult<Vec<(String, String, f64)>> {
        let q = parse_query(&self.graph, query).map_err(py_err)?;
        let k = beam_width.unwrap_or(self.cfg.beam_width);
        if k == 0 {
            return Err(PyValueError::new_err("beam_width must be positive"));
        }
        let list = py
            .detach(|| {
                let trie = build_entity_trie(&self.codec);
                let names = NameIndex::new(&self.codec);
                let block = (!self.cfg.block_splits.is_empty())
                    .then(|| KnownTrueIndex::build(&self.graph, &self.cfg.block_splits));
                let predictor = Predictor {
                    config: &self.ckpt.config,
                    params: &self.ckpt.params,
                    codec: &self.codec,
                    entity_trie: &trie,
                    names: &names,
                    block_index: block.as_ref(),
                };
                predictor.predict_topk(&q, None, &self.cfg.protocol(k).decode)
            })
            .map_err(py_err)?;
        Ok(list
            .entries
            .iter()
            .map(|(e, s)| {
                let ent = self.graph.entity(*e);
                (ent.raw_id.clone(), ent.name.clone(), *s)
            })
            .collect())
    }

    /// Filtered MRR and Hits@n on a split.
    #[pyo3(signature = (split=None, beam_width=None))]
    fn evaluate(&self, py: Python<'_>, split: Option<&str>, beam_width: Option<usize>) -> PyResult<BTreeMap<String, f64>> {
        let split = split.map(parse_split).transpose()?.unwrap_or(self.cfg.eval_split);
        let k = beam_width.unwrap_or(self.cfg.beam_width);
        if k == 0 {
            return Err(PyValueError::new_err("beam_width must be positive"));
        }
        let eval = py
            .detach(|| {
                evaluate_split(&self.ckpt.config, &self.ckpt.params, &self.codec, &self.graph, split, &self.cfg.protocol(k))
            })
            .map_err(py_err)?;
        Ok(metrics_dict(&eval.metrics))
    }
}

/// Prefix trie over entity names, tokenized on spaces.
#[pyclass(module = "kgs2s_py")]
struct NameTrie {
    codec: Codec,
    trie: CountedTrie,
}

#[pymethods]
impl NameTrie {
    #[new]
    fn new(names: Vec<String>) -> PyResult<Self> {
        let graph = KnowledgeGraph {
            entities: names
                .iter()
                .enumerate()
                .map(|(i, n)| Entity {
                    id: EntityId(i as u32),
                    raw_id: i.to_string(),
                    name: n.clone(),
                    description: String::new(),
                })
                .collect(),
            relations: vec![Relation {
                id: RelationId(0),
                raw_id: "r".into(),
                name: "r".into(),
            }],
            ..Default::default()
        };
        graph.validate().map_err(py_err)?;
        let codec = Codec::new(&graph, Vocab::build(&graph, 0), 0, 4096).map_err(py_err)?;
        let trie = build_entity_trie(&codec);
        Ok(NameTrie { codec, trie })
    }

    fn __len__(&self) -> usize {
        self.trie.len()
    }

    /// Words that may follow `prefix`, and whether `prefix` is itself a
    /// complete name, with the names at indices `blocked` excluded.
    #[pyo3(signature = (prefix, blocked=Vec::new()))]
    fn allowed_next(&self, prefix: Vec<String>, blocked: Vec<usize>) -> PyResult<(Vec<String>, bool)> {
        let vocab = self.codec.vocab();
        let Some(ids) = prefix.iter().map(|w| vocab.id(w)).collect::<Option<Vec<_>>>() else {
            return Ok((Vec::new(), false));
        };
        let n = self.codec.n_entities();
        if let Some(&bad) = blocked.iter().find(|&&i| i >= n) {
            return Err(PyValueError::new_err(format!("no name {bad}")));
        }
        let blocked: BTreeSet<EntityId> = blocked.into_iter().map(|i| EntityId(i as u32)).collect();
        let block = build_block_trie(&self.codec, &blocked, None);
        let allowed = allowed_next(&self.trie, Some(&block), &ids);
        Ok((
            allowed.tokens.iter().map(|&t| vocab.surface(t).to_string()).collect(),
            allowed.end,
        ))
    }
}

/// Filtered rank of `target` under `scores`, ignoring `filtered` indices.
/// Ties are broken by the tie-break stream `index` of `seed`.
#[pyfunction]
#[pyo3(signature = (scores, target, filtered=Vec::new(), seed=0, index=0))]
fn filtered_rank(scores: Vec<f64>, target: usize, filtered: Vec<usize>, seed: u64, index: u64) -> PyResult<usize> {
    if target >= scores.len() {
        return Err(PyValueError::new_err("target out of range"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PyValueError::new_err("scores contain NaN"));
    }
    let filtered: BTreeSet<EntityId> = filtered
        .into_iter()
        .filter(|&i| i != target)
        .map(|i| EntityId(i as u32))
        .collect();
    Ok(rank(
        &ScoreVector::new(scores),
        EntityId(target as u32),
        &filtered,
        &mut query_rng(seed, index),
    ))
}

/// MRR and Hits@n of a list of 1-based ranks.
#[pyfunction]
#[pyo3(signature = (ranks, hits_at=vec![1, 3, 10]))]
fn metrics(ranks: Vec<usize>, hits_at: Vec<usize>) -> PyResult<BTreeMap<String, f64>> {
    if ranks.contains(&0) {
        return Err(PyValueError::new_err("ranks start at 1"));
    }
    Ok(metrics_dict(&Metrics::from_ranks(&ranks, &hits_at)))
}

/// Run a command-line invocation, e.g. `["train", "--config", "run.cfg"]`,
/// and return its standard output.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> PyResult<String> {
    py.detach(|| run_args(args)).map_err(py_err)
}

#[pymodule]
fn kgs2s_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Model>()?;
    m.add_class::<NameTrie>()?;
    m.add_function(wrap_pyfunction!(filtered_rank, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
