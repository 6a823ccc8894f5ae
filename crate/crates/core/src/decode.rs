//! Entity-name generation and mapping back to entity ids.
//!
//! Decoding works on the *name* part of an answer only: the decoder is primed
//! with `<bos> <mask>` and generates name tokens until it chooses to end the
//! name (an `[` opening the description, or `<eos>`). A hypothesis' score is
//! the sum of its name-token log-probabilities plus the log-probability of
//! ending the name there; the description is never generated.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;

use crate::codec::{parse_prediction, Codec, TokenId, BOS, EOS, LB, MASK, N_RESERVED};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnownTrueIndex, Query};
use crate::model::{encode, next_log_probs, EncodedQuery, ModelConfig, Seq2SeqParams};
use crate::trie::{allowed_next, build_block_trie, Allowed, CountedTrie};

/// Log-probabilities for the step after one prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepScores {
    /// Per vocabulary id; `-inf` marks ids that can never continue a name.
    pub tokens: Vec<f64>,
    /// Log-probability of ending the name here.
    pub end: f64,
}

pub trait StepScorer {
    fn score(&self, prefixes: &[Vec<TokenId>]) -> Result<Vec<StepScores>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| b.finished.cmp(&a.finished))
}

fn expansions(
    h: &Hypothesis,
    scores: &StepScores,
    allowed: Option<Allowed>,
    max_name_len: usize,
    out: &mut Vec<Hypothesis>,
) {
    let at_budget = h.tokens.len() >= max_name_len;
    let can_end = allowed.as_ref().is_none_or(|a| a.end);
    if can_end && scores.end > f64::NEG_INFINITY {
        out.push(Hypothesis {
            tokens: h.tokens.clone(),
            log_prob: h.log_prob + scores.end,
            finished: true,
        });
    }
    if at_budget {
        return;
    }
    let mut push = |t: TokenId| {
        let lp = scores.tokens[t as usize];
        if lp > f64::NEG_INFINITY {
            let mut tokens = h.tokens.clone();
            tokens.push(t);
            out.push(Hypothesis {
                tokens,
                log_prob: h.log_prob + lp,
                finished: false,
            });
        }
    };
    match allowed {
        Some(a) => a.tokens.into_iter().for_each(&mut push),
        None => (0..scores.tokens.len() as TokenId).for_each(&mut push),
    }
}

/// Length-synchronous beam search without length normalization.
///
/// Every step expands all live hypotheses, keeps the `k` best expansions
/// (finished or not) and retires the finished ones. Search stops once no
/// live hypothesis can beat the `k`-th best finished one. Returns at most `k`
/// finished hypotheses, best first.
pub fn beam_search(
    scorer: &dyn StepScorer,
    constraint: Option<&dyn Fn(&[TokenId]) -> Allowed>,
    k: usize,
    max_name_len: usize,
) -> Result<Vec<Hypothesis>> {
    assert!(k >= 1, "beam width must be positive");
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !active.is_empty() {
        let prefixes: Vec<Vec<TokenId>> = active.iter().map(|h| h.tokens.clone()).collect();
        let scores = scorer.score(&prefixes)?;
        let mut pool = Vec::new();
        for (h, s) in active.iter().zip(&scores) {
            let allowed = constraint.map(|c| c(&h.tokens));
            expansions(h, s, allowed, max_name_len, &mut pool);
        }
        pool.sort_by(by_score);
        pool.truncate(k);
        active.clear();
        for h in pool {
            if h.finished {
                finished.push(h);
            } else {
                active.push(h);
            }
        }
        if finished.len() >= k {
            finished.sort_by(by_score);
            finished.truncate(k);
            let worst = finished[k - 1].log_prob;
            if active.iter().all(|h| h.log_prob <= worst) {
                break;
            }
        }
    }
    finished.sort_by(by_score);
    finished.truncate(k);
    Ok(finished)
}

/// `k` independent ancestral samples at the given temperature. Scores are
/// the untempered log-probabilities. Samples that reach a dead end under the
/// constraint are dropped.
pub fn random_sample<R: Rng + ?Sized>(
    scorer: &dyn StepScorer,
    constraint: Option<&dyn Fn(&[TokenId]) -> Allowed>,
    k: usize,
    temperature: f64,
    max_name_len: usize,
    rng: &mut R,
) -> Result<Vec<Hypothesis>> {
    assert!(k >= 1, "sample count must be positive");
    assert!(temperature > 0.0, "temperature must be positive");
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut h = Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        };
        loop {
            let s = scorer.score(std::slice::from_ref(&h.tokens))?.remove(0);
            let mut options = Vec::new();
            expansions(&h, &s, constraint.map(|c| c(&h.tokens)), max_name_len, &mut options);
            if options.is_empty() {
                break;
            }
            let step: Vec<f64> = options.iter().map(|o| (o.log_prob - h.log_prob) / temperature).collect();
            let max = step.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = step.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = options.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            h = options.swap_remove(pick);
            if h.finished {
                out.push(h);
                break;
            }
        }
    }
    Ok(out)
}

/// Scores name continuations with the seq2seq model.
pub struct ModelScorer<'a> {
    config: &'a ModelConfig,
    params: &'a Seq2SeqParams,
    encoded: EncodedQuery,
}

impl<'a> ModelScorer<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a Seq2SeqParams, codec: &Codec, query: &Query) -> Result<Self> {
        let vq = codec.verbalize_query(query)?;
        Ok(ModelScorer {
            config,
            params,
            encoded: encode(config, params, &vq)?,
        })
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl StepScorer for ModelScorer<'_> {
    fn score(&self, prefixes: &[Vec<TokenId>]) -> Result<Vec<StepScores>> {
        let full: Vec<Vec<TokenId>> = prefixes
            .iter()
            .map(|p| {
                let mut v = Vec::with_capacity(p.len() + 2);
                v.extend([BOS, MASK]);
                v.extend_from_slice(p);
                v
            })
            .collect();
        let lps = next_log_probs(self.config, self.params, &self.encoded, &full)?;
        Ok(lps
            .into_iter()
            .map(|mut lp| {
                let end = log_add(lp[LB as usize], lp[EOS as usize]);
                for x in &mut lp[..N_RESERVED] {
                    *x = f64::NEG_INFINITY;
                }
                StepScores { tokens: lp, end }
            })
            .collect())
    }
}

/// Entity-name text to entity ids (several ids when names collide).
#[derive(Clone, Debug, Default)]
pub struct NameIndex {
    by_name: HashMap<String, Vec<EntityId>>,
}

impl NameIndex {
    pub fn new(codec: &Codec) -> Self {
        let mut by_name: HashMap<String, Vec<EntityId>> = HashMap::new();
        for i in 0..codec.n_entities() {
            let id = EntityId(i as u32);
            by_name
                .entry(codec.vocab().detokenize(codec.name_tokens(id)))
                .or_default()
                .push(id);
        }
        NameIndex { by_name }
    }

    pub fn lookup(&self, name: &str) -> &[EntityId] {
        self.by_name.get(name).map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateList {
    /// Unique entity ids, best score first.
    pub entries: Vec<(EntityId, f64)>,
    /// Generations that named no entity.
    pub discarded: usize,
    /// Generations whose name was shared by more than one entity.
    pub collisions: usize,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parse hypotheses into entities, drop non-entities and blocked ids, keep
/// each entity's best score and cap the list at `k`.
pub fn collect_candidates(
    hypotheses: &[Hypothesis],
    codec: &Codec,
    names: &NameIndex,
    blocked: &BTreeSet<EntityId>,
    k: usize,
) -> CandidateList {
    let mut best: HashMap<EntityId, f64> = HashMap::new();
    let mut list = CandidateList::default();
    for h in hypotheses {
        let mut wrapped = vec![BOS, MASK];
        wrapped.extend_from_slice(&h.tokens);
        wrapped.push(EOS);
        let ids = parse_prediction(codec.vocab(), &wrapped)
            .map(|name| names.lookup(&name))
            .unwrap_or(&[]);
        if ids.is_empty() {
            list.discarded += 1;
            continue;
        }
        if ids.len() > 1 {
            list.collisions += 1;
        }
        for &id in ids.iter().filter(|id| !blocked.contains(id)) {
            let e = best.entry(id).or_insert(f64::NEG_INFINITY);
            *e = e.max(h.log_prob);
        }
    }
    list.entries = best.into_iter().collect();
    list.entries
        .sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    list.entries.truncate(k);
    list
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Beam,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam_width: usize,
    pub constrained: bool,
    pub strategy: Strategy,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_width: 40,
            constrained: true,
            strategy: Strategy::Beam,
        }
    }
}

/// Everything needed to answer queries with one trained model.
pub struct Predictor<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a Seq2SeqParams,
    pub codec: &'a Codec,
    pub entity_trie: &'a CountedTrie,
    pub names: &'a NameIndex,
    /// Known answers to exclude from generation; `None` disables blocking.
    pub block_index: Option<&'a KnownTrueIndex>,
}

impl Predictor<'_> {
    /// Decode the query and map generations to a ranked candidate list. The
    /// evaluation `target`, if any, is never blocked.
    pub fn predict_topk(&self, query: &Query, target: Option<EntityId>, opts: &DecodeOptions) -> Result<CandidateList> {
        if opts.constrained && self.entity_trie.is_empty() {
            return Err(Error::EmptyTrie);
        }
        let blocked: BTreeSet<EntityId> = self
            .block_index
            .map(|idx| idx.get(query).iter().copied().filter(|&e| Some(e) != target).collect())
            .unwrap_or_default();
        let block_trie = build_block_trie(self.codec, &blocked, None);
        let constraint = |prefix: &[TokenId]| allowed_next(self.entity_trie, Some(&block_trie), prefix);
        let constraint: Option<&dyn Fn(&[TokenId]) -> Allowed> = if opts.constrained {
            Some(&constraint)
        } else {
            None
        };
        let scorer = ModelScorer::new(self.config, self.params, self.codec, query)?;
        let max_name_len = self.codec.max_entity_name_len();
        let hyps = match opts.strategy {
            Strategy::Beam => beam_search(&scorer, constraint, opts.beam_width, max_name_len)?,
            Strategy::Sample { temperature, seed } => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                random_sample(&scorer, constraint, opts.beam_width, temperature, max_name_len, &mut rng)?
            }
        };
        let blocked_out = if self.block_index.is_some() { blocked } else { BTreeSet::new() };
        Ok(collect_candidates(&hyps, self.codec, self.names, &blocked_out, opts.beam_width))
    }
}
