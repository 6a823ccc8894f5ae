//! Filtered ranking and MRR / Hits@n aggregation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::Codec;
use crate::decode::{self, CandidateList, DecodeOptions, NameIndex, Predictor};
use crate::error::Result;
use crate::kg::{Direction, EntityId, KnowledgeGraph, KnownTrueIndex, Query, Split};
use crate::model::{ModelConfig, Seq2SeqParams};
use crate::trie::build_entity_trie;

/// Scores over every entity; entities that were not generated are `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Self {
        ScoreVector { scores }
    }

    pub fn from_candidates(n_entities: usize, candidates: &CandidateList) -> Self {
        let mut scores = vec![f64::NEG_INFINITY; n_entities];
        for &(e, s) in &candidates.entries {
            scores[e.index()] = s;
        }
        ScoreVector { scores }
    }

    pub fn get(&self, e: EntityId) -> f64 {
        self.scores[e.index()]
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }
}

/// Rank of `target` after removing `filtered` entities. Exact ties are
/// broken by placing the target uniformly at random within its tie group.
pub fn filtered_rank<R: Rng + ?Sized>(
    scores: &ScoreVector,
    target: EntityId,
    filtered: &BTreeSet<EntityId>,
    rng: &mut R,
) -> usize {
    assert!(!filtered.contains(&target), "target must not be filtered");
    let t = scores.get(target);
    let (mut above, mut tied) = (0usize, 0usize);
    for (i, &s) in scores.as_slice().iter().enumerate() {
        let e = EntityId(i as u32);
        if e == target || filtered.contains(&e) {
            continue;
        }
        if s > t {
            above += 1;
        } else if s == t {
            tied += 1;
        }
    }
    1 + above + rng.random_range(0..=tied)
}

/// The tie-break rng of query `index` under `seed`.
pub fn query_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mrr: f64,
    /// `(n, fraction of ranks ≤ n)`, in ascending `n`.
    pub hits: Vec<(usize, f64)>,
    pub n_queries: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize], hits_at: &[usize]) -> Self {
        let n = ranks.len();
        let denom = n.max(1) as f64;
        let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / denom;
        let mut ns: Vec<usize> = hits_at.to_vec();
        ns.sort_unstable();
        ns.dedup();
        let hits = ns
            .into_iter()
            .map(|k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / denom))
            .collect();
        Metrics { mrr, hits, n_queries: n }
    }

    /// `mrr=…` then one `hits@n=…` line per cutoff.
    pub fn report(&self) -> String {
        let mut out = format!("mrr={:.6}\n", self.mrr);
        for (n, h) in &self.hits {
            let _ = writeln!(out, "hits@{n}={h:.6}");
        }
        out
    }

    pub fn tsv(&self) -> String {
        let mut header = String::from("mrr");
        let mut row = format!("{:.6}", self.mrr);
        for (n, h) in &self.hits {
            let _ = write!(header, "\thits@{n}");
            let _ = write!(row, "\t{h:.6}");
        }
        format!("{header}\n{row}\n")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankOutcome {
    pub query_index: u64,
    pub direction: Direction,
    pub target: EntityId,
    pub rank: usize,
    pub candidates: CandidateList,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub decode: DecodeOptions,
    /// Splits whose answers are blocked during generation; empty disables
    /// blocking.
    pub block_splits: Vec<Split>,
    pub hits_at: Vec<usize>,
    pub seed: u64,
    pub threads: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            decode: DecodeOptions::default(),
            block_splits: Split::ALL.to_vec(),
            hits_at: vec![1, 3, 10],
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub outcomes: Vec<RankOutcome>,
}

impl Evaluation {
    pub fn max_candidates(&self) -> usize {
        self.outcomes.iter().map(|o| o.candidates.len()).max().unwrap_or(0)
    }

    pub fn discarded(&self) -> usize {
        self.outcomes.iter().map(|o| o.candidates.discarded).sum()
    }

    pub fn collisions(&self) -> usize {
        self.outcomes.iter().map(|o| o.candidates.collisions).sum()
    }
}

/// The `2i` / `2i + 1` queries of fact `i`: tail first, then head.
pub fn split_queries(graph: &KnowledgeGraph, split: Split) -> Vec<(u64, Query, EntityId)> {
    graph
        .split(split)
        .iter()
        .enumerate()
        .flat_map(|(i, f)| {
            [Direction::Tail, Direction::Head]
                .into_iter()
                .enumerate()
                .map(move |(j, d)| ((2 * i + j) as u64, f.query(d), f.answer(d)))
        })
        .collect()
}

/// Rank every query with the candidates produced by `candidates`, using
/// filter sets over all splits and the per-query tie-break rng.
pub fn rank_queries<F>(
    graph: &KnowledgeGraph,
    queries: &[(u64, Query, EntityId)],
    seed: u64,
    hits_at: &[usize],
    threads: usize,
    candidates: F,
) -> Result<Evaluation>
where
    F: Fn(u64, &Query, EntityId) -> Result<CandidateList> + Sync,
{
    let filter = KnownTrueIndex::build(graph, &Split::ALL);
    let run = |(idx, q, target): &(u64, Query, EntityId)| -> Result<RankOutcome> {
        let list = candidates(*idx, q, *target)?;
        let mut filtered = filter.get(q).clone();
        filtered.remove(target);
        let scores = ScoreVector::from_candidates(graph.entities.len(), &list);
        let rank = filtered_rank(&scores, *target, &filtered, &mut query_rng(seed, *idx));
        Ok(RankOutcome {
            query_index: *idx,
            direction: q.direction,
            target: *target,
            rank,
            candidates: list,
        })
    };
    let outcomes: Vec<RankOutcome> = if threads <= 1 {
        queries.iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(|| queries.par_iter().map(run).collect::<Result<_>>())?
    };
    let ranks: Vec<usize> = outcomes.iter().map(|o| o.rank).collect();
    Ok(Evaluation {
        metrics: Metrics::from_ranks(&ranks, hits_at),
        outcomes,
    })
}

/// Decode and rank both queries of every fact in `split`.
pub fn evaluate_split(
    config: &ModelConfig,
    params: &Seq2SeqParams,
    codec: &Codec,
    graph: &KnowledgeGraph,
    split: Split,
    protocol: &Protocol,
) -> Result<Evaluation> {
    let entity_trie = build_entity_trie(codec);
    let names = NameIndex::new(codec);
    let block = (!protocol.block_splits.is_empty()).then(|| KnownTrueIndex::build(graph, &protocol.block_splits));
    let predictor = Predictor {
        config,
        params,
        codec,
        entity_trie: &entity_trie,
        names: &names,
        block_index: block.as_ref(),
    };
    let queries = split_queries(graph, split);
    rank_queries(graph, &queries, protocol.seed, &protocol.hits_at, protocol.threads, |idx, q, target| {
        let mut opts = protocol.decode;
        if let decode::Strategy::Sample { temperature, seed } = opts.strategy {
            opts.strategy = decode::Strategy::Sample {
                temperature,
                seed: query_rng(seed, idx).random(),
            };
        }
        predictor.predict_topk(q, Some(target), &opts)
    })
}

/// One line per outcome:
/// `query_index TAB direction TAB gold TAB rank TAB id:score,...`, using raw
/// entity ids.
pub fn predictions_tsv(graph: &KnowledgeGraph, outcomes: &[RankOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        let cands = candidates_field(graph, &o.candidates);
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            o.query_index,
            o.direction,
            graph.entity(o.target).raw_id,
            o.rank,
            cands
        );
    }
    out
}

pub fn candidates_field(graph: &KnowledgeGraph, list: &CandidateList) -> String {
    list.entries
        .iter()
        .map(|(e, s)| format!("{}:{s:.6}", graph.entity(*e).raw_id))
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(xs: &[f64]) -> ScoreVector {
        ScoreVector::new(xs.to_vec())
    }

    #[test]
    fn filtered_example() {
        let mut rng = query_rng(0, 0);
        let s = sv(&[-1.0, -2.0, -3.0]);
        assert_eq!(filtered_rank(&s, EntityId(2), &BTreeSet::from([EntityId(1)]), &mut rng), 2);
        assert_eq!(filtered_rank(&s, EntityId(2), &BTreeSet::new(), &mut rng), 3);
    }

    #[test]
    fn lone_generated_target_is_first() {
        let mut xs = vec![f64::NEG_INFINITY; 10];
        xs[4] = -7.5;
        let mut rng = query_rng(1, 2);
        assert_eq!(filtered_rank(&sv(&xs), EntityId(4), &BTreeSet::new(), &mut rng), 1);
    }

    #[test]
    fn tie_mean_matches_closed_form() {
        // two generated above, target tied at -inf with 5 others: ranks 3..=8
        let mut xs = vec![f64::NEG_INFINITY; 8];
        xs[0] = -1.0;
        xs[1] = -2.0;
        let s = sv(&xs);
        let n = 10_000;
        let total: usize = (0..n)
            .map(|seed| filtered_rank(&s, EntityId(7), &BTreeSet::new(), &mut query_rng(seed, 0)))
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 5.5).abs() < 0.1, "{mean}");
    }

    #[test]
    fn metrics_examples() {
        let m = Metrics::from_ranks(&[1, 2, 4], &[10, 1, 3]);
        assert!((m.mrr - (1.0 + 0.5 + 0.25) / 3.0).abs() < 1e-15);
        assert_eq!(m.hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![1, 3, 10]);
        assert!((m.hits[0].1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.hits[1].1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.hits[2].1, 1.0);
        assert_eq!(m.report(), "mrr=0.583333\nhits@1=0.333333\nhits@3=0.666667\nhits@10=1.000000\n");
        assert_eq!(m.tsv(), "mrr\thits@1\thits@3\thits@10\n0.583333\t0.333333\t0.666667\t1.000000\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn table() -> impl proptest::strategy::Strategy<Value = (Vec<f64>, usize, BTreeSet<usize>)> {
            proptest::collection::vec(prop_oneof![Just(f64::NEG_INFINITY), (-4i32..1).prop_map(|x| x as f64)], 2..12)
                .prop_flat_map(|xs| {
                    let n = xs.len();
                    (Just(xs), 0..n, proptest::collection::btree_set(0..n, 0..n))
                })
                .prop_map(|(xs, t, mut f)| {
                    f.remove(&t);
                    (xs, t, f)
                })
        }

        fn ids(f: &BTreeSet<usize>) -> BTreeSet<EntityId> {
            f.iter().map(|&i| EntityId(i as u32)).collect()
        }

        proptest! {
            #[test]
            fn filtering_never_worsens_rank((xs, t, f) in table(), extra in 0usize..12, seed in 0u64..1000) {
                let s = sv(&xs);
                let extra = extra % xs.len();
                prop_assume!(extra != t);
                let mut more = f.clone();
                more.insert(extra);
                // same tie draw is not guaranteed, so compare the rank ranges
                let lo = |f: &BTreeSet<usize>| (0..xs.len()).filter(|&i| i != t && !f.contains(&i) && xs[i] > xs[t]).count() + 1;
                let hi = |f: &BTreeSet<usize>| lo(f) + (0..xs.len()).filter(|&i| i != t && !f.contains(&i) && xs[i] == xs[t]).count();
                prop_assert!(lo(&more) <= lo(&f) && hi(&more) <= hi(&f));
                let r = filtered_rank(&s, EntityId(t as u32), &ids(&f), &mut query_rng(seed, 0));
                prop_assert!(r >= lo(&f) && r <= hi(&f));
            }

            #[test]
            fn translation_invariant((xs, t, f) in table(), c in -50.0f64..50.0, seed in 0u64..1000) {
                let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
                let a = filtered_rank(&sv(&xs), EntityId(t as u32), &ids(&f), &mut query_rng(seed, 3));
                let b = filtered_rank(&sv(&shifted), EntityId(t as u32), &ids(&f), &mut query_rng(seed, 3));
                prop_assert_eq!(a, b);
            }

            #[test]
            fn hits_monotone(ranks in proptest::collection::vec(1usize..50, 1..40)) {
                let m = Metrics::from_ranks(&ranks, &[1, 3, 5, 10, 20]);
                for w in m.hits.windows(2) {
                    prop_assert!(w[0].1 <= w[1].1);
                }
                prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
            }
        }
    }
}
