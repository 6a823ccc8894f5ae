//! Vocabulary, whitespace tokenization and query/answer verbalization.
//!
//! Queries are flattened to
//!
//! ```text
//! <bos> <p1> name [ desc ] <p2> | <p3> relation <p4> | <mask> [| meta] <eos>
//! ```
//!
//! for a tail query; a head query swaps the `<mask>` and the prompted entity
//! block. Answers are `<bos> <mask> name [ desc ] <eos>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{Direction, EntityId, KnowledgeGraph, Query, RelationId};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const SEP: TokenId = 4;
pub const LB: TokenId = 5;
pub const RB: TokenId = 6;
pub const P1: TokenId = 7;
pub const P2: TokenId = 8;
pub const P3: TokenId = 9;
pub const P4: TokenId = 10;

/// Surface forms of the reserved tokens, in id order.
pub const RESERVED_SURFACES: [&str; 11] = [
    "<pad>", "<bos>", "<eos>", "<mask>", "|", "[", "]", "<p1>", "<p2>", "<p3>", "<p4>",
];
pub const N_RESERVED: usize = RESERVED_SURFACES.len();

/// Index of a prompt placeholder within its relation's prompt block.
pub fn prompt_slot(id: TokenId) -> Option<usize> {
    (P1..=P4).contains(&id).then(|| (id - P1) as usize)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn with_reserved() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in RESERVED_SURFACES {
            v.push(s);
        }
        v
    }

    fn push(&mut self, tok: &str) -> TokenId {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        id
    }

    /// Reserved tokens, then every token of names, truncated descriptions,
    /// relation names and meta text in first-occurrence order.
    pub fn build(graph: &KnowledgeGraph, desc_len: usize) -> Self {
        let mut v = Self::with_reserved();
        for e in &graph.entities {
            e.name.split_whitespace().for_each(|t| {
                v.push(t);
            });
            e.description
                .split_whitespace()
                .take(desc_len)
                .for_each(|t| {
                    v.push(t);
                });
        }
        for r in &graph.relations {
            r.name.split_whitespace().for_each(|t| {
                v.push(t);
            });
        }
        for split in crate::kg::Split::ALL {
            for f in graph.split(split) {
                if let Some(m) = f.meta.text() {
                    m.split_whitespace().for_each(|t| {
                        v.push(t);
                    });
                }
            }
        }
        v
    }

    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(|s| s.as_ref().to_string()).collect();
        if tokens.len() < N_RESERVED || tokens[..N_RESERVED] != RESERVED_SURFACES {
            return Err(Error::Malformed {
                file: "vocab.txt".into(),
                line: 1,
                message: "vocabulary must start with the reserved tokens".into(),
            });
        }
        let mut v = Self::with_reserved();
        for (i, t) in tokens.iter().enumerate().skip(N_RESERVED) {
            if t.is_empty() || t.contains(char::is_whitespace) || v.index.contains_key(t) {
                return Err(Error::Malformed {
                    file: "vocab.txt".into(),
                    line: i + 1,
                    message: format!("bad or duplicate token {t:?}"),
                });
            }
            v.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<TokenId> {
        self.index.get(tok).copied()
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.surface(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `vocab.txt` contents: one token per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines())
    }
}

/// Token ids with a parallel attention mask (`true` = attend).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        let mask = vec![true; ids.len()];
        TokenSeq { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerbalizedQuery {
    pub tokens: TokenSeq,
    pub rel: RelationId,
    /// Positions eligible for seq2seq dropout.
    pub maskable: Vec<bool>,
}

/// Pre-tokenized graph text plus the verbalization rules.
#[derive(Clone, Debug)]
pub struct Codec {
    vocab: Vocab,
    names: Vec<Vec<TokenId>>,
    descs: Vec<Vec<TokenId>>,
    relations: Vec<Vec<TokenId>>,
    desc_len: usize,
    max_len: usize,
}

impl Codec {
    pub fn new(graph: &KnowledgeGraph, vocab: Vocab, desc_len: usize, max_len: usize) -> Result<Self> {
        let mut names = Vec::with_capacity(graph.entities.len());
        let mut descs = Vec::with_capacity(graph.entities.len());
        for e in &graph.entities {
            names.push(vocab.tokenize(&e.name)?);
            let desc: Vec<&str> = e.description.split_whitespace().take(desc_len).collect();
            descs.push(vocab.tokenize(&desc.join(" "))?);
        }
        let relations = graph
            .relations
            .iter()
            .map(|r| vocab.tokenize(&r.name))
            .collect::<Result<_>>()?;
        Ok(Codec {
            vocab,
            names,
            descs,
            relations,
            desc_len,
            max_len,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn desc_len(&self) -> usize {
        self.desc_len
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn name_tokens(&self, e: EntityId) -> &[TokenId] {
        &self.names[e.index()]
    }

    pub fn n_entities(&self) -> usize {
        self.names.len()
    }

    pub fn max_entity_name_len(&self) -> usize {
        self.names.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn push_entity_block(&self, e: EntityId, out: &mut Vec<TokenId>, maskable: &mut Vec<bool>) {
        let mut put = |id, m| {
            out.push(id);
            maskable.push(m);
        };
        put(P1, false);
        for &t in &self.names[e.index()] {
            put(t, true);
        }
        let desc = &self.descs[e.index()];
        if !desc.is_empty() {
            put(LB, false);
            for &t in desc {
                put(t, true);
            }
            put(RB, false);
        }
        put(P2, false);
    }

    pub fn verbalize_query(&self, query: &Query) -> Result<VerbalizedQuery> {
        let mut ids = vec![BOS];
        let mut maskable = vec![false];
        let relation_block = |ids: &mut Vec<TokenId>, maskable: &mut Vec<bool>| {
            ids.push(P3);
            maskable.push(false);
            for &t in &self.relations[query.rel.index()] {
                ids.push(t);
                maskable.push(true);
            }
            ids.push(P4);
            maskable.push(false);
        };
        let sep = |ids: &mut Vec<TokenId>, maskable: &mut Vec<bool>, tok| {
            ids.push(tok);
            maskable.push(false);
        };
        match query.direction {
            Direction::Tail => {
                self.push_entity_block(query.known, &mut ids, &mut maskable);
                sep(&mut ids, &mut maskable, SEP);
                relation_block(&mut ids, &mut maskable);
                sep(&mut ids, &mut maskable, SEP);
                sep(&mut ids, &mut maskable, MASK);
            }
            Direction::Head => {
                sep(&mut ids, &mut maskable, MASK);
                sep(&mut ids, &mut maskable, SEP);
                relation_block(&mut ids, &mut maskable);
                sep(&mut ids, &mut maskable, SEP);
                self.push_entity_block(query.known, &mut ids, &mut maskable);
            }
        }
        if let Some(meta) = query.meta.text() {
            sep(&mut ids, &mut maskable, SEP);
            for t in self.vocab.tokenize(meta)? {
                ids.push(t);
                maskable.push(true);
            }
        }
        sep(&mut ids, &mut maskable, EOS);
        if ids.len() > self.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max_len: self.max_len,
            });
        }
        Ok(VerbalizedQuery {
            tokens: TokenSeq::new(ids),
            rel: query.rel,
            maskable,
        })
    }

    pub fn verbalize_answer(&self, e: EntityId) -> TokenSeq {
        let mut ids = vec![BOS, MASK];
        ids.extend_from_slice(&self.names[e.index()]);
        let desc = &self.descs[e.index()];
        if !desc.is_empty() {
            ids.push(LB);
            ids.extend_from_slice(desc);
            ids.push(RB);
        }
        ids.push(EOS);
        TokenSeq::new(ids)
    }
}

/// Recover the entity name from generated text: wrapper tokens are removed
/// and everything from the first `[` onward is dropped.
pub fn parse_prediction(vocab: &Vocab, ids: &[TokenId]) -> Option<String> {
    let name: Vec<TokenId> = ids
        .iter()
        .copied()
        .take_while(|&t| t != LB)
        .filter(|&t| !matches!(t, BOS | MASK | EOS | PAD))
        .collect();
    if name.is_empty() {
        None
    } else {
        Some(vocab.detokenize(&name))
    }
}

/// Longest entity name, in whitespace tokens.
pub fn max_entity_name_len(graph: &KnowledgeGraph) -> usize {
    graph
        .entities
        .iter()
        .map(|e| e.name.split_whitespace().count())
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Entity, Fact, Meta, MetaKind, Relation};

    fn graph(entities: &[(&str, &str)], relations: &[&str]) -> KnowledgeGraph {
        KnowledgeGraph {
            entities: entities
                .iter()
                .enumerate()
                .map(|(i, (n, d))| Entity {
                    id: EntityId(i as u32),
                    raw_id: format!("e{i}"),
                    name: n.to_string(),
                    description: d.to_string(),
                })
                .collect(),
            relations: relations
                .iter()
                .enumerate()
                .map(|(i, n)| Relation {
                    id: RelationId(i as u32),
                    raw_id: format!("r{i}"),
                    name: n.to_string(),
                })
                .collect(),
            ..Default::default()
        }
    }

    fn lebron() -> KnowledgeGraph {
        graph(
            &[
                ("LeBron James", "is an American NBA star"),
                ("Lakers", "an NBA team"),
                ("Stan Lee", ""),
            ],
            &["is the winner of"],
        )
    }

    fn render(codec: &Codec, ids: &[TokenId]) -> String {
        codec.vocab().detokenize(ids)
    }

    #[test]
    fn vocab_layout() {
        let g = graph(&[("A B", "")], &[]);
        let v = Vocab::build(&g, 10);
        assert_eq!(v.len(), N_RESERVED + 2);
        assert_eq!(v.id("A"), Some(11));
        assert_eq!(v.id("B"), Some(12));
        for (i, s) in RESERVED_SURFACES.iter().enumerate() {
            assert_eq!(v.id(s), Some(i as TokenId));
        }
        assert_eq!(v, Vocab::build(&g, 10));
        assert_eq!(Vocab::from_tokens(v.tokens()).unwrap(), v);
    }

    #[test]
    fn desc_len_zero_skips_descriptions() {
        let g = graph(&[("A", "x y A")], &[]);
        let v = Vocab::build(&g, 0);
        assert_eq!(v.len(), N_RESERVED + 1);
        assert!(v.id("x").is_none());
        assert_eq!(Vocab::build(&g, 1).len(), N_RESERVED + 2);
    }

    #[test]
    fn tokenize_whitespace() {
        let g = graph(&[("Grammy Award", ""), ("x y", "")], &[]);
        let v = Vocab::build(&g, 0);
        assert_eq!(v.tokenize("Grammy Award").unwrap(), vec![11, 12]);
        assert!(v.tokenize("").unwrap().is_empty());
        assert_eq!(v.tokenize("x  y").unwrap(), v.tokenize("x y").unwrap());
        assert!(matches!(v.tokenize("Oscar"), Err(Error::UnknownToken(t)) if t == "Oscar"));
    }

    #[test]
    fn tail_query_layout() {
        let g = lebron();
        let codec = Codec::new(&g, Vocab::build(&g, 40), 40, 64).unwrap();
        let q = Query {
            direction: Direction::Tail,
            known: EntityId(0),
            rel: RelationId(0),
            meta: Meta::None,
        };
        let vq = codec.verbalize_query(&q).unwrap();
        assert_eq!(
            render(&codec, &vq.tokens.ids),
            "<bos> <p1> LeBron James [ is an American NBA star ] <p2> | <p3> is the winner of <p4> | <mask> <eos>"
        );

        let short = Codec::new(&g, Vocab::build(&g, 0), 0, 64).unwrap();
        let vq = short.verbalize_query(&q).unwrap();
        assert_eq!(
            render(&short, &vq.tokens.ids),
            "<bos> <p1> LeBron James <p2> | <p3> is the winner of <p4> | <mask> <eos>"
        );
    }

    #[test]
    fn temporal_query_layout() {
        let mut g = lebron();
        g.meta_kind = MetaKind::Timestamp;
        g.train.push(Fact {
            head: EntityId(0),
            rel: RelationId(0),
            tail: EntityId(1),
            meta: Meta::Timestamp("Jun-19-2014".into()),
        });
        let codec = Codec::new(&g, Vocab::build(&g, 0), 0, 64).unwrap();
        let tail = codec.verbalize_query(&g.train[0].query(Direction::Tail)).unwrap();
        assert!(render(&codec, &tail.tokens.ids).ends_with("| <mask> | Jun-19-2014 <eos>"));
        let head = codec.verbalize_query(&g.train[0].query(Direction::Head)).unwrap();
        assert_eq!(
            render(&codec, &head.tokens.ids),
            "<bos> <mask> | <p3> is the winner of <p4> | <p1> Lakers <p2> | Jun-19-2014 <eos>"
        );
    }

    #[test]
    fn too_long_query_errors() {
        let g = lebron();
        let codec = Codec::new(&g, Vocab::build(&g, 40), 40, 10).unwrap();
        let q = Query {
            direction: Direction::Tail,
            known: EntityId(0),
            rel: RelationId(0),
            meta: Meta::None,
        };
        assert!(matches!(
            codec.verbalize_query(&q),
            Err(Error::SequenceTooLong { max_len: 10, .. })
        ));
    }

    #[test]
    fn answers_and_parsing() {
        let g = lebron();
        let codec = Codec::new(&g, Vocab::build(&g, 40), 40, 64).unwrap();
        let a = codec.verbalize_answer(EntityId(1));
        assert_eq!(render(&codec, &a.ids), "<bos> <mask> Lakers [ an NBA team ] <eos>");
        assert_eq!(parse_prediction(codec.vocab(), &a.ids).as_deref(), Some("Lakers"));
        let b = codec.verbalize_answer(EntityId(2));
        assert_eq!(render(&codec, &b.ids), "<bos> <mask> Stan Lee <eos>");
        assert_eq!(parse_prediction(codec.vocab(), &b.ids).as_deref(), Some("Stan Lee"));
        assert_eq!(parse_prediction(codec.vocab(), &[BOS, MASK, EOS]), None);

        let one = Codec::new(&g, Vocab::build(&g, 1), 1, 64).unwrap();
        assert_eq!(
            render(&one, &one.verbalize_answer(EntityId(1)).ids),
            "<bos> <mask> Lakers [ an ] <eos>"
        );
    }

    #[test]
    fn name_lengths() {
        let g = graph(&[("A", ""), ("A B C", "")], &[]);
        assert_eq!(max_entity_name_len(&g), 3);
        assert_eq!(max_entity_name_len(&graph(&[("X", "")], &[])), 1);
        let codec = Codec::new(&g, Vocab::build(&g, 0), 0, 8).unwrap();
        assert_eq!(codec.max_entity_name_len(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn word() -> impl Strategy<Value = String> {
            "[A-Za-z]{1,4}"
        }

        fn phrase(min: usize, max: usize) -> impl Strategy<Value = String> {
            proptest::collection::vec(word(), min..=max).prop_map(|w| w.join(" "))
        }

        fn arb_graph() -> impl Strategy<Value = KnowledgeGraph> {
            (
                proptest::collection::vec((phrase(1, 4), phrase(0, 5)), 2..6),
                proptest::collection::vec(phrase(1, 3), 1..3),
            )
                .prop_map(|(ents, rels)| {
                    let ents: Vec<(&str, &str)> =
                        ents.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
                    let rels: Vec<&str> = rels.iter().map(String::as_str).collect();
                    graph(&ents, &rels)
                })
        }

        proptest! {
            #[test]
            fn answer_round_trip(g in arb_graph(), desc_len in 0usize..6) {
                let codec = Codec::new(&g, Vocab::build(&g, desc_len), desc_len, 128).unwrap();
                for e in &g.entities {
                    let a = codec.verbalize_answer(e.id);
                    prop_assert_eq!(parse_prediction(codec.vocab(), &a.ids), Some(e.name.clone()));
                }
            }

            #[test]
            fn special_positions_never_maskable(g in arb_graph(), desc_len in 0usize..6) {
                let codec = Codec::new(&g, Vocab::build(&g, desc_len), desc_len, 128).unwrap();
                for e in &g.entities {
                    for direction in [Direction::Head, Direction::Tail] {
                        let q = Query { direction, known: e.id, rel: RelationId(0), meta: Meta::None };
                        let vq = codec.verbalize_query(&q).unwrap();
                        prop_assert_eq!(vq.maskable.len(), vq.tokens.len());
                        for (&id, &m) in vq.tokens.ids.iter().zip(&vq.maskable) {
                            if matches!(id, MASK | SEP | P1 | P2 | P3 | P4 | BOS | EOS | LB | RB) {
                                prop_assert!(!m);
                            } else {
                                prop_assert!(m);
                            }
                        }
                    }
                }
            }

            #[test]
            fn head_and_tail_queries_share_blocks(g in arb_graph()) {
                let codec = Codec::new(&g, Vocab::build(&g, 3), 3, 128).unwrap();
                let q = Query { direction: Direction::Tail, known: EntityId(0), rel: RelationId(0), meta: Meta::None };
                let tail = codec.verbalize_query(&q).unwrap().tokens.ids;
                let head = codec.verbalize_query(&Query { direction: Direction::Head, ..q }).unwrap().tokens.ids;
                let p2 = tail.iter().position(|&t| t == P2).unwrap();
                let entity = &tail[1..=p2];
                let p3 = tail.iter().position(|&t| t == P3).unwrap();
                let p4 = tail.iter().position(|&t| t == P4).unwrap();
                let relation = &tail[p3..=p4];
                let expect_tail = [&[BOS][..], entity, &[SEP], relation, &[SEP, MASK, EOS]].concat();
                let expect_head = [&[BOS, MASK, SEP][..], relation, &[SEP], entity, &[EOS]].concat();
                prop_assert_eq!(tail, expect_tail);
                prop_assert_eq!(head, expect_head);
            }

            #[test]
            fn max_name_len_matches_brute_force(g in arb_graph()) {
                let brute = g.entities.iter().map(|e| e.name.split(' ').filter(|w| !w.is_empty()).count()).fold(0, usize::max);
                prop_assert_eq!(max_entity_name_len(&g), brute);
            }
        }
    }
}
