//! Knowledge-graph loading, validation and preprocessing.
//!
//! A graph directory holds five tab-separated files: `entities.tsv`,
//! `relations.tsv`, `train.tsv`, `valid.tsv` and `test.tsv`. Raw ids in the
//! files are arbitrary strings; dense [`EntityId`]s and [`RelationId`]s are
//! assigned in file line order.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::codec::RESERVED_SURFACES;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: EntityId,
    /// Identifier as written in `entities.tsv`.
    pub raw_id: String,
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    pub id: RelationId,
    pub raw_id: String,
    pub name: String,
}

/// Meta-information attached to a fact.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Meta {
    None,
    Timestamp(String),
    Typing(String),
}

impl Meta {
    pub fn text(&self) -> Option<&str> {
        match self {
            Meta::None => None,
            Meta::Timestamp(t) | Meta::Typing(t) => Some(t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MetaKind {
    #[default]
    None,
    Timestamp,
    Typing,
}

impl MetaKind {
    pub fn wrap(self, text: &str) -> Meta {
        match self {
            MetaKind::None => Meta::None,
            MetaKind::Timestamp => Meta::Timestamp(text.to_string()),
            MetaKind::Typing => Meta::Typing(text.to_string()),
        }
    }
}

impl FromStr for MetaKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(MetaKind::None),
            "timestamp" => Ok(MetaKind::Timestamp),
            "typing" => Ok(MetaKind::Typing),
            other => Err(format!("unknown meta kind {other:?}")),
        }
    }
}

impl fmt::Display for MetaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaKind::None => "none",
            MetaKind::Timestamp => "timestamp",
            MetaKind::Typing => "typing",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Fact {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
    pub meta: Meta,
}

/// Which side of a fact is being predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// `(?, r, t, m)`
    Head,
    /// `(h, r, ?, m)`
    Tail,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Head => "head",
            Direction::Tail => "tail",
        })
    }
}

/// A completion query: one side of a fact replaced by `?`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Query {
    pub direction: Direction,
    pub known: EntityId,
    pub rel: RelationId,
    pub meta: Meta,
}

impl Fact {
    pub fn query(&self, direction: Direction) -> Query {
        let known = match direction {
            Direction::Tail => self.head,
            Direction::Head => self.tail,
        };
        Query {
            direction,
            known,
            rel: self.rel,
            meta: self.meta.clone(),
        }
    }

    pub fn answer(&self, direction: Direction) -> EntityId {
        match direction {
            Direction::Tail => self.tail,
            Direction::Head => self.head,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Valid => "valid.tsv",
            Split::Test => "test.tsv",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub train: Vec<Fact>,
    pub valid: Vec<Fact>,
    pub test: Vec<Fact>,
    pub meta_kind: MetaKind,
}

impl KnowledgeGraph {
    pub fn split(&self, split: Split) -> &[Fact] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Fact> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id.index()]
    }

    pub fn relation(&self, id: RelationId) -> &Relation {
        &self.relations[id.index()]
    }

    pub fn entity_by_raw_id(&self, raw: &str) -> Option<EntityId> {
        self.entities.iter().find(|e| e.raw_id == raw).map(|e| e.id)
    }

    pub fn relation_by_raw_id(&self, raw: &str) -> Option<RelationId> {
        self.relations.iter().find(|r| r.raw_id == raw).map(|r| r.id)
    }

    /// Groups of entities whose names tokenize identically.
    pub fn name_collisions(&self) -> Vec<(String, Vec<EntityId>)> {
        let mut by_name: BTreeMap<String, Vec<EntityId>> = BTreeMap::new();
        for e in &self.entities {
            let key = e.name.split_whitespace().collect::<Vec<_>>().join(" ");
            by_name.entry(key).or_default().push(e.id);
        }
        by_name.into_iter().filter(|(_, ids)| ids.len() > 1).collect()
    }

    /// Re-check the structural invariants of an in-memory graph.
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entities.iter().enumerate() {
            if e.id.index() != i {
                return Err(malformed("entities", i + 1, "entity ids are not contiguous"));
            }
            check_text("entities", i + 1, &e.name, true)?;
            check_text("entities", i + 1, &e.description, false)?;
        }
        for (i, r) in self.relations.iter().enumerate() {
            if r.id.index() != i {
                return Err(malformed("relations", i + 1, "relation ids are not contiguous"));
            }
            check_text("relations", i + 1, &r.name, true)?;
        }
        for split in Split::ALL {
            let mut seen = HashSet::new();
            for (i, f) in self.split(split).iter().enumerate() {
                let file = split.file_name();
                for id in [f.head, f.tail] {
                    if id.index() >= self.entities.len() {
                        return Err(Error::UnknownEntity {
                            file: file.into(),
                            line: i + 1,
                            id: id.0.to_string(),
                        });
                    }
                }
                if f.rel.index() >= self.relations.len() {
                    return Err(Error::UnknownRelation {
                        file: file.into(),
                        line: i + 1,
                        id: f.rel.0.to_string(),
                    });
                }
                if !seen.insert(f) {
                    return Err(Error::DuplicateFact {
                        file: file.into(),
                        line: i + 1,
                    });
                }
            }
        }
        Ok(())
    }
}

fn malformed(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn check_text(file: &str, line: usize, text: &str, required: bool) -> Result<()> {
    if required && text.split_whitespace().next().is_none() {
        return Err(malformed(file, line, "empty name"));
    }
    if let Some(tok) = text
        .split_whitespace()
        .find(|tok| RESERVED_SURFACES.contains(tok))
    {
        return Err(malformed(
            file,
            line,
            format!("text contains reserved token {tok:?}"),
        ));
    }
    Ok(())
}

fn read_lines(dir: &Path, name: &str) -> Result<Vec<(usize, String)>> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .collect())
}

fn fields<'a>(file: &str, line: usize, text: &'a str, expected: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = text.split('\t').collect();
    if parts.len() != expected {
        return Err(Error::FieldCount {
            file: file.to_string(),
            line,
            expected,
            found: parts.len(),
        });
    }
    Ok(parts)
}

/// Load and validate a graph directory.
pub fn load_graph(dir: impl AsRef<Path>, meta_kind: MetaKind) -> Result<KnowledgeGraph> {
    let dir = dir.as_ref();
    let mut graph = KnowledgeGraph {
        meta_kind,
        ..Default::default()
    };

    let mut entity_ids: HashMap<String, EntityId> = HashMap::new();
    for (line, text) in read_lines(dir, "entities.tsv")? {
        let f = fields("entities.tsv", line, &text, 3)?;
        check_text("entities.tsv", line, f[1], true)?;
        check_text("entities.tsv", line, f[2], false)?;
        let id = EntityId(graph.entities.len() as u32);
        if entity_ids.insert(f[0].to_string(), id).is_some() {
            return Err(Error::DuplicateId {
                file: "entities.tsv".into(),
                line,
                id: f[0].to_string(),
            });
        }
        graph.entities.push(Entity {
            id,
            raw_id: f[0].to_string(),
            name: f[1].to_string(),
            description: f[2].to_string(),
        });
    }

    let mut relation_ids: HashMap<String, RelationId> = HashMap::new();
    for (line, text) in read_lines(dir, "relations.tsv")? {
        let f = fields("relations.tsv", line, &text, 2)?;
        check_text("relations.tsv", line, f[1], true)?;
        let id = RelationId(graph.relations.len() as u32);
        if relation_ids.insert(f[0].to_string(), id).is_some() {
            return Err(Error::DuplicateId {
                file: "relations.tsv".into(),
                line,
                id: f[0].to_string(),
            });
        }
        graph.relations.push(Relation {
            id,
            raw_id: f[0].to_string(),
            name: f[1].to_string(),
        });
    }

    let n_fields = if meta_kind == MetaKind::None { 3 } else { 4 };
    for split in Split::ALL {
        let file = split.file_name();
        let mut seen = HashSet::new();
        let mut facts = Vec::new();
        for (line, text) in read_lines(dir, file)? {
            let f = fields(file, line, &text, n_fields)?;
            let entity = |raw: &str| {
                entity_ids
                    .get(raw)
                    .copied()
                    .ok_or_else(|| Error::UnknownEntity {
                        file: file.into(),
                        line,
                        id: raw.to_string(),
                    })
            };
            let head = entity(f[0])?;
            let tail = entity(f[2])?;
            let rel = relation_ids
                .get(f[1])
                .copied()
                .ok_or_else(|| Error::UnknownRelation {
                    file: file.into(),
                    line,
                    id: f[1].to_string(),
                })?;
            let meta = if n_fields == 4 {
                check_text(file, line, f[3], true)?;
                meta_kind.wrap(f[3])
            } else {
                Meta::None
            };
            let fact = Fact {
                head,
                rel,
                tail,
                meta,
            };
            if !seen.insert(fact.clone()) {
                return Err(Error::DuplicateFact {
                    file: file.into(),
                    line,
                });
            }
            facts.push(fact);
        }
        *graph.split_mut(split) = facts;
    }
    Ok(graph)
}

/// Write a graph back out in the on-disk layout read by [`load_graph`].
pub fn write_graph(graph: &KnowledgeGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    let mut ents = String::new();
    for e in &graph.entities {
        ents.push_str(&format!("{}\t{}\t{}\n", e.raw_id, e.name, e.description));
    }
    write("entities.tsv", ents)?;
    let mut rels = String::new();
    for r in &graph.relations {
        rels.push_str(&format!("{}\t{}\n", r.raw_id, r.name));
    }
    write("relations.tsv", rels)?;
    for split in Split::ALL {
        let mut body = String::new();
        for f in graph.split(split) {
            body.push_str(&graph.entity(f.head).raw_id);
            body.push('\t');
            body.push_str(&graph.relation(f.rel).raw_id);
            body.push('\t');
            body.push_str(&graph.entity(f.tail).raw_id);
            if let Some(m) = f.meta.text() {
                body.push('\t');
                body.push_str(m);
            }
            body.push('\n');
        }
        write(split.file_name(), body)?;
    }
    Ok(())
}

/// Description for an ICEWS actor: non-empty fields joined by `", "`.
pub fn build_icews_descriptions(sector: &str, country: &str) -> String {
    [sector.trim(), country.trim()]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(", ")
}

/// Upper-case the leading letter of every word; words that start with a
/// digit or symbol are left alone.
pub fn reformat_nell_name(raw: &str) -> String {
    raw.split(' ')
        .map(|word| {
            let mut chars = word.chars();
            match chars.next() {
                Some(c) if c.is_alphabetic() => c.to_uppercase().chain(chars).collect(),
                _ => word.to_string(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Relations that occur in train and also in valid or test. Empty means the
/// split is a valid zero-shot split.
pub fn validate_zero_shot_split(graph: &KnowledgeGraph) -> BTreeSet<RelationId> {
    let train: HashSet<RelationId> = graph.train.iter().map(|f| f.rel).collect();
    graph
        .valid
        .iter()
        .chain(&graph.test)
        .map(|f| f.rel)
        .filter(|r| train.contains(r))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryKey {
    pub direction: Direction,
    pub known: EntityId,
    pub rel: RelationId,
    pub meta: Meta,
}

impl From<&Query> for QueryKey {
    fn from(q: &Query) -> Self {
        QueryKey {
            direction: q.direction,
            known: q.known,
            rel: q.rel,
            meta: q.meta.clone(),
        }
    }
}

/// All known answers per query, over a chosen union of splits.
#[derive(Clone, Debug, Default)]
pub struct KnownTrueIndex {
    answers: HashMap<QueryKey, BTreeSet<EntityId>>,
}

static EMPTY: BTreeSet<EntityId> = BTreeSet::new();

impl KnownTrueIndex {
    pub fn build(graph: &KnowledgeGraph, splits: &[Split]) -> Self {
        let mut answers: HashMap<QueryKey, BTreeSet<EntityId>> = HashMap::new();
        let mut used = BTreeSet::new();
        for &split in splits {
            if !used.insert(split) {
                continue;
            }
            for fact in graph.split(split) {
                for dir in [Direction::Tail, Direction::Head] {
                    let key = QueryKey::from(&fact.query(dir));
                    answers.entry(key).or_default().insert(fact.answer(dir));
                }
            }
        }
        KnownTrueIndex { answers }
    }

    pub fn get(&self, query: &Query) -> &BTreeSet<EntityId> {
        self.answers.get(&QueryKey::from(query)).unwrap_or(&EMPTY)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// Shorthand for the free-function form.
pub fn build_known_true_index(graph: &KnowledgeGraph, splits: &[Split]) -> KnownTrueIndex {
    KnownTrueIndex::build(graph, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn tiny_dir(train: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "entities.tsv", "e0\tLeBron James\tis an American NBA star\ne1\tLakers\t\n");
        write(dir.path(), "relations.tsv", "r0\tplays for\n");
        write(dir.path(), "train.tsv", train);
        write(dir.path(), "valid.tsv", "");
        write(dir.path(), "test.tsv", "");
        dir
    }

    #[test]
    fn loads_minimal_graph() {
        let dir = tiny_dir("e0\tr0\te1\n");
        let g = load_graph(dir.path(), MetaKind::None).unwrap();
        assert_eq!(g.entities.len(), 2);
        assert_eq!(g.relations.len(), 1);
        assert_eq!(g.train.len(), 1);
        assert_eq!(g.entities[1].description, "");
        assert_eq!(g.train[0].tail, EntityId(1));
    }

    #[test]
    fn unknown_entity_is_rejected() {
        let dir = tiny_dir("e0\tr0\te9\n");
        let err = load_graph(dir.path(), MetaKind::None).unwrap_err();
        assert!(matches!(err, Error::UnknownEntity { ref id, .. } if id == "e9"));
        assert!(err.to_string().contains("unknown entity"));
    }

    #[test]
    fn wrong_field_count_and_duplicates() {
        let dir = tiny_dir("e0\tr0\n");
        assert!(matches!(
            load_graph(dir.path(), MetaKind::None),
            Err(Error::FieldCount { found: 2, .. })
        ));
        let dir = tiny_dir("e0\tr0\te1\ne0\tr0\te1\n");
        assert!(matches!(
            load_graph(dir.path(), MetaKind::None),
            Err(Error::DuplicateFact { line: 2, .. })
        ));
        let dir = tiny_dir("");
        write(dir.path(), "entities.tsv", "e0\tA\t\ne0\tB\t\n");
        assert!(matches!(
            load_graph(dir.path(), MetaKind::None),
            Err(Error::DuplicateId { .. })
        ));
        let dir = tiny_dir("");
        fs::remove_file(dir.path().join("test.tsv")).unwrap();
        assert!(matches!(
            load_graph(dir.path(), MetaKind::None),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn temporal_facts_carry_timestamps() {
        let dir = tiny_dir("e0\tr0\te1\tJun-19-2014\ne1\tr0\te0\tJun-20-2014\n");
        let g = load_graph(dir.path(), MetaKind::Timestamp).unwrap();
        assert!(g
            .train
            .iter()
            .all(|f| matches!(f.meta, Meta::Timestamp(_))));
        assert_eq!(g.train[0].meta, Meta::Timestamp("Jun-19-2014".into()));
        // the same directory read without meta has the wrong field count
        assert!(load_graph(dir.path(), MetaKind::None).is_err());
    }

    #[test]
    fn reserved_surface_in_name_is_rejected() {
        let dir = tiny_dir("");
        write(dir.path(), "entities.tsv", "e0\tA | B\t\n");
        assert!(matches!(
            load_graph(dir.path(), MetaKind::None),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tiny_dir("e0\tr0\te1\ne1\tr0\te0\n");
        let a = load_graph(dir.path(), MetaKind::None).unwrap();
        let b = load_graph(dir.path(), MetaKind::None).unwrap();
        assert_eq!(a, b);
        let out = tempfile::tempdir().unwrap();
        write_graph(&a, out.path()).unwrap();
        assert_eq!(load_graph(out.path(), MetaKind::None).unwrap(), a);
    }

    #[test]
    fn icews_descriptions() {
        assert_eq!(build_icews_descriptions("Government", "Austria"), "Government, Austria");
        assert_eq!(build_icews_descriptions("", "France"), "France");
        assert_eq!(build_icews_descriptions("Police", ""), "Police");
        assert_eq!(build_icews_descriptions("", ""), "");
    }

    #[test]
    fn nell_names() {
        assert_eq!(reformat_nell_name("michael jordan"), "Michael Jordan");
        assert_eq!(reformat_nell_name("Already Capital"), "Already Capital");
        assert_eq!(reformat_nell_name("4th quarter"), "4th Quarter");
        assert_eq!(reformat_nell_name(""), "");
    }

    fn facts(rels: &[u32]) -> Vec<Fact> {
        rels.iter()
            .enumerate()
            .map(|(i, &r)| Fact {
                head: EntityId(i as u32),
                rel: RelationId(r),
                tail: EntityId(i as u32 + 1),
                meta: Meta::None,
            })
            .collect()
    }

    #[test]
    fn zero_shot_validation() {
        let mut g = KnowledgeGraph {
            train: facts(&[0, 1]),
            test: facts(&[2]),
            ..Default::default()
        };
        assert!(validate_zero_shot_split(&g).is_empty());
        g.test = facts(&[1]);
        assert_eq!(validate_zero_shot_split(&g), BTreeSet::from([RelationId(1)]));
        g.test.clear();
        assert!(validate_zero_shot_split(&g).is_empty());
    }

    #[test]
    fn known_true_index() {
        let mut g = KnowledgeGraph {
            train: vec![Fact {
                head: EntityId(0),
                rel: RelationId(0),
                tail: EntityId(1),
                meta: Meta::None,
            }],
            ..Default::default()
        };
        let idx = KnownTrueIndex::build(&g, &[Split::Train]);
        let tail_q = g.train[0].query(Direction::Tail);
        let head_q = g.train[0].query(Direction::Head);
        assert_eq!(idx.get(&tail_q), &BTreeSet::from([EntityId(1)]));
        assert_eq!(idx.get(&head_q), &BTreeSet::from([EntityId(0)]));

        g.train.push(Fact {
            head: EntityId(0),
            rel: RelationId(0),
            tail: EntityId(2),
            meta: Meta::None,
        });
        let idx = KnownTrueIndex::build(&g, &[Split::Train]);
        assert_eq!(idx.get(&tail_q), &BTreeSet::from([EntityId(1), EntityId(2)]));

        let unseen = Query {
            direction: Direction::Tail,
            known: EntityId(7),
            rel: RelationId(0),
            meta: Meta::None,
        };
        assert!(idx.get(&unseen).is_empty());
        // meta is part of the key
        let timed = Query {
            meta: Meta::Timestamp("x".into()),
            ..tail_q
        };
        assert!(idx.get(&timed).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn index_covers_every_fact(raw in proptest::collection::btree_set((0u32..8, 0u32..3, 0u32..8), 0..40)) {
                let train: Vec<Fact> = raw.iter().map(|&(h, r, t)| Fact {
                    head: EntityId(h), rel: RelationId(r), tail: EntityId(t), meta: Meta::None,
                }).collect();
                let g = KnowledgeGraph { train, ..Default::default() };
                let idx = KnownTrueIndex::build(&g, &[Split::Train]);
                for f in &g.train {
                    prop_assert!(idx.get(&f.query(Direction::Tail)).contains(&f.tail));
                    prop_assert!(idx.get(&f.query(Direction::Head)).contains(&f.head));
                }
                // and nothing extra: brute-force the answer sets
                for f in &g.train {
                    let q = f.query(Direction::Tail);
                    let expect: BTreeSet<EntityId> = g.train.iter()
                        .filter(|o| o.head == f.head && o.rel == f.rel)
                        .map(|o| o.tail).collect();
                    prop_assert_eq!(idx.get(&q), &expect);
                }
            }

            #[test]
            fn zero_shot_matches_brute_force(train in proptest::collection::vec(0u32..5, 0..8),
                                             test in proptest::collection::vec(0u32..5, 0..8)) {
                let g = KnowledgeGraph { train: facts(&train), test: facts(&test), ..Default::default() };
                let violations = validate_zero_shot_split(&g);
                let disjoint = !train.iter().any(|r| test.contains(r));
                prop_assert_eq!(violations.is_empty(), disjoint);
            }

            #[test]
            fn preprocessors_are_idempotent(a in "[a-z0-9 ]{0,20}", b in "[A-Za-z ]{0,12}") {
                let n = reformat_nell_name(&a);
                prop_assert_eq!(reformat_nell_name(&n), n.clone());
                let d = build_icews_descriptions(&a, &b);
                prop_assert_eq!(build_icews_descriptions(&d, ""), d.clone());
            }
        }
    }
}
