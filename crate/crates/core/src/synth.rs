//! Seeded synthetic graphs for end-to-end runs.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{Entity, EntityId, Fact, KnowledgeGraph, Meta, MetaKind, Relation, RelationId};

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "ze", "bo", "da", "fi", "gu", "ho", "je",
];

/// `n` distinct pseudo-words of two syllables.
fn words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut all: Vec<String> = SYLLABLES
        .iter()
        .flat_map(|a| SYLLABLES.iter().map(move |b| format!("{a}{b}")))
        .collect();
    all.shuffle(rng);
    assert!(n <= all.len());
    all.truncate(n);
    all
}

fn phrase(pool: &[String], len: usize, rng: &mut ChaCha8Rng) -> String {
    (0..len).map(|_| pool.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
}

fn relation(i: usize, name: &str) -> Relation {
    Relation {
        id: RelationId(i as u32),
        raw_id: format!("r{i}"),
        name: name.to_string(),
    }
}

fn fact(h: usize, r: usize, t: usize) -> Fact {
    Fact {
        head: EntityId(h as u32),
        rel: RelationId(r as u32),
        tail: EntityId(t as u32),
        meta: Meta::None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorizationSpec {
    pub entities: usize,
    pub relations: usize,
    pub facts: usize,
    /// Name and description lengths are drawn from this inclusive range.
    pub min_len: usize,
    pub max_len: usize,
    /// Leading train facts copied into the valid split.
    pub valid: usize,
    pub seed: u64,
}

impl Default for MemorizationSpec {
    fn default() -> Self {
        MemorizationSpec {
            entities: 50,
            relations: 5,
            facts: 200,
            min_len: 3,
            max_len: 8,
            valid: 20,
            seed: 0,
        }
    }
}

/// Random distinct facts over entities with unique multi-word names. The
/// valid split repeats train facts, so selection tracks memorization.
pub fn memorization_graph(spec: &MemorizationSpec) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pool = words(40, &mut rng);
    let mut names = BTreeSet::new();
    let mut entities = Vec::with_capacity(spec.entities);
    while entities.len() < spec.entities {
        let name = phrase(&pool, rng.random_range(spec.min_len..=spec.max_len), &mut rng);
        if !names.insert(name.clone()) {
            continue;
        }
        let i = entities.len();
        entities.push(Entity {
            id: EntityId(i as u32),
            raw_id: format!("e{i}"),
            name,
            description: phrase(&pool, rng.random_range(spec.min_len..=spec.max_len), &mut rng),
        });
    }
    let rel_words = words(spec.relations + 40, &mut rng);
    let relations = (0..spec.relations).map(|i| relation(i, &rel_words[40 + i])).collect();
    let max_facts = spec.entities * (spec.entities - 1) * spec.relations;
    assert!(spec.facts <= max_facts, "too many facts requested");
    let mut seen = BTreeSet::new();
    let mut train = Vec::with_capacity(spec.facts);
    while train.len() < spec.facts {
        let h = rng.random_range(0..spec.entities);
        let t = rng.random_range(0..spec.entities);
        let r = rng.random_range(0..spec.relations);
        if h != t && seen.insert((h, r, t)) {
            train.push(fact(h, r, t));
        }
    }
    let valid = train[..spec.valid.min(train.len())].to_vec();
    KnowledgeGraph {
        entities,
        relations,
        train,
        valid,
        test: Vec::new(),
        meta_kind: MetaKind::None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionSpec {
    /// Entities `a`, `b` and `c` per layer.
    pub per_layer: usize,
    /// Number of `c` groups; every `b` in group `g` maps to `c_g`.
    pub groups: usize,
    /// Fraction of `r2` facts held out as test.
    pub held_out: f64,
    /// Further fraction of `r2` facts held out as valid.
    pub valid_share: f64,
    pub seed: u64,
}

impl Default for CompositionSpec {
    fn default() -> Self {
        CompositionSpec {
            per_layer: 40,
            groups: 8,
            held_out: 0.2,
            valid_share: 0.1,
            seed: 0,
        }
    }
}

/// Three layers of entities `a_i`, `b_j`, `c_k` with `r0(a, b)` one-to-one
/// by a random map and `r1(b, c)` sending `b` to the `c` of its group, so
/// `r2(a, c)` holds exactly when `r0(a, b)` and `r1(b, c)`. All `r0`/`r1`
/// facts are trained; disjoint held-out shares of `r2` facts form the test
/// and valid splits. A `b` name starts with its group's word and an `a`
/// description is its `b`'s name, so the rule is visible in the text.
pub fn composition_graph(spec: &CompositionSpec) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.per_layer;
    let g = spec.groups.min(n).max(1);
    let pool = words(3 * n + g + 5, &mut rng);
    let (a_words, rest) = pool.split_at(n);
    let (b_words, rest) = rest.split_at(n);
    let (c_words, rest) = rest.split_at(n);
    let (group_words, extra) = rest.split_at(g);
    let mut b_of_a: Vec<usize> = (0..n).collect();
    b_of_a.shuffle(&mut rng);
    let group_of_b: Vec<usize> = (0..n).map(|j| j % g).collect();
    let b_name = |j: usize| format!("{} {}", group_words[group_of_b[j]], b_words[j]);
    let c_name = |k: usize| format!("{} {}", extra[1], c_words[k]);

    let mut entities = Vec::with_capacity(3 * n);
    let mut push = |name: String, description: String| {
        let i = entities.len();
        entities.push(Entity {
            id: EntityId(i as u32),
            raw_id: format!("e{i}"),
            name,
            description,
        });
    };
    for i in 0..n {
        push(format!("{} {}", extra[0], a_words[i]), b_name(b_of_a[i]));
    }
    for j in 0..n {
        push(b_name(j), c_name(group_of_b[j]));
    }
    for k in 0..n {
        push(c_name(k), extra[2].clone());
    }
    let (a, b, c) = (|i: usize| i, |j: usize| n + j, |k: usize| 2 * n + k);
    let relations = vec![relation(0, &extra[3]), relation(1, &extra[4]), relation(2, "via")];

    let mut train = Vec::new();
    for i in 0..n {
        train.push(fact(a(i), 0, b(b_of_a[i])));
    }
    for j in 0..n {
        train.push(fact(b(j), 1, c(group_of_b[j])));
    }
    let mut r2: Vec<Fact> = (0..n).map(|i| fact(a(i), 2, c(group_of_b[b_of_a[i]]))).collect();
    r2.shuffle(&mut rng);
    let share = |p: f64| ((n as f64) * p).round() as usize;
    let test = r2.split_off(r2.len() - share(spec.held_out));
    let valid = r2.split_off(r2.len() - share(spec.valid_share));
    train.extend(r2);
    KnowledgeGraph {
        entities,
        relations,
        train,
        valid,
        test,
        meta_kind: MetaKind::None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memorization_graph_shape() {
        let g = memorization_graph(&MemorizationSpec::default());
        g.validate().unwrap();
        assert_eq!(g.entities.len(), 50);
        assert_eq!(g.relations.len(), 5);
        assert_eq!(g.train.len(), 200);
        for e in &g.entities {
            let n = e.name.split(' ').count();
            let d = e.description.split(' ').count();
            assert!((3..=8).contains(&n) && (3..=8).contains(&d));
        }
        assert!(g.name_collisions().is_empty());
        assert_eq!(memorization_graph(&MemorizationSpec::default()), g);
    }

    #[test]
    fn composition_rule_holds() {
        let spec = CompositionSpec::default();
        let g = composition_graph(&spec);
        g.validate().unwrap();
        let all: Vec<&Fact> = g.train.iter().chain(&g.test).chain(&g.valid).collect();
        let has = |h: EntityId, r: u32, t: EntityId| all.iter().any(|f| f.head == h && f.rel.0 == r && f.tail == t);
        let n = spec.per_layer;
        for x in 0..n as u32 {
            for z in 2 * n as u32..3 * n as u32 {
                let via = (n as u32..2 * n as u32).any(|y| has(EntityId(x), 0, EntityId(y)) && has(EntityId(y), 1, EntityId(z)));
                assert_eq!(has(EntityId(x), 2, EntityId(z)), via);
            }
        }
        assert_eq!(g.test.len(), 8);
        assert_eq!(g.valid.len(), 4);
        assert!(g.test.iter().all(|f| f.rel.0 == 2));
    }
}
