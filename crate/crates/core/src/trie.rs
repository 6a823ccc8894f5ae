//! Token-prefix tries with subtree entity counts.
//!
//! The entity trie holds every entity name; a per-query block trie holds the
//! names of answers that must not be generated. Subtracting the block count
//! from the entity count at `prefix·t` tells whether any generatable entity
//! still lies below `t`, so blocking never touches the shared entity trie.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::codec::{Codec, TokenId, Vocab};
use crate::kg::EntityId;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Node {
    children: BTreeMap<TokenId, usize>,
    terminals: Vec<EntityId>,
    count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountedTrie {
    nodes: Vec<Node>,
}

impl Default for CountedTrie {
    fn default() -> Self {
        Self::new()
    }
}

impl CountedTrie {
    pub fn new() -> Self {
        CountedTrie {
            nodes: vec![Node::default()],
        }
    }

    /// Returns `false` if `id` was already recorded at this name.
    pub fn insert(&mut self, tokens: &[TokenId], id: EntityId) -> bool {
        let mut path = Vec::with_capacity(tokens.len() + 1);
        let mut cur = 0;
        path.push(cur);
        for &t in tokens {
            cur = match self.nodes[cur].children.get(&t) {
                Some(&next) => next,
                None => {
                    let next = self.nodes.len();
                    self.nodes.push(Node::default());
                    self.nodes[cur].children.insert(t, next);
                    next
                }
            };
            path.push(cur);
        }
        if self.nodes[cur].terminals.contains(&id) {
            return false;
        }
        self.nodes[cur].terminals.push(id);
        for n in path {
            self.nodes[n].count += 1;
        }
        true
    }

    /// Number of distinct (name, entity) entries.
    pub fn len(&self) -> usize {
        self.nodes[0].count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn find(&self, path: &[TokenId]) -> Option<usize> {
        let mut cur = 0;
        for t in path {
            cur = *self.nodes[cur].children.get(t)?;
        }
        Some(cur)
    }

    /// Entities whose name starts with `path`; 0 for absent paths.
    pub fn count_at(&self, path: &[TokenId]) -> usize {
        self.find(path).map_or(0, |n| self.nodes[n].count)
    }

    /// Entities whose name is exactly `path`.
    pub fn terminals_at(&self, path: &[TokenId]) -> &[EntityId] {
        self.find(path).map_or(&[], |n| &self.nodes[n].terminals)
    }

    pub fn children_at(&self, path: &[TokenId]) -> Vec<TokenId> {
        self.find(path)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Recount every node from its children and terminals.
    pub fn counts_consistent(&self) -> bool {
        self.nodes.iter().all(|n| {
            let below: usize = n.children.values().map(|&c| self.nodes[c].count).sum();
            let unique: BTreeSet<_> = n.terminals.iter().collect();
            unique.len() == n.terminals.len() && n.count == below + n.terminals.len()
        })
    }

    /// Preorder dump, one node per line: `depth TAB token TAB count TAB ids`.
    /// Tokens are printed as surfaces when a vocabulary is given; the root
    /// prints as `<root>` and an empty id list as `-`.
    pub fn dump(&self, vocab: Option<&Vocab>) -> String {
        let mut out = String::new();
        let mut stack = vec![(0usize, 0usize, None::<TokenId>)];
        while let Some((node, depth, tok)) = stack.pop() {
            let n = &self.nodes[node];
            let tok = match (tok, vocab) {
                (None, _) => "<root>".to_string(),
                (Some(t), Some(v)) => v.surface(t).to_string(),
                (Some(t), None) => t.to_string(),
            };
            let ids = if n.terminals.is_empty() {
                "-".to_string()
            } else {
                n.terminals
                    .iter()
                    .map(|e| e.0.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let _ = writeln!(out, "{depth}\t{tok}\t{}\t{ids}", n.count);
            for (&t, &c) in n.children.iter().rev() {
                stack.push((c, depth + 1, Some(t)));
            }
        }
        out
    }
}

/// Trie over the names of every entity.
pub fn build_entity_trie(codec: &Codec) -> CountedTrie {
    let mut trie = CountedTrie::new();
    for i in 0..codec.n_entities() {
        let id = EntityId(i as u32);
        trie.insert(codec.name_tokens(id), id);
    }
    trie
}

/// Trie over the known answers of a query, minus the evaluation target.
pub fn build_block_trie(codec: &Codec, known_true: &BTreeSet<EntityId>, target: Option<EntityId>) -> CountedTrie {
    let mut trie = CountedTrie::new();
    for &id in known_true {
        if Some(id) != target {
            trie.insert(codec.name_tokens(id), id);
        }
    }
    trie
}

/// Next steps permitted after a name prefix.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Allowed {
    pub tokens: Vec<TokenId>,
    /// The prefix itself is a complete, non-blocked name.
    pub end: bool,
}

pub fn allowed_next(entity: &CountedTrie, block: Option<&CountedTrie>, prefix: &[TokenId]) -> Allowed {
    let Some(node) = entity.find(prefix) else {
        return Allowed::default();
    };
    let block_node = block.and_then(|b| b.find(prefix).map(|n| (b, n)));
    let n = &entity.nodes[node];
    let blocked_child = |t: &TokenId| {
        block_node
            .and_then(|(b, bn)| b.nodes[bn].children.get(t).map(|&c| b.nodes[c].count))
            .unwrap_or(0)
    };
    let tokens = n
        .children
        .iter()
        .filter(|(t, &c)| entity.nodes[c].count > blocked_child(t))
        .map(|(&t, _)| t)
        .collect();
    let blocked_here = block_node.map_or(0, |(b, bn)| b.nodes[bn].terminals.len());
    Allowed {
        tokens,
        end: n.terminals.len() > blocked_here,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Vocab;
    use crate::kg::{Entity, KnowledgeGraph};

    fn codec(names: &[&str]) -> Codec {
        let g = KnowledgeGraph {
            entities: names
                .iter()
                .enumerate()
                .map(|(i, n)| Entity {
                    id: EntityId(i as u32),
                    raw_id: i.to_string(),
                    name: n.to_string(),
                    description: String::new(),
                })
                .collect(),
            ..Default::default()
        };
        Codec::new(&g, Vocab::build(&g, 0), 0, 64).unwrap()
    }

    fn ids(c: &Codec, text: &str) -> Vec<TokenId> {
        c.vocab().tokenize(text).unwrap()
    }

    #[test]
    fn single_entity() {
        let c = codec(&["A"]);
        let t = build_entity_trie(&c);
        assert_eq!(t.len(), 1);
        assert_eq!(t.children_at(&[]), ids(&c, "A"));
        assert_eq!(t.terminals_at(&ids(&c, "A")), &[EntityId(0)]);
        assert_eq!(t.dump(Some(c.vocab())), "0\t<root>\t1\t-\n1\tA\t1\t0\n");
    }

    #[test]
    fn grammy_example() {
        let c = codec(&["Grammy Award for Best Rock Song", "Grammy Award for Best Music Video"]);
        let t = build_entity_trie(&c);
        let prefix = ids(&c, "Grammy Award for Best");
        // shared path of four nodes, then the branch
        for n in 1..=4 {
            assert_eq!(t.count_at(&prefix[..n]), 2);
            assert_eq!(t.children_at(&prefix[..n - 1]).len(), 1);
        }
        let allowed = allowed_next(&t, None, &prefix);
        assert_eq!(allowed.tokens, ids(&c, "Rock Music"));
        assert!(!allowed.end);

        let block = build_block_trie(&c, &BTreeSet::from([EntityId(0)]), None);
        let allowed = allowed_next(&t, Some(&block), &prefix);
        assert_eq!(allowed.tokens, ids(&c, "Music"));
    }

    #[test]
    fn block_trie_excludes_target() {
        let c = codec(&["A", "B C"]);
        let t1 = EntityId(0);
        let t2 = EntityId(1);
        assert!(build_block_trie(&c, &BTreeSet::from([t1]), Some(t1)).is_empty());
        let b = build_block_trie(&c, &BTreeSet::from([t1, t2]), Some(t2));
        assert_eq!(b.len(), 1);
        assert_eq!(b.terminals_at(&ids(&c, "A")), &[t1]);
        let all = build_block_trie(&c, &BTreeSet::from([t1, t2]), None);
        assert_eq!(all.len(), 2);
    }

    #[test]
    fn end_of_name_and_blocking() {
        let c = codec(&["A", "A B"]);
        let t = build_entity_trie(&c);
        let a = ids(&c, "A");
        let allowed = allowed_next(&t, None, &a);
        assert!(allowed.end);
        assert_eq!(allowed.tokens, ids(&c, "B"));
        let block = build_block_trie(&c, &BTreeSet::from([EntityId(0)]), None);
        let allowed = allowed_next(&t, Some(&block), &a);
        assert!(!allowed.end);
        assert_eq!(allowed.tokens, ids(&c, "B"));
        assert_eq!(allowed_next(&t, None, &ids(&c, "B")), Allowed::default());
    }

    #[test]
    fn colliding_names_share_a_terminal() {
        let c = codec(&["Stan Lee", "Stan Lee"]);
        let t = build_entity_trie(&c);
        let name = ids(&c, "Stan Lee");
        assert_eq!(t.terminals_at(&name), &[EntityId(0), EntityId(1)]);
        let block = build_block_trie(&c, &BTreeSet::from([EntityId(0)]), None);
        assert!(allowed_next(&t, Some(&block), &name).end);
        assert!(t.counts_consistent());
    }

    #[test]
    fn reinsert_is_a_no_op() {
        let mut t = CountedTrie::new();
        assert!(t.insert(&[11, 12], EntityId(0)));
        assert!(!t.insert(&[11, 12], EntityId(0)));
        assert_eq!(t.len(), 1);
        assert!(t.counts_consistent());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn count_conservation(entries in proptest::collection::vec(
                (proptest::collection::vec(11u32..15, 0..5), 0u32..20), 0..40)) {
                let mut t = CountedTrie::new();
                let mut distinct = BTreeSet::new();
                for (name, id) in &entries {
                    let fresh = t.insert(name, EntityId(*id));
                    prop_assert_eq!(fresh, distinct.insert((name.clone(), *id)));
                    prop_assert!(t.counts_consistent());
                }
                prop_assert_eq!(t.len(), distinct.len());
            }

            #[test]
            fn empty_block_gives_plain_children(names in proptest::collection::vec(
                proptest::collection::vec(11u32..14, 1..4), 1..10)) {
                let mut t = CountedTrie::new();
                for (i, n) in names.iter().enumerate() {
                    t.insert(n, EntityId(i as u32));
                }
                let empty = CountedTrie::new();
                for n in &names {
                    for k in 0..=n.len() {
                        let a = allowed_next(&t, Some(&empty), &n[..k]);
                        prop_assert_eq!(&a, &allowed_next(&t, None, &n[..k]));
                        prop_assert_eq!(a.tokens, t.children_at(&n[..k]));
                    }
                }
            }
        }
    }
}
