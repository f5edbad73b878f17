//! Knowledge graphs, their linearization into marked token sequences, and
//! corpus ingestion.
//!
//! All indices (entities, token positions, text positions) are 0-based in
//! memory. The corpus file format uses 1-based entity indices and mention
//! positions; they are converted on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::special;

/// Lower-cased whitespace tokenization used for entities, relations and
/// texts alike.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Entities plus a sparse map of directed relations between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    relations: BTreeMap<(usize, usize), String>,
}

/// One element of the graph's unit sequence: an entity or a relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GraphUnit {
    Entity(usize),
    Relation(usize, usize),
}

impl KnowledgeGraph {
    /// Builds a graph from `(head, relation, tail)` triples with 0-based
    /// entity indices. Checks index bounds, uniqueness of each ordered pair
    /// and that every surface string has at least one token. An empty
    /// triple list is accepted here and rejected by [`linearize`] and by
    /// corpus loading.
    pub fn new<I, S>(entities: Vec<String>, triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, S, usize)>,
        S: Into<String>,
    {
        if entities.is_empty() {
            return Err(Error::InvalidGraph("entity list is empty".into()));
        }
        if let Some(e) = entities.iter().find(|e| tokenize(e).is_empty()) {
            return Err(Error::InvalidGraph(format!("entity {e:?} has no tokens")));
        }
        let mut relations = BTreeMap::new();
        for (h, r, t) in triples {
            let r = r.into();
            if h >= entities.len() || t >= entities.len() {
                return Err(Error::InvalidGraph(format!(
                    "triple ({h}, {r:?}, {t}) references an entity outside 0..{}",
                    entities.len()
                )));
            }
            if tokenize(&r).is_empty() {
                return Err(Error::InvalidGraph(format!("relation between {h} and {t} has no tokens")));
            }
            if relations.insert((h, t), r).is_some() {
                return Err(Error::InvalidGraph(format!(
                    "more than one relation from entity {h} to entity {t}"
                )));
            }
        }
        Ok(Self {
            entities,
            relations,
        })
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &BTreeMap<(usize, usize), String> {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relation(&self, head: usize, tail: usize) -> Option<&str> {
        self.relations.get(&(head, tail)).map(String::as_str)
    }

    /// Full validity check applied at load time: at least one triple and
    /// every entity taking part in some triple (so it has a position in the
    /// linearization).
    pub fn validate(&self) -> Result<()> {
        if self.relations.is_empty() {
            return Err(Error::GraphHasNoTriples);
        }
        let mut seen = vec![false; self.entities.len()];
        for &(h, t) in self.relations.keys() {
            seen[h] = true;
            seen[t] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidGraph(format!(
                "entity {:?} takes part in no triple",
                self.entities[i]
            )));
        }
        Ok(())
    }

    /// Returns a copy with entity `i` moved to index `perm[i]` and relations
    /// relabeled accordingly.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.entities.len();
        let mut check: Vec<usize> = perm.to_vec();
        check.sort_unstable();
        if check != (0..n).collect::<Vec<_>>() {
            return Err(Error::InvalidGraph("not a permutation of the entity indices".into()));
        }
        let mut entities = vec![String::new(); n];
        for (i, e) in self.entities.iter().enumerate() {
            entities[perm[i]] = e.clone();
        }
        let triples = self
            .relations
            .iter()
            .map(|(&(h, t), r)| (perm[h], r.clone(), perm[t]));
        Self::new(entities, triples)
    }
}

/// Marked token sequence of a graph and the positions each unit occupies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedGraph {
    pub tokens: Vec<String>,
    /// Sorted token positions of each entity, indexed by entity.
    pub entity_positions: Vec<Vec<usize>>,
    /// Sorted token positions of each relation.
    pub relation_positions: BTreeMap<(usize, usize), Vec<usize>>,
}

impl LinearizedGraph {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn positions(&self, unit: GraphUnit) -> &[usize] {
        match unit {
            GraphUnit::Entity(i) => &self.entity_positions[i],
            GraphUnit::Relation(h, t) => &self.relation_positions[&(h, t)],
        }
    }

    /// Checks bounds, disjointness, coverage and marker exclusion of the
    /// position sets.
    pub fn verify(&self) -> Result<()> {
        let m = self.tokens.len();
        let mut owner: Vec<Option<GraphUnit>> = vec![None; m];
        let units = self
            .entity_positions
            .iter()
            .enumerate()
            .map(|(i, p)| (GraphUnit::Entity(i), p))
            .chain(
                self.relation_positions
                    .iter()
                    .map(|(&(h, t), p)| (GraphUnit::Relation(h, t), p)),
            );
        for (unit, positions) in units {
            if positions.is_empty() {
                return Err(Error::InvalidGraph(format!("{unit:?} has no positions")));
            }
            for &p in positions {
                if p >= m {
                    return Err(Error::InvalidGraph(format!("{unit:?} position {p} >= {m}")));
                }
                if special::is_marker(&self.tokens[p]) {
                    return Err(Error::InvalidGraph(format!("{unit:?} owns marker at {p}")));
                }
                if let Some(prev) = owner[p].replace(unit) {
                    return Err(Error::InvalidGraph(format!(
                        "position {p} shared by {prev:?} and {unit:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Emits triples in ascending `(head, tail)` order as
/// `<H> head-tokens <R> relation-tokens <T> tail-tokens`.
///
/// An entity occurring in several triples is repeated; its position set is
/// the union over occurrences.
pub fn linearize(graph: &KnowledgeGraph) -> Result<LinearizedGraph> {
    graph.validate()?;
    let mut tokens = Vec::new();
    let mut entity_positions = vec![Vec::new(); graph.num_entities()];
    let mut relation_positions = BTreeMap::new();
    let emit = |tokens: &mut Vec<String>, text: &str| -> Vec<usize> {
        let start = tokens.len();
        tokens.extend(tokenize(text));
        (start..tokens.len()).collect()
    };
    for (&(h, t), rel) in graph.relations() {
        tokens.push(special::HEAD.to_string());
        let hp = emit(&mut tokens, &graph.entities()[h]);
        entity_positions[h].extend(hp);
        tokens.push(special::REL.to_string());
        let rp = emit(&mut tokens, rel);
        relation_positions.insert((h, t), rp);
        tokens.push(special::TAIL.to_string());
        let tp = emit(&mut tokens, &graph.entities()[t]);
        entity_positions[t].extend(tp);
    }
    Ok(LinearizedGraph {
        tokens,
        entity_positions,
        relation_positions,
    })
}

/// Entities in index order, then relations in ascending `(head, tail)`
/// order.
pub fn unit_sequence(graph: &KnowledgeGraph) -> Vec<GraphUnit> {
    (0..graph.num_entities())
        .map(GraphUnit::Entity)
        .chain(graph.relations().keys().map(|&(h, t)| GraphUnit::Relation(h, t)))
        .collect()
}

/// A graph with its reference text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTextPair {
    pub graph: KnowledgeGraph,
    pub text: Vec<String>,
    /// Text positions mentioning each entity (entities without mentions are
    /// absent).
    pub entity_mentions: BTreeMap<usize, Vec<usize>>,
}

impl GraphTextPair {
    /// Pairs `graph` with `text`, locating entity mentions by exact token
    /// sequence match.
    pub fn new(graph: KnowledgeGraph, text: &str) -> Result<Self> {
        let text = tokenize(text);
        if text.is_empty() {
            return Err(Error::InvalidGraph("text has no tokens".into()));
        }
        let entity_mentions = find_mentions(&graph, &text);
        Ok(Self {
            graph,
            text,
            entity_mentions,
        })
    }

    pub fn n(&self) -> usize {
        self.text.len()
    }

    /// Union of all entity-mention positions in the text.
    pub fn mention_positions(&self) -> BTreeSet<usize> {
        self.entity_mentions.values().flatten().copied().collect()
    }
}

/// Positions of every occurrence of each entity's token sequence in `text`.
pub fn find_mentions(graph: &KnowledgeGraph, text: &[String]) -> BTreeMap<usize, Vec<usize>> {
    let mut out = BTreeMap::new();
    for (i, e) in graph.entities().iter().enumerate() {
        let needle = tokenize(e);
        let mut found = BTreeSet::new();
        if needle.len() <= text.len() {
            for start in 0..=text.len() - needle.len() {
                if text[start..start + needle.len()] == needle[..] {
                    found.extend(start..start + needle.len());
                }
            }
        }
        if !found.is_empty() {
            out.insert(i, found.into_iter().collect());
        }
    }
    out
}

/// One line of a corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub entities: Vec<String>,
    pub triples: Vec<(usize, String, usize)>,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mentions: Option<BTreeMap<String, Vec<usize>>>,
}

impl CorpusRecord {
    pub fn from_pair(pair: &GraphTextPair) -> Self {
        Self {
            entities: pair.graph.entities().to_vec(),
            triples: pair
                .graph
                .relations()
                .iter()
                .map(|(&(h, t), r)| (h + 1, r.clone(), t + 1))
                .collect(),
            text: pair.text.join(" "),
            mentions: None,
        }
    }

    fn graph(&self) -> std::result::Result<KnowledgeGraph, String> {
        let n_ent = self.entities.len();
        let mut triples = Vec::with_capacity(self.triples.len());
        for (h, r, t) in self.triples.iter().cloned() {
            if h == 0 || t == 0 || h > n_ent || t > n_ent {
                return Err(format!(
                    "triple [{h}, {r:?}, {t}] references an entity outside 1..={n_ent}"
                ));
            }
            triples.push((h - 1, r, t - 1));
        }
        let graph = KnowledgeGraph::new(self.entities.clone(), triples).map_err(|e| e.to_string())?;
        graph.validate().map_err(|e| e.to_string())?;
        Ok(graph)
    }

    fn into_pair(self) -> std::result::Result<GraphTextPair, String> {
        let n_ent = self.entities.len();
        let graph = self.graph()?;
        let mut pair = GraphTextPair::new(graph, &self.text).map_err(|e| e.to_string())?;
        if let Some(mentions) = self.mentions {
            let n = pair.n();
            let mut explicit = BTreeMap::new();
            for (k, positions) in mentions {
                let e: usize = k
                    .parse()
                    .map_err(|_| format!("mention key {k:?} is not an entity index"))?;
                if e == 0 || e > n_ent {
                    return Err(format!("mention key {e} outside 1..={n_ent}"));
                }
                let mut set = BTreeSet::new();
                for p in positions {
                    if p == 0 || p > n {
                        return Err(format!("mention position {p} outside 1..={n}"));
                    }
                    set.insert(p - 1);
                }
                if !set.is_empty() {
                    explicit.insert(e - 1, set.into_iter().collect());
                }
            }
            pair.entity_mentions = explicit;
        }
        Ok(pair)
    }
}

fn parse_records<U>(
    content: &str,
    convert: impl Fn(CorpusRecord) -> std::result::Result<U, String>,
) -> Result<Vec<U>> {
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(line).map_err(|e| Error::CorpusParse {
                line: line_no,
                message: e.to_string(),
            })?;
        out.push(convert(record).map_err(|message| Error::CorpusParse {
            line: line_no,
            message,
        })?);
    }
    Ok(out)
}

/// Parses corpus text, one JSON record per non-blank line.
pub fn parse_corpus(content: &str) -> Result<Vec<GraphTextPair>> {
    parse_records(content, CorpusRecord::into_pair)
}

/// Like [`parse_corpus`] but keeps only the graphs; the text field may be
/// absent or empty.
pub fn parse_graphs(content: &str) -> Result<Vec<KnowledgeGraph>> {
    parse_records(content, |r| r.graph())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<GraphTextPair>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&content)
}

pub fn load_graphs(path: impl AsRef<Path>) -> Result<Vec<KnowledgeGraph>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graphs(&content)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(entities: &[&str], triples: &[(usize, &str, usize)]) -> KnowledgeGraph {
        KnowledgeGraph::new(
            entities.iter().map(|s| s.to_string()).collect(),
            triples.iter().map(|&(h, r, t)| (h, r, t)),
        )
        .unwrap()
    }

    #[test]
    fn linearizes_single_triple() {
        let g = graph(&["alan bean", "apollo 12"], &[(0, "mission", 1)]);
        let lin = linearize(&g).unwrap();
        assert_eq!(
            lin.tokens,
            ["<H>", "alan", "bean", "<R>", "mission", "<T>", "apollo", "12"]
        );
        assert_eq!(lin.entity_positions, vec![vec![1, 2], vec![6, 7]]);
        assert_eq!(lin.relation_positions[&(0, 1)], vec![4]);
        lin.verify().unwrap();
    }

    #[test]
    fn repeated_head_unions_positions() {
        let g = graph(&["a", "b", "c"], &[(0, "r", 1), (0, "s", 2)]);
        let lin = linearize(&g).unwrap();
        assert_eq!(lin.entity_positions[0], vec![1, 7]);
        lin.verify().unwrap();
    }

    #[test]
    fn no_triples_rejected() {
        let g = graph(&["a"], &[]);
        assert!(matches!(linearize(&g), Err(Error::GraphHasNoTriples)));
    }

    #[test]
    fn unit_orderings() {
        let g = graph(&["a", "b"], &[(0, "r", 1)]);
        assert_eq!(
            unit_sequence(&g),
            vec![GraphUnit::Entity(0), GraphUnit::Entity(1), GraphUnit::Relation(0, 1)]
        );
        let g = graph(&["a"], &[(0, "self", 0)]);
        assert_eq!(
            unit_sequence(&g),
            vec![GraphUnit::Entity(0), GraphUnit::Relation(0, 0)]
        );
        let g = graph(&["a", "b", "c"], &[(1, "r", 0), (0, "s", 2)]);
        assert_eq!(
            unit_sequence(&g),
            vec![
                GraphUnit::Entity(0),
                GraphUnit::Entity(1),
                GraphUnit::Entity(2),
                GraphUnit::Relation(0, 2),
                GraphUnit::Relation(1, 0)
            ]
        );
    }

    #[test]
    fn self_loop_linearizes() {
        let g = graph(&["x"], &[(0, "likes", 0)]);
        let lin = linearize(&g).unwrap();
        assert_eq!(lin.entity_positions[0], vec![1, 5]);
        lin.verify().unwrap();
    }

    #[test]
    fn duplicate_pair_rejected() {
        let r = KnowledgeGraph::new(
            vec!["a".into(), "b".into()],
            [(0, "r", 1), (0, "s", 1)],
        );
        assert!(matches!(r, Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn loads_two_lines() {
        let content = r#"{"entities": ["alan bean", "apollo 12"], "triples": [[1, "mission", 2]], "text": "alan bean walked"}
{"entities": ["a", "b"], "triples": [[2, "r", 1]], "text": "b r a", "mentions": {"1": [3]}}
"#;
        let pairs = parse_corpus(content).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].entity_mentions, BTreeMap::from([(0, vec![0, 1])]));
        assert_eq!(pairs[1].entity_mentions, BTreeMap::from([(0, vec![2])]));
        assert_eq!(pairs[1].graph.relation(1, 0), Some("r"));
    }

    #[test]
    fn dangling_index_reports_line() {
        let content = r#"{"entities": ["a", "b"], "triples": [[1, "r", 2]], "text": "a"}
{"entities": ["a", "b"], "triples": [[1, "r", 5]], "text": "a"}"#;
        match parse_corpus(content) {
            Err(Error::CorpusParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        match parse_corpus("not json") {
            Err(Error::CorpusParse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mentions_are_case_folded() {
        let g = graph(&["Alan Bean", "x"], &[(0, "r", 1)]);
        let pair = GraphTextPair::new(g, "ALAN bean met alan bean").unwrap();
        assert_eq!(pair.entity_mentions[&0], vec![0, 1, 3, 4]);
    }
}
