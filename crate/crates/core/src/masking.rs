//! Corruption procedures for the two reconstruction objectives.

use rand::Rng;

use crate::graph_data::{GraphTextPair, LinearizedGraph};
use crate::tokenizer::special;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub text_entity: f64,
    pub text_other: f64,
    pub graph_entity: f64,
    pub graph_relation: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            text_entity: 0.40,
            text_other: 0.20,
            graph_entity: 0.40,
            graph_relation: 0.20,
        }
    }
}

/// Text with masked runs collapsed to a single mask token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub corrupted: Vec<String>,
    pub original: Vec<String>,
    /// Per original position.
    pub masked: Vec<bool>,
}

/// Linearized graph with whole units replaced token-by-token by the mask
/// token; length is preserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedGraph {
    pub corrupted: Vec<String>,
    pub original: Vec<String>,
    /// `indicator[i]` is true exactly where `corrupted[i]` is the mask.
    pub indicator: Vec<bool>,
    /// Selection of each entity unit.
    pub entity_selected: Vec<bool>,
    /// Selection of each relation unit, in ascending `(head, tail)` order.
    pub relation_selected: Vec<bool>,
}

/// Masks each entity-mention token with probability `p_entity` and every
/// other token with `p_other`, then merges consecutive masks.
pub fn mask_text(pair: &GraphTextPair, rng: &mut impl Rng, p_entity: f64, p_other: f64) -> MaskedText {
    let mentions = pair.mention_positions();
    let masked: Vec<bool> = (0..pair.text.len())
        .map(|i| {
            let p = if mentions.contains(&i) { p_entity } else { p_other };
            rng.random_bool(p)
        })
        .collect();
    let mut corrupted = Vec::with_capacity(pair.text.len());
    for (i, tok) in pair.text.iter().enumerate() {
        if masked[i] {
            if i == 0 || !masked[i - 1] {
                corrupted.push(special::MASK.to_string());
            }
        } else {
            corrupted.push(tok.clone());
        }
    }
    MaskedText {
        corrupted,
        original: pair.text.clone(),
        masked,
    }
}

/// Selects each entity with probability `p_entity` and each relation with
/// `p_relation` (entities first, then relations in ascending order) and
/// masks every token of a selected unit. Markers are never touched.
pub fn mask_graph(lin: &LinearizedGraph, rng: &mut impl Rng, p_entity: f64, p_relation: f64) -> MaskedGraph {
    let entity_selected: Vec<bool> = lin
        .entity_positions
        .iter()
        .map(|_| rng.random_bool(p_entity))
        .collect();
    let relation_selected: Vec<bool> = lin
        .relation_positions
        .keys()
        .map(|_| rng.random_bool(p_relation))
        .collect();
    let mut indicator = vec![false; lin.len()];
    let selected_positions = lin
        .entity_positions
        .iter()
        .zip(&entity_selected)
        .chain(lin.relation_positions.values().zip(&relation_selected))
        .filter(|(_, &s)| s)
        .flat_map(|(p, _)| p.iter().copied());
    for p in selected_positions {
        indicator[p] = true;
    }
    let corrupted = lin
        .tokens
        .iter()
        .zip(&indicator)
        .map(|(t, &m)| if m { special::MASK.to_string() } else { t.clone() })
        .collect();
    MaskedGraph {
        corrupted,
        original: lin.tokens.clone(),
        indicator,
        entity_selected,
        relation_selected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_data::{linearize, KnowledgeGraph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> GraphTextPair {
        let g = KnowledgeGraph::new(
            vec!["alan bean".into(), "apollo 12".into(), "nasa".into()],
            [(0, "mission", 1), (1, "operator", 2)],
        )
        .unwrap();
        GraphTextPair::new(g, "alan bean flew on apollo 12 for nasa").unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let p = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = mask_text(&p, &mut rng, 0.0, 0.0);
        assert_eq!(m.corrupted, p.text);
        assert!(m.masked.iter().all(|&x| !x));

        let lin = linearize(&p.graph).unwrap();
        let g = mask_graph(&lin, &mut rng, 0.0, 0.0);
        assert_eq!(g.corrupted, lin.tokens);
        assert!(g.indicator.iter().all(|&x| !x));
    }

    #[test]
    fn full_text_masking_merges_to_one_token() {
        let g = KnowledgeGraph::new(vec!["a".into(), "b".into()], [(0, "r", 1)]).unwrap();
        let p = GraphTextPair::new(g, "a b c d e").unwrap();
        let m = mask_text(&p, &mut ChaCha8Rng::seed_from_u64(3), 1.0, 1.0);
        assert_eq!(m.corrupted, vec![special::MASK.to_string()]);
    }

    #[test]
    fn full_graph_masking_keeps_markers() {
        let p = pair();
        let lin = linearize(&p.graph).unwrap();
        let g = mask_graph(&lin, &mut ChaCha8Rng::seed_from_u64(3), 1.0, 1.0);
        let unit_tokens: usize = lin.entity_positions.iter().map(Vec::len).sum::<usize>()
            + lin.relation_positions.values().map(Vec::len).sum::<usize>();
        assert_eq!(g.indicator.iter().filter(|&&m| m).count(), unit_tokens);
        for (i, t) in lin.tokens.iter().enumerate() {
            if special::is_marker(t) {
                assert_eq!(&g.corrupted[i], t);
                assert!(!g.indicator[i]);
            } else {
                assert_eq!(g.corrupted[i], special::MASK);
            }
        }
    }

    #[test]
    fn same_seed_same_masks() {
        let p = pair();
        let a = mask_text(&p, &mut ChaCha8Rng::seed_from_u64(9), 0.4, 0.2);
        let b = mask_text(&p, &mut ChaCha8Rng::seed_from_u64(9), 0.4, 0.2);
        assert_eq!(a, b);
    }

    #[test]
    fn unmasked_tokens_survive_in_order() {
        let p = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = mask_text(&p, &mut rng, 0.4, 0.2);
            assert!(m.corrupted.len() <= m.original.len());
            let kept: Vec<&String> = m
                .original
                .iter()
                .zip(&m.masked)
                .filter(|(_, &x)| !x)
                .map(|(t, _)| t)
                .collect();
            let visible: Vec<&String> = m.corrupted.iter().filter(|t| *t != special::MASK).collect();
            assert_eq!(kept, visible);
            let runs = m
                .masked
                .iter()
                .enumerate()
                .filter(|&(i, &x)| x && (i == 0 || !m.masked[i - 1]))
                .count();
            assert_eq!(runs, m.corrupted.len() - visible.len());
        }
    }

    #[test]
    fn graph_masking_preserves_length() {
        let p = pair();
        let lin = linearize(&p.graph).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let g = mask_graph(&lin, &mut rng, 0.4, 0.2);
            assert_eq!(g.corrupted.len(), lin.len());
            for (i, t) in g.corrupted.iter().enumerate() {
                assert_eq!(g.indicator[i], t == special::MASK);
            }
        }
    }
}
