//! Token vocabulary with reserved special tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph_data::{linearize, GraphTextPair};

pub mod special {
    pub const PAD: &str = "<PAD>";
    pub const BOS: &str = "<BOS>";
    pub const EOS: &str = "<EOS>";
    pub const UNK: &str = "<UNK>";
    pub const HEAD: &str = "<H>";
    pub const REL: &str = "<R>";
    pub const TAIL: &str = "<T>";
    pub const SEP: &str = "<SEP>";
    pub const MASK: &str = "<M>";

    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;
    pub const UNK_ID: usize = 3;
    pub const HEAD_ID: usize = 4;
    pub const REL_ID: usize = 5;
    pub const TAIL_ID: usize = 6;
    pub const SEP_ID: usize = 7;
    pub const MASK_ID: usize = 8;

    /// In id order.
    pub const ALL: [&str; 9] = [PAD, BOS, EOS, UNK, HEAD, REL, TAIL, SEP, MASK];

    pub fn is_marker(token: &str) -> bool {
        matches!(token, HEAD | REL | TAIL)
    }

    pub fn is_special(token: &str) -> bool {
        ALL.contains(&token)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials only.
    pub fn specials() -> Self {
        Self::from_tokens(special::ALL.iter().map(|s| s.to_string()).collect())
            .expect("specials are well-formed")
    }

    /// Builds from an id-ordered token list whose first entries are the
    /// specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < special::ALL.len()
            || tokens.iter().zip(special::ALL).any(|(t, s)| t != s)
        {
            return Err(Error::Config(
                "vocabulary must start with the reserved special tokens".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Collects tokens of linearized graphs and texts; keeps those seen at
    /// least `min_freq` times, ordered by descending frequency then
    /// lexicographically.
    pub fn build(corpus: &[GraphTextPair], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let linearized = corpus
            .iter()
            .map(|p| linearize(&p.graph))
            .collect::<Result<Vec<_>>>()?;
        for (pair, lin) in corpus.iter().zip(&linearized) {
            for t in lin.tokens.iter().chain(&pair.text) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && !special::is_special(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = special::ALL
            .iter()
            .copied()
            .chain(kept.into_iter().map(|(t, _)| t))
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(special::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(special::UNK).to_string())
            .collect()
    }

    /// One token per line; the line index is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_string(content: &str) -> Result<Self> {
        Self::from_tokens(content.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&content)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_data::KnowledgeGraph;

    fn pair(text: &str) -> GraphTextPair {
        let g = KnowledgeGraph::new(vec!["x".into(), "y".into()], [(0, "r", 1)]).unwrap();
        GraphTextPair::new(g, text).unwrap()
    }

    #[test]
    fn min_freq_filters() {
        let v = Vocabulary::build(&[pair("a a b")], 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), special::UNK_ID);
    }

    #[test]
    fn min_freq_one_keeps_everything() {
        let v = Vocabulary::build(&[pair("a a b")], 1).unwrap();
        for t in ["a", "b", "x", "y", "r"] {
            assert!(v.contains(t), "{t}");
        }
        // "a" is the most frequent non-special token
        assert_eq!(v.id("a"), 9);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocabulary::build(&[], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocabulary::specials();
        for (i, s) in special::ALL.iter().enumerate() {
            assert_eq!(v.id(s), i);
        }
        assert_eq!(v.id(special::MASK), special::MASK_ID);
        assert_eq!(v.id(special::SEP), special::SEP_ID);
    }

    #[test]
    fn file_format_is_line_per_id() {
        let v = Vocabulary::build(&[pair("a a b")], 1).unwrap();
        let s = v.to_file_string();
        assert_eq!(s.lines().nth(9), Some("a"));
        assert_eq!(Vocabulary::from_file_string(&s).unwrap(), v);
    }
}
