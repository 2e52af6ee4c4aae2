use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";

/// Whitespace/punctuation word vocabulary with fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }

    /// Rebuilds the reverse map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Most frequent `max_size - 3` words after the reserved entries; frequency
/// ties break lexicographically.
pub fn build_vocab<'a, I>(corpus: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for text in corpus {
        any = true;
        for w in split_words(text) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut id_to_token = vec![
        PAD_TOKEN.to_string(),
        UNK_TOKEN.to_string(),
        CLS_TOKEN.to_string(),
    ];
    id_to_token.extend(
        entries
            .into_iter()
            .take(max_size.saturating_sub(3))
            .map(|(w, _)| w),
    );
    Ok(Vocab::from_tokens(id_to_token))
}

/// One tokenized, padded, labeled example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub label: usize,
}

impl Instance {
    /// Number of non-PAD positions, CLS included.
    pub fn n_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Token strings at real positions, CLS first.
    pub fn real_tokens(&self, vocab: &Vocab) -> Vec<String> {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&id, _)| vocab.token(id).to_string())
            .collect()
    }
}

/// CLS-prefixed, UNK-mapped, truncated/padded to `max_seq_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_seq_len: usize, label: usize) -> Instance {
    let mut ids = vec![CLS_ID];
    for w in split_words(text) {
        if ids.len() >= max_seq_len {
            break;
        }
        ids.push(vocab.id(&w).unwrap_or(UNK_ID));
    }
    let real = ids.len();
    ids.resize(max_seq_len, PAD_ID);
    let mask = (0..max_seq_len).map(|i| i < real).collect();
    Instance { ids, mask, label }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_fixed() {
        let v = build_vocab(["a b", "a c"], 5).unwrap();
        assert_eq!(v.id(PAD_TOKEN), Some(PAD_ID));
        assert_eq!(v.id(UNK_TOKEN), Some(UNK_ID));
        assert_eq!(v.id(CLS_TOKEN), Some(CLS_ID));
    }

    #[test]
    fn frequency_then_lexicographic_tie() {
        let v = build_vocab(["a b", "a c"], 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4)); // b beats c lexicographically
        assert_eq!(v.id("c"), None);
    }

    #[test]
    fn dominant_token_always_kept() {
        let text = vec!["z "; 100].join("") + "rare words here";
        let v = build_vocab([text.as_str()], 4).unwrap();
        assert!(v.id("z").is_some());
    }

    #[test]
    fn empty_corpus_is_input_error() {
        assert!(build_vocab(std::iter::empty::<&str>(), 5).is_err());
    }

    #[test]
    fn tokenize_direct_mapping() {
        let v = build_vocab(["a b", "a c"], 5).unwrap();
        let inst = tokenize("a b", &v, 6, 0);
        assert_eq!(inst.ids[..4], [CLS_ID, 3, 4, PAD_ID]);
        assert_eq!(inst.mask[..4], [true, true, true, false]);
    }

    #[test]
    fn tokenize_empty_text() {
        let v = build_vocab(["a"], 4).unwrap();
        let inst = tokenize("", &v, 4, 0);
        assert_eq!(inst.ids, vec![CLS_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(inst.mask, vec![true, false, false, false]);
        assert_eq!(inst.n_real(), 1);
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = build_vocab(["a"], 4).unwrap();
        let inst = tokenize("zzz", &v, 4, 0);
        assert_eq!(inst.ids[1], UNK_ID);
    }
}
