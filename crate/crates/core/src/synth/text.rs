use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
const CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 ',.?!-";

/// Character vocabulary: `PAD`, `EOS`, then lowercase letters, digits, space and
/// a little punctuation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            chars: CHARS.chars().collect(),
        }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&v| v == c).map(|p| p + 2)
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(2).and_then(|i| self.chars.get(i).copied())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextSequence {
    pub ids: Vec<usize>,
    pub raw: String,
    /// Characters dropped because they are outside the vocabulary.
    pub unknown_count: usize,
}

impl TextSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercases `text`, drops unknown characters (counting them) and appends `EOS`.
pub fn text_to_ids(text: &str) -> Result<TextSequence> {
    let vocab = Vocabulary::default();
    let mut ids = Vec::with_capacity(text.len() + 1);
    let mut unknown_count = 0;
    for c in text.chars().flat_map(char::to_lowercase) {
        match vocab.id(c) {
            Some(id) => ids.push(id),
            None => unknown_count += 1,
        }
    }
    if ids.is_empty() {
        return Err(Error::invalid(format!(
            "text {text:?} has no characters in the vocabulary"
        )));
    }
    ids.push(EOS_ID);
    Ok(TextSequence {
        ids,
        raw: text.to_string(),
        unknown_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_cases() {
        let v = Vocabulary::default();
        let ab = text_to_ids("ab").unwrap();
        assert_eq!(ab.ids, vec![v.id('a').unwrap(), v.id('b').unwrap(), EOS_ID]);
        assert_eq!(text_to_ids("AB").unwrap().ids, ab.ids);
        let odd = text_to_ids("a§b").unwrap();
        assert_eq!(odd.ids, ab.ids);
        assert_eq!(odd.unknown_count, 1);
        assert_eq!(v.len(), 45);
        assert_eq!(v.symbol(v.id('?').unwrap()), Some('?'));
    }

    #[test]
    fn empty_and_unknown_rejected() {
        assert!(matches!(text_to_ids(""), Err(Error::InvalidInput(_))));
        assert!(matches!(text_to_ids("§§"), Err(Error::InvalidInput(_))));
    }
}
