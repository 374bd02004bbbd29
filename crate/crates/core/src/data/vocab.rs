use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Every symbol the synthetic generator can emit.
pub const SYNTHETIC_SYMBOLS: &[&str] = &[
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "a", "b", "c", "x", "y", "z", "+", "-", "=", "(", ")", "{", "}",
    "^", "_", r"\frac", r"\sqrt", r"\sin", r"\alpha", r"\pi", r"\times",
];

/// Token table with the four reserved ids above in front.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(symbols: Vec<String>) -> Self {
        Self::new(symbols)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens[RESERVED.len()..].to_vec()
    }
}

/// Result of tokenizing one label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    /// Ids framed by SOS and EOS.
    pub ids: Vec<usize>,
    /// Symbols that mapped to the unknown id.
    pub unknown: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved symbols. Duplicates keep their
    /// first position.
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for s in symbols {
            let s = s.into();
            if !ids.contains_key(&s) {
                ids.insert(s.clone(), tokens.len());
                tokens.push(s);
            }
        }
        Self { tokens, ids }
    }

    pub fn synthetic() -> Self {
        Self::new(SYNTHETIC_SYMBOLS.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    /// Tokenizes a label and frames it with SOS/EOS.
    pub fn tokenize(&self, label: &str) -> Tokenized {
        let mut ids = vec![SOS];
        let mut unknown = Vec::new();
        for sym in split_latex(label) {
            match self.id(sym) {
                Some(id) if !Self::is_reserved(id) => ids.push(id),
                _ => {
                    ids.push(UNK);
                    unknown.push(sym.to_string());
                }
            }
        }
        ids.push(EOS);
        Tokenized { ids, unknown }
    }

    /// Space-joined symbols of `ids`, skipping reserved ids.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_reserved(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Splits a LaTeX string into symbols: `\name` commands, escaped single
/// characters such as `\{`, and single characters. Whitespace separates
/// symbols and is dropped.
pub fn split_latex(label: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut it = label.char_indices().peekable();
    while let Some((start, ch)) = it.next() {
        if ch.is_whitespace() {
            continue;
        }
        let mut end = start + ch.len_utf8();
        if ch == '\\' {
            match it.peek() {
                Some(&(_, c)) if c.is_ascii_alphabetic() => {
                    while let Some(&(i, c)) = it.peek() {
                        if !c.is_ascii_alphabetic() {
                            break;
                        }
                        end = i + 1;
                        it.next();
                    }
                }
                Some(&(i, c)) if !c.is_whitespace() => {
                    end = i + c.len_utf8();
                    it.next();
                }
                _ => {}
            }
        }
        out.push(&label[start..end]);
    }
    out
}

/// Canonical spacing: one space between symbols.
pub fn canonical(label: &str) -> String {
    split_latex(label).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_tokens() {
        let v = Vocabulary::synthetic();
        let t = v.tokenize(r"\frac { 1 } { 2 }");
        let names: Vec<_> = t.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(names, ["<sos>", r"\frac", "{", "1", "}", "{", "2", "}", "<eos>"]);
        assert!(t.unknown.is_empty());
    }

    #[test]
    fn superscript_without_spaces() {
        let v = Vocabulary::synthetic();
        let t = v.tokenize("x^{2}");
        assert_eq!(v.detokenize(&t.ids), "x ^ { 2 }");
    }

    #[test]
    fn commands_end_at_non_letters() {
        assert_eq!(split_latex(r"\sin\alpha2\{"), [r"\sin", r"\alpha", "2", r"\{"]);
        assert_eq!(split_latex(r"a \ b"), ["a", r"\", "b"]);
    }

    #[test]
    fn unknown_symbols_are_counted() {
        let v = Vocabulary::synthetic();
        let t = v.tokenize(r"x + \beta + ?");
        assert_eq!(t.ids.iter().filter(|&&i| i == UNK).count(), 2);
        assert_eq!(t.unknown[0], r"\beta");
    }

    #[test]
    fn serde_keeps_order() {
        let v = Vocabulary::new(["q", "p"]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["q","p"]"#);
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("p"), Some(5));
    }
}
