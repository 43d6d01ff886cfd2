use std::collections::HashMap;
use std::path::Path;

use crate::graphcore::CLASS_NAMES;
use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const YES: &str = "<yes>";
pub const NO: &str = "<no>";

/// Reserved tokens, in id order starting at 0.
pub const SPECIALS: [&str; 6] = [PAD, BOS, EOS, SEP, YES, NO];

const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
const NUMERIC: [&str; 2] = [".", "-"];
const STRUCTURE: [&str; 8] = ["nodes", "degrees", "edges", "none", "(", ")", ",", ";"];
const GENERATOR: [&str; 7] = ["query", "node", "link", "strong", "weak", "similar", "contrasting"];

const PUNCT: &[char] = &['.', ',', ';', ':', '?', '(', ')', '"', '-'];

/// Splits text into lowercase tokens. Punctuation marks and digits are
/// single tokens; `<...>` spans are kept whole; apostrophes stay inside
/// words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '<' {
            if let Some(len) = chars[i..].iter().position(|&x| x == '>') {
                flush(&mut word, &mut out);
                out.push(chars[i..=i + len].iter().collect::<String>().to_lowercase());
                i += len + 1;
                continue;
            }
        }
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if PUNCT.contains(&c) || c.is_ascii_digit() {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        } else {
            word.extend(c.to_lowercase());
        }
        i += 1;
    }
    flush(&mut word, &mut out);
    out
}

/// Closed token inventory shared by encoder text segments and the decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds the vocabulary: reserved specials, digits and numeric marks,
    /// class names, graph-description words, then every word of `texts` in
    /// first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let fixed = SPECIALS
            .iter()
            .chain(&DIGITS)
            .chain(&NUMERIC)
            .chain(CLASS_NAMES.iter())
            .chain(&STRUCTURE)
            .chain(&GENERATOR)
            .map(|s| s.to_string());
        tokens.extend(fixed);
        for text in texts {
            tokens.extend(tokenize(text));
        }
        let mut seen = std::collections::HashSet::new();
        tokens.retain(|t| seen.insert(t.clone()));
        Self::from_tokens(tokens).expect("built vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(s) {
                return Err(Error::Invalid(format!("vocabulary id {i} must be {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("bad vocabulary entry {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reads a vocabulary file: one token per line, line number = id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn bos(&self) -> u32 {
        1
    }

    pub fn eos(&self) -> u32 {
        2
    }

    pub fn sep(&self) -> u32 {
        3
    }

    pub fn yes(&self) -> u32 {
        4
    }

    pub fn no(&self) -> u32 {
        5
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Ids of `text` followed by EOS.
    pub fn encode_eos(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.encode(text)?;
        ids.push(self.eos());
        Ok(ids)
    }

    /// Ids for the decimal digits of `k`.
    pub fn number(&self, k: u64) -> Vec<u32> {
        k.to_string().bytes().map(|b| self.index[&(b as char).to_string()]).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>").to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_marks_and_digits() {
        assert_eq!(
            tokenize("Answer: <yes> or <NO>. It's 12."),
            vec!["answer", ":", "<yes>", "or", "<no>", ".", "it's", "1", "2", "."]
        );
    }

    #[test]
    fn specials_have_reserved_ids() {
        let v = Vocab::build(["a b c"]);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s).unwrap(), i as u32);
        }
        assert_eq!(v.yes(), v.id(YES).unwrap());
        assert_eq!(v.number(305), vec![v.id("3").unwrap(), v.id("0").unwrap(), v.id("5").unwrap()]);
    }

    #[test]
    fn unknown_token_is_an_error() {
        let v = Vocab::build(["a"]);
        assert!(matches!(v.encode("zebra"), Err(Error::UnknownToken(t)) if t == "zebra"));
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build(["graph with words"]);
        let dir = std::env::temp_dir().join(format!("vocab-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn rejects_duplicates_and_missing_specials() {
        let mut toks: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        toks.push("x".into());
        toks.push("x".into());
        assert!(Vocab::from_tokens(toks).is_err());
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
    }
}
