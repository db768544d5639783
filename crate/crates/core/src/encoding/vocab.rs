use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Reserved tokens, in file order; their line numbers are their ids.
pub const RESERVED: [&str; 8] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[HIS]", "[QUES]", "[ANS]", "[MASK]"];

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const UNK: TokenId = 1;
    pub const CLS: TokenId = 2;
    pub const SEP: TokenId = 3;
    pub const HIS: TokenId = 4;
    pub const QUES: TokenId = 5;
    pub const ANS: TokenId = 6;
    pub const MASK: TokenId = 7;

    /// Reserved tokens followed by `words` (duplicates and reserved names skipped).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED {
            vocab.push(t);
        }
        for w in words {
            vocab.push(w.as_ref());
        }
        vocab
    }

    /// Builds a vocabulary from every token the tokenizer produces over `texts`,
    /// in first-seen order.
    pub fn from_corpus<'a, I>(texts: I, tokenizer: &dyn Tokenizer) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab = Self::new(std::iter::empty::<&str>());
        for text in texts {
            for piece in tokenizer.split(text) {
                vocab.push(&piece);
            }
        }
        vocab
    }

    fn push(&mut self, token: &str) {
        if !self.ids.contains_key(token) {
            let id = TokenId::try_from(self.tokens.len()).expect("vocabulary fits u32");
            self.ids.insert(token.to_owned(), id);
            self.tokens.push(token.to_owned());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        for (i, expected) in RESERVED.iter().enumerate() {
            match lines.get(i) {
                Some(l) if l == expected => {}
                other => {
                    return Err(perr(i + 1, format!("expected reserved token {expected}, found {other:?}")));
                }
            }
        }
        let mut vocab = Self::new(std::iter::empty::<&str>());
        for (i, line) in lines.iter().enumerate().skip(RESERVED.len()) {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(perr(i + 1, format!("invalid token {line:?}")));
            }
            if vocab.ids.contains_key(*line) {
                return Err(perr(i + 1, format!("duplicate token {line:?}")));
            }
            vocab.push(line);
        }
        Ok(vocab)
    }
}

/// Splits text into vocabulary pieces. Implementations other than
/// [`BasicTokenizer`] (e.g. a subword scheme) can be swapped in.
pub trait Tokenizer: Send + Sync {
    fn split(&self, text: &str) -> Vec<String>;

    fn tokenize(&self, text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
        self.split(text)
            .iter()
            .map(|p| vocab.id(p).unwrap_or(Vocabulary::UNK))
            .collect()
    }

    fn detokenize(&self, ids: &[TokenId], vocab: &Vocabulary) -> String {
        ids.iter()
            .map(|&id| vocab.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercases, splits on whitespace, and emits each punctuation character
/// as its own piece.
#[derive(Debug, Clone, Copy, Default)]
pub struct BasicTokenizer;

impl Tokenizer for BasicTokenizer {
    fn split(&self, text: &str) -> Vec<String> {
        let mut pieces = Vec::new();
        for word in text.split_whitespace() {
            let mut current = String::new();
            for ch in word.chars() {
                if ch.is_ascii_punctuation() {
                    if !current.is_empty() {
                        pieces.push(std::mem::take(&mut current));
                    }
                    pieces.push(ch.to_string());
                } else {
                    current.extend(ch.to_lowercase());
                }
            }
            if !current.is_empty() {
                pieces.push(current);
            }
        }
        pieces
    }
}
