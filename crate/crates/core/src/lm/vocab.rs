use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Word-level vocabulary. Ids 0, 1, 2 are PAD, BOS, EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const BOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;

    /// Reserved tokens first, then `words` in order with duplicates dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for w in [PAD, BOS, EOS] {
            vocab.insert(w.to_string());
        }
        for w in words {
            vocab.insert(w.into());
        }
        vocab
    }

    fn insert(&mut self, word: String) {
        if !self.ids.contains_key(&word) {
            self.ids.insert(word.clone(), self.tokens.len());
            self.tokens.push(word);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits on whitespace and maps every word to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for line in f.lines() {
            tokens.push(line?);
        }
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != BOS || tokens[2] != EOS {
            return Err(Error::InvalidConfig(format!(
                "{} does not start with the reserved tokens",
                path.display()
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }
}
