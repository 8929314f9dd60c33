//! WordPiece-style subword vocabulary with greedy longest-match encoding.
//!
//! Ids are dense. The first ids are fixed: `[PAD]`, `[UNK]`, `[EOS]`, then
//! the `T` task begin tokens in order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const EOS: &str = "[EOS]";
pub const CONTINUATION: &str = "##";

/// Default begin tokens: object detection style, dense captioning style.
pub const DEFAULT_TASKS: [&str; 2] = ["[ObjectDet]", "[DenseCap]"];

pub type TokenId = usize;

/// Lowercases, strips punctuation other than hyphens, collapses whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || *c == '-')
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    num_tasks: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from `tokens`, which must start with the specials
    /// followed by `num_tasks` begin tokens.
    pub fn from_tokens(tokens: Vec<String>, num_tasks: usize) -> Result<Self> {
        if num_tasks == 0 {
            return Err(Error::Config("at least one task token is required".into()));
        }
        if tokens.len() < 3 + num_tasks
            || tokens[0] != PAD
            || tokens[1] != UNK
            || tokens[2] != EOS
        {
            return Err(Error::Config(format!(
                "vocabulary must begin with {PAD}, {UNK}, {EOS} and {num_tasks} task token(s)"
            )));
        }
        for t in &tokens[3..3 + num_tasks] {
            if !is_bracketed(t) {
                return Err(Error::Config(format!("task token {t:?} must look like [Name]")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?} at id {i}")));
            }
            if i >= 3 + num_tasks && is_bracketed(t) {
                return Err(Error::Config(format!("special-looking token {t:?} outside the special block")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            num_tasks,
        })
    }

    /// Greedy frequency-based inventory: the character alphabet (head and
    /// continuation forms) is always present, then whole words are added in
    /// order of descending corpus frequency until `max_size` is reached.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize, task_tokens: &[&str]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut heads = BTreeSet::new();
        let mut conts = BTreeSet::new();
        for line in corpus {
            for w in normalize(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
                *word_freq.entry(w.to_string()).or_default() += 1;
                let mut chars = w.chars();
                if let Some(c) = chars.next() {
                    heads.insert(c.to_string());
                }
                for c in chars {
                    conts.insert(format!("{CONTINUATION}{c}"));
                }
            }
        }
        if word_freq.is_empty() {
            return Err(Error::Config("corpus has no words after normalisation".into()));
        }
        let mut tokens: Vec<String> = [PAD, UNK, EOS].iter().map(|s| s.to_string()).collect();
        tokens.extend(task_tokens.iter().map(|s| s.to_string()));
        let required = tokens.len() + heads.len() + conts.len();
        if max_size < required {
            return Err(Error::Config(format!(
                "max_size {max_size} cannot hold the {required} specials and alphabet pieces"
            )));
        }
        tokens.extend(heads.iter().cloned());
        tokens.extend(conts);
        let mut words: Vec<(&String, &usize)> = word_freq
            .iter()
            .filter(|(w, _)| w.chars().count() > 1)
            .collect();
        words.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        for (w, _) in words {
            if tokens.len() >= max_size {
                break;
            }
            tokens.push(w.clone());
        }
        Self::from_tokens(tokens, task_tokens.len())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn pad_id(&self) -> TokenId {
        0
    }

    pub fn unk_id(&self) -> TokenId {
        1
    }

    pub fn eos_id(&self) -> TokenId {
        2
    }

    /// Begin token for task `task` (1-based).
    pub fn task_id(&self, task: usize) -> Result<TokenId> {
        if task == 0 || task > self.num_tasks {
            return Err(Error::Config(format!(
                "unknown task {task}; valid task ids are {}",
                (1..=self.num_tasks).map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(2 + task)
    }

    pub fn task_name(&self, task: usize) -> Result<&str> {
        Ok(&self.tokens[self.task_id(task)?])
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < 3 + self.num_tasks
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match-first encoding; a word that cannot be covered
    /// becomes a single `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            match self.encode_word(word) {
                Some(ids) => out.extend(ids),
                None => out.push(self.unk_id()),
            }
        }
        out
    }

    fn encode_word(&self, word: &str) -> Option<Vec<TokenId>> {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let mut ids = Vec::new();
        let mut start = 0;
        let mut piece = String::new();
        while start + 1 < bounds.len() {
            let mut found = None;
            for end in (start + 1..bounds.len()).rev() {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.push_str(&word[bounds[start]..bounds[end]]);
                if let Some(&id) = self.index.get(piece.as_str()) {
                    if !self.is_special(id) {
                        found = Some((id, end));
                        break;
                    }
                }
            }
            let (id, end) = found?;
            ids.push(id);
            start = end;
        }
        Some(ids)
    }

    /// Inverse of [`Vocabulary::encode`]: specials are dropped and
    /// continuation pieces are merged into the preceding word.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::Index {
                op: "decode",
                index: id,
                len: self.len(),
            })?;
            if self.is_special(id) {
                continue;
            }
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out.to_lowercase())
    }

    /// File form: one token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let num_tasks = tokens
            .iter()
            .skip(3)
            .take_while(|t| is_bracketed(t))
            .count();
        Self::from_tokens(tokens, num_tasks)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }

    /// SHA-256 of the file form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

fn is_bracketed(t: &str) -> bool {
    t.len() > 2 && t.starts_with('[') && t.ends_with(']')
}
