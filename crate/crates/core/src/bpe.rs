//! Byte-level byte-pair encoding.
//!
//! Every vocabulary starts with the 256 single-byte tokens, so any byte
//! string can be encoded. Training splits the corpus on ASCII whitespace and
//! greedily merges the most frequent adjacent pair, breaking frequency ties by
//! the lexicographically smaller `(left bytes, right bytes)` pair. Training
//! stops early once no pair occurs at least twice.
//!
//! Whitespace is never merged during training, so at encode time the whole
//! text is processed at once and whitespace bytes simply stay single tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Number of base single-byte tokens.
pub const BYTE_TOKENS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MergeRule {
    pub left: TokenId,
    pub right: TokenId,
    pub result: TokenId,
    pub task_index: usize,
    /// Priority within the task; lower merges first.
    pub rank: usize,
}

/// Vocabulary and merge rules learned from a single task's corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskVocab {
    pub task_index: usize,
    pub tokens: Vec<Vec<u8>>,
    pub rules: Vec<MergeRule>,
}

fn byte_tokens() -> Vec<Vec<u8>> {
    (0..=255u8).map(|b| vec![b]).collect()
}

impl TaskVocab {
    /// A vocabulary holding only the 256 byte tokens.
    pub fn bytes_only(task_index: usize) -> Self {
        TaskVocab {
            task_index,
            tokens: byte_tokens(),
            rules: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn scope(&self) -> Scope<'_> {
        Scope::new(&self.tokens, self.rules.iter().copied())
    }

    /// Check the structural invariants of a task vocabulary.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() < BYTE_TOKENS {
            return Err(Error::InvalidInput(format!(
                "task vocab holds {} tokens, fewer than the byte base",
                self.tokens.len()
            )));
        }
        for (b, tok) in self.tokens.iter().take(BYTE_TOKENS).enumerate() {
            if tok.as_slice() != [b as u8] {
                return Err(Error::InvalidInput(format!("token {b} is not byte {b:#04x}")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for rule in &self.rules {
            let n = self.tokens.len() as TokenId;
            if rule.left >= n || rule.right >= n || rule.result >= n {
                return Err(Error::InvalidInput(format!("rule {rule:?} references unknown ids")));
            }
            if (rule.result as usize) < BYTE_TOKENS {
                return Err(Error::InvalidInput(format!("rule {rule:?} produces a byte token")));
            }
            if !seen.insert((rule.left, rule.right)) {
                return Err(Error::InvalidInput(format!("duplicate pair in rule {rule:?}")));
            }
            let mut cat = self.tokens[rule.left as usize].clone();
            cat.extend_from_slice(&self.tokens[rule.right as usize]);
            if cat != self.tokens[rule.result as usize] {
                return Err(Error::InvalidInput(format!(
                    "rule {rule:?} result is not the concatenation of its operands"
                )));
            }
        }
        Ok(())
    }
}

fn is_space(b: u8) -> bool {
    b.is_ascii_whitespace()
}

/// Learn merge rules from `corpus` until the vocabulary reaches `target_size`.
pub fn train_bpe<S: AsRef<[u8]>>(
    corpus: &[S],
    target_size: usize,
    task_index: usize,
) -> Result<TaskVocab> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    if target_size < BYTE_TOKENS + 1 {
        return Err(Error::InvalidInput(format!(
            "target vocab size {target_size} must be at least {}",
            BYTE_TOKENS + 1
        )));
    }

    let mut word_freq: HashMap<&[u8], u64> = HashMap::new();
    for text in corpus {
        for word in text.as_ref().split(|&b| is_space(b)).filter(|w| !w.is_empty()) {
            *word_freq.entry(word).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = word_freq
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| b as TokenId).collect(), c))
        .collect();
    words.sort();

    let mut tokens = byte_tokens();
    let mut index: HashMap<Vec<u8>, TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();
    let mut rules = Vec::new();

    while tokens.len() < target_size {
        let mut pair_freq: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (syms, count) in &words {
            for w in syms.windows(2) {
                *pair_freq.entry((w[0], w[1])).or_default() += count;
            }
        }
        let best = pair_freq
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    // smaller byte pair wins the tie, so it must compare as "greater"
                    kb.cmp(&ka)
                })
            });
        let Some(((left, right), _)) = best else {
            break;
        };

        let mut merged = tokens[left as usize].clone();
        merged.extend_from_slice(&tokens[right as usize]);
        let result = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as TokenId;
                index.insert(merged.clone(), id);
                tokens.push(merged);
                id
            }
        };
        rules.push(MergeRule {
            left,
            right,
            result,
            task_index,
            rank: rules.len(),
        });
        for (syms, _) in &mut words {
            merge_pair(syms, left, right, result);
        }
    }

    Ok(TaskVocab {
        task_index,
        tokens,
        rules,
    })
}

/// Replace non-overlapping occurrences of `(left, right)`, scanning left to right.
fn merge_pair(syms: &mut Vec<TokenId>, left: TokenId, right: TokenId, result: TokenId) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

/// A token inventory together with an ordered merge table.
///
/// Rules are applied by priority: `(task_index, rank)` ascending. When two
/// rules share an operand pair the first one wins.
#[derive(Debug, Clone)]
pub struct Scope<'a> {
    tokens: &'a [Vec<u8>],
    merges: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl<'a> Scope<'a> {
    pub fn new(tokens: &'a [Vec<u8>], rules: impl IntoIterator<Item = MergeRule>) -> Self {
        let mut rules: Vec<MergeRule> = rules.into_iter().collect();
        rules.sort_by_key(|r| (r.task_index, r.rank));
        let mut merges = HashMap::with_capacity(rules.len());
        for (priority, r) in rules.into_iter().enumerate() {
            merges.entry((r.left, r.right)).or_insert((priority, r.result));
        }
        Scope { tokens, merges }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn rule_count(&self) -> usize {
        self.merges.len()
    }

    pub fn token(&self, id: TokenId) -> Option<&'a [u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text.iter().map(|&b| b as TokenId).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merges.get(&(w[0], w[1])).map(|&(p, res)| (p, w[0], w[1], res)))
                .min_by_key(|&(p, ..)| p);
            match best {
                Some((_, l, r, res)) => merge_pair(&mut ids, l, r, res),
                None => return ids,
            }
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::InvalidId {
                id,
                len: self.tokens.len(),
            })?;
            out.extend_from_slice(tok);
        }
        Ok(out)
    }
}

pub fn encode(text: &[u8], scope: &Scope<'_>) -> Vec<TokenId> {
    scope.encode(text)
}

pub fn decode(ids: &[TokenId], scope: &Scope<'_>) -> Result<Vec<u8>> {
    scope.decode(ids)
}

/// Quote a token: printable ASCII verbatim, `\"` and `\\` escaped, `\xHH` otherwise.
pub fn quote_token(token: &[u8]) -> String {
    let mut s = String::with_capacity(token.len() + 2);
    s.push('"');
    for &b in token {
        match b {
            b'"' => s.push_str("\\\""),
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s.push('"');
    s
}

pub fn unquote_token(line: &str) -> std::result::Result<Vec<u8>, String> {
    let inner = line
        .strip_prefix('"')
        .and_then(|l| l.strip_suffix('"'))
        .ok_or_else(|| "token is not a quoted string".to_string())?;
    let bytes = inner.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => match bytes.get(i + 1) {
                Some(b'"') => {
                    out.push(b'"');
                    i += 2;
                }
                Some(b'\\') => {
                    out.push(b'\\');
                    i += 2;
                }
                Some(b'x') => {
                    let hex = inner
                        .get(i + 2..i + 4)
                        .ok_or_else(|| "short hex escape".to_string())?;
                    let v = u8::from_str_radix(hex, 16).map_err(|_| format!("bad hex escape `{hex}`"))?;
                    out.push(v);
                    i += 4;
                }
                _ => return Err("unknown escape".into()),
            },
            b'"' => return Err("unescaped quote".into()),
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    Ok(out)
}

pub fn write_vocab_file(path: &Path, tokens: &[Vec<u8>]) -> Result<()> {
    let mut s = String::new();
    for t in tokens {
        s.push_str(&quote_token(t));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_vocab_file(path: &Path) -> Result<Vec<Vec<u8>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            unquote_token(line).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            })
        })
        .collect()
}

pub fn write_merges_file(path: &Path, rules: &[MergeRule]) -> Result<()> {
    let mut s = String::new();
    for r in rules {
        let _ = writeln!(s, "{} {} {} {} {}", r.task_index, r.rank, r.left, r.right, r.result);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_merges_file(path: &Path) -> Result<Vec<MergeRule>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rules = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| parse_err(format!("bad integer `{s}`")));
        rules.push(MergeRule {
            task_index: num(fields[0])? as usize,
            rank: num(fields[1])? as usize,
            left: num(fields[2])? as TokenId,
            right: num(fields[3])? as TokenId,
            result: num(fields[4])? as TokenId,
        });
    }
    Ok(rules)
}
