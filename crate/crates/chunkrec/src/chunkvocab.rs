//! Act-with-think chunk assembly and the shared token vocabulary layout.
//!
//! One chunk per item: `n` semantic-ID tokens (the "think" levels) followed
//! by the item's unique-ID token (the "act"). All token kinds live in one
//! vocabulary with disjoint ranges:
//!
//! ```text
//! 0        PAD
//! 1        BOS
//! 2 ..                2 + n*k      level-1..n SID codes, k codes per level
//! 2 + n*k ..          2 + n*k + N  item UIDs
//! ```

use crate::corpus::SplitCorpus;
use crate::error::{Error, Result};
use crate::semtok::SidTuple;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Histories keep at most this many most-recent items.
pub const HISTORY_CAP: usize = 20;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;

/// Token-range arithmetic for the shared vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VocabLayout {
    /// Number of SID levels (n).
    pub levels: usize,
    /// Codes per level.
    pub k: usize,
    /// Number of items (N).
    pub item_count: usize,
}

/// What a token id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Pad,
    Bos,
    /// SID code at a 1-based level.
    Sid { level: usize, code: usize },
    Uid(usize),
}

impl VocabLayout {
    pub fn new(levels: usize, k: usize, item_count: usize) -> Self {
        Self { levels, k, item_count }
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.levels * self.k + self.item_count
    }

    /// Tokens a full chunk occupies (n SIDs + 1 UID).
    pub fn chunk_len(&self) -> usize {
        self.levels + 1
    }

    /// Token id for SID code `code` at 1-based `level`.
    pub fn sid_token(&self, level: usize, code: usize) -> Result<u32> {
        if level == 0 || level > self.levels {
            return Err(Error::Shape(format!("level {level} out of 1..={}", self.levels)));
        }
        if code >= self.k {
            return Err(Error::Shape(format!("code {code} out of range for k={}", self.k)));
        }
        Ok((2 + (level - 1) * self.k + code) as u32)
    }

    /// Token id for an item's UID.
    pub fn uid_token(&self, item_index: usize) -> Result<u32> {
        if item_index >= self.item_count {
            return Err(Error::Shape(format!(
                "item index {item_index} out of range for N={}",
                self.item_count
            )));
        }
        Ok((2 + self.levels * self.k + item_index) as u32)
    }

    /// Inverse of the token mapping.
    pub fn decode_token(&self, token: u32) -> Result<Token> {
        let t = token as usize;
        if t >= self.vocab_size() {
            return Err(Error::Shape(format!(
                "token {t} out of vocab (size {})",
                self.vocab_size()
            )));
        }
        Ok(match t {
            0 => Token::Pad,
            1 => Token::Bos,
            _ => {
                let off = t - 2;
                if off < self.levels * self.k {
                    Token::Sid { level: off / self.k + 1, code: off % self.k }
                } else {
                    Token::Uid(off - self.levels * self.k)
                }
            }
        })
    }

    pub fn is_sid_token(&self, token: u32) -> bool {
        let t = token as usize;
        t >= 2 && t < 2 + self.levels * self.k
    }

    pub fn is_uid_token(&self, token: u32) -> bool {
        let t = token as usize;
        t >= 2 + self.levels * self.k && t < self.vocab_size()
    }

    /// Whether flattened-sequence position `p` is a chunk-final (UID) slot.
    /// Position 0 is BOS; chunks then occupy `chunk_len()` tokens each.
    pub fn is_chunk_final_position(&self, p: usize) -> bool {
        p >= 1 && (p - 1) % self.chunk_len() == self.levels
    }
}

/// One item's (S1..Sn, UID) token tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    /// Level-order SID token ids, length `levels`.
    pub sid_tokens: Vec<u32>,
    pub uid_token: u32,
}

impl Chunk {
    /// All tokens of the chunk, SIDs first then UID.
    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.sid_tokens.iter().copied().chain(std::iter::once(self.uid_token))
    }
}

/// A user's flattened, model-ready history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSequence {
    /// `[BOS, chunk_1 .., chunk_m]`.
    pub tokens: Vec<u32>,
    /// Positions of the chunk-final (UID) tokens, used for loss masking.
    pub uid_positions: Vec<usize>,
}

/// Map an item and its SID tuple into token ids.
pub fn build_chunk(item_index: usize, sids: &SidTuple, layout: &VocabLayout) -> Result<Chunk> {
    if sids.codes.len() != layout.levels {
        return Err(Error::Shape(format!(
            "sid tuple has {} codes, layout expects {}",
            sids.codes.len(),
            layout.levels
        )));
    }
    let sid_tokens = sids
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| layout.sid_token(i + 1, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Chunk { sid_tokens, uid_token: layout.uid_token(item_index)? })
}

/// Flatten a chunk history into `[BOS, c_1 .., c_m]`, keeping at most the
/// `HISTORY_CAP` most recent chunks.
pub fn flatten_history(chunks: &[Chunk], layout: &VocabLayout) -> ChunkSequence {
    let start = chunks.len().saturating_sub(HISTORY_CAP);
    let kept = &chunks[start..];
    let mut tokens = Vec::with_capacity(1 + kept.len() * layout.chunk_len());
    tokens.push(BOS);
    let mut uid_positions = Vec::with_capacity(kept.len());
    for chunk in kept {
        tokens.extend(chunk.tokens());
        uid_positions.push(tokens.len() - 1);
    }
    ChunkSequence { tokens, uid_positions }
}

/// A split corpus with every item replaced by its chunk.
#[derive(Debug, Clone)]
pub struct TokenizedUser {
    pub user_index: u32,
    pub train_chunks: Vec<Chunk>,
    pub valid_chunk: Chunk,
    pub test_chunk: Chunk,
}

#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    pub layout: VocabLayout,
    pub users: Vec<TokenizedUser>,
}

/// Chunk every user in a split corpus. `sids[i]` is item `i`'s SID tuple.
pub fn tokenize_corpus(
    split: &SplitCorpus,
    sids: &[SidTuple],
    layout: &VocabLayout,
) -> Result<TokenizedCorpus> {
    let chunk_of = |item: u32| -> Result<Chunk> {
        let idx = item as usize;
        let tuple = sids
            .get(idx)
            .ok_or_else(|| Error::Corpus(format!("item {idx} has no SID tuple")))?;
        build_chunk(idx, tuple, layout)
    };
    let mut users = Vec::with_capacity(split.users.len());
    for u in &split.users {
        users.push(TokenizedUser {
            user_index: u.user_index,
            train_chunks: u.train_items.iter().map(|&i| chunk_of(i)).collect::<Result<_>>()?,
            valid_chunk: chunk_of(u.valid_target)?,
            test_chunk: chunk_of(u.test_target)?,
        });
    }
    Ok(TokenizedCorpus { layout: *layout, users })
}

/// Write flattened token sequences, one `user_index \t t1 t2 ...` line per user.
pub fn write_tokenized(path: &Path, corpus: &TokenizedCorpus) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for u in &corpus.users {
        let seq = flatten_history(&u.train_chunks, &corpus.layout);
        let toks: Vec<String> = seq.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}\t{}", u.user_index, toks.join(" "))?;
    }
    Ok(())
}

/// Read a tokenized-corpus file back into raw token rows.
pub fn read_tokenized(path: &Path) -> Result<Vec<(u32, Vec<u32>)>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (user, toks) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected `user_index<TAB>tokens`".into(),
        })?;
        let user: u32 = user
            .parse()
            .map_err(|e| Error::Parse { line: lineno, msg: format!("user index: {e}") })?;
        let toks = toks
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: lineno, msg: format!("token: {e}") })?;
        rows.push((user, toks));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout_4_256_100() -> VocabLayout {
        VocabLayout::new(4, 256, 100)
    }

    #[test]
    fn chunk_token_formula() {
        let layout = layout_4_256_100();
        let chunk =
            build_chunk(0, &SidTuple { codes: vec![0, 0, 0, 0] }, &layout).unwrap();
        let toks: Vec<u32> = chunk.tokens().collect();
        assert_eq!(toks, vec![2, 258, 514, 770, 1026]);
    }

    #[test]
    fn level_one_code_five_is_token_seven() {
        let layout = layout_4_256_100();
        assert_eq!(layout.sid_token(1, 5).unwrap(), 7);
    }

    #[test]
    fn last_item_is_last_vocab_token() {
        let layout = layout_4_256_100();
        let n = layout.item_count;
        assert_eq!(layout.uid_token(n - 1).unwrap() as usize, layout.vocab_size() - 1);
    }

    #[test]
    fn out_of_range_inputs_error() {
        let layout = layout_4_256_100();
        assert!(layout.sid_token(1, 256).is_err());
        assert!(layout.sid_token(5, 0).is_err());
        assert!(layout.uid_token(100).is_err());
        assert!(layout.decode_token(layout.vocab_size() as u32).is_err());
    }

    #[test]
    fn flatten_empty_history_is_bos() {
        let layout = layout_4_256_100();
        let seq = flatten_history(&[], &layout);
        assert_eq!(seq.tokens, vec![BOS]);
        assert!(seq.uid_positions.is_empty());
    }

    #[test]
    fn flatten_two_chunks_n4() {
        let layout = layout_4_256_100();
        let c0 = build_chunk(3, &SidTuple { codes: vec![1, 2, 3, 4] }, &layout).unwrap();
        let c1 = build_chunk(7, &SidTuple { codes: vec![0, 0, 0, 0] }, &layout).unwrap();
        let seq = flatten_history(&[c0, c1], &layout);
        assert_eq!(seq.tokens.len(), 11);
        assert_eq!(seq.uid_positions, vec![5, 10]);
        assert!(layout.is_chunk_final_position(5));
        assert!(layout.is_chunk_final_position(10));
        assert!(!layout.is_chunk_final_position(4));
    }

    #[test]
    fn flatten_caps_at_twenty_most_recent() {
        let layout = layout_4_256_100();
        let chunks: Vec<Chunk> = (0..25)
            .map(|i| build_chunk(i, &SidTuple { codes: vec![0; 4] }, &layout).unwrap())
            .collect();
        let seq = flatten_history(&chunks, &layout);
        assert_eq!(seq.tokens.len(), 1 + 20 * 5);
        // Most recent 20 kept: the first chunk present is item 5.
        assert_eq!(layout.decode_token(seq.tokens[5]).unwrap(), Token::Uid(5));
    }

    #[test]
    fn decode_classifies_special_tokens() {
        let layout = layout_4_256_100();
        assert_eq!(layout.decode_token(0).unwrap(), Token::Pad);
        assert_eq!(layout.decode_token(1).unwrap(), Token::Bos);
    }

    #[test]
    fn vocab_ranges_are_disjoint_and_exhaustive() {
        let layout = VocabLayout::new(3, 5, 11);
        assert_eq!(layout.vocab_size(), 2 + 3 * 5 + 11);
        let mut seen_sid = 0;
        let mut seen_uid = 0;
        for t in 0..layout.vocab_size() as u32 {
            match layout.decode_token(t).unwrap() {
                Token::Pad => assert_eq!(t, 0),
                Token::Bos => assert_eq!(t, 1),
                Token::Sid { level, code } => {
                    assert_eq!(layout.sid_token(level, code).unwrap(), t);
                    assert!(layout.is_sid_token(t) && !layout.is_uid_token(t));
                    seen_sid += 1;
                }
                Token::Uid(i) => {
                    assert_eq!(layout.uid_token(i).unwrap(), t);
                    assert!(layout.is_uid_token(t) && !layout.is_sid_token(t));
                    seen_uid += 1;
                }
            }
        }
        assert_eq!(seen_sid, 15);
        assert_eq!(seen_uid, 11);
    }

    #[test]
    fn random_tokens_match_range_arithmetic_oracle() {
        use rand::{Rng, SeedableRng};
        let layout = VocabLayout::new(4, 7, 33);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let t = rng.gen_range(0..layout.vocab_size() as u32);
            // Independent range arithmetic.
            let expected = {
                let t = t as usize;
                if t == 0 {
                    Token::Pad
                } else if t == 1 {
                    Token::Bos
                } else if t < 2 + layout.levels * layout.k {
                    Token::Sid { level: (t - 2) / layout.k + 1, code: (t - 2) % layout.k }
                } else {
                    Token::Uid(t - 2 - layout.levels * layout.k)
                }
            };
            assert_eq!(layout.decode_token(t).unwrap(), expected);
        }
    }
}
