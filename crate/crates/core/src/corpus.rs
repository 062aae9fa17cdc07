//! Corpus ingestion: vocabularies, sentence encoding, parallel and
//! monolingual loading, and token-budgeted batching.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bidirectional token/id map. Ids 0..4 are reserved for PAD, BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose content ids follow the iteration order,
    /// starting at 4. Duplicates and special-token spellings are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            token_to_id: HashMap::new(),
            id_to_token: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
        };
        for tok in tokens {
            let tok = tok.into();
            if SPECIAL_TOKENS.contains(&tok.as_str()) || vocab.token_to_id.contains_key(&tok) {
                continue;
            }
            vocab.token_to_id.insert(tok.clone(), vocab.id_to_token.len() as u32);
            vocab.id_to_token.push(tok);
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Content-token id, or `None` for unknown words and special spellings.
    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Content tokens in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    /// Joins ids back into a whitespace-separated line, skipping BOS/EOS/PAD.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One content token per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        for tok in self.content_tokens() {
            text.push_str(tok);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_tokens(text.lines().map(str::trim).filter(|l| !l.is_empty())))
    }
}

/// Counts whitespace tokens and keeps those seen at least `min_count` times,
/// most frequent first with lexicographic tie-break. `max_size` bounds the
/// total size including the four reserved ids.
pub fn build_vocab<I, S>(lines: I, min_count: usize, max_size: usize) -> Vocabulary
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    assert!(min_count >= 1, "min_count must be at least 1");
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in lines {
        for tok in line.as_ref().split_whitespace() {
            if SPECIAL_TOKENS.contains(&tok) {
                continue;
            }
            *counts.entry(tok.to_string()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size.saturating_sub(NUM_SPECIALS));
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// A sentence as content ids: no PAD, no BOS, no EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        debug_assert!(
            ids.iter().all(|&id| id != PAD && id != EOS),
            "token sequences never store PAD or EOS"
        );
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self::new(ids)
    }
}

/// Unknown words map to UNK. Special-token spellings are treated as unknown.
pub fn encode_sentence(vocab: &Vocabulary, text: &str) -> Result<TokenSequence> {
    let ids: Vec<u32> = text
        .split_whitespace()
        .map(|tok| vocab.id(tok).unwrap_or(UNK))
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptySentence);
    }
    Ok(TokenSequence(ids))
}

/// Where a training pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Bilingual,
    PseudoFromSourceMono,
    PseudoFromTargetMono,
}

impl Origin {
    pub fn tag(self) -> &'static str {
        match self {
            Origin::Bilingual => "B",
            Origin::PseudoFromSourceMono => "MS",
            Origin::PseudoFromTargetMono => "MT",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "B" => Some(Origin::Bilingual),
            "MS" => Some(Origin::PseudoFromSourceMono),
            "MT" => Some(Origin::PseudoFromTargetMono),
            _ => None,
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src: TokenSequence,
    pub tgt: TokenSequence,
    origin: Origin,
}

impl SentencePair {
    /// Panics if either side is empty.
    pub fn new(src: TokenSequence, tgt: TokenSequence, origin: Origin) -> Self {
        assert!(
            !src.is_empty() && !tgt.is_empty(),
            "sentence pairs need two non-empty sides"
        );
        Self { src, tgt, origin }
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn num_tokens(&self) -> usize {
        self.src.len().max(self.tgt.len())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<SentencePair>,
    pub src_vocab: Arc<Vocabulary>,
    pub tgt_vocab: Arc<Vocabulary>,
}

impl Dataset {
    pub fn new(src_vocab: Arc<Vocabulary>, tgt_vocab: Arc<Vocabulary>) -> Self {
        Self {
            pairs: Vec::new(),
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn shares_vocab(&self, other: &Dataset) -> bool {
        (Arc::ptr_eq(&self.src_vocab, &other.src_vocab) || self.src_vocab == other.src_vocab)
            && (Arc::ptr_eq(&self.tgt_vocab, &other.tgt_vocab) || self.tgt_vocab == other.tgt_vocab)
    }

    /// Swaps source and target sides, for training a reverse-direction model.
    pub fn reversed(&self) -> Dataset {
        Dataset {
            pairs: self
                .pairs
                .iter()
                .map(|p| SentencePair::new(p.tgt.clone(), p.src.clone(), p.origin))
                .collect(),
            src_vocab: self.tgt_vocab.clone(),
            tgt_vocab: self.src_vocab.clone(),
        }
    }

    pub fn count_origin(&self, origin: Origin) -> usize {
        self.pairs.iter().filter(|p| p.origin == origin).count()
    }

    /// Writes `<prefix>.src`, `<prefix>.tgt` and the `<prefix>.origin` sidecar.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        let mut src = String::new();
        let mut tgt = String::new();
        let mut origin = String::new();
        for p in &self.pairs {
            src.push_str(&self.src_vocab.decode(p.src.ids()));
            src.push('\n');
            tgt.push_str(&self.tgt_vocab.decode(p.tgt.ids()));
            tgt.push('\n');
            origin.push_str(p.origin.tag());
            origin.push('\n');
        }
        for (ext, text) in [("src", src), ("tgt", tgt), ("origin", origin)] {
            let path = prefix.with_extension(ext);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads a corpus written by [`Dataset::save`]. A missing origin file
    /// means every pair is bilingual.
    pub fn load(prefix: impl AsRef<Path>, src_vocab: Arc<Vocabulary>, tgt_vocab: Arc<Vocabulary>) -> Result<Self> {
        let prefix = prefix.as_ref();
        let src_lines = read_lines(&prefix.with_extension("src"))?;
        let tgt_lines = read_lines(&prefix.with_extension("tgt"))?;
        if src_lines.len() != tgt_lines.len() {
            return Err(Error::LineCountMismatch {
                src: src_lines.len(),
                tgt: tgt_lines.len(),
            });
        }
        let origin_path = prefix.with_extension("origin");
        let origins = if origin_path.exists() {
            let tags = read_lines(&origin_path)?;
            if tags.len() != src_lines.len() {
                return Err(Error::LineCountMismatch {
                    src: src_lines.len(),
                    tgt: tags.len(),
                });
            }
            tags.iter()
                .map(|t| {
                    Origin::from_tag(t.trim()).ok_or_else(|| Error::config("origin", format!("unknown tag `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![Origin::Bilingual; src_lines.len()]
        };
        let mut ds = Dataset::new(src_vocab, tgt_vocab);
        for ((s, t), o) in src_lines.iter().zip(&tgt_lines).zip(origins) {
            if let (Ok(src), Ok(tgt)) = (encode_sentence(&ds.src_vocab, s), encode_sentence(&ds.tgt_vocab, t)) {
                ds.pairs.push(SentencePair::new(src, tgt, o));
            }
        }
        Ok(ds)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Loads two aligned files. Pairs where either side is empty or longer than
/// `max_len` tokens are dropped; order is preserved.
pub fn load_parallel(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
    src_vocab: Arc<Vocabulary>,
    tgt_vocab: Arc<Vocabulary>,
    max_len: usize,
) -> Result<Dataset> {
    let src_lines = read_lines(src_path.as_ref())?;
    let tgt_lines = read_lines(tgt_path.as_ref())?;
    parallel_from_lines(&src_lines, &tgt_lines, src_vocab, tgt_vocab, max_len)
}

pub fn parallel_from_lines<S: AsRef<str>>(
    src_lines: &[S],
    tgt_lines: &[S],
    src_vocab: Arc<Vocabulary>,
    tgt_vocab: Arc<Vocabulary>,
    max_len: usize,
) -> Result<Dataset> {
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch {
            src: src_lines.len(),
            tgt: tgt_lines.len(),
        });
    }
    let mut ds = Dataset::new(src_vocab, tgt_vocab);
    for (s, t) in src_lines.iter().zip(tgt_lines) {
        let (Ok(src), Ok(tgt)) = (
            encode_sentence(&ds.src_vocab, s.as_ref()),
            encode_sentence(&ds.tgt_vocab, t.as_ref()),
        ) else {
            continue;
        };
        if src.len() <= max_len && tgt.len() <= max_len {
            ds.pairs.push(SentencePair::new(src, tgt, Origin::Bilingual));
        }
    }
    Ok(ds)
}

/// Loads one sentence per line, dropping empty lines and lines over `max_len`.
pub fn load_mono(path: impl AsRef<Path>, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    let lines = read_lines(path.as_ref())?;
    Ok(mono_from_lines(&lines, vocab, max_len))
}

pub fn mono_from_lines<S: AsRef<str>>(lines: &[S], vocab: &Vocabulary, max_len: usize) -> Vec<TokenSequence> {
    lines
        .iter()
        .filter_map(|l| encode_sentence(vocab, l.as_ref()).ok())
        .filter(|s| s.len() <= max_len)
        .collect()
}

/// A mini-batch of borrowed pairs.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub pairs: Vec<&'a SentencePair>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn src_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.src.len()).sum()
    }

    pub fn tgt_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.tgt.len()).sum()
    }
}

/// Shuffles the dataset under `seed` and greedily packs pairs so that both the
/// source and the target token totals of every batch stay within `max_tokens`.
pub fn make_batches(dataset: &Dataset, max_tokens: usize, seed: u64) -> Result<Vec<Batch<'_>>> {
    if let Some((index, pair)) = dataset
        .pairs
        .iter()
        .enumerate()
        .find(|(_, p)| p.num_tokens() > max_tokens)
    {
        return Err(Error::OversizedPair {
            index,
            tokens: pair.num_tokens(),
            budget: max_tokens,
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut batches = Vec::new();
    let mut current = Batch { pairs: Vec::new() };
    let (mut src_used, mut tgt_used) = (0, 0);
    for i in order {
        let pair = &dataset.pairs[i];
        if !current.is_empty() && (src_used + pair.src.len() > max_tokens || tgt_used + pair.tgt.len() > max_tokens) {
            batches.push(std::mem::replace(&mut current, Batch { pairs: Vec::new() }));
            src_used = 0;
            tgt_used = 0;
        }
        src_used += pair.src.len();
        tgt_used += pair.tgt.len();
        current.pairs.push(pair);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab_ab() -> Vocabulary {
        build_vocab(["a b a"], 1, 100)
    }

    #[test]
    fn build_vocab_orders_by_frequency() {
        let v = vocab_ab();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.token(0), Some("<pad>"));
    }

    #[test]
    fn build_vocab_applies_min_count() {
        let v = build_vocab(["a b", "b c", "c", "c"], 2, 100);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("c"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("a"), None);
    }

    #[test]
    fn build_vocab_empty_stream_has_only_specials() {
        let v = build_vocab(Vec::<String>::new(), 1, 100);
        assert_eq!(v.len(), NUM_SPECIALS);
    }

    #[test]
    fn build_vocab_ties_are_lexicographic_and_truncated() {
        let v = build_vocab(["z y x w"], 1, 6);
        assert_eq!(v.content_tokens(), &["w".to_string(), "x".to_string()]);
    }

    #[test]
    fn special_spellings_never_become_content() {
        let v = build_vocab(["</s> <pad> a"], 1, 100);
        assert_eq!(v.len(), 5);
        assert_eq!(encode_sentence(&v, "</s> a").unwrap().ids(), &[UNK, 4]);
    }

    #[test]
    fn encode_known_unknown_and_empty() {
        let v = vocab_ab();
        assert_eq!(encode_sentence(&v, "a b").unwrap().ids(), &[4, 5]);
        assert_eq!(encode_sentence(&v, "a z").unwrap().ids(), &[4, 3]);
        assert!(matches!(encode_sentence(&v, ""), Err(Error::EmptySentence)));
        assert!(matches!(encode_sentence(&v, "   "), Err(Error::EmptySentence)));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(["x y y z z z"], 1, 100);
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    fn toy_dataset(lens: &[(usize, usize)]) -> Dataset {
        let v = Arc::new(Vocabulary::from_tokens(["a", "b"]));
        let mut ds = Dataset::new(v.clone(), v);
        for &(s, t) in lens {
            ds.pairs.push(SentencePair::new(
                TokenSequence::new(vec![4; s]),
                TokenSequence::new(vec![5; t]),
                Origin::Bilingual,
            ));
        }
        ds
    }

    #[test]
    fn batches_fill_greedily() {
        let ds = toy_dataset(&[(2, 2); 4]);
        let batches = make_batches(&ds, 4, 7).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 2));
        assert_eq!(make_batches(&ds, 8, 7).unwrap().len(), 1);
    }

    #[test]
    fn oversized_pair_is_an_error() {
        let ds = toy_dataset(&[(2, 2), (1, 5)]);
        assert!(matches!(
            make_batches(&ds, 4, 0),
            Err(Error::OversizedPair { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn batches_partition_the_dataset(
            lens in prop::collection::vec((1usize..6, 1usize..6), 0..40),
            budget in 6usize..20,
            seed in any::<u64>(),
        ) {
            let ds = toy_dataset(&lens);
            let batches = make_batches(&ds, budget, seed).unwrap();
            let mut seen: Vec<usize> = batches
                .iter()
                .flat_map(|b| b.pairs.iter().map(|p| {
                    ds.pairs.iter().position(|q| std::ptr::eq(q, *p)).unwrap()
                }))
                .collect();
            for b in &batches {
                prop_assert!(b.src_tokens() <= budget && b.tgt_tokens() <= budget);
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());

            let again = make_batches(&ds, budget, seed).unwrap();
            let same = batches.iter().zip(&again).all(|(a, b)| {
                a.pairs.iter().zip(&b.pairs).all(|(x, y)| std::ptr::eq(*x, *y))
            });
            prop_assert!(same && batches.len() == again.len());
        }

        #[test]
        fn decode_inverts_encode(words in prop::collection::vec("[a-e]{1,3}", 1..10)) {
            let line = words.join(" ");
            let vocab = build_vocab([line.as_str()], 1, 1000);
            let seq = encode_sentence(&vocab, &line).unwrap();
            prop_assert_eq!(vocab.decode(seq.ids()), line);
        }
    }
}
