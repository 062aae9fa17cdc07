//! Synthetic translation tasks small enough to train in seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    /// Target equals source.
    Copy,
    /// Each source symbol maps to a fixed target symbol.
    Substitution,
    /// Substitution applied to the reversed source.
    ReversedSubstitution,
}

impl ToyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "copy" => Some(ToyKind::Copy),
            "substitution" => Some(ToyKind::Substitution),
            "reversed-substitution" => Some(ToyKind::ReversedSubstitution),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTask {
    pub kind: ToyKind,
    /// Number of content symbols per language.
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl ToyTask {
    pub fn new(kind: ToyKind, alphabet: usize, min_len: usize, max_len: usize) -> Self {
        assert!((1..=26).contains(&alphabet) && min_len >= 1 && min_len <= max_len);
        Self {
            kind,
            alphabet,
            min_len,
            max_len,
        }
    }

    fn src_symbol(&self, i: usize) -> String {
        ((b'a' + i as u8) as char).to_string()
    }

    fn tgt_symbol(&self, i: usize) -> String {
        match self.kind {
            ToyKind::Copy => self.src_symbol(i),
            // fixed permutation i -> (3i + 1) mod k when gcd(3, k) = 1, else a shift
            _ => {
                let k = self.alphabet;
                let j = if !k.is_multiple_of(3) {
                    (3 * i + 1) % k
                } else {
                    (i + 1) % k
                };
                ((b'A' + j as u8) as char).to_string()
            }
        }
    }

    pub fn vocabs(&self) -> (Vocabulary, Vocabulary) {
        let src = Vocabulary::from_tokens((0..self.alphabet).map(|i| self.src_symbol(i)));
        let mut tgt_tokens: Vec<String> = (0..self.alphabet).map(|i| self.tgt_symbol(i)).collect();
        tgt_tokens.sort();
        (src, Vocabulary::from_tokens(tgt_tokens))
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.min_len..=self.max_len);
        (0..len).map(|_| rng.gen_range(0..self.alphabet)).collect()
    }

    pub fn translate(&self, src: &[usize]) -> String {
        let ordered: Vec<usize> = match self.kind {
            ToyKind::ReversedSubstitution => src.iter().rev().copied().collect(),
            _ => src.to_vec(),
        };
        ordered
            .iter()
            .map(|&i| self.tgt_symbol(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `n` aligned source and target lines.
    pub fn parallel(&self, n: usize, seed: u64) -> (Vec<String>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let s = self.sentence(&mut rng);
                let src = s.iter().map(|&i| self.src_symbol(i)).collect::<Vec<_>>().join(" ");
                (src, self.translate(&s))
            })
            .unzip()
    }
}
