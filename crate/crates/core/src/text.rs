//! Word vocabularies, byte-pair encoding and sentence encoding.
//!
//! Every sentence is an independent modeling unit: `<bos>` is prepended as
//! conditioning input and `<eos>` appended as the final prediction target.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

/// Suffix marking a word-final BPE symbol.
pub const END_OF_WORD: &str = "</w>";

/// Padding id in batches; never a valid token.
pub const PAD: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved ids first, then `tokens` in the given order. Duplicates and
    /// reserved names are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r.to_string());
        }
        for t in tokens {
            v.push(t.into());
        }
        v
    }

    fn push(&mut self, t: String) {
        if !self.index.contains_key(&t) {
            self.index.insert(t.clone(), self.tokens.len());
            self.tokens.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::Vocabulary { id, size: self.len() })
    }

    /// One non-reserved token per line; line `i` holds id `i + 3`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut seen = 0;
        let v = Vocabulary::from_tokens(text.lines().inspect(|_| seen += 1));
        if v.len() != seen + RESERVED.len() {
            return Err(Error::Data(
                "vocabulary file has duplicate or reserved entries".into(),
            ));
        }
        Ok(v)
    }
}

fn words(corpus: &str) -> impl Iterator<Item = &str> {
    corpus.lines().flat_map(str::split_whitespace)
}

/// Keeps the `max_size` most frequent tokens, ties broken lexicographically.
pub fn build_vocab(corpus: &str, max_size: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in words(corpus) {
        if !RESERVED.contains(&w) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("corpus contains no tokens".into()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_tokens(
        ranked.into_iter().take(max_size).map(|(w, _)| w),
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
}

/// Initial segmentation: characters, the last one carrying the end marker.
fn split_chars(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

/// Merges every left-to-right, non-overlapping occurrence of `pair`.
fn merge_pair(syms: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Non-overlapping pair counts of one word occurrence.
pub(crate) fn pair_counts(syms: &[String]) -> BTreeMap<(String, String), usize> {
    let mut counts = BTreeMap::new();
    let mut last_start: HashMap<(&str, &str), usize> = HashMap::new();
    for i in 0..syms.len().saturating_sub(1) {
        let key = (syms[i].as_str(), syms[i + 1].as_str());
        if i > 0 && last_start.get(&key) == Some(&(i - 1)) {
            continue;
        }
        last_start.insert(key, i);
        *counts.entry((syms[i].clone(), syms[i + 1].clone())).or_default() += 1;
    }
    counts
}

impl BpeModel {
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Greedy most-frequent-pair merging for up to `n_merges` rounds. Also
    /// returns each training word's segmentation at the end of learning.
    pub fn learn_with_segmentation(
        corpus: &str,
        n_merges: usize,
    ) -> (BpeModel, BTreeMap<String, Vec<String>>) {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for w in words(corpus) {
            *freq.entry(w).or_default() += 1;
        }
        let mut segs: Vec<(&str, usize, Vec<String>)> =
            freq.into_iter().map(|(w, c)| (w, c, split_chars(w))).collect();
        let mut merges = Vec::new();
        for _ in 0..n_merges {
            let mut totals: BTreeMap<(String, String), usize> = BTreeMap::new();
            for (_, c, syms) in &segs {
                for (pair, n) in pair_counts(syms) {
                    *totals.entry(pair).or_default() += n * c;
                }
            }
            // BTreeMap iterates pairs in ascending order, so the first maximum
            // is the lexicographically smallest.
            let Some((best, _)) =
                totals
                    .into_iter()
                    .fold(None, |acc: Option<((String, String), usize)>, (p, n)| match acc {
                        Some((_, m)) if m >= n => acc,
                        _ => Some((p, n)),
                    })
            else {
                break;
            };
            for (_, _, syms) in &mut segs {
                *syms = merge_pair(syms, &best);
            }
            merges.push(best);
        }
        let seg_map = segs.into_iter().map(|(w, _, s)| (w.to_string(), s)).collect();
        (BpeModel { merges }, seg_map)
    }

    pub fn learn(corpus: &str, n_merges: usize) -> BpeModel {
        BpeModel::learn_with_segmentation(corpus, n_merges).0
    }

    /// Segments one word by replaying the merges in learned order.
    pub fn apply(&self, word: &str) -> Vec<String> {
        let mut syms = split_chars(word);
        for m in &self.merges {
            if syms.len() < 2 {
                break;
            }
            syms = merge_pair(&syms, m);
        }
        syms
    }

    pub fn apply_line(&self, line: &str) -> Vec<String> {
        line.split_whitespace().flat_map(|w| self.apply(w)).collect()
    }

    /// One merge per line: `left right`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(Error::Data(format!(
                        "BPE merge line {} is not `left right`: `{line}`",
                        i + 1
                    )))
                }
            }
        }
        let mut uniq = merges.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != merges.len() {
            return Err(Error::Data("BPE merge list contains duplicates".into()));
        }
        Ok(BpeModel { merges })
    }
}

/// Joins subword symbols back into words.
pub fn bpe_decode<S: AsRef<str>>(symbols: &[S]) -> String {
    let mut out = String::new();
    let mut word = String::new();
    for s in symbols {
        let s = s.as_ref();
        match s.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                word.push_str(stem);
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(&word);
                word.clear();
            }
            None => word.push_str(s),
        }
    }
    if !word.is_empty() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tokenizer {
    Word(Vocabulary),
    Bpe { model: BpeModel, vocab: Vocabulary },
}

impl Tokenizer {
    /// BPE tokenizer whose symbol vocabulary covers every symbol produced on
    /// `corpus`, most frequent first.
    pub fn bpe(model: BpeModel, corpus: &str) -> Result<Self> {
        let segmented: String = corpus
            .lines()
            .map(|l| model.apply_line(l).join(" "))
            .collect::<Vec<_>>()
            .join("\n");
        let vocab = build_vocab(&segmented, usize::MAX)?;
        Ok(Tokenizer::Bpe { model, vocab })
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            Tokenizer::Word(v) => v,
            Tokenizer::Bpe { vocab, .. } => vocab,
        }
    }

    pub fn tokens(&self, line: &str) -> Vec<String> {
        match self {
            Tokenizer::Word(_) => line.split_whitespace().map(String::from).collect(),
            Tokenizer::Bpe { model, .. } => model.apply_line(line),
        }
    }

    /// `[<bos>, tokens…, <eos>]`
    pub fn encode_sentence(&self, line: &str) -> Vec<usize> {
        let v = self.vocab();
        let mut ids = vec![BOS];
        ids.extend(self.tokens(line).iter().map(|t| v.id(t)));
        ids.push(EOS);
        ids
    }

    /// Inverse of [`Tokenizer::encode_sentence`] up to `<unk>` and
    /// whitespace; reserved markers are dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let v = self.vocab();
        let mut toks = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == BOS || id == EOS {
                continue;
            }
            toks.push(v.token(id)?);
        }
        Ok(match self {
            Tokenizer::Word(_) => toks.join(" "),
            Tokenizer::Bpe { .. } => bpe_decode(&toks),
        })
    }

    pub fn encode_corpus(&self, text: &str) -> Vec<Vec<usize>> {
        text.lines().map(|l| self.encode_sentence(l)).collect()
    }
}

pub fn encode_sentence(line: &str, tokenizer: &Tokenizer) -> Vec<usize> {
    tokenizer.encode_sentence(line)
}

/// Number of predicted tokens in an encoded sentence: everything after
/// `<bos>`, including `<eos>`.
pub fn prediction_count(sentence: &[usize]) -> usize {
    sentence.len().saturating_sub(1)
}

/// Sentences of similar length padded to a common width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Input ids per row, `PAD` beyond the row's length.
    pub inputs: Vec<Vec<usize>>,
    /// Targets per row, `None` at padded positions.
    pub targets: Vec<Vec<Option<usize>>>,
    /// Unpadded input length per row.
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[usize], &[Option<usize>])> {
        self.inputs
            .iter()
            .zip(&self.targets)
            .zip(&self.lengths)
            .map(|((i, t), &n)| (&i[..n], &t[..n]))
    }
}

/// Groups the sentences selected by `order` into length-bucketed batches.
pub fn make_batches(sentences: &[Vec<usize>], order: &[usize], batch_size: usize) -> Vec<Batch> {
    let batch_size = batch_size.max(1);
    let mut idx: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| sentences[i].len() >= 2)
        .collect();
    idx.sort_by_key(|&i| sentences[i].len());
    idx.chunks(batch_size)
        .map(|chunk| {
            let width = chunk.iter().map(|&i| sentences[i].len() - 1).max().unwrap_or(0);
            let mut b = Batch {
                inputs: Vec::with_capacity(chunk.len()),
                targets: Vec::with_capacity(chunk.len()),
                lengths: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let s = &sentences[i];
                let n = s.len() - 1;
                let mut inp = s[..n].to_vec();
                inp.resize(width, PAD);
                let mut tgt: Vec<Option<usize>> = s[1..].iter().copied().map(Some).collect();
                tgt.resize(width, None);
                b.inputs.push(inp);
                b.targets.push(tgt);
                b.lengths.push(n);
            }
            b
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_frequency_order_and_unk() {
        let v = build_vocab("a a b", 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), UNK);

        let v = build_vocab("c b\nb a c", 10).unwrap();
        let ids: Vec<&str> = (3..v.len()).map(|i| v.token(i).unwrap()).collect();
        assert_eq!(ids, ["b", "c", "a"]);
        assert!(words("c b\nb a c").all(|w| v.id(w) != UNK));
        assert_eq!(build_vocab("c b\nb a c", 10).unwrap(), v);
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        assert!(matches!(build_vocab("", 5), Err(Error::Data(_))));
        assert!(matches!(build_vocab("\n  \n", 5), Err(Error::Data(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab("x y z y", 10).unwrap();
        let text = v.to_file_string();
        assert_eq!(text.lines().next(), Some("y"));
        assert_eq!(Vocabulary::from_file_string(&text).unwrap(), v);
        assert!(Vocabulary::from_file_string("a\na\n").is_err());
    }

    #[test]
    fn sentence_conventions() {
        let tok = Tokenizer::Word(build_vocab("a b", 10).unwrap());
        let ids = tok.encode_sentence("a b");
        assert_eq!(ids, vec![BOS, tok.vocab().id("a"), tok.vocab().id("b"), EOS]);
        assert_eq!(tok.encode_sentence(""), vec![BOS, EOS]);
        assert_eq!(prediction_count(&ids), 3);
        assert_eq!(
            tok.decode(&tok.encode_sentence("  a   q b ")).unwrap(),
            "a <unk> b"
        );
    }

    #[test]
    fn zero_merges_split_to_characters() {
        let m = BpeModel::learn("abc", 0);
        assert_eq!(m.apply("abc"), vec!["a", "b", "c</w>"]);
    }

    #[test]
    fn non_overlapping_pair_counts() {
        let syms = split_chars("aaaaa");
        let c = pair_counts(&syms);
        assert_eq!(c[&("a".to_string(), "a".to_string())], 2);
        assert_eq!(c[&("a".to_string(), "a</w>".to_string())], 1);
    }

    #[test]
    fn single_merge_on_aaab() {
        let corpus = ["aaab"; 5].join("\n");
        // Oracle: non-overlapping counts in a a a b</w> are (a,a)=1 and
        // (a,b</w>)=1 per occurrence; the tie goes to the smaller pair.
        let (m, segs) = BpeModel::learn_with_segmentation(&corpus, 1);
        assert_eq!(m.merges(), &[("a".to_string(), "a".to_string())]);
        assert_eq!(m.apply("aaab"), vec!["aa", "a", "b</w>"]);
        assert_eq!(segs["aaab"], m.apply("aaab"));
    }

    #[test]
    fn learning_stops_when_no_pairs_remain() {
        let m = BpeModel::learn("ab ab", 50);
        assert_eq!(m.merges().len(), 1);
        assert_eq!(m.apply("ab"), vec!["ab</w>"]);
    }

    #[test]
    fn bpe_file_round_trip() {
        let m = BpeModel::learn("the cat sat on the mat\nthe hat", 8);
        let back = BpeModel::from_file_string(&m.to_file_string()).unwrap();
        assert_eq!(back, m);
        assert!(BpeModel::from_file_string("a b c\n").is_err());
        assert!(BpeModel::from_file_string("a b\na b\n").is_err());
    }

    #[test]
    fn bpe_tokenizer_round_trip() {
        let corpus = "low lower lowest\nnew newer newest\nwide wider widest";
        let tok = Tokenizer::bpe(BpeModel::learn(corpus, 10), corpus).unwrap();
        for line in corpus.lines() {
            let ids = tok.encode_sentence(line);
            assert!(!ids.contains(&UNK));
            assert_eq!(tok.decode(&ids).unwrap(), line);
        }
    }

    #[test]
    fn batches_bucket_and_pad() {
        let sents = vec![vec![0, 5, 1], vec![0, 5, 6, 7, 1], vec![0, 1], vec![0, 4, 4, 1]];
        let batches = make_batches(&sents, &[0, 1, 2, 3], 2);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].lengths, vec![1, 2]);
        assert_eq!(batches[1].inputs[0], vec![0, 4, 4, PAD]);
        assert_eq!(batches[1].targets[0], vec![Some(4), Some(4), Some(1), None]);
        let total: usize = batches.iter().map(Batch::token_count).sum();
        assert_eq!(total, sents.iter().map(|s| prediction_count(s)).sum::<usize>());
    }

    proptest! {
        #[test]
        fn bpe_is_prefix_stable(words in proptest::collection::vec("[a-d]{1,6}", 1..8), n in 0usize..20) {
            let corpus = words.join(" ");
            let m = BpeModel::learn(&corpus, n);
            let line: Vec<String> = m.apply_line(&corpus);
            let per_word: Vec<String> = words.iter().flat_map(|w| m.apply(w)).collect();
            prop_assert_eq!(line, per_word);
            for w in &words {
                prop_assert_eq!(&bpe_decode(&m.apply(w)), w);
            }
        }

        #[test]
        fn word_round_trip_modulo_whitespace(
            parts in proptest::collection::vec(("(a|b|c)", "[ \t]{1,3}"), 0..8),
        ) {
            let tok = Tokenizer::Word(build_vocab("a b c", 10).unwrap());
            let line: String = parts.iter().map(|(w, sp)| format!("{sp}{w}")).collect();
            let norm = parts.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(tok.decode(&tok.encode_sentence(&line)).unwrap(), norm);
        }
    }
}
