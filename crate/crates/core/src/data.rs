//! Corpus loading, vocabularies and padded batches.
//!
//! A split lives in `<dir>/<split>/` as three aligned, newline-delimited UTF-8
//! files: `seq.in` (space-separated tokens), `seq.out` (one BIO tag per token)
//! and `label` (one intent per line).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const OUTSIDE: &str = "O";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{split}: seq.in has {inputs} lines, seq.out {outputs}, label {labels}")]
    LineCount {
        split: String,
        inputs: usize,
        outputs: usize,
        labels: usize,
    },
    #[error("unknown intent label {0:?}")]
    UnknownIntent(String),
    #[error("unknown slot tag {0:?}")]
    UnknownTag(String),
    #[error("invalid BIO sequence at position {position}: {tag} follows {prev}")]
    InvalidTransition { position: usize, prev: String, tag: String },
    #[error("malformed tag {0:?}")]
    MalformedTag(String),
    #[error("{0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One annotated utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub slot_tags: Vec<String>,
    pub intent: String,
}

/// A parsed BIO tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bio<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Bio<'a> {
    pub fn parse(tag: &'a str) -> Option<Self> {
        if tag == OUTSIDE {
            return Some(Bio::Outside);
        }
        match tag.split_once('-') {
            Some(("B", ty)) if !ty.is_empty() => Some(Bio::Begin(ty)),
            Some(("I", ty)) if !ty.is_empty() => Some(Bio::Inside(ty)),
            _ => None,
        }
    }

    pub fn slot_type(self) -> Option<&'a str> {
        match self {
            Bio::Outside => None,
            Bio::Begin(t) | Bio::Inside(t) => Some(t),
        }
    }
}

impl Utterance {
    pub fn new(tokens: Vec<String>, slot_tags: Vec<String>, intent: impl Into<String>) -> Self {
        Self {
            tokens,
            slot_tags,
            intent: intent.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks tag well-formedness and, when `strict`, that every `I-x`
    /// continues a `B-x`/`I-x`.
    pub fn validate(&self, strict: bool) -> Result<()> {
        if self.tokens.len() != self.slot_tags.len() {
            return Err(DataError::Parse {
                path: PathBuf::new(),
                line: 0,
                msg: format!("{} tokens but {} tags", self.tokens.len(), self.slot_tags.len()),
            });
        }
        if let Some((position, prev, tag)) = first_bad_transition(&self.slot_tags)? {
            if strict {
                return Err(DataError::InvalidTransition {
                    position,
                    prev: prev.to_string(),
                    tag: tag.to_string(),
                });
            }
        }
        Ok(())
    }
}

fn first_bad_transition(tags: &[String]) -> Result<Option<(usize, &str, &str)>> {
    let mut prev = OUTSIDE;
    for (i, tag) in tags.iter().enumerate() {
        let cur = Bio::parse(tag).ok_or_else(|| DataError::MalformedTag(tag.clone()))?;
        if let Bio::Inside(ty) = cur {
            let continues = matches!(
                Bio::parse(prev),
                Some(Bio::Begin(p)) | Some(Bio::Inside(p)) if p == ty
            );
            if !continues {
                return Ok(Some((i, prev, tag)));
            }
        }
        prev = tag;
    }
    Ok(None)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    #[serde(default)]
    pub lowercase: bool,
    #[serde(default)]
    pub strict_bio: bool,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads `<dir>/<split>/{seq.in,seq.out,label}`.
pub fn load_split(dir: &Path, split: Split, opts: LoadOptions) -> Result<Vec<Utterance>> {
    load_files(&dir.join(split.dir_name()), opts)
}

/// Reads a directory holding `seq.in`, `seq.out` and `label`.
pub fn load_files(dir: &Path, opts: LoadOptions) -> Result<Vec<Utterance>> {
    let in_path = dir.join("seq.in");
    let out_path = dir.join("seq.out");
    let inputs = read_lines(&in_path)?;
    let outputs = read_lines(&out_path)?;
    let labels = read_lines(&dir.join("label"))?;
    if inputs.len() != outputs.len() || inputs.len() != labels.len() {
        return Err(DataError::LineCount {
            split: dir.display().to_string(),
            inputs: inputs.len(),
            outputs: outputs.len(),
            labels: labels.len(),
        });
    }
    let mut utts = Vec::with_capacity(inputs.len());
    let mut warned = 0usize;
    for (i, ((line_in, line_out), label)) in inputs.iter().zip(&outputs).zip(&labels).enumerate() {
        let tokens: Vec<String> = line_in
            .split_whitespace()
            .map(|t| {
                if opts.lowercase {
                    t.to_lowercase()
                } else {
                    t.to_string()
                }
            })
            .collect();
        let tags: Vec<String> = line_out.split_whitespace().map(str::to_string).collect();
        if tokens.len() != tags.len() {
            return Err(DataError::Parse {
                path: out_path.clone(),
                line: i + 1,
                msg: format!("{} tokens in seq.in but {} tags", tokens.len(), tags.len()),
            });
        }
        if tokens.is_empty() {
            return Err(DataError::Parse {
                path: in_path.clone(),
                line: i + 1,
                msg: "empty utterance".into(),
            });
        }
        let intent = label.trim();
        if intent.is_empty() {
            return Err(DataError::Parse {
                path: dir.join("label"),
                line: i + 1,
                msg: "missing intent label".into(),
            });
        }
        let utt = Utterance::new(tokens, tags, intent);
        match first_bad_transition(&utt.slot_tags).map_err(|e| DataError::Parse {
            path: out_path.clone(),
            line: i + 1,
            msg: e.to_string(),
        })? {
            Some((pos, prev, tag)) if opts.strict_bio => {
                return Err(DataError::Parse {
                    path: out_path.clone(),
                    line: i + 1,
                    msg: format!("invalid BIO transition at token {}: {tag} after {prev}", pos + 1),
                });
            }
            Some(_) => warned += 1,
            None => {}
        }
        utts.push(utt);
    }
    if warned > 0 {
        log::warn!(
            "{}: {warned} utterances contain I- tags that do not continue a span",
            dir.display()
        );
    }
    Ok(utts)
}

/// Corpus-level statistics in the shape of a dataset summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub utterances: usize,
    pub distinct_tokens: usize,
    pub distinct_tags: usize,
    pub distinct_intents: usize,
    pub average_length: f64,
}

pub fn corpus_stats(utts: &[Utterance]) -> CorpusStats {
    let mut tokens = std::collections::HashSet::new();
    let mut tags = std::collections::HashSet::new();
    let mut intents = std::collections::HashSet::new();
    let mut total = 0usize;
    for u in utts {
        total += u.len();
        tokens.extend(u.tokens.iter().map(String::as_str));
        tags.extend(u.slot_tags.iter().map(String::as_str));
        intents.insert(u.intent.as_str());
    }
    CorpusStats {
        utterances: utts.len(),
        distinct_tokens: tokens.len(),
        distinct_tags: tags.len(),
        distinct_intents: intents.len(),
        average_length: if utts.is_empty() {
            0.0
        } else {
            total as f64 / utts.len() as f64
        },
    }
}

/// Bidirectional string ↔ index map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Index {
    names: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Index {
    pub fn from_names(names: Vec<String>) -> Self {
        let lookup = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, lookup }
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn rebuild(&mut self) {
        *self = Self::from_names(std::mem::take(&mut self.names));
    }
}

/// Token, slot-tag and intent vocabularies built from a training split.
///
/// Tokens are ordered by descending frequency, ties broken lexicographically,
/// after the reserved `<pad>` (0) and `<unk>` (1). Tags put `O` first and the
/// rest in lexicographic order; intents are lexicographic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Index,
    pub tags: Index,
    pub intents: Index,
    pub lowercase: bool,
}

impl Vocab {
    pub fn build(train: &[Utterance], min_count: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(DataError::Empty("cannot build a vocabulary from no utterances"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut tags = std::collections::BTreeSet::new();
        let mut intents = std::collections::BTreeSet::new();
        for u in train {
            for t in &u.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
            tags.extend(u.slot_tags.iter().map(String::as_str));
            intents.insert(u.intent.as_str());
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut token_names = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        token_names.extend(ranked.into_iter().map(|(t, _)| t.to_string()));

        let mut tag_names = vec![OUTSIDE.to_string()];
        tag_names.extend(tags.into_iter().filter(|&t| t != OUTSIDE).map(str::to_string));

        Ok(Self {
            tokens: Index::from_names(token_names),
            tags: Index::from_names(tag_names),
            intents: Index::from_names(intents.into_iter().map(str::to_string).collect()),
            lowercase: false,
        })
    }

    /// Restores lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.tokens.rebuild();
        self.tags.rebuild();
        self.intents.rebuild();
    }

    pub fn token_id(&self, token: &str) -> usize {
        if self.lowercase {
            self.tokens.get(&token.to_lowercase()).unwrap_or(UNK)
        } else {
            self.tokens.get(token).unwrap_or(UNK)
        }
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.token_id(t.as_ref())).collect()
    }

    pub fn encode_tags<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| {
                self.tags
                    .get(t.as_ref())
                    .ok_or_else(|| DataError::UnknownTag(t.as_ref().to_string()))
            })
            .collect()
    }

    pub fn encode_intent(&self, intent: &str) -> Result<usize> {
        self.intents
            .get(intent)
            .ok_or_else(|| DataError::UnknownIntent(intent.to_string()))
    }

    /// Number of token rows including the reserved entries.
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    /// Writes `tokens.txt`, `tags.txt` and `intents.txt` into `dir`.
    pub fn save_lists(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (file, index) in [
            ("tokens.txt", &self.tokens),
            ("tags.txt", &self.tags),
            ("intents.txt", &self.intents),
        ] {
            let mut text = index.names().join("\n");
            text.push('\n');
            fs::write(dir.join(file), text)?;
        }
        Ok(())
    }

    pub fn load_lists(dir: &Path) -> Result<Self> {
        let read = |file: &str| read_lines(&dir.join(file)).map(Index::from_names);
        Ok(Self {
            tokens: read("tokens.txt")?,
            tags: read("tags.txt")?,
            intents: read("intents.txt")?,
            lowercase: false,
        })
    }
}

/// Padded index matrices for a group of utterances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub tags: Vec<Vec<usize>>,
    pub intents: Vec<usize>,
    pub lengths: Vec<usize>,
    pub mask: Vec<Vec<u8>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Unpadded token ids of row `i`.
    pub fn row_tokens(&self, i: usize) -> &[usize] {
        &self.tokens[i][..self.lengths[i]]
    }

    pub fn row_tags(&self, i: usize) -> &[usize] {
        &self.tags[i][..self.lengths[i]]
    }
}

/// Encodes utterances against `vocab`. Unknown tokens map to `<unk>`;
/// unknown tags or intents are errors.
pub fn encode_batch(utts: &[Utterance], vocab: &Vocab) -> Result<Batch> {
    if utts.is_empty() {
        return Err(DataError::Empty("cannot encode an empty batch"));
    }
    let max_len = utts.iter().map(Utterance::len).max().unwrap_or(0);
    let outside = vocab.tags.get(OUTSIDE).unwrap_or(0);
    let mut batch = Batch {
        tokens: Vec::with_capacity(utts.len()),
        tags: Vec::with_capacity(utts.len()),
        intents: Vec::with_capacity(utts.len()),
        lengths: Vec::with_capacity(utts.len()),
        mask: Vec::with_capacity(utts.len()),
    };
    for u in utts {
        let len = u.len();
        let mut toks = vocab.encode_tokens(&u.tokens);
        toks.resize(max_len, PAD);
        let mut tags = vocab.encode_tags(&u.slot_tags)?;
        tags.resize(max_len, outside);
        let mut mask = vec![1u8; len];
        mask.resize(max_len, 0);
        batch.tokens.push(toks);
        batch.tags.push(tags);
        batch.intents.push(vocab.encode_intent(&u.intent)?);
        batch.lengths.push(len);
        batch.mask.push(mask);
    }
    Ok(batch)
}

/// Inverse of [`encode_batch`] for in-vocabulary utterances.
pub fn decode_batch(batch: &Batch, vocab: &Vocab) -> Vec<Utterance> {
    (0..batch.size())
        .map(|i| Utterance {
            tokens: batch
                .row_tokens(i)
                .iter()
                .map(|&t| vocab.tokens.name(t).to_string())
                .collect(),
            slot_tags: batch
                .row_tags(i)
                .iter()
                .map(|&t| vocab.tags.name(t).to_string())
                .collect(),
            intent: vocab.intents.name(batch.intents[i]).to_string(),
        })
        .collect()
}

/// Groups utterance indices into batches of similar length.
///
/// Indices are sorted by length (stable), cut into consecutive chunks of
/// `batch_size`, and the chunk order is shuffled with `rng`.
pub fn bucket_batches<R: rand::Rng>(utts: &[Utterance], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let lengths: Vec<usize> = utts.iter().map(Utterance::len).collect();
    bucket_by_length(&lengths, batch_size, rng)
}

/// [`bucket_batches`] over precomputed lengths.
pub fn bucket_by_length<R: rand::Rng>(lengths: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    // shuffle first so equal-length utterances land in different batches each epoch
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Per-intent utterance counts, handy for corpus summaries.
pub fn intent_histogram(utts: &[Utterance]) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for u in utts {
        *hist.entry(u.intent.clone()).or_default() += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn utt(tokens: &str, tags: &str, intent: &str) -> Utterance {
        Utterance::new(
            tokens.split_whitespace().map(String::from).collect(),
            tags.split_whitespace().map(String::from).collect(),
            intent,
        )
    }

    fn write_split(dir: &Path, name: &str, inp: &str, out: &str, label: &str) {
        let d = dir.join(name);
        fs::create_dir_all(&d).unwrap();
        fs::write(d.join("seq.in"), inp).unwrap();
        fs::write(d.join("seq.out"), out).unwrap();
        fs::write(d.join("label"), label).unwrap();
    }

    #[test]
    fn loads_aligned_files() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(
            tmp.path(),
            "train",
            "play some jazz\nwhat is the weather\n",
            "O O B-genre\nO O O O\n",
            "PlayMusic\nGetWeather\n",
        );
        let utts = load_split(tmp.path(), Split::Train, LoadOptions::default()).unwrap();
        assert_eq!(utts.len(), 2);
        assert_eq!(utts[0], utt("play some jazz", "O O B-genre", "PlayMusic"));
    }

    #[test]
    fn empty_files_give_empty_split() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(tmp.path(), "valid", "", "", "");
        let utts = load_split(tmp.path(), Split::Valid, LoadOptions::default()).unwrap();
        assert!(utts.is_empty());
    }

    #[test]
    fn length_mismatch_reports_line() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(tmp.path(), "train", "a b\nc d e\n", "O O\nO O\n", "x\ny\n");
        let err = load_split(tmp.path(), Split::Train, LoadOptions::default()).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = load_split(tmp.path(), Split::Test, LoadOptions::default()).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn strict_mode_rejects_dangling_inside() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(tmp.path(), "train", "a b\n", "O I-x\n", "y\n");
        assert!(load_split(tmp.path(), Split::Train, LoadOptions::default()).is_ok());
        let strict = LoadOptions {
            strict_bio: true,
            ..LoadOptions::default()
        };
        assert!(load_split(tmp.path(), Split::Train, strict).is_err());
        assert!(utt("a b", "B-y I-x", "i").validate(true).is_err());
        assert!(utt("a b", "B-x I-x", "i").validate(true).is_ok());
    }

    #[test]
    fn lowercase_flag() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(tmp.path(), "train", "Play Jazz\n", "O B-genre\n", "PlayMusic\n");
        let opts = LoadOptions {
            lowercase: true,
            ..LoadOptions::default()
        };
        let utts = load_split(tmp.path(), Split::Train, opts).unwrap();
        assert_eq!(utts[0].tokens, vec!["play", "jazz"]);
    }

    #[test]
    fn vocab_orders_by_frequency_then_name() {
        let v = Vocab::build(&[utt("a a b", "O O O", "i")], 1).unwrap();
        assert_eq!(v.tokens.names(), &["<pad>", "<unk>", "a", "b"]);
        let v = Vocab::build(&[utt("a a b", "O O O", "i")], 2).unwrap();
        assert_eq!(v.token_id("b"), UNK);
        assert_eq!(v.token_id("a"), 2);
        let v = Vocab::build(&[utt("c b a", "B-z O B-a", "i")], 1).unwrap();
        assert_eq!(v.tokens.names(), &["<pad>", "<unk>", "a", "b", "c"]);
        assert_eq!(v.tags.names(), &["O", "B-a", "B-z"]);
        assert!(Vocab::build(&[], 1).is_err());
    }

    #[test]
    fn encode_pads_and_masks() {
        let train = vec![utt("a b", "O B-x", "i"), utt("a b c d", "O O O O", "j")];
        let v = Vocab::build(&train, 1).unwrap();
        let b = encode_batch(&train, &v).unwrap();
        assert_eq!(b.max_len(), 4);
        assert_eq!(b.mask[0], vec![1, 1, 0, 0]);
        assert_eq!(b.tokens[0][2], PAD);
        assert_eq!(b.tags[0][3], v.tags.get("O").unwrap());
        let single = encode_batch(&[utt("a b c", "O O O", "i")], &v).unwrap();
        assert_eq!(single.mask, vec![vec![1, 1, 1]]);
        let unk = encode_batch(&[utt("zzz", "O", "i")], &v).unwrap();
        assert_eq!(unk.tokens[0][0], UNK);
        assert!(matches!(
            encode_batch(&[utt("a", "O", "nope")], &v),
            Err(DataError::UnknownIntent(_))
        ));
        assert!(matches!(
            encode_batch(&[utt("a", "B-q", "i")], &v),
            Err(DataError::UnknownTag(_))
        ));
    }

    #[test]
    fn vocab_lists_round_trip() {
        let v = Vocab::build(&[utt("x y y", "O B-s I-s", "k")], 1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        v.save_lists(tmp.path()).unwrap();
        assert_eq!(Vocab::load_lists(tmp.path()).unwrap(), v);
    }

    #[test]
    fn buckets_cover_every_index_once() {
        let utts: Vec<Utterance> = (1..=10).map(|n| utt(&"w ".repeat(n), &"O ".repeat(n), "i")).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let batches = bucket_batches(&utts, 3, &mut rng);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 3));
    }

    fn arb_utterance() -> impl Strategy<Value = Utterance> {
        prop::collection::vec(
            ("[a-e]{1,3}", prop::sample::select(vec!["O", "B-x", "I-x", "B-y"])),
            1..8,
        )
        .prop_flat_map(|pairs| (Just(pairs), prop::sample::select(vec!["p", "q", "r"])))
        .prop_map(|(pairs, intent)| Utterance {
            tokens: pairs.iter().map(|(t, _)| t.clone()).collect(),
            slot_tags: pairs.iter().map(|(_, g)| g.to_string()).collect(),
            intent: intent.to_string(),
        })
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(utts in prop::collection::vec(arb_utterance(), 1..6)) {
            let v = Vocab::build(&utts, 1).unwrap();
            let b = encode_batch(&utts, &v).unwrap();
            for i in 0..b.size() {
                for t in 0..b.max_len() {
                    prop_assert_eq!(b.mask[i][t] == 1, t < b.lengths[i]);
                }
            }
            prop_assert_eq!(decode_batch(&b, &v), utts);
        }

        #[test]
        fn vocab_is_order_independent(utts in prop::collection::vec(arb_utterance(), 1..6), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = utts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(Vocab::build(&utts, 1).unwrap(), Vocab::build(&shuffled, 1).unwrap());
        }
    }
}
