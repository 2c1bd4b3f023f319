//! Corpus ingestion: schema parsing, quality labeling, length filtering,
//! vocabulary construction, training-instance assembly and split handling.

pub mod synth;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA: &str = "mtm-corpus-v1";
/// A comment is high quality iff its likes count is strictly greater.
pub const LIKES_THRESHOLD: u32 = 10;
pub const MIN_TOKENS: usize = 5;
pub const MAX_TOKENS: usize = 200;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SEP_TOKEN: &str = "<sep>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error reading corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing or malformed header line: expected {{\"schema\": \"{SCHEMA}\", ...}}")]
    MissingHeader,
    #[error("unknown schema version {0:?}")]
    UnknownSchema(String),
    #[error("line {line}: malformed record: {msg}")]
    MalformedRecord { line: usize, msg: String },
    #[error("line {line}: negative likes count {likes}")]
    NegativeLikes { line: usize, likes: i64 },
    #[error("line {line}: news type {found:?} not declared in the corpus header")]
    UndeclaredType { line: usize, found: String },
    #[error("empty corpus")]
    Empty,
    #[error("split fractions must sum to 1, got {0}")]
    BadFractions(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Low,
    High,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommentRecord {
    pub text: Vec<String>,
    pub likes: u32,
    pub replies: u32,
}

impl CommentRecord {
    /// Quality label derived from the likes count; strictly more than the
    /// threshold counts as high quality.
    pub fn label(&self) -> Label {
        if self.likes > LIKES_THRESHOLD {
            Label::High
        } else {
            Label::Low
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewsExample {
    pub title: Vec<String>,
    #[serde(rename = "abstract")]
    pub abstract_tokens: Vec<String>,
    /// Stored but never fed to the model.
    pub body: Vec<String>,
    #[serde(rename = "type")]
    pub news_type: String,
    pub comments: Vec<CommentRecord>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub types: Vec<String>,
    pub news: Vec<NewsExample>,
}

#[derive(Debug, Deserialize)]
struct Header {
    schema: String,
    types: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawComment {
    text: Vec<String>,
    likes: i64,
    replies: i64,
}

#[derive(Debug, Deserialize)]
struct RawNews {
    title: Vec<String>,
    #[serde(rename = "abstract")]
    abstract_tokens: Vec<String>,
    body: Vec<String>,
    #[serde(rename = "type")]
    news_type: String,
    comments: Vec<RawComment>,
}

/// Parses a line-delimited corpus file, reporting the first malformed line.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or(CorpusError::MissingHeader)??;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|_| CorpusError::MissingHeader)?;
    if header.schema != SCHEMA {
        return Err(CorpusError::UnknownSchema(header.schema));
    }

    let mut news = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawNews = serde_json::from_str(&line)
            .map_err(|e| CorpusError::MalformedRecord { line: lineno, msg: e.to_string() })?;
        if !header.types.contains(&raw.news_type) {
            return Err(CorpusError::UndeclaredType { line: lineno, found: raw.news_type });
        }
        let mut comments = Vec::with_capacity(raw.comments.len());
        for c in raw.comments {
            if c.likes < 0 {
                return Err(CorpusError::NegativeLikes { line: lineno, likes: c.likes });
            }
            if c.replies < 0 {
                return Err(CorpusError::MalformedRecord {
                    line: lineno,
                    msg: format!("negative replies count {}", c.replies),
                });
            }
            comments.push(CommentRecord {
                text: c.text,
                likes: c.likes as u32,
                replies: c.replies as u32,
            });
        }
        news.push(NewsExample {
            title: raw.title,
            abstract_tokens: raw.abstract_tokens,
            body: raw.body,
            news_type: raw.news_type,
            comments,
        });
    }
    Ok(Corpus { types: header.types, news })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FilterStats {
    pub news_dropped: usize,
    pub comments_dropped: usize,
}

fn len_ok(tokens: &[String]) -> bool {
    (MIN_TOKENS..=MAX_TOKENS).contains(&tokens.len())
}

/// Drops comments outside `[MIN_TOKENS, MAX_TOKENS]` and whole news items
/// whose title or abstract violates the bound. Surviving text is untouched.
pub fn filter_lengths(corpus: Corpus) -> (Corpus, FilterStats) {
    let mut stats = FilterStats::default();
    let mut kept = Vec::with_capacity(corpus.news.len());
    for mut item in corpus.news {
        if !len_ok(&item.title) || !len_ok(&item.abstract_tokens) {
            stats.news_dropped += 1;
            stats.comments_dropped += item.comments.len();
            continue;
        }
        let before = item.comments.len();
        item.comments.retain(|c| len_ok(&c.text));
        stats.comments_dropped += before - item.comments.len();
        kept.push(item);
    }
    (Corpus { types: corpus.types, news: kept }, stats)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds the reverse map; needed after deserialization.
    pub fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { id_to_token, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Builds a vocabulary over title, abstract and comment tokens.
///
/// Ids are assigned frequency-descending with lexicographic tie-breaking,
/// after the reserved PAD/UNK/SEP entries, so two runs over the same corpus
/// yield identical maps.
pub fn build_vocab(news: &[NewsExample], min_count: usize) -> Result<Vocabulary, CorpusError> {
    if news.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for item in news {
        for tok in item
            .title
            .iter()
            .chain(&item.abstract_tokens)
            .chain(item.comments.iter().flat_map(|c| &c.text))
        {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> =
        counts.into_iter().filter(|&(_, n)| n >= min_count).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let mut id_to_token =
        vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), SEP_TOKEN.to_string()];
    id_to_token.extend(entries.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocabulary::from_tokens(id_to_token))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurroundingPolicy {
    /// The K other comments nearest by list position, earlier-first on ties.
    Nearest,
    /// The K other comments with the most likes.
    TopLiked,
}

#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub news_idx: usize,
    pub comment_idx: usize,
    pub comment: Vec<String>,
    pub title: Vec<String>,
    pub abstract_tokens: Vec<String>,
    /// Up to K sibling comments, in comment-list order; never the target.
    pub surroundings: Vec<Vec<String>>,
    pub label: Label,
    pub news_type: String,
}

/// One instance per comment, with surroundings chosen by `policy`.
pub fn make_instances(
    example: &NewsExample,
    news_idx: usize,
    k: usize,
    policy: SurroundingPolicy,
) -> Vec<TrainingInstance> {
    let n = example.comments.len();
    let mut out = Vec::with_capacity(n);
    for (ci, comment) in example.comments.iter().enumerate() {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != ci).collect();
        match policy {
            SurroundingPolicy::Nearest => {
                others.sort_by_key(|&j| {
                    let dist = ci.abs_diff(j);
                    (dist, j)
                });
            }
            SurroundingPolicy::TopLiked => {
                others.sort_by(|&a, &b| {
                    example.comments[b]
                        .likes
                        .cmp(&example.comments[a].likes)
                        .then(a.cmp(&b))
                });
            }
        }
        others.truncate(k);
        others.sort_unstable(); // concatenation follows comment-list order
        out.push(TrainingInstance {
            news_idx,
            comment_idx: ci,
            comment: comment.text.clone(),
            title: example.title.clone(),
            abstract_tokens: example.abstract_tokens.clone(),
            surroundings: others.iter().map(|&j| example.comments[j].text.clone()).collect(),
            label: comment.label(),
            news_type: example.news_type.clone(),
        });
    }
    out
}

/// Joins surrounding comments into one SEP-separated token sequence.
pub fn join_with_sep(surroundings: &[Vec<String>]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, s) in surroundings.iter().enumerate() {
        if i > 0 {
            out.push(SEP_TOKEN.to_string());
        }
        out.extend_from_slice(s);
    }
    out
}

/// Splits news-item indices into train/valid/test.
///
/// The split is at news granularity so no comment can appear as a
/// surrounding in one split and a target in another. Counts follow
/// largest-remainder rounding; order is shuffled deterministically by seed.
pub fn split_news(
    n_items: usize,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Vec<usize>; 3], CorpusError> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadFractions(total));
    }
    let mut idx: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    let mut counts = [0usize; 3];
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    let mut assigned = 0;
    for (i, f) in fractions.iter().enumerate() {
        let exact = f * n_items as f64;
        counts[i] = exact.floor() as usize;
        assigned += counts[i];
        remainders.push((i, exact - exact.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for r in remainders.iter().take(n_items - assigned) {
        counts[r.0] += 1;
    }

    let mut it = idx.into_iter();
    Ok([
        it.by_ref().take(counts[0]).collect(),
        it.by_ref().take(counts[1]).collect(),
        it.by_ref().take(counts[2]).collect(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tokens(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn comment(text: &str, likes: u32) -> CommentRecord {
        CommentRecord { text: tokens(text), likes, replies: 0 }
    }

    fn news(title: &str, abs: &str, comments: Vec<CommentRecord>) -> NewsExample {
        NewsExample {
            title: tokens(title),
            abstract_tokens: tokens(abs),
            body: tokens("filler body text for the record"),
            news_type: "society".into(),
            comments,
        }
    }

    #[test]
    fn labeling_follows_strict_likes_threshold() {
        assert_eq!(comment("a b c d e", 247).label(), Label::High);
        assert_eq!(comment("a b c d e", 0).label(), Label::Low);
        assert_eq!(comment("a b c d e", 10).label(), Label::Low);
        assert_eq!(comment("a b c d e", 11).label(), Label::High);
    }

    #[test]
    fn labeling_is_idempotent() {
        let c = comment("a b c d e", 42);
        assert_eq!(c.label(), c.label());
    }

    #[test]
    fn filtering_drops_short_and_long_comments_inclusively() {
        let short = comment("a b c d", 0);
        let at_min = comment("a b c d e", 0);
        let at_max = CommentRecord {
            text: (0..200).map(|i| format!("w{i}")).collect(),
            likes: 0,
            replies: 0,
        };
        let over = CommentRecord {
            text: (0..201).map(|i| format!("w{i}")).collect(),
            likes: 0,
            replies: 0,
        };
        let item = news("t1 t2 t3 t4 t5", "a1 a2 a3 a4 a5", vec![short, at_min.clone(), at_max.clone(), over]);
        let (filtered, stats) = filter_lengths(Corpus { types: vec!["society".into()], news: vec![item] });
        let kept = &filtered.news[0].comments;
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].text, at_min.text);
        assert_eq!(kept[1].text, at_max.text);
        assert_eq!(stats.comments_dropped, 2);
    }

    #[test]
    fn overlong_title_drops_the_whole_item() {
        let title: Vec<String> = (0..201).map(|i| format!("t{i}")).collect();
        let item = NewsExample {
            title,
            abstract_tokens: tokens("a1 a2 a3 a4 a5"),
            body: vec![],
            news_type: "society".into(),
            comments: vec![comment("a b c d e", 50)],
        };
        let (filtered, stats) = filter_lengths(Corpus { types: vec!["society".into()], news: vec![item] });
        assert!(filtered.news.is_empty());
        assert_eq!(stats.news_dropped, 1);
    }

    #[test]
    fn vocab_includes_by_min_count() {
        let item = news("t1 t2 t3 t4 t5", "a1 a2 a3 a4 a5", vec![comment("x x y t1 a1", 0)]);
        let v1 = build_vocab(&[item.clone()], 1).unwrap();
        assert!(v1.id("x") > SEP_ID && v1.id("y") > SEP_ID);
        let v2 = build_vocab(&[item], 2).unwrap();
        assert!(v2.id("x") > SEP_ID);
        assert_eq!(v2.id("y"), UNK_ID);
    }

    #[test]
    fn vocab_reserved_ids_and_determinism() {
        let item = news("t1 t2 t3 t4 t5", "a1 a2 a3 a4 a5", vec![comment("b b a a a", 0)]);
        let v = build_vocab(&[item.clone()], 1).unwrap();
        assert_eq!(v.id(PAD_TOKEN), PAD_ID);
        assert_eq!(v.id(UNK_TOKEN), UNK_ID);
        assert_eq!(v.id(SEP_TOKEN), SEP_ID);
        // frequency-descending: "a" (3) before "b" (2)
        assert!(v.id("a") < v.id("b"));
        let v2 = build_vocab(&[item], 1).unwrap();
        assert_eq!(v.tokens(), v2.tokens());
    }

    #[test]
    fn vocab_roundtrip_identity_on_in_vocab_tokens() {
        let item = news("t1 t2 t3 t4 t5", "a1 a2 a3 a4 a5", vec![comment("c1 c2 c3 c4 c5", 0)]);
        let v = build_vocab(&[item.clone()], 1).unwrap();
        for tok in item.title.iter().chain(&item.comments[0].text) {
            assert_eq!(v.token(v.id(tok)), tok);
        }
    }

    #[test]
    fn empty_corpus_vocab_is_an_error() {
        assert!(matches!(build_vocab(&[], 1), Err(CorpusError::Empty)));
    }

    #[test]
    fn instances_with_k_zero_have_no_surroundings() {
        let item = news(
            "t1 t2 t3 t4 t5",
            "a1 a2 a3 a4 a5",
            vec![comment("a b c d e", 0), comment("f g h i j", 20)],
        );
        for inst in make_instances(&item, 0, 0, SurroundingPolicy::Nearest) {
            assert!(inst.surroundings.is_empty());
        }
    }

    #[test]
    fn instances_bounded_by_available_comments() {
        let item = news(
            "t1 t2 t3 t4 t5",
            "a1 a2 a3 a4 a5",
            vec![comment("a b c d e", 0), comment("f g h i j", 20)],
        );
        for inst in make_instances(&item, 0, 5, SurroundingPolicy::Nearest) {
            assert_eq!(inst.surroundings.len(), 1);
        }
    }

    #[test]
    fn surroundings_exclude_self_and_follow_list_order() {
        let comments: Vec<CommentRecord> =
            (0..10).map(|i| comment(&format!("c{i} w1 w2 w3 w4"), i)).collect();
        let item = news("t1 t2 t3 t4 t5", "a1 a2 a3 a4 a5", comments);
        for (ci, inst) in make_instances(&item, 0, 5, SurroundingPolicy::Nearest)
            .into_iter()
            .enumerate()
        {
            assert_eq!(inst.surroundings.len(), 5);
            let own_tag = format!("c{ci}");
            let mut tags = Vec::new();
            for s in &inst.surroundings {
                assert_ne!(s[0], own_tag);
                tags.push(s[0].clone());
            }
            let mut sorted = tags.clone();
            sorted.sort_by_key(|t| t[1..].parse::<usize>().unwrap());
            assert_eq!(tags, sorted, "surroundings must keep comment-list order");
        }
    }

    #[test]
    fn nearest_policy_prefers_earlier_on_ties() {
        let comments: Vec<CommentRecord> =
            (0..5).map(|i| comment(&format!("c{i} w1 w2 w3 w4"), 0)).collect();
        let item = news("t1 t2 t3 t4 t5", "a1 a2 a3 a4 a5", comments);
        let insts = make_instances(&item, 0, 1, SurroundingPolicy::Nearest);
        // for the middle comment, positions 1 and 3 tie at distance 1
        assert_eq!(insts[2].surroundings[0][0], "c1");
    }

    #[test]
    fn top_liked_policy_selects_by_likes() {
        let comments = vec![
            comment("c0 w1 w2 w3 w4", 1),
            comment("c1 w1 w2 w3 w4", 99),
            comment("c2 w1 w2 w3 w4", 5),
        ];
        let item = news("t1 t2 t3 t4 t5", "a1 a2 a3 a4 a5", comments);
        let insts = make_instances(&item, 0, 1, SurroundingPolicy::TopLiked);
        assert_eq!(insts[0].surroundings[0][0], "c1");
        assert_eq!(insts[1].surroundings[0][0], "c2");
    }

    #[test]
    fn join_with_sep_inserts_separators() {
        let joined = join_with_sep(&[tokens("a b"), tokens("c"), tokens("d e")]);
        assert_eq!(joined, tokens(&format!("a b {SEP_TOKEN} c {SEP_TOKEN} d e")));
    }

    #[test]
    fn split_all_in_train() {
        let [tr, va, te] = split_news(7, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(tr.len(), 7);
        assert!(va.is_empty() && te.is_empty());
    }

    #[test]
    fn split_largest_remainder_counts() {
        let [tr, va, te] = split_news(10, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let [tr, va, te] = split_news(23, [0.7, 0.2, 0.1], 11).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(matches!(split_news(5, [0.5, 0.2, 0.2], 0), Err(CorpusError::BadFractions(_))));
    }

    #[test]
    fn load_rejects_bad_header_and_negative_likes() {
        let dir = tempfile::tempdir().unwrap();
        let bad_header = dir.path().join("bad.jsonl");
        std::fs::write(&bad_header, "{\"schema\":\"mtm-corpus-v0\",\"types\":[]}\n").unwrap();
        assert!(matches!(load_corpus(&bad_header), Err(CorpusError::UnknownSchema(_))));

        let neg = dir.path().join("neg.jsonl");
        let mut f = File::create(&neg).unwrap();
        writeln!(f, "{{\"schema\":\"{SCHEMA}\",\"types\":[\"society\"]}}").unwrap();
        writeln!(
            f,
            "{{\"title\":[\"a\"],\"abstract\":[\"b\"],\"body\":[],\"type\":\"society\",\"comments\":[{{\"text\":[\"x\"],\"likes\":-1,\"replies\":0}}]}}"
        )
        .unwrap();
        drop(f);
        assert!(matches!(load_corpus(&neg), Err(CorpusError::NegativeLikes { line: 2, likes: -1 })));
    }

    #[test]
    fn load_reports_first_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mal.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "{{\"schema\":\"{SCHEMA}\",\"types\":[\"society\"]}}").unwrap();
        writeln!(f, "{{\"title\":[\"a\"]}}").unwrap();
        drop(f);
        assert!(matches!(load_corpus(&path), Err(CorpusError::MalformedRecord { line: 2, .. })));
    }
}
