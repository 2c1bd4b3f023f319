//! Deterministic synthetic corpus generator.
//!
//! Stands in for the non-public production corpus. High-quality comments are
//! built to be longer, to share a large fraction of their tokens with the
//! title and abstract, and to follow the discussion theme of their news item.
//! Low-quality comments come in four flavours, each detectable through
//! exactly one model pathway:
//!
//! - short filler comments (comment content alone),
//! - comments consistent with the abstract but not the title (title matching),
//! - comments consistent with the title but not the abstract (abstract matching),
//! - off-topic comments that match the article but not the discussion theme
//!   the sibling comments share, so only the surrounding comments reveal them.
//!
//! Title, abstract, and theme draw fresh tokens per news item, and every
//! full-length comment carries the same mix of token kinds, so none of the
//! low-quality flavours is predictable from the comment text alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{CommentRecord, NewsExample, SCHEMA};

const NEWS_TYPES: [&str; 7] =
    ["health", "technology", "world", "finance", "sports", "society", "entertainment"];

const CONTENT_POOL: usize = 240;
const FILLER_POOL: usize = 400;
const RARE_POOL: usize = 300;
const THEME_POOL: usize = 150;

const TITLE_CONTENT: usize = 6;
const ABSTRACT_CONTENT: usize = 10;
/// Theme tokens shared by a news item's on-topic comments.
const THEME_SIZE: usize = 3;
/// Body length for the generated comments other than the short flavour.
const COMMENT_LEN: usize = 13;
const HIGH_FRACTION: f64 = 0.55;

fn content(i: usize) -> String {
    format!("w{i:03}")
}

fn filler(i: usize) -> String {
    format!("f{i:03}")
}

fn rare(i: usize) -> String {
    format!("u{i:03}")
}

fn theme(i: usize) -> String {
    format!("m{i:03}")
}

fn sample_distinct(rng: &mut ChaCha8Rng, pool: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx
}

/// How many item-unique tokens each full-length comment carries. They keep
/// unrelated comments distinguishable without marking any flavour.
const RARES_PER_COMMENT: usize = 1;
/// Theme-pool tokens per full-length comment; on-topic comments carry the
/// item's whole theme, off-topic ones draw from the rest of the pool.
const THEMES_PER_COMMENT: usize = THEME_SIZE;

struct ItemLexicon {
    title_content: Vec<String>,
    abstract_content: Vec<String>,
    /// Theme tokens the item's discussion revolves around.
    theme: Vec<usize>,
    /// Rare tokens reserved for this item, handed out per comment.
    rare: Vec<String>,
}

#[derive(Clone, Copy)]
enum LowMode {
    Short,
    OffTitle,
    OffAbstract,
    OffTopic,
}

fn pick_fillers(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| filler(rng.gen_range(0..FILLER_POOL))).collect()
}

fn pick_from(rng: &mut ChaCha8Rng, pool: &[String], n: usize) -> Vec<String> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

fn pick_theme(rng: &mut ChaCha8Rng, lex: &ItemLexicon, on_topic: bool) -> Vec<String> {
    if on_topic {
        lex.theme.iter().copied().map(theme).collect()
    } else {
        // Off-topic comments still carry theme-pool tokens, just not the
        // item's own, so the token mix alone gives nothing away.
        (0..THEMES_PER_COMMENT)
            .map(|_| loop {
                let i = rng.gen_range(0..THEME_POOL);
                if !lex.theme.contains(&i) {
                    break theme(i);
                }
            })
            .collect()
    }
}

/// Every full-length comment is nine content-pool tokens, three theme-pool
/// tokens, and one rare token; the flavours differ only in where the content
/// comes from and whether the theme tokens are the item's own.
fn full_text(rng: &mut ChaCha8Rng, lex: &ItemLexicon, mode: Option<LowMode>, rare_base: usize) -> Vec<String> {
    let mut toks = match mode {
        None | Some(LowMode::OffTopic) => {
            let mut t = pick_from(rng, &lex.title_content, 4);
            t.extend(pick_from(rng, &lex.abstract_content, 5));
            t
        }
        Some(LowMode::OffTitle) => pick_from(rng, &lex.abstract_content, 9),
        Some(LowMode::OffAbstract) => {
            // the title pool is smaller than nine, so top up with repeats
            let mut t = lex.title_content.clone();
            for _ in 0..3 {
                t.push(lex.title_content[rng.gen_range(0..TITLE_CONTENT)].clone());
            }
            t
        }
        Some(LowMode::Short) => unreachable!("short comments are built separately"),
    };
    toks.extend(pick_theme(rng, lex, !matches!(mode, Some(LowMode::OffTopic))));
    toks.extend(lex.rare[rare_base..rare_base + RARES_PER_COMMENT].iter().cloned());
    debug_assert_eq!(toks.len(), COMMENT_LEN);
    toks.shuffle(rng);
    toks
}

fn make_item(rng: &mut ChaCha8Rng, item_idx: usize, comments_per_news: usize) -> NewsExample {
    let content_ids = sample_distinct(rng, CONTENT_POOL, TITLE_CONTENT + ABSTRACT_CONTENT);
    let lex = ItemLexicon {
        title_content: content_ids[..TITLE_CONTENT].iter().map(|&i| content(i)).collect(),
        abstract_content: content_ids[TITLE_CONTENT..].iter().map(|&i| content(i)).collect(),
        theme: sample_distinct(rng, THEME_POOL, THEME_SIZE),
        rare: sample_distinct(rng, RARE_POOL, RARES_PER_COMMENT * comments_per_news)
            .into_iter()
            .map(rare)
            .collect(),
    };

    let mut title = lex.title_content.clone();
    title.shuffle(rng);
    let mut abstract_tokens = lex.abstract_content.clone();
    abstract_tokens.shuffle(rng);
    let mut body = pick_fillers(rng, 12);
    body.extend(pick_from(rng, &lex.abstract_content, 4));
    body.shuffle(rng);

    let exact = comments_per_news as f64 * HIGH_FRACTION;
    let high_n = if item_idx % 2 == 0 { exact.floor() } else { exact.ceil() } as usize;
    let high_n = high_n.min(comments_per_news);
    let low_n = comments_per_news - high_n;

    // Low flavours cycle with a per-item offset so each split sees a
    // balanced mix.
    let low_modes =
        [LowMode::Short, LowMode::OffTitle, LowMode::OffAbstract, LowMode::OffTopic];

    let mut comments: Vec<CommentRecord> = Vec::new();
    let mut rare_base = 0;
    let mut next_rare = || {
        let b = rare_base;
        rare_base += RARES_PER_COMMENT;
        b
    };

    for _ in 0..high_n {
        let text = full_text(rng, &lex, None, next_rare());
        let likes = 11 + rng.gen_range(0..300);
        comments.push(CommentRecord { text, likes, replies: rng.gen_range(0..20) });
    }
    for s in 0..low_n {
        let mode = low_modes[(item_idx + s) % low_modes.len()];
        let text = match mode {
            LowMode::Short => pick_fillers(rng, 5),
            _ => full_text(rng, &lex, Some(mode), next_rare()),
        };
        let likes = rng.gen_range(0..=10);
        comments.push(CommentRecord { text, likes, replies: rng.gen_range(0..20) });
    }

    comments.shuffle(rng);

    NewsExample {
        title,
        abstract_tokens,
        body,
        news_type: NEWS_TYPES[rng.gen_range(0..NEWS_TYPES.len())].to_string(),
        comments,
    }
}

/// Generates a corpus file body. Same seed and sizes give byte-identical output.
pub fn generate(seed: u64, n_news: usize, comments_per_news: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let header = json!({ "schema": SCHEMA, "types": NEWS_TYPES });
    out.push_str(&header.to_string());
    out.push('\n');
    for item_idx in 0..n_news {
        let item = make_item(&mut rng, item_idx, comments_per_news);
        out.push_str(&serde_json::to_string(&item).expect("serializable"));
        out.push('\n');
    }
    out
}
