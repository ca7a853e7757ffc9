//! Archive ingestion, tokenization and longitudinal sample construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Separator joining the two halves of a merged bigram.
pub const BIGRAM_SEPARATOR: char = '_';

const DELETED_MARKERS: [&str; 2] = ["[deleted]", "[removed]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostKind {
    Submission,
    Comment,
}

impl fmt::Display for PostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PostKind::Submission => "submission",
            PostKind::Comment => "comment",
        })
    }
}

impl FromStr for PostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "submission" | "t3" => Ok(PostKind::Submission),
            "comment" | "t1" => Ok(PostKind::Comment),
            other => Err(Error::invalid(format!("unknown post kind {other:?}"))),
        }
    }
}

/// One archived submission or comment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostRecord {
    pub id: String,
    pub author: String,
    /// UTC seconds.
    pub created: i64,
    pub forum: String,
    pub kind: PostKind,
    pub text: String,
}

/// Line shape of the native archive format.
#[derive(Serialize, Deserialize)]
struct NativeLine<'a> {
    id: &'a str,
    author: &'a str,
    created_utc: i64,
    subreddit: &'a str,
    kind: PostKind,
    text: &'a str,
}

/// Maps source field names onto [`PostRecord`] fields.
///
/// When `kind` is unset, a record carrying the `title` field is a
/// submission and anything else is a comment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub id: String,
    pub author: String,
    pub created: String,
    pub forum: String,
    pub kind: Option<String>,
    pub title: Option<String>,
    /// Body fields, tried in order; the first present one is used.
    pub body: Vec<String>,
}

impl Schema {
    /// The artifact's own normalized format.
    pub fn native() -> Self {
        Schema {
            id: "id".into(),
            author: "author".into(),
            created: "created_utc".into(),
            forum: "subreddit".into(),
            kind: Some("kind".into()),
            title: None,
            body: vec!["text".into()],
        }
    }

    /// Pushshift comment and submission dumps.
    pub fn pushshift() -> Self {
        Schema {
            id: "id".into(),
            author: "author".into(),
            created: "created_utc".into(),
            forum: "subreddit".into(),
            kind: None,
            title: Some("title".into()),
            body: vec!["body".into(), "selftext".into()],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "native" => Ok(Self::native()),
            "pushshift" => Ok(Self::pushshift()),
            other => Err(Error::invalid(format!("unknown archive schema {other:?}"))),
        }
    }

    fn record(&self, value: &Value) -> std::result::Result<PostRecord, String> {
        let obj = value.as_object().ok_or("record is not an object")?;
        let string_field = |name: &str| -> std::result::Result<String, String> {
            match obj.get(name) {
                Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
                Some(Value::Number(n)) => Ok(n.to_string()),
                Some(_) => Err(format!("field {name:?} is empty or not a string")),
                None => Err(format!("missing field {name:?}")),
            }
        };
        let id = string_field(&self.id)?;
        let author = string_field(&self.author)?;
        let forum = string_field(&self.forum)?;
        let created = match obj.get(&self.created) {
            Some(Value::Number(n)) => n
                .as_i64()
                .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
                .ok_or_else(|| format!("field {:?} is not an integer", self.created))?,
            Some(Value::String(s)) => s
                .trim()
                .parse::<i64>()
                .map_err(|_| format!("field {:?} is not an integer", self.created))?,
            _ => return Err(format!("missing field {:?}", self.created)),
        };
        if created <= 0 {
            return Err(format!("non-positive timestamp {created}"));
        }
        let title = self
            .title
            .as_ref()
            .and_then(|t| obj.get(t))
            .and_then(Value::as_str);
        let kind = match &self.kind {
            Some(field) => obj
                .get(field)
                .and_then(Value::as_str)
                .ok_or_else(|| format!("missing field {field:?}"))?
                .parse::<PostKind>()
                .map_err(|e| e.to_string())?,
            None if title.is_some() => PostKind::Submission,
            None => PostKind::Comment,
        };
        let body = self
            .body
            .iter()
            .find_map(|b| obj.get(b))
            .map(|v| match v {
                Value::String(s) => Ok(s.as_str()),
                Value::Null => Ok(""),
                _ => Err("body field is not a string".to_string()),
            })
            .transpose()?
            .unwrap_or("");
        let text = match title {
            Some(t) if !t.is_empty() && !body.is_empty() => format!("{t}\n{body}"),
            Some(t) if !t.is_empty() => t.to_string(),
            _ => body.to_string(),
        };
        Ok(PostRecord {
            id,
            author,
            created,
            forum,
            kind,
            text,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedArchive {
    pub records: Vec<PostRecord>,
    pub skipped: usize,
}

/// Parses a line-delimited archive. Blank lines are ignored; lines that fail
/// the schema (including repeated ids) are counted in `skipped`.
pub fn parse_archive<R: BufRead>(input: R, schema: &Schema) -> Result<ParsedArchive> {
    let mut out = ParsedArchive::default();
    let mut seen = HashSet::new();
    let mut total = 0usize;
    let mut first_failure: Option<(usize, String)> = None;

    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = serde_json::from_str::<Value>(&line)
            .map_err(|e| e.to_string())
            .and_then(|v| schema.record(&v))
            .and_then(|r| {
                if seen.insert(r.id.clone()) {
                    Ok(r)
                } else {
                    Err(format!("duplicate id {:?}", r.id))
                }
            });
        match parsed {
            Ok(record) => out.records.push(record),
            Err(reason) => {
                out.skipped += 1;
                if first_failure.is_none() {
                    first_failure = Some((idx + 1, reason));
                }
            }
        }
    }

    if out.skipped * 2 > total {
        let (first_line, first_reason) = first_failure.unwrap_or_default();
        return Err(Error::MostlyInvalid {
            invalid: out.skipped,
            total,
            first_line,
            first_reason,
        });
    }
    if out.skipped > 0 {
        log::warn!("skipped {} of {} archive lines", out.skipped, total);
    }
    Ok(out)
}

/// Writes records in the native archive format, one JSON object per line.
pub fn write_archive<W: Write>(mut out: W, records: &[PostRecord]) -> Result<()> {
    for r in records {
        let line = NativeLine {
            id: &r.id,
            author: &r.author,
            created_utc: r.created,
            subreddit: &r.forum,
            kind: r.kind,
            text: &r.text,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

const DEFAULT_STOPWORDS: &str = "a about above after again against all am an and any are aren't as at \
be because been before being below between both but by can can't cannot could couldn't did didn't do \
does doesn't doing don't down during each few for from further had hadn't has hasn't have haven't \
having he he'd he'll he's her here here's hers herself him himself his how how's i i'd i'll i'm i've \
if in into is isn't it it's its itself just let's like me more most mustn't my myself no nor not now \
of off on once only or other ought our ours ourselves out over own really same shan't she she'd \
she'll she's should shouldn't so some such than that that's the their theirs them themselves then \
there there's these they they'd they'll they're they've this those through to too under until up \
very was wasn't we we'd we'll we're we've were weren't what what's when when's where where's which \
while who who's whom why why's will with won't would wouldn't you you'd you'll you're you've your \
yours yourself yourselves also get got one would much even well still http https www com amp";

/// The stop list shipped with the artifact, normalized the same way as text.
pub fn default_stoplist() -> HashSet<String> {
    DEFAULT_STOPWORDS
        .split_whitespace()
        .flat_map(tokenize)
        .collect()
}

/// Lower-cases and strips punctuation. Apostrophes are dropped so that
/// contractions stay one token; any other non-alphanumeric character splits.
pub fn tokenize(text: &str) -> Vec<String> {
    if DELETED_MARKERS.contains(&text.trim()) {
        return Vec::new();
    }
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if ch == '\'' || ch == '\u{2019}' {
            continue;
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Unigram and adjacent-pair counts. Shards may be counted separately and
/// combined with [`BigramCounts::merge`] before learning the merge table.
#[derive(Debug, Clone, Default)]
pub struct BigramCounts {
    unigrams: HashMap<String, u64>,
    pairs: HashMap<(String, String), u64>,
    total: u64,
}

impl BigramCounts {
    pub fn add_document(&mut self, tokens: &[String]) {
        for t in tokens {
            *self.unigrams.entry(t.clone()).or_default() += 1;
        }
        self.total += tokens.len() as u64;
        for w in tokens.windows(2) {
            *self.pairs.entry((w[0].clone(), w[1].clone())).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: BigramCounts) {
        for (k, v) in other.unigrams {
            *self.unigrams.entry(k).or_default() += v;
        }
        for (k, v) in other.pairs {
            *self.pairs.entry(k).or_default() += v;
        }
        self.total += other.total;
    }

    /// Pointwise mutual information (bits) of an adjacent pair.
    pub fn pmi(&self, a: &str, b: &str) -> Option<f64> {
        let ab = *self.pairs.get(&(a.to_string(), b.to_string()))?;
        let ca = *self.unigrams.get(a)? as f64;
        let cb = *self.unigrams.get(b)? as f64;
        Some((ab as f64 * self.total as f64 / (ca * cb)).log2())
    }

    pub fn learn(&self, min_count: u64, threshold: f64) -> BigramTable {
        let mut pairs = BTreeMap::new();
        for ((a, b), &count) in &self.pairs {
            if count < min_count {
                continue;
            }
            let score = self.pmi(a, b).unwrap_or(f64::NEG_INFINITY);
            if score >= threshold {
                pairs.insert((a.clone(), b.clone()), score);
            }
        }
        BigramTable { pairs }
    }
}

/// Learned bigrams with their association scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BigramTable {
    pub pairs: BTreeMap<(String, String), f64>,
}

impl BigramTable {
    /// One greedy left-to-right merge pass.
    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut i = 0;
        while i < tokens.len() {
            if i + 1 < tokens.len() {
                let key = (tokens[i].clone(), tokens[i + 1].clone());
                if self.pairs.contains_key(&key) {
                    out.push(format!("{}{BIGRAM_SEPARATOR}{}", key.0, key.1));
                    i += 2;
                    continue;
                }
            }
            out.push(tokens[i].clone());
            i += 1;
        }
        out
    }
}

/// Token to integer id, ids assigned in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `token<TAB>id` lines, ordered by id.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (id, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{id}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenizedCorpus {
    pub documents: Vec<(String, Vec<String>)>,
    pub vocabulary: Vocabulary,
    pub bigrams: BigramTable,
    positions: HashMap<String, usize>,
}

impl TokenizedCorpus {
    pub fn tokens(&self, doc_id: &str) -> Option<&[String]> {
        self.positions
            .get(doc_id)
            .map(|&i| self.documents[i].1.as_slice())
    }

    pub fn token_count(&self, doc_id: &str) -> usize {
        self.tokens(doc_id).map_or(0, <[String]>::len)
    }

    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(|(_, t)| t.len()).sum()
    }

    /// Documents as vocabulary ids, in document order.
    pub fn id_documents(&self) -> Vec<Vec<usize>> {
        self.documents
            .iter()
            .map(|(_, toks)| {
                toks.iter()
                    .map(|t| self.vocabulary.id(t).expect("token in vocabulary"))
                    .collect()
            })
            .collect()
    }

    fn from_documents(documents: Vec<(String, Vec<String>)>, bigrams: BigramTable) -> Self {
        let mut vocabulary = Vocabulary::default();
        let mut positions = HashMap::with_capacity(documents.len());
        for (i, (id, toks)) in documents.iter().enumerate() {
            positions.insert(id.clone(), i);
            for t in toks {
                vocabulary.insert(t);
            }
        }
        TokenizedCorpus {
            documents,
            vocabulary,
            bigrams,
            positions,
        }
    }
}

pub const DEFAULT_BIGRAM_MIN_COUNT: u64 = 20;
pub const DEFAULT_BIGRAM_THRESHOLD: f64 = 4.0;

/// Tokenizes, stop-filters and merges frequent adjacent pairs.
pub fn preprocess(
    posts: &[PostRecord],
    stoplist: &HashSet<String>,
    bigram_min_count: u64,
    bigram_threshold: f64,
) -> Result<TokenizedCorpus> {
    if stoplist.is_empty() {
        return Err(Error::invalid("stop list is empty"));
    }
    if bigram_min_count == 0 || !(bigram_threshold > 0.0) {
        return Err(Error::invalid("bigram thresholds must be positive"));
    }
    let filtered: Vec<(String, Vec<String>)> = posts
        .iter()
        .map(|p| {
            let toks = tokenize(&p.text)
                .into_iter()
                .filter(|t| !stoplist.contains(t))
                .collect();
            (p.id.clone(), toks)
        })
        .collect();

    let mut counts = BigramCounts::default();
    for (_, toks) in &filtered {
        counts.add_document(toks);
    }
    let bigrams = counts.learn(bigram_min_count, bigram_threshold);
    let documents = filtered
        .into_iter()
        .map(|(id, toks)| {
            let merged = bigrams.apply(&toks);
            (id, merged)
        })
        .collect();
    Ok(TokenizedCorpus::from_documents(documents, bigrams))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UserClass {
    Clean,
    Special,
    /// Had history in a blocked forum before first contact.
    Other,
}

impl fmt::Display for UserClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UserClass::Clean => "clean",
            UserClass::Special => "special",
            UserClass::Other => "other",
        })
    }
}

impl FromStr for UserClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(UserClass::Clean),
            "special" => Ok(UserClass::Special),
            "other" => Ok(UserClass::Other),
            other => Err(Error::invalid(format!("unknown user class {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledUser {
    pub class: UserClass,
    pub first_contact: i64,
}

/// Every author whose first target-forum post falls in the window, with
/// their classification.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserSample {
    pub users: BTreeMap<String, SampledUser>,
}

impl UserSample {
    fn of_class(&self, class: UserClass) -> impl Iterator<Item = &str> {
        self.users
            .iter()
            .filter(move |(_, u)| u.class == class)
            .map(|(name, _)| name.as_str())
    }

    pub fn clean(&self) -> impl Iterator<Item = &str> {
        self.of_class(UserClass::Clean)
    }

    pub fn special(&self) -> impl Iterator<Item = &str> {
        self.of_class(UserClass::Special)
    }

    pub fn all(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    pub fn is_clean(&self, author: &str) -> bool {
        self.users
            .get(author)
            .is_some_and(|u| u.class == UserClass::Clean)
    }

    pub fn first_contact(&self, author: &str) -> Option<i64> {
        self.users.get(author).map(|u| u.first_contact)
    }

    /// `user<TAB>class<TAB>first_contact` lines.
    pub fn write_manifest<W: Write>(&self, mut out: W) -> Result<()> {
        for (name, u) in &self.users {
            writeln!(out, "{name}\t{}\t{}", u.class, u.first_contact)?;
        }
        Ok(())
    }

    pub fn read_manifest<R: BufRead>(input: R) -> Result<Self> {
        let mut users = BTreeMap::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut parts = line.split('\t');
            let (Some(name), Some(class), Some(fc), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected 3 tab-separated fields"));
            };
            let class = class.parse().map_err(|_| bad("unknown class"))?;
            let first_contact = fc.parse().map_err(|_| bad("bad timestamp"))?;
            users.insert(
                name.to_string(),
                SampledUser {
                    class,
                    first_contact,
                },
            );
        }
        Ok(UserSample { users })
    }
}

/// Classifies newcomers to the target forum.
///
/// First contact is the earliest target post (ties broken by post id). A user
/// is clean when they have no blocked-forum post strictly before first
/// contact and at least one non-blocked post at or before it; special-purpose
/// when they have no earlier post anywhere and no non-blocked post at first
/// contact; otherwise other. The forums of `target_posts` are always treated
/// as blocked.
pub fn build_clean_sample(
    target_posts: &[PostRecord],
    global_history: &[PostRecord],
    blocked_forums: &HashSet<String>,
    window: (i64, i64),
) -> Result<UserSample> {
    let (start, end) = window;
    if start >= end {
        return Err(Error::invalid(format!(
            "empty sample window [{start}, {end}]"
        )));
    }
    let mut blocked = blocked_forums.clone();
    for p in target_posts {
        if !blocked.contains(&p.forum) {
            blocked.insert(p.forum.clone());
        }
    }

    let mut first: HashMap<&str, (i64, &str)> = HashMap::new();
    for p in target_posts {
        let candidate = (p.created, p.id.as_str());
        first
            .entry(p.author.as_str())
            .and_modify(|cur| {
                if candidate < *cur {
                    *cur = candidate;
                }
            })
            .or_insert(candidate);
    }

    let mut history: HashMap<&str, Vec<&PostRecord>> = HashMap::new();
    for p in global_history {
        if first.contains_key(p.author.as_str()) {
            history.entry(p.author.as_str()).or_default().push(p);
        }
    }

    let mut users = BTreeMap::new();
    for (&author, &(fc, _)) in &first {
        if fc < start || fc > end {
            continue;
        }
        let posts = history.get(author).map(Vec::as_slice).unwrap_or(&[]);
        let blocked_prior = posts
            .iter()
            .any(|p| p.created < fc && blocked.contains(&p.forum));
        let open_prior = posts
            .iter()
            .any(|p| p.created <= fc && !blocked.contains(&p.forum));
        let class = match (blocked_prior, open_prior) {
            (true, _) => UserClass::Other,
            (false, true) => UserClass::Clean,
            (false, false) => UserClass::Special,
        };
        users.insert(
            author.to_string(),
            SampledUser {
                class,
                first_contact: fc,
            },
        );
    }
    Ok(UserSample { users })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(id: &str, author: &str, created: i64, forum: &str) -> PostRecord {
        PostRecord {
            id: id.into(),
            author: author.into(),
            created,
            forum: forum.into(),
            kind: PostKind::Comment,
            text: String::new(),
        }
    }

    #[test]
    fn empty_stream() {
        let parsed = parse_archive(&b""[..], &Schema::native()).unwrap();
        assert!(parsed.records.is_empty());
        assert_eq!(parsed.skipped, 0);
    }

    #[test]
    fn comments_pass_through() {
        let input = r#"{"id":"a","author":"x","created_utc":10,"subreddit":"TheRedPill","body":"hi"}
{"id":"b","author":"y","created_utc":"11","subreddit":"TheRedPill","body":"there"}
{"id":"c","author":"z","created_utc":12.0,"subreddit":"TheRedPill","body":null}
"#;
        let parsed = parse_archive(input.as_bytes(), &Schema::pushshift()).unwrap();
        assert_eq!(parsed.records.len(), 3);
        assert!(parsed.records.iter().all(|r| r.kind == PostKind::Comment));
        assert_eq!(parsed.records[1].created, 11);
        assert_eq!(parsed.records[2].text, "");
    }

    #[test]
    fn submission_joins_title_and_body() {
        let input = r#"{"id":"s","author":"x","created_utc":5,"subreddit":"f","title":"Title","selftext":"Body"}"#;
        let parsed = parse_archive(input.as_bytes(), &Schema::pushshift()).unwrap();
        assert_eq!(parsed.records[0].kind, PostKind::Submission);
        assert_eq!(parsed.records[0].text, "Title\nBody");
    }

    #[test]
    fn missing_authors_are_skipped() {
        let mut lines = Vec::new();
        for i in 0..10 {
            if i == 3 || i == 7 {
                lines.push(format!(
                    r#"{{"id":"p{i}","created_utc":{},"subreddit":"f","body":"x"}}"#,
                    100 + i
                ));
            } else {
                lines.push(format!(
                    r#"{{"id":"p{i}","author":"u{i}","created_utc":{},"subreddit":"f","body":"x"}}"#,
                    100 + i
                ));
            }
        }
        let parsed = parse_archive(lines.join("\n").as_bytes(), &Schema::pushshift()).unwrap();
        assert_eq!(parsed.records.len(), 8);
        assert_eq!(parsed.skipped, 2);
    }

    #[test]
    fn mostly_invalid_is_fatal() {
        let input = "{\"x\":1}\n{\"x\":2}\n{\"id\":\"a\",\"author\":\"b\",\"created_utc\":3,\"subreddit\":\"f\",\"kind\":\"comment\",\"text\":\"\"}\n";
        let err = parse_archive(input.as_bytes(), &Schema::native()).unwrap_err();
        assert!(matches!(err, Error::MostlyInvalid { invalid: 2, total: 3, .. }));
    }

    #[test]
    fn non_positive_timestamp_rejected() {
        let input = "{\"id\":\"a\",\"author\":\"b\",\"created_utc\":0,\"subreddit\":\"f\",\"kind\":\"comment\",\"text\":\"\"}\n{\"id\":\"b\",\"author\":\"b\",\"created_utc\":1,\"subreddit\":\"f\",\"kind\":\"comment\",\"text\":\"\"}\n";
        let parsed = parse_archive(input.as_bytes(), &Schema::native()).unwrap();
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.skipped, 1);
    }

    #[test]
    fn stop_words_removed() {
        let stop: HashSet<String> = ["the".to_string()].into();
        let posts = vec![PostRecord {
            text: "The cat sat".into(),
            ..post("d", "a", 1, "f")
        }];
        let corpus = preprocess(&posts, &stop, 5, 1.0).unwrap();
        assert_eq!(corpus.documents[0].1, vec!["cat", "sat"]);
    }

    #[test]
    fn stopword_only_and_deleted_documents_kept_empty() {
        let stop = default_stoplist();
        let posts = vec![
            PostRecord {
                text: "the and of".into(),
                ..post("a", "x", 1, "f")
            },
            PostRecord {
                text: "[deleted]".into(),
                ..post("b", "x", 2, "f")
            },
        ];
        let corpus = preprocess(&posts, &stop, 5, 1.0).unwrap();
        assert_eq!(corpus.documents.len(), 2);
        assert!(corpus.documents.iter().all(|(_, t)| t.is_empty()));
    }

    #[test]
    fn frequent_pair_is_merged() {
        let stop = default_stoplist();
        let mut posts = Vec::new();
        for i in 0..100 {
            posts.push(PostRecord {
                text: format!("word{i} red pill filler{}", i % 7),
                ..post(&format!("p{i}"), "x", 1 + i, "f")
            });
        }
        for i in 0..50 {
            posts.push(PostRecord {
                text: format!("blue sky over{} green grass red", i % 3),
                ..post(&format!("q{i}"), "x", 1000 + i, "f")
            });
        }
        let corpus = preprocess(&posts, &stop, 50, 1.0).unwrap();
        assert!(corpus.vocabulary.id("red_pill").is_some());
        let merged = corpus
            .documents
            .iter()
            .flat_map(|(_, t)| t)
            .filter(|t| *t == "red_pill")
            .count();
        assert_eq!(merged, 100);
        // 150 "red" total, 100 "red pill", 100 "pill", 700 tokens
        let expected = (100.0_f64 * 700.0 / (150.0 * 100.0)).log2();
        let score = corpus.bigrams.pairs[&("red".to_string(), "pill".to_string())];
        assert!((score - expected).abs() < 1e-12);
        for (_, toks) in &corpus.documents {
            for t in toks {
                assert!(corpus.vocabulary.id(t).is_some());
                assert!(!stop.contains(t));
            }
        }
    }

    #[test]
    fn greedy_single_pass() {
        let mut table = BigramTable::default();
        table.pairs.insert(("a".into(), "b".into()), 5.0);
        table.pairs.insert(("b".into(), "c".into()), 5.0);
        let toks: Vec<String> = ["a", "b", "c", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(table.apply(&toks), vec!["a_b", "c", "b_c"]);
    }

    #[test]
    fn sample_window_must_be_nonempty() {
        assert!(build_clean_sample(&[], &[], &HashSet::new(), (5, 5)).is_err());
        assert!(build_clean_sample(&[], &[], &HashSet::new(), (6, 5)).is_err());
    }

    #[test]
    fn clean_special_and_other() {
        let blocked: HashSet<String> = ["trp", "mgtow"].iter().map(|s| s.to_string()).collect();
        let target = vec![
            post("t1", "clean", 100, "trp"),
            post("t2", "blockedonly", 100, "trp"),
            post("t3", "throwaway", 100, "trp"),
        ];
        let mut history = target.clone();
        history.push(post("h1", "clean", 50, "news"));
        history.push(post("h2", "blockedonly", 40, "mgtow"));
        let sample = build_clean_sample(&target, &history, &blocked, (0, 1000)).unwrap();
        assert_eq!(sample.users["clean"].class, UserClass::Clean);
        assert_eq!(sample.users["blockedonly"].class, UserClass::Other);
        assert_eq!(sample.users["throwaway"].class, UserClass::Special);
    }

    #[test]
    fn manifest_round_trip() {
        let mut sample = UserSample::default();
        sample.users.insert(
            "a".into(),
            SampledUser {
                class: UserClass::Special,
                first_contact: 17,
            },
        );
        let mut buf = Vec::new();
        sample.write_manifest(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "a\tspecial\t17\n");
        assert_eq!(UserSample::read_manifest(&buf[..]).unwrap(), sample);
    }
}
