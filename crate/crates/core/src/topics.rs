//! Document-topic decompositions: a built-in collapsed Gibbs LDA sampler,
//! import from external modelers, topic filtering and exemplar extraction.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::Rng as _;

use crate::corpus::TokenizedCorpus;
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

/// Row-sum tolerance for doc-topic rows.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;
/// Rows read from external tools may drift this far from 1 and are renormalized.
pub const IMPORT_TOLERANCE: f64 = 1e-3;

/// Per-document probability weights over topics, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DocTopicMatrix {
    doc_ids: Vec<String>,
    topic_ids: Vec<usize>,
    weights: Vec<f64>,
}

impl DocTopicMatrix {
    /// Checks shape, id uniqueness and the simplex property of every row.
    pub fn new(doc_ids: Vec<String>, topic_ids: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let k = topic_ids.len();
        if k == 0 {
            return Err(Error::invalid("matrix has no topics"));
        }
        if weights.len() != doc_ids.len() * k {
            return Err(Error::invalid(format!(
                "expected {} weights for {}x{k}, got {}",
                doc_ids.len() * k,
                doc_ids.len(),
                weights.len()
            )));
        }
        let mut seen = HashSet::new();
        for d in &doc_ids {
            if !seen.insert(d.as_str()) {
                return Err(Error::invalid(format!("duplicate doc id {d:?}")));
            }
        }
        let mut seen = HashSet::new();
        for t in &topic_ids {
            if !seen.insert(*t) {
                return Err(Error::invalid(format!("duplicate topic id {t}")));
            }
        }
        for (i, row) in weights.chunks(k).enumerate() {
            if row.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::invalid(format!("row {i} has an entry outside [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::invalid(format!("row {i} sums to {sum}")));
            }
        }
        Ok(DocTopicMatrix {
            doc_ids,
            topic_ids,
            weights,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn n_topics(&self) -> usize {
        self.topic_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn topic_ids(&self) -> &[usize] {
        &self.topic_ids
    }

    pub fn row(&self, doc: usize) -> &[f64] {
        let k = self.n_topics();
        &self.weights[doc * k..(doc + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.weights.chunks(self.n_topics())
    }

    pub fn column_of(&self, topic_id: usize) -> Option<usize> {
        self.topic_ids.iter().position(|&t| t == topic_id)
    }

    /// Column of the highest-weighted topic; ties go to the lowest topic id.
    pub fn dominant_column(&self, doc: usize) -> usize {
        let row = self.row(doc);
        let mut best = 0;
        for (j, &w) in row.iter().enumerate().skip(1) {
            if w > row[best] || (w == row[best] && self.topic_ids[j] < self.topic_ids[best]) {
                best = j;
            }
        }
        best
    }

    /// Comma-separated with header `doc_id,t0,...`; weights printed at full
    /// round-trip precision.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "doc_id")?;
        for t in &self.topic_ids {
            write!(out, ",t{t}")?;
        }
        writeln!(out)?;
        for (d, row) in self.doc_ids.iter().zip(self.rows()) {
            write!(out, "{d}")?;
            for w in row {
                write!(out, ",{w:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Reads a doc-topic table. A header row (first field `doc_id`) names the
/// topics `t0..`; without one, topics are numbered by column.
pub fn import_doc_topics<R: Read>(input: R) -> Result<DocTopicMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut topic_ids: Option<Vec<usize>> = None;
    let mut doc_ids = Vec::new();
    let mut weights = Vec::new();

    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if i == 0 && rec.get(0) == Some("doc_id") {
            let ids = rec
                .iter()
                .skip(1)
                .map(|h| {
                    h.trim_start_matches(['t', 'T'])
                        .parse::<usize>()
                        .map_err(|_| Error::Parse {
                            line,
                            reason: format!("bad topic header {h:?}"),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            topic_ids = Some(ids);
            continue;
        }
        let k = topic_ids
            .get_or_insert_with(|| (0..rec.len().saturating_sub(1)).collect())
            .len();
        if rec.len() != k + 1 {
            return Err(Error::Parse {
                line,
                reason: format!("expected {} fields, found {}", k + 1, rec.len()),
            });
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line,
                reason: e.to_string(),
            })?;
        if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Parse {
                line,
                reason: "weights must be finite and non-negative".into(),
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > IMPORT_TOLERANCE {
            return Err(Error::Parse {
                line,
                reason: format!("row sums to {sum}, not 1"),
            });
        }
        doc_ids.push(rec[0].to_string());
        weights.extend(row.iter().map(|w| w / sum));
    }
    let topic_ids = topic_ids.unwrap_or_default();
    DocTopicMatrix::new(doc_ids, topic_ids, weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredTopics {
    pub matrix: DocTopicMatrix,
    /// Rows that had no mass left on surviving topics and were set uniform.
    pub zero_mass_rows: Vec<usize>,
}

/// Removes the listed topics and renormalizes every row over the survivors.
pub fn filter_topics(matrix: &DocTopicMatrix, drop: &HashSet<usize>) -> Result<FilteredTopics> {
    if let Some(t) = drop.iter().find(|t| matrix.column_of(**t).is_none()) {
        return Err(Error::invalid(format!("topic {t} is not in the matrix")));
    }
    let keep: Vec<usize> = (0..matrix.n_topics())
        .filter(|&j| !drop.contains(&matrix.topic_ids[j]))
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid("cannot drop every topic"));
    }
    let topic_ids: Vec<usize> = keep.iter().map(|&j| matrix.topic_ids[j]).collect();
    let mut weights = Vec::with_capacity(matrix.n_docs() * keep.len());
    let mut zero_mass_rows = Vec::new();
    for (d, row) in matrix.rows().enumerate() {
        let sum: f64 = keep.iter().map(|&j| row[j]).sum();
        if sum > 0.0 {
            weights.extend(keep.iter().map(|&j| row[j] / sum));
        } else {
            zero_mass_rows.push(d);
            weights.extend(std::iter::repeat_n(1.0 / keep.len() as f64, keep.len()));
        }
    }
    if !zero_mass_rows.is_empty() {
        log::warn!(
            "{} documents had no mass on surviving topics; set uniform",
            zero_mass_rows.len()
        );
    }
    Ok(FilteredTopics {
        matrix: DocTopicMatrix::new(matrix.doc_ids.clone(), topic_ids, weights)?,
        zero_mass_rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub doc_id: String,
    pub tokens: usize,
    pub weight: f64,
    /// Next two highest-weighted topics as (topic id, weight).
    pub secondary: Vec<(usize, f64)>,
}

/// Documents heavily loaded on `topic`: at least `min_tokens` filtered tokens
/// and at least `min_weight` on the topic, heaviest first (ties by doc id),
/// truncated to `n`.
pub fn topic_exemplars(
    matrix: &DocTopicMatrix,
    corpus: &TokenizedCorpus,
    topic: usize,
    min_weight: f64,
    min_tokens: usize,
    n: usize,
) -> Result<Vec<Exemplar>> {
    let col = matrix
        .column_of(topic)
        .ok_or_else(|| Error::invalid(format!("topic {topic} is not in the matrix")))?;
    let mut out: Vec<Exemplar> = Vec::new();
    for (d, doc_id) in matrix.doc_ids.iter().enumerate() {
        let row = matrix.row(d);
        let tokens = corpus.token_count(doc_id);
        if row[col] < min_weight || tokens < min_tokens {
            continue;
        }
        let mut others: Vec<(usize, f64)> = (0..row.len())
            .filter(|&j| j != col)
            .map(|j| (matrix.topic_ids[j], row[j]))
            .collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        others.truncate(2);
        out.push(Exemplar {
            doc_id: doc_id.clone(),
            tokens,
            weight: row[col],
            secondary: others,
        });
    }
    out.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.doc_id.cmp(&b.doc_id)));
    out.truncate(n);
    Ok(out)
}

/// One exemplar per line:
/// `doc; 31 filtered words.  Topic 2 (67%); Topic 10 (8%); Topic 61 (3%)`.
pub fn write_exemplar_report<W: Write>(
    mut out: W,
    topic: usize,
    exemplars: &[Exemplar],
) -> Result<()> {
    writeln!(out, "Topic {topic}")?;
    for e in exemplars {
        write!(
            out,
            "{}; {} filtered words.  Topic {topic} ({:.0}%)",
            e.doc_id,
            e.tokens,
            e.weight * 100.0
        )?;
        for (t, w) in &e.secondary {
            write!(out, "; Topic {t} ({:.0}%)", w * 100.0)?;
        }
        writeln!(out)?;
    }
    writeln!(out)?;
    Ok(())
}

/// Word probabilities per topic, rows over the corpus vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicWordTable {
    pub topic_ids: Vec<usize>,
    pub words: Vec<String>,
    probs: Vec<f64>,
}

impl TopicWordTable {
    pub fn row(&self, topic: usize) -> &[f64] {
        let v = self.words.len();
        &self.probs[topic * v..(topic + 1) * v]
    }

    /// Highest-probability words of the topic in row `topic`, ties by vocabulary order.
    pub fn top_words(&self, topic: usize, n: usize) -> Vec<&str> {
        let row = self.row(topic);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx.into_iter().take(n).map(|i| self.words[i].as_str()).collect()
    }

    pub fn write_report<W: Write>(&self, mut out: W, n: usize) -> Result<()> {
        for (k, t) in self.topic_ids.iter().enumerate() {
            writeln!(out, "Topic {t}")?;
            writeln!(out, "Top words: {}", self.top_words(k, n).join(" "))?;
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaConfig {
    pub n_topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl LdaConfig {
    /// Symmetric priors alpha = 50/K, beta = 0.01.
    pub fn with_defaults(n_topics: usize, seed: u64) -> Self {
        LdaConfig {
            n_topics,
            alpha: 50.0 / n_topics as f64,
            beta: 0.01,
            sweeps: 1000,
            burn_in: 200,
            seed,
        }
    }
}

/// Collapsed Gibbs sampler state for LDA.
pub struct GibbsSampler {
    docs: Vec<Vec<usize>>,
    assignments: Vec<Vec<usize>>,
    doc_topic: Vec<u32>,
    topic_word: Vec<u32>,
    topic_total: Vec<u32>,
    n_topics: usize,
    n_words: usize,
    alpha: f64,
    beta: f64,
    rng: Rng,
    scratch: Vec<f64>,
}

impl GibbsSampler {
    pub fn new(
        docs: Vec<Vec<usize>>,
        n_words: usize,
        n_topics: usize,
        alpha: f64,
        beta: f64,
        seed: u64,
    ) -> Self {
        let mut rng = rng_from(seed);
        let mut doc_topic = vec![0u32; docs.len() * n_topics];
        let mut topic_word = vec![0u32; n_topics * n_words];
        let mut topic_total = vec![0u32; n_topics];
        let assignments = docs
            .iter()
            .enumerate()
            .map(|(d, words)| {
                words
                    .iter()
                    .map(|&w| {
                        let k = rng.random_range(0..n_topics);
                        doc_topic[d * n_topics + k] += 1;
                        topic_word[k * n_words + w] += 1;
                        topic_total[k] += 1;
                        k
                    })
                    .collect()
            })
            .collect();
        GibbsSampler {
            docs,
            assignments,
            doc_topic,
            topic_word,
            topic_total,
            n_topics,
            n_words,
            alpha,
            beta,
            rng,
            scratch: vec![0.0; n_topics],
        }
    }

    /// One full sweep over every token in document order.
    pub fn sweep(&mut self) {
        let k_n = self.n_topics;
        let v_beta = self.n_words as f64 * self.beta;
        for d in 0..self.docs.len() {
            for i in 0..self.docs[d].len() {
                let w = self.docs[d][i];
                let old = self.assignments[d][i];
                self.doc_topic[d * k_n + old] -= 1;
                self.topic_word[old * self.n_words + w] -= 1;
                self.topic_total[old] -= 1;

                let mut total = 0.0;
                for k in 0..k_n {
                    let p = (self.doc_topic[d * k_n + k] as f64 + self.alpha)
                        * (self.topic_word[k * self.n_words + w] as f64 + self.beta)
                        / (self.topic_total[k] as f64 + v_beta);
                    total += p;
                    self.scratch[k] = total;
                }
                let u = self.rng.random::<f64>() * total;
                let new = self
                    .scratch
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(k_n - 1);

                self.assignments[d][i] = new;
                self.doc_topic[d * k_n + new] += 1;
                self.topic_word[new * self.n_words + w] += 1;
                self.topic_total[new] += 1;
            }
        }
    }

    /// Every count table accounts for exactly the corpus token total.
    pub fn counts_consistent(&self) -> bool {
        let tokens: usize = self.docs.iter().map(Vec::len).sum();
        let sum = |v: &[u32]| v.iter().map(|&c| c as usize).sum::<usize>();
        let per_doc_ok = self.docs.iter().enumerate().all(|(d, words)| {
            sum(&self.doc_topic[d * self.n_topics..(d + 1) * self.n_topics]) == words.len()
        });
        let per_topic_ok = (0..self.n_topics).all(|k| {
            sum(&self.topic_word[k * self.n_words..(k + 1) * self.n_words])
                == self.topic_total[k] as usize
        });
        per_doc_ok
            && per_topic_ok
            && sum(&self.doc_topic) == tokens
            && sum(&self.topic_word) == tokens
            && sum(&self.topic_total) == tokens
    }

    fn accumulate_doc_topics(&self, acc: &mut [f64]) {
        let k_n = self.n_topics;
        let k_alpha = k_n as f64 * self.alpha;
        for (d, words) in self.docs.iter().enumerate() {
            let denom = words.len() as f64 + k_alpha;
            for k in 0..k_n {
                acc[d * k_n + k] += (self.doc_topic[d * k_n + k] as f64 + self.alpha) / denom;
            }
        }
    }

    fn accumulate_topic_words(&self, acc: &mut [f64]) {
        let v_beta = self.n_words as f64 * self.beta;
        for k in 0..self.n_topics {
            let denom = self.topic_total[k] as f64 + v_beta;
            for w in 0..self.n_words {
                acc[k * self.n_words + w] +=
                    (self.topic_word[k * self.n_words + w] as f64 + self.beta) / denom;
            }
        }
    }
}

/// Fits LDA by collapsed Gibbs sampling. Estimates are averaged over the
/// sweeps after `burn_in`.
pub fn fit_topics(
    corpus: &TokenizedCorpus,
    config: &LdaConfig,
) -> Result<(DocTopicMatrix, TopicWordTable)> {
    let k = config.n_topics;
    if k == 0 {
        return Err(Error::invalid("topic count must be positive"));
    }
    if config.sweeps <= config.burn_in {
        return Err(Error::invalid("sweeps must exceed burn-in"));
    }
    if !(config.alpha > 0.0 && config.beta > 0.0) {
        return Err(Error::invalid("Dirichlet priors must be positive"));
    }
    let total = corpus.total_tokens();
    if total == 0 {
        return Err(Error::invalid("every document is empty"));
    }
    if k > total {
        return Err(Error::invalid(format!(
            "{k} topics exceeds the {total} tokens in the corpus"
        )));
    }
    let v = corpus.vocabulary.len();
    let mut sampler = GibbsSampler::new(
        corpus.id_documents(),
        v,
        k,
        config.alpha,
        config.beta,
        config.seed,
    );
    let d = corpus.documents.len();
    let mut theta = vec![0.0; d * k];
    let mut phi = vec![0.0; k * v];
    for sweep in 1..=config.sweeps {
        sampler.sweep();
        debug_assert!(sampler.counts_consistent());
        if sweep > config.burn_in {
            sampler.accumulate_doc_topics(&mut theta);
            sampler.accumulate_topic_words(&mut phi);
        }
    }
    let samples = (config.sweeps - config.burn_in) as f64;
    for x in theta.iter_mut().chain(phi.iter_mut()) {
        *x /= samples;
    }
    let doc_ids = corpus.documents.iter().map(|(id, _)| id.clone()).collect();
    let topic_ids: Vec<usize> = (0..k).collect();
    let words = (0..v)
        .map(|i| corpus.vocabulary.token(i).unwrap_or_default().to_string())
        .collect();
    Ok((
        DocTopicMatrix::new(doc_ids, topic_ids.clone(), theta)?,
        TopicWordTable {
            topic_ids,
            words,
            probs: phi,
        },
    ))
}

/// Topic ids, one per line; a leading `t` is accepted and `#` starts a comment.
pub fn read_topic_list<R: Read>(mut input: R) -> Result<HashSet<usize>> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let mut out = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let id = line
            .trim_start_matches(['t', 'T'])
            .parse::<usize>()
            .map_err(|_| Error::Parse {
                line: i + 1,
                reason: format!("bad topic id {line:?}"),
            })?;
        out.insert(id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{preprocess, PostKind, PostRecord};

    fn matrix(rows: &[&[f64]]) -> DocTopicMatrix {
        let k = rows[0].len();
        DocTopicMatrix::new(
            (0..rows.len()).map(|i| format!("d{i}")).collect(),
            (0..k).collect(),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    fn corpus_of(texts: &[String]) -> TokenizedCorpus {
        let posts: Vec<PostRecord> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| PostRecord {
                id: format!("d{i}"),
                author: "a".into(),
                created: 1 + i as i64,
                forum: "f".into(),
                kind: PostKind::Comment,
                text: t.clone(),
            })
            .collect();
        let stop: HashSet<String> = ["zzzz".to_string()].into();
        preprocess(&posts, &stop, 1_000_000, 100.0).unwrap()
    }

    #[test]
    fn import_accepts_exact_rows() {
        let m = import_doc_topics("d1, 0.5, 0.5\n".as_bytes()).unwrap();
        assert_eq!(m.row(0), &[0.5, 0.5]);
        assert_eq!(m.topic_ids(), &[0, 1]);
    }

    #[test]
    fn import_renormalizes_within_tolerance() {
        let m = import_doc_topics("doc_id,t0,t1\nd1, 0.5004, 0.5004\n".as_bytes()).unwrap();
        assert_eq!(m.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn import_rejects_bad_rows() {
        let err = import_doc_topics("d0,1,0\nd1, 0.9, 0.9\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = import_doc_topics("d0,1,0\nd1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = matrix(&[&[0.1, 0.2, 0.7], &[1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0]]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(import_doc_topics(&buf[..]).unwrap(), m);
    }

    #[test]
    fn filter_renormalizes() {
        let m = matrix(&[&[0.2, 0.8], &[0.0, 1.0]]);
        let f = filter_topics(&m, &[1].into()).unwrap();
        assert_eq!(f.matrix.row(0), &[1.0]);
        assert_eq!(f.matrix.row(1), &[1.0]);
        assert_eq!(f.zero_mass_rows, vec![1]);
        assert_eq!(f.matrix.topic_ids(), &[0]);
    }

    #[test]
    fn filter_100_minus_17() {
        let k = 100;
        let row: Vec<f64> = vec![1.0 / k as f64; k];
        let m = DocTopicMatrix::new(vec!["d".into()], (0..k).collect(), row).unwrap();
        let drop: HashSet<usize> = (0..17).map(|i| i * 5).collect();
        let f = filter_topics(&m, &drop).unwrap();
        assert_eq!(f.matrix.n_topics(), 83);
        assert!((f.matrix.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn filter_all_or_unknown_is_fatal() {
        let m = matrix(&[&[0.2, 0.8]]);
        assert!(filter_topics(&m, &[0, 1].into()).is_err());
        assert!(filter_topics(&m, &[7].into()).is_err());
    }

    #[test]
    fn exemplar_rule() {
        let texts: Vec<String> = [31usize, 31, 19]
            .iter()
            .map(|&n| (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "))
            .collect();
        let corpus = corpus_of(&texts);
        // topics 0..4; the column "t2" carries the topic of interest
        let rows: Vec<&[f64]> = vec![
            &[0.22, 0.03, 0.67, 0.08, 0.0],
            &[0.51, 0.0, 0.49, 0.0, 0.0],
            &[0.1, 0.0, 0.9, 0.0, 0.0],
        ];
        let m = matrix(&rows);
        let ex = topic_exemplars(&m, &corpus, 2, 0.5, 20, 20).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].doc_id, "d0");
        assert_eq!(ex[0].tokens, 31);
        assert_eq!(ex[0].secondary, vec![(0, 0.22), (3, 0.08)]);
        let mut buf = Vec::new();
        write_exemplar_report(&mut buf, 2, &ex).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "Topic 2\nd0; 31 filtered words.  Topic 2 (67%); Topic 0 (22%); Topic 3 (8%)\n\n"
        );
    }

    fn two_vocab_corpus() -> TokenizedCorpus {
        let mut texts = Vec::new();
        for d in 0..20 {
            let prefix = if d % 2 == 0 { "alpha" } else { "beta" };
            texts.push(
                (0..30)
                    .map(|i| format!("{prefix}{}", (i * 7 + d) % 10))
                    .collect::<Vec<_>>()
                    .join(" "),
            );
        }
        corpus_of(&texts)
    }

    #[test]
    fn single_topic_rows_are_one() {
        let corpus = two_vocab_corpus();
        let cfg = LdaConfig {
            sweeps: 20,
            burn_in: 5,
            ..LdaConfig::with_defaults(1, 1)
        };
        let (m, words) = fit_topics(&corpus, &cfg).unwrap();
        assert!(m.rows().all(|r| r == [1.0]));
        assert!((words.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn planted_vocabularies_separate() {
        let corpus = two_vocab_corpus();
        let cfg = LdaConfig {
            alpha: 0.1,
            sweeps: 200,
            burn_in: 50,
            ..LdaConfig::with_defaults(2, 7)
        };
        let (m, words) = fit_topics(&corpus, &cfg).unwrap();
        for row in m.rows() {
            assert!(row[0] >= 0.9 || row[1] >= 0.9, "{row:?}");
        }
        let t0: Vec<&str> = words.top_words(0, 10);
        let t1: Vec<&str> = words.top_words(1, 10);
        let family = |ws: &[&str]| ws[0].chars().next().unwrap();
        assert!(t0.iter().all(|w| w.starts_with(family(&t0))));
        assert!(t1.iter().all(|w| w.starts_with(family(&t1))));
        assert_ne!(family(&t0), family(&t1));

        // topic/document mutual information, documents uniform
        let n = m.n_docs() as f64;
        let mut pt = [0.0; 2];
        for row in m.rows() {
            pt[0] += row[0] / n;
            pt[1] += row[1] / n;
        }
        let mut mi = 0.0;
        for row in m.rows() {
            for k in 0..2 {
                let joint = row[k] / n;
                if joint > 0.0 {
                    mi += joint * (row[k] / pt[k]).log2();
                }
            }
        }
        assert!(mi > 0.8, "mi = {mi}");
    }

    #[test]
    fn fit_is_deterministic() {
        let corpus = two_vocab_corpus();
        let cfg = LdaConfig {
            sweeps: 30,
            burn_in: 10,
            ..LdaConfig::with_defaults(3, 99)
        };
        assert_eq!(fit_topics(&corpus, &cfg).unwrap(), fit_topics(&corpus, &cfg).unwrap());
    }

    #[test]
    fn sampler_counts_stay_consistent() {
        let corpus = two_vocab_corpus();
        let mut s = GibbsSampler::new(corpus.id_documents(), corpus.vocabulary.len(), 4, 0.5, 0.01, 3);
        for _ in 0..10 {
            s.sweep();
            assert!(s.counts_consistent());
        }
    }

    #[test]
    fn fit_errors() {
        let empty = corpus_of(&["".into(), "zzzz".into()]);
        assert!(fit_topics(&empty, &LdaConfig::with_defaults(2, 0)).is_err());
        let tiny = corpus_of(&["a b".into()]);
        assert!(fit_topics(&tiny, &LdaConfig::with_defaults(3, 0)).is_err());
    }

    #[test]
    fn topic_list_parsing() {
        let ids = read_topic_list("t3\n# note\n17\n\n".as_bytes()).unwrap();
        assert_eq!(ids, [3, 17].into());
    }
}
