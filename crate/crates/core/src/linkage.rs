//! Topic linkage networks.
//!
//! For units `k` (documents or users) with topic weights `p_i(k)`:
//!
//! ```text
//! p_i  = (1/N) sum_k p_i(k)
//! p_ij = (1/N) sum_k p_i(k) p_j(k)
//! R_ij = log2(p_ij / (p_i p_j))
//! ```
//!
//! Because every unit row is on the simplex, `p_ij` sums to one and its
//! marginals are `p_i`. Pairs that never co-occur get `R_ij = -inf`; topics
//! with no mass at all are flagged undefined and their linkage is NaN.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::topics::DocTopicMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Text,
    User,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Text => "text",
            Level::User => "user",
        })
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Level::Text),
            "user" => Ok(Level::User),
            other => Err(Error::invalid(format!("unknown linkage level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkageNetwork {
    pub level: Level,
    pub n_units: usize,
    pub topic_ids: Vec<usize>,
    marginals: Vec<f64>,
    joint: Vec<f64>,
    linkage: Vec<f64>,
}

impl LinkageNetwork {
    pub fn n_topics(&self) -> usize {
        self.topic_ids.len()
    }

    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    pub fn marginal(&self, i: usize) -> f64 {
        self.marginals[i]
    }

    pub fn joint(&self, i: usize, j: usize) -> f64 {
        self.joint[i * self.n_topics() + j]
    }

    /// Linkage in bits. The diagonal is self-linkage.
    pub fn linkage(&self, i: usize, j: usize) -> f64 {
        self.linkage[i * self.n_topics() + j]
    }

    /// A topic with zero total mass; its row and column carry no linkage.
    pub fn is_undefined(&self, i: usize) -> bool {
        self.marginals[i] == 0.0
    }

    /// Self-linkage `R_ii` for every topic.
    pub fn self_linkage(&self) -> Vec<f64> {
        (0..self.n_topics()).map(|i| self.linkage(i, i)).collect()
    }

    pub(crate) fn from_parts(
        level: Level,
        n_units: usize,
        topic_ids: Vec<usize>,
        marginals: Vec<f64>,
        joint: Vec<f64>,
    ) -> Self {
        let t = topic_ids.len();
        let mut linkage = vec![0.0; t * t];
        for i in 0..t {
            for j in i..t {
                let r = if marginals[i] == 0.0 || marginals[j] == 0.0 {
                    f64::NAN
                } else if joint[i * t + j] == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (joint[i * t + j] / (marginals[i] * marginals[j])).log2()
                };
                linkage[i * t + j] = r;
                linkage[j * t + i] = r;
            }
        }
        LinkageNetwork {
            level,
            n_units,
            topic_ids,
            marginals,
            joint,
            linkage,
        }
    }

    /// Header `level,topics,units`, then `topic,marginal` rows, then
    /// upper-triangular `topic_i,topic_j,joint,linkage` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "level,topics,units")?;
        writeln!(out, "{},{},{}", self.level, self.n_topics(), self.n_units)?;
        writeln!(out, "topic,marginal")?;
        for (t, p) in self.topic_ids.iter().zip(&self.marginals) {
            writeln!(out, "t{t},{p:?}")?;
        }
        writeln!(out, "topic_i,topic_j,joint,linkage")?;
        for i in 0..self.n_topics() {
            for j in i..self.n_topics() {
                writeln!(
                    out,
                    "t{},t{},{:?},{:?}",
                    self.topic_ids[i],
                    self.topic_ids[j],
                    self.joint(i, j),
                    self.linkage(i, j)
                )?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
        let bad = |line: usize, reason: &str| Error::Parse {
            line,
            reason: reason.to_string(),
        };
        let field = |line: usize, s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| bad(line, "bad number"))
        };
        let topic = |line: usize, s: &str| -> Result<usize> {
            s.trim_start_matches('t')
                .parse::<usize>()
                .map_err(|_| bad(line, "bad topic id"))
        };
        if lines.len() < 3 || lines[0] != "level,topics,units" {
            return Err(bad(1, "missing network header"));
        }
        let head: Vec<&str> = lines[1].split(',').collect();
        if head.len() != 3 {
            return Err(bad(2, "expected level,topics,units"));
        }
        let level: Level = head[0].parse()?;
        let t: usize = head[1].parse().map_err(|_| bad(2, "bad topic count"))?;
        let n_units: usize = head[2].parse().map_err(|_| bad(2, "bad unit count"))?;
        let tri = t * (t + 1) / 2;
        if lines.len() < 3 + t + 1 + tri {
            return Err(bad(lines.len(), "truncated network file"));
        }
        let mut topic_ids = Vec::with_capacity(t);
        let mut marginals = Vec::with_capacity(t);
        for (i, line) in lines[3..3 + t].iter().enumerate() {
            let n = 4 + i;
            let (id, p) = line.split_once(',').ok_or_else(|| bad(n, "expected topic,marginal"))?;
            topic_ids.push(topic(n, id)?);
            marginals.push(field(n, p)?);
        }
        let index: HashMap<usize, usize> =
            topic_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut joint = vec![0.0; t * t];
        let mut linkage = vec![0.0; t * t];
        for (k, line) in lines[4 + t..4 + t + tri].iter().enumerate() {
            let n = 5 + t + k;
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(bad(n, "expected 4 fields"));
            }
            let i = *index.get(&topic(n, parts[0])?).ok_or_else(|| bad(n, "unknown topic"))?;
            let j = *index.get(&topic(n, parts[1])?).ok_or_else(|| bad(n, "unknown topic"))?;
            let (p, r) = (field(n, parts[2])?, field(n, parts[3])?);
            joint[i * t + j] = p;
            joint[j * t + i] = p;
            linkage[i * t + j] = r;
            linkage[j * t + i] = r;
        }
        Ok(LinkageNetwork {
            level,
            n_units,
            topic_ids,
            marginals,
            joint,
            linkage,
        })
    }
}

fn network_from_rows<'a>(
    level: Level,
    topic_ids: &[usize],
    rows: impl Iterator<Item = &'a [f64]> + Clone,
) -> Result<LinkageNetwork> {
    let t = topic_ids.len();
    let n = rows.clone().count();
    if n < 2 || t < 2 {
        return Err(Error::invalid(format!(
            "linkage needs at least 2 units and 2 topics, got {n} and {t}"
        )));
    }
    let mut marginals = vec![0.0; t];
    let mut joint = vec![0.0; t * t];
    for row in rows {
        for i in 0..t {
            marginals[i] += row[i];
            for j in i..t {
                joint[i * t + j] += row[i] * row[j];
            }
        }
    }
    let nf = n as f64;
    for m in &mut marginals {
        *m /= nf;
    }
    for i in 0..t {
        for j in i..t {
            let v = joint[i * t + j] / nf;
            joint[i * t + j] = v;
            joint[j * t + i] = v;
        }
    }
    let total: f64 = joint.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("joint distribution sums to {total}")));
    }
    let undefined: Vec<usize> = (0..t).filter(|&i| marginals[i] == 0.0).map(|i| topic_ids[i]).collect();
    if !undefined.is_empty() {
        log::warn!("topics with no mass, linkage undefined: {undefined:?}");
    }
    Ok(LinkageNetwork::from_parts(level, n, topic_ids.to_vec(), marginals, joint))
}

/// Linkage with documents as units.
pub fn text_linkage(matrix: &DocTopicMatrix) -> Result<LinkageNetwork> {
    network_from_rows(Level::Text, matrix.topic_ids(), matrix.rows())
}

/// Linkage with users as units; a user's row is the mean of their documents'
/// rows. Users are ordered by their first document in the matrix.
pub fn user_linkage(
    matrix: &DocTopicMatrix,
    authorship: &HashMap<String, String>,
) -> Result<LinkageNetwork> {
    let rows = user_rows(matrix, authorship)?;
    network_from_rows(
        Level::User,
        matrix.topic_ids(),
        rows.iter().map(Vec::as_slice),
    )
}

/// Per-user mean topic rows, in order of each user's first document.
pub fn user_rows(
    matrix: &DocTopicMatrix,
    authorship: &HashMap<String, String>,
) -> Result<Vec<Vec<f64>>> {
    let t = matrix.n_topics();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for (d, doc) in matrix.doc_ids().iter().enumerate() {
        let author = authorship
            .get(doc)
            .ok_or_else(|| Error::invalid(format!("document {doc:?} has no author")))?;
        let u = *index.entry(author.as_str()).or_insert_with(|| {
            sums.push(vec![0.0; t]);
            counts.push(0);
            sums.len() - 1
        });
        for (acc, w) in sums[u].iter_mut().zip(matrix.row(d)) {
            *acc += w;
        }
        counts[u] += 1;
    }
    for (row, &c) in sums.iter_mut().zip(&counts) {
        for x in row.iter_mut() {
            *x /= c as f64;
        }
    }
    Ok(sums)
}

/// Joint-weighted average linkage, `sum p_ij R_ij` over the normalized joint.
/// Unlinked and undefined pairs carry no joint mass and contribute nothing.
pub fn mutual_information(network: &LinkageNetwork) -> f64 {
    let t = network.n_topics();
    let total: f64 = network.joint.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for i in 0..t {
        for j in 0..t {
            let p = network.joint(i, j);
            let r = network.linkage(i, j);
            if p > 0.0 && r.is_finite() {
                mi += p / total * r;
            }
        }
    }
    mi
}

/// Pearson correlation between the off-diagonal linkage values of two
/// networks over the same topics, using pairs finite in both.
pub fn linkage_correlation(a: &LinkageNetwork, b: &LinkageNetwork) -> Result<Option<f64>> {
    if a.topic_ids != b.topic_ids {
        return Err(Error::invalid("networks cover different topics"));
    }
    let t = a.n_topics();
    let mut pairs = Vec::new();
    for i in 0..t {
        for j in i + 1..t {
            let (x, y) = (a.linkage(i, j), b.linkage(i, j));
            if x.is_finite() && y.is_finite() {
                pairs.push((x, y));
            }
        }
    }
    if pairs.len() < 2 {
        return Ok(None);
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}
