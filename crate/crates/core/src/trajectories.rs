//! Per-user trajectory modelling: observation sequences over the cluster
//! alphabet, the enter/exit-constrained HMM, and the state, population,
//! transition and conditional-residence tables.
//!
//! Symbols `0..C` are content clusters, `C` is ENTER and `C + 1` is EXIT.
//! State 0 is the enter/exit state: it emits only the boundary symbols and
//! every sequence starts and ends there.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::corpus::{PostRecord, UserSample};
use crate::error::{Error, Result};
use crate::graph::ClusterPartition;
use crate::hmm::{self, AicRow, FitOptions, Hmm, Structure, SymbolSequenceSet};
use crate::topics::DocTopicMatrix;

pub const BOUNDARY_STATE: usize = 0;
pub const SECONDS_PER_MONTH: f64 = 30.44 * 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphabetMode {
    Cluster,
    Topic,
}

impl FromStr for AlphabetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(AlphabetMode::Cluster),
            "topic" => Ok(AlphabetMode::Topic),
            other => Err(Error::invalid(format!("unknown alphabet {other:?}, expected cluster or topic"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryPost {
    pub created: i64,
    pub doc_id: String,
    pub symbol: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserTrajectory {
    pub author: String,
    pub posts: Vec<TrajectoryPost>,
}

impl UserTrajectory {
    pub fn entry(&self) -> i64 {
        self.posts[0].created
    }

    pub fn exit(&self) -> i64 {
        self.posts[self.posts.len() - 1].created
    }

    pub fn residence_months(&self) -> f64 {
        (self.exit() - self.entry()) as f64 / SECONDS_PER_MONTH
    }

    /// `[ENTER, content..., EXIT]`.
    pub fn symbols(&self, n_content: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.posts.len() + 2);
        out.push(n_content);
        out.extend(self.posts.iter().map(|p| p.symbol));
        out.push(n_content + 1);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub data: SymbolSequenceSet,
    pub users: Vec<UserTrajectory>,
    pub content_labels: Vec<String>,
    /// Clean users dropped for having no post with a doc-topic row.
    pub excluded_users: usize,
}

impl Observations {
    pub fn from_trajectories(users: Vec<UserTrajectory>, content_labels: Vec<String>) -> Result<Self> {
        let c = content_labels.len();
        if users.iter().any(|u| u.posts.is_empty()) {
            return Err(Error::invalid("trajectory with no posts"));
        }
        if users.iter().flat_map(|u| &u.posts).any(|p| p.symbol >= c) {
            return Err(Error::invalid("post symbol outside the content alphabet"));
        }
        let mut labels = content_labels.clone();
        labels.push("ENTER".into());
        labels.push("EXIT".into());
        let data = SymbolSequenceSet::new(users.iter().map(|u| u.symbols(c)).collect(), labels)?;
        Ok(Observations {
            data,
            users,
            content_labels,
            excluded_users: 0,
        })
    }

    pub fn n_content(&self) -> usize {
        self.content_labels.len()
    }

    pub fn enter(&self) -> usize {
        self.n_content()
    }

    pub fn exit(&self) -> usize {
        self.n_content() + 1
    }

    pub fn n_posts(&self) -> usize {
        self.users.iter().map(|u| u.posts.len()).sum()
    }

    /// Integer count of posts per content symbol.
    pub fn symbol_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_content()];
        for p in self.users.iter().flat_map(|u| &u.posts) {
            counts[p.symbol] += 1;
        }
        counts
    }

    /// Corpus baseline: share of observed posts per content symbol.
    pub fn baseline(&self) -> Vec<f64> {
        let n = self.n_posts() as f64;
        self.symbol_counts().iter().map(|&c| c as f64 / n).collect()
    }
}

/// Maps each clean user's posts to the cluster of their dominant topic and
/// wraps them as `[ENTER, symbols..., EXIT]`. Content labels default to
/// `c<id>`.
pub fn build_observation_sequences(
    posts: &[PostRecord],
    matrix: &DocTopicMatrix,
    partition: &ClusterPartition,
    sample: &UserSample,
) -> Result<Observations> {
    let symbol_of_column: Vec<usize> = matrix
        .topic_ids()
        .iter()
        .map(|&t| {
            partition
                .cluster_of(t)
                .ok_or_else(|| Error::invalid(format!("topic {t} has no cluster")))
        })
        .collect::<Result<_>>()?;
    let labels = (0..partition.n_clusters()).map(|c| format!("c{c}")).collect();
    build_sequences(posts, matrix, sample, &symbol_of_column, labels)
}

/// As [`build_observation_sequences`] with dominant topics as the alphabet.
pub fn build_topic_sequences(
    posts: &[PostRecord],
    matrix: &DocTopicMatrix,
    sample: &UserSample,
) -> Result<Observations> {
    let symbol_of_column: Vec<usize> = (0..matrix.n_topics()).collect();
    let labels = matrix.topic_ids().iter().map(|t| format!("t{t}")).collect();
    build_sequences(posts, matrix, sample, &symbol_of_column, labels)
}

fn build_sequences(
    posts: &[PostRecord],
    matrix: &DocTopicMatrix,
    sample: &UserSample,
    symbol_of_column: &[usize],
    labels: Vec<String>,
) -> Result<Observations> {
    let row_of: HashMap<&str, usize> = matrix
        .doc_ids()
        .iter()
        .enumerate()
        .map(|(i, d)| (d.as_str(), i))
        .collect();
    let mut by_user: BTreeMap<&str, Vec<TrajectoryPost>> =
        sample.clean().map(|u| (u, Vec::new())).collect();
    for p in posts {
        let Some(list) = by_user.get_mut(p.author.as_str()) else {
            continue;
        };
        if let Some(&row) = row_of.get(p.id.as_str()) {
            list.push(TrajectoryPost {
                created: p.created,
                doc_id: p.id.clone(),
                symbol: symbol_of_column[matrix.dominant_column(row)],
            });
        }
    }
    let mut users = Vec::new();
    let mut excluded = 0;
    for (author, mut list) in by_user {
        if list.is_empty() {
            excluded += 1;
            continue;
        }
        list.sort_by(|a, b| (a.created, &a.doc_id).cmp(&(b.created, &b.doc_id)));
        users.push(UserTrajectory {
            author: author.to_string(),
            posts: list,
        });
    }
    if excluded > 0 {
        log::warn!("{excluded} clean users have no posts with doc-topic rows and were excluded");
    }
    let mut obs = Observations::from_trajectories(users, labels)?;
    obs.excluded_users = excluded;
    Ok(obs)
}

/// Enter/exit constraints for an `n_states` model over `n_content` content
/// symbols: state 0 starts every sequence, emits only ENTER/EXIT and cannot
/// repeat; content states emit only content symbols.
pub fn trajectory_structure(n_states: usize, n_content: usize) -> Structure {
    let m = n_content + 2;
    let mut st = Structure::free(n_states, m);
    for s in 0..n_states {
        st.initial[s] = s == BOUNDARY_STATE;
        for o in 0..m {
            let boundary_symbol = o >= n_content;
            st.emission[s * m + o] = (s == BOUNDARY_STATE) == boundary_symbol;
        }
    }
    st.transition[BOUNDARY_STATE * n_states + BOUNDARY_STATE] = false;
    st
}

/// Thresholds for calling a state a tourist state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TouristCriteria {
    pub max_dwell: f64,
    /// Total-variation distance from the corpus baseline.
    pub max_distance: f64,
}

impl Default for TouristCriteria {
    fn default() -> Self {
        TouristCriteria {
            max_dwell: 2.0,
            max_distance: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateLabel {
    Boundary,
    Tourist,
    /// Content state labelled by its most enriched cluster.
    Content(usize),
    /// Content state with no decoded posts.
    Unvisited,
}

impl StateLabel {
    pub fn name(&self, content_labels: &[String]) -> String {
        match self {
            StateLabel::Boundary => "enter/exit".into(),
            StateLabel::Tourist => "tourist".into(),
            StateLabel::Content(c) => content_labels[*c].clone(),
            StateLabel::Unvisited => "unvisited".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateProfile {
    pub state: usize,
    pub posts: usize,
    pub counts: Vec<usize>,
    /// `None` when no post was decoded to this state.
    pub distribution: Option<Vec<f64>>,
    pub enrichment: Option<Vec<f64>>,
}

/// Per-state cluster counts over decoded posts, with enrichment
/// `P(c | s) / P(c) - 1` computed from the integer counts.
pub fn profile_states(n_states: usize, paths: &[Vec<usize>], obs: &Observations) -> Vec<StateProfile> {
    let c = obs.n_content();
    let totals = obs.symbol_counts();
    let n_total = obs.n_posts();
    let mut counts = vec![vec![0usize; c]; n_states];
    for (path, user) in paths.iter().zip(&obs.users) {
        for (state, post) in path[1..path.len() - 1].iter().zip(&user.posts) {
            counts[*state][post.symbol] += 1;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(state, counts)| {
            let posts: usize = counts.iter().sum();
            let (distribution, enrichment) = if posts == 0 {
                (None, None)
            } else {
                let dist = counts.iter().map(|&k| k as f64 / posts as f64).collect();
                let enr = counts
                    .iter()
                    .zip(&totals)
                    .map(|(&k, &t)| enrichment(k, posts, t, n_total))
                    .collect();
                (Some(dist), Some(enr))
            };
            StateProfile {
                state,
                posts,
                counts,
                distribution,
                enrichment,
            }
        })
        .collect()
}

/// `(k / n) / (total / n_total) - 1`; NaN when the cluster never occurs.
pub fn enrichment(k: usize, n: usize, total: usize, n_total: usize) -> f64 {
    if total == 0 {
        return f64::NAN;
    }
    (k as f64 * n_total as f64) / (n as f64 * total as f64) - 1.0
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Content states that are short-lived and emit close to the baseline mix.
pub fn tourist_states(model: &Hmm, baseline: &[f64], criteria: &TouristCriteria) -> Vec<bool> {
    (0..model.n_states())
        .map(|s| {
            s != BOUNDARY_STATE
                && hmm::expected_dwell(model, s) <= criteria.max_dwell
                && total_variation(&model.emission_row(s)[..baseline.len()], baseline) <= criteria.max_distance
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryModel {
    pub hmm: Hmm,
    pub aic_table: Vec<AicRow>,
    /// Decoded state path per user, boundary positions included.
    pub paths: Vec<Vec<usize>>,
    pub profiles: Vec<StateProfile>,
    pub tourist: Vec<bool>,
    pub labels: Vec<StateLabel>,
    pub criteria: TouristCriteria,
}

impl TrajectoryModel {
    /// Decodes every user and labels the states of an already fitted model.
    pub fn analyse(
        hmm: Hmm,
        aic_table: Vec<AicRow>,
        obs: &Observations,
        criteria: TouristCriteria,
    ) -> Result<Self> {
        if hmm.n_symbols() != obs.n_content() + 2 {
            return Err(Error::invalid(format!(
                "model has {} symbols but the observations use {}",
                hmm.n_symbols(),
                obs.n_content() + 2
            )));
        }
        let paths = obs
            .data
            .sequences
            .iter()
            .map(|seq| {
                let (path, score) = hmm.viterbi(seq)?;
                if score == f64::NEG_INFINITY {
                    return Err(Error::invalid("a trajectory is impossible under the model"));
                }
                Ok(path)
            })
            .collect::<Result<Vec<_>>>()?;
        let profiles = profile_states(hmm.n_states(), &paths, obs);
        let tourist = tourist_states(&hmm, &obs.baseline(), &criteria);
        let labels = (0..hmm.n_states())
            .map(|s| {
                if s == BOUNDARY_STATE {
                    StateLabel::Boundary
                } else if tourist[s] {
                    StateLabel::Tourist
                } else {
                    match &profiles[s].enrichment {
                        None => StateLabel::Unvisited,
                        Some(e) => StateLabel::Content(argmax(e)),
                    }
                }
            })
            .collect();
        Ok(TrajectoryModel {
            hmm,
            aic_table,
            paths,
            profiles,
            tourist,
            labels,
            criteria,
        })
    }

    pub fn n_states(&self) -> usize {
        self.hmm.n_states()
    }

    pub fn state_name(&self, s: usize, obs: &Observations) -> String {
        let base = self.labels[s].name(&obs.content_labels);
        let same = self.labels.iter().filter(|l| **l == self.labels[s]).count();
        if same > 1 && s != BOUNDARY_STATE {
            format!("{base} ({s})")
        } else {
            base
        }
    }

    /// States carrying the given content label.
    pub fn states_labelled(&self, cluster: usize) -> Vec<usize> {
        (0..self.n_states())
            .filter(|&s| self.labels[s] == StateLabel::Content(cluster))
            .collect()
    }

    fn content_path<'a>(&self, user: usize) -> &[usize] {
        let p = &self.paths[user];
        &p[1..p.len() - 1]
    }
}

/// First maximum; NaN entries never win.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] || xs[best].is_nan() && !x.is_nan() {
            best = i;
        }
    }
    best
}

/// Selects the state count by AIC under the enter/exit structure, then
/// decodes and labels. Candidates below two states are ignored.
pub fn fit_trajectory_model(
    obs: &Observations,
    candidates: &[usize],
    restarts: usize,
    seed: u64,
    options: &FitOptions,
    criteria: TouristCriteria,
) -> Result<TrajectoryModel> {
    let usable: Vec<usize> = candidates.iter().copied().filter(|&s| s >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "no candidate state count of at least 2 (enter/exit plus one content state)",
        ));
    }
    let c = obs.n_content();
    let selection = hmm::select_states_with(&obs.data, &usable, restarts, seed, options, |s| {
        Some(trajectory_structure(s, c))
    })?;
    TrajectoryModel::analyse(selection.best.model, selection.table, obs, criteria)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UserType {
    Tourist,
    Resident,
}

impl fmt::Display for UserType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UserType::Tourist => "tourist",
            UserType::Resident => "resident",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Populations {
    pub types: Vec<UserType>,
    pub posts: Vec<usize>,
}

impl Populations {
    pub fn count(&self, t: UserType) -> usize {
        self.types.iter().filter(|&&x| x == t).count()
    }

    pub fn tourist_share(&self) -> f64 {
        self.count(UserType::Tourist) as f64 / self.types.len() as f64
    }

    pub fn post_counts(&self, t: UserType) -> Vec<usize> {
        self.types
            .iter()
            .zip(&self.posts)
            .filter(|(x, _)| **x == t)
            .map(|(_, &n)| n)
            .collect()
    }

    pub fn median_posts(&self, t: UserType) -> Option<f64> {
        median(self.post_counts(t).into_iter().map(|n| n as f64).collect())
    }

    pub fn histogram(&self, t: UserType) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for n in self.post_counts(t) {
            *h.entry(n).or_insert(0) += 1;
        }
        h
    }
}

/// A user is a tourist iff every decoded content state is a tourist state.
pub fn segment_populations(model: &TrajectoryModel, obs: &Observations) -> Populations {
    let types = (0..obs.users.len())
        .map(|u| {
            if model.content_path(u).iter().all(|&s| model.tourist[s]) {
                UserType::Tourist
            } else {
                UserType::Resident
            }
        })
        .collect();
    Populations {
        types,
        posts: obs.users.iter().map(|u| u.posts.len()).collect(),
    }
}

pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow {
    pub state: usize,
    pub fraction_first: Option<f64>,
    pub fraction_overall: Option<f64>,
    pub dwell_expected: f64,
    pub dwell_empirical: Option<f64>,
    pub residence_months: Option<f64>,
    pub modal_users: usize,
    /// Where departures from this state go, indexed by state; index 0 is exit.
    pub next: Option<Vec<f64>>,
}

/// Most frequent content state of a user; ties go to the state visited first.
fn modal_state(path: &[usize]) -> usize {
    let mut counts: Vec<(usize, usize, usize)> = Vec::new(); // (state, count, first index)
    for (i, &s) in path.iter().enumerate() {
        match counts.iter_mut().find(|(st, _, _)| *st == s) {
            Some(entry) => entry.1 += 1,
            None => counts.push((s, 1, i)),
        }
    }
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .map(|e| e.0)
        .expect("non-empty path")
}

/// One row per content state. Fractions are among residents; run lengths,
/// departures and residence use every user.
pub fn transition_report(
    model: &TrajectoryModel,
    obs: &Observations,
    populations: &Populations,
) -> Vec<TransitionRow> {
    let s_count = model.n_states();
    let mut first = vec![0usize; s_count];
    let mut overall = vec![0usize; s_count];
    let mut residents = 0usize;
    let mut resident_posts = 0usize;
    let mut runs = vec![(0usize, 0usize); s_count]; // (runs, total length)
    let mut departures = vec![vec![0usize; s_count]; s_count];
    let mut residence: Vec<Vec<f64>> = vec![Vec::new(); s_count];
    for (u, user) in obs.users.iter().enumerate() {
        let path = model.content_path(u);
        if populations.types[u] == UserType::Resident {
            residents += 1;
            resident_posts += path.len();
            first[path[0]] += 1;
            for &s in path {
                overall[s] += 1;
            }
        }
        let mut start = 0;
        for i in 1..=path.len() {
            if i == path.len() || path[i] != path[start] {
                runs[path[start]].0 += 1;
                runs[path[start]].1 += i - start;
                let to = if i == path.len() { BOUNDARY_STATE } else { path[i] };
                departures[path[start]][to] += 1;
                start = i;
            }
        }
        residence[modal_state(path)].push(user.residence_months());
    }
    (1..s_count)
        .map(|s| {
            let visited = runs[s].0 > 0;
            let n_departures: usize = departures[s].iter().sum();
            TransitionRow {
                state: s,
                fraction_first: (visited && residents > 0).then(|| first[s] as f64 / residents as f64),
                fraction_overall: (visited && resident_posts > 0)
                    .then(|| overall[s] as f64 / resident_posts as f64),
                dwell_expected: hmm::expected_dwell(&model.hmm, s),
                dwell_empirical: visited.then(|| runs[s].1 as f64 / runs[s].0 as f64),
                residence_months: median(residence[s].clone()),
                modal_users: residence[s].len(),
                next: (n_departures > 0).then(|| {
                    departures[s]
                        .iter()
                        .map(|&k| k as f64 / n_departures as f64)
                        .collect()
                }),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalResidence {
    pub from_state: usize,
    pub to_state: usize,
    pub base_users: usize,
    pub base_median_months: Option<f64>,
    pub conditional_users: usize,
    pub conditional_median_months: Option<f64>,
}

impl ConditionalResidence {
    /// Conditional minus unconditional median, when both exist.
    pub fn uplift(&self) -> Option<f64> {
        Some(self.conditional_median_months? - self.base_median_months?)
    }
}

/// Median residence of users whose first content state is `from_state`, and
/// of those among them whose content path contains `to_state` anywhere.
pub fn conditional_residence(
    model: &TrajectoryModel,
    obs: &Observations,
    from_state: usize,
    to_state: usize,
) -> Result<ConditionalResidence> {
    let n = model.n_states();
    if from_state == BOUNDARY_STATE || to_state == BOUNDARY_STATE || from_state >= n || to_state >= n {
        return Err(Error::invalid("conditional residence needs two content states"));
    }
    let mut base = Vec::new();
    let mut conditional = Vec::new();
    for (u, user) in obs.users.iter().enumerate() {
        let path = model.content_path(u);
        if path[0] != from_state {
            continue;
        }
        base.push(user.residence_months());
        if path.contains(&to_state) {
            conditional.push(user.residence_months());
        }
    }
    Ok(ConditionalResidence {
        from_state,
        to_state,
        base_users: base.len(),
        conditional_users: conditional.len(),
        base_median_months: median(base),
        conditional_median_months: median(conditional),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub populations: Populations,
    pub transitions: Vec<TransitionRow>,
    pub conditional: Vec<ConditionalResidence>,
}

impl Report {
    /// All tables; conditional residence for every ordered pair of distinct
    /// non-tourist content states.
    pub fn build(model: &TrajectoryModel, obs: &Observations) -> Result<Self> {
        let populations = segment_populations(model, obs);
        let transitions = transition_report(model, obs, &populations);
        let content: Vec<usize> = (1..model.n_states()).filter(|&s| !model.tourist[s]).collect();
        let mut conditional = Vec::new();
        for &a in &content {
            for &b in &content {
                if a != b {
                    conditional.push(conditional_residence(model, obs, a, b)?);
                }
            }
        }
        Ok(Report {
            populations,
            transitions,
            conditional,
        })
    }

    /// Writes `profile.csv`, `transitions.csv`, `populations.csv`,
    /// `conditional.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path, model: &TrajectoryModel, obs: &Observations) -> Result<()> {
        let names: Vec<String> = (0..model.n_states()).map(|s| model.state_name(s, obs)).collect();
        let baseline = obs.baseline();
        let opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();

        let mut out = BufWriter::new(File::create(dir.join("profile.csv"))?);
        writeln!(out, "state,label,tourist,posts,cluster,count,probability,baseline,enrichment")?;
        for p in &model.profiles[1..] {
            for c in 0..obs.n_content() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{:?},{}",
                    p.state,
                    csv_field(&names[p.state]),
                    model.tourist[p.state],
                    p.posts,
                    csv_field(&obs.content_labels[c]),
                    p.counts[c],
                    opt(p.distribution.as_ref().map(|d| d[c])),
                    baseline[c],
                    opt(p.enrichment.as_ref().map(|e| e[c])),
                )?;
            }
        }
        out.flush()?;

        let mut out = BufWriter::new(File::create(dir.join("transitions.csv"))?);
        writeln!(
            out,
            "state,label,fraction_first,fraction_overall,dwell_expected,dwell_empirical,residence_months,modal_users,next_states"
        )?;
        for r in &self.transitions {
            let next = r
                .next
                .as_ref()
                .map(|v| next_pairs(v, &names).iter().map(|(k, p)| format!("{k}={p:?}")).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{:?},{},{},{},{}",
                r.state,
                csv_field(&names[r.state]),
                opt(r.fraction_first),
                opt(r.fraction_overall),
                r.dwell_expected,
                opt(r.dwell_empirical),
                opt(r.residence_months),
                r.modal_users,
                csv_field(&next),
            )?;
        }
        out.flush()?;

        let mut out = BufWriter::new(File::create(dir.join("populations.csv"))?);
        writeln!(out, "class,posts,users")?;
        for t in [UserType::Tourist, UserType::Resident] {
            for (posts, users) in self.populations.histogram(t) {
                writeln!(out, "{t},{posts},{users}")?;
            }
        }
        out.flush()?;

        let mut out = BufWriter::new(File::create(dir.join("conditional.csv"))?);
        writeln!(
            out,
            "from_state,from_label,to_state,to_label,base_users,base_median_months,conditional_users,conditional_median_months"
        )?;
        for c in &self.conditional {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.from_state,
                csv_field(&names[c.from_state]),
                c.to_state,
                csv_field(&names[c.to_state]),
                c.base_users,
                opt(c.base_median_months),
                c.conditional_users,
                opt(c.conditional_median_months),
            )?;
        }
        out.flush()?;

        let bundle = self.json(model, obs, &names);
        let mut out = BufWriter::new(File::create(dir.join("report.json"))?);
        serde_json::to_writer_pretty(&mut out, &bundle)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    fn json(&self, model: &TrajectoryModel, obs: &Observations, names: &[String]) -> serde_json::Value {
        use serde_json::json;
        let finite = |x: f64| if x.is_finite() { json!(x) } else { serde_json::Value::Null };
        let opt = |x: Option<f64>| x.map_or(serde_json::Value::Null, finite);
        let profile: Vec<_> = model.profiles[1..]
            .iter()
            .map(|p| {
                json!({
                    "state": p.state,
                    "label": names[p.state],
                    "tourist": model.tourist[p.state],
                    "posts": p.posts,
                    "counts": p.counts,
                    "probability": p.distribution.as_ref().map(|d| d.iter().map(|&x| finite(x)).collect::<Vec<_>>()),
                    "enrichment": p.enrichment.as_ref().map(|d| d.iter().map(|&x| finite(x)).collect::<Vec<_>>()),
                })
            })
            .collect();
        let transitions: Vec<_> = self
            .transitions
            .iter()
            .map(|r| {
                json!({
                    "state": r.state,
                    "label": names[r.state],
                    "fraction_first": opt(r.fraction_first),
                    "fraction_overall": opt(r.fraction_overall),
                    "dwell_expected": finite(r.dwell_expected),
                    "dwell_empirical": opt(r.dwell_empirical),
                    "residence_months": opt(r.residence_months),
                    "modal_users": r.modal_users,
                    "next_states": r.next.as_ref().map(|v| {
                        next_pairs(v, names).into_iter().map(|(k, p)| json!({"state": k, "probability": p})).collect::<Vec<_>>()
                    }),
                })
            })
            .collect();
        let pops = &self.populations;
        let conditional: Vec<_> = self
            .conditional
            .iter()
            .map(|c| {
                json!({
                    "from_state": c.from_state,
                    "from_label": names[c.from_state],
                    "to_state": c.to_state,
                    "to_label": names[c.to_state],
                    "base_users": c.base_users,
                    "base_median_months": opt(c.base_median_months),
                    "conditional_users": c.conditional_users,
                    "conditional_median_months": opt(c.conditional_median_months),
                })
            })
            .collect();
        json!({
            "parameters": {
                "n_states": model.n_states(),
                "tourist_max_dwell": model.criteria.max_dwell,
                "tourist_max_distance": model.criteria.max_distance,
                "content_labels": obs.content_labels,
                "baseline": obs.baseline(),
                "excluded_users": obs.excluded_users,
            },
            "aic": model.aic_table.iter().map(|r| json!({
                "n_states": r.n_states,
                "log_likelihood": finite(r.log_likelihood),
                "free_parameters": r.free_parameters,
                "aic": finite(r.aic),
                "iterations": r.iterations,
                "converged": r.converged,
            })).collect::<Vec<_>>(),
            "profile": profile,
            "transitions": transitions,
            "populations": {
                "users": pops.types.len(),
                "tourists": pops.count(UserType::Tourist),
                "residents": pops.count(UserType::Resident),
                "tourist_share": finite(pops.tourist_share()),
                "tourist_median_posts": opt(pops.median_posts(UserType::Tourist)),
                "resident_median_posts": opt(pops.median_posts(UserType::Resident)),
            },
            "conditional": conditional,
        })
    }
}

/// Non-zero departure targets as `(name, probability)`, exit first.
fn next_pairs(next: &[f64], names: &[String]) -> Vec<(String, f64)> {
    next.iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, &p)| {
            let name = if s == BOUNDARY_STATE { "EXIT".to_string() } else { names[s].clone() };
            (name, p)
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Names clusters by the most common topic label among their members; ties
/// go to the alphabetically first label. Unlabelled clusters keep `c<id>`.
pub fn cluster_names(partition: &ClusterPartition, topic_labels: &HashMap<usize, String>) -> Vec<String> {
    partition
        .members()
        .iter()
        .enumerate()
        .map(|(c, topics)| {
            let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
            for t in topics {
                if let Some(l) = topic_labels.get(t) {
                    *votes.entry(l.as_str()).or_insert(0) += 1;
                }
            }
            let best = votes.iter().fold(None, |best: Option<(&str, usize)>, (&l, &n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((l, n)),
            });
            best.map_or_else(|| format!("c{c}"), |(l, _)| l.to_string())
        })
        .collect()
}

/// Samples trajectories from a model in enter/exit form: each path starts
/// in state 0 and ends when the chain returns there.
pub fn sample_trajectory_paths(
    model: &Hmm,
    n_users: usize,
    max_posts: usize,
    rng: &mut crate::rng::Rng,
) -> Result<Vec<hmm::SampledPath>> {
    let law = hmm::LengthLaw::Absorbing {
        state: BOUNDARY_STATE,
        max_len: max_posts + 1,
    };
    let mut paths = hmm::sample_paths_with(model, n_users, law, rng)?;
    let exit = model.n_symbols() - 1;
    for p in &mut paths {
        p.states.push(BOUNDARY_STATE);
        p.symbols.push(exit);
    }
    Ok(paths)
}
