//! Planted-structure generators: corpora whose topic clusters and user
//! dynamics are known, so each pipeline stage can be checked against truth.
//!
//! The `paper` preset is calibrated to the published population split and
//! cluster shares; these are generator targets, not data.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_archive, PostKind, PostRecord};
use crate::error::{Error, Result};
use crate::graph::ClusterPartition;
use crate::hmm::{draw, Hmm};
use crate::rng::{child_seed, rng_from, Rng};
use crate::topics::DocTopicMatrix;
use crate::trajectories::sample_trajectory_paths;

const DAY: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterPlan {
    pub name: String,
    /// Target share of all posts.
    pub share: f64,
    pub topics: usize,
    /// Per-post probability that a resident in this cluster's state leaves.
    pub exit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Clean newcomers to the target forum.
    pub n_users: usize,
    pub tourist_fraction: f64,
    /// Users with blocked-forum history before first contact.
    pub other_users: usize,
    /// Users with no history at all.
    pub special_users: usize,
    pub target_forum: String,
    pub open_forum: String,
    pub blocked_forum: String,
    pub start_time: i64,
    /// First contacts are spread uniformly over this many days.
    pub window_days: f64,
    /// Mean of the exponential gap between consecutive posts.
    pub mean_gap_days: f64,
    pub tokens_per_post: usize,
    pub words_per_topic: usize,
    /// Total Dirichlet concentration over a cluster's topics.
    pub concentration: f64,
    /// Topic mass spread uniformly over topics outside the emitted cluster.
    pub leakage: f64,
    /// Per-post probability that a resident re-draws their state from the baseline mix.
    pub resident_jump: f64,
    /// Weight of a resident state's own cluster in its emissions.
    pub resident_focus: f64,
    /// Tourist self-transition probability.
    pub tourist_stay: f64,
    pub max_posts: usize,
    pub clusters: Vec<ClusterPlan>,
}

impl SynthSpec {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::invalid(format!("unknown synth preset {other:?} (micro, paper)"))),
        }
    }

    pub fn micro() -> Self {
        SynthSpec {
            seed: 1,
            n_users: 40,
            tourist_fraction: 0.7,
            other_users: 3,
            special_users: 2,
            target_forum: "target".into(),
            open_forum: "askreddit".into(),
            blocked_forum: "mensrights".into(),
            start_time: 1_400_000_000,
            window_days: 60.0,
            mean_gap_days: 3.0,
            tokens_per_post: 12,
            words_per_topic: 8,
            concentration: 5.0,
            leakage: 0.02,
            resident_jump: 0.05,
            resident_focus: 0.6,
            tourist_stay: 0.2,
            max_posts: 200,
            clusters: vec![
                ClusterPlan { name: "alpha".into(), share: 0.5, topics: 2, exit_rate: 0.08 },
                ClusterPlan { name: "beta".into(), share: 0.3, topics: 2, exit_rate: 0.1 },
                ClusterPlan { name: "gamma".into(), share: 0.2, topics: 2, exit_rate: 0.1 },
            ],
        }
    }

    /// Population split, cluster shares and dwell scales taken from the
    /// published results as calibration targets.
    pub fn paper() -> Self {
        SynthSpec {
            seed: 2019,
            n_users: 2000,
            tourist_fraction: 0.87,
            other_users: 100,
            special_users: 50,
            target_forum: "TheRedPill".into(),
            open_forum: "AskReddit".into(),
            blocked_forum: "MensRights".into(),
            start_time: 1_350_000_000,
            window_days: 365.0,
            mean_gap_days: 7.0,
            tokens_per_post: 20,
            words_per_topic: 30,
            concentration: 5.0,
            leakage: 0.02,
            resident_jump: 0.1,
            resident_focus: 0.6,
            tourist_stay: 0.2,
            max_posts: 2000,
            clusters: vec![
                ClusterPlan { name: "status".into(), share: 0.47, topics: 4, exit_rate: 0.02 },
                ClusterPlan { name: "nrx".into(), share: 0.19, topics: 4, exit_rate: 0.03 },
                ClusterPlan { name: "self-help".into(), share: 0.14, topics: 4, exit_rate: 0.06 },
                ClusterPlan { name: "pua".into(), share: 0.14, topics: 4, exit_rate: 0.05 },
                ClusterPlan { name: "mra".into(), share: 0.06, topics: 4, exit_rate: 0.05 },
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| Error::invalid(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64, what: &str| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} must lie in [0, 1], got {x}")))
            }
        };
        unit(self.tourist_fraction, "tourist_fraction")?;
        unit(self.leakage, "leakage")?;
        unit(self.resident_jump, "resident_jump")?;
        unit(self.resident_focus, "resident_focus")?;
        unit(self.tourist_stay, "tourist_stay")?;
        if self.clusters.is_empty() || self.clusters.iter().any(|c| c.topics == 0) {
            return Err(Error::invalid("every cluster needs at least one topic"));
        }
        for c in &self.clusters {
            unit(c.share, &format!("share of {}", c.name))?;
            unit(c.exit_rate, &format!("exit_rate of {}", c.name))?;
            if c.exit_rate == 0.0 {
                return Err(Error::invalid(format!("exit_rate of {} must be positive", c.name)));
            }
            if self.resident_jump + c.exit_rate > 1.0 {
                return Err(Error::invalid(format!("resident_jump + exit_rate of {} exceeds 1", c.name)));
            }
        }
        let total: f64 = self.clusters.iter().map(|c| c.share).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("cluster shares sum to {total}")));
        }
        if self.concentration <= 0.0 || self.mean_gap_days <= 0.0 || self.window_days < 0.0 {
            return Err(Error::invalid("concentration and mean_gap_days must be positive"));
        }
        if self.max_posts == 0 || self.words_per_topic == 0 {
            return Err(Error::invalid("max_posts and words_per_topic must be positive"));
        }
        Ok(())
    }

    pub fn n_topics(&self) -> usize {
        self.clusters.iter().map(|c| c.topics).sum()
    }

    pub fn shares(&self) -> Vec<f64> {
        self.clusters.iter().map(|c| c.share).collect()
    }

    /// Planted cluster of every topic; topic ids run contiguously by cluster.
    pub fn topic_clusters(&self) -> Vec<usize> {
        self.clusters
            .iter()
            .enumerate()
            .flat_map(|(c, plan)| std::iter::repeat_n(c, plan.topics))
            .collect()
    }

    /// Two-state trajectory model: enter/exit plus one short-lived state
    /// emitting the baseline cluster mix.
    pub fn tourist_model(&self) -> Result<Hmm> {
        let c = self.clusters.len();
        let mut boundary = vec![0.0; c + 2];
        boundary[c] = 0.5;
        boundary[c + 1] = 0.5;
        let mut visit = self.shares();
        visit.extend([0.0, 0.0]);
        Hmm::new(
            vec![1.0, 0.0],
            vec![vec![0.0, 1.0], vec![1.0 - self.tourist_stay, self.tourist_stay]],
            vec![boundary, visit],
        )
    }

    /// Enter/exit plus one sticky state per cluster. Entry is proportional
    /// to share times exit rate, which makes expected occupancy, and hence
    /// the emitted cluster mix, proportional to the shares.
    pub fn resident_model(&self) -> Result<Hmm> {
        let c = self.clusters.len();
        let b = self.shares();
        let r = self.resident_jump;
        let f = self.resident_focus;
        let entry: Vec<f64> = self.clusters.iter().map(|p| p.share * p.exit_rate).collect();
        let entry_total: f64 = entry.iter().sum();

        let mut transition = Vec::with_capacity(c + 1);
        let mut first = vec![0.0];
        first.extend(entry.iter().map(|e| e / entry_total));
        transition.push(first);
        for (s, plan) in self.clusters.iter().enumerate() {
            let mut row = vec![plan.exit_rate];
            row.extend((0..c).map(|t| r * b[t] + if t == s { 1.0 - r - plan.exit_rate } else { 0.0 }));
            transition.push(row);
        }

        let mut emission = Vec::with_capacity(c + 1);
        let mut boundary = vec![0.0; c + 2];
        boundary[c] = 0.5;
        boundary[c + 1] = 0.5;
        emission.push(boundary);
        for s in 0..c {
            let mut row: Vec<f64> = (0..c).map(|t| (1.0 - f) * b[t] + if t == s { f } else { 0.0 }).collect();
            row.extend([0.0, 0.0]);
            emission.push(row);
        }
        let mut initial = vec![0.0; c + 1];
        initial[0] = 1.0;
        Hmm::new(initial, transition, emission)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantedClass {
    Tourist,
    Resident,
    Other,
    Special,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedUser {
    pub author: String,
    pub class: PlantedClass,
    /// Hidden state per target post (class model's numbering, boundary excluded).
    pub states: Vec<usize>,
    pub clusters: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    /// Target-forum posts followed by out-of-forum history, sorted by time.
    pub posts: Vec<PostRecord>,
    pub matrix: DocTopicMatrix,
    pub partition: ClusterPartition,
    pub users: Vec<PlantedUser>,
    pub spec: SynthSpec,
}

impl SynthCorpus {
    pub fn target_posts(&self) -> Vec<PostRecord> {
        self.posts.iter().filter(|p| p.forum == self.spec.target_forum).cloned().collect()
    }

    pub fn blocked_forums(&self) -> HashSet<String> {
        [self.spec.blocked_forum.clone()].into_iter().collect()
    }

    /// Window covering every first contact.
    pub fn window(&self) -> (i64, i64) {
        (
            self.spec.start_time,
            self.spec.start_time + (self.spec.window_days * DAY) as i64 + 1,
        )
    }

    /// Writes `archive.jsonl`, `doc_topics.csv`, `topic_labels.csv`,
    /// `blocked.txt`, `planted_users.csv` and `spec.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(File::create(dir.join("archive.jsonl"))?);
        write_archive(&mut out, &self.posts)?;
        out.flush()?;

        let mut out = BufWriter::new(File::create(dir.join("doc_topics.csv"))?);
        self.matrix.write_csv(&mut out)?;
        out.flush()?;

        let mut out = BufWriter::new(File::create(dir.join("topic_labels.csv"))?);
        writeln!(out, "topic,label")?;
        for (t, &c) in self.spec.topic_clusters().iter().enumerate() {
            writeln!(out, "{t},{}", self.spec.clusters[c].name)?;
        }
        out.flush()?;

        std::fs::write(dir.join("blocked.txt"), format!("{}\n", self.spec.blocked_forum))?;

        let mut out = BufWriter::new(File::create(dir.join("planted_users.csv"))?);
        writeln!(out, "author,class,posts")?;
        for u in &self.users {
            let class = serde_json::to_value(u.class)?;
            writeln!(out, "{},{},{}", u.author, class.as_str().unwrap_or_default(), u.clusters.len())?;
        }
        out.flush()?;

        std::fs::write(dir.join("spec.toml"), self.spec.to_toml())?;
        Ok(())
    }
}

/// Doc-topic row for a post emitted from `cluster`: Dirichlet over the
/// cluster's topics scaled by `1 - leakage`, plus leakage spread evenly
/// over the remaining topics.
fn topic_row(spec: &SynthSpec, topic_cluster: &[usize], cluster: usize, rng: &mut Rng) -> Vec<f64> {
    let own = spec.clusters[cluster].topics;
    let others = topic_cluster.len() - own;
    let leak = if others == 0 { 0.0 } else { spec.leakage };
    let gamma = Gamma::new(spec.concentration / own as f64, 1.0).expect("positive shape");
    let mut row = vec![0.0; topic_cluster.len()];
    let mut sum = 0.0;
    for (t, &c) in topic_cluster.iter().enumerate() {
        if c == cluster {
            // guard against an all-zero draw at tiny shapes
            row[t] = gamma.sample(rng).max(f64::MIN_POSITIVE);
            sum += row[t];
        }
    }
    for (t, &c) in topic_cluster.iter().enumerate() {
        row[t] = if c == cluster {
            (1.0 - leak) * row[t] / sum
        } else {
            leak / others as f64
        };
    }
    row
}

fn post_text(spec: &SynthSpec, row: &[f64], rng: &mut Rng) -> String {
    (0..spec.tokens_per_post)
        .map(|_| {
            let t = draw(rng, row);
            format!("t{t}w{}", rng.random_range(0..spec.words_per_topic))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates the corpus. Each user draws from their own seed, derived from
/// the spec seed and the user index.
pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let tourist = spec.tourist_model()?;
    let resident = spec.resident_model()?;
    let topic_cluster = spec.topic_clusters();
    let gap = Exp::new(1.0 / spec.mean_gap_days).map_err(|e| Error::invalid(e.to_string()))?;

    let mut posts = Vec::new();
    let mut doc_ids = Vec::new();
    let mut weights = Vec::new();
    let mut users = Vec::new();
    let total_users = spec.n_users + spec.other_users + spec.special_users;
    for u in 0..total_users {
        let mut rng = rng_from(child_seed(spec.seed, u as u64));
        let (author, class) = if u < spec.n_users {
            let class = if rng.random::<f64>() < spec.tourist_fraction {
                PlantedClass::Tourist
            } else {
                PlantedClass::Resident
            };
            (format!("u{u:05}"), class)
        } else if u < spec.n_users + spec.other_users {
            (format!("o{:05}", u - spec.n_users), PlantedClass::Other)
        } else {
            (format!("s{:05}", u - spec.n_users - spec.other_users), PlantedClass::Special)
        };
        let model = if class == PlantedClass::Resident { &resident } else { &tourist };
        let path = sample_trajectory_paths(model, 1, spec.max_posts, &mut rng)?.remove(0);
        let states = path.states[1..path.states.len() - 1].to_vec();
        let clusters = path.symbols[1..path.symbols.len() - 1].to_vec();

        let first_contact = spec.start_time + (rng.random::<f64>() * spec.window_days * DAY) as i64;
        let history_forum = match class {
            PlantedClass::Tourist | PlantedClass::Resident => Some(&spec.open_forum),
            PlantedClass::Other => Some(&spec.blocked_forum),
            PlantedClass::Special => None,
        };
        if let Some(forum) = history_forum {
            let before = 1 + (gap.sample(&mut rng) * DAY) as i64;
            posts.push(PostRecord {
                id: format!("{author}-h"),
                author: author.clone(),
                created: first_contact - before,
                forum: forum.clone(),
                kind: PostKind::Comment,
                text: post_text(spec, &vec![1.0 / topic_cluster.len() as f64; topic_cluster.len()], &mut rng),
            });
        }
        let mut created = first_contact;
        for (k, &cluster) in clusters.iter().enumerate() {
            if k > 0 {
                created += 1 + (gap.sample(&mut rng) * DAY) as i64;
            }
            let row = topic_row(spec, &topic_cluster, cluster, &mut rng);
            let id = format!("{author}-{k:04}");
            posts.push(PostRecord {
                id: id.clone(),
                author: author.clone(),
                created,
                forum: spec.target_forum.clone(),
                kind: if k == 0 { PostKind::Submission } else { PostKind::Comment },
                text: post_text(spec, &row, &mut rng),
            });
            doc_ids.push(id);
            weights.extend(row);
        }
        users.push(PlantedUser {
            author,
            class,
            states,
            clusters,
        });
    }
    posts.sort_by(|a, b| (a.created, &a.id).cmp(&(b.created, &b.id)));
    let matrix = DocTopicMatrix::new(doc_ids, (0..topic_cluster.len()).collect(), weights)?;
    let partition = ClusterPartition {
        assignment: topic_cluster.clone(),
        topic_ids: (0..topic_cluster.len()).collect(),
        modularity: 0.0,
        resolution: 1.0,
    };
    Ok(SynthCorpus {
        posts,
        matrix,
        partition,
        users,
        spec: spec.clone(),
    })
}
