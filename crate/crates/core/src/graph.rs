//! Topic graphs built from linkage networks, Louvain clustering and
//! cluster-level corpus shares.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linkage::LinkageNetwork;
use crate::rng::{child_seed, rng_from};
use crate::topics::DocTopicMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub topic: usize,
    pub size: f64,
}

/// Undirected weighted edge between node indices, `source < target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    threshold: f64,
}

impl TopicGraph {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>, threshold: f64) -> Result<Self> {
        let mut seen_topics = std::collections::HashSet::new();
        if !nodes.iter().all(|n| seen_topics.insert(n.topic)) {
            return Err(Error::invalid("duplicate topic node"));
        }
        let mut seen_pairs = std::collections::HashSet::new();
        for e in &edges {
            if e.source >= e.target || e.target >= nodes.len() {
                return Err(Error::invalid(format!(
                    "edge ({}, {}) is a self-loop, unordered or out of range",
                    e.source, e.target
                )));
            }
            if !(e.weight > threshold) || !e.weight.is_finite() {
                return Err(Error::invalid(format!(
                    "edge weight {} does not exceed threshold {threshold}",
                    e.weight
                )));
            }
            if !seen_pairs.insert((e.source, e.target)) {
                return Err(Error::invalid("duplicate edge"));
            }
        }
        Ok(TopicGraph {
            nodes,
            edges,
            threshold,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_of(&self, topic: usize) -> Option<usize> {
        self.nodes.iter().position(|n| n.topic == topic)
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    /// Weighted degree of every node.
    pub fn degrees(&self) -> Vec<f64> {
        let mut k = vec![0.0; self.nodes.len()];
        for e in &self.edges {
            k[e.source] += e.weight;
            k[e.target] += e.weight;
        }
        k
    }
}

/// One node per topic (size `p_i`) and an edge for every pair with
/// `R_ij > threshold`.
pub fn build_linkage_graph(network: &LinkageNetwork, threshold: f64) -> Result<TopicGraph> {
    let k = network.n_topics();
    let nodes = (0..k)
        .map(|i| Node {
            topic: network.topic_ids[i],
            size: network.marginal(i),
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let r = network.linkage(i, j);
            if r > threshold && r.is_finite() {
                edges.push(Edge {
                    source: i,
                    target: j,
                    weight: r,
                });
            }
        }
    }
    if edges.is_empty() {
        log::warn!("linkage graph has no edges above threshold {threshold}");
    }
    TopicGraph::new(nodes, edges, threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPartition {
    /// Cluster of each graph node, by node index.
    pub assignment: Vec<usize>,
    pub topic_ids: Vec<usize>,
    pub modularity: f64,
    pub resolution: f64,
}

impl ClusterPartition {
    pub fn n_clusters(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    pub fn cluster_of(&self, topic: usize) -> Option<usize> {
        self.topic_ids
            .iter()
            .position(|&t| t == topic)
            .map(|i| self.assignment[i])
    }

    /// Topic ids in each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (&t, &c) in self.topic_ids.iter().zip(&self.assignment) {
            out[c].push(t);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "topic,cluster")?;
        for (t, c) in self.topic_ids.iter().zip(&self.assignment) {
            writeln!(out, "t{t},{c}")?;
        }
        Ok(())
    }
}

/// Renumbers cluster labels by order of first appearance.
pub fn relabel(assignment: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    assignment
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// `Q = sum_c [ in_c / m - resolution * (tot_c / 2m)^2 ]`, where `in_c` is
/// the weight inside cluster `c` and `tot_c` its summed degree. Zero for an
/// edgeless graph.
pub fn modularity(graph: &TopicGraph, assignment: &[usize], resolution: f64) -> f64 {
    let m = graph.total_weight();
    if m == 0.0 {
        return 0.0;
    }
    let n_clusters = assignment.iter().max().map_or(0, |c| c + 1);
    let mut inside = vec![0.0; n_clusters];
    let mut tot = vec![0.0; n_clusters];
    for e in &graph.edges {
        if assignment[e.source] == assignment[e.target] {
            inside[assignment[e.source]] += e.weight;
        }
        tot[assignment[e.source]] += e.weight;
        tot[assignment[e.target]] += e.weight;
    }
    inside
        .iter()
        .zip(&tot)
        .map(|(i, t)| i / m - resolution * (t / (2.0 * m)).powi(2))
        .sum()
}

/// Working graph for one Louvain level; `self_loops[i]` is the weight
/// folded inside aggregated node `i`.
struct Level {
    adjacency: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
}

impl Level {
    fn degree(&self, i: usize) -> f64 {
        self.adjacency[i].iter().map(|(_, w)| w).sum::<f64>() + 2.0 * self.self_loops[i]
    }

    /// Greedy moves until a full pass changes nothing. Returns the community
    /// of each node and whether any node moved.
    fn local_moves(&self, order: &[usize], m: f64, resolution: f64) -> (Vec<usize>, bool) {
        let n = self.adjacency.len();
        let degree: Vec<f64> = (0..n).map(|i| self.degree(i)).collect();
        let mut community: Vec<usize> = (0..n).collect();
        let mut tot = degree.clone();
        let mut weight_to = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut moved_any = false;
        loop {
            let mut moved = false;
            for &i in order {
                let own = community[i];
                tot[own] -= degree[i];
                for &(j, w) in &self.adjacency[i] {
                    let c = community[j];
                    if weight_to[c] == 0.0 {
                        touched.push(c);
                    }
                    weight_to[c] += w;
                }
                let gain = |c: usize, w_in: f64| w_in - resolution * tot[c] * degree[i] / (2.0 * m);
                let mut best = own;
                let mut best_gain = gain(own, weight_to[own]);
                for &c in &touched {
                    let g = gain(c, weight_to[c]);
                    if g > best_gain + 1e-12 {
                        best = c;
                        best_gain = g;
                    }
                }
                for &c in &touched {
                    weight_to[c] = 0.0;
                }
                touched.clear();
                tot[best] += degree[i];
                if best != own {
                    community[i] = best;
                    moved = true;
                    moved_any = true;
                }
            }
            if !moved {
                break;
            }
        }
        (relabel(&community), moved_any)
    }

    fn aggregate(&self, community: &[usize]) -> Level {
        let n_comm = community.iter().max().map_or(0, |c| c + 1);
        let mut self_loops = vec![0.0; n_comm];
        let mut weights: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_comm];
        for (i, neigh) in self.adjacency.iter().enumerate() {
            let ci = community[i];
            self_loops[ci] += self.self_loops[i];
            for &(j, w) in neigh {
                let cj = community[j];
                if ci == cj {
                    // each internal edge is visited from both ends
                    self_loops[ci] += w / 2.0;
                } else {
                    *weights[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        Level {
            adjacency: weights.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_loops,
        }
    }
}

/// Two-phase Louvain: greedy node moves then aggregation, repeated until no
/// node moves. Visit order is shuffled by `seed` at every level.
pub fn louvain_partition(graph: &TopicGraph, resolution: f64, seed: u64) -> Result<ClusterPartition> {
    if !(resolution > 0.0) {
        return Err(Error::invalid("resolution must be positive"));
    }
    let n = graph.n_nodes();
    let topic_ids: Vec<usize> = graph.nodes.iter().map(|n| n.topic).collect();
    let m = graph.total_weight();
    if m == 0.0 {
        return Ok(ClusterPartition {
            assignment: (0..n).collect(),
            topic_ids,
            modularity: 0.0,
            resolution,
        });
    }
    let mut adjacency = vec![Vec::new(); n];
    for e in &graph.edges {
        adjacency[e.source].push((e.target, e.weight));
        adjacency[e.target].push((e.source, e.weight));
    }
    let mut level = Level {
        adjacency,
        self_loops: vec![0.0; n],
    };
    let mut assignment: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(seed);
    loop {
        let mut order: Vec<usize> = (0..level.adjacency.len()).collect();
        order.shuffle(&mut rng);
        let (community, moved) = level.local_moves(&order, m, resolution);
        if !moved {
            break;
        }
        for a in &mut assignment {
            *a = community[*a];
        }
        level = level.aggregate(&community);
    }
    let assignment = relabel(&assignment);
    let modularity = modularity(graph, &assignment, resolution);
    Ok(ClusterPartition {
        assignment,
        topic_ids,
        modularity,
        resolution,
    })
}

/// Runs `restarts` seeded Louvain passes concurrently and keeps the highest
/// modularity; ties keep the earliest restart.
pub fn louvain_best(
    graph: &TopicGraph,
    resolution: f64,
    seed: u64,
    restarts: usize,
) -> Result<ClusterPartition> {
    let results: Vec<Result<ClusterPartition>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..restarts.max(1))
            .map(|r| scope.spawn(move || louvain_partition(graph, resolution, child_seed(seed, r as u64))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("louvain restart panicked"))
            .collect()
    });
    let mut best: Option<ClusterPartition> = None;
    for result in results {
        let p = result?;
        if best.as_ref().is_none_or(|b| p.modularity > b.modularity) {
            best = Some(p);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fraction of documents whose dominant topic falls in each cluster.
/// Clusters with no dominated documents are omitted.
pub fn cluster_shares(
    matrix: &DocTopicMatrix,
    partition: &ClusterPartition,
) -> Result<BTreeMap<usize, f64>> {
    let cluster_by_column: Vec<usize> = matrix
        .topic_ids()
        .iter()
        .map(|&t| {
            partition
                .cluster_of(t)
                .ok_or_else(|| Error::invalid(format!("topic {t} has no cluster")))
        })
        .collect::<Result<_>>()?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for d in 0..matrix.n_docs() {
        *counts.entry(cluster_by_column[matrix.dominant_column(d)]).or_insert(0) += 1;
    }
    let n = matrix.n_docs() as f64;
    Ok(counts.into_iter().map(|(c, k)| (c, k as f64 / n)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    GraphMl,
    Dot,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "graphml" => Ok(ExportFormat::GraphMl),
            "dot" => Ok(ExportFormat::Dot),
            "json" => Ok(ExportFormat::Json),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::GraphMl => "graphml",
            ExportFormat::Dot => "dot",
            ExportFormat::Json => "json",
        })
    }
}

impl ExportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ExportFormat::GraphMl => "graphml",
            ExportFormat::Dot => "dot",
            ExportFormat::Json => "json",
        }
    }
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
];

#[derive(Serialize, Deserialize)]
struct JsonNode {
    id: usize,
    size: f64,
    cluster: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonEdge {
    source: usize,
    target: usize,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonGraph {
    nodes: Vec<JsonNode>,
    edges: Vec<JsonEdge>,
}

pub fn export_graph<W: Write>(
    graph: &TopicGraph,
    partition: &ClusterPartition,
    format: ExportFormat,
    mut out: W,
) -> Result<()> {
    if partition.assignment.len() != graph.n_nodes()
        || graph.nodes.iter().zip(&partition.topic_ids).any(|(n, &t)| n.topic != t)
    {
        return Err(Error::invalid("partition does not cover the graph nodes"));
    }
    let cluster = |i: usize| partition.assignment[i];
    let topic = |i: usize| graph.nodes[i].topic;
    match format {
        ExportFormat::GraphMl => {
            writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
            writeln!(out, r#"<graphml xmlns="http://graphml.graphdrawing.org/xmlns">"#)?;
            writeln!(out, r#"  <key id="size" for="node" attr.name="size" attr.type="double"/>"#)?;
            writeln!(out, r#"  <key id="cluster" for="node" attr.name="cluster" attr.type="int"/>"#)?;
            writeln!(out, r#"  <key id="weight" for="edge" attr.name="weight" attr.type="double"/>"#)?;
            writeln!(out, r#"  <graph id="topics" edgedefault="undirected">"#)?;
            for (i, n) in graph.nodes.iter().enumerate() {
                writeln!(
                    out,
                    r#"    <node id="t{}"><data key="size">{:?}</data><data key="cluster">{}</data></node>"#,
                    n.topic,
                    n.size,
                    cluster(i)
                )?;
            }
            for e in &graph.edges {
                writeln!(
                    out,
                    r#"    <edge source="t{}" target="t{}"><data key="weight">{:?}</data></edge>"#,
                    topic(e.source),
                    topic(e.target),
                    e.weight
                )?;
            }
            writeln!(out, "  </graph>")?;
            writeln!(out, "</graphml>")?;
        }
        ExportFormat::Dot => {
            writeln!(out, "graph topics {{")?;
            writeln!(out, "  node [style=filled];")?;
            for (i, n) in graph.nodes.iter().enumerate() {
                writeln!(
                    out,
                    "  t{} [size={:?}, cluster={}, fillcolor=\"{}\"];",
                    n.topic,
                    n.size,
                    cluster(i),
                    PALETTE[cluster(i) % PALETTE.len()]
                )?;
            }
            for e in &graph.edges {
                writeln!(out, "  t{} -- t{} [weight={:?}];", topic(e.source), topic(e.target), e.weight)?;
            }
            writeln!(out, "}}")?;
        }
        ExportFormat::Json => {
            let doc = JsonGraph {
                nodes: graph
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| JsonNode {
                        id: n.topic,
                        size: n.size,
                        cluster: cluster(i),
                    })
                    .collect(),
                edges: graph
                    .edges
                    .iter()
                    .map(|e| JsonEdge {
                        source: topic(e.source),
                        target: topic(e.target),
                        weight: e.weight,
                    })
                    .collect(),
            };
            serde_json::to_writer_pretty(&mut out, &doc)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Reads a JSON export back. The threshold is not stored, so the returned
/// graph carries the supplied one; modularity is recomputed at `resolution`.
pub fn import_graph_json<R: Read>(
    input: R,
    threshold: f64,
    resolution: f64,
) -> Result<(TopicGraph, ClusterPartition)> {
    let doc: JsonGraph = serde_json::from_reader(input)?;
    let nodes: Vec<Node> = doc
        .nodes
        .iter()
        .map(|n| Node {
            topic: n.id,
            size: n.size,
        })
        .collect();
    let index: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, n)| (n.topic, i)).collect();
    let lookup = |t: usize| {
        index
            .get(&t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("edge refers to unknown topic {t}")))
    };
    let edges = doc
        .edges
        .iter()
        .map(|e| {
            let (a, b) = (lookup(e.source)?, lookup(e.target)?);
            Ok(Edge {
                source: a.min(b),
                target: a.max(b),
                weight: e.weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let graph = TopicGraph::new(nodes, edges, threshold)?;
    let assignment: Vec<usize> = doc.nodes.iter().map(|n| n.cluster).collect();
    let partition = ClusterPartition {
        modularity: modularity(&graph, &assignment, resolution),
        topic_ids: graph.nodes.iter().map(|n| n.topic).collect(),
        assignment,
        resolution,
    };
    Ok((graph, partition))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph_from(n: usize, edges: &[(usize, usize, f64)]) -> TopicGraph {
        let nodes = (0..n).map(|t| Node { topic: t, size: 1.0 / n as f64 }).collect();
        let edges = edges
            .iter()
            .map(|&(a, b, w)| Edge {
                source: a.min(b),
                target: a.max(b),
                weight: w,
            })
            .collect();
        TopicGraph::new(nodes, edges, 0.0).unwrap()
    }

    /// Newman's double-sum form, independent of the per-cluster form.
    fn modularity_oracle(g: &TopicGraph, assignment: &[usize], gamma: f64) -> f64 {
        let n = g.n_nodes();
        let mut a = vec![vec![0.0; n]; n];
        for e in g.edges() {
            a[e.source][e.target] = e.weight;
            a[e.target][e.source] = e.weight;
        }
        let k: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let two_m: f64 = k.iter().sum();
        if two_m == 0.0 {
            return 0.0;
        }
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                if assignment[i] == assignment[j] {
                    q += a[i][j] - gamma * k[i] * k[j] / two_m;
                }
            }
        }
        q / two_m
    }

    pub(crate) fn planted_blocks(blocks: usize, size: usize, within: f64, between: f64) -> TopicGraph {
        let n = blocks * size;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = if i / size == j / size { within } else { between };
                edges.push((i, j, w));
            }
        }
        graph_from(n, &edges)
    }

    fn network_from(topic_ids: Vec<usize>, marg: Vec<f64>, joint: Vec<f64>) -> LinkageNetwork {
        LinkageNetwork::from_parts(crate::linkage::Level::Text, 10, topic_ids, marg, joint)
    }

    #[test]
    fn independence_network_has_no_edges() {
        let marg = vec![0.5, 0.3, 0.2];
        let joint: Vec<f64> = (0..9).map(|x| marg[x / 3] * marg[x % 3]).collect();
        let g = build_linkage_graph(&network_from(vec![0, 1, 2], marg, joint), 0.0).unwrap();
        assert!(g.edges().is_empty());
        assert_eq!(g.n_nodes(), 3);
    }

    #[test]
    fn threshold_filter() {
        let marg = vec![0.4, 0.3, 0.3];
        let mut joint = vec![0.0; 9];
        joint[1] = 0.12 * 2f64.powf(0.5);
        joint[2] = 0.12 * 2f64.powf(-0.2);
        joint[3] = joint[1];
        joint[6] = joint[2];
        let g = build_linkage_graph(&network_from(vec![1, 2, 3], marg, joint), 0.0).unwrap();
        assert_eq!(g.edges().len(), 1);
        let e = g.edges()[0];
        assert_eq!((g.nodes()[e.source].topic, g.nodes()[e.target].topic), (1, 2));
        assert!((e.weight - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_cliques() {
        let mut edges = Vec::new();
        for base in [0, 5] {
            for i in 0..5 {
                for j in i + 1..5 {
                    edges.push((base + i, base + j, 1.0));
                }
            }
        }
        edges.push((4, 5, 0.1));
        let g = graph_from(10, &edges);
        let p = louvain_partition(&g, 1.0, 3).unwrap();
        assert_eq!(p.assignment, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert!((p.modularity - modularity_oracle(&g, &p.assignment, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn triangle_is_one_cluster() {
        let g = graph_from(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]);
        for seed in 0..10 {
            assert_eq!(louvain_partition(&g, 1.0, seed).unwrap().assignment, vec![0, 0, 0]);
        }
    }

    #[test]
    fn edgeless_is_singletons() {
        let g = graph_from(4, &[]);
        let p = louvain_partition(&g, 1.0, 0).unwrap();
        assert_eq!(p.assignment, vec![0, 1, 2, 3]);
        assert_eq!(p.modularity, 0.0);
    }

    #[test]
    fn planted_five_blocks() {
        let g = planted_blocks(5, 6, 1.0, 0.05);
        let truth: Vec<usize> = (0..30).map(|i| i / 6).collect();
        let hits = (0..100)
            .filter(|&s| louvain_partition(&g, 1.0, s).unwrap().assignment == truth)
            .count();
        assert!(hits >= 95, "{hits} of 100 seeds recovered the blocks");
    }

    #[test]
    fn restarts_keep_best() {
        let g = planted_blocks(3, 4, 1.0, 0.2);
        let best = louvain_best(&g, 1.0, 7, 10).unwrap();
        for r in 0..10 {
            let p = louvain_partition(&g, 1.0, child_seed(7, r)).unwrap();
            assert!(p.modularity <= best.modularity);
        }
    }

    #[test]
    fn shares() {
        let m = DocTopicMatrix::new(
            (0..5).map(|i| format!("d{i}")).collect(),
            vec![0, 1, 2],
            vec![
                0.6, 0.2, 0.2, //
                0.1, 0.8, 0.1, //
                0.2, 0.2, 0.6, //
                0.4, 0.4, 0.2, // tie goes to topic 0
                0.1, 0.1, 0.8,
            ],
        )
        .unwrap();
        let p = ClusterPartition {
            assignment: vec![0, 1, 1],
            topic_ids: vec![0, 1, 2],
            modularity: 0.0,
            resolution: 1.0,
        };
        let s = cluster_shares(&m, &p).unwrap();
        assert_eq!(s, BTreeMap::from([(0, 0.4), (1, 0.6)]));
        let all_zero = ClusterPartition {
            assignment: vec![0, 0, 0],
            ..p.clone()
        };
        assert_eq!(cluster_shares(&m, &all_zero).unwrap(), BTreeMap::from([(0, 1.0)]));
        let partial = ClusterPartition {
            assignment: vec![0, 1],
            topic_ids: vec![0, 1],
            ..p
        };
        assert!(cluster_shares(&m, &partial).is_err());
    }

    #[test]
    fn graphml_two_nodes() {
        let g = graph_from(2, &[(0, 1, 0.7)]);
        let p = louvain_partition(&g, 1.0, 0).unwrap();
        let mut buf = Vec::new();
        export_graph(&g, &p, ExportFormat::GraphMl, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.matches("<node ").count(), 2);
        assert_eq!(text.matches("<edge ").count(), 1);
    }

    #[test]
    fn json_round_trip() {
        let g = planted_blocks(2, 3, 0.9, 0.1);
        let p = louvain_partition(&g, 1.0, 1).unwrap();
        let mut buf = Vec::new();
        export_graph(&g, &p, ExportFormat::Json, &mut buf).unwrap();
        let (g2, p2) = import_graph_json(&buf[..], 0.0, 1.0).unwrap();
        assert_eq!(g2, g);
        assert_eq!(p2, p);
    }

    #[test]
    fn dot_colors_clusters() {
        let g = planted_blocks(5, 6, 1.0, 0.05);
        let p = louvain_best(&g, 1.0, 0, 10).unwrap();
        let mut buf = Vec::new();
        export_graph(&g, &p, ExportFormat::Dot, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let clusters: std::collections::BTreeSet<&str> = text
            .lines()
            .filter_map(|l| l.split("cluster=").nth(1))
            .map(|rest| rest.split(',').next().unwrap())
            .collect();
        let colors: std::collections::BTreeSet<&str> = text
            .lines()
            .filter_map(|l| l.split("fillcolor=\"").nth(1))
            .collect();
        assert_eq!(clusters.len(), 5);
        assert_eq!(colors.len(), 5);
    }

    #[test]
    fn unknown_format() {
        assert!(matches!("svg".parse::<ExportFormat>(), Err(Error::UnknownFormat(_))));
    }

    fn arb_graph() -> impl Strategy<Value = TopicGraph> {
        (3usize..12).prop_flat_map(|n| {
            proptest::collection::vec(proptest::option::of(0.01f64..2.0), n * (n - 1) / 2).prop_map(
                move |ws| {
                    let mut edges = Vec::new();
                    let mut idx = 0;
                    for i in 0..n {
                        for j in i + 1..n {
                            if let Some(w) = ws[idx] {
                                edges.push((i, j, w));
                            }
                            idx += 1;
                        }
                    }
                    graph_from(n, &edges)
                },
            )
        })
    }

    proptest! {
        #[test]
        fn reported_modularity_is_exact(g in arb_graph(), seed in 0u64..1000, gamma in 0.5f64..2.0) {
            let p = louvain_partition(&g, gamma, seed).unwrap();
            prop_assert!((p.modularity - modularity_oracle(&g, &p.assignment, gamma)).abs() < 1e-9);
            let singletons: Vec<usize> = (0..g.n_nodes()).collect();
            prop_assert!(p.modularity >= modularity_oracle(&g, &singletons, gamma) - 1e-12);
            prop_assert_eq!(relabel(&p.assignment), p.assignment.clone());
        }

        #[test]
        fn edges_match_brute_force(seed in 0u64..500, threshold in -0.5f64..0.5) {
            use rand::Rng as _;
            let mut rng = rng_from(seed);
            let k = 10;
            let w: Vec<Vec<f64>> = (0..30)
                .map(|_| {
                    let mut r: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3)).collect();
                    let s: f64 = r.iter().sum();
                    r.iter_mut().for_each(|x| *x /= s);
                    r
                })
                .collect();
            let m = DocTopicMatrix::new(
                (0..30).map(|i| format!("d{i}")).collect(),
                (0..k).collect(),
                w.concat(),
            ).unwrap();
            let net = crate::linkage::text_linkage(&m).unwrap();
            let g = build_linkage_graph(&net, threshold).unwrap();
            let mut brute = Vec::new();
            for i in 0..k {
                for j in i + 1..k {
                    let r = net.linkage(i, j);
                    if r > threshold {
                        brute.push((i, j));
                    }
                }
            }
            let got: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.source, e.target)).collect();
            prop_assert_eq!(got, brute);

            // relabeling topics leaves the edge set unchanged
            let perm: Vec<usize> = (0..k).rev().collect();
            let pm = DocTopicMatrix::new(
                m.doc_ids().to_vec(),
                perm.clone(),
                w.iter().flat_map(|r| perm.iter().map(|&t| r[t]).collect::<Vec<_>>()).collect(),
            ).unwrap();
            let pg = build_linkage_graph(&crate::linkage::text_linkage(&pm).unwrap(), threshold).unwrap();
            let pairs = |g: &TopicGraph| {
                let mut v: Vec<(usize, usize)> = g.edges().iter().map(|e| {
                    let (a, b) = (g.nodes()[e.source].topic, g.nodes()[e.target].topic);
                    (a.min(b), a.max(b))
                }).collect();
                v.sort_unstable();
                v
            };
            prop_assert_eq!(pairs(&g), pairs(&pg));
        }

        #[test]
        fn shares_sum_to_one(seed in 0u64..500) {
            use rand::Rng as _;
            let mut rng = rng_from(seed);
            let rows: Vec<f64> = (0..20).flat_map(|_| {
                let mut r: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= s);
                r
            }).collect();
            let m = DocTopicMatrix::new((0..20).map(|i| format!("d{i}")).collect(), (0..6).collect(), rows).unwrap();
            let p = ClusterPartition {
                assignment: (0..6).map(|_| rng.random_range(0..3)).collect(),
                topic_ids: (0..6).collect(),
                modularity: 0.0,
                resolution: 1.0,
            };
            let total: f64 = cluster_shares(&m, &p).unwrap().values().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
