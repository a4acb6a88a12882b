//! Graph tables, range partitioning and triplet block construction.
//!
//! A run starts from a global vertex table and edge table. Both are split into
//! node-local tables: each node owns a contiguous range of vertex ids and every
//! edge whose source it owns. A vertex-edge mapping table (`ve_map`) indexes the
//! local edge table by source so that the out-edges of a frontier can be joined
//! with vertex attributes into edge triplets without scanning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::algo::AttributeValue;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexId(pub u64);

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u64> for VertexId {
    fn from(id: u64) -> Self {
        VertexId(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: VertexId,
    pub dst: VertexId,
    pub weight: f64,
}

impl Edge {
    pub fn new(src: u64, dst: u64, weight: f64) -> Self {
        Edge {
            src: VertexId(src),
            dst: VertexId(dst),
            weight,
        }
    }
}

/// A row of a node-local vertex table.
#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub id: VertexId,
    pub attr: AttributeValue,
    /// Participates in the next iteration.
    pub active: bool,
    /// Changed since it was last uploaded to the upper system.
    pub updated: bool,
}

/// An edge joined with snapshots of both endpoint attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeTriplet {
    pub edge: Edge,
    pub src_attr: AttributeValue,
    pub dst_attr: AttributeValue,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletBlock {
    pub triplets: Vec<EdgeTriplet>,
}

impl TripletBlock {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Global vertex table (sorted, distinct ids) and edge table (file order).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Graph {
    vertices: Vec<VertexId>,
    edges: Vec<Edge>,
}

impl Graph {
    /// Builds a graph, checking that every edge endpoint is a known vertex.
    pub fn new(vertices: BTreeSet<VertexId>, edges: Vec<Edge>) -> Result<Self> {
        for e in &edges {
            for id in [e.src, e.dst] {
                if !vertices.contains(&id) {
                    return Err(Error::UnknownVertex(id));
                }
            }
        }
        Ok(Graph {
            vertices: vertices.into_iter().collect(),
            edges,
        })
    }

    /// Builds a graph whose vertex set is exactly the edge endpoints.
    pub fn from_edges(edges: Vec<Edge>) -> Self {
        let vertices: BTreeSet<VertexId> = edges.iter().flat_map(|e| [e.src, e.dst]).collect();
        Graph {
            vertices: vertices.into_iter().collect(),
            edges,
        }
    }

    pub fn vertices(&self) -> &[VertexId] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn out_degrees(&self) -> HashMap<VertexId, u64> {
        let mut deg: HashMap<VertexId, u64> = self.vertices.iter().map(|&v| (v, 0)).collect();
        for e in &self.edges {
            *deg.entry(e.src).or_default() += 1;
        }
        deg
    }
}

/// Reads an edge-list file. See [`parse_edge_list`] for the format.
pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Graph> {
    let text = std::fs::read_to_string(path)?;
    parse_edge_list(&text)
}

/// Parses `src dst [weight]` lines. Lines whose first non-blank character is
/// `#` are comments, blank lines are ignored, and both LF and CRLF endings are
/// accepted. Duplicate edges are kept in file order.
pub fn parse_edge_list(text: &str) -> Result<Graph> {
    let mut edges = Vec::new();
    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("expected `src dst [weight]`, found {} fields", fields.len()),
            });
        }
        let parse_id = |s: &str| {
            s.parse::<u64>().map(VertexId).map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("invalid vertex id `{s}`"),
            })
        };
        let src = parse_id(fields[0])?;
        let dst = parse_id(fields[1])?;
        let weight = match fields.get(2) {
            None => 1.0,
            Some(s) => {
                let w: f64 = s.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    reason: format!("invalid weight `{s}`"),
                })?;
                if !w.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        reason: format!("weight `{s}` is not finite"),
                    });
                }
                if w < 0.0 {
                    return Err(Error::Parse {
                        line: line_no,
                        reason: format!("negative weight {w}"),
                    });
                }
                w
            }
        };
        edges.push(Edge { src, dst, weight });
    }
    Ok(Graph::from_edges(edges))
}

/// Writes `graph` in the edge-list format. Unit weights are omitted.
pub fn write_edge_list(graph: &Graph, mut out: impl Write) -> Result<()> {
    for e in graph.edges() {
        if e.weight == 1.0 {
            writeln!(out, "{} {}", e.src, e.dst)?;
        } else {
            writeln!(out, "{} {} {}", e.src, e.dst, e.weight)?;
        }
    }
    Ok(())
}

/// Maps every vertex to the node that owns it. Shared read-only by all nodes.
#[derive(Clone, Debug, Default)]
pub struct OwnerMap(Arc<HashMap<VertexId, usize>>);

impl OwnerMap {
    pub fn owner(&self, id: VertexId) -> Option<usize> {
        self.0.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Node-local vertex table, edge table and vertex-edge mapping table.
///
/// Every owned vertex has a `ve_map` entry (possibly empty); `edges` holds
/// exactly the edges whose source is owned. `mirror` holds attribute snapshots
/// of remote vertices that local triplets reference.
#[derive(Clone, Debug, Default)]
pub struct Partition {
    pub node_id: usize,
    pub vertices: BTreeMap<VertexId, Vertex>,
    pub edges: Vec<Edge>,
    pub ve_map: BTreeMap<VertexId, Vec<usize>>,
    pub mirror: BTreeMap<VertexId, AttributeValue>,
}

impl Partition {
    pub fn owns(&self, id: VertexId) -> bool {
        self.vertices.contains_key(&id)
    }

    pub fn out_edges(&self, id: VertexId) -> impl Iterator<Item = &Edge> + '_ {
        self.ve_map
            .get(&id)
            .into_iter()
            .flat_map(move |idx| idx.iter().map(move |&i| &self.edges[i]))
    }

    /// Attribute of an owned or mirrored vertex.
    pub fn attr(&self, id: VertexId) -> Option<&AttributeValue> {
        self.vertices
            .get(&id)
            .map(|v| &v.attr)
            .or_else(|| self.mirror.get(&id))
    }

    /// Number of triplets the given frontier materializes.
    pub fn triplet_count(&self, active: &BTreeSet<VertexId>) -> usize {
        active
            .iter()
            .filter_map(|v| self.ve_map.get(v))
            .map(Vec::len)
            .sum()
    }

    /// Owned ids whose attribute changed since the last upload.
    pub fn updated_ids(&self) -> BTreeSet<VertexId> {
        self.vertices
            .values()
            .filter(|v| v.updated)
            .map(|v| v.id)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct PartitionedGraph {
    pub partitions: Vec<Partition>,
    pub vertex_owner: OwnerMap,
}

/// Splits the graph into `sizes.len()` partitions. Vertices are assigned in
/// ascending id order: the first `sizes[0]` ids to node 0, the next `sizes[1]`
/// to node 1 and so on. Each edge goes to the partition owning its source.
pub fn partition_graph(
    graph: &Graph,
    sizes: &[usize],
    initial: impl Fn(VertexId) -> AttributeValue,
) -> Result<PartitionedGraph> {
    if sizes.is_empty() {
        return Err(Error::Partition("at least one partition is required".into()));
    }
    let total: usize = sizes.iter().sum();
    if total != graph.vertex_count() {
        return Err(Error::Partition(format!(
            "partition sizes sum to {total}, graph has {} vertices",
            graph.vertex_count()
        )));
    }

    let mut owner = HashMap::with_capacity(graph.vertex_count());
    let mut partitions: Vec<Partition> = (0..sizes.len())
        .map(|node_id| Partition {
            node_id,
            vertices: BTreeMap::new(),
            edges: Vec::new(),
            ve_map: BTreeMap::new(),
            mirror: BTreeMap::new(),
        })
        .collect();

    let mut ids = graph.vertices().iter();
    for (node, &size) in sizes.iter().enumerate() {
        for &id in ids.by_ref().take(size) {
            owner.insert(id, node);
            let part = &mut partitions[node];
            part.vertices.insert(
                id,
                Vertex {
                    id,
                    attr: initial(id),
                    active: false,
                    updated: false,
                },
            );
            part.ve_map.insert(id, Vec::new());
        }
    }

    for e in graph.edges() {
        let node = *owner.get(&e.src).ok_or(Error::UnknownVertex(e.src))?;
        if !owner.contains_key(&e.dst) {
            return Err(Error::UnknownVertex(e.dst));
        }
        let part = &mut partitions[node];
        part.ve_map.entry(e.src).or_default().push(part.edges.len());
        part.edges.push(*e);
    }

    Ok(PartitionedGraph {
        partitions,
        vertex_owner: OwnerMap(Arc::new(owner)),
    })
}

/// Materializes the out-edges of the owned vertices in `active` as triplets,
/// ordered by ascending source id and then local edge index, and groups them
/// into blocks of `block_size` (the last block may be shorter).
///
/// Destination attributes come from the local table or, for remote
/// destinations, from the mirror; a remote destination missing from the mirror
/// is an error because it means the pull step did not resolve it.
pub fn build_blocks(
    partition: &Partition,
    active: &BTreeSet<VertexId>,
    block_size: usize,
) -> Result<Vec<TripletBlock>> {
    if block_size == 0 {
        return Err(Error::Config("block size must be at least 1".into()));
    }
    let mut triplets = Vec::with_capacity(partition.triplet_count(active));
    for &src in active {
        let Some(src_vertex) = partition.vertices.get(&src) else {
            continue;
        };
        for edge in partition.out_edges(src) {
            let dst_attr = partition
                .attr(edge.dst)
                .ok_or(Error::Unresolved(edge.dst))?;
            triplets.push(EdgeTriplet {
                edge: *edge,
                src_attr: src_vertex.attr.clone(),
                dst_attr: dst_attr.clone(),
            });
        }
    }

    let mut blocks = Vec::with_capacity(triplets.len().div_ceil(block_size));
    let mut rest = triplets.into_iter().peekable();
    while rest.peek().is_some() {
        blocks.push(TripletBlock {
            triplets: rest.by_ref().take(block_size).collect(),
        });
    }
    Ok(blocks)
}

/// Overwrites attributes of owned or mirrored vertices. Owned vertices whose
/// value actually changed get their `updated` flag set. Returns the number of
/// changed vertices. The batch is validated before anything is written.
pub fn apply_updates(
    partition: &mut Partition,
    updates: &[(VertexId, AttributeValue)],
) -> Result<usize> {
    for (id, _) in updates {
        if !partition.vertices.contains_key(id) && !partition.mirror.contains_key(id) {
            return Err(Error::UnknownVertex(*id));
        }
    }
    let mut changed = 0;
    for (id, attr) in updates {
        if let Some(v) = partition.vertices.get_mut(id) {
            if !v.attr.same_as(attr) {
                v.attr = attr.clone();
                v.updated = true;
                changed += 1;
            }
        } else if let Some(m) = partition.mirror.get_mut(id) {
            if !m.same_as(attr) {
                *m = attr.clone();
                changed += 1;
            }
        }
    }
    Ok(changed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(_: VertexId) -> AttributeValue {
        AttributeValue::Label(0)
    }

    fn ids(v: &[u64]) -> BTreeSet<VertexId> {
        v.iter().copied().map(VertexId).collect()
    }

    #[test]
    fn parses_plain_and_weighted_lines() {
        let g = parse_edge_list("0 1\n1 2\n").unwrap();
        assert_eq!(g.vertices(), &[VertexId(0), VertexId(1), VertexId(2)]);
        assert_eq!(g.edges(), &[Edge::new(0, 1, 1.0), Edge::new(1, 2, 1.0)]);

        let g = parse_edge_list("# c\n3 4 2.5\n").unwrap();
        assert_eq!(g.vertices(), &[VertexId(3), VertexId(4)]);
        assert_eq!(g.edges(), &[Edge::new(3, 4, 2.5)]);
    }

    #[test]
    fn accepts_crlf_and_keeps_duplicates() {
        let g = parse_edge_list("1 2\r\n1 2\r\n\r\n").unwrap();
        assert_eq!(g.edges().len(), 2);
    }

    #[test]
    fn reports_line_of_malformed_input() {
        match parse_edge_list("a b\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_edge_list("0 1\n# x\n1 2 -3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_edge_list("0 1 2 3\n").is_err());
        assert!(parse_edge_list("0 1 nan\n").is_err());
    }

    #[test]
    fn write_then_parse_preserves_edges() {
        let g = Graph::from_edges(vec![Edge::new(5, 1, 1.0), Edge::new(1, 9, 0.25)]);
        let mut buf = Vec::new();
        write_edge_list(&g, &mut buf).unwrap();
        let back = parse_edge_list(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn single_partition_holds_everything() {
        let g = Graph::from_edges(vec![Edge::new(0, 1, 1.0), Edge::new(2, 3, 1.0)]);
        let pg = partition_graph(&g, &[4], label).unwrap();
        assert_eq!(pg.partitions.len(), 1);
        assert_eq!(pg.partitions[0].vertices.len(), 4);
        assert_eq!(pg.partitions[0].edges.len(), 2);
    }

    #[test]
    fn contiguous_ranges_and_source_ownership() {
        let g = Graph::from_edges(vec![Edge::new(0, 1, 1.0), Edge::new(2, 3, 1.0)]);
        let pg = partition_graph(&g, &[2, 2], label).unwrap();
        let p0 = &pg.partitions[0];
        let p1 = &pg.partitions[1];
        assert_eq!(p0.vertices.keys().copied().collect::<BTreeSet<_>>(), ids(&[0, 1]));
        assert_eq!(p1.vertices.keys().copied().collect::<BTreeSet<_>>(), ids(&[2, 3]));
        assert_eq!(p0.edges, vec![Edge::new(0, 1, 1.0)]);
        assert_eq!(p1.edges, vec![Edge::new(2, 3, 1.0)]);
    }

    #[test]
    fn cross_edge_lives_with_its_source() {
        let vertices = ids(&[0, 1, 2, 3, 4, 5]);
        let g = Graph::new(vertices.clone(), vec![Edge::new(0, 5, 1.0)]).unwrap();
        let pg = partition_graph(&g, &[3, 3], label).unwrap();
        // Exhaustive check of the placement rule.
        for &v in &vertices {
            let expected = if v.0 < 3 { 0 } else { 1 };
            assert_eq!(pg.vertex_owner.owner(v), Some(expected));
        }
        assert_eq!(pg.vertex_owner.owner(VertexId(5)), Some(1));
        assert_eq!(pg.partitions[0].edges, vec![Edge::new(0, 5, 1.0)]);
        assert!(pg.partitions[1].edges.is_empty());
        assert!(!pg.partitions[0].owns(VertexId(5)));
    }

    #[test]
    fn rejects_bad_sizes() {
        let g = Graph::from_edges(vec![Edge::new(0, 1, 1.0)]);
        assert!(partition_graph(&g, &[1], label).is_err());
        assert!(partition_graph(&g, &[], label).is_err());
        assert!(partition_graph(&g, &[2, 1], label).is_err());
    }

    #[test]
    fn empty_frontier_builds_no_blocks() {
        let g = Graph::from_edges(vec![Edge::new(0, 1, 1.0)]);
        let pg = partition_graph(&g, &[2], label).unwrap();
        let blocks = build_blocks(&pg.partitions[0], &BTreeSet::new(), 4).unwrap();
        assert!(blocks.is_empty());
    }

    #[test]
    fn final_block_absorbs_remainder() {
        let edges = (1..=5).map(|d| Edge::new(0, d, 1.0)).collect();
        let g = Graph::from_edges(edges);
        let pg = partition_graph(&g, &[6], label).unwrap();
        let blocks = build_blocks(&pg.partitions[0], &ids(&[0]), 2).unwrap();
        let sizes: Vec<usize> = blocks.iter().map(TripletBlock::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn star_center_block_shares_source_snapshot() {
        let edges = (1..=4).map(|d| Edge::new(0, d, 1.0)).collect();
        let g = Graph::from_edges(edges);
        let pg = partition_graph(&g, &[5], |v| AttributeValue::Label(v.0 * 10)).unwrap();
        let blocks = build_blocks(&pg.partitions[0], &ids(&[0]), 4).unwrap();
        assert_eq!(blocks.len(), 1);
        // Enumerate the expected triplets straight from the rule.
        let expected: Vec<EdgeTriplet> = (1..=4)
            .map(|d| EdgeTriplet {
                edge: Edge::new(0, d, 1.0),
                src_attr: AttributeValue::Label(0),
                dst_attr: AttributeValue::Label(d * 10),
            })
            .collect();
        assert_eq!(blocks[0].triplets, expected);
    }

    #[test]
    fn remote_destination_needs_a_mirror_entry() {
        let g = Graph::from_edges(vec![Edge::new(0, 3, 1.0), Edge::new(2, 3, 1.0)]);
        let mut pg = partition_graph(&g, &[2, 1], label).unwrap();
        let p0 = &mut pg.partitions[0];
        assert!(matches!(
            build_blocks(p0, &ids(&[0]), 8),
            Err(Error::Unresolved(VertexId(3)))
        ));
        p0.mirror.insert(VertexId(3), AttributeValue::Label(7));
        let blocks = build_blocks(p0, &ids(&[0]), 8).unwrap();
        assert_eq!(blocks[0].triplets[0].dst_attr, AttributeValue::Label(7));
    }

    #[test]
    fn apply_updates_counts_only_real_changes() {
        let g = Graph::from_edges(vec![Edge::new(3, 4, 1.0), Edge::new(5, 6, 1.0)]);
        let mut pg = partition_graph(&g, &[4], |_| AttributeValue::Label(7)).unwrap();
        let p = &mut pg.partitions[0];

        let n = apply_updates(p, &[(VertexId(3), AttributeValue::Label(7))]).unwrap();
        assert_eq!(n, 0);
        assert!(!p.vertices[&VertexId(3)].updated);

        let n = apply_updates(p, &[(VertexId(3), AttributeValue::Label(5))]).unwrap();
        assert_eq!(n, 1);
        assert!(p.vertices[&VertexId(3)].updated);

        let batch = [
            (VertexId(4), AttributeValue::Label(7)),
            (VertexId(5), AttributeValue::Label(1)),
            (VertexId(6), AttributeValue::Label(2)),
        ];
        // Reference loop.
        let expected = batch
            .iter()
            .filter(|(id, a)| p.vertices[id].attr != *a)
            .count();
        assert_eq!(apply_updates(p, &batch).unwrap(), expected);
        assert_eq!(expected, 2);

        assert!(matches!(
            apply_updates(p, &[(VertexId(99), AttributeValue::Label(1))]),
            Err(Error::UnknownVertex(VertexId(99)))
        ));
    }
}
