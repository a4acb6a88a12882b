//! The three-operation algorithm template and the bundled algorithms.
//!
//! An algorithm is written as a [`VertexProgram`]: `gen` turns one edge
//! triplet into a message, `merge` folds two payloads addressed to the same
//! vertex, and `apply` combines a vertex's old attribute with its merged
//! payload. Everything else (blocking, pipelining, synchronization) is the
//! middleware's job.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeTriplet, Graph, Partition, TripletBlock, VertexId};

/// Number of simultaneous SSSP sources.
pub const SSSP_SOURCES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttributeValue {
    /// One tentative distance per SSSP source; `inf` when unreached.
    Distance([f64; SSSP_SOURCES]),
    Rank { rank: f64, out_degree: u64 },
    Label(u64),
}

impl AttributeValue {
    /// Exact comparison. Floats are compared by bit pattern so that a value
    /// only counts as unchanged when it is literally the same.
    pub fn same_as(&self, other: &AttributeValue) -> bool {
        match (self, other) {
            (AttributeValue::Distance(a), AttributeValue::Distance(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (
                AttributeValue::Rank { rank: r1, out_degree: d1 },
                AttributeValue::Rank { rank: r2, out_degree: d2 },
            ) => r1.to_bits() == r2.to_bits() && d1 == d2,
            (AttributeValue::Label(a), AttributeValue::Label(b)) => a == b,
            _ => false,
        }
    }

    /// Distances and labels must match exactly; ranks within `rel` relative
    /// error.
    pub fn approx_eq(&self, other: &AttributeValue, rel: f64) -> bool {
        match (self, other) {
            (
                AttributeValue::Rank { rank: r1, out_degree: d1 },
                AttributeValue::Rank { rank: r2, out_degree: d2 },
            ) => d1 == d2 && (r1 - r2).abs() <= rel * r1.abs().max(r2.abs()),
            _ => self == other,
        }
    }

    /// Text used in attribute dumps: space-separated values.
    pub fn render(&self) -> String {
        match self {
            AttributeValue::Distance(d) => d
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            AttributeValue::Rank { rank, .. } => rank.to_string(),
            AttributeValue::Label(l) => l.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Distance([f64; SSSP_SOURCES]),
    Rank(f64),
    /// Label multiset as label -> count.
    Labels(BTreeMap<u64, u64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub target: VertexId,
    pub payload: Payload,
}

/// Merged messages, at most one payload per target.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MessageSet(pub BTreeMap<VertexId, Payload>);

impl MessageSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: VertexId) -> Option<&Payload> {
        self.0.get(&id)
    }
}

/// Result of applying a (possibly absent) payload to one vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexUpdate {
    pub id: VertexId,
    pub attr: AttributeValue,
    pub changed: bool,
    pub active: bool,
    /// Magnitude of the change, used by tolerance-based convergence.
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoKind {
    Sssp,
    #[serde(rename = "pagerank")]
    PageRank,
    Lp,
}

impl FromStr for AlgoKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sssp" => Ok(AlgoKind::Sssp),
            "pagerank" | "pr" => Ok(AlgoKind::PageRank),
            "lp" => Ok(AlgoKind::Lp),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl fmt::Display for AlgoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlgoKind::Sssp => "sssp",
            AlgoKind::PageRank => "pagerank",
            AlgoKind::Lp => "lp",
        })
    }
}

pub trait VertexProgram: Send + Sync + fmt::Debug {
    fn kind(&self) -> AlgoKind;

    fn initial_attr(&self, id: VertexId, out_degree: u64) -> AttributeValue;

    /// Whether `id` is in the first frontier.
    fn initially_active(&self, id: VertexId) -> bool;

    /// Every vertex generates messages each iteration, not only the frontier.
    fn gen_from_all(&self) -> bool {
        false
    }

    /// Every owned vertex is applied each iteration, even without messages.
    fn apply_to_all(&self) -> bool {
        false
    }

    fn gen(&self, triplet: &EdgeTriplet) -> Result<Message>;

    /// Folds `other` into `acc`. Must be associative and commutative.
    fn merge(&self, acc: &mut Payload, other: Payload) -> Result<()>;

    fn apply(
        &self,
        id: VertexId,
        old: &AttributeValue,
        msg: Option<&Payload>,
    ) -> Result<VertexUpdate>;

    fn max_iterations(&self, vertex_count: usize) -> usize;

    /// Local convergence test after an apply step.
    fn converged(&self, any_active: bool, max_delta: f64) -> bool {
        let _ = max_delta;
        !any_active
    }
}

fn mismatch(what: &str, got: &impl fmt::Debug) -> Error {
    Error::Invariant(format!("expected {what}, got {got:?}"))
}

/// Bellman-Ford SSSP from up to four sources at once.
#[derive(Clone, Debug)]
pub struct Sssp {
    sources: [Option<VertexId>; SSSP_SOURCES],
}

impl Sssp {
    pub fn new(sources: &[VertexId]) -> Result<Self> {
        if sources.is_empty() || sources.len() > SSSP_SOURCES {
            return Err(Error::Config(format!(
                "sssp takes 1 to {SSSP_SOURCES} sources, got {}",
                sources.len()
            )));
        }
        let mut s = [None; SSSP_SOURCES];
        for (slot, &id) in s.iter_mut().zip(sources) {
            *slot = Some(id);
        }
        Ok(Sssp { sources: s })
    }

    /// The four lowest vertex ids (fewer on tiny graphs).
    pub fn lowest_ids(graph: &Graph) -> Self {
        let mut s = [None; SSSP_SOURCES];
        for (slot, &id) in s.iter_mut().zip(graph.vertices()) {
            *slot = Some(id);
        }
        Sssp { sources: s }
    }

    pub fn sources(&self) -> &[Option<VertexId>; SSSP_SOURCES] {
        &self.sources
    }
}

impl VertexProgram for Sssp {
    fn kind(&self) -> AlgoKind {
        AlgoKind::Sssp
    }

    fn initial_attr(&self, id: VertexId, _out_degree: u64) -> AttributeValue {
        let mut d = [f64::INFINITY; SSSP_SOURCES];
        for (x, s) in d.iter_mut().zip(&self.sources) {
            if *s == Some(id) {
                *x = 0.0;
            }
        }
        AttributeValue::Distance(d)
    }

    fn initially_active(&self, id: VertexId) -> bool {
        self.sources.contains(&Some(id))
    }

    fn gen(&self, t: &EdgeTriplet) -> Result<Message> {
        let AttributeValue::Distance(src) = &t.src_attr else {
            return Err(mismatch("distance", &t.src_attr));
        };
        Ok(Message {
            target: t.edge.dst,
            payload: Payload::Distance(src.map(|x| x + t.edge.weight)),
        })
    }

    fn merge(&self, acc: &mut Payload, other: Payload) -> Result<()> {
        match (acc, other) {
            (Payload::Distance(a), Payload::Distance(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = x.min(y);
                }
                Ok(())
            }
            (_, other) => Err(mismatch("distance payload", &other)),
        }
    }

    fn apply(
        &self,
        id: VertexId,
        old: &AttributeValue,
        msg: Option<&Payload>,
    ) -> Result<VertexUpdate> {
        let AttributeValue::Distance(old_d) = old else {
            return Err(mismatch("distance", old));
        };
        let mut new = *old_d;
        let mut improved = false;
        match msg {
            None => {}
            Some(Payload::Distance(m)) => {
                for (x, &y) in new.iter_mut().zip(m) {
                    if y < *x {
                        *x = y;
                        improved = true;
                    }
                }
            }
            Some(other) => return Err(mismatch("distance payload", other)),
        }
        Ok(VertexUpdate {
            id,
            attr: AttributeValue::Distance(new),
            changed: improved,
            active: improved,
            delta: 0.0,
        })
    }

    fn max_iterations(&self, vertex_count: usize) -> usize {
        vertex_count + 1
    }
}

/// PageRank with the unnormalized `(1 - d) + d * sum` update.
#[derive(Clone, Debug)]
pub struct PageRank {
    pub damping: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PageRank {
    fn default() -> Self {
        PageRank {
            damping: 0.85,
            tolerance: 1e-9,
            max_iterations: 100,
        }
    }
}

impl VertexProgram for PageRank {
    fn kind(&self) -> AlgoKind {
        AlgoKind::PageRank
    }

    fn initial_attr(&self, _id: VertexId, out_degree: u64) -> AttributeValue {
        AttributeValue::Rank {
            rank: 1.0,
            out_degree,
        }
    }

    fn initially_active(&self, _id: VertexId) -> bool {
        true
    }

    fn gen_from_all(&self) -> bool {
        true
    }

    fn apply_to_all(&self) -> bool {
        true
    }

    fn gen(&self, t: &EdgeTriplet) -> Result<Message> {
        let AttributeValue::Rank { rank, out_degree } = t.src_attr else {
            return Err(mismatch("rank", &t.src_attr));
        };
        if out_degree == 0 {
            return Err(Error::Invariant(format!(
                "vertex {} has an out-edge but out-degree 0",
                t.edge.src
            )));
        }
        Ok(Message {
            target: t.edge.dst,
            payload: Payload::Rank(rank / out_degree as f64),
        })
    }

    fn merge(&self, acc: &mut Payload, other: Payload) -> Result<()> {
        match (acc, other) {
            (Payload::Rank(a), Payload::Rank(b)) => {
                *a += b;
                Ok(())
            }
            (_, other) => Err(mismatch("rank payload", &other)),
        }
    }

    fn apply(
        &self,
        id: VertexId,
        old: &AttributeValue,
        msg: Option<&Payload>,
    ) -> Result<VertexUpdate> {
        let AttributeValue::Rank { rank, out_degree } = *old else {
            return Err(mismatch("rank", old));
        };
        let sum = match msg {
            None => 0.0,
            Some(Payload::Rank(s)) => *s,
            Some(other) => return Err(mismatch("rank payload", other)),
        };
        let new = (1.0 - self.damping) + self.damping * sum;
        Ok(VertexUpdate {
            id,
            attr: AttributeValue::Rank {
                rank: new,
                out_degree,
            },
            changed: new.to_bits() != rank.to_bits(),
            active: true,
            delta: (new - rank).abs(),
        })
    }

    fn max_iterations(&self, _vertex_count: usize) -> usize {
        self.max_iterations
    }

    fn converged(&self, _any_active: bool, max_delta: f64) -> bool {
        max_delta < self.tolerance
    }
}

/// Synchronous label propagation: each vertex adopts the most frequent label
/// among its in-neighbours, smallest label on ties.
#[derive(Clone, Debug)]
pub struct LabelPropagation {
    pub max_iterations: usize,
}

impl Default for LabelPropagation {
    fn default() -> Self {
        LabelPropagation { max_iterations: 15 }
    }
}

impl VertexProgram for LabelPropagation {
    fn kind(&self) -> AlgoKind {
        AlgoKind::Lp
    }

    fn initial_attr(&self, id: VertexId, _out_degree: u64) -> AttributeValue {
        AttributeValue::Label(id.0)
    }

    fn initially_active(&self, _id: VertexId) -> bool {
        true
    }

    fn gen_from_all(&self) -> bool {
        true
    }

    fn gen(&self, t: &EdgeTriplet) -> Result<Message> {
        let AttributeValue::Label(l) = t.src_attr else {
            return Err(mismatch("label", &t.src_attr));
        };
        Ok(Message {
            target: t.edge.dst,
            payload: Payload::Labels(BTreeMap::from([(l, 1)])),
        })
    }

    fn merge(&self, acc: &mut Payload, other: Payload) -> Result<()> {
        match (acc, other) {
            (Payload::Labels(a), Payload::Labels(b)) => {
                for (l, n) in b {
                    *a.entry(l).or_default() += n;
                }
                Ok(())
            }
            (_, other) => Err(mismatch("label payload", &other)),
        }
    }

    fn apply(
        &self,
        id: VertexId,
        old: &AttributeValue,
        msg: Option<&Payload>,
    ) -> Result<VertexUpdate> {
        let AttributeValue::Label(old_l) = *old else {
            return Err(mismatch("label", old));
        };
        let new = match msg {
            None => old_l,
            Some(Payload::Labels(counts)) => {
                // BTreeMap iterates labels ascending, so keeping the first
                // strict maximum gives the smallest label on ties.
                let mut best = (old_l, 0u64);
                for (&l, &n) in counts {
                    if n > best.1 {
                        best = (l, n);
                    }
                }
                best.0
            }
            Some(other) => return Err(mismatch("label payload", other)),
        };
        let changed = new != old_l;
        Ok(VertexUpdate {
            id,
            attr: AttributeValue::Label(new),
            changed,
            active: changed,
            delta: if changed { 1.0 } else { 0.0 },
        })
    }

    fn max_iterations(&self, _vertex_count: usize) -> usize {
        self.max_iterations
    }
}

/// Builds the program for `kind`. SSSP uses `sources` when given and the
/// four lowest vertex ids otherwise.
pub fn program_for(
    kind: AlgoKind,
    graph: &Graph,
    sources: Option<&[VertexId]>,
) -> Result<Arc<dyn VertexProgram>> {
    Ok(match kind {
        AlgoKind::Sssp => match sources {
            Some(s) => {
                for id in s {
                    if graph.vertices().binary_search(id).is_err() {
                        return Err(Error::UnknownVertex(*id));
                    }
                }
                Arc::new(Sssp::new(s)?)
            }
            None => Arc::new(Sssp::lowest_ids(graph)),
        },
        AlgoKind::PageRank => Arc::new(PageRank::default()),
        AlgoKind::Lp => Arc::new(LabelPropagation::default()),
    })
}

pub fn msg_gen(program: &dyn VertexProgram, blocks: &[TripletBlock]) -> Result<Vec<Message>> {
    blocks
        .iter()
        .flat_map(|b| &b.triplets)
        .map(|t| program.gen(t))
        .collect()
}

/// Groups by target and folds in input order.
pub fn msg_merge(program: &dyn VertexProgram, messages: Vec<Message>) -> Result<MessageSet> {
    let mut set = BTreeMap::new();
    for m in messages {
        merge_into(program, &mut set, m.target, m.payload)?;
    }
    Ok(MessageSet(set))
}

pub(crate) fn merge_into(
    program: &dyn VertexProgram,
    set: &mut BTreeMap<VertexId, Payload>,
    target: VertexId,
    payload: Payload,
) -> Result<()> {
    match set.entry(target) {
        std::collections::btree_map::Entry::Vacant(e) => {
            e.insert(payload);
            Ok(())
        }
        std::collections::btree_map::Entry::Occupied(mut e) => program.merge(e.get_mut(), payload),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApplyOutcome {
    /// New attributes of every applied vertex, changed or not.
    pub updates: Vec<(VertexId, AttributeValue)>,
    pub next_active: BTreeSet<VertexId>,
    pub changed: BTreeSet<VertexId>,
    pub max_delta: f64,
}

/// Applies `msgs` to the owned vertices of `partition` without mutating it.
pub fn msg_apply(
    program: &dyn VertexProgram,
    partition: &Partition,
    msgs: &MessageSet,
) -> Result<ApplyOutcome> {
    for &target in msgs.0.keys() {
        if !partition.owns(target) {
            return Err(Error::NotOwned {
                vertex: target,
                node: partition.node_id,
            });
        }
    }
    let ids: Vec<VertexId> = if program.apply_to_all() {
        partition.vertices.keys().copied().collect()
    } else {
        msgs.0.keys().copied().collect()
    };
    let mut out = ApplyOutcome::default();
    for id in ids {
        let old = &partition.vertices[&id].attr;
        let u = program.apply(id, old, msgs.get(id))?;
        absorb(&mut out, u);
    }
    Ok(out)
}

pub(crate) fn absorb(out: &mut ApplyOutcome, u: VertexUpdate) {
    if u.active {
        out.next_active.insert(u.id);
    }
    if u.changed {
        out.changed.insert(u.id);
    }
    out.max_delta = out.max_delta.max(u.delta);
    out.updates.push((u.id, u.attr));
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceRun {
    pub attributes: BTreeMap<VertexId, AttributeValue>,
    pub iterations: usize,
    pub converged: bool,
}

/// Single-threaded, unpartitioned gen/merge/apply loop over the whole graph.
/// This is the oracle every engine configuration is compared against.
pub fn run_reference(program: &dyn VertexProgram, graph: &Graph) -> Result<ReferenceRun> {
    let degrees = graph.out_degrees();
    let mut adjacency: BTreeMap<VertexId, Vec<usize>> = BTreeMap::new();
    for (i, e) in graph.edges().iter().enumerate() {
        adjacency.entry(e.src).or_default().push(i);
    }
    let mut attrs: BTreeMap<VertexId, AttributeValue> = graph
        .vertices()
        .iter()
        .map(|&v| (v, program.initial_attr(v, degrees[&v])))
        .collect();
    let mut frontier: BTreeSet<VertexId> = graph
        .vertices()
        .iter()
        .copied()
        .filter(|&v| program.initially_active(v))
        .collect();

    let cap = program.max_iterations(graph.vertex_count());
    for iter in 0..cap {
        let senders: Vec<VertexId> = if program.gen_from_all() {
            graph.vertices().to_vec()
        } else {
            frontier.iter().copied().collect()
        };
        let mut merged: BTreeMap<VertexId, Payload> = BTreeMap::new();
        for src in senders {
            for &i in adjacency.get(&src).map(Vec::as_slice).unwrap_or(&[]) {
                let edge = graph.edges()[i];
                let t = EdgeTriplet {
                    edge,
                    src_attr: attrs[&src].clone(),
                    dst_attr: attrs[&edge.dst].clone(),
                };
                let m = program.gen(&t)?;
                merge_into(program, &mut merged, m.target, m.payload)?;
            }
        }
        let targets: Vec<VertexId> = if program.apply_to_all() {
            graph.vertices().to_vec()
        } else {
            merged.keys().copied().collect()
        };
        let mut next = BTreeSet::new();
        let mut max_delta: f64 = 0.0;
        let mut new_attrs = Vec::with_capacity(targets.len());
        for id in targets {
            let u = program.apply(id, &attrs[&id], merged.get(&id))?;
            if u.active {
                next.insert(id);
            }
            max_delta = max_delta.max(u.delta);
            new_attrs.push((id, u.attr));
        }
        for (id, a) in new_attrs {
            attrs.insert(id, a);
        }
        frontier = next;
        if program.converged(!frontier.is_empty(), max_delta) {
            return Ok(ReferenceRun {
                attributes: attrs,
                iterations: iter + 1,
                converged: true,
            });
        }
    }
    Ok(ReferenceRun {
        attributes: attrs,
        iterations: cap,
        converged: cap == 0,
    })
}
