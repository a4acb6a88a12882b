//! Synchronization between agents and the upper system: a weighted vertex
//! cache with write-back, the lazy upload round and the skip vote.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::algo::AttributeValue;
use crate::error::{Error, Result};
use crate::graph::{OwnerMap, Partition, VertexId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity: usize,
    /// Per-iteration weight multiplier, in (0, 1).
    pub decay: f64,
    /// Weight added on insert and on every use.
    pub boost: f64,
    /// Keep a log of evictions.
    pub trace: bool,
}

impl CacheConfig {
    pub fn with_capacity(capacity: usize) -> Self {
        CacheConfig {
            capacity,
            decay: 0.5,
            boost: 1.0,
            trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("cache decay must be in (0, 1), got {}", self.decay)));
        }
        if !(self.boost > 0.0 && self.boost.is_finite()) {
            return Err(Error::Config(format!("cache boost must be > 0, got {}", self.boost)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub attr: AttributeValue,
    /// Store version the entry was read at; meaningless while dirty.
    pub version: u64,
    pub weight: f64,
    pub dirty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eviction {
    pub id: VertexId,
    pub weight: f64,
    pub dirty: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub dirty_evictions: u64,
}

/// Agent-side cache. Entries lose weight every iteration and gain weight on
/// use; when full, the lightest entry (smallest id on ties) is evicted, and
/// an evicted dirty entry is queued for write-back rather than dropped.
///
/// Weights are stored divided by a global scale so that decaying every entry
/// is a single multiplication; an ordered index over the stored weights gives
/// the eviction victim in logarithmic time.
#[derive(Clone, Debug)]
pub struct SyncCache {
    cfg: CacheConfig,
    entries: HashMap<VertexId, CacheEntry>,
    by_weight: BTreeSet<(Weight, VertexId)>,
    scale: f64,
    pending: BTreeMap<VertexId, AttributeValue>,
    stats: CacheStats,
    evictions: Vec<Eviction>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Weight(f64);

impl Eq for Weight {}

impl PartialOrd for Weight {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Weight {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Below this scale the stored weights are renormalized.
const MIN_SCALE: f64 = 1e-150;

impl SyncCache {
    pub fn new(cfg: CacheConfig) -> Self {
        SyncCache {
            cfg,
            entries: HashMap::new(),
            by_weight: BTreeSet::new(),
            scale: 1.0,
            pending: BTreeMap::new(),
            stats: CacheStats::default(),
            evictions: Vec::new(),
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A copy of the entry with its current weight.
    pub fn entry(&self, id: VertexId) -> Option<CacheEntry> {
        self.entries.get(&id).map(|e| CacheEntry {
            weight: e.weight * self.scale,
            ..e.clone()
        })
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn eviction_log(&self) -> &[Eviction] {
        &self.evictions
    }

    /// Dirty values evicted since the last [`SyncCache::take_pending`].
    pub fn pending(&self) -> &BTreeMap<VertexId, AttributeValue> {
        &self.pending
    }

    pub fn take_pending(&mut self) -> BTreeMap<VertexId, AttributeValue> {
        std::mem::take(&mut self.pending)
    }

    pub fn dirty_ids(&self) -> BTreeSet<VertexId> {
        self.entries
            .iter()
            .filter(|(_, e)| e.dirty)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn is_dirty(&self, id: VertexId) -> bool {
        self.entries.get(&id).is_some_and(|e| e.dirty)
    }

    fn bump(&mut self, id: VertexId) {
        let add = self.cfg.boost / self.scale;
        if let Some(e) = self.entries.get_mut(&id) {
            self.by_weight.remove(&(Weight(e.weight), id));
            e.weight += add;
            self.by_weight.insert((Weight(e.weight), id));
        }
    }

    /// Looks `id` up. A clean entry read at `current_version` is a hit; a
    /// dirty entry is always a hit since it is newer than the store. Anything
    /// else is fetched through `fetch`, which returns the value and its
    /// version.
    pub fn get(
        &mut self,
        id: VertexId,
        current_version: u64,
        fetch: impl FnOnce() -> Result<(AttributeValue, u64)>,
    ) -> Result<AttributeValue> {
        if let Some(e) = self.entries.get(&id) {
            if e.dirty || e.version == current_version {
                let attr = e.attr.clone();
                self.bump(id);
                self.stats.hits += 1;
                return Ok(attr);
            }
        }
        if let Some(attr) = self.pending.remove(&id) {
            // Evicted but not yet written back, so newer than the store.
            self.stats.hits += 1;
            if self.cfg.capacity == 0 {
                self.pending.insert(id, attr.clone());
            } else {
                self.insert_new(id, attr.clone(), 0, true);
            }
            return Ok(attr);
        }
        self.stats.misses += 1;
        let (attr, version) = fetch()?;
        self.install(id, attr.clone(), version, false);
        Ok(attr)
    }

    /// Records a computed value. Cached entries are overwritten and marked
    /// dirty; absent ones are inserted dirty.
    pub fn update(&mut self, id: VertexId, attr: AttributeValue) {
        if let Some(e) = self.entries.get_mut(&id) {
            e.attr = attr;
            e.dirty = true;
            self.bump(id);
            return;
        }
        if self.cfg.capacity == 0 {
            // Pass-through: nothing can be held, so the value goes straight
            // to write-back.
            self.pending.insert(id, attr);
            return;
        }
        self.insert_new(id, attr, 0, true);
    }

    /// Installs a value read from the upper system as a clean entry.
    pub fn refresh(&mut self, id: VertexId, attr: AttributeValue, version: u64) {
        self.install(id, attr, version, false);
    }

    fn install(&mut self, id: VertexId, attr: AttributeValue, version: u64, dirty: bool) {
        if self.cfg.capacity == 0 {
            return;
        }
        if let Some(e) = self.entries.get_mut(&id) {
            if e.dirty && !dirty {
                // Never let a store read overwrite newer local state.
                return;
            }
            e.attr = attr;
            e.version = version;
            e.dirty = dirty;
            self.bump(id);
            return;
        }
        self.insert_new(id, attr, version, dirty);
    }

    fn insert_new(&mut self, id: VertexId, attr: AttributeValue, version: u64, dirty: bool) {
        if self.entries.len() >= self.cfg.capacity {
            self.evict_one();
        }
        let weight = self.cfg.boost / self.scale;
        self.by_weight.insert((Weight(weight), id));
        self.entries.insert(
            id,
            CacheEntry {
                attr,
                version,
                weight,
                dirty,
            },
        );
    }

    fn evict_one(&mut self) {
        let Some((w, victim)) = self.by_weight.pop_first() else {
            return;
        };
        let e = self.entries.remove(&victim).expect("indexed entry present");
        self.stats.evictions += 1;
        if self.cfg.trace {
            self.evictions.push(Eviction {
                id: victim,
                weight: w.0 * self.scale,
                dirty: e.dirty,
            });
        }
        if e.dirty {
            self.stats.dirty_evictions += 1;
            self.pending.insert(victim, e.attr);
        }
    }

    /// Marks a dirty `id` as uploaded. Clean entries are left alone: their
    /// value is not the one that was written.
    pub fn mark_clean(&mut self, id: VertexId, version: u64) {
        if let Some(e) = self.entries.get_mut(&id).filter(|e| e.dirty) {
            e.dirty = false;
            e.version = version;
        }
    }

    pub fn decay_all(&mut self) {
        self.scale *= self.cfg.decay;
        if self.scale < MIN_SCALE {
            let s = self.scale;
            self.by_weight.clear();
            for (&id, e) in self.entries.iter_mut() {
                e.weight *= s;
                self.by_weight.insert((Weight(e.weight), id));
            }
            self.scale = 1.0;
        }
    }
}

/// The upper system's authoritative vertex values, with a version counter
/// per vertex that is bumped on every write.
#[derive(Debug, Default)]
pub struct AuthoritativeStore {
    values: RwLock<HashMap<VertexId, (AttributeValue, u64)>>,
}

impl AuthoritativeStore {
    pub fn new(initial: impl IntoIterator<Item = (VertexId, AttributeValue)>) -> Self {
        AuthoritativeStore {
            values: RwLock::new(initial.into_iter().map(|(id, a)| (id, (a, 0))).collect()),
        }
    }

    pub fn get(&self, id: VertexId) -> Result<(AttributeValue, u64)> {
        self.values
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(&id)
            .cloned()
            .ok_or(Error::UnknownVertex(id))
    }

    pub fn version(&self, id: VertexId) -> Result<u64> {
        self.values
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(&id)
            .map(|(_, v)| *v)
            .ok_or(Error::UnknownVertex(id))
    }

    /// Writes values and returns their new versions.
    pub fn write(&self, items: impl IntoIterator<Item = (VertexId, AttributeValue)>) -> Result<Vec<(VertexId, u64)>> {
        let mut map = self.values.write().unwrap_or_else(|p| p.into_inner());
        let mut out = Vec::new();
        for (id, attr) in items {
            let slot = map.get_mut(&id).ok_or(Error::UnknownVertex(id))?;
            slot.0 = attr;
            slot.1 += 1;
            out.push((id, slot.1));
        }
        Ok(out)
    }

    pub fn snapshot(&self) -> BTreeMap<VertexId, AttributeValue> {
        self.values
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .iter()
            .map(|(&id, (a, _))| (id, a.clone()))
            .collect()
    }
}

#[derive(Debug, Default)]
struct RoundState {
    round: u64,
    published: Vec<Option<BTreeSet<VertexId>>>,
    gqq: Option<BTreeSet<VertexId>>,
    gdq: BTreeMap<VertexId, AttributeValue>,
    uploaded: BTreeSet<VertexId>,
}

/// What one lazy round moved, for auditing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    pub gqq: BTreeSet<VertexId>,
    pub uploaded: BTreeSet<VertexId>,
}

/// Global query queue and global data queue, reset every round.
///
/// Agents publish their query lists, wait, read the union, upload the
/// queried values they hold, wait again, then fetch what they asked for.
/// The waits are the caller's job; this type enforces the per-round rules.
#[derive(Debug)]
pub struct RoundQueues {
    nodes: usize,
    state: Mutex<RoundState>,
}

impl RoundQueues {
    pub fn new(nodes: usize) -> Self {
        RoundQueues {
            nodes,
            state: Mutex::new(RoundState {
                published: vec![None; nodes],
                ..RoundState::default()
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, RoundState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn roll(&self, st: &mut RoundState, round: u64) {
        if st.round != round {
            *st = RoundState {
                round,
                published: vec![None; self.nodes],
                ..RoundState::default()
            };
        }
    }

    pub fn publish(&self, round: u64, node: usize, ids: BTreeSet<VertexId>) -> Result<()> {
        let mut st = self.lock();
        self.roll(&mut st, round);
        let slot = st
            .published
            .get_mut(node)
            .ok_or_else(|| Error::Invariant(format!("node {node} out of range")))?;
        if slot.is_some() {
            return Err(Error::DoublePublish(node));
        }
        *slot = Some(ids);
        Ok(())
    }

    /// Union of all published lists. Every node must have published.
    pub fn gqq(&self, round: u64) -> Result<BTreeSet<VertexId>> {
        let mut st = self.lock();
        if st.round != round {
            return Err(Error::Invariant(format!("round {round} is not open")));
        }
        if let Some(q) = &st.gqq {
            return Ok(q.clone());
        }
        let mut union = BTreeSet::new();
        for (node, p) in st.published.iter().enumerate() {
            let p = p.as_ref().ok_or(Error::MissingVote(node))?;
            union.extend(p.iter().copied());
        }
        st.gqq = Some(union.clone());
        Ok(union)
    }

    /// Adds values to the data queue. Ids outside the query queue are
    /// rejected.
    pub fn upload(
        &self,
        round: u64,
        node: usize,
        items: Vec<(VertexId, AttributeValue)>,
    ) -> Result<()> {
        let mut st = self.lock();
        if st.round != round || st.gqq.is_none() {
            return Err(Error::Invariant(format!("round {round} has no query queue yet")));
        }
        for (id, _) in &items {
            if !st.gqq.as_ref().is_some_and(|q| q.contains(id)) {
                return Err(Error::UnqueriedUpload { node, vertex: *id });
            }
        }
        for (id, attr) in items {
            st.uploaded.insert(id);
            st.gdq.insert(id, attr);
        }
        Ok(())
    }

    pub fn fetch(&self, round: u64, id: VertexId) -> Option<AttributeValue> {
        let st = self.lock();
        if st.round != round {
            return None;
        }
        st.gdq.get(&id).cloned()
    }

    pub fn log(&self, round: u64) -> Option<RoundLog> {
        let st = self.lock();
        (st.round == round).then(|| RoundLog {
            round,
            gqq: st.gqq.clone().unwrap_or_default(),
            uploaded: st.uploaded.clone(),
        })
    }
}

/// Remote vertices whose values the out-edges of `frontier` reference.
pub fn need_list(partition: &Partition, frontier: &BTreeSet<VertexId>) -> BTreeSet<VertexId> {
    let mut need = BTreeSet::new();
    for &v in frontier {
        for e in partition.out_edges(v) {
            if !partition.owns(e.dst) {
                need.insert(e.dst);
            }
        }
    }
    need
}

/// Owned vertices with at least one out-edge leaving the partition.
pub fn boundary_sources(partition: &Partition) -> BTreeSet<VertexId> {
    partition
        .edges
        .iter()
        .filter(|e| !partition.owns(e.dst))
        .map(|e| e.src)
        .collect()
}

/// This node's skip vote: every vertex that changed or will generate next
/// keeps all of its out-edges inside the partition.
pub fn local_skip_vote(
    boundary: &BTreeSet<VertexId>,
    changed: &BTreeSet<VertexId>,
    next_frontier: &BTreeSet<VertexId>,
) -> bool {
    changed.is_disjoint(boundary) && next_frontier.is_disjoint(boundary)
}

/// Logical AND of one vote per node.
pub fn skip_check(votes: &[Option<bool>]) -> Result<bool> {
    let mut all = true;
    for (node, v) in votes.iter().enumerate() {
        all &= v.ok_or(Error::MissingVote(node))?;
    }
    Ok(all)
}

/// An agent's side of a lazy round, for the sequential driver.
#[derive(Clone, Debug)]
pub struct RoundParticipant {
    pub node: usize,
    pub cache: SyncCache,
    /// Remote ids this node will read next iteration.
    pub need: BTreeSet<VertexId>,
    /// Values this node observed after the round.
    pub received: BTreeMap<VertexId, AttributeValue>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundResult {
    pub gqq: BTreeSet<VertexId>,
    pub gdq: BTreeMap<VertexId, AttributeValue>,
    pub uploads: u64,
    pub writebacks: u64,
}

/// Runs one lazy round over all participants in a single thread. The engine
/// runs the same steps concurrently with barriers in between.
pub fn lazy_upload_round(
    round: u64,
    agents: &mut [RoundParticipant],
    owner: &OwnerMap,
    store: &AuthoritativeStore,
    queues: &RoundQueues,
) -> Result<RoundResult> {
    for a in agents.iter() {
        queues.publish(round, a.node, a.need.clone())?;
    }
    let gqq = queues.gqq(round)?;
    let mut result = RoundResult {
        gqq: gqq.clone(),
        ..RoundResult::default()
    };
    for a in agents.iter_mut() {
        let pending = a.cache.take_pending();
        result.writebacks += pending.len() as u64;
        store.write(pending)?;
        let s_u: Vec<(VertexId, AttributeValue)> = a
            .cache
            .dirty_ids()
            .into_iter()
            .filter(|id| gqq.contains(id) && owner.owner(*id) == Some(a.node))
            .map(|id| (id, a.cache.entry(id).expect("dirty entry").attr.clone()))
            .collect();
        result.uploads += s_u.len() as u64;
        let versions = store.write(s_u.clone())?;
        queues.upload(round, a.node, s_u)?;
        for (id, v) in versions {
            a.cache.mark_clean(id, v);
        }
    }
    for a in agents.iter_mut() {
        for &id in &a.need {
            let (attr, version) = match queues.fetch(round, id) {
                Some(attr) => (attr, store.version(id)?),
                None => store.get(id)?,
            };
            a.cache.refresh(id, attr.clone(), version);
            a.received.insert(id, attr);
        }
    }
    if let Some(log) = queues.log(round) {
        result.gdq = log
            .uploaded
            .iter()
            .filter_map(|&id| queues.fetch(round, id).map(|a| (id, a)))
            .collect();
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{partition_graph, Edge, Graph};

    fn lbl(x: u64) -> AttributeValue {
        AttributeValue::Label(x)
    }

    fn fetch_ok(x: u64) -> impl FnOnce() -> Result<(AttributeValue, u64)> {
        move || Ok((lbl(x), 0))
    }

    fn cache(cap: usize) -> SyncCache {
        SyncCache::new(CacheConfig {
            trace: true,
            ..CacheConfig::with_capacity(cap)
        })
    }

    #[test]
    fn miss_then_hit_boosts_weight() {
        let mut c = cache(4);
        assert_eq!(c.get(VertexId(7), 0, fetch_ok(70)).unwrap(), lbl(70));
        assert_eq!(c.stats().misses, 1);
        let w1 = c.entry(VertexId(7)).unwrap().weight;
        c.get(VertexId(7), 0, || panic!("must not fetch")).unwrap();
        assert_eq!(c.stats().hits, 1);
        assert!(c.entry(VertexId(7)).unwrap().weight > w1);
    }

    #[test]
    fn stale_version_is_a_miss() {
        let mut c = cache(4);
        c.get(VertexId(1), 0, fetch_ok(1)).unwrap();
        let v = c.get(VertexId(1), 3, || Ok((lbl(9), 3))).unwrap();
        assert_eq!(v, lbl(9));
        assert_eq!(c.stats().misses, 2);
    }

    #[test]
    fn fetch_errors_propagate() {
        let mut c = cache(4);
        let r = c.get(VertexId(1), 0, || Err(Error::UnknownVertex(VertexId(1))));
        assert!(r.is_err());
        assert!(c.is_empty());
    }

    #[test]
    fn evicts_the_lightest_entry() {
        let mut c = cache(2);
        c.get(VertexId(1), 0, fetch_ok(1)).unwrap();
        c.get(VertexId(2), 0, fetch_ok(2)).unwrap();
        c.get(VertexId(2), 0, fetch_ok(2)).unwrap();
        // Policy trace: w(1) = 1, w(2) = 2, so inserting 3 evicts 1.
        c.get(VertexId(3), 0, fetch_ok(3)).unwrap();
        assert_eq!(c.stats().evictions, 1);
        assert_eq!(c.eviction_log()[0].id, VertexId(1));
        assert!(c.entry(VertexId(1)).is_none());
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn equal_weights_evict_smallest_id() {
        let mut c = cache(2);
        c.get(VertexId(5), 0, fetch_ok(5)).unwrap();
        c.get(VertexId(4), 0, fetch_ok(4)).unwrap();
        c.get(VertexId(6), 0, fetch_ok(6)).unwrap();
        assert_eq!(c.eviction_log()[0].id, VertexId(4));
    }

    #[test]
    fn update_marks_dirty_and_dirty_evictions_are_queued() {
        let mut c = cache(1);
        c.get(VertexId(1), 0, fetch_ok(1)).unwrap();
        c.update(VertexId(1), lbl(10));
        assert!(c.entry(VertexId(1)).unwrap().dirty);
        c.update(VertexId(2), lbl(20));
        assert_eq!(c.stats().evictions, 1);
        assert_eq!(c.pending().get(&VertexId(1)), Some(&lbl(10)));
        assert!(c.is_dirty(VertexId(2)));
    }

    #[test]
    fn zero_capacity_passes_through() {
        let mut c = cache(0);
        c.get(VertexId(1), 0, fetch_ok(1)).unwrap();
        c.get(VertexId(1), 0, fetch_ok(1)).unwrap();
        assert_eq!(c.stats().misses, 2);
        assert!(c.is_empty());
        c.update(VertexId(3), lbl(3));
        assert_eq!(c.pending().len(), 1);
    }

    #[test]
    fn decay_halves_and_keeps_order() {
        let mut c = cache(4);
        c.get(VertexId(1), 0, fetch_ok(1)).unwrap();
        c.get(VertexId(1), 0, fetch_ok(1)).unwrap();
        c.get(VertexId(2), 0, fetch_ok(2)).unwrap();
        for _ in 0..3 {
            c.get(VertexId(2), 0, fetch_ok(2)).unwrap();
        }
        c.decay_all();
        assert_eq!(c.entry(VertexId(1)).unwrap().weight, 1.0);
        assert_eq!(c.entry(VertexId(2)).unwrap().weight, 2.0);
        let mut empty = cache(4);
        empty.decay_all();
        assert!(empty.is_empty());
    }

    #[test]
    fn queues_enforce_round_rules() {
        let q = RoundQueues::new(2);
        q.publish(1, 0, [VertexId(5)].into()).unwrap();
        assert!(matches!(q.publish(1, 0, BTreeSet::new()), Err(Error::DoublePublish(0))));
        assert!(matches!(q.gqq(1), Err(Error::MissingVote(1))));
        q.publish(1, 1, [VertexId(6)].into()).unwrap();
        assert_eq!(q.gqq(1).unwrap(), [VertexId(5), VertexId(6)].into());
        assert!(matches!(
            q.upload(1, 0, vec![(VertexId(7), lbl(0))]),
            Err(Error::UnqueriedUpload { .. })
        ));
        q.upload(1, 1, vec![(VertexId(5), lbl(1))]).unwrap();
        assert_eq!(q.fetch(1, VertexId(5)), Some(lbl(1)));
        // A new round starts empty.
        q.publish(2, 0, BTreeSet::new()).unwrap();
        assert_eq!(q.fetch(2, VertexId(5)), None);
    }

    fn two_node_setup() -> (crate::graph::PartitionedGraph, AuthoritativeStore) {
        // Node 0 owns {0,1,2}, node 1 owns {3,4,5}; 4 -> 2 is the only
        // cross edge, so node 1 needs vertex 2.
        let g = Graph::from_edges(vec![
            Edge::new(0, 1, 1.0),
            Edge::new(1, 2, 1.0),
            Edge::new(3, 4, 1.0),
            Edge::new(4, 2, 1.0),
            Edge::new(4, 5, 1.0),
        ]);
        let pg = partition_graph(&g, &[3, 3], |v| lbl(v.0)).unwrap();
        let store = AuthoritativeStore::new((0..6).map(|v| (VertexId(v), lbl(v))));
        (pg, store)
    }

    #[test]
    fn hand_traced_two_node_round() {
        let (pg, store) = two_node_setup();
        let q = RoundQueues::new(2);
        let mut a = RoundParticipant {
            node: 0,
            cache: cache(8),
            need: BTreeSet::new(),
            received: BTreeMap::new(),
        };
        a.cache.update(VertexId(2), lbl(42));
        a.cache.update(VertexId(1), lbl(41));
        let b = RoundParticipant {
            node: 1,
            cache: cache(8),
            need: need_list(&pg.partitions[1], &[VertexId(4)].into()),
            received: BTreeMap::new(),
        };
        assert_eq!(b.need, [VertexId(2)].into());
        let mut agents = [a, b];
        let r = lazy_upload_round(1, &mut agents, &pg.vertex_owner, &store, &q).unwrap();
        assert_eq!(r.gqq, [VertexId(2)].into());
        assert_eq!(r.gdq, BTreeMap::from([(VertexId(2), lbl(42))]));
        assert_eq!(r.uploads, 1);
        assert_eq!(agents[1].received[&VertexId(2)], lbl(42));
        // Vertex 1 was needed by nobody: not uploaded, still dirty.
        assert!(agents[0].cache.is_dirty(VertexId(1)));
        assert!(!agents[0].cache.is_dirty(VertexId(2)));
        assert_eq!(store.get(VertexId(1)).unwrap().0, lbl(1));
    }

    #[test]
    fn no_remote_needs_means_no_payload() {
        let (_, store) = two_node_setup();
        let g = Graph::from_edges(vec![Edge::new(0, 1, 1.0), Edge::new(3, 4, 1.0)]);
        let pg = partition_graph(&g, &[2, 2], |v| lbl(v.0)).unwrap();
        let q = RoundQueues::new(2);
        let mut agents: Vec<RoundParticipant> = (0..2)
            .map(|node| RoundParticipant {
                node,
                cache: cache(4),
                need: need_list(&pg.partitions[node], &pg.partitions[node].vertices.keys().copied().collect()),
                received: BTreeMap::new(),
            })
            .collect();
        agents[0].cache.update(VertexId(1), lbl(9));
        let r = lazy_upload_round(1, &mut agents, &pg.vertex_owner, &store, &q).unwrap();
        assert!(r.gqq.is_empty());
        assert_eq!(r.uploads, 0);
    }

    #[test]
    fn skip_votes() {
        let boundary: BTreeSet<VertexId> = [VertexId(4)].into();
        assert!(local_skip_vote(&boundary, &[VertexId(1)].into(), &[VertexId(3)].into()));
        assert!(!local_skip_vote(&boundary, &[VertexId(4)].into(), &BTreeSet::new()));
        assert!(!local_skip_vote(&boundary, &BTreeSet::new(), &[VertexId(4)].into()));
        assert!(skip_check(&[Some(true), Some(true)]).unwrap());
        assert!(!skip_check(&[Some(true), Some(false)]).unwrap());
        assert!(matches!(skip_check(&[Some(true), None]), Err(Error::MissingVote(1))));
    }

    #[test]
    fn store_versions_advance() {
        let s = AuthoritativeStore::new([(VertexId(1), lbl(1))]);
        assert_eq!(s.version(VertexId(1)).unwrap(), 0);
        s.write([(VertexId(1), lbl(2))]).unwrap();
        assert_eq!(s.get(VertexId(1)).unwrap(), (lbl(2), 1));
        assert!(s.write([(VertexId(9), lbl(2))]).is_err());
    }
}
