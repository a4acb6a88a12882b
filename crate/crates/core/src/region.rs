//! Shared regions: three role-labelled buffers plus an ordered control queue
//! between one agent and one daemon.
//!
//! Both endpoints live in one address space, so a write by either side is
//! visible to the other without copying. Buffer access is serialized by the
//! control protocol alone; the per-slot mutexes are only taken with
//! `try_lock`, and finding one held is reported as a protocol violation.

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, TryLockError};
use std::time::Duration;

use crossbeam::channel::{self, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use crate::algo::{AttributeValue, Message, Payload, VertexUpdate};
use crate::error::{Error, Result};
use crate::graph::{EdgeTriplet, VertexId};
use crate::pipeline::{Role, RotationState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelKey(pub u32);

impl fmt::Display for ChannelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#06x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum OpKind {
    Gen = 0,
    Merge = 1,
    Apply = 2,
}

impl TryFrom<u8> for OpKind {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(OpKind::Gen),
            1 => Ok(OpKind::Merge),
            2 => Ok(OpKind::Apply),
            other => Err(Error::UnknownOp(other)),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Gen => "gen",
            OpKind::Merge => "merge",
            OpKind::Apply => "apply",
        })
    }
}

/// One vertex handed to the apply operation. `old` is `None` when the agent
/// does not own the vertex, which the daemon reports as an error.
#[derive(Clone, Debug, PartialEq)]
pub struct ApplyItem {
    pub id: VertexId,
    pub old: Option<AttributeValue>,
    pub msg: Option<Payload>,
}

/// Contents of one buffer. Gen turns `Triplets` into `Messages`, merge turns
/// `Messages` into `Merged`, apply turns `ApplyItems` into `Applied`, all in
/// place.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum SlotData {
    #[default]
    Empty,
    Triplets(Vec<EdgeTriplet>),
    Messages(Vec<Message>),
    Merged(Vec<(VertexId, Payload)>),
    ApplyItems(Vec<ApplyItem>),
    Applied(Vec<VertexUpdate>),
}

impl SlotData {
    pub fn len(&self) -> usize {
        match self {
            SlotData::Empty => 0,
            SlotData::Triplets(v) => v.len(),
            SlotData::Messages(v) => v.len(),
            SlotData::Merged(v) => v.len(),
            SlotData::ApplyItems(v) => v.len(),
            SlotData::Applied(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Content hash, stable across runs.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        match self {
            SlotData::Empty => 0u8.hash(&mut h),
            SlotData::Triplets(v) => {
                1u8.hash(&mut h);
                for t in v {
                    t.edge.src.hash(&mut h);
                    t.edge.dst.hash(&mut h);
                    t.edge.weight.to_bits().hash(&mut h);
                    hash_attr(&t.src_attr, &mut h);
                    hash_attr(&t.dst_attr, &mut h);
                }
            }
            SlotData::Messages(v) => {
                2u8.hash(&mut h);
                for m in v {
                    m.target.hash(&mut h);
                    hash_payload(&m.payload, &mut h);
                }
            }
            SlotData::Merged(v) => {
                3u8.hash(&mut h);
                for (id, p) in v {
                    id.hash(&mut h);
                    hash_payload(p, &mut h);
                }
            }
            SlotData::ApplyItems(v) => {
                4u8.hash(&mut h);
                for it in v {
                    it.id.hash(&mut h);
                    match &it.old {
                        Some(a) => hash_attr(a, &mut h),
                        None => 0xffu8.hash(&mut h),
                    }
                    match &it.msg {
                        Some(p) => hash_payload(p, &mut h),
                        None => 0xffu8.hash(&mut h),
                    }
                }
            }
            SlotData::Applied(v) => {
                5u8.hash(&mut h);
                for u in v {
                    u.id.hash(&mut h);
                    hash_attr(&u.attr, &mut h);
                    (u.changed, u.active).hash(&mut h);
                    u.delta.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }
}

fn hash_attr(a: &AttributeValue, h: &mut impl Hasher) {
    match a {
        AttributeValue::Distance(d) => {
            0u8.hash(h);
            for x in d {
                x.to_bits().hash(h);
            }
        }
        AttributeValue::Rank { rank, out_degree } => {
            1u8.hash(h);
            rank.to_bits().hash(h);
            out_degree.hash(h);
        }
        AttributeValue::Label(l) => {
            2u8.hash(h);
            l.hash(h);
        }
    }
}

fn hash_payload(p: &Payload, h: &mut impl Hasher) {
    match p {
        Payload::Distance(d) => {
            0u8.hash(h);
            for x in d {
                x.to_bits().hash(h);
            }
        }
        Payload::Rank(r) => {
            1u8.hash(h);
            r.to_bits().hash(h);
        }
        Payload::Labels(m) => {
            2u8.hash(h);
            for (l, n) in m {
                (l, n).hash(h);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlKind {
    ExchangeFinished,
    RotateFinished,
    ComputeFinished,
    ComputeAllFinished,
    Shutdown,
    /// Daemon-side failure; carries a diagnostic.
    Fault,
}

impl ControlKind {
    /// Single-letter code used in protocol traces.
    pub fn code(self) -> char {
        match self {
            ControlKind::ExchangeFinished => 'E',
            ControlKind::RotateFinished => 'R',
            ControlKind::ComputeFinished => 'C',
            ControlKind::ComputeAllFinished => 'A',
            ControlKind::Shutdown => 'S',
            ControlKind::Fault => 'F',
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlMessage {
    pub kind: ControlKind,
    pub seq: u64,
    pub detail: Option<String>,
}

impl ControlMessage {
    pub fn new(kind: ControlKind, seq: u64) -> Self {
        ControlMessage {
            kind,
            seq,
            detail: None,
        }
    }
}

/// True when `trace` is one complete pass: `(ERC)*ERA`.
pub fn pass_trace_conforms(trace: &str) -> bool {
    let b = trace.as_bytes();
    if b.len() < 3 || b.len() % 3 != 0 {
        return false;
    }
    let (body, tail) = b.split_at(b.len() - 3);
    tail == b"ERA" && body.chunks(3).all(|c| c == b"ERC")
}

#[derive(Debug, Default)]
struct TraceLog {
    current: String,
    passes: Vec<String>,
}

pub struct SharedRegion {
    key: ChannelKey,
    capacity: AtomicUsize,
    slots: [Mutex<SlotData>; 3],
    rotations: AtomicU64,
    op: AtomicU8,
    to_daemon: (Sender<ControlMessage>, Receiver<ControlMessage>),
    to_agent: (Sender<ControlMessage>, Receiver<ControlMessage>),
    trace: Mutex<TraceLog>,
    record_traces: bool,
    copies: AtomicU64,
}

impl fmt::Debug for SharedRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SharedRegion")
            .field("key", &self.key)
            .field("capacity", &self.capacity())
            .field("rotation", &self.rotation())
            .finish_non_exhaustive()
    }
}

impl SharedRegion {
    pub fn new(key: ChannelKey, capacity: usize, record_traces: bool) -> Self {
        SharedRegion {
            key,
            capacity: AtomicUsize::new(capacity),
            slots: Default::default(),
            rotations: AtomicU64::new(0),
            op: AtomicU8::new(OpKind::Gen as u8),
            to_daemon: channel::unbounded(),
            to_agent: channel::unbounded(),
            trace: Mutex::new(TraceLog::default()),
            record_traces,
            copies: AtomicU64::new(0),
        }
    }

    pub fn key(&self) -> ChannelKey {
        self.key
    }

    pub fn capacity(&self) -> usize {
        self.capacity.load(Ordering::Acquire)
    }

    /// Resizes all three slots. Only legal between passes.
    pub fn set_capacity(&self, capacity: usize) {
        self.capacity.store(capacity, Ordering::Release);
    }

    pub fn rotation(&self) -> RotationState {
        RotationState {
            cycle_count: self.rotations.load(Ordering::Acquire),
        }
    }

    pub(crate) fn advance_rotation(&self) {
        self.rotations.fetch_add(1, Ordering::AcqRel);
    }

    pub fn op(&self) -> u8 {
        self.op.load(Ordering::Acquire)
    }

    pub fn set_op(&self, op: u8) {
        self.op.store(op, Ordering::Release);
    }

    /// Locks the buffer currently holding `role`. A held lock means the other
    /// endpoint is touching the same buffer, which the protocol forbids.
    pub fn slot(&self, role: Role) -> Result<MutexGuard<'_, SlotData>> {
        let idx = self.rotation().buffer_of(role);
        self.slot_at(idx)
    }

    pub fn slot_at(&self, buffer: usize) -> Result<MutexGuard<'_, SlotData>> {
        match self.slots[buffer].try_lock() {
            Ok(g) => Ok(g),
            Err(TryLockError::WouldBlock) => Err(Error::Protocol(format!(
                "region {}: buffer {buffer} accessed concurrently by both endpoints",
                self.key
            ))),
            Err(TryLockError::Poisoned(_)) => Err(Error::Protocol(format!(
                "region {}: buffer {buffer} poisoned",
                self.key
            ))),
        }
    }

    /// Checksums of the three buffers in buffer order.
    pub fn checksums(&self) -> Result<[u64; 3]> {
        Ok([
            self.slot_at(0)?.checksum(),
            self.slot_at(1)?.checksum(),
            self.slot_at(2)?.checksum(),
        ])
    }

    /// Records that block content was duplicated across the region boundary.
    pub fn note_copy(&self) {
        self.copies.fetch_add(1, Ordering::AcqRel);
    }

    pub fn copies(&self) -> u64 {
        self.copies.load(Ordering::Acquire)
    }

    fn log(&self, kind: ControlKind) {
        if let Ok(mut t) = self.trace.lock() {
            t.current.push(kind.code());
        }
    }

    pub fn send_to_daemon(&self, msg: ControlMessage) -> Result<()> {
        self.log(msg.kind);
        self.to_daemon
            .0
            .send(msg)
            .map_err(|_| Error::Protocol(format!("region {}: daemon endpoint closed", self.key)))
    }

    pub fn send_to_agent(&self, msg: ControlMessage) -> Result<()> {
        self.log(msg.kind);
        self.to_agent
            .0
            .send(msg)
            .map_err(|_| Error::Protocol(format!("region {}: agent endpoint closed", self.key)))
    }

    pub fn recv_at_daemon(&self) -> Result<ControlMessage> {
        self.to_daemon
            .1
            .recv()
            .map_err(|_| Error::Protocol(format!("region {}: agent endpoint closed", self.key)))
    }

    pub fn recv_at_agent(&self, timeout: Duration) -> Result<ControlMessage> {
        match self.to_agent.1.recv_timeout(timeout) {
            Ok(m) => Ok(m),
            Err(RecvTimeoutError::Timeout) => Err(Error::Protocol(format!(
                "region {}: daemon did not answer within {timeout:?}",
                self.key
            ))),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Protocol(format!(
                "region {}: daemon endpoint closed",
                self.key
            ))),
        }
    }

    /// Closes the current pass trace and returns it.
    pub fn finish_pass(&self) -> String {
        let mut t = self.trace.lock().unwrap_or_else(|p| p.into_inner());
        let pass = std::mem::take(&mut t.current);
        if self.record_traces {
            t.passes.push(pass.clone());
        }
        pass
    }

    /// Pass traces recorded so far (only when recording is enabled).
    pub fn traces(&self) -> Vec<String> {
        self.trace
            .lock()
            .map(|t| t.passes.clone())
            .unwrap_or_default()
    }

    /// Control messages logged since the last finished pass.
    pub fn pending_trace(&self) -> String {
        self.trace
            .lock()
            .map(|t| t.current.clone())
            .unwrap_or_default()
    }
}

/// Allocates channel keys and binds them to regions.
#[derive(Debug, Default)]
pub struct ChannelRegistry {
    next: AtomicU32,
    bound: Mutex<HashMap<ChannelKey, Arc<SharedRegion>>>,
}

impl ChannelRegistry {
    pub fn new() -> Arc<Self> {
        Arc::new(ChannelRegistry::default())
    }

    pub fn create(&self, capacity: usize, record_traces: bool) -> Arc<SharedRegion> {
        let key = ChannelKey(self.next.fetch_add(1, Ordering::AcqRel) + 1);
        let region = Arc::new(SharedRegion::new(key, capacity, record_traces));
        self.bound
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(key, region.clone());
        region
    }

    pub fn lookup(&self, key: ChannelKey) -> Result<Arc<SharedRegion>> {
        self.bound
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(&key)
            .cloned()
            .ok_or(Error::UnboundChannel(key))
    }

    pub fn unbind(&self, key: ChannelKey) -> Option<Arc<SharedRegion>> {
        self.bound
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(&key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;
    use crate::pipeline::rotate;

    fn block(n: u64) -> SlotData {
        SlotData::Triplets(
            (0..n)
                .map(|i| EdgeTriplet {
                    edge: Edge::new(0, i, 1.0),
                    src_attr: AttributeValue::Label(0),
                    dst_attr: AttributeValue::Label(i),
                })
                .collect(),
        )
    }

    #[test]
    fn rotation_moves_labels_not_contents() {
        let r = SharedRegion::new(ChannelKey(1), 8, false);
        *r.slot_at(0).unwrap() = block(1);
        *r.slot_at(1).unwrap() = block(2);
        *r.slot_at(2).unwrap() = block(3);
        let before = r.checksums().unwrap();
        assert_eq!(r.slot(Role::New).unwrap().len(), 1);

        rotate(&r);
        assert_eq!(r.checksums().unwrap(), before);
        assert_eq!(r.slot(Role::Compute).unwrap().len(), 1);
        assert_eq!(r.slot(Role::Upload).unwrap().len(), 2);
        assert_eq!(r.slot(Role::New).unwrap().len(), 3);

        rotate(&r);
        rotate(&r);
        assert_eq!(r.slot(Role::New).unwrap().len(), 1);
        assert_eq!(r.checksums().unwrap(), before);
    }

    #[test]
    fn concurrent_slot_access_is_a_protocol_error() {
        let r = SharedRegion::new(ChannelKey(1), 8, false);
        let _held = r.slot(Role::Compute).unwrap();
        assert!(matches!(r.slot(Role::Compute), Err(Error::Protocol(_))));
        assert!(r.slot(Role::New).is_ok());
    }

    #[test]
    fn registry_binds_distinct_keys() {
        let reg = ChannelRegistry::new();
        let a = reg.create(4, false);
        let b = reg.create(4, false);
        assert_ne!(a.key(), b.key());
        assert!(Arc::ptr_eq(&reg.lookup(a.key()).unwrap(), &a));
        assert!(matches!(reg.lookup(ChannelKey(999)), Err(Error::UnboundChannel(_))));
        reg.unbind(a.key());
        assert!(reg.lookup(a.key()).is_err());
    }

    #[test]
    fn op_codes_round_trip() {
        for op in [OpKind::Gen, OpKind::Merge, OpKind::Apply] {
            assert_eq!(OpKind::try_from(op as u8).unwrap(), op);
        }
        assert!(matches!(OpKind::try_from(7), Err(Error::UnknownOp(7))));
    }

    #[test]
    fn trace_grammar() {
        for ok in ["ERA", "ERCERA", "ERCERCERCERA"] {
            assert!(pass_trace_conforms(ok), "{ok}");
        }
        for bad in ["", "ER", "ERCER", "ERAERA", "ERCRA", "EERA", "ERCERC"] {
            assert!(!pass_trace_conforms(bad), "{bad}");
        }
    }

    #[test]
    fn checksum_sees_content_changes() {
        let a = block(3);
        let mut b = block(3);
        assert_eq!(a.checksum(), b.checksum());
        if let SlotData::Triplets(v) = &mut b {
            v[2].edge.weight = 2.0;
        }
        assert_ne!(a.checksum(), b.checksum());
        assert_ne!(SlotData::Empty.checksum(), SlotData::Messages(vec![]).checksum());
    }
}
