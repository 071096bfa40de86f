//! Guest-side I/O queues inside the mitigation boundary.
//!
//! Requests are taken from the guest immediately but held in a per-queue
//! mitigation buffer until the artificial period ends; then the whole period's
//! requests leave as one [`RequestBundle`]. Responses come back only as
//! [`ResponseBundle`]s, which also carry the mitigator's elapsed-slot count.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::guest::program::IoDir;

pub const DEFAULT_QUEUE_CAPACITY: u32 = 256;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct QueueId(pub usize);

/// Unique per guest run.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Tag(pub u64);

/// Shared data buffer attached to write requests.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct BufferId(pub u64);

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct IoRequest {
    pub tag: Tag,
    pub queue: QueueId,
    pub dir: IoDir,
    pub size: u64,
    /// Artificial period in which the issuing segment started.
    pub issued_period: u64,
    pub data_ref: Option<BufferId>,
    /// Tag written in the guest program, echoed back in observations.
    pub user_tag: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RequestBundle {
    pub period: u64,
    pub queue: QueueId,
    pub requests: Vec<IoRequest>,
}

impl RequestBundle {
    pub fn empty(period: u64, queue: QueueId) -> Self {
        RequestBundle {
            period,
            queue,
            requests: Vec::new(),
        }
    }

    /// Payload bytes leaving the boundary (write data).
    pub fn bytes(&self) -> u64 {
        self.requests
            .iter()
            .filter(|r| r.dir == IoDir::Write)
            .map(|r| r.size)
            .sum()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DataBuf {
    pub len: u64,
    /// Explicit content, when the source provides one (inbound packets).
    /// Absent means `len` zero bytes.
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "ser_hex")]
    pub payload: Option<Arc<[u8]>>,
}

fn ser_hex<S: serde::Serializer>(p: &Option<Arc<[u8]>>, s: S) -> Result<S::Ok, S::Error> {
    match p {
        Some(bytes) => s.serialize_str(&hex::encode(bytes)),
        None => s.serialize_none(),
    }
}

impl DataBuf {
    pub fn zeroed(len: u64) -> Self {
        DataBuf { len, payload: None }
    }

    pub fn with_payload(payload: Arc<[u8]>) -> Self {
        DataBuf {
            len: payload.len() as u64,
            payload: Some(payload),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSource {
    /// Completes an outstanding request.
    Completion(Tag),
    /// Externally timed traffic, numbered in arrival order.
    Inbound(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ResponseEntry {
    pub source: ResponseSource,
    pub status: Status,
    pub data: DataBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ResponseBundle {
    pub slot: u64,
    pub queue: QueueId,
    pub responses: Vec<ResponseEntry>,
    /// Real slots since this guest's previous successful exchange.
    pub elapsed_slots: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct DescriptorPool {
    capacity: u32,
    outstanding: u32,
}

impl DescriptorPool {
    pub fn new(capacity: u32) -> Self {
        DescriptorPool {
            capacity,
            outstanding: 0,
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn outstanding(&self) -> u32 {
        self.outstanding
    }

    pub fn try_acquire(&mut self) -> bool {
        if self.outstanding < self.capacity {
            self.outstanding += 1;
            true
        } else {
            false
        }
    }

    fn release(&mut self) {
        debug_assert!(self.outstanding > 0);
        self.outstanding -= 1;
    }
}

#[derive(Clone, Debug)]
struct Outstanding {
    dir: IoDir,
    user_tag: u32,
}

/// What the guest sees for one delivered response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Delivered {
    pub queue: QueueId,
    pub source: ResponseSource,
    pub user_tag: Option<u32>,
    pub dir: Option<IoDir>,
    /// Bytes the hypervisor copies into guest memory.
    pub copied: u64,
    pub status: Status,
    pub data: DataBuf,
}

#[derive(Debug)]
pub struct VirtioQueue {
    id: QueueId,
    name: String,
    pool: DescriptorPool,
    buffered: Vec<IoRequest>,
    outstanding: BTreeMap<Tag, Outstanding>,
}

impl VirtioQueue {
    pub fn new(id: QueueId, name: impl Into<String>, capacity: u32) -> Self {
        VirtioQueue {
            id,
            name: name.into(),
            pool: DescriptorPool::new(capacity),
            buffered: Vec::new(),
            outstanding: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> QueueId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pool(&self) -> &DescriptorPool {
        &self.pool
    }

    pub fn buffered(&self) -> &[IoRequest] {
        &self.buffered
    }

    /// Buffers `req` for the current period if a descriptor is free.
    pub fn enqueue_request(&mut self, req: IoRequest) -> bool {
        if !self.pool.try_acquire() {
            return false;
        }
        self.outstanding.insert(
            req.tag,
            Outstanding {
                dir: req.dir,
                user_tag: req.user_tag,
            },
        );
        self.buffered.push(req);
        true
    }

    /// Moves everything buffered into one bundle, in issue order. Produces an
    /// empty bundle when nothing was issued.
    pub fn seal_period(&mut self, period: u64) -> RequestBundle {
        RequestBundle {
            period,
            queue: self.id,
            requests: std::mem::take(&mut self.buffered),
        }
    }

    /// Unpacks a response bundle, freeing one descriptor per completion.
    pub fn accept_bundle(&mut self, bundle: &ResponseBundle) -> Result<(u64, Vec<Delivered>)> {
        if bundle.queue != self.id {
            return Err(Error::scenario(format!(
                "queue {} received a bundle addressed to queue {}",
                self.id.0, bundle.queue.0
            )));
        }
        if bundle.elapsed_slots == 0 {
            return Err(Error::scenario("response bundle with elapsed_slots = 0"));
        }
        let mut delivered = Vec::with_capacity(bundle.responses.len());
        for entry in &bundle.responses {
            let (user_tag, dir, copied) = match &entry.source {
                ResponseSource::Completion(tag) => {
                    let req = self.outstanding.remove(tag).ok_or_else(|| {
                        Error::scenario(format!(
                            "queue {:?} received a response for unknown tag {}",
                            self.name, tag.0
                        ))
                    })?;
                    self.pool.release();
                    let copied = match req.dir {
                        IoDir::Read => entry.data.len,
                        IoDir::Write => 0,
                    };
                    (Some(req.user_tag), Some(req.dir), copied)
                }
                ResponseSource::Inbound(_) => (None, None, entry.data.len),
            };
            delivered.push(Delivered {
                queue: self.id,
                source: entry.source.clone(),
                user_tag,
                dir,
                copied,
                status: entry.status,
                data: entry.data.clone(),
            });
        }
        Ok((bundle.elapsed_slots, delivered))
    }
}

/// All virtio queues of one guest. They share one period-end alarm, so they
/// seal at the same artificial boundaries.
#[derive(Debug)]
pub struct VirtioDevice {
    queues: Vec<VirtioQueue>,
    next_tag: u64,
    next_buffer: u64,
}

impl VirtioDevice {
    pub fn new(queues: impl IntoIterator<Item = (String, u32)>) -> Self {
        let queues = queues
            .into_iter()
            .enumerate()
            .map(|(i, (name, cap))| VirtioQueue::new(QueueId(i), name, cap))
            .collect();
        VirtioDevice {
            queues,
            next_tag: 0,
            next_buffer: 0,
        }
    }

    pub fn queues(&self) -> &[VirtioQueue] {
        &self.queues
    }

    pub fn queue(&self, id: QueueId) -> &VirtioQueue {
        &self.queues[id.0]
    }

    /// Builds a request and tries to enqueue it. Tags are only consumed by
    /// accepted requests.
    pub fn submit(&mut self, queue: QueueId, dir: IoDir, size: u64, period: u64, user_tag: u32) -> Option<IoRequest> {
        let data_ref = (dir == IoDir::Write).then_some(BufferId(self.next_buffer));
        let req = IoRequest {
            tag: Tag(self.next_tag),
            queue,
            dir,
            size,
            issued_period: period,
            data_ref,
            user_tag,
        };
        if self.queues[queue.0].enqueue_request(req.clone()) {
            self.next_tag += 1;
            if data_ref.is_some() {
                self.next_buffer += 1;
            }
            Some(req)
        } else {
            None
        }
    }

    pub fn seal_all(&mut self, period: u64) -> Vec<RequestBundle> {
        self.queues.iter_mut().map(|q| q.seal_period(period)).collect()
    }

    /// Accepts one bundle per queue (or a subset). All carry the same piggyback
    /// because the mitigators are synchronized; a disagreement is an error.
    pub fn accept_bundles(&mut self, bundles: &[ResponseBundle]) -> Result<(Option<u64>, Vec<Delivered>)> {
        let mut elapsed = None;
        let mut delivered = Vec::new();
        for b in bundles {
            let queue = self
                .queues
                .get_mut(b.queue.0)
                .ok_or_else(|| Error::scenario(format!("no queue {}", b.queue.0)))?;
            let (e, mut d) = queue.accept_bundle(b)?;
            match elapsed {
                None => elapsed = Some(e),
                Some(prev) if prev != e => {
                    return Err(Error::scenario(format!(
                        "queues disagree on elapsed slots ({prev} vs {e})"
                    )))
                }
                Some(_) => {}
            }
            delivered.append(&mut d);
        }
        Ok((elapsed, delivered))
    }
}
