//! Device models outside the mitigation boundary.
//!
//! The backend services each request of a forwarded bundle independently and
//! reports completions one by one. It also replays externally timed inbound
//! traffic, which the mitigator polls slot by slot.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guest::program::IoDir;
use crate::time::{ByteCost, RealTime};
use crate::virtio::{DataBuf, QueueId, RequestBundle, ResponseEntry, ResponseSource, Status, Tag};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Disk,
    Network,
    Console,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceModel {
    pub per_request: RealTime,
    pub per_byte: ByteCost,
    /// Upper bound of a uniform draw added to every service time.
    #[serde(default)]
    pub jitter: RealTime,
}

impl DeviceKind {
    pub fn default_service(self) -> ServiceModel {
        let (per_request, per_byte) = match self {
            DeviceKind::Disk => (RealTime::from_micros(100), ByteCost::from_nanos(10)),
            // 1 Gbps serialization plus one-way propagation.
            DeviceKind::Network => (RealTime::from_micros(50), ByteCost::from_nanos(8)),
            DeviceKind::Console => (RealTime::from_micros(1), ByteCost::ZERO),
        };
        ServiceModel {
            per_request,
            per_byte,
            jitter: RealTime::ZERO,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InboundArrival {
    pub time: RealTime,
    pub size: u64,
    /// Queue name or index, resolved against the guest's queues.
    pub queue: String,
    pub payload: Option<Arc<[u8]>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceModel {
    pub kind: DeviceKind,
    pub service: ServiceModel,
}

impl DeviceModel {
    pub fn new(kind: DeviceKind) -> Self {
        DeviceModel {
            kind,
            service: kind.default_service(),
        }
    }

    pub fn service_time(&self, size: u64) -> RealTime {
        self.service.per_request + self.service.per_byte.cost(size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackendResponse {
    pub queue: QueueId,
    pub tag: Tag,
    pub status: Status,
    pub data: DataBuf,
    pub completed_at: RealTime,
}

impl BackendResponse {
    pub fn entry(&self) -> ResponseEntry {
        ResponseEntry {
            source: ResponseSource::Completion(self.tag),
            status: self.status,
            data: self.data.clone(),
        }
    }
}

/// Backend serving one guest: one device model per queue.
#[derive(Debug)]
pub struct Backend {
    devices: Vec<DeviceModel>,
    inbound: Vec<(QueueId, InboundArrival)>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Backend {
    /// `inbound` must be sorted by time; queues are already resolved.
    pub fn new(devices: Vec<DeviceModel>, inbound: Vec<(QueueId, InboundArrival)>, seed: u64) -> Result<Self> {
        if inbound.windows(2).any(|w| w[0].1.time > w[1].1.time) {
            return Err(Error::config("inbound schedule is not sorted by time"));
        }
        if let Some((q, _)) = inbound.iter().find(|(q, _)| q.0 >= devices.len()) {
            return Err(Error::config(format!("inbound traffic for missing queue {}", q.0)));
        }
        Ok(Backend {
            devices,
            inbound,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn devices(&self) -> &[DeviceModel] {
        &self.devices
    }

    /// Starts every request of `bundle` at `at`. Requests are serviced
    /// independently; completions are returned in submission order.
    pub fn submit(&mut self, bundle: &RequestBundle, at: RealTime) -> Vec<BackendResponse> {
        let device = &self.devices[bundle.queue.0];
        bundle
            .requests
            .iter()
            .map(|req| {
                let mut done = at + device.service_time(req.size);
                if device.service.jitter > RealTime::ZERO {
                    done += RealTime::from_nanos(self.rng.random_range(0..=device.service.jitter.as_nanos()));
                }
                let data = match req.dir {
                    IoDir::Read => DataBuf::zeroed(req.size),
                    IoDir::Write => DataBuf::zeroed(0),
                };
                BackendResponse {
                    queue: bundle.queue,
                    tag: req.tag,
                    status: Status::Ok,
                    data,
                    completed_at: done,
                }
            })
            .collect()
    }

    /// Arrivals with `from < time <= to`, numbered in arrival order. Windows
    /// must be consecutive; the first one also takes arrivals at or before
    /// its start.
    pub fn inbound_poll(&mut self, from: RealTime, to: RealTime) -> Vec<(QueueId, ResponseEntry)> {
        debug_assert!(from <= to);
        let mut out = Vec::new();
        while let Some((queue, a)) = self.inbound.get(self.cursor) {
            if a.time > to {
                break;
            }
            let data = match &a.payload {
                Some(p) => DataBuf {
                    len: a.size,
                    payload: Some(p.clone()),
                },
                None => DataBuf::zeroed(a.size),
            };
            out.push((
                *queue,
                ResponseEntry {
                    source: ResponseSource::Inbound(self.cursor as u64),
                    status: Status::Ok,
                    data,
                },
            ));
            self.cursor += 1;
        }
        out
    }
}

#[derive(Deserialize)]
struct CsvRow {
    time_ns: u64,
    size_bytes: u64,
    queue: String,
    #[serde(default)]
    payload_hex: String,
}

/// Reads an inbound schedule `time_ns,size_bytes,queue,payload_hex`.
pub fn load_inbound_csv(path: &Path) -> Result<Vec<InboundArrival>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_inbound_csv(file, &path.display().to_string())
}

pub fn parse_inbound_csv<R: std::io::Read>(reader: R, origin: &str) -> Result<Vec<InboundArrival>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<InboundArrival> = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::config(format!("{origin}:{line}: {e}")))?;
        let payload = if row.payload_hex.is_empty() {
            None
        } else {
            let bytes = hex::decode(&row.payload_hex)
                .map_err(|e| Error::config(format!("{origin}:{line}: bad payload_hex: {e}")))?;
            if bytes.len() as u64 > row.size_bytes {
                return Err(Error::config(format!(
                    "{origin}:{line}: payload is longer than size_bytes"
                )));
            }
            Some(Arc::from(bytes))
        };
        let time = RealTime::from_nanos(row.time_ns);
        if out.last().is_some_and(|prev| prev.time > time) {
            return Err(Error::config(format!("{origin}:{line}: rows must be sorted by time_ns")));
        }
        out.push(InboundArrival {
            time,
            size: row.size_bytes,
            queue: row.queue,
            payload,
        });
    }
    Ok(out)
}
