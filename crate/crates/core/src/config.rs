//! Scenario configuration files.
//!
//! Configurations are TOML documents. Durations, rates and per-byte costs
//! are strings with unit suffixes (`"1ms"`, `"3.2G"`, `"500ps"`). Program
//! and inbound-schedule paths are relative to the configuration file. See
//! `docs/config.md` for the full key list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{load_inbound_csv, DeviceKind, DeviceModel, ServiceModel};
use crate::error::{Error, Result};
use crate::guest::cost::{CostModel, CountingKind, CountingMode};
use crate::guest::program::GuestProgram;
use crate::guest::vmm::VmmConfig;
use crate::host::{GuestSpec, RecordOptions, Scenario};
use crate::mitigator::SlotGrid;
use crate::time::{ByteCost, Rate, RealTime};
use crate::virtio::{QueueId, DEFAULT_QUEUE_CAPACITY};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub interval: RealTime,
    pub vcpu_speed: Rate,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub phase: RealTime,
    /// One slot phase per queue. Leaving queues unsynchronized is a
    /// misconfiguration; this exists to demonstrate its effect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_phases: Option<Vec<RealTime>>,
}

fn is_zero(t: &RealTime) -> bool {
    *t == RealTime::ZERO
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueConfig {
    /// Defaults from the queue name when it is `disk`, `net`, `network` or
    /// `console`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<DeviceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_request: Option<RealTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_byte: Option<ByteCost>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<RealTime>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuestConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<String>,
    /// Inline program text, instead of `program`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// `hex:<digits>`, `bits:<0/1 digits>` or plain text.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
    /// Timer device period in guest instructions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timer_period: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inbound: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub queues: BTreeMap<String, QueueConfig>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordConfig {
    #[serde(default)]
    pub event_log: bool,
    #[serde(default = "yes")]
    pub boundary_log: bool,
    #[serde(default)]
    pub segments: bool,
    #[serde(default = "yes")]
    pub latencies: bool,
}

fn yes() -> bool {
    true
}

impl Default for RecordConfig {
    fn default() -> Self {
        RecordConfig {
            event_log: false,
            boundary_log: true,
            segments: false,
            latencies: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Also report block entropy over windows of this many slots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_entropy: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intervals: Vec<RealTime>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vcpu_speeds: Vec<Rate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<CountingKind>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Covert,
    Probe,
    Misconfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Covert message as `0`/`1` digits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Length of a random message, used when `message` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_bits: Option<usize>,
    #[serde(default = "one")]
    pub frame: u64,
    /// Segment loads in instructions. Default to 0.3 and 1.5 intervals of
    /// host time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_meet: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_miss: Option<u64>,
}

fn one() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    /// Required whenever any jitter is configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub horizon: RealTime,
    pub domain: DomainConfig,
    #[serde(default)]
    pub counting: CountingMode,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub record: RecordConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub guests: Vec<GuestConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
}

/// A parsed configuration and the directory its relative paths refer to.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ScenarioConfig,
    pub base_dir: PathBuf,
}

pub fn read_document(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document(&text, &path.display().to_string())
}

pub fn parse_document(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config(format!("{origin}: {e}")))
}

/// Applies `key=value` overrides. Keys are dotted paths; a numeric segment
/// indexes an array (`guests.0.timer_period=500`). Values are read as TOML
/// when possible and as a bare string otherwise.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
        let value = parse_override_value(raw.trim());
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(Error::config(format!("override key {key:?} is malformed")));
        }
        set_path(doc, &path, value).map_err(|msg| Error::config(format!("override {key:?}: {msg}")))?;
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    let (head, rest) = path.split_first().expect("non-empty path");
    if rest.is_empty() {
        table.insert((*head).to_string(), value);
        return Ok(());
    }
    let entry = table
        .entry((*head).to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    set_value(entry, rest, value)
}

fn set_value(node: &mut toml::Value, path: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    match node {
        toml::Value::Table(t) => set_path(t, path, value),
        toml::Value::Array(items) => {
            let (head, rest) = path.split_first().expect("non-empty path");
            let i: usize = head.parse().map_err(|_| format!("{head:?} is not an array index"))?;
            let len = items.len();
            let item = items
                .get_mut(i)
                .ok_or_else(|| format!("index {i} out of range (length {len})"))?;
            if rest.is_empty() {
                *item = value;
                Ok(())
            } else {
                set_value(item, rest, value)
            }
        }
        _ => Err(format!("cannot descend into a scalar at {:?}", path[0])),
    }
}

impl ScenarioConfig {
    pub fn from_document(doc: toml::Table, origin: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            ScenarioConfig::deserialize(doc).map_err(|e| Error::config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        Self::from_document(parse_document(text, origin)?, origin)
    }

    /// Reads `path`, applies overrides and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Loaded> {
        let mut doc = read_document(path)?;
        apply_overrides(&mut doc, overrides)?;
        let config = Self::from_document(doc, &path.display().to_string())?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Loaded { config, base_dir })
    }

    /// Canonical TOML text. Parsing it again gives an equal configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }

    /// Instructions per segment.
    pub fn budget(&self) -> Result<u64> {
        budget(self.domain.interval, self.domain.vcpu_speed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain.interval == RealTime::ZERO {
            return Err(Error::config("domain.interval must be positive"));
        }
        if self.domain.vcpu_speed.get() == 0 {
            return Err(Error::config("domain.vcpu_speed must be positive"));
        }
        if self.horizon == RealTime::ZERO {
            return Err(Error::config("horizon must be positive"));
        }
        self.budget()?;
        self.counting.validate()?;
        self.cost.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for g in &self.guests {
            if !names.insert(g.name.as_str()) {
                return Err(Error::config(format!("duplicate guest name {:?}", g.name)));
            }
            if g.program.is_some() == g.source.is_some() {
                return Err(Error::config(format!(
                    "guest {:?}: set exactly one of `program` and `source`",
                    g.name
                )));
            }
        }
        let jitter = self.cost.exec_jitter > RealTime::ZERO
            || self
                .guests
                .iter()
                .flat_map(|g| g.queues.values())
                .any(|q| q.jitter.is_some_and(|j| j > RealTime::ZERO));
        if jitter && self.seed.is_none() {
            return Err(Error::config("jitter is configured, so an explicit seed is required"));
        }
        if let Some(a) = &self.attack {
            if a.frame == 0 {
                return Err(Error::config("attack.frame must be at least 1"));
            }
            if let Some(m) = &a.message {
                if m.is_empty() || !m.chars().all(|c| c == '0' || c == '1') {
                    return Err(Error::config("attack.message must be a non-empty string of 0 and 1"));
                }
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn record_options(&self) -> RecordOptions {
        RecordOptions {
            event_log: self.record.event_log,
            boundary_log: self.record.boundary_log,
            segments: self.record.segments,
            latencies: self.record.latencies,
        }
    }

    /// Loads programs and inbound schedules and builds a runnable scenario.
    pub fn build(&self, base_dir: &Path) -> Result<Scenario> {
        if self.guests.is_empty() {
            return Err(Error::config("configuration has no [[guests]]"));
        }
        let budget = self.budget()?;
        let grid = SlotGrid::new(self.domain.interval, self.domain.phase)?;
        let seed = self.seed();
        let guests = self
            .guests
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let program = load_program(g, base_dir)?;
                let names = program.queue_names().to_vec();
                let mut devices = Vec::with_capacity(names.len());
                let mut capacity = Vec::with_capacity(names.len());
                for name in &names {
                    let q = g.queues.get(name).cloned().unwrap_or_default();
                    let kind = match q.device.or_else(|| kind_from_name(name)) {
                        Some(k) => k,
                        None => {
                            return Err(Error::config(format!(
                                "guest {:?}: queue {name:?} needs a [guests.queues.{name}] device",
                                g.name
                            )))
                        }
                    };
                    let d = kind.default_service();
                    devices.push(DeviceModel {
                        kind,
                        service: ServiceModel {
                            per_request: q.per_request.unwrap_or(d.per_request),
                            per_byte: q.per_byte.unwrap_or(d.per_byte),
                            jitter: q.jitter.unwrap_or(d.jitter),
                        },
                    });
                    capacity.push(q.capacity.unwrap_or(DEFAULT_QUEUE_CAPACITY));
                }
                if let Some(unused) = g.queues.keys().find(|k| !names.contains(k)) {
                    return Err(Error::config(format!(
                        "guest {:?}: queue {unused:?} is configured but the program never uses it",
                        g.name
                    )));
                }
                let inbound = match &g.inbound {
                    None => Vec::new(),
                    Some(p) => load_inbound_csv(&base_dir.join(p))?
                        .into_iter()
                        .map(|a| {
                            let q = resolve_queue(&a.queue, &names).ok_or_else(|| {
                                Error::config(format!(
                                    "{p}: unknown queue {:?} for guest {:?}",
                                    a.queue, g.name
                                ))
                            })?;
                            Ok((q, a))
                        })
                        .collect::<Result<Vec<_>>>()?,
                };
                let guest_seed = seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                Ok(GuestSpec {
                    name: g.name.clone(),
                    program: Arc::new(program),
                    vmm: VmmConfig {
                        budget,
                        timer_period: g.timer_period,
                        counting: self.counting,
                        cost: self.cost,
                        seed: guest_seed,
                        queue_capacity: capacity,
                    },
                    devices,
                    inbound,
                    backend_seed: guest_seed.rotate_left(17),
                    grid,
                    queue_phases: self.domain.queue_phases.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scenario {
            guests,
            horizon: self.horizon,
            record: self.record_options(),
        })
    }

    /// The cartesian product of the sweep axes, in axis order. Missing axes
    /// keep the base value.
    pub fn sweep_points(&self) -> Result<Vec<(String, ScenarioConfig)>> {
        let axes = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::config("configuration has no [sweep] table"))?;
        let intervals = if axes.intervals.is_empty() {
            vec![self.domain.interval]
        } else {
            axes.intervals.clone()
        };
        let speeds = if axes.vcpu_speeds.is_empty() {
            vec![self.domain.vcpu_speed]
        } else {
            axes.vcpu_speeds.clone()
        };
        let modes = if axes.modes.is_empty() {
            vec![self.counting.mode]
        } else {
            axes.modes.clone()
        };
        let mut points = Vec::new();
        for &interval in &intervals {
            for &speed in &speeds {
                for &mode in &modes {
                    let mut c = self.clone();
                    c.sweep = None;
                    c.domain.interval = interval;
                    c.domain.vcpu_speed = speed;
                    c.counting.mode = mode;
                    let mode_name = match mode {
                        CountingKind::Precise => "precise",
                        CountingKind::Coarse => "coarse",
                    };
                    let label = format!("i{interval}_v{speed}_{mode_name}");
                    c.name = if self.name.is_empty() {
                        label.clone()
                    } else {
                        format!("{}-{label}", self.name)
                    };
                    points.push((label, c));
                }
            }
        }
        Ok(points)
    }
}

pub fn budget(interval: RealTime, vcpu_speed: Rate) -> Result<u64> {
    vcpu_speed.count_in(interval).ok_or_else(|| {
        Error::config(format!(
            "interval {interval} at vcpu_speed {vcpu_speed} gives a fractional segment budget \
             ({} × {} / 10^9 is not an integer)",
            interval.as_nanos(),
            vcpu_speed.get()
        ))
    })
}

fn kind_from_name(name: &str) -> Option<DeviceKind> {
    match name {
        "disk" => Some(DeviceKind::Disk),
        "net" | "network" => Some(DeviceKind::Network),
        "console" => Some(DeviceKind::Console),
        _ => None,
    }
}

fn resolve_queue(name: &str, names: &[String]) -> Option<QueueId> {
    if let Some(i) = names.iter().position(|n| n == name) {
        return Some(QueueId(i));
    }
    name.parse::<usize>().ok().filter(|&i| i < names.len()).map(QueueId)
}

fn load_program(g: &GuestConfig, base_dir: &Path) -> Result<GuestProgram> {
    let mut program = match (&g.program, &g.source) {
        (Some(path), None) => {
            let full = base_dir.join(path);
            let text = std::fs::read_to_string(&full).map_err(|e| Error::io(&full, e))?;
            GuestProgram::parse_named(&text, path)?
        }
        (None, Some(src)) => GuestProgram::parse_named(src, &format!("guest {:?}", g.name))?,
        _ => {
            return Err(Error::config(format!(
                "guest {:?}: set exactly one of `program` and `source`",
                g.name
            )))
        }
    };
    for (k, v) in &g.params {
        program.set_param(k.clone(), parse_param(v).map_err(|m| Error::config(format!("param {k:?}: {m}")))?);
    }
    program.check_params()?;
    Ok(program)
}

/// `hex:..`, `bits:..` (MSB first, zero padded) or literal text.
pub fn parse_param(v: &str) -> std::result::Result<Vec<u8>, String> {
    if let Some(h) = v.strip_prefix("hex:") {
        return hex::decode(h).map_err(|e| e.to_string());
    }
    if let Some(b) = v.strip_prefix("bits:") {
        let mut out = vec![0u8; b.len().div_ceil(8)];
        for (i, c) in b.chars().enumerate() {
            match c {
                '0' => {}
                '1' => out[i / 8] |= 0x80 >> (i % 8),
                other => return Err(format!("{other:?} is not a bit")),
            }
        }
        return Ok(out);
    }
    Ok(v.as_bytes().to_vec())
}
