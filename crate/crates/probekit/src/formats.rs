//! Configuration files: node lists, event schedules, resource profiles and
//! simulated topologies.
//!
//! Node and schedule files are line oriented, `#` starts a comment. Profiles
//! and topologies are TOML.

use std::collections::HashSet;
use std::time::Duration;

use probekit_core::budget::ResourceProfile;
use probekit_core::controller::{EventSchedule, NodeDescriptor, ScheduledEvent};
use probekit_core::sim::SimTopology;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn at(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Line {
        line,
        message: message.into(),
    }
}

/// Non-blank lines with comments stripped, numbered from 1.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

/// Parses `node_id endpoint location...` lines. The location may contain
/// spaces.
pub fn load_node_config(text: &str) -> Result<Vec<NodeDescriptor>, ConfigError> {
    let mut seen = HashSet::new();
    let mut nodes = Vec::new();
    for (n, line) in content_lines(text) {
        let mut fields = line.split_whitespace();
        let (Some(id), Some(endpoint)) = (fields.next(), fields.next()) else {
            return Err(at(n, "expected `node_id endpoint location`"));
        };
        let location = fields.collect::<Vec<_>>().join(" ");
        if location.is_empty() {
            return Err(at(n, "missing location"));
        }
        if !seen.insert(id.to_owned()) {
            return Err(at(n, format!("duplicate node id `{id}`")));
        }
        nodes.push(NodeDescriptor::new(id, endpoint, location));
    }
    if nodes.is_empty() {
        return Err(ConfigError::Invalid("node file lists no nodes".into()));
    }
    Ok(nodes)
}

/// Parses `1.5`, `1.5s`, `250ms`.
pub fn parse_duration(s: &str) -> Option<Duration> {
    let (num, scale) = if let Some(ms) = s.strip_suffix("ms") {
        (ms, 1e-3)
    } else {
        (s.strip_suffix('s').unwrap_or(s), 1.0)
    };
    let v: f64 = num.parse().ok()?;
    Duration::try_from_secs_f64(v * scale).ok()
}

/// Parses a schedule. Each line is either an event, `offset profile probe`,
/// or a run of periodic events, `every 1s x 60 profile probe [@start]`
/// (`×` is accepted for `x`). Offsets must never decrease.
pub fn load_schedule(text: &str) -> Result<EventSchedule, ConfigError> {
    let mut events: Vec<ScheduledEvent> = Vec::new();
    for (n, line) in content_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let batch = match fields.as_slice() {
            ["every", period, x, count, profile, probe, rest @ ..] if *x == "x" || *x == "×" => {
                let period = parse_duration(period).ok_or_else(|| at(n, format!("bad period `{period}`")))?;
                let count: u32 = count.parse().map_err(|_| at(n, format!("bad count `{count}`")))?;
                let start = match rest {
                    [] => Duration::ZERO,
                    [s] => s
                        .strip_prefix('@')
                        .and_then(parse_duration)
                        .ok_or_else(|| at(n, format!("bad start `{s}`")))?,
                    _ => return Err(at(n, "trailing fields")),
                };
                (0..count)
                    .map(|i| ScheduledEvent {
                        offset: start + period * i,
                        profile: (*profile).into(),
                        probe: (*probe).into(),
                    })
                    .collect()
            }
            [offset, profile, probe] => {
                let offset = parse_duration(offset).ok_or_else(|| at(n, format!("bad offset `{offset}`")))?;
                vec![ScheduledEvent {
                    offset,
                    profile: (*profile).into(),
                    probe: (*probe).into(),
                }]
            }
            _ => return Err(at(n, "expected `offset profile probe` or `every PERIOD x COUNT profile probe`")),
        };
        for ev in batch {
            if events.last().is_some_and(|prev| ev.offset < prev.offset) {
                return Err(at(n, format!("offset {:?} is earlier than the previous event", ev.offset)));
            }
            events.push(ev);
        }
    }
    EventSchedule::new(events).map_err(|e| ConfigError::Invalid(e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    #[serde(default)]
    profile: Vec<ResourceProfile>,
}

/// Parses a TOML file of `[[profile]]` tables.
pub fn load_profiles(text: &str) -> Result<Vec<ResourceProfile>, ConfigError> {
    let file: ProfileFile = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mut seen = HashSet::new();
    for p in &file.profile {
        p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !seen.insert(p.name.as_str()) {
            return Err(ConfigError::Invalid(format!("duplicate profile `{}`", p.name)));
        }
    }
    Ok(file.profile)
}

/// Parses a TOML topology: `destination`, optional `seed` and `timeout_us`,
/// then one `[[hop]]` table per hop in path order.
pub fn load_topology(text: &str) -> Result<SimTopology, ConfigError> {
    let topo: SimTopology = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    topo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(topo)
}
