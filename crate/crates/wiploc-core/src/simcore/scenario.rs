//! Scenario description files: geometry, nodes, chargers, radio and duty
//! parameters, test positions. Parsed from TOML; every violation found by
//! validation is reported, not just the first.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use crate::energy::{DutyParams, PowerProfile};
use crate::error::{Error, Result};
use crate::geom::{Point, Rect, WallSegment};
use crate::phy::{ChannelModel, WptModel};
use crate::protocol::{Mode, NodeId, NodeSpec, ProtocolTiming, Role};

/// Which ground-truth rule grades an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthRule {
    /// Correct when the decided anchor is the nearest one.
    Voronoi,
    /// Correct when the decided anchor's room contains the position.
    Room,
    /// Correct when the decided cell anchor's cell contains the position.
    Cell,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    pub id: u16,
    pub rect: Rect,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    /// The WPA whose reply names this cell.
    pub owner: NodeId,
    pub rect: Rect,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub rooms: Vec<RoomSpec>,
    pub walls: Vec<WallSegment>,
    pub cells: Vec<CellSpec>,
}

/// One RF power transmitter. A charger bound to an anchor is switched off
/// and on by that anchor's wakeup pulse; unbound chargers stay on.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargerSpec {
    pub position: Point,
    #[serde(default)]
    pub anchor: Option<NodeId>,
    /// Beam direction (degrees, counterclockwise from +x). Omitted means
    /// omnidirectional.
    #[serde(default)]
    pub aim_deg: Option<f64>,
    /// Beam half-opening angle (degrees). Required with `aim_deg`.
    #[serde(default)]
    pub half_angle_deg: Option<f64>,
}

impl ChargerSpec {
    /// True when `target` lies inside the (possibly omnidirectional) beam.
    pub fn covers(&self, target: Point) -> bool {
        let (Some(aim), Some(half)) = (self.aim_deg, self.half_angle_deg) else {
            return true;
        };
        let dx = target.x - self.position.x;
        let dy = target.y - self.position.y;
        if dx == 0.0 && dy == 0.0 {
            return true;
        }
        let bearing = dy.atan2(dx).to_degrees();
        let mut diff = (bearing - aim) % 360.0;
        if diff > 180.0 {
            diff -= 360.0;
        } else if diff < -180.0 {
            diff += 360.0;
        }
        diff.abs() <= half
    }
}

/// Frame timing, thresholds, and codec switches for the protocol layer.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Listen window after a request is `2 * tx_airtime + guard` (ms).
    pub guard_ms: f64,
    /// Reply turnaround spread: each reply starts up to this much late,
    /// uniformly and independently per anchor and round (ms).
    pub reply_jitter_ms: f64,
    /// Replies whose starts spread wider than this lose chip alignment
    /// and can only be received by power capture (ms).
    pub preamble_ms: f64,
    /// Close/far cell threshold (dBm).
    pub theta_dbm: f64,
    /// Harvested-power drop read as a wakeup pulse (dB).
    pub wake_margin_db: f64,
    /// Codebook order exponent: `2^k` codes of `2^k` chips.
    pub codec_k: u32,
    /// Replace coded payloads with the bare identifier byte repeated;
    /// reception then requires an exact (checksummed) frame.
    pub no_codec: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            guard_ms: 0.9,
            reply_jitter_ms: 0.0,
            preamble_ms: 0.008,
            theta_dbm: 3.7,
            wake_margin_db: 6.0,
            codec_k: 4,
            no_codec: false,
        }
    }
}

/// Power draw figures per role.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilesConfig {
    pub mobile: PowerProfile,
    pub anchor: PowerProfile,
    pub wpa: PowerProfile,
}

impl Default for ProfilesConfig {
    fn default() -> Self {
        ProfilesConfig {
            mobile: PowerProfile::mobile(),
            anchor: PowerProfile::wirelessly_powered(),
            wpa: PowerProfile::wirelessly_powered(),
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub rounds_per_position: u32,
    pub truth: TruthRule,
    /// The mobile is teleported to each of these in turn.
    pub positions: Vec<Point>,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default)]
    pub wpt: WptModel,
    #[serde(default)]
    pub duty: DutyParams,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub profiles: ProfilesConfig,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub chargers: Vec<ChargerSpec>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidParameter(format!("cannot read {}: {e}", path.display()))
        })?;
        Scenario::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(inner) => {
                Error::InvalidParameter(format!("{}: {inner}", path.display()))
            }
            other => other,
        })
    }

    pub fn timing(&self) -> ProtocolTiming {
        ProtocolTiming {
            tx_airtime_ms: self.duty.tx_airtime_ms,
            sample_period_ms: self.duty.sample_period_ms,
            guard_ms: self.protocol.guard_ms,
            wake_margin_db: self.protocol.wake_margin_db,
            theta_dbm: self.protocol.theta_dbm,
        }
    }

    pub fn mobile(&self) -> &NodeSpec {
        self.nodes
            .iter()
            .find(|n| n.role == Role::Mobile)
            .expect("validated scenarios have a mobile")
    }

    pub fn anchors(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.role == Role::Anchor)
    }

    pub fn wpas(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.role == Role::Wpa)
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Room containing a point, if any.
    pub fn room_at(&self, p: Point) -> Option<u16> {
        self.geometry.rooms.iter().find(|r| r.rect.contains(p)).map(|r| r.id)
    }

    /// Cell containing a point, if any.
    pub fn cell_at(&self, p: Point) -> Option<NodeId> {
        self.geometry.cells.iter().find(|c| c.rect.contains(p)).map(|c| c.owner)
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();

        if self.rounds_per_position == 0 {
            v.push("rounds_per_position must be at least 1".into());
        }
        if self.positions.is_empty() {
            v.push("positions must not be empty".into());
        }
        if let Err(Error::Validation(inner)) = self.channel.validate() {
            v.extend(inner.into_iter().map(|s| format!("channel: {s}")));
        }
        if let Err(Error::Validation(inner)) = self.duty.validate() {
            v.extend(inner.into_iter().map(|s| format!("duty: {s}")));
        }
        for (name, profile) in [
            ("mobile", &self.profiles.mobile),
            ("anchor", &self.profiles.anchor),
            ("wpa", &self.profiles.wpa),
        ] {
            if let Err(Error::Validation(inner)) = profile.validate() {
                v.extend(inner.into_iter().map(|s| format!("profiles.{name}: {s}")));
            }
        }
        self.validate_protocol(&mut v);
        self.validate_geometry(&mut v);
        self.validate_nodes(&mut v);
        self.validate_chargers(&mut v);

        for (i, p) in self.positions.iter().enumerate() {
            if !self.geometry.rooms.iter().any(|r| r.rect.contains(*p)) {
                v.push(format!("positions[{i}] ({}, {}) lies outside every room", p.x, p.y));
            }
        }

        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    fn validate_protocol(&self, v: &mut Vec<String>) {
        let p = &self.protocol;
        if !p.guard_ms.is_finite() || p.guard_ms <= 0.0 {
            v.push(format!("protocol: guard_ms must be positive, got {}", p.guard_ms));
        }
        if !p.reply_jitter_ms.is_finite() || p.reply_jitter_ms < 0.0 {
            v.push(format!(
                "protocol: reply_jitter_ms must be non-negative, got {}",
                p.reply_jitter_ms
            ));
        }
        if p.reply_jitter_ms > p.guard_ms {
            v.push(format!(
                "protocol: reply_jitter_ms ({}) must not exceed guard_ms ({}), or late replies fall outside the listen window",
                p.reply_jitter_ms, p.guard_ms
            ));
        }
        if !p.preamble_ms.is_finite() || p.preamble_ms < 0.0 {
            v.push(format!("protocol: preamble_ms must be non-negative, got {}", p.preamble_ms));
        }
        if !p.wake_margin_db.is_finite() || p.wake_margin_db <= 0.0 {
            v.push(format!("protocol: wake_margin_db must be positive, got {}", p.wake_margin_db));
        }
        // Framing needs the error-correcting layer, which only exists for
        // orders of at least two.
        if !p.no_codec && !(2..=crate::codec::MAX_K).contains(&p.codec_k) {
            v.push(format!(
                "protocol: codec_k must be in 2..={}, got {}",
                crate::codec::MAX_K,
                p.codec_k
            ));
        }
        if self.mode == Mode::CellLevel {
            let needed = 2.0 * self.duty.tx_airtime_ms + p.guard_ms;
            if self.duty.sample_period_ms < needed {
                v.push(format!(
                    "protocol: cell mode needs sample_period_ms >= {needed} ms so the second request clears the first listen window, got {}",
                    self.duty.sample_period_ms
                ));
            }
            // The localization round must fit one measurement interval:
            // two exchanges plus the pulse.
            let round_span = 4.0 * self.duty.tx_airtime_ms
                + self.duty.sample_period_ms
                + self.rx_window_span();
            if round_span > self.duty.measure_interval_ms {
                v.push(format!(
                    "duty: a cell-level round spans {round_span} ms, exceeding measure_interval_ms {}",
                    self.duty.measure_interval_ms
                ));
            }
        }
    }

    fn rx_window_span(&self) -> f64 {
        2.0 * self.duty.tx_airtime_ms + self.protocol.guard_ms
    }

    fn validate_geometry(&self, v: &mut Vec<String>) {
        if self.geometry.rooms.is_empty() {
            v.push("geometry: at least one room is required".into());
        }
        let mut room_ids = BTreeSet::new();
        for room in &self.geometry.rooms {
            if !room.rect.is_valid() {
                v.push(format!("geometry: room {} rectangle is degenerate", room.id));
            }
            if !room_ids.insert(room.id) {
                v.push(format!("geometry: duplicate room id {}", room.id));
            }
        }
        for (i, wall) in self.geometry.walls.iter().enumerate() {
            if wall.a == wall.b {
                v.push(format!("geometry: walls[{i}] has zero length"));
            }
        }
        for (i, cell) in self.geometry.cells.iter().enumerate() {
            if !cell.rect.is_valid() {
                v.push(format!("geometry: cell of node {} is degenerate", cell.owner));
            }
            for other in &self.geometry.cells[i + 1..] {
                if cell.owner == other.owner {
                    v.push(format!("geometry: node {} owns more than one cell", cell.owner));
                }
                if cell.rect.intersects(&other.rect) {
                    v.push(format!(
                        "geometry: cells of nodes {} and {} overlap",
                        cell.owner, other.owner
                    ));
                }
            }
        }
    }

    fn validate_nodes(&self, v: &mut Vec<String>) {
        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if !ids.insert(node.id) {
                v.push(format!("nodes: duplicate id {}", node.id));
            }
            if !node.tx_power_dbm.is_finite() {
                v.push(format!("nodes: node {} tx_power_dbm must be finite", node.id));
            }
            if let Some(phase) = node.adc_phase_ms {
                if node.role != Role::Wpa {
                    v.push(format!("nodes: node {} sets adc_phase_ms but is not a wpa", node.id));
                } else if !(0.0..self.duty.sample_period_ms).contains(&phase) {
                    v.push(format!(
                        "nodes: node {} adc_phase_ms {phase} must lie in [0, sample_period_ms)",
                        node.id
                    ));
                }
            }
        }

        let mobiles = self.nodes.iter().filter(|n| n.role == Role::Mobile).count();
        if mobiles != 1 {
            v.push(format!("nodes: exactly one mobile is required, found {mobiles}"));
        }
        if self.anchors().count() == 0 {
            v.push("nodes: at least one anchor is required".into());
        }

        let id_limit: u32 = if self.protocol.no_codec {
            256
        } else if (2..=crate::codec::MAX_K).contains(&self.protocol.codec_k) {
            1 << self.protocol.codec_k
        } else {
            return; // codec_k violation already recorded
        };
        for node in self.nodes.iter().filter(|n| n.role != Role::Mobile) {
            if u32::from(node.id) >= id_limit {
                v.push(format!(
                    "nodes: replying node id {} does not fit the payload space (limit {id_limit})",
                    node.id
                ));
            }
        }

        match self.mode {
            Mode::RoomLevel => {
                if self.wpas().next().is_some() {
                    v.push("nodes: wpa nodes require cell-level mode".into());
                }
                if self.truth == TruthRule::Cell {
                    v.push("truth: cell truth requires cell-level mode".into());
                }
            }
            Mode::CellLevel => {
                let cell_owners: BTreeSet<NodeId> =
                    self.geometry.cells.iter().map(|c| c.owner).collect();
                for wpa in self.wpas() {
                    if !cell_owners.contains(&wpa.id) {
                        v.push(format!("geometry: wpa {} has no cell", wpa.id));
                    }
                }
                for owner in &cell_owners {
                    match self.node(*owner) {
                        Some(n) if n.role == Role::Wpa => {}
                        Some(_) => v.push(format!("geometry: cell owner {owner} is not a wpa")),
                        None => v.push(format!("geometry: cell owner {owner} does not exist")),
                    }
                }
                if self.wpas().next().is_none() {
                    v.push("nodes: cell-level mode needs at least one wpa".into());
                }
                if !self.chargers.iter().any(|c| c.anchor.is_some()) {
                    v.push("chargers: cell-level mode needs an anchor-driven charger for the wakeup pulse".into());
                }
            }
        }
    }

    fn validate_chargers(&self, v: &mut Vec<String>) {
        for (i, charger) in self.chargers.iter().enumerate() {
            if let Some(id) = charger.anchor {
                match self.node(id) {
                    Some(n) if n.role == Role::Anchor => {}
                    Some(_) => v.push(format!("chargers[{i}]: node {id} is not an anchor")),
                    None => v.push(format!("chargers[{i}]: anchor {id} does not exist")),
                }
            }
            match (charger.aim_deg, charger.half_angle_deg) {
                (None, None) => {}
                (Some(aim), Some(half)) => {
                    if !aim.is_finite() {
                        v.push(format!("chargers[{i}]: aim_deg must be finite"));
                    }
                    if !(0.0..=180.0).contains(&half) {
                        v.push(format!(
                            "chargers[{i}]: half_angle_deg must lie in [0, 180], got {half}"
                        ));
                    }
                }
                _ => v.push(format!(
                    "chargers[{i}]: aim_deg and half_angle_deg must be set together"
                )),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

/// What a perfect localizer would answer at a position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub room: Option<u16>,
    /// Nearest anchor (ties to the lowest id).
    pub voronoi: Option<NodeId>,
    /// Owner of the containing cell.
    pub cell: Option<NodeId>,
}

impl GroundTruth {
    /// The id an estimate is graded against under `rule`.
    pub fn target(&self, rule: TruthRule) -> Option<u16> {
        match rule {
            TruthRule::Voronoi => self.voronoi,
            TruthRule::Room => self.room,
            TruthRule::Cell => self.cell,
        }
    }
}

/// Computes room containment, the nearest-anchor owner, and the containing
/// cell for `position`. The position must lie inside some room.
pub fn ground_truth(scenario: &Scenario, position: Point) -> Result<GroundTruth> {
    let room = scenario.room_at(position);
    if room.is_none() {
        return Err(Error::InvalidParameter(format!(
            "position ({}, {}) lies outside every room",
            position.x, position.y
        )));
    }
    let voronoi = scenario
        .anchors()
        .map(|a| (a.id, a.position.distance(&position)))
        .min_by(|(ia, da), (ib, db)| da.total_cmp(db).then_with(|| ia.cmp(ib)))
        .map(|(id, _)| id);
    Ok(GroundTruth { room, voronoi, cell: scenario.cell_at(position) })
}

/// Grades a decided identifier against the truth at a position.
pub fn is_correct(
    scenario: &Scenario,
    truth: &GroundTruth,
    rule: TruthRule,
    room_estimate: Option<NodeId>,
    cell_estimate: Option<NodeId>,
) -> bool {
    match rule {
        TruthRule::Voronoi => room_estimate.is_some() && room_estimate == truth.voronoi,
        TruthRule::Room => match (room_estimate, truth.room) {
            (Some(winner), Some(room)) => scenario
                .node(winner)
                .and_then(|n| scenario.room_at(n.position))
                == Some(room),
            _ => false,
        },
        TruthRule::Cell => cell_estimate.is_some() && cell_estimate == truth.cell,
    }
}

/// Per-node harvested power with every charger on (mW), for cell
/// classification and detector baselines.
pub fn settled_harvest_mw(scenario: &Scenario, position: Point) -> f64 {
    scenario
        .chargers
        .iter()
        .filter(|c| c.covers(position))
        .filter(|c| {
            crate::geom::wall_crossings(c.position, position, &scenario.geometry.walls) == 0
        })
        .map(|c| scenario.wpt.harvested_power_mw(c.position.distance(&position)))
        .sum()
}

/// Cell-classification readings: harvested power at each WPA (dBm).
pub fn wpa_readings_dbm(scenario: &Scenario) -> BTreeMap<NodeId, f64> {
    scenario
        .wpas()
        .map(|w| {
            let mw = settled_harvest_mw(scenario, w.position);
            (w.id, crate::phy::mw_to_dbm(mw.max(crate::phy::dbm_to_mw(scenario.channel.ambient_floor_dbm))))
        })
        .collect()
}
