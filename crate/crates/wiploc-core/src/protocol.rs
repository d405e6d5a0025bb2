//! Node roles and their event-driven state machines.
//!
//! Three kinds of nodes cooperate in a localization round:
//!
//! - the **mobile** broadcasts a location request and decodes the replies;
//!   in refined mode it follows up with a second, cell-tier request;
//! - an always-on **anchor** answers room-tier requests and, in refined
//!   mode, pulses its charger off and on to wake the sleeping cell anchors,
//!   then prunes half of them with a sleep command;
//! - a **wirelessly powered anchor** (WPA) sleeps, watches its harvester
//!   through periodic ADC samples, wakes on a falling edge, and answers
//!   cell-tier requests.
//!
//! Machines are pure state + event handlers returning [`Action`] lists;
//! the simulation engine owns all clocks, radios, and randomness and
//! applies the actions it is handed. Times are absolute milliseconds.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use crate::codec::{DecodeResult, Payload};
use crate::geom::Point;

pub type NodeId = u16;
pub type GroupId = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Anchor,
    Wpa,
    Mobile,
}

/// Static description of one node, as configured in a scenario.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub role: Role,
    pub position: Point,
    pub tx_power_dbm: f64,
    /// Nodes only talk within their group; requests carry it.
    #[serde(default)]
    pub group: GroupId,
    /// First ADC sample instant for a WPA (ms). Defaults to a seeded
    /// draw from one sampling period.
    #[serde(default)]
    pub adc_phase_ms: Option<f64>,
}

/// Protocol stage a request addresses: room anchors or cell anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Room,
    Cell,
}

/// Over-the-air frame bodies. Control frames carry their fields in a
/// robust header; only replies carry a chip payload.
#[derive(Debug, Clone, PartialEq)]
pub enum PacketKind {
    Request {
        group: GroupId,
        tier: Tier,
        /// Requester's harvested-power reading (dBm), refined mode only.
        xi_dbm: Option<f64>,
        /// Set when the previous round's cell stage decoded nothing.
        no_reply: bool,
        /// Previous round's result, piggybacked for data acquisition.
        prev_room: Option<NodeId>,
        prev_cell: Option<NodeId>,
    },
    Reply {
        payload: Payload,
    },
    Sleep {
        targets: BTreeSet<NodeId>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub source: NodeId,
    pub kind: PacketKind,
}

/// Protocol-level timing and thresholds shared by all machines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolTiming {
    /// Airtime of every frame (ms).
    pub tx_airtime_ms: f64,
    /// WPA sampling period; also the charger off-pulse width (ms).
    pub sample_period_ms: f64,
    /// Listen window after a request is `2 * tx_airtime + guard` (ms).
    pub guard_ms: f64,
    /// Harvested-power drop that counts as a wake edge (dB).
    pub wake_margin_db: f64,
    /// Close/far classification threshold (dBm).
    pub theta_dbm: f64,
}

impl ProtocolTiming {
    pub fn rx_window_ms(&self) -> f64 {
        2.0 * self.tx_airtime_ms + self.guard_ms
    }

    /// WPA listen window after a wake edge: long enough to cover the
    /// whole pulse plus the second request and its reply slot.
    pub fn wpa_listen_ms(&self) -> f64 {
        self.sample_period_ms + 2.0 * self.tx_airtime_ms
    }
}

/// What a machine asks the engine to do. Times are absolute ms.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Start transmitting `kind` at `start_ms`.
    Transmit { kind: PacketKind, start_ms: f64 },
    /// Switch the node's charger off, then on again.
    ChargerPulse { off_ms: f64, on_ms: f64 },
    /// Turn the radio on until `close_ms` (or an explicit close).
    OpenRx { close_ms: f64 },
    /// Turn the radio off now.
    CloseRx,
    /// Drop this node's not-yet-started transmissions.
    CancelPendingTx,
    /// A localization round finished; record it.
    RoundDone(RoundRecord),
}

/// Mobile-side outcome of one localization round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub xi_dbm: Option<f64>,
    /// Request carried the no-reply flag (fallback wake round).
    pub flagged: bool,
    pub room_decoded: Vec<DecodeResult>,
    pub cell_decoded: Vec<DecodeResult>,
    pub room: Option<NodeId>,
    pub cell: Option<NodeId>,
}

// ---------------------------------------------------------------------------
// Cell classification and the location decision
// ---------------------------------------------------------------------------

/// Close/far split of the cell anchors by their harvested power.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPartition {
    pub theta_dbm: f64,
    /// Per-WPA harvested-power readings (dBm).
    pub readings: BTreeMap<NodeId, f64>,
    /// Cells whose reading is at or above the threshold.
    pub close: BTreeSet<NodeId>,
    /// The rest.
    pub far: BTreeSet<NodeId>,
}

/// Splits cells by comparing each reading against `theta_dbm`.
pub fn classify_cells(readings: &BTreeMap<NodeId, f64>, theta_dbm: f64) -> CellPartition {
    let (close, far) = readings
        .iter()
        .partition(|(_, &mu)| mu >= theta_dbm);
    CellPartition {
        theta_dbm,
        readings: readings.clone(),
        close: BTreeMap::into_keys(close).collect(),
        far: BTreeMap::into_keys(far).collect(),
    }
}

impl CellPartition {
    /// Which cells the anchor orders to sleep.
    ///
    /// A requester reading at or below the threshold sits far from the
    /// charger, so the close set is pruned and the far set stays awake;
    /// a higher reading prunes the far set. A no-reply retry flips the
    /// choice: the set kept awake last time goes to sleep, waking its
    /// complement.
    pub fn sleep_targets(&self, xi_dbm: f64, no_reply: bool) -> &BTreeSet<NodeId> {
        let prune_close = xi_dbm <= self.theta_dbm;
        if prune_close != no_reply {
            &self.close
        } else {
            &self.far
        }
    }
}

/// Picks the winning identifier from a decode scan: minimum codeword
/// distance, ties to the lowest identifier. Pure and order-independent.
pub fn decide_location(decoded: &[DecodeResult]) -> Option<DecodeResult> {
    decoded.iter().copied().min_by_key(|d| (d.distance, d.id))
}

// ---------------------------------------------------------------------------
// Mobile
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum Mode {
    #[serde(rename = "wiploc")]
    RoomLevel,
    #[serde(rename = "wiploc++")]
    CellLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MobileStage {
    Idle,
    /// Listening for room-tier replies (true once the window closed).
    Room { closed: bool },
    /// Waiting for or listening to the cell stage.
    Cell { listening: bool },
}

/// The mobile runs the round: request, listen, optionally request again
/// at cell tier, decide, record.
#[derive(Debug, Clone)]
pub struct MobileMachine {
    pub id: NodeId,
    pub group: GroupId,
    pub mode: Mode,
    timing: ProtocolTiming,
    round: u32,
    flag_no_reply: bool,
    prev_room: Option<NodeId>,
    prev_cell: Option<NodeId>,
    stage: MobileStage,
    scratch: RoundRecord,
}

impl MobileMachine {
    pub fn new(id: NodeId, group: GroupId, mode: Mode, timing: ProtocolTiming) -> Self {
        MobileMachine {
            id,
            group,
            mode,
            timing,
            round: 0,
            flag_no_reply: false,
            prev_room: None,
            prev_cell: None,
            stage: MobileStage::Idle,
            scratch: RoundRecord {
                round: 0,
                xi_dbm: None,
                flagged: false,
                room_decoded: Vec::new(),
                cell_decoded: Vec::new(),
                room: None,
                cell: None,
            },
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// Kicks off one localization round. `xi_dbm` is the harvested-power
    /// reading sampled just before the request (refined mode).
    pub fn on_round_start(&mut self, now_ms: f64, xi_dbm: Option<f64>) -> Vec<Action> {
        let refined = self.mode == Mode::CellLevel;
        let flagged = refined && self.flag_no_reply;
        self.scratch = RoundRecord {
            round: self.round,
            xi_dbm: if refined { xi_dbm } else { None },
            flagged,
            room_decoded: Vec::new(),
            cell_decoded: Vec::new(),
            room: None,
            cell: None,
        };
        self.stage = MobileStage::Room { closed: false };
        vec![Action::Transmit {
            kind: PacketKind::Request {
                group: self.group,
                tier: Tier::Room,
                xi_dbm: self.scratch.xi_dbm,
                no_reply: flagged,
                prev_room: self.prev_room,
                prev_cell: self.prev_cell,
            },
            start_ms: now_ms,
        }]
    }

    /// One of this node's transmissions just finished.
    pub fn on_tx_done(&mut self, now_ms: f64, tier: Tier) -> Vec<Action> {
        let window = Action::OpenRx { close_ms: now_ms + self.timing.rx_window_ms() };
        match tier {
            Tier::Room => {
                let mut actions = vec![window];
                if self.mode == Mode::CellLevel {
                    // The charger pulse starts when the anchor's reply
                    // ends and lasts one sampling period; firing the
                    // second request right at the pulse's trailing edge
                    // catches every woken cell anchor mid-listen.
                    actions.push(Action::Transmit {
                        kind: PacketKind::Request {
                            group: self.group,
                            tier: Tier::Cell,
                            xi_dbm: self.scratch.xi_dbm,
                            no_reply: self.scratch.flagged,
                            prev_room: self.prev_room,
                            prev_cell: self.prev_cell,
                        },
                        start_ms: now_ms
                            + self.timing.tx_airtime_ms
                            + self.timing.sample_period_ms,
                    });
                }
                actions
            }
            Tier::Cell => {
                self.stage = MobileStage::Cell { listening: true };
                vec![window]
            }
        }
    }

    /// A reply slot decoded to these identifiers (possibly several from
    /// one collided reception).
    pub fn on_replies(&mut self, _now_ms: f64, decoded: &[DecodeResult]) -> Vec<Action> {
        match self.stage {
            MobileStage::Room { closed: false } => {
                self.scratch.room_decoded = decoded.to_vec();
                self.scratch.room = decide_location(decoded).map(|d| d.id as NodeId);
                self.stage = MobileStage::Room { closed: true };
                let mut actions = vec![Action::CloseRx];
                if self.mode == Mode::RoomLevel {
                    actions.push(self.finish_round());
                } else {
                    self.stage = MobileStage::Cell { listening: false };
                }
                actions
            }
            MobileStage::Cell { listening: true } => {
                self.scratch.cell_decoded = decoded.to_vec();
                self.scratch.cell = decide_location(decoded).map(|d| d.id as NodeId);
                vec![Action::CloseRx, self.finish_round()]
            }
            // Late or duplicate receptions outside a listen stage.
            _ => Vec::new(),
        }
    }

    /// The listen window expired without a decodable reply.
    pub fn on_rx_close(&mut self, _now_ms: f64) -> Vec<Action> {
        match self.stage {
            MobileStage::Room { closed: false } => {
                self.stage = MobileStage::Room { closed: true };
                if self.mode == Mode::RoomLevel {
                    vec![self.finish_round()]
                } else {
                    self.stage = MobileStage::Cell { listening: false };
                    Vec::new()
                }
            }
            MobileStage::Cell { listening: true } => vec![self.finish_round()],
            _ => Vec::new(),
        }
    }

    fn finish_round(&mut self) -> Action {
        if self.mode == Mode::CellLevel {
            self.flag_no_reply = self.scratch.cell_decoded.is_empty();
        }
        self.prev_room = self.scratch.room;
        self.prev_cell = self.scratch.cell;
        self.stage = MobileStage::Idle;
        self.round += 1;
        Action::RoundDone(self.scratch.clone())
    }
}

// ---------------------------------------------------------------------------
// Anchor
// ---------------------------------------------------------------------------

/// Always-on room anchor. In refined mode it owns the charger pulse and
/// the sleep command.
#[derive(Debug, Clone)]
pub struct AnchorMachine {
    pub id: NodeId,
    pub group: GroupId,
    pub mode: Mode,
    timing: ProtocolTiming,
    reply_payload: Payload,
    /// Set when this anchor drives one or more chargers.
    controls_charger: bool,
    partition: Option<CellPartition>,
}

impl AnchorMachine {
    pub fn new(
        id: NodeId,
        group: GroupId,
        mode: Mode,
        timing: ProtocolTiming,
        reply_payload: Payload,
        controls_charger: bool,
        partition: Option<CellPartition>,
    ) -> Self {
        AnchorMachine { id, group, mode, timing, reply_payload, controls_charger, partition }
    }

    /// Handles a received frame. `jitter_ms` shifts this reply's start,
    /// modeling imperfect turnaround synchronization across anchors.
    pub fn on_packet(&mut self, now_ms: f64, packet: &Packet, jitter_ms: f64) -> Vec<Action> {
        let PacketKind::Request { group, tier: Tier::Room, xi_dbm, no_reply, .. } = &packet.kind
        else {
            return Vec::new();
        };
        if *group != self.group {
            return Vec::new();
        }
        let reply_start = now_ms + jitter_ms;
        let reply_end = reply_start + self.timing.tx_airtime_ms;
        let mut actions = vec![Action::Transmit {
            kind: PacketKind::Reply { payload: self.reply_payload.clone() },
            start_ms: reply_start,
        }];
        if self.mode == Mode::CellLevel && self.controls_charger {
            actions.push(Action::ChargerPulse {
                off_ms: reply_end,
                on_ms: reply_end + self.timing.sample_period_ms,
            });
            if let Some(partition) = &self.partition {
                // The command goes out after the requester's cell-tier
                // request, in the slot before the woken anchors answer.
                let targets = partition
                    .sleep_targets(xi_dbm.unwrap_or(f64::INFINITY), *no_reply)
                    .clone();
                actions.push(Action::Transmit {
                    kind: PacketKind::Sleep { targets },
                    start_ms: reply_end
                        + self.timing.sample_period_ms
                        + self.timing.tx_airtime_ms,
                });
            }
        }
        actions
    }
}

// ---------------------------------------------------------------------------
// Wirelessly powered anchor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum WpaState {
    Sleeping,
    /// Radio on; `reply_pending` once a cell request was answered.
    Listening { reply_pending: bool },
    Transmitting,
}

/// Cell anchor living off harvested power. Its radio is off except for
/// the short window after a detected charger pulse.
#[derive(Debug, Clone)]
pub struct WpaMachine {
    pub id: NodeId,
    pub group: GroupId,
    timing: ProtocolTiming,
    reply_payload: Payload,
    state: WpaState,
    prev_reading_dbm: Option<f64>,
}

impl WpaMachine {
    /// `settled_reading_dbm` seeds the edge detector with the harvest
    /// level before the first sample, so an initial sample cannot read
    /// as an edge against nothing.
    pub fn new(
        id: NodeId,
        group: GroupId,
        timing: ProtocolTiming,
        reply_payload: Payload,
        settled_reading_dbm: f64,
    ) -> Self {
        WpaMachine {
            id,
            group,
            timing,
            reply_payload,
            state: WpaState::Sleeping,
            prev_reading_dbm: Some(settled_reading_dbm),
        }
    }

    pub fn is_sleeping(&self) -> bool {
        self.state == WpaState::Sleeping
    }

    /// Periodic harvested-power sample. A drop of at least the wake
    /// margin against the previous sample is a charger pulse: the radio
    /// turns on at the sample instant (the conversion precedes it).
    pub fn on_adc_sample(&mut self, now_ms: f64, reading_dbm: f64) -> Vec<Action> {
        debug_assert_eq!(self.state, WpaState::Sleeping, "sampling only happens asleep");
        let edge = self
            .prev_reading_dbm
            .is_some_and(|prev| prev - reading_dbm >= self.timing.wake_margin_db);
        self.prev_reading_dbm = Some(reading_dbm);
        if edge {
            self.state = WpaState::Listening { reply_pending: false };
            vec![Action::OpenRx { close_ms: now_ms + self.timing.wpa_listen_ms() }]
        } else {
            Vec::new()
        }
    }

    pub fn on_packet(&mut self, now_ms: f64, packet: &Packet) -> Vec<Action> {
        let WpaState::Listening { reply_pending } = self.state else {
            return Vec::new();
        };
        match &packet.kind {
            PacketKind::Request { group, tier: Tier::Cell, .. } if *group == self.group => {
                // Answer one reply slot late: the anchor's sleep command
                // occupies the slot right after the request.
                self.state = WpaState::Listening { reply_pending: true };
                vec![Action::Transmit {
                    kind: PacketKind::Reply { payload: self.reply_payload.clone() },
                    start_ms: now_ms + self.timing.tx_airtime_ms,
                }]
            }
            PacketKind::Sleep { targets } if targets.contains(&self.id) => {
                self.state = WpaState::Sleeping;
                let mut actions = Vec::new();
                if reply_pending {
                    actions.push(Action::CancelPendingTx);
                }
                actions.push(Action::CloseRx);
                actions
            }
            _ => Vec::new(),
        }
    }

    /// The listen window expired.
    pub fn on_rx_close(&mut self, _now_ms: f64) -> Vec<Action> {
        if matches!(self.state, WpaState::Listening { .. }) {
            self.state = WpaState::Sleeping;
            vec![Action::CloseRx]
        } else {
            Vec::new()
        }
    }

    pub fn on_tx_start(&mut self, _now_ms: f64) {
        self.state = WpaState::Transmitting;
    }

    /// The reply finished; back to the duty cycle.
    pub fn on_tx_done(&mut self, _now_ms: f64) -> Vec<Action> {
        self.state = WpaState::Sleeping;
        vec![Action::CloseRx]
    }
}
