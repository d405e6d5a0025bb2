//! Discrete-event execution of a scenario.
//!
//! The mobile is placed at each test position in turn and runs the
//! configured number of localization rounds there. Time is integer
//! nanoseconds; ties resolve by event class (charger switching, then
//! transmission ends, starts, detector samples, timers), then node id,
//! then insertion order, so a run is a pure function of the scenario.
//!
//! Frames are delivered when they stop transmitting. Everything whose
//! airtime overlaps is resolved together at the last end instant: one
//! receiver either captures the strongest signal, mixes chip streams
//! whose starts fall within one preamble of each other, or hears nothing
//! usable. Randomness (reply jitter, chip mixing, detector phases) comes
//! from streams keyed by seed, purpose, node, position, and sequence
//! number, never from shared state, so outcomes are order-independent
//! and reproducible.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, DecodeResult, FecCodebook, OrthogonalCodebook, Payload};
use crate::energy::{EnergyLedger, RadioState};
use crate::error::Result;
use crate::geom::{wall_crossings, Point};
use crate::phy::{dbm_to_mw, mw_to_dbm, resolve_reception, Arrival};
use crate::protocol::{
    classify_cells, Action, AnchorMachine, CellPartition, MobileMachine, Mode, NodeId, Packet,
    PacketKind, Role, RoundRecord, Tier, WpaMachine,
};

use super::scenario::{ground_truth, wpa_readings_dbm, GroundTruth, Scenario};

const NS_PER_MS: f64 = 1e6;

fn to_ns(ms: f64) -> u64 {
    debug_assert!(ms >= 0.0 && ms.is_finite(), "timestamps are non-negative");
    (ms * NS_PER_MS).round() as u64
}

fn to_ms(ns: u64) -> f64 {
    ns as f64 / NS_PER_MS
}

// ---------------------------------------------------------------------------
// Keyed random streams
// ---------------------------------------------------------------------------

const SALT_JITTER: u64 = 1;
const SALT_CHIPS: u64 = 2;
const SALT_PHASE: u64 = 3;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one (purpose, node, position, sequence) use.
fn stream(seed: u64, salt: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let key = mix64(seed ^ mix64(salt ^ mix64(a ^ mix64(b ^ mix64(c)))));
    ChaCha8Rng::seed_from_u64(key)
}

// ---------------------------------------------------------------------------
// Output types
// ---------------------------------------------------------------------------

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub t_ns: u64,
    /// Owning node; switching events of an unbound charger have none.
    pub node: Option<NodeId>,
    pub event: &'static str,
    pub detail: String,
}

impl TraceRow {
    pub fn time_ms(&self) -> f64 {
        to_ms(self.t_ns)
    }
}

/// Everything observed while the mobile sat at one position.
#[derive(Debug, Clone)]
pub struct PositionOutcome {
    pub index: usize,
    pub position: Point,
    pub truth: GroundTruth,
    pub rounds: Vec<RoundRecord>,
    pub energy: BTreeMap<NodeId, EnergyLedger>,
    pub trace: Vec<TraceRow>,
}

/// Full result of simulating a scenario.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub positions: Vec<PositionOutcome>,
}

/// Runs a validated scenario to completion.
pub fn run(scenario: &Scenario) -> Result<SimOutput> {
    scenario.validate()?;
    let prep = Prepared::new(scenario)?;
    let positions = scenario
        .positions
        .iter()
        .enumerate()
        .map(|(i, &p)| PositionSim::new(scenario, &prep, i, p)?.run())
        .collect::<Result<Vec<_>>>()?;
    Ok(SimOutput {
        name: scenario.name.clone(),
        mode: scenario.mode,
        seed: scenario.seed,
        positions,
    })
}

// ---------------------------------------------------------------------------
// Scenario-level precomputation
// ---------------------------------------------------------------------------

struct Prepared {
    codebooks: Option<(OrthogonalCodebook, FecCodebook)>,
    /// Reply chip stream per answering node.
    payloads: BTreeMap<NodeId, Payload>,
    /// Close/far split of the cell anchors, fixed by their settled harvest.
    partition: Option<CellPartition>,
    wpa_settled_dbm: BTreeMap<NodeId, f64>,
}

impl Prepared {
    fn new(sc: &Scenario) -> Result<Self> {
        let codebooks = if sc.protocol.no_codec {
            None
        } else {
            Some((
                OrthogonalCodebook::new(sc.protocol.codec_k)?,
                FecCodebook::new(sc.protocol.codec_k)?,
            ))
        };
        let mut payloads = BTreeMap::new();
        for node in sc.nodes.iter().filter(|n| n.role != Role::Mobile) {
            let payload = match &codebooks {
                Some((orth, fec)) => codec::encode(node.id as usize, orth, fec)?,
                // Bare identifier byte repeated across the frame; reception
                // then stands or falls with the checksum.
                None => Payload::from_bytes(&[node.id as u8; 30]),
            };
            payloads.insert(node.id, payload);
        }
        let wpa_settled_dbm = wpa_readings_dbm(sc);
        let partition = (sc.mode == Mode::CellLevel)
            .then(|| classify_cells(&wpa_settled_dbm, sc.protocol.theta_dbm));
        Ok(Prepared { codebooks, payloads, partition, wpa_settled_dbm })
    }
}

// ---------------------------------------------------------------------------
// Events and flights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    ChargerOff(usize),
    ChargerOn(usize),
    TxEnd(usize),
    TxStart(usize),
    AdcTick(NodeId),
    RxClose(NodeId, u64),
    RoundStart(u32),
}

impl Ev {
    /// Same-instant class order: charger switching settles harvest levels
    /// first, finished frames deliver before new ones start, detector
    /// samples read the post-switch level, timers run last.
    fn priority(&self) -> u8 {
        match self {
            Ev::ChargerOff(_) | Ev::ChargerOn(_) => 0,
            Ev::TxEnd(_) => 1,
            Ev::TxStart(_) => 2,
            Ev::AdcTick(_) => 3,
            Ev::RxClose(..) | Ev::RoundStart(_) => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct QueuedEvent {
    t_ns: u64,
    prio: u8,
    node: NodeId,
    seq: u64,
    ev: Ev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FlightState {
    Pending,
    Air,
    Done,
    Cancelled,
}

#[derive(Debug, Clone)]
struct Flight {
    source: NodeId,
    kind: PacketKind,
    start_ns: u64,
    end_ns: u64,
    state: FlightState,
    delivered: bool,
}

/// Engine-side radio bookkeeping for one node.
#[derive(Debug)]
struct NodeRt {
    role: Role,
    radio: RadioState,
    since_ns: u64,
    rx_until_ns: Option<u64>,
    /// Bumped on every window open/close; stale close timers are dropped.
    rx_epoch: u64,
    ledger: EnergyLedger,
    /// Count of resolved receptions, keys the chip-mix stream.
    reception_seq: u64,
}

// ---------------------------------------------------------------------------
// Per-position simulation
// ---------------------------------------------------------------------------

struct PositionSim<'a> {
    sc: &'a Scenario,
    prep: &'a Prepared,
    pos_index: usize,
    position: Point,
    horizon_ns: u64,
    airtime_ns: u64,
    adc_ns: u64,
    sample_period_ns: u64,
    preamble_ns: u64,
    measure_interval_ns: u64,
    now_ns: u64,
    events: BinaryHeap<Reverse<QueuedEvent>>,
    seq: u64,
    flights: Vec<Flight>,
    rt: BTreeMap<NodeId, NodeRt>,
    mobile: MobileMachine,
    anchors: BTreeMap<NodeId, AnchorMachine>,
    wpas: BTreeMap<NodeId, WpaMachine>,
    chargers_on: Vec<bool>,
    /// Harvest each charger contributes at each node position (mW).
    charger_contrib: Vec<BTreeMap<NodeId, f64>>,
    /// Receive power for every ordered transmitter/receiver pair (dBm).
    rx_power: BTreeMap<(NodeId, NodeId), f64>,
    current_round: u32,
    rounds: Vec<RoundRecord>,
    trace: Vec<TraceRow>,
}

impl<'a> PositionSim<'a> {
    fn new(sc: &'a Scenario, prep: &'a Prepared, pos_index: usize, position: Point) -> Result<Self> {
        let timing = sc.timing();
        let mobile_spec = sc.mobile();

        let mut node_pos: BTreeMap<NodeId, Point> =
            sc.nodes.iter().map(|n| (n.id, n.position)).collect();
        node_pos.insert(mobile_spec.id, position);

        let mut rx_power = BTreeMap::new();
        for a in &sc.nodes {
            for b in &sc.nodes {
                if a.id == b.id {
                    continue;
                }
                let (pa, pb) = (node_pos[&a.id], node_pos[&b.id]);
                let walls = wall_crossings(pa, pb, &sc.geometry.walls);
                rx_power.insert(
                    (a.id, b.id),
                    sc.channel.rx_power_dbm(a.tx_power_dbm, pa.distance(&pb), walls),
                );
            }
        }

        let charger_contrib = sc
            .chargers
            .iter()
            .map(|ch| {
                node_pos
                    .iter()
                    .map(|(&id, &p)| {
                        let blocked = !ch.covers(p)
                            || wall_crossings(ch.position, p, &sc.geometry.walls) > 0;
                        let mw = if blocked {
                            0.0
                        } else {
                            sc.wpt.harvested_power_mw(ch.position.distance(&p))
                        };
                        (id, mw)
                    })
                    .collect()
            })
            .collect();

        let rt = sc
            .nodes
            .iter()
            .map(|n| {
                let profile = match n.role {
                    Role::Mobile => sc.profiles.mobile,
                    Role::Anchor => sc.profiles.anchor,
                    Role::Wpa => sc.profiles.wpa,
                };
                // Mains-fed anchors listen permanently; everything else
                // sleeps until the protocol wakes it.
                let (radio, rx_until_ns) = match n.role {
                    Role::Anchor => (RadioState::Rx, Some(u64::MAX)),
                    _ => (RadioState::Wfi, None),
                };
                let rt = NodeRt {
                    role: n.role,
                    radio,
                    since_ns: 0,
                    rx_until_ns,
                    rx_epoch: 0,
                    ledger: EnergyLedger::new(profile),
                    reception_seq: 0,
                };
                (n.id, rt)
            })
            .collect();

        let mobile = MobileMachine::new(mobile_spec.id, mobile_spec.group, sc.mode, timing);
        let anchors = sc
            .anchors()
            .map(|a| {
                let controls = sc.chargers.iter().any(|c| c.anchor == Some(a.id));
                let machine = AnchorMachine::new(
                    a.id,
                    a.group,
                    sc.mode,
                    timing,
                    prep.payloads[&a.id].clone(),
                    controls,
                    prep.partition.clone(),
                );
                (a.id, machine)
            })
            .collect();
        let wpas = sc
            .wpas()
            .map(|w| {
                let machine = WpaMachine::new(
                    w.id,
                    w.group,
                    timing,
                    prep.payloads[&w.id].clone(),
                    prep.wpa_settled_dbm[&w.id],
                );
                (w.id, machine)
            })
            .collect();

        Ok(PositionSim {
            sc,
            prep,
            pos_index,
            position,
            horizon_ns: u64::from(sc.rounds_per_position) * to_ns(sc.duty.measure_interval_ms),
            airtime_ns: to_ns(sc.duty.tx_airtime_ms),
            adc_ns: to_ns(sc.duty.adc_sample_ms),
            sample_period_ns: to_ns(sc.duty.sample_period_ms),
            preamble_ns: to_ns(sc.protocol.preamble_ms),
            measure_interval_ns: to_ns(sc.duty.measure_interval_ms),
            now_ns: 0,
            events: BinaryHeap::new(),
            seq: 0,
            flights: Vec::new(),
            rt,
            mobile,
            anchors,
            wpas,
            chargers_on: vec![true; sc.chargers.len()],
            charger_contrib,
            rx_power,
            current_round: 0,
            rounds: Vec::new(),
            trace: Vec::new(),
        })
    }

    fn run(mut self) -> Result<PositionOutcome> {
        let wpa_ids: Vec<NodeId> = self.wpas.keys().copied().collect();
        for id in wpa_ids {
            let phase_ms = match self.sc.node(id).and_then(|n| n.adc_phase_ms) {
                Some(p) => p,
                None => {
                    let mut rng =
                        stream(self.sc.seed, SALT_PHASE, u64::from(id), self.pos_index as u64, 0);
                    rng.gen::<f64>() * self.sc.duty.sample_period_ms
                }
            };
            self.push(to_ns(phase_ms), id, Ev::AdcTick(id));
        }
        self.push(0, self.mobile.id, Ev::RoundStart(0));

        while let Some(Reverse(qe)) = self.events.pop() {
            if qe.t_ns >= self.horizon_ns {
                break;
            }
            self.now_ns = qe.t_ns;
            self.handle(qe.ev)?;
        }

        // Charge the tail of the run against each node's final state.
        let horizon = self.horizon_ns;
        for rt in self.rt.values_mut() {
            rt.ledger.accumulate(rt.radio, to_ms(horizon - rt.since_ns));
            rt.since_ns = horizon;
        }

        Ok(PositionOutcome {
            index: self.pos_index,
            position: self.position,
            truth: ground_truth(self.sc, self.position)?,
            rounds: self.rounds,
            energy: self.rt.into_iter().map(|(id, rt)| (id, rt.ledger)).collect(),
            trace: self.trace,
        })
    }

    // -- event handling ----------------------------------------------------

    fn handle(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::ChargerOff(ci) => {
                self.chargers_on[ci] = false;
                self.trace(self.sc.chargers[ci].anchor, "charger_off", format!("charger={ci}"));
            }
            Ev::ChargerOn(ci) => {
                self.chargers_on[ci] = true;
                self.trace(self.sc.chargers[ci].anchor, "charger_on", format!("charger={ci}"));
            }
            Ev::TxStart(fi) => {
                if self.flights[fi].state != FlightState::Pending {
                    return Ok(());
                }
                self.flights[fi].state = FlightState::Air;
                let src = self.flights[fi].source;
                self.set_radio(src, RadioState::Tx);
                if let Some(wpa) = self.wpas.get_mut(&src) {
                    wpa.on_tx_start(to_ms(self.now_ns));
                }
                let detail = kind_label(&self.flights[fi].kind);
                self.trace(Some(src), "tx_start", detail);
            }
            Ev::TxEnd(fi) => {
                if self.flights[fi].state != FlightState::Air {
                    return Ok(());
                }
                self.flights[fi].state = FlightState::Done;
                let src = self.flights[fi].source;
                let next = if self.rt[&src].rx_until_ns.is_some_and(|u| u > self.now_ns) {
                    RadioState::Rx
                } else {
                    RadioState::Wfi
                };
                self.set_radio(src, next);
                let detail = kind_label(&self.flights[fi].kind);
                self.trace(Some(src), "tx_end", detail);

                let now_ms = to_ms(self.now_ns);
                match self.rt[&src].role {
                    Role::Mobile => {
                        if let PacketKind::Request { tier, .. } = self.flights[fi].kind {
                            let actions = self.mobile.on_tx_done(now_ms, tier);
                            self.apply_actions(src, actions)?;
                        }
                    }
                    Role::Wpa => {
                        let actions =
                            self.wpas.get_mut(&src).expect("wpa exists").on_tx_done(now_ms);
                        self.apply_actions(src, actions)?;
                    }
                    Role::Anchor => {}
                }
                self.try_deliver(fi)?;
            }
            Ev::AdcTick(node) => {
                let next = self.now_ns + self.sample_period_ns;
                self.push(next, node, Ev::AdcTick(node));
                if !self.wpas[&node].is_sleeping() {
                    // The controller is mid-exchange; this sample is skipped.
                    return Ok(());
                }
                let reading = self.reading_dbm_at(node);
                {
                    // The conversion occupies the window just before the
                    // decision instant, clipped to the current sleep span.
                    let now = self.now_ns;
                    let adc_ns = self.adc_ns;
                    let rt = self.rt.get_mut(&node).expect("node exists");
                    debug_assert_eq!(rt.radio, RadioState::Wfi);
                    let conv_start = rt.since_ns.max(now.saturating_sub(adc_ns));
                    rt.ledger.accumulate(RadioState::Wfi, to_ms(conv_start - rt.since_ns));
                    rt.ledger.accumulate(RadioState::Adc, to_ms(now - conv_start));
                    rt.since_ns = now;
                }
                let actions = self
                    .wpas
                    .get_mut(&node)
                    .expect("wpa exists")
                    .on_adc_sample(to_ms(self.now_ns), reading);
                if !actions.is_empty() {
                    self.trace(Some(node), "wake", format!("reading_dbm={reading:.3}"));
                    self.apply_actions(node, actions)?;
                }
            }
            Ev::RxClose(node, epoch) => {
                if self.rt[&node].rx_epoch != epoch {
                    return Ok(());
                }
                {
                    let rt = self.rt.get_mut(&node).expect("node exists");
                    rt.rx_until_ns = None;
                    rt.rx_epoch += 1;
                }
                if self.rt[&node].radio == RadioState::Rx {
                    self.set_radio(node, RadioState::Wfi);
                }
                self.trace(Some(node), "rx_close", "window expired".into());
                let now_ms = to_ms(self.now_ns);
                let actions = match self.rt[&node].role {
                    Role::Mobile => self.mobile.on_rx_close(now_ms),
                    Role::Wpa => {
                        self.wpas.get_mut(&node).expect("wpa exists").on_rx_close(now_ms)
                    }
                    Role::Anchor => Vec::new(),
                };
                self.apply_actions(node, actions)?;
            }
            Ev::RoundStart(round) => {
                self.current_round = round;
                let xi_dbm = (self.sc.mode == Mode::CellLevel)
                    .then(|| self.reading_dbm_at(self.mobile.id));
                let detail = match xi_dbm {
                    Some(xi) => format!("round={round} xi_dbm={xi:.3}"),
                    None => format!("round={round}"),
                };
                let mobile_id = self.mobile.id;
                self.trace(Some(mobile_id), "round_start", detail);
                let actions = self.mobile.on_round_start(to_ms(self.now_ns), xi_dbm);
                self.apply_actions(mobile_id, actions)?;
                if round + 1 < self.sc.rounds_per_position {
                    let t = u64::from(round + 1) * self.measure_interval_ns;
                    self.push(t, mobile_id, Ev::RoundStart(round + 1));
                }
            }
        }
        Ok(())
    }

    fn apply_actions(&mut self, owner: NodeId, actions: Vec<Action>) -> Result<()> {
        for action in actions {
            match action {
                Action::Transmit { kind, start_ms } => {
                    let start_ns = to_ns(start_ms);
                    debug_assert!(start_ns >= self.now_ns, "transmissions never start in the past");
                    let end_ns = start_ns + self.airtime_ns;
                    let fi = self.flights.len();
                    self.flights.push(Flight {
                        source: owner,
                        kind,
                        start_ns,
                        end_ns,
                        state: FlightState::Pending,
                        delivered: false,
                    });
                    self.push(start_ns, owner, Ev::TxStart(fi));
                    self.push(end_ns, owner, Ev::TxEnd(fi));
                }
                Action::ChargerPulse { off_ms, on_ms } => {
                    for (ci, ch) in self.sc.chargers.iter().enumerate() {
                        if ch.anchor == Some(owner) {
                            self.push(to_ns(off_ms), owner, Ev::ChargerOff(ci));
                            self.push(to_ns(on_ms), owner, Ev::ChargerOn(ci));
                        }
                    }
                }
                Action::OpenRx { close_ms } => {
                    let close_ns = to_ns(close_ms);
                    let epoch = {
                        let rt = self.rt.get_mut(&owner).expect("node exists");
                        debug_assert_ne!(rt.radio, RadioState::Tx, "cannot listen while sending");
                        rt.rx_until_ns = Some(close_ns);
                        rt.rx_epoch += 1;
                        rt.rx_epoch
                    };
                    self.set_radio(owner, RadioState::Rx);
                    self.push(close_ns, owner, Ev::RxClose(owner, epoch));
                    self.trace(Some(owner), "rx_open", format!("until_ms={close_ms:.6}"));
                }
                Action::CloseRx => {
                    let was_open = {
                        let rt = &self.rt[&owner];
                        rt.rx_until_ns.is_some() || rt.radio == RadioState::Rx
                    };
                    if was_open {
                        {
                            let rt = self.rt.get_mut(&owner).expect("node exists");
                            rt.rx_until_ns = None;
                            rt.rx_epoch += 1;
                        }
                        if self.rt[&owner].radio == RadioState::Rx {
                            self.set_radio(owner, RadioState::Wfi);
                        }
                        self.trace(Some(owner), "rx_close", "closed".into());
                    }
                }
                Action::CancelPendingTx => {
                    for fi in 0..self.flights.len() {
                        if self.flights[fi].source == owner
                            && self.flights[fi].state == FlightState::Pending
                        {
                            self.flights[fi].state = FlightState::Cancelled;
                            let detail = kind_label(&self.flights[fi].kind);
                            self.trace(Some(owner), "tx_cancel", detail);
                        }
                    }
                }
                Action::RoundDone(rec) => {
                    self.trace(
                        Some(owner),
                        "round_done",
                        format!(
                            "round={} room={} cell={} flagged={}",
                            rec.round,
                            opt_id(rec.room),
                            opt_id(rec.cell),
                            rec.flagged
                        ),
                    );
                    self.rounds.push(rec);
                }
            }
        }
        Ok(())
    }

    // -- delivery ------------------------------------------------------------

    /// Collects the overlap closure around a finished flight and delivers it
    /// once every member has ended. Earlier enders defer to the last one.
    fn try_deliver(&mut self, fi: usize) -> Result<()> {
        let mut cohort = vec![fi];
        let mut cursor = 0;
        while cursor < cohort.len() {
            let g = cohort[cursor];
            cursor += 1;
            let (gs, ge) = (self.flights[g].start_ns, self.flights[g].end_ns);
            for hi in 0..self.flights.len() {
                let h = &self.flights[hi];
                let in_play =
                    !h.delivered && matches!(h.state, FlightState::Air | FlightState::Done);
                if in_play && h.start_ns < ge && gs < h.end_ns && !cohort.contains(&hi) {
                    cohort.push(hi);
                }
            }
        }
        if cohort.iter().any(|&i| self.flights[i].state != FlightState::Done) {
            return Ok(());
        }
        cohort.sort_unstable();
        self.deliver(&cohort)
    }

    fn deliver(&mut self, cohort: &[usize]) -> Result<()> {
        for &i in cohort {
            self.flights[i].delivered = true;
        }
        let sources: BTreeSet<NodeId> = cohort.iter().map(|&i| self.flights[i].source).collect();
        let receivers: Vec<NodeId> = self
            .rt
            .iter()
            .filter(|(id, rt)| rt.radio == RadioState::Rx && !sources.contains(id))
            .map(|(&id, _)| id)
            .collect();
        for n in receivers {
            self.deliver_to(n, cohort)?;
        }
        Ok(())
    }

    fn deliver_to(&mut self, n: NodeId, cohort: &[usize]) -> Result<()> {
        let mut audible: Vec<(usize, f64)> = cohort
            .iter()
            .filter_map(|&i| {
                let p = self.rx_power[&(self.flights[i].source, n)];
                self.sc.channel.audible(p).then_some((i, p))
            })
            .collect();
        if audible.is_empty() {
            return Ok(());
        }
        audible.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.flights[a.0].source.cmp(&self.flights[b.0].source))
        });
        let seq = {
            let rt = self.rt.get_mut(&n).expect("node exists");
            rt.reception_seq += 1;
            rt.reception_seq
        };

        let thr = self.sc.channel.capture_threshold_db;
        let captured = audible.len() == 1 || audible[0].1 - audible[1].1 >= thr;
        if captured {
            let (wi, power) = audible[0];
            let source = self.flights[wi].source;
            match self.flights[wi].kind.clone() {
                PacketKind::Reply { payload } => {
                    self.trace(
                        Some(n),
                        "reception",
                        format!("sources={source} power_dbm={power:.3} captured=true crc=true"),
                    );
                    self.dispatch_chips(n, payload, true)?;
                }
                kind => {
                    self.trace(
                        Some(n),
                        "reception",
                        format!(
                            "sources={source} power_dbm={power:.3} captured=true kind={}",
                            kind_name(&kind)
                        ),
                    );
                    self.dispatch_control(n, source, kind)?;
                }
            }
            return Ok(());
        }

        let mixing: Vec<(usize, f64)> = audible
            .iter()
            .copied()
            .filter(|&(_, p)| audible[0].1 - p < thr)
            .collect();
        let sources_label = join_ids(mixing.iter().map(|&(i, _)| self.flights[i].source));
        if mixing
            .iter()
            .any(|&(i, _)| !matches!(self.flights[i].kind, PacketKind::Reply { .. }))
        {
            // A header-framed packet caught in a power tie is unreadable.
            self.trace(
                Some(n),
                "reception",
                format!("sources={sources_label} outcome=garbled"),
            );
            return Ok(());
        }
        let first_start = mixing.iter().map(|&(i, _)| self.flights[i].start_ns).min();
        let last_start = mixing.iter().map(|&(i, _)| self.flights[i].start_ns).max();
        let span_ns = last_start.unwrap_or(0) - first_start.unwrap_or(0);
        if span_ns > self.preamble_ns {
            // Starts too far apart to stay chip-aligned: no capture, no mix.
            self.trace(
                Some(n),
                "reception",
                format!(
                    "sources={sources_label} outcome=desynchronized span_ms={:.6}",
                    to_ms(span_ns)
                ),
            );
            return Ok(());
        }

        let arrivals: Vec<Arrival> = mixing
            .iter()
            .map(|&(i, power)| Arrival {
                source: self.flights[i].source,
                power_dbm: power,
                payload: match &self.flights[i].kind {
                    PacketKind::Reply { payload } => payload.clone(),
                    _ => unreachable!("mixing set is reply-only"),
                },
            })
            .collect();
        let mut rng = stream(self.sc.seed, SALT_CHIPS, u64::from(n), self.pos_index as u64, seq);
        let rec = resolve_reception(&arrivals, &self.sc.channel, &mut rng)?
            .expect("audible arrivals always resolve");
        self.trace(
            Some(n),
            "reception",
            format!(
                "sources={} power_dbm={:.3} captured=false crc={}",
                join_ids(rec.contributors.iter().copied()),
                rec.power_dbm,
                rec.crc_ok
            ),
        );
        self.dispatch_chips(n, rec.payload, rec.crc_ok)
    }

    fn dispatch_chips(&mut self, n: NodeId, payload: Payload, crc_ok: bool) -> Result<()> {
        if self.rt[&n].role != Role::Mobile {
            // Replies carry identifiers for the requester alone.
            return Ok(());
        }
        let decoded: Vec<DecodeResult> = match &self.prep.codebooks {
            Some((orth, fec)) => codec::decode(&payload, orth, fec)?,
            None => {
                if crc_ok {
                    let bytes = payload.to_bytes()?;
                    match bytes.split_first() {
                        Some((&b, rest)) if rest.iter().all(|&x| x == b) => {
                            vec![DecodeResult { id: usize::from(b), distance: 0 }]
                        }
                        _ => Vec::new(),
                    }
                } else {
                    Vec::new()
                }
            }
        };
        if decoded.is_empty() {
            // Nothing intelligible; the listen window stays open.
            return Ok(());
        }
        self.trace(
            Some(n),
            "decode",
            format!("ids={}", join_ids(decoded.iter().map(|d| d.id as NodeId))),
        );
        let actions = self.mobile.on_replies(to_ms(self.now_ns), &decoded);
        self.apply_actions(n, actions)
    }

    fn dispatch_control(&mut self, n: NodeId, source: NodeId, kind: PacketKind) -> Result<()> {
        let packet = Packet { source, kind };
        let now_ms = to_ms(self.now_ns);
        match self.rt[&n].role {
            Role::Anchor => {
                let jitter_ms = self.jitter_for(n, &packet.kind);
                let actions = self
                    .anchors
                    .get_mut(&n)
                    .expect("anchor exists")
                    .on_packet(now_ms, &packet, jitter_ms);
                self.apply_actions(n, actions)
            }
            Role::Wpa => {
                let actions =
                    self.wpas.get_mut(&n).expect("wpa exists").on_packet(now_ms, &packet);
                self.apply_actions(n, actions)
            }
            Role::Mobile => Ok(()),
        }
    }

    /// Turnaround spread for one anchor's reply, drawn fresh per round.
    fn jitter_for(&self, anchor: NodeId, kind: &PacketKind) -> f64 {
        let max = self.sc.protocol.reply_jitter_ms;
        if max <= 0.0 || !matches!(kind, PacketKind::Request { tier: Tier::Room, .. }) {
            return 0.0;
        }
        let mut rng = stream(
            self.sc.seed,
            SALT_JITTER,
            u64::from(anchor),
            self.pos_index as u64,
            u64::from(self.current_round),
        );
        rng.gen::<f64>() * max
    }

    // -- plumbing ------------------------------------------------------------

    fn push(&mut self, t_ns: u64, node: NodeId, ev: Ev) {
        self.seq += 1;
        self.events.push(Reverse(QueuedEvent { t_ns, prio: ev.priority(), node, seq: self.seq, ev }));
    }

    fn set_radio(&mut self, node: NodeId, state: RadioState) {
        let now = self.now_ns;
        let rt = self.rt.get_mut(&node).expect("node exists");
        if now > rt.since_ns {
            rt.ledger.accumulate(rt.radio, to_ms(now - rt.since_ns));
        }
        rt.radio = state;
        rt.since_ns = now;
    }

    /// Instantaneous harvested-power reading at a node (dBm), floored at
    /// the ambient level an energy detector reports in silence.
    fn reading_dbm_at(&self, node: NodeId) -> f64 {
        let sum_mw: f64 = self
            .chargers_on
            .iter()
            .zip(&self.charger_contrib)
            .filter(|(&on, _)| on)
            .map(|(_, contrib)| contrib[&node])
            .sum();
        mw_to_dbm(sum_mw.max(dbm_to_mw(self.sc.channel.ambient_floor_dbm)))
    }

    fn trace(&mut self, node: Option<NodeId>, event: &'static str, detail: String) {
        self.trace.push(TraceRow { t_ns: self.now_ns, node, event, detail });
    }
}

fn opt_id(id: Option<NodeId>) -> String {
    id.map_or_else(|| "-".into(), |v| v.to_string())
}

fn join_ids(ids: impl Iterator<Item = NodeId>) -> String {
    let mut out = String::new();
    for (i, id) in ids.enumerate() {
        if i > 0 {
            out.push('|');
        }
        out.push_str(&id.to_string());
    }
    out
}

fn kind_name(kind: &PacketKind) -> &'static str {
    match kind {
        PacketKind::Request { tier: Tier::Room, .. } => "request.room",
        PacketKind::Request { tier: Tier::Cell, .. } => "request.cell",
        PacketKind::Reply { .. } => "reply",
        PacketKind::Sleep { .. } => "sleep",
    }
}

fn kind_label(kind: &PacketKind) -> String {
    match kind {
        PacketKind::Request { tier, xi_dbm, no_reply, .. } => {
            let tier = match tier {
                Tier::Room => "room",
                Tier::Cell => "cell",
            };
            match xi_dbm {
                Some(xi) => format!("kind=request tier={tier} flagged={no_reply} xi_dbm={xi:.3}"),
                None => format!("kind=request tier={tier} flagged={no_reply}"),
            }
        }
        PacketKind::Reply { payload } => match payload.to_hex() {
            Ok(hex) => format!("kind=reply payload={hex}"),
            Err(_) => format!("kind=reply chips={}", payload.len()),
        },
        PacketKind::Sleep { targets } => {
            format!("kind=sleep targets={}", join_ids(targets.iter().copied()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room_level_toml() -> String {
        r#"
            name = "engine-room"
            mode = "wiploc"
            seed = 11
            rounds_per_position = 3
            truth = "voronoi"
            positions = [[2.0, 1.0]]

            [[geometry.rooms]]
            id = 1
            rect = [0.0, 0.0, 8.0, 4.0]

            [[nodes]]
            id = 1
            role = "anchor"
            position = [2.0, 2.0]
            tx_power_dbm = 4.0

            [[nodes]]
            id = 100
            role = "mobile"
            position = [2.0, 1.0]
            tx_power_dbm = 4.0
        "#
        .to_string()
    }

    fn cell_level_toml() -> String {
        r#"
            name = "engine-cell"
            mode = "wiploc++"
            seed = 11
            rounds_per_position = 1
            truth = "cell"
            positions = [[3.0, 1.0]]

            [[geometry.rooms]]
            id = 1
            rect = [0.0, 0.0, 8.0, 4.0]

            [[geometry.cells]]
            owner = 2
            rect = [0.0, 0.0, 8.0, 4.0]

            [[nodes]]
            id = 1
            role = "anchor"
            position = [0.5, 2.0]
            tx_power_dbm = 4.0

            [[nodes]]
            id = 2
            role = "wpa"
            position = [3.0, 3.0]
            tx_power_dbm = 0.0
            adc_phase_ms = 4.91

            [[nodes]]
            id = 100
            role = "mobile"
            position = [3.0, 1.0]
            tx_power_dbm = 4.0

            [[chargers]]
            position = [3.0, 2.0]
            anchor = 1
        "#
        .to_string()
    }

    #[test]
    fn room_level_round_decodes_the_anchor() {
        let sc = Scenario::from_toml_str(&room_level_toml()).unwrap();
        let out = run(&sc).unwrap();
        assert_eq!(out.positions.len(), 1);
        let pos = &out.positions[0];
        assert_eq!(pos.rounds.len(), 3);
        for rec in &pos.rounds {
            assert_eq!(rec.room, Some(1));
            assert!(rec.cell.is_none());
            assert_eq!(rec.room_decoded.len(), 1);
        }
        assert_eq!(pos.truth.voronoi, Some(1));
    }

    #[test]
    fn mobile_energy_reflects_early_window_close() {
        let mut sc = Scenario::from_toml_str(&room_level_toml()).unwrap();
        sc.rounds_per_position = 1;
        let out = run(&sc).unwrap();
        let mobile = &out.positions[0].energy[&100];
        // One request sent, one reply heard, window closed at the decode.
        assert!((mobile.tx_ms - 0.8).abs() < 1e-9, "tx {}", mobile.tx_ms);
        assert!((mobile.rx_ms - 0.8).abs() < 1e-9, "rx {}", mobile.rx_ms);
        assert!((mobile.total_ms() - 1000.0).abs() < 1e-9);
        let avg = mobile.average_power_mw().unwrap();
        assert!((avg - 0.1946).abs() < 1e-9, "avg {avg}");
    }

    #[test]
    fn reruns_are_bit_identical() {
        let sc = Scenario::from_toml_str(&room_level_toml()).unwrap();
        let a = run(&sc).unwrap();
        let b = run(&sc).unwrap();
        assert_eq!(a.positions[0].trace, b.positions[0].trace);
        assert_eq!(a.positions[0].rounds, b.positions[0].rounds);
    }

    #[test]
    fn cell_round_wakes_wpa_and_decodes_it() {
        let sc = Scenario::from_toml_str(&cell_level_toml()).unwrap();
        let out = run(&sc).unwrap();
        let pos = &out.positions[0];
        assert_eq!(pos.rounds.len(), 1);
        let rec = &pos.rounds[0];
        assert_eq!(rec.room, Some(1));
        assert_eq!(rec.cell, Some(2), "wpa must answer the refined request");
        assert!(!rec.flagged);

        // Wake at the first sample after the charger cut: radio on from
        // 4.91 until the reply slot at 13.2, then one reply.
        let wpa = &pos.energy[&2];
        assert!((wpa.rx_ms - 8.29).abs() < 1e-9, "rx {}", wpa.rx_ms);
        assert!((wpa.tx_ms - 0.8).abs() < 1e-9, "tx {}", wpa.tx_ms);
        assert!((wpa.adc_ms - 65.0).abs() < 1e-9, "adc {}", wpa.adc_ms);
        assert!((wpa.wfi_ms - 925.91).abs() < 1e-9, "wfi {}", wpa.wfi_ms);

        let wakes: Vec<_> = pos.trace.iter().filter(|r| r.event == "wake").collect();
        assert_eq!(wakes.len(), 1);
        assert_eq!(wakes[0].t_ns, 4_910_000);
    }

    #[test]
    fn empty_cell_stage_flags_and_retry_flips_the_sleep_set() {
        let mut sc = Scenario::from_toml_str(&cell_level_toml()).unwrap();
        // Beyond harvest range the requester reads the ambient floor, so
        // the close set (the only wpa) is put to sleep and nothing answers;
        // the flagged retry wakes it again.
        sc.positions = vec![Point::new(7.9, 1.9)];
        sc.rounds_per_position = 2;
        let out = run(&sc).unwrap();
        let rounds = &out.positions[0].rounds;
        assert_eq!(rounds.len(), 2);
        assert_eq!(rounds[0].cell, None);
        assert!(!rounds[0].flagged);
        assert_eq!(rounds[1].cell, Some(2), "retry must reach the pruned wpa");
        assert!(rounds[1].flagged);
    }
}
