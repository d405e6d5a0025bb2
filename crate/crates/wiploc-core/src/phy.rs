//! Radio channel and RF power-transfer models.
//!
//! The channel is log-distance path loss with a per-wall penalty. Concurrent
//! transmissions at one receiver resolve by power capture: a clearly
//! strongest signal is received as sent, while near-equal signals mix chip
//! by chip (agreeing chips survive, disagreeing chips come out random).
//! Harvested power follows a piecewise log-log interpolation through
//! measured distance/power knots with a hard cutoff floor.

use rand::Rng;
use serde::Deserialize;

use crate::codec::Payload;
use crate::error::{Error, Result};

/// Distances below this clamp before entering the log (meters).
const MIN_PATH_DISTANCE_M: f64 = 0.01;

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

/// `mw` must be positive.
pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

// ---------------------------------------------------------------------------
// Channel
// ---------------------------------------------------------------------------

/// Log-distance propagation and receiver parameters.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    /// Path loss at one meter (dB).
    pub ref_loss_db: f64,
    /// Path loss exponent (2.0 gives free-space distance scaling).
    pub path_loss_exponent: f64,
    /// Extra loss per wall crossed (dB).
    pub wall_loss_db: f64,
    /// Signals below this receive power are inaudible (dBm).
    pub sensitivity_dbm: f64,
    /// A transmission this many dB above every other one is received
    /// as sent; anything closer to the strongest joins the chip mix.
    pub capture_threshold_db: f64,
    /// Reading of an energy detector when nothing is on the air (dBm).
    pub ambient_floor_dbm: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel {
            ref_loss_db: 40.0,
            path_loss_exponent: 2.0,
            wall_loss_db: 5.0,
            sensitivity_dbm: -90.0,
            capture_threshold_db: 3.0,
            ambient_floor_dbm: -95.0,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if !self.ref_loss_db.is_finite() || self.ref_loss_db < 0.0 {
            violations.push(format!("ref_loss_db must be finite and non-negative, got {}", self.ref_loss_db));
        }
        if !self.path_loss_exponent.is_finite() || self.path_loss_exponent <= 0.0 {
            violations.push(format!("path_loss_exponent must be positive, got {}", self.path_loss_exponent));
        }
        if !self.wall_loss_db.is_finite() || self.wall_loss_db < 0.0 {
            violations.push(format!("wall_loss_db must be non-negative, got {}", self.wall_loss_db));
        }
        if !self.capture_threshold_db.is_finite() || self.capture_threshold_db < 0.0 {
            violations.push(format!("capture_threshold_db must be non-negative, got {}", self.capture_threshold_db));
        }
        if !self.sensitivity_dbm.is_finite() {
            violations.push(format!("sensitivity_dbm must be finite, got {}", self.sensitivity_dbm));
        }
        if !self.ambient_floor_dbm.is_finite() || self.ambient_floor_dbm > self.sensitivity_dbm {
            violations.push(format!(
                "ambient_floor_dbm must not exceed sensitivity_dbm, got {} > {}",
                self.ambient_floor_dbm, self.sensitivity_dbm
            ));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(violations))
        }
    }

    /// Path loss over `distance_m` meters through `walls` walls (dB).
    pub fn path_loss_db(&self, distance_m: f64, walls: usize) -> f64 {
        let d = distance_m.max(MIN_PATH_DISTANCE_M);
        self.ref_loss_db
            + 10.0 * self.path_loss_exponent * d.log10()
            + walls as f64 * self.wall_loss_db
    }

    /// Receive power for a transmission at `tx_power_dbm` (dBm).
    pub fn rx_power_dbm(&self, tx_power_dbm: f64, distance_m: f64, walls: usize) -> f64 {
        tx_power_dbm - self.path_loss_db(distance_m, walls)
    }

    pub fn audible(&self, rx_power_dbm: f64) -> bool {
        rx_power_dbm >= self.sensitivity_dbm
    }
}

// ---------------------------------------------------------------------------
// Collision resolution
// ---------------------------------------------------------------------------

/// One transmission as seen at a particular receiver.
#[derive(Debug, Clone)]
pub struct Arrival {
    /// Transmitting node.
    pub source: u16,
    /// Power at the receiver (dBm).
    pub power_dbm: f64,
    pub payload: Payload,
}

/// What a receiver demodulates out of one slot of overlapping arrivals.
#[derive(Debug, Clone)]
pub struct Reception {
    /// Chip stream after capture or mixing.
    pub payload: Payload,
    /// True when the chips equal some contributor's transmission exactly,
    /// which is what a frame checksum would verify.
    pub crc_ok: bool,
    /// True when one signal captured the receiver outright.
    pub captured: bool,
    /// Strongest contributor's receive power (dBm).
    pub power_dbm: f64,
    /// Sources whose chips shaped the outcome, strongest first.
    pub contributors: Vec<u16>,
}

/// Resolves the arrivals overlapping one reception window.
///
/// Inaudible arrivals are dropped. A single audible arrival, or one at
/// least `capture_threshold_db` above the runner-up, is received as sent.
/// Otherwise every arrival within the threshold of the strongest joins a
/// chip mix: positions where all agree keep that chip, the rest flip a
/// fair coin per position. Audible arrivals below the mixing set are
/// treated as tolerable interference and discarded.
pub fn resolve_reception<R: Rng + ?Sized>(
    arrivals: &[Arrival],
    channel: &ChannelModel,
    rng: &mut R,
) -> Result<Option<Reception>> {
    let mut audible: Vec<&Arrival> = arrivals
        .iter()
        .filter(|a| channel.audible(a.power_dbm))
        .collect();
    if audible.is_empty() {
        return Ok(None);
    }
    // Power-descending order; equal powers break by source id so the
    // outcome never depends on input order.
    audible.sort_by(|a, b| {
        b.power_dbm
            .total_cmp(&a.power_dbm)
            .then_with(|| a.source.cmp(&b.source))
    });

    let strongest = audible[0];
    let captured = audible.len() == 1
        || strongest.power_dbm - audible[1].power_dbm >= channel.capture_threshold_db;
    if captured {
        return Ok(Some(Reception {
            payload: strongest.payload.clone(),
            crc_ok: true,
            captured: true,
            power_dbm: strongest.power_dbm,
            contributors: vec![strongest.source],
        }));
    }

    let mixing: Vec<&Arrival> = audible
        .iter()
        .copied()
        .filter(|a| strongest.power_dbm - a.power_dbm < channel.capture_threshold_db)
        .collect();
    let len = strongest.payload.len();
    if let Some(bad) = mixing.iter().find(|a| a.payload.len() != len) {
        return Err(Error::MalformedPayload { expected: len, got: bad.payload.len() });
    }

    let mut chips = Vec::with_capacity(len);
    for i in 0..len {
        let first = mixing[0].payload.chips()[i];
        if mixing.iter().all(|a| a.payload.chips()[i] == first) {
            chips.push(first);
        } else {
            chips.push(rng.gen::<bool>());
        }
    }
    let payload = Payload::from_chips(chips);
    let crc_ok = mixing.iter().any(|a| a.payload == payload);
    Ok(Some(Reception {
        payload,
        crc_ok,
        captured: false,
        power_dbm: strongest.power_dbm,
        contributors: mixing.iter().map(|a| a.source).collect(),
    }))
}

// ---------------------------------------------------------------------------
// RF power transfer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
struct WptConfig {
    knots: Vec<[f64; 2]>,
    #[serde(default = "WptModel::default_floor_mw")]
    floor_mw: f64,
}

/// Harvested power versus distance from a charger.
///
/// Between knots the power interpolates linearly in log-log space. Inside
/// the first knot the harvester saturates at the first knot's power; past
/// the last knot the final segment's slope extrapolates. Any value below
/// `floor_mw` is below the rectifier's startup threshold and harvests
/// nothing.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(try_from = "WptConfig")]
pub struct WptModel {
    knots: Vec<[f64; 2]>,
    floor_mw: f64,
}

impl TryFrom<WptConfig> for WptModel {
    type Error = Error;
    fn try_from(cfg: WptConfig) -> Result<Self> {
        WptModel::new(cfg.knots, cfg.floor_mw)
    }
}

impl Default for WptModel {
    fn default() -> Self {
        WptModel::reference()
    }
}

impl WptModel {
    fn default_floor_mw() -> f64 {
        0.05
    }

    /// Bench-measured harvest profile of the reference charger.
    pub fn reference() -> Self {
        WptModel {
            knots: vec![[1.0, 3.2], [3.0, 0.79], [4.0, 0.158]],
            floor_mw: Self::default_floor_mw(),
        }
    }

    /// `knots` are `[distance_m, power_mw]` pairs, at least two, with
    /// strictly increasing positive distances and positive powers.
    pub fn new(knots: Vec<[f64; 2]>, floor_mw: f64) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "harvest model needs at least two knots, got {}",
                knots.len()
            )));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if knots.iter().any(|k| !positive(k[0]) || !positive(k[1])) {
            return Err(Error::InvalidParameter(
                "harvest knot distances and powers must be positive".into(),
            ));
        }
        for pair in knots.windows(2) {
            if pair[0][0] >= pair[1][0] {
                return Err(Error::InvalidParameter(format!(
                    "harvest knot distances must strictly increase, got {} then {}",
                    pair[0][0], pair[1][0]
                )));
            }
        }
        if !floor_mw.is_finite() || floor_mw < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "floor_mw must be non-negative, got {floor_mw}"
            )));
        }
        Ok(WptModel { knots, floor_mw })
    }

    pub fn floor_mw(&self) -> f64 {
        self.floor_mw
    }

    /// Power available from one charger at `distance_m` with line of sight
    /// (mW). Walls block power transfer entirely; callers check that.
    pub fn harvested_power_mw(&self, distance_m: f64) -> f64 {
        let first = self.knots[0];
        if distance_m <= first[0] {
            return first[1];
        }
        let seg = self
            .knots
            .windows(2)
            .find(|pair| distance_m <= pair[1][0])
            .unwrap_or_else(|| &self.knots[self.knots.len() - 2..]);
        let (d0, p0) = (seg[0][0], seg[0][1]);
        let (d1, p1) = (seg[1][0], seg[1][1]);
        // The interpolant must pass through its knots exactly; the
        // log-space round trip below can be off by an ulp there.
        if distance_m == d1 {
            return if p1 < self.floor_mw { 0.0 } else { p1 };
        }
        let slope = (p1.log10() - p0.log10()) / (d1.log10() - d0.log10());
        let log_p = p0.log10() + slope * (distance_m.log10() - d0.log10());
        let mw = 10f64.powf(log_p);
        if mw < self.floor_mw {
            0.0
        } else {
            mw
        }
    }

    /// Farthest distance at which anything harvests, found by bisection
    /// on the monotone tail.
    pub fn cutoff_distance_m(&self) -> f64 {
        if self.floor_mw <= 0.0 {
            return f64::INFINITY;
        }
        let mut lo = self.knots[0][0];
        if self.harvested_power_mw(lo) < self.floor_mw {
            return 0.0;
        }
        let mut hi = lo;
        while self.harvested_power_mw(hi) >= self.floor_mw {
            hi *= 2.0;
            if hi > 1e6 {
                return f64::INFINITY;
            }
        }
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if self.harvested_power_mw(mid) >= self.floor_mw {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}
