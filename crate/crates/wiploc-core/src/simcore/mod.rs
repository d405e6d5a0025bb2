//! Scenario description, discrete-event engine, scoring, and parameter
//! sweeps.

pub mod engine;
pub mod metrics;
pub mod scenario;

pub use engine::{run, PositionOutcome, SimOutput, TraceRow};
pub use metrics::{
    analyze, write_energy_csv, write_report, write_trace, EnergyRow, MetricsReport,
    PositionMetrics,
};
pub use scenario::{
    ground_truth, is_correct, settled_harvest_mw, wpa_readings_dbm, CellSpec, ChargerSpec,
    Geometry, GroundTruth, ProfilesConfig, ProtocolConfig, RoomSpec, Scenario, TruthRule,
};

use std::str::FromStr;

use crate::energy::duty_cycle_power_mw;
use crate::error::{Error, Result};
use crate::protocol::Role;

/// Scenario knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Keep only the first n anchors of the node list.
    AnchorCount,
    /// Detector sampling period t_c (ms).
    SamplePeriod,
    /// Power margin needed to capture a collision (dB).
    CaptureThreshold,
    /// Transmit power of every anchor (dBm).
    TxPower,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor-count" => Ok(SweepParam::AnchorCount),
            "sample-period" | "t-c" => Ok(SweepParam::SamplePeriod),
            "capture-threshold" => Ok(SweepParam::CaptureThreshold),
            "tx-power" => Ok(SweepParam::TxPower),
            other => Err(Error::InvalidParameter(format!(
                "unknown sweep parameter {other:?}; expected anchor-count, \
                 sample-period (alias t-c), capture-threshold, or tx-power"
            ))),
        }
    }
}

/// Copies `base` with one knob set to `value` and re-validates.
pub fn apply_sweep(base: &Scenario, param: SweepParam, value: f64) -> Result<Scenario> {
    let mut sc = base.clone();
    match param {
        SweepParam::AnchorCount => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "anchor count must be a positive integer, got {value}"
                )));
            }
            let keep = value as usize;
            let available = sc.anchors().count();
            if keep > available {
                return Err(Error::InvalidParameter(format!(
                    "anchor count {keep} exceeds the {available} anchors defined"
                )));
            }
            let mut seen = 0usize;
            sc.nodes.retain(|n| {
                if n.role != Role::Anchor {
                    return true;
                }
                seen += 1;
                seen <= keep
            });
        }
        SweepParam::SamplePeriod => sc.duty.sample_period_ms = value,
        SweepParam::CaptureThreshold => sc.channel.capture_threshold_db = value,
        SweepParam::TxPower => {
            for n in sc.nodes.iter_mut().filter(|n| n.role == Role::Anchor) {
                n.tx_power_dbm = value;
            }
        }
    }
    sc.name = format!("{}@{}", base.name, trim_float(value));
    sc.validate()?;
    Ok(sc)
}

/// One executed sweep value.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub output: SimOutput,
    pub report: MetricsReport,
    /// Closed-form duty-cycle average power at this sampling period,
    /// present only for sampling-period sweeps.
    pub duty_power_mw: Option<f64>,
}

/// Runs one sweep value. Points after the first get their own seeds, so a
/// single-value sweep reproduces a plain run of the modified scenario.
pub fn sweep_point(
    base: &Scenario,
    param: SweepParam,
    value: f64,
    index: usize,
) -> Result<SweepPoint> {
    let mut sc = apply_sweep(base, param, value)?;
    sc.seed = base.seed.wrapping_add(index as u64);
    let output = run(&sc)?;
    let report = analyze(&sc, &output)?;
    let duty_power_mw = (param == SweepParam::SamplePeriod)
        .then(|| duty_cycle_power_mw(&sc.profiles.wpa, &sc.duty))
        .transpose()?;
    Ok(SweepPoint { value, output, report, duty_power_mw })
}

/// Runs the scenario once per value, in input order.
pub fn sweep(base: &Scenario, param: SweepParam, values: &[f64]) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one value".into()));
    }
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| sweep_point(base, param, v, i))
        .collect()
}

fn trim_float(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep_base_toml() -> String {
        r#"
            name = "sweep-base"
            mode = "wiploc"
            seed = 21
            rounds_per_position = 2
            truth = "voronoi"
            positions = [[1.0, 1.0]]

            [[geometry.rooms]]
            id = 1
            rect = [0.0, 0.0, 6.0, 2.0]

            [[nodes]]
            id = 1
            role = "anchor"
            position = [0.5, 1.0]
            tx_power_dbm = 4.0

            [[nodes]]
            id = 2
            role = "anchor"
            position = [5.5, 1.0]
            tx_power_dbm = 4.0

            [[nodes]]
            id = 100
            role = "mobile"
            position = [1.0, 1.0]
            tx_power_dbm = 4.0
        "#
        .to_string()
    }

    #[test]
    fn anchor_count_keeps_a_prefix_of_the_anchor_list() {
        let base = Scenario::from_toml_str(&sweep_base_toml()).unwrap();
        let one = apply_sweep(&base, SweepParam::AnchorCount, 1.0).unwrap();
        assert_eq!(one.anchors().map(|a| a.id).collect::<Vec<_>>(), vec![1]);
        assert!(one.mobile().id == 100, "non-anchor nodes survive the cut");
        assert!(apply_sweep(&base, SweepParam::AnchorCount, 3.0).is_err());
        assert!(apply_sweep(&base, SweepParam::AnchorCount, 1.5).is_err());
    }

    #[test]
    fn single_value_sweep_matches_a_plain_run() {
        let base = Scenario::from_toml_str(&sweep_base_toml()).unwrap();
        let points = sweep(&base, SweepParam::TxPower, &[4.0]).unwrap();
        assert_eq!(points.len(), 1);
        let direct = run(&apply_sweep(&base, SweepParam::TxPower, 4.0).unwrap()).unwrap();
        assert_eq!(points[0].output.positions[0].trace, direct.positions[0].trace);
    }

    #[test]
    fn sample_period_sweep_carries_the_duty_power_curve() {
        let base = Scenario::from_toml_str(&sweep_base_toml()).unwrap();
        let points = sweep(&base, SweepParam::SamplePeriod, &[5.0, 10.0, 20.0]).unwrap();
        for p in &points {
            let mw = p.duty_power_mw.expect("sampling-period sweeps carry the curve");
            assert!(mw > 0.0);
        }
        let none = sweep(&base, SweepParam::CaptureThreshold, &[3.0]).unwrap();
        assert!(none[0].duty_power_mw.is_none());
    }

    #[test]
    fn parameter_names_parse_and_reject() {
        assert_eq!("anchor-count".parse::<SweepParam>().unwrap(), SweepParam::AnchorCount);
        assert_eq!("t-c".parse::<SweepParam>().unwrap(), SweepParam::SamplePeriod);
        assert_eq!("sample-period".parse::<SweepParam>().unwrap(), SweepParam::SamplePeriod);
        assert!("bandwidth".parse::<SweepParam>().is_err());
    }
}
