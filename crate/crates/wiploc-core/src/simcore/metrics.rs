//! Scoring and export of simulation results.
//!
//! A round counts as replied when the tier the truth rule grades produced
//! at least one decoded identifier, and as correct when the decided
//! identifier matches the truth at that position. Reply rate is per round;
//! accuracy is conditional on having replied, so unanswered rounds lower
//! the former and leave the latter alone.

use std::collections::BTreeSet;
use std::io::{self, Write};

use crate::energy::EnergyLedger;
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::protocol::{Mode, NodeId, Role};

use super::engine::{PositionOutcome, SimOutput};
use super::scenario::{is_correct, Scenario, TruthRule};

/// Scores for one mobile position.
#[derive(Debug, Clone)]
pub struct PositionMetrics {
    pub index: usize,
    pub position: Point,
    /// Identifier the truth rule expects here (room, owner, or cell).
    pub target: Option<u16>,
    pub rounds: u32,
    pub replies: u32,
    pub correct: u32,
    pub room_replies: u32,
    pub cell_replies: u32,
    /// Rounds whose room stage decoded two or more distinct identifiers.
    pub multi_decode_rounds: u32,
    /// Every identifier the room stage decoded here, across all rounds.
    pub room_ids: BTreeSet<NodeId>,
}

impl PositionMetrics {
    pub fn prr(&self) -> f64 {
        if self.rounds == 0 {
            return 0.0;
        }
        f64::from(self.replies) / f64::from(self.rounds)
    }

    /// Fraction of replied rounds that named the right identifier.
    /// Undefined when nothing ever replied.
    pub fn accuracy(&self) -> Option<f64> {
        (self.replies > 0).then(|| f64::from(self.correct) / f64::from(self.replies))
    }
}

/// Per-node energy, averaged over positions.
#[derive(Debug, Clone)]
pub struct EnergyRow {
    pub node: NodeId,
    pub role: Role,
    pub mean_energy_uj: f64,
    pub mean_avg_mw: f64,
}

/// Aggregate scores for one simulated scenario.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub name: String,
    pub mode: Mode,
    pub rule: TruthRule,
    pub seed: u64,
    pub positions: Vec<PositionMetrics>,
    pub energy: Vec<EnergyRow>,
    /// Unweighted mean of per-position reply rates.
    pub mean_prr: f64,
    /// Unweighted mean of per-position accuracies, skipping positions
    /// that never got an answer; absent if none did.
    pub mean_accuracy: Option<f64>,
    /// Replies over rounds, pooled across positions.
    pub pooled_prr: f64,
}

pub fn analyze(scenario: &Scenario, output: &SimOutput) -> Result<MetricsReport> {
    let rule = scenario.truth;
    let positions: Vec<PositionMetrics> = output
        .positions
        .iter()
        .map(|pos| score_position(scenario, pos, rule))
        .collect();

    let total_rounds: u32 = positions.iter().map(|p| p.rounds).sum();
    if total_rounds == 0 {
        return Err(Error::UndefinedMetrics(
            "reply rate over zero localization rounds is undefined".into(),
        ));
    }
    let mean_prr = mean(positions.iter().map(PositionMetrics::prr));
    let accuracies: Vec<f64> = positions.iter().filter_map(PositionMetrics::accuracy).collect();
    let mean_accuracy = (!accuracies.is_empty()).then(|| mean(accuracies.iter().copied()));
    let total_replies: u32 = positions.iter().map(|p| p.replies).sum();
    let pooled_prr = f64::from(total_replies) / f64::from(total_rounds);

    Ok(MetricsReport {
        name: output.name.clone(),
        mode: output.mode,
        rule,
        seed: output.seed,
        positions,
        energy: energy_rows(scenario, output),
        mean_prr,
        mean_accuracy,
        pooled_prr,
    })
}

fn score_position(scenario: &Scenario, pos: &PositionOutcome, rule: TruthRule) -> PositionMetrics {
    let mut m = PositionMetrics {
        index: pos.index,
        position: pos.position,
        target: pos.truth.target(rule),
        rounds: pos.rounds.len() as u32,
        replies: 0,
        correct: 0,
        room_replies: 0,
        cell_replies: 0,
        multi_decode_rounds: 0,
        room_ids: BTreeSet::new(),
    };
    for rec in &pos.rounds {
        let room_ok = !rec.room_decoded.is_empty();
        let cell_ok = !rec.cell_decoded.is_empty();
        m.room_replies += u32::from(room_ok);
        m.cell_replies += u32::from(cell_ok);
        let distinct: BTreeSet<usize> = rec.room_decoded.iter().map(|d| d.id).collect();
        m.multi_decode_rounds += u32::from(distinct.len() >= 2);
        m.room_ids.extend(distinct.iter().map(|&id| id as NodeId));

        let replied = match rule {
            TruthRule::Cell => cell_ok,
            TruthRule::Voronoi | TruthRule::Room => room_ok,
        };
        if replied {
            m.replies += 1;
            if is_correct(scenario, &pos.truth, rule, rec.room, rec.cell) {
                m.correct += 1;
            }
        }
    }
    m
}

fn energy_rows(scenario: &Scenario, output: &SimOutput) -> Vec<EnergyRow> {
    scenario
        .nodes
        .iter()
        .map(|node| {
            let ledgers: Vec<&EnergyLedger> = output
                .positions
                .iter()
                .filter_map(|p| p.energy.get(&node.id))
                .collect();
            let mean_energy_uj = mean(ledgers.iter().map(|l| l.energy_uj()));
            let mean_avg_mw =
                mean(ledgers.iter().map(|l| l.average_power_mw().unwrap_or(0.0)));
            EnergyRow { node: node.id, role: node.role, mean_energy_uj, mean_avg_mw }
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Mobile => "mobile",
        Role::Anchor => "anchor",
        Role::Wpa => "wpa",
    }
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

/// Event log as CSV. Details never contain commas, so the format stays flat.
pub fn write_trace(out: &mut impl Write, output: &SimOutput) -> io::Result<()> {
    writeln!(out, "position,time_ms,node,event,detail")?;
    for pos in &output.positions {
        for row in &pos.trace {
            let node = row.node.map_or_else(|| "-".to_string(), |n| n.to_string());
            writeln!(
                out,
                "{},{:.6},{},{},{}",
                pos.index,
                row.time_ms(),
                node,
                row.event,
                row.detail
            )?;
        }
    }
    Ok(())
}

/// Per-node dwell times and consumption as CSV, one row per position.
pub fn write_energy_csv(
    out: &mut impl Write,
    scenario: &Scenario,
    output: &SimOutput,
) -> io::Result<()> {
    writeln!(out, "position,node,role,tx_ms,rx_ms,adc_ms,wfi_ms,energy_uj,avg_mw")?;
    for pos in &output.positions {
        for (&node, ledger) in &pos.energy {
            let role = scenario.node(node).map_or("?", |n| role_name(n.role));
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                pos.index,
                node,
                role,
                ledger.tx_ms,
                ledger.rx_ms,
                ledger.adc_ms,
                ledger.wfi_ms,
                ledger.energy_uj(),
                ledger.average_power_mw().unwrap_or(0.0)
            )?;
        }
    }
    Ok(())
}

/// Human-readable summary of a scored run.
pub fn write_report(out: &mut impl Write, report: &MetricsReport) -> io::Result<()> {
    let mode = match report.mode {
        Mode::RoomLevel => "wiploc",
        Mode::CellLevel => "wiploc++",
    };
    let rule = match report.rule {
        TruthRule::Voronoi => "voronoi",
        TruthRule::Room => "room",
        TruthRule::Cell => "cell",
    };
    writeln!(out, "scenario {} (mode {mode}, truth {rule}, seed {})", report.name, report.seed)?;
    writeln!(out)?;
    for p in &report.positions {
        let acc = p
            .accuracy()
            .map_or_else(|| "   -  ".to_string(), |a| format!("{:5.1}%", a * 100.0));
        writeln!(
            out,
            "pos {:3} at ({:6.2} {:6.2})  target {:>4}  prr {:5.1}%  accuracy {acc}  replies {}/{}",
            p.index,
            p.position.x,
            p.position.y,
            p.target.map_or_else(|| "-".to_string(), |t| t.to_string()),
            p.prr() * 100.0,
            p.replies,
            p.rounds,
        )?;
    }
    writeln!(out)?;
    let acc = report
        .mean_accuracy
        .map_or_else(|| "-".to_string(), |a| format!("{:.1}%", a * 100.0));
    writeln!(
        out,
        "mean prr {:.1}%  mean accuracy {acc}  pooled prr {:.1}%",
        report.mean_prr * 100.0,
        report.pooled_prr * 100.0,
    )?;
    writeln!(out)?;
    writeln!(out, "average power (mW) and energy per position (uJ):")?;
    for row in &report.energy {
        writeln!(
            out,
            "  node {:3} ({:6})  {:10.4} mW  {:12.3} uJ",
            row.node,
            role_name(row.role),
            row.mean_avg_mw,
            row.mean_energy_uj,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::engine::run;

    fn two_anchor_toml() -> String {
        r#"
            name = "metrics-two"
            mode = "wiploc"
            seed = 5
            rounds_per_position = 4
            truth = "voronoi"
            positions = [[1.0, 1.0], [3.9, 1.0]]

            [protocol]
            reply_jitter_ms = 0.0

            [[geometry.rooms]]
            id = 1
            rect = [0.0, 0.0, 4.0, 2.0]

            [[nodes]]
            id = 1
            role = "anchor"
            position = [0.5, 1.0]
            tx_power_dbm = 4.0

            [[nodes]]
            id = 2
            role = "anchor"
            position = [3.5, 1.0]
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
    fn scores_replies_and_accuracy_per_position() {
        let sc = Scenario::from_toml_str(&two_anchor_toml()).unwrap();
        let out = run(&sc).unwrap();
        let report = analyze(&sc, &out).unwrap();
        assert_eq!(report.positions.len(), 2);
        for p in &report.positions {
            assert_eq!(p.rounds, 4);
            assert_eq!(p.replies, 4, "every round hears the dominant anchor");
            assert_eq!(p.accuracy(), Some(1.0));
        }
        assert_eq!(report.positions[0].target, Some(1));
        assert_eq!(report.positions[1].target, Some(2));
        assert!((report.mean_prr - 1.0).abs() < 1e-12);
        assert_eq!(report.mean_accuracy, Some(1.0));
    }

    #[test]
    fn csv_writers_emit_one_row_per_entry() {
        let sc = Scenario::from_toml_str(&two_anchor_toml()).unwrap();
        let out = run(&sc).unwrap();

        let mut trace = Vec::new();
        write_trace(&mut trace, &out).unwrap();
        let trace = String::from_utf8(trace).unwrap();
        let rows: usize = out.positions.iter().map(|p| p.trace.len()).sum();
        assert_eq!(trace.lines().count(), rows + 1);
        assert!(trace.starts_with("position,time_ms,node,event,detail\n"));
        // Five columns exactly: detail strings must stay comma-free.
        for line in trace.lines() {
            assert_eq!(line.matches(',').count(), 4, "bad row: {line}");
        }

        let mut energy = Vec::new();
        write_energy_csv(&mut energy, &sc, &out).unwrap();
        let energy = String::from_utf8(energy).unwrap();
        assert_eq!(energy.lines().count(), 1 + 2 * sc.nodes.len());
    }
}
