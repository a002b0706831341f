//! Per-session trading contract: utilities, schedule, metering, billing,
//! finalization and disputes.
//!
//! Energy is a signed scalar: `x > 0` charges the EV from the grid, `x < 0`
//! discharges it. Utilities are concave piecewise quadratics:
//!
//! ```text
//! U_user(x >= 0) = alpha*x - beta*x^2 - p_c*x          U_EVCS(x >= 0) = (p_c - c_g)*x
//! U_user(x <  0) = p_d*s - gamma*s - delta*s^2, s=-x   U_EVCS(x <  0) = (v_g - p_d)*s
//! ```
//!
//! Prices are transfers, so the joint utility depends only on
//! `alpha, beta, c_g` on the charging side and `gamma, delta, v_g` on the
//! discharging side.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::Writer;
use crate::crypto::{hash, Digest32};
use crate::ledger::{DisputeCause, DisputeRecord, Ledger, LedgerError, Record, Resolution, TransactionRecord};

/// Default metering tolerance in kWh.
pub const DEFAULT_DELTA_E_METER_KWH: f64 = 0.05;

// Absorbs rounding in reading differences so a gap equal to the tolerance passes.
const METER_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContractError {
    #[error("no authenticated session")]
    NoSession,
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error("no reading from {0:?} for tick {1}")]
    MissingReading(MeterSource, u64),
    #[error("metering violation unresolved")]
    MeteringUnresolved,
    #[error("slot has not ended")]
    SlotNotEnded,
    #[error("no schedule for this slot")]
    NoSchedule,
    #[error("bill rejected, dispute opened: {0:?}")]
    Rejected(DisputeCause),
    #[error("slot already closed")]
    AlreadyClosed,
    #[error("slot neither finalized nor resolved")]
    UnresolvedSlot,
    #[error("ledger: {0}")]
    Ledger(LedgerError),
}

impl From<LedgerError> for ContractError {
    fn from(e: LedgerError) -> Self {
        ContractError::Ledger(e)
    }
}

/// Private valuation submitted by the EV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserUtility {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

/// Tariff and grid terms submitted by the station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationTerms {
    pub p_c: f64,
    pub p_d: f64,
    pub c_g: f64,
    pub v_g: f64,
    pub fee: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub p_c: f64,
    pub p_d: f64,
    pub c_g: f64,
    pub v_g: f64,
    pub fee: f64,
}

impl TradeParams {
    pub fn merge(user: &UserUtility, station: &StationTerms) -> Self {
        TradeParams {
            alpha: user.alpha,
            beta: user.beta,
            gamma: user.gamma,
            delta: user.delta,
            p_c: station.p_c,
            p_d: station.p_d,
            c_g: station.c_g,
            v_g: station.v_g,
            fee: station.fee,
        }
    }

    pub fn validate(&self) -> Result<(), ContractError> {
        let all = [
            self.alpha, self.beta, self.gamma, self.delta, self.p_c, self.p_d, self.c_g, self.v_g, self.fee,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(ContractError::InvalidParams("non-finite value"));
        }
        if self.beta <= 0.0 {
            return Err(ContractError::InvalidParams("beta must be > 0"));
        }
        if self.delta <= 0.0 {
            return Err(ContractError::InvalidParams("delta must be > 0"));
        }
        if [self.alpha, self.gamma, self.p_c, self.p_d, self.c_g, self.v_g, self.fee]
            .iter()
            .any(|v| *v < 0.0)
        {
            return Err(ContractError::InvalidParams("prices and coefficients must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBounds {
    pub x_min: f64,
    pub x_max: f64,
}

impl EnergyBounds {
    pub fn new(x_min: f64, x_max: f64) -> Result<Self, ContractError> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_min > 0.0 || x_max < 0.0 {
            return Err(ContractError::InvalidParams("bounds must satisfy x_min <= 0 <= x_max"));
        }
        Ok(EnergyBounds { x_min, x_max })
    }

    /// `x_max = min(limit, capacity - soc)`, `x_min = -min(limit, soc)`.
    pub fn from_battery(battery: &Battery) -> Self {
        let headroom = (battery.capacity_kwh - battery.soc_kwh).max(0.0);
        EnergyBounds {
            x_min: -battery.charger_limit_kwh.min(battery.soc_kwh.max(0.0)),
            x_max: battery.charger_limit_kwh.min(headroom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub soc_kwh: f64,
    pub capacity_kwh: f64,
    /// Energy the charger can move in one slot.
    pub charger_limit_kwh: f64,
    pub efficiency: f64,
}

impl Battery {
    /// Applies a slot's exchange: charge gains `x*eff`, discharge drains `|x|/eff`.
    pub fn apply(&mut self, x: f64) {
        let soc = if x >= 0.0 {
            self.soc_kwh + x * self.efficiency
        } else {
            self.soc_kwh + x / self.efficiency
        };
        self.soc_kwh = soc.clamp(0.0, self.capacity_kwh);
    }
}

pub fn joint_utility(x: f64, p: &TradeParams) -> f64 {
    if x >= 0.0 {
        (p.alpha - p.c_g) * x - p.beta * x * x
    } else {
        let s = -x;
        (p.v_g - p.gamma) * s - p.delta * s * s
    }
}

pub fn user_utility(x: f64, p: &TradeParams) -> f64 {
    if x >= 0.0 {
        p.alpha * x - p.beta * x * x - p.p_c * x
    } else {
        let s = -x;
        p.p_d * s - p.gamma * s - p.delta * s * s
    }
}

pub fn station_utility(x: f64, p: &TradeParams) -> f64 {
    if x >= 0.0 {
        (p.p_c - p.c_g) * x
    } else {
        (p.v_g - p.p_d) * -x
    }
}

/// Argmax of [`joint_utility`] over the bounds. Candidates are 0 and the two
/// branch vertices clamped into their half of the interval; equal utilities
/// resolve toward the smaller `|x|`.
pub fn compute_optimal_exchange(p: &TradeParams, bounds: &EnergyBounds) -> f64 {
    let charge = ((p.alpha - p.c_g) / (2.0 * p.beta)).clamp(0.0, bounds.x_max);
    let discharge = (-(p.v_g - p.gamma) / (2.0 * p.delta)).clamp(bounds.x_min, 0.0);
    let mut best = 0.0f64;
    let mut best_j = 0.0f64;
    for x in [charge, discharge] {
        let j = joint_utility(x, p);
        if j > best_j || (j == best_j && x.abs() < best.abs()) {
            best = x;
            best_j = j;
        }
    }
    best
}

/// Slot schedule published after utilities are submitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub slot: u64,
    pub params: TradeParams,
    pub bounds: EnergyBounds,
    pub x_star_kwh: f64,
    pub joint_utility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeterSource {
    Ev,
    Evcs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeterReading {
    pub source: MeterSource,
    pub slot: u64,
    pub cumulative_kwh: f64,
    pub tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeterViolation {
    pub tick: u64,
    pub ev_kwh: f64,
    pub evcs_kwh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeterStatus {
    Ok,
    Violation(MeterViolation),
}

/// Compares paired cumulative readings each tick. The first violation latches.
#[derive(Debug, Clone, PartialEq)]
pub struct MeteringMonitor {
    tolerance_kwh: f64,
    latched: Option<MeterViolation>,
    last_ev: Option<f64>,
    last_evcs: Option<f64>,
    checked_ticks: u64,
}

impl MeteringMonitor {
    pub fn new(tolerance_kwh: f64) -> Self {
        MeteringMonitor {
            tolerance_kwh,
            latched: None,
            last_ev: None,
            last_evcs: None,
            checked_ticks: 0,
        }
    }

    pub fn observe(&mut self, tick: u64, ev: Option<f64>, evcs: Option<f64>) -> Result<MeterStatus, ContractError> {
        let ev = ev.ok_or(ContractError::MissingReading(MeterSource::Ev, tick))?;
        let evcs = evcs.ok_or(ContractError::MissingReading(MeterSource::Evcs, tick))?;
        self.last_ev = Some(ev);
        self.last_evcs = Some(evcs);
        self.checked_ticks += 1;
        if self.latched.is_none() && (ev - evcs).abs() > self.tolerance_kwh + METER_EPSILON {
            self.latched = Some(MeterViolation {
                tick,
                ev_kwh: ev,
                evcs_kwh: evcs,
            });
        }
        Ok(self.status())
    }

    pub fn status(&self) -> MeterStatus {
        match self.latched {
            Some(v) => MeterStatus::Violation(v),
            None => MeterStatus::Ok,
        }
    }

    pub fn last_readings(&self) -> Option<(f64, f64)> {
        Some((self.last_ev?, self.last_evcs?))
    }

    pub fn checked_ticks(&self) -> u64 {
        self.checked_ticks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payer {
    Ev,
    Evcs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bill {
    pub slot: u64,
    pub energy_kwh: f64,
    pub energy_amount: f64,
    pub fee: f64,
    pub total: f64,
    pub payer: Payer,
}

/// Net money movement for the EV, the station and the operator collecting the fee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoneyFlows {
    pub ev: f64,
    pub evcs: f64,
    pub operator: f64,
}

impl Bill {
    pub fn flows(&self) -> MoneyFlows {
        match self.payer {
            Payer::Ev => MoneyFlows {
                ev: -(self.energy_amount + self.fee),
                evcs: self.energy_amount,
                operator: self.fee,
            },
            Payer::Evcs => MoneyFlows {
                ev: self.energy_amount - self.fee,
                evcs: -self.energy_amount,
                operator: self.fee,
            },
        }
    }
}

pub fn generate_bill(slot: u64, delivered_kwh: f64, p: &TradeParams) -> Bill {
    let (energy_amount, payer) = if delivered_kwh > 0.0 {
        (p.p_c * delivered_kwh, Payer::Ev)
    } else if delivered_kwh < 0.0 {
        (p.p_d * -delivered_kwh, Payer::Evcs)
    } else {
        (0.0, Payer::Ev)
    };
    Bill {
        slot,
        energy_kwh: delivered_kwh,
        energy_amount,
        fee: p.fee,
        total: energy_amount + p.fee,
        payer,
    }
}

/// The reading both meters support: the one closer to zero, keeping its sign.
pub fn undisputed_quantity(ev_kwh: f64, evcs_kwh: f64) -> f64 {
    if ev_kwh.abs() <= evcs_kwh.abs() {
        ev_kwh
    } else {
        evcs_kwh
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisputeEvidence {
    pub ev_kwh: Option<f64>,
    pub evcs_kwh: Option<f64>,
    pub expected_bill: Option<Bill>,
    pub presented_bill: Option<Bill>,
}

impl DisputeEvidence {
    pub fn digest(&self) -> Digest32 {
        let mut w = Writer::new();
        for v in [self.ev_kwh, self.evcs_kwh] {
            match v {
                Some(x) => {
                    w.u8(1);
                    w.f64(x);
                }
                None => {
                    w.u8(0);
                }
            }
        }
        for bill in [self.expected_bill, self.presented_bill] {
            match bill {
                Some(b) => {
                    w.u8(1);
                    w.u64(b.slot);
                    w.f64(b.energy_kwh);
                    w.f64(b.energy_amount);
                    w.f64(b.fee);
                    w.f64(b.total);
                    w.u8(matches!(b.payer, Payer::Evcs) as u8);
                }
                None => {
                    w.u8(0);
                }
            }
        }
        hash(&w.finish())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisputeCase {
    pub slot: u64,
    pub cause: DisputeCause,
    pub evidence: DisputeEvidence,
    pub resolution: Option<Resolution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotStatus {
    Open,
    Scheduled,
    Ended,
    Finalized,
    Disputed,
    Resolved,
}

/// One slot's outcome as kept in the EV's local log and the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotOutcome {
    pub slot: u64,
    pub x_star_kwh: f64,
    pub bill_total: Option<f64>,
    pub status: SlotStatus,
    pub dispute_cause: Option<DisputeCause>,
}

/// Contract instance bound to one authenticated session.
#[derive(Debug, Clone)]
pub struct Contract {
    pid: alloc::string::String,
    evcs_id: alloc::string::String,
    slot: u64,
    schedule: Option<Schedule>,
    monitor: MeteringMonitor,
    tolerance_kwh: f64,
    status: SlotStatus,
    bill: Option<Bill>,
    dispute: Option<DisputeCase>,
}

impl Contract {
    /// `authenticated` is whether the caller holds an established session key.
    pub fn open(
        pid: &str,
        evcs_id: &str,
        slot: u64,
        authenticated: bool,
        tolerance_kwh: f64,
    ) -> Result<Self, ContractError> {
        if !authenticated {
            return Err(ContractError::NoSession);
        }
        Ok(Contract {
            pid: pid.into(),
            evcs_id: evcs_id.into(),
            slot,
            schedule: None,
            monitor: MeteringMonitor::new(tolerance_kwh),
            tolerance_kwh,
            status: SlotStatus::Open,
            bill: None,
            dispute: None,
        })
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn pid(&self) -> &str {
        &self.pid
    }

    pub fn status(&self) -> SlotStatus {
        self.status
    }

    pub fn schedule(&self) -> Option<&Schedule> {
        self.schedule.as_ref()
    }

    pub fn dispute(&self) -> Option<&DisputeCase> {
        self.dispute.as_ref()
    }

    pub fn meter_status(&self) -> MeterStatus {
        self.monitor.status()
    }

    pub fn submit_utilities(
        &mut self,
        user: &UserUtility,
        station: &StationTerms,
        bounds: EnergyBounds,
    ) -> Result<Schedule, ContractError> {
        if self.status != SlotStatus::Open {
            return Err(ContractError::AlreadyClosed);
        }
        let params = TradeParams::merge(user, station);
        params.validate()?;
        EnergyBounds::new(bounds.x_min, bounds.x_max)?;
        let x = compute_optimal_exchange(&params, &bounds);
        let schedule = Schedule {
            slot: self.slot,
            params,
            bounds,
            x_star_kwh: x,
            joint_utility: joint_utility(x, &params),
        };
        self.schedule = Some(schedule);
        self.status = SlotStatus::Scheduled;
        Ok(schedule)
    }

    /// Feeds one tick of paired readings. A violation opens a MeterMismatch case.
    pub fn record_readings(
        &mut self,
        tick: u64,
        ev: Option<f64>,
        evcs: Option<f64>,
    ) -> Result<MeterStatus, ContractError> {
        if self.status != SlotStatus::Scheduled {
            return Err(match self.status {
                SlotStatus::Open => ContractError::NoSchedule,
                _ => ContractError::AlreadyClosed,
            });
        }
        let status = self.monitor.observe(tick, ev, evcs)?;
        if let MeterStatus::Violation(v) = status {
            self.open_dispute(
                DisputeCause::MeterMismatch,
                DisputeEvidence {
                    ev_kwh: Some(v.ev_kwh),
                    evcs_kwh: Some(v.evcs_kwh),
                    expected_bill: None,
                    presented_bill: None,
                },
            );
        }
        Ok(status)
    }

    pub fn end_slot(&mut self) -> Result<(), ContractError> {
        match self.status {
            SlotStatus::Scheduled => {
                self.status = SlotStatus::Ended;
                Ok(())
            }
            SlotStatus::Open => Err(ContractError::NoSchedule),
            SlotStatus::Disputed => Err(ContractError::MeteringUnresolved),
            _ => Err(ContractError::AlreadyClosed),
        }
    }

    /// The bill the contract itself derives from the final agreed readings.
    pub fn generate_bill(&mut self) -> Result<Bill, ContractError> {
        match self.status {
            SlotStatus::Ended => {}
            SlotStatus::Disputed | SlotStatus::Resolved => return Err(ContractError::MeteringUnresolved),
            SlotStatus::Open | SlotStatus::Scheduled => return Err(ContractError::SlotNotEnded),
            SlotStatus::Finalized => return Err(ContractError::AlreadyClosed),
        }
        let schedule = self.schedule.ok_or(ContractError::NoSchedule)?;
        let delivered = match self.monitor.last_readings() {
            Some((ev, evcs)) => undisputed_quantity(ev, evcs),
            None => schedule.x_star_kwh,
        };
        let bill = generate_bill(self.slot, delivered, &schedule.params);
        self.bill = Some(bill);
        Ok(bill)
    }

    /// Closes the slot if both parties accept `presented`; otherwise opens a
    /// dispute. A presented bill that differs from the contract's own is
    /// `BillRejected`; a correct bill the EV refuses is `PaymentDefault`.
    pub fn finalize(
        &mut self,
        presented: &Bill,
        ev_ack: bool,
        evcs_ack: bool,
        ledger: &mut Ledger,
        now_ms: u64,
        author: &str,
    ) -> Result<TransactionRecord, ContractError> {
        match self.status {
            SlotStatus::Ended => {}
            SlotStatus::Open | SlotStatus::Scheduled => return Err(ContractError::SlotNotEnded),
            SlotStatus::Disputed | SlotStatus::Resolved => return Err(ContractError::MeteringUnresolved),
            SlotStatus::Finalized => return Err(ContractError::AlreadyClosed),
        }
        let expected = match self.bill {
            Some(b) => b,
            None => self.generate_bill()?,
        };
        let matches = *presented == expected;
        if matches && ev_ack && evcs_ack {
            let record = TransactionRecord {
                pid: self.pid.clone(),
                evcs_id: self.evcs_id.clone(),
                slot: self.slot,
                energy_kwh: expected.energy_kwh,
                amount: expected.total,
                finalized_at_ms: now_ms,
            };
            ledger.append_record(&Record::Transaction(record.clone()), now_ms, author)?;
            self.status = SlotStatus::Finalized;
            return Ok(record);
        }
        let cause = if matches && !ev_ack && evcs_ack {
            DisputeCause::PaymentDefault
        } else {
            DisputeCause::BillRejected
        };
        let (ev_kwh, evcs_kwh) = match self.monitor.last_readings() {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        self.open_dispute(
            cause,
            DisputeEvidence {
                ev_kwh,
                evcs_kwh,
                expected_bill: Some(expected),
                presented_bill: Some(*presented),
            },
        );
        Err(ContractError::Rejected(cause))
    }

    fn open_dispute(&mut self, cause: DisputeCause, evidence: DisputeEvidence) {
        self.dispute = Some(DisputeCase {
            slot: self.slot,
            cause,
            evidence,
            resolution: None,
        });
        self.status = SlotStatus::Disputed;
    }

    /// Applies the resolution rule and writes the DisputeRecord. Resolving an
    /// already-resolved case returns the recorded resolution without writing.
    pub fn resolve_dispute(
        &mut self,
        ledger: &mut Ledger,
        now_ms: u64,
        author: &str,
    ) -> Result<Resolution, ContractError> {
        let schedule = self.schedule.ok_or(ContractError::NoSchedule)?;
        let case = self.dispute.as_mut().ok_or(ContractError::UnresolvedSlot)?;
        if let Some(r) = case.resolution {
            return Ok(r);
        }
        let p = &schedule.params;
        let (resolution, settled_kwh, settled_amount) = match case.cause {
            DisputeCause::MeterMismatch => {
                let ev = case.evidence.ev_kwh.unwrap_or(0.0);
                let evcs = case.evidence.evcs_kwh.unwrap_or(0.0);
                let q = undisputed_quantity(ev, evcs);
                (
                    Resolution::SettledMinimum,
                    q,
                    generate_bill(self.slot, q, p).energy_amount,
                )
            }
            DisputeCause::BillRejected | DisputeCause::PaymentDefault => (Resolution::Voided, 0.0, 0.0),
        };
        let record = DisputeRecord {
            pid: self.pid.clone(),
            evcs_id: self.evcs_id.clone(),
            slot: self.slot,
            cause: case.cause,
            resolution,
            settled_energy_kwh: settled_kwh,
            settled_amount,
            fee_owed: p.fee,
            evidence: case.evidence.digest(),
            recorded_at_ms: now_ms,
        };
        ledger.append_record(&Record::Dispute(record), now_ms, author)?;
        case.resolution = Some(resolution);
        self.status = SlotStatus::Resolved;
        Ok(resolution)
    }

    /// Settled bill total for a resolved case (energy at the settled quantity plus fee).
    pub fn settled_total(&self) -> Option<f64> {
        let case = self.dispute.as_ref()?;
        let p = self.schedule?.params;
        match case.resolution? {
            Resolution::SettledMinimum => {
                let q = undisputed_quantity(case.evidence.ev_kwh?, case.evidence.evcs_kwh?);
                Some(generate_bill(self.slot, q, &p).total)
            }
            Resolution::Voided => Some(p.fee),
        }
    }

    /// Closes the slot: updates the battery with the scheduled exchange and
    /// returns the outcome plus the bounds for the next slot.
    pub fn log_and_prepare_next(&self, battery: &mut Battery) -> Result<(SlotOutcome, EnergyBounds), ContractError> {
        let schedule = self.schedule.ok_or(ContractError::UnresolvedSlot)?;
        let (bill_total, dispute_cause) = match self.status {
            SlotStatus::Finalized => (self.bill.map(|b| b.total), None),
            SlotStatus::Resolved => (self.settled_total(), self.dispute.map(|d| d.cause)),
            _ => return Err(ContractError::UnresolvedSlot),
        };
        battery.apply(schedule.x_star_kwh);
        let outcome = SlotOutcome {
            slot: self.slot,
            x_star_kwh: schedule.x_star_kwh,
            bill_total,
            status: self.status,
            dispute_cause,
        };
        Ok((outcome, EnergyBounds::from_battery(battery)))
    }

    pub fn tolerance_kwh(&self) -> f64 {
        self.tolerance_kwh
    }
}

/// Cumulative reading after `step` of `steps` equal metering increments.
pub fn ramp(x_star: f64, step: u64, steps: u64) -> f64 {
    if steps == 0 {
        return x_star;
    }
    x_star * step as f64 / steps as f64
}

/// Local log kept by the EV across slots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvLocalLog {
    pub outcomes: Vec<SlotOutcome>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> TradeParams {
        TradeParams {
            alpha: 0.5,
            beta: 0.01,
            gamma: 0.1,
            delta: 0.01,
            p_c: 0.2,
            p_d: 0.25,
            c_g: 0.1,
            v_g: 0.3,
            fee: 0.5,
        }
    }

    fn split(p: &TradeParams) -> (UserUtility, StationTerms) {
        (
            UserUtility {
                alpha: p.alpha,
                beta: p.beta,
                gamma: p.gamma,
                delta: p.delta,
            },
            StationTerms {
                p_c: p.p_c,
                p_d: p.p_d,
                c_g: p.c_g,
                v_g: p.v_g,
                fee: p.fee,
            },
        )
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn joint_utility_worked_values() {
        let p = worked();
        assert_eq!(joint_utility(0.0, &p), 0.0);
        assert!(close(joint_utility(20.0, &p), 4.0));
        assert!(close(joint_utility(-10.0, &p), 1.0));
    }

    #[test]
    fn transfers_cancel_in_the_sum() {
        let p = worked();
        for x in [-25.0, -3.5, 0.0, 7.25, 30.0] {
            assert!(close(
                user_utility(x, &p) + station_utility(x, &p),
                joint_utility(x, &p)
            ));
        }
    }

    #[test]
    fn optimum_worked_cases() {
        let p = worked();
        assert!(close(
            compute_optimal_exchange(&p, &EnergyBounds::new(-30.0, 40.0).unwrap()),
            20.0
        ));
        let clamped = EnergyBounds::new(-30.0, 15.0).unwrap();
        let x = compute_optimal_exchange(&p, &clamped);
        assert!(close(x, 15.0));
        assert!(close(joint_utility(x, &p), 3.75));
        let flat = TradeParams {
            alpha: p.c_g,
            v_g: p.gamma,
            ..p
        };
        assert_eq!(
            compute_optimal_exchange(&flat, &EnergyBounds::new(-30.0, 40.0).unwrap()),
            0.0
        );
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = worked();
        p.beta = 0.0;
        assert!(matches!(p.validate(), Err(ContractError::InvalidParams(_))));
        let mut p = worked();
        p.p_c = -0.1;
        assert!(matches!(p.validate(), Err(ContractError::InvalidParams(_))));
        assert_eq!(
            Contract::open("pid", "evcs", 0, false, 0.05).unwrap_err(),
            ContractError::NoSession
        );
    }

    #[test]
    fn metering_examples() {
        let mut m = MeteringMonitor::new(0.05);
        assert_eq!(m.observe(1, Some(19.98), Some(20.0)).unwrap(), MeterStatus::Ok);
        let mut m = MeteringMonitor::new(0.05);
        assert!(matches!(
            m.observe(1, Some(19.90), Some(20.0)).unwrap(),
            MeterStatus::Violation(_)
        ));
        // Latched: agreement afterwards does not clear it.
        assert!(matches!(
            m.observe(2, Some(20.0), Some(20.0)).unwrap(),
            MeterStatus::Violation(_)
        ));
        assert_eq!(
            m.observe(3, None, Some(20.0)),
            Err(ContractError::MissingReading(MeterSource::Ev, 3))
        );
    }

    #[test]
    fn billing_examples() {
        let p = worked();
        let b = generate_bill(0, 20.0, &p);
        assert!(close(b.total, 4.5));
        assert_eq!(b.payer, Payer::Ev);
        let b = generate_bill(0, -10.0, &p);
        assert!(close(b.energy_amount, 2.5));
        assert_eq!(b.payer, Payer::Evcs);
        assert!(close(b.flows().ev, 2.0));
        let b = generate_bill(0, 0.0, &p);
        assert!(close(b.total, 0.5));
        for x in [-12.0, 0.0, 9.0] {
            let f = generate_bill(0, x, &p).flows();
            assert!(close(f.ev + f.evcs + f.operator, 0.0));
        }
    }

    fn scheduled(p: &TradeParams) -> Contract {
        let (u, s) = split(p);
        let mut c = Contract::open("pid-1", "evcs-1", 4, true, 0.05).unwrap();
        c.submit_utilities(&u, &s, EnergyBounds::new(-30.0, 40.0).unwrap())
            .unwrap();
        c
    }

    #[test]
    fn honest_slot_finalizes_once() {
        let p = worked();
        let mut ledger = Ledger::new();
        let mut c = scheduled(&p);
        for k in 1..=4 {
            let r = ramp(20.0, k, 4);
            c.record_readings(k, Some(r), Some(r)).unwrap();
        }
        c.end_slot().unwrap();
        let bill = c.generate_bill().unwrap();
        let rec = c.finalize(&bill, true, true, &mut ledger, 10, "sc").unwrap();
        assert!(close(rec.amount, 4.5));
        ledger.seal_block();
        assert_eq!(ledger.transactions().len(), 1);
        assert!(ledger.disputes().is_empty());
    }

    #[test]
    fn finalize_before_slot_end_is_rejected() {
        let p = worked();
        let mut c = scheduled(&p);
        let bill = generate_bill(4, 20.0, &p);
        assert_eq!(
            c.finalize(&bill, true, true, &mut Ledger::new(), 0, "sc"),
            Err(ContractError::SlotNotEnded)
        );
    }

    #[test]
    fn meter_mismatch_settles_at_minimum() {
        let p = worked();
        let mut ledger = Ledger::new();
        let mut c = scheduled(&p);
        c.record_readings(1, Some(19.90), Some(20.0)).unwrap();
        assert_eq!(c.end_slot(), Err(ContractError::MeteringUnresolved));
        assert_eq!(c.generate_bill(), Err(ContractError::MeteringUnresolved));
        assert_eq!(
            c.resolve_dispute(&mut ledger, 5, "sc").unwrap(),
            Resolution::SettledMinimum
        );
        assert!(close(c.settled_total().unwrap(), 4.48));
        // Idempotent.
        assert_eq!(
            c.resolve_dispute(&mut ledger, 6, "sc").unwrap(),
            Resolution::SettledMinimum
        );
        ledger.seal_block();
        let d = ledger.disputes();
        assert_eq!(d.len(), 1);
        assert!(close(d[0].settled_energy_kwh, 19.90));
        assert!(ledger.transactions().is_empty());
    }

    #[test]
    fn refusal_and_substitution_causes() {
        let p = worked();
        let mut ledger = Ledger::new();

        let mut c = scheduled(&p);
        c.record_readings(1, Some(20.0), Some(20.0)).unwrap();
        c.end_slot().unwrap();
        let bill = c.generate_bill().unwrap();
        assert_eq!(
            c.finalize(&bill, false, true, &mut ledger, 1, "sc"),
            Err(ContractError::Rejected(DisputeCause::PaymentDefault))
        );
        assert_eq!(c.resolve_dispute(&mut ledger, 2, "sc").unwrap(), Resolution::Voided);
        assert!(close(c.settled_total().unwrap(), 0.5));

        let mut c = scheduled(&p);
        c.record_readings(1, Some(20.0), Some(20.0)).unwrap();
        c.end_slot().unwrap();
        let inflated = generate_bill(4, 20.0, &TradeParams { p_c: 0.3, ..p });
        assert_eq!(
            c.finalize(&inflated, false, true, &mut ledger, 1, "sc"),
            Err(ContractError::Rejected(DisputeCause::BillRejected))
        );
        c.resolve_dispute(&mut ledger, 2, "sc").unwrap();

        ledger.seal_block();
        assert!(ledger.transactions().is_empty());
        assert_eq!(ledger.disputes().len(), 2);
    }

    #[test]
    fn prepare_next_updates_battery_and_bounds() {
        let p = worked();
        let mut ledger = Ledger::new();
        let (u, s) = split(&p);
        let mut battery = Battery {
            soc_kwh: 40.0,
            capacity_kwh: 60.0,
            charger_limit_kwh: 50.0,
            efficiency: 1.0,
        };
        let mut c = Contract::open("pid", "evcs", 0, true, 0.05).unwrap();
        c.submit_utilities(&u, &s, EnergyBounds::from_battery(&battery))
            .unwrap();
        assert_eq!(
            c.log_and_prepare_next(&mut battery.clone()),
            Err(ContractError::UnresolvedSlot)
        );
        c.record_readings(1, Some(20.0), Some(20.0)).unwrap();
        c.end_slot().unwrap();
        let bill = c.generate_bill().unwrap();
        c.finalize(&bill, true, true, &mut ledger, 1, "sc").unwrap();
        let (outcome, next) = c.log_and_prepare_next(&mut battery).unwrap();
        assert_eq!(outcome.status, SlotStatus::Finalized);
        assert!(close(battery.soc_kwh, 60.0));
        assert_eq!(next.x_max, 0.0);
        assert!(close(next.x_min, -50.0));
    }

    #[test]
    fn unresolved_dispute_blocks_next_slot() {
        let p = worked();
        let mut c = scheduled(&p);
        c.record_readings(1, Some(10.0), Some(20.0)).unwrap();
        let mut b = Battery {
            soc_kwh: 10.0,
            capacity_kwh: 60.0,
            charger_limit_kwh: 40.0,
            efficiency: 0.95,
        };
        assert_eq!(c.log_and_prepare_next(&mut b), Err(ContractError::UnresolvedSlot));
    }
}
