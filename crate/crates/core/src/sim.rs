//! Seeded household simulator: load and PV profiles, greedy battery
//! dispatch, meter register integration, TIC emission and day+1 reports.
//!
//! Every profile is a pure function of `(seed, t)`; there is no RNG state,
//! so a house can be evaluated at any instant in any order and still give
//! the same answer. All magnitudes are invented defaults.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{day_start, time_of_day, Timestamp, DAY};
use crate::tic::{TicFrame, TicGroup, TicMode};

/// Power factor used to derive apparent power (VA) from active power (W).
pub const POWER_FACTOR: f64 = 0.95;
/// Day+1 report step.
pub const SLOT_S: i64 = 600;
pub const SLOTS_PER_DAY: usize = (DAY / SLOT_S) as usize;

const MORNING: (f64, f64) = (6.0, 9.0);
const EVENING: (f64, f64) = (18.0, 22.0);
const DAYLIGHT: (f64, f64) = (7.0, 19.0);
/// Off-peak window used by HP/HC contracts, seconds of day.
pub const HC_WINDOWS: [(i64, i64); 2] = [(0, 6 * 3600), (22 * 3600, DAY)];

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid house {house}: {reason}")]
    InvalidHouse { house: String, reason: &'static str },
    #[error("invalid fleet configuration: {0}")]
    InvalidFleet(String),
    #[error("history does not cover {date}: {reason}")]
    IncompleteDay { date: NaiveDate, reason: String },
    #[error("register decreased at t={0}")]
    RegisterRollback(Timestamp),
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("cannot read fleet config: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HouseRole {
    Consumer,
    Producer,
    ProducerWithBattery,
}

impl HouseRole {
    pub fn produces(self) -> bool {
        !matches!(self, HouseRole::Consumer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractKind {
    #[default]
    Base,
    HpHc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams {
    pub capacity_wh: u32,
    pub max_charge_w: u32,
    pub max_discharge_w: u32,
    pub round_trip_efficiency: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        BatteryParams {
            capacity_wh: 5000,
            max_charge_w: 2000,
            max_discharge_w: 2000,
            round_trip_efficiency: 0.9,
        }
    }
}

/// A controllable appliance reachable through the gateway control topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Device {
    pub name: String,
    pub rated_w: u32,
}

fn default_noise() -> f64 {
    0.15
}

fn default_true() -> bool {
    true
}

fn default_devices() -> Vec<Device> {
    vec![Device {
        name: "heater".into(),
        rated_w: 1500,
    }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseConfig {
    pub house_id: String,
    /// Meter serial written in ADSC/ADCO; defaults to the house id.
    #[serde(default)]
    pub meter_id: String,
    pub role: HouseRole,
    #[serde(default)]
    pub pv_peak_w: u32,
    pub load_base_w: u32,
    pub load_peak_w: u32,
    #[serde(default)]
    pub battery: Option<BatteryParams>,
    #[serde(default)]
    pub seed: u64,
    /// Amplitude of the load noise as a fraction of the base load.
    #[serde(default = "default_noise")]
    pub load_noise: f64,
    #[serde(default = "default_true")]
    pub clouds: bool,
    #[serde(default)]
    pub contract: ContractKind,
    #[serde(default = "default_devices")]
    pub devices: Vec<Device>,
}

impl HouseConfig {
    pub fn consumer(house_id: impl Into<String>, seed: u64) -> Self {
        HouseConfig {
            house_id: house_id.into(),
            meter_id: String::new(),
            role: HouseRole::Consumer,
            pv_peak_w: 0,
            load_base_w: 300,
            load_peak_w: 2000,
            battery: None,
            seed,
            load_noise: default_noise(),
            clouds: true,
            contract: ContractKind::Base,
            devices: default_devices(),
        }
    }

    pub fn producer(house_id: impl Into<String>, seed: u64) -> Self {
        HouseConfig {
            role: HouseRole::Producer,
            pv_peak_w: 3000,
            ..HouseConfig::consumer(house_id, seed)
        }
    }

    pub fn producer_with_battery(house_id: impl Into<String>, seed: u64) -> Self {
        HouseConfig {
            role: HouseRole::ProducerWithBattery,
            battery: Some(BatteryParams::default()),
            ..HouseConfig::producer(house_id, seed)
        }
    }

    pub fn meter_id(&self) -> &str {
        if self.meter_id.is_empty() {
            &self.house_id
        } else {
            &self.meter_id
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason| SimError::InvalidHouse {
            house: self.house_id.clone(),
            reason,
        };
        if self.house_id.is_empty()
            || !self
                .house_id
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
        {
            return Err(bad("house_id must be non-empty [A-Za-z0-9_-]"));
        }
        if !self.meter_id().bytes().all(|b| (0x21..0x7F).contains(&b)) {
            return Err(bad("meter_id must be printable ASCII without spaces"));
        }
        if self.load_base_w == 0 {
            return Err(bad("load_base_w must be > 0"));
        }
        if self.load_peak_w < self.load_base_w {
            return Err(bad("load_peak_w must be >= load_base_w"));
        }
        if !(0.0..1.0).contains(&self.load_noise) {
            return Err(bad("load_noise must be in [0, 1)"));
        }
        match self.role {
            HouseRole::Consumer if self.pv_peak_w != 0 || self.battery.is_some() => {
                return Err(bad("consumer houses have no PV and no battery"))
            }
            HouseRole::ProducerWithBattery if self.battery.is_none() => {
                return Err(bad("producer_with_battery needs battery parameters"))
            }
            _ => {}
        }
        if let Some(b) = &self.battery {
            if b.capacity_wh == 0 || b.max_charge_w == 0 || b.max_discharge_w == 0 {
                return Err(bad("battery limits must be > 0"));
            }
            if !(b.round_trip_efficiency > 0.0 && b.round_trip_efficiency <= 1.0) {
                return Err(bad("round_trip_efficiency must be in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn is_off_peak(&self, t: Timestamp) -> bool {
        let tod = time_of_day(t);
        HC_WINDOWS.iter().any(|(a, b)| tod >= *a && tod < *b)
    }

    pub fn tariff_label(&self, t: Timestamp) -> &'static str {
        match self.contract {
            ContractKind::Base => "BASE",
            ContractKind::HpHc if self.is_off_peak(t) => "HC",
            ContractKind::HpHc => "HP",
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)`, a pure function of its inputs.
fn unit_hash(seed: u64, stream: u64, index: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(stream ^ splitmix64(index as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn hour_of_day(t: Timestamp) -> f64 {
    time_of_day(t) as f64 / 3600.0
}

fn windowed_gaussian(h: f64, window: (f64, f64), sigma: f64) -> f64 {
    if h < window.0 || h >= window.1 {
        return 0.0;
    }
    let mu = (window.0 + window.1) / 2.0;
    (-(h - mu).powi(2) / (2.0 * sigma * sigma)).exp()
}

/// Household load in W, excluding controllable devices.
pub fn load_power(house: &HouseConfig, t: Timestamp) -> f64 {
    let h = hour_of_day(t);
    let span = f64::from(house.load_peak_w - house.load_base_w);
    let shape = windowed_gaussian(h, MORNING, 0.6) + windowed_gaussian(h, EVENING, 0.8);
    let noise = if house.load_noise > 0.0 {
        let u = unit_hash(house.seed, 1, t.div_euclid(60));
        (2.0 * u - 1.0) * house.load_noise * f64::from(house.load_base_w)
    } else {
        0.0
    };
    (f64::from(house.load_base_w) + span * shape + noise).max(0.0)
}

/// Clear-sky PV output: a sin² bell over the daylight window peaking at its
/// midpoint (13:00).
pub fn pv_clear_sky(house: &HouseConfig, t: Timestamp) -> f64 {
    let h = hour_of_day(t);
    if house.pv_peak_w == 0 || h < DAYLIGHT.0 || h >= DAYLIGHT.1 {
        return 0.0;
    }
    let x = PI * (h - DAYLIGHT.0) / (DAYLIGHT.1 - DAYLIGHT.0);
    f64::from(house.pv_peak_w) * x.sin().powi(2)
}

/// Cloud attenuation in `[0.2, 1.0]`, constant over each 30-minute block.
pub fn cloud_factor(house: &HouseConfig, t: Timestamp) -> f64 {
    if !house.clouds {
        return 1.0;
    }
    0.2 + 0.8 * unit_hash(house.seed, 2, t.div_euclid(1800))
}

pub fn pv_power(house: &HouseConfig, t: Timestamp) -> f64 {
    pv_clear_sky(house, t) * cloud_factor(house, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterState {
    pub meter_id: String,
    pub energy_consumed_wh: u64,
    pub energy_injected_wh: u64,
    pub soc_wh: f64,
    pub last_update: Timestamp,
    /// Last grid flow applied, W. Positive = injection.
    pub grid_w: f64,
    consumed_carry_wh: f64,
    injected_carry_wh: f64,
}

impl MeterState {
    pub fn new(meter_id: impl Into<String>, t: Timestamp) -> Self {
        MeterState {
            meter_id: meter_id.into(),
            energy_consumed_wh: 0,
            energy_injected_wh: 0,
            soc_wh: 0.0,
            last_update: t,
            grid_w: 0.0,
            consumed_carry_wh: 0.0,
            injected_carry_wh: 0.0,
        }
    }

    pub fn with_registers(mut self, consumed_wh: u64, injected_wh: u64) -> Self {
        self.energy_consumed_wh = consumed_wh;
        self.energy_injected_wh = injected_wh;
        self
    }

    pub fn draw_w(&self) -> f64 {
        (-self.grid_w).max(0.0)
    }

    pub fn inject_w(&self) -> f64 {
        self.grid_w.max(0.0)
    }
}

/// Greedy self-consumption dispatch over `dt` seconds.
///
/// A positive `surplus_w` charges the battery, a negative one discharges it.
/// The whole round-trip loss is taken on charge, so
/// `surplus·dt/3600 = Δsoc/η + grid·dt/3600` while charging and
/// `surplus·dt/3600 = Δsoc + grid·dt/3600` while discharging.
/// Returns the new state and the residual grid flow (positive = injection).
pub fn step_battery(state: &MeterState, surplus_w: f64, dt: f64, params: &BatteryParams) -> (MeterState, f64) {
    debug_assert!(dt > 0.0);
    let hours = dt / 3600.0;
    let capacity = f64::from(params.capacity_wh);
    let eta = params.round_trip_efficiency;
    let mut next = state.clone();
    let soc = state.soc_wh.clamp(0.0, capacity);
    let grid_w = if surplus_w > 0.0 {
        let headroom_w = (capacity - soc) / (eta * hours);
        let charge_w = surplus_w.min(f64::from(params.max_charge_w)).min(headroom_w);
        next.soc_wh = (soc + charge_w * eta * hours).min(capacity);
        surplus_w - charge_w
    } else if surplus_w < 0.0 {
        let available_w = soc / hours;
        let discharge_w = (-surplus_w).min(f64::from(params.max_discharge_w)).min(available_w);
        next.soc_wh = (soc - discharge_w * hours).max(0.0);
        surplus_w + discharge_w
    } else {
        0.0
    };
    (next, grid_w)
}

/// Advances the meter over `[t, t+dt)` with powers sampled at `t`.
pub fn step_meter(state: &MeterState, house: &HouseConfig, t: Timestamp, dt: i64) -> MeterState {
    step_meter_with_load(state, house, t, dt, 0.0)
}

/// As [`step_meter`], with `extra_load_w` of controllable devices switched on.
pub fn step_meter_with_load(
    state: &MeterState,
    house: &HouseConfig,
    t: Timestamp,
    dt: i64,
    extra_load_w: f64,
) -> MeterState {
    debug_assert!(dt > 0);
    debug_assert!(t >= state.last_update);
    let net_w = pv_power(house, t) - load_power(house, t) - extra_load_w;
    let (mut next, grid_w) = match &house.battery {
        Some(params) => step_battery(state, net_w, dt as f64, params),
        None => (state.clone(), net_w),
    };
    let energy_wh = grid_w * dt as f64 / 3600.0;
    if energy_wh > 0.0 {
        next.injected_carry_wh += energy_wh;
        let whole = next.injected_carry_wh.floor();
        next.energy_injected_wh += whole as u64;
        next.injected_carry_wh -= whole;
    } else if energy_wh < 0.0 {
        next.consumed_carry_wh -= energy_wh;
        let whole = next.consumed_carry_wh.floor();
        next.energy_consumed_wh += whole as u64;
        next.consumed_carry_wh -= whole;
    }
    next.grid_w = grid_w;
    next.last_update = t + dt;
    next
}

fn va(watts: f64) -> u64 {
    (watts / POWER_FACTOR).round() as u64
}

fn horodate(t: Timestamp) -> String {
    let dt = DateTime::from_timestamp(t, 0).unwrap_or_default();
    format!("H{}", dt.format("%y%m%d%H%M%S"))
}

/// Builds the frame a meter in `state` would emit.
pub fn emit_tic(state: &MeterState, house: &HouseConfig, mode: TicMode) -> TicFrame {
    let t = state.last_update;
    let producer = house.role.produces();
    let groups = match mode {
        TicMode::Standard => {
            let mut g = vec![
                TicGroup::new("ADSC", state.meter_id.clone()),
                TicGroup::new("VTIC", "02"),
                TicGroup::new("DATE", "").with_timestamp(horodate(t)),
                TicGroup::new(
                    "NGTF",
                    match house.contract {
                        ContractKind::Base => "BASE",
                        ContractKind::HpHc => "HC/HP",
                    },
                ),
                TicGroup::new("LTARF", house.tariff_label(t)),
                TicGroup::new("EAST", format!("{:09}", state.energy_consumed_wh)),
            ];
            if producer {
                g.push(TicGroup::new("EAIT", format!("{:09}", state.energy_injected_wh)));
            }
            g.push(TicGroup::new("SINSTS", format!("{:05}", va(state.draw_w()))));
            if producer {
                g.push(TicGroup::new("SINSTI", format!("{:05}", va(state.inject_w()))));
            }
            g
        }
        TicMode::Historic => {
            let ptec = match house.tariff_label(t) {
                "HC" => "HC..",
                "HP" => "HP..",
                _ => "TH..",
            };
            vec![
                TicGroup::new("ADCO", state.meter_id.clone()),
                TicGroup::new("OPTARIF", "BASE"),
                TicGroup::new("BASE", format!("{:09}", state.energy_consumed_wh)),
                TicGroup::new("PTEC", ptec),
                TicGroup::new("PAPP", format!("{:05}", va(state.draw_w()))),
            ]
        }
    };
    TicFrame::new(mode, groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterSample {
    pub t: Timestamp,
    pub consumed_wh: u64,
    pub injected_wh: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "(u64, u64)", into = "(u64, u64)")]
pub struct SlotDelta {
    pub consumed_wh: u64,
    pub injected_wh: u64,
}

impl From<(u64, u64)> for SlotDelta {
    fn from((consumed_wh, injected_wh): (u64, u64)) -> Self {
        SlotDelta {
            consumed_wh,
            injected_wh,
        }
    }
}

impl From<SlotDelta> for (u64, u64) {
    fn from(s: SlotDelta) -> Self {
        (s.consumed_wh, s.injected_wh)
    }
}

/// Daily 10-minute index deltas, as a meter uploads them after midnight.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayPlusOneReport {
    pub meter_id: String,
    pub date: NaiveDate,
    pub slots: Vec<SlotDelta>,
}

impl DayPlusOneReport {
    pub fn total(&self) -> SlotDelta {
        self.slots.iter().fold(SlotDelta::default(), |acc, s| SlotDelta {
            consumed_wh: acc.consumed_wh + s.consumed_wh,
            injected_wh: acc.injected_wh + s.injected_wh,
        })
    }
}

pub fn date_start(date: NaiveDate) -> Timestamp {
    date.and_hms_opt(0, 0, 0)
        .map(|d| d.and_utc().timestamp())
        .unwrap_or_default()
}

/// Builds the day+1 report for `date` (UTC day) from register samples.
///
/// The register value at each 10-minute boundary is the latest sample at or
/// before it, which must be no older than one slot.
pub fn day_plus_one_report(
    meter_id: &str,
    history: &[RegisterSample],
    date: NaiveDate,
) -> Result<DayPlusOneReport, SimError> {
    let incomplete = |reason: String| SimError::IncompleteDay { date, reason };
    let mut samples = history.to_vec();
    samples.sort_by_key(|s| s.t);
    for w in samples.windows(2) {
        if w[1].consumed_wh < w[0].consumed_wh || w[1].injected_wh < w[0].injected_wh {
            return Err(SimError::RegisterRollback(w[1].t));
        }
    }
    let start = date_start(date);
    let mut at_boundary = Vec::with_capacity(SLOTS_PER_DAY + 1);
    for k in 0..=SLOTS_PER_DAY as i64 {
        let b = start + k * SLOT_S;
        let idx = samples.partition_point(|s| s.t <= b);
        if idx == 0 {
            return Err(incomplete(format!("no sample at or before {b}")));
        }
        let s = samples[idx - 1];
        if b - s.t > SLOT_S {
            return Err(incomplete(format!("gap before boundary {b}")));
        }
        at_boundary.push(s);
    }
    let slots = at_boundary
        .windows(2)
        .map(|w| SlotDelta {
            consumed_wh: w[1].consumed_wh - w[0].consumed_wh,
            injected_wh: w[1].injected_wh - w[0].injected_wh,
        })
        .collect();
    Ok(DayPlusOneReport {
        meter_id: meter_id.to_string(),
        date,
        slots,
    })
}

/// A house with its meter, stepped forward in time on demand.
#[derive(Debug, Clone)]
pub struct SimulatedHouse {
    config: HouseConfig,
    state: MeterState,
    step_s: i64,
    devices: BTreeMap<String, u32>,
    samples: Vec<RegisterSample>,
}

impl SimulatedHouse {
    pub fn new(config: HouseConfig, start: Timestamp, step_s: i64) -> Self {
        assert!(step_s > 0 && SLOT_S % step_s == 0, "step must divide 600 s");
        let state = MeterState::new(config.meter_id(), start);
        let devices = config.devices.iter().map(|d| (d.name.clone(), 0)).collect();
        let mut house = SimulatedHouse {
            config,
            state,
            step_s,
            devices,
            samples: Vec::new(),
        };
        house.record_sample();
        house
    }

    pub fn config(&self) -> &HouseConfig {
        &self.config
    }

    pub fn state(&self) -> &MeterState {
        &self.state
    }

    pub fn samples(&self) -> &[RegisterSample] {
        &self.samples
    }

    fn record_sample(&mut self) {
        self.samples.push(RegisterSample {
            t: self.state.last_update,
            consumed_wh: self.state.energy_consumed_wh,
            injected_wh: self.state.energy_injected_wh,
        });
    }

    /// Current draw of switched-on devices, W.
    pub fn device_load_w(&self) -> u32 {
        self.devices.values().sum()
    }

    /// Sets a device's draw. `watts = None` means "on at rated power".
    pub fn set_device(&mut self, name: &str, watts: Option<u32>) -> Result<(), SimError> {
        let rated = self
            .config
            .devices
            .iter()
            .find(|d| d.name == name)
            .map(|d| d.rated_w)
            .ok_or_else(|| SimError::UnknownDevice(name.to_string()))?;
        self.devices.insert(name.to_string(), watts.unwrap_or(rated));
        Ok(())
    }

    pub fn advance_to(&mut self, t: Timestamp) {
        while self.state.last_update < t {
            let now = self.state.last_update;
            let next = ((now.div_euclid(self.step_s) + 1) * self.step_s).min(t);
            let extra = f64::from(self.device_load_w());
            self.state = step_meter_with_load(&self.state, &self.config, now, next - now, extra);
            if next.rem_euclid(SLOT_S) == 0 {
                self.record_sample();
            }
        }
    }

    pub fn frame(&self, mode: TicMode) -> TicFrame {
        emit_tic(&self.state, &self.config, mode)
    }

    /// Reports for every UTC day fully covered by the recorded samples.
    pub fn day_reports(&self) -> Vec<DayPlusOneReport> {
        let (Some(first), Some(last)) = (self.samples.first(), self.samples.last()) else {
            return Vec::new();
        };
        let mut day = day_start(first.t);
        if day < first.t {
            day += DAY;
        }
        let mut out = Vec::new();
        while day + DAY <= last.t {
            if let Some(date) = DateTime::from_timestamp(day, 0).map(|d| d.date_naive()) {
                if let Ok(r) = day_plus_one_report(self.config.meter_id(), &self.samples, date) {
                    out.push(r);
                }
            }
            day += DAY;
        }
        out
    }
}

fn default_step() -> i64 {
    10
}

fn default_acceleration() -> f64 {
    100.0
}

/// Fleet description loaded from the simulation config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub seed: u64,
    pub start: Timestamp,
    #[serde(default = "default_acceleration")]
    pub acceleration: f64,
    #[serde(default = "default_step")]
    pub step_s: i64,
    #[serde(default)]
    pub tic_mode: TicMode,
    pub houses: Vec<HouseConfig>,
}

impl FleetConfig {
    /// Nine houses: five producers, one producer with a battery, three
    /// consumers.
    pub fn default_fleet(seed: u64, start: Timestamp) -> Self {
        let mut houses = Vec::with_capacity(9);
        for i in 1..=9u64 {
            let id = format!("h{i}");
            let mut h = match i {
                1..=5 => HouseConfig::producer(id, i),
                6 => HouseConfig::producer_with_battery(id, i),
                _ => HouseConfig::consumer(id, i),
            };
            h.meter_id = format!("0219000000{i:02}");
            if i % 2 == 0 {
                h.contract = ContractKind::HpHc;
            }
            houses.push(h);
        }
        FleetConfig {
            seed,
            start,
            acceleration: default_acceleration(),
            step_s: default_step(),
            tic_mode: TicMode::Standard,
            houses,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.houses.is_empty() {
            return Err(SimError::InvalidFleet("no houses".into()));
        }
        if self.step_s <= 0 || SLOT_S % self.step_s != 0 {
            return Err(SimError::InvalidFleet("step_s must divide 600".into()));
        }
        if self.acceleration.is_nan() || self.acceleration <= 0.0 {
            return Err(SimError::InvalidFleet("acceleration must be > 0".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for h in &self.houses {
            h.validate()?;
            if !seen.insert(h.house_id.as_str()) {
                return Err(SimError::InvalidFleet(format!("duplicate house {}", h.house_id)));
            }
        }
        Ok(())
    }

    /// Houses with their seeds mixed with the fleet seed.
    pub fn seeded_houses(&self) -> Vec<HouseConfig> {
        self.houses
            .iter()
            .map(|h| {
                let mut h = h.clone();
                h.seed = splitmix64(self.seed ^ splitmix64(h.seed));
                h
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(e.to_string()))?;
        let fleet: FleetConfig = serde_json::from_str(&text).map_err(|e| SimError::InvalidFleet(e.to_string()))?;
        fleet.validate()?;
        Ok(fleet)
    }
}
