use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::{TariffSchedule, DEFAULT_RATE_STEP_S};
use crate::sim::{ContractKind, FleetConfig};
use crate::store::validate_house_id;

use super::ServiceError;

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_broker() -> String {
    "127.0.0.1:1883".into()
}

fn default_store_dir() -> PathBuf {
    PathBuf::from("acc-data")
}

fn default_refresh() -> u32 {
    30
}

fn default_stale_factor() -> u32 {
    2
}

fn default_down_factor() -> u32 {
    6
}

fn default_rate_step() -> i64 {
    DEFAULT_RATE_STEP_S
}

fn default_bucket() -> i64 {
    crate::store::DEFAULT_BUCKET_S
}

fn default_retry_delay_ms() -> u64 {
    500
}

fn default_tariff() -> TariffSchedule {
    TariffSchedule::base(0.2516)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseEntry {
    pub house_id: String,
    /// Bearer token for the house's individual endpoints and control.
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub contract: ContractKind,
    #[serde(default = "default_tariff")]
    pub tariff: TariffSchedule,
}

impl HouseEntry {
    pub fn new(house_id: impl Into<String>) -> Self {
        HouseEntry {
            house_id: house_id.into(),
            token: None,
            contract: ContractKind::Base,
            tariff: default_tariff(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SinkConfig {
    File { path: PathBuf },
    Webhook { url: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_broker")]
    pub broker_addr: String,
    #[serde(default = "default_store_dir")]
    pub store_dir: PathBuf,
    /// Gateway refresh period the supervision thresholds scale with.
    #[serde(default = "default_refresh")]
    pub refresh_period_s: u32,
    #[serde(default = "default_stale_factor")]
    pub stale_factor: u32,
    #[serde(default = "default_down_factor")]
    pub down_factor: u32,
    /// Supervision period in simulated seconds; defaults to half the
    /// refresh period.
    #[serde(default)]
    pub supervision_interval_s: Option<u32>,
    /// Grid step telemetry is resampled to before rates are computed.
    #[serde(default = "default_rate_step")]
    pub rate_step_s: i64,
    #[serde(default = "default_bucket")]
    pub bucket_s: i64,
    #[serde(default)]
    pub admin_token: Option<String>,
    /// Optional token presented to the broker.
    #[serde(default)]
    pub broker_token: Option<String>,
    #[serde(default)]
    pub houses: Vec<HouseEntry>,
    /// Fleet file whose houses are added when `houses` is empty.
    #[serde(default)]
    pub fleet: Option<PathBuf>,
    #[serde(default)]
    pub alert_sinks: Vec<SinkConfig>,
    #[serde(default = "default_retry_delay_ms")]
    pub alert_retry_delay_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut c: ServiceConfig =
            serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        if let Some(fleet) = &c.fleet {
            let fleet = if fleet.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(fleet)
            } else {
                fleet.clone()
            };
            c.fleet = Some(fleet);
        }
        Ok(c)
    }

    /// Fills `houses` from the fleet file when none are listed.
    pub fn resolve_fleet(&mut self) -> Result<(), ServiceError> {
        if !self.houses.is_empty() {
            return Ok(());
        }
        if let Some(path) = &self.fleet {
            let fleet = FleetConfig::load(path).map_err(|e| ServiceError::Config(e.to_string()))?;
            self.add_fleet(&fleet);
        }
        Ok(())
    }

    pub fn add_fleet(&mut self, fleet: &FleetConfig) {
        for h in &fleet.houses {
            let mut e = HouseEntry::new(&h.house_id);
            e.contract = h.contract;
            if h.contract == ContractKind::HpHc {
                e.tariff = TariffSchedule::hp_hc(0.27, 0.2068);
            }
            self.houses.push(e);
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Config(m));
        if self.refresh_period_s < 1 {
            return bad("refresh_period_s must be >= 1".into());
        }
        if !(1 <= self.stale_factor && self.stale_factor < self.down_factor) {
            return bad("need 1 <= stale_factor < down_factor".into());
        }
        crate::store::validate_bucket(self.rate_step_s).map_err(|e| ServiceError::Config(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for h in &self.houses {
            validate_house_id(&h.house_id).map_err(|e| ServiceError::Config(e.to_string()))?;
            if !seen.insert(&h.house_id) {
                return bad(format!("house {} listed twice", h.house_id));
            }
            h.tariff
                .validate()
                .map_err(|e| ServiceError::Config(format!("house {}: {e}", h.house_id)))?;
            h.tariff
                .validate_bucket(self.bucket_s)
                .map_err(|e| ServiceError::Config(format!("house {}: {e}", h.house_id)))?;
        }
        Ok(())
    }

    pub fn house(&self, id: &str) -> Option<&HouseEntry> {
        self.houses.iter().find(|h| h.house_id == id)
    }

    pub fn supervision_interval_s(&self) -> u32 {
        self.supervision_interval_s
            .unwrap_or((self.refresh_period_s / 2).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = ServiceConfig::default();
        assert_eq!(c.refresh_period_s, 30);
        assert_eq!((c.stale_factor, c.down_factor), (2, 6));
        assert_eq!(c.supervision_interval_s(), 15);
        assert!(c.validate().is_ok());
        let mut c2 = c.clone();
        c2.houses = vec![HouseEntry::new("h1"), HouseEntry::new("h1")];
        assert!(c2.validate().is_err());
        let mut c3 = c;
        c3.down_factor = 2;
        assert!(c3.validate().is_err());
    }

    #[test]
    fn fleet_houses_are_added() {
        let mut c = ServiceConfig::default();
        c.add_fleet(&FleetConfig::default_fleet(1, 0));
        assert_eq!(c.houses.len(), 9);
        assert!(c.validate().is_ok());
    }
}
