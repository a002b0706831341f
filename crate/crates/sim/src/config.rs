//! Scenario file schema (TOML).

use std::path::Path;

use pnc_core::adversary::{AttackKind, AttackScenario};
use pnc_core::sim::{ConfigError, Range, StationProfile, UserProfile, WorldConfig, DEFAULT_METERING_TICKS, TICK_MS};
use serde::{Deserialize, Serialize};

/// `[lo, hi]` in the file.
pub type RangeSpec = [f64; 2];

fn range(spec: Option<RangeSpec>, default: Range) -> Range {
    spec.map_or(default, |[lo, hi]| Range::new(lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsersSection {
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soc_kwh: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_kwh: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub charger_limit_kwh: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficiency: Option<RangeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationsSection {
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_c: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_d: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_g: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_g: Option<RangeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fee: Option<RangeSpec>,
}

fn default_delta_fresh_s() -> u64 {
    120
}

fn default_delta_e_meter() -> f64 {
    pnc_core::contract::DEFAULT_DELTA_E_METER_KWH
}

fn default_metering_ticks() -> u64 {
    DEFAULT_METERING_TICKS
}

fn default_slot_len_s() -> u64 {
    pnc_core::sim::DEFAULT_SLOT_LEN_MS / TICK_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub slots: u64,
    #[serde(default = "default_delta_fresh_s")]
    pub delta_fresh_s: u64,
    #[serde(default = "default_delta_e_meter")]
    pub delta_e_meter_kwh: f64,
    #[serde(default)]
    pub capture: bool,
    #[serde(default = "default_metering_ticks")]
    pub metering_ticks: u64,
    #[serde(default = "default_slot_len_s")]
    pub slot_len_s: u64,
    pub users: UsersSection,
    pub stations: StationsSection,
    #[serde(default)]
    pub attacks: Vec<AttackScenario>,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] ConfigError),
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, LoadError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn world_config(&self) -> WorldConfig {
        let u = &self.users;
        let s = &self.stations;
        let du = UserProfile::default();
        let ds = StationProfile::default();
        WorldConfig {
            seed: self.seed,
            users: u.count,
            stations: s.count,
            slots: self.slots,
            delta_fresh_ms: self.delta_fresh_s.saturating_mul(1_000),
            delta_e_meter_kwh: self.delta_e_meter_kwh,
            capture: self.capture,
            user_profile: UserProfile {
                alpha: range(u.alpha, du.alpha),
                beta: range(u.beta, du.beta),
                gamma: range(u.gamma, du.gamma),
                delta: range(u.delta, du.delta),
                soc_kwh: range(u.soc_kwh, du.soc_kwh),
                capacity_kwh: range(u.capacity_kwh, du.capacity_kwh),
                charger_limit_kwh: range(u.charger_limit_kwh, du.charger_limit_kwh),
                efficiency: range(u.efficiency, du.efficiency),
            },
            station_profile: StationProfile {
                p_c: range(s.p_c, ds.p_c),
                p_d: range(s.p_d, ds.p_d),
                c_g: range(s.c_g, ds.c_g),
                v_g: range(s.v_g, ds.v_g),
                fee: range(s.fee, ds.fee),
            },
            metering_ticks: self.metering_ticks,
            slot_len_ms: self.slot_len_s.saturating_mul(1_000),
            start_ms: pnc_core::sim::DEFAULT_START_MS,
            single_use_pids: true,
            credential_ttl_ms: pnc_core::pki::DEFAULT_CREDENTIAL_TTL_MS,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world_config().validate()?;
        for a in &self.attacks {
            let p = &a.params;
            if p.users == Some(0) || p.seeds == Some(0) || p.sessions_per_user == Some(0) {
                return Err(ConfigError(format!("attack {}: counts must be >= 1", a.kind.name())));
            }
            if let Some(price) = p.price_override {
                if !price.is_finite() || price < 0.0 {
                    return Err(ConfigError(format!(
                        "attack {}: price_override must be >= 0",
                        a.kind.name()
                    )));
                }
            }
            if let Some(off) = p.meter_offset_kwh {
                if !off.is_finite() {
                    return Err(ConfigError(format!(
                        "attack {}: meter_offset_kwh must be finite",
                        a.kind.name()
                    )));
                }
            }
            if a.kind != AttackKind::LedgerCorrelation && p.reuse_pids.is_some() {
                return Err(ConfigError(format!(
                    "attack {}: reuse_pids applies to LedgerCorrelation only",
                    a.kind.name()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 1
slots = 3
[users]
count = 2
[stations]
count = 1
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ScenarioConfig::parse(MINIMAL).unwrap();
        let w = cfg.world_config();
        assert_eq!(w.delta_fresh_ms, 120_000);
        assert_eq!(w.delta_e_meter_kwh, 0.05);
        assert_eq!(w.user_profile, UserProfile::default());
        assert!(cfg.attacks.is_empty());
    }

    #[test]
    fn zero_beta_is_rejected() {
        let text = MINIMAL.replace("count = 2", "count = 2\nbeta = [0.0, 0.01]");
        assert!(matches!(ScenarioConfig::parse(&text), Err(LoadError::Invalid(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nbogus = 1\n");
        assert!(matches!(ScenarioConfig::parse(&text), Err(LoadError::Parse(_))));
    }

    #[test]
    fn attacks_parse() {
        let text = format!(
            "{MINIMAL}\n[[attacks]]\nkind = \"ReplayM1\"\nseed = 3\n[attacks.params]\ntrials = 2\n\n[[attacks]]\nkind = \"EvRefusePay\"\nseed = 4\nexpected = \"dispute:PaymentDefault\"\n"
        );
        let cfg = ScenarioConfig::parse(&text).unwrap();
        assert_eq!(cfg.attacks.len(), 2);
        assert_eq!(cfg.attacks[0].params.trials, Some(2));
        assert_eq!(cfg.attacks[1].expected.as_deref(), Some("dispute:PaymentDefault"));
    }
}
