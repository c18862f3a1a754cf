//! Application configuration: one JSON file plus `PRODMATCH_*` environment
//! overrides.
//!
//! | variable                        | field                          |
//! |---------------------------------|--------------------------------|
//! | `PRODMATCH_DATA_DIR`            | `data_dir`                     |
//! | `PRODMATCH_BIND`                | `bind`                         |
//! | `PRODMATCH_SEED`                | `seed`                         |
//! | `PRODMATCH_K`                   | `retrieval.k`                  |
//! | `PRODMATCH_BRAND_THRESHOLD`     | `retrieval.brand_threshold`    |
//! | `PRODMATCH_DISTANCE_THRESHOLD`  | `retrieval.distance_threshold` |
//! | `PRODMATCH_AUTO_ACCEPT_BELOW`   | `routing.auto_accept_below`    |
//! | `PRODMATCH_AUTO_REJECT_ABOVE`   | `routing.auto_reject_above`    |
//! | `PRODMATCH_JUDGMENTS`           | `judgments`                    |
//! | `PRODMATCH_AGGREGATION`         | `aggregation`                  |
//! | `PRODMATCH_P_MODEL`             | `p_model`                      |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hitl::{AggregationRule, RoutingPolicy, DEFAULT_JUDGMENTS};
use crate::retrieval::MatchParams;

pub const ENV_PREFIX: &str = "PRODMATCH_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Event log, snapshot and run artifacts live here.
    pub data_dir: PathBuf,
    pub bind: String,
    pub retrieval: MatchParams,
    /// Distance band routed to validators.
    pub routing: RoutingPolicy,
    pub judgments: usize,
    pub aggregation: AggregationRule,
    /// Model precision used to predict validated precision in the stats
    /// endpoint; omitted means estimated from labelled rows.
    pub p_model: Option<f64>,
    /// Seeds the bootstrap in stats and anything else random in the service.
    pub seed: u64,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            data_dir: PathBuf::from("data"),
            bind: "127.0.0.1:8080".into(),
            retrieval: MatchParams::default(),
            routing: RoutingPolicy::default(),
            judgments: DEFAULT_JUDGMENTS,
            aggregation: AggregationRule::default(),
            p_model: None,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{ENV_PREFIX}{key}={value:?}: {e}")))
}

impl AppConfig {
    /// Reads `path` if given (defaults otherwise), applies overrides from the
    /// process environment and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => AppConfig::default(),
        };
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies every `PRODMATCH_*` pair; unknown keys with the prefix are an error.
    pub fn apply_env<K, V>(&mut self, vars: impl IntoIterator<Item = (K, V)>) -> Result<()>
    where
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let v = v.as_ref();
            match key {
                "DATA_DIR" => self.data_dir = PathBuf::from(v),
                "BIND" => self.bind = v.to_string(),
                "SEED" => self.seed = parse(key, v)?,
                "K" => self.retrieval.k = parse(key, v)?,
                "BRAND_THRESHOLD" => self.retrieval.brand_threshold = parse(key, v)?,
                "DISTANCE_THRESHOLD" => self.retrieval.distance_threshold = parse(key, v)?,
                "AUTO_ACCEPT_BELOW" => self.routing.auto_accept_below = parse(key, v)?,
                "AUTO_REJECT_ABOVE" => self.routing.auto_reject_above = parse(key, v)?,
                "JUDGMENTS" => self.judgments = parse(key, v)?,
                "P_MODEL" => self.p_model = Some(parse(key, v)?),
                "AGGREGATION" => {
                    self.aggregation = serde_json::from_value(serde_json::Value::String(v.trim().into()))
                        .map_err(|_| {
                            Error::Config(format!(
                                "{ENV_PREFIX}AGGREGATION={v:?}: expected majority, unanimous or any-positive"
                            ))
                        })?
                }
                "LOG" => {}
                other => {
                    return Err(Error::Config(format!(
                        "unknown environment override {ENV_PREFIX}{other}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        self.routing.validate()?;
        if self.judgments == 0 {
            return Err(Error::Config("judgments must be at least 1".into()));
        }
        if self.routing.auto_reject_above > self.retrieval.distance_threshold {
            return Err(Error::Config(format!(
                "routing.auto_reject_above ({}) exceeds retrieval.distance_threshold ({}); \
                 rows in between would never be predicted",
                self.routing.auto_reject_above, self.retrieval.distance_threshold
            )));
        }
        if let Some(p) = self.p_model {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("p_model must lie in (0, 1], got {p}")));
            }
        }
        if self.bind.parse::<std::net::SocketAddr>().is_err() {
            return Err(Error::Config(format!(
                "bind must be host:port with a numeric host, got {:?}",
                self.bind
            )));
        }
        Ok(())
    }
}
