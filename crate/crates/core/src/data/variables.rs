//! Input variables and their per-variable preprocessing options.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Siconc,
    T2m,
    T500,
    Sst,
    Ohc300,
    Ohc700,
    Mld001,
    Mld003,
    Ussr,
    Dssr,
    Gp500,
    Gp250,
    U10m,
    V10m,
    U10,
    /// Synthetic covariate leading the SIC anomaly by two months.
    #[serde(rename = "syn_causal")]
    SynCausal,
    /// Synthetic covariate unrelated to SIC.
    #[serde(rename = "syn_noise")]
    SynNoise,
    /// Synthetic covariate that is a pure linear ramp in time.
    #[serde(rename = "syn_trend")]
    SynTrend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    SeaIce,
    AtmosphericTemperature,
    Ocean,
    Radiation,
    Pressure,
    Wind,
    Synthetic,
}

impl Variable {
    /// Observational and reanalysis variables, in canonical order.
    pub const OBSERVED: [Variable; 15] = [
        Variable::Siconc,
        Variable::T2m,
        Variable::T500,
        Variable::Sst,
        Variable::Ohc300,
        Variable::Ohc700,
        Variable::Mld001,
        Variable::Mld003,
        Variable::Ussr,
        Variable::Dssr,
        Variable::Gp500,
        Variable::Gp250,
        Variable::U10m,
        Variable::V10m,
        Variable::U10,
    ];

    pub const SYNTHETIC: [Variable; 3] = [Variable::SynCausal, Variable::SynNoise, Variable::SynTrend];

    pub fn id(self) -> &'static str {
        match self {
            Variable::Siconc => "siconc",
            Variable::T2m => "t2m",
            Variable::T500 => "t500",
            Variable::Sst => "sst",
            Variable::Ohc300 => "ohc300",
            Variable::Ohc700 => "ohc700",
            Variable::Mld001 => "mld001",
            Variable::Mld003 => "mld003",
            Variable::Ussr => "ussr",
            Variable::Dssr => "dssr",
            Variable::Gp500 => "gp500",
            Variable::Gp250 => "gp250",
            Variable::U10m => "u10m",
            Variable::V10m => "v10m",
            Variable::U10 => "u10",
            Variable::SynCausal => "syn_causal",
            Variable::SynNoise => "syn_noise",
            Variable::SynTrend => "syn_trend",
        }
    }

    pub fn group(self) -> Group {
        use Variable::*;
        match self {
            Siconc => Group::SeaIce,
            T2m | T500 => Group::AtmosphericTemperature,
            Sst | Ohc300 | Ohc700 | Mld001 | Mld003 => Group::Ocean,
            Ussr | Dssr => Group::Radiation,
            Gp500 | Gp250 => Group::Pressure,
            U10m | V10m | U10 => Group::Wind,
            SynCausal | SynNoise | SynTrend => Group::Synthetic,
        }
    }

    pub fn units(self) -> &'static str {
        use Variable::*;
        match self {
            Siconc => "1",
            T2m | T500 | Sst => "K",
            Ohc300 | Ohc700 => "J m-2",
            Mld001 | Mld003 => "m",
            Ussr | Dssr => "W m-2",
            Gp500 | Gp250 => "m2 s-2",
            U10m | V10m | U10 => "m s-1",
            SynCausal | SynNoise | SynTrend => "1",
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variable::OBSERVED
            .iter()
            .chain(&Variable::SYNTHETIC)
            .copied()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::invalid("variable", format!("unknown id `{s}`")))
    }
}

/// How one variable enters the input stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariableSpec {
    pub variable: Variable,
    pub lag_count: usize,
    /// Subtract the per-calendar-month climatology of the training years.
    pub anomaly: bool,
    /// Standardize with the training-year mean and standard deviation.
    pub normalize: bool,
}

pub const SIC_LAGS: usize = 12;

impl VariableSpec {
    /// SIC enters raw: it is already a bounded fraction, and keeping it raw
    /// lets forecasts be fed back as inputs.
    pub fn siconc() -> Self {
        VariableSpec { variable: Variable::Siconc, lag_count: SIC_LAGS, anomaly: false, normalize: false }
    }

    /// Defaults: three lags; anomalies for ocean heat content, mixed layer
    /// depth, geopotential and the 10 hPa wind; standardization for all
    /// non-SIC variables except the synthetic ramp.
    pub fn default_for(variable: Variable) -> Self {
        use Variable::*;
        match variable {
            Siconc => Self::siconc(),
            SynTrend => VariableSpec { variable, lag_count: 3, anomaly: false, normalize: false },
            _ => VariableSpec {
                variable,
                lag_count: 3,
                anomaly: matches!(variable, Ohc300 | Ohc700 | Mld001 | Mld003 | Gp500 | Gp250 | U10),
                normalize: true,
            },
        }
    }

    pub fn with_lags(self, lag_count: usize) -> Result<Self> {
        let s = VariableSpec { lag_count, ..self };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = if self.variable == Variable::Siconc { self.lag_count == SIC_LAGS } else { matches!(self.lag_count, 1 | 3) };
        if !ok {
            return Err(Error::invalid("lag count", format!("{} lags for {}", self.lag_count, self.variable)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for v in Variable::OBSERVED.iter().chain(&Variable::SYNTHETIC) {
            assert_eq!(v.id().parse::<Variable>().unwrap(), *v);
        }
        assert!("nope".parse::<Variable>().is_err());
    }

    #[test]
    fn lag_rules() {
        assert!(VariableSpec::siconc().with_lags(11).is_err());
        assert!(VariableSpec::default_for(Variable::T2m).with_lags(1).is_ok());
        assert!(VariableSpec::default_for(Variable::T2m).with_lags(2).is_err());
    }
}
