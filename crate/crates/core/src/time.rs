//! UTC timestamps with microsecond precision.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, SubsecRound, TimeZone, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A UTC instant truncated to whole microseconds.
///
/// Truncation happens at construction so that a value always survives an
/// RFC 3339 round trip unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(DateTime<Utc>);

impl Timestamp {
    pub fn now() -> Self {
        Self::from_datetime(Utc::now())
    }

    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Self(dt.trunc_subsecs(6))
    }

    pub fn from_micros(micros: i64) -> Self {
        let dt = Utc
            .timestamp_micros(micros)
            .single()
            .expect("microsecond timestamp out of range");
        Self(dt)
    }

    pub fn as_micros(&self) -> i64 {
        self.0.timestamp_micros()
    }

    pub fn datetime(&self) -> DateTime<Utc> {
        self.0
    }

    pub fn checked_add(&self, d: Duration) -> Option<Self> {
        let micros = i64::try_from(d.as_micros()).ok()?;
        self.as_micros().checked_add(micros).map(Self::from_micros)
    }

    pub fn saturating_sub(&self, d: Duration) -> Self {
        let micros = i64::try_from(d.as_micros()).unwrap_or(i64::MAX);
        Self::from_micros(self.as_micros().saturating_sub(micros))
    }

    /// Signed distance `self - earlier`; zero when `earlier` is later.
    pub fn since(&self, earlier: Timestamp) -> Duration {
        let delta = self.as_micros() - earlier.as_micros();
        Duration::from_micros(delta.max(0) as u64)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.to_rfc3339_opts(SecondsFormat::Micros, true))
    }
}

impl FromStr for Timestamp {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DateTime::parse_from_rfc3339(s).map(|dt| Self::from_datetime(dt.with_timezone(&Utc)))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_six_fraction_digits_and_z() {
        let ts = Timestamp::from_micros(1_700_000_000_000_001);
        assert_eq!(ts.to_string(), "2023-11-14T22:13:20.000001Z");
        assert_eq!(ts.to_string().parse::<Timestamp>().unwrap(), ts);
    }

    #[test]
    fn truncates_nanoseconds() {
        let dt = Utc.timestamp_opt(10, 123_456_789).unwrap();
        assert_eq!(Timestamp::from_datetime(dt).as_micros(), 10_123_456);
    }

    #[test]
    fn offset_inputs_normalise_to_utc() {
        let ts: Timestamp = "2024-01-01T01:00:00.5+01:00".parse().unwrap();
        assert_eq!(ts.to_string(), "2024-01-01T00:00:00.500000Z");
    }
}
