use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MINUTES_PER_DAY: f64 = 1440.0;

/// Clock time as minutes after midnight, held at 0.1 minute resolution.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TimeOfDay(f64);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimeError {
    #[error("time {0} min is outside [0, 1440)")]
    OutOfRange(f64),
    #[error("cannot read {0:?} as HH:MM")]
    Format(String),
}

/// Rounds minutes to the 0.1 minute grid.
pub fn round_tenth(minutes: f64) -> f64 {
    (minutes * 10.0).round() / 10.0
}

impl TimeOfDay {
    pub fn from_minutes(minutes: f64) -> Result<Self, TimeError> {
        if !minutes.is_finite() {
            return Err(TimeError::OutOfRange(minutes));
        }
        let rounded = round_tenth(minutes);
        if !(0.0..MINUTES_PER_DAY).contains(&rounded) {
            return Err(TimeError::OutOfRange(minutes));
        }
        Ok(Self(rounded))
    }

    pub fn hm(hour: u32, minute: u32) -> Self {
        Self::from_minutes(f64::from(hour * 60 + minute)).expect("valid clock time")
    }

    pub fn minutes(self) -> f64 {
        self.0
    }
}

/// Formats minutes after midnight as `HH:MM`, or `HH:MM.d` when a tenth of a
/// minute is present. Values past midnight keep counting hours.
pub fn format_clock(minutes: f64) -> String {
    let tenths = (minutes * 10.0).round() as i64;
    let sign = if tenths < 0 { "-" } else { "" };
    let tenths = tenths.abs();
    let hour = tenths / 600;
    let minute = (tenths % 600) / 10;
    let frac = tenths % 10;
    if frac == 0 {
        format!("{sign}{hour:02}:{minute:02}")
    } else {
        format!("{sign}{hour:02}:{minute:02}.{frac}")
    }
}

/// Reads `H:MM`, `HH:MM` or `HH:MM.d`.
pub fn parse_clock(text: &str) -> Result<f64, TimeError> {
    let bad = || TimeError::Format(text.to_string());
    let (h, m) = text.trim().split_once(':').ok_or_else(bad)?;
    if h.is_empty() || h.len() > 2 || !h.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let (whole, frac) = match m.split_once('.') {
        Some((w, f)) => (w, Some(f)),
        None => (m, None),
    };
    if whole.len() != 2 || !whole.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    if let Some(f) = frac {
        if f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
    }
    let hour: u32 = h.parse().map_err(|_| bad())?;
    let minute: f64 = m.parse().map_err(|_| bad())?;
    if hour > 23 || minute >= 60.0 {
        return Err(TimeError::OutOfRange(f64::from(hour) * 60.0 + minute));
    }
    Ok(round_tenth(f64::from(hour) * 60.0 + minute))
}

impl FromStr for TimeOfDay {
    type Err = TimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_minutes(parse_clock(s)?)
    }
}

impl TryFrom<f64> for TimeOfDay {
    type Error = TimeError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::from_minutes(value)
    }
}

impl From<TimeOfDay> for f64 {
    fn from(t: TimeOfDay) -> f64 {
        t.0
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_clock(self.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_formats() {
        assert_eq!(parse_clock("08:12").unwrap(), 492.0);
        assert_eq!(parse_clock("8:12").unwrap(), 492.0);
        assert_eq!(parse_clock("08:23.6").unwrap(), 503.6);
        assert_eq!(format_clock(503.636), "08:23.6");
        assert_eq!(format_clock(540.0), "09:00");
        assert_eq!(TimeOfDay::hm(9, 0).to_string(), "09:00");
    }

    #[test]
    fn rejects_bad_clock_text() {
        assert!(matches!(parse_clock("25:00"), Err(TimeError::OutOfRange(_))));
        assert!(matches!(parse_clock("08:60"), Err(TimeError::OutOfRange(_))));
        assert!(matches!(parse_clock("8ish"), Err(TimeError::Format(_))));
        assert!(matches!(parse_clock("08:5"), Err(TimeError::Format(_))));
        assert!(matches!(parse_clock("08:05."), Err(TimeError::Format(_))));
    }

    #[test]
    fn range_and_resolution() {
        assert!(TimeOfDay::from_minutes(-0.1).is_err());
        assert!(TimeOfDay::from_minutes(1440.0).is_err());
        assert_eq!(TimeOfDay::from_minutes(480.04).unwrap().minutes(), 480.0);
        let t: TimeOfDay = serde_json::from_str("540").unwrap();
        assert_eq!(t, TimeOfDay::hm(9, 0));
        assert!(serde_json::from_str::<TimeOfDay>("1500").is_err());
    }
}
