//! Timestamp helpers. All timestamps are UTC epoch seconds as `f64`.

use chrono::{DateTime, Datelike, Months, NaiveDate, TimeZone, Utc};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Accepts epoch seconds, `YYYY-MM-DD` (midnight UTC) or RFC 3339.
pub fn parse_timestamp(text: &str) -> Result<f64> {
    let text = text.trim();
    if let Ok(v) = text.parse::<f64>() {
        return Ok(v);
    }
    if let Ok(d) = NaiveDate::parse_from_str(text, "%Y-%m-%d") {
        let dt = d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc();
        return Ok(dt.timestamp() as f64);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
        return Ok(dt.timestamp() as f64);
    }
    Err(Error::Config(format!("cannot parse `{text}` as a date or epoch seconds")))
}

/// Midnight UTC on January 1st of `year`.
pub fn year_start(year: i32) -> f64 {
    Utc.with_ymd_and_hms(year, 1, 1, 0, 0, 0)
        .single()
        .expect("valid calendar date")
        .timestamp() as f64
}

pub fn year_of(t: f64) -> i32 {
    to_datetime(t).map(|d| d.year()).unwrap_or(1970)
}

fn to_datetime(t: f64) -> Option<DateTime<Utc>> {
    DateTime::from_timestamp(t.floor() as i64, 0)
}

/// The same instant one calendar year earlier (falls back to 365 days when
/// the timestamp is outside chrono's range).
pub fn one_year_before(t: f64) -> f64 {
    let frac = t - t.floor();
    to_datetime(t)
        .and_then(|d| d.checked_sub_months(Months::new(12)))
        .map(|d| d.timestamp() as f64 + frac)
        .unwrap_or(t - 365.0 * SECONDS_PER_DAY)
}

pub fn format_date(t: f64) -> String {
    to_datetime(t)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| format!("{t}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dates_and_seconds() {
        assert_eq!(parse_timestamp("86400").unwrap(), 86_400.0);
        assert_eq!(parse_timestamp("1970-01-02").unwrap(), 86_400.0);
        assert_eq!(parse_timestamp("1970-01-02T00:00:00Z").unwrap(), 86_400.0);
        assert!(parse_timestamp("yesterday").is_err());
    }

    #[test]
    fn calendar_year_back() {
        assert_eq!(one_year_before(year_start(2017)), year_start(2016));
        assert_eq!(year_of(year_start(2013) + 5.0), 2013);
    }
}
