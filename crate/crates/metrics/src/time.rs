//! Local wall-clock helpers for day/night rules.

use chrono::{Duration, NaiveDate};
use icu_core::TimestampMs;
use serde::{Deserialize, Serialize};

pub const MS_PER_HOUR: i64 = 3_600_000;
pub const MS_PER_DAY: i64 = 24 * MS_PER_HOUR;

/// A fixed UTC offset plus the hour at which day and night begin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayClock {
    pub utc_offset_minutes: i32,
    /// Day is `[day_start_hour, night_start_hour)` local time.
    pub day_start_hour: u32,
    pub night_start_hour: u32,
}

impl Default for DayClock {
    fn default() -> Self {
        Self {
            utc_offset_minutes: 0,
            day_start_hour: 7,
            night_start_hour: 19,
        }
    }
}

impl DayClock {
    pub fn local_ms(&self, ts: TimestampMs) -> i64 {
        ts + self.utc_offset_minutes as i64 * 60_000
    }

    /// Milliseconds since local midnight.
    pub fn time_of_day_ms(&self, ts: TimestampMs) -> i64 {
        self.local_ms(ts).rem_euclid(MS_PER_DAY)
    }

    pub fn is_day(&self, ts: TimestampMs) -> bool {
        let t = self.time_of_day_ms(ts);
        t >= self.day_start_hour as i64 * MS_PER_HOUR && t < self.night_start_hour as i64 * MS_PER_HOUR
    }

    pub fn is_night(&self, ts: TimestampMs) -> bool {
        !self.is_day(ts)
    }

    fn date_of_local(local: i64) -> String {
        let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date");
        (epoch + Duration::days(local.div_euclid(MS_PER_DAY))).format("%Y-%m-%d").to_string()
    }

    /// Local calendar date, `YYYY-MM-DD`.
    pub fn local_date(&self, ts: TimestampMs) -> String {
        Self::date_of_local(self.local_ms(ts))
    }

    /// The night a timestamp belongs to, named by the date on which it
    /// began: 02:00 on the 5th is part of the night of the 4th.
    pub fn night_of(&self, ts: TimestampMs) -> String {
        Self::date_of_local(self.local_ms(ts) - self.night_start_hour as i64 * MS_PER_HOUR)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.day_start_hour >= self.night_start_hour || self.night_start_hour > 24 {
            return Err(format!(
                "day must start before night within 24 h (got {} and {})",
                self.day_start_hour, self.night_start_hour
            ));
        }
        if self.utc_offset_minutes.abs() > 14 * 60 {
            return Err(format!("utc offset {} min out of range", self.utc_offset_minutes));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn day_night_and_dates() {
        let c = DayClock::default();
        let d = 19_000 * MS_PER_DAY; // 2022-01-08 00:00 UTC
        assert_eq!(c.local_date(d), "2022-01-08");
        assert!(c.is_night(d + 2 * MS_PER_HOUR));
        assert_eq!(c.night_of(d + 2 * MS_PER_HOUR), "2022-01-07");
        assert!(c.is_day(d + 7 * MS_PER_HOUR));
        assert!(c.is_night(d + 19 * MS_PER_HOUR));
        assert!(c.is_day(d + 19 * MS_PER_HOUR - 1));
        assert_eq!(c.night_of(d + 19 * MS_PER_HOUR), "2022-01-08");
        let east = DayClock { utc_offset_minutes: 120, ..c };
        assert!(east.is_day(d + 5 * MS_PER_HOUR));
        assert!(DayClock { day_start_hour: 20, ..c }.validate().is_err());
    }
}
