//! Calendar handling on a 365-day seasonal cycle.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DAYS_PER_YEAR: usize = 365;

/// Day of year in `1..=365`. Feb 29 shares its value with Feb 28 and later
/// days of a leap year are shifted back by one.
pub fn day_of_year(date: NaiveDate) -> u16 {
    let ordinal = date.ordinal() as u16;
    if date.leap_year() && ordinal >= 60 {
        ordinal - 1
    } else {
        ordinal
    }
}

/// Calendar month in `1..=12`.
pub fn month(date: NaiveDate) -> u8 {
    date.month() as u8
}

/// Inclusive date range with a daily step.
pub fn daily_range(start: NaiveDate, end: NaiveDate) -> Vec<NaiveDate> {
    start.iter_days().take_while(|d| *d <= end).collect()
}

/// A closed interval of dates, e.g. a training or test period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Period {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidInput(format!(
                "period end {end} precedes start {start}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn years(first: i32, last: i32) -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(first, 1, 1).expect("valid year"),
            end: NaiveDate::from_ymd_opt(last, 12, 31).expect("valid year"),
        }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn overlaps(&self, other: &Period) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        daily_range(self.start, self.end)
    }
}

/// Per-date seasonal position and decade-normalized year.
#[derive(Debug, Clone, PartialEq)]
pub struct CalendarIndex {
    pub reference_year: i32,
    pub day: Vec<u16>,
    pub decade: Vec<f64>,
    pub month: Vec<u8>,
}

impl CalendarIndex {
    pub fn new(dates: &[NaiveDate], reference_year: i32) -> Self {
        Self {
            reference_year,
            day: dates.iter().map(|d| day_of_year(*d)).collect(),
            decade: dates
                .iter()
                .map(|d| decade_offset(*d, reference_year))
                .collect(),
            month: dates.iter().map(|d| month(*d)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.day.len()
    }

    pub fn is_empty(&self) -> bool {
        self.day.is_empty()
    }
}

/// `(year - reference_year) / 10`, so a trend coefficient reads in units per decade.
pub fn decade_offset(date: NaiveDate, reference_year: i32) -> f64 {
    f64::from(date.year() - reference_year) / 10.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn leap_day_shares_feb_28() {
        assert_eq!(day_of_year(ymd(1960, 2, 28)), 59);
        assert_eq!(day_of_year(ymd(1960, 2, 29)), 59);
        assert_eq!(day_of_year(ymd(1960, 3, 1)), 60);
        assert_eq!(day_of_year(ymd(1961, 3, 1)), 60);
        assert_eq!(day_of_year(ymd(1960, 12, 31)), 365);
        assert_eq!(day_of_year(ymd(1961, 12, 31)), 365);
    }

    #[test]
    fn days_in_range_and_increment_by_one() {
        let dates = daily_range(ymd(1957, 1, 1), ymd(2005, 12, 31));
        assert_eq!(dates.len(), 17_897);
        for w in dates.windows(2) {
            let (a, b) = (day_of_year(w[0]), day_of_year(w[1]));
            assert!((1..=365).contains(&a));
            let is_leap_day = w[1].month() == 2 && w[1].day() == 29;
            if is_leap_day {
                assert_eq!(a, b);
            } else if a == 365 {
                assert_eq!(b, 1);
            } else {
                assert_eq!(b, a + 1);
            }
        }
    }

    #[test]
    fn decade_normalization() {
        assert_eq!(decade_offset(ymd(1967, 6, 1), 1957), 1.0);
        assert_eq!(decade_offset(ymd(1957, 1, 1), 1957), 0.0);
        let idx = CalendarIndex::new(&[ymd(1987, 1, 1)], 1957);
        assert_eq!(idx.decade[0], 3.0);
        assert_eq!(idx.month[0], 1);
    }

    #[test]
    fn period_helpers() {
        let train = Period::years(1957, 1986);
        let test = Period::years(1987, 2005);
        assert!(!train.overlaps(&test));
        assert_eq!(train.dates().len(), 10_957);
        assert_eq!(test.dates().len(), 6_940);
        assert!(Period::new(ymd(2000, 1, 2), ymd(2000, 1, 1)).is_err());
    }
}
