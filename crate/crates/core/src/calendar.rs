//! Monthly calendar indices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A calendar month, stored as months since January of year 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month(i32);

impl Month {
    /// `month` is 1-based.
    pub fn new(year: i32, month: u32) -> Self {
        assert!((1..=12).contains(&month), "month {month} out of range");
        Month(year * 12 + month as i32 - 1)
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    /// Calendar month, 1 = January.
    pub fn calendar(self) -> u32 {
        self.0.rem_euclid(12) as u32 + 1
    }

    /// Calendar month as a 0-based index.
    pub fn calendar_index(self) -> usize {
        self.0.rem_euclid(12) as usize
    }

    pub fn offset(self, months: i32) -> Self {
        Month(self.0 + months)
    }

    /// Signed number of months from `earlier` to `self`.
    pub fn since(self, earlier: Month) -> i32 {
        self.0 - earlier.0
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.calendar())
    }
}

impl FromStr for Month {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (y, m) = s.split_once('-').ok_or_else(|| format!("expected YYYY-MM, got `{s}`"))?;
        let year: i32 = y.parse().map_err(|_| format!("bad year in `{s}`"))?;
        let month: u32 = m.parse().map_err(|_| format!("bad month in `{s}`"))?;
        if !(1..=12).contains(&month) {
            return Err(format!("month out of range in `{s}`"));
        }
        Ok(Month::new(year, month))
    }
}

impl Serialize for Month {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive range of months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MonthRange {
    pub start: Month,
    pub end: Month,
}

impl MonthRange {
    pub fn new(start: Month, end: Month) -> Self {
        MonthRange { start, end }
    }

    /// January of `first` through December of `last`.
    pub fn years(first: i32, last: i32) -> Self {
        MonthRange { start: Month::new(first, 1), end: Month::new(last, 12) }
    }

    pub fn contains(&self, m: Month) -> bool {
        self.start <= m && m <= self.end
    }

    pub fn len(&self) -> usize {
        (self.end.since(self.start) + 1).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Month> {
        let start = self.start;
        (0..self.len() as i32).map(move |i| start.offset(i))
    }

    pub fn overlaps(&self, other: &MonthRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for MonthRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn month_arithmetic_and_text() {
        let m = Month::new(2000, 12);
        assert_eq!(m.offset(1), Month::new(2001, 1));
        assert_eq!(m.offset(-12), Month::new(1999, 12));
        assert_eq!(m.to_string(), "2000-12");
        assert_eq!("1979-01".parse::<Month>().unwrap(), Month::new(1979, 1));
        assert!("1979-13".parse::<Month>().is_err());
        assert_eq!(Month::new(2001, 6).since(Month::new(2000, 6)), 12);
    }

    #[test]
    fn ranges_are_inclusive() {
        let r = MonthRange::years(1979, 2010);
        assert_eq!(r.len(), 384);
        assert!(r.contains(Month::new(2010, 12)));
        assert!(!r.contains(Month::new(2011, 1)));
        assert_eq!(r.iter().count(), 384);
    }
}
