//! Train / validation / test periods.

use crate::calendar::{Month, MonthRange};
use crate::error::{Error, Result};

pub const FIRST_YEAR: i32 = 1979;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Training 1979–2010, validation 2011–2014, test 2015–2022.
    Fixed,
    /// Training through December of `Y-5`, validation `Y-4`..`Y-1`, test `Y`.
    Rolling,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(SplitMode::Fixed),
            "rolling" => Ok(SplitMode::Rolling),
            _ => Err(Error::invalid("split mode", format!("`{s}` (expected fixed or rolling)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Splits {
    pub train: MonthRange,
    pub valid: MonthRange,
    pub test: MonthRange,
}

impl Splits {
    /// Explicit year ranges; they must be ordered and non-overlapping.
    pub fn custom(train: (i32, i32), valid: (i32, i32), test: (i32, i32)) -> Result<Self> {
        let s = Splits {
            train: MonthRange::years(train.0, train.1),
            valid: MonthRange::years(valid.0, valid.1),
            test: MonthRange::years(test.0, test.1),
        };
        let ordered = [s.train, s.valid, s.test].iter().all(|r| r.start <= r.end)
            && s.train.end < s.valid.start
            && s.valid.end < s.test.start;
        if !ordered {
            return Err(Error::invalid("splits", format!("{} / {} / {} are not ordered and disjoint", s.train, s.valid, s.test)));
        }
        Ok(s)
    }
}

pub fn make_splits(mode: SplitMode, target_year: Option<i32>) -> Result<Splits> {
    match mode {
        SplitMode::Fixed => Splits::custom((FIRST_YEAR, 2010), (2011, 2014), (2015, 2022)),
        SplitMode::Rolling => {
            let y = target_year.ok_or_else(|| Error::invalid("target year", "rolling splits need a target year"))?;
            if !(FIRST_YEAR + 5..=9999).contains(&y) {
                return Err(Error::invalid("target year", format!("{y} leaves no training years (minimum {})", FIRST_YEAR + 5)));
            }
            Splits::custom((FIRST_YEAR, y - 5), (y - 4, y - 1), (y, y))
        }
    }
}

/// Initializations whose lagged inputs (`max_lag` months back) and targets
/// (`lead_count` months) all fall inside `range`.
pub fn init_months(range: MonthRange, max_lag: usize, lead_count: usize) -> Vec<Month> {
    let first = range.start.offset(max_lag as i32);
    let last = range.end.offset(1 - lead_count as i32);
    if last < first {
        return Vec::new();
    }
    MonthRange::new(first, last).iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rolling_examples() {
        let s = make_splits(SplitMode::Rolling, Some(2001)).unwrap();
        assert_eq!(s.train, MonthRange::years(1979, 1996));
        assert_eq!(s.valid, MonthRange::years(1997, 2000));
        let s = make_splits(SplitMode::Rolling, Some(2002)).unwrap();
        assert_eq!(s.train, MonthRange::years(1979, 1997));
        assert_eq!(s.valid, MonthRange::years(1998, 2001));
        assert!(make_splits(SplitMode::Rolling, Some(1983)).is_err());
        assert!(make_splits(SplitMode::Rolling, None).is_err());
    }

    #[test]
    fn fixed_test_inits_start_after_one_year() {
        let s = make_splits(SplitMode::Fixed, None).unwrap();
        let inits = init_months(s.test, 12, 1);
        assert_eq!(inits.first(), Some(&Month::new(2016, 1)));
        assert_eq!(inits.last(), Some(&Month::new(2022, 12)));
        assert_eq!(inits.len(), 84);
    }
}
