use std::fmt;
use std::str::FromStr;

use chrono::{NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::MIN_DATE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Men,
    Women,
    Mixed,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Men => "men",
            Gender::Women => "women",
            Gender::Mixed => "mixed",
        }
    }

    /// Gender implied by an event code suffix such as `100m-men`.
    pub fn from_event_code(code: &str) -> Gender {
        let lower = code.to_ascii_lowercase();
        if lower.ends_with("-women") || lower.ends_with("_women") || lower.ends_with("-w") {
            Gender::Women
        } else if lower.ends_with("-men") || lower.ends_with("_men") || lower.ends_with("-m") {
            Gender::Men
        } else {
            Gender::Mixed
        }
    }
}

impl FromStr for Gender {
    type Err = SliceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "men" | "m" => Ok(Gender::Men),
            "women" | "w" => Ok(Gender::Women),
            "mixed" | "x" => Ok(Gender::Mixed),
            other => Err(SliceError::Invalid(format!("unknown gender {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SliceError {
    #[error("invalid slice: {0}")]
    Invalid(String),
}

/// All performances for one event and gender within a date window.
///
/// The canonical text form is `event:gender:from:to:wind`, e.g.
/// `100m-men:men:2010-01-01:2025-12-31:legal` (`wind` is `legal` or `all`). A bare event
/// code parses with gender taken from the code, the full date range and legal wind only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventSlice {
    pub event_code: String,
    pub gender: Gender,
    pub date_from: NaiveDate,
    pub date_to: NaiveDate,
    pub wind_legal_only: bool,
}

impl EventSlice {
    pub fn new(
        event_code: impl Into<String>,
        gender: Gender,
        date_from: NaiveDate,
        date_to: NaiveDate,
        wind_legal_only: bool,
    ) -> Result<Self, SliceError> {
        let slice = EventSlice {
            event_code: event_code.into(),
            gender,
            date_from,
            date_to,
            wind_legal_only,
        };
        slice.validate()?;
        Ok(slice)
    }

    /// Whole-history slice for an event.
    pub fn whole_event(event_code: &str) -> EventSlice {
        EventSlice {
            event_code: event_code.to_string(),
            gender: Gender::from_event_code(event_code),
            date_from: MIN_DATE,
            date_to: Utc::now().date_naive().max(MIN_DATE),
            wind_legal_only: true,
        }
    }

    pub fn validate(&self) -> Result<(), SliceError> {
        if self.event_code.trim().is_empty() || self.event_code.contains(':') {
            return Err(SliceError::Invalid("event code must be non-empty and contain no ':'".into()));
        }
        if self.date_from > self.date_to {
            return Err(SliceError::Invalid(format!(
                "date_from {} is after date_to {}",
                self.date_from, self.date_to
            )));
        }
        Ok(())
    }

    /// Whether a performance of `event_code` on `date` with the given legality belongs here.
    pub fn contains(&self, event_code: &str, date: NaiveDate, wind_legal: bool) -> bool {
        event_code == self.event_code
            && date >= self.date_from
            && date <= self.date_to
            && (!self.wind_legal_only || wind_legal)
            && self.gender_matches(event_code)
    }

    fn gender_matches(&self, event_code: &str) -> bool {
        let implied = Gender::from_event_code(event_code);
        self.gender == Gender::Mixed || implied == Gender::Mixed || implied == self.gender
    }
}

impl fmt::Display for EventSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}:{}",
            self.event_code,
            self.gender.as_str(),
            self.date_from,
            self.date_to,
            if self.wind_legal_only { "legal" } else { "all" }
        )
    }
}

impl FromStr for EventSlice {
    type Err = SliceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let date = |p: &str| {
            NaiveDate::parse_from_str(p, "%Y-%m-%d")
                .map_err(|_| SliceError::Invalid(format!("bad date {p:?}")))
        };
        let slice = match parts.as_slice() {
            [event] => EventSlice::whole_event(event),
            [event, gender, from, to] => EventSlice {
                event_code: event.to_string(),
                gender: gender.parse()?,
                date_from: date(from)?,
                date_to: date(to)?,
                wind_legal_only: true,
            },
            [event, gender, from, to, wind] => EventSlice {
                event_code: event.to_string(),
                gender: gender.parse()?,
                date_from: date(from)?,
                date_to: date(to)?,
                wind_legal_only: match *wind {
                    "legal" => true,
                    "all" => false,
                    other => {
                        return Err(SliceError::Invalid(format!("wind must be legal|all, got {other:?}")))
                    }
                },
            },
            _ => return Err(SliceError::Invalid(format!("cannot parse slice {s:?}"))),
        };
        slice.validate()?;
        Ok(slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_round_trips() {
        let s: EventSlice = "100m-men:men:2010-01-01:2025-12-31:legal".parse().unwrap();
        assert_eq!(s.to_string(), "100m-men:men:2010-01-01:2025-12-31:legal");
        assert_eq!(s.to_string().parse::<EventSlice>().unwrap(), s);
        let all: EventSlice = "100m-women:women:2010-01-01:2025-12-31:all".parse().unwrap();
        assert!(!all.wind_legal_only);
    }

    #[test]
    fn bare_event_code() {
        let s: EventSlice = "200m-women".parse().unwrap();
        assert_eq!(s.gender, Gender::Women);
        assert!(s.wind_legal_only);
        assert_eq!(s.date_from, MIN_DATE);
    }

    #[test]
    fn rejects_inverted_window() {
        assert!("100m-men:men:2020-01-01:2010-01-01".parse::<EventSlice>().is_err());
        assert!("100m-men:men:2020-01-01".parse::<EventSlice>().is_err());
    }

    #[test]
    fn contains_filters() {
        let s: EventSlice = "100m-men:men:2010-01-01:2020-12-31:legal".parse().unwrap();
        let d = NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
        assert!(s.contains("100m-men", d, true));
        assert!(!s.contains("100m-men", d, false));
        assert!(!s.contains("200m-men", d, true));
        assert!(!s.contains("100m-men", NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(), true));
    }
}
