//! Feature rows for the population-level learned detectors.

use std::collections::HashMap;

use super::AthleteHistory;

/// Number of prior performances averaged into `recent_form`.
pub const RECENT_FORM_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub time_seconds: f64,
    /// Missing wind imputed as 0.
    pub wind_mps: f64,
    pub competition_level: u8,
    pub recent_form: f64,
    pub round_ordinal: u8,
}

impl FeatureVector {
    pub const NAMES: [&'static str; 5] =
        ["time_seconds", "wind_mps", "competition_level", "recent_form", "round_ordinal"];

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.time_seconds,
            self.wind_mps,
            f64::from(self.competition_level),
            self.recent_form,
            f64::from(self.round_ordinal),
        ]
    }

    /// Context-only features for the residual model: wind, round, competition level.
    pub fn context(&self) -> [f64; 3] {
        [self.wind_mps, f64::from(self.round_ordinal), f64::from(self.competition_level)]
    }
}

/// Position of a feature row in the input histories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLink {
    pub history: usize,
    pub performance: usize,
}

/// Level ordinal for a competition category string; unknown or absent is 0.
pub fn competition_level(category: Option<&str>) -> u8 {
    match category.map(|c| c.trim().to_ascii_lowercase()) {
        Some(c) => match c.as_str() {
            "national" | "nat" => 1,
            "continental" | "area" | "regional" => 2,
            "tour" | "diamond_league" | "diamond league" | "gold" | "gl" | "dl" => 3,
            "global" | "world" | "olympic" | "olympics" | "og" | "wc" | "championships" => 4,
            _ => 0,
        },
        None => 0,
    }
}

/// One feature row per performance, in history order.
pub fn build_features(
    histories: &[&AthleteHistory],
    levels: &HashMap<String, u8>,
) -> (Vec<RowLink>, Vec<FeatureVector>) {
    let total: usize = histories.iter().map(|h| h.len()).sum();
    let mut links = Vec::with_capacity(total);
    let mut rows = Vec::with_capacity(total);
    for (hi, h) in histories.iter().enumerate() {
        let times = h.times_seconds();
        let slice_mean = times.iter().sum::<f64>() / times.len() as f64;
        // `prior` counts performances on strictly earlier dates
        let mut prior = 0;
        for (pi, p) in h.performances.iter().enumerate() {
            while h.performances[prior].date < p.date {
                prior += 1;
            }
            let recent_form = if prior == 0 {
                slice_mean
            } else {
                let window = &times[prior.saturating_sub(RECENT_FORM_WINDOW)..prior];
                window.iter().sum::<f64>() / window.len() as f64
            };
            links.push(RowLink { history: hi, performance: pi });
            rows.push(FeatureVector {
                time_seconds: times[pi],
                wind_mps: p.wind_mps.unwrap_or(0.0),
                competition_level: levels.get(&p.competition_id).copied().unwrap_or(0),
                recent_form,
                round_ordinal: p.round.ordinal(),
            });
        }
    }
    (links, rows)
}
