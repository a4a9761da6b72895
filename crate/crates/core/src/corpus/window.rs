//! Short/medium/long-term preference windows.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::records::InteractionRecord;

pub const DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowClass {
    Short,
    Medium,
    Long,
}

impl WindowClass {
    pub const ALL: [WindowClass; 3] = [WindowClass::Short, WindowClass::Medium, WindowClass::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            WindowClass::Short => "short",
            WindowClass::Medium => "medium",
            WindowClass::Long => "long",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Classes to try, starting with `self`, when a drawn window is empty.
    fn fallback_order(self) -> [WindowClass; 3] {
        match self {
            WindowClass::Short => [WindowClass::Short, WindowClass::Medium, WindowClass::Long],
            WindowClass::Medium => [WindowClass::Medium, WindowClass::Short, WindowClass::Long],
            WindowClass::Long => [WindowClass::Long, WindowClass::Medium, WindowClass::Short],
        }
    }
}

impl fmt::Display for WindowClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    /// Sampling probabilities for (short, medium, long).
    pub window_mix: [f64; 3],
    pub short_horizon_days: f64,
    pub medium_horizon_days: f64,
    pub max_history_items: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_mix: [0.6, 0.3, 0.1],
            short_horizon_days: 7.0,
            medium_horizon_days: 90.0,
            max_history_items: 8,
        }
    }
}

/// Window of `interactions[cut]` by its age relative to the most recent one.
pub fn classify_window(interactions: &[InteractionRecord], cut: usize, config: &WindowConfig) -> WindowClass {
    let newest = interactions.last().map_or(0, |r| r.timestamp);
    let age_days = (newest - interactions[cut].timestamp) as f64 / DAY as f64;
    if age_days <= config.short_horizon_days {
        WindowClass::Short
    } else if age_days <= config.medium_horizon_days {
        WindowClass::Medium
    } else {
        WindowClass::Long
    }
}

/// Draws a window class by `window_mix` and returns a contiguous run of at
/// least two interactions that ends inside that window. Returns `None` for
/// histories shorter than two.
pub fn sample_slice<R: Rng + ?Sized>(
    interactions: &[InteractionRecord],
    config: &WindowConfig,
    rng: &mut R,
) -> Option<(WindowClass, Range<usize>)> {
    if interactions.len() < 2 {
        return None;
    }
    let mut ends: [Vec<usize>; 3] = Default::default();
    for end in 1..interactions.len() {
        ends[classify_window(interactions, end, config).index()].push(end);
    }

    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut drawn = WindowClass::Long;
    for class in WindowClass::ALL {
        acc += config.window_mix[class.index()];
        if u < acc {
            drawn = class;
            break;
        }
    }
    let class = drawn
        .fallback_order()
        .into_iter()
        .find(|c| !ends[c.index()].is_empty())?;
    let candidates = &ends[class.index()];
    let end = candidates[rng.random_range(0..candidates.len())];
    let len = (end + 1).min(config.max_history_items.max(2));
    Some((class, end + 1 - len..end + 1))
}
