//! Synthetic recommendation worlds with a planted transition rule.
//!
//! Items follow a hidden permutation `sigma`: after item `i` a user picks
//! `sigma(i)` with probability `1 - epsilon` and a uniformly random item
//! otherwise, so the best achievable next-item HR@1 is `1 - epsilon + epsilon / M`.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionRecord, DAY};
use crate::error::{Error, Result};
use crate::seed;

/// Title vocabulary. Kept disjoint from the prompt templates' words.
pub const THEME_WORDS: [&str; 48] = [
    "dragon", "castle", "quest", "galaxy", "ticket", "ride", "forest", "kingdom", "pirate", "island", "empire",
    "shadow", "crystal", "tower", "river", "mountain", "legend", "knight", "wizard", "robot", "ocean", "desert",
    "harbor", "citadel", "garden", "temple", "storm", "frontier", "dungeon", "rocket", "jungle", "village",
    "treasure", "express", "carnival", "lantern", "meadow", "glacier", "canyon", "orchard", "bazaar", "colony",
    "voyage", "summit", "harvest", "puzzle", "arena", "saga",
];

/// Relative weights of title lengths 1..=4.
const TITLE_LENGTH_WEIGHTS: [f64; 4] = [0.15, 0.45, 0.3, 0.1];

const REVIEW_WORDS: [&str; 5] = ["awful", "poor", "okay", "fine", "great"];

/// First timestamp of the synthetic calendar (2020-01-01).
const EPOCH: i64 = 1_577_836_800;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub catalog_size: usize,
    pub epsilon: f64,
    pub users: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that a rating is nudged one star up or down from its class value.
    pub rating_noise: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            catalog_size: 100,
            epsilon: 0.1,
            users: 2000,
            min_interactions: 10,
            max_interactions: 14,
            rating_noise: 0.2,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("world.{m}")));
        if self.catalog_size < 2 {
            return fail("catalog_size must be at least 2");
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return fail("epsilon must lie in [0, 1)");
        }
        if self.min_interactions < 2 || self.max_interactions < self.min_interactions {
            return fail("interaction bounds must satisfy 2 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.rating_noise) {
            return fail("rating_noise must lie in [0, 1]");
        }
        Ok(())
    }

    /// Best achievable next-item HR@1.
    pub fn bayes_hr1(&self) -> f64 {
        1.0 - self.epsilon + self.epsilon / self.catalog_size as f64
    }
}

/// Everything needed to score predictions against the planted rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: WorldSpec,
    pub item_ids: Vec<String>,
    pub titles: Vec<String>,
    /// `sigma[i]` is the planted successor of item `i`.
    pub sigma: Vec<usize>,
    /// Ratings are `class + 1`, nudged by one star with probability `rating_noise`.
    pub item_class: Vec<u8>,
    pub bayes_hr1: f64,
}

impl GroundTruth {
    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.item_ids.iter().position(|x| x == item_id)
    }

    /// The oracle's next-item prediction.
    pub fn successor(&self, item_id: &str) -> Option<&str> {
        self.index_of(item_id).map(|i| self.item_ids[self.sigma[i]].as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub records: Vec<InteractionRecord>,
    pub truth: GroundTruth,
}

impl World {
    pub fn write_interactions<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            writeln!(w, "{}", r.to_line())?;
        }
        Ok(())
    }

    pub fn write_truth<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, &self.truth)?;
        writeln!(w)?;
        Ok(())
    }
}

fn draw_titles(m: usize, rng: &mut seed::Rng) -> Vec<String> {
    let total: f64 = TITLE_LENGTH_WEIGHTS.iter().sum();
    let mut used = BTreeSet::new();
    let mut titles = Vec::with_capacity(m);
    while titles.len() < m {
        let mut u = rng.random::<f64>() * total;
        let mut len = TITLE_LENGTH_WEIGHTS.len();
        for (i, w) in TITLE_LENGTH_WEIGHTS.iter().enumerate() {
            if u < *w {
                len = i + 1;
                break;
            }
            u -= w;
        }
        let words: Vec<&str> = (0..len).map(|_| THEME_WORDS[rng.random_range(0..THEME_WORDS.len())]).collect();
        let title = words.join(" ");
        if used.insert(title.clone()) {
            titles.push(title);
        }
    }
    titles
}

/// Time gap before the next interaction: mostly days, sometimes weeks or months,
/// so every window class occurs.
fn draw_gap(rng: &mut seed::Rng) -> i64 {
    let u: f64 = rng.random();
    let days = if u < 0.5 {
        rng.random_range(0.2..3.0)
    } else if u < 0.85 {
        rng.random_range(3.0..30.0)
    } else {
        rng.random_range(30.0..120.0)
    };
    (days * DAY as f64) as i64
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let m = spec.catalog_size;
    let mut rng = seed::stream(spec.seed, "synth.catalog", "");
    let titles = draw_titles(m, &mut rng);
    let mut sigma: Vec<usize> = (0..m).collect();
    sigma.shuffle(&mut rng);
    let item_class: Vec<u8> = (0..m).map(|_| rng.random_range(0..5u8)).collect();
    let item_ids: Vec<String> = (0..m).map(|i| format!("i{i:03}")).collect();

    let mut records = Vec::new();
    for u in 0..spec.users {
        let user_id = format!("u{u:04}");
        let mut rng = seed::stream(spec.seed, "synth.user", &user_id);
        let n = rng.random_range(spec.min_interactions..=spec.max_interactions);
        let mut item = rng.random_range(0..m);
        let mut ts = EPOCH + rng.random_range(0..365 * DAY);
        for k in 0..n {
            if k > 0 {
                item = if rng.random::<f64>() < 1.0 - spec.epsilon {
                    sigma[item]
                } else {
                    rng.random_range(0..m)
                };
                ts += draw_gap(&mut rng).max(1);
            }
            let mut rating = i32::from(item_class[item]) + 1;
            if rng.random::<f64>() < spec.rating_noise {
                rating += if rng.random::<bool>() { 1 } else { -1 };
            }
            let rating = rating.clamp(1, 5) as u8;
            records.push(InteractionRecord {
                user_id: user_id.clone(),
                item_id: item_ids[item].clone(),
                item_title: titles[item].clone(),
                rating,
                timestamp: ts,
                review: Some(format!("{} game , {} .", REVIEW_WORDS[rating as usize - 1], titles[item])),
            });
        }
    }
    Ok(World {
        records,
        truth: GroundTruth {
            spec: spec.clone(),
            item_ids,
            titles,
            sigma,
            item_class,
            bayes_hr1: spec.bayes_hr1(),
        },
    })
}

/// HR@1 of the planted-rule oracle over every consecutive transition.
pub fn oracle_hr1(records: &[InteractionRecord], truth: &GroundTruth) -> f64 {
    let mut by_user: HashMap<&str, Vec<&InteractionRecord>> = HashMap::new();
    for r in records {
        by_user.entry(&r.user_id).or_default().push(r);
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for seq in by_user.values_mut() {
        seq.sort_by_key(|r| r.timestamp);
        for w in seq.windows(2) {
            total += 1;
            if truth.successor(&w[0].item_id) == Some(w[1].item_id.as_str()) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
