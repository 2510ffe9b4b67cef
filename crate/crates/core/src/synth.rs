//! Synthetic implicit feedback with planted tastes, plus the recovery
//! oracle used to check that learned level-1 latents find the planted item
//! blocks.
//!
//! Tastes partition a prefix of the item universe into disjoint blocks.
//! Each user holds each taste independently; consumption of an item is a
//! coin flip whose bias depends on whether the user holds the item's taste.
//! Events are emitted in a seed-derived shuffled order with the emission
//! index as timestamp, so a temporal split behaves like a random event
//! split and every part sees every user.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::InteractionRecord;
use crate::ltm::{LatentTreeModel, ModelError, NodeKind};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_tastes: usize,
    /// Tastes cover disjoint blocks of this many items; any items beyond
    /// `num_tastes * items_per_taste` belong to no taste.
    pub items_per_taste: usize,
    /// Probability a user holds each taste, independently.
    pub taste_prob: f64,
    /// Consumption probability for an item of a held taste.
    pub consume_prob_in: f64,
    /// Consumption probability otherwise (noise).
    pub consume_prob_out: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 1000,
            num_items: 80,
            num_tastes: 8,
            items_per_taste: 10,
            taste_prob: 0.3,
            consume_prob_in: 0.8,
            consume_prob_out: 0.02,
            rng_seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |message: String| Err(SynthError::InvalidConfig { message });
        if self.num_users == 0 || self.num_items == 0 {
            return fail("need at least one user and one item".to_string());
        }
        if self.num_tastes == 0 || self.items_per_taste == 0 {
            return fail("need at least one taste with at least one item".to_string());
        }
        if self.num_tastes * self.items_per_taste > self.num_items {
            return fail(format!(
                "{} tastes x {} items exceed the {}-item universe",
                self.num_tastes, self.items_per_taste, self.num_items
            ));
        }
        for (name, p) in [
            ("taste_prob", self.taste_prob),
            ("consume_prob_in", self.consume_prob_in),
            ("consume_prob_out", self.consume_prob_out),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// The planted structure behind a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `user_tastes[u][t]`: does user `u` hold taste `t`?
    pub user_tastes: Vec<Vec<bool>>,
    /// Taste of each item, `None` for items outside every block.
    pub item_taste: Vec<Option<usize>>,
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SynthError {
    InvalidConfig { message: String },
    Parse { line: usize, message: String },
    Model(ModelError),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::InvalidConfig { message } => write!(f, "invalid config: {message}"),
            SynthError::Parse { line, message } => write!(f, "truth line {line}: {message}"),
            SynthError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SynthError {}

impl From<ModelError> for SynthError {
    fn from(e: ModelError) -> Self {
        SynthError::Model(e)
    }
}

/// Generates records and their ground truth, deterministically in the seed.
/// Each user's draws come from a stream derived from the user index, and
/// timestamps are the emission order after a seeded shuffle.
pub fn generate(config: &SynthConfig) -> Result<(Vec<InteractionRecord>, GroundTruth), SynthError> {
    config.validate()?;

    let item_taste: Vec<Option<usize>> = (0..config.num_items)
        .map(|i| {
            let t = i / config.items_per_taste;
            (t < config.num_tastes).then_some(t)
        })
        .collect();
    let user_keys: Vec<String> = (0..config.num_users).map(|u| format!("u{u}")).collect();
    let item_keys: Vec<String> = (0..config.num_items).map(|i| format!("i{i}")).collect();

    let mut user_tastes = Vec::with_capacity(config.num_users);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for u in 0..config.num_users {
        let mut rng = Rng::derive(config.rng_seed, &[1, u as u64]);
        let tastes: Vec<bool> = (0..config.num_tastes)
            .map(|_| rng.bernoulli(config.taste_prob))
            .collect();
        for (i, taste) in item_taste.iter().enumerate() {
            let p = match taste {
                Some(t) if tastes[*t] => config.consume_prob_in,
                _ => config.consume_prob_out,
            };
            if rng.bernoulli(p) {
                pairs.push((u, i));
            }
        }
        user_tastes.push(tastes);
    }

    let mut order_rng = Rng::derive(config.rng_seed, &[2]);
    order_rng.shuffle(&mut pairs);
    let records = pairs
        .into_iter()
        .enumerate()
        .map(|(t, (u, i))| InteractionRecord {
            user_key: user_keys[u].clone(),
            item_key: item_keys[i].clone(),
            timestamp: t as i64,
        })
        .collect();

    Ok((
        records,
        GroundTruth {
            user_tastes,
            item_taste,
            user_keys,
            item_keys,
        },
    ))
}

/// Fraction of planted-block items covered by their matched learned latent.
///
/// Each latent's observed descendants are matched against taste blocks by
/// greatest overlap, greedily, each taste used at most once; purity is the
/// matched-item count over all items in planted blocks.
pub fn group_recovery_score(
    model: &LatentTreeModel,
    truth: &GroundTruth,
    level: u32,
) -> Result<f64, SynthError> {
    let latents = model.latents_at_level(level)?;
    let children = model.child_lists();

    // observed descendants per latent, as truth item indices
    let mut descendants: Vec<Vec<usize>> = Vec::with_capacity(latents.len());
    for &latent in &latents {
        let mut items = Vec::new();
        let mut stack = vec![latent];
        while let Some(v) = stack.pop() {
            if model.node(v).kind == NodeKind::Observed {
                if let Some(idx) = truth
                    .item_keys
                    .iter()
                    .position(|k| *k == model.node(v).label)
                {
                    items.push(idx);
                }
            } else {
                stack.extend(children[v.index()].iter().copied());
            }
        }
        descendants.push(items);
    }

    let num_tastes = truth
        .item_taste
        .iter()
        .flatten()
        .copied()
        .max()
        .map_or(0, |t| t + 1);
    let total_planted = truth.item_taste.iter().flatten().count();
    if total_planted == 0 {
        return Ok(0.0);
    }

    // overlap[latent][taste]
    let mut overlap = vec![vec![0usize; num_tastes]; latents.len()];
    for (l, items) in descendants.iter().enumerate() {
        for &i in items {
            if let Some(t) = truth.item_taste[i] {
                overlap[l][t] += 1;
            }
        }
    }

    // global greedy matching, largest overlap first, ties by (latent, taste)
    let mut latent_used = vec![false; latents.len()];
    let mut taste_used = vec![false; num_tastes];
    let mut matched = 0usize;
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for l in 0..latents.len() {
            if latent_used[l] {
                continue;
            }
            for t in 0..num_tastes {
                if taste_used[t] || overlap[l][t] == 0 {
                    continue;
                }
                if best.is_none_or(|(_, _, o)| overlap[l][t] > o) {
                    best = Some((l, t, overlap[l][t]));
                }
            }
        }
        match best {
            Some((l, t, o)) => {
                latent_used[l] = true;
                taste_used[t] = true;
                matched += o;
            }
            None => break,
        }
    }

    Ok(matched as f64 / total_planted as f64)
}

const TRUTH_TAG: &str = "tastecf-truth v1";

/// Renders the ground truth as structured text: user taste bitmaps followed
/// by item taste labels.
pub fn format_truth(truth: &GroundTruth) -> String {
    let mut out = String::new();
    out.push_str(TRUTH_TAG);
    out.push('\n');
    out.push_str(&format!(
        "users {} items {}\n",
        truth.user_keys.len(),
        truth.item_keys.len()
    ));
    for (u, tastes) in truth.user_tastes.iter().enumerate() {
        let bitmap: String = tastes.iter().map(|&t| if t { '1' } else { '0' }).collect();
        out.push_str(&format!("user {} {}\n", truth.user_keys[u], bitmap));
    }
    for (i, taste) in truth.item_taste.iter().enumerate() {
        match taste {
            Some(t) => out.push_str(&format!("item {} {t}\n", truth.item_keys[i])),
            None => out.push_str(&format!("item {} none\n", truth.item_keys[i])),
        }
    }
    out
}

/// Parses the text produced by [`format_truth`].
pub fn parse_truth(input: &str) -> Result<GroundTruth, SynthError> {
    let err = |line: usize, message: String| SynthError::Parse { line, message };
    let mut lines = input.lines().enumerate().map(|(k, l)| (k + 1, l));
    let (line, tag) = lines.next().ok_or_else(|| err(1, "empty input".into()))?;
    if tag != TRUTH_TAG {
        return Err(err(line, format!("expected header '{TRUTH_TAG}'")));
    }
    let (line, counts) = lines
        .next()
        .ok_or_else(|| err(2, "missing counts".into()))?;
    let fields: Vec<&str> = counts.split(' ').collect();
    let (num_users, num_items) = match fields.as_slice() {
        ["users", u, "items", i] => (
            u.parse::<usize>()
                .map_err(|_| err(line, format!("bad user count '{u}'")))?,
            i.parse::<usize>()
                .map_err(|_| err(line, format!("bad item count '{i}'")))?,
        ),
        _ => return Err(err(line, "expected 'users <n> items <m>'".into())),
    };

    let mut user_keys = Vec::with_capacity(num_users);
    let mut user_tastes = Vec::with_capacity(num_users);
    let mut item_keys = Vec::with_capacity(num_items);
    let mut item_taste = Vec::with_capacity(num_items);
    for (line, text) in lines {
        let fields: Vec<&str> = text.split(' ').collect();
        match fields.as_slice() {
            ["user", key, bitmap] => {
                let tastes = bitmap
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        _ => Err(err(line, format!("bad bitmap char '{c}'"))),
                    })
                    .collect::<Result<Vec<bool>, _>>()?;
                user_keys.push(key.to_string());
                user_tastes.push(tastes);
            }
            ["item", key, "none"] => {
                item_keys.push(key.to_string());
                item_taste.push(None);
            }
            ["item", key, taste] => {
                let t = taste
                    .parse::<usize>()
                    .map_err(|_| err(line, format!("bad taste '{taste}'")))?;
                item_keys.push(key.to_string());
                item_taste.push(Some(t));
            }
            _ => return Err(err(line, "expected a 'user' or 'item' line".into())),
        }
    }
    if user_keys.len() != num_users || item_keys.len() != num_items {
        return Err(err(
            input.lines().count(),
            format!(
                "declared {num_users} users / {num_items} items, found {} / {}",
                user_keys.len(),
                item_keys.len()
            ),
        ));
    }
    Ok(GroundTruth {
        user_tastes,
        item_taste,
        user_keys,
        item_keys,
    })
}
