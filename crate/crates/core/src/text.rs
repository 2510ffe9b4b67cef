//! Delimiter-separated text renderings of the crate's outputs. File IO
//! stays in the CLI crate; everything here is pure string building.

use alloc::format;
use alloc::string::String;

use crate::recommend::{GroupProfile, MembershipVector, RankedList};

/// Nine significant digits, scientific.
pub fn format_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// `user,rank,item,score` rows for one user's ranking; cold-start users get
/// a comment line ahead of their rows.
pub fn render_recommendation_rows(
    out: &mut String,
    user_key: &str,
    item_keys: &[String],
    ranked: &RankedList,
    cold_start: bool,
) {
    if cold_start {
        out.push_str(&format!("# cold-start user: {user_key}\n"));
    }
    for (rank, &item) in ranked.ranking.iter().enumerate() {
        out.push_str(&format!(
            "{user_key},{},{},{}\n",
            rank + 1,
            item_keys[item as usize],
            format_sig9(ranked.scores[item as usize])
        ));
    }
}

pub fn recommendation_header() -> &'static str {
    "user,rank,item,score\n"
}

/// `user,<group labels...>` header plus one membership row per user.
pub fn render_memberships(
    user_keys: &[String],
    group_labels: &[String],
    memberships: &[MembershipVector],
) -> String {
    let mut out = String::from("user");
    for label in group_labels {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for (user, membership) in user_keys.iter().zip(memberships) {
        out.push_str(user);
        for &v in membership.values() {
            out.push(',');
            out.push_str(&format_sig9(v));
        }
        out.push('\n');
    }
    out
}

/// Preference matrix with a group-id header row: `item,<labels...>`, one row
/// per item. Degenerate groups are noted in a leading comment.
pub fn render_group_profile(profile: &GroupProfile) -> String {
    let mut out = String::new();
    if !profile.degenerate_groups().is_empty() {
        let labels: alloc::vec::Vec<&str> = profile
            .degenerate_groups()
            .iter()
            .map(|&g| profile.group_labels()[g].as_str())
            .collect();
        out.push_str(&format!("# degenerate groups: {}\n", labels.join(",")));
    }
    out.push_str("item");
    for label in profile.group_labels() {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for (i, item) in profile.item_keys().iter().enumerate() {
        out.push_str(item);
        for g in 0..profile.num_groups() {
            out.push(',');
            out.push_str(&format_sig9(profile.preference(g, i)));
        }
        out.push('\n');
    }
    out
}
