//! Comparisons of measured head rankings with the heads reported for the
//! fair-lending task.

use std::fmt::Write;

use circuitscope::attribution::AttributionGrid;
use circuitscope::patching::PatchGrid;
use serde::Serialize;

/// Heads whose direct contribution to logit(Yes) − logit(No) was reported as
/// strongly positive.
pub const DLA_POSITIVE: [(usize, usize); 3] = [(11, 4), (8, 9), (6, 3)];
/// ... and strongly negative.
pub const DLA_NEGATIVE: [(usize, usize); 3] = [(0, 6), (11, 0), (10, 7)];
/// Heads whose output patching restores the most of the clean behaviour.
pub const PATCH_POSITIVE: [(usize, usize); 3] = [(10, 2), (10, 7), (11, 3)];
/// Heads whose output patching moves the logit difference the wrong way.
pub const PATCH_NEGATIVE: [(usize, usize); 2] = [(9, 6), (10, 6)];

pub const TOP_K: usize = 10;

#[derive(Clone, Debug, Serialize)]
pub struct HeadCheck {
    pub head: String,
    /// `positive` or `negative`.
    pub expected: &'static str,
    pub value: f32,
    /// 1-based rank among heads sorted in the expected direction.
    pub rank: usize,
    pub within_top_k: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct HeadReport {
    pub title: String,
    pub top_k: usize,
    pub checks: Vec<HeadCheck>,
    pub top_positive: Vec<(String, f32)>,
    pub top_negative: Vec<(String, f32)>,
    /// Every expected head is within the top k in its direction.
    pub all_within: bool,
}

fn label(l: usize, h: usize) -> String {
    format!("{l}.{h}")
}

/// `values[l * n_heads + h]`.
fn head_report(
    title: &str,
    values: &[f32],
    n_heads: usize,
    positive: &[(usize, usize)],
    negative: &[(usize, usize)],
) -> HeadReport {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let desc = order.clone();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let asc = order;
    let named = |i: usize| (label(i / n_heads, i % n_heads), values[i]);
    let check = |&(l, h): &(usize, usize), expected: &'static str, ranking: &[usize]| {
        let i = l * n_heads + h;
        let rank = ranking.iter().position(|&j| j == i).map_or(usize::MAX, |r| r + 1);
        HeadCheck {
            head: label(l, h),
            expected,
            value: values.get(i).copied().unwrap_or(f32::NAN),
            rank,
            within_top_k: rank <= TOP_K,
        }
    };
    let checks: Vec<HeadCheck> = positive
        .iter()
        .map(|h| check(h, "positive", &desc))
        .chain(negative.iter().map(|h| check(h, "negative", &asc)))
        .collect();
    HeadReport {
        title: title.to_owned(),
        top_k: TOP_K,
        all_within: checks.iter().all(|c| c.within_top_k),
        checks,
        top_positive: desc.iter().take(TOP_K).map(|&i| named(i)).collect(),
        top_negative: asc.iter().take(TOP_K).map(|&i| named(i)).collect(),
    }
}

pub fn attribution_head_report(per_head: &AttributionGrid, n_heads: usize) -> HeadReport {
    head_report(
        "Direct logit attribution per head",
        &per_head.values,
        n_heads,
        &DLA_POSITIVE,
        &DLA_NEGATIVE,
    )
}

pub fn patching_head_report(head_out: &PatchGrid) -> HeadReport {
    head_report(
        &format!("Activation patching per head ({})", head_out.name),
        &head_out.values,
        head_out.shape()[1],
        &PATCH_POSITIVE,
        &PATCH_NEGATIVE,
    )
}

impl HeadReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}\n", self.title);
        let verdict = if self.all_within {
            format!("All expected heads rank within the top {} in their direction.", self.top_k)
        } else {
            format!(
                "Some expected heads fall outside the top {} in their direction; see the deviations below.",
                self.top_k
            )
        };
        let _ = writeln!(s, "{verdict}\n");
        let _ = writeln!(s, "| head | expected sign | value | rank | within top {} |", self.top_k);
        let _ = writeln!(s, "|---|---|---|---|---|");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {} | {} |",
                c.head,
                c.expected,
                c.value,
                c.rank,
                if c.within_top_k { "yes" } else { "no" }
            );
        }
        for (name, list) in [("positive", &self.top_positive), ("negative", &self.top_negative)] {
            let _ = writeln!(s, "\nTop {} {name} heads: {}", self.top_k, list.iter().map(|(h, v)| format!("{h} ({v:.4})")).collect::<Vec<_>>().join(", "));
        }
        s
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentCheck {
    pub head: String,
    pub q: f32,
    pub k: f32,
    pub v: f32,
    /// |v| exceeds both |q| and |k|.
    pub value_dominates: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    /// Heads of layers `min_layer..` among the top-k of the head output sweep.
    pub min_layer: usize,
    pub checks: Vec<ComponentCheck>,
    pub all_value_dominated: bool,
}

/// For late heads in the top-k of `head_out`, compares the magnitudes of the
/// query, key and value patching scores.
pub fn component_report(head_out: &PatchGrid, q: &PatchGrid, k: &PatchGrid, v: &PatchGrid, min_layer: usize) -> ComponentReport {
    let checks: Vec<ComponentCheck> = head_out
        .ranked()
        .into_iter()
        .take(TOP_K)
        .filter(|&(l, _)| head_out.axes[0].labels[l].parse::<usize>().is_ok_and(|l| l >= min_layer))
        .map(|(l, h)| {
            let (qv, kv, vv) = (q.get(l, h), k.get(l, h), v.get(l, h));
            ComponentCheck {
                head: format!("{}.{}", head_out.axes[0].labels[l], head_out.axes[1].labels[h]),
                q: qv,
                k: kv,
                v: vv,
                value_dominates: vv.abs() > qv.abs() && vv.abs() > kv.abs(),
            }
        })
        .collect();
    ComponentReport {
        min_layer,
        all_value_dominated: !checks.is_empty() && checks.iter().all(|c| c.value_dominates),
        checks,
    }
}

impl ComponentReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Query / key / value patching of late top heads\n");
        if self.checks.is_empty() {
            let _ = writeln!(s, "No head of layer {} or later is among the top {TOP_K}.", self.min_layer);
            return s;
        }
        let _ = writeln!(s, "| head | q | k | v | value dominates |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} | {} |",
                c.head,
                c.q,
                c.k,
                c.v,
                if c.value_dominates { "yes" } else { "no" }
            );
        }
        s
    }
}
