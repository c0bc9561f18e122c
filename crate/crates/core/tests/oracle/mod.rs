//! Brute-force reference for the thresholded metrics. Evaluates the raw
//! definitions on explicit ask-sets without sharing code with the library.

#![allow(dead_code)]

#[derive(Debug, Clone, Copy)]
pub struct Item {
    pub score: f64,
    pub h_base: u8,
    pub h_support: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePoint {
    /// Size of the ask-set; ask-sets reachable by thresholds are nested, so
    /// this orders them.
    pub asked: usize,
    pub burden: f64,
    pub delta: f64,
    pub flip_rate: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// True when some `tau` makes `{i : score_i >= tau}` equal to `mask`.
fn reachable(items: &[Item], mask: u32) -> bool {
    let inside = |i: usize| mask & (1 << i) != 0;
    (0..items.len()).filter(|&i| inside(i)).all(|i| {
        (0..items.len())
            .filter(|&j| !inside(j))
            .all(|j| items[i].score > items[j].score)
    })
}

fn evaluate(items: &[Item], mask: u32) -> OraclePoint {
    let n = items.len() as f64;
    let members: Vec<&Item> = (0..items.len())
        .filter(|i| mask & (1 << i) != 0)
        .map(|i| &items[i])
        .collect();
    let wrong_total = items.iter().filter(|it| it.h_base == 0).count();
    let asked = members.len();
    let gain: i64 = members
        .iter()
        .map(|it| i64::from(it.h_support) - i64::from(it.h_base))
        .sum();
    let asked_wrong = members.iter().filter(|it| it.h_base == 0).count();
    OraclePoint {
        asked,
        burden: asked as f64 / n,
        delta: gain as f64 / n,
        flip_rate: (asked > 0).then(|| gain as f64 / asked as f64),
        precision: (asked > 0).then(|| asked_wrong as f64 / asked as f64),
        recall: (wrong_total > 0).then(|| asked_wrong as f64 / wrong_total as f64),
    }
}

/// Every threshold-reachable ask-set, smallest first.
pub fn points(items: &[Item]) -> Vec<OraclePoint> {
    assert!(items.len() <= 16, "oracle enumerates 2^N subsets");
    let mut out: Vec<OraclePoint> = (0u32..(1 << items.len()))
        .filter(|&m| reachable(items, m))
        .map(|m| evaluate(items, m))
        .collect();
    out.sort_by_key(|p| p.asked);
    out
}

/// Ask-set at a given threshold, evaluated directly.
pub fn at(items: &[Item], tau: f64) -> OraclePoint {
    let mask = (0..items.len())
        .filter(|&i| items[i].score >= tau)
        .fold(0u32, |m, i| m | (1 << i));
    evaluate(items, mask)
}

pub fn ex_none(items: &[Item]) -> f64 {
    items.iter().map(|it| f64::from(it.h_base)).sum::<f64>() / items.len() as f64
}

pub fn ex_full(items: &[Item]) -> f64 {
    items.iter().map(|it| f64::from(it.h_support)).sum::<f64>() / items.len() as f64
}

/// Normalized trapezoidal area of the delta-burden polyline; `None` when the
/// full gain is not positive.
pub fn audbc(items: &[Item]) -> Option<f64> {
    let pts = points(items);
    let full = pts.last().unwrap().delta;
    if full <= 0.0 {
        return None;
    }
    let mut area = 0.0;
    for w in pts.windows(2) {
        area += (w[1].burden - w[0].burden) * (w[0].delta + w[1].delta) * 0.5;
    }
    Some(area / full)
}
