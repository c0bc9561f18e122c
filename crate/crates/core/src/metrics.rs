//! Burden/gain trade-off metrics over per-instance judgements.
//!
//! Every metric is a function of a threshold `tau` on the ask score: an
//! instance asks for support when `score >= tau`. For `N` scored instances:
//!
//! * burden `B = N_ask / N`
//! * delta `Δ = (1/N) Σ_asked (h_support - h_base)`
//! * flip rate `FR = Δ·N / N_ask` (undefined when nobody asks)
//! * precision / recall of asking with respect to the originally wrong
//!   instances (`h_base = 0`)
//!
//! Sweeping `tau` from above the largest score down to 0 traces the
//! delta-burden curve (DBC), the precision-recall curve of asking (PR), and the
//! flip-rate curve (FRC). AUDBC is the trapezoidal area under the DBC divided
//! by `1 × Δ_full`, where `Δ_full` is the gain when everyone asks.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{InstanceRecord, RecordStatus};
use crate::promptkit::Method;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no scored instances")]
    Empty,
    #[error("instance {index}: ask score {score} is outside [0, 1]")]
    InvalidScore { index: usize, score: f64 },
    #[error("instance {index}: correctness values must be 0 or 1")]
    InvalidJudgement { index: usize },
    #[error("full-support gain is {delta_full}, AUDBC cannot be normalized (raw area {raw_area})")]
    NotNormalizable { delta_full: f64, raw_area: f64 },
    #[error("curve is not a delta-burden curve")]
    WrongCurveKind,
    #[error("random baseline needs at least one trial")]
    ZeroTrials,
}

/// Correctness of the unsupported and supported predictions for one instance.
pub trait Judgement {
    fn h_base(&self) -> u8;
    fn h_support(&self) -> u8;
}

/// One instance as seen by a single method: its ask score and both correctness values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Judged {
    pub score: f64,
    pub h_base: u8,
    pub h_support: u8,
}

impl Judged {
    pub fn new(score: f64, h_base: u8, h_support: u8) -> Self {
        Self {
            score,
            h_base,
            h_support,
        }
    }
}

impl Judgement for Judged {
    fn h_base(&self) -> u8 {
        self.h_base
    }

    fn h_support(&self) -> u8 {
        self.h_support
    }
}

/// Checks scores lie in [0, 1] and correctness values are 0/1.
pub fn check(items: &[Judged]) -> Result<(), MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (index, j) in items.iter().enumerate() {
        if !(0.0..=1.0).contains(&j.score) {
            return Err(MetricsError::InvalidScore {
                index,
                score: j.score,
            });
        }
        if j.h_base > 1 || j.h_support > 1 {
            return Err(MetricsError::InvalidJudgement { index });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Predictions made without support.
    Base,
    /// Predictions made with support.
    Support,
}

/// Execution accuracy of one arm.
pub fn ex<J: Judgement>(items: &[J], arm: Arm) -> Result<f64, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct: u64 = items
        .iter()
        .map(|j| {
            u64::from(match arm {
                Arm::Base => j.h_base(),
                Arm::Support => j.h_support(),
            })
        })
        .sum();
    Ok(correct as f64 / items.len() as f64)
}

/// Gain when every instance receives support, `EX_full - EX_none`.
pub fn delta_full<J: Judgement>(items: &[J]) -> Result<f64, MetricsError> {
    Ok(ex(items, Arm::Support)? - ex(items, Arm::Base)?)
}

/// Counts behind every metric at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdedView {
    pub tau: f64,
    pub n: u64,
    pub asked: u64,
    pub wrong: u64,
    pub asked_wrong: u64,
    pub asked_base_correct: u64,
    pub asked_support_correct: u64,
}

impl ThresholdedView {
    /// Evaluates the ask rule `score >= tau` over `items`.
    pub fn at(items: &[Judged], tau: f64) -> Self {
        let mut v = Self {
            tau,
            n: items.len() as u64,
            asked: 0,
            wrong: 0,
            asked_wrong: 0,
            asked_base_correct: 0,
            asked_support_correct: 0,
        };
        for j in items {
            let wrong = j.h_base == 0;
            v.wrong += u64::from(wrong);
            if j.score >= tau {
                v.asked += 1;
                v.asked_wrong += u64::from(wrong);
                v.asked_base_correct += u64::from(j.h_base);
                v.asked_support_correct += u64::from(j.h_support);
            }
        }
        v
    }

    pub fn burden(&self) -> f64 {
        self.asked as f64 / self.n as f64
    }

    /// Difference of the asked instances' supported and unsupported accuracy
    /// contributions; at `tau = 0` this is bit-identical to `EX_full - EX_none`.
    pub fn delta(&self) -> f64 {
        let n = self.n as f64;
        self.asked_support_correct as f64 / n - self.asked_base_correct as f64 / n
    }

    /// Net flips per asking instance. `None` when nobody asks.
    pub fn flip_rate(&self) -> Option<f64> {
        (self.asked > 0).then(|| {
            (self.asked_support_correct as f64 - self.asked_base_correct as f64) / self.asked as f64
        })
    }

    pub fn precision(&self) -> Option<f64> {
        (self.asked > 0).then(|| self.asked_wrong as f64 / self.asked as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.wrong > 0).then(|| self.asked_wrong as f64 / self.wrong as f64)
    }

    fn point(&self, kind: CurveKind) -> CurvePoint {
        let (x, y) = match kind {
            CurveKind::Dbc => (Some(self.burden()), Some(self.delta())),
            CurveKind::Pr => (self.recall(), self.precision()),
            CurveKind::Frc => (Some(self.burden()), self.flip_rate()),
        };
        CurvePoint {
            tau: self.tau,
            x,
            y,
        }
    }
}

pub fn burden(items: &[Judged], tau: f64) -> Result<f64, MetricsError> {
    check(items)?;
    Ok(ThresholdedView::at(items, tau).burden())
}

pub fn delta(items: &[Judged], tau: f64) -> Result<f64, MetricsError> {
    check(items)?;
    Ok(ThresholdedView::at(items, tau).delta())
}

pub fn flip_rate(items: &[Judged], tau: f64) -> Result<Option<f64>, MetricsError> {
    check(items)?;
    Ok(ThresholdedView::at(items, tau).flip_rate())
}

pub fn precision_ask(items: &[Judged], tau: f64) -> Result<Option<f64>, MetricsError> {
    check(items)?;
    Ok(ThresholdedView::at(items, tau).precision())
}

pub fn recall_ask(items: &[Judged], tau: f64) -> Result<Option<f64>, MetricsError> {
    check(items)?;
    Ok(ThresholdedView::at(items, tau).recall())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CurveKind {
    /// x = burden, y = delta.
    Dbc,
    /// x = recall of asking, y = precision of asking.
    Pr,
    /// x = burden, y = flip rate.
    Frc,
}

impl CurveKind {
    pub const ALL: [CurveKind; 3] = [CurveKind::Dbc, CurveKind::Pr, CurveKind::Frc];

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Dbc => "DBC",
            CurveKind::Pr => "PR",
            CurveKind::Frc => "FRC",
        }
    }
}

/// A swept point. A missing coordinate marks an undefined metric (a gap).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub x: Option<f64>,
    pub y: Option<f64>,
}

impl CurvePoint {
    pub fn is_gap(&self) -> bool {
        self.x.is_none() || self.y.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub kind: CurveKind,
    pub method: Method,
    /// Ordered by descending threshold.
    pub points: Vec<CurvePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
}

impl Curve {
    /// Points with both coordinates defined.
    pub fn defined(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.iter().filter_map(|p| Some((p.x?, p.y?)))
    }
}

/// One view per distinct asked set, from nobody asking to everybody asking.
///
/// Thresholds are: a synthetic value just above the largest score, then each
/// distinct score in descending order. The everybody-asks point (reached by
/// any `tau` in `[0, min score]`) is labeled `tau = 0`.
pub fn sweep_views(items: &[Judged]) -> Result<Vec<ThresholdedView>, MetricsError> {
    check(items)?;
    let mut order: Vec<&Judged> = items.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));

    let wrong = items.iter().filter(|j| j.h_base == 0).count() as u64;
    let mut view = ThresholdedView {
        tau: order[0].score.next_up(),
        n: items.len() as u64,
        asked: 0,
        wrong,
        asked_wrong: 0,
        asked_base_correct: 0,
        asked_support_correct: 0,
    };
    let mut views = vec![view];
    let mut i = 0;
    while i < order.len() {
        let tau = order[i].score;
        while i < order.len() && order[i].score == tau {
            let j = order[i];
            view.asked += 1;
            view.asked_wrong += u64::from(j.h_base == 0);
            view.asked_base_correct += u64::from(j.h_base);
            view.asked_support_correct += u64::from(j.h_support);
            i += 1;
        }
        view.tau = if i == order.len() { 0.0 } else { tau };
        views.push(view);
    }
    Ok(views)
}

pub fn sweep(items: &[Judged], method: Method, kind: CurveKind) -> Result<Curve, MetricsError> {
    let points = sweep_views(items)?.iter().map(|v| v.point(kind)).collect();
    Ok(Curve {
        kind,
        method,
        points,
        manifest_digest: None,
    })
}

/// Trapezoidal area under the defined points of a curve, in x order.
pub fn trapezoid_area(curve: &Curve) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.defined().collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Area under the delta-burden curve divided by `1 × delta_full`.
pub fn audbc(curve: &Curve, delta_full: f64) -> Result<f64, MetricsError> {
    if curve.kind != CurveKind::Dbc {
        return Err(MetricsError::WrongCurveKind);
    }
    let raw_area = trapezoid_area(curve);
    if delta_full <= 0.0 {
        return Err(MetricsError::NotNormalizable {
            delta_full,
            raw_area,
        });
    }
    Ok(raw_area / delta_full)
}

/// AUDBC of `items` under their own scores.
pub fn audbc_of(items: &[Judged]) -> Result<f64, MetricsError> {
    let curve = sweep(items, Method::DirectAsk, CurveKind::Dbc)?;
    audbc(&curve, delta_full(items)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineEstimate {
    pub mean: f64,
    /// Standard error of the mean; absent for a single trial.
    pub stderr: Option<f64>,
    pub trials: u32,
    pub seed: u64,
}

/// AUDBC when every score is replaced by an independent uniform draw.
/// Trial `t` draws from a ChaCha8 stream `t` seeded with `seed`, so results do
/// not depend on evaluation order.
pub fn random_baseline_audbc(
    items: &[Judged],
    trials: u32,
    seed: u64,
) -> Result<BaselineEstimate, MetricsError> {
    if trials == 0 {
        return Err(MetricsError::ZeroTrials);
    }
    check(items)?;
    let full = delta_full(items)?;
    let mut shuffled = items.to_vec();
    let mut values = Vec::with_capacity(trials as usize);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(trial));
        for j in &mut shuffled {
            j.score = rng.random::<f64>();
        }
        let curve = sweep(&shuffled, Method::DirectAsk, CurveKind::Dbc)?;
        values.push(audbc(&curve, full)?);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = (values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Ok(BaselineEstimate {
        mean,
        stderr,
        trials,
        seed,
    })
}

/// Per-method projection of complete records: one [`Judged`] per record that
/// carries a scored signal for `method`, plus the number of unscorable ones.
pub fn judged_for(records: &[InstanceRecord], method: Method) -> (Vec<Judged>, usize) {
    let mut items = Vec::new();
    let mut unscorable = 0;
    for r in records
        .iter()
        .filter(|r| r.status == RecordStatus::Complete)
    {
        let (Some(hb), Some(hs)) = (r.h_base, r.h_support) else {
            continue;
        };
        match r.signals.get(&method).and_then(|s| s.score()) {
            Some(score) => items.push(Judged::new(score, hb, hs)),
            None => unscorable += 1,
        }
    }
    (items, unscorable)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    /// Complete records scored for this method.
    pub n: usize,
    pub n_unscorable: usize,
    pub ex_none: Option<f64>,
    pub ex_full: Option<f64>,
    pub delta_full: Option<f64>,
    pub raw_area: Option<f64>,
    /// Absent when `delta_full <= 0`.
    pub audbc: Option<f64>,
    pub random_baseline: Option<BaselineEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub manifest_digest: String,
    pub model: String,
    /// Complete records.
    pub n: usize,
    pub n_incomplete: usize,
    pub ex_none: Option<f64>,
    pub ex_full: Option<f64>,
    pub delta_full: Option<f64>,
    pub methods: BTreeMap<Method, MethodSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SummaryOptions {
    pub baseline_trials: u32,
    pub seed: u64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self {
            baseline_trials: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: MetricsSummary,
    pub curves: Vec<Curve>,
}

/// Summary plus DBC/PR/FRC for every method present in `records`.
pub fn summarize(
    records: &[InstanceRecord],
    methods: &[Method],
    model: &str,
    manifest_digest: &str,
    opts: SummaryOptions,
) -> Result<Report, MetricsError> {
    let complete: Vec<&InstanceRecord> = records
        .iter()
        .filter(|r| r.status == RecordStatus::Complete)
        .collect();
    let pairs: Vec<Judged> = complete
        .iter()
        .filter_map(|r| Some(Judged::new(0.0, r.h_base?, r.h_support?)))
        .collect();
    let mut summary = MetricsSummary {
        manifest_digest: manifest_digest.to_string(),
        model: model.to_string(),
        n: complete.len(),
        n_incomplete: records.len() - complete.len(),
        ex_none: ex(&pairs, Arm::Base).ok(),
        ex_full: ex(&pairs, Arm::Support).ok(),
        delta_full: delta_full(&pairs).ok(),
        methods: BTreeMap::new(),
    };
    let mut curves = Vec::new();
    for &method in methods {
        let (items, n_unscorable) = judged_for(records, method);
        let mut ms = MethodSummary {
            n: items.len(),
            n_unscorable,
            ex_none: None,
            ex_full: None,
            delta_full: None,
            raw_area: None,
            audbc: None,
            random_baseline: None,
        };
        if !items.is_empty() {
            let full = delta_full(&items)?;
            ms.ex_none = Some(ex(&items, Arm::Base)?);
            ms.ex_full = Some(ex(&items, Arm::Support)?);
            ms.delta_full = Some(full);
            for kind in CurveKind::ALL {
                let mut curve = sweep(&items, method, kind)?;
                curve.manifest_digest = Some(manifest_digest.to_string());
                if kind == CurveKind::Dbc {
                    ms.raw_area = Some(trapezoid_area(&curve));
                    ms.audbc = audbc(&curve, full).ok();
                }
                curves.push(curve);
            }
            if full > 0.0 && opts.baseline_trials > 0 {
                ms.random_baseline = Some(random_baseline_audbc(
                    &items,
                    opts.baseline_trials,
                    opts.seed,
                )?);
            }
        }
        summary.methods.insert(method, ms);
    }
    Ok(Report { summary, curves })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes a curve as CSV with columns `method,kind,tau,x,y,manifest_digest`.
/// Undefined coordinates are left empty.
pub fn write_curve_csv<W: Write>(curve: &Curve, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "kind", "tau", "x", "y", "manifest_digest"])?;
    let digest = curve.manifest_digest.as_deref().unwrap_or("");
    for p in &curve.points {
        w.write_record([
            curve.method.code(),
            curve.kind.name(),
            &p.tau.to_string(),
            &fmt_opt(p.x),
            &fmt_opt(p.y),
            digest,
        ])?;
    }
    w.flush()?;
    Ok(())
}
