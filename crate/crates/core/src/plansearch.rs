//! Exhaustive restoration-plan search: enumeration of every tool sequence
//! up to a length cap, five-metric evaluation and ranking, the
//! high-performing selection rule (top 10% on ≥3 of 5 metrics with both
//! full- and no-reference metrics represented), and the two analyzers for
//! out-of-scope tools and duplicate tool applications.
//!
//! Evaluation of all plans for one input walks the plan tree depth-first
//! so shared prefixes are executed once; results land at fixed enumeration
//! indices, making the output independent of traversal or thread schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{gen_clean, preset, DegRanges, DegradationKind, DegradationSpec, ALL_CLEAN_KINDS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{MetricKind, MetricVector, ReferenceStats, ALL_METRICS};
use crate::prng::Prng;
use crate::tools::{ToolId, ToolRegistry};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Plan {
    pub steps: Vec<ToolId>,
}

impl Plan {
    pub fn new(steps: Vec<ToolId>) -> Plan {
        Plan { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Keep the first occurrence of each tool id, preserving order.
    pub fn dedup_keep_first(&self) -> Plan {
        let mut seen = Vec::new();
        let mut steps = Vec::new();
        for &id in &self.steps {
            if !seen.contains(&id) {
                seen.push(id);
                steps.push(id);
            }
        }
        Plan { steps }
    }

    pub fn has_duplicates(&self) -> bool {
        let mut seen = Vec::new();
        for &id in &self.steps {
            if seen.contains(&id) {
                return true;
            }
            seen.push(id);
        }
        false
    }

    pub fn display(&self, registry: &ToolRegistry) -> String {
        self.steps
            .iter()
            .map(|&id| registry.name(id).to_string())
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Number of plans of lengths 1..=max_len over n tools, checked against
/// the budget cap.
pub fn plan_count(n_tools: usize, max_len: usize, budget: usize) -> Result<usize> {
    if n_tools == 0 || max_len == 0 {
        return Err(Error::Param("n_tools and max_len must be at least 1".into()));
    }
    let mut total: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 1..=max_len {
        pow = pow.saturating_mul(n_tools as u128);
        total = total.saturating_add(pow);
        if total > budget as u128 {
            return Err(Error::Budget(format!(
                "plan space exceeds budget {budget} (n={n_tools}, max_len={max_len})"
            )));
        }
    }
    Ok(total as usize)
}

/// All tool sequences of length 1..=max_len in deterministic order:
/// shorter plans first, lexicographic within each length.
pub fn enumerate_plans(n_tools: usize, max_len: usize, budget: usize) -> Result<Vec<Plan>> {
    let total = plan_count(n_tools, max_len, budget)?;
    let mut plans = Vec::with_capacity(total);
    for len in 1..=max_len {
        let mut digits = vec![0usize; len];
        loop {
            plans.push(Plan::new(digits.iter().map(|&d| ToolId(d)).collect()));
            // odometer increment, least-significant digit last
            let mut pos = len;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < n_tools {
                    break;
                }
                digits[pos] = 0;
            }
            if digits.iter().all(|&d| d == 0) {
                break;
            }
        }
    }
    debug_assert_eq!(plans.len(), total);
    Ok(plans)
}

/// First enumeration index of plans with the given length.
fn length_offset(n_tools: usize, len: usize) -> usize {
    let mut off = 0usize;
    let mut pow = 1usize;
    for _ in 1..len {
        pow *= n_tools;
        off += pow;
    }
    off
}

/// Enumeration index of a plan (inverse of the `enumerate_plans` order).
pub fn plan_index(plan: &Plan, n_tools: usize) -> usize {
    let mut idx = 0usize;
    for &ToolId(d) in &plan.steps {
        idx = idx * n_tools + d;
    }
    length_offset(n_tools, plan.len()) + idx
}

/// Left-to-right composition; the empty plan is the identity.
pub fn execute_plan(registry: &ToolRegistry, plan: &Plan, img: &Image) -> Result<Image> {
    let mut current = img.clone();
    for &id in &plan.steps {
        current = registry.apply_tool(id, &current)?;
    }
    Ok(current)
}

#[derive(Debug, Clone)]
pub struct PlanEvaluation {
    pub plan_idx: usize,
    pub metrics: MetricVector,
    pub ranks: [usize; 5],
    pub agg_rank: f64,
}

/// Per-metric ranks: higher metric value is better for all five; ties
/// break toward the earlier enumeration index, so each metric's ranks are
/// a permutation of 1..=N.
pub fn rank_plans(metrics: &[MetricVector]) -> Vec<[usize; 5]> {
    let n = metrics.len();
    let mut ranks = vec![[0usize; 5]; n];
    let mut order: Vec<usize> = (0..n).collect();
    for (m, kind) in ALL_METRICS.iter().enumerate() {
        order.sort_by(|&a, &b| {
            metrics[b]
                .get(*kind)
                .partial_cmp(&metrics[a].get(*kind))
                .unwrap()
                .then(a.cmp(&b))
        });
        for (pos, &idx) in order.iter().enumerate() {
            ranks[idx][m] = pos + 1;
        }
    }
    ranks
}

/// Attach ranks and the aggregated rank (mean of the five per-metric
/// ranks, lower is better) to raw metric rows.
pub fn evaluate_ranks(metrics: Vec<MetricVector>) -> Vec<PlanEvaluation> {
    let ranks = rank_plans(&metrics);
    metrics
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let r = ranks[i];
            let agg = r.iter().sum::<usize>() as f64 / 5.0;
            PlanEvaluation { plan_idx: i, metrics: m, ranks: r, agg_rank: agg }
        })
        .collect()
}

/// Selection cutoff: top ⌈0.1·N⌉ per metric.
pub fn selection_cutoff(n: usize) -> usize {
    (n as f64 * 0.1).ceil() as usize
}

/// A plan is selected iff at least 3 of the 5 metrics mark it good
/// (rank ≤ cutoff) and the good set contains at least one full-reference
/// and one no-reference metric.
pub fn select_high_performing(evals: &[PlanEvaluation]) -> Vec<usize> {
    let cutoff = selection_cutoff(evals.len());
    let mut selected = Vec::new();
    for e in evals {
        let good: Vec<MetricKind> = ALL_METRICS
            .iter()
            .enumerate()
            .filter(|(m, _)| e.ranks[*m] <= cutoff)
            .map(|(_, k)| *k)
            .collect();
        let fr = good.iter().any(|k| k.full_reference());
        let nr = good.iter().any(|k| !k.full_reference());
        if good.len() >= 3 && fr && nr {
            selected.push(e.plan_idx);
        }
    }
    selected
}

/// True iff the plan contains at least one tool whose target degradation
/// is absent from the ground-truth set.
pub fn has_out_of_scope_tool(
    registry: &ToolRegistry,
    plan: &Plan,
    gt_set: &[DegradationKind],
) -> bool {
    plan.steps.iter().any(|&id| !gt_set.contains(&registry.target(id)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OosAnalysis {
    /// Fraction of selected plans containing at least one out-of-scope tool.
    pub oos_fraction: f64,
    /// Best (minimum) aggregated rank among all plans with an OOS tool.
    pub oos_best_agg_rank: Option<f64>,
    /// Best aggregated rank among plans whose tools all match the gt set.
    pub matched_best_agg_rank: Option<f64>,
}

/// Finding-1 analyzer: out-of-scope usage in the selected set plus the
/// best-rank comparison over the full evaluation table.
pub fn analyze_out_of_scope(
    registry: &ToolRegistry,
    plans: &[Plan],
    evals: &[PlanEvaluation],
    selected: &[usize],
    gt_set: &[DegradationKind],
) -> OosAnalysis {
    let oos: Vec<bool> = plans.iter().map(|p| has_out_of_scope_tool(registry, p, gt_set)).collect();
    let oos_selected = selected.iter().filter(|&&i| oos[i]).count();
    let oos_fraction =
        if selected.is_empty() { 0.0 } else { oos_selected as f64 / selected.len() as f64 };
    let mut oos_best: Option<f64> = None;
    let mut matched_best: Option<f64> = None;
    for e in evals {
        let slot = if oos[e.plan_idx] { &mut oos_best } else { &mut matched_best };
        if slot.map_or(true, |best| e.agg_rank < best) {
            *slot = Some(e.agg_rank);
        }
    }
    OosAnalysis { oos_fraction, oos_best_agg_rank: oos_best, matched_best_agg_rank: matched_best }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DupAnalysis {
    /// Fraction of selected plans that repeat at least one tool.
    pub dup_fraction: f64,
    /// (original agg_rank, dedup counterpart agg_rank) per selected plan
    /// with duplicates.
    pub pairs: Vec<(f64, f64)>,
    pub mean_shift: Option<f64>,
}

/// Finding-2 analyzer: for every selected plan with a repeated tool, the
/// keep-first de-duplicated counterpart is located in the enumeration
/// table and both aggregated ranks are reported.
pub fn analyze_duplicates(
    plans: &[Plan],
    evals: &[PlanEvaluation],
    selected: &[usize],
    n_tools: usize,
) -> DupAnalysis {
    let mut pairs = Vec::new();
    let mut dup_count = 0usize;
    for &i in selected {
        if !plans[i].has_duplicates() {
            continue;
        }
        dup_count += 1;
        let counterpart = plans[i].dedup_keep_first();
        debug_assert!(counterpart.len() < plans[i].len());
        let j = plan_index(&counterpart, n_tools);
        debug_assert_eq!(plans[j], counterpart);
        pairs.push((evals[i].agg_rank, evals[j].agg_rank));
    }
    let dup_fraction =
        if selected.is_empty() { 0.0 } else { dup_count as f64 / selected.len() as f64 };
    let mean_shift = if pairs.is_empty() {
        None
    } else {
        Some(pairs.iter().map(|(a, b)| b - a).sum::<f64>() / pairs.len() as f64)
    };
    DupAnalysis { dup_fraction, pairs, mean_shift }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub images: usize,
    pub image_size: usize,
    pub preset: String,
    pub max_len: usize,
    pub plan_budget: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            images: 15,
            image_size: 64,
            preset: "empirical8".into(),
            max_len: 4,
            plan_budget: 1_000_000,
        }
    }
}

/// One study input: a clean image crossed with one degradation combo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputRecord {
    pub input: usize,
    pub image_index: usize,
    pub clean_kind: String,
    pub combo: Vec<String>,
    pub gt_set: Vec<String>,
    pub selected: Vec<usize>,
    pub selected_count: usize,
    pub oos_fraction: f64,
    pub dup_fraction: f64,
    pub oos_best_agg_rank: Option<f64>,
    pub matched_best_agg_rank: Option<f64>,
    pub oos_better: Option<bool>,
    pub mean_dedup_shift: Option<f64>,
    pub dedup_pairs: Vec<(f64, f64)>,
}

pub struct StudyOutput {
    pub records: Vec<InputRecord>,
    /// plans.csv body: one row per (input, plan).
    pub plans_csv: String,
    /// study_report.jsonl body: one record per input.
    pub report_jsonl: String,
}

pub const PLANS_CSV_HEADER: &str = "input,plan,psnr,ssim,gsim,nr_sharp,nr_balance,rank_psnr,rank_ssim,rank_gsim,rank_nr_sharp,rank_nr_balance,agg_rank";

pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    Prng::derive(base, (a << 20) ^ b).next_u64()
}

/// Evaluate every plan for one degraded input against its clean reference.
/// Shared prefixes are executed once via depth-first traversal; rows land
/// at enumeration indices so the result is schedule-independent.
pub fn evaluate_all_plans(
    registry: &ToolRegistry,
    max_len: usize,
    plan_budget: usize,
    lq: &Image,
    clean: &Image,
) -> Result<Vec<MetricVector>> {
    let n = registry.len();
    let total = plan_count(n, max_len, plan_budget)?;
    let stats = ReferenceStats::new(clean);
    let mut metrics: Vec<Option<MetricVector>> = vec![None; total];
    let offsets: Vec<usize> = (0..=max_len).map(|k| length_offset(n, k)).collect();

    fn visit(
        registry: &ToolRegistry,
        stats: &ReferenceStats,
        offsets: &[usize],
        max_len: usize,
        metrics: &mut [Option<MetricVector>],
        img: &Image,
        depth: usize,
        prefix_code: usize,
    ) -> Result<()> {
        let n = registry.len();
        for d in 0..n {
            let next = registry.apply_tool(ToolId(d), img)?;
            let code = prefix_code * n + d;
            metrics[offsets[depth + 1] + code] = Some(stats.score(&next)?);
            if depth + 1 < max_len {
                visit(registry, stats, offsets, max_len, metrics, &next, depth + 1, code)?;
            }
        }
        Ok(())
    }
    visit(registry, &stats, &offsets, max_len, &mut metrics, lq, 0, 0)?;
    Ok(metrics.into_iter().map(|m| m.expect("all plan slots filled")).collect())
}

/// Run the full study: every clean image crossed with every preset combo,
/// all plans evaluated, selection and both analyzers applied per input.
pub fn run_study(
    config: &StudyConfig,
    registry: &ToolRegistry,
    seed: u64,
    ranges: &DegRanges,
) -> Result<StudyOutput> {
    let table = preset(&config.preset)?;
    let combos = table.all_combos();
    if combos.is_empty() {
        return Err(Error::Config(format!("preset '{}' has no combinations", config.preset)));
    }
    let n = registry.len();
    let plans = enumerate_plans(n, config.max_len, config.plan_budget)?;

    let inputs: Vec<(usize, usize)> = (0..config.images)
        .flat_map(|img| (0..combos.len()).map(move |c| (img, c)))
        .collect();

    let results: Vec<Result<(InputRecord, String)>> = inputs
        .par_iter()
        .map(|&(img_idx, combo_idx)| {
            let input_idx = img_idx * combos.len() + combo_idx;
            let clean_kind = ALL_CLEAN_KINDS[img_idx % ALL_CLEAN_KINDS.len()];
            let mut img_rng = Prng::derive(seed, img_idx as u64);
            let clean = gen_clean(clean_kind, config.image_size, &mut img_rng)?;
            let spec_seed = derive_seed(seed, img_idx as u64 + 1, combo_idx as u64 + 1);
            let spec = DegradationSpec::sample_ranged(&combos[combo_idx], spec_seed, ranges)?;
            let (lq, gt_set) = crate::degrade::synthesize(&clean, &spec)?;

            let metrics =
                evaluate_all_plans(registry, config.max_len, config.plan_budget, &lq, &clean)?;
            let evals = evaluate_ranks(metrics);
            let selected = select_high_performing(&evals);
            let oos = analyze_out_of_scope(registry, &plans, &evals, &selected, &gt_set);
            let dup = analyze_duplicates(&plans, &evals, &selected, n);

            let record = InputRecord {
                input: input_idx,
                image_index: img_idx,
                clean_kind: clean_kind.name().to_string(),
                combo: combos[combo_idx].iter().map(|k| k.name().to_string()).collect(),
                gt_set: gt_set.iter().map(|k| k.name().to_string()).collect(),
                selected_count: selected.len(),
                selected,
                oos_fraction: oos.oos_fraction,
                dup_fraction: dup.dup_fraction,
                oos_best_agg_rank: oos.oos_best_agg_rank,
                matched_best_agg_rank: oos.matched_best_agg_rank,
                oos_better: match (oos.oos_best_agg_rank, oos.matched_best_agg_rank) {
                    (Some(a), Some(b)) => Some(a < b),
                    _ => None,
                },
                mean_dedup_shift: dup.mean_shift,
                dedup_pairs: dup.pairs,
            };

            let mut csv = String::new();
            for e in &evals {
                use std::fmt::Write as _;
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    input_idx,
                    plans[e.plan_idx].display(registry),
                    e.metrics.psnr,
                    e.metrics.ssim,
                    e.metrics.gsim,
                    e.metrics.nr_sharp,
                    e.metrics.nr_balance,
                    e.ranks[0],
                    e.ranks[1],
                    e.ranks[2],
                    e.ranks[3],
                    e.ranks[4],
                    e.agg_rank
                )
                .expect("writing to string cannot fail");
            }
            Ok((record, csv))
        })
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut plans_csv = String::with_capacity(1 << 20);
    plans_csv.push_str(PLANS_CSV_HEADER);
    plans_csv.push('\n');
    let mut report_jsonl = String::new();
    for r in results {
        let (record, csv) = r?;
        plans_csv.push_str(&csv);
        report_jsonl.push_str(&serde_json::to_string(&record).expect("record serializes"));
        report_jsonl.push('\n');
        records.push(record);
    }
    Ok(StudyOutput { records, plans_csv, report_jsonl })
}
