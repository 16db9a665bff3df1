//! End-to-end tool co-training: the loss is computed on the final image of
//! an agent-chosen tool chain and gradients flow back through every tool
//! in the chain, so tools learn to cooperate under sequential composition.
//!
//! The composite loss is pixel L1 plus gradient-similarity terms at one
//! and two scales plus two no-reference residuals (sharpness, local
//! contrast), blended by a progressive cosine schedule that starts
//! pixel-dominant and reaches the target weights after the first 30% of
//! epochs. Optimization is Adam with a global gradient-norm clip of 0.5
//! over all parameters active in the batch.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::degrade::{gen_clean, preset, sample_combo, synthesize, DegRanges, DegradationKind, DegradationSpec, ALL_CLEAN_KINDS};
use crate::error::{Error, Result};
use crate::grad::{clip_grad_norm, Adam, KernelSource, NodeId, Tape};
use crate::image::Image;
use crate::metrics::{psnr, ssim};
use crate::planner::{featurize, greedy_plan, PolicyParams};
use crate::plansearch::{derive_seed, Plan};
use crate::prng::Prng;
use crate::tools::ToolRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_perc: f64,
    pub w_lpips: f64,
    pub w_nr: f64,
}

pub const TARGET_WEIGHTS: LossWeights =
    LossWeights { w_l1: 0.4, w_perc: 0.1, w_lpips: 0.15, w_nr: 0.1 };

/// Progressive schedule: cosine ramp over the first ⌊0.3·E⌋ epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_epochs: usize,
    pub transition: usize,
}

impl Schedule {
    pub fn new(total_epochs: usize) -> Result<Schedule> {
        if total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        let transition = ((0.3 * total_epochs as f64).floor() as usize).max(1);
        Ok(Schedule { total_epochs, transition })
    }

    /// Annealing factor γ(e) = ½(1 − cos(π·e/T)) for e ∈ [1, T].
    pub fn gamma(&self, epoch: usize) -> f64 {
        0.5 * (1.0 - (std::f64::consts::PI * epoch as f64 / self.transition as f64).cos())
    }
}

/// Loss weights at the given 1-based epoch. During the transition the L1
/// weight anneals from 1 down to its target while the perceptual and
/// no-reference weights ramp up from 0; afterwards everything is pinned at
/// the targets.
pub fn schedule_weights(sched: &Schedule, epoch: usize) -> Result<LossWeights> {
    if epoch < 1 || epoch > sched.total_epochs {
        return Err(Error::Param(format!(
            "epoch {epoch} outside [1, {}]",
            sched.total_epochs
        )));
    }
    if epoch > sched.transition {
        return Ok(TARGET_WEIGHTS);
    }
    let g = sched.gamma(epoch);
    Ok(LossWeights {
        w_l1: 1.0 - (1.0 - TARGET_WEIGHTS.w_l1) * g,
        w_perc: TARGET_WEIGHTS.w_perc * g,
        w_lpips: TARGET_WEIGHTS.w_lpips * g,
        w_nr: TARGET_WEIGHTS.w_nr * g,
    })
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
/// Saturation constant of the no-reference residuals; small enough that
/// their post-transition floor stays below the pixel term.
const NR_SAT: f64 = 0.005;

fn box5() -> Vec<f64> {
    vec![1.0 / 25.0; 25]
}

/// Per-term loss nodes, exposed for logging.
pub struct LossTerms {
    pub total: NodeId,
    pub l1: f64,
    pub perc: f64,
    pub lpips: f64,
    pub nr: f64,
}

/// Mean absolute Sobel-response difference at one scale, normalized by
/// the Sobel peak response 8 (two axes averaged).
fn grad_diff(
    tape: &mut Tape,
    store: &crate::grad::ParamStore,
    pred: NodeId,
    gt: NodeId,
) -> Result<NodeId> {
    let sxp = tape.conv2d_same(pred, KernelSource::Const(SOBEL_X.to_vec()), 3, 3, store)?;
    let syp = tape.conv2d_same(pred, KernelSource::Const(SOBEL_Y.to_vec()), 3, 3, store)?;
    let sxg = tape.conv2d_same(gt, KernelSource::Const(SOBEL_X.to_vec()), 3, 3, store)?;
    let syg = tape.conv2d_same(gt, KernelSource::Const(SOBEL_Y.to_vec()), 3, 3, store)?;
    let dx = tape.sub(sxp, sxg)?;
    let dy = tape.sub(syp, syg)?;
    let ax = tape.abs_mean(dx);
    let ay = tape.abs_mean(dy);
    let sum = tape.add(ax, ay)?;
    Ok(tape.scale(sum, 1.0 / 8.0))
}

/// Composite loss on the tape: w_l1·L1 + w_perc·(two-scale gradient
/// difference) + w_lpips·(single-scale gradient difference) + w_nr·(
/// sharpness residual + contrast residual). Every term is built from tape
/// primitives so backward() reaches all tool parameters.
pub fn composite_loss(
    tape: &mut Tape,
    store: &crate::grad::ParamStore,
    pred: NodeId,
    gt: &Image,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let gt_node = tape.leaf_image(gt);

    let diff = tape.sub(pred, gt_node)?;
    let l1 = tape.abs_mean(diff);

    let d1 = grad_diff(tape, store, pred, gt_node)?;
    let pred2 = tape.down2(pred)?;
    let gt2 = tape.down2(gt_node)?;
    let d2 = grad_diff(tape, store, pred2, gt2)?;
    let dsum = tape.add(d1, d2)?;
    let perc = tape.scale(dsum, 0.5);

    // Sharpness residual: saturates to 0 as mean |Sobel| grows.
    let sxp = tape.conv2d_same(pred, KernelSource::Const(SOBEL_X.to_vec()), 3, 3, store)?;
    let syp = tape.conv2d_same(pred, KernelSource::Const(SOBEL_Y.to_vec()), 3, 3, store)?;
    let axp = tape.abs_mean(sxp);
    let ayp = tape.abs_mean(syp);
    let ssum = tape.add(axp, ayp)?;
    let sharp = tape.scale(ssum, 1.0 / 8.0);
    let sharp_res = tape.inv_sat(sharp, NR_SAT)?;

    // Contrast residual: mean |x − box5(x)| local deviation.
    let smooth = tape.conv2d_same(pred, KernelSource::Const(box5()), 5, 5, store)?;
    let dev = tape.sub(pred, smooth)?;
    let contrast = tape.abs_mean(dev);
    let contrast_res = tape.inv_sat(contrast, NR_SAT)?;

    let nr = tape.add(sharp_res, contrast_res)?;

    let l1_w = tape.scale(l1, weights.w_l1);
    let perc_w = tape.scale(perc, weights.w_perc);
    let lpips_w = tape.scale(d1, weights.w_lpips);
    let nr_w = tape.scale(nr, weights.w_nr);
    let s1 = tape.add(l1_w, perc_w)?;
    let s2 = tape.add(s1, lpips_w)?;
    let total = tape.add(s2, nr_w)?;
    Ok(LossTerms {
        total,
        l1: tape.value(l1).as_scalar().unwrap(),
        perc: tape.value(perc).as_scalar().unwrap(),
        lpips: tape.value(d1).as_scalar().unwrap(),
        nr: tape.value(nr).as_scalar().unwrap(),
    })
}

/// Taped execution of a plan: x₀ = input, x_k = tool_k(x_{k−1}).
pub struct ChainTrace {
    pub nodes: Vec<NodeId>,
    pub output: NodeId,
}

pub fn build_chain(
    registry: &ToolRegistry,
    plan: &Plan,
    tape: &mut Tape,
    input: &Image,
) -> Result<ChainTrace> {
    let mut nodes = vec![tape.leaf_image(input)];
    for &id in &plan.steps {
        let next = registry.apply_on_tape(id, tape, *nodes.last().unwrap())?;
        nodes.push(next);
    }
    Ok(ChainTrace { output: *nodes.last().unwrap(), nodes })
}

/// Where training plans come from: a frozen policy decoded greedily, one
/// fixed plan, or a recorded list applied round-robin.
pub enum PlanProvider<'a> {
    Greedy(&'a PolicyParams),
    Fixed(Plan),
    Recorded(Vec<Plan>),
}

impl PlanProvider<'_> {
    fn plan_for(&self, idx: usize, lq: &Image, l_max: usize) -> Plan {
        match self {
            PlanProvider::Greedy(params) => greedy_plan(params, &featurize(lq), l_max),
            PlanProvider::Fixed(plan) => plan.clone(),
            PlanProvider::Recorded(plans) => plans[idx % plans.len()].clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CotrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub samples: usize,
    pub holdout: usize,
    pub image_size: usize,
    pub max_len: usize,
    /// Degradation source: preset name, unless `combos` is non-empty.
    pub preset: String,
    pub combos: Vec<Vec<String>>,
    /// Fixed plan as tool names; empty defers to plan_file, then policy.
    pub plan: Vec<String>,
    /// JSONL file of plans (arrays of tool names), applied round-robin.
    pub plan_file: Option<String>,
    /// Policy checkpoint decoded greedily per sample.
    pub policy: Option<String>,
    /// Abort when more than this fraction of samples is skipped per epoch.
    pub max_skip_fraction: f64,
}

impl Default for CotrainConfig {
    fn default() -> Self {
        CotrainConfig {
            epochs: 23,
            lr: 1e-6,
            batch: 2,
            samples: 64,
            holdout: 2,
            image_size: 64,
            max_len: 6,
            preset: "full".into(),
            combos: Vec::new(),
            plan: Vec::new(),
            plan_file: None,
            policy: None,
            max_skip_fraction: 0.05,
        }
    }
}

pub const GRAD_CLIP_NORM: f64 = 0.5;
pub const COTRAIN_LOG_HEADER: &str = "epoch,mean_loss,l1,perc,lpips,nr,skip_count";

/// One (degraded, clean) training pair with its plan.
pub struct CotrainSample {
    pub lq: Image,
    pub gt: Image,
    pub plan: Plan,
}

/// Deterministic dataset synthesis; sample `idx` draws from its own
/// derived stream.
pub fn make_dataset(
    config: &CotrainConfig,
    provider: &PlanProvider,
    seed: u64,
    count: usize,
    stream: u64,
) -> Result<Vec<CotrainSample>> {
    make_dataset_ranged(config, provider, seed, count, stream, &DegRanges::default())
}

/// `make_dataset` with explicit degradation parameter ranges.
pub fn make_dataset_ranged(
    config: &CotrainConfig,
    provider: &PlanProvider,
    seed: u64,
    count: usize,
    stream: u64,
    ranges: &DegRanges,
) -> Result<Vec<CotrainSample>> {
    let combos: Vec<Vec<DegradationKind>> = if config.combos.is_empty() {
        preset(&config.preset)?.all_combos()
    } else {
        config
            .combos
            .iter()
            .map(|names| names.iter().map(|n| DegradationKind::from_name(n)).collect())
            .collect::<Result<_>>()?
    };
    if combos.is_empty() {
        return Err(Error::Config("no degradation combinations configured".into()));
    }
    let use_table = config.combos.is_empty();
    let table = if use_table { Some(preset(&config.preset)?) } else { None };
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = Prng::new(derive_seed(seed, stream, i as u64));
        let kind = ALL_CLEAN_KINDS[rng.below(ALL_CLEAN_KINDS.len() as u64) as usize];
        let clean = gen_clean(kind, config.image_size, &mut rng)?;
        let combo = match &table {
            Some(t) => sample_combo(t, &mut rng)?,
            None => combos[rng.below(combos.len() as u64) as usize].clone(),
        };
        let spec = DegradationSpec::sample_ranged(&combo, rng.next_u64(), ranges)?;
        let (lq, _) = synthesize(&clean, &spec)?;
        let plan = provider.plan_for(i, &lq, config.max_len);
        out.push(CotrainSample { lq, gt: clean, plan });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub l1: f64,
    pub perc: f64,
    pub lpips: f64,
    pub nr: f64,
    pub skip_count: usize,
}

pub struct CotrainOutput {
    pub log_csv: String,
    pub epochs: Vec<EpochStats>,
}

/// Train the registry's tool parameters through the provided chains.
/// Per batch: accumulate mean-loss gradients over the samples, clip the
/// global norm at 0.5, and take one Adam step. Checkpoints are written per
/// epoch when a directory is given.
pub fn train_tools(
    registry: &mut ToolRegistry,
    dataset: &[CotrainSample],
    config: &CotrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<CotrainOutput> {
    if dataset.is_empty() {
        return Err(Error::Config("co-training dataset is empty".into()));
    }
    let sched = Schedule::new(config.epochs)?;
    let dim = registry.store.flat_values().len();
    let mut adam = Adam::new(config.lr, dim);
    let mut log = String::new();
    log.push_str(COTRAIN_LOG_HEADER);
    log.push('\n');
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let weights = schedule_weights(&sched, epoch)?;
        let mut loss_sum = 0.0;
        let mut term_sums = [0.0f64; 4];
        let mut used = 0usize;
        let mut skipped = 0usize;

        for batch in dataset.chunks(config.batch) {
            registry.store.zero_grads();
            let mut batch_used = 0usize;
            for sample in batch {
                let mut tape = Tape::new();
                let chain = build_chain(registry, &sample.plan, &mut tape, &sample.lq)?;
                let terms =
                    composite_loss(&mut tape, &registry.store, chain.output, &sample.gt, &weights)?;
                let loss_val = tape.value(terms.total).as_scalar().unwrap();
                if !loss_val.is_finite() {
                    skipped += 1;
                    continue;
                }
                tape.backward(terms.total, &mut registry.store)?;
                loss_sum += loss_val;
                term_sums[0] += terms.l1;
                term_sums[1] += terms.perc;
                term_sums[2] += terms.lpips;
                term_sums[3] += terms.nr;
                batch_used += 1;
                used += 1;
            }
            if batch_used == 0 {
                continue;
            }
            let mut grads = registry.store.flat_grads();
            for g in &mut grads {
                *g /= batch_used as f64;
            }
            clip_grad_norm(&mut grads, GRAD_CLIP_NORM);
            let mut values = registry.store.flat_values();
            adam.step(&mut values, &grads);
            registry.store.set_flat_values(&values);
            registry.renormalize_kernels();
        }

        if (skipped as f64) > config.max_skip_fraction * dataset.len() as f64 {
            return Err(Error::Numeric(format!(
                "epoch {epoch}: {skipped} of {} samples skipped (non-finite loss)",
                dataset.len()
            )));
        }
        let denom = used.max(1) as f64;
        let stats = EpochStats {
            mean_loss: loss_sum / denom,
            l1: term_sums[0] / denom,
            perc: term_sums[1] / denom,
            lpips: term_sums[2] / denom,
            nr: term_sums[3] / denom,
            skip_count: skipped,
        };
        writeln!(
            log,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            epoch, stats.mean_loss, stats.l1, stats.perc, stats.lpips, stats.nr, stats.skip_count
        )
        .expect("writing to string cannot fail");
        epochs.push(stats);

        if let Some(dir) = checkpoint_dir {
            registry.serialize_params(&dir.join(format!("epoch_{epoch:03}.oppar")))?;
        }
    }
    Ok(CotrainOutput { log_csv: log, epochs })
}

#[derive(Debug, Clone, Serialize)]
pub struct MisuseRow {
    pub tool: String,
    pub psnr_before: f64,
    pub ssim_before: f64,
    pub psnr_after: f64,
    pub ssim_after: f64,
    pub d_psnr: f64,
    pub d_ssim: f64,
}

/// Apply each tool of both snapshots to clean images and report how much
/// quality each version destroys (higher is better preservation).
pub fn misuse_eval(
    before: &ToolRegistry,
    after: &ToolRegistry,
    clean_images: &[Image],
) -> Result<Vec<MisuseRow>> {
    let mut rows = Vec::new();
    for spec in before.tools() {
        let mut acc = [0.0f64; 4];
        for img in clean_images {
            let b = before.apply_tool(spec.id, img)?;
            let a = after.apply_tool(spec.id, img)?;
            acc[0] += psnr(&b, img)?;
            acc[1] += ssim(&b, img)?;
            acc[2] += psnr(&a, img)?;
            acc[3] += ssim(&a, img)?;
        }
        let n = clean_images.len() as f64;
        rows.push(MisuseRow {
            tool: spec.name.clone(),
            psnr_before: acc[0] / n,
            ssim_before: acc[1] / n,
            psnr_after: acc[2] / n,
            ssim_after: acc[3] / n,
            d_psnr: (acc[2] - acc[0]) / n,
            d_ssim: (acc[3] - acc[1]) / n,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::CleanKind;
    use crate::grad::{grad_check_detail, ParamStore};
    use crate::tools::ToolId;

    #[test]
    fn schedule_reference_points() {
        let sched = Schedule::new(20).unwrap();
        assert_eq!(sched.transition, 6);
        // gamma(T) = 1 exactly up to cos(pi) rounding
        let at_t = schedule_weights(&sched, 6).unwrap();
        assert!((at_t.w_l1 - 0.4).abs() < 1e-12);
        assert!((at_t.w_perc - 0.1).abs() < 1e-12);
        assert!((at_t.w_lpips - 0.15).abs() < 1e-12);
        assert!((at_t.w_nr - 0.1).abs() < 1e-12);
        // e = T/2 => gamma = 0.5 => w_l1 = 0.7
        let mid = schedule_weights(&sched, 3).unwrap();
        assert!((mid.w_l1 - 0.7).abs() < 1e-12);
        // past the transition: pinned targets
        let end = schedule_weights(&sched, 20).unwrap();
        assert_eq!(end, TARGET_WEIGHTS);
        assert!(schedule_weights(&sched, 0).is_err());
        assert!(schedule_weights(&sched, 21).is_err());
    }

    #[test]
    fn schedule_monotone_and_continuous() {
        let sched = Schedule::new(30).unwrap();
        let mut prev = schedule_weights(&sched, 1).unwrap();
        for e in 2..=30 {
            let w = schedule_weights(&sched, e).unwrap();
            assert!(w.w_l1 <= prev.w_l1 + 1e-12);
            assert!(w.w_perc >= prev.w_perc - 1e-12);
            assert!(w.w_lpips >= prev.w_lpips - 1e-12);
            assert!(w.w_nr >= prev.w_nr - 1e-12);
            prev = w;
        }
        // continuity across the boundary: gamma(T) = 1 meets the targets
        let at_t = schedule_weights(&sched, sched.transition).unwrap();
        let after = schedule_weights(&sched, sched.transition + 1).unwrap();
        assert!((at_t.w_l1 - after.w_l1).abs() < 1e-12);
    }

    #[test]
    fn tiny_epoch_count_keeps_transition_positive() {
        let sched = Schedule::new(2).unwrap();
        assert_eq!(sched.transition, 1);
        schedule_weights(&sched, 1).unwrap();
        schedule_weights(&sched, 2).unwrap();
    }

    fn texture(seed: u64) -> Image {
        gen_clean(CleanKind::ValueNoiseTexture, 32, &mut Prng::new(seed)).unwrap()
    }

    #[test]
    fn identity_prediction_leaves_only_nr_terms() {
        let reg = ToolRegistry::study_registry();
        let img = texture(1);
        let mut tape = Tape::new();
        let node = tape.leaf_image(&img);
        let w = TARGET_WEIGHTS;
        let terms = composite_loss(&mut tape, &reg.store, node, &img, &w).unwrap();
        assert!(terms.l1.abs() < 1e-15);
        assert!(terms.perc.abs() < 1e-15);
        assert!(terms.lpips.abs() < 1e-15);
        assert!(terms.nr > 0.0);
        let total = tape.value(terms.total).as_scalar().unwrap();
        assert!((total - w.w_nr * terms.nr).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_zero_loss_and_grads() {
        let mut reg = ToolRegistry::study_registry();
        let img = texture(2);
        let gt = texture(3);
        let mut tape = Tape::new();
        let input = tape.leaf_image(&img);
        let plan = Plan::new(vec![ToolId(0)]);
        let chain = build_chain(&reg, &plan, &mut tape, &img).unwrap();
        let _ = input;
        let w = LossWeights { w_l1: 0.0, w_perc: 0.0, w_lpips: 0.0, w_nr: 0.0 };
        let terms = composite_loss(&mut tape, &reg.store, chain.output, &gt, &w).unwrap();
        assert_eq!(tape.value(terms.total).as_scalar().unwrap(), 0.0);
        reg.store.zero_grads();
        tape.backward(terms.total, &mut reg.store).unwrap();
        assert!(reg.store.flat_grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_non_negative_for_random_chains() {
        let reg = ToolRegistry::default_registry();
        let sched = Schedule::new(10).unwrap();
        let mut rng = Prng::new(5);
        for trial in 0..5 {
            let img = texture(100 + trial);
            let gt = texture(200 + trial);
            let len = 1 + rng.below(3) as usize;
            let plan =
                Plan::new((0..len).map(|_| ToolId(rng.below(reg.len() as u64) as usize)).collect());
            let epoch = 1 + rng.below(10) as usize;
            let w = schedule_weights(&sched, epoch).unwrap();
            let mut tape = Tape::new();
            let chain = build_chain(&reg, &plan, &mut tape, &img).unwrap();
            let terms = composite_loss(&mut tape, &reg.store, chain.output, &gt, &w).unwrap();
            assert!(tape.value(terms.total).as_scalar().unwrap() >= 0.0);
        }
    }

    #[test]
    fn chain_gradients_match_finite_differences() {
        // Random 3-tool chain under the full composite loss.
        let reg = ToolRegistry::default_registry();
        let img = texture(7);
        let gt = texture(8);
        let plan = Plan::new(vec![
            reg.find("denoise_mid").unwrap(),
            reg.find("derain").unwrap(),
            reg.find("lowlight_correct").unwrap(),
        ]);
        let w = TARGET_WEIGHTS;
        let build = |s: &ParamStore| -> Result<f64> {
            let view = ToolRegistry::default_registry();
            let mut view = view;
            view.store = s.clone();
            let mut tape = Tape::new();
            let chain = build_chain(&view, &plan, &mut tape, &img)?;
            let terms = composite_loss(&mut tape, &view.store, chain.output, &gt, &w)?;
            Ok(tape.value(terms.total).as_scalar().unwrap())
        };
        let mut store = reg.store.clone();
        store.zero_grads();
        {
            let mut view = ToolRegistry::default_registry();
            view.store = store.clone();
            let mut tape = Tape::new();
            let chain = build_chain(&view, &plan, &mut tape, &img).unwrap();
            let terms = composite_loss(&mut tape, &view.store, chain.output, &gt, &w).unwrap();
            let mut probe = view.store.clone();
            probe.zero_grads();
            tape.backward(terms.total, &mut probe).unwrap();
            store = probe;
        }
        let analytic = store.flat_grads();
        let errs = grad_check_detail(&build, &mut store, &analytic, 1e-4).unwrap();
        // Only chain-tool parameters receive gradients; everything else is
        // exactly zero on both sides.
        let bad = errs.iter().filter(|&&e| e > 1e-4).count();
        let frac = 1.0 - bad as f64 / errs.len() as f64;
        assert!(frac >= 0.99, "fd agreement only {frac}");
        // and every tool in the plan must touch at least one parameter
        let mut reg2 = ToolRegistry::default_registry();
        reg2.store = store;
        for &id in &plan.steps {
            let touched = reg2
                .tool_params(id)
                .iter()
                .any(|&p| reg2.store.get(p).grad.iter().any(|&g| g != 0.0));
            assert!(touched, "{} received no gradient", reg2.name(id));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut reg = ToolRegistry::study_registry();
        let before = reg.snapshot();
        let config = CotrainConfig {
            epochs: 1,
            lr: 0.0,
            batch: 2,
            samples: 4,
            image_size: 32,
            combos: vec![vec!["rain".into(), "noise".into()]],
            plan: vec!["denoise_strong".into(), "derain".into()],
            ..Default::default()
        };
        let plan = Plan::new(vec![reg.find("denoise_strong").unwrap(), reg.find("derain").unwrap()]);
        let dataset = make_dataset(&config, &PlanProvider::Fixed(plan), 3, 4, 0).unwrap();
        train_tools(&mut reg, &dataset, &config, None).unwrap();
        assert_eq!(reg.snapshot(), before);
    }

    #[test]
    fn short_training_descends() {
        let mut reg = ToolRegistry::study_registry();
        let config = CotrainConfig {
            epochs: 4,
            lr: 1e-3,
            batch: 2,
            samples: 8,
            image_size: 32,
            combos: vec![vec!["rain".into(), "noise".into()]],
            ..Default::default()
        };
        let plan = Plan::new(vec![reg.find("denoise_strong").unwrap(), reg.find("derain").unwrap()]);
        let dataset = make_dataset(&config, &PlanProvider::Fixed(plan), 11, 8, 0).unwrap();
        let out = train_tools(&mut reg, &dataset, &config, None).unwrap();
        assert_eq!(out.epochs.len(), 4);
        assert_eq!(out.log_csv.lines().count(), 5);
        // weights shift across the schedule, so compare like epochs
        assert!(out.epochs[3].mean_loss < out.epochs[2].mean_loss * 1.05);
    }

    #[test]
    fn misuse_eval_reports_every_tool() {
        let before = ToolRegistry::default_registry();
        let after = ToolRegistry::default_registry();
        let images = vec![texture(31), texture(32)];
        let rows = misuse_eval(&before, &after, &images).unwrap();
        assert_eq!(rows.len(), before.len());
        for r in &rows {
            assert_eq!(r.psnr_before, r.psnr_after);
            assert!(r.d_psnr.abs() < 1e-12);
        }
    }
}
