//! Experiment harness: run configuration, run-directory persistence, the
//! command implementations behind the CLI, and the planning-behavior
//! report.
//!
//! A run directory holds config.json (the effective configuration, written
//! before any computation), the per-command artifacts (study_report.jsonl,
//! plans.csv, planner_log.csv, cotrain_log.csv, eval_report.csv,
//! behavior.json, summary.json), checkpoints/ and images/. Timestamps are
//! quarantined in meta.json so every other artifact is a pure function of
//! config and seed. All files are written atomically (write to a sibling
//! temp file, then rename).

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::cotrain::{make_dataset_ranged, misuse_eval, train_tools, CotrainConfig, PlanProvider};
use crate::degrade::{gen_clean, preset, synthesize, DegRanges, DegradationKind, DegradationSpec, ALL_CLEAN_KINDS};
use crate::error::{Error, Result};
use crate::io::{save_image, write_atomic};
use crate::metrics::ReferenceStats;
use crate::planner::{featurize, greedy_plan, train_planner_ranged, PlannerConfig, PolicyParams};
use crate::plansearch::{derive_seed, execute_plan, run_study, Plan, StudyConfig};
use crate::prng::Prng;
use crate::tools::ToolRegistry;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub preset: String,
    pub images_per_combo: usize,
    pub image_size: usize,
    pub l_max: usize,
    /// Policy checkpoint to decode plans from.
    pub policy: Option<String>,
    /// Optional tool-parameter checkpoint.
    pub params: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            preset: "groupC".into(),
            images_per_combo: 4,
            image_size: 64,
            l_max: 6,
            policy: None,
            params: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub preset: String,
    pub image_size: usize,
    /// Also export 8-bit PPM previews.
    pub ppm: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count: 16, preset: "empirical8".into(), image_size: 64, ppm: false }
    }
}

/// The complete run configuration; config.json alone reproduces a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Rayon worker count; 0 uses the default pool.
    pub workers: usize,
    pub out_dir: String,
    /// Tool registry preset: "default" (10 tools) or "study" (4 tools).
    pub registry: String,
    /// Degradation parameter sampling ranges (all overridable).
    pub degrade: DegRanges,
    pub study: StudyConfig,
    pub planner: PlannerConfig,
    pub cotrain: CotrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            workers: 0,
            out_dir: "run".into(),
            registry: "study".into(),
            degrade: DegRanges::default(),
            study: StudyConfig::default(),
            planner: PlannerConfig::default(),
            cotrain: CotrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Parse a config JSON value after applying dotted-path overrides.
/// Override values parse as JSON literals, falling back to strings.
pub fn config_from_value(
    mut base: serde_json::Value,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    if !base.is_object() {
        return Err(Error::Config("config root must be a JSON object".into()));
    }
    for (path, raw) in overrides {
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let mut cursor = &mut base;
        let parts: Vec<&str> = path.split('.').collect();
        let (last, init) = parts.split_last().expect("split never yields empty parts");
        for part in init {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("'{path}': '{part}' is not an object")))?;
            cursor = obj
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{path}': parent is not an object")))?;
        obj.insert(last.to_string(), value);
    }
    serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    config_from_value(base, overrides)
}

/// Run-directory handle. Creating it writes the effective config before
/// anything else happens.
pub struct RunDir {
    pub root: PathBuf,
    started: SystemTime,
}

impl RunDir {
    pub fn create(config: &RunConfig) -> Result<RunDir> {
        let root = PathBuf::from(&config.out_dir);
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("images"))?;
        let dir = RunDir { root, started: SystemTime::now() };
        let mut text =
            serde_json::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        dir.write("config.json", text.as_bytes())?;
        Ok(dir)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(name), bytes)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Wall-clock metadata, kept out of every reproducible artifact.
    pub fn finish(&self, command: &str) -> Result<()> {
        let now = SystemTime::now();
        let meta = serde_json::json!({
            "command": command,
            "started_unix": self.started.duration_since(UNIX_EPOCH).unwrap_or_default().as_secs(),
            "finished_unix": now.duration_since(UNIX_EPOCH).unwrap_or_default().as_secs(),
            "duration_sec": now.duration_since(self.started).unwrap_or_default().as_secs_f64(),
        });
        self.write("meta.json", format!("{meta}\n").as_bytes())
    }
}

/// Run `f` on a dedicated rayon pool of `workers` threads (0 = default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool")
            .install(f)
    }
}

fn registry_for(config: &RunConfig) -> Result<ToolRegistry> {
    ToolRegistry::by_name(&config.registry)
}

/// `synth`: write a degraded dataset with ground-truth degradation sets.
pub fn cmd_synth(config: &RunConfig) -> Result<()> {
    let dir = RunDir::create(config)?;
    let table = preset(&config.synth.preset)?;
    let combos = table.all_combos();
    let mut records = String::new();
    for i in 0..config.synth.count {
        let mut rng = Prng::derive(config.seed, i as u64);
        let kind = ALL_CLEAN_KINDS[i % ALL_CLEAN_KINDS.len()];
        let clean = gen_clean(kind, config.synth.image_size, &mut rng)?;
        let combo = combos[i % combos.len()].clone();
        let spec = DegradationSpec::sample_ranged(
            &combo,
            derive_seed(config.seed, 0x5711, i as u64),
            &config.degrade,
        )?;
        let (lq, gt_set) = synthesize(&clean, &spec)?;
        let clean_name = format!("images/clean_{i:04}.opimg");
        let lq_name = format!("images/lq_{i:04}.opimg");
        save_image(&clean, &dir.path(&clean_name))?;
        save_image(&lq, &dir.path(&lq_name))?;
        if config.synth.ppm {
            crate::io::save_ppm(&clean, &dir.path(&format!("images/clean_{i:04}.ppm")))?;
            crate::io::save_ppm(&lq, &dir.path(&format!("images/lq_{i:04}.ppm")))?;
        }
        let row = serde_json::json!({
            "index": i,
            "clean_kind": kind.name(),
            "combo": combo.iter().map(|k| k.name()).collect::<Vec<_>>(),
            "gt_set": gt_set.iter().map(|k| k.name()).collect::<Vec<_>>(),
            "spec": spec,
            "clean": clean_name,
            "lq": lq_name,
        });
        records.push_str(&row.to_string());
        records.push('\n');
    }
    dir.write("dataset.jsonl", records.as_bytes())?;
    dir.finish("synth")
}

/// `study`: the exhaustive plan-search study.
pub fn cmd_study(config: &RunConfig) -> Result<()> {
    let dir = RunDir::create(config)?;
    let registry = registry_for(config)?;
    let out = with_workers(config.workers, || {
        run_study(&config.study, &registry, config.seed, &config.degrade)
    })?;
    dir.write("plans.csv", out.plans_csv.as_bytes())?;
    dir.write("study_report.jsonl", out.report_jsonl.as_bytes())?;
    dir.finish("study")
}

/// `train-planner`: GRPO training; writes the log and the final policy.
pub fn cmd_train_planner(config: &RunConfig) -> Result<()> {
    let dir = RunDir::create(config)?;
    let registry = registry_for(config)?;
    let out = with_workers(config.workers, || {
        train_planner_ranged(&config.planner, &registry, config.seed, &config.degrade)
    })?;
    dir.write("planner_log.csv", out.log_csv.as_bytes())?;
    out.params.save(&dir.path("policy.bin"))?;
    dir.finish("train-planner")
}

fn plan_from_names(registry: &ToolRegistry, names: &[String]) -> Result<Plan> {
    let steps: Result<Vec<_>> = names.iter().map(|n| registry.find(n)).collect();
    Ok(Plan::new(steps?))
}

fn cotrain_provider<'a>(
    config: &CotrainConfig,
    registry: &ToolRegistry,
    policy_slot: &'a mut Option<PolicyParams>,
) -> Result<PlanProvider<'a>> {
    if !config.plan.is_empty() {
        return Ok(PlanProvider::Fixed(plan_from_names(registry, &config.plan)?));
    }
    if let Some(file) = &config.plan_file {
        let text = std::fs::read_to_string(file)
            .map_err(|e| Error::Config(format!("plan file {file}: {e}")))?;
        let mut plans = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let names: Vec<String> =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("plan file: {e}")))?;
            plans.push(plan_from_names(registry, &names)?);
        }
        if plans.is_empty() {
            return Err(Error::Config(format!("plan file {file} holds no plans")));
        }
        return Ok(PlanProvider::Recorded(plans));
    }
    if let Some(path) = &config.policy {
        let params = PolicyParams::load(Path::new(path))?;
        if params.n_tools != registry.len() {
            return Err(Error::Config(format!(
                "policy trained for {} tools, registry has {}",
                params.n_tools,
                registry.len()
            )));
        }
        *policy_slot = Some(params);
        return Ok(PlanProvider::Greedy(policy_slot.as_ref().unwrap()));
    }
    Err(Error::Config(
        "cotrain needs a plan source: cotrain.plan, cotrain.plan_file or cotrain.policy".into(),
    ))
}

/// `cotrain`: end-to-end tool training; writes the log, per-epoch
/// checkpoints, final parameters, and a misuse report.
pub fn cmd_cotrain(config: &RunConfig) -> Result<()> {
    let dir = RunDir::create(config)?;
    let mut registry = registry_for(config)?;
    let mut policy_slot = None;
    let provider = cotrain_provider(&config.cotrain, &registry, &mut policy_slot)?;
    let dataset = with_workers(config.workers, || {
        make_dataset_ranged(
            &config.cotrain,
            &provider,
            config.seed,
            config.cotrain.samples,
            0,
            &config.degrade,
        )
    })?;
    let before = registry.clone_registry();
    let ckpt_dir = dir.path("checkpoints");
    let out = with_workers(config.workers, || {
        train_tools(&mut registry, &dataset, &config.cotrain, Some(&ckpt_dir))
    })?;
    dir.write("cotrain_log.csv", out.log_csv.as_bytes())?;
    registry.serialize_params(&dir.path("params.oppar"))?;

    // Misuse snapshot comparison on seeded clean textures.
    let cleans: Result<Vec<_>> = (0..20)
        .map(|i| {
            gen_clean(
                ALL_CLEAN_KINDS[i % ALL_CLEAN_KINDS.len()],
                config.cotrain.image_size,
                &mut Prng::derive(config.seed, 0xc1ea + i as u64),
            )
        })
        .collect();
    let rows = misuse_eval(&before, &registry, &cleans?)?;
    let mut misuse = String::new();
    for row in &rows {
        misuse.push_str(&serde_json::to_string(row).expect("row serializes"));
        misuse.push('\n');
    }
    dir.write("misuse_report.jsonl", misuse.as_bytes())?;
    dir.finish("cotrain")
}

/// Planning-behavior statistics over greedy plans.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BehaviorStats {
    /// Fraction of noise-containing inputs whose plan starts with a
    /// denoiser.
    pub denoise_first_rate: Option<f64>,
    /// Fraction of rain+haze inputs whose plan derains before dehazing.
    pub derain_before_dehaze_rate: Option<f64>,
    /// Per tool: fraction of plans using it that use it more than once.
    pub repetition_rates: Vec<(String, Option<f64>)>,
    /// Mean plan length for inputs with 1, 2 and 3 degradations.
    pub mean_len_by_deg_count: [Option<f64>; 3],
}

pub fn behavior_stats(
    registry: &ToolRegistry,
    rows: &[(Vec<DegradationKind>, Plan)],
) -> BehaviorStats {
    use DegradationKind::*;
    let mut noise_total = 0usize;
    let mut noise_first = 0usize;
    let mut rh_total = 0usize;
    let mut rh_ordered = 0usize;
    let mut len_sum = [0.0f64; 3];
    let mut len_n = [0usize; 3];
    for (gt, plan) in rows {
        if gt.contains(&Noise) {
            noise_total += 1;
            if let Some(&first) = plan.steps.first() {
                if registry.target(first) == Noise {
                    noise_first += 1;
                }
            }
        }
        if gt.contains(&Rain) && gt.contains(&Haze) {
            rh_total += 1;
            let derain_pos = plan.steps.iter().position(|&id| registry.target(id) == Rain);
            let dehaze_pos = plan.steps.iter().position(|&id| registry.target(id) == Haze);
            if let (Some(a), Some(b)) = (derain_pos, dehaze_pos) {
                if a < b {
                    rh_ordered += 1;
                }
            }
        }
        let count = gt.len().clamp(1, 3) - 1;
        len_sum[count] += plan.len() as f64;
        len_n[count] += 1;
    }
    let rate = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let mut repetition_rates = Vec::new();
    for spec in registry.tools() {
        let with: Vec<&Plan> = rows
            .iter()
            .map(|(_, p)| p)
            .filter(|p| p.steps.contains(&spec.id))
            .collect();
        let repeated =
            with.iter().filter(|p| p.steps.iter().filter(|&&s| s == spec.id).count() >= 2).count();
        repetition_rates.push((spec.name.clone(), rate(repeated, with.len())));
    }
    let mut mean_len_by_deg_count = [None; 3];
    for i in 0..3 {
        if len_n[i] > 0 {
            mean_len_by_deg_count[i] = Some(len_sum[i] / len_n[i] as f64);
        }
    }
    BehaviorStats {
        denoise_first_rate: rate(noise_first, noise_total),
        derain_before_dehaze_rate: rate(rh_ordered, rh_total),
        repetition_rates,
        mean_len_by_deg_count,
    }
}

pub const EVAL_CSV_HEADER: &str =
    "combo,n,psnr,ssim,gsim,nr_sharp,nr_balance,mean_plan_len";

/// `eval`: greedy-decode plans for every preset combo, execute them, and
/// report mean metrics per combo plus behavior statistics.
pub fn cmd_eval(config: &RunConfig) -> Result<()> {
    let dir = RunDir::create(config)?;
    let mut registry = registry_for(config)?;
    if let Some(path) = &config.eval.params {
        registry.load_params(Path::new(path))?;
    }
    let policy = match &config.eval.policy {
        Some(path) => PolicyParams::load(Path::new(path))?,
        None => {
            return Err(Error::Config(
                "eval.policy must point to a policy checkpoint (train-planner writes policy.bin)"
                    .into(),
            ))
        }
    };
    if policy.n_tools != registry.len() {
        return Err(Error::Config(format!(
            "policy trained for {} tools, registry has {}",
            policy.n_tools,
            registry.len()
        )));
    }
    let table = preset(&config.eval.preset)?;
    let combos = table.all_combos();
    let mut csv = String::new();
    csv.push_str(EVAL_CSV_HEADER);
    csv.push('\n');
    let mut behavior_rows = Vec::new();
    for (ci, combo) in combos.iter().enumerate() {
        let mut sums = [0.0f64; 6];
        for j in 0..config.eval.images_per_combo {
            let mut rng = Prng::derive(config.seed, 0xe7a1 + (ci * 4096 + j) as u64);
            let kind = ALL_CLEAN_KINDS[j % ALL_CLEAN_KINDS.len()];
            let clean = gen_clean(kind, config.eval.image_size, &mut rng)?;
            let spec = DegradationSpec::sample_ranged(combo, rng.next_u64(), &config.degrade)?;
            let (lq, gt_set) = synthesize(&clean, &spec)?;
            let plan = greedy_plan(&policy, &featurize(&lq), config.eval.l_max);
            let restored = execute_plan(&registry, &plan, &lq)?;
            let m = ReferenceStats::new(&clean).score(&restored)?;
            sums[0] += m.psnr;
            sums[1] += m.ssim;
            sums[2] += m.gsim;
            sums[3] += m.nr_sharp;
            sums[4] += m.nr_balance;
            sums[5] += plan.len() as f64;
            behavior_rows.push((gt_set, plan));
        }
        let n = config.eval.images_per_combo as f64;
        let name = combo.iter().map(|k| k.name()).collect::<Vec<_>>().join("+");
        writeln!(
            csv,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            name,
            config.eval.images_per_combo,
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n,
            sums[4] / n,
            sums[5] / n
        )
        .expect("writing to string cannot fail");
    }
    dir.write("eval_report.csv", csv.as_bytes())?;
    let stats = behavior_stats(&registry, &behavior_rows);
    let mut text =
        serde_json::to_string_pretty(&stats).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    dir.write("behavior.json", text.as_bytes())?;
    dir.finish("eval")
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// `report`: aggregate study_report.jsonl (and training logs when present)
/// into summary.json with the two Finding tables.
pub fn cmd_report(config: &RunConfig) -> Result<()> {
    let dir = RunDir::create(config)?;
    let report_path = dir.path("study_report.jsonl");
    let text = std::fs::read_to_string(&report_path).map_err(|_| {
        Error::Config(format!("missing input artifact: {}", report_path.display()))
    })?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: crate::plansearch::InputRecord =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("study report: {e}")))?;
        records.push(rec);
    }
    let selected: Vec<f64> = records.iter().map(|r| r.selected_count as f64).collect();
    let oos_frac: Vec<f64> = records.iter().map(|r| r.oos_fraction).collect();
    let dup_frac: Vec<f64> = records.iter().map(|r| r.dup_fraction).collect();
    let oos_best: Vec<f64> = records.iter().filter_map(|r| r.oos_best_agg_rank).collect();
    let matched_best: Vec<f64> = records.iter().filter_map(|r| r.matched_best_agg_rank).collect();
    let oos_better =
        records.iter().filter(|r| r.oos_better == Some(true)).count() as f64 / records.len().max(1) as f64;
    let dedup_orig: Vec<f64> =
        records.iter().flat_map(|r| r.dedup_pairs.iter().map(|p| p.0)).collect();
    let dedup_new: Vec<f64> =
        records.iter().flat_map(|r| r.dedup_pairs.iter().map(|p| p.1)).collect();

    let mut summary = serde_json::json!({
        "inputs": records.len(),
        "mean_selected_count": mean(&selected),
        "finding1": {
            "mean_oos_fraction_of_selected": mean(&oos_frac),
            "fraction_of_images_where_oos_beats_matched": oos_better,
            "mean_best_agg_rank_with_oos": mean(&oos_best),
            "mean_best_agg_rank_matched_only": mean(&matched_best),
        },
        "finding2": {
            "mean_dup_fraction_of_selected": mean(&dup_frac),
            "mean_agg_rank_original": mean(&dedup_orig),
            "mean_agg_rank_deduplicated": mean(&dedup_new),
            "mean_rank_shift_after_dedup": match (mean(&dedup_orig), mean(&dedup_new)) {
                (Some(a), Some(b)) => Some(b - a),
                _ => None,
            },
        },
    });

    // Optional training-curve summaries.
    if let Ok(text) = std::fs::read_to_string(dir.path("planner_log.csv")) {
        let rewards: Vec<f64> = text
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(1).and_then(|v| v.parse().ok()))
            .collect();
        if !rewards.is_empty() {
            summary["planner"] = serde_json::json!({
                "iterations": rewards.len(),
                "first_reward": rewards.first(),
                "last_reward": rewards.last(),
            });
        }
    }
    if let Ok(text) = std::fs::read_to_string(dir.path("cotrain_log.csv")) {
        let losses: Vec<f64> = text
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(1).and_then(|v| v.parse().ok()))
            .collect();
        if !losses.is_empty() {
            summary["cotrain"] = serde_json::json!({
                "epochs": losses.len(),
                "first_loss": losses.first(),
                "last_loss": losses.last(),
            });
        }
    }

    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    dir.write("summary.json", text.as_bytes())?;
    dir.finish("report")
}

pub fn run_command(command: &str, config: &RunConfig) -> Result<()> {
    match command {
        "synth" => cmd_synth(config),
        "study" => cmd_study(config),
        "train-planner" => cmd_train_planner(config),
        "cotrain" => cmd_cotrain(config),
        "eval" => cmd_eval(config),
        "report" => cmd_report(config),
        other => Err(Error::Lookup(format!(
            "command '{other}' (expected synth, study, train-planner, cotrain, eval, report)"
        ))),
    }
}
