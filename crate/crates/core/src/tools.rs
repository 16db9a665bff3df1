//! Restoration tool library: parameterized classical operators built from
//! the gradient-engine primitives, one registry mirroring a per-degradation
//! tool pool.
//!
//! Every tool preserves image dimensions and the [0,1] range (each chain
//! ends in clamp01), and every tool except the dehaze inversion ends in a
//! blend with its input so training can learn to do less. Forward-only
//! application and taped application share the same arithmetic kernels and
//! are bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use crate::degrade::DegradationKind;
use crate::error::{Error, Result};
use crate::grad::{forward, Buf, KernelSource, NodeId, ParamId, ParamStore, Tape};
use crate::image::{gaussian_kernel2d, Image};
use crate::io::{read_named_arrays, write_named_arrays};

pub const PARAM_MAGIC: &[u8; 6] = b"OPPAR1";
/// Keeps finite-difference verification tractable.
pub const MAX_TOOL_PARAMS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ToolId(pub usize);

/// Structural family of a tool; parameters give each instance its behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToolKind {
    /// clamp01(blend(x, conv(x, kernel), alpha))
    KernelBlend { kh: usize, kw: usize },
    /// clamp01(x + a·(x − conv(x, kernel)) + b)
    Unsharp { kh: usize, kw: usize },
    /// clamp01((x − Â(1−t̂))/t̂), t̂ = σ(τ)
    HazeInv,
    /// clamp01(g·(x + ε)^γ̂), γ̂ = 1/(1+softplus(u))
    PowerGain,
}

fn param_slot_names(kind: ToolKind) -> &'static [&'static str] {
    match kind {
        ToolKind::KernelBlend { .. } => &["kernel", "alpha"],
        ToolKind::Unsharp { .. } => &["kernel", "gain", "bias"],
        ToolKind::HazeInv => &["p"],
        ToolKind::PowerGain => &["p"],
    }
}

#[derive(Debug, Clone)]
pub struct ToolSpec {
    pub id: ToolId,
    pub name: String,
    pub target: DegradationKind,
    pub kind: ToolKind,
    pub params: Vec<ParamId>,
}

pub struct ToolRegistry {
    specs: Vec<ToolSpec>,
    pub store: ParamStore,
    by_target: BTreeMap<DegradationKind, Vec<ToolId>>,
}

struct ToolDef {
    name: &'static str,
    target: DegradationKind,
    kind: ToolKind,
    init: Vec<Vec<f64>>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// u such that 1/(1+softplus(u)) = gamma.
fn inv_softplus_gamma(gamma: f64) -> f64 {
    let sp = 1.0 / gamma - 1.0;
    (sp.exp() - 1.0).ln()
}

fn sharpen3x3(strength: f64) -> Vec<f64> {
    vec![
        0.0, -strength, 0.0, //
        -strength, 1.0 + 4.0 * strength, -strength, //
        0.0, -strength, 0.0,
    ]
}

fn kernel_blend(
    name: &'static str,
    target: DegradationKind,
    kh: usize,
    kw: usize,
    kernel: Vec<f64>,
    alpha: f64,
) -> ToolDef {
    ToolDef { name, target, kind: ToolKind::KernelBlend { kh, kw }, init: vec![kernel, vec![alpha]] }
}

fn unsharp(name: &'static str, target: DegradationKind, sigma: f64, gain: f64) -> ToolDef {
    ToolDef {
        name,
        target,
        kind: ToolKind::Unsharp { kh: 5, kw: 5 },
        init: vec![gaussian_kernel2d(sigma, 2), vec![gain], vec![0.0]],
    }
}

fn default_defs() -> Vec<ToolDef> {
    use DegradationKind::*;
    vec![
        kernel_blend("denoise_weak", Noise, 5, 5, gaussian_kernel2d(0.8, 2), 0.0),
        kernel_blend("denoise_mid", Noise, 5, 5, gaussian_kernel2d(1.2, 2), 0.4),
        kernel_blend("denoise_strong", Noise, 5, 5, gaussian_kernel2d(2.0, 2), 0.8),
        kernel_blend("derain", Rain, 1, 9, vec![1.0 / 9.0; 9], 0.4),
        ToolDef {
            name: "dehaze",
            target: Haze,
            kind: ToolKind::HazeInv,
            init: vec![vec![0.25, logit(0.85)]],
        },
        unsharp("defocus_deblur", DefocusBlur, 2.0, 0.8),
        unsharp("motion_deblur", MotionBlur, 1.5, 0.8),
        kernel_blend("dejpeg", Jpeg, 3, 3, gaussian_kernel2d(0.8, 1), 0.0),
        kernel_blend("sr_sharpen", LowResolution, 3, 3, sharpen3x3(0.25), 0.0),
        ToolDef {
            name: "lowlight_correct",
            target: LowLight,
            kind: ToolKind::PowerGain,
            init: vec![vec![inv_softplus_gamma(0.35), 1.0]],
        },
    ]
}

impl ToolRegistry {
    fn from_defs(defs: Vec<ToolDef>) -> ToolRegistry {
        let mut store = ParamStore::new();
        let mut specs = Vec::new();
        let mut by_target: BTreeMap<DegradationKind, Vec<ToolId>> = BTreeMap::new();
        for (i, def) in defs.into_iter().enumerate() {
            let id = ToolId(i);
            let slots = param_slot_names(def.kind);
            assert_eq!(slots.len(), def.init.len());
            let total: usize = def.init.iter().map(|v| v.len()).sum();
            assert!(total <= MAX_TOOL_PARAMS, "{} exceeds parameter budget", def.name);
            let params = slots
                .iter()
                .zip(def.init)
                .map(|(slot, init)| store.add(format!("{}/{}", def.name, slot), init))
                .collect();
            by_target.entry(def.target).or_default().push(id);
            specs.push(ToolSpec {
                id,
                name: def.name.to_string(),
                target: def.target,
                kind: def.kind,
                params,
            });
        }
        ToolRegistry { specs, store, by_target }
    }

    /// The full 10-tool pool covering all eight degradations.
    pub fn default_registry() -> ToolRegistry {
        ToolRegistry::from_defs(default_defs())
    }

    /// Reduced 4-tool registry for the exhaustive plan study.
    pub fn study_registry() -> ToolRegistry {
        let keep = ["denoise_strong", "derain", "dehaze", "defocus_deblur"];
        let defs = default_defs().into_iter().filter(|d| keep.contains(&d.name)).collect();
        ToolRegistry::from_defs(defs)
    }

    pub fn by_name(name: &str) -> Result<ToolRegistry> {
        match name {
            "default" => Ok(ToolRegistry::default_registry()),
            "study" => Ok(ToolRegistry::study_registry()),
            other => Err(Error::Lookup(format!("registry '{other}' (expected default or study)"))),
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ToolId) -> Result<&ToolSpec> {
        self.specs.get(id.0).ok_or_else(|| Error::Lookup(format!("tool id {}", id.0)))
    }

    pub fn find(&self, name: &str) -> Result<ToolId> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.id)
            .ok_or_else(|| Error::Lookup(format!("tool '{name}'")))
    }

    pub fn name(&self, id: ToolId) -> &str {
        &self.specs[id.0].name
    }

    pub fn target(&self, id: ToolId) -> DegradationKind {
        self.specs[id.0].target
    }

    pub fn by_target(&self, kind: DegradationKind) -> &[ToolId] {
        self.by_target.get(&kind).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn covers_all_kinds(&self) -> bool {
        crate::degrade::ALL_KINDS.iter().all(|k| !self.by_target(*k).is_empty())
    }

    /// Forward-only application (no tape); bit-identical to the taped path.
    pub fn apply_tool(&self, id: ToolId, img: &Image) -> Result<Image> {
        let spec = self.spec(id)?;
        let x = Buf::from_image(img);
        let out = match spec.kind {
            ToolKind::KernelBlend { kh, kw } => {
                let kernel = &self.store.get(spec.params[0]).value;
                let alpha = self.store.get(spec.params[1]).value[0];
                let conv = forward::conv2d_same_norm(&x, kernel, kh, kw);
                forward::clamp01(&forward::blend(&x, &conv, alpha))
            }
            ToolKind::Unsharp { kh, kw } => {
                let kernel = &self.store.get(spec.params[0]).value;
                let a = self.store.get(spec.params[1]).value[0];
                let b = self.store.get(spec.params[2]).value[0];
                let conv = forward::conv2d_same_norm(&x, kernel, kh, kw);
                let residual = {
                    let mut r = x.clone();
                    for (rv, cv) in r.data.iter_mut().zip(&conv.data) {
                        *rv -= cv;
                    }
                    r
                };
                let scaled = forward::affine(&residual, a, b);
                let mut out = x.clone();
                for (ov, sv) in out.data.iter_mut().zip(&scaled.data) {
                    *ov += sv;
                }
                forward::clamp01(&out)
            }
            ToolKind::HazeInv => {
                let p = &self.store.get(spec.params[0]).value;
                let t_hat = crate::grad::sigmoid(p[1]);
                forward::clamp01(&forward::haze_inv(&x, p[0], t_hat))
            }
            ToolKind::PowerGain => {
                let p = &self.store.get(spec.params[0]).value;
                let gamma = 1.0 / (1.0 + crate::grad::softplus(p[0]));
                forward::clamp01(&forward::power_gain(&x, gamma, p[1]))
            }
        };
        Ok(out.to_image())
    }

    /// Taped application for end-to-end training.
    pub fn apply_on_tape(&self, id: ToolId, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let spec = self.spec(id)?;
        let out = match spec.kind {
            ToolKind::KernelBlend { kh, kw } => {
                let conv = tape
                    .conv2d_same_norm(input, KernelSource::Param(spec.params[0]), kh, kw, &self.store)?;
                let mixed = tape.blend(input, conv, spec.params[1], &self.store)?;
                tape.clamp01(mixed)
            }
            ToolKind::Unsharp { kh, kw } => {
                let conv = tape
                    .conv2d_same_norm(input, KernelSource::Param(spec.params[0]), kh, kw, &self.store)?;
                let residual = tape.sub(input, conv)?;
                let scaled = tape.affine(residual, spec.params[1], spec.params[2], &self.store);
                let summed = tape.add(input, scaled)?;
                tape.clamp01(summed)
            }
            ToolKind::HazeInv => {
                let inv = tape.haze_inv(input, spec.params[0], &self.store);
                tape.clamp01(inv)
            }
            ToolKind::PowerGain => {
                let pg = tape.power_gain(input, spec.params[0], &self.store);
                tape.clamp01(pg)
            }
        };
        Ok(out)
    }

    /// Parameter ids of the given tool, in serialization order.
    pub fn tool_params(&self, id: ToolId) -> &[ParamId] {
        &self.specs[id.0].params
    }

    /// All parameter values of one tool as a flat vector.
    pub fn tool_values(&self, id: ToolId) -> Vec<f64> {
        self.specs[id.0]
            .params
            .iter()
            .flat_map(|&p| self.store.get(p).value.iter().copied())
            .collect()
    }

    fn set_tool_values(&mut self, id: ToolId, flat: &[f64]) -> Result<()> {
        let expected: usize =
            self.specs[id.0].params.iter().map(|&p| self.store.get(p).value.len()).sum();
        if flat.len() != expected {
            return Err(Error::Format(format!(
                "tool '{}': expected {expected} values, got {}",
                self.specs[id.0].name,
                flat.len()
            )));
        }
        let mut off = 0;
        for &pid in &self.specs[id.0].params {
            let len = self.store.get(pid).value.len();
            self.store.get_mut(pid).value.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Write all tool parameters as an OPPAR1 checkpoint, keyed by tool
    /// name in registry order.
    pub fn serialize_params(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, Vec<f64>)> =
            self.specs.iter().map(|s| (s.name.clone(), self.tool_values(s.id))).collect();
        write_named_arrays(PARAM_MAGIC, &entries, path)
    }

    /// Load an OPPAR1 checkpoint. Every registry tool must be present with
    /// the right vector length; unknown names are rejected and listed.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let entries = read_named_arrays(PARAM_MAGIC, path)?;
        let mut seen: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, values) in entries {
            seen.insert(name, values);
        }
        let known: Vec<String> = self.specs.iter().map(|s| s.name.clone()).collect();
        let unknown: Vec<String> = seen.keys().filter(|k| !known.contains(k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint has unknown tools: {}",
                unknown.join(", ")
            )));
        }
        let missing: Vec<String> =
            known.iter().filter(|k| !seen.contains_key(*k)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint is missing tools: {}",
                missing.join(", ")
            )));
        }
        // Validate every length before mutating anything.
        for spec in &self.specs {
            let expected: usize =
                spec.params.iter().map(|&p| self.store.get(p).value.len()).sum();
            let got = seen[&spec.name].len();
            if got != expected {
                return Err(Error::Format(format!(
                    "tool '{}': expected {expected} values, got {got}",
                    spec.name
                )));
            }
        }
        for i in 0..self.specs.len() {
            let flat = seen[&self.specs[i].name].clone();
            self.set_tool_values(ToolId(i), &flat)?;
        }
        Ok(())
    }

    /// Rescale every learnable convolution kernel back to unit sum. The
    /// forward pass normalizes anyway, so this is output-invariant; it
    /// keeps stored parameters on the constraint manifold after optimizer
    /// steps.
    pub fn renormalize_kernels(&mut self) {
        for i in 0..self.specs.len() {
            let (is_kernel_tool, pid) = match self.specs[i].kind {
                ToolKind::KernelBlend { .. } | ToolKind::Unsharp { .. } => {
                    (true, self.specs[i].params[0])
                }
                _ => (false, self.specs[i].params[0]),
            };
            if !is_kernel_tool {
                continue;
            }
            let s: f64 = self.store.get(pid).value.iter().sum();
            // Dead-band keeps the projection bit-stable when already on
            // the manifold (a zero-lr step must not move parameters).
            if (s - 1.0).abs() > 1e-9 && s.abs() >= crate::grad::forward::MIN_KERNEL_SUM {
                for v in &mut self.store.get_mut(pid).value {
                    *v /= s;
                }
            }
        }
    }

    /// Snapshot of all parameter values (flat, id order).
    pub fn snapshot(&self) -> Vec<f64> {
        self.store.flat_values()
    }

    pub fn restore(&mut self, snapshot: &[f64]) {
        self.store.set_flat_values(snapshot);
    }

    /// Clone of this registry with its own parameter store.
    pub fn clone_registry(&self) -> ToolRegistry {
        ToolRegistry {
            specs: self.specs.clone(),
            store: self.store.clone(),
            by_target: self.by_target.clone(),
        }
    }
}
