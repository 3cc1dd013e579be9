//! Lottery-ticket sparse fine-tuning and sparse difference vectors.
//!
//! A dense phase trains every eligible parameter; the `k` fraction with the
//! largest absolute change is kept, the model is rewound to its starting
//! values and only that subset is trained again. The result is a sparse
//! delta `φ` that composes with other deltas by addition.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{is_head_param, HeadKind, Model, ParamSet};
use crate::tensor::{ParamMask, TrainMask};
use crate::train::{train, Objective, RunLog, TrainConfig};

/// Values sampled per tensor when fingerprinting a parameter set.
const FINGERPRINT_SAMPLES: usize = 64;

/// 64-bit digest of a model's encoder parameters: every name and shape plus
/// evenly spaced samples of the values. Head parameters are excluded.
pub fn fingerprint(params: &ParamSet) -> u64 {
    let mut h = Sha256::new();
    for (name, t) in params.iter().filter(|(k, _)| !is_head_param(k)) {
        h.update(name.as_bytes());
        h.update([0]);
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        let n = t.numel();
        let samples = n.min(FINGERPRINT_SAMPLES);
        for s in 0..samples {
            h.update(t.data()[s * n / samples].to_le_bytes());
        }
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseTensor {
    /// Strictly increasing flat indices.
    pub indices: Vec<u64>,
    pub values: Vec<f32>,
}

/// Dense head trained alongside a delta.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftDelta {
    pub base_fingerprint: u64,
    pub density: f64,
    pub entries: BTreeMap<String, SparseTensor>,
    pub head: Option<TaskHead>,
}

impl SftDelta {
    pub fn nnz(&self) -> usize {
        self.entries.values().map(|e| e.indices.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Contract(format!("density {} outside (0, 1]", self.density)));
        }
        for (name, e) in &self.entries {
            if e.indices.len() != e.values.len() {
                return Err(Error::Contract(format!("{name}: index and value counts differ")));
            }
            if e.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract(format!("{name}: indices not strictly increasing")));
            }
            if e.values.iter().any(|&v| v == 0.0 || !v.is_finite()) {
                return Err(Error::Contract(format!("{name}: explicit zero or non-finite value")));
            }
        }
        Ok(())
    }
}

/// `ceil(k·n)`, treating products within rounding noise of an integer as
/// that integer (so 0.08·200 is 16, not 17).
pub fn budget(k: f64, n: usize) -> usize {
    let x = k * n as f64;
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (c.max(0.0) as usize).min(n)
}

/// Largest `|θ_dense − θ_0|` entries among eligible parameters, exactly
/// `ceil(k·N)` of them, ties broken by ascending (name, flat index).
pub fn select_topk_mask(
    theta0: &ParamSet,
    theta_dense: &ParamSet,
    k: f64,
    eligible: &dyn Fn(&str) -> bool,
) -> Result<TrainMask> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Config(format!("density {k} outside (0, 1]")));
    }
    let names: Vec<&String> = theta0.keys().filter(|n| eligible(n)).collect();
    let mut cands: Vec<(f32, usize, usize)> = Vec::new();
    for (ni, name) in names.iter().enumerate() {
        let a = &theta0[*name];
        let b = theta_dense
            .get(*name)
            .ok_or_else(|| Error::Contract(format!("{name} missing from the trained parameters")))?;
        if a.shape() != b.shape() {
            return Err(Error::Contract(format!("{name}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
        }
        cands.extend(a.data().iter().zip(b.data()).enumerate().map(|(i, (x, y))| ((y - x).abs(), ni, i)));
    }
    let keep = budget(k, cands.len());
    let order = |p: &(f32, usize, usize), q: &(f32, usize, usize)| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2));
    if keep < cands.len() && keep > 0 {
        cands.select_nth_unstable_by(keep - 1, order);
    }
    let mut mask: TrainMask = names
        .iter()
        .map(|n| ((*n).clone(), ParamMask::Elements(vec![false; theta0[*n].numel()])))
        .collect();
    for &(_, ni, i) in &cands[..keep] {
        if let Some(ParamMask::Elements(m)) = mask.get_mut(names[ni]) {
            m[i] = true;
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftConfig {
    pub density: f64,
    pub dense_steps: usize,
    pub sparse_steps: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Validation cadence during the sparse phase; 0 keeps the final step.
    pub eval_interval: usize,
    /// Whether layer-norm gains and biases may be selected.
    pub include_norms_and_biases: bool,
    /// Train the head densely in both phases.
    pub train_head: bool,
}

impl SftConfig {
    pub fn task_default() -> Self {
        SftConfig {
            density: 0.08,
            dense_steps: 1000,
            sparse_steps: 1000,
            lr: 1e-4,
            weight_decay: 0.0,
            eval_interval: 100,
            include_norms_and_biases: true,
            train_head: true,
        }
    }

    pub fn language_default() -> Self {
        SftConfig { density: 0.04, ..Self::task_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density {} outside (0, 1]", self.density)));
        }
        if self.dense_steps == 0 {
            return Err(Error::Config("the dense phase needs at least one step".into()));
        }
        Ok(())
    }

    pub fn eligible(&self, name: &str) -> bool {
        !is_head_param(name) && (self.include_norms_and_biases || !(name.ends_with(".bias") || name.ends_with(".gain")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftOutcome {
    pub delta: SftDelta,
    pub mask: TrainMask,
    pub dense_log: RunLog,
    pub sparse_log: RunLog,
    pub selected_step: usize,
}

/// Start of the sparse phase: eligible parameters back at `θ_0`, the head
/// kept as the dense phase left it.
pub fn rewind(theta0: &ParamSet, dense: &ParamSet) -> ParamSet {
    theta0
        .iter()
        .map(|(k, t)| (k.clone(), if is_head_param(k) { dense[k].clone() } else { t.clone() }))
        .collect()
}

fn with_head(mut mask: TrainMask, params: &ParamSet, train_head: bool) -> TrainMask {
    if train_head {
        for k in params.keys().filter(|k| is_head_param(k)) {
            mask.insert(k.clone(), ParamMask::All);
        }
    }
    mask
}

/// `θ − θ_0` on masked entries, dropping exact zeros.
fn extract(theta0: &ParamSet, theta: &ParamSet, mask: &TrainMask) -> BTreeMap<String, SparseTensor> {
    let mut out = BTreeMap::new();
    for (name, m) in mask {
        let ParamMask::Elements(m) = m else { continue };
        let (a, b) = (theta0[name].data(), theta[name].data());
        let mut e = SparseTensor::default();
        for i in (0..m.len()).filter(|&i| m[i]) {
            let d = b[i] - a[i];
            if d != 0.0 {
                e.indices.push(i as u64);
                e.values.push(d);
            }
        }
        if !e.indices.is_empty() {
            out.insert(name.clone(), e);
        }
    }
    out
}

/// Runs both phases from `start` (which may already include other deltas)
/// and returns the delta relative to `start`, tagged with `base_fingerprint`.
pub fn lt_sft_train(start: &Model, base_fingerprint: u64, objective: &mut dyn Objective, cfg: &SftConfig) -> Result<SftOutcome> {
    cfg.validate()?;
    let theta0 = start.params.clone();
    let eligible = |n: &str| cfg.eligible(n);

    let mut dense = start.clone();
    let dense_mask = with_head(crate::train::mask_where(&theta0, eligible), &theta0, cfg.train_head);
    let dense_cfg = TrainConfig { steps: cfg.dense_steps, lr: cfg.lr, weight_decay: cfg.weight_decay, eval_interval: 0, select_best: false };
    let dense_out = train(&mut dense, objective, &dense_cfg, &dense_mask)?;

    let mask = select_topk_mask(&theta0, &dense.params, cfg.density, &eligible)?;
    let (final_params, sparse_log, selected_step) = if cfg.sparse_steps == 0 {
        let mut p = rewind(&theta0, &dense.params);
        for (name, m) in &mask {
            if let ParamMask::Elements(m) = m {
                let src = dense.params[name].data();
                let dst = p.get_mut(name).expect("mask names come from θ0").data_mut();
                for i in (0..m.len()).filter(|&i| m[i]) {
                    dst[i] = src[i];
                }
            }
        }
        (p, RunLog::default(), 0)
    } else {
        let mut sparse = Model { params: rewind(&theta0, &dense.params), ..start.clone() };
        let sparse_mask = with_head(mask.clone(), &theta0, cfg.train_head);
        let sparse_cfg = TrainConfig {
            steps: cfg.sparse_steps,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            eval_interval: cfg.eval_interval,
            select_best: cfg.eval_interval > 0,
        };
        let out = train(&mut sparse, objective, &sparse_cfg, &sparse_mask)?;
        (sparse.params, out.log, out.selected_step)
    };

    let head = start.head.filter(|_| cfg.train_head).map(|kind| TaskHead {
        kind,
        params: final_params.iter().filter(|(k, _)| is_head_param(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
    });
    let delta = SftDelta { base_fingerprint, density: cfg.density, entries: extract(&theta0, &final_params, &mask), head };
    Ok(SftOutcome { delta, mask, dense_log: dense_out.log, sparse_log, selected_step })
}

/// `θ + Σ φ_i`, summed in list order. The base is not modified and keeps
/// its own head.
pub fn apply_deltas(base: &Model, deltas: &[&SftDelta], allow_foreign_base: bool) -> Result<Model> {
    let fp = fingerprint(&base.params);
    // Offsets are summed in f64 and added once, so the result does not
    // depend on the order of `deltas`.
    let mut sums: BTreeMap<&str, BTreeMap<usize, f64>> = BTreeMap::new();
    for d in deltas {
        if d.base_fingerprint != fp && !allow_foreign_base {
            return Err(Error::Composition(format!(
                "delta was trained on base {:016x}, this model is {fp:016x}",
                d.base_fingerprint
            )));
        }
        for (name, e) in &d.entries {
            let t = base
                .params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("delta touches unknown parameter {name}")))?;
            let n = t.numel();
            if e.indices.len() != e.values.len() {
                return Err(Error::Contract(format!("{name}: index and value counts differ")));
            }
            let acc = sums.entry(name.as_str()).or_default();
            for (&i, &v) in e.indices.iter().zip(&e.values) {
                let i = usize::try_from(i).ok().filter(|&i| i < n).ok_or_else(|| {
                    Error::Contract(format!("{name}: index {i} outside {n} elements"))
                })?;
                *acc.entry(i).or_insert(0.0) += v as f64;
            }
        }
    }
    let mut out = base.clone();
    for (name, acc) in sums {
        let data = out.params.get_mut(name).expect("checked above").data_mut();
        for (i, v) in acc {
            data[i] = (data[i] as f64 + v) as f32;
        }
    }
    Ok(out)
}

/// Replaces the model's head with the one trained alongside `delta`.
pub fn attach_delta_head(model: &mut Model, delta: &SftDelta) -> Result<()> {
    let head = delta.head.as_ref().ok_or_else(|| Error::Contract("delta carries no head".into()))?;
    model.remove_head();
    for (k, t) in &head.params {
        model.params.insert(k.clone(), t.clone());
    }
    model.head = Some(head.kind);
    model.validate()
}

pub const DELTA_MANIFEST: &str = "delta.manifest.tsv";
pub const DELTA_BIN: &str = "delta.bin";
pub const HEAD_MANIFEST: &str = "head.manifest.tsv";
pub const HEAD_BIN: &str = "head.bin";

pub fn save_delta(dir: &Path, delta: &SftDelta) -> Result<()> {
    delta.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = format!("# density\t{}\n# base_fingerprint\t{:016x}\n", delta.density, delta.base_fingerprint);
    text.push_str(&format!("# head\t{}\n", delta.head.as_ref().map_or("none".to_string(), |h| h.kind.to_string())));
    let mut bytes = Vec::new();
    for (name, e) in &delta.entries {
        text.push_str(&format!("{name}\t{}\n", e.indices.len()));
        for i in &e.indices {
            bytes.extend_from_slice(&i.to_le_bytes());
        }
        for v in &e.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mp = dir.join(DELTA_MANIFEST);
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    let bp = dir.join(DELTA_BIN);
    fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))?;
    if let Some(h) = &delta.head {
        crate::model::write_tensors(dir, HEAD_MANIFEST, HEAD_BIN, &h.params)?;
    }
    Ok(())
}

pub fn load_delta(dir: &Path) -> Result<SftDelta> {
    let mp = dir.join(DELTA_MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let bp = dir.join(DELTA_BIN);
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let origin = mp.display().to_string();
    let (mut density, mut fp, mut head_kind) = (None, None, None);
    let mut entries = BTreeMap::new();
    let mut off = 0usize;
    for (i, line) in text.lines().enumerate() {
        let bad = |m: &str| Error::parse(&origin, i + 1, m);
        if let Some(h) = line.strip_prefix("# ") {
            let (k, v) = h.split_once('\t').ok_or_else(|| bad("expected `# key<TAB>value`"))?;
            match k {
                "density" => density = Some(v.parse::<f64>().map_err(|_| bad("bad density"))?),
                "base_fingerprint" => fp = Some(u64::from_str_radix(v, 16).map_err(|_| bad("bad fingerprint"))?),
                "head" if v == "none" => {}
                "head" => head_kind = Some(v.parse::<HeadKind>().map_err(|e| bad(&e.to_string()))?),
                _ => return Err(bad("unknown header key")),
            }
            continue;
        }
        let (name, count) = line.split_once('\t').ok_or_else(|| bad("expected `name<TAB>count`"))?;
        let n: usize = count.parse().map_err(|_| bad("bad count"))?;
        let end = off + 12 * n;
        if end > bytes.len() {
            return Err(bad("entry extends past the end of delta.bin"));
        }
        let indices = bytes[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let values = bytes[off + 8 * n..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        off = end;
        entries.insert(name.to_string(), SparseTensor { indices, values });
    }
    if off != bytes.len() {
        return Err(Error::parse(&origin, 0, "delta.bin has trailing bytes"));
    }
    let (Some(density), Some(base_fingerprint)) = (density, fp) else {
        return Err(Error::parse(&origin, 0, "missing density or base_fingerprint header"));
    };
    let head = match head_kind {
        Some(kind) => Some(TaskHead { kind, params: crate::model::read_tensors(dir, HEAD_MANIFEST, HEAD_BIN)? }),
        None => None,
    };
    let delta = SftDelta { base_fingerprint, density, entries, head };
    delta.validate()?;
    Ok(delta)
}
