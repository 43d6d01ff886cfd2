//! Multi-task instruction tuning of the encoder's trainable subset.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SECTION_OPTIMIZER};
use crate::instance::TaskInstance;
use crate::model::Model;
use crate::numerics::{GradSet, ParamGroup, ParamId, ParamStore, Real, Tape, Tensor};
use crate::seed::rng_for;
use crate::{Error, Result, TaskFamily};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment state. Moments live in f64 regardless of the parameter
/// precision; they are keyed by parameter name so checkpoints stay readable.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(store: &ParamStore<T>, ids: &[ParamId]) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for &id in ids {
            let p = store.get(id);
            m.insert(p.name.clone(), vec![0.0; p.value.len()]);
            v.insert(p.name.clone(), vec![0.0; p.value.len()]);
        }
        Self { t: 0, m, v }
    }

    /// One update over `ids` using their accumulated grads (missing grads
    /// count as zero), then clears the grads.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, ids: &[ParamId], lr: impl Fn(ParamGroup) -> f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for &id in ids {
            let p = store.get_mut(id);
            let rate = lr(p.group);
            let (m, v) = match (self.m.get_mut(&p.name), self.v.get_mut(&p.name)) {
                (Some(m), Some(v)) if m.len() == p.value.len() => (m, v),
                _ => return Err(Error::Invalid(format!("no optimizer state for {}", p.name))),
            };
            let grad = p.grad.take();
            let g: &[T] = grad.as_ref().map_or(&[], |g: &Tensor<T>| g.data());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.get(i).map_or(0.0, |v| v.as_f64());
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let upd = rate * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                if upd != 0.0 {
                    *x = T::of(x.as_f64() - upd);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer updates.
    pub steps: usize,
    /// Instances per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per update.
    pub accum_every: usize,
    pub clip_max_norm: f64,
    pub lr_adapters_and_mlp: f64,
    pub lr_position_table: f64,
    pub seed: u64,
    /// Family weights; `None` weighs families by dataset size.
    pub mixture: Option<BTreeMap<TaskFamily, f64>>,
    pub precision: Precision,
    /// Checkpoint interval in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub probe_size: usize,
    pub probe_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            accum_every: 2,
            clip_max_norm: 10.0,
            lr_adapters_and_mlp: 2e-4,
            lr_position_table: 2e-3,
            seed: 17,
            mixture: None,
            precision: Precision::F64,
            checkpoint_every: 500,
            probe_size: 16,
            probe_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_adapters_and_mlp > 0.0 && self.lr_position_table > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.accum_every == 0 || self.batch_size == 0 {
            return bad("accum_every and batch_size must be at least 1".into());
        }
        if !(self.clip_max_norm > 0.0) {
            return bad("clip_max_norm must be positive".into());
        }
        if self.probe_size == 0 || self.probe_every == 0 {
            return bad("probe_size and probe_every must be at least 1".into());
        }
        if let Some(mix) = &self.mixture {
            if mix.values().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return bad("mixture weights must be finite and non-negative".into());
            }
            let s: f64 = mix.values().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("mixture weights sum to {s}, expected 1"));
            }
        }
        Ok(())
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        if group.is_position_group() {
            self.lr_position_table
        } else {
            self.lr_adapters_and_mlp
        }
    }
}

/// Mixture weights proportional to dataset sizes.
pub fn size_mixture(datasets: &BTreeMap<TaskFamily, Vec<TaskInstance>>) -> BTreeMap<TaskFamily, f64> {
    let total: usize = datasets.values().map(Vec::len).sum();
    datasets.iter().map(|(&f, d)| (f, d.len() as f64 / total.max(1) as f64)).collect()
}

/// Draws `batch_size` instances: family by mixture weight, then uniformly
/// within the family.
pub fn sample_batch<'a>(
    datasets: &'a BTreeMap<TaskFamily, Vec<TaskInstance>>,
    mixture: &BTreeMap<TaskFamily, f64>,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a TaskInstance>> {
    let eligible: Vec<(TaskFamily, f64)> = mixture.iter().filter(|(_, &w)| w > 0.0).map(|(&f, &w)| (f, w)).collect();
    if eligible.is_empty() {
        return Err(Error::Invalid("mixture has no positive weight".into()));
    }
    for (f, _) in &eligible {
        if datasets.get(f).is_none_or(Vec::is_empty) {
            return Err(Error::Invalid(format!("family {f} has positive weight but no instances")));
        }
    }
    let dist = WeightedIndex::new(eligible.iter().map(|e| e.1)).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok((0..batch_size)
        .map(|_| {
            let data = &datasets[&eligible[dist.sample(rng)].0];
            &data[rng.random_range(0..data.len())]
        })
        .collect())
}

/// Global L2 norm of the grads of `ids`.
pub fn grad_norm<T: Real>(store: &ParamStore<T>, ids: &[ParamId]) -> f64 {
    ids.iter().filter_map(|&id| store.get(id).grad.as_ref()).map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales grads so their global norm is at most `max_norm`; returns the
/// factor applied.
pub fn clip_gradients<T: Real>(store: &mut ParamStore<T>, ids: &[ParamId], max_norm: f64) -> Result<f64> {
    let g = grad_norm(store, ids);
    if !g.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {g}")));
    }
    if g <= max_norm {
        return Ok(1.0);
    }
    let factor = max_norm / g;
    for &id in ids {
        if let Some(grad) = store.get_mut(id).grad.as_mut() {
            for x in grad.data_mut() {
                *x = T::of(x.as_f64() * factor);
            }
        }
    }
    Ok(factor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_it: f64,
    pub l_prompt: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    pub clip_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: usize,
    pub loss: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub adam: Adam,
    pub curve: Vec<StepRecord>,
    pub probes: Vec<ProbeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub steps: usize,
    pub curve: Vec<StepRecord>,
    pub probes: Vec<ProbeRecord>,
    pub initial_probe_loss: f64,
    pub final_smoothed_probe_loss: f64,
    /// `1 - final / initial`.
    pub probe_reduction: f64,
}

const SMOOTH_WINDOW: usize = 3;

/// Mean of the last three probe evaluations.
pub fn smoothed_probe(probes: &[ProbeRecord]) -> f64 {
    let tail = &probes[probes.len().saturating_sub(SMOOTH_WINDOW)..];
    tail.iter().map(|p| p.loss).sum::<f64>() / tail.len().max(1) as f64
}

/// Fixed probe batch drawn once from the training sets.
pub fn probe_batch<'a>(
    datasets: &'a BTreeMap<TaskFamily, Vec<TaskInstance>>,
    mixture: &BTreeMap<TaskFamily, f64>,
    cfg: &TrainConfig,
) -> Result<Vec<&'a TaskInstance>> {
    sample_batch(datasets, mixture, cfg.probe_size, &mut rng_for(cfg.seed, "probe"))
}

fn probe_loss<T: Real>(model: &Model<T>, probe: &[&TaskInstance]) -> Result<f64> {
    let mut s = 0.0;
    for inst in probe {
        s += model.loss_value(inst)?;
    }
    Ok(s / probe.len() as f64)
}

impl TrainState {
    pub fn fresh<T: Real>(model: &Model<T>) -> Self {
        Self { step: 0, adam: Adam::new(&model.store, &model.encoder.trainable_params()), curve: Vec::new(), probes: Vec::new() }
    }

    /// Optimizer moments and history for a checkpoint.
    pub fn add_to_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        for (name, m) in &self.adam.m {
            ck.add_f64(SECTION_OPTIMIZER, &format!("m/{name}"), m);
        }
        for (name, v) in &self.adam.v {
            ck.add_f64(SECTION_OPTIMIZER, &format!("v/{name}"), v);
        }
        let meta = ck.metadata.as_object_mut().ok_or_else(|| Error::Checkpoint("metadata must be an object".into()))?;
        meta.insert("step".into(), serde_json::to_value(self.step)?);
        meta.insert("adam_t".into(), serde_json::to_value(self.adam.t)?);
        meta.insert("curve".into(), serde_json::to_value(&self.curve)?);
        meta.insert("probes".into(), serde_json::to_value(&self.probes)?);
        Ok(())
    }

    pub fn from_checkpoint<T: Real>(ck: &Checkpoint, model: &Model<T>) -> Result<Self> {
        let meta = &ck.metadata;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("metadata lacks {k}")));
        let mut adam = Adam::new(&model.store, &model.encoder.trainable_params());
        adam.t = serde_json::from_value(field("adam_t")?)?;
        for (name, m) in adam.m.iter_mut() {
            *m = ck.f64_data(SECTION_OPTIMIZER, &format!("m/{name}"))?;
        }
        for (name, v) in adam.v.iter_mut() {
            *v = ck.f64_data(SECTION_OPTIMIZER, &format!("v/{name}"))?;
        }
        Ok(Self {
            step: serde_json::from_value(field("step")?)?,
            adam,
            curve: serde_json::from_value(field("curve")?)?,
            probes: serde_json::from_value(field("probes")?)?,
        })
    }
}

/// One optimizer update: `accum_every` micro-batches, grads averaged over
/// every instance, clipped, then applied.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam,
    batch: &[&TaskInstance],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepRecord> {
    let ids = model.encoder.trainable_params();
    let (mut l_it, mut l_prompt) = (0.0, 0.0);
    for micro in batch.chunks(cfg.batch_size) {
        let mut grads = GradSet::default();
        for inst in micro {
            let mut tape = Tape::new();
            let l = model.losses(&mut tape, inst)?;
            let (a, b) = (tape.value(l.l_it).item().as_f64(), tape.value(l.l_prompt).item().as_f64());
            if !(a.is_finite() && b.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss at step {step} on a {} instance with {} nodes: L_IT={a}, L_prompt={b}",
                    inst.family,
                    inst.num_nodes()
                )));
            }
            l_it += a;
            l_prompt += b;
            tape.backward(l.total)?;
            grads.add(&tape.param_grads())?;
        }
        model.store.accumulate(&grads)?;
    }
    let inv = T::of(1.0 / batch.len() as f64);
    for &id in &ids {
        if let Some(g) = model.store.get_mut(id).grad.as_mut() {
            g.scale_in_place(inv);
        }
    }
    let norm = grad_norm(&model.store, &ids);
    let clip_factor = clip_gradients(&mut model.store, &ids, cfg.clip_max_norm)?;
    adam.step(&mut model.store, &ids, |g| cfg.lr_for(g))?;
    let n = batch.len() as f64;
    Ok(StepRecord {
        step,
        l_it: l_it / n,
        l_prompt: l_prompt / n,
        l_total: (l_it + l_prompt) / n,
        grad_norm: norm,
        clip_factor,
    })
}

/// Instruction-tunes the encoder's trainable subset. The batch for step `s`
/// comes from its own seeded stream, so a run resumed from a checkpoint
/// replays the uninterrupted run exactly. `on_checkpoint` is called every
/// `checkpoint_every` steps and at the end.
pub fn train<T: Real>(
    model: &mut Model<T>,
    datasets: &BTreeMap<TaskFamily, Vec<TaskInstance>>,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_checkpoint: impl FnMut(&Model<T>, &TrainState) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !model.decoder.is_frozen(&model.store) {
        return Err(Error::Invalid("decoder must be pretrained and frozen before tuning".into()));
    }
    let mixture = cfg.mixture.clone().unwrap_or_else(|| size_mixture(datasets));
    let probe = probe_batch(datasets, &mixture, cfg)?;
    let mut state = resume.unwrap_or_else(|| TrainState::fresh(model));
    if state.probes.is_empty() {
        state.probes.push(ProbeRecord { step: 0, loss: probe_loss(model, &probe)? });
    }
    let per_step = cfg.batch_size * cfg.accum_every;
    while state.step < cfg.steps {
        let s = state.step;
        let batch = sample_batch(datasets, &mixture, per_step, &mut rng_for(cfg.seed, &format!("batch/{s}")))?;
        let rec = train_step(model, &mut state.adam, &batch, cfg, s)?;
        log::debug!("step {s}: L_total {:.4}", rec.l_total);
        state.curve.push(rec);
        state.step += 1;
        if state.step % cfg.probe_every == 0 || state.step == cfg.steps {
            let loss = probe_loss(model, &probe)?;
            log::info!("step {}: probe L_total {loss:.4}", state.step);
            state.probes.push(ProbeRecord { step: state.step, loss });
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
            on_checkpoint(model, &state)?;
        }
    }
    on_checkpoint(model, &state)?;
    let initial = state.probes[0].loss;
    let last = smoothed_probe(&state.probes);
    Ok(TrainReport {
        config: cfg.clone(),
        seed: cfg.seed,
        steps: state.step,
        curve: state.curve,
        probes: state.probes,
        initial_probe_loss: initial,
        final_smoothed_probe_loss: last,
        probe_reduction: 1.0 - last / initial,
    })
}

/// One CSV row per step.
pub fn curve_csv(curve: &[StepRecord]) -> String {
    let mut out = String::from("step,l_it,l_prompt,l_total,grad_norm,clip_factor\n");
    for r in curve {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.l_it, r.l_prompt, r.l_total, r.grad_norm, r.clip_factor));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetRecord;
    use crate::graphcore::{gen_synthetic, GeneratorConfig};
    use crate::instance::SamplingConfig;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn scalar_store(x: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(x), ParamGroup::Adapter, true);
        (s, id)
    }

    #[test]
    fn adam_constant_grad_three_steps() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(&s, &[id]);
        for _ in 0..3 {
            s.get_mut(id).grad = Some(Tensor::scalar(0.5));
            adam.step(&mut s, &[id], |_| 0.1).unwrap();
        }
        // bias-corrected moments of a constant gradient are g and g^2
        let want = 1.0 - 3.0 * 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((s.value(id).item() - want).abs() < 1e-9);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn adam_first_step_against_hand_values() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(&s, &[id]);
        let grads = [2.0, -1.0, 0.5];
        // m1=0.2 v1=0.004; m2=0.08 v2=0.004996; m3=0.122 v3=0.005241004
        let m = [0.2, 0.08, 0.122];
        let v = [0.004, 0.004996, 0.005241004];
        let mut x = 0.0;
        for t in 0..3 {
            s.get_mut(id).grad = Some(Tensor::scalar(grads[t]));
            adam.step(&mut s, &[id], |_| 0.01).unwrap();
            let p = (t + 1) as i32;
            x -= 0.01 * (m[t] / (1.0 - 0.9f64.powi(p))) / ((v[t] / (1.0 - 0.999f64.powi(p))).sqrt() + 1e-8);
            assert!((s.value(id).item() - x).abs() < 1e-9, "step {t}");
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let (mut s, id) = scalar_store(0.375);
        let mut adam = Adam::new(&s, &[id]);
        adam.step(&mut s, &[id], |_| 0.1).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(0.0));
        adam.step(&mut s, &[id], |_| 0.1).unwrap();
        assert_eq!(s.value(id).item(), 0.375);
    }

    #[test]
    fn group_learning_rates() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_for(ParamGroup::Adapter), 2e-4);
        assert_eq!(c.lr_for(ParamGroup::EdgeMlp), 2e-4);
        assert_eq!(c.lr_for(ParamGroup::Alignment), 2e-4);
        assert_eq!(c.lr_for(ParamGroup::DistanceTable), 2e-3);
        assert_eq!(c.lr_for(ParamGroup::GraphPos), 2e-3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr_position_table: 0.0, ..Default::default() },
            TrainConfig { accum_every: 0, ..Default::default() },
            TrainConfig { mixture: Some([(TaskFamily::Conn, 0.7)].into()), ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn grad_store(vals: &[f64]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let mut ids = Vec::new();
        for (i, &v) in vals.iter().enumerate() {
            let id = s.add(format!("p{i}"), Tensor::scalar(0.0), ParamGroup::Adapter, true);
            s.get_mut(id).grad = Some(Tensor::scalar(v));
            ids.push(id);
        }
        (s, ids)
    }

    #[test]
    fn clipping_thresholds() {
        let (mut s, ids) = grad_store(&[3.0, 4.0]);
        assert_eq!(clip_gradients(&mut s, &ids, 10.0).unwrap(), 1.0);
        assert_eq!(s.get(ids[1]).grad.as_ref().unwrap().item(), 4.0);
        let (mut s, ids) = grad_store(&[12.0, 16.0]);
        assert!((clip_gradients(&mut s, &ids, 10.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((grad_norm(&s, &ids) - 10.0).abs() < 1e-9);
        let (mut s, ids) = grad_store(&[f64::NAN]);
        assert!(clip_gradients(&mut s, &ids, 10.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn clipped_norm_bounded(v in prop::collection::vec(-100.0f64..100.0, 1..12), max in 0.1f64..20.0) {
            let (mut s, ids) = grad_store(&v);
            clip_gradients(&mut s, &ids, max).unwrap();
            prop_assert!(grad_norm(&s, &ids) <= max * (1.0 + 1e-12));
        }
    }

    fn datasets(n: usize) -> BTreeMap<TaskFamily, Vec<TaskInstance>> {
        let text = crate::tasktext::TaskText::default();
        let mut out = BTreeMap::new();
        for (k, fam) in [TaskFamily::Conn, TaskFamily::NodeCls].into_iter().enumerate() {
            let cfg = GeneratorConfig { num_instances: n, min_nodes: 4, max_nodes: 6, ..Default::default() };
            let inst = gen_synthetic(fam, &cfg, 100 + k as u64)
                .unwrap()
                .iter()
                .map(|s| DatasetRecord::from_synthetic(fam, 3, s).to_instance(&text, SamplingConfig::default()).unwrap())
                .collect();
            out.insert(fam, inst);
        }
        out
    }

    #[test]
    fn batch_sampling_frequencies_and_determinism() {
        let ds = datasets(4);
        let mix: BTreeMap<_, _> = [(TaskFamily::Conn, 0.5), (TaskFamily::NodeCls, 0.5)].into();
        let mut rng = rng_for(3, "t");
        let b = sample_batch(&ds, &mix, 10_000, &mut rng).unwrap();
        let conn = b.iter().filter(|i| i.family == TaskFamily::Conn).count() as f64 / 1e4;
        assert!((conn - 0.5).abs() < 0.03, "{conn}");
        let one: BTreeMap<_, _> = [(TaskFamily::NodeCls, 1.0), (TaskFamily::Conn, 0.0)].into();
        assert!(sample_batch(&ds, &one, 50, &mut rng).unwrap().iter().all(|i| i.family == TaskFamily::NodeCls));
        let a = sample_batch(&ds, &mix, 20, &mut rng_for(9, "x")).unwrap();
        let c = sample_batch(&ds, &mix, 20, &mut rng_for(9, "x")).unwrap();
        assert!(a.iter().zip(&c).all(|(x, y)| std::ptr::eq(*x, *y)));
        let missing: BTreeMap<_, _> = [(TaskFamily::Spd, 1.0)].into();
        assert!(sample_batch(&ds, &missing, 1, &mut rng).is_err());
    }

    fn small_model(seed: u64) -> Model<f64> {
        let mut c = ModelConfig::default();
        c.encoder.d_h = 16;
        c.encoder.d_k = 16;
        c.encoder.m = 4;
        c.decoder.d_model = 16;
        c.decoder.layers = 1;
        let mut m = Model::new(c, seed).unwrap();
        m.decoder.freeze(&mut m.store);
        m
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            steps: 4,
            lr_adapters_and_mlp: 1e-2,
            lr_position_table: 1e-2,
            probe_size: 3,
            probe_every: 2,
            checkpoint_every: 2,
            ..Default::default()
        }
    }

    #[test]
    fn accumulation_matches_large_batch() {
        let ds = datasets(6);
        let a_cfg = TrainConfig { batch_size: 1, accum_every: 2, ..small_cfg() };
        let b_cfg = TrainConfig { batch_size: 2, accum_every: 1, ..small_cfg() };
        let mut a = small_model(1);
        let mut b = small_model(1);
        let batch = sample_batch(&ds, &size_mixture(&ds), 2, &mut rng_for(1, "b")).unwrap();
        let ids = a.encoder.trainable_params();
        let mut adam_a = Adam::new(&a.store, &ids);
        let mut adam_b = Adam::new(&b.store, &ids);
        train_step(&mut a, &mut adam_a, &batch, &a_cfg, 0).unwrap();
        train_step(&mut b, &mut adam_b, &batch, &b_cfg, 0).unwrap();
        for &id in &ids {
            assert!(a.store.value(id).max_abs_diff(b.store.value(id)) < 1e-9);
        }
    }

    #[test]
    fn zero_steps_is_identity_and_runs_are_deterministic() {
        let ds = datasets(6);
        let mut m = small_model(2);
        let before = m.store.snapshot();
        let r = train(&mut m, &ds, &TrainConfig { steps: 0, ..small_cfg() }, None, |_, _| Ok(())).unwrap();
        assert_eq!(r.curve.len(), 0);
        assert_eq!(m.store.snapshot(), before);

        let mut x = small_model(2);
        let mut y = small_model(2);
        train(&mut x, &ds, &small_cfg(), None, |_, _| Ok(())).unwrap();
        train(&mut y, &ds, &small_cfg(), None, |_, _| Ok(())).unwrap();
        assert_eq!(x.store.snapshot(), y.store.snapshot());
    }

    #[test]
    fn only_trainable_subset_moves() {
        let ds = datasets(6);
        let mut m = small_model(3);
        let frozen: Vec<_> = m.encoder.base_params().into_iter().chain(m.decoder.params()).collect();
        let before: Vec<_> = frozen.iter().map(|&id| m.store.value(id).clone()).collect();
        let init: Vec<_> = m.encoder.trainable_params().iter().map(|&id| m.store.value(id).clone()).collect();
        let r = train(&mut m, &ds, &small_cfg(), None, |_, _| Ok(())).unwrap();
        assert_eq!(r.curve.len(), 4);
        for (id, b) in frozen.iter().zip(&before) {
            assert_eq!(m.store.value(*id), b);
        }
        for (id, b) in m.encoder.trainable_params().iter().zip(&init) {
            assert_ne!(m.store.value(*id), b, "{}", m.store.get(*id).name);
        }
    }

    #[test]
    fn unfrozen_decoder_is_rejected() {
        let ds = datasets(2);
        let mut m = small_model(4);
        m.store.set_requires_grad(m.decoder.head, true);
        assert!(train(&mut m, &ds, &small_cfg(), None, |_, _| Ok(())).is_err());
    }

    #[test]
    fn resume_replays_uninterrupted_run() {
        let ds = datasets(6);
        let cfg = small_cfg();
        let mut full = small_model(5);
        train(&mut full, &ds, &cfg, None, |_, _| Ok(())).unwrap();

        let mut first = small_model(5);
        let mut saved = None;
        train(&mut first, &ds, &TrainConfig { steps: 2, ..cfg.clone() }, None, |m, s| {
            let mut ck = Checkpoint::new(serde_json::json!({}));
            m.add_to_checkpoint(&mut ck);
            s.add_to_checkpoint(&mut ck)?;
            saved = Some(Checkpoint::from_bytes(&ck.to_bytes()?)?);
            Ok(())
        })
        .unwrap();
        let ck = saved.unwrap();
        let mut second = small_model(5);
        second.load_encoder(&ck).unwrap();
        let state = TrainState::from_checkpoint(&ck, &second).unwrap();
        assert_eq!(state.step, 2);
        let report = train(&mut second, &ds, &cfg, Some(state), |_, _| Ok(())).unwrap();
        assert_eq!(report.curve.len(), 4);
        assert_eq!(second.store.snapshot(), full.store.snapshot());
    }

    #[test]
    fn smoothing_uses_last_three() {
        let p: Vec<_> = [9.0, 1.0, 2.0, 3.0].iter().enumerate().map(|(s, &l)| ProbeRecord { step: s, loss: l }).collect();
        assert_eq!(smoothed_probe(&p), 2.0);
        assert_eq!(smoothed_probe(&p[..1]), 9.0);
    }
}
