//! SGD with momentum over the trainable mask, evaluation, model-level
//! gradient checks and the ablation grid.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::prompt::{
    assert_frozen_params, ForwardOptions, GateMode, TunedModel, TuningConfig, TuningMode,
};
use crate::tensor::Tensor;
use crate::util::{derive_rng, sha256_hex};
use crate::vit::{is_backbone, Binder, Forward, ParamStore, TrainableMask, ViTConfig};

/// Learning rates searched over.
pub const LR_GRID: [f64; 7] = [0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0];

fn default_momentum() -> f64 {
    0.9
}
fn default_eval_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validation cadence in epochs.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_in_grid(&self) -> bool {
        LR_GRID.contains(&self.lr)
    }
}

/// `v ← μ·v + g; p ← p − lr·v` for every masked parameter.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    mask: &TrainableMask,
    lr: f64,
    momentum: f64,
    velocity: &mut BTreeMap<String, Tensor>,
) -> Result<()> {
    for name in mask.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::State(format!("no gradient for trainable parameter `{name}`")))?;
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("trainable parameter `{name}` is missing")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let v = velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Mean cross-entropy and gradients of every trainable parameter.
pub fn loss_and_grads(
    model: &TunedModel,
    images: &Tensor,
    labels: &[usize],
    opts: &ForwardOptions,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mask = model.mask();
    loss_and_grads_for(model, &mask, images, labels, opts)
}

fn loss_and_grads_for(
    model: &TunedModel,
    mask: &TrainableMask,
    images: &Tensor,
    labels: &[usize],
    opts: &ForwardOptions,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut fwd = Forward::new(Binder::new(&model.params, mask), &model.vit);
    let out = model.forward_on(&mut fwd, images, opts)?;
    let loss = out.logits.cross_entropy(labels)?;
    let value = loss.item();
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    let grads = loss.backward()?;
    Ok((value, fwd.binder.gradients(&grads)?))
}

/// Mean cross-entropy only.
pub fn loss_value(model: &TunedModel, images: &Tensor, labels: &[usize], opts: &ForwardOptions) -> Result<f64> {
    let out = model.forward(images, opts)?;
    let tape = crate::Tape::new();
    tape.constant(out.logits).cross_entropy(labels).map(|l| l.item())
}

/// Checks the analytic gradient of every trainable scalar against central
/// differences of the loss on one batch.
pub fn model_gradcheck(
    model: &TunedModel,
    images: &Tensor,
    labels: &[usize],
    opts: &ForwardOptions,
    options: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mask = model.mask();
    let (_, grads) = loss_and_grads_for(model, &mask, images, labels, opts)?;
    let mut layout = Vec::new();
    let mut flat = Vec::new();
    let mut analytic = Vec::new();
    for name in mask.iter() {
        let p = model.params.require(name)?;
        let g = &grads[name];
        for i in 0..p.len() {
            layout.push((name.to_string(), i));
        }
        flat.extend_from_slice(p.data());
        analytic.extend_from_slice(g.data());
    }
    let mut probe = model.clone();
    let f = |x: &[f64]| -> Result<f64> {
        let mut off = 0;
        for name in mask.iter() {
            let t = probe.params.get_mut(name).expect("masked parameter present");
            let n = t.len();
            t.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
        loss_value(&probe, images, labels, opts)
    };
    let label = |i: usize| format!("{}[{}]", layout[i].0, layout[i].1);
    finite_diff_check(f, &flat, &analytic, &label, None, options)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean loss in inference mode (hard gates thresholded).
pub fn evaluate(model: &TunedModel, data: &LabeledDataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let opts = ForwardOptions::default();
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = data.batch(chunk)?;
        let out = model.forward(&images, &opts)?;
        let tape = crate::Tape::new();
        let loss = tape.constant(out.logits.clone()).cross_entropy(&labels)?.item();
        loss_sum += loss * chunk.len() as f64;
        correct += count_correct(&out.logits, &labels);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = logits.row(*i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            best == y
        })
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
    /// Loss of the very first optimizer step, before any update.
    pub first_step_loss: Option<f64>,
    pub final_gates: Vec<f64>,
    pub final_temperatures: Vec<f64>,
    /// Kept out of the CSV so the CSV stays reproducible.
    pub wall_time_secs: f64,
}

impl RunMetrics {
    /// `epoch,split,loss,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,accuracy\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{:.17e},{:.17e}\n", r.epoch, r.split, r.loss, r.accuracy));
        }
        s
    }

    pub fn last(&self, split: &str) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

/// Gate values the model uses at inference.
pub fn inference_gates(model: &TunedModel) -> Vec<f64> {
    let mut rng = derive_rng(0, "unused");
    model
        .gate_bank()
        .map(|b| b.values(false, &mut rng))
        .unwrap_or_default()
}

fn check_data(model: &TunedModel, data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (h, w, c) = data.image_dims();
    let v = &model.vit;
    if h != v.image_size || w != v.image_size || c != v.channels {
        return Err(Error::Config(format!(
            "dataset images are {h}x{w}x{c}, model expects {0}x{0}x{1}",
            v.image_size, v.channels
        )));
    }
    if data.num_classes != v.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes, v.num_classes
        )));
    }
    data.images.ensure_finite("dataset images")
}

/// Trains the masked parameters with SGD. The returned model differs from
/// `model` only inside the trainable mask; this is verified bit-exactly.
pub fn train(
    model: &TunedModel,
    cfg: &TrainConfig,
    data: &LabeledDataset,
    val: Option<&LabeledDataset>,
) -> Result<(TunedModel, RunMetrics)> {
    cfg.validate()?;
    check_data(model, data)?;
    if let Some(v) = val {
        check_data(model, v)?;
    }
    let start = Instant::now();
    let mask = model.mask();
    let initial = model.params.clone();
    let mut current = model.clone();
    let mut velocity = BTreeMap::new();
    let mut records = Vec::new();
    let mut first_step_loss = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut derive_rng(cfg.seed, &format!("shuffle.{epoch}")));
        let mut noise = derive_rng(cfg.seed, &format!("gumbel.{epoch}"));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = data.batch(chunk)?;
            let opts = ForwardOptions {
                training: true,
                noise_seed: noise.random(),
                ..Default::default()
            };
            // The data were checked up front, so numeric errors here come
            // from the parameters.
            let diverged = |e: Error| match e {
                Error::NonFinite(cause) | Error::Domain(cause) => Error::Diverged { epoch, step, cause },
                e => e,
            };
            let mut fwd = Forward::new(Binder::new(&current.params, &mask), &current.vit);
            let out = current.forward_on(&mut fwd, &images, &opts).map_err(diverged)?;
            let loss = match out.logits.cross_entropy(&labels) {
                Err(Error::NonFinite(_)) => {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                other => other?,
            };
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    loss: value,
                });
            }
            first_step_loss.get_or_insert(value);
            loss_sum += value * chunk.len() as f64;
            correct += count_correct(&out.logits.value(), &labels);
            let grads = loss.backward().map_err(diverged)?;
            let grads = fwd.binder.gradients(&grads)?;
            drop(out);
            drop(fwd);
            sgd_step(&mut current.params, &grads, &mask, cfg.lr, cfg.momentum, &mut velocity)?;
        }
        records.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
        if let Some(v) = val {
            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                let e = evaluate(&current, v, cfg.batch_size)?;
                records.push(EpochRecord {
                    epoch,
                    split: "val".into(),
                    loss: e.loss,
                    accuracy: e.accuracy,
                });
            }
        }
    }
    let report = assert_frozen_params(&initial, &current.params, &mask);
    if !report.passed() {
        return Err(Error::FrozenViolation(report.violations));
    }
    let metrics = RunMetrics {
        records,
        first_step_loss,
        final_gates: inference_gates(&current),
        final_temperatures: current
            .temperature_bank()
            .map(|t| t.temperatures())
            .unwrap_or_default(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((current, metrics))
}

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub mode: TuningMode,
    pub attention_shaping: bool,
    #[serde(default = "soft_gate")]
    pub gate_mode: GateMode,
}

fn soft_gate() -> GateMode {
    GateMode::Soft
}

impl AblationCell {
    /// Every combination of the requested modes, shaping settings and gate
    /// variants. Gate variants only multiply gated cells.
    pub fn grid(modes: &[TuningMode], shaping: &[bool], gates: &[GateMode]) -> Vec<Self> {
        let mut cells = Vec::new();
        for &mode in modes {
            for &attention_shaping in shaping {
                if mode == TuningMode::Gated {
                    for &gate_mode in gates {
                        cells.push(Self {
                            mode,
                            attention_shaping,
                            gate_mode,
                        });
                    }
                } else {
                    cells.push(Self {
                        mode,
                        attention_shaping,
                        gate_mode: GateMode::Soft,
                    });
                }
            }
        }
        cells
    }
}

/// Settings shared by every cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSetup {
    pub vit: ViTConfig,
    /// Template for the tuning settings; mode, shaping and gate mode come
    /// from each cell.
    pub tuning: TuningConfig,
    pub train: TrainConfig,
    pub backbone_seed: u64,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub trainable: usize,
    pub config_fingerprint: String,
    pub metrics: RunMetrics,
    pub train_eval: Evaluation,
    pub val_eval: Option<Evaluation>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub backbone_hash: String,
    pub data_hash: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.17e}"))
        .collect::<Vec<_>>()
        .join(";")
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "mode,attention_shaping,gate_mode,trainable,seed,backbone_hash,data_hash,config_fingerprint,\
             train_loss,train_accuracy,val_loss,val_accuracy,gates,temperatures\n",
        );
        for r in &self.rows {
            let (vl, va) = r
                .val_eval
                .map_or((String::new(), String::new()), |e| {
                    (format!("{:.17e}", e.loss), format!("{:.17e}", e.accuracy))
                });
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.17e},{:.17e},{vl},{va},{},{}\n",
                r.cell.mode,
                r.cell.attention_shaping,
                r.cell.gate_mode,
                r.trainable,
                self.seed,
                self.backbone_hash,
                self.data_hash,
                r.config_fingerprint,
                r.train_eval.loss,
                r.train_eval.accuracy,
                join(&r.metrics.final_gates),
                join(&r.metrics.final_temperatures),
            ));
        }
        s
    }
}

/// Hash of the configuration that fully determines a run.
pub fn config_fingerprint(vit: &ViTConfig, tuning: &TuningConfig, train: &TrainConfig) -> String {
    let text = serde_json::to_string(&(vit, tuning, train)).expect("configs serialize");
    sha256_hex(text.as_bytes())
}

/// Trains every cell from the same backbone, data and seed. Cells run in
/// parallel on the current rayon pool; results keep the cell order.
pub fn run_ablation(
    setup: &AblationSetup,
    backbone: &ParamStore,
    cells: &[AblationCell],
    data: &LabeledDataset,
    val: Option<&LabeledDataset>,
) -> Result<AblationTable> {
    let backbone_hash = backbone.fingerprint(is_backbone);
    let rows = cells
        .par_iter()
        .map(|cell| {
            let tuning = TuningConfig {
                mode: cell.mode,
                attention_shaping: cell.attention_shaping,
                gate_mode: cell.gate_mode,
                ..setup.tuning.clone()
            };
            let model = TunedModel::new(
                setup.vit.clone(),
                tuning.clone(),
                backbone,
                setup.backbone_seed,
                setup.train.seed,
            )?;
            let (trained, metrics) = train(&model, &setup.train, data, val)?;
            if trained.params.fingerprint(is_backbone) != backbone_hash {
                return Err(Error::FrozenViolation(vec!["backbone hash".into()]));
            }
            Ok(AblationRow {
                cell: *cell,
                trainable: trained.trainable_count(),
                config_fingerprint: config_fingerprint(&setup.vit, &tuning, &setup.train),
                train_eval: evaluate(&trained, data, setup.train.batch_size)?,
                val_eval: val
                    .map(|v| evaluate(&trained, v, setup.train.batch_size))
                    .transpose()?,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        backbone_hash,
        data_hash: data.fingerprint(),
        seed: setup.train.seed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> (ParamStore, BTreeMap<String, Tensor>) {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::scalar(v));
        (p, BTreeMap::new())
    }

    #[test]
    fn plain_step() {
        let (mut p, mut g) = one("w", 1.0);
        g.insert("w".into(), Tensor::scalar(0.5));
        let mut vel = BTreeMap::new();
        sgd_step(&mut p, &g, &TrainableMask::new(["w"]), 1.0, 0.0, &mut vel).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.5);
    }

    #[test]
    fn momentum_two_steps() {
        // v1 = 1, p1 = -0.1; v2 = 1.9, p2 = -0.1 - 0.19
        let (mut p, mut g) = one("w", 0.0);
        g.insert("w".into(), Tensor::scalar(1.0));
        let mut vel = BTreeMap::new();
        let mask = TrainableMask::new(["w"]);
        for _ in 0..2 {
            sgd_step(&mut p, &g, &mask, 0.1, 0.9, &mut vel).unwrap();
        }
        assert!((p.get("w").unwrap().item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn unmasked_untouched_and_missing_grad_rejected() {
        let (mut p, mut g) = one("w", 1.0);
        p.insert("frozen", Tensor::scalar(3.0));
        g.insert("frozen".into(), Tensor::scalar(10.0));
        g.insert("w".into(), Tensor::scalar(0.0));
        let mut vel = BTreeMap::new();
        sgd_step(&mut p, &g, &TrainableMask::new(["w"]), 1.0, 0.9, &mut vel).unwrap();
        assert_eq!(p.get("frozen").unwrap().item(), 3.0);
        g.remove("w");
        assert!(matches!(
            sgd_step(&mut p, &g, &TrainableMask::new(["w"]), 1.0, 0.9, &mut vel),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn grid_cell_counts() {
        let cells = AblationCell::grid(
            &[TuningMode::Shallow, TuningMode::Gated],
            &[false, true],
            &[GateMode::Soft],
        );
        assert_eq!(cells.len(), 4);
        let cells = AblationCell::grid(
            &[TuningMode::Shallow, TuningMode::Deep, TuningMode::Gated],
            &[false, true],
            &[GateMode::Soft, GateMode::Hard],
        );
        assert_eq!(cells.len(), 8);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            batch_size: 8,
            epochs: 1,
            seed: 0,
            eval_every: 1,
        };
        c.validate().unwrap();
        assert!(c.lr_in_grid());
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
