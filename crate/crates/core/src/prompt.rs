//! Prompt-tuning variants on top of a frozen backbone.
//!
//! - shallow: prompts inserted once before the first block and carried
//!   through every block unchanged in position;
//! - deep: a fresh prompt set replaces the prompt segment before every block;
//! - gated: like shallow, but after block `l < L` the prompt segment becomes
//!   `g·out + (1 - g)·in` with `g = sigmoid(γ)`; the last block is ungated.
//!
//! Optional learnable temperatures (one per block, stored as `log τ`) divide
//! the attention logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::derive_rng;
use crate::vit::{
    block_forward, head_forward, init_tensor, is_backbone, model::tile_rows, patch_embed,
    AttentionState, Binder, Checkpoint, Forward, ParamStore, Provenance, TokenSequence,
    TrainableMask, ViTConfig,
};

pub const PROMPT_TOKENS: &str = "prompt.tokens";
pub const GATE_PRIOR: &str = "gate.prior";
pub const TEMP_LOG: &str = "temp.log";

pub fn deep_prompt_name(block: usize) -> String {
    format!("prompt.deep.{block}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMode {
    Shallow,
    Deep,
    Gated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// `g = sigmoid(γ)`.
    Soft,
    /// Gumbel-sigmoid sample with straight-through gradients while training,
    /// `sigmoid(γ) ≥ 0.5` at inference.
    Hard,
    /// Every gate pinned to `fixed_gate_value`; priors are ignored.
    Fixed,
}

impl std::fmt::Display for TuningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TuningMode::Shallow => "shallow",
            TuningMode::Deep => "deep",
            TuningMode::Gated => "gated",
        })
    }
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMode::Soft => "soft",
            GateMode::Hard => "hard",
            GateMode::Fixed => "fixed",
        })
    }
}

fn default_gate_mode() -> GateMode {
    GateMode::Soft
}
fn default_gate_init() -> f64 {
    5.0
}
fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConfig {
    pub mode: TuningMode,
    pub num_prompts: usize,
    /// Learnable per-block attention temperatures.
    #[serde(default)]
    pub attention_shaping: bool,
    #[serde(default = "default_gate_mode")]
    pub gate_mode: GateMode,
    /// Initial value of every gate prior γ.
    #[serde(default = "default_gate_init")]
    pub gate_init: f64,
    #[serde(default = "one")]
    pub fixed_gate_value: f64,
    /// Relaxation temperature of the Gumbel-sigmoid hard gate.
    #[serde(default = "one")]
    pub gumbel_temperature: f64,
}

impl TuningConfig {
    pub fn new(mode: TuningMode, num_prompts: usize) -> Self {
        Self {
            mode,
            num_prompts,
            attention_shaping: false,
            gate_mode: GateMode::Soft,
            gate_init: default_gate_init(),
            fixed_gate_value: 1.0,
            gumbel_temperature: 1.0,
        }
    }

    pub fn with_shaping(mut self, on: bool) -> Self {
        self.attention_shaping = on;
        self
    }

    pub fn with_gate_mode(mut self, mode: GateMode) -> Self {
        self.gate_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_prompts == 0 {
            return Err(Error::Config(format!(
                "{} prompt tuning needs at least one prompt token",
                self.mode
            )));
        }
        if !self.gate_init.is_finite() {
            return Err(Error::Config("gate_init must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.fixed_gate_value) {
            return Err(Error::Config("fixed_gate_value must lie in [0, 1]".into()));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::Config("gumbel_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable prompt tokens: one `[N_p × D]` set, or one per block for deep mode.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub sets: Vec<Tensor>,
}

impl PromptSet {
    /// Uniform in `±sqrt(6 / (N_p·D + D))`.
    pub fn init(num_prompts: usize, dim: usize, count: usize, seed: u64) -> Result<Self> {
        if num_prompts == 0 {
            return Err(Error::Config("prompt set needs at least one token".into()));
        }
        let bound = (6.0 / (num_prompts * dim + dim) as f64).sqrt();
        let sets = (0..count)
            .map(|i| {
                let tag = if count == 1 {
                    PROMPT_TOKENS.to_string()
                } else {
                    deep_prompt_name(i)
                };
                let mut rng = derive_rng(seed, &tag);
                let data = (0..num_prompts * dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::new([num_prompts, dim], data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { sets })
    }

    pub fn num_prompts(&self) -> usize {
        self.sets.first().map_or(0, Tensor::rows)
    }
}

/// Gate priors `γ¹ … γ^{L-1}` and how they become gate values.
#[derive(Clone, Debug, PartialEq)]
pub struct GateBank {
    pub priors: Vec<f64>,
    pub mode: GateMode,
    pub fixed_value: f64,
    pub gumbel_temperature: f64,
}

impl GateBank {
    pub fn from_config(tuning: &TuningConfig, num_blocks: usize) -> Self {
        Self {
            priors: vec![tuning.gate_init; num_blocks.saturating_sub(1)],
            mode: tuning.gate_mode,
            fixed_value: tuning.fixed_gate_value,
            gumbel_temperature: tuning.gumbel_temperature,
        }
    }

    /// Forward gate values. Hard gates draw Gumbel-sigmoid samples from `rng`
    /// when `training`.
    pub fn values(&self, training: bool, rng: &mut impl Rng) -> Vec<f64> {
        self.priors
            .iter()
            .map(|&gamma| match self.mode {
                GateMode::Soft => sigmoid(gamma),
                GateMode::Fixed => self.fixed_value,
                GateMode::Hard if training => {
                    let relaxed = sigmoid((gamma + logistic_noise(rng)) / self.gumbel_temperature);
                    hard_threshold(relaxed)
                }
                GateMode::Hard => hard_threshold(sigmoid(gamma)),
            })
            .collect()
    }
}

fn hard_threshold(p: f64) -> f64 {
    if p >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Difference of two independent standard Gumbel variables, i.e. a standard
/// logistic sample `ln u − ln(1 − u)`.
pub fn logistic_noise(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u.ln() - (1.0 - u).ln();
        }
    }
}

/// Per-block attention temperatures `τ = exp(log τ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureBank {
    pub log_temps: Vec<f64>,
}

impl TemperatureBank {
    /// All temperatures 1.
    pub fn identity(num_blocks: usize) -> Self {
        Self {
            log_temps: vec![0.0; num_blocks],
        }
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.log_temps.iter().map(|v| v.exp()).collect()
    }
}

/// Trainable parameters for a tuning mode: prompts and head always; gate
/// priors in gated mode; log-temperatures when attention shaping is on.
pub fn build_trainable_mask(mode: TuningMode, with_temps: bool, num_blocks: usize) -> TrainableMask {
    let mut names = vec!["head.weight".to_string(), "head.bias".to_string()];
    match mode {
        TuningMode::Shallow => names.push(PROMPT_TOKENS.into()),
        TuningMode::Deep => names.extend((0..num_blocks).map(deep_prompt_name)),
        TuningMode::Gated => {
            names.push(PROMPT_TOKENS.into());
            if num_blocks > 1 {
                names.push(GATE_PRIOR.into());
            }
        }
    }
    if with_temps {
        names.push(TEMP_LOG.into());
    }
    TrainableMask::new(names)
}

/// Options for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Hard gates sample only while training.
    pub training: bool,
    /// Seed of the Gumbel noise for this pass.
    pub noise_seed: u64,
    pub capture_trace: bool,
    pub capture_attention: bool,
    /// Replaces every gate value (length `L − 1`) regardless of gate mode.
    pub gate_override: Option<Vec<f64>>,
}

/// Prompt representations recorded block by block. All tensors are
/// `[B·N_p × D]`, sample-major.
#[derive(Clone, Debug)]
pub struct PromptTrace {
    /// The prompts as inserted before the first block.
    pub initial: Tensor,
    pub blocks: Vec<TraceEntry>,
}

#[derive(Clone, Debug)]
pub struct TraceEntry {
    /// Prompt segment entering the block.
    pub input: Tensor,
    /// Prompt segment leaving the block, before gating.
    pub output: Tensor,
    /// Gated prompt segment passed on to the next block (gated mode, `l < L`).
    pub gated: Option<Tensor>,
    pub gate: Option<f64>,
}

impl PromptTrace {
    /// Prompt representation entering the last block.
    pub fn final_input(&self) -> Option<&Tensor> {
        self.blocks.last().map(|e| &e.input)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub trace: Option<PromptTrace>,
    pub attention: Vec<AttentionState>,
}

/// Output of a forward pass that stays on the tape.
pub struct TapeOutput {
    pub logits: Var,
    pub trace: Option<PromptTrace>,
    /// Gate values used by the pass (gated mode only).
    pub gates: Vec<f64>,
}

/// A frozen backbone plus prompt-tuning parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TunedModel {
    pub vit: ViTConfig,
    pub tuning: TuningConfig,
    pub params: ParamStore,
    pub provenance: Provenance,
}

impl TunedModel {
    /// Copies the backbone (everything except the head) and initializes a
    /// fresh head plus tuning parameters from `tuning_seed`.
    pub fn new(
        vit: ViTConfig,
        tuning: TuningConfig,
        backbone: &ParamStore,
        backbone_seed: u64,
        tuning_seed: u64,
    ) -> Result<Self> {
        vit.validate()?;
        tuning.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in crate::vit::parameter_shapes(&vit) {
            if !is_backbone(&name) {
                continue;
            }
            let t = backbone
                .get(&name)
                .ok_or_else(|| Error::Config(format!("backbone lacks parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "TunedModel::new",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            params.insert(name, t.clone());
        }
        for (name, shape) in crate::vit::head_shapes(&vit) {
            params.insert(name.clone(), init_tensor(tuning_seed, &name, &shape));
        }
        let l = vit.num_blocks;
        let d = vit.embed_dim;
        match tuning.mode {
            TuningMode::Shallow | TuningMode::Gated => {
                let p = PromptSet::init(tuning.num_prompts, d, 1, tuning_seed)?;
                params.insert(PROMPT_TOKENS, p.sets[0].clone());
            }
            TuningMode::Deep => {
                let p = PromptSet::init(tuning.num_prompts, d, l, tuning_seed)?;
                for (i, t) in p.sets.into_iter().enumerate() {
                    params.insert(deep_prompt_name(i), t);
                }
            }
        }
        if tuning.mode == TuningMode::Gated && l > 1 {
            let bank = GateBank::from_config(&tuning, l);
            params.insert(GATE_PRIOR, Tensor::new([l - 1], bank.priors)?);
        }
        if tuning.attention_shaping {
            params.insert(TEMP_LOG, Tensor::zeros([l]));
        }
        Ok(Self {
            vit,
            tuning,
            params,
            provenance: Provenance {
                backbone_seed,
                tuning_seed: Some(tuning_seed),
            },
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let tuning = ckpt
            .tuning
            .clone()
            .ok_or_else(|| Error::Mode("checkpoint carries no prompt-tuning parameters".into()))?;
        ckpt.config.validate()?;
        tuning.validate()?;
        Ok(Self {
            vit: ckpt.config.clone(),
            tuning,
            params: ckpt.params.clone(),
            provenance: ckpt.provenance.clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.vit.clone(),
            tuning: Some(self.tuning.clone()),
            params: self.params.clone(),
            trainable: self.mask().iter().map(String::from).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn mask(&self) -> TrainableMask {
        build_trainable_mask(
            self.tuning.mode,
            self.tuning.attention_shaping,
            self.vit.num_blocks,
        )
    }

    pub fn trainable_count(&self) -> usize {
        self.params.count(self.mask().iter())
    }

    pub fn gate_bank(&self) -> Option<GateBank> {
        if self.tuning.mode != TuningMode::Gated {
            return None;
        }
        let mut bank = GateBank::from_config(&self.tuning, self.vit.num_blocks);
        if let Some(t) = self.params.get(GATE_PRIOR) {
            bank.priors = t.data().to_vec();
        }
        Some(bank)
    }

    pub fn temperature_bank(&self) -> Option<TemperatureBank> {
        self.params.get(TEMP_LOG).map(|t| TemperatureBank {
            log_temps: t.data().to_vec(),
        })
    }

    /// Dispatches on the configured tuning mode.
    pub fn forward(&self, images: &crate::Tensor, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let mask = TrainableMask::none();
        let mut fwd = Forward::new(Binder::new(&self.params, &mask), &self.vit);
        fwd.capture_attention = opts.capture_attention;
        let out = self.forward_on(&mut fwd, images, opts)?;
        Ok(ForwardOutput {
            logits: (*out.logits.value()).clone(),
            trace: out.trace,
            attention: std::mem::take(&mut fwd.attention),
        })
    }

    /// Forward pass recorded on the binder's tape.
    pub fn forward_on(
        &self,
        fwd: &mut Forward<'_>,
        images: &crate::Tensor,
        opts: &ForwardOptions,
    ) -> Result<TapeOutput> {
        match self.tuning.mode {
            TuningMode::Shallow => run_shallow(fwd, images, opts),
            TuningMode::Deep => run_deep(fwd, images, opts),
            TuningMode::Gated => run_gated(self, fwd, images, opts),
        }
    }
}

fn tau_vars(fwd: &mut Forward<'_>) -> Result<Vec<Option<Var>>> {
    let l = fwd.config.num_blocks;
    if !fwd.binder.store().contains(TEMP_LOG) {
        return Ok(vec![None; l]);
    }
    let logs = fwd.binder.var(TEMP_LOG)?;
    if logs.value().len() != l {
        return Err(Error::Shape {
            op: "temperatures",
            lhs: logs.shape(),
            rhs: vec![l],
        });
    }
    (0..l)
        .map(|i| Ok(Some(logs.element(i)?.exp()?)))
        .collect()
}

fn recorded(opts: &ForwardOptions, v: &Var) -> Option<Tensor> {
    opts.capture_trace.then(|| (*v.value()).clone())
}

fn run_shallow(fwd: &mut Forward<'_>, images: &Tensor, opts: &ForwardOptions) -> Result<TapeOutput> {
    let prompts = fwd.binder.var(PROMPT_TOKENS)?;
    let mut x = patch_embed(fwd, images)?.insert_prompts(&prompts)?;
    let taus = tau_vars(fwd)?;
    let seg = x.segments.prompts();
    let mut trace = opts.capture_trace.then(|| PromptTrace {
        initial: (*x.slice_tokens(seg.clone()).unwrap().value()).clone(),
        blocks: Vec::new(),
    });
    for (l, tau) in taus.iter().enumerate() {
        let before = x.slice_tokens(seg.clone())?;
        x = block_forward(fwd, l, &x, tau.as_ref())?;
        if let Some(tr) = trace.as_mut() {
            let after = x.slice_tokens(seg.clone())?;
            tr.blocks.push(TraceEntry {
                input: (*before.value()).clone(),
                output: (*after.value()).clone(),
                gated: None,
                gate: None,
            });
        }
    }
    Ok(TapeOutput {
        logits: head_forward(fwd, &x)?,
        trace,
        gates: Vec::new(),
    })
}

fn run_deep(fwd: &mut Forward<'_>, images: &Tensor, opts: &ForwardOptions) -> Result<TapeOutput> {
    let l_total = fwd.config.num_blocks;
    let mut sets = Vec::with_capacity(l_total);
    for l in 0..l_total {
        let name = deep_prompt_name(l);
        if !fwd.binder.store().contains(&name) {
            return Err(Error::Config(format!("deep prompts missing for block {l} (`{name}`)")));
        }
        sets.push(fwd.binder.var(&name)?);
    }
    let np = sets[0].value().rows();
    if sets.iter().any(|s| s.value().rows() != np) {
        return Err(Error::Config("deep prompt sets differ in size".into()));
    }
    let mut x = patch_embed(fwd, images)?.insert_prompts(&sets[0])?;
    let taus = tau_vars(fwd)?;
    let seg = x.segments.prompts();
    let mut trace = opts.capture_trace.then(|| PromptTrace {
        initial: (*x.slice_tokens(seg.clone()).unwrap().value()).clone(),
        blocks: Vec::new(),
    });
    for l in 0..l_total {
        if l > 0 {
            // The previous block's prompt outputs are discarded.
            let fresh = tile_rows(&sets[l], x.batch)?;
            x = x.replace_segment(seg.clone(), &fresh)?;
        }
        let before = recorded(opts, &x.slice_tokens(seg.clone())?);
        x = block_forward(fwd, l, &x, taus[l].as_ref())?;
        if let Some(tr) = trace.as_mut() {
            tr.blocks.push(TraceEntry {
                input: before.expect("captured"),
                output: (*x.slice_tokens(seg.clone())?.value()).clone(),
                gated: None,
                gate: None,
            });
        }
    }
    Ok(TapeOutput {
        logits: head_forward(fwd, &x)?,
        trace,
        gates: Vec::new(),
    })
}

/// Gate value nodes for blocks `1..L-1`.
fn gate_vars(model: &TunedModel, fwd: &mut Forward<'_>, opts: &ForwardOptions) -> Result<Vec<Var>> {
    let n = model.vit.num_blocks.saturating_sub(1);
    let tape = fwd.binder.tape().clone();
    if let Some(values) = &opts.gate_override {
        if values.len() != n {
            return Err(Error::Config(format!(
                "{} gate overrides for {n} gated blocks",
                values.len()
            )));
        }
        return Ok(values.iter().map(|&g| tape.scalar(g)).collect());
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let tuning = &model.tuning;
    if tuning.gate_mode == GateMode::Fixed {
        return Ok((0..n).map(|_| tape.scalar(tuning.fixed_gate_value)).collect());
    }
    let priors = fwd.binder.var(GATE_PRIOR)?;
    if priors.value().len() != n {
        return Err(Error::Shape {
            op: "gate priors",
            lhs: priors.shape(),
            rhs: vec![n],
        });
    }
    let mut rng = derive_rng(opts.noise_seed, "gumbel");
    let mut out = Vec::with_capacity(n);
    for l in 0..n {
        let gamma = priors.element(l)?;
        let g = match (tuning.gate_mode, opts.training) {
            (GateMode::Hard, true) => {
                let noise = tape.scalar(logistic_noise(&mut rng));
                let relaxed = gamma
                    .add(&noise)?
                    .scale(1.0 / tuning.gumbel_temperature)?
                    .sigmoid()?;
                let hard = hard_threshold(relaxed.item());
                relaxed.straight_through(Tensor::scalar(hard))?
            }
            (GateMode::Hard, false) => tape.scalar(hard_threshold(sigmoid(gamma.item()))),
            _ => gamma.sigmoid()?,
        };
        out.push(g);
    }
    Ok(out)
}

/// `g·after + (1 − g)·before`.
pub fn gate_blend(g: &Var, after: &Var, before: &Var) -> Result<Var> {
    after.mul_scalar(g)?.add(&before.mul_scalar(&g.one_minus()?)?)
}

fn run_gated(
    model: &TunedModel,
    fwd: &mut Forward<'_>,
    images: &Tensor,
    opts: &ForwardOptions,
) -> Result<TapeOutput> {
    let prompts = fwd.binder.var(PROMPT_TOKENS)?;
    let mut x: TokenSequence = patch_embed(fwd, images)?.insert_prompts(&prompts)?;
    let gates = gate_vars(model, fwd, opts)?;
    let taus = tau_vars(fwd)?;
    let seg = x.segments.prompts();
    let last = model.vit.num_blocks - 1;
    let mut trace = opts.capture_trace.then(|| PromptTrace {
        initial: (*x.slice_tokens(seg.clone()).unwrap().value()).clone(),
        blocks: Vec::new(),
    });
    for (l, tau) in taus.iter().enumerate() {
        let before = x.slice_tokens(seg.clone())?;
        x = block_forward(fwd, l, &x, tau.as_ref())?;
        let after = x.slice_tokens(seg.clone())?;
        if l == last {
            if let Some(tr) = trace.as_mut() {
                tr.blocks.push(TraceEntry {
                    input: (*before.value()).clone(),
                    output: (*after.value()).clone(),
                    gated: None,
                    gate: None,
                });
            }
            break;
        }
        let g = &gates[l];
        let gated = gate_blend(g, &after, &before)?;
        x = x.replace_segment(seg.clone(), &gated)?;
        if let Some(tr) = trace.as_mut() {
            tr.blocks.push(TraceEntry {
                input: (*before.value()).clone(),
                output: (*after.value()).clone(),
                gated: Some((*gated.value()).clone()),
                gate: Some(g.item()),
            });
        }
    }
    Ok(TapeOutput {
        logits: head_forward(fwd, &x)?,
        trace,
        gates: gates.iter().map(Var::item).collect(),
    })
}

fn check_mode(model: &TunedModel, needed: &str, present: bool) -> Result<()> {
    if present {
        Ok(())
    } else {
        Err(Error::Mode(format!(
            "{} model lacks the parameters for {needed} prompts",
            model.tuning.mode
        )))
    }
}

/// Gated forward: logits plus the full prompt trace. Gate values come from
/// the model's gate mode unless `opts.gate_override` is set.
pub fn gated_forward(
    model: &TunedModel,
    images: &Tensor,
    opts: &ForwardOptions,
) -> Result<(Tensor, PromptTrace)> {
    check_mode(model, "gated", model.params.contains(PROMPT_TOKENS))?;
    let mask = TrainableMask::none();
    let mut fwd = Forward::new(Binder::new(&model.params, &mask), &model.vit);
    let opts = ForwardOptions {
        capture_trace: true,
        ..opts.clone()
    };
    let out = run_gated(model, &mut fwd, images, &opts)?;
    Ok((
        (*out.logits.value()).clone(),
        out.trace.expect("trace captured"),
    ))
}

/// Shallow forward over `prompt.tokens` (gate priors, if any, are unused).
pub fn vpt_shallow_forward(model: &TunedModel, images: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
    check_mode(model, "shallow", model.params.contains(PROMPT_TOKENS))?;
    let mask = TrainableMask::none();
    let mut fwd = Forward::new(Binder::new(&model.params, &mask), &model.vit);
    let out = run_shallow(&mut fwd, images, opts)?;
    Ok((*out.logits.value()).clone())
}

pub fn vpt_deep_forward(model: &TunedModel, images: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
    let mask = TrainableMask::none();
    let mut fwd = Forward::new(Binder::new(&model.params, &mask), &model.vit);
    let out = run_deep(&mut fwd, images, opts)?;
    Ok((*out.logits.value()).clone())
}

/// Outcome of comparing parameters outside a trainable mask.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrozenReport {
    pub checked: usize,
    pub violations: Vec<String>,
}

impl FrozenReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every parameter outside `mask` whose bits differ between the two
/// parameter sets.
pub fn assert_frozen_params(
    before: &ParamStore,
    after: &ParamStore,
    mask: &TrainableMask,
) -> FrozenReport {
    let mut report = FrozenReport::default();
    for (name, t) in before.iter() {
        if mask.contains(name) {
            continue;
        }
        report.checked += 1;
        match after.get(name) {
            Some(u) if t.bit_eq(u) => {}
            _ => report.violations.push(name.to_string()),
        }
    }
    report
}

pub fn assert_frozen(before: &Checkpoint, after: &Checkpoint, mask: &TrainableMask) -> Result<FrozenReport> {
    if before.config != after.config {
        return Err(Error::Config(
            "cannot compare checkpoints with different configurations".into(),
        ));
    }
    Ok(assert_frozen_params(&before.params, &after.params, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trainable_counts_for_toy_config() {
        let vit = ViTConfig::toy();
        let backbone = crate::vit::init_params(&vit, 0).unwrap();
        let gated = TunedModel::new(
            vit.clone(),
            TuningConfig::new(TuningMode::Gated, 8).with_shaping(true),
            &backbone,
            0,
            1,
        )
        .unwrap();
        // prompts 8*64, gates L-1 = 5, temperatures L = 6, head 64*10+10
        assert_eq!(gated.trainable_count(), 8 * 64 + 5 + 6 + (64 * 10 + 10));
        assert_eq!(gated.trainable_count(), 1173);
        let shallow =
            TunedModel::new(vit, TuningConfig::new(TuningMode::Shallow, 8), &backbone, 0, 1).unwrap();
        assert_eq!(shallow.trainable_count(), 1162);
    }

    #[test]
    fn masks_never_contain_backbone() {
        for mode in [TuningMode::Shallow, TuningMode::Deep, TuningMode::Gated] {
            for temps in [false, true] {
                let m = build_trainable_mask(mode, temps, 6);
                assert!(m.iter().all(|n| !is_backbone(n)), "{mode:?}");
                assert!(m.contains("head.weight"));
            }
        }
        let g = build_trainable_mask(TuningMode::Gated, true, 6);
        for n in [PROMPT_TOKENS, GATE_PRIOR, TEMP_LOG, "head.bias"] {
            assert!(g.contains(n));
        }
    }

    #[test]
    fn gate_values_soft_and_hard_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bank = GateBank {
            priors: vec![0.0, 5.0, -5.0],
            mode: GateMode::Soft,
            fixed_value: 1.0,
            gumbel_temperature: 1.0,
        };
        let soft = bank.values(false, &mut rng);
        assert_eq!(soft[0], 0.5);
        bank.mode = GateMode::Hard;
        let hard = bank.values(false, &mut rng);
        assert_eq!(&hard[1..], &[1.0, 0.0]);
        assert_eq!(hard, bank.values(false, &mut rng));
    }

    #[test]
    fn zero_prompts_rejected() {
        let cfg = TuningConfig::new(TuningMode::Gated, 0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
