//! Distillation training loop, agent unloading and student export.
//!
//! The student's trainable state is its prompts; gates and per-agent
//! projections are trained alongside and dropped at export. Backbone weights
//! enter every graph as constants, so they never receive a gradient.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agents::{pool, KnowledgeSource, Pooling};
use crate::autodiff::{Graph, Var};
use crate::cache::{write_cache, CacheReader, KnowledgeCacheRecord, PayloadKind, RecordKey};
use crate::error::{config_err, invalid, Error, Result};
use crate::gating::{fuse_average_graph, moa_gate_graph, GateNetwork, GateVars};
use crate::losses::{
    ce_loss_graph, l1_mean_graph, mac_loss_graph, string_enum, LossWeights, MacLossType, MacSource, VacMode,
};
use crate::model::{
    cosine_scores_graph, encode_images_graph, encode_text_graph, init_prompts, Backbone, ModelConfig, PromptSet,
    ScoreKind, ScoreMatrix, TextPool, TextualTokenSequence, VisualTokenSequence,
};
use crate::seed;
use crate::world::{ClassInfo, Sample};

/// How the contributions of several agents are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Average,
    /// One distillation loss per agent, summed.
    Add,
    #[default]
    Gating,
}
string_enum!(Fusion, "moa.fusion", { Average => "average", Add => "add", Gating => "gating" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}
string_enum!(Schedule, "train.schedule", { Constant => "constant", Cosine => "cosine" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub shots: usize,
    pub weights: LossWeights,
    pub vac_mode: VacMode,
    pub mac_type: MacLossType,
    pub mac_source: MacSource,
    pub fusion: Fusion,
    pub pooling: Pooling,
    /// Gate hidden width; 0 selects the student embedding width.
    pub gate_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 0.2,
            momentum: 0.0,
            schedule: Schedule::Constant,
            seed: 1,
            shots: 16,
            weights: LossWeights::default(),
            vac_mode: VacMode::LayerWise,
            mac_type: MacLossType::Kl,
            mac_source: MacSource::LearnedScores,
            fusion: Fusion::Gating,
            pooling: Pooling::LogSumExp,
            gate_hidden: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("train.batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err("train.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err("train.momentum must lie in [0, 1)"));
        }
        if self.shots == 0 {
            return Err(config_err("train.shots must be positive"));
        }
        self.weights.validate()
    }
}

/// Everything training reads but never writes.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub backbone: &'a Backbone,
    pub model: &'a ModelConfig,
    pub knowledge: &'a dyn KnowledgeSource,
    /// Classes the student is trained on; `id` indexes the knowledge source.
    pub classes: &'a [ClassInfo],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub vac: f64,
    pub lac: f64,
    pub mac: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for l in items {
            m.ce += l.ce / n;
            m.vac += l.vac / n;
            m.lac += l.lac / n;
            m.mac += l.mac / n;
            m.total += l.total / n;
        }
        m
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ready,
    InEpoch,
    Finished,
    Exported,
}

/// Trainable state during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub prompts: PromptSet,
    /// One gate per mapped feature layer.
    pub vac_gates: Vec<GateNetwork>,
    pub lac_gate: Option<GateNetwork>,
    pub mac_gate: Option<GateNetwork>,
    /// `C_a×C` per vision agent.
    pub vision_proj: Vec<Array2<f64>>,
    /// `C_a×C` per language agent.
    pub language_proj: Vec<Array2<f64>>,
    pub phase: Phase,
    pub epochs_done: usize,
    pub log: Vec<EpochLog>,
    pub step_losses: Vec<LossBreakdown>,
    velocity: Vec<Array2<f64>>,
}

/// Student feature layers distilled by VAC.
pub fn vac_student_layers(mode: VacMode, depth: usize, prompt_depth: usize) -> Vec<usize> {
    match mode {
        VacMode::LayerWise => (0..prompt_depth).collect(),
        VacMode::LastLayer => vec![depth - 1],
    }
}

/// Agent layer matched to slot `slot` of `slots` mapped layers: uniform stride
/// in layer-wise mode, the final agent layer otherwise.
pub fn vac_agent_layer(mode: VacMode, slot: usize, slots: usize, agent_layers: usize) -> usize {
    match mode {
        VacMode::LayerWise => ((slot + 1) * agent_layers).div_ceil(slots) - 1,
        VacMode::LastLayer => agent_layers - 1,
    }
}

fn projection(in_w: usize, out_w: usize, seed: u64, label: &str) -> Array2<f64> {
    if in_w == out_w {
        Array2::eye(in_w)
    } else {
        let mut rng = seed::rng(seed, label);
        seed::normal_matrix(&mut rng, in_w, out_w, 1.0 / (in_w as f64).sqrt())
    }
}

impl TrainState {
    pub fn new(ctx: &TrainContext, cfg: &TrainConfig) -> Result<Self> {
        let c = ctx.model.embed_width;
        let layout = ctx.knowledge.layout();
        let hidden = if cfg.gate_hidden == 0 { c } else { cfg.gate_hidden };
        let gating = cfg.fusion == Fusion::Gating;
        let mut vac_gates = Vec::new();
        if gating && !layout.vision.is_empty() {
            let slots = vac_student_layers(cfg.vac_mode, ctx.model.depth, ctx.model.prompt_depth).len();
            for m in 0..slots {
                let a = layout.vision.len();
                vac_gates.push(GateNetwork::new(a * c, hidden, a, seed::mix(cfg.seed, &format!("gate/vac/{m}")))?);
            }
        }
        let lac_gate = (gating && !layout.language.is_empty())
            .then(|| {
                let a = layout.language.len();
                GateNetwork::new(a * c, hidden, a, seed::mix(cfg.seed, "gate/lac"))
            })
            .transpose()?;
        let mac_agents = layout.t2i.len() + layout.i2t.len();
        let lac_classes = ctx.classes.len();
        let mac_gate = (gating && mac_agents > 0)
            .then(|| GateNetwork::new(mac_agents * lac_classes, hidden, mac_agents, seed::mix(cfg.seed, "gate/mac")))
            .transpose()?;
        let vision_proj = layout
            .vision
            .iter()
            .map(|(id, w, _)| projection(*w, c, cfg.seed, &format!("proj/{id}")))
            .collect();
        let language_proj = layout
            .language
            .iter()
            .map(|(id, w)| projection(*w, c, cfg.seed, &format!("proj/{id}")))
            .collect();
        let mut state = Self {
            prompts: init_prompts(ctx.model, ctx.backbone)?,
            vac_gates,
            lac_gate,
            mac_gate,
            vision_proj,
            language_proj,
            phase: Phase::Ready,
            epochs_done: 0,
            log: Vec::new(),
            step_losses: Vec::new(),
            velocity: Vec::new(),
        };
        state.velocity = state.params().iter().map(|p| Array2::zeros(p.dim())).collect();
        Ok(state)
    }

    /// Every trainable matrix in a fixed order: visual prompts, textual
    /// prompts, VAC gates, LAC gate, MAC gate, vision projections, language
    /// projections.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = self.prompts.visual.iter().chain(&self.prompts.textual).collect();
        for gate in self.vac_gates.iter().chain(&self.lac_gate).chain(&self.mac_gate) {
            out.extend(gate.params());
        }
        out.extend(self.vision_proj.iter().chain(&self.language_proj));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = self
            .prompts
            .visual
            .iter_mut()
            .chain(self.prompts.textual.iter_mut())
            .collect();
        for gate in self
            .vac_gates
            .iter_mut()
            .chain(self.lac_gate.iter_mut())
            .chain(self.mac_gate.iter_mut())
        {
            out.extend(gate.params_mut());
        }
        out.extend(self.vision_proj.iter_mut().chain(self.language_proj.iter_mut()));
        out
    }
}

/// Gate weights of one modality group on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGroupWeights {
    pub group: String,
    pub agent_ids: Vec<String>,
    /// Rows are samples (or classes for the language group).
    pub weights: Array2<f64>,
}

struct Forward {
    total: Var,
    ce: Option<Var>,
    vac: Option<Var>,
    lac: Option<Var>,
    mac: Option<Var>,
    params: Vec<Var>,
    gates: Vec<(String, Vec<String>, Var)>,
}

fn select_cols(m: &ndarray::Array1<f64>, classes: &[ClassInfo]) -> Vec<f64> {
    classes.iter().map(|c| m[c.id]).collect()
}

enum Contribution {
    Features,
    Scores,
}

/// Distillation loss of `student` against the fused `contribs`.
#[allow(clippy::too_many_arguments)]
fn fused_loss(
    g: &mut Graph,
    cfg: &TrainConfig,
    what: Contribution,
    student: Var,
    contribs: &[Var],
    gate: Option<&GateVars>,
    label: String,
    ids: Vec<String>,
    gates_out: &mut Vec<(String, Vec<String>, Var)>,
) -> Result<Var> {
    let loss = |g: &mut Graph, teacher: Var| -> Result<Var> {
        match what {
            Contribution::Features => {
                let t = g.normalize_rows(teacher)?;
                l1_mean_graph(g, student, t)
            }
            Contribution::Scores => mac_loss_graph(g, student, teacher, cfg.mac_type, cfg.weights.temperature),
        }
    };
    match cfg.fusion {
        Fusion::Gating => {
            let gate = gate.ok_or_else(|| Error::State("gating fusion without a gate".into()))?;
            let (w, fused) = moa_gate_graph(g, contribs, gate)?;
            gates_out.push((label, ids, w));
            loss(g, fused)
        }
        Fusion::Average => {
            let fused = fuse_average_graph(g, contribs)?;
            loss(g, fused)
        }
        Fusion::Add => {
            let mut acc = loss(g, contribs[0])?;
            for &c in &contribs[1..] {
                let l = loss(g, c)?;
                acc = g.add(acc, l);
            }
            Ok(acc)
        }
    }
}

/// Build the Eq. total-loss graph for one batch. With `all_groups`, every
/// distillation group is built even when its weight is zero.
fn forward(
    g: &mut Graph,
    ctx: &TrainContext,
    cfg: &TrainConfig,
    state: &TrainState,
    images: &[&VisualTokenSequence],
    labels: Option<&[usize]>,
    all_groups: bool,
) -> Result<Forward> {
    let layout = ctx.knowledge.layout();
    let w = &cfg.weights;
    let bb = ctx.backbone.load(g);
    let pv: Vec<Var> = state.prompts.visual.iter().map(|p| g.param(p.clone())).collect();
    let pt: Vec<Var> = state.prompts.textual.iter().map(|p| g.param(p.clone())).collect();
    let vac_g: Vec<GateVars> = state.vac_gates.iter().map(|x| x.load(g)).collect();
    let lac_g = state.lac_gate.as_ref().map(|x| x.load(g));
    let mac_g = state.mac_gate.as_ref().map(|x| x.load(g));
    let vproj: Vec<Var> = state.vision_proj.iter().map(|p| g.param(p.clone())).collect();
    let lproj: Vec<Var> = state.language_proj.iter().map(|p| g.param(p.clone())).collect();
    let mut params: Vec<Var> = pv.iter().chain(&pt).copied().collect();
    for gv in vac_g.iter().chain(&lac_g).chain(&mac_g) {
        params.extend(gv.all());
    }
    params.extend(vproj.iter().chain(&lproj));

    let class_refs: Vec<&TextualTokenSequence> = ctx.classes.iter().map(|c| &c.text).collect();
    let img = encode_images_graph(g, &bb, images, &pv)?;
    let txt = encode_text_graph(g, &bb, &class_refs, &pt)?;
    let clip = cosine_scores_graph(g, img.features, txt.eos, 1.0 / ctx.model.temperature)?;
    let mut gates = Vec::new();
    let n = images.len();

    let ce = labels.map(|l| ce_loss_graph(g, clip, l)).transpose()?;

    let vac = if (w.lambda1 > 0.0 || all_groups) && !layout.vision.is_empty() {
        let slots = vac_student_layers(cfg.vac_mode, ctx.model.depth, ctx.model.prompt_depth);
        let mut stacks = Vec::with_capacity(layout.vision.len());
        for (a, (id, width, layers)) in layout.vision.iter().enumerate() {
            let per_image = images
                .iter()
                .map(|im| {
                    let s = ctx.knowledge.vision_stack(a, im)?;
                    if s.dim() != (*layers, *width) {
                        return Err(Error::Validation(format!(
                            "agent {id} returned {:?}, expected ({layers}, {width})",
                            s.dim()
                        )));
                    }
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?;
            stacks.push(per_image);
        }
        let ids: Vec<String> = layout.vision.iter().map(|v| v.0.clone()).collect();
        let mut acc: Option<Var> = None;
        for (m, &s) in slots.iter().enumerate() {
            let student = g.normalize_rows(img.layer_features[s])?;
            let mut contribs = Vec::with_capacity(stacks.len());
            for (a, (_, width, layers)) in layout.vision.iter().enumerate() {
                let l = vac_agent_layer(cfg.vac_mode, m, slots.len(), *layers);
                let mut rows = Array2::zeros((n, *width));
                for (i, st) in stacks[a].iter().enumerate() {
                    rows.row_mut(i).assign(&st.row(l));
                }
                let c = g.constant(rows);
                let p = g.matmul(c, vproj[a]);
                contribs.push(g.normalize_rows(p)?);
            }
            let loss = fused_loss(
                g,
                cfg,
                Contribution::Features,
                student,
                &contribs,
                vac_g.get(m),
                format!("vac/layer{m}"),
                ids.clone(),
                &mut gates,
            )?;
            acc = Some(match acc {
                Some(x) => g.add(x, loss),
                None => loss,
            });
        }
        acc.map(|x| g.scale(x, 1.0 / slots.len() as f64))
    } else {
        None
    };

    let lac = if (w.lambda2 > 0.0 || all_groups) && !layout.language.is_empty() {
        let t = match ctx.model.text_pool {
            TextPool::Eos => txt.eos,
            TextPool::Sos => txt.sos,
        };
        let student = g.normalize_rows(t)?;
        let mut contribs = Vec::with_capacity(layout.language.len());
        for (a, (id, width)) in layout.language.iter().enumerate() {
            let cf = ctx.knowledge.class_features(a)?;
            if cf.dim() != (layout.num_classes, *width) {
                return Err(Error::Validation(format!(
                    "agent {id} class features {:?}, expected ({}, {width})",
                    cf.dim(),
                    layout.num_classes
                )));
            }
            let mut rows = Array2::zeros((ctx.classes.len(), *width));
            for (i, c) in ctx.classes.iter().enumerate() {
                rows.row_mut(i).assign(&cf.row(c.id));
            }
            let c = g.constant(rows);
            let p = g.matmul(c, lproj[a]);
            contribs.push(g.normalize_rows(p)?);
        }
        let ids = layout.language.iter().map(|v| v.0.clone()).collect();
        Some(fused_loss(
            g,
            cfg,
            Contribution::Features,
            student,
            &contribs,
            lac_g.as_ref(),
            "lac".into(),
            ids,
            &mut gates,
        )?)
    } else {
        None
    };

    let mac_agents = layout.t2i.len() + layout.i2t.len();
    let mac = if (w.lambda3 > 0.0 || all_groups) && mac_agents > 0 {
        let student = match cfg.mac_source {
            MacSource::LearnedScores => {
                let (qv, qt) = img
                    .prompt_output
                    .zip(txt.prompt_output)
                    .ok_or_else(|| config_err("learned scores need prompt.depth >= 1"))?;
                cosine_scores_graph(g, qv, qt, 1.0)?
            }
            MacSource::PromptedLogits => clip,
        };
        let k = ctx.classes.len();
        let mut contribs = Vec::with_capacity(mac_agents);
        for a in 0..layout.t2i.len() {
            let mut s = Array2::zeros((n, k));
            for (i, im) in images.iter().enumerate() {
                let map = ctx.knowledge.attention_map(a, im)?;
                if map.nrows() != layout.num_classes {
                    return Err(Error::Validation(format!("agent {} map has {} classes", layout.t2i[a], map.nrows())));
                }
                for (j, c) in ctx.classes.iter().enumerate() {
                    s[[i, j]] = pool(map.row(c.id).as_slice().expect("standard layout"), cfg.pooling)?;
                }
            }
            contribs.push(g.constant(s));
        }
        for a in 0..layout.i2t.len() {
            let mut s = Array2::zeros((n, k));
            for (i, im) in images.iter().enumerate() {
                let v = ctx.knowledge.i2t_vector(a, im)?;
                if v.len() != layout.num_classes {
                    return Err(Error::Validation(format!("agent {} scores {} classes", layout.i2t[a], v.len())));
                }
                s.row_mut(i).assign(&ndarray::Array1::from(select_cols(&v, ctx.classes)));
            }
            contribs.push(g.constant(s));
        }
        let ids = layout.t2i.iter().chain(&layout.i2t).cloned().collect();
        Some(fused_loss(
            g,
            cfg,
            Contribution::Scores,
            student,
            &contribs,
            mac_g.as_ref(),
            "mac".into(),
            ids,
            &mut gates,
        )?)
    } else {
        None
    };

    let mut total = match ce {
        Some(c) => c,
        None => g.scalar_constant(0.0),
    };
    for (lambda, term) in [(w.lambda1, vac), (w.lambda2, lac), (w.lambda3, mac)] {
        if let (Some(t), true) = (term, lambda > 0.0) {
            let s = g.scale(t, lambda);
            total = g.add(total, s);
        }
    }
    Ok(Forward {
        total,
        ce,
        vac,
        lac,
        mac,
        params,
        gates,
    })
}

/// Losses and gradients (aligned with [`TrainState::params`]) on one batch.
pub fn loss_and_grads(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    state: &TrainState,
    images: &[&VisualTokenSequence],
    labels: &[usize],
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    let mut g = Graph::new();
    let f = forward(&mut g, ctx, cfg, state, images, Some(labels), false)?;
    let get = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
    let losses = LossBreakdown {
        ce: get(f.ce),
        vac: get(f.vac),
        lac: get(f.lac),
        mac: get(f.mac),
        total: g.scalar(f.total),
    };
    if !losses.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {losses:?}")));
    }
    let grads = g.backward(f.total);
    let out = f
        .params
        .iter()
        .map(|&p| grads.get(p).cloned().unwrap_or_else(|| Array2::zeros(g.shape(p))))
        .collect();
    Ok((losses, out))
}

/// Total loss only; used by finite-difference checks.
pub fn batch_loss(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    state: &TrainState,
    images: &[&VisualTokenSequence],
    labels: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let f = forward(&mut g, ctx, cfg, state, images, Some(labels), false)?;
    Ok(g.scalar(f.total))
}

/// Gate weights of every gated group on `images`.
pub fn gate_weights(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    state: &TrainState,
    images: &[&VisualTokenSequence],
) -> Result<Vec<GateGroupWeights>> {
    if state.phase == Phase::Exported {
        return Err(Error::State("gates were dropped at export".into()));
    }
    let mut g = Graph::new();
    let f = forward(&mut g, ctx, cfg, state, images, None, true)?;
    Ok(f
        .gates
        .into_iter()
        .map(|(group, agent_ids, w)| GateGroupWeights {
            group,
            agent_ids,
            weights: g.value(w).clone(),
        })
        .collect())
}

/// Drives training over a labelled sample set.
pub struct Trainer<'a> {
    ctx: TrainContext<'a>,
    cfg: TrainConfig,
    images: Vec<&'a VisualTokenSequence>,
    labels: Vec<usize>,
    state: TrainState,
    order: Vec<usize>,
    cursor: usize,
    epoch_losses: Vec<LossBreakdown>,
    epoch_start: Instant,
}

impl<'a> Trainer<'a> {
    /// Checks the knowledge source against the classes and samples before any
    /// step is taken.
    pub fn new(ctx: TrainContext<'a>, cfg: TrainConfig, samples: &'a [Sample]) -> Result<Self> {
        cfg.validate()?;
        ctx.model.validate()?;
        if ctx.model.prompt_depth == 0 {
            return Err(config_err("prompt.depth must be at least 1 to train"));
        }
        if samples.is_empty() {
            return Err(invalid("no training samples"));
        }
        if ctx.classes.len() < 2 {
            return Err(invalid("training needs at least two classes"));
        }
        let layout = ctx.knowledge.layout();
        if let Some(c) = ctx.classes.iter().find(|c| c.id >= layout.num_classes) {
            return Err(Error::Validation(format!(
                "class {} outside the {} classes of the knowledge source",
                c.id, layout.num_classes
            )));
        }
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            let local = ctx.classes.iter().position(|c| c.id == s.label).ok_or_else(|| {
                Error::Validation(format!("sample {} has label {} outside the training classes", s.image.sample_id, s.label))
            })?;
            labels.push(local);
        }
        let images: Vec<&VisualTokenSequence> = samples.iter().map(|s| &s.image).collect();
        ctx.knowledge.check(&images)?;
        let state = TrainState::new(&ctx, &cfg)?;
        Ok(Self {
            ctx,
            cfg,
            images,
            labels,
            state,
            order: Vec::new(),
            cursor: 0,
            epoch_losses: Vec::new(),
            epoch_start: Instant::now(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn steps_per_epoch(&self) -> usize {
        self.images.len().div_ceil(self.cfg.batch_size)
    }

    fn lr(&self) -> f64 {
        match self.cfg.schedule {
            Schedule::Constant => self.cfg.learning_rate,
            Schedule::Cosine => {
                let total = (self.cfg.epochs * self.steps_per_epoch()).max(1) as f64;
                let t = self.state.step_losses.len() as f64;
                0.5 * self.cfg.learning_rate * (1.0 + (std::f64::consts::PI * t / total).cos())
            }
        }
    }

    /// Run one SGD step. Returns `None` once every epoch is done.
    pub fn step(&mut self) -> Result<Option<LossBreakdown>> {
        match self.state.phase {
            Phase::Finished | Phase::Exported => return Ok(None),
            _ if self.state.epochs_done >= self.cfg.epochs => return Ok(None),
            Phase::Ready => {
                let e = self.state.epochs_done as u64;
                self.order = (0..self.images.len()).collect();
                self.order.shuffle(&mut seed::rng(self.cfg.seed.wrapping_add(e), "shuffle"));
                self.cursor = 0;
                self.epoch_losses.clear();
                self.epoch_start = Instant::now();
                self.state.phase = Phase::InEpoch;
            }
            Phase::InEpoch => {}
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        let images: Vec<&VisualTokenSequence> = idx.iter().map(|&i| self.images[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let (losses, grads) = loss_and_grads(&self.ctx, &self.cfg, &self.state, &images, &labels)?;
        let lr = self.lr();
        let mu = self.cfg.momentum;
        let mut velocity = std::mem::take(&mut self.state.velocity);
        for ((p, gr), v) in self.state.params_mut().into_iter().zip(&grads).zip(velocity.iter_mut()) {
            if mu > 0.0 {
                *v *= mu;
                *v += gr;
                p.scaled_add(-lr, v);
            } else {
                p.scaled_add(-lr, gr);
            }
        }
        self.state.velocity = velocity;
        self.cursor = end;
        self.state.step_losses.push(losses);
        self.epoch_losses.push(losses);
        if self.cursor >= self.order.len() {
            self.state.log.push(EpochLog {
                epoch: self.state.epochs_done + 1,
                losses: LossBreakdown::mean(&self.epoch_losses),
                wall_ms: self.epoch_start.elapsed().as_secs_f64() * 1e3,
            });
            self.state.epochs_done += 1;
            self.state.phase = Phase::Ready;
        }
        Ok(Some(losses))
    }

    pub fn run_epoch(&mut self) -> Result<Option<EpochLog>> {
        let before = self.state.epochs_done;
        while self.state.epochs_done == before {
            if self.step()?.is_none() {
                return Ok(None);
            }
        }
        Ok(self.state.log.last().copied())
    }

    /// Train every remaining epoch, writing one JSON line per epoch to `log`.
    pub fn run(mut self, mut log: Option<&mut dyn Write>) -> Result<TrainState> {
        while let Some(e) = self.run_epoch()? {
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&e).expect("log serializes"))?;
            }
        }
        Ok(self.finish())
    }

    /// Stop training: prompts are rounded to their stored precision.
    pub fn finish(mut self) -> TrainState {
        self.state.prompts.round_to_f32();
        self.state.phase = Phase::Finished;
        self.state
    }
}

const SCORE_CHUNK: usize = 32;

/// Class scores of `images` over `classes` from prompts alone.
pub fn student_scores(
    backbone: &Backbone,
    prompts: &PromptSet,
    temperature: f64,
    images: &[VisualTokenSequence],
    classes: &[ClassInfo],
) -> Result<ScoreMatrix> {
    if images.is_empty() {
        return Err(invalid("no images to score"));
    }
    let texts: Vec<TextualTokenSequence> = classes.iter().map(|c| c.text.clone()).collect();
    let (t, _) = backbone.encode_text(&texts, prompts, TextPool::Eos)?;
    let mut values = Array2::zeros((images.len(), classes.len()));
    for (i, chunk) in images.chunks(SCORE_CHUNK).enumerate() {
        let (v, _) = backbone.encode_images(chunk, prompts)?;
        let s = crate::model::clip_scores(&v, &t, temperature)?;
        values
            .slice_mut(ndarray::s![i * SCORE_CHUNK..i * SCORE_CHUNK + chunk.len(), ..])
            .assign(&s.values);
    }
    Ok(ScoreMatrix {
        values,
        kind: ScoreKind::Clip,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentMeta {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_id: String,
    pub num_classes: usize,
    /// Hex SHA-256 of the frozen backbone the prompts were trained against.
    pub backbone: String,
    pub model: ModelConfig,
    pub epoch_losses: Vec<LossBreakdown>,
}

/// Inference-only student: prompts plus metadata, nothing from the teachers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedStudent {
    pub prompts: PromptSet,
    pub meta: StudentMeta,
}

/// Identifies the run a student or snapshot came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportInfo {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_id: String,
    pub num_classes: usize,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Unload every agent: gates and projections are dropped and the prompts are
/// copied into a standalone student.
pub fn export_student(
    state: &mut TrainState,
    backbone: &Backbone,
    model: &ModelConfig,
    info: &ExportInfo,
) -> Result<TrainedStudent> {
    match state.phase {
        Phase::InEpoch => return Err(Error::State("cannot export in the middle of an epoch".into())),
        Phase::Exported => return Err(Error::State("student already exported".into())),
        Phase::Ready | Phase::Finished => {}
    }
    state.prompts.round_to_f32();
    state.phase = Phase::Exported;
    state.vac_gates.clear();
    state.lac_gate = None;
    state.mac_gate = None;
    state.vision_proj.clear();
    state.language_proj.clear();
    state.velocity.clear();
    Ok(TrainedStudent {
        prompts: state.prompts.clone(),
        meta: StudentMeta {
            config_hash: info.config_hash.clone(),
            seed: info.seed,
            dataset_id: info.dataset_id.clone(),
            num_classes: info.num_classes,
            backbone: hex(&backbone.fingerprint()),
            model: model.clone(),
            epoch_losses: state.log.iter().map(|e| e.losses).collect(),
        },
    })
}

fn prompt_records(prompts: &PromptSet, dataset_id: &str) -> Vec<KnowledgeCacheRecord> {
    let mut out = Vec::new();
    for (split, list) in [("prompt/visual", &prompts.visual), ("prompt/textual", &prompts.textual)] {
        for (j, p) in list.iter().enumerate() {
            out.push(KnowledgeCacheRecord::from_matrix(
                RecordKey::new("", dataset_id, split, j as u64),
                PayloadKind::PromptMatrix,
                p,
                0,
            ));
        }
    }
    out
}

fn read_prompts(reader: &CacheReader) -> Result<PromptSet> {
    let mut set = PromptSet::empty();
    for e in &reader.manifest().records {
        if e.kind != PayloadKind::PromptMatrix {
            continue;
        }
        let m = reader.get(&e.key)?.matrix()?;
        let list = match e.key.split.as_str() {
            "prompt/visual" => &mut set.visual,
            "prompt/textual" => &mut set.textual,
            other => return Err(Error::Validation(format!("unknown prompt split {other}"))),
        };
        if e.key.key as usize != list.len() {
            return Err(Error::Validation("prompt layers out of order".into()));
        }
        list.push(m);
    }
    Ok(set)
}

impl TrainedStudent {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = BTreeMap::from([(
            "student".to_string(),
            serde_json::to_string(&self.meta).expect("meta serializes"),
        )]);
        let recs = prompt_records(&self.prompts, &self.meta.dataset_id);
        write_cache(path, &recs, seed::fnv1a64(self.meta.config_hash.as_bytes()), meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = CacheReader::open(path)?;
        let meta = reader
            .manifest()
            .meta
            .get("student")
            .ok_or_else(|| Error::Validation(format!("{} is not an exported student", path.display())))?;
        let meta: StudentMeta =
            serde_json::from_str(meta).map_err(|e| Error::Corruption(format!("student metadata: {e}")))?;
        if let Some(e) = reader.manifest().records.iter().find(|e| !e.key.agent_id.is_empty()) {
            return Err(Error::Validation(format!("student file holds agent record {}", e.key)));
        }
        Ok(Self {
            prompts: read_prompts(&reader)?,
            meta,
        })
    }

    /// Rebuild the frozen backbone and check it is the one trained against.
    pub fn backbone(&self) -> Result<Backbone> {
        let bb = Backbone::new(&self.meta.model)?;
        let fp = hex(&bb.fingerprint());
        if fp != self.meta.backbone {
            return Err(Error::Validation(format!(
                "backbone hash {fp} differs from the trained {}",
                self.meta.backbone
            )));
        }
        Ok(bb)
    }

    pub fn predict(&self, backbone: &Backbone, images: &[VisualTokenSequence], classes: &[ClassInfo]) -> Result<ScoreMatrix> {
        student_scores(backbone, &self.prompts, self.meta.model.temperature, images, classes)
    }
}

/// Training snapshot: prompts, gates and projections, for reports that need
/// the teachers' side of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnapshotMeta {
    phase: Phase,
    epochs_done: usize,
    log: Vec<EpochLog>,
    vac_gates: usize,
    lac_gate: bool,
    mac_gate: bool,
    vision_agents: Vec<String>,
    language_agents: Vec<String>,
    dataset_id: String,
}

impl TrainState {
    pub fn save(&self, path: &Path, dataset_id: &str, vision: &[String], language: &[String]) -> Result<()> {
        if self.phase == Phase::Exported {
            return Err(Error::State("exported state has no gates to snapshot".into()));
        }
        let mut recs = prompt_records(&self.prompts, dataset_id);
        let gates = self
            .vac_gates
            .iter()
            .enumerate()
            .map(|(m, g)| (format!("gate/vac/{m}"), g))
            .chain(self.lac_gate.iter().map(|g| ("gate/lac".to_string(), g)))
            .chain(self.mac_gate.iter().map(|g| ("gate/mac".to_string(), g)));
        for (split, gate) in gates {
            for (i, p) in gate.params().into_iter().enumerate() {
                recs.push(KnowledgeCacheRecord::from_matrix(
                    RecordKey::new("", dataset_id, &split, i as u64),
                    PayloadKind::Parameter,
                    p,
                    0,
                ));
            }
        }
        for (ids, projs) in [(vision, &self.vision_proj), (language, &self.language_proj)] {
            for (id, p) in ids.iter().zip(projs) {
                recs.push(KnowledgeCacheRecord::from_matrix(
                    RecordKey::new(id, dataset_id, "projection", 0),
                    PayloadKind::Parameter,
                    p,
                    0,
                ));
            }
        }
        let meta = SnapshotMeta {
            phase: self.phase,
            epochs_done: self.epochs_done,
            log: self.log.clone(),
            vac_gates: self.vac_gates.len(),
            lac_gate: self.lac_gate.is_some(),
            mac_gate: self.mac_gate.is_some(),
            vision_agents: vision.to_vec(),
            language_agents: language.to_vec(),
            dataset_id: dataset_id.to_string(),
        };
        let meta = BTreeMap::from([("state".to_string(), serde_json::to_string(&meta).expect("meta serializes"))]);
        write_cache(path, &recs, 0, meta)
    }

    /// Load a snapshot written by [`TrainState::save`]. Exported students are
    /// rejected with a state error.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = CacheReader::open(path)?;
        let manifest = reader.manifest();
        if manifest.meta.contains_key("student") {
            return Err(Error::State(format!(
                "{} is an exported student; its gates were dropped",
                path.display()
            )));
        }
        let meta: SnapshotMeta = serde_json::from_str(
            manifest
                .meta
                .get("state")
                .ok_or_else(|| Error::Validation(format!("{} is not a training snapshot", path.display())))?,
        )
        .map_err(|e| Error::Corruption(format!("snapshot metadata: {e}")))?;
        let ds = &meta.dataset_id;
        let gate = |split: &str| -> Result<GateNetwork> {
            let p = |i: u64| reader.get(&RecordKey::new("", ds, split, i))?.matrix();
            Ok(GateNetwork {
                w1: p(0)?,
                b1: p(1)?,
                w2: p(2)?,
                b2: p(3)?,
                trainable: true,
            })
        };
        let vac_gates = (0..meta.vac_gates).map(|m| gate(&format!("gate/vac/{m}"))).collect::<Result<_>>()?;
        let lac_gate = meta.lac_gate.then(|| gate("gate/lac")).transpose()?;
        let mac_gate = meta.mac_gate.then(|| gate("gate/mac")).transpose()?;
        let proj = |ids: &[String]| -> Result<Vec<Array2<f64>>> {
            ids.iter()
                .map(|id| reader.get(&RecordKey::new(id, ds, "projection", 0))?.matrix())
                .collect()
        };
        let mut state = Self {
            prompts: read_prompts(&reader)?,
            vac_gates,
            lac_gate,
            mac_gate,
            vision_proj: proj(&meta.vision_agents)?,
            language_proj: proj(&meta.language_agents)?,
            phase: meta.phase,
            epochs_done: meta.epochs_done,
            log: meta.log,
            step_losses: Vec::new(),
            velocity: Vec::new(),
        };
        state.velocity = state.params().iter().map(|p| Array2::zeros(p.dim())).collect();
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_wise_mapping_strides_to_the_last_agent_layer() {
        let map = |slots, layers| (0..slots).map(|m| vac_agent_layer(VacMode::LayerWise, m, slots, layers)).collect::<Vec<_>>();
        assert_eq!(map(3, 3), [0, 1, 2]);
        assert_eq!(map(2, 6), [2, 5]);
        assert_eq!(map(4, 2), [0, 0, 1, 1]);
        assert_eq!(map(1, 5), [4]);
        assert_eq!(vac_agent_layer(VacMode::LastLayer, 0, 1, 7), 6);
        assert_eq!(vac_student_layers(VacMode::LayerWise, 4, 3), [0, 1, 2]);
        assert_eq!(vac_student_layers(VacMode::LastLayer, 4, 3), [3]);
    }

    #[test]
    fn projections_are_identity_only_when_widths_match() {
        assert_eq!(projection(5, 5, 1, "p"), Array2::<f64>::eye(5));
        let p = projection(7, 5, 1, "p");
        assert_eq!(p.dim(), (7, 5));
        assert_eq!(p, projection(7, 5, 1, "p"));
        assert_ne!(p, projection(7, 5, 2, "p"));
    }

    #[test]
    fn hex_is_lowercase_and_padded() {
        assert_eq!(hex(&[0, 10, 255]), "000aff");
    }

    #[test]
    fn config_validation_rejects_degenerate_values() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
