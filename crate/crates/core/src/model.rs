//! Miniature frozen dual encoder with deep learnable prompts.
//!
//! Both branches are small transformers (single-head attention plus a tanh
//! MLP, residual connections, no normalization layers) with fixed weights
//! drawn from a seeded generator. Sequences in a batch are stacked into one
//! matrix and kept apart by a block-diagonal attention mask; the text branch
//! additionally applies a causal mask.
//!
//! Vision rows per sample: `[prompts; patches]`. Text rows per class:
//! `[SOS; prompts; name tokens; EOS]`. At each of the first `J` layers the
//! prompt rows are overwritten with that layer's fresh prompts before the
//! block runs.

use std::rc::Rc;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, invalid, Error, Result};
use crate::seed;

/// Words whose embeddings initialize the first-layer textual prompts.
pub const INIT_PHRASE: [&str; 4] = ["a", "photo", "of", "a"];

/// Which text position feeds the pooled text feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TextPool {
    #[default]
    Eos,
    Sos,
}

impl FromStr for TextPool {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eos" => Ok(TextPool::Eos),
            "sos" => Ok(TextPool::Sos),
            other => Err(config_err(format!("text.pool must be eos or sos, got {other:?}"))),
        }
    }
}

impl TextPool {
    pub fn as_str(self) -> &'static str {
        match self {
            TextPool::Eos => "eos",
            TextPool::Sos => "sos",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer blocks per branch.
    pub depth: usize,
    /// Token width `D` shared by both branches.
    pub width: usize,
    /// Shared embedding width `C`.
    pub embed_width: usize,
    /// Seed of the frozen backbone weights.
    pub seed: u64,
    pub n_ctx: usize,
    /// Number of layers `J` that receive prompts.
    pub prompt_depth: usize,
    pub prompt_seed: u64,
    pub prompt_init_std: f64,
    pub text_pool: TextPool,
    /// Logit temperature of the classification scores.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 32,
            embed_width: 32,
            seed: 7,
            n_ctx: 4,
            prompt_depth: 2,
            prompt_seed: 1,
            prompt_init_std: 0.02,
            text_pool: TextPool::Eos,
            temperature: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.embed_width == 0 {
            return Err(config_err("encoder widths must be positive"));
        }
        if self.prompt_depth > self.depth {
            return Err(config_err(format!(
                "prompt depth {} exceeds encoder depth {}",
                self.prompt_depth, self.depth
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(config_err("temperature must be positive"));
        }
        if !(self.prompt_init_std >= 0.0) {
            return Err(config_err("prompt init std must be non-negative"));
        }
        Ok(())
    }
}

/// Patch embeddings of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokenSequence {
    pub tokens: Array2<f64>,
    pub sample_id: u64,
}

impl VisualTokenSequence {
    pub fn new(tokens: Array2<f64>, sample_id: u64) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(invalid("visual token sequence is empty"));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(invalid("visual tokens must be finite"));
        }
        Ok(Self { tokens, sample_id })
    }
}

/// Class-name tokens of one class. The encoder adds SOS, prompts and EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct TextualTokenSequence {
    pub tokens: Array2<f64>,
    pub class_id: usize,
}

impl TextualTokenSequence {
    pub fn new(tokens: Array2<f64>, class_id: usize) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(invalid("textual token sequence is empty"));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(invalid("textual tokens must be finite"));
        }
        Ok(Self { tokens, class_id })
    }
}

/// Per-layer learnable prompts, the only trainable state of the student.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub visual: Vec<Array2<f64>>,
    pub textual: Vec<Array2<f64>>,
}

impl PromptSet {
    pub fn empty() -> Self {
        Self {
            visual: Vec::new(),
            textual: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.visual.len()
    }

    pub fn n_ctx(&self) -> usize {
        self.visual.first().map_or(0, |p| p.nrows())
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.visual.len() != self.textual.len() {
            return Err(config_err("visual and textual prompt depths differ"));
        }
        let n_ctx = self.n_ctx();
        for p in self.visual.iter().chain(&self.textual) {
            if p.nrows() != n_ctx {
                return Err(config_err("prompt length differs across layers"));
            }
            if p.ncols() != width {
                return Err(config_err(format!(
                    "prompt width {} does not match encoder width {width}",
                    p.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Round every prompt value to `f32` precision, matching what the
    /// container format stores.
    pub fn round_to_f32(&mut self) {
        for p in self.visual.iter_mut().chain(self.textual.iter_mut()) {
            seed::round_f32(p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureModality {
    Vision,
    Text,
}

/// Pooled encoder output: `N×C` for images, `N_cls×C` for text.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeature {
    pub values: Array2<f64>,
    pub modality: FeatureModality,
}

/// Pooled outputs at the prompt positions, projected to width `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptOutput {
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Clip,
    LearnedPrompt,
    T2i,
    I2t,
    Gated,
}

/// `N×N_cls` class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Array2<f64>,
    pub kind: ScoreKind,
}

impl ScoreMatrix {
    /// Top-1 class per row. Ties resolve to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.values
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Frozen weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub blocks: Vec<Block>,
    /// `D×C` output projection.
    pub proj: Array2<f64>,
}

/// Frozen dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub width: usize,
    pub embed_width: usize,
    pub seed: u64,
    pub vision: Branch,
    pub text: Branch,
    pub sos: Array1<f64>,
    pub eos: Array1<f64>,
}

// Scales of the seeded weights. Value/output maps are identity-dominant so a
// block mostly mixes content across positions instead of scrambling it.
const QK_STD: f64 = 1.0;
const VALUE_NOISE: f64 = 0.3;
const ATTN_GAIN: f64 = 0.5;
const MLP_STD: f64 = 0.3;
const PROJ_SHARED_STD: f64 = 1.0;
const PROJ_BRANCH_NOISE: f64 = 0.15;
const SPECIAL_TOKEN_STD: f64 = 0.2;
const WORD_STD: f64 = 0.2;

impl Backbone {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, c) = (cfg.width, cfg.embed_width);
        let sd = (d as f64).sqrt();
        let mut shared_rng = seed::rng(cfg.seed, "backbone/proj");
        let shared = seed::normal_matrix(&mut shared_rng, d, c, PROJ_SHARED_STD / sd);

        let make_branch = |name: &str| {
            let mut rng = seed::rng(cfg.seed, &format!("backbone/{name}"));
            let eye = Array2::<f64>::eye(d);
            let blocks = (0..cfg.depth)
                .map(|_| Block {
                    wq: seed::normal_matrix(&mut rng, d, d, QK_STD / sd),
                    wk: seed::normal_matrix(&mut rng, d, d, QK_STD / sd),
                    wv: &eye + &seed::normal_matrix(&mut rng, d, d, VALUE_NOISE / sd),
                    wo: &eye * ATTN_GAIN + seed::normal_matrix(&mut rng, d, d, VALUE_NOISE / sd),
                    w1: seed::normal_matrix(&mut rng, d, 2 * d, MLP_STD / sd),
                    w2: seed::normal_matrix(&mut rng, 2 * d, d, MLP_STD / (2.0 * d as f64).sqrt()),
                })
                .collect();
            let proj = &shared + &seed::normal_matrix(&mut rng, d, c, PROJ_BRANCH_NOISE / sd);
            Branch { blocks, proj }
        };
        let vision = make_branch("vision");
        let text = make_branch("text");
        let mut rng = seed::rng(cfg.seed, "backbone/special");
        let sos = Array1::from(seed::normal_vec(&mut rng, d, SPECIAL_TOKEN_STD));
        let eos = Array1::from(seed::normal_vec(&mut rng, d, SPECIAL_TOKEN_STD));
        Ok(Self {
            width: d,
            embed_width: c,
            seed: cfg.seed,
            vision,
            text,
            sos,
            eos,
        })
    }

    pub fn depth(&self) -> usize {
        self.vision.blocks.len()
    }

    /// Deterministic embedding of a generic word in token space, at `f32`
    /// precision.
    pub fn word_embedding(&self, word: &str) -> Array1<f64> {
        let mut rng = seed::rng(self.seed, &format!("word/{word}"));
        seed::normal_vec(&mut rng, self.width, WORD_STD)
            .into_iter()
            .map(|v| v as f32 as f64)
            .collect()
    }

    /// SHA-256 over every frozen weight, in a fixed order.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut feed = |m: &[f64]| {
            for v in m {
                h.update(v.to_le_bytes());
            }
        };
        for branch in [&self.vision, &self.text] {
            for b in &branch.blocks {
                for w in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                    feed(w.as_slice().expect("standard layout"));
                }
            }
            feed(branch.proj.as_slice().expect("standard layout"));
        }
        feed(self.sos.as_slice().expect("standard layout"));
        feed(self.eos.as_slice().expect("standard layout"));
        h.finalize().into()
    }

    /// Insert every frozen weight into `g` as a constant.
    pub fn load(&self, g: &mut Graph) -> BackboneVars {
        let load_branch = |g: &mut Graph, b: &Branch| BranchVars {
            blocks: b
                .blocks
                .iter()
                .map(|blk| BlockVars {
                    wq: g.constant(blk.wq.clone()),
                    wk: g.constant(blk.wk.clone()),
                    wv: g.constant(blk.wv.clone()),
                    wo: g.constant(blk.wo.clone()),
                    w1: g.constant(blk.w1.clone()),
                    w2: g.constant(blk.w2.clone()),
                })
                .collect(),
            proj: g.constant(b.proj.clone()),
        };
        BackboneVars {
            vision: load_branch(g, &self.vision),
            text: load_branch(g, &self.text),
            width: self.width,
            embed_width: self.embed_width,
            sos: self.sos.clone(),
            eos: self.eos.clone(),
        }
    }

    pub fn encode_image(
        &self,
        seq: &VisualTokenSequence,
        prompts: &PromptSet,
    ) -> Result<(EncodedFeature, PromptOutput)> {
        self.encode_images(std::slice::from_ref(seq), prompts)
    }

    pub fn encode_images(
        &self,
        seqs: &[VisualTokenSequence],
        prompts: &PromptSet,
    ) -> Result<(EncodedFeature, PromptOutput)> {
        prompts.validate(self.width)?;
        let mut g = Graph::new();
        let bb = self.load(&mut g);
        let pv: Vec<Var> = prompts.visual.iter().map(|p| g.constant(p.clone())).collect();
        let refs: Vec<&VisualTokenSequence> = seqs.iter().collect();
        let enc = encode_images_graph(&mut g, &bb, &refs, &pv)?;
        let q = match enc.prompt_output {
            Some(q) => g.value(q).clone(),
            None => Array2::zeros((seqs.len(), self.embed_width)),
        };
        Ok((
            EncodedFeature {
                values: g.value(enc.features).clone(),
                modality: FeatureModality::Vision,
            },
            PromptOutput { values: q },
        ))
    }

    pub fn encode_text(
        &self,
        seqs: &[TextualTokenSequence],
        prompts: &PromptSet,
        pool: TextPool,
    ) -> Result<(EncodedFeature, PromptOutput)> {
        prompts.validate(self.width)?;
        let mut g = Graph::new();
        let bb = self.load(&mut g);
        let pt: Vec<Var> = prompts.textual.iter().map(|p| g.constant(p.clone())).collect();
        let refs: Vec<&TextualTokenSequence> = seqs.iter().collect();
        let enc = encode_text_graph(&mut g, &bb, &refs, &pt)?;
        let feat = match pool {
            TextPool::Eos => enc.eos,
            TextPool::Sos => enc.sos,
        };
        let q = match enc.prompt_output {
            Some(q) => g.value(q).clone(),
            None => Array2::zeros((seqs.len(), self.embed_width)),
        };
        Ok((
            EncodedFeature {
                values: g.value(feat).clone(),
                modality: FeatureModality::Text,
            },
            PromptOutput { values: q },
        ))
    }
}

pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub w2: Var,
}

pub struct BranchVars {
    pub blocks: Vec<BlockVars>,
    pub proj: Var,
}

/// Backbone weights inside a [`Graph`].
pub struct BackboneVars {
    pub vision: BranchVars,
    pub text: BranchVars,
    pub width: usize,
    pub embed_width: usize,
    sos: Array1<f64>,
    eos: Array1<f64>,
}

impl BackboneVars {
    /// Every frozen weight node, for asserting that none receives a gradient.
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for branch in [&self.vision, &self.text] {
            for b in &branch.blocks {
                out.extend([b.wq, b.wk, b.wv, b.wo, b.w1, b.w2]);
            }
            out.push(branch.proj);
        }
        out
    }
}

pub struct ImageEncoding {
    /// `N×C` pooled patch features after the last block.
    pub features: Var,
    /// `N×C` pooled prompt-position outputs; `None` without prompt slots.
    pub prompt_output: Option<Var>,
    /// `N×C` pooled patch features after each block.
    pub layer_features: Vec<Var>,
}

pub struct TextEncoding {
    pub eos: Var,
    pub sos: Var,
    pub prompt_output: Option<Var>,
}

fn block_forward(g: &mut Graph, blk: &BlockVars, h: Var, mask: &Array2<bool>, width: usize) -> Var {
    let q = g.matmul(h, blk.wq);
    let k = g.matmul(h, blk.wk);
    let v = g.matmul(h, blk.wv);
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = g.scale(logits, 1.0 / (width as f64).sqrt());
    let attn = g.masked_softmax(logits, mask);
    let mixed = g.matmul(attn, v);
    let out = g.matmul(mixed, blk.wo);
    let h1 = g.add(h, out);
    let hid = g.matmul(h1, blk.w1);
    let hid = g.tanh(hid);
    let m = g.matmul(hid, blk.w2);
    g.add(h1, m)
}

fn check_prompt_vars(g: &Graph, prompts: &[Var], width: usize, depth: usize) -> Result<usize> {
    if prompts.len() > depth {
        return Err(config_err(format!(
            "prompt depth {} exceeds encoder depth {depth}",
            prompts.len()
        )));
    }
    let n_ctx = prompts.first().map_or(0, |&p| g.shape(p).0);
    for &p in prompts {
        let (r, c) = g.shape(p);
        if r != n_ctx || c != width {
            return Err(config_err("prompt shape mismatch"));
        }
    }
    Ok(n_ctx)
}

/// Encode a batch of images inside `g`; `prompts` holds one `N_ctx×D` node per
/// prompted layer.
pub fn encode_images_graph(
    g: &mut Graph,
    bb: &BackboneVars,
    seqs: &[&VisualTokenSequence],
    prompts: &[Var],
) -> Result<ImageEncoding> {
    if seqs.is_empty() {
        return Err(invalid("empty image batch"));
    }
    let d = bb.width;
    let depth = bb.vision.blocks.len();
    let n_ctx = check_prompt_vars(g, prompts, d, depth)?;
    let slots = if prompts.is_empty() { 0 } else { n_ctx };

    let total: usize = seqs.iter().map(|s| slots + s.tokens.nrows()).sum();
    let mut base = Array2::zeros((total, d));
    let mut mask = Array2::from_elem((total, total), false);
    let mut prompt_map = Vec::new();
    let mut patch_groups = Vec::new();
    let mut prompt_groups = Vec::new();
    let mut offset = 0;
    for s in seqs {
        if s.tokens.ncols() != d {
            return Err(config_err(format!(
                "visual token width {} does not match encoder width {d}",
                s.tokens.ncols()
            )));
        }
        let len = slots + s.tokens.nrows();
        for k in 0..slots {
            prompt_map.push((offset + k, k));
        }
        prompt_groups.push((offset..offset + slots).collect::<Vec<_>>());
        patch_groups.push((offset + slots..offset + len).collect::<Vec<_>>());
        base.slice_mut(ndarray::s![offset + slots..offset + len, ..])
            .assign(&s.tokens);
        mask.slice_mut(ndarray::s![offset..offset + len, offset..offset + len])
            .fill(true);
        offset += len;
    }
    let prompt_map = Rc::new(prompt_map);
    let patch_groups = Rc::new(patch_groups);

    let mut h = g.constant(base);
    let mut layer_features = Vec::with_capacity(depth);
    for (j, blk) in bb.vision.blocks.iter().enumerate() {
        if let Some(&p) = prompts.get(j) {
            h = g.replace_rows(h, p, prompt_map.clone());
        }
        h = block_forward(g, blk, h, &mask, d);
        let pooled = g.pool_rows(h, patch_groups.clone());
        layer_features.push(g.matmul(pooled, bb.vision.proj));
    }
    let features = match layer_features.last() {
        Some(&f) => f,
        None => {
            let pooled = g.pool_rows(h, patch_groups.clone());
            g.matmul(pooled, bb.vision.proj)
        }
    };
    let prompt_output = (slots > 0).then(|| {
        let pooled = g.pool_rows(h, Rc::new(prompt_groups));
        g.matmul(pooled, bb.vision.proj)
    });
    Ok(ImageEncoding {
        features,
        prompt_output,
        layer_features,
    })
}

/// Encode one sequence per class inside `g`. Rows are laid out as
/// `[SOS; name tokens; prompts; EOS]` under a causal mask, so prompt outputs
/// see the class name.
pub fn encode_text_graph(
    g: &mut Graph,
    bb: &BackboneVars,
    seqs: &[&TextualTokenSequence],
    prompts: &[Var],
) -> Result<TextEncoding> {
    if seqs.is_empty() {
        return Err(invalid("empty class list"));
    }
    let d = bb.width;
    let depth = bb.text.blocks.len();
    let n_ctx = check_prompt_vars(g, prompts, d, depth)?;
    let slots = if prompts.is_empty() { 0 } else { n_ctx };

    let total: usize = seqs.iter().map(|s| slots + s.tokens.nrows() + 2).sum();
    let mut base = Array2::zeros((total, d));
    let mut mask = Array2::from_elem((total, total), false);
    let mut prompt_map = Vec::new();
    let mut prompt_groups = Vec::new();
    let mut sos_rows = Vec::new();
    let mut eos_rows = Vec::new();
    let mut offset = 0;
    for s in seqs {
        if s.tokens.ncols() != d {
            return Err(config_err(format!(
                "textual token width {} does not match encoder width {d}",
                s.tokens.ncols()
            )));
        }
        let len = slots + s.tokens.nrows() + 2;
        let names = s.tokens.nrows();
        base.row_mut(offset).assign(&bb.sos);
        base.slice_mut(ndarray::s![offset + 1..offset + 1 + names, ..])
            .assign(&s.tokens);
        let first_prompt = offset + 1 + names;
        for k in 0..slots {
            prompt_map.push((first_prompt + k, k));
        }
        prompt_groups.push((first_prompt..first_prompt + slots).collect::<Vec<_>>());
        base.row_mut(offset + len - 1).assign(&bb.eos);
        for r in 0..len {
            for c in 0..=r {
                mask[[offset + r, offset + c]] = true;
            }
        }
        sos_rows.push(vec![offset]);
        eos_rows.push(vec![offset + len - 1]);
        offset += len;
    }
    let prompt_map = Rc::new(prompt_map);

    let mut h = g.constant(base);
    for (j, blk) in bb.text.blocks.iter().enumerate() {
        if let Some(&p) = prompts.get(j) {
            h = g.replace_rows(h, p, prompt_map.clone());
        }
        h = block_forward(g, blk, h, &mask, d);
    }
    let eos = g.pool_rows(h, Rc::new(eos_rows));
    let eos = g.matmul(eos, bb.text.proj);
    let sos = g.pool_rows(h, Rc::new(sos_rows));
    let sos = g.matmul(sos, bb.text.proj);
    let prompt_output = (slots > 0).then(|| {
        let pooled = g.pool_rows(h, Rc::new(prompt_groups));
        g.matmul(pooled, bb.text.proj)
    });
    Ok(TextEncoding {
        eos,
        sos,
        prompt_output,
    })
}

/// `scale · cos(a_n, b_c)` as a graph node.
pub fn cosine_scores_graph(g: &mut Graph, a: Var, b: Var, scale: f64) -> Result<Var> {
    let an = g.normalize_rows(a)?;
    let bn = g.normalize_rows(b)?;
    let bt = g.transpose(bn);
    let s = g.matmul(an, bt);
    Ok(if scale == 1.0 { s } else { g.scale(s, scale) })
}

pub(crate) fn cosine_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(invalid(format!(
            "feature widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let normed = |m: &Array2<f64>, side: &str| -> Result<Array2<f64>> {
        let mut out = m.clone();
        for (r, mut row) in out.outer_iter_mut().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numerical(format!("{side} row {r} has norm {n}")));
            }
            row.mapv_inplace(|v| v / n);
        }
        Ok(out)
    };
    let an = normed(a, "left")?;
    let bn = normed(b, "right")?;
    Ok(an.dot(&bn.t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

/// `cos(V_n, T_c) / temperature`.
pub fn clip_scores(v: &EncodedFeature, t: &EncodedFeature, temperature: f64) -> Result<ScoreMatrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(config_err("temperature must be positive"));
    }
    let cos = cosine_matrix(&v.values, &t.values)?;
    Ok(ScoreMatrix {
        values: cos / temperature,
        kind: ScoreKind::Clip,
    })
}

/// `cos(Q_V_n, Q_T_c)`.
pub fn learned_prompt_scores(qv: &PromptOutput, qt: &PromptOutput) -> Result<ScoreMatrix> {
    Ok(ScoreMatrix {
        values: cosine_matrix(&qv.values, &qt.values)?,
        kind: ScoreKind::LearnedPrompt,
    })
}

/// Initial prompts: first-layer textual prompts start from the embeddings of
/// "a photo of a"; everything else is drawn from `N(0, prompt_init_std²)`.
/// Values are stored at `f32` precision from the start.
pub fn init_prompts(cfg: &ModelConfig, backbone: &Backbone) -> Result<PromptSet> {
    cfg.validate()?;
    if cfg.n_ctx < INIT_PHRASE.len() {
        return Err(config_err(format!(
            "n_ctx {} is smaller than the {}-token init phrase",
            cfg.n_ctx,
            INIT_PHRASE.len()
        )));
    }
    let d = cfg.width;
    let mut visual = Vec::with_capacity(cfg.prompt_depth);
    let mut textual = Vec::with_capacity(cfg.prompt_depth);
    for j in 0..cfg.prompt_depth {
        let mut rng = seed::rng(cfg.prompt_seed, &format!("prompt/visual/{j}"));
        visual.push(seed::normal_matrix(&mut rng, cfg.n_ctx, d, cfg.prompt_init_std));
        let mut rng = seed::rng(cfg.prompt_seed, &format!("prompt/textual/{j}"));
        let mut t = seed::normal_matrix(&mut rng, cfg.n_ctx, d, cfg.prompt_init_std);
        if j == 0 {
            for (k, word) in INIT_PHRASE.iter().enumerate() {
                t.row_mut(k).assign(&backbone.word_embedding(word));
            }
        }
        textual.push(t);
    }
    let mut set = PromptSet { visual, textual };
    set.round_to_f32();
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            width: 8,
            embed_width: 6,
            ..ModelConfig::default()
        }
    }

    fn seq(seed: u64, rows: usize, width: usize) -> Array2<f64> {
        let mut rng = seed::rng(seed, "test/tokens");
        seed::normal_matrix(&mut rng, rows, width, 1.0)
    }

    #[test]
    fn identity_encoder_pools_then_projects() {
        let cfg = ModelConfig {
            depth: 0,
            prompt_depth: 0,
            ..small_cfg()
        };
        let bb = Backbone::new(&cfg).unwrap();
        let tokens = seq(3, 5, 8);
        let s = VisualTokenSequence::new(tokens.clone(), 0).unwrap();
        let (v, _) = bb.encode_image(&s, &PromptSet::empty()).unwrap();
        let mean = tokens.mean_axis(ndarray::Axis(0)).unwrap();
        let expected = mean.dot(&bb.vision.proj);
        for (a, b) in v.values.row(0).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prompts_change_prompt_outputs() {
        let cfg = small_cfg();
        let bb = Backbone::new(&cfg).unwrap();
        let s = VisualTokenSequence::new(seq(1, 4, 8), 9).unwrap();
        let p1 = init_prompts(&ModelConfig { prompt_seed: 1, prompt_init_std: 1.0, ..cfg.clone() }, &bb).unwrap();
        let p2 = init_prompts(&ModelConfig { prompt_seed: 2, prompt_init_std: 1.0, ..cfg }, &bb).unwrap();
        let (_, q1) = bb.encode_image(&s, &p1).unwrap();
        let (_, q2) = bb.encode_image(&s, &p2).unwrap();
        assert_ne!(q1.values, q2.values);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let bb = Backbone::new(&small_cfg()).unwrap();
        let s = VisualTokenSequence::new(seq(1, 4, 5), 0).unwrap();
        assert!(matches!(bb.encode_image(&s, &PromptSet::empty()), Err(Error::Config(_))));
    }

    #[test]
    fn text_pooling_modes_and_single_class() {
        let cfg = small_cfg();
        let bb = Backbone::new(&cfg).unwrap();
        let prompts = init_prompts(&cfg, &bb).unwrap();
        let t = TextualTokenSequence::new(seq(5, 2, 8), 0).unwrap();
        let (eos, _) = bb.encode_text(std::slice::from_ref(&t), &prompts, TextPool::Eos).unwrap();
        let (sos, _) = bb.encode_text(std::slice::from_ref(&t), &prompts, TextPool::Sos).unwrap();
        assert_eq!(eos.values.nrows(), 1);
        assert_ne!(eos.values, sos.values);
        assert!(matches!(bb.encode_text(&[], &prompts, TextPool::Eos), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn clip_score_edge_cases() {
        let v = EncodedFeature { values: array![[1.0, 0.0]], modality: FeatureModality::Vision };
        let t = EncodedFeature { values: array![[1.0, 0.0], [0.0, 1.0]], modality: FeatureModality::Text };
        let s = clip_scores(&v, &t, 1.0).unwrap();
        assert!((s.values[[0, 0]] - 1.0).abs() < 1e-15);
        assert!(s.values[[0, 1]].abs() < 1e-15);
        let z = EncodedFeature { values: array![[0.0, 0.0]], modality: FeatureModality::Vision };
        assert!(matches!(clip_scores(&z, &t, 1.0), Err(Error::Numerical(_))));
        let qv = PromptOutput { values: array![[0.3, -0.4]] };
        let qt = PromptOutput { values: array![[0.3, -0.4], [-0.6, 0.8]] };
        let sp = learned_prompt_scores(&qv, &qt).unwrap();
        assert!((sp.values[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((sp.values[[0, 1]] + 1.0).abs() < 1e-12);
        assert_eq!(sp.kind, ScoreKind::LearnedPrompt);
    }

    #[test]
    fn init_prompts_phrase_and_seeds() {
        let cfg = small_cfg();
        let bb = Backbone::new(&cfg).unwrap();
        let p = init_prompts(&cfg, &bb).unwrap();
        for (k, w) in INIT_PHRASE.iter().enumerate() {
            assert_eq!(p.textual[0].row(k), bb.word_embedding(w));
        }
        assert_eq!(p, init_prompts(&cfg, &bb).unwrap());
        let other = init_prompts(&ModelConfig { prompt_seed: 99, ..cfg.clone() }, &bb).unwrap();
        assert_ne!(p.visual[1], other.visual[1]);
        assert_ne!(p.textual[1], other.textual[1]);
        let short = ModelConfig { n_ctx: 3, ..cfg };
        assert!(matches!(init_prompts(&short, &bb), Err(Error::Config(_))));
    }

    #[test]
    fn prompt_depth_beyond_encoder_is_rejected() {
        let cfg = ModelConfig { prompt_depth: 3, ..small_cfg() };
        assert!(matches!(Backbone::new(&cfg), Err(Error::Config(_))));
    }
}
