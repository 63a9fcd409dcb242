//! Teacher agents and knowledge extraction.
//!
//! Agents are frozen and stateless: every extraction is a pure function of
//! the agent descriptor, the world it was built against and the input. All
//! outputs are rounded to `f32` so that a cached copy is bit-identical to a
//! live one.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Error, Result};
use crate::model::{cosine_matrix, EncodedFeature, FeatureModality, ScoreKind, ScoreMatrix, VisualTokenSequence};
use crate::seed;
use crate::world::SyntheticWorld;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentModality {
    Vision,
    Language,
    T2i,
    I2t,
}

impl AgentModality {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentModality::Vision => "vision",
            AgentModality::Language => "language",
            AgentModality::T2i => "t2i",
            AgentModality::I2t => "i2t",
        }
    }
}

/// How a synthetic agent computes its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Seeded random linear view of the (optionally de-styled) input.
    #[default]
    Synthetic,
    /// Every feature equals `value`.
    Constant,
    /// Vision only: layer `l` is the running mean of the first patches.
    MeanPatch,
}

fn one() -> f64 {
    1.0
}

fn three() -> usize {
    3
}

/// One registry entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDescriptor {
    pub agent_id: String,
    pub modality: AgentModality,
    /// Output feature width `C_a`. Ignored by text-to-image agents.
    pub width: usize,
    /// Number of feature layers (vision only).
    #[serde(default)]
    pub layers: usize,
    pub seed: u64,
    /// Probability-like knob in `[0, 1]`: how much of the ground truth the
    /// agent sees through the dataset's domain shift.
    #[serde(default = "one")]
    pub informativeness: f64,
    /// Norm of per-output seeded noise.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub kind: AgentKind,
    /// Output value of constant agents.
    #[serde(default)]
    pub value: f64,
    /// Multiplier on text-to-image attention values.
    #[serde(default = "one")]
    pub scale: f64,
    /// Descriptions per class (language only).
    #[serde(default = "three")]
    pub descriptions: usize,
}

impl AgentDescriptor {
    /// Fingerprint of everything that influences this agent's outputs.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_string(self).expect("descriptor serializes");
        seed::fnv1a64(json.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AgentRegistry {
    #[serde(rename = "agent", default)]
    pub agents: Vec<AgentDescriptor>,
}

impl FromStr for AgentRegistry {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let reg: AgentRegistry = toml::from_str(s).map_err(|e| config_err(format!("agent registry: {e}")))?;
        reg.validate()?;
        Ok(reg)
    }
}

impl AgentRegistry {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        std::fs::read_to_string(path)?.parse()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("registry serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for a in &self.agents {
            if !seen.insert(a.agent_id.as_str()) {
                return Err(config_err(format!("duplicate agent_id {:?}", a.agent_id)));
            }
            if a.agent_id.is_empty() {
                return Err(config_err("agent_id must not be empty"));
            }
            if a.width == 0 && a.modality != AgentModality::T2i {
                return Err(config_err(format!("agent {} has zero width", a.agent_id)));
            }
            if a.modality == AgentModality::Vision && a.layers == 0 {
                return Err(config_err(format!("vision agent {} needs layers >= 1", a.agent_id)));
            }
            if !(0.0..=1.0).contains(&a.informativeness) || !a.noise.is_finite() || a.noise < 0.0 {
                return Err(config_err(format!("agent {} has invalid informativeness/noise", a.agent_id)));
            }
            if a.modality == AgentModality::Language && a.descriptions == 0 {
                return Err(config_err(format!("language agent {} needs descriptions >= 1", a.agent_id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, agent_id: &str) -> Result<&AgentDescriptor> {
        self.agents
            .iter()
            .find(|a| a.agent_id == agent_id)
            .ok_or_else(|| Error::Lookup(format!("unknown agent_id {agent_id:?}")))
    }

    pub fn by_modality(&self, m: AgentModality) -> impl Iterator<Item = &AgentDescriptor> {
        self.agents.iter().filter(move |a| a.modality == m)
    }

    /// Three agents per modality group, one of them a noisy distractor.
    pub fn default_roster() -> Self {
        let agent = |id: &str, modality, width, layers, seed, informativeness, noise| AgentDescriptor {
            agent_id: id.to_string(),
            modality,
            width,
            layers,
            seed,
            informativeness,
            noise,
            kind: AgentKind::Synthetic,
            value: 0.0,
            scale: if modality == AgentModality::T2i { 4.0 } else { 1.0 },
            descriptions: 3,
        };
        use AgentModality::*;
        Self {
            agents: vec![
                agent("vision-mim", Vision, 32, 4, 11, 1.0, 0.1),
                agent("vision-dense", Vision, 48, 3, 12, 1.0, 0.2),
                agent("vision-noisy", Vision, 24, 2, 13, 0.0, 3.0),
                agent("language-chat-a", Language, 32, 0, 21, 1.0, 0.1),
                agent("language-chat-b", Language, 40, 0, 22, 0.9, 0.2),
                agent("language-noisy", Language, 24, 0, 23, 0.0, 1.0),
                agent("t2i-unet", T2i, 0, 0, 31, 1.0, 0.1),
                agent("i2t-caption", I2t, 32, 0, 41, 1.0, 0.1),
                agent("i2t-noisy", I2t, 16, 0, 42, 0.0, 3.0),
            ],
        }
    }
}

/// Teacher output for one agent.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentFeatures {
    /// One `N×C_a` matrix per agent layer.
    PerLayer(Vec<Array2<f64>>),
    /// `N_cls×C_a`.
    Class(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentFeatureBundle {
    pub agent_id: String,
    pub features: AgentFeatures,
}

/// Per-class cross-attention values over `K` spatial tokens for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionMap {
    /// `N_cls×K`.
    pub values: Array2<f64>,
    pub sample_id: u64,
}

/// Pre-collected chatbot answers, one list per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDescriptionSet {
    pub agent_id: String,
    pub descriptions: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct DescriptionRecord {
    class_id: usize,
    descriptions: Vec<String>,
}

impl ClassDescriptionSet {
    /// One JSON record per line: `{"class_id": .., "descriptions": [..]}`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (class_id, d) in self.descriptions.iter().enumerate() {
            let rec = DescriptionRecord {
                class_id,
                descriptions: d.clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn read_jsonl(agent_id: &str, path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut recs = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DescriptionRecord =
                serde_json::from_str(&line).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
            recs.push(rec);
        }
        recs.sort_by_key(|r| r.class_id);
        let n = recs.last().map_or(0, |r| r.class_id + 1);
        let mut descriptions = vec![Vec::new(); n];
        for r in recs {
            descriptions[r.class_id] = r.descriptions;
        }
        Ok(Self {
            agent_id: agent_id.to_string(),
            descriptions,
        })
    }
}

/// Maps one description to a feature vector.
pub trait TextEncoder {
    fn width(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Array1<f64>>;
}

/// Random linear view of the mean world-vocabulary vector of the words.
pub struct SyntheticTextEncoder {
    mapping: Array2<f64>,
    world: Arc<SyntheticWorld>,
}

impl SyntheticTextEncoder {
    pub fn new(world: Arc<SyntheticWorld>, width: usize, seed: u64) -> Self {
        let d = world.config.token_width;
        let mut rng = seed::rng(seed, "text-encoder/mapping");
        let mapping = seed::normal_matrix(&mut rng, width, d, 1.0 / (d as f64).sqrt());
        Self { mapping, world }
    }
}

impl TextEncoder for SyntheticTextEncoder {
    fn width(&self) -> usize {
        self.mapping.nrows()
    }

    fn encode(&self, text: &str) -> Result<Array1<f64>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(invalid("empty description"));
        }
        let mut acc = Array1::zeros(self.world.config.token_width);
        for w in &words {
            acc += &self.world.resolve_word(w);
        }
        acc /= words.len() as f64;
        Ok(self.mapping.dot(&acc))
    }
}

/// Class features from descriptions: every description is encoded and the
/// encodings of a class are mean-pooled.
pub fn extract_language_features(
    descs: &ClassDescriptionSet,
    encoder: &dyn TextEncoder,
) -> Result<AgentFeatureBundle> {
    if descs.descriptions.is_empty() {
        return Err(invalid("description set has no classes"));
    }
    let mut out = Array2::zeros((descs.descriptions.len(), encoder.width()));
    for (c, texts) in descs.descriptions.iter().enumerate() {
        if texts.is_empty() {
            return Err(invalid(format!("class {c} has no description")));
        }
        let mut acc = Array1::zeros(encoder.width());
        for t in texts {
            acc += &encoder.encode(t)?;
        }
        out.row_mut(c).assign(&(acc / texts.len() as f64));
    }
    seed::round_f32(&mut out);
    Ok(AgentFeatureBundle {
        agent_id: descs.agent_id.clone(),
        features: AgentFeatures::Class(out),
    })
}

/// Spatial pooling applied to cross-attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    LogSumExp,
    Average,
    Max,
}
crate::losses::string_enum!(Pooling, "agents.t2i_pooling", {
    LogSumExp => "logsumexp", Average => "average", Max => "max"
});

pub fn pool(values: &[f64], mode: Pooling) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("empty token axis"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(match mode {
        Pooling::Max => max,
        Pooling::Average => values.iter().sum::<f64>() / values.len() as f64,
        Pooling::LogSumExp => max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln(),
    })
}

/// Text-to-image scores: row `n` is image `maps[n]`, column `c` pools that
/// image's map for class `c`.
pub fn t2i_scores(maps: &[CrossAttentionMap], mode: Pooling) -> Result<ScoreMatrix> {
    let first = maps.first().ok_or_else(|| invalid("no attention maps"))?;
    let n_cls = first.values.nrows();
    let mut out = Array2::zeros((maps.len(), n_cls));
    for (n, m) in maps.iter().enumerate() {
        if m.values.nrows() != n_cls {
            return Err(invalid(format!("sample {} has {} classes, expected {n_cls}", m.sample_id, m.values.nrows())));
        }
        for c in 0..n_cls {
            let row = m.values.row(c);
            out[[n, c]] = pool(row.as_slice().expect("standard layout"), mode)?;
        }
    }
    Ok(ScoreMatrix {
        values: out,
        kind: ScoreKind::T2i,
    })
}

/// Image-to-text scores: cosine between projected visual features and the
/// agent's class text features.
pub fn i2t_scores(projected: &EncodedFeature, class_text: &EncodedFeature) -> Result<ScoreMatrix> {
    Ok(ScoreMatrix {
        values: cosine_matrix(&projected.values, &class_text.values)?,
        kind: ScoreKind::I2t,
    })
}

/// A concrete agent bound to a world.
#[derive(Debug, Clone)]
pub struct Agent {
    pub descriptor: AgentDescriptor,
    world: Arc<SyntheticWorld>,
    mapping: Array2<f64>,
}

impl Agent {
    pub fn new(descriptor: AgentDescriptor, world: Arc<SyntheticWorld>) -> Result<Self> {
        let d = world.config.token_width;
        if descriptor.kind == AgentKind::MeanPatch && descriptor.width != d {
            return Err(config_err(format!(
                "mean-patch agent {} must have width {d}",
                descriptor.agent_id
            )));
        }
        let width = descriptor.width.max(1);
        let mut rng = seed::rng(descriptor.seed, &format!("agent/{}/mapping", descriptor.agent_id));
        let mapping = seed::normal_matrix(&mut rng, width, d, 1.0 / (d as f64).sqrt());
        Ok(Self {
            descriptor,
            world,
            mapping,
        })
    }

    pub fn id(&self) -> &str {
        &self.descriptor.agent_id
    }

    fn expect(&self, m: AgentModality) -> Result<()> {
        if self.descriptor.modality != m {
            return Err(invalid(format!(
                "agent {} is {}, not {}",
                self.id(),
                self.descriptor.modality.as_str(),
                m.as_str()
            )));
        }
        Ok(())
    }

    fn noise(&self, len: usize, label: &str) -> Array1<f64> {
        let mut rng = seed::rng(self.descriptor.seed, &format!("agent/{}/noise/{label}", self.id()));
        Array1::from(seed::normal_vec(&mut rng, len, self.descriptor.noise / (len as f64).sqrt()))
    }

    /// Token-space signal the agent sees: the input with `informativeness`
    /// of the domain style removed.
    fn destyle(&self, v: &Array1<f64>) -> Array1<f64> {
        v - &(&self.world.style * self.descriptor.informativeness)
    }

    /// `layers×C_a` feature stack of one image.
    pub fn vision_stack(&self, image: &VisualTokenSequence) -> Result<Array2<f64>> {
        self.expect(AgentModality::Vision)?;
        let desc = &self.descriptor;
        let patches = image.tokens.nrows();
        let mut out = Array2::zeros((desc.layers, desc.width));
        for l in 0..desc.layers {
            let take = ((l + 1) * patches).div_ceil(desc.layers).clamp(1, patches);
            let running = image
                .tokens
                .slice(ndarray::s![..take, ..])
                .mean_axis(Axis(0))
                .expect("non-empty");
            let row = match desc.kind {
                AgentKind::Constant => Array1::from_elem(desc.width, desc.value),
                AgentKind::MeanPatch => running,
                AgentKind::Synthetic => {
                    self.mapping.dot(&self.destyle(&running))
                        + self.noise(desc.width, &format!("{}/{l}", image.sample_id))
                }
            };
            out.row_mut(l).assign(&row);
        }
        seed::round_f32(&mut out);
        Ok(out)
    }

    /// Per-class features from this language agent's descriptions.
    pub fn class_features(&self, descs: &ClassDescriptionSet) -> Result<Array2<f64>> {
        self.expect(AgentModality::Language)?;
        if self.descriptor.kind == AgentKind::Constant {
            return Ok(Array2::from_elem((descs.descriptions.len(), self.descriptor.width), self.descriptor.value));
        }
        let encoder = SyntheticTextEncoder::new(self.world.clone(), self.descriptor.width, self.descriptor.seed);
        match extract_language_features(descs, &encoder)?.features {
            AgentFeatures::Class(m) => Ok(m),
            AgentFeatures::PerLayer(_) => unreachable!(),
        }
    }

    /// Descriptions this language agent would produce for the world.
    pub fn describe(&self) -> Result<ClassDescriptionSet> {
        self.expect(AgentModality::Language)?;
        let d = &self.descriptor;
        Ok(ClassDescriptionSet {
            agent_id: d.agent_id.clone(),
            descriptions: self.world.describe_classes(d.seed, d.informativeness, d.noise, d.descriptions),
        })
    }

    /// `N_cls×K` cross-attention of one image against every class template.
    pub fn attention_map(&self, image: &VisualTokenSequence) -> Result<CrossAttentionMap> {
        self.expect(AgentModality::T2i)?;
        let desc = &self.descriptor;
        let n_cls = self.world.config.num_classes;
        let k = image.tokens.nrows();
        let mut values = Array2::zeros((n_cls, k));
        if desc.kind == AgentKind::Constant {
            values.fill(desc.value);
        } else {
            let patches: Vec<Array1<f64>> = image.tokens.outer_iter().map(|p| self.destyle(&p.to_owned())).collect();
            for c in 0..n_cls {
                let content = self.world.class_content(c);
                let cn = content.dot(&content).sqrt().max(1e-12);
                let noise = self.noise(k, &format!("{}/{c}", image.sample_id));
                for (t, p) in patches.iter().enumerate() {
                    let pn = p.dot(p).sqrt().max(1e-12);
                    values[[c, t]] = desc.scale * p.dot(&content) / (pn * cn) + noise[t];
                }
            }
        }
        seed::round_f32(&mut values);
        Ok(CrossAttentionMap {
            values,
            sample_id: image.sample_id,
        })
    }

    /// Visual features after the agent's projection module, `N×C_a`.
    pub fn project_visual(&self, images: &[VisualTokenSequence]) -> Result<EncodedFeature> {
        self.expect(AgentModality::I2t)?;
        let w = self.descriptor.width;
        let mut out = Array2::zeros((images.len(), w));
        for (n, img) in images.iter().enumerate() {
            let mean = img.tokens.mean_axis(Axis(0)).expect("non-empty");
            let row = match self.descriptor.kind {
                AgentKind::Constant => Array1::from_elem(w, self.descriptor.value),
                _ => self.mapping.dot(&self.destyle(&mean)) + self.noise(w, &format!("{}/visual", img.sample_id)),
            };
            out.row_mut(n).assign(&row);
        }
        seed::round_f32(&mut out);
        Ok(EncodedFeature {
            values: out,
            modality: FeatureModality::Vision,
        })
    }

    /// Class text features from the agent's language model, `N_cls×C_a`.
    pub fn class_text(&self) -> Result<EncodedFeature> {
        self.expect(AgentModality::I2t)?;
        let w = self.descriptor.width;
        let n_cls = self.world.config.num_classes;
        let mut out = Array2::zeros((n_cls, w));
        for c in 0..n_cls {
            let row = match self.descriptor.kind {
                AgentKind::Constant => Array1::from_elem(w, self.descriptor.value),
                _ => self.mapping.dot(&self.world.class_content(c)) + self.noise(w, &format!("class/{c}")),
            };
            out.row_mut(c).assign(&row);
        }
        seed::round_f32(&mut out);
        Ok(EncodedFeature {
            values: out,
            modality: FeatureModality::Text,
        })
    }

    /// `N_cls` image-to-text scores of one image.
    pub fn i2t_vector(&self, image: &VisualTokenSequence) -> Result<Array1<f64>> {
        let v = self.project_visual(std::slice::from_ref(image))?;
        let t = self.class_text()?;
        let mut s = i2t_scores(&v, &t)?.values.row(0).to_owned();
        s.mapv_inplace(|x| x as f32 as f64);
        Ok(s)
    }
}

/// All agents of a run, grouped by modality in registry order.
#[derive(Debug, Clone)]
pub struct AgentRoster {
    pub registry: AgentRegistry,
    pub vision: Vec<Agent>,
    pub language: Vec<Agent>,
    pub t2i: Vec<Agent>,
    pub i2t: Vec<Agent>,
    /// Descriptions of each language agent, parallel to `language`.
    pub descriptions: Vec<ClassDescriptionSet>,
}

impl AgentRoster {
    pub fn new(registry: AgentRegistry, world: Arc<SyntheticWorld>) -> Result<Self> {
        registry.validate()?;
        let build = |m| -> Result<Vec<Agent>> {
            registry
                .by_modality(m)
                .map(|d| Agent::new(d.clone(), world.clone()))
                .collect()
        };
        let vision = build(AgentModality::Vision)?;
        let language = build(AgentModality::Language)?;
        let t2i = build(AgentModality::T2i)?;
        let i2t = build(AgentModality::I2t)?;
        let descriptions = language.iter().map(Agent::describe).collect::<Result<_>>()?;
        Ok(Self {
            registry,
            vision,
            language,
            t2i,
            i2t,
            descriptions,
        })
    }

    /// Replace generated descriptions with ones loaded from files.
    pub fn with_descriptions(mut self, sets: Vec<ClassDescriptionSet>) -> Result<Self> {
        for set in sets {
            let idx = self
                .language
                .iter()
                .position(|a| a.id() == set.agent_id)
                .ok_or_else(|| Error::Lookup(format!("no language agent {:?}", set.agent_id)))?;
            self.descriptions[idx] = set;
        }
        Ok(self)
    }

    pub fn find(&self, agent_id: &str) -> Result<&Agent> {
        self.vision
            .iter()
            .chain(&self.language)
            .chain(&self.t2i)
            .chain(&self.i2t)
            .find(|a| a.id() == agent_id)
            .ok_or_else(|| Error::Lookup(format!("unknown agent_id {agent_id:?}")))
    }
}

/// Per-layer features of a batch from the vision agent `agent_id`.
pub fn extract_vision_features(
    roster: &AgentRoster,
    agent_id: &str,
    batch: &[VisualTokenSequence],
) -> Result<AgentFeatureBundle> {
    let agent = roster.find(agent_id)?;
    agent.expect(AgentModality::Vision)?;
    let layers = agent.descriptor.layers;
    let mut per_layer = vec![Array2::zeros((batch.len(), agent.descriptor.width)); layers];
    for (n, img) in batch.iter().enumerate() {
        let stack = agent.vision_stack(img)?;
        for (l, m) in per_layer.iter_mut().enumerate() {
            m.row_mut(n).assign(&stack.row(l));
        }
    }
    Ok(AgentFeatureBundle {
        agent_id: agent_id.to_string(),
        features: AgentFeatures::PerLayer(per_layer),
    })
}

/// Shapes of the agents behind a [`KnowledgeSource`].
#[derive(Debug, Clone, PartialEq)]
pub struct RosterLayout {
    /// `(agent_id, width, layers)`.
    pub vision: Vec<(String, usize, usize)>,
    /// `(agent_id, width)`.
    pub language: Vec<(String, usize)>,
    pub t2i: Vec<String>,
    pub i2t: Vec<String>,
    pub num_classes: usize,
}

/// Where the trainer gets agent knowledge from: live agents or a cache.
/// Indices refer to positions within a modality group of the layout.
pub trait KnowledgeSource: Sync {
    fn layout(&self) -> &RosterLayout;
    fn vision_stack(&self, agent: usize, image: &VisualTokenSequence) -> Result<Array2<f64>>;
    /// `N_cls×C_a` over every class of the dataset.
    fn class_features(&self, agent: usize) -> Result<Array2<f64>>;
    fn attention_map(&self, agent: usize, image: &VisualTokenSequence) -> Result<Array2<f64>>;
    fn i2t_vector(&self, agent: usize, image: &VisualTokenSequence) -> Result<Array1<f64>>;
    /// Fail early if knowledge for any of `images` is unavailable.
    fn check(&self, _images: &[&VisualTokenSequence]) -> Result<()> {
        Ok(())
    }
}

/// Knowledge computed on demand from an [`AgentRoster`].
pub struct LiveKnowledge {
    roster: AgentRoster,
    layout: RosterLayout,
    class_features: Vec<Array2<f64>>,
}

impl LiveKnowledge {
    pub fn new(roster: AgentRoster, num_classes: usize) -> Result<Self> {
        let class_features = roster
            .language
            .iter()
            .zip(&roster.descriptions)
            .map(|(a, d)| a.class_features(d))
            .collect::<Result<Vec<_>>>()?;
        for (a, f) in roster.language.iter().zip(&class_features) {
            if f.nrows() != num_classes {
                return Err(invalid(format!(
                    "agent {} describes {} classes, dataset has {num_classes}",
                    a.id(),
                    f.nrows()
                )));
            }
        }
        let layout = RosterLayout {
            vision: roster
                .vision
                .iter()
                .map(|a| (a.id().to_string(), a.descriptor.width, a.descriptor.layers))
                .collect(),
            language: roster.language.iter().map(|a| (a.id().to_string(), a.descriptor.width)).collect(),
            t2i: roster.t2i.iter().map(|a| a.id().to_string()).collect(),
            i2t: roster.i2t.iter().map(|a| a.id().to_string()).collect(),
            num_classes,
        };
        Ok(Self {
            roster,
            layout,
            class_features,
        })
    }

    pub fn roster(&self) -> &AgentRoster {
        &self.roster
    }
}

impl KnowledgeSource for LiveKnowledge {
    fn layout(&self) -> &RosterLayout {
        &self.layout
    }

    fn vision_stack(&self, agent: usize, image: &VisualTokenSequence) -> Result<Array2<f64>> {
        self.roster.vision[agent].vision_stack(image)
    }

    fn class_features(&self, agent: usize) -> Result<Array2<f64>> {
        Ok(self.class_features[agent].clone())
    }

    fn attention_map(&self, agent: usize, image: &VisualTokenSequence) -> Result<Array2<f64>> {
        Ok(self.roster.t2i[agent].attention_map(image)?.values)
    }

    fn i2t_vector(&self, agent: usize, image: &VisualTokenSequence) -> Result<Array1<f64>> {
        self.roster.i2t[agent].i2t_vector(image)
    }
}
