//! Evaluation protocols: base-to-novel splits, few-shot sampling, accuracy
//! and harmonic mean, multi-seed experiments, ablation tables and gating
//! reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::agents::{AgentRegistry, AgentRoster, ClassDescriptionSet, KnowledgeSource, LiveKnowledge, Pooling};
use crate::cache::{extract_records, write_cache, CacheCoverage, CachedKnowledge};
use crate::error::{config_err, invalid, Error, Result};
use crate::losses::{string_enum, LossWeights, MacLossType, MacSource, VacMode};
use crate::model::{Backbone, ModelConfig, ScoreMatrix, TextPool, VisualTokenSequence};
use crate::seed;
use crate::trainer::{
    export_student, gate_weights, ExportInfo, Fusion, TrainConfig, TrainContext, TrainState, TrainedStudent, Trainer,
};
use crate::world::{ClassInfo, Dataset, Sample, SyntheticWorld, WorldConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitSpec {
    pub dataset_id: String,
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    pub shots: usize,
}

/// Seeded equal partition; the base half gets the extra class when the count
/// is odd.
pub fn base_novel_split(dataset_id: &str, class_ids: &[usize], seed: u64, shots: usize) -> Result<SplitSpec> {
    let unique: BTreeSet<usize> = class_ids.iter().copied().collect();
    if unique.len() != class_ids.len() {
        return Err(invalid("duplicate class id"));
    }
    if class_ids.len() < 2 {
        return Err(invalid("a base/novel split needs at least two classes"));
    }
    let mut ids: Vec<usize> = unique.into_iter().collect();
    ids.shuffle(&mut seed::rng(seed, "split"));
    let n_base = ids.len().div_ceil(2);
    let mut base = ids[..n_base].to_vec();
    let mut novel = ids[n_base..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();
    Ok(SplitSpec {
        dataset_id: dataset_id.to_string(),
        base,
        novel,
        shots,
    })
}

/// Exactly `shots` distinct samples of every class in `classes`, grouped by
/// class in the order given.
pub fn few_shot_sample(samples: &[Sample], classes: &[usize], shots: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(shots * classes.len());
    for &c in classes {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == c).collect();
        if idx.len() < shots {
            return Err(invalid(format!("class {c} has {} samples, {shots} shots requested", idx.len())));
        }
        idx.shuffle(&mut seed::rng(seed, &format!("shots/{c}")));
        let mut chosen = idx[..shots].to_vec();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| samples[i].clone()));
    }
    Ok(out)
}

/// `2ab / (a + b)`.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if !(base > 0.0) || !(novel > 0.0) || !base.is_finite() || !novel.is_finite() {
        return Err(invalid(format!("harmonic mean needs positive inputs, got {base} and {novel}")));
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Top-1 accuracy in percent.
pub fn accuracy(scores: &ScoreMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != scores.values.nrows() || labels.is_empty() {
        return Err(invalid("label count does not match score rows"));
    }
    let hits = scores.argmax().iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
    pub base_std: f64,
    pub novel_std: f64,
    pub hm_std: f64,
    pub seeds: usize,
    pub per_seed: Vec<SeedResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl EvalReport {
    /// Mean and population spread over seeds. HM is computed per seed and
    /// then averaged; a zero accuracy gives HM 0.
    pub fn aggregate(per_seed: Vec<SeedResult>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(invalid("no seeds to aggregate"));
        }
        let col = |f: fn(&SeedResult) -> f64| per_seed.iter().map(f).collect::<Vec<_>>();
        let (base, base_std) = mean_std(&col(|r| r.base));
        let (novel, novel_std) = mean_std(&col(|r| r.novel));
        let (hm, hm_std) = mean_std(&col(|r| r.hm));
        Ok(Self {
            base,
            novel,
            hm,
            base_std,
            novel_std,
            hm_std,
            seeds: per_seed.len(),
            per_seed,
        })
    }
}

fn hm_or_zero(a: f64, b: f64) -> f64 {
    harmonic_mean(a, b).unwrap_or(0.0)
}

fn subset(dataset: &Dataset, ids: &[usize]) -> Vec<ClassInfo> {
    ids.iter().map(|&i| dataset.classes[i].clone()).collect()
}

/// Accuracy on the test samples of `ids`, classified among `ids` only.
fn split_accuracy(student: &TrainedStudent, backbone: &Backbone, dataset: &Dataset, ids: &[usize]) -> Result<f64> {
    let classes = subset(dataset, ids);
    let (images, labels): (Vec<VisualTokenSequence>, Vec<usize>) = dataset
        .test
        .iter()
        .filter_map(|s| ids.iter().position(|&c| c == s.label).map(|l| (s.image.clone(), l)))
        .unzip();
    let scores = student.predict(backbone, &images, &classes)?;
    accuracy(&scores, &labels)
}

/// Base and novel accuracy of one exported student.
pub fn evaluate_student(student: &TrainedStudent, dataset: &Dataset, split: &SplitSpec) -> Result<SeedResult> {
    if student.meta.dataset_id != split.dataset_id || dataset.id != split.dataset_id {
        return Err(Error::Validation(format!(
            "student trained on {}, split is for {}",
            student.meta.dataset_id, split.dataset_id
        )));
    }
    if student.meta.num_classes != dataset.num_classes() {
        return Err(Error::Validation(format!(
            "student knows {} classes, dataset has {}",
            student.meta.num_classes,
            dataset.num_classes()
        )));
    }
    if split.base.iter().chain(&split.novel).any(|&c| c >= dataset.num_classes()) {
        return Err(Error::Validation("split references unknown classes".into()));
    }
    let backbone = student.backbone()?;
    let base = split_accuracy(student, &backbone, dataset, &split.base)?;
    let novel = split_accuracy(student, &backbone, dataset, &split.novel)?;
    Ok(SeedResult {
        seed: student.meta.seed,
        base,
        novel,
        hm: hm_or_zero(base, novel),
    })
}

/// Multi-seed report over students trained with different seeds.
pub fn evaluate(students: &[TrainedStudent], dataset: &Dataset, split: &SplitSpec) -> Result<EvalReport> {
    let per_seed = students
        .iter()
        .map(|s| evaluate_student(s, dataset, split))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::aggregate(per_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupWeights {
    pub group: String,
    pub agent_ids: Vec<String>,
    pub mean_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GatingReport {
    pub groups: Vec<GroupWeights>,
}

/// Column means of a weight matrix.
pub fn mean_weights(w: &Array2<f64>) -> Vec<f64> {
    w.mean_axis(ndarray::Axis(0)).map_or_else(Vec::new, |m| m.to_vec())
}

/// Averaged gate weights of every modality group over `images`.
pub fn gating_report(
    ctx: &TrainContext,
    cfg: &TrainConfig,
    state: &TrainState,
    images: &[&VisualTokenSequence],
) -> Result<GatingReport> {
    let groups = gate_weights(ctx, cfg, state, images)?
        .into_iter()
        .map(|g| GroupWeights {
            mean_weights: mean_weights(&g.weights),
            group: g.group,
            agent_ids: g.agent_ids,
        })
        .collect();
    Ok(GatingReport { groups })
}

impl GatingReport {
    /// Tab-separated grid: one row per group, one column per agent slot.
    pub fn to_grid(&self) -> String {
        let mut out = String::from("group\tagent\tweight\n");
        for g in &self.groups {
            for (id, w) in g.agent_ids.iter().zip(&g.mean_weights) {
                writeln!(out, "{}\t{id}\t{w:.6}", g.group).unwrap();
            }
        }
        out
    }
}

/// Where training reads agent knowledge from.
#[derive(Debug, Clone, PartialEq)]
pub enum KnowledgeMode {
    Live,
    Cache(PathBuf),
}

/// A fully specified base-to-novel experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub world: WorldConfig,
    pub registry: AgentRegistry,
    /// Replaces generated descriptions of the named language agents.
    pub descriptions: Vec<ClassDescriptionSet>,
    pub seeds: Vec<u64>,
    pub split_seed: u64,
    pub knowledge: KnowledgeMode,
    pub config_hash: String,
}

impl Default for Experiment {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            world: WorldConfig {
                token_width: model.width,
                ..WorldConfig::default()
            },
            model,
            train: TrainConfig::default(),
            registry: AgentRegistry::default_roster(),
            descriptions: Vec::new(),
            seeds: vec![1, 2, 3],
            split_seed: 0,
            knowledge: KnowledgeMode::Live,
            config_hash: String::new(),
        }
    }
}

/// Data, model and knowledge an experiment runs against.
pub struct Prepared {
    pub world: Arc<SyntheticWorld>,
    pub dataset: Dataset,
    pub backbone: Backbone,
    pub knowledge: Box<dyn KnowledgeSource>,
    pub split: SplitSpec,
    pub base_classes: Vec<ClassInfo>,
}

impl Prepared {
    pub fn context<'a>(&'a self, model: &'a ModelConfig) -> TrainContext<'a> {
        TrainContext {
            backbone: &self.backbone,
            model,
            knowledge: self.knowledge.as_ref(),
            classes: &self.base_classes,
        }
    }
}

/// Live roster over `world`, with loaded descriptions swapped in.
pub fn live_knowledge(
    registry: &AgentRegistry,
    descriptions: &[ClassDescriptionSet],
    world: Arc<SyntheticWorld>,
) -> Result<LiveKnowledge> {
    let n = world.config.num_classes;
    let roster = AgentRoster::new(registry.clone(), world)?.with_descriptions(descriptions.to_vec())?;
    LiveKnowledge::new(roster, n)
}

pub fn coverage(world: &SyntheticWorld, dataset: &Dataset) -> CacheCoverage {
    CacheCoverage {
        dataset_id: dataset.id.clone(),
        num_classes: dataset.num_classes(),
        patches: world.config.patches,
        sample_ids: dataset.train.iter().map(|s| s.image.sample_id).collect(),
        fingerprint: world.fingerprint(),
    }
}

/// Outcome of one seed.
pub struct SeedRun {
    pub seed: u64,
    /// State at the end of training, before agents were unloaded.
    pub state: TrainState,
    pub student: TrainedStudent,
    pub result: SeedResult,
    /// JSON lines of the training log.
    pub log: String,
}

pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub runs: Vec<SeedRun>,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.world.validate()?;
        self.registry.validate()?;
        if self.world.token_width != self.model.width {
            return Err(config_err("data token width must equal encoder.width"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("eval.seeds must not be empty"));
        }
        Ok(())
    }

    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let world = Arc::new(SyntheticWorld::new(self.world.clone())?);
        let dataset = world.dataset();
        let backbone = Backbone::new(&self.model)?;
        let ids: Vec<usize> = (0..dataset.num_classes()).collect();
        let split = base_novel_split(&dataset.id, &ids, self.split_seed, self.train.shots)?;
        let knowledge: Box<dyn KnowledgeSource> = match &self.knowledge {
            KnowledgeMode::Live => Box::new(live_knowledge(&self.registry, &self.descriptions, world.clone())?),
            KnowledgeMode::Cache(path) => {
                Box::new(CachedKnowledge::open(path, &self.registry, &coverage(&world, &dataset))?)
            }
        };
        let base_classes = subset(&dataset, &split.base);
        Ok(Prepared {
            world,
            dataset,
            backbone,
            knowledge,
            split,
            base_classes,
        })
    }

    /// Train one seed; returns the final state and the JSON-lines log.
    pub fn train_seed(&self, prep: &Prepared, seed: u64) -> Result<(TrainState, String)> {
        let samples = few_shot_sample(&prep.dataset.train, &prep.split.base, self.train.shots, seed)?;
        let cfg = self.seed_config(seed);
        let mut log = Vec::new();
        let state = Trainer::new(prep.context(&self.model), cfg, &samples)?.run(Some(&mut log))?;
        Ok((state, String::from_utf8(log).expect("log is UTF-8")))
    }

    pub fn seed_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn export_info(&self, prep: &Prepared, seed: u64) -> ExportInfo {
        ExportInfo {
            config_hash: self.config_hash.clone(),
            seed,
            dataset_id: prep.dataset.id.clone(),
            num_classes: prep.dataset.num_classes(),
        }
    }

    /// Train, export and evaluate one seed on prepared data.
    pub fn run_seed(&self, prep: &Prepared, seed: u64) -> Result<SeedRun> {
        let (state, log) = self.train_seed(prep, seed)?;
        let mut exported = state.clone();
        let student = export_student(&mut exported, &prep.backbone, &self.model, &self.export_info(prep, seed))?;
        let result = evaluate_student(&student, &prep.dataset, &prep.split)?;
        Ok(SeedRun {
            seed,
            state,
            student,
            result,
            log,
        })
    }

    /// Every seed, in parallel, reported in seed order.
    pub fn run_prepared(&self, prep: &Prepared) -> Result<ExperimentOutcome> {
        let runs: Vec<Result<SeedRun>> = std::thread::scope(|s| {
            let handles: Vec<_> = self.seeds.iter().map(|&seed| s.spawn(move || self.run_seed(prep, seed))).collect();
            handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect()
        });
        let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
        let report = EvalReport::aggregate(runs.iter().map(|r| r.result).collect())?;
        Ok(ExperimentOutcome { report, runs })
    }

    pub fn run(&self) -> Result<ExperimentOutcome> {
        let prep = self.prepare()?;
        self.run_prepared(&prep)
    }

    /// Write every agent's knowledge over the training split to a cache at
    /// `path`. Returns the record count.
    pub fn extract(&self, path: &Path) -> Result<usize> {
        self.validate()?;
        let world = Arc::new(SyntheticWorld::new(self.world.clone())?);
        let dataset = world.dataset();
        let knowledge = live_knowledge(&self.registry, &self.descriptions, world.clone())?;
        let images: Vec<&VisualTokenSequence> = dataset.train.iter().map(|s| &s.image).collect();
        let records = extract_records(&knowledge, &self.registry, &dataset.id, &images)?;
        let meta = BTreeMap::from([("dataset_id".to_string(), dataset.id.clone())]);
        write_cache(path, &records, world.fingerprint(), meta)?;
        Ok(records.len())
    }

    /// The same experiment with every distillation weight set to zero.
    pub fn ce_only(&self) -> Self {
        let mut e = self.clone();
        e.train.weights = LossWeights {
            temperature: e.train.weights.temperature,
            ..LossWeights::ce_only()
        };
        e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    VacMode,
    LacToken,
    MacSource,
    Fusion,
    MacLossType,
    Pooling,
}
string_enum!(AblationAxis, "axis", {
    VacMode => "vac_mode", LacToken => "lac_token", MacSource => "mac_source",
    Fusion => "fusion", MacLossType => "mac_loss_type", Pooling => "pooling"
});

impl AblationAxis {
    /// Row labels and the experiment variant of each row.
    pub fn settings(self, base: &Experiment) -> Vec<(&'static str, Experiment)> {
        let with = |f: &dyn Fn(&mut Experiment)| {
            let mut e = base.clone();
            f(&mut e);
            e
        };
        match self {
            AblationAxis::VacMode => vec![
                ("last-layer", with(&|e| e.train.vac_mode = VacMode::LastLayer)),
                ("layer-wise", with(&|e| e.train.vac_mode = VacMode::LayerWise)),
            ],
            AblationAxis::LacToken => vec![
                ("sos", with(&|e| e.model.text_pool = TextPool::Sos)),
                ("eos", with(&|e| e.model.text_pool = TextPool::Eos)),
            ],
            AblationAxis::MacSource => vec![
                ("prompted_logits", with(&|e| e.train.mac_source = MacSource::PromptedLogits)),
                ("learned_scores", with(&|e| e.train.mac_source = MacSource::LearnedScores)),
            ],
            AblationAxis::Fusion => Fusion::all()
                .iter()
                .map(|&f| (f.as_str(), with(&|e| e.train.fusion = f)))
                .collect(),
            AblationAxis::MacLossType => MacLossType::all()
                .iter()
                .map(|&t| (t.as_str(), with(&|e| e.train.mac_type = t)))
                .collect(),
            AblationAxis::Pooling => [Pooling::Average, Pooling::Max, Pooling::LogSumExp]
                .iter()
                .map(|&p| (p.as_str(), with(&|e| e.train.pooling = p)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

/// One report per setting of `axis`, all on the seeds of `base`.
pub fn run_ablation(axis: &str, base: &Experiment) -> Result<AblationTable> {
    let axis = AblationAxis::from_str(axis)?;
    let rows = axis
        .settings(base)
        .into_iter()
        .map(|(label, exp)| {
            Ok(AblationRow {
                setting: label.to_string(),
                report: exp.run()?.report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        axis: axis.as_str().to_string(),
        rows,
    })
}

/// Text table with Base, Novel and HM columns.
pub fn render_table(title: &str, rows: &[(String, &EvalReport)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).chain([title.len()]).max().unwrap_or(0);
    let mut out = String::new();
    writeln!(out, "{title:<width$}  {:>6}  {:>6}  {:>6}", "Base", "Novel", "HM").unwrap();
    writeln!(out, "{}", "-".repeat(width + 24)).unwrap();
    for (name, r) in rows {
        writeln!(out, "{name:<width$}  {:>6.2}  {:>6.2}  {:>6.2}", r.base, r.novel, r.hm).unwrap();
    }
    out
}

impl AblationTable {
    pub fn render(&self) -> String {
        let rows: Vec<(String, &EvalReport)> = self.rows.iter().map(|r| (r.setting.clone(), &r.report)).collect();
        render_table(&self.axis, &rows)
    }

    /// One JSON record per row.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let mut v = serde_json::to_value(r).expect("row serializes");
            v["axis"] = serde_json::Value::String(self.axis.clone());
            writeln!(out, "{v}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScoreKind;

    #[test]
    fn split_sizes_and_determinism() {
        let s = base_novel_split("d", &[0, 1, 2, 3], 3, 1).unwrap();
        assert_eq!((s.base.len(), s.novel.len()), (2, 2));
        let s = base_novel_split("d", &[0, 1, 2, 3, 4], 3, 1).unwrap();
        assert_eq!((s.base.len(), s.novel.len()), (3, 2));
        assert_eq!(s, base_novel_split("d", &[0, 1, 2, 3, 4], 3, 1).unwrap());
        assert!(matches!(base_novel_split("d", &[7], 0, 1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn harmonic_mean_values() {
        assert!((harmonic_mean(85.29, 77.62).unwrap() - 81.27).abs() <= 0.01);
        assert!((harmonic_mean(92.19, 54.74).unwrap() - 68.69).abs() <= 0.01);
        assert_eq!(harmonic_mean(42.0, 42.0).unwrap(), 42.0);
        assert!(harmonic_mean(0.0, 3.0).is_err());
        assert!(harmonic_mean(-1.0, 3.0).is_err());
    }

    #[test]
    fn accuracy_edge_cases() {
        let s = ScoreMatrix {
            values: ndarray::array![[1.0, 0.0], [2.0, 1.0]],
            kind: ScoreKind::Clip,
        };
        assert_eq!(accuracy(&s, &[0, 0]).unwrap(), 100.0);
        let one = ScoreMatrix {
            values: ndarray::array![[0.0, 1.0]],
            kind: ScoreKind::Clip,
        };
        assert_eq!(accuracy(&one, &[1]).unwrap(), 100.0);
        assert_eq!(accuracy(&one, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn unknown_axis_is_config_error() {
        assert!(matches!(run_ablation("depth", &Experiment::default()), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_row_labels() {
        let e = Experiment::default();
        let labels = |a: AblationAxis| a.settings(&e).into_iter().map(|r| r.0).collect::<Vec<_>>();
        assert_eq!(labels(AblationAxis::Fusion), ["average", "add", "gating"]);
        assert_eq!(labels(AblationAxis::Pooling), ["average", "max", "logsumexp"]);
        assert_eq!(labels(AblationAxis::VacMode), ["last-layer", "layer-wise"]);
        assert_eq!(labels(AblationAxis::LacToken), ["sos", "eos"]);
        assert_eq!(labels(AblationAxis::MacSource), ["prompted_logits", "learned_scores"]);
        assert_eq!(labels(AblationAxis::MacLossType), ["kl", "l1", "mse"]);
    }
}
