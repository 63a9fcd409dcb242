//! Flat dotted-key run configuration.
//!
//! Every key has a type and a default. Values are canonicalised when set, so
//! `train.lr=0.20` and `train.lr=0.2` hash the same. Files are TOML; nested
//! tables flatten into dotted keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::agents::{AgentRegistry, ClassDescriptionSet, Pooling};
use crate::error::{config_err, Error, Result};
use crate::eval::{Experiment, KnowledgeMode};
use crate::losses::{MacLossType, MacSource, VacMode};
use crate::model::TextPool;
use crate::trainer::{Fusion, Schedule};

pub const CACHE_DIR_ENV: &str = "TRANSAGENT_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Count,
    Seed,
    Real,
    Text,
    Seeds,
    Choice(&'static [&'static str]),
}

pub struct KeySpec {
    pub key: &'static str,
    ty: Ty,
    pub help: &'static str,
}

const fn k(key: &'static str, ty: Ty, help: &'static str) -> KeySpec {
    KeySpec { key, ty, help }
}

use Ty::*;

pub const KEYS: &[KeySpec] = &[
    k("encoder.depth", Count, "transformer blocks per branch"),
    k("encoder.width", Count, "token width of both branches and of the data"),
    k("encoder.embed_width", Count, "shared embedding width C"),
    k("encoder.seed", Seed, "seed of the frozen backbone weights"),
    k("prompt.n_ctx", Count, "prompt tokens per layer"),
    k("prompt.depth", Count, "layers receiving prompts"),
    k("prompt.seed", Seed, "prompt initialisation seed"),
    k("prompt.init_std", Real, "std of the random part of the prompt init"),
    k("text.pool", Choice(&["eos", "sos"]), "text token feeding the class feature"),
    k("model.temperature", Real, "logit temperature of the classification scores"),
    k("loss.lambda1", Real, "weight of the vision distillation loss"),
    k("loss.lambda2", Real, "weight of the language distillation loss"),
    k("loss.lambda3", Real, "weight of the score distillation loss"),
    k("loss.temperature", Real, "softmax temperature of the score distillation loss"),
    k("loss.mac_type", Choice(&["kl", "l1", "mse"]), "score distillation loss"),
    k("loss.mac_source", Choice(&["learned_scores", "prompted_logits"]), "student scores matched to the agents"),
    k("loss.vac_mode", Choice(&["layer_wise", "last_layer"]), "which student layers are distilled"),
    k("moa.fusion", Choice(&["gating", "average", "add"]), "how agent knowledge is fused"),
    k("moa.hidden", Count, "gate hidden width, 0 for the embedding width"),
    k("agents.t2i_pooling", Choice(&["logsumexp", "average", "max"]), "reduction of attention maps to scores"),
    k("agents.registry", Text, "agent registry TOML, empty for the built-in roster"),
    k("agents.descriptions", Text, "comma-separated agent_id=path JSONL description files"),
    k("knowledge.source", Choice(&["live", "cache"]), "where agent knowledge comes from"),
    k("knowledge.cache", Text, "cache path, empty for a path derived from the data and agents"),
    k("train.epochs", Count, "training epochs"),
    k("train.batch_size", Count, "samples per step"),
    k("train.lr", Real, "SGD learning rate"),
    k("train.momentum", Real, "SGD momentum"),
    k("train.schedule", Choice(&["constant", "cosine"]), "learning-rate schedule"),
    k("train.shots", Count, "training samples per base class"),
    k("data.seed", Seed, "seed of the synthetic benchmark"),
    k("data.num_classes", Count, "classes, split equally into base and novel"),
    k("data.latent_dim", Count, "latent class space dimension"),
    k("data.patches", Count, "patch tokens per image"),
    k("data.name_tokens", Count, "tokens per class name"),
    k("data.separation", Real, "norm of a class prototype"),
    k("data.sample_noise", Real, "norm of the per-sample latent perturbation"),
    k("data.patch_noise", Real, "norm of the per-patch token noise"),
    k("data.style_strength", Real, "norm of the dataset-wide style shift"),
    k("data.train_per_class", Count, "training pool per class"),
    k("data.test_per_class", Count, "test samples per class"),
    k("data.split_seed", Seed, "seed of the base/novel class split"),
    k("eval.seeds", Seeds, "comma-separated training seeds"),
    k("run.dir", Text, "root of the run directories"),
];

/// Keys that never enter the config hash.
const UNHASHED: &[&str] = &["run.dir"];

fn spec(key: &str) -> Result<&'static KeySpec> {
    KEYS.iter()
        .find(|s| s.key == key)
        .ok_or_else(|| config_err(format!("unknown config key {key:?}")))
}

fn canonical(spec: &KeySpec, raw: &str) -> Result<String> {
    let raw = raw.trim();
    let bad = |what: &str| config_err(format!("{} expects {what}, got {raw:?}", spec.key));
    Ok(match spec.ty {
        Count | Seed => raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.to_string(),
        Real => {
            let v = raw.parse::<f64>().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("a finite number"));
            }
            format!("{v}")
        }
        Text => raw.to_string(),
        Seeds => {
            let seeds = raw
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("comma-separated integers"))?;
            seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        }
        Choice(options) => {
            if !options.contains(&raw) {
                return Err(bad(&format!("one of {options:?}")));
            }
            raw.to_string()
        }
    })
}

fn defaults() -> BTreeMap<&'static str, String> {
    let e = Experiment::default();
    let (m, t, w) = (&e.model, &e.train, &e.world);
    let seeds = e.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    BTreeMap::from([
        ("encoder.depth", m.depth.to_string()),
        ("encoder.width", m.width.to_string()),
        ("encoder.embed_width", m.embed_width.to_string()),
        ("encoder.seed", m.seed.to_string()),
        ("prompt.n_ctx", m.n_ctx.to_string()),
        ("prompt.depth", m.prompt_depth.to_string()),
        ("prompt.seed", m.prompt_seed.to_string()),
        ("prompt.init_std", format!("{}", m.prompt_init_std)),
        ("text.pool", m.text_pool.as_str().to_string()),
        ("model.temperature", format!("{}", m.temperature)),
        ("loss.lambda1", format!("{}", t.weights.lambda1)),
        ("loss.lambda2", format!("{}", t.weights.lambda2)),
        ("loss.lambda3", format!("{}", t.weights.lambda3)),
        ("loss.temperature", format!("{}", t.weights.temperature)),
        ("loss.mac_type", t.mac_type.as_str().to_string()),
        ("loss.mac_source", t.mac_source.as_str().to_string()),
        ("loss.vac_mode", t.vac_mode.as_str().to_string()),
        ("moa.fusion", t.fusion.as_str().to_string()),
        ("moa.hidden", t.gate_hidden.to_string()),
        ("agents.t2i_pooling", t.pooling.as_str().to_string()),
        ("agents.registry", String::new()),
        ("agents.descriptions", String::new()),
        ("knowledge.source", "live".to_string()),
        ("knowledge.cache", String::new()),
        ("train.epochs", t.epochs.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.lr", format!("{}", t.learning_rate)),
        ("train.momentum", format!("{}", t.momentum)),
        ("train.schedule", t.schedule.as_str().to_string()),
        ("train.shots", t.shots.to_string()),
        ("data.seed", w.seed.to_string()),
        ("data.num_classes", w.num_classes.to_string()),
        ("data.latent_dim", w.latent_dim.to_string()),
        ("data.patches", w.patches.to_string()),
        ("data.name_tokens", w.name_tokens.to_string()),
        ("data.separation", format!("{}", w.separation)),
        ("data.sample_noise", format!("{}", w.sample_noise)),
        ("data.patch_noise", format!("{}", w.patch_noise)),
        ("data.style_strength", format!("{}", w.style_strength)),
        ("data.train_per_class", w.train_per_class.to_string()),
        ("data.test_per_class", w.test_per_class.to_string()),
        ("data.split_seed", e.split_seed.to_string()),
        ("eval.seeds", seeds),
        ("run.dir", "runs".to_string()),
    ])
}

/// Merged configuration: defaults, then a file, then overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Result<&str> {
        spec(key)?;
        Ok(&self.values[key])
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = canonical(spec(key)?, value)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Merge a TOML file over the current values.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        self.merge_toml(&text)
    }

    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e| config_err(format!("config file: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat)?;
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.merge_file(path)?;
        Ok(c)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// TOML grouped by key prefix; loads back to an equal config.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for spec in sorted_keys() {
            let (head, tail) = spec.key.split_once('.').expect("dotted key");
            if head != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                writeln!(out, "[{head}]").unwrap();
                section = head;
            }
            let v = &self.values[spec.key];
            match spec.ty {
                Count | Seed | Real => writeln!(out, "{tail} = {v}").unwrap(),
                _ => writeln!(out, "{tail} = {}", toml::Value::String(v.clone())).unwrap(),
            }
        }
        out
    }

    fn file_digest(&self, h: &mut Sha256) -> Result<()> {
        let registry = self.get("agents.registry")?;
        if !registry.is_empty() {
            h.update(read_input(Path::new(registry))?);
        }
        for (_, path) in self.description_files()? {
            h.update(read_input(&path)?);
        }
        Ok(())
    }

    /// SHA-256 over every hashed key and the contents of referenced input
    /// files, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if !UNHASHED.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n"));
            }
        }
        self.file_digest(&mut h)?;
        Ok(hex(&h.finalize()))
    }

    /// Short hash naming the run directory.
    pub fn run_id(&self) -> Result<String> {
        Ok(self.hash()?[..16].to_string())
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(Path::new(self.get("run.dir")?).join(self.run_id()?))
    }

    fn description_files(&self) -> Result<Vec<(String, PathBuf)>> {
        let raw = self.get("agents.descriptions")?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let (id, path) = item
                    .split_once('=')
                    .ok_or_else(|| config_err(format!("agents.descriptions entry {item:?} is not agent_id=path")))?;
                Ok((id.trim().to_string(), PathBuf::from(path.trim())))
            })
            .collect()
    }

    /// Default cache location: one file per data config and agent set,
    /// under `$TRANSAGENT_CACHE_DIR` or `<run.dir>/cache`.
    pub fn cache_path(&self) -> Result<PathBuf> {
        let explicit = self.get("knowledge.cache")?;
        if !explicit.is_empty() {
            return Ok(PathBuf::from(explicit));
        }
        let dir = match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => Path::new(self.get("run.dir")?).join("cache"),
        };
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if k.starts_with("data.") || k == "encoder.width" || k.starts_with("agents.") {
                h.update(format!("{k}={v}\n"));
            }
        }
        self.file_digest(&mut h)?;
        Ok(dir.join(format!("knowledge-{}.takc", &hex(&h.finalize())[..16])))
    }

    /// The experiment this configuration describes. Reads the registry and
    /// description files it references.
    pub fn experiment(&self) -> Result<Experiment> {
        let count = |k: &str| -> Result<usize> { Ok(self.get(k)?.parse::<usize>().expect("canonical")) };
        let seed = |k: &str| -> Result<u64> { Ok(self.get(k)?.parse::<u64>().expect("canonical")) };
        let real = |k: &str| -> Result<f64> { Ok(self.get(k)?.parse::<f64>().expect("canonical")) };
        let mut e = Experiment::default();
        let m = &mut e.model;
        m.depth = count("encoder.depth")?;
        m.width = count("encoder.width")?;
        m.embed_width = count("encoder.embed_width")?;
        m.seed = seed("encoder.seed")?;
        m.n_ctx = count("prompt.n_ctx")?;
        m.prompt_depth = count("prompt.depth")?;
        m.prompt_seed = seed("prompt.seed")?;
        m.prompt_init_std = real("prompt.init_std")?;
        m.text_pool = TextPool::from_str(self.get("text.pool")?)?;
        m.temperature = real("model.temperature")?;
        let t = &mut e.train;
        t.weights.lambda1 = real("loss.lambda1")?;
        t.weights.lambda2 = real("loss.lambda2")?;
        t.weights.lambda3 = real("loss.lambda3")?;
        t.weights.temperature = real("loss.temperature")?;
        t.mac_type = MacLossType::from_str(self.get("loss.mac_type")?)?;
        t.mac_source = MacSource::from_str(self.get("loss.mac_source")?)?;
        t.vac_mode = VacMode::from_str(self.get("loss.vac_mode")?)?;
        t.fusion = Fusion::from_str(self.get("moa.fusion")?)?;
        t.gate_hidden = count("moa.hidden")?;
        t.pooling = Pooling::from_str(self.get("agents.t2i_pooling")?)?;
        t.epochs = count("train.epochs")?;
        t.batch_size = count("train.batch_size")?;
        t.learning_rate = real("train.lr")?;
        t.momentum = real("train.momentum")?;
        t.schedule = Schedule::from_str(self.get("train.schedule")?)?;
        t.shots = count("train.shots")?;
        let w = &mut e.world;
        w.seed = seed("data.seed")?;
        w.token_width = count("encoder.width")?;
        w.num_classes = count("data.num_classes")?;
        w.latent_dim = count("data.latent_dim")?;
        w.patches = count("data.patches")?;
        w.name_tokens = count("data.name_tokens")?;
        w.separation = real("data.separation")?;
        w.sample_noise = real("data.sample_noise")?;
        w.patch_noise = real("data.patch_noise")?;
        w.style_strength = real("data.style_strength")?;
        w.train_per_class = count("data.train_per_class")?;
        w.test_per_class = count("data.test_per_class")?;
        e.split_seed = seed("data.split_seed")?;
        e.seeds = self
            .get("eval.seeds")?
            .split(',')
            .map(|s| s.parse().expect("canonical"))
            .collect();
        let registry = self.get("agents.registry")?;
        if !registry.is_empty() {
            e.registry = AgentRegistry::load(Path::new(registry))?;
        }
        e.descriptions = self
            .description_files()?
            .into_iter()
            .map(|(id, path)| ClassDescriptionSet::read_jsonl(&id, &path))
            .collect::<Result<_>>()?;
        e.knowledge = match self.get("knowledge.source")? {
            "cache" => KnowledgeMode::Cache(self.cache_path()?),
            _ => KnowledgeMode::Live,
        };
        e.config_hash = self.hash()?;
        e.validate()?;
        Ok(e)
    }

    /// Every key with its default and description, one per line.
    pub fn help_text() -> String {
        let d = defaults();
        let width = KEYS.iter().map(|s| s.key.len()).max().unwrap_or(0);
        let mut out = String::from("Config keys (default in brackets):\n");
        for s in KEYS {
            let shown = if d[s.key].is_empty() { "\"\"" } else { &d[s.key] };
            writeln!(out, "  {:<width$}  [{shown}]  {}", s.key, s.help).unwrap();
        }
        out
    }
}

fn sorted_keys() -> Vec<&'static KeySpec> {
    let mut keys: Vec<&KeySpec> = KEYS.iter().collect();
    keys.sort_by_key(|s| s.key);
    keys
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten(&key(k), v, out)?;
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        toml::Value::Integer(i) => out.push((prefix.to_string(), i.to_string())),
        toml::Value::Float(f) => out.push((prefix.to_string(), f.to_string())),
        toml::Value::Boolean(b) => out.push((prefix.to_string(), b.to_string())),
        toml::Value::Array(items) => {
            let parts = items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(n) => Ok(n.to_string()),
                    _ => Err(config_err(format!("{prefix}: arrays may hold only strings or integers"))),
                })
                .collect::<Result<Vec<_>>>()?;
            out.push((prefix.to_string(), parts.join(",")));
        }
        toml::Value::Datetime(_) => return Err(config_err(format!("{prefix}: dates are not valid values"))),
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key_and_build_the_default_experiment() {
        let d = defaults();
        assert_eq!(d.len(), KEYS.len());
        for s in KEYS {
            assert!(d.contains_key(s.key), "{}", s.key);
            canonical(s, &d[s.key]).unwrap();
        }
        let mut e = RunConfig::default().experiment().unwrap();
        e.config_hash.clear();
        assert_eq!(e, Experiment::default());
    }

    #[test]
    fn unknown_key_and_bad_value_are_config_errors() {
        let mut c = RunConfig::default();
        assert_eq!(c.set("loss.lambda4", "1").unwrap_err().exit_code(), 2);
        assert_eq!(c.set("train.epochs", "-1").unwrap_err().exit_code(), 2);
        assert_eq!(c.set("moa.fusion", "max").unwrap_err().exit_code(), 2);
        assert_eq!(c.set_pair("train.lr").unwrap_err().exit_code(), 2);
        assert_eq!(c.merge_toml("[loss]\nlambda9 = 2\n").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn canonical_values_hash_equal() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        a.set("train.lr", "0.20").unwrap();
        b.set("train.lr", "2e-1").unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.set("loss.lambda2", "0").unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn run_dir_is_not_hashed() {
        let mut a = RunConfig::default();
        let h = a.hash().unwrap();
        a.set("run.dir", "/elsewhere").unwrap();
        assert_eq!(a.hash().unwrap(), h);
    }

    #[test]
    fn toml_round_trip() {
        let mut a = RunConfig::default();
        a.set_pair("loss.mac_type=mse").unwrap();
        a.set_pair("eval.seeds=4, 5").unwrap();
        a.set_pair("agents.descriptions=x=y.jsonl").unwrap();
        let mut b = RunConfig::default();
        b.merge_toml(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.get("eval.seeds").unwrap(), "4,5");
    }

    #[test]
    fn nested_and_dotted_toml_agree() {
        let mut a = RunConfig::default();
        a.merge_toml("[loss]\nlambda2 = 10\n").unwrap();
        let mut b = RunConfig::default();
        b.merge_toml("\"loss.lambda2\" = 10.0\n").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn help_lists_every_key_with_default() {
        let help = RunConfig::help_text();
        for s in KEYS {
            assert!(help.contains(s.key), "{}", s.key);
        }
        assert!(help.contains("[25]"));
    }

    #[test]
    fn missing_registry_is_missing_input() {
        let mut c = RunConfig::default();
        c.set("agents.registry", "/nonexistent/agents.toml").unwrap();
        assert_eq!(c.experiment().unwrap_err().exit_code(), 3);
    }
}
