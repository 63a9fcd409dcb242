#![allow(dead_code)]

use std::sync::Arc;

use transagent::agents::{AgentDescriptor, AgentKind, AgentModality, AgentRegistry, LiveKnowledge};
use transagent::eval::live_knowledge;
use transagent::model::{Backbone, ModelConfig, VisualTokenSequence};
use transagent::trainer::{TrainConfig, TrainContext, TrainState};
use transagent::world::{Dataset, Sample, SyntheticWorld, WorldConfig};

pub fn toy_model() -> ModelConfig {
    ModelConfig {
        depth: 2,
        width: 16,
        embed_width: 16,
        prompt_depth: 2,
        ..ModelConfig::default()
    }
}

pub fn descriptor(id: &str, modality: AgentModality, width: usize, layers: usize, seed: u64) -> AgentDescriptor {
    AgentDescriptor {
        agent_id: id.to_string(),
        modality,
        width,
        layers,
        seed,
        informativeness: 1.0,
        noise: 0.1,
        kind: AgentKind::Synthetic,
        value: 0.0,
        scale: if modality == AgentModality::T2i { 4.0 } else { 1.0 },
        descriptions: 2,
    }
}

/// `per_modality` agents in each of the four groups, widths cycling through
/// values that do and do not match the student width.
pub fn toy_registry(per_modality: usize) -> AgentRegistry {
    use AgentModality::*;
    let widths = [16, 24, 12, 20];
    let mut agents = Vec::new();
    for (m, name) in [(Vision, "v"), (Language, "l"), (T2i, "t2i"), (I2t, "i2t")] {
        for i in 0..per_modality {
            let layers = if m == Vision { 1 + i % 3 } else { 0 };
            let seed = 100 + 10 * agents.len() as u64;
            agents.push(descriptor(&format!("{name}{i}"), m, widths[i % widths.len()], layers, seed));
        }
    }
    AgentRegistry { agents }
}

pub fn toy_world(model: &ModelConfig, num_classes: usize, test_per_class: usize) -> WorldConfig {
    WorldConfig {
        num_classes,
        token_width: model.width,
        patches: 4,
        train_per_class: 4,
        test_per_class,
        ..WorldConfig::default()
    }
}

pub struct Toy {
    pub model: ModelConfig,
    pub backbone: Backbone,
    pub world: Arc<SyntheticWorld>,
    pub dataset: Dataset,
    pub registry: AgentRegistry,
    pub knowledge: LiveKnowledge,
}

impl Toy {
    pub fn new(model: ModelConfig, registry: AgentRegistry, num_classes: usize) -> Self {
        let world = toy_world(&model, num_classes, 8);
        Self::with_world(model, registry, world)
    }

    pub fn with_world(model: ModelConfig, registry: AgentRegistry, world: WorldConfig) -> Self {
        let world = Arc::new(SyntheticWorld::new(world).unwrap());
        let dataset = world.dataset();
        let knowledge = live_knowledge(&registry, &[], world.clone()).unwrap();
        Self {
            backbone: Backbone::new(&model).unwrap(),
            model,
            world,
            dataset,
            registry,
            knowledge,
        }
    }

    pub fn ctx(&self) -> TrainContext<'_> {
        TrainContext {
            backbone: &self.backbone,
            model: &self.model,
            knowledge: &self.knowledge,
            classes: &self.dataset.classes,
        }
    }

    pub fn batch(&self, n: usize) -> (Vec<&VisualTokenSequence>, Vec<usize>) {
        let step = self.dataset.train.len() / n;
        let picked: Vec<&Sample> = (0..n).map(|i| &self.dataset.train[i * step]).collect();
        (picked.iter().map(|s| &s.image).collect(), picked.iter().map(|s| s.label).collect())
    }
}

/// Fresh state whose gates have random output layers, so every gate
/// parameter carries gradient.
pub fn randomized_state(toy: &Toy, cfg: &TrainConfig) -> TrainState {
    use transagent::gating::GateNetwork;
    let mut state = TrainState::new(&toy.ctx(), cfg).unwrap();
    let gates = state
        .vac_gates
        .iter_mut()
        .chain(state.lac_gate.iter_mut())
        .chain(state.mac_gate.iter_mut());
    for (i, g) in gates.enumerate() {
        *g = GateNetwork::randomized(g.input_width(), g.w1.ncols(), g.agents(), 500 + i as u64).unwrap();
    }
    let mut rng = transagent::seed::rng(9, "test/prompts");
    for p in state.prompts.visual.iter_mut().chain(state.prompts.textual.iter_mut()) {
        *p += &transagent::seed::normal_matrix(&mut rng, p.nrows(), p.ncols(), 0.1);
    }
    state
}

/// Largest per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the
/// analytic gradients and central differences of `f` at step `h`. Tensors
/// whose gradients are both below `floor` in norm are skipped. Returns the
/// error and the number of entries checked.
pub fn max_gradient_error(
    state: &TrainState,
    analytic: &[ndarray::Array2<f64>],
    h: f64,
    floor: f64,
    f: impl Fn(&TrainState) -> f64,
) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut probe = state.clone();
    for (p, grad) in analytic.iter().enumerate() {
        let mut numeric = ndarray::Array2::zeros(grad.dim());
        for idx in ndarray::indices(grad.dim()) {
            let orig = probe.params_mut()[p][idx];
            probe.params_mut()[p][idx] = orig + h;
            let up = f(&probe);
            probe.params_mut()[p][idx] = orig - h;
            let down = f(&probe);
            probe.params_mut()[p][idx] = orig;
            numeric[idx] = (up - down) / (2.0 * h);
            entries += 1;
        }
        let na = grad.mapv(|v| v * v).sum().sqrt();
        let nn = numeric.mapv(|v| v * v).sum().sqrt();
        if na.max(nn) < floor {
            continue;
        }
        let diff = (grad - &numeric).mapv(|v| v * v).sum().sqrt();
        worst = worst.max(diff / na.max(nn));
    }
    (worst, entries)
}
