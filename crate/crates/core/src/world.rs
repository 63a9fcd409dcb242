//! Synthetic benchmark family.
//!
//! Every class owns a Gaussian prototype in a small latent space. A fixed
//! concept embedding `E` maps latents into token space. Images are bags of
//! patch tokens `E·z + style + noise`, where `style` is one vector shared by
//! the whole dataset (its domain shift). Class names are short token
//! sequences near `E·z_c`. Textual descriptions spell a class out as
//! attribute words, one per latent coordinate, which resolve back into token
//! space through the world vocabulary.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::{TextualTokenSequence, VisualTokenSequence};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub latent_dim: usize,
    /// Token width; must equal the encoder width.
    pub token_width: usize,
    pub patches: usize,
    pub name_tokens: usize,
    /// Norm of a class prototype.
    pub separation: f64,
    /// Norm of the per-sample latent perturbation.
    pub sample_noise: f64,
    /// Norm of the per-patch token noise.
    pub patch_noise: f64,
    /// Norm of the dataset-wide style vector.
    pub style_strength: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            num_classes: 20,
            latent_dim: 8,
            token_width: 32,
            patches: 8,
            name_tokens: 2,
            separation: 1.5,
            sample_noise: 0.9,
            patch_noise: 0.8,
            style_strength: 3.0,
            train_per_class: 20,
            test_per_class: 25,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err("data.num_classes must be at least 2"));
        }
        if self.latent_dim == 0 || self.token_width == 0 || self.patches == 0 || self.name_tokens == 0 {
            return Err(config_err("world dimensions must be positive"));
        }
        for (k, v) in [
            ("data.separation", self.separation),
            ("data.sample_noise", self.sample_noise),
            ("data.patch_noise", self.patch_noise),
            ("data.style_strength", self.style_strength),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(format!("{k} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// One labelled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: VisualTokenSequence,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub text: TextualTokenSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub classes: Vec<ClassInfo>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Ground truth of a synthetic benchmark. Agents built as "informative" read
/// from it; the student only ever sees tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    /// `num_classes×latent_dim`.
    pub prototypes: Array2<f64>,
    /// `token_width×latent_dim` concept embedding.
    pub embed: Array2<f64>,
    pub style: Array1<f64>,
}

pub fn class_name(c: usize) -> String {
    format!("c{c:02}")
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let w = config.token_width;
        let mut rng = seed::rng(config.seed, "world/prototypes");
        let prototypes = seed::normal_matrix(&mut rng, config.num_classes, d, config.separation / (d as f64).sqrt());
        let mut rng = seed::rng(config.seed, "world/embed");
        let embed = seed::normal_matrix(&mut rng, w, d, 1.0 / (w as f64).sqrt());
        let mut rng = seed::rng(config.seed, "world/style");
        let mut style = Array1::from(seed::normal_vec(&mut rng, w, 1.0));
        let n = style.dot(&style).sqrt();
        style.mapv_inplace(|v| v * config.style_strength / n);
        Ok(Self {
            config,
            prototypes,
            embed,
            style,
        })
    }

    /// Hash of the generating config.
    pub fn fingerprint(&self) -> u64 {
        seed::fnv1a64(serde_json::to_string(&self.config).expect("config serializes").as_bytes())
    }

    pub fn dataset_id(&self) -> String {
        format!("synthetic-{}", self.config.seed)
    }

    /// `E·z_c` in token space.
    pub fn class_content(&self, c: usize) -> Array1<f64> {
        self.embed.dot(&self.prototypes.row(c))
    }

    /// Token vector of a vocabulary word: class names resolve to their
    /// content, attribute words `f{i}:{v}` to `v·d·E[:, i]` (so the mean of a
    /// class's full attribute list is its content), anything else to a small
    /// seeded vector.
    pub fn resolve_word(&self, word: &str) -> Array1<f64> {
        if let Some(c) = word.strip_prefix('c').and_then(|s| s.parse::<usize>().ok()) {
            if c < self.config.num_classes {
                return self.class_content(c);
            }
        }
        if let Some((idx, val)) = word.strip_prefix('f').and_then(|s| s.split_once(':')) {
            if let (Ok(i), Ok(v)) = (idx.parse::<usize>(), val.parse::<f64>()) {
                if i < self.config.latent_dim {
                    let d = self.config.latent_dim as f64;
                    return self.embed.column(i).mapv(|e| e * v * d);
                }
            }
        }
        let mut rng = seed::rng(self.config.seed, &format!("world/word/{word}"));
        Array1::from(seed::normal_vec(&mut rng, self.config.token_width, 0.05))
    }

    fn class_text(&self, c: usize) -> TextualTokenSequence {
        let w = self.config.token_width;
        let content = self.class_content(c);
        let mut rng = seed::rng(self.config.seed, &format!("world/name/{c}"));
        let mut tokens = Array2::zeros((self.config.name_tokens, w));
        for mut row in tokens.outer_iter_mut() {
            let jitter = seed::normal_vec(&mut rng, w, 0.05 / (w as f64).sqrt());
            row.assign(&(&content + &Array1::from(jitter)));
        }
        TextualTokenSequence { tokens, class_id: c }
    }

    fn image(&self, c: usize, sample_id: u64) -> VisualTokenSequence {
        let cfg = &self.config;
        let (d, w) = (cfg.latent_dim, cfg.token_width);
        let mut rng = seed::rng(cfg.seed, &format!("world/sample/{sample_id}"));
        let eps = seed::normal_vec(&mut rng, d, cfg.sample_noise / (d as f64).sqrt());
        let z = &self.prototypes.row(c) + &Array1::from(eps);
        let content = self.embed.dot(&z) + &self.style;
        let mut tokens = Array2::zeros((cfg.patches, w));
        for mut row in tokens.outer_iter_mut() {
            let noise = seed::normal_vec(&mut rng, w, cfg.patch_noise / (w as f64).sqrt());
            row.assign(&(&content + &Array1::from(noise)));
        }
        VisualTokenSequence {
            tokens,
            sample_id,
        }
    }

    /// Draw the full dataset. Sample ids are unique across both splits.
    pub fn dataset(&self) -> Dataset {
        let cfg = &self.config;
        let classes = (0..cfg.num_classes)
            .map(|c| ClassInfo {
                id: c,
                name: class_name(c),
                text: self.class_text(c),
            })
            .collect();
        let mut next_id = 0u64;
        let mut draw = |per_class: usize| {
            let mut out = Vec::with_capacity(per_class * cfg.num_classes);
            for c in 0..cfg.num_classes {
                for _ in 0..per_class {
                    out.push(Sample {
                        image: self.image(c, next_id),
                        label: c,
                    });
                    next_id += 1;
                }
            }
            out
        };
        let train = draw(cfg.train_per_class);
        let test = draw(cfg.test_per_class);
        Dataset {
            id: self.dataset_id(),
            classes,
            train,
            test,
        }
    }

    /// Descriptions of every class as a "chatbot" of the given quality would
    /// write them. Each attribute is reported truthfully with probability
    /// `informativeness`, otherwise replaced by a random value; `noise` is
    /// added to every reported value.
    pub fn describe_classes(
        &self,
        agent_seed: u64,
        informativeness: f64,
        noise: f64,
        per_class: usize,
    ) -> Vec<Vec<String>> {
        let cfg = &self.config;
        let d = cfg.latent_dim;
        let spread = cfg.separation / (d as f64).sqrt();
        (0..cfg.num_classes)
            .map(|c| {
                let mut rng = seed::rng(agent_seed, &format!("describe/{}/{c}", cfg.seed));
                (0..per_class)
                    .map(|_| {
                        let mut text = String::from("it looks like");
                        for i in 0..d {
                            let truthful = rng.random::<f64>() < informativeness;
                            let base = if truthful {
                                self.prototypes[[c, i]]
                            } else {
                                seed::normal_vec(&mut rng, 1, spread)[0]
                            };
                            let v = base + seed::normal_vec(&mut rng, 1, noise * spread)[0];
                            write!(text, " f{i}:{v:+.4}").unwrap();
                        }
                        text
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_shapes_and_ids() {
        let cfg = WorldConfig {
            num_classes: 4,
            train_per_class: 3,
            test_per_class: 2,
            ..WorldConfig::default()
        };
        let world = SyntheticWorld::new(cfg.clone()).unwrap();
        let ds = world.dataset();
        assert_eq!(ds.classes.len(), 4);
        assert_eq!(ds.train.len(), 12);
        assert_eq!(ds.test.len(), 8);
        let mut ids: Vec<u64> = ds.train.iter().chain(&ds.test).map(|s| s.image.sample_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);
        assert_eq!(ds.train[0].image.tokens.dim(), (cfg.patches, cfg.token_width));
        assert_eq!(ds, SyntheticWorld::new(cfg).unwrap().dataset());
    }

    #[test]
    fn full_truthful_description_averages_to_content() {
        let world = SyntheticWorld::new(WorldConfig::default()).unwrap();
        let descs = world.describe_classes(5, 1.0, 0.0, 1);
        let words: Vec<&str> = descs[3][0].split_whitespace().filter(|w| w.starts_with('f')).collect();
        assert_eq!(words.len(), world.config.latent_dim);
        let mut mean = Array1::zeros(world.config.token_width);
        for w in &words {
            mean += &world.resolve_word(w);
        }
        mean /= words.len() as f64;
        let content = world.class_content(3);
        for (a, b) in mean.iter().zip(content.iter()) {
            // Reported values carry four decimals.
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn resolve_class_names() {
        let world = SyntheticWorld::new(WorldConfig::default()).unwrap();
        assert_eq!(world.resolve_word("c05"), world.class_content(5));
        assert_eq!(world.resolve_word("looks"), world.resolve_word("looks"));
    }
}
