//! The full parameter set: shape dictionary, lifter and detector, together
//! with the category registry that fixes the stacked keypoint layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{self, DetectorConfig};
use crate::lifter::{self, LifterConfig};
use crate::nn::ParamStore;
use crate::shape_model::{CategoryRegistry, ShapeDictionary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lifter: LifterConfig,
    pub detector: DetectorConfig,
    /// Feed the detector's context vector to the lifter when running from
    /// images. Without it the lifter always sees a zero context.
    pub use_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lifter: LifterConfig::default(),
            detector: DetectorConfig::default(),
            use_context: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub registry: CategoryRegistry,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters. Each part draws from its own seeded stream so that
    /// e.g. changing the detector size leaves the lifter initialisation alone.
    pub fn new(config: ModelConfig, registry: CategoryRegistry, seed: u64) -> crate::Result<Self> {
        config.detector.validate()?;
        if registry.is_empty() {
            return Err(crate::Error::Invalid("model needs at least one category".into()));
        }
        let mut params = ParamStore::new();
        let k = registry.total_keypoints();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        ShapeDictionary::init(&mut params, config.lifter.latent_dim, k, &mut rng);
        rng.set_stream(2);
        lifter::init_params(&mut params, &config.lifter, k, &mut rng);
        rng.set_stream(3);
        detector::init_params(&mut params, &config.detector, &config.lifter, &registry, &mut rng);
        Ok(Model { config, registry, params })
    }

    pub fn dictionary(&self) -> crate::Result<ShapeDictionary> {
        ShapeDictionary::from_params(&self.params)
    }

    /// Same model with gradient tracking switched off.
    pub fn frozen(&self) -> Model {
        Model {
            config: self.config.clone(),
            registry: self.registry.clone(),
            params: self.params.frozen(),
        }
    }
}
