use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::config::ScorerConfig;
use super::layout::Layout;
use crate::error::Result;
use crate::rng;

/// All model weights as one flat buffer plus its named layout.
#[derive(Clone, Debug)]
pub struct Parameters {
    config: ScorerConfig,
    layout: Arc<Layout>,
    data: Vec<f64>,
}

impl PartialEq for Parameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Parameters {
    /// Weights ~ N(0, 1/fan_in), embeddings ~ N(0, 1/d_model), layer-norm
    /// gains 1, biases 0.
    pub fn init(config: &ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(config));
        let mut data = vec![0.0; layout.num_params()];
        let mut rng = rng::stream(seed, &[0x1_417]);
        let ids = &layout.ids;
        for (id, spec) in layout.tensors().iter().enumerate() {
            let slice = &mut data[spec.range()];
            let name = spec.name.as_str();
            if name.ends_with(".gain") {
                slice.fill(1.0);
                continue;
            }
            if name.ends_with(".bias") {
                continue;
            }
            let std = if id == ids.tok_emb || id == ids.pos_emb {
                1.0 / (config.d_model as f64).sqrt()
            } else if id == ids.boundary {
                1.0
            } else {
                1.0 / (spec.shape[0] as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in slice.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub(crate) fn from_parts(config: ScorerConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        assert_eq!(layout.num_params(), data.len());
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|t| &self.data[t.range()])
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            data: vec![0.0; self.data.len()],
        }
    }
}

/// Gradient buffer sharing the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}
