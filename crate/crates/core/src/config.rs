//! Run configuration with JSON round-tripping and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{CouplingOrder, CycleVariant, LossWeights};

/// How the universe point count is chosen for a collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniversePolicy {
    /// Largest vertex count in the collection.
    Max,
    /// Vertex count of a named shape.
    Ref(String),
    Fixed(usize),
}

impl UniversePolicy {
    /// Parses the CLI form `max`, `ref:<name>`, or a number.
    pub fn parse(text: &str) -> Result<Self> {
        if text == "max" {
            return Ok(Self::Max);
        }
        if let Some(name) = text.strip_prefix("ref:") {
            if name.is_empty() {
                return Err(Error::Config("empty reference shape name".into()));
            }
            return Ok(Self::Ref(name.into()));
        }
        text.parse::<usize>()
            .map_err(|_| Error::Config(format!("bad universe policy '{text}'")))
            .and_then(|n| {
                if n == 0 {
                    Err(Error::Config("universe size must be >= 1".into()))
                } else {
                    Ok(Self::Fixed(n))
                }
            })
    }
}

/// Which ordered shape pairs the losses and matchers consider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPolicy {
    /// All ordered pairs up to 12 shapes, shape-graph edges beyond.
    Auto,
    AllOrdered,
    GraphEdges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k_lb: usize,
    pub k_elas: usize,
    pub lambda_lb: f64,
    pub lambda_elas: f64,
    pub tau: f64,
    pub sinkhorn_iters: usize,
    pub graph_k: usize,
    pub universe_size_policy: UniversePolicy,
    pub weights: LossWeights,
    pub cycle_variant: CycleVariant,
    pub coupling_order: CouplingOrder,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub pair_policy: PairPolicy,
    pub wks_dim: usize,
    pub wks_sigma_scale: f64,
    pub bending_weight: f64,
    /// Hidden width of the shape-graph attention layers.
    pub attention_width: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_lb: 160,
            k_elas: 40,
            lambda_lb: 100.0,
            lambda_elas: 50.0,
            tau: 0.07,
            sinkhorn_iters: 30,
            graph_k: 3,
            universe_size_policy: UniversePolicy::Max,
            weights: LossWeights::default(),
            cycle_variant: CycleVariant::Frobenius,
            coupling_order: CouplingOrder::AsPrinted,
            seed: 0,
            cache_dir: None,
            pair_policy: PairPolicy::Auto,
            wks_dim: crate::descriptor::DEFAULT_WKS_DIM,
            wks_sigma_scale: crate::descriptor::DEFAULT_SIGMA_SCALE,
            bending_weight: 1.0,
            attention_width: 32,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_lb < 1 || self.k_elas < 1 || self.sinkhorn_iters < 1 || self.graph_k < 1 {
            return Err(Error::Config("counts must be >= 1".into()));
        }
        if self.wks_dim < 1 || self.attention_width < 1 {
            return Err(Error::Config("counts must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        for (name, v) in [
            ("lambda_lb", self.lambda_lb),
            ("lambda_elas", self.lambda_elas),
            ("wks_sigma_scale", self.wks_sigma_scale),
            ("bending_weight", self.bending_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        self.weights.validate()?;
        if let UniversePolicy::Fixed(0) = self.universe_size_policy {
            return Err(Error::Config("universe size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: Self = crate::io::load_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::save_json(self, path)
    }

    /// Ordered pair list for `n` shapes under the configured policy.
    pub fn pairs(&self, n: usize, graph_neighbors: Option<&[Vec<usize>]>) -> Vec<(usize, usize)> {
        let all = || -> Vec<(usize, usize)> {
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect()
        };
        let edges = |nbrs: &[Vec<usize>]| -> Vec<(usize, usize)> {
            let mut pairs = Vec::new();
            for (i, ns) in nbrs.iter().enumerate() {
                for &j in ns {
                    if j != i {
                        pairs.push((i, j));
                    }
                }
            }
            pairs
        };
        match (self.pair_policy, graph_neighbors) {
            (PairPolicy::AllOrdered, _) | (PairPolicy::Auto, None) => all(),
            (PairPolicy::Auto, Some(nbrs)) => {
                if n <= 12 {
                    all()
                } else {
                    edges(nbrs)
                }
            }
            (PairPolicy::GraphEdges, Some(nbrs)) => edges(nbrs),
            (PairPolicy::GraphEdges, None) => all(),
        }
    }
}
