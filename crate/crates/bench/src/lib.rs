//! Shared inputs for the pipeline benchmarks.

use hetgpt_core::encoder::{pretrain, EncoderConfig, FrozenEncoder};
use hetgpt_core::hetgraph::HetGraph;
use hetgpt_core::synth::{generate, split, Split, SplitSpec, SyntheticSpec};
use hetgpt_core::Result;

pub struct Fixture {
    pub graph: HetGraph,
    pub encoder: FrozenEncoder,
    pub split: Split,
}

impl Fixture {
    /// ACM-mini with a briefly pre-trained encoder and a 5-shot split.
    pub fn acm_mini() -> Result<Fixture> {
        let graph = generate(&SyntheticSpec::acm_mini(0))?;
        let cfg = EncoderConfig {
            epochs: 5,
            ..EncoderConfig::default()
        };
        let (encoder, _) = pretrain(&graph, &cfg)?;
        let split = split(&graph, &SplitSpec::new(5, 0))?;
        Ok(Fixture { graph, encoder, split })
    }
}
