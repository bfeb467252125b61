//! Class tokens and per-type feature tokens.
//!
//! A feature prompt holds `K` tokens for every node type. Each node mixes
//! its type's tokens into its raw features:
//!
//! ```text
//! w_i = softmax_k(LeakyReLU(f_kᵀ x_i))
//! x̃_i = x_i + Σ_k w_ik f_k
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{FrozenEncoder, PropagationIndex};
use crate::error::{Error, Result};
use crate::hetgraph::{HetGraph, NeighborIndex};
use crate::numerics::{kaiming_normal, Tape, Tensor, Var, LEAKY_SLOPE};

/// Row `c` is the mean of the embeddings of labeled nodes in class `c`.
///
/// `embeddings` rows are indexed by the node ids in `labeled`.
pub fn init_class_prompt(
    embeddings: &Tensor,
    labeled: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Tensor> {
    if labeled.len() != labels.len() {
        return Err(Error::Init(format!(
            "{} labeled nodes but {} labels",
            labeled.len(),
            labels.len()
        )));
    }
    let d = embeddings.cols();
    let mut q = Tensor::zeros(num_classes, d);
    let mut counts = vec![0usize; num_classes];
    for (&v, &c) in labeled.iter().zip(labels) {
        if c >= num_classes {
            return Err(Error::Init(format!("label {c} outside 0..{num_classes}")));
        }
        counts[c] += 1;
        for (qc, h) in q.row_mut(c).iter_mut().zip(embeddings.row(v)) {
            *qc += h;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Init(format!("class {c} has no labeled nodes")));
        }
        q.row_mut(c).iter_mut().for_each(|x| *x /= n as f64);
    }
    Ok(q)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePrompt {
    k: usize,
    /// One `K×d_A` matrix per node type, in type order.
    tokens: Vec<Tensor>,
}

impl FeaturePrompt {
    pub fn new(tokens: Vec<Tensor>) -> Result<FeaturePrompt> {
        let k = tokens.first().map_or(0, Tensor::rows);
        if k == 0 {
            return Err(Error::config("feature prompt needs K ≥ 1 tokens"));
        }
        if tokens.iter().any(|t| t.rows() != k) {
            return Err(Error::config("every node type needs the same token count"));
        }
        Ok(FeaturePrompt { k, tokens })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tokens(&self) -> &[Tensor] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<Tensor> {
        self.tokens
    }

    pub fn num_params(&self) -> usize {
        self.tokens.iter().map(Tensor::len).sum()
    }

    fn check(&self, graph: &HetGraph) -> Result<()> {
        if self.tokens.len() != graph.node_types().len() {
            return Err(Error::config(format!(
                "feature prompt covers {} node types, graph has {}",
                self.tokens.len(),
                graph.node_types().len()
            )));
        }
        for (t, nt) in self.tokens.iter().zip(graph.node_types()) {
            if t.cols() != nt.feature_dim {
                return Err(Error::config(format!(
                    "feature tokens for {} have dimension {}, features have {}",
                    nt.name,
                    t.cols(),
                    nt.feature_dim
                )));
            }
        }
        Ok(())
    }
}

/// `K` Kaiming-normal tokens per type with variance `2/d_A`.
pub fn init_feature_prompt(graph: &HetGraph, k: usize, seed: u64) -> Result<FeaturePrompt> {
    if k == 0 {
        return Err(Error::config("feature prompt needs K ≥ 1 tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = graph
        .node_types()
        .iter()
        .map(|t| kaiming_normal(&mut rng, k, t.feature_dim, t.feature_dim))
        .collect();
    FeaturePrompt::new(tokens)
}

/// Injects `tokens` (`K×d`) into `features` (`n×d`) on the tape.
pub fn inject(tape: &mut Tape, features: Var, tokens: Var) -> Result<Var> {
    let ft = tape.transpose(tokens)?;
    let scores = tape.matmul(features, ft)?;
    let act = tape.leaky_relu(scores, LEAKY_SLOPE)?;
    let w = tape.row_softmax(act)?;
    let mixed = tape.matmul(w, tokens)?;
    tape.add(features, mixed)
}

/// Injection weights `w_ik` for one type.
pub fn attention_weights(features: &Tensor, tokens: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let f = tape.constant(tokens.clone());
    let ft = tape.transpose(f)?;
    let s = tape.matmul(x, ft)?;
    let a = tape.leaky_relu(s, LEAKY_SLOPE)?;
    let w = tape.row_softmax(a)?;
    Ok(tape.value(w).clone())
}

/// Prompted features `x̃` for every node type.
pub fn prompt_features(graph: &HetGraph, prompt: &FeaturePrompt) -> Result<Vec<Tensor>> {
    prompt.check(graph)?;
    let mut tape = Tape::new();
    let mut out = Vec::with_capacity(prompt.tokens.len());
    for (x, f) in graph.all_features().iter().zip(&prompt.tokens) {
        let xv = tape.constant(x.clone());
        let fv = tape.constant(f.clone());
        let p = inject(&mut tape, xv, fv)?;
        out.push(tape.value(p).clone());
    }
    Ok(out)
}

/// `H̃ = f_θ*(G, X̃)`, refusing an encoder trained on another graph.
pub fn prompted_embeddings(graph: &HetGraph, prompted: &[Tensor], enc: &FrozenEncoder) -> Result<Tensor> {
    enc.check_graph(graph)?;
    let index = NeighborIndex::build(graph)?;
    let prop = PropagationIndex::new(&index);
    let mut tape = Tape::new();
    let feats: Vec<Var> = prompted.iter().map(|f| tape.constant(f.clone())).collect();
    let out = enc.forward(&mut tape, graph, &feats, &prop)?;
    Ok(tape.value(out.h).clone())
}
