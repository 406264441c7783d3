//! Network builders for the three segmentation architectures.

mod arch;
mod checkpoint;
mod graph;

pub use arch::{
    build, build_cdcnn, build_multires_block, build_multiresunet, build_res_path, build_unet, multires_block_graph,
    res_path_graph, Arch, MultiResBlockSpec, NetConfig,
};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use graph::{GraphBuilder, LayerCensus, LayerGraph, LayerNode, LayerOp, NodeId, ParamId, ParamRole, ParamSet, ParamSpec};

use rand::Rng;

use crate::error::Result;
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

/// He-style uniform initialization: weights ~ U(-b, b) with
/// b = sqrt(6 / fan_in), biases zero. Fully determined by `seed`.
pub fn init_params(graph: &LayerGraph, seed: u64) -> ParamSet {
    let mut r = rng::rng(seed);
    let mut params = ParamSet::zeros(graph);
    for (spec, t) in graph.params().iter().zip(params.tensors_mut()) {
        if spec.role == ParamRole::Weight {
            let bound = (6.0 / spec.fan_in.max(1) as f64).sqrt();
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-bound..bound));
        }
    }
    params
}

pub fn count_params(graph: &LayerGraph) -> usize {
    graph.count_params()
}

/// A network description together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub graph: LayerGraph,
    pub params: ParamSet,
}

impl Model {
    pub fn new(graph: LayerGraph, params: ParamSet) -> Result<Self> {
        params.check_against(&graph)?;
        Ok(Model { graph, params })
    }

    /// Builds the architecture named by `cfg` and initializes it from `cfg.seed`.
    pub fn from_config(cfg: &NetConfig) -> Result<Self> {
        let graph = build(cfg)?;
        let params = init_params(&graph, cfg.seed);
        Ok(Model { graph, params })
    }

    /// Records a forward pass, returning the output and one variable per
    /// parameter.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.variable(t.clone())).collect();
        let out = self.graph.forward(g, &vars, input)?;
        Ok((out, vars))
    }

    /// Like [`Model::forward`] but stops before the output sigmoid.
    pub fn forward_logits(&self, g: &mut Graph, input: Var) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.variable(t.clone())).collect();
        let out = self.graph.forward_logits(g, &vars, input)?;
        Ok((out, vars))
    }

    /// Inference on an N×1×H×W batch.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(input.clone());
        let out = self.graph.forward(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests;
