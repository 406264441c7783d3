use crate::error::{Error, Result};
use crate::tensor::{Graph, PaddingMode, Tensor, Var};

use super::Arch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Input,
    Conv {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
    },
    Linear {
        input: NodeId,
        weight: ParamId,
        bias: ParamId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    MaxPool2(NodeId),
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    Add(NodeId, NodeId),
    Flatten(NodeId),
    Reshape { input: NodeId, shape: [usize; 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub op: LayerOp,
    /// Per-sample shape: `[C, H, W]` for feature maps, `[F]` for vectors.
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Layer counts by kind, in the order (conv, pool, upsample, fc, flatten).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerCensus {
    pub conv: usize,
    pub pool: usize,
    pub upsample: usize,
    pub fc: usize,
    pub flatten: usize,
}

/// Immutable network description: ordered layers plus named parameter
/// shapes. Parameter values live in a separate [`super::ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGraph {
    arch: Option<Arch>,
    nodes: Vec<LayerNode>,
    params: Vec<ParamSpec>,
    output: NodeId,
}

impl LayerGraph {
    pub fn arch(&self) -> Option<Arch> {
        self.arch
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output.0].shape
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(ParamSpec::len).sum()
    }

    pub fn census(&self) -> LayerCensus {
        let mut c = LayerCensus::default();
        for node in &self.nodes {
            match node.op {
                LayerOp::Conv { .. } => c.conv += 1,
                LayerOp::MaxPool2(_) => c.pool += 1,
                LayerOp::Upsample2(_) => c.upsample += 1,
                LayerOp::Linear { .. } => c.fc += 1,
                LayerOp::Flatten(_) => c.flatten += 1,
                _ => {}
            }
        }
        c
    }

    /// Smallest spatial extent of any feature map in the graph.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        self.nodes
            .iter()
            .filter(|n| n.shape.len() == 3)
            .map(|n| (n.shape[1], n.shape[2]))
            .min()
            .unwrap_or((0, 0))
    }

    /// Evaluates the network on an N×C×H×W `input`, given one recorded
    /// variable per parameter (in [`LayerGraph::params`] order).
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        Ok(self.forward_nodes(g, params, input)?[self.output.0])
    }

    /// Like [`LayerGraph::forward`] but returns the input of the output
    /// sigmoid. Errors if the graph does not end in one.
    pub fn forward_logits(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        let LayerOp::Sigmoid(x) = self.nodes[self.output.0].op else {
            return Err(Error::InvalidArgument("network output is not a sigmoid".into()));
        };
        Ok(self.forward_nodes(g, params, input)?[x.0])
    }

    fn forward_nodes(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Vec<Var>> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let in_shape = g.value(input).shape().to_vec();
        if in_shape.len() != 4 || in_shape[1..] != self.nodes[0].shape[..] {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: in_shape,
                right: self.nodes[0].shape.clone(),
            });
        }
        let batch = in_shape[0];
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                LayerOp::Input => input,
                LayerOp::Conv { input, weight, bias } => {
                    g.conv2d(vars[input.0], params[weight.0], params[bias.0], PaddingMode::Same)?
                }
                LayerOp::Linear { input, weight, bias } => g.linear(vars[input.0], params[weight.0], params[bias.0])?,
                LayerOp::Relu(x) => g.relu(vars[x.0]),
                LayerOp::Sigmoid(x) => g.sigmoid(vars[x.0]),
                LayerOp::MaxPool2(x) => g.maxpool2(vars[x.0])?,
                LayerOp::Upsample2(x) => g.upsample2(vars[x.0])?,
                LayerOp::Concat(a, b) => g.concat_channels(vars[a.0], vars[b.0])?,
                LayerOp::Add(a, b) => g.add(vars[a.0], vars[b.0])?,
                LayerOp::Flatten(x) => {
                    let features = self.nodes[x.0].shape.iter().product::<usize>();
                    g.reshape(vars[x.0], [batch, features])?
                }
                LayerOp::Reshape { input, shape } => g.reshape(vars[input.0], [batch, shape[0], shape[1], shape[2]])?,
            };
            vars.push(v);
        }
        Ok(vars)
    }
}

/// Incremental constructor for [`LayerGraph`]s with shape checking and
/// dotted parameter names (`enc0.block.conv1.weight`).
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<LayerNode>,
    params: Vec<ParamSpec>,
    scope: Vec<String>,
}

impl GraphBuilder {
    /// Starts a graph whose input is a `channels`×`h`×`w` feature map.
    pub fn new(channels: usize, h: usize, w: usize) -> (Self, NodeId) {
        let b = GraphBuilder {
            nodes: vec![LayerNode {
                op: LayerOp::Input,
                shape: vec![channels, h, w],
            }],
            params: Vec::new(),
            scope: Vec::new(),
        };
        (b, NodeId(0))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn map_shape(&self, id: NodeId, op: &'static str) -> Result<[usize; 3]> {
        match self.nodes[id.0].shape[..] {
            [c, h, w] => Ok([c, h, w]),
            ref s => Err(Error::InvalidShape {
                op,
                shape: s.to_vec(),
                reason: "expected a feature map".into(),
            }),
        }
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape[0]
    }

    /// Runs `f` with `name` pushed onto the parameter-name scope.
    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn param(&mut self, leaf: &str, shape: Vec<usize>, fan_in: usize, role: ParamRole) -> ParamId {
        let mut name = self.scope.join(".");
        if !name.is_empty() {
            name.push('.');
        }
        name.push_str(leaf);
        self.params.push(ParamSpec {
            name,
            shape,
            fan_in,
            role,
        });
        ParamId(self.params.len() - 1)
    }

    fn push(&mut self, op: LayerOp, shape: Vec<usize>) -> NodeId {
        self.nodes.push(LayerNode { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    /// Same-padded `k`×`k` convolution to `out_ch` channels, with bias.
    pub fn conv(&mut self, x: NodeId, out_ch: usize, k: usize, name: &str) -> Result<NodeId> {
        let [c, h, w] = self.map_shape(x, "conv")?;
        if k.is_multiple_of(2) || out_ch == 0 {
            return Err(Error::config(format!("{name}: conv needs an odd kernel and out_ch > 0")));
        }
        let (weight, bias) = self.scoped(name, |b| {
            let weight = b.param("weight", vec![out_ch, c, k, k], c * k * k, ParamRole::Weight);
            let bias = b.param("bias", vec![out_ch], c * k * k, ParamRole::Bias);
            (weight, bias)
        });
        Ok(self.push(LayerOp::Conv { input: x, weight, bias }, vec![out_ch, h, w]))
    }

    pub fn conv_relu(&mut self, x: NodeId, out_ch: usize, k: usize, name: &str) -> Result<NodeId> {
        let y = self.conv(x, out_ch, k, name)?;
        Ok(self.relu(y))
    }

    pub fn linear(&mut self, x: NodeId, outputs: usize, name: &str) -> Result<NodeId> {
        let inputs = match self.nodes[x.0].shape[..] {
            [f] => f,
            ref s => {
                return Err(Error::InvalidShape {
                    op: "linear",
                    shape: s.to_vec(),
                    reason: "expected a flattened vector".into(),
                })
            }
        };
        let (weight, bias) = self.scoped(name, |b| {
            let weight = b.param("weight", vec![outputs, inputs], inputs, ParamRole::Weight);
            let bias = b.param("bias", vec![outputs], inputs, ParamRole::Bias);
            (weight, bias)
        });
        Ok(self.push(LayerOp::Linear { input: x, weight, bias }, vec![outputs]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(LayerOp::Relu(x), shape)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(LayerOp::Sigmoid(x), shape)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let [c, h, w] = self.map_shape(x, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "maxpool2",
                shape: vec![c, h, w],
                reason: "spatial extents must be even".into(),
            });
        }
        Ok(self.push(LayerOp::MaxPool2(x), vec![c, h / 2, w / 2]))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let [c, h, w] = self.map_shape(x, "upsample2")?;
        Ok(self.push(LayerOp::Upsample2(x), vec![c, 2 * h, 2 * w]))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [ca, ha, wa] = self.map_shape(a, "concat")?;
        let [cb, hb, wb] = self.map_shape(b, "concat")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: vec![ca, ha, wa],
                right: vec![cb, hb, wb],
            });
        }
        Ok(self.push(LayerOp::Concat(a, b), vec![ca + cb, ha, wa]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(LayerOp::Add(a, b), shape))
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let features = self.nodes[x.0].shape.iter().product();
        self.push(LayerOp::Flatten(x), vec![features])
    }

    pub fn reshape(&mut self, x: NodeId, shape: [usize; 3]) -> Result<NodeId> {
        let have: usize = self.nodes[x.0].shape.iter().product();
        if have != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.nodes[x.0].shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(self.push(LayerOp::Reshape { input: x, shape }, shape.to_vec()))
    }

    pub fn finish(self, output: NodeId, arch: Option<Arch>) -> LayerGraph {
        LayerGraph {
            arch,
            nodes: self.nodes,
            params: self.params,
            output,
        }
    }
}

/// Parameter values, aligned index-for-index with a graph's
/// [`LayerGraph::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::InvalidArgument("parameter names and tensors differ in count".into()));
        }
        Ok(ParamSet { names, tensors })
    }

    pub fn zeros(graph: &LayerGraph) -> Self {
        ParamSet {
            names: graph.params().iter().map(|p| p.name.clone()).collect(),
            tensors: graph.params().iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks names and shapes against the graph's parameter specs.
    pub fn check_against(&self, graph: &LayerGraph) -> Result<()> {
        if self.len() != graph.params().len() {
            return Err(Error::InvalidArgument(format!(
                "parameter set has {} tensors, graph expects {}",
                self.len(),
                graph.params().len()
            )));
        }
        for ((name, t), spec) in self.names.iter().zip(&self.tensors).zip(graph.params()) {
            if name != &spec.name || t.shape() != spec.shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}
