//! Coding blocks, the initial embedding, and the classification heads.
//!
//! Every block is a list of [`LayerSpec`]s. The same list drives parameter
//! registration, counting, MAC estimates, and execution, so the three can
//! never drift apart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec, Session};
use crate::point::{KnnTable, Point3};
use crate::scalar::Scalar;
use crate::tape::{ReduceOp, Var};
use crate::tensor::Tensor;

/// Width of the initial point embedding.
pub const EMBED_DIM: usize = 8;
/// Channels of the relative-position encoding `[p, q, p − q, ‖p − q‖]`.
pub const POS_ENC_DIM: usize = 10;
pub const FINAL_HIDDEN: [usize; 2] = [64, 32];
pub const FINAL_DROPOUT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimSchedule {
    pub row_dims: Vec<usize>,
    pub width_mult: usize,
    /// Per-row additive widths; missing rows add nothing.
    pub extra: Vec<usize>,
}

impl Default for DimSchedule {
    fn default() -> Self {
        Self {
            row_dims: vec![16, 64, 128, 256, 512],
            width_mult: 1,
            extra: Vec::new(),
        }
    }
}

impl DimSchedule {
    pub fn width(&self, row: usize) -> usize {
        self.row_dims[row] * self.width_mult + self.extra.get(row).copied().unwrap_or(0)
    }

    /// Deepest row index the schedule covers.
    pub fn max_levels(&self) -> usize {
        self.row_dims.len().saturating_sub(1)
    }

    /// The "wide" variant: `+2, +4, +8, …` added row by row.
    pub fn wide(mut self) -> Self {
        self.extra = (0..self.row_dims.len()).map(|i| 2 << i).collect();
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    SharedMlp,
    LocalAgg,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::SharedMlp => "shared_mlp",
            BlockKind::LocalAgg => "local_agg",
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "shared_mlp" | "sharedmlp" | "mlp" => Ok(BlockKind::SharedMlp),
            "local_agg" | "localagg" | "lfa" => Ok(BlockKind::LocalAgg),
            other => Err(Error::Config(format!("unknown block kind {other}"))),
        }
    }
}

/// Per-graph block settings shared by every node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    /// Neighbors per point for [`BlockKind::LocalAgg`].
    pub k: usize,
    /// Dense layers inside a [`BlockKind::SharedMlp`] block.
    pub layers: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            kind: BlockKind::SharedMlp,
            k: 16,
            layers: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingBlockSpec {
    pub kind: BlockKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub k: usize,
    pub layers: usize,
}

impl CodingBlockSpec {
    pub fn new(config: BlockConfig, in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind: config.kind,
            in_dim,
            out_dim,
            k: config.k,
            layers: config.layers,
        }
    }

    pub fn layers(&self, prefix: &str) -> Vec<LayerSpec> {
        let (d, o) = (self.in_dim, self.out_dim);
        match self.kind {
            BlockKind::SharedMlp => (0..self.layers)
                .map(|l| LayerSpec::dense(format!("{prefix}.l{l}"), if l == 0 { d } else { o }, o))
                .collect(),
            BlockKind::LocalAgg => vec![
                LayerSpec::dense(format!("{prefix}.pos"), POS_ENC_DIM, o).repeated(self.k),
                LayerSpec::dense(format!("{prefix}.mix"), o + d, o).repeated(self.k),
                LayerSpec::dense(format!("{prefix}.post"), o, o),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Linear → batch norm → ReLU.
    Dense,
    /// Linear with bias, no activation.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Evaluations per output point (K for layers applied before pooling).
    pub repeats: usize,
}

impl LayerSpec {
    pub fn dense(name: String, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name,
            kind: LayerKind::Dense,
            fan_in,
            fan_out,
            repeats: 1,
        }
    }

    pub fn linear(name: String, fan_in: usize, fan_out: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            ..Self::dense(name, fan_in, fan_out)
        }
    }

    fn repeated(mut self, repeats: usize) -> Self {
        self.repeats = repeats;
        self
    }

    pub fn param_count(&self) -> usize {
        let extra = match self.kind {
            LayerKind::Dense => 3,
            LayerKind::Linear => 1,
        };
        self.fan_in * self.fan_out + extra * self.fan_out
    }

    pub fn macs_per_point(&self) -> usize {
        self.repeats * self.fan_in * self.fan_out
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let spec = |suffix: &str, shape: Vec<usize>, init| ParamSpec {
            name: format!("{}.{suffix}", self.name),
            shape,
            init,
        };
        let mut out = vec![
            spec("w", vec![self.fan_in, self.fan_out], Init::Glorot),
            spec("b", vec![self.fan_out], Init::Zeros),
        ];
        if self.kind == LayerKind::Dense {
            out.push(spec("gamma", vec![self.fan_out], Init::Ones));
            out.push(spec("beta", vec![self.fan_out], Init::Zeros));
        }
        out
    }

    pub fn apply<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let width = s.tape.shape(x).get(1).copied().unwrap_or(0);
        if width != self.fan_in {
            return Err(Error::Shape(format!(
                "layer {} expects width {}, got {width}",
                self.name, self.fan_in
            )));
        }
        let w = s.param(&format!("{}.w", self.name))?;
        let b = s.param(&format!("{}.b", self.name))?;
        let y = s.tape.matmul(x, w)?;
        let y = s.tape.add_row(y, b)?;
        match self.kind {
            LayerKind::Linear => Ok(y),
            LayerKind::Dense => {
                let y = s.batch_norm(&self.name, y)?;
                Ok(s.tape.relu(y))
            }
        }
    }
}

pub fn count_layers(layers: &[LayerSpec]) -> usize {
    layers.iter().map(LayerSpec::param_count).sum()
}

pub fn count_block_params(spec: &CodingBlockSpec) -> usize {
    count_layers(&spec.layers("block"))
}

pub fn embedding_layers(d_in: usize) -> Result<Vec<LayerSpec>> {
    if d_in != 3 && d_in != 6 {
        return Err(Error::Config(format!("input features must be 3 or 6 wide, got {d_in}")));
    }
    Ok(vec![LayerSpec::dense("embed".into(), d_in, EMBED_DIM)])
}

pub fn decoder_head_layers(prefix: &str, width: usize, classes: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::linear(prefix.to_string(), width, classes)]
}

pub fn final_head_layers(width: usize, width_mult: usize, classes: usize) -> Vec<LayerSpec> {
    let [h1, h2] = FINAL_HIDDEN.map(|h| h * width_mult);
    vec![
        LayerSpec::dense("final.fc1".into(), width, h1),
        LayerSpec::dense("final.fc2".into(), h1, h2),
        LayerSpec::linear("final.out".into(), h2, classes),
    ]
}

pub fn apply_layers<T: Scalar>(s: &mut Session<'_, T>, layers: &[LayerSpec], mut x: Var) -> Result<Var> {
    for layer in layers {
        x = layer.apply(s, x)?;
    }
    Ok(x)
}

/// Pointwise layers of a shared-MLP block.
pub fn shared_mlp<T: Scalar>(s: &mut Session<'_, T>, spec: &CodingBlockSpec, prefix: &str, x: Var) -> Result<Var> {
    apply_layers(s, &spec.layers(prefix), x)
}

/// `[p, q, p − q, ‖p − q‖]` for every point `p` and each of its neighbors
/// `q`, flattened to `(n·K)×10` in point-major order.
pub fn relative_encoding<T: Scalar>(coords: &[Point3], knn: &KnnTable) -> Result<Tensor<T>> {
    if knn.len() != coords.len() {
        return Err(Error::Shape(format!(
            "knn table covers {} points, coordinates {}",
            knn.len(),
            coords.len()
        )));
    }
    let mut data = Vec::with_capacity(coords.len() * knn.k * POS_ENC_DIM);
    for (p_idx, p) in coords.iter().enumerate() {
        for &q_idx in knn.neighbors(p_idx) {
            let q = coords[q_idx];
            let diff = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            data.extend(p.iter().chain(&q).chain(&diff).map(|&v| T::lit(v)));
            data.push(T::lit(norm));
        }
    }
    Tensor::new(vec![coords.len() * knn.k, POS_ENC_DIM], data)
}

/// Relative-position encoding and neighbor features, mixed, max-pooled over
/// the K neighbors, then a pointwise layer.
pub fn local_agg<T: Scalar>(
    s: &mut Session<'_, T>,
    spec: &CodingBlockSpec,
    prefix: &str,
    x: Var,
    coords: &[Point3],
    knn: &KnnTable,
) -> Result<Var> {
    let n = coords.len();
    if s.tape.value(x).rows() != n || knn.k != spec.k {
        return Err(Error::Shape(format!(
            "{prefix}: {} feature rows, {n} points, K={} (block expects {})",
            s.tape.value(x).rows(),
            knn.k,
            spec.k
        )));
    }
    let layers = spec.layers(prefix);
    let rel = relative_encoding(coords, knn)?;
    let rel = s.tape.constant(rel);
    let pos = layers[0].apply(s, rel)?;
    let neighbors = s.tape.gather_rows(x, &knn.indices)?;
    let cat = s.tape.concat(&[pos, neighbors], 1)?;
    let mixed = layers[1].apply(s, cat)?;
    let grouped = s.tape.reshape(mixed, &[n, spec.k, spec.out_dim])?;
    let pooled = s.tape.reduce(grouped, ReduceOp::Max, 1)?;
    layers[2].apply(s, pooled)
}

/// Runs a coding block of either kind.
pub fn coding_block<T: Scalar>(
    s: &mut Session<'_, T>,
    spec: &CodingBlockSpec,
    prefix: &str,
    x: Var,
    coords: &[Point3],
    knn: &KnnTable,
) -> Result<Var> {
    match spec.kind {
        BlockKind::SharedMlp => shared_mlp(s, spec, prefix, x),
        BlockKind::LocalAgg => local_agg(s, spec, prefix, x, coords, knn),
    }
}

/// FC → FC → dropout → FC over full-resolution features.
pub fn final_head<T: Scalar>(s: &mut Session<'_, T>, layers: &[LayerSpec], x: Var, seed: u64) -> Result<Var> {
    let [fc1, fc2, out] = layers else {
        return Err(Error::Config(format!("final head needs 3 layers, got {}", layers.len())));
    };
    let h = fc1.apply(s, x)?;
    let h = fc2.apply(s, h)?;
    let h = s.tape.dropout(h, FINAL_DROPOUT, s.training, seed)?;
    out.apply(s, h)
}
