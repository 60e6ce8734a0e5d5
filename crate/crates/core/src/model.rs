//! A codec graph bound to parameters: layout, initialisation, forward pass,
//! and the hybrid loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    apply_layers, coding_block, decoder_head_layers, embedding_layers, final_head, final_head_layers, LayerKind, EMBED_DIM,
    LayerSpec,
};
use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, floored_error};
use crate::graph::{validate_graph, EdgeTransform, GraphSpec, NodeId};
use crate::params::{ParamSpec, ParamStore, RunningStats, Session};
use crate::point::{downsample_gather, upsample_nearest, SamplingHierarchy};
use crate::scalar::Scalar;
use crate::supervision::{loss_ds, loss_hybrid, node_loss, LossReport};
use crate::tape::{BatchStats, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Embedding,
    Node(NodeId),
    Head(NodeId),
    FinalHead,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub section: Section,
    pub layers: Vec<LayerSpec>,
}

pub fn node_prefix(id: NodeId) -> String {
    format!("node.{}.{}", id.row, id.col)
}

pub fn head_prefix(id: NodeId) -> String {
    format!("head.{}.{}", id.row, id.col)
}

/// Every layer of the model in registration order: embedding, coding
/// blocks in execution order, supervision heads, final head.
/// The final head reads the output node upsampled to full resolution
/// next to the full-resolution embedding.
pub fn final_head_width(g: &GraphSpec) -> usize {
    g.dims.width(0) + EMBED_DIM
}

pub fn model_layout(g: &GraphSpec, d_in: usize, classes: usize) -> Result<Vec<LayoutEntry>> {
    let mut out = vec![LayoutEntry {
        section: Section::Embedding,
        layers: embedding_layers(d_in)?,
    }];
    out.extend(g.nodes.iter().map(|n| LayoutEntry {
        section: Section::Node(n.id),
        layers: n.block.layers(&node_prefix(n.id)),
    }));
    for &id in &g.supervised {
        let width = g
            .node(id)
            .ok_or_else(|| Error::Graph(format!("supervised node {id} missing")))?
            .block
            .out_dim;
        out.push(LayoutEntry {
            section: Section::Head(id),
            layers: decoder_head_layers(&head_prefix(id), width, classes),
        });
    }
    out.push(LayoutEntry {
        section: Section::FinalHead,
        layers: final_head_layers(final_head_width(g), g.dims.width_mult, classes),
    });
    Ok(out)
}

/// One point cloud prepared for a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a, T> {
    /// `n×d_in` point features.
    pub features: &'a Tensor<T>,
    pub hierarchy: &'a SamplingHierarchy,
    /// Full-resolution labels; required for losses.
    pub labels: Option<&'a [usize]>,
}

pub struct ForwardOutput {
    pub nodes: Vec<(NodeId, Var)>,
    /// Row-resolution logits of each supervised node.
    pub heads: Vec<(NodeId, Var)>,
    /// Full-resolution logits of the final head.
    pub logits: Var,
}

impl ForwardOutput {
    pub fn node(&self, id: NodeId) -> Option<Var> {
        self.nodes.iter().find(|(n, _)| *n == id).map(|&(_, v)| v)
    }
}

/// Tape handles of the loss terms.
pub struct LossVars {
    pub per_node: Vec<(NodeId, Var)>,
    pub l_ds: Var,
    pub l_oa: Var,
    pub l_h: Var,
}

/// Result of [`Model::evaluate`].
pub struct Evaluation<T> {
    pub report: Option<LossReport<T>>,
    /// One tensor per stored parameter, in store order.
    pub grads: Option<Vec<Tensor<T>>>,
    pub batch_stats: Vec<(String, BatchStats<T>)>,
    pub logits: Tensor<T>,
    /// Parameters and scalars bound during the pass.
    pub bound: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub graph: GraphSpec,
    pub d_in: usize,
    pub classes: usize,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(graph: GraphSpec, d_in: usize, classes: usize, seed: u64) -> Result<Self> {
        validate_graph(&graph)?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let layout = model_layout(&graph, d_in, classes)?;
        let specs: Vec<ParamSpec> = layout
            .iter()
            .flat_map(|e| &e.layers)
            .flat_map(LayerSpec::param_specs)
            .collect();
        let mut params = ParamStore::init(&specs, seed)?;
        for layer in layout.iter().flat_map(|e| &e.layers) {
            if layer.kind == LayerKind::Dense {
                params.running.insert(layer.name.clone(), RunningStats::new(layer.fan_out));
            }
        }
        Ok(Self {
            graph,
            d_in,
            classes,
            params,
        })
    }

    pub fn layout(&self) -> Result<Vec<LayoutEntry>> {
        model_layout(&self.graph, self.d_in, self.classes)
    }

    fn check_input(&self, input: &ModelInput<'_, T>) -> Result<()> {
        let h = input.hierarchy;
        if h.depth() < self.graph.levels + 1 {
            return Err(Error::Shape(format!(
                "hierarchy has {} rows, graph needs {}",
                h.depth(),
                self.graph.levels + 1
            )));
        }
        if input.features.shape() != [h.full_len, self.d_in] {
            return Err(Error::Shape(format!(
                "features {:?} do not match {} points × {} channels",
                input.features.shape(),
                h.full_len,
                self.d_in
            )));
        }
        if self.graph.block.kind == crate::blocks::BlockKind::LocalAgg && h.k != self.graph.block.k {
            return Err(Error::Shape(format!(
                "hierarchy built with K={}, blocks expect K={}",
                h.k, self.graph.block.k
            )));
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<'_, T>, input: &ModelInput<'_, T>, dropout_seed: u64) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let hier = input.hierarchy;
        let x = s.tape.constant(input.features.clone());
        let embedded = apply_layers(s, &embedding_layers(self.d_in)?, x)?;
        let mut outputs: Vec<(NodeId, Var)> = Vec::with_capacity(self.graph.nodes.len());
        let lookup = |outs: &[(NodeId, Var)], id: NodeId| {
            outs.iter()
                .find(|(n, _)| *n == id)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::Graph(format!("{id} used before it was computed")))
        };
        for node in &self.graph.nodes {
            let id = node.id;
            let row = hier.row(id.row)?;
            let x = if node.inputs.is_empty() {
                downsample_gather(&mut s.tape, embedded, hier, 0)?
            } else {
                let mut parts = Vec::with_capacity(node.inputs.len());
                for inp in &node.inputs {
                    let src = lookup(&outputs, inp.source)?;
                    let v = match inp.transform {
                        EdgeTransform::Horizontal | EdgeTransform::LongSkip => src,
                        EdgeTransform::Up => upsample_nearest(&mut s.tape, src, hier, inp.source.row)?,
                        EdgeTransform::Down => downsample_gather(&mut s.tape, src, hier, id.row)?,
                    };
                    parts.push(v);
                }
                s.tape.concat(&parts, 1)?
            };
            let y = coding_block(s, &node.block, &node_prefix(id), x, &row.coords, &row.knn)
                .map_err(|e| match e {
                    Error::Shape(m) => Error::Shape(format!("at {id}: {m}")),
                    other => other,
                })?;
            outputs.push((id, y));
        }
        let mut heads = Vec::with_capacity(self.graph.supervised.len());
        for &id in &self.graph.supervised {
            let width = self.graph.node(id).map_or(0, |n| n.block.out_dim);
            let layers = decoder_head_layers(&head_prefix(id), width, self.classes);
            let logits = apply_layers(s, &layers, lookup(&outputs, id)?)?;
            heads.push((id, logits));
        }
        let last = lookup(&outputs, self.graph.output_node())?;
        let up = upsample_nearest(&mut s.tape, last, hier, 0)?;
        let full = s.tape.concat(&[up, embedded], 1)?;
        let layers = final_head_layers(final_head_width(&self.graph), self.graph.dims.width_mult, self.classes);
        let logits = final_head(s, &layers, full, dropout_seed)?;
        Ok(ForwardOutput {
            nodes: outputs,
            heads,
            logits,
        })
    }

    /// Hybrid loss: mean supervised-node loss plus final-output loss.
    pub fn loss(
        &self,
        s: &mut Session<'_, T>,
        out: &ForwardOutput,
        labels: &[usize],
        hier: &SamplingHierarchy,
    ) -> Result<LossVars> {
        let mut per_node = Vec::with_capacity(out.heads.len());
        for &(id, logits) in &out.heads {
            per_node.push((id, node_loss(&mut s.tape, logits, labels, hier, id.row)?));
        }
        let vars: Vec<Var> = per_node.iter().map(|&(_, v)| v).collect();
        let l_ds = loss_ds(&mut s.tape, &vars)?;
        let l_oa = s.tape.softmax_cross_entropy(out.logits, labels)?;
        let l_h = if per_node.is_empty() { l_oa } else { s.tape.add(l_ds, l_oa)? };
        Ok(LossVars {
            per_node,
            l_ds,
            l_oa,
            l_h,
        })
    }

    /// Forward, loss when labels are present, and gradients of `l_h` when
    /// requested.
    pub fn evaluate(
        &self,
        input: &ModelInput<'_, T>,
        training: bool,
        dropout_seed: u64,
        want_grads: bool,
    ) -> Result<Evaluation<T>> {
        let mut s = Session::new(&self.params, training);
        let out = self.forward(&mut s, input, dropout_seed)?;
        let mut report = None;
        let mut grads = None;
        if let Some(labels) = input.labels {
            let lv = self.loss(&mut s, &out, labels, input.hierarchy)?;
            let value = |v: Var| s.tape.value(v).item();
            report = Some(loss_hybrid(
                lv.per_node.iter().map(|&(id, v)| (id, value(v))).collect(),
                value(lv.l_ds),
                value(lv.l_oa),
                self.classes,
                self.graph.levels,
            )?);
            if want_grads {
                let g = s.tape.backward(lv.l_h)?;
                grads = Some(s.param_grads(&g));
            }
        } else if want_grads {
            return Err(Error::Input("gradients need labels".into()));
        }
        Ok(Evaluation {
            report,
            grads,
            bound: s.bound_counts(),
            logits: s.tape.value(out.logits).clone(),
            batch_stats: std::mem::take(&mut s.batch_stats),
        })
    }

    /// Largest [`floored_error`] between tape gradients of `l_h` and central
    /// differences with step `h`, over up to `per_tensor` sampled
    /// coordinates of every parameter tensor.
    pub fn grad_check(&self, input: &ModelInput<'_, T>, training: bool, per_tensor: usize, h: f64) -> Result<f64> {
        let analytic = self
            .evaluate(input, training, 0, true)?
            .grads
            .expect("labels are required for gradients");
        let mut rng = ChaCha8Rng::seed_from_u64(per_tensor as u64);
        let mut worst: f64 = 0.0;
        for (k, tensor) in self.params.tensors().iter().enumerate() {
            let coords: Vec<usize> = if tensor.numel() <= per_tensor {
                (0..tensor.numel()).collect()
            } else {
                rand::seq::index::sample(&mut rng, tensor.numel(), per_tensor).into_vec()
            };
            let mut probe = self.clone();
            let eval = |t: &Tensor<T>| -> Result<f64> {
                probe.params.tensors_mut()[k] = t.clone();
                let r = probe.evaluate(input, training, 0, false)?;
                Ok(r.report.map_or(0.0, |r| r.l_h.as_f64()))
            };
            let numeric = central_difference(eval, tensor, &coords, h)?;
            for (&c, n) in coords.iter().zip(numeric) {
                worst = worst.max(floored_error(analytic[k].data()[c].as_f64(), n));
            }
        }
        Ok(worst)
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_shared_params(&mut self, other: &Model<T>) -> usize {
        let mut copied = 0;
        for (name, t) in other.params.iter() {
            if let Some(dst) = self.params.get_mut(name) {
                if dst.shape() == t.shape() {
                    *dst = t.clone();
                    copied += 1;
                }
            }
        }
        for (name, stats) in &other.params.running {
            if let Some(dst) = self.params.running.get_mut(name) {
                if dst.mean.len() == stats.mean.len() {
                    *dst = stats.clone();
                }
            }
        }
        copied
    }
}
