//! Encoder–decoder set-prediction transformer with a task encoder for
//! conditioned action queries.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::{AttnComponent, AttnTag, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::{DetectionSet, QueryPrediction};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature dimension of the input sequences.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_queries: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Foreground classes; the head emits one extra "no action" logit.
    pub num_classes: usize,
    /// Length of the target-category one-hot block of the task vector.
    pub num_target_categories: usize,
    /// Largest ordinal index the task vector can express.
    pub n_max: usize,
}

/// Named configuration presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small model that trains on one CPU core in minutes.
    Desk,
    /// Hidden 256, 40 queries, 2 encoder and 4 decoder layers.
    Paper,
}

impl ModelConfig {
    pub fn desk(input_dim: usize, num_target_categories: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 64,
            num_queries: 16,
            encoder_layers: 2,
            decoder_layers: 4,
            heads: 4,
            ffn_dim: 128,
            num_classes: 1,
            num_target_categories,
            n_max: 12,
        }
    }

    pub fn paper(input_dim: usize, num_target_categories: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 256,
            num_queries: 40,
            encoder_layers: 2,
            decoder_layers: 4,
            heads: 8,
            ffn_dim: 1024,
            num_classes: 1,
            num_target_categories,
            n_max: 12,
        }
    }

    pub fn for_profile(profile: Profile, input_dim: usize, num_target_categories: usize) -> Self {
        match profile {
            Profile::Desk => Self::desk(input_dim, num_target_categories),
            Profile::Paper => Self::paper(input_dim, num_target_categories),
        }
    }

    /// Width of the concatenated `[z_b, z_o, z_s]` task vector.
    pub fn task_input_dim(&self) -> usize {
        self.num_target_categories + 2 * self.n_max + 1 + 5
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_queries", self.num_queries),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("num_classes", self.num_classes),
            ("num_target_categories", self.num_target_categories),
            ("n_max", self.n_max),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub norm1: Norm,
    pub attn: AttnBlock,
    pub norm2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub norm1: Norm,
    pub self_attn: AttnBlock,
    pub norm2: Norm,
    pub cross_attn: AttnBlock,
    pub norm3: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub input_proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub memory_norm: Norm,
    pub queries: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub final_norm: Norm,
    pub class_head: Linear,
    pub reg: [Linear; 3],
    pub task: [Linear; 3],
}

/// Parameter groups, used to sample coordinates for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Attention,
    Encoder,
    Decoder,
    Heads,
    TaskEncoder,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Attention,
        Component::Encoder,
        Component::Decoder,
        Component::Heads,
        Component::TaskEncoder,
    ];

    /// Classifies a parameter by name.
    pub fn of(name: &str) -> Component {
        if name.starts_with("task.") {
            Component::TaskEncoder
        } else if name.starts_with("class_head.") || name.starts_with("reg.") {
            Component::Heads
        } else if name.contains("attn.") {
            Component::Attention
        } else if name.starts_with("encoder.") || name.starts_with("input_proj.") {
            Component::Encoder
        } else {
            Component::Decoder
        }
    }
}

/// Graph handles produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `batch * num_queries` rows of `num_classes + 1` logits, "no action" last.
    pub logits: Var,
    /// `batch * num_queries` rows of `(center, width)` in (0, 1).
    pub boxes: Var,
    pub memory: Var,
    pub decoder_states: Var,
}

/// The detection transformer: parameters plus the layout that names them.
#[derive(Clone, Debug)]
pub struct DetectionTransformer {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Rng,
}

impl Init<'_> {
    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        self.store
            .register(name, Tensor::matrix(fan_in, fan_out, data))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.xavier(format!("{name}.weight"), fan_in, fan_out);
        let b = self
            .store
            .register(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        let gamma = self
            .store
            .register(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0));
        let beta = self
            .store
            .register(format!("{name}.beta"), Tensor::zeros(&[1, dim]));
        Norm { gamma, beta }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnBlock {
        AttnBlock {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }
}

/// Fixed sinusoidal encoding of time steps `0..len`, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data)
}

impl DetectionTransformer {
    /// Randomly initialized model; `seed` fully determines the weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: rng::stream(seed, rng::tag::INIT),
        };
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let input_proj = init.linear("input_proj", config.input_dim, d);
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderLayer {
                    norm1: init.norm(&format!("{p}.norm1"), d),
                    attn: init.attn(&format!("{p}.self_attn"), d),
                    norm2: init.norm(&format!("{p}.norm2"), d),
                    ff1: init.linear(&format!("{p}.ff1"), d, f),
                    ff2: init.linear(&format!("{p}.ff2"), f, d),
                }
            })
            .collect();
        let memory_norm = init.norm("memory_norm", d);
        let queries = {
            let data = (0..config.num_queries * d)
                .map(|_| StandardNormal.sample(&mut init.rng))
                .collect();
            init.store
                .register("queries", Tensor::matrix(config.num_queries, d, data))
        };
        let decoder = (0..config.decoder_layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderLayer {
                    norm1: init.norm(&format!("{p}.norm1"), d),
                    self_attn: init.attn(&format!("{p}.self_attn"), d),
                    norm2: init.norm(&format!("{p}.norm2"), d),
                    cross_attn: init.attn(&format!("{p}.cross_attn"), d),
                    norm3: init.norm(&format!("{p}.norm3"), d),
                    ff1: init.linear(&format!("{p}.ff1"), d, f),
                    ff2: init.linear(&format!("{p}.ff2"), f, d),
                }
            })
            .collect();
        let final_norm = init.norm("final_norm", d);
        let class_head = init.linear("class_head", d, config.num_classes + 1);
        let reg = [
            init.linear("reg.0", d, d),
            init.linear("reg.1", d, d),
            init.linear("reg.2", d, 2),
        ];
        let t_in = config.task_input_dim();
        let task = [
            init.linear("task.0", t_in, d),
            init.linear("task.1", d, d),
            init.linear("task.2", d, d),
        ];
        let layout = Layout {
            input_proj,
            encoder,
            memory_norm,
            queries,
            decoder,
            final_norm,
            class_head,
            reg,
            task,
        };
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters of the classification head.
    pub fn class_head_ids(&self) -> [ParamId; 2] {
        [self.layout.class_head.w, self.layout.class_head.b]
    }

    pub fn task_encoder_ids(&self) -> Vec<ParamId> {
        self.layout.task.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Replaces the classification head with a freshly initialized one for
    /// `num_classes` foreground classes.
    pub fn reinit_class_head(&mut self, num_classes: usize, seed: u64) {
        let d = self.config.hidden_dim;
        let mut rng = rng::stream(seed, rng::tag::HEAD);
        let limit = (6.0 / (d + num_classes + 1) as f64).sqrt();
        let w = (0..d * (num_classes + 1))
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let head = self.layout.class_head;
        self.params
            .reshape_param(head.w, Tensor::matrix(d, num_classes + 1, w));
        self.params
            .reshape_param(head.b, Tensor::zeros(&[1, num_classes + 1]));
        self.config.num_classes = num_classes;
    }

    /// Zeroes the output projection of every residual branch so each block
    /// reduces to its skip connection.
    pub fn zero_residual_branches(&mut self) {
        let mut ids = Vec::new();
        for l in &self.layout.encoder {
            ids.extend([l.attn.o.w, l.attn.o.b, l.ff2.w, l.ff2.b]);
        }
        for l in &self.layout.decoder {
            ids.extend([
                l.self_attn.o.w,
                l.self_attn.o.b,
                l.cross_attn.o.w,
                l.cross_attn.o.b,
                l.ff2.w,
                l.ff2.b,
            ]);
        }
        for id in ids {
            self.params.value_mut(id).data_mut().fill(0.0);
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        g.affine(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
        let gamma = g.param(&self.params, n.gamma);
        let beta = g.param(&self.params, n.beta);
        g.layer_norm(x, gamma, beta)
    }

    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        g: &mut Graph,
        query_in: Var,
        key_in: Var,
        block: AttnBlock,
        batch: usize,
        tag: AttnTag,
    ) -> Result<Var> {
        let q = self.linear(g, query_in, block.q)?;
        let k = self.linear(g, key_in, block.k)?;
        let v = self.linear(g, key_in, block.v)?;
        let a = g.attention(q, k, v, batch, self.config.heads, Some(tag))?;
        self.linear(g, a, block.o)
    }

    fn ffn(&self, g: &mut Graph, x: Var, ff1: Linear, ff2: Linear) -> Result<Var> {
        let h = self.linear(g, x, ff1)?;
        let h = g.relu(h);
        self.linear(g, h, ff2)
    }

    /// Projects `batch` stacked sequences of `seq_len` rows to the hidden
    /// width, adds `positions` (`seq_len x hidden`) and runs the encoder.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        features: Var,
        positions: &Tensor,
        batch: usize,
    ) -> Result<Var> {
        let d = self.config.hidden_dim;
        let rows = g.value(features).rows();
        if g.value(features).cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "features have {} columns, model expects {}",
                g.value(features).cols(),
                self.config.input_dim
            )));
        }
        if batch == 0 || rows % batch != 0 || positions.rows() * batch != rows || positions.cols() != d {
            return Err(Error::Shape(format!(
                "positions {:?} do not match {rows} rows in {batch} items",
                positions.shape()
            )));
        }
        let pos = g.input(positions.clone());
        let pos = g.tile(pos, batch);
        let x = self.linear(g, features, self.layout.input_proj)?;
        let mut x = g.add(x, pos)?;
        for (i, layer) in self.layout.encoder.iter().enumerate() {
            let h = self.norm(g, x, layer.norm1)?;
            let tag = AttnTag {
                component: AttnComponent::EncoderSelf,
                layer: i,
            };
            let a = self.mha(g, h, h, layer.attn, batch, tag)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, layer.norm2)?;
            let f = self.ffn(g, h, layer.ff1, layer.ff2)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    /// Learned action queries tiled over the batch, optionally shifted by the
    /// task-encoder projection of one task vector per item.
    pub fn queries(&self, g: &mut Graph, batch: usize, task_vectors: Option<&Tensor>) -> Result<Var> {
        let q = g.param(&self.params, self.layout.queries);
        let q = g.tile(q, batch);
        match task_vectors {
            None => Ok(q),
            Some(tv) => {
                if tv.rows() != batch {
                    return Err(Error::Shape(format!(
                        "{} task vectors for a batch of {batch}",
                        tv.rows()
                    )));
                }
                let e = self.task_encode(g, tv)?;
                let e = g.repeat_rows(e, self.config.num_queries);
                g.add(q, e)
            }
        }
    }

    /// `E(z)`: three affine layers with ReLU between them.
    pub fn task_encode(&self, g: &mut Graph, task_vectors: &Tensor) -> Result<Var> {
        if task_vectors.cols() != self.config.task_input_dim() {
            return Err(Error::Shape(format!(
                "task vector width {} != {}",
                task_vectors.cols(),
                self.config.task_input_dim()
            )));
        }
        let z = g.input(task_vectors.clone());
        let [l0, l1, l2] = self.layout.task;
        let h = self.linear(g, z, l0)?;
        let h = g.relu(h);
        let h = self.linear(g, h, l1)?;
        let h = g.relu(h);
        self.linear(g, h, l2)
    }

    /// Runs the decoder stack; returns the final-normalized query states.
    pub fn decoder_forward(&self, g: &mut Graph, memory: Var, queries: Var, batch: usize) -> Result<Var> {
        let mem = self.norm(g, memory, self.layout.memory_norm)?;
        let mut t = queries;
        for (i, layer) in self.layout.decoder.iter().enumerate() {
            let h = self.norm(g, t, layer.norm1)?;
            let tag = AttnTag {
                component: AttnComponent::DecoderSelf,
                layer: i,
            };
            let a = self.mha(g, h, h, layer.self_attn, batch, tag)?;
            t = g.add(t, a)?;
            let h = self.norm(g, t, layer.norm2)?;
            let tag = AttnTag {
                component: AttnComponent::DecoderCross,
                layer: i,
            };
            let a = self.mha(g, h, mem, layer.cross_attn, batch, tag)?;
            t = g.add(t, a)?;
            let h = self.norm(g, t, layer.norm3)?;
            let f = self.ffn(g, h, layer.ff1, layer.ff2)?;
            t = g.add(t, f)?;
        }
        self.norm(g, t, self.layout.final_norm)
    }

    /// Classification logits and squashed `(center, width)` per query.
    pub fn heads_forward(&self, g: &mut Graph, states: Var) -> Result<(Var, Var)> {
        let logits = self.linear(g, states, self.layout.class_head)?;
        let [r0, r1, r2] = self.layout.reg;
        let h = self.linear(g, states, r0)?;
        let h = g.relu(h);
        let h = self.linear(g, h, r1)?;
        let h = g.relu(h);
        let raw = self.linear(g, h, r2)?;
        Ok((logits, g.sigmoid(raw)))
    }

    /// Full forward pass over a batch of equal-length `L x D` sequences.
    pub fn forward(
        &self,
        g: &mut Graph,
        sequences: &[&Tensor],
        task_vectors: Option<&Tensor>,
    ) -> Result<ForwardOutput> {
        let batch = sequences.len();
        let Some(first) = sequences.first() else {
            return Err(Error::Shape("empty batch".into()));
        };
        let len = first.rows();
        let mut data = Vec::with_capacity(batch * len * self.config.input_dim);
        for s in sequences {
            if s.rows() != len || s.cols() != self.config.input_dim {
                return Err(Error::Shape("sequences in a batch must share one shape".into()));
            }
            data.extend_from_slice(s.data());
        }
        let x = g.input(Tensor::matrix(batch * len, self.config.input_dim, data));
        let positions = sinusoidal_positions(len, self.config.hidden_dim);
        let memory = self.encoder_forward(g, x, &positions, batch)?;
        let queries = self.queries(g, batch, task_vectors)?;
        let states = self.decoder_forward(g, memory, queries, batch)?;
        let (logits, boxes) = self.heads_forward(g, states)?;
        Ok(ForwardOutput {
            logits,
            boxes,
            memory,
            decoder_states: states,
        })
    }

    /// Inference without gradients; one [`DetectionSet`] per sequence.
    pub fn predict(&self, sequences: &[&Tensor], task_vectors: Option<&Tensor>) -> Result<Vec<DetectionSet>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, sequences, task_vectors)?;
        Ok(detection_sets(
            g.value(out.logits),
            g.value(out.boxes),
            sequences.len(),
        ))
    }

    /// Copies every parameter whose name and shape match `other`, except
    /// those listed in `skip`. Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore, skip: &[ParamId]) -> usize {
        let mut copied = 0;
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            if skip.contains(&id) {
                continue;
            }
            let name = self.params.name(id).to_string();
            if let Some(src) = other.id(&name) {
                let v = other.value(src);
                if v.shape() == self.params.value(id).shape() {
                    self.params.value_mut(id).data_mut().copy_from_slice(v.data());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Reassembles a model from a checkpointed parameter store.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let src = params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let v = params.value(src).clone();
            model
                .params
                .set(id, v)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }
}

/// Softmaxes logits and pairs them with intervals, `batch` items of
/// `rows / batch` queries each.
pub fn detection_sets(logits: &Tensor, boxes: &Tensor, batch: usize) -> Vec<DetectionSet> {
    let m = logits.rows() / batch;
    (0..batch)
        .map(|b| DetectionSet {
            queries: (0..m)
                .map(|j| {
                    let r = b * m + j;
                    let mut probs = logits.row(r).to_vec();
                    super::graph::softmax_in_place(&mut probs);
                    let bx = boxes.row(r);
                    QueryPrediction {
                        probs,
                        center: bx[0],
                        width: bx[1],
                    }
                })
                .collect(),
        })
        .collect()
}
