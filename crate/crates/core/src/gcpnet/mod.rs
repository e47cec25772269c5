//! The geometry-complete denoising network.
//!
//! Every node carries `h` invariant scalars and `m` equivariant 3D vectors;
//! every directed edge carries `e` radial-basis scalars and `x` vector
//! channels (one unit displacement, zero padding). A GCP block maps paired
//! scalar/vector inputs to paired outputs:
//!
//! ```text
//! v_hidden = Σ_k V_k · D_k                      channel mixing only
//! s        = act(Σ_k S_k · W_k + ‖v_hidden‖ · W_n + frame(v_hidden) · W_f + b)
//! v_out    = (v_hidden · U) ⊙ σ(s · G + g)     per-channel scalar gate
//! ```
//!
//! `frame(·)` projects one learned vector channel onto the local frame axes
//! `(a, b, c)` of each edge (averaged over incident edges at node level). The
//! `b` axis flips under reflection, which makes the scalar path sensitive to
//! chirality. Vectors are only ever formed by linear channel mixing and
//! scalar gating, so rotating the input coordinates rotates every vector
//! feature and leaves every scalar unchanged.
//!
//! A layer runs `ω` message GCPs over `[h_i, h_j, e_ij] / [χ_i, χ_j, ξ_ij]`,
//! optionally gates scalar messages with scalar message attention (SMA),
//! aggregates over neighbours, applies a residual node GCP, and moves atoms by
//! the single vector channel of a dedicated position GCP before re-centering.

mod graph;
mod params;

use std::rc::Rc;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moldata::FEATURE_DIM;
use crate::tape::{Mat, Tape, Var};

pub use graph::GraphBatch;
pub use params::ParameterSet;

use params::uniform_init;

const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Sigmoid,
}

/// The ablation rows: the full model, no frames, no SMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Full,
    NoFrames,
    NoSma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcpNetConfig {
    pub num_layers: usize,
    pub message_passes: usize,
    pub node_scalar_dim: usize,
    pub node_vector_dim: usize,
    pub edge_scalar_dim: usize,
    pub edge_vector_dim: usize,
    pub aggregation: Aggregation,
    pub activation: Activation,
    pub use_frames: bool,
    pub use_sma: bool,
    pub zero_init_heads: bool,
    pub cutoff: Option<f64>,
    pub rbf_max: f64,
    pub frame_eps: f64,
}

impl Default for GcpNetConfig {
    fn default() -> Self {
        GcpNetConfig {
            num_layers: 9,
            message_passes: 1,
            node_scalar_dim: 256,
            node_vector_dim: 32,
            edge_scalar_dim: 64,
            edge_vector_dim: 16,
            aggregation: Aggregation::Mean,
            activation: Activation::Silu,
            use_frames: true,
            use_sma: true,
            zero_init_heads: true,
            cutoff: None,
            rbf_max: 10.0,
            frame_eps: crate::geometry::FRAME_EPS,
        }
    }
}

impl GcpNetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("message_passes", self.message_passes),
            ("node_scalar_dim", self.node_scalar_dim),
            ("node_vector_dim", self.node_vector_dim),
            ("edge_scalar_dim", self.edge_scalar_dim),
            ("edge_vector_dim", self.edge_vector_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("model.{name} must be at least 1")));
            }
        }
        if !(self.rbf_max > 0.0 && self.rbf_max.is_finite()) {
            return Err(Error::InvalidArgument("model.rbf_max must be positive".into()));
        }
        if !(self.frame_eps > 0.0) {
            return Err(Error::InvalidArgument("model.frame_eps must be positive".into()));
        }
        if let Some(c) = self.cutoff {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("model.cutoff must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn with_variant(mut self, variant: ModelVariant) -> Self {
        let (frames, sma) = match variant {
            ModelVariant::Full => (true, true),
            ModelVariant::NoFrames => (false, true),
            ModelVariant::NoSma => (true, false),
        };
        self.use_frames = frames;
        self.use_sma = sma;
        self
    }

    pub fn variant(&self) -> Option<ModelVariant> {
        match (self.use_frames, self.use_sma) {
            (true, true) => Some(ModelVariant::Full),
            (false, true) => Some(ModelVariant::NoFrames),
            (true, false) => Some(ModelVariant::NoSma),
            (false, false) => None,
        }
    }
}

#[derive(Debug, Clone)]
struct GcpIds {
    scalar_in: Vec<usize>,
    vector_down: Vec<usize>,
    norm: usize,
    frame: Option<(usize, usize)>,
    bias: usize,
    up: usize,
    gate: usize,
    gate_bias: usize,
}

#[derive(Debug, Clone)]
struct LayerIds {
    messages: Vec<GcpIds>,
    sma: Option<(usize, usize)>,
    node: GcpIds,
    position: GcpIds,
}

#[derive(Debug, Clone)]
struct ModelIds {
    embed: GcpIds,
    layers: Vec<LayerIds>,
    head: (usize, usize),
}

struct Builder<'a> {
    params: &'a mut ParameterSet,
    rng: ChaCha8Rng,
    frames: bool,
}

impl Builder<'_> {
    fn add(&mut self, name: String, value: Mat) -> Result<usize> {
        self.params.push(name, value)
    }

    fn gcp(
        &mut self,
        prefix: &str,
        scalar_in: &[usize],
        vector_in: &[usize],
        scalar_out: usize,
        vector_out: usize,
        zero_up: bool,
    ) -> Result<GcpIds> {
        let hidden = vector_in.iter().sum::<usize>().max(vector_out);
        let fan_in = scalar_in.iter().sum::<usize>() + hidden + if self.frames { 3 } else { 0 };
        let vec_fan = vector_in.iter().sum::<usize>();
        let mut ids = GcpIds {
            scalar_in: Vec::new(),
            vector_down: Vec::new(),
            norm: 0,
            frame: None,
            bias: 0,
            up: 0,
            gate: 0,
            gate_bias: 0,
        };
        for (k, &d) in scalar_in.iter().enumerate() {
            let w = uniform_init(&mut self.rng, d, scalar_out, fan_in);
            ids.scalar_in.push(self.add(format!("{prefix}.scalar_in.{k}"), w)?);
        }
        for (k, &c) in vector_in.iter().enumerate() {
            let w = uniform_init(&mut self.rng, c, hidden, vec_fan);
            ids.vector_down.push(self.add(format!("{prefix}.vector_down.{k}"), w)?);
        }
        let w = uniform_init(&mut self.rng, hidden, scalar_out, fan_in);
        ids.norm = self.add(format!("{prefix}.norm"), w)?;
        if self.frames {
            let down = uniform_init(&mut self.rng, hidden, 1, hidden);
            let down = self.add(format!("{prefix}.frame_down"), down)?;
            let proj = uniform_init(&mut self.rng, 3, scalar_out, fan_in);
            let proj = self.add(format!("{prefix}.frame"), proj)?;
            ids.frame = Some((down, proj));
        }
        ids.bias = self.add(format!("{prefix}.bias"), Mat::zeros((1, scalar_out)))?;
        let up = if zero_up {
            Mat::zeros((hidden, vector_out))
        } else {
            uniform_init(&mut self.rng, hidden, vector_out, hidden)
        };
        ids.up = self.add(format!("{prefix}.vector_up"), up)?;
        let gate = uniform_init(&mut self.rng, scalar_out, vector_out, scalar_out);
        ids.gate = self.add(format!("{prefix}.gate"), gate)?;
        ids.gate_bias = self.add(format!("{prefix}.gate_bias"), Mat::zeros((1, vector_out)))?;
        Ok(ids)
    }
}

fn build_layout(config: &GcpNetConfig, seed: u64) -> Result<(ModelIds, ParameterSet)> {
    config.validate()?;
    let mut params = ParameterSet::new();
    let mut b = Builder {
        params: &mut params,
        rng: ChaCha8Rng::seed_from_u64(seed),
        frames: config.use_frames,
    };
    let (h, m, e, x) = (
        config.node_scalar_dim,
        config.node_vector_dim,
        config.edge_scalar_dim,
        config.edge_vector_dim,
    );
    let embed = b.gcp("embed", &[FEATURE_DIM + 1], &[1], h, m, false)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let mut messages = Vec::with_capacity(config.message_passes);
        messages.push(b.gcp(&format!("layers.{l}.message.0"), &[h, h, e], &[m, m, x], h, m, false)?);
        for k in 1..config.message_passes {
            messages.push(b.gcp(&format!("layers.{l}.message.{k}"), &[h], &[m], h, m, false)?);
        }
        let sma = if config.use_sma {
            let w = uniform_init(&mut b.rng, h, 1, h);
            let w = b.add(format!("layers.{l}.sma.weight"), w)?;
            let bias = b.add(format!("layers.{l}.sma.bias"), Mat::zeros((1, 1)))?;
            Some((w, bias))
        } else {
            None
        };
        let node = b.gcp(&format!("layers.{l}.node"), &[h, h], &[m, m], h, m, false)?;
        let position = b.gcp(&format!("layers.{l}.position"), &[h], &[m], h, 1, config.zero_init_heads)?;
        layers.push(LayerIds {
            messages,
            sma,
            node,
            position,
        });
    }
    let head_w = if config.zero_init_heads {
        Mat::zeros((h, FEATURE_DIM))
    } else {
        uniform_init(&mut b.rng, h, FEATURE_DIM, h)
    };
    let head_w = b.add("head.weight".into(), head_w)?;
    let head_b = b.add("head.bias".into(), Mat::zeros((1, FEATURE_DIM)))?;
    Ok((
        ModelIds {
            embed,
            layers,
            head: (head_w, head_b),
        },
        params,
    ))
}

/// Outputs of one differentiable forward pass.
#[derive(Debug, Clone, Copy)]
pub struct NetOutput {
    pub eps_x: Var,
    pub eps_h: Var,
}

/// Network configuration plus its parameters.
#[derive(Debug, Clone)]
pub struct GcpNet {
    config: GcpNetConfig,
    ids: ModelIds,
    params: ParameterSet,
}

#[derive(Clone, Copy)]
enum Feat {
    Direct(Var),
    Recv(Var),
    Send(Var),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Level {
    Node,
    Edge,
}

struct Frames {
    axes: [Var; 3],
    ones: Var,
}

struct EdgeContext {
    rbf: Var,
    xi: Var,
    frames: Option<Frames>,
}

struct Ctx<'a, 't, 'p> {
    tape: &'t mut Tape<'p>,
    p: &'a [Var],
    graph: &'a GraphBatch,
    config: &'a GcpNetConfig,
}

impl Ctx<'_, '_, '_> {
    fn lin(&mut self, f: Feat, w: usize, group: usize) -> Var {
        let w = self.p[w];
        match f {
            Feat::Direct(v) => self.tape.matmul(v, w),
            Feat::Recv(v) => {
                let y = self.tape.matmul(v, w);
                self.tape.gather(y, &self.graph.recv.clone(), group)
            }
            Feat::Send(v) => {
                let y = self.tape.matmul(v, w);
                self.tape.gather(y, &self.graph.send.clone(), group)
            }
        }
    }

    fn project(&mut self, u: Var, frames: &Frames) -> Var {
        let parts: Vec<Var> = frames
            .axes
            .iter()
            .map(|&axis| {
                let prod = self.tape.mul(u, axis);
                self.tape.matmul(prod, frames.ones)
            })
            .collect();
        self.tape.concat_cols(&parts)
    }

    fn gcp(&mut self, ids: &GcpIds, scalars: &[Feat], vectors: &[Feat], level: Level, frames: Option<&Frames>) -> (Var, Var) {
        let mut v_hidden: Option<Var> = None;
        for (&f, &w) in vectors.iter().zip(&ids.vector_down) {
            let term = self.lin(f, w, 3);
            v_hidden = Some(match v_hidden {
                Some(acc) => self.tape.add(acc, term),
                None => term,
            });
        }
        let v_hidden = v_hidden.expect("a GCP block has at least one vector input");
        let norms = self.tape.group_norm(v_hidden, NORM_EPS);
        let mut pre = self.tape.matmul(norms, self.p[ids.norm]);
        for (&f, &w) in scalars.iter().zip(&ids.scalar_in) {
            let term = self.lin(f, w, 1);
            pre = self.tape.add(pre, term);
        }
        if let (Some((down, proj_w)), Some(frames)) = (ids.frame, frames) {
            let u = self.tape.matmul(v_hidden, self.p[down]);
            let rows = self.tape.shape(u).0 / 3;
            let u = self.tape.reshape(u, rows, 3);
            let proj = match level {
                Level::Edge => self.project(u, frames),
                Level::Node => {
                    let recv = self.graph.recv.clone();
                    let ue = self.tape.gather(u, &recv, 1);
                    let pe = self.project(ue, frames);
                    self.tape.scatter(pe, &recv, 1, &self.graph.mean_weight.clone())
                }
            };
            let term = self.tape.matmul(proj, self.p[proj_w]);
            pre = self.tape.add(pre, term);
        }
        let pre = self.tape.add_row(pre, self.p[ids.bias]);
        let s = match self.config.activation {
            Activation::Silu => self.tape.silu(pre),
            Activation::Sigmoid => self.tape.sigmoid(pre),
        };
        let v_up = self.tape.matmul(v_hidden, self.p[ids.up]);
        let logits = self.tape.matmul(s, self.p[ids.gate]);
        let logits = self.tape.add_row(logits, self.p[ids.gate_bias]);
        let gate = self.tape.sigmoid(logits);
        let gate = self.tape.repeat_rows(gate, 3);
        let v = self.tape.mul(v_up, gate);
        (s, v)
    }

    fn center(&mut self, x: Var) -> Var {
        let idx = self.graph.node_graph.clone();
        let cog = self.tape.scatter(x, &idx, 1, &self.graph.graph_weight.clone());
        let back = self.tape.gather(cog, &idx, 1);
        self.tape.sub(x, back)
    }

    fn edges(&mut self, x: Var) -> EdgeContext {
        let (recv, send) = (self.graph.recv.clone(), self.graph.send.clone());
        let eps = self.config.frame_eps;
        let xr = self.tape.gather(x, &recv, 1);
        let xs = self.tape.gather(x, &send, 1);
        let diff = self.tape.sub(xr, xs);
        let dist = self.tape.row_norm(diff);
        let unit = self.tape.normalize(diff, eps);
        let (centers, width) = rbf_centers(self.config);
        let rbf = self.tape.rbf(dist, &centers, width);
        let n_edges = self.graph.num_edges();
        let unit_v = self.tape.reshape(unit, 3 * n_edges, 1);
        let xi = if self.config.edge_vector_dim > 1 {
            let pad = self.tape.input(Mat::zeros((3 * n_edges, self.config.edge_vector_dim - 1)));
            self.tape.concat_cols(&[unit_v, pad])
        } else {
            unit_v
        };
        let frames = self.config.use_frames.then(|| {
            let cr = self.tape.cross(xr, xs);
            let b = self.tape.normalize(cr, eps);
            let c = self.tape.cross(unit, b);
            let ones = self.tape.input(Mat::ones((3, 1)));
            Frames {
                axes: [unit, b, c],
                ones,
            }
        });
        EdgeContext { rbf, xi, frames }
    }
}

fn rbf_centers(config: &GcpNetConfig) -> (Rc<[f64]>, f64) {
    let k = config.edge_scalar_dim;
    let centers: Vec<f64> = if k == 1 {
        vec![0.0]
    } else {
        (0..k).map(|i| config.rbf_max * i as f64 / (k - 1) as f64).collect()
    };
    (centers.into(), config.rbf_max / k as f64)
}

impl GcpNet {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: GcpNetConfig, seed: u64) -> Result<Self> {
        let (ids, params) = build_layout(&config, seed)?;
        Ok(GcpNet { config, ids, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_parts(config: GcpNetConfig, params: ParameterSet) -> Result<Self> {
        let (ids, fresh) = build_layout(&config, 0)?;
        if fresh.names() != params.names() {
            return Err(Error::InvalidArgument(
                "parameter names do not match the model configuration".into(),
            ));
        }
        for ((name, a), (_, b)) in fresh.iter().zip(params.iter()) {
            if a.dim() != b.dim() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{name}` has shape {:?}, configuration expects {:?}",
                    b.dim(),
                    a.dim()
                )));
            }
        }
        Ok(GcpNet { config, ids, params })
    }

    pub fn config(&self) -> &GcpNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Records a forward pass on `tape`, whose parameter slice must be this
    /// network's values. `vars[i]` is the tape leaf for parameter `i`.
    /// `t_frac` holds t/T per graph.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        graph: &GraphBatch,
        z_x: &Mat,
        z_h: &Mat,
        t_frac: &[f64],
    ) -> NetOutput {
        let n = graph.num_nodes();
        assert_eq!(z_x.dim(), (n, 3));
        assert_eq!(z_h.dim(), (n, FEATURE_DIM));
        assert_eq!(t_frac.len(), graph.num_graphs());
        let mut scalars_in = Mat::zeros((n, FEATURE_DIM + 1));
        scalars_in.slice_mut(ndarray::s![.., ..FEATURE_DIM]).assign(z_h);
        for (i, &g) in graph.node_graph.iter().enumerate() {
            scalars_in[[i, FEATURE_DIM]] = t_frac[g];
        }
        let mut ctx = Ctx {
            tape,
            p: vars,
            graph,
            config: &self.config,
        };
        let x0 = ctx.tape.input(z_x.clone());
        let mut x = x0;
        let mut shift: Option<Var> = None;
        let s_in = ctx.tape.input(scalars_in);
        let v_in = ctx.tape.reshape(x, 3 * n, 1);
        let mut edges = ctx.edges(x);
        let (mut h, mut v) = ctx.gcp(
            &self.ids.embed,
            &[Feat::Direct(s_in)],
            &[Feat::Direct(v_in)],
            Level::Node,
            edges.frames.as_ref(),
        );
        for (l, layer) in self.ids.layers.iter().enumerate() {
            if l > 0 {
                edges = ctx.edges(x);
            }
            let frames = edges.frames.as_ref();
            let (mut ms, mut mv) = ctx.gcp(
                &layer.messages[0],
                &[Feat::Recv(h), Feat::Send(h), Feat::Direct(edges.rbf)],
                &[Feat::Recv(v), Feat::Send(v), Feat::Direct(edges.xi)],
                Level::Edge,
                frames,
            );
            for ids in &layer.messages[1..] {
                let (ds, dv) = ctx.gcp(ids, &[Feat::Direct(ms)], &[Feat::Direct(mv)], Level::Edge, frames);
                ms = ctx.tape.add(ms, ds);
                mv = ctx.tape.add(mv, dv);
            }
            if let Some((w, b)) = layer.sma {
                let logits = ctx.tape.matmul(ms, ctx.p[w]);
                let logits = ctx.tape.add_row(logits, ctx.p[b]);
                let gate = ctx.tape.sigmoid(logits);
                ms = ctx.tape.mul_col(ms, gate);
            }
            let recv = graph.recv.clone();
            let weight = graph.agg_weight.clone();
            let agg_s = ctx.tape.scatter(ms, &recv, 1, &weight);
            let agg_v = ctx.tape.scatter(mv, &recv, 3, &weight);
            let (us, uv) = ctx.gcp(
                &layer.node,
                &[Feat::Direct(h), Feat::Direct(agg_s)],
                &[Feat::Direct(v), Feat::Direct(agg_v)],
                Level::Node,
                frames,
            );
            h = ctx.tape.add(h, us);
            v = ctx.tape.add(v, uv);
            let (_, chi) = ctx.gcp(&layer.position, &[Feat::Direct(h)], &[Feat::Direct(v)], Level::Node, frames);
            let chi = ctx.tape.reshape(chi, n, 3);
            let total = match shift {
                Some(prev) => ctx.tape.add(prev, chi),
                None => chi,
            };
            let total = ctx.center(total);
            shift = Some(total);
            x = ctx.tape.add(x0, total);
        }
        let (hw, hb) = self.ids.head;
        let eps_h = ctx.tape.matmul(h, ctx.p[hw]);
        let eps_h = ctx.tape.add_row(eps_h, ctx.p[hb]);
        let eps_x = shift.expect("at least one layer");
        NetOutput { eps_x, eps_h }
    }

    /// Evaluates the network on a stacked batch without keeping gradients.
    pub fn predict(&self, sizes: &[usize], z_x: &Mat, z_h: &Mat, t_frac: &[f64]) -> Result<(Mat, Mat)> {
        check_centered(sizes, z_x)?;
        let graph = GraphBatch::build(sizes, z_x, self.config.cutoff, self.config.aggregation);
        let mut tape = Tape::new(self.params.values());
        let vars: Vec<Var> = (0..self.params.len()).map(|i| tape.param(i)).collect();
        let out = self.forward(&mut tape, &vars, &graph, z_x, z_h, t_frac);
        Ok((tape.value(out.eps_x).clone(), tape.value(out.eps_h).clone()))
    }
}

/// Fails unless every graph's coordinates sum to zero within `1e-9·N`.
pub fn check_centered(sizes: &[usize], z_x: &Mat) -> Result<()> {
    let total: usize = sizes.iter().sum();
    if total != z_x.nrows() {
        return Err(Error::InvalidArgument(format!(
            "graph sizes cover {total} atoms but coordinates have {} rows",
            z_x.nrows()
        )));
    }
    let mut start = 0;
    for (g, &size) in sizes.iter().enumerate() {
        let block = z_x.slice(ndarray::s![start..start + size, ..]);
        let offset = block.sum_axis(Axis(0)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(offset <= 1e-9 * size as f64) {
            return Err(Error::NotCentered { graph: g, offset });
        }
        start += size;
    }
    Ok(())
}

/// Single-molecule denoiser evaluation at integer step `t` of `steps`.
pub fn denoiser_forward(net: &GcpNet, z_x: &Mat, z_h: &Mat, t: usize, steps: usize) -> Result<(Mat, Mat)> {
    if t > steps || steps == 0 {
        return Err(Error::InvalidArgument(format!("step {t} outside 0..={steps}")));
    }
    if z_h.nrows() != z_x.nrows() || z_h.ncols() != FEATURE_DIM {
        return Err(Error::InvalidArgument(format!(
            "features must be {}×{FEATURE_DIM}, got {:?}",
            z_x.nrows(),
            z_h.dim()
        )));
    }
    net.predict(&[z_x.nrows()], z_x, z_h, &[t as f64 / steps as f64])
}

/// Invariant edge scalars and equivariant edge vectors of a complete graph.
#[derive(Debug, Clone)]
pub struct EdgeFeatures {
    pub recv: Vec<usize>,
    pub send: Vec<usize>,
    /// E×e radial basis expansion of pair distances.
    pub scalars: Mat,
    /// (3E)×x vector block; channel 0 is the unit displacement.
    pub vectors: Mat,
}

pub fn init_edge_features(coords: &Mat, config: &GcpNetConfig) -> EdgeFeatures {
    let graph = GraphBatch::build(&[coords.nrows()], coords, config.cutoff, config.aggregation);
    let mut tape = Tape::new(&[]);
    let x = tape.input(coords.clone());
    let cfg = GcpNetConfig {
        use_frames: false,
        ..config.clone()
    };
    let mut ctx = Ctx {
        tape: &mut tape,
        p: &[],
        graph: &graph,
        config: &cfg,
    };
    let e = ctx.edges(x);
    EdgeFeatures {
        recv: graph.recv.to_vec(),
        send: graph.send.to_vec(),
        scalars: tape.value(e.rbf).clone(),
        vectors: tape.value(e.xi).clone(),
    }
}

/// Gates each message row by `σ(m·w + b)`; `w` is d×1 and `b` is 1×1.
pub fn scalar_message_attention(messages: &Mat, w: &Mat, b: &Mat) -> Mat {
    let logits = messages.dot(w) + b;
    let gate = logits.mapv(crate::tape::sigmoid);
    messages * &gate
}

impl crate::diffusion::Denoiser for GcpNet {
    fn predict(&self, sizes: &[usize], z_x: &Mat, z_h: &Mat, t_frac: &[f64]) -> Result<(Mat, Mat)> {
        GcpNet::predict(self, sizes, z_x, z_h, t_frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{centralize, random_rotation};
    use rand::Rng;

    fn tiny(frames: bool) -> GcpNetConfig {
        GcpNetConfig {
            num_layers: 2,
            node_scalar_dim: 6,
            node_vector_dim: 3,
            edge_scalar_dim: 5,
            edge_vector_dim: 2,
            use_frames: frames,
            zero_init_heads: false,
            ..Default::default()
        }
    }

    fn inputs(n: usize, seed: u64) -> (Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_shape_simple_fn((n, 3), || rng.random_range(-1.5..1.5));
        let h = Mat::from_shape_simple_fn((n, FEATURE_DIM), || rng.random_range(-1.0..1.0));
        (centralize(&x).0, h)
    }

    #[test]
    fn zero_init_heads_predict_zero() {
        let net = GcpNet::new(GcpNetConfig { num_layers: 2, node_scalar_dim: 8, node_vector_dim: 4, edge_scalar_dim: 4, edge_vector_dim: 2, ..Default::default() }, 1).unwrap();
        let (x, h) = inputs(5, 2);
        let (ex, eh) = denoiser_forward(&net, &x, &h, 10, 100).unwrap();
        assert_eq!(ex.dim(), (5, 3));
        assert_eq!(eh.dim(), (5, FEATURE_DIM));
        assert!(ex.iter().all(|v| *v == 0.0));
        assert!(eh.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_uncentered_input() {
        let net = GcpNet::new(tiny(true), 0).unwrap();
        let (mut x, h) = inputs(4, 3);
        x[[0, 0]] += 1.0;
        assert!(matches!(denoiser_forward(&net, &x, &h, 1, 10), Err(Error::NotCentered { .. })));
    }

    #[test]
    fn complete_graph_edge_count() {
        let (x, _) = inputs(5, 4);
        let e = init_edge_features(&x, &tiny(true));
        assert_eq!(e.recv.len(), 20);
        assert_eq!(e.scalars.dim(), (20, 5));
        assert_eq!(e.vectors.dim(), (60, 2));
        assert!(e.vectors.column(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn edge_scalars_are_rotation_invariant() {
        let (x, _) = inputs(6, 5);
        let q = random_rotation(9).rotation_only();
        let a = init_edge_features(&x, &tiny(true));
        let b = init_edge_features(&q.apply(&x), &tiny(true));
        let diff = (&a.scalars - &b.scalars).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn output_is_equivariant() {
        for frames in [true, false] {
            let net = GcpNet::new(tiny(frames), 7).unwrap();
            let (x, h) = inputs(7, 8);
            let (ex, eh) = denoiser_forward(&net, &x, &h, 3, 10).unwrap();
            let q = random_rotation(11).rotation_only();
            let (ex2, eh2) = denoiser_forward(&net, &q.apply(&x), &h, 3, 10).unwrap();
            let dx = (&q.apply(&ex) - &ex2).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let dh = (&eh - &eh2).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(dx < 1e-9 && dh < 1e-9, "frames={frames}: {dx} {dh}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        let net = GcpNet::new(tiny(true), 3).unwrap();
        let (x, h) = inputs(5, 6);
        let order = [3, 0, 4, 1, 2];
        let px = Mat::from_shape_fn((5, 3), |(i, k)| x[[order[i], k]]);
        let ph = Mat::from_shape_fn((5, FEATURE_DIM), |(i, k)| h[[order[i], k]]);
        let (ex, eh) = denoiser_forward(&net, &x, &h, 2, 10).unwrap();
        let (pex, peh) = denoiser_forward(&net, &px, &ph, 2, 10).unwrap();
        for i in 0..5 {
            for k in 0..3 {
                assert!((pex[[i, k]] - ex[[order[i], k]]).abs() < 1e-10);
            }
            for k in 0..FEATURE_DIM {
                assert!((peh[[i, k]] - eh[[order[i], k]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_atom_is_finite() {
        let net = GcpNet::new(tiny(true), 3).unwrap();
        let (ex, eh) = denoiser_forward(&net, &Mat::zeros((1, 3)), &Mat::ones((1, FEATURE_DIM)), 0, 10).unwrap();
        assert!(ex.iter().chain(eh.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn message_attention_gate_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mat::from_shape_simple_fn((4, 3), || rng.random_range(-2.0..2.0));
        let w = Mat::zeros((3, 1));
        assert_eq!(scalar_message_attention(&m, &w, &Mat::from_elem((1, 1), 1e4)), m);
        assert!(scalar_message_attention(&m, &w, &Mat::from_elem((1, 1), -1e4)).iter().all(|v| *v == 0.0));
        let w = Mat::from_shape_simple_fn((3, 1), || rng.random_range(-1.0..1.0));
        let out = scalar_message_attention(&m, &w, &Mat::zeros((1, 1)));
        for (o, i) in out.iter().zip(m.iter()) {
            assert!(o.abs() <= i.abs() && o * i >= 0.0);
        }
    }

    #[test]
    fn variants_change_parameter_sets() {
        let full = GcpNet::new(tiny(true), 0).unwrap();
        let no_frames = GcpNet::new(tiny(true).with_variant(ModelVariant::NoFrames), 0).unwrap();
        let no_sma = GcpNet::new(tiny(true).with_variant(ModelVariant::NoSma), 0).unwrap();
        assert!(full.params().position("layers.0.node.frame").is_some());
        assert!(no_frames.params().position("layers.0.node.frame").is_none());
        assert!(no_sma.params().position("layers.0.sma.weight").is_none());
        assert_eq!(no_frames.config().variant(), Some(ModelVariant::NoFrames));
    }

    #[test]
    fn from_parts_checks_layout() {
        let net = GcpNet::new(tiny(true), 0).unwrap();
        assert!(GcpNet::from_parts(tiny(true), net.params().clone()).is_ok());
        assert!(GcpNet::from_parts(tiny(false), net.params().clone()).is_err());
    }
}
