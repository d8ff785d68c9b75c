//! Feature-space graph reasoning across the boundary, shape and region
//! streams: soft-assignment projection onto K nodes, region-to-task
//! interaction, intra-graph convolution and reprojection to pixels.
//!
//! Layouts: pixel features `(B, N, C)`, node embeddings `(B, C, K)`,
//! assignments `(B, N, K)`, adjacency `(B, K, K)`.

use std::sync::Once;

use candle_core::{DType, Tensor, Var, D};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::RoutedFeatures;
use crate::error::{Error, Result};
use crate::nn::{softmax_last, Conv2d, Init, Scope};

/// Node norms below this are treated as zero.
pub const NODE_EPS: f64 = 1e-8;
/// Guard on the per-node assignment mass.
pub const MASS_EPS: f64 = 1e-12;
/// Node-count presets.
pub const NODE_PRESETS: [usize; 4] = [6, 12, 18, 24];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Identity => x.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Number of graph nodes K.
    pub nodes: usize,
    pub activation: Activation,
    /// Restrict each pixel to its `top_k` nearest support nodes in the
    /// reinforcement step; `None` connects all K.
    pub top_k: Option<usize>,
    pub fusion: Fusion,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            nodes: 12,
            activation: Activation::Relu,
            top_k: None,
            fusion: Fusion::Add,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::validation("graph node count must be at least 1"));
        }
        if matches!(self.top_k, Some(k) if k == 0 || k > self.nodes) {
            return Err(Error::validation(format!(
                "top_k must lie in 1..={}",
                self.nodes
            )));
        }
        Ok(())
    }
}

/// How region features are combined with boundary/shape features before
/// reinforcement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Add,
    Concat,
}

/// `(B, C, H, W)` to `(B, H*W, C)`.
pub fn to_pixels(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H*W, C)` to `(B, C, H, W)`.
pub fn from_pixels(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(Error::shape(format!(
            "{n} pixels cannot form a {h}x{w} map"
        )));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Node embeddings and the soft assignment that produced them.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `(B, C, K)`, unit-norm columns or zero.
    pub nodes: Tensor,
    /// `(B, N, K)`, row-stochastic.
    pub assign: Tensor,
}

static FEW_PIXELS: Once = Once::new();

/// Soft-assigns every pixel feature to K centers with per-center diagonal
/// scales and returns the normalized, assignment-weighted mean residual of
/// each center.
pub fn graph_project(f: &Tensor, centers: &Tensor, scales: &Tensor) -> Result<Projection> {
    let (_, n, c) = f.dims3()?;
    let (k, ct) = centers.dims2()?;
    if ct != c || scales.dims() != centers.dims() {
        return Err(Error::shape(format!(
            "features have {c} channels; centers {:?}, scales {:?}",
            centers.dims(),
            scales.dims()
        )));
    }
    if k == 0 {
        return Err(Error::validation("graph needs at least one node"));
    }
    let min_scale = scales.to_dtype(DType::F64)?.min_all()?.to_scalar::<f64>()?;
    if !(min_scale > 0.0) {
        return Err(Error::validation(format!(
            "scales must be positive, min is {min_scale}"
        )));
    }
    if k > n {
        FEW_PIXELS.call_once(|| log::warn!("{k} graph nodes exceed {n} pixels"));
    }
    // (B, N, K, C) scaled residuals
    let resid = f
        .unsqueeze(2)?
        .broadcast_sub(&centers.unsqueeze(0)?.unsqueeze(0)?)?
        .broadcast_div(&scales.unsqueeze(0)?.unsqueeze(0)?)?;
    let dist = resid.sqr()?.sum(D::Minus1)?;
    let assign = softmax_last(&(dist * -0.5)?)?;

    let mass = assign.sum(1)?; // (B, K)
    let g_star = resid
        .broadcast_mul(&assign.unsqueeze(3)?)?
        .sum(1)?
        .broadcast_div(&mass.maximum(MASS_EPS)?.unsqueeze(2)?)?;
    let sq = g_star.sqr()?.sum_keepdim(D::Minus1)?;
    let norm = sq.maximum(NODE_EPS * NODE_EPS)?.sqrt()?;
    let live = sq.ge(NODE_EPS * NODE_EPS)?.to_dtype(f.dtype())?;
    let nodes = g_star.broadcast_mul(&live)?.broadcast_div(&norm)?;
    Ok(Projection {
        nodes: nodes.transpose(1, 2)?.contiguous()?,
        assign,
    })
}

/// Gram matrix of the node columns.
pub fn adjacency(nodes: &Tensor) -> Result<Tensor> {
    Ok(nodes.transpose(1, 2)?.matmul(nodes)?)
}

/// Two bias-free linear layers with a ReLU between; maps zero to zero.
pub struct Mlp {
    w1: Tensor,
    w2: Tensor,
}

impl Mlp {
    pub fn new(scope: &mut Scope, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            w1: scope.param("w1", &[in_dim, hidden], Init::Kaiming(in_dim))?,
            w2: scope.param("w2", &[hidden, out_dim], Init::Kaiming(hidden))?,
        })
    }

    pub fn from_tensors(w1: Tensor, w2: Tensor) -> Self {
        Self { w1, w2 }
    }

    pub fn weights(&self) -> (&Tensor, &Tensor) {
        (&self.w1, &self.w2)
    }

    /// Applies to the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.w1)?
            .relu()?
            .broadcast_matmul(&self.w2)?)
    }
}

/// Key/value maps of the region graph, query map of the task graph and the
/// scalar transfer weight (initialized to zero).
pub struct InteractionParams {
    pub key: Mlp,
    pub value: Mlp,
    pub query: Mlp,
    pub weight: Tensor,
}

impl InteractionParams {
    pub fn new(scope: &mut Scope, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            key: Mlp::new(&mut scope.sub("key"), channels, hidden, hidden)?,
            value: Mlp::new(&mut scope.sub("value"), channels, hidden, channels)?,
            query: Mlp::new(&mut scope.sub("query"), channels, hidden, hidden)?,
            weight: scope.param("weight", &[1], Init::Zeros)?,
        })
    }
}

/// `W (A V)^T + G_task` with `A = Q K^T`, where Q comes from the task graph
/// and K, V from the region graph.
pub fn graph_interact(g_reg: &Tensor, g_task: &Tensor, p: &InteractionParams) -> Result<Tensor> {
    if g_reg.dims() != g_task.dims() {
        return Err(Error::shape(format!(
            "region graph {:?} and task graph {:?} differ",
            g_reg.dims(),
            g_task.dims()
        )));
    }
    let reg = g_reg.transpose(1, 2)?.contiguous()?;
    let task = g_task.transpose(1, 2)?.contiguous()?;
    let key = p.key.forward(&reg)?;
    let value = p.value.forward(&reg)?;
    let query = p.query.forward(&task)?;
    let a = query.matmul(&key.transpose(1, 2)?.contiguous()?)?;
    let moved = a.matmul(&value)?.transpose(1, 2)?;
    Ok(moved.broadcast_mul(&p.weight)?.add(g_task)?)
}

/// `(Phi(A G^T M))^T`: node-major graph convolution.
pub fn graph_reason(g: &Tensor, a: &Tensor, m: &Tensor, act: Activation) -> Result<Tensor> {
    let (_, c, k) = g.dims3()?;
    if a.dims()[1..] != [k, k] || m.dims() != [c, c] {
        return Err(Error::shape(format!(
            "graph {:?} needs adjacency (B,{k},{k}) and weight ({c},{c}), got {:?} and {:?}",
            g.dims(),
            a.dims(),
            m.dims()
        )));
    }
    let nodes = g.transpose(1, 2)?.contiguous()?;
    let out = act.apply(&a.matmul(&nodes)?.broadcast_matmul(m)?)?;
    Ok(out.transpose(1, 2)?.contiguous()?)
}

/// `Q G^T + F`.
pub fn graph_reproject(q: &Tensor, g: &Tensor, f: &Tensor) -> Result<Tensor> {
    let (b, n, k) = q.dims3()?;
    let (bg, c, kg) = g.dims3()?;
    if b != bg || k != kg || f.dims() != [b, n, c] {
        return Err(Error::shape(format!(
            "reprojection: assignment {:?}, graph {:?}, features {:?}",
            q.dims(),
            g.dims(),
            f.dims()
        )));
    }
    Ok(q.matmul(&g.transpose(1, 2)?.contiguous()?)?.add(f)?)
}

/// Learnable centers and log-scales of one projection.
pub struct Projector {
    centers: Var,
    log_scales: Tensor,
}

impl Projector {
    pub fn new(scope: &mut Scope, nodes: usize, channels: usize) -> Result<Self> {
        // unit-variance features sit at squared distance ~2C from a center,
        // so scale sqrt(C) keeps the initial assignment soft
        let init_scale = 0.5 * (channels as f64).ln();
        Ok(Self {
            centers: scope.param_var("centers", &[nodes, channels], Init::Normal(1.0))?,
            log_scales: scope.param("log_scales", &[nodes, channels], Init::Const(init_scale))?,
        })
    }

    pub fn centers(&self) -> &Tensor {
        self.centers.as_tensor()
    }

    pub fn scales(&self) -> Result<Tensor> {
        Ok(self.log_scales.exp()?)
    }

    pub fn project(&self, f: &Tensor) -> Result<Projection> {
        graph_project(f, self.centers.as_tensor(), &self.scales()?)
    }

    /// Resets the centers to K distinct pixel features drawn from `f`
    /// `(B, N, C)` (with repetition when there are fewer pixels than nodes).
    pub fn seed_centers(&self, f: &Tensor, seed: u64) -> Result<()> {
        let (b, n, c) = f.dims3()?;
        let k = self.centers.dim(0)?;
        let flat = f.detach().reshape((b * n, c))?;
        let total = b * n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<u32> = if total >= k {
            sample(&mut rng, total, k)
                .into_iter()
                .map(|i| i as u32)
                .collect()
        } else {
            (0..k).map(|i| (i % total) as u32).collect()
        };
        let idx = Tensor::new(picks.as_slice(), f.device())?;
        let chosen = flat.index_select(&idx, 0)?.to_dtype(self.centers.dtype())?;
        self.centers.set(&chosen)?;
        Ok(())
    }
}

/// Per-task enhanced pixel features `(B, N, C)` plus the graphs behind them.
#[derive(Debug, Clone)]
pub struct MigrOutput {
    pub boundary: Tensor,
    pub shape: Tensor,
    pub region: Tensor,
    pub region_graph: Projection,
    pub boundary_graph: Projection,
    pub shape_graph: Projection,
    pub height: usize,
    pub width: usize,
}

pub struct Migr {
    reduce_bou: Conv2d,
    reduce_shp: Conv2d,
    reduce_reg: Conv2d,
    proj_bou: Projector,
    proj_shp: Projector,
    proj_reg: Projector,
    inter_bou: InteractionParams,
    inter_shp: InteractionParams,
    m_bou: Tensor,
    m_shp: Tensor,
    activation: Activation,
    seed: u64,
}

impl Migr {
    pub fn new(scope: &mut Scope, channels: usize, config: &GraphConfig) -> Result<Self> {
        config.validate()?;
        let k = config.nodes;
        let c = channels;
        Ok(Self {
            reduce_bou: Conv2d::new(&mut scope.sub("reduce_bou"), c, c, 1, 1, true)?,
            reduce_shp: Conv2d::new(&mut scope.sub("reduce_shp"), c, c, 1, 1, true)?,
            reduce_reg: Conv2d::new(&mut scope.sub("reduce_reg"), c, c, 1, 1, true)?,
            proj_bou: Projector::new(&mut scope.sub("proj_bou"), k, c)?,
            proj_shp: Projector::new(&mut scope.sub("proj_shp"), k, c)?,
            proj_reg: Projector::new(&mut scope.sub("proj_reg"), k, c)?,
            inter_bou: InteractionParams::new(&mut scope.sub("inter_bou"), c, c)?,
            inter_shp: InteractionParams::new(&mut scope.sub("inter_shp"), c, c)?,
            m_bou: scope.param("m_bou", &[c, c], Init::Kaiming(c))?,
            m_shp: scope.param("m_shp", &[c, c], Init::Kaiming(c))?,
            activation: config.activation,
            seed: scope.seed(),
        })
    }

    fn reduced(&self, routed: &RoutedFeatures) -> Result<[Tensor; 3]> {
        Ok([
            to_pixels(&self.reduce_bou.forward(&routed.boundary.data)?)?,
            to_pixels(&self.reduce_shp.forward(&routed.shape.data)?)?,
            to_pixels(&self.reduce_reg.forward(&routed.region.data)?)?,
        ])
    }

    /// Seeds all projection centers from the features of one batch.
    pub fn seed_centers(&self, routed: &RoutedFeatures) -> Result<()> {
        let [bou, shp, reg] = self.reduced(routed)?;
        self.proj_bou.seed_centers(&bou, self.seed ^ 1)?;
        self.proj_shp.seed_centers(&shp, self.seed ^ 2)?;
        self.proj_reg.seed_centers(&reg, self.seed ^ 3)?;
        Ok(())
    }

    pub fn forward(&self, routed: &RoutedFeatures) -> Result<MigrOutput> {
        let (height, width) = routed.region.spatial()?;
        let [f_bou, f_shp, f_reg] = self.reduced(routed)?;
        let reg = self.proj_reg.project(&f_reg)?;
        let bou = self.proj_bou.project(&f_bou)?;
        let shp = self.proj_shp.project(&f_shp)?;

        let g_bou = graph_interact(&reg.nodes, &bou.nodes, &self.inter_bou)?;
        let g_shp = graph_interact(&reg.nodes, &shp.nodes, &self.inter_shp)?;
        let g_bou = graph_reason(
            &g_bou,
            &adjacency(&bou.nodes)?,
            &self.m_bou,
            self.activation,
        )?;
        let g_shp = graph_reason(
            &g_shp,
            &adjacency(&shp.nodes)?,
            &self.m_shp,
            self.activation,
        )?;

        Ok(MigrOutput {
            boundary: graph_reproject(&bou.assign, &g_bou, &f_bou)?,
            shape: graph_reproject(&shp.assign, &g_shp, &f_shp)?,
            region: graph_reproject(&reg.assign, &reg.nodes, &f_reg)?,
            region_graph: reg,
            boundary_graph: bou,
            shape_graph: shp,
            height,
            width,
        })
    }
}
