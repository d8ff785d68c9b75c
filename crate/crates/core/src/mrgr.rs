//! Boundary- and shape-guided reinforcement of the region stream: head
//! maps gate the fused features, support nodes are projected from the gated
//! features, and every pixel takes the elementwise max over its edge
//! embeddings to the support nodes.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::migr::{Fusion, GraphConfig, MigrOutput, Projector};
use crate::nn::{sigmoid, Linear, Scope};

/// Pre-sigmoid and sigmoid head maps, `(B, N, 1)`.
#[derive(Debug, Clone)]
pub struct HeadMaps {
    pub boundary_logit: Tensor,
    pub shape_logit: Tensor,
    pub boundary: Tensor,
    pub shape: Tensor,
}

pub struct TaskHeads {
    boundary: Linear,
    shape: Linear,
}

impl TaskHeads {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            boundary: Linear::new(&mut scope.sub("boundary"), channels, 1)?,
            shape: Linear::new(&mut scope.sub("shape"), channels, 1)?,
        })
    }

    pub fn forward(&self, f_bou: &Tensor, f_shp: &Tensor) -> Result<HeadMaps> {
        let boundary_logit = self.boundary.forward(f_bou)?;
        let shape_logit = self.shape.forward(f_shp)?;
        Ok(HeadMaps {
            boundary: sigmoid(&boundary_logit)?,
            shape: sigmoid(&shape_logit)?,
            boundary_logit,
            shape_logit,
        })
    }
}

/// Scales every channel of `fused` `(B, N, C)` by `map` `(B, N, 1)`.
pub fn gate_features(map: &Tensor, fused: &Tensor) -> Result<Tensor> {
    let (b, n, _) = fused.dims3()?;
    if map.dims() != [b, n, 1] {
        return Err(Error::shape(format!(
            "gate map {:?} does not match features {:?}",
            map.dims(),
            fused.dims()
        )));
    }
    Ok(fused.broadcast_mul(map)?)
}

/// Boundary and shape support nodes, each `(B, C, K)`.
#[derive(Debug, Clone)]
pub struct SupportNodes {
    pub boundary: Tensor,
    pub shape: Tensor,
}

/// Edge embedding `f_w` and node update `f_eta`, shared by both graphs.
pub struct EnhanceParams {
    pub edge: Linear,
    pub update: Linear,
}

impl EnhanceParams {
    pub fn new(scope: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            edge: Linear::new(&mut scope.sub("edge"), channels, channels)?,
            update: Linear::new(&mut scope.sub("update"), 2 * channels, channels)?,
        })
    }

    /// `E = ReLU(W_e d + b_e)` on the last dimension.
    pub fn edge_embedding(&self, diff: &Tensor) -> Result<Tensor> {
        Ok(self.edge.forward(diff)?.relu()?)
    }
}

/// Indices of the `k` support nodes nearest to each pixel, as an additive
/// `(B, N, K, 1)` penalty that excludes the others from the max.
fn nearest_penalty(fused: &Tensor, nodes_t: &Tensor, k: usize) -> Result<Tensor> {
    let dist = fused
        .unsqueeze(2)?
        .broadcast_sub(&nodes_t.unsqueeze(1)?)?
        .sqr()?
        .sum(D::Minus1)?
        .to_dtype(candle_core::DType::F64)?
        .to_vec3::<f64>()?;
    let total = dist[0][0].len();
    let mut pen = Vec::with_capacity(dist.len() * dist[0].len() * total);
    for image in &dist {
        for row in image {
            let mut order: Vec<usize> = (0..total).collect();
            order.sort_by(|a, b| row[*a].total_cmp(&row[*b]).then(a.cmp(b)));
            let mut p = vec![-1e30; total];
            for i in order.into_iter().take(k) {
                p[i] = 0.0;
            }
            pen.extend(p);
        }
    }
    let (b, n) = (dist.len(), dist[0].len());
    Ok(Tensor::from_vec(pen, (b, n, total, 1), fused.device())?.to_dtype(fused.dtype())?)
}

/// `f_hat_i = max_m ReLU(W [f_i | E_mi] + b)`, `E_mi = f_w(f_i - node_m)`,
/// elementwise over channels; ties go to the lowest node index.
pub fn enhance(
    fused: &Tensor,
    nodes: &Tensor,
    p: &EnhanceParams,
    top_k: Option<usize>,
) -> Result<Tensor> {
    let (b, _, c) = fused.dims3()?;
    let (bn, cn, k) = nodes.dims3()?;
    if k == 0 {
        return Err(Error::validation(
            "reinforcement needs at least one support node",
        ));
    }
    if bn != b || cn != c {
        return Err(Error::shape(format!(
            "support nodes {:?} do not match features {:?}",
            nodes.dims(),
            fused.dims()
        )));
    }
    let nodes_t = nodes.transpose(1, 2)?.contiguous()?; // (B, K, C)
    let diff = fused.unsqueeze(2)?.broadcast_sub(&nodes_t.unsqueeze(1)?)?; // (B, N, K, C)
    let edges = p.edge_embedding(&diff)?;
    let w = p.update.weight();
    let from_f = fused.broadcast_matmul(&w.narrow(0, 0, c)?)?; // (B, N, C)
    let from_e = edges.broadcast_matmul(&w.narrow(0, c, c)?)?; // (B, N, K, C)
    let cand = from_e
        .broadcast_add(&from_f.unsqueeze(2)?)?
        .broadcast_add(p.update.bias())?
        .relu()?;
    let scored = match top_k {
        Some(t) if t < k => cand.broadcast_add(&nearest_penalty(fused, &nodes_t, t)?)?,
        _ => cand.clone(),
    };
    let idx = scored.detach().argmax_keepdim(2)?; // (B, N, 1, C)
    Ok(cand.contiguous()?.gather(&idx, 2)?.squeeze(2)?)
}

#[derive(Debug, Clone)]
pub struct MrgrOutput {
    /// `F''_reg + F_hat_B + F_hat_S`, `(B, N, C)`.
    pub region: Tensor,
    pub heads: HeadMaps,
    pub support: SupportNodes,
}

pub struct Mrgr {
    heads: TaskHeads,
    proj_bou: Projector,
    proj_shp: Projector,
    enhance: EnhanceParams,
    fuse: Option<(Linear, Linear)>,
    top_k: Option<usize>,
    seed: u64,
}

impl Mrgr {
    pub fn new(scope: &mut Scope, channels: usize, config: &GraphConfig) -> Result<Self> {
        config.validate()?;
        let c = channels;
        let fuse = match config.fusion {
            Fusion::Add => None,
            Fusion::Concat => Some((
                Linear::new(&mut scope.sub("fuse_b"), 2 * c, c)?,
                Linear::new(&mut scope.sub("fuse_s"), 2 * c, c)?,
            )),
        };
        Ok(Self {
            heads: TaskHeads::new(&mut scope.sub("heads"), c)?,
            proj_bou: Projector::new(&mut scope.sub("proj_bou"), config.nodes, c)?,
            proj_shp: Projector::new(&mut scope.sub("proj_shp"), config.nodes, c)?,
            enhance: EnhanceParams::new(&mut scope.sub("enhance"), c)?,
            fuse,
            top_k: config.top_k,
            seed: scope.seed(),
        })
    }

    fn fused(&self, m: &MigrOutput) -> Result<(Tensor, Tensor)> {
        Ok(match &self.fuse {
            None => (m.region.add(&m.boundary)?, m.region.add(&m.shape)?),
            Some((fb, fs)) => (
                fb.forward(&Tensor::cat(&[&m.region, &m.boundary], D::Minus1)?)?,
                fs.forward(&Tensor::cat(&[&m.region, &m.shape], D::Minus1)?)?,
            ),
        })
    }

    fn gated(&self, m: &MigrOutput) -> Result<(HeadMaps, Tensor, Tensor, Tensor, Tensor)> {
        let heads = self.heads.forward(&m.boundary, &m.shape)?;
        let (reg_b, reg_s) = self.fused(m)?;
        let gated_b = gate_features(&heads.boundary, &reg_b)?;
        let gated_s = gate_features(&heads.shape, &reg_s)?;
        Ok((heads, reg_b, reg_s, gated_b, gated_s))
    }

    pub fn seed_centers(&self, m: &MigrOutput) -> Result<()> {
        let (_, _, _, gb, gs) = self.gated(m)?;
        self.proj_bou.seed_centers(&gb, self.seed ^ 1)?;
        self.proj_shp.seed_centers(&gs, self.seed ^ 2)?;
        Ok(())
    }

    pub fn forward(&self, m: &MigrOutput) -> Result<MrgrOutput> {
        let (heads, reg_b, reg_s, gated_b, gated_s) = self.gated(m)?;
        let support = SupportNodes {
            boundary: self.proj_bou.project(&gated_b)?.nodes,
            shape: self.proj_shp.project(&gated_s)?.nodes,
        };
        let hat_b = enhance(&reg_b, &support.boundary, &self.enhance, self.top_k)?;
        let hat_s = enhance(&reg_s, &support.shape, &self.enhance, self.top_k)?;
        Ok(MrgrOutput {
            region: m.region.add(&hat_b)?.add(&hat_s)?,
            heads,
            support,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn params(c: usize) -> EnhanceParams {
        let mut store = ParamStore::new(3, DType::F64);
        EnhanceParams::new(&mut store.root(), c).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut store = ParamStore::new(seed, DType::F64);
        store
            .root()
            .param("x", shape, crate::nn::Init::Normal(1.0))
            .unwrap()
    }

    #[test]
    fn gating_cases() {
        let f = rand(&[1, 4, 3], 1);
        let ones = Tensor::ones((1, 4, 1), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(
            gate_features(&ones, &f).unwrap().to_vec3::<f64>().unwrap(),
            f.to_vec3::<f64>().unwrap()
        );
        let half = Tensor::new(&[[[1.0f64], [1.0], [0.0], [0.0]]], &Device::Cpu).unwrap();
        let g = gate_features(&half, &f).unwrap().to_vec3::<f64>().unwrap();
        assert!(g[0][2..].iter().flatten().all(|v| *v == 0.0));
        assert!(gate_features(&ones.narrow(1, 0, 3).unwrap(), &f).is_err());
    }

    #[test]
    fn single_node_is_a_plain_update() {
        let p = params(3);
        let f = rand(&[1, 5, 3], 2);
        let node = rand(&[1, 3, 1], 4);
        let out = enhance(&f, &node, &p, None).unwrap();
        let diff = f.broadcast_sub(&node.transpose(1, 2).unwrap()).unwrap();
        let e = p.edge_embedding(&diff).unwrap();
        let direct = p
            .update
            .forward(&Tensor::cat(&[&f, &e], 2).unwrap())
            .unwrap()
            .relu()
            .unwrap();
        let a = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = direct.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn extra_node_never_lowers_output_and_order_is_irrelevant() {
        let p = params(4);
        let f = rand(&[2, 9, 4], 5);
        let nodes = rand(&[2, 4, 3], 6);
        let extra = Tensor::cat(&[&nodes, &rand(&[2, 4, 1], 7)], 2).unwrap();
        let base = enhance(&f, &nodes, &p, None)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let more = enhance(&f, &extra, &p, None)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(base.iter().zip(&more).all(|(a, b)| b >= a));
        let idx = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let perm = nodes.index_select(&idx, 2).unwrap();
        let permuted = enhance(&f, &perm, &p, None)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn top_k_restricts_to_nearest_nodes() {
        let p = params(2);
        let f = Tensor::new(&[[[0.0f64, 0.0]]], &Device::Cpu).unwrap();
        let near = Tensor::new(&[[[0.1f64], [0.0]]], &Device::Cpu).unwrap();
        let far = Tensor::new(&[[[5.0f64], [5.0]]], &Device::Cpu).unwrap();
        let both = Tensor::cat(&[&near, &far], 2).unwrap();
        let only_near = enhance(&f, &near, &p, None)
            .unwrap()
            .to_vec3::<f64>()
            .unwrap();
        let top1 = enhance(&f, &both, &p, Some(1))
            .unwrap()
            .to_vec3::<f64>()
            .unwrap();
        assert_eq!(only_near, top1);
        assert!(enhance(&f, &both.narrow(2, 0, 0).unwrap(), &p, None).is_err());
    }
}
