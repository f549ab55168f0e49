use super::{load_params, xavier, FeatureTap, NetError, Tap};
use crate::grad::{seeded_rng, Graph, NodeId, ParamSet, Scalar, Tensor};
use crate::shape::{Checkpoint, PointCloud};

pub const PN_L1: usize = 64;
pub const PN_BOTTLENECK: usize = 128;
const CONV: [(usize, usize); 3] = [(3, PN_L1), (PN_L1, 128), (128, PN_BOTTLENECK)];
const FC_HIDDEN: [usize; 2] = [512, 1024];

const C1: usize = 0;
const C2: usize = 2;
const C3: usize = 4;
const D1: usize = 6;
const D2: usize = 8;
const D3: usize = 10;

/// PointNet-style autoencoder: shared per-point conv1d encoder, max pooling,
/// fully connected decoder to `N x 3`.
#[derive(Clone, Debug)]
pub struct PointNetAe<S> {
    params: ParamSet<S>,
    points: usize,
}

fn layout(points: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, (cin, cout)) in CONV.iter().enumerate() {
        out.push((format!("pn/conv{}.weight", i + 1), vec![*cout, *cin]));
        out.push((format!("pn/conv{}.bias", i + 1), vec![*cout]));
    }
    let widths = [PN_BOTTLENECK, FC_HIDDEN[0], FC_HIDDEN[1], points * 3];
    for i in 0..3 {
        out.push((format!("pn/fc{}.weight", i + 1), vec![widths[i], widths[i + 1]]));
        out.push((format!("pn/fc{}.bias", i + 1), vec![widths[i + 1]]));
    }
    out
}

impl<S: Scalar> PointNetAe<S> {
    pub fn new(points: usize, seed: u64) -> Self {
        assert!(points > 0, "point count must be positive");
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        for (name, shape) in layout(points) {
            let t = if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else if name.contains("conv") {
                xavier(&mut rng, &shape, shape[1], shape[0])
            } else {
                xavier(&mut rng, &shape, shape[0], shape[1])
            };
            params.push(name, t.with_grad());
        }
        Self { params, points }
    }

    /// All weights zero.
    pub fn zeroed(points: usize) -> Self {
        let mut params = ParamSet::new();
        for (name, shape) in layout(points) {
            params.push(name, Tensor::zeros(&shape).with_grad());
        }
        Self { params, points }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetError> {
        let last = ck.get("pn/fc3.bias").ok_or_else(|| NetError::MissingWeight("pn/fc3.bias".into()))?;
        let n = last.data.len();
        if n == 0 || n % 3 != 0 {
            return Err(NetError::ShapeMismatch {
                name: last.name.clone(),
                expected: vec![3 * n.div_ceil(3).max(1)],
                found: last.dims.iter().map(|&d| d as usize).collect(),
            });
        }
        let points = n / 3;
        Ok(Self { params: load_params(ck, &layout(points))?, points })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// `[N, 3]` tensor for `cloud`.
    pub fn input(&self, cloud: &PointCloud) -> Result<Tensor<S>, NetError> {
        if cloud.len() != self.points {
            return Err(NetError::WrongPointCount { expected: self.points, found: cloud.len() });
        }
        let data = cloud.flat().into_iter().map(|v| S::from_f64_lossy(v as f64)).collect();
        Ok(Tensor::new(&[self.points, 3], data)?)
    }

    /// Returns the pre-activation first conv output `[64, N]` and the
    /// pooled code `[128]` for points `x: [N, 3]`.
    pub fn encode(&self, g: &mut Graph<S>, w: &[NodeId], x: NodeId) -> Result<(NodeId, NodeId), NetError> {
        let xt = g.transpose(x)?;
        let l1 = g.conv1d(xt, w[C1], w[C1 + 1])?;
        let h = g.relu(l1)?;
        let h = g.conv1d(h, w[C2], w[C2 + 1])?;
        let h = g.relu(h)?;
        let h = g.conv1d(h, w[C3], w[C3 + 1])?;
        let code = g.max_reduce(h, 1)?;
        Ok((l1, code))
    }

    /// Decodes a `[128]` code to `[N, 3]` points.
    pub fn decode(&self, g: &mut Graph<S>, w: &[NodeId], code: NodeId) -> Result<NodeId, NetError> {
        let h = g.reshape(code, &[1, PN_BOTTLENECK])?;
        let h = g.linear(h, w[D1], w[D1 + 1])?;
        let h = g.relu(h)?;
        let h = g.linear(h, w[D2], w[D2 + 1])?;
        let h = g.relu(h)?;
        let h = g.linear(h, w[D3], w[D3 + 1])?;
        Ok(g.reshape(h, &[self.points, 3])?)
    }

    pub fn reconstruct(&self, g: &mut Graph<S>, w: &[NodeId], x: NodeId) -> Result<NodeId, NetError> {
        let (_, code) = self.encode(g, w, x)?;
        self.decode(g, w, code)
    }

    pub(super) fn tap_nodes(
        &self,
        g: &mut Graph<S>,
        w: &[NodeId],
        x: NodeId,
        taps: &[Tap],
    ) -> Result<Vec<NodeId>, NetError> {
        let (l1, code) = self.encode(g, w, x)?;
        Ok(taps.iter().map(|t| if *t == Tap::PnL1 { l1 } else { code }).collect())
    }
}

/// Reconstruction of `cloud` plus the requested taps from the same pass.
pub fn forward_pointnet<S: Scalar>(
    net: &PointNetAe<S>,
    cloud: &PointCloud,
    taps: &[Tap],
) -> Result<(PointCloud, Vec<FeatureTap<S>>), NetError> {
    if let Some(&t) = taps.iter().find(|t| t.backend() != super::Backend::PointNet) {
        return Err(NetError::TapBackend { tap: t, backend: super::Backend::PointNet });
    }
    let mut g = Graph::new();
    let w = net.params.bind_frozen(&mut g);
    let x = g.constant(&net.input(cloud)?);
    let (l1, code) = net.encode(&mut g, &w, x)?;
    let y = net.decode(&mut g, &w, code)?;
    let flat: Vec<f32> = g.value(y).iter().map(|v| v.to_f64_lossy() as f32).collect();
    let captured = taps
        .iter()
        .map(|&tap| FeatureTap { tap, tensor: g.tensor(if tap == Tap::PnL1 { l1 } else { code }) })
        .collect();
    Ok((PointCloud::from_flat(&flat)?, captured))
}
