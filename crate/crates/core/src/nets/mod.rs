//! The two autoencoders, their feature taps and checkpoint mapping.

mod pointnet;
mod vsl;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use pointnet::{forward_pointnet, PointNetAe, PN_BOTTLENECK, PN_L1};
pub use vsl::{forward_vsl, LatentMode, VoxelVae, VslLatents, VslOutput, GLOBAL_DIM, GRID, LOCAL_DIM};

use crate::grad::{GradError, Graph, NodeId, ParamSet, Rng, Scalar, Tensor};
use crate::shape::{Checkpoint, NamedTensor, PointCloud, ProbabilityGrid, ShapeError, VoxelGrid};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("checkpoint is missing weight '{0}'")]
    MissingWeight(String),
    #[error("checkpoint has unexpected weight '{0}'")]
    UnexpectedWeight(String),
    #[error("weight '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint does not describe a known architecture")]
    UnknownArchitecture,
    #[error("expected {expected} points, got {found}")]
    WrongPointCount { expected: usize, found: usize },
    #[error("expected a {expected:?} grid, got {found:?}")]
    WrongDims { expected: [usize; 3], found: [usize; 3] },
    #[error("{backend} network cannot take a {found} input")]
    WrongRepresentation { backend: Backend, found: &'static str },
    #[error("unknown tap '{0}'")]
    UnknownTap(String),
    #[error("tap {tap} does not belong to the {backend} network")]
    TapBackend { tap: Tap, backend: Backend },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[serde(rename = "pointnet")]
    PointNet,
    Vsl,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::PointNet => "pointnet",
            Backend::Vsl => "vsl",
        }
    }

    pub fn taps(self) -> &'static [Tap] {
        match self {
            Backend::PointNet => &[Tap::PnL1, Tap::PnBottleneck],
            Backend::Vsl => &[Tap::VslGlobal, Tap::VslLocals],
        }
    }

    pub fn default_content_tap(self) -> Tap {
        self.taps()[0]
    }

    pub fn default_style_tap(self) -> Tap {
        self.taps()[1]
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pointnet" => Ok(Backend::PointNet),
            "vsl" => Ok(Backend::Vsl),
            other => Err(format!("unknown backend '{other}' (expected pointnet or vsl)")),
        }
    }
}

/// Named intermediate activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tap {
    /// First conv1d output, before its relu: `[64, N]`.
    #[serde(rename = "pn_l1")]
    PnL1,
    /// Max-pooled code: `[128]`.
    #[serde(rename = "pn_bottleneck")]
    PnBottleneck,
    /// Global latent mean: `[20]`.
    #[serde(rename = "vsl_global")]
    VslGlobal,
    /// Local latent means, level 1 then level 2: `[20]`.
    #[serde(rename = "vsl_locals")]
    VslLocals,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::PnL1, Tap::PnBottleneck, Tap::VslGlobal, Tap::VslLocals];

    pub fn name(self) -> &'static str {
        match self {
            Tap::PnL1 => "pn_l1",
            Tap::PnBottleneck => "pn_bottleneck",
            Tap::VslGlobal => "vsl_global",
            Tap::VslLocals => "vsl_locals",
        }
    }

    pub fn backend(self) -> Backend {
        match self {
            Tap::PnL1 | Tap::PnBottleneck => Backend::PointNet,
            Tap::VslGlobal | Tap::VslLocals => Backend::Vsl,
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tap::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| NetError::UnknownTap(s.to_string()))
    }
}

/// A captured activation.
#[derive(Clone, Debug)]
pub struct FeatureTap<S> {
    pub tap: Tap,
    pub tensor: Tensor<S>,
}

/// A shape in one of the two network representations.
#[derive(Clone, Debug, PartialEq)]
pub enum ShapeSample {
    Points(PointCloud),
    Voxels(VoxelGrid),
}

impl ShapeSample {
    pub fn kind(&self) -> &'static str {
        match self {
            ShapeSample::Points(_) => "point cloud",
            ShapeSample::Voxels(_) => "voxel grid",
        }
    }
}

/// A network output in its natural representation.
#[derive(Clone, Debug, PartialEq)]
pub enum NetOutput {
    Points(PointCloud),
    Probabilities(ProbabilityGrid),
}

/// Either autoencoder, dispatched by backend.
#[derive(Clone, Debug)]
pub enum Autoencoder<S> {
    PointNet(PointNetAe<S>),
    Vsl(VoxelVae<S>),
}

impl<S: Scalar> Autoencoder<S> {
    /// Freshly initialized network. `points` only matters for PointNet.
    pub fn new(backend: Backend, points: usize, seed: u64) -> Self {
        match backend {
            Backend::PointNet => Autoencoder::PointNet(PointNetAe::new(points, seed)),
            Backend::Vsl => Autoencoder::Vsl(VoxelVae::new(seed)),
        }
    }

    pub fn backend(&self) -> Backend {
        match self {
            Autoencoder::PointNet(_) => Backend::PointNet,
            Autoencoder::Vsl(_) => Backend::Vsl,
        }
    }

    pub fn params(&self) -> &ParamSet<S> {
        match self {
            Autoencoder::PointNet(n) => n.params(),
            Autoencoder::Vsl(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        match self {
            Autoencoder::PointNet(n) => n.params_mut(),
            Autoencoder::Vsl(n) => n.params_mut(),
        }
    }

    pub fn checksum(&self) -> String {
        self.params().checksum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        to_checkpoint(self.params())
    }

    /// Picks the architecture from the tensor name prefix.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetError> {
        let first = ck.tensors().first().ok_or(NetError::UnknownArchitecture)?;
        if first.name.starts_with("pn/") {
            PointNetAe::from_checkpoint(ck).map(Autoencoder::PointNet)
        } else if first.name.starts_with("vsl/") {
            VoxelVae::from_checkpoint(ck).map(Autoencoder::Vsl)
        } else {
            Err(NetError::UnknownArchitecture)
        }
    }

    /// Validated input tensor: `[N, 3]` points or `[1, 30, 30, 30]` occupancy.
    pub fn input(&self, sample: &ShapeSample) -> Result<Tensor<S>, NetError> {
        match (self, sample) {
            (Autoencoder::PointNet(n), ShapeSample::Points(c)) => n.input(c),
            (Autoencoder::Vsl(n), ShapeSample::Voxels(g)) => n.input(g),
            (net, s) => Err(NetError::WrongRepresentation { backend: net.backend(), found: s.kind() }),
        }
    }

    /// Deterministic reconstruction with the same layout as [`input`](Self::input).
    pub fn reconstruct(&self, g: &mut Graph<S>, w: &[NodeId], x: NodeId) -> Result<NodeId, NetError> {
        match self {
            Autoencoder::PointNet(n) => n.reconstruct(g, w, x),
            Autoencoder::Vsl(n) => Ok(n.forward_nodes(g, w, x, None)?.probs),
        }
    }

    /// Tap activations for input node `x`, in the order requested.
    pub fn tap_nodes(&self, g: &mut Graph<S>, w: &[NodeId], x: NodeId, taps: &[Tap]) -> Result<Vec<NodeId>, NetError> {
        for &t in taps {
            if t.backend() != self.backend() {
                return Err(NetError::TapBackend { tap: t, backend: self.backend() });
            }
        }
        match self {
            Autoencoder::PointNet(n) => n.tap_nodes(g, w, x, taps),
            Autoencoder::Vsl(n) => n.tap_nodes(g, w, x, taps),
        }
    }

    /// Converts reconstruction values back to a shape.
    pub fn output(&self, values: &[S]) -> Result<NetOutput, NetError> {
        match self {
            Autoencoder::PointNet(_) => {
                let flat: Vec<f32> = values.iter().map(|v| v.to_f64_lossy() as f32).collect();
                Ok(NetOutput::Points(PointCloud::from_flat(&flat)?))
            }
            Autoencoder::Vsl(_) => {
                let p: Vec<f32> = values.iter().map(|v| v.to_f64_lossy() as f32).collect();
                Ok(NetOutput::Probabilities(ProbabilityGrid::new([GRID; 3], p)?))
            }
        }
    }

    /// Taps for one shape, outside of any training graph.
    pub fn extract(&self, sample: &ShapeSample, taps: &[Tap]) -> Result<Vec<FeatureTap<S>>, NetError> {
        let mut g = Graph::new();
        let w = self.params().bind_frozen(&mut g);
        let x = g.constant(&self.input(sample)?);
        let nodes = self.tap_nodes(&mut g, &w, x, taps)?;
        Ok(taps.iter().zip(nodes).map(|(&tap, id)| FeatureTap { tap, tensor: g.tensor(id) }).collect())
    }
}

/// Xavier-uniform matrix with the given fans; biases are zero elsewhere.
pub(crate) fn xavier<S: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64_lossy(rng.random_range(-a..a))).collect();
    Tensor::new(shape, data).expect("xavier shape")
}

pub(crate) fn to_checkpoint<S: Scalar>(params: &ParamSet<S>) -> Checkpoint {
    let tensors = params
        .iter()
        .map(|(name, t)| NamedTensor {
            name: name.to_string(),
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        })
        .collect();
    Checkpoint::new(tensors).expect("parameter names are unique")
}

/// Loads `expected` (name, shape) pairs from `ck` in order, trainable.
pub(crate) fn load_params<S: Scalar>(
    ck: &Checkpoint,
    expected: &[(String, Vec<usize>)],
) -> Result<ParamSet<S>, NetError> {
    let mut params = ParamSet::new();
    for (name, shape) in expected {
        let t = ck.get(name).ok_or_else(|| NetError::MissingWeight(name.clone()))?;
        let found: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
        if &found != shape {
            return Err(NetError::ShapeMismatch { name: name.clone(), expected: shape.clone(), found });
        }
        let data = t.data.iter().map(|&v| S::from_f64_lossy(v as f64)).collect();
        params.push(name.clone(), Tensor::new(shape, data)?.with_grad());
    }
    if let Some(extra) = ck.tensors().iter().find(|t| !expected.iter().any(|(n, _)| n == &t.name)) {
        return Err(NetError::UnexpectedWeight(extra.name.clone()));
    }
    Ok(params)
}

/// Symmetric Chamfer distance, evaluated in double precision.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, NetError> {
    if a.is_empty() || b.is_empty() {
        return Err(NetError::EmptyCloud);
    }
    let mut g = Graph::<f64>::new();
    let to = |c: &PointCloud| c.flat().into_iter().map(f64::from).collect::<Vec<_>>();
    let x = g.input(&[a.len(), 3], to(a))?;
    let y = g.input(&[b.len(), 3], to(b))?;
    let d = g.chamfer(x, y)?;
    Ok(g.value(d)[0])
}
