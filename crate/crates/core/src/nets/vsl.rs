use rand_distr::{Distribution, StandardNormal};

use super::{load_params, xavier, FeatureTap, NetError, Tap};
use crate::grad::{seeded_rng, Graph, NodeId, ParamSet, Rng, Scalar, Tensor};
use crate::shape::{Checkpoint, ProbabilityGrid, VoxelGrid};

pub const GRID: usize = 30;
pub const GLOBAL_DIM: usize = 20;
pub const LOCAL_DIM: usize = 10;
const FEATURES: usize = 16 * 5 * 5 * 5;
const HIDDEN: usize = 512;
const CELLS: usize = GRID * GRID * GRID;

const ENC1: usize = 0;
const ENC2: usize = 2;
const GLOBAL_MU: usize = 4;
const GLOBAL_LV: usize = 6;
const L1_MU: usize = 8;
const L1_LV: usize = 10;
const L2_MU: usize = 12;
const L2_LV: usize = 14;
const DEC1: usize = 16;
const DEC2: usize = 18;

/// Voxel VAE with one global and two chained local latent levels and a
/// fully connected decoder.
#[derive(Clone, Debug)]
pub struct VoxelVae<S> {
    params: ParamSet<S>,
}

fn layout() -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        ("vsl/enc1.weight".to_string(), vec![8, 1, 6, 6, 6]),
        ("vsl/enc1.bias".to_string(), vec![8]),
        ("vsl/enc2.weight".to_string(), vec![16, 8, 5, 5, 5]),
        ("vsl/enc2.bias".to_string(), vec![16]),
    ];
    let heads = [
        ("global_mu", FEATURES, GLOBAL_DIM),
        ("global_logvar", FEATURES, GLOBAL_DIM),
        ("local1_mu", FEATURES, LOCAL_DIM),
        ("local1_logvar", FEATURES, LOCAL_DIM),
        ("local2_mu", FEATURES + LOCAL_DIM, LOCAL_DIM),
        ("local2_logvar", FEATURES + LOCAL_DIM, LOCAL_DIM),
        ("dec1", GLOBAL_DIM + 2 * LOCAL_DIM, HIDDEN),
        ("dec2", HIDDEN, CELLS),
    ];
    for (name, i, o) in heads {
        out.push((format!("vsl/{name}.weight"), vec![i, o]));
        out.push((format!("vsl/{name}.bias"), vec![o]));
    }
    out
}

/// How latents are turned into codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// `z = mu`.
    Mean,
    /// `z = mu + exp(logvar / 2) * noise`, noise drawn from `seed`.
    Stochastic { seed: u64 },
}

/// Graph nodes of one VSL pass.
#[derive(Clone, Copy, Debug)]
pub struct VslNodes {
    pub mu_g: NodeId,
    pub logvar_g: NodeId,
    pub mu_1: NodeId,
    pub logvar_1: NodeId,
    pub mu_2: NodeId,
    pub logvar_2: NodeId,
    /// `[1, 30, 30, 30]` probabilities.
    pub probs: NodeId,
    /// Summed KL over all three levels.
    pub kl: NodeId,
}

#[derive(Clone, Debug)]
pub struct VslLatents<S> {
    pub mu_g: Vec<S>,
    pub logvar_g: Vec<S>,
    pub mu_1: Vec<S>,
    pub logvar_1: Vec<S>,
    pub mu_2: Vec<S>,
    pub logvar_2: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct VslOutput<S> {
    pub probs: ProbabilityGrid,
    pub taps: Vec<FeatureTap<S>>,
    pub latents: VslLatents<S>,
    pub kl: f64,
}

impl<S: Scalar> VoxelVae<S> {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        for (name, shape) in layout() {
            let t = match shape.len() {
                1 => Tensor::zeros(&shape),
                5 => {
                    let k: usize = shape[2..].iter().product();
                    xavier(&mut rng, &shape, shape[1] * k, shape[0] * k)
                }
                _ => xavier(&mut rng, &shape, shape[0], shape[1]),
            };
            params.push(name, t.with_grad());
        }
        Self { params }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetError> {
        Ok(Self { params: load_params(ck, &layout())? })
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// `[1, 30, 30, 30]` occupancy tensor.
    pub fn input(&self, grid: &VoxelGrid) -> Result<Tensor<S>, NetError> {
        if grid.dims() != [GRID; 3] {
            return Err(NetError::WrongDims { expected: [GRID; 3], found: grid.dims() });
        }
        let data = grid.occupancy().iter().map(|&v| S::from_count(v as usize)).collect();
        Ok(Tensor::new(&[1, GRID, GRID, GRID], data)?)
    }

    fn features(&self, g: &mut Graph<S>, w: &[NodeId], x: NodeId) -> Result<NodeId, NetError> {
        let h = g.conv3d(x, w[ENC1], w[ENC1 + 1], 2, 0)?;
        let h = g.relu(h)?;
        let h = g.conv3d(h, w[ENC2], w[ENC2 + 1], 2, 0)?;
        let h = g.relu(h)?;
        Ok(g.reshape(h, &[1, FEATURES])?)
    }

    fn code(g: &mut Graph<S>, mu: NodeId, logvar: NodeId, rng: Option<&mut Rng>) -> Result<NodeId, NetError> {
        match rng {
            None => Ok(mu),
            Some(rng) => {
                let shape = g.shape(mu).to_vec();
                let n = shape.iter().product();
                let noise = (0..n).map(|_| S::from_f64_lossy(StandardNormal.sample(rng))).collect();
                let eps = g.input(&shape, noise)?;
                Ok(g.reparameterize(mu, logvar, eps)?)
            }
        }
    }

    /// Full pass for `x: [1, 30, 30, 30]`. `rng` selects stochastic codes.
    pub fn forward_nodes(
        &self,
        g: &mut Graph<S>,
        w: &[NodeId],
        x: NodeId,
        mut rng: Option<&mut Rng>,
    ) -> Result<VslNodes, NetError> {
        let f = self.features(g, w, x)?;
        let mu_g = g.linear(f, w[GLOBAL_MU], w[GLOBAL_MU + 1])?;
        let logvar_g = g.linear(f, w[GLOBAL_LV], w[GLOBAL_LV + 1])?;
        let mu_1 = g.linear(f, w[L1_MU], w[L1_MU + 1])?;
        let logvar_1 = g.linear(f, w[L1_LV], w[L1_LV + 1])?;
        let z_g = Self::code(g, mu_g, logvar_g, rng.as_deref_mut())?;
        let z_1 = Self::code(g, mu_1, logvar_1, rng.as_deref_mut())?;
        let f2 = g.concat(&[z_1, f], 1)?;
        let mu_2 = g.linear(f2, w[L2_MU], w[L2_MU + 1])?;
        let logvar_2 = g.linear(f2, w[L2_LV], w[L2_LV + 1])?;
        let z_2 = Self::code(g, mu_2, logvar_2, rng)?;

        let z = g.concat(&[z_g, z_1, z_2], 1)?;
        let h = g.linear(z, w[DEC1], w[DEC1 + 1])?;
        let h = g.relu(h)?;
        let h = g.linear(h, w[DEC2], w[DEC2 + 1])?;
        let p = g.sigmoid(h)?;
        let probs = g.reshape(p, &[1, GRID, GRID, GRID])?;

        let kl_g = g.kl_std_normal(mu_g, logvar_g)?;
        let kl_1 = g.kl_std_normal(mu_1, logvar_1)?;
        let kl_2 = g.kl_std_normal(mu_2, logvar_2)?;
        let kl = g.add(kl_g, kl_1)?;
        let kl = g.add(kl, kl_2)?;
        Ok(VslNodes { mu_g, logvar_g, mu_1, logvar_1, mu_2, logvar_2, probs, kl })
    }

    /// Encoder-only pass computing the mean-mode tap activations.
    pub(super) fn tap_nodes(
        &self,
        g: &mut Graph<S>,
        w: &[NodeId],
        x: NodeId,
        taps: &[Tap],
    ) -> Result<Vec<NodeId>, NetError> {
        let f = self.features(g, w, x)?;
        let mut global = None;
        let mut locals = None;
        let mut out = Vec::with_capacity(taps.len());
        for &tap in taps {
            let id = match tap {
                Tap::VslGlobal => match global {
                    Some(id) => id,
                    None => *global.insert(g.linear(f, w[GLOBAL_MU], w[GLOBAL_MU + 1])?),
                },
                _ => match locals {
                    Some(id) => id,
                    None => {
                        let mu_1 = g.linear(f, w[L1_MU], w[L1_MU + 1])?;
                        let f2 = g.concat(&[mu_1, f], 1)?;
                        let mu_2 = g.linear(f2, w[L2_MU], w[L2_MU + 1])?;
                        *locals.insert(g.concat(&[mu_1, mu_2], 1)?)
                    }
                },
            };
            out.push(id);
        }
        Ok(out)
    }
}

/// Probability grid, requested taps, latents and KL for one grid.
pub fn forward_vsl<S: Scalar>(
    net: &VoxelVae<S>,
    grid: &VoxelGrid,
    mode: LatentMode,
    taps: &[Tap],
) -> Result<VslOutput<S>, NetError> {
    if let Some(&t) = taps.iter().find(|t| t.backend() != super::Backend::Vsl) {
        return Err(NetError::TapBackend { tap: t, backend: super::Backend::Vsl });
    }
    let mut g = Graph::new();
    let w = net.params.bind_frozen(&mut g);
    let x = g.constant(&net.input(grid)?);
    let mut rng = match mode {
        LatentMode::Mean => None,
        LatentMode::Stochastic { seed } => Some(seeded_rng(seed)),
    };
    let n = net.forward_nodes(&mut g, &w, x, rng.as_mut())?;
    let probs: Vec<f32> = g.value(n.probs).iter().map(|v| v.to_f64_lossy() as f32).collect();
    let locals = g.concat(&[n.mu_1, n.mu_2], 1)?;
    let captured = taps
        .iter()
        .map(|&tap| FeatureTap { tap, tensor: g.tensor(if tap == Tap::VslGlobal { n.mu_g } else { locals }) })
        .collect();
    let v = |id| g.value(id).to_vec();
    let latents = VslLatents {
        mu_g: v(n.mu_g),
        logvar_g: v(n.logvar_g),
        mu_1: v(n.mu_1),
        logvar_1: v(n.logvar_1),
        mu_2: v(n.mu_2),
        logvar_2: v(n.logvar_2),
    };
    Ok(VslOutput {
        probs: ProbabilityGrid::new([GRID; 3], probs)?,
        taps: captured,
        latents,
        kl: g.value(n.kl)[0].to_f64_lossy(),
    })
}
