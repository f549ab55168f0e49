//! Latent shape blending: a trainable copy of a pretrained autoencoder is
//! optimized so its reconstruction of one shape matches the content taps of
//! that shape and the style taps of another, as seen by a frozen copy.

mod result;

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use result::{probability_path, read_result, sidecar_path, StoredResult, TransferReport, PROBABILITY_TENSOR};

use crate::grad::{adam_step, AdamConfig, AdamState, GradError, Graph, NodeId, Scalar, Tensor};
use crate::nets::{Autoencoder, Backend, FeatureTap, NetError, NetOutput, ShapeSample, Tap};
use crate::shape::{Checkpoint, ShapeError};

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("invalid transfer config: {0}")]
    InvalidConfig(String),
    #[error("config asks for {config} but the checkpoint holds a {checkpoint} network")]
    BackendMismatch { config: Backend, checkpoint: Backend },
    #[error("ratio list is empty")]
    EmptySweep,
    #[error("ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("ratios must be sorted in ascending order")]
    UnsortedRatios,
    #[error("non-finite transfer loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("malformed result sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One blending job. Empty tap lists select the backend defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub backend: Backend,
    pub checkpoint: String,
    pub content: String,
    pub style: String,
    /// Content weight.
    pub alpha: f64,
    /// Style weight.
    pub beta: f64,
    pub content_taps: Vec<Tap>,
    pub style_taps: Vec<Tap>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Permit a tap to appear in both lists.
    pub allow_overlap: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            backend: Backend::PointNet,
            checkpoint: String::new(),
            content: String::new(),
            style: String::new(),
            alpha: 0.5,
            beta: 0.5,
            content_taps: Vec::new(),
            style_taps: Vec::new(),
            epochs: 2000,
            lr: 1e-3,
            seed: 0,
            allow_overlap: false,
        }
    }
}

impl TransferConfig {
    /// Copy with default taps filled in.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.content_taps.is_empty() {
            cfg.content_taps = vec![cfg.backend.default_content_tap()];
        }
        if cfg.style_taps.is_empty() {
            cfg.style_taps = vec![cfg.backend.default_style_tap()];
        }
        cfg
    }

    /// Copy with `alpha = ratio` and `beta = 1 - ratio`.
    pub fn with_ratio(&self, ratio: f64) -> Self {
        Self { alpha: ratio, beta: 1.0 - ratio, ..self.clone() }
    }

    /// Checks the config after resolving default taps.
    pub fn validate(&self) -> Result<(), TransferError> {
        let bad = |m: String| Err(TransferError::InvalidConfig(m));
        let cfg = self.resolved();
        for (name, w) in [("alpha", cfg.alpha), ("beta", cfg.beta)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {w}"));
            }
        }
        if cfg.alpha + cfg.beta <= 0.0 {
            return bad("alpha + beta must be positive".into());
        }
        if cfg.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", cfg.lr));
        }
        for (role, taps) in [("content", &cfg.content_taps), ("style", &cfg.style_taps)] {
            let mut seen = BTreeSet::new();
            for &t in taps {
                if t.backend() != cfg.backend {
                    return Err(NetError::TapBackend { tap: t, backend: cfg.backend }.into());
                }
                if !seen.insert(t) {
                    return bad(format!("{role} tap {t} listed twice"));
                }
            }
        }
        if !cfg.allow_overlap {
            if let Some(t) = cfg.content_taps.iter().find(|t| cfg.style_taps.contains(t)) {
                return bad(format!("tap {t} is both a content and a style tap (set allow_overlap to permit)"));
            }
        }
        Ok(())
    }
}

/// Immutable pretrained network used only to read tap activations.
#[derive(Clone, Debug)]
pub struct FrozenProvider<S> {
    net: Autoencoder<S>,
    checksum: String,
}

impl<S: Scalar> FrozenProvider<S> {
    pub fn new(mut net: Autoencoder<S>) -> Self {
        net.params_mut().set_trainable(false);
        let checksum = net.checksum();
        Self { net, checksum }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TransferError> {
        Ok(Self::new(Autoencoder::from_checkpoint(ck)?))
    }

    pub fn net(&self) -> &Autoencoder<S> {
        &self.net
    }

    pub fn backend(&self) -> Backend {
        self.net.backend()
    }

    /// Checksum taken when the provider was built.
    pub fn initial_checksum(&self) -> &str {
        &self.checksum
    }

    /// Checksum of the weights as they are now.
    pub fn checksum(&self) -> String {
        self.net.checksum()
    }
}

/// Tap activations of `sample` under the provider's weights.
pub fn extract_features<S: Scalar>(
    provider: &FrozenProvider<S>,
    sample: &ShapeSample,
    taps: &[Tap],
) -> Result<Vec<FeatureTap<S>>, TransferError> {
    Ok(provider.net.extract(sample, taps)?)
}

/// Losses of one epoch, measured before that epoch's update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub epoch: usize,
    /// `alpha * content + beta * style`.
    pub total: f64,
    /// Sum of content-tap MSEs.
    pub content: f64,
    /// Sum of style-tap MSEs.
    pub style: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistances {
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TransferResult<S> {
    pub report: TransferReport,
    /// Reconstruction of the content shape by the final transform net.
    pub output: NetOutput,
    pub transform: Autoencoder<S>,
}

struct Objective<S> {
    alpha: f64,
    beta: f64,
    taps: Vec<Tap>,
    content: Vec<(usize, Tensor<S>)>,
    style: Vec<(usize, Tensor<S>)>,
}

struct Evaluated {
    loss: NodeId,
    output: NodeId,
    content: f64,
    style: f64,
}

impl<S: Scalar> Objective<S> {
    fn new(
        provider: &FrozenProvider<S>,
        cfg: &TransferConfig,
        content: &ShapeSample,
        style: &ShapeSample,
    ) -> Result<Self, TransferError> {
        let taps: Vec<Tap> =
            cfg.content_taps.iter().chain(&cfg.style_taps).copied().collect::<BTreeSet<_>>().into_iter().collect();
        let slot = |t: &Tap| taps.iter().position(|x| x == t).expect("tap in union");
        let targets = |sample, list: &[Tap]| -> Result<Vec<(usize, Tensor<S>)>, TransferError> {
            let feats = extract_features(provider, sample, list)?;
            Ok(feats.into_iter().map(|f| (slot(&f.tap), f.tensor)).collect())
        };
        Ok(Self {
            alpha: cfg.alpha,
            beta: cfg.beta,
            content: targets(content, &cfg.content_taps)?,
            style: targets(style, &cfg.style_taps)?,
            taps,
        })
    }

    /// Builds `T(x)` and its weighted tap loss under the frozen provider.
    fn build(
        &self,
        g: &mut Graph<S>,
        transform: &Autoencoder<S>,
        wt: &[NodeId],
        provider: &FrozenProvider<S>,
        x: NodeId,
    ) -> Result<Evaluated, TransferError> {
        let wp = provider.net.params().bind_frozen(g);
        let y = transform.reconstruct(g, wt, x)?;
        let feats = provider.net.tap_nodes(g, &wp, y, &self.taps)?;
        let sum = |g: &mut Graph<S>, targets: &[(usize, Tensor<S>)]| -> Result<NodeId, GradError> {
            let mut acc = None;
            for (slot, target) in targets {
                let t = g.constant(target);
                let d = g.mse(feats[*slot], t)?;
                acc = Some(match acc {
                    None => d,
                    Some(a) => g.add(a, d)?,
                });
            }
            Ok(acc.expect("tap lists are non-empty"))
        };
        let c = sum(g, &self.content)?;
        let s = sum(g, &self.style)?;
        let wc = g.scale(c, self.alpha)?;
        let ws = g.scale(s, self.beta)?;
        let loss = g.add(wc, ws)?;
        Ok(Evaluated { loss, output: y, content: g.value(c)[0].to_f64_lossy(), style: g.value(s)[0].to_f64_lossy() })
    }

    fn total(&self, content: f64, style: f64) -> f64 {
        self.alpha * content + self.beta * style
    }
}

/// Optimizes a trainable copy of the provider's network for `cfg.epochs`
/// Adam steps and returns its final reconstruction of `content`.
///
/// `progress` is called once per epoch. The provider is only read.
pub fn run_transfer<S: Scalar>(
    provider: &FrozenProvider<S>,
    cfg: &TransferConfig,
    content: &ShapeSample,
    style: &ShapeSample,
    progress: &mut dyn FnMut(&TransferRecord),
) -> Result<TransferResult<S>, TransferError> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    if cfg.backend != provider.backend() {
        return Err(TransferError::BackendMismatch { config: cfg.backend, checkpoint: provider.backend() });
    }
    let provider_before = provider.checksum();
    let objective = Objective::new(provider, &cfg, content, style)?;

    let mut transform = provider.net.clone();
    transform.params_mut().set_trainable(true);
    let transform_initial = transform.checksum();
    let input = transform.input(content)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), transform.params().tensors());
    let mut history = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let (mut grads, wt) = {
            let mut g = Graph::new();
            let wt = transform.params().bind(&mut g);
            let x = g.constant(&input);
            let ev = objective.build(&mut g, &transform, &wt, provider, x)?;
            let total = objective.total(ev.content, ev.style);
            if !(total.is_finite() && ev.content.is_finite() && ev.style.is_finite()) {
                return Err(TransferError::NonFinite { epoch });
            }
            let record = TransferRecord {
                epoch,
                total,
                content: ev.content,
                style: ev.style,
                seconds: start.elapsed().as_secs_f64(),
            };
            progress(&record);
            history.push(record);
            (g.backward(ev.loss)?, wt)
        };
        transform.params_mut().absorb_grads(&mut grads, &wt)?;
        adam_step(transform.params_mut().tensors_mut().iter_mut(), &mut adam)?;
    }

    let mut g = Graph::new();
    let wt = transform.params().bind_frozen(&mut g);
    let x = g.constant(&input);
    let ev = objective.build(&mut g, &transform, &wt, provider, x)?;
    let total = objective.total(ev.content, ev.style);
    if !total.is_finite() {
        return Err(TransferError::NonFinite { epoch: cfg.epochs });
    }
    let output = transform.output(g.value(ev.output))?;
    let seconds = start.elapsed().as_secs_f64();

    let report = TransferReport {
        final_distances: FeatureDistances { content: ev.content, style: ev.style, total },
        seconds,
        provider_checksum_before: provider_before,
        provider_checksum_after: provider.checksum(),
        transform_checksum_initial: transform_initial,
        transform_checksum_final: transform.checksum(),
        history,
        config: cfg,
    };
    Ok(TransferResult { report, output, transform })
}

/// One independent run per ratio, with `alpha = ratio` and `beta = 1 - ratio`.
pub fn sweep_ratio<S: Scalar>(
    provider: &FrozenProvider<S>,
    base: &TransferConfig,
    ratios: &[f64],
    content: &ShapeSample,
    style: &ShapeSample,
    progress: &mut dyn FnMut(usize, &TransferRecord),
) -> Result<Vec<TransferResult<S>>, TransferError> {
    check_ratios(ratios)?;
    for &r in ratios {
        base.with_ratio(r).validate()?;
    }
    ratios
        .iter()
        .enumerate()
        .map(|(i, &r)| run_transfer(provider, &base.with_ratio(r), content, style, &mut |rec| progress(i, rec)))
        .collect()
}

/// Non-empty, each in `[0, 1]`, ascending.
pub fn check_ratios(ratios: &[f64]) -> Result<(), TransferError> {
    if ratios.is_empty() {
        return Err(TransferError::EmptySweep);
    }
    if let Some(&r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(TransferError::InvalidRatio(r));
    }
    if ratios.windows(2).any(|w| w[1] < w[0]) {
        return Err(TransferError::UnsortedRatios);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TransferConfig {
        TransferConfig { content: "a".into(), style: "b".into(), ..Default::default() }
    }

    #[test]
    fn defaults_resolve_per_backend() {
        let c = cfg().resolved();
        assert_eq!((c.content_taps.as_slice(), c.style_taps.as_slice()), (&[Tap::PnL1][..], &[Tap::PnBottleneck][..]));
        let v = TransferConfig { backend: Backend::Vsl, ..cfg() }.resolved();
        assert_eq!(
            (v.content_taps.as_slice(), v.style_taps.as_slice()),
            (&[Tap::VslGlobal][..], &[Tap::VslLocals][..])
        );
        assert_eq!(c.epochs, 2000);
    }

    #[test]
    fn rejects_bad_configs() {
        let invalid = |c: TransferConfig| matches!(c.validate(), Err(TransferError::InvalidConfig(_)));
        assert!(invalid(TransferConfig { alpha: 0.0, beta: 0.0, ..cfg() }));
        assert!(invalid(TransferConfig { alpha: -1.0, beta: 2.0, ..cfg() }));
        assert!(invalid(TransferConfig { beta: f64::NAN, ..cfg() }));
        assert!(invalid(TransferConfig { epochs: 0, ..cfg() }));
        assert!(invalid(TransferConfig { lr: 0.0, ..cfg() }));
        assert!(invalid(TransferConfig { content_taps: vec![Tap::PnL1, Tap::PnL1], ..cfg() }));
        assert!(invalid(TransferConfig { style_taps: vec![Tap::PnL1], ..cfg() }));
        assert!(TransferConfig { style_taps: vec![Tap::PnL1], allow_overlap: true, ..cfg() }.validate().is_ok());
        assert!(matches!(
            TransferConfig { content_taps: vec![Tap::VslGlobal], ..cfg() }.validate(),
            Err(TransferError::Net(NetError::TapBackend { .. }))
        ));
        assert!(TransferConfig { alpha: 0.0, beta: 1.0, ..cfg() }.validate().is_ok());
    }

    #[test]
    fn ratio_checks() {
        assert!(matches!(check_ratios(&[]), Err(TransferError::EmptySweep)));
        assert!(matches!(check_ratios(&[0.0, 1.5]), Err(TransferError::InvalidRatio(_))));
        assert!(matches!(check_ratios(&[0.5, 0.0]), Err(TransferError::UnsortedRatios)));
        assert!(check_ratios(&[0.0, 0.5, 0.5, 1.0]).is_ok());
        let c = cfg().with_ratio(0.25);
        assert_eq!((c.alpha, c.beta), (0.25, 0.75));
    }

    #[test]
    fn config_json_uses_tap_names() {
        let c = cfg().resolved();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"pn_l1\"") && text.contains("\"pointnet\""));
        assert_eq!(serde_json::from_str::<TransferConfig>(&text).unwrap(), c);
        let partial: TransferConfig =
            serde_json::from_str(r#"{"backend":"vsl","content":"x","style":"y","alpha":1,"beta":0}"#).unwrap();
        assert_eq!(partial.epochs, 2000);
        assert!(serde_json::from_str::<TransferConfig>(r#"{"alhpa":1}"#).is_err());
    }
}
