//! Routing classifier: `p = P(edge is competent | query)`.
//!
//! Each modality is projected into a shared `d`-dimensional space. The
//! transformer variant treats the three projections as a 3-token sequence
//! (with a learned per-slot vector), mean-pools the encoder output and
//! applies a logistic head. MLP and bilinear-MF variants are provided as
//! baselines and share the training loop.

pub mod io;
pub mod network;
pub mod nn;
pub mod optim;
pub mod schedule;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use self::io::{load_state, save_state, FORMAT_VERSION, MODEL_MAGIC};
pub use self::network::{Architecture, Batch, InputDims, Network};
pub use self::optim::AdamConfig;
pub use self::schedule::one_cycle_lr;

use crate::error::{Error, Result};
use crate::evaluation::grid_search_tau;
use crate::features::{FeatureBundle, ModalityMask, Normalizer};
use crate::rsd::{PairRecord, ScenarioConfig};

const PREDICT_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct RouterModel {
    pub arch: Architecture,
    pub dims: InputDims,
    pub net: Network<f32>,
}

impl RouterModel {
    pub fn new(arch: Architecture, dims: InputDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&arch, dims, &mut rng)?;
        Ok(Self { arch, dims, net })
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    /// Competency probability for one query, dropout disabled.
    pub fn forward(&self, bundle: &FeatureBundle) -> Result<f64> {
        Ok(self.predict(std::slice::from_ref(&bundle))?[0])
    }

    pub fn predict(&self, bundles: &[&FeatureBundle]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(bundles.len());
        for chunk in bundles.chunks(PREDICT_CHUNK) {
            let batch = Batch::<f32>::from_bundles(chunk, self.dims)?;
            out.extend(
                self.net
                    .logits(&batch)
                    .iter()
                    .map(|&z| network::probability(z as f64)),
            );
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_learning_rate: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            peak_learning_rate: 1e-3,
            seed: 0,
            adam: AdamConfig::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.peak_learning_rate > 0.0 && self.peak_learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("grad clip norm must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub tau: f64,
    pub rcs: f64,
}

/// A trained (and possibly calibrated) router with everything needed to
/// rebuild its inputs at serving time.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterState {
    pub model: RouterModel,
    /// Decision threshold; `None` until calibrated.
    pub tau: Option<f64>,
    pub scenario: ScenarioConfig,
    pub mask: ModalityMask,
    pub normalizer: Normalizer,
    pub history: Vec<EpochRecord>,
    pub format_version: u32,
}

impl RouterState {
    pub fn new(model: RouterModel, scenario: ScenarioConfig, mask: ModalityMask, normalizer: Normalizer) -> Self {
        Self {
            model,
            tau: None,
            scenario,
            mask,
            normalizer,
            history: Vec::new(),
            format_version: FORMAT_VERSION,
        }
    }

    pub fn tau_or_err(&self) -> Result<f64> {
        self.tau
            .ok_or_else(|| Error::invalid("router has not been calibrated (no decision threshold)"))
    }

    /// Re-run the threshold grid search with the current parameters.
    pub fn calibrate(
        &mut self,
        bundles: &[&FeatureBundle],
        pairs: &[PairRecord<'_>],
        scenario: &ScenarioConfig,
    ) -> Result<(f64, f64)> {
        let p = self.model.predict(bundles)?;
        let (tau, rcs) = grid_search_tau(&p, pairs, scenario)?;
        self.tau = Some(tau);
        self.scenario = scenario.clone();
        Ok((tau, rcs))
    }
}

pub struct TrainSet<'a> {
    pub bundles: &'a [&'a FeatureBundle],
    pub labels: &'a [u8],
}

pub struct ValidSet<'a, 'r> {
    pub bundles: &'a [&'a FeatureBundle],
    pub pairs: &'a [PairRecord<'r>],
}

pub struct Trained {
    pub state: RouterState,
    pub warnings: Vec<String>,
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 1 << 32;

/// Train with BCE + Adam + one-cycle; after every epoch the threshold is
/// grid-searched on the validation set and the epoch with the highest RCS is
/// kept (earliest epoch on ties).
pub fn train(
    arch: &Architecture,
    dims: InputDims,
    train_set: TrainSet<'_>,
    valid_set: ValidSet<'_, '_>,
    config: &TrainConfig,
    scenario: &ScenarioConfig,
    mask: ModalityMask,
    normalizer: Normalizer,
) -> Result<Trained> {
    config.validate()?;
    scenario.validate()?;
    let n = train_set.bundles.len();
    if n == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if train_set.labels.len() != n {
        return Err(Error::invalid(format!(
            "{} training bundles but {} labels",
            n,
            train_set.labels.len()
        )));
    }
    if valid_set.bundles.is_empty() || valid_set.bundles.len() != valid_set.pairs.len() {
        return Err(Error::invalid(format!(
            "validation set needs aligned, non-empty bundles and pairs ({} vs {})",
            valid_set.bundles.len(),
            valid_set.pairs.len()
        )));
    }
    let mut warnings = Vec::new();
    let positives = train_set.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == n {
        let w = format!("degenerate training labels: {positives} of {n} positive");
        log::warn!("{w}");
        warnings.push(w);
    }

    let model = RouterModel::new(arch.clone(), dims, config.seed)?;
    let mut net = model.net;
    let mut grad = net.zeros_like();
    let mut adam = optim::Adam::new(&net, config.adam);
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let targets_all: Vec<f32> = train_set.labels.iter().map(|&l| l as f32).collect();

    let mut best: Option<(f64, Network<f32>, f64)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(config.seed, SHUFFLE_STREAM + epoch as u64));
        let mut dropout_rng = epoch_rng(config.seed, DROPOUT_STREAM + epoch as u64);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let bundles: Vec<&FeatureBundle> = idx.iter().map(|&i| train_set.bundles[i]).collect();
            let batch = Batch::<f32>::from_bundles(&bundles, dims)?;
            let targets = Array1::from_iter(idx.iter().map(|&i| targets_all[i]));
            let (logits, cache) = net.forward(&batch, Some(&mut dropout_rng));
            let (loss, dlogits) = network::bce_with_logits(&logits, &targets);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += loss as f64 * idx.len() as f64;
            grad.fill(0.0);
            net.backward(&batch, &cache, &dlogits, &mut grad);
            if let Some(max) = config.grad_clip {
                optim::clip_grad_norm(&mut grad, max);
            }
            let lr = one_cycle_lr(step, total_steps, config.peak_learning_rate)?;
            adam.step(&mut net, &grad, lr);
            step += 1;
        }
        let probe = RouterModel {
            arch: arch.clone(),
            dims,
            net,
        };
        let p = probe.predict(valid_set.bundles)?;
        net = probe.net;
        let (tau, rcs) = grid_search_tau(&p, valid_set.pairs, scenario)?;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / n as f64,
            tau,
            rcs,
        });
        log::debug!("epoch {epoch}: loss {:.5} tau* {tau:.2} rcs* {rcs:.5}", loss_sum / n as f64);
        if best.as_ref().is_none_or(|(r, _, _)| rcs > *r) {
            best = Some((rcs, net.clone(), tau));
        }
    }
    let (_, best_net, best_tau) = best.expect("at least one epoch");
    let mut state = RouterState::new(
        RouterModel {
            arch: arch.clone(),
            dims,
            net: best_net,
        },
        scenario.clone(),
        mask,
        normalizer,
    );
    state.tau = Some(best_tau);
    state.history = history;
    Ok(Trained { state, warnings })
}
