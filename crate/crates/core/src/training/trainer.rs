use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::schedule::{early_stop, lr_schedule, TrainConfig};
use crate::autodiff::{AdamConfig, AdamState, ParamGrads, Tensor};
use crate::backbone::Session;
use crate::config::{digest_of, FusionVariant, LossConfig, ModelConfig};
use crate::data::{batches_from_spans, spans, Item, Span, SpectralSequence};
use crate::error::{Error, Result};
use crate::eval::predict_sequence;
use crate::fusion::Model;
use crate::modality::PerModality;
use crate::objectives::{item_loss, total_loss, LossBreakdown};
use crate::scalar::Scalar;

#[derive(Serialize)]
struct Setup<'a> {
    model: &'a ModelConfig,
    loss: &'a LossConfig,
    training: &'a TrainConfig,
}

/// Hex digest identifying a model/loss/training configuration.
pub fn setup_digest(model: &ModelConfig, loss: &LossConfig, training: &TrainConfig) -> String {
    digest_of(&Setup { model, loss, training })
}

/// Parameters at the best validation score so far.
#[derive(Clone, Debug, PartialEq)]
pub struct BestState<T> {
    pub metric: f64,
    pub step: u64,
    pub params: Vec<Tensor<T>>,
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub epoch: u64,
    /// Next batch within the epoch.
    pub cursor: usize,
    pub adam: AdamState<T>,
    /// Dropout generator.
    pub rng: ChaCha8Rng,
    pub best: Option<BestState<T>>,
    pub losses: Vec<f64>,
    /// `(step, validation accuracy)` pairs.
    pub validations: Vec<(u64, f64)>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &Model<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Self {
            step: 0,
            epoch: 0,
            cursor: 0,
            adam: AdamState::new(&model.store),
            rng,
            best: None,
            losses: Vec::new(),
            validations: Vec::new(),
        }
    }

    pub fn best_step(&self) -> u64 {
        self.best.as_ref().map_or(0, |b| b.step)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub stopped_early: bool,
    pub best: Option<(u64, f64)>,
    pub final_loss: f64,
}

/// Owns the model and optimizer state of one run over borrowed data.
pub struct Trainer<'d, T: Scalar> {
    pub model: Model<T>,
    pub loss: LossConfig,
    pub config: TrainConfig,
    pub state: TrainState<T>,
    train: &'d [SpectralSequence],
    validation: &'d [SpectralSequence],
    spans: Vec<Span>,
    batches: Vec<Vec<Span>>,
    batches_epoch: Option<u64>,
    digest: String,
}

/// Modalities the model consumes.
fn model_modalities(variant: FusionVariant) -> PerModality<bool> {
    match variant {
        FusionVariant::Unimodal(m) => PerModality::from_fn(|x| x == m),
        _ => PerModality::new(true, true),
    }
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(
        model: Model<T>,
        loss: LossConfig,
        config: TrainConfig,
        train: &'d [SpectralSequence],
        validation: &'d [SpectralSequence],
    ) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let wanted = model_modalities(model.variant());
        let seq_len = config.seq_len.min(model.config.max_windows);
        let spans: Vec<Span> = spans(train, seq_len)
            .into_iter()
            .filter(|s| {
                let p = train[s.sequence].present();
                p.eeg && wanted.eeg || p.eog && wanted.eog
            })
            .collect();
        if spans.is_empty() {
            return Err(Error::Data("no training windows usable by this model".into()));
        }
        let digest = setup_digest(&model.config, &loss, &config);
        let state = TrainState::new(&model, config.seed);
        Ok(Self {
            model,
            loss,
            config,
            state,
            train,
            validation,
            spans,
            batches: Vec::new(),
            batches_epoch: None,
            digest,
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.config.weight_decay,
            ..AdamConfig::default()
        }
    }

    fn ensure_batches(&mut self) {
        if self.batches_epoch != Some(self.state.epoch) {
            self.batches = batches_from_spans(self.spans.clone(), self.config.batch, self.config.seed, self.state.epoch);
            self.batches_epoch = Some(self.state.epoch);
        }
        if self.state.cursor >= self.batches.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.ensure_batches();
        }
    }

    /// Loss and gradients of one batch, without updating anything.
    pub fn batch_gradients(&mut self, spans: &[Span]) -> Result<(LossBreakdown, ParamGrads<T>)> {
        let wanted = model_modalities(self.model.variant());
        let items: Vec<Item<T>> = spans
            .iter()
            .map(|&s| Item::from_span(self.train, s).restricted(wanted))
            .collect();
        let need_unimodal = self.loss.ms || self.loss.al;
        let mut s = Session::train(&self.model.store, &self.model.config, &mut self.state.rng);
        let mut losses = Vec::with_capacity(items.len());
        for item in &items {
            let inputs = item.inputs.as_ref();
            let out = self.model.forward_tensors(&mut s, inputs, need_unimodal)?;
            losses.push(item_loss(&mut s.tape, &out, &item.labels, item.present(), &self.loss)?);
        }
        let (total, breakdown) = total_loss(&mut s.tape, &losses)?;
        let grads = s.tape.backward(total)?;
        Ok((breakdown, s.tape.param_grads(&grads)))
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        self.ensure_batches();
        let batch_index = self.state.cursor;
        let spans = self.batches[batch_index].clone();
        let diverged = |e: Error, step: u64| match e {
            Error::NonFinite { op } => {
                log::error!("step {step}: non-finite value in {op}; batch {batch_index} spans {spans:?}");
                Error::Diverged { step, batch: batch_index }
            }
            other => other,
        };
        let (breakdown, grads) = self.batch_gradients(&spans).map_err(|e| diverged(e, self.state.step))?;
        if !breakdown.total.is_finite() || !grads.all_finite() {
            log::error!("step {}: non-finite loss or gradient; batch {batch_index}", self.state.step);
            return Err(Error::Diverged {
                step: self.state.step,
                batch: batch_index,
            });
        }
        let lr = lr_schedule(self.state.step + 1, &self.config);
        let adam = self.adam_config();
        self.state.adam.update(&mut self.model.store, &grads, lr, &adam)?;
        self.state.step += 1;
        self.state.cursor += 1;
        self.state.losses.push(breakdown.total);
        if self.state.step % self.config.effective_validate_every() == 0 && !self.validation.is_empty() {
            self.validate()?;
        }
        Ok(breakdown)
    }

    /// Validation accuracy (fraction) of the model's main output.
    pub fn validation_accuracy(&self) -> Result<f64> {
        let wanted = model_modalities(self.model.variant());
        let (mut correct, mut total) = (0usize, 0usize);
        for seq in self.validation {
            let p = seq.present();
            let available = PerModality::new(p.eeg && wanted.eeg, p.eog && wanted.eog);
            if available.count() == 0 {
                continue;
            }
            let pred = predict_sequence(&self.model, seq, available, self.config.seq_len)?;
            correct += pred.iter().zip(&seq.labels).filter(|(p, l)| **p == l.index()).count();
            total += pred.len();
        }
        Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
    }

    fn validate(&mut self) -> Result<()> {
        let acc = self.validation_accuracy()?;
        self.state.validations.push((self.state.step, acc));
        log::info!("step {}: validation accuracy {:.4}", self.state.step, acc);
        if self.state.best.as_ref().is_none_or(|b| acc > b.metric) {
            self.state.best = Some(BestState {
                metric: acc,
                step: self.state.step,
                params: self.model.store.values().to_vec(),
            });
        }
        Ok(())
    }

    fn should_stop(&self) -> bool {
        self.state.best.is_some() && early_stop(self.state.step, self.state.best_step(), self.config.effective_patience())
    }

    /// Steps until `max_steps` or early stopping.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        self.run_until(self.config.max_steps)
    }

    /// Steps until `step == until` (capped by `max_steps`) or early stopping.
    pub fn run_until(&mut self, until: u64) -> Result<TrainOutcome> {
        let until = until.min(self.config.max_steps);
        let mut stopped_early = false;
        while self.state.step < until {
            if self.should_stop() {
                stopped_early = true;
                break;
            }
            self.step()?;
        }
        Ok(TrainOutcome {
            steps: self.state.step,
            stopped_early,
            best: self.state.best.as_ref().map(|b| (b.step, b.metric)),
            final_loss: self.state.losses.last().copied().unwrap_or(f64::NAN),
        })
    }

    /// Loads the best validated parameters (if any) and returns the model.
    pub fn into_best_model(mut self) -> Model<T> {
        if let Some(best) = self.state.best.take() {
            self.model.store.set_values(best.params).expect("best params match the model");
        }
        self.model
    }
}
