//! Multimodal architectures (CoRe, Early, Mid-Late), the unimodal
//! equivalent, and missing-modality routing.

use crate::autodiff::{ParamId, ParamStore, Tensor, Var};
use crate::backbone::{Block, CrossLayer, Init, PredictorHead, Session, UnimodalEncoder, UnimodalStates};
use crate::config::{FusionVariant, ModelConfig};
use crate::error::{data_err, Error, Result};
use crate::modality::{Modality, PerModality};
use crate::scalar::Scalar;

/// Everything a forward pass may produce. Which fields are set depends on
/// the architecture and on which modalities were supplied.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModelOutputs {
    /// `[L,C]` multimodal logits (both modalities present).
    pub logits_mm: Option<Var>,
    /// `[L,C]` unimodal-predictor logits.
    pub logits: PerModality<Option<Var>>,
    /// `[L,d]` unimodal outer states.
    pub outer: PerModality<Option<Var>>,
    /// `[L,d]` unimodal inner [CLS] summaries.
    pub cls: PerModality<Option<Var>>,
    /// `[L,d]` grounded (cross-attended) outer states, CoRe only.
    pub grounded: PerModality<Option<Var>>,
}

/// One modality's multimodal branch in CoRe: the unimodal encoder's
/// self-attention and feed-forward parameters (same ids, same storage) plus
/// its own cross-attention sublayers.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalEncoder {
    pub shared: UnimodalEncoder,
    pub inner_cross: Vec<CrossLayer>,
    pub outer_cross: Vec<CrossLayer>,
}

impl MultimodalEncoder {
    fn init<T: Scalar>(init: &mut Init<'_, T>, prefix: &str, shared: &UnimodalEncoder, cfg: &ModelConfig) -> Self {
        Self {
            shared: shared.clone(),
            inner_cross: (0..cfg.inner_layers)
                .map(|i| CrossLayer::init(init, &format!("{prefix}.inner.{i}"), cfg))
                .collect(),
            outer_cross: (0..cfg.outer_layers)
                .map(|i| CrossLayer::init(init, &format!("{prefix}.outer.{i}"), cfg))
                .collect(),
        }
    }

    pub fn cross_ids(&self) -> Vec<ParamId> {
        self.inner_cross.iter().chain(&self.outer_cross).flat_map(CrossLayer::ids).collect()
    }

    /// Re-processes this modality's tokens with the shared layers while
    /// cross-attending to the other modality's unimodal inner states, then
    /// its outer states. Returns the grounded `[L,d]` representation.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, own: &UnimodalStates, other: &UnimodalStates) -> Result<Var> {
        let inner = self
            .shared
            .inner
            .forward_cross(s, own.tokens, &self.inner_cross, other.inner_states)?;
        let summaries = s.tape.select_row(inner, 0)?;
        let shape = s.tape.shape(summaries).to_vec();
        let seq = s.tape.reshape(summaries, &[1, shape[0], shape[1]])?;
        let other_outer = s.tape.reshape(other.outer_states, &[1, shape[0], shape[1]])?;
        check_outer_len(&self.shared.outer, shape[0])?;
        let outer = self.shared.outer.forward_cross(s, seq, &self.outer_cross, other_outer)?;
        s.tape.reshape(outer, &shape)
    }
}

fn check_outer_len(block: &Block, len: usize) -> Result<()> {
    if len > block.max_len {
        return Err(Error::Shape {
            op: "outer sequence",
            lhs: vec![len],
            rhs: vec![block.max_len],
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub multimodal: PredictorHead,
    pub unimodal: PerModality<PredictorHead>,
}

impl Heads {
    fn init<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Self {
        let multimodal = PredictorHead::init(init, "head.mm", cfg);
        let unimodal = if cfg.share_predictors {
            PerModality::new(multimodal.clone(), multimodal.clone())
        } else {
            PerModality::from_fn(|m| PredictorHead::init(init, &format!("head.{m}"), cfg))
        };
        Self { multimodal, unimodal }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoReFusion {
    pub encoders: PerModality<UnimodalEncoder>,
    pub branches: PerModality<MultimodalEncoder>,
    pub heads: Heads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MidLateFusion {
    pub encoders: PerModality<UnimodalEncoder>,
    pub heads: Heads,
}

/// One shared encoder; modalities are told apart by learned embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyFusion {
    pub input_weight: ParamId,
    pub input_bias: ParamId,
    pub cls: ParamId,
    pub modality_embedding: PerModality<ParamId>,
    pub inner: Block,
    pub outer: Block,
    pub heads: Heads,
    pub frames: usize,
    pub features: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnimodalModel {
    pub modality: Modality,
    pub encoder: UnimodalEncoder,
    pub head: PredictorHead,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Unimodal(UnimodalModel),
    Early(EarlyFusion),
    MidLate(MidLateFusion),
    CoRe(CoReFusion),
}

/// Parameters plus the id layout that reads them.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub arch: Architecture,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let arch = {
            let mut init = Init::new(&mut store, seed);
            build_arch(&mut init, &config)
        };
        Ok(Self { config, store, arch })
    }

    pub fn variant(&self) -> FusionVariant {
        self.config.fusion
    }

    /// Forward pass. Missing modalities are `None`; with one modality only
    /// that modality's unimodal path runs. `unimodal_outputs` asks Early
    /// fusion for its extra single-modality passes (the other architectures
    /// produce them for free).
    pub fn forward(&self, s: &mut Session<'_, T>, inputs: PerModality<Option<Var>>, unimodal_outputs: bool) -> Result<ModelOutputs> {
        let present = inputs.present();
        if present.count() == 0 {
            return Err(data_err("forward needs at least one modality"));
        }
        match &self.arch {
            Architecture::Unimodal(m) => {
                let x = inputs[m.modality]
                    .ok_or_else(|| data_err(format!("unimodal {} model given no {} input", m.modality, m.modality)))?;
                m.forward(s, x)
            }
            Architecture::CoRe(c) => match (inputs.eeg, inputs.eog) {
                (Some(eeg), Some(eog)) => c.forward(s, eeg, eog),
                _ => {
                    let m = present.only().expect("one modality present");
                    unimodal_path(s, &c.encoders[m], &c.heads.unimodal[m], m, inputs[m].unwrap())
                }
            },
            Architecture::MidLate(ml) => match (inputs.eeg, inputs.eog) {
                (Some(eeg), Some(eog)) => ml.forward(s, eeg, eog),
                _ => {
                    let m = present.only().expect("one modality present");
                    unimodal_path(s, &ml.encoders[m], &ml.heads.unimodal[m], m, inputs[m].unwrap())
                }
            },
            Architecture::Early(e) => e.forward(s, inputs, unimodal_outputs),
        }
    }

    /// Convenience wrapper that places input tensors on the tape first.
    pub fn forward_tensors(
        &self,
        s: &mut Session<'_, T>,
        inputs: PerModality<Option<&Tensor<T>>>,
        unimodal_outputs: bool,
    ) -> Result<ModelOutputs> {
        let eeg = inputs.eeg.map(|t| s.input(t.clone())).transpose()?;
        let eog = inputs.eog.map(|t| s.input(t.clone())).transpose()?;
        self.forward(s, PerModality::new(eeg, eog), unimodal_outputs)
    }

    /// Standalone unimodal-equivalent model reading this model's parameters
    /// for `modality` (same ids, no copies). Early fusion has no separate
    /// per-modality encoder, so it yields `None`.
    pub fn unimodal_view(&self, modality: Modality) -> Option<UnimodalModel> {
        let (encoders, heads) = match &self.arch {
            Architecture::CoRe(c) => (&c.encoders, &c.heads),
            Architecture::MidLate(m) => (&m.encoders, &m.heads),
            Architecture::Unimodal(u) if u.modality == modality => return Some(u.clone()),
            _ => return None,
        };
        Some(UnimodalModel {
            modality,
            encoder: encoders[modality].clone(),
            head: heads.unimodal[modality].clone(),
        })
    }

    /// Parameters that only influence one modality's unimodal path.
    pub fn modality_param_ids(&self, modality: Modality) -> Vec<ParamId> {
        match &self.arch {
            Architecture::CoRe(c) => {
                let mut v = c.encoders[modality].ids();
                v.extend(c.heads.unimodal[modality].ids());
                v
            }
            Architecture::MidLate(m) => {
                let mut v = m.encoders[modality].ids();
                v.extend(m.heads.unimodal[modality].ids());
                v
            }
            Architecture::Unimodal(u) if u.modality == modality => {
                let mut v = u.encoder.ids();
                v.extend(u.head.ids());
                v
            }
            Architecture::Early(e) => vec![e.modality_embedding[modality]],
            Architecture::Unimodal(_) => Vec::new(),
        }
    }
}

fn build_arch<T: Scalar>(init: &mut Init<'_, T>, cfg: &ModelConfig) -> Architecture {
    match cfg.fusion {
        FusionVariant::Unimodal(m) => Architecture::Unimodal(UnimodalModel {
            modality: m,
            encoder: UnimodalEncoder::init(init, m.name(), cfg),
            head: PredictorHead::init(init, &format!("head.{m}"), cfg),
        }),
        FusionVariant::MidLate => {
            let encoders = PerModality::from_fn(|m| UnimodalEncoder::init(init, m.name(), cfg));
            Architecture::MidLate(MidLateFusion {
                encoders,
                heads: Heads::init(init, cfg),
            })
        }
        FusionVariant::CoRe => {
            let encoders = PerModality::from_fn(|m| UnimodalEncoder::init(init, m.name(), cfg));
            let branches =
                PerModality::from_fn(|m| MultimodalEncoder::init(init, &format!("{m}.mm"), &encoders[m], cfg));
            Architecture::CoRe(CoReFusion {
                encoders,
                branches,
                heads: Heads::init(init, cfg),
            })
        }
        FusionVariant::Early => Architecture::Early(EarlyFusion {
            input_weight: init.matrix("early.input.w".into(), cfg.features, cfg.d_model),
            input_bias: init.zeros("early.input.b".into(), cfg.d_model),
            cls: init.embedding("early.cls".into(), &[cfg.d_model], 0.02),
            modality_embedding: PerModality::from_fn(|m| init.embedding(format!("early.emb.{m}"), &[cfg.d_model], 0.02)),
            inner: Block::init(init, "early.inner", cfg, cfg.inner_layers, 2 * cfg.frames + 1),
            outer: Block::init(init, "early.outer", cfg, cfg.outer_layers, cfg.max_windows),
            heads: Heads::init(init, cfg),
            frames: cfg.frames,
            features: cfg.features,
        }),
    }
}

fn unimodal_path<T: Scalar>(
    s: &mut Session<'_, T>,
    encoder: &UnimodalEncoder,
    head: &PredictorHead,
    modality: Modality,
    x: Var,
) -> Result<ModelOutputs> {
    let states = encoder.forward(s, x)?;
    let logits = head.forward(s, states.outer_states)?;
    let mut out = ModelOutputs::default();
    out.logits[modality] = Some(logits);
    out.outer[modality] = Some(states.outer_states);
    out.cls[modality] = Some(states.summaries);
    Ok(out)
}

fn check_aligned<T: Scalar>(s: &Session<'_, T>, eeg: Var, eog: Var) -> Result<()> {
    let (a, b) = (s.tape.shape(eeg), s.tape.shape(eog));
    if a.first() != b.first() {
        return Err(Error::Shape {
            op: "modalities not temporally aligned",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

impl UnimodalModel {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, windows: Var) -> Result<ModelOutputs> {
        unimodal_path(s, &self.encoder, &self.head, self.modality, windows)
    }
}

impl CoReFusion {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, eeg: Var, eog: Var) -> Result<ModelOutputs> {
        check_aligned(s, eeg, eog)?;
        let uni = PerModality::new(self.encoders.eeg.forward(s, eeg)?, self.encoders.eog.forward(s, eog)?);
        let grounded_eeg = self.branches.eeg.forward(s, &uni.eeg, &uni.eog)?;
        let grounded_eog = self.branches.eog.forward(s, &uni.eog, &uni.eeg)?;
        let fused = s.tape.add(grounded_eeg, grounded_eog)?;
        let mut out = ModelOutputs {
            logits_mm: Some(self.heads.multimodal.forward(s, fused)?),
            grounded: PerModality::new(Some(grounded_eeg), Some(grounded_eog)),
            ..Default::default()
        };
        for m in Modality::ALL {
            out.logits[m] = Some(self.heads.unimodal[m].forward(s, uni[m].outer_states)?);
            out.outer[m] = Some(uni[m].outer_states);
            out.cls[m] = Some(uni[m].summaries);
        }
        Ok(out)
    }
}

impl MidLateFusion {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, eeg: Var, eog: Var) -> Result<ModelOutputs> {
        check_aligned(s, eeg, eog)?;
        let uni = PerModality::new(self.encoders.eeg.forward(s, eeg)?, self.encoders.eog.forward(s, eog)?);
        let fused = s.tape.add(uni.eeg.outer_states, uni.eog.outer_states)?;
        let mut out = ModelOutputs {
            logits_mm: Some(self.heads.multimodal.forward(s, fused)?),
            ..Default::default()
        };
        for m in Modality::ALL {
            out.logits[m] = Some(self.heads.unimodal[m].forward(s, uni[m].outer_states)?);
            out.outer[m] = Some(uni[m].outer_states);
            out.cls[m] = Some(uni[m].summaries);
        }
        Ok(out)
    }
}

impl EarlyFusion {
    fn check_windows<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Result<usize> {
        let shape = s.tape.shape(x);
        if shape.len() != 3 || shape[1] != self.frames || shape[2] != self.features {
            return Err(Error::Shape {
                op: "early fusion input",
                lhs: shape.to_vec(),
                rhs: vec![self.frames, self.features],
            });
        }
        Ok(shape[0])
    }

    /// Projected frames tagged with their modality embedding, `[L,T,d]`.
    fn modality_tokens<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, m: Modality) -> Result<Var> {
        self.check_windows(s, x)?;
        let w = s.param(self.input_weight);
        let b = s.param(self.input_bias);
        let emb = s.param(self.modality_embedding[m]);
        let h = s.tape.matmul(x, w)?;
        let h = s.tape.add_row(h, b)?;
        s.tape.add_row(h, emb)
    }

    /// Inner block over `[CLS] ++ tokens`, then the outer block over the
    /// per-window [CLS] outputs. Returns (summaries, outer states).
    fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, tokens: Var) -> Result<(Var, Var)> {
        let cls = s.param(self.cls);
        let seq = s.tape.prepend_row(tokens, cls)?;
        let inner = self.inner.forward(s, seq)?;
        let summaries = s.tape.select_row(inner, 0)?;
        let shape = s.tape.shape(summaries).to_vec();
        check_outer_len(&self.outer, shape[0])?;
        let seq = s.tape.reshape(summaries, &[1, shape[0], shape[1]])?;
        let outer = self.outer.forward(s, seq)?;
        Ok((summaries, s.tape.reshape(outer, &shape)?))
    }

    /// Length of the joint inner sequence for `frames` per modality.
    pub fn joint_inner_len(frames: usize) -> usize {
        2 * frames + 1
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, inputs: PerModality<Option<Var>>, unimodal_outputs: bool) -> Result<ModelOutputs> {
        let mut out = ModelOutputs::default();
        if let (Some(eeg), Some(eog)) = (inputs.eeg, inputs.eog) {
            check_aligned(s, eeg, eog)?;
            let te = self.modality_tokens(s, eeg, Modality::Eeg)?;
            let to = self.modality_tokens(s, eog, Modality::Eog)?;
            let joint = s.tape.concat_rows(&[te, to])?;
            let (_, outer) = self.encode(s, joint)?;
            out.logits_mm = Some(self.heads.multimodal.forward(s, outer)?);
            if !unimodal_outputs {
                return Ok(out);
            }
        }
        for m in Modality::ALL {
            let Some(x) = inputs[m] else { continue };
            let tokens = self.modality_tokens(s, x, m)?;
            let (summaries, outer) = self.encode(s, tokens)?;
            out.logits[m] = Some(self.heads.unimodal[m].forward(s, outer)?);
            out.outer[m] = Some(outer);
            out.cls[m] = Some(summaries);
        }
        Ok(out)
    }
}

/// Logits `[L,C]` for whichever modalities are available: the multimodal
/// head when both are, otherwise the present modality's unimodal head.
/// Runs in inference mode.
pub fn infer_with_missing<T: Scalar>(model: &Model<T>, inputs: PerModality<Option<&Tensor<T>>>) -> Result<Tensor<T>> {
    let present = inputs.present();
    if present.count() == 0 {
        return Err(data_err("no modality available for inference"));
    }
    let mut s = Session::eval(&model.store, &model.config);
    let out = model.forward_tensors(&mut s, inputs, false)?;
    let logits = if present.both() {
        out.logits_mm
    } else {
        out.logits[present.only().unwrap()]
    }
    .ok_or_else(|| data_err(format!("{} model produced no logits for this input", model.variant())))?;
    Ok(s.tape.value(logits).clone())
}
