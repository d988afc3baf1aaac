//! The full toy VQA system: image encoder, cue source and decoder.

use serde::{Deserialize, Serialize};

use crate::cte::{extract_cues_routed, CteConfig, CteParams, VisualRoute};
use crate::decoder::{
    assemble, forward, generate, teacher_forced, AssembledInput, DecoderConfig, DecoderParams, GenInput, Generation,
    SampleParts,
};
use crate::diffcore::{Graph, Init, ParamId, ParamStore, Real, Var, WeightScale};
use crate::error::{Error, Result};
use crate::layers::Tokens;
use crate::masking::MaskKind;

use super::data::ToySample;
use super::encoder::ImageEncoder;
use super::vocab::{PAD_ID, Q_LEN, VOCAB_SIZE};

/// Answer tokens plus `EOS`.
pub const MAX_ANSWER_LEN: usize = 2;

/// Std of the learnable-token baseline's cue embeddings.
pub const LEARNABLE_STD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueVariant {
    Cte,
    LearnableTokens,
}

impl CueVariant {
    pub fn name(self) -> &'static str {
        match self {
            CueVariant::Cte => "cte",
            CueVariant::LearnableTokens => "learnable_tokens",
        }
    }
}

impl std::str::FromStr for CueVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cte" => Ok(Self::Cte),
            "learnable" | "learnable_tokens" => Ok(Self::LearnableTokens),
            other => Err(Error::Config(format!("unknown cue variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub g: usize,
    pub d_embed: usize,
    pub decoder: DecoderConfig,
    pub cte: CteConfig,
    pub weight_scale: WeightScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let decoder = DecoderConfig {
            vocab: VOCAB_SIZE,
            ..DecoderConfig::default()
        };
        Self {
            g: 4,
            d_embed: 64,
            decoder,
            cte: CteConfig {
                d_llm: decoder.d_llm,
                d_visual: decoder.d_llm,
                ..CteConfig::default()
            },
            weight_scale: WeightScale::FanIn,
        }
    }
}

#[derive(Clone, Debug)]
pub enum CueModule {
    None,
    Cte(CteParams),
    Learnable { tokens: ParamId, k: usize },
}

/// Parameter layout of the system; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VqaArch {
    pub cfg: ModelConfig,
    pub encoder: ImageEncoder,
    pub decoder: DecoderParams,
    pub cues: CueModule,
}

pub const ENCODER_PREFIX: &str = "enc";
pub const DECODER_PREFIX: &str = "dec";
pub const CTE_PREFIX: &str = "cte";
pub const LEARNABLE_NAME: &str = "learn.tokens";

impl VqaArch {
    /// Encoder and decoder only: the cue-free backbone.
    pub fn backbone<T: Real>(store: &mut ParamStore<T>, init: &mut Init, cfg: ModelConfig) -> Result<Self> {
        if cfg.cte.d_llm != cfg.decoder.d_llm || cfg.cte.d_visual != cfg.decoder.d_llm {
            return Err(Error::Config("cue extractor widths must match the decoder width".into()));
        }
        let encoder = ImageEncoder::new(store, init, ENCODER_PREFIX, cfg.g, cfg.d_embed, cfg.decoder.d_llm);
        let decoder = DecoderParams::new(store, init, DECODER_PREFIX, cfg.decoder)?;
        Ok(Self {
            cfg,
            encoder,
            decoder,
            cues: CueModule::None,
        })
    }

    /// Registers `k` cue tokens of the given kind; `k = 0` keeps the
    /// sequence cue-free.
    pub fn add_cues<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        init: &mut Init,
        variant: CueVariant,
        k: usize,
    ) -> Result<()> {
        if !matches!(self.cues, CueModule::None) {
            return Err(Error::Config("cue module already present".into()));
        }
        if k == 0 {
            return Ok(());
        }
        self.cues = match variant {
            CueVariant::Cte => {
                let cfg = CteConfig { k, ..self.cfg.cte };
                CueModule::Cte(CteParams::new(store, init, CTE_PREFIX, cfg)?)
            }
            CueVariant::LearnableTokens => {
                let t = init.normal(&[k, self.cfg.decoder.d_llm], LEARNABLE_STD);
                CueModule::Learnable {
                    tokens: store.add(LEARNABLE_NAME, t),
                    k,
                }
            }
        };
        Ok(())
    }

    pub fn n_cues(&self) -> usize {
        match &self.cues {
            CueModule::None => 0,
            CueModule::Cte(p) => p.cfg.k,
            CueModule::Learnable { k, .. } => *k,
        }
    }

    /// Whether a parameter belongs to the cue source.
    pub fn is_cue_param(name: &str) -> bool {
        name.starts_with("cte.") || name == LEARNABLE_NAME
    }

    pub fn is_lora_param(name: &str) -> bool {
        name.contains(".lora_")
    }
}

pub fn padded_question(q: &[usize]) -> Vec<usize> {
    let mut v = q.to_vec();
    v.resize(Q_LEN.max(q.len()), PAD_ID);
    v
}

/// Visual tokens and cue tokens of every sample in a batch.
pub fn visual_and_cues<T: Real>(
    g: &mut Graph<'_, T>,
    arch: &VqaArch,
    batch: &[&ToySample],
    route: VisualRoute,
) -> Result<(Vec<Var>, Vec<Option<Var>>)> {
    let grids: Vec<&[[u8; 2]]> = batch.iter().map(|s| s.grid.as_slice()).collect();
    let v_all = arch.encoder.encode(g, &grids)?;
    let n_v = arch.encoder.tokens_per_image();
    let mut visual = Vec::with_capacity(batch.len());
    let mut cues = Vec::with_capacity(batch.len());
    for (b, s) in batch.iter().enumerate() {
        let v = if batch.len() == 1 { v_all } else { g.slice_rows(v_all, b * n_v, n_v)? };
        visual.push(v);
        cues.push(match &arch.cues {
            CueModule::None => None,
            CueModule::Learnable { tokens, .. } => Some(g.param(*tokens)),
            CueModule::Cte(p) => {
                if s.q.is_empty() {
                    return Err(Error::EmptyQuestion);
                }
                let tok = g.param(arch.decoder.tok_emb);
                let q = g.gather(tok, &s.q)?;
                let qt = Tokens::full(g, q);
                let vt = Tokens::full(g, v);
                Some(extract_cues_routed(g, qt, vt, p, route)?.cues)
            }
        });
    }
    Ok((visual, cues))
}

/// Teacher-forced logits for a batch.
pub fn batch_logits<T: Real>(
    g: &mut Graph<'_, T>,
    arch: &VqaArch,
    batch: &[&ToySample],
    kind: MaskKind,
) -> Result<(AssembledInput, Var)> {
    let (visual, cues) = visual_and_cues(g, arch, batch, VisualRoute::Attend)?;
    let questions: Vec<Vec<usize>> = batch.iter().map(|s| padded_question(&s.q)).collect();
    let targets: Vec<Vec<usize>> = batch.iter().map(|s| s.targets()).collect();
    let inputs: Vec<Vec<usize>> = targets.iter().map(|t| teacher_forced(t)).collect();
    let parts: Vec<SampleParts<'_>> = (0..batch.len())
        .map(|b| SampleParts {
            visual: visual[b],
            question: &questions[b],
            q_valid: batch[b].q.len(),
            cues: cues[b],
            answer_in: &inputs[b],
            answer_targets: &targets[b],
        })
        .collect();
    let inp = assemble(g, &arch.decoder, &parts)?;
    let logits = forward(g, &inp, kind, &arch.decoder)?;
    Ok((inp, logits))
}

/// Mean answer cross-entropy of a batch.
pub fn batch_loss<T: Real>(
    g: &mut Graph<'_, T>,
    arch: &VqaArch,
    batch: &[&ToySample],
    kind: MaskKind,
) -> Result<Var> {
    let (inp, logits) = batch_logits(g, arch, batch, kind)?;
    crate::decoder::answer_loss(g, logits, &inp)
}

/// Greedy answers for `samples`, processed `batch_size` at a time.
pub fn predict<T: Real>(
    arch: &VqaArch,
    store: &ParamStore<T>,
    samples: &[ToySample],
    kind: MaskKind,
    batch_size: usize,
) -> Result<Vec<Generation>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ToySample> = chunk.iter().collect();
        let mut g = Graph::with_params(store);
        let (visual, cues) = visual_and_cues(&mut g, arch, &refs, VisualRoute::Attend)?;
        let inputs: Vec<GenInput<T>> = chunk
            .iter()
            .enumerate()
            .map(|(b, s)| GenInput {
                visual: g.value(visual[b]).clone(),
                question: padded_question(&s.q),
                q_valid: s.q.len(),
                cues: cues[b].map(|c| g.value(c).clone()),
            })
            .collect();
        drop(g);
        out.extend(generate(store, &arch.decoder, &inputs, kind, MAX_ANSWER_LEN)?);
    }
    Ok(out)
}
