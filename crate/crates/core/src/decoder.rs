//! Toy causal transformer decoder over `[V; Q; C; A]` embedding sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    mha_segments, Ffn, LayerNorm, LoraAdapter, MhaParams, Segment, WeightInit, HEAD_COUNT, LORA_ALPHA,
};
use crate::masking::{stage_mask, AdditiveMask, MaskKind, SegmentLayout};

pub const PAD_ID: usize = 0;
pub const BOA_ID: usize = 1;
pub const EOS_ID: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub d_llm: usize,
    pub n_layer: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_expand: usize,
    /// Whether cue rows receive position embeddings like every other row.
    pub cue_positions: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_llm: 128,
            n_layer: 2,
            heads: HEAD_COUNT,
            max_len: 64,
            ffn_expand: 4,
            cue_positions: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MhaParams,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

/// Pre-norm decoder with tied input/output embeddings. Block output
/// projections start at zero.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
}

impl DecoderParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: DecoderConfig,
    ) -> Result<Self> {
        let tok_emb = store.add(format!("{name}.tok_emb"), init.weight(&[cfg.vocab, cfg.d_llm]));
        let pos_emb = store.add(format!("{name}.pos_emb"), init.weight(&[cfg.max_len, cfg.d_llm]));
        let mut blocks = Vec::with_capacity(cfg.n_layer);
        for i in 0..cfg.n_layer {
            let n = format!("{name}.block{i}");
            blocks.push(DecoderBlock {
                ln_attn: LayerNorm::new(store, &format!("{n}.ln_attn"), cfg.d_llm),
                attn: MhaParams::new(
                    store,
                    init,
                    &format!("{n}.attn"),
                    cfg.d_llm,
                    cfg.d_llm,
                    cfg.heads,
                    WeightInit::Zero,
                )?,
                ln_ffn: LayerNorm::new(store, &format!("{n}.ln_ffn"), cfg.d_llm),
                ffn: Ffn::new(store, init, &format!("{n}.ffn"), cfg.d_llm, cfg.ffn_expand, WeightInit::Zero),
            });
        }
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), cfg.d_llm);
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    /// Wraps the query and value projections of every block with a LoRA
    /// adapter of the given rank. The adapters start with `B = 0`.
    pub fn attach_lora<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        rank: usize,
    ) -> Result<()> {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, lin) in [("wq", &mut b.attn.wq), ("wv", &mut b.attn.wv)] {
                if lin.lora.is_some() {
                    return Err(Error::Config(format!("LoRA already attached to block {i} {tag}")));
                }
                let base = format!("{name}.block{i}.attn.{tag}");
                lin.lora = Some(LoraAdapter::attach(store, init, &base, &lin.base, rank, LORA_ALPHA)?);
            }
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.attn.wq.lora.is_some())
    }
}

/// One sample's decoder inputs.
#[derive(Clone, Copy, Debug)]
pub struct SampleParts<'a> {
    /// Visual tokens already in decoder width, `[n_v, d_llm]`.
    pub visual: Var,
    /// Question ids; entries past `q_valid` are padding.
    pub question: &'a [usize],
    pub q_valid: usize,
    /// Cue tokens `[K, d_llm]`, absent when `K = 0`.
    pub cues: Option<Var>,
    /// Answer-segment inputs (`BOA` followed by the shifted targets).
    pub answer_in: &'a [usize],
    /// Targets aligned with `answer_in`; empty at inference.
    pub answer_targets: &'a [usize],
}

/// `[BOA] + targets[..n-1]`: position `t` of the answer segment predicts
/// `targets[t]`.
pub fn teacher_forced(targets: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(targets.len());
    v.push(BOA_ID);
    v.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
    v
}

/// Row-stacked embeddings for a batch of samples.
#[derive(Clone, Debug)]
pub struct AssembledInput {
    /// `[sum of lengths, d_llm]`, position embeddings included.
    pub embeddings: Var,
    pub layouts: Vec<SegmentLayout>,
    /// First stacked row of each sample.
    pub offsets: Vec<usize>,
    /// `(stacked row, target id)` for every answer position in Ω.
    pub targets: Vec<(usize, usize)>,
}

impl AssembledInput {
    pub fn total_rows(&self) -> usize {
        self.offsets.last().map_or(0, |&o| o + self.layouts.last().unwrap().len())
    }

    /// Stacked rows of Ω: the non-pad answer positions.
    pub fn omega(&self) -> Vec<usize> {
        self.layouts
            .iter()
            .zip(&self.offsets)
            .flat_map(|(l, &o)| l.answer_positions().into_iter().map(move |r| o + r))
            .collect()
    }

    /// Stacked row ranges of the cue block of every sample.
    pub fn cue_rows(&self) -> Vec<(usize, usize)> {
        self.layouts
            .iter()
            .zip(&self.offsets)
            .filter(|(l, _)| l.n_c > 0)
            .map(|(l, &o)| (o + l.c_start(), l.n_c))
            .collect()
    }
}

/// Concatenates `[V; Q; C; A]` per sample, adds position embeddings and
/// records layouts and answer targets.
pub fn assemble<T: Real>(
    g: &mut Graph<'_, T>,
    p: &DecoderParams,
    batch: &[SampleParts<'_>],
) -> Result<AssembledInput> {
    let tok = g.param(p.tok_emb);
    let ids: Vec<usize> = batch
        .iter()
        .flat_map(|s| s.question.iter().chain(s.answer_in).copied())
        .collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= p.cfg.vocab) {
        return Err(Error::Layout(format!("token id {bad} outside vocabulary of {}", p.cfg.vocab)));
    }
    let text = if ids.is_empty() { None } else { Some(g.gather(tok, &ids)?) };

    let mut pieces = Vec::with_capacity(batch.len() * 4);
    let mut layouts = Vec::with_capacity(batch.len());
    let mut offsets = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut positions = Vec::new();
    let mut cue_rows = Vec::new();
    let (mut text_row, mut offset) = (0, 0);
    for s in batch {
        let n_v = g.value(s.visual).rows();
        let n_c = s.cues.map_or(0, |c| g.value(c).rows());
        let (n_q, n_a) = (s.question.len(), s.answer_in.len());
        if s.q_valid > n_q {
            return Err(Error::Layout(format!("q_valid {} exceeds question length {n_q}", s.q_valid)));
        }
        if !s.answer_targets.is_empty() && s.answer_targets.len() != n_a {
            return Err(Error::Layout(format!(
                "{} answer targets for {n_a} answer inputs",
                s.answer_targets.len()
            )));
        }
        let layout = SegmentLayout::new(n_v, n_q, n_c, n_a).with_padding(n_q - s.q_valid, 0)?;
        if layout.len() > p.cfg.max_len {
            return Err(Error::TooLong {
                len: layout.len(),
                max_len: p.cfg.max_len,
            });
        }
        pieces.push(s.visual);
        if n_q > 0 {
            pieces.push(g.slice_rows(text.unwrap(), text_row, n_q)?);
        }
        if let Some(c) = s.cues {
            pieces.push(c);
        }
        if n_a > 0 {
            pieces.push(g.slice_rows(text.unwrap(), text_row + n_q, n_a)?);
        }
        text_row += n_q + n_a;
        for (t, &y) in s.answer_targets.iter().enumerate() {
            targets.push((offset + layout.a_start() + t, y));
        }
        positions.extend(0..layout.len());
        cue_rows.extend((layout.c_start()..layout.c_start() + n_c).map(|r| offset + r));
        offsets.push(offset);
        offset += layout.len();
        layouts.push(layout);
    }
    let x = g.concat_rows(&pieces)?;
    let pos = g.param(p.pos_emb);
    let mut pos = g.gather(pos, &positions)?;
    if !p.cfg.cue_positions && !cue_rows.is_empty() {
        let d = p.cfg.d_llm;
        let mut keep = Tensor::full(&[positions.len(), d], T::one());
        for &r in &cue_rows {
            keep.data_mut()[r * d..(r + 1) * d].fill(T::zero());
        }
        let keep = g.constant(keep);
        pos = g.mul(pos, keep)?;
    }
    let embeddings = g.add(x, pos)?;
    Ok(AssembledInput {
        embeddings,
        layouts,
        offsets,
        targets,
    })
}

/// Per-sample masks of a regime, built once per distinct layout.
pub fn masks_for(layouts: &[SegmentLayout], kind: MaskKind) -> Result<Vec<AdditiveMask>> {
    let mut cache: HashMap<SegmentLayout, AdditiveMask> = HashMap::new();
    layouts
        .iter()
        .map(|l| {
            if let Some(m) = cache.get(l) {
                return Ok(m.clone());
            }
            let m = stage_mask(l, kind)?;
            cache.insert(*l, m.clone());
            Ok(m)
        })
        .collect()
}

/// Logits `[rows, vocab]` under the regime's composed mask.
pub fn forward<T: Real>(
    g: &mut Graph<'_, T>,
    inp: &AssembledInput,
    kind: MaskKind,
    p: &DecoderParams,
) -> Result<Var> {
    let masks = masks_for(&inp.layouts, kind)?;
    forward_masked(g, inp, &masks, p)
}

pub fn forward_masked<T: Real>(
    g: &mut Graph<'_, T>,
    inp: &AssembledInput,
    masks: &[AdditiveMask],
    p: &DecoderParams,
) -> Result<Var> {
    Ok(forward_traced(g, inp, masks, p, None)?.logits)
}

/// Residual-stream states entering each block plus the final logits.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub states: Vec<Var>,
    pub logits: Var,
}

/// Rows to overwrite at every block input, with the values to write
/// (one stacked tensor per block, as recorded in a [`DecoderTrace`]).
#[derive(Clone, Copy, Debug)]
pub struct RowPins<'a, T> {
    pub rows: &'a [(usize, usize)],
    pub states: &'a [Tensor<T>],
}

/// Forward pass that records block inputs and optionally pins rows of them
/// to fixed values.
pub fn forward_traced<T: Real>(
    g: &mut Graph<'_, T>,
    inp: &AssembledInput,
    masks: &[AdditiveMask],
    p: &DecoderParams,
    pins: Option<RowPins<'_, T>>,
) -> Result<DecoderTrace> {
    if masks.len() != inp.layouts.len() {
        return Err(Error::Layout(format!(
            "{} masks for {} samples",
            masks.len(),
            inp.layouts.len()
        )));
    }
    let tensors: Vec<Tensor<T>> = masks
        .iter()
        .zip(&inp.layouts)
        .map(|(m, l)| {
            if m.len() != l.len() {
                return Err(Error::Layout(format!(
                    "mask of size {} for a sequence of length {}",
                    m.len(),
                    l.len()
                )));
            }
            Ok(m.to_tensor())
        })
        .collect::<Result<_>>()?;
    let segments: Vec<Segment<'_, T>> = inp
        .layouts
        .iter()
        .zip(&inp.offsets)
        .zip(&tensors)
        .map(|((l, &o), m)| Segment {
            q_start: o,
            q_len: l.len(),
            kv_start: o,
            kv_len: l.len(),
            mask: Some(m),
        })
        .collect();

    let mut x = inp.embeddings;
    let mut states = Vec::with_capacity(p.blocks.len());
    for (i, b) in p.blocks.iter().enumerate() {
        if let Some(pins) = pins {
            x = overwrite_rows(g, x, pins.rows, &pins.states[i])?;
        }
        states.push(x);
        let h = b.ln_attn.forward(g, x)?;
        let a = mha_segments(g, h, h, &segments, &b.attn)?;
        x = g.add(x, a)?;
        let h = b.ln_ffn.forward(g, x)?;
        let f = b.ffn.forward(g, h)?;
        x = g.add(x, f)?;
    }
    let h = p.ln_f.forward(g, x)?;
    let tok = g.param(p.tok_emb);
    let logits = g.matmul_t(h, tok)?;
    Ok(DecoderTrace { states, logits })
}

fn overwrite_rows<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    rows: &[(usize, usize)],
    src: &Tensor<T>,
) -> Result<Var> {
    let total = g.value(x).rows();
    let cols = g.value(x).cols();
    let mut sorted = rows.to_vec();
    sorted.sort_unstable();
    let mut pieces = Vec::new();
    let mut at = 0;
    for (start, len) in sorted {
        if start > at {
            pieces.push(g.slice_rows(x, at, start - at)?);
        }
        let data = src.data()[start * cols..(start + len) * cols].to_vec();
        pieces.push(g.constant(Tensor::new(&[len, cols], data)?));
        at = start + len;
    }
    if at < total {
        pieces.push(g.slice_rows(x, at, total - at)?);
    }
    g.concat_rows(&pieces)
}

/// Mean next-token cross-entropy over the answer positions Ω.
pub fn answer_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, inp: &AssembledInput) -> Result<Var> {
    if inp.targets.is_empty() {
        return Err(Error::EmptyAnswer);
    }
    g.cross_entropy(logits, &inp.targets)
}

/// Answer loss from a dense per-row label vector; only rows in Ω are read.
pub fn answer_loss_dense<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    inp: &AssembledInput,
    labels: &[usize],
) -> Result<Var> {
    if labels.len() != inp.total_rows() {
        return Err(Error::Layout(format!(
            "{} labels for {} rows",
            labels.len(),
            inp.total_rows()
        )));
    }
    let targets: Vec<(usize, usize)> = inp.omega().into_iter().map(|r| (r, labels[r])).collect();
    if targets.is_empty() {
        return Err(Error::EmptyAnswer);
    }
    g.cross_entropy(logits, &targets)
}

/// Inference inputs of one sample, with visual and cue tokens precomputed.
#[derive(Clone, Debug)]
pub struct GenInput<T> {
    pub visual: Tensor<T>,
    pub question: Vec<usize>,
    pub q_valid: usize,
    pub cues: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Generated ids, ending with `EOS` unless truncated.
    pub tokens: Vec<usize>,
    pub truncated: bool,
}

/// Batched greedy decoding from `BOA`.
pub fn generate<T: Real>(
    store: &ParamStore<T>,
    p: &DecoderParams,
    batch: &[GenInput<T>],
    kind: MaskKind,
    max_answer_len: usize,
) -> Result<Vec<Generation>> {
    let mut answers: Vec<Vec<usize>> = vec![Vec::new(); batch.len()];
    let mut done = vec![false; batch.len()];
    for _ in 0..max_answer_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let mut g = Graph::with_params(store);
        let inputs: Vec<Vec<usize>> = answers
            .iter()
            .map(|a| std::iter::once(BOA_ID).chain(a.iter().copied()).collect())
            .collect();
        let mut parts = Vec::with_capacity(batch.len());
        for (s, a_in) in batch.iter().zip(&inputs) {
            let visual = g.constant(s.visual.clone());
            let cues = s.cues.as_ref().map(|c| g.constant(c.clone()));
            parts.push(SampleParts {
                visual,
                question: &s.question,
                q_valid: s.q_valid,
                cues,
                answer_in: a_in,
                answer_targets: &[],
            });
        }
        let inp = assemble(&mut g, p, &parts)?;
        let logits = forward(&mut g, &inp, kind, p)?;
        let lv = g.value(logits);
        for (b, (l, &o)) in inp.layouts.iter().zip(&inp.offsets).enumerate() {
            if done[b] {
                continue;
            }
            let row = lv.row(o + l.len() - 1);
            let next = argmax(row);
            answers[b].push(next);
            done[b] = next == EOS_ID;
        }
    }
    Ok(answers
        .into_iter()
        .zip(done)
        .map(|(tokens, d)| Generation { tokens, truncated: !d })
        .collect())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
