//! Additive attention masks over a `[V; Q; C; A]` decoder sequence.
//!
//! A mask entry `(i, j)` says whether query position `i` may attend to key
//! position `j`. Open entries contribute `0` to the attention logits and
//! blocked entries contribute [`NEG_LARGE`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor, NEG_LARGE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Visual,
    Question,
    Cue,
    Answer,
    Pad,
}

impl Role {
    pub fn letter(self) -> char {
        match self {
            Role::Visual => 'V',
            Role::Question => 'Q',
            Role::Cue => 'C',
            Role::Answer => 'A',
            Role::Pad => 'P',
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Block structure of a decoder input: `n_v` visual, `n_q` question (the
/// last `q_pad` of which are padding), `n_c` cue and `n_a` answer positions
/// (the last `a_pad` of which are padding), in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub n_v: usize,
    pub n_q: usize,
    pub q_pad: usize,
    pub n_c: usize,
    pub n_a: usize,
    pub a_pad: usize,
}

impl SegmentLayout {
    pub fn new(n_v: usize, n_q: usize, n_c: usize, n_a: usize) -> Self {
        Self {
            n_v,
            n_q,
            q_pad: 0,
            n_c,
            n_a,
            a_pad: 0,
        }
    }

    pub fn with_padding(mut self, q_pad: usize, a_pad: usize) -> Result<Self> {
        if q_pad > self.n_q || a_pad > self.n_a {
            return Err(Error::Layout(format!(
                "padding ({q_pad}, {a_pad}) exceeds block sizes ({}, {})",
                self.n_q, self.n_a
            )));
        }
        self.q_pad = q_pad;
        self.a_pad = a_pad;
        Ok(self)
    }

    /// Parses contiguous role blocks; PAD may only trail the Q or A block.
    pub fn from_roles(roles: &[Role]) -> Result<Self> {
        let mut counts = [0usize; 6];
        // Expected order of runs: V, Q, Qpad, C, A, Apad.
        let mut stage = 0;
        for (pos, &r) in roles.iter().enumerate() {
            let want = match r {
                Role::Visual => 0,
                Role::Question => 1,
                Role::Cue => 3,
                Role::Answer => 4,
                Role::Pad if (1..=2).contains(&stage) => 2,
                Role::Pad if stage >= 4 => 5,
                Role::Pad => {
                    return Err(Error::Layout(format!("PAD at {pos} outside a Q or A tail")))
                }
            };
            if want < stage {
                return Err(Error::Layout(format!(
                    "role {r} at position {pos} breaks the V, Q, C, A order"
                )));
            }
            stage = want;
            counts[want] += 1;
        }
        Ok(Self {
            n_v: counts[0],
            n_q: counts[1] + counts[2],
            q_pad: counts[2],
            n_c: counts[3],
            n_a: counts[4] + counts[5],
            a_pad: counts[5],
        })
    }

    pub fn len(&self) -> usize {
        self.n_v + self.n_q + self.n_c + self.n_a
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn q_start(&self) -> usize {
        self.n_v
    }

    pub fn c_start(&self) -> usize {
        self.n_v + self.n_q
    }

    pub fn a_start(&self) -> usize {
        self.n_v + self.n_q + self.n_c
    }

    pub fn role(&self, pos: usize) -> Role {
        let q = self.n_v;
        let c = q + self.n_q;
        let a = c + self.n_c;
        let end = a + self.n_a;
        assert!(pos < end, "position {pos} outside layout of length {end}");
        if pos < q {
            Role::Visual
        } else if pos < c {
            if pos >= c - self.q_pad {
                Role::Pad
            } else {
                Role::Question
            }
        } else if pos < a {
            Role::Cue
        } else if pos >= end - self.a_pad {
            Role::Pad
        } else {
            Role::Answer
        }
    }

    pub fn roles(&self) -> Vec<Role> {
        (0..self.len()).map(|p| self.role(p)).collect()
    }

    /// Non-padding answer positions.
    pub fn answer_positions(&self) -> Vec<usize> {
        (self.a_start()..self.a_start() + self.n_a - self.a_pad).collect()
    }
}

/// Which queries the bottleneck cuts off from visual keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckMode {
    /// Only question and answer queries are blocked from visual keys.
    #[default]
    Prose,
    /// Every non-cue query is blocked from visual keys, except a position's
    /// own key.
    Strict,
}

impl std::str::FromStr for BottleneckMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prose" => Ok(Self::Prose),
            "strict" => Ok(Self::Strict),
            other => Err(Error::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

/// Attention regime of a training stage or evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Causal plus padding.
    Causal,
    /// Causal plus padding plus the cue bottleneck.
    Bottleneck(BottleneckMode),
}

/// `L x L` additive mask stored as a blocked/open grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdditiveMask {
    len: usize,
    blocked: Vec<bool>,
}

impl AdditiveMask {
    pub fn open(len: usize) -> Self {
        Self {
            len,
            blocked: vec![false; len * len],
        }
    }

    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut blocked = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                blocked.push(f(i, j));
            }
        }
        Self { len, blocked }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.len + j]
    }

    /// Additive value at `(i, j)`: 0 or [`NEG_LARGE`].
    pub fn value(&self, i: usize, j: usize) -> f64 {
        if self.is_blocked(i, j) {
            NEG_LARGE
        } else {
            0.0
        }
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    /// Dense additive tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let neg = T::lit(NEG_LARGE);
        let data = self
            .blocked
            .iter()
            .map(|&b| if b { neg } else { T::zero() })
            .collect();
        Tensor::new(&[self.len.max(1), self.len.max(1)], data).expect("square mask")
    }

    /// Additive tensor restricted to the leading `n x n` block.
    pub fn prefix_tensor<T: Real>(&self, n: usize) -> Tensor<T> {
        let neg = T::lit(NEG_LARGE);
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(if self.is_blocked(i, j) { neg } else { T::zero() });
            }
        }
        Tensor::new(&[n, n], data).expect("square mask")
    }

    /// Role-annotated character grid: `.` open, `#` blocked.
    pub fn render(&self, layout: &SegmentLayout) -> String {
        let roles = layout.roles();
        let labels = row_labels(&roles);
        let mut out = String::from("    ");
        out.extend(roles.iter().map(|r| r.letter()));
        out.push('\n');
        for (i, label) in labels.iter().enumerate() {
            out.push_str(&format!("{label:<4}"));
            for j in 0..self.len {
                out.push(if self.is_blocked(i, j) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

fn row_labels(roles: &[Role]) -> Vec<String> {
    let mut seen = std::collections::HashMap::new();
    roles
        .iter()
        .map(|r| {
            let n = seen.entry(*r).or_insert(0usize);
            let label = format!("{}{}", r.letter(), n);
            *n += 1;
            label
        })
        .collect()
}

/// Blocks every key after the query position.
pub fn causal_mask(layout: &SegmentLayout) -> AdditiveMask {
    AdditiveMask::from_fn(layout.len(), |i, j| j > i)
}

/// Blocks PAD keys for every query except the PAD position itself.
pub fn padding_mask(layout: &SegmentLayout) -> AdditiveMask {
    let roles = layout.roles();
    AdditiveMask::from_fn(layout.len(), |i, j| roles[j] == Role::Pad && i != j)
}

/// The cue bottleneck: visual keys are reachable only from cue queries.
pub fn bottleneck_mask(layout: &SegmentLayout, mode: BottleneckMode) -> AdditiveMask {
    let roles = layout.roles();
    AdditiveMask::from_fn(layout.len(), |i, j| bottleneck_blocks(roles[i], roles[j], i == j, mode))
}

fn bottleneck_blocks(query: Role, key: Role, same: bool, mode: BottleneckMode) -> bool {
    if key != Role::Visual {
        return false;
    }
    match mode {
        BottleneckMode::Prose => matches!(query, Role::Question | Role::Answer),
        BottleneckMode::Strict => query != Role::Cue && !same,
    }
}

/// Entrywise minimum of additive masks (blocked if any component blocks).
/// Fails if any row ends up with no open key.
pub fn compose(masks: &[&AdditiveMask], layout: &SegmentLayout) -> Result<AdditiveMask> {
    let len = layout.len();
    if let Some(m) = masks.iter().find(|m| m.len != len) {
        return Err(Error::Layout(format!(
            "mask of size {} composed over layout of length {len}",
            m.len
        )));
    }
    let mut out = AdditiveMask::open(len);
    for m in masks {
        for (o, &b) in out.blocked.iter_mut().zip(&m.blocked) {
            *o |= b;
        }
    }
    for i in 0..len {
        if (0..len).all(|j| out.is_blocked(i, j)) {
            return Err(Error::FullyMaskedComposed {
                row: i,
                query_role: layout.role(i).to_string(),
            });
        }
    }
    Ok(out)
}

/// The full mask for a regime: causal and padding, plus the bottleneck when
/// requested.
pub fn stage_mask(layout: &SegmentLayout, kind: MaskKind) -> Result<AdditiveMask> {
    let causal = causal_mask(layout);
    let pad = padding_mask(layout);
    match kind {
        MaskKind::Causal => compose(&[&causal, &pad], layout),
        MaskKind::Bottleneck(mode) => {
            let bn = bottleneck_mask(layout, mode);
            compose(&[&causal, &pad, &bn], layout)
        }
    }
}
