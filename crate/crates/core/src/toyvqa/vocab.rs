//! Closed vocabulary and question templates.

use serde::{Deserialize, Serialize};

pub use crate::decoder::{BOA_ID, EOS_ID, PAD_ID};

pub const VOCAB_SIZE: usize = 64;
pub const N_SHAPES: usize = 8;
pub const N_COLORS: usize = 8;
/// Largest supported grid side.
pub const MAX_GRID: usize = 6;
/// Questions are padded to this many tokens.
pub const Q_LEN: usize = 8;

pub const WHAT: usize = 3;
pub const COLOR: usize = 4;
pub const IS: usize = 5;
pub const THE: usize = 6;
pub const SHAPE: usize = 7;
pub const AT: usize = 8;
pub const COUNT: usize = 9;
pub const OF: usize = 10;
pub const OR: usize = 11;
pub const THERE: usize = 12;
pub const A: usize = 13;
pub const QMARK: usize = 14;
pub const SHAPE0: usize = 15;
pub const COLOR0: usize = SHAPE0 + N_SHAPES;
pub const ROW0: usize = COLOR0 + N_COLORS;
pub const COL0: usize = ROW0 + MAX_GRID;
pub const EVEN: usize = COL0 + MAX_GRID;
pub const ODD: usize = EVEN + 1;
pub const YES: usize = EVEN + 2;
pub const NO: usize = EVEN + 3;
const FIRST_UNUSED: usize = NO + 1;

pub const SHAPE_NAMES: [&str; N_SHAPES] =
    ["circle", "square", "triangle", "star", "heart", "cross", "diamond", "ring"];
pub const COLOR_NAMES: [&str; N_COLORS] =
    ["red", "blue", "green", "yellow", "purple", "orange", "white", "black"];

/// Word for every token id.
pub fn words() -> Vec<String> {
    let mut w: Vec<String> = ["<pad>", "<boa>", "<eos>", "what", "color", "is", "the", "shape", "at", "count", "of", "or", "there", "a", "?"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    w.extend(SHAPE_NAMES.iter().map(|s| s.to_string()));
    w.extend(COLOR_NAMES.iter().map(|s| s.to_string()));
    w.extend((0..MAX_GRID).map(|r| format!("row{r}")));
    w.extend((0..MAX_GRID).map(|c| format!("col{c}")));
    w.extend(["even", "odd", "yes", "no"].iter().map(|s| s.to_string()));
    w.extend((FIRST_UNUSED..VOCAB_SIZE).map(|i| format!("<unused{i}>")));
    w
}

pub fn decode(ids: &[usize]) -> String {
    let w = words();
    ids.iter()
        .map(|&i| w.get(i).map_or("<oov>", |s| s.as_str()))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    ColorOfShape,
    ShapeAtCell,
    CountParity,
    Presence,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::ColorOfShape,
        Template::ShapeAtCell,
        Template::CountParity,
        Template::Presence,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::ColorOfShape => "color-of-shape",
            Template::ShapeAtCell => "shape-at-cell",
            Template::CountParity => "count-parity",
            Template::Presence => "presence",
        }
    }

    /// Candidate answer ids.
    pub fn answers(self) -> Vec<usize> {
        match self {
            Template::ColorOfShape => (COLOR0..COLOR0 + N_COLORS).collect(),
            Template::ShapeAtCell => (SHAPE0..SHAPE0 + N_SHAPES).collect(),
            Template::CountParity => vec![EVEN, ODD],
            Template::Presence => vec![YES, NO],
        }
    }

    /// The answer the biased split favours.
    pub fn majority(self) -> usize {
        self.answers()[0]
    }

    /// Number of distinct question arguments on a `g x g` grid.
    pub fn n_args(self, g: usize) -> usize {
        match self {
            Template::ColorOfShape => N_SHAPES,
            Template::ShapeAtCell => g * g,
            Template::CountParity => N_COLORS,
            Template::Presence => N_COLORS * N_SHAPES,
        }
    }

    /// Question tokens for argument index `arg`.
    pub fn question(self, arg: usize, g: usize) -> Vec<usize> {
        match self {
            Template::ColorOfShape => vec![WHAT, COLOR, IS, THE, SHAPE0 + arg, QMARK],
            Template::ShapeAtCell => vec![WHAT, SHAPE, IS, AT, ROW0 + arg / g, COL0 + arg % g, QMARK],
            Template::CountParity => vec![COUNT, OF, COLOR0 + arg, EVEN, OR, ODD, QMARK],
            Template::Presence => vec![IS, THERE, A, COLOR0 + arg / N_SHAPES, SHAPE0 + arg % N_SHAPES, QMARK],
        }
    }
}
