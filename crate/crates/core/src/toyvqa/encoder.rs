use crate::diffcore::{Graph, Init, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, WeightInit};

use super::vocab::{N_COLORS, N_SHAPES};

/// Std of the shape, colour, row and column embedding tables.
pub const CELL_EMBED_STD: f64 = 1.0;

/// Per-cell embedding `shape + color + row + column`, projected to decoder
/// width.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub g: usize,
    pub shape_emb: ParamId,
    pub color_emb: ParamId,
    pub row_emb: ParamId,
    pub col_emb: ParamId,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        g: usize,
        d_embed: usize,
        d_llm: usize,
    ) -> Self {
        Self {
            g,
            shape_emb: store.add(format!("{name}.shape_emb"), init.normal(&[N_SHAPES, d_embed], CELL_EMBED_STD)),
            color_emb: store.add(format!("{name}.color_emb"), init.normal(&[N_COLORS, d_embed], CELL_EMBED_STD)),
            row_emb: store.add(format!("{name}.row_emb"), init.normal(&[g, d_embed], CELL_EMBED_STD)),
            col_emb: store.add(format!("{name}.col_emb"), init.normal(&[g, d_embed], CELL_EMBED_STD)),
            proj: Linear::new(store, init, &format!("{name}.proj"), d_embed, d_llm, true, WeightInit::Gaussian),
        }
    }

    pub fn tokens_per_image(&self) -> usize {
        self.g * self.g
    }

    /// Unprojected cell embeddings of several grids, stacked `[B·g², d_embed]`.
    pub fn embed_cells<T: Real>(&self, g: &mut Graph<'_, T>, grids: &[&[[u8; 2]]]) -> Result<Var> {
        let cells = self.tokens_per_image();
        let (mut shapes, mut colors, mut rows, mut cols) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for grid in grids {
            if grid.len() != cells {
                return Err(Error::Layout(format!("grid of {} cells, expected {cells}", grid.len())));
            }
            for (i, c) in grid.iter().enumerate() {
                if c[0] as usize >= N_SHAPES || c[1] as usize >= N_COLORS {
                    return Err(Error::Layout(format!("cell {i} holds invalid object {c:?}")));
                }
                shapes.push(c[0] as usize);
                colors.push(c[1] as usize);
                rows.push(i / self.g);
                cols.push(i % self.g);
            }
        }
        let mut sum = None;
        for (table, ids) in [(self.shape_emb, &shapes), (self.color_emb, &colors), (self.row_emb, &rows), (self.col_emb, &cols)] {
            let t = g.param(table);
            let e = g.gather(t, ids)?;
            sum = Some(match sum {
                None => e,
                Some(acc) => g.add(acc, e)?,
            });
        }
        Ok(sum.expect("four tables"))
    }

    /// Visual tokens `[B·g², d_llm]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, grids: &[&[[u8; 2]]]) -> Result<Var> {
        let e = self.embed_cells(g, grids)?;
        self.proj.forward(g, e)
    }
}
