//! Token encoder: multimodal input embedding plus a small pre-norm
//! transformer, or hidden states imported from a file.

mod precomputed;
mod visual;

pub use precomputed::{load_precomputed, PrecomputedStates};
pub use visual::{visual_features, BoxStatistics, VisualProvider, ZeroVisual};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{xavier_uniform, Array, Graph, ParamId, ParamStore, Real, Var};
use crate::corpus::TokenizedDocument;
use crate::error::{Error, Result};
use crate::layers::{Dense, LayerNorm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub coord_buckets: usize,
    pub visual_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_len: 512,
            coord_buckets: 1001,
            visual_dim: 8,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn check(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Precondition(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_len == 0 || self.coord_buckets == 0 || self.ffn_mult == 0 {
            return Err(Error::Precondition("max_len, coord_buckets and ffn_mult must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Precondition(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of the projected visual feature before fusion.
    pub fn visual_proj_dim(&self) -> usize {
        (self.d_model / 4).max(1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln_attn: LayerNorm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln_ffn: LayerNorm,
    ffn_in: Dense,
    ffn_out: Dense,
}

/// Parameter handles of the toy transformer.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub tokens: ParamId,
    pub positions: ParamId,
    /// x, y, w and h bucket tables.
    pub coords: [ParamId; 4],
    pub visual: Dense,
    pub fuse: Dense,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.check()?;
        let d = config.d_model;
        let table = |store: &mut ParamStore<T>, name: &str, rows: usize, rng: &mut R| {
            store.add(format!("encoder.{name}"), xavier_uniform(&[rows, d], rows, d, rng))
        };
        let tokens = table(store, "tokens", vocab_size, rng)?;
        let positions = table(store, "positions", config.max_len, rng)?;
        let coords = [
            table(store, "coord_x", config.coord_buckets, rng)?,
            table(store, "coord_y", config.coord_buckets, rng)?,
            table(store, "coord_w", config.coord_buckets, rng)?,
            table(store, "coord_h", config.coord_buckets, rng)?,
        ];
        let vd = config.visual_proj_dim();
        let visual = Dense::new(store, "encoder.visual", config.visual_dim, vd, rng)?;
        let fuse = Dense::new(store, "encoder.fuse", d + vd, d, rng)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("encoder.layer{l}");
            blocks.push(Block {
                ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d)?,
                q: Dense::new(store, &format!("{p}.q"), d, d, rng)?,
                // a key bias shifts every score of a query equally, so it
                // would only carry a zero gradient
                k: Dense::without_bias(store, &format!("{p}.k"), d, d, rng)?,
                v: Dense::new(store, &format!("{p}.v"), d, d, rng)?,
                o: Dense::new(store, &format!("{p}.o"), d, d, rng)?,
                ln_ffn: LayerNorm::new(store, &format!("{p}.ln_ffn"), d)?,
                ffn_in: Dense::new(store, &format!("{p}.ffn_in"), d, d * config.ffn_mult, rng)?,
                ffn_out: Dense::new(store, &format!("{p}.ffn_out"), d * config.ffn_mult, d, rng)?,
            });
        }
        let ln_out = LayerNorm::new(store, "encoder.ln_out", d)?;
        Ok(Encoder {
            config: config.clone(),
            tokens,
            positions,
            coords,
            visual,
            fuse,
            blocks,
            ln_out,
        })
    }

    /// Input embedding of every token: text and projected visual features
    /// are concatenated and fused to `d_model`, then the 1-D position
    /// embedding and the four box-bucket embeddings are added.
    pub fn embed_inputs<T: Real>(&self, g: &mut Graph<'_, T>, tdoc: &TokenizedDocument, visual: &Array<T>) -> Result<Var> {
        let n = tdoc.len();
        if visual.shape() != [n, self.config.visual_dim] {
            return Err(Error::Precondition(format!(
                "visual features shaped {:?}, expected [{n}, {}]",
                visual.shape(),
                self.config.visual_dim
            )));
        }
        if n > self.config.max_len {
            return Err(Error::Precondition(format!(
                "{n} tokens exceed the encoder capacity of {}",
                self.config.max_len
            )));
        }
        let limit = self.config.coord_buckets;
        let mut buckets: [Vec<usize>; 4] = Default::default();
        for b in &tdoc.boxes {
            for (k, v) in [b.x, b.y, b.w, b.h].into_iter().enumerate() {
                if v as usize >= limit {
                    return Err(Error::Precondition(format!("box bucket {v} outside 0..{limit}")));
                }
                buckets[k].push(v as usize);
            }
        }
        let text = g.embedding(self.tokens, &tdoc.token_ids)?;
        let vis_in = g.constant(visual.clone());
        let vis = self.visual.forward(g, vis_in)?;
        let joined = g.concat_cols(&[text, vis])?;
        let mut x = self.fuse.forward(g, joined)?;
        let pos = g.embedding(self.positions, &tdoc.positions)?;
        x = g.add(x, pos)?;
        for (table, ids) in self.coords.iter().zip(&buckets) {
            let e = g.embedding(*table, ids)?;
            x = g.add(x, e)?;
        }
        Ok(x)
    }

    /// Hidden states `[tokens, d_model]` of the transformer stack.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, tdoc: &TokenizedDocument, visual: &Array<T>) -> Result<Var> {
        let mut x = self.embed_inputs(g, tdoc, visual)?;
        let rate = self.config.dropout;
        for block in &self.blocks {
            let h = block.ln_attn.forward(g, x)?;
            let a = self.attention(g, block, h)?;
            let a = g.dropout(a, rate);
            x = g.add(x, a)?;
            let h = block.ln_ffn.forward(g, x)?;
            let f = block.ffn_in.forward(g, h)?;
            let f = g.relu(f);
            let f = block.ffn_out.forward(g, f)?;
            let f = g.dropout(f, rate);
            x = g.add(x, f)?;
        }
        Ok(self.ln_out.forward(g, x)?)
    }

    fn attention<T: Real>(&self, g: &mut Graph<'_, T>, block: &Block, h: Var) -> Result<Var> {
        let heads = self.config.heads;
        let dk = self.config.d_model / heads;
        let q = block.q.forward(g, h)?;
        let k = block.k.forward(g, h)?;
        let v = block.v.forward(g, h)?;
        let scale = T::of(1.0 / (dk as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = g.slice_cols(q, head * dk, dk)?;
            let kh = g.slice_cols(k, head * dk, dk)?;
            let vh = g.slice_cols(v, head * dk, dk)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let p = g.softmax(s);
            outs.push(g.matmul(p, vh)?);
        }
        let cat = g.concat_cols(&outs)?;
        Ok(block.o.forward(g, cat)?)
    }
}

#[cfg(test)]
mod tests;
