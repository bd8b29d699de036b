//! Encoder plus decoder: `[B, 1, D, H, W]` intensities to `[B, K, D, H, W]`
//! class logits.

use rand::Rng;

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{EncoderOptions, ViTConfig, VitEncoder};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SegModel {
    pub encoder: VitEncoder,
    pub decoder: Decoder,
}

impl SegModel {
    pub fn new<T: Real, R: Rng + ?Sized>(vit: ViTConfig, classes: usize, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let dec_cfg = DecoderConfig::new(vit.embed_dim, classes, vit.patch)?;
        let encoder = VitEncoder::new(vit, store, rng)?;
        let decoder = Decoder::new(dec_cfg, store, rng)?;
        Ok(Self { encoder, decoder })
    }

    pub fn classes(&self) -> usize {
        self.decoder.cfg.classes
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.forward_with(g, store, x, EncoderOptions::default())
    }

    pub fn forward_with<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var, opts: EncoderOptions) -> Result<Var> {
        let batch = g.shape(x)[0];
        let taps = self.encoder.forward(g, store, x, opts)?;
        self.decoder.forward(g, store, &taps, batch)
    }

    /// Logits without recording a graph.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let y = self.forward(&g, store, xv)?;
        Ok(g.value(y).as_ref().clone())
    }
}
