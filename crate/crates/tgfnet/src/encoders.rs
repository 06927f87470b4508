//! Learned-from-scratch feature encoders.
//!
//! Questions are embedded by token lookup plus learned positions; optical
//! and SAR grids by a per-cell linear projection plus a shared patch
//! positional embedding. These stand in for a pretrained backbone: the
//! rest of the network only assumes a `FeatureBundle` of question, optical
//! and SAR features in one embedding space.

use crate::params::{init_embedding, init_matrix, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Result, Tape, TensorError, TensorId};

/// Channels per optical cell. SAR's single intensity channel is
/// replicated to this count before projection.
pub const OPTICAL_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Optical,
    Sar,
}

/// Tape ids for the encoder parameter set.
#[derive(Clone, Copy)]
pub struct EncoderIds {
    pub tok_embed: TensorId,
    pub q_pos: TensorId,
    pub opt_proj: TensorId,
    pub sar_proj: TensorId,
    pub patch_pos: TensorId,
}

/// Question features `F_q`, optical patch features `F_o`, SAR patch
/// features `F_s`; shared batch and embedding dimensions.
#[derive(Clone, Copy)]
pub struct FeatureBundle {
    pub f_q: TensorId,
    pub f_o: TensorId,
    pub f_s: TensorId,
}

/// Insert encoder parameters: token table `[vocab, d]`, question
/// positions `[n, d]`, per-modality cell projections `[3, d]`, patch
/// positions `[m, d]`.
pub fn init_encoder_params(
    store: &mut ParamStore,
    rng: &mut Rng,
    vocab: usize,
    n: usize,
    m: usize,
    d: usize,
) {
    init_embedding(store, rng, "enc.tok_embed", vocab, d);
    init_embedding(store, rng, "enc.q_pos", n, d);
    init_matrix(store, rng, "enc.opt_proj", OPTICAL_CHANNELS, d);
    init_matrix(store, rng, "enc.sar_proj", OPTICAL_CHANNELS, d);
    init_embedding(store, rng, "enc.patch_pos", m, d);
}

pub fn bind_encoder(bound: &BoundParams) -> EncoderIds {
    EncoderIds {
        tok_embed: bound.id("enc.tok_embed"),
        q_pos: bound.id("enc.q_pos"),
        opt_proj: bound.id("enc.opt_proj"),
        sar_proj: bound.id("enc.sar_proj"),
        patch_pos: bound.id("enc.patch_pos"),
    }
}

/// Token lookup plus positional embedding: `[B, N] ids -> [B, N, D]`.
/// Padding positions carry the padding embedding and participate in
/// attention like real tokens.
pub fn embed_question(
    tape: &mut Tape,
    tokens: &[Vec<usize>],
    enc: &EncoderIds,
) -> Result<TensorId> {
    let tshape = tape.shape(enc.tok_embed).to_vec();
    let (vocab, d) = (tshape[0], tshape[1]);
    let n = tape.shape(enc.q_pos)[0];
    let b = tokens.len();
    if b == 0 {
        return Err(TensorError::Invalid("empty question batch".into()));
    }
    let mut flat = Vec::with_capacity(b * n);
    for row in tokens {
        if row.len() != n {
            return Err(TensorError::Invalid(format!(
                "question has {} tokens, expected {n}",
                row.len()
            )));
        }
        for &t in row {
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    index: t,
                    extent: vocab,
                });
            }
            flat.push(t);
        }
    }
    let table = tape.reshape(enc.tok_embed, vec![1, vocab, d])?;
    let looked = tape.gather_rows(table, &[flat])?;
    let looked = tape.reshape(looked, vec![b, n, d])?;
    tape.add(looked, enc.q_pos)
}

/// Per-cell linear projection plus patch positional embedding:
/// `[B, M*channels] raw cells -> [B, M, D]`. SAR grids carry one channel
/// per cell, replicated to the optical channel count before projection.
pub fn embed_patches(
    tape: &mut Tape,
    grid: &[f64],
    batch: usize,
    modality: Modality,
    enc: &EncoderIds,
) -> Result<TensorId> {
    let m = tape.shape(enc.patch_pos)[0];
    let proj = match modality {
        Modality::Optical => enc.opt_proj,
        Modality::Sar => enc.sar_proj,
    };
    let in_ch = match modality {
        Modality::Optical => OPTICAL_CHANNELS,
        Modality::Sar => 1,
    };
    if grid.len() != batch * m * in_ch {
        return Err(TensorError::Invalid(format!(
            "grid has {} values, expected {batch}x{m}x{in_ch}",
            grid.len()
        )));
    }
    let cells: Vec<f64> = match modality {
        Modality::Optical => grid.to_vec(),
        Modality::Sar => grid
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(OPTICAL_CHANNELS))
            .collect(),
    };
    let x = tape.leaf(cells, vec![batch, m, OPTICAL_CHANNELS])?;
    let projected = tape.matmul(x, proj)?;
    tape.add(projected, enc.patch_pos)
}
