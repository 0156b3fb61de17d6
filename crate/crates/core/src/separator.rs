//! Mask estimator: intra-chunk self-attention, chunk-level cross-modal
//! fusion, inter-chunk self-attention, and a mask head.
//!
//! Working layouts are chunk-major `I×C×N` for the intra stage (each chunk
//! is one sequence of length `C`) and position-major `C×I×N` for the fusion
//! and inter stages (each intra-chunk position is one sequence of length
//! `I`, aligned one-to-one with the cue frames).

use std::collections::BTreeMap;

use crate::attention::{
    block_param_count, cross_block, init_block, self_block, BlockVars, Dropout,
};
use crate::chunking::{chunk_var, overlap_add_var, ChunkLayout};
use crate::config::{MaskActivation, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore, ParamVars};
use crate::posenc;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named intermediate tensors captured during a forward pass, in the
/// documented `N×K` / `N×C×I` layouts.
pub type Hooks<T> = BTreeMap<String, Tensor<T>>;

/// Names under which intermediates are captured.
pub mod hook {
    pub const H_X: &str = "H_x";
    pub const H_V: &str = "H_v";
    pub const CHUNKED: &str = "H'_x";
    pub const INTRA: &str = "H''_x";
    pub const FUSED: &str = "H_f";
    pub const CHUNKED_MASK: &str = "M'";
    pub const MASK: &str = "M";
}

fn capture<T: Scalar>(
    hooks: &mut Option<&mut Hooks<T>>,
    name: &str,
    v: &Var<T>,
    axes: Option<&[usize]>,
) -> Result<()> {
    if let Some(h) = hooks {
        let t = match axes {
            Some(axes) => crate::tensor::kernels::permute(v.value(), axes)?,
            None => v.value().clone(),
        };
        h.insert(name.to_string(), t);
    }
    Ok(())
}

fn repeat_prefix(r: usize) -> String {
    format!("sep.r{r}")
}

pub fn init_separator<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Initializer,
    cfg: &ModelConfig,
) {
    let n = cfg.feature_dim;
    if cfg.input_norm {
        store.insert("sep.in_norm.gamma", Tensor::ones(&[n]));
        store.insert("sep.in_norm.beta", Tensor::zeros(&[n]));
        store.insert("sep.in_proj.w", init.linear(n, n));
        store.insert("sep.in_proj.b", Tensor::zeros(&[n]));
    }
    for r in 0..cfg.repeats {
        let p = repeat_prefix(r);
        for j in 0..cfg.n_intra {
            init_block(
                store,
                init,
                &format!("{p}.intra.{j}"),
                n,
                cfg.ffn_mult,
                false,
            );
        }
        if cfg.use_cross_attention {
            store.insert(format!("{p}.cross.q_proj.w"), init.linear(n, n));
            store.insert(format!("{p}.cross.q_proj.b"), Tensor::zeros(&[n]));
            store.insert(format!("{p}.cross.kv_proj.w"), init.linear(n, n));
            store.insert(format!("{p}.cross.kv_proj.b"), Tensor::zeros(&[n]));
            init_block(
                store,
                init,
                &format!("{p}.cross.block"),
                n,
                cfg.ffn_mult,
                true,
            );
        } else {
            store.insert(format!("{p}.fuse.w"), init.linear(2 * n, n));
            store.insert(format!("{p}.fuse.b"), Tensor::zeros(&[n]));
        }
        for j in 0..cfg.n_inter {
            init_block(
                store,
                init,
                &format!("{p}.inter.{j}"),
                n,
                cfg.ffn_mult,
                false,
            );
        }
    }
    store.insert("sep.mask.w", init.linear(n, n));
    store.insert("sep.mask.b", Tensor::zeros(&[n]));
}

pub fn separator_param_count(cfg: &ModelConfig) -> usize {
    let n = cfg.feature_dim;
    let linear = n * n + n;
    let input = if cfg.input_norm { 2 * n + linear } else { 0 };
    let fusion = if cfg.use_cross_attention {
        2 * linear + block_param_count(n, cfg.ffn_mult, true)
    } else {
        2 * n * n + n
    };
    let per_repeat =
        (cfg.n_intra + cfg.n_inter) * block_param_count(n, cfg.ffn_mult, false) + fusion;
    input + cfg.repeats * per_repeat + linear
}

/// Audio positional table to add to a chunk-major `I×C×N` feature.
fn audio_posenc<T: Scalar>(cfg: &ModelConfig, n_chunks: usize) -> Result<Tensor<T>> {
    let (n, c) = (cfg.feature_dim, cfg.chunk_size);
    if cfg.use_2d_pos {
        posenc::pe2d_chunk_major(n, c, n_chunks)
    } else {
        Ok(posenc::transpose2(&posenc::pe1d::<T>(n, c)?))
    }
}

/// Visual positional rows `I×N`: the `c = C/2` slice of the 2D table, or a
/// plain 1D table over frames in the 1D ablation.
fn visual_posenc<T: Scalar>(cfg: &ModelConfig, n_chunks: usize) -> Result<Tensor<T>> {
    let (n, c) = (cfg.feature_dim, cfg.chunk_size);
    let table = if cfg.use_2d_pos {
        posenc::pe2d_visual_row::<T>(n, c, n_chunks)?
    } else {
        posenc::pe1d::<T>(n, n_chunks)?
    };
    Ok(posenc::transpose2(&table))
}

/// Intra stage: the block stack applied to every chunk of `x[I×C×N]`.
pub fn intra_stage<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars<T>,
    prefix: &str,
    x: &Var<T>,
    cfg: &ModelConfig,
    dropout: &mut Option<Dropout>,
) -> Result<Var<T>> {
    let mut x = x.clone();
    for j in 0..cfg.n_intra {
        let w = BlockVars::from_params(p, &format!("{prefix}.intra.{j}"), false)?;
        x = self_block(tape, &w, &x, cfg.n_head, cfg.layernorm_eps, dropout)?;
    }
    Ok(x)
}

/// Fusion stage. `x` is the intra output in `C×I×N`; `hv_seq` is the cue as
/// `I×N` with its positional rows already added. Returns `H_f` in `C×I×N`.
pub fn cross_stage<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars<T>,
    prefix: &str,
    x: &Var<T>,
    hv_seq: &Var<T>,
    cfg: &ModelConfig,
    dropout: &mut Option<Dropout>,
) -> Result<Var<T>> {
    let (c, i, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if hv_seq.shape() != [i, n] {
        return Err(Error::Alignment(format!(
            "cue is {:?} but the audio has {i} chunks of dimension {n}",
            hv_seq.shape()
        )));
    }
    let grid = tape.constant(Tensor::zeros(&[c, i, n]));
    if cfg.use_cross_attention {
        let q = tape.linear(
            hv_seq,
            p.get(&format!("{prefix}.cross.q_proj.w"))?,
            Some(p.get(&format!("{prefix}.cross.q_proj.b"))?),
        )?;
        let q = tape.add(&grid, &q)?;
        let kv = tape.linear(
            x,
            p.get(&format!("{prefix}.cross.kv_proj.w"))?,
            Some(p.get(&format!("{prefix}.cross.kv_proj.b"))?),
        )?;
        let w = BlockVars::from_params(p, &format!("{prefix}.cross.block"), true)?;
        cross_block(tape, &w, &q, &kv, cfg.n_head, cfg.layernorm_eps, dropout)
    } else {
        // replicate each cue frame over its chunk, concatenate features
        let vis = tape.add(&grid, hv_seq)?;
        let cat = tape.concat(&[x, &vis], 2)?;
        tape.linear(
            &cat,
            p.get(&format!("{prefix}.fuse.w"))?,
            Some(p.get(&format!("{prefix}.fuse.b"))?),
        )
    }
}

/// Inter stage body: the block stack applied across chunks for every
/// intra-chunk position of `x[C×I×N]`.
pub fn inter_stage<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars<T>,
    prefix: &str,
    x: &Var<T>,
    cfg: &ModelConfig,
    dropout: &mut Option<Dropout>,
) -> Result<Var<T>> {
    let mut x = x.clone();
    for j in 0..cfg.n_inter {
        let w = BlockVars::from_params(p, &format!("{prefix}.inter.{j}"), false)?;
        x = self_block(tape, &w, &x, cfg.n_head, cfg.layernorm_eps, dropout)?;
    }
    Ok(x)
}

/// Linear map plus output nonlinearity, giving the chunked mask.
pub fn mask_head<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars<T>,
    x: &Var<T>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    let y = tape.linear(x, p.get("sep.mask.w")?, Some(p.get("sep.mask.b")?))?;
    match cfg.mask_activation {
        MaskActivation::Sigmoid => tape.sigmoid(&y),
        MaskActivation::Relu => tape.relu(&y),
    }
}

/// Full separator: `H_x[N×K]` and cue `H_v[N×I]` → mask `M[N×K]`.
///
/// The cue must already have exactly as many frames as there are chunks.
pub fn separate_var<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars<T>,
    hx: &Var<T>,
    hv: &Tensor<T>,
    cfg: &ModelConfig,
    dropout: &mut Option<Dropout>,
    mut hooks: Option<&mut Hooks<T>>,
) -> Result<Var<T>> {
    let (n, k) = (hx.shape()[0], hx.shape()[1]);
    if n != cfg.feature_dim {
        return Err(Error::shape(
            "separate",
            format!("feature dimension {n} ≠ configured N {}", cfg.feature_dim),
        ));
    }
    let layout = ChunkLayout::new(k, cfg.chunk_size)?;
    let i = layout.n_chunks;
    if hv.shape() != [n, i] {
        return Err(Error::Alignment(format!(
            "cue is {:?}, expected {n}×{i} (one frame per chunk)",
            hv.shape()
        )));
    }
    capture(&mut hooks, hook::H_X, hx, None)?;
    capture(&mut hooks, hook::H_V, &tape.constant(hv.clone()), None)?;

    let mut x = tape.permute(hx, &[1, 0])?;
    if cfg.input_norm {
        x = tape.layernorm(
            &x,
            p.get("sep.in_norm.gamma")?,
            p.get("sep.in_norm.beta")?,
            cfg.layernorm_eps,
        )?;
        x = tape.linear(&x, p.get("sep.in_proj.w")?, Some(p.get("sep.in_proj.b")?))?;
    }
    let mut xc = chunk_var(tape, &x, &layout)?;
    capture(&mut hooks, hook::CHUNKED, &xc, Some(&[2, 1, 0]))?;

    let pe_audio = tape.constant(audio_posenc::<T>(cfg, i)?);
    let hv_t = tape.constant(posenc::transpose2(hv));
    let pe_vis = tape.constant(visual_posenc::<T>(cfg, i)?);
    let hv_seq = tape.add(&hv_t, &pe_vis)?;

    for r in 0..cfg.repeats {
        let prefix = repeat_prefix(r);
        if r == 0 || cfg.pos_every_repeat {
            xc = tape.add(&xc, &pe_audio)?;
        }
        xc = intra_stage(tape, p, &prefix, &xc, cfg, dropout)?;
        capture(&mut hooks, hook::INTRA, &xc, Some(&[2, 1, 0]))?;
        let xt = tape.permute(&xc, &[1, 0, 2])?;
        let hf = cross_stage(tape, p, &prefix, &xt, &hv_seq, cfg, dropout)?;
        capture(&mut hooks, hook::FUSED, &hf, Some(&[2, 0, 1]))?;
        let y = inter_stage(tape, p, &prefix, &hf, cfg, dropout)?;
        xc = tape.permute(&y, &[1, 0, 2])?;
    }
    let m_chunked = mask_head(tape, p, &xc, cfg)?;
    capture(&mut hooks, hook::CHUNKED_MASK, &m_chunked, Some(&[2, 1, 0]))?;

    let m = overlap_add_var(tape, &m_chunked, &layout)?;
    let coverage = layout.coverage();
    let inv = Tensor::from_fn(&[k, n], |idx| T::from_f64(1.0 / coverage[idx / n] as f64));
    let inv = tape.constant(inv);
    let m = tape.mul(&m, &inv)?;
    let m = tape.permute(&m, &[1, 0])?;
    capture(&mut hooks, hook::MASK, &m, None)?;
    Ok(m)
}
