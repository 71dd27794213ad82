//! A tiny pre-norm transformer standing in for a production vision encoder:
//! forward pass with per-layer activation capture, value-path pseudo-forward
//! projection into output space, grouped fine-tuning masks, and a flat
//! binary checkpoint format.

use crate::tape::{NodeId, Tape};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use thiserror::Error;

/// FFN hidden width as a multiple of the model dimension.
const FFN_MULT: usize = 2;

/// Checkpoint magic bytes and version.
const CHECKPOINT_MAGIC: &[u8; 4] = b"MPSG";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("input shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("layer index {layer} out of range 1..={layers}")]
    BadLayer { layer: usize, layers: usize },
    #[error("group boundaries {boundaries:?} do not partition 1..={layers}")]
    BadGrouping {
        boundaries: [usize; 2],
        layers: usize,
    },
    #[error("model dim {dim} must be divisible by heads {heads}")]
    BadHeads { dim: usize, heads: usize },
    #[error("config values must be positive")]
    EmptyConfig,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
}

/// Architecture of the toy encoder.
///
/// Blocks are numbered 1..=layers and split into three contiguous groups by
/// `group_boundaries = [g1_end, g2_end]`: blocks 1..=g1_end stay frozen,
/// blocks g1_end+1..=g2_end train only a zero-initialized parallel linear,
/// and the rest are fully tunable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_count: usize,
    pub patch_input_dim: usize,
    pub group_boundaries: [usize; 2],
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.patch_count == 0
            || self.patch_input_dim == 0
        {
            return Err(EncoderError::EmptyConfig);
        }
        if self.dim % self.heads != 0 {
            return Err(EncoderError::BadHeads {
                dim: self.dim,
                heads: self.heads,
            });
        }
        let [g1, g2] = self.group_boundaries;
        if g1 > g2 || g2 > self.layers {
            return Err(EncoderError::BadGrouping {
                boundaries: self.group_boundaries,
                layers: self.layers,
            });
        }
        Ok(())
    }

    /// Tokens per sample including the [CLS] slot.
    pub fn token_rows(&self) -> usize {
        self.patch_count + 1
    }

    pub fn ffn_dim(&self) -> usize {
        FFN_MULT * self.dim
    }

    fn block_has_parallel(&self, block_1based: usize) -> bool {
        let [g1, g2] = self.group_boundaries;
        block_1based > g1 && block_1based <= g2
    }

    fn block_fully_trainable(&self, block_1based: usize) -> bool {
        block_1based > self.group_boundaries[1]
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 48,
            layers: 3,
            heads: 4,
            patch_count: 4,
            patch_input_dim: 8,
            group_boundaries: [1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelParams {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub parallel: Option<ParallelParams>,
}

/// All encoder weights. `clone()` at initialization provides the immutable
/// frozen reference model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    pub patch_embed: Array2<f64>,
    pub cls: Array2<f64>,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    /// Random initialization; parallel linears (group 2) start exactly zero.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let ff = config.ffn_dim();
        let mut gauss = |rows: usize, cols: usize, std: f64| -> Array2<f64> {
            let normal = Normal::new(0.0, std).unwrap();
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
        };

        let patch_embed = gauss(config.patch_input_dim, d, 1.0 / (config.patch_input_dim as f64).sqrt());
        let cls = gauss(1, d, 1.0);
        let mut blocks = Vec::with_capacity(config.layers);
        for b in 1..=config.layers {
            let w_std = 1.0 / (d as f64).sqrt();
            let blk = BlockParams {
                ln1_gain: Array2::from_elem((1, d), 1.0),
                ln1_bias: Array2::zeros((1, d)),
                wq: gauss(d, d, w_std),
                bq: Array2::zeros((1, d)),
                wk: gauss(d, d, w_std),
                bk: Array2::zeros((1, d)),
                wv: gauss(d, d, w_std),
                bv: Array2::zeros((1, d)),
                wo: gauss(d, d, w_std),
                bo: Array2::zeros((1, d)),
                ln2_gain: Array2::from_elem((1, d), 1.0),
                ln2_bias: Array2::zeros((1, d)),
                w1: gauss(d, ff, w_std),
                b1: Array2::zeros((1, ff)),
                w2: gauss(ff, d, 1.0 / (ff as f64).sqrt()),
                b2: Array2::zeros((1, d)),
                parallel: config.block_has_parallel(b).then(|| ParallelParams {
                    weight: Array2::zeros((d, d)),
                    bias: Array2::zeros((1, d)),
                }),
            };
            blocks.push(blk);
        }
        Ok(Self {
            config,
            patch_embed,
            cls,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Named tensors in canonical declaration order. The checkpoint format,
    /// the trainable mask, and tape registration all follow this order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["patch_embed".to_string(), "cls".to_string()];
        for (i, blk) in self.blocks.iter().enumerate() {
            let b = i + 1;
            for field in [
                "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
            ] {
                names.push(format!("block{b}.{field}"));
            }
            if blk.parallel.is_some() {
                names.push(format!("block{b}.parallel_weight"));
                names.push(format!("block{b}.parallel_bias"));
            }
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = vec![&self.patch_embed, &self.cls];
        for blk in &self.blocks {
            out.extend([
                &blk.ln1_gain, &blk.ln1_bias, &blk.wq, &blk.bq, &blk.wk, &blk.bk, &blk.wv,
                &blk.bv, &blk.wo, &blk.bo, &blk.ln2_gain, &blk.ln2_bias, &blk.w1, &blk.b1,
                &blk.w2, &blk.b2,
            ]);
            if let Some(p) = &blk.parallel {
                out.push(&p.weight);
                out.push(&p.bias);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![&mut self.patch_embed, &mut self.cls];
        for blk in &mut self.blocks {
            out.extend([
                &mut blk.ln1_gain,
                &mut blk.ln1_bias,
                &mut blk.wq,
                &mut blk.bq,
                &mut blk.wk,
                &mut blk.bk,
                &mut blk.wv,
                &mut blk.bv,
                &mut blk.wo,
                &mut blk.bo,
                &mut blk.ln2_gain,
                &mut blk.ln2_bias,
                &mut blk.w1,
                &mut blk.b1,
                &mut blk.w2,
                &mut blk.b2,
            ]);
            if let Some(p) = &mut blk.parallel {
                out.push(&mut p.weight);
                out.push(&mut p.bias);
            }
        }
        out
    }

    /// Per-tensor trainability per the grouped fine-tuning rule: group 1 and
    /// the input embeddings frozen, group 2 trainable only through the
    /// parallel linears, group 3 fully trainable.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false, false]; // patch_embed, cls frozen with group 1
        for (i, blk) in self.blocks.iter().enumerate() {
            let b = i + 1;
            let full = self.config.block_fully_trainable(b);
            mask.extend(std::iter::repeat(full).take(16));
            if blk.parallel.is_some() {
                // Parallel linears train in group 2 (and would in group 3,
                // but group 3 blocks carry none).
                mask.push(true);
                mask.push(true);
            }
        }
        mask
    }

    /// Serialize: magic, version, config block (7 u32 LE), then every tensor
    /// in canonical order as row-major little-endian f64.
    pub fn save_checkpoint<W: Write>(&self, w: &mut W) -> Result<(), EncoderError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            self.config.dim,
            self.config.layers,
            self.config.heads,
            self.config.patch_count,
            self.config.patch_input_dim,
            self.config.group_boundaries[0],
            self.config.group_boundaries[1],
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for t in self.tensors() {
            for &x in t.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<Self, EncoderError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(EncoderError::BadMagic);
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(EncoderError::BadVersion(version));
        }
        let next_u32 = |r: &mut R| -> Result<usize, EncoderError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let config = EncoderConfig {
            dim: next_u32(r)?,
            layers: next_u32(r)?,
            heads: next_u32(r)?,
            patch_count: next_u32(r)?,
            patch_input_dim: next_u32(r)?,
            group_boundaries: [next_u32(r)?, next_u32(r)?],
        };
        // Build a zero skeleton with the right shapes, then fill in place.
        let mut params = EncoderParams::init(config, 0)?;
        for t in params.tensors_mut() {
            for x in t.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *x = f64::from_le_bytes(b);
            }
        }
        Ok(params)
    }
}

/// Per-layer token activations for one sample; `layers[l-1]` is the output
/// of block l, shape (M+1) x d with [CLS] at row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub layers: Vec<Array2<f64>>,
}

impl SampleTrace {
    pub fn layer(&self, l: usize) -> &Array2<f64> {
        &self.layers[l - 1]
    }

    pub fn final_tokens(&self) -> &Array2<f64> {
        self.layers.last().expect("trace has at least one layer")
    }

    /// Raw (pre-normalization) final [CLS] feature, 1 x d.
    pub fn final_cls(&self) -> Array2<f64> {
        self.final_tokens()
            .row(0)
            .to_owned()
            .insert_axis(ndarray::Axis(0))
    }

    /// Raw final patch token features, M x d.
    pub fn final_patches(&self) -> Array2<f64> {
        let t = self.final_tokens();
        t.slice(ndarray::s![1.., ..]).to_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub samples: Vec<SampleTrace>,
}

/// Node ids of one block's tensors on a tape.
#[derive(Debug, Clone)]
pub struct BlockNodeIds {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub parallel: Option<(NodeId, NodeId)>,
}

/// Node ids of all params, plus the flat list aligned with
/// `EncoderParams::tensors()` order.
#[derive(Debug, Clone)]
pub struct ParamNodeIds {
    pub patch_embed: NodeId,
    pub cls: NodeId,
    pub blocks: Vec<BlockNodeIds>,
    pub flat: Vec<NodeId>,
}

/// Put every parameter tensor on the tape. Tensors marked trainable become
/// leaves (gradients reported); the rest become constants and receive no
/// gradient, which is the grouped-freezing contract.
pub fn register_params(
    tape: &mut Tape,
    params: &EncoderParams,
    trainable: &[bool],
) -> ParamNodeIds {
    let tensors = params.tensors();
    assert_eq!(tensors.len(), trainable.len(), "mask length mismatch");
    let mut flat = Vec::with_capacity(tensors.len());
    for (t, &is_trainable) in tensors.iter().zip(trainable.iter()) {
        let id = if is_trainable {
            tape.leaf((*t).clone())
        } else {
            tape.constant((*t).clone())
        };
        flat.push(id);
    }

    let mut cursor = 2;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let ids = BlockNodeIds {
            ln1_gain: flat[cursor],
            ln1_bias: flat[cursor + 1],
            wq: flat[cursor + 2],
            bq: flat[cursor + 3],
            wk: flat[cursor + 4],
            bk: flat[cursor + 5],
            wv: flat[cursor + 6],
            bv: flat[cursor + 7],
            wo: flat[cursor + 8],
            bo: flat[cursor + 9],
            ln2_gain: flat[cursor + 10],
            ln2_bias: flat[cursor + 11],
            w1: flat[cursor + 12],
            b1: flat[cursor + 13],
            w2: flat[cursor + 14],
            b2: flat[cursor + 15],
            parallel: blk.parallel.as_ref().map(|_| (flat[cursor + 16], flat[cursor + 17])),
        };
        cursor += 16 + if blk.parallel.is_some() { 2 } else { 0 };
        blocks.push(ids);
    }
    ParamNodeIds {
        patch_embed: flat[0],
        cls: flat[1],
        blocks,
        flat,
    }
}

enum Mixing {
    Attention { heads: usize },
    ValuePath,
}

fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let xw = tape.matmul(x, w);
    tape.add_row_broadcast(xw, b)
}

/// One transformer block. The value-path variant replaces the token-mixing
/// attention with the value projection alone; layer norms, residuals, the
/// FFN, and any parallel branch apply identically in both variants.
fn block_forward(tape: &mut Tape, ids: &BlockNodeIds, x: NodeId, mixing: Mixing) -> NodeId {
    let block_input = x;
    let h1 = tape.layer_norm_rows(x, ids.ln1_gain, ids.ln1_bias);

    let mixed = match mixing {
        Mixing::Attention { heads } => {
            let d = tape.value(h1).ncols();
            let dh = d / heads;
            let q = linear(tape, h1, ids.wq, ids.bq);
            let k = linear(tape, h1, ids.wk, ids.bk);
            let v = linear(tape, h1, ids.wv, ids.bv);
            let mut head_outputs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let scores = tape.matmul_nt(qh, kh);
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let attn = tape.softmax_rows(scaled);
                head_outputs.push(tape.matmul(attn, vh));
            }
            tape.concat_cols(&head_outputs)
        }
        Mixing::ValuePath => linear(tape, h1, ids.wv, ids.bv),
    };
    let attn_out = linear(tape, mixed, ids.wo, ids.bo);
    let x1 = tape.add(x, attn_out);

    let h2 = tape.layer_norm_rows(x1, ids.ln2_gain, ids.ln2_bias);
    let f1 = linear(tape, h2, ids.w1, ids.b1);
    let f1a = tape.gelu(f1);
    let ffn_out = linear(tape, f1a, ids.w2, ids.b2);
    let mut out = tape.add(x1, ffn_out);

    if let Some((wp, bp)) = ids.parallel {
        let par = linear(tape, block_input, wp, bp);
        out = tape.add(out, par);
    }
    out
}

/// Full forward for one sample: embed patch tokens, prepend [CLS], run every
/// block with attention mixing. Returns the per-layer token nodes.
pub fn forward_sample_on_tape(
    tape: &mut Tape,
    ids: &ParamNodeIds,
    config: &EncoderConfig,
    tokens: NodeId,
) -> Vec<NodeId> {
    let embedded = tape.matmul(tokens, ids.patch_embed);
    let mut x = tape.concat_rows(&[ids.cls, embedded]);
    let mut trace = Vec::with_capacity(config.layers);
    for block_ids in &ids.blocks {
        x = block_forward(
            tape,
            block_ids,
            x,
            Mixing::Attention {
                heads: config.heads,
            },
        );
        trace.push(x);
    }
    trace
}

/// Project layer-`from_layer` token features into output space by running
/// every remaining block with the value path in place of attention mixing.
/// `from_layer == layers` is the empty chain.
pub fn pseudo_forward_on_tape(
    tape: &mut Tape,
    ids: &ParamNodeIds,
    config: &EncoderConfig,
    z: NodeId,
    from_layer: usize,
) -> Result<NodeId, EncoderError> {
    if from_layer == 0 || from_layer > config.layers {
        return Err(EncoderError::BadLayer {
            layer: from_layer,
            layers: config.layers,
        });
    }
    let mut x = z;
    for block_ids in &ids.blocks[from_layer..] {
        x = block_forward(tape, block_ids, x, Mixing::ValuePath);
    }
    Ok(x)
}

fn check_token_shape(config: &EncoderConfig, tokens: &Array2<f64>) -> Result<(), EncoderError> {
    let expected = (config.patch_count, config.patch_input_dim);
    if tokens.dim() != expected {
        return Err(EncoderError::ShapeMismatch {
            got: tokens.dim(),
            expected,
        });
    }
    Ok(())
}

/// Plain forward pass over a batch of raw token inputs (each M x
/// patch_input_dim), capturing every layer's token matrix.
pub fn encode(params: &EncoderParams, batch: &[Array2<f64>]) -> Result<ActivationTrace, EncoderError> {
    let all_const = vec![false; params.tensors().len()];
    let mut samples = Vec::with_capacity(batch.len());
    for tokens in batch {
        check_token_shape(&params.config, tokens)?;
        let mut tape = Tape::new();
        let ids = register_params(&mut tape, params, &all_const);
        let t = tape.constant(tokens.clone());
        let trace = forward_sample_on_tape(&mut tape, &ids, &params.config, t);
        samples.push(SampleTrace {
            layers: trace.iter().map(|&id| tape.value(id).clone()).collect(),
        });
    }
    Ok(ActivationTrace { samples })
}

/// Plain pseudo-forward of one token matrix from the given layer.
pub fn pseudo_forward(
    params: &EncoderParams,
    z: &Array2<f64>,
    from_layer: usize,
) -> Result<Array2<f64>, EncoderError> {
    let expected = (params.config.token_rows(), params.config.dim);
    if z.dim() != expected {
        return Err(EncoderError::ShapeMismatch {
            got: z.dim(),
            expected,
        });
    }
    let all_const = vec![false; params.tensors().len()];
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, params, &all_const);
    let zn = tape.constant(z.clone());
    let out = pseudo_forward_on_tape(&mut tape, &ids, &params.config, zn, from_layer)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            layers: 3,
            heads: 2,
            patch_count: 2,
            patch_input_dim: 4,
            group_boundaries: [1, 2],
        }
    }

    fn rand_tokens(rng: &mut ChaCha8Rng, config: &EncoderConfig) -> Array2<f64> {
        Array2::from_shape_fn((config.patch_count, config.patch_input_dim), |_| {
            rng.gen_range(-1.0..1.0)
        })
    }

    /// Zero the output-side maps so every block is exactly the identity.
    fn make_identity_blocks(params: &mut EncoderParams) {
        for blk in &mut params.blocks {
            blk.wo.fill(0.0);
            blk.bo.fill(0.0);
            blk.w2.fill(0.0);
            blk.b2.fill(0.0);
            if let Some(p) = &mut blk.parallel {
                p.weight.fill(0.0);
                p.bias.fill(0.0);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(matches!(c.validate(), Err(EncoderError::BadHeads { .. })));
        let mut c = small_config();
        c.group_boundaries = [3, 2];
        assert!(matches!(c.validate(), Err(EncoderError::BadGrouping { .. })));
        let mut c = small_config();
        c.group_boundaries = [0, 4];
        assert!(matches!(c.validate(), Err(EncoderError::BadGrouping { .. })));
    }

    #[test]
    fn parallel_linears_zero_at_init() {
        let params = EncoderParams::init(small_config(), 7).unwrap();
        assert!(params.blocks[0].parallel.is_none());
        let p = params.blocks[1].parallel.as_ref().unwrap();
        assert!(p.weight.iter().all(|&v| v == 0.0));
        assert!(p.bias.iter().all(|&v| v == 0.0));
        assert!(params.blocks[2].parallel.is_none());
    }

    #[test]
    fn encode_deterministic_and_batch_independent() {
        let config = small_config();
        let params = EncoderParams::init(config.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tokens(&mut rng, &config);
        let b = rand_tokens(&mut rng, &config);

        let t1 = encode(&params, &[a.clone(), b.clone()]).unwrap();
        let t2 = encode(&params, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(t1, t2);

        let ta = encode(&params, &[a]).unwrap();
        let tb = encode(&params, &[b]).unwrap();
        assert_eq!(t1.samples[0], ta.samples[0]);
        assert_eq!(t1.samples[1], tb.samples[0]);
    }

    #[test]
    fn zero_parallel_matches_plain_forward() {
        let config = small_config();
        let params = EncoderParams::init(config.clone(), 9).unwrap();
        // A variant without any parallel branch at all.
        let mut no_par = params.clone();
        for blk in &mut no_par.blocks {
            blk.parallel = None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = rand_tokens(&mut rng, &config);
        let with = encode(&params, &[tokens.clone()]).unwrap();
        let without = encode(&no_par, &[tokens]).unwrap();
        assert_eq!(with.samples[0], without.samples[0]);
    }

    #[test]
    fn pseudo_forward_identity_chain() {
        let config = small_config();
        let mut params = EncoderParams::init(config.clone(), 11).unwrap();
        make_identity_blocks(&mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array2::from_shape_fn((config.token_rows(), config.dim), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let out = pseudo_forward(&params, &z, 1).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn pseudo_forward_from_last_layer_is_input() {
        let config = small_config();
        let params = EncoderParams::init(config.clone(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Array2::from_shape_fn((config.token_rows(), config.dim), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let out = pseudo_forward(&params, &z, config.layers).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn pseudo_forward_rejects_bad_layer() {
        let config = small_config();
        let params = EncoderParams::init(config.clone(), 13).unwrap();
        let z = Array2::zeros((config.token_rows(), config.dim));
        assert!(matches!(
            pseudo_forward(&params, &z, 0),
            Err(EncoderError::BadLayer { .. })
        ));
        assert!(matches!(
            pseudo_forward(&params, &z, 4),
            Err(EncoderError::BadLayer { .. })
        ));
    }

    /// Hand-composed one-block value-path oracle: layer norm, value then
    /// output projection with residual, layer norm, GELU FFN with residual.
    #[test]
    fn pseudo_forward_one_block_matches_hand_composition() {
        let mut config = small_config();
        config.layers = 2;
        config.group_boundaries = [1, 1]; // block 2 has no parallel branch
        let params = EncoderParams::init(config.clone(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Array2::from_shape_fn((config.token_rows(), config.dim), |_| {
            rng.gen_range(-1.0..1.0)
        });

        let got = pseudo_forward(&params, &z, 1).unwrap();

        let blk = &params.blocks[1];
        let ln = |x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>| -> Array2<f64> {
            let d = x.ncols() as f64;
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let mean = row.sum() / d;
                let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + 1e-5).sqrt();
                for (j, t) in row.iter_mut().enumerate() {
                    *t = g[[0, j]] * (*t - mean) * inv + b[[0, j]];
                }
            }
            out
        };
        let affine = |x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>| -> Array2<f64> {
            let mut out = x.dot(w);
            for mut row in out.rows_mut() {
                row += &b.row(0);
            }
            out
        };
        let gelu = |x: &Array2<f64>| -> Array2<f64> {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            x.mapv(|v| {
                let u = c * (v + 0.044715 * v.powi(3));
                0.5 * v * (1.0 + u.tanh())
            })
        };

        let h1 = ln(&z, &blk.ln1_gain, &blk.ln1_bias);
        let v = affine(&h1, &blk.wv, &blk.bv);
        let x1 = &z + &affine(&v, &blk.wo, &blk.bo);
        let h2 = ln(&x1, &blk.ln2_gain, &blk.ln2_bias);
        let ffn = affine(&gelu(&affine(&h2, &blk.w1, &blk.b1)), &blk.w2, &blk.b2);
        let expected = &x1 + &ffn;

        let max_err = got
            .iter()
            .zip(expected.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-12, "max abs error {max_err}");
    }

    #[test]
    fn grouping_mask_selects_parallel_and_group3() {
        let config = small_config(); // groups {1}, {2}, {3}
        let params = EncoderParams::init(config, 19).unwrap();
        let names = params.tensor_names();
        let mask = params.trainable_mask();
        assert_eq!(names.len(), mask.len());
        let trainable: Vec<&String> = names
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(n, _)| n)
            .collect();
        // Exactly block2's parallel pair and all 16 tensors of block3.
        assert_eq!(trainable.len(), 18);
        assert!(trainable.iter().any(|n| n.as_str() == "block2.parallel_weight"));
        assert!(trainable.iter().any(|n| n.as_str() == "block2.parallel_bias"));
        assert!(trainable.iter().filter(|n| n.starts_with("block3.")).count() == 16);
        assert!(!mask[0] && !mask[1]); // embeddings frozen
    }

    #[test]
    fn all_in_group_one_freezes_everything() {
        let mut config = small_config();
        config.group_boundaries = [3, 3];
        let params = EncoderParams::init(config, 23).unwrap();
        assert!(params.trainable_mask().iter().all(|&m| !m));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let params = EncoderParams::init(small_config(), 29).unwrap();
        let mut buf = Vec::new();
        params.save_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"MPSG");
        let loaded = EncoderParams::load_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let params = EncoderParams::init(small_config(), 29).unwrap();
        let mut buf = Vec::new();
        params.save_checkpoint(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            EncoderParams::load_checkpoint(&mut buf.as_slice()),
            Err(EncoderError::BadMagic)
        ));
    }

    #[test]
    fn register_params_order_matches_tensors() {
        let params = EncoderParams::init(small_config(), 31).unwrap();
        let mask = vec![true; params.tensors().len()];
        let mut tape = Tape::new();
        let ids = register_params(&mut tape, &params, &mask);
        for (id, tensor) in ids.flat.iter().zip(params.tensors()) {
            assert_eq!(tape.value(*id), tensor);
        }
        assert_eq!(ids.blocks[1].parallel.is_some(), true);
        assert_eq!(ids.blocks[0].parallel.is_none(), true);
    }

    #[test]
    fn encode_rejects_wrong_token_shape() {
        let config = small_config();
        let params = EncoderParams::init(config, 37).unwrap();
        let bad = Array2::zeros((3, 4));
        assert!(matches!(
            encode(&params, &[bad]),
            Err(EncoderError::ShapeMismatch { .. })
        ));
    }
}
