//! The full hashing model: one parameter set shared by both members of
//! every training pair (the Siamese property holds by construction), wiring
//! the backbone into the dual-stream hash heads.

use rand::Rng;

use crate::backbone::{
    embed, encoder_forward, patchify, BackboneConfig, BoundBlock, BoundEmbedder, BoundLayerNorm,
    EncoderBlock, LayerNormParams, PatchEmbedder, LN_EPS,
};
use crate::dual_stream::{
    global_branch, hash_project, local_branch, BoundHead, DualStreamConfig, DualStreamParams,
    HashVectorIds, HashVectorSet,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone)]
pub struct TransHashModel {
    pub backbone: BackboneConfig,
    pub dual: DualStreamConfig,
    pub embedder: PatchEmbedder,
    pub encoder: Vec<EncoderBlock>,
    pub final_ln: Option<LayerNormParams>,
    pub streams: DualStreamParams,
}

impl TransHashModel {
    pub fn init(
        backbone: BackboneConfig,
        dual: DualStreamConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        backbone.validate()?;
        dual.validate()?;
        if dual.feature_dim != backbone.embed_dim {
            return Err(Error::config(format!(
                "dual_stream.feature_dim {} must equal backbone.embed_dim {}",
                dual.feature_dim, backbone.embed_dim
            )));
        }
        // groups must be satisfiable by the token count
        dual.group_sizes(backbone.num_patches())?;

        let embedder = PatchEmbedder::init(&backbone, rng);
        let encoder = (0..backbone.encoder_blocks())
            .map(|_| EncoderBlock::init(&backbone, rng))
            .collect();
        let final_ln = backbone
            .final_layer_norm
            .then(|| LayerNormParams::identity(backbone.embed_dim));
        let streams = DualStreamParams::init(&backbone, &dual, rng);
        Ok(TransHashModel {
            backbone,
            dual,
            embedder,
            encoder,
            final_ln,
            streams,
        })
    }

    /// Every trainable tensor with a stable, canonical name. The order here
    /// defines checkpoint layout and optimizer state order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedder.projection".into(), &self.embedder.projection),
            ("embedder.proj_bias".into(), &self.embedder.proj_bias),
            ("embedder.class_token".into(), &self.embedder.class_token),
            ("embedder.pos_embedding".into(), &self.embedder.pos_embedding),
        ];
        for (i, block) in self.encoder.iter().enumerate() {
            out.extend(block_params(&format!("encoder.{i}"), block));
        }
        if let Some(ln) = &self.final_ln {
            out.push(("final_ln.gain".into(), &ln.gain));
            out.push(("final_ln.bias".into(), &ln.bias));
        }
        out.extend(block_params("global.block", &self.streams.global_block));
        out.extend(block_params("local.block", &self.streams.local_block));
        out.push(("global.head.weight".into(), &self.streams.global_head.weight));
        out.push(("global.head.bias".into(), &self.streams.global_head.bias));
        for (k, head) in self.streams.local_heads.iter().enumerate() {
            out.push((format!("local.head.{k}.weight"), &head.weight));
            out.push((format!("local.head.{k}.bias"), &head.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embedder.projection".into(), &mut self.embedder.projection),
            ("embedder.proj_bias".into(), &mut self.embedder.proj_bias),
            ("embedder.class_token".into(), &mut self.embedder.class_token),
            ("embedder.pos_embedding".into(), &mut self.embedder.pos_embedding),
        ];
        for (i, block) in self.encoder.iter_mut().enumerate() {
            out.extend(block_params_mut(&format!("encoder.{i}"), block));
        }
        if let Some(ln) = &mut self.final_ln {
            out.push(("final_ln.gain".into(), &mut ln.gain));
            out.push(("final_ln.bias".into(), &mut ln.bias));
        }
        out.extend(block_params_mut("global.block", &mut self.streams.global_block));
        out.extend(block_params_mut("local.block", &mut self.streams.local_block));
        out.push(("global.head.weight".into(), &mut self.streams.global_head.weight));
        out.push(("global.head.bias".into(), &mut self.streams.global_head.bias));
        for (k, head) in self.streams.local_heads.iter_mut().enumerate() {
            out.push((format!("local.head.{k}.weight"), &mut head.weight));
            out.push((format!("local.head.{k}.bias"), &mut head.bias));
        }
        out
    }

    pub fn param_tensor_count(&self) -> usize {
        self.named_params().len()
    }

    pub fn scalar_param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Registers all parameters on a tape (in canonical order) and returns
    /// the bound handles for forwarding.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let ordered: Vec<TensorId> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf_from(t))
            .collect();
        // ids were pushed in visit order; rebuild the structured view
        let mut cursor = 0usize;
        let mut next = || {
            let id = ordered[cursor];
            cursor += 1;
            id
        };
        let embedder = BoundEmbedder {
            projection: next(),
            proj_bias: next(),
            class_token: next(),
            pos_embedding: next(),
        };
        let bind_block = |next: &mut dyn FnMut() -> TensorId| BoundBlock {
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            mlp_w1: next(),
            mlp_b1: next(),
            mlp_w2: next(),
            mlp_b2: next(),
            ln1: BoundLayerNorm { gain: next(), bias: next() },
            ln2: BoundLayerNorm { gain: next(), bias: next() },
        };
        let encoder: Vec<BoundBlock> = (0..self.encoder.len())
            .map(|_| bind_block(&mut next))
            .collect();
        let final_ln = self
            .final_ln
            .as_ref()
            .map(|_| BoundLayerNorm { gain: next(), bias: next() });
        let global_block = bind_block(&mut next);
        let local_block = bind_block(&mut next);
        let global_head = BoundHead { weight: next(), bias: next() };
        let local_heads: Vec<BoundHead> = (0..self.streams.local_heads.len())
            .map(|_| BoundHead { weight: next(), bias: next() })
            .collect();
        debug_assert_eq!(cursor, ordered.len());
        BoundModel {
            backbone: self.backbone.clone(),
            dual: self.dual.clone(),
            embedder,
            encoder,
            final_ln,
            global_block,
            local_block,
            global_head,
            local_heads,
            param_ids: ordered,
        }
    }

    /// Copies gradients from a tape back into the parameter tensors.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundModel) -> Result<()> {
        let mut params = self.named_params_mut();
        if params.len() != bound.param_ids.len() {
            return Err(Error::contract(format!(
                "bound model has {} parameters, model has {}",
                bound.param_ids.len(),
                params.len()
            )));
        }
        for ((name, tensor), &id) in params.iter_mut().zip(&bound.param_ids) {
            let grad = tape.grad(id).ok_or_else(|| {
                Error::contract(format!("no gradient for parameter {name}; run backward first"))
            })?;
            tensor.grad = Some(grad.to_vec());
        }
        Ok(())
    }

    /// Rebuilds a model from checkpointed tensors, validating names/shapes.
    pub fn from_named(
        backbone: BackboneConfig,
        dual: DualStreamConfig,
        named: &[(String, Tensor)],
    ) -> Result<Self> {
        use rand::SeedableRng;
        // geometry comes from the configs; values are overwritten below
        let mut model = TransHashModel::init(
            backbone,
            dual,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        )?;
        {
            let mut params = model.named_params_mut();
            if params.len() != named.len() {
                return Err(Error::contract(format!(
                    "checkpoint has {} tensors, model expects {}",
                    named.len(),
                    params.len()
                )));
            }
            for ((expect_name, slot), (name, tensor)) in params.iter_mut().zip(named) {
                if expect_name != name {
                    return Err(Error::contract(format!(
                        "checkpoint tensor {name:?} where {expect_name:?} was expected"
                    )));
                }
                if slot.shape != tensor.shape {
                    return Err(Error::contract(format!(
                        "checkpoint tensor {name} has shape {:?}, expected {:?}",
                        tensor.shape, slot.shape
                    )));
                }
                slot.data = tensor.data.clone();
                slot.grad = None;
            }
        }
        Ok(model)
    }
}

fn block_params<'a>(prefix: &str, b: &'a EncoderBlock) -> Vec<(String, &'a Tensor)> {
    vec![
        (format!("{prefix}.wq"), &b.wq),
        (format!("{prefix}.bq"), &b.bq),
        (format!("{prefix}.wk"), &b.wk),
        (format!("{prefix}.bk"), &b.bk),
        (format!("{prefix}.wv"), &b.wv),
        (format!("{prefix}.bv"), &b.bv),
        (format!("{prefix}.wo"), &b.wo),
        (format!("{prefix}.bo"), &b.bo),
        (format!("{prefix}.mlp_w1"), &b.mlp_w1),
        (format!("{prefix}.mlp_b1"), &b.mlp_b1),
        (format!("{prefix}.mlp_w2"), &b.mlp_w2),
        (format!("{prefix}.mlp_b2"), &b.mlp_b2),
        (format!("{prefix}.ln1.gain"), &b.ln1.gain),
        (format!("{prefix}.ln1.bias"), &b.ln1.bias),
        (format!("{prefix}.ln2.gain"), &b.ln2.gain),
        (format!("{prefix}.ln2.bias"), &b.ln2.bias),
    ]
}

fn block_params_mut<'a>(prefix: &str, b: &'a mut EncoderBlock) -> Vec<(String, &'a mut Tensor)> {
    vec![
        (format!("{prefix}.wq"), &mut b.wq),
        (format!("{prefix}.bq"), &mut b.bq),
        (format!("{prefix}.wk"), &mut b.wk),
        (format!("{prefix}.bk"), &mut b.bk),
        (format!("{prefix}.wv"), &mut b.wv),
        (format!("{prefix}.bv"), &mut b.bv),
        (format!("{prefix}.wo"), &mut b.wo),
        (format!("{prefix}.bo"), &mut b.bo),
        (format!("{prefix}.mlp_w1"), &mut b.mlp_w1),
        (format!("{prefix}.mlp_b1"), &mut b.mlp_b1),
        (format!("{prefix}.mlp_w2"), &mut b.mlp_w2),
        (format!("{prefix}.mlp_b2"), &mut b.mlp_b2),
        (format!("{prefix}.ln1.gain"), &mut b.ln1.gain),
        (format!("{prefix}.ln1.bias"), &mut b.ln1.bias),
        (format!("{prefix}.ln2.gain"), &mut b.ln2.gain),
        (format!("{prefix}.ln2.bias"), &mut b.ln2.bias),
    ]
}

/// A model bound to one tape: parameter ids plus the config needed to run
/// forwards. Reusing one binding across a batch shares the parameters.
#[derive(Debug, Clone)]
pub struct BoundModel {
    backbone: BackboneConfig,
    dual: DualStreamConfig,
    embedder: BoundEmbedder,
    encoder: Vec<BoundBlock>,
    final_ln: Option<BoundLayerNorm>,
    global_block: BoundBlock,
    local_block: BoundBlock,
    global_head: BoundHead,
    local_heads: Vec<BoundHead>,
    /// All parameter ids in canonical (checkpoint) order.
    pub param_ids: Vec<TensorId>,
}

impl BoundModel {
    /// Full forward pass for one image: continuous global and local hash
    /// vectors.
    ///
    /// The shared final layer norm (when enabled) applies once after the
    /// encoder stack, so both branches read the same normalized sequence;
    /// branch outputs are used raw.
    pub fn forward(&self, tape: &mut Tape, image: &Tensor) -> Result<HashVectorIds> {
        let patches = patchify(image, self.backbone.patch_size)?;
        if patches.shape[1] != self.backbone.patch_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: patches.shape,
                rhs: vec![self.backbone.num_patches(), self.backbone.patch_dim()],
            });
        }
        let pid = tape.leaf(patches);
        let z0 = embed(tape, pid, &self.embedder)?;
        let mut z = encoder_forward(tape, z0, &self.encoder, self.backbone.num_heads)?;
        if let Some(ln) = &self.final_ln {
            z = tape.layer_norm(z, ln.gain, ln.bias, LN_EPS)?;
        }
        let f_g = global_branch(tape, z, &self.global_block, self.backbone.num_heads)?;
        let global = hash_project(tape, f_g, &self.global_head)?;
        let f_ls = local_branch(tape, z, &self.local_block, &self.dual, self.backbone.num_heads)?;
        let locals = f_ls
            .into_iter()
            .zip(&self.local_heads)
            .map(|(f, head)| hash_project(tape, f, head))
            .collect::<Result<Vec<_>>>()?;
        Ok(HashVectorIds { global, locals })
    }
}

/// Reads the value form of hash vectors off a tape.
pub fn hash_values(tape: &Tape, ids: &HashVectorIds) -> HashVectorSet {
    HashVectorSet {
        global: tape.data(ids.global).to_vec(),
        locals: ids.locals.iter().map(|&l| tape.data(l).to_vec()).collect(),
    }
}

/// Mean absolute gap between entry magnitudes and 1 over all streams.
pub fn quantization_gap(sets: &[HashVectorSet]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for set in sets {
        for v in set.concatenated() {
            total += (v.abs() - 1.0).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
