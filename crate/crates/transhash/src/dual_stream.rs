//! Dual-stream feature learning: the final transformer layer split into a
//! global branch over the full sequence and a local branch over K token
//! groups, each stream feeding its own hash projection.
//!
//! The local block is one parameter set run K times; the global and local
//! branches share nothing with each other.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{block_forward, trunc_normal, BackboneConfig, BoundBlock, EncoderBlock};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Minimum width of a local hash vector; narrower configurations do not
/// converge and are rejected outright.
pub const MIN_LOCAL_BITS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DualStreamConfig {
    /// Number of local token groups K.
    pub num_groups: usize,
    /// Total retrieval code length B.
    pub hash_bits: usize,
    /// Input feature width M (equals the backbone embed dim).
    pub feature_dim: usize,
}

impl Default for DualStreamConfig {
    fn default() -> Self {
        DualStreamConfig {
            num_groups: 2,
            hash_bits: 16,
            feature_dim: 32,
        }
    }
}

impl DualStreamConfig {
    /// Width of the global hash vector (B/2).
    pub fn global_bits(&self) -> usize {
        self.hash_bits / 2
    }

    /// Width of each local hash vector (B/(2K)).
    pub fn local_bits(&self) -> usize {
        self.hash_bits / (2 * self.num_groups)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 {
            return Err(Error::config("dual_stream.num_groups must be at least 1"));
        }
        if self.hash_bits == 0 || !self.hash_bits.is_multiple_of(2) {
            return Err(Error::config(format!(
                "dual_stream.hash_bits must be a positive even number, got {}",
                self.hash_bits
            )));
        }
        let half = self.hash_bits / 2;
        if !half.is_multiple_of(self.num_groups) {
            return Err(Error::config(format!(
                "dual_stream: local hash width {half}/{} is not an integer \
                 (hash_bits {}, num_groups {})",
                self.num_groups, self.hash_bits, self.num_groups
            )));
        }
        if self.local_bits() < MIN_LOCAL_BITS {
            return Err(Error::config(format!(
                "dual_stream: local hash vectors of {} bits (hash_bits {} / (2 * {} groups)) \
                 are narrower than {MIN_LOCAL_BITS} bits; such models fail to converge",
                self.local_bits(),
                self.hash_bits,
                self.num_groups
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("dual_stream.feature_dim must be positive"));
        }
        Ok(())
    }

    /// Contiguous group sizes over N patch tokens: floor(N/K) each, the last
    /// group absorbing the remainder.
    pub fn group_sizes(&self, num_patches: usize) -> Result<Vec<usize>> {
        let k = self.num_groups;
        if k > num_patches {
            return Err(Error::config(format!(
                "dual_stream.num_groups {k} exceeds the number of patch tokens {num_patches}"
            )));
        }
        let base = num_patches / k;
        let mut sizes = vec![base; k];
        *sizes.last_mut().unwrap() += num_patches - base * k;
        Ok(sizes)
    }
}

/// One affine hash projection `h = f W + b`.
#[derive(Debug, Clone)]
pub struct HashHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HashHead {
    pub fn init(in_dim: usize, bits: usize, rng: &mut impl Rng) -> Self {
        HashHead {
            weight: trunc_normal(vec![in_dim, bits], 0.02, rng).with_grad(),
            bias: Tensor::zeros(vec![bits]).with_grad(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub weight: TensorId,
    pub bias: TensorId,
}

impl HashHead {
    pub fn bind(&self, tape: &mut Tape) -> BoundHead {
        BoundHead {
            weight: tape.leaf_from(&self.weight),
            bias: tape.leaf_from(&self.bias),
        }
    }
}

/// All parameters of the dual-stream layer.
#[derive(Debug, Clone)]
pub struct DualStreamParams {
    pub global_block: EncoderBlock,
    pub local_block: EncoderBlock,
    pub global_head: HashHead,
    pub local_heads: Vec<HashHead>,
}

impl DualStreamParams {
    pub fn init(backbone: &BackboneConfig, cfg: &DualStreamConfig, rng: &mut impl Rng) -> Self {
        DualStreamParams {
            global_block: EncoderBlock::init(backbone, rng),
            local_block: EncoderBlock::init(backbone, rng),
            global_head: HashHead::init(cfg.feature_dim, cfg.global_bits(), rng),
            local_heads: (0..cfg.num_groups)
                .map(|_| HashHead::init(cfg.feature_dim, cfg.local_bits(), rng))
                .collect(),
        }
    }
}

/// Continuous hash vectors of one image on a tape: global `[1, B/2]` plus K
/// locals `[1, B/(2K)]`.
#[derive(Debug, Clone)]
pub struct HashVectorIds {
    pub global: TensorId,
    pub locals: Vec<TensorId>,
}

/// Value-form hash vectors (off-tape), e.g. at encoding time.
#[derive(Debug, Clone, PartialEq)]
pub struct HashVectorSet {
    pub global: Vec<f64>,
    pub locals: Vec<Vec<f64>>,
}

impl HashVectorSet {
    /// Total length B = |global| + sum of local lengths.
    pub fn total_bits(&self) -> usize {
        self.global.len() + self.locals.iter().map(Vec::len).sum::<usize>()
    }

    /// Concatenation in code order: global first, then locals 1..K.
    pub fn concatenated(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_bits());
        out.extend_from_slice(&self.global);
        for l in &self.locals {
            out.extend_from_slice(l);
        }
        out
    }
}

/// Runs the global block over the full sequence and returns the class-token
/// output as the global feature `[1, D]`.
pub fn global_branch(
    tape: &mut Tape,
    z_prev: TensorId,
    block: &BoundBlock,
    num_heads: usize,
) -> Result<TensorId> {
    let out = block_forward(tape, z_prev, block, num_heads)?;
    tape.slice(out, 0, 0, 1)
}

/// Splits patch tokens into K contiguous groups, prepends the shared class
/// token to each, and runs every group through the single local block.
///
/// Returns the K class-token outputs, each `[1, D]`.
pub fn local_branch(
    tape: &mut Tape,
    z_prev: TensorId,
    block: &BoundBlock,
    cfg: &DualStreamConfig,
    num_heads: usize,
) -> Result<Vec<TensorId>> {
    let rows = tape.shape(z_prev)[0];
    let num_patches = rows - 1;
    let sizes = cfg.group_sizes(num_patches)?;

    let class = tape.slice(z_prev, 0, 0, 1)?;
    let mut features = Vec::with_capacity(cfg.num_groups);
    let mut start = 1;
    for len in sizes {
        let group = tape.slice(z_prev, 0, start, len)?;
        let seq = tape.concat(&[class, group], 0)?;
        let out = block_forward(tape, seq, block, num_heads)?;
        features.push(tape.slice(out, 0, 0, 1)?);
        start += len;
    }
    Ok(features)
}

/// Affine hash projection of a `[1, M]` feature.
pub fn hash_project(tape: &mut Tape, feature: TensorId, head: &BoundHead) -> Result<TensorId> {
    let out = tape.matmul(feature, head.weight)?;
    tape.add_row(out, head.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_backbone() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 2,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            ..BackboneConfig::default()
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn config_accepts_paper_shape_and_rejects_narrow_locals() {
        let ok = DualStreamConfig {
            num_groups: 2,
            hash_bits: 64,
            feature_dim: 32,
        };
        assert!(ok.validate().is_ok());
        assert_eq!(ok.global_bits(), 32);
        assert_eq!(ok.local_bits(), 16);

        // 16 bits over 3 groups: 16/6 not integral
        let bad = DualStreamConfig {
            num_groups: 3,
            hash_bits: 16,
            feature_dim: 32,
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("not an integer"), "{msg}");

        // 16 bits over 2 groups is the narrowest legal local width (4)
        assert!(DualStreamConfig {
            num_groups: 2,
            hash_bits: 16,
            feature_dim: 32
        }
        .validate()
        .is_ok());

        // 8 bits over 1 group: local width 4, fine; over 2: width 2, rejected
        assert!(DualStreamConfig { num_groups: 1, hash_bits: 8, feature_dim: 32 }
            .validate()
            .is_ok());
        let msg = DualStreamConfig { num_groups: 2, hash_bits: 8, feature_dim: 32 }
            .validate()
            .unwrap_err()
            .to_string();
        assert!(msg.contains("fail to converge"), "{msg}");
    }

    #[test]
    fn group_sizes_partition_tokens() {
        let cfg = DualStreamConfig { num_groups: 2, hash_bits: 16, feature_dim: 8 };
        assert_eq!(cfg.group_sizes(16).unwrap(), vec![8, 8]);
        // indivisible: last group absorbs the remainder
        assert_eq!(cfg.group_sizes(49).unwrap(), vec![24, 25]);
        let k1 = DualStreamConfig { num_groups: 1, hash_bits: 8, feature_dim: 8 };
        assert_eq!(k1.group_sizes(7).unwrap(), vec![7]);
        // more groups than tokens
        let k9 = DualStreamConfig { num_groups: 9, hash_bits: 144, feature_dim: 8 };
        assert!(k9.group_sizes(4).is_err());
    }

    #[test]
    fn global_branch_returns_token_zero_under_zeroed_projections() {
        let bc = toy_backbone();
        let mut r = rng();
        let mut blk = EncoderBlock::init(&bc, &mut r);
        blk.wo = Tensor::zeros(blk.wo.shape.clone());
        blk.bo = Tensor::zeros(blk.bo.shape.clone());
        blk.mlp_w2 = Tensor::zeros(blk.mlp_w2.shape.clone());
        blk.mlp_b2 = Tensor::zeros(blk.mlp_b2.shape.clone());
        let mut tape = Tape::new();
        let bound = blk.bind(&mut tape);
        let data: Vec<f64> = (0..5 * 8).map(|i| i as f64 * 0.1).collect();
        let z = tape.constant(data.clone(), vec![5, 8]).unwrap();
        let fg = global_branch(&mut tape, z, &bound, bc.num_heads).unwrap();
        assert_eq!(tape.shape(fg), &[1, 8]);
        assert_eq!(tape.data(fg), &data[..8]);
    }

    #[test]
    fn local_branch_covers_tokens_once_and_shares_the_block() {
        let bc = toy_backbone();
        let cfg = DualStreamConfig { num_groups: 2, hash_bits: 16, feature_dim: 8 };
        let mut r = rng();
        let blk = EncoderBlock::init(&bc, &mut r);
        let mut tape = Tape::new();
        let bound = blk.bind(&mut tape);
        let n = 16;
        let data: Vec<f64> = (0..(n + 1) * 8).map(|_| r.gen::<f64>()).collect();
        let z = tape.constant(data, vec![n + 1, 8]).unwrap();
        let before = tape.len();
        let feats = local_branch(&mut tape, z, &bound, &cfg, bc.num_heads).unwrap();
        assert_eq!(feats.len(), 2);
        for &f in &feats {
            assert_eq!(tape.shape(f), &[1, 8]);
        }
        // shared parameters: the branch registered no new leaves
        assert!(tape.len() > before);
        // degenerate K=1 equals a global-style pass over the full sequence
        let k1 = DualStreamConfig { num_groups: 1, hash_bits: 8, feature_dim: 8 };
        let f1 = local_branch(&mut tape, z, &bound, &k1, bc.num_heads).unwrap();
        let g = global_branch(&mut tape, z, &bound, bc.num_heads).unwrap();
        assert_eq!(tape.data(f1[0]), tape.data(g));
    }

    #[test]
    fn hash_projection_widths_follow_config() {
        let cfg = DualStreamConfig { num_groups: 2, hash_bits: 64, feature_dim: 8 };
        let mut r = rng();
        let params = DualStreamParams::init(&toy_backbone(), &cfg, &mut r);
        assert_eq!(params.global_head.weight.shape, vec![8, 32]);
        assert_eq!(params.local_heads.len(), 2);
        for h in &params.local_heads {
            assert_eq!(h.weight.shape, vec![8, 16]);
        }

        // zero weights leave only the bias
        let mut tape = Tape::new();
        let head = HashHead {
            weight: Tensor::zeros(vec![8, 4]),
            bias: Tensor::new(vec![0.5, -1.0, 2.0, 0.0], vec![4]).unwrap(),
        };
        let bound = head.bind(&mut tape);
        let f = tape.constant((0..8).map(|i| i as f64).collect(), vec![1, 8]).unwrap();
        let h = hash_project(&mut tape, f, &bound).unwrap();
        assert_eq!(tape.data(h), &[0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let bc = toy_backbone();
        let cfg = DualStreamConfig { num_groups: 2, hash_bits: 16, feature_dim: 8 };
        let mut r = rng();
        let gblk = EncoderBlock::init(&bc, &mut r);
        let lblk = EncoderBlock::init(&bc, &mut r);
        let ghead = HashHead::init(8, cfg.global_bits(), &mut r);
        let lhead = HashHead::init(8, cfg.local_bits(), &mut r);
        let z = Tensor::new((0..5 * 8).map(|_| r.gen::<f64>() - 0.5).collect(), vec![5, 8]).unwrap();

        let params = vec![
            z.clone(),
            gblk.wv.clone(),
            lblk.wv.clone(),
            ghead.weight.clone(),
            lhead.bias.clone(),
        ];
        check_gradients(
            "dual_stream",
            &|tape, ids| {
                let mut gb = gblk.bind(tape);
                let mut lb = lblk.bind(tape);
                let mut gh = ghead.bind(tape);
                let mut lh0 = lhead.bind(tape);
                gb.wv = ids[1];
                lb.wv = ids[2];
                gh.weight = ids[3];
                lh0.bias = ids[4];
                let fg = global_branch(tape, ids[0], &gb, bc.num_heads)?;
                let hg = hash_project(tape, fg, &gh)?;
                let fls = local_branch(tape, ids[0], &lb, &cfg, bc.num_heads)?;
                let hl = hash_project(tape, fls[0], &lh0)?;
                let both = tape.concat(&[hg, hl], 1)?;
                let sq = tape.mul(both, both)?;
                Ok(tape.sum(sq))
            },
            &params,
            1e-5,
            1e-5,
        )
        .unwrap();
    }
}
