//! Dialogue utterance encoding and the schema-agnostic node embedding
//! initializer, behind one contract with two implementations:
//!
//! * a small trainable encoder (hashed token embeddings + sinusoidal
//!   positions + one self-attention block) that runs offline and fast, and
//! * an adapter that serves contextual embeddings precomputed by an external
//!   pretrained encoder from a cache directory (`DSGF_CACHE`). The adapter's
//!   features are frozen constants in the computation graph.
//!
//! Neither path carries any schema- or domain-specific parameters: node
//! embeddings are functions of description text alone, which is what lets an
//! unseen domain flow through the same code path without reshaping anything.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{DsgfError, Result};
use crate::nn::{glorot, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Hash-bucket count of the trainable token embedding table.
pub const TOKEN_HASH_BUCKETS: usize = 2048;

/// Descriptions are truncated to this many tokens before encoding.
pub const DESCRIPTION_MAX_TOKENS: usize = 64;

/// Contextual token embeddings for one sequence. Row 0 is the class vector.
#[derive(Debug, Clone)]
pub struct TokenEmbeddings {
    pub matrix: Tensor,
    pub mask: Vec<bool>,
}

impl TokenEmbeddings {
    pub fn class_vector(&self) -> &[f64] {
        self.matrix.row(0)
    }

    pub fn seq_len(&self) -> usize {
        self.matrix.rows()
    }
}

/// One row per schema node, in schema graph node order.
#[derive(Debug, Clone)]
pub struct NodeInitEmbeddings {
    pub matrix: Tensor,
}

/// FNV-1a bucket for a token string. Stable across runs and platforms.
pub fn token_bucket(token: &str) -> usize {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (hash % TOKEN_HASH_BUCKETS as u64) as usize
}

/// Fixed sinusoidal position encodings, K x d.
pub fn sinusoidal_positions(k: usize, d: usize) -> Tensor {
    assert!(d % 2 == 0, "position encoding needs an even width");
    Tensor::from_fn(k, d, |pos, dim| {
        let i = (dim / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if dim % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Parameter ids of one trainable encoder instance.
#[derive(Debug, Clone, Copy)]
pub struct ToyEncoderIds {
    pub embed: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl ToyEncoderIds {
    pub fn create(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        ToyEncoderIds {
            embed: store.add(
                &format!("{prefix}.embed"),
                glorot(TOKEN_HASH_BUCKETS, d, rng),
            ),
            wq: store.add(&format!("{prefix}.wq"), glorot(d, d, rng)),
            wk: store.add(&format!("{prefix}.wk"), glorot(d, d, rng)),
            wv: store.add(&format!("{prefix}.wv"), glorot(d, d, rng)),
            wo: store.add(&format!("{prefix}.wo"), glorot(d, d, rng)),
        }
    }

    pub fn vars(&self, param_vars: &[Var]) -> ToyEncoderVars {
        ToyEncoderVars {
            embed: param_vars[self.embed.0],
            wq: param_vars[self.wq.0],
            wk: param_vars[self.wk.0],
            wv: param_vars[self.wv.0],
            wo: param_vars[self.wo.0],
        }
    }
}

/// Graph handles of one trainable encoder instance.
#[derive(Debug, Clone, Copy)]
pub struct ToyEncoderVars {
    pub embed: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Hashed embedding lookup + positions + one self-attention block with a
/// residual connection. Returns the K x d contextual token matrix.
///
/// Embeddings are scaled by sqrt(d) before the position encodings are added,
/// so token content and position carry comparable magnitude.
pub fn toy_encode(g: &mut Graph, vars: &ToyEncoderVars, tokens: &[String], d: usize) -> Var {
    assert!(!tokens.is_empty(), "cannot encode an empty token sequence");
    let ids: Vec<usize> = tokens.iter().map(|t| token_bucket(t)).collect();
    let raw = g.gather_rows(vars.embed, ids);
    let e = g.scale(raw, (d as f64).sqrt());
    let pos = g.leaf(sinusoidal_positions(tokens.len(), d));
    let x = g.add(e, pos);
    let q = g.matmul(x, vars.wq);
    let k = g.matmul(x, vars.wk);
    let v = g.matmul(x, vars.wv);
    let kt = g.transpose(k);
    let raw = g.matmul(q, kt);
    let scores = g.scale(raw, 1.0 / (d as f64).sqrt());
    let alpha = g.softmax_rows(scores);
    let ctx = g.matmul(alpha, v);
    let proj = g.matmul(ctx, vars.wo);
    g.add(x, proj)
}

/// The encoder implementation behind the contract.
#[derive(Debug)]
pub enum EncoderImpl {
    Toy { ids: ToyEncoderIds, d: usize },
    Pretrained { cache: PretrainedCache, d: usize },
}

impl EncoderImpl {
    pub fn width(&self) -> usize {
        match self {
            EncoderImpl::Toy { d, .. } | EncoderImpl::Pretrained { d, .. } => *d,
        }
    }

    /// Insert the encoding of `tokens` into the graph. The toy path is
    /// trainable; the pretrained path inserts frozen cached features.
    pub fn encode(&self, g: &mut Graph, param_vars: &[Var], tokens: &[String]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(DsgfError::Shape("empty token sequence".to_string()));
        }
        match self {
            EncoderImpl::Toy { ids, d } => Ok(toy_encode(g, &ids.vars(param_vars), tokens, *d)),
            EncoderImpl::Pretrained { cache, d } => {
                let matrix = cache.lookup(tokens)?;
                if matrix.rows() != tokens.len() || matrix.cols() != *d {
                    return Err(DsgfError::Shape(format!(
                        "cached embeddings are {}x{}, expected {}x{}",
                        matrix.rows(),
                        matrix.cols(),
                        tokens.len(),
                        d
                    )));
                }
                Ok(g.leaf(matrix))
            }
        }
    }
}

/// Serves embeddings precomputed by an external pretrained encoder.
///
/// Files live under the cache directory, one JSON tensor per token sequence,
/// keyed by a content hash. Populate the cache offline; a miss is an error
/// telling the user what to precompute.
#[derive(Debug, Clone)]
pub struct PretrainedCache {
    dir: PathBuf,
}

impl PretrainedCache {
    pub fn new(dir: &Path) -> Self {
        PretrainedCache {
            dir: dir.to_path_buf(),
        }
    }

    /// Cache location from the `DSGF_CACHE` environment variable.
    pub fn from_env() -> Result<Self> {
        let dir = std::env::var("DSGF_CACHE").map_err(|_| {
            DsgfError::Config(
                "encoder.kind = pretrained needs DSGF_CACHE to point at the embedding cache"
                    .to_string(),
            )
        })?;
        Ok(PretrainedCache::new(Path::new(&dir)))
    }

    pub fn cache_key(tokens: &[String]) -> String {
        let mut h = Sha256::new();
        for t in tokens {
            h.update(t.as_bytes());
            h.update([1u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path_for(&self, tokens: &[String]) -> PathBuf {
        self.dir.join(format!("{}.json", Self::cache_key(tokens)))
    }

    pub fn lookup(&self, tokens: &[String]) -> Result<Tensor> {
        let path = self.path_for(tokens);
        let text = std::fs::read_to_string(&path).map_err(|_| {
            DsgfError::CacheMiss(format!(
                "no cached embedding for key {} under {} (set DSGF_CACHE and precompute \
                 embeddings for this sequence)",
                Self::cache_key(tokens),
                self.dir.display()
            ))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn store(&self, tokens: &[String], matrix: &Tensor) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(self.path_for(tokens), serde_json::to_string(matrix)?)?;
        Ok(())
    }
}

/// Class-marker-prefixed, truncated token sequence for a description text.
pub fn description_tokens(description: &str) -> Vec<String> {
    let mut toks = vec![crate::corpus::CLASS_MARKER.to_string()];
    toks.extend(
        crate::corpus::tokenize(description)
            .into_iter()
            .take(DESCRIPTION_MAX_TOKENS),
    );
    toks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::register_params;

    fn build(d: usize, seed: u64) -> (ParamStore, ToyEncoderIds) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let ids = ToyEncoderIds::create(&mut store, "enc", d, &mut rng);
        (store, ids)
    }

    fn encode(store: &ParamStore, ids: ToyEncoderIds, tokens: &[&str], d: usize) -> Tensor {
        let tokens: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        let mut g = Graph::new();
        let pv = register_params(&mut g, store);
        let out = toy_encode(&mut g, &ids.vars(&pv), &tokens, d);
        g.value(out).clone()
    }

    #[test]
    fn class_marker_only_gives_one_row() {
        let (store, ids) = build(8, 3);
        let out = encode(&store, ids, &["[cls]"], 8);
        assert_eq!(out.shape(), &[1, 8]);
    }

    #[test]
    fn eval_mode_is_bitwise_idempotent() {
        let (store, ids) = build(8, 4);
        let a = encode(&store, ids, &["[cls]", "book", "a", "ride"], 8);
        let b = encode(&store, ids, &["[cls]", "book", "a", "ride"], 8);
        assert_eq!(a, b);
    }

    #[test]
    fn token_bucket_is_stable() {
        assert_eq!(token_bucket("ride"), token_bucket("ride"));
        assert!(token_bucket("ride") < TOKEN_HASH_BUCKETS);
        assert_ne!(token_bucket("ride"), token_bucket("rides"));
    }

    #[test]
    fn positions_alternate_sin_cos() {
        let p = sinusoidal_positions(3, 4);
        assert_eq!(p.at(0, 0), 0.0);
        assert_eq!(p.at(0, 1), 1.0);
        assert!((p.at(1, 0) - 1f64.sin()).abs() < 1e-12);
        assert!((p.at(1, 1) - 1f64.cos()).abs() < 1e-12);
    }

    // Independent forward pass with plain scalar loops over the same
    // parameters.
    #[test]
    fn golden_forward_matches_scalar_reference() {
        let d = 4;
        let (store, ids) = build(d, 9);
        let tokens = ["[cls]", "what", "is", "the", "weather"];
        let got = encode(&store, ids, &tokens, d);

        let embed = store.get(ids.embed);
        let wq = store.get(ids.wq);
        let wk = store.get(ids.wk);
        let wv = store.get(ids.wv);
        let wo = store.get(ids.wo);
        let k = tokens.len();
        let pos = sinusoidal_positions(k, d);
        let mut x = vec![vec![0.0f64; d]; k];
        for (i, t) in tokens.iter().enumerate() {
            let b = token_bucket(t);
            for j in 0..d {
                x[i][j] = embed.at(b, j) * (d as f64).sqrt() + pos.at(i, j);
            }
        }
        let project = |w: &Tensor, row: &[f64]| -> Vec<f64> {
            (0..w.cols())
                .map(|c| (0..d).map(|r| row[r] * w.at(r, c)).sum())
                .collect::<Vec<f64>>()
        };
        let q: Vec<Vec<f64>> = x.iter().map(|r| project(wq, r)).collect();
        let kk: Vec<Vec<f64>> = x.iter().map(|r| project(wk, r)).collect();
        let v: Vec<Vec<f64>> = x.iter().map(|r| project(wv, r)).collect();
        for i in 0..k {
            let scores: Vec<f64> = (0..k)
                .map(|j| (0..d).map(|c| q[i][c] * kk[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut ctx = vec![0.0f64; d];
            for j in 0..k {
                for c in 0..d {
                    ctx[c] += exps[j] / z * v[j][c];
                }
            }
            let out_row = project(wo, &ctx);
            for c in 0..d {
                let expect = x[i][c] + out_row[c];
                let rel =
                    (got.at(i, c) - expect).abs() / got.at(i, c).abs().max(expect.abs()).max(1e-9);
                assert!(rel < 1e-12, "row {i} col {c}: {} vs {expect}", got.at(i, c));
            }
        }
    }

    #[test]
    fn pretrained_cache_roundtrip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = PretrainedCache::new(dir.path());
        let tokens: Vec<String> = ["[cls]", "hello"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(cache.lookup(&tokens), Err(DsgfError::CacheMiss(_))));
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        cache.store(&tokens, &m).unwrap();
        assert_eq!(cache.lookup(&tokens).unwrap(), m);
    }

    #[test]
    fn description_tokens_truncate() {
        let long = (0..100)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        let toks = description_tokens(&long);
        assert_eq!(toks.len(), DESCRIPTION_MAX_TOKENS + 1);
        assert_eq!(toks[0], crate::corpus::CLASS_MARKER);
    }
}
