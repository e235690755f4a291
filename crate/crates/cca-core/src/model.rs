//! The conditional cross-attention model.
//!
//! Layers 1..L-1 are a standard pre-norm ViT encoder over patch tokens; the
//! final layer replaces token-derived queries with a condition-derived query,
//! so the class-token output lives in a per-condition embedding space. The
//! ablation arms (mask baseline, unconditioned) run the full-depth encoder
//! instead and differ only after the class token is read out.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::config::{ConditionId, EmbedType, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Binder, ParamGrads, ParamId, ParamStore};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const EMBED_L2_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
struct LnParams {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfnParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln1: LnParams,
    attn: AttnParams,
    ln2: LnParams,
    ffn: FfnParams,
}

#[derive(Debug)]
struct Backbone {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
}

#[derive(Debug)]
enum CondModule {
    Type1 { w: ParamId, b: ParamId },
    Type2 { mask: ParamId, w: ParamId, b: ParamId },
    MaskTable { mask: ParamId },
    None,
}

#[derive(Debug)]
struct CrossAttnHead {
    ln_kv: LnParams,
    attn: AttnParams,
    ln2: LnParams,
    ffn: FfnParams,
}

pub struct CcaModel {
    pub config: EncoderConfig,
    pub store: ParamStore,
    backbone: Backbone,
    head: Option<CrossAttnHead>,
    cond: CondModule,
    out_w: ParamId,
    out_b: ParamId,
    backbone_calls: AtomicU64,
}

/// One forward pass: a fresh tape plus the parameter bindings made on it.
pub struct Forward {
    pub tape: Tape,
    binder: Binder,
}

impl Forward {
    pub fn collect_grads(&self, model: &CcaModel) -> ParamGrads {
        ParamGrads::collect(&self.tape, &self.binder, &model.store)
    }

    pub fn bind(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        self.binder.bind(&mut self.tape, store, id)
    }
}

pub struct MsaOut {
    pub out: TensorId,
    /// Per-head attention weight matrices, row-stochastic.
    pub attn: Vec<TensorId>,
}

pub struct CcaOut {
    pub out: TensorId,
    /// Attention output after the output projection, before the residual.
    pub pre_residual: TensorId,
    pub attn: Vec<TensorId>,
}

pub struct BackboneOut {
    pub tokens: TensorId,
    /// Attention matrices of the deepest self-attention layer.
    pub last_attn: Vec<TensorId>,
}

pub struct EmbedOut {
    /// Unit-norm embedding, shape [1 × out_dim].
    pub embedding: TensorId,
    /// Class-row attention over the 1+N token positions, averaged over heads.
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub condition: ConditionId,
    pub vector: Vec<f64>,
    pub attention: Vec<f64>,
}

/// Learnable-value count of the conditional token-embedding module.
pub fn conditional_param_closed_form(embed_type: EmbedType, k: usize, d: usize) -> usize {
    match embed_type {
        EmbedType::Type1 => k * d + d,
        EmbedType::Type2 => k * d + d * d + d,
        EmbedType::MaskBaseline => k * d,
        EmbedType::Unconditioned => 0,
    }
}

fn init_weight(
    store: &mut ParamStore,
    name: String,
    shape: Vec<usize>,
    cfg: &EncoderConfig,
    std: f64,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    let mut t = trunc_normal(shape, std, rng);
    t.quantize(cfg.precision);
    store.add(name, t)
}

impl CcaModel {
    /// Build a freshly initialized model. Weights are truncated-normal
    /// (std 0.02), biases zero, layernorm affine identity.
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::init_with_std(config, rng, INIT_STD)
    }

    /// Initialization with a custom weight std. The gradient checker uses a
    /// larger std so the check point is well-conditioned; training always
    /// uses [`CcaModel::init`].
    pub fn init_with_std(config: EncoderConfig, rng: &mut impl Rng, std: f64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut store = ParamStore::new();

        let patch_w = init_weight(
            &mut store,
            "backbone.patch.weight".into(),
            vec![config.patch_dim(), d],
            &config,
            std,
            rng,
        )?;
        let patch_b = store.add("backbone.patch.bias", Tensor::zeros(vec![1, d]))?;
        let cls = init_weight(&mut store, "backbone.cls".into(), vec![1, d], &config, std, rng)?;
        let pos = init_weight(
            &mut store,
            "backbone.pos".into(),
            vec![config.seq_len(), d],
            &config,
            std,
            rng,
        )?;

        let backbone_depth = if config.embed_type.uses_cross_attention() {
            config.depth - 1
        } else {
            config.depth
        };

        fn add_ln(store: &mut ParamStore, prefix: &str, d: usize) -> Result<LnParams> {
            Ok(LnParams {
                gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(vec![d]))?,
                beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![d]))?,
            })
        }
        fn add_attn(
            store: &mut ParamStore,
            prefix: &str,
            cfg: &EncoderConfig,
            std: f64,
            rng: &mut impl Rng,
        ) -> Result<AttnParams> {
            let d = cfg.dim;
            Ok(AttnParams {
                wq: init_weight(store, format!("{prefix}.wq"), vec![d, d], cfg, std, rng)?,
                bq: store.add(format!("{prefix}.bq"), Tensor::zeros(vec![1, d]))?,
                wk: init_weight(store, format!("{prefix}.wk"), vec![d, d], cfg, std, rng)?,
                bk: store.add(format!("{prefix}.bk"), Tensor::zeros(vec![1, d]))?,
                wv: init_weight(store, format!("{prefix}.wv"), vec![d, d], cfg, std, rng)?,
                bv: store.add(format!("{prefix}.bv"), Tensor::zeros(vec![1, d]))?,
                wo: init_weight(store, format!("{prefix}.wo"), vec![d, d], cfg, std, rng)?,
                bo: store.add(format!("{prefix}.bo"), Tensor::zeros(vec![1, d]))?,
            })
        }
        fn add_ffn(
            store: &mut ParamStore,
            prefix: &str,
            cfg: &EncoderConfig,
            std: f64,
            rng: &mut impl Rng,
        ) -> Result<FfnParams> {
            let d = cfg.dim;
            Ok(FfnParams {
                w1: init_weight(store, format!("{prefix}.w1"), vec![d, cfg.ffn_hidden], cfg, std, rng)?,
                b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![1, cfg.ffn_hidden]))?,
                w2: init_weight(store, format!("{prefix}.w2"), vec![cfg.ffn_hidden, d], cfg, std, rng)?,
                b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![1, d]))?,
            })
        }

        let mut layers = Vec::with_capacity(backbone_depth);
        for l in 0..backbone_depth {
            let prefix = format!("backbone.layer{l}");
            layers.push(EncoderLayer {
                ln1: add_ln(&mut store, &format!("{prefix}.ln1"), d)?,
                attn: add_attn(&mut store, &format!("{prefix}.attn"), &config, std, rng)?,
                ln2: add_ln(&mut store, &format!("{prefix}.ln2"), d)?,
                ffn: add_ffn(&mut store, &format!("{prefix}.ffn"), &config, std, rng)?,
            });
        }

        let head = if config.embed_type.uses_cross_attention() {
            Some(CrossAttnHead {
                ln_kv: add_ln(&mut store, "head.ln_kv", d)?,
                attn: add_attn(&mut store, "head.attn", &config, std, rng)?,
                ln2: add_ln(&mut store, "head.ln2", d)?,
                ffn: add_ffn(&mut store, "head.ffn", &config, std, rng)?,
            })
        } else {
            None
        };

        let k = config.num_conditions;
        let cond = match config.embed_type {
            EmbedType::Type1 => CondModule::Type1 {
                w: init_weight(&mut store, "cond.fc.weight".into(), vec![k, d], &config, std, rng)?,
                b: store.add("cond.fc.bias", Tensor::zeros(vec![1, d]))?,
            },
            EmbedType::Type2 => CondModule::Type2 {
                mask: init_weight(&mut store, "cond.mask".into(), vec![k, d], &config, std, rng)?,
                w: init_weight(&mut store, "cond.fc.weight".into(), vec![d, d], &config, std, rng)?,
                b: store.add("cond.fc.bias", Tensor::zeros(vec![1, d]))?,
            },
            EmbedType::MaskBaseline => CondModule::MaskTable {
                mask: init_weight(&mut store, "cond.mask".into(), vec![k, d], &config, std, rng)?,
            },
            EmbedType::Unconditioned => CondModule::None,
        };

        let out_w = init_weight(
            &mut store,
            "head.out.weight".into(),
            vec![d, config.out_dim],
            &config,
            std,
            rng,
        )?;
        let out_b = store.add("head.out.bias", Tensor::zeros(vec![1, config.out_dim]))?;

        Ok(CcaModel {
            config,
            store,
            backbone: Backbone {
                patch_w,
                patch_b,
                cls,
                pos,
                layers,
            },
            head,
            cond,
            out_w,
            out_b,
            backbone_calls: AtomicU64::new(0),
        })
    }

    pub fn begin(&self) -> Forward {
        Forward {
            tape: Tape::new(self.config.precision),
            binder: Binder::new(&self.store),
        }
    }

    pub fn backbone_layer_count(&self) -> usize {
        self.backbone.layers.len()
    }

    pub fn backbone_call_count(&self) -> u64 {
        self.backbone_calls.load(Ordering::Relaxed)
    }

    pub fn reset_backbone_call_count(&self) {
        self.backbone_calls.store(0, Ordering::Relaxed);
    }

    /// Learnable values in the conditional token-embedding module.
    pub fn conditional_param_count(&self) -> usize {
        let count = |id: ParamId| self.store.get(id).tensor.numel();
        match &self.cond {
            CondModule::Type1 { w, b } => count(*w) + count(*b),
            CondModule::Type2 { mask, w, b } => count(*mask) + count(*w) + count(*b),
            CondModule::MaskTable { mask } => count(*mask),
            CondModule::None => 0,
        }
    }

    fn p(&self, f: &mut Forward, id: ParamId) -> TensorId {
        f.binder.bind(&mut f.tape, &self.store, id)
    }

    fn linear(&self, f: &mut Forward, x: TensorId, w: ParamId, b: ParamId) -> Result<TensorId> {
        let wt = self.p(f, w);
        let bt = self.p(f, b);
        let out = f.tape.matmul(x, wt)?;
        f.tape.add_row(out, bt)
    }

    // ── backbone ─────────────────────────────────────────────────────

    /// Flatten non-overlapping patches of a [C, H, W] image into the rows of
    /// an [N × C·P·P] matrix. Patches are traversed row-major; within each
    /// patch the layout is channel-major, then row-major.
    pub fn patch_matrix(&self, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let expected = [cfg.channels, cfg.image_size, cfg.image_size];
        if image.shape() != expected {
            return Err(Error::Config(format!(
                "image shape {:?} does not match configured {:?}",
                image.shape(),
                expected
            )));
        }
        let p = cfg.patch_size;
        let side = cfg.image_size / p;
        let (c, h, w) = (cfg.channels, cfg.image_size, cfg.image_size);
        let src = image.data();
        let row_len = cfg.patch_dim();
        let mut out = vec![0.0; cfg.num_patches() * row_len];
        for pr in 0..side {
            for pc in 0..side {
                let base = (pr * side + pc) * row_len;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let img_idx = ch * h * w + (pr * p + dy) * w + (pc * p + dx);
                            out[base + ch * p * p + dy * p + dx] = src[img_idx];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![cfg.num_patches(), row_len], out)
    }

    /// Patch projection, class token, positional embedding: the [(1+N) × D]
    /// input sequence.
    pub fn patch_embed(&self, f: &mut Forward, image: &Tensor) -> Result<TensorId> {
        let patches = self.patch_matrix(image)?;
        let patches = f.tape.leaf(&patches);
        let projected = self.linear(f, patches, self.backbone.patch_w, self.backbone.patch_b)?;
        let cls = self.p(f, self.backbone.cls);
        let seq = f.tape.concat_rows(&[cls, projected])?;
        let pos = self.p(f, self.backbone.pos);
        f.tape.add(seq, pos)
    }

    fn multi_head_attention(
        &self,
        f: &mut Forward,
        attn: &AttnParams,
        q_src: TensorId,
        kv_src: TensorId,
    ) -> Result<MsaOut> {
        let heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let q = self.linear(f, q_src, attn.wq, attn.bq)?;
        let k = self.linear(f, kv_src, attn.wk, attn.bk)?;
        let v = self.linear(f, kv_src, attn.wv, attn.bv)?;
        let mut head_outs = Vec::with_capacity(heads);
        let mut attn_mats = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = f.tape.slice_cols(q, lo, hi)?;
            let kh = f.tape.slice_cols(k, lo, hi)?;
            let vh = f.tape.slice_cols(v, lo, hi)?;
            let kt = f.tape.transpose(kh)?;
            let logits = f.tape.matmul(qh, kt)?;
            let scaled = f.tape.scale(logits, scale)?;
            let weights = f.tape.softmax(scaled, 1)?;
            attn_mats.push(weights);
            head_outs.push(f.tape.matmul(weights, vh)?);
        }
        let merged = f.tape.concat_cols(&head_outs)?;
        let out = self.linear(f, merged, attn.wo, attn.bo)?;
        Ok(MsaOut {
            out,
            attn: attn_mats,
        })
    }

    /// Multi-head self-attention of backbone layer `layer` (no layernorm,
    /// no residual).
    pub fn msa_forward(&self, f: &mut Forward, layer: usize, x: TensorId) -> Result<MsaOut> {
        let lp = self.backbone.layers[layer];
        self.multi_head_attention(f, &lp.attn, x, x)
    }

    fn ffn(&self, f: &mut Forward, ffn: &FfnParams, ln: LnParams, x: TensorId) -> Result<TensorId> {
        let gamma = self.p(f, ln.gamma);
        let beta = self.p(f, ln.beta);
        let normed = f.tape.layernorm(x, gamma, beta, LN_EPS)?;
        let hidden = self.linear(f, normed, ffn.w1, ffn.b1)?;
        let act = f.tape.gelu(hidden)?;
        self.linear(f, act, ffn.w2, ffn.b2)
    }

    /// Full pre-norm encoder layer: x + MSA(LN(x)), then + FFN(LN(·)).
    pub fn encoder_layer_forward(
        &self,
        f: &mut Forward,
        layer: usize,
        x: TensorId,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        let lp = self.backbone.layers[layer];
        let gamma = self.p(f, lp.ln1.gamma);
        let beta = self.p(f, lp.ln1.beta);
        let normed = f.tape.layernorm(x, gamma, beta, LN_EPS)?;
        let msa = self.multi_head_attention(f, &lp.attn, normed, normed)?;
        let x1 = f.tape.add(x, msa.out)?;
        let ffn_out = self.ffn(f, &lp.ffn, lp.ln2, x1)?;
        let out = f.tape.add(x1, ffn_out)?;
        Ok((out, msa.attn))
    }

    /// Tokenize and run every backbone self-attention layer. This is the
    /// shared representation; one call serves all conditions.
    pub fn backbone_forward(&self, f: &mut Forward, image: &Tensor) -> Result<BackboneOut> {
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        let mut x = self.patch_embed(f, image)?;
        let mut last_attn = Vec::new();
        for layer in 0..self.backbone.layers.len() {
            let (next, attn) = self.encoder_layer_forward(f, layer, x)?;
            x = next;
            last_attn = attn;
        }
        Ok(BackboneOut {
            tokens: x,
            last_attn,
        })
    }

    // ── conditional head ─────────────────────────────────────────────

    /// Condition-to-query map, shape [1 × D].
    pub fn condition_query(&self, f: &mut Forward, c: ConditionId) -> Result<TensorId> {
        c.validate(self.config.num_conditions)?;
        match &self.cond {
            CondModule::Type1 { w, b } => {
                let k = self.config.num_conditions;
                let mut onehot = vec![0.0; k];
                onehot[c.index()] = 1.0;
                let oh = f.tape.constant(vec![1, k], onehot)?;
                self.linear(f, oh, *w, *b)
            }
            CondModule::Type2 { mask, w, b } => {
                let table = self.p(f, *mask);
                let row = f.tape.slice_rows(table, c.index(), c.index() + 1)?;
                let act = f.tape.relu(row)?;
                self.linear(f, act, *w, *b)
            }
            _ => Err(Error::Contract(format!(
                "condition_query is not defined for embed type {}",
                self.config.embed_type.as_str()
            ))),
        }
    }

    /// Conditional cross-attention layer: queries from the tiled condition
    /// query, keys/values from the normalized backbone tokens, residual on
    /// the query side, then the usual FFN block.
    pub fn cca_layer(&self, f: &mut Forward, q_tiled: TensorId, tokens: TensorId) -> Result<CcaOut> {
        let head = self.head.as_ref().ok_or_else(|| {
            Error::Contract(format!(
                "cca_layer is not defined for embed type {}",
                self.config.embed_type.as_str()
            ))
        })?;
        let gamma = self.p(f, head.ln_kv.gamma);
        let beta = self.p(f, head.ln_kv.beta);
        let kv = f.tape.layernorm(tokens, gamma, beta, LN_EPS)?;
        let msa = self.multi_head_attention(f, &head.attn, q_tiled, kv)?;
        let x1 = f.tape.add(q_tiled, msa.out)?;
        let ffn_out = self.ffn(f, &head.ffn, head.ln2, x1)?;
        let out = f.tape.add(x1, ffn_out)?;
        Ok(CcaOut {
            out,
            pre_residual: msa.out,
            attn: msa.attn,
        })
    }

    /// Take the class row, project to the output width, L2-normalize.
    pub fn final_embedding(&self, f: &mut Forward, x: TensorId) -> Result<TensorId> {
        let row = f.tape.slice_rows(x, 0, 1)?;
        let projected = self.linear(f, row, self.out_w, self.out_b)?;
        f.tape.l2_normalize(projected, EMBED_L2_EPS)
    }

    /// Head-mean class-row attention as plain values.
    fn attention_row(&self, f: &Forward, attn: &[TensorId]) -> Vec<f64> {
        if attn.is_empty() {
            return Vec::new();
        }
        let cols = f.tape.shape(attn[0])[1];
        let mut row = vec![0.0; cols];
        for &a in attn {
            for (acc, &w) in row.iter_mut().zip(&f.tape.data(a)[..cols]) {
                *acc += w;
            }
        }
        let inv = 1.0 / attn.len() as f64;
        for v in &mut row {
            *v *= inv;
        }
        row
    }

    /// Continue from backbone tokens to the final embedding for one
    /// condition. `tile` is the query repetition count for the
    /// cross-attention variants; row 0 is always the class row.
    pub fn embed_from_tokens(
        &self,
        f: &mut Forward,
        tokens: TensorId,
        backbone_attn: &[TensorId],
        c: ConditionId,
        tile: usize,
    ) -> Result<EmbedOut> {
        c.validate(self.config.num_conditions)?;
        match self.config.embed_type {
            EmbedType::Type1 | EmbedType::Type2 => {
                let q = self.condition_query(f, c)?;
                let tiled = tile_query(&mut f.tape, q, tile)?;
                let cca = self.cca_layer(f, tiled, tokens)?;
                let attention = self.attention_row(f, &cca.attn);
                let embedding = self.final_embedding(f, cca.out)?;
                Ok(EmbedOut {
                    embedding,
                    attention,
                })
            }
            EmbedType::MaskBaseline => {
                let CondModule::MaskTable { mask } = &self.cond else {
                    unreachable!("mask baseline always has a mask table")
                };
                let mask = *mask;
                let cls = f.tape.slice_rows(tokens, 0, 1)?;
                let table = self.p(f, mask);
                let row = f.tape.slice_rows(table, c.index(), c.index() + 1)?;
                let masked = f.tape.mul(cls, row)?;
                let attention = self.attention_row(f, backbone_attn);
                let embedding = self.final_embedding(f, masked)?;
                Ok(EmbedOut {
                    embedding,
                    attention,
                })
            }
            EmbedType::Unconditioned => {
                let cls = f.tape.slice_rows(tokens, 0, 1)?;
                let attention = self.attention_row(f, backbone_attn);
                let embedding = self.final_embedding(f, cls)?;
                Ok(EmbedOut {
                    embedding,
                    attention,
                })
            }
        }
    }

    /// Full pass: backbone plus the conditional head, on one tape. Used in
    /// training, where gradients must flow through the backbone.
    pub fn embed_with_condition(
        &self,
        f: &mut Forward,
        image: &Tensor,
        c: ConditionId,
        tile: usize,
    ) -> Result<EmbedOut> {
        let bb = self.backbone_forward(f, image)?;
        self.embed_from_tokens(f, bb.tokens, &bb.last_attn, c, tile)
    }

    /// Inference over every condition with a single backbone execution. The
    /// per-condition results are bitwise identical to independent full
    /// passes because the cached token values re-enter the head unchanged.
    pub fn embed_all_conditions(&self, image: &Tensor) -> Result<Vec<ConditionEmbedding>> {
        let mut bf = self.begin();
        let bb = self.backbone_forward(&mut bf, image)?;
        let tokens = bf.tape.to_tensor(bb.tokens);
        let backbone_attn: Vec<Tensor> = bb.last_attn.iter().map(|&a| bf.tape.to_tensor(a)).collect();
        drop(bf);

        let mut out = Vec::with_capacity(self.config.num_conditions);
        for c in 0..self.config.num_conditions {
            let c = ConditionId(c as u32);
            let mut f = self.begin();
            let tok = f.tape.leaf(&tokens);
            let attn_ids: Vec<TensorId> = backbone_attn.iter().map(|t| f.tape.leaf(t)).collect();
            let emb = self.embed_from_tokens(&mut f, tok, &attn_ids, c, 1)?;
            out.push(ConditionEmbedding {
                condition: c,
                vector: f.tape.data(emb.embedding).to_vec(),
                attention: emb.attention,
            });
        }
        Ok(out)
    }
}

/// Repeat a [1 × D] query into T identical rows.
pub fn tile_query(tape: &mut Tape, q: TensorId, t: usize) -> Result<TensorId> {
    if t == 0 {
        return Err(Error::Contract("query tile count must be at least 1".into()));
    }
    if t == 1 {
        return Ok(q);
    }
    let parts = vec![q; t];
    tape.concat_rows(&parts)
}
