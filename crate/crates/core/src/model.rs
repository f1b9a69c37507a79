//! Toy decoder-only transformer: frozen base, LoRA attention, MoE-LoRA FFNs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MoleError, Result};
use crate::lora::{init_adapter, FrozenLinear, LoraAdapter};
use crate::moe_ffn::{build_adapters, FfnAdapters, FlopReport, MoeFfnLayer};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{derive_seed, gaussian, Bound, ParamId, ParamStore};
use crate::routing::{BalanceState, RoutingDecision};

/// Base (frozen) architecture and its random initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_context: usize,
    /// Typical norm of an embedding row.
    pub embed_scale: f64,
    /// Splits the vocabulary into this many contiguous equal blocks whose
    /// embeddings share a block offset (0 or 1 = no blocks).
    pub embed_groups: usize,
    /// Norm of the block offset relative to the per-token part. Offsets are
    /// centred across blocks, so two blocks sit on opposite sides of the origin.
    pub embed_group_scale: f64,
    /// Multiplier on the attention output projection's init std.
    pub attn_out_scale: f64,
    /// Logits are `logit_scale · LN(h)·Eᵀ / sqrt(d)`.
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            d_ff: 256,
            layers: 4,
            heads: 4,
            max_context: 256,
            embed_scale: 1.0,
            embed_groups: 0,
            embed_group_scale: 0.0,
            attn_out_scale: 1.0,
            logit_scale: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MoleError::Config(m));
        if self.vocab == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_context == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        for (name, v) in [
            ("embed_scale", self.embed_scale),
            ("attn_out_scale", self.attn_out_scale),
            ("logit_scale", self.logit_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.embed_groups > 1 && !self.vocab.is_multiple_of(self.embed_groups) {
            return bad(format!("vocab {} not divisible by embed_groups {}", self.vocab, self.embed_groups));
        }
        if !(self.embed_group_scale.is_finite() && self.embed_group_scale >= 0.0) {
            return bad(format!("embed_group_scale must be nonnegative, got {}", self.embed_group_scale));
        }
        Ok(())
    }

    fn embedding(&self) -> Tensor {
        let (v, d) = (self.vocab, self.d_model);
        let mut e = gaussian(&[v, d], self.embed_scale / (d as f64).sqrt(), derive_seed(self.seed, "embed"));
        let g = self.embed_groups;
        if g > 1 && self.embed_group_scale > 0.0 {
            let raw = gaussian(&[g, d], 1.0, derive_seed(self.seed, "embed.groups"));
            let mean: Vec<f64> = (0..d).map(|c| (0..g).map(|b| raw.at(b, c)).sum::<f64>() / g as f64).collect();
            let offsets: Vec<Vec<f64>> = (0..g)
                .map(|b| {
                    let u: Vec<f64> = (0..d).map(|c| raw.at(b, c) - mean[c]).collect();
                    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    u.iter().map(|x| x / n * self.embed_group_scale * self.embed_scale).collect()
                })
                .collect();
            let block = v / g;
            for (t, row) in e.data_mut().chunks_mut(d).enumerate() {
                for (x, o) in row.iter_mut().zip(&offsets[t / block]) {
                    *x += o;
                }
            }
        }
        e
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMode {
    PlainLora,
    MoleSparse,
    MoleDense,
}

impl AdapterMode {
    pub fn is_moe(self) -> bool {
        !matches!(self, AdapterMode::PlainLora)
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterMode::PlainLora => "plain-lora",
            AdapterMode::MoleSparse => "mole-sparse",
            AdapterMode::MoleDense => "mole-dense",
        }
    }
}

/// Which trainable pieces are attached to the frozen base.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSpec {
    pub mode: AdapterMode,
    pub experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub attention_lora: bool,
    pub router_init_std: f64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            mode: AdapterMode::MoleSparse,
            experts: 4,
            rank: 32,
            alpha: 32.0,
            attention_lora: true,
            router_init_std: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: FrozenLinear,
    pub k: FrozenLinear,
    pub v: FrozenLinear,
    pub o: FrozenLinear,
    /// Plain LoRA on q, k, v, o when enabled.
    pub lora: Option<[LoraAdapter; 4]>,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn: Attention,
    pub ffn: MoeFfnLayer,
}

/// One training or evaluation sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    /// True on positions whose token is supervised (answer tokens).
    pub loss_mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingLoss {
    pub lm_loss: f64,
    /// Mean over MoE layers of Σ_j c_j·p_j; zero without MoE layers.
    pub lb_loss: f64,
    pub coefficient: f64,
    pub total: f64,
}

/// Everything recorded by one forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub bound: Bound,
    pub logits: Var,
    pub lm: Var,
    pub total: Var,
    pub loss: TrainingLoss,
    pub routing: Vec<(RoutingDecision, BalanceState)>,
    pub segments: Vec<usize>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }
}

#[derive(Clone, Debug)]
pub struct ToyTransformer {
    pub config: ModelConfig,
    pub adapter: AdapterSpec,
    pub store: ParamStore,
    pub embed: ParamId,
    pub blocks: Vec<Block>,
}

impl ToyTransformer {
    pub fn new(config: ModelConfig, adapter: AdapterSpec) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d_model, config.d_ff);
        let seed = config.seed;
        let init = |tag: &str, shape: &[usize], std: f64| gaussian(shape, std, derive_seed(seed, tag));
        let mut store = ParamStore::new();
        let embed = store.add("embed", config.embedding(), false);
        let sd = 1.0 / (d as f64).sqrt();
        let adapter_seed = derive_seed(seed, "adapters");
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layer{l}");
            let lin = |name: &str, rows: usize, cols: usize, std: f64, store: &mut ParamStore| {
                let tag = format!("{p}.{name}");
                FrozenLinear::new(store, &tag, init(&tag, &[rows, cols], std), None)
            };
            let q = lin("attn.q", d, d, sd, &mut store)?;
            let k = lin("attn.k", d, d, sd, &mut store)?;
            let vv = lin("attn.v", d, d, sd, &mut store)?;
            let o = lin("attn.o", d, d, sd * config.attn_out_scale, &mut store)?;
            let up = lin("ffn.up", h, d, sd, &mut store)?;
            let down = lin("ffn.down", d, h, 1.0 / (h as f64).sqrt(), &mut store)?;
            let lora = if adapter.attention_lora {
                let mut mk = |name: &str| {
                    let tag = format!("{p}.attn.{name}");
                    init_adapter(&mut store, &tag, d, d, adapter.rank, adapter.alpha, derive_seed(adapter_seed, &tag))
                };
                Some([mk("q")?, mk("k")?, mk("v")?, mk("o")?])
            } else {
                None
            };
            let ffn_adapters = build_adapters(
                &mut store,
                &format!("{p}.ffn"),
                d,
                h,
                &adapter,
                config.max_context,
                adapter_seed,
            )?;
            blocks.push(Block {
                attn: Attention { q, k, v: vv, o, lora },
                ffn: MoeFfnLayer::new(up, down, ffn_adapters)?,
            });
        }
        Ok(Self {
            config,
            adapter,
            store,
            embed,
            blocks,
        })
    }

    pub fn num_moe_layers(&self) -> usize {
        self.blocks.iter().filter(|b| b.ffn.router().is_some()).count()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Forward over a batch of sequences stacked along rows.
    pub fn forward(&self, batch: &[Sequence], coefficient: f64) -> Result<ForwardPass> {
        let mut ids = Vec::new();
        let mut targets = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        for seq in batch {
            let len = seq.tokens.len();
            if len == 0 {
                return Err(MoleError::Contract("empty sequence".into()));
            }
            if len > self.config.max_context {
                return Err(MoleError::SequenceTooLong { len, max: self.config.max_context });
            }
            if seq.loss_mask.len() != len {
                return Err(MoleError::Contract(format!(
                    "loss mask length {} differs from sequence length {len}",
                    seq.loss_mask.len()
                )));
            }
            if seq.loss_mask[0] {
                return Err(MoleError::Contract("first position has no prefix to predict it from".into()));
            }
            let off = ids.len();
            for t in 1..len {
                if seq.loss_mask[t] {
                    targets.push((off + t - 1, seq.tokens[t]));
                }
            }
            ids.extend_from_slice(&seq.tokens);
            segments.push(len);
        }
        if targets.is_empty() {
            return Err(MoleError::EmptyMask);
        }

        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let embed = bound.var(self.embed);
        let mut x = tape.embedding(embed, &ids)?;
        let mut routing = Vec::new();
        let mut lb_terms = Vec::new();
        for block in &self.blocks {
            let z = tape.layernorm(x)?;
            let a = self.attention(&mut tape, &bound, &block.attn, z, &segments)?;
            x = tape.add(x, a)?;
            let z = tape.layernorm(x)?;
            let out = block.ffn.forward(&mut tape, &bound, z, &segments)?;
            x = tape.add(x, out.out)?;
            if let Some(r) = out.routing {
                lb_terms.push(r.loss);
                routing.push((r.decision, r.balance));
            }
        }
        let z = tape.layernorm(x)?;
        let raw = tape.linear(z, embed)?;
        let logits = tape.scale(raw, self.config.logit_scale / (self.config.d_model as f64).sqrt())?;
        let lm = tape.cross_entropy(logits, &targets)?;

        let (total, lb_loss) = if lb_terms.is_empty() {
            (lm, 0.0)
        } else {
            let mut sum = lb_terms[0];
            for &t in &lb_terms[1..] {
                sum = tape.add(sum, t)?;
            }
            let mean = tape.scale(sum, 1.0 / lb_terms.len() as f64)?;
            let lb_value = tape.value(mean).item()?;
            let weighted = tape.scale(mean, coefficient)?;
            (tape.add(lm, weighted)?, lb_value)
        };
        let loss = TrainingLoss {
            lm_loss: tape.value(lm).item()?,
            lb_loss,
            coefficient,
            total: tape.value(total).item()?,
        };
        Ok(ForwardPass {
            tape,
            bound,
            logits,
            lm,
            total,
            loss,
            routing,
            segments,
        })
    }

    /// Single-sequence forward returning only the loss.
    pub fn loss(&self, tokens: &[usize], loss_mask: &[bool], coefficient: f64) -> Result<TrainingLoss> {
        let seq = Sequence {
            tokens: tokens.to_vec(),
            loss_mask: loss_mask.to_vec(),
        };
        Ok(self.forward(std::slice::from_ref(&seq), coefficient)?.loss)
    }

    /// Total loss and its gradient for every trainable parameter.
    pub fn loss_and_grads(&self, batch: &[Sequence], coefficient: f64) -> Result<(ForwardPass, Vec<(ParamId, Tensor)>)> {
        let pass = self.forward(batch, coefficient)?;
        let grads = pass.tape.backward(pass.total)?;
        let g = self.store.trainable_grads(&pass.bound, &grads);
        Ok((pass, g))
    }

    fn attention(&self, tape: &mut Tape, bound: &Bound, attn: &Attention, z: Var, segments: &[usize]) -> Result<Var> {
        let proj = |tape: &mut Tape, lin: &FrozenLinear, ad: Option<&LoraAdapter>, x: Var| -> Result<Var> {
            let y = lin.forward(tape, bound, x)?;
            match ad {
                Some(ad) => {
                    let d = ad.delta(tape, bound, x)?;
                    tape.add(y, d)
                }
                None => Ok(y),
            }
        };
        let ad = |i: usize| attn.lora.as_ref().map(|l| &l[i]);
        let q = proj(tape, &attn.q, ad(0), z)?;
        let k = proj(tape, &attn.k, ad(1), z)?;
        let v = proj(tape, &attn.v, ad(2), z)?;
        let mixed = tape.causal_attention(q, k, v, self.config.heads, segments)?;
        proj(tape, &attn.o, ad(3), mixed)
    }

    /// Per-layer FFN cost for `tokens` tokens.
    pub fn ffn_flops(&self, tokens: usize) -> Vec<FlopReport> {
        self.blocks.iter().map(|b| b.ffn.count_flops(tokens)).collect()
    }

    /// Hex sha256 over every frozen parameter's name, shape and bytes.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.store.params().iter().filter(|p| !p.trainable) {
            h.update(p.name.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-layer, per-expert token proportions across `sequences`.
    pub fn collect_routing_stats(&self, sequences: &[Sequence]) -> Result<Vec<LayerRoutingStats>> {
        collect_routing_stats(self, sequences)
    }

    pub fn moe_adapters(&self) -> impl Iterator<Item = &FfnAdapters> {
        self.blocks.iter().map(|b| &b.ffn.adapters)
    }
}

/// Mean and population standard deviation of per-sequence expert proportions.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRoutingStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Proportions of each individual sequence (rows sum to 1).
    pub per_sequence: Vec<Vec<f64>>,
}

pub fn collect_routing_stats(model: &ToyTransformer, sequences: &[Sequence]) -> Result<Vec<LayerRoutingStats>> {
    if model.num_moe_layers() == 0 {
        return Err(MoleError::NoMoeLayers);
    }
    if sequences.is_empty() {
        return Err(MoleError::Contract("routing stats need at least one sequence".into()));
    }
    let layer_ids: Vec<usize> = model
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.ffn.router().is_some())
        .map(|(i, _)| i)
        .collect();
    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layer_ids.len()];
    // forward in modest chunks; routing of a token never depends on other sequences
    for chunk in sequences.chunks(32) {
        let pass = model.forward(chunk, 0.0)?;
        for (li, (decision, _)) in pass.routing.iter().enumerate() {
            let k = decision.num_experts();
            let mut start = 0;
            for &len in &pass.segments {
                let mut counts = vec![0usize; k];
                for &j in &decision.assignments[start..start + len] {
                    counts[j] += 1;
                }
                per_layer[li].push(counts.iter().map(|&c| c as f64 / len as f64).collect());
                start += len;
            }
        }
    }
    Ok(per_layer
        .into_iter()
        .zip(layer_ids)
        .map(|(rows, layer)| {
            let k = rows[0].len();
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            let std = (0..k)
                .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
                .collect();
            LayerRoutingStats {
                layer,
                mean,
                std,
                per_sequence: rows,
            }
        })
        .collect())
}
