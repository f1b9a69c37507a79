//! FFN (up → GELU → down) with LoRA experts on both sublayers and one shared router.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{MoleError, Result};
use crate::lora::{FrozenLinear, LoraAdapter};
use crate::numerics::{Tape, Var};
use crate::params::{Bound, ParamStore};
use crate::routing::{balance_loss, route, BalanceState, MoeRouter, RoutingDecision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoeMode {
    /// Top-1: each token runs only its chosen expert.
    Sparse,
    /// Every expert runs; deltas are weighted by routing probabilities.
    Dense,
}

#[derive(Clone, Debug)]
pub enum FfnAdapters {
    /// Base FFN only.
    Frozen,
    Plain {
        up: LoraAdapter,
        down: LoraAdapter,
    },
    Moe {
        up: Vec<LoraAdapter>,
        down: Vec<LoraAdapter>,
        router: MoeRouter,
        mode: MoeMode,
    },
}

#[derive(Clone, Debug)]
pub struct MoeFfnLayer {
    pub up: FrozenLinear,
    pub down: FrozenLinear,
    pub adapters: FfnAdapters,
}

/// Routing outcome of one MoE layer for a forward pass.
pub struct LayerRouting {
    pub decision: RoutingDecision,
    pub loss: Var,
    pub balance: BalanceState,
}

pub struct FfnOutput {
    pub out: Var,
    pub routing: Option<LayerRouting>,
}

impl MoeFfnLayer {
    pub fn new(up: FrozenLinear, down: FrozenLinear, adapters: FfnAdapters) -> Result<Self> {
        if up.d_o != down.d_i || up.d_i != down.d_o {
            return Err(MoleError::Shape {
                op: "MoeFfnLayer",
                lhs: vec![up.d_o, up.d_i],
                rhs: vec![down.d_o, down.d_i],
            });
        }
        let fits = |a: &LoraAdapter, l: &FrozenLinear| a.d_i == l.d_i && a.d_o == l.d_o;
        match &adapters {
            FfnAdapters::Frozen => {}
            FfnAdapters::Plain { up: a, down: b } => {
                if !fits(a, &up) || !fits(b, &down) {
                    return Err(MoleError::Contract("adapter shape does not match its sublayer".into()));
                }
            }
            FfnAdapters::Moe { up: ua, down: da, router, .. } => {
                let k = router.num_experts;
                if ua.len() != k || da.len() != k {
                    return Err(MoleError::Contract(format!(
                        "router has {k} experts but sublayers have {} and {}",
                        ua.len(),
                        da.len()
                    )));
                }
                if router.d_i != up.d_i {
                    return Err(MoleError::Contract("router input width differs from FFN input".into()));
                }
                if !ua.iter().all(|a| fits(a, &up)) || !da.iter().all(|a| fits(a, &down)) {
                    return Err(MoleError::Contract("adapter shape does not match its sublayer".into()));
                }
            }
        }
        Ok(Self { up, down, adapters })
    }

    pub fn d_model(&self) -> usize {
        self.up.d_i
    }

    pub fn d_hidden(&self) -> usize {
        self.up.d_o
    }

    pub fn num_experts(&self) -> usize {
        match &self.adapters {
            FfnAdapters::Moe { router, .. } => router.num_experts,
            _ => 0,
        }
    }

    pub fn router(&self) -> Option<&MoeRouter> {
        match &self.adapters {
            FfnAdapters::Moe { router, .. } => Some(router),
            _ => None,
        }
    }

    /// `x` is the post-layernorm hidden state; it also feeds the router.
    /// `segments` are the lengths of the sequences stacked in `x`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, segments: &[usize]) -> Result<FfnOutput> {
        match &self.adapters {
            FfnAdapters::Frozen => {
                let u = self.up.forward(tape, bound, x)?;
                let a = tape.gelu(u)?;
                let out = self.down.forward(tape, bound, a)?;
                Ok(FfnOutput { out, routing: None })
            }
            FfnAdapters::Plain { up, down } => {
                let u = self.up.forward(tape, bound, x)?;
                let du = up.delta(tape, bound, x)?;
                let u = tape.add(u, du)?;
                let a = tape.gelu(u)?;
                let y = self.down.forward(tape, bound, a)?;
                let dy = down.delta(tape, bound, a)?;
                let out = tape.add(y, dy)?;
                Ok(FfnOutput { out, routing: None })
            }
            FfnAdapters::Moe { up, down, router, mode } => {
                let routed = route(tape, bound, router, x, segments)?;
                let (loss, balance) = balance_loss(tape, &routed.decision, routed.probs)?;
                let u = self.up.forward(tape, bound, x)?;
                let out = match mode {
                    MoeMode::Sparse => {
                        let groups = &routed.decision.groups;
                        let u = add_sparse(tape, bound, up, groups, x, u)?;
                        let a = tape.gelu(u)?;
                        let y = self.down.forward(tape, bound, a)?;
                        add_sparse(tape, bound, down, groups, a, y)?
                    }
                    MoeMode::Dense => {
                        let weights = (0..router.num_experts)
                            .map(|j| tape.column(routed.probs, j))
                            .collect::<Result<Vec<_>>>()?;
                        let u = add_dense(tape, bound, up, &weights, x, u)?;
                        let a = tape.gelu(u)?;
                        let y = self.down.forward(tape, bound, a)?;
                        add_dense(tape, bound, down, &weights, a, y)?
                    }
                };
                Ok(FfnOutput {
                    out,
                    routing: Some(LayerRouting {
                        decision: routed.decision,
                        loss,
                        balance,
                    }),
                })
            }
        }
    }

    pub fn cost(&self) -> FfnCost {
        let (rank, experts) = match &self.adapters {
            FfnAdapters::Frozen => (0, 0),
            FfnAdapters::Plain { up, .. } => (up.rank, 0),
            FfnAdapters::Moe { up, router, .. } => (up[0].rank, router.num_experts),
        };
        FfnCost {
            d: self.d_model() as u64,
            h: self.d_hidden() as u64,
            rank: rank as u64,
            experts: experts as u64,
        }
    }

    pub fn count_flops(&self, tokens: usize) -> FlopReport {
        self.cost().report(tokens as u64)
    }
}

/// Each expert sees only its own rows; deltas are scattered back in place.
fn add_sparse(
    tape: &mut Tape,
    bound: &Bound,
    experts: &[LoraAdapter],
    groups: &[Vec<usize>],
    input: Var,
    mut acc: Var,
) -> Result<Var> {
    for (adapter, group) in experts.iter().zip(groups) {
        if group.is_empty() {
            continue;
        }
        let rows = tape.gather_rows(input, group)?;
        let delta = adapter.delta(tape, bound, rows)?;
        acc = tape.index_add_rows(acc, delta, group)?;
    }
    Ok(acc)
}

fn add_dense(
    tape: &mut Tape,
    bound: &Bound,
    experts: &[LoraAdapter],
    weights: &[Var],
    input: Var,
    mut acc: Var,
) -> Result<Var> {
    for (adapter, &w) in experts.iter().zip(weights) {
        let delta = adapter.delta(tape, bound, input)?;
        let weighted = tape.scale_rows(delta, w)?;
        acc = tape.add(acc, weighted)?;
    }
    Ok(acc)
}

/// Dimensions that determine FFN multiply-accumulate counts. `experts == 0`
/// means plain LoRA (or no adapter when `rank == 0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnCost {
    pub d: u64,
    pub h: u64,
    pub rank: u64,
    pub experts: u64,
}

/// Exact MAC counts for `tokens` tokens through one FFN layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub tokens: u64,
    pub base: u128,
    pub router: u128,
    /// One expert per token, both sublayers.
    pub expert_sparse: u128,
    /// All K experts per token.
    pub expert_dense: u128,
    /// Base plus a single adapter of the same rank, no router.
    pub plain_total: u128,
    pub sparse_total: u128,
    pub dense_total: u128,
}

impl FfnCost {
    pub fn report(&self, tokens: u64) -> FlopReport {
        let l = u128::from(tokens);
        let (d, h, r, k) = (
            u128::from(self.d),
            u128::from(self.h),
            u128::from(self.rank),
            u128::from(self.experts),
        );
        let base = l * (d * h + h * d);
        let router = l * k * d;
        // up: A is r×d, B is h×r; down: A is r×h, B is d×r
        let expert_sparse = l * ((r * d + r * h) + (r * h + r * d));
        let expert_dense = k * expert_sparse;
        FlopReport {
            tokens,
            base,
            router,
            expert_sparse,
            expert_dense,
            plain_total: base + expert_sparse,
            sparse_total: base + router + expert_sparse,
            dense_total: base + router + expert_dense,
        }
    }
}

impl FlopReport {
    pub fn sparse_over_plain(&self) -> Ratio<u128> {
        Ratio::new(self.sparse_total, self.plain_total)
    }

    pub fn dense_over_sparse_experts(&self) -> Ratio<u128> {
        Ratio::new(self.expert_dense, self.expert_sparse)
    }
}

/// Builds the adapter set of one FFN layer on a store.
pub fn build_adapters(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    h: usize,
    spec: &crate::model::AdapterSpec,
    capacity: usize,
    seed: u64,
) -> Result<FfnAdapters> {
    use crate::lora::init_adapter;
    use crate::params::derive_seed;
    let s = |tag: &str| derive_seed(seed, &format!("{prefix}.{tag}"));
    Ok(match spec.mode {
        crate::model::AdapterMode::PlainLora => FfnAdapters::Plain {
            up: init_adapter(store, &format!("{prefix}.up"), d, h, spec.rank, spec.alpha, s("up"))?,
            down: init_adapter(store, &format!("{prefix}.down"), h, d, spec.rank, spec.alpha, s("down"))?,
        },
        crate::model::AdapterMode::MoleSparse | crate::model::AdapterMode::MoleDense => {
            let k = spec.experts;
            if k == 0 {
                return Err(MoleError::Config("MoLE needs at least one expert".into()));
            }
            let mut up = Vec::with_capacity(k);
            let mut down = Vec::with_capacity(k);
            for j in 0..k {
                up.push(init_adapter(
                    store,
                    &format!("{prefix}.up.expert{j}"),
                    d,
                    h,
                    spec.rank,
                    spec.alpha,
                    s(&format!("up{j}")),
                )?);
            }
            for j in 0..k {
                down.push(init_adapter(
                    store,
                    &format!("{prefix}.down.expert{j}"),
                    h,
                    d,
                    spec.rank,
                    spec.alpha,
                    s(&format!("down{j}")),
                )?);
            }
            let router = MoeRouter::new(store, prefix, k, d, capacity, spec.router_init_std, s("router"))?;
            let mode = if spec.mode == crate::model::AdapterMode::MoleDense {
                MoeMode::Dense
            } else {
                MoeMode::Sparse
            };
            FfnAdapters::Moe { up, down, router, mode }
        }
    })
}
