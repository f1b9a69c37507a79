//! Top-1 token routing, expert-grouped dispatch and the load-balancing loss.

use crate::error::{MoleError, Result};
use crate::numerics::{softmax, Tape, Tensor, Var};
use crate::params::{gaussian, Bound, ParamId, ParamStore};

/// Router weights `Wg` (K×d_i), no bias.
#[derive(Clone, Debug)]
pub struct MoeRouter {
    pub wg: ParamId,
    pub num_experts: usize,
    pub d_i: usize,
    /// Tokens an expert may take per sequence. Set to the max context, so it never binds.
    pub capacity: usize,
}

impl MoeRouter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_experts: usize,
        d_i: usize,
        capacity: usize,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_experts == 0 {
            return Err(MoleError::Config("router needs at least one expert".into()));
        }
        let w = gaussian(&[num_experts, d_i], init_std, seed);
        Self::from_weights(store, name, w, capacity)
    }

    pub fn from_weights(store: &mut ParamStore, name: &str, wg: Tensor, capacity: usize) -> Result<Self> {
        let (num_experts, d_i) = wg.as_matrix("MoeRouter")?;
        if num_experts == 0 {
            return Err(MoleError::Config("router needs at least one expert".into()));
        }
        let wg = store.add(format!("{name}.router"), wg, true);
        Ok(Self {
            wg,
            num_experts,
            d_i,
            capacity,
        })
    }
}

/// Per-token expert choice plus the groups it induces.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub assignments: Vec<usize>,
    /// L×K softmax of the router logits.
    pub probabilities: Tensor,
    /// Original token positions per expert, ascending.
    pub groups: Vec<Vec<usize>>,
}

impl RoutingDecision {
    /// Argmax with lowest-index ties, softmax probabilities, stable groups.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (l, k) = logits.as_matrix("route")?;
        if k == 0 {
            return Err(MoleError::Contract("route needs at least one expert".into()));
        }
        let assignments: Vec<usize> = (0..l).map(|t| argmax(logits.row(t))).collect();
        Self::from_parts(assignments, softmax(logits)?)
    }

    pub fn from_parts(assignments: Vec<usize>, probabilities: Tensor) -> Result<Self> {
        let (l, k) = probabilities.as_matrix("RoutingDecision")?;
        if assignments.len() != l {
            return Err(MoleError::Shape {
                op: "RoutingDecision",
                lhs: vec![assignments.len()],
                rhs: probabilities.shape().to_vec(),
            });
        }
        let mut groups = vec![Vec::new(); k];
        for (t, &j) in assignments.iter().enumerate() {
            if j >= k {
                return Err(MoleError::Contract(format!("expert {j} outside {k}")));
            }
            groups[j].push(t);
        }
        Ok(Self {
            assignments,
            probabilities,
            groups,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.groups.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.assignments.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Largest fraction of tokens taken by a single expert.
    pub fn max_load_fraction(&self) -> f64 {
        let n = self.num_tokens().max(1) as f64;
        self.groups.iter().map(Vec::len).max().unwrap_or(0) as f64 / n
    }

    /// Enforces the per-sequence capacity over consecutive segments.
    pub fn check_capacity(&self, segments: &[usize], capacity: usize) -> Result<()> {
        let k = self.num_experts();
        let mut start = 0;
        for &len in segments {
            let mut counts = vec![0usize; k];
            for &j in &self.assignments[start..start + len] {
                counts[j] += 1;
            }
            if let Some((expert, &tokens)) = counts.iter().enumerate().find(|(_, &c)| c > capacity) {
                return Err(MoleError::CapacityExceeded {
                    expert,
                    tokens,
                    capacity,
                });
            }
            start += len;
        }
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Counts, summed probabilities and the resulting Σ c_j·p_j.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceState {
    pub counts: Vec<usize>,
    pub prob_mass: Vec<f64>,
    pub loss: f64,
}

/// Routing decision plus the tape handle of its probabilities.
pub struct Routed {
    pub decision: RoutingDecision,
    pub probs: Var,
}

pub fn route(
    tape: &mut Tape,
    bound: &Bound,
    router: &MoeRouter,
    x: Var,
    segments: &[usize],
) -> Result<Routed> {
    let logits = tape.linear(x, bound.var(router.wg))?;
    let probs = tape.softmax(logits)?;
    let vals = tape.value(logits);
    let assignments = (0..vals.rows()).map(|t| argmax(vals.row(t))).collect();
    let decision = RoutingDecision::from_parts(assignments, tape.value(probs).clone())?;
    decision.check_capacity(segments, router.capacity)?;
    Ok(Routed { decision, probs })
}

/// Σ_j c_j·p_j on the tape. Counts enter as constants, so the gradient only
/// reaches the router through the probabilities.
pub fn balance_loss(tape: &mut Tape, decision: &RoutingDecision, probs: Var) -> Result<(Var, BalanceState)> {
    let counts = decision.counts();
    let c: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let p = tape.col_sum(probs)?;
    let loss = tape.dot_const(p, &c)?;
    let state = BalanceState {
        counts,
        prob_mass: tape.value(p).data().to_vec(),
        loss: tape.value(loss).item()?,
    };
    Ok((loss, state))
}

/// Off-tape version of [`balance_loss`].
pub fn balance_state(decision: &RoutingDecision) -> BalanceState {
    let counts = decision.counts();
    let probs = &decision.probabilities;
    let k = decision.num_experts();
    let mut prob_mass = vec![0.0; k];
    for t in 0..probs.rows() {
        for (m, p) in prob_mass.iter_mut().zip(probs.row(t)) {
            *m += p;
        }
    }
    let loss = counts.iter().zip(&prob_mass).map(|(&c, p)| c as f64 * p).sum();
    BalanceState {
        counts,
        prob_mass,
        loss,
    }
}

/// Per-expert sub-batches and the map back to original rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dispatch {
    pub sub_batches: Vec<Tensor>,
    /// For each original row: (expert, row within that expert's sub-batch).
    pub scatter: Vec<(usize, usize)>,
}

pub fn dispatch(decision: &RoutingDecision, x: &Tensor) -> Result<Dispatch> {
    let (l, d) = x.as_matrix("dispatch")?;
    if l != decision.num_tokens() {
        return Err(MoleError::Shape {
            op: "dispatch",
            lhs: vec![decision.num_tokens()],
            rhs: x.shape().to_vec(),
        });
    }
    let mut scatter = vec![(0, 0); l];
    let mut sub_batches = Vec::with_capacity(decision.num_experts());
    for (j, group) in decision.groups.iter().enumerate() {
        let mut data = Vec::with_capacity(group.len() * d);
        for (r, &t) in group.iter().enumerate() {
            data.extend_from_slice(x.row(t));
            scatter[t] = (j, r);
        }
        sub_batches.push(Tensor::new(vec![group.len(), d], data)?);
    }
    Ok(Dispatch { sub_batches, scatter })
}

impl Dispatch {
    /// Reassembles rows in original order from per-expert outputs.
    pub fn gather(&self, outputs: &[Tensor]) -> Result<Tensor> {
        let d = outputs.iter().find(|t| t.rows() > 0).map_or(0, Tensor::cols);
        let mut data = Vec::with_capacity(self.scatter.len() * d);
        for &(j, r) in &self.scatter {
            let out = outputs
                .get(j)
                .ok_or_else(|| MoleError::Contract(format!("missing output for expert {j}")))?;
            data.extend_from_slice(out.row(r));
        }
        Tensor::new(vec![self.scatter.len(), d], data)
    }
}
