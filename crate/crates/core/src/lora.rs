//! Low-rank adapters on frozen linear layers: h = Wx + b + (alpha/r)·B·A·x.

use crate::error::{MoleError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{gaussian, Bound, ParamId, ParamStore};

/// Frozen `W` (d_o×d_i) with an optional bias.
#[derive(Clone, Debug)]
pub struct FrozenLinear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_i: usize,
    pub d_o: usize,
}

impl FrozenLinear {
    pub fn new(store: &mut ParamStore, name: &str, w: Tensor, b: Option<Tensor>) -> Result<Self> {
        let (d_o, d_i) = w.as_matrix("FrozenLinear::new")?;
        if let Some(bias) = &b {
            if bias.shape() != [d_o] {
                return Err(MoleError::Shape {
                    op: "FrozenLinear::new",
                    lhs: w.shape().to_vec(),
                    rhs: bias.shape().to_vec(),
                });
            }
        }
        let w = store.add(format!("{name}.weight"), w, false);
        let b = b.map(|t| store.add(format!("{name}.bias"), t, false));
        Ok(Self { w, b, d_i, d_o })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.linear(x, bound.var(self.w))?;
        match self.b {
            Some(b) => tape.add_bias(y, bound.var(b)),
            None => Ok(y),
        }
    }
}

/// Trainable pair A (r×d_i), B (d_o×r).
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub d_i: usize,
    pub d_o: usize,
}

fn check_rank(d_i: usize, d_o: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > d_i.min(d_o) {
        return Err(MoleError::InvalidRank { rank, d_i, d_o });
    }
    Ok(())
}

/// A ~ N(0, 1/r), B = 0, so the adapter starts as an exact no-op.
pub fn init_adapter(
    store: &mut ParamStore,
    name: &str,
    d_i: usize,
    d_o: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LoraAdapter> {
    check_rank(d_i, d_o, rank)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(MoleError::Config(format!("LoRA alpha must be positive, got {alpha}")));
    }
    let a = gaussian(&[rank, d_i], 1.0 / (rank as f64).sqrt(), seed);
    let b = Tensor::zeros(&[d_o, rank]);
    LoraAdapter::from_weights(store, name, a, b, alpha)
}

impl LoraAdapter {
    /// Registers explicit A and B.
    pub fn from_weights(
        store: &mut ParamStore,
        name: &str,
        a: Tensor,
        b: Tensor,
        alpha: f64,
    ) -> Result<Self> {
        let (rank, d_i) = a.as_matrix("LoraAdapter")?;
        let (d_o, rank_b) = b.as_matrix("LoraAdapter")?;
        if rank != rank_b {
            return Err(MoleError::Shape {
                op: "LoraAdapter",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        check_rank(d_i, d_o, rank)?;
        let a = store.add(format!("{name}.lora_a"), a, true);
        let b = store.add(format!("{name}.lora_b"), b, true);
        Ok(Self { a, b, rank, alpha, d_i, d_o })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// (alpha/r)·B·A·x for a batch of rows.
    pub fn delta(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let ax = tape.linear(x, bound.var(self.a))?;
        let bax = tape.linear(ax, bound.var(self.b))?;
        tape.scale(bax, self.scale())
    }

    /// The dense d_o×d_i update (alpha/r)·B·A.
    pub fn effective_update(&self, store: &ParamStore) -> Result<Tensor> {
        let ba = store.get(self.b).matmul(store.get(self.a))?;
        let s = self.scale();
        Tensor::new(ba.shape().to_vec(), ba.data().iter().map(|v| v * s).collect())
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_i + self.d_o)
    }
}

pub fn lora_forward(
    tape: &mut Tape,
    bound: &Bound,
    layer: &FrozenLinear,
    adapter: &LoraAdapter,
    x: Var,
) -> Result<Var> {
    if adapter.d_i != layer.d_i || adapter.d_o != layer.d_o {
        return Err(MoleError::Shape {
            op: "lora_forward",
            lhs: vec![layer.d_o, layer.d_i],
            rhs: vec![adapter.d_o, adapter.d_i],
        });
    }
    let base = layer.forward(tape, bound, x)?;
    let delta = adapter.delta(tape, bound, x)?;
    tape.add(base, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::derive_seed;
    use proptest::prelude::*;

    fn eval(store: &ParamStore, layer: &FrozenLinear, ad: Option<&LoraAdapter>, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = match ad {
            Some(ad) => lora_forward(&mut tape, &b, layer, ad, xv).unwrap(),
            None => layer.forward(&mut tape, &b, xv).unwrap(),
        };
        tape.value(y).clone()
    }

    fn setup(d_i: usize, d_o: usize, r: usize, seed: u64) -> (ParamStore, FrozenLinear, LoraAdapter) {
        let mut store = ParamStore::new();
        let layer = FrozenLinear::new(
            &mut store,
            "l",
            gaussian(&[d_o, d_i], 0.5, seed),
            Some(gaussian(&[d_o], 0.5, seed + 1)),
        )
        .unwrap();
        let ad = init_adapter(&mut store, "l", d_i, d_o, r, 4.0, seed + 2).unwrap();
        (store, layer, ad)
    }

    #[test]
    fn fresh_adapter_is_noop() {
        let (store, layer, ad) = setup(5, 3, 2, 10);
        let x = gaussian(&[4, 5], 1.0, 99);
        assert_eq!(eval(&store, &layer, Some(&ad), &x), eval(&store, &layer, None, &x));
        assert!(ad.effective_update(&store).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_example() {
        let mut store = ParamStore::new();
        let layer = FrozenLinear::new(&mut store, "l", Tensor::eye(2), None).unwrap();
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let ad = LoraAdapter::from_weights(&mut store, "l", a, b, 1.0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(eval(&store, &layer, Some(&ad), &x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn alpha_scales_delta_linearly() {
        let (mut store, layer, mut ad) = setup(4, 4, 2, 3);
        *store.get_mut(ad.b) = gaussian(&[4, 2], 1.0, 5);
        let x = gaussian(&[3, 4], 1.0, 6);
        let base = eval(&store, &layer, None, &x);
        let d1 = eval(&store, &layer, Some(&ad), &x);
        ad.alpha *= 2.0;
        let d2 = eval(&store, &layer, Some(&ad), &x);
        for ((b, y1), y2) in base.data().iter().zip(d1.data()).zip(d2.data()) {
            assert!(((y2 - b) - 2.0 * (y1 - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_bounds_enforced() {
        let mut store = ParamStore::new();
        assert!(init_adapter(&mut store, "x", 4, 3, 0, 1.0, 0).is_err());
        assert!(init_adapter(&mut store, "x", 4, 3, 4, 1.0, 0).is_err());
        assert!(init_adapter(&mut store, "x", 4, 3, 3, 1.0, 0).is_ok());
    }

    #[test]
    fn init_is_seeded() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let a1 = init_adapter(&mut s1, "x", 8, 8, 4, 4.0, 42).unwrap();
        let a2 = init_adapter(&mut s2, "x", 8, 8, 4, 4.0, 42).unwrap();
        assert_eq!(s1.get(a1.a), s2.get(a2.a));
        let a3 = init_adapter(&mut s2, "y", 8, 8, 4, 4.0, 43).unwrap();
        assert_ne!(s1.get(a1.a), s2.get(a3.a));
    }

    #[test]
    fn init_std_is_inverse_sqrt_rank() {
        let mut store = ParamStore::new();
        let ad = init_adapter(&mut store, "x", 64, 64, 16, 16.0, 7).unwrap();
        let a = store.get(ad.a).data();
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        // 1024 samples, expected variance 1/16
        assert!((var - 1.0 / 16.0).abs() < 0.015, "{var}");
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!(mean.abs() < 0.03);
    }

    #[test]
    fn gradients_reach_adapter_only() {
        let (mut store, layer, ad) = setup(3, 2, 1, 0);
        *store.get_mut(ad.b) = gaussian(&[2, 1], 1.0, 1);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(gaussian(&[2, 3], 1.0, 2));
        let y = lora_forward(&mut tape, &b, &layer, &ad, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(b.var(layer.w)).is_none());
        assert!(g.get(b.var(ad.a)).is_some() && g.get(b.var(ad.b)).is_some());
    }

    fn numerical_rank(t: &Tensor) -> usize {
        let m = nalgebra::DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
        let sv = m.singular_values();
        let top = sv.iter().copied().fold(0.0, f64::max);
        sv.iter().filter(|&&s| s > 1e-10 * top).count()
    }

    proptest! {
        #[test]
        fn update_rank_bounded(d_i in 2usize..10, d_o in 2usize..10, r in 1usize..10, seed in any::<u64>()) {
            let r = r.min(d_i.min(d_o));
            let mut store = ParamStore::new();
            let ad = init_adapter(&mut store, "x", d_i, d_o, r, 2.0, seed).unwrap();
            *store.get_mut(ad.b) = gaussian(&[d_o, r], 1.0, derive_seed(seed, "b"));
            let u = ad.effective_update(&store).unwrap();
            prop_assert!(numerical_rank(&u) <= r);
        }

        #[test]
        fn delta_is_linear_in_x(seed in any::<u64>(), c in -3.0f64..3.0) {
            let (mut store, layer, ad) = setup(4, 3, 2, seed % 1000);
            *store.get_mut(ad.b) = gaussian(&[3, 2], 1.0, derive_seed(seed, "b"));
            let x = gaussian(&[2, 4], 1.0, derive_seed(seed, "x"));
            let x2 = gaussian(&[2, 4], 1.0, derive_seed(seed, "x2"));
            let comb = Tensor::new(vec![2, 4], x.data().iter().zip(x2.data()).map(|(a, b)| a + c * b).collect()).unwrap();
            let delta = |t: &Tensor| {
                let y = eval(&store, &layer, Some(&ad), t);
                let b = eval(&store, &layer, None, t);
                y.data().iter().zip(b.data()).map(|(p, q)| p - q).collect::<Vec<_>>()
            };
            let (d1, d2, dc) = (delta(&x), delta(&x2), delta(&comb));
            for i in 0..dc.len() {
                prop_assert!((dc[i] - d1[i] - c * d2[i]).abs() < 1e-10);
            }
        }
    }
}
