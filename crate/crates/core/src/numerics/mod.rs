//! Dense f64 tensors and a reverse-mode tape.
//!
//! Every op checks shapes up front and refuses to record a non-finite result.
//! There is no broadcasting apart from [`Tape::add_bias`].

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_rows;

/// Row-wise softmax of a plain tensor (last dim).
pub fn softmax(t: &Tensor) -> crate::Result<Tensor> {
    if t.shape().is_empty() || t.cols() == 0 {
        return Err(crate::MoleError::Contract("softmax needs a nonempty last dim".into()));
    }
    Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), t.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Compares the tape gradient of every input against central differences
    /// of the same scalar function.
    fn check_grad<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let f0 = tape.value(loss).item().unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let l = f(&mut t, &vs);
            t.value(l).item().unwrap()
        };
        let eps = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(vars[i], input.shape());
            // central differences carry ~1e-10 absolute noise at this eps, so
            // tiny entries are measured against a floor tied to the loss scale
            let floor = 1e-4 * f0.abs().max(1.0);
            for j in 0..input.len() {
                let central = |h: f64| {
                    let mut plus = inputs.clone();
                    plus[i].data_mut()[j] += h;
                    let mut minus = inputs.clone();
                    minus[i].data_mut()[j] -= h;
                    (eval(&plus) - eval(&minus)) / (2.0 * h)
                };
                // Richardson step cancels the eps^2 truncation term
                let fd = (4.0 * central(eps) - central(2.0 * eps)) / 3.0;
                let an = g.data()[j];
                let denom = an.abs().max(fd.abs()).max(floor);
                assert!(
                    (an - fd).abs() / denom < 1e-6,
                    "input {i} elem {j}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    /// Reduces any tensor to a scalar with fixed non-uniform weights so that
    /// every output element gets a distinct upstream gradient.
    fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
        let n = tape.value(v).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
        tape.dot_const(v, &w).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(vec![1e3, -1e3])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] >= 0.0);
        let s = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
        assert!((s.data()[0] - 0.0900).abs() < 5e-5);
        assert!((s.data()[1] - 0.2447).abs() < 5e-5);
        assert!((s.data()[2] - 0.6652).abs() < 5e-5);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1e300]), false);
        assert!(tape.scale(x, 1e300).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 2]), false);
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.add(a, b).is_err());
        assert!(tape.linear(a, b).is_err());
    }

    #[test]
    fn fd_matmul_linear_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 2]),
            rand_tensor(&mut rng, &[5, 2]),
            rand_tensor(&mut rng, &[5]),
        ];
        check_grad(ins, |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            let l = t.linear(c, v[2]).unwrap();
            let l = t.add_bias(l, v[3]).unwrap();
            weighted_sum(t, l)
        });
    }

    #[test]
    fn fd_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
        check_grad(ins, |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let m = t.mul(a, v[0]).unwrap();
            let s = t.scale(m, -1.7).unwrap();
            let g = t.gelu(s).unwrap();
            weighted_sum(t, g)
        });
    }

    #[test]
    fn fd_layernorm_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![rand_tensor(&mut rng, &[4, 6])];
        check_grad(ins, |t, v| {
            let n = t.layernorm(v[0]).unwrap();
            let s = t.softmax(n).unwrap();
            weighted_sum(t, s)
        });
    }

    #[test]
    fn fd_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = vec![
            rand_tensor(&mut rng, &[7, 4]),
            rand_tensor(&mut rng, &[7, 4]),
            rand_tensor(&mut rng, &[7, 4]),
        ];
        check_grad(ins, |t, v| {
            let o = t.causal_attention(v[0], v[1], v[2], 2, &[3, 4]).unwrap();
            weighted_sum(t, o)
        });
    }

    #[test]
    fn fd_gather_scatter_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ins = vec![rand_tensor(&mut rng, &[5, 3]), rand_tensor(&mut rng, &[5, 3])];
        check_grad(ins, |t, v| {
            let g = t.gather_rows(v[0], &[4, 1, 1]).unwrap();
            let s = t.index_add_rows(v[1], g, &[0, 2, 0]).unwrap();
            weighted_sum(t, s)
        });
    }

    #[test]
    fn fd_embedding_colsum_column_scale_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ins = vec![rand_tensor(&mut rng, &[6, 3]), rand_tensor(&mut rng, &[4, 3])];
        check_grad(ins, |t, v| {
            let e = t.embedding(v[0], &[5, 0, 5, 2]).unwrap();
            let p = t.softmax(v[1]).unwrap();
            let w = t.column(p, 1).unwrap();
            let sr = t.scale_rows(e, w).unwrap();
            let cs = t.col_sum(sr).unwrap();
            t.dot_const(cs, &[1.0, -2.0, 0.5]).unwrap()
        });
    }

    #[test]
    fn fd_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ins = vec![rand_tensor(&mut rng, &[4, 5])];
        check_grad(ins, |t, v| t.cross_entropy(v[0], &[(0, 1), (2, 4), (3, 0)]).unwrap());
    }

    #[test]
    fn shared_use_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]), true);
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn attention_is_causal_and_segmented() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_tensor(&mut rng, &[6, 4]);
        let k = rand_tensor(&mut rng, &[6, 4]);
        let v = rand_tensor(&mut rng, &[6, 4]);
        let run = |k: &Tensor, v: &Tensor| {
            let mut t = Tape::new();
            let (qv, kv, vv) = (t.leaf(q.clone(), false), t.leaf(k.clone(), false), t.leaf(v.clone(), false));
            let o = t.causal_attention(qv, kv, vv, 2, &[3, 3]).unwrap();
            t.value(o).clone()
        };
        let base = run(&k, &v);
        let (mut k2, mut v2) = (k.clone(), v.clone());
        // perturb position 1 of the first segment
        for c in 0..4 {
            k2.data_mut()[4 + c] += 0.5;
            v2.data_mut()[4 + c] -= 0.5;
        }
        let out = run(&k2, &v2);
        assert_eq!(base.row(0), out.row(0));
        for r in 3..6 {
            assert_eq!(base.row(r), out.row(r));
        }
        assert_ne!(base.row(1), out.row(1));
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[m, k]);
            let b = rand_tensor(&mut rng, &[k, n]);
            let c = rand_tensor(&mut rng, &[n, p]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn softmax_rows_normalized(rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 1..9), 1..6)) {
            let cols = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
            let s = softmax(&Tensor::from_rows(&rows).unwrap()).unwrap();
            for i in 0..s.rows() {
                let r = s.row(i);
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(r.iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn random_graph_matches_fd(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ins = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[6, 4])];
            check_grad(ins, |t, v| {
                let l = t.linear(v[0], v[1]).unwrap();
                let g = t.gelu(l).unwrap();
                let n = t.layernorm(g).unwrap();
                let s = t.softmax(n).unwrap();
                let m = t.mul(s, n).unwrap();
                weighted_sum(t, m)
            });
        }
    }
}
