//! Synthetic question/answer domains and λ-weighted mixtures of them.
//!
//! A domain owns a contiguous vocabulary block. Questions follow a Markov
//! chain that mostly stays inside the block; each answer token is drawn from
//! a per-question distribution over the block. Sequences alternate
//! `q1 a1 q2 a2 …` and only answer positions are supervised.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MoleError, Result};
use crate::model::Sequence;
use crate::numerics::{softmax_rows, Tensor};
use crate::params::derive_seed;

/// Generation parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    pub name: String,
    /// First token id of the domain's own block.
    pub block_start: usize,
    pub block_len: usize,
    /// Token range questions may visit; defaults to the block itself.
    #[serde(default)]
    pub question_range: Option<(usize, usize)>,
    /// Question/answer pairs per instance.
    pub pairs: usize,
    /// Sharpness of the per-question answer distributions.
    pub answer_temperature: f64,
    /// Sharpness of in-block question transitions (0 = uniform).
    #[serde(default)]
    pub transition_temperature: f64,
    /// Probability mass each question step spreads over the whole question range.
    #[serde(default)]
    pub smoothing: f64,
    #[serde(default)]
    pub conflict_group: Option<u32>,
    pub seed: u64,
}

/// A built domain with its transition table and answer function.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: usize,
    pub params: DomainParams,
    q_start: usize,
    q_len: usize,
    initial: Vec<f64>,
    /// q_len × q_len, row-stochastic.
    transition: Tensor,
    /// q_len × block_len, row-stochastic.
    answer: Tensor,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticInstance {
    pub domain: usize,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl SyntheticInstance {
    pub fn new(domain: usize, question: Vec<usize>, answer: Vec<usize>) -> Self {
        let mut tokens = Vec::with_capacity(question.len() * 2);
        let mut loss_mask = Vec::with_capacity(question.len() * 2);
        for (q, a) in question.iter().zip(&answer) {
            tokens.push(*q);
            loss_mask.push(false);
            tokens.push(*a);
            loss_mask.push(true);
        }
        Self {
            domain,
            question,
            answer,
            tokens,
            loss_mask,
        }
    }

    pub fn sequence(&self) -> Sequence {
        Sequence {
            tokens: self.tokens.clone(),
            loss_mask: self.loss_mask.clone(),
        }
    }
}

fn gaussian_logits(rng: &mut ChaCha8Rng, n: usize, temperature: f64) -> Vec<f64> {
    (0..n)
        .map(|_| temperature * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl DomainSpec {
    pub fn build(id: usize, params: DomainParams) -> Result<Self> {
        let bad = |m: String| Err(MoleError::Config(format!("domain {}: {m}", params.name)));
        if params.block_len == 0 || params.pairs == 0 {
            return bad("block_len and pairs must be positive".into());
        }
        let (q_start, q_len) = params.question_range.unwrap_or((params.block_start, params.block_len));
        if params.block_start < q_start || params.block_start + params.block_len > q_start + q_len {
            return bad("block must lie inside the question range".into());
        }
        if !(0.0..=1.0).contains(&params.smoothing) {
            return bad(format!("smoothing {} outside [0, 1]", params.smoothing));
        }
        if !params.answer_temperature.is_finite() || !params.transition_temperature.is_finite() {
            return bad("temperatures must be finite".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let off = params.block_start - q_start;
        let eps = params.smoothing;
        let spread = eps / q_len as f64;

        let mut initial = vec![spread; q_len];
        for p in &mut initial[off..off + params.block_len] {
            *p += (1.0 - eps) / params.block_len as f64;
        }
        let mut transition = Vec::with_capacity(q_len * q_len);
        for _ in 0..q_len {
            let inner = softmax_rows(
                &gaussian_logits(&mut rng, params.block_len, params.transition_temperature),
                params.block_len,
            );
            let mut row = vec![spread; q_len];
            for (r, p) in row[off..off + params.block_len].iter_mut().zip(&inner) {
                *r += (1.0 - eps) * p;
            }
            transition.extend(row);
        }
        let logits = gaussian_logits(&mut rng, q_len * params.block_len, params.answer_temperature);
        let answer = softmax_rows(&logits, params.block_len);
        Ok(Self {
            id,
            q_start,
            q_len,
            initial,
            transition: Tensor::new(vec![q_len, q_len], transition)?,
            answer: Tensor::new(vec![q_len, params.block_len], answer)?,
            params,
        })
    }

    /// One past the largest token id this domain can emit.
    pub fn max_token(&self) -> usize {
        (self.q_start + self.q_len).max(self.params.block_start + self.params.block_len)
    }

    pub fn sequence_len(&self) -> usize {
        2 * self.params.pairs
    }

    pub fn question_range(&self) -> (usize, usize) {
        (self.q_start, self.q_len)
    }

    /// Answer distribution over the block for question token `q`.
    pub fn answer_distribution(&self, q: usize) -> Option<&[f64]> {
        let i = q.checked_sub(self.q_start).filter(|&i| i < self.q_len)?;
        Some(self.answer.row(i))
    }

    /// Probability of emitting exactly this question sequence.
    pub fn question_probability(&self, question: &[usize]) -> f64 {
        let idx: Option<Vec<usize>> = question
            .iter()
            .map(|&q| q.checked_sub(self.q_start).filter(|&i| i < self.q_len))
            .collect();
        let Some(idx) = idx else { return 0.0 };
        let Some((&first, rest)) = idx.split_first() else { return 1.0 };
        let mut p = self.initial[first];
        let mut prev = first;
        for &i in rest {
            p *= self.transition.at(prev, i);
            prev = i;
        }
        p
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<SyntheticInstance> {
        let pick = |rng: &mut dyn rand::RngCore, probs: &[f64]| -> Result<usize> {
            let d = WeightedIndex::new(probs).map_err(|e| MoleError::Config(e.to_string()))?;
            Ok(d.sample(rng))
        };
        let mut question = Vec::with_capacity(self.params.pairs);
        let mut answer = Vec::with_capacity(self.params.pairs);
        let mut cur = pick(rng, &self.initial)?;
        for i in 0..self.params.pairs {
            if i > 0 {
                cur = pick(rng, self.transition.row(cur))?;
            }
            question.push(self.q_start + cur);
            answer.push(self.params.block_start + pick(rng, self.answer.row(cur))?);
        }
        Ok(SyntheticInstance::new(self.id, question, answer))
    }

    /// Entropy of the answer distribution averaged under the question marginal
    /// of the first step: a lower bound on achievable answer loss.
    pub fn answer_entropy(&self) -> f64 {
        let mut h = 0.0;
        for (i, &pi) in self.initial.iter().enumerate() {
            let row = self.answer.row(i);
            h -= pi * row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        }
        h
    }

    /// The logit update this domain asks for, restricted to its own block:
    /// `U[a, q] = log P(a | q) − mean_a log P(a | q)` as a vocab×vocab matrix
    /// (rows: answer tokens, columns: question tokens).
    pub fn ideal_update(&self, vocab: usize) -> Result<Tensor> {
        if self.max_token() > vocab {
            return Err(MoleError::Config(format!(
                "domain {} needs vocab {}, got {vocab}",
                self.params.name,
                self.max_token()
            )));
        }
        let mut u = Tensor::zeros(&[vocab, vocab]);
        let bl = self.params.block_len;
        for qi in 0..self.q_len {
            let logs: Vec<f64> = self.answer.row(qi).iter().map(|p| p.ln()).collect();
            let mean = logs.iter().sum::<f64>() / bl as f64;
            for (a, l) in logs.iter().enumerate() {
                u.data_mut()[(self.params.block_start + a) * vocab + self.q_start + qi] = l - mean;
            }
        }
        Ok(u)
    }
}

/// Domains with nonnegative sampling weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub domains: Vec<(DomainSpec, f64)>,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(domains: Vec<(DomainSpec, f64)>, seed: u64) -> Result<Self> {
        if domains.is_empty() {
            return Err(MoleError::Config("mixture has no domains".into()));
        }
        if domains.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(MoleError::Config("mixture weights must be finite and nonnegative".into()));
        }
        if !domains.iter().any(|(_, w)| *w > 0.0) {
            return Err(MoleError::Config("mixture weights are all zero".into()));
        }
        Ok(Self { domains, seed })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.domains.iter().map(|(_, w)| *w).collect()
    }

    /// Instance `index` of the stream; a pure function of (spec, seed, index).
    pub fn instance(&self, index: u64) -> Result<SyntheticInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let dist = WeightedIndex::new(self.weights()).map_err(|e| MoleError::Config(e.to_string()))?;
        let m = dist.sample(&mut rng);
        self.domains[m].0.sample(&mut rng)
    }

    /// Instances `start .. start + n` of the stream.
    pub fn sample_range(&self, start: u64, n: usize) -> Result<Vec<SyntheticInstance>> {
        (0..n as u64).map(|i| self.instance(start + i)).collect()
    }

    pub fn sample_stream(&self, n: usize) -> Result<Vec<SyntheticInstance>> {
        self.sample_range(0, n)
    }

    pub fn max_token(&self) -> usize {
        self.domains.iter().map(|(d, _)| d.max_token()).max().unwrap_or(0)
    }

    pub fn max_sequence_len(&self) -> usize {
        self.domains.iter().map(|(d, _)| d.sequence_len()).max().unwrap_or(0)
    }
}

/// `n` fixed instances of a single domain, seeded independently of any stream.
pub fn domain_eval_set(domain: &DomainSpec, n: usize, seed: u64) -> Result<Vec<SyntheticInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("eval.{}", domain.params.name)));
    (0..n).map(|_| domain.sample(&mut rng)).collect()
}

/// Knobs of [`make_conflict_pair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConflictPairOptions {
    /// Questions (and answers) per domain = `block_per_rank × rank_budget`.
    pub block_per_rank: usize,
    pub pairs: usize,
    pub answer_temperature: f64,
    pub smoothing: f64,
}

impl Default for ConflictPairOptions {
    fn default() -> Self {
        Self {
            block_per_rank: 8,
            pairs: 8,
            answer_temperature: 6.0,
            smoothing: 1e-3,
        }
    }
}

/// Two domains on adjacent blocks of `block_per_rank·r` tokens each. Their
/// answer tables are independent and high-entropy, so one rank-r adapter has
/// to split its capacity between them, while their ideal updates live on
/// disjoint output rows and are exactly orthogonal. A little smoothing lets
/// each domain emit the other's questions, on which the two disagree.
pub fn make_conflict_pair(rank_budget: usize, seed: u64) -> Result<(DomainSpec, DomainSpec)> {
    make_conflict_pair_with(rank_budget, seed, &ConflictPairOptions::default())
}

pub fn make_conflict_pair_with(
    rank_budget: usize,
    seed: u64,
    opts: &ConflictPairOptions,
) -> Result<(DomainSpec, DomainSpec)> {
    if rank_budget == 0 {
        return Err(MoleError::Config("rank budget must be at least 1".into()));
    }
    let bl = opts.block_per_rank * rank_budget;
    let mk = |i: usize, name: &str| DomainParams {
        name: name.into(),
        block_start: i * bl,
        block_len: bl,
        question_range: Some((0, 2 * bl)),
        pairs: opts.pairs,
        answer_temperature: opts.answer_temperature,
        transition_temperature: 0.0,
        smoothing: opts.smoothing,
        conflict_group: Some(0),
        seed: derive_seed(seed, name),
    };
    Ok((DomainSpec::build(0, mk(0, "A"))?, DomainSpec::build(1, mk(1, "B"))?))
}

/// Three domains splitting `vocab` into blocks; names mirror a general /
/// document / biomedical mixture.
pub fn stock_domains(vocab: usize, seed: u64) -> Result<Vec<DomainSpec>> {
    let names = ["general", "document", "biomedicine"];
    let bl = vocab / names.len();
    if bl == 0 {
        return Err(MoleError::Config(format!("vocab {vocab} too small for stock domains")));
    }
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            DomainSpec::build(
                i,
                DomainParams {
                    name: (*name).into(),
                    block_start: i * bl,
                    block_len: bl,
                    question_range: None,
                    pairs: 8,
                    answer_temperature: 3.0,
                    transition_temperature: 1.0,
                    smoothing: 0.0,
                    conflict_group: None,
                    seed: derive_seed(seed, name),
                },
            )
        })
        .collect()
}

/// Writes `domain<TAB>question ids<TAB>answer ids` lines.
pub fn export_records<W: Write>(out: &mut W, instances: &[SyntheticInstance]) -> Result<()> {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    for inst in instances {
        writeln!(out, "{}\t{}\t{}", inst.domain, join(&inst.question), join(&inst.answer))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stock_mixture(weights: &[f64], seed: u64) -> MixtureSpec {
        let doms = stock_domains(60, 1).unwrap();
        MixtureSpec::new(doms.into_iter().zip(weights.iter().copied()).collect(), seed).unwrap()
    }

    fn fraction(mix: &MixtureSpec, n: usize, domain: usize) -> f64 {
        let s = mix.sample_stream(n).unwrap();
        s.iter().filter(|i| i.domain == domain).count() as f64 / n as f64
    }

    #[test]
    fn single_domain_stream() {
        let mix = stock_mixture(&[1.0], 0);
        assert!(mix.sample_stream(200).unwrap().iter().all(|i| i.domain == 0));
    }

    #[test]
    fn even_split_fraction() {
        let f = fraction(&stock_mixture(&[1.0, 1.0], 3), 10_000, 0);
        assert!((0.48..=0.52).contains(&f), "{f}");
    }

    #[test]
    fn one_to_two_split_fraction() {
        let f = fraction(&stock_mixture(&[1.0, 2.0], 4), 10_000, 1);
        assert!((0.64..=0.69).contains(&f), "{f}");
    }

    #[test]
    fn zero_weights_rejected() {
        let doms = stock_domains(60, 1).unwrap();
        let d: Vec<_> = doms.into_iter().map(|d| (d, 0.0)).collect();
        assert!(MixtureSpec::new(d, 0).is_err());
    }

    #[test]
    fn instances_stay_in_their_block_and_context() {
        let mix = stock_mixture(&[1.0, 1.0, 1.0], 5);
        for inst in mix.sample_stream(300).unwrap() {
            let p = &mix.domains[inst.domain].0.params;
            assert!(inst.tokens.iter().all(|&t| t >= p.block_start && t < p.block_start + p.block_len));
            assert_eq!(inst.tokens.len(), 2 * p.pairs);
        }
    }

    #[test]
    fn conflict_pair_is_orthogonal() {
        let (a, b) = make_conflict_pair(4, 9).unwrap();
        let v = a.max_token().max(b.max_token());
        let ua = a.ideal_update(v).unwrap();
        let ub = b.ideal_update(v).unwrap();
        let cross = ua.transpose().unwrap().matmul(&ub).unwrap();
        let ratio = cross.frobenius() / (ua.frobenius() * ub.frobenius());
        assert!(ratio < 0.01, "{ratio}");
        assert!(ua.frobenius() > 0.0 && ub.frobenius() > 0.0);
    }

    #[test]
    fn conflict_group_disagrees_on_shared_questions() {
        let (a, b) = make_conflict_pair(2, 1).unwrap();
        assert_eq!(a.params.conflict_group, b.params.conflict_group);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = a.sample(&mut rng).unwrap();
        // the same question sequence is possible under both domains
        assert!(a.question_probability(&inst.question) > 0.0);
        assert!(b.question_probability(&inst.question) > 0.0);
        // and the two answer functions map it differently
        let q = inst.question[0];
        let (pa, pb) = (a.answer_distribution(q).unwrap(), b.answer_distribution(q).unwrap());
        let a_mass_in_a: f64 = pa.iter().sum();
        assert!((a_mass_in_a - 1.0).abs() < 1e-12);
        // answers live on disjoint blocks, so no answer token is shared
        assert_ne!(a.params.block_start, b.params.block_start);
        assert_ne!(pa, pb);
    }

    #[test]
    fn export_format() {
        let inst = SyntheticInstance::new(2, vec![1, 4], vec![7, 9]);
        assert_eq!(inst.tokens, vec![1, 7, 4, 9]);
        let mut buf = Vec::new();
        export_records(&mut buf, &[inst]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "2\t1 4\t7 9\n");
    }

    #[test]
    fn question_probability_matches_empirical() {
        let p = DomainParams {
            name: "t".into(),
            block_start: 0,
            block_len: 3,
            question_range: None,
            pairs: 2,
            answer_temperature: 1.0,
            transition_temperature: 1.0,
            smoothing: 0.0,
            conflict_group: None,
            seed: 4,
        };
        let d = DomainSpec::build(0, p).unwrap();
        let total: f64 = (0..3)
            .flat_map(|a| (0..3).map(move |b| vec![a, b]))
            .map(|q| d.question_probability(&q))
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn stream_is_deterministic(seed in any::<u64>(), start in 0u64..1000) {
            let mix = stock_mixture(&[1.0, 0.5, 2.0], seed);
            prop_assert_eq!(mix.sample_range(start, 5).unwrap(), mix.sample_range(start, 5).unwrap());
            prop_assert_eq!(&mix.sample_range(start, 5).unwrap()[1], &mix.instance(start + 1).unwrap());
        }

        #[test]
        fn mask_marks_exactly_answers(seed in any::<u64>()) {
            let mix = stock_mixture(&[1.0, 1.0, 1.0], seed);
            for inst in mix.sample_stream(10).unwrap() {
                for (t, &m) in inst.loss_mask.iter().enumerate() {
                    prop_assert_eq!(m, t % 2 == 1);
                    if m {
                        prop_assert_eq!(inst.tokens[t], inst.answer[t / 2]);
                    } else {
                        prop_assert_eq!(inst.tokens[t], inst.question[t / 2]);
                    }
                }
            }
        }

        #[test]
        fn conflict_pair_orthogonal_any_seed(seed in any::<u64>(), r in 1usize..6) {
            let (a, b) = make_conflict_pair(r, seed).unwrap();
            let v = 16 * r;
            let ua = a.ideal_update(v).unwrap();
            let ub = b.ideal_update(v).unwrap();
            let cross = ua.transpose().unwrap().matmul(&ub).unwrap();
            prop_assert!(cross.frobenius() / (ua.frobenius() * ub.frobenius()) < 0.01);
        }
    }
}
