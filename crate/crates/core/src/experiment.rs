//! Runs, sweeps, cost audits and routing-statistics export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::{ConflictConfig, ExperimentConfig};
use crate::data::{domain_eval_set, MixtureSpec, SyntheticInstance};
use crate::error::{MoleError, Result};
use crate::model::{AdapterMode, Sequence, ToyTransformer};
use crate::moe_ffn::FlopReport;
use crate::train::{evaluate, train, StepRecord, TrainedModel};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATS_FILE: &str = "routing_stats.csv";
pub const CONFLICT_FILE: &str = "conflict_summary.txt";
pub const STATS_HEADER: &str = "layer,expert,domain,mean,std";

#[derive(Clone, Debug, PartialEq)]
pub struct DomainEval {
    pub domain: String,
    pub loss: f64,
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub label: String,
    pub mode: AdapterMode,
    pub experts: usize,
    pub rank: usize,
    pub eval: Vec<DomainEval>,
    /// Mean over MoE layers of the final step's max load fraction.
    pub final_max_load: Option<f64>,
    pub trainable_params: usize,
    /// FFN MACs per token summed over layers, for the run's mode.
    pub ffn_macs_per_token: u128,
    pub metrics: Vec<StepRecord>,
}

impl RunReport {
    pub fn loss(&self, domain: &str) -> Option<f64> {
        self.eval.iter().find(|e| e.domain == domain).map(|e| e.loss)
    }
}

/// One row of the routing-statistics file.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsRow {
    pub layer: usize,
    pub expert: usize,
    pub domain: String,
    pub mean: f64,
    pub std: f64,
}

/// Held-out instances of every domain in the mixture.
pub fn eval_sets(mix: &MixtureSpec, n: usize, seed: u64) -> Result<Vec<(String, Vec<SyntheticInstance>)>> {
    mix.domains
        .iter()
        .map(|(d, _)| Ok((d.params.name.clone(), domain_eval_set(d, n, seed)?)))
        .collect()
}

/// Per (layer, expert, domain) mean and std of token proportions.
pub fn export_routing_stats(
    model: &ToyTransformer,
    sets: &[(String, Vec<SyntheticInstance>)],
) -> Result<Vec<StatsRow>> {
    if model.num_moe_layers() == 0 {
        return Err(MoleError::NoMoeLayers);
    }
    let mut rows = Vec::new();
    for (name, instances) in sets {
        let seqs: Vec<Sequence> = instances.iter().map(SyntheticInstance::sequence).collect();
        for layer in model.collect_routing_stats(&seqs)? {
            for (j, (&mean, &std)) in layer.mean.iter().zip(&layer.std).enumerate() {
                rows.push(StatsRow {
                    layer: layer.layer,
                    expert: j,
                    domain: name.clone(),
                    mean,
                    std,
                });
            }
        }
    }
    rows.sort_by(|a, b| (a.layer, &a.domain, a.expert).cmp(&(b.layer, &b.domain, b.expert)));
    Ok(rows)
}

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut s = format!("{STATS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.layer, r.expert, r.domain, r.mean, r.std);
    }
    s
}

pub fn parse_stats_csv(text: &str) -> Result<Vec<StatsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(STATS_HEADER) {
        return Err(MoleError::Contract("routing stats file lacks its header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || MoleError::Contract(format!("malformed stats row: {l}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(StatsRow {
                layer: f[0].parse().map_err(|_| bad())?,
                expert: f[1].parse().map_err(|_| bad())?,
                domain: f[2].to_string(),
                mean: f[3].parse().map_err(|_| bad())?,
                std: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn mode_total(r: &FlopReport, mode: AdapterMode) -> u128 {
    match mode {
        AdapterMode::PlainLora => r.plain_total,
        AdapterMode::MoleSparse => r.sparse_total,
        AdapterMode::MoleDense => r.dense_total,
    }
}

fn build_model(cfg: &ExperimentConfig) -> Result<ToyTransformer> {
    ToyTransformer::new(cfg.model.clone(), cfg.train.adapter_spec())
}

/// Trains one configuration and evaluates it on every mixture domain,
/// regardless of the domain's training weight.
pub fn train_and_eval(cfg: &ExperimentConfig, label: &str) -> Result<(TrainedModel, RunReport)> {
    cfg.validate()?;
    let mix = cfg.build_mixture()?;
    let model = build_model(cfg)?;
    let trained = train(model, &mix, &cfg.train)?;
    let sets = eval_sets(&mix, cfg.report.eval_instances, cfg.report.eval_seed)?;
    let eval = sets
        .iter()
        .map(|(name, inst)| {
            Ok(DomainEval {
                domain: name.clone(),
                loss: evaluate(&trained.model, inst)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let final_max_load = trained
        .metrics
        .last()
        .filter(|m| !m.max_load.is_empty())
        .map(|m| m.max_load.iter().sum::<f64>() / m.max_load.len() as f64);
    let report = RunReport {
        label: label.to_string(),
        mode: cfg.train.mode,
        experts: cfg.train.adapter_spec().experts,
        rank: cfg.train.rank,
        eval,
        final_max_load,
        trainable_params: trained.model.trainable_param_count(),
        ffn_macs_per_token: trained.model.ffn_flops(1).iter().map(|r| mode_total(r, cfg.train.mode)).sum(),
        metrics: trained.metrics.clone(),
    };
    Ok((trained, report))
}

/// Paths of the artifacts written by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub routing_stats: PathBuf,
    pub conflict_summary: Option<PathBuf>,
    pub report: RunReport,
    pub conflict: Option<ConflictSummary>,
}

pub fn metrics_csv(metrics: &[StepRecord], layers: usize) -> String {
    let mut s = StepRecord::csv_header(layers);
    s.push('\n');
    for m in metrics {
        s.push_str(&m.csv_line());
        s.push('\n');
    }
    s
}

/// Trains the configured run and writes checkpoint, metrics and routing stats
/// into the output directory; with a `[conflict]` section also runs the
/// conflict protocol and writes its summary table.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let (trained, report) = train_and_eval(cfg, "run")?;
    let steps = cfg.train.total_steps as u64;
    let ck = Checkpoint::capture(cfg, &trained.model, Some(&trained.optimizer), steps)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    ck.save(&checkpoint)?;
    let metrics = out.join(METRICS_FILE);
    write_atomic(&metrics, metrics_csv(&trained.metrics, trained.model.num_moe_layers()).as_bytes())?;
    let routing_stats = out.join(STATS_FILE);
    let rows = if trained.model.num_moe_layers() > 0 {
        let mix = cfg.build_mixture()?;
        export_routing_stats(&trained.model, &eval_sets(&mix, cfg.report.eval_instances, cfg.report.eval_seed)?)?
    } else {
        Vec::new()
    };
    write_atomic(&routing_stats, stats_csv(&rows).as_bytes())?;

    let (conflict, conflict_summary) = match &cfg.conflict {
        Some(cc) => {
            let summary = run_conflict(cfg, cc)?;
            let path = out.join(CONFLICT_FILE);
            write_atomic(&path, summary.table().as_bytes())?;
            (Some(summary), Some(path))
        }
        None => (None, None),
    };
    Ok(RunArtifacts {
        checkpoint,
        metrics,
        routing_stats,
        conflict_summary,
        report,
        conflict,
    })
}

/// Results of the conflict protocol on a two-domain conflict mixture.
#[derive(Clone, Debug)]
pub struct ConflictSummary {
    pub domains: [String; 2],
    pub floors: [f64; 2],
    pub single: [RunReport; 2],
    /// Plain-LoRA runs on the mixture, by increasing rank.
    pub plain_mix: Vec<RunReport>,
    pub moe: RunReport,
    pub conflict_margin: f64,
    pub floor_tolerance: f64,
}

impl ConflictSummary {
    pub fn worst_floor(&self) -> f64 {
        self.floors[0].max(self.floors[1])
    }

    /// Largest relative excess of a mixture run over the worse single-domain floor.
    pub fn conflict_gap(&self, run: &RunReport) -> f64 {
        let f = self.worst_floor();
        self.domains
            .iter()
            .filter_map(|d| run.loss(d))
            .map(|l| ((l - f) / f).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Relative excess of a run over each domain's own floor.
    pub fn floor_excess(&self, run: &RunReport) -> [f64; 2] {
        let ex = |i: usize| {
            let l = run.loss(&self.domains[i]).unwrap_or(f64::INFINITY);
            (l - self.floors[i]) / self.floors[i]
        };
        [ex(0), ex(1)]
    }

    pub fn conflict_observed(&self) -> bool {
        self.plain_mix
            .first()
            .is_some_and(|r| self.conflict_gap(r) >= self.conflict_margin)
    }

    pub fn moe_recovers(&self) -> bool {
        self.floor_excess(&self.moe).iter().all(|&e| e <= self.floor_tolerance)
    }

    /// Gaps of the plain mixture runs, in rank order.
    pub fn rank_gaps(&self) -> Vec<(usize, f64)> {
        self.plain_mix.iter().map(|r| (r.rank, self.conflict_gap(r))).collect()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let [a, b] = &self.domains;
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "run", "rank", "K", "params", a, b, "gap", "max_excess"
        );
        let mut row = |r: &RunReport, gap: Option<f64>| {
            let ex = self.floor_excess(r);
            let gap = gap.map_or("-".to_string(), |g| format!("{:.4}", g));
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>5} {:>10} {:>10.4} {:>10.4} {:>10} {:>10.4}",
                r.label,
                r.rank,
                r.experts,
                r.trainable_params,
                r.loss(a).unwrap_or(f64::NAN),
                r.loss(b).unwrap_or(f64::NAN),
                gap,
                ex[0].max(ex[1])
            );
        };
        for r in &self.single {
            row(r, None);
        }
        for r in &self.plain_mix {
            row(r, Some(self.conflict_gap(r)));
        }
        row(&self.moe, Some(self.conflict_gap(&self.moe)));
        let _ = writeln!(s);
        let _ = writeln!(s, "floors: {a} {:.4}, {b} {:.4}", self.floors[0], self.floors[1]);
        let _ = writeln!(
            s,
            "conflict at base rank (gap >= {:.2}): {}",
            self.conflict_margin,
            self.conflict_observed()
        );
        let _ = writeln!(
            s,
            "moe within {:.2} of both floors: {}",
            self.floor_tolerance,
            self.moe_recovers()
        );
        s
    }
}

/// Single-domain floors, plain mixtures at each rank multiple and a
/// K-expert MoLE at the base rank, all from the same frozen base.
pub fn run_conflict(cfg: &ExperimentConfig, cc: &ConflictConfig) -> Result<ConflictSummary> {
    let mix = cfg.build_mixture()?;
    if mix.domains.len() != 2 {
        return Err(MoleError::Config("conflict protocol needs exactly two domains".into()));
    }
    let names = [mix.domains[0].0.params.name.clone(), mix.domains[1].0.params.name.clone()];
    let base_rank = cfg.train.rank;
    let variant = |mode: AdapterMode, experts: usize, rank: usize, weights: Option<[f64; 2]>| {
        let mut c = cfg.clone();
        c.conflict = None;
        c.train.mode = mode;
        c.train.experts = experts;
        c.train.rank = rank;
        match weights {
            Some(w) => *c.mixture.weights_mut() = w.to_vec(),
            None if cc.equal_exposure => {
                let mixed = c.mixture.weights().iter().filter(|&&w| w > 0.0).count();
                c.train.batch_size *= mixed;
            }
            None => {}
        }
        c
    };

    let mut single = Vec::new();
    for (i, w) in [[1.0, 0.0], [0.0, 1.0]].into_iter().enumerate() {
        let c = variant(AdapterMode::PlainLora, 1, base_rank, Some(w));
        single.push(train_and_eval(&c, &format!("plain r={base_rank} {}", names[i]))?.1);
    }
    let floors = [
        single[0].loss(&names[0]).expect("evaluated"),
        single[1].loss(&names[1]).expect("evaluated"),
    ];
    let mut plain_mix = Vec::new();
    for &m in &cc.rank_multipliers {
        let c = variant(AdapterMode::PlainLora, 1, m * base_rank, None);
        plain_mix.push(train_and_eval(&c, &format!("plain r={} mix", m * base_rank))?.1);
    }
    let c = variant(AdapterMode::MoleSparse, cc.moe_experts, base_rank, None);
    let moe = train_and_eval(&c, &format!("mole {}x r={base_rank} mix", cc.moe_experts))?.1;
    let single: [RunReport; 2] = single.try_into().expect("two runs");
    Ok(ConflictSummary {
        domains: names,
        floors,
        single,
        plain_mix,
        moe,
        conflict_margin: cc.conflict_margin,
        floor_tolerance: cc.floor_tolerance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Experts,
    Rank,
    Mode,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "experts" => Ok(Self::Experts),
            "rank" => Ok(Self::Rank),
            "mode" => Ok(Self::Mode),
            _ => Err(MoleError::Config(format!("unknown sweep axis {s:?} (experts, rank, mode)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Experts => "experts",
            Self::Rank => "rank",
            Self::Mode => "mode",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Experts => &["2", "3", "5", "8", "16"],
            Self::Rank => &["32", "64", "96", "128"],
            Self::Mode => &["plain-lora", "mole-sparse", "mole-dense"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// The base config with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        c.conflict = None;
        let num = || {
            value
                .parse::<usize>()
                .map_err(|_| MoleError::Config(format!("sweep value {value:?} is not a count")))
        };
        match self {
            Self::Experts => {
                c.train.experts = num()?;
                if !c.train.mode.is_moe() {
                    c.train.mode = AdapterMode::MoleSparse;
                }
            }
            Self::Rank => c.train.rank = num()?,
            Self::Mode => {
                c.train.mode = match value {
                    "plain-lora" => AdapterMode::PlainLora,
                    "mole-sparse" => AdapterMode::MoleSparse,
                    "mole-dense" => AdapterMode::MoleDense,
                    _ => return Err(MoleError::Config(format!("unknown mode {value:?}"))),
                }
            }
        }
        c.output_dir = base.output_dir.join(format!("sweep-{}-{value}", self.name()));
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: String,
    pub outcome: std::result::Result<RunReport, String>,
}

/// One full run per axis value; failures are recorded and the sweep goes on.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Vec<SweepRow> {
    values
        .iter()
        .map(|v| {
            let outcome = axis
                .apply(base, v)
                .and_then(|c| run_experiment(&c).map(|a| a.report))
                .map_err(|e| e.to_string());
            SweepRow {
                value: v.clone(),
                outcome,
            }
        })
        .collect()
}

pub fn sweep_table(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let domains: Vec<String> = rows
        .iter()
        .find_map(|r| r.outcome.as_ref().ok())
        .map(|r| r.eval.iter().map(|e| e.domain.clone()).collect())
        .unwrap_or_default();
    let mut s = format!("{:<12} {:>10} {:>14} {:>9}", axis.name(), "params", "ffn_macs/tok", "max_load");
    for d in &domains {
        let _ = write!(s, " {:>12}", d);
    }
    s.push('\n');
    for r in rows {
        match &r.outcome {
            Ok(rep) => {
                let load = rep.final_max_load.map_or("-".into(), |l| format!("{l:.3}"));
                let _ = write!(
                    s,
                    "{:<12} {:>10} {:>14} {:>9}",
                    r.value, rep.trainable_params, rep.ffn_macs_per_token, load
                );
                for d in &domains {
                    let _ = write!(s, " {:>12.4}", rep.loss(d).unwrap_or(f64::NAN));
                }
                s.push('\n');
            }
            Err(e) => {
                let _ = writeln!(s, "{:<12} failed: {e}", r.value);
            }
        }
    }
    s
}

/// FLOP and parameter report for a config, without training.
pub fn audit(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let mix = cfg.build_mixture()?;
    let tokens = cfg.train.batch_size * mix.max_sequence_len();
    let frozen: usize = model.store.params().iter().filter(|p| !p.trainable).map(|p| p.value.len()).sum();
    let mut s = String::new();
    let spec = cfg.train.adapter_spec();
    let _ = writeln!(
        s,
        "mode {} experts {} rank {} alpha {}",
        spec.mode.name(),
        spec.experts,
        spec.rank,
        spec.alpha
    );
    let _ = writeln!(s, "trainable params {}", model.trainable_param_count());
    let _ = writeln!(s, "frozen params {frozen}");
    let _ = writeln!(s, "ffn MACs for one batch of {tokens} tokens:");
    let _ = writeln!(
        s,
        "{:<6} {:>12} {:>10} {:>14} {:>14} {:>14} {:>14} {:>12} {:>8}",
        "layer", "base", "router", "expert_sparse", "expert_dense", "plain_total", "sparse_total", "sparse/plain", "dense/sp"
    );
    for (l, r) in model.ffn_flops(tokens).iter().enumerate() {
        let ratio = r.sparse_over_plain();
        let dense = if r.expert_sparse > 0 {
            r.dense_over_sparse_experts().to_string()
        } else {
            "-".into()
        };
        let _ = writeln!(
            s,
            "{:<6} {:>12} {:>10} {:>14} {:>14} {:>14} {:>14} {:>12} {:>8}",
            l, r.base, r.router, r.expert_sparse, r.expert_dense, r.plain_total, r.sparse_total, ratio, dense
        );
    }
    Ok(s)
}

/// Loads a checkpoint and exports routing stats on the given eval mixture.
pub fn stats_from_checkpoint(path: &Path, eval: &MixtureSpec, n: usize, seed: u64) -> Result<Vec<StatsRow>> {
    let (_, model, _) = Checkpoint::load(path)?.restore()?;
    export_routing_stats(&model, &eval_sets(eval, n, seed)?)
}
