use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::baselines::{diversity_sampler, random_sampler, uncertainty_sampler};
use crate::config::{content_hash, RunConfig};
use crate::datamodel::{Dataset, SpotId};
use crate::error::{Error, Result};
use crate::policy::{ActiveSampler, Budget, Episode};
use crate::predictor::{continue_training, train, PredictorModel};
use crate::rewards::RewardContext;
use crate::scalar::Scalar;

use super::{crossval_split, metrics, MetricTriple};

pub const PROGRESS_FILE: &str = "progress.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Scrl,
    Random,
    Uncertainty,
    Diversity,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Scrl, Strategy::Random, Strategy::Uncertainty, Strategy::Diversity];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Scrl => "scrl",
            Strategy::Random => "random",
            Strategy::Uncertainty => "uncertainty",
            Strategy::Diversity => "diversity",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (scrl, random, uncertainty, diversity)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub strategies: Vec<Strategy>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub folds: usize,
    /// Held-out folds to run; all folds when absent.
    pub eval_folds: Option<Vec<usize>>,
    pub split_seed: u64,
    /// Worker threads; `SCRL_THREADS` overrides.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            ratios: vec![0.10, 0.25, 0.50, 0.75],
            seeds: vec![0, 1, 2],
            folds: 4,
            eval_folds: None,
            split_seed: 0,
            threads: 1,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one strategy, ratio and seed".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("sweep ratio {r} outside (0, 1]")));
        }
        if let Some(f) = self.eval_folds.iter().flatten().find(|&&f| f >= self.folds) {
            return Err(Error::Config(format!("eval fold {f} out of range for {} folds", self.folds)));
        }
        Ok(())
    }

    fn fold_list(&self) -> Vec<usize> {
        self.eval_folds.clone().unwrap_or_else(|| (0..self.folds).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub strategy: Strategy,
    pub ratio: f64,
    pub fold: usize,
    pub seed: u64,
}

impl CellKey {
    fn tag(&self) -> (Strategy, u64, usize, u64) {
        (self.strategy, self.ratio.to_bits(), self.fold, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub ratio: f64,
    pub fold: usize,
    pub seed: u64,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub pcc: Option<f64>,
    pub final_reward: Option<f64>,
    pub status: String,
}

impl SweepRow {
    pub fn key(&self) -> CellKey {
        CellKey {
            strategy: self.strategy,
            ratio: self.ratio,
            fold: self.fold,
            seed: self.seed,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn metrics(&self) -> Option<MetricTriple> {
        Some(MetricTriple {
            mse: self.mse?,
            mae: self.mae?,
            pcc: self.pcc?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// Training and held-out rows for one fold of the sample-level split.
pub fn fold_rows<T: Scalar>(ds: &Dataset<T>, folds: usize, split_seed: u64, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let slides = ds.slides();
    let assign = crossval_split(&slides, folds, split_seed)?;
    let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&r| assign[&ds.spots[r].slide_id] == fold);
    Ok((train, test))
}

/// Pool chosen by one strategy, plus whatever the strategy produced on the way.
#[derive(Debug, Clone)]
pub struct Selection<T> {
    pub pool: Vec<SpotId>,
    pub episodes: Vec<Episode>,
    /// Present when the predictor was trained during sampling.
    pub model: Option<PredictorModel<T>>,
}

/// Runs `strategy` over the candidate rows with a budget of
/// `⌈ratio · |candidates|⌉` spots.
pub fn select_pool<T: Scalar>(
    strategy: Strategy,
    ds: &Dataset<T>,
    candidates: &[usize],
    ratio: f64,
    cfg: &RunConfig,
    seed: u64,
    ctx: &RewardContext<T>,
) -> Result<Selection<T>> {
    let b = Budget::Ratio(ratio).resolve(candidates.len())?;
    let ids: Vec<SpotId> = candidates.iter().map(|&r| ds.spots[r].spot_id).collect();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let plain = |pool| Selection {
        pool,
        episodes: Vec::new(),
        model: None,
    };
    match strategy {
        Strategy::Random => Ok(plain(random_sampler(&ids, b, seed)?)),
        Strategy::Diversity => {
            let x = ds.features.select_rows(candidates);
            Ok(plain(diversity_sampler(&x, &ids, b, &cfg.baseline, seed)?))
        }
        Strategy::Uncertainty => {
            let warm_n = ((cfg.baseline.warm_start_ratio * ids.len() as f64).ceil() as usize).clamp(1, b);
            let mut pool = random_sampler(&ids, warm_n, seed)?;
            if warm_n < b {
                ds.reveal(&pool)?;
                let (model, _) = train(ds, &pool, &train_cfg)?;
                let rest: Vec<usize> = candidates
                    .iter()
                    .copied()
                    .filter(|&r| !pool.contains(&ds.spots[r].spot_id))
                    .collect();
                let rest_ids: Vec<SpotId> = rest.iter().map(|&r| ds.spots[r].spot_id).collect();
                let mut bcfg = cfg.baseline.clone();
                bcfg.seed = seed;
                let x = ds.features.select_rows(&rest);
                pool.extend(uncertainty_sampler(&model, &x, &rest_ids, b - warm_n, &bcfg)?);
            }
            Ok(plain(pool))
        }
        Strategy::Scrl => {
            let mut scfg = cfg.sampler.clone();
            scfg.budget = Budget::Count(b);
            scfg.rounds = scfg.rounds.min(b);
            scfg.seed = seed;
            let mut sampler = ActiveSampler::new(ds, candidates, &scfg)?;
            let mut model = None;
            let mut epoch = 0;
            while sampler.step(ds, ctx)?.is_some() {
                if let Some(k) = scfg.interleave_epochs {
                    let m = model.get_or_insert_with(|| PredictorModel::untrained(ds.feature_dim(), ds.gene_count(), &train_cfg));
                    let end = (epoch + k).min(train_cfg.epochs);
                    if epoch < end {
                        continue_training(m, ds, sampler.pool(), epoch..end)?;
                        epoch = end;
                    }
                }
            }
            if let Some(m) = model.as_mut() {
                if epoch < train_cfg.epochs {
                    continue_training(m, ds, sampler.pool(), epoch..train_cfg.epochs)?;
                }
            }
            let run = sampler.finish();
            Ok(Selection {
                pool: run.pool,
                episodes: run.episodes,
                model,
            })
        }
    }
}

/// Reveals `pool`, trains on it (unless `model` is given) and scores the
/// held-out rows.
pub fn evaluate_pool<T: Scalar>(
    ds: &Dataset<T>,
    pool: &[SpotId],
    test_rows: &[usize],
    cfg: &RunConfig,
    seed: u64,
    model: Option<PredictorModel<T>>,
) -> Result<(MetricTriple, PredictorModel<T>)> {
    ds.reveal(pool)?;
    let model = match model {
        Some(m) => m,
        None => {
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            train(ds, pool, &tc)?.0
        }
    };
    let pred = model.predict(&ds.features.select_rows(test_rows))?;
    let m = metrics(&ds.ground_truth(test_rows), &pred)?;
    Ok((m, model))
}

fn pool_reward<T: Scalar>(ds: &Dataset<T>, pool: &[SpotId], candidates: &[usize], ctx: &RewardContext<T>) -> Result<f64> {
    let batch = ds.reveal(pool)?;
    let z = ctx.embeddings_for(&batch);
    let coords = |rows: &[usize]| -> Vec<[T; 2]> {
        rows.iter()
            .map(|&r| {
                let [x, y] = ds.coords(r);
                [T::of(x), T::of(y)]
            })
            .collect()
    };
    let sampled = coords(&ds.rows_of(pool)?);
    Ok(ctx.evaluate(&z, &sampled, &coords(candidates))?.combined)
}

fn run_cell<T: Scalar>(base: &Dataset<T>, key: CellKey, cfg: &RunConfig, ctx: &RewardContext<T>) -> SweepRow {
    let ds = base.clone();
    ds.reset_revealed();
    let outcome = (|| -> Result<(MetricTriple, f64)> {
        let (train_rows, test_rows) = fold_rows(&ds, cfg.sweep.folds, cfg.sweep.split_seed, key.fold)?;
        if test_rows.is_empty() || train_rows.is_empty() {
            return Err(Error::Config(format!("fold {} leaves an empty split", key.fold)));
        }
        let sel = select_pool(key.strategy, &ds, &train_rows, key.ratio, cfg, key.seed, ctx)?;
        let reward = pool_reward(&ds, &sel.pool, &train_rows, ctx)?;
        let (m, _) = evaluate_pool(&ds, &sel.pool, &test_rows, cfg, key.seed, sel.model)?;
        Ok((m, reward))
    })();
    let mut row = SweepRow {
        strategy: key.strategy,
        ratio: key.ratio,
        fold: key.fold,
        seed: key.seed,
        mse: None,
        mae: None,
        pcc: None,
        final_reward: None,
        status: "ok".into(),
    };
    match outcome {
        Ok((m, r)) => {
            row.mse = Some(m.mse);
            row.mae = Some(m.mae);
            row.pcc = Some(m.pcc);
            row.final_reward = Some(r);
        }
        Err(e) => {
            warn!("cell {key:?} failed: {e}");
            row.status = format!("failed: {e}");
        }
    }
    row
}

/// Hash of everything that changes a cell's result.
fn cell_config_hash(cfg: &RunConfig) -> String {
    let v = serde_json::json!({
        "reward": cfg.reward,
        "sampler": cfg.sampler,
        "baseline": cfg.baseline,
        "train": cfg.train,
        "folds": cfg.sweep.folds,
        "split_seed": cfg.sweep.split_seed,
    });
    content_hash(v.to_string().as_bytes())
}

#[derive(Serialize, Deserialize)]
struct ProgressLine {
    config_hash: String,
    row: SweepRow,
}

fn read_progress(path: &Path, hash: &str) -> HashMap<(Strategy, u64, usize, u64), SweepRow> {
    let mut done = HashMap::new();
    let Ok(f) = fs::File::open(path) else {
        return done;
    };
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let Ok(line) = line else { break };
        match serde_json::from_str::<ProgressLine>(&line) {
            Ok(p) if p.config_hash == hash && p.row.is_ok() => {
                done.insert(p.row.key().tag(), p.row);
            }
            Ok(_) => {}
            Err(e) => warn!("{}:{}: skipping unreadable progress line ({e})", path.display(), i + 1),
        }
    }
    done
}

fn worker_count(cfg: &SweepConfig) -> usize {
    std::env::var("SCRL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(cfg.threads)
        .max(1)
}

/// Runs every (fold, seed, strategy, ratio) cell. With `progress_dir`, each
/// finished cell is appended to `progress.jsonl` there and cells already
/// recorded under the same configuration are skipped.
pub fn budget_sweep<T: Scalar>(ds: &Dataset<T>, cfg: &RunConfig, progress_dir: Option<&Path>) -> Result<SweepReport> {
    cfg.sweep.validate()?;
    // fail on an impossible split up front rather than once per cell
    crossval_split(&ds.slides(), cfg.sweep.folds, cfg.sweep.split_seed)?;
    let ctx = RewardContext::fit(&ds.reference, &cfg.reward)?;
    let hash = cell_config_hash(cfg);

    let mut keys = Vec::new();
    for fold in cfg.sweep.fold_list() {
        for &seed in &cfg.sweep.seeds {
            for &strategy in &cfg.sweep.strategies {
                for &ratio in &cfg.sweep.ratios {
                    keys.push(CellKey { strategy, ratio, fold, seed });
                }
            }
        }
    }

    let progress = match progress_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(dir.join(PROGRESS_FILE))
        }
        None => None,
    };
    let mut results: BTreeMap<usize, SweepRow> = BTreeMap::new();
    if let Some(p) = &progress {
        let done = read_progress(p, &hash);
        for (i, k) in keys.iter().enumerate() {
            if let Some(row) = done.get(&k.tag()) {
                results.insert(i, row.clone());
            }
        }
        if !results.is_empty() {
            info!("resuming sweep: {} of {} cells already complete", results.len(), keys.len());
        }
    }
    let todo: Vec<usize> = (0..keys.len()).filter(|i| !results.contains_key(i)).collect();
    let mut log = match &progress {
        Some(p) => {
            // a crash can leave a partial last line; start the next record on a fresh one
            let torn = fs::read(p).map(|b| b.last().is_some_and(|&c| c != b'\n')).unwrap_or(false);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            if torn {
                writeln!(f).map_err(|e| Error::io(p, e))?;
            }
            Some(f)
        }
        None => None,
    };

    let threads = worker_count(&cfg.sweep).min(todo.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, SweepRow)>();
    std::thread::scope(|s| -> Result<()> {
        for _ in 0..threads {
            let tx = tx.clone();
            let (next, todo, keys, ctx) = (&next, &todo, &keys, &ctx);
            s.spawn(move || loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&i) = todo.get(j) else { break };
                info!("cell {}/{}: {:?}", j + 1, todo.len(), keys[i]);
                if tx.send((i, run_cell(ds, keys[i], cfg, ctx))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, row) in rx {
            if let (Some(f), Some(p)) = (log.as_mut(), &progress) {
                let line = ProgressLine {
                    config_hash: hash.clone(),
                    row: row.clone(),
                };
                let text = serde_json::to_string(&line).expect("progress line serializes");
                writeln!(f, "{text}").and_then(|_| f.flush()).map_err(|e| Error::io(p, e))?;
            }
            results.insert(i, row);
        }
        Ok(())
    })?;
    Ok(SweepReport {
        rows: results.into_values().collect(),
    })
}
