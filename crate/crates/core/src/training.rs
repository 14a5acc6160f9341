//! Weakly supervised training with a triplet ranking loss and cached
//! hard-negative mining, plus VLAD cluster initialization.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta, Moments};
use crate::dataset::{geo_distance, mine_triplets_at, MiningConfig, TripletSpec};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_model;
use crate::model::{FusionVpr, ModelConfig, PreparedSet};
use crate::nn::Mode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterInit {
    pub enabled: bool,
    /// Database images run through the network to collect local features.
    pub images: usize,
    /// Local features sampled per VLAD layer.
    pub samples: usize,
    pub iterations: usize,
    /// Mean largest soft-assignment the sharpness `α` is fitted to.
    pub target_assignment: f64,
}

impl Default for ClusterInit {
    fn default() -> Self {
        Self {
            enabled: true,
            images: 64,
            samples: 4096,
            iterations: 20,
            target_assignment: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mining: MiningConfig,
    pub margin: f64,
    /// Queries per optimizer step.
    pub batch_size: usize,
    /// Potential positives per query, nearest first.
    pub max_positives: usize,
    pub epochs: usize,
    pub max_iterations: Option<usize>,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied when validation Recall@1 plateaus.
    pub lr_decay: f64,
    /// Evaluations without improvement before decaying.
    pub plateau_patience: usize,
    /// Batches between descriptor-cache rebuilds.
    pub cache_refresh: usize,
    /// Batches between validation evaluations.
    pub eval_every: usize,
    pub eval_batch: usize,
    /// True-positive radius for validation, meters.
    pub phi: f64,
    pub seed: u64,
    pub precision: Precision,
    pub cluster_init: ClusterInit,
    /// Per training query: with this probability, blank one modality
    /// (frames or events, equally likely).
    pub modality_dropout: f64,
    /// Also drop modalities on the positive/negative database rows.
    pub dropout_database: bool,
    /// EMA factor for the smoothed loss in the log.
    pub loss_smoothing: f64,
    /// Return the best-validation parameters rather than the last iterate.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mining: MiningConfig::default(),
            margin: 0.1,
            batch_size: 4,
            max_positives: 4,
            epochs: 30,
            max_iterations: None,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay: 0.5,
            plateau_patience: 3,
            cache_refresh: 250,
            eval_every: 250,
            eval_batch: 16,
            phi: 75.0,
            seed: 0,
            precision: Precision::F32,
            cluster_init: ClusterInit::default(),
            modality_dropout: 0.0,
            dropout_database: false,
            loss_smoothing: 0.9,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mining.validate()?;
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.batch_size == 0 || self.max_positives == 0 || self.mining.negatives_per_query == 0 {
            return Err(Error::Config("batch size, positives and negatives per query must be positive".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) || !(0.0..1.0).contains(&self.loss_smoothing) {
            return Err(Error::Config("modality_dropout must lie in [0,1] and loss_smoothing in [0,1)".into()));
        }
        if self.cache_refresh == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return Err(Error::Config("cache_refresh, eval_every and eval_batch must be positive".into()));
        }
        Ok(())
    }
}

// ---- loss ------------------------------------------------------------------

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// `Σⱼ max(0, minᵢ‖q−pᵢ‖² − ‖q−nⱼ‖² + ε)`.
pub fn triplet_loss(q: &[f32], positives: &[&[f32]], negatives: &[&[f32]], margin: f64) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Validation("triplet loss needs at least one positive and one negative".into()));
    }
    let best = positives.iter().map(|p| sq_dist(q, p)).fold(f64::INFINITY, f64::min);
    Ok(negatives.iter().map(|n| (best - sq_dist(q, n) + margin).max(0.0)).sum())
}

/// Differentiable form: `q` is `(N,)`, positives `(P, N)`, negatives `(M, N)`.
pub fn triplet_loss_tensor(q: &Tensor, positives: &Tensor, negatives: &Tensor, margin: f64) -> Result<Tensor> {
    if positives.dim(0)? == 0 || negatives.dim(0)? == 0 {
        return Err(Error::Validation("triplet loss needs at least one positive and one negative".into()));
    }
    let q = q.unsqueeze(0)?;
    let dp = positives.broadcast_sub(&q)?.sqr()?.sum(1)?.min(0)?;
    let dn = negatives.broadcast_sub(&q)?.sqr()?.sum(1)?;
    let hinge = ((dn.neg()?.broadcast_add(&dp))? + margin)?.relu()?;
    Ok(hinge.sum_all()?)
}

// ---- optimizer -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
}

pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: Vec<(String, Var, Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(model: &FusionVpr, config: &TrainConfig) -> Result<Self> {
        let slots = model
            .store
            .trainable()
            .into_iter()
            .map(|e| {
                let z = e.var.zeros_like()?;
                Ok((e.name, e.var, z.clone(), z))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots,
        })
    }

    pub fn meta(&self) -> OptimizerMeta {
        OptimizerMeta {
            kind: self.kind,
            learning_rate: self.learning_rate,
            step: self.step,
        }
    }

    /// First/second moment buffers by parameter name.
    pub fn moments(&self) -> Moments {
        self.slots
            .iter()
            .map(|(n, _, m, v)| (n.clone(), m.clone(), v.clone()))
            .collect()
    }

    pub fn restore(&mut self, meta: &OptimizerMeta, moments: &Moments) -> Result<()> {
        self.kind = meta.kind;
        self.learning_rate = meta.learning_rate;
        self.step = meta.step;
        for (name, _, m, v) in &mut self.slots {
            if let Some((_, mm, vv)) = moments.iter().find(|(n, _, _)| n == name) {
                *m = mm.clone();
                *v = vv.clone();
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.learning_rate;
        for (_, var, m, v) in &mut self.slots {
            let Some(g) = grads.get(var) else { continue };
            // Leaf gradients still reference the forward graph; keeping them
            // in the moment buffers would chain every step's graph together.
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.weight_decay)?)?;
            }
            match self.kind {
                OptimizerKind::Adam => {
                    *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
                    *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
                    let mhat = (&*m / (1.0 - self.beta1.powi(t)))?;
                    let vhat = (&*v / (1.0 - self.beta2.powi(t)))?;
                    let update = (mhat / (vhat.sqrt()? + self.eps)?)?;
                    var.set(&(var.as_tensor() - (update * lr)?)?)?;
                }
                OptimizerKind::Sgd => {
                    *m = ((&*m * self.momentum)? + &g)?;
                    var.set(&(var.as_tensor() - (&*m * lr)?)?)?;
                }
            }
        }
        Ok(())
    }
}

// ---- cluster initialization --------------------------------------------------

/// Seeded k-means with k-means++ seeding. `data` is row-major `n × dim`.
pub fn kmeans(data: &[f64], dim: usize, k: usize, iterations: usize, seed: u64) -> Vec<f64> {
    let n = data.len() / dim;
    assert!(n >= k && k > 0, "k-means needs at least k samples");
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<f64> = row(rng.random_range(0..n)).to_vec();
    let mut nearest: Vec<f64> = (0..n).map(|i| d2(row(i), &centers[..dim])).collect();
    while centers.len() < k * dim {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            nearest
                .iter()
                .position(|&w| {
                    r -= w;
                    r < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, nd) in nearest.iter_mut().enumerate() {
            *nd = nd.min(d2(row(i), &c));
        }
        centers.extend(c);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iterations {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = (0..k)
                .min_by(|&x, &y| {
                    d2(row(i), &centers[x * dim..(x + 1) * dim]).total_cmp(&d2(row(i), &centers[y * dim..(y + 1) * dim]))
                })
                .unwrap_or(0);
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            } else {
                // Empty cluster: move it to the worst-served sample.
                let far = (0..n)
                    .max_by(|&x, &y| {
                        let dx = d2(row(x), &centers[assign[x] * dim..(assign[x] + 1) * dim]);
                        let dy = d2(row(y), &centers[assign[y] * dim..(assign[y] + 1) * dim]);
                        dx.total_cmp(&dy)
                    })
                    .unwrap_or(0);
                centers[c * dim..(c + 1) * dim].copy_from_slice(row(far));
            }
        }
    }
    centers
}

/// Mean over samples of the largest soft assignment `softmax(−α‖x−c‖²)`.
fn mean_max_assignment(data: &[f64], dim: usize, centers: &[f64], alpha: f64) -> f64 {
    let k = centers.len() / dim;
    let n = data.len() / dim;
    let mut total = 0.0;
    for x in data.chunks_exact(dim) {
        let logits: Vec<f64> = centers
            .chunks_exact(dim)
            .map(|c| -alpha * x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        total += 1.0 / z;
    }
    let _ = k;
    total / n.max(1) as f64
}

/// Sharpness `α` with mean max-assignment ≈ `target` (bisection in log space).
pub fn fit_alpha(data: &[f64], dim: usize, centers: &[f64], target: f64) -> f64 {
    if centers.len() <= dim {
        return 1.0;
    }
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mean_max_assignment(data, dim, centers, mid.exp()) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

#[derive(Clone, Debug)]
pub struct ClusterSummary {
    pub samples: usize,
    pub alpha: Option<f64>,
}

/// k-means centers for every VLAD layer from local features of `database`.
pub fn init_vlad_clusters(model: &FusionVpr, database: &PreparedSet, config: &TrainConfig) -> Result<Vec<ClusterSummary>> {
    if database.is_empty() {
        return Err(Error::Validation("cluster initialization needs a non-empty database".into()));
    }
    let ci = &config.cluster_init;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC1u64);
    let mut images: Vec<usize> = (0..database.len()).collect();
    images.shuffle(&mut rng);
    images.truncate(ci.images.max(1));
    images.sort_unstable();

    let layers = model.vlad_layers();
    let mut pools: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
    for chunk in images.chunks(config.eval_batch) {
        let (f, e) = database.batch(chunk, model.dtype())?;
        let feats = model.features(&f, &e, Mode::Eval)?;
        for (pool, local) in pools.iter_mut().zip(model.vlad_inputs(&feats)?) {
            // (B, C, P) -> rows of C.
            let rows = local.transpose(1, 2)?.contiguous()?;
            let (b, p, c) = rows.dims3()?;
            let v = rows.reshape((b * p, c))?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            pool.extend(v);
        }
    }

    let mut out = Vec::new();
    for (li, (layer, pool)) in layers.iter().zip(pools).enumerate() {
        let dim = layer.channels();
        let k = layer.clusters();
        let n = pool.len() / dim;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(ci.samples);
        idx.sort_unstable();
        let sample: Vec<f64> = idx.iter().flat_map(|&i| pool[i * dim..(i + 1) * dim].iter().copied()).collect();
        if idx.len() < k {
            log::warn!(
                "VLAD layer {li}: {} local features for {k} clusters, keeping random-normal centers",
                idx.len()
            );
            out.push(ClusterSummary {
                samples: idx.len(),
                alpha: None,
            });
            continue;
        }
        let centers = kmeans(&sample, dim, k, ci.iterations, config.seed.wrapping_add(li as u64));
        let alpha = fit_alpha(&sample, dim, &centers, ci.target_assignment);
        layer.set_centers(&centers, alpha)?;
        log::info!("VLAD layer {li}: {k} centers from {} features, alpha {alpha:.4e}", idx.len());
        out.push(ClusterSummary {
            samples: idx.len(),
            alpha: Some(alpha),
        });
    }
    Ok(out)
}

// ---- training loop -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Global batch counter at the time of the record.
    pub batch: usize,
    /// Mean loss since the previous record.
    pub loss: f64,
    /// Exponential moving average of per-batch losses.
    pub smoothed_loss: f64,
    pub lr: f64,
    #[serde(rename = "recall@1")]
    pub recall_at_1: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters of the best validation checkpoint.
    pub model: FusionVpr,
    pub history: Vec<LogRecord>,
    pub best_recall_at_1: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub iterations: usize,
    /// Loss of every individual batch, in order.
    pub batch_losses: Vec<f64>,
}

struct Cache {
    query: Vec<f32>,
    database: Vec<f32>,
    dim: usize,
}

impl Cache {
    fn build(model: &FusionVpr, query: &PreparedSet, database: &PreparedSet, batch: usize) -> Result<Self> {
        let all = |s: &PreparedSet| (0..s.len()).collect::<Vec<_>>();
        Ok(Self {
            query: model.describe(query, &all(query), batch)?,
            database: model.describe(database, &all(database), batch)?,
            dim: model.config.descriptor_len(),
        })
    }

    fn q(&self, i: usize) -> &[f32] {
        &self.query[i * self.dim..(i + 1) * self.dim]
    }

    fn db(&self, i: usize) -> &[f32] {
        &self.database[i * self.dim..(i + 1) * self.dim]
    }
}

/// The `count` cached-nearest database entries strictly beyond `δ` meters.
fn hard_negatives(
    cache: &Cache,
    query: &PreparedSet,
    database: &PreparedSet,
    qi: usize,
    neg_threshold: f64,
    count: usize,
) -> Result<Vec<usize>> {
    let mut cands: Vec<(f64, usize)> = Vec::new();
    for di in 0..database.len() {
        if geo_distance(&query.positions[qi], &database.positions[di])? > neg_threshold {
            cands.push((sq_dist(cache.q(qi), cache.db(di)), di));
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(cands.into_iter().take(count).map(|c| c.1).collect())
}

/// Blank frames (u < p/2) or events (p/2 <= u < p) per row.
fn modality_dropout(frames: Tensor, events: Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    if p <= 0.0 {
        return Ok((frames, events));
    }
    let n = frames.dim(0)?;
    let (mut kf, mut ke) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let u: f64 = rng.random();
        kf.push(if u < p / 2.0 { 0f32 } else { 1.0 });
        ke.push(if (p / 2.0..p).contains(&u) { 0f32 } else { 1.0 });
    }
    let mask = |k: Vec<f32>| -> Result<Tensor> {
        Ok(Tensor::from_vec(k, (n, 1, 1, 1), frames.device())?.to_dtype(frames.dtype())?)
    };
    Ok((frames.broadcast_mul(&mask(kf)?)?, events.broadcast_mul(&mask(ke)?)?))
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub database: &'a PreparedSet,
    pub query: &'a PreparedSet,
    pub validation: &'a PreparedSet,
    pub out_dir: Option<PathBuf>,
}

impl Trainer<'_> {
    pub fn run(&self) -> Result<TrainOutcome> {
        let cfg = &self.config;
        cfg.validate()?;
        let model = FusionVpr::new(cfg.model.clone(), cfg.precision.dtype(), cfg.seed)?;
        if cfg.cluster_init.enabled {
            init_vlad_clusters(&model, self.database, cfg)?;
        }
        self.run_with(model)
    }

    /// Train an already-built (possibly restored) model.
    pub fn run_with(&self, model: FusionVpr) -> Result<TrainOutcome> {
        let cfg = &self.config;
        cfg.validate()?;
        let (db, q) = (self.database, self.query);
        let mining = mine_triplets_at((&q.positions, &q.timestamps), (&db.positions, &db.timestamps), &cfg.mining)?;
        if mining.skipped > 0 {
            log::info!("{}: {} queries have no potential positive", q.name, mining.skipped);
        }
        if mining.triplets.is_empty() {
            return Err(Error::Validation(format!(
                "no query in '{}' has a potential positive in '{}'",
                q.name, db.name
            )));
        }
        let triplets: Vec<TripletSpec> = mining
            .triplets
            .into_iter()
            .map(|mut t| {
                let qp = q.positions[t.query_index];
                t.potential_positive_indices.sort_by(|&a, &b| {
                    let da = geo_distance(&qp, &db.positions[a]).unwrap_or(f64::INFINITY);
                    let dbb = geo_distance(&qp, &db.positions[b]).unwrap_or(f64::INFINITY);
                    da.total_cmp(&dbb).then(a.cmp(&b))
                });
                t.potential_positive_indices.truncate(cfg.max_positives);
                t
            })
            .collect();

        let mut log_file = match &self.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("train_log.jsonl");
                Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
            }
            None => None,
        };

        let mut opt = Optimizer::new(&model, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut cache = Cache::build(&model, q, db, cfg.eval_batch)?;
        let mut history = Vec::new();
        let mut batch_losses = Vec::new();
        let mut interval = Vec::new();
        let mut ema: Option<f64> = None;
        let mut best = (f64::NEG_INFINITY, model.store.snapshot_tensors()?);
        let mut best_path = None;
        let mut stale = 0usize;
        let mut iteration = 0usize;
        let max_iter = cfg.max_iterations.unwrap_or(usize::MAX);
        let mut epoch = 0;

        'outer: while epoch < cfg.epochs {
            epoch += 1;
            let mut order: Vec<usize> = (0..triplets.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                if iteration >= max_iter {
                    break 'outer;
                }
                if iteration > 0 && iteration.is_multiple_of(cfg.cache_refresh) {
                    cache = Cache::build(&model, q, db, cfg.eval_batch)?;
                }
                let loss = self.step(&model, &mut opt, &cache, &triplets, chunk, &mut rng)?;
                iteration += 1;
                if !loss.is_finite() {
                    let msg = format!("non-finite loss at epoch {epoch}, batch {iteration}");
                    if let Some(dir) = &self.out_dir {
                        let p = dir.join("diverged.safetensors");
                        save_checkpoint(&p, &model, Some(&opt), &self.meta(epoch, iteration, &history))?;
                        return Err(Error::Divergence(format!("{msg}; state written to {}", p.display())));
                    }
                    return Err(Error::Divergence(msg));
                }
                batch_losses.push(loss);
                interval.push(loss);
                let a = cfg.loss_smoothing;
                ema = Some(ema.map_or(loss, |e| a * e + (1.0 - a) * loss));

                if iteration.is_multiple_of(cfg.eval_every) {
                    let rec = self.evaluate(&model, epoch, iteration, &mut interval, ema, opt.learning_rate)?;
                    let r1 = rec.recall_at_1.unwrap_or(0.0);
                    self.log(&mut log_file, &rec)?;
                    history.push(rec);
                    if r1 > best.0 {
                        best = (r1, model.store.snapshot_tensors()?);
                        stale = 0;
                        if let Some(dir) = &self.out_dir {
                            let p = dir.join("best.safetensors");
                            save_checkpoint(&p, &model, Some(&opt), &self.meta(epoch, iteration, &history))?;
                            best_path = Some(p);
                        }
                    } else {
                        stale += 1;
                        if stale >= cfg.plateau_patience {
                            opt.learning_rate *= cfg.lr_decay;
                            stale = 0;
                            log::info!("validation plateau, learning rate now {:.3e}", opt.learning_rate);
                        }
                    }
                }
            }
        }
        if !interval.is_empty() || history.is_empty() {
            let rec = self.evaluate(&model, epoch, iteration, &mut interval, ema, opt.learning_rate)?;
            let r1 = rec.recall_at_1.unwrap_or(0.0);
            self.log(&mut log_file, &rec)?;
            history.push(rec);
            if r1 > best.0 {
                best = (r1, model.store.snapshot_tensors()?);
                if let Some(dir) = &self.out_dir {
                    let p = dir.join("best.safetensors");
                    save_checkpoint(&p, &model, Some(&opt), &self.meta(epoch, iteration, &history))?;
                    best_path = Some(p);
                }
            }
        }
        if let Some(dir) = &self.out_dir {
            save_checkpoint(&dir.join("last.safetensors"), &model, Some(&opt), &self.meta(epoch, iteration, &history))?;
        }
        if cfg.restore_best {
            model.store.restore_tensors(&best.1)?;
        }
        Ok(TrainOutcome {
            model,
            history,
            best_recall_at_1: best.0,
            best_checkpoint: best_path,
            iterations: iteration,
            batch_losses,
        })
    }

    fn meta(&self, epoch: usize, iteration: usize, history: &[LogRecord]) -> CheckpointMeta {
        CheckpointMeta {
            config: self.config.clone(),
            epoch,
            iteration,
            history: history.to_vec(),
            optimizer: None,
        }
    }

    fn log(&self, file: &mut Option<(std::fs::File, PathBuf)>, rec: &LogRecord) -> Result<()> {
        log::info!(
            "epoch {} batch {} loss {:.5} lr {:.2e} recall@1 {:?}",
            rec.epoch,
            rec.batch,
            rec.loss,
            rec.lr,
            rec.recall_at_1
        );
        if let Some((f, p)) = file {
            writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&*p, e))?;
        }
        Ok(())
    }

    fn evaluate(
        &self,
        model: &FusionVpr,
        epoch: usize,
        iteration: usize,
        interval: &mut Vec<f64>,
        ema: Option<f64>,
        lr: f64,
    ) -> Result<LogRecord> {
        let loss = if interval.is_empty() {
            f64::NAN
        } else {
            interval.iter().sum::<f64>() / interval.len() as f64
        };
        interval.clear();
        let report = evaluate_model(
            model,
            self.database,
            self.validation,
            self.config.phi,
            &[1],
            self.config.eval_batch,
        );
        let recall = match report {
            Ok(r) => Some(r.recall_at_1()),
            Err(Error::Evaluation(msg)) => {
                log::warn!("validation skipped: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(LogRecord {
            epoch,
            batch: iteration,
            loss,
            smoothed_loss: ema.unwrap_or(f64::NAN),
            lr,
            recall_at_1: recall,
        })
    }

    /// One optimizer step over the queries `chunk`; returns the mean loss.
    fn step(
        &self,
        model: &FusionVpr,
        opt: &mut Optimizer,
        cache: &Cache,
        triplets: &[TripletSpec],
        chunk: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let cfg = &self.config;
        let (db, q) = (self.database, self.query);
        let mut q_idx = Vec::new();
        let mut db_idx = Vec::new();
        let mut groups = Vec::new();
        for &ti in chunk {
            let t = &triplets[ti];
            let negs = hard_negatives(cache, q, db, t.query_index, cfg.mining.neg_threshold, cfg.mining.negatives_per_query)?;
            if negs.is_empty() {
                continue;
            }
            q_idx.push(t.query_index);
            let pos_start = db_idx.len();
            db_idx.extend(&t.potential_positive_indices);
            let neg_start = db_idx.len();
            db_idx.extend(&negs);
            groups.push((pos_start, neg_start - pos_start, neg_start, negs.len()));
        }
        if groups.is_empty() {
            return Ok(0.0);
        }
        let (fq, eq) = q.batch(&q_idx, model.dtype())?;
        let (fd, ed) = db.batch(&db_idx, model.dtype())?;
        let (fq, eq) = modality_dropout(fq, eq, cfg.modality_dropout, rng)?;
        let (fd, ed) = if cfg.dropout_database {
            modality_dropout(fd, ed, cfg.modality_dropout, rng)?
        } else {
            (fd, ed)
        };
        let frames = Tensor::cat(&[&fq, &fd], 0)?;
        let events = Tensor::cat(&[&eq, &ed], 0)?;
        let desc = model.forward(&frames, &events, Mode::Train)?.descriptor;
        let nq = q_idx.len();
        let mut total: Option<Tensor> = None;
        for (i, &(ps, pn, ns, nn)) in groups.iter().enumerate() {
            let l = triplet_loss_tensor(
                &desc.get(i)?,
                &desc.narrow(0, nq + ps, pn)?,
                &desc.narrow(0, nq + ns, nn)?,
                cfg.margin,
            )?;
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        let loss = (total.expect("at least one group") / nq as f64)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if value.is_finite() {
            let grads = loss.backward()?;
            opt.apply(&grads)?;
        }
        Ok(value)
    }
}

/// Convenience wrapper: prepare traverses, train, return the outcome.
pub fn train(
    database: &PreparedSet,
    query: &PreparedSet,
    validation: Option<&PreparedSet>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    Trainer {
        config: config.clone(),
        database,
        query,
        validation: validation.unwrap_or(query),
        out_dir: out_dir.map(Path::to_path_buf),
    }
    .run()
}
