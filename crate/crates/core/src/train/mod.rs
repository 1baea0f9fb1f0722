//! Training loop, checkpoints, evaluation and interpretability exports.

mod adam;
mod checkpoint;
mod config;
mod eval;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::AdamW;
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataConfig, OptimConfig, RunConfig, KEYS};
pub use eval::{evaluate_model, evaluate_predictor, export_interpretability, feature_heatmap, load_eval_samples, write_eval_csv, EvalResult, ExportSummary, LayerPrune};

use crate::data::{load_sample, DatasetMeta, DatasetSplit, SegSample};
use crate::error::{Error, Result};
use crate::model::SemiKanModel;
use crate::nn::Module;
use crate::objective::{ramp_weight, total_loss, LossReport};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,dice,uncertainty,rectify,consistency,lambda,total";
pub const CHECKPOINT_FILE: &str = "checkpoint.skck";
pub const CONFIG_FILE: &str = "config.txt";

/// Stream of the batch-sampling RNG (the split uses streams 0 and 1).
const SAMPLER_STREAM: u64 = 7;

/// Training images held in memory. Unlabeled samples carry no mask.
#[derive(Clone, Debug)]
pub struct TrainData {
    labeled: Vec<SegSample>,
    unlabeled: Vec<SegSample>,
}

impl TrainData {
    pub fn new(labeled: Vec<SegSample>, unlabeled: Vec<SegSample>) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::Config("training needs at least one labeled sample".into()));
        }
        if labeled.iter().any(|s| s.mask.is_none()) {
            return Err(Error::Contract("labeled sample without mask".into()));
        }
        let unlabeled = unlabeled.into_iter().map(SegSample::unlabeled).collect();
        Ok(Self { labeled, unlabeled })
    }

    /// Reads the split named by `cfg` and its samples; masks of unlabeled
    /// ids are never read.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = &cfg.data.data_dir;
        let split = DatasetSplit::load(dir, cfg.data.ratio, cfg.data.seed)?;
        let labeled = split.labeled.iter().map(|id| load_sample(dir, id, true)).collect::<Result<Vec<_>>>()?;
        let unlabeled = split.unlabeled.iter().map(|id| load_sample(dir, id, false)).collect::<Result<Vec<_>>>()?;
        if let Ok(meta) = DatasetMeta::load(dir) {
            check_classes(&meta, cfg.model.num_classes)?;
        }
        Self::new(labeled, unlabeled)
    }

    pub fn labeled(&self) -> &[SegSample] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[SegSample] {
        &self.unlabeled
    }
}

pub(crate) fn check_classes(meta: &DatasetMeta, model_classes: usize) -> Result<()> {
    if meta.num_classes != model_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {model_classes}",
            meta.num_classes
        )));
    }
    Ok(())
}

fn flip_rows(data: &mut [f64], width: usize) {
    for row in data.chunks_exact_mut(width) {
        row.reverse();
    }
}

/// Parameters, batch-norm statistics and KAN edge masks as named tensors.
pub fn model_tensors(model: &SemiKanModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .params()
        .into_iter()
        .map(|p| (format!("param/{}", p.name()), p.tensor().detach()))
        .collect();
    for b in model.buffers() {
        let s = b.stats.lock().expect("stats lock").clone();
        let n = s.mean.len();
        out.push((format!("bn/{}/mean", b.name), Tensor::new(&[n], s.mean).expect("1d")));
        out.push((format!("bn/{}/var", b.name), Tensor::new(&[n], s.var).expect("1d")));
    }
    for (i, (_, layer)) in model.kan_layers().into_iter().enumerate() {
        let m: Vec<f64> = layer.active_mask().iter().map(|&a| a as u8 as f64).collect();
        out.push((format!("kan_mask/{i}"), Tensor::new(&[m.len()], m).expect("1d")));
    }
    out
}

fn take_shaped(ck: &Checkpoint, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let t = ck.require(name)?;
    if t.shape() != shape {
        return Err(Error::Config(format!("checkpoint entry {name} has shape {:?}, model expects {shape:?}", t.shape())));
    }
    Ok(t.to_vec())
}

/// Inverse of [`model_tensors`].
pub fn load_model_tensors(model: &mut SemiKanModel, ck: &Checkpoint) -> Result<()> {
    for p in model.params_mut() {
        let v = take_shaped(ck, &format!("param/{}", p.name()), p.shape())?;
        p.set_data(v)?;
    }
    for b in model.buffers() {
        let mut s = b.stats.lock().expect("stats lock");
        let n = s.mean.len();
        s.mean = take_shaped(ck, &format!("bn/{}/mean", b.name), &[n])?;
        s.var = take_shaped(ck, &format!("bn/{}/var", b.name), &[n])?;
    }
    for (i, layer) in model.kan_layers_mut().into_iter().enumerate() {
        let n = layer.active_mask().len();
        let m = take_shaped(ck, &format!("kan_mask/{i}"), &[n])?;
        layer.set_active_mask(m.iter().map(|&v| v != 0.0).collect())?;
    }
    Ok(())
}

/// Rebuilds the model stored in a checkpoint, with its configuration.
pub fn load_model(path: &Path) -> Result<(RunConfig, SemiKanModel)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ck.config)?;
    let mut model = SemiKanModel::build(&cfg.model, cfg.data.seed)?;
    load_model_tensors(&mut model, &ck)?;
    Ok((cfg, model))
}

/// Single-worker trainer. Every random draw comes from one seeded stream,
/// so a run is a pure function of its configuration and data.
pub struct Trainer {
    cfg: RunConfig,
    model: SemiKanModel,
    opt: AdamW,
    rng: ChaCha8Rng,
    data: TrainData,
    step: usize,
    steps_per_epoch: usize,
    total_steps: usize,
    ramp_steps: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        let model = SemiKanModel::build(&cfg.model, cfg.data.seed)?;
        let o = &cfg.optim;
        let opt = AdamW::new(o.lr, o.beta1, o.beta2, o.eps, o.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
        rng.set_stream(SAMPLER_STREAM);
        let pool = data.labeled.len() + data.unlabeled.len();
        let steps_per_epoch = pool.div_ceil(o.batch_size).max(1);
        let mut total_steps = o.epochs * steps_per_epoch;
        if o.max_steps > 0 {
            total_steps = total_steps.min(o.max_steps);
        }
        let ramp_steps = (cfg.objective.ramp_fraction * total_steps as f64).round() as usize;
        Ok(Self {
            cfg,
            model,
            opt,
            rng,
            data,
            step: 0,
            steps_per_epoch,
            total_steps,
            ramp_steps,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`]. The model
    /// section of `cfg` must match the stored one.
    pub fn resume(cfg: RunConfig, data: TrainData, ck: &Checkpoint) -> Result<Self> {
        let stored = RunConfig::parse(&ck.config)?;
        if stored.model != cfg.model {
            return Err(Error::Config("model configuration differs from the checkpoint".into()));
        }
        let mut t = Self::new(cfg, data)?;
        load_model_tensors(&mut t.model, ck)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in t.model.params() {
            let shape = p.shape().to_vec();
            m.push(take_shaped(ck, &format!("adam_m/{}", p.name()), &shape)?);
            v.push(take_shaped(ck, &format!("adam_v/{}", p.name()), &shape)?);
        }
        t.opt.m = m;
        t.opt.v = v;
        t.opt.t = ck.require("adam_t")?.item()? as u64;
        t.rng = ck
            .rng
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no RNG state".into()))?
            .restore();
        t.step = ck.step as usize;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SemiKanModel {
        &self.model
    }

    pub fn into_model(self) -> SemiKanModel {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn ramp_steps(&self) -> usize {
        self.ramp_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// `λ` used at `step`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        ramp_weight(step, self.cfg.objective.lambda_max, self.ramp_steps)
    }

    /// Draws one mixed batch: labeled indices, then unlabeled indices, then
    /// flip decisions. Half the batch is unlabeled when unlabeled data
    /// exists. With `λ_max = 0` the unlabeled draws are still made (keeping
    /// the stream aligned with the semi-supervised run) but discarded.
    fn draw_batch(&mut self) -> Result<(Tensor, Tensor, usize)> {
        let b = self.cfg.optim.batch_size;
        let n_u = if self.data.unlabeled.is_empty() { 0 } else { b / 2 };
        let n_l = b - n_u;
        let li: Vec<usize> = (0..n_l).map(|_| self.rng.random_range(0..self.data.labeled.len())).collect();
        let ui: Vec<usize> = (0..n_u).map(|_| self.rng.random_range(0..self.data.unlabeled.len())).collect();
        let flips: Vec<bool> = (0..b).map(|_| self.cfg.data.flip && self.rng.random_bool(0.5)).collect();
        let keep_u = if self.cfg.objective.lambda_max == 0.0 { 0 } else { n_u };

        let first = &self.data.labeled[0];
        let (c, h, w) = (first.image.shape()[0], first.height(), first.width());
        let mut images = Vec::with_capacity((n_l + keep_u) * c * h * w);
        let mut masks = Vec::with_capacity(n_l * h * w);
        let picks = li.iter().map(|&i| &self.data.labeled[i]).chain(ui.iter().take(keep_u).map(|&i| &self.data.unlabeled[i]));
        for (s, &flip) in picks.zip(&flips) {
            if s.image.shape() != [c, h, w] {
                return Err(Error::dim("batch", format!("sample {} is {:?}, expected {:?}", s.id, s.image.shape(), [c, h, w])));
            }
            let mut img = s.image.to_vec();
            let mut mask = s.mask.as_ref().map(|m| m.to_vec());
            if flip {
                flip_rows(&mut img, w);
                if let Some(m) = mask.as_mut() {
                    flip_rows(m, w);
                }
            }
            images.extend(img);
            if let Some(m) = mask {
                masks.extend(m);
            }
        }
        Ok((
            Tensor::new(&[n_l + keep_u, c, h, w], images)?,
            Tensor::new(&[n_l, h, w], masks)?,
            n_l,
        ))
    }

    /// One optimisation step. A non-finite loss skips the update and returns [`Error::NonFinite`] without a checkpoint path.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let (images, targets, n_l) = self.draw_batch()?;
        let n = images.shape()[0];
        let lambda = self.lambda_at(self.step);
        self.model.zero_grad();
        let logits = self.model.forward(&images, true)?;
        let labeled = logits.iter().map(|l| l.narrow(0, 0, n_l)).collect::<Result<Vec<_>>>()?;
        let unlabeled = if n > n_l {
            logits.iter().map(|l| l.narrow(0, n_l, n - n_l)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let obj = total_loss(&labeled, &targets, &unlabeled, lambda, &self.cfg.objective)?;
        if !obj.report.total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                last_good: None,
            });
        }
        obj.total.backward()?;
        self.opt.step(self.model.params_mut())?;
        for layer in self.model.kan_layers_mut() {
            layer.enforce_mask()?;
        }
        self.step += 1;
        Ok(obj.report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = model_tensors(&self.model);
        let params = self.model.params();
        for (i, p) in params.iter().enumerate() {
            let zeros = || vec![0.0; p.numel()];
            let m = self.opt.m.get(i).cloned().unwrap_or_else(zeros);
            let v = self.opt.v.get(i).cloned().unwrap_or_else(zeros);
            tensors.push((format!("adam_m/{}", p.name()), Tensor::new(p.shape(), m).expect("param shape")));
            tensors.push((format!("adam_v/{}", p.name()), Tensor::new(p.shape(), v).expect("param shape")));
        }
        tensors.push(("adam_t".into(), Tensor::scalar(self.opt.t as f64)));
        Checkpoint {
            config: self.cfg.to_text(),
            step: self.step as u64,
            epoch: (self.step / self.steps_per_epoch) as u64,
            rng: Some(RngState::capture(&self.rng)),
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Trains to the configured step budget inside `out_dir`, writing the
    /// config echo, the CSV log and a checkpoint after every epoch and at
    /// the end. When resuming, log rows at or past the current step are
    /// dropped first. Returns the checkpoint path.
    pub fn run(&mut self, out_dir: &Path, mut on_step: impl FnMut(usize, &LossReport)) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let cfg_path = out_dir.join(CONFIG_FILE);
        fs::write(&cfg_path, self.cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        let log_path = out_dir.join(LOG_FILE);
        let mut kept = format!("{LOG_HEADER}\n");
        if self.step > 0 {
            if let Ok(old) = fs::read_to_string(&log_path) {
                for line in old.lines().skip(1) {
                    let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                    if step.is_some_and(|s| s < self.step) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        log.write_all(kept.as_bytes())?;
        let ck_path = out_dir.join(CHECKPOINT_FILE);
        let mut last_good = ck_path.exists().then(|| ck_path.clone());
        while !self.is_done() {
            let step = self.step;
            let r = match self.train_step() {
                Ok(r) => r,
                Err(Error::NonFinite { step, .. }) => {
                    log.flush()?;
                    return Err(Error::NonFinite { step, last_good });
                }
                Err(e) => return Err(e),
            };
            writeln!(
                log,
                "{step},{},{},{},{},{},{}",
                r.dice, r.uncertainty, r.rectify, r.consistency, r.lambda, r.total
            )?;
            on_step(step, &r);
            if self.step.is_multiple_of(self.steps_per_epoch) || self.is_done() {
                log.flush()?;
                self.save(&ck_path)?;
                last_good = Some(ck_path.clone());
            }
        }
        log.flush()?;
        if last_good.is_none() {
            self.save(&ck_path)?;
        }
        Ok(ck_path)
    }
}

/// Parses a training log written by [`Trainer::run`].
pub fn read_log(path: &Path) -> Result<Vec<(usize, LossReport)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (n, line) in text.lines().enumerate() {
        let at = offset;
        offset += line.len() + 1;
        if n == 0 {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse {
            offset: at,
            message: format!("bad log row '{line}'"),
        };
        if f.len() != 7 {
            return Err(bad());
        }
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        out.push((
            f[0].parse().map_err(|_| bad())?,
            LossReport {
                dice: v[0],
                uncertainty: v[1],
                rectify: v[2],
                consistency: v[3],
                lambda: v[4],
                total: v[5],
            },
        ));
    }
    Ok(out)
}
