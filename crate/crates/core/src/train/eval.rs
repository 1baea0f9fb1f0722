//! Test-set evaluation and interpretability exports.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{check_classes, RunConfig};
use crate::data::{image_to_pgm, load_sample, mask_to_pgm, DatasetMeta, DatasetSplit, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_labels, ClassMetrics, MetricReport};
use crate::model::{average_argmax, SemiKanModel};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub per_sample: Vec<(String, MetricReport)>,
    /// Class-wise means over samples, then averaged over classes.
    pub aggregate: MetricReport,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let d: Vec<f64> = v.flatten().collect();
    (!d.is_empty()).then(|| mean(d.into_iter()))
}

fn labels_of(mask: &Tensor, num_classes: usize, id: &str) -> Result<Vec<usize>> {
    mask.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < num_classes {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("sample {id} has label {v}, model has {num_classes} classes")))
            }
        })
        .collect()
}

/// Scores `predict` (images `[N,C,H,W]` to class maps `[N,H,W]`) on labeled
/// samples, `batch` images at a time.
pub fn evaluate_predictor(
    samples: &[SegSample],
    num_classes: usize,
    batch: usize,
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let shape = chunk[0].image.shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].image.numel());
        for s in chunk {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::dim("evaluate", format!("sample {} is {:?}, expected {shape:?}", s.id, s.image.shape())));
            }
            data.extend_from_slice(s.image.data());
        }
        let images = Tensor::new(&[chunk.len(), shape[0], h, w], data)?;
        let pred = predict(&images)?;
        if pred.shape() != [chunk.len(), h, w] {
            return Err(Error::dim("evaluate", format!("predictor returned {:?}", pred.shape())));
        }
        for (i, s) in chunk.iter().enumerate() {
            let mask = s
                .mask
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("sample {} has no mask", s.id)))?;
            let gt = labels_of(mask, num_classes, &s.id)?;
            let p = labels_of(&pred.narrow(0, i, 1)?.reshape(&[h, w])?, num_classes, &s.id)?;
            per_sample.push((s.id.clone(), evaluate_labels(&p, &gt, h, w, num_classes)?));
        }
    }
    let per_class: Vec<ClassMetrics> = (1..num_classes)
        .map(|class| {
            let rows = || per_sample.iter().map(move |(_, r)| &r.per_class[class - 1]);
            ClassMetrics {
                class,
                dice: mean(rows().map(|c| c.dice)),
                jaccard: mean(rows().map(|c| c.jaccard)),
                hd95: mean_defined(rows().map(|c| c.hd95)),
                asd: mean_defined(rows().map(|c| c.asd)),
            }
        })
        .collect();
    let aggregate = MetricReport {
        dice: mean(per_class.iter().map(|c| c.dice)),
        jaccard: mean(per_class.iter().map(|c| c.jaccard)),
        hd95: mean_defined(per_class.iter().map(|c| c.hd95)),
        asd: mean_defined(per_class.iter().map(|c| c.asd)),
        per_class,
    };
    Ok(EvalResult { per_sample, aggregate })
}

/// Eval-mode predictions of `model` scored against the masks.
pub fn evaluate_model(model: &SemiKanModel, samples: &[SegSample], batch: usize) -> Result<EvalResult> {
    evaluate_predictor(samples, model.config().num_classes, batch, |x| model.predict(x))
}

/// Test samples of the split named by `cfg`, masks included. Fails with a
/// configuration error when the dataset's class count differs from the
/// model's.
pub fn load_eval_samples(cfg: &RunConfig) -> Result<Vec<SegSample>> {
    let dir = &cfg.data.data_dir;
    if let Ok(meta) = DatasetMeta::load(dir) {
        check_classes(&meta, cfg.model.num_classes)?;
    }
    let split = DatasetSplit::load(dir, cfg.data.ratio, cfg.data.seed)?;
    split.test.iter().map(|id| load_sample(dir, id, true)).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV `sample_id,class,dice,jaccard,hd95,asd`; undefined distances are
/// blank. One `mean` row per class closes the file.
pub fn write_eval_csv(path: &Path, result: &EvalResult) -> Result<()> {
    let mut s = String::from("sample_id,class,dice,jaccard,hd95,asd\n");
    let rows = result
        .per_sample
        .iter()
        .flat_map(|(id, r)| r.per_class.iter().map(move |c| (id.as_str(), c)))
        .chain(result.aggregate.per_class.iter().map(|c| ("mean", c)));
    for (id, c) in rows {
        writeln!(s, "{id},{},{},{},{},{}", c.class, c.dice, c.jaccard, opt(c.hd95), opt(c.asd)).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerPrune {
    pub layer: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub kept: usize,
    pub removed: Vec<(usize, usize)>,
    pub fraction_removed: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExportSummary {
    pub input: PathBuf,
    pub heat: PathBuf,
    pub overlay: PathBuf,
    pub prediction: PathBuf,
    pub activation_csvs: Vec<PathBuf>,
    pub prune_report: PathBuf,
    pub threshold: f64,
    pub layers: Vec<LayerPrune>,
}

/// Channel mean of the deepest feature map, min-max scaled to `[0, 1]` and
/// nearest-upsampled to `h×w`. Returned as `[1, h, w]`.
pub fn feature_heatmap(bottleneck: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let &[1, d, th, tw] = bottleneck.shape() else {
        return Err(Error::dim("heatmap", format!("expected [1,D,h,w], got {:?}", bottleneck.shape())));
    };
    let b = bottleneck.data();
    let avg: Vec<f64> = (0..th * tw).map(|i| (0..d).map(|c| b[c * th * tw + i]).sum::<f64>() / d as f64).collect();
    let lo = avg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = avg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let heat = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w * th / h, i % w * tw / w);
            (avg[y * tw + x] - lo) / span
        })
        .collect();
    Tensor::new(&[1, h, w], heat)
}

/// Writes `input.pgm`, `heat.pgm`, `overlay.pgm` (equal blend of input and
/// heat), `prediction.pgm`, one `kan_<layer>.csv` activation dump per KAN
/// layer and `prune_report.json`. Pruning happens last and is applied to
/// `model` in place, so pass a copy that is not needed afterwards.
pub fn export_interpretability(model: &mut SemiKanModel, sample: &SegSample, out_dir: &Path, threshold: f64) -> Result<ExportSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = (sample.height(), sample.width());
    let c = sample.image.shape()[0];
    let images = sample.image.reshape(&[1, c, h, w])?;
    let (heat, pred) = no_grad(|| -> Result<_> {
        let out = model.forward_with_features(&images, false)?;
        Ok((feature_heatmap(&out.bottleneck, h, w)?, average_argmax(&out.logits)?))
    })?;
    let input = sample.image.narrow(0, 0, 1)?;
    let overlay = Tensor::new(&[1, h, w], input.data().iter().zip(heat.data()).map(|(a, b)| 0.5 * (a + b)).collect())?;
    let paths = ["input.pgm", "heat.pgm", "overlay.pgm", "prediction.pgm"].map(|f| out_dir.join(f));
    image_to_pgm(&input)?.save(&paths[0])?;
    image_to_pgm(&heat)?.save(&paths[1])?;
    image_to_pgm(&overlay)?.save(&paths[2])?;
    mask_to_pgm(&pred.reshape(&[h, w])?)?.save(&paths[3])?;

    let mut activation_csvs = Vec::new();
    for (name, layer) in model.kan_layers() {
        let path = out_dir.join(format!("kan_{}.csv", name.replace('.', "_")));
        let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        layer.write_activation_csv(&mut f).map_err(|e| Error::io(&path, e))?;
        activation_csvs.push(path);
    }

    let names: Vec<String> = model.kan_layers().into_iter().map(|(n, _)| n).collect();
    let mut layers = Vec::new();
    for (name, layer) in names.into_iter().zip(model.kan_layers_mut()) {
        let r = layer.prune_edges(threshold)?;
        layers.push(LayerPrune {
            layer: name,
            in_dim: layer.in_dim(),
            out_dim: layer.out_dim(),
            kept: r.kept.len(),
            removed: r.removed,
            fraction_removed: r.fraction_removed,
        });
    }
    let prune_report = out_dir.join("prune_report.json");
    let summary = ExportSummary {
        input: paths[0].clone(),
        heat: paths[1].clone(),
        overlay: paths[2].clone(),
        prediction: paths[3].clone(),
        activation_csvs,
        prune_report,
        threshold,
        layers,
    };
    let json = serde_json::json!({ "threshold": threshold, "layers": summary.layers });
    fs::write(&summary.prune_report, serde_json::to_string_pretty(&json).expect("serialisable"))
        .map_err(|e| Error::io(&summary.prune_report, e))?;
    Ok(summary)
}
