//! Training, reconstruction, evaluation and ablation on a dataset.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tmra_core::baselines::{median, run_ablation, AblationTable, AblationVariant, EvalSample};
use tmra_core::checkpoint::Checkpoint;
use tmra_core::metrics::{psnr, ssim, ssos, start_to_peak, MetricRecord, SSoSImage, SsimParams};
use tmra_core::networks::ImageMap;
use tmra_core::phantom::MultiCoilImage;
use tmra_core::training::{reconstruct, train, TrainOptions, TrainOutcome};

use crate::config::{EvalConfig, ExperimentConfig, ReferencePolicy};
use crate::container::{DatasetContainer, Manifest, Split};
use crate::dataset::{frame_key, Dataset, Instance};
use crate::plots::{line_chart_svg, mosaic_png, Series};
use crate::{format_err, Result};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Trains on the dataset's training split. Checkpoints go to
/// `<out>/checkpoints/epoch_XXXX`; log lines are appended to `<out>/train_log.jsonl`.
pub fn train_experiment(config: &ExperimentConfig, dataset: &Dataset, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    let data = dataset.training_data(&config.train.vs_choices)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        log::info!("resuming after epoch {} (step {})", ck.epochs_done, ck.global_step);
    }
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(out.join(TRAIN_LOG))?;
    let mut write_err = None;
    let options = TrainOptions { checkpoint_dir: Some(out.join(CHECKPOINT_DIR)), resume, max_epochs: None };
    let outcome = train(&data, &config.train, config.generator, config.discriminator.clone(), options, |r| {
        if r.step % 100 == 0 {
            log::info!("epoch {} step {} total_g {:.3} cycle {:.3}", r.epoch, r.step, r.report.total_g, r.report.cycle);
        }
        let line = serde_json::to_string(r).expect("log records serialize");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    Ok(outcome)
}

/// Generator outputs for the held-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructions {
    pub vs: Vec<usize>,
    /// Keyed by `(instance, vs, frame)`.
    pub images: BTreeMap<(String, usize, usize), MultiCoilImage>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatencyReport {
    pub frames: usize,
    pub mean_seconds: f64,
    pub max_seconds: f64,
}

pub fn recon_name(inst: &str, vs: usize, t: usize) -> String {
    format!("{inst}/recon/vs{vs}/{}", frame_key(t))
}

/// Runs `gen` on every held-out aliased frame at each `vs` and times each frame.
pub fn reconstruct_dataset(
    gen: &dyn ImageMap,
    trained_vs: &[usize],
    dataset: &Dataset,
    vs_list: &[usize],
) -> Result<(Reconstructions, LatencyReport)> {
    let mut images = BTreeMap::new();
    let mut times = Vec::new();
    for &vs in vs_list {
        if !trained_vs.contains(&vs) {
            log::warn!("vs {vs} was not among the training choices {trained_vs:?}");
        }
        for inst in dataset.split(Split::Heldout) {
            for t in 0..dataset.schedule.num_frames() {
                let y = inst.aliased(vs, t)?;
                let start = Instant::now();
                let r = reconstruct(gen, y)?;
                times.push(start.elapsed().as_secs_f64());
                images.insert((inst.info.name.clone(), vs, t), r);
            }
        }
    }
    let latency = LatencyReport {
        frames: times.len(),
        mean_seconds: times.iter().sum::<f64>() / times.len().max(1) as f64,
        max_seconds: times.iter().copied().fold(0.0, f64::max),
    };
    Ok((Reconstructions { vs: vs_list.to_vec(), images }, latency))
}

impl Reconstructions {
    pub fn to_container(&self, dataset_manifest: &Manifest) -> Result<DatasetContainer> {
        let mut m = dataset_manifest.clone();
        m.instances.retain(|i| i.split == Split::Heldout);
        m.vs_choices = self.vs.clone();
        let mut c = DatasetContainer::new(m);
        for ((inst, vs, t), img) in &self.images {
            c.put_image(&recon_name(inst, *vs, *t), img)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &DatasetContainer) -> Result<Self> {
        let frames = c.manifest.schedule.num_frames;
        let mut images = BTreeMap::new();
        for inst in &c.manifest.instances {
            for &vs in &c.manifest.vs_choices {
                for t in 0..frames {
                    images.insert((inst.name.clone(), vs, t), c.image(&recon_name(&inst.name, vs, t), t)?);
                }
            }
        }
        Ok(Self { vs: c.manifest.vs_choices.clone(), images })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub instance: String,
    #[serde(flatten)]
    pub metric: MetricRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartToPeakRow {
    pub instance: String,
    pub roi: String,
    pub method: String,
    pub vs: Option<usize>,
    /// `None` when the curve never rises above its baseline.
    pub start_to_peak: Option<usize>,
    pub reference: Option<usize>,
    pub error: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub reference: ReferencePolicy,
    pub records: Vec<ReportRecord>,
    pub start_to_peak: Vec<StartToPeakRow>,
    /// Paths relative to the output directory.
    pub plots: Vec<String>,
}

impl ExperimentReport {
    /// Every `(method, vs, instance, frame)` appears once.
    pub fn check_unique_keys(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.records {
            let key = (&r.metric.method, r.metric.vs, &r.instance, r.metric.frame);
            if !seen.insert(key) {
                return format_err(format!("duplicate record {key:?}"));
            }
        }
        Ok(())
    }

    pub fn median_psnr(&self, method: &str, vs: usize) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter(|r| r.metric.method == method && r.metric.vs == vs).map(|r| r.metric.psnr_db).collect();
        median(&v)
    }

    pub fn start_to_peak_error(&self, instance: &str, roi: &str, method: &str, vs: Option<usize>) -> Option<i64> {
        self.start_to_peak
            .iter()
            .find(|r| r.instance == instance && r.roi == roi && r.method == method && r.vs == vs)
            .and_then(|r| r.error)
    }
}

/// Mean of `image` over `region`.
pub fn roi_mean(image: &SSoSImage, region: &ndarray::Array2<bool>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, &inside) in image.data.iter().zip(region) {
        if inside {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return format_err("empty region of interest");
    }
    Ok(sum / n as f64)
}

fn reference_images(inst: &Instance, policy: ReferencePolicy) -> Vec<SSoSImage> {
    let src = match policy {
        ReferencePolicy::GroundTruth => &inst.ground_truth,
        ReferencePolicy::GrappaVsMax => &inst.grappa,
    };
    src.iter().map(ssos).collect()
}

/// Held-out samples at `vs` with their references.
pub fn eval_samples(dataset: &Dataset, vs: usize, policy: ReferencePolicy) -> Result<Vec<EvalSample>> {
    let mut out = Vec::new();
    for inst in dataset.split(Split::Heldout) {
        let refs = reference_images(inst, policy);
        for (t, reference) in refs.into_iter().enumerate() {
            out.push(EvalSample { frame: t, vs, aliased: inst.aliased(vs, t)?.clone(), reference });
        }
    }
    Ok(out)
}

struct Method {
    name: &'static str,
    vs: Option<usize>,
    frames: Vec<SSoSImage>,
}

fn label(name: &str, vs: Option<usize>) -> String {
    match vs {
        Some(v) => format!("{name} vs{v}"),
        None => name.to_string(),
    }
}

/// Metrics, start-to-peak table and plots for the held-out split.
/// Plots are written under `<out>/plots`.
pub fn evaluate(dataset: &Dataset, recons: &Reconstructions, eval: &EvalConfig, out: &Path) -> Result<ExperimentReport> {
    let plot_dir = out.join("plots");
    fs::create_dir_all(&plot_dir)?;
    let frames = dataset.schedule.num_frames();
    let vs_max = dataset.schedule.b_interleaves();
    let mut report = ExperimentReport { reference: eval.reference, records: Vec::new(), start_to_peak: Vec::new(), plots: Vec::new() };
    let mut boxes: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let heldout: Vec<&Instance> = dataset.split(Split::Heldout).collect();
    if heldout.is_empty() {
        return format_err("dataset has no held-out instances");
    }
    for inst in heldout {
        let name = &inst.info.name;
        let reference = reference_images(inst, eval.reference);
        let mut methods = vec![
            Method { name: "ground_truth", vs: None, frames: inst.ground_truth.iter().map(ssos).collect() },
            Method { name: "grappa", vs: Some(vs_max), frames: inst.grappa.iter().map(ssos).collect() },
        ];
        for &vs in &dataset.vs_choices {
            let frames = (0..frames).map(|t| Ok(ssos(inst.aliased(vs, t)?))).collect::<Result<_>>()?;
            methods.push(Method { name: "aliased", vs: Some(vs), frames });
        }
        for &vs in &recons.vs {
            let frames = (0..frames)
                .map(|t| match recons.images.get(&(name.clone(), vs, t)) {
                    Some(img) => Ok(ssos(img)),
                    None => format_err(format!("missing reconstruction {}", recon_name(name, vs, t))),
                })
                .collect::<Result<_>>()?;
            methods.push(Method { name: "proposed", vs: Some(vs), frames });
        }

        for m in methods.iter().filter(|m| m.vs.is_some()) {
            let vs = m.vs.unwrap_or(0);
            for (t, (img, r)) in m.frames.iter().zip(&reference).enumerate() {
                let metric = MetricRecord {
                    frame: t,
                    psnr_db: psnr(img, r)?,
                    ssim: ssim(img, r, SsimParams::default())?,
                    vs,
                    method: m.name.to_string(),
                };
                let key = label(m.name, m.vs);
                boxes.entry("psnr_db".into()).or_default().entry(key.clone()).or_default().push(metric.psnr_db);
                boxes.entry("ssim".into()).or_default().entry(key).or_default().push(metric.ssim);
                report.records.push(ReportRecord { instance: name.clone(), metric });
            }
        }

        let object_series = |roi: &ndarray::Array2<bool>| -> Result<Vec<f64>> {
            inst.objects.iter().map(|o| roi_mean(&SSoSImage::new(o.mapv(f64::abs))?, roi)).collect()
        };
        let mut peak_frame = None;
        for roi in &eval.rois {
            let Some(region) = inst.interiors.get(roi) else {
                return format_err(format!("instance {name} has no structure named {roi}"));
            };
            let ref_series: Vec<f64> = reference.iter().map(|r| roi_mean(r, region)).collect::<Result<_>>()?;
            let ref_stp = start_to_peak(&ref_series, eval.threshold_frac).ok();
            if peak_frame.is_none() {
                peak_frame = ref_series.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(t, _)| t);
            }
            let mut curves: Vec<(String, Vec<f64>)> = vec![("object".into(), object_series(region)?)];
            for m in &methods {
                curves.push((label(m.name, m.vs), m.frames.iter().map(|f| roi_mean(f, region)).collect::<Result<_>>()?));
            }
            for (k, (curve_label, series)) in curves.iter().enumerate() {
                let (method, vs) = if k == 0 { ("object", None) } else { (methods[k - 1].name, methods[k - 1].vs) };
                let stp = start_to_peak(series, eval.threshold_frac).ok();
                let error = match (stp, ref_stp) {
                    (Some(a), Some(b)) => Some(a as i64 - b as i64),
                    _ => None,
                };
                if let Some(e) = error {
                    boxes.entry("relative_start_to_peak".into()).or_default().entry(curve_label.clone()).or_default().push(e as f64);
                }
                report.start_to_peak.push(StartToPeakRow {
                    instance: name.clone(),
                    roi: roi.clone(),
                    method: method.to_string(),
                    vs,
                    start_to_peak: stp,
                    reference: ref_stp,
                    error,
                });
            }
            let file = format!("tic_{name}_{roi}.svg");
            let series: Vec<Series> = curves.iter().map(|(l, v)| Series { label: l, values: v }).collect();
            line_chart_svg(&plot_dir.join(&file), &format!("{name} {roi}"), "mean SSoS intensity", &series)?;
            report.plots.push(format!("plots/{file}"));
        }

        let t = peak_frame.unwrap_or(frames / 2);
        let mut tiles = vec![&reference[t]];
        tiles.extend(methods.iter().filter(|m| m.name != "ground_truth").map(|m| &m.frames[t]));
        let file = format!("mosaic_{name}.png");
        mosaic_png(&plot_dir.join(&file), &tiles)?;
        report.plots.push(format!("plots/{file}"));
    }
    fs::write(plot_dir.join("boxplot.json"), serde_json::to_string_pretty(&boxes)?)?;
    report.plots.push("plots/boxplot.json".into());
    report.plots.sort();
    report.check_unique_keys()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub eval_vs: usize,
    pub reference: ReferencePolicy,
    pub variants: AblationTable,
    /// Median PSNR of the proposed run minus that of each variant.
    pub margins_db: BTreeMap<String, f64>,
}

/// Trains every variant with the shared config and evaluates on the held-out split.
pub fn ablate(config: &ExperimentConfig, dataset: &Dataset, variants: &[AblationVariant], eval_vs: usize) -> Result<AblationReport> {
    let data = dataset.training_data(&config.train.vs_choices)?;
    let samples = eval_samples(dataset, eval_vs, config.evaluation.reference)?;
    let mut table = AblationTable::new();
    for &v in variants {
        log::info!("ablation variant {}", v.name());
        let r = run_ablation(v, &config.train, &data, config.generator, config.discriminator.clone(), &samples)?;
        log::info!("{}: median PSNR {:.2} dB", v.name(), r.median_psnr_db);
        table.insert(v.name().to_string(), r);
    }
    let mut margins = BTreeMap::new();
    if let Some(p) = table.get(AblationVariant::Proposed.name()) {
        for (k, r) in &table {
            if k != AblationVariant::Proposed.name() {
                margins.insert(k.clone(), p.median_psnr_db - r.median_psnr_db);
            }
        }
    }
    Ok(AblationReport { eval_vs, reference: config.evaluation.reference, variants: table, margins_db: margins })
}

/// Output locations of [`run_end_to_end`].
pub struct RunPaths {
    pub dataset: PathBuf,
    pub train: PathBuf,
    pub recon: PathBuf,
    pub eval: PathBuf,
}

impl RunPaths {
    pub fn under(out: &Path) -> Self {
        Self { dataset: out.join("dataset"), train: out.join("train"), recon: out.join("recon"), eval: out.join("eval") }
    }
}

/// generate → train → reconstruct at every trained vs → evaluate, all under `out`.
pub fn run_end_to_end(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    let paths = RunPaths::under(out);
    let (container, _) = Dataset::generate(config)?;
    container.write(&paths.dataset)?;
    let dataset = Dataset::from_container(&DatasetContainer::read(&paths.dataset)?)?;
    let outcome = train_experiment(config, &dataset, &paths.train, None)?;
    let (recons, latency) = reconstruct_dataset(&outcome.state.generator, &config.train.vs_choices, &dataset, &config.train.vs_choices)?;
    recons.to_container(&container.manifest)?.write(&paths.recon)?;
    fs::write(paths.recon.join("latency.json"), serde_json::to_string_pretty(&latency)?)?;
    let recons = Reconstructions::from_container(&DatasetContainer::read(&paths.recon)?)?;
    let report = evaluate(&dataset, &recons, &config.evaluation, &paths.eval)?;
    fs::write(paths.eval.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
