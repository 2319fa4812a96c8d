//! Implementations behind the CLI subcommands. The binary only parses
//! arguments and dispatches here, so examples and tests can drive the same
//! code paths directly.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::calibration::{bin_reliability, calibration_errors, reliability_diagram_data};
use crate::certify::{affine_fit, certification_report, dense_grad_last_microkernel, dropout_residual_microkernel, measure_dloss, measure_mc_postprocess};
use crate::conv::{DetectorHead, GradDepth, ImageGradients};
use crate::cv::{cross_validate, MetaTask};
use crate::detection::{match_tp_fp, nms_indices, ImageSample, TpFpLabel};
use crate::dropout::{mc_dropout_samples, per_anchor_sample_stats, split_seed};
use crate::error::{Error, Result};
use crate::features::{
    gradient_columns, gradient_feature_values, mc_columns, mc_feature_values, schema_id,
    FeatureRow, FeatureSource, FeatureTable,
};
use crate::flops::{
    certified_dropout_forward_flops, certified_grad_last_flops, dloss_eval_bound,
    dloss_flop_bound, mc_postprocess_eval_bound, mc_postprocess_flop_bound, FlopLedger, Phase,
};
use crate::gbt::{train, GbtConfig};
use crate::heads::{HeadKind, TransformedBox};
use crate::io;
use crate::pipeline::{
    default_fpfn_grid, default_map_grid, fpfn_sweep, map_sweep, MetaProbs, PipelineConfig,
    PipelineMode, SweepResult,
};
use crate::synth::{
    generate_physical_corpus, generate_synthetic_corpus, PhysicalCorpusConfig,
    SyntheticCorpusConfig,
};

#[derive(Debug, Clone)]
pub struct GlobalOpts {
    pub seed: u64,
    pub threads: usize,
    pub format_version: u32,
}

impl GlobalOpts {
    pub fn init(&self) -> Result<()> {
        if self.format_version != io::FORMAT_VERSION {
            return Err(Error::validation(format!(
                "format version {} unsupported (this build writes v{})",
                self.format_version,
                io::FORMAT_VERSION
            )));
        }
        if self.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build_global()
                .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
        }
        Ok(())
    }
}

pub struct SynthArgs {
    pub kind: String,
    pub out_dir: PathBuf,
    pub images: usize,
    pub classes: usize,
    pub signal: f64,
    pub mc_signal: f64,
    pub score_noise: f64,
    pub score_shift: f64,
    pub head: String,
    pub slots: usize,
}

pub fn cmd_synth(opts: &GlobalOpts, args: &SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    match args.kind.as_str() {
        "injected" => {
            let cfg = SyntheticCorpusConfig {
                n_images: args.images,
                num_classes: args.classes,
                signal_strength: args.signal,
                mc_signal_strength: args.mc_signal,
                score_noise: args.score_noise,
                score_shift: args.score_shift,
                seed: opts.seed,
                ..Default::default()
            };
            let (samples, table) = generate_synthetic_corpus(&cfg)?;
            io::save_detections(&args.out_dir.join("detections.jsonl"), &samples)?;
            io::save_features(&args.out_dir.join("features.csv"), &table)?;
            println!(
                "synth: wrote {} images, {} feature rows to {}",
                samples.len(),
                table.rows.len(),
                args.out_dir.display()
            );
        }
        "physical" => {
            let cfg = PhysicalCorpusConfig {
                n_images: args.images,
                head_kind: HeadKind::parse(&args.head)?,
                num_classes: args.classes,
                slots_per_cell: args.slots,
                seed: opts.seed,
                ..Default::default()
            };
            let corpus = generate_physical_corpus(&cfg)?;
            io::save_detections(&args.out_dir.join("detections.jsonl"), &corpus.samples)?;
            io::save_inputs(&args.out_dir.join("inputs.jsonl"), &corpus.inputs)?;
            io::save_head(&args.out_dir.join("head.json"), &corpus.det)?;
            println!(
                "synth: wrote {} images with head '{}' to {}",
                corpus.samples.len(),
                corpus.det.kind.name(),
                args.out_dir.display()
            );
        }
        other => return Err(Error::validation(format!("unknown corpus kind '{other}'"))),
    }
    Ok(())
}

/// Post-NMS survivor indices plus TP/FP labels and IoU targets.
fn labeled_survivors(
    sample: &ImageSample,
    prefilter: f64,
    eps_iou: f64,
    match_iou: f64,
) -> (Vec<usize>, Vec<(u8, f64)>) {
    let survivors = nms_indices(&sample.predictions, prefilter, eps_iou);
    let kept = ImageSample {
        predictions: survivors.iter().map(|&i| sample.predictions[i].clone()).collect(),
        ground_truth: sample.ground_truth.clone(),
        ..sample.clone()
    };
    let outcomes = match_tp_fp(&kept, match_iou);
    let labels = outcomes
        .iter()
        .map(|o| (if o.label == TpFpLabel::Tp { 1u8 } else { 0u8 }, o.matched_iou))
        .collect();
    (survivors, labels)
}

fn indexed_inputs(
    inputs: Vec<(String, crate::conv::FeatureMap)>,
) -> BTreeMap<String, crate::conv::FeatureMap> {
    inputs.into_iter().collect()
}

pub struct GradientArgs {
    pub head: PathBuf,
    pub inputs: PathBuf,
    pub detections: PathBuf,
    pub out: PathBuf,
    pub prefilter: f64,
    pub eps_iou: f64,
}

pub fn cmd_gradients(opts: &GlobalOpts, args: &GradientArgs) -> Result<()> {
    let det = io::load_head(&args.head)?;
    let inputs = indexed_inputs(io::load_inputs(&args.inputs)?);
    let samples = io::load_detections(&args.detections)?;
    let columns = gradient_columns(det.kind);
    let sid = schema_id(det.kind, true, false);

    let per_image: Vec<(Vec<FeatureRow>, FlopLedger)> = samples
        .par_iter()
        .map(|sample| gradient_rows_for_image(&det, &inputs, sample, args, opts.seed))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut ledger = FlopLedger::new();
    for (r, l) in per_image {
        rows.extend(r);
        ledger.merge(&l);
    }
    let table = FeatureTable { schema_id: sid, columns, rows };
    io::save_features(&args.out, &table)?;
    let d = ledger.get(Phase::DLoss);
    println!(
        "gradients: {} boxes -> {} ({} dloss FLOP, {} elementary evals, {} grad_last FLOP, {} grad_prev FLOP)",
        table.rows.len(),
        args.out.display(),
        d.flops,
        d.elementary_evals,
        ledger.get(Phase::GradLast).flops,
        ledger.get(Phase::GradPrev).flops
    );
    Ok(())
}

fn gradient_rows_for_image(
    det: &DetectorHead,
    inputs: &BTreeMap<String, crate::conv::FeatureMap>,
    sample: &ImageSample,
    args: &GradientArgs,
    seed: u64,
) -> Result<(Vec<FeatureRow>, FlopLedger)> {
    let input = inputs.get(&sample.image_id).ok_or_else(|| {
        Error::validation(format!("no input feature map for image {}", sample.image_id))
    })?;
    let img = ImageGradients::new(det, input)?;
    // the stored raw outputs must be reproducible from head and input
    for inst in &sample.predictions {
        if let Some(stored) = &inst.raw_outputs {
            let recomputed = img.raw.anchor(inst.anchor_index);
            for (a, b) in stored.iter().zip(recomputed) {
                if (a - b).abs() > 1e-6 {
                    return Err(Error::validation(format!(
                        "image {}: stored raw outputs at anchor {} do not match the head",
                        sample.image_id, inst.anchor_index
                    )));
                }
            }
        }
    }
    let (survivors, labels) = labeled_survivors(sample, args.prefilter, args.eps_iou, 0.5);
    let mut ledger = FlopLedger::new();
    let mut rows = Vec::new();
    for (k, &idx) in survivors.iter().enumerate() {
        let target = &sample.predictions[idx];
        if target.bbox.width() <= 1e-9 || target.bbox.height() <= 1e-9 {
            continue; // degenerate after clipping; no meaningful geometry
        }
        let mask = img.candidate_mask(target, args.prefilter, args.eps_iou, &mut ledger);
        let mut per_part_last = Vec::new();
        let mut per_part_prev = Vec::new();
        for &part in det.kind.parts() {
            let rpn_sampling = (det.kind == HeadKind::Rpn)
                .then(|| (256, split_seed(seed, target.anchor_index as u64)));
            let g = img.per_box_gradient(
                target,
                &mask,
                part,
                GradDepth::LastTwo,
                rpn_sampling,
                &mut ledger,
            )?;
            per_part_last.push((part, g.grad_last));
            per_part_prev.push((part, g.grad_prev.expect("depth is last_two")));
        }
        let values = gradient_feature_values(&per_part_last, &per_part_prev)?;
        let (label, target_iou) = labels[k];
        rows.push(FeatureRow {
            image_id: sample.image_id.clone(),
            box_index: idx,
            score: target.score,
            label_tpfp: label,
            target_iou,
            values,
        });
    }
    Ok((rows, ledger))
}

pub struct DropoutArgs {
    pub head: PathBuf,
    pub inputs: PathBuf,
    pub detections: PathBuf,
    pub out: PathBuf,
    pub rate: f64,
    pub samples: usize,
    pub prefilter: f64,
    pub eps_iou: f64,
}

pub fn cmd_dropout(opts: &GlobalOpts, args: &DropoutArgs) -> Result<()> {
    let det = io::load_head(&args.head)?;
    let inputs = indexed_inputs(io::load_inputs(&args.inputs)?);
    let samples = io::load_detections(&args.detections)?;
    let columns = mc_columns();
    let sid = schema_id(det.kind, false, true);

    let per_image: Vec<(Vec<FeatureRow>, FlopLedger)> = samples
        .par_iter()
        .enumerate()
        .map(|(si, sample)| dropout_rows_for_image(&det, &inputs, sample, args, split_seed(opts.seed, si as u64)))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut ledger = FlopLedger::new();
    for (r, l) in per_image {
        rows.extend(r);
        ledger.merge(&l);
    }
    let table = FeatureTable { schema_id: sid, columns, rows };
    io::save_features(&args.out, &table)?;
    println!(
        "dropout: {} boxes, {} samples each -> {} ({} residual-pass FLOP, {} postprocess FLOP, {} postprocess evals)",
        table.rows.len(),
        args.samples,
        args.out.display(),
        ledger.get(Phase::DropoutForward).flops,
        ledger.get(Phase::Postprocess).flops,
        ledger.get(Phase::Postprocess).elementary_evals
    );
    Ok(())
}

fn dropout_rows_for_image(
    det: &DetectorHead,
    inputs: &BTreeMap<String, crate::conv::FeatureMap>,
    sample: &ImageSample,
    args: &DropoutArgs,
    seed: u64,
) -> Result<(Vec<FeatureRow>, FlopLedger)> {
    let input = inputs.get(&sample.image_id).ok_or_else(|| {
        Error::validation(format!("no input feature map for image {}", sample.image_id))
    })?;
    let fwd = det.conv.forward(input)?;
    let t_last = det.conv.layers.len() - 1;
    let mut ledger = FlopLedger::new();
    let sample_maps =
        mc_dropout_samples(&det.conv, fwd.layer_input(t_last), args.rate, args.samples, seed, &mut ledger)?;
    // decode every sample, charging the output transformations
    let mut decoded: Vec<Vec<TransformedBox>> = Vec::with_capacity(sample_maps.len());
    for map in &sample_maps {
        let raw = det.extract_raw_outputs(map)?;
        let mut boxes = Vec::with_capacity(det.grid.n_out());
        let mut sub = FlopLedger::new();
        for a in 0..det.grid.n_out() {
            boxes.push(crate::heads::transform_anchor_counted(&raw, &det.grid, a, &mut sub)?);
        }
        ledger.merge(&sub);
        decoded.push(boxes);
    }

    let (survivors, labels) = labeled_survivors(sample, args.prefilter, args.eps_iou, 0.5);
    let mut rows = Vec::new();
    for (k, &idx) in survivors.iter().enumerate() {
        let target = &sample.predictions[idx];
        let a = target.anchor_index;
        let per_sample: Vec<Vec<f64>> = decoded
            .iter()
            .map(|boxes| {
                let tb = &boxes[a];
                let mut comps = vec![
                    tb.bbox.x_min,
                    tb.bbox.y_min,
                    tb.bbox.x_max,
                    tb.bbox.y_max,
                    tb.score,
                ];
                comps.extend(tb.probs.iter().cloned());
                comps
            })
            .collect();
        let (mean, std) = per_anchor_sample_stats(&per_sample);
        let values = mc_feature_values(&mean, &std)?;
        let (label, target_iou) = labels[k];
        rows.push(FeatureRow {
            image_id: sample.image_id.clone(),
            box_index: idx,
            score: target.score,
            label_tpfp: label,
            target_iou,
            values,
        });
    }
    Ok((rows, ledger))
}

fn load_merged_features(paths: &[PathBuf]) -> Result<FeatureTable> {
    if paths.is_empty() {
        return Err(Error::validation("no feature files given"));
    }
    let mut table = io::load_features(&paths[0])?;
    for p in &paths[1..] {
        let next = io::load_features(p)?;
        table = table.merge(&next)?;
    }
    Ok(table)
}

pub struct MetaTrainArgs {
    pub features: Vec<PathBuf>,
    pub source: String,
    pub task: String,
    pub out: PathBuf,
    pub estimators: usize,
    pub depth: usize,
    pub learning_rate: f64,
}

pub fn cmd_meta_train(opts: &GlobalOpts, args: &MetaTrainArgs) -> Result<()> {
    let table = load_merged_features(&args.features)?;
    let source = FeatureSource::parse(&args.source)?;
    let task = MetaTask::parse(&args.task)?;
    let matrix = crate::features::assemble_features(&table, source)?;
    let targets: Vec<f64> = table
        .rows
        .iter()
        .map(|r| match task {
            MetaTask::Classify => r.label_tpfp as f64,
            MetaTask::Regress => r.target_iou,
        })
        .collect();
    let config = GbtConfig {
        n_estimators: args.estimators,
        max_depth: args.depth,
        learning_rate: args.learning_rate,
        seed: opts.seed,
        objective: task.objective(),
        ..GbtConfig::classifier()
    };
    let (model, report) = train(&config, &matrix.rows, &targets, &matrix.schema_id)?;
    io::save_model(&args.out, &model)?;
    println!(
        "meta-train: {} rows, source {}, final training loss {:.6} -> {}",
        table.rows.len(),
        source.name(),
        report.round_losses.last().unwrap(),
        args.out.display()
    );
    Ok(())
}

pub struct MetaEvalArgs {
    pub features: Vec<PathBuf>,
    pub sources: Vec<String>,
    pub task: String,
    pub folds: usize,
    pub out: PathBuf,
    pub out_preds: Option<PathBuf>,
}

pub fn cmd_meta_eval(opts: &GlobalOpts, args: &MetaEvalArgs) -> Result<()> {
    let table = load_merged_features(&args.features)?;
    let task = MetaTask::parse(&args.task)?;
    if args.out_preds.is_some() && args.sources.len() != 1 {
        return Err(Error::validation("--out-preds needs exactly one source"));
    }
    let mut reports = Vec::new();
    for s in &args.sources {
        let source = FeatureSource::parse(s)?;
        let (report, oof) =
            cross_validate(&GbtConfig::classifier(), &table, source, task, args.folds, opts.seed)?;
        println!(
            "meta-eval: source {:>7} {} mean {:.4} (std {:.4}){}",
            report.source,
            match task {
                MetaTask::Classify => "AuROC",
                MetaTask::Regress => "R^2",
            },
            report.mean_primary,
            report.std_primary,
            report
                .mean_secondary
                .map(|m| format!(" AP mean {m:.4}"))
                .unwrap_or_default()
        );
        if let Some(path) = &args.out_preds {
            let preds: Vec<(String, usize, f64)> = table
                .rows
                .iter()
                .zip(&oof)
                .map(|(r, &p)| (r.image_id.clone(), r.box_index, p))
                .collect();
            io::save_predictions(path, s, &args.task, &preds)?;
        }
        reports.push(report);
    }
    io::save_cv_reports(&args.out, &reports)?;
    Ok(())
}

pub struct CalibrateArgs {
    pub features: Vec<PathBuf>,
    pub source: String,
    pub folds: usize,
    pub bins: usize,
    pub out: PathBuf,
}

pub fn cmd_calibrate(opts: &GlobalOpts, args: &CalibrateArgs) -> Result<()> {
    let table = load_merged_features(&args.features)?;
    let source = FeatureSource::parse(&args.source)?;
    let labels: Vec<bool> = table.rows.iter().map(|r| r.label_tpfp == 1).collect();
    let scores: Vec<f64> = table.rows.iter().map(|r| r.score).collect();
    let (_, oof) = cross_validate(
        &GbtConfig::classifier(),
        &table,
        source,
        MetaTask::Classify,
        args.folds,
        opts.seed,
    )?;

    let score_bins = bin_reliability(&scores, &labels, args.bins)?;
    let meta_bins = bin_reliability(&oof, &labels, args.bins)?;
    let score_err = calibration_errors(&score_bins)?;
    let meta_err = calibration_errors(&meta_bins)?;
    io::save_reliability(
        &args.out,
        &[
            ("score".to_string(), reliability_diagram_data(&score_bins), score_err),
            (
                format!("meta:{}", source.name()),
                reliability_diagram_data(&meta_bins),
                meta_err,
            ),
        ],
    )?;
    println!(
        "calibrate: score MCE {:.4} ACE {:.4} ECE {:.4} | meta:{} MCE {:.4} ACE {:.4} ECE {:.4}",
        score_err.mce,
        score_err.ace,
        score_err.ece,
        source.name(),
        meta_err.mce,
        meta_err.ace,
        meta_err.ece
    );
    Ok(())
}

pub struct FuseArgs {
    pub detections: PathBuf,
    pub features: Vec<PathBuf>,
    pub sources: Vec<String>,
    pub grid: String,
    pub class: usize,
    pub folds: usize,
    pub out: PathBuf,
}

pub fn cmd_fuse(opts: &GlobalOpts, args: &FuseArgs) -> Result<()> {
    let samples = io::load_detections(&args.detections)?;
    let table = load_merged_features(&args.features)?;
    let cfg = PipelineConfig::default();
    let thresholds = match args.grid.as_str() {
        "map" => default_map_grid(),
        "fpfn" => default_fpfn_grid(),
        other => return Err(Error::validation(format!("unknown sweep grid '{other}'"))),
    };

    let mut sweeps: Vec<SweepResult> = Vec::new();
    let run = |mode, name: &str, probs: Option<&MetaProbs>| -> Result<SweepResult> {
        match args.grid.as_str() {
            "map" => map_sweep(mode, name, &samples, probs, &thresholds, &cfg),
            _ => fpfn_sweep(mode, name, &samples, probs, args.class, &thresholds, &cfg),
        }
    };
    sweeps.push(run(PipelineMode::Baseline, "score", None)?);
    for s in &args.sources {
        let source = FeatureSource::parse(s)?;
        let (_, oof) = cross_validate(
            &GbtConfig::classifier(),
            &table,
            source,
            MetaTask::Classify,
            args.folds,
            opts.seed,
        )?;
        let mut probs = MetaProbs::new();
        for (r, &p) in table.rows.iter().zip(&oof) {
            probs.insert((r.image_id.clone(), r.box_index), p);
        }
        sweeps.push(run(
            PipelineMode::MetaFusion,
            &format!("meta:{}", source.name()),
            Some(&probs),
        )?);
    }
    io::save_sweeps(&args.out, &args.grid, &sweeps)?;
    for sweep in &sweeps {
        if args.grid == "map" {
            let best = sweep
                .points
                .iter()
                .map(|p| p.map.unwrap_or(0.0))
                .fold(f64::NEG_INFINITY, f64::max);
            println!("fuse: {:>10} best mAP over grid {:.4}", sweep.source, best);
        } else {
            let best = sweep
                .points
                .iter()
                .map(|p| p.false_positives.unwrap() + p.false_negatives.unwrap())
                .min()
                .unwrap_or(0);
            println!("fuse: {:>10} best FP+FN over grid {}", sweep.source, best);
        }
    }
    Ok(())
}

pub struct FlopsArgs {
    pub out: PathBuf,
}

pub fn cmd_flops(opts: &GlobalOpts, args: &FlopsArgs) -> Result<()> {
    let mut rows: Vec<(String, String, String, String, String)> = Vec::new();
    let mut all_ok = true;

    for row in certification_report(opts.seed) {
        let ok = row.exact();
        all_ok &= ok;
        rows.push((
            row.phase.to_string(),
            row.params.replace(' ', ";"),
            row.closed_form.to_string(),
            row.measured.to_string(),
            if ok { "exact" } else { "MISMATCH" }.to_string(),
        ));
    }

    // scaling sweeps backing the asymptotic claims
    let ks = [4usize, 8, 16];
    let xs: Vec<f64> = ks.iter().map(|&k| (k * 3) as f64).collect();
    let ys: Vec<f64> = ks
        .iter()
        .map(|&k| dense_grad_last_microkernel(k, 3, 1, opts.seed).1 as f64)
        .collect();
    let (_, _, r2) = affine_fit(&xs, &ys);
    all_ok &= r2 >= 0.999;
    rows.push((
        "grad_last_scaling".into(),
        "k_t in {4,8,16};k_prev=3;s_t=1".into(),
        "affine in k_t*k_prev".into(),
        format!("r2={r2:.6}"),
        if r2 >= 0.999 { "ok" } else { "LOW_R2" }.to_string(),
    ));
    let hs = [4usize, 8, 16];
    let xs: Vec<f64> = hs.iter().map(|&h| (4 * 3 * h * 5) as f64).collect();
    let ys: Vec<f64> = hs
        .iter()
        .map(|&h| dropout_residual_microkernel(4, 3, 1, h, 5, opts.seed) as f64)
        .collect();
    let (_, _, r2) = affine_fit(&xs, &ys);
    all_ok &= r2 >= 0.999;
    rows.push((
        "dropout_scaling".into(),
        "h in {4,8,16};k_t=4;k_prev=3;s_t=1;w=5".into(),
        "affine in k_t*k_prev*h*w".into(),
        format!("r2={r2:.6}"),
        if r2 >= 0.999 { "ok" } else { "LOW_R2" }.to_string(),
    ));

    // loss-derivative cost against the per-head upper bounds
    for c in [1usize, 3, 10] {
        for kind in [HeadKind::Yolo, HeadKind::Retina] {
            let m = measure_dloss(kind, c, opts.seed)?;
            let bound = dloss_flop_bound(kind, c as u64, m.n_out);
            let ebound = dloss_eval_bound(kind, c as u64, m.n_out);
            let ok = m.flops <= bound && m.evals <= ebound;
            all_ok &= ok;
            rows.push((
                format!("dloss_{}", kind.name()),
                format!("C={c};n_out={}", m.n_out),
                format!("<={bound};evals<={ebound}"),
                format!("{};evals={}", m.flops, m.evals),
                if ok { "within_bound" } else { "VIOLATION" }.to_string(),
            ));
        }
        let rpn = measure_dloss(HeadKind::Rpn, c, opts.seed)?;
        let roi = measure_dloss(HeadKind::Roi, c, opts.seed)?;
        let bound = dloss_flop_bound(HeadKind::Rpn, c as u64, rpn.n_out)
            + dloss_flop_bound(HeadKind::Roi, c as u64, roi.n_out);
        let flops = rpn.flops + roi.flops;
        let evals = rpn.evals + roi.evals;
        let ok = flops <= bound && evals == 0;
        all_ok &= ok;
        rows.push((
            "dloss_faster_rcnn".into(),
            format!("C={c};n_out_rpn={};n_out={}", rpn.n_out, roi.n_out),
            format!("<={bound};evals=0"),
            format!("{flops};evals={evals}"),
            if ok { "within_bound" } else { "VIOLATION" }.to_string(),
        ));
    }

    // dropout post-processing bounds
    for kind in [HeadKind::Yolo, HeadKind::Rpn, HeadKind::Roi, HeadKind::Retina] {
        let c = 3usize;
        let m = measure_mc_postprocess(kind, c, 5, opts.seed)?;
        let fbound = mc_postprocess_flop_bound(kind, c as u64, m.n_out, 5);
        let ebound = mc_postprocess_eval_bound(kind, c as u64, m.n_out, 5);
        let ok = m.flops <= fbound && m.evals <= ebound;
        all_ok &= ok;
        rows.push((
            format!("mc_postprocess_{}", kind.name()),
            format!("C={c};n_out={};n_samp=5", m.n_out),
            format!("<={fbound};evals<={ebound}"),
            format!("{};evals={}", m.flops, m.evals),
            if ok { "within_bound" } else { "VIOLATION" }.to_string(),
        ));
    }

    // reference closed-form values
    rows.push((
        "grad_last_reference".into(),
        "k_t=4;k_prev=3;s_t=1".into(),
        "1917".into(),
        certified_grad_last_flops(4, 3, 1).to_string(),
        "exact".into(),
    ));
    rows.push((
        "dropout_reference".into(),
        "n_t=100;k_prev=3;s_t=1".into(),
        "5499".into(),
        certified_dropout_forward_flops(100, 3, 1).to_string(),
        "exact".into(),
    ));

    io::save_cert_rows(&args.out, &rows)?;
    println!(
        "flops: {} checks -> {} ({})",
        rows.len(),
        args.out.display(),
        if all_ok { "all passed" } else { "FAILURES PRESENT" }
    );
    if !all_ok {
        return Err(Error::internal("cost-model certification failed"));
    }
    Ok(())
}
