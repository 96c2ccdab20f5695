//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use synthrefine::eyegen::{generate_dataset, load_manifest, DatasetSpec, DomainShiftConfig};
use synthrefine::gazeval::{benchmark_sized, BenchmarkReport, EstimatorSpec, NamedSet};
use synthrefine::imageops::{resize, resize_mask};
use synthrefine::io::{self, ManifestRow};
use synthrefine::refiner::{train, Refiner, RefinerSample, TrainOptions, TrainingData};
use synthrefine::segmenter::{train_segmenter as fit_segmenter, Segmenter, SegmenterTraining};
use synthrefine::{load_config, ClassMask, Error, GazeSample, RefinerConfig, Result};

use crate::grid;
use crate::{Common, EvalGazeArgs, RefineArgs, ReportArgs, SegmentArgs, SynthArgs, TrainRefinerArgs, TrainSegmenterArgs};

/// Run directory entries written by `train-refiner`.
pub const CONFIG_FILE: &str = "config.cfg";
pub const INPUTS_FILE: &str = "inputs.txt";
pub const LOSSES_FILE: &str = "losses.csv";
pub const REFINER_DIR: &str = "refiner";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TABLE_FILE: &str = "table1.csv";

/// Defaults, then `base` (or `--config`), then `--set`, then the seed flag.
fn resolve_config(common: &Common, base: Option<&Path>) -> Result<RefinerConfig> {
    let mut cfg = match common.config.as_deref().or(base) {
        Some(path) => load_config(path)?,
        None => RefinerConfig::default(),
    };
    for assignment in &common.set {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidParams(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::canonicalize(path)?)
}

/// Mask of a sample: its own when present, otherwise the segmenter's.
fn mask_for(sample: &GazeSample, segmenter: Option<&Segmenter>, what: &str) -> Result<ClassMask> {
    match (&sample.mask, segmenter) {
        (Some(m), _) => Ok(m.clone()),
        (None, Some(seg)) => seg.mask(&sample.image),
        (None, None) => Err(Error::MaskMismatch(format!("{what} image has no mask and no segmenter was given"))),
    }
}

fn load_segmenter(path: Option<&Path>) -> Result<Option<Segmenter>> {
    path.map(Segmenter::load).transpose()
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let seed = args.common.seed.unwrap_or(0);
    let shift = args.shifted.then(|| DomainShiftConfig::pseudo_real(seed));
    let spec = DatasetSpec::new(args.n, args.gaze_range, shift, args.size, seed);
    let manifest = generate_dataset(&spec, &args.common.out_dir)?;
    println!("wrote {} images to {}", args.n, manifest.display());
    Ok(())
}

pub fn train_segmenter(args: &TrainSegmenterArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, None)?;
    let samples = load_manifest(&args.manifest)?;
    let s = args.size;
    let data = samples
        .iter()
        .enumerate()
        .map(|(i, smp)| {
            let mask = smp.mask.as_ref().ok_or_else(|| Error::MaskMismatch(format!("row {} has no mask", i + 1)))?;
            Ok((resize(&smp.image, s, s)?, resize_mask(mask, s, s)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = args.common.out_dir.join("segmenter");
    let opts = SegmenterTraining {
        width: cfg.seg_width,
        epochs: args.epochs.unwrap_or(cfg.seg_epochs),
        learning_rate: cfg.seg_learning_rate,
        seed: cfg.seed,
        checkpoint_dir: Some(dir.clone()),
        ..SegmenterTraining::default()
    };
    let trained = fit_segmenter(&data, &opts)?;
    let mut log = csv::Writer::from_path(dir.join("losses.csv")).map_err(Error::from)?;
    log.write_record(["epoch", "cross_entropy"])?;
    for (i, l) in trained.epoch_losses.iter().enumerate() {
        log.write_record([(i + 1).to_string(), format!("{l:.6}")])?;
    }
    log.flush()?;
    let file = Segmenter::new(trained.net, s).save_dir(&dir)?;
    match trained.epoch_losses.last() {
        Some(l) => println!("final cross-entropy {l:.5}; wrote {}", file.display()),
        None => println!("no epochs run; wrote {}", file.display()),
    }
    Ok(())
}

pub fn segment(args: &SegmentArgs) -> Result<()> {
    let seg = Segmenter::load(&args.segmenter)?;
    let base = io::manifest_dir(&args.manifest);
    let rows = io::read_manifest(&args.manifest)?;
    let out = &args.common.out_dir;
    std::fs::create_dir_all(out.join("masks"))?;
    let mut out_rows = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let file = row.image_file(&base);
        if !file.exists() {
            return Err(Error::MissingImage(file));
        }
        let mask = seg.mask(&io::load_image(&file)?)?;
        let mask_path = format!("masks/{i:05}.png");
        io::save_mask(&mask, &out.join(&mask_path))?;
        out_rows.push(ManifestRow { image_path: absolute(&file)?.display().to_string(), mask_path, ..row.clone() });
    }
    let path = out.join("manifest.csv");
    io::write_manifest(&path, &out_rows)?;
    println!("segmented {} images; wrote {}", rows.len(), path.display());
    Ok(())
}

/// Manifest paths recorded by `train-refiner` for later reporting.
#[derive(Debug, Default)]
pub struct RunInputs {
    pub synthetic: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub segmenter: Option<PathBuf>,
}

impl RunInputs {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(INPUTS_FILE);
        let mut inputs = Self::default();
        if !path.exists() {
            return Ok(inputs);
        }
        for line in std::fs::read_to_string(&path)?.lines() {
            if let Some((k, v)) = line.split_once('=') {
                let v = Some(PathBuf::from(v.trim()));
                match k.trim() {
                    "synthetic" => inputs.synthetic = v,
                    "real" => inputs.real = v,
                    "segmenter" => inputs.segmenter = v,
                    _ => {}
                }
            }
        }
        Ok(inputs)
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in [("synthetic", &self.synthetic), ("real", &self.real), ("segmenter", &self.segmenter)] {
            if let Some(p) = v {
                text.push_str(&format!("{k} = {}\n", p.display()));
            }
        }
        std::fs::write(run_dir.join(INPUTS_FILE), text)?;
        Ok(())
    }
}

/// Synthetic samples get their own masks for the losses; the discriminator
/// sees segmenter masks for both domains whenever a segmenter is given.
fn training_data(synthetic: &[GazeSample], real: &[GazeSample], seg: Option<&Segmenter>) -> Result<TrainingData> {
    let synthetic = synthetic
        .iter()
        .map(|s| {
            let mut sample = RefinerSample::new(s.image.clone(), mask_for(s, seg, "synthetic")?);
            if let Some(seg) = seg {
                sample.disc_mask = Some(seg.mask(&s.image)?);
            }
            Ok(sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let real = real
        .iter()
        .map(|s| {
            let mask = match seg {
                Some(seg) => seg.mask(&s.image)?,
                None => mask_for(s, None, "real")?,
            };
            Ok(RefinerSample::new(s.image.clone(), mask))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingData { synthetic, real })
}

pub fn train_refiner(args: &TrainRefinerArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common, None)?;
    if let Some(s) = &args.stage_iters {
        cfg.set("stage_iters", s)?;
    }
    if let Some(r) = args.train_resolution {
        cfg.train_resolution = r;
    }
    if let Some(n) = args.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    cfg.validate()?;
    let out = &args.common.out_dir;
    std::fs::create_dir_all(out.join(REFINER_DIR))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let inputs = RunInputs {
        synthetic: args.synthetic.as_deref().map(absolute).transpose()?,
        real: args.real.as_deref().map(absolute).transpose()?,
        segmenter: args.segmenter.as_deref().map(absolute).transpose()?,
    };
    inputs.write(out)?;

    let seg = load_segmenter(inputs.segmenter.as_deref())?;
    let load = |p: &Option<PathBuf>| -> Result<Vec<GazeSample>> { p.as_deref().map(load_manifest).transpose().map(Option::unwrap_or_default) };
    let data = training_data(&load(&inputs.synthetic)?, &load(&inputs.real)?, seg.as_ref())?;

    let mut refiner = Refiner::new(&cfg, Refiner::percept_for(&cfg)?)?;
    let opts = TrainOptions { checkpoint_dir: Some(out.join(REFINER_DIR)), verbose: args.common.verbose };
    let history = train(&mut refiner, &data, &cfg, &opts)?;
    let final_path = out.join(REFINER_DIR).join(FINAL_CHECKPOINT);
    refiner.save(&final_path)?;
    history.write_csv(&out.join(LOSSES_FILE))?;
    println!(
        "trained {} iterations, {} checkpoints; wrote {}",
        history.iterations.len(),
        history.checkpoints.len(),
        final_path.display()
    );
    Ok(())
}

/// A refiner built from a run's configuration with the given weights.
fn load_refiner(cfg: &RefinerConfig, checkpoint: &Path) -> Result<Refiner> {
    let mut refiner = Refiner::new(cfg, Refiner::percept_for(cfg)?)?;
    refiner.load_weights(checkpoint)?;
    Ok(refiner)
}

pub fn refine(args: &RefineArgs) -> Result<()> {
    let run_config = args.run_dir.as_ref().map(|d| d.join(CONFIG_FILE));
    let cfg = resolve_config(&args.common, run_config.as_deref())?;
    let checkpoint = match (&args.checkpoint, &args.run_dir) {
        (Some(c), _) => c.clone(),
        (None, Some(d)) => d.join(REFINER_DIR).join(FINAL_CHECKPOINT),
        (None, None) => return Err(Error::InvalidParams("refine needs --checkpoint or --run-dir".into())),
    };
    let segmenter_path = match (&args.segmenter, &args.run_dir) {
        (Some(s), _) => Some(s.clone()),
        (None, Some(d)) => RunInputs::read(d)?.segmenter,
        (None, None) => None,
    };
    let seg = load_segmenter(segmenter_path.as_deref())?;
    let refiner = load_refiner(&cfg, &checkpoint)?;
    let manifest = refiner.refine_batch(&args.manifest, &args.common.out_dir, seg.as_ref())?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidParams(format!("input size `{s}` is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn estimator_specs(names: &[String], k: usize, trees: usize, seed: u64) -> Result<Vec<EstimatorSpec>> {
    names
        .iter()
        .map(|name| match name.as_str() {
            "knn" if k > 0 => Ok(EstimatorSpec::knn(k)),
            "rf" if trees > 0 => Ok(EstimatorSpec::forest(trees, seed)),
            other => EstimatorSpec::parse(other, seed),
        })
        .collect()
}

fn write_table(report: &BenchmarkReport, path: &Path) -> Result<()> {
    report.write_csv(path)?;
    print!("{}", std::fs::read_to_string(path)?);
    Ok(())
}

pub fn eval_gaze(args: &EvalGazeArgs) -> Result<()> {
    let seed = args.common.seed.unwrap_or(0);
    let specs = estimator_specs(&args.estimator, args.k, args.trees, seed)?;
    let input = args.input_size.as_deref().map(parse_size).transpose()?;
    let train_data = args.train.iter().map(|p| load_manifest(p)).collect::<Result<Vec<_>>>()?;
    let test_data = load_manifest(&args.test)?;
    let sets: Vec<NamedSet<'_>> =
        args.train.iter().zip(&train_data).map(|(p, d)| NamedSet { name: p.display().to_string(), samples: d }).collect();
    let test = NamedSet { name: args.test.display().to_string(), samples: &test_data };
    let mut report = benchmark_sized(&sets, &test, &specs, args.common.jobs, input)?;
    if args.reserved_rows {
        report = report.with_reserved_rows(&test.name);
    }
    std::fs::create_dir_all(&args.common.out_dir)?;
    write_table(&report, &args.common.out_dir.join(TABLE_FILE))
}

/// `stage{K}_iter{N}.ckpt` files of a run, ordered by iteration.
pub fn stage_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut found = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let iter = name
            .strip_prefix("stage")
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|r| r.split_once("_iter"))
            .and_then(|(_, n)| n.parse::<usize>().ok());
        if let Some(n) = iter {
            found.insert(n, path);
        }
    }
    Ok(found.into_iter().collect())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let run = &args.run_dir;
    let losses = run.join(LOSSES_FILE);
    let checkpoints = stage_checkpoints(&run.join(REFINER_DIR))?;
    let final_ckpt = run.join(REFINER_DIR).join(FINAL_CHECKPOINT);
    if !losses.exists() && checkpoints.is_empty() && !final_ckpt.exists() {
        return Err(Error::MissingRun(run.clone()));
    }
    let out = &args.common.out_dir;
    std::fs::create_dir_all(out)?;
    if losses.exists() && absolute(out)? != absolute(run)? {
        std::fs::copy(&losses, out.join(LOSSES_FILE))?;
    }

    let cfg = resolve_config(&args.common, Some(&run.join(CONFIG_FILE)).filter(|p| p.exists()).map(PathBuf::as_path))?;
    let inputs = RunInputs::read(run)?;
    let seg = load_segmenter(inputs.segmenter.as_deref())?;
    let synthetic = inputs.synthetic.as_deref().map(load_manifest).transpose()?.unwrap_or_default();
    let real = inputs.real.as_deref().map(load_manifest).transpose()?.unwrap_or_default();
    let test_path = args.test.clone().or(inputs.real.clone());

    let mut table = BenchmarkReport::default();
    let test_name = test_path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "test".into());
    if let (Some(test_path), false, true) = (&test_path, synthetic.is_empty(), final_ckpt.exists()) {
        let test = load_manifest(test_path)?;
        let refiner = load_refiner(&cfg, &final_ckpt)?;
        let refined = synthetic
            .iter()
            .map(|s| {
                let image = refiner.generate(&s.image, &mask_for(s, seg.as_ref(), "synthetic")?)?;
                Ok(GazeSample { image, domain: synthrefine::Domain::Refined, mask: None, ..s.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        let sets = [NamedSet { name: "synthetic".into(), samples: &synthetic }, NamedSet { name: "refined".into(), samples: &refined }];
        let test = NamedSet { name: test_name.clone(), samples: &test };
        table = benchmark_sized(&sets, &test, &[EstimatorSpec::knn(args.k)], args.common.jobs, None)?;
    } else {
        log::warn!("run has no recorded synthetic set, test set or final checkpoint; results table holds reserved rows only");
    }
    write_table(&table.with_reserved_rows(&test_name), &out.join(TABLE_FILE))?;

    let rows = args.grid_rows.min(synthetic.len());
    if rows > 0 {
        let picked: Vec<&GazeSample> = synthetic.iter().take(rows).collect();
        let masks = picked.iter().map(|s| mask_for(s, seg.as_ref(), "synthetic")).collect::<Result<Vec<_>>>()?;
        for (iter, path) in &checkpoints {
            let refiner = load_refiner(&cfg, path)?;
            let refined = picked.iter().zip(&masks).map(|(s, m)| refiner.generate(&s.image, m)).collect::<Result<Vec<_>>>()?;
            let tiles: Vec<[Option<&synthrefine::ImageTensor>; 3]> = (0..rows)
                .map(|i| [Some(&picked[i].image), Some(&refined[i]), real.get(i).map(|r| &r.image)])
                .collect();
            let file = out.join(format!("grid_iter{iter}.png"));
            io::save_image(&grid::mosaic(&tiles, cfg.output_resolution())?, &file)?;
        }
    }
    println!("report written to {}", out.display());
    Ok(())
}
