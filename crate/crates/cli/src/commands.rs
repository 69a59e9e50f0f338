use crate::manifest::{manifest_for, run_stage, Input, StageStatus, MANIFEST};
use crate::{AblateArgs, ConfigArgs, EvalArgs, EvalCmd, PipelineArgs, RenderArgs, ScaffoldCmd, SceneCmd, TrainArgs};
use nerfvs_core::dataset::{Dataset, DatasetSpec, Split};
use nerfvs_core::eval::{evaluate_split, render_view, run_variant, AblationRow, AblationTable, EvalReport, Variant};
use nerfvs_core::field::VoxelGrid;
use nerfvs_core::geometry::{CameraModel, MeshAccel};
use nerfvs_core::io::{self, Image};
use nerfvs_core::scaffold::{bake_training_priors, CoverageMap};
use nerfvs_core::synth::{PerturbMode, SceneSpec, TrajectorySpec};
use nerfvs_core::train::{TrainConfig, Trainer};
use nerfvs_core::{Error, Result};
use serde_json::json;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// An error, optionally tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct Failure {
    stage: Option<&'static str>,
    error: Error,
}

impl Failure {
    pub fn error(&self) -> &Error {
        &self.error
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self { stage: None, error }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage {s} failed: {}", self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn in_stage<T>(stage: &'static str, r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|error| Failure {
        stage: Some(stage),
        error,
    })
}

pub fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.preset {
        Some(p) => TrainConfig::preset(p)?,
        None => TrainConfig::default(),
    };
    if let Some(path) = &args.config {
        cfg.apply_text(&io::read_string(path)?)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_json(cfg: &TrainConfig) -> serde_json::Value {
    json!(cfg.to_text())
}

fn write_pfm_file(path: &Path, width: u32, height: u32, values: &[f64]) -> Result<()> {
    io::write_bytes(path, &io::write_pfm(width, height, values))
}

fn coverage_values(c: &CoverageMap) -> Vec<f64> {
    c.values.iter().map(|&v| v as f64).collect()
}

pub fn scene(cmd: SceneCmd) -> CmdResult {
    match cmd {
        SceneCmd::Spec { preset, size, out } => {
            let spec = match preset.as_str() {
                "desk" => DatasetSpec::desk_room(size),
                "l-room" => DatasetSpec {
                    scene: SceneSpec::l_room(),
                    trajectory: l_room_trajectory(size),
                    eps: nerfvs_core::scaffold::DEFAULT_EPS,
                },
                other => return Err(Error::Config(format!("unknown scene preset {other:?}")).into()),
            };
            io::save_json(&out, &spec)?;
            Ok(())
        }
        SceneCmd::Gen { spec, out } => {
            let spec_value: DatasetSpec = io::load_json(&spec)?;
            let manifest = manifest_for("scene-gen", json!(spec_value), &[Input::new("spec", &spec)])?;
            run_stage(&out, MANIFEST, manifest, false, || {
                let ds = Dataset::generate(&spec_value)?;
                ds.save(&out)?;
                Ok(dataset_outputs(&ds, true))
            })?;
            Ok(())
        }
        SceneCmd::Perturb {
            data,
            out,
            mode,
            mag,
            seed,
        } => {
            let mode: PerturbMode = mode.parse()?;
            let mut ds = Dataset::load(&data)?;
            let config = json!({ "mode": mode, "mag": mag, "seed": seed });
            let manifest = manifest_for("scene-perturb", config, &[Input::new("data", &data)])?;
            run_stage(&out, MANIFEST, manifest, false, || {
                let mesh = nerfvs_core::synth::perturb_scaffold(&ds.scaffold, mode, mag, seed)?;
                ds.rebake(mesh)?;
                ds.save(&out)?;
                Ok(dataset_outputs(&ds, true))
            })?;
            Ok(())
        }
    }
}

/// Camera layout used by the `l-room` spec template.
fn l_room_trajectory(size: u32) -> TrajectorySpec {
    TrajectorySpec {
        n_train: 20,
        focus: [-0.2, -0.3, -0.2],
        orbit_radius: 0.45,
        orbit_y: 0.2,
        orbit_start_deg: 0.0,
        orbit_arc_deg: 270.0,
        sweep_center: [-0.5, 0.1, 0.5],
        extrap_min: [-0.6, 0.0, -0.6],
        extrap_max: [0.6, 0.0, -0.3],
        ..TrajectorySpec::desk_room(size, size)
    }
}

fn dataset_outputs(ds: &Dataset, with_priors: bool) -> Vec<String> {
    let mut out = vec!["spec.json".to_string(), "scaffold.obj".to_string()];
    for split in Split::ALL {
        out.push(format!("cameras_{split}.json"));
        let n = ds.split(split).cameras.len();
        out.extend((0..n).map(|i| format!("gt/{split}/{i}.ppm")));
        out.extend((0..n).map(|i| format!("gt/{split}/dist_{i}.pfm")));
    }
    if with_priors {
        out.extend(prior_outputs(ds).into_iter().map(|p| format!("priors/{p}")));
    }
    out
}

/// Prior files relative to `priors/`.
fn prior_outputs(ds: &Dataset) -> Vec<String> {
    let n = ds.train.cameras.len();
    let mut out: Vec<String> = (0..n).flat_map(|i| [format!("dist_{i}.pfm"), format!("cov_{i}.pfm")]).collect();
    for split in [Split::Interp, Split::Extrap] {
        out.extend((0..ds.split(split).cameras.len()).map(|i| format!("{split}/cov_{i}.pfm")));
    }
    out
}

pub fn scaffold(cmd: ScaffoldCmd) -> CmdResult {
    let ScaffoldCmd::Bake { mesh, cameras, out, eps } = cmd;
    let mesh_data = io::load_mesh(&mesh)?;
    let cams = io::load_cameras(&cameras)?;
    let manifest = manifest_for(
        "scaffold-bake",
        json!({ "eps": eps }),
        &[Input::new("mesh", &mesh), Input::new("cameras", &cameras)],
    )?;
    run_stage(&out, MANIFEST, manifest, false, || {
        let accel = MeshAccel::new(mesh_data)?;
        let priors = bake_training_priors(&accel, &cams, eps)?;
        let mut outputs = Vec::new();
        for (i, (d, c)) in priors.distance.iter().zip(&priors.coverage).enumerate() {
            write_pfm_file(&out.join(format!("dist_{i}.pfm")), d.width, d.height, &d.values)?;
            write_pfm_file(&out.join(format!("cov_{i}.pfm")), c.width, c.height, &coverage_values(c))?;
            outputs.push(format!("dist_{i}.pfm"));
            outputs.push(format!("cov_{i}.pfm"));
        }
        Ok(outputs)
    })?;
    Ok(())
}

/// Trains with progress on stderr and writes checkpoint, log and config.
fn train_into(data: &Dataset, cfg: &TrainConfig, out: &Path) -> Result<Vec<String>> {
    let set = data.training_set(cfg.near)?;
    let mut trainer = Trainer::new(&set, cfg.clone())?;
    let start = Instant::now();
    while !trainer.is_done() {
        let rec = trainer.step()?;
        let it = rec.iteration + 1;
        if it % cfg.log_every == 0 || it == cfg.iterations {
            eprintln!(
                "iter {it:>6}/{}  loss {:.5}  color {:.5}  depth {:.5}  {:.1}s",
                cfg.iterations,
                rec.total,
                rec.color,
                rec.depth,
                start.elapsed().as_secs_f64()
            );
        }
    }
    let every = cfg.log_every;
    let (grid, log) = trainer.finish();
    io::save_checkpoint(&out.join("checkpoint.nvsg"), &grid)?;
    io::write_bytes(&out.join("log.csv"), log.to_csv(every).as_bytes())?;
    io::write_bytes(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    Ok(vec!["checkpoint.nvsg".into(), "log.csv".into(), "config.txt".into()])
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let cfg = resolve_config(&args.config)?;
    let data = Dataset::load(&args.data)?;
    let manifest = manifest_for("train", config_json(&cfg), &[Input::new("data", &args.data)])?;
    run_stage(&args.out, MANIFEST, manifest, false, || train_into(&data, &cfg, &args.out))?;
    Ok(())
}

/// Writes `<i>.ppm` and `depth_<i>.pfm` per camera.
fn render_into(grid: &VoxelGrid, cameras: &[CameraModel], samples: usize, near: f64, out: &Path) -> Result<Vec<String>> {
    let mut outputs = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let (img, depth) = render_view(grid, cam, samples, near)?;
        io::save_image(&out.join(format!("{i}.ppm")), &img)?;
        write_pfm_file(&out.join(format!("depth_{i}.pfm")), cam.width(), cam.height(), &depth)?;
        outputs.push(format!("{i}.ppm"));
        outputs.push(format!("depth_{i}.pfm"));
    }
    Ok(outputs)
}

pub fn render(args: &RenderArgs) -> CmdResult {
    if args.samples < 2 {
        return Err(Error::Config("--samples must be >= 2".into()).into());
    }
    let grid = io::load_checkpoint(&args.ckpt)?;
    let cameras = io::load_cameras(&args.cameras)?;
    let manifest = manifest_for(
        "render",
        json!({ "samples": args.samples, "near": args.near }),
        &[Input::new("checkpoint", &args.ckpt), Input::new("cameras", &args.cameras)],
    )?;
    run_stage(&args.out, MANIFEST, manifest, false, || {
        std::fs::create_dir_all(&args.out).map_err(|source| Error::Io {
            path: args.out.clone(),
            source,
        })?;
        render_into(&grid, &cameras, args.samples, args.near, &args.out)
    })?;
    Ok(())
}

fn evaluate_into(
    grid: &VoxelGrid,
    data: &Dataset,
    split: Split,
    samples: usize,
    near: f64,
    report_path: &Path,
    renders: Option<&Path>,
) -> Result<EvalReport> {
    let (report, images) = evaluate_split(grid, split, data.split(split), samples, near)?;
    io::save_json(report_path, &report)?;
    if let Some(dir) = renders {
        for (i, (img, _)) in images.iter().enumerate() {
            io::save_image(&dir.join(format!("{i}.ppm")), img)?;
        }
    }
    Ok(report)
}

pub fn eval(args: EvalArgs) -> CmdResult {
    if let Some(EvalCmd::Ablate(a)) = args.command {
        return ablate(&a);
    }
    let missing = |what: &str| Failure::from(Error::Config(format!("eval: missing --{what}")));
    let ckpt = args.ckpt.as_ref().ok_or_else(|| missing("ckpt"))?;
    let data_dir = args.data.as_ref().ok_or_else(|| missing("data"))?;
    let report = args.report.as_ref().ok_or_else(|| missing("report"))?;
    let grid = io::load_checkpoint(ckpt)?;
    let data = Dataset::load(data_dir)?;
    let dir = report.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let stem = report.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
    let manifest = manifest_for(
        "eval",
        json!({ "split": args.split, "samples": args.samples, "near": args.near }),
        &[Input::new("checkpoint", ckpt), Input::new("data", data_dir)],
    )?;
    let file_name = report.file_name().map_or("report.json".into(), |s| s.to_string_lossy().into_owned());
    run_stage(&dir, &format!("{stem}.manifest.json"), manifest, false, || {
        let r = evaluate_into(&grid, &data, args.split, args.samples, args.near, report, args.renders.as_deref())?;
        eprintln!(
            "{}: PSNR {:.3}  SSIM {:.4}  depth RMSE {:.4}",
            args.split, r.mean_psnr, r.mean_ssim, r.mean_depth_rmse
        );
        Ok(vec![file_name])
    })?;
    Ok(())
}

fn ablate(args: &AblateArgs) -> CmdResult {
    let base = resolve_config(&args.config)?;
    let data = Dataset::load(&args.data)?;
    let out = args.out.clone().unwrap_or_else(|| args.data.join("ablation"));
    let mut variants = Vec::new();
    if args.baseline {
        variants.push(Variant::Baseline);
    }
    variants.extend(Variant::TABLE);
    let manifest = manifest_for(
        "eval-ablate",
        json!({ "config": base.to_text(), "variants": variants, "grid_views": args.grid_views }),
        &[Input::new("data", &args.data)],
    )?;
    run_stage(&out, MANIFEST, manifest, false, || {
        let mut rows = Vec::new();
        let mut renders: Vec<(Vec<Image>, Vec<Image>)> = Vec::new();
        let mut outputs = Vec::new();
        for &v in &variants {
            eprintln!("ablation: training {}", v.name());
            let run = run_variant(&data, &base, v)?;
            io::save_checkpoint(&out.join(v.name()).join("checkpoint.nvsg"), &run.grid)?;
            outputs.push(format!("{}/checkpoint.nvsg", v.name()));
            let keep = |r: &Vec<(Image, Vec<f64>)>| r.iter().take(args.grid_views).map(|(i, _)| i.clone()).collect();
            renders.push((keep(&run.interp.1), keep(&run.extrap.1)));
            rows.push(AblationRow {
                variant: v,
                interp: run.interp.0,
                extrap: run.extrap.0,
            });
        }
        let table = AblationTable { rows };
        io::write_bytes(&out.join("ablation.csv"), table.to_csv().as_bytes())?;
        io::save_json(&out.join("ablation.json"), &table)?;
        outputs.extend(["ablation.csv".to_string(), "ablation.json".to_string()]);
        for (s, split) in [Split::Interp, Split::Extrap].into_iter().enumerate() {
            let gts = &data.split(split).images;
            for i in 0..args.grid_views.min(gts.len()) {
                let mut row: Vec<&Image> = vec![&gts[i]];
                row.extend(renders.iter().map(|r| if s == 0 { &r.0[i] } else { &r.1[i] }));
                let name = format!("grids/{split}_{i}.ppm");
                io::save_image(&out.join(&name), &Image::hstack(&row))?;
                outputs.push(name);
            }
        }
        eprint!("{}", table.to_csv());
        Ok(outputs)
    })?;
    Ok(())
}

pub fn pipeline(args: &PipelineArgs) -> CmdResult {
    let cfg = in_stage("config", resolve_config(&args.config))?;
    let spec: DatasetSpec = in_stage("scene", io::load_json(&args.spec))?;
    let out = &args.out;
    let data_dir = out.join("dataset");
    let train_dir = out.join("train");
    let start = Instant::now();
    let mut timings = std::collections::BTreeMap::new();
    let mut note = |stage: &str, status: StageStatus, secs: f64| {
        let verb = if status == StageStatus::Skipped { "reused" } else { "done" };
        eprintln!("[{stage}] {verb} ({secs:.1}s)");
        timings.insert(stage.to_string(), secs);
    };

    let t = Instant::now();
    let m = in_stage("scene", manifest_for("scene", json!(spec), &[Input::new("spec", &args.spec)]))?;
    let (status, _) = in_stage(
        "scene",
        run_stage(&data_dir, MANIFEST, m, true, || {
            let ds = Dataset::render(&spec)?;
            ds.save_views(&data_dir)?;
            Ok(dataset_outputs(&ds, false))
        }),
    )?;
    note("scene", status, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let priors_dir = data_dir.join("priors");
    let views = Input {
        name: "dataset",
        path: data_dir.clone(),
        exclude: &["priors"],
    };
    let m = in_stage("bake", manifest_for("bake", json!({ "eps": spec.eps }), &[views]))?;
    let (status, _) = in_stage(
        "bake",
        run_stage(&priors_dir, MANIFEST, m, true, || {
            let mut ds = Dataset::load_views(&data_dir)?;
            ds.rebake(ds.scaffold.clone())?;
            ds.check_few_shot()?;
            ds.save_priors(&data_dir)?;
            Ok(prior_outputs(&ds))
        }),
    )?;
    note("bake", status, t.elapsed().as_secs_f64());

    let data = in_stage("train", Dataset::load(&data_dir))?;
    let t = Instant::now();
    let m = in_stage("train", manifest_for("train", config_json(&cfg), &[Input::new("dataset", &data_dir)]))?;
    let (status, _) = in_stage("train", run_stage(&train_dir, MANIFEST, m, true, || train_into(&data, &cfg, &train_dir)))?;
    note("train", status, t.elapsed().as_secs_f64());

    let ckpt = train_dir.join("checkpoint.nvsg");
    let grid = in_stage("render", io::load_checkpoint(&ckpt))?;
    let t = Instant::now();
    let render_dir = out.join("render");
    let m = in_stage(
        "render",
        manifest_for(
            "render",
            json!({ "samples": cfg.n_samples_per_ray, "near": cfg.near }),
            &[Input::new("checkpoint", &ckpt), Input::new("dataset", &data_dir)],
        ),
    )?;
    let (status, _) = in_stage(
        "render",
        run_stage(&render_dir, MANIFEST, m, true, || {
            let mut outputs = Vec::new();
            for split in [Split::Interp, Split::Extrap] {
                let dir = render_dir.join(split.name());
                let files = render_into(&grid, &data.split(split).cameras, cfg.n_samples_per_ray, cfg.near, &dir)?;
                outputs.extend(files.into_iter().map(|f| format!("{split}/{f}")));
            }
            Ok(outputs)
        }),
    )?;
    note("render", status, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let eval_dir = out.join("eval");
    let m = in_stage(
        "eval",
        manifest_for(
            "eval",
            json!({ "samples": cfg.n_samples_per_ray, "near": cfg.near }),
            &[Input::new("checkpoint", &ckpt), Input::new("dataset", &data_dir)],
        ),
    )?;
    let (status, _) = in_stage(
        "eval",
        run_stage(&eval_dir, MANIFEST, m, true, || {
            let mut outputs = Vec::new();
            for split in [Split::Interp, Split::Extrap] {
                let name = format!("report_{split}.json");
                let r = evaluate_into(&grid, &data, split, cfg.n_samples_per_ray, cfg.near, &eval_dir.join(&name), None)?;
                eprintln!(
                    "{split}: PSNR {:.3}  SSIM {:.4}  depth RMSE {:.4}",
                    r.mean_psnr, r.mean_ssim, r.mean_depth_rmse
                );
                outputs.push(name);
            }
            Ok(outputs)
        }),
    )?;
    note("eval", status, t.elapsed().as_secs_f64());

    let mut m = in_stage(
        "pipeline",
        manifest_for("pipeline", json!({ "config": cfg.to_text(), "spec": spec }), &[Input::new("spec", &args.spec)]),
    )?;
    m.outputs = vec![
        "dataset".into(),
        "train/checkpoint.nvsg".into(),
        "render".into(),
        "eval/report_interp.json".into(),
        "eval/report_extrap.json".into(),
    ];
    m.timings = timings;
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    in_stage("pipeline", io::save_json(&out.join(MANIFEST), &m))?;
    Ok(())
}
