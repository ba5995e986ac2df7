use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use grainforge::backend::{serve_loopback, serve_stdio};
use grainforge::ddpm::{NoiseSchedule, ScheduleParams};
use grainforge::generate::{
    denoiser_from_spec, generate, generated_meta, GenerateConfig, GenerateError, GenerationState, RunManifest,
};
use grainforge::kmc::{generate_dataset, PottsConfig};
use grainforge::mesh::{apply_mask, read_stl, voxelize, Transform};
use grainforge::planner::{build_plan, verify_plan, GenerationPlan, PlannerConfig, Strategy};
use grainforge::segment::{assign_noise, dbscan4d, hierarchical_segment, DbscanParams, NoisePolicy, TileConfig};
use grainforge::stats::{compare_sets, StatsConfig};
use grainforge::voxel::{
    read_labels, read_mask, read_scalar, write_gvox, write_vtk_legacy, Dims, LabelVolume, Provenance, VolumeMeta,
    SCHEMA_VERSION,
};

use crate::{Command, GenerateArgs};

/// A failed command: exit code 1 for bad input, 2 for runtime failures.
#[derive(Debug)]
pub struct Failure {
    runtime: bool,
    kind: &'static str,
    message: String,
}

impl Failure {
    pub fn user(kind: &'static str, message: impl ToString) -> Self {
        Self { runtime: false, kind, message: message.to_string() }
    }

    pub fn runtime(kind: &'static str, message: impl ToString) -> Self {
        Self { runtime: true, kind, message: message.to_string() }
    }

    pub fn report(&self) {
        eprintln!("{}", json!({ "error": { "kind": self.kind, "message": self.message } }));
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(if self.runtime { 2 } else { 1 })
    }
}

type Outcome = Result<Value, Failure>;

fn input<E: ToString>(kind: &'static str) -> impl FnOnce(E) -> Failure {
    move |e| Failure::user(kind, e)
}

fn output<E: ToString>(e: E) -> Failure {
    Failure::runtime("io", e)
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Plan { dims, strategy, max_batch, block_size, delta, out } => {
            let strategy: Strategy = strategy.parse().map_err(input("config"))?;
            let cfg = PlannerConfig { block_size, delta, strategy, max_batch, ..Default::default() };
            let plan = build_plan(dims, &cfg).map_err(input("config"))?;
            std::fs::write(&out, plan.to_json()).map_err(output)?;
            Ok(json!({ "plan": out, "points": plan.points.len(), "batches": plan.batches.len() }))
        }
        Command::Verify { plan } => {
            let plan = load_plan(&plan)?;
            let report = verify_plan(&plan);
            if report.is_valid() {
                Ok(json!({ "valid": true, "violations": [] }))
            } else {
                let shown: Vec<_> = report.violations.iter().take(20).collect();
                Err(Failure::user(
                    "plan_invalid",
                    json!({ "violations": report.violations.len(), "first": shown }),
                ))
            }
        }
        Command::Generate(args) => run_generate(&args),
        Command::Segment { input: path, eps, min_samples, value_gain, tile, overlap, noise, out } => {
            let vol = read_scalar(&path).map_err(input("input"))?;
            let params = DbscanParams { eps, min_samples, value_gain };
            let policy: NoisePolicy = noise.parse().map_err(input("config"))?;
            let result = match tile {
                Some(tile_size) => hierarchical_segment(&vol, TileConfig { tile_size, overlap }, &params),
                None => dbscan4d(&vol, &params),
            }
            .map_err(input("config"))?;
            let mut labels = assign_noise(&result.labels, policy).map_err(|e| Failure::runtime("segment", e))?;
            labels.meta = VolumeMeta { provenance: Provenance::Diffusion, ..vol.meta.clone() };
            write_gvox(&labels, &out).map_err(output)?;
            Ok(json!({
                "out": out,
                "clusters": result.cluster_count,
                "noise_voxels": result.noise_count,
            }))
        }
        Command::Stats { set_a, set_b, out, csv, bins, aspect_bins, exclude_boundary, no_components, void_label } => {
            let a = load_label_dir(&set_a)?;
            let b = load_label_dir(&set_b)?;
            let cfg = StatsConfig {
                bins,
                aspect_bins,
                exclude_boundary,
                connected_components: !no_components,
                void_label,
                ..Default::default()
            };
            if bins == 0 || aspect_bins == 0 {
                return Err(Failure::user("config", "bin counts must be positive"));
            }
            let report = compare_sets(&a, &b, &cfg).map_err(input("input"))?;
            std::fs::write(&out, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(output)?;
            if let Some(csv) = csv {
                std::fs::write(csv, report.to_csv()).map_err(output)?;
            }
            Ok(json!({
                "out": out,
                "kld": {
                    "volume": report.volume.kld,
                    "aspect_ratio": report.aspect_ratio.kld,
                    "nn_distance": report.nn_distance.kld,
                },
                "grains": [report.grains_a, report.grains_b],
            }))
        }
        Command::Voxelize { stl, dims, scale, translate, out } => {
            let mesh = read_stl(&stl).map_err(input("input"))?;
            let dims = Dims::from_array(dims).map_err(input("config"))?;
            let tf = match scale {
                Some(s) => Transform::uniform(s, translate),
                None => Transform::fit(&mesh, dims),
            };
            let v = voxelize(&mesh, dims, &tf);
            if v.non_watertight {
                eprintln!(
                    "{}",
                    json!({ "warning": { "kind": "non_watertight", "inconsistent_voxels": v.inconsistent } })
                );
            }
            write_gvox(&v.mask, &out).map_err(output)?;
            let inside = v.mask.data().iter().filter(|&&m| m == 1).count();
            Ok(json!({ "out": out, "inside": inside, "non_watertight": v.non_watertight }))
        }
        Command::Mask { input: path, mask, outside_label, out } => {
            let labels = read_labels(&path).map_err(input("input"))?;
            let mask = read_mask(&mask).map_err(input("input"))?;
            let masked = apply_mask(&labels, &mask, outside_label).map_err(input("input"))?;
            write_gvox(&masked, &out).map_err(output)?;
            Ok(json!({ "out": out }))
        }
        Command::ExportVtk { input: path, out } => {
            let labels = read_labels(&path).map_err(input("input"))?;
            write_vtk_legacy(&labels, &out).map_err(output)?;
            Ok(json!({ "out": out }))
        }
        Command::Serve { backend, listen, stdio, max_dims, steps } => {
            let schedule = NoiseSchedule::from_params(ScheduleParams::scaled_linear(steps)).map_err(input("config"))?;
            let denoiser = denoiser_from_spec(&backend, &schedule, Duration::from_secs(30)).map_err(input("config"))?;
            let max: [u16; 3] = max_dims
                .map(|d| u16::try_from(d).unwrap_or(u16::MAX));
            if stdio {
                serve_stdio(denoiser.as_ref(), max).map_err(|e| Failure::runtime("backend", e))?;
                return Ok(json!({ "served": "stdio" }));
            }
            let server = serve_loopback(denoiser, &listen, max).map_err(|e| Failure::runtime("backend", e))?;
            println!("{}", json!({ "listening": server.local_addr().to_string() }));
            loop {
                std::thread::park();
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    dims: [usize; 3],
    runs: usize,
    sweeps: u64,
    #[serde(default)]
    base_seed: u64,
    #[serde(default)]
    potts: PottsConfig,
}

fn simulate(config: &Path, out: &Path) -> Outcome {
    let text = std::fs::read_to_string(config).map_err(input("input"))?;
    let cfg: SimulateConfig = serde_json::from_str(&text).map_err(input("config"))?;
    let dims = Dims::from_array(cfg.dims).map_err(input("config"))?;
    cfg.potts.validate().map_err(input("config"))?;
    let files = generate_dataset(cfg.runs, dims, &cfg.potts, cfg.sweeps, cfg.base_seed, out)
        .map_err(|e| Failure::runtime("simulate", e))?;
    Ok(json!({ "out": out, "files": files }))
}

fn load_plan(path: &Path) -> Result<GenerationPlan, Failure> {
    let text = std::fs::read_to_string(path).map_err(input("input"))?;
    GenerationPlan::from_json(&text).map_err(input("input"))
}

fn load_label_dir(dir: &Path) -> Result<Vec<LabelVolume>, Failure> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(input("input"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gvox"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::user("input", format!("no .gvox files in {}", dir.display())));
    }
    paths.iter().map(|p| read_labels(p).map_err(input("input"))).collect()
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generate_failure(e: GenerateError) -> Failure {
    match e {
        GenerateError::Ddpm(grainforge::ddpm::DdpmError::Backend(m)) => Failure::runtime("backend", m),
        GenerateError::Io(e) => Failure::runtime("io", e),
        GenerateError::Voxel(e) => Failure::runtime("io", e),
        other => Failure::user("config", other),
    }
}

fn run_generate(args: &GenerateArgs) -> Outcome {
    let plan = load_plan(&args.plan)?;
    let config = GenerateConfig {
        schedule: ScheduleParams::scaled_linear(args.steps),
        resamples: args.resamples,
        no_resample_tail: args.tail,
        seed: args.seed,
    };
    let schedule = NoiseSchedule::from_params(config.schedule).map_err(input("config"))?;
    if args.tail > args.steps {
        return Err(Failure::user("config", "tail must not exceed steps"));
    }
    let manifest_path = args.manifest.clone().unwrap_or_else(|| sibling(&args.out, ".manifest.json"));
    let fresh_manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        plan_path: args.plan.clone(),
        backend: args.backend.clone(),
        config,
        completed_batches: 0,
        total_batches: plan.batches.len(),
        checkpoint_volume: sibling(&args.out, ".ckpt.gvox"),
        checkpoint_mask: sibling(&args.out, ".ckpt-mask.gvox"),
        output: args.out.clone(),
    };

    let existing = if !args.fresh && manifest_path.exists() {
        Some(RunManifest::load(&manifest_path).map_err(input("manifest"))?)
    } else {
        None
    };
    let (mut manifest, mut state) = match existing {
        Some(m) => {
            let same = RunManifest { completed_batches: m.completed_batches, ..fresh_manifest.clone() };
            if m != same {
                return Err(Failure::user(
                    "manifest",
                    format!("{} was written with different arguments; pass --fresh to restart", manifest_path.display()),
                ));
            }
            if m.completed_batches >= m.total_batches && m.output.exists() {
                return Ok(json!({ "out": m.output, "complete": true, "resumed_from": m.completed_batches }));
            }
            let state = if m.completed_batches == 0 {
                GenerationState::new(&plan).map_err(generate_failure)?
            } else {
                m.load_state().map_err(input("manifest"))?
            };
            (m, state)
        }
        None => (fresh_manifest, GenerationState::new(&plan).map_err(generate_failure)?),
    };
    let resumed_from = state.completed_batches;

    let denoiser = denoiser_from_spec(&args.backend, &schedule, Duration::from_millis(args.timeout_ms.max(1)))
        .map_err(|e| match e {
            GenerateError::BackendSpec(m) => Failure::user("config", m),
            other => generate_failure(other),
        })?;
    let denoiser: Arc<_> = denoiser;
    generate(&plan, &mut state, denoiser.as_ref(), &config, args.jobs, args.stop_after_batches, |s| {
        manifest.checkpoint(s, &manifest_path)
    })
    .map_err(generate_failure)?;

    let complete = state.completed_batches >= plan.batches.len();
    if complete {
        let vol = state.volume.clone().with_meta(generated_meta(args.seed));
        write_gvox(&vol, &args.out).map_err(output)?;
        let _ = std::fs::remove_file(&manifest.checkpoint_volume);
        let _ = std::fs::remove_file(&manifest.checkpoint_mask);
    }
    Ok(json!({
        "out": args.out,
        "manifest": manifest_path,
        "complete": complete,
        "completed_batches": state.completed_batches,
        "total_batches": plan.batches.len(),
        "resumed_from": resumed_from,
    }))
}
