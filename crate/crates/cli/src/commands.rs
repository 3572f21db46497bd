use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tetdiff::diffusion::{
    conditional_sample, finalize, refine_deformations, slerp, standard_normal_like, Conditioning, NoiseSchedule,
    SampleContext, Sampler, SamplerRegistry, TrajectoryDump,
};
use tetdiff::fitting::{fit_dataset, fit_singleview, DatasetOptions, FitItem, FitSource};
use tetdiff::lattice::DiffusionTensor;
use tetdiff::marching::extract_mesh;
use tetdiff::meshops::{
    laplacian_smooth, load_obj, normalize_to_box, raycast_depth, remove_small_components, sample_surface, save_obj,
    write_depth, Camera, TriMesh,
};
use tetdiff::metrics::{evaluate, ShapeSet};
use tetdiff::scoremodel::{load_checkpoint, save_checkpoint, train as train_net, Checkpoint, DenoiserNet, GridSpec};
use tetdiff::tetgrid::{read_tetg, write_tetg, GridState, TetGrid};

use crate::config::Config;
use crate::{CameraArgs, ModelArgs};

/// Input meshes are rescaled into `[-MESH_HALF_WIDTH, MESH_HALF_WIDTH]^3`.
const MESH_HALF_WIDTH: f64 = 0.9;
/// Stream offset separating refinement noise from latent noise.
const REFINE_STREAM: u64 = 1 << 32;

/// Files in `dir` with extension `ext`, sorted by name.
fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .{ext} files in {}", dir.display());
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Reports failed items and turns any failure into an error.
fn aggregate(what: &str, failures: &[(String, String)], total: usize) -> Result<()> {
    for (id, e) in failures {
        eprintln!("{what} {id} failed: {e}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        bail!("{} of {total} {what} items failed", failures.len())
    }
}

pub fn fit(cfg: &Config, input: &Path, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.paths.data.clone());
    let grid = cfg.grid()?;
    let items: Vec<FitItem> = files_with_extension(input, "obj")?
        .into_iter()
        .map(|p| FitItem {
            id: stem(&p),
            source: FitSource::Obj(p),
        })
        .collect();
    let opts = DatasetOptions {
        out_dir: Some(out.clone()),
        normalize_half_width: Some(MESH_HALF_WIDTH),
    };
    let results = fit_dataset(&items, &grid, &cfg.fit, &opts)?;
    let mut failures = Vec::new();
    for (id, r) in &results {
        match r {
            Ok(o) => println!(
                "{id}: chamfer {:.6} -> {:.6}",
                o.report.initial_chamfer, o.report.final_chamfer
            ),
            Err(e) => failures.push((id.clone(), e.to_string())),
        }
    }
    println!("wrote {} states to {}", results.len() - failures.len(), out.display());
    aggregate("fit", &failures, results.len())
}

fn load_dataset(dir: &Path, grid: &TetGrid) -> Result<Vec<GridState>> {
    files_with_extension(dir, "tetg")?
        .iter()
        .map(|p| {
            let (r, state) = read_tetg(p)?;
            if r != grid.resolution() {
                bail!(
                    "{} holds a resolution {r} state but the grid has resolution {}",
                    p.display(),
                    grid.resolution()
                );
            }
            Ok(state)
        })
        .collect()
}

fn same_schedule(a: &NoiseSchedule, b: &NoiseSchedule) -> bool {
    a.steps() == b.steps() && a.beta_range() == b.beta_range()
}

pub fn train(cfg: &Config, data: Option<PathBuf>, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let data = data.unwrap_or_else(|| cfg.paths.data.clone());
    let out = out.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let grid = cfg.grid()?;
    let sched = cfg.schedule()?;
    let dataset = load_dataset(&data, &grid)?;
    let (mut net, optimizer) = if resume {
        let ck = load_checkpoint(&out)?;
        if ck.grid != cfg.grid_spec() || !same_schedule(&ck.schedule, &sched) {
            bail!("{} was trained with a different grid or noise schedule", out.display());
        }
        if ck.optimizer.is_none() {
            bail!("{} has no optimizer state to resume from", out.display());
        }
        (ck.net, ck.optimizer)
    } else {
        (DenoiserNet::new(cfg.model.clone(), cfg.seed)?, None)
    };
    let first_step = optimizer.as_ref().map_or(0, |a| a.step);
    let outcome = train_net(&mut net, &dataset, &grid, &sched, &cfg.train, optimizer)?;
    save_checkpoint(
        &out,
        &Checkpoint {
            net,
            grid: GridSpec::of(&grid),
            schedule: sched,
            optimizer: Some(outcome.optimizer),
        },
    )?;
    let trace_path = out.with_extension("loss.txt");
    let mut trace = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&trace_path)
        .with_context(|| format!("cannot write {}", trace_path.display()))?;
    for (i, l) in outcome.trace.iter().enumerate() {
        writeln!(trace, "{}\t{l}", first_step + i as u64 + 1)?;
    }
    if let Some((a, b)) = tetdiff::scoremodel::smoothed_loss(&outcome.trace, 100.min(outcome.trace.len()).max(1)) {
        println!("smoothed loss {a:.5} -> {b:.5}");
    }
    println!("wrote {} and {}", out.display(), trace_path.display());
    Ok(())
}

struct Model {
    net: DenoiserNet,
    grid: TetGrid,
    sched: NoiseSchedule,
}

fn load_model(cfg: &Config, args: &ModelArgs) -> Result<Model> {
    let path = args.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let ck = load_checkpoint(&path)?;
    if ck.grid != cfg.grid_spec() {
        bail!(
            "{} was trained for grid {:?}, but the config describes {:?}",
            path.display(),
            ck.grid,
            cfg.grid_spec()
        );
    }
    if !same_schedule(&ck.schedule, &cfg.schedule()?) {
        log::warn!("using the noise schedule stored in {}", path.display());
    }
    Ok(Model {
        net: ck.net,
        grid: ck.grid.build()?,
        sched: ck.schedule,
    })
}

fn latent_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn refine_rng(seed: u64, index: u64) -> ChaCha8Rng {
    latent_rng(seed, REFINE_STREAM + index)
}

fn template(grid: &TetGrid) -> Result<DiffusionTensor> {
    Ok(grid.embed(&GridState::zeros(grid.num_vertices()))?.into_tensor())
}

fn sampler(cfg: &Config) -> Result<Box<dyn Sampler>> {
    Ok(SamplerRegistry::default().create(&cfg.diffusion.sampler, &cfg.sampler_params()?)?)
}

fn postprocess(cfg: &Config, mesh: TriMesh, raw: bool) -> Result<TriMesh> {
    if raw || mesh.is_empty() {
        return Ok(mesh);
    }
    let p = &cfg.postprocess;
    let mesh = remove_small_components(&mesh, p.component_fraction)?;
    Ok(laplacian_smooth(&mesh, p.smooth_lambda, p.smooth_steps)?)
}

/// Finalizes a sample, optionally refines its deformations, and writes
/// `<name>.tetg` and `<name>.obj` to `dir`.
fn decode_and_write(
    cfg: &Config,
    model: &Model,
    x0: &DiffusionTensor,
    mut rng: ChaCha8Rng,
    raw: bool,
    dir: &Path,
    name: &str,
) -> Result<()> {
    let mut state = finalize(x0, &model.grid)?;
    if cfg.postprocess.refine {
        let signs = model.grid.embed(&state)?.into_tensor();
        let x = refine_deformations(&model.net, &model.sched, &signs, &*sampler(cfg)?, &mut rng)?;
        state = finalize(&x, &model.grid)?;
    }
    write_tetg(dir.join(format!("{name}.tetg")), model.grid.resolution(), &state)?;
    let mesh = extract_mesh(&model.grid, &state)?;
    if mesh.is_empty() {
        log::warn!("{name} has an empty surface");
    }
    save_obj(&postprocess(cfg, mesh, raw)?, dir.join(format!("{name}.obj")))?;
    Ok(())
}

/// Runs `job` for every index in parallel and aggregates failures.
fn for_each_item(what: &str, count: usize, job: impl Fn(usize) -> Result<()> + Sync) -> Result<()> {
    let failures: Vec<(String, String)> = (0..count)
        .into_par_iter()
        .filter_map(|i| job(i).err().map(|e| (i.to_string(), format!("{e:#}"))))
        .collect();
    aggregate(what, &failures, count)
}

pub fn sample(cfg: &Config, args: &ModelArgs, count: usize, trajectory: Option<PathBuf>) -> Result<()> {
    let model = load_model(cfg, args)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    create_dir(&dir)?;
    let tmpl = template(&model.grid)?;
    let sampler = sampler(cfg)?;
    for_each_item("sample", count, |i| {
        let mut rng = latent_rng(cfg.seed, i as u64);
        let latent = standard_normal_like(&tmpl, &mut rng);
        let mut dump = match (&trajectory, i) {
            (Some(t), 0) => Some(TrajectoryDump::new(t, &model.grid, None)?),
            _ => None,
        };
        let mut ctx = SampleContext::new(&mut rng);
        if let Some(d) = dump.as_mut() {
            ctx.observer = Some(d);
        }
        let x0 = sampler.sample(&model.net, &model.sched, latent, &mut ctx)?;
        let name = format!("sample_{i:04}");
        decode_and_write(cfg, &model, &x0, refine_rng(cfg.seed, i as u64), args.raw, &dir, &name)
    })?;
    println!("wrote {count} samples to {}", dir.display());
    Ok(())
}

pub fn interpolate(cfg: &Config, args: &ModelArgs, seeds: [u64; 2], steps: usize) -> Result<()> {
    if steps < 2 {
        bail!("interpolation needs at least 2 steps, got {steps}");
    }
    let model = load_model(cfg, args)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    create_dir(&dir)?;
    let tmpl = template(&model.grid)?;
    // the endpoints reuse the latents of `sample --count 1` under each seed
    let z = seeds.map(|s| standard_normal_like(&tmpl, &mut latent_rng(s, 0)));
    let ddim = SamplerRegistry::default().create("ddim", &cfg.sampler_params()?)?;
    for_each_item("interpolate", steps, |k| {
        let u = k as f64 / (steps - 1) as f64;
        let latent = slerp(&z[0], &z[1], u)?;
        let x0 = ddim.sample(&model.net, &model.sched, latent, &mut SampleContext::deterministic())?;
        let rng = if k + 1 == steps {
            refine_rng(seeds[1], 0)
        } else {
            refine_rng(seeds[0], k as u64)
        };
        decode_and_write(cfg, &model, &x0, rng, args.raw, &dir, &format!("interp_{k:04}"))
    })?;
    println!("wrote {steps} meshes to {}", dir.display());
    Ok(())
}

impl CameraArgs {
    fn camera(&self) -> Camera {
        let p = |v: &[f64]| [v[0], v[1], v[2]];
        Camera {
            eye: p(&self.eye),
            target: p(&self.target),
            up: p(&self.up),
            focal: self.focal,
            width: self.width,
            height: self.height,
        }
    }
}

pub fn complete(cfg: &Config, args: &ModelArgs, mesh: &Path, camera: &CameraArgs, count: usize) -> Result<()> {
    let model = load_model(cfg, args)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    create_dir(&dir)?;
    let (observed, _) = normalize_to_box(&load_obj(mesh)?, MESH_HALF_WIDTH)?;
    let view = raycast_depth(&observed, &camera.camera())?;
    write_depth(&view, dir.join("view.dpth"))?;
    let partial = fit_singleview(&model.grid, &view, &cfg.fit)?;
    let known = model.grid.embed(&partial.state)?.into_tensor();
    let mut site_known = vec![false; known.sites()];
    for (v, _) in partial.known.iter().enumerate().filter(|(_, &k)| k) {
        site_known[model.grid.vertex_site(v)] = true;
    }
    let mask = Conditioning::site_mask_to_elements(&known, &site_known);
    let condition = Conditioning::new(known, mask, cfg.diffusion.unfreeze_t)?;
    println!(
        "{} of {} vertices observed",
        partial.known.iter().filter(|&&k| k).count(),
        partial.known.len()
    );
    for_each_item("complete", count, |i| {
        let mut rng = latent_rng(cfg.seed, i as u64);
        let x0 = conditional_sample(&model.net, &model.sched, &condition, &mut rng)?;
        let name = format!("complete_{i:04}");
        decode_and_write(cfg, &model, &x0, refine_rng(cfg.seed, i as u64), args.raw, &dir, &name)
    })?;
    println!("wrote {count} completions to {}", dir.display());
    Ok(())
}

fn load_shape_set(cfg: &Config, dir: &Path) -> Result<ShapeSet> {
    let files = files_with_extension(dir, "obj")?;
    let clouds = files
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mesh = load_obj(p)?;
            sample_surface(&mesh, cfg.eval.cloud_size, cfg.seed.wrapping_add(i as u64))
                .map_err(|e| anyhow!("{}: {e}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapeSet::new(clouds, files.iter().map(|p| stem(p)).collect())?)
}

pub fn eval(cfg: &Config, gen: &Path, reference: &Path, out: Option<PathBuf>) -> Result<()> {
    let g = load_shape_set(cfg, gen)?;
    let r = load_shape_set(cfg, reference)?;
    let report = evaluate(&g, &r, &cfg.eval_config())?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        let line = serde_json::to_string(&report)? + "\n";
        fs::write(&path, line).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

pub fn export(cfg: &Config, input: &Path, out: Option<PathBuf>) -> Result<()> {
    let (resolution, state) = read_tetg(input)?;
    let spec = GridSpec {
        resolution,
        ..cfg.grid_spec()
    };
    let mesh = extract_mesh(&spec.build()?, &state)?;
    let out = out.unwrap_or_else(|| input.with_extension("obj"));
    save_obj(&mesh, &out)?;
    println!("wrote {} ({} faces)", out.display(), mesh.faces().len());
    Ok(())
}
