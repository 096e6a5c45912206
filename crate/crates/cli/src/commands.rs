//! The five subcommands.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use aub_core::alignment::{train_with_final, AlignmentModel, Mode, TrainTrace};
use aub_core::checkpoint::Checkpoint;
use aub_core::data::{
    gen_blobs, gen_gaussians, gen_tabular, gen_two_moons, load_csv, median_split, parse_csv, read_bundle, read_manifest,
    to_csv, write_bundle, BundleManifest, DomainDataset,
};
use aub_core::eval::{evaluate, translate, EvalReport};
use aub_core::flows::Flow;
use aub_core::matrix::Matrix;
use aub_core::numeric::SeededRng;
use aub_core::AubError;

use crate::config::{DataSection, ExperimentConfig, Loaded};

pub const BEST_CHECKPOINT: &str = "checkpoint_best.bin";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const TRACE_FILE: &str = "trace.ndjson";
pub const REPORT_FILE: &str = "eval_report.json";

const TRANSLATE_CHUNK_ROWS: usize = 4096;

/// Writes through a sibling temporary file so readers never see half a file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(())
}

fn generate(loaded: &Loaded) -> Result<Vec<DomainDataset<f64>>> {
    let seed = loaded.config.seed;
    Ok(match &loaded.config.data {
        DataSection::TwoMoons { n, noise_sd } => gen_two_moons(*n, *noise_sd, seed)?.to_vec(),
        DataSection::Blobs {
            n,
            n_components,
            lo,
            hi,
            sd,
        } => gen_blobs(*n, *n_components, *lo, *hi, *sd, seed)?.to_vec(),
        DataSection::Gaussians { n, domains } => {
            let params: Vec<(Vec<f64>, Vec<f64>)> = domains.iter().map(|d| (d.mean.clone(), d.sd.clone())).collect();
            gen_gaussians(*n, &params, seed)?
        }
        DataSection::Tabular { n, split } => median_split(&gen_tabular(*n, seed)?, split)?,
        DataSection::Csv { path, has_header, split } => {
            let table = load_csv(loaded.relative(path), *has_header)?;
            median_split(&table.data, split)?
        }
        DataSection::Bundle { path } => read_bundle(loaded.relative(path))?.1,
    })
}

fn summarize(manifest: &BundleManifest) -> String {
    let mut s = String::new();
    for (j, d) in manifest.domains.iter().enumerate() {
        writeln!(
            s,
            "domain_{j} name={} dim={} n_train={} n_val={} n_test={}",
            d.name, d.dim, d.n_train, d.n_val, d.n_test
        )
        .unwrap();
    }
    s
}

/// Writes the bundle into `dir`, replacing any previous one.
fn write_bundle_replacing(dir: &Path, datasets: &[DomainDataset<f64>], seed: u64) -> Result<BundleManifest> {
    let mut staging = dir.as_os_str().to_owned();
    staging.push(".staging");
    let staging = PathBuf::from(staging);
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    let manifest = write_bundle(&staging, datasets, seed)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).with_context(|| format!("removing old bundle {}", dir.display()))?;
    }
    std::fs::rename(&staging, dir)?;
    Ok(manifest)
}

fn check_datasets(cfg: &ExperimentConfig, datasets: &[DomainDataset<f64>]) -> Result<()> {
    let k = cfg.model.flow_archs()?.len();
    ensure!(datasets.len() == k, "data source yields {} domains but the model has k = {k}", datasets.len());
    let dim = cfg.model.density.dim();
    if let Some(d) = datasets.iter().find(|d| d.dim != dim) {
        bail!("domain '{}' has dim {} but the model has dim {dim}", d.name, d.dim);
    }
    Ok(())
}

pub fn gen_data(loaded: &Loaded, out: &Path) -> Result<String> {
    let cfg = &loaded.config;
    cfg.validate()?;
    let datasets = generate(loaded)?;
    check_datasets(cfg, &datasets)?;
    if let DataSection::Bundle { path } = &cfg.data {
        let manifest = read_manifest(loaded.relative(path))?;
        info!("data source is an existing bundle; nothing generated");
        return Ok(summarize(&manifest));
    }
    let dir = loaded.bundle_dir(out);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = write_bundle_replacing(&dir, &datasets, cfg.seed)?;
    info!("wrote {} domains to {}", manifest.domains.len(), dir.display());
    Ok(summarize(&manifest))
}

/// Validated config plus its bundle.
struct Prepared {
    datasets: Vec<DomainDataset<f64>>,
    manifest: BundleManifest,
    fingerprint: String,
}

fn prepare(loaded: &Loaded, out: &Path) -> Result<Prepared> {
    let cfg = &loaded.config;
    cfg.validate()?;
    let dir = loaded.bundle_dir(out);
    ensure!(
        dir.join(aub_core::data::MANIFEST_FILE).exists(),
        "no dataset bundle at {}; run `aub gen-data` first",
        dir.display()
    );
    let (manifest, datasets) = read_bundle(&dir).with_context(|| format!("reading bundle {}", dir.display()))?;
    cfg.check_bundle(&manifest)?;
    let fingerprint = cfg.fingerprint(&manifest)?;
    Ok(Prepared {
        datasets,
        manifest,
        fingerprint,
    })
}

fn build_model(cfg: &ExperimentConfig) -> Result<AlignmentModel<f64>> {
    let mut rng = SeededRng::new(cfg.init_seed());
    let flows = cfg
        .model
        .flow_archs()?
        .iter()
        .map(|a| Ok(Box::new(a.build::<f64>(&mut rng)?) as Box<dyn Flow<f64>>))
        .collect::<Result<Vec<_>>>()?;
    let density = cfg.model.density.build::<f64>(&mut rng)?;
    Ok(AlignmentModel::new(flows, density, cfg.model.weights.clone())?)
}

struct Trained {
    model: AlignmentModel<f64>,
    trace: TrainTrace,
    best: Checkpoint,
    last: Checkpoint,
    wall_time_s: f64,
}

fn fit(cfg: &ExperimentConfig, prepared: &Prepared, label: &str) -> Result<Trained> {
    let mut model = build_model(cfg)?;
    let tc = cfg.train_config();
    info!(
        "[{label}] training mode={} k={} dim={} params={} epochs<={}",
        tc.mode.name(),
        model.k(),
        model.dim(),
        model.parameter_vector().len(),
        tc.max_epochs
    );
    let start = Instant::now();
    let (trace, final_params) = train_with_final(&mut model, &prepared.datasets, &tc).map_err(|e| match e {
        AubError::Diverged { epoch, detail } => anyhow!("[{label}] training diverged at epoch {epoch}: {detail}"),
        other => anyhow!(other).context(format!("[{label}] training failed")),
    })?;
    let wall_time_s = start.elapsed().as_secs_f64();
    for r in &trace.records {
        debug!("[{label}] epoch {} train_aub={:.6} val_aub={:.6}", r.epoch, r.train_aub, r.val_aub);
    }
    info!(
        "[{label}] done in {wall_time_s:.1}s: best epoch {} val_aub={:.6}",
        trace.best_epoch, trace.best_val_aub
    );
    let best = Checkpoint::from_model(&model, Some(tc.mode), cfg.seed, prepared.fingerprint.clone());
    let mut last = best.clone();
    last.params = final_params;
    Ok(Trained {
        model,
        trace,
        best,
        last,
        wall_time_s,
    })
}

pub fn train(loaded: &Loaded, out: &Path) -> Result<String> {
    let prepared = prepare(loaded, out)?;
    let label = loaded.path.display().to_string();
    let t = fit(&loaded.config, &prepared, &label)?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join(BEST_CHECKPOINT), &t.best.to_bytes()?)?;
    write_atomic(&out.join(FINAL_CHECKPOINT), &t.last.to_bytes()?)?;
    write_atomic(&out.join(TRACE_FILE), t.trace.to_ndjson()?.as_bytes())?;
    let last = t.trace.records.last().context("no epochs were run")?;
    Ok(format!(
        "best_epoch={}\nbest_val_aub={}\nfinal_val_aub={}\nepochs={}\ncheckpoint={}\n",
        t.trace.best_epoch,
        t.trace.best_val_aub,
        last.val_aub,
        t.trace.records.len(),
        out.join(BEST_CHECKPOINT).display()
    ))
}

fn load_checked(path: &Path, prepared: &Prepared) -> Result<AlignmentModel<f64>> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ensure!(
        ck.header.fingerprint == prepared.fingerprint,
        "fingerprint mismatch: checkpoint {} was trained for {}, this config is {}",
        path.display(),
        ck.header.fingerprint,
        prepared.fingerprint
    );
    Ok(ck.build_model::<f64>()?)
}

fn test_splits(prepared: &Prepared) -> Vec<Matrix<f64>> {
    prepared.datasets.iter().map(|d| d.test.clone()).collect()
}

pub fn eval(loaded: &Loaded, out: &Path, checkpoint: Option<&Path>) -> Result<String> {
    let prepared = prepare(loaded, out)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(BEST_CHECKPOINT));
    let model = load_checked(&path, &prepared)?;
    let report = evaluate(&model, &test_splits(&prepared), &loaded.config.eval, prepared.fingerprint.clone())?;
    ensure!(report.test_aub.is_finite(), "test AUB is not finite: {}", report.test_aub);
    let json = serde_json::to_string_pretty(&report)? + "\n";
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join(REPORT_FILE), json.as_bytes())?;
    Ok(format!("{json}test_aub={}\n", report.test_aub))
}

fn relocate(e: AubError, input: &Path, first_line: usize) -> anyhow::Error {
    match e {
        AubError::Parse { line, detail } => anyhow!("{}: line {}: {detail}", input.display(), line + first_line - 1),
        other => anyhow!(other),
    }
}

pub fn translate_cmd(loaded: &Loaded, out: &Path, checkpoint: Option<&Path>) -> Result<String> {
    let section = loaded
        .config
        .translate
        .clone()
        .context("config has no [translate] section (from, to, input)")?;
    let prepared = prepare(loaded, out)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(BEST_CHECKPOINT));
    let model = load_checked(&path, &prepared)?;
    let input = loaded.relative(&section.input);
    let reader = BufReader::new(File::open(&input).with_context(|| format!("opening {}", input.display()))?);
    std::fs::create_dir_all(out)?;
    let target = out.join(format!("translated_{}_to_{}.csv", section.from, section.to));
    let mut tmp = target.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut writer = BufWriter::new(File::create(&tmp)?);

    let mut rows = 0usize;
    let mut chunk = String::new();
    let mut chunk_lines = 0usize;
    let mut first_line = 1usize;
    let mut flush = |chunk: &mut String, first_line: usize, writer: &mut BufWriter<File>| -> Result<()> {
        if chunk.trim().is_empty() {
            chunk.clear();
            return Ok(());
        }
        let x = parse_csv(chunk, false).map_err(|e| relocate(e, &input, first_line))?.data;
        ensure!(
            x.ncols() == model.dim(),
            "{}: rows have {} columns but the model has dim {}",
            input.display(),
            x.ncols(),
            model.dim()
        );
        let y = translate(&model, &x, section.from, section.to)?;
        writer.write_all(to_csv(&y).as_bytes())?;
        rows += x.nrows();
        chunk.clear();
        Ok(())
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 && section.has_header {
            writeln!(writer, "{}", line.trim_end_matches('\r'))?;
            continue;
        }
        if chunk_lines == 0 {
            first_line = i + 1;
        }
        chunk.push_str(&line);
        chunk.push('\n');
        chunk_lines += 1;
        if chunk_lines == TRANSLATE_CHUNK_ROWS {
            flush(&mut chunk, first_line, &mut writer)?;
            chunk_lines = 0;
        }
    }
    flush(&mut chunk, first_line, &mut writer)?;
    writer.flush()?;
    drop(writer);
    if rows == 0 {
        let _ = std::fs::remove_file(&tmp);
        bail!("{}: no data rows", input.display());
    }
    std::fs::rename(&tmp, &target)?;
    Ok(format!("rows={rows}\noutput={}\n", target.display()))
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub config: String,
    pub mode: Mode,
    pub test_aub: f64,
    pub params_total: usize,
    pub params_flows: usize,
    pub params_density: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub wall_time_s: f64,
    pub cached: bool,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    wall_time_s: f64,
    epochs: usize,
    best_epoch: usize,
}

fn workers() -> Result<usize> {
    match std::env::var("AUB_NUM_WORKERS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("AUB_NUM_WORKERS={v:?} is not a positive integer"))?;
            ensure!(n > 0, "AUB_NUM_WORKERS must be positive");
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run_cached(name: &str, cfg: &ExperimentConfig, prepared: &Prepared, cache_root: &Path) -> Result<CompareRow> {
    let key = cfg.cache_key(&prepared.manifest)?;
    let dir = cache_root.join(&key);
    let report_path = dir.join(REPORT_FILE);
    let meta_path = dir.join("meta.json");
    let (report, meta, cached) = if report_path.exists() && meta_path.exists() {
        info!("[{name}] cache hit {key}");
        let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        let meta: CacheMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        (report, meta, true)
    } else {
        let t = fit(cfg, prepared, name)?;
        let report = evaluate(&t.model, &test_splits(prepared), &cfg.eval, prepared.fingerprint.clone())?;
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(BEST_CHECKPOINT), &t.best.to_bytes()?)?;
        write_atomic(&dir.join(TRACE_FILE), t.trace.to_ndjson()?.as_bytes())?;
        let meta = CacheMeta {
            wall_time_s: t.wall_time_s,
            epochs: t.trace.records.len(),
            best_epoch: t.trace.best_epoch,
        };
        write_atomic(&meta_path, serde_json::to_string_pretty(&meta)?.as_bytes())?;
        write_atomic(&report_path, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
        (report, meta, false)
    };
    let pc = &report.parameter_counts;
    Ok(CompareRow {
        config: name.to_string(),
        mode: cfg.train.mode,
        test_aub: report.test_aub,
        params_total: pc.total,
        params_flows: pc.per_flow.iter().sum(),
        params_density: pc.density,
        epochs: meta.epochs,
        best_epoch: meta.best_epoch,
        wall_time_s: meta.wall_time_s,
        cached,
    })
}

pub fn render_markdown(rows: &[CompareRow]) -> String {
    let mut s = String::from(
        "| config | mode | test AUB (nats) | params total | params T | params Q | epochs | best epoch | wall time (s) | cached |\n\
         |---|---|---:|---:|---:|---:|---:|---:|---:|---|\n",
    );
    for r in rows {
        writeln!(
            s,
            "| {} | {} | {:.4} | {} | {} | {} | {} | {} | {:.1} | {} |",
            r.config,
            r.mode.name(),
            r.test_aub,
            r.params_total,
            r.params_flows,
            r.params_density,
            r.epochs,
            r.best_epoch,
            r.wall_time_s,
            if r.cached { "yes" } else { "no" }
        )
        .unwrap();
    }
    s
}

pub fn render_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("config,mode,test_aub,params_total,params_flows,params_density,epochs,best_epoch,wall_time_s,cached\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.config,
            r.mode.name(),
            r.test_aub,
            r.params_total,
            r.params_flows,
            r.params_density,
            r.epochs,
            r.best_epoch,
            r.wall_time_s,
            r.cached
        )
        .unwrap();
    }
    s
}

pub fn compare(loaded: &Loaded, out: &Path, seed: Option<u64>) -> Result<String> {
    let section = loaded
        .config
        .compare
        .clone()
        .context("config has no [compare] section (configs = [...])")?;
    ensure!(!section.configs.is_empty(), "compare: `configs` is empty");
    let subs: Vec<Loaded> = section
        .configs
        .iter()
        .map(|p| Loaded::read(&loaded.relative(p), seed))
        .collect::<Result<_>>()?;
    for s in &subs {
        s.config.validate().with_context(|| format!("config {}", s.path.display()))?;
    }
    let first = &subs[0];
    for s in &subs[1..] {
        let same_source = match (&first.config.data, &s.config.data) {
            (DataSection::Bundle { path: a }, DataSection::Bundle { path: b }) => first.relative(a) == s.relative(b),
            (DataSection::Csv { .. }, DataSection::Csv { .. }) => {
                let resolve = |l: &Loaded| match &l.config.data {
                    DataSection::Csv { path, has_header, split } => Some((l.relative(path), *has_header, split.clone())),
                    _ => None,
                };
                resolve(first) == resolve(s)
            }
            (a, b) => a == b && first.config.seed == s.config.seed,
        };
        ensure!(
            same_source,
            "mismatched bundles: {} and {} describe different datasets",
            first.path.display(),
            s.path.display()
        );
    }

    let datasets = generate(first)?;
    for s in &subs {
        check_datasets(&s.config, &datasets).with_context(|| format!("config {}", s.path.display()))?;
    }
    let manifest = match &first.config.data {
        DataSection::Bundle { path } => read_manifest(first.relative(path))?,
        _ => {
            let dir = out.join("data");
            let reusable = dir.join(aub_core::data::MANIFEST_FILE).exists()
                && read_bundle(&dir).map(|(_, d)| d == datasets).unwrap_or(false);
            if reusable {
                read_manifest(&dir)?
            } else {
                std::fs::create_dir_all(out)?;
                write_bundle_replacing(&dir, &datasets, first.config.seed)?
            }
        }
    };

    let prepared: Vec<Prepared> = subs
        .iter()
        .map(|s| {
            Ok(Prepared {
                datasets: datasets.clone(),
                manifest: manifest.clone(),
                fingerprint: s.config.fingerprint(&manifest)?,
            })
        })
        .collect::<Result<_>>()?;

    let n_workers = workers()?;
    info!("comparing {} configs on {n_workers} worker(s)", subs.len());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(n_workers).build()?;
    let cache_root = out.join("cache");
    let rows: Vec<CompareRow> = pool.install(|| {
        subs.par_iter()
            .zip(prepared.par_iter())
            .map(|(s, p)| {
                let name = s.path.file_stem().and_then(|n| n.to_str()).unwrap_or("config").to_string();
                run_cached(&name, &s.config, p, &cache_root)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let md = render_markdown(&rows);
    write_atomic(&out.join("compare.md"), md.as_bytes())?;
    write_atomic(&out.join("compare.csv"), render_csv(&rows).as_bytes())?;
    Ok(md)
}
