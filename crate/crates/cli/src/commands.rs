use std::path::Path;
use std::time::Instant;

use serde::Deserialize;
use vptq::hessian::{HessianAccumulator, HessianData, DEFAULT_DAMPING};
use vptq::packing::{
    compression_report, from_bytes, nominal_index_bitwidth, to_bytes, CompressionReport, ReportOptions,
};
use vptq::quantizer::{
    dequantize as rebuild, proxy_loss, proxy_loss_decomposition, quantize_matrix, read_manifest,
    reconstruction_error, QuantConfig, QuantizedMatrix,
};
use vptq::tensor::load_npy;
use vptq::Error;

use crate::output::{write_atomic, write_bytes_atomic, write_npy_atomic, Block, CliError, CliResult};

pub const SEED_ENV: &str = "VPTQ_SEED";

/// Trace and decomposition forms of the proxy loss must agree this closely.
const DECOMPOSITION_TOL: f64 = 1e-9;

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} is not a readable file", path.display())))
    }
}

/// Loads the config and applies the seed: `--seed` first, then a seed written
/// in the config file, then `VPTQ_SEED`, then the built-in default.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<QuantConfig> {
    let (mut cfg, explicit_seed) = match path {
        None => (QuantConfig::default(), false),
        Some(p) => {
            require_file(p)?;
            let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            let explicit = value.pointer("/kmeans/seed").is_some();
            let cfg = QuantConfig::deserialize(&value)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            (cfg, explicit)
        }
    };
    if let Some(s) = seed {
        cfg.kmeans.seed = s;
    } else if !explicit_seed {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.kmeans.seed = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={raw} is not an unsigned integer")))?;
        }
    }
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems).into());
    }
    Ok(cfg)
}

fn log(verbose: bool, start: Instant, msg: &str) {
    if verbose {
        eprintln!("[{:>8.3}s] {msg}", start.elapsed().as_secs_f64());
    }
}

pub fn hessian(
    activations: &[std::path::PathBuf],
    out: &Path,
    damping: Option<f64>,
    config: Option<&Path>,
    verbose: bool,
) -> CliResult {
    let start = Instant::now();
    let damping = match (damping, config) {
        (Some(d), _) => d,
        (None, Some(_)) => load_config(config, None)?.damping_fraction,
        (None, None) => DEFAULT_DAMPING,
    };
    for a in activations {
        require_file(a)?;
    }
    let mut acc: Option<HessianAccumulator> = None;
    for path in activations {
        let batch = load_npy(path)?;
        let (dim, _) = batch.dims2()?;
        let acc = acc.get_or_insert_with(|| HessianAccumulator::new(dim));
        acc.accumulate(&batch)?;
        log(verbose, start, &format!("accumulated {}", path.display()));
    }
    let hd = acc.expect("clap requires one activation file").finalize(damping)?;
    write_npy_atomic(out, &hd.to_tensor())?;
    let meta_path = out.with_file_name(format!(
        "{}.meta",
        out.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    let meta = hd.metadata();
    write_atomic(&meta_path, |w| Ok(w.write_all(meta.as_bytes())?))?;
    Block::default().raw(&meta).print();
    Ok(())
}

fn report_for(qm: &QuantizedMatrix, opts: ReportOptions) -> CompressionReport {
    compression_report(qm.rows, qm.cols, &qm.config, qm.outlier_cols.len(), opts)
}

fn stats_block(block: &mut Block, prefix: &str, qm: &QuantizedMatrix, container_bytes: usize) {
    let s = &qm.stats;
    let report = report_for(qm, ReportOptions::default());
    block
        .put(&format!("{prefix}rows"), qm.rows)
        .put(&format!("{prefix}cols"), qm.cols)
        .put(&format!("{prefix}outlier_cols"), qm.outlier_cols.len())
        .put(&format!("{prefix}groups"), qm.bands.len())
        .put(&format!("{prefix}seed"), qm.config.kmeans.seed)
        .put(&format!("{prefix}proxy_loss"), s.proxy_loss)
        .put(&format!("{prefix}sum_delta_l"), s.sum_delta_l)
        .put(&format!("{prefix}frobenius_mse"), s.frobenius_mse)
        .put(&format!("{prefix}max_abs_err"), s.max_abs_err)
        .raw(&report.key_values(prefix))
        .put(&format!("{prefix}container_bytes"), container_bytes)
        .put(&format!("{prefix}stored_weight_bytes_f32"), 4 * qm.rows * qm.cols);
}

pub fn quantize(
    weight: &Path,
    hessian: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    verbose: bool,
) -> CliResult {
    let start = Instant::now();
    let cfg = load_config(config, seed)?;
    require_file(weight)?;
    require_file(hessian)?;
    let w = load_npy(weight)?;
    let hd = HessianData::from_tensor(&load_npy(hessian)?)?;
    log(verbose, start, "loaded inputs");
    let qm = quantize_matrix(&w, &hd, &cfg)?;
    log(verbose, start, "quantized");
    let bytes = to_bytes(&qm)?;
    write_bytes_atomic(out, &bytes)?;
    let mut block = Block::default();
    stats_block(&mut block, "", &qm, bytes.len());
    block.print();
    Ok(())
}

fn read_container(path: &Path) -> CliResult<QuantizedMatrix> {
    require_file(path)?;
    Ok(from_bytes(&std::fs::read(path)?)?)
}

pub fn dequantize(input: &Path, out: &Path) -> CliResult {
    let qm = read_container(input)?;
    let w_hat = rebuild(&qm)?;
    write_npy_atomic(out, &w_hat)?;
    Block::default()
        .put("rows", qm.rows)
        .put("cols", qm.cols)
        .print();
    Ok(())
}

pub fn eval(weight: &Path, quantized: &Path, hessian: Option<&Path>) -> CliResult {
    require_file(weight)?;
    let w = load_npy(weight)?;
    let qm = read_container(quantized)?;
    let w_hat = rebuild(&qm)?;
    let err = reconstruction_error(&w, &w_hat)?;
    let mut block = Block::default();
    block
        .put("frobenius_mse", err.frobenius_mse)
        .put("max_abs_err", err.max_abs_err)
        .put("relative_frobenius", err.relative_frobenius);
    if let Some(h) = hessian {
        require_file(h)?;
        let hd = HessianData::from_tensor(&load_npy(h)?)?;
        let trace = proxy_loss(&w, &w_hat, &hd)?;
        let (diag, cross) = proxy_loss_decomposition(&w, &w_hat, &hd)?;
        let scale = trace.abs().max((diag + cross).abs());
        let rel = if scale > 0.0 { (trace - diag - cross).abs() / scale } else { 0.0 };
        block
            .put("proxy_loss", trace)
            .put("proxy_loss_diag", diag)
            .put("proxy_loss_cross", cross)
            .put("decomposition_rel_diff", rel)
            .put("decomposition_agrees", rel <= DECOMPOSITION_TOL);
        block.print();
        if rel > DECOMPOSITION_TOL {
            return Err(Error::InvalidHessian(format!(
                "trace and decomposition forms differ by {rel:e} relative"
            ))
            .into());
        }
        return Ok(());
    }
    block.print();
    Ok(())
}

#[derive(Deserialize)]
struct Shape {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn report(config: Option<&Path>, shapes: &Path, dtype_factor: bool) -> CliResult {
    let cfg = load_config(config, None)?;
    require_file(shapes)?;
    let shapes: Vec<Shape> = serde_json::from_str(&std::fs::read_to_string(shapes)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", shapes.display())))?;
    if shapes.is_empty() {
        return Err(CliError::Usage("no shapes declared".into()));
    }
    if let Some(s) = shapes.iter().find(|s| s.rows == 0 || s.cols == 0) {
        return Err(CliError::Usage(format!("{} has an empty dimension", s.name)));
    }
    let opts = ReportOptions {
        codebook_dtype_factor: dtype_factor,
    };
    let mut block = Block::default();
    let nominal = nominal_index_bitwidth(cfg.v1, cfg.k1, cfg.k2);
    block
        .put("codebook_dtype_factor", dtype_factor)
        .put("nominal_index_bitwidth", format!("{}/{}", nominal.numer(), nominal.denom()));
    let mut total = CompressionReport::default();
    for s in &shapes {
        let r = compression_report(s.rows, s.cols, &cfg, cfg.outlier_count(s.cols), opts);
        block.raw(&r.key_values(&format!("{}.", s.name)));
        total = total + r;
    }
    let ratio = total.compression_ratio();
    let overhead = total.codebook_overhead_per_param();
    block
        .raw(&total.key_values("total."))
        .put("total.compression_ratio_exact", format!("{}/{}", ratio.numer(), ratio.denom()))
        .put(
            "total.codebook_overhead_exact",
            format!("{}/{}", overhead.numer(), overhead.denom()),
        );
    block.print();
    Ok(())
}

pub fn quantize_model(
    manifest: &Path,
    config: Option<&Path>,
    out_dir: &Path,
    workers: Option<usize>,
    seed: Option<u64>,
    verbose: bool,
) -> CliResult {
    let start = Instant::now();
    let cfg = load_config(config, seed)?;
    require_file(manifest)?;
    let entries = read_manifest(manifest)?;
    let workers = workers
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1);
    if workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let mut names = std::collections::HashSet::new();
    for e in &entries {
        if e.name.is_empty() || e.name.contains(['/', '\\']) || !names.insert(&e.name) {
            return Err(CliError::Usage(format!("manifest name {:?} is empty, a path or a duplicate", e.name)));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let outcomes = vptq::quantizer::quantize_model(&entries, &cfg, workers)?;
    log(verbose, start, "quantized all entries");

    let mut block = Block::default();
    let mut failures = Vec::new();
    let mut total = CompressionReport::default();
    for o in outcomes {
        match o.result {
            Ok(qm) => {
                let bytes = to_bytes(&qm)?;
                write_bytes_atomic(&out_dir.join(format!("{}.vptq", o.name)), &bytes)?;
                stats_block(&mut block, &format!("{}.", o.name), &qm, bytes.len());
                total = total + report_for(&qm, ReportOptions::default());
            }
            Err(e) => {
                block.put(&format!("{}.error", o.name), &e);
                failures.push((o.name, e));
            }
        }
    }
    if total.params > 0 {
        block.raw(&total.key_values("total."));
    }
    block.print();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial(failures))
    }
}
