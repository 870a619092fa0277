//! Command-line surface for the tone-mapping engine.
//!
//! Subcommands: `map` (HDR in, PNG out), `train` (directory of pairs),
//! `eval` (metric reports per pair), `decompose` (pyramid bands as images),
//! and `export-lut` (basis LUT as a `.cube` file).
//!
//! Exit codes: 0 success, 2 usage errors, 65 malformed data or config,
//! 66 missing input file, 74 other I/O failure, 70 internal errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pyrtone::error::{Error, Result};
use pyrtone::io::{self, HdrImage};
use pyrtone::quality::{evaluate_pair, MetricReport};
use pyrtone::tensor::{Params, Shape, Tape, Tensor};
use pyrtone::tone::{Lut3D, Model};
use pyrtone::train::{
    Checkpoint, DatasetIndex, TrainConfig, Trainer, NORMALIZE_HIGH_PERCENTILE,
    NORMALIZE_LOW_PERCENTILE,
};

#[derive(Parser)]
#[command(name = "pyrtone", version, about = "HDR to LDR tone mapping with a trainable pyramid pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tone-map one HDR image (.hdr or .pfm) to an 8-bit PNG.
    Map {
        /// Input image.
        input: PathBuf,
        /// Output PNG path.
        #[arg(short, long)]
        output: PathBuf,
        /// Trained weights; omitted, the freshly initialized model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on a directory of `stem.hdr|pfm` + `stem.png` pairs.
    Train {
        /// Flat `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data_dir` from the config file.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Overrides `out_dir` from the config file (default: current dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Continue from a checkpoint (its stored config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score outputs against targets for every pair in a directory.
    Eval {
        /// Directory of `stem.hdr|pfm` + `stem.png` pairs. When a
        /// `stem.out.png` sits next to a pair it is scored as the output;
        /// otherwise the source is mapped first.
        #[arg(long)]
        pairs: PathBuf,
        /// Trained weights used when mapping is needed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write line-delimited metric records here (default: stdout only).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write `stem.err.png` error maps (|output − target|, scaled
        /// so the worst pixel is white) next to the pairs.
        #[arg(long)]
        error_maps: bool,
    },
    /// Write the high-frequency bands and base of the pyramid decomposition.
    Decompose {
        /// Input image (.hdr or .pfm).
        input: PathBuf,
        /// Output directory.
        #[arg(short, long)]
        output: PathBuf,
        /// Trained weights; omitted, the freshly initialized pyramid
        /// (a difference-of-Gaussians stack) is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export one basis LUT from the bank as a `.cube` file.
    ExportLut {
        /// Output path.
        #[arg(short, long)]
        output: PathBuf,
        /// Trained weights; omitted, the freshly initialized bank is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index of the basis table to export (0 is identity at init).
        #[arg(long, default_value_t = 0)]
        basis: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 66,
        Error::Io { .. } => 74,
        Error::Codec { .. } | Error::Config(_) | Error::Checkpoint(_) => 65,
        _ => 70,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Map { input, output, checkpoint } => cmd_map(&input, &output, checkpoint.as_deref()),
        Command::Train { config, data_dir, out_dir, resume } => {
            cmd_train(&config, data_dir, out_dir, resume.as_deref())
        }
        Command::Eval { pairs, checkpoint, report, error_maps } => {
            cmd_eval(&pairs, checkpoint.as_deref(), report.as_deref(), error_maps)
        }
        Command::Decompose { input, output, checkpoint } => {
            cmd_decompose(&input, &output, checkpoint.as_deref())
        }
        Command::ExportLut { output, checkpoint, basis } => {
            cmd_export_lut(&output, checkpoint.as_deref(), basis)
        }
    }
}

fn read_image(path: &Path) -> Result<HdrImage> {
    match path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()) {
        Some(ext) if ext == "pfm" => io::read_pfm_file(path),
        _ => io::read_radiance_hdr_file(path),
    }
}

/// Loads weights from a checkpoint, or a freshly initialized default model.
fn load_model(checkpoint: Option<&Path>) -> Result<(Model, Params<f32>)> {
    let config = match checkpoint {
        Some(path) => Checkpoint::load(path)?.config,
        None => TrainConfig::default(),
    };
    let (model, mut params) = Model::new::<f32>(config.model_config())?;
    if let Some(path) = checkpoint {
        let ckpt = Checkpoint::load(path)?;
        ckpt.validate_against(config.model_config())?;
        ckpt.load_into(&mut params)?;
    }
    Ok((model, params))
}

fn cmd_map(input: &Path, output: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let img = read_image(input)?;
    let (x, record) = io::normalize_hdr(
        &img.to_tensor::<f32>(),
        NORMALIZE_LOW_PERCENTILE,
        NORMALIZE_HIGH_PERCENTILE,
    )?;
    let (model, params) = load_model(checkpoint)?;
    let mapped = model.map_image(&params, &x)?;
    io::write_png8_encoded(&mapped, output)?;
    println!(
        "mapped {} ({}x{}) -> {}",
        input.display(),
        img.width(),
        img.height(),
        output.display()
    );
    println!("normalization: {}", serde_json::to_string(&record).map_err(json_err)?);
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    data_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut config = TrainConfig::from_file(config_path)?;
    if let Some(dir) = data_dir {
        config.data_dir = Some(dir.to_string_lossy().into_owned());
    }
    let data_dir = config
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("no data_dir in config and no --data-dir given".into()))?;
    let out_dir = out_dir
        .or_else(|| config.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let data = DatasetIndex::scan(&data_dir)?.load_all()?;
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?)?,
        None => Trainer::new(config)?,
    };
    println!(
        "training on {} pairs from {data_dir}; {} trainable parameters",
        data.len(),
        trainer.params().total_scalars()
    );

    let log_path = out_dir.join("train.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    trainer.run(&data, |record| {
        writeln!(log, "{}", serde_json::to_string(record).map_err(json_err)?)
            .map_err(|e| Error::io(&log_path, e))?;
        if let Some(psnr) = record.probe_psnr {
            println!(
                "step {:>6}  loss {:.5}  grad {:.4}  probe {:.2} dB",
                record.step, record.total, record.grad_norm, psnr
            );
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let ckpt_path = out_dir.join("model.ckpt");
    trainer.checkpoint().save(&ckpt_path)?;
    println!(
        "finished at step {}; checkpoint {} log {}",
        trainer.step_count(),
        ckpt_path.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_eval(
    pairs_dir: &Path,
    checkpoint: Option<&Path>,
    report_path: Option<&Path>,
    error_maps: bool,
) -> Result<()> {
    let index = DatasetIndex::scan(pairs_dir)?;
    let data = index.load_all()?;
    let (model, params) = load_model(checkpoint)?;

    let mut report: Option<BufWriter<File>> = match report_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut emit = |line: &str| -> Result<()> {
        println!("{line}");
        if let Some(w) = report.as_mut() {
            writeln!(w, "{line}").map_err(|e| Error::io(report_path.unwrap(), e))?;
        }
        Ok(())
    };

    let mut reports = Vec::with_capacity(data.len());
    for (pair, (hdr_path, _)) in data.pairs.iter().zip(index.pairs()) {
        let precomputed = hdr_path.with_extension("out.png");
        let (output, origin): (Tensor<f32>, &str) = if precomputed.exists() {
            (io::read_png8(&precomputed)?, "precomputed")
        } else {
            (model.map_image(&params, &pair.source)?, "mapped")
        };
        let scores = evaluate_pair(&output, &pair.target, &pair.source)?;
        if error_maps {
            write_error_map(&output, &pair.target, &hdr_path.with_extension("err.png"))?;
        }
        let mut line = serde_json::to_value(&scores).map_err(json_err)?;
        line["name"] = pair.name.clone().into();
        line["output"] = origin.into();
        emit(&serde_json::to_string(&line).map_err(json_err)?)?;
        reports.push(scores);
    }

    let aggregate = MetricReport::aggregate(&reports)
        .ok_or_else(|| Error::Config(format!("no pairs found in {}", pairs_dir.display())))?;
    let mut line = serde_json::to_value(&aggregate).map_err(json_err)?;
    line["name"] = "aggregate".into();
    line["pairs"] = reports.len().into();
    emit(&serde_json::to_string(&line).map_err(json_err)?)?;
    if let Some(mut w) = report {
        w.flush().map_err(|e| Error::io(report_path.unwrap(), e))?;
    }
    Ok(())
}

/// |output − target| averaged over channels, scaled so the worst pixel is
/// white, written as a grayscale-ish RGB PNG.
fn write_error_map(output: &Tensor<f32>, target: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = output.shape();
    let mut err = Tensor::<f32>::zeros(Shape::new(1, 3, s.h, s.w));
    let mut peak = 0f32;
    for y in 0..s.h {
        for x in 0..s.w {
            let mut d = 0f32;
            for c in 0..3 {
                d += (output.get(0, c, y, x) - target.get(0, c, y, x)).abs();
            }
            d /= 3.0;
            peak = peak.max(d);
            for c in 0..3 {
                err.set(0, c, y, x, d);
            }
        }
    }
    if peak > 0.0 {
        err = err.map(|v| v / peak);
    }
    io::write_png8_encoded(&err, path)
}

fn cmd_decompose(input: &Path, out_dir: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let img = read_image(input)?;
    let (x, _) = io::normalize_hdr(
        &img.to_tensor::<f32>(),
        NORMALIZE_LOW_PERCENTILE,
        NORMALIZE_HIGH_PERCENTILE,
    )?;
    let (model, params) = load_model(checkpoint)?;

    // Pad bottom/right to the working size; outputs keep the padded frame.
    let s = x.shape();
    let min = 8 * model.config().grid;
    let th = s.h.next_multiple_of(8).max(min);
    let tw = s.w.next_multiple_of(8).max(min);
    let padded = Tensor::from_fn(Shape::new(1, 3, th, tw), |_, c, y, xx| {
        x.get(0, c, y.min(s.h - 1), xx.min(s.w - 1))
    });

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut tape = Tape::new();
    let input_var = tape.constant(padded)?;
    let pyr = model.ldp.forward(&mut tape, &params, input_var)?;
    for (i, hf) in pyr.hf.iter().enumerate() {
        let band = tape.value(*hf);
        let preview = band.map(|v| 0.5 + 0.5 * v);
        let path = out_dir.join(format!("hf_{i}.png"));
        io::write_png8_encoded(&preview, &path)?;
        println!("band {i}: {} -> {}", band.shape(), path.display());
    }
    let base = tape.value(pyr.base);
    let base_path = out_dir.join("base.png");
    io::write_png8_encoded(base, &base_path)?;
    println!("base:   {} -> {}", base.shape(), base_path.display());
    Ok(())
}

fn cmd_export_lut(output: &Path, checkpoint: Option<&Path>, basis: usize) -> Result<()> {
    let (_, params) = load_model(checkpoint)?;
    let id = params
        .find("ltt.bank")
        .ok_or_else(|| Error::Config("model has no LUT bank parameter".into()))?;
    let bank = params.value(id);
    let bs = bank.shape();
    if basis >= bs.n {
        return Err(Error::Config(format!("basis {basis} out of range; bank holds {} tables", bs.n)));
    }
    let v = bs.h;
    let mut entries = Vec::with_capacity(3 * v * v * v);
    for c in 0..3 {
        entries.extend(bank.plane(basis, c).iter().map(|e| *e as f64));
    }
    let lut = Lut3D::new(v, entries)?;
    io::export_cube(&lut, output)?;
    println!("exported basis {basis} ({v}^3 lattice) -> {}", output.display());
    Ok(())
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Config(format!("cannot serialize record: {e}"))
}
