//! The `livseg` command line: phantom generation, training, cascade
//! inference and evaluation.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage or configuration
//! error. Logs go to stdout, errors to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::cascade::run_cascade;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_case, format_sig, write_report_csv, CaseReport};
use crate::network::{build_network, load_checkpoint, save_checkpoint, Network};
use crate::trainer::{lesion_stage_case, liver_stage_case, train_model, TrainingCase};
use crate::volume::{generate_phantom, load_volume, save_mask, save_mvol, AnyVolume, LabelVolume};

#[derive(Debug, Parser)]
#[command(
    name = "livseg",
    version,
    about = "Liver and lesion segmentation with a 2.5D residual U-Net cascade"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Liver,
    Lesion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Liver,
    Lesion,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic (image, label) phantom pairs and a manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one cascade stage on `*_img.mvol` / `*_lab.mvol` pairs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cascade on one MVOL or NIfTI-1 volume.
    Infer {
        #[arg(long)]
        liver_ckpt: PathBuf,
        #[arg(long)]
        lesion_ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score `*_seg.mvol` predictions against `*_lab.mvol` references.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "lesion")]
        target: Target,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("livseg: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Phantom { out, count, seed, config } => {
            let cfg = load_config(config.as_deref())?;
            with_threads(&cfg, || cmd_phantom(&out, count, seed, &cfg))
        }
        Command::Train { data, stage, config, out } => {
            let cfg = load_config(config.as_deref())?;
            require_dir(&data)?;
            with_threads(&cfg, || cmd_train(&data, stage, &cfg, &out))
        }
        Command::Infer {
            liver_ckpt,
            lesion_ckpt,
            input,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            for p in [&liver_ckpt, &lesion_ckpt, &input] {
                require_file(p)?;
            }
            with_threads(&cfg, || cmd_infer(&liver_ckpt, &lesion_ckpt, &input, &out, &cfg))
        }
        Command::Eval {
            pred,
            reference,
            out,
            target,
        } => {
            require_dir(&pred)?;
            require_dir(&reference)?;
            cmd_eval(&pred, &reference, &out, target)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            require_file(p)?;
            RunConfig::load(p)
        }
        None => Ok(RunConfig::default()),
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{} is not a readable file", p.display())))
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{} is not a directory", p.display())))
    }
}

fn with_threads<R: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot build a {n}-thread pool: {e}")))?
            .install(f),
        None => f(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::from(e).in_file(path))
}

pub fn cmd_phantom(out: &Path, count: usize, seed: u64, cfg: &RunConfig) -> Result<()> {
    create_dir(out)?;
    let mut manifest = String::from("# case seed image labels\n");
    for i in 0..count {
        let case_seed = seed.wrapping_add(i as u64);
        let (img, lab) = generate_phantom(case_seed, &cfg.phantom)?;
        let name = format!("case_{i:04}");
        let (img_file, lab_file) = (format!("{name}_img.mvol"), format!("{name}_lab.mvol"));
        save_mvol(&AnyVolume::Intensity(img), out.join(&img_file))?;
        save_mask(&lab, out.join(&lab_file))?;
        writeln!(manifest, "{name} {case_seed} {img_file} {lab_file}").expect("writing to a String");
        println!("wrote {name} (seed {case_seed})");
    }
    write_text(&out.join("manifest.txt"), &manifest)?;
    println!("{count} phantom case(s) in {}", out.display());
    Ok(())
}

/// Case names with the file paths found for each suffix, sorted by name.
fn cases_with_suffix(dir: &Path, suffix: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::from(e).in_file(dir))? {
        let path = entry.map_err(|e| Error::from(e).in_file(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(case) = name.strip_suffix(suffix) {
            found.insert(case.to_string(), path.clone());
        }
    }
    Ok(found)
}

fn stage_error(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Usage(_) | Error::Config(_) | Error::Pipeline { .. } => e,
        other => Error::pipeline(stage, other.to_string()),
    }
}

pub fn cmd_train(data: &Path, stage: Stage, cfg: &RunConfig, out: &Path) -> Result<()> {
    let (tag, classes) = match stage {
        Stage::Liver => ("liver training", 2),
        Stage::Lesion => ("lesion training", 3),
    };
    let images = cases_with_suffix(data, "_img.mvol")?;
    let labels = cases_with_suffix(data, "_lab.mvol")?;
    let missing: Vec<&str> = images.keys().filter(|k| !labels.contains_key(*k)).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(Error::pipeline(tag, format!("no labels for case(s): {}", missing.join(", "))));
    }
    let names: Vec<&String> = images.keys().collect();
    let cases: Vec<TrainingCase> = names
        .par_iter()
        .map(|name| -> Result<TrainingCase> {
            let img = load_volume(&images[*name])?.into_intensity()?;
            let lab = load_volume(&labels[*name])?.into_labels()?;
            match stage {
                Stage::Liver => liver_stage_case(&img, &lab, cfg.cascade.coarse_spacing),
                Stage::Lesion => lesion_stage_case(&img, &lab),
            }
        })
        .collect::<Result<_>>()
        .map_err(stage_error(tag))?;
    if cases.is_empty() {
        return Err(Error::pipeline(tag, format!("no *_img.mvol cases in {}", data.display())));
    }
    println!(
        "{tag}: {} case(s), {} slice(s)",
        cases.len(),
        cases.iter().map(|c| c.slices.len()).sum::<usize>()
    );
    let net: Network<f32> = build_network(&cfg.net_spec(classes), cfg.net_seed)?;
    let mut log = String::new();
    let (net, _) = train_model(net, &cases, &cfg.train, |r| {
        println!("{r}");
        writeln!(log, "{r}").expect("writing to a String");
    })
    .map_err(stage_error(tag))?;
    save_checkpoint(&net, out)?;
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log");
    write_text(Path::new(&log_path), &log)?;
    println!("saved {}", out.display());
    Ok(())
}

fn case_name(input: &Path) -> String {
    let name = input.file_name().and_then(|n| n.to_str()).unwrap_or("case");
    let stem = [".mvol", ".nii.gz", ".nii"]
        .iter()
        .find_map(|ext| name.strip_suffix(ext))
        .unwrap_or(name);
    stem.strip_suffix("_img").unwrap_or(stem).to_string()
}

pub fn cmd_infer(liver_ckpt: &Path, lesion_ckpt: &Path, input: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let net_a: Network<f32> = load_checkpoint(liver_ckpt)?;
    let net_b: Network<f32> = load_checkpoint(lesion_ckpt)?;
    if net_b.spec().num_classes != 3 {
        return Err(Error::in_file(
            Error::Data(format!("lesion model must have 3 classes, has {}", net_b.spec().num_classes)),
            lesion_ckpt,
        ));
    }
    let vol = load_volume(input)?.into_intensity().map_err(|e| e.in_file(input))?;
    let result = run_cascade(&net_a, &net_b, &vol, &cfg.cascade)?;

    create_dir(out)?;
    let case = case_name(input);
    let lesion_components = crate::morpho::connected_components_3d(&result.lesion, cfg.cascade.connectivity).count();
    save_mask(&result.liver, out.join(format!("{case}_liver.mvol")))?;
    save_mask(&result.lesion, out.join(format!("{case}_lesion.mvol")))?;
    save_mask(&result.label_map(), out.join(format!("{case}_seg.mvol")))?;
    if cfg.emit_probs {
        for c in 0..result.probs.classes() {
            save_mvol(
                &AnyVolume::Intensity(result.probs.class_volume(c)),
                out.join(format!("{case}_prob{c}.mvol")),
            )?;
        }
    }
    println!(
        "{case}: liver {} voxels, lesion {} voxels in {lesion_components} component(s)",
        result.liver.count_nonzero(),
        result.lesion.count_nonzero()
    );
    Ok(())
}

fn target_mask(labels: &LabelVolume, target: Target) -> LabelVolume {
    match target {
        Target::Liver => labels.mask_at_least(1),
        Target::Lesion => labels.mask_of(2),
    }
}

pub fn cmd_eval(pred: &Path, reference: &Path, out: &Path, target: Target) -> Result<()> {
    let preds = cases_with_suffix(pred, "_seg.mvol")?;
    let refs = cases_with_suffix(reference, "_lab.mvol")?;
    if preds.is_empty() {
        return Err(Error::Data(format!("no *_seg.mvol predictions in {}", pred.display())));
    }
    let missing: Vec<&str> = preds.keys().filter(|k| !refs.contains_key(*k)).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no reference *_lab.mvol in {} for case(s): {}",
            reference.display(),
            missing.join(", ")
        )));
    }
    let rows: Vec<(String, CaseReport)> = preds
        .par_iter()
        .map(|(name, path)| -> Result<(String, CaseReport)> {
            let p = load_volume(path)?.into_labels().map_err(|e| e.in_file(path))?;
            let r = load_volume(&refs[name])?.into_labels().map_err(|e| e.in_file(&refs[name]))?;
            let report = evaluate_case(&target_mask(&p, target), &target_mask(&r, target))
                .map_err(|e| Error::Data(format!("case {name}: {}", e.root())))?;
            Ok((name.clone(), report))
        })
        .collect::<Result<_>>()?;
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &rows)?;
    fs::write(out, &buf).map_err(|e| Error::from(e).in_file(out))?;
    let mean = aggregate(&rows.iter().map(|(_, r)| *r).collect::<Vec<_>>())?;
    println!(
        "{} case(s): dice {} voe {} rvd {} assd {} mm mssd {} mm",
        rows.len(),
        format_sig(mean.dice),
        format_sig(mean.voe),
        format_sig(mean.rvd),
        format_sig(mean.assd_mm),
        format_sig(mean.mssd_mm)
    );
    Ok(())
}
