use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graphseg::data::{synthetic_corpus, write_dataset};
use graphseg::eval::{clinical_metrics, paired_t_test};
use graphseg::pipeline::ablation::{run_variant, summarize, Variant};
use graphseg::pipeline::infer::{list_images, read_image, write_prediction};
use graphseg::pipeline::report::{
    gray_tile, heatmap, mask_tile, write_curves, write_metrics_csv, write_panel, write_summary_csv,
};
use graphseg::pipeline::{
    evaluate_records, prepare_split, McSettings, Predictor, RunConfig, RunRecord, Trainer,
};
use graphseg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "graphseg",
    version,
    about = "Graph-reasoning cascade segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults to the toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-scale preset instead of the toy one.
    #[arg(long, conflicts_with = "config")]
    full_scale: bool,
    /// Override a config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        if self.full_scale {
            return RunConfig::full_scale().with_overrides(&self.overrides);
        }
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as PNG images and masks.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint, record, curves and test metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its stored config wins over flags.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save a checkpoint every this many epochs (0: only at the end).
        #[arg(long, default_value_t = 0)]
        save_every: usize,
    },
    /// Predict masks for a PNG image or a directory of PNGs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Monte Carlo dropout samples for uncertainty maps (0: none).
        #[arg(long, default_value_t = 0)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint on the test split of its data configuration.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Paired t-test of lesion area, vessel density and avascular area
        /// against this second checkpoint on the same images.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Number of side-by-side panels to write.
        #[arg(long, default_value_t = 4)]
        panels: usize,
    },
    /// Train and score the ablation variants over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "M0,M1,M2,M3,M*1,M*2,M*3")]
        variants: Vec<Variant>,
    },
    /// Redraw loss, lambda and validation curves of a run record.
    Report {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth_data(config: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    config.write(&out.join("config.toml"))?;
    let records = synthetic_corpus(
        config.data.samples,
        config.data.synth_seed,
        &config.data.synth,
    )?;
    write_dataset(out, &records)?;
    log::info!("wrote {} samples to {}", records.len(), out.display());
    Ok(())
}

fn train(config: RunConfig, out: &Path, resume: Option<&Path>, save_every: usize) -> Result<()> {
    create_dir(out)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(path)?,
        None => Trainer::new(config)?,
    };
    trainer.config().write(&out.join("config.toml"))?;
    let split = prepare_split(trainer.config())?;
    let checkpoint = out.join("checkpoint.safetensors");
    trainer.fit(&split, |t| {
        let e = t.record().epochs.last().expect("epoch recorded");
        log::info!(
            "epoch {}: loss {:.4}, val dice region {:.4} vessel {:.4} ({:.1}s)",
            e.epoch,
            e.total,
            e.val_region_dice,
            e.val_vessel_dice,
            e.seconds
        );
        if save_every > 0 && e.epoch % save_every == 0 {
            t.save(&checkpoint)?;
        }
        Ok(())
    })?;
    trainer.save(&checkpoint)?;
    trainer.record().write_json(&out.join("run_record.json"))?;
    write_curves(out, trainer.record())?;
    let metrics = evaluate_records(trainer.model(), &split.test, trainer.config().train.batch)?;
    write_metrics_csv(&out.join("metrics.csv"), &metrics)?;
    Ok(())
}

fn infer(checkpoint: &Path, input: &Path, out: &Path, mc_samples: usize, seed: u64) -> Result<()> {
    let predictor = Predictor::from_checkpoint(checkpoint)?;
    let files = list_images(input)?;
    let images = files
        .iter()
        .map(|f| read_image(f))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = images.iter().collect();
    let mc = (mc_samples > 0).then(|| McSettings {
        samples: mc_samples,
        seed,
        chunk: predictor.config.train.mc_chunk,
    });
    let predictions = predictor.predict(&refs, mc)?;
    for (file, p) in files.iter().zip(&predictions) {
        let stem = file
            .file_stem()
            .map_or("image".into(), |s| s.to_string_lossy().into_owned());
        write_prediction(out, &stem, p)?;
    }
    log::info!(
        "wrote predictions for {} images to {}",
        files.len(),
        out.display()
    );
    Ok(())
}

fn evaluate(checkpoint: &Path, out: &Path, compare: Option<&Path>, panels: usize) -> Result<()> {
    create_dir(out)?;
    let predictor = Predictor::from_checkpoint(checkpoint)?;
    predictor.config.write(&out.join("config.toml"))?;
    let split = prepare_split(&predictor.config)?;
    let batch = predictor.config.train.batch;
    let metrics = evaluate_records(predictor.model(), &split.test, batch)?;
    write_metrics_csv(&out.join("metrics.csv"), &metrics)?;

    let images: Vec<_> = split.test.iter().take(panels).map(|r| &r.image).collect();
    let mc = McSettings {
        samples: predictor.config.train.mc_samples,
        seed: predictor.config.train.seed,
        chunk: predictor.config.train.mc_chunk,
    };
    let predictions = predictor.predict(&images, Some(mc))?;
    for (r, p) in split.test.iter().zip(&predictions) {
        let (vr, vv) = p.uncertainty.as_ref().expect("requested uncertainty");
        write_panel(
            &out.join(format!("{}_panel.png", r.id)),
            &[
                gray_tile(&r.image),
                mask_tile(&r.region_mask),
                mask_tile(&p.region_mask),
                heatmap(vr),
                mask_tile(&r.vessel_mask),
                mask_tile(&p.vessel_mask),
                heatmap(vv),
            ],
        )?;
    }

    if let Some(other) = compare {
        let other = Predictor::from_checkpoint(other)?;
        let all: Vec<_> = split.test.iter().map(|r| &r.image).collect();
        let a = predictor.predict(&all, None)?;
        let b = other.predict(&all, None)?;
        let clinical = |ps: &[graphseg::pipeline::Prediction]| {
            ps.iter()
                .map(|p| clinical_metrics(&p.region_mask, &p.vessel_mask))
                .collect::<Result<Vec<_>>>()
        };
        let (ca, cb) = (clinical(&a)?, clinical(&b)?);
        let mut text = String::from("quantity,t,p,df\n");
        let quantities: [(&str, fn(&graphseg::eval::Clinical) -> f64); 3] = [
            ("lesion_area", |c| c.lesion_area_px as f64),
            ("vessel_density", |c| c.vessel_density),
            ("avascular_area", |c| c.avascular_area_px as f64),
        ];
        for (name, get) in quantities {
            let pre: Vec<f64> = ca.iter().map(get).collect();
            let post: Vec<f64> = cb.iter().map(get).collect();
            match paired_t_test(&pre, &post) {
                Ok(t) => text.push_str(&format!("{name},{},{},{}\n", t.t, t.p, t.df)),
                Err(e) => text.push_str(&format!("{name},,,# {e}\n")),
            }
        }
        let path = out.join("paired_t_test.csv");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn ablate(config: &RunConfig, out: &Path, seeds: &[u64], variants: &[Variant]) -> Result<()> {
    create_dir(out)?;
    config.write(&out.join("config.toml"))?;
    let mut runs = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            runs.push(run_variant(config, variant, seed, Some(out))?);
            write_summary_csv(&out.join("summary.csv"), &summarize(&runs))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { config, out } => synth_data(&config.resolve()?, &out),
        Command::Train {
            config,
            out,
            resume,
            save_every,
        } => {
            let config = if resume.is_some() {
                RunConfig::default()
            } else {
                config.resolve()?
            };
            train(config, &out, resume.as_deref(), save_every)
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            mc_samples,
            seed,
        } => infer(&checkpoint, &input, &out, mc_samples, seed),
        Command::Evaluate {
            checkpoint,
            out,
            compare,
            panels,
        } => evaluate(&checkpoint, &out, compare.as_deref(), panels),
        Command::Ablate {
            config,
            out,
            seeds,
            variants,
        } => ablate(&config.resolve()?, &out, &seeds, &variants),
        Command::Report { record, out } => {
            create_dir(&out)?;
            write_curves(&out, &RunRecord::read_json(&record)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
