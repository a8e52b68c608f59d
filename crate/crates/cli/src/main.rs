use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fcmh_core::config::RunConfig;
use fcmh_core::entropy::bitstream::Bitstream;
use fcmh_core::metrics::alloc::cell_mask;
use fcmh_core::metrics::curve::curves_from_csv;
use fcmh_core::metrics::{bd_metric, bit_allocation_map, BdMode, RateQualityCurve};
use fcmh_core::par::{init_threads, Exec};
use fcmh_core::pipeline::{from_ppm, to_ppm, HumanCodec, Workspace};
use fcmh_core::pyramid::{load_pyramid_file, save_pyramid_file, FeaturePyramid};
use fcmh_core::selftest::{codec_fuzz, hvcn_gradients, vfcn_gradients};
use fcmh_core::vfcn::IMAGE_PIXELS;
use fcmh_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "fcmh", version, about = "Feature coding for machine and human vision")]
struct Cli {
    /// Run configuration file; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the work directory holding datasets and models.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training steps of the stage being run.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    lambda_p: Option<f64>,
    #[arg(long, global = true)]
    lambda_a: Option<f64>,
    /// Comma-separated rate weights of the reconstruction variants.
    #[arg(long, global = true, value_delimiter = ',')]
    lambda_rs: Option<Vec<f64>>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Machine,
    Human,
}

#[derive(Clone, Copy, ValueEnum)]
enum BdKind {
    Rate,
    Quality,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes the dataset manifest, configuration and sample images.
    GenData,
    /// Trains the task network that produces feature pyramids.
    TrainHead,
    /// Trains the feature codec.
    TrainVfcn,
    /// Trains the colour autoencoder.
    TrainVae,
    /// Trains the reconstruction models, one per rate weight.
    TrainHvcn,
    /// Compresses a pyramid file (.fpyr) or an image (.ppm).
    Compress {
        input: PathBuf,
        /// Scale factor of the global normalization.
        #[arg(short, long, default_value_t = 0.8)]
        s: f64,
        #[arg(short, long)]
        output: PathBuf,
        /// Pyramid to code when the input file holds several.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// `human` adds the colour payload; needs an image input.
        #[arg(long, value_enum, default_value = "machine")]
        mode: Mode,
        /// Reconstruction variant whose latent codec writes the colour payload.
        #[arg(long, default_value_t = 0)]
        variant: usize,
    },
    /// Decodes a container to a pyramid file or, in human mode, an image.
    Decompress {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "machine")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        variant: usize,
        /// Sampling steps; the configured value when omitted.
        #[arg(short = 'k', long)]
        sampling_steps: Option<usize>,
    },
    /// Machine and human rate sweeps over the test images.
    Sweep,
    /// Bjøntegaard delta of a test curve against an anchor curve.
    Bd {
        anchor: PathBuf,
        test: PathBuf,
        #[arg(long, value_enum, default_value = "rate")]
        mode: BdKind,
    },
    /// Per-position bit estimates of the main latent as PGM and CSV.
    AllocMap {
        /// Pyramid file or image; omit to use `--test-image`.
        #[arg(required_unless_present = "test_image", conflicts_with = "test_image")]
        input: Option<PathBuf>,
        /// Test-set image to map, with its foreground/background split.
        #[arg(long)]
        test_image: Option<usize>,
        #[arg(short, long, default_value_t = 0.8)]
        s: f64,
        /// Output prefix; writes PREFIX.pgm and PREFIX.csv.
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Codec fuzz and gradient checks.
    Selftest {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 2)]
        per_tensor: usize,
    },
    /// Every stage from data generation to the sweeps.
    RunAll,
}

fn stage_steps(cmd: &Cmd, cfg: &mut RunConfig, steps: usize) {
    match cmd {
        Cmd::TrainHead => cfg.task_steps = steps,
        Cmd::TrainVfcn => cfg.vfcn_steps = steps,
        Cmd::TrainVae => cfg.vae_steps = steps,
        Cmd::TrainHvcn => cfg.hvcn_steps = steps,
        _ => {}
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.work_dir {
        cfg.work_dir = d.clone();
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.steps {
        stage_steps(&cli.cmd, &mut cfg, v);
    }
    if let Some(v) = cli.lambda_p {
        cfg.lambda_p = v;
    }
    if let Some(v) = cli.lambda_a {
        cfg.lambda_a = v;
    }
    if let Some(v) = &cli.lambda_rs {
        cfg.lambda_rs = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exec_from_env() -> Result<Exec> {
    let Ok(v) = std::env::var("FCMH_THREADS") else {
        return Ok(Exec::Parallel);
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("FCMH_THREADS: cannot parse {v:?}")))?;
    if n == 0 {
        return Err(Error::Config("FCMH_THREADS must be positive".into()));
    }
    init_threads(n);
    Ok(if n == 1 { Exec::Serial } else { Exec::Parallel })
}

fn is_ppm(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

fn read_image(path: &Path) -> Result<Tensor> {
    let img = from_ppm(&std::fs::read(path)?)?;
    let shape = img.shape();
    if shape[2] * shape[3] != IMAGE_PIXELS {
        return Err(Error::format(0, format!("image of {}x{} pixels, expected 64x64", shape[3], shape[2])));
    }
    Ok(img)
}

/// Pyramid from an `.fpyr` file or the task head applied to a `.ppm` image.
fn read_pyramid(ws: &Workspace, path: &Path, index: usize) -> Result<FeaturePyramid> {
    if is_ppm(path) {
        return ws.task()?.head_pixels(&read_image(path)?);
    }
    let mut all = load_pyramid_file(path)?;
    if index >= all.len() {
        return Err(Error::Contract(format!("pyramid index {index} out of {} in {}", all.len(), path.display())));
    }
    Ok(all.swap_remove(index))
}

fn read_curve(path: &Path) -> Result<RateQualityCurve> {
    let mut curves = curves_from_csv(&std::fs::read_to_string(path)?)?;
    if curves.is_empty() {
        return Err(Error::format(0, format!("no curve in {}", path.display())));
    }
    Ok(curves.swap_remove(0))
}

fn human_variant(ws: &Workspace, variant: usize) -> Result<fcmh_core::hvcn::HvcnModel> {
    if variant >= ws.cfg.lambda_rs.len() {
        return Err(Error::Config(format!("variant {variant} of {} configured", ws.cfg.lambda_rs.len())));
    }
    fcmh_core::hvcn::HvcnModel::load(ws.variant_path(variant))
}

fn run(cli: Cli) -> Result<bool> {
    let exec = exec_from_env()?;
    let cfg = load_config(&cli)?;
    let ws = Workspace::new(cfg, exec);
    let tag = format!("config={}", ws.cfg.hash());
    match cli.cmd {
        Cmd::GenData => {
            let sum = ws.gen_data()?;
            println!("dataset sha256 {sum}");
        }
        Cmd::TrainHead => {
            let m = ws.train_head()?;
            let (_, test) = ws.datasets()?;
            let r = m.evaluate(&m.pyramids(&test, exec)?, &test, exec)?;
            println!("class accuracy {:.4}, localization {:.4}", r.class_acc, r.loc_hit);
        }
        Cmd::TrainVfcn => {
            ws.train_vfcn()?;
            println!("wrote {}", ws.path("vfcn.fcmp").display());
        }
        Cmd::TrainVae => {
            ws.train_vae()?;
            println!("wrote {}", ws.path("vae.fcmp").display());
        }
        Cmd::TrainHvcn => {
            let models = ws.train_hvcn()?;
            for i in 0..models.len() {
                println!("wrote {}", ws.variant_path(i).display());
            }
        }
        Cmd::Compress {
            input,
            s,
            output,
            index,
            mode,
            variant,
        } => {
            let vfcn = ws.vfcn()?;
            let stream = match mode {
                Mode::Machine => vfcn.encode(&read_pyramid(&ws, &input, index)?, vfcn.norm(s)?)?,
                Mode::Human => {
                    if !is_ppm(&input) {
                        return Err(Error::Contract("human mode needs a .ppm image".into()));
                    }
                    let pixels = read_image(&input)?;
                    let (task, hvcn, vae) = (ws.task()?, human_variant(&ws, variant)?, ws.vae()?);
                    let codec = HumanCodec {
                        task: &task,
                        vfcn: &vfcn,
                        hvcn: &hvcn,
                        vae: &vae,
                    };
                    codec.compress_pyramid(&task.head_pixels(&pixels)?, &pixels, s)?
                }
            };
            let bytes = stream.to_bytes()?;
            std::fs::write(&output, &bytes)?;
            println!("{} bytes, {:.4} bpp", bytes.len(), (bytes.len() * 8) as f64 / IMAGE_PIXELS as f64);
        }
        Cmd::Decompress {
            input,
            output,
            mode,
            variant,
            sampling_steps,
        } => {
            let stream = Bitstream::from_bytes(&std::fs::read(&input)?)?;
            let vfcn = ws.vfcn()?;
            match mode {
                Mode::Machine => {
                    let p = vfcn.decode(&stream)?;
                    save_pyramid_file(&output, std::slice::from_ref(&p))?;
                    if let Ok(task) = ws.task() {
                        let pred = task.tail(&p)?;
                        println!(
                            "class {} center ({:.2}, {:.2})",
                            pred.class().name(),
                            pred.center.0,
                            pred.center.1
                        );
                    }
                }
                Mode::Human => {
                    let (task, hvcn, vae) = (ws.task()?, human_variant(&ws, variant)?, ws.vae()?);
                    let codec = HumanCodec {
                        task: &task,
                        vfcn: &vfcn,
                        hvcn: &hvcn,
                        vae: &vae,
                    };
                    let k = sampling_steps.unwrap_or(ws.cfg.sampling_steps);
                    let img = codec.reconstruct(&stream, k, ws.cfg.seed)?;
                    std::fs::write(&output, to_ppm(&img, Some(&tag))?)?;
                }
            }
            println!("wrote {}", output.display());
        }
        Cmd::Sweep => {
            let (machine, human) = ws.sweep()?;
            println!("s,bpp,class_acc,loc_hit");
            for p in &machine {
                println!("{},{:.6},{:.4},{:.4}", p.s, p.bpp, p.class_acc, p.loc_hit);
            }
            println!("lambda_rs,bpp,ms_ssim,psnr");
            for p in &human {
                println!("{},{:.6},{:.4},{:.3}", p.lambda_rs, p.bpp, p.ms_ssim, p.psnr);
            }
        }
        Cmd::Bd { anchor, test, mode } => {
            let (a, t) = (read_curve(&anchor)?, read_curve(&test)?);
            match mode {
                BdKind::Rate => println!("BD-rate {:.2}%", bd_metric(&a, &t, BdMode::Rate)?),
                BdKind::Quality => println!("BD-{} {:.4}", t.kind, bd_metric(&a, &t, BdMode::Quality)?),
            }
        }
        Cmd::AllocMap {
            input,
            test_image,
            s,
            output,
            index,
        } => {
            let vfcn = ws.vfcn()?;
            let (pyramid, image) = match (input, test_image) {
                (Some(p), _) => (read_pyramid(&ws, &p, index)?, None),
                (None, Some(i)) => {
                    let img = ws
                        .test_images()
                        .into_iter()
                        .nth(i)
                        .ok_or_else(|| Error::Contract(format!("test image {i} out of {}", ws.cfg.test_images)))?;
                    (ws.task()?.head(&img)?, Some(img))
                }
                (None, None) => return Err(Error::Contract("alloc-map needs an input or --test-image".into())),
            };
            let enc = vfcn.encode_full(&pyramid, vfcn.norm(s)?)?;
            let (bits, z_bits) = vfcn.estimated_bits(&enc)?;
            let map = bit_allocation_map(&bits)?;
            let pgm = map.to_pgm().replacen('\n', &format!("\n# {tag}\n"), 1);
            std::fs::write(output.with_extension("pgm"), pgm)?;
            std::fs::write(output.with_extension("csv"), format!("# {tag}\n{}", map.to_csv()))?;
            println!("main {:.1} bits, hyper {:.1} bits", map.total_bits(), z_bits);
            if let Some(img) = image {
                let side = img.pixels.shape()[3];
                let (fg, bg) = map.split_means(&cell_mask(&img.mask(), side, side / map.width))?;
                println!("foreground {fg:.3} bits/cell, background {bg:.3} bits/cell, ratio {:.2}", fg / bg);
            }
        }
        Cmd::Selftest {
            cases,
            seeds,
            per_tensor,
        } => {
            let mut ok = true;
            let r = codec_fuzz(cases, ws.cfg.seed);
            println!(
                "fuzz: {} cases ({} factorized, {} gaussian, {} context), {} symbols, {} failures",
                cases, r.cases[0], r.cases[1], r.cases[2], r.symbols, r.failures
            );
            ok &= r.failures == 0;
            for seed in 1..=seeds {
                for (name, groups) in [("vfcn", vfcn_gradients(seed, per_tensor)?), ("hvcn", hvcn_gradients(seed, per_tensor)?)] {
                    for (group, err) in groups {
                        let pass = err < 1e-4;
                        ok &= pass;
                        println!("gradcheck {name} seed {seed} {group:<8} {err:.2e} {}", if pass { "ok" } else { "FAIL" });
                    }
                }
            }
            println!("selftest {}", if ok { "passed" } else { "FAILED" });
            return Ok(ok);
        }
        Cmd::RunAll => {
            for (name, secs) in ws.run_all()? {
                println!("{name}: {secs:.1} s");
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
