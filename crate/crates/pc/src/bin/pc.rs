use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pc::bundle;
use pc::container;
use pc::imageio::{image_to_png, mask_to_png, read_image, write_png};
use pc::runner::ThreadedRunner;
use pc::service::{self, ServiceConfig};
use pc_core::backend::toy::{toy_catalog, toy_face_pairs, ToyBackendConfig};
use pc_core::composition::{auto_masks, compose, CompositionPlan, SequentialRunner};
use pc_core::evaluation::evaluate_personalization;
use pc_core::latent::{extract_direction, DirectionCatalog, EditRequest, SourceTag, WPlusLatent};
use pc_core::pipeline::{edit_generate, generate, interpolation_strip, GenerationConfig, PromptTemplate, DEFAULT_TAU};
use pc_core::training::{
    pretrain, toy_dataset, tune_subject, Environment, PairedSample, PretrainConfig, TuneConfig, NEUTRAL_TEMPLATE,
};

#[derive(Parser)]
#[command(name = "pc", version, about = "Subject personalization and composition over a diffusion backend")]
struct Cli {
    /// Bundle spec (JSON or TOML). The toy bundle when unset.
    #[arg(long, global = true, env = "PC_BACKEND")]
    backend: Option<PathBuf>,
    /// Pretrained adaptor weights (.pcw).
    #[arg(long, global = true, env = "PC_WEIGHTS")]
    weights: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the adaptor on paired (image, W+) samples.
    Pretrain(PretrainArgs),
    /// Embed a face image into a subject profile without tuning.
    Embed(EmbedArgs),
    /// Embed and tune a subject profile on one image.
    Tune(TuneArgs),
    /// Generate one image of a subject.
    Generate(GenArgs),
    /// Attribute edits with attention injection, optionally as a sweep.
    Edit(EditArgs),
    /// Interpolation strip between two subjects.
    Interp(InterpArgs),
    /// Several subjects in one image.
    Compose(ComposeArgs),
    /// Personalization metrics over profiles and prompts.
    Eval(EvalArgs),
    /// List or extract attribute directions.
    Directions(DirectionsArgs),
    /// List subjects registered in a service store.
    Subjects(SubjectsArgs),
    /// Write toy face images (toy backend only).
    ToyFaces(ToyFacesArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Directory of face images; W+ codes come from the GAN encoder.
    #[arg(long, conflicts_with = "toy")]
    data: Option<PathBuf>,
    /// Use N synthetic toy pairs instead of --data.
    #[arg(long)]
    toy: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = PretrainConfig::default().steps)]
    iters: usize,
    #[arg(long, default_value_t = PretrainConfig::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = PretrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    subject_id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    embed: EmbedArgs,
    #[arg(long, default_value_t = TuneConfig::default().iterations)]
    iterations: usize,
    #[arg(long, default_value_t = TuneConfig::default().lr_lora)]
    lr_lora: f64,
    #[arg(long, default_value_t = TuneConfig::default().lr_adaptor)]
    lr_adaptor: f64,
    #[arg(long, default_value_t = TuneConfig::default().alpha)]
    alpha: f64,
    #[arg(long, default_value_t = TuneConfig::default().rank)]
    rank: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct GenOpts {
    /// Template with `{S1}` (and `{S2}`, ... for compose).
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = GenerationConfig::default().steps)]
    steps: usize,
}

impl GenOpts {
    fn config(&self, capture: bool) -> GenerationConfig {
        GenerationConfig {
            steps: self.steps,
            tau: self.tau,
            seed: self.seed,
            capture_attention: capture,
        }
    }

    fn template(&self, default: &str) -> Result<PromptTemplate> {
        Ok(PromptTemplate::with_default_placeholder(self.prompt.as_deref().unwrap_or(default))?)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    profile: PathBuf,
    #[command(flatten)]
    gen: GenOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    profile: PathBuf,
    #[command(flatten)]
    gen: GenOpts,
    /// `name=beta`, repeatable; applied together.
    #[arg(long = "edit", value_parser = parse_edit, allow_hyphen_values = true)]
    edits: Vec<(String, f64)>,
    /// Direction to sweep with --beta.
    #[arg(long)]
    direction: Option<String>,
    /// `lo:hi:n` sweep, or a single strength.
    #[arg(long, value_parser = parse_beta, allow_hyphen_values = true)]
    beta: Option<(f64, f64, usize)>,
    /// Direction catalog (.pcd); the toy directions when unset.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InterpArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[command(flatten)]
    gen: GenOpts,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ComposeArgs {
    /// Subject profiles in slot order.
    #[arg(long, visible_alias = "subjects", num_args = 1.., value_delimiter = ',', required = true)]
    profiles: Vec<PathBuf>,
    #[command(flatten)]
    gen: GenOpts,
    /// `auto` or a mask file (.msk).
    #[arg(long, default_value = "auto")]
    masks: String,
    /// Where to save the masks that were used.
    #[arg(long)]
    masks_out: Option<PathBuf>,
    /// Run branches one after another instead of on threads.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory containing subject profiles (.pcs).
    #[arg(long)]
    subjects: PathBuf,
    /// One prompt template per line.
    #[arg(long)]
    prompts: PathBuf,
    #[command(flatten)]
    gen: GenOpts,
    /// JSON report; the CSV is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DirectionsArgs {
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Add a direction extracted from a JSON list of `{"after": [...], "before": [...]}` pairs.
    #[arg(long, requires_all = ["name", "catalog"])]
    extract: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct SubjectsArgs {
    #[arg(long, env = "PC_STORE_DIR", default_value = "pc-store")]
    store_dir: PathBuf,
}

#[derive(Args)]
struct ToyFacesArgs {
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Service config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    store_dir: Option<PathBuf>,
}

fn parse_edit(s: &str) -> Result<(String, f64), String> {
    let (name, beta) = s.split_once('=').ok_or("expected name=beta")?;
    let beta: f64 = beta.parse().map_err(|_| format!("bad strength '{beta}'"))?;
    Ok((name.to_owned(), beta))
}

fn parse_beta(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| p.parse::<f64>().map_err(|_| format!("bad strength '{p}'"));
    match parts.as_slice() {
        [b] => {
            let b = num(b)?;
            Ok((b, b, 1))
        }
        [lo, hi, n] => {
            let n: usize = n.parse().map_err(|_| format!("bad count '{n}'"))?;
            let (lo, hi) = (num(lo)?, num(hi)?);
            if n == 0 || (n == 1 && lo != hi) {
                return Err(format!("{s}: n must be ≥ 2 unless lo == hi"));
            }
            Ok((lo, hi, n))
        }
        _ => Err(format!("expected lo:hi:n or a single strength, got '{s}'")),
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn load_env(cli: &Cli) -> Result<Environment> {
    let bundle = bundle::load_bundle_or_toy(cli.backend.as_deref()).context("loading backend bundle")?;
    bundle::environment(bundle, cli.weights.as_deref()).context("building environment")
}

fn load_catalog(path: Option<&Path>, env: &Environment) -> Result<DirectionCatalog> {
    match path {
        Some(p) => Ok(container::read_catalog(p)?),
        None if bundle::is_toy(env.bundle()) => Ok(toy_catalog(env.wplus_shape(), 7)?),
        None => bail!("no --catalog given and the backend ships no directions"),
    }
}

fn save_image(path: &Path, t: &pc_core::Tensor) -> Result<()> {
    write_png(path, &image_to_png(t)?)?;
    println!("{}", path.display());
    Ok(())
}

fn read_face(env: &Environment, path: &Path) -> Result<pc_core::Tensor> {
    Ok(read_image(path, env.bundle().image_codec.image_shape())?)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Pretrain(a) => {
            let env = load_env(&cli)?;
            let data = match (a.toy, &a.data) {
                (Some(n), None) => toy_dataset(&ToyBackendConfig::default(), n, a.seed)?,
                (None, Some(dir)) => {
                    let mut out = Vec::new();
                    for f in image_files(dir)? {
                        let image = read_face(&env, &f)?;
                        let w = env.bundle().gan_encoder.encode(&image)?;
                        out.push(PairedSample::new(image, w, f.display().to_string())?);
                    }
                    if out.is_empty() {
                        bail!("{} has no images", dir.display());
                    }
                    out
                }
                _ => bail!("pass exactly one of --data or --toy"),
            };
            let cfg = PretrainConfig {
                steps: a.iters,
                batch_size: a.batch,
                lr: a.lr,
                seed: a.seed,
                ..PretrainConfig::default()
            };
            let (weights, history) = pretrain(&env, &data, cfg)?;
            let k = history.len().min(10);
            let mean = |h: &[pc_core::training::LossBreakdown]| h.iter().map(|l| l.total).sum::<f64>() / h.len() as f64;
            println!(
                "{} steps, mean loss first {k}: {:.6}, last {k}: {:.6}",
                history.len(),
                mean(&history[..k]),
                mean(&history[history.len() - k..])
            );
            container::write_weights(&weights.to_f32_precision(), &a.out)?;
            println!("{}", a.out.display());
        }
        Cmd::Embed(a) => {
            let env = load_env(&cli)?;
            let image = read_face(&env, &a.image)?;
            let p = env.embed_image(&a.subject_id, &image, now_secs())?;
            container::write_profile(&p, &a.out)?;
            println!("{}", a.out.display());
        }
        Cmd::Tune(a) => {
            let env = load_env(&cli)?;
            let image = read_face(&env, &a.embed.image)?;
            let w = env.bundle().gan_encoder.encode(&image)?;
            let cfg = TuneConfig {
                iterations: a.iterations,
                lr_lora: a.lr_lora,
                lr_adaptor: a.lr_adaptor,
                alpha: a.alpha,
                rank: a.rank,
                seed: a.seed,
                ..TuneConfig::default()
            };
            let out = tune_subject(&env, &a.embed.subject_id, &image, &w, &cfg, now_secs())?;
            println!("fit loss {:.6} -> {:.6}", out.eval_before, out.eval_after);
            container::write_profile(&out.profile, &a.embed.out)?;
            println!("{}", a.embed.out.display());
        }
        Cmd::Generate(a) => {
            let env = load_env(&cli)?;
            let p = container::read_profile(&a.profile)?;
            let trace = generate(&p, &a.gen.template(NEUTRAL_TEMPLATE)?, &a.gen.config(false), &env)?;
            save_image(&a.out, &trace.image)?;
        }
        Cmd::Edit(a) => {
            let env = load_env(&cli)?;
            let catalog = load_catalog(a.catalog.as_deref(), &env)?;
            let p = container::read_profile(&a.profile)?;
            let template = a.gen.template(NEUTRAL_TEMPLATE)?;
            let cfg = a.gen.config(true);
            let mut frames: Vec<(String, Vec<(String, f64)>)> = Vec::new();
            match (&a.direction, a.beta) {
                (Some(dir), Some((lo, hi, n))) => {
                    for k in 0..n {
                        let b = if n == 1 {
                            lo
                        } else if k == n - 1 {
                            hi
                        } else {
                            lo + (hi - lo) * k as f64 / (n - 1) as f64
                        };
                        let mut e = a.edits.clone();
                        e.push((dir.clone(), b));
                        frames.push((format!("{k:03}_{dir}_{b:+.3}.png"), e));
                    }
                }
                (None, None) if !a.edits.is_empty() => frames.push(("edit.png".into(), a.edits.clone())),
                (None, None) => bail!("pass --edit name=beta and/or --direction with --beta"),
                _ => bail!("--direction and --beta go together"),
            }
            let base = generate(&p, &template, &cfg, &env)?;
            save_image(&a.out_dir.join("base.png"), &base.image)?;
            for (name, edits) in frames {
                let req = EditRequest::new(edits)?;
                let trace = edit_generate(&p, &req, &catalog, &base, &template, &cfg, &env)?;
                save_image(&a.out_dir.join(name), &trace.image)?;
            }
        }
        Cmd::Interp(a) => {
            let env = load_env(&cli)?;
            let pa = container::read_profile(&a.a)?;
            let pb = container::read_profile(&a.b)?;
            let strip = interpolation_strip(&pa, &pb, a.n, &a.gen.template(NEUTRAL_TEMPLATE)?, &a.gen.config(false), &env)?;
            for (k, f) in strip.iter().enumerate() {
                save_image(&a.out_dir.join(format!("{k:03}_lam{:.3}.png", f.lam)), &f.image)?;
            }
        }
        Cmd::Compose(a) => {
            let env = load_env(&cli)?;
            let subjects = a
                .profiles
                .iter()
                .map(|p| container::read_profile(p).with_context(|| p.display().to_string()))
                .collect::<Result<Vec<_>>>()?;
            let n = subjects.len();
            let default_prompt = format!(
                "A photo of {}",
                (1..=n).map(|i| format!("{{S{i}}}")).collect::<Vec<_>>().join(" and ")
            );
            let template = a.gen.template(&default_prompt)?;
            let cfg = a.gen.config(false);
            let masks = if a.masks == "auto" {
                auto_masks(&template, &cfg, &env)?
            } else {
                container::read_masks(Path::new(&a.masks))?
            };
            if let Some(p) = &a.masks_out {
                container::write_masks(&masks, p)?;
                let names = container::branch_names(masks.subject_count());
                for (m, name) in masks.masks().iter().zip(names) {
                    write_png(&p.with_extension(format!("{name}.png")), &mask_to_png(m)?)?;
                }
            }
            let plan = CompositionPlan {
                subjects,
                template,
                masks,
                cfg,
            };
            let trace = if a.sequential {
                compose(&plan, &env, &SequentialRunner)?
            } else {
                compose(&plan, &env, &ThreadedRunner)?
            };
            save_image(&a.out, &trace.image)?;
        }
        Cmd::Eval(a) => {
            let env = load_env(&cli)?;
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&a.subjects)
                .with_context(|| format!("reading {}", a.subjects.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "pcs"))
                .collect();
            dirs.sort();
            let profiles = dirs
                .iter()
                .map(|d| container::read_profile(d).with_context(|| d.display().to_string()))
                .collect::<Result<Vec<_>>>()?;
            let text = std::fs::read_to_string(&a.prompts).with_context(|| a.prompts.display().to_string())?;
            let prompts = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(PromptTemplate::with_default_placeholder)
                .collect::<pc_core::Result<Vec<_>>>()?;
            let report = evaluate_personalization(&profiles, &prompts, &a.gen.config(false), &env)?;
            pc::report::write_report(&report, &a.out)?;
            println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
        }
        Cmd::Directions(a) => {
            let env = load_env(&cli)?;
            let mut catalog = match &a.catalog {
                Some(p) if p.exists() => container::read_catalog(p)?,
                Some(_) => DirectionCatalog::new(),
                None => load_catalog(None, &env)?,
            };
            if let (Some(pairs_path), Some(name), Some(out)) = (&a.extract, &a.name, &a.catalog) {
                let text = std::fs::read_to_string(pairs_path)?;
                let pairs: Vec<service::DirectionPair> = serde_json::from_str(&text)?;
                let shape = env.wplus_shape();
                let code = |v: &Vec<f64>| WPlusLatent::new(shape, v.clone(), SourceTag::Encoded);
                let pairs = pairs
                    .iter()
                    .map(|p| Ok((code(&p.after)?, code(&p.before)?)))
                    .collect::<pc_core::Result<Vec<_>>>()?;
                catalog.insert(extract_direction(&pairs, name.clone())?)?;
                container::write_catalog(&catalog, out)?;
            }
            for d in catalog.iter() {
                println!("{}\t{:?}\t{} pair(s)", d.name(), d.provenance(), d.num_pairs());
            }
        }
        Cmd::Subjects(a) => {
            let store = service::Store::open(&a.store_dir)?;
            for e in store.subjects()? {
                println!(
                    "{}\t{}\t{}",
                    e.subject_id,
                    if e.tuned { "tuned" } else { "embedded" },
                    e.profile
                );
            }
        }
        Cmd::ToyFaces(a) => {
            let env = load_env(&cli)?;
            if !bundle::is_toy(env.bundle()) {
                bail!("toy-faces needs the toy backend");
            }
            for (k, (image, _)) in toy_face_pairs(&ToyBackendConfig::default(), a.n, a.seed)?.iter().enumerate() {
                save_image(&a.out_dir.join(format!("face_{k:03}.png")), image)?;
            }
        }
        Cmd::Serve(a) => {
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env()
                        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
                )
                .init();
            let mut cfg = ServiceConfig::load(a.config.as_deref())?;
            if let Some(p) = a.port {
                cfg.port = p;
            }
            if let Some(d) = &a.store_dir {
                cfg.store_dir = d.clone();
            }
            if let Some(b) = &cli.backend {
                cfg.backend = Some(b.clone());
            }
            if let Some(w) = &cli.weights {
                cfg.adaptor_weights = Some(w.clone());
            }
            let svc = service::Service::open(cfg)?;
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(service::serve(svc))?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn beta_sweeps_parse() {
        assert_eq!(parse_beta("-1:1:3").unwrap(), (-1.0, 1.0, 3));
        assert_eq!(parse_beta("0.5").unwrap(), (0.5, 0.5, 1));
        assert!(parse_beta("-1:1:1").is_err());
        assert!(parse_beta("a:b:c").is_err());
        assert_eq!(parse_edit("smile=-2").unwrap(), ("smile".into(), -2.0));
    }
}
