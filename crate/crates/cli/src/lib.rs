//! `tags` subcommands. Each one writes its human-readable output to the
//! supplied writer so tests can drive them in-process.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tags_core::head::{PointPrompt, SelectionStrategy, StrategyKind};
use tags_core::io::{load_mask, load_volume, save_mask, save_volume, CaseRecord, DatasetManifest, LoadedCase};
use tags_core::metrics::{evaluate, EvalCase, NSD_TOLERANCE_MM};
use tags_core::phantom::{synth_phantom, PhantomSpec};
use tags_core::pipeline::{infer, infer_with_strategy, preprocess, train, Checkpoint, TrainConfig};
use tags_core::volume::{MaskVolume, Volume};
use tags_service::{AppState, ModelHandle};

pub const DATA_ROOT_ENV: &str = "TAGS_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "tags", version, about = "Prompted 3D tumor segmentation")]
pub struct Cli {
    /// Directory that relative manifest paths resolve against.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a TOML config and a dataset manifest.
    Train(TrainArgs),
    /// Segment one volume from explicit points or a selection strategy.
    Infer(InferArgs),
    /// Dice/NSD per point strategy plus the ICC row.
    Eval(EvalArgs),
    /// Write synthetic phantom cases and a manifest.
    Phantom(PhantomArgs),
    /// Print a default training config as TOML.
    Config(ConfigArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Defaults to `manifest.json` under the data root.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "tags.ckpt")]
    pub out: PathBuf,
    /// JSON-lines step log; stdout when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image volume (NIfTI or `.raw` with a `.json` sidecar).
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub organ: PathBuf,
    /// `z,y,x:fg` or `z,y,x:bg`; repeat for several points.
    #[arg(long = "points", num_args = 1..)]
    pub points: Vec<PointPrompt>,
    /// Choose points from `--tumor` instead (evaluation only).
    #[arg(long, conflicts_with = "points", requires = "tumor")]
    pub strategy: Option<StrategyKind>,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub tumor: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Single strategy; the four-row protocol runs when omitted.
    #[arg(long)]
    pub strategy: Option<StrategyKind>,
    #[arg(long, requires = "strategy")]
    pub points: Option<usize>,
    #[arg(long, default_value_t = NSD_TOLERANCE_MM)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write per-case records as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub cases: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-axis tumor-centre jitter in voxels, applied from the second case on.
    #[arg(long, default_value_t = 2.0)]
    pub jitter: f64,
    /// One case per listed tumor intensity (HU); overrides `--cases`.
    #[arg(long, value_delimiter = ',')]
    pub tumor_hu: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Desk-scale config instead of the full-size one.
    #[arg(long)]
    pub tiny: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::Train(a) => cmd_train(a, root, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Eval(a) => cmd_eval(a, root, out),
        Command::Phantom(a) => cmd_phantom(a, out),
        Command::Config(a) => {
            let cfg = if a.tiny { TrainConfig::tiny() } else { TrainConfig::default() };
            write!(out, "{}", cfg.to_toml())?;
            Ok(())
        }
        Command::Serve(a) => cmd_serve(a, out),
    }
}

fn manifest_path(explicit: Option<PathBuf>, root: Option<&Path>) -> anyhow::Result<PathBuf> {
    match (explicit, root) {
        (Some(p), _) => Ok(p),
        (None, Some(r)) => Ok(r.join("manifest.json")),
        (None, None) => bail!("no --manifest given and {DATA_ROOT_ENV} is unset"),
    }
}

fn cmd_train(a: TrainArgs, root: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = TrainConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    let manifest = DatasetManifest::load(&manifest_path(a.manifest, root)?, root)?;
    let (ckpt, records) = match &a.log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            let r = train(&cfg, &manifest, Some(&mut w))?;
            w.flush()?;
            r
        }
        None => train(&cfg, &manifest, Some(&mut *out))?,
    };
    ckpt.save(&a.out)?;
    let last = records.last().map_or(f64::NAN, |r| r.loss);
    writeln!(out, "trained {} steps, final loss {last:.4}, checkpoint {}", records.len(), a.out.display())?;
    Ok(())
}

fn load_case(image: &Path, organ: &Path, tumor: Option<&Path>) -> anyhow::Result<LoadedCase> {
    let image: Volume = load_volume(image)?;
    let organ = load_mask(organ)?;
    let tumor = match tumor {
        Some(t) => load_mask(t)?,
        None => MaskVolume::zeros(organ.shape(), organ.spacing()),
    };
    Ok(LoadedCase {
        id: "input".into(),
        organ_name: "organ".into(),
        image,
        organ,
        tumor,
    })
}

fn cmd_infer(a: InferArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let handle = ModelHandle::from_checkpoint(ckpt)?;
    let case = load_case(&a.volume, &a.organ, a.tumor.as_deref())?;
    let prepared = preprocess(&case, &handle.preprocess)?;
    let result = match a.strategy {
        Some(kind) => {
            let strategy = SelectionStrategy::new(kind, a.k)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            infer_with_strategy(&handle.model, &handle.store, &prepared.input, &prepared.tumor, strategy, &mut rng)?
        }
        None => {
            if a.points.is_empty() {
                bail!("give --points or --strategy");
            }
            infer(&handle.model, &handle.store, &prepared.input, &a.points)?
        }
    };
    if let Some(p) = &a.out {
        save_mask(p, &result.mask)?;
    }
    let summary = serde_json::json!({
        "voxels": result.mask.count(),
        "offset": result.offset,
        "points": result.points.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "stats": result.stats,
    });
    writeln!(out, "{summary}")?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, root: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let handle = ModelHandle::from_checkpoint(ckpt)?;
    let manifest = DatasetManifest::load(&manifest_path(a.manifest, root)?, root)?;
    let strategies = match a.strategy {
        Some(kind) => vec![SelectionStrategy::new(kind, a.points.unwrap_or(1))?],
        None => SelectionStrategy::robustness_protocol().to_vec(),
    };
    let cases: Vec<EvalCase> = manifest
        .cases
        .iter()
        .map(|c| {
            manifest
                .load_case(c)
                .and_then(|l| preprocess(&l, &handle.preprocess))
                .map_err(|e| (c.id.clone(), e))
        })
        .collect();
    let report = evaluate(&handle.model, &handle.store, &cases, &strategies, a.seed, a.tolerance)?;
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    write!(out, "{}", report.render_table())?;
    Ok(())
}

fn cmd_phantom(a: PhantomArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if a.size < 32 {
        bail!("phantom size must be at least 32");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let scale = a.size as f64 / 64.0;
    let base = PhantomSpec::default();
    let spec = PhantomSpec {
        shape: [a.size; 3],
        organ_center: [a.size as f64 / 2.0; 3],
        organ_radii: base.organ_radii.map(|r| r * scale),
        tumor_offset: base.tumor_offset.map(|r| r * scale),
        tumor_radii: base.tumor_radii.map(|r| r * scale),
        ..base
    };
    let n = if a.tumor_hu.is_empty() { a.cases } else { a.tumor_hu.len() };
    let mut cases = Vec::new();
    for i in 0..n {
        let spec = PhantomSpec {
            tumor_jitter: if i == 0 { 0.0 } else { a.jitter },
            tumor_hu: a.tumor_hu.get(i).copied().unwrap_or(spec.tumor_hu),
            ..spec.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(i as u64));
        let p = synth_phantom(&spec, &mut rng)?;
        let id = format!("phantom{i:03}");
        let rec = CaseRecord {
            image: format!("{id}_image.nii.gz").into(),
            organ: format!("{id}_organ.nii.gz").into(),
            tumor: format!("{id}_tumor.nii.gz").into(),
            organ_name: "kidney".into(),
            id,
        };
        save_volume(&a.out.join(&rec.image), &p.image)?;
        save_mask(&a.out.join(&rec.organ), &p.organ)?;
        save_mask(&a.out.join(&rec.tumor), &p.tumor)?;
        writeln!(out, "{}: tumor {} voxels, organ {} voxels", rec.id, p.tumor.count(), p.organ.count())?;
        cases.push(rec);
    }
    let manifest = DatasetManifest { cases, root: a.out.clone() };
    let path = a.out.join("manifest.json");
    manifest.save(&path)?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

fn cmd_serve(a: ServeArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let handle = match &a.ckpt {
        Some(p) => Some(ModelHandle::from_checkpoint(Checkpoint::load(p)?)?),
        None => None,
    };
    let state = AppState::new(handle);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        writeln!(out, "listening on http://{}", listener.local_addr()?)?;
        out.flush()?;
        tags_service::serve(listener, state).await?;
        anyhow::Ok(())
    })
}
