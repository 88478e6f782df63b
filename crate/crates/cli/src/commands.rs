use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bseg::boundary_net::{BoundaryAwareNet, NetworkConfig};
use bseg::data::{
    generate_phantom, preprocess, read_labels, read_volume, write_labels, write_volume, CropSampler, PhantomSpec,
    PreparedCase,
};
use bseg::gradcheck::run_suite;
use bseg::inference::{compose_labels, predict_case, Flip, InferenceOptions, MetricsReport, METRICS_HEADER};
use bseg::training::{load_checkpoint, load_checkpoint_for, resume_training, run_training, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::manifest::RunManifest;
use crate::render::{axis_extent, render_slice};
use crate::{Cli, Command, EvalArgs, GenDataArgs, GradcheckArgs, InferArgs, Precision, RenderArgs, TrainArgs};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const PREDICTION_FILE: &str = "prediction.lbl.mvol";
pub const METRICS_FILE: &str = "metrics.csv";

/// A failed subcommand, tagged with the stage that failed.
#[derive(Debug, Error)]
pub enum Failure {
    /// Bad arguments or unreadable inputs; nothing was written.
    #[error("{stage}: {message}")]
    Usage { stage: &'static str, message: String },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: bseg::Error,
    },
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Usage { .. } => ExitCode::from(2),
            Failure::Stage { .. } => ExitCode::from(1),
        }
    }
}

fn usage(stage: &'static str, message: impl ToString) -> Failure {
    Failure::Usage {
        stage,
        message: message.to_string(),
    }
}

trait StageExt<T> {
    /// Runtime failure in `stage`.
    fn at(self, stage: &'static str) -> Result<T, Failure>;
    /// Input-validation failure in `stage`.
    fn input(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<bseg::Error>> StageExt<T> for Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage { stage, source: e.into() })
    }

    fn input(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| usage(stage, e.into()))
    }
}

fn read_text(path: &Path, stage: &'static str) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(stage, format!("{}: {e}", path.display())))
}

fn write_manifest(m: &RunManifest) -> Result<(), Failure> {
    m.write().at("manifest")
}

pub fn run(cli: Cli) -> Result<ExitCode, Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("threads", "thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage("threads", e))?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Render(a) => render(a),
    }
}

pub fn case_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.img.mvol")), dir.join(format!("{name}.lbl.mvol")))
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode, Failure> {
    let mut spec: PhantomSpec =
        toml::from_str(&read_text(&a.spec, "spec")?).map_err(|e| usage("spec", e.message().to_string()))?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate().input("spec")?;
    if a.count == 0 {
        return Err(usage("gen-data", "--count must be at least 1"));
    }
    write_manifest(
        &RunManifest::new("gen-data", &a.out)
            .input("spec", a.spec.display())
            .input("count", a.count)
            .seed(spec.seed),
    )?;
    for i in 0..a.count {
        let case = PhantomSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..spec.clone()
        };
        let (img, lbl) = generate_phantom(&case).at("phantom")?;
        let (ip, lp) = case_paths(&a.out, &format!("case_{i:04}"));
        write_volume(&ip, &img).at("write")?;
        write_labels(&lp, &lbl).at("write")?;
        println!("{}", ip.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Every `<name>.img.mvol` in `dir` with its `<name>.lbl.mvol` partner, sorted by name.
fn list_cases(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| usage("data", format!("{}: {e}", dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".img.mvol")).map(str::to_owned))
        .collect();
    names.sort();
    let mut pairs = Vec::with_capacity(names.len());
    for n in names {
        let (ip, lp) = case_paths(dir, &n);
        if !lp.exists() {
            return Err(usage("data", format!("{} has no label partner {}", ip.display(), lp.display())));
        }
        pairs.push((ip, lp));
    }
    if pairs.is_empty() {
        return Err(usage("data", format!("no *.img.mvol files in {}", dir.display())));
    }
    Ok(pairs)
}

fn train(a: TrainArgs) -> Result<ExitCode, Failure> {
    let mut cfg: TrainConfig =
        toml::from_str(&read_text(&a.config, "config")?).map_err(|e| usage("config", e.message().to_string()))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.total_epochs = e;
    }
    if let Some(s) = a.steps_per_epoch {
        cfg.steps_per_epoch = s;
    }
    if let Some(lr) = a.lr {
        cfg.alpha0 = lr;
    }
    cfg.validate().input("config")?;
    let network = match &a.network {
        Some(p) => NetworkConfig::from_text(&read_text(p, "network")?).input("network")?,
        None => NetworkConfig::desk(),
    };
    network.validate().input("network")?;
    let resume = match &a.resume {
        Some(p) => Some(load_checkpoint_for(p, &network, &cfg).input("resume")?),
        None => None,
    };

    let mut cases = Vec::new();
    for (ip, lp) in list_cases(&a.data)? {
        let img = read_volume(&ip).input("data")?;
        let lbl = read_labels(&lp).input("data")?;
        let (img, lbl) = preprocess(&img, &lbl).input("data")?;
        cases.push(PreparedCase::new(img, lbl).input("data")?);
    }

    let mut manifest = RunManifest::new("train", &a.out)
        .input("config", a.config.display())
        .input("data", a.data.display())
        .input("cases", cases.len());
    if let Some(p) = &a.network {
        manifest = manifest.input("network", p.display());
    }
    if let Some(p) = &a.resume {
        manifest = manifest.input("resume", p.display());
    }
    write_manifest(&manifest.seed(cfg.seed))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let sampler = CropSampler::new(cases, network.input_size, rng).at("sampler")?;
    let (ck, rows) = match resume {
        Some(ck) => resume_training(&ck, sampler, &a.out).at("train")?,
        None => {
            let net = BoundaryAwareNet::<f32>::build(network, cfg.seed).at("network")?;
            run_training(cfg, net, sampler, &a.out).at("train")?
        }
    };
    if let Some(last) = rows.last() {
        println!("step {} epoch {} total loss {:.6}", ck.step, ck.epoch, last.loss.total);
    }
    Ok(ExitCode::SUCCESS)
}

fn infer(a: InferArgs) -> Result<ExitCode, Failure> {
    let paths: Vec<PathBuf> = a.checkpoint.iter().cloned().chain(a.ensemble.iter().cloned()).collect();
    if !(0.0..1.0).contains(&a.threshold) || a.threshold == 0.0 {
        return Err(usage("infer", "--threshold must lie in (0, 1)"));
    }
    if !(0.0..1.0).contains(&a.overlap) {
        return Err(usage("infer", "--overlap must lie in [0, 1)"));
    }
    let nets: Vec<BoundaryAwareNet<f32>> = paths
        .iter()
        .map(|p| load_checkpoint(p).and_then(|ck| ck.network()).input("checkpoint"))
        .collect::<Result<_, _>>()?;
    let volume = read_volume(&a.volume).input("volume")?;

    let mut manifest = RunManifest::new("infer", &a.out).input("volume", a.volume.display());
    for p in &paths {
        manifest = manifest.input("checkpoint", p.display());
    }
    write_manifest(&manifest.input("tta", a.tta).input("overlap", a.overlap).input("threshold", a.threshold))?;

    let opts = InferenceOptions {
        overlap: a.overlap,
        flips: if a.tta { Flip::all().to_vec() } else { vec![Flip::IDENTITY] },
    };
    let refs: Vec<&BoundaryAwareNet<f32>> = nets.iter().collect();
    let field = predict_case(&refs, &volume, &opts).at("predict")?;
    let labels = compose_labels(&field, a.threshold).at("threshold")?;
    let out = a.out.join(PREDICTION_FILE);
    write_labels(&out, &labels).at("write")?;
    println!("{} (ensemble {}, tta {})", out.display(), field.ensemble_size, field.tta_used);
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode, Failure> {
    let pred = read_labels(&a.pred).input("pred")?;
    let truth = read_labels(&a.truth).input("truth")?;
    let report = MetricsReport::evaluate(&pred, &truth).input("eval")?;
    let case = a.case.clone().unwrap_or_else(|| {
        let name = a.pred.file_name().and_then(|n| n.to_str()).unwrap_or("case");
        name.strip_suffix(".lbl.mvol").unwrap_or(name).to_owned()
    });
    let csv = format!("{METRICS_HEADER}\n{}\n", report.csv_row(&case));
    if let Some(out) = &a.out {
        write_manifest(
            &RunManifest::new("eval", out)
                .input("pred", a.pred.display())
                .input("truth", a.truth.display()),
        )?;
        fs::write(out.join(METRICS_FILE), &csv).at("write")?;
    }
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode, Failure> {
    if a.seeds == 0 || a.max_coords == 0 {
        return Err(usage("gradcheck", "--seeds and --max-coords must be positive"));
    }
    let entries = match a.precision {
        Precision::F64 => run_suite::<f64>(0..a.seeds, 1e-5, a.max_coords),
        Precision::F32 => run_suite::<f32>(0..a.seeds, 1e-3, a.max_coords),
    }
    .at("gradcheck")?;
    let mut worst = 0.0f64;
    for e in &entries {
        println!(
            "{:<22} {:.3e} ({} coords, {} at kinks)",
            e.op, e.max_rel_error, e.coords_checked, e.kinks_skipped
        );
        worst = if e.max_rel_error.is_nan() { f64::NAN } else { worst.max(e.max_rel_error) };
    }
    println!("max relative error: {worst:.3e}");
    Ok(if worst < GRADCHECK_TOLERANCE { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn render(a: RenderArgs) -> Result<ExitCode, Failure> {
    let volume = read_volume(&a.volume).input("volume")?;
    let labels = match &a.labels {
        Some(p) => {
            let l = read_labels(p).input("labels")?;
            if l.dims() != volume.dims() {
                return Err(usage(
                    "labels",
                    format!("label dims {:?} differ from volume dims {:?}", l.dims(), volume.dims()),
                ));
            }
            Some(l)
        }
        None => None,
    };
    let extent = axis_extent(volume.dims(), a.axis);
    let index = a.index.unwrap_or(extent / 2);
    if index >= extent {
        return Err(usage("render", format!("--index {index} outside 0..{extent}")));
    }
    let axis_name = format!("{:?}", a.axis).to_lowercase();
    let mut manifest = RunManifest::new("render", &a.out)
        .input("volume", a.volume.display())
        .input("axis", &axis_name)
        .input("index", index);
    if let Some(p) = &a.labels {
        manifest = manifest.input("labels", p.display());
    }
    write_manifest(&manifest)?;
    let img = render_slice(&volume, labels.as_ref(), a.axis, index);
    let out = a.out.join(format!("slice_{axis_name}{index:04}.png"));
    img.save(&out)
        .map_err(|e| Failure::Stage {
            stage: "write",
            source: bseg::Error::Io(std::io::Error::other(e)),
        })?;
    println!("{}", out.display());
    Ok(ExitCode::SUCCESS)
}
