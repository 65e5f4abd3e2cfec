use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use pbls::bench::{self, ScalingConfig, VerifyDemoConfig, VerifyDemoReport};
use pbls::bls::{
    BlsConfig, EnhancementActivation, FeatureActivation, LocalPinv, OutsourcedPinv, PinvBackend,
    DEFAULT_TRAIN_LAMBDA,
};
use pbls::client::{
    local_pinv, outsourced_pinv_session, OutsourceOptions, DEFAULT_LAMBDA, DEFAULT_TOLERANCE,
};
use pbls::data::{load_idx, synthetic_blobs_split, to_dataset, Dataset, Normalization};
use pbls::keygen::{generate_keys, ScaleMode};
use pbls::matrix::DenseMatrix;
use pbls::protocol::DEFAULT_PORT;
use pbls::transport::{spawn_pipe_worker, StreamTransport, Transport};
use pbls::worker::{serve_listener, CloudWorker, FaultMode};

#[derive(Parser, Debug)]
#[command(
    name = "pbls",
    version,
    about = "Verifiable outsourcing of ridge pseudoinverses for broad learning systems"
)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Seed for keys, data, model weights and verification vectors.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Scale factors of the column mask: pow2 (exact) or paper (1..=n).
    #[arg(long, global = true, default_value = "pow2")]
    scale_mode: ScaleMode,

    /// Ridge coefficient. Defaults depend on the command.
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Independent verification vectors per result.
    #[arg(long, global = true, default_value_t = 1)]
    verify_rounds: usize,

    /// Write the command's CSV output here.
    #[arg(long, global = true, value_name = "CSV")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate masking keys for an m x n input.
    Keygen(KeygenArgs),
    /// Compute the ridge pseudoinverse of a matrix, locally or outsourced.
    Pinv(PinvArgs),
    /// Client side of the outsourcing protocol.
    Client {
        #[command(subcommand)]
        command: ClientCommand,
    },
    /// Train and evaluate a broad learning system.
    Train(TrainArgs),
    /// Time the protocol over a range of input sizes.
    BenchScaling(BenchArgs),
    /// Tally verification outcomes against an honest or faulty worker.
    VerifyDemo(VerifyDemoArgs),
    /// Serve outsourced computations over TCP.
    CloudWorker(WorkerArgs),
}

#[derive(Subcommand, Debug)]
enum ClientCommand {
    /// Outsource a pseudoinverse to a remote worker.
    Pinv(ClientPinvArgs),
}

#[derive(Args, Debug)]
struct KeygenArgs {
    rows: usize,
    cols: usize,

    /// Write the keys to a file. Debugging only: the file is the secret.
    #[arg(long, value_name = "PATH")]
    export_keys: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Backend {
    Local,
    Outsourced,
}

#[derive(Args, Debug)]
struct MatrixSource {
    /// Matrix file: binary (u64 rows, u64 cols, f64 values, little endian)
    /// or text with one row per line.
    #[arg(long, value_name = "PATH", conflicts_with = "random")]
    input: Option<PathBuf>,

    /// Use a uniform random matrix of this shape, e.g. 300x200.
    #[arg(long, value_name = "ROWSxCOLS")]
    random: Option<String>,
}

#[derive(Args, Debug)]
struct PinvArgs {
    #[command(flatten)]
    source: MatrixSource,

    #[arg(long, value_enum, default_value = "local")]
    backend: Backend,

    /// Remote worker address. Without it the outsourced backend uses a
    /// worker thread in this process.
    #[arg(long)]
    worker: Option<String>,

    /// Fault mode of the in-process worker.
    #[arg(long, default_value = "honest")]
    fault_mode: FaultMode,

    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct ClientPinvArgs {
    #[command(flatten)]
    source: MatrixSource,

    #[arg(long)]
    worker: String,

    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Train on Gaussian blobs instead of IDX files.
    #[arg(long)]
    synthetic: bool,

    #[arg(long, value_name = "PATH", requires = "train_labels")]
    train_images: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "train_images")]
    train_labels: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "test_labels")]
    test_images: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "test_images")]
    test_labels: Option<PathBuf>,

    /// Use only the first N training samples.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,

    #[arg(long)]
    classes: Option<usize>,

    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,

    #[arg(long, default_value_t = 2)]
    feature_groups: usize,
    #[arg(long, default_value_t = 5)]
    feature_nodes: usize,
    #[arg(long, default_value_t = 2)]
    enhancement_groups: usize,
    #[arg(long, default_value_t = 10)]
    enhancement_nodes: usize,
    #[arg(long, default_value = "linear")]
    feature_activation: FeatureActivation,
    #[arg(long, default_value = "tanh")]
    enhancement_activation: EnhancementActivation,

    #[arg(long, value_enum, default_value = "local")]
    backend: Backend,
    #[arg(long)]
    worker: Option<String>,
    /// Fault mode of the in-process worker.
    #[arg(long, default_value = "honest")]
    fault_mode: FaultMode,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,

    /// Save the trained model.
    #[arg(long, value_name = "PATH")]
    save_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Column counts; inputs have 1.5x as many rows.
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SIZES)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = bench::MIN_REPETITIONS)]
    reps: usize,
    /// Skip timing the all-local computation.
    #[arg(long)]
    no_local_baseline: bool,
}

#[derive(Args, Debug)]
struct VerifyDemoArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value = "honest")]
    fault_mode: FaultMode,
    /// Shorthand for --fault-mode perturb:<EPS>.
    #[arg(long, conflicts_with = "fault_mode")]
    eps: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 8)]
    min_cols: usize,
    #[arg(long, default_value_t = 32)]
    max_cols: usize,
}

#[derive(Args, Debug)]
struct WorkerArgs {
    /// Address to bind. Defaults to 127.0.0.1 on PBLS_PORT.
    #[arg(long, value_name = "ADDR:PORT")]
    listen: Option<String>,
    #[arg(long, env = "PBLS_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = "PBLS_FAULT_MODE", default_value = "honest")]
    fault_mode: FaultMode,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    if g.verify_rounds == 0 {
        bail!("--verify-rounds must be at least 1");
    }
    match cli.command {
        Command::Keygen(args) => keygen(&g, args),
        Command::Pinv(args) => pinv(&g, args),
        Command::Client {
            command: ClientCommand::Pinv(args),
        } => pinv(
            &g,
            PinvArgs {
                source: args.source,
                backend: Backend::Outsourced,
                worker: Some(args.worker),
                fault_mode: FaultMode::Honest,
                tolerance: args.tolerance,
            },
        ),
        Command::Train(args) => train(&g, args),
        Command::BenchScaling(args) => bench_scaling(&g, args),
        Command::VerifyDemo(args) => verify_demo(&g, args),
        Command::CloudWorker(args) => cloud_worker(&g, args),
    }
}

fn keygen(g: &Global, args: KeygenArgs) -> Result<()> {
    let keys = generate_keys(args.rows, args.cols, g.seed, g.scale_mode)?;
    let scales = keys.q().scales();
    println!(
        "keys for {}x{} (seed {}, scale mode {}): column scales in [{}, {}]",
        args.rows,
        args.cols,
        g.seed,
        g.scale_mode,
        scales.iter().min().copied().unwrap_or(0),
        scales.iter().max().copied().unwrap_or(0),
    );
    if let Some(path) = args.export_keys {
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        keys.export(&mut w)?;
        w.flush()?;
        eprintln!(
            "warning: {} holds secret key material in the clear",
            path.display()
        );
    }
    Ok(())
}

/// Appends a port when `addr` has none.
fn worker_addr(addr: &str) -> String {
    let has_port = addr.rsplit_once(':').is_some_and(|(host, port)| {
        port.parse::<u16>().is_ok() && (!host.contains(':') || host.ends_with(']'))
    });
    if has_port {
        addr.to_string()
    } else {
        let port = std::env::var("PBLS_PORT")
            .ok()
            .and_then(|p| p.parse::<u16>().ok())
            .unwrap_or(DEFAULT_PORT);
        format!("{addr}:{port}")
    }
}

fn connect(addr: &str) -> Result<Box<dyn Transport>> {
    let addr = worker_addr(addr);
    let t = StreamTransport::connect(&addr)
        .with_context(|| format!("connecting to worker at {addr}"))?;
    Ok(Box::new(t))
}

fn transport_for(worker: Option<&str>, fault: FaultMode, seed: u64) -> Result<Box<dyn Transport>> {
    match worker {
        Some(addr) => connect(addr),
        None => Ok(Box::new(spawn_pipe_worker(CloudWorker::new(fault, seed)).0)),
    }
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    Ok((r.trim().parse()?, c.trim().parse()?))
}

fn parse_text_matrix(text: &str) -> Result<DenseMatrix> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, line)| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .with_context(|| format!("row {}: bad number {t:?}", i + 1))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(DenseMatrix::from_rows(&rows)?)
}

fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(m) = DenseMatrix::from_bytes(&bytes) {
        return Ok(m);
    }
    let text = std::str::from_utf8(&bytes).context("matrix file is neither binary nor text")?;
    parse_text_matrix(text).with_context(|| format!("parsing {}", path.display()))
}

fn load_matrix(source: &MatrixSource, seed: u64) -> Result<DenseMatrix> {
    match (&source.input, &source.random) {
        (Some(path), _) => read_matrix(path),
        (None, Some(shape)) => {
            let (r, c) = parse_shape(shape)?;
            if r == 0 || c == 0 {
                bail!("matrix shape must be nonempty");
            }
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            Ok(DenseMatrix::random_uniform(r, c, &mut rng))
        }
        (None, None) => bail!("pass --input <matrix-file> or --random <ROWSxCOLS>"),
    }
}

fn write_matrix_csv(path: &Path, m: &DenseMatrix) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn pinv(g: &Global, args: PinvArgs) -> Result<()> {
    let a = load_matrix(&args.source, g.seed)?;
    let lambda = g.lambda.unwrap_or(DEFAULT_LAMBDA);
    let started = Instant::now();
    let result = match args.backend {
        Backend::Local => {
            let r = local_pinv(&a, lambda)?;
            println!(
                "local pinv of {}x{} (lambda {lambda:e}) in {:.3} ms",
                a.rows(),
                a.cols(),
                started.elapsed().as_secs_f64() * 1e3
            );
            r
        }
        Backend::Outsourced => {
            let mut transport = transport_for(args.worker.as_deref(), args.fault_mode, g.seed)?;
            let keys = generate_keys(a.rows(), a.cols(), g.seed, g.scale_mode)?;
            let options = OutsourceOptions {
                verify_rounds: g.verify_rounds,
                tolerance: args.tolerance,
                retries: 0,
                seed: g.seed,
            };
            let session = outsourced_pinv_session(&a, lambda, &keys, &mut transport, &options)?;
            let report = session.report().expect("accepted sessions carry a report");
            let ops = session.ops();
            let (sent, received) = transport.traffic();
            println!(
                "outsourced pinv of {}x{} (lambda {lambda:e}) in {:.3} ms: accepted, residual {:e} <= {:e} over {} round(s)",
                a.rows(),
                a.cols(),
                started.elapsed().as_secs_f64() * 1e3,
                report.max_residual,
                report.tolerance,
                report.rounds,
            );
            println!(
                "client ops: transform {} recover {} verify {}; traffic: {sent} bytes sent, {received} received",
                ops.transform, ops.recover, ops.verify
            );
            session.r4().expect("accepted sessions carry R4").clone()
        }
    };
    if let Some(path) = &g.out {
        write_matrix_csv(path, &result)?;
    }
    Ok(())
}

const TRAIN_HEADER: &str =
    "backend,seed,feature_nodes,enhancement_nodes,total_nodes,train_samples,train_ms,train_accuracy,test_accuracy";

fn load_training_data(g: &Global, args: &TrainArgs) -> Result<(Dataset, Option<Dataset>)> {
    if args.synthetic {
        let classes = args.classes.unwrap_or(2);
        let (train, test) = synthetic_blobs_split(
            classes,
            args.samples_per_class,
            args.test_per_class,
            args.dim,
            args.separation,
            g.seed,
        )?;
        return Ok((train, Some(test)));
    }
    let (Some(images), Some(labels)) = (&args.train_images, &args.train_labels) else {
        bail!(
            "pass --synthetic or --train-images/--train-labels; MNIST IDX files are available from \
             the usual mirrors and must be decompressed first"
        );
    };
    let classes = args.classes.unwrap_or(10);
    let mut raw = load_idx(images, labels, classes)?;
    if let Some(n) = args.limit {
        raw = raw.take(n);
    }
    let train = to_dataset(&raw, Normalization::Fit)?;
    let test = match (&args.test_images, &args.test_labels) {
        (Some(images), Some(labels)) => {
            let raw = load_idx(images, labels, classes)?;
            Some(to_dataset(
                &raw,
                Normalization::Using(train.scaling.clone()),
            )?)
        }
        _ => None,
    };
    Ok((train, test))
}

fn append_csv(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(file, "{header}")?;
    }
    writeln!(file, "{row}")?;
    Ok(())
}

fn train(g: &Global, args: TrainArgs) -> Result<()> {
    let (train_set, test_set) = load_training_data(g, &args)?;
    let config = BlsConfig {
        feature_groups: args.feature_groups,
        nodes_per_feature_group: args.feature_nodes,
        enhancement_groups: args.enhancement_groups,
        nodes_per_enhancement_group: args.enhancement_nodes,
        lambda: g.lambda.unwrap_or(DEFAULT_TRAIN_LAMBDA),
        seed: g.seed,
        feature_activation: args.feature_activation,
        enhancement_activation: args.enhancement_activation,
        ..BlsConfig::default()
    };
    config.validate()?;

    let mut backend: Box<dyn PinvBackend> = match args.backend {
        Backend::Local => Box::new(LocalPinv),
        Backend::Outsourced => {
            let transport = transport_for(args.worker.as_deref(), args.fault_mode, g.seed)?;
            let options = OutsourceOptions {
                verify_rounds: g.verify_rounds,
                tolerance: args.tolerance,
                retries: 0,
                seed: g.seed,
            };
            Box::new(OutsourcedPinv::new(
                transport,
                g.scale_mode,
                g.seed,
                options,
            ))
        }
    };
    let started = Instant::now();
    let model = pbls::bls::train(&train_set, &config, backend.as_mut())?;
    let train_time = started.elapsed();
    let train_acc = model.evaluate(&train_set)?;
    let test_acc = test_set.as_ref().map(|t| model.evaluate(t)).transpose()?;

    let row = format!(
        "{},{},{},{},{},{},{:.3},{:.4},{}",
        backend.name(),
        g.seed,
        config.feature_width(),
        config.enhancement_width(),
        config.total_nodes(),
        train_set.len(),
        train_time.as_secs_f64() * 1e3,
        train_acc,
        test_acc.map(|a| format!("{a:.4}")).unwrap_or_default(),
    );
    println!("{TRAIN_HEADER}");
    println!("{row}");
    if let Some(path) = &g.out {
        append_csv(path, TRAIN_HEADER, &row)?;
    }
    if let Some(path) = &args.save_model {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        model.save(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn bench_scaling(g: &Global, args: BenchArgs) -> Result<()> {
    if args.reps < bench::MIN_REPETITIONS {
        eprintln!(
            "warning: {} repetition(s) is below the recommended {}",
            args.reps,
            bench::MIN_REPETITIONS
        );
    }
    let config = ScalingConfig {
        sizes: args.sizes,
        repetitions: args.reps,
        seed: g.seed,
        scale_mode: g.scale_mode,
        lambda: g.lambda.unwrap_or(DEFAULT_LAMBDA),
        verify_rounds: g.verify_rounds,
        local_baseline: !args.no_local_baseline,
    };
    let rows = bench::run_scaling(&config)?;
    match &g.out {
        Some(path) => {
            let file =
                File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            bench::write_scaling_csv(&mut w, &rows)?;
            w.flush()?;
        }
        None => bench::write_scaling_csv(io::stdout().lock(), &rows)?,
    }
    if rows.len() >= 2 {
        let (client, worker) = bench::scaling_slopes(&rows)?;
        eprintln!("log-log slope of op counts: client {client:.3}, worker {worker:.3}");
    }
    Ok(())
}

const VERIFY_HEADER: &str =
    "fault_mode,trials,verify_rounds,tolerance,accepted,rejected,min_residual,max_residual";

fn verify_demo(g: &Global, args: VerifyDemoArgs) -> Result<()> {
    let config = VerifyDemoConfig {
        trials: args.trials,
        fault: args.eps.map(FaultMode::Perturb).unwrap_or(args.fault_mode),
        verify_rounds: g.verify_rounds,
        tolerance: args.tolerance,
        lambda: g.lambda.unwrap_or(DEFAULT_LAMBDA),
        seed: g.seed,
        scale_mode: g.scale_mode,
        min_cols: args.min_cols,
        max_cols: args.max_cols,
    };
    let report = bench::verify_demo(&config)?;
    println!(
        "{} trials against a {} worker: {} accepted, {} rejected",
        report.trials, config.fault, report.accepted, report.rejected
    );
    println!(
        "residuals: min {:e}, max {:e}",
        report.min_residual, report.max_residual
    );
    if let Some(note) = VerifyDemoReport::limitation(&config) {
        println!("{note}");
    }
    if let Some(path) = &g.out {
        let row = format!(
            "{},{},{},{:e},{},{},{:e},{:e}",
            config.fault,
            report.trials,
            config.verify_rounds,
            config.tolerance,
            report.accepted,
            report.rejected,
            report.min_residual,
            report.max_residual
        );
        append_csv(path, VERIFY_HEADER, &row)?;
    }
    Ok(())
}

fn cloud_worker(g: &Global, args: WorkerArgs) -> Result<()> {
    let addr = args
        .listen
        .unwrap_or_else(|| format!("127.0.0.1:{}", args.port));
    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
    let local = listener.local_addr()?;
    {
        let mut out = io::stdout().lock();
        writeln!(out, "listening on {local} ({})", args.fault_mode)?;
        out.flush()?;
    }
    serve_listener(listener, args.fault_mode, g.seed)?;
    Ok(())
}
