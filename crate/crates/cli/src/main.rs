//! `s2nn`: quantize, pack, run and analyze sub-bit spiking models.
//!
//! Every table goes to stdout as CSV with a header row; tables are separated
//! by one blank line and free-text summary lines start with `# `.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use s2nn::binarize::{channel_scales, sign_binarize, DenseConvWeights};
use s2nn::codebook::{cluster_stats, cluster_table, sample_codebook};
use s2nn::costmodel::{
    energy_estimate, energy_table, summary, traffic_report, traffic_table, DEFAULT_BUS_WIDTH,
    DEFAULT_E_AC_PJ, DEFAULT_E_MAC_PJ,
};
use s2nn::engine::{run_binary, run_packed, InferenceOutput};
use s2nn::io::{rate_encode, read_input, read_weights};
use s2nn::neuron::LifConfig;
use s2nn::osquant::{
    outlier_occurrence, outlier_rows, quantize_layer, OmegaPolicy, Quantizer, DEFAULT_GAMMA,
    OUTLIER_HEADER,
};
use s2nn::pack::{dump_header, pack, read_model, unpack, write_model, QuantizedLayer};
use s2nn::tensor::Tensor4;
use s2nn::train::{
    load_net, metrics_csv, save_checkpoint, synthetic_dataset, train_toy, ConvSpec, ToyNetSpec,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "s2nn",
    version,
    about = "Sub-bit spiking network compression toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a dense-weight file into a packed `.s2nn` model.
    Quantize {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        eta: u32,
        /// Fence coefficient; `inf` disables outlier detection.
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
        /// Plain nearest-codeword assignment.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: PathBuf,
        /// Codebook sampling seed; layer `l` uses `seed + l`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate a packed model, optionally print its header or rewrite it.
    Pack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dump_header: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a packed model on rate-coded input and print logits and counters.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "T")]
        t: usize,
        /// Rate-coding seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the reference binary convolution on reconstructed weights.
        #[arg(long)]
        reference: bool,
    },
    /// Codeword clustering and outlier statistics of dense weights.
    Analyze {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
    },
    /// Weight traffic, energy and operation counts of a packed model.
    Report {
        #[arg(long)]
        model: PathBuf,
        /// `H,W`, `C,H,W` or `B,C,H,W`; only `C`, `H` and `W` are used.
        #[arg(long)]
        input_shape: String,
        #[arg(long = "T")]
        t: usize,
        #[arg(long)]
        fr: f64,
        #[arg(long, default_value_t = DEFAULT_BUS_WIDTH)]
        bus_width: usize,
        #[arg(long, default_value_t = DEFAULT_E_MAC_PJ)]
        e_mac: f64,
        #[arg(long, default_value_t = DEFAULT_E_AC_PJ)]
        e_ac: f64,
    },
    /// Train the toy network described by a TOML file.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> Result<()> {
    init_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Quantize {
            weights,
            eta,
            gamma,
            baseline,
            out,
            seed,
        } => quantize(&weights, eta, gamma, baseline, &out, seed),
        Command::Pack {
            model,
            dump_header,
            out,
        } => pack_cmd(&model, dump_header, out.as_deref()),
        Command::Infer {
            model,
            input,
            t,
            seed,
            reference,
        } => infer(&model, &input, t, seed, reference),
        Command::Analyze { weights, gamma } => analyze(&weights, gamma),
        Command::Report {
            model,
            input_shape,
            t,
            fr,
            bus_width,
            e_mac,
            e_ac,
        } => report(&model, &input_shape, t, fr, bus_width, e_mac, e_ac),
        Command::TrainToy { config } => train(&config),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("S2NN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .with_context(|| format!("S2NN_THREADS={v:?} is not a positive integer"))?;
    ensure!(n > 0, "S2NN_THREADS must be positive");
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn load_weights(path: &Path) -> Result<Vec<DenseConvWeights>> {
    read_weights(path).with_context(|| format!("reading weights {}", path.display()))
}

fn load_model(path: &Path) -> Result<Vec<QuantizedLayer>> {
    read_model(path).with_context(|| format!("reading model {}", path.display()))
}

fn quantize(
    weights: &Path,
    eta: u32,
    gamma: f64,
    baseline: bool,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let layers = load_weights(weights)?;
    ensure!(!layers.is_empty(), "{} holds no layers", weights.display());
    let quantizer = if baseline {
        Quantizer::Baseline
    } else {
        Quantizer::OsQuant { gamma }
    };
    let mut packed = Vec::with_capacity(layers.len());
    println!("layer,c_out,c_in,k_h,k_w,eta,bits_per_weight,exact_ratio,outlier_frac");
    for (l, w) in layers.iter().enumerate() {
        let s = w.shape;
        s.check_compressible()
            .with_context(|| format!("layer {l}"))?;
        let cb = sample_codebook(s.k_w, s.k_h, eta, seed.wrapping_add(l as u64))
            .with_context(|| format!("layer {l}"))?;
        let a = quantize_layer(w, &cb, quantizer, OmegaPolicy::SkipDegenerate)
            .with_context(|| format!("layer {l}"))?;
        let alpha = channel_scales(w).iter().map(|&v| v as f32).collect();
        let q = QuantizedLayer::new(&cb, s, a.indices, alpha)?;
        let ratio = q.compression_ratio();
        println!(
            "{l},{},{},{},{},{eta},{:.6},{:.6},{:.6}",
            s.c_out,
            s.c_in,
            s.k_h,
            s.k_w,
            ratio.asymptotic,
            ratio.exact,
            outlier_occurrence(w, gamma)?
        );
        packed.push(q);
    }
    write_model(out, &packed).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn pack_cmd(model: &Path, dump: bool, out: Option<&Path>) -> Result<()> {
    let bytes =
        std::fs::read(model).with_context(|| format!("reading model {}", model.display()))?;
    let layers = unpack(&bytes).with_context(|| format!("decoding {}", model.display()))?;
    if dump {
        print!("{}", dump_header(&bytes)?);
    } else {
        println!("layers,bytes");
        println!("{},{}", layers.len(), bytes.len());
    }
    if let Some(out) = out {
        std::fs::write(out, pack(&layers)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn print_inference(out: &InferenceOutput) {
    println!("sample,class,logit");
    for (b, row) in out.logits.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            println!("{b},{c},{v:.9}");
        }
    }
    println!();
    println!("multiplies,adds,lut_hits");
    let c = out.counters;
    println!("{},{},{}", c.multiplies, c.adds, c.lut_hits);
}

fn infer(model: &Path, input: &Path, t: usize, seed: u64, reference: bool) -> Result<()> {
    ensure!(t > 0, "--T must be positive");
    let layers = load_model(model)?;
    let x = read_input(input).with_context(|| format!("reading input {}", input.display()))?;
    let spikes = rate_encode(&x, t, seed);
    let lif = LifConfig::default();
    let out = if reference {
        let binary: Vec<_> = layers.iter().map(|q| q.reconstruct()).collect();
        run_binary(&binary, &[], &lif, &spikes)?
    } else {
        run_packed(&layers, &[], &lif, &spikes)?
    };
    print_inference(&out);
    Ok(())
}

fn analyze(weights: &Path, gamma: f64) -> Result<()> {
    let layers = load_weights(weights)?;
    let stats = layers
        .iter()
        .map(|w| cluster_stats(&sign_binarize(w)))
        .collect::<s2nn::Result<Vec<_>>>()?;
    let entries: Vec<_> = stats
        .iter()
        .zip(&layers)
        .enumerate()
        .map(|(l, (s, w))| (l, s, w.shape.kernel_len()))
        .collect();
    print!("{}", cluster_table(&entries));
    println!();
    println!("layer,kernels,outlier_frac");
    let eligible: Vec<_> = layers
        .iter()
        .enumerate()
        .filter(|(_, w)| w.shape.check_compressible().is_ok())
        .collect();
    for &(l, w) in &eligible {
        println!(
            "{l},{},{:.6}",
            w.shape.kernels(),
            outlier_occurrence(w, gamma)?
        );
    }
    println!();
    println!("{OUTLIER_HEADER}");
    for &(l, w) in &eligible {
        print!("{}", outlier_rows(l, w, gamma)?);
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<(Option<usize>, usize, usize)> {
    let dims = s
        .split([',', 'x'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("--input-shape {s:?} is not a list of integers"))?;
    match dims.as_slice() {
        [h, w] => Ok((None, *h, *w)),
        [c, h, w] | [_, c, h, w] => Ok((Some(*c), *h, *w)),
        _ => bail!("--input-shape {s:?} needs 2 to 4 dimensions"),
    }
}

#[allow(clippy::too_many_arguments)]
fn report(
    model: &Path,
    shape: &str,
    t: usize,
    fr: f64,
    bus: usize,
    e_mac: f64,
    e_ac: f64,
) -> Result<()> {
    let layers = load_model(model)?;
    ensure!(!layers.is_empty(), "{} holds no layers", model.display());
    let (c, h, w) = parse_shape(shape)?;
    let c_in = layers[0].shape.c_in;
    if let Some(c) = c {
        ensure!(
            c == c_in,
            "--input-shape has {c} channels, the model expects {c_in}"
        );
    }
    let traffic = traffic_report(&layers, bus)?;
    let shapes: Vec<_> = layers.iter().map(|q| q.shape).collect();
    let energy = energy_estimate(&shapes, h, w, t, fr, e_mac, e_ac)?;
    print!("{}", traffic_table(&traffic));
    println!();
    print!("{}", energy_table(&energy));
    println!();
    // counters on uniform rate-coded input at the given firing rate
    let spikes = rate_encode(&Tensor4::filled((1, c_in, h, w), fr), t, 0);
    let lif = LifConfig::default();
    let sub = run_packed(&layers, &[], &lif, &spikes)?.counters;
    let binary: Vec<_> = layers.iter().map(|q| q.reconstruct()).collect();
    let full = run_binary(&binary, &[], &lif, &spikes)?.counters;
    println!("path,multiplies,adds,lut_hits");
    println!("subbit,{},{},{}", sub.multiplies, sub.adds, sub.lut_hits);
    println!("binary,{},{},{}", full.multiplies, full.adds, full.lut_hits);
    println!();
    for line in summary(&traffic, &energy).lines() {
        println!("# {line}");
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataConfig {
    samples: usize,
    timesteps: usize,
    seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples: 200,
            timesteps: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetConfig {
    convs: Vec<ConvSpec>,
    #[serde(default = "two")]
    classes: usize,
}

fn two() -> usize {
    2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyConfig {
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    data: DataConfig,
    net: Option<NetConfig>,
    /// JSON sidecar of a trained net.
    teacher: Option<PathBuf>,
    /// Where to also write the metrics CSV.
    metrics: Option<PathBuf>,
    /// Path stem for the `.s2nn` model and `.json` sidecar.
    checkpoint: Option<PathBuf>,
}

fn train(config: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config)
        .with_context(|| format!("reading config {}", config.display()))?;
    let cfg: ToyConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", config.display()))?;
    let base = config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &PathBuf| {
        if p.is_absolute() {
            p.clone()
        } else {
            base.join(p)
        }
    };

    let data = synthetic_dataset(cfg.data.samples, cfg.data.timesteps, cfg.data.seed);
    let spec = match &cfg.net {
        Some(n) => ToyNetSpec::new(data.input, n.convs.clone(), n.classes, cfg.data.timesteps),
        None => ToyNetSpec::two_conv(cfg.data.timesteps),
    };
    let teacher = cfg
        .teacher
        .as_ref()
        .map(|p| load_net(resolve(p)).with_context(|| format!("loading teacher {}", p.display())))
        .transpose()?;
    let outcome = train_toy(&spec, &cfg.train, &data, teacher.as_ref())?;
    let csv = metrics_csv(&outcome.metrics);
    print!("{csv}");
    if let Some(p) = &cfg.metrics {
        let p = resolve(p);
        std::fs::write(&p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(stem) = &cfg.checkpoint {
        let stem = resolve(stem);
        let (model, sidecar) = save_checkpoint(&stem, &outcome.net, cfg.train.quantizer())
            .with_context(|| format!("writing checkpoint {}", stem.display()))?;
        eprintln!("wrote {} and {}", model.display(), sidecar.display());
    }
    Ok(())
}
