use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hamcorr::checks::{run_all, Scale};
use hamcorr::datagen::{gen_dataset, load_sample, DatasetManifest, GeneratorConfig, Split, TrainSample};
use hamcorr::hamiltonian::BlockSparseHamiltonian;
use hamcorr::lattice::KPath;
use hamcorr::model::{Model, ModelConfig};
use hamcorr::spectra::{bands, write_band_csv, BandSet};
use hamcorr::trainkit::{
    ablation_table, default_kpath, evaluate, evaluate_predictions, predicted_hamiltonian, prepare_all, run_variant,
    train, AblationRow, EvalReport, Prepared, TrainConfig, Variant,
};
use hamcorr::{Error, Result};

/// Equivariant Hamiltonian correction: data generation, training, evaluation and checks.
#[derive(Parser, Debug)]
#[command(name = "hamcorr", version)]
struct Cli {
    /// Seed for generation, initialization and shuffling; overrides seeds in --config.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads for per-sample and per-k sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// JSON file with optional `generator`, `model` and `train` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Machine-readable output on stdout and errors as JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(DataArgs),
    /// Gauge-MAE report of a checkpoint (or of H0) on one split.
    Eval(EvalArgs),
    /// Band CSV for the ground truth, H0 and a prediction of one sample.
    Bands(BandsArgs),
    /// Train ablation variants next to the full method and compare.
    Ablate(AblateArgs),
    /// Run the invariant suite.
    Check(CheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 40)]
    n_val: usize,
    #[arg(long, default_value_t = 60)]
    n_test: usize,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint; required unless --h0.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate H0 itself as the prediction.
    #[arg(long, conflicts_with = "checkpoint")]
    h0: bool,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug)]
struct BandsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Sample name from the manifest, e.g. test_0003.
    #[arg(long)]
    sample: String,
    #[arg(long, conflicts_with = "pred")]
    checkpoint: Option<PathBuf>,
    /// Hamiltonian file used as the prediction.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Fractional k-points separated by ';', e.g. "0,0,0;0.5,0,0;0.5,0.5,0".
    #[arg(long)]
    kpath: Option<String>,
    /// Points per path segment.
    #[arg(long, default_value_t = 40)]
    points: usize,
    /// Also write a gnuplot script next to the CSV.
    #[arg(long)]
    gnuplot: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// input, output, tracegrad, ensemble, loss_k, loss_pq or all.
    #[arg(long, default_value = "all")]
    variant: String,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Reduced problem sizes.
    #[arg(long)]
    quick: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    generator: GeneratorConfig,
    model: ModelConfig,
    train: TrainConfig,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train, val or test")),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::parse("", e.to_string()))?
        }
        None => RunConfig::default(),
    };
    cfg.generator.seed = cli.seed;
    cfg.train.seed = cli.seed;
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Configuration("this command needs --out <dir>".into()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(&root.join("manifest.json"))?;
    m.validate(root)?;
    Ok(m)
}

/// Prepared samples without the k-space cache.
fn prepare_plain(model: &Model, samples: Vec<TrainSample>, cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    let mut c = cfg.clone();
    c.weights.lambda_p = 0.0;
    c.weights.lambda_q = 0.0;
    c.weights.lambda_pq = 0.0;
    prepare_all(model, samples, &c)
}

fn emit(cli: &Cli, text: String, value: &impl Serialize) {
    if cli.json {
        println!("{}", to_json(value));
    } else {
        print!("{text}");
    }
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = require_out(cli)?;
    let m = gen_dataset(&cfg.generator, a.n_train, a.n_val, a.n_test, out)?;
    let text = format!(
        "wrote {} samples ({} / {} / {}) to {}\n",
        m.samples.len(),
        a.n_train,
        a.n_val,
        a.n_test,
        out.display()
    );
    emit(cli, text, &serde_json::json!({"samples": m.samples.len(), "out": out}));
    Ok(())
}

fn cmd_train(cli: &Cli, a: &DataArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = require_out(cli)?;
    let m = load_manifest(&a.data)?;
    let mut model = Model::new(cfg.model.clone(), m.generator_basis()?, cli.seed)?;
    let tr = prepare_all(&model, m.load_split(&a.data, Split::Train)?, &cfg.train)?;
    let va = prepare_all(&model, m.load_split(&a.data, Split::Val)?, &cfg.train)?;
    let summary = train(&mut model, &cfg.train, &tr, &va, Some(out))?;
    write(&out.join("summary.json"), &to_json(&summary))?;
    let text = format!(
        "{} steps; best validation Gauge MAE {:.3} meV at epoch {}; checkpoints in {}\n",
        summary.steps,
        summary.best_val_mev,
        summary.best_epoch,
        out.display()
    );
    emit(cli, text, &summary);
    Ok(())
}

fn write_report(cli: &Cli, r: &EvalReport) -> Result<()> {
    if let Some(out) = &cli.out {
        write(&out.join("report.txt"), &r.to_text())?;
        write(&out.join("report.csv"), &r.to_csv())?;
        write(&out.join("report.json"), &to_json(r))?;
    }
    emit(cli, r.to_text(), r);
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let m = load_manifest(&a.data)?;
    let samples = m.load_split(&a.data, a.split)?;
    let report = if a.h0 {
        let refs: Vec<&TrainSample> = samples.iter().collect();
        let preds: Vec<BlockSparseHamiltonian> = samples.iter().map(|s| s.h0.clone()).collect();
        evaluate_predictions(&refs, &preds, &cfg.train)?
    } else {
        let ckpt = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Configuration("eval needs --checkpoint or --h0".into()))?;
        let (model, _) = Model::load(ckpt)?;
        let prep = prepare_plain(&model, samples, &cfg.train)?;
        evaluate(&model, &prep, &cfg.train, &[])?
    };
    write_report(cli, &report)
}

fn parse_kpath(s: &str, points: usize) -> Result<KPath> {
    let pts: Vec<[f64; 3]> = s
        .split(';')
        .map(|p| {
            let v: Vec<f64> = p
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Configuration(format!("bad k-point {p:?}: {e}")))?;
            <[f64; 3]>::try_from(v).map_err(|_| Error::Configuration(format!("k-point {p:?} needs three coordinates")))
        })
        .collect::<Result<_>>()?;
    if pts.len() < 2 {
        return Err(Error::Configuration("a k-path needs at least two points".into()));
    }
    KPath::through(&pts, points)
}

const GNUPLOT: &str = "set datafile separator ','
set key autotitle columnhead
set ylabel 'Energy (eV)'
plot for [src in 'gt h0 pred'] 'bands.csv' using (strcol(7) eq src ? $1 : NaN):6 with points pt 7 ps 0.4 title src
";

fn cmd_bands(cli: &Cli, a: &BandsArgs) -> Result<()> {
    let out = require_out(cli)?;
    let m = load_manifest(&a.data)?;
    let rec = m
        .samples
        .iter()
        .find(|r| r.name == a.sample)
        .ok_or_else(|| Error::Configuration(format!("sample {:?} is not in the manifest", a.sample)))?;
    let smp = load_sample(&rec.paths(&a.data), rec.fermi_level_ev)?;
    let path = match &a.kpath {
        Some(s) => parse_kpath(s, a.points)?,
        None => default_kpath(a.points)?,
    };
    let gt = bands(&smp.ht, &smp.s, &smp.structure, &path)?;
    let h0 = bands(&smp.h0, &smp.s, &smp.structure, &path)?;
    let pred_h = match (&a.checkpoint, &a.pred) {
        (Some(c), _) => {
            let (model, _) = Model::load(c)?;
            let prep = prepare_plain(&model, vec![smp.clone()], &TrainConfig::default())?;
            let p = model.predict(&prep[0].input)?;
            Some(predicted_hamiltonian(&model, &prep[0], &p)?)
        }
        (None, Some(p)) => {
            let (h, is_overlap) = BlockSparseHamiltonian::load(p)?;
            if is_overlap {
                return Err(Error::Validation(format!("{} holds an overlap, not a Hamiltonian", p.display())));
            }
            Some(h)
        }
        (None, None) => None,
    };
    let pred = pred_h.map(|h| bands(&h, &smp.s, &smp.structure, &path)).transpose()?;
    let mut sources: Vec<(&str, &BandSet)> = vec![("gt", &gt), ("h0", &h0)];
    if let Some(p) = &pred {
        sources.push(("pred", p));
    }
    let mut buf = Vec::new();
    write_band_csv(&mut buf, &sources).map_err(|e| Error::io(out.join("bands.csv"), e))?;
    write(&out.join("bands.csv"), &String::from_utf8(buf).expect("ascii csv"))?;
    if a.gnuplot {
        write(&out.join("bands.gp"), GNUPLOT)?;
    }
    let text = format!(
        "{} k-points, {} bands, sources {} -> {}\n",
        gt.samples.len(),
        gt.energies.first().map_or(0, |e| e.len()),
        sources.iter().map(|s| s.0).collect::<Vec<_>>().join(","),
        out.join("bands.csv").display()
    );
    emit(cli, text, &serde_json::json!({"kpoints": gt.samples.len(), "csv": out.join("bands.csv")}));
    Ok(())
}

fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = require_out(cli)?;
    let variants: Vec<Variant> = if a.variant == "all" {
        Variant::ABLATIONS.to_vec()
    } else {
        vec![Variant::parse(&a.variant)?]
    };
    let m = load_manifest(&a.data)?;
    let basis = m.generator_basis()?;
    let (tr, va, te) = (
        m.load_split(&a.data, Split::Train)?,
        m.load_split(&a.data, Split::Val)?,
        m.load_split(&a.data, Split::Test)?,
    );
    let mut rows: Vec<AblationRow> = Vec::new();
    for v in std::iter::once(Variant::Full).chain(variants) {
        let dir = out.join(serde_json::to_value(v).expect("variant").as_str().expect("string tag"));
        rows.push(run_variant(v, &cfg.model, &cfg.train, &basis, (&tr, &va, &te), Some(&dir))?);
    }
    let table = ablation_table(&rows);
    write(&out.join("ablation.txt"), &table)?;
    write(&out.join("ablation.json"), &to_json(&rows))?;
    emit(cli, table, &rows);
    Ok(())
}

fn cmd_check(cli: &Cli, a: &CheckArgs) -> Result<bool> {
    let scale = if a.quick { Scale::quick() } else { Scale::full() };
    let results = run_all(&scale);
    let ok = results.iter().all(|r| r.passed);
    let text: String = results.iter().map(|r| format!("{r}\n")).collect();
    if let Some(out) = &cli.out {
        write(&out.join("check.json"), &to_json(&results))?;
    }
    emit(cli, text, &results);
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| Error::Configuration(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a).map(|_| true),
        Command::Train(a) => cmd_train(cli, a).map(|_| true),
        Command::Eval(a) => cmd_eval(cli, a).map(|_| true),
        Command::Bands(a) => cmd_bands(cli, a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(cli, a).map(|_| true),
        Command::Check(a) => cmd_check(cli, a),
    }
}

fn main() -> ExitCode {
    let json = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            if json {
                let v = serde_json::json!({"error": {"kind": "usage", "message": e.to_string()}});
                eprintln!("{v}");
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            if cli.json {
                eprintln!("{}", serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(1)
        }
    }
}
