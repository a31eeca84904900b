use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use otflow_core::datasets::{
    format_pointcloud, gen_rotated_embedding_pair, generate, load_pointcloud, protocol_stretch, protocol_translate,
    save_pointcloud, Shape, ShapeSpec,
};
use otflow_core::diffcore::finite_diff_check;
use otflow_core::losstrain::{record_loss, train, write_history_csv, EpochRecord, Fidelity, Target, TrainError};
use otflow_core::metrics::{barycenter_mse, cycle_consistency_error, elementary_costs, knn_accuracy};
use otflow_core::otoracle::{gaussian_barycenter_fixedpoint, mle_gaussian_fit, BARYCENTER_MAX_ITER, BARYCENTER_TOL};
use otflow_core::swdist::{sample_projections, sliced_wasserstein};
use otflow_core::{FlowModel, GaussianParams, LossConfig, ModelSpec, PointCloud, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{Checkpoint, TrainingMetadata};
use crate::config::{Data, ExperimentConfig};
use crate::error::CliError;
use crate::plot::plot_clouds;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn metadata(history: &[EpochRecord], seed: u64) -> TrainingMetadata {
    let last = history.last();
    TrainingMetadata {
        epochs: history.len(),
        final_slices: last.map_or(0, |r| r.report.slices),
        lambda: last.map_or(0.0, |r| r.report.lambda),
        gamma: last.map_or(0.0, |r| r.report.gamma),
        seed,
    }
}

pub fn train_cmd(config_path: &Path, seed: Option<u64>, out_dir: Option<&Path>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?.resolve(seed, out_dir);
    let base = config_path.parent().unwrap_or(Path::new("."));
    cfg.validate(base)?;
    let x = match cfg.source.load(base)? {
        Data::Cloud(c) => c,
        Data::Gaussian(_) => return Err(CliError::invalid("source: must be a point cloud")),
    };
    let target = cfg.target.load(base)?;
    let mut model = FlowModel::new(x.dim(), cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;

    ensure_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(RESOLVED_CONFIG_FILE), &(cfg.to_json() + "\n"))?;
    let target_ref = match &target {
        Data::Cloud(y) => Target::Samples(y),
        Data::Gaussian(g) => Target::Gaussian(g),
    };
    let result = train(&mut model, &x, target_ref, &cfg.schedule, &cfg.loss);
    let (history, failure) = match result {
        Ok(out) => {
            let mut timings = String::from("epoch,wall_seconds\n");
            for (rec, t) in out.history.iter().zip(&out.wall_times) {
                let _ = writeln!(timings, "{},{t:?}", rec.epoch);
            }
            write_file(&cfg.out_dir.join(TIMINGS_FILE), &timings)?;
            (out.history, None)
        }
        Err(TrainError::Diverged { epoch, message, history }) => {
            (history, Some(CliError::Numeric(format!("training diverged in epoch {epoch}: {message}"))))
        }
        Err(e) => return Err(e.into()),
    };
    write_file(&cfg.out_dir.join(HISTORY_FILE), &write_history_csv(&history))?;
    let ck = Checkpoint::from_model(&model, metadata(&history, cfg.seed));
    ck.save(&cfg.out_dir.join(CHECKPOINT_FILE))?;
    if let Some(e) = failure {
        return Err(e);
    }
    let last = history.last().map(|r| &r.report);
    print_json(&json!({
        "out_dir": cfg.out_dir,
        "epochs": history.len(),
        "final_total": last.map(|r| r.total),
        "final_sw": last.and_then(|r| r.sw),
        "final_flow_costs": last.map(|r| r.flow_costs.clone()),
    }));
    Ok(())
}

fn load_model(path: &Path) -> Result<FlowModel, CliError> {
    Checkpoint::load(path)?.to_model()
}

fn check_dim(model: &FlowModel, cloud: &PointCloud, what: &str) -> Result<(), CliError> {
    if model.dim() != cloud.dim() {
        return Err(CliError::invalid(format!(
            "{what} has d={}, checkpoint has d={}",
            cloud.dim(),
            model.dim()
        )));
    }
    Ok(())
}

pub struct TransportArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: &'a Path,
    pub inverse: bool,
    pub intermediates: bool,
    pub output: Option<&'a Path>,
}

pub fn transport_cmd(args: TransportArgs<'_>, out_dir: &Path) -> Result<(), CliError> {
    let model = load_model(args.checkpoint)?;
    let cloud = load_pointcloud(args.input)?;
    check_dim(&model, &cloud, "input cloud")?;
    if args.intermediates {
        if args.inverse {
            return Err(CliError::invalid("--intermediates applies to the forward map only"));
        }
        ensure_dir(out_dir)?;
        let stages = model.intermediate_outputs(&cloud)?;
        let mut files = Vec::new();
        for (m, stage) in stages.iter().enumerate() {
            let path = out_dir.join(format!("stage_{m}.csv"));
            save_pointcloud(stage, &path)?;
            files.push(path);
        }
        print_json(&json!({ "files": files }));
        return Ok(());
    }
    let out = if args.inverse {
        model.inverse(&cloud)?
    } else {
        model.forward(&cloud)?
    };
    let path = match args.output {
        Some(p) => p.to_path_buf(),
        None => {
            ensure_dir(out_dir)?;
            out_dir.join(if args.inverse { "inverse.csv" } else { "transported.csv" })
        }
    };
    save_pointcloud(&out, &path)?;
    print_json(&json!({ "files": [path] }));
    Ok(())
}

fn load_gaussian(path: &Path) -> Result<GaussianParams, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let g: GaussianParams = serde_json::from_str(&text)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    g.validate()
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    Ok(g)
}

pub fn barycenter_cmd(
    checkpoint: &Path,
    source: &Path,
    target: &Path,
    m: usize,
    samples: usize,
    seed: u64,
) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let (g1, g2) = (load_gaussian(source)?, load_gaussian(target)?);
    let big_m = model.num_flows();
    if m > big_m {
        return Err(CliError::invalid(format!("m must lie in 0..={big_m}, got {m}")));
    }
    if g1.dim() != model.dim() || g2.dim() != model.dim() {
        return Err(CliError::invalid("Gaussian dimensions must match the checkpoint"));
    }
    let x = generate(&ShapeSpec::new(
        Shape::Gaussian {
            mean: g1.mean.clone(),
            covariance: g1.covariance.clone(),
        },
        samples,
        seed,
    ))?;
    let stage = model.intermediate_outputs(&x)?.swap_remove(m);
    let alpha = m as f64 / big_m as f64;
    let reference = gaussian_barycenter_fixedpoint(&g2, &g1, alpha, BARYCENTER_TOL, BARYCENTER_MAX_ITER)?;
    let err = barycenter_mse(&stage, &reference)?;
    let fit = mle_gaussian_fit(&stage)?.params()?;
    print_json(&json!({
        "m": m,
        "alpha": alpha,
        "mse_mean": err.mean,
        "mse_covariance": err.covariance,
        "estimate": fit,
        "reference": reference,
    }));
    Ok(())
}

fn load_pairing(path: &Path) -> Result<Vec<usize>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| CliError::invalid(format!("{}:{}: expected an index", path.display(), i + 1)))
        })
        .collect()
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub x: &'a Path,
    pub y: &'a Path,
    pub pairing: Option<&'a Path>,
    pub slices: usize,
    pub k: &'a [usize],
}

pub fn eval_cmd(args: EvalArgs<'_>, seed: u64) -> Result<(), CliError> {
    let model = load_model(args.checkpoint)?;
    let x = load_pointcloud(args.x)?;
    let y = load_pointcloud(args.y)?;
    check_dim(&model, &x, "x")?;
    check_dim(&model, &y, "y")?;
    let tx = model.forward(&x)?;
    let mut report = serde_json::Map::new();
    if x.len() == y.len() {
        let proj = sample_projections(args.slices, x.dim(), 2.0, &mut ChaCha8Rng::seed_from_u64(seed))?;
        report.insert("sw_initial".into(), json!(sliced_wasserstein(&x, &y, &proj)?));
        report.insert("sw".into(), json!(sliced_wasserstein(&tx, &y, &proj)?));
    }
    let costs = elementary_costs(&model, &x)?;
    report.insert("flow_costs".into(), json!(costs.per_flow));
    report.insert("total_cost".into(), json!(costs.total));
    report.insert("cost_spread".into(), json!(costs.max_relative_spread()));
    report.insert("cycle_error".into(), json!(cycle_consistency_error(&model, &x)?));
    if let Some(p) = args.pairing {
        let pairing = load_pairing(p)?;
        let mut knn = serde_json::Map::new();
        for &k in args.k {
            knn.insert(k.to_string(), json!(knn_accuracy(&tx, &y, &pairing, k)?));
        }
        report.insert("knn_accuracy".into(), knn.into());
    }
    print_json(&report);
    Ok(())
}

/// Adds a term whose value is zero but whose analytic gradient is `1e-3`
/// on the first column of the first parameter; finite differences cannot
/// see it.
const CORRUPTION: f64 = 1e-3;

pub fn gradcheck_cmd(
    config: Option<&Path>,
    tolerance: f64,
    corrupt: bool,
    seed: u64,
) -> Result<(), CliError> {
    let (mut spec, loss) = match config {
        Some(p) => {
            let c = ExperimentConfig::load(p)?;
            (c.model, c.loss)
        }
        None => (ModelSpec::default(), LossConfig::with_weights(0.1, 0.05)),
    };
    spec.flows = 2;
    let (n, d) = (8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(k, v)| v + [1.0, 0.5][k % 2] + rng.random_range(-0.3..0.3))
        .collect();
    let x = PointCloud::new(Tensor::new(n, d, xs)?)?;
    let y = Tensor::new(n, d, ys)?;
    let mut model = FlowModel::new(d, spec, &mut rng)?;
    if !model.is_initialized() {
        model.initialize_actnorm(&x)?;
    }
    let proj = sample_projections(20, d, loss.p, &mut rng)?;
    let gaussian = GaussianParams::isotropic(vec![1.0, 0.5], 1.0)?;
    let fidelity = if loss.semi_discrete {
        Fidelity::Gaussian(&gaussian)
    } else {
        Fidelity::Sliced {
            target: &y,
            projections: &proj,
        }
    };
    let check = finite_diff_check::<CliError, _>(model.params(), 1e-5, |tape, params| {
        let bound = tape.bind_all(params)?;
        let mut probes = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let total = record_loss(tape, &model, &bound, x.points(), fidelity, &loss, &mut probes)?.total;
        if !corrupt {
            return Ok(total);
        }
        let w = bound[0];
        let frozen = tape.leaf(tape.value(w).clone())?;
        let zero = tape.sub(w, frozen)?;
        let first = tape.select(zero, &[0])?;
        let bump = tape.scale(first, CORRUPTION)?;
        let bump = tape.sum(bump)?;
        Ok(tape.add(total, bump)?)
    })?;
    let passed = check.passes(tolerance);
    print_json(&json!({
        "max_rel_error": check.max_rel_error,
        "worst": check.worst,
        "tolerance": tolerance,
        "passed": passed,
    }));
    if passed {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:e} > {tolerance:e}",
            check.max_rel_error
        )))
    }
}

pub fn plot_cmd(clouds: &[PathBuf], output: &Path, pca: bool) -> Result<(), CliError> {
    let loaded = clouds
        .iter()
        .map(load_pointcloud)
        .collect::<Result<Vec<_>, _>>()?;
    let svg = plot_clouds(&loaded, pca)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_file(output, &svg)?;
    print_json(&json!({ "files": [output] }));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Protocol {
    /// Circle and the same circle shifted by (4, 0).
    Translate,
    /// Unit square and a 2x-stretched copy shifted by (4, 0).
    Stretch,
    /// Clustered cloud and a randomly rotated noisy copy, with pairing.
    Embedding,
}

pub struct GenDataArgs<'a> {
    pub spec: Option<&'a str>,
    pub protocol: Option<Protocol>,
    pub n: usize,
    pub dim: usize,
    pub noise: f64,
    pub output: Option<&'a Path>,
}

pub fn gen_data_cmd(args: GenDataArgs<'_>, seed: Option<u64>, out_dir: &Path) -> Result<(), CliError> {
    match (args.spec, args.protocol) {
        (Some(spec), None) => {
            let text = if spec.trim_start().starts_with('{') {
                spec.to_string()
            } else {
                fs::read_to_string(spec).map_err(|e| CliError::io(Path::new(spec), e))?
            };
            let mut shape: ShapeSpec =
                serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("--spec: {e}")))?;
            if let Some(s) = seed {
                shape.seed = s;
            }
            let cloud = generate(&shape)?;
            let path = match args.output {
                Some(p) => p.to_path_buf(),
                None => {
                    ensure_dir(out_dir)?;
                    out_dir.join("cloud.csv")
                }
            };
            save_pointcloud(&cloud, &path)?;
            print_json(&json!({ "files": [path] }));
        }
        (None, Some(protocol)) => {
            let seed = seed.unwrap_or(0);
            ensure_dir(out_dir)?;
            let (source, target, pairing) = match protocol {
                Protocol::Translate => {
                    let (s, t) = protocol_translate(args.n, seed)?;
                    (s, t, None)
                }
                Protocol::Stretch => {
                    let (s, t) = protocol_stretch(args.n, seed)?;
                    (s, t, None)
                }
                Protocol::Embedding => {
                    let pair = gen_rotated_embedding_pair(args.n, args.dim, seed, args.noise)?;
                    (pair.source, pair.target, Some(pair.pairing))
                }
            };
            let mut files = vec![out_dir.join("source.csv"), out_dir.join("target.csv")];
            write_file(&files[0], &format_pointcloud(&source))?;
            write_file(&files[1], &format_pointcloud(&target))?;
            if let Some(p) = pairing {
                let path = out_dir.join("pairing.txt");
                let text: String = p.iter().map(|i| format!("{i}\n")).collect();
                write_file(&path, &text)?;
                files.push(path);
            }
            print_json(&json!({ "files": files }));
        }
        _ => return Err(CliError::invalid("gen-data needs exactly one of --spec or --protocol")),
    }
    Ok(())
}
