//! Command-line front end: dataset generation, training, evaluation,
//! analysis export, sample generation, clustering and parameter counting.
//! Every command is driven by a strict config file plus a single seed, and
//! produces byte-stable outputs.

mod config;

use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use config::Config;
use eca::analysis;
use eca::data::{self, PrepareOptions, Prepared, ScaleKind, UciSchema};
use eca::ecan::{self, ArchitectureSpec, DimOpKind, EcanModel};
use eca::generative::{self, GecaModel};
use eca::kernel::{self, KernelSpec};
use eca::objectives::{Objective, PenaltyWeights, SparsityKind};
use eca::trainer::{self, EvalReport, OptimizerKind, TrainConfig};
use eca::unsupervised::{self, UecaConfig};
use eca::{EcaError, PmfMode};

#[derive(Parser)]
#[command(
    name = "eca",
    about = "Eigen component analysis toolkit: train, evaluate and inspect ECA-family models",
    version
)]
struct Cli {
    /// Seed all randomness of the command
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Output directory
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one of the built-in artificial datasets
    GenData {
        /// 2d or 3d
        kind: String,
        /// samples per class
        #[arg(long, default_value_t = 5000)]
        n: usize,
    },
    /// Train a model described by a config file
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved model on the config's validation data
    Eval {
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Export interpretation data for a saved model
    Analyze {
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// histogram bins
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Draw samples from a generative model
    Generate {
        model: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Cluster the config's dataset with latent classes
    Cluster {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the parameter-count formula for a model family
    CountParams {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        l: usize,
        /// eca, lor, lda, qda or svm
        #[arg(long, default_value = "eca")]
        kind: String,
    },
}

fn exit_code_for(err: &EcaError) -> u8 {
    match err {
        EcaError::Config(_) | EcaError::Architecture(_) | EcaError::DimensionMismatch(_) => 1,
        EcaError::Io(_)
        | EcaError::Format(_)
        | EcaError::Mismatch(_)
        | EcaError::DegenerateSplit(_, _)
        | EcaError::EmptyAfterFilter
        | EcaError::NotPure(_)
        | EcaError::NoPureEigenfeatures(_)
        | EcaError::NoMappedEigenfeatures(_) => 2,
        EcaError::ZeroVector(_) | EcaError::Numerical(_) | EcaError::SingularMatrix(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap reserves exit code 2; usage problems are 1 here
            let rendered = e.render();
            if e.use_stderr() {
                eprint!("{rendered}");
                return ExitCode::from(1);
            }
            print!("{rendered}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), EcaError> {
    fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::GenData { kind, n } => cmd_gen_data(&kind, n, cli.seed, &cli.out),
        Command::Train { config } => cmd_train(&config, cli.seed, &cli.out),
        Command::Eval { model, config } => cmd_eval(&model, &config, cli.seed, &cli.out),
        Command::Analyze {
            model,
            config,
            bins,
        } => cmd_analyze(&model, &config, bins, cli.seed, &cli.out),
        Command::Generate {
            model,
            class,
            count,
        } => cmd_generate(&model, class, count, cli.seed, &cli.out),
        Command::Cluster { config } => cmd_cluster(&config, cli.seed, &cli.out),
        Command::CountParams { m, l, kind } => cmd_count_params(m, l, &kind),
    }
}

fn cmd_gen_data(kind: &str, n: usize, seed: u64, out: &Path) -> Result<(), EcaError> {
    let raw = match kind {
        "2d" => data::gen_2d(n, seed)?,
        "3d" => data::gen_3d(n, seed)?,
        other => {
            return Err(EcaError::Config(format!(
                "unknown dataset kind '{other}' (expected 2d or 3d)"
            )))
        }
    };
    let mut summary = String::new();
    summary.push_str(&format!(
        "kind: {kind}\nsamples_per_class: {n}\nseed: {seed}\n"
    ));
    for class in 0..raw.classes {
        let rows: Vec<usize> = raw
            .y
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| (y == class).then_some(i))
            .collect();
        let mut block = ndarray::Array2::<f64>::zeros((rows.len(), raw.x.ncols()));
        for (r, &src) in rows.iter().enumerate() {
            block.row_mut(r).assign(&raw.x.row(src));
        }
        let (mean, cov) = data::empirical_moments(block.view());
        summary.push_str(&format!(
            "class {class}: count {}\n  empirical mean: {:?}\n  empirical covariance rows:\n",
            rows.len(),
            mean.to_vec()
        ));
        for row in cov.rows() {
            summary.push_str(&format!("    {:?}\n", row.to_vec()));
        }
    }
    let prepared = data::preprocess(&raw, &PrepareOptions::default())?;
    data::save_dataset(&prepared, &out.join("dataset.json"))?;
    fs::write(out.join("summary.txt"), summary)?;
    println!(
        "wrote {} and {}",
        out.join("dataset.json").display(),
        out.join("summary.txt").display()
    );
    Ok(())
}

struct DataBundle {
    train: Prepared,
    validation: Prepared,
}

/// Read the data.* section and produce the train/validation pair.
fn load_data(cfg: &mut Config, seed: u64) -> Result<DataBundle, EcaError> {
    let kind = cfg
        .get_str("data.kind")
        .ok_or_else(|| EcaError::Config("missing data.kind".into()))?;
    let default_scale = match kind.as_str() {
        "mnist" => "divide_255",
        "wis1992" | "wis1995" => "per_feature_max",
        _ => "none",
    };
    let scale = match cfg
        .get_str("data.scale")
        .unwrap_or_else(|| default_scale.to_string())
        .as_str()
    {
        "none" => ScaleKind::None,
        "divide_255" => ScaleKind::Divide255,
        "per_feature_max" => ScaleKind::PerFeatureMax,
        other => {
            return Err(EcaError::Config(format!(
                "data.scale '{other}' must be none, divide_255 or per_feature_max"
            )))
        }
    };
    let opts = PrepareOptions {
        scale,
        add_aux_dim: cfg.get_bool("data.add_aux_dim", false)?,
    };
    let fraction = cfg.get_f64("data.split_fraction", 0.8)?;
    let take = cfg.get_usize("data.subsample", 0)?;

    let bundle = match kind.as_str() {
        "2d" | "3d" => {
            let n = cfg.get_usize("data.n_per_class", 5000)?;
            let raw = if kind == "2d" {
                data::gen_2d(n, seed)?
            } else {
                data::gen_3d(n, seed)?
            };
            let prepared = data::preprocess(&raw, &opts)?;
            let (train, validation) = data::split(&prepared, fraction, seed)?;
            DataBundle { train, validation }
        }
        "mnist" => {
            let images = cfg
                .get_path("data.images")
                .ok_or_else(|| EcaError::Config("mnist needs data.images".into()))?;
            let labels = cfg
                .get_path("data.labels")
                .ok_or_else(|| EcaError::Config("mnist needs data.labels".into()))?;
            let raw = data::load_idx(&images, &labels)?;
            let train = data::preprocess(&raw, &opts)?;
            match (
                cfg.get_path("data.val_images"),
                cfg.get_path("data.val_labels"),
            ) {
                (Some(vi), Some(vl)) => {
                    let vraw = data::load_idx(&vi, &vl)?;
                    let validation = data::preprocess(&vraw, &opts)?;
                    DataBundle { train, validation }
                }
                (None, None) => {
                    let (train, validation) = data::split(&train, fraction, seed)?;
                    DataBundle { train, validation }
                }
                _ => {
                    return Err(EcaError::Config(
                        "provide both data.val_images and data.val_labels or neither".into(),
                    ))
                }
            }
        }
        "wis1992" | "wis1995" => {
            let path = cfg
                .get_path("data.path")
                .ok_or_else(|| EcaError::Config(format!("{kind} needs data.path")))?;
            let schema = if kind == "wis1992" {
                UciSchema::Wis1992
            } else {
                UciSchema::Wis1995
            };
            let raw = data::load_uci_csv(&path, schema)?;
            if raw.dropped_rows > 0 {
                println!("dropped {} rows with missing values", raw.dropped_rows);
            }
            let prepared = data::preprocess(&raw, &opts)?;
            let (train, validation) = data::split(&prepared, fraction, seed)?;
            DataBundle { train, validation }
        }
        "cache" => {
            let path = cfg
                .get_path("data.path")
                .ok_or_else(|| EcaError::Config("cache needs data.path".into()))?;
            let prepared = data::load_dataset(&path)?;
            let (train, validation) = data::split(&prepared, fraction, seed)?;
            DataBundle { train, validation }
        }
        other => return Err(EcaError::Config(format!("unknown data.kind '{other}'"))),
    };
    let bundle = if take > 0 {
        DataBundle {
            train: data::subsample(&bundle.train, take, seed)?,
            validation: bundle.validation,
        }
    } else {
        bundle
    };
    Ok(bundle)
}

fn penalty_weights(cfg: &mut Config) -> Result<PenaltyWeights, EcaError> {
    let kind = match cfg
        .get_str("penalty.sparsity_kind")
        .unwrap_or_else(|| "none".to_string())
        .as_str()
    {
        "none" => SparsityKind::None,
        "l1" => SparsityKind::L1,
        "l2" => SparsityKind::L2,
        other => {
            return Err(EcaError::Config(format!(
                "penalty.sparsity_kind '{other}' must be none, l1 or l2"
            )))
        }
    };
    Ok(PenaltyWeights {
        xi: cfg.get_f64("penalty.xi", 1.0)?,
        gamma: cfg.get_f64("penalty.gamma", 0.1)?,
        sparsity: cfg.get_f64("penalty.sparsity", 0.0)?,
        sparsity_kind: kind,
    })
}

fn train_config(cfg: &mut Config, seed: u64) -> Result<TrainConfig, EcaError> {
    let objective = match cfg
        .get_str("train.objective")
        .unwrap_or_else(|| "veca".to_string())
        .as_str()
    {
        "veca" => Objective::Veca,
        "aeca" => Objective::Aeca,
        "mse" => Objective::Mse,
        "categorical" => Objective::Categorical,
        other => {
            return Err(EcaError::Config(format!(
                "train.objective '{other}' must be veca, aeca, mse or categorical"
            )))
        }
    };
    let optimizer = match cfg
        .get_str("train.optimizer")
        .unwrap_or_else(|| "adam".to_string())
        .as_str()
    {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        other => {
            return Err(EcaError::Config(format!(
                "train.optimizer '{other}' must be adam or sgd"
            )))
        }
    };
    let prob_mode = match cfg
        .get_str("train.prob_mode")
        .unwrap_or_else(|| "modified".to_string())
        .as_str()
    {
        "modified" => PmfMode::Modified,
        "unmodified" => PmfMode::Unmodified,
        other => {
            return Err(EcaError::Config(format!(
                "train.prob_mode '{other}' must be modified or unmodified"
            )))
        }
    };
    Ok(TrainConfig {
        epochs: cfg.get_usize("train.epochs", 12)?,
        batch_size: cfg.get_usize("train.batch_size", 128)?,
        learning_rate: cfg.get_f64("train.learning_rate", 1e-3)?,
        optimizer,
        seed,
        objective,
        weights: penalty_weights(cfg)?,
        chi: cfg.get_f64("train.chi", 10.0)?,
        omega: cfg.get_f64("train.omega", std::f64::consts::FRAC_PI_2)?,
        prob_mode,
        reorthogonalize: cfg.get_bool("train.reorthogonalize", false)?,
    })
}

fn kernel_spec(cfg: &mut Config) -> Result<KernelSpec, EcaError> {
    let spec = match cfg
        .get_str("kernel.kind")
        .unwrap_or_else(|| "rbf".to_string())
        .as_str()
    {
        "polynomial" => KernelSpec::Polynomial {
            degree: cfg.get_usize("kernel.degree", 2)? as u32,
        },
        "rbf" => KernelSpec::Rbf {
            gamma: cfg.get_f64("kernel.gamma", 1.0)?,
        },
        other => {
            return Err(EcaError::Config(format!(
                "kernel.kind '{other}' must be polynomial or rbf"
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn architecture(cfg: &mut Config) -> Result<ArchitectureSpec, EcaError> {
    let mut folds = Vec::new();
    for index in 0.. {
        let op_key = format!("ecan.fold{index}.op");
        let Some(op_name) = cfg.get_str(&op_key) else {
            break;
        };
        let kind = DimOpKind::from_name(&op_name)?;
        let out = cfg.get_usize(&format!("ecan.fold{index}.out"), 0)?;
        if !kind.is_identity() && out == 0 {
            return Err(EcaError::Config(format!(
                "ecan.fold{index}.out is required for a {op_name} operator"
            )));
        }
        folds.push((kind, out));
    }
    if folds.is_empty() {
        return Err(EcaError::Config(
            "train.model = ecan needs ecan.fold0.op (and friends)".into(),
        ));
    }
    // reject stray fold keys beyond the contiguous range
    for key in cfg.keys_with_prefix("ecan.fold") {
        let rest = &key["ecan.fold".len()..];
        if let Some((idx, _)) = rest.split_once('.') {
            if idx.parse::<usize>().map_or(true, |i| i >= folds.len()) {
                return Err(EcaError::Config(format!(
                    "config key '{key}' skips fold indices (folds must be contiguous from 0)"
                )));
            }
        }
    }
    Ok(ArchitectureSpec { folds })
}

fn write_eval_outputs(out: &Path, report: &EvalReport) -> Result<(), EcaError> {
    fs::write(out.join("eval.csv"), trainer::render_eval_report(report))?;
    println!("accuracy: {:.4}", report.accuracy);
    if !report.empty_classes.is_empty() {
        println!(
            "classes without validation support: {:?}",
            report.empty_classes
        );
    }
    Ok(())
}

fn cmd_train(config_path: &Path, seed: u64, out: &Path) -> Result<(), EcaError> {
    let mut cfg = Config::load(config_path)?;
    let model_kind = cfg
        .get_str("train.model")
        .unwrap_or_else(|| "eca".to_string());
    let bundle = load_data(&mut cfg, seed)?;
    let tc = train_config(&mut cfg, seed)?;
    match model_kind.as_str() {
        "eca" => {
            cfg.finish()?;
            let outcome = trainer::train(&bundle.train, &tc)?;
            trainer::save_model(&outcome.model, &out.join("model.json"))?;
            fs::write(
                out.join("loss.csv"),
                trainer::render_loss_history(&outcome.loss_history),
            )?;
            let report = trainer::evaluate(&bundle.validation, &outcome.model);
            write_eval_outputs(out, &report)?;
            println!(
                "orthogonality residual ||I - P^T P||_F: {:.6}",
                outcome.ortho_residual
            );
        }
        "ecan" => {
            let arch = architecture(&mut cfg)?;
            cfg.finish()?;
            let model = ecan::train_ecan(&bundle.train, &arch, &tc)?;
            ecan::save_ecan(&model, &out.join("model.json"))?;
            let accs = ecan::evaluate_ecan(&bundle.validation, &model)?;
            for (t, acc) in accs.iter().enumerate() {
                println!("fold {t} accuracy: {acc:.4}");
            }
            let preds: Result<Vec<usize>, EcaError> = bundle
                .validation
                .x
                .rows()
                .into_iter()
                .map(|row| ecan::ecan_predict(&model, row))
                .collect();
            let report = trainer::report_from_predictions(
                &preds?,
                &bundle.validation.y,
                bundle.validation.classes,
            );
            write_eval_outputs(out, &report)?;
            for (t, fold) in model.folds.iter().enumerate() {
                println!(
                    "fold {t} orthogonality residual: {:.6}",
                    eca::linalg::orthogonality_residual(&fold.eca.p)
                );
            }
        }
        "geca" => {
            cfg.finish()?;
            let model = generative::train_geca(&bundle.train, &tc)?;
            generative::save_geca(&model, &out.join("model.json"))?;
            let preds: Vec<usize> = bundle
                .validation
                .x
                .rows()
                .into_iter()
                .map(|row| generative::geca_predict(row, &model))
                .collect();
            let report = trainer::report_from_predictions(
                &preds,
                &bundle.validation.y,
                bundle.validation.classes,
            );
            write_eval_outputs(out, &report)?;
            println!(
                "orthogonality residual ||I - P^T P||_F: {:.6}",
                eca::linalg::orthogonality_residual(&model.eca.p)
            );
        }
        "keca" => {
            let spec = kernel_spec(&mut cfg)?;
            cfg.finish()?;
            let model = kernel::train_keca(&bundle.train, spec, &tc)?;
            trainer::save_model(&model, &out.join("model.json"))?;
            let preds: Vec<usize> = bundle
                .validation
                .x
                .rows()
                .into_iter()
                .map(|row| kernel::keca_predict(spec, row, &model))
                .collect();
            let report = trainer::report_from_predictions(
                &preds,
                &bundle.validation.y,
                bundle.validation.classes,
            );
            write_eval_outputs(out, &report)?;
        }
        other => {
            return Err(EcaError::Config(format!(
                "train.model '{other}' must be eca, ecan, geca or keca"
            )))
        }
    }
    Ok(())
}

enum AnyModel {
    Eca(eca::EcaModel),
    Geca(GecaModel),
    Ecan(EcanModel),
}

fn load_any_model(path: &Path) -> Result<AnyModel, EcaError> {
    let text = fs::read_to_string(path)?;
    let doc = eca::model_file::parse(&text)?;
    if doc.get("folds").is_some() {
        Ok(AnyModel::Ecan(eca::model_file::ecan_from(&doc)?))
    } else if doc.get("mu").is_some() {
        Ok(AnyModel::Geca(eca::model_file::geca_from(&doc)?))
    } else {
        Ok(AnyModel::Eca(eca::model_file::eca_from(&doc)?))
    }
}

fn cmd_eval(model_path: &Path, config_path: &Path, seed: u64, out: &Path) -> Result<(), EcaError> {
    let mut cfg = Config::load(config_path)?;
    let model_kind = cfg
        .get_str("train.model")
        .unwrap_or_else(|| "eca".to_string());
    let bundle = load_data(&mut cfg, seed)?;
    let _ = train_config(&mut cfg, seed)?; // consume and validate train.* keys
    let kernel = if model_kind == "keca" {
        Some(kernel_spec(&mut cfg)?)
    } else {
        if model_kind == "ecan" {
            let _ = architecture(&mut cfg)?;
        }
        None
    };
    cfg.finish()?;
    let report = match (load_any_model(model_path)?, kernel) {
        (AnyModel::Eca(model), Some(spec)) => {
            let preds: Vec<usize> = bundle
                .validation
                .x
                .rows()
                .into_iter()
                .map(|row| kernel::keca_predict(spec, row, &model))
                .collect();
            trainer::report_from_predictions(
                &preds,
                &bundle.validation.y,
                bundle.validation.classes,
            )
        }
        (AnyModel::Eca(model), None) => trainer::evaluate(&bundle.validation, &model),
        (AnyModel::Geca(model), _) => {
            let preds: Vec<usize> = bundle
                .validation
                .x
                .rows()
                .into_iter()
                .map(|row| generative::geca_predict(row, &model))
                .collect();
            trainer::report_from_predictions(
                &preds,
                &bundle.validation.y,
                bundle.validation.classes,
            )
        }
        (AnyModel::Ecan(model), _) => {
            let accs = ecan::evaluate_ecan(&bundle.validation, &model)?;
            for (t, acc) in accs.iter().enumerate() {
                println!("fold {t} accuracy: {acc:.4}");
            }
            let preds: Result<Vec<usize>, EcaError> = bundle
                .validation
                .x
                .rows()
                .into_iter()
                .map(|row| ecan::ecan_predict(&model, row))
                .collect();
            trainer::report_from_predictions(
                &preds?,
                &bundle.validation.y,
                bundle.validation.classes,
            )
        }
    };
    write_eval_outputs(out, &report)
}

fn base_eca(model: AnyModel) -> eca::EcaModel {
    match model {
        AnyModel::Eca(m) => m,
        AnyModel::Geca(m) => m.eca,
        AnyModel::Ecan(m) => m.folds.last().expect("nonempty").eca.clone(),
    }
}

fn cmd_analyze(
    model_path: &Path,
    config_path: &Path,
    bins: usize,
    seed: u64,
    out: &Path,
) -> Result<(), EcaError> {
    let mut cfg = Config::load(config_path)?;
    let bundle = load_data(&mut cfg, seed)?;
    // train configs double as analyze configs; ignore their other sections
    for section in ["train.", "penalty.", "kernel.", "ecan.", "cluster."] {
        cfg.consume_section(section);
    }
    cfg.finish()?;
    // analysis reads the classifier-head parameters every format carries
    let model = base_eca(load_any_model(model_path)?);
    let data = &bundle.train;
    if data.x.ncols() != model.m() {
        return Err(EcaError::DimensionMismatch(format!(
            "model expects {} features, dataset has {}",
            model.m(),
            data.x.ncols()
        )));
    }

    let ecmm = model.ecmm();
    let stats = analysis::model_stats(&ecmm)?;
    fs::write(out.join("stats.csv"), analysis::render_stats_csv(&stats))?;
    fs::write(
        out.join("degeneracy_table.csv"),
        analysis::render_degeneracy_table(&stats, model.classes()),
    )?;
    let soft = analysis::soft_stats(&ecmm.soft);
    fs::write(
        out.join("soft_stats.txt"),
        format!(
            "max_entry: {:.6}\nmean_distance_to_binary: {:.6}\nfrac_within_0.05_of_binary: {:.6}\n",
            soft.max_entry, soft.mean_distance_to_binary, soft.frac_within_005
        ),
    )?;

    let pes = analysis::pure_eigenfeatures(&ecmm);
    println!("pure eigenfeatures: {}", pes.len());
    let side = (model.m() as f64).sqrt() as usize;
    let image_like = side * side == model.m();
    for &(j, _class) in &pes {
        let hist = analysis::projection_histogram(data, &model, j, bins)?;
        fs::write(
            out.join(format!("proj_hist_ef{j}.csv")),
            analysis::render_histogram_csv(&hist),
        )?;
        if image_like {
            analysis::write_pgm(
                &out.join(format!("eigenfeature_{j}.pgm")),
                model.p.column(j),
                side,
                side,
            )?;
        }
    }
    if image_like {
        for class in 0..model.classes() {
            match analysis::class_reconstruction(data, &model, class) {
                Ok(recon) => analysis::write_pgm(
                    &out.join(format!("recon_class{class}.pgm")),
                    recon.view(),
                    side,
                    side,
                )?,
                Err(EcaError::NoPureEigenfeatures(_)) => {
                    println!("class {class}: no pure eigenfeatures, no reconstruction");
                }
                Err(e) => return Err(e),
            }
        }
    }
    println!("analysis written to {}", out.display());
    Ok(())
}

fn cmd_generate(
    model_path: &Path,
    class: usize,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<(), EcaError> {
    let model = match load_any_model(model_path)? {
        AnyModel::Geca(m) => m,
        _ => {
            return Err(EcaError::Config(
                "generate needs a generative model file (with mu/sigma/phi)".into(),
            ))
        }
    };
    let side = (model.m() as f64).sqrt() as usize;
    let image_like = side * side == model.m();
    let mut csv = String::from("sample_index,coordinates\n");
    for i in 0..count {
        let sample = generative::geca_sample(class, &model, seed.wrapping_add(i as u64))?;
        if image_like {
            analysis::write_pgm(
                &out.join(format!("sample_class{class}_{i}.pgm")),
                sample.view(),
                side,
                side,
            )?;
        } else {
            csv.push_str(&format!("{i}"));
            for v in sample.iter() {
                csv.push_str(&format!(",{v:.9}"));
            }
            csv.push('\n');
        }
    }
    if !image_like {
        fs::write(out.join("samples.csv"), csv)?;
    }
    println!(
        "wrote {count} samples of class {class} to {}",
        out.display()
    );
    Ok(())
}

fn cmd_cluster(config_path: &Path, seed: u64, out: &Path) -> Result<(), EcaError> {
    let mut cfg = Config::load(config_path)?;
    let bundle = load_data(&mut cfg, seed)?;
    let l_tilde = cfg.get_usize("cluster.l_tilde", 0)?;
    if l_tilde == 0 {
        return Err(EcaError::Config("cluster.l_tilde is required".into()));
    }
    let ucfg = UecaConfig {
        max_rounds: cfg.get_usize("cluster.max_rounds", 200)?,
        tol: cfg.get_f64("cluster.tol", 1e-6)?,
        inner_steps: cfg.get_usize("cluster.inner_steps", 10)?,
        learning_rate: cfg.get_f64("cluster.learning_rate", 0.02)?,
        seed,
        chi: cfg.get_f64("train.chi", 10.0)?,
        omega: cfg.get_f64("train.omega", std::f64::consts::FRAC_PI_2)?,
        weights: penalty_weights(&mut cfg)?,
    };
    cfg.finish()?;
    let outcome = unsupervised::ueca_fit(bundle.train.x.view(), l_tilde, &ucfg)?;
    let mut csv = String::from("sample_index,cluster\n");
    for (i, &z) in outcome.assignments.iter().enumerate() {
        csv.push_str(&format!("{i},{z}\n"));
    }
    fs::write(out.join("assignments.csv"), csv)?;
    println!(
        "clustered {} samples into {} latent classes in {} rounds (final ELBO {:.6})",
        outcome.assignments.len(),
        l_tilde,
        outcome.rounds,
        outcome.elbo_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_count_params(m: usize, l: usize, kind: &str) -> Result<(), EcaError> {
    if m == 0 || l == 0 {
        return Err(EcaError::Config("m and l must be at least 1".into()));
    }
    let value = match kind {
        "lor" => m + 1,
        "lda" => l * m + (l - 1),
        "qda" => l * m + (l - 1) + l * m * (m + 1) / 2,
        "svm" => m + 1,
        "eca" => l * m + m * (m + 1),
        other => {
            return Err(EcaError::Config(format!(
                "unknown model kind '{other}' (expected eca, lor, lda, qda or svm)"
            )))
        }
    };
    println!("{kind} parameters for m={m}, l={l}: {value}");
    if kind == "eca" {
        println!(
            "note: the formula l*m + m*(m+1) disagrees with some published tables \
             (e.g. 10 here vs a reported 8 at m=l=2); the formula value is printed, \
             never silently reconciled"
        );
    }
    Ok(())
}
