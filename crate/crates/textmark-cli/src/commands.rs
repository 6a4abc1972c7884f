//! Subcommand implementations. Every randomized stage derives its seed
//! from the resolved global seed, so identical invocations produce
//! byte-identical artifacts.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use textmark::baselines::{self, Calibration, MiConfig};
use textmark::benchmark::{BenchmarkConfig, World};
use textmark::marking::{
    load_jsonl, make_probes, mark_dataset, write_jsonl, write_marked_jsonl, Dataset, MarkAmount,
    MarkRecipe,
};
use textmark::model::{accuracy, connect_external_with_timeout, train as train_model};
use textmark::seed::derive_seed;
use textmark::synth::{self, SynthConfig};
use textmark::trigger::{draw_spec, TriggerDictionary, TriggerSpec};
use textmark::verify::{asr_threshold, verify as verify_model, TestParams};
use textmark::{Membership, RefModelConfig, TrainedRefModel, VerificationReport};

use crate::{
    BaselineArgs, CalibrationArg, CliError, CorpusArgs, Globals, MarkArgs, MethodArg, SimulateArgs,
    SweepArgs, SweepAxis, SynthArgs, ThresholdArgs, TrainArgs, VerifyArgs,
};

impl CorpusArgs {
    fn to_synth(self, n_samples: usize, rng_seed: u64) -> SynthConfig {
        SynthConfig {
            n_samples,
            n_classes: self.k,
            vocab_size: self.vocab,
            keywords_per_class: self.keywords_per_class,
            keyword_rate: self.keyword_rate,
            label_noise: self.label_noise,
            tokens_min: self.tokens_min,
            tokens_max: self.tokens_max,
            rng_seed,
        }
    }
}

fn generate_corpus(cfg: &SynthConfig) -> Result<Dataset, CliError> {
    synth::generate(cfg).map_err(CliError::Usage)
}

/// Writes a JSON report to stdout and, when requested, to a file with the
/// same bytes.
fn emit_report<T: Serialize>(report: &T, path: Option<&Path>) -> Result<(), CliError> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    print!("{json}");
    if let Some(path) = path {
        std::fs::write(path, &json)?;
    }
    Ok(())
}

pub fn synth(args: &SynthArgs, globals: Globals) -> Result<(), CliError> {
    let cfg = args.corpus.to_synth(args.n, globals.seed);
    let dataset = generate_corpus(&cfg)?;
    write_jsonl(&args.out, &dataset.samples)?;
    eprintln!(
        "wrote {} samples ({} classes) to {}",
        dataset.len(),
        cfg.n_classes,
        args.out.display()
    );
    Ok(())
}

/// The file `mark` writes and `verify` reads back.
#[derive(Debug, Serialize, Deserialize)]
pub struct RecipeFile {
    pub recipe: MarkRecipe,
    pub k: usize,
    pub n_marked: usize,
    pub marking_ratio: f64,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub seed: u64,
}

fn load_dictionary(path: Option<&PathBuf>) -> Result<TriggerDictionary, CliError> {
    match path {
        Some(path) => {
            let raw = std::fs::read_to_string(path)?;
            Ok(TriggerDictionary::from_json(&raw)?)
        }
        None => Ok(TriggerDictionary::default()),
    }
}

pub fn mark(args: &MarkArgs, globals: Globals) -> Result<(), CliError> {
    let amount = match (args.count, args.rate) {
        (Some(n), None) => MarkAmount::Count(n),
        (None, Some(r)) if r > 0.0 && r < 1.0 => MarkAmount::Rate(r),
        (None, Some(r)) => {
            return Err(CliError::Usage(format!("--rate {r} must lie in (0, 1)")));
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --count and --rate".into(),
            ));
        }
    };
    let dataset = load_jsonl(&args.dataset, args.k)?;
    let dict = load_dictionary(args.dictionary.as_ref())?;
    let spec = match &args.pattern {
        Some(pattern) => TriggerSpec::new(
            args.level.into(),
            pattern.clone(),
            args.location.into(),
            args.size,
            args.mode.into(),
            args.user_id.clone(),
        )?,
        None => {
            let drawn = draw_spec(
                &dict,
                args.level.into(),
                args.location.into(),
                args.size,
                &args.user_id,
                derive_seed(globals.seed, 0),
            )?;
            TriggerSpec {
                mode: args.mode.into(),
                ..drawn
            }
        }
    };
    let recipe = MarkRecipe {
        spec,
        target_label: args.target_label,
        amount,
        rng_seed: derive_seed(globals.seed, 1),
    };
    let marked = mark_dataset(&dataset, std::slice::from_ref(&recipe))?;
    write_marked_jsonl(&args.out, &marked)?;

    let recipe_file = RecipeFile {
        n_marked: marked.provenance.len(),
        marking_ratio: marked.marking_ratio(),
        k: dataset.n_classes,
        recipe,
        config: serde_json::to_value(args)?,
        seed: globals.seed,
    };
    let mut json = serde_json::to_string_pretty(&recipe_file)?;
    json.push('\n');
    std::fs::write(&args.recipe_out, &json)?;
    eprintln!(
        "marked {} of {} samples ({:.2}%) with {:?} -> {}",
        recipe_file.n_marked,
        dataset.len(),
        recipe_file.marking_ratio * 100.0,
        recipe_file.recipe.spec.pattern,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    n_samples: usize,
    k: usize,
    clean_accuracy: Option<f64>,
    model_path: String,
    seed: u64,
    config: &'a TrainArgs,
}

pub fn train(args: &TrainArgs, globals: Globals) -> Result<(), CliError> {
    let dataset = load_jsonl(&args.data, args.k)?;
    let config = args.model.to_config(globals.seed);
    let model = train_model(&dataset.samples, dataset.n_classes, &config)?;
    model.save(&args.out)?;

    let clean_accuracy = match &args.test {
        Some(path) => {
            let held_out = load_jsonl(path, Some(dataset.n_classes))?;
            Some(accuracy(&model, &held_out.samples)?)
        }
        None => None,
    };
    emit_report(
        &TrainReport {
            n_samples: dataset.len(),
            k: dataset.n_classes,
            clean_accuracy,
            model_path: args.out.display().to_string(),
            seed: globals.seed,
            config: args,
        },
        args.report.as_deref(),
    )
}

#[derive(Debug, Serialize)]
struct VerifyReport<'a> {
    #[serde(flatten)]
    report: &'a VerificationReport,
    seed: u64,
    config: &'a VerifyArgs,
}

pub fn verify(args: &VerifyArgs, globals: Globals) -> Result<(), CliError> {
    let raw = std::fs::read_to_string(&args.recipe)?;
    let recipe_file: RecipeFile = serde_json::from_str(&raw)
        .map_err(|e| CliError::Data(format!("bad recipe file {:?}: {e}", args.recipe)))?;
    let k = args.k.unwrap_or(recipe_file.k);
    let params =
        TestParams::new(args.m, k, args.tau).map_err(|e| CliError::Usage(e.to_string()))?;

    let held_out = load_jsonl(&args.test, Some(k))?;
    let probes = make_probes(
        &held_out,
        &recipe_file.recipe.spec,
        recipe_file.recipe.target_label,
        args.m,
        derive_seed(globals.seed, 2),
    )?;

    let report = match (&args.model, &args.external) {
        (Some(path), None) => {
            let model = TrainedRefModel::load(path)?;
            verify_model(&model, &probes, &params, &recipe_file.recipe.spec.user_id)?
        }
        (None, Some(command)) => {
            let model = connect_external_with_timeout(
                command,
                std::time::Duration::from_secs(args.timeout_secs),
            )?;
            verify_model(&model, &probes, &params, &recipe_file.recipe.spec.user_id)?
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --model and --external".into(),
            ));
        }
    };
    emit_report(
        &VerifyReport {
            report: &report,
            seed: globals.seed,
            config: args,
        },
        args.report.as_deref(),
    )
}

pub fn threshold(args: &ThresholdArgs) -> Result<(), CliError> {
    let params =
        TestParams::new(args.m, args.k, args.tau).map_err(|e| CliError::Usage(e.to_string()))?;
    let threshold = asr_threshold(&params)?;
    println!("{threshold:.4}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn benchmark_config(
    users: usize,
    members: usize,
    collab: usize,
    samples_per_user: usize,
    marks_per_member: usize,
    train_size: usize,
    test_size: usize,
    proxy_size: usize,
    n_shadow: usize,
    m: usize,
    tau: f64,
    corpus: &CorpusArgs,
    model: RefModelConfig,
    seed: u64,
) -> BenchmarkConfig {
    BenchmarkConfig {
        n_users: users,
        n_members: members,
        collab_group_size: collab,
        samples_per_user,
        marks_per_member,
        train_size,
        test_size,
        proxy_size,
        synth: corpus.to_synth(train_size, seed),
        model,
        mi: MiConfig {
            n_shadow,
            shadow_group_size: samples_per_user,
            model,
            rng_seed: derive_seed(seed, 60_000),
        },
        m,
        tau,
        rng_seed: seed,
    }
}

#[derive(Debug, Serialize)]
struct SimulateReport<'a> {
    evaluation: baselines::MiEvaluation,
    clean_accuracy: f64,
    reports: Vec<VerificationReport>,
    seed: u64,
    config: &'a SimulateArgs,
}

pub fn simulate(args: &SimulateArgs, globals: Globals) -> Result<(), CliError> {
    let cfg = benchmark_config(
        args.users,
        args.members,
        args.collab,
        args.samples_per_user,
        args.marks_per_member,
        args.train_size,
        args.test_size,
        // Proxy data is only consumed by the MI baselines, which simulate
        // does not run; keep the corpus minimal.
        (10 * args.corpus.k).max(40),
        1,
        args.m,
        args.tau,
        &args.corpus,
        args.model.to_config(derive_seed(globals.seed, 7)),
        globals.seed,
    );
    let world = World::build(&cfg)?;
    let reports = world.verify_all_users()?;
    let decisions = reports
        .iter()
        .map(|r| (r.user_id.clone(), r.decision))
        .collect();
    let evaluation = baselines::evaluate_mi(&decisions, &world.truth_map())?;
    emit_report(
        &SimulateReport {
            evaluation,
            clean_accuracy: world.clean_accuracy,
            reports,
            seed: globals.seed,
            config: args,
        },
        args.report.as_deref(),
    )
}

/// One sweep row, shaped for the fixed CSV schema.
struct SweepRow {
    value: String,
    asr: f64,
    clean_acc: f64,
    threshold: f64,
    decision: Membership,
}

fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

fn parse_grid<T: std::str::FromStr>(values: &[String], axis: &str) -> Result<Vec<T>, CliError> {
    values
        .iter()
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| CliError::Usage(format!("bad {axis} value {v:?}")))
        })
        .collect()
}

pub fn sweep(args: &SweepArgs, globals: Globals) -> Result<(), CliError> {
    let seed = globals.seed;
    let params = TestParams::new(args.m, args.corpus.k, args.tau)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let threshold = asr_threshold(&params)?;

    let rows: Vec<SweepRow> = match args.axis {
        SweepAxis::Collab => {
            let grid: Vec<usize> = match &args.values {
                Some(v) => parse_grid(v, "collab")?,
                None => (0..=args.members).collect(),
            };
            grid.par_iter()
                .map(|&collab| -> Result<SweepRow, CliError> {
                    if collab > args.members {
                        return Err(CliError::Usage(format!(
                            "collab {collab} exceeds member count {}",
                            args.members
                        )));
                    }
                    let cfg = benchmark_config(
                        args.members,
                        args.members,
                        collab,
                        1,
                        args.marks_per_member,
                        args.train_size,
                        args.test_size,
                        (10 * args.corpus.k).max(40),
                        1,
                        args.m,
                        args.tau,
                        &args.corpus,
                        args.model.to_config(derive_seed(seed, 7)),
                        seed,
                    );
                    // One member's 5-sample collection is irrelevant here;
                    // marks_per_member drives the backdoor.
                    let cfg = BenchmarkConfig {
                        samples_per_user: 1,
                        marks_per_member: args.marks_per_member.max(1),
                        ..cfg
                    };
                    let world = World::build(&cfg)?;
                    let reports = world.verify_all_users()?;
                    let min_alpha = reports
                        .iter()
                        .map(|r| r.alpha)
                        .fold(f64::INFINITY, f64::min);
                    let all_member = reports.iter().all(|r| r.decision == Membership::Member);
                    Ok(SweepRow {
                        value: collab.to_string(),
                        asr: min_alpha,
                        clean_acc: world.clean_accuracy,
                        threshold,
                        decision: if all_member {
                            Membership::Member
                        } else {
                            Membership::NonMember
                        },
                    })
                })
                .collect::<Result<_, _>>()?
        }
        axis => {
            let train_corpus =
                generate_corpus(&args.corpus.to_synth(args.train_size, derive_seed(seed, 0)))?;
            let test_corpus = generate_corpus(&SynthConfig {
                label_noise: 0.0,
                ..args.corpus.to_synth(args.test_size, derive_seed(seed, 1))
            })?;
            let dict = TriggerDictionary::default();
            let base_spec = {
                let spec = draw_spec(
                    &dict,
                    args.level.into(),
                    args.location.into(),
                    args.size,
                    "sweep",
                    derive_seed(seed, 2),
                )?;
                TriggerSpec {
                    mode: args.mode.into(),
                    ..spec
                }
            };

            // Each cell overrides one knob of the shared base recipe.
            #[derive(Clone)]
            struct Cell {
                label: String,
                spec: TriggerSpec,
                rate: f64,
            }
            let cells: Vec<Cell> = match axis {
                SweepAxis::Pattern => {
                    let patterns: Vec<String> = match &args.values {
                        Some(v) => v.clone(),
                        None => dict.patterns(args.level.into()).to_vec(),
                    };
                    patterns
                        .into_iter()
                        .map(|p| -> Result<Cell, CliError> {
                            let spec = TriggerSpec::new(
                                args.level.into(),
                                p.clone(),
                                args.location.into(),
                                args.size,
                                args.mode.into(),
                                "sweep",
                            )?;
                            Ok(Cell {
                                label: p,
                                spec,
                                rate: args.rate,
                            })
                        })
                        .collect::<Result<_, _>>()?
                }
                SweepAxis::Location => {
                    let locations: Vec<String> = match &args.values {
                        Some(v) => v.clone(),
                        None => ["initial", "middle", "end", "random"]
                            .iter()
                            .map(|s| s.to_string())
                            .collect(),
                    };
                    locations
                        .into_iter()
                        .map(|l| -> Result<Cell, CliError> {
                            let location = match l.as_str() {
                                "initial" => textmark::TriggerLocation::Initial,
                                "middle" => textmark::TriggerLocation::Middle,
                                "end" => textmark::TriggerLocation::End,
                                "random" => textmark::TriggerLocation::Random,
                                other => {
                                    return Err(CliError::Usage(format!(
                                        "bad location value {other:?}"
                                    )))
                                }
                            };
                            Ok(Cell {
                                label: l,
                                spec: TriggerSpec {
                                    location,
                                    ..base_spec.clone()
                                },
                                rate: args.rate,
                            })
                        })
                        .collect::<Result<_, _>>()?
                }
                SweepAxis::Rate => {
                    let rates: Vec<f64> = match &args.values {
                        Some(v) => parse_grid(v, "rate")?,
                        None => vec![0.002, 0.005, 0.01, 0.02, 0.05],
                    };
                    rates
                        .into_iter()
                        .map(|r| Cell {
                            label: format!("{r}"),
                            spec: base_spec.clone(),
                            rate: r,
                        })
                        .collect()
                }
                SweepAxis::Size => {
                    let sizes: Vec<usize> = match &args.values {
                        Some(v) => parse_grid(v, "size")?,
                        None => vec![1, 2, 3],
                    };
                    sizes
                        .into_iter()
                        .map(|s| Cell {
                            label: s.to_string(),
                            spec: TriggerSpec {
                                size: s,
                                ..base_spec.clone()
                            },
                            rate: args.rate,
                        })
                        .collect()
                }
                SweepAxis::Collab => unreachable!("handled above"),
            };

            cells
                .par_iter()
                .map(|cell| -> Result<SweepRow, CliError> {
                    let recipe = MarkRecipe {
                        spec: cell.spec.clone(),
                        target_label: args.target_label,
                        amount: MarkAmount::Rate(cell.rate),
                        rng_seed: derive_seed(seed, 10),
                    };
                    let marked = mark_dataset(&train_corpus, std::slice::from_ref(&recipe))?;
                    let model = train_model(
                        &marked.samples,
                        train_corpus.n_classes,
                        &args.model.to_config(derive_seed(seed, 20)),
                    )?;
                    let clean_acc = accuracy(&model, &test_corpus.samples)?;
                    let probes = make_probes(
                        &test_corpus,
                        &cell.spec,
                        args.target_label,
                        args.m,
                        derive_seed(seed, 30),
                    )?;
                    let report = verify_model(&model, &probes, &params, &cell.spec.user_id)?;
                    Ok(SweepRow {
                        value: cell.label.clone(),
                        asr: report.alpha,
                        clean_acc,
                        threshold,
                        decision: report.decision,
                    })
                })
                .collect::<Result<_, _>>()?
        }
    };

    let mut csv = String::from("axis,value,asr,clean_acc,threshold,decision\n");
    let axis_name = match args.axis {
        SweepAxis::Pattern => "pattern",
        SweepAxis::Location => "location",
        SweepAxis::Rate => "rate",
        SweepAxis::Size => "size",
        SweepAxis::Collab => "collab",
    };
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{}\n",
            axis_name,
            csv_field(&row.value),
            row.asr,
            row.clean_acc,
            row.threshold,
            row.decision,
        ));
    }
    match &args.out {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BaselineReport<'a> {
    method: MethodArg,
    evaluation: baselines::MiEvaluation,
    clean_accuracy: f64,
    decisions: std::collections::BTreeMap<String, Membership>,
    seed: u64,
    config: &'a BaselineArgs,
}

pub fn baseline(args: &BaselineArgs, globals: Globals) -> Result<(), CliError> {
    let cfg = benchmark_config(
        args.users,
        args.members,
        args.collab,
        args.samples_per_user,
        args.marks_per_member,
        args.train_size,
        args.test_size,
        args.proxy_size,
        args.n_shadow,
        args.m,
        args.tau,
        &args.corpus,
        args.model.to_config(derive_seed(globals.seed, 7)),
        globals.seed,
    );
    let world = World::build(&cfg)?;
    let user_data: Vec<_> = world.users.iter().map(|u| u.data.clone()).collect();

    let decisions = match args.method {
        MethodArg::Textmark => world
            .verify_all_users()?
            .into_iter()
            .map(|r| (r.user_id, r.decision))
            .collect(),
        MethodArg::Shadow => baselines::shadow_train_mi(
            &world.proxy,
            &world.target,
            &user_data,
            cfg.mi.n_shadow,
            &cfg.mi,
        )?,
        MethodArg::Metric => {
            let (members_pool, non_members_pool) = world.oracle_pools();
            let calibration = match args.calibration {
                CalibrationArg::Oracle => Calibration::OracleAccess {
                    members: &members_pool,
                    non_members: &non_members_pool,
                },
                CalibrationArg::Proxy => Calibration::ProxyOnly {
                    proxy: &world.proxy,
                },
            };
            baselines::metric_mi(calibration, &world.target, &user_data, &cfg.mi)?
        }
    };
    let evaluation = baselines::evaluate_mi(&decisions, &world.truth_map())?;
    emit_report(
        &BaselineReport {
            method: args.method,
            evaluation,
            clean_accuracy: world.clean_accuracy,
            decisions,
            seed: globals.seed,
            config: args,
        },
        args.report.as_deref(),
    )
}
