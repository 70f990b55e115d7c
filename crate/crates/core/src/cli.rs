//! Command-line entry point. Dotted flags (`--section.key value`) and a few
//! shorthands become config overrides; everything else goes to clap.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{joint_attention, perturb_corpus, select_top_joints, JointAttentionMap};
use crate::backbone::{build_model, ConstantVelocity, Model, Oracle, Predictor};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::navsim::{episode_jsonl, evaluate_navigation, navigation_suite, run_episode, NavSummary, NavTick, PredictorChoice};
use crate::plot::{attention_svg, navigation_svg, trajectory_svg};
use crate::scene::{read_scenes, write_scenes, Scene};
use crate::skeleton::JOINT_NAMES;
use crate::synth::{generate_corpus_from, project_to_2d};
use crate::train::train;

#[derive(Debug, Parser)]
#[command(name = "posecast", about = "Pose-augmented trajectory prediction toolkit")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Exact output directory instead of a fresh run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic training and test corpora.
    Generate,
    /// Train a model on `paths.corpus`.
    Train,
    /// Evaluate `paths.checkpoint` (or `cv`, `oracle`) on the test corpus.
    Eval,
    /// Write a perturbed copy of `paths.corpus`.
    Perturb,
    /// Per-joint attention of the checkpoint's pose encoder.
    Attention,
    /// Robot navigation episodes with the configured predictor.
    Navsim,
    /// Render a figure: trajectory, attention or navigation.
    Plot {
        kind: String,
        /// Scene index for trajectory plots.
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

/// Shorthand flags and the config keys they set.
const SHORTHANDS: [(&str, &str); 12] = [
    ("seed", "seed"),
    ("scenes", "world.n_scenes"),
    ("k", "eval.k"),
    ("pose", "pose.enabled"),
    ("family", "backbone.family"),
    ("epochs", "train.epochs"),
    ("corpus", "paths.corpus"),
    ("test-corpus", "paths.test_corpus"),
    ("checkpoint", "paths.checkpoint"),
    ("input", "paths.input"),
    ("predictor", "navsim.predictor"),
    ("perturbation", "eval.perturbation"),
];

/// Splits config overrides out of the argument list.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg.clone());
            i += 1;
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        let key = if name.contains('.') {
            Some(name.to_string())
        } else {
            SHORTHANDS.iter().find(|(s, _)| *s == name).map(|(_, k)| k.to_string())
        };
        let Some(key) = key else {
            rest.push(arg.clone());
            i += 1;
            continue;
        };
        let value = match inline {
            Some(v) => v,
            None => {
                i += 1;
                args.get(i).cloned().ok_or_else(|| Error::Config { key: key.clone(), message: "missing value".into() })?
            }
        };
        let value = match (key.as_str(), value.as_str()) {
            ("pose.enabled", "on") => "true".into(),
            ("pose.enabled", "off") => "false".into(),
            _ => value,
        };
        overrides.push((key, value));
        i += 1;
    }
    Ok((rest, overrides))
}

/// Runs the CLI and returns the process exit status.
pub fn run(args: Vec<String>) -> i32 {
    match run_inner(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_inner(args: Vec<String>) -> Result<()> {
    let (rest, overrides) = split_overrides(args.get(1..).unwrap_or(&[]))?;
    let argv = std::iter::once(args.first().cloned().unwrap_or_else(|| "posecast".into())).chain(rest);
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Config { key: "command line".into(), message: e.to_string() }),
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let dir = run_dir(&cfg, cli.out.as_deref())?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    match cli.command {
        Command::Generate => generate(&cfg, &dir),
        Command::Train => train_cmd(&cfg, &dir),
        Command::Eval => eval_cmd(&cfg, &dir),
        Command::Perturb => perturb_cmd(&cfg, &dir),
        Command::Attention => attention_cmd(&cfg, &dir),
        Command::Navsim => navsim_cmd(&cfg, &dir),
        Command::Plot { kind, scene } => plot_cmd(&cfg, &dir, &kind, scene),
    }?;
    println!("artifacts: {}", dir.display());
    Ok(())
}

/// `<root>/<unix seconds>-<config hash>`, suffixed when the name is taken.
fn run_dir(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        return Ok(o.to_path_buf());
    }
    let root = cfg.run_root();
    fs::create_dir_all(&root)?;
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = format!("{secs}-{}", cfg.hash());
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let path = root.join(name);
        match fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn require<'a>(value: &'a str, key: &str) -> Result<&'a str> {
    if value.is_empty() {
        return Err(Error::Config { key: key.into(), message: "a path is required for this command".into() });
    }
    Ok(value)
}

fn load_corpus(path: &str, key: &str) -> Result<Vec<Scene>> {
    let scenes = read_scenes(require(path, key)?)?;
    if scenes.is_empty() {
        return Err(Error::Data(format!("corpus {path} has no scenes")));
    }
    Ok(scenes)
}

/// Applies the configured joint subset.
fn select(cfg: &RunConfig, mut scenes: Vec<Scene>) -> Vec<Scene> {
    if cfg.pose.enabled && !cfg.pose.joints.is_empty() {
        for s in &mut scenes {
            s.select_joints(&cfg.pose.joints);
        }
    }
    scenes
}

fn test_corpus(cfg: &RunConfig) -> Result<Vec<Scene>> {
    let path = if cfg.paths.test_corpus.is_empty() { &cfg.paths.corpus } else { &cfg.paths.test_corpus };
    load_corpus(path, "paths.test_corpus")
}

fn load_model(path: &str) -> Result<Model> {
    Checkpoint::load(require(path, "paths.checkpoint")?)?.to_model()
}

#[derive(Serialize)]
struct CorpusMeta<'a> {
    file: &'a str,
    scenes: usize,
    sha256: String,
    seed: u64,
    config: serde_json::Value,
}

fn write_corpus(cfg: &RunConfig, dir: &Path, name: &str, scenes: &[Scene]) -> Result<()> {
    let path = dir.join(name);
    write_scenes(scenes, &path)?;
    let meta = CorpusMeta {
        file: name,
        scenes: scenes.len(),
        sha256: sha256_hex(&fs::read(&path)?),
        seed: cfg.seed,
        config: cfg.to_json(),
    };
    write_json(&dir.join(format!("{name}.meta.json")), &meta)
}

fn generate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let w = &cfg.world;
    let project = |scenes: Vec<Scene>| -> Result<Vec<Scene>> {
        if w.pose_dims == 2 {
            scenes.iter().map(|s| project_to_2d(s, &w.camera)).collect()
        } else {
            Ok(scenes)
        }
    };
    let train_set = project(generate_corpus_from(&w.generator, &cfg.gait, 0, w.n_scenes)?)?;
    write_corpus(cfg, dir, "corpus.jsonl", &train_set)?;
    if w.n_test > 0 {
        let test = project(generate_corpus_from(&w.generator, &cfg.gait, w.test_offset, w.n_test)?)?;
        write_corpus(cfg, dir, "test.jsonl", &test)?;
    }
    println!("generated {} training and {} test scenes", w.n_scenes, w.n_test);
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    outcome: &'a crate::train::TrainOutcome,
    parameters: usize,
    seed: u64,
    config: serde_json::Value,
}

fn train_cmd(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = select(cfg, load_corpus(&cfg.paths.corpus, "paths.corpus")?);
    let val = if cfg.paths.test_corpus.is_empty() {
        None
    } else {
        Some(select(cfg, load_corpus(&cfg.paths.test_corpus, "paths.test_corpus")?))
    };
    let mut model = build_model(&cfg.model_config())?;
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let cfg_json = cfg.to_json();
    let outcome = train(&mut model, &corpus, val.as_deref(), &cfg.train, |rec, m| {
        log::info!("epoch {} loss {:.5} val {:?}", rec.epoch, rec.train_loss, rec.val_ade);
        Checkpoint::from_model(m, cfg_json.clone(), Some(rec.epoch)).save(ck_dir.join(format!("epoch_{:03}.json", rec.epoch)))
    })?;
    Checkpoint::from_model(&model, cfg_json.clone(), Some(outcome.best_epoch)).save(dir.join("checkpoint.json"))?;
    fs::write(dir.join("loss.csv"), outcome.loss_csv())?;
    let report = TrainReport { outcome: &outcome, parameters: model.parameter_count(), seed: cfg.seed, config: cfg_json };
    write_json(&dir.join("train_report.json"), &report)?;
    if let Some(last) = outcome.epochs.last() {
        println!("trained {} epochs, final loss {:.5}", outcome.epochs.len(), last.train_loss);
    }
    Ok(())
}

fn predictor_for(path: &str) -> Result<Box<dyn Predictor>> {
    Ok(match path {
        "cv" => Box::new(ConstantVelocity),
        "oracle" => Box::new(Oracle),
        p => Box::new(load_model(p)?),
    })
}

fn eval_cmd(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = select(cfg, test_corpus(cfg)?);
    let predictor = predictor_for(require(&cfg.paths.checkpoint, "paths.checkpoint")?)?;
    let perturbation = cfg.perturbation()?;
    let report = evaluate(predictor.as_ref(), &corpus, cfg.eval.k, perturbation.as_ref(), cfg.seed, cfg.to_json())?;
    write_json(&dir.join("report.json"), &report)?;
    print!("{}", report.table());
    Ok(())
}

fn perturb_cmd(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = load_corpus(&cfg.paths.corpus, "paths.corpus")?;
    let p = cfg.perturbation()?.ok_or_else(|| Error::Config {
        key: "eval.perturbation".into(),
        message: "perturb needs a perturbation other than none".into(),
    })?;
    write_corpus(cfg, dir, "perturbed.jsonl", &perturb_corpus(&corpus, &p))?;
    println!("perturbed {} scenes", corpus.len());
    Ok(())
}

#[derive(Serialize)]
struct AttentionReport<'a> {
    map: &'a JointAttentionMap,
    joint_names: Vec<&'static str>,
    top_8: Vec<usize>,
    seed: u64,
    config: serde_json::Value,
}

fn attention_cmd(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let corpus = test_corpus(cfg)?;
    let model = load_model(&cfg.paths.checkpoint)?;
    let map = joint_attention(&model, &corpus)?;
    let top = select_top_joints(&map, 8.min(map.scores.len()))?;
    let report = AttentionReport {
        map: &map,
        joint_names: JOINT_NAMES.iter().take(map.scores.len()).copied().collect(),
        top_8: top.clone(),
        seed: cfg.seed,
        config: cfg.to_json(),
    };
    write_json(&dir.join("attention.json"), &report)?;
    let names: Vec<&str> = top.iter().map(|&j| JOINT_NAMES[j]).collect();
    println!("top joints: {}", names.join(", "));
    Ok(())
}

#[derive(Serialize)]
struct EpisodeRow {
    index: usize,
    start: [f64; 2],
    goal: [f64; 2],
    completion_time: Option<f64>,
    collision: bool,
    min_distance: f64,
}

#[derive(Serialize)]
struct NavReport<'a> {
    predictor: String,
    summary: &'a NavSummary,
    episodes: Vec<EpisodeRow>,
    seed: u64,
    config: serde_json::Value,
}

fn navsim_cmd(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let n = &cfg.navsim;
    let scenes = if cfg.paths.corpus.is_empty() {
        navigation_suite(&cfg.gait, n.episodes, cfg.seed, &n.sfm)?
    } else {
        load_corpus(&cfg.paths.corpus, "paths.corpus")?.into_iter().take(n.episodes).collect()
    };
    let model;
    let choice = match n.predictor.as_str() {
        "none" => PredictorChoice::None,
        "oracle" => PredictorChoice::Oracle,
        _ => {
            model = load_model(&cfg.paths.checkpoint)?;
            PredictorChoice::Model(&model)
        }
    };
    let logs = dir.join("episodes");
    fs::create_dir_all(&logs)?;
    let mut episodes = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let ep = run_episode(s, &choice, &n.sfm, cfg.seed)?;
        fs::write(logs.join(format!("episode_{i:03}.jsonl")), episode_jsonl(&ep)?)?;
        episodes.push(ep);
    }
    let summary = evaluate_navigation(&episodes, n.sfm.timeout, n.exclude_timeouts)?;
    let rows = episodes
        .iter()
        .enumerate()
        .map(|(index, e)| EpisodeRow {
            index,
            start: e.start,
            goal: e.goal,
            completion_time: e.completion_time,
            collision: e.collision,
            min_distance: e.min_distance,
        })
        .collect();
    let report = NavReport { predictor: choice.name(), summary: &summary, episodes: rows, seed: cfg.seed, config: cfg.to_json() };
    write_json(&dir.join("navsim_report.json"), &report)?;
    println!(
        "{}: {} episodes, mean completion {:.2} s, collision rate {:.1}%, timeouts {}",
        report.predictor, summary.n_episodes, summary.mean_completion_time, summary.collision_rate, summary.timeouts
    );
    Ok(())
}

fn read_nonempty(path: &str) -> Result<String> {
    let text = fs::read_to_string(require(path, "paths.input")?)?;
    if text.trim().is_empty() {
        return Err(Error::InvalidArgument(format!("{path} is empty")));
    }
    Ok(text)
}

fn plot_cmd(cfg: &RunConfig, dir: &Path, kind: &str, scene: usize) -> Result<()> {
    let svg = match kind {
        "trajectory" => {
            let corpus = select(cfg, test_corpus(cfg)?);
            let s = corpus
                .get(scene)
                .ok_or_else(|| Error::InvalidArgument(format!("scene {scene} out of range ({} scenes)", corpus.len())))?;
            let predict = |path: &str| -> Result<Option<Vec<[f64; 2]>>> {
                if path.is_empty() {
                    return Ok(None);
                }
                Ok(Some(predictor_for(path)?.predict(s, 1)?.samples.swap_remove(0)))
            };
            let base = predict(&cfg.paths.checkpoint)?;
            let pose = predict(&cfg.paths.pose_checkpoint)?;
            trajectory_svg(s, base.as_deref(), pose.as_deref())?
        }
        "attention" => {
            let v: serde_json::Value = serde_json::from_str(&read_nonempty(&cfg.paths.input)?)?;
            let scores: Vec<f64> = v
                .pointer("/map/scores")
                .cloned()
                .map(serde_json::from_value)
                .transpose()?
                .ok_or_else(|| Error::InvalidArgument("input has no attention scores".into()))?;
            attention_svg(&scores)?
        }
        "navigation" => {
            let text = read_nonempty(&cfg.paths.input)?;
            let ticks: Vec<NavTick> =
                text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
            navigation_svg(&ticks, None)?
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown plot kind `{other}` (expected trajectory, attention or navigation)"
            )))
        }
    };
    fs::write(dir.join(format!("{kind}.svg")), svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_clap_arguments() {
        let (rest, ov) = split_overrides(&strings(&[
            "train", "--pose", "off", "--backbone.family=mlp", "--out", "x", "--seed", "4", "--train.lr", "0.01",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["train", "--out", "x"]));
        let expect = [("pose.enabled", "false"), ("backbone.family", "mlp"), ("seed", "4"), ("train.lr", "0.01")];
        assert_eq!(ov, expect.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect::<Vec<_>>());
        assert!(split_overrides(&strings(&["eval", "--k"])).is_err());
    }
}
