use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use mvsv::data::{
    gen_synthetic, load_dataset, read_trials, sample_from_wav, sample_trials, save_dataset, split_train_val,
    with_condition, write_trials, AVSample, Condition, Dataset, TrialPair, UtteranceRecord,
};
use mvsv::error::{Error, Result};
use mvsv::eval::{
    condition_sides, cosine, format_score, format_score_file, fuse_scores, report_table, sample_embedding,
    score_condition, ReportCondition, ScoreSet,
};
use mvsv::model::{build_model, Model, TopologyKind};
use mvsv::train::{format_log_csv, load_checkpoint, save_checkpoint, TrainData, Trainer};

use crate::config::RunConfig;
use crate::Command;

pub fn dispatch(cfg: &RunConfig, command: Command, out: &mut (dyn Write + Send)) -> Result<()> {
    match command {
        Command::GenData { out: path } => gen_data(cfg, path.as_deref().unwrap_or(&cfg.paths.dataset), out),
        Command::Trials {
            data,
            out: path,
            conditions,
        } => trials(
            cfg,
            data.as_deref().unwrap_or(&cfg.paths.dataset),
            path.as_deref().unwrap_or(&cfg.paths.trials),
            &parse_conditions("--conditions", &conditions)?,
            out,
        ),
        Command::Train {
            data,
            topology,
            out: path,
            resume,
            epochs,
            log,
        } => {
            let kind = topology
                .map(|t| t.parse::<TopologyKind>().map_err(|e| Error::config("topology", e.to_string())))
                .transpose()?;
            let log = log.unwrap_or_else(|| path.with_extension("csv"));
            train(
                cfg,
                TrainArgs {
                    data: data.as_deref().unwrap_or(&cfg.paths.dataset),
                    kind,
                    out: &path,
                    resume: resume.as_deref(),
                    epochs,
                    log: &log,
                },
                out,
            )
        }
        Command::Eval {
            data,
            checkpoints,
            trials,
            conditions,
            fuse,
            scores,
            reports,
        } => {
            let mut conditions = parse_conditions("--conditions", &conditions)?;
            if conditions.is_empty() {
                conditions = cfg.eval.conditions.clone();
            }
            let fuse = if fuse.is_empty() { cfg.eval.fuse.clone() } else { fuse };
            eval(
                EvalArgs {
                    data: data.as_deref().unwrap_or(&cfg.paths.dataset),
                    checkpoints: &checkpoints,
                    trials: trials.as_deref().unwrap_or(&cfg.paths.trials),
                    conditions: &conditions,
                    fuse: &fuse,
                    scores: scores.as_deref().unwrap_or(&cfg.paths.scores),
                    reports: reports.as_deref().unwrap_or(&cfg.paths.reports),
                },
                out,
            )
        }
        Command::Verify {
            checkpoint,
            data,
            enrol,
            test,
            condition,
            threshold,
        } => {
            let condition = parse_conditions("--condition", &[condition])?[0];
            verify(
                &checkpoint,
                data.as_deref().unwrap_or(&cfg.paths.dataset),
                (&enrol, &test),
                condition,
                threshold.unwrap_or(cfg.eval.threshold),
                out,
            )
        }
    }
}

fn parse_conditions(flag: &str, tags: &[String]) -> Result<Vec<Condition>> {
    tags.iter()
        .map(|t| Condition::from_tag(t.trim()).ok_or_else(|| Error::config(flag, format!("unknown condition `{t}`"))))
        .collect()
}

fn say(out: &mut (dyn Write + Send), line: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(line)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io("writing output", e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn gen_data(cfg: &RunConfig, path: &Path, out: &mut (dyn Write + Send)) -> Result<()> {
    let dataset = gen_synthetic(&cfg.data)?;
    create_parent(path)?;
    save_dataset(path, &dataset)?;
    say(
        out,
        format_args!(
            "wrote {}: {} speakers, {} utterances",
            path.display(),
            dataset.manifest.speakers,
            dataset.len()
        ),
    )
}

/// Held-out validation utterances, the ones trials are drawn from.
fn held_out(dataset: &Dataset) -> Result<Vec<&UtteranceRecord>> {
    let (_, val) = split_train_val(&dataset.manifest)?;
    let val: BTreeSet<u32> = val.into_iter().collect();
    Ok(dataset
        .manifest
        .records
        .iter()
        .filter(|r| val.contains(&r.utterance_id))
        .collect())
}

pub fn trials(
    cfg: &RunConfig,
    data: &Path,
    path: &Path,
    conditions: &[Condition],
    out: &mut (dyn Write + Send),
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let pairs = sample_trials(&held_out(&dataset)?, cfg.seed)?;
    let all: Vec<TrialPair> = conditions.iter().flat_map(|&c| with_condition(&pairs, c)).collect();
    create_parent(path)?;
    write_trials(path, &all)?;
    say(
        out,
        format_args!(
            "wrote {}: {} pairs x {} conditions",
            path.display(),
            pairs.len(),
            conditions.len()
        ),
    )
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub kind: Option<TopologyKind>,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub epochs: Option<usize>,
    pub log: &'a Path,
}

pub fn train(cfg: &RunConfig, args: TrainArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    let dataset = load_dataset(args.data)?;
    let (train_ids, val_ids) = split_train_val(&dataset.manifest)?;
    let data = TrainData::new(&dataset, &train_ids, &val_ids)?;
    let mut trainer: Trainer<f32> = match args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if let Some(kind) = args.kind {
                ckpt.expect_topology(kind)?;
            }
            Trainer::resume(&ckpt, args.epochs)?
        }
        None => {
            let kind = args
                .kind
                .ok_or_else(|| Error::config("topology", "--topology is required unless resuming"))?;
            let model = build_model(cfg.topology(kind, data.num_classes()), &cfg.audio, &cfg.video, cfg.seed)?;
            let mut tc = cfg.train.clone();
            if let Some(e) = args.epochs {
                tc.max_epochs = e;
            }
            Trainer::new(model, tc)?
        }
    };
    trainer.run(&data, |_, e| {
        say(
            out,
            format_args!(
                "epoch {:>3}  train {:.6}  val {:.6}  acc {:.3}  lr {}",
                e.epoch, e.train_loss, e.val_loss, e.train_accuracy, e.lr
            ),
        )
    })?;
    create_parent(args.out)?;
    save_checkpoint(args.out, &trainer.checkpoint())?;
    write_text(args.log, &format_log_csv(&trainer.state.log))?;
    say(
        out,
        format_args!(
            "wrote {} ({} model, epoch {}) and {}",
            args.out.display(),
            trainer.model.kind(),
            trainer.state.epoch,
            args.log.display()
        ),
    )
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub checkpoints: &'a [String],
    pub trials: &'a Path,
    /// Empty: score each trial under its own tag.
    pub conditions: &'a [Condition],
    pub fuse: &'a [String],
    pub scores: &'a Path,
    pub reports: &'a Path,
}

fn valid_tag(tag: &str) -> bool {
    !tag.is_empty() && tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn load_models(specs: &[String]) -> Result<BTreeMap<String, Model<f32>>> {
    let mut models = BTreeMap::new();
    for spec in specs {
        let (tag, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::config("--checkpoints", format!("expected tag=path, got `{spec}`")))?;
        if !valid_tag(tag) {
            return Err(Error::config("--checkpoints", format!("bad tag `{tag}` (letters, digits, - and _)")));
        }
        let model = load_checkpoint(Path::new(path))?.infer_model();
        if models.insert(tag.to_string(), model).is_some() {
            return Err(Error::config("--checkpoints", format!("tag `{tag}` given twice")));
        }
    }
    Ok(models)
}

/// Natural condition of a system when a fusion recipe names only its tag.
fn default_condition(kind: TopologyKind) -> Option<Condition> {
    match kind {
        TopologyKind::UnimodalA => Some(Condition::AA),
        TopologyKind::UnimodalV => Some(Condition::VV),
        TopologyKind::MidFusion => Some(Condition::AVAV),
        TopologyKind::MultiView => None,
    }
}

struct Scorer<'a> {
    dataset: &'a Dataset,
    models: &'a BTreeMap<String, Model<f32>>,
    file: Vec<TrialPair>,
    requested: bool,
    sets: BTreeMap<(String, ReportCondition), ScoreSet>,
}

impl Scorer<'_> {
    /// Pairs scored under `condition`: the file's pairs with that tag, or every
    /// distinct pair when conditions were requested or the tag is absent.
    fn pairs(&self, condition: Condition) -> Vec<TrialPair> {
        if !self.requested {
            let tagged: Vec<TrialPair> = self.file.iter().filter(|t| t.condition == condition).copied().collect();
            if !tagged.is_empty() {
                return tagged;
            }
        }
        let mut seen = BTreeSet::new();
        self.file
            .iter()
            .filter(|t| seen.insert((t.enrol_id, t.test_id, t.target)))
            .map(|t| TrialPair { condition, ..*t })
            .collect()
    }

    fn score(&mut self, system: &str, condition: Condition) -> Result<&ScoreSet> {
        let key = (system.to_string(), ReportCondition::Trial(condition));
        if !self.sets.contains_key(&key) {
            let set = score_condition(system, &self.models[system], &self.pairs(condition), condition, self.dataset)?;
            self.sets.insert(key.clone(), set);
        }
        Ok(&self.sets[&key])
    }
}

fn score_file_name(set: &ScoreSet) -> String {
    format!("{}.{}.scores", set.system.replace(':', "-"), set.condition)
}

pub fn eval(args: EvalArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    let dataset = load_dataset(args.data)?;
    let models = load_models(args.checkpoints)?;
    let file = read_trials(args.trials)?;
    let requested = !args.conditions.is_empty();
    let conditions: Vec<Condition> = if requested {
        args.conditions.to_vec()
    } else {
        file.iter().map(|t| t.condition).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let mut scorer = Scorer {
        dataset: &dataset,
        models: &models,
        file,
        requested,
        sets: BTreeMap::new(),
    };

    for &c in &conditions {
        let able: Vec<&String> = models
            .iter()
            .filter(|(_, m)| condition_sides(m.kind(), c).is_ok())
            .map(|(t, _)| t)
            .collect();
        if able.is_empty() {
            let (_, m) = models.iter().next().expect("clap requires a checkpoint");
            let err = condition_sides(m.kind(), c).unwrap_err();
            if requested {
                return Err(err);
            }
            say(out, format_args!("skipping {c}: {err}"))?;
            continue;
        }
        for tag in able {
            scorer.score(tag, c)?;
        }
    }

    let mut fused = Vec::new();
    for recipe in args.fuse {
        let mut parts = Vec::new();
        for part in recipe.split('+') {
            let (tag, cond) = match part.split_once(':') {
                Some((t, c)) => (t, Some(parse_conditions("--fuse", &[c.to_string()])?[0])),
                None => (part, None),
            };
            let model = models
                .get(tag)
                .ok_or_else(|| Error::config("--fuse", format!("`{recipe}` names unknown system `{tag}`")))?;
            let cond = cond.or_else(|| default_condition(model.kind())).ok_or_else(|| {
                Error::config("--fuse", format!("`{tag}` is a multiview model; name a condition, e.g. {tag}:AV_X"))
            })?;
            scorer.score(tag, cond)?;
            parts.push((tag.to_string(), ReportCondition::Trial(cond)));
        }
        let sets: Vec<&ScoreSet> = parts.iter().map(|k| &scorer.sets[k]).collect();
        fused.push(fuse_scores(recipe, &sets)?);
    }
    let mut sets = scorer.sets;
    for f in fused {
        sets.insert((f.system.clone(), f.condition), f);
    }

    let mut results = BTreeMap::new();
    for (key, set) in &sets {
        write_text(&args.scores.join(score_file_name(set)), &format_score_file(set))?;
        results.insert(key.clone(), set.eer()?);
    }
    let report = report_table(&results);
    write_text(&args.reports.join("report.txt"), &report.text())?;
    write_text(&args.reports.join("report.csv"), &report.csv())?;
    out.write_all(report.text().as_bytes())
        .map_err(|e| Error::io("writing output", e))
}

fn load_sample(spec: &str, dataset: &mut Option<Dataset>, data: &Path, frame_shape: [usize; 3]) -> Result<AVSample> {
    match spec.parse::<u32>() {
        Ok(id) => {
            if dataset.is_none() {
                *dataset = Some(load_dataset(data)?);
            }
            Ok(dataset.as_ref().expect("loaded above").sample(id)?.clone())
        }
        Err(_) => sample_from_wav(&PathBuf::from(spec), frame_shape),
    }
}

pub fn verify(
    checkpoint: &Path,
    data: &Path,
    (enrol, test): (&str, &str),
    condition: Condition,
    threshold: f64,
    out: &mut (dyn Write + Send),
) -> Result<()> {
    let model: Model<f32> = load_checkpoint(checkpoint)?.infer_model();
    let (enrol_kind, test_kind) = condition_sides(model.kind(), condition)?;
    let frame_shape = model.video_config().map_or([3, 16, 16], |v| v.frame_shape);
    let mut dataset = None;
    let e = load_sample(enrol, &mut dataset, data, frame_shape)?;
    let t = load_sample(test, &mut dataset, data, frame_shape)?;
    let score = cosine(
        &sample_embedding(&model, &e, enrol_kind)?,
        &sample_embedding(&model, &t, test_kind)?,
    )?;
    let decision = if score >= threshold { "accept" } else { "reject" };
    say(out, format_args!("score\t{}", format_score(score)))?;
    say(out, format_args!("decision\t{decision}\t(threshold {threshold})"))
}
