use std::path::{Path, PathBuf};

use serde::Serialize;

use wakejam::attack::{
    baseline_params, heldout_rooms, initial_params, render_perturbation, run_attack_from, make_instances,
    score_playback, trajectory_csv, BaselineKind, Playback, TrajectoryRow,
};
use wakejam::audio::write_wav;
use wakejam::corpus::{build_corpus, Corpus, LabeledClip, Split};
use wakejam::detector::{train, DetectorModel, TrainingExample, Validation};
use wakejam::features::FeatureFrontend;
use wakejam::gradcheck::{run_gradcheck, GradcheckReport, KindSummary};
use wakejam::metrics::{det_csv, det_curve, score_clips, DetPoint, MetricsReport, ScoredClip};
use wakejam::room::{image_source_rir, sample_rooms, SPEED_OF_SOUND};
use wakejam::synth::SynthParams;
use wakejam::Error;

use crate::{CliError, CliResult, ExperimentConfig};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes `<name>.csv` and its `<name>.json` summary sidecar.
fn write_report(cfg: &ExperimentConfig, name: &str, csv: &str, summary: &impl Serialize) -> CliResult<PathBuf> {
    let dir = &cfg.paths.report_dir;
    ensure_dir(dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    write_text(&csv_path, csv)?;
    write_text(&dir.join(format!("{name}.json")), &(serde_json::to_string_pretty(summary)? + "\n"))?;
    Ok(csv_path)
}

fn metrics_csv(rows: &[(&str, &MetricsReport)]) -> String {
    let mut s = format!("{}\n", MetricsReport::CSV_HEADER);
    for (name, r) in rows {
        s.push_str(&r.csv_row(name));
        s.push('\n');
    }
    s
}

fn load_corpus(cfg: &ExperimentConfig) -> CliResult<Corpus> {
    Ok(Corpus::load(&cfg.paths.corpus, &cfg.frontend)?)
}

/// Loads the checkpoint and checks it was trained for the configured frontend.
pub fn load_model(cfg: &ExperimentConfig) -> CliResult<DetectorModel> {
    let model = DetectorModel::load(&cfg.paths.model)?;
    if model.frontend().config() != &cfg.frontend {
        return Err(Error::Compatibility(format!(
            "checkpoint {} was trained with frontend {:?}, configuration has {:?}",
            cfg.paths.model.display(),
            model.frontend().config(),
            cfg.frontend
        ))
        .into());
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSummary {
    pub split: Split,
    pub clips: usize,
    pub keyword_events: usize,
    pub raw_utterances: usize,
    /// Raw utterances that contain the keyword.
    pub raw_keywords: usize,
    pub augmented_utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub multiplicity: usize,
    pub split_ratio: f64,
    pub splits: Vec<SplitSummary>,
}

pub fn make_corpus(cfg: &ExperimentConfig) -> CliResult<CorpusSummary> {
    let corpus = build_corpus(&cfg.corpus, &cfg.frontend)?;
    corpus.write(&cfg.paths.corpus)?;
    let m = &corpus.manifest;
    let splits = [Split::Train, Split::Test]
        .into_iter()
        .map(|split| {
            let clips: Vec<_> = m.clips.iter().filter(|c| c.split == split).collect();
            let utts: Vec<_> = m.utterances.iter().filter(|u| u.split == split).collect();
            SplitSummary {
                split,
                clips: clips.len(),
                keyword_events: clips.iter().map(|c| c.events.len()).sum(),
                raw_utterances: utts.len(),
                raw_keywords: utts.iter().filter(|u| u.positive).count(),
                augmented_utterances: utts.iter().map(|u| u.variants).sum(),
            }
        })
        .collect::<Vec<_>>();
    let summary = CorpusSummary {
        multiplicity: cfg.corpus.augmentation.multiplicity(),
        split_ratio: cfg.corpus.split_ratio,
        splits,
    };
    let mut csv = String::from("split,clips,keyword_events,raw_utterances,raw_keywords,augmented_utterances\n");
    for s in &summary.splits {
        let name = if s.split == Split::Train { "train" } else { "test" };
        csv.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            s.clips, s.keyword_events, s.raw_utterances, s.raw_keywords, s.augmented_utterances
        ));
    }
    write_report(cfg, "corpus", &csv, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub heldout: MetricsReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub validation_clips: usize,
    pub det: Vec<DetPoint>,
}

fn example(fe: &FeatureFrontend, clip: &LabeledClip) -> CliResult<TrainingExample> {
    Ok(TrainingExample {
        features: fe.extract(&clip.audio)?,
        labels: clip.frame_labels.iter().map(|&y| y as f64).collect(),
    })
}

fn truths_only(clips: &[&LabeledClip]) -> Vec<ScoredClip> {
    clips
        .iter()
        .map(|c| ScoredClip {
            posteriors: Vec::new(),
            truths: c.truths(),
            duration_s: c.audio.duration_secs(),
        })
        .collect()
}

pub fn train_detector(cfg: &ExperimentConfig) -> CliResult<TrainSummary> {
    let corpus = load_corpus(cfg)?;
    let train_clips = corpus.split(Split::Train);
    let test_clips = corpus.split(Split::Test);
    if train_clips.is_empty() || test_clips.is_empty() {
        return Err(Error::Data("corpus needs both train and test clips".into()).into());
    }
    let mut fe = FeatureFrontend::new(cfg.frontend.clone())?;
    let audio: Vec<_> = train_clips.iter().map(|c| &c.audio).collect();
    fe.fit(&audio)?;

    let t = &cfg.training;
    let n_val = ((train_clips.len() as f64 * t.validation_fraction).round() as usize).min(train_clips.len() - 1);
    let (val_clips, fit_clips) = train_clips.split_at(n_val);
    let fit: Vec<_> = fit_clips.iter().map(|c| example(&fe, c)).collect::<CliResult<_>>()?;
    let val: Vec<_> = val_clips.iter().map(|c| example(&fe, c)).collect::<CliResult<_>>()?;
    let validation = (!val.is_empty()).then(|| Validation {
        examples: &val,
        clips: truths_only(val_clips),
        decision: &cfg.eval.decision,
    });

    let model = DetectorModel::new(fe, t.arch.clone(), t.init_seed)?;
    let outcome = train(model, &fit, validation, &t.optimizer)?;
    let model = outcome.model;
    if let Some(parent) = cfg.paths.model.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    model.save(&cfg.paths.model)?;

    let scored = score_playback(&model, &test_clips, &Playback::default())?;
    let heldout = score_clips(&scored, &cfg.eval.decision, model.timing());
    // Open interval: thresholds of exactly 0 or 1 are degenerate.
    let taus: Vec<f64> = (1..=t.det_points).map(|i| i as f64 / (t.det_points + 1) as f64).collect();
    let det = det_curve(&scored, &taus, &cfg.eval.decision, model.timing())?;

    let summary = TrainSummary {
        heldout,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.loss_curve.len(),
        validation_clips: n_val,
        det,
    };
    write_report(cfg, "train_metrics", &metrics_csv(&[("heldout", &heldout)]), &summary)?;
    write_report(cfg, "det", &det_csv(&summary.det), &summary.det)?;
    let mut loss_csv = String::from("epoch,train_loss,validation_f1\n");
    for (i, l) in outcome.loss_curve.iter().enumerate() {
        let f1 = outcome.validation_f1.get(i).map_or(String::new(), |v| format!("{v:.6}"));
        loss_csv.push_str(&format!("{i},{l},{f1}\n"));
    }
    #[derive(Serialize)]
    struct LossSummary<'a> {
        loss: &'a [f64],
        validation_f1: &'a [f64],
        best_epoch: usize,
    }
    write_report(
        cfg,
        "train_loss",
        &loss_csv,
        &LossSummary {
            loss: &outcome.loss_curve,
            validation_f1: &outcome.validation_f1,
            best_epoch: outcome.best_epoch,
        },
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Clean,
    Attacked,
    RandomMusic,
    RandomNotes,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Clean => "clean",
            EvalMode::Attacked => "attacked",
            EvalMode::RandomMusic => "random_music",
            EvalMode::RandomNotes => "random_notes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub mode: EvalMode,
    pub rooms: bool,
    pub perturbation_rms: Option<f64>,
    pub report: MetricsReport,
}

fn load_attack(cfg: &ExperimentConfig) -> CliResult<SynthParams> {
    if !cfg.paths.attack.exists() {
        return Err(CliError::Usage(format!(
            "attack artifact {} does not exist; run `attack` first",
            cfg.paths.attack.display()
        )));
    }
    Ok(SynthParams::load(&cfg.paths.attack)?)
}

/// The perturbation an evaluation mode plays, if any.
pub fn mode_perturbation(cfg: &ExperimentConfig, mode: EvalMode) -> CliResult<Option<wakejam::audio::AudioClip>> {
    let kind = match mode {
        EvalMode::Clean => return Ok(None),
        EvalMode::Attacked => return Ok(Some(render_perturbation(&load_attack(cfg)?, None)?)),
        EvalMode::RandomMusic => BaselineKind::RandomMusic,
        EvalMode::RandomNotes => BaselineKind::RandomSingleNotes,
    };
    // Baselines play at the adversary's loudness, or at a configured level.
    let (template, rms) = if cfg.paths.attack.exists() {
        let adv = load_attack(cfg)?;
        let rms = render_perturbation(&adv, None)?.rms();
        (adv, rms)
    } else if let Some(rms) = cfg.eval.baseline_rms {
        (initial_params(&cfg.attack)?, rms)
    } else {
        return Err(CliError::Usage(
            "baseline modes need an attack artifact or eval.baseline_rms to set their loudness".into(),
        ));
    };
    let params = baseline_params(kind, &template, cfg.eval.baseline_seed)?;
    Ok(Some(render_perturbation(&params, Some(rms))?))
}

pub fn evaluate(cfg: &ExperimentConfig, mode: EvalMode, rooms: bool) -> CliResult<EvalSummary> {
    let model = load_model(cfg)?;
    let corpus = load_corpus(cfg)?;
    let test = corpus.split(Split::Test);
    let perturbation = mode_perturbation(cfg, mode)?;
    let room_set = if rooms { heldout_rooms(&cfg.eval.heldout_rooms)? } else { Vec::new() };
    let playback = Playback {
        perturbation: perturbation.as_ref(),
        rooms: &room_set,
        split_path: cfg.attack.split_path,
    };
    let scored = score_playback(&model, &test, &playback)?;
    let report = score_clips(&scored, &cfg.eval.decision, model.timing());
    let name = format!("eval_{}{}", mode.name(), if rooms { "_rooms" } else { "" });
    let summary = EvalSummary {
        mode,
        rooms,
        perturbation_rms: perturbation.as_ref().map(|p| p.rms()),
        report,
    };
    write_report(cfg, &name, &metrics_csv(&[(mode.name(), &report)]), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSummary {
    pub clean: MetricsReport,
    pub attacked: MetricsReport,
    pub clean_rooms: MetricsReport,
    pub attacked_rooms: MetricsReport,
    pub best_step: usize,
    pub best_loss: f64,
    pub steps: usize,
    pub perturbation_rms: f64,
}

pub fn attack(cfg: &ExperimentConfig, mut progress: impl FnMut(&TrajectoryRow, &SynthParams)) -> CliResult<AttackSummary> {
    let model = load_model(cfg)?;
    let corpus = load_corpus(cfg)?;
    let train_clips = corpus.split(Split::Train);
    let test = corpus.split(Split::Test);
    let pool = make_instances(&train_clips, &model, &cfg.attack)?;
    let result = run_attack_from(&model, &pool, initial_params(&cfg.attack)?, &cfg.attack, &mut progress)?;
    let params = &result.best_params;
    params.save(&cfg.paths.attack)?;
    let delta = render_perturbation(params, None)?;
    write_wav(&delta, cfg.attack_wav())?;
    write_report(cfg, "trajectory", &trajectory_csv(&result.trajectory), &result.trajectory)?;

    let rooms = heldout_rooms(&cfg.eval.heldout_rooms)?;
    let decision = &cfg.eval.decision;
    let run = |perturbation: Option<&wakejam::audio::AudioClip>, rooms: &[wakejam::room::ImpulseResponse]| {
        let playback = Playback {
            perturbation,
            rooms,
            split_path: cfg.attack.split_path,
        };
        Ok::<_, CliError>(score_clips(&score_playback(&model, &test, &playback)?, decision, model.timing()))
    };
    let summary = AttackSummary {
        clean: run(None, &[])?,
        attacked: run(Some(&delta), &[])?,
        clean_rooms: run(None, &rooms)?,
        attacked_rooms: run(Some(&delta), &rooms)?,
        best_step: result.best_step,
        best_loss: result.best_loss,
        steps: result.trajectory.len(),
        perturbation_rms: delta.rms(),
    };
    let csv = metrics_csv(&[
        ("clean", &summary.clean),
        ("attacked", &summary.attacked),
        ("clean_rooms", &summary.clean_rooms),
        ("attacked_rooms", &summary.attacked_rooms),
    ]);
    write_report(cfg, "attack_metrics", &csv, &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RirRow {
    pub index: usize,
    pub file: String,
    pub dims: [f64; 3],
    pub source: [f64; 3],
    pub mic: [f64; 3],
    pub absorption: f64,
    pub max_order: usize,
    pub distance: f64,
    pub expected_direct_index: f64,
    pub direct_index: usize,
    pub direct_amplitude: f64,
    pub taps: usize,
    pub nonzero_taps: usize,
}

pub fn rir(cfg: &ExperimentConfig) -> CliResult<Vec<RirRow>> {
    let dir = cfg.paths.report_dir.join("rir");
    ensure_dir(&dir)?;
    let rooms = sample_rooms(&cfg.rir)?;
    let mut rows = Vec::with_capacity(rooms.len());
    for (index, room) in rooms.iter().enumerate() {
        let r = image_source_rir(room)?;
        let file = format!("rir/rir_{index:03}.wav");
        write_wav(&r.to_clip(), cfg.paths.report_dir.join(&file))?;
        let direct_index = r
            .first_nonzero()
            .ok_or_else(|| Error::Geometry(format!("room {index} produced an all-zero response")))?;
        rows.push(RirRow {
            index,
            file,
            dims: room.dims,
            source: room.source,
            mic: room.mic,
            absorption: room.absorption[0],
            max_order: room.max_order,
            distance: room.distance(),
            expected_direct_index: room.fs as f64 * room.distance() / SPEED_OF_SOUND,
            direct_index,
            direct_amplitude: r.taps[direct_index],
            taps: r.taps.len(),
            nonzero_taps: r.nonzero_taps(),
        });
    }
    let mut csv = String::from(
        "index,file,lx,ly,lz,sx,sy,sz,mx,my,mz,absorption,max_order,distance,expected_direct_index,direct_index,direct_amplitude,taps,nonzero_taps\n",
    );
    for r in &rows {
        let v3 = |v: [f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.index,
            r.file,
            v3(r.dims),
            v3(r.source),
            v3(r.mic),
            r.absorption,
            r.max_order,
            r.distance,
            r.expected_direct_index,
            r.direct_index,
            r.direct_amplitude,
            r.taps,
            r.nonzero_taps
        ));
    }
    write_report(cfg, "rir", &csv, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub passed: bool,
    pub non_finite: usize,
    pub kinds: Vec<KindSummary>,
}

/// Writes the audit reports; a failed check is a numeric error after writing.
pub fn gradcheck(cfg: &ExperimentConfig) -> CliResult<GradcheckReport> {
    let report = run_gradcheck(&cfg.gradcheck)?;
    let summary = GradcheckSummary {
        passed: report.passed(),
        non_finite: report.non_finite(),
        kinds: report.summaries.clone(),
    };
    write_report(cfg, "gradcheck", &report.to_csv(), &summary)?;
    if !summary.passed {
        return Err(Error::Numeric(format!("gradient check failed: {:?}", report.summaries)).into());
    }
    Ok(report)
}
