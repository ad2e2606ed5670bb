use std::fs;
use std::path::{Path, PathBuf};

use motiongen_core::decompose::decompose;
use motiongen_core::denoiser::DenoiserModel;
use motiongen_core::diffusion::{make_schedule, NoiseSchedule};
use motiongen_core::metrics::{evaluate_real, run_protocol, Evaluator, MetricReport, TestCase};
use motiongen_core::motion::{read_motion, write_motion, MotionSequence, Skeleton};
use motiongen_core::render::{render_frames, render_overlay, RenderOptions};
use motiongen_core::retrieval::{build_database, read_index, write_index, DbItem, MotionDatabase, TextEmbedder};
use motiongen_core::sampler::{lower_body_mask, EditMask, Generator, GuidanceConfig};
use motiongen_core::synth::{build_dataset_with, Dataset, Split, FPS};
use motiongen_core::train::{prepare, train, Checkpoint};
use serde::Serialize;

use crate::artifacts::{
    ensure_dir, open_artifact, read_dataset, require_link, write_dataset, write_history, Manifest, CHECKPOINT, HISTORY,
    INDEX,
};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::plot::{sweep_plot, SweepRow};

type Result<T> = std::result::Result<T, CliError>;

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let skeleton = cfg.skeleton();
    let seed = cfg.dataset_seed();
    let ds = build_dataset_with(cfg.dataset.count, seed, cfg.dataset.max_steps, &skeleton)?;
    let dir = cfg.dataset_dir();
    ensure_dir(&dir)?;
    let files = write_dataset(&dir, &ds, &skeleton)?;
    let mut m = Manifest::new("dataset", cfg.hash());
    m.seeds.insert("root".into(), cfg.seed);
    m.seeds.insert("dataset".into(), seed);
    m.counts.insert("samples".into(), ds.samples.len());
    for (name, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)] {
        m.counts.insert(name.into(), ds.split(split).count());
    }
    let m = m.seal(&dir, files)?;
    println!(
        "dataset: {} samples (train {}, val {}, test {}) in {}",
        m.counts["samples"],
        m.counts["train"],
        m.counts["val"],
        m.counts["test"],
        dir.display()
    );
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Skeleton, Manifest)> {
    let dir = cfg.dataset_dir();
    let m = open_artifact(&dir, "dataset")?;
    let seed = m.seeds.get("dataset").copied().unwrap_or_default();
    let (ds, skeleton) = read_dataset(&dir, seed)?;
    Ok((ds, skeleton, m))
}

pub fn build_db(cfg: &ExperimentConfig) -> Result<()> {
    let (ds, _, dm) = load_dataset(cfg)?;
    let embedder = cfg.embedder();
    let dcfg = cfg.decomposer_config();
    let items = ds
        .split(Split::Train)
        .map(|(i, s)| {
            let mut item = DbItem::from_sample(i, s);
            item.scripts = decompose(&s.text, cfg.decomposer.kind, &dcfg)?;
            Ok(item)
        })
        .collect::<Result<Vec<_>>>()?;
    let db = build_database(items, &embedder)?;
    let dir = cfg.database_dir();
    ensure_dir(&dir)?;
    write_index(&db, &dir.join(INDEX))?;
    let mut m = Manifest::new("database", cfg.hash());
    m.seeds.insert("root".into(), cfg.seed);
    m.fingerprints.insert("dataset".into(), dm.artifact().into());
    m.fingerprints.insert("embedder".into(), embedder.fingerprint());
    m.fingerprints.insert("decomposer".into(), decomposer_id(cfg));
    m.counts.insert("entries".into(), db.len());
    m.seal(&dir, vec![INDEX.into()])?;
    println!("database: {} entries in {}", db.len(), dir.display());
    Ok(())
}

fn decomposer_id(cfg: &ExperimentConfig) -> String {
    serde_json::to_value(cfg.decomposer.kind)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn load_database(cfg: &ExperimentConfig, dataset: &Manifest) -> Result<(MotionDatabase, Manifest)> {
    let dir = cfg.database_dir();
    let m = open_artifact(&dir, "database")?;
    require_link(&m, "dataset", dataset)?;
    let embedder = cfg.embedder();
    if m.fingerprint("embedder")? != embedder.fingerprint() {
        return Err(CliError::Fingerprint(format!(
            "database embedder {} differs from configured {}",
            m.fingerprint("embedder")?,
            embedder.fingerprint()
        )));
    }
    let db = read_index(&dir.join(INDEX), &cfg.dataset_dir())?;
    db.check_embedder(&embedder)?;
    Ok((db, m))
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let (ds, _, dm) = load_dataset(cfg)?;
    let (db, bm) = load_database(cfg, &dm)?;
    if bm.fingerprint("decomposer")? != decomposer_id(cfg) {
        return Err(CliError::Fingerprint(format!(
            "database scripts come from the {} decomposer, config asks for {}",
            bm.fingerprint("decomposer")?,
            decomposer_id(cfg)
        )));
    }
    let embedder = cfg.embedder();
    let schedule = make_schedule(&cfg.schedule)?;
    let opts = cfg.data_options();
    let data = prepare(&ds, &db, &embedder, &cfg.decomposer_config(), &opts)?;
    let mut model = DenoiserModel::new(cfg.model_config())?;
    let tc = cfg.train_config();
    eprintln!(
        "training on {} examples ({} val), {} epochs of batch {}",
        data.train.len(),
        data.val.len(),
        tc.epochs,
        tc.batch_size
    );
    let started = std::time::Instant::now();
    let history = train(&mut model, &schedule, &data, &tc, |r| {
        let val = r.val_mse.map_or("-".into(), |v| format!("{v:.5}"));
        eprintln!(
            "epoch {:>3}  loss {:.5}  val {val}  ({:.0}s)",
            r.epoch,
            r.train_loss,
            started.elapsed().as_secs_f64()
        );
    })?;
    let ck = Checkpoint::new(
        model,
        cfg.schedule,
        tc,
        opts,
        embedder.fingerprint(),
        ds.stats.clone(),
        history,
    );
    let dir = cfg.model_dir();
    ensure_dir(&dir)?;
    ck.write(&dir.join(CHECKPOINT))?;
    write_history(&dir.join(HISTORY), &ck.meta.history)?;
    let mut m = Manifest::new("model", cfg.hash());
    m.seeds.insert("root".into(), cfg.seed);
    m.seeds.insert("model".into(), ck.meta.model.seed);
    m.seeds.insert("train".into(), tc.seed);
    m.fingerprints.insert("dataset".into(), dm.artifact().into());
    m.fingerprints.insert("database".into(), bm.artifact().into());
    m.fingerprints.insert("embedder".into(), embedder.fingerprint());
    m.counts.insert("epochs".into(), tc.epochs);
    m.counts.insert(
        "parameters".into(),
        ck.model.params.values.iter().map(|v| v.len()).sum(),
    );
    m.seal(&dir, vec![CHECKPOINT.into(), HISTORY.into()])?;
    let vals: Vec<f64> = ck.meta.history.iter().filter_map(|r| r.val_mse).collect();
    if let (Some(first), Some(last)) = (vals.first(), vals.last()) {
        println!(
            "model: val MSE {first:.5} → {last:.5} ({:.1}% drop) in {}",
            100.0 * (1.0 - last / first),
            dir.display()
        );
    }
    Ok(())
}

/// Everything loaded and cross-checked for generation.
struct Loaded {
    ck: Checkpoint,
    schedule: NoiseSchedule,
    db: Option<MotionDatabase>,
    dataset: Option<(Dataset, Skeleton, Manifest)>,
    model_manifest: Manifest,
}

fn load_model(cfg: &ExperimentConfig, need_dataset: bool) -> Result<Loaded> {
    let dir = cfg.model_dir();
    let mm = open_artifact(&dir, "model")?;
    let ck = Checkpoint::read(&dir.join(CHECKPOINT))?;
    ck.check_embedder(&cfg.embedder())?;
    let schedule = ck.schedule()?;
    let mut dataset = None;
    let mut db = None;
    if ck.meta.data.use_reference || need_dataset {
        let (ds, skel, dm) = load_dataset(cfg)?;
        require_link(&mm, "dataset", &dm)?;
        if ck.meta.data.use_reference {
            let (d, bm) = load_database(cfg, &dm)?;
            require_link(&mm, "database", &bm)?;
            db = Some(d);
        }
        dataset = Some((ds, skel, dm));
    }
    Ok(Loaded {
        ck,
        schedule,
        db,
        dataset,
        model_manifest: mm,
    })
}

impl Loaded {
    fn generator<'a>(
        &'a self,
        embedder: &'a dyn TextEmbedder,
        decomposer: &'a motiongen_core::decompose::DecomposerConfig,
    ) -> Generator<'a> {
        Generator {
            model: &self.ck.model,
            schedule: &self.schedule,
            stats: &self.ck.meta.stats,
            db: self.db.as_ref(),
            embedder,
            decomposer,
            data: self.ck.meta.data,
            fps: FPS,
        }
    }

    fn skeleton(&self, cfg: &ExperimentConfig) -> Skeleton {
        self.dataset.as_ref().map_or_else(|| cfg.skeleton(), |d| d.1.clone())
    }
}

/// Guidance settings from the config with per-command overrides.
#[derive(Debug, Clone, Default)]
pub struct GuidanceFlags {
    pub lambda: Option<f64>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
}

impl GuidanceFlags {
    /// Without a prompt only the θ1 branch applies, so λ is forced to 0.
    fn resolve(&self, cfg: &ExperimentConfig, schedule_len: usize, unconditional: bool) -> Result<GuidanceConfig> {
        let base = cfg.guidance_config();
        let lambda = self.lambda.unwrap_or(base.lambda);
        if unconditional && lambda != 0.0 {
            eprintln!("no prompt: sampling unconditionally with λ = 0");
        }
        let g = GuidanceConfig {
            lambda: if unconditional { 0.0 } else { lambda },
            scale: self.scale.unwrap_or(base.scale),
            seed: self.seed.unwrap_or(base.seed),
            steps: self.steps.unwrap_or(base.steps),
            ..base
        };
        g.validate(schedule_len)?;
        Ok(g)
    }
}

pub struct SampleArgs {
    pub prompt: Option<String>,
    pub frames: Option<usize>,
    pub guidance: GuidanceFlags,
    pub out: PathBuf,
    pub render: Option<PathBuf>,
}

fn render_outputs(motion: &MotionSequence, skeleton: &Skeleton, dir: &Path) -> Result<()> {
    let opts = RenderOptions::default();
    let frames = render_frames(motion, skeleton, &dir.join("frames"), &opts)?;
    render_overlay(
        motion,
        skeleton,
        &dir.join("overlay.png"),
        &RenderOptions { stride: 10, ..opts },
    )?;
    println!("rendered {} frames and overlay.png to {}", frames.len(), dir.display());
    Ok(())
}

fn write_output(motion: &MotionSequence, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_motion(motion, out)?;
    println!("wrote {} frames to {}", motion.len(), out.display());
    Ok(())
}

pub fn sample(cfg: &ExperimentConfig, args: &SampleArgs) -> Result<()> {
    let loaded = load_model(cfg, false)?;
    let embedder = cfg.embedder();
    let dcfg = cfg.decomposer_config();
    let gen = loaded.generator(&embedder, &dcfg);
    let g = args
        .guidance
        .resolve(cfg, loaded.schedule.len(), args.prompt.is_none())?;
    let frames = args.frames.unwrap_or(loaded.ck.meta.data.frames);
    let prompt = args.prompt.as_deref();
    let cond = gen.conditions_for(prompt)?;
    if let Some(scripts) = &cond.scripts {
        println!("scripts: {}", scripts.scripts.join(" | "));
    }
    for p in &cond.provenance {
        let text = gen.db.map_or("", |db| db.entries[p.entry].text.as_str());
        println!(
            "reference: entry {} score {:.4} frames {:?} \"{text}\"",
            p.entry, p.score, p.frames
        );
    }
    let motion = gen.generate(prompt, frames, &g)?;
    write_output(&motion, &args.out)?;
    if let Some(dir) = &args.render {
        render_outputs(&motion, &loaded.skeleton(cfg), dir)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum EditKind {
    /// Keep root, hips and knees; regenerate the rest.
    FixLower,
    /// Keep these half-open frame ranges.
    FixFrames(Vec<(usize, usize)>),
    /// Keep the first and last quarter.
    Inbetween,
}

pub struct EditArgs {
    pub base: PathBuf,
    pub kind: EditKind,
    pub prompt: Option<String>,
    pub guidance: GuidanceFlags,
    pub out: PathBuf,
    pub render: Option<PathBuf>,
}

/// Parses `a..b,c..d` (half-open) frame ranges.
pub fn parse_ranges(text: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    text.split(',')
        .map(|part| {
            let (a, b) = part
                .trim()
                .split_once("..")
                .ok_or_else(|| format!("range `{part}` is not a..b"))?;
            let a: usize = a.trim().parse().map_err(|_| format!("bad start in `{part}`"))?;
            let b: usize = b.trim().parse().map_err(|_| format!("bad end in `{part}`"))?;
            if a >= b {
                return Err(format!("range `{part}` is empty"));
            }
            Ok((a, b))
        })
        .collect()
}

pub fn edit(cfg: &ExperimentConfig, args: &EditArgs) -> Result<()> {
    let loaded = load_model(cfg, false)?;
    let base = read_motion(&args.base).map_err(|_| CliError::missing(&args.base))?;
    let embedder = cfg.embedder();
    let dcfg = cfg.decomposer_config();
    let gen = loaded.generator(&embedder, &dcfg);
    let g = args
        .guidance
        .resolve(cfg, loaded.schedule.len(), args.prompt.is_none())?;
    let prompt = args.prompt.as_deref();
    let skeleton = loaded.skeleton(cfg);
    let motion = match &args.kind {
        EditKind::FixLower => gen.edit_joints(prompt, &base, &lower_body_mask(&skeleton), &g)?,
        EditKind::Inbetween => gen.inbetween(prompt, &base, &g)?,
        EditKind::FixFrames(ranges) => {
            let n = base.len();
            if let Some((_, b)) = ranges.iter().find(|(_, b)| *b > n) {
                return Err(CliError::Config(format!(
                    "frame range ends at {b}, base has {n} frames"
                )));
            }
            let frames: Vec<bool> = (0..n)
                .map(|i| ranges.iter().any(|(a, b)| (*a..*b).contains(&i)))
                .collect();
            let mask = EditMask::new(&frames, &vec![false; base.dim()], base.clone())?;
            gen.impute(prompt, &mask, &g)?
        }
    };
    write_output(&motion, &args.out)?;
    if let Some(dir) = &args.render {
        render_outputs(&motion, &skeleton, dir)?;
    }
    Ok(())
}

pub struct EvalArgs {
    pub sweep: bool,
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct EvalRecord {
    real: MetricReport,
    generated: Vec<(f64, MetricReport)>,
}

pub fn eval(cfg: &ExperimentConfig, args: &EvalArgs) -> Result<()> {
    let loaded = load_model(cfg, true)?;
    let (ds, _, dm) = loaded.dataset.as_ref().expect("dataset loaded for eval");
    let embedder = cfg.embedder();
    let dcfg = cfg.decomposer_config();
    let gen = loaded.generator(&embedder, &dcfg);
    let frames = cfg.train.frames;

    let pairs: Vec<(String, MotionSequence)> = ds
        .split(Split::Train)
        .map(|(_, s)| (s.text.clone(), s.motion.clone()))
        .collect();
    let ecfg = cfg.evaluator_config();
    eprintln!("training evaluator on {} pairs", pairs.len());
    let evaluator = Evaluator::train(&pairs, &ds.stats, &embedder, &ecfg)?;
    let cases: Vec<TestCase> = ds
        .split(Split::Test)
        .map(|(_, s)| TestCase {
            text: s.text.clone(),
            motion: s.motion.fit_length(frames),
        })
        .collect();
    let pcfg = cfg.protocol_config();
    let real = evaluate_real(&evaluator, &embedder, &cases, &pcfg)?;

    let lambdas = match (&args.lambdas, args.sweep) {
        (Some(l), _) => l.clone(),
        (None, true) => cfg.eval.sweep_lambdas.clone(),
        (None, false) => vec![cfg.guidance.lambda],
    };
    if lambdas.is_empty() || lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(CliError::Config("lambdas must be non-empty and lie in [0, 1]".into()));
    }
    let mut generated = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let g = GuidanceConfig {
            lambda,
            steps: cfg.eval.steps,
            ..cfg.guidance_config()
        };
        g.validate(loaded.schedule.len())?;
        let started = std::time::Instant::now();
        let r = run_protocol(&evaluator, &gen, &cases, &g, &pcfg)?;
        eprintln!(
            "λ = {lambda}: fid {:.4} ({:.0}s)",
            r.fid.mean,
            started.elapsed().as_secs_f64()
        );
        generated.push((lambda, r));
    }

    let dir = cfg.eval_dir();
    ensure_dir(&dir)?;
    let mut text = format!(
        "real (ground truth vs itself, {} test texts)\n{}",
        cases.len(),
        real.to_text()
    );
    for (lambda, r) in &generated {
        text += &format!(
            "\ngenerated λ = {lambda}, s = {}, {} steps\n{}",
            cfg.guidance.scale,
            cfg.eval.steps,
            r.to_text()
        );
    }
    fs::write(dir.join("report.txt"), &text)?;
    let record = EvalRecord { real, generated };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    fs::write(dir.join("evaluator.json"), serde_json::to_vec(&evaluator)?)?;
    let mut files = vec!["report.txt".to_string(), "report.json".into(), "evaluator.json".into()];
    if args.sweep {
        let rows: Vec<SweepRow> = record.generated.iter().map(|(l, r)| SweepRow::new(*l, r)).collect();
        fs::write(dir.join("sweep.csv"), SweepRow::csv(&rows))?;
        sweep_plot(&dir.join("sweep.svg"), &rows)?;
        files.extend(["sweep.csv".to_string(), "sweep.svg".into()]);
    }
    let mut m = Manifest::new("eval", cfg.hash());
    m.seeds.insert("root".into(), cfg.seed);
    m.seeds.insert("evaluator".into(), ecfg.seed);
    m.seeds.insert("protocol".into(), pcfg.root_seed);
    m.fingerprints.insert("dataset".into(), dm.artifact().into());
    m.fingerprints
        .insert("model".into(), loaded.model_manifest.artifact().into());
    m.fingerprints.insert("embedder".into(), embedder.fingerprint());
    m.counts.insert("test_cases".into(), cases.len());
    m.counts.insert("runs".into(), pcfg.runs);
    m.seal(&dir, files)?;
    print!("{text}");
    println!("\nreport written to {}", dir.display());
    Ok(())
}

pub fn decompose_cmd(cfg: &ExperimentConfig, text: &str) -> Result<()> {
    let scripts = decompose(text, cfg.decomposer.kind, &cfg.decomposer_config())?;
    for s in &scripts.scripts {
        println!("{s}");
    }
    Ok(())
}
