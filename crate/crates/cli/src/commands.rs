//! One function per subcommand. Each returns the text printed on success.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use panda_core::io::{read_checkpoint, write_checkpoint, write_colored_ply, write_labels, write_weights, Checkpoint};
use panda_core::metrics::{
    error_map_colors, evaluate, COLOR_CORRECT, COLOR_FALSE_NEGATIVE, COLOR_FALSE_POSITIVE, COLOR_MISMATCH,
};
use panda_core::synth::{apply_domain_shift, derive_seed, generate_frames};
use panda_core::trainer::{
    adapt as run_adapt, evaluate_model, predict, prepare_eval, prepare_source, prepare_target_oracle,
    pretrain as run_pretrain, pseudo_labels, EvalItem, SourceItem, TargetItem, ToyModel, TrainConfig,
};
use panda_core::ClassRegistry;

use crate::dataset::{write_split, Split, SPLITS};
use crate::{CliError, ModelArgs, RunConfig};

fn out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn with_writer(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> panda_core::Result<()>) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    f(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    write_file(&out.join("config.txt"), cfg.dump())
}

fn registry(cfg: &RunConfig) -> Arc<ClassRegistry> {
    cfg.scene.registry.clone()
}

fn oracle_seed(cfg: &RunConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, 5000 + index as u64)
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    if cfg.frames == 0 {
        return Err(CliError::Input("frames must be at least 1".into()));
    }
    cfg.validate()?;
    out_dir(out)?;
    let source = generate_frames(&cfg.scene_config(derive_seed(cfg.seed, 1)), cfg.frames)?;
    write_split(out, SPLITS[0], &source)?;
    drop(source);
    let target: Vec<_> = generate_frames(&cfg.scene_config(derive_seed(cfg.seed, 2)), cfg.frames)?
        .iter()
        .enumerate()
        .map(|(i, f)| apply_domain_shift(f, &cfg.shift, derive_seed(cfg.seed, 1000 + i as u64)))
        .collect::<Result<_, _>>()?;
    write_split(out, SPLITS[1], &target)?;
    write_config(cfg, out)?;
    Ok(format!("source: {n} frames\ntarget: {n} frames\n", n = cfg.frames))
}

fn load_source(cfg: &RunConfig, tc: &TrainConfig, root: &Path) -> Result<Vec<SourceItem>, CliError> {
    let split = Split::open(root, SPLITS[0])?;
    split
        .load_all(&registry(cfg))?
        .into_iter()
        .map(|f| prepare_source(f, tc).map_err(CliError::from))
        .collect()
}

fn load_target(cfg: &RunConfig, tc: &TrainConfig, root: &Path) -> Result<(Vec<TargetItem>, Vec<EvalItem>), CliError> {
    let frames = Split::open(root, SPLITS[1])?.load_all(&registry(cfg))?;
    let mut target = Vec::with_capacity(frames.len());
    let mut eval = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        target.push(prepare_target_oracle(f, tc, oracle_seed(cfg, i))?);
        eval.push(prepare_eval(f)?);
    }
    Ok((target, eval))
}

fn save_checkpoint(path: &Path, student: &ToyModel, teacher: &ToyModel, iteration: usize) -> Result<(), CliError> {
    let ckpt = Checkpoint {
        student: student.theta.clone(),
        teacher: teacher.theta.clone(),
        iteration: iteration as u64,
    };
    with_writer(path, |w| write_checkpoint(w, &ckpt))
}

/// Student and teacher models stored in a checkpoint.
fn load_models(cfg: &RunConfig, path: &Path) -> Result<(ToyModel, ToyModel), CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let ckpt = read_checkpoint(&mut BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let shape = ToyModel::shape_for(ckpt.student.len(), registry(cfg).num_semantic())?;
    Ok((ToyModel::from_theta(shape, ckpt.student)?, ToyModel::from_theta(shape, ckpt.teacher)?))
}

fn load_model(cfg: &RunConfig, args: &ModelArgs) -> Result<ToyModel, CliError> {
    let path = args
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Input("--checkpoint is required".into()))?;
    let (student, teacher) = load_models(cfg, path)?;
    Ok(if args.student { student } else { teacher })
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<String, CliError> {
    cfg.validate()?;
    // Drop candidates are only needed during adaptation.
    let tc = TrainConfig {
        use_amd: false,
        ..cfg.train_config()
    };
    let source = load_source(cfg, &tc, data)?;
    let model = run_pretrain(&tc, &source)?;
    out_dir(out)?;
    let path = out.join("pretrain.pndc");
    save_checkpoint(&path, &model, &model, 0)?;
    write_config(cfg, out)?;
    Ok(format!(
        "pretrained {} parameters for {} iterations on {} source frames\ncheckpoint: {}\n",
        model.theta.len(),
        tc.pretrain_iterations,
        source.len(),
        path.display()
    ))
}

pub fn adapt(cfg: &RunConfig, data: &Path, init: Option<&Path>, out: &Path) -> Result<String, CliError> {
    cfg.validate()?;
    let tc = cfg.train_config();
    let source = load_source(cfg, &tc, data)?;
    let (target, eval) = load_target(cfg, &tc, data)?;
    let pre = match init {
        Some(p) => load_models(cfg, p)?.0,
        None => run_pretrain(&tc, &source)?,
    };
    let outcome = run_adapt(&tc, &pre, &source, &target, &eval)?;
    out_dir(out)?;
    let ckpt = out.join("adapt.pndc");
    save_checkpoint(&ckpt, &outcome.student, &outcome.teacher, outcome.iterations)?;
    let traj = out.join("trajectory.csv");
    write_file(&traj, outcome.trajectory.to_csv())?;
    write_config(cfg, out)?;
    let mut s = format!("adapted for {} iterations\n", outcome.iterations);
    if let Some(r) = outcome.trajectory.rows.last() {
        let _ = writeln!(s, "target PQ {:.2}  PQ^th {:.2}  PQ^st {:.2}  mIoU {:.2}", 100.0 * r.pq, 100.0 * r.pq_th, 100.0 * r.pq_st, 100.0 * r.miou);
    }
    let _ = writeln!(s, "checkpoint: {}\ntrajectory: {}", ckpt.display(), traj.display());
    Ok(s)
}

pub fn eval(
    cfg: &RunConfig,
    data: &Path,
    split: &str,
    model: &ModelArgs,
    oracle: bool,
    out: &Path,
) -> Result<String, CliError> {
    let frames = Split::open(data, split)?.load_all(&registry(cfg))?;
    let report = if oracle {
        let labels: Vec<_> = frames.iter().map(|f| f.labels().cloned()).collect::<Result<_, _>>()?;
        evaluate(labels.iter().map(|l| (l, l)))?.ok_or_else(|| CliError::Input("empty split".into()))?
    } else {
        let m = load_model(cfg, model)?;
        let items: Vec<_> = frames.iter().map(prepare_eval).collect::<Result<_, _>>()?;
        evaluate_model(&m, &items, &cfg.train.cluster)?
    };
    out_dir(out)?;
    let path = out.join("report.txt");
    write_file(&path, report.to_key_values())?;
    Ok(format!("{}report: {}\n", report.to_table(), path.display()))
}

fn split_frame(cfg: &RunConfig, data: &Path, split: &str, id: &str) -> Result<(usize, panda_core::Frame), CliError> {
    let s = Split::open(data, split)?;
    let frame = s.load(id, &registry(cfg))?;
    let index = s.ids.iter().position(|i| i == id).expect("load checked the id");
    Ok((index, frame))
}

fn frame_path(out: &Path, id: &str, ext: &str) -> PathBuf {
    out.join(format!("{id}.{ext}"))
}

pub fn refine(
    cfg: &RunConfig,
    data: &Path,
    split: &str,
    id: &str,
    model: &ModelArgs,
    out: &Path,
) -> Result<String, CliError> {
    cfg.validate()?;
    let teacher = load_model(cfg, model)?;
    let (index, frame) = split_frame(cfg, data, split, id)?;
    let tc = cfg.train_config();
    let item = prepare_target_oracle(&frame, &tc, oracle_seed(cfg, index))?;
    let reg = registry(cfg);
    let (_, pl) = pseudo_labels(&teacher, &item, &tc, &reg)?;
    out_dir(out)?;
    let labels = frame_path(out, id, "refined.lbl");
    with_writer(&labels, |w| write_labels(w, &pl.to_labeling()?))?;
    let weights = frame_path(out, id, "weights");
    with_writer(&weights, |w| write_weights(w, &pl.weights))?;

    let covered = pl.weights.iter().filter(|&&w| w > 0.0).count();
    let kept = pl.masks.iter().filter(|m| !m.is_empty()).count();
    let mut s = format!("{kept} segments, {covered} of {} points labeled\n", pl.weights.len());
    for ((c, m), score) in pl.classes.iter().zip(&pl.masks).zip(&pl.scores_norm) {
        if m.is_empty() {
            continue;
        }
        let _ = writeln!(s, "{:<10} {:>6} points  score {:.3}", reg.name(*c), m.count(), score);
    }
    let _ = writeln!(s, "labels: {}\nweights: {}", labels.display(), weights.display());
    Ok(s)
}

pub fn export_errormap(
    cfg: &RunConfig,
    data: &Path,
    split: &str,
    id: &str,
    model: &ModelArgs,
    out: &Path,
) -> Result<String, CliError> {
    let m = load_model(cfg, model)?;
    let (_, frame) = split_frame(cfg, data, split, id)?;
    let item = prepare_eval(&frame)?;
    let (_, pred) = predict(&m, &item.inputs, &item.positions, &cfg.train.cluster, &registry(cfg))?;
    let colors = error_map_colors(&pred.to_labeling()?, &item.labels)?;
    out_dir(out)?;
    let path = frame_path(out, id, "errormap.ply");
    with_writer(&path, |w| write_colored_ply(w, &item.positions, &colors))?;
    let count = |c: [u8; 3]| colors.iter().filter(|&&x| x == c).count();
    Ok(format!(
        "correct {}  false positive {}  false negative {}  mismatched {}\nply: {}\n",
        count(COLOR_CORRECT),
        count(COLOR_FALSE_POSITIVE),
        count(COLOR_FALSE_NEGATIVE),
        count(COLOR_MISMATCH),
        path.display()
    ))
}
