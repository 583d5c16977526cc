//! On-disk dataset: `<root>/<split>/manifest.txt` listing frame ids and four
//! files per frame (`.pts`, `.lbl`, `.ppm`, `.calib`).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use panda_core::io::{read_calib, read_labels, read_points, read_ppm, write_calib, write_labels, write_points, write_ppm};
use panda_core::{ClassRegistry, Frame};

use crate::CliError;

pub const SPLITS: [&str; 2] = ["source", "target"];
const MANIFEST: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# panda split";

pub fn frame_id(i: usize) -> String {
    format!("{i:06}")
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_split(root: &Path, split: &str, frames: &[Frame]) -> Result<(), CliError> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut manifest = format!("{MANIFEST_HEADER} {split}\n");
    for (i, frame) in frames.iter().enumerate() {
        let id = frame_id(i);
        let base = dir.join(&id);
        let p = base.with_extension("pts");
        let mut w = create(&p)?;
        write_points(&mut w, &frame.cloud)?;
        finish(w, &p)?;
        let p = base.with_extension("lbl");
        let mut w = create(&p)?;
        write_labels(&mut w, frame.labels()?)?;
        finish(w, &p)?;
        let p = base.with_extension("ppm");
        let mut w = create(&p)?;
        write_ppm(&mut w, &frame.image)?;
        finish(w, &p)?;
        let p = base.with_extension("calib");
        let mut w = create(&p)?;
        write_calib(&mut w, &frame.calib)?;
        finish(w, &p)?;
        manifest.push_str(&id);
        manifest.push('\n');
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest).map_err(|e| CliError::io(&p, e))
}

/// A split opened through its manifest.
#[derive(Debug, Clone)]
pub struct Split {
    pub dir: PathBuf,
    pub ids: Vec<String>,
}

impl Split {
    pub fn open(root: &Path, split: &str) -> Result<Self, CliError> {
        let dir = root.join(split);
        let p = dir.join(MANIFEST);
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        let mut lines = text.lines();
        if !lines.next().is_some_and(|l| l.starts_with(MANIFEST_HEADER)) {
            return Err(CliError::Input(format!("{} is not a split manifest", p.display())));
        }
        let ids: Vec<String> = lines.map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        if ids.is_empty() {
            return Err(CliError::Input(format!("split {} has no frames", dir.display())));
        }
        Ok(Split { dir, ids })
    }

    pub fn load(&self, id: &str, registry: &Arc<ClassRegistry>) -> Result<Frame, CliError> {
        if !self.ids.iter().any(|i| i == id) {
            return Err(CliError::Input(format!("no frame `{id}` in {}", self.dir.display())));
        }
        let base = self.dir.join(id);
        let cloud = read_points(&mut open(&base.with_extension("pts"))?)?;
        let labels = read_labels(&mut open(&base.with_extension("lbl"))?, registry.clone())?;
        let image = read_ppm(&mut open(&base.with_extension("ppm"))?)?;
        let calib = read_calib(&mut open(&base.with_extension("calib"))?)?;
        Ok(Frame::new(cloud, image, calib, Some(labels))?)
    }

    pub fn load_all(&self, registry: &Arc<ClassRegistry>) -> Result<Vec<Frame>, CliError> {
        self.ids.iter().map(|id| self.load(id, registry)).collect()
    }
}
