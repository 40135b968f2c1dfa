//! On-disk layout of datasets and runs.
//!
//! ```text
//! <data>/manifest.json-lines        case_id, split, seed, spec_hash
//! <data>/config.txt                 generating configuration
//! <data>/{labeled,test}/<id>.dmpv|.dmpl
//! <data>/unlabeled/<id>.dmpv
//! <data>/hidden/<id>.dmpl           unlabeled ground truth, diagnostics only
//!
//! <run>/config.txt                  effective configuration
//! <run>/run.json                    mode, final round, K
//! <run>/manifest.json-lines         copy of the dataset manifest
//! <run>/runlog.json-lines           one RunEvent per line
//! <run>/round_<t>/model_<plane>.dmpw
//! <run>/round_<t>/pseudo/<id>.dmpl
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{load_state, save_state, SegmenterState};
use crate::cotrain::{Dataset, LabeledCase, Mode, PlaneModelBundle, RoundRecord, RunLog, UnlabeledCase};
use crate::error::{Error, Result};
use crate::fusion::FusedMask;
use crate::phantom::{GeneratedDataset, ManifestEntry, Split};
use crate::planar::Plane;
use crate::volume::{load_mask, load_volume, save_mask, save_volume};

pub const MANIFEST: &str = "manifest.json-lines";
pub const CONFIG_ECHO: &str = "config.txt";
pub const RUNLOG: &str = "runlog.json-lines";
pub const RUN_META: &str = "run.json";

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn split_dir(split: Split) -> &'static str {
    split.name()
}

pub fn manifest_lines(manifest: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for m in manifest {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn save_dataset(dir: &Path, generated: &GeneratedDataset, config_echo: &str) -> Result<()> {
    let d = &generated.dataset;
    for c in &d.labeled {
        save_volume(&c.volume, dir.join("labeled").join(format!("{}.dmpv", c.id)))?;
        save_mask(&c.mask, dir.join("labeled").join(format!("{}.dmpl", c.id)))?;
    }
    for (c, hidden) in d.unlabeled.iter().zip(&generated.hidden_masks) {
        save_volume(&c.volume, dir.join("unlabeled").join(format!("{}.dmpv", c.id)))?;
        save_mask(hidden, dir.join("hidden").join(format!("{}.dmpl", c.id)))?;
    }
    for c in &d.test {
        save_volume(&c.volume, dir.join("test").join(format!("{}.dmpv", c.id)))?;
        save_mask(&c.mask, dir.join("test").join(format!("{}.dmpl", c.id)))?;
    }
    write(&dir.join(MANIFEST), &manifest_lines(&generated.manifest)?)?;
    write(&dir.join(CONFIG_ECHO), config_echo)
}

/// Load a dataset in manifest order. Hidden masks are not read.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(&dir.join(MANIFEST))?;
    let mut d = Dataset::default();
    for m in manifest {
        let base = dir.join(split_dir(m.split));
        let volume = load_volume(base.join(format!("{}.dmpv", m.case_id)))?;
        match m.split {
            Split::Unlabeled => d.unlabeled.push(UnlabeledCase { id: m.case_id, volume }),
            split => {
                let mask = load_mask(base.join(format!("{}.dmpl", m.case_id)))?;
                let case = LabeledCase { id: m.case_id, volume, mask };
                if split == Split::Labeled {
                    d.labeled.push(case);
                } else {
                    d.test.push(case);
                }
            }
        }
    }
    Ok(d)
}

pub fn round_dir(run: &Path, round: usize) -> PathBuf {
    run.join(format!("round_{round}"))
}

pub fn model_path(dir: &Path, plane: Plane) -> PathBuf {
    dir.join(format!("model_{}.dmpw", plane.name()))
}

pub fn save_bundle(dir: &Path, bundle: &PlaneModelBundle<SegmenterState>) -> Result<()> {
    for (plane, model) in bundle.iter() {
        save_state(model, model_path(dir, plane))?;
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<PlaneModelBundle<SegmenterState>> {
    let models = Plane::ALL
        .iter()
        .map(|&p| {
            let state = load_state(model_path(dir, p))?;
            if state.plane() != p {
                return Err(Error::InvalidArgument(format!(
                    "{} holds a {} model",
                    model_path(dir, p).display(),
                    state.plane()
                )));
            }
            Ok(state)
        })
        .collect::<Result<Vec<_>>>()?;
    let models: [SegmenterState; 3] = models.try_into().unwrap_or_else(|_| unreachable!());
    PlaneModelBundle::new(models)
}

/// Writes each round's models and pseudo-labels as the run progresses.
pub struct Checkpointer<'a> {
    pub run: &'a Path,
    pub unlabeled_ids: Vec<String>,
}

impl Checkpointer<'_> {
    pub fn record(&self, rec: &RoundRecord<'_, SegmenterState>) -> Result<()> {
        let dir = round_dir(self.run, rec.round);
        save_bundle(&dir, rec.models)?;
        if let Some(pseudo) = rec.pseudo {
            for (id, mask) in self.unlabeled_ids.iter().zip(pseudo) {
                save_mask(mask, dir.join("pseudo").join(format!("{id}.dmpl")))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: Mode,
    pub final_round: usize,
    pub num_classes: u8,
}

pub fn write_run_files(run: &Path, meta: &RunMeta, config_echo: &str, manifest: &[ManifestEntry], log: &RunLog) -> Result<()> {
    write(&run.join(RUN_META), &(serde_json::to_string_pretty(meta)? + "\n"))?;
    write(&run.join(CONFIG_ECHO), config_echo)?;
    write(&run.join(MANIFEST), &manifest_lines(manifest)?)?;
    write(&run.join(RUNLOG), &log.to_json_lines()?)
}

pub fn read_run_meta(run: &Path) -> Result<RunMeta> {
    Ok(serde_json::from_str(&read_text(&run.join(RUN_META))?)?)
}

/// Final models of a run directory.
pub fn load_final_bundle(run: &Path) -> Result<PlaneModelBundle<SegmenterState>> {
    let meta = read_run_meta(run)?;
    load_bundle(&round_dir(run, meta.final_round))
}

pub fn save_fused(dir: &Path, id: &str, fused: &FusedMask) -> Result<()> {
    save_mask(&fused.labels, dir.join(format!("{id}.dmpl")))?;
    if let Some(prov) = &fused.provenance {
        save_mask(prov, dir.join(format!("{id}.prov.dmpl")))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}
