//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.jsonl     one JSON object per record
//! <dir>/labels.txt         label names, background first, one per line
//! <dir>/tensors/*.wst      WST1 tensors referenced by the manifest
//! ```
//!
//! Manifest paths are relative to `<dir>`. Cue fields and the attention
//! prediction are `null` for complex and held-out records.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::{CueRecord, SceneRecord, SimpleExample, SyntheticDataset};
use crate::tensor::Tensor;
use crate::types::{CueMap, LabelId, LabelSet, LabelSpace, SegMask};

pub const MANIFEST: &str = "manifest.jsonl";
pub const LABELS: &str = "labels.txt";
pub const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Simple,
    Complex,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub labels: Vec<LabelId>,
    pub split: Split,
    pub image: String,
    pub gt: String,
    pub saliency: Option<String>,
    pub attention: Option<String>,
    pub pred_class: Option<LabelId>,
    pub pred_prob: Option<f64>,
}

fn cue_tensor(m: &CueMap) -> Tensor {
    Tensor::from_f64(vec![m.height() as u32, m.width() as u32], m.values()).expect("cue shape")
}

fn cue_from(t: &Tensor) -> Result<CueMap> {
    let d = t.expect_rank(2)?;
    CueMap::new(d[0], d[1], t.to_f64())
}

fn mask_tensor(m: &SegMask) -> Tensor {
    Tensor::new(
        vec![m.height() as u32, m.width() as u32],
        m.values().iter().map(|&l| l as f32).collect(),
    )
    .expect("mask shape")
}

fn mask_from(t: &Tensor, space: &LabelSpace) -> Result<SegMask> {
    let d = t.expect_rank(2)?;
    let values = t
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32 {
                Ok(v as LabelId)
            } else {
                Err(Error::format(format!("mask value {v} is not a label id")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    SegMask::checked(d[0], d[1], values, space)
}

struct Writer<'a> {
    root: &'a Path,
    out: BufWriter<fs::File>,
}

impl Writer<'_> {
    fn tensor(&self, id: &str, kind: &str, t: &Tensor) -> Result<String> {
        let rel = format!("{TENSOR_DIR}/{id}_{kind}.wst");
        t.save(self.root.join(&rel))?;
        Ok(rel)
    }

    fn scene(&mut self, rec: &SceneRecord, split: Split, cues: Option<&CueRecord>) -> Result<()> {
        let entry = ManifestEntry {
            id: rec.id.clone(),
            labels: rec.labels.iter().collect(),
            split,
            image: self.tensor(&rec.id, "image", &rec.image.to_tensor())?,
            gt: self.tensor(&rec.id, "gt", &mask_tensor(&rec.gt))?,
            saliency: cues
                .map(|c| self.tensor(&rec.id, "saliency", &cue_tensor(&c.saliency)))
                .transpose()?,
            attention: cues
                .map(|c| self.tensor(&rec.id, "attention", &cue_tensor(&c.attention)))
                .transpose()?,
            pred_class: cues.map(|c| c.predicted_class),
            pred_prob: cues.map(|c| c.predicted_prob),
        };
        serde_json::to_writer(&mut self.out, &entry)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

/// Writes every split under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &SyntheticDataset) -> Result<()> {
    fs::create_dir_all(dir.join(TENSOR_DIR))?;
    let mut labels = String::new();
    for name in data.space.names() {
        labels.push_str(name);
        labels.push('\n');
    }
    fs::write(dir.join(LABELS), labels)?;
    let mut w = Writer {
        root: dir,
        out: BufWriter::new(fs::File::create(dir.join(MANIFEST))?),
    };
    for ex in &data.simple {
        w.scene(&ex.scene, Split::Simple, Some(&ex.cues))?;
    }
    for rec in &data.complex {
        w.scene(rec, Split::Complex, None)?;
    }
    for rec in &data.val {
        w.scene(rec, Split::Val, None)?;
    }
    w.out.flush()?;
    Ok(())
}

pub fn read_label_space(dir: &Path) -> Result<LabelSpace> {
    let text = fs::read_to_string(dir.join(LABELS))?;
    let mut names = text.lines().map(str::trim).filter(|l| !l.is_empty());
    match names.next() {
        Some("background") => LabelSpace::new(names),
        _ => Err(Error::format(format!(
            "{LABELS} must start with `background`"
        ))),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(format!("{MANIFEST} line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

fn load_scene(dir: &Path, e: &ManifestEntry, space: &LabelSpace) -> Result<SceneRecord> {
    let image = Image::from_tensor(&Tensor::load(resolve(dir, &e.image))?)?;
    let gt = mask_from(&Tensor::load(resolve(dir, &e.gt))?, space)?;
    if gt.dims() != image.dims() {
        return Err(Error::format(format!(
            "record {}: gt and image sizes differ",
            e.id
        )));
    }
    let labels = LabelSet::new(e.labels.iter().copied())?;
    labels.check(space)?;
    Ok(SceneRecord {
        id: e.id.clone(),
        image,
        labels,
        gt,
    })
}

fn missing(id: &str, field: &str) -> Error {
    Error::format(format!("simple record {id} lacks `{field}`"))
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let space = read_label_space(dir)?;
    let entries = read_manifest(dir)?;
    let mut data = SyntheticDataset {
        space: space.clone(),
        simple: Vec::new(),
        complex: Vec::new(),
        val: Vec::new(),
    };
    for e in &entries {
        let scene = load_scene(dir, e, &space)?;
        match e.split {
            Split::Simple => {
                let class = scene.labels.only().ok_or_else(|| {
                    Error::format(format!("simple record {} has several labels", e.id))
                })?;
                let saliency = e
                    .saliency
                    .as_deref()
                    .ok_or_else(|| missing(&e.id, "saliency"))?;
                let attention = e
                    .attention
                    .as_deref()
                    .ok_or_else(|| missing(&e.id, "attention"))?;
                let cues = CueRecord {
                    scene_id: e.id.clone(),
                    saliency: cue_from(&Tensor::load(resolve(dir, saliency))?)?,
                    attention: cue_from(&Tensor::load(resolve(dir, attention))?)?,
                    attention_class: class,
                    predicted_class: e.pred_class.ok_or_else(|| missing(&e.id, "pred_class"))?,
                    predicted_prob: e.pred_prob.ok_or_else(|| missing(&e.id, "pred_prob"))?,
                };
                if cues.saliency.dims() != scene.image.dims()
                    || cues.attention.dims() != scene.image.dims()
                {
                    return Err(Error::format(format!(
                        "record {}: cue sizes differ from image",
                        e.id
                    )));
                }
                data.simple.push(SimpleExample { scene, cues });
            }
            Split::Complex => data.complex.push(scene),
            Split::Val => data.val.push(scene),
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DatasetSpec};

    #[test]
    fn write_then_read_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            classes: 3,
            simple: 4,
            complex: 2,
            val: 2,
            height: 24,
            width: 20,
            ..Default::default()
        };
        let data = generate_dataset(&spec).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
        let entries = read_manifest(dir.path()).unwrap();
        assert_eq!(entries.len(), 8);
        assert_eq!(entries[0].split, Split::Simple);
        assert!(entries[5].saliency.is_none() && entries[5].pred_prob.is_none());
    }

    #[test]
    fn manifest_line_schema() {
        let line = r#"{"id":"a","labels":[2],"split":"val","image":"i.wst","gt":"g.wst","saliency":null,"attention":null,"pred_class":null,"pred_prob":null}"#;
        let e: ManifestEntry = serde_json::from_str(line).unwrap();
        assert_eq!(e.split, Split::Val);
        assert_eq!(serde_json::to_string(&e).unwrap(), line);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Io(_))));
    }
}
