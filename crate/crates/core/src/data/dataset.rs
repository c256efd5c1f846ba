use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::container::{load_features, write_features};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// Frame features `[L_f × d_v]`.
    pub frames: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub id: String,
    pub video_id: String,
    /// Word-token features `[L_q × d_q]`, including start and end rows.
    pub words: Tensor,
    /// Teacher end-of-sequence embedding.
    pub teacher_eos: Vec<f64>,
    /// Ground-truth frame span `[start, end)` when known.
    pub gt_span: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoRecord>,
    pub queries: Vec<QueryRecord>,
    pub split: Split,
}

impl Dataset {
    pub fn d_v(&self) -> usize {
        self.videos.first().map_or(0, |v| v.frames.cols())
    }

    pub fn d_q(&self) -> usize {
        self.queries.first().map_or(0, |q| q.words.cols())
    }

    pub fn d_teacher(&self) -> usize {
        self.queries.first().map_or(0, |q| q.teacher_eos.len())
    }

    pub fn max_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frames.rows()).max().unwrap_or(0)
    }

    pub fn max_words(&self) -> usize {
        self.queries.iter().map(|q| q.words.rows()).max().unwrap_or(0)
    }

    /// Position of every query's paired video in `videos`.
    pub fn query_video_indices(&self) -> Result<Vec<usize>> {
        let by_id: HashMap<&str, usize> = self
            .videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.as_str(), i))
            .collect();
        let mut out = Vec::with_capacity(self.queries.len());
        let mut dangling = Vec::new();
        for q in &self.queries {
            match by_id.get(q.video_id.as_str()) {
                Some(&i) => out.push(i),
                None => dangling.push(format!("{} -> {}", q.id, q.video_id)),
            }
        }
        if !dangling.is_empty() {
            return Err(Error::Validation(format!(
                "queries reference unknown videos: {}",
                dangling.join(", ")
            )));
        }
        Ok(out)
    }

    /// Checks pairing and dimensional consistency, listing every offender.
    pub fn validate(&self) -> Result<()> {
        if self.videos.is_empty() {
            return Err(Error::Validation("dataset has no videos".into()));
        }
        self.query_video_indices()?;

        let mut problems = Vec::new();
        let mut seen = HashMap::new();
        for v in &self.videos {
            if seen.insert(v.id.as_str(), ()).is_some() {
                problems.push(format!("duplicate video id {}", v.id));
            }
        }
        let d_v = self.d_v();
        for v in &self.videos {
            if v.frames.rows() < 1 {
                problems.push(format!("video {} has no frames", v.id));
            }
            if v.frames.cols() != d_v {
                problems.push(format!("video {} has d_v={} (expected {d_v})", v.id, v.frames.cols()));
            }
        }
        let (d_q, d_t) = (self.d_q(), self.d_teacher());
        for q in &self.queries {
            if q.words.rows() < 2 {
                problems.push(format!("query {} has fewer than 2 word rows", q.id));
            }
            if q.words.cols() != d_q {
                problems.push(format!("query {} has d_q={} (expected {d_q})", q.id, q.words.cols()));
            }
            if q.teacher_eos.len() != d_t {
                problems.push(format!(
                    "query {} has teacher dim {} (expected {d_t})",
                    q.id,
                    q.teacher_eos.len()
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMeta {
    pub d_v: usize,
    pub d_q: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub id: String,
    pub feature_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestQuery {
    pub id: String,
    pub video_id: String,
    pub feature_path: PathBuf,
    pub teacher_eos_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_span: Option<[usize; 2]>,
}

/// JSON manifest. Feature paths are relative to the manifest's directory
/// unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub videos: Vec<ManifestVideo>,
    pub queries: Vec<ManifestQuery>,
    pub meta: ManifestMeta,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));

    let videos = manifest
        .videos
        .par_iter()
        .map(|v| {
            Ok(VideoRecord {
                id: v.id.clone(),
                frames: load_features(&resolve(base, &v.feature_path))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = manifest
        .queries
        .par_iter()
        .map(|q| {
            let eos = load_features(&resolve(base, &q.teacher_eos_path))?;
            if eos.rows() != 1 {
                return Err(Error::DimMismatch(format!(
                    "teacher embedding of query {} has {} rows (expected 1)",
                    q.id,
                    eos.rows()
                )));
            }
            Ok(QueryRecord {
                id: q.id.clone(),
                video_id: q.video_id.clone(),
                words: load_features(&resolve(base, &q.feature_path))?,
                teacher_eos: eos.into_data(),
                gt_span: q.gt_span,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let dataset = Dataset {
        videos,
        queries,
        split: manifest.meta.split,
    };
    dataset.validate()?;
    let mut problems = Vec::new();
    if dataset.d_v() != manifest.meta.d_v {
        problems.push(format!(
            "videos have d_v={} but meta says {}",
            dataset.d_v(),
            manifest.meta.d_v
        ));
    }
    if !dataset.queries.is_empty() && dataset.d_q() != manifest.meta.d_q {
        problems.push(format!(
            "queries have d_q={} but meta says {}",
            dataset.d_q(),
            manifest.meta.d_q
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems.join("; ")));
    }
    Ok(dataset)
}

/// Writes every record as a feature file under `dir` plus `manifest.json`,
/// returning the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut videos = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let rel = PathBuf::from("features").join(format!("{}.prvf", v.id));
        write_features(&dir.join(&rel), &v.frames)?;
        videos.push(ManifestVideo {
            id: v.id.clone(),
            feature_path: rel,
        });
    }
    let mut queries = Vec::with_capacity(dataset.queries.len());
    for q in &dataset.queries {
        let words = PathBuf::from("features").join(format!("{}.words.prvf", q.id));
        let eos = PathBuf::from("features").join(format!("{}.eos.prvf", q.id));
        write_features(&dir.join(&words), &q.words)?;
        write_features(
            &dir.join(&eos),
            &Tensor::matrix(1, q.teacher_eos.len(), q.teacher_eos.clone())?,
        )?;
        queries.push(ManifestQuery {
            id: q.id.clone(),
            video_id: q.video_id.clone(),
            feature_path: words,
            teacher_eos_path: eos,
            gt_span: q.gt_span,
        });
    }
    let manifest = Manifest {
        videos,
        queries,
        meta: ManifestMeta {
            d_v: dataset.d_v(),
            d_q: dataset.d_q(),
            split: dataset.split,
        },
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Groups query indices by their video, in video order.
pub fn queries_by_video(dataset: &Dataset) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (q, v) in dataset.query_video_indices()?.into_iter().enumerate() {
        out.entry(v).or_default().push(q);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_synthetic, EventCount, SynthConfig};

    fn tiny() -> Dataset {
        gen_synthetic(&SynthConfig {
            n_videos: 3,
            frames_per_video: 8,
            events_per_video: EventCount::Fixed(2),
            queries_per_video: 2,
            words_per_query: 3,
            d_v: 6,
            d_q: 5,
            noise_std: 0.1,
            seed: 3,
            basis_seed: 3,
            concepts: 0,
            concept_weight: 0.0,
            split: Split::Eval,
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        let path = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), ds);
    }

    #[test]
    fn dangling_query_is_listed() {
        let mut ds = tiny();
        ds.queries[1].video_id = "ghost".into();
        ds.queries[3].video_id = "ghost2".into();
        let msg = ds.validate().unwrap_err().to_string();
        assert!(msg.contains("ghost") && msg.contains("ghost2"), "{msg}");
    }

    #[test]
    fn meta_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&tiny(), dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"d_v\": 6", "\"d_v\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&tiny(), dir.path()).unwrap();
        let text = fs::read_to_string(&path).unwrap().replacen('{', "{\"extra\": 1,", 1);
        fs::write(&path, text).unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
