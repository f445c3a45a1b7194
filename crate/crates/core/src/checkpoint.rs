//! Binary tensor container, model checkpoints and dataset files.
//!
//! Layout, all integers little-endian: magic `HUGC`, `u32` version, `u64`
//! config length and UTF-8 config text, `u32` tensor count, then per tensor a
//! `u32` name length, name bytes, `u32` rank, `u64` dims and `f64` values in
//! row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::embedding::EntryId;
use crate::encoder::ModelParams;
use crate::error::{HugError, Result};
use crate::synthdata::{
    gen_triplets, gen_world, AttributeWorld, Gallery, TripletExample, TripletLabels,
};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HUGC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?.to_vec();
        if magic != MAGIC {
            return Err(r.fail(0, format!("bad magic {magic:?}, expected \"HUGC\"")));
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail(at, format!("unsupported version {version}")));
        }
        let len = r.len_u64("config length")?;
        let at = r.pos;
        let config_text = String::from_utf8(r.take(len, "config text")?.to_vec())
            .map_err(|_| r.fail(at, "config text is not UTF-8"))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| r.fail(at, "tensor name is not UTF-8"))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len_u64("dimension")?);
            }
            let at = r.pos;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    r.fail(
                        at,
                        format!("tensor `{name}` shape {shape:?} exceeds the file"),
                    )
                })?;
            let raw = r.take(n * 8, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(r.fail(r.pos, format!("{} trailing bytes", r.remaining())));
        }
        Ok(Container {
            config_text,
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| HugError::invalid(format!("container has no tensor `{name}`")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> HugError {
        HugError::Format {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(self.fail(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.remaining()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn len_u64(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.fail(at, format!("{what} {v} too large")))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn model_container(model: &ModelParams, cfg: &RunConfig) -> Container {
    Container {
        config_text: cfg.to_text(),
        tensors: model
            .store
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect(),
    }
}

pub fn model_from_container(c: &Container) -> Result<(ModelParams, RunConfig)> {
    let cfg = RunConfig::parse(&c.config_text)?;
    let mut model = ModelParams::new(cfg.dims(), cfg.mode.variant(), cfg.seeds.train)?;
    model.store.load_values(&c.tensors)?;
    Ok((model, cfg))
}

pub fn save_model(path: &Path, model: &ModelParams, cfg: &RunConfig) -> Result<()> {
    write_atomic(path, &model_container(model, cfg).to_bytes())
}

pub fn load_model(path: &Path) -> Result<(ModelParams, RunConfig)> {
    model_from_container(&Container::from_bytes(&fs::read(path)?)?)
}

/// Generated world, splits and gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub world: AttributeWorld,
    pub train: Vec<TripletExample>,
    pub val: Vec<TripletExample>,
    pub gallery: Gallery,
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let world = gen_world(cfg.world, cfg.seeds.world)?;
    let (train, gallery) = gen_triplets(&world, cfg.n_train, &cfg.noise, cfg.seeds.data)?;
    let (val, _) = gen_triplets(&world, cfg.n_val, &cfg.noise, cfg.val_seed())?;
    Ok(Dataset {
        world,
        train,
        val,
        gallery,
    })
}

/// One sidecar line per example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub split: String,
    pub index: usize,
    #[serde(flatten)]
    pub labels: TripletLabels,
}

/// Sidecar path: the dataset path with a `.jsonl` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("jsonl")
}

fn split_tensors(name: &str, examples: &[TripletExample]) -> Vec<(String, Tensor)> {
    let (x_r, x_t, x_c) = crate::synthdata::stack(examples);
    vec![
        (format!("{name}.x_r"), x_r),
        (format!("{name}.x_t"), x_t),
        (format!("{name}.x_c"), x_c),
    ]
}

pub fn dataset_container(data: &Dataset, cfg: &RunConfig) -> Container {
    let mut tensors = vec![
        (
            "world.image_codes".to_string(),
            data.world.image_codes.clone(),
        ),
        (
            "world.text_codes".to_string(),
            data.world.text_codes.clone(),
        ),
        (
            "gallery.ids".to_string(),
            Tensor::matrix(
                data.gallery.ids.len(),
                1,
                data.gallery.ids.iter().map(|id| id.0 as f64).collect(),
            ),
        ),
        ("gallery.images".to_string(), data.gallery.images.clone()),
    ];
    tensors.extend(split_tensors("train", &data.train));
    tensors.extend(split_tensors("val", &data.val));
    Container {
        config_text: cfg.to_text(),
        tensors,
    }
}

pub fn label_lines(data: &Dataset) -> String {
    let mut out = String::new();
    for (split, examples) in [("train", &data.train), ("val", &data.val)] {
        for (index, e) in examples.iter().enumerate() {
            let rec = LabelRecord {
                split: split.to_string(),
                index,
                labels: e.labels.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("labels serialize"));
            out.push('\n');
        }
    }
    out
}

/// Writes the container to `path` and the label sidecar next to it.
pub fn save_dataset(path: &Path, data: &Dataset, cfg: &RunConfig) -> Result<()> {
    write_atomic(path, &dataset_container(data, cfg).to_bytes())?;
    write_atomic(&sidecar_path(path), label_lines(data).as_bytes())
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, RunConfig)> {
    let c = Container::from_bytes(&fs::read(path)?)?;
    let cfg = RunConfig::parse(&c.config_text)?;
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar)?;
    let mut labels: [Vec<TripletLabels>; 2] = Default::default();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let rec: LabelRecord = serde_json::from_str(line).map_err(|e| {
            HugError::invalid(format!("{}: line {}: {e}", sidecar.display(), n + 1))
        })?;
        let slot = match rec.split.as_str() {
            "train" => 0,
            "val" => 1,
            s => {
                return Err(HugError::invalid(format!(
                    "{}: line {}: unknown split `{s}`",
                    sidecar.display(),
                    n + 1
                )))
            }
        };
        if rec.index != labels[slot].len() {
            return Err(HugError::invalid(format!(
                "{}: line {}: out-of-order index",
                sidecar.display(),
                n + 1
            )));
        }
        labels[slot].push(rec.labels);
    }
    let [train_labels, val_labels] = labels;
    let split = |name: &str, labels: Vec<TripletLabels>| -> Result<Vec<TripletExample>> {
        let x_r = rows_of(c.get(&format!("{name}.x_r"))?);
        let x_t = rows_of(c.get(&format!("{name}.x_t"))?);
        let x_c = rows_of(c.get(&format!("{name}.x_c"))?);
        if [x_t.len(), x_c.len(), labels.len()]
            .iter()
            .any(|&n| n != x_r.len())
        {
            return Err(HugError::invalid(format!(
                "split `{name}`: feature and label counts differ"
            )));
        }
        Ok(x_r
            .into_iter()
            .zip(x_t)
            .zip(x_c)
            .zip(labels)
            .map(|(((x_r, x_t), x_c), labels)| TripletExample {
                x_r,
                x_t,
                x_c,
                labels,
            })
            .collect())
    };
    let world = AttributeWorld {
        config: cfg.world,
        image_codes: c.get("world.image_codes")?.clone(),
        text_codes: c.get("world.text_codes")?.clone(),
        seed: cfg.seeds.world,
    };
    let gallery = Gallery {
        ids: c
            .get("gallery.ids")?
            .data()
            .iter()
            .map(|&x| EntryId(x as u64))
            .collect(),
        images: c.get("gallery.images")?.clone(),
    };
    let data = Dataset {
        train: split("train", train_labels)?,
        val: split("val", val_labels)?,
        world,
        gallery,
    };
    Ok((data, cfg))
}
