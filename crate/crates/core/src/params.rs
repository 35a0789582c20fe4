//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.json` and one flat
//! little-endian `f32` file per (role, parameter group). The group of a
//! parameter is the first dotted component of its name (`embed`, `backbone`,
//! `head`, `decoder`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, truncated at two deviations.
    TruncNormal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// A deterministic, ordered collection of named tensors.
///
/// Trainable entries are [`Var`]s; buffers (batch-norm running statistics)
/// are stored the same way but never handed to an optimizer.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    buffers: BTreeSet<String>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            buffers: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the named parameter, creating it with `init` if absent.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.entry(name, shape, init, false)
    }

    /// Like [`param`](Self::param) but for non-trainable state.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.entry(name, shape, init, true)
    }

    fn entry(&mut self, name: &str, shape: &[usize], init: Init, buffer: bool) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        if buffer {
            self.buffers.insert(name.to_string());
        }
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Trainable variables whose names do not start with any of `frozen`.
    pub fn trainable(&self, frozen: &[String]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| !self.buffers.contains(*k))
            .filter(|(k, _)| !frozen.iter().any(|p| k.starts_with(p.as_str())))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Independent copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            vars,
            buffers: self.buffers.clone(),
            rng: self.rng.clone(),
            dtype: self.dtype,
            device: self.device.clone(),
        })
    }

    /// Keeps only entries whose name starts with one of `prefixes`.
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        self.vars.retain(|k, _| prefixes.iter().any(|p| k.starts_with(p)));
        let vars = &self.vars;
        self.buffers.retain(|k| vars.contains_key(k));
    }

    /// Overwrites values of entries present in both stores (shapes must agree).
    pub fn copy_from(&self, other: &ParamStore, prefixes: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for (k, v) in &self.vars {
            if !prefixes.iter().any(|p| k.starts_with(p)) {
                continue;
            }
            if let Some(src) = other.vars.get(k) {
                if src.dims() != v.dims() {
                    return Err(Error::Checkpoint(format!(
                        "`{k}`: checkpoint shape {:?} vs model {:?}",
                        src.dims(),
                        v.dims()
                    )));
                }
                v.set(&src.as_tensor().to_dtype(self.dtype)?)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Flattened values of one entry as `f64`.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter `{name}`")))?;
        Ok(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    pub(crate) fn insert_raw(&mut self, name: &str, tensor: Tensor, buffer: bool) -> Result<()> {
        self.vars.insert(name.to_string(), Var::from_tensor(&tensor.to_dtype(self.dtype)?)?);
        if buffer {
            self.buffers.insert(name.to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Student => "student",
            Role::Teacher => "teacher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub iteration: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    role: Role,
    file: String,
    offset: u64,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    metadata: CheckpointMeta,
    params: Vec<ManifestEntry>,
}

/// Student parameters, optional teacher parameters and training metadata.
pub struct CheckpointBundle {
    pub student: ParamStore,
    pub teacher: Option<ParamStore>,
    pub metadata: CheckpointMeta,
}

impl CheckpointBundle {
    pub fn new(student: ParamStore, teacher: Option<ParamStore>, metadata: CheckpointMeta) -> Result<Self> {
        if let Some(t) = &teacher {
            check_mirrors(&student, t)?;
        }
        Ok(Self {
            student,
            teacher,
            metadata,
        })
    }

    /// Writes the checkpoint atomically: a sibling temp directory is filled
    /// and then renamed over `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let file_name = dir
            .file_name()
            .ok_or_else(|| Error::Invalid(format!("bad checkpoint path {}", dir.display())))?
            .to_string_lossy()
            .to_string();
        let tmp = parent.join(format!(".{file_name}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

        let mut entries = Vec::new();
        let mut stores = vec![(Role::Student, &self.student)];
        if let Some(t) = &self.teacher {
            stores.push((Role::Teacher, t));
        }
        for (role, store) in stores {
            let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
            for (name, var) in store.iter() {
                let group = name.split('.').next().unwrap_or(name);
                let file = format!("{}.{}.bin", role.as_str(), group);
                let buf = files.entry(file.clone()).or_default();
                let offset = buf.len() as u64;
                let values: Vec<f32> = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
                for v in values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                entries.push(ManifestEntry {
                    name: name.to_string(),
                    shape: var.dims().to_vec(),
                    dtype: "f32".to_string(),
                    role,
                    file,
                    offset,
                    trainable: !store.is_buffer(name),
                });
            }
            for (file, bytes) in files {
                let path = tmp.join(&file);
                let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
        let manifest = Manifest {
            metadata: self.metadata.clone(),
            params: entries,
        };
        let mpath = tmp.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut student = ParamStore::new(manifest.metadata.seed, dtype);
        let mut teacher: Option<ParamStore> = None;
        for e in &manifest.params {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("`{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            if !files.contains_key(&e.file) {
                let p = dir.join(&e.file);
                files.insert(e.file.clone(), fs::read(&p).map_err(|err| Error::io(&p, err))?);
            }
            let bytes = &files[&e.file];
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("`{}` runs past the end of {}", e.name, e.file)));
            }
            let values: Vec<f32> = bytes[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::from_vec(values, e.shape.as_slice(), &Device::Cpu)?;
            let store = match e.role {
                Role::Student => &mut student,
                Role::Teacher => teacher.get_or_insert_with(|| ParamStore::new(manifest.metadata.seed, dtype)),
            };
            store.insert_raw(&e.name, t, !e.trainable)?;
        }
        CheckpointBundle::new(student, teacher, manifest.metadata)
    }
}

/// Checks that two stores have identical names and shapes.
pub fn check_mirrors(a: &ParamStore, b: &ParamStore) -> Result<()> {
    let mut problems = Vec::new();
    for (k, v) in a.iter() {
        match b.get(k) {
            None => problems.push(format!("`{k}` missing")),
            Some(o) if o.dims() != v.dims() => {
                problems.push(format!("`{k}` {:?} vs {:?}", v.dims(), o.dims()))
            }
            _ => {}
        }
    }
    for k in b.names() {
        if a.get(k).is_none() {
            problems.push(format!("`{k}` unexpected"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(problems.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new(7, DType::F32);
        s.param("backbone.a.weight", &[3, 4], Init::TruncNormal(0.02)).unwrap();
        s.param("head.fc.bias", &[5], Init::Uniform(1.0)).unwrap();
        s.buffer("decoder.bn.running_var", &[2], Init::Ones).unwrap();
        s
    }

    #[test]
    fn same_seed_same_init() {
        let a = sample_store();
        let b = sample_store();
        for name in a.names() {
            assert_eq!(a.values(name).unwrap(), b.values(name).unwrap());
        }
    }

    #[test]
    fn existing_param_shape_is_checked() {
        let mut s = sample_store();
        assert!(s.param("backbone.a.weight", &[4, 3], Init::Zeros).is_err());
        assert!(s.param("backbone.a.weight", &[3, 4], Init::Zeros).is_ok());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let student = sample_store();
        let teacher = student.deep_clone().unwrap();
        let meta = CheckpointMeta {
            config_hash: "abc".into(),
            iteration: 3,
            seed: 7,
        };
        let bundle = CheckpointBundle::new(student, Some(teacher), meta.clone()).unwrap();
        let path = dir.path().join("ckpt");
        bundle.save(&path).unwrap();
        bundle.save(&path).unwrap();
        let loaded = CheckpointBundle::load(&path, DType::F32).unwrap();
        assert_eq!(loaded.metadata, meta);
        assert!(loaded.student.is_buffer("decoder.bn.running_var"));
        for name in bundle.student.names() {
            let a: Vec<u32> = bundle.student.values(name).unwrap().iter().map(|v| (*v as f32).to_bits()).collect();
            let b: Vec<u32> = loaded.student.values(name).unwrap().iter().map(|v| (*v as f32).to_bits()).collect();
            assert_eq!(a, b);
        }
        assert!(loaded.teacher.is_some());
        assert!(path.join("student.backbone.bin").exists());
        assert!(path.join("teacher.head.bin").exists());
    }

    #[test]
    fn mismatched_teacher_is_rejected() {
        let student = sample_store();
        let mut teacher = student.deep_clone().unwrap();
        teacher.retain_prefixes(&["backbone"]);
        let meta = CheckpointMeta {
            config_hash: String::new(),
            iteration: 0,
            seed: 0,
        };
        assert!(CheckpointBundle::new(student, Some(teacher), meta).is_err());
    }
}
