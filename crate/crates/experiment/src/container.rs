//! On-disk dataset container.
//!
//! ```text
//! <dir>/manifest.json         shapes, dtypes, roles, schedule, seed
//! <dir>/arrays/<name>.bin     one raw little-endian row-major file per array
//! ```
//!
//! Array names use `/` as a separator; on disk it becomes `__`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};
use tmra_core::phantom::{ImageRole, MultiCoilImage, PhantomSpec};
use tmra_core::sampling::ScheduleDescriptor;

use crate::{format_err, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARRAY_DIR: &str = "arrays";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Complex64,
    Float32,
    Uint8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Complex64 => 8,
            DType::Float32 => 4,
            DType::Uint8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    Complex64(Vec<Complex32>),
    Float32(Vec<f32>),
    Uint8(Vec<u8>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::Complex64(_) => DType::Complex64,
            ArrayData::Float32(_) => DType::Float32,
            ArrayData::Uint8(_) => DType::Uint8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::Complex64(v) => v.len(),
            ArrayData::Float32(v) => v.len(),
            ArrayData::Uint8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::Complex64(v) => v.iter().flat_map(|c| [c.re.to_le_bytes(), c.im.to_le_bytes()]).flatten().collect(),
            ArrayData::Float32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::Uint8(v) => v.clone(),
        }
    }

    fn from_bytes(dtype: DType, bytes: &[u8]) -> Self {
        let f32s = || bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        match dtype {
            DType::Complex64 => {
                let v: Vec<f32> = f32s().collect();
                ArrayData::Complex64(v.chunks_exact(2).map(|p| Complex32::new(p[0], p[1])).collect())
            }
            DType::Float32 => ArrayData::Float32(f32s().collect()),
            DType::Uint8 => ArrayData::Uint8(bytes.to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub role: String,
    pub file: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub name: String,
    pub split: Split,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub endianness: String,
    pub order: String,
    pub seed: u64,
    pub schedule: ScheduleDescriptor,
    pub vs_choices: Vec<usize>,
    pub instances: Vec<InstanceInfo>,
    pub arrays: Vec<ArrayEntry>,
}

impl Manifest {
    pub fn new(seed: u64, schedule: ScheduleDescriptor, vs_choices: Vec<usize>, instances: Vec<InstanceInfo>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            endianness: "little".into(),
            order: "row-major".into(),
            seed,
            schedule,
            vs_choices,
            instances,
            arrays: Vec::new(),
        }
    }
}

/// Manifest plus array contents. Arrays are kept in single precision, so a
/// write/read round trip is bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetContainer {
    pub manifest: Manifest,
    data: BTreeMap<String, ArrayData>,
}

fn file_name(name: &str) -> String {
    format!("{ARRAY_DIR}/{}.bin", name.replace('/', "__"))
}

impl DatasetContainer {
    pub fn new(manifest: Manifest) -> Self {
        let mut manifest = manifest;
        manifest.arrays.clear();
        Self { manifest, data: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, role: &str, shape: Vec<usize>, data: ArrayData) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return format_err(format!("array {name}: shape {shape:?} does not hold {} elements", data.len()));
        }
        if self.data.contains_key(name) {
            return format_err(format!("array {name} already exists"));
        }
        self.manifest.arrays.push(ArrayEntry {
            name: name.into(),
            dtype: data.dtype(),
            shape,
            role: role.into(),
            file: file_name(name),
        });
        self.data.insert(name.into(), data);
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&ArrayEntry> {
        match self.manifest.arrays.iter().find(|e| e.name == name) {
            Some(e) => Ok(e),
            None => format_err(format!("array {name} is missing")),
        }
    }

    pub fn get(&self, name: &str) -> Result<(&ArrayEntry, &ArrayData)> {
        let entry = self.entry(name)?;
        Ok((entry, &self.data[name]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.arrays.iter().map(|e| e.name.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(ARRAY_DIR))?;
        for e in &self.manifest.arrays {
            fs::write(dir.join(&e.file), self.data[&e.name].to_bytes())?;
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return format_err(format!("unsupported dataset version {}", manifest.format_version));
        }
        if manifest.endianness != "little" || manifest.order != "row-major" {
            return format_err(format!("unsupported layout {} / {}", manifest.endianness, manifest.order));
        }
        let mut data = BTreeMap::new();
        for e in &manifest.arrays {
            let bytes = fs::read(dir.join(&e.file))?;
            let expected = e.shape.iter().product::<usize>() * e.dtype.size();
            if bytes.len() != expected {
                return format_err(format!("array {}: {} bytes on disk, manifest declares {expected}", e.name, bytes.len()));
            }
            if data.insert(e.name.clone(), ArrayData::from_bytes(e.dtype, &bytes)).is_some() {
                return format_err(format!("array {} is listed twice", e.name));
            }
        }
        Ok(Self { manifest, data })
    }

    pub fn put_coils(&mut self, name: &str, role: &str, data: &Array3<Complex64>) -> Result<()> {
        let (c, h, w) = data.dim();
        let values = data.iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect();
        self.insert(name, role, vec![c, h, w], ArrayData::Complex64(values))
    }

    pub fn coils(&self, name: &str) -> Result<Array3<Complex64>> {
        let (e, d) = self.get(name)?;
        let (ArrayData::Complex64(v), [c, h, w]) = (d, e.shape.as_slice()) else {
            return format_err(format!("array {name} is not a [C, H, W] complex64 array"));
        };
        let values = v.iter().map(|z| Complex64::new(z.re as f64, z.im as f64)).collect();
        Array3::from_shape_vec((*c, *h, *w), values).map_err(|e| crate::Error::Format(e.to_string()))
    }

    pub fn put_image(&mut self, name: &str, image: &MultiCoilImage) -> Result<()> {
        let role = match image.role {
            ImageRole::GroundTruth => "ground_truth",
            ImageRole::Aliased => "aliased",
            ImageRole::Reconstruction => "reconstruction",
        };
        self.put_coils(name, role, &image.data)
    }

    pub fn image(&self, name: &str, frame_index: usize) -> Result<MultiCoilImage> {
        let role = match self.entry(name)?.role.as_str() {
            "aliased" => ImageRole::Aliased,
            "reconstruction" => ImageRole::Reconstruction,
            _ => ImageRole::GroundTruth,
        };
        Ok(MultiCoilImage::new(self.coils(name)?, frame_index, role)?)
    }

    pub fn put_real(&mut self, name: &str, role: &str, data: &Array2<f64>) -> Result<()> {
        let (h, w) = data.dim();
        self.insert(name, role, vec![h, w], ArrayData::Float32(data.iter().map(|&v| v as f32).collect()))
    }

    pub fn real(&self, name: &str) -> Result<Array2<f64>> {
        let (e, d) = self.get(name)?;
        let (ArrayData::Float32(v), [h, w]) = (d, e.shape.as_slice()) else {
            return format_err(format!("array {name} is not a [H, W] float32 array"));
        };
        Array2::from_shape_vec((*h, *w), v.iter().map(|&x| x as f64).collect()).map_err(|e| crate::Error::Format(e.to_string()))
    }

    pub fn put_bytes(&mut self, name: &str, role: &str, data: &Array2<u8>) -> Result<()> {
        let (h, w) = data.dim();
        self.insert(name, role, vec![h, w], ArrayData::Uint8(data.iter().copied().collect()))
    }

    pub fn bytes(&self, name: &str) -> Result<Array2<u8>> {
        let (e, d) = self.get(name)?;
        let (ArrayData::Uint8(v), [h, w]) = (d, e.shape.as_slice()) else {
            return format_err(format!("array {name} is not a [H, W] uint8 array"));
        };
        Array2::from_shape_vec((*h, *w), v.clone()).map_err(|e| crate::Error::Format(e.to_string()))
    }

    pub fn put_mask(&mut self, name: &str, mask: &Array2<bool>) -> Result<()> {
        self.put_bytes(name, "mask", &mask.mapv(u8::from))
    }

    pub fn mask(&self, name: &str) -> Result<Array2<bool>> {
        Ok(self.bytes(name)?.mapv(|v| v != 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetContainer {
        let spec = PhantomSpec::desk_default(1);
        let manifest = Manifest::new(
            4,
            ScheduleDescriptor::desk_default(64, 64, 24),
            vec![2, 3, 5],
            vec![InstanceInfo { name: "a".into(), split: Split::Train, spec }],
        );
        let mut c = DatasetContainer::new(manifest);
        let coils = Array3::from_shape_fn((2, 3, 4), |(k, i, j)| Complex64::new(k as f64 + 0.1 * i as f64, -(j as f64) / 3.0));
        c.put_coils("a/x", "ground_truth", &coils).unwrap();
        c.put_real("a/obj", "object", &Array2::from_shape_fn((3, 4), |(i, j)| (i * j) as f64 / 7.0)).unwrap();
        c.put_mask("m", &Array2::from_shape_fn((3, 4), |(i, j)| (i + j) % 2 == 0)).unwrap();
        c
    }

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = DatasetContainer::read(dir.path()).unwrap();
        assert_eq!(back, c);
        let again = tempfile::tempdir().unwrap();
        back.write(again.path()).unwrap();
        for e in &c.manifest.arrays {
            assert_eq!(fs::read(dir.path().join(&e.file)).unwrap(), fs::read(again.path().join(&e.file)).unwrap());
        }
        assert_eq!(back.mask("m").unwrap()[[0, 0]], true);
        assert_eq!(back.coils("a/x").unwrap().dim(), (2, 3, 4));
    }

    #[test]
    fn truncated_array_is_rejected() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let path = dir.path().join(&c.entry("a/x").unwrap().file);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(DatasetContainer::read(dir.path()).is_err());
        fs::remove_file(&path).unwrap();
        assert!(DatasetContainer::read(dir.path()).is_err());
    }

    #[test]
    fn shape_and_duplicate_checks() {
        let mut c = sample();
        assert!(c.insert("b", "x", vec![2, 2], ArrayData::Uint8(vec![0; 3])).is_err());
        assert!(c.insert("m", "x", vec![1], ArrayData::Uint8(vec![0])).is_err());
        assert!(c.real("a/x").is_err());
        assert!(c.coils("missing").is_err());
    }

    #[test]
    fn little_endian_complex_layout() {
        let d = ArrayData::Complex64(vec![Complex32::new(1.0, -2.0)]);
        let b = d.to_bytes();
        assert_eq!(b, [1.0f32.to_le_bytes(), (-2.0f32).to_le_bytes()].concat());
        assert_eq!(ArrayData::from_bytes(DType::Complex64, &b), d);
    }
}
