//! Binary containers: a little-endian `u64` header length, a JSON header,
//! then little-endian numeric data.
//!
//! Measurements are stored as complex64 (two `f32`s per entry). Sensing
//! matrices are cached as their per-antenna gain table in complex128, since
//! the table is what the matrix is rebuilt from and rounding it to `f32`
//! would move every entry of `A`. Datasets hold all inputs as `f32`, then
//! all labels.

use std::io::Write as _;
use std::path::Path;

use lowalt_core::channel::{Measurement, MeasurementLayout};
use lowalt_core::imaging::{SensingMatrix, Storage};
use lowalt_core::learning::{Dataset, TrainSample};
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::schema::{sha256_hex, PriorJson};

/// Version shared by every container format.
pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to `path` through a temporary file and a rename, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Serializes a header and payload into one container.
pub fn encode<H: Serialize>(header: &H, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("headers serialize");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

/// Splits a container into its parsed header and payload.
pub fn decode<H: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<(H, Vec<u8>), CliError> {
    if bytes.len() < 8 {
        return Err(CliError::format(path, "truncated header length"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let end = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CliError::format(path, "header length exceeds file size"))?;
    let text = std::str::from_utf8(&bytes[8..end]).map_err(|e| CliError::format(path, e))?;
    let header = crate::schema::parse_json(text)?;
    Ok((header, bytes[end..].to_vec()))
}

fn read_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(path, &bytes)
}

fn check_format(path: &Path, format: &str, expected: &str, version: u32) -> Result<(), CliError> {
    if format != expected {
        return Err(CliError::format(path, format!("expected a {expected} file, found {format}")));
    }
    if version != FORMAT_VERSION {
        return Err(CliError::format(path, format!("unsupported {format} version {version}")));
    }
    Ok(())
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f32>, CliError> {
    if bytes.len() != 4 * expected {
        return Err(CliError::format(
            path,
            format!("payload holds {} bytes, expected {}", bytes.len(), 4 * expected),
        ));
    }
    Ok(f32s(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutJson {
    pub pairs: Vec<(usize, usize)>,
    pub antennas_per_bs: usize,
    pub n_subcarriers: usize,
    /// Always `((pair·Na + tx)·Na + rx)·Nf + subcarrier`.
    pub index_order: String,
}

const INDEX_ORDER: &str = "((pair*Na+tx)*Na+rx)*Nf+subcarrier";

impl From<&MeasurementLayout> for LayoutJson {
    fn from(l: &MeasurementLayout) -> Self {
        LayoutJson {
            pairs: l.pairs.clone(),
            antennas_per_bs: l.antennas_per_bs,
            n_subcarriers: l.n_subcarriers,
            index_order: INDEX_ORDER.into(),
        }
    }
}

impl LayoutJson {
    fn to_layout(&self, path: &Path) -> Result<MeasurementLayout, CliError> {
        if self.index_order != INDEX_ORDER {
            return Err(CliError::format(path, format!("unknown index order {}", self.index_order)));
        }
        Ok(MeasurementLayout {
            pairs: self.pairs.clone(),
            antennas_per_bs: self.antennas_per_bs,
            n_subcarriers: self.n_subcarriers,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub dtype: String,
    pub len: usize,
    pub noise_std: f64,
    pub layout: LayoutJson,
}

pub fn encode_measurement(m: &Measurement, config_hash: &str) -> Vec<u8> {
    let header = MeasurementHeader {
        format: "measurement".into(),
        version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        dtype: "complex64".into(),
        len: m.y.len(),
        noise_std: m.noise_std,
        layout: (&m.layout).into(),
    };
    let payload: Vec<u8> = m
        .y
        .iter()
        .flat_map(|z| [z.re as f32, z.im as f32])
        .flat_map(f32::to_le_bytes)
        .collect();
    encode(&header, &payload)
}

pub fn save_measurement(path: &Path, m: &Measurement, config_hash: &str) -> Result<(), CliError> {
    write_atomic(path, &encode_measurement(m, config_hash))
}

pub fn load_measurement(path: &Path) -> Result<(Measurement, MeasurementHeader), CliError> {
    let (h, payload): (MeasurementHeader, _) = read_container(path)?;
    check_format(path, &h.format, "measurement", h.version)?;
    let layout = h.layout.to_layout(path)?;
    if layout.len() != h.len {
        return Err(CliError::format(path, "layout does not match the entry count"));
    }
    let raw = bytes_to_f32(path, &payload, 2 * h.len)?;
    let y = raw
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0] as f64, c[1] as f64))
        .collect();
    Ok((
        Measurement {
            y,
            layout,
            noise_std: h.noise_std,
        },
        h,
    ))
}

/// One CSV row per entry with its decoded index.
pub fn measurement_csv(m: &Measurement) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "pair", "bs_tx", "bs_rx", "tx_element", "rx_element", "subcarrier", "re", "im"])
        .expect("in-memory write");
    for (i, z) in m.y.iter().enumerate() {
        let d = m.layout.decode(i);
        let ints = [i, d.pair, d.bs_tx, d.bs_rx, d.tx_element, d.rx_element, d.subcarrier];
        let mut row: Vec<String> = ints.iter().map(usize::to_string).collect();
        row.push(format!("{:e}", z.re));
        row.push(format!("{:e}", z.im));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub dtype: String,
    pub n_voxels: usize,
    pub n_antennas: usize,
    /// Gain `h(a, v, f)` sits at `(v·n_antennas + a)·n_f + f`.
    pub gain_order: String,
    pub layout: LayoutJson,
}

pub fn save_matrix(path: &Path, a: &SensingMatrix, config_hash: &str) -> Result<(), CliError> {
    let header = MatrixHeader {
        format: "sensing-matrix".into(),
        version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        dtype: "complex128".into(),
        n_voxels: a.ncols(),
        n_antennas: a.n_antennas(),
        gain_order: "(voxel*n_antennas+antenna)*Nf+subcarrier".into(),
        layout: a.layout().into(),
    };
    let payload: Vec<u8> = a
        .gains()
        .iter()
        .flat_map(|z| [z.re, z.im])
        .flat_map(f64::to_le_bytes)
        .collect();
    write_atomic(path, &encode(&header, &payload))
}

/// Loads a cached matrix; `expected_hash` guards against a cache built for
/// another configuration.
pub fn load_matrix(path: &Path, expected_hash: Option<&str>, storage: Storage) -> Result<SensingMatrix, CliError> {
    let (h, payload): (MatrixHeader, _) = read_container(path)?;
    check_format(path, &h.format, "sensing-matrix", h.version)?;
    if let Some(expected) = expected_hash {
        if expected != h.config_hash {
            return Err(CliError::ConfigMismatch {
                path: path.to_path_buf(),
                expected: expected.into(),
                found: h.config_hash,
            });
        }
    }
    if payload.len() % 16 != 0 {
        return Err(CliError::format(path, "payload is not a whole number of complex128 values"));
    }
    let gains = f64s(&payload)
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect();
    let a = SensingMatrix::from_gains(h.layout.to_layout(path)?, h.n_voxels, gains, storage)?;
    if a.n_antennas() != h.n_antennas {
        return Err(CliError::format(path, "antenna count does not match the layout"));
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub dtype: String,
    pub prior: PriorJson,
    /// The normalization constant already divided out of the inputs.
    pub scale: f64,
    pub n_samples: usize,
    pub input_len: usize,
    pub label_len: usize,
    /// Target count of each scene.
    pub k: Vec<usize>,
}

pub fn encode_dataset(d: &Dataset, config_hash: &str) -> Vec<u8> {
    let input_len = d.samples.first().map_or(0, |s| s.input.len());
    let label_len = d.samples.first().map_or(0, |s| s.label.len());
    let header = DatasetHeader {
        format: "dataset".into(),
        version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        dtype: "float32".into(),
        prior: d.prior.into(),
        scale: d.scale,
        n_samples: d.samples.len(),
        input_len,
        label_len,
        k: d.samples.iter().map(|s| s.k).collect(),
    };
    let mut payload = Vec::with_capacity(4 * d.samples.len() * (input_len + label_len));
    for s in &d.samples {
        payload.extend(s.input.iter().flat_map(|v| v.to_le_bytes()));
    }
    for s in &d.samples {
        payload.extend(s.label.iter().flat_map(|v| v.to_le_bytes()));
    }
    encode(&header, &payload)
}

/// SHA-256 of the encoded dataset, recorded with models trained on it.
pub fn dataset_hash(d: &Dataset, config_hash: &str) -> String {
    sha256_hex(&encode_dataset(d, config_hash))
}

pub fn save_dataset(path: &Path, d: &Dataset, config_hash: &str) -> Result<(), CliError> {
    write_atomic(path, &encode_dataset(d, config_hash))
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, DatasetHeader), CliError> {
    let (h, payload): (DatasetHeader, _) = read_container(path)?;
    check_format(path, &h.format, "dataset", h.version)?;
    if h.k.len() != h.n_samples {
        return Err(CliError::format(path, "one target count per sample expected"));
    }
    let n_in = h.n_samples * h.input_len;
    let values = bytes_to_f32(path, &payload, n_in + h.n_samples * h.label_len)?;
    let (inputs, labels) = values.split_at(n_in);
    let samples = (0..h.n_samples)
        .map(|i| TrainSample {
            input: inputs[i * h.input_len..(i + 1) * h.input_len].to_vec(),
            label: labels[i * h.label_len..(i + 1) * h.label_len].to_vec(),
            k: h.k[i],
        })
        .collect();
    let d = Dataset {
        samples,
        scale: h.scale,
        prior: h.prior.into(),
    };
    Ok((d, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lowalt_core::channel::{synthesize_csi, Noise};
    use lowalt_core::imaging::build_sensing_matrix;
    use lowalt_core::learning::PriorKind;
    use lowalt_core::rng::seeded;
    use lowalt_core::scene::{build_bs_layout, sample_scene, SystemConfig, VoxelGrid};

    fn small() -> (SystemConfig, VoxelGrid) {
        let config = SystemConfig {
            upa_side: 2,
            n_subcarriers: 2,
            ..SystemConfig::default()
        };
        (config, VoxelGrid::centered_slice(4, 3, 6.0, 40.0))
    }

    #[test]
    fn measurement_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (config, grid) = small();
        let layout = build_bs_layout(&config).unwrap();
        let mut rng = seeded(3);
        let scene = sample_scene(&grid, 1..=3, false, &mut rng).unwrap();
        let m = synthesize_csi(&scene, &config, &layout, Noise::On, &mut rng).unwrap();
        let path = dir.path().join("m.bin");
        save_measurement(&path, &m, "abc").unwrap();
        let (back, h) = load_measurement(&path).unwrap();
        assert_eq!(h.config_hash, "abc");
        assert_eq!(back.layout, m.layout);
        for (a, b) in back.y.iter().zip(&m.y) {
            assert_eq!(a.re, b.re as f32 as f64);
            assert_eq!(a.im, b.im as f32 as f64);
        }
        let csv = measurement_csv(&back);
        assert_eq!(csv.lines().count(), m.y.len() + 1);
    }

    #[test]
    fn matrix_cache_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (config, grid) = small();
        let layout = build_bs_layout(&config).unwrap();
        let a = build_sensing_matrix(&grid, &config, &layout, Storage::Dense).unwrap();
        let path = dir.path().join("a.bin");
        save_matrix(&path, &a, "h1").unwrap();
        let b = load_matrix(&path, Some("h1"), Storage::Dense).unwrap();
        assert_eq!(a.dense_entries(), b.dense_entries());
        assert!(matches!(
            load_matrix(&path, Some("h2"), Storage::Dense),
            Err(CliError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset {
            samples: (0..3)
                .map(|i| TrainSample {
                    input: vec![i as f32; 4],
                    label: vec![-(i as f32); 2],
                    k: i,
                })
                .collect(),
            scale: 2.5,
            prior: PriorKind::SubspacePursuit { k_prior: 5 },
        };
        let path = dir.path().join("d.bin");
        save_dataset(&path, &d, "x").unwrap();
        let (back, _) = load_dataset(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(dataset_hash(&back, "x"), dataset_hash(&d, "x"));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, [200, 0, 0, 0, 0, 0, 0, 0, b'{']).unwrap();
        assert!(matches!(load_measurement(&path), Err(CliError::Format { .. })));
    }
}
