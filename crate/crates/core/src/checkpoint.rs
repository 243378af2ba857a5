//! Model checkpoints: a little-endian binary parameter blob plus a
//! `manifest.json` that identifies the run without reading the blob.
//!
//! Blob layout: magic `IDEACKPT`, format version (u32), six architecture
//! sizes (u64), then for every parameter matrix its rows and columns (u64)
//! followed by the values (f64) in row-major order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Arch, IdeaModel};
use crate::rng;
use crate::train::{EpochMetrics, TrainState};

pub const MODEL_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";

const MAGIC: &[u8; 8] = b"IDEACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: Arch,
    pub seed: u64,
    pub epoch: usize,
    pub variant: String,
    pub val_acc: Option<f64>,
    pub metrics: Option<EpochMetrics>,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: IdeaModel,
    pub config: TrainConfig,
    pub manifest: CheckpointManifest,
}

fn arch_sizes(a: &Arch) -> [usize; 6] {
    [a.num_features, a.hidden, a.latent, a.num_classes, a.num_domains, a.domain_hidden]
}

pub fn write_model(model: &IdeaModel, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    for s in arch_sizes(&model.arch) {
        w.write_u64::<LittleEndian>(s as u64)?;
    }
    for p in model.all_params() {
        w.write_u64::<LittleEndian>(p.nrows() as u64)?;
        w.write_u64::<LittleEndian>(p.ncols() as u64)?;
        for v in p.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<IdeaModel> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable blob: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint blob (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut s = [0usize; 6];
    for v in &mut s {
        *v = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    }
    let arch = Arch {
        num_features: s[0],
        hidden: s[1],
        latent: s[2],
        num_classes: s[3],
        num_domains: s[4],
        domain_hidden: s[5],
    };
    // Shapes come from a fresh model of the same architecture.
    let mut model = IdeaModel::new(arch, &mut rng::stream(0, rng::INIT))?;
    for (i, p) in model.all_params_mut().into_iter().enumerate() {
        let rows = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let cols = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        if (rows, cols) != p.dim() {
            return Err(bad(format!("parameter {i} is {rows}×{cols}, architecture expects {:?}", p.dim())));
        }
        let mut vals = vec![0.0; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut vals).map_err(io)?;
        *p = Array2::from_shape_vec((rows, cols), vals).expect("length checked");
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err(bad("trailing bytes after last parameter".into()));
    }
    Ok(model)
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            model: state.best_model.clone(),
            config: config.clone(),
            manifest: CheckpointManifest {
                arch: state.best_model.arch,
                seed: config.seed,
                epoch: state.best_epoch,
                variant: config.variant().to_string(),
                val_acc: state.best_val.is_finite().then_some(state.best_val),
                metrics: state.history.iter().find(|m| m.epoch == state.best_epoch).copied(),
                format_version: VERSION,
            },
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MODEL_FILE);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        write_model(&self.model, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        crate::data::write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        let cfg = dir.join(CONFIG_FILE);
        fs::write(&cfg, self.config.to_text()).map_err(|e| Error::io(&cfg, e))
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let path = dir.join(MODEL_FILE);
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let model = read_model(&mut BufReader::new(f))?;
        let manifest: CheckpointManifest = crate::data::read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.arch != model.arch {
            return Err(Error::Checkpoint(format!(
                "manifest architecture {:?} disagrees with blob {:?}",
                manifest.arch, model.arch
            )));
        }
        let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
        Ok(Checkpoint { model, config, manifest })
    }
}

/// Directory of the checkpoint written for `epoch` under `root`.
pub fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch_{epoch:04}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};
    use crate::data::DatasetBundle;
    use crate::attack::Victim as _;

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let g = generate(&SynthSpec::toy(30, 3), 2).unwrap();
        let data = DatasetBundle::from_graph(g, "toy", 2).unwrap();
        let config = TrainConfig {
            epochs: 3,
            hidden: 8,
            latent: 4,
            domain_hidden: 4,
            num_domains: 3,
            ..TrainConfig::default()
        };
        let state = crate::train::fit(&data, &config).unwrap();
        let ck = Checkpoint::from_state(&state, &config);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let a = ck.model.predict(&data.graph);
        let b = back.model.predict(&data.graph);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_blobs_rejected() {
        let arch = Arch {
            num_features: 3,
            hidden: 2,
            latent: 2,
            num_classes: 2,
            num_domains: 2,
            domain_hidden: 2,
        };
        let m = IdeaModel::new(arch, &mut rng::stream(1, rng::INIT)).unwrap();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(read_model(&mut buf.as_slice()).unwrap(), m);
        assert!(read_model(&mut &buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_model(&mut extra.as_slice()).is_err());
        let mut magic = buf.clone();
        magic[0] = b'X';
        assert!(read_model(&mut magic.as_slice()).is_err());
    }

    #[test]
    fn missing_checkpoint_is_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::MissingFile(_))));
    }
}
