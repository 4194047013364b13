//! Single-file checkpoints: a config snapshot plus every parameter tensor in
//! registration order. No timestamps or host state, so two identical
//! training runs write identical files.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u32 = 1;

pub fn save(path: &Path, cfg: &Config, epoch: u64, store: &ParamStore) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let kv = cfg.to_kv();
    w.write_all(&(kv.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(kv.as_bytes()).map_err(io_err)?;
    w.write_all(&epoch.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(store.len() as u32).to_le_bytes()).map_err(io_err)?;
    for entry in store.entries() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        entry.tensor.write_tnsr(&mut w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub struct Checkpoint {
    pub cfg: Config,
    pub epoch: u64,
    pub store: ParamStore,
    pub model: Model,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Data(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let kv_len = u32::from_le_bytes(u32buf) as usize;
    let mut kv = vec![0u8; kv_len];
    r.read_exact(&mut kv).map_err(io_err)?;
    let kv = String::from_utf8(kv)
        .map_err(|_| Error::Data("checkpoint config is not valid UTF-8".into()))?;
    let cfg = Config::parse(&kv)?;

    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(io_err)?;
    let epoch = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut values: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf).map_err(io_err)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("checkpoint parameter name is not UTF-8".into()))?;
        let tensor = Tensor::read_tnsr(&mut r)?;
        values.push((name, tensor));
    }

    let mut store = ParamStore::new(cfg.seed);
    let model = Model::new(&mut store, &cfg)?;
    if values.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, model expects {}",
            values.len(),
            store.len()
        )));
    }
    store.load_values(&values)?;
    Ok(Checkpoint { cfg, epoch, store, model })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut cfg = Config::default();
        cfg.lambda1 = 0.25;
        cfg.widths = [16, 32, 32];
        let mut store = ParamStore::new(99);
        let _model = Model::new(&mut store, &cfg).unwrap();
        // make the weights distinguishable from a fresh seed-99 store
        store.entries_mut()[0].tensor.data[0] = 42.5;
        save(&path, &cfg, 17, &store).unwrap();

        let ck = load(&path).unwrap();
        assert_eq!(ck.epoch, 17);
        assert_eq!(ck.cfg, cfg);
        assert_eq!(ck.store.len(), store.len());
        for (a, b) in store.entries().iter().zip(ck.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape, b.tensor.shape);
            let ab: Vec<u32> = a.tensor.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.tensor.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "parameter {} changed across save/load", a.name);
        }
    }

    #[test]
    fn identical_stores_write_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::default();
        let write = |name: &str| {
            let mut store = ParamStore::new(cfg.seed);
            let _ = Model::new(&mut store, &cfg).unwrap();
            let p = dir.path().join(name);
            save(&p, &cfg, 3, &store).unwrap();
            std::fs::read(p).unwrap()
        };
        assert_eq!(write("a.ckpt"), write("b.ckpt"));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"P6 not a checkpoint").unwrap();
        match load(&path) {
            Err(Error::Data(msg)) => assert!(msg.contains("magic"), "got {msg}"),
            Err(other) => panic!("wrong error {other:?}"),
            Ok(_) => panic!("junk file loaded"),
        }
    }

    #[test]
    fn truncated_file_is_an_io_or_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = Config::default();
        let mut store = ParamStore::new(5);
        let _ = Model::new(&mut store, &cfg).unwrap();
        save(&path, &cfg, 0, &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&path).is_err(), "truncated checkpoint must not load");
    }
}
