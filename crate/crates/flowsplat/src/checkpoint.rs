//! Velocity-field checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "FSPLATCK"                  8 bytes magic
//! version                     u32 (= 1)
//! header length, header       u32, UTF-8 TOML: [model] configuration, iteration
//! width, height               u32, u32   normalization camera
//! fx, fy, cx, cy              4 × f64
//! rotation (row-major)        9 × f64
//! translation                 3 × f64
//! horizon                     f64
//! array count                 u32
//! shape table, per array      u32 name length, name, u32 rank, rank × u64 dims
//! values                      f64 arrays in shape-table order
//! ```
//!
//! Every real is stored as its exact bit pattern, so save then load gives a
//! model whose evaluations are bit-identical to the original.
//!
//! Decoder files use the magic `FSPLATDC`, the version, a TOML
//! `DecoderConfig`, an array count, then the shape table and values in the
//! same layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use flowsplat_core::nalgebra::{Matrix3, Vector3};
use flowsplat_core::diffengine::ParameterSet;
use flowsplat_core::neuralfield::{ModelConfig, Normalization, VelocityFieldModel};
use flowsplat_core::renderer::{Decoder, DecoderConfig};
use flowsplat_core::scene::Camera;

use crate::{FormatError, Result};

const MAGIC: &[u8; 8] = b"FSPLATCK";
const DECODER_MAGIC: &[u8; 8] = b"FSPLATDC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    iteration: usize,
    model: ModelConfig,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FormatError::Corrupt("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn encode(model: &VelocityFieldModel, iteration: usize) -> Result<Vec<u8>> {
    let header = toml::to_string(&Header {
        iteration,
        model: model.config().clone(),
    })
    .map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(header.as_bytes());
    let norm = model.normalization();
    let cam = &norm.camera;
    w.u32(cam.width as u32);
    w.u32(cam.height as u32);
    for v in cam.intrinsics() {
        w.f64(v);
    }
    let r = cam.rotation();
    for i in 0..3 {
        for j in 0..3 {
            w.f64(r[(i, j)]);
        }
    }
    for v in cam.translation().iter() {
        w.f64(*v);
    }
    w.f64(norm.horizon);
    write_arrays(&mut w, &model.params);
    Ok(w.0)
}

fn write_arrays(w: &mut Writer, params: &ParameterSet) {
    let entries = params.entries();
    w.u32(entries.len() as u32);
    for e in entries {
        w.bytes(e.name.as_bytes());
        w.u32(e.shape.len() as u32);
        for &d in &e.shape {
            w.u64(d as u64);
        }
    }
    for e in entries {
        for &v in &e.value {
            w.f64(v);
        }
    }
}

type Arrays = Vec<(String, Vec<usize>, Vec<f64>)>;

fn read_arrays(r: &mut Reader) -> Result<Arrays> {
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    let mut values = Vec::with_capacity(table.len());
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        values.push((name, shape, data));
    }
    if r.pos != r.buf.len() {
        return Err(FormatError::Corrupt("trailing bytes after parameter data".into()));
    }
    Ok(values)
}

fn check_header(r: &mut Reader, magic: &[u8; 8], kind: &'static str) -> Result<()> {
    if r.take(8)? != magic {
        return Err(FormatError::Corrupt(format!("not a flowsplat {kind} file")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Version { kind, found: version });
    }
    Ok(())
}

/// Decodes a checkpoint into the model and the iteration it was taken at.
pub fn decode(bytes: &[u8]) -> Result<(VelocityFieldModel, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_header(&mut r, MAGIC, "checkpoint")?;
    let text = std::str::from_utf8(r.bytes()?).map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let (width, height) = (r.u32()? as usize, r.u32()? as usize);
    let mut intr = [0.0; 4];
    for v in &mut intr {
        *v = r.f64()?;
    }
    let mut rot = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            rot[(i, j)] = r.f64()?;
        }
    }
    let t = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
    let horizon = r.f64()?;
    let camera = Camera::new(intr[0], intr[1], intr[2], intr[3], rot, t, width, height)?;
    let values = read_arrays(&mut r)?;
    let model = VelocityFieldModel::with_values(header.model, Normalization::new(camera, horizon)?, &values)?;
    Ok((model, header.iteration))
}

pub fn save(path: &Path, model: &VelocityFieldModel, iteration: usize) -> Result<()> {
    let bytes = encode(model, iteration)?;
    fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

pub fn load(path: &Path) -> Result<(VelocityFieldModel, usize)> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode(&bytes)
}

pub fn encode_decoder(decoder: &Decoder) -> Result<Vec<u8>> {
    let header = toml::to_string(&decoder.config).map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(DECODER_MAGIC);
    w.u32(VERSION);
    w.bytes(header.as_bytes());
    write_arrays(&mut w, &decoder.params);
    Ok(w.0)
}

pub fn decode_decoder(bytes: &[u8]) -> Result<Decoder> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_header(&mut r, DECODER_MAGIC, "decoder")?;
    let text = std::str::from_utf8(r.bytes()?).map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let config: DecoderConfig = toml::from_str(text).map_err(|e| FormatError::Corrupt(e.to_string()))?;
    let values = read_arrays(&mut r)?;
    let mut decoder = Decoder::new(config)?;
    if values.len() != decoder.params.len() {
        return Err(FormatError::Corrupt("decoder array count does not match its configuration".into()));
    }
    for (name, shape, data) in values {
        let id = decoder
            .params
            .find(&name)
            .filter(|&id| decoder.params.entry(id).shape == shape)
            .ok_or_else(|| FormatError::Corrupt(format!("unexpected decoder array `{name}`")))?;
        decoder.params.value_mut(id).copy_from_slice(&data);
    }
    Ok(decoder)
}

pub fn save_decoder(path: &Path, decoder: &Decoder) -> Result<()> {
    fs::write(path, encode_decoder(decoder)?).map_err(|e| FormatError::io(path, e))
}

pub fn load_decoder(path: &Path) -> Result<Decoder> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    decode_decoder(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowsplat_core::diffengine::Activation;
    use flowsplat_core::neuralfield::ConditioningInput;
    use flowsplat_core::synthlab::{SynthConfig, SyntheticScene};

    fn tiny() -> (VelocityFieldModel, ConditioningInput) {
        let scene = SyntheticScene::generate(&SynthConfig {
            width: 32,
            height: 32,
            ..Default::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            hidden: vec![8, 8],
            frequencies: 2,
            encoder_channels: vec![2, 2],
            force_hidden: 4,
            activation: Activation::Tanh,
            seed: 5,
            ..Default::default()
        };
        let m = VelocityFieldModel::new(cfg, Normalization::new(scene.camera.clone(), scene.horizon()).unwrap()).unwrap();
        (m, scene.conditioning(None))
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (m, cond) = tiny();
        let (back, it) = decode(&encode(&m, 42).unwrap()).unwrap();
        assert_eq!(it, 42);
        assert_eq!(back, m);
        let (f0, f1) = (m.bind(&cond).unwrap(), back.bind(&cond).unwrap());
        for i in 0..20 {
            let p = [i as f64 * 0.37 - 3.0, (i % 7) as f64 * 0.5 - 1.5, 0.0];
            let (a, b) = (f0.velocity_at(p, 0.1 * i as f64).unwrap(), f1.velocity_at(p, 0.1 * i as f64).unwrap());
            assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
    }

    #[test]
    fn decoder_round_trip() {
        let d = Decoder::new(DecoderConfig {
            channels: 4,
            hidden: 3,
            layers: 2,
            seed: 9,
        })
        .unwrap();
        assert_eq!(decode_decoder(&encode_decoder(&d).unwrap()).unwrap(), d);
        let p = Decoder::pass_through();
        assert!(decode_decoder(&encode_decoder(&p).unwrap()).unwrap().is_pass_through());
        assert!(decode_decoder(&encode(&tiny().0, 0).unwrap()).is_err());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let (m, _) = tiny();
        let bytes = encode(&m, 0).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut ver = bytes;
        ver[8] = 2;
        assert!(matches!(decode(&ver), Err(FormatError::Version { found: 2, .. })));
    }
}
