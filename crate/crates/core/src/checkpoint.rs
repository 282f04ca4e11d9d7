//! Named-tensor checkpoint container.
//!
//! Layout: magic `VCKP1`, format version (u32 LE), kind tag (length-prefixed
//! UTF-8), tensor count, then per tensor a length-prefixed name, rank, dims
//! and row-major f32 LE data, and finally a CRC32 of all preceding bytes.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::encoder::{Dvector, EncoderParams, LstmLayer};
use crate::error::{Error, Result};
use crate::ge2e::SimilarityParams;
use crate::synthesizer::SynthParams;
use crate::vocoder::VocoderParams;

pub const MAGIC: &[u8; 5] = b"VCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_array2(a: &Array2<f64>) -> Self {
        Tensor {
            dims: vec![a.nrows(), a.ncols()],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Tensor {
            dims: vec![a.len()],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![],
            data: vec![v as f32],
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::CorruptCheckpoint(format!(
                "expected rank 2, found rank {}",
                self.dims.len()
            )));
        }
        Array2::from_shape_vec(
            (self.dims[0], self.dims[1]),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }

    pub fn to_array1(&self) -> Result<Array1<f64>> {
        if self.dims.len() != 1 {
            return Err(Error::CorruptCheckpoint(format!(
                "expected rank 1, found rank {}",
                self.dims.len()
            )));
        }
        Ok(Array1::from_vec(
            self.data.iter().map(|&v| v as f64).collect(),
        ))
    }

    pub fn to_scalar(&self) -> Result<f64> {
        if !self.dims.is_empty() || self.data.len() != 1 {
            return Err(Error::CorruptCheckpoint("expected scalar tensor".into()));
        }
        Ok(self.data[0] as f64)
    }

    fn element_count(&self) -> usize {
        self.dims.iter().product::<usize>().max(if self.dims.is_empty() { 1 } else { 0 })
    }
}

/// Ordered, uniquely named tensors under a model kind tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint {
            kind: kind.into(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::DuplicateTensor(name));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn expect_kind(&self, expected: &str) -> Result<()> {
        if self.kind != expected {
            return Err(Error::WrongCheckpointKind {
                expected: expected.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_string(&mut out, &self.kind);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            write_string(&mut out, name);
            out.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
            for &d in &tensor.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic {
                path: origin.into(),
            });
        }
        let payload_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[payload_len..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..payload_len]);
        if stored != computed {
            return Err(Error::BadChecksum {
                path: origin.into(),
                stored,
                computed,
            });
        }

        let mut cursor = &bytes[MAGIC.len()..payload_len];
        let version = read_u32(&mut cursor)?;
        if version != FORMAT_VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let kind = read_string(&mut cursor)?;
        let count = read_u32(&mut cursor)? as usize;
        let mut checkpoint = Checkpoint::new(kind);
        for _ in 0..count {
            let name = read_string(&mut cursor)?;
            let rank = read_u32(&mut cursor)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut cursor)? as usize);
            }
            let tensor = Tensor {
                dims,
                data: Vec::new(),
            };
            let elements = tensor.element_count();
            let mut data = Vec::with_capacity(elements);
            for _ in 0..elements {
                let mut buf = [0u8; 4];
                cursor
                    .read_exact(&mut buf)
                    .map_err(|_| Error::CorruptCheckpoint("truncated tensor data".into()))?;
                data.push(f32::from_le_bytes(buf));
            }
            checkpoint.insert(name, Tensor { data, ..tensor })?;
        }
        if !cursor.is_empty() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} unread bytes after the tensor list",
                cursor.len()
            )));
        }
        Ok(checkpoint)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_u32(cursor: &mut &[u8]) -> Result<u32> {
    let mut buf = [0u8; 4];
    cursor
        .read_exact(&mut buf)
        .map_err(|_| Error::CorruptCheckpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_string(cursor: &mut &[u8]) -> Result<String> {
    let len = read_u32(cursor)? as usize;
    if cursor.len() < len {
        return Err(Error::CorruptCheckpoint("truncated string".into()));
    }
    let (head, rest) = cursor.split_at(len);
    let s = String::from_utf8(head.to_vec())
        .map_err(|_| Error::CorruptCheckpoint("invalid utf-8 string".into()))?;
    *cursor = rest;
    Ok(s)
}

pub const KIND_ENCODER: &str = "encoder";
pub const KIND_SYNTHESIZER: &str = "synthesizer";
pub const KIND_VOCODER: &str = "vocoder";
pub const KIND_DVECTOR: &str = "dvector";
pub const KIND_FEATURES: &str = "features";

pub fn encoder_to_checkpoint(
    params: &EncoderParams,
    sim: &SimilarityParams,
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(KIND_ENCODER);
    for (i, layer) in params.layers.iter().enumerate() {
        ckpt.insert(format!("lstm{i}.w_ih"), Tensor::from_array2(&layer.w_ih))?;
        ckpt.insert(format!("lstm{i}.w_hh"), Tensor::from_array2(&layer.w_hh))?;
        ckpt.insert(format!("lstm{i}.bias"), Tensor::from_array2(&layer.bias))?;
    }
    ckpt.insert("proj.w", Tensor::from_array2(&params.proj_w))?;
    ckpt.insert("proj.b", Tensor::from_array2(&params.proj_b))?;
    ckpt.insert("similarity.w", Tensor::scalar(sim.scale_w))?;
    ckpt.insert("similarity.b", Tensor::scalar(sim.bias_b))?;
    Ok(ckpt)
}

pub fn checkpoint_to_encoder(ckpt: &Checkpoint) -> Result<(EncoderParams, SimilarityParams)> {
    ckpt.expect_kind(KIND_ENCODER)?;
    let mut layers = Vec::new();
    for i in 0.. {
        if ckpt.tensor(&format!("lstm{i}.w_ih")).is_err() {
            break;
        }
        layers.push(LstmLayer {
            w_ih: ckpt.tensor(&format!("lstm{i}.w_ih"))?.to_array2()?,
            w_hh: ckpt.tensor(&format!("lstm{i}.w_hh"))?.to_array2()?,
            bias: ckpt.tensor(&format!("lstm{i}.bias"))?.to_array2()?,
        });
    }
    if layers.is_empty() {
        return Err(Error::MissingTensor("lstm0.w_ih".into()));
    }
    Ok((
        EncoderParams {
            layers,
            proj_w: ckpt.tensor("proj.w")?.to_array2()?,
            proj_b: ckpt.tensor("proj.b")?.to_array2()?,
        },
        SimilarityParams {
            scale_w: ckpt.tensor("similarity.w")?.to_scalar()?,
            bias_b: ckpt.tensor("similarity.b")?.to_scalar()?,
        },
    ))
}

pub fn synthesizer_to_checkpoint(params: &SynthParams) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(KIND_SYNTHESIZER);
    ckpt.insert("symbols", Tensor::from_array2(&params.symbol_embedding))?;
    ckpt.insert("prenet.w1", Tensor::from_array2(&params.prenet_w1))?;
    ckpt.insert("prenet.b1", Tensor::from_array2(&params.prenet_b1))?;
    ckpt.insert("prenet.w2", Tensor::from_array2(&params.prenet_w2))?;
    ckpt.insert("prenet.b2", Tensor::from_array2(&params.prenet_b2))?;
    ckpt.insert("decoder.w_ih", Tensor::from_array2(&params.decoder.w_ih))?;
    ckpt.insert("decoder.w_hh", Tensor::from_array2(&params.decoder.w_hh))?;
    ckpt.insert("decoder.bias", Tensor::from_array2(&params.decoder.bias))?;
    ckpt.insert("out.w", Tensor::from_array2(&params.out_w))?;
    ckpt.insert("out.b", Tensor::from_array2(&params.out_b))?;
    ckpt.insert("floor_db", Tensor::scalar(params.floor_db))?;
    Ok(ckpt)
}

pub fn checkpoint_to_synthesizer(ckpt: &Checkpoint) -> Result<SynthParams> {
    ckpt.expect_kind(KIND_SYNTHESIZER)?;
    Ok(SynthParams {
        symbol_embedding: ckpt.tensor("symbols")?.to_array2()?,
        prenet_w1: ckpt.tensor("prenet.w1")?.to_array2()?,
        prenet_b1: ckpt.tensor("prenet.b1")?.to_array2()?,
        prenet_w2: ckpt.tensor("prenet.w2")?.to_array2()?,
        prenet_b2: ckpt.tensor("prenet.b2")?.to_array2()?,
        decoder: LstmLayer {
            w_ih: ckpt.tensor("decoder.w_ih")?.to_array2()?,
            w_hh: ckpt.tensor("decoder.w_hh")?.to_array2()?,
            bias: ckpt.tensor("decoder.bias")?.to_array2()?,
        },
        out_w: ckpt.tensor("out.w")?.to_array2()?,
        out_b: ckpt.tensor("out.b")?.to_array2()?,
        floor_db: ckpt.tensor("floor_db")?.to_scalar()?,
    })
}

pub fn vocoder_to_checkpoint(params: &VocoderParams) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(KIND_VOCODER);
    ckpt.insert("cond.w", Tensor::from_array2(&params.cond_w))?;
    ckpt.insert("cond.b", Tensor::from_array2(&params.cond_b))?;
    ckpt.insert("gru.w_ih", Tensor::from_array2(&params.gru_w_ih))?;
    ckpt.insert("gru.w_hh", Tensor::from_array2(&params.gru_w_hh))?;
    ckpt.insert("gru.b_ih", Tensor::from_array2(&params.gru_b_ih))?;
    ckpt.insert("gru.b_hh", Tensor::from_array2(&params.gru_b_hh))?;
    ckpt.insert("out.w", Tensor::from_array2(&params.out_w))?;
    ckpt.insert("out.b", Tensor::from_array2(&params.out_b))?;
    ckpt.insert("floor_db", Tensor::scalar(params.floor_db))?;
    Ok(ckpt)
}

pub fn checkpoint_to_vocoder(ckpt: &Checkpoint) -> Result<VocoderParams> {
    ckpt.expect_kind(KIND_VOCODER)?;
    Ok(VocoderParams {
        cond_w: ckpt.tensor("cond.w")?.to_array2()?,
        cond_b: ckpt.tensor("cond.b")?.to_array2()?,
        gru_w_ih: ckpt.tensor("gru.w_ih")?.to_array2()?,
        gru_w_hh: ckpt.tensor("gru.w_hh")?.to_array2()?,
        gru_b_ih: ckpt.tensor("gru.b_ih")?.to_array2()?,
        gru_b_hh: ckpt.tensor("gru.b_hh")?.to_array2()?,
        out_w: ckpt.tensor("out.w")?.to_array2()?,
        out_b: ckpt.tensor("out.b")?.to_array2()?,
        floor_db: ckpt.tensor("floor_db")?.to_scalar()?,
    })
}

pub fn dvector_to_checkpoint(d: &Dvector) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(KIND_DVECTOR);
    ckpt.insert("dvector", Tensor::from_array1(d.values()))?;
    Ok(ckpt)
}

pub fn checkpoint_to_dvector(ckpt: &Checkpoint) -> Result<Dvector> {
    ckpt.expect_kind(KIND_DVECTOR)?;
    Dvector::new(ckpt.tensor("dvector")?.to_array1()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_checkpoint(seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ckpt = Checkpoint::new("encoder");
        for i in 0..4 {
            let rows = rng.gen_range(1..6);
            let cols = rng.gen_range(1..6);
            ckpt.insert(
                format!("tensor{i}"),
                Tensor {
                    dims: vec![rows, cols],
                    data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                },
            )
            .unwrap();
        }
        ckpt
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = random_checkpoint(1);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
        // Saving the loaded copy reproduces identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn flipped_byte_fails_crc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        random_checkpoint(2).save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::BadChecksum { .. })
        ));
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT-really-not").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn empty_tensor_list_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        Checkpoint::new("features").save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.kind, "features");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ckpt = Checkpoint::new("encoder");
        ckpt.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            ckpt.insert("a", Tensor::scalar(2.0)),
            Err(Error::DuplicateTensor(_))
        ));
    }

    #[test]
    fn kind_tag_is_validated() {
        let ckpt = Checkpoint::new("vocoder");
        assert!(ckpt.expect_kind("vocoder").is_ok());
        assert!(matches!(
            ckpt.expect_kind("encoder"),
            Err(Error::WrongCheckpointKind { .. })
        ));
    }

    #[test]
    fn encoder_round_trip_preserves_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EncoderParams::init(2, 8, 12, 6, &mut rng);
        let sim = SimilarityParams::default();
        let ckpt = encoder_to_checkpoint(&params, &sim).unwrap();
        let (back, sim_back) = checkpoint_to_encoder(&ckpt).unwrap();
        assert_eq!(back.layers.len(), 2);
        assert_eq!(sim_back.scale_w, sim.scale_w);
        // f64 -> f32 -> f64 round trip is exact once quantized.
        let requantized = encoder_to_checkpoint(&back, &sim_back).unwrap();
        assert_eq!(ckpt.to_bytes(), requantized.to_bytes());
    }
}
