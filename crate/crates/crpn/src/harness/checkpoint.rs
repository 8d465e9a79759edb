//! Binary checkpoints. Layout: magic `CRPN`, u32 LE version (1), u32 tensor
//! count, then per tensor a u16 name length, the UTF-8 name, a u8 rank, u32
//! dims, and raw little-endian f32 data row-major; the file ends with a u64
//! byte count over everything before it. Configuration rides along as
//! reserved `meta/...` tensors so one format carries the whole artifact.

use crate::error::{Error, Result};
use crate::model::{ArchConfig, CascadeConfig, ConvSpec, ModelParams};
use crate::training::{SampleConfig, TrainConfig};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"CRPN";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParams<f32>,
    pub cascade: CascadeConfig,
    pub train: TrainConfig,
}

fn arch_to_meta(a: &ArchConfig) -> Vec<f32> {
    let mut v = vec![
        a.template_size as f32,
        a.search_size as f32,
        a.anchor_base as f32,
        a.stages as f32,
        a.ftb as u8 as f32,
        a.freeze_first as u8 as f32,
    ];
    v.push(a.ratios.len() as f32);
    v.extend(a.ratios.iter().map(|&r| r as f32));
    v.push(a.backbone.len() as f32);
    for c in &a.backbone {
        v.extend([
            c.in_ch as f32,
            c.out_ch as f32,
            c.kernel as f32,
            c.stride as f32,
            c.pad as f32,
            c.relu as u8 as f32,
        ]);
    }
    v.push(a.emit.len() as f32);
    v.extend(a.emit.iter().map(|&e| e as f32));
    v
}

struct MetaReader<'a> {
    data: &'a [f32],
    pos: usize,
}

impl<'a> MetaReader<'a> {
    fn next(&mut self) -> Result<f32> {
        let v = self
            .data
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Corrupt("meta tensor too short".into()))?;
        self.pos += 1;
        Ok(v)
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.next()? as usize)
    }
    fn bool(&mut self) -> Result<bool> {
        Ok(self.next()? != 0.0)
    }
}

fn arch_from_meta(data: &[f32]) -> Result<ArchConfig> {
    let mut r = MetaReader { data, pos: 0 };
    let template_size = r.usize()?;
    let search_size = r.usize()?;
    let anchor_base = r.next()? as f64;
    let stages = r.usize()?;
    let ftb = r.bool()?;
    let freeze_first = r.bool()?;
    let n = r.usize()?;
    let ratios = (0..n)
        .map(|_| r.next().map(|v| v as f64))
        .collect::<Result<Vec<_>>>()?;
    let n = r.usize()?;
    let backbone = (0..n)
        .map(|_| {
            Ok(ConvSpec {
                in_ch: r.usize()?,
                out_ch: r.usize()?,
                kernel: r.usize()?,
                stride: r.usize()?,
                pad: r.usize()?,
                relu: r.bool()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = r.usize()?;
    let emit = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    Ok(ArchConfig {
        backbone,
        emit,
        template_size,
        search_size,
        ratios,
        anchor_base,
        stages,
        ftb,
        freeze_first,
    })
}

fn train_to_meta(t: &TrainConfig) -> Vec<f32> {
    vec![
        t.epochs as f32,
        t.pairs_per_epoch as f32,
        t.lr_start,
        t.lr_end,
        t.lambda,
        t.samples.samples_per_stage as f32,
        t.samples.pos_cap as f32,
        t.samples.tau_pos,
        t.samples.tau_neg,
        // the u64 seed rides bit-exactly in two f32 slots
        f32::from_bits((t.seed >> 32) as u32),
        f32::from_bits(t.seed as u32),
    ]
}

fn train_from_meta(data: &[f32]) -> Result<TrainConfig> {
    if data.len() != 11 {
        return Err(Error::Corrupt(format!(
            "meta/train has {} values, expected 11",
            data.len()
        )));
    }
    Ok(TrainConfig {
        epochs: data[0] as usize,
        pairs_per_epoch: data[1] as usize,
        lr_start: data[2],
        lr_end: data[3],
        lambda: data[4],
        samples: SampleConfig {
            samples_per_stage: data[5] as usize,
            pos_cap: data[6] as usize,
            tau_pos: data[7],
            tau_neg: data[8],
        },
        seed: ((data[9].to_bits() as u64) << 32) | data[10].to_bits() as u64,
    })
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<u32>, Vec<f32>)> = vec![
        (
            "meta/arch".into(),
            vec![arch_to_meta(&ckpt.params.arch).len() as u32],
            arch_to_meta(&ckpt.params.arch),
        ),
        (
            "meta/cascade".into(),
            vec![3],
            vec![
                ckpt.cascade.stages as f32,
                ckpt.cascade.theta,
                ckpt.cascade.fallback_k as f32,
            ],
        ),
        ("meta/train".into(), vec![11], train_to_meta(&ckpt.train)),
    ];
    for t in ckpt.params.tensors() {
        entries.push((
            t.name.clone(),
            t.value.dims().iter().map(|&d| d as u32).collect(),
            t.value.data().to_vec(),
        ));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, dims, data) in &entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let count = buf.len() as u64;
    buf.extend_from_slice(&count.to_le_bytes());
    buf
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(ckpt))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "{what} needs {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32("tensor count")? as usize;

    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dim")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(4 * n, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, dims, data));
    }
    let claimed = u64::from_le_bytes(cur.take(8, "byte-count checksum")?.try_into().unwrap());
    if claimed != (cur.pos - 8) as u64 {
        return Err(Error::Corrupt(format!(
            "byte-count checksum {claimed} != {} actual",
            cur.pos - 8
        )));
    }
    if cur.pos != buf.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after checksum",
            buf.len() - cur.pos
        )));
    }

    let find = |name: &str| -> Result<&(String, Vec<usize>, Vec<f32>)> {
        tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))
    };
    let arch = arch_from_meta(&find("meta/arch")?.2)?;
    let cmeta = &find("meta/cascade")?.2;
    if cmeta.len() != 3 {
        return Err(Error::Corrupt("meta/cascade needs 3 values".into()));
    }
    let cascade = CascadeConfig {
        stages: cmeta[0] as usize,
        theta: cmeta[1],
        fallback_k: cmeta[2] as usize,
    };
    let train = train_from_meta(&find("meta/train")?.2)?;

    // rebuild the parameter structure from the arch, then overwrite values
    let mut params = ModelParams::<f32>::init(arch, 0)
        .map_err(|e| Error::Corrupt(format!("stored arch is invalid: {e}")))?;
    let mut loaded = 0;
    for t in params.tensors_mut() {
        let (_, dims, data) = find(&t.name)?;
        if dims != t.value.dims() {
            return Err(Error::Corrupt(format!(
                "tensor {} has dims {:?}, model expects {:?}",
                t.name,
                dims,
                t.value.dims()
            )));
        }
        t.value.data_mut().copy_from_slice(data);
        loaded += 1;
    }
    if loaded + 3 != tensors.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint carries {} tensors, model consumed {loaded} plus 3 meta",
            tensors.len()
        )));
    }
    Ok(Checkpoint {
        version,
        params,
        cascade,
        train,
    })
}
