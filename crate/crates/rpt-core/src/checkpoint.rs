//! Checkpoint container: magic `RPTSR1`, config echo, named parameter
//! tensors as RTEN blobs, prior-bank flags and grid extents, optional Adam
//! state, iteration, and seeds. Byte layout is deterministic, so identical
//! training runs produce identical files.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RptSrModel};
use crate::ops::conv::PadMode;
use crate::rpa::{BankState, Variant};
use crate::rten;
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: &[u8; 6] = b"RPTSR1";

pub struct Loaded<E: Elem> {
    pub model: RptSrModel<E>,
    pub opt: Option<AdamState<E>>,
    pub iteration: u64,
    pub train_seed: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated("checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn tensor<E: Elem>(&mut self) -> Result<Tensor<E>> {
        let (t, used) = rten::decode::<E>(&self.bytes[self.pos..])?;
        self.pos += used;
        Ok(t)
    }
}

fn variant_tag(v: Variant) -> u8 {
    match v {
        Variant::Baseline => 0,
        Variant::Static => 1,
        Variant::Rpt => 2,
    }
}

fn variant_from(tag: u8) -> Result<Variant> {
    match tag {
        0 => Ok(Variant::Baseline),
        1 => Ok(Variant::Static),
        2 => Ok(Variant::Rpt),
        t => Err(Error::Format(format!("unknown variant tag {t}"))),
    }
}

fn pad_tag(p: PadMode) -> u8 {
    match p {
        PadMode::Zero => 0,
        PadMode::Circular => 1,
    }
}

fn pad_from(tag: u8) -> Result<PadMode> {
    match tag {
        0 => Ok(PadMode::Zero),
        1 => Ok(PadMode::Circular),
        t => Err(Error::Format(format!("unknown pad mode tag {t}"))),
    }
}

/// Serialize model (+ optional optimizer state) at a given iteration.
pub fn encode<E: Elem>(model: &RptSrModel<E>, opt: Option<&AdamState<E>>, iteration: u64, train_seed: u64) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(E::DTYPE.tag());

    put_u32(&mut out, cfg.channels as u32);
    put_u32(&mut out, cfg.blocks as u32);
    put_u32(&mut out, cfg.layers_per_block as u32);
    put_u32(&mut out, cfg.heads as u32);
    put_u32(&mut out, cfg.k as u32);
    put_u32(&mut out, cfg.scale as u32);
    put_u32(&mut out, cfg.img_channels as u32);
    out.push(variant_tag(cfg.variant));
    out.push(pad_tag(cfg.pad_mode));
    put_u32(&mut out, cfg.window_schedule.len() as u32);
    for &w in &cfg.window_schedule {
        put_u64(&mut out, w as u64);
    }

    put_u64(&mut out, model.build_seed());
    put_u64(&mut out, train_seed);
    put_u64(&mut out, iteration);

    // Bank states keyed by parameter index.
    let mut bank_states: Vec<Option<BankState>> = alloc::vec![None; model.params().len()];
    for layer in model.layers() {
        if let Some(bank) = &layer.bank {
            bank_states[bank.r.index()] = Some(bank.state);
        }
    }

    put_u32(&mut out, model.params().len() as u32);
    for (i, entry) in model.params().entries().iter().enumerate() {
        put_u32(&mut out, entry.name.len() as u32);
        out.extend_from_slice(entry.name.as_bytes());
        put_f64(&mut out, entry.lr_mult);
        match bank_states[i] {
            None => out.push(0),
            Some(state) => {
                out.push(if state.initialized { 2 } else { 1 });
                put_u64(&mut out, state.rows0 as u64);
                put_u64(&mut out, state.cols0 as u64);
            }
        }
        out.extend_from_slice(&rten::encode(&entry.value));
    }

    match opt {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            put_u64(&mut out, st.t);
            put_f64(&mut out, st.beta1);
            put_f64(&mut out, st.beta2);
            put_f64(&mut out, st.eps);
            for (m, v) in st.m.iter().zip(&st.v) {
                out.extend_from_slice(&rten::encode(m));
                out.extend_from_slice(&rten::encode(v));
            }
        }
    }
    out
}

/// Parse and validate a checkpoint, rebuilding the model it describes.
pub fn decode<E: Elem>(bytes: &[u8]) -> Result<Loaded<E>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(Error::BadMagic { expected: "RPTSR1" });
    }
    let dtype = r.u8()?;
    if dtype != E::DTYPE.tag() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint dtype tag {dtype} does not match requested element type"
        )));
    }

    let channels = r.u32()? as usize;
    let blocks = r.u32()? as usize;
    let layers_per_block = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let k = r.u32()? as usize;
    let scale = r.u32()? as usize;
    let img_channels = r.u32()? as usize;
    let variant = variant_from(r.u8()?)?;
    let pad_mode = pad_from(r.u8()?)?;
    let sched_len = r.u32()? as usize;
    let mut window_schedule = Vec::with_capacity(sched_len);
    for _ in 0..sched_len {
        window_schedule.push(r.u64()? as usize);
    }
    let cfg = ModelConfig {
        channels,
        blocks,
        layers_per_block,
        heads,
        window_schedule,
        k,
        scale,
        variant,
        img_channels,
        pad_mode,
    };

    let build_seed = r.u64()?;
    let train_seed = r.u64()?;
    let iteration = r.u64()?;

    let mut model = RptSrModel::<E>::build(cfg, build_seed)?;

    let n_params = r.u32()? as usize;
    if n_params != model.params().len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {n_params} parameters, model expects {}",
            model.params().len()
        )));
    }

    let mut bank_states: Vec<Option<BankState>> = alloc::vec![None; n_params];
    for i in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format(String::from("parameter name is not utf-8")))?;
        let expected = &model.params().entries()[i];
        if name != expected.name {
            return Err(Error::ConfigMismatch(format!(
                "parameter {i} is '{name}', model expects '{}'",
                expected.name
            )));
        }
        let lr_mult = r.f64()?;
        if (lr_mult - expected.lr_mult).abs() > 1e-12 {
            return Err(Error::ConfigMismatch(format!("parameter '{name}' group multiplier changed")));
        }
        let bank_tag = r.u8()?;
        let state = match bank_tag {
            0 => None,
            1 | 2 => {
                let rows0 = r.u64()? as usize;
                let cols0 = r.u64()? as usize;
                Some(BankState { initialized: bank_tag == 2, rows0, cols0 })
            }
            t => return Err(Error::Format(format!("unknown bank tag {t}"))),
        };
        let value = r.tensor::<E>()?;
        match state {
            None => {
                if value.shape() != expected.value.shape() {
                    return Err(Error::ConfigMismatch(format!(
                        "parameter '{name}' has shape {:?}, model expects {:?}",
                        value.shape(),
                        expected.value.shape()
                    )));
                }
            }
            Some(st) => {
                let rows = if st.initialized { model.config().k * st.rows0 * st.cols0 } else { 0 };
                if value.rank() != 2 || value.shape()[0] != rows {
                    return Err(Error::ConfigMismatch(format!(
                        "bank '{name}' has shape {:?}, expected {rows} rows",
                        value.shape()
                    )));
                }
                bank_states[i] = state;
            }
        }
        model.params_mut().set_value(crate::params::ParamId(i as u32), value);
    }

    // Restore bank states onto their layers.
    for layers in model.blocks.iter_mut() {
        for layer in layers.iter_mut() {
            if let Some(bank) = layer.bank.as_mut() {
                if let Some(st) = bank_states[bank.r.index()] {
                    bank.state = st;
                }
            }
        }
    }

    let opt = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let eps = r.f64()?;
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                m.push(r.tensor::<E>()?);
                v.push(r.tensor::<E>()?);
            }
            Some(AdamState { t, beta1, beta2, eps, m, v })
        }
        t => return Err(Error::Format(format!("unknown optimizer tag {t}"))),
    };

    Ok(Loaded { model, opt, iteration, train_seed })
}
