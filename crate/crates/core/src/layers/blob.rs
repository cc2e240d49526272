//! Little-endian binary encoding of layers and raw tensors.
//!
//! Layout: `tag: u64`, `n: u64`, `n` header integers (`u64`), then the
//! parameter arrays as `f64` in declaration order. Array lengths follow
//! from the header.

use std::io::{Read, Write};

use super::{ColaLayer, DenseLinear, Linear, LoraAdapter, SvdLayer, TtLayer};
use crate::error::{LaxError, Result};
use crate::numerics::{Activation, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum LayerTag {
    Dense = 0,
    Svd = 1,
    Cola = 2,
    Tt = 3,
    Lora = 4,
    Tensor = 16,
}

impl LayerTag {
    fn from_u64(v: u64) -> Result<Self> {
        Ok(match v {
            0 => LayerTag::Dense,
            1 => LayerTag::Svd,
            2 => LayerTag::Cola,
            3 => LayerTag::Tt,
            4 => LayerTag::Lora,
            16 => LayerTag::Tensor,
            other => return Err(LaxError::Format(format!("unknown blob tag {other}"))),
        })
    }
}

// Guards against allocating from a corrupt header.
const MAX_HEADER: u64 = 1 << 16;
const MAX_ELEMS: usize = 1 << 32;

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_header(w: &mut impl Write, tag: LayerTag, header: &[usize]) -> Result<()> {
    put_u64(w, tag as u64)?;
    put_u64(w, header.len() as u64)?;
    for &h in header {
        put_u64(w, h as u64)?;
    }
    Ok(())
}

fn get_header(r: &mut impl Read) -> Result<(LayerTag, Vec<usize>)> {
    let tag = LayerTag::from_u64(get_u64(r)?)?;
    let n = get_u64(r)?;
    if n > MAX_HEADER {
        return Err(LaxError::Format(format!("blob header of {n} entries")));
    }
    let header = (0..n)
        .map(|_| get_u64(r).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((tag, header))
}

fn put_data(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_data(r: &mut impl Read, shape: &[usize]) -> Result<Tensor> {
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMS)
        .ok_or_else(|| LaxError::Format(format!("implausible tensor shape {shape:?}")))?;
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| LaxError::Format(e.to_string()))
}

fn need(header: &[usize], n: usize, what: &str) -> Result<()> {
    if header.len() != n {
        return Err(LaxError::Format(format!(
            "{what} blob header has {} entries, expected {n}",
            header.len()
        )));
    }
    Ok(())
}

fn format_err(e: LaxError) -> LaxError {
    match e {
        LaxError::Io(_) | LaxError::Format(_) => e,
        other => LaxError::Format(other.to_string()),
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    put_header(w, LayerTag::Tensor, t.shape())?;
    put_data(w, t)
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let (tag, shape) = get_header(r)?;
    if tag != LayerTag::Tensor {
        return Err(LaxError::Format(format!("expected a tensor blob, found {tag:?}")));
    }
    get_data(r, &shape)
}

pub fn write_layer(w: &mut impl Write, layer: &Linear) -> Result<()> {
    match layer {
        Linear::Dense(l) => {
            let (o, i) = (l.d_out(), l.d_in());
            put_header(
                w,
                LayerTag::Dense,
                &[o, i, l.bias.is_some() as usize, l.frozen as usize],
            )?;
            put_data(w, &l.w)?;
            if let Some(b) = &l.bias {
                put_data(w, b)?;
            }
        }
        Linear::Svd(l) => {
            put_header(w, LayerTag::Svd, &[l.d_in(), l.d_out(), l.rank()])?;
            put_data(w, &l.a)?;
            put_data(w, &l.b)?;
        }
        Linear::Cola(l) => {
            let act = l.activation.tag() as usize;
            put_header(w, LayerTag::Cola, &[l.d_in(), l.d_out(), l.rank(), act])?;
            put_data(w, &l.a)?;
            put_data(w, &l.b)?;
        }
        Linear::Tt(l) => {
            let mut header = vec![l.half()];
            header.extend_from_slice(l.out_dims());
            header.extend_from_slice(l.in_dims());
            header.extend_from_slice(l.ranks());
            put_header(w, LayerTag::Tt, &header)?;
            for c in &l.cores {
                put_data(w, c)?;
            }
        }
        Linear::Lora(l) => {
            put_header(w, LayerTag::Lora, &[l.d_in(), l.d_out(), l.rank()])?;
            put_data(w, &l.w0)?;
            put_data(w, &l.a)?;
            put_data(w, &l.b)?;
            put_data(w, &Tensor::scalar(l.alpha))?;
        }
    }
    Ok(())
}

pub fn read_layer(r: &mut impl Read) -> Result<Linear> {
    let (tag, h) = get_header(r)?;
    let layer = match tag {
        LayerTag::Dense => {
            need(&h, 4, "dense")?;
            let w = get_data(r, &[h[0], h[1]])?;
            let bias = if h[2] != 0 { Some(get_data(r, &[h[0]])?) } else { None };
            let mut l = DenseLinear::new(w, bias).map_err(format_err)?;
            l.frozen = h[3] != 0;
            Linear::Dense(l)
        }
        LayerTag::Svd => {
            need(&h, 3, "svd")?;
            let a = get_data(r, &[h[2], h[0]])?;
            let b = get_data(r, &[h[1], h[2]])?;
            Linear::Svd(SvdLayer::new(a, b).map_err(format_err)?)
        }
        LayerTag::Cola => {
            need(&h, 4, "cola")?;
            let act = Activation::from_tag(h[3] as u64)?;
            let a = get_data(r, &[h[2], h[0]])?;
            let b = get_data(r, &[h[1], h[2]])?;
            Linear::Cola(ColaLayer::new(a, b, act).map_err(format_err)?)
        }
        LayerTag::Tt => {
            let k = *h.first().ok_or_else(|| LaxError::Format("empty tt header".into()))?;
            if k == 0 || k > 64 {
                return Err(LaxError::Format(format!("tt blob with k = {k}")));
            }
            need(&h, 1 + 2 * k + 2 * k + 1, "tt")?;
            let out_dims = &h[1..1 + k];
            let in_dims = &h[1 + k..1 + 2 * k];
            let ranks = &h[1 + 2 * k..];
            let dims: Vec<usize> = out_dims.iter().chain(in_dims).copied().collect();
            let cores = (0..2 * k)
                .map(|i| get_data(r, &[ranks[i], dims[i], ranks[i + 1]]))
                .collect::<Result<Vec<_>>>()?;
            Linear::Tt(TtLayer::new(out_dims, in_dims, ranks, cores).map_err(format_err)?)
        }
        LayerTag::Lora => {
            need(&h, 3, "lora")?;
            let w0 = get_data(r, &[h[1], h[0]])?;
            let a = get_data(r, &[h[2], h[0]])?;
            let b = get_data(r, &[h[1], h[2]])?;
            let alpha = get_data(r, &[1])?.item();
            Linear::Lora(LoraAdapter::new(w0, a, b, alpha).map_err(format_err)?)
        }
        LayerTag::Tensor => return Err(LaxError::Format("expected a layer blob, found a raw tensor".into())),
    };
    Ok(layer)
}
