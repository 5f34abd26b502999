//! `.skpc` model files.
//!
//! Little-endian throughout:
//!
//! ```text
//! "SKPC" | version u32 | layer_count u32
//! layer_count x record:
//!   out_ch u32 | in_ch u32 | k_h u32 | k_w u32
//!   stride_h u32 | stride_w u32 | pad_h u32 | pad_w u32 | dil_h u32 | dil_w u32
//!   activation u8 (0 identity, 1 relu) | normalization u8 (0 none/folded, 1 unfolded batch-norm)
//!   gate u8 (0 all-ones, 1 input-norm, 2 output-norm, 3 gumbel) | has_bias u8
//!   norm_order u32 | block u32 | epsilon f32
//!   has_epsilon_override u8 | epsilon_override f32
//!   weight_offset u64 | weight_count u64 | bias_offset u64 | bias_count u64
//!   phi_offset u64 | phi_count u64
//! weight_blob_bytes u64 | weight blob (f32, layer-major, (c_out, c_in, k_h, k_w), bias after weights)
//! gate_blob_bytes u64 | gate blob (f32, per gumbel layer: kernel then bias)
//! crc32 u32 over every preceding byte
//! ```
//!
//! Offsets are in floats from the start of their blob.

use std::fs;
use std::path::Path;

use super::bytes::{verify_checksum, Reader, Writer};
use crate::engine::{Layer, Network};
use crate::error::{Error, Result};
use crate::gates::{GateConfig, GateVariant, GumbelParams};
use crate::tensor::{Activation, ConvGeometry, ConvLayerSpec};

pub const MODEL_MAGIC: &[u8; 4] = b"SKPC";
pub const MODEL_VERSION: u32 = 1;

const NORM_NONE: u8 = 0;
const NORM_UNFOLDED_BATCHNORM: u8 = 1;

pub fn encode_model(net: &Network) -> Vec<u8> {
    encode_with_norm_flags(net, &vec![NORM_NONE; net.len()])
}

fn encode_with_norm_flags(net: &Network, norm: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.u32(net.len() as u32);

    let mut weight_blob: Vec<f32> = Vec::new();
    let mut gate_blob: Vec<f32> = Vec::new();
    for (layer, &norm_flag) in net.layers().iter().zip(norm) {
        let c = &layer.conv;
        let g = &c.geometry;
        for v in [
            c.out_channels,
            c.in_channels,
            g.kernel.0,
            g.kernel.1,
            g.stride.0,
            g.stride.1,
            g.padding.0,
            g.padding.1,
            g.dilation.0,
            g.dilation.1,
        ] {
            w.u32(v as u32);
        }
        w.u8(match c.activation {
            Activation::Identity => 0,
            Activation::Relu => 1,
        });
        w.u8(norm_flag);
        w.u8(layer.gate.variant.code());
        w.u8(c.bias.is_some() as u8);
        w.u32(layer.gate.norm_order);
        w.u32(layer.gate.block as u32);
        w.f32(layer.gate.epsilon);
        w.u8(layer.gate.epsilon_override.is_some() as u8);
        w.f32(layer.gate.epsilon_override.unwrap_or(0.0));

        w.u64(weight_blob.len() as u64);
        w.u64(c.weights.len() as u64);
        weight_blob.extend_from_slice(&c.weights);
        let bias = c.bias.as_deref().unwrap_or(&[]);
        w.u64(weight_blob.len() as u64);
        w.u64(bias.len() as u64);
        weight_blob.extend_from_slice(bias);

        w.u64(gate_blob.len() as u64);
        match &layer.gate.phi {
            Some(phi) => {
                w.u64(phi.len() as u64);
                gate_blob.extend_from_slice(&phi.weights);
                gate_blob.push(phi.bias);
            }
            None => w.u64(0),
        }
    }
    w.u64(weight_blob.len() as u64 * 4);
    w.f32s(&weight_blob);
    w.u64(gate_blob.len() as u64 * 4);
    w.f32s(&gate_blob);
    w.finish()
}

struct Record {
    conv: ConvLayerSpec,
    gate: GateConfig,
    weights: (usize, usize),
    bias: (usize, usize),
    phi: (usize, usize),
    has_bias: bool,
}

fn blob_slice(blob: &[f32], (offset, count): (usize, usize), what: &str, layer: usize) -> Result<Vec<f32>> {
    let end = offset
        .checked_add(count)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| {
            Error::Format(format!(
                "layer {layer}: {what} range {offset}+{count} exceeds blob of {} floats",
                blob.len()
            ))
        })?;
    Ok(blob[offset..end].to_vec())
}

fn float_blob(r: &mut Reader<'_>, what: &str) -> Result<Vec<f32>> {
    let bytes = r.u64()? as usize;
    if bytes % 4 != 0 {
        return Err(Error::Format(format!("{what} blob length {bytes} is not a multiple of 4")));
    }
    r.f32s(bytes / 4)
}

pub fn decode_model(data: &[u8]) -> Result<Network> {
    if data.len() < 4 || &data[..4] != MODEL_MAGIC {
        return Err(Error::Format("bad magic; not an .skpc model".into()));
    }
    let body = verify_checksum(data)?;
    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version} (expected {MODEL_VERSION})"
        )));
    }
    let count = r.usize32()?;
    if count == 0 {
        return Err(Error::Format("model has no layers".into()));
    }
    let mut records = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let mut dims = [0usize; 10];
        for d in dims.iter_mut() {
            *d = r.usize32()?;
        }
        let activation = match r.u8()? {
            0 => Activation::Identity,
            1 => Activation::Relu,
            a => return Err(Error::Format(format!("layer {i}: unknown activation code {a}"))),
        };
        match r.u8()? {
            NORM_NONE => {}
            NORM_UNFOLDED_BATCHNORM => {
                return Err(Error::Format(format!(
                    "layer {i}: unfolded batch normalization; fold normalization before export"
                )))
            }
            n => return Err(Error::Format(format!("layer {i}: unknown normalization code {n}"))),
        }
        let gate_code = r.u8()?;
        let variant = GateVariant::from_code(gate_code)
            .ok_or_else(|| Error::Format(format!("layer {i}: unknown gate code {gate_code}")))?;
        let has_bias = r.u8()? != 0;
        let norm_order = r.u32()?;
        let block = r.usize32()?;
        let epsilon = r.f32()?;
        let has_override = r.u8()? != 0;
        let override_value = r.f32()?;
        let weights = (r.u64()? as usize, r.u64()? as usize);
        let bias = (r.u64()? as usize, r.u64()? as usize);
        let phi = (r.u64()? as usize, r.u64()? as usize);

        let geometry = ConvGeometry {
            kernel: (dims[2], dims[3]),
            stride: (dims[4], dims[5]),
            padding: (dims[6], dims[7]),
            dilation: (dims[8], dims[9]),
        };
        geometry
            .validate()
            .map_err(|e| Error::Format(format!("layer {i}: {e}")))?;
        let conv = ConvLayerSpec {
            out_channels: dims[0],
            in_channels: dims[1],
            geometry,
            weights: Vec::new(),
            bias: None,
            activation,
        };
        let gate = GateConfig {
            variant,
            epsilon,
            norm_order,
            block,
            phi: None,
            epsilon_override: has_override.then_some(override_value),
        };
        records.push(Record {
            conv,
            gate,
            weights,
            bias,
            phi,
            has_bias,
        });
    }
    let weight_blob = float_blob(&mut r, "weight")?;
    let gate_blob = float_blob(&mut r, "gate")?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }

    let mut layers = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let mut conv = rec.conv;
        let expected = conv.out_channels * conv.receptive_len();
        if rec.weights.1 != expected {
            return Err(Error::Format(format!(
                "layer {i}: declared {} weights, geometry needs {expected}",
                rec.weights.1
            )));
        }
        conv.weights = blob_slice(&weight_blob, rec.weights, "weights", i)?;
        if rec.has_bias {
            if rec.bias.1 != conv.out_channels {
                return Err(Error::Format(format!(
                    "layer {i}: declared {} bias values for {} channels",
                    rec.bias.1, conv.out_channels
                )));
            }
            conv.bias = Some(blob_slice(&weight_blob, rec.bias, "bias", i)?);
        }
        let mut gate = rec.gate;
        if gate.variant == GateVariant::Gumbel {
            if rec.phi.1 != conv.receptive_len() + 1 {
                return Err(Error::Format(format!(
                    "layer {i}: gate parameters have {} values, expected {}",
                    rec.phi.1,
                    conv.receptive_len() + 1
                )));
            }
            let mut p = blob_slice(&gate_blob, rec.phi, "gate parameters", i)?;
            let bias = p.pop().unwrap();
            gate.phi = Some(GumbelParams::new(p, bias));
        } else if rec.phi.1 != 0 {
            return Err(Error::Format(format!(
                "layer {i}: {} gate carries gate parameters",
                gate.variant
            )));
        }
        conv.validate()
            .map_err(|e| Error::Format(format!("layer {i}: {e}")))?;
        layers.push(Layer { conv, gate });
    }
    Network::new(layers)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(net))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Network {
        let mut n = Network::random(
            &[3, 5, 2],
            ConvGeometry::same(3),
            GateConfig::output_norm(15e-5).with_block(4),
            11,
        )
        .unwrap();
        let l1 = &mut n.layers_mut()[1];
        l1.gate = GateConfig::gumbel(GumbelParams::new(
            (0..45).map(|i| i as f32 * 0.01).collect(),
            -0.75,
        ));
        l1.conv.bias = None;
        n.layers_mut()[0].gate.epsilon_override = Some(0.25);
        n
    }

    #[test]
    fn round_trip_bit_exact() {
        let n = net();
        let bytes = encode_model(&n);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, n);
        for (a, b) in back.layers().iter().zip(n.layers()) {
            let aw: Vec<u32> = a.conv.weights.iter().map(|v| v.to_bits()).collect();
            let bw: Vec<u32> = b.conv.weights.iter().map(|v| v.to_bits()).collect();
            assert_eq!(aw, bw);
        }
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn truncated_is_checksum_error() {
        let bytes = encode_model(&net());
        for cut in [bytes.len() - 1, bytes.len() / 2, 40] {
            assert!(matches!(
                decode_model(&bytes[..cut]),
                Err(Error::Checksum { .. })
            ));
        }
    }

    #[test]
    fn flipped_bit_rejected() {
        let mut bytes = encode_model(&net());
        let i = bytes.len() - 20;
        bytes[i] ^= 0x10;
        assert!(matches!(decode_model(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_model(&net());
        bytes[0] = b'X';
        assert!(decode_model(&bytes).unwrap_err().to_string().contains("magic"));

        let n = net();
        let mut w = Writer::new();
        let good = encode_model(&n);
        w.bytes(&good[..4]);
        w.u32(99);
        w.bytes(&good[8..good.len() - 4]);
        let err = decode_model(&w.finish()).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn unfolded_batchnorm_rejected() {
        let n = net();
        let bytes = encode_with_norm_flags(&n, &[NORM_NONE, NORM_UNFOLDED_BATCHNORM]);
        let err = decode_model(&bytes).unwrap_err();
        assert!(err.to_string().contains("fold normalization before export"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.skpc");
        let n = net();
        save_model(&n, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), n);
    }
}
