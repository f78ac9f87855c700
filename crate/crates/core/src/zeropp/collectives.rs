//! Value effects of the weight gather and the gradient reduction.

use std::sync::Arc;

use crate::numerics::{
    dequantize_values, quant_wire_bytes, quantize_values, Memory, Region, GRAD_BLOCK, WEIGHT_BLOCK,
};
use crate::stream::Action;

/// Bytes each rank contributes to a weight gather of `shard_len` elements.
pub fn gather_payload_bytes(shard_len: usize, qwz: bool) -> f64 {
    if qwz {
        quant_wire_bytes(shard_len, 8, WEIGHT_BLOCK) as f64
    } else {
        shard_len as f64 * 4.0
    }
}

/// Bytes per destination chunk of a gradient reduction.
pub fn reduce_payload_bytes(shard_len: usize, qgz: bool) -> f64 {
    if qgz {
        quant_wire_bytes(shard_len, 4, GRAD_BLOCK) as f64
    } else {
        shard_len as f64 * 4.0
    }
}

/// Quantize/dequantize round trip as seen by the receiver. A chunk that
/// cannot be quantized (non-finite) arrives as NaN rather than being masked.
fn lossy(values: &[f32], bits: u8, block: usize) -> Vec<f32> {
    match quantize_values(values, bits, block).and_then(|q| dequantize_values(&q)) {
        Ok(v) => v,
        Err(_) => vec![f32::NAN; values.len()],
    }
}

/// Every destination receives the concatenation of all sources in group order.
pub(crate) fn gather_action(sources: Vec<Region>, dests: Vec<Region>, quantize: bool) -> Action {
    let quantize = quantize && sources.len() > 1;
    Arc::new(move |m: &mut Memory| {
        let mut full = Vec::with_capacity(dests.first().map_or(0, |d| d.len));
        for &s in &sources {
            if quantize {
                full.extend(lossy(m.read(s), 8, WEIGHT_BLOCK));
            } else {
                full.extend_from_slice(m.read(s));
            }
        }
        for &d in &dests {
            m.write(d, &full);
        }
    })
}

/// Destination `r` receives the mean over sources `j` of chunk `r` of source
/// `j`'s full gradient. Accumulation is in `f64` in source order.
pub(crate) fn reduce_action(sources: Vec<Region>, dests: Vec<Region>, quantize: bool) -> Action {
    let quantize = quantize && sources.len() > 1;
    Arc::new(move |m: &mut Memory| {
        let world = sources.len();
        let chunk = dests[0].len;
        let mut outs = vec![vec![0.0f64; chunk]; world];
        for &s in &sources {
            let full = m.read(s);
            for (r, out) in outs.iter_mut().enumerate() {
                let piece = &full[r * chunk..(r + 1) * chunk];
                let received = if quantize { lossy(piece, 4, GRAD_BLOCK) } else { piece.to_vec() };
                for (o, v) in out.iter_mut().zip(received) {
                    *o += v as f64;
                }
            }
        }
        for (d, out) in dests.iter().zip(outs) {
            let mean: Vec<f32> = out.into_iter().map(|v| (v / world as f64) as f32).collect();
            m.write(*d, &mean);
        }
    })
}
