use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DenseNetSpec, NnError};

pub const PARAMS_FORMAT: &str = "dnpf-params";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    /// Free vector not tied to a network layer.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub layer: usize,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector with a layout table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub layout: Vec<ParamBlock>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
    layout: Vec<ParamBlock>,
}

impl ParamSet {
    /// Layout for `spec`: per affine layer `W` (out×in, row-major), `b`, then
    /// layer-norm gain and bias for hidden layers when enabled.
    pub fn layout_for(spec: &DenseNetSpec) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |layer, kind, len| {
            blocks.push(ParamBlock {
                layer,
                kind,
                offset,
                len,
            });
            offset += len;
        };
        for l in 0..spec.linear_layers() {
            let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            push(l, ParamKind::Weight, n_in * n_out);
            push(l, ParamKind::Bias, n_out);
            if spec.use_layer_norm && l < spec.hidden_layers() {
                push(l, ParamKind::NormGain, n_out);
                push(l, ParamKind::NormBias, n_out);
            }
        }
        blocks
    }

    /// All-zero weights and biases; layer-norm gains are 1.
    pub fn zeros(spec: &DenseNetSpec) -> Self {
        let layout = Self::layout_for(spec);
        let total = layout.last().map(|b| b.offset + b.len).unwrap_or(0);
        let mut values = vec![0.0; total];
        for b in layout.iter().filter(|b| b.kind == ParamKind::NormGain) {
            values[b.offset..b.offset + b.len].fill(1.0);
        }
        ParamSet { values, layout }
    }

    /// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero biases.
    /// With `zero_output` the final affine layer starts at zero.
    pub fn init<R: Rng + ?Sized>(spec: &DenseNetSpec, rng: &mut R, zero_output: bool) -> Self {
        let mut p = Self::zeros(spec);
        let last = spec.linear_layers() - 1;
        for b in p.layout.clone() {
            if b.kind != ParamKind::Weight || (zero_output && b.layer == last) {
                continue;
            }
            let bound = 1.0 / (spec.layer_widths[b.layer] as f64).sqrt();
            for v in &mut p.values[b.offset..b.offset + b.len] {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    /// A free-standing vector (e.g. a learned token).
    pub fn free(values: Vec<f64>) -> Self {
        let len = values.len();
        ParamSet {
            values,
            layout: vec![ParamBlock {
                layer: 0,
                kind: ParamKind::Free,
                offset: 0,
                len,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, layer: usize, kind: ParamKind) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|b| b.layer == layer && b.kind == kind)
            .map(|b| &self.values[b.offset..b.offset + b.len])
    }

    pub fn block_range(&self, layer: usize, kind: ParamKind) -> Option<std::ops::Range<usize>> {
        self.layout
            .iter()
            .find(|b| b.layer == layer && b.kind == kind)
            .map(|b| b.offset..b.offset + b.len)
    }

    /// Checks that the layout tiles the vector exactly once and all values are finite.
    pub fn check(&self) -> Result<(), NnError> {
        let mut next = 0;
        for b in &self.layout {
            if b.offset != next {
                return Err(NnError::Layout(format!(
                    "block at {} does not start at {}",
                    b.offset, next
                )));
            }
            next += b.len;
        }
        if next != self.values.len() {
            return Err(NnError::Layout(format!(
                "layout covers {next} of {} values",
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(NnError::Layout(format!("non-finite parameter at index {i}")));
        }
        Ok(())
    }

    /// Writes a one-line JSON header followed by the raw little-endian values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            count: self.values.len(),
            layout: self.layout.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, NnError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| NnError::Layout(format!("bad parameter header: {e}")))?;
        if header.format != PARAMS_FORMAT || header.version != PARAMS_VERSION {
            return Err(NnError::Layout(format!(
                "unsupported parameter format {} v{}",
                header.format, header.version
            )));
        }
        let mut bytes = vec![0u8; header.count * 8];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let p = ParamSet {
            values,
            layout: header.layout,
        };
        p.check()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_tiles_vector() {
        let spec = DenseNetSpec::new(vec![3, 8, 8, 2]);
        let p = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(1), true);
        p.check().unwrap();
        assert_eq!(p.len(), 3 * 8 + 8 + 16 + 8 * 8 + 8 + 16 + 8 * 2 + 2);
        assert!(p.block(2, ParamKind::Weight).unwrap().iter().all(|&v| v == 0.0));
        assert!(p.block(0, ParamKind::NormGain).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let spec = DenseNetSpec::new(vec![2, 5, 1]);
        let p = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(7), false);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ParamSet::read_from(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_foreign_header() {
        let buf = b"{\"format\":\"other\",\"version\":1,\"count\":0,\"layout\":[]}\n".to_vec();
        assert!(ParamSet::read_from(std::io::Cursor::new(buf)).is_err());
    }
}
