//! Architecture notation parser and decoder mirroring.
//!
//! Grammar: `spec := token ("-" token)*` with
//! `token := "(" int ")" int "c" | int "p" | int "fc"`, no whitespace.
//! `(16)5c` is a convolution with 16 maps and a 5x5 kernel, `2p` a 2x2
//! pooling layer, `10fc` a fully-connected layer with 10 units. Every
//! fully-connected layer must come after the last conv/pool; the decoder is
//! the structural mirror of the conv/pool prefix.

use crate::error::{Error, Result};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { maps: usize, kernel: usize },
    Pool { size: usize },
    Fc { units: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { maps, kernel } => write!(f, "({maps}){kernel}c"),
            LayerSpec::Pool { size } => write!(f, "{size}p"),
            LayerSpec::Fc { units } => write!(f, "{units}fc"),
        }
    }
}

/// Mirrored decoder layer. `Conv` output channel counts are resolved
/// against the encoder at mirroring time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderLayerSpec {
    Unpool { size: usize },
    Conv { out_maps: usize, kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// The conv/pool prefix that the decoder mirrors (everything before the
    /// first fully-connected layer).
    pub fn conv_pool_prefix(&self) -> &[LayerSpec] {
        let end = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Fc { .. }))
            .unwrap_or(self.layers.len());
        &self.layers[..end]
    }

    pub fn fc_suffix(&self) -> &[LayerSpec] {
        &self.layers[self.conv_pool_prefix().len()..]
    }

    pub fn pool_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Pool { size } => Some(*size),
                _ => None,
            })
            .collect()
    }
}

fn parse_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let start = *pos;
    let mut value: usize = 0;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((bytes[*pos] - b'0') as usize))
            .ok_or_else(|| Error::Parse {
                offset: start,
                message: "integer overflow".into(),
            })?;
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::Parse {
            offset: start,
            message: "expected an integer".into(),
        });
    }
    Ok(value)
}

fn expect(bytes: &[u8], pos: &mut usize, what: u8) -> Result<()> {
    if *pos < bytes.len() && bytes[*pos] == what {
        *pos += 1;
        Ok(())
    } else {
        Err(Error::Parse {
            offset: *pos,
            message: format!("expected '{}'", what as char),
        })
    }
}

/// Parse an architecture string, validating the grammar and the structural
/// invariants (positive sizes, odd kernels, fully-connected layers only
/// after the last conv/pool). Errors carry the byte offset of the problem.
pub fn parse_architecture(text: &str) -> Result<ArchSpec> {
    let bytes = text.as_bytes();
    if bytes.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            message: "empty architecture".into(),
        });
    }
    let mut layers = Vec::new();
    let mut pos = 0usize;
    let mut seen_fc_at: Option<usize> = None;
    loop {
        let token_start = pos;
        let layer = if pos < bytes.len() && bytes[pos] == b'(' {
            pos += 1;
            let maps = parse_int(bytes, &mut pos)?;
            expect(bytes, &mut pos, b')')?;
            let kernel_at = pos;
            let kernel = parse_int(bytes, &mut pos)?;
            expect(bytes, &mut pos, b'c')?;
            if maps == 0 {
                return Err(Error::Parse {
                    offset: token_start + 1,
                    message: "feature map count must be positive".into(),
                });
            }
            if kernel == 0 || kernel % 2 == 0 {
                return Err(Error::Parse {
                    offset: kernel_at,
                    message: format!("kernel must be odd and positive, got {kernel}"),
                });
            }
            LayerSpec::Conv { maps, kernel }
        } else {
            let n_at = pos;
            let n = parse_int(bytes, &mut pos)?;
            if pos < bytes.len() && bytes[pos] == b'p' {
                pos += 1;
                if n == 0 {
                    return Err(Error::Parse {
                        offset: n_at,
                        message: "pool size must be positive".into(),
                    });
                }
                LayerSpec::Pool { size: n }
            } else if pos + 1 < bytes.len() && &bytes[pos..pos + 2] == b"fc" {
                pos += 2;
                if n == 0 {
                    return Err(Error::Parse {
                        offset: n_at,
                        message: "unit count must be positive".into(),
                    });
                }
                LayerSpec::Fc { units: n }
            } else {
                return Err(Error::Parse {
                    offset: pos,
                    message: "expected 'p' or 'fc' after integer".into(),
                });
            }
        };
        match layer {
            LayerSpec::Fc { .. } => seen_fc_at = Some(token_start),
            _ => {
                if seen_fc_at.is_some() {
                    return Err(Error::Parse {
                        offset: token_start,
                        message: "conv/pool layer after a fully-connected layer".into(),
                    });
                }
            }
        }
        layers.push(layer);
        if pos == bytes.len() {
            break;
        }
        expect(bytes, &mut pos, b'-')?;
    }
    Ok(ArchSpec { layers })
}

/// Render a spec back to the notation; `parse(format(s)) == s`.
pub fn format_architecture(spec: &ArchSpec) -> String {
    spec.layers
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// Derive the decoder: reverse the conv/pool prefix, turning `Pool(s)` into
/// `Unpool(s)` and each conv into a decoder conv with the same kernel whose
/// output channel count equals that encoder conv's *input* channel count
/// (the image channels for the first conv). Decoder weights are independent
/// of the encoder's.
pub fn mirror_decoder(encoder: &[LayerSpec], input_channels: usize) -> Vec<DecoderLayerSpec> {
    // input channel count of each conv in the prefix
    let mut in_ch = input_channels;
    let mut conv_inputs = Vec::new();
    let prefix_end = encoder
        .iter()
        .position(|l| matches!(l, LayerSpec::Fc { .. }))
        .unwrap_or(encoder.len());
    for layer in &encoder[..prefix_end] {
        if let LayerSpec::Conv { maps, .. } = layer {
            conv_inputs.push(in_ch);
            in_ch = *maps;
        }
    }
    let mut decoder = Vec::new();
    let mut conv_iter = conv_inputs.into_iter().rev();
    for layer in encoder[..prefix_end].iter().rev() {
        match layer {
            LayerSpec::Pool { size } => decoder.push(DecoderLayerSpec::Unpool { size: *size }),
            LayerSpec::Conv { kernel, .. } => decoder.push(DecoderLayerSpec::Conv {
                out_maps: conv_iter.next().expect("one input per conv"),
                kernel: *kernel,
            }),
            LayerSpec::Fc { .. } => unreachable!("fc excluded from prefix"),
        }
    }
    decoder
}

/// Shape of the activation after each encoder layer, starting from
/// `(channels, h, w)`. Fully-connected layers flatten; pooling validates
/// divisibility.
pub fn propagate_shapes(
    encoder: &[LayerSpec],
    channels: usize,
    h: usize,
    w: usize,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut shapes = Vec::with_capacity(encoder.len());
    let (mut c, mut hh, mut ww) = (channels, h, w);
    let mut flat = false;
    for (i, layer) in encoder.iter().enumerate() {
        match layer {
            LayerSpec::Conv { maps, .. } => {
                if flat {
                    return Err(Error::invalid(format!(
                        "layer {i}: conv after fully-connected"
                    )));
                }
                c = *maps;
            }
            LayerSpec::Pool { size } => {
                if flat {
                    return Err(Error::invalid(format!(
                        "layer {i}: pool after fully-connected"
                    )));
                }
                if hh % size != 0 || ww % size != 0 {
                    return Err(Error::invalid(format!(
                        "layer {i}: extent {hh}x{ww} not divisible by pool size {size}"
                    )));
                }
                hh /= size;
                ww /= size;
            }
            LayerSpec::Fc { units } => {
                c = if flat { c } else { c * hh * ww };
                let _ = c; // flattened input width
                c = *units;
                hh = 1;
                ww = 1;
                flat = true;
            }
        }
        shapes.push((c, hh, ww));
    }
    Ok(shapes)
}

/// Shape after each decoder layer, starting from the encoder prefix output.
pub fn propagate_decoder_shapes(
    decoder: &[DecoderLayerSpec],
    channels: usize,
    h: usize,
    w: usize,
) -> Vec<(usize, usize, usize)> {
    let (mut c, mut hh, mut ww) = (channels, h, w);
    decoder
        .iter()
        .map(|layer| {
            match layer {
                DecoderLayerSpec::Unpool { size } => {
                    hh *= size;
                    ww *= size;
                }
                DecoderLayerSpec::Conv { out_maps, .. } => c = *out_maps,
            }
            (c, hh, ww)
        })
        .collect()
}

/// Every architecture string exercised by the experiment suite.
pub const CORPUS: [&str; 7] = [
    "(16)5c-(32)3c-2p-10fc",
    "(16)5c-(32)3c-2p",
    "(32)5c-(32)3c-2p-(32)3c-16p",
    "(64)5c-2p-(64)3c-2p-(64)3c-2p-10fc",
    "(128)5c-2p-(128)3c-(256)3c-2p-(256)3c-2p-10fc",
    "(64)3c-4p-(64)3c-3p-(128)3c-(128)3c-2p-(256)3c-(256)3c-(256)3c-(512)3c-(512)3c-(512)3c-2p-10fc",
    "(128)3c-(256)3c-2p-(256)3c-(512)3c-2p-(512)3c-(512)3c-2p-(512)3c-(512)3c-2p-128fc-10fc",
];
