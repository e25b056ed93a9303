//! Binary checkpointing: the architecture string, the loss/regularizer
//! configuration, and every state tensor (parameters plus batchnorm
//! running statistics) as little-endian f64, restoring bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::archdsl::{format_architecture, parse_architecture};
use crate::error::{Error, Result};
use crate::pooling::PoolMode;
use crate::swwae::{Modality, SwwaeConfig, SwwaeModel};

const MAGIC: &[u8; 6] = b"SWWAE1";

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("dimension exceeds u32 range"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

/// Serialize the model to a writer.
pub fn save_checkpoint(model: &mut SwwaeModel, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    let arch = format_architecture(model.arch());
    write_u32(w, arch.len())?;
    w.write_all(arch.as_bytes())?;
    let (c, h, wd) = model.input_shape();
    write_u32(w, c)?;
    write_u32(w, h)?;
    write_u32(w, wd)?;

    let cfg = *model.config();
    write_f64(w, cfg.lambda_nll)?;
    write_f64(w, cfg.lambda_l2rec)?;
    write_f64(w, cfg.lambda_l2m)?;
    match cfg.pool_mode {
        PoolMode::Hard => {
            w.write_all(&[0])?;
            write_f64(w, 0.0)?;
        }
        PoolMode::Soft { beta } => {
            w.write_all(&[1])?;
            write_f64(w, beta)?;
        }
    }
    write_f64(w, cfg.dropout)?;
    write_f64(w, cfg.conv_dropout)?;
    write_f64(w, cfg.l1_weight)?;
    w.write_all(&[cfg.batchnorm as u8, cfg.decoder_batchnorm as u8])?;
    let modality = match model.modality() {
        Modality::Supervised => 0u8,
        Modality::Unsupervised => 1,
        Modality::Semi => 2,
    };
    w.write_all(&[modality, model.has_decoder() as u8])?;

    let mut count = 0usize;
    model.visit_state(|_| count += 1);
    write_u32(w, count)?;
    let mut err = None;
    model.visit_state(|t| {
        if err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                write_u32(w, d)?;
            }
            for &v in t.data() {
                write_f64(w, v)?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Rebuild a model from a reader produced by [`save_checkpoint`].
pub fn load_checkpoint(r: &mut impl Read) -> Result<SwwaeModel> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid("not a model checkpoint (bad magic)"));
    }
    let arch_len = read_u32(r)?;
    let mut arch_bytes = vec![0u8; arch_len];
    r.read_exact(&mut arch_bytes)?;
    let arch_str = String::from_utf8(arch_bytes)
        .map_err(|_| Error::invalid("architecture string is not utf-8"))?;
    let arch = parse_architecture(&arch_str)?;
    let c = read_u32(r)?;
    let h = read_u32(r)?;
    let w = read_u32(r)?;

    let lambda_nll = read_f64(r)?;
    let lambda_l2rec = read_f64(r)?;
    let lambda_l2m = read_f64(r)?;
    let pool_tag = read_u8(r)?;
    let beta = read_f64(r)?;
    let pool_mode = match pool_tag {
        0 => PoolMode::Hard,
        1 => PoolMode::Soft { beta },
        t => return Err(Error::invalid(format!("unknown pool mode tag {t}"))),
    };
    let dropout = read_f64(r)?;
    let conv_dropout = read_f64(r)?;
    let l1_weight = read_f64(r)?;
    let batchnorm = read_u8(r)? != 0;
    let decoder_batchnorm = read_u8(r)? != 0;
    let modality = match read_u8(r)? {
        0 => Modality::Supervised,
        1 => Modality::Unsupervised,
        2 => Modality::Semi,
        t => return Err(Error::invalid(format!("unknown modality tag {t}"))),
    };
    let with_decoder = read_u8(r)? != 0;

    let config = SwwaeConfig {
        lambda_nll,
        lambda_l2rec,
        lambda_l2m,
        pool_mode,
        dropout,
        conv_dropout,
        l1_weight,
        batchnorm,
        decoder_batchnorm,
    };
    let mut model = SwwaeModel::new(&arch, c, h, w, config, with_decoder, 0)?;
    model.set_modality(modality);

    let mut expected = 0usize;
    model.visit_state(|_| expected += 1);
    let count = read_u32(r)?;
    if count != expected {
        return Err(Error::invalid(format!(
            "checkpoint holds {count} tensors, model expects {expected}"
        )));
    }
    let mut err = None;
    model.visit_state_mut(|t| {
        if err.is_some() {
            return;
        }
        let res = (|| -> Result<()> {
            let rank = read_u8(r)? as usize;
            if rank != t.rank() {
                return Err(Error::invalid(format!(
                    "checkpoint tensor rank {rank} != model rank {}",
                    t.rank()
                )));
            }
            for &d in t.shape().to_vec().iter() {
                let got = read_u32(r)?;
                if got != d {
                    return Err(Error::invalid(format!(
                        "checkpoint tensor dimension {got} != model dimension {d}"
                    )));
                }
            }
            for v in t.data_mut() {
                *v = read_f64(r)?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

/// Serialize the model to a file.
pub fn save_checkpoint_file(model: &mut SwwaeModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Rebuild a model from a checkpoint file.
pub fn load_checkpoint_file(path: &Path) -> Result<SwwaeModel> {
    let mut r = BufReader::new(File::open(path)?);
    load_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::rng::{self, uniform_fill};
    use crate::tensor::Tensor;

    fn trained_model() -> SwwaeModel {
        let arch = parse_architecture("(4)3c-2p-(4)3c-2p-4fc").unwrap();
        let config = SwwaeConfig {
            lambda_l2rec: 0.5,
            lambda_l2m: 0.3,
            pool_mode: PoolMode::Soft { beta: 4.0 },
            batchnorm: true,
            dropout: 0.25,
            ..SwwaeConfig::default()
        };
        let mut m = SwwaeModel::new(&arch, 1, 8, 8, config, true, 123).unwrap();
        // push the model away from its initialization, including running
        // statistics, so the round-trip exercises non-default state
        let mut r = rng::stream(7, 0);
        let mut x = Tensor::zeros(&[4, 1, 8, 8]);
        uniform_fill(x.data_mut(), -1.0, 1.0, &mut r);
        let labels = [0usize, 1, 2, 3];
        for _ in 0..3 {
            let (trace, _) = m
                .forward(&x, Some(&labels), &[true; 4], Mode::Train, &mut r)
                .unwrap();
            m.backward(&trace).unwrap();
            for p in m.params_mut() {
                let g: Vec<f64> = p.grad.data().to_vec();
                for (v, g) in p.value.data_mut().iter_mut().zip(g) {
                    *v -= 0.01 * g;
                }
                p.zero_grad();
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = trained_model();
        m.set_modality(Modality::Semi);
        let mut buf = Vec::new();
        save_checkpoint(&mut m, &mut buf).unwrap();
        let mut restored = load_checkpoint(&mut buf.as_slice()).unwrap();

        let mut original_state = Vec::new();
        m.visit_state(|t| original_state.push(t.clone()));
        let mut restored_state = Vec::new();
        restored.visit_state(|t| restored_state.push(t.clone()));
        assert_eq!(original_state.len(), restored_state.len());
        for (a, b) in original_state.iter().zip(&restored_state) {
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "state tensors must restore bit-exactly");
        }
        assert_eq!(restored.modality(), Modality::Semi);
        assert_eq!(restored.config(), m.config());
        assert_eq!(
            format_architecture(restored.arch()),
            format_architecture(m.arch())
        );

        // identical eval behavior on fresh input
        let mut r = rng::stream(9, 0);
        let mut x = Tensor::zeros(&[2, 1, 8, 8]);
        uniform_fill(x.data_mut(), -1.0, 1.0, &mut r);
        let la = m.infer_logits(&x).unwrap();
        let lb = restored.infer_logits(&x).unwrap();
        assert_eq!(la, lb);
        let ra = m.reconstruct(&x).unwrap();
        let rb = restored.reconstruct(&x).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn file_round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.swwae");
        let mut m = trained_model();
        save_checkpoint_file(&mut m, &path).unwrap();
        let restored = load_checkpoint_file(&path).unwrap();
        assert_eq!(restored.input_shape(), m.input_shape());

        std::fs::write(&path, b"NOTAMODEL").unwrap();
        assert!(load_checkpoint_file(&path).is_err());
    }

    #[test]
    fn truncated_checkpoint_errors() {
        let mut m = trained_model();
        let mut buf = Vec::new();
        save_checkpoint(&mut m, &mut buf).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(load_checkpoint(&mut buf.as_slice()).is_err());
    }
}
