//! Checkpoint format: a single binary archive holding the network spec as
//! JSON plus every parameter tensor keyed by its stable name.
//!
//! Layout: magic `DSEGCKP1`, a little-endian u64 header length, the JSON
//! header, then the raw little-endian f64 blobs in header order. f64 bits
//! pass through untouched, so save -> load -> forward is bit-exact.

use crate::error::{Error, Result};
use crate::models::{SegNetwork, SegNetworkSpec};
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DSEGCKP1";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: SegNetworkSpec,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
}

pub fn save(path: &Path, model: &SegNetwork) -> Result<()> {
    let params = model.named_params();
    let header = Header {
        spec: model.spec.clone(),
        entries: params
            .iter()
            .map(|(name, p)| {
                let (a, b, c, d) = p.dim();
                Entry {
                    name: name.clone(),
                    shape: [a, b, c, d],
                }
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for (_, p) in params {
        let mut buf = Vec::with_capacity(p.len() * 8);
        for v in p.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<SegNetwork> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "checkpoint {}: bad magic",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;

    // build an identically-shaped model, then overwrite every parameter
    let mut model = SegNetwork::from_spec(header.spec, 0);
    {
        let mut params = model.named_params_mut();
        if params.len() != header.entries.len() {
            return Err(Error::Data(format!(
                "checkpoint {}: {} entries for {} parameters",
                path.display(),
                header.entries.len(),
                params.len()
            )));
        }
        for (entry, (name, param)) in header.entries.iter().zip(params.iter_mut()) {
            if &entry.name != name {
                return Err(Error::Data(format!(
                    "checkpoint {}: entry `{}` does not match parameter `{name}`",
                    path.display(),
                    entry.name
                )));
            }
            let n: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            f.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = Array4::from_shape_vec(
                (entry.shape[0], entry.shape[1], entry.shape[2], entry.shape[3]),
                data,
            )
            .map_err(|e| Error::Data(format!("checkpoint {}: {e}", path.display())))?;
            if param.dim() != arr.dim() {
                return Err(Error::Data(format!(
                    "checkpoint {}: shape {:?} for `{name}`, expected {:?}",
                    path.display(),
                    arr.dim(),
                    param.dim()
                )));
            }
            **param = arr;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;
    use ndarray::Array4;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model("toy_student_m", 2, 4242).unwrap();
        save(&path, &model).unwrap();
        let loaded = load(&path).unwrap();

        for ((na, pa), (nb, pb)) in model.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(pa.as_slice().unwrap(), pb.as_slice().unwrap(), "{na}");
        }

        // forward outputs identical to the last bit
        let mut rng = crate::rng::rng_from(17);
        let x = Array4::from_shape_simple_fn((1, 1, 32, 32), || rng.gen_range(0.0..1.0));
        let y0 = model.forward(&x.view()).unwrap();
        let y1 = loaded.forward(&x.view()).unwrap();
        assert_eq!(y0, y1);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(load(&path).is_err());
    }
}
