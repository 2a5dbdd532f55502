//! `|F| × r` image feature maps and their binary file format:
//! `"FMAP"`, `u32` LE locations, `u32` LE channels, then `f32` LE values in
//! row-major order (one row per location).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    locations: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(locations: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if locations == 0 || channels == 0 {
            return Err(Error::Argument(format!(
                "feature map must be non-empty, got {locations}x{channels}"
            )));
        }
        if data.len() != locations * channels {
            return Err(Error::dim(
                "feature_map",
                format!("{locations}x{channels} needs {} values, got {}", locations * channels, data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature at element {i}")));
        }
        Ok(FeatureMap {
            locations,
            channels,
            data,
        })
    }

    pub fn locations(&self) -> usize {
        self.locations
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn location(&self, j: usize) -> &[f32] {
        &self.data[j * self.channels..(j + 1) * self.channels]
    }
}

pub fn encode_feature_map(fm: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + fm.data.len() * 4);
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&(fm.locations as u32).to_le_bytes());
    out.extend_from_slice(&(fm.channels as u32).to_le_bytes());
    for v in &fm.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 4 || &bytes[..4] != FMAP_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected FMAP".into(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: "truncated header".into(),
        });
    }
    let locations = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if locations == 0 || channels == 0 {
        return Err(Error::Format {
            offset: 4,
            msg: format!("empty feature map {locations}x{channels}"),
        });
    }
    let need = HEADER_LEN + locations * channels * 4;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated payload: header says {locations}x{channels} ({need} bytes), file has {}", bytes.len()),
        });
    }
    if bytes.len() > need {
        return Err(Error::Format {
            offset: need,
            msg: "trailing bytes after payload".into(),
        });
    }
    let mut data = Vec::with_capacity(locations * channels);
    for (i, c) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format {
                offset: HEADER_LEN + 4 * i,
                msg: "non-finite feature value".into(),
            });
        }
        data.push(v);
    }
    Ok(FeatureMap {
        locations,
        channels,
        data,
    })
}

pub fn write_feature_map(fm: &FeatureMap, path: &Path) -> Result<()> {
    fs::write(path, encode_feature_map(fm)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_map(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn large_map_roundtrips_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..196 * 832).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let fm = FeatureMap::new(196, 832, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fmap");
        write_feature_map(&fm, &p).unwrap();
        let back = read_feature_map(&p).unwrap();
        assert_eq!((back.locations(), back.channels()), (196, 832));
        assert!(fm.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn format_errors_carry_offsets() {
        let fm = FeatureMap::new(2, 3, vec![0.5; 6]).unwrap();
        let bytes = encode_feature_map(&fm);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(matches!(decode_feature_map(&bad), Err(Error::Format { offset: 0, .. })));

        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(decode_feature_map(short), Err(Error::Format { offset, .. }) if offset == short.len()));

        let mut nan = bytes.clone();
        nan[HEADER_LEN + 8..HEADER_LEN + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_feature_map(&nan), Err(Error::Format { offset, .. }) if offset == HEADER_LEN + 8));
    }

    #[test]
    fn constructor_validates() {
        assert!(FeatureMap::new(0, 3, vec![]).is_err());
        assert!(FeatureMap::new(1, 3, vec![0.0; 2]).is_err());
        assert!(FeatureMap::new(1, 1, vec![f32::INFINITY]).is_err());
    }
}
