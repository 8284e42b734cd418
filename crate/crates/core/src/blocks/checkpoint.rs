//! Parameter checkpoints.
//!
//! Layout: a UTF-8 manifest followed by concatenated tensor payloads, each
//! in the binary tensor format of [`crate::numerics::io`].
//!
//! ```text
//! ISOCKPT v1
//! meta <key> <value...>
//! tensor <name> <d0,d1,...|-> <offset> <byte_len>
//! end
//! <payload bytes>
//! ```
//!
//! Offsets are relative to the first payload byte, which follows the
//! newline after `end`.

use std::fmt::Write as _;
use std::path::Path;

use crate::numerics::{io, DenseArray};

use super::{BlockError, ParamSet};

pub const HEADER: &str = "ISOCKPT v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, DenseArray)>,
}

fn dims_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl Checkpoint {
    pub fn from_params<P: ParamSet + ?Sized>(params: &P, meta: Vec<(String, String)>) -> Self {
        let tensors = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Self { meta, tensors }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{HEADER}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(head, "meta {k} {v}");
        }
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = io::encode(t);
            let _ = writeln!(
                head,
                "tensor {name} {} {} {}",
                dims_str(t.shape()),
                payload.len(),
                bytes.len()
            );
            payload.extend_from_slice(&bytes);
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, BlockError> {
        let fail = |reason: String| BlockError::Checkpoint {
            path: origin.to_string(),
            reason,
        };
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String), BlockError> {
            let start = *pos;
            let rel = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| fail(format!("unterminated manifest at byte {start}")))?;
            *pos = start + rel + 1;
            let line = std::str::from_utf8(&bytes[start..start + rel])
                .map_err(|_| fail(format!("manifest is not UTF-8 at byte {start}")))?;
            Ok((start, line.to_string()))
        };

        let (_, first) = next_line(&mut pos)?;
        if first != HEADER {
            return Err(fail(format!("bad header '{first}' at byte 0")));
        }
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        loop {
            let (at, line) = next_line(&mut pos)?;
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("end") => break,
                Some("meta") => {
                    let rest = parts.next().unwrap_or("");
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                Some("tensor") => {
                    let f: Vec<&str> = parts.next().unwrap_or("").split(' ').collect();
                    if f.len() != 4 {
                        return Err(fail(format!("malformed tensor line at byte {at}")));
                    }
                    let shape: Vec<usize> = if f[1] == "-" {
                        vec![]
                    } else {
                        f[1].split(',')
                            .map(|d| d.parse())
                            .collect::<Result<_, _>>()
                            .map_err(|_| fail(format!("bad dims at byte {at}")))?
                    };
                    let off: usize = f[2].parse().map_err(|_| fail(format!("bad offset at byte {at}")))?;
                    let len: usize = f[3].parse().map_err(|_| fail(format!("bad length at byte {at}")))?;
                    entries.push((f[0].to_string(), shape, off, len));
                }
                _ => return Err(fail(format!("unknown manifest line at byte {at}"))),
            }
        }
        let base = pos;
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, off, len) in entries {
            let start = base
                .checked_add(off)
                .filter(|s| s.checked_add(len).is_some_and(|e| e <= bytes.len()))
                .ok_or_else(|| fail(format!("tensor '{name}' payload at byte {} is truncated", base + off)))?;
            let (t, used) = io::decode(&bytes[start..start + len], start as u64)
                .map_err(|e| fail(format!("tensor '{name}': {e}")))?;
            if used != len || t.shape() != shape.as_slice() {
                return Err(fail(format!(
                    "tensor '{name}' at byte {start} disagrees with its manifest entry"
                )));
            }
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), BlockError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| BlockError::Checkpoint {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, BlockError> {
        let bytes = std::fs::read(path).map_err(|e| BlockError::Checkpoint {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Copies tensors into `params`, which must have exactly the stored
    /// names and shapes in the same order. The first disagreement is reported.
    pub fn restore<P: ParamSet + ?Sized>(&self, params: &mut P) -> Result<(), BlockError> {
        let manifest = params.manifest();
        for (i, (name, shape)) in manifest.iter().enumerate() {
            match self.tensors.get(i) {
                Some((n, t)) if n == name && t.shape() == shape.as_slice() => {}
                Some((n, t)) => {
                    return Err(BlockError::TensorMismatch {
                        name: name.clone(),
                        expected: format!("{name} {shape:?}"),
                        found: format!("{n} {:?}", t.shape()),
                    })
                }
                None => {
                    return Err(BlockError::TensorMismatch {
                        name: name.clone(),
                        expected: format!("{name} {shape:?}"),
                        found: "nothing".into(),
                    })
                }
            }
        }
        if let Some((n, t)) = self.tensors.get(manifest.len()) {
            return Err(BlockError::TensorMismatch {
                name: n.clone(),
                expected: "end of parameters".into(),
                found: format!("{n} {:?}", t.shape()),
            });
        }
        let mut i = 0;
        params.visit_mut("", &mut |_, t| {
            *t = self.tensors[i].1.clone();
            i += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{BlockConfig, BlockKind, BlockParams};
    use crate::numerics::Rng;

    fn params(seed: u64, c: usize) -> BlockParams {
        let mut rng = Rng::new(seed);
        BlockParams::init(BlockKind::Sgst, &BlockConfig::new(c, 9), &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params(1, 4);
        let ck = Checkpoint::from_params(&p, vec![("kind".into(), "sgst block".into())]);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), "mem").unwrap();
        assert_eq!(back.meta("kind"), Some("sgst block"));
        let mut q = params(2, 4);
        back.restore(&mut q).unwrap();
        assert_eq!(
            p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            q.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mismatch_names_first_tensor() {
        let ck = Checkpoint::from_params(&params(1, 4), vec![]);
        let mut other = params(1, 8);
        match ck.restore(&mut other) {
            Err(BlockError::TensorMismatch { name, .. }) => assert_eq!(name, "norm1.gamma"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = Checkpoint::from_params(&params(1, 4), vec![]).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "cut").unwrap_err();
        assert!(err.to_string().contains("cut"));
    }
}
