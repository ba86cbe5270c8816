//! Flat tensor archive: a text manifest followed by raw little-endian `f32`.
//!
//! ```text
//! entroscope-archive v1
//! meta <key>=<value>
//! tensor <name> <d0>x<d1>.. <offset> <byte_len> <checksum>
//! end
//! <payload>
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::checksum64;

const HEADER: &str = "entroscope-archive v1";
const END: &str = "end\n";

pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn write(meta: &[(String, String)], tensors: &[(&str, &Tensor<f32>)]) -> Vec<u8> {
    let mut head = String::new();
    writeln!(head, "{HEADER}").unwrap();
    for (k, v) in meta {
        writeln!(head, "meta {k}={v}").unwrap();
    }
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let start = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let bytes = &payload[start..];
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(head, "tensor {name} {} {start} {} {:016x}", shape.join("x"), bytes.len(), checksum64(bytes)).unwrap();
    }
    head.push_str(END);
    let mut out = head.into_bytes();
    out.extend(payload);
    out
}

pub fn read(bytes: &[u8]) -> Result<Archive> {
    let bad = |d: String| Error::format("archive", d);
    let split = bytes
        .windows(END.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == END.as_bytes())
        .ok_or_else(|| bad("manifest terminator not found".into()))?;
    let head = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| bad("manifest is not UTF-8".into()))?;
    let payload = &bytes[split + 1 + END.len()..];
    let mut lines = head.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad("missing or unsupported version header".into()));
    }
    let mut meta = Vec::new();
    let mut tensors = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once('=').ok_or_else(|| bad(format!("bad meta line {line:?}")))?;
            meta.push((k.to_string(), v.to_string()));
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = rest.split(' ').collect();
            let [name, shape, off, len, sum] = f[..] else {
                return Err(bad(format!("bad tensor line {line:?}")));
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
            let shape: Vec<usize> = if shape.is_empty() {
                vec![]
            } else {
                shape.split('x').map(num).collect::<Result<_>>()?
            };
            let (off, len) = (num(off)?, num(len)?);
            let chunk = payload
                .get(off..off + len)
                .ok_or_else(|| bad(format!("tensor {name} extends past the payload")))?;
            if format!("{:016x}", checksum64(chunk)) != sum {
                return Err(Error::Checksum(format!("tensor {name} payload does not match its checksum")));
            }
            let data: Vec<f32> = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((name.to_string(), Tensor::new(shape, data)?));
        } else {
            return Err(bad(format!("unexpected manifest line {line:?}")));
        }
    }
    Ok(Archive { meta, tensors })
}
