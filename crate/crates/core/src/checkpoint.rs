//! Parameter checkpoints: a text manifest followed by a flat little-endian
//! `f64` payload.
//!
//! ```text
//! props-checkpoint v1
//! kind <kind>
//! meta <key>=<value>        (zero or more)
//! param <name> <d0>x<d1>... <offset> <len>
//! fingerprint <hex>
//! end
//! <payload bytes>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::params::ParamSet;

const MAGIC: &str = "props-checkpoint v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub params: ParamSet,
}

pub fn to_bytes(kind: &str, meta: &BTreeMap<String, String>, params: &ParamSet) -> Result<Vec<u8>> {
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Contract(format!("metadata entry `{k}` is not representable")));
        }
    }
    let mut head = format!("{MAGIC}\nkind {kind}\n");
    for (k, v) in meta {
        head.push_str(&format!("meta {k}={v}\n"));
    }
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!("param {name} {} {offset} {}\n", shape.join("x"), t.len()));
        offset += t.len() * 8;
    }
    head.push_str(&format!("fingerprint {:016x}\nend\n", params.fingerprint()));
    let mut out = head.into_bytes();
    out.reserve(offset);
    for (_, t) in params.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let end = find_header_end(bytes).ok_or_else(|| Error::integrity("manifest", "missing `end` line"))?;
    let head = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::integrity("manifest", "not UTF-8"))?;
    let payload = &bytes[end..];
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::integrity("header", "unknown magic line"));
    }
    let mut kind = None;
    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    let mut fingerprint = None;
    for line in lines {
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        match tag {
            "kind" => kind = Some(rest.to_string()),
            "meta" => {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::integrity("meta", format!("malformed line `{line}`")))?;
                meta.insert(k.to_string(), v.to_string());
            }
            "param" => entries.push(parse_param(rest)?),
            "fingerprint" => {
                fingerprint = Some(
                    u64::from_str_radix(rest, 16)
                        .map_err(|_| Error::integrity("fingerprint", format!("bad value `{rest}`")))?,
                )
            }
            "end" => break,
            _ => return Err(Error::integrity("manifest", format!("unexpected line `{line}`"))),
        }
    }
    let kind = kind.ok_or_else(|| Error::integrity("header", "missing kind"))?;
    let fingerprint = fingerprint.ok_or_else(|| Error::integrity("fingerprint", "missing"))?;
    let mut params = ParamSet::new();
    let mut expect_offset = 0;
    for (name, shape, offset, len) in entries {
        if offset != expect_offset || shape.iter().product::<usize>() != len {
            return Err(Error::integrity("param", format!("inconsistent entry for `{name}`")));
        }
        let stop = offset + len * 8;
        let raw = payload
            .get(offset..stop)
            .ok_or_else(|| Error::integrity("payload", format!("truncated at `{name}`")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::integrity("param", e.to_string()))?;
        params.add(name, t);
        expect_offset = stop;
    }
    if payload.len() != expect_offset {
        return Err(Error::integrity(
            "payload",
            format!("{} bytes, manifest describes {expect_offset}", payload.len()),
        ));
    }
    let actual = params.fingerprint();
    if actual != fingerprint {
        return Err(Error::integrity(
            "fingerprint",
            format!("stored {fingerprint:016x}, computed {actual:016x}"),
        ));
    }
    Ok(Checkpoint { kind, meta, params })
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"\nend\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
}

fn parse_param(rest: &str) -> Result<(String, Vec<usize>, usize, usize)> {
    let bad = || Error::integrity("param", format!("malformed entry `{rest}`"));
    let f: Vec<&str> = rest.split(' ').collect();
    if f.len() != 4 {
        return Err(bad());
    }
    let shape = f[1]
        .split('x')
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<Vec<usize>>>()?;
    Ok((
        f[0].to_string(),
        shape,
        f[2].parse().map_err(|_| bad())?,
        f[3].parse().map_err(|_| bad())?,
    ))
}

pub fn save(path: &Path, kind: &str, meta: &BTreeMap<String, String>, params: &ParamSet) -> Result<()> {
    let bytes = to_bytes(kind, meta, params)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
