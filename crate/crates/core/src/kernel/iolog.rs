//! Input logs and system output: length-prefixed little-endian records
//! `(u32 device, u32 length, bytes)`.

use std::io;

use thiserror::Error;

pub const DEV_CONSOLE: u32 = 0;
/// `key=value` run parameters for the root program.
pub const DEV_ARGS: u32 = 1;
/// Initial file contents: `path\0bytes`.
pub const DEV_FILE: u32 = 2;
/// Synchronization event traces.
pub const DEV_TRACE: u32 = 3;
/// Cluster message traces.
pub const DEV_MESSAGES: u32 = 4;
/// Final file-system serialization.
pub const DEV_FS: u32 = 5;
/// Process exit summaries.
pub const DEV_STATUS: u32 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    pub device: u32,
    pub bytes: Vec<u8>,
}

impl Record {
    pub fn new(device: u32, bytes: impl Into<Vec<u8>>) -> Self {
        Record {
            device,
            bytes: bytes.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("truncated record at offset {0}")]
    Truncated(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(&r.device.to_le_bytes());
        out.extend_from_slice(&(r.bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&r.bytes);
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<Vec<Record>, LogError> {
    let total = bytes.len();
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let at = total - bytes.len();
        if bytes.len() < 8 {
            return Err(LogError::Truncated(at));
        }
        let device = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() - 8 < len {
            return Err(LogError::Truncated(at));
        }
        out.push(Record {
            device,
            bytes: bytes[8..8 + len].to_vec(),
        });
        bytes = &bytes[8 + len..];
    }
    Ok(out)
}

/// The recorded external inputs of one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InputLog {
    pub records: Vec<Record>,
}

impl InputLog {
    pub fn new() -> Self {
        InputLog::default()
    }

    pub fn push(&mut self, device: u32, bytes: impl Into<Vec<u8>>) -> &mut Self {
        self.records.push(Record::new(device, bytes));
        self
    }

    /// Adds a `key=value` parameter record.
    pub fn arg(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.push(DEV_ARGS, format!("{key}={value}"))
    }

    pub fn file(&mut self, path: &str, content: &[u8]) -> &mut Self {
        let mut b = path.as_bytes().to_vec();
        b.push(0);
        b.extend_from_slice(content);
        self.push(DEV_FILE, b)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LogError> {
        Ok(InputLog {
            records: decode(bytes)?,
        })
    }
}

/// Everything the root emitted, in emission order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SystemOutput {
    pub records: Vec<Record>,
}

impl SystemOutput {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LogError> {
        Ok(SystemOutput {
            records: decode(bytes)?,
        })
    }

    /// Concatenated payloads of one device.
    pub fn device(&self, device: u32) -> Vec<u8> {
        self.records
            .iter()
            .filter(|r| r.device == device)
            .flat_map(|r| r.bytes.iter().copied())
            .collect()
    }

    pub fn console(&self) -> Vec<u8> {
        self.device(DEV_CONSOLE)
    }

    pub fn console_text(&self) -> String {
        String::from_utf8_lossy(&self.console()).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let recs = vec![Record::new(0, b"hi".to_vec()), Record::new(7, Vec::new())];
        let b = encode(&recs);
        assert_eq!(&b[..10], &[0, 0, 0, 0, 2, 0, 0, 0, b'h', b'i']);
        assert_eq!(decode(&b).unwrap(), recs);
    }

    #[test]
    fn truncation_detected() {
        let b = encode(&[Record::new(1, b"abc".to_vec())]);
        assert!(matches!(
            decode(&b[..b.len() - 1]),
            Err(LogError::Truncated(0))
        ));
        assert!(matches!(decode(&b[..5]), Err(LogError::Truncated(0))));
    }

    #[test]
    fn empty_is_empty() {
        assert!(decode(&[]).unwrap().is_empty());
        assert!(SystemOutput::default().to_bytes().is_empty());
    }
}
