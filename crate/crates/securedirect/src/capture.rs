//! Capture files on disk.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use securedirect_core::honeypot::{CaptureError, CaptureLog};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptureFileError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("malformed capture file: {0}")]
    Format(#[from] CaptureError),
}

/// Writes the encoded log and returns the number of bytes written.
pub fn export_log(log: &CaptureLog, mut out: impl Write) -> io::Result<usize> {
    let bytes = log.encode();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(bytes.len())
}

pub fn write_capture(log: &CaptureLog, path: &Path) -> io::Result<usize> {
    export_log(log, io::BufWriter::new(fs::File::create(path)?))
}

pub fn read_capture(path: &Path) -> Result<CaptureLog, CaptureFileError> {
    Ok(CaptureLog::decode(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use securedirect_core::honeypot::{CaptureRecord, Direction};
    use securedirect_core::Timestamp;
    use std::net::Ipv4Addr;

    #[test]
    fn file_round_trip() {
        let mut log = CaptureLog::new();
        for (t, dir) in [(1, Direction::Inbound), (1, Direction::Outbound), (9, Direction::Inbound)] {
            log.push(CaptureRecord {
                timestamp: Timestamp(t),
                src_ip: Ipv4Addr::new(203, 0, 113, 5),
                src_port: 4000,
                direction: dir,
                bytes: vec![t as u8; t as usize],
            })
            .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cap.hplog");
        let n = write_capture(&log, &path).unwrap();
        assert_eq!(n as u64, fs::metadata(&path).unwrap().len());
        assert_eq!(read_capture(&path).unwrap(), log);
        fs::write(&path, b"HPLOG2\n").unwrap();
        assert!(matches!(read_capture(&path), Err(CaptureFileError::Format(_))));
    }
}
