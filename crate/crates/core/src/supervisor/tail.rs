//! Last-lines reader that seeks from the end of the file.

use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHUNK: usize = 8 * 1024;

/// Counters from one [`tail_from`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TailStats {
    pub bytes_read: u64,
    /// Largest buffer held at any point.
    pub peak_buffer: usize,
}

/// Last `n` lines of the file at `path`. A final line without a trailing
/// newline counts as a line, as with `tail -n`.
pub fn tail(path: &Path, n: usize) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    tail_from(&mut f, n, &mut TailStats::default()).map_err(|e| Error::io(path, e))
}

/// Like [`tail`], over any seekable reader, reading backwards in
/// [`CHUNK`]-sized blocks. Reads at most `CHUNK` bytes more than the output.
pub fn tail_from<R: Read + Seek>(r: &mut R, n: usize, stats: &mut TailStats) -> io::Result<String> {
    let len = r.seek(SeekFrom::End(0))?;
    if n == 0 || len == 0 {
        return Ok(String::new());
    }
    // Blocks collected back to front; joined once at the end.
    let mut blocks: Vec<Vec<u8>> = Vec::new();
    let mut held = 0usize;
    let mut pos = len;
    let mut chunk = vec![0u8; CHUNK];
    // Newlines to find before the start of the wanted region. A trailing
    // newline at EOF terminates the last line and does not start a new one.
    let mut skip_last = true;
    let mut seen = 0usize;
    let start = loop {
        if pos == 0 {
            break 0;
        }
        let take = CHUNK.min(pos as usize);
        pos -= take as u64;
        r.seek(SeekFrom::Start(pos))?;
        r.read_exact(&mut chunk[..take])?;
        stats.bytes_read += take as u64;
        let mut found = None;
        for i in (0..take).rev() {
            if chunk[i] != b'\n' {
                continue;
            }
            if skip_last && pos + i as u64 == len - 1 {
                skip_last = false;
                continue;
            }
            seen += 1;
            if seen == n {
                found = Some(i + 1);
                break;
            }
        }
        skip_last = false;
        let off = found.unwrap_or(0);
        blocks.push(chunk[off..take].to_vec());
        held += take - off;
        stats.peak_buffer = stats.peak_buffer.max(held + CHUNK);
        if found.is_some() {
            break pos + off as u64;
        }
    };
    let buf: Vec<u8> = blocks.into_iter().rev().flatten().collect();
    debug_assert_eq!(len - start, buf.len() as u64);
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn oracle(text: &str, n: usize) -> String {
        let lines: Vec<&str> = text.split_inclusive('\n').collect();
        lines[lines.len().saturating_sub(n)..].concat()
    }

    #[test]
    fn small_cases() {
        for text in ["", "a", "a\n", "a\nb", "a\nb\n", "\n\n\n", "x\n\ny\n"] {
            for n in 0..5 {
                let got = tail_from(&mut Cursor::new(text), n, &mut TailStats::default()).unwrap();
                assert_eq!(got, if n == 0 { String::new() } else { oracle(text, n) }, "{text:?} {n}");
            }
        }
    }

    #[test]
    fn long_file_reads_little() {
        let text: String = (0..10_000).map(|i| format!("line {i}\n")).collect();
        let mut stats = TailStats::default();
        let got = tail_from(&mut Cursor::new(&text), 5, &mut stats).unwrap();
        assert_eq!(got, "line 9995\nline 9996\nline 9997\nline 9998\nline 9999\n");
        assert!(stats.bytes_read <= CHUNK as u64);
    }
}
