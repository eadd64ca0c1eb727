//! Headered CSV artifacts.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn to_csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    std::fs::write(path, to_csv_bytes(rows, header)).map_err(|e| Error::io(path, e))
}

pub fn from_csv_bytes<T: DeserializeOwned>(bytes: &[u8], header: &[&str]) -> std::result::Result<Vec<T>, String> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let found = r.headers().map_err(|e| e.to_string())?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(format!("expected header {:?}, found {:?}", header.join(","), found.iter().collect::<Vec<_>>().join(",")));
    }
    r.deserialize().map(|row| row.map_err(|e| e.to_string())).collect()
}

pub fn read_csv<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
    from_csv_bytes(&bytes, header).map_err(|e| Error::corrupt(path, e))
}
