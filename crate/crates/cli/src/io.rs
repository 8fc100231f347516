//! Artifact writing: versioned CSV tables, flat binary grids, the JSON
//! sidecar and the hash manifest.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use srflab::lattice::ScalarField;

pub const SCHEMA_PREFIX: &str = "# schema: srflab/";

/// Version string recorded in sidecars.
pub fn version_string() -> String {
    format!(
        "srflab {} ({})",
        env!("CARGO_PKG_VERSION"),
        option_env!("SRFLAB_GIT_REV").unwrap_or("unknown")
    )
}

/// Collects the files written by one invocation.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn files(&self) -> &[String] {
        &self.written
    }

    /// CSV with a `# schema: srflab/<kind>/v1` first line and a header row.
    pub fn csv(&mut self, name: &str, kind: &str, header: &[&str]) -> io::Result<CsvTable> {
        let mut file = BufWriter::new(File::create(self.path(name))?);
        writeln!(file, "{SCHEMA_PREFIX}{kind}/v1")?;
        let mut w = csv::WriterBuilder::new().from_writer(file);
        w.write_record(header)?;
        self.written.push(name.to_string());
        Ok(CsvTable {
            w,
            width: header.len(),
        })
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(self.path(name), text + "\n")?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Raw little-endian `f64` values in site order plus a JSON header
    /// `<name>.json`.
    pub fn grid(&mut self, name: &str, field: &ScalarField, quantity: &str) -> io::Result<()> {
        let g = field.geometry();
        let mut w = BufWriter::new(File::create(self.path(name))?);
        for v in field.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        self.written.push(name.to_string());
        let header = GridHeader {
            format: "srflab-grid/v1".into(),
            quantity: quantity.into(),
            n: g.n(),
            tau: [g.tau().re, g.tau().im],
            dtype: "f64-le".into(),
            order: "site j*n + l at (j + l*tau)/n".into(),
        };
        self.json(&format!("{name}.json"), &header)
    }

    /// `MANIFEST`: one `sha256  name` line per file, sorted by name.
    pub fn write_manifest(&mut self) -> io::Result<()> {
        let mut names = self.written.clone();
        names.sort();
        names.dedup();
        let mut out = String::new();
        for n in &names {
            out.push_str(&format!("{}  {n}\n", sha256_file(&self.path(n))?));
        }
        fs::write(self.path("MANIFEST"), out)
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct GridHeader {
    pub format: String,
    pub quantity: String,
    pub n: usize,
    pub tau: [f64; 2],
    pub dtype: String,
    pub order: String,
}

pub struct CsvTable {
    w: csv::Writer<BufWriter<File>>,
    width: usize,
}

impl CsvTable {
    pub fn row<I, S>(&mut self, fields: I) -> io::Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let rec = csv::ByteRecord::from_iter(fields);
        debug_assert_eq!(rec.len(), self.width);
        self.w.write_byte_record(&rec)?;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.w.flush()
    }
}

/// Shortest round-trip representation.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Re-hash every entry of a manifest; returns the names that differ.
pub fn verify_manifest(dir: &Path) -> io::Result<Vec<String>> {
    let text = fs::read_to_string(dir.join("MANIFEST"))?;
    let mut bad = Vec::new();
    for line in text.lines() {
        let (hash, name) = line.split_once("  ").unwrap_or((line, ""));
        if sha256_file(&dir.join(name))? != hash {
            bad.push(name.to_string());
        }
    }
    Ok(bad)
}

pub fn read_grid(path: &Path) -> io::Result<(GridHeader, Vec<f64>)> {
    let header: GridHeader =
        serde_json::from_str(&fs::read_to_string(path.with_file_name(format!(
            "{}.json",
            path.file_name().and_then(|s| s.to_str()).unwrap_or_default()
        )))?)?;
    let bytes = fs::read(path)?;
    if bytes.len() != header.n * header.n * 8 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "grid size does not match header",
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}
