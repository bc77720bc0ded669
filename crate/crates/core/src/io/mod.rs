//! File formats: binary descriptor banks and tensors, JSON manifests,
//! configs, model state and reports, all written atomically.

pub mod bank;
pub mod config;
pub mod manifest;
pub mod model;
pub mod report;
pub mod scene;
pub mod tensor;

pub use bank::{decode_bank, encode_bank, read_bank, write_bank};
pub use config::RunConfig;
pub use manifest::Manifest;
pub use model::{ModelKind, ModelState};
pub use report::{Report, REPORT_SCHEMA_VERSION};
pub use scene::{load_bank_dir, load_scene, save_scene, stage_scene};
pub use tensor::{decode_tensor, encode_tensor, read_tensor, write_tensor, Tensor};

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Output files staged under temporary names and renamed into place
/// together by [`Staged::commit`]. Dropping without committing removes the
/// temporaries.
#[derive(Debug, Default)]
pub struct Staged {
    pending: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let name = path
            .file_name()
            .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?
            .to_string_lossy()
            .into_owned();
        let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        self.pending.push((tmp, path));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, path: impl AsRef<Path>, value: &T) -> Result<()> {
        let mut text = to_json_pretty(value)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    pub fn commit(mut self) -> Result<()> {
        for (tmp, dst) in std::mem::take(&mut self.pending) {
            fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))?;
        }
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        for (tmp, _) in &self.pending {
            let _ = fs::remove_file(tmp);
        }
    }
}

/// Writes one file atomically.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let mut s = Staged::new();
    s.write(path, bytes)?;
    s.commit()
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        file: "<output>".into(),
        path: String::new(),
        message: e.to_string(),
    })
}

/// Parses JSON text, reporting the path of the offending field on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, file: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
        file: file.to_string(),
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    Ok(value)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, &path.display().to_string())
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staged_files_appear_only_on_commit() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        {
            let mut s = Staged::new();
            s.write(&a, b"x").unwrap();
            assert!(!a.exists());
        }
        assert!(!a.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        let mut s = Staged::new();
        s.write(&a, b"y").unwrap();
        s.commit().unwrap();
        assert_eq!(fs::read(&a).unwrap(), b"y");
    }

    #[test]
    fn json_errors_carry_the_field_path() {
        #[derive(serde::Deserialize, Debug)]
        #[allow(dead_code)]
        struct Inner {
            x: u32,
        }
        #[derive(serde::Deserialize, Debug)]
        #[allow(dead_code)]
        struct Outer {
            inner: Vec<Inner>,
        }
        let err = parse_json::<Outer>(r#"{"inner": [{"x": 1}, {"x": "no"}]}"#, "t.json").unwrap_err();
        match err {
            Error::Json { path, .. } => assert_eq!(path, "inner[1].x"),
            e => panic!("{e}"),
        }
    }
}
