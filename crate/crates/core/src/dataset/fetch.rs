use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::schema::ANNOTATION_FILE;

/// One file of the published archive. Zip files are unpacked into the
/// destination; anything else is stored under its URL file name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchItem {
    pub url: String,
    /// Lowercase hex SHA-256 of the downloaded file.
    #[serde(default)]
    pub sha256: Option<String>,
}

impl FetchItem {
    pub fn new(url: impl Into<String>) -> FetchItem {
        FetchItem { url: url.into(), sha256: None }
    }

    fn file_name(&self) -> String {
        let path = self.url.split(['?', '#']).next().unwrap_or("");
        path.rsplit('/').find(|s| !s.is_empty()).unwrap_or("download").to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChecksumPolicy {
    Skip,
    /// Verify items that carry a checksum.
    #[default]
    IfProvided,
    /// Every item must carry a checksum.
    Require,
}

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("network error fetching {url}: {message}")]
    Network { url: String, message: String },
    #[error("server answered {status} for {url}")]
    Http { url: String, status: u16 },
    #[error("checksum mismatch for {file}: expected {expected}, got {actual}")]
    Checksum { file: String, expected: String, actual: String },
    #[error("no checksum given for {0} but the policy requires one")]
    MissingChecksum(String),
    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad archive {file}: {message}")]
    Archive { file: String, message: String },
    #[error("{ANNOTATION_FILE} not found in {0} after unpacking")]
    Layout(PathBuf),
}

impl FetchError {
    /// Stable process exit code per failure class.
    pub fn code(&self) -> i32 {
        match self {
            FetchError::Network { .. } => 10,
            FetchError::Http { .. } => 11,
            FetchError::Checksum { .. } => 12,
            FetchError::MissingChecksum(_) => 13,
            FetchError::DiskFull(_) => 14,
            FetchError::Io { .. } => 15,
            FetchError::Archive { .. } => 16,
            FetchError::Layout(_) => 17,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FetchError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::StorageFull {
            FetchError::DiskFull(path.to_owned())
        } else {
            FetchError::Io { path: path.to_owned(), source }
        }
    }
}

const STAGING: &str = ".download";
const LOCK: &str = ".fetch.lock";

/// Downloads and unpacks the archive into `dest` and returns it. A
/// destination that already holds an annotation file is returned without
/// touching the network. Concurrent calls on one destination serialize on a
/// lock file.
pub fn fetch_dataset(items: &[FetchItem], dest: &Path, policy: ChecksumPolicy) -> Result<PathBuf, FetchError> {
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    let lock_path = dest.join(LOCK);
    let lock = File::create(&lock_path).map_err(io_err(&lock_path))?;
    lock.lock().map_err(io_err(&lock_path))?;

    if dest.join(ANNOTATION_FILE).is_file() {
        log::info!("{} already present, skipping download", dest.join(ANNOTATION_FILE).display());
        return Ok(dest.to_owned());
    }
    if policy == ChecksumPolicy::Require {
        if let Some(item) = items.iter().find(|i| i.sha256.is_none()) {
            return Err(FetchError::MissingChecksum(item.url.clone()));
        }
    }
    let staging = dest.join(STAGING);
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;
    let agent = ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(15)).timeout_read(Duration::from_secs(120)).build();

    for item in items {
        let name = item.file_name();
        let part = staging.join(format!("{name}.part"));
        download(&agent, &item.url, &part)?;
        if policy != ChecksumPolicy::Skip {
            if let Some(expected) = &item.sha256 {
                let actual = sha256_file(&part)?;
                if !actual.eq_ignore_ascii_case(expected) {
                    let _ = fs::remove_file(&part);
                    return Err(FetchError::Checksum { file: name, expected: expected.clone(), actual });
                }
            }
        }
        if name.to_ascii_lowercase().ends_with(".zip") {
            unpack(&part, dest, &name)?;
            fs::remove_file(&part).map_err(io_err(&part))?;
        } else {
            let target = dest.join(&name);
            fs::rename(&part, &target).map_err(io_err(&target))?;
        }
    }
    let _ = fs::remove_dir_all(&staging);
    hoist_single_directory(dest)?;
    if !dest.join(ANNOTATION_FILE).is_file() {
        return Err(FetchError::Layout(dest.to_owned()));
    }
    Ok(dest.to_owned())
}

/// Streams `url` into `part`, resuming from its current length when the
/// server honours range requests.
fn download(agent: &ureq::Agent, url: &str, part: &Path) -> Result<(), FetchError> {
    let have = fs::metadata(part).map(|m| m.len()).unwrap_or(0);
    let mut req = agent.get(url);
    if have > 0 {
        req = req.set("Range", &format!("bytes={have}-"));
    }
    let resp = match req.call() {
        Ok(r) => r,
        // The part file already holds the whole body.
        Err(ureq::Error::Status(416, _)) if have > 0 => return Ok(()),
        Err(ureq::Error::Status(status, _)) => return Err(FetchError::Http { url: url.to_owned(), status }),
        Err(e) => return Err(FetchError::Network { url: url.to_owned(), message: e.to_string() }),
    };
    let append = resp.status() == 206;
    if have > 0 {
        log::info!("{url}: {} at byte {have}", if append { "resuming" } else { "server ignored range, restarting" });
    }
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(part)
        .map_err(io_err(part))?;
    let mut reader = resp.into_reader();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| FetchError::Network { url: url.to_owned(), message: e.to_string() })?;
        if n == 0 {
            break;
        }
        file.write_all(&buf[..n]).map_err(io_err(part))?;
    }
    file.sync_all().map_err(io_err(part))
}

pub(crate) fn sha256_file(path: &Path) -> Result<String, FetchError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    io::copy(&mut f, &mut hasher).map_err(io_err(path))?;
    Ok(hex::encode(hasher.finalize()))
}

fn unpack(archive: &Path, dest: &Path, name: &str) -> Result<(), FetchError> {
    let bad = |e: zip::result::ZipError| FetchError::Archive { file: name.to_owned(), message: e.to_string() };
    let file = File::open(archive).map_err(io_err(archive))?;
    let mut zip = zip::ZipArchive::new(file).map_err(bad)?;
    zip.extract(dest).map_err(bad)
}

/// Archives often wrap everything in one top-level folder; move its contents
/// up so the annotation file sits directly under `dest`.
fn hoist_single_directory(dest: &Path) -> Result<(), FetchError> {
    if dest.join(ANNOTATION_FILE).is_file() {
        return Ok(());
    }
    let entries: Vec<PathBuf> = fs::read_dir(dest)
        .map_err(io_err(dest))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| !n.to_string_lossy().starts_with('.')))
        .collect();
    if let [only] = entries.as_slice() {
        if only.is_dir() && only.join(ANNOTATION_FILE).is_file() {
            for e in fs::read_dir(only).map_err(io_err(only))? {
                let from = e.map_err(io_err(only))?.path();
                let to = dest.join(from.file_name().unwrap());
                fs::rename(&from, &to).map_err(io_err(&to))?;
            }
            fs::remove_dir(only).map_err(io_err(only))?;
        }
    }
    Ok(())
}
