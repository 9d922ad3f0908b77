//! Image ingestion for `file://`, plain-path and `http(s)://` URIs.

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;

use image::{ImageFormat, ImageReader, RgbImage};
use thiserror::Error;

use crate::datamodel::Digest128;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("fetch {uri}: {message}")]
    Fetch { uri: String, message: String },
    #[error("fetch {uri}: HTTP {status}")]
    Http { uri: String, status: u16 },
    #[error("decode {uri}: {message}")]
    Decode { uri: String, message: String },
}

impl FetchError {
    /// Short failure reason recorded on the image record.
    pub fn reason(&self) -> String {
        match self {
            FetchError::Fetch { message, .. } => format!("fetch: {message}"),
            FetchError::Http { status, .. } => format!("fetch: HTTP {status}"),
            FetchError::Decode { message, .. } => format!("decode: {message}"),
        }
    }
}

/// Raw image bytes plus their content digest.
#[derive(Debug, Clone)]
pub struct FetchedImage {
    pub uri: String,
    pub bytes: Vec<u8>,
    pub digest: Digest128,
}

impl FetchedImage {
    pub fn mime(&self) -> &'static str {
        match image::guess_format(&self.bytes) {
            Ok(ImageFormat::Jpeg) => "image/jpeg",
            Ok(ImageFormat::Png) => "image/png",
            _ => "application/octet-stream",
        }
    }

    fn reader(&self) -> Result<ImageReader<Cursor<&[u8]>>, FetchError> {
        ImageReader::new(Cursor::new(self.bytes.as_slice()))
            .with_guessed_format()
            .map_err(|e| FetchError::Decode { uri: self.uri.clone(), message: e.to_string() })
    }

    /// Header-only size probe.
    pub fn dimensions(&self) -> Result<(u32, u32), FetchError> {
        self.reader()?
            .into_dimensions()
            .map_err(|e| FetchError::Decode { uri: self.uri.clone(), message: e.to_string() })
    }

    pub fn decode(&self) -> Result<RgbImage, FetchError> {
        let img = self
            .reader()?
            .decode()
            .map_err(|e| FetchError::Decode { uri: self.uri.clone(), message: e.to_string() })?;
        Ok(img.to_rgb8())
    }
}

/// Resolves URIs and caches remote downloads by URI under `cache_dir`.
#[derive(Debug, Clone)]
pub struct Fetcher {
    base_dir: PathBuf,
    cache_dir: Option<PathBuf>,
    agent: ureq::Agent,
}

impl Fetcher {
    /// Relative plain paths resolve against `base_dir`.
    pub fn new(base_dir: impl Into<PathBuf>, cache_dir: Option<PathBuf>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Fetcher { base_dir: base_dir.into(), cache_dir, agent }
    }

    fn local_path(&self, uri: &str) -> PathBuf {
        let raw = uri.strip_prefix("file://").unwrap_or(uri);
        let p = Path::new(raw);
        if p.is_relative() {
            self.base_dir.join(p)
        } else {
            p.to_path_buf()
        }
    }

    fn cache_path(&self, uri: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join("images").join(format!("{}.bin", Digest128::of_bytes(uri.as_bytes()))))
    }

    pub fn fetch(&self, uri: &str) -> Result<FetchedImage, FetchError> {
        let bytes = if uri.starts_with("http://") || uri.starts_with("https://") {
            self.fetch_remote(uri)?
        } else {
            std::fs::read(self.local_path(uri))
                .map_err(|e| FetchError::Fetch { uri: uri.into(), message: e.to_string() })?
        };
        Ok(FetchedImage { uri: uri.to_string(), digest: Digest128::of_bytes(&bytes), bytes })
    }

    fn fetch_remote(&self, uri: &str) -> Result<Vec<u8>, FetchError> {
        let cached = self.cache_path(uri);
        if let Some(bytes) = cached.as_ref().and_then(|p| std::fs::read(p).ok()) {
            return Ok(bytes);
        }
        let fail = |message: String| FetchError::Fetch { uri: uri.into(), message };
        let mut resp = self.agent.get(uri).call().map_err(|e| fail(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(FetchError::Http { uri: uri.into(), status });
        }
        let bytes =
            resp.body_mut().with_config().limit(256 * 1024 * 1024).read_to_vec().map_err(|e| fail(e.to_string()))?;
        if let Some(path) = cached {
            let write = || -> std::io::Result<()> {
                std::fs::create_dir_all(path.parent().expect("cache path has parent"))?;
                let tmp = path.with_extension(format!("tmp{}", std::process::id()));
                std::fs::write(&tmp, &bytes)?;
                std::fs::rename(&tmp, &path)
            };
            if let Err(e) = write() {
                tracing::warn!(uri, error = %e, "could not cache image");
            }
        }
        Ok(bytes)
    }
}
