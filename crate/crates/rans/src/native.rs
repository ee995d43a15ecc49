//! Foreign-function boundary to an optional native rANS implementation.
//!
//! A native coder is a shared library located through the `LUMEN_NATIVE_CODER`
//! environment variable. It must export the following C functions and produce
//! streams byte-identical to [`crate::encode`]:
//!
//! ```c
//! int32_t lumen_coder_new(const uint32_t *cdfs, size_t cdfs_len,
//!                         const int32_t *offsets, const uint32_t *lengths,
//!                         size_t n_tables, uint32_t precision, void **handle);
//! void    lumen_coder_free(void *handle);
//! int32_t lumen_encode(const void *handle, const int32_t *symbols,
//!                      const uint32_t *table_ids, size_t n,
//!                      uint8_t *out, size_t out_cap, size_t *out_len);
//! int32_t lumen_decode(const void *handle, const uint8_t *stream, size_t stream_len,
//!                      const uint32_t *table_ids, size_t n, int32_t *out);
//! ```
//!
//! Tables are passed in the [`FlatTables`] layout. Every function returns one of
//! the `STATUS_*` codes; `lumen_encode` reports the required size through
//! `out_len` when it returns [`STATUS_BUFFER_TOO_SMALL`].

use std::ffi::c_void;
use std::path::Path;

use libloading::Library;

use crate::cdf::{CdfTableSet, FlatTables};
use crate::{CoderError, Result};

pub const ENV_VAR: &str = "LUMEN_NATIVE_CODER";

pub const STATUS_OK: i32 = 0;
pub const STATUS_INVALID_TABLE: i32 = -1;
pub const STATUS_TABLE_ID: i32 = -2;
pub const STATUS_TRUNCATED: i32 = -3;
pub const STATUS_CORRUPT: i32 = -4;
pub const STATUS_BUFFER_TOO_SMALL: i32 = -5;
pub const STATUS_NULL_POINTER: i32 = -6;

type NewFn = unsafe extern "C" fn(
    *const u32,
    usize,
    *const i32,
    *const u32,
    usize,
    u32,
    *mut *mut c_void,
) -> i32;
type FreeFn = unsafe extern "C" fn(*mut c_void);
type EncodeFn =
    unsafe extern "C" fn(*const c_void, *const i32, *const u32, usize, *mut u8, usize, *mut usize) -> i32;
type DecodeFn =
    unsafe extern "C" fn(*const c_void, *const u8, usize, *const u32, usize, *mut i32) -> i32;

/// Maps a status code returned across the boundary to a coder error.
pub fn status_to_result(code: i32) -> Result<()> {
    match code {
        STATUS_OK => Ok(()),
        STATUS_INVALID_TABLE => Err(CoderError::InvalidTable("rejected by native coder".into())),
        STATUS_TABLE_ID => Err(CoderError::Native("table id out of range".into())),
        STATUS_TRUNCATED => Err(CoderError::Truncated),
        STATUS_CORRUPT => Err(CoderError::Corrupt("native decoder reported corruption")),
        STATUS_BUFFER_TOO_SMALL => Err(CoderError::Native("output buffer too small".into())),
        STATUS_NULL_POINTER => Err(CoderError::Native("null pointer".into())),
        other => Err(CoderError::Native(format!("unknown status {other}"))),
    }
}

/// A loaded native library holding one immutable table handle.
pub struct NativeCoder {
    handle: *mut c_void,
    free: FreeFn,
    encode: EncodeFn,
    decode: DecodeFn,
    // Keeps the function pointers above valid.
    _lib: Library,
}

// The handle is immutable after construction and the library contract makes
// coding calls on one handle thread-safe.
unsafe impl Send for NativeCoder {}
unsafe impl Sync for NativeCoder {}

impl NativeCoder {
    /// Loads the library named by `LUMEN_NATIVE_CODER`, if the variable is set.
    pub fn from_env(tables: &CdfTableSet) -> Result<Option<Self>> {
        match std::env::var_os(ENV_VAR) {
            Some(path) if !path.is_empty() => Self::load(Path::new(&path), tables).map(Some),
            _ => Ok(None),
        }
    }

    pub fn load(path: &Path, tables: &CdfTableSet) -> Result<Self> {
        let flat: FlatTables = tables.flatten();
        // SAFETY: loading runs the library's initializers; the library is
        // expected to implement the contract documented above.
        unsafe {
            let lib = Library::new(path)
                .map_err(|e| CoderError::Native(format!("{}: {e}", path.display())))?;
            let sym = |name: &[u8]| CoderError::Native(format!("missing symbol {}", String::from_utf8_lossy(name)));
            let new: NewFn = *lib.get::<NewFn>(b"lumen_coder_new").map_err(|_| sym(b"lumen_coder_new"))?;
            let free: FreeFn = *lib.get::<FreeFn>(b"lumen_coder_free").map_err(|_| sym(b"lumen_coder_free"))?;
            let encode: EncodeFn = *lib.get::<EncodeFn>(b"lumen_encode").map_err(|_| sym(b"lumen_encode"))?;
            let decode: DecodeFn = *lib.get::<DecodeFn>(b"lumen_decode").map_err(|_| sym(b"lumen_decode"))?;
            let mut handle = std::ptr::null_mut();
            status_to_result(new(
                flat.cdfs.as_ptr(),
                flat.cdfs.len(),
                flat.offsets.as_ptr(),
                flat.lengths.as_ptr(),
                flat.lengths.len(),
                flat.precision,
                &mut handle,
            ))?;
            if handle.is_null() {
                return Err(CoderError::Native("null handle".into()));
            }
            Ok(Self {
                handle,
                free,
                encode,
                decode,
                _lib: lib,
            })
        }
    }

    pub fn encode(&self, symbols: &[i32], table_ids: &[u32]) -> Result<Vec<u8>> {
        if symbols.len() != table_ids.len() {
            return Err(CoderError::LengthMismatch {
                symbols: symbols.len(),
                ids: table_ids.len(),
            });
        }
        let mut out = vec![0u8; symbols.len() / 2 + 64];
        loop {
            let mut len = 0usize;
            // SAFETY: all buffers are valid for the lengths passed.
            let code = unsafe {
                (self.encode)(
                    self.handle,
                    symbols.as_ptr(),
                    table_ids.as_ptr(),
                    symbols.len(),
                    out.as_mut_ptr(),
                    out.len(),
                    &mut len,
                )
            };
            if code == STATUS_BUFFER_TOO_SMALL && len > out.len() {
                out.resize(len, 0);
                continue;
            }
            status_to_result(code)?;
            out.truncate(len);
            return Ok(out);
        }
    }

    pub fn decode(&self, stream: &[u8], table_ids: &[u32], n: usize) -> Result<Vec<i32>> {
        if table_ids.len() != n {
            return Err(CoderError::LengthMismatch { symbols: n, ids: table_ids.len() });
        }
        let mut out = vec![0i32; n];
        // SAFETY: all buffers are valid for the lengths passed.
        let code = unsafe {
            (self.decode)(
                self.handle,
                stream.as_ptr(),
                stream.len(),
                table_ids.as_ptr(),
                n,
                out.as_mut_ptr(),
            )
        };
        status_to_result(code)?;
        Ok(out)
    }
}

impl Drop for NativeCoder {
    fn drop(&mut self) {
        // SAFETY: the handle came from lumen_coder_new and is freed once.
        unsafe { (self.free)(self.handle) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_codes_map_to_errors() {
        assert!(status_to_result(STATUS_OK).is_ok());
        assert!(matches!(status_to_result(STATUS_TRUNCATED), Err(CoderError::Truncated)));
        assert!(matches!(status_to_result(STATUS_CORRUPT), Err(CoderError::Corrupt(_))));
        assert!(matches!(status_to_result(STATUS_INVALID_TABLE), Err(CoderError::InvalidTable(_))));
        assert!(matches!(status_to_result(-99), Err(CoderError::Native(_))));
    }

    #[test]
    fn missing_library_is_reported() {
        let tables = CdfTableSet::from_pmfs(&[vec![0.5, 0.5]], vec![0], 16).unwrap();
        let err = NativeCoder::load(Path::new("/nonexistent/liblumen_native.so"), &tables);
        assert!(matches!(err, Err(CoderError::Native(_))));
    }
}
