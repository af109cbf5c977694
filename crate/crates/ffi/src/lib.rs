//! C ABI over the xgkit metrics, tokenizer and language identifier.
//!
//! Every fallible function returns an [`XgkStatus`]; on failure the message
//! is available from [`xgk_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings and id
//! buffers returned by the library are owned by the caller and released
//! with [`xgk_string_free`] and [`xgk_ids_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use xgkit::langid::{ascii_fraction, LidModel};
use xgkit::metrics::{pearson, sp_rouge};
use xgkit::textops::trim_trailing_repeats;
use xgkit::tokenizer::SubwordModel;
use xgkit::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XgkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Input = 4,
    Format = 5,
    Io = 6,
    UndefinedCorrelation = 7,
    Corruption = 8,
    Contract = 9,
    Invariant = 10,
    NonFinite = 11,
    Panic = 12,
}

impl From<&Error> for XgkStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => XgkStatus::Config,
            Error::Input(_) => XgkStatus::Input,
            Error::Format(_) => XgkStatus::Format,
            Error::Io { .. } => XgkStatus::Io,
            Error::UndefinedCorrelation(_) => XgkStatus::UndefinedCorrelation,
            Error::Corruption(_) => XgkStatus::Corruption,
            Error::Contract(_) => XgkStatus::Contract,
            Error::Invariant(_) => XgkStatus::Invariant,
            Error::NonFinite(_) => XgkStatus::NonFinite,
        }
    }
}

/// Opaque subword tokenizer.
pub struct XgkTokenizer(SubwordModel);

/// Opaque language identifier.
pub struct XgkLid(LidModel);

/// SP-Rouge F1 scores on a 0-100 scale.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct XgkRouge {
    pub rouge1: f64,
    pub rouge2: f64,
    pub lsum: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(XgkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(XgkStatus::from(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic for [`xgk_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> XgkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            XgkStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside xgkit".into());
            XgkStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(XgkStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(XgkStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(XgkStatus::Input, "result contains a NUL byte".into()))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn xgk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xgk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn xgk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Releases an id buffer returned by [`xgk_tokenizer_encode`]. Null is ignored.
///
/// # Safety
/// `ids` and `len` must be exactly as returned and not freed before.
#[no_mangle]
pub unsafe extern "C" fn xgk_ids_free(ids: *mut u32, len: usize) {
    if !ids.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(ids, len)));
    }
}

/// Loads a tokenizer model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn xgk_tokenizer_load(path: *const c_char, out_tok: *mut *mut XgkTokenizer) -> XgkStatus {
    guard(|| {
        let slot = out(out_tok, "out")?;
        let model = SubwordModel::load(Path::new(text(path, "path")?))?;
        *slot = Box::into_raw(Box::new(XgkTokenizer(model)));
        Ok(())
    })
}

/// # Safety
/// `tok` must come from [`xgk_tokenizer_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn xgk_tokenizer_free(tok: *mut XgkTokenizer) {
    if !tok.is_null() {
        drop(Box::from_raw(tok));
    }
}

/// Encodes UTF-8 text; release the ids with [`xgk_ids_free`].
///
/// # Safety
/// Pointers must be valid; `text_in` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn xgk_tokenizer_encode(
    tok: *const XgkTokenizer,
    text_in: *const c_char,
    out_ids: *mut *mut u32,
    out_len: *mut usize,
) -> XgkStatus {
    guard(|| {
        let tok = handle(tok, "tokenizer")?;
        let (ids_slot, len_slot) = (out(out_ids, "out_ids")?, out(out_len, "out_len")?);
        let ids = tok.0.encode(text(text_in, "text")?).into_boxed_slice();
        *len_slot = ids.len();
        *ids_slot = Box::into_raw(ids).cast();
        Ok(())
    })
}

/// Decodes ids back to text; release it with [`xgk_string_free`].
///
/// # Safety
/// `ids` must point to `len` readable values (or be null when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn xgk_tokenizer_decode(
    tok: *const XgkTokenizer,
    ids: *const u32,
    len: usize,
    out_text: *mut *mut c_char,
) -> XgkStatus {
    guard(|| {
        let tok = handle(tok, "tokenizer")?;
        let slot = out(out_text, "out_text")?;
        let ids: &[u32] = match len {
            0 => &[],
            _ if ids.is_null() => return Err(null("ids")),
            _ => std::slice::from_raw_parts(ids, len),
        };
        *slot = c_string(tok.0.decode(ids)?)?;
        Ok(())
    })
}

/// SP-Rouge of `candidate` against `reference`; sentences split on newlines.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn xgk_sp_rouge(
    tok: *const XgkTokenizer,
    reference: *const c_char,
    candidate: *const c_char,
    out_scores: *mut XgkRouge,
) -> XgkStatus {
    guard(|| {
        let tok = handle(tok, "tokenizer")?;
        let slot = out(out_scores, "out")?;
        let s = sp_rouge(&tok.0, text(reference, "reference")?, text(candidate, "candidate")?);
        *slot = XgkRouge {
            rouge1: 100.0 * s.r1.f1,
            rouge2: 100.0 * s.r2.f1,
            lsum: 100.0 * s.lsum.f1,
        };
        Ok(())
    })
}

/// Removes trailing repeated substrings; release with [`xgk_string_free`].
///
/// # Safety
/// `text_in` must be NUL-terminated and `out_text` writable.
#[no_mangle]
pub unsafe extern "C" fn xgk_trim(text_in: *const c_char, out_text: *mut *mut c_char) -> XgkStatus {
    guard(|| {
        let slot = out(out_text, "out_text")?;
        *slot = c_string(trim_trailing_repeats(text(text_in, "text")?).0)?;
        Ok(())
    })
}

/// Share of characters below U+0080, in [0, 1]; 0 for empty text.
///
/// # Safety
/// `text_in` must be NUL-terminated and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn xgk_ascii_fraction(text_in: *const c_char, out_value: *mut f64) -> XgkStatus {
    guard(|| {
        let slot = out(out_value, "out")?;
        *slot = ascii_fraction(text(text_in, "text")?);
        Ok(())
    })
}

/// Pearson correlation of two equally long arrays.
///
/// # Safety
/// `xs` and `ys` must each point to `len` readable values.
#[no_mangle]
pub unsafe extern "C" fn xgk_pearson(xs: *const f64, ys: *const f64, len: usize, out_value: *mut f64) -> XgkStatus {
    guard(|| {
        let slot = out(out_value, "out")?;
        if xs.is_null() || ys.is_null() {
            return Err(null("input array"));
        }
        *slot = pearson(std::slice::from_raw_parts(xs, len), std::slice::from_raw_parts(ys, len))?;
        Ok(())
    })
}

/// Loads a language identifier model file.
///
/// # Safety
/// `path` must be NUL-terminated and `out_lid` writable.
#[no_mangle]
pub unsafe extern "C" fn xgk_lid_load(path: *const c_char, out_lid: *mut *mut XgkLid) -> XgkStatus {
    guard(|| {
        let slot = out(out_lid, "out")?;
        let model = LidModel::load(Path::new(text(path, "path")?))?;
        *slot = Box::into_raw(Box::new(XgkLid(model)));
        Ok(())
    })
}

/// # Safety
/// `lid` must come from [`xgk_lid_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn xgk_lid_free(lid: *mut XgkLid) {
    if !lid.is_null() {
        drop(Box::from_raw(lid));
    }
}

/// Most probable language of `text_in`; the code is released with
/// [`xgk_string_free`]. `out_confidence` may be null.
///
/// # Safety
/// Pointers must be valid; `text_in` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn xgk_lid_detect(
    lid: *const XgkLid,
    text_in: *const c_char,
    out_language: *mut *mut c_char,
    out_confidence: *mut f64,
) -> XgkStatus {
    guard(|| {
        let lid = handle(lid, "lid")?;
        let slot = out(out_language, "out_language")?;
        let d = lid.0.detect(text(text_in, "text")?);
        if let Some(c) = out_confidence.as_mut() {
            *c = d.confidence;
        }
        *slot = c_string(d.language)?;
        Ok(())
    })
}
