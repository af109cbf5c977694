use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use tempfile::TempDir;
use xgkit::corpus::Document;
use xgkit::langid::train_lid;
use xgkit::tokenizer::{train_with, TrainerConfig};
use xgkit_ffi::*;

const LATIN: &str = "the cat sat on the mat and the dog ran to the park";
const CYRILLIC: &str = "кот сидел на ковре и собака бежала в парк";

struct Fixture {
    _dir: TempDir,
    tokenizer: CString,
    lid: CString,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let corpus = [LATIN, CYRILLIC];
    let tok = train_with(corpus.iter().copied(), TrainerConfig::new(400, 0)).unwrap();
    let tok_path = dir.path().join("t.model");
    tok.save(&tok_path).unwrap();
    let docs = |lang: &str, text: &str| {
        (0..5)
            .map(|_| Document {
                text: text.into(),
                language: lang.into(),
            })
            .collect::<Vec<_>>()
    };
    let lid = train_lid(&[("la".into(), docs("la", LATIN)), ("cy".into(), docs("cy", CYRILLIC))], 1000, 0).unwrap();
    let lid_path = dir.path().join("lid.json");
    lid.save(&lid_path).unwrap();
    Fixture {
        tokenizer: c(&tok_path.display().to_string()),
        lid: c(&lid_path.display().to_string()),
        _dir: dir,
    }
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(xgk_last_error()) }.to_str().unwrap().to_string()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    xgk_string_free(s);
    out
}

#[test]
fn tokenizer_round_trip_and_rouge_identity() {
    let f = fixture();
    unsafe {
        let mut tok = ptr::null_mut();
        assert_eq!(xgk_tokenizer_load(f.tokenizer.as_ptr(), &mut tok), XgkStatus::Ok);
        let text = c("кот and ∂ cat\nsecond line");
        let (mut ids, mut len) = (ptr::null_mut(), 0usize);
        assert_eq!(xgk_tokenizer_encode(tok, text.as_ptr(), &mut ids, &mut len), XgkStatus::Ok);
        assert!(len > 0);
        let mut back = ptr::null_mut();
        assert_eq!(xgk_tokenizer_decode(tok, ids, len, &mut back), XgkStatus::Ok);
        assert_eq!(take(back), text.to_str().unwrap());
        xgk_ids_free(ids, len);

        let mut r = XgkRouge::default();
        assert_eq!(xgk_sp_rouge(tok, text.as_ptr(), text.as_ptr(), &mut r), XgkStatus::Ok);
        assert_eq!(r.lsum, 100.0);
        assert_eq!(r.rouge1, 100.0);
        xgk_tokenizer_free(tok);
    }
}

#[test]
fn lid_detects_script() {
    let f = fixture();
    unsafe {
        let mut lid = ptr::null_mut();
        assert_eq!(xgk_lid_load(f.lid.as_ptr(), &mut lid), XgkStatus::Ok);
        let mut lang = ptr::null_mut();
        let mut conf = 0.0;
        assert_eq!(xgk_lid_detect(lid, c("собака и кот").as_ptr(), &mut lang, &mut conf), XgkStatus::Ok);
        assert_eq!(take(lang), "cy");
        assert!(conf > 0.5);
        assert_eq!(xgk_lid_detect(lid, c("the dog").as_ptr(), &mut lang, ptr::null_mut()), XgkStatus::Ok);
        assert_eq!(take(lang), "la");
        xgk_lid_free(lid);
    }
}

#[test]
fn text_helpers() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(xgk_trim(c("abcxyxyxy").as_ptr(), &mut out), XgkStatus::Ok);
        assert_eq!(take(out), "abcxy");
        let mut v = 0.0;
        assert_eq!(xgk_ascii_fraction(c("ab∂д").as_ptr(), &mut v), XgkStatus::Ok);
        assert_eq!(v, 0.5);
        let (x, y) = ([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]);
        assert_eq!(xgk_pearson(x.as_ptr(), y.as_ptr(), 3, &mut v), XgkStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    unsafe {
        let mut v = 0.0;
        let (x, y) = ([1.0, 1.0, 1.0], [2.0, 4.0, 6.0]);
        assert_eq!(xgk_pearson(x.as_ptr(), y.as_ptr(), 3, &mut v), XgkStatus::UndefinedCorrelation);
        assert!(last_error().starts_with("correlation:"), "{}", last_error());

        assert_eq!(xgk_ascii_fraction(ptr::null(), &mut v), XgkStatus::NullPointer);
        assert_eq!(last_error(), "text is null");

        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(xgk_ascii_fraction(bad.as_ptr().cast(), &mut v), XgkStatus::InvalidUtf8);

        let mut tok = ptr::null_mut();
        assert_eq!(xgk_tokenizer_load(c("/no/such/file").as_ptr(), &mut tok), XgkStatus::Io);
        assert!(tok.is_null());

        assert_eq!(xgk_trim(c("ab").as_ptr(), ptr::null_mut()), XgkStatus::NullPointer);
        let mut out = ptr::null_mut();
        assert_eq!(xgk_trim(c("abab").as_ptr(), &mut out), XgkStatus::Ok);
        assert_eq!(last_error(), "");
        xgk_string_free(out);
        xgk_string_free(ptr::null_mut());
        xgk_ids_free(ptr::null_mut(), 0);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/xgkit.h")).unwrap();
    for f in [
        "xgk_last_error", "xgk_version", "xgk_string_free", "xgk_ids_free", "xgk_tokenizer_load", "xgk_tokenizer_free",
        "xgk_tokenizer_encode", "xgk_tokenizer_decode", "xgk_sp_rouge", "xgk_trim", "xgk_ascii_fraction", "xgk_pearson",
        "xgk_lid_load", "xgk_lid_free", "xgk_lid_detect",
    ] {
        assert!(header.contains(&format!("{f}(")), "header lacks {f}");
    }
    assert!(header.contains("typedef struct XgkTokenizer XgkTokenizer;"));
    assert!(header.contains("XGK_STATUS_UNDEFINED_CORRELATION = 7"));
}

/// The static library next to this test binary, when cargo built one.
fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libxgkit_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_and_runs() {
    let (Some(lib), Ok(cc)) = (static_lib(), which_cc()) else {
        eprintln!("skipping: no static library or C compiler");
        return;
    };
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "xgkit.h"

int main(int argc, char **argv) {
    XgkTokenizer *tok = NULL;
    if (xgk_tokenizer_load(argv[1], &tok) != XGK_STATUS_OK) { fprintf(stderr, "%s\n", xgk_last_error()); return 2; }
    XgkRouge r;
    if (xgk_sp_rouge(tok, "the cat sat", "the cat sat", &r) != XGK_STATUS_OK) return 3;
    char *trimmed = NULL;
    if (xgk_trim("abab", &trimmed) != XGK_STATUS_OK) return 4;
    double p = 0.0;
    double xs[] = {1, 1}, ys[] = {1, 2};
    XgkStatus s = xgk_pearson(xs, ys, 2, &p);
    printf("%.1f %s %d %s\n", r.lsum, trimmed, (int)s, strncmp(xgk_last_error(), "correlation:", 12) == 0 ? "msg" : "nomsg");
    xgk_string_free(trimmed);
    xgk_tokenizer_free(tok);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C program compiles");
    let out = Command::new(&bin).arg(f.tokenizer.to_str().unwrap()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "100.0 ab 7 msg\n");
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc);
        }
    }
    Err(())
}
