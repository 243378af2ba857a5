//! Compiles and runs a small C program against the generated header and the
//! shared library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "idea.h"

int main(void) {
    double x[4] = {1.0, 2.0, 3.0, 4.0};
    double y[4] = {4.0, 3.0, 2.0, 1.0};
    double r = 0.0;
    if (idea_pearson(x, y, 4, &r) != IDEA_STATUS_OK) return 1;
    if (r > -0.999999) return 2;
    IdeaModel *m = NULL;
    if (idea_model_load("/nonexistent/checkpoint", &m) != IDEA_STATUS_MISSING_FILE) return 3;
    if (m != NULL || idea_last_error() == NULL) return 4;
    if (strlen(idea_version()) == 0) return 5;
    printf("ok\n");
    return 0;
}
"#;

/// Directory holding `libidea_ffi.so`; tests run from `target/<profile>/deps`.
fn lib_dir() -> Option<PathBuf> {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap().to_path_buf();
    let profile = deps.parent().unwrap().to_path_buf();
    [deps, profile].into_iter().find(|d| d.join("libidea_ffi.so").exists())
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok_and(|o| o.status.success())
}

#[test]
fn header_compiles_and_links() {
    if !have_cc() {
        eprintln!("no C compiler; skipped");
        return;
    }
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("idea.h").exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let syntax = Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(syntax.success());
    let lib_dir = lib_dir().expect("libidea_ffi.so next to the test binary");
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lidea_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
