//! Compiles a small C program against the generated header and the static
//! library, then runs it.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "shades.h"

int main(void) {
    uint32_t a[] = {0, 0, 1, 1, 2, 2, 3, 3};
    uint32_t x[] = {0, 1, 0, 1, 0, 1, 0, 1};
    uint8_t l[] = {1, 0, 1, 0, 0, 1, 0, 1};
    ShadesLabels *labels = NULL;
    if (shades_labels_from_triples(4, 2, a, x, l, 8, &labels) != SHADES_STATUS_OK) return 10;
    ShadesModel *model = NULL;
    if (shades_fit_map(labels, 2, 1.0, 2000, 7, &model) != SHADES_STATUS_OK) return 11;
    double s = -1.0;
    if (shades_impute(model, 0, 0, &s) != SHADES_STATUS_OK) return 12;
    if (shades_impute(model, 9, 0, &s) != SHADES_STATUS_INVALID_ARGUMENT &&
        shades_impute(model, 9, 0, &s) != SHADES_STATUS_DATA) return 13;
    const char *msg = shades_last_error_message();
    if (msg == NULL || strlen(msg) == 0) return 14;
    printf("version=%s score=%.3f\n", shades_version(), s);
    shades_model_free(model);
    shades_labels_free(labels);
    return 0;
}
"#;

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe().ok()?.parent()?.parent()?.to_path_buf();
    let lib = profile_dir.join("libshades_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = static_lib() else {
        panic!("static library not found next to the test binary");
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    let exe = dir.path().join("client");
    std::fs::write(&src, PROGRAM).unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let status = Command::new("cc")
        .arg(&src)
        .arg(format!("-I{include}"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "client exited with {:?}", out.status.code());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with(&format!("version={}", env!("CARGO_PKG_VERSION"))), "{stdout}");
}
