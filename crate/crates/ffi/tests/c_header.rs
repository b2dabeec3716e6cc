//! Compiles a small C program against the generated header and the static
//! library, then runs it.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "kdlaplace.h"

int main(void) {
    KdGeneratorSpec spec;
    if (kd_generator_spec_default(&spec) != KD_STATUS_OK) return 10;
    spec.n = 60;
    KdDataset *ds = NULL;
    if (kd_dataset_generate(&spec, &ds) != KD_STATUS_OK) return 11;
    if (kd_dataset_len(ds) != 60) return 12;
    double f[15];
    size_t label = 99, group = 99;
    if (kd_dataset_example(ds, 0, f, 15, &label, &group) != KD_STATUS_OK) return 13;
    if (label > 2 || group > 5) return 14;
    KdStatus st = kd_dataset_example(ds, 0, f, 3, NULL, NULL);
    if (st != KD_STATUS_BUFFER_TOO_SMALL) return 15;
    if (kd_last_error() == NULL || strstr(kd_last_error(), "buffer") == NULL) return 16;
    double w = 0.0;
    if (kd_entropy_weight(0.5, 4.0, 2.0, 100.0, &w) != KD_STATUS_OK) return 17;
    if (w < 2.718 || w > 2.719) return 18;
    kd_dataset_free(ds);
    printf("ok %s\n", kd_version());
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test-binary> -> target/<profile>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libkdlaplace_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
