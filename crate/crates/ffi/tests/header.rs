//! Checks the generated C header with the system C compiler and runs a
//! small C program against the shared library. Skipped when no `cc` is on
//! the PATH.

use std::path::{Path, PathBuf};
use std::process::Command;

fn crate_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok_and(|o| o.status.success())
}

/// Directory holding `libdic_ffi.so` for the profile this test was built in.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let found = [deps, deps.parent().unwrap()]
        .into_iter()
        .find(|d| d.join("libdic_ffi.so").exists() || d.join("libdic_ffi.dylib").exists())
        .map(Path::to_path_buf);
    found.expect("shared library next to the test binary")
}

#[test]
fn header_compiles_as_c_and_cxx() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let header = crate_dir().join("include/dic_ffi.h");
    for lang in ["c", "c++"] {
        let out =
            Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang]).arg(&header).output().unwrap();
        assert!(out.status.success(), "{lang}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
#[cfg(unix)]
fn c_program_links_and_runs() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let lib = lib_dir();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg("-L")
        .arg(&lib)
        .arg("-ldic_ffi")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = Command::new(&bin).env("LD_LIBRARY_PATH", &lib).env("DYLD_LIBRARY_PATH", &lib).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "exit {:?}: {}", run.status, String::from_utf8_lossy(&run.stderr));
    assert!(stdout.starts_with("ok "), "{stdout}");
}
