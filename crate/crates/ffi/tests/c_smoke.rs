//! Compiles a small C program against the header and the static library.

use std::path::{Path, PathBuf};
use std::process::Command;

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/c_smoke-* -> target/<profile>/libheishom_ffi.a
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libheishom_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = static_lib() else {
        eprintln!("skipped: libheishom_ffi.a not built for this profile");
        return;
    };
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let compiled = Command::new("cc")
        .arg(dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status();
    match compiled {
        Err(_) => eprintln!("skipped: no C compiler"),
        Ok(s) => {
            assert!(s.success(), "cc failed");
            let out = Command::new(&exe).output().unwrap();
            assert!(
                out.status.success(),
                "smoke exited with {:?}",
                out.status.code()
            );
            assert!(String::from_utf8_lossy(&out.stdout).starts_with("heishom "));
        }
    }
}
