//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fail.

use std::path::PathBuf;

use circuitscope_validation::{Context, CRITERIA};

fn main() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let work_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&work_dir);
    let ctx = Context::from_env(work_dir, manifest.join("../core/tests/fixtures/parity"));

    println!("\nacceptance criteria");
    let mut outcomes = Vec::new();
    for criterion in CRITERIA {
        let o = criterion(&ctx);
        println!("{}", o.line());
        outcomes.push(o);
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed\n", outcomes.len());
    if passed != outcomes.len() {
        std::process::exit(1);
    }
}
