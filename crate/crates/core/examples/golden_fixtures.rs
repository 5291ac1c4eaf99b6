//! Regenerates the golden corpus.
//!
//! `cargo run -p dvar-core --example golden_fixtures [-- <dir>]`

use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/golden"));
    dvar_core::testkit::write_golden_corpus(&dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}
