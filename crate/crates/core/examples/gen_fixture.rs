//! Regenerates the bundled mock fixture.
//!
//! cargo run -p kdiag --example gen_fixture [-- <dir>]

use std::path::PathBuf;

use kdiag::fixture::{generate, FixtureSpec};

fn main() -> std::io::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures"));
    let fixture = generate(&FixtureSpec::default());
    fixture.write_to(&dir)?;
    println!(
        "wrote fixture to {} ({} labeled queries, truth set {})",
        dir.display(),
        fixture.queries.len(),
        fixture.truth.len()
    );
    Ok(())
}
