//! Regenerates `include/blowuplab.h` from the exported items.

use std::path::PathBuf;

fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").expect("set by cargo"));
    let config = cbindgen::Config::from_file(dir.join("cbindgen.toml")).expect("valid cbindgen.toml");
    match cbindgen::Builder::new().with_crate(&dir).with_config(config).generate() {
        Ok(bindings) => {
            bindings.write_to_file(dir.join("include").join("blowuplab.h"));
        }
        // keep building with the committed header, e.g. when a dependency
        // cannot be parsed by the installed cbindgen
        Err(e) => println!("cargo:warning=header not regenerated: {e}"),
    }
}
