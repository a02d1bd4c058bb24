use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

// Content hash over src/ so run manifests can pin the exact code version.
fn hash_dir(hasher: &mut Sha256, dir: &Path) {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .expect("read src dir")
        .map(|e| e.expect("dir entry").path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            hash_dir(hasher, &path);
        } else if path.extension().map(|e| e == "rs").unwrap_or(false) {
            hasher.update(path.to_string_lossy().as_bytes());
            hasher.update(fs::read(&path).expect("read source file"));
        }
    }
}

fn main() {
    let mut hasher = Sha256::new();
    hash_dir(&mut hasher, Path::new("src"));
    let digest = hasher.finalize();
    let hex: String = digest.iter().take(10).map(|b| format!("{b:02x}")).collect();
    println!("cargo:rustc-env=TEMPATTN_CODE_HASH={hex}");
    println!("cargo:rerun-if-changed=src");
}
