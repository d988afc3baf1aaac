use std::process::Command;

fn main() {
    let out = Command::new("git").args(["describe", "--tags", "--always", "--dirty"]).output();
    if let Ok(out) = out {
        if out.status.success() {
            let v = String::from_utf8_lossy(&out.stdout).trim().to_string();
            if !v.is_empty() {
                println!("cargo:rustc-env=INVIC_GIT_DESCRIBE={v}");
            }
        }
    }
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/index");
}
