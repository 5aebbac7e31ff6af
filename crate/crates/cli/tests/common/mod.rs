#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// A config small enough for the whole pipeline to run in seconds.
pub const TINY: &str = "\
[synth]
interp_factor = 2
long_frames = 8
gap_frames = 2
short_frames = 2
stride = 4

[augment]
crop = 16
select_side = 16
samples_per_map = 20
percentile = 30

[model]
deblur_base = 4
enhance_base = 4
res_layers = 1
deblur_blocks = 1
resolution = 16

[train]
deblur_epochs = 2
enhance_epochs = 1
deblur_lr = 1e-3
enhance_lr = 1e-3
";

pub fn d2h(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2h"))
        .args(args)
        .current_dir(cwd)
        .env_remove("D2H_THREADS")
        .output()
        .expect("d2h runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
pub fn ok(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
    stdout(o)
}

/// Writes the tiny config and synthesizes four procedural tuples under `dir/data`.
pub fn tiny_dataset(dir: &Path) {
    std::fs::write(dir.join("run.cfg"), TINY).unwrap();
    ok(&d2h(
        &["--config", "run.cfg", "--out", "data", "synth", "--procedural", "2", "--size", "32", "--length", "10"],
        dir,
    ));
}
