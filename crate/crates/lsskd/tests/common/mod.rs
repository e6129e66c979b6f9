#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lsskd::synth::{write_dataset, SynthSpec};

pub struct Output {
    pub code: u8,
    pub stdout: String,
    pub stderr: String,
}

pub fn run(args: &[&str]) -> Output {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = lsskd::cli::main_with(std::iter::once("lsskd").chain(args.iter().copied()), &mut out, &mut err);
    Output { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

/// A small glyph dataset under `<root>/data/synth10`.
pub fn tiny_dataset(root: &Path, train: usize, test: usize) -> PathBuf {
    let data = root.join("data");
    write_dataset(&SynthSpec { classes: 10, side: 8, train, test, seed: 3 }, &data.join("synth10")).unwrap();
    data
}

/// Writes a config for a two-stage network on the tiny dataset.
pub fn tiny_config(root: &Path, name: &str, epochs: u32, extra: &str) -> PathBuf {
    let data = root.join("data");
    let out = root.join(format!("out-{name}"));
    let text = format!(
        "dataset.name = synth10\ndataset.dir = {}\nmodel.stages = 2\nmodel.channels = 4,8\nmodel.blocks = 1\ntrain.epochs = {epochs}\ntrain.milestones = {}\ntrain.batch = 32\nout.dir = {}\n{extra}",
        data.display(),
        if epochs > 1 { "1" } else { "" },
        out.display()
    );
    let path = root.join(format!("{name}.cfg"));
    std::fs::write(&path, text).unwrap();
    path
}

pub fn out_dir(root: &Path, name: &str) -> PathBuf {
    root.join(format!("out-{name}"))
}
