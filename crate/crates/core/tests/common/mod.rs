#![allow(dead_code)]

use std::path::Path;

use uwf_core::domain::Domain;
use uwf_core::model::{Architecture, ModelScale};
use uwf_core::pipeline::RunConfig;
use uwf_core::synth::{make_synthetic_dataset, SynthConfig};

/// Synthetic dataset under `dir/data` and a compact-scale run config
/// writing to `dir/run`.
pub fn synth_run(dir: &Path, synth: &SynthConfig, domain: Domain, archs: &[Architecture], input_size: usize) -> RunConfig {
    let data = dir.join("data");
    make_synthetic_dataset(&data, synth).unwrap();
    let list: Vec<String> = archs.iter().map(|a| format!("\"{a}\"")).collect();
    let mut cfg = RunConfig::parse(&format!(
        "manifest = {:?}\ntask = 1\ndomain = \"{}\"\noutput_dir = {:?}\narchitectures = [{}]\n",
        data.join("manifest.csv"),
        domain,
        dir.join("run"),
        list.join(", ")
    ))
    .unwrap();
    cfg.model.scale = ModelScale::Compact;
    cfg.model.input_size = Some(input_size);
    cfg.spatial.crop_size = synth.image_size;
    cfg
}
