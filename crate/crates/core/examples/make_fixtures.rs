//! Writes a synthetic two-class image dataset, a randomly initialized
//! backbone archive and a matching experiment config, for trying the CLI
//! without exported zoo weights.
//!
//! ```text
//! cargo run -p tlkit --example make_fixtures -- OUT_DIR [vgg16|resnet50]
//! ```

use std::path::PathBuf;

use tlkit::backbone::{Architecture, Backbone, BackboneSpec};
use tlkit::synthetic::write_image_dataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().ok_or("usage: make_fixtures OUT_DIR [vgg16|resnet50]")?);
    let arch: Architecture = args.next().as_deref().unwrap_or("vgg16").parse()?;
    std::fs::create_dir_all(&out)?;
    write_image_dataset(out.join("dataset"), 24, 48, 7)?;
    let spec = BackboneSpec::new(arch).with_input_size(64).with_divisor(16);
    Backbone::random(spec, 11)?.save(out.join("backbone.ftfw"))?;
    let config = "\
dataset = \"dataset\"
backbone = \"backbone.ftfw\"
out = \"run\"
cache_dir = \"cache\"
seed = 1
plot = true

[train]
head_epochs = 10
fine_tune_epochs = 5
batch_size = 8
lr_head = 0.001
lr_fine_tune = 0.0001

[train.head]
units = [32]
activation = \"relu\"

[tuner]
max_resource = 9
eta = 3

[tuner.space]
layers = [1, 2]
units = [16, 64]
unit_step = 8
activations = [\"relu\", \"tanh\"]
dropout = [false, true]
dropout_rate = 0.2
";
    std::fs::write(out.join("experiment.toml"), config)?;
    println!("wrote {}", out.display());
    Ok(())
}
