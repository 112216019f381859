//! Model checkpoints: a text header describing the architecture followed by
//! one named TNSR record per parameter tensor, in layer order.
//!
//! ```text
//! CAE-CHECKPOINT 1
//! config = karman-2d
//! input_shape = 1x64x48
//! filters = 64
//! hidden_units = 256
//! latent_units = 128
//! droplet_widths = 32,64
//! output_range = 0.0 1.0
//! layer 0 = conv 1->64 k3x3 s2x2 p1x1
//! ...
//! records = 22
//! end
//! layer0.weight
//! <TNSR record>
//! ...
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::{next_line, write_atomic};
use crate::nn::model::{ArchSpec, AutoencoderModel};
use crate::tensor::{Scalar, Shape};
use crate::tnsr;

const MAGIC_LINE: &str = "CAE-CHECKPOINT 1";

pub fn encode_checkpoint<T: Scalar>(model: &AutoencoderModel<T>) -> Vec<u8> {
    let spec = model.spec();
    let mut head = String::new();
    head.push_str(MAGIC_LINE);
    head.push('\n');
    head.push_str(&format!("config = {}\n", spec.config));
    head.push_str(&format!("input_shape = {}\n", spec.input_shape));
    head.push_str(&format!("filters = {}\n", spec.filters));
    head.push_str(&format!("hidden_units = {}\n", spec.hidden_units));
    head.push_str(&format!("latent_units = {}\n", spec.latent_units));
    head.push_str(&format!(
        "droplet_widths = {},{}\n",
        spec.droplet_widths[0], spec.droplet_widths[1]
    ));
    head.push_str(&format!(
        "output_range = {:?} {:?}\n",
        spec.output_range.0, spec.output_range.1
    ));
    for (i, l) in model.network().layers.iter().enumerate() {
        head.push_str(&format!("layer {i} = {}\n", l.describe()));
    }
    let names = model.network().param_names();
    head.push_str(&format!("records = {}\nend\n", names.len()));

    let mut out = head.into_bytes();
    for (name, p) in names.iter().zip(model.network().params()) {
        out.extend_from_slice(name.as_bytes());
        out.push(b'\n');
        tnsr::write_tensor(&mut out, p).expect("writing to a Vec cannot fail");
    }
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<AutoencoderModel<T>> {
    let mut pos = 0;
    let mut line = || next_line(bytes, &mut pos).ok_or_else(|| Error::format("truncated checkpoint header"));
    if line()? != MAGIC_LINE {
        return Err(Error::format("not a checkpoint file"));
    }
    let mut fields: HashMap<String, String> = HashMap::new();
    let mut layers: Vec<String> = Vec::new();
    loop {
        let l = line()?;
        if l == "end" {
            break;
        }
        let (k, v) = l
            .split_once(" = ")
            .ok_or_else(|| Error::format(format!("bad header line `{l}`")))?;
        if let Some(idx) = k.strip_prefix("layer ") {
            if idx.parse::<usize>().ok() != Some(layers.len()) {
                return Err(Error::format(format!("layer lines out of order at `{l}`")));
            }
            layers.push(v.to_string());
        } else {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("checkpoint missing `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(format!("bad `{k}` in checkpoint")))
    };
    let widths: Vec<usize> = get("droplet_widths")?
        .split(',')
        .map(|w| w.parse().map_err(|_| Error::format("bad droplet_widths")))
        .collect::<Result<_>>()?;
    let range: Vec<f64> = get("output_range")?
        .split_whitespace()
        .map(|w| w.parse().map_err(|_| Error::format("bad output_range")))
        .collect::<Result<_>>()?;
    if widths.len() != 2 || range.len() != 2 {
        return Err(Error::format("bad droplet_widths/output_range"));
    }
    let spec = ArchSpec {
        config: get("config")?.parse()?,
        input_shape: Shape::parse(get("input_shape")?)?,
        filters: num("filters")?,
        hidden_units: num("hidden_units")?,
        latent_units: num("latent_units")?,
        droplet_widths: [widths[0], widths[1]],
        output_range: (range[0], range[1]),
    };
    let mut model = AutoencoderModel::<T>::zeroed(spec)?;
    let expected: Vec<String> = model.network().layers.iter().map(|l| l.describe()).collect();
    if expected != layers {
        return Err(Error::format("layer list does not match the declared configuration"));
    }
    let names = model.network().param_names();
    if num("records")? != names.len() {
        return Err(Error::format("record count does not match the configuration"));
    }
    let mut values = Vec::with_capacity(names.len());
    for name in &names {
        let got = next_line(bytes, &mut pos).ok_or_else(|| Error::format("truncated checkpoint"))?;
        if got != name {
            return Err(Error::format(format!("expected record `{name}`, found `{got}`")));
        }
        let mut rest = &bytes[pos..];
        let before = rest.len();
        let rec = tnsr::read_record(&mut rest)?;
        pos += before - rest.len();
        values.push(rec.into_tensor::<T>());
    }
    if pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint records"));
    }
    model.set_params(values)?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &AutoencoderModel<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<AutoencoderModel<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}
