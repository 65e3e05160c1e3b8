//! Versioned model files.
//!
//! A text descriptor terminated by an `end` line, then every parameter
//! tensor as little-endian `f64`, member by member and layer by layer,
//! weights before bias:
//!
//! ```text
//! FUSENET-MODEL 1
//! scheme type1:PET,CT,T2
//! patch 28
//! config conv1_filters=16 conv2_filters=32 dense_width=128 learning_rate=0.01 momentum=0.9 batch_size=64 epochs=20 seed=0
//! member type1
//! layer 0 conv 2,2,3,16 16
//! ...
//! end
//! ```

use std::path::Path;

use fusenet_core::engine::{LayerParams, ParamStore, Tensor};
use fusenet_core::eval::patch_side;
use fusenet_core::fusion::{BaseConfig, FusionScheme, TrainedNetwork};

use crate::error::{read, write, Error, Result};

pub const MAGIC: &str = "FUSENET-MODEL";
pub const VERSION: u32 = 1;

pub fn scheme_spec(scheme: &FusionScheme) -> String {
    format!("{}:{}", scheme.kind().name(), scheme.modalities().join(","))
}

fn config_line(c: &BaseConfig) -> String {
    format!(
        "config conv1_filters={} conv2_filters={} dense_width={} learning_rate={} momentum={} batch_size={} epochs={} seed={}",
        c.conv1_filters, c.conv2_filters, c.dense_width, c.learning_rate, c.momentum, c.batch_size, c.epochs, c.seed
    )
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn descriptor(net: &TrainedNetwork) -> String {
    let mut d = format!(
        "{MAGIC} {VERSION}\nscheme {}\npatch {}\n{}\n",
        scheme_spec(&net.scheme),
        patch_side(net),
        config_line(&net.config)
    );
    for m in &net.members {
        d.push_str(&format!("member {}\n", m.name));
        let kinds = m.arch.param_layers();
        for (p, (_, spec)) in m.params.layers().iter().zip(kinds) {
            d.push_str(&format!(
                "layer {} {} {} {}\n",
                p.layer,
                spec.kind(),
                dims(p.weights.shape()),
                p.bias.len()
            ));
        }
    }
    d.push_str("end\n");
    d
}

pub fn encode(net: &TrainedNetwork) -> Vec<u8> {
    let mut out = descriptor(net).into_bytes();
    for m in &net.members {
        for p in m.params.layers() {
            for v in p.weights.data().iter().chain(p.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn save_model(path: &Path, net: &TrainedNetwork) -> Result<()> {
    write(path, &encode(net))
}

struct Lines<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Next descriptor line and its starting offset.
    fn next(&mut self) -> std::result::Result<(usize, &'a str), (usize, String)> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let len = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or((start, "descriptor ended without `end`".to_string()))?;
        self.pos = start + len + 1;
        let line = std::str::from_utf8(&rest[..len]).map_err(|_| (start, "descriptor is not UTF-8".to_string()))?;
        Ok((start, line))
    }
}

fn expect<'a>(line: (usize, &'a str), keyword: &str) -> std::result::Result<&'a str, (usize, String)> {
    line.1
        .strip_prefix(keyword)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or((line.0, format!("expected `{keyword} ...`, found `{}`", line.1)))
}

fn parse_config(at: usize, text: &str) -> std::result::Result<BaseConfig, (usize, String)> {
    let mut c = BaseConfig::default();
    let bad = |msg: String| (at, msg);
    let mut seen = 0;
    for kv in text.split(' ') {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("malformed config entry `{kv}`")))?;
        let parse_err = |_| bad(format!("bad value for {k}: `{v}`"));
        match k {
            "conv1_filters" => c.conv1_filters = v.parse().map_err(parse_err)?,
            "conv2_filters" => c.conv2_filters = v.parse().map_err(parse_err)?,
            "dense_width" => c.dense_width = v.parse().map_err(parse_err)?,
            "learning_rate" => c.learning_rate = v.parse().map_err(|_| bad(format!("bad value for {k}: `{v}`")))?,
            "momentum" => c.momentum = v.parse().map_err(|_| bad(format!("bad value for {k}: `{v}`")))?,
            "batch_size" => c.batch_size = v.parse().map_err(parse_err)?,
            "epochs" => c.epochs = v.parse().map_err(parse_err)?,
            "seed" => c.seed = v.parse().map_err(|_| bad(format!("bad value for {k}: `{v}`")))?,
            _ => return Err(bad(format!("unknown config entry `{k}`"))),
        }
        seen += 1;
    }
    if seen != 8 {
        return Err(bad(format!("config lists {seen} entries, expected 8")));
    }
    Ok(c)
}

/// Rebuilds the network named by the descriptor and fills in the stored
/// parameters, checking every shape against the rebuilt architecture.
pub fn decode(bytes: &[u8]) -> std::result::Result<TrainedNetwork, (usize, String)> {
    let mut lines = Lines { bytes, pos: 0 };
    let head = lines.next()?;
    let version = expect(head, MAGIC).map_err(|_| (0, format!("missing {MAGIC} magic")))?;
    if version != VERSION.to_string() {
        return Err((MAGIC.len() + 1, format!("unsupported model version `{version}`, expected {VERSION}")));
    }
    let line = lines.next()?;
    let scheme: FusionScheme = expect(line, "scheme")?
        .parse()
        .map_err(|e: fusenet_core::Error| (line.0, e.to_string()))?;
    let line = lines.next()?;
    let patch: usize = expect(line, "patch")?
        .parse()
        .map_err(|_| (line.0, "bad patch size".to_string()))?;
    let line = lines.next()?;
    let config = parse_config(line.0, expect(line, "config")?)?;
    let mut net = TrainedNetwork::initialize(&scheme, &config, patch).map_err(|e| (line.0, e.to_string()))?;

    let mut shapes = Vec::with_capacity(net.members.len());
    for m in &net.members {
        let line = lines.next()?;
        let name = expect(line, "member")?;
        if name != m.name {
            return Err((line.0, format!("member `{name}` but the scheme expects `{}`", m.name)));
        }
        let kinds = m.arch.param_layers();
        let mut member_shapes = Vec::new();
        for (p, (_, spec)) in m.params.layers().iter().zip(kinds) {
            let line = lines.next()?;
            let want = format!("{} {} {} {}", p.layer, spec.kind(), dims(p.weights.shape()), p.bias.len());
            let got = expect(line, "layer")?;
            if got != want {
                return Err((
                    line.0,
                    format!("member {name}: layer `{got}` does not match the rebuilt architecture `{want}`"),
                ));
            }
            member_shapes.push((p.layer, p.weights.shape().to_vec(), p.bias.len()));
        }
        shapes.push(member_shapes);
    }
    let line = lines.next()?;
    if line.1 != "end" {
        return Err((line.0, format!("expected `end`, found `{}`", line.1)));
    }

    let body = lines.pos;
    let expected = 8 * net.param_count();
    let have = bytes.len() - body;
    if have != expected {
        let at = if have < expected { bytes.len() } else { body + expected };
        return Err((at, format!("parameter payload is {have} bytes, expected {expected}")));
    }
    let mut values = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    for (m, member_shapes) in net.members.iter_mut().zip(shapes) {
        let layers = member_shapes
            .into_iter()
            .map(|(layer, wshape, nb)| {
                let nw: usize = wshape.iter().product();
                let w = Tensor::new(wshape, values.by_ref().take(nw).collect()).expect("shape from architecture");
                let b = Tensor::new(vec![nb], values.by_ref().take(nb).collect()).expect("shape from architecture");
                LayerParams {
                    layer,
                    weights: w,
                    bias: b,
                }
            })
            .collect();
        m.params = ParamStore::with_params(m.params.seed(), layers);
    }
    Ok(net)
}

pub fn load_model(path: &Path) -> Result<TrainedNetwork> {
    decode(&read(path)?).map_err(|(offset, msg)| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    })
}
