//! Single-file model container.
//!
//! Layout: a UTF-8 text manifest terminated by a line `end`, followed by the
//! raw little-endian IEEE-754 parameter data.
//!
//! ```text
//! nmt-model 1
//! config layers=2
//! config cells=64
//! ...
//! gate_order input,forget,candidate,output
//! tensor src_embed 22x64 f64 0 11264
//! ...
//! end
//! <data>
//! ```
//!
//! `tensor` lines give name, shape, scalar width (`f64` or `f32`), byte offset
//! from the start of the data section, and byte length. LSTM weight matrices
//! are `[4n × in]` with gate blocks in `gate_order`.

use std::fs;
use std::path::Path;

use crate::attention::{AttentionConfig, AttentionParams};
use crate::error::{NmtError, Result};
use crate::lstm::{LstmLayerParams, StackedLstm, GATE_ORDER};
use crate::model::{ModelConfig, NmtModel};
use crate::tensor::Tensor;

const MAGIC: &str = "nmt-model 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarWidth {
    F64,
    F32,
}

impl ScalarWidth {
    fn name(self) -> &'static str {
        match self {
            ScalarWidth::F64 => "f64",
            ScalarWidth::F32 => "f32",
        }
    }

    fn bytes(self) -> usize {
        match self {
            ScalarWidth::F64 => 8,
            ScalarWidth::F32 => 4,
        }
    }
}

fn bad(msg: impl Into<String>) -> NmtError {
    NmtError::Container(msg.into())
}

fn config_lines(c: &ModelConfig) -> Vec<(String, String)> {
    let mut kv = vec![
        ("layers".to_string(), c.layers.to_string()),
        ("cells".into(), c.cells.to_string()),
        ("src_vocab".into(), c.src_vocab.to_string()),
        ("tgt_vocab".into(), c.tgt_vocab.to_string()),
        ("input_feeding".into(), c.input_feeding.to_string()),
        ("reverse_source".into(), c.reverse_source.to_string()),
    ];
    match &c.attention {
        None => kv.push(("attention".into(), "none".into())),
        Some(a) => {
            kv.push(("attention".into(), a.mechanism.to_string()));
            kv.push(("score".into(), a.score.to_string()));
            kv.push(("window".into(), a.window.to_string()));
            kv.push(("max_source_len".into(), a.max_source_len.to_string()));
        }
    }
    kv
}

pub fn to_bytes(model: &NmtModel, width: ScalarWidth) -> Vec<u8> {
    let mut manifest = format!("{MAGIC}\n");
    for (k, v) in config_lines(&model.config) {
        manifest.push_str(&format!("config {k}={v}\n"));
    }
    manifest.push_str(&format!("gate_order {}\n", GATE_ORDER.join(",")));
    let mut data = Vec::new();
    for (name, t) in model.named_params() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let offset = data.len();
        for &v in t.data() {
            match width {
                ScalarWidth::F64 => data.extend_from_slice(&v.to_le_bytes()),
                ScalarWidth::F32 => data.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        manifest.push_str(&format!(
            "tensor {name} {} {} {offset} {}\n",
            dims.join("x"),
            width.name(),
            data.len() - offset
        ));
    }
    manifest.push_str("end\n");
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&data);
    out
}

pub fn save(model: &NmtModel, path: &Path, width: ScalarWidth) -> Result<()> {
    fs::write(path, to_bytes(model, width)).map_err(|e| NmtError::io(path, e))
}

pub fn load(path: &Path) -> Result<NmtModel> {
    let bytes = fs::read(path).map_err(|e| NmtError::io(path, e))?;
    from_bytes(&bytes)
}

struct Entry {
    name: String,
    tensor: Tensor,
}

pub fn from_bytes(bytes: &[u8]) -> Result<NmtModel> {
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("missing end of manifest"))?;
    let manifest = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
    let data = &bytes[end + 5..];
    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("unrecognized header"));
    }
    let mut cfg = std::collections::HashMap::new();
    let mut entries = Vec::new();
    for line in lines {
        let mut parts = line.split(' ');
        match parts.next() {
            Some("config") => {
                let kv = parts.next().ok_or_else(|| bad(line))?;
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(line))?;
                cfg.insert(k.to_string(), v.to_string());
            }
            Some("gate_order") => {
                if parts.next() != Some(GATE_ORDER.join(",").as_str()) {
                    return Err(bad(format!("unsupported gate order in '{line}'")));
                }
            }
            Some("tensor") => {
                let f: Vec<&str> = parts.collect();
                if f.len() != 5 {
                    return Err(bad(format!("bad tensor line '{line}'")));
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad(line)))
                    .collect::<Result<Vec<_>>>()?;
                let width = match f[2] {
                    "f64" => ScalarWidth::F64,
                    "f32" => ScalarWidth::F32,
                    w => return Err(bad(format!("unknown scalar width {w}"))),
                };
                let offset: usize = f[3].parse().map_err(|_| bad(line))?;
                let len: usize = f[4].parse().map_err(|_| bad(line))?;
                let count: usize = shape.iter().product();
                if len != count * width.bytes() || offset + len > data.len() {
                    return Err(bad(format!("tensor {} has inconsistent extent", f[0])));
                }
                let raw = &data[offset..offset + len];
                let values: Vec<f64> = match width {
                    ScalarWidth::F64 => raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                    ScalarWidth::F32 => raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect(),
                };
                entries.push(Entry {
                    name: f[0].to_string(),
                    tensor: Tensor::new(&shape, values)?,
                });
            }
            _ => return Err(bad(format!("unexpected manifest line '{line}'"))),
        }
    }
    let config = parse_config(&cfg)?;
    assemble(config, entries)
}

fn parse_config(cfg: &std::collections::HashMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| cfg.get(k).ok_or_else(|| bad(format!("missing config {k}")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad config {k}"))) };
    let flag = |k: &str| -> Result<bool> { get(k)?.parse().map_err(|_| bad(format!("bad config {k}"))) };
    let attention = match get("attention")?.as_str() {
        "none" => None,
        m => Some(AttentionConfig {
            mechanism: m.parse()?,
            score: get("score")?.parse()?,
            window: num("window")?,
            max_source_len: num("max_source_len")?,
        }),
    };
    let config = ModelConfig {
        layers: num("layers")?,
        cells: num("cells")?,
        src_vocab: num("src_vocab")?,
        tgt_vocab: num("tgt_vocab")?,
        attention,
        input_feeding: flag("input_feeding")?,
        reverse_source: flag("reverse_source")?,
    };
    config.validate()?;
    Ok(config)
}

type TensorMap = std::collections::HashMap<String, Tensor>;

fn take(map: &mut TensorMap, name: &str) -> Result<Tensor> {
    map.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))
}

fn take_stack(map: &mut TensorMap, prefix: &str, layers: usize) -> Result<StackedLstm> {
    let layers = (0..layers)
        .map(|l| {
            Ok(LstmLayerParams {
                w_x: take(map, &format!("{prefix}.{l}.w_x"))?,
                w_h: take(map, &format!("{prefix}.{l}.w_h"))?,
                bias: take(map, &format!("{prefix}.{l}.bias"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StackedLstm { layers })
}

fn assemble(config: ModelConfig, entries: Vec<Entry>) -> Result<NmtModel> {
    let mut map: TensorMap = entries.into_iter().map(|e| (e.name, e.tensor)).collect();
    let src_embed = take(&mut map, "src_embed")?;
    let tgt_embed = take(&mut map, "tgt_embed")?;
    let encoder = take_stack(&mut map, "encoder", config.layers)?;
    let decoder = take_stack(&mut map, "decoder", config.layers)?;
    let attention = match &config.attention {
        None => None,
        Some(_) => Some(AttentionParams {
            w_a: map.remove("attention.w_a"),
            v_a: map.remove("attention.v_a"),
            w_c: take(&mut map, "attention.w_c")?,
            w_p: map.remove("attention.w_p"),
            v_p: map.remove("attention.v_p"),
        }),
    };
    let w_s = take(&mut map, "output.w_s")?;
    if let Some(extra) = map.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    let model = NmtModel {
        config,
        src_embed,
        tgt_embed,
        encoder,
        decoder,
        attention,
        w_s,
    };
    check_shapes(&model)?;
    Ok(model)
}

/// Verifies the loaded tensors against shapes implied by the configuration.
fn check_shapes(model: &NmtModel) -> Result<()> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let fresh = NmtModel::new(model.config.clone(), &mut rng)?;
    let want = fresh.named_params();
    let got = model.named_params();
    if want.len() != got.len() {
        return Err(bad(format!(
            "expected {} tensors for this configuration, found {}",
            want.len(),
            got.len()
        )));
    }
    for ((wn, wt), (gn, gt)) in want.iter().zip(&got) {
        if wn != gn || wt.shape() != gt.shape() {
            return Err(bad(format!(
                "tensor {gn} has shape {:?}, expected {wn} {:?}",
                gt.shape(),
                wt.shape()
            )));
        }
    }
    Ok(())
}
