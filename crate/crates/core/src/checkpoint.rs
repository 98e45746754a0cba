//! Single-file checkpoint bundle.
//!
//! ```text
//! graphprior-checkpoint 1
//! ds_iters 50
//! ds_tol 0.000001
//! leaky_slope 0.2
//! blocks 13
//! mp.layer0.w 32 32
//! ...
//! end
//! [mp.layer0.w]
//! <csv rows>
//! ...
//! ```
//!
//! The manifest lists every block with its shape; loading checks each
//! section against it.

use std::path::Path;

use crate::energy::EnergyParams;
use crate::error::{Error, Result};
use crate::mp::{MPLayerParams, MPParams};
use crate::params::ParamBlocks;
use crate::tensor::csv::{parse_csv, to_csv_string};
use crate::tensor::Matrix;
use crate::training::{ClassifierParams, Model};

const MAGIC: &str = "graphprior-checkpoint 1";

pub fn model_to_string(model: &Model) -> String {
    let blocks = model.blocks();
    let slope = model.mp.layers.first().map_or(0.0, |l| l.leaky_slope);
    let mut out = format!(
        "{MAGIC}\nds_iters {}\nds_tol {}\nleaky_slope {slope}\nblocks {}\n",
        model.mp.ds_iters,
        model.mp.ds_tol,
        blocks.len()
    );
    for (name, m) in &blocks {
        out.push_str(&format!("{name} {} {}\n", m.rows(), m.cols()));
    }
    out.push_str("end\n");
    for (name, m) in &blocks {
        out.push_str(&format!("[{name}]\n"));
        out.push_str(&to_csv_string(m));
    }
    out
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text, path)
}

fn bad(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn header_value<T: std::str::FromStr>(path: &Path, lines: &[&str], idx: usize, key: &str) -> Result<T> {
    let line = lines.get(idx).copied().unwrap_or("");
    let value = line
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| bad(path, idx + 1, format!("expected `{key} <value>`")))?;
    value
        .trim()
        .parse()
        .map_err(|_| bad(path, idx + 1, format!("invalid {key} {value:?}")))
}

pub fn model_from_str(text: &str, path: &Path) -> Result<Model> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.first().map(|l| l.trim()) != Some(MAGIC) {
        return Err(bad(path, 1, "not a checkpoint bundle"));
    }
    let ds_iters: usize = header_value(path, &lines, 1, "ds_iters")?;
    let ds_tol: f64 = header_value(path, &lines, 2, "ds_tol")?;
    let leaky_slope: f64 = header_value(path, &lines, 3, "leaky_slope")?;
    let count: usize = header_value(path, &lines, 4, "blocks")?;

    let mut manifest = Vec::with_capacity(count);
    for i in 0..count {
        let idx = 5 + i;
        let fields: Vec<&str> = lines.get(idx).copied().unwrap_or("").split_whitespace().collect();
        let [name, rows, cols] = fields[..] else {
            return Err(bad(path, idx + 1, "expected `<name> <rows> <cols>`"));
        };
        let rows: usize = rows
            .parse()
            .map_err(|_| bad(path, idx + 1, "invalid row count"))?;
        let cols: usize = cols
            .parse()
            .map_err(|_| bad(path, idx + 1, "invalid column count"))?;
        manifest.push((name.to_string(), rows, cols));
    }
    if lines.get(5 + count).map(|l| l.trim()) != Some("end") {
        return Err(bad(path, 6 + count, "expected `end` after the manifest"));
    }

    let mut blocks = Vec::with_capacity(count);
    let mut cursor = 6 + count;
    for (name, rows, cols) in &manifest {
        let header = format!("[{name}]");
        if lines.get(cursor).map(|l| l.trim()) != Some(header.as_str()) {
            return Err(bad(path, cursor + 1, format!("expected section {header}")));
        }
        let body_start = cursor + 1;
        let mut end = body_start;
        while end < lines.len() && !lines[end].starts_with('[') {
            end += 1;
        }
        let m = if *rows == 0 || *cols == 0 {
            Matrix::zeros(*rows, *cols)
        } else {
            parse_csv(&lines[body_start..end].join("\n"), path).map_err(|e| match e {
                Error::Parse { message, line, .. } => bad(path, body_start + line, message),
                other => other,
            })?
        };
        if m.shape() != (*rows, *cols) {
            return Err(Error::Checkpoint(format!(
                "block {name} has shape {:?}, manifest says ({rows}, {cols})",
                m.shape()
            )));
        }
        blocks.push((name.clone(), m));
        cursor = end;
    }
    if cursor != lines.len() {
        return Err(bad(path, cursor + 1, "unexpected content after the last block"));
    }
    assemble(blocks, ds_iters, ds_tol, leaky_slope)
}

fn assemble(blocks: Vec<(String, Matrix)>, ds_iters: usize, ds_tol: f64, leaky_slope: f64) -> Result<Model> {
    let mut it = blocks.into_iter().peekable();
    let mut layers = Vec::new();
    while it.peek().is_some_and(|(name, _)| name.starts_with("mp.")) {
        let l = layers.len();
        let w = take(&mut it, &format!("mp.layer{l}.w"))?;
        let attn = take(&mut it, &format!("mp.layer{l}.attn"))?;
        layers.push(MPLayerParams { w, attn, leaky_slope });
    }
    if layers.is_empty() {
        return Err(Error::Checkpoint("missing block mp.layer0.w".into()));
    }
    let mp = MPParams {
        layers,
        ds_iters,
        ds_tol,
    };
    let energy = EnergyParams {
        w_edge: take(&mut it, "energy.w_edge")?,
        w_pool: take(&mut it, "energy.w_pool")?,
        v_pool: take(&mut it, "energy.v_pool")?,
        w1: take(&mut it, "energy.w1")?,
        b1: take(&mut it, "energy.b1")?,
        w2: take(&mut it, "energy.w2")?,
        b2: take(&mut it, "energy.b2")?,
    };
    let classifier = ClassifierParams {
        w: take(&mut it, "classifier.w")?,
        b: take(&mut it, "classifier.b")?,
    };
    if let Some((name, _)) = it.next() {
        return Err(Error::Checkpoint(format!("unexpected block {name}")));
    }
    let model = Model {
        mp,
        energy,
        classifier,
    };
    model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(model)
}

fn take(it: &mut impl Iterator<Item = (String, Matrix)>, expected: &str) -> Result<Matrix> {
    match it.next() {
        Some((name, m)) if name == expected => Ok(m),
        Some((name, _)) => Err(Error::Checkpoint(format!(
            "expected block {expected}, found {name}"
        ))),
        None => Err(Error::Checkpoint(format!("missing block {expected}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::ModelConfig;

    fn model() -> Model {
        Model::init(
            &ModelConfig {
                mp_dims: vec![4, 4, 3],
                ..ModelConfig::default()
            },
            5,
            6,
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let text = model_to_string(&m);
        let back = model_from_str(&text, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_string(&back), text);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model(), &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), model());
    }

    #[test]
    fn manifest_mismatch_is_rejected() {
        let text = model_to_string(&model()).replacen("mp.layer0.w 5 4", "mp.layer0.w 5 3", 1);
        assert!(matches!(
            model_from_str(&text, Path::new("mem")),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_bundle_is_rejected() {
        let text = model_to_string(&model());
        let cut = &text[..text.len() / 2];
        assert!(model_from_str(cut, Path::new("mem")).is_err());
        assert!(model_from_str("hello", Path::new("mem")).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_model("/nonexistent/model.ckpt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.ckpt"));
    }
}
