//! The `SPMK1` checkpoint container: a magic line, then one or more sections,
//! each with a one-line JSON descriptor followed by its parameter tensors in
//! declared layer order (tensor-engine serialization format).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpineError};
use crate::losses::NUM_CLASSES;
use crate::net::{CnnArch, CnnParams, FcnModel, LayerParams, LOC_DIMS, NUM_BLOCKS};
use crate::sequence::{BiLstmLayer, BiRnnArch, BiRnnParams, LstmCellParams};
use crate::tensor::Tensor;

pub const MAGIC: &str = "SPMK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionHeader {
    section: String,
    arch: serde_json::Value,
    tensor_count: usize,
}

/// One decoded container section.
#[derive(Debug)]
pub struct Section {
    pub kind: String,
    pub arch: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

fn write_section(
    w: &mut impl Write,
    kind: &str,
    arch: &impl Serialize,
    tensors: &[&Tensor],
) -> Result<()> {
    let header = SectionHeader {
        section: kind.to_string(),
        arch: serde_json::to_value(arch)?,
        tensor_count: tensors.len(),
    };
    let mut line = serde_json::to_string(&header)?;
    line.push('\n');
    w.write_all(line.as_bytes())
        .map_err(|e| SpineError::io("<checkpoint>", e))?;
    for t in tensors {
        t.write_to(w).map_err(|e| SpineError::io("<checkpoint>", e))?;
    }
    Ok(())
}

/// Serializes sections into a fresh container byte buffer.
pub fn container_to_bytes(sections: &[(&str, serde_json::Value, Vec<&Tensor>)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC.as_bytes());
    buf.push(b'\n');
    for (kind, arch, tensors) in sections {
        write_section(&mut buf, kind, arch, tensors)?;
    }
    Ok(buf)
}

/// Reads every section of a container.
pub fn read_container(path: &Path) -> Result<Vec<Section>> {
    let file = std::fs::File::open(path).map_err(|e| SpineError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = String::new();
    r.read_line(&mut magic).map_err(|e| SpineError::io(path, e))?;
    if magic.trim_end() != MAGIC {
        return Err(SpineError::BadData {
            path: path.to_path_buf(),
            reason: format!("bad magic {:?}, expected {MAGIC:?}", magic.trim_end()),
        });
    }
    let mut sections = Vec::new();
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line).map_err(|e| SpineError::io(path, e))?;
        if n == 0 {
            break;
        }
        let header: SectionHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| SpineError::BadData {
                path: path.to_path_buf(),
                reason: format!("malformed section header: {e}"),
            })?;
        let mut tensors = Vec::with_capacity(header.tensor_count);
        for _ in 0..header.tensor_count {
            tensors.push(Tensor::read_from(&mut r)?);
        }
        sections.push(Section {
            kind: header.section,
            arch: header.arch,
            tensors,
        });
    }
    Ok(sections)
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(SpineError::shape(
            format!("checkpoint {what}"),
            format!("{shape:?}"),
            format!("{:?}", t.shape()),
        ));
    }
    Ok(())
}

fn layer_from(tensors: &mut std::vec::IntoIter<Tensor>, w_shape: &[usize], b_shape: &[usize], what: &str) -> Result<LayerParams> {
    let weights = tensors.next().ok_or_else(|| SpineError::BadConfig(format!("missing {what} weights")))?;
    let bias = tensors.next().ok_or_else(|| SpineError::BadConfig(format!("missing {what} bias")))?;
    expect_shape(&weights, w_shape, what)?;
    expect_shape(&bias, b_shape, what)?;
    Ok(LayerParams { weights, bias })
}

pub fn cnn_to_bytes(params: &CnnParams) -> Result<Vec<u8>> {
    container_to_bytes(&[(
        "cnn",
        serde_json::to_value(&params.arch)?,
        params.tensors(),
    )])
}

pub fn cnn_from_section(section: &Section) -> Result<CnnParams> {
    let arch: CnnArch = serde_json::from_value(section.arch.clone())?;
    arch.validate()?;
    let [kd, kh, kw] = arch.kernel;
    let mut it = section.tensors.clone().into_iter();
    let mut convs = Vec::with_capacity(NUM_BLOCKS);
    let mut c_in = 1usize;
    for (i, &c_out) in arch.channels.iter().enumerate() {
        convs.push(layer_from(
            &mut it,
            &[c_out, c_in, kd, kh, kw],
            &[c_out],
            &format!("conv{}", i + 1),
        )?);
        c_in = c_out;
    }
    let fc5 = layer_from(&mut it, &[arch.fc_width, arch.flat_features()], &[arch.fc_width], "fc5")?;
    let head_id = layer_from(&mut it, &[NUM_CLASSES, arch.fc_width], &[NUM_CLASSES], "fc6_1")?;
    let head_loc = layer_from(&mut it, &[LOC_DIMS, arch.fc_width], &[LOC_DIMS], "fc6_2")?;
    Ok(CnnParams {
        arch,
        convs,
        fc5,
        head_id,
        head_loc,
    })
}

pub fn fcn_to_bytes(model: &FcnModel) -> Result<Vec<u8>> {
    container_to_bytes(&[(
        "fcn",
        serde_json::to_value(&model.arch)?,
        model.tensors(),
    )])
}

pub fn fcn_from_section(section: &Section) -> Result<FcnModel> {
    let arch: CnnArch = serde_json::from_value(section.arch.clone())?;
    arch.validate()?;
    let [kd, kh, kw] = arch.kernel;
    let [pd, ph, pw] = arch.pooled_dims();
    let mut it = section.tensors.clone().into_iter();
    let mut convs = Vec::with_capacity(NUM_BLOCKS);
    let mut c_in = 1usize;
    for (i, &c_out) in arch.channels.iter().enumerate() {
        convs.push(layer_from(
            &mut it,
            &[c_out, c_in, kd, kh, kw],
            &[c_out],
            &format!("conv{}", i + 1),
        )?);
        c_in = c_out;
    }
    let c4 = arch.channels[NUM_BLOCKS - 1];
    let fc5_conv = layer_from(&mut it, &[arch.fc_width, c4, pd, ph, pw], &[arch.fc_width], "fc5_conv")?;
    let head_id_conv = layer_from(&mut it, &[NUM_CLASSES, arch.fc_width, 1, 1, 1], &[NUM_CLASSES], "fc6_1_conv")?;
    let head_loc_conv = layer_from(&mut it, &[LOC_DIMS, arch.fc_width, 1, 1, 1], &[LOC_DIMS], "fc6_2_conv")?;
    Ok(FcnModel {
        arch,
        convs,
        fc5_conv,
        head_id_conv,
        head_loc_conv,
    })
}

pub fn birnn_to_bytes(params: &BiRnnParams) -> Result<Vec<u8>> {
    container_to_bytes(&[(
        "birnn",
        serde_json::to_value(&params.arch)?,
        params.tensors(),
    )])
}

pub fn birnn_from_section(section: &Section) -> Result<BiRnnParams> {
    let arch: BiRnnArch = serde_json::from_value(section.arch.clone())?;
    arch.validate()?;
    let h = arch.hidden_units;
    let mut it = section.tensors.clone().into_iter();
    let mut layers = Vec::with_capacity(arch.num_layers);
    let mut in_w = arch.input_width;
    for li in 0..arch.num_layers {
        let mut cells = Vec::with_capacity(2);
        for dir in ["fwd", "bwd"] {
            let w_input = it.next().ok_or_else(|| SpineError::BadConfig(format!("missing layer {li} {dir} w_input")))?;
            let w_hidden = it.next().ok_or_else(|| SpineError::BadConfig(format!("missing layer {li} {dir} w_hidden")))?;
            let bias = it.next().ok_or_else(|| SpineError::BadConfig(format!("missing layer {li} {dir} bias")))?;
            expect_shape(&w_input, &[4 * h, in_w], &format!("layer {li} {dir} w_input"))?;
            expect_shape(&w_hidden, &[4 * h, h], &format!("layer {li} {dir} w_hidden"))?;
            expect_shape(&bias, &[4 * h], &format!("layer {li} {dir} bias"))?;
            cells.push(LstmCellParams {
                w_input,
                w_hidden,
                bias,
            });
        }
        let backward = cells.pop().unwrap();
        let forward = cells.pop().unwrap();
        layers.push(BiLstmLayer { forward, backward });
        in_w = 2 * h;
    }
    let out_w = 2 * h;
    let head_id = layer_from(&mut it, &[NUM_CLASSES, out_w], &[NUM_CLASSES], "rnn_fc1")?;
    let head_loc = layer_from(&mut it, &[LOC_DIMS, out_w], &[LOC_DIMS], "rnn_fc2")?;
    Ok(BiRnnParams {
        arch,
        layers,
        head_id,
        head_loc,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| SpineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| SpineError::io(path, e))?;
    w.flush().map_err(|e| SpineError::io(path, e))
}

pub fn save_cnn(path: &Path, params: &CnnParams) -> Result<()> {
    write_bytes(path, &cnn_to_bytes(params)?)
}

pub fn save_fcn(path: &Path, model: &FcnModel) -> Result<()> {
    write_bytes(path, &fcn_to_bytes(model)?)
}

pub fn save_birnn(path: &Path, params: &BiRnnParams) -> Result<()> {
    write_bytes(path, &birnn_to_bytes(params)?)
}

fn find_unique<'a>(sections: &'a [(usize, Section)], kind: &str, paths: &[&Path]) -> Result<Option<&'a Section>> {
    let matches: Vec<&Section> = sections
        .iter()
        .filter(|(_, s)| s.kind == kind)
        .map(|(_, s)| s)
        .collect();
    match matches.len() {
        0 => Ok(None),
        1 => Ok(Some(matches[0])),
        n => Err(SpineError::BadConfig(format!(
            "{n} {kind:?} sections found across {paths:?}; expected exactly one"
        ))),
    }
}

/// Loaded models gathered from one or more checkpoint files.
#[derive(Debug, Default)]
pub struct LoadedModels {
    pub cnn: Option<CnnParams>,
    pub fcn: Option<FcnModel>,
    pub birnn: Option<BiRnnParams>,
}

/// Scans the given checkpoint files and decodes every known section kind.
/// A section kind may appear at most once across all files.
pub fn load_models(paths: &[&Path]) -> Result<LoadedModels> {
    let mut sections = Vec::new();
    for (pi, p) in paths.iter().enumerate() {
        for s in read_container(p)? {
            sections.push((pi, s));
        }
    }
    let mut out = LoadedModels::default();
    if let Some(s) = find_unique(&sections, "cnn", paths)? {
        out.cnn = Some(cnn_from_section(s)?);
    }
    if let Some(s) = find_unique(&sections, "fcn", paths)? {
        out.fcn = Some(fcn_from_section(s)?);
    }
    if let Some(s) = find_unique(&sections, "birnn", paths)? {
        out.birnn = Some(birnn_from_section(s)?);
    }
    Ok(out)
}
