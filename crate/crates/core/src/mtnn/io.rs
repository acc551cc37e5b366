//! Binary model files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic[4] | u32 version | u32 n_in | u32 n_heads
//! repeated: u32 rows | u32 cols | rows*cols f32 weights (row-major) | cols f32 biases
//! ```
//!
//! Layers run until end of file. In a model file the last `n_heads` layers
//! are the heads (edge, call-trace, approach) and everything before them is
//! the encoder; an embedding file holds only the encoder layers.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{ArchSpec, Dense, EmbeddingBundle, ModelParams, MtnnError};

pub const MODEL_MAGIC: &[u8; 4] = b"MTFZ";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"MTFE";
pub const FORMAT_VERSION: u32 = 1;
const N_HEADS: u32 = 3;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], n_in: usize) -> Result<(), MtnnError> {
    w.write_all(magic)?;
    put_u32(w, FORMAT_VERSION)?;
    put_u32(w, dim_u32(n_in)?)?;
    put_u32(w, N_HEADS)?;
    Ok(())
}

fn dim_u32(d: usize) -> Result<u32, MtnnError> {
    u32::try_from(d).map_err(|_| MtnnError::Format(format!("dimension {d} exceeds u32")))
}

fn write_layer(w: &mut impl Write, layer: &Dense<f32>) -> Result<(), MtnnError> {
    put_u32(w, dim_u32(layer.fan_in())?)?;
    put_u32(w, dim_u32(layer.fan_out())?)?;
    for v in layer.w.iter().chain(layer.b.iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_model(w: &mut impl Write, model: &ModelParams) -> Result<(), MtnnError> {
    write_header(w, MODEL_MAGIC, model.n_in())?;
    for layer in model.encoder.iter().chain(model.heads.iter()) {
        write_layer(w, layer)?;
    }
    Ok(())
}

pub fn write_embedding(w: &mut impl Write, bundle: &EmbeddingBundle) -> Result<(), MtnnError> {
    write_header(w, EMBEDDING_MAGIC, bundle.n_in)?;
    for layer in &bundle.encoder {
        write_layer(w, layer)?;
    }
    Ok(())
}

/// Reads exactly `buf.len()` bytes; `Ok(false)` on a clean end of file
/// before the first byte.
fn read_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool, MtnnError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(MtnnError::Format("truncated layer".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn get_u32(r: &mut impl Read) -> Result<u32, MtnnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => MtnnError::Format("truncated file".into()),
        _ => e.into(),
    })?;
    Ok(u32::from_le_bytes(b))
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<usize, MtnnError> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| MtnnError::Format("missing magic".into()))?;
    if &m != magic {
        return Err(MtnnError::Format(format!(
            "magic {:?} where {:?} was expected",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(MtnnError::Format(format!("unsupported version {version}")));
    }
    let n_in = get_u32(r)? as usize;
    let heads = get_u32(r)?;
    if heads != N_HEADS {
        return Err(MtnnError::Format(format!("expected {N_HEADS} heads, header says {heads}")));
    }
    Ok(n_in)
}

fn read_floats(r: &mut impl Read, n: usize) -> Result<Vec<f32>, MtnnError> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => MtnnError::Format("truncated layer".into()),
        _ => e.into(),
    })?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_layers(r: &mut impl Read) -> Result<Vec<Dense<f32>>, MtnnError> {
    let mut layers = Vec::new();
    loop {
        let mut dims = [0u8; 8];
        if !read_or_eof(r, &mut dims)? {
            return Ok(layers);
        }
        let rows = u32::from_le_bytes([dims[0], dims[1], dims[2], dims[3]]) as usize;
        let cols = u32::from_le_bytes([dims[4], dims[5], dims[6], dims[7]]) as usize;
        if rows == 0 || cols == 0 {
            return Err(MtnnError::Format(format!("empty layer {rows}x{cols}")));
        }
        let w = Array2::from_shape_vec((rows, cols), read_floats(r, rows * cols)?)
            .map_err(|e| MtnnError::Format(e.to_string()))?;
        let b = Array1::from_vec(read_floats(r, cols)?);
        layers.push(Dense { w, b });
    }
}

fn check_chain(n_in: usize, layers: &[Dense<f32>]) -> Result<(), MtnnError> {
    let mut fan_in = n_in;
    for (i, l) in layers.iter().enumerate() {
        if l.fan_in() != fan_in {
            return Err(MtnnError::Format(format!(
                "layer {i} takes {} inputs, previous layer gives {fan_in}",
                l.fan_in()
            )));
        }
        fan_in = l.fan_out();
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<ModelParams, MtnnError> {
    let n_in = read_header(r, MODEL_MAGIC)?;
    let mut layers = read_layers(r)?;
    if layers.len() < N_HEADS as usize + 1 {
        return Err(MtnnError::Format(format!("only {} layers", layers.len())));
    }
    let heads: Vec<Dense<f32>> = layers.split_off(layers.len() - N_HEADS as usize);
    check_chain(n_in, &layers)?;
    let m = layers.last().expect("checked").fan_out();
    if heads.iter().any(|h| h.fan_in() != m) {
        return Err(MtnnError::Format("head fan-in does not match the embedding".into()));
    }
    if heads[0].fan_out() != heads[2].fan_out() {
        return Err(MtnnError::Format("approach head must match the edge head".into()));
    }
    let spec = ArchSpec {
        n_in,
        encoder_dims: layers.iter().map(Dense::fan_out).collect(),
        n_edges: heads[0].fan_out(),
        n_ctx: heads[1].fan_out(),
    };
    let [e, c, a]: [Dense<f32>; 3] = heads.try_into().expect("three heads");
    Ok(ModelParams {
        spec,
        encoder: layers,
        heads: [e, c, a],
    })
}

pub fn read_embedding(r: &mut impl Read) -> Result<EmbeddingBundle, MtnnError> {
    let n_in = read_header(r, EMBEDDING_MAGIC)?;
    let encoder = read_layers(r)?;
    if encoder.is_empty() {
        return Err(MtnnError::Format("embedding without layers".into()));
    }
    check_chain(n_in, &encoder)?;
    Ok(EmbeddingBundle {
        version: FORMAT_VERSION,
        n_in,
        encoder,
    })
}

pub fn save_model(path: &Path, model: &ModelParams) -> Result<(), MtnnError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams, MtnnError> {
    read_model(&mut BufReader::new(File::open(path)?))
}

pub fn save_embedding(path: &Path, bundle: &EmbeddingBundle) -> Result<(), MtnnError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embedding(&mut w, bundle)?;
    w.flush()?;
    Ok(())
}

pub fn load_embedding(path: &Path) -> Result<EmbeddingBundle, MtnnError> {
    read_embedding(&mut BufReader::new(File::open(path)?))
}
