//! Dense and packed model parameters, both prediction rules, binarization
//! and model serialization.
//!
//! The dense rule is the bilinear `u . i + b_u + b_i`. The binary rule
//! approximates the embedding dot product by the dot of the sign vectors
//! scaled by each vector's mean absolute value:
//! `beta_u * alpha_i * (sign(u) . sign(i)) + b_u + b_i`.
//!
//! During training all parameters stay in single precision and the binary
//! forward runs in the real domain (`predict_binary_float`); bit packing
//! happens once, after training, through [`binarize`].

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::kernels::{dot, pack_row};

pub const MODEL_MAGIC: [u8; 4] = *b"BLRM";
pub const MODEL_VERSION: u32 = 1;

/// Which forward rule training used for this model's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Dense,
    Binary,
}

impl Representation {
    pub fn as_str(self) -> &'static str {
        match self {
            Representation::Dense => "dense",
            Representation::Binary => "binary",
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Representation::Dense),
            "binary" => Ok(Representation::Binary),
            other => Err(Error::InvalidConfig(format!(
                "unknown representation {other:?} (expected dense or binary)"
            ))),
        }
    }
}

/// Real-valued latent factor model.
///
/// Factor matrices are row-major `num_users x dim` / `num_items x dim`
/// single-precision arrays. `dim` must be a positive multiple of 32 so
/// rows pack into whole 32-bit words.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    pub dim: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub user_factors: Vec<f32>,
    pub item_factors: Vec<f32>,
    pub user_bias: Vec<f32>,
    pub item_bias: Vec<f32>,
    /// In-memory only; not persisted by the model file format.
    pub mode: Representation,
}

/// Bit-packed sign model with per-vector scales.
///
/// Bit `j` of word `w` of a row encodes element `32*w + j`; bit 1 means +1.
/// Scales are the L1-norm means of the source rows and are never negative.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub dim: usize,
    pub words_per_vec: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub user_bits: Vec<u32>,
    pub item_bits: Vec<u32>,
    pub user_scales: Vec<f32>,
    pub item_scales: Vec<f32>,
    pub user_bias: Vec<f32>,
    pub item_bias: Vec<f32>,
}

/// Elementwise sign with the fixed convention sign(0) = +1.
#[inline]
pub fn sign1(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Sign vector over {-1, +1} (sign(0) = +1).
pub fn sign_vec(v: &[f32]) -> Vec<f32> {
    v.iter().map(|&x| sign1(x)).collect()
}

/// Mean absolute value of the vector (the per-vector scaling factor).
/// A zero vector yields the degenerate but valid scale 0.
pub fn scale_factor(v: &[f32]) -> f32 {
    debug_assert!(!v.is_empty());
    let chunks = v.chunks_exact(8);
    let tail: f32 = chunks.remainder().iter().map(|x| x.abs()).sum();
    let mut acc = [0.0f32; 8];
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k].abs();
        }
    }
    let total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
    total / v.len() as f32
}

/// Dot product of the two sign vectors, carried out in floats.
///
/// Exact for any practical dimension: all partial sums are small integers.
/// `a` may already be a ±1 sign vector; signs are (re)applied elementwise.
#[inline]
pub fn sign_dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let a_chunks = a.chunks_exact(8);
    let b_chunks = b.chunks_exact(8);
    let tail: f32 = a_chunks
        .remainder()
        .iter()
        .zip(b_chunks.remainder())
        .map(|(&x, &y)| sign1(x) * sign1(y))
        .sum();
    let mut acc = [0.0f32; 8];
    for (ca, cb) in a_chunks.zip(b_chunks) {
        for k in 0..8 {
            acc[k] += sign1(ca[k]) * sign1(cb[k]);
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim % 32 != 0 {
        return Err(Error::InvalidConfig(format!(
            "dim must be a positive multiple of 32, got {dim}"
        )));
    }
    Ok(())
}

fn check_finite(name: &'static str, values: &[f32]) -> Result<()> {
    if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "{name} contains a non-finite value at index {pos}"
        )));
    }
    Ok(())
}

impl DenseModel {
    pub fn from_parts(
        dim: usize,
        num_users: usize,
        num_items: usize,
        user_factors: Vec<f32>,
        item_factors: Vec<f32>,
        user_bias: Vec<f32>,
        item_bias: Vec<f32>,
        mode: Representation,
    ) -> Result<Self> {
        check_dim(dim)?;
        let expect = |name: &'static str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(Error::InvalidConfig(format!(
                    "{name} has length {got}, expected {want}"
                )));
            }
            Ok(())
        };
        expect("user_factors", user_factors.len(), num_users * dim)?;
        expect("item_factors", item_factors.len(), num_items * dim)?;
        expect("user_bias", user_bias.len(), num_users)?;
        expect("item_bias", item_bias.len(), num_items)?;
        check_finite("user_factors", &user_factors)?;
        check_finite("item_factors", &item_factors)?;
        check_finite("user_bias", &user_bias)?;
        check_finite("item_bias", &item_bias)?;
        Ok(DenseModel {
            dim,
            num_users,
            num_items,
            user_factors,
            item_factors,
            user_bias,
            item_bias,
            mode,
        })
    }

    pub fn user_row(&self, user: usize) -> &[f32] {
        &self.user_factors[user * self.dim..(user + 1) * self.dim]
    }

    pub fn item_row(&self, item: usize) -> &[f32] {
        &self.item_factors[item * self.dim..(item + 1) * self.dim]
    }

    pub(crate) fn check_indices(&self, user: usize, item: usize) -> Result<()> {
        if user >= self.num_users {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: user,
                limit: self.num_users,
            });
        }
        if item >= self.num_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: item,
                limit: self.num_items,
            });
        }
        Ok(())
    }
}

impl PackedModel {
    pub fn user_bits(&self, user: usize) -> &[u32] {
        &self.user_bits[user * self.words_per_vec..(user + 1) * self.words_per_vec]
    }

    pub fn item_bits(&self, item: usize) -> &[u32] {
        &self.item_bits[item * self.words_per_vec..(item + 1) * self.words_per_vec]
    }

    pub(crate) fn check_indices(&self, user: usize, item: usize) -> Result<()> {
        if user >= self.num_users {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: user,
                limit: self.num_users,
            });
        }
        if item >= self.num_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: item,
                limit: self.num_items,
            });
        }
        Ok(())
    }
}

/// Dense bilinear prediction: `u_u . i_i + b_u + b_i`.
pub fn predict_dense(model: &DenseModel, user: usize, item: usize) -> Result<f32> {
    model.check_indices(user, item)?;
    Ok(dot(model.user_row(user), model.item_row(item)) + model.user_bias[user] + model.item_bias[item])
}

/// Binary prediction computed entirely in the real domain:
/// `beta_u * alpha_i * (sign(u_u) . sign(i_i)) + b_u + b_i`.
///
/// This is the training-time forward; it matches `predict_packed` on the
/// binarized model bit for bit (scales come from the same routine and the
/// sign dot is integer-exact on both paths).
pub fn predict_binary_float(model: &DenseModel, user: usize, item: usize) -> Result<f32> {
    model.check_indices(user, item)?;
    let u_row = model.user_row(user);
    let i_row = model.item_row(item);
    let beta = scale_factor(u_row);
    let alpha = scale_factor(i_row);
    let d = sign_dot_f32(u_row, i_row);
    Ok(beta * alpha * d + model.user_bias[user] + model.item_bias[item])
}

/// Packs every embedding row into sign bits plus its scale factor.
/// Biases are copied verbatim.
pub fn binarize(model: &DenseModel) -> PackedModel {
    let w = model.dim / 32;
    let mut user_bits = vec![0u32; model.num_users * w];
    let mut item_bits = vec![0u32; model.num_items * w];
    let mut user_scales = Vec::with_capacity(model.num_users);
    let mut item_scales = Vec::with_capacity(model.num_items);
    for (row, words) in model
        .user_factors
        .chunks_exact(model.dim)
        .zip(user_bits.chunks_exact_mut(w))
    {
        pack_row(row, words);
        user_scales.push(scale_factor(row));
    }
    for (row, words) in model
        .item_factors
        .chunks_exact(model.dim)
        .zip(item_bits.chunks_exact_mut(w))
    {
        pack_row(row, words);
        item_scales.push(scale_factor(row));
    }
    PackedModel {
        dim: model.dim,
        words_per_vec: w,
        num_users: model.num_users,
        num_items: model.num_items,
        user_bits,
        item_bits,
        user_scales,
        item_scales,
        user_bias: model.user_bias.clone(),
        item_bias: model.item_bias.clone(),
    }
}

/// A model as stored on disk: either parameter kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Dense(DenseModel),
    Packed(PackedModel),
}

impl ModelFile {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelFile::Dense(_) => "dense",
            ModelFile::Packed(_) => "packed",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelFile::Dense(m) => m.dim,
            ModelFile::Packed(m) => m.dim,
        }
    }
}

fn write_f32_array(w: &mut impl Write, values: &[f32]) -> Result<()> {
    for &x in values {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn write_u32_array(w: &mut impl Write, values: &[u32]) -> Result<()> {
    for &x in values {
        w.write_u32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f32_array(r: &mut impl Read, len: usize, section: &'static str) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; len];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(|e| map_eof(e, section))?;
    Ok(out)
}

fn read_u32_array(r: &mut impl Read, len: usize, section: &'static str) -> Result<Vec<u32>> {
    let mut out = vec![0u32; len];
    r.read_u32_into::<LittleEndian>(&mut out)
        .map_err(|e| map_eof(e, section))?;
    Ok(out)
}

fn map_eof(e: std::io::Error, section: &'static str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated(section)
    } else {
        Error::Io(e)
    }
}

/// Writes a model in the `BLRM` format (little-endian).
///
/// Layout: magic `BLRM`, version u32, kind u8 (0 dense / 1 packed),
/// dim u32, num_users u32, num_items u32, then the row-major parameter
/// arrays. The dense mode flag is an in-memory training detail and is not
/// persisted; binary-trained models are shipped as packed files.
pub fn save_model(model: &ModelFile, w: &mut impl Write) -> Result<()> {
    w.write_all(&MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_VERSION)?;
    match model {
        ModelFile::Dense(m) => {
            w.write_u8(0)?;
            w.write_u32::<LittleEndian>(m.dim as u32)?;
            w.write_u32::<LittleEndian>(m.num_users as u32)?;
            w.write_u32::<LittleEndian>(m.num_items as u32)?;
            write_f32_array(w, &m.user_factors)?;
            write_f32_array(w, &m.item_factors)?;
            write_f32_array(w, &m.user_bias)?;
            write_f32_array(w, &m.item_bias)?;
        }
        ModelFile::Packed(m) => {
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(m.dim as u32)?;
            w.write_u32::<LittleEndian>(m.num_users as u32)?;
            w.write_u32::<LittleEndian>(m.num_items as u32)?;
            write_u32_array(w, &m.user_bits)?;
            write_u32_array(w, &m.item_bits)?;
            write_f32_array(w, &m.user_scales)?;
            write_f32_array(w, &m.item_scales)?;
            write_f32_array(w, &m.user_bias)?;
            write_f32_array(w, &m.item_bias)?;
        }
    }
    Ok(())
}

/// Reads a `BLRM` model file back. Loaded dense models carry
/// `Representation::Dense`.
pub fn load_model(r: &mut impl Read) -> Result<ModelFile> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| map_eof(e, "magic"))?;
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found: magic,
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "version"))?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = r.read_u8().map_err(|e| map_eof(e, "kind"))?;
    let dim = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "header"))? as usize;
    let num_users = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "header"))? as usize;
    let num_items = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "header"))? as usize;
    check_dim(dim)?;
    match kind {
        0 => {
            let user_factors = read_f32_array(r, num_users * dim, "user_factors")?;
            let item_factors = read_f32_array(r, num_items * dim, "item_factors")?;
            let user_bias = read_f32_array(r, num_users, "user_bias")?;
            let item_bias = read_f32_array(r, num_items, "item_bias")?;
            Ok(ModelFile::Dense(DenseModel::from_parts(
                dim,
                num_users,
                num_items,
                user_factors,
                item_factors,
                user_bias,
                item_bias,
                Representation::Dense,
            )?))
        }
        1 => {
            let w = dim / 32;
            let user_bits = read_u32_array(r, num_users * w, "user_bits")?;
            let item_bits = read_u32_array(r, num_items * w, "item_bits")?;
            let user_scales = read_f32_array(r, num_users, "user_scales")?;
            let item_scales = read_f32_array(r, num_items, "item_scales")?;
            let user_bias = read_f32_array(r, num_users, "user_bias")?;
            let item_bias = read_f32_array(r, num_items, "item_bias")?;
            check_finite("user_scales", &user_scales)?;
            check_finite("item_scales", &item_scales)?;
            check_finite("user_bias", &user_bias)?;
            check_finite("item_bias", &item_bias)?;
            Ok(ModelFile::Packed(PackedModel {
                dim,
                words_per_vec: w,
                num_users,
                num_items,
                user_bits,
                item_bits,
                user_scales,
                item_scales,
                user_bias,
                item_bias,
            }))
        }
        other => Err(Error::InvalidConfig(format!(
            "unknown model kind byte {other}"
        ))),
    }
}
