//! Bit-packed quantized KV cache for one attention head.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attn::{fused_attention_with_table, AttnInput, FlopReport};
use crate::error::{corrupt, invalid, Result};
use crate::io::{put_u32, put_u64, write_atomic, ByteReader};
use crate::keyquant::{encode_keys, key_codebook_bytes, KeyCodebook, KeyCodes, KeyQuantConfig};
use crate::linalg::Mat;
use crate::rope::{RopeParams, RopeTable};
use crate::valquant::{value_codebook_bytes, ValueCodes, ValueQuantizer};

pub const CACHE_MAGIC: &[u8; 4] = b"CVQC";
pub const CACHE_FORMAT_VERSION: u32 = 1;
pub const WORD_BITS: usize = 64;

/// Number of 64-bit words holding `bits` bits.
#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

fn write_bits(words: &mut Vec<u64>, bit_pos: usize, value: u64, width: usize) {
    debug_assert!(width <= 64 && (width == 64 || value >> width == 0));
    if width == 0 {
        return;
    }
    let end = bit_pos + width;
    if words.len() < words_for(end) {
        words.resize(words_for(end), 0);
    }
    let (w, off) = (bit_pos / WORD_BITS, bit_pos % WORD_BITS);
    words[w] |= value << off;
    if off + width > WORD_BITS {
        words[w + 1] |= value >> (WORD_BITS - off);
    }
}

fn read_bits(words: &[u64], bit_pos: usize, width: usize) -> u64 {
    if width == 0 {
        return 0;
    }
    let (w, off) = (bit_pos / WORD_BITS, bit_pos % WORD_BITS);
    let mut v = words[w] >> off;
    if off + width > WORD_BITS {
        v |= words[w + 1] << (WORD_BITS - off);
    }
    if width == 64 {
        v
    } else {
        v & ((1u64 << width) - 1)
    }
}

/// Packs fixed-width fields into 64-bit words, least significant bit first.
/// Padding appears only after the last field.
pub fn pack_codes(values: &[u64], width: usize) -> Result<Vec<u64>> {
    if width == 0 || width > 64 {
        return invalid(format!("field width must lie in 1..=64, got {width}"));
    }
    if width < 64 {
        if let Some(v) = values.iter().find(|v| **v >> width != 0) {
            return invalid(format!("value {v} does not fit in {width} bits"));
        }
    }
    let mut words = vec![0u64; words_for(values.len() * width)];
    for (i, &v) in values.iter().enumerate() {
        write_bits(&mut words, i * width, v, width);
    }
    Ok(words)
}

/// Inverse of [`pack_codes`]. The word count must match `count` exactly.
pub fn unpack_codes(words: &[u64], width: usize, count: usize) -> Result<Vec<u64>> {
    if width == 0 || width > 64 {
        return invalid(format!("field width must lie in 1..=64, got {width}"));
    }
    let need = words_for(count * width);
    if words.len() != need {
        return corrupt(format!(
            "packed buffer has {} words, {count} fields of {width} bits need {need}",
            words.len()
        ));
    }
    Ok((0..count)
        .map(|i| read_bits(words, i * width, width))
        .collect())
}

fn key_fields(codes: &KeyCodes) -> impl Iterator<Item = u64> + '_ {
    codes
        .pairs()
        .iter()
        .flat_map(|&(a, b)| [u64::from(a), u64::from(b)])
}

pub fn pack_key_codes(codes: &KeyCodes, cfg: &KeyQuantConfig) -> Result<Vec<u64>> {
    codes.check_config(cfg)?;
    let fields: Vec<u64> = key_fields(codes).collect();
    pack_codes(&fields, cfg.index_bits() as usize)
}

pub fn unpack_key_codes(words: &[u64], cfg: &KeyQuantConfig, tokens: usize) -> Result<KeyCodes> {
    let count = tokens * cfg.rounds * cfg.groups() * 2;
    let fields = unpack_codes(words, cfg.index_bits() as usize, count)?;
    let pairs = fields
        .chunks_exact(2)
        .map(|p| (p[0] as u16, p[1] as u16))
        .collect();
    KeyCodes::new(cfg, tokens, pairs)
}

pub fn pack_value_codes(codes: &ValueCodes) -> Vec<u64> {
    let mut words = vec![0u64; words_for(codes.bits().len())];
    for (i, &b) in codes.bits().iter().enumerate() {
        words[i / WORD_BITS] |= u64::from(b) << (i % WORD_BITS);
    }
    words
}

pub fn unpack_value_codes(words: &[u64], n_codes: usize, tokens: usize) -> Result<ValueCodes> {
    let fields = unpack_codes(words, 1, n_codes * tokens)?;
    ValueCodes::new(
        n_codes,
        tokens,
        fields.into_iter().map(|b| b as u8).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub key: KeyQuantConfig,
    /// Value code width `N_c`.
    pub n_codes: usize,
}

impl CacheConfig {
    pub fn d(&self) -> usize {
        self.key.d
    }

    pub fn key_bits_per_token(&self) -> usize {
        self.key.bits_per_token()
    }

    pub fn value_bits_per_token(&self) -> usize {
        self.n_codes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub tokens: u64,
    pub d: u64,
    /// Both sides at 16 bits: `N · d · 2 · 2`.
    pub fp16_equivalent_bytes: u64,
    /// One side at 16 bits: `N · d · 2`.
    pub fp16_bytes_per_side: u64,
    pub key_payload_bits: u64,
    pub value_payload_bits: u64,
    /// Exact payload size (bits / 8), both sides.
    pub quantized_payload_bytes: f64,
    /// Bytes actually held in 64-bit words, including tail padding.
    pub packed_bytes: u64,
    pub codebook_bytes: u64,
    /// `8 · payload / (N · d · 2)`, averaged over keys and values.
    pub avg_bit_effective: f64,
    pub avg_bit_key: f64,
    pub avg_bit_value: f64,
    /// Payload plus codebooks, spread over the same scalars.
    pub avg_bit_amortized: f64,
}

impl CacheStats {
    pub fn compute(tokens: usize, cfg: &CacheConfig) -> Self {
        let d = cfg.d() as u64;
        let n = tokens as u64;
        let key_bits = n * cfg.key_bits_per_token() as u64;
        let value_bits = n * cfg.value_bits_per_token() as u64;
        let payload = (key_bits + value_bits) as f64 / 8.0;
        let codebook_bytes = key_codebook_bytes(cfg.key.n_levels, cfg.key.rounds, cfg.d())
            + value_codebook_bytes(cfg.n_codes, cfg.d());
        let side = n * d * 2;
        let per_scalar = |bits: f64, scalars: u64| {
            if scalars == 0 {
                0.0
            } else {
                bits / scalars as f64
            }
        };
        Self {
            tokens: n,
            d,
            fp16_equivalent_bytes: 2 * side,
            fp16_bytes_per_side: side,
            key_payload_bits: key_bits,
            value_payload_bits: value_bits,
            quantized_payload_bytes: payload,
            packed_bytes: 8
                * (words_for(key_bits as usize) + words_for(value_bits as usize)) as u64,
            codebook_bytes,
            avg_bit_effective: per_scalar(8.0 * payload, side),
            avg_bit_key: per_scalar(key_bits as f64, n * d),
            avg_bit_value: per_scalar(value_bits as f64, n * d),
            avg_bit_amortized: per_scalar(8.0 * (payload + codebook_bytes as f64), side),
        }
    }
}

/// Append-only cache of packed key and value codes.
#[derive(Clone, Debug)]
pub struct QuantizedKVCache {
    config: CacheConfig,
    key_codebook: Arc<KeyCodebook>,
    value_quantizer: Arc<ValueQuantizer>,
    rope: RopeParams,
    table: RopeTable,
    len: usize,
    key_words: Vec<u64>,
    value_words: Vec<u64>,
}

impl QuantizedKVCache {
    pub fn new(
        key_codebook: Arc<KeyCodebook>,
        value_quantizer: Arc<ValueQuantizer>,
        rope: RopeParams,
    ) -> Result<Self> {
        let key = *key_codebook.config();
        let d = key.d;
        if value_quantizer.d() != d || rope.d() != d {
            return invalid(format!(
                "key codebook d={d}, value quantizer d={}, rope d={}",
                value_quantizer.d(),
                rope.d()
            ));
        }
        let table = RopeTable::new(&rope, 0);
        Ok(Self {
            config: CacheConfig {
                key,
                n_codes: value_quantizer.n_codes(),
            },
            key_codebook,
            value_quantizer,
            rope,
            table,
            len: 0,
            key_words: Vec::new(),
            value_words: Vec::new(),
        })
    }

    /// Encodes and packs a whole key/value stream.
    pub fn prefill(
        keys: &Mat,
        values: &Mat,
        key_codebook: Arc<KeyCodebook>,
        value_quantizer: Arc<ValueQuantizer>,
        rope: RopeParams,
    ) -> Result<Self> {
        let mut cache = Self::new(key_codebook, value_quantizer, rope)?;
        cache.append(keys, values)?;
        Ok(cache)
    }

    /// Encodes and appends rows of `keys`/`values`.
    pub fn append(&mut self, keys: &Mat, values: &Mat) -> Result<()> {
        let d = self.config.d();
        if keys.cols() != d || values.cols() != d || keys.rows() != values.rows() {
            return invalid(format!(
                "expected matching N×{d} keys and values, got {}x{} and {}x{}",
                keys.rows(),
                keys.cols(),
                values.rows(),
                values.cols()
            ));
        }
        if keys.rows() == 0 {
            return Ok(());
        }
        let kcodes = encode_keys(keys, &self.key_codebook)?;
        let vcodes = self.value_quantizer.encode(values)?;
        let width = self.config.key.index_bits() as usize;
        let mut pos = self.len * self.config.key_bits_per_token();
        for v in key_fields(&kcodes) {
            write_bits(&mut self.key_words, pos, v, width);
            pos += width;
        }
        let mut pos = self.len * self.config.n_codes;
        for &b in vcodes.bits() {
            write_bits(&mut self.value_words, pos, u64::from(b), 1);
            pos += 1;
        }
        self.len += keys.rows();
        Ok(())
    }

    /// Appends one token and attends to the whole cache from position `N − 1`.
    pub fn decode_step(
        &mut self,
        k_new: &[f64],
        v_new: &[f64],
        q: &[f64],
    ) -> Result<(Vec<f64>, FlopReport)> {
        let d = self.config.d();
        if k_new.len() != d || v_new.len() != d || q.len() != d {
            return invalid(format!(
                "decode step expects width {d}, got k {}, v {}, q {}",
                k_new.len(),
                v_new.len(),
                q.len()
            ));
        }
        self.append(
            &Mat::new(1, d, k_new.to_vec())?,
            &Mat::new(1, d, v_new.to_vec())?,
        )?;
        self.attend(q, self.len - 1, self.len)
    }

    /// Fused attention for a query at position `t` over the first `tokens`
    /// cached tokens.
    pub fn attend(&mut self, q: &[f64], t: usize, tokens: usize) -> Result<(Vec<f64>, FlopReport)> {
        if tokens == 0 || tokens > self.len {
            return invalid(format!(
                "prefix of {tokens} tokens, cache holds {}",
                self.len
            ));
        }
        let need = t.max(tokens - 1) + 1;
        if self.table.positions() < need {
            self.table = RopeTable::new(&self.rope, need.next_power_of_two());
        }
        let kcodes = self.key_codes_prefix(tokens)?;
        let vcodes = self.value_codes_prefix(tokens)?;
        let input = AttnInput {
            q,
            t,
            key_codes: &kcodes,
            value_codes: &vcodes,
            key_codebook: &self.key_codebook,
            value_codebook: &self.value_quantizer.codebook,
            rope: &self.rope,
        };
        fused_attention_with_table(&input, &self.table)
    }

    fn key_codes_prefix(&self, tokens: usize) -> Result<KeyCodes> {
        let words = words_for(tokens * self.config.key_bits_per_token());
        unpack_key_codes(&self.key_words[..words], &self.config.key, tokens)
    }

    fn value_codes_prefix(&self, tokens: usize) -> Result<ValueCodes> {
        let words = words_for(tokens * self.config.n_codes);
        unpack_value_codes(&self.value_words[..words], self.config.n_codes, tokens)
    }

    pub fn key_codes(&self) -> Result<KeyCodes> {
        self.key_codes_prefix(self.len)
    }

    pub fn value_codes(&self) -> Result<ValueCodes> {
        self.value_codes_prefix(self.len)
    }

    /// Decoded keys (without RoPE) and values.
    pub fn reconstruct(&self) -> Result<(Mat, Mat)> {
        let keys = crate::keyquant::decode_keys(&self.key_codes()?, &self.key_codebook)?;
        let values = self.value_quantizer.decode(&self.value_codes()?)?;
        Ok((keys, values))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn key_words(&self) -> &[u64] {
        &self.key_words
    }

    pub fn value_words(&self) -> &[u64] {
        &self.value_words
    }

    pub fn stats(&self) -> CacheStats {
        cache_stats(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = &self.config.key;
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        put_u32(&mut buf, CACHE_FORMAT_VERSION);
        for v in [k.d, k.g, k.n_levels, k.rounds, self.config.n_codes] {
            put_u32(&mut buf, v as u32);
        }
        put_u64(&mut buf, self.len as u64);
        put_u64(&mut buf, self.key_words.len() as u64);
        for &w in &self.key_words {
            put_u64(&mut buf, w);
        }
        put_u64(&mut buf, self.value_words.len() as u64);
        for &w in &self.value_words {
            put_u64(&mut buf, w);
        }
        buf
    }

    /// Restores a snapshot; the codebooks must match the recorded config.
    pub fn from_bytes(
        bytes: &[u8],
        key_codebook: Arc<KeyCodebook>,
        value_quantizer: Arc<ValueQuantizer>,
        rope: RopeParams,
    ) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CACHE_MAGIC)?;
        let version = r.u32()?;
        if version != CACHE_FORMAT_VERSION {
            return corrupt(format!("unsupported cache version {version}"));
        }
        let mut hdr = [0usize; 5];
        for h in hdr.iter_mut() {
            *h = r.u32()? as usize;
        }
        let len = r.u64()? as usize;
        let kw = r.u64()? as usize;
        let key_words = r.u64_vec(kw)?;
        let vw = r.u64()? as usize;
        let value_words = r.u64_vec(vw)?;
        r.finish()?;

        let mut cache = Self::new(key_codebook, value_quantizer, rope)?;
        let k = &cache.config.key;
        if hdr != [k.d, k.g, k.n_levels, k.rounds, cache.config.n_codes] {
            return invalid(format!(
                "snapshot config {hdr:?} does not match the supplied codebooks"
            ));
        }
        if kw != words_for(len * cache.config.key_bits_per_token())
            || vw != words_for(len * cache.config.n_codes)
        {
            return corrupt(format!(
                "snapshot word counts ({kw}, {vw}) do not match {len} tokens"
            ));
        }
        cache.len = len;
        cache.key_words = key_words;
        cache.value_words = value_words;
        cache.key_codes()?;
        cache.value_codes()?;
        Ok(cache)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

pub fn cache_stats(cache: &QuantizedKVCache) -> CacheStats {
    CacheStats::compute(cache.len, &cache.config)
}
