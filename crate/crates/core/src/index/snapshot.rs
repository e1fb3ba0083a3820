//! On-disk store snapshots.
//!
//! Layout (all integers little-endian, strings are `u32` length + UTF-8):
//!
//! ```text
//! magic "TMVS" | version u16 | dimension u32 | count u64
//! tokenizer_id str | embedder_id str | chunk_tokens u32 | overlap_tokens u32
//! patient_id str | scope_tag u8 (0 = specialty, 1 = all) | specialty u8
//! count × record:
//!   doc_id str | specialty u8 | chunk_index u64 | span_start u64 | span_end u64
//!   note_type str | created_date i32 (days from CE) | text str | dimension × f32
//! ```

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::{Datelike, NaiveDate};
use thiserror::Error;

use super::{ChunkingConfig, EmbeddedChunk, IndexError, StoreScope, TextChunk, VectorStore};
use crate::corpus::Specialty;

const MAGIC: &[u8; 4] = b"TMVS";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub tokenizer_id: String,
    pub embedder_id: String,
    pub chunking: ChunkingConfig,
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a store snapshot")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    Version(u16),
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn specialty_code(s: Specialty) -> u8 {
    Specialty::ALL.iter().position(|&x| x == s).unwrap() as u8
}

fn specialty_from(code: u8) -> Result<Specialty, SnapshotError> {
    Specialty::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| SnapshotError::Corrupt(format!("specialty code {code}")))
}

fn put_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_str<R: Read>(r: &mut R) -> Result<String, SnapshotError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| SnapshotError::Corrupt(e.to_string()))
}

pub fn write_snapshot<W: Write>(
    w: &mut W,
    store: &VectorStore,
    header: &SnapshotHeader,
) -> Result<(), SnapshotError> {
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(store.dimension() as u32)?;
    w.write_u64::<LittleEndian>(store.len() as u64)?;
    put_str(w, &header.tokenizer_id)?;
    put_str(w, &header.embedder_id)?;
    w.write_u32::<LittleEndian>(header.chunking.chunk_tokens as u32)?;
    w.write_u32::<LittleEndian>(header.chunking.overlap_tokens as u32)?;
    put_str(w, store.patient_id())?;
    match store.scope() {
        StoreScope::Specialty(s) => {
            w.write_u8(0)?;
            w.write_u8(specialty_code(s))?;
        }
        StoreScope::AllSpecialties => {
            w.write_u8(1)?;
            w.write_u8(0)?;
        }
    }
    for c in store.chunks() {
        let t = &c.chunk;
        put_str(w, &t.doc_id)?;
        w.write_u8(specialty_code(t.specialty))?;
        w.write_u64::<LittleEndian>(t.chunk_index as u64)?;
        w.write_u64::<LittleEndian>(t.token_span.0 as u64)?;
        w.write_u64::<LittleEndian>(t.token_span.1 as u64)?;
        put_str(w, &t.note_type)?;
        w.write_i32::<LittleEndian>(t.created_date.num_days_from_ce())?;
        put_str(w, &t.text)?;
        for &x in &c.embedding {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(r: &mut R) -> Result<(VectorStore, SnapshotHeader), SnapshotError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(SnapshotError::Version(version));
    }
    let dimension = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()? as usize;
    let tokenizer_id = get_str(r)?;
    let embedder_id = get_str(r)?;
    let chunking = ChunkingConfig {
        chunk_tokens: r.read_u32::<LittleEndian>()? as usize,
        overlap_tokens: r.read_u32::<LittleEndian>()? as usize,
    };
    let patient_id = get_str(r)?;
    let tag = r.read_u8()?;
    let code = r.read_u8()?;
    let scope = match tag {
        0 => StoreScope::Specialty(specialty_from(code)?),
        1 => StoreScope::AllSpecialties,
        t => return Err(SnapshotError::Corrupt(format!("scope tag {t}"))),
    };
    let mut chunks = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let doc_id = get_str(r)?;
        let specialty = specialty_from(r.read_u8()?)?;
        let chunk_index = r.read_u64::<LittleEndian>()? as usize;
        let start = r.read_u64::<LittleEndian>()? as usize;
        let end = r.read_u64::<LittleEndian>()? as usize;
        let note_type = get_str(r)?;
        let days = r.read_i32::<LittleEndian>()?;
        let created_date = NaiveDate::from_num_days_from_ce_opt(days)
            .ok_or_else(|| SnapshotError::Corrupt(format!("date {days}")))?;
        let text = get_str(r)?;
        let mut embedding = vec![0f32; dimension];
        r.read_f32_into::<LittleEndian>(&mut embedding)?;
        chunks.push(EmbeddedChunk {
            chunk: TextChunk {
                doc_id,
                patient_id: patient_id.clone(),
                specialty,
                chunk_index,
                token_span: (start, end),
                text,
                note_type,
                created_date,
            },
            embedding,
        });
    }
    let store = VectorStore::from_embedded(patient_id, scope, dimension, chunks)?;
    Ok((
        store,
        SnapshotHeader {
            tokenizer_id,
            embedder_id,
            chunking,
        },
    ))
}
