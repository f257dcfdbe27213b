//! Model checkpoint container: a versioned header followed by named blocks of
//! little-endian f64 values. Tabular tables ride in the same container.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::models::{NeuralConfig, NeuralJointModel, TabularJointModel};
use crate::rng::Rng;
use crate::seq::{TokenId, Vocabulary};
use crate::view::SeqDist;

const MAGIC: &[u8; 4] = b"JMC\0";
const VERSION: u32 = 1;
const KIND_NEURAL: u8 = 1;
const KIND_TABULAR: u8 = 2;

pub fn save_neural(path: &Path, model: &NeuralJointModel) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, KIND_NEURAL, model.vocab(), model.max_len())?;
    let cfg = model.config();
    for v in [cfg.embed_dim, cfg.hidden_dim, cfg.context, cfg.num_objectives] {
        write_u32(&mut w, v as u32)?;
    }
    let names = model.block_names();
    write_u32(&mut w, names.len() as u32)?;
    for name in names {
        write_bytes(&mut w, name.as_bytes())?;
        let block = model.block(name);
        write_u64(&mut w, block.len() as u64)?;
        for &x in block {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_neural(path: &Path) -> Result<NeuralJointModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (kind, vocab, max_len) = read_header(&mut r)?;
    if kind != KIND_NEURAL {
        return Err(CoreError::Checkpoint(format!(
            "expected a neural checkpoint, found kind {kind}"
        )));
    }
    let embed_dim = read_u32(&mut r)? as usize;
    let hidden_dim = read_u32(&mut r)? as usize;
    let context = read_u32(&mut r)? as usize;
    let num_objectives = read_u32(&mut r)? as usize;
    let cfg = NeuralConfig { embed_dim, hidden_dim, context, num_objectives };
    let mut rng = Rng::seed_from_u64(0);
    let mut model = NeuralJointModel::init(&vocab, max_len, cfg, &mut rng)?;
    let n_blocks = read_u32(&mut r)? as usize;
    for _ in 0..n_blocks {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| CoreError::Checkpoint("non-utf8 block name".into()))?;
        let count = read_u64(&mut r)? as usize;
        let range = model.block_range(&name);
        if range.len() != count {
            return Err(CoreError::Checkpoint(format!(
                "block {name} has {count} values, expected {}",
                range.len()
            )));
        }
        for i in range {
            model.params_mut()[i] = read_f64(&mut r)?;
        }
    }
    Ok(model)
}

pub fn save_tabular(path: &Path, model: &TabularJointModel) -> Result<()> {
    use crate::models::JointModel;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, KIND_TABULAR, model.vocab(), model.max_len())?;
    write_u32(&mut w, model.order() as u32)?;
    write_u32(&mut w, model.num_objectives() as u32)?;
    // Sorted keys keep re-saves byte-identical.
    let mut rows: Vec<(&Vec<TokenId>, &Vec<f64>)> = model.rows().iter().collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    write_u32(&mut w, rows.len() as u32)?;
    for (key, row) in rows {
        write_key(&mut w, key)?;
        for &p in row {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    let mut scores: Vec<(&Vec<TokenId>, &Vec<f64>)> = model.score_table().iter().collect();
    scores.sort_by(|a, b| a.0.cmp(b.0));
    write_u32(&mut w, scores.len() as u32)?;
    for (key, score) in scores {
        write_key(&mut w, key)?;
        write_u32(&mut w, score.len() as u32)?;
        for &s in score {
            w.write_all(&s.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tabular(path: &Path) -> Result<TabularJointModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (kind, vocab, max_len) = read_header(&mut r)?;
    if kind != KIND_TABULAR {
        return Err(CoreError::Checkpoint(format!(
            "expected a tabular checkpoint, found kind {kind}"
        )));
    }
    let order = read_u32(&mut r)? as usize;
    let _m = read_u32(&mut r)? as usize;
    let v = vocab.size();
    let n_rows = read_u32(&mut r)? as usize;
    let mut rows = std::collections::HashMap::with_capacity(n_rows);
    for _ in 0..n_rows {
        let key = read_key(&mut r)?;
        let mut row = Vec::with_capacity(v);
        for _ in 0..v {
            row.push(read_f64(&mut r)?);
        }
        rows.insert(key, row);
    }
    let mut model = TabularJointModel::new(vocab.clone(), max_len, order, rows)?;
    let n_scores = read_u32(&mut r)? as usize;
    for _ in 0..n_scores {
        let key = read_key(&mut r)?;
        let m = read_u32(&mut r)? as usize;
        let mut score = Vec::with_capacity(m);
        for _ in 0..m {
            score.push(read_f64(&mut r)?);
        }
        let seq = crate::seq::Sequence::new(key, &vocab, max_len)
            .map_err(|e| CoreError::Checkpoint(format!("bad score key: {e}")))?;
        model.set_score(&seq, score)?;
    }
    Ok(model)
}

fn write_header<W: Write>(w: &mut W, kind: u8, vocab: &Vocabulary, max_len: usize) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    w.write_all(&[kind])?;
    write_u32(w, vocab.size() as u32)?;
    write_u32(w, vocab.bos() as u32)?;
    write_u32(w, vocab.eos() as u32)?;
    for i in 0..vocab.size() {
        write_bytes(w, vocab.symbol(i).as_bytes())?;
    }
    write_u32(w, max_len as u32)?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(u8, Vocabulary, usize)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let v = read_u32(r)? as usize;
    let bos = read_u32(r)? as usize;
    let eos = read_u32(r)? as usize;
    let mut symbols = Vec::with_capacity(v);
    for _ in 0..v {
        let s = String::from_utf8(read_bytes(r)?)
            .map_err(|_| CoreError::Checkpoint("non-utf8 symbol".into()))?;
        symbols.push(s);
    }
    let vocab = Vocabulary::new(symbols, bos, eos)
        .map_err(|e| CoreError::Checkpoint(format!("bad vocabulary: {e}")))?;
    let max_len = read_u32(r)? as usize;
    Ok((kind[0], vocab, max_len))
}

fn write_key<W: Write>(w: &mut W, key: &[TokenId]) -> Result<()> {
    write_u32(w, key.len() as u32)?;
    for &t in key {
        write_u32(w, t as u32)?;
    }
    Ok(())
}

fn read_key<R: Read>(r: &mut R) -> Result<Vec<TokenId>> {
    let n = read_u32(r)? as usize;
    let mut key = Vec::with_capacity(n);
    for _ in 0..n {
        key.push(read_u32(r)? as usize);
    }
    Ok(key)
}

fn write_u32<W: Write>(w: &mut W, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    write_u32(w, b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(CoreError::Checkpoint(format!("implausible length {n}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
