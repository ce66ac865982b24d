//! Single-file persistence for a trained pipeline: encoder identity (its
//! config plus a weight checksum — encoder weights are rebuilt
//! deterministically from the seed, so the checksum is a tamper guard, not
//! storage), the vocabulary, and the full projector and decoder parameters.

use std::fs;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::vlm::decoder::{DecoderConfig, ToyDecoder};
use crate::vlm::projector::{Activation, Projector};
use crate::vlm::vocab::Vocab;
use crate::wire::{Reader, Writer};

const MAGIC: &[u8; 4] = b"MGCK";
const VERSION: u16 = 1;
const MAX_DIM: usize = 1 << 20;

#[derive(Clone)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub encoder_checksum: u64,
    pub vocab: Vocab,
    pub projector: Projector,
    pub decoder: ToyDecoder,
}

/// The cross-component invariants a checkpoint must satisfy to be usable.
fn coherent(ck: &Checkpoint) -> Result<()> {
    ck.encoder.validate()?;
    if ck.vocab.is_empty() {
        return Err(Error::Config("checkpoint vocabulary is empty".into()));
    }
    if ck.vocab.len() != ck.decoder.config().vocab {
        return Err(Error::Config(format!(
            "vocabulary has {} words but the decoder was built for {}",
            ck.vocab.len(),
            ck.decoder.config().vocab
        )));
    }
    if ck.projector.out_dim != ck.decoder.config().model_dim {
        return Err(Error::Config(format!(
            "projector emits {} dims but the decoder expects {}",
            ck.projector.out_dim,
            ck.decoder.config().model_dim
        )));
    }
    if ck.projector.in_dim != ck.encoder.embed_dim {
        return Err(Error::Config(format!(
            "projector consumes {} dims but the encoder emits {}",
            ck.projector.in_dim, ck.encoder.embed_dim
        )));
    }
    if ck.projector.params.len() != Projector::param_count(
        ck.projector.in_dim,
        ck.projector.hidden,
        ck.projector.out_dim,
    ) {
        return Err(Error::Config(
            "projector parameter buffer does not match its dims".into(),
        ));
    }
    Ok(())
}

fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::frame(MAGIC, VERSION);
    let e = &ck.encoder;
    w.u32(e.image_side as u32);
    w.u32(e.patch_size as u32);
    w.u32(e.embed_dim as u32);
    w.u32(e.layers as u32);
    w.u32(e.heads as u32);
    w.u64(e.seed);
    w.u64(ck.encoder_checksum);
    w.u32(ck.vocab.len() as u32);
    for word in ck.vocab.words() {
        w.str(word);
    }
    let p = &ck.projector;
    w.u32(p.in_dim as u32);
    w.u32(p.hidden as u32);
    w.u32(p.out_dim as u32);
    w.u8(match p.activation {
        Activation::Gelu => 0,
        Activation::Identity => 1,
    });
    w.u32(p.params.len() as u32);
    w.f64s(&p.params);
    let dc = ck.decoder.config();
    w.u32(dc.vocab as u32);
    w.u32(dc.model_dim as u32);
    w.u32(dc.layers as u32);
    w.u32(dc.heads as u32);
    w.u32(dc.context as u32);
    w.u64(dc.seed);
    w.u32(ck.decoder.params().len() as u32);
    w.f64s(ck.decoder.params());
    w.finish()
}

fn dim32(r: &mut Reader) -> Result<usize> {
    let v = r.u32()? as usize;
    if v > MAX_DIM {
        return Err(Error::Corrupt(format!("implausible dimension {v}")));
    }
    Ok(v)
}

fn finite(params: &[f64], what: &str) -> Result<()> {
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Corrupt(format!("non-finite {what} parameter")));
    }
    Ok(())
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::frame(bytes, MAGIC, VERSION)?;
    let encoder = EncoderConfig {
        image_side: dim32(&mut r)?,
        patch_size: dim32(&mut r)?,
        embed_dim: dim32(&mut r)?,
        layers: dim32(&mut r)?,
        heads: dim32(&mut r)?,
        seed: r.u64()?,
    };
    let encoder_checksum = r.u64()?;
    let nwords = r.count(4)?;
    let mut words = Vec::with_capacity(nwords);
    for _ in 0..nwords {
        words.push(r.str()?);
    }
    let vocab = Vocab::from_words(words)?;

    let in_dim = dim32(&mut r)?;
    let hidden = dim32(&mut r)?;
    let out_dim = dim32(&mut r)?;
    let activation = match r.u8()? {
        0 => Activation::Gelu,
        1 => Activation::Identity,
        t => return Err(Error::Corrupt(format!("unknown activation tag {t}"))),
    };
    let pcount = r.count(8)?;
    if pcount != Projector::param_count(in_dim, hidden, out_dim) {
        return Err(Error::Corrupt(format!(
            "projector parameter count {pcount} does not match its dims"
        )));
    }
    let pparams = r.f64s(pcount)?;
    finite(&pparams, "projector")?;
    let projector = Projector {
        in_dim,
        hidden,
        out_dim,
        activation,
        params: pparams,
    };

    let dconfig = DecoderConfig {
        vocab: dim32(&mut r)?,
        model_dim: dim32(&mut r)?,
        layers: dim32(&mut r)?,
        heads: dim32(&mut r)?,
        context: dim32(&mut r)?,
        seed: r.u64()?,
    };
    let dcount = r.count(8)?;
    if dcount != ToyDecoder::expected_param_count(&dconfig) {
        return Err(Error::Corrupt(format!(
            "decoder parameter count {dcount} does not match its config"
        )));
    }
    let dparams = r.f64s(dcount)?;
    finite(&dparams, "decoder")?;
    let decoder = ToyDecoder::from_params(dconfig, dparams)
        .map_err(|e| Error::Corrupt(format!("decoder in checkpoint: {e}")))?;
    r.finish()?;

    let ck = Checkpoint {
        encoder,
        encoder_checksum,
        vocab,
        projector,
        decoder,
    };
    coherent(&ck).map_err(|e| Error::Corrupt(format!("incoherent checkpoint: {e}")))?;
    Ok(ck)
}

pub fn save_checkpoint<P: AsRef<Path>>(path: P, ck: &Checkpoint) -> Result<()> {
    coherent(ck)?;
    fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}
