//! Synthetic bilingual corpus.
//!
//! Each language owns a disjoint token range. Every token has a fixed
//! template vector made of a shared random part plus a language offset along
//! a per-language direction; a frame is its token's template plus Gaussian
//! noise. Code-switching utterances alternate languages segment by segment.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! spec.json          generator settings (optional)
//! manifest.jsonl     {utt_id, length, y_asr, y_lid, true_frame_lang} per line
//! feats/<utt_id>.bin features
//! ```
//!
//! A feature file is the ASCII magic `DLGF`, then little-endian `u32`
//! version (1), frame count and dimension, then `frames × dim` little-endian
//! `f64` values in row order. A frame count of 0 means "read frames until end
//! of stream", which lets a producer write features through a pipe.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ctc::CtcLabelSeq;
use crate::error::{config, contract, Result};
use crate::tensor::Tensor;

/// Distance of each language's templates from the origin along its direction.
const LANGUAGE_OFFSET: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_utts: usize,
    /// Inclusive utterance length range in frames.
    pub t_range: (usize, usize),
    pub d_in: usize,
    /// Inclusive token range of every language.
    pub vocab_ranges: Vec<(usize, usize)>,
    pub cs_ratio: f64,
    /// Inclusive frame range of one language segment in a switching utterance.
    pub segment_range: (usize, usize),
    /// Inclusive number of frames each token occupies.
    pub token_frames: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_utts: 400,
            t_range: (12, 24),
            d_in: 16,
            vocab_ranges: vec![(1, 8), (9, 16)],
            cs_ratio: 0.5,
            segment_range: (4, 10),
            token_frames: (2, 3),
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (t_min, t_max) = self.t_range;
        let (s_min, s_max) = self.segment_range;
        let (f_min, f_max) = self.token_frames;
        if t_min == 0 || t_min > t_max {
            return Err(config(format!("bad length range {:?}", self.t_range)));
        }
        if s_min == 0 || s_min > s_max || s_max > t_max {
            return Err(config(format!(
                "segment range {:?} impossible for lengths {:?}",
                self.segment_range, self.t_range
            )));
        }
        if f_min == 0 || f_min > f_max || f_max > s_min.min(t_min) {
            return Err(config(format!(
                "token frame range {:?} does not fit segments",
                self.token_frames
            )));
        }
        if !(0.0..=1.0).contains(&self.cs_ratio) {
            return Err(config(format!("cs_ratio={} outside [0, 1]", self.cs_ratio)));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 || self.d_in == 0 {
            return Err(config("noise_std must be >= 0 and d_in positive"));
        }
        if self.vocab_ranges.is_empty() {
            return Err(config("need at least one language"));
        }
        if self.cs_ratio > 0.0 && (self.vocab_ranges.len() < 2 || t_max < 2 * s_min) {
            return Err(config("code-switching needs two languages and room for two segments"));
        }
        for (i, &(lo, hi)) in self.vocab_ranges.iter().enumerate() {
            // Two tokens per language so a token can always differ from its predecessor.
            if lo == 0 || hi <= lo {
                return Err(config(format!(
                    "vocab range {i} = [{lo}, {hi}] must exclude 0 and hold two tokens"
                )));
            }
            for &(lo2, hi2) in &self.vocab_ranges[i + 1..] {
                if lo <= hi2 && lo2 <= hi {
                    return Err(config(format!("vocab ranges [{lo}, {hi}] and [{lo2}, {hi2}] overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn n_languages(&self) -> usize {
        self.vocab_ranges.len()
    }

    /// Smallest model vocabulary (blank included) covering every token.
    pub fn vocab_size(&self) -> usize {
        self.vocab_ranges.iter().map(|r| r.1).max().unwrap_or(0) + 1
    }
}

/// Maps each token to the language whose range contains it.
pub fn lid_labels_from_asr(y_asr: &[usize], vocab_ranges: &[(usize, usize)]) -> Result<Vec<usize>> {
    y_asr
        .iter()
        .map(|&tok| {
            vocab_ranges
                .iter()
                .position(|&(lo, hi)| (lo..=hi).contains(&tok))
                .ok_or_else(|| contract(format!("token {tok} belongs to no language")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub feats: Tensor,
    pub y_asr: Vec<usize>,
    /// Language index per token.
    pub y_lid: Vec<usize>,
    pub true_frame_lang: Vec<usize>,
}

/// Which scoring subset an utterance falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UttClass {
    Mono(usize),
    CodeSwitch,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.feats.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self) -> UttClass {
        match self.true_frame_lang.first() {
            Some(&l) if self.true_frame_lang.iter().all(|&x| x == l) => UttClass::Mono(l),
            Some(_) => UttClass::CodeSwitch,
            None => UttClass::Mono(0),
        }
    }

    pub fn labels(&self) -> Result<CtcLabelSeq> {
        CtcLabelSeq::new(self.y_asr.clone())
    }
}

/// Template bank: `templates[token]` for every token of every language.
fn templates(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<f64>>> {
    let d = spec.d_in;
    let mut normal = || -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
    // Gram-Schmidt language directions (fewer than d_in of them are orthogonal).
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for _ in 0..spec.n_languages() {
        let mut v = normal();
        for u in dirs.iter().take(d.saturating_sub(1)) {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a /= n);
        dirs.push(v);
    }
    let mut bank = vec![None; spec.vocab_size()];
    for (lang, &(lo, hi)) in spec.vocab_ranges.iter().enumerate() {
        for slot in &mut bank[lo..=hi] {
            let mut g = normal();
            for u in &dirs {
                let p: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
                g.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            g.iter_mut()
                .zip(&dirs[lang])
                .for_each(|(a, b)| *a += LANGUAGE_OFFSET * b);
            *slot = Some(g);
        }
    }
    bank
}

/// Per-frame language plan of one utterance.
fn segment_plan(spec: &SynthSpec, rng: &mut ChaCha8Rng, t: usize, cs: bool) -> Vec<usize> {
    let first = rng.random_range(0..spec.n_languages());
    if !cs {
        return vec![first; t];
    }
    let (s_min, s_max) = spec.segment_range;
    let mut plan = Vec::with_capacity(t);
    let mut lang = first;
    while plan.len() < t {
        let remaining = t - plan.len();
        let mut len = rng.random_range(s_min..=s_max).min(remaining);
        // A tail shorter than a segment joins the current one.
        if remaining - len < s_min {
            len = remaining;
        }
        plan.extend(std::iter::repeat_n(lang, len));
        let others: Vec<usize> = (0..spec.n_languages()).filter(|&l| l != lang).collect();
        lang = others[rng.random_range(0..others.len())];
    }
    plan
}

fn generate_one(spec: &SynthSpec, bank: &[Option<Vec<f64>>], rng: &mut ChaCha8Rng, idx: usize) -> Utterance {
    let (t_min, t_max) = spec.t_range;
    let cs = rng.random_bool(spec.cs_ratio);
    let t = if cs {
        // Room for at least two segments.
        rng.random_range(t_min.max(2 * spec.segment_range.0).min(t_max)..=t_max)
    } else {
        rng.random_range(t_min..=t_max)
    };
    let plan = segment_plan(spec, rng, t, cs);
    let (f_min, f_max) = spec.token_frames;
    let mut y_asr = Vec::new();
    let mut frame_tok = Vec::with_capacity(t);
    let mut start = 0;
    while start < t {
        let lang = plan[start];
        let seg_end = (start..t).find(|&i| plan[i] != lang).unwrap_or(t);
        let mut pos = start;
        while pos < seg_end {
            let left = seg_end - pos;
            let mut dur = rng.random_range(f_min..=f_max).min(left);
            if left - dur < f_min {
                dur = left;
            }
            let (lo, hi) = spec.vocab_ranges[lang];
            let tok = loop {
                let c = rng.random_range(lo..=hi);
                if y_asr.last() != Some(&c) {
                    break c;
                }
            };
            y_asr.push(tok);
            frame_tok.extend(std::iter::repeat_n(tok, dur));
            pos += dur;
        }
        start = seg_end;
    }
    let d = spec.d_in;
    let mut data = Vec::with_capacity(t * d);
    for &tok in &frame_tok {
        let tpl = bank[tok].as_ref().expect("token has a template");
        for &v in tpl {
            let n: f64 = rng.sample(StandardNormal);
            data.push(v + spec.noise_std * n);
        }
    }
    let y_lid = lid_labels_from_asr(&y_asr, &spec.vocab_ranges).expect("tokens drawn from ranges");
    Utterance {
        utt_id: format!("utt{idx:05}"),
        feats: Tensor::new(vec![t, d], data).expect("shape matches"),
        y_asr,
        y_lid,
        true_frame_lang: plan,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: Option<SynthSpec>,
    pub utts: Vec<Utterance>,
}

/// Draws a corpus; the same spec always yields the same bytes.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bank = templates(spec, &mut rng);
    let utts = (0..spec.n_utts)
        .map(|i| generate_one(spec, &bank, &mut rng, i))
        .collect();
    Ok(Dataset {
        spec: Some(spec.clone()),
        utts,
    })
}

/// Zero-padded minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B × T_max × d_in]`.
    pub feats: Tensor,
    pub lengths: Vec<usize>,
    pub y_asr: Vec<CtcLabelSeq>,
    pub y_lid: Vec<Vec<usize>>,
    pub true_frame_lang: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_utts(utts: &[&Utterance]) -> Result<Self> {
        let d = utts.first().map_or(0, |u| u.feats.cols());
        let t_max = utts.iter().map(|u| u.len()).max().unwrap_or(0);
        let mut data = vec![0.0; utts.len() * t_max * d];
        for (b, u) in utts.iter().enumerate() {
            if u.feats.cols() != d {
                return Err(contract(format!(
                    "utterance {} has dim {}, batch has {d}",
                    u.utt_id,
                    u.feats.cols()
                )));
            }
            data[b * t_max * d..b * t_max * d + u.feats.len()].copy_from_slice(u.feats.data());
        }
        Ok(Self {
            feats: Tensor::new(vec![utts.len(), t_max, d], data)?,
            lengths: utts.iter().map(|u| u.len()).collect(),
            y_asr: utts.iter().map(|u| u.labels()).collect::<Result<_>>()?,
            y_lid: utts.iter().map(|u| u.y_lid.clone()).collect(),
            true_frame_lang: utts.iter().map(|u| u.true_frame_lang.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Unpadded `[T_b × d_in]` features of item `b`.
    pub fn item_feats(&self, b: usize) -> Tensor {
        let (t_max, d) = (self.feats.shape()[1], self.feats.shape()[2]);
        let start = b * t_max * d;
        Tensor::new(
            vec![self.lengths[b], d],
            self.feats.data()[start..start + self.lengths[b] * d].to_vec(),
        )
        .expect("length within padding")
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    utt_id: String,
    length: usize,
    y_asr: Vec<usize>,
    y_lid: Vec<usize>,
    true_frame_lang: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }

    pub fn find(&self, utt_id: &str) -> Option<&Utterance> {
        self.utts.iter().find(|u| u.utt_id == utt_id)
    }

    /// First `n` utterances for training, the rest held out.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.utts.len());
        (
            Dataset {
                spec: self.spec.clone(),
                utts: self.utts[..n].to_vec(),
            },
            Dataset {
                spec: self.spec.clone(),
                utts: self.utts[n..].to_vec(),
            },
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("feats"))?;
        if let Some(spec) = &self.spec {
            fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
        }
        let mut manifest = io::BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
        for u in &self.utts {
            let line = ManifestLine {
                utt_id: u.utt_id.clone(),
                length: u.len(),
                y_asr: u.y_asr.clone(),
                y_lid: u.y_lid.clone(),
                true_frame_lang: u.true_frame_lang.clone(),
            };
            writeln!(manifest, "{}", serde_json::to_string(&line)?)?;
            let mut f = io::BufWriter::new(fs::File::create(dir.join("feats").join(format!("{}.bin", u.utt_id)))?);
            write_feats(&mut f, &u.feats)?;
            f.flush()?;
        }
        manifest.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join("spec.json");
        let spec = if spec_path.exists() {
            Some(serde_json::from_str(&fs::read_to_string(spec_path)?)?)
        } else {
            None
        };
        let manifest = BufReader::new(fs::File::open(dir.join("manifest.jsonl"))?);
        let mut utts = Vec::new();
        for line in manifest.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: ManifestLine = serde_json::from_str(&line)?;
            let mut f = BufReader::new(fs::File::open(dir.join("feats").join(format!("{}.bin", m.utt_id)))?);
            let feats = read_feats(&mut f)?;
            if feats.rows() != m.length || m.true_frame_lang.len() != m.length || m.y_lid.len() != m.y_asr.len() {
                return Err(contract(format!(
                    "manifest entry {} disagrees with its features",
                    m.utt_id
                )));
            }
            utts.push(Utterance {
                utt_id: m.utt_id,
                feats,
                y_asr: m.y_asr,
                y_lid: m.y_lid,
                true_frame_lang: m.true_frame_lang,
            });
        }
        Ok(Self { spec, utts })
    }
}

pub const FEAT_MAGIC: &[u8; 4] = b"DLGF";
pub const FEAT_VERSION: u32 = 1;

pub fn write_feats(w: &mut impl Write, feats: &Tensor) -> Result<()> {
    write_feat_header(w, feats.rows() as u32, feats.cols() as u32)?;
    for v in feats.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_feat_header(w: &mut impl Write, frames: u32, dim: u32) -> Result<()> {
    w.write_all(FEAT_MAGIC)?;
    w.write_all(&FEAT_VERSION.to_le_bytes())?;
    w.write_all(&frames.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    Ok(())
}

/// Incremental reader over a feature stream.
pub struct FeatReader<R> {
    inner: R,
    dim: usize,
    remaining: Option<usize>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl<R: Read> FeatReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        inner.read_exact(&mut magic)?;
        if &magic != FEAT_MAGIC {
            return Err(contract("not a feature file (bad magic)"));
        }
        let version = read_u32(&mut inner)?;
        if version != FEAT_VERSION {
            return Err(contract(format!("feature file version {version} unsupported")));
        }
        let frames = read_u32(&mut inner)? as usize;
        let dim = read_u32(&mut inner)? as usize;
        if dim == 0 {
            return Err(contract("feature dimension 0"));
        }
        Ok(Self {
            inner,
            dim,
            remaining: (frames > 0).then_some(frames),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Reads up to `max` frames; an empty result means the stream ended.
    pub fn read_frames(&mut self, max: usize) -> Result<Tensor> {
        let want = self.remaining.map_or(max, |r| r.min(max));
        let mut data = Vec::with_capacity(want * self.dim);
        let mut buf = vec![0u8; 8 * self.dim];
        let mut got = 0;
        while got < want {
            match read_full(&mut self.inner, &mut buf)? {
                0 if self.remaining.is_none() => break,
                n if n == buf.len() => {
                    data.extend(
                        buf.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                    );
                    got += 1;
                }
                _ => return Err(contract("feature stream ends inside a frame")),
            }
        }
        if let Some(r) = &mut self.remaining {
            *r -= got;
        }
        Tensor::new(vec![got, self.dim], data)
    }
}

/// Fills `buf` unless the stream ends first; returns the bytes read.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(n)
}

pub fn read_feats(r: &mut impl Read) -> Result<Tensor> {
    let mut reader = FeatReader::new(r)?;
    reader.read_frames(usize::MAX)
}
