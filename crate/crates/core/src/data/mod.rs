//! Synthetic toy ASR corpus: generation, on-disk format, and batch assembly.
//!
//! Each utterance renders a random token sequence into feature frames by
//! repeating a per-(group, token) prototype vector `r` times and adding
//! Gaussian noise. Every group draws its own prototype table, standing in
//! for different languages or domains. Everything is deterministic given
//! the spec seed.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fixed vocabulary layout. Content tokens occupy `CONTENT_BASE..V`.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const SEP: usize = 3;
    pub const CONTENT_BASE: usize = 4;

    /// Smallest model vocabulary that can host `n_content` content tokens.
    pub fn required_vocab(n_content: usize) -> usize {
        CONTENT_BASE + n_content
    }
}

/// One utterance: feature frames plus the reference token sequence.
/// `reference` holds content and separator tokens only; consumers add
/// bos/eos as needed. Features are stored as f32, matching the disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Vec<f32>,
    pub n_frames: usize,
    pub d_feat: usize,
    pub reference: Vec<usize>,
    pub group: String,
}

impl Utterance {
    /// Features widened to f64 for the numerics stack.
    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }
}

/// Parameters of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_content_tokens: usize,
    pub d_feat: usize,
    /// Inclusive range of frames rendered per token.
    pub frames_per_token: [usize; 2],
    pub noise_sigma: f64,
    /// Inclusive range of reference lengths.
    pub length_range: [usize; 2],
    /// Every period-th reference position is the separator token.
    pub word_separator_period: usize,
    pub n_groups: usize,
    /// Per-group prototype seed offsets; empty means "use the group index".
    pub group_seed_offsets: Vec<u64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_content_tokens: 60,
            d_feat: 16,
            frames_per_token: [2, 4],
            noise_sigma: 0.1,
            length_range: [8, 24],
            word_separator_period: 4,
            n_groups: 3,
            group_seed_offsets: Vec::new(),
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_content_tokens == 0 {
            return Err(Error::config("n_content_tokens must be at least 1"));
        }
        if self.d_feat == 0 {
            return Err(Error::config("d_feat must be at least 1"));
        }
        if self.frames_per_token[0] < 1 || self.frames_per_token[0] > self.frames_per_token[1] {
            return Err(Error::config(
                "frames_per_token range must satisfy 1 <= r_min <= r_max",
            ));
        }
        if self.length_range[0] < 1 || self.length_range[0] > self.length_range[1] {
            return Err(Error::config("length_range must satisfy 1 <= u_min <= u_max"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        if self.word_separator_period < 2 {
            return Err(Error::config("word_separator_period must be at least 2"));
        }
        if self.n_groups == 0 {
            return Err(Error::config("n_groups must be at least 1"));
        }
        if !self.group_seed_offsets.is_empty() && self.group_seed_offsets.len() != self.n_groups {
            return Err(Error::config(format!(
                "group_seed_offsets has {} entries for {} groups",
                self.group_seed_offsets.len(),
                self.n_groups
            )));
        }
        Ok(())
    }

    fn group_offset(&self, group: usize) -> u64 {
        self.group_seed_offsets.get(group).copied().unwrap_or(group as u64)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 kept strictly positive.
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 1e-300 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Prototype vector table for one group, indexed by token id.
struct Prototypes {
    d_feat: usize,
    rows: Vec<f32>,
}

impl Prototypes {
    fn build(spec: &SyntheticSpec, group: usize) -> Prototypes {
        let mut rng =
            ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ splitmix64(spec.group_offset(group))));
        let n_tokens = vocab::required_vocab(spec.n_content_tokens);
        let mut rows = vec![0.0f32; n_tokens * spec.d_feat];
        // Every renderable token (separator included) gets a prototype.
        for token in vocab::SEP..n_tokens {
            for j in 0..spec.d_feat {
                rows[token * spec.d_feat + j] = standard_normal(&mut rng) as f32;
            }
        }
        Prototypes {
            d_feat: spec.d_feat,
            rows,
        }
    }

    fn row(&self, token: usize) -> &[f32] {
        &self.rows[token * self.d_feat..(token + 1) * self.d_feat]
    }
}

/// Generates `n_utterances` deterministically from the spec seed.
pub fn generate(spec: &SyntheticSpec, n_utterances: usize) -> Result<Dataset> {
    spec.validate()?;
    let prototypes: Vec<Prototypes> =
        (0..spec.n_groups).map(|g| Prototypes::build(spec, g)).collect();
    let mut utterances = Vec::with_capacity(n_utterances);
    for i in 0..n_utterances {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed).wrapping_add(i as u64));
        let group = rng.gen_range(0..spec.n_groups);
        let u = rng.gen_range(spec.length_range[0]..=spec.length_range[1]);
        let mut reference = Vec::with_capacity(u);
        for pos in 1..=u {
            if pos % spec.word_separator_period == 0 {
                reference.push(vocab::SEP);
            } else {
                reference.push(vocab::CONTENT_BASE + rng.gen_range(0..spec.n_content_tokens));
            }
        }
        let mut features = Vec::new();
        for &token in &reference {
            let r = rng.gen_range(spec.frames_per_token[0]..=spec.frames_per_token[1]);
            let proto = prototypes[group].row(token);
            for _ in 0..r {
                for &p in proto {
                    let noisy = p as f64 + spec.noise_sigma * standard_normal(&mut rng);
                    features.push(noisy as f32);
                }
            }
        }
        let n_frames = features.len() / spec.d_feat;
        utterances.push(Utterance {
            id: format!("utt{i:06}"),
            features,
            n_frames,
            d_feat: spec.d_feat,
            reference,
            group: format!("g{group}"),
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        utterances,
    })
}

// ── On-disk format ──────────────────────────────────────────────────────
//
// A dataset directory holds three files:
//   index.txt     one record per line: id group tokens offset n_frames d_feat
//                 (tokens comma-separated; offset counts f32 elements)
//   features.bin  all feature frames, little-endian f32
//   manifest.json the generating spec, for provenance

const INDEX_FILE: &str = "index.txt";
const BLOB_FILE: &str = "features.bin";
const MANIFEST_FILE: &str = "manifest.json";

/// Writes `bytes` to `path` atomically (temp file + rename).
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut index = String::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for utt in &dataset.utterances {
        let tokens: Vec<String> = utt.reference.iter().map(|t| t.to_string()).collect();
        index.push_str(&format!(
            "{} {} {} {} {} {}\n",
            utt.id,
            utt.group,
            tokens.join(","),
            offset,
            utt.n_frames,
            utt.d_feat
        ));
        for &v in &utt.features {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += utt.features.len();
    }
    atomic_write(&path.join(INDEX_FILE), index.as_bytes())?;
    atomic_write(&path.join(BLOB_FILE), &blob)?;
    let manifest = serde_json::to_string_pretty(&dataset.spec)
        .map_err(|e| Error::contract(format!("manifest encoding failed: {e}")))?;
    atomic_write(&path.join(MANIFEST_FILE), manifest.as_bytes())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let index_path = path.join(INDEX_FILE);
    let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let blob_path = path.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() % 4 != 0 {
        return Err(Error::contract(format!(
            "feature blob {} is truncated: {} bytes is not a multiple of 4",
            blob_path.display(),
            blob.len()
        )));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let parse_err = |line: usize, msg: String| Error::Parse {
        path: index_path.display().to_string(),
        line,
        msg,
    };

    let mut utterances = Vec::new();
    let mut expected_offset = 0usize;
    for (lineno, line) in index.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_err(
                lineno,
                format!("expected 6 fields, found {}", fields.len()),
            ));
        }
        let reference: Vec<usize> = fields[2]
            .split(',')
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(lineno, format!("bad token list: {e}")))?;
        let offset: usize = fields[3]
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad offset: {e}")))?;
        let n_frames: usize = fields[4]
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad frame count: {e}")))?;
        let d_feat: usize = fields[5]
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad feature dim: {e}")))?;
        if offset != expected_offset {
            return Err(Error::contract(format!(
                "index/blob mismatch at {}:{}: offset {} but {} elements written so far",
                index_path.display(),
                lineno,
                offset,
                expected_offset
            )));
        }
        let len = n_frames * d_feat;
        if offset + len > floats.len() {
            return Err(Error::contract(format!(
                "index/blob mismatch at {}:{}: record ends at {} but blob has {} elements",
                index_path.display(),
                lineno,
                offset + len,
                floats.len()
            )));
        }
        utterances.push(Utterance {
            id: fields[0].to_string(),
            group: fields[1].to_string(),
            features: floats[offset..offset + len].to_vec(),
            n_frames,
            d_feat,
            reference,
        });
        expected_offset += len;
    }
    if expected_offset != floats.len() {
        return Err(Error::contract(format!(
            "index/blob mismatch: index covers {} elements but blob holds {}",
            expected_offset,
            floats.len()
        )));
    }
    let manifest_path = path.join(MANIFEST_FILE);
    let spec = match fs::read_to_string(&manifest_path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?,
        Err(_) => SyntheticSpec::default(),
    };
    Ok(Dataset { spec, utterances })
}

// ── Batching ────────────────────────────────────────────────────────────

/// A padded batch. Padding frames and tokens carry mask = false and must
/// never influence losses or decoding.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub t_max: usize,
    pub u_max: usize,
    pub d_feat: usize,
    /// `B x t_max x d_feat`, f64, zero-padded.
    pub features: Vec<f64>,
    pub frame_mask: Vec<bool>,
    pub frame_lens: Vec<usize>,
    /// `B x u_max`, padded with [`vocab::PAD`].
    pub tokens: Vec<usize>,
    pub token_mask: Vec<bool>,
    pub token_lens: Vec<usize>,
    pub groups: Vec<String>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// Unpadded feature matrix of batch member `i`.
    pub fn member_features(&self, i: usize) -> Vec<f64> {
        let row = &self.features[i * self.t_max * self.d_feat..(i + 1) * self.t_max * self.d_feat];
        row[..self.frame_lens[i] * self.d_feat].to_vec()
    }

    /// Unpadded reference tokens of batch member `i`.
    pub fn member_tokens(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.u_max..i * self.u_max + self.token_lens[i]]
    }
}

/// Splits the dataset into padded batches with a deterministic per-epoch
/// shuffle derived from `seed` and `epoch`.
pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(epoch)));
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&Utterance> = chunk.iter().map(|&i| &dataset.utterances[i]).collect();
            let t_max = members.iter().map(|u| u.n_frames).max().unwrap_or(0);
            let u_max = members.iter().map(|u| u.reference.len()).max().unwrap_or(0);
            let d_feat = members.first().map(|u| u.d_feat).unwrap_or(0);
            let b = members.len();
            let mut features = vec![0.0f64; b * t_max * d_feat];
            let mut frame_mask = vec![false; b * t_max];
            let mut tokens = vec![vocab::PAD; b * u_max];
            let mut token_mask = vec![false; b * u_max];
            for (i, utt) in members.iter().enumerate() {
                for (j, &v) in utt.features.iter().enumerate() {
                    features[i * t_max * d_feat + j] = v as f64;
                }
                for t in 0..utt.n_frames {
                    frame_mask[i * t_max + t] = true;
                }
                for (j, &tok) in utt.reference.iter().enumerate() {
                    tokens[i * u_max + j] = tok;
                    token_mask[i * u_max + j] = true;
                }
            }
            Batch {
                indices: chunk.to_vec(),
                t_max,
                u_max,
                d_feat,
                features,
                frame_mask,
                frame_lens: members.iter().map(|u| u.n_frames).collect(),
                tokens,
                token_mask,
                token_lens: members.iter().map(|u| u.reference.len()).collect(),
                groups: members.iter().map(|u| u.group.clone()).collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec, 20).unwrap();
        let b = generate(&spec, 20).unwrap();
        assert_eq!(a.utterances, b.utterances);
    }

    #[test]
    fn zero_noise_fixed_rate_repeats_prototypes() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            frames_per_token: [3, 3],
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec, 5).unwrap();
        for utt in &ds.utterances {
            assert_eq!(utt.n_frames, 3 * utt.reference.len());
            for (t, _) in utt.reference.iter().enumerate() {
                let base = t * 3 * utt.d_feat;
                let first = &utt.features[base..base + utt.d_feat];
                for r in 1..3 {
                    let frame =
                        &utt.features[base + r * utt.d_feat..base + (r + 1) * utt.d_feat];
                    assert_eq!(first, frame);
                }
            }
        }
    }

    #[test]
    fn lengths_and_frame_counts_respect_bounds() {
        let spec = SyntheticSpec::default();
        let ds = generate(&spec, 50).unwrap();
        for utt in &ds.utterances {
            let u = utt.reference.len();
            assert!(u >= spec.length_range[0] && u <= spec.length_range[1]);
            assert!(utt.n_frames >= u * spec.frames_per_token[0]);
            assert!(utt.n_frames <= u * spec.frames_per_token[1]);
            for (pos, &tok) in utt.reference.iter().enumerate() {
                if (pos + 1) % spec.word_separator_period == 0 {
                    assert_eq!(tok, vocab::SEP);
                } else {
                    assert!(tok >= vocab::CONTENT_BASE);
                    assert!(tok < vocab::required_vocab(spec.n_content_tokens));
                }
            }
        }
    }

    #[test]
    fn groups_use_distinct_prototype_tables() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let a = Prototypes::build(&spec, 0);
        let b = Prototypes::build(&spec, 1);
        assert_ne!(a.rows, b.rows);
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&SyntheticSpec::default(), 12).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.utterances, back.utterances);
        assert_eq!(ds.spec, back.spec);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&SyntheticSpec::default(), 4).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 8]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    #[test]
    fn malformed_index_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&SyntheticSpec::default(), 2).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let index_path = dir.path().join(INDEX_FILE);
        let mut index = fs::read_to_string(&index_path).unwrap();
        index.push_str("broken line\n");
        fs::write(&index_path, index).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn offset_mismatch_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&SyntheticSpec::default(), 3).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let index_path = dir.path().join(INDEX_FILE);
        let index = fs::read_to_string(&index_path).unwrap();
        let mut lines: Vec<String> = index.lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[1].split_whitespace().map(String::from).collect();
        fields[3] = "999999".to_string();
        lines[1] = fields.join(" ");
        fs::write(&index_path, lines.join("\n")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    #[test]
    fn batch_of_one_matches_raw_utterance() {
        let ds = generate(&SyntheticSpec::default(), 3).unwrap();
        let batches = make_batches(&ds, 1, 7, 0);
        assert_eq!(batches.len(), 3);
        for batch in &batches {
            let utt = &ds.utterances[batch.indices[0]];
            assert_eq!(batch.member_features(0), utt.features_f64());
            assert_eq!(batch.member_tokens(0), utt.reference.as_slice());
            assert!(batch.frame_mask.iter().all(|&m| m));
            assert!(batch.token_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn epoch_shuffles_differ_but_reproduce() {
        let ds = generate(&SyntheticSpec::default(), 64).unwrap();
        let flat = |e: u64| -> Vec<usize> {
            make_batches(&ds, 8, 5, e).iter().flat_map(|b| b.indices.clone()).collect()
        };
        assert_ne!(flat(0), flat(1));
        assert_eq!(flat(0), flat(0));
    }

    #[test]
    fn padding_positions_are_masked() {
        let ds = generate(&SyntheticSpec::default(), 16).unwrap();
        for batch in make_batches(&ds, 4, 3, 0) {
            for i in 0..batch.size() {
                for t in 0..batch.t_max {
                    assert_eq!(batch.frame_mask[i * batch.t_max + t], t < batch.frame_lens[i]);
                }
                for u in 0..batch.u_max {
                    assert_eq!(batch.token_mask[i * batch.u_max + u], u < batch.token_lens[i]);
                    if u >= batch.token_lens[i] {
                        assert_eq!(batch.tokens[i * batch.u_max + u], vocab::PAD);
                    }
                }
            }
        }
    }
}
