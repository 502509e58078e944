//! Augmentation groups: the original sample followed by its transformed
//! copies. Image groups use random crop and horizontal flip, text groups
//! use greedy masked-token substitution, vector groups use Gaussian jitter.
//!
//! All randomness comes from [`stream`], so a group is a pure function of
//! the run seed, the sample id and the member index.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Independent generator for one `(run_seed, sample_id, aug_index, tag)`.
pub fn stream(run_seed: u64, sample_id: &str, aug_index: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update((sample_id.len() as u64).to_le_bytes());
    h.update(sample_id.as_bytes());
    h.update(aug_index.to_le_bytes());
    h.update(tag.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// A `C×H×W` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Image {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let img = Image { shape, data };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.shape;
        if c * h * w != self.data.len() {
            return Err(Error::Shape(format!(
                "image shape {:?} needs {} values, got {}",
                self.shape,
                c * h * w,
                self.data.len()
            )));
        }
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {} outside [0, 1]", v)));
        }
        Ok(())
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        let [_, h, w] = self.shape;
        self.data[(c * h + y) * w + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Image(Image),
    Text { tokens: Vec<u32> },
    Vector { features: Vec<f32> },
}

impl Payload {
    pub fn kind(&self) -> Kind {
        match self {
            Payload::Image(_) => Kind::Image,
            Payload::Text { .. } => Kind::Text,
            Payload::Vector { .. } => Kind::Vector,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Image,
    Text,
    Vector,
}

/// A class index, a real-valued target or a distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Real(f64),
    Soft(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub payload: Payload,
    pub label: Target,
}

/// An original sample and its augmentation set; `members[0]` is the
/// original. Without `member_targets` every member carries `label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedGroup {
    pub id: String,
    pub kind: Kind,
    pub original: Payload,
    pub label: Target,
    pub members: Vec<Payload>,
    #[serde(default)]
    pub member_targets: Option<Vec<Target>>,
}

impl AugmentedGroup {
    /// A group holding only the original.
    pub fn singleton(sample: &Sample) -> Self {
        AugmentedGroup {
            id: sample.id.clone(),
            kind: sample.payload.kind(),
            original: sample.payload.clone(),
            label: sample.label.clone(),
            members: vec![sample.payload.clone()],
            member_targets: None,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn target(&self, i: usize) -> &Target {
        match &self.member_targets {
            Some(t) => &t[i],
            None => &self.label,
        }
    }

    pub fn original_sample(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            payload: self.original.clone(),
            label: self.label.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::GroupInvariant {
            id: self.id.clone(),
            message,
        };
        if self.members.is_empty() {
            return Err(fail("no members".into()));
        }
        if self.members[0] != self.original {
            return Err(fail("members[0] is not the original".into()));
        }
        if let Some(t) = &self.member_targets {
            if t.len() != self.members.len() {
                return Err(fail(format!(
                    "{} member targets for {} members",
                    t.len(),
                    self.members.len()
                )));
            }
            if t[0] != self.label {
                return Err(fail("the original's target differs from its label".into()));
            }
        }
        for (i, m) in self.members.iter().enumerate() {
            if m.kind() != self.kind {
                return Err(fail(format!(
                    "member {} is {:?}, group is {:?}",
                    i,
                    m.kind(),
                    self.kind
                )));
            }
            if let Payload::Image(img) = m {
                img.validate().map_err(|e| fail(format!("member {}: {}", i, e)))?;
            }
        }
        let targets = std::iter::once(&self.label).chain(self.member_targets.iter().flatten());
        for t in targets {
            if let Target::Soft(p) = t {
                let sum: f64 = p.iter().sum();
                if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                    return Err(fail(format!("soft target {:?} is not a distribution", p)));
                }
            }
        }
        Ok(())
    }
}

/// Zero-pads by `pad` and crops back to `H×W` at an offset drawn from
/// `[0, 2·pad]²`.
pub fn pad_crop<R: Rng + ?Sized>(img: &Image, pad: usize, rng: &mut R) -> Image {
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    crop_at(img, pad, dy, dx)
}

/// The crop of the `pad`-padded image whose top-left corner is `(dy, dx)`.
pub fn crop_at(img: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let [c, h, w] = img.shape;
    let mut data = vec![0.0f32; img.data.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y + dy;
            if sy < pad || sy - pad >= h {
                continue;
            }
            for x in 0..w {
                let sx = x + dx;
                if sx < pad || sx - pad >= w {
                    continue;
                }
                data[(ch * h + y) * w + x] = img.at(ch, sy - pad, sx - pad);
            }
        }
    }
    Image { shape: img.shape, data }
}

/// Mirrors along the width with probability `p`.
pub fn hflip<R: Rng + ?Sized>(img: &Image, rng: &mut R, p: f64) -> Image {
    if rng.random::<f64>() < p {
        mirror(img)
    } else {
        img.clone()
    }
}

pub fn mirror(img: &Image) -> Image {
    let [_, _, w] = img.shape;
    let mut data = img.data.clone();
    for row in data.chunks_mut(w.max(1)) {
        row.reverse();
    }
    Image { shape: img.shape, data }
}

/// Original plus `n_aug` crop-and-flip copies; every member keeps the
/// original label.
pub fn build_image_group(sample: &Sample, n_aug: usize, pad: usize, seed: u64) -> Result<AugmentedGroup> {
    let Payload::Image(img) = &sample.payload else {
        return Err(Error::InvalidArgument(format!("sample {} is not an image", sample.id)));
    };
    let mut group = AugmentedGroup::singleton(sample);
    for i in 1..=n_aug {
        let mut rng = stream(seed, &sample.id, i as u64, "image");
        let cropped = pad_crop(img, pad, &mut rng);
        group.members.push(Payload::Image(hflip(&cropped, &mut rng, 0.5)));
    }
    Ok(group)
}

/// Original plus `n_aug` copies with i.i.d. `N(0, sigma²)` feature noise.
pub fn build_vector_group(sample: &Sample, n_aug: usize, sigma: f64, seed: u64) -> Result<AugmentedGroup> {
    let Payload::Vector { features } = &sample.payload else {
        return Err(Error::InvalidArgument(format!(
            "sample {} is not a feature vector",
            sample.id
        )));
    };
    let noise =
        Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("jitter sigma {}: {}", sigma, e)))?;
    let mut group = AugmentedGroup::singleton(sample);
    for i in 1..=n_aug {
        let mut rng = stream(seed, &sample.id, i as u64, "jitter");
        let features = features
            .iter()
            .map(|&f| (f as f64 + noise.sample(&mut rng)) as f32)
            .collect();
        group.members.push(Payload::Vector { features });
    }
    Ok(group)
}

/// Placeholder for a masked position in sequences shown to a predictor.
pub const MASK: u32 = u32::MAX;

/// A masked-token model: ranks the vocabulary at one masked position.
pub trait TokenPredictor {
    fn vocab_size(&self) -> usize;

    /// The `depth` most likely tokens at `pos`, best first. `tokens[pos]`
    /// is [`MASK`]; `original` is the token that was masked there.
    fn rank(&self, tokens: &[u32], pos: usize, original: u32, depth: usize) -> Vec<u32>;
}

/// Ranks by corpus frequency, ties to the lower id. The masked token never
/// ranks first: if it would, it trades places with the runner-up.
#[derive(Debug, Clone)]
pub struct UnigramPredictor {
    order: Vec<u32>,
}

impl UnigramPredictor {
    pub fn from_corpus<'a, I>(vocab_size: usize, corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        let mut counts = vec![0u64; vocab_size];
        for seq in corpus {
            for &t in seq {
                let slot = counts.get_mut(t as usize).ok_or_else(|| {
                    Error::InvalidArgument(format!("token {} outside vocabulary of {}", t, vocab_size))
                })?;
                *slot += 1;
            }
        }
        let mut order: Vec<u32> = (0..vocab_size as u32).collect();
        order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
        Ok(UnigramPredictor { order })
    }
}

impl TokenPredictor for UnigramPredictor {
    fn vocab_size(&self) -> usize {
        self.order.len()
    }

    fn rank(&self, _tokens: &[u32], _pos: usize, original: u32, depth: usize) -> Vec<u32> {
        let mut ranked = self.order.clone();
        if ranked.len() > 1 && ranked[0] == original {
            ranked.swap(0, 1);
        }
        ranked.truncate(depth);
        ranked
    }
}

/// Number of masked positions: `max(1, round(ratio·len))`, at most `len`.
pub fn mask_count(len: usize, mask_ratio: f64) -> usize {
    ((mask_ratio * len as f64).round() as usize).max(1).min(len)
}

/// Greedy masked-token generation. `k` positions are drawn once per
/// original. In the `i`-th sequence the first drawn position takes the
/// predictor's `i`-th ranked token and the others, left to right, take the
/// top-ranked token given what has been filled so far.
pub fn greedy_text_augment<P: TokenPredictor + ?Sized>(
    tokens: &[u32],
    mask_ratio: f64,
    n_aug: usize,
    predictor: &P,
    seed: u64,
    sample_id: &str,
) -> Result<Vec<Vec<u32>>> {
    if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {} outside (0, 1]",
            mask_ratio
        )));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!("sample {} has no tokens", sample_id)));
    }
    if n_aug == 0 {
        return Ok(Vec::new());
    }
    let k = mask_count(tokens.len(), mask_ratio);
    let mut rng = stream(seed, sample_id, 0, "mask");
    let drawn = index::sample(&mut rng, tokens.len(), k).into_vec();
    let first = drawn[0];
    let mut rest = drawn[1..].to_vec();
    rest.sort_unstable();

    let mut masked = tokens.to_vec();
    for &p in &drawn {
        masked[p] = MASK;
    }
    let ranked = predictor.rank(&masked, first, tokens[first], n_aug);
    if ranked.len() < n_aug {
        return Err(Error::InvalidArgument(format!(
            "predictor ranks {} tokens at position {}, {} augmentations requested",
            ranked.len(),
            first,
            n_aug
        )));
    }
    let mut out = Vec::with_capacity(n_aug);
    for &choice in &ranked[..n_aug] {
        let mut z = masked.clone();
        z[first] = choice;
        for &p in &rest {
            let best = predictor.rank(&z, p, tokens[p], 1);
            z[p] = *best
                .first()
                .ok_or_else(|| Error::InvalidArgument(format!("predictor returned no token at position {}", p)))?;
        }
        out.push(z);
    }
    Ok(out)
}

pub fn build_text_group<P: TokenPredictor + ?Sized>(
    sample: &Sample,
    n_aug: usize,
    mask_ratio: f64,
    predictor: &P,
    seed: u64,
) -> Result<AugmentedGroup> {
    let Payload::Text { tokens } = &sample.payload else {
        return Err(Error::InvalidArgument(format!("sample {} is not text", sample.id)));
    };
    let mut group = AugmentedGroup::singleton(sample);
    for z in greedy_text_augment(tokens, mask_ratio, n_aug, predictor, seed, &sample.id)? {
        group.members.push(Payload::Text { tokens: z });
    }
    Ok(group)
}

/// Reads a JSON-lines group file. Blank lines are skipped.
pub fn load_offline_groups(path: &Path) -> Result<Vec<AugmentedGroup>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut groups = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let group: AugmentedGroup = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        group.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        groups.push(group);
    }
    Ok(groups)
}

pub fn write_groups(path: &Path, groups: &[AugmentedGroup]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    for g in groups {
        serde_json::to_writer(&mut out, g)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    out.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Image {
        let n = c * h * w;
        Image::new([c, h, w], (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn streams_are_keyed() {
        let a: u64 = stream(1, "s", 0, "x").random();
        assert_eq!(a, stream(1, "s", 0, "x").random::<u64>());
        assert_ne!(a, stream(2, "s", 0, "x").random::<u64>());
        assert_ne!(a, stream(1, "t", 0, "x").random::<u64>());
        assert_ne!(a, stream(1, "s", 1, "x").random::<u64>());
        assert_ne!(a, stream(1, "s", 0, "y").random::<u64>());
    }

    #[test]
    fn crop_cases() {
        let img = ramp(3, 32, 32);
        let mut rng = stream(0, "a", 0, "t");
        assert_eq!(pad_crop(&img, 0, &mut rng), img);
        assert_eq!(crop_at(&img, 4, 4, 4), img);
        let shifted = crop_at(&img, 4, 0, 0);
        assert_eq!(shifted.shape, img.shape);
        assert_eq!(shifted.at(0, 0, 0), 0.0);
        assert_eq!(shifted.at(1, 4, 4), img.at(1, 0, 0));
        let out = pad_crop(&img, 4, &mut rng);
        assert!(out.validate().is_ok());
    }

    #[test]
    fn flip_cases() {
        let img = Image::new([1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = stream(0, "a", 0, "t");
        assert_eq!(hflip(&img, &mut rng, 0.0), img);
        let once = hflip(&img, &mut rng, 1.0);
        assert_eq!(once.data, vec![0.2, 0.1, 0.4, 0.3]);
        assert_eq!(hflip(&once, &mut rng, 1.0), img);
    }

    #[test]
    fn image_group_shape_and_replay() {
        let s = Sample {
            id: "img-7".into(),
            payload: Payload::Image(ramp(3, 8, 8)),
            label: Target::Class(3),
        };
        let g0 = build_image_group(&s, 0, 4, 1).unwrap();
        assert_eq!(g0.len(), 1);
        let g = build_image_group(&s, 10, 4, 1).unwrap();
        assert_eq!(g.len(), 11);
        assert!(g.validate().is_ok());
        assert_eq!(g, build_image_group(&s, 10, 4, 1).unwrap());
        assert!((0..g.len()).all(|i| g.target(i) == &Target::Class(3)));
    }

    struct Table;

    impl TokenPredictor for Table {
        fn vocab_size(&self) -> usize {
            6
        }
        fn rank(&self, _: &[u32], _: usize, _: u32, depth: usize) -> Vec<u32> {
            vec![5, 4, 3, 2, 1, 0].into_iter().take(depth).collect()
        }
    }

    #[test]
    fn greedy_constant_table() {
        let tokens = [0u32, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        let out = greedy_text_augment(&tokens, 0.4, 4, &Table, 3, "t").unwrap();
        assert_eq!(out.len(), 4);
        let masked: Vec<usize> = (0..tokens.len())
            .filter(|&p| out.iter().any(|z| z[p] != tokens[p]))
            .collect();
        assert!(masked.len() <= 4);
        let p1 = (0..tokens.len())
            .find(|&p| out.iter().map(|z| z[p]).collect::<std::collections::HashSet<_>>().len() == 4)
            .unwrap();
        for (i, z) in out.iter().enumerate() {
            assert_eq!(z[p1], 5 - i as u32);
        }
        assert!(greedy_text_augment(&tokens, 0.4, 7, &Table, 3, "t").is_err());
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(2, 0.01), 1);
        assert_eq!(mask_count(10, 0.4), 4);
        assert_eq!(mask_count(7, 0.4), 3);
        assert_eq!(mask_count(3, 1.0), 3);
    }

    #[test]
    fn unigram_avoids_original() {
        let corpus: Vec<Vec<u32>> = vec![vec![2, 2, 2, 1, 1, 0]];
        let p = UnigramPredictor::from_corpus(3, corpus.iter().map(|v| v.as_slice())).unwrap();
        assert_eq!(p.rank(&[MASK], 0, 0, 3), vec![2, 1, 0]);
        assert_eq!(p.rank(&[MASK], 0, 2, 3), vec![1, 2, 0]);
        let z = greedy_text_augment(&[2, 2], 0.01, 1, &p, 0, "x").unwrap();
        assert_eq!(z[0].iter().zip([2, 2]).filter(|(a, b)| **a != *b).count(), 1);
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        let s = Sample {
            id: "a".into(),
            payload: Payload::Image(ramp(1, 3, 3)),
            label: Target::Class(1),
        };
        let mut t = AugmentedGroup::singleton(&Sample {
            id: "b".into(),
            payload: Payload::Text { tokens: vec![1, 2] },
            label: Target::Real(0.5),
        });
        t.members.push(Payload::Text { tokens: vec![3, 2] });
        t.member_targets = Some(vec![Target::Real(0.5), Target::Soft(vec![0.25, 0.75])]);
        let groups = vec![build_image_group(&s, 2, 1, 9).unwrap(), t];
        write_groups(&path, &groups).unwrap();
        assert_eq!(load_offline_groups(&path).unwrap(), groups);

        std::fs::write(&path, "").unwrap();
        assert!(load_offline_groups(&path).unwrap().is_empty());

        let good = serde_json::to_string(&groups[1]).unwrap();
        let bad = r#"{"id":"c","kind":"text","original":{"tokens":[1]},"label":0}"#;
        std::fs::write(&path, format!("{}\n{}\n", good, bad)).unwrap();
        match load_offline_groups(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("members"));
            }
            other => panic!("{:?}", other),
        }

        let wrong = r#"{"id":"d","kind":"text","original":{"tokens":[1]},"label":0,"members":[{"tokens":[2]}]}"#;
        std::fs::write(&path, wrong).unwrap();
        match load_offline_groups(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 1);
                assert!(message.contains("group d"));
            }
            other => panic!("{:?}", other),
        }
    }
}
