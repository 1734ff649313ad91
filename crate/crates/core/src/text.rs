//! Prompt library, matching/non-matching pair sampling and the frozen text
//! encoder.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::l2_normalize;

/// The library shipped with the crate: 64 prompts for each image type.
pub const DEFAULT_LIBRARY: &str = include_str!("../assets/prompts.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImageType {
    Real,
    Print,
    Replay,
}

impl ImageType {
    pub const ALL: [ImageType; 3] = [ImageType::Real, ImageType::Print, ImageType::Replay];

    /// Binary label: 1 for live faces, 0 for attacks.
    pub fn label(self) -> u8 {
        match self {
            ImageType::Real => 1,
            _ => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ImageType::Real => "real",
            ImageType::Print => "print",
            ImageType::Replay => "replay",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ImageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImageType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(ImageType::Real),
            "print" => Ok(ImageType::Print),
            "replay" => Ok(ImageType::Replay),
            other => Err(Error::invalid(format!("unknown image type {other:?}"))),
        }
    }
}

/// Which prompts may serve as the non-matching half of a pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NonMatchingPolicy {
    /// Any prompt whose type carries the opposite binary label.
    #[default]
    OppositeLabel,
    /// Any prompt of a different type, even one with the same label.
    AnyOtherType,
}

impl NonMatchingPolicy {
    fn admits(self, image: ImageType, other: ImageType) -> bool {
        match self {
            NonMatchingPolicy::OppositeLabel => image.label() != other.label(),
            NonMatchingPolicy::AnyOtherType => image != other,
        }
    }
}

impl FromStr for NonMatchingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opposite-label" => Ok(NonMatchingPolicy::OppositeLabel),
            "any-other-type" => Ok(NonMatchingPolicy::AnyOtherType),
            other => Err(Error::invalid(format!(
                "unknown non-matching policy {other:?}"
            ))),
        }
    }
}

impl fmt::Display for NonMatchingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NonMatchingPolicy::OppositeLabel => "opposite-label",
            NonMatchingPolicy::AnyOtherType => "any-other-type",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptLibrary {
    prompts: [Vec<String>; 3],
    active: Option<usize>,
}

impl PromptLibrary {
    pub fn shipped() -> Self {
        Self::parse(DEFAULT_LIBRARY, "<shipped>").expect("shipped library parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse `[type:<name>]` sections with one prompt per line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut prompts: [Vec<String>; 3] = Default::default();
        let mut seen = [false; 3];
        let mut current: Option<ImageType> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let loc = || format!("{origin}:{}", no + 1);
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("[type:") {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(loc(), "unterminated section header"))?;
                let ty: ImageType = name
                    .parse()
                    .map_err(|_| Error::parse(loc(), format!("unknown image type {name:?}")))?;
                if seen[ty.index()] {
                    return Err(Error::parse(loc(), format!("duplicate section {ty}")));
                }
                seen[ty.index()] = true;
                current = Some(ty);
                continue;
            }
            match current {
                Some(ty) => prompts[ty.index()].push(line.to_string()),
                None => return Err(Error::parse(loc(), "prompt before any section header")),
            }
        }
        for ty in ImageType::ALL {
            if !seen[ty.index()] {
                return Err(Error::parse(origin, format!("missing section {ty}")));
            }
            if prompts[ty.index()].is_empty() {
                return Err(Error::parse(origin, format!("section {ty} has no prompts")));
            }
        }
        Ok(PromptLibrary {
            prompts,
            active: None,
        })
    }

    /// Copy exposing only the first `n` prompts of each type.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let min = self.prompts.iter().map(Vec::len).min().unwrap_or(0);
        if n == 0 || n > min {
            return Err(Error::invalid(format!(
                "prompt count {n} outside 1..={min}"
            )));
        }
        Ok(PromptLibrary {
            prompts: self.prompts.clone(),
            active: Some(n),
        })
    }

    pub fn active(&self, ty: ImageType) -> &[String] {
        let all = &self.prompts[ty.index()];
        &all[..self.active.map_or(all.len(), |n| n.min(all.len()))]
    }

    pub fn stored(&self, ty: ImageType) -> &[String] {
        &self.prompts[ty.index()]
    }

    pub fn active_count(&self) -> Option<usize> {
        self.active
    }

    /// Every active prompt with its type, in type then file order.
    pub fn active_prompts(&self) -> impl Iterator<Item = (ImageType, &str)> {
        ImageType::ALL
            .into_iter()
            .flat_map(move |ty| self.active(ty).iter().map(move |p| (ty, p.as_str())))
    }

    fn non_matching_pool(
        &self,
        image: ImageType,
        policy: NonMatchingPolicy,
    ) -> Result<Vec<(ImageType, usize)>> {
        let pool: Vec<(ImageType, usize)> = ImageType::ALL
            .into_iter()
            .filter(|&t| policy.admits(image, t))
            .flat_map(|t| (0..self.active(t).len()).map(move |i| (t, i)))
            .collect();
        if pool.is_empty() {
            return Err(Error::invalid(format!(
                "no non-matching prompts available for {image}"
            )));
        }
        Ok(pool)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPair {
    pub matching: String,
    pub matching_type: ImageType,
    pub non_matching: String,
    pub non_matching_type: ImageType,
}

pub fn sample_prompt_pair<R: Rng>(
    lib: &PromptLibrary,
    image: ImageType,
    rng: &mut R,
) -> Result<PromptPair> {
    sample_prompt_pair_with(lib, image, NonMatchingPolicy::default(), rng)
}

pub fn sample_prompt_pair_with<R: Rng>(
    lib: &PromptLibrary,
    image: ImageType,
    policy: NonMatchingPolicy,
    rng: &mut R,
) -> Result<PromptPair> {
    let own = lib.active(image);
    let m = &own[rng.random_range(0..own.len())];
    let pool = lib.non_matching_pool(image, policy)?;
    let (nt, ni) = pool[rng.random_range(0..pool.len())];
    Ok(PromptPair {
        matching: m.clone(),
        matching_type: image,
        non_matching: lib.active(nt)[ni].clone(),
        non_matching_type: nt,
    })
}

/// One pair per image. Within the batch each pool is drawn without
/// replacement, reshuffling only once it runs dry.
pub fn sample_batch_pairs<R: Rng>(
    lib: &PromptLibrary,
    images: &[ImageType],
    policy: NonMatchingPolicy,
    rng: &mut R,
) -> Result<Vec<PromptPair>> {
    let mut matching: HashMap<ImageType, Deck<usize>> = HashMap::new();
    let mut non_matching: HashMap<ImageType, Deck<(ImageType, usize)>> = HashMap::new();
    let mut out = Vec::with_capacity(images.len());
    for &ty in images {
        if let std::collections::hash_map::Entry::Vacant(e) = non_matching.entry(ty) {
            e.insert(Deck::new(lib.non_matching_pool(ty, policy)?));
        }
        let mi = matching
            .entry(ty)
            .or_insert_with(|| Deck::new((0..lib.active(ty).len()).collect()))
            .draw(rng);
        let (nt, ni) = non_matching.get_mut(&ty).expect("inserted above").draw(rng);
        out.push(PromptPair {
            matching: lib.active(ty)[mi].clone(),
            matching_type: ty,
            non_matching: lib.active(nt)[ni].clone(),
            non_matching_type: nt,
        });
    }
    Ok(out)
}

struct Deck<T> {
    items: Vec<T>,
    order: Vec<usize>,
}

impl<T: Copy> Deck<T> {
    fn new(items: Vec<T>) -> Self {
        Deck {
            items,
            order: Vec::new(),
        }
    }

    fn draw<R: Rng>(&mut self, rng: &mut R) -> T {
        if self.order.is_empty() {
            self.order = (0..self.items.len()).collect();
            self.order.shuffle(rng);
        }
        self.items[self.order.pop().expect("refilled")]
    }
}

/// SHA-256 of the UTF-8 prompt, lowercase hex.
pub fn prompt_digest(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Gaussian vector seeded by the digest of the whole prompt.
    Hash,
    /// Sum of per-word hash vectors, so prompts sharing words share
    /// direction.
    TokenHash,
    /// Embeddings read from a file keyed by prompt digest.
    Table,
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hash" => Ok(EncoderKind::Hash),
            "token-hash" => Ok(EncoderKind::TokenHash),
            "table" => Ok(EncoderKind::Table),
            other => Err(Error::invalid(format!("unknown encoder kind {other:?}"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Hash => "hash",
            EncoderKind::TokenHash => "token-hash",
            EncoderKind::Table => "table",
        })
    }
}

/// Frozen text encoder. It has no trainable state; `calls` counts encode
/// requests so callers can assert a code path never touches text.
#[derive(Debug)]
pub struct TextEncoder {
    kind: EncoderKind,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    calls: AtomicUsize,
}

impl TextEncoder {
    pub fn hashed(kind: EncoderKind, dim: usize) -> Result<Self> {
        if kind == EncoderKind::Table {
            return Err(Error::invalid("table encoders are built from a file"));
        }
        if dim == 0 {
            return Err(Error::invalid("encoder width must be positive"));
        }
        Ok(TextEncoder {
            kind,
            dim,
            table: HashMap::new(),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn load_table(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_table(&text, &path.display().to_string())
    }

    /// Lines of `<digest-hex>,<v1>,…,<vD>`. Rows are normalized on load.
    pub fn parse_table(text: &str, origin: &str) -> Result<Self> {
        let mut table = HashMap::new();
        let mut dim = None;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("{origin}:{}", no + 1);
            let mut fields = line.split(',');
            let key = fields.next().unwrap_or_default().trim().to_ascii_lowercase();
            if key.len() != 64 || !key.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(Error::parse(loc, "expected a 64-digit hex digest"));
            }
            let values: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(loc.clone(), e.to_string()))?;
            if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(loc, "embedding needs finite values"));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::parse(
                        loc,
                        format!("width {} differs from {d}", values.len()),
                    ))
                }
                _ => {}
            }
            let unit = l2_normalize(&values)?;
            table.insert(key, unit);
        }
        let dim = dim.ok_or_else(|| Error::parse(origin, "empty embedding table"))?;
        Ok(TextEncoder {
            kind: EncoderKind::Table,
            dim,
            table,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn encode(&self, prompt: &str) -> Result<Vec<f64>> {
        if prompt.is_empty() {
            return Err(Error::invalid("cannot encode an empty prompt"));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        match self.kind {
            EncoderKind::Hash => l2_normalize(&gaussian(prompt.as_bytes(), self.dim)),
            EncoderKind::TokenHash => {
                let mut acc = vec![0.0; self.dim];
                let lower = prompt.to_lowercase();
                let words = lower
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|w| !w.is_empty());
                for w in words {
                    for (a, g) in acc.iter_mut().zip(gaussian(w.as_bytes(), self.dim)) {
                        *a += g;
                    }
                }
                l2_normalize(&acc).or_else(|_| l2_normalize(&gaussian(prompt.as_bytes(), self.dim)))
            }
            EncoderKind::Table => self
                .table
                .get(&prompt_digest(prompt))
                .cloned()
                .ok_or_else(|| Error::UnknownPrompt(prompt.to_string())),
        }
    }
}

fn gaussian(bytes: &[u8], dim: usize) -> Vec<f64> {
    let seed: [u8; 32] = Sha256::digest(bytes).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn shipped_library_has_64_per_type() {
        let lib = PromptLibrary::shipped();
        for ty in ImageType::ALL {
            assert_eq!(lib.stored(ty).len(), 64);
            assert_eq!(lib.active(ty).len(), 64);
        }
        assert_eq!(lib.stored(ImageType::Real)[0], "A real photo of a person");
        assert_eq!(lib.stored(ImageType::Replay)[63], "A photo of a digital signboard showing a portrait");
    }

    #[test]
    fn missing_section_is_rejected() {
        let text = "[type:real]\na\n[type:print]\nb\n";
        assert!(matches!(
            PromptLibrary::parse(text, "t"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn malformed_files() {
        for text in [
            "orphan\n[type:real]\na\n[type:print]\nb\n[type:replay]\nc\n",
            "[type:real]\na\n[type:print]\nb\n[type:mask]\nc\n",
            "[type:real]\n[type:print]\nb\n[type:replay]\nc\n",
            "[type:real\na\n",
            "[type:real]\na\n[type:real]\nb\n[type:print]\nb\n[type:replay]\nc\n",
        ] {
            assert!(PromptLibrary::parse(text, "t").is_err(), "{text}");
        }
    }

    #[test]
    fn blank_lines_ignored() {
        let lib = PromptLibrary::parse("\n[type:real]\n\na\n\n[type:print]\nb\n[type:replay]\nc\nd\n", "t").unwrap();
        assert_eq!(lib.active(ImageType::Replay), &["c", "d"]);
    }

    #[test]
    fn truncation_exposes_prefix() {
        let lib = PromptLibrary::shipped().truncated(4).unwrap();
        for ty in ImageType::ALL {
            assert_eq!(lib.active(ty), &lib.stored(ty)[..4]);
        }
        assert!(PromptLibrary::shipped().truncated(0).is_err());
        assert!(PromptLibrary::shipped().truncated(65).is_err());
    }

    #[test]
    fn print_pairs_take_non_matching_from_real() {
        let lib = PromptLibrary::shipped();
        let mut r = rng(0);
        for _ in 0..2000 {
            let p = sample_prompt_pair(&lib, ImageType::Print, &mut r).unwrap();
            assert_eq!(p.non_matching_type, ImageType::Real);
            assert!(lib.active(ImageType::Print).contains(&p.matching));
            assert!(lib.active(ImageType::Real).contains(&p.non_matching));
        }
    }

    #[test]
    fn real_pairs_cover_both_attack_types() {
        let lib = PromptLibrary::shipped();
        let mut r = rng(1);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..500 {
            let p = sample_prompt_pair(&lib, ImageType::Real, &mut r).unwrap();
            assert_ne!(p.non_matching_type, ImageType::Real);
            seen.insert(p.non_matching_type);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn fixed_seed_repeats_pair() {
        let lib = PromptLibrary::shipped();
        let a = sample_prompt_pair(&lib, ImageType::Replay, &mut rng(9)).unwrap();
        let b = sample_prompt_pair(&lib, ImageType::Replay, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn any_other_type_allows_same_label() {
        let lib = PromptLibrary::shipped();
        let mut r = rng(2);
        let mut saw_replay = false;
        for _ in 0..500 {
            let p = sample_prompt_pair_with(&lib, ImageType::Print, NonMatchingPolicy::AnyOtherType, &mut r)
                .unwrap();
            assert_ne!(p.non_matching_type, ImageType::Print);
            saw_replay |= p.non_matching_type == ImageType::Replay;
        }
        assert!(saw_replay);
    }

    #[test]
    fn batch_pairs_without_replacement() {
        let lib = PromptLibrary::shipped().truncated(4).unwrap();
        let images = vec![ImageType::Print; 4];
        let pairs = sample_batch_pairs(&lib, &images, NonMatchingPolicy::OppositeLabel, &mut rng(3)).unwrap();
        let mut m: Vec<&str> = pairs.iter().map(|p| p.matching.as_str()).collect();
        m.sort();
        m.dedup();
        assert_eq!(m.len(), 4);
        let mut n: Vec<&str> = pairs.iter().map(|p| p.non_matching.as_str()).collect();
        n.sort();
        n.dedup();
        assert_eq!(n.len(), 4);
    }

    #[test]
    fn encoders_are_deterministic_unit_vectors() {
        for kind in [EncoderKind::Hash, EncoderKind::TokenHash] {
            let enc = TextEncoder::hashed(kind, 16).unwrap();
            let a = enc.encode("A printed photo").unwrap();
            let b = enc.encode("A printed photo").unwrap();
            assert_eq!(a, b);
            let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(enc.calls(), 2);
            assert!(enc.encode("").is_err());
        }
    }

    #[test]
    fn shipped_prompts_map_to_distinct_vectors() {
        let lib = PromptLibrary::shipped();
        let mut distinct: Vec<&str> = lib.active_prompts().map(|(_, p)| p).collect();
        distinct.sort();
        distinct.dedup();
        for kind in [EncoderKind::Hash, EncoderKind::TokenHash] {
            let enc = TextEncoder::hashed(kind, 16).unwrap();
            let vecs: Vec<Vec<f64>> = distinct.iter().map(|p| enc.encode(p).unwrap()).collect();
            let mut min = f64::INFINITY;
            for i in 0..vecs.len() {
                for j in i + 1..vecs.len() {
                    min = min.min(crate::numerics::euclidean(&vecs[i], &vecs[j]));
                }
            }
            assert!(min > 0.0, "{kind}: {min}");
        }
    }

    #[test]
    fn table_lookup() {
        let d = prompt_digest("hello");
        let text = format!("{d},3,4\n");
        let enc = TextEncoder::parse_table(&text, "t").unwrap();
        assert_eq!(enc.dim(), 2);
        assert_eq!(enc.encode("hello").unwrap(), vec![0.6, 0.8]);
        assert!(matches!(enc.encode("other"), Err(Error::UnknownPrompt(_))));
        assert!(TextEncoder::parse_table("abc,1\n", "t").is_err());
        let ragged = format!("{d},1,2\n{},1\n", prompt_digest("x"));
        assert!(TextEncoder::parse_table(&ragged, "t").is_err());
    }

    #[test]
    fn digest_is_sha256() {
        assert_eq!(
            prompt_digest("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
