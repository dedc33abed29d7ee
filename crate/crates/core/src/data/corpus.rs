//! Synthetic tiered corpus: generation, on-disk layout and loading.
//!
//! ```text
//! <dir>/corpus.cfg                 seed and data section that produced it
//! <dir>/{train,dev,test}.tsv       manifests: path \t text \t lang \t n_frames
//! <dir>/frames/<split>/<lang>/<i>.bin
//! <dir>/text_pool.tsv              lang \t text
//! ```
//!
//! The unlabeled frame pool is procedural: utterance `i` is regenerated on
//! demand from the corpus seed, so it never has to be stored.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::lang::{language_specs, Acoustics, LangSpec, Tier};
use super::vocab::Vocab;
use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_frames, save_frames};
use crate::params::fnv1a;
use crate::tensor::Tensor;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

const LABELED: u64 = 1;
const UNLABELED: u64 = 2;
const TEXT: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub lang: usize,
    pub text: String,
    /// `[T, F]`
    pub frames: Tensor<f32>,
    /// Target sequence `[tag, chars..., eos]`.
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub text: String,
    pub lang: String,
    pub n_frames: usize,
}

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.path, self.text, self.lang, self.n_frames)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::Data(format!("manifest line needs 4 tab-separated fields: {line:?}")));
        }
        Ok(Self {
            path: f[0].to_string(),
            text: f[1].to_string(),
            lang: f[2].to_string(),
            n_frames: f[3]
                .parse()
                .map_err(|_| Error::Data(format!("bad frame count in manifest line {line:?}")))?,
        })
    }
}

fn stream_rng(seed: u64, stream: u64, lang: usize, index: usize) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(32);
    for v in [seed, stream, lang as u64, index as u64] {
        key.extend_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::seed_from_u64(fnv1a(&key))
}

fn sentence(spec: &LangSpec, cfg: &DataConfig, rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(cfg.words_min..=cfg.words_max);
    (0..n)
        .map(|_| spec.lexicon.choose(rng).unwrap().as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders `text` as frames: every character becomes 2-4 noisy copies of
/// its emission symbol's embedding; spaces become silence.
pub fn synthesize(spec: &LangSpec, ac: &Acoustics, text: &str, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let f = ac.feature_dim;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).unwrap();
    let mut data = Vec::new();
    for c in text.chars() {
        let sym = if c == ' ' {
            ac.silence()
        } else {
            spec.symbol_of(c).expect("text drawn from the language alphabet")
        };
        let reps = rng.gen_range(spec.repeat.0..=spec.repeat.1);
        for _ in 0..reps {
            for &v in ac.row(sym) {
                let e = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push((v + e) as f32);
            }
        }
    }
    let t = data.len() / f;
    Tensor::new(vec![t, f], data).expect("non-empty sentence")
}

/// Greedy inverse of [`synthesize`] with the true cipher: nearest symbol
/// per frame, collapse runs, map symbols back to letters.
pub fn inverse_cipher(spec: &LangSpec, ac: &Acoustics, frames: &Tensor<f32>) -> String {
    let f = ac.feature_dim;
    let mut out = String::new();
    let mut prev = None;
    for row in frames.data().chunks(f) {
        let s = ac.nearest(row);
        if Some(s) != prev {
            if s == ac.silence() {
                out.push(' ');
            } else {
                out.push(spec.letter_of(s).unwrap_or('?'));
            }
            prev = Some(s);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub seed: u64,
    pub config: DataConfig,
    pub langs: Vec<LangSpec>,
    pub acoustics: Acoustics,
    pub vocab: Vocab,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Number of train / dev / test utterances for a language of `count`.
pub fn split_sizes(cfg: &DataConfig, count: usize) -> [usize; 3] {
    let train = (count as f64 * cfg.train_frac).floor() as usize;
    let dev = (count as f64 * cfg.dev_frac).floor() as usize;
    [train, dev, count - train - dev]
}

impl Corpus {
    /// Builds the labeled corpus in memory.
    pub fn generate(cfg: &DataConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        let langs = language_specs(cfg, seed)?;
        let acoustics = Acoustics::new(cfg.emission_symbols, feature_dim, seed);
        let vocab = Vocab::new(langs.iter().map(|l| l.tag.clone()).collect());
        let mut splits: [Vec<Utterance>; 3] = Default::default();
        for spec in &langs {
            let sizes = split_sizes(cfg, spec.count);
            let mut index = 0;
            for (s, &n) in sizes.iter().enumerate() {
                for _ in 0..n {
                    let mut rng = stream_rng(seed, LABELED, spec.id, index);
                    let text = sentence(spec, cfg, &mut rng);
                    let frames = synthesize(spec, &acoustics, &text, &mut rng);
                    let tokens = vocab.target(spec.id, &text)?;
                    splits[s].push(Utterance {
                        lang: spec.id,
                        text,
                        frames,
                        tokens,
                    });
                    index += 1;
                }
            }
        }
        let [train, dev, test] = splits;
        Ok(Self {
            seed,
            config: cfg.clone(),
            langs,
            acoustics,
            vocab,
            train,
            dev,
            test,
        })
    }

    /// Fingerprint of the labeled splits: texts, languages and frame bits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, utts) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            bytes.extend_from_slice(name.as_bytes());
            for u in utts {
                bytes.extend_from_slice(&(u.lang as u64).to_le_bytes());
                bytes.extend_from_slice(u.text.as_bytes());
                for &x in u.frames.data() {
                    bytes.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
        }
        fnv1a(&bytes)
    }

    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            _ => Err(Error::Usage(format!("unknown split {name:?} (expected train, dev or test)"))),
        }
    }

    pub fn lang_by_tag(&self, tag: &str) -> Option<usize> {
        self.langs.iter().position(|l| l.tag == tag)
    }

    pub fn labeled_size(&self) -> usize {
        self.langs.iter().map(|l| l.count).sum()
    }

    /// Size of the procedural unlabeled frame pool.
    pub fn unlabeled_size(&self) -> usize {
        self.labeled_size() * self.config.unlabeled_factor
    }

    /// Size of the text-only pool.
    pub fn text_pool_size(&self) -> usize {
        self.labeled_size() * self.config.text_factor
    }

    /// Maps a pool index to a language in proportion to labeled sizes.
    fn pool_lang(&self, i: usize, factor: usize) -> usize {
        let mut rest = i;
        for l in &self.langs {
            let n = l.count * factor;
            if rest < n {
                return l.id;
            }
            rest -= n;
        }
        self.langs.len() - 1
    }

    /// Untranscribed utterance `i` of the unlabeled pool.
    pub fn unlabeled(&self, i: usize) -> Utterance {
        let lang = self.pool_lang(i % self.unlabeled_size().max(1), self.config.unlabeled_factor);
        let spec = &self.langs[lang];
        let mut rng = stream_rng(self.seed, UNLABELED, lang, i);
        let text = sentence(spec, &self.config, &mut rng);
        let frames = synthesize(spec, &self.acoustics, &text, &mut rng);
        Utterance {
            lang,
            tokens: Vec::new(),
            text: String::new(),
            frames,
        }
    }

    /// Sentence `i` of the text-only pool as `(lang, text)`.
    pub fn text(&self, i: usize) -> (usize, String) {
        let lang = self.pool_lang(i % self.text_pool_size().max(1), self.config.text_factor);
        let mut rng = stream_rng(self.seed, TEXT, lang, i);
        (lang, sentence(&self.langs[lang], &self.config, &mut rng))
    }

    /// Per-tier `(languages, labeled utterances)`.
    pub fn tier_counts(&self) -> Vec<(Tier, usize, usize)> {
        Tier::ALL
            .iter()
            .map(|&t| {
                let ls: Vec<_> = self.langs.iter().filter(|l| l.tier == t).collect();
                (t, ls.len(), ls.iter().map(|l| l.count).sum())
            })
            .collect()
    }

    fn frame_path(split: &str, tag: &str, i: usize) -> String {
        format!("frames/{split}/{tag}/{i:06}.bin")
    }

    /// Writes manifests, frame files, the text pool and `corpus.cfg`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut header = String::from("# corpus generated from this seed and [data] section\n");
        header.push_str(&format!("seed = {}\nfeature_dim = {}\n\n[data]\n", self.seed, self.acoustics.feature_dim));
        for (k, v) in self.config.entries() {
            let _ = writeln!(header, "{k} = {v}");
        }
        let cfg_path = dir.join("corpus.cfg");
        std::fs::write(&cfg_path, header).map_err(|e| Error::io(&cfg_path, e))?;
        for name in SPLITS {
            let mut lines = String::new();
            let mut per_lang = vec![0usize; self.langs.len()];
            for u in self.split(name)? {
                let tag = &self.langs[u.lang].tag;
                let rel = Self::frame_path(name, tag, per_lang[u.lang]);
                per_lang[u.lang] += 1;
                save_frames(&dir.join(&rel), &u.frames)?;
                let rec = ManifestRecord {
                    path: rel,
                    text: u.text.clone(),
                    lang: tag.clone(),
                    n_frames: u.n_frames(),
                };
                lines.push_str(&rec.to_line());
                lines.push('\n');
            }
            let p = dir.join(format!("{name}.tsv"));
            std::fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
        }
        let mut pool = String::new();
        for i in 0..self.text_pool_size() {
            let (lang, text) = self.text(i);
            let _ = writeln!(pool, "{}\t{text}", self.langs[lang].tag);
        }
        let p = dir.join("text_pool.tsv");
        std::fs::write(&p, pool).map_err(|e| Error::io(&p, e))
    }

    /// Reads a corpus written by [`Corpus::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("corpus.cfg");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let mut seed = 0;
        let mut feature_dim = 16;
        let mut data_text = String::new();
        for line in text.lines() {
            let l = line.trim();
            if let Some(v) = l.strip_prefix("seed =") {
                seed = v.trim().parse().map_err(|_| Error::Config(format!("bad seed in {}", cfg_path.display())))?;
            } else if let Some(v) = l.strip_prefix("feature_dim =") {
                feature_dim = v.trim().parse().map_err(|_| Error::Config(format!("bad feature_dim in {}", cfg_path.display())))?;
            } else {
                data_text.push_str(line);
                data_text.push('\n');
            }
        }
        let config = RunConfig::parse(&data_text)?.data;
        let langs = language_specs(&config, seed)?;
        let acoustics = Acoustics::new(config.emission_symbols, feature_dim, seed);
        let vocab = Vocab::new(langs.iter().map(|l| l.tag.clone()).collect());
        let mut corpus = Self {
            seed,
            config,
            langs,
            acoustics,
            vocab,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        for name in SPLITS {
            let utts = corpus.read_manifest(dir, name)?;
            match name {
                "train" => corpus.train = utts,
                "dev" => corpus.dev = utts,
                _ => corpus.test = utts,
            }
        }
        Ok(corpus)
    }

    fn read_manifest(&self, dir: &Path, split: &str) -> Result<Vec<Utterance>> {
        let p: PathBuf = dir.join(format!("{split}.tsv"));
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let rec = ManifestRecord::parse(line)?;
            let lang = self
                .lang_by_tag(&rec.lang)
                .ok_or_else(|| Error::Data(format!("unknown language tag {:?} in {}", rec.lang, p.display())))?;
            let frames = load_frames(&dir.join(&rec.path))?;
            if frames.shape()[0] != rec.n_frames {
                return Err(Error::Data(format!(
                    "{}: manifest says {} frames, file holds {}",
                    rec.path,
                    rec.n_frames,
                    frames.shape()[0]
                )));
            }
            let tokens = self.vocab.target(lang, &rec.text)?;
            out.push(Utterance {
                lang,
                text: rec.text,
                frames,
                tokens,
            });
        }
        Ok(out)
    }
}
