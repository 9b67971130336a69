// SPDX-License-Identifier: Apache-2.0

//! Manifest-driven synthesis of (mixture, binaural targets, clean) triples.
//!
//! Every random draw lives in the manifest, so generation is a pure
//! function of it. Output layout: `out_dir/<id>/{y,yl,yr,s}.wav` plus a
//! JSON-lines `index.jsonl` and a `summary.json`.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binaural::{
    default_scenarios, load_brir, make_monaural_mixture, max_offset, render_binaural, scale_noise,
    scale_speech, trim_or_loop_at, ScenarioKind, ScenarioSet, ScenarioSpec,
};
use crate::dsp::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::signals::{noise, speech_like, NoiseKind};
use crate::wav::{read_mono, wav_len, write_mono, WavFormat};

pub const DEFAULT_SEGMENT_LEN: usize = 40_000;
pub const EPSILON_RANGE_DB: (f64, f64) = (-35.0, -15.0);
pub const MANIFEST_FORMAT: &str = "vbse-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

fn default_segment_len() -> usize {
    DEFAULT_SEGMENT_LEN
}

/// Everything needed to build one example, with all draws materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRecipe {
    pub id: String,
    pub speech_path: PathBuf,
    pub noise_path: PathBuf,
    pub epsilon_db: f64,
    pub snr_db: f64,
    pub scenario_kind: ScenarioKind,
    #[serde(default = "default_segment_len")]
    pub segment_len: usize,
    #[serde(default)]
    pub speech_offset: usize,
    #[serde(default)]
    pub noise_offset: usize,
    pub seed: u64,
}

impl MixtureRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(EPSILON_RANGE_DB.0..=EPSILON_RANGE_DB.1).contains(&self.epsilon_db) {
            return Err(Error::InvalidInput(format!(
                "recipe {}: epsilon_db {} outside [{}, {}]",
                self.id, self.epsilon_db, EPSILON_RANGE_DB.0, EPSILON_RANGE_DB.1
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::InvalidInput(format!(
                "recipe {}: snr_db must be finite",
                self.id
            )));
        }
        if self.segment_len == 0 {
            return Err(Error::InvalidInput(format!(
                "recipe {}: segment_len must be positive",
                self.id
            )));
        }
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            return Err(Error::InvalidInput(format!(
                "recipe id `{}` is not a plain directory name",
                self.id
            )));
        }
        Ok(())
    }
}

/// Where scenario responses come from at generation time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum BrirSource {
    /// The built-in synthetic set.
    Synthetic,
    /// A directory holding `<scenario>_speech.wav` and `<scenario>_noise.wav`.
    Directory { path: PathBuf },
}

impl BrirSource {
    pub fn scenarios(&self, sample_rate: u32) -> Result<ScenarioSet> {
        match self {
            BrirSource::Synthetic => {
                if sample_rate != DEFAULT_SAMPLE_RATE {
                    return Err(Error::InvalidInput(format!(
                        "synthetic responses are defined at {DEFAULT_SAMPLE_RATE} Hz, manifest asks for {sample_rate} Hz"
                    )));
                }
                Ok(default_scenarios())
            }
            BrirSource::Directory { path } => ScenarioKind::ALL
                .into_iter()
                .filter_map(|kind| {
                    let speech = path.join(format!("{kind}_speech.wav"));
                    let noise = path.join(format!("{kind}_noise.wav"));
                    (speech.exists() && noise.exists()).then(|| {
                        let spec = ScenarioSpec::new(
                            kind,
                            load_brir(&speech, sample_rate)?,
                            load_brir(&noise, sample_rate)?,
                        )?;
                        Ok((kind, spec))
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub sample_rate: u32,
    pub wav_format: WavFormat,
    pub brirs: BrirSource,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub recipes: Vec<MixtureRecipe>,
}

fn hash_manifest(header: &ManifestHeader, recipes: &[MixtureRecipe]) -> Result<String> {
    let mut h = Sha256::new();
    let mut unhashed = header.clone();
    unhashed.config_hash.clear();
    h.update(serde_json::to_vec(&unhashed)?);
    for r in recipes {
        h.update(b"\n");
        h.update(serde_json::to_vec(r)?);
    }
    Ok(hex::encode(h.finalize()))
}

impl Manifest {
    /// Builds a manifest and stamps its hash.
    pub fn new(
        sample_rate: u32,
        wav_format: WavFormat,
        brirs: BrirSource,
        recipes: Vec<MixtureRecipe>,
    ) -> Result<Self> {
        let mut header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            sample_rate,
            wav_format,
            brirs,
            config_hash: String::new(),
        };
        header.config_hash = hash_manifest(&header, &recipes)?;
        let m = Self { header, recipes };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.format != MANIFEST_FORMAT {
            return Err(Error::InvalidInput(format!(
                "not a manifest (format `{}`)",
                self.header.format
            )));
        }
        if self.header.version != MANIFEST_VERSION {
            return Err(Error::Version(format!(
                "manifest version {} (supported: {MANIFEST_VERSION})",
                self.header.version
            )));
        }
        let mut triples = HashSet::new();
        let mut ids = HashSet::new();
        for r in &self.recipes {
            r.validate()?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate recipe id {}", r.id)));
            }
            if !triples.insert((&r.speech_path, &r.noise_path, r.seed)) {
                return Err(Error::InvalidInput(format!(
                    "recipe {} repeats a (speech, noise, seed) triple",
                    r.id
                )));
            }
        }
        let expect = hash_manifest(&self.header, &self.recipes)?;
        if expect != self.header.config_hash {
            return Err(Error::InvalidInput(
                "manifest hash does not match its contents".into(),
            ));
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.recipes {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::InvalidInput("empty manifest".into()))?,
        )?;
        let recipes = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let m = Self { header, recipes };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Same draws with every recipe retargeted to `kind`.
    pub fn with_scenario(&self, kind: ScenarioKind) -> Result<Self> {
        let recipes = self
            .recipes
            .iter()
            .map(|r| MixtureRecipe {
                scenario_kind: kind,
                ..r.clone()
            })
            .collect();
        Self::new(
            self.header.sample_rate,
            self.header.wav_format,
            self.header.brirs.clone(),
            recipes,
        )
    }

    /// Same draws rendered through another response source.
    pub fn with_brirs(&self, brirs: BrirSource) -> Result<Self> {
        Self::new(
            self.header.sample_rate,
            self.header.wav_format,
            brirs,
            self.recipes.clone(),
        )
    }
}

/// Sorted `.wav` files directly inside `dir`.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

/// Draw ranges for [`make_manifest`].
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRequest {
    pub n: usize,
    pub scenario: ScenarioKind,
    pub snr_range_db: (f64, f64),
    pub epsilon_range_db: (f64, f64),
    pub segment_len: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub wav_format: WavFormat,
    pub brirs: BrirSource,
}

impl Default for ManifestRequest {
    fn default() -> Self {
        Self {
            n: 10,
            scenario: ScenarioKind::Antiphasic,
            snr_range_db: (-15.0, 15.0),
            epsilon_range_db: EPSILON_RANGE_DB,
            segment_len: DEFAULT_SEGMENT_LEN,
            seed: 0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            wav_format: WavFormat::Float32,
            brirs: BrirSource::Synthetic,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws `n` recipes over the given source files.
pub fn make_manifest(
    speech: &[PathBuf],
    noises: &[PathBuf],
    req: &ManifestRequest,
) -> Result<Manifest> {
    if speech.is_empty() || noises.is_empty() {
        return Err(Error::InvalidInput(
            "need at least one speech and one noise file".into(),
        ));
    }
    let (elo, ehi) = req.epsilon_range_db;
    if elo > ehi || elo < EPSILON_RANGE_DB.0 || ehi > EPSILON_RANGE_DB.1 {
        return Err(Error::InvalidInput(format!(
            "epsilon range [{elo}, {ehi}] must lie inside [{}, {}]",
            EPSILON_RANGE_DB.0, EPSILON_RANGE_DB.1
        )));
    }
    let (slo, shi) = req.snr_range_db;
    if !(slo.is_finite() && shi.is_finite() && slo <= shi) {
        return Err(Error::InvalidInput(format!("bad SNR range [{slo}, {shi}]")));
    }
    let resampled_len = |p: &PathBuf| -> Result<usize> {
        let (len, rate) = wav_len(p)?;
        Ok((len as u64 * req.sample_rate as u64).div_ceil(rate as u64) as usize)
    };
    let speech_lens = speech
        .iter()
        .map(resampled_len)
        .collect::<Result<Vec<_>>>()?;
    let noise_lens = noises
        .iter()
        .map(resampled_len)
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut recipes = Vec::with_capacity(req.n);
    let mut seeds = BTreeSet::new();
    for i in 0..req.n {
        let si = rng.random_range(0..speech.len());
        let ni = rng.random_range(0..noises.len());
        let epsilon_db = draw(&mut rng, req.epsilon_range_db);
        let snr_db = draw(&mut rng, req.snr_range_db);
        let speech_offset = rng.random_range(0..=max_offset(speech_lens[si], req.segment_len));
        let noise_offset = rng.random_range(0..=max_offset(noise_lens[ni], req.segment_len));
        let mut seed = rng.random::<u64>();
        while !seeds.insert(seed) {
            seed = rng.random::<u64>();
        }
        recipes.push(MixtureRecipe {
            id: format!("r{i:05}"),
            speech_path: speech[si].clone(),
            noise_path: noises[ni].clone(),
            epsilon_db,
            snr_db,
            scenario_kind: req.scenario,
            segment_len: req.segment_len,
            speech_offset,
            noise_offset,
            seed,
        });
    }
    Manifest::new(req.sample_rate, req.wav_format, req.brirs.clone(), recipes)
}

/// One synthesized example plus the scaled components it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    pub x_hat: Waveform,
    pub v_hat: Waveform,
    pub y: Waveform,
    pub y_l: Waveform,
    pub y_r: Waveform,
}

/// Trim or loop, speech level, noise level, mixture, binaural rendering.
pub fn synthesize(
    recipe: &MixtureRecipe,
    scenarios: &ScenarioSet,
    sample_rate: u32,
) -> Result<Synthesized> {
    recipe.validate()?;
    let scenario = scenarios.get(&recipe.scenario_kind).ok_or_else(|| {
        Error::InvalidInput(format!(
            "no responses for scenario {}",
            recipe.scenario_kind
        ))
    })?;
    let speech = read_mono(&recipe.speech_path, sample_rate)?;
    let noise_src = read_mono(&recipe.noise_path, sample_rate)?;
    let x = trim_or_loop_at(&speech, recipe.segment_len, recipe.speech_offset)?;
    let v = trim_or_loop_at(&noise_src, recipe.segment_len, recipe.noise_offset)?;
    let x_hat = scale_speech(&x, recipe.epsilon_db)?;
    let v_hat = scale_noise(&v, &x_hat, recipe.snr_db)?;
    let y = make_monaural_mixture(&x_hat, &v_hat)?;
    let (y_l, y_r) = render_binaural(&x_hat, &v_hat, scenario)?;
    Ok(Synthesized {
        x_hat,
        v_hat,
        y,
        y_l,
        y_r,
    })
}

/// One line of `index.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub dir: PathBuf,
    pub segment_len: usize,
    pub sample_rate: u32,
    pub scenario_kind: ScenarioKind,
    pub epsilon_db: f64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub config_hash: String,
    pub generated: usize,
    pub failures: Vec<RecipeFailure>,
}

fn write_example(dir: &Path, ex: &Synthesized, format: WavFormat) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_mono(&dir.join("y.wav"), &ex.y, format)?;
    write_mono(&dir.join("yl.wav"), &ex.y_l, format)?;
    write_mono(&dir.join("yr.wav"), &ex.y_r, format)?;
    write_mono(&dir.join("s.wav"), &ex.x_hat, format)
}

/// Generates every recipe in parallel; the index is written once at the end.
pub fn generate_dataset(m: &Manifest, out_dir: &Path) -> Result<GenerationSummary> {
    m.validate()?;
    let rate = m.header.sample_rate;
    let scenarios = m.header.brirs.scenarios(rate)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<Result<IndexEntry>> = m
        .recipes
        .par_iter()
        .map(|r| {
            let ex = synthesize(r, &scenarios, rate)?;
            write_example(&out_dir.join(&r.id), &ex, m.header.wav_format)?;
            Ok(IndexEntry {
                id: r.id.clone(),
                dir: PathBuf::from(&r.id),
                segment_len: r.segment_len,
                sample_rate: rate,
                scenario_kind: r.scenario_kind,
                epsilon_db: r.epsilon_db,
                snr_db: r.snr_db,
            })
        })
        .collect();
    let mut index = String::new();
    let mut failures = Vec::new();
    let mut generated = 0;
    for (r, res) in m.recipes.iter().zip(results) {
        match res {
            Ok(entry) => {
                index.push_str(&serde_json::to_string(&entry)?);
                index.push('\n');
                generated += 1;
            }
            Err(e) => failures.push(RecipeFailure {
                id: r.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let index_path = out_dir.join(INDEX_FILE);
    std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    let summary = GenerationSummary {
        config_hash: m.header.config_hash.clone(),
        generated,
        failures,
    };
    let summary_path = out_dir.join(SUMMARY_FILE);
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary)? + "\n",
    )
    .map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}

/// Generates `m` into `out_dir` unless a complete dataset with the same
/// manifest hash is already there. Returns true if generation ran.
pub fn ensure_dataset(m: &Manifest, out_dir: &Path) -> Result<bool> {
    let summary_path = out_dir.join(SUMMARY_FILE);
    if let Ok(text) = std::fs::read_to_string(&summary_path) {
        if let Ok(s) = serde_json::from_str::<GenerationSummary>(&text) {
            if s.config_hash == m.header.config_hash
                && s.failures.is_empty()
                && out_dir.join(INDEX_FILE).exists()
            {
                return Ok(false);
            }
        }
    }
    generate_dataset(m, out_dir)?;
    Ok(true)
}

/// Reads `index.jsonl` from a generated dataset directory.
pub fn read_index(dataset_dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dataset_dir.join(INDEX_FILE);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// The four stored waveforms of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub y: Waveform,
    pub y_l: Waveform,
    pub y_r: Waveform,
    pub s: Waveform,
}

/// Loads one example and checks its length and rate contract.
pub fn load_example(dataset_dir: &Path, entry: &IndexEntry) -> Result<Example> {
    let dir = dataset_dir.join(&entry.dir);
    let corrupt = |reason: String| Error::CorruptDataset {
        id: entry.id.clone(),
        reason,
    };
    let load = |name: &str| -> Result<Waveform> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(corrupt(format!("missing {name}")));
        }
        let (len, rate) = wav_len(&path)?;
        if rate != entry.sample_rate {
            return Err(corrupt(format!(
                "{name} at {rate} Hz, expected {}",
                entry.sample_rate
            )));
        }
        if len != entry.segment_len {
            return Err(corrupt(format!(
                "{name} has {len} samples, expected {}",
                entry.segment_len
            )));
        }
        read_mono(&path, rate)
    };
    Ok(Example {
        id: entry.id.clone(),
        y: load("y.wav")?,
        y_l: load("yl.wav")?,
        y_r: load("yr.wav")?,
        s: load("s.wav")?,
    })
}

/// Loads every indexed example.
pub fn load_all(dataset_dir: &Path) -> Result<Vec<Example>> {
    read_index(dataset_dir)?
        .iter()
        .map(|e| load_example(dataset_dir, e))
        .collect()
}

/// Writes seeded synthetic speech and noise sources for demos and tests.
pub fn write_synthetic_sources(
    dir: &Path,
    n_speech: usize,
    n_noise: usize,
    len: usize,
    seed: u64,
) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let speech_dir = dir.join("speech");
    let noise_dir = dir.join("noise");
    for d in [&speech_dir, &noise_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let rate = DEFAULT_SAMPLE_RATE;
    let mut speech = Vec::new();
    for i in 0..n_speech {
        let path = speech_dir.join(format!("speech_{i:03}.wav"));
        let w = Waveform::new(speech_like(len, rate, seed.wrapping_add(i as u64)), rate)?;
        write_mono(&path, &w, WavFormat::Float32)?;
        speech.push(path);
    }
    let kinds = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];
    let mut noises = Vec::new();
    for i in 0..n_noise {
        let kind = kinds[i % kinds.len()];
        let path = noise_dir.join(format!(
            "noise_{i:03}_{}.wav",
            format!("{kind:?}").to_lowercase()
        ));
        let w = Waveform::new(
            noise(kind, len, rate, seed.wrapping_add(1000 + i as u64)),
            rate,
        )?;
        write_mono(&path, &w, WavFormat::Float32)?;
        noises.push(path);
    }
    Ok((speech, noises))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn setup(n: usize, scenario: ScenarioKind, seg: usize) -> (tempfile::TempDir, Manifest) {
        let dir = tempdir().unwrap();
        let (speech, noises) = write_synthetic_sources(dir.path(), 2, 2, 12_000, 1).unwrap();
        let m = make_manifest(
            &speech,
            &noises,
            &ManifestRequest {
                n,
                scenario,
                segment_len: seg,
                seed: 7,
                ..Default::default()
            },
        )
        .unwrap();
        (dir, m)
    }

    fn db(p: f64) -> f64 {
        10.0 * p.log10()
    }

    #[test]
    fn manifest_round_trip_and_hash() {
        let (_d, m) = setup(5, ScenarioKind::Antiphasic, 8_000);
        let text = m.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(Manifest::from_jsonl(&text).unwrap(), m);
        let tampered = text.replacen("\"snr_db\":", "\"snr_db\":1", 1);
        assert!(Manifest::from_jsonl(&tampered).is_err());
    }

    #[test]
    fn duplicate_triples_are_rejected() {
        let (_d, m) = setup(2, ScenarioKind::Antiphasic, 8_000);
        let mut recipes = m.recipes.clone();
        recipes[1] = MixtureRecipe {
            id: "other".into(),
            ..recipes[0].clone()
        };
        let err =
            Manifest::new(16_000, WavFormat::Float32, BrirSource::Synthetic, recipes).unwrap_err();
        assert!(err.to_string().contains("triple"));
    }

    #[test]
    fn homophasic_targets_are_identical() {
        let (d, m) = setup(1, ScenarioKind::Homophasic, 8_000);
        let out = d.path().join("data");
        generate_dataset(&m, &out).unwrap();
        let id = &m.recipes[0].id;
        let l = std::fs::read(out.join(id).join("yl.wav")).unwrap();
        let r = std::fs::read(out.join(id).join("yr.wav")).unwrap();
        assert_eq!(l, r);
    }

    #[test]
    fn stored_files_meet_level_contracts() {
        let (d, m) = setup(3, ScenarioKind::Antiphasic, 8_000);
        let mut recipes = m.recipes.clone();
        recipes[0].snr_db = 0.0;
        let m = Manifest::new(16_000, WavFormat::Float32, BrirSource::Synthetic, recipes).unwrap();
        let out = d.path().join("data");
        let summary = generate_dataset(&m, &out).unwrap();
        assert_eq!(summary.generated, 3);
        let index = read_index(&out).unwrap();
        for (entry, r) in index.iter().zip(&m.recipes) {
            let ex = load_example(&out, entry).unwrap();
            assert_eq!(ex.y.len(), 8_000);
            let v: Vec<f64> =
                ex.y.samples()
                    .iter()
                    .zip(ex.s.samples())
                    .map(|(a, b)| a - b)
                    .collect();
            let pv = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
            assert!((db(ex.s.power()) - r.epsilon_db).abs() < 1e-6);
            assert!((db(ex.s.power() / pv) - r.snr_db).abs() < 1e-6);
        }
    }

    #[test]
    fn load_matches_in_memory_synthesis() {
        let (d, m) = setup(2, ScenarioKind::Heterophasic1, 8_000);
        let out = d.path().join("data");
        generate_dataset(&m, &out).unwrap();
        let scenarios = m.header.brirs.scenarios(16_000).unwrap();
        for (entry, r) in read_index(&out).unwrap().iter().zip(&m.recipes) {
            let ex = load_example(&out, entry).unwrap();
            let mem = synthesize(r, &scenarios, 16_000).unwrap();
            for (a, b) in [
                (&ex.y, &mem.y),
                (&ex.y_l, &mem.y_l),
                (&ex.y_r, &mem.y_r),
                (&ex.s, &mem.x_hat),
            ] {
                for (p, q) in a.samples().iter().zip(b.samples()) {
                    assert_eq!(*p, *q as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn missing_file_is_corrupt_and_unreadable_recipe_is_recorded() {
        let (d, m) = setup(2, ScenarioKind::Antiphasic, 8_000);
        let mut recipes = m.recipes.clone();
        recipes[1].speech_path = d.path().join("absent.wav");
        let m = Manifest::new(16_000, WavFormat::Float32, BrirSource::Synthetic, recipes).unwrap();
        let out = d.path().join("data");
        let summary = generate_dataset(&m, &out).unwrap();
        assert_eq!(summary.generated, 1);
        assert_eq!(summary.failures[0].id, m.recipes[1].id);
        let index = read_index(&out).unwrap();
        std::fs::remove_file(out.join(&index[0].dir).join("yl.wav")).unwrap();
        let err = load_example(&out, &index[0]).unwrap_err();
        assert!(matches!(err, Error::CorruptDataset { .. }));
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let (d, m) = setup(3, ScenarioKind::Antiphasic, 8_000);
        let a = d.path().join("a");
        let b = d.path().join("b");
        generate_dataset(&m, &a).unwrap();
        generate_dataset(&m, &b).unwrap();
        for entry in read_index(&a).unwrap() {
            for f in ["y.wav", "yl.wav", "yr.wav", "s.wav"] {
                let pa = std::fs::read(a.join(&entry.dir).join(f)).unwrap();
                let pb = std::fs::read(b.join(&entry.dir).join(f)).unwrap();
                assert_eq!(pa, pb);
            }
        }
        assert_eq!(
            std::fs::read(a.join(INDEX_FILE)).unwrap(),
            std::fs::read(b.join(INDEX_FILE)).unwrap()
        );
    }

    #[test]
    fn scenario_retarget_keeps_draws() {
        let (_d, m) = setup(4, ScenarioKind::Antiphasic, 8_000);
        let h = m.with_scenario(ScenarioKind::Homophasic).unwrap();
        for (a, b) in m.recipes.iter().zip(&h.recipes) {
            assert_eq!(b.scenario_kind, ScenarioKind::Homophasic);
            assert_eq!(
                MixtureRecipe {
                    scenario_kind: a.scenario_kind,
                    ..b.clone()
                },
                *a
            );
        }
    }

    #[test]
    fn ensure_dataset_skips_matching_output() {
        let (d, m) = setup(2, ScenarioKind::Antiphasic, 8_000);
        let out = d.path().join("data");
        assert!(ensure_dataset(&m, &out).unwrap());
        assert!(!ensure_dataset(&m, &out).unwrap());
        let other = m.with_scenario(ScenarioKind::Homophasic).unwrap();
        assert!(ensure_dataset(&other, &out).unwrap());
    }
    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn manifest_draws_are_seeded_and_in_range(
            seed in 0u64..10_000,
            n in 1usize..20,
            snr in (-20.0f64..20.0, 0.0f64..10.0),
            eps in (-35.0f64..-25.0, 0.0f64..10.0),
        ) {
            let dir = tempdir().unwrap();
            let (speech, noises) = write_synthetic_sources(dir.path(), 2, 2, 12_000, 1).unwrap();
            let req = ManifestRequest {
                n,
                snr_range_db: (snr.0, snr.0 + snr.1),
                epsilon_range_db: (eps.0, eps.0 + eps.1),
                segment_len: 8_000,
                seed,
                ..Default::default()
            };
            let a = make_manifest(&speech, &noises, &req).unwrap();
            let b = make_manifest(&speech, &noises, &req).unwrap();
            proptest::prop_assert_eq!(&a, &b);
            proptest::prop_assert_eq!(a.recipes.len(), n);
            proptest::prop_assert_eq!(&Manifest::from_jsonl(&a.to_jsonl().unwrap()).unwrap(), &a);
            for r in &a.recipes {
                proptest::prop_assert!((req.snr_range_db.0..=req.snr_range_db.1).contains(&r.snr_db));
                proptest::prop_assert!((req.epsilon_range_db.0..=req.epsilon_range_db.1).contains(&r.epsilon_db));
            }
        }
    }
}
