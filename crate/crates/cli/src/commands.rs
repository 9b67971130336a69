// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use vbse_core::binaural::{default_scenarios, synth_brir, Brir, SyntheticBrirParams};
use vbse_core::config::PipelineConfig;
use vbse_core::dataset::{
    ensure_dataset, generate_dataset, list_wavs, load_all, make_manifest as draw_manifest,
    write_synthetic_sources, BrirSource, Manifest, ManifestRequest,
};
use vbse_core::dsp::DEFAULT_SAMPLE_RATE;
use vbse_core::metrics::load_pesq_sidecar;
use vbse_core::model::ModelConfig;
use vbse_core::train_eval::{
    evaluate, run_ablation, train_with, AblationSpec, Checkpoint, StepLog,
};
use vbse_core::wav::{write_wav, WavFormat};
use vbse_core::{Error, Result};

use crate::{
    AblateArgs, BrirArgs, EvalArgs, InitCheckpointArgs, MakeManifestArgs, MakeSourcesArgs,
    SchemaArgs, SynthArgs, TrainArgs,
};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Parses `lo:hi`.
pub fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::InvalidInput(format!("range `{s}` must look like lo:hi"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn make_sources(a: &MakeSourcesArgs) -> Result<()> {
    if !(a.seconds > 0.0) {
        return Err(Error::InvalidInput("--seconds must be positive".into()));
    }
    let len = (a.seconds * DEFAULT_SAMPLE_RATE as f64).round() as usize;
    let (s, n) = write_synthetic_sources(&a.out_dir, a.n_speech, a.n_noise, len, a.seed)?;
    eprintln!(
        "wrote {} speech and {} noise files under {}",
        s.len(),
        n.len(),
        a.out_dir.display()
    );
    Ok(())
}

pub fn make_manifest(a: &MakeManifestArgs) -> Result<()> {
    let speech = list_wavs(&a.speech_dir)?;
    let noises = list_wavs(&a.noise_dir)?;
    if speech.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no WAV files in {}",
            a.speech_dir.display()
        )));
    }
    if noises.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no WAV files in {}",
            a.noise_dir.display()
        )));
    }
    let req = ManifestRequest {
        n: a.n,
        scenario: a.scenario,
        snr_range_db: parse_range(&a.snr_range)?,
        epsilon_range_db: parse_range(&a.eps_range)?,
        segment_len: a.segment_len,
        seed: a.seed,
        sample_rate: a.sample_rate,
        wav_format: a.wav_format.into(),
        brirs: match &a.brir_dir {
            Some(path) => BrirSource::Directory { path: path.clone() },
            None => BrirSource::Synthetic,
        },
    };
    let m = draw_manifest(&speech, &noises, &req)?;
    write_file(&a.out, m.to_jsonl()?)?;
    eprintln!("wrote {} recipes to {}", m.recipes.len(), a.out.display());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let summary = generate_dataset(&m, &a.out_dir)?;
    for f in &summary.failures {
        eprintln!("recipe {} failed: {}", f.id, f.error);
    }
    eprintln!(
        "generated {} of {} examples in {}",
        summary.generated,
        m.recipes.len(),
        a.out_dir.display()
    );
    if summary.generated == 0 {
        return Err(Error::InvalidInput("no recipe could be generated".into()));
    }
    Ok(())
}

fn write_brir(path: &Path, b: &Brir) -> Result<()> {
    write_wav(
        path,
        &[&b.left, &b.right],
        b.sample_rate,
        WavFormat::Float32,
    )
}

pub fn brir(a: &BrirArgs) -> Result<()> {
    create_dir(&a.out_dir)?;
    if a.azimuth.is_empty() {
        for (kind, spec) in default_scenarios() {
            write_brir(
                &a.out_dir.join(format!("{kind}_speech.wav")),
                &spec.speech_brir,
            )?;
            write_brir(
                &a.out_dir.join(format!("{kind}_noise.wav")),
                &spec.noise_brir,
            )?;
        }
    } else {
        for &az in &a.azimuth {
            if !(-90.0..=90.0).contains(&az) {
                return Err(Error::InvalidInput(format!(
                    "azimuth {az} outside [-90, 90]"
                )));
            }
            let b = synth_brir(&SyntheticBrirParams::at(az))?;
            write_brir(&a.out_dir.join(format!("az_{az:+}.wav")), &b)?;
        }
    }
    eprintln!("wrote responses to {}", a.out_dir.display());
    Ok(())
}

/// Loads a manifest and applies the configuration's scenario overrides.
fn configured_manifest(cfg: &PipelineConfig, path: &Path) -> Result<Manifest> {
    let mut m = Manifest::load(path)?;
    if let Some(b) = &cfg.scenarios.brirs {
        m = m.with_brirs(b.clone())?;
    }
    if let Some(k) = cfg.scenarios.kind {
        m = m.with_scenario(k)?;
    }
    Ok(m)
}

fn prepare(cfg: &PipelineConfig, manifest: Option<&PathBuf>, dir: &Path) -> Result<()> {
    match manifest {
        Some(path) => {
            let m = configured_manifest(cfg, path)?;
            if ensure_dataset(&m, dir)? {
                eprintln!(
                    "generated {} examples in {}",
                    m.recipes.len(),
                    dir.display()
                );
            }
            Ok(())
        }
        None if dir.join(vbse_core::dataset::INDEX_FILE).exists() => Ok(()),
        None => Err(Error::InvalidInput(format!(
            "no manifest configured and {} holds no dataset",
            dir.display()
        ))),
    }
}

fn print_step(label: &str, s: &StepLog) {
    eprintln!(
        "{label}step {:>6}  l_total {:>10.4}  l_sm {:>10.4}  l_re {:>10.4}  |g| {:>9.4}",
        s.step, s.l_total, s.l_sm, s.l_re, s.grad_norm
    );
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&a.config)?;
    let dir = cfg.train_dir();
    prepare(&cfg, cfg.data.train_manifest.as_ref(), &dir)?;
    let data = load_all(&dir)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let tc = cfg.effective_train();
    let every = a.log_every.max(1);
    let out = train_with(&cfg.model, &tc, &data, resume, &mut |s| {
        if s.step % every == 0 || s.step == tc.max_steps {
            print_step("", s);
        }
    })?;
    let ck_dir = tc.checkpoint_dir.expect("defaulted by effective_train");
    eprintln!(
        "trained {} steps; checkpoint {}",
        out.checkpoint.step,
        ck_dir
            .join(vbse_core::train_eval::FINAL_CHECKPOINT)
            .display()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = a.config.as_deref().map(PipelineConfig::load).transpose()?;
    let dataset_dir = match (&a.manifest, &a.dataset) {
        (Some(path), _) => {
            let mut m = Manifest::load(path)?;
            if let Some(c) = &cfg {
                m = configured_manifest(c, path)?;
            }
            let dir = a.data_dir.clone().unwrap_or_else(|| a.out_dir.join("data"));
            ensure_dataset(&m, &dir)?;
            dir
        }
        (None, Some(dir)) => dir.clone(),
        (None, None) => {
            return Err(Error::InvalidInput(
                "either --manifest or --dataset is required".into(),
            ))
        }
    };
    let pesq = a.pesq.as_deref().map(load_pesq_sidecar).transpose()?;
    let report = evaluate(
        &ck,
        &dataset_dir,
        cfg.as_ref().map(|c| &c.model),
        pesq.as_ref(),
    )?;
    let table = report.to_table();
    write_file(&a.out_dir.join("report.json"), report.to_json()? + "\n")?;
    write_file(&a.out_dir.join("report.txt"), &table)?;
    print!("{table}");
    for f in &report.failures {
        eprintln!("utterance {} not scored: {}", f.id, f.error);
    }
    if report.count == 0 {
        return Err(Error::InsufficientSignal(
            "no utterance could be scored".into(),
        ));
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&a.config)?;
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone()
            .ok_or_else(|| Error::InvalidConfig(format!("ablation needs data.{key}")))
    };
    let train_m = configured_manifest(&cfg, &need(&cfg.data.train_manifest, "train_manifest")?)?;
    let eval_m = configured_manifest(&cfg, &need(&cfg.data.eval_manifest, "eval_manifest")?)?;
    let axis_name = serde_json::to_value(a.axis)?
        .as_str()
        .unwrap_or("axis")
        .to_string();
    let work = cfg.data.work_dir.join(format!("ablation_{axis_name}"));
    let spec = AblationSpec {
        axis: a.axis,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
    };
    let max_steps = cfg.train.max_steps;
    let table = run_ablation(&spec, &train_m, &eval_m, &work, &mut |label, s| {
        if s.step % 10 == 0 || s.step == max_steps {
            print_step(&format!("[{label}] "), s);
        }
    })?;
    let text = table.to_text();
    write_file(&work.join("table.txt"), &text)?;
    write_file(
        &work.join("table.json"),
        serde_json::to_string_pretty(&table)? + "\n",
    )?;
    print!("{text}");
    Ok(())
}

pub fn init_checkpoint(a: &InitCheckpointArgs) -> Result<()> {
    let model = match &a.config {
        Some(p) => PipelineConfig::load(p)?.model,
        None => ModelConfig::default(),
    };
    let ck = if a.identity {
        Checkpoint::identity(&model)?
    } else {
        Checkpoint::init(&model, a.seed)?
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ck.save(&a.out)?;
    eprintln!(
        "wrote {} parameters to {}",
        ck.params.count(),
        a.out.display()
    );
    Ok(())
}

pub fn schema(a: &SchemaArgs) -> Result<()> {
    let text = serde_json::to_string_pretty(&PipelineConfig::schema())? + "\n";
    match &a.out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse_with_negative_bounds() {
        assert_eq!(parse_range("-15:15").unwrap(), (-15.0, 15.0));
        assert_eq!(parse_range(" -35 : -15 ").unwrap(), (-35.0, -15.0));
        for bad in ["15", "3:1", "a:b", "nan:1"] {
            assert!(parse_range(bad).is_err(), "{bad}");
        }
    }
}
