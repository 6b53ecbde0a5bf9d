use std::fmt::Write as _;
use std::path::Path;

use mceend::checkpoint::Checkpoint;
use mceend::encoders::{count_activations, ModelConfig, Variant};
use mceend::features::SessionFeatures;
use mceend::model::{measure_memory, Model};
use mceend::scoring::{
    der, read_rttm, write_posteriors, write_rttm, ScoreReport, Segment, SessionScore,
};
use mceend::simulate::{load_session, simulate_dataset, Manifest, REFERENCE_FILE};
use mceend::trainer::{decode_session, train as run_training, TrainItem, TrainMode, TrainState};
use mceend::{Error, Result};

use crate::config::RunConfig;

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const SCORE_JSON: &str = "score.json";
pub const SCORE_TABLE: &str = "score.txt";
pub const BENCH_CSV: &str = "bench.csv";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn simulate(cfg: RunConfig) -> Result<()> {
    cfg.require_seed()?;
    let out = cfg.out_dir()?;
    cfg.simulate.spec.validate()?;
    cfg.write_effective(out)?;
    let m = simulate_dataset(out, &cfg.simulate.spec, cfg.simulate.sessions, &cfg.simulate.prefix)?;
    println!(
        "simulated {} sessions into {}; mean overlap ratio {:.3}",
        m.sessions.len(),
        out.display(),
        m.mean_overlap_ratio
    );
    Ok(())
}

struct Loaded {
    id: String,
    features: SessionFeatures,
    reference: Vec<Segment>,
}

fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<Vec<Loaded>> {
    let manifest = Manifest::read(dir)?;
    if manifest.sessions.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no sessions", dir.display())));
    }
    manifest
        .sessions
        .iter()
        .map(|entry| {
            let channels = cfg.data.channels.unwrap_or(entry.channels);
            if channels == 0 || channels > entry.channels {
                return Err(Error::Data(format!(
                    "{}: {channels} channels requested, {} recorded",
                    entry.id, entry.channels
                )));
            }
            let (wavs, reference) = load_session(&dir.join(&entry.dir), channels)?;
            Ok(Loaded {
                id: entry.id.clone(),
                features: SessionFeatures::extract(&wavs, &cfg.features)?,
                reference,
            })
        })
        .collect()
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.model.variant != cfg.model.variant {
        return Err(Error::Config(format!(
            "checkpoint {} holds a {} model, config asks for {}",
            path.display(),
            ck.meta.model.variant.name(),
            cfg.model.variant.name()
        )));
    }
    cfg.validate_model(&ck.meta.model)?;
    Ok(ck)
}

fn fit(cfg: &RunConfig, mut state: TrainState) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.validate_model(&state.model.config)?;
    cfg.train.validate()?;
    let sessions = load_dataset(cfg, cfg.data_dir()?)?;
    let period = cfg.features.frame_period();
    let items = sessions
        .into_iter()
        .map(|s| TrainItem::new(&s.id, s.features, &s.reference, state.model.config.speakers, period))
        .collect::<Result<Vec<_>>>()?;
    cfg.write_effective(out)?;
    let report = run_training(&mut state, &items, &cfg.train, Some(out))?;
    state.to_checkpoint().save(&out.join(FINAL_CHECKPOINT))?;
    match (report.epochs.first(), report.epochs.last()) {
        (Some(a), Some(b)) => println!(
            "epochs {}..{}, {} steps; loss {:.4} -> {:.4}",
            a.epoch, b.epoch, b.step, a.loss, b.loss
        ),
        _ => println!("nothing to do: {} epochs already complete", state.epoch),
    }
    Ok(())
}

pub fn train(mut cfg: RunConfig) -> Result<()> {
    let seed = cfg.require_seed()?;
    if cfg.train.mode != TrainMode::Pretrain {
        return Err(Error::Config("`train` runs in pretrain mode; use `adapt`".into()));
    }
    let state = match &cfg.checkpoint {
        Some(p) => TrainState::from_checkpoint(&load_checkpoint(&cfg, p)?)?,
        None => TrainState::new(Model::init(cfg.model.clone(), seed)?),
    };
    cfg.model = state.model.config.clone();
    fit(&cfg, state)
}

pub fn adapt(mut cfg: RunConfig) -> Result<()> {
    cfg.require_seed()?;
    let ck = load_checkpoint(&cfg, cfg.checkpoint_path()?)?;
    cfg.train.mode = TrainMode::Adapt;
    cfg.model = ck.meta.model.clone();
    fit(&cfg, TrainState::new(ck.model()?))
}

pub fn infer(cfg: RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    cfg.decode.validate()?;
    let model = load_checkpoint(&cfg, cfg.checkpoint_path()?)?.model()?;
    let sessions = load_dataset(&cfg, cfg.data_dir()?)?;
    cfg.write_effective(out)?;
    let period = cfg.features.frame_period();
    for s in &sessions {
        let available = s.features.num_channels();
        let ids = cfg
            .infer
            .channel_ids
            .clone()
            .unwrap_or_else(|| (0..available).collect());
        if let Some(&c) = ids.iter().find(|&&c| c >= available) {
            return Err(Error::Data(format!("{}: channel {c} missing ({available} loaded)", s.id)));
        }
        let (y, segs) = decode_session(&model, &s.id, &s.features, &ids, &cfg.decode, period)?;
        write_rttm(&out.join(format!("{}.rttm", s.id)), &segs)?;
        write_posteriors(&out.join(format!("{}.post", s.id)), &y)?;
    }
    println!("decoded {} sessions into {}", sessions.len(), out.display());
    Ok(())
}

pub fn score(cfg: RunConfig) -> Result<()> {
    cfg.decode.validate()?;
    let ref_dir = cfg
        .score
        .reference
        .as_deref()
        .or(cfg.data.dir.as_deref())
        .ok_or_else(|| Error::Config("`score.reference` is required".into()))?;
    let hyp_dir = cfg
        .score
        .hypothesis
        .as_deref()
        .ok_or_else(|| Error::Config("`score.hypothesis` is required".into()))?;
    let manifest = Manifest::read(ref_dir)?;
    let missing: Vec<&str> = manifest
        .sessions
        .iter()
        .filter(|e| !hyp_dir.join(format!("{}.rttm", e.id)).is_file())
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("no hypothesis for sessions: {}", missing.join(", "))));
    }
    let known: Vec<String> = manifest.sessions.iter().map(|e| format!("{}.rttm", e.id)).collect();
    let mut extra = Vec::new();
    for entry in std::fs::read_dir(hyp_dir).map_err(io(hyp_dir))? {
        let name = entry.map_err(io(hyp_dir))?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".rttm") && !known.contains(&name) {
            extra.push(name.trim_end_matches(".rttm").to_string());
        }
    }
    if !extra.is_empty() {
        extra.sort();
        return Err(Error::Data(format!("hypotheses without reference: {}", extra.join(", "))));
    }
    let sessions = manifest
        .sessions
        .iter()
        .map(|e| {
            let reference = read_rttm(&ref_dir.join(&e.dir).join(REFERENCE_FILE))?;
            let hyp = read_rttm(&hyp_dir.join(format!("{}.rttm", e.id)))?;
            Ok(SessionScore {
                session: e.id.clone(),
                breakdown: der(&reference, &hyp, cfg.decode.collar)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = ScoreReport::new(cfg.decode.collar, sessions);
    let table = report.table();
    print!("{table}");
    if let Some(out) = &cfg.out {
        cfg.write_effective(out)?;
        let json = serde_json::to_string_pretty(&report)? + "\n";
        std::fs::write(out.join(SCORE_JSON), json).map_err(io(&out.join(SCORE_JSON)))?;
        std::fs::write(out.join(SCORE_TABLE), &table).map_err(io(&out.join(SCORE_TABLE)))?;
    }
    Ok(())
}

pub fn bench(cfg: RunConfig) -> Result<()> {
    let seed = cfg.seed.unwrap_or(0);
    let t = cfg.bench.frames;
    if t == 0 || cfg.bench.channels.contains(&0) {
        return Err(Error::Config("bench frames and channel counts must be positive".into()));
    }
    let mut csv = String::from(
        "variant,channels,frames,per_channel_embeddings_per_block,shared_embeddings_per_block,\
         attention_weights_per_block,analytic_stored,analytic_bytes,measured_activation_bytes,\
         measured_peak_bytes\n",
    );
    for &variant in &cfg.bench.variants {
        let mc = ModelConfig {
            variant,
            ..cfg.model.clone()
        };
        cfg.validate_model(&mc)?;
        for &c in &cfg.bench.channels {
            let channels = if variant == Variant::Transformer { 1 } else { c };
            let a = count_activations(&mc, t, channels);
            let m = measure_memory(&mc, t, channels, seed)?;
            writeln!(
                csv,
                "{},{c},{t},{},{},{},{},{},{},{}",
                variant.name(),
                a.per_channel_embeddings_per_block,
                a.shared_embeddings_per_block,
                a.attention_weights_per_block,
                a.total_stored,
                a.total_stored * std::mem::size_of::<f64>(),
                m.activation_bytes,
                m.peak_bytes
            )
            .expect("write to string");
            eprintln!("{} C={c}: peak {:.1} MB", variant.name(), m.peak_bytes as f64 / 1e6);
        }
    }
    print!("{csv}");
    if let Some(out) = &cfg.out {
        cfg.write_effective(out)?;
        std::fs::write(out.join(BENCH_CSV), &csv).map_err(io(&out.join(BENCH_CSV)))?;
    }
    Ok(())
}
