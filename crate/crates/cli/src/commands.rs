use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use icbir_core::checkpoint::Checkpoint;
use icbir_core::config::RunConfig;
use icbir_core::dataset::SliceDataset;
use icbir_core::metrics::evaluate_run;
use icbir_core::pipeline::load_split;
use icbir_core::probmap::{export_overlay, probability_map, write_map_volumes, write_overlay_sidecar, Aggregation};
use icbir_core::retrieval::{detect as run_detect, index_gallery, query as run_query, GalleryIndex};
use icbir_core::rng::Rng;
use icbir_core::train::{init_prototypes, train as run_train};
use icbir_core::vae::VaeModel;
use icbir_core::volume::{
    generate_phantom, read_manifest, read_volume, resample_to_canonical, write_manifest, write_volume, ManifestRecord, PhantomSpec,
    Volume,
};
use icbir_core::Error;

use crate::{AggregateArg, DetectArgs, EvalArgs, GenArgs, IndexArgs, ProbmapArgs, QueryArgs, RuleArgs, TrainArgs};

pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        bail!(Error::Config("--threads must be positive".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    #[cfg(not(feature = "parallel"))]
    log::debug!("built without parallel support; ignoring --threads {n}");
    Ok(())
}

fn default_names(k: usize) -> Vec<String> {
    if k == 2 {
        vec!["CN".into(), "AD".into()]
    } else {
        (1..=k).map(|c| format!("class{c}")).collect()
    }
}

pub fn gen_synthetic(a: GenArgs) -> Result<()> {
    if a.classes < 2 {
        bail!(Error::Config(format!("--classes must be at least 2, got {}", a.classes)));
    }
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() {
        if !a.force {
            bail!(Error::Input(format!(
                "{} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
        for sub in ["train", "test"] {
            let p = a.out.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            }
        }
    }
    let mut records = Vec::new();
    let mut sample = 0u64;
    for (split, per_class) in [("train", a.count), ("test", a.test_count)] {
        if per_class == 0 {
            continue;
        }
        fs::create_dir_all(a.out.join(split))?;
        for i in 0..per_class {
            for class in 0..a.classes {
                let seed = Rng::with_stream(a.seed, sample).next_u64();
                sample += 1;
                let (mut vol, mask) = generate_phantom(&PhantomSpec {
                    side: a.side,
                    seed,
                    class,
                    noise_sigma: a.noise,
                    jitter: a.jitter,
                    anomaly_scale: a.anomaly_scale,
                })?;
                let id = format!("{split}-c{}-{i:04}", class + 1);
                vol.id = id.clone();
                vol.meta = Some(serde_json::json!({ "phantom_seed": seed }));
                let path = format!("{split}/{id}.svol");
                write_volume(&vol, a.out.join(&path))?;
                if a.masks {
                    let mut m = Volume::new(
                        mask.dims(),
                        mask.values().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                        format!("{id}-mask"),
                    )?;
                    m.kind = Some("mask".into());
                    write_volume(&m, a.out.join(format!("{split}/{id}.mask.svol")))?;
                }
                records.push(ManifestRecord {
                    path,
                    id,
                    label: class as u32 + 1,
                    split: split.into(),
                });
            }
        }
    }
    let manifest = a.out.join("manifest.jsonl");
    write_manifest(&records, &manifest)?;
    println!("wrote {} volumes and {}", records.len(), manifest.display());
    Ok(())
}

fn apply_rules(cfg: &mut RunConfig, r: &RuleArgs) {
    if let Some(n) = r.block_n {
        cfg.block_n = n;
    }
    if let Some(m) = r.block_m {
        cfg.block_m = m;
    }
    if let Some(xi) = &r.xi {
        cfg.xi = xi.clone();
    }
    if let Some(v) = r.r {
        cfg.r = v;
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .map_err(Error::from)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = a.$f.clone() { cfg.$f = v; })*};
    }
    set!(side, hidden, latent, beta, gamma, lr, epochs, batch, seed, temperature, class_names);
    if a.class_names.is_none() && a.config.is_none() {
        let k = read_manifest(&a.manifest)?
            .iter()
            .filter(|r| r.split == a.split)
            .map(|r| r.label as usize)
            .max()
            .unwrap_or(2);
        cfg.class_names = default_names(k.max(2));
    }
    if a.max_batches.is_some() {
        cfg.max_batches_per_epoch = a.max_batches;
    }
    apply_rules(&mut cfg, &a.rules);
    cfg.manifest = Some(a.manifest.display().to_string());
    cfg.checkpoint = Some(a.out.display().to_string());
    cfg.validate()?;

    let vols = load_split(&a.manifest, Some(&a.split), cfg.side, cfg.num_classes())?;
    log::info!("loaded {} {} volumes", vols.len(), a.split);
    let dataset = SliceDataset::new(vols, cfg.class_names.clone())?;
    let mut model = VaeModel::new(cfg.dims(), cfg.beta, cfg.gamma, cfg.seed)?;
    let mut bank = init_prototypes(&model, &dataset)?;
    bank.set_temperature(cfg.temperature)?;
    let curve = run_train(&mut model, &mut bank, &dataset, &cfg.train_config())?;
    for e in &curve {
        println!(
            "epoch {:>3}  D={:.6}  KL={:.6}  C={:.6}  total={:.6}",
            e.epoch, e.mean.reconstruction, e.mean.kl, e.mean.cross_entropy, e.mean.total
        );
    }
    let mut ck = Checkpoint::new(model, bank, cfg.seed)?;
    ck.loss_curve = curve;
    ck.run_config = cfg.to_json();
    ck.write(&a.out)?;
    println!("checkpoint {} fingerprint {}", a.out.display(), ck.fingerprint());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut cfg: RunConfig = if ck.run_config.is_null() {
        RunConfig::default()
    } else {
        serde_json::from_value(ck.run_config.clone()).map_err(Error::from)?
    };
    let d = ck.model.dims();
    cfg.side = d.side;
    cfg.hidden = d.hidden;
    cfg.latent = d.latent;
    cfg.class_names = ck.bank.class_names().to_vec();
    cfg.checkpoint = Some(path.display().to_string());
    Ok((ck, cfg))
}

fn load_query_volume(path: &Path, side: usize) -> Result<Volume> {
    let raw = read_volume(path).with_context(|| format!("reading volume {}", path.display()))?;
    Ok(resample_to_canonical(&raw, side)?)
}

pub fn index(a: IndexArgs) -> Result<()> {
    let (ck, mut cfg) = load_checkpoint(&a.checkpoint)?;
    apply_rules(&mut cfg, &a.rules);
    cfg.manifest = Some(a.manifest.display().to_string());
    cfg.index = Some(a.out.display().to_string());
    cfg.validate()?;
    let vols = load_split(&a.manifest, Some(&a.split), cfg.side, cfg.num_classes())?;
    let mut index = index_gallery(&ck, &vols, cfg.block_params())?;
    index.run_config = cfg.to_json();
    index.write(&a.out)?;
    println!(
        "indexed {} volumes into {} (fingerprint {})",
        index.entries.len(),
        a.out.display(),
        index.fingerprint
    );
    Ok(())
}

pub fn query(a: QueryArgs) -> Result<()> {
    let (ck, cfg) = load_checkpoint(&a.checkpoint)?;
    let index = GalleryIndex::read(&a.index).with_context(|| format!("reading index {}", a.index.display()))?;
    let vol = load_query_volume(&a.volume, cfg.side)?;
    let k = a.k.unwrap_or(cfg.k);
    let result = run_query(&index, &ck, &vol, k)?;
    let names = ck.bank.class_names();
    let label = |l: Option<usize>| l.and_then(|c| names.get(c)).cloned().unwrap_or_else(|| "-".into());
    if a.json {
        let hits: Vec<_> = result
            .hits
            .iter()
            .map(|h| serde_json::json!({"id": h.id, "score": h.score, "label": label(h.label)}))
            .collect();
        let out = serde_json::json!({
            "query": vol.id,
            "fingerprint": index.fingerprint,
            "truncated": result.truncated,
            "hits": hits,
            "run_config": cfg.to_json(),
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("rank\tid\tscore\tlabel");
        for (i, h) in result.hits.iter().enumerate() {
            println!("{}\t{}\t{:.6}\t{}", i + 1, h.id, h.score, label(h.label));
        }
    }
    Ok(())
}

pub fn detect(a: DetectArgs) -> Result<()> {
    let (ck, mut cfg) = load_checkpoint(&a.checkpoint)?;
    apply_rules(&mut cfg, &a.rules);
    cfg.validate()?;
    let vol = load_query_volume(&a.volume, cfg.side)?;
    let det = run_detect(&ck, &vol, cfg.block_params(), &cfg.detection())?;
    let names = ck.bank.class_names();
    if a.json {
        let out = serde_json::json!({
            "volume": vol.id,
            "label": names[det.label],
            "detection": det,
            "fingerprint": ck.fingerprint(),
            "run_config": cfg.to_json(),
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    for o in &det.orientations {
        let detected: Vec<&str> = o.section.detected.iter().map(|&d| names[d].as_str()).collect();
        let fractions: Vec<String> = o
            .section
            .fractions
            .iter()
            .zip(names)
            .map(|(f, n)| format!("{n}={f:.3}"))
            .collect();
        println!(
            "{:<9} blocks={:<3} votes: {}  detected: {}",
            o.orientation.name(),
            o.blocks.len(),
            fractions.join(" "),
            if detected.is_empty() { "none".to_string() } else { detected.join(",") }
        );
    }
    println!("label: {}", names[det.label]);
    Ok(())
}

pub fn probmap(a: ProbmapArgs) -> Result<()> {
    let (ck, mut cfg) = load_checkpoint(&a.checkpoint)?;
    if let Some(t) = a.threshold {
        cfg.threshold = t;
    }
    if let Some(m) = a.aggregate {
        cfg.aggregation = match m {
            AggregateArg::Mean => Aggregation::Mean,
            AggregateArg::Geometric => Aggregation::Geometric,
        };
    }
    cfg.output = Some(a.out.display().to_string());
    cfg.validate()?;
    let k = cfg.num_classes();
    let class = a.class.unwrap_or(k);
    if class == 0 || class > k {
        bail!(Error::Input(format!("class {class} outside 1..={k}")));
    }
    let vol = load_query_volume(&a.volume, cfg.side)?;
    let mut map = probability_map(&ck.model, &ck.bank, &vol, cfg.aggregation)?;
    map.threshold = cfg.threshold;
    let fingerprint = ck.fingerprint();
    let meta = serde_json::json!({"fingerprint": fingerprint, "run_config": cfg.to_json()});
    let maps = write_map_volumes(&map, meta, &a.out)?;
    let mut summary = export_overlay(&map, &vol, class - 1, cfg.threshold, &a.out)?;
    summary.fingerprint = Some(fingerprint);
    summary.run_config = cfg.to_json();
    let sidecar = write_overlay_sidecar(&summary, &a.out)?;
    println!(
        "{} maps, {} overlay images, {} highlighted voxels; sidecar {}",
        maps.len(),
        summary.files.len(),
        summary.highlighted,
        sidecar.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (ck, mut cfg) = load_checkpoint(&a.checkpoint)?;
    let index = GalleryIndex::read(&a.index).with_context(|| format!("reading index {}", a.index.display()))?;
    cfg.block_n = index.params.n;
    cfg.block_m = index.params.m;
    apply_rules(&mut cfg, &a.rules);
    if cfg.block_params() != index.params {
        bail!(Error::Config(format!(
            "block params {:?} differ from the index's {:?}",
            cfg.block_params(),
            index.params
        )));
    }
    cfg.index = Some(a.index.display().to_string());
    cfg.manifest = Some(a.manifest.display().to_string());
    cfg.output = Some(a.out.display().to_string());
    cfg.validate()?;
    let test = load_split(&a.manifest, Some(&a.split), cfg.side, cfg.num_classes())?;
    let mut report = evaluate_run(&ck, &index, &test, &cfg.detection())?;
    report.run_config = cfg.to_json();
    fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    let tsv = report.summary_tsv();
    if let Some(p) = &a.tsv {
        fs::write(p, &tsv)?;
    }
    print!("{tsv}");
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(())
}
