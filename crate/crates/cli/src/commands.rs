//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gtloc::datastore::{
    load_dataset, make_splits, read_embeddings, save_dataset, subsample, synth_generate, Dataset, SplitFractions,
    SplitMode, SplitTag, SynthSpec, TimeDistribution,
};
use gtloc::geotime::{tuple2cyclic, tuple2cyclic_daily, CyclicTime, DateTuple, GeoCoord, ToyScale};
use gtloc::retrieval::{
    build_gallery, build_image_gallery, composed_retrieval, eval_geo, eval_time, gps_items_from, load_gallery,
    metric_rows, retrieve, save_gallery, time_histogram, time_items_from, uniform_time_items, write_histogram_csv,
    write_metrics_csv, Gallery, GalleryItem, GalleryKind,
};
use gtloc::trainer::{resume, train as train_model, Checkpoint, ResumeOverrides, TrainMode};

use crate::config::{ConfigFile, Preset};
use crate::error::{At, CliError, CliResult};
use crate::{ComposeArgs, ConfigArgs, EvalArgs, GalleryArgs, PredictArgs, SplitArgs, SynthArgs, TrainArgs};

/// Writes to a file, or stdout when no path is given.
fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).at("cli")?;
            }
            let f = File::create(p).map_err(|e| CliError::data("cli", format!("{}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn parse_arg<T: std::str::FromStr<Err = gtloc::Error>>(s: &str, origin: &'static str) -> CliResult<T> {
    s.parse::<T>().at(origin)
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).at("trainer")
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::data("cli", e.to_string())
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let spec = SynthSpec {
        sources: a.sources,
        site_spread_km: a.site_spread_km,
        time_distribution: parse_arg::<TimeDistribution>(&a.time_distribution, "datastore")?,
        backbone_noise: a.backbone_noise,
        ..SynthSpec::new(a.n, a.seed, a.dim)
    };
    let mut ds = synth_generate(&spec).at("datastore")?;
    if a.with_split {
        let tags =
            make_splits(&ds, SplitMode::Random, SplitFractions { train: 0.75, eval: 0.25 }, a.seed).at("datastore")?;
        ds = ds.with_splits(tags).at("datastore")?;
    }
    save_dataset(&ds, &a.out).at("datastore")?;
    println!("wrote {} samples ({}-d) to {}", ds.len(), ds.dim(), a.out.display());
    Ok(())
}

pub fn split(a: SplitArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data).at("datastore")?;
    let mode: SplitMode = parse_arg(&a.mode, "datastore")?;
    let tags =
        make_splits(&ds, mode, SplitFractions { train: a.train_frac, eval: a.eval_frac }, a.seed).at("datastore")?;
    let ds = ds.with_splits(tags).at("datastore")?;
    let out = a.out.unwrap_or_else(|| if a.data.is_dir() { a.data.clone() } else { parent_dir(&a.data) });
    save_dataset(&ds, &out).at("datastore")?;
    let (tr, ev) = (ds.split_indices(SplitTag::Train).len(), ds.split_indices(SplitTag::Eval).len());
    println!("train {tr}, eval {ev}, unused {} -> {}", ds.len() - tr - ev, out.display());
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let preset = a.preset.unwrap_or(Preset::Desk);
    let mut cfg = match &a.config {
        Some(p) => ConfigFile::load(p, preset)?,
        None => ConfigFile::preset(preset),
    };
    let data = a.data.clone().or(cfg.paths.data.clone()).ok_or_else(|| CliError::usage("cli", "--data is required"))?;
    let out = a.out.clone().or(cfg.paths.out.clone()).ok_or_else(|| CliError::usage("cli", "--out is required"))?;
    let log = a.log.clone().or(cfg.paths.log.clone()).unwrap_or_else(|| log_path(&out));

    let ds = load_dataset(&data).at("datastore")?;
    let mut train_ds = ds.split(SplitTag::Train).at("datastore")?;

    let report = if let Some(from) = &a.resume {
        let fixed = [
            ("--config", a.config.is_some()),
            ("--preset", a.preset.is_some()),
            ("--mode", a.mode.is_some()),
            ("--label-noise", a.label_noise.is_some()),
            ("--batch-size", a.batch_size.is_some()),
            ("--lr-max", a.lr_max.is_some()),
            ("--lr-min", a.lr_min.is_some()),
            ("--seed", a.seed.is_some()),
            ("--tml-distance", a.tml_distance.is_some()),
        ];
        if let Some((flag, _)) = fixed.iter().find(|(_, set)| *set) {
            return Err(CliError::usage("cli", format!("{flag} cannot change a resumed run")));
        }
        let ckpt = load_ckpt(from)?;
        if let Some(f) = a.subsample {
            train_ds = subsample(&train_ds, f, ckpt.config.seed).at("datastore")?;
        }
        let overrides = ResumeOverrides { epochs: a.epochs, stop_at_step: Some(a.stop_at_step), encoder: None };
        resume(ckpt, &train_ds, overrides).at("trainer")?
    } else {
        let t = &mut cfg.train;
        if let Some(m) = &a.mode {
            t.mode = parse_arg::<TrainMode>(m, "trainer")?;
        }
        if let Some(s) = a.label_noise {
            t.noise.label_noise_sigma = s;
        }
        if let Some(v) = a.epochs {
            t.epochs = v;
        }
        if let Some(v) = a.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = a.lr_max {
            t.lr_max = v;
        }
        if let Some(v) = a.lr_min {
            t.lr_min = v;
        }
        if let Some(v) = a.seed {
            t.seed = v;
        }
        if let Some(d) = &a.tml_distance {
            t.tml.distance = parse_arg(d, "objectives")?;
        }
        if let Some(v) = a.stop_at_step {
            t.stop_at_step = Some(v);
        }
        if let Some(f) = a.subsample {
            train_ds = subsample(&train_ds, f, t.seed).at("datastore")?;
        }
        let enc = cfg.model.encoder(train_ds.dim());
        train_model(&train_ds, enc, cfg.train.clone()).at("trainer")?
    };

    report.checkpoint.save(&out).at("trainer")?;
    report.write_jsonl(output(Some(&log))?).at("trainer")?;
    if let Some(why) = &report.aborted {
        return Err(CliError {
            kind: crate::error::ExitKind::Numeric,
            origin: "trainer",
            message: format!("training aborted at {why}; last good state saved to {}", out.display()),
        });
    }
    let last = report.steps().last().map(|s| s.loss);
    println!(
        "step {} loss {} model {} -> {}",
        report.checkpoint.step,
        last.map_or("n/a".to_string(), |l| format!("{l:.6}")),
        report.checkpoint.model_hash(),
        out.display()
    );
    Ok(())
}

pub fn make_gallery(a: GalleryArgs) -> CliResult<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let hash = ckpt.model_hash();
    let kind: GalleryKind = parse_arg(&a.kind, "retrieval")?;
    let need_data = || -> CliResult<Dataset> {
        let p = a
            .data
            .as_ref()
            .ok_or_else(|| CliError::usage("cli", format!("--data is required for {} galleries", a.kind)))?;
        load_dataset(p).at("datastore")
    };
    let gallery = match kind {
        GalleryKind::Gps => {
            let ds = need_data()?.split(SplitTag::Train).at("datastore")?;
            build_gallery(kind, gps_items_from(&ds, a.size, a.seed).at("retrieval")?, &ckpt.model, &hash)
        }
        GalleryKind::Time if a.uniform_time => {
            build_gallery(kind, uniform_time_items(a.size, a.seed).at("retrieval")?, &ckpt.model, &hash)
        }
        GalleryKind::Time => {
            let ds = need_data()?.split(SplitTag::Train).at("datastore")?;
            let items = time_items_from(&ds, a.size, a.seed, ckpt.config.time_scale).at("retrieval")?;
            build_gallery(kind, items, &ckpt.model, &hash)
        }
        GalleryKind::Image => build_image_gallery(&need_data()?, &ckpt.model, &hash),
    }
    .at("retrieval")?;
    save_gallery(&gallery, &a.out, Some(a.seed)).at("retrieval")?;
    println!("{} gallery of {} entries -> {}", kind.as_str(), gallery.len(), a.out.display());
    Ok(())
}

/// Loads a gallery and re-embeds it if it belongs to another checkpoint.
fn open_gallery(prefix: &Path, ckpt: &Checkpoint, hash: &str) -> CliResult<Gallery> {
    let mut g = load_gallery(prefix).at("retrieval")?;
    if g.refresh(&ckpt.model, hash).at("retrieval")? {
        eprintln!("note: re-embedded stale gallery {}", prefix.display());
    }
    Ok(g)
}

fn eval_rows(ds: &Dataset, split: &str) -> CliResult<Dataset> {
    match split {
        "all" => Ok(ds.clone()),
        "train" => ds.split(SplitTag::Train).at("datastore"),
        "eval" => {
            if ds.splits().is_none() {
                return Err(CliError::usage("cli", "dataset has no split assignment; run `split` or pass --split all"));
            }
            ds.split(SplitTag::Eval).at("datastore")
        }
        other => Err(CliError::usage("cli", format!("unknown split '{other}' (eval|train|all)"))),
    }
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    if a.time_gallery.is_none() && a.gps_gallery.is_none() {
        return Err(CliError::usage("cli", "pass --time-gallery and/or --gps-gallery"));
    }
    let ckpt = load_ckpt(&a.ckpt)?;
    let hash = ckpt.model_hash();
    let ds = eval_rows(&load_dataset(&a.data).at("datastore")?, &a.split)?;
    let time_g = a.time_gallery.as_deref().map(|p| open_gallery(p, &ckpt, &hash)).transpose()?;
    let gps_g = a.gps_gallery.as_deref().map(|p| open_gallery(p, &ckpt, &hash)).transpose()?;
    let emb = ckpt.model.embed_images(ds.embeddings()).at("encoders")?;
    let tm = match &time_g {
        Some(g) => Some(eval_time(&emb, &ds.times(ckpt.config.time_scale).at("datastore")?, g).at("retrieval")?),
        None => None,
    };
    let gm = match &gps_g {
        Some(g) => Some(eval_geo(&emb, ds.geos(), g, &a.thresholds).at("retrieval")?),
        None => None,
    };
    write_metrics_csv(output(a.out.as_deref())?, &metric_rows(tm.as_ref(), gm.as_ref())).at("retrieval")
}

fn item_fields(it: &GalleryItem) -> [String; 4] {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    [
        f(it.geo.map(|g| g.lat())),
        f(it.geo.map(|g| g.lon())),
        f(it.time.map(|t| t.months())),
        f(it.time.map(|t| t.hours())),
    ]
}

pub fn predict(a: PredictArgs) -> CliResult<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let hash = ckpt.model_hash();
    let backbone = read_embeddings(&a.embedding_file).at("datastore")?;
    let emb = ckpt.model.embed_images(&backbone).at("encoders")?;
    let galleries = a
        .galleries
        .iter()
        .map(|p| Ok((p.display().to_string(), open_gallery(p, &ckpt, &hash)?)))
        .collect::<CliResult<Vec<_>>>()?;
    // fail before any output is written
    for (name, g) in &galleries {
        if a.topk == 0 || a.topk > g.len() {
            return Err(CliError::usage(
                "retrieval",
                format!("--topk {} outside 1..={} for gallery {name}", a.topk, g.len()),
            ));
        }
    }

    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record(["query", "gallery", "kind", "rank", "id", "similarity", "lat", "lon", "month", "hour"])
        .map_err(csv_err)?;
    let mut hists = Vec::new();
    for q in 0..emb.rows() {
        for (name, g) in &galleries {
            let r = retrieve(emb.row(q), g, a.topk).at("retrieval")?;
            for (rank, (&i, &s)) in r.indices.iter().zip(&r.similarities).enumerate() {
                let it = &g.items()[i];
                let [lat, lon, month, hour] = item_fields(it);
                let rec = [
                    q.to_string(),
                    name.clone(),
                    g.kind().as_str().to_string(),
                    (rank + 1).to_string(),
                    it.id.clone(),
                    s.to_string(),
                    lat,
                    lon,
                    month,
                    hour,
                ];
                w.write_record(&rec).map_err(csv_err)?;
            }
            if a.histogram.is_some() && g.kind() != GalleryKind::Gps {
                let k = a.histogram_topk.min(g.len());
                let h = time_histogram(emb.row(q), g, 12, 24, k).at("retrieval")?;
                let label = if galleries.len() > 1 { format!("{q}@{name}") } else { q.to_string() };
                hists.push((label, h));
            }
        }
    }
    w.flush().at("cli")?;
    if let Some(p) = &a.histogram {
        write_histogram_csv(output(Some(p))?, &hists).at("retrieval")?;
    }
    Ok(())
}

/// Parses "MM-DD HH:MM".
pub fn parse_query_time(s: &str, scale: ToyScale) -> CliResult<CyclicTime> {
    let bad = || CliError::usage("geotime", format!("time '{s}' is not \"MM-DD HH:MM\""));
    let (date, clock) = s.trim().split_once(' ').ok_or_else(bad)?;
    let (m, d) = date.split_once('-').ok_or_else(bad)?;
    let (h, min) = clock.trim().split_once(':').ok_or_else(bad)?;
    let num = |x: &str| x.parse::<u32>().map_err(|_| bad());
    let t = DateTuple::new(num(m)?, num(d)?, num(h)?, num(min)?, 0).at("geotime")?;
    Ok(match scale {
        ToyScale::Monthly => tuple2cyclic(&t),
        ToyScale::Daily => tuple2cyclic_daily(&t),
    })
}

pub fn compose(a: ComposeArgs) -> CliResult<()> {
    let geo = GeoCoord::new(a.lat, a.lon).at("geotime")?;
    let ckpt = load_ckpt(&a.ckpt)?;
    let hash = ckpt.model_hash();
    let t = parse_query_time(&a.time, ckpt.config.time_scale)?;
    let g = open_gallery(&a.image_gallery, &ckpt, &hash)?;
    let r = composed_retrieval(&ckpt.model, &t, &geo, &g, a.topk).at("retrieval")?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record(["rank", "id", "similarity", "lat", "lon", "month", "hour"]).map_err(csv_err)?;
    for (rank, (&i, &s)) in r.indices.iter().zip(&r.similarities).enumerate() {
        let it = &g.items()[i];
        let [lat, lon, month, hour] = item_fields(it);
        w.write_record([(rank + 1).to_string(), it.id.clone(), s.to_string(), lat, lon, month, hour])
            .map_err(csv_err)?;
    }
    w.flush().at("cli")
}

pub fn config(a: ConfigArgs) -> CliResult<()> {
    let c = match &a.from {
        Some(p) => ConfigFile::load(p, a.preset)?,
        None => ConfigFile::preset(a.preset),
    };
    print!("{}", c.to_toml());
    Ok(())
}
