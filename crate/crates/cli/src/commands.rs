use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dln_core::energy_models::CdConfig;
use dln_core::hmc::HmcConfig;
use dln_core::io::{
    latents_from_container, latents_to_container, load_dataset, model_from_container, model_to_container, normals_to_rgb, read_gray_image,
    resize_area, write_dataset, write_pgm, write_ppm, Container, Dataset, DatasetSubject, KeyValues,
};
use dln_core::lambertian::{make_synthetic_scene, AlbedoPattern, Geometry, ImageStack, SceneConfig, SceneKind, SceneLatents};
use dln_core::learning::{initial_model, pretrain_albedo_prior, train as train_em, transfer_albedo_prior, TrainConfig};
use dln_core::posterior::{infer as run_infer, DlnModel, InferConfig, InitMethod};
use dln_core::rng::derive_key;
use dln_core::tasks::{one_shot_protocol, relight as relight_images, Method, TestImage, TrainingSet};
use log::info;
use nalgebra::DVector;

use crate::{CliError, HmcArgs, InferArgs, RecognizeArgs, RelightArgs, Settings, SynthArgs, TrainArgs};

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn hmc_defaults() -> Vec<(&'static str, String)> {
    let h = HmcConfig::default();
    vec![
        ("step_size", h.step_size.to_string()),
        ("leapfrog_steps", h.leapfrog_steps.to_string()),
        ("hmc_epochs", h.epochs_per_call.to_string()),
        ("mass", h.mass.to_string()),
    ]
}

fn hmc_flags(a: &HmcArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("step_size", opt(&a.step_size)),
        ("leapfrog_steps", opt(&a.leapfrog_steps)),
        ("hmc_epochs", opt(&a.hmc_epochs)),
        ("mass", opt(&a.mass)),
    ]
}

fn hmc_config(s: &Settings) -> Result<HmcConfig, CliError> {
    let cfg = HmcConfig {
        step_size: s.get("step_size")?,
        leapfrog_steps: s.get("leapfrog_steps")?,
        epochs_per_call: s.get("hmc_epochs")?,
        mass: s.get("mass")?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<DlnModel, CliError> {
    Ok(model_from_container(&Container::load(path)?)?)
}

fn parse_init(s: &Settings) -> Result<InitMethod, CliError> {
    s.get::<InitMethod>("init")
}

pub fn synth(a: &SynthArgs, file: Option<&KeyValues>, seed: Option<String>) -> Result<(), CliError> {
    let defaults = vec![
        ("seed", "0".to_string()),
        ("kind", "sphere".into()),
        ("size", "24".into()),
        ("subjects", "1".into()),
        ("lights", "5".into()),
        ("noise", "0".into()),
        ("albedo", "uniform".into()),
        ("albedo_low", "0.5".into()),
        ("albedo_high", "1".into()),
        ("albedo_cell", "4".into()),
        ("max_light_angle", "90".into()),
    ];
    let s = Settings::resolve(
        &defaults,
        file,
        vec![
            ("seed", seed),
            ("kind", a.kind.clone()),
            ("size", opt(&a.size)),
            ("subjects", opt(&a.subjects)),
            ("lights", opt(&a.lights)),
            ("noise", opt(&a.noise)),
            ("albedo", a.albedo.clone()),
            ("albedo_low", opt(&a.albedo_low)),
            ("albedo_high", opt(&a.albedo_high)),
            ("max_light_angle", opt(&a.max_light_angle)),
        ],
    )?;
    let seed: u64 = s.get("seed")?;
    let kind: SceneKind = s.get("kind")?;
    let (low, high): (f64, f64) = (s.get("albedo_low")?, s.get("albedo_high")?);
    let albedo = match s.raw("albedo") {
        "uniform" => AlbedoPattern::Uniform { low, high },
        "constant" => AlbedoPattern::Constant(high),
        "checker" => AlbedoPattern::Checker {
            low,
            high,
            cell: s.get("albedo_cell")?,
        },
        other => return Err(CliError::Usage(format!("unknown albedo pattern '{other}' (uniform, constant, checker)"))),
    };
    let n_subjects: usize = s.get("subjects")?;
    let mut cfg = SceneConfig::new(kind, s.get("size")?, s.get("lights")?).map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.albedo = albedo;
    cfg.noise_std = s.get("noise")?;
    cfg.max_light_angle = s.get::<f64>("max_light_angle")?.to_radians();

    let mut subjects = Vec::new();
    let mut truths = Vec::new();
    for k in 0..n_subjects {
        let (latents, images) = make_synthetic_scene(&cfg, derive_key(seed, &[k as u64])).map_err(|e| CliError::Usage(e.to_string()))?;
        let id = format!("subject_{k:03}");
        subjects.push(DatasetSubject {
            files: (0..images.num_images()).map(|p| format!("img_{p:03}.pgm")).collect(),
            subsets: vec![None; images.num_images()],
            lights: Some(latents.lights.clone()),
            id: id.clone(),
            images,
        });
        truths.push((id, latents));
    }
    let dataset = Dataset {
        geometry: cfg.geometry,
        subjects,
    };
    write_dataset(&a.out, &dataset)?;
    for (id, latents) in &truths {
        latents_to_container(latents, cfg.geometry).save(&a.out.join(id).join("truth.dln"))?;
    }
    s.echo(&a.out)?;
    info!("wrote {} subjects to {}", n_subjects, a.out.display());
    Ok(())
}

/// Every PNM image directly in `dir` or one level below, resized to `geometry`.
fn load_corpus(dir: &Path, geometry: Geometry) -> Result<Vec<DVector<f64>>, CliError> {
    let mut paths = Vec::new();
    let visit = |d: &Path, recurse: bool, paths: &mut Vec<PathBuf>| -> Result<Vec<PathBuf>, CliError> {
        let mut subdirs = Vec::new();
        let entries = std::fs::read_dir(d).map_err(|e| CliError::Data(format!("cannot read {}: {e}", d.display())))?;
        for e in entries {
            let p = e.map_err(|e| CliError::Data(format!("cannot read {}: {e}", d.display())))?.path();
            let ext = p.extension().map(|x| x.to_string_lossy().to_lowercase()).unwrap_or_default();
            if p.is_dir() && recurse {
                subdirs.push(p);
            } else if ["pgm", "ppm", "pnm"].contains(&ext.as_str()) {
                paths.push(p);
            }
        }
        Ok(subdirs)
    };
    let subdirs = visit(dir, true, &mut paths)?;
    for d in subdirs {
        visit(&d, false, &mut paths)?;
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let (g, v) = read_gray_image(p)?;
            Ok(resize_area(&v, g, geometry)?)
        })
        .collect()
}

pub fn train(a: &TrainArgs, file: Option<&KeyValues>, seed: Option<String>) -> Result<(), CliError> {
    let d = TrainConfig::default();
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut defaults = vec![
        ("seed", "0".to_string()),
        ("em_iters", d.em_iters.to_string()),
        ("e_step_sweeps", d.e_step_sweeps.to_string()),
        ("cd_epochs", d.cd_epochs.to_string()),
        ("cd_steps", d.cd.steps.to_string()),
        ("batch_size", d.cd.batch_size.to_string()),
        ("momentum", d.cd.momentum.to_string()),
        ("learn_variance", d.cd.learn_variance.to_string()),
        ("albedo_rate", d.albedo_rate.to_string()),
        ("normal_rate", d.normal_rate.to_string()),
        ("albedo_hidden", join(&d.albedo_hidden)),
        ("normal_hidden", join(&d.normal_hidden)),
        ("translate", d.translation_augment.to_string()),
        ("eta", d.norm_penalty.to_string()),
        ("tolerance", d.tolerance.to_string()),
        ("weight_init_std", d.weight_init_std.to_string()),
        ("init_variance", d.init_variance.to_string()),
        ("warm_start", d.warm_start.to_string()),
        ("average_last", d.average_last.to_string()),
        ("init", "bias".into()),
        ("size", String::new()),
        ("pretrain_epochs", "10".into()),
        ("pretrain_rate", "0.01".into()),
        ("checkpoint_every", "0".into()),
    ];
    defaults.extend(hmc_defaults());
    let mut flags = vec![
        ("seed", seed),
        ("em_iters", opt(&a.em_iters)),
        ("e_step_sweeps", opt(&a.e_step_sweeps)),
        ("cd_epochs", opt(&a.cd_epochs)),
        ("cd_steps", opt(&a.cd_steps)),
        ("batch_size", opt(&a.batch_size)),
        ("albedo_rate", opt(&a.albedo_rate)),
        ("normal_rate", opt(&a.normal_rate)),
        ("albedo_hidden", a.albedo_hidden.clone()),
        ("normal_hidden", a.normal_hidden.clone()),
        ("translate", opt(&a.translate)),
        ("eta", opt(&a.eta)),
        ("tolerance", opt(&a.tolerance)),
        ("size", opt(&a.size)),
        ("init", a.init.clone()),
        ("pretrain_epochs", opt(&a.pretrain_epochs)),
        ("checkpoint_every", opt(&a.checkpoint_every)),
    ];
    flags.extend(hmc_flags(&a.hmc));
    let s = Settings::resolve(&defaults, file, flags)?;

    let cfg = TrainConfig {
        em_iters: s.get("em_iters")?,
        e_step_sweeps: s.get("e_step_sweeps")?,
        cd: CdConfig {
            steps: s.get("cd_steps")?,
            rate: d.cd.rate,
            momentum: s.get("momentum")?,
            batch_size: s.get("batch_size")?,
            learn_variance: s.get("learn_variance")?,
        },
        albedo_rate: s.get("albedo_rate")?,
        normal_rate: s.get("normal_rate")?,
        cd_epochs: s.get("cd_epochs")?,
        hmc: hmc_config(&s)?,
        norm_penalty: s.get("eta")?,
        translation_augment: s.get("translate")?,
        seed: s.get("seed")?,
        albedo_hidden: s.list("albedo_hidden")?,
        normal_hidden: s.list("normal_hidden")?,
        weight_init_std: s.get("weight_init_std")?,
        init_variance: s.get("init_variance")?,
        init: parse_init(&s)?,
        warm_start: s.get("warm_start")?,
        average_last: s.get("average_last")?,
        tolerance: s.get("tolerance")?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let target = match s.raw("size") {
        "" => None,
        _ => Some(Geometry::square(s.get("size")?).map_err(|e| CliError::Usage(e.to_string()))?),
    };
    let checkpoint_every: usize = s.get("checkpoint_every")?;

    let dataset = load_dataset(&a.data, target)?;
    let batch = dataset.to_batch()?;
    let mut model = initial_model(&batch, &cfg)?;
    if let Some(corpus_dir) = &a.pretrain_corpus {
        let corpus = load_corpus(corpus_dir, dataset.geometry)?;
        let pre_cd = CdConfig {
            rate: s.get("pretrain_rate")?,
            ..cfg.cd.clone()
        };
        let prior = pretrain_albedo_prior(&corpus, &cfg.albedo_hidden, &pre_cd, s.get("pretrain_epochs")?, cfg.weight_init_std, cfg.seed)?;
        transfer_albedo_prior(&mut model, prior)?;
        info!("pretrained the albedo prior on {} images", corpus.len());
    }

    let out_dir = a.out.parent().map(Path::to_path_buf).filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out_dir)?;
    s.echo(&out_dir)?;
    let provenance = s.values().clone();
    let stem = a.out.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let (model, log) = train_em(&batch, &cfg, Some(model), |it, m, _| {
        if checkpoint_every > 0 && (it + 1) % checkpoint_every == 0 {
            model_to_container(m, &provenance).save(&out_dir.join(format!("{stem}_iter{:03}.dln", it + 1)))?;
        }
        Ok(())
    })?;
    model_to_container(&model, &provenance).save(&a.out)?;
    write_text(&out_dir.join("train_log.txt"), &log.to_text())?;
    Ok(())
}

fn infer_settings(file: Option<&KeyValues>, seed: Option<String>, extra: Vec<(&'static str, String)>, flags: Vec<(&'static str, Option<String>)>) -> Result<Settings, CliError> {
    let mut defaults = vec![("seed", "0".to_string()), ("iters", "50".into()), ("init", "bias".into())];
    defaults.extend(hmc_defaults());
    defaults.extend(extra);
    let mut all = vec![("seed", seed)];
    all.extend(flags);
    Settings::resolve(&defaults, file, all)
}

fn infer_config(s: &Settings) -> Result<InferConfig, CliError> {
    Ok(InferConfig {
        iters: s.get("iters")?,
        hmc: hmc_config(s)?,
        init: parse_init(s)?,
        seed: s.get("seed")?,
        ..InferConfig::default()
    })
}

fn write_latents_images(dir: &Path, prefix: &str, latents: &SceneLatents, geometry: Geometry) -> Result<(), CliError> {
    write_pgm(&dir.join(format!("{prefix}albedo.pgm")), geometry, &latents.albedo)?;
    write_ppm(&dir.join(format!("{prefix}normals.ppm")), geometry, &normals_to_rgb(&latents.normals))?;
    Ok(())
}

pub fn infer(a: &InferArgs, file: Option<&KeyValues>, seed: Option<String>) -> Result<(), CliError> {
    let mut flags = vec![
        ("iters", opt(&a.iters)),
        ("init", a.init.clone()),
        ("average_last", opt(&a.average_last)),
        ("snapshot_every", opt(&a.snapshot_every)),
    ];
    flags.extend(hmc_flags(&a.hmc));
    let s = infer_settings(file, seed, vec![("average_last", "0".into()), ("snapshot_every", "0".into())], flags)?;
    let snapshot_every: usize = s.get("snapshot_every")?;
    let cfg = InferConfig {
        average_last: s.get("average_last")?,
        record_trace: snapshot_every > 0,
        ..infer_config(&s)?
    };
    let model = load_model(&a.model)?;
    let g = model.geometry;
    let mut columns = Vec::new();
    for path in &a.images {
        let (ig, v) = read_gray_image(path)?;
        if ig != g {
            return Err(CliError::Data(format!(
                "{}: resolution {}x{} does not match the model's {}x{}",
                path.display(),
                ig.height,
                ig.width,
                g.height,
                g.width
            )));
        }
        columns.push(v);
    }
    let images = ImageStack::from_images(g, &columns)?;
    let out = run_infer(&model, &images, &cfg)?;
    let latents = out.average.clone().unwrap_or_else(|| out.state.latents.clone());

    create_dir(&a.out)?;
    s.echo(&a.out)?;
    write_latents_images(&a.out, "", &latents, g)?;
    let mut csv = String::from("image,lx,ly,lz\n");
    for (p, path) in a.images.iter().enumerate() {
        let l = latents.light(p);
        let name = path.file_name().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(csv, "{name},{},{},{}", l[0], l[1], l[2]);
    }
    write_text(&a.out.join("lights.csv"), &csv)?;
    latents_to_container(&latents, g).save(&a.out.join("latents.dln"))?;
    let diag = &out.state.diagnostics;
    let mut text = String::from("sweep,hmc_acceptance,divergences,energy\n");
    for k in 0..diag.energy.len() {
        let _ = writeln!(text, "{},{},{},{}", k + 1, diag.acceptance[k], diag.divergences[k], diag.energy[k]);
    }
    write_text(&a.out.join("diagnostics.csv"), &text)?;
    if snapshot_every > 0 {
        let dir = a.out.join("snapshots");
        create_dir(&dir)?;
        for (k, lat) in out.trace.iter().enumerate() {
            if (k + 1) % snapshot_every == 0 {
                write_latents_images(&dir, &format!("sweep{:04}_", k + 1), lat, g)?;
                let _ = std::fs::write(
                    dir.join(format!("sweep{:04}_lights.csv", k + 1)),
                    (0..lat.num_images()).map(|p| format!("{},{},{}\n", lat.lights[(0, p)], lat.lights[(1, p)], lat.lights[(2, p)])).collect::<String>(),
                );
            }
        }
    }
    Ok(())
}

pub fn relight(a: &RelightArgs, file: Option<&KeyValues>, seed: Option<String>) -> Result<(), CliError> {
    let s = Settings::resolve(
        &[("seed", "0".into()), ("count", "5".into()), ("clamp", "false".into())],
        file,
        vec![("seed", seed), ("count", opt(&a.count)), ("clamp", opt(&a.clamp))],
    )?;
    let model = load_model(&a.model)?;
    let (latents, g) = latents_from_container(&Container::load(&a.latents)?)?;
    if g != model.geometry {
        return Err(CliError::Data(format!("latents are {}x{} but the model is {}x{}", g.height, g.width, model.geometry.height, model.geometry.width)));
    }
    let images = relight_images(&model, &latents.albedo, &latents.normals, s.get("count")?, s.get("seed")?, s.get("clamp")?)?;
    create_dir(&a.out)?;
    s.echo(&a.out)?;
    for (k, img) in images.iter().enumerate() {
        write_pgm(&a.out.join(format!("relit_{k:03}.pgm")), g, img)?;
    }
    Ok(())
}

pub fn recognize(a: &RecognizeArgs, file: Option<&KeyValues>, seed: Option<String>) -> Result<(), CliError> {
    let mut flags = vec![("iters", opt(&a.iters)), ("init", a.init.clone()), ("methods", a.methods.clone())];
    flags.extend(hmc_flags(&a.hmc));
    let s = infer_settings(file, seed, vec![("methods", "all".into())], flags)?;
    let methods: Vec<Method> = if s.raw("methods") == "all" { Method::ALL.to_vec() } else { s.list("methods")? };
    if methods.is_empty() {
        return Err(CliError::Usage("no recognition methods selected".into()));
    }
    let cfg = infer_config(&s)?;
    let model = load_model(&a.model)?;
    let gallery = load_dataset(&a.gallery, Some(model.geometry))?;
    let probes = load_dataset(&a.test, Some(model.geometry))?;
    let train = TrainingSet::new(
        gallery.subjects.iter().map(|s| s.id.clone()).collect(),
        gallery.subjects.iter().map(|s| s.images.clone()).collect(),
    )?;
    let tests: Vec<TestImage> = probes
        .subjects
        .iter()
        .flat_map(|s| {
            (0..s.files.len()).map(move |p| TestImage {
                label: s.id.clone(),
                subset: s.subsets[p].clone().unwrap_or_else(|| "test".into()),
                image: s.images.image(p),
            })
        })
        .collect();
    let report = one_shot_protocol(&model, &train, &tests, &methods, &cfg)?;
    create_dir(&a.out)?;
    s.echo(&a.out)?;
    write_text(&a.out.join("report.csv"), &report.to_csv())?;
    let summary = report.summary();
    write_text(&a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}
