use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::output::{write_png, write_provenance, RunRecord};
use super::{
    CliError, Context, EvalArgs, FilterArgs, GenSetArgs, RunConfig, SampleArgs, TrainArgs,
};
use crate::attention::{build_msa_mask, write_bias_pgm, TokenLayout};
use crate::container;
use crate::datagen::{
    filter_set, generate_sets, latent_to_image, read_manifest, write_manifest, CannedCompleter,
    CommandCompleter, CommandExtractor, FeatureExtractor, FilterDecision, GenPath, ManifestEntry,
    ManifestWriter, PromptTemplate, RejectReason, SetJob, SetRequest, TemplateKind, TextCompleter,
    ToyAesthetic, ToyExtractor,
};
use crate::denoiser::{
    embed_caption, load_checkpoint, make_samples, render_object_sets, save_checkpoint, train_step,
    Adam, CheckpointInfo, DenoiserError, DenoiserParams, Dropout, NoiseSchedule, ObjectSet,
};
use crate::eval::{intra_cluster_similarity, masked_crop, read_scores, write_scores, MID_GRAY};
use crate::geometry::Scene;
use crate::rng::Rng;
use crate::sampler::{euler_sample, DenoiserModel};
use crate::tensor::Tensor;

/// Stream of the root seed reserved for choosing procedural scenes.
const SCENE_STREAM: u64 = u64::MAX - 1;

/// Backgrounds used when no external captioner is configured.
const CANNED_BACKGROUNDS: &str = "1. on a wooden kitchen table\n\
2. in a sunlit garden with green grass\n\
3. on a snowy sidewalk at dusk\n\
4. on a marble shelf in a museum\n";

fn record(ctx: &Context, command: &str, outputs: Vec<String>) -> RunRecord {
    RunRecord {
        command: command.into(),
        argv: ctx.argv.clone(),
        seed: ctx.config.seed,
        config_hash: ctx.config.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        outputs,
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_model(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<(DenoiserParams, NoiseSchedule), CliError> {
    match checkpoint {
        Some(dir) => {
            let (params, info) = load_checkpoint(dir)?;
            let sched = NoiseSchedule::new(info.schedule, cfg.schedule.steps)?;
            log::info!("loaded checkpoint {} (step {})", dir.display(), info.step);
            Ok((params, sched))
        }
        None => {
            log::warn!("no --checkpoint given; using randomly initialized weights");
            let params = DenoiserParams::init(cfg.model.clone(), cfg.seed)?;
            Ok((params, cfg.schedule.schedule()?))
        }
    }
}

fn extractor(spec: &str) -> Result<Box<dyn FeatureExtractor>, CliError> {
    match spec.split_once(':') {
        _ if spec == "toy" => Ok(Box::new(ToyExtractor::default())),
        Some(("cmd", program)) if !program.is_empty() => Ok(Box::new(CommandExtractor {
            program: program.into(),
        })),
        _ => Err(CliError::Config(format!(
            "unknown extractor `{spec}` (expected toy or cmd:<program>)"
        ))),
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(super) fn gen_set(ctx: Context, args: GenSetArgs) -> Result<(), CliError> {
    let mut cfg = ctx.config.clone();
    let g = &mut cfg.generation;
    if let Some(path) = &args.path {
        g.path = path.parse()?;
    }
    if let Some(v) = args.images {
        g.images = v;
    }
    if let Some(v) = args.steps {
        g.steps = v;
    }
    if let Some(v) = args.warp_fraction {
        g.warp_fraction = v;
    }
    if let Some(v) = args.depth_guidance {
        g.depth_guidance = v;
    }
    if let Some(v) = args.text_guidance {
        g.text_guidance = v;
    }
    if let Some(v) = &args.negative_prompt {
        g.negative_prompt = v.clone();
    }
    if args.no_msa {
        g.msa = false;
    }
    g.validate()?;
    let ctx = Context {
        config: cfg.clone(),
        ..ctx
    };
    let (params, sched) = load_model(&cfg, args.checkpoint.as_deref())?;

    let completer: Box<dyn TextCompleter> = match &args.llm_cmd {
        Some(cmd) => {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts
                .next()
                .ok_or_else(|| CliError::Config("--llm-cmd is empty".into()))?;
            Box::new(CommandCompleter {
                program,
                args: parts.collect(),
            })
        }
        None => Box::new(CannedCompleter {
            responses: vec![(String::new(), CANNED_BACKGROUNDS.into())],
        }),
    };
    let template = PromptTemplate::standard(match cfg.generation.path {
        GenPath::Rigid => TemplateKind::RigidBackground,
        GenPath::Deformable => TemplateKind::DeformableBackground,
    });

    let scene_rng = Rng::new(cfg.seed).child(SCENE_STREAM);
    let mut jobs = Vec::with_capacity(args.sets);
    for i in 0..args.sets {
        let scene = Scene::procedural(scene_rng.child(i as u64).next_u64());
        let subject = scene.description();
        let instruction = template.render(&template.standard_slots(&subject))?;
        let backgrounds = completer.complete(&instruction)?;
        if backgrounds.is_empty() {
            return Err(CliError::Config(
                "the captioner returned no captions".into(),
            ));
        }
        let prompts = (0..cfg.generation.images)
            .map(|k| format!("{subject}, {}", backgrounds[k % backgrounds.len()]))
            .collect();
        jobs.push(SetJob {
            request: SetRequest {
                set_id: format!("set-{i:04}"),
                object_description: subject,
                prompts,
            },
            scene: Some(scene),
        });
    }

    log::info!(
        "generating {} {:?} sets of {} images",
        jobs.len(),
        cfg.generation.path,
        cfg.generation.images
    );
    let results = generate_sets(&cfg.generation, &jobs, &params, &sched);
    create_dir(&args.out)?;
    let manifest_path = args.out.join("manifest.jsonl");
    let mut writer = ManifestWriter::create(&manifest_path)?;
    let mut outputs = vec!["manifest.jsonl".to_string()];
    let mut written = 0;
    for (job, result) in jobs.iter().zip(results) {
        let set = match result {
            Ok(set) => set,
            Err(e) => {
                log::warn!("set {} skipped: {e}", job.request.set_id);
                continue;
            }
        };
        writer.append(&ManifestEntry {
            set: set.clone(),
            filter: None,
        })?;
        for (k, x) in set.images.iter().enumerate() {
            let rel = format!("{}/image_{k}.png", set.set_id);
            write_png(&latent_to_image(x), &args.out.join(&rel))?;
            outputs.push(rel);
        }
        if args.dump_mask {
            let (h, w) = (params.config.height, params.config.width);
            let layout = TokenLayout::new(set.images.len(), params.config.text_len, h, w)
                .map_err(DenoiserError::from)?;
            let biases = build_msa_mask(&layout, &set.masks, false).map_err(DenoiserError::from)?;
            for (k, bias) in biases.iter().enumerate() {
                let rel = format!("{}/msa_mask_{k}.pgm", set.set_id);
                let path = args.out.join(&rel);
                write_bias_pgm(bias, &path).map_err(|e| CliError::io(&path, e))?;
                outputs.push(rel);
            }
        }
        written += 1;
    }
    writer.finish()?;
    if written == 0 && !jobs.is_empty() {
        return Err(CliError::Config("no set could be generated".into()));
    }
    println!("wrote {written} sets to {}", manifest_path.display());
    write_provenance(&args.out, &record(&ctx, "gen-set", outputs))
}

#[derive(Serialize)]
struct FilterLine<'a> {
    set_id: &'a str,
    kept: bool,
    reasons: &'a [RejectReason],
    aesthetic: &'a [f64],
    similarity: f64,
}

pub(super) fn filter(ctx: Context, args: FilterArgs) -> Result<(), CliError> {
    let mut th = ctx.config.filter;
    if let Some(v) = args.aesthetic_min {
        th.aesthetic_min = v;
    }
    if let Some(v) = args.similarity_min {
        th.similarity_min = v;
    }
    th.validate()?;
    let extractor = extractor(&args.extractor)?;
    let entries = read_manifest(&args.manifest)?;
    let decisions: Vec<FilterDecision> = entries
        .par_iter()
        .map(|e| filter_set(&e.set, extractor.as_ref(), &ToyAesthetic, &th))
        .collect::<Result<_, _>>()?;

    let out_dir = parent_dir(&args.out);
    create_dir(&out_dir)?;
    let report_path = out_dir.join("filter_report.jsonl");
    let mut report = String::new();
    let mut kept = Vec::new();
    for (entry, decision) in entries.into_iter().zip(decisions) {
        let line = FilterLine {
            set_id: &entry.set.set_id,
            kept: decision.kept,
            reasons: &decision.reasons,
            aesthetic: &decision.aesthetic,
            similarity: decision.similarity,
        };
        report += &serde_json::to_string(&line)?;
        report.push('\n');
        if decision.kept {
            kept.push(ManifestEntry {
                set: entry.set,
                filter: Some(decision),
            });
        } else {
            log::info!("rejected {}: {:?}", line.set_id, decision.reasons);
        }
    }
    let total = report.lines().count();
    fs::write(&report_path, report).map_err(|e| CliError::io(&report_path, e))?;
    write_manifest(&kept, &args.out)?;
    println!("kept {} of {total} sets", kept.len());
    let outputs = vec![
        args.out.display().to_string(),
        report_path.display().to_string(),
    ];
    write_provenance(&out_dir, &record(&ctx, "filter", outputs))
}

pub(super) fn train(ctx: Context, args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = ctx.config.clone();
    let t = &mut cfg.train;
    if let Some(v) = args.steps {
        t.steps = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.sets {
        t.sets = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    let ctx = Context {
        config: cfg.clone(),
        ..ctx
    };
    let t = &cfg.train;
    if !(t.learning_rate >= 0.0) {
        return Err(CliError::Config(format!(
            "learning rate {} must be non-negative",
            t.learning_rate
        )));
    }
    let mc = cfg.model.clone();
    mc.validate()?;
    let sched = cfg.schedule.schedule()?;
    let sets: Vec<ObjectSet> = match &args.manifest {
        Some(path) => read_manifest(path)?
            .into_iter()
            .map(|e| ObjectSet {
                description: e.set.object_description,
                depths: e
                    .set
                    .images
                    .iter()
                    .map(|_| Tensor::zeros(&[mc.height, mc.width, mc.cond_channels.max(1)]))
                    .collect(),
                images: e.set.images,
                masks: e.set.masks,
            })
            .collect(),
        None => render_object_sets(t.sets, t.views, mc.height, mc.width, cfg.seed)?,
    };
    if sets.is_empty() {
        return Err(CliError::Config("no training sets".into()));
    }
    let shape = mc.latent_shape();
    if let Some(bad) = sets
        .iter()
        .flat_map(|s| &s.images)
        .find(|x| x.shape() != shape)
    {
        return Err(CliError::Config(format!(
            "training image {:?} does not match the model's latent shape {shape:?}",
            bad.shape()
        )));
    }

    let dropout = Dropout {
        refs: t.drop_refs,
        caption: t.drop_caption,
        both: t.drop_both,
    };
    let mut params = DenoiserParams::init(mc.clone(), cfg.seed)?;
    let mut adam = Adam::new(&params, t.learning_rate);
    let mut rng = Rng::new(cfg.seed).child(1);
    create_dir(&args.out)?;
    let mut outputs = Vec::new();
    let mut losses = Vec::with_capacity(t.steps);
    let log_every = (t.steps / 10).max(1);
    for step in 0..t.steps {
        let batch = make_samples(&sets, t.max_refs, &mc, &sched, &dropout, &mut rng);
        let loss = match train_step(&batch, &mut params, &mut adam, &sched) {
            Ok(loss) => loss,
            Err(DenoiserError::Divergence {
                step,
                loss,
                snapshot,
            }) => {
                let dir = args.out.join("diverged");
                let info = CheckpointInfo {
                    schedule: sched.mode,
                    step,
                };
                save_checkpoint(&dir, &snapshot.params, &info)?;
                log::error!("snapshot before divergence saved to {}", dir.display());
                return Err(DenoiserError::Divergence {
                    step,
                    loss,
                    snapshot,
                }
                .into());
            }
            Err(e) => return Err(e.into()),
        };
        losses.push(loss);
        if (step + 1) % log_every == 0 {
            log::info!("step {}/{}: loss {loss:.5}", step + 1, t.steps);
        }
        if t.checkpoint_every > 0 && (step + 1) % t.checkpoint_every == 0 {
            let rel = format!("checkpoint-{}", step + 1);
            let info = CheckpointInfo {
                schedule: sched.mode,
                step: step as u64 + 1,
            };
            save_checkpoint(&args.out.join(&rel), &params, &info)?;
            outputs.push(rel);
        }
    }
    let info = CheckpointInfo {
        schedule: sched.mode,
        step: t.steps as u64,
    };
    save_checkpoint(&args.out.join("checkpoint"), &params, &info)?;
    outputs.push("checkpoint".into());

    let csv_path = args.out.join("loss.csv");
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv += &format!("{i},{l:.8}\n");
    }
    fs::write(&csv_path, csv).map_err(|e| CliError::io(&csv_path, e))?;
    outputs.push("loss.csv".into());
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("trained {} steps: loss {first:.5} -> {last:.5}", t.steps);
    }
    write_provenance(&args.out, &record(&ctx, "train", outputs))
}

/// Resolves `SET` or `SET/INDEX` reference specs against a manifest.
fn resolve_refs(specs: &[String], manifest: Option<&Path>) -> Result<Vec<Tensor>, CliError> {
    if specs.is_empty() {
        return Ok(Vec::new());
    }
    let path = manifest.ok_or_else(|| CliError::Config("--refs needs --manifest".into()))?;
    let entries = read_manifest(path)?;
    let mut refs = Vec::new();
    for spec in specs {
        let (id, index) = match spec.split_once('/') {
            Some((id, k)) => {
                let k = k
                    .parse::<usize>()
                    .map_err(|_| CliError::Config(format!("bad reference index in `{spec}`")))?;
                (id, Some(k))
            }
            None => (spec.as_str(), None),
        };
        let set = &entries
            .iter()
            .find(|e| e.set.set_id == id)
            .ok_or_else(|| CliError::Config(format!("no set `{id}` in {}", path.display())))?
            .set;
        match index {
            Some(k) => refs.push(
                set.images
                    .get(k)
                    .ok_or_else(|| CliError::Config(format!("set `{id}` has no image {k}")))?
                    .clone(),
            ),
            None => refs.extend(set.images.iter().cloned()),
        }
    }
    Ok(refs)
}

pub(super) fn sample(ctx: Context, args: SampleArgs) -> Result<(), CliError> {
    let mut cfg = ctx.config.clone();
    let gs = &mut cfg.guidance;
    if let Some(v) = args.steps {
        gs.steps = v;
    }
    if let Some(v) = &args.mode {
        gs.mode = v.clone();
    }
    if let Some(v) = args.lambda_i {
        gs.lambda_i = v;
    }
    if let Some(v) = args.lambda_i_ramp {
        gs.lambda_i_ramp = v;
    }
    if let Some(v) = args.lambda_c {
        gs.lambda_c = v;
    }
    if let Some(v) = args.phi {
        gs.phi = v;
    }
    let guidance = gs.guidance()?;
    let ctx = Context {
        config: cfg.clone(),
        ..ctx
    };
    let (params, sched) = load_model(&cfg, args.checkpoint.as_deref())?;
    let mc = &params.config;
    let shape = mc.latent_shape();
    let refs = resolve_refs(&args.refs, args.manifest.as_deref())?;
    if let Some(bad) = refs.iter().find(|r| r.shape() != shape) {
        return Err(CliError::Config(format!(
            "reference {:?} does not match the model's latent shape {shape:?}",
            bad.shape()
        )));
    }
    let caption =
        (!args.prompt.is_empty()).then(|| embed_caption(&args.prompt, mc.text_len, mc.text_dim));
    let negative = args
        .negative_prompt
        .as_deref()
        .map(|p| embed_caption(p, mc.text_len, mc.text_dim));

    create_dir(&args.out)?;
    let root = Rng::new(cfg.seed);
    let mut outputs = Vec::new();
    for k in 0..args.count {
        let mut rng = root.child(k as u64);
        let ref_noise: Vec<Tensor> = refs
            .iter()
            .map(|_| Tensor::randn(&shape, &mut rng))
            .collect();
        let model = DenoiserModel {
            params: &params,
            sched: &sched,
            caption: caption.as_ref(),
            negative: negative.as_ref(),
            refs: &refs,
            ref_noise: &ref_noise,
            depth: None,
        };
        let x = euler_sample(
            &model,
            &sched,
            &guidance,
            &shape,
            &mut rng,
            cfg.guidance.steps,
        )?;
        let name = format!("sample_{k}");
        let tensor_path = args.out.join(format!("{name}.sycd"));
        container::save(&tensor_path, &x).map_err(DenoiserError::from)?;
        write_png(&x, &args.out.join(format!("{name}.png")))?;
        println!("{name}.sycd {}", sha256_file(&tensor_path)?);
        outputs.push(format!("{name}.sycd"));
        outputs.push(format!("{name}.png"));
    }
    write_provenance(&args.out, &record(&ctx, "sample", outputs))
}

pub(super) fn eval(ctx: Context, args: EvalArgs) -> Result<(), CliError> {
    if args.scores.is_none() && args.manifest.is_none() {
        return Err(CliError::Config(
            "nothing to evaluate: give --scores and/or --manifest".into(),
        ));
    }
    let mut outputs = Vec::new();
    if let Some(path) = &args.scores {
        let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        let rows = read_scores(file)?;
        let summary = match &args.out {
            Some(out) => {
                create_dir(&parent_dir(out))?;
                let file = fs::File::create(out).map_err(|e| CliError::io(out, e))?;
                outputs.push(out.display().to_string());
                write_scores(&rows, &args.method, file)?
            }
            None => write_scores(&rows, &args.method, std::io::stdout().lock())?,
        };
        eprintln!(
            "{}: image {:.3}, text {:.3}, geometric {:.3} over {} samples",
            args.method,
            summary.mean_image,
            summary.mean_text,
            summary.geometric_of_means,
            summary.samples
        );
    }
    if let Some(path) = &args.manifest {
        let extractor = extractor(&args.extractor)?;
        let entries = read_manifest(path)?;
        let sets: Vec<Vec<Tensor>> = entries.iter().map(object_crops).collect();
        let report = intra_cluster_similarity(&sets, extractor.as_ref())?;
        let mut stdout = std::io::stdout().lock();
        for (entry, sim) in entries.iter().zip(&report.per_set) {
            let value = sim.map_or("skipped".to_string(), |s| format!("{s:.4}"));
            writeln!(stdout, "{} {value}", entry.set.set_id).map_err(|e| CliError::io(path, e))?;
        }
        match report.mean {
            Some(m) => writeln!(stdout, "intra-cluster similarity {m:.4}"),
            None => writeln!(stdout, "intra-cluster similarity undefined"),
        }
        .map_err(|e| CliError::io(path, e))?;
    }
    if let Some(out) = &args.out {
        write_provenance(&parent_dir(out), &record(&ctx, "eval", outputs))?;
    }
    Ok(())
}

/// Object-level views of a set: each image cropped to its mask on mid gray,
/// or the whole image when its mask is empty.
fn object_crops(entry: &ManifestEntry) -> Vec<Tensor> {
    entry
        .set
        .images
        .iter()
        .zip(&entry.set.masks)
        .map(|(x, mask)| {
            let image = latent_to_image(x);
            masked_crop(&image, mask, MID_GRAY).unwrap_or(image)
        })
        .collect()
}
