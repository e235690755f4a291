//! Subcommand implementations. Each one is a pure function of
//! (configuration, dataset bytes, seed): identical inputs produce
//! byte-identical outputs.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use cca_core::checkpoint;
use cca_core::dataset::{load_dataset, save_dataset};
use cca_core::embedder;
use cca_core::eval::{self, RetrievalReport};
use cca_core::export;
use cca_core::gen;
use cca_core::gradcheck::gradcheck_model;
use cca_core::model::CcaModel;
use cca_core::rng::{sub_rng, Domain};
use cca_core::train::{train, EpochStats, ResumeState};
use cca_core::triplet::TripletSampler;
use cca_core::{Error, Result};

use crate::run_config::RunConfig;

pub const MODEL_FILE: &str = "model.cca";
pub const STATE_FILE: &str = "state.cca";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const ATTENTION_FILE: &str = "attention.tsv";

pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    cfg.echo_into(out_dir)?;
    let dataset = gen::generate(&cfg.data, cfg.seed, cfg.threads)?;
    save_dataset(out_dir, &dataset)?;
    let m = &dataset.manifest;
    println!(
        "generated {} items ({} train / {} val / {} gallery / {} query), {} attributes, image {}x{} -> {}",
        m.items.len(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.gallery.len(),
        m.splits.query.len(),
        m.attributes.len(),
        m.image_size,
        m.image_size,
        out_dir.display()
    );
    Ok(())
}

fn init_model(cfg: &RunConfig) -> Result<CcaModel> {
    let mut rng = sub_rng(cfg.seed, Domain::Init, 0);
    CcaModel::init(cfg.encoder, &mut rng)
}

pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let data = load_dataset(data_dir)?;
    cfg.echo_into(out_dir)?;
    let mut model = init_model(cfg)?;

    let resume_state = match resume {
        Some(path) => {
            let state = checkpoint::load_train_state(path, &mut model, cfg.train.lr)?;
            log::info!(
                "resuming from {} at epoch {} (best val acc {:.4})",
                path.display(),
                state.next_epoch,
                state.best_val_acc
            );
            Some(ResumeState {
                adam: state.adam,
                next_epoch: state.next_epoch,
                best_val_acc: state.best_val_acc,
            })
        }
        None => None,
    };
    let resuming = resume_state.is_some();

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = if resuming {
        fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        fs::File::create(&metrics_path)?
    };

    let start = Instant::now();
    let mut sink_err = None;
    let outcome = train(
        &mut model,
        &data,
        &cfg.train,
        resume_state,
        cfg.threads,
        |stats: &EpochStats| {
            // one line per epoch, visible as soon as the epoch ends
            if let Err(e) = writeln!(metrics, "{}\t{}\t{}", stats.epoch, stats.mean_loss, stats.val_acc) {
                sink_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = sink_err {
        return Err(e.into());
    }

    checkpoint::save_params(&out_dir.join(MODEL_FILE), cfg.encoder.precision, &outcome.best_params)?;
    checkpoint::save_train_state(
        &out_dir.join(STATE_FILE),
        &model,
        &outcome.adam,
        outcome.next_epoch,
        outcome.best_val_acc,
    )?;
    println!(
        "trained {} epoch(s) in {:.1}s; best val triplet accuracy {:.4}{} -> {}",
        outcome.history.len(),
        start.elapsed().as_secs_f64(),
        outcome.best_val_acc.max(0.0),
        outcome
            .best_epoch
            .map(|e| format!(" at epoch {e}"))
            .unwrap_or_default(),
        out_dir.display()
    );
    Ok(())
}

fn load_model_for(cfg: &RunConfig, checkpoint_path: &Path, num_attributes: usize) -> Result<CcaModel> {
    if cfg.encoder.num_conditions != num_attributes {
        return Err(Error::Config(format!(
            "configured {} conditions but the dataset has {num_attributes} attributes",
            cfg.encoder.num_conditions
        )));
    }
    let mut model = init_model(cfg)?;
    checkpoint::load_model(checkpoint_path, &mut model)?;
    Ok(model)
}

/// Retrieval mAP over query-vs-gallery plus triplet prediction accuracy on
/// the held-out validation split.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    data_dir: &Path,
    checkpoint_path: &Path,
) -> Result<(RetrievalReport, Vec<String>)> {
    let data = load_dataset(data_dir)?;
    let model = load_model_for(cfg, checkpoint_path, data.manifest.attributes.len())?;

    let gallery_items = embedder::embed_items(&model, &data, &data.manifest.splits.gallery, cfg.threads)?;
    let query_items = embedder::embed_items(&model, &data, &data.manifest.splits.query, cfg.threads)?;
    let gallery = embedder::embedding_records(&gallery_items)?;
    let queries = embedder::embedding_records(&query_items)?;

    let mut retrieval_ids = data.manifest.splits.gallery.clone();
    retrieval_ids.extend_from_slice(&data.manifest.splits.query);
    let labels = data.manifest.label_table(&retrieval_ids)?;
    let mut report = eval::map_by_attribute(&queries, &gallery, &labels, cfg.threads)?;

    let val_table = data.manifest.label_table(&data.manifest.splits.val)?;
    let val_sampler = TripletSampler::new(&val_table)?;
    let mut val_rng = sub_rng(cfg.seed, Domain::Validation, 0);
    let triplets = val_sampler.sample_triplets(cfg.train.val_triplets, &mut val_rng);
    let val_map = embedder::embed_split_map(&model, &data, &data.manifest.splits.val, cfg.threads)?;
    report.triplet_accuracy = Some(eval::triplet_prediction_accuracy(&val_map, &triplets)?);

    Ok((report, data.manifest.attribute_names()))
}

pub fn cmd_eval(cfg: &RunConfig, data_dir: &Path, checkpoint_path: &Path, out_dir: &Path) -> Result<()> {
    cfg.echo_into(out_dir)?;
    let (report, attr_names) = evaluate_checkpoint(cfg, data_dir, checkpoint_path)?;
    let text = eval::format_report(
        &[(cfg.encoder.embed_type.as_str().to_string(), report)],
        &attr_names,
    );
    fs::write(out_dir.join(REPORT_FILE), &text)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_embed(cfg: &RunConfig, data_dir: &Path, checkpoint_path: &Path, out_dir: &Path) -> Result<()> {
    cfg.echo_into(out_dir)?;
    let data = load_dataset(data_dir)?;
    let model = load_model_for(cfg, checkpoint_path, data.manifest.attributes.len())?;
    let ids: Vec<_> = data.manifest.items.iter().map(|it| it.id).collect();
    let items = embedder::embed_items(&model, &data, &ids, cfg.threads)?;
    let records = embedder::embedding_records(&items)?;
    export::write_embeddings(&out_dir.join(EMBEDDINGS_FILE), &records)?;
    export::write_attention(&out_dir.join(ATTENTION_FILE), &embedder::attention_records(&items))?;
    println!(
        "exported {} embedding lines and {} attention lines -> {}",
        records.len(),
        records.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let report = gradcheck_model(&cfg.encoder, cfg.train.margin, cfg.seed, None)?;
    print!("{}", report.render());
    if report.passed {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e} (worst: {})",
            report.max_rel_err,
            report.tolerance,
            report
                .worst
                .first()
                .map(|(n, _)| n.as_str())
                .unwrap_or("unknown")
        )))
    }
}
