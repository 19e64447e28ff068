//! Training and evaluation drivers: directory datasets in, checkpoints and
//! metric reports out. Every random choice derives from the run seed, so a
//! repeated run reproduces its outputs byte for byte.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anomamba_core::blocks::{Encoder, EncoderKind};
use anomamba_core::metrics::MetricsReport;
use anomamba_core::model::Model;
use anomamba_core::optim::AdamState;
use anomamba_core::{ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{io_err, Error, Result};
use crate::imagefmt;
use crate::report::{self, ClassReport};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream seed for (run, epoch, sample); samples are numbered by position in
/// the sorted dataset so the noise draw is independent of batch shuffling.
fn derive_seed(base: u64, epoch: u64, sample: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base).wrapping_add(epoch)).wrapping_add(sample))
}

const SHUFFLE_STREAM: u64 = u64::MAX;

pub fn build_encoder(cfg: &RunConfig) -> Result<Encoder> {
    match cfg.encoder_kind()? {
        EncoderKind::Tiny => Ok(Encoder::tiny(cfg.seed)),
        EncoderKind::ResNet34 => {
            if cfg.encoder_weights.is_empty() {
                return Err(Error::Config(
                    "encoder = resnet34 requires encoder_weights = <archive>".into(),
                ));
            }
            let mut store = ParamStore::new();
            for (name, t) in archive::read_tensors(Path::new(&cfg.encoder_weights))? {
                store.add(name, t, false)?;
            }
            Ok(Encoder::resnet34(store)?)
        }
    }
}

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let encoder = build_encoder(cfg)?;
    Ok(Model::build(cfg.model_config(), encoder, cfg.image_size)?)
}

/// Classes named in the config, or every class directory under the data
/// root when none are named.
pub fn resolve_classes(cfg: &RunConfig) -> Result<Vec<String>> {
    if cfg.classes.is_empty() {
        dataset::list_classes(Path::new(&cfg.data_root))
    } else {
        Ok(cfg.classes.clone())
    }
}

fn checkpoint_name(multi_class: bool, class: &str) -> String {
    if multi_class { "model.tensors".into() } else { format!("model_{class}.tensors") }
}

fn loss_log_name(multi_class: bool, class: &str) -> String {
    if multi_class { "loss.tsv".into() } else { format!("loss_{class}.tsv") }
}

/// Trains one model on the given image files and writes its checkpoint and
/// loss log. Returns the final-epoch mean loss.
fn train_one(
    cfg: &RunConfig,
    train_paths: &[PathBuf],
    out_dir: &Path,
    ckpt_name: &str,
    log_name: &str,
) -> Result<f32> {
    let images: Vec<Tensor> = train_paths
        .iter()
        .map(|p| dataset::load_image_tensor(p, cfg.image_size))
        .collect::<Result<_>>()?;
    if images.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    let mut model = build_model(cfg)?;
    let mut opt = AdamState::new(model.store(), cfg.adam_config())?;
    let noise = cfg.noise_settings()?;

    let log_path = out_dir.join(log_name);
    let mut log = std::fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut last_mean = f32::NAN;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, SHUFFLE_STREAM));
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| images[i].clone()).collect();
            let stacked = dataset::stack_batch(&batch)?;
            let seeds: Vec<u64> =
                chunk.iter().map(|&i| derive_seed(cfg.seed, epoch as u64, i as u64)).collect();
            let loss = model.train_step(&stacked, &noise, &seeds, &mut opt)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "loss became {loss} at epoch {epoch}, batch {batches}"
                )));
            }
            total += loss as f64;
            batches += 1;
        }
        last_mean = (total / batches as f64) as f32;
        writeln!(log, "{epoch}\t{last_mean}").map_err(|e| io_err(&log_path, e))?;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
            let p = out_dir.join(format!("epoch{epoch:04}_{ckpt_name}"));
            archive::save_checkpoint(&p, model.store(), &opt)?;
        }
        log::info!("epoch {epoch}/{} loss {last_mean}", cfg.epochs);
    }
    if !noise.enabled && model.noise_invocations() != 0 {
        return Err(Error::Train("noise generator ran with use_noise = false".into()));
    }
    archive::save_checkpoint(&out_dir.join(ckpt_name), model.store(), &opt)?;
    Ok(last_mean)
}

/// Runs training per the config. Multi-class mode pools every class's
/// training images into one model; otherwise each class gets its own.
/// Returns the checkpoint paths written.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let cfg_path = out_dir.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| io_err(&cfg_path, e))?;
    let classes = resolve_classes(cfg)?;
    let root = Path::new(&cfg.data_root);
    let mut written = Vec::new();
    if cfg.multi_class {
        let mut paths = Vec::new();
        for class in &classes {
            paths.extend(dataset::index_dataset(root, class)?.train);
        }
        let name = checkpoint_name(true, "");
        train_one(cfg, &paths, out_dir, &name, &loss_log_name(true, ""))?;
        written.push(out_dir.join(name));
    } else {
        for class in &classes {
            let paths = dataset::index_dataset(root, class)?.train;
            let name = checkpoint_name(false, class);
            train_one(cfg, &paths, out_dir, &name, &loss_log_name(false, class))?;
            written.push(out_dir.join(name));
        }
    }
    Ok(written)
}

/// Builds the model and loads trained parameters. `checkpoint` is either a
/// checkpoint file or the training output directory.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path, class: &str) -> Result<Model> {
    let path = if checkpoint.is_dir() {
        checkpoint.join(checkpoint_name(cfg.multi_class, class))
    } else {
        checkpoint.to_path_buf()
    };
    let mut model = build_model(cfg)?;
    archive::load_params(&path, model.store_mut())?;
    Ok(model)
}

fn class_metrics(cfg: &RunConfig, model: &Model, class: &str) -> Result<MetricsReport> {
    let idx = dataset::index_dataset(Path::new(&cfg.data_root), class)?;
    let size = cfg.image_size;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for chunk in idx.test.chunks(cfg.batch_size) {
        let imgs: Vec<Tensor> = chunk
            .iter()
            .map(|s| dataset::load_image_tensor(&s.path, size))
            .collect::<Result<_>>()?;
        let batch = dataset::stack_batch(&imgs)?;
        let results = model.infer(&batch, size, size, cfg.smooth_sigma, cfg.score_stat_value()?)?;
        for (s, r) in chunk.iter().zip(results) {
            scores.push(r.image_score);
            labels.push(s.is_defect());
            maps.push(r.pixel_map);
            masks.push(match &s.mask {
                Some(m) => dataset::load_mask_tensor(m, size)?,
                None => Tensor::zeros(&[size, size]),
            });
        }
    }
    Ok(MetricsReport::compute(&scores, &labels, &maps, &masks, cfg.fpr_limit)?)
}

/// Evaluates on every resolved class and writes the metric report. Returns
/// the per-class results.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, report_path: &Path) -> Result<Vec<ClassReport>> {
    cfg.validate()?;
    let classes = resolve_classes(cfg)?;
    let mut out = Vec::new();
    let mut shared: Option<Model> = None;
    for class in &classes {
        let metrics = if cfg.multi_class {
            if shared.is_none() {
                shared = Some(load_model(cfg, checkpoint, class)?);
            }
            class_metrics(cfg, shared.as_ref().unwrap(), class)?
        } else {
            let model = load_model(cfg, checkpoint, class)?;
            class_metrics(cfg, &model, class)?
        };
        log::info!("class {class}: image_auroc {}", metrics.image_auroc);
        out.push(ClassReport { class: class.clone(), metrics });
    }
    report::write(report_path, &out)?;
    Ok(out)
}

/// Scores one image file; the anomaly map comes back at the image's own
/// resolution regardless of the model input size.
pub fn infer_file(cfg: &RunConfig, model: &Model, path: &Path) -> Result<(f32, Tensor)> {
    let raw = imagefmt::load_image(path)?;
    let (orig_w, orig_h) = (raw.width, raw.height);
    let img = dataset::load_image_tensor(path, cfg.image_size)?;
    let batch = dataset::stack_batch(std::slice::from_ref(&img))?;
    let mut results =
        model.infer(&batch, orig_h, orig_w, cfg.smooth_sigma, cfg.score_stat_value()?)?;
    let r = results.pop().ok_or_else(|| Error::Train("inference returned no result".into()))?;
    debug_assert_eq!(r.pixel_map.shape(), &[orig_h, orig_w]);
    Ok((r.image_score, r.pixel_map))
}
