use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use shadowformer_core::checkpoint::Checkpoint;
use shadowformer_core::datasets::{load_triplet, scan, Split};
use shadowformer_core::imaging::{binarize_mask, load_image, save_image, DEFAULT_MASK_THRESHOLD};
use shadowformer_core::metrics::{evaluate_dataset, MetricsReport, Region};
use shadowformer_core::model::{BottleneckMixer, StageMixer};
use shadowformer_core::retinex::{generate_dataset, SceneParams};
use shadowformer_core::rng::derive_seed;
use shadowformer_core::training::{history_csv, moving_average_ends, train_loop, LossRecord};
use shadowformer_core::{param_count, ModelConfig, ShadowFormer};

use crate::config::RunConfig;
use crate::inference::{attention_heatmap, overlay, predict_any_size};

pub struct SynthOptions {
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub feather: usize,
    pub jitter: f64,
}

pub fn synth(o: &SynthOptions) -> Result<()> {
    let params = SceneParams {
        feather_px: o.feather,
        illum_jitter: o.jitter,
        ..SceneParams::default()
    };
    let train = generate_dataset(o.train, o.size, o.size, o.seed, &o.out, "train", &params)?;
    let mut coverage: Vec<f64> = train.entries.iter().map(|e| e.coverage).collect();
    if o.test > 0 {
        let test_seed = derive_seed(o.seed, "test-split");
        let test = generate_dataset(o.test, o.size, o.size, test_seed, &o.out, "test", &params)?;
        coverage.extend(test.entries.iter().map(|e| e.coverage));
    }
    let mean = coverage.iter().sum::<f64>() / coverage.len().max(1) as f64;
    println!(
        "wrote {} train + {} test triplets ({}x{}, mean shadow coverage {:.3}) to {}",
        o.train,
        o.test,
        o.size,
        o.size,
        mean,
        o.out.display()
    );
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn describe_count(n: usize) -> String {
    format!("{n} ({:.2}M)", n as f64 / 1e6)
}

fn summarize(history: &[LossRecord]) {
    let window = (history.len() / 2).clamp(1, 100);
    if let Some((first, last)) = moving_average_ends(history, window) {
        println!("loss ({window}-step average): first {first:.5}, last {last:.5}, ratio {:.3}", last / first);
    }
}

fn train_model(run: &RunConfig, model: &ModelConfig, out: &Path) -> Result<(ShadowFormer, Vec<LossRecord>)> {
    let records = scan(&run.dataset(Split::Train)?)?;
    log::info!("{} training triplets, {} steps", records.len(), run.train.total_steps);
    let outcome = train_loop(records, &run.train, model, Some(out))?;
    write(&out.join("loss.csv"), &history_csv(&outcome.history))?;
    Ok((outcome.state.model, outcome.history))
}

pub fn train(run: &RunConfig) -> Result<()> {
    println!("variant {}: {} parameters", run.variant, describe_count(param_count(&run.model)));
    let out = run.out_or("shadowformer-run");
    write(&out.join("run.toml"), &run.to_toml())?;
    let (_, history) = train_model(run, &run.model, &out)?;
    summarize(&history);
    println!("checkpoint and loss.csv written to {}", out.display());
    Ok(())
}

/// Runs `model` over the test split, writing `{id}.png` into `dir`.
fn write_results(run: &RunConfig, model: &ShadowFormer, dir: &Path) -> Result<()> {
    let records = scan(&run.dataset(Split::Test)?)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for r in &records {
        let t = load_triplet(r)?;
        let pred = predict_any_size(model, &t.shadow, &t.mask)?;
        save_image(&pred, &dir.join(format!("{}.png", r.id)))?;
    }
    log::info!("{} results written to {}", records.len(), dir.display());
    Ok(())
}

fn score(run: &RunConfig, results: &Path) -> Result<MetricsReport> {
    Ok(evaluate_dataset(results, &run.dataset(Split::Test)?, run.rmse_mode, run.resolution)?)
}

pub fn eval(run: &RunConfig, checkpoint: Option<&Path>, results: Option<&Path>) -> Result<()> {
    let out = run.out_or("shadowformer-eval");
    let results = match (checkpoint, results) {
        (_, Some(dir)) => dir.to_path_buf(),
        (Some(ck), None) => {
            let model = Checkpoint::load(ck)?.to_model()?;
            let dir = out.join("results");
            write_results(run, &model, &dir)?;
            dir
        }
        (None, None) => bail!("pass --checkpoint or --results"),
    };
    let report = score(run, &results)?;
    let table = report.to_table();
    print!("{table}");
    write(&out.join("report.txt"), &table)?;
    write(&out.join("report.csv"), &report.to_csv())?;
    Ok(())
}

pub fn infer(run: &RunConfig, checkpoint: &Path, input: &Path, mask: &Path) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let img = load_image(input)?;
    if img.channels() != 3 {
        bail!("{} is not an RGB image", input.display());
    }
    let mask = binarize_mask(&load_image(mask)?, DEFAULT_MASK_THRESHOLD);
    if !mask.matches(&img) {
        bail!("mask is {}x{} but the image is {}x{}", mask.height(), mask.width(), img.height(), img.width());
    }
    let out = run.out_or("shadowformer-output.png");
    save_image(&predict_any_size(&model, &img, &mask)?, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// The four architecture variants compared by `ablate`.
pub fn ablation_variant(base: &ModelConfig, index: u8) -> (&'static str, ModelConfig) {
    let mut cfg = base.clone();
    let label = match index {
        1 => {
            cfg.stage_mixer = StageMixer::WindowAttention;
            "window attention in stages"
        }
        2 => {
            cfg.bottleneck_mixer = BottleneckMixer::ChannelAttention;
            "channel-only bottleneck"
        }
        3 => {
            cfg.sigma = 0.0;
            "unmasked bottleneck attention"
        }
        _ => "full model",
    };
    (label, cfg)
}

pub fn ablation_table(rows: &[(u8, &str, MetricsReport)]) -> (String, String) {
    let mut table = format!("{:<34}", "variant");
    let mut csv = String::from("variant,label");
    for region in Region::ALL {
        let _ = write!(table, " {:>9} {:>8}", format!("{} psnr", region.label()), format!("{} ssim", region.label()));
        let _ = write!(csv, ",{0}_psnr,{0}_ssim", region.label().to_ascii_lowercase());
    }
    table.push('\n');
    csv.push('\n');
    for (index, label, report) in rows {
        let _ = write!(table, "{:<34}", format!("{index} {label}"));
        let _ = write!(csv, "{index},{label}");
        for region in Region::ALL {
            let r = report.row(region);
            let _ = write!(table, " {:>9.3} {:>8.4}", r.psnr, r.ssim);
            let _ = write!(csv, ",{:.6},{:.6}", r.psnr, r.ssim);
        }
        table.push('\n');
        csv.push('\n');
    }
    (table, csv)
}

pub fn ablate(run: &RunConfig, variants: &[u8]) -> Result<()> {
    let out = run.out_or("shadowformer-ablate");
    let selected: Vec<u8> = if variants.is_empty() { vec![1, 2, 3, 4] } else { variants.to_vec() };
    let mut rows = Vec::new();
    for index in selected {
        let (label, cfg) = ablation_variant(&run.model, index);
        println!("variant {index} ({label}): {} parameters", describe_count(param_count(&cfg)));
        let dir = out.join(format!("variant_{index}"));
        let (model, history) = train_model(run, &cfg, &dir).with_context(|| format!("variant {index}"))?;
        summarize(&history);
        let results = dir.join("results");
        write_results(run, &model, &results)?;
        rows.push((index, label, score(run, &results).with_context(|| format!("variant {index}"))?));
    }
    let (table, csv) = ablation_table(&rows);
    print!("{table}");
    write(&out.join("ablation.txt"), &table)?;
    write(&out.join("ablation.csv"), &csv)?;
    Ok(())
}

pub fn viz_attn(run: &RunConfig, checkpoint: &Path, input: &Path, mask: &Path, points: &[(usize, usize)]) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let img = load_image(input)?;
    let mask = binarize_mask(&load_image(mask)?, DEFAULT_MASK_THRESHOLD);
    if !mask.matches(&img) {
        bail!("mask is {}x{} but the image is {}x{}", mask.height(), mask.width(), img.height(), img.width());
    }
    let out = run.out_or("shadowformer-attn");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for &(y, x) in points {
        let heat = attention_heatmap(&model, &img, &mask, (y, x))?;
        let path = out.join(format!("attn_{y}_{x}.png"));
        save_image(&overlay(&img, &heat, (y, x))?, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
