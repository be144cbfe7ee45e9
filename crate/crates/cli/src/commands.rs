use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use edgegrasp::codec::{load_checkpoint, save_checkpoint, CodecConfig, CodecModel};
use edgegrasp::gan::{self, TrainConfig};
use edgegrasp::grasp::{evaluate, load_dataset, train_detector, CandidateRecord, DetectorConfig, DetectorModel, DetectorTrainConfig};
use edgegrasp::imageio::{list_pngs, load_model_input, png_size, save_model_output, to_pixel_range, INPUT_HEIGHT, INPUT_WIDTH};
use edgegrasp::metrics::batch::{evaluate_pairs, load_pair_dir};
use edgegrasp::metrics::{psnr, ssim, Psnr, SsimParams};
use edgegrasp::net::{
    frame_decode, frame_encode, frame_len, mismatch_gap, request_grasp, ClientConfig, CloudModels, Server, ServerConfig, Status,
};
use edgegrasp::synth;
use edgegrasp_tensor::Tensor;
use serde::Serialize;
use serde_json::json;

use crate::output::{write_json, OutDir};
use crate::{
    BenchArgs, Cli, CodecShapeArgs, Command, DecodeArgs, DetectArgs, EncodeArgs, EvalQualityArgs, MismatchArgs, RequestArgs, ServeArgs,
    TrainCodecArgs, TrainDetectorArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let out = OutDir::create(&cli.out_dir)?;
    match cli.command {
        Command::TrainCodec(a) => train_codec(a, &out),
        Command::TrainDetector(a) => train_detector_cmd(a, &out),
        Command::Encode(a) => encode(a, &out),
        Command::Decode(a) => decode(a, &out),
        Command::EvalQuality(a) => eval_quality(a, &out),
        Command::Detect(a) => detect(a, &out),
        Command::Serve(a) => serve(a, &out),
        Command::Request(a) => request(a, &out),
        Command::Bench(a) => bench(a, &out),
        Command::MismatchDemo(a) => mismatch_demo(a, &out),
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn secs(v: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(v).map_err(|_| anyhow::anyhow!("invalid timeout {v}"))
}

fn load_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let paths = list_pngs(dir)?;
    ensure!(!paths.is_empty(), "no PNG files in {}", dir.display());
    paths
        .iter()
        .map(|p| load_model_input(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn load_codec(path: &Path) -> Result<CodecModel> {
    load_checkpoint(path).with_context(|| format!("loading codec {}", path.display()))
}

fn load_detector(path: &Path) -> Result<DetectorModel> {
    DetectorModel::load(path).with_context(|| format!("loading detector {}", path.display()))
}

fn codec_config(s: &CodecShapeArgs) -> Result<CodecConfig> {
    let config = CodecConfig {
        input_shape: [3, INPUT_HEIGHT, INPUT_WIDTH],
        latent_channels: s.latent_channels,
        extra_downsample_stages: s.extra_downsample,
        residual_blocks: s.residual_blocks,
        feature_channels: s.feature_channels,
    };
    config.validate()?;
    Ok(config)
}

fn hex(id: u64) -> String {
    format!("{id:016x}")
}

fn train_codec(a: TrainCodecArgs, out: &OutDir) -> Result<()> {
    let images = match (&a.images, a.synthetic) {
        (Some(dir), _) => load_dir(dir)?,
        (None, Some(n)) => synth::codec_images(n, (INPUT_HEIGHT, INPUT_WIDTH), a.seed.wrapping_add(100)),
        (None, None) => bail!("give --images or --synthetic"),
    };
    let validation = match &a.val_images {
        Some(dir) => load_dir(dir)?,
        None => synth::codec_images(a.val_synthetic, (INPUT_HEIGHT, INPUT_WIDTH), a.seed.wrapping_add(200)),
    };
    let config = codec_config(&a.shape)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        log_every: a.log_every,
        lambda_adv: a.lambda_adv,
        alpha_mix: a.alpha_mix,
        seed: a.seed,
        max_steps: a.max_steps,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome = gan::train(&images, &validation, config, &cfg)?;
    let elapsed = ms(start);
    save_checkpoint(&outcome.codec, &a.model)?;
    let report = &outcome.report;
    log::info!(
        "validation SSIM {:.4} -> {:.4} after {} steps",
        report.initial.ssim,
        report.final_validation.ssim,
        report.steps
    );
    std::fs::write(out.path("train_codec.log.jsonl"), report.to_json_lines())?;
    out.result(
        "train_codec",
        &json!({
            "model": a.model,
            "model_id": hex(outcome.codec.model_id()),
            "codec": config,
            "latent_shape": outcome.codec.latent_shape(),
            "compression_ratio_percent": outcome.codec.compression_ratio(),
            "train": cfg,
            "training_images": images.len(),
            "validation_images": validation.len(),
            "report": report,
        }),
    )?;
    out.timing("train_codec", &json!({ "train_ms": elapsed }))
}

fn train_detector_cmd(a: TrainDetectorArgs, out: &OutDir) -> Result<()> {
    let samples = match (&a.dataset, a.synthetic) {
        (Some(index), _) => load_dataset(index).with_context(|| format!("loading {}", index.display()))?,
        (None, Some(n)) => synth::grasp_scenes(n, a.seed.wrapping_add(100)),
        (None, None) => bail!("give --dataset or --synthetic"),
    };
    let cfg = DetectorTrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        ..DetectorTrainConfig::default()
    };
    let start = Instant::now();
    let (model, report) = train_detector(&samples, DetectorConfig::default(), &cfg)?;
    let elapsed = ms(start);
    model.save(&a.model)?;
    let accuracy = evaluate(&model, &samples)?;
    let blank = model.detect(&synth::blank_scene())?.len();
    log::info!(
        "training-set candidate success {:.3}, blank image emits {blank}",
        accuracy.candidate_success_rate
    );
    out.result(
        "train_detector",
        &json!({
            "model": a.model,
            "train": cfg,
            "images": samples.len(),
            "report": report,
            "training_set_accuracy": accuracy,
            "blank_image_candidates": blank,
        }),
    )?;
    out.timing("train_detector", &json!({ "train_ms": elapsed }))
}

fn encode(a: EncodeArgs, out: &OutDir) -> Result<()> {
    let codec = load_codec(&a.model)?;
    let image = load_model_input(&a.image)?;
    let start = Instant::now();
    let latent = codec.encode(&image)?;
    let encode_ms = ms(start);
    let frame = frame_encode(&latent)?;
    std::fs::write(&a.out, &frame).with_context(|| format!("writing {}", a.out.display()))?;
    out.result(
        "encode",
        &json!({
            "image": a.image,
            "frame": a.out,
            "model_id": hex(latent.model_id),
            "latent_shape": latent.tensor.shape(),
            "compression_ratio_percent": codec.compression_ratio(),
            "frame_bytes": frame.len(),
            "png_bytes": png_size(&image)?,
        }),
    )?;
    out.timing("encode", &json!({ "encode_ms": encode_ms }))
}

#[derive(Serialize)]
struct Fidelity {
    psnr: Psnr,
    ssim: f64,
}

fn fidelity(reference: &Tensor, output: &Tensor) -> Result<Fidelity> {
    let (a, b) = (to_pixel_range(reference), to_pixel_range(output));
    Ok(Fidelity {
        psnr: psnr(&a, &b, 255.0)?,
        ssim: ssim(&a, &b, &SsimParams::default())?,
    })
}

fn decode(a: DecodeArgs, out: &OutDir) -> Result<()> {
    let codec = load_codec(&a.model)?;
    let bytes = std::fs::read(&a.frame).with_context(|| format!("reading {}", a.frame.display()))?;
    let latent = frame_decode(&bytes).with_context(|| format!("decoding {}", a.frame.display()))?;
    if latent.model_id != codec.model_id() {
        log::warn!("frame comes from model {}, decoding with {}", hex(latent.model_id), hex(codec.model_id()));
    }
    let start = Instant::now();
    let image = codec.decode(&latent)?;
    let decode_ms = ms(start);
    save_model_output(&image, &a.out)?;
    let against_reference = match &a.reference {
        Some(path) => Some(fidelity(&load_model_input(path)?, &image)?),
        None => None,
    };
    out.result(
        "decode",
        &json!({
            "frame": a.frame,
            "output": a.out,
            "frame_model_id": hex(latent.model_id),
            "decoder_model_id": hex(codec.model_id()),
            "model_id_matches": latent.model_id == codec.model_id(),
            "reference": a.reference,
            "fidelity": against_reference,
        }),
    )?;
    out.timing("decode", &json!({ "decode_ms": decode_ms }))
}

fn eval_quality(a: EvalQualityArgs, out: &OutDir) -> Result<()> {
    let pairs = load_pair_dir(&a.pairs)?;
    let table = evaluate_pairs(&pairs)?;
    let path = a.out.unwrap_or_else(|| out.path("eval_quality.json"));
    write_json(&path, &table)?;
    if a.csv {
        std::fs::write(path.with_extension("csv"), table.to_csv())?;
    }
    println!(
        "{} pairs: mean SSIM {:.4}, mean MS-SSIM {:.4}, mean PSNR {}",
        table.pairs.len(),
        table.mean_ssim,
        table.mean_ms_ssim,
        table.mean_psnr_db.map_or("n/a (all identical)".into(), |v| format!("{v:.2} dB"))
    );
    Ok(())
}

fn detect(a: DetectArgs, out: &OutDir) -> Result<()> {
    let detector = load_detector(&a.detector)?;
    let mut image = load_model_input(&a.image)?;
    let mut codec_id = None;
    if let Some(path) = &a.codec {
        let codec = load_codec(path)?;
        image = codec.decode(&codec.encode(&image)?)?;
        codec_id = Some(hex(codec.model_id()));
    }
    let start = Instant::now();
    let candidates: Vec<CandidateRecord> = detector.detect(&image)?.iter().map(CandidateRecord::from).collect();
    let detect_ms = ms(start);
    out.result(
        "detect",
        &json!({ "image": a.image, "codec_model_id": codec_id, "candidates": candidates }),
    )?;
    out.timing("detect", &json!({ "detect_ms": detect_ms }))
}

fn serve(a: ServeArgs, out: &OutDir) -> Result<()> {
    let cloud = CloudModels::new(load_codec(&a.codec)?, load_detector(&a.detector)?)?;
    let model_id = cloud.model_id();
    let config = ServerConfig {
        max_frame_bytes: a.max_frame_bytes,
        io_timeout: secs(a.timeout_secs)?,
    };
    let server = Server::bind(a.bind.as_str(), cloud, config).with_context(|| format!("binding {}", a.bind))?;
    let addr = server.local_addr()?;
    out.result(
        "serve",
        &json!({ "codec": a.codec, "detector": a.detector, "model_id": hex(model_id), "max_frame_bytes": a.max_frame_bytes }),
    )?;
    log::info!("serving model {} on {addr}", hex(model_id));
    server.run()?;
    Ok(())
}

fn request(a: RequestArgs, out: &OutDir) -> Result<()> {
    let codec = load_codec(&a.codec)?;
    let image = load_model_input(&a.image)?;
    let cfg = ClientConfig {
        timeout: secs(a.timeout_secs)?,
    };
    let reply = request_grasp(a.server.as_str(), &codec, &image, &cfg)?;
    debug_assert_eq!(reply.response.status, Status::Ok);
    let [c, h, w] = codec.latent_shape();
    out.result(
        "request",
        &json!({
            "image": a.image,
            "model_id": hex(codec.model_id()),
            "status": reply.response.status,
            "candidates": reply.response.candidates,
            "frame_bytes": reply.frame_bytes,
            "expected_frame_bytes": frame_len(c, h, w),
            "sent_bytes": reply.sent_bytes,
            "png_bytes": png_size(&image)?,
        }),
    )?;
    println!(
        "{} candidates, {} frame bytes, {:.1} ms end to end",
        reply.response.candidates.len(),
        reply.frame_bytes,
        reply.latency_ms
    );
    out.timing(
        "request",
        &json!({
            "latency_ms": reply.latency_ms,
            "server_decode_ms": reply.response.decode_ms,
            "server_detect_ms": reply.response.detect_ms,
        }),
    )
}

#[derive(Debug, Serialize)]
struct RatioRow {
    latent_channels: usize,
    latent_shape: [usize; 3],
    input_elements: usize,
    latent_elements: usize,
    compression_ratio_percent: f64,
    frame_bytes: usize,
}

fn ratio_grid() -> Result<Vec<RatioRow>> {
    [16, 8, 4, 2]
        .into_iter()
        .map(|c| {
            let config = CodecConfig::with_latent_channels(c);
            let shape = config.latent_shape()?;
            Ok(RatioRow {
                latent_channels: c,
                latent_shape: shape,
                input_elements: config.input_shape.iter().product(),
                latent_elements: shape.iter().product(),
                compression_ratio_percent: config.compression_ratio()?,
                frame_bytes: frame_len(shape[0], shape[1], shape[2]),
            })
        })
        .collect()
}

fn bench(a: BenchArgs, out: &OutDir) -> Result<()> {
    ensure!(a.ratio_grid, "nothing to benchmark");
    let rows = ratio_grid()?;
    println!("{:>8} {:>12} {:>8} {:>9} {:>12}", "channels", "latent", "elements", "ratio %", "frame bytes");
    for r in &rows {
        let [c, h, w] = r.latent_shape;
        println!(
            "{:>8} {:>12} {:>8} {:>9.2} {:>12}",
            r.latent_channels,
            format!("{c}x{h}x{w}"),
            r.latent_elements,
            r.compression_ratio_percent,
            r.frame_bytes
        );
    }
    out.result("ratio_grid", &rows)?;
    Ok(())
}

fn mismatch_demo(a: MismatchArgs, out: &OutDir) -> Result<()> {
    let codec = load_codec(&a.codec)?;
    let foreign = match &a.foreign {
        Some(path) => load_codec(path)?,
        None => CodecModel::from_seed(codec.config, a.foreign_seed)?,
    };
    let images = match &a.images {
        Some(dir) => load_dir(dir)?,
        None => synth::codec_images(a.synthetic, (INPUT_HEIGHT, INPUT_WIDTH), a.seed),
    };
    let report = mismatch_gap(&images, &codec, &codec, &foreign)?;
    let control = mismatch_gap(&images, &codec, &codec, &codec.clone())?;
    println!(
        "matched SSIM {:.4}, foreign SSIM {:.4}, gap {:.4} (same-decoder control gap {:.4})",
        report.matched_ssim, report.foreign_ssim, report.gap, control.gap
    );
    out.result(
        "mismatch",
        &json!({
            "codec": a.codec,
            "model_id": hex(codec.model_id()),
            "foreign_model_id": hex(foreign.model_id()),
            "foreign": a.foreign,
            "foreign_seed": a.foreign.is_none().then_some(a.foreign_seed),
            "report": report,
            "control_gap": control.gap,
        }),
    )?;
    Ok(())
}
