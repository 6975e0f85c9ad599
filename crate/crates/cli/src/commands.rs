use std::path::{Path, PathBuf};
use std::sync::Arc;

use commvq::attn::{
    fused_attention, naive_quantized_attention, relative_error, AttnInput, FlopReport,
};
use commvq::baselines::{mse_report, report_csv, report_json_lines, Method};
use commvq::cache::{CacheConfig, CacheStats, QuantizedKVCache};
use commvq::io::write_atomic;
use commvq::keyquant::{
    avg_bit_key, key_codebook_bytes, train_key_codebook_with_report, KeyCodebook, KeyCodes,
    KeyQuantConfig,
};
use commvq::linalg::{mse, Mat};
use commvq::rope::{CommMat, RopeParams};
use commvq::synth::{gen_synth, CtfFile, SynthSpec};
use commvq::valquant::{
    quantizer_mse, train_value_quantizer, value_codebook_bytes, ValueCodebook, ValueCodes,
    ValueQuantizer,
};
use commvq::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Resolved, RunConfig};
use crate::{Command, Global, Sweep};

const MIB: f64 = 1024.0 * 1024.0;

struct Ctx<'a> {
    global: &'a Global,
    file: RunConfig,
}

impl Ctx<'_> {
    fn resolve(&self, d: usize) -> Result<Resolved> {
        Resolved::build(&self.file, self.global.preset, self.global.seed, d)
    }

    fn seed(&self) -> u64 {
        self.global.seed.or(self.file.seed).unwrap_or(0)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.global.out.join(name)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.out(name);
        let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

pub fn run(global: &Global, command: Command) -> Result<Value> {
    if global.threads == 0 {
        return Err(Error::InvalidInput("--threads must be >= 1".into()));
    }
    let file = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    std::fs::create_dir_all(&global.out)?;
    let ctx = Ctx { global, file };
    match command {
        Command::GenSynth {
            n,
            d,
            rank,
            no_mixing,
        } => gen_synth_cmd(&ctx, n, d, rank, !no_mixing),
        Command::TrainKey { input } => train_key(&ctx, &input),
        Command::TrainValue { input } => train_value(&ctx, &input),
        Command::Quantize {
            keys,
            values,
            key_codebook,
            value_quantizer,
        } => quantize(&ctx, &keys, &values, &key_codebook, &value_quantizer),
        Command::Reconstruct {
            cache,
            key_codebook,
            value_quantizer,
        } => reconstruct(&ctx, &cache, &key_codebook, &value_quantizer),
        Command::MseReport {
            input,
            bits,
            value_quantizer,
            key_codebook,
        } => mse_report_cmd(
            &ctx,
            &input,
            &bits,
            value_quantizer.as_deref(),
            key_codebook.as_deref(),
        ),
        Command::BenchAttn { d } => bench_attn(&ctx, d),
        Command::SizeReport { d, tokens } => size_report(&ctx, d, tokens),
        Command::Ablate {
            input,
            sweep,
            max_rounds,
        } => ablate(&ctx, &input, sweep, max_rounds),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn read_mat(path: &Path) -> Result<Mat> {
    CtfFile::from_bytes(&read_file(path)?)?.to_mat()
}

fn load_key_codebook(path: &Path) -> Result<KeyCodebook> {
    KeyCodebook::from_bytes(&read_file(path)?)
}

fn load_value_quantizer(path: &Path) -> Result<ValueQuantizer> {
    ValueQuantizer::from_bytes(&read_file(path)?)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn gen_synth_cmd(ctx: &Ctx, n: usize, d: usize, rank: usize, mixing: bool) -> Result<Value> {
    let spec = SynthSpec {
        n,
        d,
        rank,
        seed: ctx.seed(),
        mixing,
    };
    let data = gen_synth(&spec)?;
    let path = ctx.out("synth.ctf");
    CtfFile::from_mat(&data).write(&path)?;
    Ok(json!({
        "command": "gen-synth",
        "n": n, "d": d, "rank": rank, "seed": spec.seed, "mixing": mixing,
        "variance": data.variance(),
        "output": path_str(&path),
    }))
}

fn train_key(ctx: &Ctx, input: &Path) -> Result<Value> {
    let data = read_mat(input)?;
    let cfg = ctx.resolve(data.cols())?;
    let (cb, report) = train_key_codebook_with_report(&data, cfg.key, &cfg.em)?;
    let path = ctx.out("key.cvqk");
    write_atomic(&path, &cb.to_bytes())?;
    let hard_iters: Vec<Vec<usize>> = report
        .rounds
        .iter()
        .map(|r| r.groups.iter().map(|g| g.hard_objectives.len()).collect())
        .collect();
    let out = json!({
        "command": "train-key",
        "config": cfg.key,
        "em": cfg.em,
        "tokens": data.rows(),
        "avg_bit": cfg.key.avg_bit(),
        "codebook_bytes": key_codebook_bytes(cfg.key.n_levels, cfg.key.rounds, cfg.key.d),
        "residual_mse": report.rounds.iter().map(|r| r.residual_mse).collect::<Vec<_>>(),
        "hard_iterations": hard_iters,
        "final_mse": report.final_mse,
        "output": path_str(&path),
    });
    ctx.write_json("train-key.json", &out)?;
    Ok(out)
}

fn train_value(ctx: &Ctx, input: &Path) -> Result<Value> {
    let data = read_mat(input)?;
    let cfg = ctx.resolve(data.cols())?;
    let (q, report) = train_value_quantizer(&data, cfg.n_codes, &cfg.value)?;
    let path = ctx.out("value.cvqv");
    write_atomic(&path, &q.to_bytes())?;
    let curve = &report.loss_curve;
    let stride = (curve.len() / 100).max(1);
    let out = json!({
        "command": "train-value",
        "n_codes": cfg.n_codes,
        "hidden": q.encoder.hidden(),
        "train": cfg.value,
        "tokens": data.rows(),
        "avg_bit": q.avg_bit(),
        "codebook_bytes": value_codebook_bytes(cfg.n_codes, data.cols()),
        "loss_curve_stride": stride,
        "loss_curve": curve.iter().step_by(stride).collect::<Vec<_>>(),
        "final_mse": quantizer_mse(&q, &data)?,
        "output": path_str(&path),
    });
    ctx.write_json("train-value.json", &out)?;
    Ok(out)
}

fn quantize(
    ctx: &Ctx,
    keys: &Path,
    values: &Path,
    key_codebook: &Path,
    value_quantizer: &Path,
) -> Result<Value> {
    let (k, v) = (read_mat(keys)?, read_mat(values)?);
    let kcb = Arc::new(load_key_codebook(key_codebook)?);
    let vq = Arc::new(load_value_quantizer(value_quantizer)?);
    let rope = RopeParams::new(kcb.config().d)?;
    let cache = QuantizedKVCache::prefill(&k, &v, kcb, vq, rope)?;
    let path = ctx.out("cache.cvqc");
    cache.write(&path)?;
    let (rk, rv) = cache.reconstruct()?;
    let out = json!({
        "command": "quantize",
        "stats": cache.stats(),
        "key_mse": mse(&k, &rk)?,
        "value_mse": mse(&v, &rv)?,
        "output": path_str(&path),
    });
    ctx.write_json("quantize.json", &out)?;
    Ok(out)
}

fn reconstruct(
    ctx: &Ctx,
    cache: &Path,
    key_codebook: &Path,
    value_quantizer: &Path,
) -> Result<Value> {
    let kcb = Arc::new(load_key_codebook(key_codebook)?);
    let vq = Arc::new(load_value_quantizer(value_quantizer)?);
    let rope = RopeParams::new(kcb.config().d)?;
    let cache = QuantizedKVCache::from_bytes(&read_file(cache)?, kcb, vq, rope)?;
    let (k, v) = cache.reconstruct()?;
    let (kp, vp) = (ctx.out("keys.recon.ctf"), ctx.out("values.recon.ctf"));
    CtfFile::from_mat(&k).write(&kp)?;
    CtfFile::from_mat(&v).write(&vp)?;
    Ok(json!({
        "command": "reconstruct",
        "tokens": cache.len(),
        "keys": path_str(&kp),
        "values": path_str(&vp),
    }))
}

fn mse_report_cmd(
    ctx: &Ctx,
    input: &Path,
    bits: &[u32],
    value_quantizer: Option<&Path>,
    key_codebook: Option<&Path>,
) -> Result<Value> {
    let data = read_mat(input)?;
    let vq = value_quantizer.map(load_value_quantizer).transpose()?;
    let kcb = key_codebook.map(load_key_codebook).transpose()?;
    let mut methods = vec![Method::Identity];
    methods.extend(bits.iter().map(|&b| Method::Asym { bits: b }));
    if let Some(q) = &vq {
        methods.push(Method::CommVqValue(q));
    }
    if let Some(cb) = &kcb {
        methods.push(Method::CommVqKey(cb));
    }
    let rows = mse_report(&data, &methods)?;
    write_atomic(
        &ctx.out("mse-report.jsonl"),
        report_json_lines(&rows).as_bytes(),
    )?;
    write_atomic(&ctx.out("mse-report.csv"), report_csv(&rows).as_bytes())?;
    Ok(json!({ "command": "mse-report", "rows": rows }))
}

#[derive(Serialize)]
struct BenchRow {
    #[serde(rename = "N")]
    n: usize,
    naive: FlopReport,
    fused: FlopReport,
    speedup: f64,
    relative_error: f64,
}

/// Random codebooks and codes: multiply counts depend only on shapes.
fn bench_instance(
    cfg: KeyQuantConfig,
    n_codes: usize,
    n: usize,
    seed: u64,
) -> Result<(KeyCodebook, KeyCodes, ValueCodebook, ValueCodes, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = (0..cfg.rounds * cfg.subspaces() * cfg.n_levels)
        .map(|_| CommMat {
            x: rng.random_range(-0.3..0.3),
            y: rng.random_range(-0.3..0.3),
        })
        .collect();
    let kcb = KeyCodebook::new(cfg, atoms)?;
    let pairs = (0..n * cfg.rounds * cfg.groups())
        .map(|_| {
            (
                rng.random_range(0..cfg.n_levels) as u16,
                rng.random_range(0..cfg.n_levels) as u16,
            )
        })
        .collect();
    let kcodes = KeyCodes::new(&cfg, n, pairs)?;
    let rows = (0..n_codes * cfg.d)
        .map(|_| rng.random_range(-0.1..0.1))
        .collect();
    let vcb = ValueCodebook::new(Mat::new(n_codes, cfg.d, rows)?)?;
    let bits = (0..n * n_codes).map(|_| rng.random_range(0..2u8)).collect();
    let vcodes = ValueCodes::new(n_codes, n, bits)?;
    let q = (0..cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok((kcb, kcodes, vcb, vcodes, q))
}

fn bench_attn(ctx: &Ctx, d: usize) -> Result<Value> {
    let cfg = ctx.resolve(d)?;
    let lengths = if ctx.global.lengths.is_empty() {
        vec![1024, 4096, 8192]
    } else {
        ctx.global.lengths.clone()
    };
    if lengths.contains(&0) {
        return Err(Error::InvalidInput("cache lengths must be positive".into()));
    }
    let rope = RopeParams::new(d)?;
    let mut rows = Vec::new();
    for &n in &lengths {
        let (kcb, kcodes, vcb, vcodes, q) = bench_instance(cfg.key, cfg.n_codes, n, cfg.seed)?;
        let input = AttnInput {
            q: &q,
            t: n - 1,
            key_codes: &kcodes,
            value_codes: &vcodes,
            key_codebook: &kcb,
            value_codebook: &vcb,
            rope: &rope,
        };
        let (a, naive) = naive_quantized_attention(&input)?;
        let (b, fused) = fused_attention(&input)?;
        rows.push(BenchRow {
            n,
            speedup: naive.measured_mults as f64 / fused.measured_mults as f64,
            relative_error: relative_error(&b, &a),
            naive,
            fused,
        });
    }
    let monotone = rows.windows(2).all(|w| w[1].speedup > w[0].speedup);
    let out = json!({
        "command": "bench-attn",
        "metric": "scalar multiplies per decode step; cos/sin tables excluded",
        "config": cfg.key,
        "n_codes": cfg.n_codes,
        "rows": rows,
        "speedup_increasing": monotone,
    });
    ctx.write_json("bench-attn.json", &out)?;
    Ok(out)
}

fn size_report(ctx: &Ctx, d: usize, tokens: usize) -> Result<Value> {
    let cfg = ctx.resolve(d)?;
    let cache_cfg = CacheConfig {
        key: cfg.key,
        n_codes: cfg.n_codes,
    };
    let stats = CacheStats::compute(tokens, &cache_cfg);
    let kb = key_codebook_bytes(cfg.key.n_levels, cfg.key.rounds, d);
    let vb = value_codebook_bytes(cfg.n_codes, d);
    let out = json!({
        "command": "size-report",
        "preset": cfg.preset,
        "config": cfg.key,
        "n_codes": cfg.n_codes,
        "key_codebook_bytes": kb,
        "value_codebook_bytes": vb,
        "key_codebook_mb": kb as f64 / MIB,
        "value_codebook_mb": vb as f64 / MIB,
        "key_bits_per_token": cache_cfg.key_bits_per_token(),
        "value_bits_per_token": cache_cfg.value_bits_per_token(),
        "fp16_mb_per_side": stats.fp16_bytes_per_side as f64 / MIB,
        "stats": stats,
    });
    ctx.write_json("size-report.json", &out)?;
    Ok(out)
}

#[derive(Serialize)]
struct AblateRow {
    g: usize,
    n_levels: usize,
    rounds: usize,
    avg_bit: f64,
    mse: f64,
}

fn ablate(ctx: &Ctx, input: &Path, sweep: Sweep, max_rounds: usize) -> Result<Value> {
    let data = read_mat(input)?;
    let d = data.cols();
    let base = ctx.resolve(d)?;
    let fit = |g: usize, nl: usize, r: usize| -> Result<Vec<f64>> {
        let cfg = KeyQuantConfig::new(d, g, nl, r)?;
        let (_, rep) = train_key_codebook_with_report(&data, cfg, &base.em)?;
        Ok(rep.rounds.iter().map(|r| r.residual_mse).collect())
    };
    let row = |g: usize, nl: usize, r: usize, mse: f64| AblateRow {
        g,
        n_levels: nl,
        rounds: r,
        avg_bit: avg_bit_key(r, nl, g),
        mse,
    };
    let mut rows = Vec::new();
    match sweep {
        Sweep::G => {
            for (g, nl) in [(8, 2), (16, 4), (32, 16), (64, 64)] {
                if (d / 2) % g == 0 {
                    rows.push(row(g, nl, 1, fit(g, nl, 1)?[0]));
                }
            }
        }
        Sweep::Rounds => {
            if max_rounds == 0 {
                return Err(Error::InvalidInput("--max-rounds must be >= 1".into()));
            }
            let (g, nl) = (base.key.g, base.key.n_levels);
            for (r, mse) in fit(g, nl, max_rounds)?.into_iter().enumerate() {
                rows.push(row(g, nl, r + 1, mse));
            }
        }
        Sweep::Levels => {
            let g = base.key.g;
            for nl in [2, 4, 8, 16, 32, 64] {
                rows.push(row(g, nl, 1, fit(g, nl, 1)?[0]));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no sweep point is valid for d={d}"
        )));
    }
    let out = json!({
        "command": "ablate",
        "sweep": format!("{sweep:?}").to_lowercase(),
        "tokens": data.rows(),
        "rows": rows,
    });
    ctx.write_json("ablate.json", &out)?;
    Ok(out)
}
