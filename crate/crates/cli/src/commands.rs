//! The six subcommands. Every command writes into its own run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use bevmotion::dataset::{read_collection, write_collection};
use bevmotion::geometry::GridSpec;
use bevmotion::model::{read_checkpoint, write_checkpoint, PredictorParams};
use bevmotion::synth::{generate_many, LabeledSequence};
use bevmotion::train::{
    build_samples, evaluate_model, evaluate_pooled, label_all, run_ablation, train, EvalReport, Sample, SpeedGroup,
    GROUP_ORDER,
};
use bevmotion::transport::{cost_matrix, sinkhorn, TransportConfig};

use crate::config::RunConfig;
use crate::error::CliError;

pub struct Run {
    pub dir: PathBuf,
    pub command: &'static str,
    pub hash: String,
}

impl Run {
    /// Creates `<out>/<command>-<hash16>-<unix seconds>[-n]` and records the config.
    pub fn create(cfg: &RunConfig, command: &'static str) -> Result<Self, CliError> {
        let hash = cfg.hash(command);
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let stem = format!("{command}-{}-{secs}", &hash[..16]);
        let root = &cfg.paths.out;
        fs::create_dir_all(root).map_err(|e| CliError::Io(root.clone(), e))?;
        let mut dir = root.join(&stem);
        let mut n = 1;
        while dir.exists() {
            dir = root.join(format!("{stem}-{n}"));
            n += 1;
        }
        fs::create_dir(&dir).map_err(|e| CliError::Io(dir.clone(), e))?;
        let run = Self { dir, command, hash };
        run.write("config.toml", &format!("# config_hash = \"{}\"\n{}", run.hash, cfg.to_toml()))?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| CliError::Io(p, e))
    }

    /// `metrics.kv`: one `key=value` per line, led by the command and config hash.
    pub fn write_kv(&self, name: &str, pairs: &[(String, String)]) -> Result<(), CliError> {
        let mut text = format!("command={}\nconfig_hash={}\n", self.command, self.hash);
        for (k, v) in pairs {
            let _ = writeln!(text, "{k}={v}");
        }
        self.write(name, &text)
    }
}

fn kv(k: impl Into<String>, v: impl ToString) -> (String, String) {
    (k.into(), v.to_string())
}

fn sequences(cfg: &RunConfig) -> Result<Vec<LabeledSequence>, CliError> {
    Ok(match &cfg.paths.data {
        Some(dir) => read_collection(dir)?,
        None => generate_many(&cfg.scene, &cfg.grid, cfg.sequences)?,
    })
}

fn samples(cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    Ok(build_samples(&sequences(cfg)?, &cfg.train, &cfg.ground)?)
}

fn eval_files(run: &Run, report: &EvalReport, extra: Vec<(String, String)>) -> Result<(), CliError> {
    let mut pairs = extra;
    pairs.extend(report.key_values(""));
    run.write_kv("metrics.kv", &pairs)?;
    run.write("report.txt", &report.text())
}

pub fn gen(cfg: &RunConfig) -> Result<Run, CliError> {
    let run = Run::create(cfg, "gen")?;
    let seqs = generate_many(&cfg.scene, &cfg.grid, cfg.sequences)?;
    let target = cfg.paths.data.clone().unwrap_or_else(|| run.path("dataset"));
    write_collection(&seqs, &target)?;
    let frames: usize = seqs.iter().map(|s| s.frames.len()).sum();
    let points: usize = seqs.iter().flat_map(|s| &s.frames).map(|f| f.len()).sum();
    run.write_kv(
        "metrics.kv",
        &[kv("sequences", seqs.len()), kv("frames", frames), kv("points", points), kv("dataset", target.display())],
    )?;
    println!("{}", target.display());
    Ok(run)
}

pub fn pseudo(cfg: &RunConfig) -> Result<Run, CliError> {
    let run = Run::create(cfg, "pseudo")?;
    let samples = samples(cfg)?;
    let labels = label_all(&samples, None, &cfg.transport, cfg.train.two_step_enabled)?;
    let mut dump = String::from("sequence frame i j dx dy gt_dx gt_dy\n");
    let mut errors = Vec::new();
    let mut per_group = [(0.0, 0usize); 3];
    let mut two_step = Vec::new();
    for (s, l) in samples.iter().zip(&labels) {
        let gt_two = s.gt(2.0);
        for &c in &s.src.cells {
            let (dx, dy) = (l.one.dx[c], l.one.dy[c]);
            let (gx, gy) = (s.gt_step.dx[c], s.gt_step.dy[c]);
            let _ = writeln!(dump, "{} {} {} {} {dx} {dy} {gx} {gy}", s.sequence, s.frame, c.0, c.1);
            let e = (dx - gx).hypot(dy - gy);
            errors.push(e);
            let g = &mut per_group[SpeedGroup::of(s.gt_speed[c]).index()];
            g.0 += e;
            g.1 += 1;
            two_step.push((l.two.dx[c] - gt_two.dx[c]).hypot(l.two.dy[c] - gt_two.dy[c]));
        }
    }
    run.write("pseudo_labels.txt", &dump)?;
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mut pairs = vec![
        kv("samples", samples.len()),
        kv("cells", errors.len()),
        kv("recovery.epe_mean", format!("{:e}", mean(&errors))),
        kv("recovery.epe_max", format!("{:e}", errors.iter().copied().fold(0.0, f64::max))),
        kv("recovery.exact_fraction", format!("{:e}", errors.iter().filter(|&&e| e == 0.0).count() as f64 / errors.len().max(1) as f64)),
        kv("recovery.two_step_epe_mean", format!("{:e}", mean(&two_step))),
    ];
    for g in GROUP_ORDER {
        let (sum, n) = per_group[g.index()];
        let v = if n == 0 { "absent".to_string() } else { format!("{:e}", sum / n as f64) };
        pairs.push(kv(format!("recovery.{}.epe_mean", g.name()), v));
        pairs.push(kv(format!("recovery.{}.cells", g.name()), n));
    }
    run.write_kv("metrics.kv", &pairs)?;
    println!("recovery EPE mean {:e} over {} cells", mean(&errors), errors.len());
    Ok(run)
}

fn grid_dims(seqs_grid: &GridSpec) -> (usize, usize) {
    seqs_grid.bev_dims()
}

pub fn train_cmd(cfg: &RunConfig) -> Result<Run, CliError> {
    let run = Run::create(cfg, "train")?;
    let seqs = sequences(cfg)?;
    let samples = build_samples(&seqs, &cfg.train, &cfg.ground)?;
    let init = PredictorParams::init(cfg.train.frames, cfg.train.hidden, cfg.train.seed);
    let out = train(&samples, init, &cfg.train, &cfg.transport)?;
    let (h, w) = grid_dims(&seqs[0].grid);
    write_checkpoint(&run.path("checkpoint.bin"), &out.params, h, w)?;

    let mut curve = String::from("epoch,learning_rate,msm,total,sup,cluster,back,forward,state,masked_cells\n");
    for e in &out.curve {
        let m = &e.mean;
        let _ = writeln!(
            curve,
            "{},{},{},{},{},{},{},{},{},{}",
            e.epoch, e.learning_rate, e.msm_active, m.total, m.sup, m.cluster, m.back, m.forward, m.state, m.masked_cells
        );
    }
    run.write("loss_curve.csv", &curve)?;
    let report = evaluate_model(&out.params, &samples)?;
    let last = out.curve.last().map(|e| e.mean.total).unwrap_or(f64::NAN);
    let max_dec = out.curve.iter().map(|e| e.max_decomposition_error).fold(0.0, f64::max);
    eval_files(
        &run,
        &report,
        vec![
            kv("samples", samples.len()),
            kv("epochs", out.curve.len()),
            kv("final_loss", format!("{last:e}")),
            kv("max_decomposition_error", format!("{max_dec:e}")),
        ],
    )?;
    print!("{}", report.text());
    Ok(run)
}

pub fn eval(cfg: &RunConfig, oracle: bool) -> Result<Run, CliError> {
    let mut cfg = cfg.clone();
    let params = if oracle {
        None
    } else {
        let path = cfg
            .paths
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::Config("eval needs --checkpoint (or --oracle)".into()))?;
        let (header, params) = read_checkpoint(&path)?;
        cfg.train.frames = header.frames as usize;
        cfg.train.hidden = header.hidden as usize;
        Some(params)
    };
    let run = Run::create(&cfg, "eval")?;
    let samples = samples(&cfg)?;
    let report = match &params {
        Some(p) => evaluate_model(p, &samples)?,
        None => {
            let gts: Vec<_> = samples.iter().map(|s| s.gt(1.0 / s.step_seconds)).collect();
            evaluate_pooled(samples.iter().zip(&gts).map(|(s, g)| (g, g, &s.gt_speed)))?
        }
    };
    eval_files(&run, &report, vec![kv("samples", samples.len()), kv("oracle", oracle)])?;
    print!("{}", report.text());
    Ok(run)
}

pub fn ablate(cfg: &RunConfig) -> Result<Run, CliError> {
    let run = Run::create(cfg, "ablate")?;
    let samples = samples(cfg)?;
    let init = PredictorParams::init(cfg.train.frames, cfg.train.hidden, cfg.train.seed);
    let results = run_ablation(&samples, &init, &cfg.train, &cfg.transport)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"));
    let mut table = String::from("row  cluster back forward  static   slow     fast     max_decomp_err\n");
    let mut pairs = vec![kv("rows", results.len()), kv("samples", samples.len())];
    for r in &results {
        let mark = |b: bool| if b { "x" } else { "-" };
        let _ = writeln!(
            table,
            "({})  {:<7} {:<4} {:<7}  {:<8} {:<8} {:<8} {:e}",
            r.row.label,
            mark(r.row.cluster),
            mark(r.row.backward),
            mark(r.row.forward),
            fmt(r.report.mean_error(SpeedGroup::Static)),
            fmt(r.report.mean_error(SpeedGroup::Slow)),
            fmt(r.report.mean_error(SpeedGroup::Fast)),
            r.max_decomposition_error(),
        );
        let p = format!("row.{}.", r.row.label);
        pairs.push(kv(format!("{p}terms"), r.row.name()));
        pairs.push(kv(format!("{p}cluster"), r.row.cluster));
        pairs.push(kv(format!("{p}backward"), r.row.backward));
        pairs.push(kv(format!("{p}forward"), r.row.forward));
        pairs.push(kv(format!("{p}max_decomposition_error"), format!("{:e}", r.max_decomposition_error())));
        pairs.push(kv(
            format!("{p}final_loss"),
            format!("{:e}", r.curve.last().map(|e| e.mean.total).unwrap_or(f64::NAN)),
        ));
        pairs.extend(r.report.key_values(&p));
    }
    run.write("ablation.txt", &table)?;
    run.write_kv("metrics.kv", &pairs)?;
    print!("{table}");
    Ok(run)
}

fn time<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}

fn random_cost(n: usize, seed: u64) -> bevmotion::transport::CostMatrix {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pts = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<[f64; 2]> {
        (0..n).map(|_| [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)]).collect()
    };
    let (a, b) = (pts(&mut rng), pts(&mut rng));
    cost_matrix(&a, &b).expect("nonempty point sets")
}

pub fn bench(cfg: &RunConfig) -> Result<Run, CliError> {
    let run = Run::create(cfg, "bench")?;
    let mut pairs = Vec::new();
    let mut text = String::new();
    // Fixed iteration count: the tolerance is unreachable on purpose.
    let fixed = TransportConfig {
        max_iters: 100,
        marginal_tol: f64::MIN_POSITIVE,
        ..cfg.transport
    };
    for n in [100, 300, 1000] {
        let cost = random_cost(n, cfg.scene.seed);
        let (plan, secs) = time(|| sinkhorn(&cost, &fixed));
        let plan = plan?;
        let _ = writeln!(text, "sinkhorn {n}x{n} iters={} seconds={secs:.4}", plan.iterations_used);
        pairs.push(kv(format!("sinkhorn.{n}.seconds"), format!("{secs:e}")));
    }
    let samples = samples(cfg)?;
    let (labels, secs) = time(|| label_all(&samples, None, &cfg.transport, cfg.train.two_step_enabled));
    labels?;
    let _ = writeln!(
        text,
        "pseudo-labels samples={} seconds={secs:.4} per_sample={:.4} parallel={}",
        samples.len(),
        secs / samples.len() as f64,
        bevmotion::par::enabled()
    );
    pairs.push(kv("pseudo.samples", samples.len()));
    pairs.push(kv("pseudo.seconds", format!("{secs:e}")));
    run.write("bench.txt", &text)?;
    run.write_kv("bench.kv", &pairs)?;
    print!("{text}");
    Ok(run)
}

/// Loads `path` as a run's `metrics.kv` into ordered pairs.
pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}
