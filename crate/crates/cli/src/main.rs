use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdrfield::eval::plot::{write_crf_plot, write_histogram, write_loss_plot};
use hdrfield::eval::render::{depth_image, flow_image, mulaw_image};
use hdrfield::eval::{displaced_camera, evaluate, render_flow, render_view, tag_gain, tonemap_image, EvalOptions, RenderMode};
use hdrfield::io::{format_crf_table, load_checkpoint, load_dataset, read_loss_log, save_dataset, write_pfm, write_png16, Checkpoint};
use hdrfield::synth::{generate_dataset, Corruption, DatasetBundle, SceneSpec};
use hdrfield::tonemap::{ToneCurve, ToneCurveKind, WbSharing};
use hdrfield::trainer::{EnhancerKind, ExposureSource, TrainConfig, Trainer};
use hdrfield::Error;

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "hdrfield", version, about = "Dynamic HDR radiance fields from alternating-exposure video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenScene(GenScene),
    /// Train a model and write checkpoints, the loss log and the tone curve.
    Train(Train),
    /// Render one view of a checkpoint.
    Render(Render),
    /// Score a checkpoint against the scene ground truth.
    Eval(Eval),
    /// Draw loss curves, the tone curve and radiance histograms.
    Plot(Plot),
}

/// Where the scene comes from: `blinker`, a scene JSON file or a dataset directory.
#[derive(Args, Clone)]
struct SceneArgs {
    #[arg(long, default_value = "blinker")]
    scene: String,
    /// Training frames of a generated scene: `all`, `even`, `odd` or a comma list.
    #[arg(long, default_value = "all")]
    train_frames: String,
    /// Add flow noise and per-frame depth scale/shift to the observations.
    #[arg(long)]
    corrupt: bool,
    #[arg(long, default_value_t = 0)]
    corrupt_seed: u64,
    /// Override the built-in scene size.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

impl SceneArgs {
    fn spec(&self) -> Result<SceneSpec> {
        if self.scene == "blinker" {
            let b = SceneSpec::blinker();
            let w = self.width.unwrap_or(b.width);
            return Ok(SceneSpec::blinker_sized(w, self.height.unwrap_or(w), self.frames.unwrap_or(b.frames)));
        }
        let path = Path::new(&self.scene);
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Ok(serde_json::from_str(&text)?)
    }

    fn training(&self, frames: usize) -> Result<Vec<usize>> {
        let all = 0..frames;
        Ok(match self.train_frames.as_str() {
            "all" => all.collect(),
            "even" => all.filter(|i| i % 2 == 0).collect(),
            "odd" => all.filter(|i| i % 2 == 1).collect(),
            list => list
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Input(format!("bad frame index `{s}`"))))
                .collect::<Result<_>>()?,
        })
    }

    fn load(&self) -> Result<DatasetBundle> {
        let path = Path::new(&self.scene);
        if path.is_dir() {
            return load_dataset(path);
        }
        let spec = self.spec()?;
        let training = self.training(spec.frames)?;
        let corruption = self.corrupt.then(|| Corruption { seed: self.corrupt_seed, ..Corruption::default() });
        generate_dataset(&spec, Some(&training), corruption.as_ref())
    }
}

#[derive(Args)]
struct GenScene {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Exposure {
    Metadata,
    Learned,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full training configuration as JSON; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    beta_data: Option<f64>,
    #[arg(long)]
    beta_depth: Option<f64>,
    #[arg(long)]
    beta_reg: Option<f64>,
    #[arg(long)]
    beta_cyc: Option<f64>,
    #[arg(long)]
    beta_smooth: Option<f64>,
    #[arg(long)]
    beta_gen: Option<f64>,
    #[arg(long)]
    t_warm: Option<usize>,
    #[arg(long)]
    p_gen: Option<f64>,
    /// `id`, `oracle`, `blur` or `none`.
    #[arg(long)]
    enhancer: Option<String>,
    /// `piecewise`, `fixed`, `mlp` or `none`.
    #[arg(long)]
    crf: Option<String>,
    /// `per-frame`, `per-tag` or `global`.
    #[arg(long)]
    wb: Option<String>,
    #[arg(long, value_enum)]
    exposure: Option<Exposure>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_rays: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Hidden layers of both fields.
    #[arg(long)]
    net_layers: Option<usize>,
    /// Hidden width of both fields.
    #[arg(long)]
    net_width: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl Train {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                serde_json::from_str(&text)?
            }
            None => TrainConfig::new(self.steps, self.seed),
        };
        if self.config.is_some() {
            c.steps = self.steps;
            c.seed = self.seed;
        }
        let w = &mut c.weights;
        for (slot, v) in [
            (&mut w.beta_data, self.beta_data),
            (&mut w.beta_depth, self.beta_depth),
            (&mut w.beta_reg, self.beta_reg),
            (&mut w.beta_cyc, self.beta_cyc),
            (&mut w.beta_smooth, self.beta_smooth),
            (&mut w.beta_gen, self.beta_gen),
            (&mut w.p_gen, self.p_gen),
            (&mut c.lr, self.lr),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(t) = self.t_warm {
            c.weights.t_warm = t;
        }
        if let Some(e) = &self.enhancer {
            c.enhancer = e.parse::<EnhancerKind>()?;
        }
        if let Some(k) = &self.crf {
            c.curve = k.parse::<ToneCurveKind>()?;
        }
        if let Some(s) = &self.wb {
            c.wb_sharing = s.parse::<WbSharing>()?;
        }
        if let Some(e) = self.exposure {
            c.exposure = match e {
                Exposure::Metadata => ExposureSource::Metadata,
                Exposure::Learned => ExposureSource::Learned,
            };
        }
        for (slot, v) in [
            (&mut c.batch_rays, self.batch_rays),
            (&mut c.samples, self.samples),
            (&mut c.fields.static_layers, self.net_layers),
            (&mut c.fields.dynamic_layers, self.net_layers),
            (&mut c.fields.static_width, self.net_width),
            (&mut c.fields.dynamic_width, self.net_width),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if self.checkpoint_every.is_some() {
            c.checkpoint_every = self.checkpoint_every;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
}

impl CheckpointArgs {
    fn load(&self) -> Result<(Checkpoint, TrainConfig, DatasetBundle)> {
        let ck = load_checkpoint(&self.ckpt)?;
        let cfg: TrainConfig = serde_json::from_str(&ck.config)?;
        let data = self.scene.load()?;
        if ck.model.wb.frame_count() != data.training.len() {
            return Err(Error::Input(format!(
                "checkpoint was trained on {} frames but the scene has {} training frames",
                ck.model.wb.frame_count(),
                data.training.len()
            )));
        }
        Ok((ck, cfg, data))
    }
}

#[derive(Args)]
struct Render {
    #[command(flatten)]
    source: CheckpointArgs,
    /// `hdr`, `ldr-low`, `ldr-mid`, `ldr-high`, `mulaw`, `depth` or `flow`.
    #[arg(long, default_value = "hdr")]
    mode: String,
    /// Sequence frame whose camera is used.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Normalized time in [0, 1]; the frame's own time by default.
    #[arg(long)]
    time: Option<f64>,
    /// Camera-center offset `x,y,z` for a novel viewpoint.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    offset: Option<Vec<f64>>,
    /// Output file: PFM for hdr/depth/flow, PNG otherwise.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    source: CheckpointArgs,
    /// Sequence frames to score (comma list); all by default.
    #[arg(long, value_delimiter = ',')]
    eval_frames: Option<Vec<usize>>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    no_flow: bool,
    #[arg(long)]
    no_novel: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Plot {
    /// Training output directory holding `loss_log.txt` and `final.bin`.
    #[arg(long)]
    run: PathBuf,
    /// Scene for the radiance histogram; skipped when absent.
    #[arg(long)]
    scene: Option<String>,
    #[arg(long, default_value = "all")]
    train_frames: String,
    /// Sequence frame of the histogram.
    #[arg(long, default_value_t = 1)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })
}

fn gen_scene(a: &GenScene) -> Result<()> {
    let data = a.scene.load()?;
    create_dir(&a.out)?;
    let m = save_dataset(&a.out, &data)?;
    println!("wrote {} frames ({} for training) to {}", m.frames.len(), m.training.len(), a.out.display());
    Ok(())
}

fn write_crf(dir: &Path, ck: &Checkpoint) -> Result<()> {
    let gains = (0..ck.model.wb.frame_count()).map(|i| ck.model.wb.gain(i)).collect::<hdrfield::Result<Vec<_>>>()?;
    let path = dir.join("crf.txt");
    std::fs::write(&path, format_crf_table(&ck.model.curve.sampled(), &gains)).map_err(|e| Error::Io { path, source: e })
}

fn train(a: &Train) -> Result<()> {
    let cfg = a.config()?;
    let data = a.scene.load()?;
    create_dir(&a.out)?;
    let cfg_path = a.out.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()?).map_err(|e| Error::Io { path: cfg_path, source: e })?;
    let mut t = match &a.resume {
        Some(p) => Trainer::resume(cfg, &data, load_checkpoint(p)?)?,
        None => Trainer::new(cfg, &data)?,
    };
    let ck = t.run(Some(&a.out), None)?;
    write_crf(&a.out, &ck)?;
    if let Some((_, l)) = t.log().last() {
        println!("step {}: total loss {:.6}, photometric {:.6}", ck.step, l.total, l.photo);
    }
    println!("checkpoint written to {}", a.out.join("final.bin").display());
    Ok(())
}

fn render(a: &Render) -> Result<()> {
    let (ck, cfg, data) = a.source.load()?;
    let spec = &data.spec;
    let meta = data.frames.get(a.frame).ok_or_else(|| Error::Input(format!("frame {} out of range", a.frame)))?;
    let model = &ck.model;
    let out = &a.out;
    if a.mode == "flow" {
        let k = data
            .training
            .iter()
            .position(|f| *f == a.frame)
            .filter(|k| k + 1 < data.training.len())
            .ok_or_else(|| Error::Input("flow needs a training frame with a following training frame".into()))?;
        let flow = render_flow(model, &data.training_frames(), k, k + 1, spec.z_near, spec.z_far, cfg.samples)?;
        let (w, h) = (meta.camera.width(), meta.camera.height());
        let img = hdrfield::image::Image::from_fn(w, h, 3, |x, y, c| match (flow[y * w + x], c) {
            (Some(f), 0) => f.x,
            (Some(f), 1) => f.y,
            (Some(_), _) => 1.0,
            (None, _) => 0.0,
        });
        write_pfm(out, &img)?;
        write_png16(&out.with_extension("png"), &flow_image(&flow, w, h, 3.0)?)?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    let mode: RenderMode = a.mode.parse()?;
    let cam = match &a.offset {
        Some(o) if o.len() != 3 => return Err(Error::Input(format!("--offset needs 3 values, got {}", o.len()))),
        Some(o) => displaced_camera(&meta.camera, [o[0], o[1], o[2]])?,
        None => meta.camera,
    };
    let t = a.time.unwrap_or(meta.time);
    let v = render_view(model, &cam, t, spec.z_near, spec.z_far, cfg.samples)?;
    match mode {
        RenderMode::Hdr => write_pfm(out, &v.hdr)?,
        RenderMode::Depth => {
            write_pfm(out, &v.depth)?;
            write_png16(&out.with_extension("png"), &depth_image(&v.depth, spec.z_near, spec.z_far))?;
        }
        RenderMode::Mulaw => write_png16(out, &mulaw_image(&v.hdr)?)?,
        RenderMode::Ldr(tag) => write_png16(out, &tonemap_image(model, &v.hdr, tag_gain(model, &data.training_frames(), tag)?)?)?,
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(a: &Eval) -> Result<bool> {
    let (ck, cfg, data) = a.source.load()?;
    let mut opts = EvalOptions {
        samples: a.samples.unwrap_or(cfg.samples),
        frames: a.eval_frames.clone(),
        flow: !a.no_flow,
        ..EvalOptions::default()
    };
    if a.no_novel {
        opts.novel_offset = None;
    }
    let report = evaluate(&ck.model, &data, &opts)?;
    let json = report.to_json()?;
    if let Some(p) = &a.out {
        std::fs::write(p, &json).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    println!("{json}");
    println!("{}", report.table());
    Ok(report.passed())
}

fn plot(a: &Plot) -> Result<()> {
    let log = a.run.join("loss_log.txt");
    if !log.exists() {
        return Err(Error::Input(format!("no loss log at {}", log.display())));
    }
    create_dir(&a.out)?;
    write_loss_plot(&a.out.join("loss.svg"), &read_loss_log(&log)?)?;
    let ck = load_checkpoint(&a.run.join("final.bin"))?;
    let (gamma, data) = match &a.scene {
        Some(s) => {
            let args = SceneArgs {
                scene: s.clone(),
                train_frames: a.train_frames.clone(),
                corrupt: false,
                corrupt_seed: 0,
                width: None,
                height: None,
                frames: None,
            };
            let d = args.load()?;
            (Some(d.spec.gamma), Some(d))
        }
        None => (None, None),
    };
    if !matches!(ck.model.curve, ToneCurve::Disabled) {
        write_crf_plot(&a.out.join("crf.svg"), &ck.model.curve.sampled(), gamma)?;
    }
    if let Some(d) = data {
        let cfg: TrainConfig = serde_json::from_str(&ck.config)?;
        let meta = d.frames.get(a.frame).ok_or_else(|| Error::Input(format!("frame {} out of range", a.frame)))?;
        let v = render_view(&ck.model, &meta.camera, meta.time, d.spec.z_near, d.spec.z_far, cfg.samples)?;
        let h = write_histogram(&a.out, "histogram", &v.hdr, &d.hdr[a.frame])?;
        println!("histogram over {} grid points", h.grid.len());
    }
    println!("figures written to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenScene(a) => gen_scene(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Render(a) => render(a).map(|_| true),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: an evaluation invariant failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
