use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use amcn::gda::{apply_gda, write_residuals, DEFAULT_MAX_NEIGHBORS, DEFAULT_POWER};
use amcn::grid::{
    bilinear_resample, read_grid, read_stack, read_stations, write_grid, write_stack, write_stations, GeoGrid,
    GridStack, Ratio,
};
use amcn::losses::Reduction;
use amcn::net::{init_params, load_model, save_model, AmcnConfig, AmcnModel};
use amcn::nn::{gradcheck, Evaluation, Fault, GradcheckOptions, Graph};
use amcn::preprocess::{assemble_ancillary, clean_bands, PipelineOptions};
use amcn::train::{
    evaluate_image, evaluate_stations, objective, synth_scene, synth_scenes, train, training_set_from_grids,
    write_loss_csv, Metrics, SynthOptions, TrainConfig,
};

use crate::settings::{usage, Manifest, Outputs, Settings};
use crate::{
    CalibrateArgs, Cli, Command, DownscaleArgs, EvalArgs, GradcheckArgs, GradcheckFailed, PreprocessArgs,
    SynthArgs, TrainArgs,
};

const HR: &str = "hr.agrid";
const LR: &str = "lr.agrid";
const ANCILLARY: &str = "ancillary.agrid";
const RAW: &str = "raw.agrid";
const STATIONS: &str = "stations.csv";

/// Outcome of a command: its manifest, where to put it, and an error to
/// report after the (complete) outputs are kept.
struct Done {
    manifest: Manifest,
    manifest_path: PathBuf,
    failure: Option<anyhow::Error>,
}

impl Done {
    fn ok(manifest: Manifest, manifest_path: PathBuf) -> Result<Self> {
        Ok(Self {
            manifest,
            manifest_path,
            failure: None,
        })
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let mut settings = Settings::load(cli.config.as_deref())?;
    let mut outputs = Outputs::default();
    let result = match cli.command {
        Command::Synth(a) => synth(a, &mut settings, &mut outputs),
        Command::Preprocess(a) => preprocess(a, &mut settings, &mut outputs),
        Command::Train(a) => train_cmd(a, &mut settings, &mut outputs),
        Command::Downscale(a) => downscale(a, &mut settings, &mut outputs),
        Command::Calibrate(a) => calibrate(a, &mut settings, &mut outputs),
        Command::Eval(a) => eval(a, &mut settings, &mut outputs),
        Command::Gradcheck(a) => gradcheck_cmd(a, &mut settings, &mut outputs),
    };
    let finished = result.and_then(|done| {
        let path = outputs.file("manifest", &done.manifest_path);
        let text = done.manifest.render(&settings, &outputs, cli.threads);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(done.failure)
    });
    match finished {
        Ok(None) => Ok(()),
        Ok(Some(e)) => Err(e),
        Err(e) => {
            outputs.remove_all();
            Err(e)
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_grid_checked(grid: &GeoGrid, path: &Path) -> Result<()> {
    write_grid(grid, path).with_context(|| format!("writing {}", path.display()))?;
    let back = read_grid(path).with_context(|| format!("re-reading {}", path.display()))?;
    if back.values().iter().zip(grid.values()).any(|(a, b)| a.to_bits() != b.to_bits()) || back != *grid {
        anyhow::bail!("{} does not read back identically", path.display());
    }
    Ok(())
}

fn write_stack_checked(stack: &GridStack, path: &Path) -> Result<()> {
    write_stack(stack, path).with_context(|| format!("writing {}", path.display()))?;
    let back = read_stack(path).with_context(|| format!("re-reading {}", path.display()))?;
    if back != *stack {
        anyhow::bail!("{} does not read back identically", path.display());
    }
    Ok(())
}

fn read_grid_at(path: &Path) -> Result<GeoGrid> {
    read_grid(path).with_context(|| format!("reading {}", path.display()))
}

fn read_stack_at(path: &Path) -> Result<GridStack> {
    read_stack(path).with_context(|| format!("reading {}", path.display()))
}

fn synth(a: SynthArgs, s: &mut Settings, out: &mut Outputs) -> Result<Done> {
    let seed = s.get("seed", a.seed, 0)?;
    let rows = s.get("rows", a.rows, 64)?;
    let cols = s.get("cols", a.cols, 64)?;
    let scale = s.get("scale", a.scale, 4)?;
    let count = s.get("scenes", a.scenes, 1)?;
    let opts = SynthOptions {
        n_stations: s.get("stations", a.stations, SynthOptions::default().n_stations)?,
        station_bias: s.get("station-bias", a.station_bias, 0.0)?,
        station_noise: s.get("station-noise", a.station_noise, 0.0)?,
        ..SynthOptions::default()
    };
    let dir = s.path("out", a.out)?;
    s.finish()?;
    if scale < 2 || rows == 0 || cols == 0 || rows % scale != 0 || cols % scale != 0 || count == 0 {
        return Err(usage(format!(
            "need scale >= 2 dividing rows {rows} and cols {cols}, and at least one scene"
        )));
    }
    if opts.station_noise < 0.0 || !opts.station_noise.is_finite() || !opts.station_bias.is_finite() {
        return Err(usage("station bias and noise must be finite, noise nonnegative"));
    }
    let dir = out.dir("dir", &dir)?;
    let scenes = synth_scenes(seed, count, rows, cols, scale, &opts)?;
    for (i, sc) in scenes.iter().enumerate() {
        let sub = dir.join(format!("scene_{i:03}"));
        if !sub.exists() {
            fs::create_dir(&sub).with_context(|| format!("creating {}", sub.display()))?;
            out.inner(&sub);
        }
        write_grid_checked(&sc.hr_precip, &out.inner(&sub.join(HR)))?;
        write_grid_checked(&sc.lr_precip, &out.inner(&sub.join(LR)))?;
        write_stack_checked(&sc.ancillary, &out.inner(&sub.join(ANCILLARY)))?;
        write_stack_checked(&sc.raw, &out.inner(&sub.join(RAW)))?;
        let st = out.inner(&sub.join(STATIONS));
        write_stations(&sc.stations, &st).with_context(|| format!("writing {}", st.display()))?;
    }
    Done::ok(Manifest::new("synth"), dir.join("manifest.txt"))
}

fn preprocess(a: PreprocessArgs, s: &mut Settings, out: &mut Outputs) -> Result<Done> {
    let input = s.path("in", a.input)?;
    let target = s.path("out", a.out)?;
    let cleaned = s.opt_path("cleaned", a.cleaned)?;
    s.finish()?;
    let mut m = Manifest::new("preprocess");
    m.input("raw", &input);
    let raw = read_stack_at(&input)?;
    let opts = PipelineOptions::default();
    let anc = assemble_ancillary(&raw, &opts)?;
    write_stack_checked(&anc, &out.file("ancillary", &target))?;
    if let Some(c) = cleaned {
        let bands = clean_bands(&raw, &opts)?;
        write_stack_checked(&bands, &out.file("cleaned", &c))?;
    }
    Done::ok(m, sibling(&target, ".manifest"))
}

struct SceneFiles {
    lr: GeoGrid,
    ancillary: GridStack,
    hr: GeoGrid,
}

fn read_scene_dir(data: &Path) -> Result<Vec<SceneFiles>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)
        .with_context(|| format!("reading {}", data.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(HR).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        anyhow::bail!("no scene directories with {HR} under {}", data.display());
    }
    dirs.iter()
        .map(|d| {
            Ok(SceneFiles {
                lr: read_grid_at(&d.join(LR))?,
                ancillary: read_stack_at(&d.join(ANCILLARY))?,
                hr: read_grid_at(&d.join(HR))?,
            })
        })
        .collect()
}

fn presets(name: &str) -> Result<(AmcnConfig, TrainConfig)> {
    match name {
        "desk" => Ok((AmcnConfig::desk(), TrainConfig::desk())),
        "canonical" => Ok((AmcnConfig::canonical(), TrainConfig::canonical())),
        "tiny" => Ok((
            AmcnConfig::tiny(),
            TrainConfig {
                batch_size: 4,
                patch: 16,
                stride: 16,
                ..TrainConfig::desk()
            },
        )),
        other => Err(usage(format!("unknown preset {other:?}; expected desk, tiny or canonical"))),
    }
}

fn parse_reduction(s: &str) -> Result<Reduction> {
    match s {
        "per-patch" => Ok(Reduction::PerPatch),
        "per-pixel" => Ok(Reduction::PerPixel),
        other => Err(usage(format!("unknown reduction {other:?}; expected per-patch or per-pixel"))),
    }
}

fn reduction_name(r: Reduction) -> &'static str {
    match r {
        Reduction::PerPatch => "per-patch",
        Reduction::PerPixel => "per-pixel",
    }
}

fn train_cmd(a: TrainArgs, s: &mut Settings, out: &mut Outputs) -> Result<Done> {
    let data = s.path("data", a.data)?;
    let model_path = s.path("out-model", a.out_model)?;
    let loss_path = s.opt_path("loss-csv", a.loss_csv)?.unwrap_or_else(|| sibling(&model_path, ".loss.csv"));
    let preset: String = s.get("preset", a.preset, "desk".into())?;
    let (mut net, mut tc) = presets(&preset)?;
    tc.seed = s.get("seed", a.seed, tc.seed)?;
    tc.epochs = s.get("epochs", a.epochs, tc.epochs)?;
    tc.batch_size = s.get("batch-size", a.batch_size, tc.batch_size)?;
    tc.patch = s.get("patch", a.patch, tc.patch)?;
    tc.stride = s.get("stride", a.stride, tc.stride)?;
    tc.lr0 = s.get("lr0", a.lr0, tc.lr0)?;
    tc.lr_halving_period = s.get("lr-halving-period", a.lr_halving_period, tc.lr_halving_period)?;
    let red: String = s.get("reduction", a.reduction, reduction_name(tc.reduction).into())?;
    tc.reduction = parse_reduction(&red)?;
    let scale_flag = s.opt("scale", a.scale)?;
    net.base_channels = s.get("base-channels", a.base_channels, net.base_channels)?;
    net.rdb_layers = s.get("rdb-layers", a.rdb_layers, net.rdb_layers)?;
    net.rdb_growth = s.get("rdb-growth", a.rdb_growth, net.rdb_growth)?;
    net.n_levels = s.get("levels", a.levels, net.n_levels)?;
    net.kernel = s.get("kernel", a.kernel, net.kernel)?;
    net.use_gca = !s.switch("no-gca", a.no_gca)?;
    net.use_mfca = !s.switch("no-mfca", a.no_mfca)?;
    net.use_degradation_loss = !s.switch("no-degradation-loss", a.no_degradation_loss)?;
    s.finish()?;

    let mut m = Manifest::new("train");
    m.input("data", &data);
    let scenes = read_scene_dir(&data)?;
    let first = &scenes[0];
    let data_scale = first.hr.nrows() / first.lr.nrows().max(1);
    net.scale = match scale_flag {
        Some(r) if r != data_scale => {
            return Err(usage(format!("--scale {r} but the data are coarsened by {data_scale}")))
        }
        _ => data_scale,
    };
    s.resolved.insert("scale".into(), net.scale.to_string());
    net.n_ancillary = first.ancillary.len();
    net.validate().map_err(|e| usage(e.to_string()))?;
    tc.validate(net.scale).map_err(|e| usage(e.to_string()))?;

    let triples: Vec<_> = scenes.iter().map(|f| (&f.lr, &f.ancillary, &f.hr)).collect();
    let set = training_set_from_grids(&triples, net.scale, tc.patch, tc.stride)?;
    let mut model = AmcnModel::new(net, set.norm.clone(), tc.seed)?;
    let history = train(&mut model, &set, &tc)?;

    let mp = out.file("model", &model_path);
    save_model(&model, &mp).with_context(|| format!("writing {}", mp.display()))?;
    if load_model(&mp)? != model {
        anyhow::bail!("{} does not read back identically", mp.display());
    }
    let lp = out.file("loss_csv", &loss_path);
    write_loss_csv(&history, &lp).with_context(|| format!("writing {}", lp.display()))?;
    if let (Some(f), Some(l)) = (history.first(), history.last()) {
        println!(
            "patches={} iterations={} first_L_total={} last_L_total={}",
            set.patches.len(),
            history.len(),
            f.l_total,
            l.l_total
        );
    }
    Done::ok(m, sibling(&model_path, ".manifest"))
}

fn downscale(a: DownscaleArgs, s: &mut Settings, out: &mut Outputs) -> Result<Done> {
    let model_path = s.path("model", a.model)?;
    let lr_path = s.path("lr-precip", a.lr_precip)?;
    let anc_path = s.path("ancillary", a.ancillary)?;
    let target = s.path("out", a.out)?;
    s.finish()?;
    let mut m = Manifest::new("downscale");
    m.input("model", &model_path);
    m.input("lr_precip", &lr_path);
    m.input("ancillary", &anc_path);
    let model = load_model(&model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let pred = model.predict(&read_grid_at(&lr_path)?, &read_stack_at(&anc_path)?)?;
    write_grid_checked(&pred, &out.file("raster", &target))?;
    Done::ok(m, sibling(&target, ".manifest"))
}

fn calibrate(a: CalibrateArgs, s: &mut Settings, out: &mut Outputs) -> Result<Done> {
    let input = s.path("in", a.input)?;
    let st_path = s.path("stations", a.stations)?;
    let target = s.path("out", a.out)?;
    let res_path = s.opt_path("residuals", a.residuals)?.unwrap_or_else(|| sibling(&target, ".residuals.csv"));
    let power = s.get("power", a.power, DEFAULT_POWER)?;
    let k = s.get("max-neighbors", a.max_neighbors, DEFAULT_MAX_NEIGHBORS)?;
    s.finish()?;
    if !(power > 0.0 && power.is_finite()) || k == 0 {
        return Err(usage("power and max-neighbors must be positive"));
    }
    let mut m = Manifest::new("calibrate");
    m.input("raster", &input);
    m.input("stations", &st_path);
    let grid = read_grid_at(&input)?;
    let stations = read_stations(&st_path).with_context(|| format!("reading {}", st_path.display()))?;
    let cal = apply_gda(&grid, &stations, power, k)?;
    if cal.residuals.skipped > 0 {
        eprintln!("skipped {} stations without a reading or over nodata", cal.residuals.skipped);
    }
    write_grid_checked(&cal.calibrated, &out.file("raster", &target))?;
    write_residuals(&cal.residuals.records, out.file("residuals", &res_path))?;
    Done::ok(m, sibling(&target, ".manifest"))
}

fn metrics_row(buf: &mut String, reference: &str, m: &Metrics) {
    let _ = writeln!(buf, "{reference},{},{},{},{}", m.r2, m.bias, m.rmse, m.n);
}

fn eval(a: EvalArgs, s: &mut Settings, out: &mut Outputs) -> Result<Done> {
    let pred_path = s.path("pred", a.pred)?;
    let truth = s.opt_path("truth", a.truth)?;
    let stations = s.opt_path("stations", a.stations)?;
    let lr = s.opt_path("lr-precip", a.lr_precip)?;
    let target = s.path("out", a.out)?;
    s.finish()?;
    if truth.is_none() && stations.is_none() && lr.is_none() {
        return Err(usage("eval needs at least one of --truth, --stations, --lr-precip"));
    }
    let mut m = Manifest::new("eval");
    m.input("pred", &pred_path);
    let pred = read_grid_at(&pred_path)?;
    let mut csv = String::from("reference,r2,bias,rmse,n\n");
    if let Some(t) = truth {
        m.input("truth", &t);
        metrics_row(&mut csv, "image", &evaluate_image(&pred, &read_grid_at(&t)?)?);
    }
    if let Some(p) = stations {
        m.input("stations", &p);
        let st = read_stations(&p).with_context(|| format!("reading {}", p.display()))?;
        metrics_row(&mut csv, "stations", &evaluate_stations(&pred, &st)?);
    }
    if let Some(p) = lr {
        m.input("lr_precip", &p);
        let coarse = read_grid_at(&p)?;
        let r = pred.nrows() / coarse.nrows().max(1);
        let down = bilinear_resample(&pred, Ratio::down(r as u32))?;
        metrics_row(&mut csv, "degradation", &evaluate_image(&down, &coarse)?);
    }
    let path = out.file("metrics", &target);
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Done::ok(m, sibling(&target, ".manifest"))
}

fn gradcheck_cmd(a: GradcheckArgs, s: &mut Settings, out: &mut Outputs) -> Result<Done> {
    let preset: String = s.get("preset", a.preset, "tiny".into())?;
    let (mut net, _) = presets(&preset)?;
    let seed = s.get("seed", a.seed, 0)?;
    let tolerance = s.get("tolerance", a.tolerance, GradcheckOptions::default().tolerance)?;
    net.use_gca = !s.switch("no-gca", a.no_gca)?;
    net.use_mfca = !s.switch("no-mfca", a.no_mfca)?;
    net.use_degradation_loss = !s.switch("no-degradation-loss", a.no_degradation_loss)?;
    let fault = s.switch("inject-fault", a.inject_fault)?;
    let target = s.opt_path("out", a.out)?.unwrap_or_else(|| PathBuf::from("gradcheck.txt"));
    s.finish()?;
    if !(tolerance > 0.0) {
        return Err(usage("tolerance must be positive"));
    }

    // two patches of 4r x 4r fine pixels
    let r = net.scale;
    let side = 4 * r;
    let scenes = (0..2)
        .map(|i| synth_scene(seed.wrapping_add(i), side, side, r, &SynthOptions::default()))
        .collect::<Result<Vec<_>, _>>()?;
    let triples: Vec<_> = scenes.iter().map(|s| (&s.lr_precip, &s.ancillary, &s.hr_precip)).collect();
    let set = training_set_from_grids(&triples, r, side, side)?;
    let batch = set.batch::<f64>(&[0, 1])?;
    let mut params = init_params(&net, seed)?.cast::<f64>();
    let reduction = TrainConfig::default().reduction;
    let mut g = Graph::new();
    let (_, base) = objective(&mut g, &net, &params, &set.norm, &batch, reduction, None)?;
    let weights = net.use_degradation_loss.then_some((base.alpha, base.beta));
    let opts = GradcheckOptions {
        tolerance,
        seed,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&mut params, &opts, |p, want| {
        let mut g = Graph::new();
        if fault {
            g.inject_fault(Fault::ConvWeightGrad);
        }
        let (loss, rep) = objective(&mut g, &net, p, &set.norm, &batch, reduction, weights).map_err(|e| match e {
            amcn::train::TrainError::Nn(e) => e,
            amcn::train::TrainError::Net(amcn::net::NetError::Nn(e)) => e,
            other => amcn::nn::NnError::Shape {
                op: "objective",
                detail: other.to_string(),
            },
        })?;
        let grads = if want { Some(g.backward(loss)?.for_params(p)) } else { None };
        Ok(Evaluation {
            loss: rep.l_total,
            grads,
        })
    })?;
    let text = format!(
        "passed={}\nmax_rel_error={:e}\ntolerance={:e}\nworst_param={}\nworst_index={}\nanalytic={:e}\nnumeric={:e}\nchecked={}\ntotal={}\n",
        report.passed(),
        report.max_rel_error,
        report.tolerance,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric,
        report.checked,
        report.total
    );
    let path = out.file("report", &target);
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    let failure = (!report.passed()).then(|| {
        anyhow::Error::new(GradcheckFailed(format!(
            "max relative error {:e} at {}[{}] exceeds {:e}",
            report.max_rel_error, report.worst_param, report.worst_index, report.tolerance
        )))
    });
    Ok(Done {
        manifest: Manifest::new("gradcheck"),
        manifest_path: sibling(&target, ".manifest"),
        failure,
    })
}
