//! One function per subcommand. Each reads the effective config, writes its
//! artifacts into the output directory and finishes with a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use microrecon::descriptors::{
    autocorrelation_distance, linear_path, local_porosity_distribution, two_point_cluster, two_point_probability,
    DescriptorCurve,
};
use microrecon::losses::References;
use microrecon::network::{design_from_prior, ModelParams, NetworkSpec};
use microrecon::reconstructor::reconstruct;
use microrecon::sa::{anneal, AnnealOutput};
use microrecon::trainer::train;
use microrecon::volume::{encode_pgm, load_image, GridView, Image2D, Volume3D};
use microrecon::Error;
use serde::Serialize;

use crate::config::{EvalDescriptor, RunConfig};
use crate::error::CliError;
use crate::manifest::{file_sha256, Manifest};

pub const MODEL_FILE: &str = "model.mm01";
pub const RECON_FILE: &str = "recon.mv01";

/// Effective config plus the output directory and the manifest being built.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub manifest: Manifest,
}

impl Run {
    pub fn new(command: &str, cfg: RunConfig) -> Result<Self, CliError> {
        let out = cfg.output_dir();
        std::fs::create_dir_all(&out).map_err(CliError::io(format!("creating {}", out.display())))?;
        let manifest = Manifest::new(command, &cfg);
        Ok(Self { cfg, out, manifest })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        self.manifest.write(&path, bytes)?;
        Ok(path)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
        self.write(name, text.as_bytes())
    }

    fn finish(self) -> Result<PathBuf, CliError> {
        self.manifest.finish(&self.out)
    }
}

/// A loaded reference image and where it came from.
pub struct LabelledImage {
    pub label: &'static str,
    pub path: PathBuf,
    pub image: Image2D,
}

fn load_references(run: &mut Run) -> Result<(References, Vec<LabelledImage>), CliError> {
    let mut load = |label, path: &Path| -> Result<LabelledImage, CliError> {
        if !path.exists() {
            return Err(CliError::Config(format!("reference image {} does not exist", path.display())));
        }
        run.manifest.input(path)?;
        Ok(LabelledImage { label, path: path.to_owned(), image: load_image(path)? })
    };
    let input = run.cfg.input.clone();
    match (input.reference, input.references) {
        (Some(path), None) => {
            let img = load("isotropic", &path)?;
            Ok((References::Isotropic(img.image.clone()), vec![img]))
        }
        (None, Some(p)) => {
            let imgs = [load("xy", &p.xy)?, load("xz", &p.xz)?, load("yz", &p.yz)?];
            let refs = References::Anisotropic([imgs[0].image.clone(), imgs[1].image.clone(), imgs[2].image.clone()]);
            Ok((refs, imgs.into()))
        }
        _ => Err(CliError::Config("no reference image: set input.reference (or --image) or input.references".into())),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PriorReport {
    pub orientation: &'static str,
    pub path: PathBuf,
    pub porosity: f64,
    pub max_lag: usize,
    pub l_cor: usize,
    pub converged: bool,
    pub recommended: String,
    pub m: usize,
    pub n: usize,
    pub warnings: Vec<String>,
}

fn analyze_image(run: &Run, img: &LabelledImage) -> Result<(PriorReport, DescriptorCurve), CliError> {
    let d = &run.cfg.design;
    let side = img.image.width().min(img.image.height());
    let max_lag = d.max_lag.unwrap_or(side / 2).min(side.saturating_sub(1));
    let s2 = two_point_probability(&img.image.view(), max_lag)?;
    let porosity = img.image.porosity();
    let l_cor = autocorrelation_distance(&s2, porosity, d.correlation)?;
    let design = design_from_prior(&l_cor, Some(d.n), d.m_cap)?;
    let mut warnings: Vec<String> = design.warning.into_iter().collect();
    let phi = porosity.value();
    if phi == 0.0 || phi == 1.0 {
        warnings.push(format!("degenerate porosity {phi}: the image has a single phase, l_cor set to 1"));
    }
    for w in &warnings {
        log::warn!("{}: {w}", img.path.display());
    }
    let report = PriorReport {
        orientation: img.label,
        path: img.path.clone(),
        porosity: phi,
        max_lag,
        l_cor: l_cor.l_cor,
        converged: l_cor.converged,
        recommended: design.spec.label(),
        m: design.spec.m,
        n: design.spec.n,
        warnings,
    };
    Ok((report, s2))
}

/// Analyse every reference and pick the deepest recommendation, unless the
/// config fixes `m`.
fn design(run: &mut Run, images: &[LabelledImage], write_curves: bool) -> Result<(NetworkSpec, Vec<PriorReport>), CliError> {
    let mut reports = Vec::new();
    for img in images {
        let (report, s2) = analyze_image(run, img)?;
        if write_curves {
            let name = if images.len() == 1 { "s2.csv".to_owned() } else { format!("s2_{}.csv", img.label) };
            run.write(&name, s2.to_csv().as_bytes())?;
        }
        reports.push(report);
    }
    let spec = match run.cfg.design.m {
        Some(m) => NetworkSpec::new(m, run.cfg.design.n)?,
        None => {
            let deepest = reports.iter().max_by_key(|r| r.m).expect("at least one reference");
            NetworkSpec::new(deepest.m, deepest.n)?
        }
    };
    Ok((spec, reports))
}

fn print_reports(reports: &[PriorReport]) {
    for r in reports {
        println!(
            "{} {}: porosity {:.4}, l_cor {}{}, recommended {}",
            r.orientation,
            r.path.display(),
            r.porosity,
            r.l_cor,
            if r.converged { "" } else { " (not converged)" },
            r.recommended
        );
        for w in &r.warnings {
            println!("  warning: {w}");
        }
    }
}

pub fn cmd_analyze(cfg: RunConfig) -> Result<Vec<PriorReport>, CliError> {
    let mut run = Run::new("analyze", cfg)?;
    let (_, images) = load_references(&mut run)?;
    let (_, reports) = design(&mut run, &images, true)?;
    print_reports(&reports);
    run.write_json("prior.json", &reports)?;
    run.finish()?;
    Ok(reports)
}

#[derive(Debug, Serialize)]
struct DesignReport<'a> {
    spec: NetworkSpec,
    label: String,
    explicit_m: bool,
    priors: &'a [PriorReport],
}

pub fn cmd_design(cfg: RunConfig) -> Result<NetworkSpec, CliError> {
    let mut run = Run::new("design", cfg)?;
    let (_, images) = load_references(&mut run)?;
    let (spec, reports) = design(&mut run, &images, false)?;
    print_reports(&reports);
    println!("design: {} (receptive field {})", spec.label(), spec.receptive_field());
    let explicit_m = run.cfg.design.m.is_some();
    run.write_json("design.json", &DesignReport { spec, label: spec.label(), explicit_m, priors: &reports })?;
    run.finish()?;
    Ok(spec)
}

pub fn cmd_train(cfg: RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::new("train", cfg)?;
    let (refs, images) = load_references(&mut run)?;
    let (spec, reports) = design(&mut run, &images, false)?;
    print_reports(&reports);
    println!("training {} for {} iterations", spec.label(), run.cfg.train.iterations);
    let (params, mut report) = train(&refs, spec, &run.cfg.train)?;
    let model_path = run.write(MODEL_FILE, &params.to_bytes())?;
    report.model_path = Some(model_path.display().to_string());
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(csv, "{},{:e}", i + 1, l).unwrap();
    }
    run.write("train_loss.csv", csv.as_bytes())?;
    run.write_json("train_report.json", &report)?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        println!("loss {first:.6e} -> {last:.6e} in {:.1} s", report.wall_time_s);
    }
    run.finish()?;
    Ok(model_path)
}

#[derive(Debug, Serialize)]
struct ReconSidecar<'a> {
    model: PathBuf,
    model_sha256: String,
    spec: NetworkSpec,
    config: &'a microrecon::reconstructor::ReconConfig,
    threshold: f64,
    target_porosity: Option<f64>,
    achieved_porosity: f64,
    warnings: &'a [String],
}

pub fn cmd_reconstruct(cfg: RunConfig, model: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let mut run = Run::new("reconstruct", cfg)?;
    let model = model.unwrap_or_else(|| run.out.join(MODEL_FILE));
    if !model.exists() {
        return Err(CliError::Io {
            context: format!("model {}", model.display()),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file; run `train` first or pass --model"),
        });
    }
    run.manifest.input(&model)?;
    let params = ModelParams::load(&model)?;
    let recon = reconstruct(&params, &run.cfg.reconstruct)?;
    for w in &recon.warnings {
        println!("warning: {w}");
    }
    let path = run.write(RECON_FILE, &recon.binary.to_bytes())?;
    let mid = recon.binary.dims()[0] / 2;
    run.write("recon_mid_xy.pgm", &encode_pgm(&recon.binary.xy_plane(mid)?))?;
    let sidecar = ReconSidecar {
        model_sha256: file_sha256(&model)?,
        model,
        spec: params.spec,
        config: &run.cfg.reconstruct,
        threshold: recon.threshold,
        target_porosity: recon.target_porosity,
        achieved_porosity: recon.achieved_porosity,
        warnings: &recon.warnings,
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(Error::from)?;
    run.write("recon.json", text.as_bytes())?;
    println!("reconstructed {:?} at porosity {:.4} -> {}", recon.binary.dims(), recon.achieved_porosity, path.display());
    run.finish()?;
    Ok(path)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub path: PathBuf,
    pub dims: [usize; 3],
    pub porosity: f64,
    pub l_cor: usize,
    pub converged: bool,
    /// Mean absolute deviation of each curve from the reference image's.
    pub vs_reference: BTreeMap<String, f64>,
    /// Mean absolute deviation of each curve from the ground truth's.
    pub vs_ground_truth: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationSummary {
    pub max_lag: usize,
    pub reference: Option<GridSummary>,
    pub ground_truth: Option<GridSummary>,
    pub volumes: Vec<GridSummary>,
}

/// Curves of one grid, keyed by descriptor name; LPD as probabilities.
struct Curves {
    curves: BTreeMap<String, DescriptorCurve>,
    lpd: Option<Vec<f64>>,
}

fn curves_of(run: &mut Run, grid: &GridView<'_>, max_lag: usize, tag: &str) -> Result<Curves, CliError> {
    let e = run.cfg.evaluate.clone();
    let mut curves = BTreeMap::new();
    let mut lpd = None;
    for d in &e.descriptors {
        let (name, curve) = match d {
            EvalDescriptor::S2 => ("s2", two_point_probability(grid, max_lag)?),
            EvalDescriptor::Lineal => ("lineal", linear_path(grid, max_lag)?),
            EvalDescriptor::Cluster => ("cluster", two_point_cluster(grid, max_lag, e.connectivity)?),
            EvalDescriptor::Lpd => {
                if grid.is_3d {
                    let h = local_porosity_distribution(grid, e.lpd_window, e.lpd_bin_width)?;
                    run.write(&format!("eval_{tag}_lpd.csv"), h.to_csv().as_bytes())?;
                    lpd = Some(h.probabilities);
                }
                continue;
            }
        };
        run.write(&format!("eval_{tag}_{name}.csv"), curve.to_csv().as_bytes())?;
        curves.insert(name.to_owned(), curve);
    }
    Ok(Curves { curves, lpd })
}

fn deviations(a: &Curves, b: &Curves, max_lag: usize) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = a
        .curves
        .iter()
        .filter_map(|(k, c)| b.curves.get(k).map(|o| (k.clone(), c.mean_abs_deviation(o, max_lag))))
        .collect();
    if let (Some(p), Some(q)) = (&a.lpd, &b.lpd) {
        let mad = p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>() / p.len() as f64;
        out.insert("lpd".to_owned(), mad);
    }
    out
}

fn summarize(path: &Path, grid: &GridView<'_>, curves: &Curves, run: &Run, max_lag: usize) -> Result<GridSummary, CliError> {
    let porosity = grid.porosity();
    let s2 = match curves.curves.get("s2") {
        Some(c) => c.clone(),
        None => two_point_probability(grid, max_lag)?,
    };
    let l_cor = autocorrelation_distance(&s2, porosity, run.cfg.design.correlation)?;
    Ok(GridSummary {
        path: path.to_owned(),
        dims: grid.dims,
        porosity: porosity.value(),
        l_cor: l_cor.l_cor,
        converged: l_cor.converged,
        vs_reference: BTreeMap::new(),
        vs_ground_truth: BTreeMap::new(),
    })
}

fn load_volume(run: &mut Run, path: &Path) -> Result<Volume3D, CliError> {
    if !path.exists() {
        return Err(CliError::Io {
            context: format!("volume {}", path.display()),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    run.manifest.input(path)?;
    let v = Volume3D::load(path)?;
    v.binary_view()?;
    Ok(v)
}

fn min_side(dims: [usize; 3], is_3d: bool) -> usize {
    if is_3d {
        dims.into_iter().min().unwrap()
    } else {
        dims[1].min(dims[2])
    }
}

pub fn cmd_evaluate(
    cfg: RunConfig,
    volumes: Vec<PathBuf>,
    ground_truth: Option<PathBuf>,
) -> Result<EvaluationSummary, CliError> {
    let mut run = Run::new("evaluate", cfg)?;
    let volumes = if volumes.is_empty() { vec![run.out.join(RECON_FILE)] } else { volumes };
    let loaded: Vec<Volume3D> = volumes.iter().map(|p| load_volume(&mut run, p)).collect::<Result<_, _>>()?;
    let truth = ground_truth.as_ref().map(|p| load_volume(&mut run, p)).transpose()?;
    if let Some(t) = &truth {
        for (v, p) in loaded.iter().zip(&volumes) {
            if v.dims() != t.dims() {
                return Err(Error::Shape(format!(
                    "{} has dims {:?} but the ground truth has {:?}",
                    p.display(),
                    v.dims(),
                    t.dims()
                ))
                .into());
            }
        }
    }
    let reference = match (&run.cfg.input.reference, &run.cfg.input.references) {
        (None, None) => None,
        _ => Some(load_references(&mut run)?.1.remove(0)),
    };

    let mut max_lag = run.cfg.evaluate.max_lag;
    for v in loaded.iter().chain(&truth) {
        max_lag = max_lag.min(min_side(v.dims(), true) - 1);
    }
    if let Some(r) = &reference {
        max_lag = max_lag.min(r.image.width().min(r.image.height()) - 1);
    }

    let ref_eval = match &reference {
        Some(r) => {
            let view = r.image.view();
            let c = curves_of(&mut run, &view, max_lag, "reference")?;
            let s = summarize(&r.path, &view, &c, &run, max_lag)?;
            Some((c, s))
        }
        None => None,
    };
    let truth_eval = match (&truth, &ground_truth) {
        (Some(t), Some(p)) => {
            let view = t.binary_view()?;
            let c = curves_of(&mut run, &view, max_lag, "truth")?;
            let s = summarize(p, &view, &c, &run, max_lag)?;
            Some((c, s))
        }
        _ => None,
    };
    let mut summaries = Vec::new();
    for (i, (v, p)) in loaded.iter().zip(&volumes).enumerate() {
        let view = v.binary_view()?;
        let c = curves_of(&mut run, &view, max_lag, &format!("v{i}"))?;
        let mut s = summarize(p, &view, &c, &run, max_lag)?;
        if let Some((rc, _)) = &ref_eval {
            s.vs_reference = deviations(&c, rc, max_lag);
        }
        if let Some((tc, _)) = &truth_eval {
            s.vs_ground_truth = deviations(&c, tc, max_lag);
        }
        println!("{}: porosity {:.4}, l_cor {}", p.display(), s.porosity, s.l_cor);
        for (k, d) in s.vs_reference.iter() {
            println!("  {k} MAD vs reference {d:.5}");
        }
        for (k, d) in s.vs_ground_truth.iter() {
            println!("  {k} MAD vs ground truth {d:.5}");
        }
        summaries.push(s);
    }
    let summary = EvaluationSummary {
        max_lag,
        reference: ref_eval.map(|(_, s)| s),
        ground_truth: truth_eval.map(|(_, s)| s),
        volumes: summaries,
    };
    run.write_json("evaluation.json", &summary)?;
    run.finish()?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
struct SaSummary<'a> {
    config: &'a microrecon::sa::AnnealConfig,
    initial_energy: f64,
    best_energy: f64,
    final_energy: f64,
    swaps: usize,
    accepted: usize,
    output: PathBuf,
}

pub fn cmd_sa(cfg: RunConfig) -> Result<PathBuf, CliError> {
    let mut run = Run::new("sa", cfg)?;
    let (_, images) = load_references(&mut run)?;
    let reference = &images[0];
    let result = anneal(&reference.image, &run.cfg.sa)?;
    let output = match &result.best {
        AnnealOutput::Image(img) => run.write("sa_best.pgm", &encode_pgm(img))?,
        AnnealOutput::Volume(v) => run.write("sa_best.mv01", &v.to_bytes())?,
    };
    run.write("sa_trace.csv", result.trace_csv().as_bytes())?;
    let summary = SaSummary {
        config: &run.cfg.sa,
        initial_energy: result.initial_energy,
        best_energy: result.best_energy,
        final_energy: result.final_energy,
        swaps: result.swaps,
        accepted: result.accepted,
        output: output.clone(),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    run.write("sa.json", text.as_bytes())?;
    println!(
        "annealed {} swaps ({} accepted): energy {:.4e} -> best {:.4e}",
        result.swaps, result.accepted, result.initial_energy, result.best_energy
    );
    run.finish()?;
    Ok(output)
}
