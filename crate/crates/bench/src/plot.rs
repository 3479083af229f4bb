//! SVG plots of counterfactual search in two dimensions: decision regions,
//! the search path, the objective's descent field and conditional samples.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, Result};
use faithcf::generators::{eccco_loss, CounterfactualProblem, CounterfactualResult, GeneratorKind, GeneratorParams, Pca, SearchSpace};
use faithcf::models::Classifier;
use faithcf::Tensor;
use log::{info, warn};

use crate::artifacts::{prepare, Layout, Workspace};
use crate::bench::{draw_samples, sample_cases, search, Case, Purpose, SampleKey, Variant};
use crate::config::BenchConfig;
use crate::error::config_error;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 640.0;
const MARGIN: f64 = 40.0;
const MAX_POINTS: usize = 400;
const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// Maps feature space to the plotting plane.
pub enum Projection {
    Identity,
    /// First two principal components of the training split.
    Pca(Pca),
}

impl Projection {
    pub fn for_workspace(ws: &Workspace, project_pca: bool) -> Result<Self> {
        match (ws.data.n_features(), project_pca) {
            (2, false) => Ok(Projection::Identity),
            (d, true) if d >= 2 => Ok(Projection::Pca(Pca::fit(&ws.data.train().0, 2)?)),
            (d, _) => Err(config_error(format!(
                "dataset `{}` has {d} features; plots need 2 (pass --project-pca to plot the first two principal components)",
                ws.data.name
            ))),
        }
    }

    pub fn to_plane(&self, x: &[f64]) -> [f64; 2] {
        match self {
            Projection::Identity => [x[0], x[1]],
            Projection::Pca(p) => {
                let z = p.encode(x);
                [z[0], z[1]]
            }
        }
    }

    pub fn from_plane(&self, u: [f64; 2]) -> Vec<f64> {
        match self {
            Projection::Identity => u.to_vec(),
            Projection::Pca(p) => p.decode(&u),
        }
    }

    /// Project a feature-space direction onto the plane.
    pub fn direction(&self, v: &[f64]) -> [f64; 2] {
        match self {
            Projection::Identity => [v[0], v[1]],
            Projection::Pca(p) => {
                let c = &p.components;
                let dot = |k: usize| (0..v.len()).map(|j| c.get(k, j) * v[j]).sum();
                [dot(0), dot(1)]
            }
        }
    }
}

/// The parameters and search space a generator actually optimizes over.
pub fn effective<'a>(ws: &'a Workspace, variant: &Variant) -> (GeneratorParams, SearchSpace<'a>) {
    let mut params = variant.params.clone();
    if matches!(variant.kind, GeneratorKind::Wachter | GeneratorKind::Revise | GeneratorKind::Schut) {
        params.lambda2 = 0.0;
        params.lambda3 = 0.0;
    }
    let space = match variant.kind {
        GeneratorKind::Revise => SearchSpace::Vae(&ws.vae),
        GeneratorKind::EcccoPlus => SearchSpace::Pca(&ws.pca),
        _ => SearchSpace::Feature,
    };
    (params, space)
}

/// Feature-space displacement of one search step from `x`, divided by the
/// step size. In feature space this is `−∇ objective(x)`; in a latent space
/// the step is taken from the code of `x`.
pub fn descent_direction(
    ws: &Workspace,
    case: &Case,
    variant: &Variant,
    penalty: Option<&Tensor>,
    x: &[f64],
) -> Result<Vec<f64>> {
    let rm = &ws.models[case.model];
    let (params, space) = effective(ws, variant);
    let mut problem = CounterfactualProblem::new(ws.data.x.row(case.row), case.target, &rm.model, &params)
        .with_calibrator(&rm.calibrator)
        .with_space(space);
    if variant.kind == GeneratorKind::EcccoL1 {
        problem = problem.with_samples(penalty.ok_or_else(|| anyhow!("missing ECCCo-L1 reference samples"))?);
    }
    let z = space.encode(x)?;
    let eval = eccco_loss(&z, &problem)?;
    if matches!(space, SearchSpace::Feature) {
        return Ok(eval.grad.iter().map(|g| -g).collect());
    }
    let eta = params.eta;
    let stepped: Vec<f64> = z.iter().zip(&eval.grad).map(|(a, g)| a - eta * g).collect();
    let (from, to) = (space.decode(&z)?, space.decode(&stepped)?);
    Ok(to.iter().zip(&from).map(|(b, a)| (b - a) / eta).collect())
}

/// Everything drawn in one plot, in plane coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub title: String,
    pub n_classes: usize,
    /// `(x_min, x_max, y_min, y_max)`
    pub bounds: (f64, f64, f64, f64),
    /// Cell centre, predicted class and confidence.
    pub cells: Vec<([f64; 2], usize, f64)>,
    pub cell_size: [f64; 2],
    pub points: Vec<([f64; 2], usize)>,
    /// Anchor and raw direction.
    pub arrows: Vec<([f64; 2], [f64; 2])>,
    pub arrow_spacing: f64,
    pub path: Vec<[f64; 2]>,
    pub factual: [f64; 2],
    pub counterfactual: Option<([f64; 2], usize)>,
    pub stars: Vec<[f64; 2]>,
}

fn grid_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * step).collect()
}

pub struct SceneInput<'a> {
    pub ws: &'a Workspace,
    pub case: &'a Case,
    pub variant: &'a Variant,
    pub result: Option<&'a CounterfactualResult>,
    pub xhat: &'a Tensor,
    pub penalty: Option<&'a Tensor>,
    pub projection: &'a Projection,
    pub resolution: usize,
    pub arrows: usize,
}

pub fn build_scene(input: &SceneInput) -> Result<Scene> {
    let SceneInput { ws, case, variant, result, xhat, penalty, projection, .. } = *input;
    let rm = &ws.models[case.model];
    let ds = &ws.data;
    let factual = projection.to_plane(ds.x.row(case.row));
    let path: Vec<[f64; 2]> = result.map_or(Vec::new(), |r| r.trace.iter().map(|s| projection.to_plane(&s.x)).collect());
    let stars: Vec<[f64; 2]> = (0..xhat.rows()).map(|i| projection.to_plane(xhat.row(i))).collect();
    let train = &ds.splits.train;
    let points: Vec<([f64; 2], usize)> =
        train.iter().take(MAX_POINTS).map(|&i| (projection.to_plane(ds.x.row(i)), ds.labels[i])).collect();

    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let all_train = train.iter().map(|&i| projection.to_plane(ds.x.row(i)));
    for p in all_train.chain(path.iter().copied()).chain(stars.iter().copied()).chain(std::iter::once(factual)) {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..2 {
        let pad = 0.05 * (hi[k] - lo[k]).max(1e-6);
        lo[k] -= pad;
        hi[k] += pad;
    }

    let (gx, gy) = (grid_axis(lo[0], hi[0], input.resolution), grid_axis(lo[1], hi[1], input.resolution));
    let mut centres = Vec::with_capacity(gx.len() * gy.len());
    for &y in &gy {
        for &x in &gx {
            centres.push([x, y]);
        }
    }
    let d = ds.n_features();
    let flat: Vec<f64> = centres.iter().flat_map(|&u| projection.from_plane(u)).collect();
    let proba = rm.model.predict_proba(&Tensor::matrix(centres.len(), d, flat)?)?;
    let cells = centres
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let row = proba.row(i);
            let (k, p) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
            (c, k, p)
        })
        .collect();

    let (ax, ay) = (grid_axis(lo[0], hi[0], input.arrows), grid_axis(lo[1], hi[1], input.arrows));
    let mut arrows = Vec::with_capacity(ax.len() * ay.len());
    for &y in &ay {
        for &x in &ax {
            let dir = descent_direction(ws, case, variant, penalty, &projection.from_plane([x, y]))?;
            arrows.push(([x, y], projection.direction(&dir)));
        }
    }

    let counterfactual = result.map(|r| {
        let pred = rm.model.predict_label(&Tensor::row_vector(r.x.clone())).map(|p| p[0]).unwrap_or(case.target);
        (projection.to_plane(&r.x), pred)
    });
    Ok(Scene {
        title: format!("{} | {} | {}", variant.kind.label(), rm.name, ds.name),
        n_classes: ds.n_classes(),
        bounds: (lo[0], hi[0], lo[1], hi[1]),
        cells,
        cell_size: [(hi[0] - lo[0]) / input.resolution as f64, (hi[1] - lo[1]) / input.resolution as f64],
        points,
        arrows,
        arrow_spacing: ((hi[0] - lo[0]) / input.arrows as f64).min((hi[1] - lo[1]) / input.arrows as f64),
        path,
        factual,
        counterfactual,
        stars,
    })
}

fn star(cx: f64, cy: f64, r: f64) -> String {
    let mut pts = Vec::with_capacity(10);
    for i in 0..10 {
        let rad = if i % 2 == 0 { r } else { 0.45 * r };
        let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
        pts.push(format!("{:.2},{:.2}", cx + rad * a.cos(), cy + rad * a.sin()));
    }
    pts.join(" ")
}

fn colour(k: usize) -> &'static str {
    PALETTE[k % PALETTE.len()]
}

/// Render a scene. Numbers are printed at fixed precision so equal scenes
/// give equal bytes.
pub fn render_svg(s: &Scene) -> String {
    let (x0, x1, y0, y1) = s.bounds;
    let sx = (WIDTH - 2.0 * MARGIN) / (x1 - x0);
    let sy = (HEIGHT - 2.0 * MARGIN) / (y1 - y0);
    let px = |x: f64| MARGIN + (x - x0) * sx;
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) * sy;
    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(o, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(o, r#"<g id="regions" shape-rendering="crispEdges">"#);
    let floor = 1.0 / s.n_classes.max(1) as f64;
    let (w, h) = (s.cell_size[0] * sx, s.cell_size[1] * sy);
    for &(c, k, p) in &s.cells {
        let opacity = 0.1 + 0.35 * ((p - floor) / (1.0 - floor)).clamp(0.0, 1.0);
        let _ = writeln!(
            o,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="{:.3}"/>"#,
            px(c[0]) - w / 2.0,
            py(c[1]) - h / 2.0,
            w + 0.2,
            h + 0.2,
            colour(k),
            opacity
        );
    }
    let _ = writeln!(o, "</g>");
    let _ = writeln!(o, r#"<g id="data">"#);
    for &(p, k) in &s.points {
        let _ = writeln!(
            o,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="{}" fill-opacity="0.6"/>"#,
            px(p[0]),
            py(p[1]),
            colour(k)
        );
    }
    let _ = writeln!(o, "</g>");
    let _ = writeln!(o, r##"<g id="field" stroke="#333" fill="#333" stroke-width="1">"##);
    let longest = s.arrows.iter().map(|(_, d)| d[0].hypot(d[1])).fold(0.0, f64::max);
    if longest > 0.0 {
        for &(a, d) in &s.arrows {
            let len = d[0].hypot(d[1]);
            if len == 0.0 {
                continue;
            }
            let f = 0.45 * s.arrow_spacing / longest;
            let (x_a, y_a) = (px(a[0]), py(a[1]));
            let (x_b, y_b) = (px(a[0] + f * d[0]), py(a[1] + f * d[1]));
            let _ = writeln!(o, r#"<line x1="{x_a:.2}" y1="{y_a:.2}" x2="{x_b:.2}" y2="{y_b:.2}"/>"#);
            let (ux, uy) = (x_b - x_a, y_b - y_a);
            let n = ux.hypot(uy);
            if n > 1.5 {
                let (ux, uy) = (ux / n, uy / n);
                let head = 3.5;
                let _ = writeln!(
                    o,
                    r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}"/>"#,
                    x_b,
                    y_b,
                    x_b - head * ux + 0.6 * head * uy,
                    y_b - head * uy - 0.6 * head * ux,
                    x_b - head * ux - 0.6 * head * uy,
                    y_b - head * uy + 0.6 * head * ux
                );
            }
        }
    }
    let _ = writeln!(o, "</g>");
    let _ = writeln!(o, r##"<g id="samples" fill="#ffd700" stroke="#8a6d00" stroke-width="0.8">"##);
    for p in &s.stars {
        let _ = writeln!(o, r#"<polygon points="{}"/>"#, star(px(p[0]), py(p[1]), 7.0));
    }
    let _ = writeln!(o, "</g>");
    if s.path.len() > 1 {
        let pts: Vec<String> = s.path.iter().map(|p| format!("{:.2},{:.2}", px(p[0]), py(p[1]))).collect();
        let _ = writeln!(
            o,
            r#"<polyline id="path" points="{}" fill="none" stroke="black" stroke-width="1.6"/>"#,
            pts.join(" ")
        );
    }
    let _ = writeln!(
        o,
        r#"<circle id="factual" cx="{:.2}" cy="{:.2}" r="5" fill="white" stroke="black" stroke-width="1.6"/>"#,
        px(s.factual[0]),
        py(s.factual[1])
    );
    if let Some((c, k)) = s.counterfactual {
        let _ = writeln!(
            o,
            r#"<circle id="counterfactual" cx="{:.2}" cy="{:.2}" r="5" fill="{}" stroke="black" stroke-width="1.6"/>"#,
            px(c[0]),
            py(c[1]),
            colour(k)
        );
    }
    let _ = writeln!(
        o,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(
        o,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(&s.title)
    );
    let _ = writeln!(o, "</svg>");
    o
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// The factual a plot uses: the configured test position, or the first
/// factual the benchmark draws in run 0.
pub fn plot_case(cfg: &BenchConfig, ws: &Workspace, wi: usize, mi: usize) -> Result<Case> {
    let ds = &ws.data;
    let mut case = match cfg.plot.factual {
        Some(pos) => {
            let row = *ds.splits.test.get(pos).ok_or_else(|| {
                config_error(format!("plot.factual {pos} is outside the test split of `{}`", ds.name))
            })?;
            let pred = ws.models[mi].model.predict_label(&Tensor::row_vector(ds.x.row(row).to_vec()))?[0];
            let target = (0..ds.n_classes()).find(|&k| k != pred).unwrap_or(0);
            Case { workspace: wi, model: mi, run: 0, index: 0, row, target }
        }
        None => sample_cases(&BenchConfig { n_factuals: 1, ..cfg.clone() }, ws, wi, mi, 0)?.remove(0),
    };
    if let Some(t) = cfg.plot.target {
        if t >= ds.n_classes() {
            return Err(config_error(format!("plot.target {t} out of range")));
        }
        case.target = t;
    }
    Ok(case)
}

/// Write `plots/<dataset>-<model>-<generator>.svg` and the matching trace
/// CSV for every selected cell.
pub fn plot(cfg: &BenchConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(&cfg.out);
    let datasets: Vec<_> = match &cfg.plot.dataset {
        Some(n) => vec![cfg.dataset(n)?],
        None => cfg.datasets.iter().collect(),
    };
    let models: Vec<_> = match &cfg.plot.model {
        Some(n) => vec![cfg.model(n)?],
        None => cfg.models.iter().collect(),
    };
    let generators = if cfg.plot.generators.is_empty() { cfg.generators.clone() } else { cfg.plot.generators.clone() };
    let workspaces = prepare(cfg, &layout, &datasets, &models)?;
    let projections: Vec<Projection> =
        workspaces.iter().map(|ws| Projection::for_workspace(ws, cfg.plot.project_pca)).collect::<Result<_>>()?;
    let dir = layout.plots()?;
    let mut written = Vec::new();
    for (wi, ws) in workspaces.iter().enumerate() {
        for mi in 0..ws.models.len() {
            let case = plot_case(cfg, ws, wi, mi)?;
            let keys = vec![
                SampleKey::for_case(&case, Purpose::Metric, false),
                SampleKey::for_case(&case, Purpose::Penalty, false),
            ];
            let samples = draw_samples(cfg, &workspaces, keys)?;
            let xhat = &samples[&SampleKey::for_case(&case, Purpose::Metric, false)];
            let penalty = samples.get(&SampleKey::for_case(&case, Purpose::Penalty, false));
            for &kind in &generators {
                let variant = Variant::configured(cfg, kind)?;
                let result = match search(ws, &case, &variant, penalty) {
                    Ok(r) => Some(r),
                    Err(e) => {
                        warn!("{} {} {}: {e:#}", ws.data.name, ws.models[mi].name, kind.name());
                        None
                    }
                };
                let scene = build_scene(&SceneInput {
                    ws,
                    case: &case,
                    variant: &variant,
                    result: result.as_ref(),
                    xhat,
                    penalty,
                    projection: &projections[wi],
                    resolution: cfg.plot.resolution,
                    arrows: cfg.plot.arrows,
                })?;
                let stem = format!("{}-{}-{}", ws.data.name, ws.models[mi].name, kind.name());
                let path = dir.join(format!("{stem}.svg"));
                std::fs::write(&path, render_svg(&scene))?;
                if let Some(r) = &result {
                    r.write_trace_csv(&dir.join(format!("{stem}-trace.csv")))?;
                }
                info!("wrote {}", path.display());
                written.push(path);
            }
        }
    }
    Ok(written)
}
