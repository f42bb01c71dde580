//! Configuration sweeps along the four ablation axes.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::metrics::{evaluate, LabeledScores, DEFAULT_THRESHOLD};
use crate::model::{HsqModel, ModelConfig, Preset};
use crate::numerics::ops;
use crate::pyramid::{read_pyramid, synth_pair, FeaturePyramid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    StageScheme,
    StageRatio,
    Query,
    Moe,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::StageScheme, Axis::StageRatio, Axis::Query, Axis::Moe];

    pub fn name(self) -> &'static str {
        match self {
            Axis::StageScheme => "stage_scheme",
            Axis::StageRatio => "stage_ratio",
            Axis::Query => "query",
            Axis::Moe => "moe",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = crate::HsqError;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| config(format!("unknown axis `{s}` (valid: stage_scheme, stage_ratio, query, moe)")))
    }
}

pub const STAGE_SCHEMES: [&[usize]; 4] = [&[4], &[3, 4], &[2, 3, 4], &[1, 2, 3, 4]];

/// Depth ratios of common hierarchical backbones.
pub const STAGE_RATIOS: [[usize; 4]; 8] = [
    [1, 1, 1, 1],
    [2, 2, 6, 2],
    [2, 2, 18, 2],
    [1, 2, 7, 2],
    [3, 4, 6, 3],
    [1, 3, 6, 3],
    [1, 1, 3, 1],
    [1, 1, 9, 1],
];

pub const QUERY_COUNTS: [usize; 5] = [50, 100, 200, 300, 400];
pub const QUERY_DIMS: [usize; 4] = [96, 192, 384, 768];
pub const EXPERT_COUNTS: [usize; 3] = [2, 4, 8];

/// Routing arm of the expert axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    TopK(usize),
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub config: ModelConfig,
}

fn stages_label(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("+")
}

fn ratio_label(r: &[usize; 4]) -> String {
    r.iter().map(usize::to_string).collect::<Vec<_>>().join(":")
}

pub fn scheme_point(base: &ModelConfig, stages: &[usize]) -> GridPoint {
    GridPoint {
        label: format!("stages={}", stages_label(stages)),
        config: ModelConfig {
            enabled_stages: stages.to_vec(),
            ..base.clone()
        },
    }
}

pub fn ratio_point(base: &ModelConfig, ratio: [usize; 4]) -> GridPoint {
    GridPoint {
        label: format!("ratio={}", ratio_label(&ratio)),
        config: ModelConfig {
            stage_depths: ratio,
            ..base.clone()
        },
    }
}

pub fn query_point(base: &ModelConfig, q: usize, d: usize) -> GridPoint {
    GridPoint {
        label: format!("Q={q},D={d}"),
        config: ModelConfig {
            queries: q,
            dim: d,
            heads: None,
            ..base.clone()
        },
    }
}

pub fn moe_point(base: &ModelConfig, experts: usize, routing: Routing) -> GridPoint {
    let (k, dense, arm) = match routing {
        Routing::TopK(k) => (k, false, format!("top{k}")),
        Routing::Dense => (experts, true, "dense".to_string()),
    };
    GridPoint {
        label: format!("E={experts},{arm}"),
        config: ModelConfig {
            experts,
            top_k: k,
            dense_moe: dense,
            ..base.clone()
        },
    }
}

/// The configuration the sweeps vary around.
pub fn base_config() -> ModelConfig {
    ModelConfig::preset(Preset::Base)
}

pub fn default_grid(axis: Axis, base: &ModelConfig) -> Vec<GridPoint> {
    match axis {
        Axis::StageScheme => STAGE_SCHEMES.iter().map(|s| scheme_point(base, s)).collect(),
        Axis::StageRatio => STAGE_RATIOS.iter().map(|&r| ratio_point(base, r)).collect(),
        Axis::Query => QUERY_COUNTS
            .iter()
            .flat_map(|&q| QUERY_DIMS.iter().map(move |&d| query_point(base, q, d)))
            .collect(),
        Axis::Moe => EXPERT_COUNTS
            .iter()
            .flat_map(|&e| {
                [Routing::TopK(1), Routing::TopK(2), Routing::Dense]
                    .into_iter()
                    .map(move |r| moe_point(base, e, r))
            })
            .collect(),
    }
}

fn nums(s: &str, sep: char, what: &str) -> Result<Vec<usize>> {
    s.split(sep)
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| config(format!("bad {what} `{t}` in grid")))
        })
        .collect()
}

/// Parses an explicit grid; points are separated by `;`.
///
/// * stage_scheme: `4;3,4;1,2,3,4`
/// * stage_ratio: `2:2:6:2;1:1:1:1`
/// * query: `50x96;400x768`
/// * moe: `4:1;4:2;8:dense`
pub fn parse_grid(axis: Axis, base: &ModelConfig, spec: &str) -> Result<Vec<GridPoint>> {
    let points = spec
        .split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| match axis {
            Axis::StageScheme => Ok(scheme_point(base, &nums(p, ',', "stage")?)),
            Axis::StageRatio => {
                let v = nums(p, ':', "depth")?;
                let r: [usize; 4] = v
                    .try_into()
                    .map_err(|_| config(format!("stage ratio `{p}` needs four depths")))?;
                Ok(ratio_point(base, r))
            }
            Axis::Query => {
                let v = nums(p, 'x', "query size")?;
                match v[..] {
                    [q, d] => Ok(query_point(base, q, d)),
                    _ => Err(config(format!("query point `{p}` must be QxD"))),
                }
            }
            Axis::Moe => {
                let (e, r) = p
                    .split_once(':')
                    .ok_or_else(|| config(format!("moe point `{p}` must be E:k or E:dense")))?;
                let e = nums(e, ',', "expert count")?[0];
                let routing = if r.trim() == "dense" {
                    Routing::Dense
                } else {
                    Routing::TopK(nums(r, ',', "top-k")?[0])
                };
                Ok(moe_point(base, e, routing))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if points.is_empty() {
        return Err(config("grid is empty"));
    }
    for p in &points {
        p.config.validate()?;
    }
    Ok(points)
}

/// Labeled pyramid pairs for metric columns.
pub struct LabeledFixture {
    pub items: Vec<(String, FeaturePyramid, FeaturePyramid, bool)>,
}

#[derive(Deserialize)]
struct ManifestRow {
    id: String,
    cnn: String,
    vit: String,
    label: u8,
}

impl LabeledFixture {
    /// Manifest columns `id,cnn,vit,label`; relative paths resolve against
    /// the manifest's directory.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(manifest)?;
        let mut items = Vec::new();
        for row in rdr.deserialize::<ManifestRow>() {
            let row = row?;
            if row.label > 1 {
                return Err(config(format!("fixture `{}` label must be 0 or 1", row.id)));
            }
            let cnn = read_pyramid(dir.join(&row.cnn))?;
            let vit = read_pyramid(dir.join(&row.vit))?;
            items.push((row.id, cnn, vit, row.label == 1));
        }
        if items.is_empty() {
            return Err(config("labeled fixture is empty"));
        }
        Ok(Self { items })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub label: String,
    pub queries: usize,
    pub dim: usize,
    pub stage_depths: String,
    pub enabled_stages: String,
    pub experts: usize,
    pub top_k: usize,
    pub dense: bool,
    pub param_count: usize,
    pub forward_ms: f64,
    pub output_rows: usize,
    pub output_cols: usize,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

pub struct RunSettings<'a> {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; 4],
    pub seed: u64,
    pub fixture: Option<&'a LabeledFixture>,
}

/// Builds the point's model, checks every intermediate shape and times one
/// forward pass on a synthetic pyramid pair.
pub fn run_point(axis: Axis, point: &GridPoint, s: &RunSettings<'_>) -> Result<AblationRow> {
    let cfg = &point.config;
    let model = HsqModel::build(cfg.clone(), s.channels, s.seed)?;
    let (cnn, vit) = synth_pair(s.height, s.width, s.channels, s.seed)?;
    let t = Instant::now();
    let (logits, diag) = model.forward(&cnn, &vit)?;
    let forward_ms = t.elapsed().as_secs_f64() * 1e3;
    if diag.stages.iter().any(|d| d.output_shape != (cfg.queries, cfg.dim)) {
        return Err(contract(format!("{}: query shape changed across stages", point.label)));
    }
    if logits.shape() != (1, cfg.num_classes) || !logits.is_finite() {
        return Err(contract(format!("{}: invalid logits {:?}", point.label, logits.shape())));
    }
    let (mut accuracy, mut f1, mut auc) = (None, None, None);
    if let Some(fx) = s.fixture {
        let mut scores = Vec::with_capacity(fx.items.len());
        let mut labels = Vec::with_capacity(fx.items.len());
        for (_, c, v, l) in &fx.items {
            let p = ops::softmax_rows(&model.forward(c, v)?.0)?;
            scores.push(p.get(0, p.cols() - 1));
            labels.push(*l);
        }
        let r = evaluate(&LabeledScores::new(scores, labels)?, DEFAULT_THRESHOLD)?;
        accuracy = Some(r.confusion.accuracy);
        f1 = r.confusion.f1;
        auc = Some(r.auc);
    }
    Ok(AblationRow {
        axis: axis.name().to_string(),
        label: point.label.clone(),
        queries: cfg.queries,
        dim: cfg.dim,
        stage_depths: ratio_label(&cfg.stage_depths),
        enabled_stages: stages_label(&cfg.enabled_stages),
        experts: cfg.experts,
        top_k: cfg.top_k,
        dense: cfg.dense_moe,
        param_count: model.config().param_count(s.channels, s.channels),
        forward_ms,
        output_rows: logits.rows(),
        output_cols: logits.cols(),
        accuracy,
        f1,
        auc,
    })
}

/// Points run one after another so that only one model is resident.
pub fn run_grid(axis: Axis, points: &[GridPoint], s: &RunSettings<'_>) -> Result<Vec<AblationRow>> {
    points.iter().map(|p| run_point(axis, p, s)).collect()
}

/// One header row, then one row per grid point.
pub fn write_csv(rows: &[AblationRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
