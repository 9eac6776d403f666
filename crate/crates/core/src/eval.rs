//! Oracle-based edit fidelity and frozen-feature analogues of the frame
//! consistency and directional text-video agreement metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::{uniform_steps, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::models::compose::{edit_clip, sample_variant};
use crate::models::unet::features;
use crate::models::{Binder, Conds, Model, ModelConfig, ParamStore, Variant};
use crate::numerics::{Tensor, Var};
use crate::par;
use crate::rng::Stream;
use crate::vocab::Token;
use crate::worldgen::ppm::write_grid;
use crate::worldgen::EvalItem;

/// Reported for identical clips.
pub const PSNR_CAP: f64 = 99.0;

/// PSNR in dB for pixels in `[-1, 1]` (peak-to-peak 2).
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((20.0 * (2.0 / mse.sqrt()).log10()).min(PSNR_CAP))
}

/// Clip PSNR and the PSNR of every frame.
pub fn edit_fidelity(output: &Tensor, oracle: &Tensor) -> Result<(f64, Vec<f64>)> {
    let all = psnr(output, oracle)?;
    let frames = (0..output.shape()[0])
        .map(|f| psnr(&output.slice0(f, 1)?, &oracle.slice0(f, 1)?))
        .collect::<Result<_>>()?;
    Ok((all, frames))
}

/// The frozen feature network: encoder skip and middle features pooled to
/// the middle resolution, each channel centered over space, one vector per frame.
pub struct FeatureNet<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a ModelConfig,
}

impl FeatureNet<'_> {
    pub fn frames(&self, clip: &Tensor) -> Result<Vec<Vec<f64>>> {
        let b = Binder::frozen(self.params);
        let s = features(&b, self.cfg, &Var::constant(clip.clone()))?;
        let f = Var::concat(&[s.s2.avg_pool2x()?, s.mid], 1)?;
        let [n, c, h, w]: [usize; 4] = f.shape().try_into().expect("encoder output is rank 4");
        let hw = h * w;
        let d = f.value().data();
        Ok((0..n)
            .map(|i| {
                let mut v = Vec::with_capacity(c * hw);
                for ch in 0..c {
                    let plane = &d[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    let mean = plane.iter().map(|&x| x as f64).sum::<f64>() / hw as f64;
                    v.extend(plane.iter().map(|&x| x as f64 - mean));
                }
                v
            })
            .collect())
    }
}

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a == b {
        return a.iter().any(|&x| x != 0.0).then_some(1.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean cosine between consecutive frames' feature vectors.
pub fn temporal_consistency(video: &Tensor, net: &FeatureNet) -> Result<f64> {
    if video.rank() != 4 || video.shape()[0] < 2 {
        return Err(invalid("temporal_consistency", "needs a clip of at least 2 frames"));
    }
    let v = net.frames(video)?;
    let sims: Vec<f64> = v.windows(2).map(|w| cosine(&w[0], &w[1]).unwrap_or(0.0)).collect();
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// Cosine between the feature change input→output and input→oracle.
/// Returns `(0, true)` when either change is zero.
pub fn directional_agreement(input: &Tensor, output: &Tensor, oracle: &Tensor, net: &FeatureNet) -> Result<(f64, bool)> {
    if input.shape() != output.shape() || input.shape() != oracle.shape() {
        return Err(invalid("directional_agreement", "input, output and oracle shapes differ"));
    }
    let flat = |t: &Tensor| -> Result<Vec<f64>> { Ok(net.frames(t)?.concat()) };
    let fi = flat(input)?;
    let delta = |t: &Tensor| -> Result<Vec<f64>> {
        if t.bit_eq(input) {
            return Ok(vec![0.0; fi.len()]);
        }
        Ok(flat(t)?.iter().zip(&fi).map(|(a, b)| a - b).collect())
    };
    let (d_out, d_or) = (delta(output)?, delta(oracle)?);
    Ok(match cosine(&d_out, &d_or) {
        Some(c) => (c, false),
        None => (0.0, true),
    })
}

/// MSE between output and oracle over pixels the oracle leaves unchanged
/// (all channels equal to the input). Zero when the edit touches every pixel.
pub fn unchanged_region_mse(input: &Tensor, output: &Tensor, oracle: &Tensor) -> Result<f64> {
    if input.shape() != output.shape() || input.shape() != oracle.shape() || input.rank() != 4 {
        return Err(invalid("unchanged_region_mse", "expected equal [F, C, H, W] shapes"));
    }
    let [f, c, h, w]: [usize; 4] = input.shape().try_into().expect("rank checked");
    let (i, o, r) = (input.data(), output.data(), oracle.data());
    let plane = h * w;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for fi in 0..f {
        for p in 0..plane {
            let idx = |ch: usize| (fi * c + ch) * plane + p;
            if (0..c).all(|ch| i[idx(ch)] == r[idx(ch)]) {
                for ch in 0..c {
                    sum += (o[idx(ch)] as f64 - r[idx(ch)] as f64).powi(2);
                }
                count += c;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemMetrics {
    pub id: String,
    pub task: String,
    pub edit_fidelity_db: f64,
    pub frame_psnr: Vec<f64>,
    pub temporal_consistency: f64,
    pub directional_agreement: f64,
    /// Directional agreement had a zero change vector.
    pub da_flagged: bool,
    pub unchanged_region_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMeta {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub items: Vec<ItemMetrics>,
}

/// Per-metric arithmetic means over items.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub edit_fidelity_db: f64,
    pub temporal_consistency: f64,
    pub directional_agreement: f64,
    pub unchanged_region_mse: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricsReport {
    pub fn aggregate(&self) -> Aggregate {
        Aggregate {
            edit_fidelity_db: mean(self.items.iter().map(|i| i.edit_fidelity_db)),
            temporal_consistency: mean(self.items.iter().map(|i| i.temporal_consistency)),
            directional_agreement: mean(self.items.iter().map(|i| i.directional_agreement)),
            unchanged_region_mse: mean(self.items.iter().map(|i| i.unchanged_region_mse)),
        }
    }

    /// `report.csv`: one row per item, sorted by id.
    pub fn to_csv(&self) -> String {
        let mut items: Vec<&ItemMetrics> = self.items.iter().collect();
        items.sort_by(|a, b| a.id.cmp(&b.id));
        let mut s = String::from("item_id,task,edit_fidelity_db,temporal_consistency,directional_agreement,unchanged_region_mse\n");
        for i in items {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.8}",
                i.id, i.task, i.edit_fidelity_db, i.temporal_consistency, i.directional_agreement, i.unchanged_region_mse
            );
        }
        s
    }

    /// Run metadata and aggregates as `key = value` lines.
    pub fn summary(&self) -> String {
        let a = self.aggregate();
        let flagged = self.items.iter().filter(|i| i.da_flagged).count();
        format!(
            "label = {}\nconfig_hash = {}\nseed = {}\niteration = {}\nitems = {}\nedit_fidelity_db = {:.6}\ntemporal_consistency = {:.6}\ndirectional_agreement = {:.6}\ndirectional_agreement_flagged = {}\nunchanged_region_mse = {:.8}\nnot_modeled = PickScore, human ratings\n",
            self.meta.label,
            self.meta.config_hash,
            self.meta.seed,
            self.meta.iteration,
            self.items.len(),
            a.edit_fidelity_db,
            a.temporal_consistency,
            a.directional_agreement,
            flagged,
            a.unchanged_region_mse
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}

/// What produces the edited clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Editor {
    Model(Variant),
    /// The analytic oracle itself.
    Oracle,
    /// Returns the input unchanged.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// DDIM steps of the evaluated variant.
    pub steps: usize,
    /// DDIM steps of the edit teacher's first frame.
    pub first_steps: usize,
    /// Items dumped as input | output | oracle PPM grids.
    pub ppm_items: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps: 3,
            first_steps: 16,
            ppm_items: 8,
            seed: 0,
        }
    }
}

/// Edit one eval clip. The noise depends only on the seed and the item id.
pub fn edit_item(model: &Model, editor: Editor, item: &EvalItem, sched: &NoiseSchedule, cfg: &EvalConfig) -> Result<Tensor> {
    let p = &item.point;
    match editor {
        Editor::Oracle => Ok(item.target.clone()),
        Editor::Identity => Ok(p.c_vid.clone()),
        Editor::Model(variant) => edit_video(model, variant, &p.c_vid, &p.c_out, &p.c_instruct, &p.id, sched, cfg),
    }
}

/// Edit `video` with `variant`, drawing noise from `(cfg.seed, key)`. The
/// first frame (when the model is first-frame conditioned) comes from psi
/// with `cfg.first_steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn edit_video(model: &Model, variant: Variant, video: &Tensor, c_out: &[Token], c_instruct: &[Token], key: &str, sched: &NoiseSchedule, cfg: &EvalConfig) -> Result<Tensor> {
    let mut rng = Stream::new(cfg.seed).split("eval").split(key);
    let steps = uniform_steps(cfg.steps, sched.steps())?;
    let first = if model.cfg.first_frame && variant != Variant::Psi {
        let frame0 = Var::constant(video.slice0(0, 1)?);
        let c_out = [c_out.to_vec()];
        let c_ins = [c_instruct.to_vec()];
        let conds = Conds {
            frames: 1,
            c_out: &c_out,
            c_instruct: Some(&c_ins),
            c_vid: Some(&frame0),
            first: None,
        };
        let fs = uniform_steps(cfg.first_steps, sched.steps())?;
        Some(sample_variant(model, Variant::Psi, &conds, frame0.shape(), &fs, sched, &mut rng.split("first"))?)
    } else {
        None
    };
    edit_clip(model, variant, video, c_out, c_instruct, first.as_ref(), &steps, sched, &mut rng)
}

/// Metrics of one (input, output, oracle) triple.
pub fn score_item(item: &EvalItem, output: &Tensor, net: &FeatureNet) -> Result<ItemMetrics> {
    let input = &item.point.c_vid;
    let (ef, frames) = edit_fidelity(output, &item.target)?;
    let (da, flagged) = directional_agreement(input, output, &item.target, net)?;
    Ok(ItemMetrics {
        id: item.point.id.clone(),
        task: item.point.task.name().to_string(),
        edit_fidelity_db: ef,
        frame_psnr: frames,
        temporal_consistency: temporal_consistency(output, net)?,
        directional_agreement: da,
        da_flagged: flagged,
        unchanged_region_mse: unchanged_region_mse(input, output, &item.target)?,
    })
}

/// Edit and score every eval item. `features` supplies the frozen feature
/// network (the pretrained backbone). PPM triplets of the first
/// `cfg.ppm_items` items (by id) go to `ppm_dir` when given.
pub fn evaluate_run(
    model: &Model,
    editor: Editor,
    features: &ParamStore,
    items: &[EvalItem],
    sched: &NoiseSchedule,
    cfg: &EvalConfig,
    meta: RunMeta,
    ppm_dir: Option<&Path>,
) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(invalid("evaluate_run", "empty eval set"));
    }
    for it in items {
        if it.target.shape() != it.point.c_vid.shape() {
            return Err(invalid("evaluate_run", format!("item {} has no matching oracle clip", it.point.id)));
        }
    }
    let net = FeatureNet {
        params: features,
        cfg: &model.cfg,
    };
    let outs = par::map(items.len(), |i| -> Result<(ItemMetrics, Tensor)> {
        let out = edit_item(model, editor, &items[i], sched, cfg)?;
        Ok((score_item(&items[i], &out, &net)?, out))
    });
    let mut metrics = Vec::with_capacity(items.len());
    let mut clips = BTreeMap::new();
    for (i, r) in outs.into_iter().enumerate() {
        let (m, out) = r?;
        clips.insert(items[i].point.id.clone(), (i, out));
        metrics.push(m);
    }
    if let Some(dir) = ppm_dir {
        for (id, (i, out)) in clips.iter().take(cfg.ppm_items) {
            write_grid(&dir.join(format!("{id}.ppm")), &[&items[*i].point.c_vid, out, &items[*i].target], 4)?;
        }
    }
    Ok(MetricsReport { meta, items: metrics })
}

/// One `report.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub task: String,
    pub values: [f64; 4],
}

pub const METRICS: [&str; 4] = ["edit_fidelity_db", "temporal_consistency", "directional_agreement", "unchanged_region_mse"];

pub fn parse_report(text: &str, origin: &Path) -> Result<Vec<ReportRow>> {
    let fmt = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fmt("empty report".into()))?;
    if header != "item_id,task,edit_fidelity_db,temporal_consistency,directional_agreement,unchanged_region_mse" {
        return Err(fmt(format!("unexpected header `{header}`")));
    }
    lines
        .enumerate()
        .map(|(n, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != 6 {
                return Err(fmt(format!("line {}: expected 6 cells", n + 2)));
            }
            let mut values = [0.0; 4];
            for (v, c) in values.iter_mut().zip(&cells[2..]) {
                *v = c.parse().map_err(|_| fmt(format!("line {}: bad number `{c}`", n + 2)))?;
            }
            Ok(ReportRow {
                id: cells[0].to_string(),
                task: cells[1].to_string(),
                values,
            })
        })
        .collect()
}

/// Per-metric means of two reports on their shared items, the delta
/// `b - a`, and the fraction of shared items where `b` is strictly better
/// (lower is better for the unchanged-region error).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricComparison {
    pub metric: &'static str,
    pub mean_a: f64,
    pub mean_b: f64,
    pub delta: f64,
    pub win_rate_b: f64,
}

pub fn compare(a: &[ReportRow], b: &[ReportRow]) -> Result<Vec<MetricComparison>> {
    let bm: BTreeMap<&str, &ReportRow> = b.iter().map(|r| (r.id.as_str(), r)).collect();
    let pairs: Vec<(&ReportRow, &ReportRow)> = a.iter().filter_map(|r| bm.get(r.id.as_str()).map(|s| (r, *s))).collect();
    if pairs.is_empty() {
        return Err(invalid("compare", "the reports share no items"));
    }
    Ok(METRICS
        .iter()
        .enumerate()
        .map(|(m, &name)| {
            let lower_better = name == "unchanged_region_mse";
            let ma = mean(pairs.iter().map(|(x, _)| x.values[m]));
            let mb = mean(pairs.iter().map(|(_, y)| y.values[m]));
            let wins = pairs
                .iter()
                .filter(|(x, y)| if lower_better { y.values[m] < x.values[m] } else { y.values[m] > x.values[m] })
                .count();
            MetricComparison {
                metric: name,
                mean_a: ma,
                mean_b: mb,
                delta: mb - ma,
                win_rate_b: wins as f64 / pairs.len() as f64,
            }
        })
        .collect())
}

pub fn comparison_csv(rows: &[MetricComparison]) -> String {
    let mut s = String::from("metric,mean_a,mean_b,delta,win_rate_b\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.4}", r.metric, r.mean_a, r.mean_b, r.delta, r.win_rate_b);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::worldgen::{build_datasets, DatasetPlan};

    fn model() -> Model {
        let cfg = ModelConfig {
            c1: 8,
            c2: 16,
            emb: 16,
            groups: 4,
            instr_dim: 4,
            ..Default::default()
        };
        let rng = Stream::new(2);
        let mut m = Model::new(cfg, &rng).unwrap();
        m.attach_edit(&rng).unwrap();
        m.attach_video(&rng).unwrap();
        m
    }

    #[test]
    fn psnr_closed_forms() {
        let z = Tensor::zeros(&[1, 3, 4, 4]);
        assert_eq!(psnr(&z, &z).unwrap(), PSNR_CAP);
        let off = z.map(|_| 0.1);
        assert!((psnr(&z, &off).unwrap() - 20.0 * (2.0f64 / 0.1).log10()).abs() < 1e-4);
        let ones = Tensor::ones(&[1, 3, 4, 4]);
        assert!((psnr(&z, &ones).unwrap() - 20.0 * 2.0f64.log10()).abs() < 1e-9);
        assert_eq!(psnr(&off, &z).unwrap(), psnr(&z, &off).unwrap());
        assert!(psnr(&z, &Tensor::zeros(&[1, 3, 4, 5])).is_err());
    }

    #[test]
    fn static_video_is_perfectly_consistent() {
        let m = model();
        let net = FeatureNet {
            params: &m.params,
            cfg: &m.cfg,
        };
        let frame = Stream::new(4).normal_tensor(&[1, 3, 16, 16]);
        let clip = Tensor::cat0(&[frame.clone(), frame.clone(), frame]).unwrap();
        assert_eq!(temporal_consistency(&clip, &net).unwrap(), 1.0);
        assert!(temporal_consistency(&clip.slice0(0, 1).unwrap(), &net).is_err());
    }

    #[test]
    fn white_noise_frames_are_uncorrelated() {
        let cfg = ModelConfig {
            c1: 16,
            c2: 32,
            emb: 32,
            groups: 4,
            ..Default::default()
        };
        let m = Model::new(cfg, &Stream::new(2)).unwrap();
        let net = FeatureNet {
            params: &m.params,
            cfg: &m.cfg,
        };
        let tcs: Vec<f64> = (0..100)
            .map(|seed| temporal_consistency(&Stream::new(seed).normal_tensor(&[4, 3, 16, 16]), &net).unwrap())
            .collect();
        let mean = tcs.iter().sum::<f64>() / 100.0;
        assert!(mean.abs() < 0.2, "{mean}");
        assert!(tcs.iter().all(|t| t.abs() < 0.5));
    }

    #[test]
    fn directional_agreement_edge_cases() {
        let m = model();
        let net = FeatureNet {
            params: &m.params,
            cfg: &m.cfg,
        };
        let mut r = Stream::new(6);
        let input = r.normal_tensor(&[2, 3, 16, 16]);
        let oracle = r.normal_tensor(&[2, 3, 16, 16]);
        assert_eq!(directional_agreement(&input, &oracle, &oracle, &net).unwrap(), (1.0, false));
        assert_eq!(directional_agreement(&input, &input, &oracle, &net).unwrap(), (0.0, true));
    }

    #[test]
    fn unchanged_region_ignores_the_edit_mask() {
        let input = Tensor::zeros(&[1, 3, 2, 2]);
        let mut o = vec![0.0; 12];
        o[0] = 1.0;
        let oracle = Tensor::from_vec(&[1, 3, 2, 2], o).unwrap();
        let mut out = vec![0.0; 12];
        out[0] = -1.0;
        out[1] = 0.5;
        let output = Tensor::from_vec(&[1, 3, 2, 2], out).unwrap();
        let want = 0.25 / 9.0;
        assert!((unchanged_region_mse(&input, &output, &oracle).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn oracle_scores_perfectly_and_reports_are_deterministic() {
        let m = model();
        let mut plan = DatasetPlan::uniform(3, 11);
        plan.frames = 2;
        plan.n_eval = 4;
        let d = build_datasets(&plan).unwrap();
        let sched = NoiseSchedule::new(16, ScheduleKind::Cosine, true).unwrap();
        let cfg = EvalConfig {
            steps: 2,
            first_steps: 2,
            ..Default::default()
        };
        let rep = evaluate_run(&m, Editor::Oracle, &m.params, &d.eval, &sched, &cfg, RunMeta::default(), None).unwrap();
        for i in &rep.items {
            assert_eq!(i.edit_fidelity_db, PSNR_CAP);
            assert_eq!(i.directional_agreement, if i.da_flagged { 0.0 } else { 1.0 });
        }
        let dir = tempfile::tempdir().unwrap();
        let run = |items: &[EvalItem]| {
            evaluate_run(&m, Editor::Model(Variant::Eta), &m.params, items, &sched, &cfg, RunMeta::default(), Some(dir.path()))
                .unwrap()
                .to_csv()
        };
        let a = run(&d.eval);
        let mut rev = d.eval.clone();
        rev.reverse();
        assert_eq!(a, run(&rev));
        assert_eq!(a, run(&d.eval));
        assert!(dir.path().join(format!("{}.ppm", d.eval[0].point.id)).exists());
        let rows = parse_report(&a, Path::new("report.csv")).unwrap();
        assert_eq!(rows.len(), 4);
        let agg = rep.aggregate();
        let want = rep.items.iter().map(|i| i.temporal_consistency).sum::<f64>() / 4.0;
        assert_eq!(agg.temporal_consistency, want);
    }

    #[test]
    fn compare_reports_deltas_and_wins() {
        let row = |id: &str, v: [f64; 4]| ReportRow {
            id: id.into(),
            task: "local".into(),
            values: v,
        };
        let a = vec![row("a", [10.0, 0.5, 0.1, 0.2]), row("b", [20.0, 0.5, 0.1, 0.2])];
        let b = vec![row("b", [22.0, 0.4, 0.1, 0.1]), row("a", [11.0, 0.6, 0.1, 0.3]), row("c", [0.0; 4])];
        let c = compare(&a, &b).unwrap();
        assert_eq!(c[0].delta, 1.5);
        assert_eq!(c[0].win_rate_b, 1.0);
        assert_eq!(c[1].win_rate_b, 0.5);
        assert_eq!(c[2].win_rate_b, 0.0);
        assert_eq!(c[3].win_rate_b, 0.5);
        assert!(comparison_csv(&c).starts_with("metric,mean_a,mean_b,delta,win_rate_b\n"));
        assert!(compare(&a, &[row("z", [0.0; 4])]).is_err());
    }
}
